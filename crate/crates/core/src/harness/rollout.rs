//! Attention rollout from the CLS output back to the input tokens.
//!
//! Every stage contributes `0.5·A + 0.5·I` with `A` its head-averaged
//! attention; a shift-merge stage counts as uniform attention over the
//! modalities at the same `(t, p)`. Stages compose in execution order
//! inside a layer and layers compose in sequence. Only the CLS row of the
//! product is needed, so it is propagated as a row vector from the top.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{AttentionTrace, ForwardOptions, MmvitModel, StageRecord};
use crate::tensor::Tensor;
use crate::tokenize::{CompressedClip, FieldDims};

/// CLS attribution per input token.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutMap {
    /// One `[T×N]` map per modality, order I, M, R, A.
    pub heatmaps: Vec<Tensor>,
    /// Attribution left on the CLS input row.
    pub cls_mass: f64,
    pub grid: (usize, usize),
}

impl RolloutMap {
    /// Heatmaps plus CLS mass; 1 up to rounding.
    pub fn total(&self) -> f64 {
        self.cls_mass + self.heatmaps.iter().map(Tensor::sum).sum::<f64>()
    }

    /// `modality,frame,patch,value` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("modality,frame,patch,value\n");
        out.push_str(&format!("CLS,,,{}\n", self.cls_mass));
        for (s, map) in self.heatmaps.iter().enumerate() {
            let sym = crate::tokenize::Modality::ALL[s].symbol();
            let n = map.shape()[1];
            for (i, v) in map.data().iter().enumerate() {
                out.push_str(&format!("{sym},{},{},{v}\n", i / n, i % n));
            }
        }
        out
    }
}

/// `v ← v·(0.5·A + 0.5·I)` for a sparse attention matrix.
fn apply_attention(v: &[f64], keys: &[Vec<usize>], weights: &[Vec<f64>]) -> Vec<f64> {
    let mut out: Vec<f64> = v.iter().map(|x| 0.5 * x).collect();
    for (q, (ks, ws)) in keys.iter().zip(weights).enumerate() {
        if v[q] == 0.0 {
            continue;
        }
        for (&k, &w) in ks.iter().zip(ws) {
            out[k] += 0.5 * v[q] * w;
        }
    }
    out
}

fn apply_shift_merge(v: &[f64], dims: &FieldDims) -> Vec<f64> {
    let mut out: Vec<f64> = v.iter().map(|x| 0.5 * x).collect();
    out[0] += 0.5 * v[0];
    let share = 1.0 / dims.modalities as f64;
    for t in 0..dims.frames {
        for p in 0..dims.patches() {
            let mass: f64 = (0..dims.modalities).map(|s| v[dims.row(s, t, p)]).sum();
            for s in 0..dims.modalities {
                out[dims.row(s, t, p)] += 0.5 * mass * share;
            }
        }
    }
    out
}

/// Rolls out a recorded trace.
pub fn rollout_from_trace(trace: &AttentionTrace) -> Result<RolloutMap> {
    let dims = trace
        .dims
        .ok_or_else(|| Error::State("attention trace has no field geometry".into()))?;
    let rows = dims.rows();
    let mut v = vec![0.0; rows];
    v[0] = 1.0;
    for layer in trace.layers.iter().rev() {
        for stage in layer.iter().rev() {
            v = match stage {
                StageRecord::Attention { keys, weights, .. } => {
                    if keys.len() != rows || weights.len() != rows {
                        return Err(Error::dim(format!(
                            "attention record with {} rows, field has {rows}",
                            keys.len()
                        )));
                    }
                    apply_attention(&v, keys, weights)
                }
                StageRecord::ShiftMerge { .. } => apply_shift_merge(&v, &dims),
            };
        }
    }
    let (t, n) = (dims.frames, dims.patches());
    let heatmaps = (0..dims.modalities)
        .map(|s| {
            let start = dims.row(s, 0, 0);
            Tensor::new(&[t, n], v[start..start + t * n].to_vec())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RolloutMap {
        heatmaps,
        cls_mass: v[0],
        grid: (dims.grid_h, dims.grid_w),
    })
}

/// Forward pass with attention recording, then rollout.
pub fn rollout(model: &MmvitModel, clip: &CompressedClip) -> Result<RolloutMap> {
    let out = model.forward_with(
        clip,
        &ForwardOptions {
            trace: true,
            ..Default::default()
        },
    )?;
    rollout_from_trace(out.trace.as_ref().expect("trace requested"))
}

/// Binary 8-bit PGM of a `[T×N]` map, frames stacked vertically on the
/// patch grid and scaled so the maximum maps to 255.
pub fn write_pgm(map: &Tensor, grid: (usize, usize), path: &Path) -> Result<()> {
    let (gh, gw) = grid;
    let t = map.shape()[0];
    if map.shape()[1] != gh * gw {
        return Err(Error::dim(format!(
            "map {:?} does not match grid {gh}x{gw}",
            map.shape()
        )));
    }
    let max = map.data().iter().cloned().fold(0.0, f64::max);
    let mut bytes = format!("P5\n{gw} {}\n255\n", t * gh).into_bytes();
    bytes.extend(map.data().iter().map(|&v| {
        if max > 0.0 {
            (v.max(0.0) / max * 255.0).round() as u8
        } else {
            0
        }
    }));
    fs::write(path, bytes)?;
    Ok(())
}
