//! Helpers shared by the integration tests: finite-difference checks,
//! random fixtures and a naive masked-attention reference.

#![allow(dead_code)]

use mmvit::attention::{AttentionScope, ClsPolicy, MsaParams};
use mmvit::datagen::{generate_clip, DatasetSpec};
use mmvit::tensor::{Rng, Tape, Tensor, Var};
use mmvit::tokenize::{CompressedClip, FieldDims, TokenField};

pub const FD_STEP: f64 = 1e-5;

pub fn rand_tensor(shape: &[usize], rng: &mut Rng) -> Tensor {
    Tensor::rand_uniform(shape, -1.0, 1.0, rng)
}

/// Compares reverse-mode gradients of `f` with central differences on
/// every coordinate of every input. `f` must map its inputs to any
/// tensor; the check contracts it with fixed random weights to a scalar.
/// Returns the worst `|analytic − numeric| / max(1, |analytic|)`.
pub fn grad_check(
    inputs: &[Tensor],
    seed: u64,
    f: impl Fn(&mut Tape, &[Var]) -> Var,
) -> f64 {
    let mut rng = Rng::new(seed);
    let probe_shape = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars);
        tape.shape(out).to_vec()
    };
    let weights = rand_tensor(&probe_shape, &mut rng);
    let eval = |inputs: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars);
        tape.value(out)
            .data()
            .iter()
            .zip(weights.data())
            .map(|(a, b)| a * b)
            .sum()
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars);
    let w = tape.constant(weights.clone());
    let prod = tape.mul(out, w).unwrap();
    let root = tape.sum(prod);
    tape.backward(root).unwrap();

    let mut worst: f64 = 0.0;
    for (i, var) in vars.iter().enumerate() {
        let analytic = tape.grad(*var);
        for j in 0..inputs[i].numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= FD_STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            let a = analytic.data()[j];
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
    }
    worst
}

pub fn random_field(dims: FieldDims, rng: &mut Rng) -> TokenField {
    let tokens = rand_tensor(
        &[dims.modalities, dims.frames, dims.patches(), dims.width],
        rng,
    );
    let cls = rand_tensor(&[dims.width], rng);
    TokenField::new(tokens, cls, (dims.grid_h, dims.grid_w)).unwrap()
}

/// Whether key row `k` is visible to query row `q` under `scope`,
/// decided from coordinates alone.
pub fn in_scope(scope: AttentionScope, dims: &FieldDims, policy: ClsPolicy, q: usize, k: usize) -> bool {
    let cls_involved = policy == ClsPolicy::Global || scope.is_spatial();
    match (dims.coords(q), dims.coords(k)) {
        (None, _) => cls_involved || k == 0,
        (Some(_), None) => cls_involved,
        (Some((s, t, p)), Some((s2, t2, p2))) => {
            let (py, px) = (p / dims.grid_w, p % dims.grid_w);
            let (qy, qx) = (p2 / dims.grid_w, p2 % dims.grid_w);
            match scope {
                AttentionScope::JointStm => true,
                AttentionScope::TimeAcrossModalities => p == p2,
                AttentionScope::SpaceAcrossModalities => t == t2,
                AttentionScope::TimeWithinModality => s == s2 && p == p2,
                AttentionScope::SpaceWithinModality => s == s2 && t == t2,
                AttentionScope::Modality => t == t2 && p == p2,
                AttentionScope::OtherModalities => t == t2 && p == p2 && s != s2,
                AttentionScope::LocalTime { window } => {
                    s == s2 && p == p2 && t / window == t2 / window
                }
                AttentionScope::LocalSpace { tile } => {
                    s == s2 && t == t2 && py / tile.0 == qy / tile.0 && px / tile.1 == qx / tile.1
                }
            }
        }
    }
}

fn matvec_t(w: &Tensor, x: &[f64]) -> Vec<f64> {
    // y = W·x with W [out×in]
    let n = w.shape()[1];
    w.data().chunks(n).map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum()).collect()
}

/// Full joint attention over every row with out-of-scope scores set to
/// −∞, written as an explicit per-query double loop.
pub fn masked_joint_oracle(
    field: &TokenField,
    params: &MsaParams,
    visible: impl Fn(usize, usize) -> bool,
) -> Tensor {
    let x = field.to_matrix();
    let (rows, d) = (x.shape()[0], x.shape()[1]);
    let h = params.heads;
    let dh = d / h;
    let proj = |w: &Tensor| -> Vec<Vec<f64>> { (0..rows).map(|r| matvec_t(w, x.row(r))).collect() };
    let (q, k, v) = (proj(&params.w_q), proj(&params.w_k), proj(&params.w_v));
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; rows * d];
    for i in 0..rows {
        let mut concat = vec![0.0; d];
        for head in 0..h {
            let cols = head * dh..(head + 1) * dh;
            let mut scores = vec![f64::NEG_INFINITY; rows];
            for j in 0..rows {
                if visible(i, j) {
                    scores[j] = cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() * scale;
                }
            }
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            for j in 0..rows {
                let p = exps[j] / z;
                for c in cols.clone() {
                    concat[c] += p * v[j][c];
                }
            }
        }
        let o = match &params.w_o {
            Some(w) => matvec_t(w, &concat),
            None => concat,
        };
        out[i * d..(i + 1) * d].copy_from_slice(&o);
    }
    Tensor::new(&[rows, d], out).unwrap()
}

/// A tiny random clip with the given geometry.
pub fn random_clip(frames: usize, height: usize, width: usize, label: usize, seed: u64) -> CompressedClip {
    let spec = DatasetSpec {
        frames,
        height,
        width,
        clips_per_class: 1,
        seed,
        ..Default::default()
    };
    generate_clip(&spec, 0, label).unwrap().clip
}
