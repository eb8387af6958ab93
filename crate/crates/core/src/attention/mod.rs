//! Attention over token fields.
//!
//! Every attention variant in the model is the same multi-head kernel run
//! with a different key set per query. [`AttentionScope`] generates those
//! key sets from the field geometry; CLS routing is governed by
//! [`ClsPolicy`].

mod mca;
mod window;

pub use mca::{mca_co, mca_merged, mca_shift_merge, shift_merge_mix};
pub use window::{
    choose_tile, conv_kernel_shape, inter_window_conv, inter_window_conv_on_tape, window_partition,
    window_partition_tile, ConvAxis, WindowPartition,
};

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{KeySets, Rng, Tape, Tensor, Var};
use crate::tokenize::{FieldDims, TokenField};

/// The key neighbourhood a patch query attends over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AttentionScope {
    /// Every patch token of every modality and frame.
    JointStm,
    /// Same spatial position, all frames, all modalities.
    TimeAcrossModalities,
    /// Same frame, all positions, all modalities.
    SpaceAcrossModalities,
    /// Same modality and position, all frames.
    TimeWithinModality,
    /// Same modality and frame, all positions.
    SpaceWithinModality,
    /// Same position and frame, all modalities.
    Modality,
    /// Same position and frame, every modality except the query's own.
    OtherModalities,
    /// Same modality and position, frames in the query's temporal window.
    LocalTime { window: usize },
    /// Same modality and frame, positions in the query's spatial tile.
    LocalSpace { tile: (usize, usize) },
}

impl fmt::Display for AttentionScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AttentionScope::JointStm => write!(f, "joint"),
            AttentionScope::TimeAcrossModalities => write!(f, "time-across-modalities"),
            AttentionScope::SpaceAcrossModalities => write!(f, "space-across-modalities"),
            AttentionScope::TimeWithinModality => write!(f, "time"),
            AttentionScope::SpaceWithinModality => write!(f, "space"),
            AttentionScope::Modality => write!(f, "modality"),
            AttentionScope::OtherModalities => write!(f, "other-modalities"),
            AttentionScope::LocalTime { window } => write!(f, "local-time[{window}]"),
            AttentionScope::LocalSpace { tile } => write!(f, "local-space[{}x{}]", tile.0, tile.1),
        }
    }
}

/// How the CLS token takes part in scoped attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum ClsPolicy {
    /// CLS is a key for every patch query and queries the whole field in
    /// every stage.
    #[default]
    Global,
    /// As `Global` in spatial (and joint) stages; elsewhere CLS is neither
    /// a key nor attends to anything but itself.
    SpatialOnly,
}

impl AttentionScope {
    /// Keys per patch query, excluding CLS.
    pub fn cardinality(&self, dims: &FieldDims) -> usize {
        let (s, t, n) = (dims.modalities, dims.frames, dims.patches());
        match *self {
            AttentionScope::JointStm => n * t * s,
            AttentionScope::TimeAcrossModalities => t * s,
            AttentionScope::SpaceAcrossModalities => n * s,
            AttentionScope::TimeWithinModality => t,
            AttentionScope::SpaceWithinModality => n,
            AttentionScope::Modality => s,
            AttentionScope::OtherModalities => s - 1,
            AttentionScope::LocalTime { window } => window,
            AttentionScope::LocalSpace { tile } => tile.0 * tile.1,
        }
    }

    pub fn is_spatial(&self) -> bool {
        matches!(
            self,
            AttentionScope::JointStm
                | AttentionScope::SpaceAcrossModalities
                | AttentionScope::SpaceWithinModality
                | AttentionScope::LocalSpace { .. }
        )
    }

    pub fn validate(&self, dims: &FieldDims) -> Result<()> {
        match *self {
            AttentionScope::OtherModalities if dims.modalities < 2 => Err(Error::config(
                "co-attention needs at least two modalities (empty key set)",
            )),
            AttentionScope::LocalTime { window } if window == 0 || dims.frames % window != 0 => {
                Err(Error::config(format!(
                    "temporal window {window} does not divide {} frames",
                    dims.frames
                )))
            }
            AttentionScope::LocalSpace { tile: (h, w) }
                if h == 0 || w == 0 || dims.grid_h % h != 0 || dims.grid_w % w != 0 =>
            {
                Err(Error::config(format!(
                    "spatial tile {h}x{w} does not divide the {}x{} patch grid",
                    dims.grid_h, dims.grid_w
                )))
            }
            _ => Ok(()),
        }
    }

    /// Key rows for the patch token `(s, t, p)`, ascending, CLS excluded.
    pub fn patch_keys(&self, dims: &FieldDims, s: usize, t: usize, p: usize) -> Vec<usize> {
        let (ns, nt, nn) = (dims.modalities, dims.frames, dims.patches());
        let mut keys = Vec::with_capacity(self.cardinality(dims));
        match *self {
            AttentionScope::JointStm => keys.extend(1..dims.rows()),
            AttentionScope::TimeAcrossModalities => {
                for s2 in 0..ns {
                    for t2 in 0..nt {
                        keys.push(dims.row(s2, t2, p));
                    }
                }
            }
            AttentionScope::SpaceAcrossModalities => {
                for s2 in 0..ns {
                    keys.extend((0..nn).map(|p2| dims.row(s2, t, p2)));
                }
            }
            AttentionScope::TimeWithinModality => {
                keys.extend((0..nt).map(|t2| dims.row(s, t2, p)));
            }
            AttentionScope::SpaceWithinModality => {
                keys.extend((0..nn).map(|p2| dims.row(s, t, p2)));
            }
            AttentionScope::Modality => keys.extend((0..ns).map(|s2| dims.row(s2, t, p))),
            AttentionScope::OtherModalities => keys.extend(
                (0..ns)
                    .filter(|&s2| s2 != s)
                    .map(|s2| dims.row(s2, t, p)),
            ),
            AttentionScope::LocalTime { window } => {
                let start = t / window * window;
                keys.extend((start..start + window).map(|t2| dims.row(s, t2, p)));
            }
            AttentionScope::LocalSpace { tile: (th, tw) } => {
                let (py, px) = (p / dims.grid_w, p % dims.grid_w);
                let (y0, x0) = (py / th * th, px / tw * tw);
                for y in y0..y0 + th {
                    for x in x0..x0 + tw {
                        keys.push(dims.row(s, t, y * dims.grid_w + x));
                    }
                }
            }
        }
        keys
    }

    /// Key rows for every query row of the field matrix (CLS is row 0).
    pub fn key_sets(&self, dims: &FieldDims, policy: ClsPolicy) -> Result<KeySets> {
        self.validate(dims)?;
        let cls_involved = policy == ClsPolicy::Global || self.is_spatial();
        let mut sets = Vec::with_capacity(dims.rows());
        sets.push(if cls_involved {
            (0..dims.rows()).collect()
        } else {
            vec![0]
        });
        for s in 0..dims.modalities {
            for t in 0..dims.frames {
                for p in 0..dims.patches() {
                    let mut keys = Vec::with_capacity(self.cardinality(dims) + 1);
                    if cls_involved {
                        keys.push(0);
                    }
                    keys.extend(self.patch_keys(dims, s, t, p));
                    sets.push(keys);
                }
            }
        }
        Ok(Arc::new(sets))
    }
}

/// Query/key/value/output projections of one multi-head attention block.
///
/// Head `h` owns rows `h·d_h .. (h+1)·d_h` of `w_q`, `w_k` and `w_v`
/// (each `[d×d]`); head outputs are concatenated and mapped by `w_o`.
#[derive(Debug, Clone, PartialEq)]
pub struct MsaParams {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    /// `None` fixes the output projection to the identity.
    pub w_o: Option<Tensor>,
    pub heads: usize,
}

impl MsaParams {
    pub fn init(width: usize, heads: usize, learned_output: bool, rng: &mut Rng) -> Result<Self> {
        check_heads(width, heads)?;
        let std = 1.0 / (width as f64).sqrt();
        Ok(MsaParams {
            w_q: Tensor::randn(&[width, width], std, rng),
            w_k: Tensor::randn(&[width, width], std, rng),
            w_v: Tensor::randn(&[width, width], std, rng),
            w_o: learned_output.then(|| Tensor::randn(&[width, width], std, rng)),
            heads,
        })
    }

    pub fn width(&self) -> usize {
        self.w_q.shape()[0]
    }

    pub fn validate(&self, width: usize) -> Result<()> {
        check_heads(width, self.heads)?;
        for (name, t) in [("W_Q", &self.w_q), ("W_K", &self.w_k), ("W_V", &self.w_v)]
            .into_iter()
            .chain(self.w_o.as_ref().map(|w| ("W_O", w)))
        {
            if t.shape() != [width, width] {
                return Err(Error::dim(format!(
                    "{name} has shape {:?}, field width is {width}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    /// Registers the parameters as constants on a throwaway tape.
    pub(crate) fn constants(&self, tape: &mut Tape) -> MsaVars {
        MsaVars {
            w_q: tape.constant(self.w_q.clone()),
            w_k: tape.constant(self.w_k.clone()),
            w_v: tape.constant(self.w_v.clone()),
            w_o: self.w_o.as_ref().map(|w| tape.constant(w.clone())),
            heads: self.heads,
        }
    }
}

pub(crate) fn check_heads(width: usize, heads: usize) -> Result<()> {
    if heads == 0 || width % heads != 0 {
        return Err(Error::config(format!(
            "{heads} heads do not divide embedding width {width}"
        )));
    }
    Ok(())
}

/// Tape handles for [`MsaParams`].
#[derive(Debug, Clone, Copy)]
pub struct MsaVars {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Option<Var>,
    pub heads: usize,
}

/// Knobs that do not change the function computed (up to rounding) but
/// are useful for ablations and invariance tests.
#[derive(Debug, Clone, Copy, Default)]
pub struct AttentionOptions {
    pub cls_policy: ClsPolicy,
    /// Constant added to every pre-softmax score.
    pub score_offset: f64,
}

/// Output of one attention stage recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct StageOutput {
    /// Projected attention output (no residual).
    pub out: Var,
    /// The node holding the attention probabilities.
    pub attention: Var,
}

/// Multi-head attention of the (already normalised) field matrix `x` over
/// the given key sets, followed by the output projection.
pub fn msa_on_tape(
    tape: &mut Tape,
    x: Var,
    keys: KeySets,
    params: &MsaVars,
    score_offset: f64,
) -> Result<StageOutput> {
    let q = tape.linear(x, params.w_q, None)?;
    let k = tape.linear(x, params.w_k, None)?;
    let v = tape.linear(x, params.w_v, None)?;
    let attention = tape.attention(q, k, v, params.heads, keys, score_offset)?;
    let out = match params.w_o {
        Some(w_o) => tape.linear(attention, w_o, None)?,
        None => attention,
    };
    Ok(StageOutput { out, attention })
}

/// Multi-head self-attention of every token over `scope` (plus CLS).
///
/// The field is used as-is: callers apply layer normalisation and add the
/// residual themselves.
pub fn msa(field: &TokenField, scope: AttentionScope, params: &MsaParams) -> Result<TokenField> {
    msa_with(field, scope, params, &AttentionOptions::default())
}

pub fn msa_with(
    field: &TokenField,
    scope: AttentionScope,
    params: &MsaParams,
    options: &AttentionOptions,
) -> Result<TokenField> {
    let dims = field.dims();
    params.validate(dims.width)?;
    let keys = scope.key_sets(&dims, options.cls_policy)?;
    let mut tape = Tape::new();
    let x = tape.constant(field.to_matrix());
    let vars = params.constants(&mut tape);
    let stage = msa_on_tape(&mut tape, x, keys, &vars, options.score_offset)?;
    TokenField::from_matrix(tape.value(stage.out), dims)
}

/// Attention probabilities of `msa` for each query row, aligned with the
/// scope's key sets. Useful for inspecting normalisation.
pub fn attention_weights(
    field: &TokenField,
    scope: AttentionScope,
    params: &MsaParams,
    options: &AttentionOptions,
) -> Result<(KeySets, Vec<Vec<f64>>)> {
    let dims = field.dims();
    params.validate(dims.width)?;
    let keys = scope.key_sets(&dims, options.cls_policy)?;
    let mut tape = Tape::new();
    let x = tape.constant(field.to_matrix());
    let vars = params.constants(&mut tape);
    let stage = msa_on_tape(&mut tape, x, keys, &vars, options.score_offset)?;
    Ok(tape
        .attention_weights(stage.attention)
        .expect("attention node"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims(s: usize, t: usize, gh: usize, gw: usize) -> FieldDims {
        FieldDims {
            modalities: s,
            frames: t,
            grid_h: gh,
            grid_w: gw,
            width: 8,
        }
    }

    #[test]
    fn vit_base_cardinalities() {
        let d = dims(4, 8, 14, 14);
        assert_eq!(AttentionScope::JointStm.cardinality(&d), 6272);
        assert_eq!(AttentionScope::TimeAcrossModalities.cardinality(&d), 32);
        assert_eq!(AttentionScope::SpaceAcrossModalities.cardinality(&d), 784);
        assert_eq!(AttentionScope::TimeWithinModality.cardinality(&d), 8);
        assert_eq!(AttentionScope::Modality.cardinality(&d), 4);
        assert_eq!(AttentionScope::SpaceWithinModality.cardinality(&d), 196);
        assert_eq!(AttentionScope::LocalTime { window: 4 }.cardinality(&d), 4);
        assert_eq!(AttentionScope::LocalSpace { tile: (7, 7) }.cardinality(&d), 49);
    }

    #[test]
    fn key_sets_match_cardinality_plus_cls() {
        let d = dims(4, 4, 4, 4);
        let scopes = [
            AttentionScope::JointStm,
            AttentionScope::TimeAcrossModalities,
            AttentionScope::SpaceAcrossModalities,
            AttentionScope::TimeWithinModality,
            AttentionScope::SpaceWithinModality,
            AttentionScope::Modality,
            AttentionScope::OtherModalities,
            AttentionScope::LocalTime { window: 2 },
            AttentionScope::LocalSpace { tile: (2, 2) },
        ];
        for scope in scopes {
            let sets = scope.key_sets(&d, ClsPolicy::Global).unwrap();
            assert_eq!(sets.len(), d.rows());
            assert_eq!(sets[0].len(), d.rows(), "{scope}: CLS queries everything");
            for set in &sets[1..] {
                assert_eq!(set.len(), scope.cardinality(&d) + 1, "{scope}");
                assert_eq!(set[0], 0);
                let mut sorted = set.clone();
                sorted.dedup();
                assert_eq!(sorted.len(), set.len(), "{scope}: duplicate keys");
            }
        }
    }

    #[test]
    fn spatial_only_policy_hides_cls_elsewhere() {
        let d = dims(2, 2, 2, 2);
        let sets = AttentionScope::TimeWithinModality
            .key_sets(&d, ClsPolicy::SpatialOnly)
            .unwrap();
        assert_eq!(sets[0], vec![0]);
        assert!(sets[1..].iter().all(|s| !s.contains(&0)));
        let sets = AttentionScope::SpaceWithinModality
            .key_sets(&d, ClsPolicy::SpatialOnly)
            .unwrap();
        assert_eq!(sets[0].len(), d.rows());
    }

    #[test]
    fn co_attention_needs_two_modalities() {
        let d = dims(1, 2, 2, 2);
        assert!(matches!(
            AttentionScope::OtherModalities.key_sets(&d, ClsPolicy::Global),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn heads_must_divide_width() {
        let mut rng = Rng::new(0);
        assert!(matches!(
            MsaParams::init(8, 3, true, &mut rng),
            Err(Error::Config(_))
        ));
    }
}
