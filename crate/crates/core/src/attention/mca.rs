//! Cross-modal attention: merged, co-attention and shift-merge.

use super::{msa, AttentionScope, MsaParams};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};
use crate::tokenize::{FieldDims, TokenField};

/// Each query attends over the tokens of all modalities at its own
/// `(p, t)`, plus CLS.
pub fn mca_merged(field: &TokenField, params: &MsaParams) -> Result<TokenField> {
    msa(field, AttentionScope::Modality, params)
}

/// Like [`mca_merged`] but the query's own modality is excluded from the
/// keys (CLS stays).
pub fn mca_co(field: &TokenField, params: &MsaParams) -> Result<TokenField> {
    if field.dims().modalities < 2 {
        return Err(Error::config(
            "co-attention needs at least two modalities (empty key set)",
        ));
    }
    msa(field, AttentionScope::OtherModalities, params)
}

fn check_shift_merge(dims: &FieldDims) -> Result<()> {
    if dims.modalities != 4 {
        return Err(Error::config(format!(
            "shift-merge mixes exactly four modalities, field has {}",
            dims.modalities
        )));
    }
    if dims.width % 4 != 0 {
        return Err(Error::config(format!(
            "shift-merge needs width divisible by 4, got {}",
            dims.width
        )));
    }
    Ok(())
}

/// The parameter-free quarter exchange on a tape, without the residual.
///
/// Output token `(s, t, p)` is the concatenation over modalities `s'` of
/// quarter `s` of `v(s', t, p)`. The CLS row is zero.
pub fn shift_merge_mix(tape: &mut Tape, v: Var, dims: &FieldDims) -> Result<Var> {
    check_shift_merge(dims)?;
    let rows = dims.rows();
    if tape.shape(v) != [rows, dims.width] {
        return Err(Error::dim(format!(
            "shift-merge input {:?} does not hold field {dims:?}",
            tape.shape(v)
        )));
    }
    let q = dims.width / 4;
    // View every row as four quarter-rows, append one zero quarter-row for CLS.
    let quarters = tape.reshape(v, &[rows * 4, q])?;
    let zero = tape.constant(Tensor::zeros(&[1, q]));
    let padded = tape.concat_rows(&[quarters, zero])?;
    let zero_row = rows * 4;
    let mut index = vec![zero_row; 4];
    for s in 0..4 {
        for t in 0..dims.frames {
            for p in 0..dims.patches() {
                for src in 0..4 {
                    index.push(dims.row(src, t, p) * 4 + s);
                }
            }
        }
    }
    let mixed = tape.gather_rows(padded, &index)?;
    tape.reshape(mixed, &[rows, dims.width])
}

/// Shift-merge attention: `r^s = ‖_{s'} v_s^{s'} + v^s` where `v` is the
/// field itself and `v_k` its k-th quarter. CLS passes through unchanged.
pub fn mca_shift_merge(field: &TokenField) -> Result<TokenField> {
    let dims = field.dims();
    check_shift_merge(&dims)?;
    let mut tape = Tape::new();
    let v = tape.constant(field.to_matrix());
    let mixed = shift_merge_mix(&mut tape, v, &dims)?;
    let out = tape.add(mixed, v)?;
    TokenField::from_matrix(tape.value(out), dims)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_geometry() {
        let f = TokenField::new(Tensor::zeros(&[4, 1, 1, 6]), Tensor::zeros(&[6]), (1, 1)).unwrap();
        assert!(matches!(mca_shift_merge(&f), Err(Error::Config(_))));
        let f = TokenField::new(Tensor::zeros(&[3, 1, 1, 8]), Tensor::zeros(&[8]), (1, 1)).unwrap();
        assert!(matches!(mca_shift_merge(&f), Err(Error::Config(_))));
    }

    #[test]
    fn zero_field_maps_to_zero() {
        let f = TokenField::new(Tensor::zeros(&[4, 2, 4, 8]), Tensor::zeros(&[8]), (2, 2)).unwrap();
        let out = mca_shift_merge(&f).unwrap();
        assert!(out.tokens.data().iter().all(|&x| x == 0.0));
        assert!(out.cls.data().iter().all(|&x| x == 0.0));
    }
}
