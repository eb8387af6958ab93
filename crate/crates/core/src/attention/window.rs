//! Non-overlapping local windows and the convolution that links them.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};
use crate::tokenize::{FieldDims, TokenField};

/// Spatial tiles (patch indices) and temporal windows (frame indices).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WindowPartition {
    pub tile: (usize, usize),
    pub frames_per_window: usize,
    pub spatial: Vec<Vec<usize>>,
    pub temporal: Vec<Vec<usize>>,
}

/// Picks a `th×tw = m` tile that divides the `gh×gw` grid, preferring the
/// most square shape (then the shorter height).
pub fn choose_tile(grid_h: usize, grid_w: usize, m: usize) -> Result<(usize, usize)> {
    (1..=grid_h)
        .filter(|&th| grid_h % th == 0 && m % th == 0)
        .map(|th| (th, m / th))
        .filter(|&(_, tw)| tw >= 1 && tw <= grid_w && grid_w % tw == 0)
        .min_by_key(|&(th, tw)| (th.abs_diff(tw), th))
        .ok_or_else(|| {
            Error::config(format!(
                "no {m}-patch tile divides the {grid_h}x{grid_w} patch grid"
            ))
        })
}

/// Partition for `M` patches per spatial window and `F` frames per
/// temporal window.
pub fn window_partition(dims: &FieldDims, m: usize, f: usize) -> Result<WindowPartition> {
    let tile = choose_tile(dims.grid_h, dims.grid_w, m)?;
    window_partition_tile(dims, tile, f)
}

pub fn window_partition_tile(
    dims: &FieldDims,
    tile: (usize, usize),
    f: usize,
) -> Result<WindowPartition> {
    let (th, tw) = tile;
    if th == 0 || tw == 0 || dims.grid_h % th != 0 || dims.grid_w % tw != 0 {
        return Err(Error::config(format!(
            "tile {th}x{tw} does not divide the {}x{} patch grid",
            dims.grid_h, dims.grid_w
        )));
    }
    if f == 0 || dims.frames % f != 0 {
        return Err(Error::config(format!(
            "temporal window {f} does not divide {} frames",
            dims.frames
        )));
    }
    let mut spatial = Vec::new();
    for y0 in (0..dims.grid_h).step_by(th) {
        for x0 in (0..dims.grid_w).step_by(tw) {
            let mut members = Vec::with_capacity(th * tw);
            for y in y0..y0 + th {
                members.extend((x0..x0 + tw).map(|x| y * dims.grid_w + x));
            }
            spatial.push(members);
        }
    }
    let temporal = (0..dims.frames)
        .step_by(f)
        .map(|t0| (t0..t0 + f).collect())
        .collect();
    Ok(WindowPartition {
        tile,
        frames_per_window: f,
        spatial,
        temporal,
    })
}

/// Which lattice a window convolution runs over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvAxis {
    /// 2-D over the patch grid of each (modality, frame); kernel = tile.
    Spatial { tile: (usize, usize) },
    /// 1-D over frames for each (modality, position); kernel = window.
    Temporal { window: usize },
}

impl ConvAxis {
    fn extents(self) -> (usize, usize) {
        match self {
            ConvAxis::Spatial { tile } => tile,
            ConvAxis::Temporal { window } => (window, 1),
        }
    }
}

/// `[d×kh×kw]` for depthwise kernels, `[d×d×kh×kw]` otherwise.
pub fn conv_kernel_shape(axis: ConvAxis, width: usize, depthwise: bool) -> Vec<usize> {
    let (kh, kw) = axis.extents();
    if depthwise {
        vec![width, kh, kw]
    } else {
        vec![width, width, kh, kw]
    }
}

/// `x + conv(x)` on the patch tokens of field matrix `x`; CLS is untouched.
/// Stride 1, zero padding, kernel extent equal to the window extent.
pub fn inter_window_conv_on_tape(
    tape: &mut Tape,
    x: Var,
    dims: &FieldDims,
    axis: ConvAxis,
    kernel: Var,
) -> Result<Var> {
    let d = dims.width;
    let ks = tape.shape(kernel).to_vec();
    if ks != conv_kernel_shape(axis, d, true) && ks != conv_kernel_shape(axis, d, false) {
        return Err(Error::config(format!(
            "kernel {ks:?} does not match window geometry {axis:?} at width {d}"
        )));
    }
    match axis {
        ConvAxis::Spatial { tile } => {
            if dims.grid_h % tile.0 != 0 || dims.grid_w % tile.1 != 0 {
                return Err(Error::config(format!(
                    "tile {tile:?} does not divide the {}x{} grid",
                    dims.grid_h, dims.grid_w
                )));
            }
        }
        ConvAxis::Temporal { window } => {
            if dims.frames % window != 0 {
                return Err(Error::config(format!(
                    "temporal window {window} does not divide {} frames",
                    dims.frames
                )));
            }
        }
    }
    let patch_rows: Vec<usize> = (1..dims.rows()).collect();
    let tokens = tape.gather_rows(x, &patch_rows)?;
    let image_shape = match axis {
        ConvAxis::Spatial { .. } => [
            dims.modalities * dims.frames,
            dims.grid_h,
            dims.grid_w,
            d,
        ],
        ConvAxis::Temporal { .. } => [dims.modalities, dims.frames, dims.patches(), d],
    };
    let images = tape.reshape(tokens, &image_shape)?;
    let conv = tape.conv2d_same(images, kernel)?;
    let conv = tape.reshape(conv, &[dims.tokens(), d])?;
    let cls_zero = tape.constant(Tensor::zeros(&[1, d]));
    let update = tape.concat_rows(&[cls_zero, conv])?;
    tape.add(x, update)
}

pub fn inter_window_conv(field: &TokenField, axis: ConvAxis, kernel: &Tensor) -> Result<TokenField> {
    let dims = field.dims();
    let mut tape = Tape::new();
    let x = tape.constant(field.to_matrix());
    let k = tape.constant(kernel.clone());
    let out = inter_window_conv_on_tape(&mut tape, x, &dims, axis, k)?;
    TokenField::from_matrix(tape.value(out), dims)
}
