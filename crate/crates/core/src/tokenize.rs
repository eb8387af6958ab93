//! Compressed clips and their conversion into a token field.
//!
//! Each visual modality is cut into `P×P` patches that are linearly
//! embedded and offset by a learnable spatiotemporal positional encoding.
//! Audio segments are projected to the same width, offset by a temporal
//! encoding, and replicated over all `N` spatial positions. A single CLS
//! token (without positional encoding) precedes the patch tokens.

use std::fmt;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::tensor::{Rng, Tape, Tensor, Var};

/// Length of one audio feature vector.
pub const AUDIO_FEATURES: usize = 128;
/// Mel bands produced by [`phi_stub`]; the rest of the vector is zero.
pub const PHI_BANDS: usize = 64;
/// Motion vectors are clamped to this many pixels per axis.
pub const MV_CLAMP: f64 = 16.0;

const PHI_EPS: f64 = 1e-10;
const PE_STD: f64 = 0.02;

/// Input modalities, in token-field order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Modality {
    IFrame,
    MotionVector,
    Residual,
    Audio,
}

impl Modality {
    pub const ALL: [Modality; 4] = [
        Modality::IFrame,
        Modality::MotionVector,
        Modality::Residual,
        Modality::Audio,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn symbol(self) -> char {
        match self {
            Modality::IFrame => 'I',
            Modality::MotionVector => 'M',
            Modality::Residual => 'R',
            Modality::Audio => 'A',
        }
    }

    pub fn from_symbol(c: char) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.symbol() == c.to_ascii_uppercase())
    }

    /// Channels per pixel for visual modalities.
    pub fn channels(self) -> Option<usize> {
        match self {
            Modality::IFrame | Modality::Residual => Some(3),
            Modality::MotionVector => Some(2),
            Modality::Audio => None,
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.symbol())
    }
}

/// Which modalities carry content; dropped ones keep only their positional
/// encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ModalityMask {
    pub keep: [bool; 4],
}

impl Default for ModalityMask {
    fn default() -> Self {
        Self::all()
    }
}

impl ModalityMask {
    pub fn all() -> Self {
        ModalityMask { keep: [true; 4] }
    }

    pub fn without(m: Modality) -> Self {
        let mut keep = [true; 4];
        keep[m.index()] = false;
        ModalityMask { keep }
    }

    pub fn keeps(&self, m: Modality) -> bool {
        self.keep[m.index()]
    }

    pub fn validate(&self) -> Result<()> {
        if self.keep.iter().any(|&k| k) {
            Ok(())
        } else {
            Err(Error::config("modality mask drops every modality"))
        }
    }

    /// Parses a drop list such as `"I,A"` or `"MR"`.
    pub fn from_drop_list(s: &str) -> Result<Self> {
        let mut mask = Self::all();
        for c in s.chars().filter(|c| !matches!(c, ',' | ' ' | '+')) {
            let m = Modality::from_symbol(c)
                .ok_or_else(|| Error::config(format!("unknown modality '{c}' in \"{s}\"")))?;
            mask.keep[m.index()] = false;
        }
        mask.validate()?;
        Ok(mask)
    }

    /// Kept modalities as a compact string, e.g. `"IMR"`.
    pub fn label(&self) -> String {
        Modality::ALL
            .iter()
            .filter(|m| self.keeps(**m))
            .map(|m| m.symbol())
            .collect()
    }
}

/// One aligned multi-modal sample.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressedClip {
    /// `[T×3×H×W]`, RGB in `[0, 1]`.
    pub iframes: Tensor,
    /// `[T×2×H×W]`, pixel displacement (dx, dy).
    pub motion_vectors: Tensor,
    /// `[T×3×H×W]`, signed RGB difference.
    pub residuals: Tensor,
    /// `[T×128]`, one feature vector per segment.
    pub audio: Tensor,
    pub label: usize,
}

impl CompressedClip {
    pub fn frames(&self) -> usize {
        self.iframes.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.iframes.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.iframes.shape()[3]
    }

    pub fn modality(&self, m: Modality) -> &Tensor {
        match m {
            Modality::IFrame => &self.iframes,
            Modality::MotionVector => &self.motion_vectors,
            Modality::Residual => &self.residuals,
            Modality::Audio => &self.audio,
        }
    }

    pub fn modality_mut(&mut self, m: Modality) -> &mut Tensor {
        match m {
            Modality::IFrame => &mut self.iframes,
            Modality::MotionVector => &mut self.motion_vectors,
            Modality::Residual => &mut self.residuals,
            Modality::Audio => &mut self.audio,
        }
    }

    /// Checks shapes, patch divisibility and the motion-vector clamp.
    pub fn validate(&self, patch: usize) -> Result<()> {
        let is = self.iframes.shape();
        if is.len() != 4 || is[1] != 3 {
            return Err(Error::dim(format!("iframes must be [T,3,H,W], got {is:?}")));
        }
        let (t, h, w) = (is[0], is[2], is[3]);
        if self.motion_vectors.shape() != [t, 2, h, w] {
            return Err(Error::dim(format!(
                "motion vectors {:?} do not match iframes {is:?}",
                self.motion_vectors.shape()
            )));
        }
        if self.residuals.shape() != [t, 3, h, w] {
            return Err(Error::dim(format!(
                "residuals {:?} do not match iframes {is:?}",
                self.residuals.shape()
            )));
        }
        if self.audio.shape() != [t, AUDIO_FEATURES] {
            return Err(Error::dim(format!(
                "audio must be [{t}, {AUDIO_FEATURES}], got {:?}",
                self.audio.shape()
            )));
        }
        if patch == 0 || h % patch != 0 || w % patch != 0 {
            return Err(Error::dim(format!(
                "frame {h}x{w} is not divisible by patch size {patch}"
            )));
        }
        if self
            .motion_vectors
            .data()
            .iter()
            .any(|v| v.abs() > MV_CLAMP)
        {
            return Err(Error::Data(format!(
                "motion vector magnitude exceeds clamp {MV_CLAMP}"
            )));
        }
        Ok(())
    }
}

/// Extents of a token field. Token `(s, t, p)` lives at matrix row
/// `1 + (s·T + t)·N + p`; row 0 is CLS.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FieldDims {
    pub modalities: usize,
    pub frames: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub width: usize,
}

impl FieldDims {
    pub fn patches(&self) -> usize {
        self.grid_h * self.grid_w
    }

    /// Patch tokens, excluding CLS.
    pub fn tokens(&self) -> usize {
        self.modalities * self.frames * self.patches()
    }

    /// Matrix rows including CLS.
    pub fn rows(&self) -> usize {
        1 + self.tokens()
    }

    pub fn row(&self, s: usize, t: usize, p: usize) -> usize {
        1 + (s * self.frames + t) * self.patches() + p
    }

    /// Inverse of [`FieldDims::row`]; `None` for the CLS row.
    pub fn coords(&self, row: usize) -> Option<(usize, usize, usize)> {
        let k = row.checked_sub(1)?;
        let n = self.patches();
        Some((k / (self.frames * n), (k / n) % self.frames, k % n))
    }
}

/// The `(modality × time × space)` grid of tokens plus CLS.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenField {
    /// `[|S|×T×N×d]`, modality order I, M, R, A.
    pub tokens: Tensor,
    /// `[d]`.
    pub cls: Tensor,
    pub grid: (usize, usize),
}

impl TokenField {
    pub fn new(tokens: Tensor, cls: Tensor, grid: (usize, usize)) -> Result<Self> {
        let s = tokens.shape();
        if s.len() != 4 || s[2] != grid.0 * grid.1 || cls.shape() != [s[3]] {
            return Err(Error::dim(format!(
                "token field {s:?} with cls {:?} and grid {grid:?}",
                cls.shape()
            )));
        }
        Ok(TokenField { tokens, cls, grid })
    }

    pub fn dims(&self) -> FieldDims {
        let s = self.tokens.shape();
        FieldDims {
            modalities: s[0],
            frames: s[1],
            grid_h: self.grid.0,
            grid_w: self.grid.1,
            width: s[3],
        }
    }

    pub fn token(&self, s: usize, t: usize, p: usize) -> &[f64] {
        let dims = self.dims();
        self.tokens.row((s * dims.frames + t) * dims.patches() + p)
    }

    /// CLS followed by all patch tokens, `[1 + |S|TN × d]`.
    pub fn to_matrix(&self) -> Tensor {
        let d = self.dims().width;
        let mut data = self.cls.data().to_vec();
        data.extend_from_slice(self.tokens.data());
        Tensor::new(&[data.len() / d, d], data).expect("consistent field")
    }

    pub fn from_matrix(m: &Tensor, dims: FieldDims) -> Result<Self> {
        if m.shape() != [dims.rows(), dims.width] {
            return Err(Error::dim(format!(
                "matrix {:?} does not hold field {dims:?}",
                m.shape()
            )));
        }
        let d = dims.width;
        let cls = Tensor::new(&[d], m.data()[..d].to_vec())?;
        let tokens = Tensor::new(
            &[dims.modalities, dims.frames, dims.patches(), d],
            m.data()[d..].to_vec(),
        )?;
        TokenField::new(tokens, cls, (dims.grid_h, dims.grid_w))
    }
}

/// Learnable embedding parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingParams {
    /// `[d×3P²]`
    pub e_i: Tensor,
    /// `[d×2P²]`
    pub e_m: Tensor,
    /// `[d×3P²]`
    pub e_r: Tensor,
    /// `[d×128]`
    pub e_a: Tensor,
    /// `[T×N×d]` each.
    pub pe_i: Tensor,
    pub pe_m: Tensor,
    pub pe_r: Tensor,
    /// `[T×d]`
    pub pe_a: Tensor,
    /// `[d]`
    pub cls: Tensor,
}

impl EmbeddingParams {
    /// Linear maps get `N(0, 1/fan_in)`; positional encodings and CLS get
    /// `N(0, 0.02²)`.
    pub fn init(frames: usize, patches: usize, patch: usize, width: usize, rng: &mut Rng) -> Self {
        let lin = |fan_in: usize, rng: &mut Rng| {
            Tensor::randn(&[width, fan_in], 1.0 / (fan_in as f64).sqrt(), rng)
        };
        let p2 = patch * patch;
        EmbeddingParams {
            e_i: lin(3 * p2, rng),
            e_m: lin(2 * p2, rng),
            e_r: lin(3 * p2, rng),
            e_a: lin(AUDIO_FEATURES, rng),
            pe_i: Tensor::randn(&[frames, patches, width], PE_STD, rng),
            pe_m: Tensor::randn(&[frames, patches, width], PE_STD, rng),
            pe_r: Tensor::randn(&[frames, patches, width], PE_STD, rng),
            pe_a: Tensor::randn(&[frames, width], PE_STD, rng),
            cls: Tensor::randn(&[width], PE_STD, rng),
        }
    }

    pub fn width(&self) -> usize {
        self.cls.numel()
    }

    pub fn patch(&self) -> usize {
        ((self.e_i.shape()[1] / 3) as f64).sqrt().round() as usize
    }

    /// Parameters in their fixed serialization order.
    pub fn tensors(&self) -> [&Tensor; 9] {
        [
            &self.e_i, &self.e_m, &self.e_r, &self.e_a, &self.pe_i, &self.pe_m, &self.pe_r,
            &self.pe_a, &self.cls,
        ]
    }

    pub fn validate(&self, frames: usize, patches: usize, patch: usize) -> Result<()> {
        let d = self.width();
        let p2 = patch * patch;
        let expect: [(&str, &Tensor, Vec<usize>); 9] = [
            ("E_I", &self.e_i, vec![d, 3 * p2]),
            ("E_M", &self.e_m, vec![d, 2 * p2]),
            ("E_R", &self.e_r, vec![d, 3 * p2]),
            ("E_A", &self.e_a, vec![d, AUDIO_FEATURES]),
            ("PE_I", &self.pe_i, vec![frames, patches, d]),
            ("PE_M", &self.pe_m, vec![frames, patches, d]),
            ("PE_R", &self.pe_r, vec![frames, patches, d]),
            ("PE_A", &self.pe_a, vec![frames, d]),
            ("cls", &self.cls, vec![d]),
        ];
        for (name, t, shape) in expect {
            if t.shape() != shape.as_slice() {
                return Err(Error::dim(format!(
                    "{name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Tape handles for [`EmbeddingParams`], same field order.
#[derive(Debug, Clone, Copy)]
pub struct EmbeddingVars {
    pub e_i: Var,
    pub e_m: Var,
    pub e_r: Var,
    pub e_a: Var,
    pub pe_i: Var,
    pub pe_m: Var,
    pub pe_r: Var,
    pub pe_a: Var,
    pub cls: Var,
}

/// Cuts `frame[C×H×W]` into `[N × C·P²]`; row `p` is the `(C, P, P)` block
/// at raster position `p`.
pub fn patchify(frame: &Tensor, patch: usize) -> Result<Tensor> {
    let s = frame.shape();
    if s.len() != 3 {
        return Err(Error::dim(format!("patchify expects [C,H,W], got {s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    patchify_raw(frame.data(), c, h, w, patch)
}

fn patchify_raw(data: &[f64], c: usize, h: usize, w: usize, patch: usize) -> Result<Tensor> {
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::dim(format!(
            "frame {h}x{w} is not divisible by patch size {patch}"
        )));
    }
    let (gh, gw) = (h / patch, w / patch);
    let row_len = c * patch * patch;
    let mut out = Vec::with_capacity(gh * gw * row_len);
    for by in 0..gh {
        for bx in 0..gw {
            for ch in 0..c {
                for y in 0..patch {
                    let start = (ch * h + by * patch + y) * w + bx * patch;
                    out.extend_from_slice(&data[start..start + patch]);
                }
            }
        }
    }
    Tensor::new(&[gh * gw, row_len], out)
}

/// Inverse of [`patchify`].
pub fn unpatchify(patches: &Tensor, channels: usize, height: usize, width: usize, patch: usize) -> Result<Tensor> {
    if patch == 0 || height % patch != 0 || width % patch != 0 {
        return Err(Error::dim(format!(
            "frame {height}x{width} is not divisible by patch size {patch}"
        )));
    }
    let (gh, gw) = (height / patch, width / patch);
    let row_len = channels * patch * patch;
    if patches.shape() != [gh * gw, row_len] {
        return Err(Error::dim(format!(
            "patches {:?} do not tile a {channels}x{height}x{width} frame",
            patches.shape()
        )));
    }
    let mut out = vec![0.0; channels * height * width];
    for by in 0..gh {
        for bx in 0..gw {
            let row = patches.row(by * gw + bx);
            for ch in 0..channels {
                for y in 0..patch {
                    let start = (ch * height + by * patch + y) * width + bx * patch;
                    let src = (ch * patch + y) * patch;
                    out[start..start + patch].copy_from_slice(&row[src..src + patch]);
                }
            }
        }
    }
    Tensor::new(&[channels, height, width], out)
}

/// Patch rows of every frame of a visual modality tensor `[T×C×H×W]`,
/// stacked time-major: `[T·N × C·P²]`.
pub fn patchify_frames(frames: &Tensor, patch: usize) -> Result<Tensor> {
    let s = frames.shape();
    if s.len() != 4 {
        return Err(Error::dim(format!("expected [T,C,H,W], got {s:?}")));
    }
    let (t, c, h, w) = (s[0], s[1], s[2], s[3]);
    let frame_len = c * h * w;
    let mut data = Vec::with_capacity(frames.numel());
    let mut row_len = 0;
    for i in 0..t {
        let p = patchify_raw(&frames.data()[i * frame_len..(i + 1) * frame_len], c, h, w, patch)?;
        row_len = p.last_dim();
        data.extend(p.into_data());
    }
    Tensor::new(&[data.len() / row_len, row_len], data)
}

/// Records the embedding of `clip` on `tape` and returns the field matrix
/// `[1 + 4TN × d]` (CLS first). Modalities dropped by `mask` contribute
/// only their positional encoding.
pub fn embed(
    tape: &mut Tape,
    clip: &CompressedClip,
    params: &EmbeddingVars,
    patch: usize,
    mask: &ModalityMask,
) -> Result<Var> {
    clip.validate(patch)?;
    mask.validate()?;
    let t = clip.frames();
    let n = (clip.height() / patch) * (clip.width() / patch);
    let d = tape.value(params.cls).numel();
    let pe_shape = [t, n, d];
    for pe in [params.pe_i, params.pe_m, params.pe_r] {
        if tape.shape(pe) != pe_shape {
            return Err(Error::dim(format!(
                "positional encoding {:?}, clip needs {pe_shape:?}",
                tape.shape(pe)
            )));
        }
    }
    if tape.shape(params.pe_a) != [t, d] {
        return Err(Error::dim(format!(
            "audio positional encoding {:?}, clip needs [{t}, {d}]",
            tape.shape(params.pe_a)
        )));
    }

    let mut parts = vec![tape.reshape(params.cls, &[1, d])?];
    let visual = [
        (Modality::IFrame, params.e_i, params.pe_i),
        (Modality::MotionVector, params.e_m, params.pe_m),
        (Modality::Residual, params.e_r, params.pe_r),
    ];
    for (m, e, pe) in visual {
        let pe_rows = tape.reshape(pe, &[t * n, d])?;
        let z = if mask.keeps(m) {
            let patches = tape.constant(patchify_frames(clip.modality(m), patch)?);
            let content = tape.linear(patches, e, None)?;
            tape.add(content, pe_rows)?
        } else {
            pe_rows
        };
        parts.push(z);
    }
    let audio = if mask.keeps(Modality::Audio) {
        let feats = tape.constant(clip.audio.clone());
        let content = tape.linear(feats, params.e_a, None)?;
        tape.add(content, params.pe_a)?
    } else {
        params.pe_a
    };
    let replicate: Vec<usize> = (0..t).flat_map(|ti| std::iter::repeat(ti).take(n)).collect();
    parts.push(tape.gather_rows(audio, &replicate)?);
    tape.concat_rows(&parts)
}

/// Tokenizes a clip outside of any training graph.
pub fn tokenize(clip: &CompressedClip, params: &EmbeddingParams) -> Result<TokenField> {
    tokenize_masked(clip, params, &ModalityMask::all())
}

pub fn tokenize_masked(
    clip: &CompressedClip,
    params: &EmbeddingParams,
    mask: &ModalityMask,
) -> Result<TokenField> {
    let patch = params.patch();
    clip.validate(patch)?;
    let (gh, gw) = (clip.height() / patch, clip.width() / patch);
    params.validate(clip.frames(), gh * gw, patch)?;
    let mut tape = Tape::new();
    let vars = EmbeddingVars {
        e_i: tape.constant(params.e_i.clone()),
        e_m: tape.constant(params.e_m.clone()),
        e_r: tape.constant(params.e_r.clone()),
        e_a: tape.constant(params.e_a.clone()),
        pe_i: tape.constant(params.pe_i.clone()),
        pe_m: tape.constant(params.pe_m.clone()),
        pe_r: tape.constant(params.pe_r.clone()),
        pe_a: tape.constant(params.pe_a.clone()),
        cls: tape.constant(params.cls.clone()),
    };
    let m = embed(&mut tape, clip, &vars, patch, mask)?;
    let dims = FieldDims {
        modalities: 4,
        frames: clip.frames(),
        grid_h: gh,
        grid_w: gw,
        width: params.width(),
    };
    TokenField::from_matrix(tape.value(m), dims)
}

/// Inclusive-exclusive DFT-bin ranges of the mel bands for a window of
/// `window_len` samples at `sample_rate` Hz. Returns `PHI_BANDS + 1` edges.
pub fn phi_band_edges(window_len: usize, sample_rate: f64) -> Vec<usize> {
    let bins = window_len / 2 + 1;
    let nyquist = sample_rate / 2.0;
    let mel = |f: f64| 2595.0 * (1.0 + f / 700.0).log10();
    let inv_mel = |m: f64| 700.0 * (10f64.powf(m / 2595.0) - 1.0);
    let mel_max = mel(nyquist);
    let mut edges = Vec::with_capacity(PHI_BANDS + 1);
    for j in 0..=PHI_BANDS {
        let f = inv_mel(mel_max * j as f64 / PHI_BANDS as f64);
        let mut bin = (f / nyquist * (bins - 1) as f64).round() as usize;
        if let Some(&prev) = edges.last() {
            bin = bin.max(prev + 1);
        }
        edges.push(bin);
    }
    // The last band is closed at Nyquist.
    *edges.last_mut().unwrap() = bins;
    edges
}

/// Deterministic stand-in for a pretrained audio embedding.
///
/// Hann-windowed DFT magnitudes are summed over 64 mel-spaced bands, the
/// band vector is standardised to zero mean / unit variance (epsilon
/// guarded, so silence maps to zeros) and zero-padded to 128 entries.
pub fn phi_stub(segment: &[f64], sample_rate: f64) -> Result<Tensor> {
    let len = segment.len();
    if len == 0 {
        return Err(Error::Contract("phi_stub: empty audio window".into()));
    }
    if len / 2 < PHI_BANDS {
        return Err(Error::Contract(format!(
            "phi_stub: window of {len} samples is shorter than {} needed for {PHI_BANDS} bands",
            2 * PHI_BANDS
        )));
    }
    if !(sample_rate > 0.0) {
        return Err(Error::Contract(format!("phi_stub: sample rate {sample_rate}")));
    }
    let mut buf: Vec<Complex<f64>> = segment
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let w = 0.5 - 0.5 * (std::f64::consts::TAU * i as f64 / len as f64).cos();
            Complex::new(x * w, 0.0)
        })
        .collect();
    FftPlanner::new().plan_fft_forward(len).process(&mut buf);

    let edges = phi_band_edges(len, sample_rate);
    let mut bands: Vec<f64> = edges
        .windows(2)
        .map(|e| buf[e[0]..e[1]].iter().map(|c| c.norm()).sum())
        .collect();
    let mean = bands.iter().sum::<f64>() / PHI_BANDS as f64;
    let var = bands.iter().map(|b| (b - mean) * (b - mean)).sum::<f64>() / PHI_BANDS as f64;
    let inv = 1.0 / (var + PHI_EPS).sqrt();
    for b in &mut bands {
        *b = (*b - mean) * inv;
    }
    bands.resize(AUDIO_FEATURES, 0.0);
    Tensor::new(&[AUDIO_FEATURES], bands)
}
