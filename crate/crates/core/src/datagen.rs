//! Synthetic compressed-domain clips whose classes are separable only
//! through one designated modality each, and the clip / manifest files.
//!
//! Class `c` perturbs modality `c / 2` (I, M, R, A) into state `c % 2`;
//! every other modality is drawn from the same neutral generator for all
//! classes. Each segment holds a key frame, a motion field and a residual
//! tied together by `P = MC(I, mv) + residual`.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::serialize::{read_exact, read_u32};
use crate::tensor::{read_tensor, write_tensor, Rng, Tensor};
use crate::tokenize::{phi_stub, CompressedClip, AUDIO_FEATURES};

/// Motion-compensation block size in pixels.
pub const MACROBLOCK: usize = 16;
/// Sample rate of the raw-waveform audio mode.
pub const SAMPLE_RATE: f64 = 16_000.0;
/// Samples per audio segment in raw-waveform mode.
pub const SEGMENT_SAMPLES: usize = 1024;

const MAX_CLASSES: usize = 8;
const TEXTURE_AMP: f64 = 0.3;
const TEXTURE_PERIOD: usize = 4;
const DRIFT: i64 = 5;
const NEUTRAL_MOTION: i64 = 2;
const EDGE_AMP: f64 = 0.5;
const NEUTRAL_RESIDUAL: f64 = 0.2;
const SIGNATURE_AMP: f64 = 1.5;

const CLIP_MAGIC: &[u8; 4] = b"MMVC";
const CLIP_VERSION: u32 = 1;
pub const MANIFEST_NAME: &str = "manifest.tsv";

/// How audio features are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AudioMode {
    /// Sinusoid-bank feature rows written directly.
    #[default]
    Features,
    /// Tone waveforms passed through [`phi_stub`].
    Waveform,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub num_classes: usize,
    pub clips_per_class: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// Standard deviation of the additive Gaussian noise.
    pub noise: f64,
    pub seed: u64,
    pub audio: AudioMode,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            num_classes: 8,
            clips_per_class: 64,
            frames: 2,
            height: 32,
            width: 32,
            noise: 0.1,
            seed: 0,
            audio: AudioMode::Features,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.num_classes > MAX_CLASSES {
            return Err(Error::config(format!(
                "num_classes must be in 1..={MAX_CLASSES}, got {}",
                self.num_classes
            )));
        }
        if self.clips_per_class == 0 || self.frames == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::config("dataset dims and clip count must be positive"));
        }
        if !(self.noise >= 0.0) || !self.noise.is_finite() {
            return Err(Error::config(format!("noise must be >= 0, got {}", self.noise)));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.num_classes * self.clips_per_class
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Checks that the frames tile into `patch`-sized patches.
    pub fn check_patch(&self, patch: usize) -> Result<()> {
        if patch == 0 || self.height % patch != 0 || self.width % patch != 0 {
            return Err(Error::config(format!(
                "frame {}x{} is not divisible by patch {patch}",
                self.height, self.width
            )));
        }
        Ok(())
    }
}

/// A clip plus the predicted frames it was derived from.
#[derive(Debug, Clone)]
pub struct GeneratedClip {
    pub clip: CompressedClip,
    /// `[T×3×H×W]` noiseless P-frames, `MC(iframe, mv) + residual`.
    pub pframes: Tensor,
    /// `[T×2×H×W]` noiseless integer motion field.
    pub clean_motion: Tensor,
    /// `[T×3×H×W]` noiseless key frames.
    pub clean_iframes: Tensor,
}

/// Which state a modality is in for a given class.
fn state(label: usize, modality: usize) -> Option<usize> {
    (label / 2 == modality).then_some(label % 2)
}

fn key_frame(rng: &mut Rng, h: usize, w: usize, texture: Option<usize>) -> Vec<f64> {
    let mut img = vec![0.0; 3 * h * w];
    for c in 0..3 {
        let base = rng.uniform_range(0.3, 0.7);
        let gy = rng.uniform_range(-0.1, 0.1);
        let gx = rng.uniform_range(-0.1, 0.1);
        for y in 0..h {
            for x in 0..w {
                let v = base + gy * (y as f64 / h as f64 - 0.5) + gx * (x as f64 / w as f64 - 0.5);
                img[(c * h + y) * w + x] = v;
            }
        }
    }
    if let Some(kind) = texture {
        for y in 0..h {
            for x in 0..w {
                let (cy, cx) = (y / TEXTURE_PERIOD, x / TEXTURE_PERIOD);
                let on = match kind {
                    0 => (cy + cx) % 2 == 0,
                    _ => cy % 2 == 0,
                };
                let delta = if on { TEXTURE_AMP } else { -TEXTURE_AMP };
                for c in 0..3 {
                    img[(c * h + y) * w + x] += delta;
                }
            }
        }
    }
    img
}

/// Integer displacement `(dx, dy)` per macroblock.
fn motion_field(rng: &mut Rng, blocks: usize, drift: Option<usize>) -> Vec<(i64, i64)> {
    let span = 2 * NEUTRAL_MOTION as usize + 1;
    (0..blocks)
        .map(|_| {
            let dy = rng.below(span) as i64 - NEUTRAL_MOTION;
            let dx = match drift {
                Some(0) => DRIFT,
                Some(_) => -DRIFT,
                None => rng.below(span) as i64 - NEUTRAL_MOTION,
            };
            (dx, dy)
        })
        .collect()
}

fn block_of(y: usize, x: usize, w: usize) -> usize {
    (y / MACROBLOCK) * w.div_ceil(MACROBLOCK) + x / MACROBLOCK
}

/// Nearest-pixel block motion compensation: every pixel of a macroblock
/// with displacement `(dx, dy)` copies `reference(y − dy, x − dx)`,
/// clamped to the frame.
pub fn motion_compensate(reference: &[f64], motion: &Tensor, h: usize, w: usize) -> Vec<f64> {
    let mv = motion.data();
    let mut out = vec![0.0; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let dx = mv[y * w + x].round() as i64;
            let dy = mv[(h + y) * w + x].round() as i64;
            let sy = (y as i64 - dy).clamp(0, h as i64 - 1) as usize;
            let sx = (x as i64 - dx).clamp(0, w as i64 - 1) as usize;
            for c in 0..3 {
                out[(c * h + y) * w + x] = reference[(c * h + sy) * w + sx];
            }
        }
    }
    out
}

fn residual_frame(rng: &mut Rng, h: usize, w: usize, edge: Option<usize>) -> Vec<f64> {
    let blocks = h.div_ceil(MACROBLOCK) * w.div_ceil(MACROBLOCK);
    let offsets: Vec<[f64; 3]> = (0..blocks)
        .map(|_| {
            [0; 3].map(|_| rng.uniform_range(-NEUTRAL_RESIDUAL, NEUTRAL_RESIDUAL))
        })
        .collect();
    let mut res = vec![0.0; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let b = block_of(y, x, w);
            let step = match edge {
                None => 0.0,
                Some(kind) => {
                    let (ly, lx) = (y % MACROBLOCK, x % MACROBLOCK);
                    let first = if kind == 0 { ly < MACROBLOCK / 2 } else { lx < MACROBLOCK / 2 };
                    if first {
                        EDGE_AMP
                    } else {
                        -EDGE_AMP
                    }
                }
            };
            for c in 0..3 {
                // Edge clips replace the neutral block offsets entirely.
                let base = if edge.is_some() { 0.0 } else { offsets[b][c] };
                res[(c * h + y) * w + x] = base + step;
            }
        }
    }
    res
}

/// Neutral bank: three random low frequencies; signatures add one high
/// frequency component at zero phase.
fn audio_features(rng: &mut Rng, t: usize, signature: Option<usize>) -> Vec<f64> {
    let mut out = vec![0.0; t * AUDIO_FEATURES];
    for row in out.chunks_mut(AUDIO_FEATURES) {
        let mut bank: Vec<(f64, f64, f64)> = (0..3)
            .map(|_| {
                (
                    1.0 + rng.below(12) as f64,
                    rng.uniform_range(0.3, 1.0),
                    rng.uniform_range(0.0, std::f64::consts::TAU),
                )
            })
            .collect();
        if let Some(kind) = signature {
            let freq = if kind == 0 { 20.0 } else { 28.0 };
            // Fixed phase: the signature is a consistent shift in feature space.
            bank.push((freq, SIGNATURE_AMP, 0.0));
        }
        for (k, v) in row.iter_mut().enumerate() {
            let tones: f64 = bank
                .iter()
                .map(|&(f, a, ph)| {
                    a * (std::f64::consts::TAU * f * k as f64 / AUDIO_FEATURES as f64 + ph).cos()
                })
                .sum();
            *v = tones;
        }
    }
    out
}

/// Tone segments in Hz; signatures add a 3 kHz or 5 kHz tone.
fn audio_waveform(rng: &mut Rng, t: usize, signature: Option<usize>) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(t * AUDIO_FEATURES);
    for _ in 0..t {
        let mut tones: Vec<(f64, f64)> = (0..3)
            .map(|_| (rng.uniform_range(200.0, 1000.0), rng.uniform_range(0.3, 1.0)))
            .collect();
        if let Some(kind) = signature {
            tones.push((if kind == 0 { 3000.0 } else { 5000.0 }, SIGNATURE_AMP));
        }
        let segment: Vec<f64> = (0..SEGMENT_SAMPLES)
            .map(|i| {
                let s = i as f64 / SAMPLE_RATE;
                tones
                    .iter()
                    .map(|&(f, a)| a * (std::f64::consts::TAU * f * s).sin())
                    .sum()
            })
            .collect();
        out.extend(phi_stub(&segment, SAMPLE_RATE)?.into_data());
    }
    Ok(out)
}

fn add_noise(data: &mut [f64], sigma: f64, rng: &mut Rng) {
    if sigma > 0.0 {
        for v in data {
            *v += sigma * rng.normal();
        }
    }
}

/// Generates clip `index` of `spec` with label `label`. Each clip draws
/// from its own RNG stream, so any subset can be produced independently.
pub fn generate_clip(spec: &DatasetSpec, index: usize, label: usize) -> Result<GeneratedClip> {
    spec.validate()?;
    if label >= spec.num_classes {
        return Err(Error::config(format!(
            "label {label} out of range for {} classes",
            spec.num_classes
        )));
    }
    let (t, h, w) = (spec.frames, spec.height, spec.width);
    let mut rng = Rng::derive(spec.seed, index as u64);
    let blocks = h.div_ceil(MACROBLOCK) * w.div_ceil(MACROBLOCK);
    let mut iframes = Vec::with_capacity(t * 3 * h * w);
    let mut motion = Vec::with_capacity(t * 2 * h * w);
    let mut residuals = Vec::with_capacity(t * 3 * h * w);
    let mut pframes = Vec::with_capacity(t * 3 * h * w);
    for _ in 0..t {
        let key = key_frame(&mut rng, h, w, state(label, 0));
        let field = motion_field(&mut rng, blocks, state(label, 1));
        let mut mv = vec![0.0; 2 * h * w];
        for y in 0..h {
            for x in 0..w {
                let (dx, dy) = field[block_of(y, x, w)];
                mv[y * w + x] = dx as f64;
                mv[(h + y) * w + x] = dy as f64;
            }
        }
        let res = residual_frame(&mut rng, h, w, state(label, 2));
        let mv_tensor = Tensor::new(&[2, h, w], mv.clone())?;
        let predicted = motion_compensate(&key, &mv_tensor, h, w);
        pframes.extend(predicted.iter().zip(&res).map(|(p, r)| p + r));
        iframes.extend(key);
        motion.extend(mv);
        residuals.extend(res);
    }
    let audio = match spec.audio {
        AudioMode::Features => audio_features(&mut rng, t, state(label, 3)),
        AudioMode::Waveform => audio_waveform(&mut rng, t, state(label, 3))?,
    };

    let clean_iframes = Tensor::new(&[t, 3, h, w], iframes.clone())?;
    let clean_motion = Tensor::new(&[t, 2, h, w], motion.clone())?;
    let mut noisy = [iframes, motion, residuals, audio];
    for part in &mut noisy {
        add_noise(part, spec.noise, &mut rng);
    }
    let [iframes, motion, residuals, audio] = noisy;
    Ok(GeneratedClip {
        clip: CompressedClip {
            iframes: Tensor::new(&[t, 3, h, w], iframes)?,
            motion_vectors: Tensor::new(&[t, 2, h, w], motion)?,
            residuals: Tensor::new(&[t, 3, h, w], residuals)?,
            audio: Tensor::new(&[t, AUDIO_FEATURES], audio)?,
            label,
        },
        pframes: Tensor::new(&[t, 3, h, w], pframes)?,
        clean_motion,
        clean_iframes,
    })
}

/// All clips of `spec`, class-major: clip `c·K + j` has label `c`.
pub fn generate(spec: &DatasetSpec) -> Result<Vec<CompressedClip>> {
    spec.validate()?;
    (0..spec.len())
        .map(|i| Ok(generate_clip(spec, i, i / spec.clips_per_class)?.clip))
        .collect()
}

pub fn write_clip_to<W: Write>(w: &mut W, clip: &CompressedClip) -> Result<()> {
    w.write_all(CLIP_MAGIC)?;
    w.write_all(&CLIP_VERSION.to_le_bytes())?;
    for v in [clip.label, clip.frames(), clip.height(), clip.width()] {
        let v = u32::try_from(v).map_err(|_| Error::Data(format!("{v} does not fit in u32")))?;
        w.write_all(&v.to_le_bytes())?;
    }
    for t in [&clip.iframes, &clip.motion_vectors, &clip.residuals, &clip.audio] {
        write_tensor(w, t)?;
    }
    Ok(())
}

pub fn read_clip_from<R: Read>(r: &mut R) -> Result<CompressedClip> {
    let mut offset = 0u64;
    let mut magic = [0u8; 4];
    read_exact(r, &mut magic, &mut offset)?;
    if &magic != CLIP_MAGIC {
        return Err(Error::format(0, "bad magic, expected \"MMVC\""));
    }
    let version = read_u32(r, &mut offset)?;
    if version != CLIP_VERSION {
        return Err(Error::format(4, format!("unsupported clip version {version}")));
    }
    let label = read_u32(r, &mut offset)? as usize;
    let t = read_u32(r, &mut offset)? as usize;
    let h = read_u32(r, &mut offset)? as usize;
    let w = read_u32(r, &mut offset)? as usize;
    let expected: [Vec<usize>; 4] = [
        vec![t, 3, h, w],
        vec![t, 2, h, w],
        vec![t, 3, h, w],
        vec![t, AUDIO_FEATURES],
    ];
    let mut parts = Vec::with_capacity(4);
    for shape in &expected {
        let at = offset;
        let tensor = read_tensor(r, &mut offset)?;
        if tensor.shape() != shape.as_slice() {
            return Err(Error::format(
                at,
                format!("tensor {:?} does not match header {shape:?}", tensor.shape()),
            ));
        }
        parts.push(tensor);
    }
    let audio = parts.pop().unwrap();
    let residuals = parts.pop().unwrap();
    let motion_vectors = parts.pop().unwrap();
    let iframes = parts.pop().unwrap();
    Ok(CompressedClip {
        iframes,
        motion_vectors,
        residuals,
        audio,
        label,
    })
}

pub fn write_clip(clip: &CompressedClip, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_clip_to(&mut w, clip)?;
    w.flush()?;
    Ok(())
}

pub fn read_clip(path: &Path) -> Result<CompressedClip> {
    read_clip_from(&mut BufReader::new(File::open(path)?))
}

/// Writes every clip into `dir` plus a manifest; returns the manifest path.
pub fn write_dataset(dir: &Path, clips: &[CompressedClip]) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    for (i, clip) in clips.iter().enumerate() {
        let name = format!("clip_{i:05}.mmvc");
        write_clip(clip, &dir.join(&name))?;
        manifest.push_str(&format!("{name}\t{}\n", clip.label));
    }
    let path = dir.join(MANIFEST_NAME);
    fs::write(&path, manifest)?;
    Ok(path)
}

/// Parses `path<TAB>label` lines; relative paths resolve against the
/// manifest's directory.
pub fn read_manifest(path: &Path) -> Result<Vec<(PathBuf, usize)>> {
    let text = fs::read_to_string(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut entries = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (file, label) = line.split_once('\t').ok_or_else(|| {
            Error::Data(format!("{}:{}: expected \"path<TAB>label\"", path.display(), n + 1))
        })?;
        let label = label.trim().parse().map_err(|_| {
            Error::Data(format!("{}:{}: bad label \"{label}\"", path.display(), n + 1))
        })?;
        entries.push((base.join(file), label));
    }
    Ok(entries)
}

/// Loads every clip listed in a manifest, checking labels agree.
pub fn load_dataset(manifest: &Path) -> Result<Vec<CompressedClip>> {
    read_manifest(manifest)?
        .into_iter()
        .map(|(path, label)| {
            let clip = read_clip(&path)?;
            if clip.label != label {
                return Err(Error::Data(format!(
                    "{}: file label {} disagrees with manifest label {label}",
                    path.display(),
                    clip.label
                )));
            }
            Ok(clip)
        })
        .collect()
}
