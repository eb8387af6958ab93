use std::fmt;
use std::str::FromStr;

use crate::attention::{check_heads, choose_tile, AttentionScope, ClsPolicy, ConvAxis};
use crate::error::{Error, Result};
use crate::tokenize::FieldDims;

/// Attention factorization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Joint space-time-modality attention.
    I,
    /// Time (across modalities) then space (across modalities).
    II,
    /// Time, cross-modal and space attention in a configurable order.
    III,
    /// As III with local windows and inter-window convolutions.
    IV,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::I, Variant::II, Variant::III, Variant::IV];

    pub fn is_factorized_stm(self) -> bool {
        matches!(self, Variant::III | Variant::IV)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Variant::I => "I",
            Variant::II => "II",
            Variant::III => "III",
            Variant::IV => "IV",
        };
        f.write_str(s)
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "I" | "1" => Ok(Variant::I),
            "II" | "2" => Ok(Variant::II),
            "III" | "3" => Ok(Variant::III),
            "IV" | "4" => Ok(Variant::IV),
            other => Err(Error::config(format!("unknown variant \"{other}\""))),
        }
    }
}

/// Cross-modal attention mechanism.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum McaKind {
    Merged,
    Co,
    ShiftMerge,
}

impl McaKind {
    pub const ALL: [McaKind; 3] = [McaKind::Merged, McaKind::Co, McaKind::ShiftMerge];
}

impl fmt::Display for McaKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            McaKind::Merged => "merged",
            McaKind::Co => "co",
            McaKind::ShiftMerge => "shift-merge",
        })
    }
}

impl FromStr for McaKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('_', "-").as_str() {
            "merged" => Ok(McaKind::Merged),
            "co" => Ok(McaKind::Co),
            "shift-merge" | "shift" => Ok(McaKind::ShiftMerge),
            other => Err(Error::config(format!("unknown cross-modal attention \"{other}\""))),
        }
    }
}

/// One of the three factorized attention stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum StageTag {
    Time,
    Modality,
    Space,
}

impl StageTag {
    pub fn symbol(self) -> char {
        match self {
            StageTag::Time => 'T',
            StageTag::Modality => 'M',
            StageTag::Space => 'S',
        }
    }
}

/// Execution order of the time / cross-modal / space stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct AttentionOrder(pub [StageTag; 3]);

impl Default for AttentionOrder {
    /// T⇒M⇒S.
    fn default() -> Self {
        AttentionOrder([StageTag::Time, StageTag::Modality, StageTag::Space])
    }
}

impl AttentionOrder {
    pub fn new(stages: [StageTag; 3]) -> Result<Self> {
        let mut sorted = stages;
        sorted.sort();
        if sorted != [StageTag::Time, StageTag::Modality, StageTag::Space] {
            return Err(Error::config(format!(
                "attention order {stages:?} is not a permutation of T, M, S"
            )));
        }
        Ok(AttentionOrder(stages))
    }

    /// All six permutations, in the row order of the attention-order table.
    pub fn all() -> [AttentionOrder; 6] {
        use StageTag::{Modality as M, Space as S, Time as T};
        [
            AttentionOrder([T, S, M]),
            AttentionOrder([S, T, M]),
            AttentionOrder([T, M, S]),
            AttentionOrder([S, M, T]),
            AttentionOrder([M, T, S]),
            AttentionOrder([M, S, T]),
        ]
    }

    pub fn stages(&self) -> [StageTag; 3] {
        self.0
    }
}

impl fmt::Display for AttentionOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [a, b, c] = self.0;
        write!(f, "{}>{}>{}", a.symbol(), b.symbol(), c.symbol())
    }
}

impl FromStr for AttentionOrder {
    type Err = Error;

    /// Accepts `TMS`, `T>M>S`, `T=>M=>S` or `T⇒M⇒S`.
    fn from_str(s: &str) -> Result<Self> {
        let tags: Vec<StageTag> = s
            .chars()
            .filter(|c| c.is_ascii_alphabetic())
            .map(|c| match c.to_ascii_uppercase() {
                'T' => Ok(StageTag::Time),
                'M' => Ok(StageTag::Modality),
                'S' => Ok(StageTag::Space),
                other => Err(Error::config(format!("unknown stage '{other}' in order \"{s}\""))),
            })
            .collect::<Result<_>>()?;
        let arr: [StageTag; 3] = tags
            .try_into()
            .map_err(|_| Error::config(format!("attention order \"{s}\" needs three stages")))?;
        AttentionOrder::new(arr)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ConvKind {
    Depthwise,
    Full,
}

/// What a stage in a layer does.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageKind {
    /// Pre-norm multi-head attention over a scope, with residual.
    Attention(AttentionScope),
    /// Pre-norm parameter-free quarter exchange, with residual.
    ShiftMerge,
}

/// A stage of one layer as executed, with an optional convolution that
/// follows it (variant IV).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StagePlan {
    pub name: &'static str,
    pub kind: StageKind,
    pub conv: Option<ConvAxis>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub variant: Variant,
    pub mca: McaKind,
    pub order: AttentionOrder,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    /// Spatial window for variant IV, in patches. Defaults to N/4.
    pub window_patches: Option<usize>,
    /// Temporal window for variant IV, in frames. Defaults to T/2.
    pub window_frames: Option<usize>,
    pub mlp_ratio: usize,
    pub num_classes: usize,
    pub seed: u64,
    pub conv: ConvKind,
    pub learned_output_proj: bool,
    pub cls_policy: ClsPolicy,
}

impl Default for ModelConfig {
    /// Desk-scale defaults: two 32×32 frames, 16-pixel patches, width 16.
    fn default() -> Self {
        ModelConfig {
            variant: Variant::III,
            mca: McaKind::Merged,
            order: AttentionOrder::default(),
            frames: 2,
            height: 32,
            width: 32,
            patch: 16,
            dim: 16,
            heads: 2,
            layers: 2,
            window_patches: None,
            window_frames: None,
            mlp_ratio: 4,
            num_classes: 8,
            seed: 0,
            conv: ConvKind::Depthwise,
            learned_output_proj: true,
            cls_policy: ClsPolicy::Global,
        }
    }
}

impl ModelConfig {
    /// ViT-B/16 sized model on eight 224×224 frames.
    pub fn vit_base(variant: Variant, mca: McaKind) -> Self {
        ModelConfig {
            variant,
            mca,
            frames: 8,
            height: 224,
            width: 224,
            patch: 16,
            dim: 768,
            heads: 12,
            layers: 12,
            num_classes: 101,
            ..Default::default()
        }
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.height / self.patch, self.width / self.patch)
    }

    pub fn patches(&self) -> usize {
        let (h, w) = self.grid();
        h * w
    }

    pub fn field_dims(&self) -> FieldDims {
        let (gh, gw) = self.grid();
        FieldDims {
            modalities: 4,
            frames: self.frames,
            grid_h: gh,
            grid_w: gw,
            width: self.dim,
        }
    }

    pub fn mlp_hidden(&self) -> usize {
        self.mlp_ratio * self.dim
    }

    /// Resolved spatial tile for variant IV.
    pub fn window_tile(&self) -> Result<(usize, usize)> {
        let (gh, gw) = self.grid();
        let m = self.window_patches.unwrap_or((self.patches() / 4).max(1));
        choose_tile(gh, gw, m)
    }

    /// Resolved temporal window for variant IV.
    pub fn window_len(&self) -> Result<usize> {
        let f = self.window_frames.unwrap_or((self.frames / 2).max(1));
        if f == 0 || self.frames % f != 0 {
            return Err(Error::config(format!(
                "temporal window {f} does not divide {} frames",
                self.frames
            )));
        }
        Ok(f)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("frames", self.frames),
            ("height", self.height),
            ("width", self.width),
            ("patch", self.patch),
            ("dim", self.dim),
            ("layers", self.layers),
            ("mlp_ratio", self.mlp_ratio),
            ("classes", self.num_classes),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if self.height % self.patch != 0 || self.width % self.patch != 0 {
            return Err(Error::config(format!(
                "frame {}x{} is not divisible by patch {}",
                self.height, self.width, self.patch
            )));
        }
        check_heads(self.dim, self.heads)?;
        if self.variant.is_factorized_stm() && self.mca == McaKind::ShiftMerge && self.dim % 4 != 0 {
            return Err(Error::config(format!(
                "shift-merge needs dim divisible by 4, got {}",
                self.dim
            )));
        }
        if self.variant == Variant::IV {
            self.window_tile()?;
            self.window_len()?;
        }
        Ok(())
    }

    /// Canonical (parameter-layout) stage list of one layer.
    pub(crate) fn canonical_stages(&self) -> Result<Vec<(StageTag, StagePlan)>> {
        let cross = match self.mca {
            McaKind::Merged => StageKind::Attention(AttentionScope::Modality),
            McaKind::Co => StageKind::Attention(AttentionScope::OtherModalities),
            McaKind::ShiftMerge => StageKind::ShiftMerge,
        };
        let plan = |name, kind, conv| StagePlan { name, kind, conv };
        Ok(match self.variant {
            Variant::I => vec![(
                StageTag::Space,
                plan("joint", StageKind::Attention(AttentionScope::JointStm), None),
            )],
            Variant::II => vec![
                (
                    StageTag::Time,
                    plan("time", StageKind::Attention(AttentionScope::TimeAcrossModalities), None),
                ),
                (
                    StageTag::Space,
                    plan("space", StageKind::Attention(AttentionScope::SpaceAcrossModalities), None),
                ),
            ],
            Variant::III => vec![
                (
                    StageTag::Time,
                    plan("time", StageKind::Attention(AttentionScope::TimeWithinModality), None),
                ),
                (StageTag::Modality, plan("mca", cross, None)),
                (
                    StageTag::Space,
                    plan("space", StageKind::Attention(AttentionScope::SpaceWithinModality), None),
                ),
            ],
            Variant::IV => {
                let window = self.window_len()?;
                let tile = self.window_tile()?;
                vec![
                    (
                        StageTag::Time,
                        plan(
                            "time",
                            StageKind::Attention(AttentionScope::LocalTime { window }),
                            Some(ConvAxis::Temporal { window }),
                        ),
                    ),
                    (StageTag::Modality, plan("mca", cross, None)),
                    (
                        StageTag::Space,
                        plan(
                            "space",
                            StageKind::Attention(AttentionScope::LocalSpace { tile }),
                            Some(ConvAxis::Spatial { tile }),
                        ),
                    ),
                ]
            }
        })
    }

    /// Stages of one layer in execution order.
    pub fn layer_plan(&self) -> Result<Vec<StagePlan>> {
        let canonical = self.canonical_stages()?;
        if !self.variant.is_factorized_stm() {
            return Ok(canonical.into_iter().map(|(_, p)| p).collect());
        }
        Ok(self
            .order
            .stages()
            .iter()
            .map(|tag| {
                canonical
                    .iter()
                    .find(|(t, _)| t == tag)
                    .map(|(_, p)| *p)
                    .expect("all three stages present")
            })
            .collect())
    }

    /// Applies one `key=value` setting; returns `false` for unknown keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let v = value.trim();
        match key {
            "variant" => self.variant = v.parse()?,
            "mca" => self.mca = v.parse()?,
            "order" => self.order = v.parse()?,
            "frames" => self.frames = parse_num(key, v)?,
            "height" => self.height = parse_num(key, v)?,
            "width" => self.width = parse_num(key, v)?,
            "patch" => self.patch = parse_num(key, v)?,
            "dim" => self.dim = parse_num(key, v)?,
            "heads" => self.heads = parse_num(key, v)?,
            "layers" => self.layers = parse_num(key, v)?,
            "window_patches" => self.window_patches = parse_opt(key, v)?,
            "window_frames" => self.window_frames = parse_opt(key, v)?,
            "mlp_ratio" => self.mlp_ratio = parse_num(key, v)?,
            "classes" => self.num_classes = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "conv" => {
                self.conv = match v {
                    "depthwise" => ConvKind::Depthwise,
                    "full" => ConvKind::Full,
                    _ => return Err(Error::config(format!("conv must be depthwise|full, got \"{v}\""))),
                }
            }
            "output_proj" => {
                self.learned_output_proj = match v {
                    "learned" => true,
                    "identity" => false,
                    _ => {
                        return Err(Error::config(format!(
                            "output_proj must be learned|identity, got \"{v}\""
                        )))
                    }
                }
            }
            "cls_policy" => {
                self.cls_policy = match v {
                    "global" => ClsPolicy::Global,
                    "spatial-only" | "spatial_only" => ClsPolicy::SpatialOnly,
                    _ => {
                        return Err(Error::config(format!(
                            "cls_policy must be global|spatial-only, got \"{v}\""
                        )))
                    }
                }
            }
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// All settings as `key=value` pairs, accepted back by [`ModelConfig::set`].
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let opt = |o: Option<usize>| o.map_or_else(|| "auto".to_string(), |v| v.to_string());
        vec![
            ("variant".into(), self.variant.to_string()),
            ("mca".into(), self.mca.to_string()),
            ("order".into(), self.order.to_string()),
            ("frames".into(), self.frames.to_string()),
            ("height".into(), self.height.to_string()),
            ("width".into(), self.width.to_string()),
            ("patch".into(), self.patch.to_string()),
            ("dim".into(), self.dim.to_string()),
            ("heads".into(), self.heads.to_string()),
            ("layers".into(), self.layers.to_string()),
            ("window_patches".into(), opt(self.window_patches)),
            ("window_frames".into(), opt(self.window_frames)),
            ("mlp_ratio".into(), self.mlp_ratio.to_string()),
            ("classes".into(), self.num_classes.to_string()),
            ("seed".into(), self.seed.to_string()),
            (
                "conv".into(),
                match self.conv {
                    ConvKind::Depthwise => "depthwise",
                    ConvKind::Full => "full",
                }
                .into(),
            ),
            (
                "output_proj".into(),
                if self.learned_output_proj { "learned" } else { "identity" }.into(),
            ),
            (
                "cls_policy".into(),
                match self.cls_policy {
                    ClsPolicy::Global => "global",
                    ClsPolicy::SpatialOnly => "spatial-only",
                }
                .into(),
            ),
        ]
    }

    pub fn label(&self) -> String {
        match self.variant {
            Variant::I | Variant::II => format!("MM-ViT {}", self.variant),
            _ => format!("MM-ViT {} ({})", self.variant, self.mca),
        }
    }
}

pub(crate) fn parse_num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::config(format!("{key}: cannot parse \"{v}\"")))
}

fn parse_opt(key: &str, v: &str) -> Result<Option<usize>> {
    if v == "auto" {
        Ok(None)
    } else {
        parse_num(key, v).map(Some)
    }
}
