//! The four model variants, their parameters, checkpoints and the
//! complexity accountant.

mod checkpoint;
mod config;
mod flops;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use config::{
    AttentionOrder, ConvKind, McaKind, ModelConfig, StageKind, StagePlan, StageTag, Variant,
};
pub use flops::{count_flops, count_params, FlopsReport, StageFlops};

use crate::attention::{
    conv_kernel_shape, inter_window_conv_on_tape, msa_on_tape, shift_merge_mix, MsaVars,
};
use crate::error::{Error, Result};
use crate::tensor::{KeySets, Rng, Tape, Tensor, Var};
use crate::tokenize::{embed, CompressedClip, EmbeddingVars, FieldDims, ModalityMask, TokenField};

const SMALL_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    Normal(f64),
    Ones,
    Zeros,
}

/// Name, shape and initializer of one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    init: Init,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone, Copy)]
struct MsaSlots {
    w_q: usize,
    w_k: usize,
    w_v: usize,
    w_o: Option<usize>,
}

#[derive(Debug, Clone)]
struct StageSlots {
    plan: StagePlan,
    ln: (usize, usize),
    msa: Option<MsaSlots>,
    conv: Option<usize>,
}

#[derive(Debug, Clone)]
struct LayerSlots {
    /// Canonical order; execution order comes from the config.
    stages: Vec<StageSlots>,
    mlp_ln: (usize, usize),
    fc1: (usize, usize),
    fc2: (usize, usize),
}

/// Where each parameter lives in the flat parameter list.
#[derive(Debug, Clone)]
struct Layout {
    embed: [usize; 9],
    layers: Vec<LayerSlots>,
    final_ln: (usize, usize),
    head: (usize, usize),
}

struct LayoutBuilder {
    specs: Vec<ParamSpec>,
}

impl LayoutBuilder {
    fn push(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        self.specs.push(ParamSpec { name, shape, init });
        self.specs.len() - 1
    }

    fn ln(&mut self, prefix: &str, d: usize) -> (usize, usize) {
        (
            self.push(format!("{prefix}.ln.gain"), vec![d], Init::Ones),
            self.push(format!("{prefix}.ln.bias"), vec![d], Init::Zeros),
        )
    }
}

fn build_layout(cfg: &ModelConfig) -> Result<(Layout, Vec<ParamSpec>)> {
    cfg.validate()?;
    let d = cfg.dim;
    let (t, n, p2) = (cfg.frames, cfg.patches(), cfg.patch * cfg.patch);
    let lin = |fan_in: usize| Init::Normal(1.0 / (fan_in as f64).sqrt());
    let mut b = LayoutBuilder { specs: Vec::new() };
    let embed = [
        b.push("embed.E_I".into(), vec![d, 3 * p2], lin(3 * p2)),
        b.push("embed.E_M".into(), vec![d, 2 * p2], lin(2 * p2)),
        b.push("embed.E_R".into(), vec![d, 3 * p2], lin(3 * p2)),
        b.push("embed.E_A".into(), vec![d, 128], lin(128)),
        b.push("embed.PE_I".into(), vec![t, n, d], Init::Normal(SMALL_STD)),
        b.push("embed.PE_M".into(), vec![t, n, d], Init::Normal(SMALL_STD)),
        b.push("embed.PE_R".into(), vec![t, n, d], Init::Normal(SMALL_STD)),
        b.push("embed.PE_A".into(), vec![t, d], Init::Normal(SMALL_STD)),
        b.push("embed.cls".into(), vec![d], Init::Normal(SMALL_STD)),
    ];
    let depthwise = cfg.conv == ConvKind::Depthwise;
    let hidden = cfg.mlp_hidden();
    let mut layers = Vec::with_capacity(cfg.layers);
    for l in 0..cfg.layers {
        let mut stages = Vec::new();
        for (_, plan) in cfg.canonical_stages()? {
            let prefix = format!("layer{l}.{}", plan.name);
            let ln = b.ln(&prefix, d);
            let msa = match plan.kind {
                StageKind::Attention(_) => Some(MsaSlots {
                    w_q: b.push(format!("{prefix}.W_Q"), vec![d, d], lin(d)),
                    w_k: b.push(format!("{prefix}.W_K"), vec![d, d], lin(d)),
                    w_v: b.push(format!("{prefix}.W_V"), vec![d, d], lin(d)),
                    w_o: cfg
                        .learned_output_proj
                        .then(|| b.push(format!("{prefix}.W_O"), vec![d, d], lin(d))),
                }),
                StageKind::ShiftMerge => None,
            };
            let conv = plan.conv.map(|axis| {
                b.push(
                    format!("{prefix}.conv"),
                    conv_kernel_shape(axis, d, depthwise),
                    Init::Normal(SMALL_STD),
                )
            });
            stages.push(StageSlots {
                plan,
                ln,
                msa,
                conv,
            });
        }
        let mlp_ln = b.ln(&format!("layer{l}.mlp"), d);
        let fc1 = (
            b.push(format!("layer{l}.mlp.fc1.weight"), vec![hidden, d], lin(d)),
            b.push(format!("layer{l}.mlp.fc1.bias"), vec![hidden], Init::Zeros),
        );
        let fc2 = (
            b.push(format!("layer{l}.mlp.fc2.weight"), vec![d, hidden], lin(hidden)),
            b.push(format!("layer{l}.mlp.fc2.bias"), vec![d], Init::Zeros),
        );
        layers.push(LayerSlots {
            stages,
            mlp_ln,
            fc1,
            fc2,
        });
    }
    let final_ln = b.ln("final", d);
    let head = (
        b.push("head.weight".into(), vec![cfg.num_classes, d], lin(d)),
        b.push("head.bias".into(), vec![cfg.num_classes], Init::Zeros),
    );
    Ok((
        Layout {
            embed,
            layers,
            final_ln,
            head,
        },
        b.specs,
    ))
}

/// Parameter specs of a configuration, in serialization order.
pub fn param_specs(cfg: &ModelConfig) -> Result<Vec<ParamSpec>> {
    Ok(build_layout(cfg)?.1)
}

/// Per-call switches for [`MmvitModel::forward_with`].
#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOptions {
    /// Dropped modalities contribute only their positional encoding.
    pub mask: ModalityMask,
    /// Constant added to every pre-softmax attention score.
    pub score_offset: f64,
    /// Record head-averaged attention probabilities of every stage.
    pub trace: bool,
}

/// What one executed stage contributed to the attention trace.
#[derive(Debug, Clone)]
pub enum StageRecord {
    Attention {
        name: &'static str,
        keys: KeySets,
        /// Head-averaged probabilities aligned with `keys`.
        weights: Vec<Vec<f64>>,
    },
    ShiftMerge {
        name: &'static str,
    },
}

/// Per-layer stage records in execution order.
#[derive(Debug, Clone, Default)]
pub struct AttentionTrace {
    pub dims: Option<FieldDims>,
    pub layers: Vec<Vec<StageRecord>>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `[num_classes]`.
    pub logits: Tensor,
    pub trace: Option<AttentionTrace>,
}

/// A classifier over compressed clips.
#[derive(Debug, Clone)]
pub struct MmvitModel {
    config: ModelConfig,
    layout: Layout,
    specs: Vec<ParamSpec>,
    params: Vec<Tensor>,
}

impl MmvitModel {
    /// Random initialisation from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        let (layout, specs) = build_layout(&config)?;
        let mut rng = Rng::new(config.seed);
        let params = specs
            .iter()
            .map(|s| match s.init {
                Init::Normal(std) => Tensor::randn(&s.shape, std, &mut rng),
                Init::Ones => Tensor::full(&s.shape, 1.0),
                Init::Zeros => Tensor::zeros(&s.shape),
            })
            .collect();
        Ok(MmvitModel {
            config,
            layout,
            specs,
            params,
        })
    }

    /// Builds a model from explicit parameters (e.g. a checkpoint).
    pub fn from_params(config: ModelConfig, params: Vec<Tensor>) -> Result<Self> {
        let (layout, specs) = build_layout(&config)?;
        if params.len() != specs.len() {
            return Err(Error::config(format!(
                "configuration needs {} parameter tensors, got {}",
                specs.len(),
                params.len()
            )));
        }
        for (s, p) in specs.iter().zip(&params) {
            if p.shape() != s.shape.as_slice() {
                return Err(Error::config(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    s.name,
                    p.shape(),
                    s.shape
                )));
            }
        }
        Ok(MmvitModel {
            config,
            layout,
            specs,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.specs.iter().position(|s| s.name == name)
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.param_index(name).map(|i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.param_index(name).map(move |i| &mut self.params[i])
    }

    /// Same configuration with a different attention order; weights are
    /// shared because the parameter layout does not depend on order.
    pub fn with_order(&self, order: AttentionOrder) -> Self {
        let mut out = self.clone();
        out.config.order = order;
        out.layout = build_layout(&out.config).expect("valid config").0;
        out
    }

    /// Registers all parameters on `tape` as differentiable leaves.
    pub fn register(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.iter().map(|p| tape.param(p.clone())).collect()
    }

    fn embedding_vars(&self, vars: &[Var]) -> EmbeddingVars {
        let e = self.layout.embed;
        EmbeddingVars {
            e_i: vars[e[0]],
            e_m: vars[e[1]],
            e_r: vars[e[2]],
            e_a: vars[e[3]],
            pe_i: vars[e[4]],
            pe_m: vars[e[5]],
            pe_r: vars[e[6]],
            pe_a: vars[e[7]],
            cls: vars[e[8]],
        }
    }

    /// Runs every transformer layer on field matrix `x`.
    pub fn encode_on_tape(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        x: Var,
        dims: &FieldDims,
        opts: &ForwardOptions,
        mut trace: Option<&mut AttentionTrace>,
    ) -> Result<Var> {
        let plan = self.config.layer_plan()?;
        let mut x = x;
        for layer in &self.layout.layers {
            let mut records = Vec::new();
            for step in &plan {
                let slots = layer
                    .stages
                    .iter()
                    .find(|s| s.plan.name == step.name)
                    .expect("stage in layout");
                let (gain, bias) = (vars[slots.ln.0], vars[slots.ln.1]);
                let normed = tape.layer_norm(x, gain, bias)?;
                let update = match (slots.plan.kind, slots.msa) {
                    (StageKind::Attention(scope), Some(m)) => {
                        let keys = scope.key_sets(dims, self.config.cls_policy)?;
                        let mv = MsaVars {
                            w_q: vars[m.w_q],
                            w_k: vars[m.w_k],
                            w_v: vars[m.w_v],
                            w_o: m.w_o.map(|i| vars[i]),
                            heads: self.config.heads,
                        };
                        let stage = msa_on_tape(tape, normed, keys, &mv, opts.score_offset)?;
                        if opts.trace {
                            let (keys, weights) = tape
                                .attention_weights(stage.attention)
                                .expect("attention node");
                            records.push(StageRecord::Attention {
                                name: step.name,
                                keys,
                                weights,
                            });
                        }
                        stage.out
                    }
                    (StageKind::ShiftMerge, None) => {
                        if opts.trace {
                            records.push(StageRecord::ShiftMerge { name: step.name });
                        }
                        shift_merge_mix(tape, normed, dims)?
                    }
                    _ => unreachable!("layout matches plan"),
                };
                x = tape.add(x, update)?;
                if let (Some(axis), Some(k)) = (slots.plan.conv, slots.conv) {
                    x = inter_window_conv_on_tape(tape, x, dims, axis, vars[k])?;
                }
            }
            let normed = tape.layer_norm(x, vars[layer.mlp_ln.0], vars[layer.mlp_ln.1])?;
            let h = tape.linear(normed, vars[layer.fc1.0], Some(vars[layer.fc1.1]))?;
            let h = tape.gelu(h);
            let h = tape.linear(h, vars[layer.fc2.0], Some(vars[layer.fc2.1]))?;
            x = tape.add(x, h)?;
            if let Some(t) = trace.as_deref_mut() {
                t.layers.push(records);
            }
        }
        Ok(x)
    }

    /// Records the full forward pass; returns logits `[1×C]`.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        clip: &CompressedClip,
        opts: &ForwardOptions,
        mut trace: Option<&mut AttentionTrace>,
    ) -> Result<Var> {
        self.check_clip(clip)?;
        let dims = self.config.field_dims();
        let x = embed(tape, clip, &self.embedding_vars(vars), self.config.patch, &opts.mask)?;
        if let Some(t) = trace.as_deref_mut() {
            t.dims = Some(dims);
        }
        let x = self.encode_on_tape(tape, vars, x, &dims, opts, trace)?;
        let normed = tape.layer_norm(x, vars[self.layout.final_ln.0], vars[self.layout.final_ln.1])?;
        let cls = tape.gather_rows(normed, &[0])?;
        tape.linear(cls, vars[self.layout.head.0], Some(vars[self.layout.head.1]))
    }

    fn check_clip(&self, clip: &CompressedClip) -> Result<()> {
        let c = &self.config;
        if clip.frames() != c.frames || clip.height() != c.height || clip.width() != c.width {
            return Err(Error::config(format!(
                "clip is {}x{}x{} (TxHxW), model expects {}x{}x{}",
                clip.frames(),
                clip.height(),
                clip.width(),
                c.frames,
                c.height,
                c.width
            )));
        }
        Ok(())
    }

    pub fn forward(&self, clip: &CompressedClip) -> Result<Tensor> {
        Ok(self.forward_with(clip, &ForwardOptions::default())?.logits)
    }

    pub fn forward_with(&self, clip: &CompressedClip, opts: &ForwardOptions) -> Result<ForwardOutput> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = self.params.iter().map(|p| tape.constant(p.clone())).collect();
        let mut trace = opts.trace.then(AttentionTrace::default);
        let logits = self.forward_on_tape(&mut tape, &vars, clip, opts, trace.as_mut())?;
        let logits = tape.value(logits).reshape(&[self.config.num_classes])?;
        Ok(ForwardOutput { logits, trace })
    }

    /// Applies all layers to an explicit field (any modality count).
    pub fn encode_field(&self, field: &TokenField, opts: &ForwardOptions) -> Result<TokenField> {
        let dims = field.dims();
        if dims.width != self.config.dim {
            return Err(Error::config(format!(
                "field width {} does not match model width {}",
                dims.width, self.config.dim
            )));
        }
        let mut tape = Tape::new();
        let vars: Vec<Var> = self.params.iter().map(|p| tape.constant(p.clone())).collect();
        let x = tape.constant(field.to_matrix());
        let out = self.encode_on_tape(&mut tape, &vars, x, &dims, opts, None)?;
        TokenField::from_matrix(tape.value(out), dims)
    }

    /// Cross-entropy of one clip and its gradient w.r.t. every parameter.
    pub fn loss_and_grads(&self, clip: &CompressedClip, opts: &ForwardOptions) -> Result<(f64, Tensor, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape);
        let logits = self.forward_on_tape(&mut tape, &vars, clip, opts, None)?;
        let loss = tape.cross_entropy(logits, &[clip.label])?;
        tape.backward(loss)?;
        let grads = vars.iter().map(|&v| tape.grad(v)).collect();
        let logits = tape.value(logits).reshape(&[self.config.num_classes])?;
        Ok((tape.value(loss).data()[0], logits, grads))
    }

    /// Loss only; used for finite-difference checks.
    pub fn loss(&self, clip: &CompressedClip, opts: &ForwardOptions) -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = self.params.iter().map(|p| tape.constant(p.clone())).collect();
        let logits = self.forward_on_tape(&mut tape, &vars, clip, opts, None)?;
        let loss = tape.cross_entropy(logits, &[clip.label])?;
        Ok(tape.value(loss).data()[0])
    }
}
