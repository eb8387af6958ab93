//! Closed-form multiply-add accounting.
//!
//! One multiply-add is two FLOPs. Layer norms, softmax, GELU, residual
//! additions and the shift-merge data movement are not counted.

use super::{param_specs, ModelConfig, StageKind, Variant};
use crate::attention::{ClsPolicy, ConvAxis};
use crate::error::Result;
use crate::model::ConvKind;
use crate::tokenize::AUDIO_FEATURES;

/// Cost of one stage of one layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageFlops {
    pub name: String,
    /// Keys per patch query, CLS excluded; `None` for non-attention stages.
    pub keys_per_query: Option<usize>,
    /// q/k/v and output projections.
    pub projection_macs: u64,
    /// Score products plus softmax-weighted sums.
    pub score_macs: u64,
    /// Convolution or MLP arithmetic.
    pub other_macs: u64,
}

impl StageFlops {
    pub fn macs(&self) -> u64 {
        self.projection_macs + self.score_macs + self.other_macs
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlopsReport {
    pub label: String,
    pub layers: usize,
    /// Stages of one layer in execution order, MLP last.
    pub layer_stages: Vec<StageFlops>,
    pub embedding_macs: u64,
    pub head_macs: u64,
    /// Sum of per-query key counts over the attention stages of a layer.
    pub keys_per_patch: usize,
    /// Asymptotic per-patch cost, e.g. `O(N + T + |S|)`.
    pub complexity: String,
    pub params: usize,
}

impl FlopsReport {
    pub fn layer_macs(&self) -> u64 {
        self.layer_stages.iter().map(StageFlops::macs).sum()
    }

    pub fn total_macs(&self) -> u64 {
        self.embedding_macs + self.layers as u64 * self.layer_macs() + self.head_macs
    }

    pub fn total_flops(&self) -> u64 {
        2 * self.total_macs()
    }

    /// Header plus one row per stage, then a totals row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "model,stage,keys_per_query,projection_macs,score_macs,other_macs,macs,flops\n",
        );
        let mut row = |stage: &str, keys: String, p: u64, s: u64, o: u64| {
            let m = p + s + o;
            out.push_str(&format!(
                "{},{stage},{keys},{p},{s},{o},{m},{}\n",
                self.label,
                2 * m
            ));
        };
        row("embedding", String::new(), 0, 0, self.embedding_macs);
        for st in &self.layer_stages {
            let keys = st.keys_per_query.map_or_else(String::new, |k| k.to_string());
            row(
                &format!("{}(x{})", st.name, self.layers),
                keys,
                st.projection_macs * self.layers as u64,
                st.score_macs * self.layers as u64,
                st.other_macs * self.layers as u64,
            );
        }
        row("head", String::new(), 0, 0, self.head_macs);
        let total = self.total_macs();
        out.push_str(&format!(
            "{},total,{},,,,{total},{}\n",
            self.label,
            self.keys_per_patch,
            2 * total
        ));
        out
    }
}

fn complexity(variant: Variant) -> &'static str {
    match variant {
        Variant::I => "O(N·T·|S|)",
        Variant::II => "O(N·|S| + T·|S|)",
        Variant::III => "O(N + T + |S|)",
        Variant::IV => "O(M + F + |S|)",
    }
}

/// Exact multiply-add counts of `config`.
pub fn count_flops(config: &ModelConfig) -> Result<FlopsReport> {
    config.validate()?;
    let dims = config.field_dims();
    let d = config.dim as u64;
    let tokens = dims.tokens() as u64;
    let rows = dims.rows() as u64;
    let mut stages = Vec::new();
    let mut keys_per_patch = 0;
    for plan in config.layer_plan()? {
        match plan.kind {
            StageKind::Attention(scope) => {
                let card = scope.cardinality(&dims);
                keys_per_patch += card;
                let cls = config.cls_policy == ClsPolicy::Global || scope.is_spatial();
                let (cls_key, cls_query_keys) = if cls { (1, rows) } else { (0, 1) };
                let key_pairs = tokens * (card as u64 + cls_key) + cls_query_keys;
                let outputs = if config.learned_output_proj { 4 } else { 3 };
                stages.push(StageFlops {
                    name: plan.name.to_string(),
                    keys_per_query: Some(card),
                    projection_macs: outputs * rows * d * d,
                    score_macs: 2 * key_pairs * d,
                    other_macs: 0,
                });
            }
            StageKind::ShiftMerge => {
                keys_per_patch += dims.modalities;
                stages.push(StageFlops {
                    name: plan.name.to_string(),
                    keys_per_query: Some(dims.modalities),
                    projection_macs: 0,
                    score_macs: 0,
                    other_macs: 0,
                });
            }
        }
        if let Some(axis) = plan.conv {
            let taps = match axis {
                ConvAxis::Spatial { tile } => (tile.0 * tile.1) as u64,
                ConvAxis::Temporal { window } => window as u64,
            };
            let per_tap = match config.conv {
                ConvKind::Depthwise => d,
                ConvKind::Full => d * d,
            };
            stages.push(StageFlops {
                name: format!("{}.conv", plan.name),
                keys_per_query: None,
                projection_macs: 0,
                score_macs: 0,
                other_macs: tokens * taps * per_tap,
            });
        }
    }
    stages.push(StageFlops {
        name: "mlp".into(),
        keys_per_query: None,
        projection_macs: 0,
        score_macs: 0,
        other_macs: 2 * rows * d * config.mlp_hidden() as u64,
    });
    let (t, n, p2) = (
        config.frames as u64,
        config.patches() as u64,
        (config.patch * config.patch) as u64,
    );
    // I-frames and residuals have 3 channels, motion vectors 2.
    let embedding_macs = t * n * d * 8 * p2 + t * d * AUDIO_FEATURES as u64;
    Ok(FlopsReport {
        label: config.label(),
        layers: config.layers,
        layer_stages: stages,
        embedding_macs,
        head_macs: config.num_classes as u64 * d,
        keys_per_patch,
        complexity: complexity(config.variant).to_string(),
        params: count_params(config)?,
    })
}

/// Number of scalar parameters of `config`.
pub fn count_params(config: &ModelConfig) -> Result<usize> {
    Ok(param_specs(config)?.iter().map(|s| s.numel()).sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{McaKind, MmvitModel};

    #[test]
    fn totals_are_sums_of_stages() {
        let r = count_flops(&ModelConfig::default()).unwrap();
        let layer: u64 = r.layer_stages.iter().map(|s| s.macs()).sum();
        assert_eq!(
            r.total_macs(),
            r.embedding_macs + layer * r.layers as u64 + r.head_macs
        );
        assert_eq!(r.total_flops(), 2 * r.total_macs());
    }

    #[test]
    fn param_count_matches_model() {
        for variant in Variant::ALL {
            for mca in McaKind::ALL {
                let cfg = ModelConfig {
                    variant,
                    mca,
                    ..Default::default()
                };
                let m = MmvitModel::new(cfg.clone()).unwrap();
                assert_eq!(count_params(&cfg).unwrap(), m.param_count());
            }
        }
    }

    #[test]
    fn csv_has_totals_row() {
        let csv = count_flops(&ModelConfig::default()).unwrap().to_csv();
        assert!(csv.lines().last().unwrap().contains(",total,"));
    }
}
