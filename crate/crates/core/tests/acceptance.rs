//! Acceptance run: one PASS/FAIL line per criterion, then a non-zero exit
//! if any criterion failed. Tolerances are fixed constants below.

mod common;

use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use common::{in_scope, masked_joint_oracle, random_clip, random_field, FD_STEP};
use mmvit::attention::{
    mca_co, mca_merged, mca_shift_merge, msa, AttentionScope, ClsPolicy, MsaParams,
};
use mmvit::datagen::generate;
use mmvit::harness::cli::run;
use mmvit::harness::{ablate_modalities, ablate_order, rollout, rollout_from_trace, train, RunConfig, TrainSettings};
use mmvit::model::{
    count_flops, ForwardOptions, McaKind, MmvitModel, ModelConfig, StageRecord, Variant,
};
use mmvit::tensor::{Rng, Tensor};
use mmvit::tokenize::{FieldDims, Modality, TokenField};

const ORACLE_TOL: f64 = 1e-10;
const ORACLE_BUDGET: Duration = Duration::from_secs(10);
const GRAD_TOL: f64 = 1e-4;
const GRAD_COORDS: usize = 20;
const GRAD_BUDGET: Duration = Duration::from_secs(120);
const COMPLEXITY_TRIALS: usize = 50;
const ABLATION_MIN_ACC: f64 = 0.90;
const ABLATION_MIN_DROP_PP: f64 = 15.0;
const ABLATION_EPOCHS: usize = 30;
const ABLATION_BUDGET: Duration = Duration::from_secs(30 * 60);
const ORDER_EPOCHS: usize = 5;
const ORDER_WITNESS: f64 = 1e-6;
const ROLLOUT_SUM_TOL: f64 = 1e-9;
const ROLLOUT_ORACLE_TOL: f64 = 1e-10;
const ROLLOUT_UNIFORM_TOL: f64 = 1e-12;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn all_scopes() -> Vec<AttentionScope> {
    vec![
        AttentionScope::JointStm,
        AttentionScope::TimeAcrossModalities,
        AttentionScope::SpaceAcrossModalities,
        AttentionScope::TimeWithinModality,
        AttentionScope::SpaceWithinModality,
        AttentionScope::Modality,
        AttentionScope::OtherModalities,
        AttentionScope::LocalTime { window: 2 },
        AttentionScope::LocalSpace { tile: (1, 2) },
    ]
}

fn oracle_equivalence() -> Outcome {
    let start = Instant::now();
    let mut rng = Rng::new(1);
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    for (frames, grid) in [(4, (3, 3)), (2, (2, 4)), (4, (1, 2))] {
        let dims = FieldDims {
            modalities: 4,
            frames,
            grid_h: grid.0,
            grid_w: grid.1,
            width: 8,
        };
        for scope in all_scopes() {
            if scope.validate(&dims).is_err() {
                continue;
            }
            let field = random_field(dims, &mut rng);
            let params = MsaParams::init(8, 2, true, &mut rng).unwrap();
            let got = msa(&field, scope, &params).unwrap().to_matrix();
            let want = masked_joint_oracle(&field, &params, |q, k| in_scope(scope, &dims, ClsPolicy::Global, q, k));
            worst = worst.max(got.max_abs_diff(&want));
            cases += 1;
        }
        let field = random_field(dims, &mut rng);
        let params = MsaParams::init(8, 2, true, &mut rng).unwrap();
        for (scope, got) in [
            (AttentionScope::Modality, mca_merged(&field, &params).unwrap()),
            (AttentionScope::OtherModalities, mca_co(&field, &params).unwrap()),
        ] {
            let want = masked_joint_oracle(&field, &params, |q, k| in_scope(scope, &dims, ClsPolicy::Global, q, k));
            worst = worst.max(got.to_matrix().max_abs_diff(&want));
            cases += 1;
        }
    }
    let elapsed = start.elapsed();
    outcome(
        worst < ORACLE_TOL && elapsed < ORACLE_BUDGET,
        format!("{cases} cases, max abs diff {worst:.2e} (< {ORACLE_TOL:.0e}), {:.2} s (< {} s)", elapsed.as_secs_f64(), ORACLE_BUDGET.as_secs()),
    )
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let clip = random_clip(2, 32, 32, 5, 2);
    let opts = ForwardOptions::default();
    let mut rng = Rng::new(3);
    let mut worst: f64 = 0.0;
    let mut runs = 0;
    for variant in Variant::ALL {
        for mca in [McaKind::Merged, McaKind::Co, McaKind::ShiftMerge] {
            let cfg = ModelConfig {
                variant,
                mca,
                dim: 8,
                heads: 2,
                layers: 2,
                window_patches: Some(2),
                ..Default::default()
            };
            let mut model = MmvitModel::new(cfg).unwrap();
            for p in model.params_mut() {
                for v in p.data_mut() {
                    *v += 0.05 * rng.normal();
                }
            }
            let (_, _, grads) = model.loss_and_grads(&clip, &opts).unwrap();
            for _ in 0..GRAD_COORDS {
                let i = rng.below(model.params().len());
                let j = rng.below(model.params()[i].numel());
                let orig = model.params()[i].data()[j];
                model.params_mut()[i].data_mut()[j] = orig + FD_STEP;
                let up = model.loss(&clip, &opts).unwrap();
                model.params_mut()[i].data_mut()[j] = orig - FD_STEP;
                let down = model.loss(&clip, &opts).unwrap();
                model.params_mut()[i].data_mut()[j] = orig;
                let numeric = (up - down) / (2.0 * FD_STEP);
                let analytic = grads[i].data()[j];
                worst = worst.max((analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3));
            }
            runs += 1;
        }
    }
    let elapsed = start.elapsed();
    outcome(
        worst < GRAD_TOL && elapsed < GRAD_BUDGET,
        format!(
            "{runs} variant/mechanism pairs x {GRAD_COORDS} coords, worst rel err {worst:.2e} (< {GRAD_TOL:.0e}), {:.1} s (< {} s)",
            elapsed.as_secs_f64(),
            GRAD_BUDGET.as_secs()
        ),
    )
}

/// Counts the non-CLS keys of query row `q` by scanning every row.
fn brute_keys(scope: AttentionScope, dims: &FieldDims, q: usize) -> usize {
    (1..dims.rows())
        .filter(|&k| in_scope(scope, dims, ClsPolicy::Global, q, k))
        .count()
}

fn complexity() -> Outcome {
    let mut rng = Rng::new(4);
    let mut mismatches = Vec::new();
    let divisors = |n: usize| -> Vec<usize> { (1..=n).filter(|d| n % d == 0).collect() };
    for trial in 0..COMPLEXITY_TRIALS {
        let s = 2 + rng.below(4);
        let t = 1 + rng.below(8);
        let (gh, gw) = (1 + rng.below(4), 1 + rng.below(4));
        let n = gh * gw;
        let dh = divisors(gh);
        let dw = divisors(gw);
        let tile = (dh[rng.below(dh.len())], dw[rng.below(dw.len())]);
        let dt = divisors(t);
        let f = dt[rng.below(dt.len())];
        let m = tile.0 * tile.1;
        let dims = FieldDims {
            modalities: s,
            frames: t,
            grid_h: gh,
            grid_w: gw,
            width: 4,
        };
        let expected: [(&str, Vec<(AttentionScope, usize)>); 4] = [
            ("I", vec![(AttentionScope::JointStm, n * t * s)]),
            (
                "II",
                vec![
                    (AttentionScope::TimeAcrossModalities, t * s),
                    (AttentionScope::SpaceAcrossModalities, n * s),
                ],
            ),
            (
                "III",
                vec![
                    (AttentionScope::TimeWithinModality, t),
                    (AttentionScope::Modality, s),
                    (AttentionScope::SpaceWithinModality, n),
                ],
            ),
            (
                "IV",
                vec![
                    (AttentionScope::LocalTime { window: f }, f),
                    (AttentionScope::Modality, s),
                    (AttentionScope::LocalSpace { tile }, m),
                ],
            ),
        ];
        for (name, stages) in &expected {
            for &(scope, want) in stages {
                for _ in 0..3 {
                    let q = 1 + rng.below(dims.tokens());
                    let got = brute_keys(scope, &dims, q);
                    let (s0, t0, p0) = dims.coords(q).unwrap();
                    if got != want || scope.cardinality(&dims) != want || scope.patch_keys(&dims, s0, t0, p0).len() != want {
                        mismatches.push(format!("trial {trial} {name} {scope}: {got} vs {want}"));
                    }
                }
            }
        }
    }
    // The model's own stage plans at the ViT-B geometry.
    let vit_base = |v, mca| -> Vec<usize> {
        count_flops(&ModelConfig::vit_base(v, mca))
            .unwrap()
            .layer_stages
            .iter()
            .filter_map(|s| s.keys_per_query)
            .collect()
    };
    let got = [
        vit_base(Variant::I, McaKind::Merged),
        vit_base(Variant::II, McaKind::Merged),
        vit_base(Variant::III, McaKind::Merged),
        vit_base(Variant::IV, McaKind::Merged),
    ];
    let want = [vec![6272], vec![32, 784], vec![8, 4, 196], vec![4, 4, 49]];
    let base_ok = got == want;
    outcome(
        mismatches.is_empty() && base_ok,
        format!(
            "{COMPLEXITY_TRIALS} random geometries, {} mismatches{}; ViT-B geometry I {:?} II {:?} III {:?} IV {:?}",
            mismatches.len(),
            mismatches.first().map_or(String::new(), |m| format!(" (first: {m})")),
            got[0],
            got[1],
            got[2],
            got[3]
        ),
    )
}

fn flops_ordering() -> Outcome {
    let lineup = [
        ("I", Variant::I, McaKind::Merged),
        ("II", Variant::II, McaKind::Merged),
        ("III merged", Variant::III, McaKind::Merged),
        ("III shift-merge", Variant::III, McaKind::ShiftMerge),
        ("IV", Variant::IV, McaKind::Merged),
    ];
    let reports: Vec<_> = lineup
        .iter()
        .map(|&(name, v, m)| (name, count_flops(&ModelConfig::vit_base(v, m)).unwrap()))
        .collect();
    let mut broken = Vec::new();
    for pair in reports.windows(2) {
        if pair[0].1.total_flops() <= pair[1].1.total_flops() {
            broken.push(format!("{} !> {}", pair[0].0, pair[1].0));
        }
    }
    let params = |i: usize| reports[i].1.params;
    let params_ok = params(1) > params(0) && params(3) < params(2);
    let totals: Vec<String> = reports
        .iter()
        .map(|(n, r)| format!("{n} {:.4} TFLOPs/{:.2}M", r.total_flops() as f64 / 1e12, r.params as f64 / 1e6))
        .collect();
    outcome(
        broken.is_empty() && params_ok,
        format!(
            "{}; FLOPs order violations: {}; params II>I and III(shift)<III(merged): {}",
            totals.join(", "),
            if broken.is_empty() { "none".to_string() } else { broken.join(", ") },
            if params_ok { "hold" } else { "violated" }
        ),
    )
}

fn modality_ablation() -> (Outcome, RunConfig, Vec<mmvit::tokenize::CompressedClip>, Vec<mmvit::tokenize::CompressedClip>) {
    let start = Instant::now();
    let mut cfg = RunConfig::default();
    cfg.train.epochs = ABLATION_EPOCHS;
    let train_set = generate(&cfg.data).unwrap();
    let val_set = generate(&cfg.val_spec()).unwrap();
    let trained = train(&cfg.model, &cfg.train, &train_set, &val_set).unwrap();
    let rows = ablate_modalities(&trained.model, &val_set).unwrap();
    let full = rows[0].accuracy;
    let drops: Vec<(Modality, f64)> = Modality::ALL
        .iter()
        .zip(&rows[1..])
        .map(|(&m, r)| (m, 100.0 * (full - r.accuracy)))
        .collect();
    let elapsed = start.elapsed();
    let pass = full >= ABLATION_MIN_ACC
        && drops.iter().all(|&(_, d)| d >= ABLATION_MIN_DROP_PP)
        && elapsed < ABLATION_BUDGET;
    let drop_text: Vec<String> = drops.iter().map(|(m, d)| format!("{m} -{d:.1}")).collect();
    (
        outcome(
            pass,
            format!(
                "{} train / {} val clips, all-modality acc {:.1}% (>= {:.0}%), drops in pp: {} (each >= {ABLATION_MIN_DROP_PP}), {:.0} s",
                train_set.len(),
                val_set.len(),
                100.0 * full,
                100.0 * ABLATION_MIN_ACC,
                drop_text.join(", "),
                elapsed.as_secs_f64()
            ),
        ),
        cfg,
        train_set,
        val_set,
    )
}

fn attention_orders(cfg: &RunConfig, train_set: &[mmvit::tokenize::CompressedClip], val_set: &[mmvit::tokenize::CompressedClip]) -> Outcome {
    let settings = TrainSettings {
        epochs: ORDER_EPOCHS,
        ..cfg.train.clone()
    };
    let rows = match ablate_order(&cfg.model, &settings, train_set, val_set) {
        Ok(rows) => rows,
        Err(e) => return outcome(false, format!("training failed: {e}")),
    };
    let mut min_gap = f64::INFINITY;
    for a in 0..rows.len() {
        for b in a + 1..rows.len() {
            min_gap = min_gap.min(rows[a].probe_logits.max_abs_diff(&rows[b].probe_logits));
        }
    }
    let accs: Vec<String> = rows.iter().map(|r| format!("{} {:.1}%", r.order, 100.0 * r.accuracy)).collect();
    outcome(
        rows.len() == 6 && min_gap > ORDER_WITNESS,
        format!(
            "6 orders x {ORDER_EPOCHS} epochs; smallest pairwise probe-logit gap {min_gap:.3e} (> {ORDER_WITNESS:.0e}); accuracies {}",
            accs.join(", ")
        ),
    )
}

fn shift_merge_hand_case() -> Outcome {
    let tokens = Tensor::new(&[4, 1, 1, 4], (1..=16).map(f64::from).collect()).unwrap();
    let field = TokenField::new(tokens, Tensor::zeros(&[4]), (1, 1)).unwrap();
    let out = mca_shift_merge(&field).unwrap();
    let want = [
        [2.0, 7.0, 12.0, 17.0],
        [7.0, 12.0, 17.0, 22.0],
        [12.0, 17.0, 22.0, 27.0],
        [17.0, 22.0, 27.0, 32.0],
    ];
    let got: Vec<Vec<f64>> = (0..4).map(|s| out.token(s, 0, 0).to_vec()).collect();
    let pass = got.iter().zip(&want).all(|(g, w)| g.as_slice() == w.as_slice());
    outcome(pass, format!("r = {got:?}"))
}

fn rollout_checks() -> Outcome {
    let clip = random_clip(2, 32, 32, 2, 5);
    let mut worst_sum: f64 = 0.0;
    let mut worst_oracle: f64 = 0.0;
    for (variant, mca) in [
        (Variant::I, McaKind::Merged),
        (Variant::II, McaKind::Merged),
        (Variant::III, McaKind::Merged),
        (Variant::III, McaKind::ShiftMerge),
        (Variant::IV, McaKind::Co),
    ] {
        let model = MmvitModel::new(ModelConfig {
            variant,
            mca,
            dim: 8,
            layers: 2,
            ..Default::default()
        })
        .unwrap();
        let trace = model
            .forward_with(&clip, &ForwardOptions { trace: true, ..Default::default() })
            .unwrap()
            .trace
            .unwrap();
        let dims = trace.dims.unwrap();
        let rows = dims.rows();
        let mut total = vec![vec![0.0; rows]; rows];
        for (i, r) in total.iter_mut().enumerate() {
            r[i] = 1.0;
        }
        for stage in trace.layers.iter().flatten() {
            let mut m = vec![vec![0.0; rows]; rows];
            match stage {
                StageRecord::Attention { keys, weights, .. } => {
                    for q in 0..rows {
                        for (&k, &w) in keys[q].iter().zip(&weights[q]) {
                            m[q][k] += 0.5 * w;
                        }
                    }
                }
                StageRecord::ShiftMerge { .. } => {
                    m[0][0] += 0.5;
                    for q in 1..rows {
                        let (_, t, p) = dims.coords(q).unwrap();
                        for s in 0..dims.modalities {
                            m[q][dims.row(s, t, p)] += 0.5 / dims.modalities as f64;
                        }
                    }
                }
            }
            for (i, r) in m.iter_mut().enumerate() {
                r[i] += 0.5;
            }
            total = m
                .iter()
                .map(|row| (0..rows).map(|j| row.iter().zip(&total).map(|(a, b)| a * b[j]).sum()).collect())
                .collect();
        }
        let map = rollout_from_trace(&trace).unwrap();
        worst_sum = worst_sum.max((map.total() - 1.0).abs());
        worst_oracle = worst_oracle.max((map.cls_mass - total[0][0]).abs());
        for s in 0..dims.modalities {
            for t in 0..dims.frames {
                for p in 0..dims.patches() {
                    worst_oracle = worst_oracle.max((map.heatmaps[s].at(&[t, p]) - total[0][dims.row(s, t, p)]).abs());
                }
            }
        }
    }
    // Zero query/key projections make every joint stage uniform.
    let mut model = MmvitModel::new(ModelConfig {
        variant: Variant::I,
        dim: 8,
        layers: 2,
        ..Default::default()
    })
    .unwrap();
    for l in 0..2 {
        for w in ["W_Q", "W_K"] {
            *model.param_mut(&format!("layer{l}.joint.{w}")).unwrap() = Tensor::zeros(&[8, 8]);
        }
    }
    let map = rollout(&model, &clip).unwrap();
    let first = map.heatmaps[0].data()[0];
    let spread = map
        .heatmaps
        .iter()
        .flat_map(|h| h.data().iter())
        .map(|v| (v - first).abs())
        .fold(0.0, f64::max);
    outcome(
        worst_sum < ROLLOUT_SUM_TOL && worst_oracle < ROLLOUT_ORACLE_TOL && spread < ROLLOUT_UNIFORM_TOL,
        format!(
            "|sum - 1| {worst_sum:.1e} (< {ROLLOUT_SUM_TOL:.0e}), oracle diff {worst_oracle:.1e} (< {ROLLOUT_ORACLE_TOL:.0e}), uniform-map spread {spread:.1e} (< {ROLLOUT_UNIFORM_TOL:.0e})"
        ),
    )
}

fn collect_files(dir: &Path, prefix: &Path, out: &mut Vec<(String, Vec<u8>)>) {
    let mut entries: Vec<_> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    entries.sort();
    for path in entries {
        if path.is_dir() {
            collect_files(&path, prefix, out);
        } else {
            let rel = path.strip_prefix(prefix).unwrap().to_string_lossy().into_owned();
            out.push((rel, fs::read(&path).unwrap()));
        }
    }
}

fn determinism() -> Outcome {
    let pipeline = |root: &Path| -> Vec<(String, Vec<u8>)> {
        let s = |p: &str| root.join(p).to_string_lossy().into_owned();
        let args = |v: &[&str]| -> Vec<String> { std::iter::once("mmvit").chain(v.iter().copied()).map(String::from).collect() };
        let sets = ["--set", "clips_per_class=4", "--set", "val_per_class=2"];
        let data = s("data");
        let mut a = vec!["datagen", "--out", &data];
        a.extend(sets);
        assert_eq!(run(args(&a)), 0);
        let out = s("run");
        assert_eq!(run(args(&["train", "--data", &data, "--out", &out, "--set", "epochs=3"])), 0);
        let ckpt = s("run/model.ckpt");
        let eval = s("run/ablation.csv");
        assert_eq!(run(args(&["ablate-modality", "--data", &data, "--checkpoint", &ckpt, "--out", &eval])), 0);
        let mut files = Vec::new();
        collect_files(root, root, &mut files);
        files
    };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let fa = pipeline(a.path());
    let fb = pipeline(b.path());
    let differing: Vec<&str> = fa
        .iter()
        .zip(&fb)
        .filter(|(x, y)| x != y)
        .map(|(x, _)| x.0.as_str())
        .collect();
    let bytes: usize = fa.iter().map(|f| f.1.len()).sum();
    outcome(
        fa.len() == fb.len() && differing.is_empty(),
        format!("{} files ({bytes} bytes) from datagen/train/eval compared across two runs; {} differ", fa.len(), differing.len()),
    )
}

fn main() {
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut report = |n: usize, name: &'static str, o: Outcome| {
        println!("criterion {n} [{}] {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((n, name, o));
    };
    report(1, "oracle equivalence", oracle_equivalence());
    report(2, "gradient suite", gradient_suite());
    report(3, "complexity reproduction", complexity());
    report(4, "FLOPs ordering", flops_ordering());
    let (ablation, cfg, train_set, val_set) = modality_ablation();
    report(5, "modality-ablation trend", ablation);
    report(6, "attention-order suite", attention_orders(&cfg, &train_set, &val_set));
    report(7, "shift-merge hand case", shift_merge_hand_case());
    report(8, "rollout", rollout_checks());
    report(9, "determinism", determinism());
    let failed: Vec<usize> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    println!(
        "acceptance: {}/{} passed{}",
        results.len() - failed.len(),
        results.len(),
        if failed.is_empty() { String::new() } else { format!("; failed {failed:?}") }
    );
    if !failed.is_empty() {
        std::process::exit(1);
    }
}

