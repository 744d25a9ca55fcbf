//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs with a plain `main` so every line is printed, criteria run one at a
//! time (the step-time criterion needs an otherwise idle machine), and a
//! failing criterion does not hide the others. Pass criterion numbers as
//! arguments to run a subset: `cargo test --test acceptance -- 3 6`.
//!
//! The desk-scale accuracy trend needs the CIFAR-10 binary batches; point
//! `CHANPRUNE_CIFAR10_DIR` at the directory holding `data_batch_1.bin`.
//! Without them that criterion prints FAIL marked `blocked`; the process
//! exit status only reflects blocked criteria when
//! `CHANPRUNE_ACCEPTANCE_STRICT=1`. Any other failure always fails the run.

mod common;

use std::collections::BTreeMap;
use std::panic::{self, AssertUnwindSafe};
use std::path::PathBuf;
use std::time::Instant;

use chanprune::costmodel::{estimate_step_time, padded_bytes, DeviceProfile, LayoutConfig};
use chanprune::engine::{grad_check, infer, Hyperparams};
use chanprune::harness::{measure_step_time, read_csv, run_experiment, DatasetKind, ExperimentConfig, RunRecord, EPOCHS_CSV, RESULTS_CSV};
use chanprune::importance::{make_plan, score, score_l1, ImportanceReport};
use chanprune::surgery::{apply_plan, check_equivalence};
use chanprune::{io, DType, Error, Layer, Method, ModelGraph, Preset, PrunePlan, Scope, WeightPolicy};
use common::{all_kinds, cyclic_labels, randomize_affine, uniform_batch, without_batch_norm};
use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

const BLOCKED: &str = "blocked:";

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn ratio_plan(g: &ModelGraph, ratio: f64) -> PrunePlan {
    make_plan(&score_l1(g), ratio, Scope::PerLayer).unwrap()
}

fn identity_pruning() -> Outcome {
    let mut worst = String::from("all identical");
    for preset in [Preset::Tiny, Preset::Cifar] {
        let mut g = ModelGraph::preset(preset, 10, 11).unwrap();
        randomize_affine(&mut g, 11);
        let plan = ratio_plan(&g, 0.0);
        if !plan.is_empty() {
            return Err(format!("{preset}: ratio 0 plan removes {} channels", plan.removed_channels()));
        }
        let pruned = apply_plan(&g, &plan, WeightPolicy::Reload).unwrap();
        if io::to_bytes(&pruned) != io::to_bytes(&g) {
            return Err(format!("{preset}: serialized bytes differ"));
        }
        for b in 0..10 {
            let x = uniform_batch::<f32>(1000 + b, g.input_shape, 4);
            let (a, p) = (infer(&g, &x).unwrap(), infer(&pruned, &x).unwrap());
            let same = a.data().iter().zip(p.data()).all(|(u, v)| u.to_bits() == v.to_bits());
            if !same {
                worst = format!("{preset}: batch {b} logits differ");
                return Err(worst);
            }
        }
    }
    Ok(format!("tiny and cifar presets, bytes and 10 batches of logits bitwise equal ({worst})"))
}

fn zero_channel_exactness() -> Outcome {
    const TARGET: usize = 5;
    let mut g = ModelGraph::preset(Preset::Tiny, 10, 21).unwrap();
    randomize_affine(&mut g, 21);
    for layer in &mut g.layers {
        match layer {
            Layer::Conv2d(c) if c.id == "conv2" => {
                let cout = c.out_channels;
                for (i, w) in c.weights.data_mut().iter_mut().enumerate() {
                    if i % cout == TARGET {
                        *w = 0.0;
                    }
                }
                c.bias.data_mut()[TARGET] = 0.0;
            }
            Layer::BatchNorm(b) if b.id == "bn2" => {
                b.gamma.data_mut()[TARGET] = 0.0;
                b.beta.data_mut()[TARGET] = 0.0;
            }
            _ => {}
        }
    }
    let plan = PrunePlan {
        removals: BTreeMap::from([("conv2".to_string(), vec![TARGET])]),
        source_graph_fingerprint: g.fingerprint(),
        warnings: vec![],
    };
    let pruned = apply_plan(&g, &plan, WeightPolicy::Reload).unwrap();
    let diff = check_equivalence(&g, &pruned, 10, 22, 1e-6).unwrap();
    let mut f32_diff = 0.0f32;
    for b in 0..10 {
        let x = uniform_batch::<f32>(2200 + b, g.input_shape, 4);
        let (a, p) = (infer(&g, &x).unwrap(), infer(&pruned, &x).unwrap());
        f32_diff = a.data().iter().zip(p.data()).map(|(u, v)| (u - v).abs()).fold(f32_diff, f32::max);
    }
    check(
        diff <= 1e-6,
        format!("max |Δlogit| = {diff:.3e} over 10 inputs in f64 (limit 1e-6); f32 engine rounding {f32_diff:.1e}"),
    )
}

fn gradient_correctness() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut kinds = std::collections::BTreeSet::new();
    for seed in [1, 2, 3] {
        let g = all_kinds(seed);
        kinds.extend(g.layers.iter().map(|l| l.kind()));
        let x = uniform_batch::<f64>(seed + 100, g.input_shape, 6);
        let r = grad_check(&g, &x, &cyclic_labels(6, 3), 1e-4, DType::F64).unwrap();
        worst = worst.max(r.max_relative_error);
    }
    check(
        worst <= 1e-5,
        format!("max relative error {worst:.3e} (limit 1e-5), seeds 1,2,3, kinds {kinds:?}"),
    )
}

/// Independent plan oracle: repeated minimum selection instead of one sort.
fn oracle_plan(report: &ImportanceReport, ratio: f64, scope: Scope) -> BTreeMap<String, Vec<usize>> {
    let count = |n: usize| {
        let mut k = 0;
        while ((k + 1) as f64) <= ratio * n as f64 + 1e-9 {
            k += 1;
        }
        k
    };
    let layers: Vec<(&String, &Vec<f64>)> = report.scores.iter().collect();
    let mut removed: Vec<Vec<usize>> = vec![Vec::new(); layers.len()];
    let less = |a: (f64, usize, usize), b: (f64, usize, usize)| a.0 < b.0 || (a.0 == b.0 && (a.1, a.2) < (b.1, b.2));
    let pick = |allowed: &dyn Fn(usize) -> bool, removed: &mut Vec<Vec<usize>>| -> bool {
        let mut best: Option<(f64, usize, usize)> = None;
        for (li, (_, s)) in layers.iter().enumerate() {
            if !allowed(li) || removed[li].len() + 1 >= s.len() && scope == Scope::Global {
                continue;
            }
            for (c, &v) in s.iter().enumerate() {
                if removed[li].contains(&c) {
                    continue;
                }
                if best.map_or(true, |b| less((v, li, c), b)) {
                    best = Some((v, li, c));
                }
            }
        }
        match best {
            Some((_, li, c)) => {
                removed[li].push(c);
                true
            }
            None => false,
        }
    };
    match scope {
        Scope::PerLayer => {
            for (li, (_, s)) in layers.iter().enumerate() {
                for _ in 0..count(s.len()) {
                    pick(&|l| l == li, &mut removed);
                }
            }
        }
        Scope::Global => {
            let total: usize = layers.iter().map(|(_, s)| s.len()).sum();
            for _ in 0..count(total) {
                if !pick(&|_| true, &mut removed) {
                    break;
                }
            }
        }
    }
    layers
        .iter()
        .zip(removed)
        .filter(|(_, r)| !r.is_empty())
        .map(|((id, _), mut r)| {
            r.sort_unstable();
            ((*id).clone(), r)
        })
        .collect()
}

fn plan_oracle_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut ties = 0;
    for case in 0..100 {
        let mut scores = IndexMap::new();
        let mut budget = 64usize;
        let layers = rng.gen_range(1..=6);
        for l in 0..layers {
            if budget == 0 {
                break;
            }
            let n = rng.gen_range(1..=budget.min(24));
            budget -= n;
            // Half the cases draw from four values so ties are common.
            let s: Vec<f64> = (0..n)
                .map(|_| {
                    if case % 2 == 0 {
                        [0.0, 0.25, 0.5, 1.0][rng.gen_range(0..4)]
                    } else {
                        rng.gen_range(0.0..10.0)
                    }
                })
                .collect();
            scores.insert(format!("conv{}", l + 1), s);
        }
        if case % 2 == 0 {
            ties += 1;
        }
        let report = ImportanceReport {
            method: Method::L1,
            scores,
            graph_fingerprint: format!("case{case}"),
        };
        let ratio = match case % 5 {
            0 => 1.0 / 3.0,
            1 => 0.5,
            2 => 0.29,
            _ => rng.gen_range(0.0..1.0),
        };
        for scope in [Scope::PerLayer, Scope::Global] {
            let got = make_plan(&report, ratio, scope).unwrap().removals;
            let want = oracle_plan(&report, ratio, scope);
            if got != want {
                return Err(format!("case {case} ({scope}, ratio {ratio}): got {got:?}, oracle {want:?}"));
            }
        }
    }
    Ok(format!("100 random reports x 2 scopes agree ({ties} tie-heavy)"))
}

fn cifar_dir() -> Option<PathBuf> {
    let dir = std::env::var_os("CHANPRUNE_CIFAR10_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("data/cifar-10-batches-bin"));
    dir.join("data_batch_1.bin").is_file().then_some(dir)
}

fn trend_config(data_dir: PathBuf, out_dir: PathBuf) -> ExperimentConfig {
    ExperimentConfig {
        preset: Preset::Tiny,
        dataset: DatasetKind::Cifar10,
        data_dir: Some(data_dir),
        class_subset: Some(vec![0, 1]),
        train_fraction: 0.2,
        synthetic: Default::default(),
        ratios: vec![0.0, 0.3, 0.9],
        methods: vec![Method::L1, Method::BnGamma],
        scope: Scope::PerLayer,
        reload: vec![true, false],
        seeds: vec![1, 2, 3],
        hyperparams: Hyperparams {
            max_epochs: 10,
            ..Default::default()
        },
        layout: LayoutConfig::default(),
        profile: DeviceProfile::default(),
        step_time: Default::default(),
        jobs: None,
        out_dir,
    }
}

fn mean_accuracy(rows: &[RunRecord], keep: impl Fn(&RunRecord) -> bool) -> f64 {
    let v: Vec<f64> = rows.iter().filter(|r| !r.is_failed() && keep(r)).map(|r| r.accuracy).collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn accuracy_trend() -> Outcome {
    let Some(dir) = cifar_dir() else {
        return Err(format!("{BLOCKED} CIFAR-10 binary batches not found; set CHANPRUNE_CIFAR10_DIR"));
    };
    let out = tempfile::tempdir().unwrap();
    let rows = run_experiment(&trend_config(dir, out.path().to_path_buf())).map_err(|e| e.to_string())?;
    if let Some(f) = rows.iter().find(|r| r.is_failed()) {
        return Err(format!("run {} failed", f.run_id));
    }
    let base = mean_accuracy(&rows, |r| r.is_baseline());
    let mut notes = vec![format!("baseline {base:.3}")];
    let mut ok = true;
    for m in ["l1", "bn_gamma"] {
        let at = |ratio: f64, reload: bool| mean_accuracy(&rows, |r| r.method == m && r.ratio == ratio && r.reload == reload);
        let (r3, n3, r9, n9) = (at(0.3, true), at(0.3, false), at(0.9, true), at(0.9, false));
        let a = r3 >= base - 0.03;
        let b = r9 <= base - 0.10 && n9 <= base - 0.10;
        let c = r3 >= n3 - 0.01 && r9 >= n9 - 0.01;
        ok &= a && b && c;
        notes.push(format!(
            "{m}: 0.3 reload {r3:.3}/reinit {n3:.3}, 0.9 reload {r9:.3}/reinit {n9:.3} [a {a} b {b} c {c}]"
        ));
    }
    check(ok, notes.join("; "))
}

fn staircase() -> Outcome {
    let g = ModelGraph::preset(Preset::Cifar, 10, 6).unwrap();
    let layout = LayoutConfig::default();
    let mut bytes = Vec::new();
    let mut params = Vec::new();
    for c in (33..=64).rev() {
        let plan = PrunePlan {
            removals: BTreeMap::from([("conv1".to_string(), (0..64 - c).collect())]),
            source_graph_fingerprint: g.fingerprint(),
            warnings: vec![],
        };
        let p = apply_plan(&g, &plan, WeightPolicy::Reload).unwrap();
        bytes.push(padded_bytes(&p, &layout, 1).unwrap().total);
        params.push(p.param_count());
    }
    let mut distinct = bytes.clone();
    distinct.dedup();
    let runs_contiguous = {
        let mut d = distinct.clone();
        d.sort_unstable();
        d.dedup();
        d.len() == distinct.len()
    };
    let params_strict = params.windows(2).all(|w| w[1] < w[0]);
    check(
        distinct.len() == 4 && runs_contiguous && params_strict,
        format!(
            "conv1 64->33: {} distinct padded totals {:?}, params strictly decreasing: {params_strict}",
            distinct.len(),
            distinct
        ),
    )
}

fn step_time_trend() -> Outcome {
    let g = ModelGraph::preset(Preset::Tiny, 10, 7).unwrap();
    let batch = Hyperparams::default().batch_size;
    let layout = LayoutConfig::default();
    let profile = DeviceProfile::default();
    let mut measured = Vec::new();
    let mut estimated = Vec::new();
    for ratio in [0.0, 0.3, 0.6] {
        let p = apply_plan(&g, &ratio_plan(&g, ratio), WeightPolicy::Reload).unwrap();
        measured.push(measure_step_time(&p, batch, 5, 20).unwrap().median_ms);
        estimated.push(estimate_step_time(&p, &layout, &profile, batch).unwrap() * 1e3);
    }
    let m_ok = measured.windows(2).all(|w| w[1] <= 1.1 * w[0]);
    let e_ok = estimated.windows(2).all(|w| w[1] < w[0]);
    check(
        m_ok && e_ok,
        format!("measured median ms {measured:.2?} (10% margin), estimated ms {estimated:.4?}"),
    )
}

fn parameter_oracle() -> Outcome {
    // VGG-16 reference table: 3×3 convolutions, then three dense layers.
    let convs = [
        (3, 64), (64, 64), (64, 128), (128, 128), (128, 256), (256, 256), (256, 256),
        (256, 512), (512, 512), (512, 512), (512, 512), (512, 512), (512, 512),
    ];
    let dense = [(7 * 7 * 512, 4096), (4096, 4096), (4096, 1000)];
    let oracle: usize = convs.iter().map(|(i, o)| 9 * i * o + o).sum::<usize>()
        + dense.iter().map(|(i, o)| i * o + o).sum::<usize>();
    let g = without_batch_norm(&ModelGraph::preset(Preset::Imagenet, 1000, 0).unwrap());
    let got = g.param_count();
    check(
        got == 138_357_544 && oracle == 138_357_544,
        format!("param_count {got}, table oracle {oracle}, expected 138357544"),
    )
}

fn serialization() -> Outcome {
    for preset in [Preset::Tiny, Preset::Cifar, Preset::Imagenet] {
        let g = ModelGraph::preset(preset, 10, 9).unwrap();
        let bytes = io::to_bytes(&g);
        let back = io::from_bytes(&bytes).map_err(|e| format!("{preset}: {e}"))?;
        if back != g || io::to_bytes(&back) != bytes {
            return Err(format!("{preset}: round trip not bit-exact"));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for i in 0..20 {
        let preset = if i % 4 == 0 { Preset::Cifar } else { Preset::Tiny };
        let g = ModelGraph::preset(preset, 2 + i % 9, i as u64).unwrap();
        let method = if i % 2 == 0 { Method::L1 } else { Method::BnGamma };
        let scope = if i % 3 == 0 { Scope::Global } else { Scope::PerLayer };
        let plan = make_plan(&score(&g, method).unwrap(), rng.gen_range(0.0..0.95), scope).unwrap();
        let policy = if i % 2 == 0 { WeightPolicy::Reload } else { WeightPolicy::Reinit { seed: i as u64 } };
        let p = apply_plan(&g, &plan, policy).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.spmg");
        io::save(&p, &path).unwrap();
        if io::load(&path).unwrap() != p || std::fs::read(&path).unwrap() != io::to_bytes(&p) {
            return Err(format!("pruned variant {i} not bit-exact"));
        }
    }
    let good = io::to_bytes(&ModelGraph::preset(Preset::Tiny, 10, 9).unwrap());
    let header_len = u32::from_le_bytes(good[8..12].try_into().unwrap()) as u64;
    let blob_start = 12 + header_len;
    let corrupt = |f: &dyn Fn(&mut Vec<u8>)| {
        let mut b = good.clone();
        f(&mut b);
        match io::from_bytes(&b) {
            Err(Error::Format { offset, .. }) => Some(offset),
            _ => None,
        }
    };
    let cases = [
        ("bad magic", corrupt(&|b| b[0] = b'X'), Some(0)),
        ("bad version", corrupt(&|b| b[4] = 9), Some(4)),
        ("header length past end", corrupt(&|b| b[8..12].copy_from_slice(&u32::MAX.to_le_bytes())), Some(8)),
        ("header not JSON", corrupt(&|b| b[12] = b'#'), Some(12)),
        ("truncated blob", corrupt(&|b| b.truncate(b.len() - 3)), None),
    ];
    for (name, got, want) in &cases {
        let ok = match (name, got) {
            (&"truncated blob", Some(off)) => *off >= blob_start,
            _ => got == want,
        };
        if !ok {
            return Err(format!("{name}: got offset {got:?}, expected {want:?}"));
        }
    }
    Ok("3 presets and 20 pruned variants bit-exact; 5 corruption cases give format errors at the right offsets".into())
}

fn determinism() -> Outcome {
    let sweep = |dir: &std::path::Path| {
        let config = ExperimentConfig {
            dataset: DatasetKind::Synthetic,
            data_dir: None,
            class_subset: None,
            train_fraction: 1.0,
            synthetic: chanprune::harness::SyntheticConfig {
                train_samples: 512,
                test_samples: 128,
                classes: 2,
                seed: 3,
            },
            ratios: vec![0.0, 0.5],
            step_time: chanprune::harness::StepTimeConfig {
                warmup: 1,
                reps: 5,
                batch: Some(16),
            },
            hyperparams: Hyperparams {
                max_epochs: 2,
                batch_size: 64,
                ..Default::default()
            },
            ..trend_config(PathBuf::new(), dir.to_path_buf())
        };
        let config = ExperimentConfig { seeds: vec![1, 2], ..config };
        run_experiment(&config).unwrap();
        let cols = |file: &str| -> Vec<(String, u64, u64)> {
            read_csv(dir.join(file))
                .unwrap()
                .into_iter()
                .map(|r| (r.run_id, r.accuracy.to_bits(), r.loss.to_bits()))
                .collect()
        };
        (cols(RESULTS_CSV), cols(EPOCHS_CSV))
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (first, second) = (sweep(a.path()), sweep(b.path()));
    check(
        first == second,
        format!(
            "{} result rows and {} epoch rows, accuracy and loss columns identical: {}",
            first.0.len(),
            first.1.len(),
            first == second
        ),
    )
}

fn main() {
    let criteria: [(u32, &str, fn() -> Outcome); 10] = [
        (1, "identity pruning", identity_pruning),
        (2, "zero-channel exactness", zero_channel_exactness),
        (3, "gradient correctness", gradient_correctness),
        (4, "plan oracle equivalence", plan_oracle_equivalence),
        (5, "accuracy vs pruned ratio trend", accuracy_trend),
        (6, "padded memory staircase", staircase),
        (7, "step time trend", step_time_trend),
        (8, "parameter-count oracle", parameter_oracle),
        (9, "serialization", serialization),
        (10, "sweep determinism", determinism),
    ];
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let strict = std::env::var("CHANPRUNE_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let mut failed = 0;
    let mut blocked = 0;
    for (n, name, f) in criteria {
        if !wanted.is_empty() && !wanted.contains(&n) {
            continue;
        }
        let t0 = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = t0.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {n:>2} {name}: PASS ({detail}) [{secs:.1}s]"),
            Err(detail) => {
                if detail.starts_with(BLOCKED) {
                    blocked += 1;
                } else {
                    failed += 1;
                }
                println!("criterion {n:>2} {name}: FAIL ({detail}) [{secs:.1}s]");
            }
        }
    }
    if blocked > 0 {
        println!("{blocked} criteria failed for lack of input data");
    }
    if failed > 0 {
        println!("{failed} criteria failed");
    }
    if failed > 0 || (strict && blocked > 0) {
        std::process::exit(1);
    }
}
