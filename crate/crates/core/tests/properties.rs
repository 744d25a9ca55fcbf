use chanprune::costmodel::{padded_dim, padded_bytes, LayoutConfig};
use chanprune::data::synth_dataset;
use chanprune::engine::{train, Hyperparams};
use chanprune::importance::{make_plan, ImportanceReport};
use chanprune::surgery::apply_plan;
use chanprune::{io, Method, ModelGraph, Preset, PrunePlan, Scope, WeightPolicy};
use indexmap::IndexMap;
use proptest::prelude::*;

const TINY_WIDTHS: [usize; 3] = [16, 32, 64];

fn tiny() -> ModelGraph {
    ModelGraph::preset(Preset::Tiny, 10, 5).unwrap()
}

/// Removal masks for the three tiny convolutions, each keeping at least one
/// channel.
fn tiny_masks() -> impl Strategy<Value = Vec<Vec<bool>>> {
    TINY_WIDTHS
        .iter()
        .map(|&w| proptest::collection::vec(any::<bool>(), w))
        .collect::<Vec<_>>()
        .prop_map(|mut masks| {
            for m in &mut masks {
                if m.iter().all(|&r| r) {
                    m[0] = false;
                }
            }
            masks
        })
}

fn plan_from_masks(g: &ModelGraph, masks: &[Vec<bool>]) -> PrunePlan {
    let removals = masks
        .iter()
        .enumerate()
        .filter_map(|(i, m)| {
            let idx: Vec<usize> = m.iter().enumerate().filter(|(_, &r)| r).map(|(c, _)| c).collect();
            (!idx.is_empty()).then(|| (format!("conv{}", i + 1), idx))
        })
        .collect();
    PrunePlan {
        removals,
        source_graph_fingerprint: g.fingerprint(),
        warnings: vec![],
    }
}

/// Closed-form parameter count of the tiny chain with the given widths.
fn tiny_params(w: [usize; 3], classes: usize) -> usize {
    let [a, b, c] = w;
    (27 * a + a) + 4 * a + (9 * a * b + b) + 4 * b + (9 * b * c + c) + 4 * c + (16 * c * classes + classes)
}

fn report_strategy() -> impl Strategy<Value = (ImportanceReport, f64)> {
    (
        proptest::collection::vec(proptest::collection::vec(0u8..6, 1..12), 1..6),
        0.0f64..0.999,
    )
        .prop_map(|(layers, ratio)| {
            let scores: IndexMap<String, Vec<f64>> = layers
                .into_iter()
                .enumerate()
                .map(|(i, s)| (format!("conv{}", i + 1), s.into_iter().map(|v| v as f64 * 0.5).collect()))
                .collect();
            let report = ImportanceReport {
                method: Method::L1,
                scores,
                graph_fingerprint: "x".into(),
            };
            (report, ratio)
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn per_layer_plans_drop_the_lowest_scores((report, ratio) in report_strategy()) {
        let plan = make_plan(&report, ratio, Scope::PerLayer).unwrap();
        for (id, scores) in &report.scores {
            let removed = plan.removals.get(id).cloned().unwrap_or_default();
            prop_assert_eq!(removed.len(), (ratio * scores.len() as f64 + 1e-9).floor() as usize);
            let worst_removed = removed.iter().map(|&c| scores[c]).fold(f64::NEG_INFINITY, f64::max);
            for (c, &s) in scores.iter().enumerate() {
                if !removed.contains(&c) {
                    prop_assert!(s >= worst_removed);
                }
            }
        }
    }

    #[test]
    fn global_plans_respect_target_and_survivors((report, ratio) in report_strategy()) {
        let plan = make_plan(&report, ratio, Scope::Global).unwrap();
        let total = report.total_channels();
        let target = (ratio * total as f64 + 1e-9).floor() as usize;
        let capacity: usize = report.scores.values().map(|s| s.len() - 1).sum();
        prop_assert_eq!(plan.removed_channels(), target.min(capacity));
        for (id, scores) in &report.scores {
            let removed = plan.removals.get(id).map_or(0, Vec::len);
            prop_assert!(removed < scores.len(), "{} emptied", id);
        }
        if target > capacity {
            prop_assert!(!plan.warnings.is_empty());
        }
    }

    #[test]
    fn surgery_param_count_matches_recount(masks in tiny_masks()) {
        let g = tiny();
        let pruned = apply_plan(&g, &plan_from_masks(&g, &masks), WeightPolicy::Reload).unwrap();
        let widths: Vec<usize> = masks.iter().map(|m| m.iter().filter(|&&r| !r).count()).collect();
        prop_assert_eq!(pruned.param_count(), tiny_params([widths[0], widths[1], widths[2]], 10));
    }

    #[test]
    fn pruning_composes(first in tiny_masks(), second_seed in any::<u64>()) {
        let g = tiny();
        let once = apply_plan(&g, &plan_from_masks(&g, &first), WeightPolicy::Reload).unwrap();
        // Second plan over the survivors, derived deterministically from the seed.
        let survivors: Vec<Vec<usize>> = first
            .iter()
            .map(|m| m.iter().enumerate().filter(|(_, &r)| !r).map(|(c, _)| c).collect())
            .collect();
        let second: Vec<Vec<bool>> = survivors
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let mut m: Vec<bool> = (0..s.len()).map(|j| (second_seed >> ((i * 7 + j) % 64)) & 1 == 1).collect();
                if m.iter().all(|&r| r) {
                    m[0] = false;
                }
                m
            })
            .collect();
        let twice = apply_plan(&once, &plan_from_masks(&once, &second), WeightPolicy::Reload).unwrap();

        let mut combined: Vec<Vec<bool>> = first.clone();
        for (i, m) in second.iter().enumerate() {
            for (j, &r) in m.iter().enumerate() {
                if r {
                    combined[i][survivors[i][j]] = true;
                }
            }
        }
        let direct = apply_plan(&g, &plan_from_masks(&g, &combined), WeightPolicy::Reload).unwrap();
        prop_assert!(twice == direct);
    }

    #[test]
    fn pruned_models_round_trip(masks in tiny_masks(), reinit in any::<bool>()) {
        let g = tiny();
        let policy = if reinit { WeightPolicy::Reinit { seed: 3 } } else { WeightPolicy::Reload };
        let pruned = apply_plan(&g, &plan_from_masks(&g, &masks), policy).unwrap();
        let bytes = io::to_bytes(&pruned);
        let back = io::from_bytes(&bytes).unwrap();
        prop_assert!(back == pruned);
        prop_assert_eq!(io::to_bytes(&back), bytes);
    }

    #[test]
    fn padded_dim_is_the_next_multiple(n in 1usize..10_000, m in 1usize..300) {
        let p = padded_dim(n, m).unwrap();
        prop_assert!(p >= n && p < n + m && p % m == 0);
    }

    #[test]
    fn padded_bytes_are_a_staircase(c in 1usize..=16) {
        // conv2's input dimension is padded to a multiple of 8, so every
        // width within one block of eight costs the same weight bytes.
        let layout = LayoutConfig::default();
        let g = tiny();
        let keep = |n: usize| {
            let mut masks: Vec<Vec<bool>> = TINY_WIDTHS.iter().map(|&w| vec![false; w]).collect();
            for r in masks[0].iter_mut().skip(n) {
                *r = true;
            }
            let p = apply_plan(&g, &plan_from_masks(&g, &masks), WeightPolicy::Reload).unwrap();
            padded_bytes(&p, &layout, 1).unwrap().weight_bytes
        };
        let block_top = c.div_ceil(8) * 8;
        prop_assert_eq!(keep(c), keep(block_top));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn pruned_models_train(masks in tiny_masks(), preset_cifar in any::<bool>(), ratio in 0.0f64..0.95) {
        let (g, plan) = if preset_cifar {
            let g = ModelGraph::preset(Preset::Cifar, 3, 1).unwrap();
            let plan = make_plan(&chanprune::importance::score_l1(&g), ratio, Scope::Global).unwrap();
            (g, plan)
        } else {
            let g = ModelGraph::preset(Preset::Tiny, 3, 1).unwrap();
            let plan = plan_from_masks(&g, &masks);
            (g, plan)
        };
        let pruned = apply_plan(&g, &plan, WeightPolicy::Reload).unwrap();
        let data = synth_dataset(1, 4, 3, pruned.input_shape).unwrap();
        let hp = Hyperparams { batch_size: 2, max_epochs: 1, ..Default::default() };
        let (trained, log) = train(&pruned, &data, &data, &hp).unwrap();
        prop_assert_eq!(log.epochs.len(), 1);
        prop_assert_eq!(trained.param_count(), pruned.param_count());
    }
}

#[test]
fn training_is_bitwise_deterministic() {
    let g = ModelGraph::preset(Preset::Tiny, 2, 4).unwrap();
    let data = synth_dataset(2, 64, 2, g.input_shape).unwrap();
    let hp = Hyperparams {
        batch_size: 16,
        max_epochs: 2,
        seed: 9,
        ..Default::default()
    };
    let (a, log_a) = train(&g, &data, &data, &hp).unwrap();
    let (b, log_b) = train(&g, &data, &data, &hp).unwrap();
    let losses = |l: &chanprune::engine::TrainLog| l.epochs.iter().map(|e| e.train_loss.to_bits()).collect::<Vec<_>>();
    assert_eq!(losses(&log_a), losses(&log_b));
    assert_eq!(io::to_bytes(&a), io::to_bytes(&b));
}

#[test]
fn fresh_tiny_model_is_near_chance() {
    let g = ModelGraph::preset(Preset::Tiny, 10, 8).unwrap();
    let data = synth_dataset(8, 1000, 10, g.input_shape).unwrap();
    let acc = chanprune::engine::evaluate(&g, &data).unwrap();
    assert!((0.0..=0.25).contains(&acc), "accuracy {acc}");
}

#[test]
fn recount_helper_matches_unpruned_preset() {
    assert_eq!(tiny().param_count(), tiny_params(TINY_WIDTHS, 10));
}
