//! Randomised invariants across modules.

use mmtoc::channel::power_normalize;
use mmtoc::data::{generate_synthetic, load_dir, oracle_mi, write_dir, Modality, SyntheticSpec};
use mmtoc::eval::metrics;
use mmtoc::numerics::{finite_diff_grad, relative_error, Graph, NodeId, PrimitiveArgs, PrimitiveKind, Rng, Tensor};
use mmtoc::redundancy::{derangement, diagnostics_from_scores, TWO_LN2};
use mmtoc::vib::{kl_to_standard_normal, GaussianLatent, TaskPrediction};
use proptest::prelude::*;

/// Inputs and extra arguments for one primitive on a `[rows, cols]` operand.
fn primitive_case(kind: PrimitiveKind, rows: usize, cols: usize, rng: &mut Rng) -> (Vec<Tensor>, PrimitiveArgs) {
    let mut draw = |r: usize, c: usize| Tensor::matrix(r, c, rng.normals(r * c)).unwrap();
    match kind {
        PrimitiveKind::MatMul => (vec![draw(rows, cols), draw(cols, rows)], PrimitiveArgs::None),
        PrimitiveKind::Add | PrimitiveKind::Multiply => (vec![draw(rows, cols), draw(rows, cols)], PrimitiveArgs::None),
        PrimitiveKind::Concat => (vec![draw(rows, cols), draw(rows, cols)], PrimitiveArgs::Axis(Some(1))),
        PrimitiveKind::Logarithm => {
            let t = draw(rows, cols);
            let pos = t.values().iter().map(|v| v.exp()).collect();
            (vec![Tensor::matrix(rows, cols, pos).unwrap()], PrimitiveArgs::None)
        }
        PrimitiveKind::Relu => {
            // keep clear of the kink
            let t = draw(rows, cols);
            let v = t.values().iter().map(|v| v + 0.2 * v.signum()).collect();
            (vec![Tensor::matrix(rows, cols, v).unwrap()], PrimitiveArgs::None)
        }
        PrimitiveKind::ReduceSum | PrimitiveKind::ReduceMean => (vec![draw(rows, cols)], PrimitiveArgs::Axis(Some(0))),
        PrimitiveKind::Broadcast => (vec![draw(1, cols)], PrimitiveArgs::Shape(vec![rows, cols])),
        PrimitiveKind::Slice => (
            vec![draw(rows, cols + 1)],
            PrimitiveArgs::Range {
                axis: 1,
                start: 1,
                end: cols + 1,
            },
        ),
        PrimitiveKind::Grl => (vec![draw(rows, cols)], PrimitiveArgs::Alpha(0.7)),
        _ => (vec![draw(rows, cols)], PrimitiveArgs::None),
    }
}

/// `Σ w ⊙ op(inputs)` with fixed random weights, plus gradients w.r.t. all
/// inputs flattened.
fn weighted_output(kind: PrimitiveKind, inputs: &[Tensor], args: &PrimitiveArgs, seed: u64) -> (f64, Vec<f64>) {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.input(t.clone()).unwrap()).collect();
    let out = g.build_primitive(kind, &ids, args.clone()).unwrap();
    let shape = g.shape(out).to_vec();
    let n: usize = shape.iter().product();
    let w = g.input(Tensor::new(shape, Rng::new(seed).normals(n)).unwrap()).unwrap();
    let prod = g.multiply(out, w).unwrap();
    let loss = g.sum(prod).unwrap();
    let grads = g.backward(loss).unwrap();
    let flat = ids.iter().flat_map(|&i| grads.wrt(&g, i)).collect();
    (g.scalar(loss), flat)
}

fn unflatten(like: &[Tensor], flat: &[f64]) -> Vec<Tensor> {
    let mut off = 0;
    like.iter()
        .map(|t| {
            let n = t.len();
            off += n;
            Tensor::new(t.shape().to_vec(), flat[off - n..off].to_vec()).unwrap()
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn primitive_gradients_match_finite_differences(rows in 1usize..=4, cols in 1usize..=4, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        for kind in PrimitiveKind::ALL {
            let (inputs, args) = primitive_case(kind, rows, cols, &mut rng);
            let (_, analytic) = weighted_output(kind, &inputs, &args, seed ^ 1);
            let point: Vec<f64> = inputs.iter().flat_map(|t| t.values().to_vec()).collect();
            let mut numeric = finite_diff_grad(
                |x| weighted_output(kind, &unflatten(&inputs, x), &args, seed ^ 1).0,
                &point,
                1e-6,
            );
            if kind == PrimitiveKind::Grl {
                // forward is the identity; the backward pass reverses and scales
                numeric.iter_mut().for_each(|v| *v *= -0.7);
            }
            let err = relative_error(&analytic, &numeric, 1e-8);
            prop_assert!(err < 1e-4, "{kind:?} rows {rows} cols {cols}: {err:e}");
        }
    }

    #[test]
    fn graph_evaluation_is_bit_deterministic(rows in 1usize..=4, cols in 1usize..=4, seed in any::<u64>()) {
        let run = || {
            let mut rng = Rng::new(seed);
            let (inputs, args) = primitive_case(PrimitiveKind::MatMul, rows, cols, &mut rng);
            weighted_output(PrimitiveKind::MatMul, &inputs, &args, seed)
        };
        let (a, ga) = run();
        let (b, gb) = run();
        prop_assert_eq!(a.to_bits(), b.to_bits());
        prop_assert_eq!(ga, gb);
    }

    #[test]
    fn kl_is_non_negative(
        params in prop::collection::vec((-3.0f64..3.0, 0.05f64..5.0), 1..8),
    ) {
        let (mean, std): (Vec<f64>, Vec<f64>) = params.into_iter().unzip();
        let kl = kl_to_standard_normal(&GaussianLatent::new(mean, std).unwrap());
        prop_assert!(kl >= 0.0);
    }

    #[test]
    fn kl_vanishes_only_at_standard_normal(dim in 1usize..8, k in 0usize..8, bump in 0.01f64..1.0) {
        let at_prior = GaussianLatent::new(vec![0.0; dim], vec![1.0; dim]).unwrap();
        prop_assert!(kl_to_standard_normal(&at_prior).abs() < 1e-9);
        let mut mean = vec![0.0; dim];
        mean[k % dim] = bump;
        let moved = GaussianLatent::new(mean, vec![1.0; dim]).unwrap();
        prop_assert!(kl_to_standard_normal(&moved) > 1e-9);
    }

    #[test]
    fn bce_plus_objective_is_two_ln2(
        pos in prop::collection::vec(-40.0f64..40.0, 1..64),
        neg in prop::collection::vec(-40.0f64..40.0, 1..64),
    ) {
        let d = diagnostics_from_scores(&pos, &neg);
        prop_assert!((d.j + d.bce - TWO_LN2).abs() <= 1e-12);
    }

    #[test]
    fn derangements_have_no_fixed_points(n in 2usize..40, seed in any::<u64>()) {
        let p = derangement(n, &mut Rng::new(seed)).unwrap();
        let mut sorted = p.clone();
        sorted.sort_unstable();
        prop_assert_eq!(sorted, (0..n).collect::<Vec<_>>());
        prop_assert!(p.iter().enumerate().all(|(i, &j)| i != j));
    }

    #[test]
    fn power_normalisation_gives_unit_power(z in prop::collection::vec(-50.0f64..50.0, 1..64)) {
        prop_assume!(z.iter().any(|v| v.abs() > 1e-6));
        let out = power_normalize(&z).unwrap();
        let p = out.iter().map(|v| v * v).sum::<f64>() / out.len() as f64;
        prop_assert!((p - 1.0).abs() < 1e-12);
    }

    #[test]
    fn confident_predictions_agree_on_sign(labels in prop::collection::vec(0usize..7, 1..50)) {
        // zero-score class excluded
        let labels: Vec<usize> = labels.into_iter().filter(|&c| c != 3).collect();
        prop_assume!(!labels.is_empty());
        let preds: Vec<TaskPrediction> = labels
            .iter()
            .map(|&c| {
                let mut logits = vec![0.0; 7];
                // predicted class also avoids the zero-score boundary
                let k = [0, 1, 2, 4, 5, 6][(c + 2) % 6];
                logits[k] = 60.0;
                TaskPrediction::new(logits).unwrap()
            })
            .collect();
        let scores: Vec<f64> = labels.iter().map(|&c| c as f64 - 3.0).collect();
        let by_sign = metrics(&preds, &scores).unwrap().top2;
        let by_argmax = preds
            .iter()
            .zip(&scores)
            .filter(|(p, s)| (p.argmax_class() as f64 - 3.0 >= 0.0) == (**s >= 0.0))
            .count() as f64
            / scores.len() as f64;
        prop_assert!((by_sign - by_argmax).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn synthetic_data_is_a_pure_function_of_spec(seed in any::<u64>(), rho in 0.0f64..1.0) {
        let spec = SyntheticSpec { n_samples: 200, rho, seed, ..SyntheticSpec::default() };
        let a = generate_synthetic(&spec).unwrap();
        let b = generate_synthetic(&spec).unwrap();
        prop_assert_eq!(a.scores(), b.scores());
        for m in Modality::ALL {
            prop_assert_eq!(a.features(m), b.features(m));
        }
    }

    #[test]
    fn feature_files_round_trip_exactly(seed in any::<u64>()) {
        let spec = SyntheticSpec { n_samples: 120, dims: [3, 5, 2], seed, ..SyntheticSpec::default() };
        let ds = generate_synthetic(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dir(dir.path(), &ds).unwrap();
        let back = load_dir(dir.path()).unwrap();
        prop_assert_eq!(back.len(), ds.len());
        // files are grouped by split, so compare split by split
        for split in mmtoc::data::Split::ALL {
            let (x, y) = (ds.split(split), back.split(split));
            prop_assert_eq!(x.scores(), y.scores());
            for m in Modality::ALL {
                prop_assert_eq!(x.features(m), y.features(m));
            }
        }
    }
}

#[test]
fn raw_modality_mi_increases_with_redundancy() {
    let mut curve = Vec::new();
    for rho in [0.0, 0.4, 0.8] {
        let mut total = 0.0;
        for seed in 0..3 {
            let spec = SyntheticSpec {
                rho,
                seed,
                ..SyntheticSpec::default()
            };
            let ds = generate_synthetic(&spec).unwrap();
            total += oracle_mi(&ds.modality_matrix(Modality::Image), &ds.modality_matrix(Modality::Text)).unwrap();
        }
        curve.push(total / 3.0);
    }
    assert!(curve[0] < curve[1] && curve[1] < curve[2], "{curve:?}");
}
