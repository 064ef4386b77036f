mod common;

use common::checks;
use gnmf::factormer::{n_factormer, project_nonneg, ModelConfig, ModelKind, ModelParams, NFactormerParams};
use gnmf::tape::Tape;
use gnmf::DenseMatrix;
use proptest::prelude::*;

#[test]
fn factorized_layer_matches_explicit_edge_oracle() {
    for seed in 0..10 {
        let case = checks::layer_case(seed);
        for last in [false, true] {
            let (out, attention) = checks::run_layer(&case, &case.src, &case.tgt, &case.edges, last);
            let (expect, expect_attn) = common::explicit_factormer(
                &common::to_vecs(&case.src),
                &common::to_vecs(&case.tgt),
                &common::to_vecs(&case.edges),
                &case.params,
                &case.cfg,
                0,
                last,
            );
            let diff = out.max_abs_diff(&common::from_vecs(&expect));
            assert!(diff < 1e-10, "seed {seed} last {last}: output diff {diff:e}");
            for (a, e) in attention.iter().zip(&expect_attn) {
                assert!(a.max_abs_diff(&common::from_vecs(e)) < 1e-12);
            }
        }
    }
}

#[test]
fn attention_columns_are_distributions() {
    for seed in 0..20 {
        let err = checks::attention_sum_error(seed);
        assert!(err <= 1e-12, "seed {seed}: {err:e}");
    }
}

#[test]
fn source_permutation_invariance() {
    for seed in 0..20 {
        let err = checks::source_permutation_error(seed);
        assert!(err <= 1e-10, "seed {seed}: {err:e}");
    }
}

#[test]
fn target_permutation_equivariance() {
    for seed in 0..20 {
        let err = checks::target_permutation_error(seed);
        assert!(err <= 1e-10, "seed {seed}: {err:e}");
    }
}

#[test]
fn n_factormer_permutation_equivariance() {
    for seed in 0..20 {
        let err = checks::n_factormer_equivariance_error(seed);
        assert!(err <= 1e-10, "seed {seed}: {err:e}");
    }
}

#[test]
fn zero_parameters_reduce_to_layer_norm_of_targets() {
    let cfg = checks::small_config();
    let mut case = checks::layer_case(4);
    case.params = ModelParams::zeros(&cfg, ModelKind::Init).unwrap();
    let (out, _) = checks::run_layer(&case, &case.src, &case.tgt, &case.edges, true);
    for j in 0..case.tgt.rows() {
        let x = case.tgt.row(j);
        let d = x.len() as f64;
        let mu = x.iter().sum::<f64>() / d;
        let var = x.iter().map(|t| (t - mu).powi(2)).sum::<f64>() / d;
        for (k, t) in x.iter().enumerate() {
            let expect = (t - mu) / (var + 1e-5).sqrt();
            assert!((out.get(j, k) - expect).abs() < 1e-12);
        }
    }
}

#[test]
fn zero_blocks_is_embed_then_extract() {
    let cfg = ModelConfig {
        blocks: 0,
        ..checks::small_config()
    };
    let params = ModelParams::init(&cfg, ModelKind::Init, 2).unwrap();
    let mut rng = common::rng(8);
    let w = common::uniform(&mut rng, 4, 2, 0.0, 1.0);
    let h = common::uniform(&mut rng, 3, 2, 0.0, 1.0);
    let v = common::uniform(&mut rng, 4, 3, 0.0, 1.0);
    let mut tape = Tape::inference();
    let p = NFactormerParams::bind_constant(&mut tape, &params, &cfg);
    let (wv, hv, vv) = (tape.constant(w.clone()), tape.constant(h.clone()), tape.constant(v));
    let (wo, ho) = n_factormer(&mut tape, wv, hv, vv, &p, &cfg).unwrap();
    let affine = |x: &DenseMatrix| {
        let ew = common::to_vecs(params.get("embed.weight").unwrap());
        let eb = params.get("embed.bias").unwrap().row(0).to_vec();
        let xw = common::to_vecs(params.get("extract.weight").unwrap());
        let xb = params.get("extract.bias").unwrap().row(0).to_vec();
        let rows: Vec<Vec<f64>> = common::to_vecs(x)
            .iter()
            .map(|row| {
                let hidden: Vec<f64> = (0..eb.len())
                    .map(|c| eb[c] + row.iter().zip(&ew).map(|(a, wr)| a * wr[c]).sum::<f64>())
                    .collect();
                (0..xb.len())
                    .map(|c| xb[c] + hidden.iter().zip(&xw).map(|(a, wr)| a * wr[c]).sum::<f64>())
                    .collect()
            })
            .collect();
        common::from_vecs(&rows)
    };
    assert!(tape.value(wo).max_abs_diff(&affine(&w)) < 1e-12);
    assert!(tape.value(ho).max_abs_diff(&affine(&h)) < 1e-12);
}

#[test]
fn gradient_checks_pass_at_stated_tolerances() {
    let results = gnmf::gradcheck::run_suite(0).unwrap();
    assert_eq!(results.len(), 3);
    for r in &results {
        assert!(r.passes(1e-5), "{}: {:e}", r.component, r.max_rel_error);
    }
}

proptest! {
    #[test]
    fn projection_matches_clamp(values in prop::collection::vec(-5.0f64..5.0, 1..40)) {
        let m = DenseMatrix::new(1, values.len(), values.clone()).unwrap();
        let mut tape = Tape::inference();
        let x = tape.constant(m);
        let y = project_nonneg(&mut tape, x).unwrap();
        for (k, v) in values.iter().enumerate() {
            let expect = if *v > 0.0 { *v } else { 0.0 };
            prop_assert_eq!(tape.value(y).get(0, k), expect);
        }
    }
}
