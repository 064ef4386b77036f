//! Property measurements shared by the module tests and the acceptance
//! suite. Each returns the worst deviation observed for one seed.

use gnmf::admm::{ao_admm, loss_frob, nndsvd_init, nnls_admm, AdmmState, SolverConfig};
use gnmf::factormer::{
    factormer_with_attention, n_factormer, ModelConfig, ModelKind, ModelParams, NFactormerParams,
};
use gnmf::models::learned_accel;
use gnmf::tape::Tape;
use gnmf::DenseMatrix;
use rand::seq::SliceRandom;
use rand::Rng;

pub fn small_config() -> ModelConfig {
    ModelConfig {
        rank: 2,
        hidden: 8,
        heads: 2,
        blocks: 1,
        ..Default::default()
    }
}

pub struct LayerCase {
    pub cfg: ModelConfig,
    pub params: ModelParams,
    pub src: DenseMatrix,
    pub tgt: DenseMatrix,
    pub edges: DenseMatrix,
}

pub fn layer_case(seed: u64) -> LayerCase {
    let cfg = small_config();
    let params = ModelParams::init(&cfg, ModelKind::Init, seed).unwrap();
    let mut rng = super::rng(seed ^ 0xA5A5);
    let (m, n) = (rng.random_range(2..7), rng.random_range(2..7));
    LayerCase {
        src: super::uniform(&mut rng, m, cfg.hidden, -1.0, 1.0),
        tgt: super::uniform(&mut rng, n, cfg.hidden, -1.0, 1.0),
        edges: super::uniform(&mut rng, m, n, 0.0, 2.0),
        cfg,
        params,
    }
}

/// Runs layer 0 and returns the output and per-head attention.
pub fn run_layer(
    case: &LayerCase,
    src: &DenseMatrix,
    tgt: &DenseMatrix,
    edges: &DenseMatrix,
    last: bool,
) -> (DenseMatrix, Vec<DenseMatrix>) {
    let mut tape = Tape::inference();
    let p = NFactormerParams::bind_constant(&mut tape, &case.params, &case.cfg);
    let (s, t, e) = (tape.constant(src.clone()), tape.constant(tgt.clone()), tape.constant(edges.clone()));
    let out = factormer_with_attention(&mut tape, s, t, e, &p.layers[0], &case.cfg, last).unwrap();
    let attention = out.attention.iter().map(|&a| tape.value(a).clone()).collect();
    (tape.value(out.out).clone(), attention)
}

fn permutation(rng: &mut impl Rng, len: usize) -> Vec<usize> {
    let mut p: Vec<usize> = (0..len).collect();
    p.shuffle(rng);
    p
}

/// Worst `|Σ_i α_ij − 1|` over targets and heads.
pub fn attention_sum_error(seed: u64) -> f64 {
    let case = layer_case(seed);
    let (_, attention) = run_layer(&case, &case.src, &case.tgt, &case.edges, false);
    let mut worst = 0.0f64;
    for a in &attention {
        for j in 0..a.cols() {
            let s: f64 = (0..a.rows()).map(|i| a.get(i, j)).sum();
            worst = worst.max((s - 1.0).abs());
        }
    }
    worst
}

/// Permuting sources (rows of `src` and `edges`) must leave targets unchanged.
pub fn source_permutation_error(seed: u64) -> f64 {
    let case = layer_case(seed);
    let perm = permutation(&mut super::rng(seed ^ 0x5151), case.src.rows());
    let (base, _) = run_layer(&case, &case.src, &case.tgt, &case.edges, false);
    let (moved, _) = run_layer(&case, &case.src.permute_rows(&perm), &case.tgt, &case.edges.permute_rows(&perm), false);
    base.max_abs_diff(&moved)
}

/// Permuting targets (rows of `tgt`, columns of `edges`) permutes the output rows.
pub fn target_permutation_error(seed: u64) -> f64 {
    let case = layer_case(seed);
    let perm = permutation(&mut super::rng(seed ^ 0x7373), case.tgt.rows());
    let (base, _) = run_layer(&case, &case.src, &case.tgt, &case.edges, false);
    let (moved, _) = run_layer(&case, &case.src, &case.tgt.permute_rows(&perm), &case.edges.permute_cols(&perm), false);
    base.permute_rows(&perm).max_abs_diff(&moved)
}

fn run_n_factormer(cfg: &ModelConfig, params: &ModelParams, w: &DenseMatrix, h: &DenseMatrix, v: &DenseMatrix) -> (DenseMatrix, DenseMatrix) {
    let mut tape = Tape::inference();
    let p = NFactormerParams::bind_constant(&mut tape, params, cfg);
    let (wv, hv, vv) = (tape.constant(w.clone()), tape.constant(h.clone()), tape.constant(v.clone()));
    let (wo, ho) = n_factormer(&mut tape, wv, hv, vv, &p, cfg).unwrap();
    (tape.value(wo).clone(), tape.value(ho).clone())
}

/// Jointly permuting rows of `W`/`V` and rows of `H`/columns of `V`
/// permutes the N-Factormer outputs the same way.
pub fn n_factormer_equivariance_error(seed: u64) -> f64 {
    let cfg = small_config();
    let params = ModelParams::init(&cfg, ModelKind::Init, seed).unwrap();
    let mut rng = super::rng(seed ^ 0x9999);
    let (m, n) = (rng.random_range(2..7), rng.random_range(2..7));
    let v = super::uniform(&mut rng, m, n, 0.0, 2.0);
    let w = super::uniform(&mut rng, m, cfg.rank, 0.0, 1.0);
    let h = super::uniform(&mut rng, n, cfg.rank, 0.0, 1.0);
    let (pm, pn) = (permutation(&mut rng, m), permutation(&mut rng, n));
    let (w0, h0) = run_n_factormer(&cfg, &params, &w, &h, &v);
    let (w1, h1) = run_n_factormer(&cfg, &params, &w.permute_rows(&pm), &h.permute_rows(&pn), &v.permute_rows(&pm).permute_cols(&pn));
    w0.permute_rows(&pm).max_abs_diff(&w1).max(h0.permute_rows(&pn).max_abs_diff(&h1))
}

/// Relative objective gap between 2000 ADMM iterations from a zero start
/// and projected gradient descent on instance `seed`.
pub fn admm_vs_projected_gradient(seed: u64) -> f64 {
    let (w, v) = super::nnls_instance(seed);
    let (n, r) = (v.cols(), w.cols());
    let cfg = SolverConfig {
        rho: 1.0,
        inner_iters: 2000,
        outer_iters: 1,
    };
    let state = AdmmState::warm(&w, &DenseMatrix::zeros(n, r), 1.0).unwrap();
    let s = nnls_admm(&w, &v, state, &cfg).unwrap();
    let admm_obj = loss_frob(&w, &s.h_aux, &v);
    let (wv, vv) = (super::to_vecs(&w), super::to_vecs(&v));
    let h_pg = super::nnls_projected_gradient(&wv, &vv, 20000);
    let pg_obj = super::half_sq_residual(&wv, &h_pg, &vv);
    (admm_obj - pg_obj).abs() / pg_obj.abs().max(1e-12)
}

/// Relative transposition asymmetry `|ℓ(W,H,V) − ℓ(H,W,Vᵀ)| / |ℓ|`.
pub fn transposition_asymmetry(seed: u64) -> f64 {
    let mut rng = super::rng(seed);
    let (m, n, r) = (rng.random_range(1..9), rng.random_range(1..9), rng.random_range(1..4));
    let w = super::uniform(&mut rng, m, r, 0.0, 2.0);
    let h = super::uniform(&mut rng, n, r, 0.0, 2.0);
    let v = super::uniform(&mut rng, m, n, 0.0, 2.0);
    let a = loss_frob(&w, &h, &v);
    let b = loss_frob(&h, &w, &v.transpose());
    (a - b).abs() / a.abs().max(1e-300)
}

/// Worst iterate difference between `learned_accel` with `nbr_acc = 0` and
/// plain AO-ADMM from the same NNDSVD start.
pub fn bypass_error(seed: u64) -> f64 {
    let mut rng = super::rng(seed);
    let (m, n) = (rng.random_range(6..14), rng.random_range(6..14));
    let v = super::uniform(&mut rng, m, n, 0.0, 2.0);
    let cfg = ModelConfig {
        rank: 3,
        hidden: 8,
        heads: 2,
        blocks: 1,
        outer_iters: 5,
        ..Default::default()
    };
    let params = ModelParams::init(&cfg, ModelKind::Accel, seed).unwrap();
    let (w0, h0) = nndsvd_init(&v, 3).unwrap();
    let accel = learned_accel(&w0, &h0, &v, &params, &cfg, 0).unwrap();
    let solver = SolverConfig {
        rho: cfg.rho,
        inner_iters: cfg.inner_iters,
        outer_iters: cfg.outer_iters,
    };
    let base = ao_admm(&v, &w0, &h0, &solver).unwrap();
    assert_eq!(accel.len(), base.len());
    accel
        .iterates
        .iter()
        .zip(&base.iterates)
        .map(|((wa, ha), (wb, hb))| wa.max_abs_diff(wb).max(ha.max_abs_diff(hb)))
        .fold(0.0, f64::max)
}

/// `count` values mixing ordinary, tiny, huge, signed-zero and subnormal
/// doubles.
pub fn awkward_values(seed: u64, count: usize) -> Vec<f64> {
    let mut rng = super::rng(seed);
    (0..count)
        .map(|k| match k % 6 {
            0 => f64::from_bits(rng.random_range(1..(1u64 << 52))),
            1 => -f64::from_bits(rng.random_range(1..(1u64 << 52))),
            2 => rng.random_range(-1e300..1e300),
            3 => rng.random_range(-1.0..1.0),
            4 => [0.0, -0.0, f64::MIN_POSITIVE, f64::MAX, f64::EPSILON][rng.random_range(0..5)],
            _ => f64::from_bits(rng.random::<u64>() & !(0x7FFu64 << 52) | (rng.random_range(1..0x7FEu64) << 52)),
        })
        .collect()
}

pub fn same_bits(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

/// Bit-exact FMAT1 and FMPK1 round trips of 10⁴ awkward values.
pub fn codec_round_trips(seed: u64) -> bool {
    use gnmf::data::{decode_checkpoint, decode_matrix, encode_checkpoint, encode_matrix};
    let values = awkward_values(seed, 10_000);
    let m = DenseMatrix::new(100, 100, values.clone()).unwrap();
    let back = decode_matrix(&encode_matrix(&m).unwrap()).unwrap();
    let arrays = vec![
        ("a".to_string(), vec![40, 100], values[..4000].to_vec()),
        ("b.weight".to_string(), vec![6000], values[4000..].to_vec()),
    ];
    let arrays_back = decode_checkpoint(&encode_checkpoint(&arrays).unwrap()).unwrap();
    back.shape() == (100, 100)
        && same_bits(back.data(), &values)
        && arrays_back.len() == 2
        && arrays
            .iter()
            .zip(&arrays_back)
            .all(|(x, y)| x.0 == y.0 && x.1 == y.1 && same_bits(&x.2, &y.2))
}

/// Empirical mean, variance and count of noisy synthetic entries at `rank`.
pub fn generator_moments(rank: usize, seed: u64) -> (f64, f64, usize) {
    use gnmf::data::{SyntheticBlock, SyntheticSpec};
    let spec = SyntheticSpec::new(
        vec![SyntheticBlock {
            count: 400,
            rows: (50, 50),
            cols: (50, 50),
        }],
        rank,
        seed,
    );
    let values: Vec<f64> = (0..spec.count()).flat_map(|k| spec.generate(k).unwrap().data().to_vec()).collect();
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var, values.len())
}

pub fn gnmf(args: &[&str]) -> std::process::Output {
    std::process::Command::new(env!("CARGO_BIN_EXE_gnmf"))
        .args(args)
        .output()
        .expect("binary runs")
}

pub fn gnmf_ok(args: &[&str]) -> String {
    let out = gnmf(args);
    assert!(
        out.status.success(),
        "gnmf {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

pub const SMALL_MODEL_CONFIG: &str = r#"{
  "model": {"rank": 3, "hidden": 8, "heads": 2, "blocks": 1, "outer_iters": 3, "inner_iters": 3},
  "train": {"epochs": 2, "seed": 5}
}"#;

/// Runs gen → train (both kinds) → run → eval inside `dir` and returns
/// the contents of every primary output, keyed by a stable label.
pub fn cli_pipeline(dir: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let p = |name: &str| dir.join(name).to_str().unwrap().to_owned();
    std::fs::write(p("config.json"), SMALL_MODEL_CONFIG).unwrap();
    gnmf_ok(&["gen", "--out", &p("train"), "--block", "4,6,9,6,9", "--rank", "3", "--seed", "1"]);
    gnmf_ok(&["gen", "--out", &p("test"), "--block", "3,7,8,7,8", "--rank", "3", "--seed", "2", "--sigma", "0"]);
    for kind in ["init", "accel"] {
        gnmf_ok(&[
            "train", "--kind", kind, "--data", &p("train"), "--val", &p("test"), "--config", &p("config.json"),
            "--out", &p(&format!("{kind}.fmpk")),
        ]);
    }
    let matrix = p("train/m000000.fmat");
    gnmf_ok(&[
        "run", "--matrix", &matrix, "--rank", "3", "--method", "accel", "--model", &p("accel.fmpk"), "--iters", "3",
        "--csv", &p("run.csv"), "--factors-out", &p("run"),
    ]);
    gnmf_ok(&[
        "eval", "--data", &p("test"), "--baseline", "--init", &p("init.fmpk"), "--accel", &p("accel.fmpk"),
        "--iters", "3", "--nbr-acc", "2", "--out", &p("eval"),
    ]);
    let mut files = vec![
        "train/manifest.json".to_string(),
        "train/m000000.fmat".into(),
        "train/m000003.fmat".into(),
        "test/m000002.fmat".into(),
        "run_W.fmat".into(),
        "run_H.fmat".into(),
        "eval/rmse_curves.csv".into(),
        "eval/ratio_quartiles.csv".into(),
    ];
    for kind in ["init", "accel"] {
        for suffix in ["", ".json", ".log.csv", ".epochs.csv", ".epoch0"] {
            files.push(format!("{kind}.fmpk{suffix}"));
        }
    }
    let mut out: Vec<(String, Vec<u8>)> =
        files.into_iter().map(|f| (f.clone(), std::fs::read(dir.join(&f)).unwrap())).collect();
    // the run CSV carries wall-clock seconds; compare iteration and rmse only
    let run_csv = std::fs::read_to_string(dir.join("run.csv")).unwrap();
    let stable: String = run_csv
        .lines()
        .map(|l| l.rsplit_once(',').map_or(l, |(head, _)| head).to_owned() + "\n")
        .collect();
    out.push(("run.csv[iteration,rmse]".into(), stable.into_bytes()));
    out
}

/// Labels of outputs that differ between two pipeline runs.
pub fn cli_determinism_mismatches() -> Vec<String> {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (ra, rb) = (cli_pipeline(a.path()), cli_pipeline(b.path()));
    ra.iter()
        .zip(&rb)
        .filter(|(x, y)| x.1 != y.1)
        .map(|(x, _)| x.0.clone())
        .collect()
}
