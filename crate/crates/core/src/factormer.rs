//! Factormer: relation-aware multi-head attention over the augmented line
//! digraph, with implicit edge features `[x_i ⊙ x_j, e_ij]`.
//!
//! For target `j` and source `i`, one head computes
//!
//! ```text
//! q_j = x_j Θ_Q + b_Q        k_i = x_i Θ_K        v_i = x_i Θ_V + b_V
//! k_ij = ẽ_ij Θ_KE           v_ij = ẽ_ij Θ_VE + b_VE
//! α_ij = softmax_i( q_j·(k_i + k_ij) / √d_h )
//! m_j  = Σ_i α_ij (v_i + v_ij)
//! ```
//!
//! The edge terms are never materialized per edge. Splitting `Θ_KE` into
//! the rows acting on `x_i ⊙ x_j` (`A`) and on `e_ij` (`a`) gives
//! `q_j·((x_i ⊙ x_j) A) = x_i·(x_j ⊙ (q_j Aᵀ))`, and the value side
//! aggregates as `((Σ_i α_ij x_i) ⊙ x_j) A_V`. Every term is a dense
//! product costing `O(mnd)` instead of `O(mnd²)`.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;
use crate::tape::{Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    /// Learned initialization: one N-Factormer pass over `(W⁰, H⁰)`.
    Init,
    /// Learned acceleration: N-Factormer over `[X_t, X̂_t]` between solves.
    Accel,
}

impl ModelKind {
    pub fn input_rank(self, rank: usize) -> usize {
        match self {
            ModelKind::Init => rank,
            ModelKind::Accel => 2 * rank,
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "init" => Ok(ModelKind::Init),
            "accel" => Ok(ModelKind::Accel),
            other => Err(Error::InvalidConfig(format!("unknown model kind {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub rank: usize,
    /// Hidden dimension `d`.
    pub hidden: usize,
    pub heads: usize,
    /// `N`: number of (H-update, W-update) Factormer pairs.
    pub blocks: usize,
    /// `T`: outer ADMM iterations.
    pub outer_iters: usize,
    /// `K`: ADMM iterations per subproblem call.
    pub inner_iters: usize,
    pub rho: f64,
    /// FFN hidden width; `2·hidden` when unset.
    pub ffn_hidden: Option<usize>,
    /// Scale attention logits by `1/√d` instead of `1/√d_h`.
    pub paper_scale: bool,
    /// Treat ADMM outputs as constants during backpropagation.
    pub detach_solver: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            rank: 10,
            hidden: 100,
            heads: 4,
            blocks: 4,
            outer_iters: 5,
            inner_iters: 5,
            rho: 1.0,
            ffn_hidden: None,
            paper_scale: false,
            detach_solver: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.rank == 0 || self.hidden == 0 || self.heads == 0 || self.inner_iters == 0 {
            return bad("rank, hidden, heads and inner_iters must be at least 1".into());
        }
        if self.hidden % self.heads != 0 {
            return bad(format!("hidden {} not divisible by heads {}", self.hidden, self.heads));
        }
        if !(self.rho > 0.0) {
            return bad(format!("rho must be positive, got {}", self.rho));
        }
        if self.ffn_hidden == Some(0) {
            return bad("ffn_hidden must be at least 1".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn ffn_width(&self) -> usize {
        self.ffn_hidden.unwrap_or(2 * self.hidden)
    }

    pub fn attention_scale(&self) -> f64 {
        let denom = if self.paper_scale {
            self.hidden
        } else {
            self.head_dim()
        };
        1.0 / (denom as f64).sqrt()
    }
}

/// Name and declared dimensions of one parameter. Vectors have one dim and
/// are held as `1×k` matrices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub dims: Vec<usize>,
}

impl ParamSpec {
    fn matrix(name: String, rows: usize, cols: usize) -> Self {
        Self {
            name,
            dims: vec![rows, cols],
        }
    }

    fn vector(name: String, len: usize) -> Self {
        Self { name, dims: vec![len] }
    }

    pub fn shape(&self) -> (usize, usize) {
        match self.dims.as_slice() {
            [k] => (1, *k),
            [r, c] => (*r, *c),
            _ => unreachable!("parameters are vectors or matrices"),
        }
    }

    fn is_weight(&self) -> bool {
        self.dims.len() == 2
    }
}

/// Parameter names and shapes for an N-Factormer of the given kind.
pub fn param_layout(cfg: &ModelConfig, kind: ModelKind) -> Vec<ParamSpec> {
    let (d, dh, r, dff) = (cfg.hidden, cfg.head_dim(), cfg.rank, cfg.ffn_width());
    let r_in = kind.input_rank(r);
    let mut specs = vec![
        ParamSpec::matrix("embed.weight".into(), r_in, d),
        ParamSpec::vector("embed.bias".into(), d),
    ];
    for l in 0..2 * cfg.blocks {
        for h in 0..cfg.heads {
            let p = format!("layers.{l}.heads.{h}");
            specs.push(ParamSpec::matrix(format!("{p}.query.weight"), d, dh));
            specs.push(ParamSpec::vector(format!("{p}.query.bias"), dh));
            specs.push(ParamSpec::matrix(format!("{p}.node_key.weight"), d, dh));
            specs.push(ParamSpec::matrix(format!("{p}.node_value.weight"), d, dh));
            specs.push(ParamSpec::vector(format!("{p}.node_value.bias"), dh));
            specs.push(ParamSpec::matrix(format!("{p}.edge_key.weight"), d + 1, dh));
            specs.push(ParamSpec::matrix(format!("{p}.edge_value.weight"), d + 1, dh));
            specs.push(ParamSpec::vector(format!("{p}.edge_value.bias"), dh));
        }
        let p = format!("layers.{l}");
        specs.push(ParamSpec::matrix(format!("{p}.ffn_in.weight"), d, dff));
        specs.push(ParamSpec::vector(format!("{p}.ffn_in.bias"), dff));
        specs.push(ParamSpec::matrix(format!("{p}.ffn_out.weight"), dff, d));
        specs.push(ParamSpec::vector(format!("{p}.ffn_out.bias"), d));
        specs.push(ParamSpec::vector(format!("{p}.norm1.gain"), d));
        specs.push(ParamSpec::vector(format!("{p}.norm1.bias"), d));
        specs.push(ParamSpec::vector(format!("{p}.norm2.gain"), d));
        specs.push(ParamSpec::vector(format!("{p}.norm2.bias"), d));
    }
    specs.push(ParamSpec::matrix("extract.weight".into(), d, r));
    specs.push(ParamSpec::vector("extract.bias".into(), r));
    specs
}

/// Named parameter values for one N-Factormer, in layout order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    specs: Vec<ParamSpec>,
    values: Vec<DenseMatrix>,
    index: HashMap<String, usize>,
}

impl ModelParams {
    fn from_parts(specs: Vec<ParamSpec>, values: Vec<DenseMatrix>) -> Self {
        let index = specs.iter().enumerate().map(|(k, s)| (s.name.clone(), k)).collect();
        Self { specs, values, index }
    }

    /// Linear maps draw weights and biases from `U(±1/√fan_in)`, where a
    /// bias takes the fan-in of its weight. Layer norms start at gain one
    /// and bias zero.
    pub fn init(cfg: &ModelConfig, kind: ModelKind, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let specs = param_layout(cfg, kind);
        let fan_in: HashMap<&str, usize> = specs
            .iter()
            .filter(|s| s.is_weight())
            .map(|s| (s.name.trim_end_matches(".weight"), s.dims[0]))
            .collect();
        let values = specs
            .iter()
            .map(|s| {
                let (r, c) = s.shape();
                let linear = s.name.strip_suffix(".weight").or_else(|| s.name.strip_suffix(".bias"));
                match linear.and_then(|base| fan_in.get(base)) {
                    Some(&fan) => {
                        let a = 1.0 / (fan as f64).sqrt();
                        DenseMatrix::from_fn(r, c, |_, _| rng.random_range(-a..a))
                    }
                    None if s.name.ends_with(".gain") => DenseMatrix::filled(r, c, 1.0),
                    None => DenseMatrix::zeros(r, c),
                }
            })
            .collect();
        Ok(Self::from_parts(specs, values))
    }

    /// All weights and biases zero, layer-norm gains one.
    pub fn zeros(cfg: &ModelConfig, kind: ModelKind) -> Result<Self> {
        cfg.validate()?;
        let specs = param_layout(cfg, kind);
        let values = specs
            .iter()
            .map(|s| {
                let (r, c) = s.shape();
                DenseMatrix::filled(r, c, if s.name.ends_with(".gain") { 1.0 } else { 0.0 })
            })
            .collect();
        Ok(Self::from_parts(specs, values))
    }

    /// Builds from `(name, dims, data)` triples, validating against the
    /// layout implied by `cfg` and `kind`.
    pub fn from_named(
        arrays: impl IntoIterator<Item = (String, Vec<usize>, Vec<f64>)>,
        cfg: &ModelConfig,
        kind: ModelKind,
    ) -> Result<Self> {
        cfg.validate()?;
        let specs = param_layout(cfg, kind);
        let index: HashMap<&str, usize> = specs.iter().enumerate().map(|(k, s)| (s.name.as_str(), k)).collect();
        let mut values: Vec<Option<DenseMatrix>> = vec![None; specs.len()];
        for (name, dims, data) in arrays {
            let &k = index
                .get(name.as_str())
                .ok_or_else(|| Error::UnknownParam(name.clone()))?;
            if dims != specs[k].dims {
                return Err(Error::ParamShape {
                    name,
                    expected: specs[k].dims.clone(),
                    found: dims,
                });
            }
            let (r, c) = specs[k].shape();
            values[k] = Some(DenseMatrix::new(r, c, data)?);
        }
        let values = values
            .into_iter()
            .zip(&specs)
            .map(|(v, s)| v.ok_or_else(|| Error::MissingParam(s.name.clone())))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_parts(specs, values))
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn get(&self, name: &str) -> Option<&DenseMatrix> {
        self.index.get(name).map(|&k| &self.values[k])
    }

    pub fn set(&mut self, name: &str, value: DenseMatrix) -> Result<()> {
        let &k = self.index.get(name).ok_or_else(|| Error::UnknownParam(name.into()))?;
        if value.shape() != self.values[k].shape() {
            return Err(Error::ParamShape {
                name: name.into(),
                expected: self.specs[k].dims.clone(),
                found: vec![value.rows(), value.cols()],
            });
        }
        self.values[k] = value;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamSpec, &DenseMatrix)> {
        self.specs.iter().zip(&self.values)
    }

    pub(crate) fn values_mut(&mut self) -> &mut [DenseMatrix] {
        &mut self.values
    }

    pub fn values(&self) -> &[DenseMatrix] {
        &self.values
    }
}

/// One attention head's parameters, bound to a tape.
#[derive(Clone, Debug)]
pub struct HeadParams {
    pub query_w: Var,
    pub query_b: Var,
    pub node_key_w: Var,
    pub node_value_w: Var,
    pub node_value_b: Var,
    pub edge_key_w: Var,
    pub edge_value_w: Var,
    pub edge_value_b: Var,
}

#[derive(Clone, Debug)]
pub struct FactormerParams {
    pub heads: Vec<HeadParams>,
    pub ffn_in: (Var, Var),
    pub ffn_out: (Var, Var),
    pub norm1: (Var, Var),
    pub norm2: (Var, Var),
}

#[derive(Clone, Debug)]
pub struct NFactormerParams {
    pub embed: (Var, Var),
    /// `2N` layers alternating H-update, W-update.
    pub layers: Vec<FactormerParams>,
    pub extract: (Var, Var),
    /// Tape handle per named parameter, in layout order.
    pub vars: Vec<Var>,
}

impl NFactormerParams {
    /// Places every parameter on `tape` through `place`, which decides
    /// between trainable leaves and constants.
    pub fn bind_with(
        tape: &mut Tape,
        params: &ModelParams,
        cfg: &ModelConfig,
        mut place: impl FnMut(&mut Tape, &str, &DenseMatrix) -> Var,
    ) -> Self {
        let vars: Vec<Var> = params
            .iter()
            .map(|(spec, value)| place(tape, &spec.name, value))
            .collect();
        let lookup = |name: &str| vars[params.index[name]];
        let layers = (0..2 * cfg.blocks)
            .map(|l| {
                let heads = (0..cfg.heads)
                    .map(|h| {
                        let p = format!("layers.{l}.heads.{h}");
                        HeadParams {
                            query_w: lookup(&format!("{p}.query.weight")),
                            query_b: lookup(&format!("{p}.query.bias")),
                            node_key_w: lookup(&format!("{p}.node_key.weight")),
                            node_value_w: lookup(&format!("{p}.node_value.weight")),
                            node_value_b: lookup(&format!("{p}.node_value.bias")),
                            edge_key_w: lookup(&format!("{p}.edge_key.weight")),
                            edge_value_w: lookup(&format!("{p}.edge_value.weight")),
                            edge_value_b: lookup(&format!("{p}.edge_value.bias")),
                        }
                    })
                    .collect();
                let p = format!("layers.{l}");
                FactormerParams {
                    heads,
                    ffn_in: (lookup(&format!("{p}.ffn_in.weight")), lookup(&format!("{p}.ffn_in.bias"))),
                    ffn_out: (lookup(&format!("{p}.ffn_out.weight")), lookup(&format!("{p}.ffn_out.bias"))),
                    norm1: (lookup(&format!("{p}.norm1.gain")), lookup(&format!("{p}.norm1.bias"))),
                    norm2: (lookup(&format!("{p}.norm2.gain")), lookup(&format!("{p}.norm2.bias"))),
                }
            })
            .collect();
        Self {
            embed: (lookup("embed.weight"), lookup("embed.bias")),
            layers,
            extract: (lookup("extract.weight"), lookup("extract.bias")),
            vars,
        }
    }

    /// Trainable leaves on a recording tape, constants otherwise.
    pub fn bind(tape: &mut Tape, params: &ModelParams, cfg: &ModelConfig) -> Self {
        Self::bind_with(tape, params, cfg, |t, _, v| t.leaf(v.clone()))
    }

    pub fn bind_constant(tape: &mut Tape, params: &ModelParams, cfg: &ModelConfig) -> Self {
        Self::bind_with(tape, params, cfg, |t, _, v| t.constant(v.clone()))
    }
}

/// `[x_src ⊙ x_tgt, e]`.
pub fn implicit_edge(x_src: &[f64], x_tgt: &[f64], e: f64) -> Result<Vec<f64>> {
    if x_src.len() != x_tgt.len() {
        return Err(Error::dims(
            "implicit_edge",
            format!("feature lengths {} and {}", x_src.len(), x_tgt.len()),
        ));
    }
    let mut out: Vec<f64> = x_src.iter().zip(x_tgt).map(|(a, b)| a * b).collect();
    out.push(e);
    Ok(out)
}

/// Output of one Factormer layer with the per-head attention matrices
/// (`m×n`, column `j` is target `j`'s distribution over sources).
pub struct FactormerOutput {
    pub out: Var,
    pub attention: Vec<Var>,
}

/// One Factormer layer: `src` is `m×d`, `tgt` is `n×d`, `edges` is `m×n`.
/// Returns the updated `n×d` target features.
pub fn factormer(
    tape: &mut Tape,
    src: Var,
    tgt: Var,
    edges: Var,
    params: &FactormerParams,
    cfg: &ModelConfig,
    last_layer: bool,
) -> Result<Var> {
    Ok(factormer_with_attention(tape, src, tgt, edges, params, cfg, last_layer)?.out)
}

pub fn factormer_with_attention(
    tape: &mut Tape,
    src: Var,
    tgt: Var,
    edges: Var,
    params: &FactormerParams,
    cfg: &ModelConfig,
    last_layer: bool,
) -> Result<FactormerOutput> {
    let (m, d) = tape.shape(src);
    let (n, d_tgt) = tape.shape(tgt);
    if d != cfg.hidden || d_tgt != cfg.hidden || tape.shape(edges) != (m, n) {
        return Err(Error::dims(
            "factormer",
            format!(
                "src {m}x{d}, tgt {n}x{d_tgt}, edges {:?}, hidden {}",
                tape.shape(edges),
                cfg.hidden
            ),
        ));
    }
    if params.heads.len() != cfg.heads {
        return Err(Error::dims("factormer", "head count differs from config"));
    }
    let ones = tape.constant(DenseMatrix::filled(m, 1, 1.0));

    let mut messages = Vec::with_capacity(cfg.heads);
    let mut attention = Vec::with_capacity(cfg.heads);
    for head in &params.heads {
        let (msg, alpha) = attention_head(tape, src, tgt, edges, ones, head, cfg)?;
        messages.push(msg);
        attention.push(alpha);
    }
    let message = if messages.len() == 1 {
        messages[0]
    } else {
        tape.concat_columns(&messages)?
    };

    let pre = tape.add(tgt, message)?;
    let x1 = tape.layer_norm(pre, params.norm1.0, params.norm1.1)?;
    let hidden = tape.linear(x1, params.ffn_in.0, Some(params.ffn_in.1))?;
    let hidden = tape.relu(hidden)?;
    let ff = tape.linear(hidden, params.ffn_out.0, Some(params.ffn_out.1))?;
    let mut out = tape.add(x1, ff)?;
    if !last_layer {
        out = tape.layer_norm(out, params.norm2.0, params.norm2.1)?;
    }
    Ok(FactormerOutput { out, attention })
}

fn attention_head(
    tape: &mut Tape,
    src: Var,
    tgt: Var,
    edges: Var,
    ones: Var,
    head: &HeadParams,
    cfg: &ModelConfig,
) -> Result<(Var, Var)> {
    let d = cfg.hidden;
    let q = tape.linear(tgt, head.query_w, Some(head.query_b))?;
    let k_node = tape.linear(src, head.node_key_w, None)?;
    let v_node = tape.linear(src, head.node_value_w, Some(head.node_value_b))?;

    // rows 0..d of the edge weights act on x_i ⊙ x_j, row d on e_ij
    let ke_t = tape.transpose(head.edge_key_w)?;
    let ke_prod_t = tape.slice_columns(ke_t, 0, d)?;
    let ke_edge_t = tape.slice_columns(ke_t, d, d + 1)?;
    let ve_t = tape.transpose(head.edge_value_w)?;
    let ve_prod_t = tape.slice_columns(ve_t, 0, d)?;
    let ve_prod = tape.transpose(ve_prod_t)?;
    let ve_edge_t = tape.slice_columns(ve_t, d, d + 1)?;
    let ve_edge = tape.transpose(ve_edge_t)?;

    // scores[i, j] = q_j·k_i + x_i·(x_j ⊙ q_j Aᵀ) + e_ij (q_j·a)
    let q_t = tape.transpose(q)?;
    let node_scores = tape.matmul(k_node, q_t)?;
    let qa = tape.matmul(q, ke_prod_t)?;
    let z = tape.mul(tgt, qa)?;
    let z_t = tape.transpose(z)?;
    let prod_scores = tape.matmul(src, z_t)?;
    let qe = tape.matmul(q, ke_edge_t)?;
    let qe_row = tape.transpose(qe)?;
    let qe_grid = tape.matmul(ones, qe_row)?;
    let edge_scores = tape.mul(edges, qe_grid)?;
    let scores = tape.add(node_scores, prod_scores)?;
    let scores = tape.add(scores, edge_scores)?;
    let scores = tape.scale(scores, cfg.attention_scale())?;
    let alpha = tape.softmax_over_sources(scores)?;

    // m_j = Σ_i α_ij v_i + ((Σ_i α_ij x_i) ⊙ x_j) A_V + (Σ_i α_ij e_ij) a_V + (Σ_i α_ij) b_VE
    let alpha_t = tape.transpose(alpha)?;
    let m_node = tape.matmul(alpha_t, v_node)?;
    let x_bar = tape.matmul(alpha_t, src)?;
    let x_mix = tape.mul(x_bar, tgt)?;
    let m_prod = tape.matmul(x_mix, ve_prod)?;
    let weighted_edges = tape.mul(alpha, edges)?;
    let we_t = tape.transpose(weighted_edges)?;
    let e_bar = tape.matmul(we_t, ones)?;
    let m_edge = tape.matmul(e_bar, ve_edge)?;
    let alpha_mass = tape.matmul(alpha_t, ones)?;
    let m_bias = tape.matmul(alpha_mass, head.edge_value_b)?;

    let msg = tape.add(m_node, m_prod)?;
    let msg = tape.add(msg, m_edge)?;
    let msg = tape.add(msg, m_bias)?;
    Ok((msg, alpha))
}

/// Embeds both factors, runs `N` alternating (H-update, W-update) Factormer
/// pairs, and maps back to rank `r`. Returns `(W_out, H_out)`.
pub fn n_factormer(
    tape: &mut Tape,
    w_in: Var,
    h_in: Var,
    v: Var,
    params: &NFactormerParams,
    cfg: &ModelConfig,
) -> Result<(Var, Var)> {
    let (m, n) = tape.shape(v);
    if tape.shape(w_in).0 != m || tape.shape(h_in).0 != n || tape.shape(w_in).1 != tape.shape(h_in).1 {
        return Err(Error::dims(
            "n_factormer",
            format!("W {:?}, H {:?}, V {m}x{n}", tape.shape(w_in), tape.shape(h_in)),
        ));
    }
    if params.layers.len() != 2 * cfg.blocks {
        return Err(Error::dims("n_factormer", "layer count differs from config"));
    }
    let vt = tape.transpose(v)?;
    let mut w = tape.linear(w_in, params.embed.0, Some(params.embed.1))?;
    let mut h = tape.linear(h_in, params.embed.0, Some(params.embed.1))?;
    for (k, pair) in params.layers.chunks(2).enumerate() {
        let last = k + 1 == cfg.blocks;
        h = factormer(tape, w, h, v, &pair[0], cfg, false)?;
        w = factormer(tape, h, w, vt, &pair[1], cfg, last)?;
    }
    let w_out = tape.linear(w, params.extract.0, Some(params.extract.1))?;
    let h_out = tape.linear(h, params.extract.0, Some(params.extract.1))?;
    Ok((w_out, h_out))
}

/// Euclidean projection onto the nonnegative orthant.
pub fn project_nonneg(tape: &mut Tape, x: Var) -> Result<Var> {
    tape.relu(x)
}
