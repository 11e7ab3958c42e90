//! Evaluation protocols: nearest-neighbour retrieval of physical
//! configurations, latent invariance to domain changes, and the
//! separable-encoder experiment showing that optimal encoders drop features
//! of irrelevant variables.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AdamConfig, AutodiffError, Graph, ParamStore, Tensor};
use crate::contrastive::{self, SimilarityKind};
use crate::models::{Activation, SeparableEncoder};
use crate::renderer::{self, DomainParams, Mask, RenderError};
use crate::training::{Model, TrainError};
use crate::worldsim::WorldState;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{what}: {a} vs {b}")]
    Mismatch { what: &'static str, a: usize, b: usize },
    #[error("retrieval pool is empty")]
    EmptyPool,
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// |A ∩ B| / |A ∪ B|, with two empty masks counting as identical.
pub fn iou(a: &Mask, b: &Mask) -> Result<f64> {
    if a.resolution != b.resolution || a.bits.len() != b.bits.len() {
        return Err(EvalError::Mismatch {
            what: "mask resolution",
            a: a.resolution,
            b: b.resolution,
        });
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.bits.iter().zip(&b.bits) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Sum over body index of the distance between matching body centers.
pub fn object_distance(a: &WorldState, b: &WorldState) -> Result<f64> {
    if a.bodies.len() != b.bodies.len() {
        return Err(EvalError::Mismatch {
            what: "body count",
            a: a.bodies.len(),
            b: b.bodies.len(),
        });
    }
    Ok(a.bodies
        .iter()
        .zip(&b.bodies)
        .map(|(p, q)| (p.position - q.position).norm())
        .sum())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

impl Summary {
    /// Mean and population standard deviation.
    pub fn of(values: &[f64]) -> Summary {
        if values.is_empty() {
            return Summary::default();
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Summary {
            mean,
            std: var.sqrt(),
            count: values.len(),
        }
    }
}

impl fmt::Display for Summary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.4} ± {:.4} (n={})", self.mean, self.std, self.count)
    }
}

/// Packed mask bits for fast pairwise IOU.
struct Bits(Vec<u64>);

impl Bits {
    fn from_mask(m: &Mask) -> Bits {
        let mut words = vec![0u64; m.bits.len().div_ceil(64)];
        for (i, _) in m.bits.iter().enumerate().filter(|(_, b)| **b) {
            words[i / 64] |= 1 << (i % 64);
        }
        Bits(words)
    }

    fn iou(&self, other: &Bits) -> f64 {
        let (mut inter, mut union) = (0u32, 0u32);
        for (a, b) in self.0.iter().zip(&other.0) {
            inter += (a & b).count_ones();
            union += (a | b).count_ones();
        }
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na2: f64 = a.iter().map(|x| x * x).sum();
    let nb2: f64 = b.iter().map(|x| x * x).sum();
    if na2 == 0.0 || nb2 == 0.0 {
        0.0
    } else {
        // exactly 1 for identical inputs, unlike dividing by the product of roots
        dot / (na2 * nb2).sqrt()
    }
}

/// Index of the most cosine-similar pool latent for each query; ties go to
/// the lowest pool index.
pub fn nearest_neighbors(queries: &[Vec<f64>], pool: &[Vec<f64>]) -> Result<Vec<usize>> {
    if pool.is_empty() {
        return Err(EvalError::EmptyPool);
    }
    Ok(queries
        .iter()
        .map(|q| {
            let mut best = (0, f64::NEG_INFINITY);
            for (i, p) in pool.iter().enumerate() {
                let s = cosine(q, p);
                if s > best.1 {
                    best = (i, s);
                }
            }
            best.0
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub split: String,
    pub iou: Summary,
    /// Summed per-body center distance, in meters.
    pub distance: Summary,
    /// Mean IOU between each query and every pool item.
    pub random_pair_iou: f64,
    pub pool_size: usize,
    /// Pool index retrieved for each query.
    pub retrieved: Vec<usize>,
}

impl fmt::Display for RetrievalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "retrieval split={} pool={} queries={}", self.split, self.pool_size, self.iou.count)?;
        writeln!(f, "  IOU        {}", self.iou)?;
        writeln!(f, "  distance   {}", self.distance)?;
        write!(f, "  random IOU {:.4}", self.random_pair_iou)
    }
}

impl RetrievalReport {
    pub fn metric_line(&self) -> String {
        format!(
            "retrieval split={} iou_mean={} iou_std={} distance_mean={} distance_std={} random_iou={} queries={} pool={}",
            self.split,
            self.iou.mean,
            self.iou.std,
            self.distance.mean,
            self.distance.std,
            self.random_pair_iou,
            self.iou.count,
            self.pool_size
        )
    }
}

/// Retrieval scores given latents and the underlying states of queries and pool.
pub fn retrieval_from_latents(
    split: &str,
    query_latents: &[Vec<f64>],
    query_states: &[WorldState],
    pool_latents: &[Vec<f64>],
    pool_states: &[WorldState],
    resolution: usize,
) -> Result<RetrievalReport> {
    if query_latents.len() != query_states.len() {
        return Err(EvalError::Mismatch {
            what: "query latents vs states",
            a: query_latents.len(),
            b: query_states.len(),
        });
    }
    if pool_latents.len() != pool_states.len() {
        return Err(EvalError::Mismatch {
            what: "pool latents vs states",
            a: pool_latents.len(),
            b: pool_states.len(),
        });
    }
    let retrieved = nearest_neighbors(query_latents, pool_latents)?;
    let masks = |states: &[WorldState]| -> Result<Vec<Bits>> {
        states
            .iter()
            .map(|s| Ok(Bits::from_mask(&renderer::render_mask(s, resolution)?)))
            .collect()
    };
    let (qm, pm) = (masks(query_states)?, masks(pool_states)?);
    let mut ious = Vec::with_capacity(retrieved.len());
    let mut dists = Vec::with_capacity(retrieved.len());
    let mut baseline = 0.0;
    for (q, &r) in retrieved.iter().enumerate() {
        ious.push(qm[q].iou(&pm[r]));
        dists.push(object_distance(&query_states[q], &pool_states[r])?);
        baseline += pm.iter().map(|p| qm[q].iou(p)).sum::<f64>() / pm.len() as f64;
    }
    Ok(RetrievalReport {
        split: split.to_string(),
        iou: Summary::of(&ious),
        distance: Summary::of(&dists),
        random_pair_iou: if retrieved.is_empty() { 0.0 } else { baseline / retrieved.len() as f64 },
        pool_size: pool_states.len(),
        retrieved,
    })
}

/// A physical state together with the domain it is rendered under.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub state: WorldState,
    pub domain: DomainParams,
}

pub fn encode_scenes(model: &Model, scenes: &[Scene]) -> Result<Vec<Vec<f64>>> {
    let res = model.config.resolution;
    let mut out = Vec::with_capacity(scenes.len());
    for chunk in scenes.chunks(256) {
        let obs = chunk
            .iter()
            .map(|s| renderer::render(&s.state, &s.domain, res))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        out.extend(model.encode(&obs)?);
    }
    Ok(out)
}

/// Renders and encodes queries and pool, then scores nearest-neighbour retrieval.
pub fn retrieval_eval(model: &Model, split: &str, queries: &[Scene], pool: &[Scene]) -> Result<RetrievalReport> {
    if pool.is_empty() {
        return Err(EvalError::EmptyPool);
    }
    let ql = encode_scenes(model, queries)?;
    let pl = encode_scenes(model, pool)?;
    let qs: Vec<WorldState> = queries.iter().map(|s| s.state.clone()).collect();
    let ps: Vec<WorldState> = pool.iter().map(|s| s.state.clone()).collect();
    retrieval_from_latents(split, &ql, &qs, &pl, &ps, model.config.resolution)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InvarianceReport {
    pub cosine: Summary,
    pub mse: Summary,
    /// Pairs dropped because one latent was all zeros.
    pub excluded_zero: usize,
}

impl fmt::Display for InvarianceReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "invariance pairs={} excluded={}", self.cosine.count, self.excluded_zero)?;
        writeln!(f, "  cosine {}", self.cosine)?;
        write!(f, "  MSE    {}", self.mse)
    }
}

impl InvarianceReport {
    pub fn metric_line(&self) -> String {
        format!(
            "invariance cos_mean={} cos_std={} mse_mean={} mse_std={} pairs={} excluded={}",
            self.cosine.mean, self.cosine.std, self.mse.mean, self.mse.std, self.cosine.count, self.excluded_zero
        )
    }
}

/// Cosine similarity and mean squared difference between paired latents.
pub fn invariance_from_latents(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<InvarianceReport> {
    if a.len() != b.len() {
        return Err(EvalError::Mismatch {
            what: "latent pairs",
            a: a.len(),
            b: b.len(),
        });
    }
    let mut cos = Vec::with_capacity(a.len());
    let mut mse = Vec::with_capacity(a.len());
    let mut excluded = 0;
    for (x, y) in a.iter().zip(b) {
        if x.len() != y.len() {
            return Err(EvalError::Mismatch {
                what: "latent dimension",
                a: x.len(),
                b: y.len(),
            });
        }
        if x.iter().all(|&v| v == 0.0) || y.iter().all(|&v| v == 0.0) {
            excluded += 1;
            continue;
        }
        cos.push(cosine(x, y));
        mse.push(x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / x.len() as f64);
    }
    Ok(InvarianceReport {
        cosine: Summary::of(&cos),
        mse: Summary::of(&mse),
        excluded_zero: excluded,
    })
}

/// Encodes each state under two domains and compares the latents.
pub fn invariance_eval(model: &Model, states: &[WorldState], domains: &[(DomainParams, DomainParams)]) -> Result<InvarianceReport> {
    if states.len() != domains.len() {
        return Err(EvalError::Mismatch {
            what: "states vs domain pairs",
            a: states.len(),
            b: domains.len(),
        });
    }
    let first: Vec<Scene> = states
        .iter()
        .zip(domains)
        .map(|(s, (d, _))| Scene {
            state: s.clone(),
            domain: d.clone(),
        })
        .collect();
    let second: Vec<Scene> = states
        .iter()
        .zip(domains)
        .map(|(s, (_, d))| Scene {
            state: s.clone(),
            domain: d.clone(),
        })
        .collect();
    let (a, b) = (encode_scenes(model, &first)?, encode_scenes(model, &second)?);
    invariance_from_latents(&a, &b)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// Targets depend on `x` only.
    Independent,
    /// Targets also depend on `e`.
    Dependent,
}

impl std::str::FromStr for Regime {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "indep" | "independent" => Ok(Regime::Independent),
            "dep" | "dependent" => Ok(Regime::Dependent),
            other => Err(format!("unknown regime `{other}` (expected indep or dep)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Prop1Loss {
    Squared,
    InfoNce,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Prop1Config {
    pub x_dim: usize,
    pub e_dim: usize,
    pub feature_dim: usize,
    pub out_dim: usize,
    /// Distinct `x` values; every one is paired with every `e` value.
    pub grid_x: usize,
    pub grid_e: usize,
    pub activation: Activation,
    pub loss: Prop1Loss,
    /// Weight of the `e` term in dependent-regime targets.
    pub dependence: f64,
    pub steps: usize,
    pub learning_rate: f64,
    /// Learning rate at the last step; decays geometrically from `learning_rate`.
    pub final_learning_rate: f64,
    /// L2 penalty on W_x and W_e. Selects the minimum-norm optimum among equal-loss ones.
    pub weight_decay: f64,
    /// InfoNCE only: rows per minibatch.
    pub batch_size: usize,
    pub trials: usize,
    pub seed: u64,
}

impl Default for Prop1Config {
    fn default() -> Self {
        Self {
            x_dim: 2,
            e_dim: 2,
            feature_dim: 8,
            out_dim: 4,
            grid_x: 100,
            grid_e: 40,
            activation: Activation::Identity,
            loss: Prop1Loss::Squared,
            dependence: 1.0,
            steps: 5000,
            learning_rate: 0.03,
            final_learning_rate: 1e-4,
            weight_decay: 1e-3,
            batch_size: 64,
            trials: 10,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prop1Trial {
    pub seed: u64,
    /// ‖W_e‖ / ‖W_x‖ after training.
    pub ratio: f64,
    pub loss_full: f64,
    /// Model trained with W_e fixed at zero.
    pub loss_restricted: f64,
    /// Trained full model with W_e zeroed and its contribution folded into the bias.
    pub loss_substituted: f64,
    /// Relative loss change over the last tenth of training stayed below 1e-3.
    pub converged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prop1Report {
    pub regime: Regime,
    pub trials: Vec<Prop1Trial>,
    pub median_ratio: f64,
}

impl Prop1Report {
    pub fn count_ratio_at_most(&self, bound: f64) -> usize {
        self.trials.iter().filter(|t| t.ratio <= bound).count()
    }

    pub fn metric_lines(&self) -> Vec<String> {
        self.trials
            .iter()
            .map(|t| {
                format!(
                    "prop1 regime={:?} seed={} ratio={} loss_full={} loss_restricted={} loss_substituted={} converged={}",
                    self.regime, t.seed, t.ratio, t.loss_full, t.loss_restricted, t.loss_substituted, t.converged
                )
            })
            .collect()
    }
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    match v.len() {
        0 => f64::NAN,
        n if n % 2 == 1 => v[n / 2],
        n => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

/// Fixed random `tanh(A v + c)` feature map.
struct FeatureMap {
    a: Vec<f64>,
    c: Vec<f64>,
    in_dim: usize,
    out_dim: usize,
}

impl FeatureMap {
    fn sample<R: Rng + ?Sized>(rng: &mut R, in_dim: usize, out_dim: usize) -> Self {
        Self {
            a: (0..in_dim * out_dim).map(|_| rng.random_range(-1.5..1.5)).collect(),
            c: (0..out_dim).map(|_| rng.random_range(-0.5..0.5)).collect(),
            in_dim,
            out_dim,
        }
    }

    fn apply(&self, v: &[f64]) -> Vec<f64> {
        (0..self.out_dim)
            .map(|o| {
                let s: f64 = (0..self.in_dim).map(|i| self.a[o * self.in_dim + i] * v[i]).sum();
                (s + self.c[o]).tanh()
            })
            .collect()
    }
}

struct Prop1Data {
    phi_x: Tensor,
    phi_e: Tensor,
    /// Distinct `φ_e(e)` rows, one per grid value of `e`.
    phi_e_grid: Vec<Vec<f64>>,
    y: Tensor,
}

fn prop1_data(cfg: &Prop1Config, regime: Regime, rng: &mut ChaCha8Rng) -> Prop1Data {
    let fx = FeatureMap::sample(rng, cfg.x_dim, cfg.feature_dim);
    let fe = FeatureMap::sample(rng, cfg.e_dim, cfg.feature_dim);
    let gx = FeatureMap::sample(rng, cfg.x_dim, cfg.out_dim);
    let ge = FeatureMap::sample(rng, cfg.e_dim, cfg.out_dim);
    let point = |rng: &mut ChaCha8Rng, d: usize| -> Vec<f64> { (0..d).map(|_| rng.random_range(-1.0..1.0)).collect() };
    let xs: Vec<Vec<f64>> = (0..cfg.grid_x).map(|_| point(rng, cfg.x_dim)).collect();
    let es: Vec<Vec<f64>> = (0..cfg.grid_e).map(|_| point(rng, cfg.e_dim)).collect();
    let phi_e_grid: Vec<Vec<f64>> = es.iter().map(|e| fe.apply(e)).collect();
    let (mut px, mut pe, mut y) = (Vec::new(), Vec::new(), Vec::new());
    for x in &xs {
        let fxv = fx.apply(x);
        let yx = gx.apply(x);
        for (e, fev) in es.iter().zip(&phi_e_grid) {
            px.extend_from_slice(&fxv);
            pe.extend_from_slice(fev);
            match regime {
                Regime::Independent => y.extend_from_slice(&yx),
                Regime::Dependent => {
                    let ye = ge.apply(e);
                    y.extend(yx.iter().zip(&ye).map(|(a, b)| a + cfg.dependence * b));
                }
            }
        }
    }
    let n = cfg.grid_x * cfg.grid_e;
    Prop1Data {
        phi_x: Tensor::new(vec![n, cfg.feature_dim], px).unwrap(),
        phi_e: Tensor::new(vec![n, cfg.feature_dim], pe).unwrap(),
        phi_e_grid,
        y: Tensor::new(vec![n, cfg.out_dim], y).unwrap(),
    }
}

fn rows(t: &Tensor, idx: &[usize]) -> Tensor {
    let c = t.shape()[1];
    let data = idx.iter().flat_map(|&i| t.data()[i * c..(i + 1) * c].iter().copied()).collect();
    Tensor::new(vec![idx.len(), c], data).unwrap()
}

fn prop1_loss(sep: &SeparableEncoder, cfg: &Prop1Config, g: &mut Graph, data: &Prop1Data, idx: Option<&[usize]>) -> Result<crate::autodiff::Var> {
    let pick = |t: &Tensor| idx.map_or_else(|| t.clone(), |i| rows(t, i));
    let px = g.input(pick(&data.phi_x))?;
    let pe = g.input(pick(&data.phi_e))?;
    let y = g.input(pick(&data.y))?;
    let out = sep.forward(g, px, pe).map_err(|e| EvalError::Invalid(e.to_string()))?;
    Ok(match cfg.loss {
        Prop1Loss::Squared => {
            let d = g.sub(out, y)?;
            let sq = g.mul(d, d)?;
            g.mean(sq)?
        }
        Prop1Loss::InfoNce => {
            let logits = contrastive::graph_logits(g, out, y, SimilarityKind::DotExp)
                .map_err(|e| EvalError::Invalid(e.to_string()))?;
            contrastive::graph_info_nce(g, logits).map_err(|e| EvalError::Invalid(e.to_string()))?
        }
    })
}

fn full_loss(sep: &SeparableEncoder, cfg: &Prop1Config, store: &ParamStore, data: &Prop1Data) -> Result<f64> {
    let n = data.y.shape()[0];
    let mut g = Graph::new(store);
    match cfg.loss {
        Prop1Loss::Squared => {
            let l = prop1_loss(sep, cfg, &mut g, data, None)?;
            Ok(g.value(l).item())
        }
        Prop1Loss::InfoNce => {
            // fixed sweep of consecutive blocks so comparisons use identical batches
            let mut total = 0.0;
            let blocks = (n / cfg.batch_size).max(1);
            for b in 0..blocks {
                let idx: Vec<usize> = (0..cfg.batch_size.min(n)).map(|i| (b * cfg.batch_size + i * 7919) % n).collect();
                let mut g = Graph::new(store);
                let l = prop1_loss(sep, cfg, &mut g, data, Some(&idx))?;
                total += g.value(l).item();
            }
            Ok(total / blocks as f64)
        }
    }
}

fn fit(sep: &SeparableEncoder, cfg: &Prop1Config, data: &Prop1Data, restricted: bool, seed: u64) -> Result<(ParamStore, bool)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    sep.init(&mut store, restricted, &mut rng)
        .map_err(|e| EvalError::Invalid(e.to_string()))?;
    let mut adam = AdamConfig {
        lr: cfg.learning_rate,
        ..AdamConfig::default()
    };
    let decay = (cfg.final_learning_rate / cfg.learning_rate).powf(1.0 / cfg.steps.max(2).saturating_sub(1) as f64);
    let n = data.y.shape()[0];
    let mut history = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let idx: Option<Vec<usize>> = match cfg.loss {
            Prop1Loss::Squared => None,
            Prop1Loss::InfoNce => Some(rand::seq::index::sample(&mut rng, n, cfg.batch_size.min(n)).into_vec()),
        };
        let grads = {
            let mut g = Graph::new(&store);
            let l = prop1_loss(sep, cfg, &mut g, data, idx.as_deref())?;
            history.push(g.value(l).item());
            let mut total = l;
            if cfg.weight_decay > 0.0 {
                for name in [SeparableEncoder::WX, SeparableEncoder::WE] {
                    if store.get(name).is_some() {
                        let w = g.param(name)?;
                        let sq = g.mul(w, w)?;
                        let s = g.sum(sq)?;
                        let p = g.scale(s, cfg.weight_decay)?;
                        total = g.add(total, p)?;
                    }
                }
            }
            g.backward(total)?
        };
        store.adam_step(&grads, &adam)?;
        adam.lr *= decay;
    }
    let tail = (cfg.steps / 10).max(1);
    let converged = if history.len() > tail {
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        let end = mean(&history[history.len() - tail / 2.max(1)..]);
        let mid = mean(&history[history.len() - tail..history.len() - tail / 2]);
        ((mid - end) / end.abs().max(1e-12)).abs() < 1e-3
    } else {
        false
    };
    Ok((store, converged))
}

/// Trains separable encoders on a synthetic `X × E` product grid.
pub fn prop1_experiment(cfg: &Prop1Config, regime: Regime) -> Result<Prop1Report> {
    if cfg.trials == 0 || cfg.steps == 0 || cfg.grid_x == 0 || cfg.grid_e == 0 {
        return Err(EvalError::Invalid("trials, steps and grid sizes must be positive".into()));
    }
    if !(cfg.learning_rate > 0.0 && cfg.final_learning_rate > 0.0 && cfg.weight_decay >= 0.0) {
        return Err(EvalError::Invalid("learning rates must be positive and weight_decay non-negative".into()));
    }
    let sep = SeparableEncoder {
        x_dim: cfg.feature_dim,
        e_dim: cfg.feature_dim,
        out_dim: cfg.out_dim,
        activation: cfg.activation,
    };
    let mut trials = Vec::with_capacity(cfg.trials);
    for t in 0..cfg.trials as u64 {
        let seed = cfg.seed.wrapping_add(t);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = prop1_data(cfg, regime, &mut rng);
        let (full, converged) = fit(&sep, cfg, &data, false, seed ^ 0x5eed)?;
        let (restricted, _) = fit(&sep, cfg, &data, true, seed ^ 0x5eed)?;
        let we = full.get(SeparableEncoder::WE).unwrap();
        let wx = full.get(SeparableEncoder::WX).unwrap();
        let ratio = we.l2_norm() / wx.l2_norm();
        // b' = b + W_eᵀ φ_e(e*), scanning e* over the grid
        let mut loss_substituted = f64::INFINITY;
        for phi in &data.phi_e_grid {
            let mut sub = ParamStore::new();
            sub.insert(SeparableEncoder::WX, wx.clone())?;
            let mut b = full.get(SeparableEncoder::B).unwrap().clone();
            for (o, bv) in b.data_mut().iter_mut().enumerate() {
                *bv += (0..sep.e_dim).map(|i| we.data()[i * sep.out_dim + o] * phi[i]).sum::<f64>();
            }
            sub.insert(SeparableEncoder::B, b)?;
            loss_substituted = loss_substituted.min(full_loss(&sep, cfg, &sub, &data)?);
        }
        trials.push(Prop1Trial {
            seed,
            ratio,
            loss_full: full_loss(&sep, cfg, &full, &data)?,
            loss_restricted: full_loss(&sep, cfg, &restricted, &data)?,
            loss_substituted,
            converged,
        });
    }
    let ratios: Vec<f64> = trials.iter().map(|t| t.ratio).collect();
    Ok(Prop1Report {
        regime,
        median_ratio: median(&ratios),
        trials,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::worldsim::{Body, Shape, Vec2};

    fn mask(res: usize, on: &[usize]) -> Mask {
        let mut bits = vec![false; res * res];
        for &i in on {
            bits[i] = true;
        }
        Mask { resolution: res, bits }
    }

    fn state(positions: &[(f64, f64)]) -> WorldState {
        WorldState {
            bodies: positions
                .iter()
                .map(|&(x, y)| Body {
                    shape: Shape::Disc,
                    size: 0.1,
                    position: Vec2::new(x, y),
                    velocity: Vec2::ZERO,
                    mass: 1.0,
                })
                .collect(),
            frame_half_extent: 10.0,
            drag_coeff: 0.0,
            restitution: 1.0,
        }
    }

    #[test]
    fn iou_cases() {
        let a = mask(4, &[1, 2]);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert_eq!(iou(&a, &mask(4, &[5, 6])).unwrap(), 0.0);
        assert_eq!(iou(&a, &mask(4, &[1, 2, 3, 4])).unwrap(), 0.5);
        assert_eq!(iou(&mask(4, &[]), &mask(4, &[])).unwrap(), 1.0);
        assert!(iou(&a, &mask(3, &[])).is_err());
        let b = mask(4, &[2, 3, 9]);
        assert_eq!(iou(&a, &b).unwrap(), iou(&b, &a).unwrap());
        assert_eq!(Bits::from_mask(&a).iou(&Bits::from_mask(&b)), iou(&a, &b).unwrap());
    }

    #[test]
    fn object_distance_cases() {
        let a = state(&[(0.0, 0.0), (1.0, 1.0)]);
        assert_eq!(object_distance(&a, &a).unwrap(), 0.0);
        let b = state(&[(3.0, 4.0), (4.0, 5.0)]);
        assert_eq!(object_distance(&a, &b).unwrap(), 10.0);
        assert!(object_distance(&a, &state(&[(0.0, 0.0)])).is_err());
    }

    #[test]
    fn nearest_neighbor_ties_take_lowest_index() {
        let pool = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![2.0, 0.0], vec![0.0, 0.0]];
        let nn = nearest_neighbors(&[vec![3.0, 0.0], vec![0.0, 0.5], vec![-1.0, -1.0]], &pool).unwrap();
        assert_eq!(nn, vec![0, 1, 3]);
        assert!(matches!(nearest_neighbors(&[vec![1.0]], &[]), Err(EvalError::EmptyPool)));
    }

    #[test]
    fn invariance_of_identical_and_constant_latents() {
        let a = vec![vec![0.3, -1.0], vec![2.0, 0.5], vec![0.0, 0.0]];
        let r = invariance_from_latents(&a, &a).unwrap();
        assert_eq!(r.cosine.mean, 1.0);
        assert_eq!(r.mse.mean, 0.0);
        assert_eq!(r.excluded_zero, 1);
        let c = vec![vec![1.0, 2.0]; 3];
        assert_eq!(invariance_from_latents(&c, &c).unwrap().cosine.std, 0.0);
    }

    #[test]
    fn summary_statistics() {
        let s = Summary::of(&[1.0, 3.0]);
        assert_eq!((s.mean, s.std, s.count), (2.0, 1.0, 2));
        assert!((median(&[3.0, 1.0, 2.0]) - 2.0).abs() < 1e-15);
    }
}
