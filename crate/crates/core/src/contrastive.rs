//! Similarity functions, the InfoNCE family of losses, and the
//! mutual-information lower bound.
//!
//! Plain functions over `Vec<f64>` latents are used for evaluation and as
//! test oracles; [`graph_logits`] and [`graph_info_nce`] are the
//! differentiable counterparts used in training.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, Var};
use crate::renderer::DomainParams;

#[derive(Debug, Error)]
pub enum ContrastiveError {
    #[error("{what}: expected {expected}, got {got}")]
    Mismatch { what: &'static str, expected: usize, got: usize },
    #[error("score matrix must be non-empty and square with positive finite entries: {0}")]
    InvalidScores(String),
    #[error("bilinear similarity needs a {0}x{0} weight matrix")]
    MissingBilinear(usize),
    #[error("same-domain batch contains item {index} with a different domain")]
    MixedDomains { index: usize },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

pub type Result<T> = std::result::Result<T, ContrastiveError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityKind {
    /// `exp(zᵀy)`
    DotExp,
    /// `exp(zᵀWy)`
    Bilinear,
    /// `exp(−‖z − y‖²)`
    NegL2,
    /// `exp(cos(z, y))`
    Cosine,
}

impl SimilarityKind {
    pub const BILINEAR_PARAM: &'static str = "sim.w";

    pub fn name(self) -> &'static str {
        match self {
            SimilarityKind::DotExp => "dot_exp",
            SimilarityKind::Bilinear => "bilinear",
            SimilarityKind::NegL2 => "neg_l2",
            SimilarityKind::Cosine => "cosine",
        }
    }
}

/// Which domains the labels of a batch are rendered under.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossVariant {
    /// Labels under an independently drawn domain.
    Cdr,
    /// Labels under each item's own domain.
    Naive,
    /// One domain for the whole batch.
    SameDomain,
}

impl LossVariant {
    pub fn name(self) -> &'static str {
        match self {
            LossVariant::Cdr => "cdr",
            LossVariant::Naive => "naive",
            LossVariant::SameDomain => "same_domain",
        }
    }
}

impl std::str::FromStr for LossVariant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "cdr" => Ok(LossVariant::Cdr),
            "naive" => Ok(LossVariant::Naive),
            "same-domain" | "same_domain" => Ok(LossVariant::SameDomain),
            other => Err(format!("unknown loss `{other}` (expected cdr, naive, same-domain)")),
        }
    }
}

impl std::str::FromStr for SimilarityKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "dot_exp" => Ok(SimilarityKind::DotExp),
            "bilinear" => Ok(SimilarityKind::Bilinear),
            "neg_l2" => Ok(SimilarityKind::NegL2),
            "cosine" => Ok(SimilarityKind::Cosine),
            other => Err(format!("unknown similarity `{other}`")),
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (na2, nb2) = (dot(a, a), dot(b, b));
    if na2 == 0.0 || nb2 == 0.0 {
        0.0
    } else {
        dot(a, b) / (na2 * nb2).sqrt()
    }
}

/// The raw score `log h(z, y)`: the exponent of the similarity.
pub fn raw_score(kind: SimilarityKind, z: &[f64], y: &[f64], bilinear: Option<&[f64]>) -> Result<f64> {
    if z.len() != y.len() {
        return Err(ContrastiveError::Mismatch {
            what: "latent dimension",
            expected: z.len(),
            got: y.len(),
        });
    }
    let d = z.len();
    Ok(match kind {
        SimilarityKind::DotExp => dot(z, y),
        SimilarityKind::Bilinear => {
            let w = bilinear
                .filter(|w| w.len() == d * d)
                .ok_or(ContrastiveError::MissingBilinear(d))?;
            (0..d)
                .map(|i| z[i] * (0..d).map(|j| w[i * d + j] * y[j]).sum::<f64>())
                .sum()
        }
        SimilarityKind::NegL2 => -z.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>(),
        SimilarityKind::Cosine => cosine(z, y),
    })
}

/// N×N positive scores, held as their logarithms so large exponents stay finite.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMatrix {
    n: usize,
    log_scores: Vec<f64>,
}

impl ScoreMatrix {
    /// From positive, finite scores in row-major order.
    pub fn from_scores(n: usize, scores: &[f64]) -> Result<Self> {
        if let Some(bad) = scores.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            return Err(ContrastiveError::InvalidScores(format!("entry {bad}")));
        }
        Self::from_log_scores(n, scores.iter().map(|s| s.ln()).collect())
    }

    pub fn from_log_scores(n: usize, log_scores: Vec<f64>) -> Result<Self> {
        if n == 0 || log_scores.len() != n * n {
            return Err(ContrastiveError::InvalidScores(format!(
                "{} entries for N = {n}",
                log_scores.len()
            )));
        }
        if log_scores.iter().any(|s| !s.is_finite()) {
            return Err(ContrastiveError::InvalidScores("non-finite log score".into()));
        }
        Ok(Self { n, log_scores })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn score(&self, i: usize, j: usize) -> f64 {
        self.log_scores[i * self.n + j].exp()
    }

    pub fn log_score(&self, i: usize, j: usize) -> f64 {
        self.log_scores[i * self.n + j]
    }

    /// Each row divided by its largest entry; the InfoNCE ratios are unchanged.
    pub fn stabilized(&self) -> Vec<f64> {
        self.log_scores
            .chunks(self.n)
            .flat_map(|row| {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                row.iter().map(move |v| (v - max).exp())
            })
            .collect()
    }
}

/// Entry `(i, j)` scores prediction `i` against label `j`.
pub fn similarity_matrix(
    preds: &[Vec<f64>],
    labels: &[Vec<f64>],
    kind: SimilarityKind,
    bilinear: Option<&[f64]>,
) -> Result<ScoreMatrix> {
    if preds.len() != labels.len() {
        return Err(ContrastiveError::Mismatch {
            what: "label count",
            expected: preds.len(),
            got: labels.len(),
        });
    }
    let mut log_scores = Vec::with_capacity(preds.len() * labels.len());
    for p in preds {
        for l in labels {
            log_scores.push(raw_score(kind, p, l, bilinear)?);
        }
    }
    ScoreMatrix::from_log_scores(preds.len(), log_scores)
}

/// Mean over rows of `−log(S_ii / Σ_j S_ij)`.
pub fn info_nce(scores: &ScoreMatrix) -> f64 {
    let n = scores.n;
    let total: f64 = scores
        .log_scores
        .chunks(n)
        .enumerate()
        .map(|(i, row)| {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            lse - row[i]
        })
        .sum();
    total / n as f64
}

pub fn mi_lower_bound(loss: f64, n: usize) -> f64 {
    (n as f64).ln() - loss
}

/// Labels encoded from observations re-rendered under independently drawn domains.
pub fn cdr_loss(preds: &[Vec<f64>], labels: &[Vec<f64>], kind: SimilarityKind, bilinear: Option<&[f64]>) -> Result<f64> {
    Ok(info_nce(&similarity_matrix(preds, labels, kind, bilinear)?))
}

/// Labels encoded from observations sharing each prediction's own domain.
pub fn naive_dr_loss(
    preds: &[Vec<f64>],
    labels: &[Vec<f64>],
    kind: SimilarityKind,
    bilinear: Option<&[f64]>,
) -> Result<f64> {
    Ok(info_nce(&similarity_matrix(preds, labels, kind, bilinear)?))
}

/// Checks that every batch item was rendered under the first item's domain.
pub fn check_same_domain(domains: &[&DomainParams]) -> Result<()> {
    match domains.iter().position(|d| *d != domains[0]) {
        Some(index) => Err(ContrastiveError::MixedDomains { index }),
        None => Ok(()),
    }
}

/// InfoNCE over a batch whose items all share one domain.
pub fn same_domain_loss(
    preds: &[Vec<f64>],
    labels: &[Vec<f64>],
    domains: &[&DomainParams],
    kind: SimilarityKind,
    bilinear: Option<&[f64]>,
) -> Result<f64> {
    if domains.len() != preds.len() {
        return Err(ContrastiveError::Mismatch {
            what: "domain count",
            expected: preds.len(),
            got: domains.len(),
        });
    }
    check_same_domain(domains)?;
    Ok(info_nce(&similarity_matrix(preds, labels, kind, bilinear)?))
}

/// Mean over horizons of the per-horizon InfoNCE. `preds[k]` and `labels[k]`
/// hold the N predictions and labels for horizon `k + 1`.
pub fn cdr_uncontrolled_loss(
    preds: &[Vec<Vec<f64>>],
    labels: &[Vec<Vec<f64>>],
    kind: SimilarityKind,
    bilinear: Option<&[f64]>,
) -> Result<f64> {
    if preds.len() != labels.len() || preds.is_empty() {
        return Err(ContrastiveError::Mismatch {
            what: "horizon count",
            expected: preds.len(),
            got: labels.len(),
        });
    }
    let mut total = 0.0;
    for (p, l) in preds.iter().zip(labels) {
        total += cdr_loss(p, l, kind, bilinear)?;
    }
    Ok(total / preds.len() as f64)
}

/// `[N, N]` matrix of raw scores between prediction rows and label rows.
pub fn graph_logits(g: &mut Graph, preds: Var, labels: Var, kind: SimilarityKind) -> Result<Var> {
    let (ps, ls) = (g.shape(preds).to_vec(), g.shape(labels).to_vec());
    if ps != ls || ps.len() != 2 {
        return Err(ContrastiveError::Mismatch {
            what: "label rows",
            expected: ps.first().copied().unwrap_or(0),
            got: ls.first().copied().unwrap_or(0),
        });
    }
    let n = ps[0];
    Ok(match kind {
        SimilarityKind::DotExp => g.matmul_t(preds, labels)?,
        SimilarityKind::Bilinear => {
            let w = g.param(SimilarityKind::BILINEAR_PARAM)?;
            let pw = g.matmul(preds, w)?;
            g.matmul_t(pw, labels)?
        }
        SimilarityKind::NegL2 => {
            // −‖p‖² − ‖l‖² + 2 pᵀl
            let cross = g.matmul_t(preds, labels)?;
            let cross = g.scale(cross, 2.0)?;
            let pn = g.row_norm(preds)?;
            let pn2 = g.mul(pn, pn)?;
            let ln = g.row_norm(labels)?;
            let ln2 = g.mul(ln, ln)?;
            let ln2 = g.reshape(ln2, &[n])?;
            let neg_p = g.scale(pn2, -1.0)?;
            let neg_l = g.scale(ln2, -1.0)?;
            let out = g.add_col(cross, neg_p)?;
            g.add_bias(out, neg_l)?
        }
        SimilarityKind::Cosine => {
            let pn = g.row_norm(preds)?;
            let pn = g.add_scalar(pn, COSINE_EPS)?;
            let pu = g.div_col(preds, pn)?;
            let ln = g.row_norm(labels)?;
            let ln = g.add_scalar(ln, COSINE_EPS)?;
            let lu = g.div_col(labels, ln)?;
            g.matmul_t(pu, lu)?
        }
    })
}

/// Keeps cosine logits differentiable at the zero vector.
pub const COSINE_EPS: f64 = 1e-12;

/// InfoNCE of a logits matrix: softmax cross-entropy with diagonal targets.
pub fn graph_info_nce(g: &mut Graph, logits: Var) -> Result<Var> {
    let n = g.shape(logits)[0];
    let targets: Vec<usize> = (0..n).collect();
    Ok(g.softmax_xent_rows(logits, &targets)?)
}
