//! Region-text matching and the focal-loss objective.
//!
//! Scores are per-class sigmoid logits: `logit[i][k] = t * <s_i / |s_i|, e_k>`
//! with unit-norm text rows `e_k` and a learnable temperature `t` stored as
//! its logarithm. Supervision is the binary focal loss
//! `-alpha_t (1 - p_t)^gamma log(p_t)`, averaged over all `N * K` elements.

use ndarray::{Array1, Array2, ArrayView2, ArrayViewD, ArrayViewMutD, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::encoders::TextEmbeddingTable;
use crate::fusion::RegionSemanticTokens;
use crate::ops::{cast_scalar, lit, sigmoid, softplus, Real};
use crate::params::{join, Tensors};
use crate::{Error, Result};

const NORM_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlignmentConfig {
    pub temperature_init: f64,
    pub learn_temperature: bool,
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        AlignmentConfig {
            temperature_init: 14.3,
            learn_temperature: true,
            alpha: 0.25,
            gamma: 2.0,
        }
    }
}

impl AlignmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature_init.is_finite() && self.temperature_init > 0.0) {
            return Err(Error::config("alignment.temperature_init", "must be positive"));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::config("alignment.alpha", "must lie in (0, 1)"));
        }
        if !(self.gamma.is_finite() && self.gamma >= 0.0) {
            return Err(Error::config("alignment.gamma", "must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentParameters<T> {
    /// Single-element array holding `ln(temperature)`.
    pub log_temperature: Array1<T>,
}

impl<T: Real> AlignmentParameters<T> {
    pub fn new(temperature: f64) -> Self {
        AlignmentParameters {
            log_temperature: Array1::from_elem(1, lit(temperature.ln())),
        }
    }

    pub fn zeros() -> Self {
        AlignmentParameters {
            log_temperature: Array1::zeros(1),
        }
    }

    pub fn temperature(&self) -> T {
        self.log_temperature[0].exp()
    }

    pub fn cast<U: Real>(&self) -> AlignmentParameters<U> {
        AlignmentParameters {
            log_temperature: self.log_temperature.mapv(cast_scalar),
        }
    }
}

impl<T: Real> Tensors<T> for AlignmentParameters<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, ArrayViewD<'a, T>)>) {
        out.push((join(prefix, "log_temperature"), self.log_temperature.view().into_dyn()));
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, ArrayViewMutD<'a, T>)>) {
        out.push((
            join(prefix, "log_temperature"),
            self.log_temperature.view_mut().into_dyn(),
        ));
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchingScores<T> {
    /// `(N, K)`.
    pub logits: Array2<T>,
    pub temperature: T,
}

#[derive(Clone, Debug)]
pub struct MatchingCache<T> {
    normalized: Array2<T>,
    norms: Array1<T>,
    embeddings: Array2<T>,
    cosines: Array2<T>,
}

pub fn matching_scores_traced<T: Real>(
    tokens: ArrayView2<T>,
    embeddings: ArrayView2<T>,
    temperature: T,
) -> Result<(MatchingScores<T>, MatchingCache<T>)> {
    if tokens.ncols() != embeddings.ncols() {
        return Err(Error::shape(
            "matching scores (token dim vs text dim)",
            embeddings.ncols(),
            tokens.ncols(),
        ));
    }
    let floor = lit::<T>(NORM_FLOOR);
    let norms = tokens.map_axis(Axis(1), |r| r.dot(&r).sqrt().max(floor));
    let normalized = &tokens / &norms.view().insert_axis(Axis(1));
    let cosines = normalized.dot(&embeddings.t());
    let logits = &cosines * temperature;
    if !logits.iter().all(|v| v.is_finite()) {
        return Err(Error::Numerical("non-finite matching scores".into()));
    }
    Ok((
        MatchingScores { logits, temperature },
        MatchingCache {
            normalized,
            norms,
            embeddings: embeddings.to_owned(),
            cosines,
        },
    ))
}

/// Returns `(dL/d tokens, dL/d temperature)`.
pub fn matching_scores_backward<T: Real>(
    cache: &MatchingCache<T>,
    temperature: T,
    d_logits: ArrayView2<T>,
) -> (Array2<T>, T) {
    let d_temperature = (&d_logits * &cache.cosines).sum();
    let d_normalized = d_logits.dot(&cache.embeddings) * temperature;
    let mut d_tokens = Array2::zeros(d_normalized.raw_dim());
    for i in 0..d_tokens.nrows() {
        let n = cache.normalized.row(i);
        let dn = d_normalized.row(i);
        let radial = n.dot(&dn);
        let inv = T::one() / cache.norms[i];
        Zip::from(d_tokens.row_mut(i))
            .and(&n)
            .and(&dn)
            .for_each(|o, &nv, &dv| *o = (dv - nv * radial) * inv);
    }
    (d_tokens, d_temperature)
}

pub fn matching_scores<T: Real>(
    tokens: &RegionSemanticTokens<T>,
    table: &TextEmbeddingTable,
    temperature: T,
) -> Result<MatchingScores<T>> {
    let embeddings = table.embeddings.mapv(|v| T::from_f32(v).expect("f32 fits"));
    Ok(matching_scores_traced(tokens.tokens.view(), embeddings.view(), temperature)?.0)
}

/// Multi-hot `(N, K)` targets. All-zero rows are background regions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RegionTargets {
    positives: Array2<bool>,
}

impl RegionTargets {
    /// One optional positive category per region.
    pub fn from_labels(labels: &[Option<usize>], num_categories: usize) -> Result<Self> {
        let mut positives = Array2::from_elem((labels.len(), num_categories), false);
        for (i, label) in labels.iter().enumerate() {
            if let Some(k) = *label {
                if k >= num_categories {
                    return Err(Error::Range {
                        what: "target category",
                        index: k,
                        limit: num_categories,
                    });
                }
                positives[[i, k]] = true;
            }
        }
        Ok(RegionTargets { positives })
    }

    pub fn from_multi_hot(matrix: ArrayView2<u8>) -> Result<Self> {
        if let Some(v) = matrix.iter().find(|&&v| v > 1) {
            return Err(Error::InvalidInput(format!("target entry {v} is not 0 or 1")));
        }
        Ok(RegionTargets {
            positives: matrix.mapv(|v| v == 1),
        })
    }

    pub fn dim(&self) -> (usize, usize) {
        self.positives.dim()
    }

    pub fn is_positive(&self, region: usize, category: usize) -> bool {
        self.positives[[region, category]]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FocalLoss<T> {
    pub value: T,
    /// Set when there were no elements to average over; `value` is then 0.
    pub empty: bool,
}

/// Loss and `dL/dz` of one sigmoid focal-loss element.
pub fn focal_element<T: Real>(logit: T, positive: bool, alpha: T, gamma: T) -> (T, T) {
    let (zt, alpha_t) = if positive {
        (logit, alpha)
    } else {
        (-logit, T::one() - alpha)
    };
    let log_pt = -softplus(-zt);
    let pt = sigmoid(zt);
    let q = sigmoid(-zt);
    let modulator = q.powf(gamma);
    let loss = -alpha_t * modulator * log_pt;
    let d_zt = alpha_t * modulator * (gamma * pt * log_pt - q);
    (loss, if positive { d_zt } else { -d_zt })
}

fn check_focal_args<T: Real>(logits: &Array2<T>, targets: &RegionTargets, alpha: f64, gamma: f64) -> Result<()> {
    if logits.dim() != targets.dim() {
        return Err(Error::shape(
            "focal loss targets",
            format!("{:?}", logits.dim()),
            format!("{:?}", targets.dim()),
        ));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidInput(format!("focal alpha {alpha} not in (0, 1)")));
    }
    if gamma.is_nan() || gamma < 0.0 {
        return Err(Error::InvalidInput(format!("focal gamma {gamma} is negative")));
    }
    Ok(())
}

/// Mean focal loss and its gradient with respect to the logits.
pub fn focal_loss_with_grad<T: Real>(
    scores: &MatchingScores<T>,
    targets: &RegionTargets,
    alpha: f64,
    gamma: f64,
) -> Result<(FocalLoss<T>, Array2<T>)> {
    check_focal_args(&scores.logits, targets, alpha, gamma)?;
    let count = scores.logits.len();
    let mut grad = Array2::zeros(scores.logits.raw_dim());
    if count == 0 {
        return Ok((
            FocalLoss {
                value: T::zero(),
                empty: true,
            },
            grad,
        ));
    }
    let (a, g) = (lit::<T>(alpha), lit::<T>(gamma));
    let scale = T::one() / lit::<T>(count as f64);
    let mut total = T::zero();
    Zip::indexed(&scores.logits).and(&mut grad).for_each(|(i, k), &z, d| {
        let (l, dz) = focal_element(z, targets.is_positive(i, k), a, g);
        total += l;
        *d = dz * scale;
    });
    Ok((
        FocalLoss {
            value: total * scale,
            empty: false,
        },
        grad,
    ))
}

pub fn focal_loss<T: Real>(
    scores: &MatchingScores<T>,
    targets: &RegionTargets,
    alpha: f64,
    gamma: f64,
) -> Result<FocalLoss<T>> {
    Ok(focal_loss_with_grad(scores, targets, alpha, gamma)?.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredLabel {
    pub category: String,
    pub score: f64,
    #[serde(skip)]
    pub index: usize,
}

/// Category indices of one row ranked by descending logit, ties broken by
/// ascending index.
pub fn rank_row<T: Real>(row: ndarray::ArrayView1<T>) -> Vec<usize> {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| {
        row[b]
            .partial_cmp(&row[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
}

/// Top-`k` `(name, sigmoid probability)` per region.
pub fn predict_labels<T: Real>(
    scores: &MatchingScores<T>,
    names: &[String],
    top_k: usize,
) -> Result<Vec<Vec<ScoredLabel>>> {
    if names.len() != scores.logits.ncols() {
        return Err(Error::shape("category names", scores.logits.ncols(), names.len()));
    }
    let k = top_k.min(names.len());
    Ok(scores
        .logits
        .outer_iter()
        .map(|row| {
            rank_row(row)
                .into_iter()
                .take(k)
                .map(|c| ScoredLabel {
                    category: names[c].clone(),
                    score: sigmoid(row[c]).to_f64().expect("finite"),
                    index: c,
                })
                .collect()
        })
        .collect())
}
