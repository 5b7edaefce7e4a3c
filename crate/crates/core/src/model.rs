//! The full trainable head: fusion stack followed by region-text scoring.

use ndarray::{Array2, ArrayView2, ArrayViewD, ArrayViewMutD};

use crate::alignment::{
    focal_loss_with_grad, matching_scores_backward, matching_scores_traced, AlignmentConfig, AlignmentParameters,
    MatchingScores, RegionTargets,
};
use crate::fusion::{
    fusion_backward, fusion_forward_traced, init_fusion_parameters, FusionConfig, FusionParameters, FusionTrace,
};
use crate::ops::{lit, Real};
use crate::params::{join, Tensors};
use crate::{Error, Result};

/// Every trainable tensor in the system.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParameters<T> {
    pub fusion: FusionParameters<T>,
    pub alignment: AlignmentParameters<T>,
}

impl<T: Real> ModelParameters<T> {
    pub fn init(
        fusion: &FusionConfig,
        alignment: &AlignmentConfig,
        d_loc: usize,
        d_vil: usize,
        seed: u64,
    ) -> Result<Self> {
        alignment.validate()?;
        Ok(ModelParameters {
            fusion: init_fusion_parameters(fusion, d_loc, d_vil, seed)?,
            alignment: AlignmentParameters::new(alignment.temperature_init),
        })
    }

    pub fn zeros(fusion: &FusionConfig, d_loc: usize, d_vil: usize) -> Self {
        ModelParameters {
            fusion: FusionParameters::zeros(fusion, d_loc, d_vil),
            alignment: AlignmentParameters::zeros(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        crate::params::fill(&mut z, T::zero());
        z
    }

    pub fn cast<U: Real>(&self) -> ModelParameters<U> {
        ModelParameters {
            fusion: self.fusion.cast(),
            alignment: self.alignment.cast(),
        }
    }
}

impl<T: Real> Tensors<T> for ModelParameters<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, ArrayViewD<'a, T>)>) {
        self.fusion.collect(&join(prefix, "fusion"), out);
        self.alignment.collect(&join(prefix, "alignment"), out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, ArrayViewMutD<'a, T>)>) {
        self.fusion.collect_mut(&join(prefix, "fusion"), out);
        self.alignment.collect_mut(&join(prefix, "alignment"), out);
    }
}

/// Encoder outputs and labels of one image.
#[derive(Clone, Debug)]
pub struct RegionExample<T> {
    /// `(N, d_loc)`.
    pub position_tokens: Array2<T>,
    /// `(M or M + 1, d_vil)`; carries the class-token row when enabled.
    pub memory: Array2<T>,
    /// Index into the text table per region; `None` marks background.
    pub labels: Vec<Option<usize>>,
}

pub struct LossOutput<T> {
    pub loss: T,
    pub grad: ModelParameters<T>,
    pub regions: usize,
}

/// Logits for one image together with the fusion trace.
pub fn region_scores<T: Real>(
    params: &ModelParameters<T>,
    fusion: &FusionConfig,
    position_tokens: ArrayView2<T>,
    memory: ArrayView2<T>,
    text: ArrayView2<T>,
) -> Result<(MatchingScores<T>, FusionTrace<T>)> {
    let (tokens, trace) = fusion_forward_traced(&params.fusion, fusion, position_tokens, memory)?;
    let (scores, _) = matching_scores_traced(tokens.view(), text, params.alignment.temperature())?;
    Ok((scores, trace))
}

fn check_examples<T: Real>(examples: &[RegionExample<T>]) -> Result<usize> {
    let mut regions = 0;
    for (i, ex) in examples.iter().enumerate() {
        if ex.labels.len() != ex.position_tokens.nrows() {
            return Err(Error::shape(
                format!("labels of example {i}"),
                ex.position_tokens.nrows(),
                ex.labels.len(),
            ));
        }
        regions += ex.labels.len();
    }
    Ok(regions)
}

/// Focal loss averaged over every (region, category) element of the batch,
/// with gradients for all trainable tensors. The temperature gradient is left
/// at zero when the temperature is frozen.
pub fn loss_and_grad<T: Real>(
    params: &ModelParameters<T>,
    fusion: &FusionConfig,
    alignment: &AlignmentConfig,
    examples: &[RegionExample<T>],
    text: ArrayView2<T>,
) -> Result<LossOutput<T>> {
    let regions = check_examples(examples)?;
    let total = regions * text.nrows();
    let mut grad = params.zeros_like();
    let mut loss = T::zero();
    if total == 0 {
        return Ok(LossOutput { loss, grad, regions });
    }
    let temperature = params.alignment.temperature();
    for ex in examples.iter().filter(|ex| !ex.labels.is_empty()) {
        let (tokens, trace) =
            fusion_forward_traced(&params.fusion, fusion, ex.position_tokens.view(), ex.memory.view())?;
        let (scores, cache) = matching_scores_traced(tokens.view(), text, temperature)?;
        let targets = RegionTargets::from_labels(&ex.labels, text.nrows())?;
        let (fl, d_logits) = focal_loss_with_grad(&scores, &targets, alignment.alpha, alignment.gamma)?;
        let weight = lit::<T>(scores.logits.len() as f64 / total as f64);
        loss += fl.value * weight;
        let d_logits = d_logits * weight;
        let (d_tokens, d_temperature) = matching_scores_backward(&cache, temperature, d_logits.view());
        if alignment.learn_temperature {
            grad.alignment.log_temperature[0] += d_temperature * temperature;
        }
        fusion_backward(&params.fusion, &trace, d_tokens.view(), &mut grad.fusion);
    }
    Ok(LossOutput { loss, grad, regions })
}

/// Forward-only version of [`loss_and_grad`].
pub fn batch_loss<T: Real>(
    params: &ModelParameters<T>,
    fusion: &FusionConfig,
    alignment: &AlignmentConfig,
    examples: &[RegionExample<T>],
    text: ArrayView2<T>,
) -> Result<T> {
    let regions = check_examples(examples)?;
    let total = regions * text.nrows();
    let mut loss = T::zero();
    for ex in examples.iter().filter(|ex| !ex.labels.is_empty()) {
        let (scores, _) = region_scores(params, fusion, ex.position_tokens.view(), ex.memory.view(), text)?;
        let targets = RegionTargets::from_labels(&ex.labels, text.nrows())?;
        let (fl, _) = focal_loss_with_grad(&scores, &targets, alignment.alpha, alignment.gamma)?;
        loss += fl.value * lit::<T>(scores.logits.len() as f64 / total as f64);
    }
    Ok(loss)
}
