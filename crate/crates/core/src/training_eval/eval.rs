use mixar_autodiff::Tensor;

use crate::discrete_generator::DiscreteArModel;
use crate::error::Result;
use crate::tokenizers::Tokenizers;
use crate::toy_data::ImageBatch;

use super::config::GenerateConfig;
use super::frechet::frechet_surrogate;
use super::generate::{generate_images, Generated};
use super::model::MixarModel;
use super::probe::Probe;

/// `per_class` copies of every class id, class-major.
pub fn balanced_classes(n_classes: usize, per_class: usize) -> Vec<usize> {
    (0..n_classes).flat_map(|c| std::iter::repeat_n(c, per_class)).collect()
}

/// Probe features of a fixed real reference set, reused across evaluations.
#[derive(Debug, Clone)]
pub struct Evaluator {
    pub probe: Probe,
    pub real_features: Tensor<f64>,
}

#[derive(Debug, Clone)]
pub struct SampleScores {
    pub frechet: f64,
    pub probe_accuracy: f64,
}

impl Evaluator {
    pub fn new(probe: Probe, reference: &ImageBatch) -> Result<Self> {
        let real_features = probe.features(reference)?;
        Ok(Self { probe, real_features })
    }

    pub fn score(&self, images: &ImageBatch) -> Result<SampleScores> {
        Ok(SampleScores {
            frechet: frechet_surrogate(&self.real_features, &self.probe.features(images)?)?,
            probe_accuracy: self.probe.accuracy(images)?,
        })
    }

    /// Generates `per_class` images of every class and scores them.
    pub fn sample_and_score(
        &self,
        generator: Option<&DiscreteArModel>,
        model: &MixarModel,
        tokenizers: &Tokenizers,
        per_class: usize,
        cfg: &GenerateConfig,
    ) -> Result<(Generated, SampleScores)> {
        let classes = balanced_classes(model.cfg.backbone.n_classes, per_class);
        let out = generate_images(generator, model, tokenizers, &classes, cfg)?;
        let scores = self.score(&out.images)?;
        Ok((out, scores))
    }
}
