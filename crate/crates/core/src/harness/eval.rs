//! Evaluation and single-image inference.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::model::Cafct;
use crate::numerics::{sigmoid_scalar, Tensor};
use crate::objective::{
    aggregate_metrics, confusion_counts, metrics_from_counts, threshold_logits, Aggregation, ConfusionCounts,
    MetricsReport,
};

use super::data::{stack, SegSample};
use super::pgm::Gray8;
use super::train::check_dataset;

/// Images per eval-mode forward.
const EVAL_BATCH: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub per_image: Vec<(String, ConfusionCounts)>,
    pub per_image_mean: MetricsReport,
    pub global: MetricsReport,
}

impl Evaluation {
    /// Score binary predictions against targets, one pair per id.
    pub fn from_masks(items: &[(String, Tensor, Tensor)]) -> Result<Self> {
        let per_image = items
            .iter()
            .map(|(id, pred, target)| Ok((id.clone(), confusion_counts(pred, target)?)))
            .collect::<Result<Vec<_>>>()?;
        Self::from_counts(per_image)
    }

    pub fn from_counts(per_image: Vec<(String, ConfusionCounts)>) -> Result<Self> {
        let counts: Vec<ConfusionCounts> = per_image.iter().map(|(_, c)| *c).collect();
        Ok(Evaluation {
            per_image_mean: aggregate_metrics(&counts, Aggregation::PerImageMean)?,
            global: aggregate_metrics(&counts, Aggregation::Global)?,
            per_image,
        })
    }

    /// Per-image lines, then the per-image-mean and global blocks.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (id, c) in &self.per_image {
            let m = metrics_from_counts(*c);
            let _ = writeln!(
                out,
                "image={id} tp={} fp={} fn={} tn={} iou={:.6} dice={:.6}",
                c.tp, c.fp, c.fn_, c.tn, m.iou, m.dice
            );
        }
        out.push_str(&self.per_image_mean.to_string());
        out.push_str(&self.global.to_string());
        out
    }

    /// The two metric blocks only.
    pub fn summary(&self) -> String {
        format!("{}{}", self.per_image_mean, self.global)
    }
}

/// Eval-mode predictions (threshold 0.5) scored against every sample.
pub fn evaluate(model: &Cafct, data: &[SegSample]) -> Result<Evaluation> {
    check_dataset(model, data)?;
    let mut per_image = Vec::with_capacity(data.len());
    for chunk in data.chunks(EVAL_BATCH) {
        let refs: Vec<&SegSample> = chunk.iter().collect();
        let (images, masks) = stack(&refs)?;
        let pred = threshold_logits(&model.predict(&images)?);
        for (i, s) in chunk.iter().enumerate() {
            per_image.push((s.id.clone(), confusion_counts(&pred.sample(i)?, &masks.sample(i)?)?));
        }
    }
    Evaluation::from_counts(per_image)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Inference {
    /// 0 / 255 mask.
    pub mask: Gray8,
    /// `round(255 p)`, nudged so that `byte >= 128` exactly on mask pixels.
    pub probability: Gray8,
}

/// Predict one `[1, S, S]` image.
pub fn infer_image(model: &Cafct, image: &Tensor) -> Result<Inference> {
    let s = model.config.encoder.input_size;
    if image.shape() != [1, s, s] {
        return Err(Error::shape(format!(
            "image is {:?} but the checkpoint expects [1, {s}, {s}]",
            image.shape()
        )));
    }
    let logits = model.predict(&image.reshape(&[1, 1, s, s])?)?;
    let mut mask = Vec::with_capacity(s * s);
    let mut probability = Vec::with_capacity(s * s);
    for &z in logits.data() {
        let byte = (sigmoid_scalar(z) * 255.0).round() as u8;
        if z >= 0.0 {
            mask.push(255);
            probability.push(byte.max(128));
        } else {
            mask.push(0);
            probability.push(byte.min(127));
        }
    }
    Ok(Inference {
        mask: Gray8 { width: s, height: s, pixels: mask },
        probability: Gray8 { width: s, height: s, pixels: probability },
    })
}
