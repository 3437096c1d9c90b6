//! BCE-Dice training loss and the overlap/confusion metrics.

use std::fmt;

use crate::error::{Error, Result};
use crate::numerics::{sigmoid_scalar, Tensor, Var};

pub const DICE_SMOOTH: f64 = 1.0;

fn check_target(logits: &Tensor, target: &Tensor) -> Result<()> {
    if logits.shape() != target.shape() {
        return Err(Error::shape(format!(
            "logits {:?} and target {:?} differ in shape",
            logits.shape(),
            target.shape()
        )));
    }
    check_binary(target, "target")
}

fn check_binary(t: &Tensor, what: &str) -> Result<()> {
    match t.data().iter().position(|&v| v != 0.0 && v != 1.0) {
        Some(i) => Err(Error::invalid(format!(
            "{what} is not binary: element {i} is {}",
            t.data()[i]
        ))),
        None => Ok(()),
    }
}

/// `max(z, 0) - z t + ln(1 + e^{-|z|})`, the stable form of
/// `-[t ln p + (1 - t) ln(1 - p)]` with `p = sigmoid(z)`.
fn bce_term(z: f64, t: f64) -> f64 {
    z.max(0.0) - z * t + (-z.abs()).exp().ln_1p()
}

/// Mean binary cross-entropy over every pixel.
pub fn bce_loss<'g>(logits: Var<'g>, target: &Tensor) -> Result<Var<'g>> {
    let z = logits.value();
    check_target(&z, target)?;
    let m = z.numel() as f64;
    let loss: f64 = z.data().iter().zip(target.data()).map(|(&a, &b)| bce_term(a, b)).sum::<f64>() / m;
    let (zc, t) = (z.clone(), target.clone());
    Ok(logits.graph().record(Tensor::scalar(loss), &[logits], move |g| {
        let scale = g.item() / m;
        vec![Some(zc.zip_map(&t, |a, b| (sigmoid_scalar(a) - b) * scale))]
    }))
}

/// Soft Dice loss `1 - (2 sum(p t) + s) / (sum p + sum t + s)`, summed over
/// the whole batch.
pub fn dice_loss<'g>(logits: Var<'g>, target: &Tensor) -> Result<Var<'g>> {
    let z = logits.value();
    check_target(&z, target)?;
    let p = z.map(sigmoid_scalar);
    let inter: f64 = p.data().iter().zip(target.data()).map(|(a, b)| a * b).sum();
    let denom = p.sum() + target.sum() + DICE_SMOOTH;
    let num = 2.0 * inter + DICE_SMOOTH;
    let t = target.clone();
    Ok(logits.graph().record(Tensor::scalar(1.0 - num / denom), &[logits], move |g| {
        let up = g.item();
        let d2 = denom * denom;
        let grad = p.zip_map(&t, |pi, ti| {
            let dp = -(2.0 * ti * denom - num) / d2;
            up * dp * pi * (1.0 - pi)
        });
        vec![Some(grad)]
    }))
}

/// `w_bce * bce + w_dice * dice`.
pub fn bce_dice_loss<'g>(logits: Var<'g>, target: &Tensor, w_bce: f64, w_dice: f64) -> Result<Var<'g>> {
    if w_bce < 0.0 || w_dice < 0.0 || !(w_bce > 0.0 || w_dice > 0.0) {
        return Err(Error::invalid(format!(
            "loss weights must be non-negative and not both zero, got bce={w_bce} dice={w_dice}"
        )));
    }
    let bce = bce_loss(logits, target)?.scale(w_bce);
    let dice = dice_loss(logits, target)?.scale(w_dice);
    bce.add(dice)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

impl std::ops::Add for ConfusionCounts {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        ConfusionCounts {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
        }
    }
}

impl std::iter::Sum for ConfusionCounts {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), |a, b| a + b)
    }
}

/// Pixel confusion counts of a binary prediction against a binary target.
pub fn confusion_counts(pred: &Tensor, target: &Tensor) -> Result<ConfusionCounts> {
    if pred.shape() != target.shape() {
        return Err(Error::shape(format!(
            "prediction {:?} and target {:?} differ in shape",
            pred.shape(),
            target.shape()
        )));
    }
    check_binary(pred, "prediction")?;
    check_binary(target, "target")?;
    let mut c = ConfusionCounts::default();
    for (&p, &t) in pred.data().iter().zip(target.data()) {
        match (p == 1.0, t == 1.0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

/// Binary mask from logits: 1 where `sigmoid(z) >= 0.5`, i.e. `z >= 0`.
pub fn threshold_logits(logits: &Tensor) -> Tensor {
    logits.map(|z| if z >= 0.0 { 1.0 } else { 0.0 })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Aggregation {
    PerImageMean,
    Global,
}

impl Aggregation {
    pub fn as_str(self) -> &'static str {
        match self {
            Aggregation::PerImageMean => "per_image_mean",
            Aggregation::Global => "global",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    /// Summed over all images in either aggregation mode.
    pub counts: ConfusionCounts,
    pub iou: f64,
    pub dice: f64,
    pub accuracy: f64,
    pub precision: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub aggregation: Aggregation,
}

/// `num / den`, or by convention 1 when `den == 0` and `other_empty`
/// (nothing to find and nothing claimed), else 0.
fn ratio(num: u64, den: u64, other_empty: bool) -> f64 {
    if den == 0 {
        if other_empty {
            1.0
        } else {
            0.0
        }
    } else {
        num as f64 / den as f64
    }
}

/// All derived metrics of one set of counts. A metric whose denominator is
/// empty is 1 if the complementary set is empty too, else 0.
pub fn metrics_from_counts(c: ConfusionCounts) -> MetricsReport {
    let (tp, fp, fn_, tn) = (c.tp, c.fp, c.fn_, c.tn);
    MetricsReport {
        counts: c,
        iou: ratio(tp, tp + fn_ + fp, true),
        dice: ratio(2 * tp, 2 * tp + fn_ + fp, true),
        accuracy: ratio(tp + tn, c.total(), true),
        precision: ratio(tp, tp + fp, fn_ == 0),
        sensitivity: ratio(tp, tp + fn_, fp == 0),
        specificity: ratio(tn, tn + fp, fn_ == 0),
        aggregation: Aggregation::Global,
    }
}

pub fn aggregate_metrics(per_image: &[ConfusionCounts], mode: Aggregation) -> Result<MetricsReport> {
    if per_image.is_empty() {
        return Err(Error::invalid("cannot aggregate metrics over zero images"));
    }
    let counts: ConfusionCounts = per_image.iter().copied().sum();
    match mode {
        Aggregation::Global => Ok(metrics_from_counts(counts)),
        Aggregation::PerImageMean => {
            let n = per_image.len() as f64;
            let all: Vec<MetricsReport> = per_image.iter().map(|&c| metrics_from_counts(c)).collect();
            let mean = |f: fn(&MetricsReport) -> f64| all.iter().map(f).sum::<f64>() / n;
            Ok(MetricsReport {
                counts,
                iou: mean(|m| m.iou),
                dice: mean(|m| m.dice),
                accuracy: mean(|m| m.accuracy),
                precision: mean(|m| m.precision),
                sensitivity: mean(|m| m.sensitivity),
                specificity: mean(|m| m.specificity),
                aggregation: Aggregation::PerImageMean,
            })
        }
    }
}

impl MetricsReport {
    /// `(key, value)` pairs in output order, values already formatted.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let c = &self.counts;
        vec![
            ("aggregation", self.aggregation.as_str().to_string()),
            ("tp", c.tp.to_string()),
            ("fp", c.fp.to_string()),
            ("fn", c.fn_.to_string()),
            ("tn", c.tn.to_string()),
            ("iou", format!("{:.6}", self.iou)),
            ("dice", format!("{:.6}", self.dice)),
            ("accuracy", format!("{:.6}", self.accuracy)),
            ("precision", format!("{:.6}", self.precision)),
            ("sensitivity", format!("{:.6}", self.sensitivity)),
            ("specificity", format!("{:.6}", self.specificity)),
        ]
    }
}

/// One `metric=value` line per entry.
impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in self.entries() {
            writeln!(f, "{k}={v}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{seeded_rng, Graph};

    fn loss_value(f: impl for<'g> Fn(Var<'g>, &Tensor) -> Result<Var<'g>>, z: &Tensor, t: &Tensor) -> f64 {
        let g = Graph::new();
        f(g.constant(z.clone()), t).unwrap().value().item()
    }

    #[test]
    fn bce_at_zero_logits_is_ln2() {
        let t = Tensor::new(&[1, 1, 2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let v = loss_value(bce_loss, &Tensor::zeros(&[1, 1, 2, 2]), &t);
        assert!((v - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn bce_matches_naive_form() {
        let mut rng = seeded_rng(3);
        let z = Tensor::randn(&[1, 1, 4, 4], 3.0, &mut rng);
        let t = Tensor::rand_uniform(&[1, 1, 4, 4], 0.0, 1.0, &mut rng).map(|v| v.round());
        let naive: f64 = z
            .data()
            .iter()
            .zip(t.data())
            .map(|(&a, &b)| {
                let p = sigmoid_scalar(a).clamp(1e-12, 1.0 - 1e-12);
                -(b * p.ln() + (1.0 - b) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / 16.0;
        assert!((loss_value(bce_loss, &z, &t) - naive).abs() < 1e-9);
    }

    #[test]
    fn dice_closed_forms() {
        let t = Tensor::new(&[1, 1, 2, 2], vec![1.0, 1.0, 0.0, 1.0]).unwrap();
        // Hard logits: sigmoid(+-50) is 1 or 0 to within 1e-21.
        let perfect = t.map(|v| if v == 1.0 { 50.0 } else { -50.0 });
        assert!(loss_value(dice_loss, &perfect, &t).abs() < 1e-9);
        let empty = Tensor::full(&[1, 1, 2, 2], -50.0);
        let m = 3.0;
        assert!((loss_value(dice_loss, &empty, &t) - m / (m + DICE_SMOOTH)).abs() < 1e-9);
    }

    #[test]
    fn non_binary_targets_and_zero_weights_rejected() {
        let g = Graph::new();
        let z = g.constant(Tensor::zeros(&[1, 1, 2, 2]));
        let bad = Tensor::full(&[1, 1, 2, 2], 0.5);
        assert!(bce_loss(z, &bad).is_err());
        assert!(dice_loss(z, &bad).is_err());
        assert!(bce_dice_loss(z, &Tensor::zeros(&[1, 1, 2, 2]), 0.0, 0.0).is_err());
    }

    #[test]
    fn worked_metrics_example() {
        let m = metrics_from_counts(ConfusionCounts { tp: 8, fp: 2, fn_: 2, tn: 88 });
        assert!((m.iou - 8.0 / 12.0).abs() < 1e-15);
        assert_eq!(m.dice, 0.8);
        assert_eq!(m.accuracy, 0.96);
    }

    #[test]
    fn empty_denominator_convention() {
        let all_neg = metrics_from_counts(ConfusionCounts { tp: 0, fp: 0, fn_: 0, tn: 10 });
        assert_eq!((all_neg.iou, all_neg.dice, all_neg.precision, all_neg.sensitivity), (1.0, 1.0, 1.0, 1.0));
        let missed = metrics_from_counts(ConfusionCounts { tp: 0, fp: 0, fn_: 3, tn: 7 });
        assert_eq!((missed.iou, missed.dice, missed.precision, missed.sensitivity), (0.0, 0.0, 0.0, 0.0));
        let all_pos = metrics_from_counts(ConfusionCounts { tp: 5, fp: 0, fn_: 0, tn: 0 });
        assert_eq!(all_pos.specificity, 1.0);
    }

    #[test]
    fn per_image_mean_averages() {
        let a = ConfusionCounts { tp: 1, fp: 1, fn_: 0, tn: 2 };
        let b = ConfusionCounts { tp: 2, fp: 0, fn_: 0, tn: 2 };
        let m = aggregate_metrics(&[a, b], Aggregation::PerImageMean).unwrap();
        assert!((m.iou - 0.75).abs() < 1e-15);
        assert!(aggregate_metrics(&[], Aggregation::Global).is_err());
    }

    #[test]
    fn report_lines() {
        let text = metrics_from_counts(ConfusionCounts { tp: 8, fp: 2, fn_: 2, tn: 88 }).to_string();
        assert!(text.contains("iou=0.666667\n"));
        assert!(text.contains("dice=0.800000\n"));
        assert!(text.starts_with("aggregation=global\n"));
    }
}
