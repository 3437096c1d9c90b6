use cafct_core::objective::{aggregate_metrics, confusion_counts, metrics_from_counts, Aggregation, ConfusionCounts};
use cafct_core::Tensor;
use proptest::prelude::*;

fn counts() -> impl Strategy<Value = ConfusionCounts> {
    (0u64..500, 0u64..500, 0u64..500, 0u64..500).prop_map(|(tp, fp, fn_, tn)| ConfusionCounts { tp, fp, fn_, tn })
}

fn mask(bits: &[bool], side: usize) -> Tensor {
    Tensor::new(&[1, side, side], bits.iter().map(|&b| b as u8 as f64).collect()).unwrap()
}

proptest! {
    #[test]
    fn dice_is_a_function_of_iou(c in counts()) {
        let m = metrics_from_counts(c);
        prop_assert!((m.dice - 2.0 * m.iou / (1.0 + m.iou)).abs() < 1e-12);
    }

    #[test]
    fn metrics_lie_in_unit_interval(c in counts()) {
        let m = metrics_from_counts(c);
        for v in [m.iou, m.dice, m.accuracy, m.precision, m.sensitivity, m.specificity] {
            prop_assert!((0.0..=1.0).contains(&v), "{v}");
        }
    }

    #[test]
    fn sensitivity_and_miss_rate_sum_to_one(c in counts()) {
        prop_assume!(c.tp + c.fn_ > 0);
        let miss = c.fn_ as f64 / (c.tp + c.fn_) as f64;
        prop_assert!((metrics_from_counts(c).sensitivity + miss - 1.0).abs() < 1e-12);
    }

    #[test]
    fn complementing_both_maps_swaps_counts(
        bits in proptest::collection::vec((any::<bool>(), any::<bool>()), 64)
    ) {
        let pred: Vec<bool> = bits.iter().map(|b| b.0).collect();
        let target: Vec<bool> = bits.iter().map(|b| b.1).collect();
        let not = |v: &[bool]| v.iter().map(|b| !b).collect::<Vec<_>>();
        let c = confusion_counts(&mask(&pred, 8), &mask(&target, 8)).unwrap();
        let d = confusion_counts(&mask(&not(&pred), 8), &mask(&not(&target), 8)).unwrap();
        prop_assert_eq!((c.tp, c.fp, c.fn_, c.tn), (d.tn, d.fn_, d.fp, d.tp));
        prop_assert_eq!(c.total(), 64);
    }

    #[test]
    fn global_aggregation_sums_counts(cs in proptest::collection::vec(counts(), 1..10)) {
        let global = aggregate_metrics(&cs, Aggregation::Global).unwrap();
        let summed: ConfusionCounts = cs.iter().copied().sum();
        prop_assert_eq!(global.counts, summed);
        prop_assert_eq!(global.iou, metrics_from_counts(summed).iou);
        let mean = aggregate_metrics(&cs, Aggregation::PerImageMean).unwrap();
        let by_hand = cs.iter().map(|&c| metrics_from_counts(c).dice).sum::<f64>() / cs.len() as f64;
        prop_assert!((mean.dice - by_hand).abs() < 1e-12);
    }
}

#[test]
fn empty_list_cannot_be_aggregated() {
    assert!(aggregate_metrics(&[], Aggregation::Global).is_err());
}
