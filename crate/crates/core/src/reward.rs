//! Verifiable rewards for detection and classification responses.
//!
//! Detection: predictions are sorted by confidence and greedily matched to
//! ground truth at an IoU threshold `tau`. With `n` predictions the reward is
//!
//! ```text
//! R_d    = R_iou + R_conf + R_format
//! R_iou  = (iou_1 + ... + iou_n) / n
//! R_conf = (r_c1 + ... + r_cn) / n,   r_ci = c_i if iou_i != 0 else 1 - c_i
//! ```
//!
//! Classification: `R_cls = R_acc + R_format`.

use serde::{Deserialize, Serialize};

use crate::grammar::{
    normalize_label, parse_classification_answer, parse_detection_answer, parse_response, BBox,
    DetectionAnswer, Prediction,
};

pub const DEFAULT_TAU: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RewardError {
    #[error("IoU threshold tau must lie in [0, 1), got {0}")]
    InvalidTau(f64),
    #[error("reward weight '{name}' must be finite and non-negative, got {value}")]
    InvalidWeight { name: &'static str, value: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthInstance {
    pub category: String,
    #[serde(rename = "box")]
    pub bbox: BBox,
}

impl GroundTruthInstance {
    pub fn new(category: impl Into<String>, bbox: BBox) -> Self {
        Self {
            category: category.into(),
            bbox,
        }
    }
}

/// Multipliers applied to each reward component before summing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardWeights {
    pub iou: f64,
    pub conf: f64,
    pub format: f64,
    pub acc: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self {
            iou: 1.0,
            conf: 1.0,
            format: 1.0,
            acc: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig {
    tau: f64,
    weights: RewardWeights,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            tau: DEFAULT_TAU,
            weights: RewardWeights::default(),
        }
    }
}

impl RewardConfig {
    pub fn new(tau: f64, weights: RewardWeights) -> Result<Self, RewardError> {
        if !(0.0..1.0).contains(&tau) {
            return Err(RewardError::InvalidTau(tau));
        }
        for (name, value) in [
            ("iou", weights.iou),
            ("conf", weights.conf),
            ("format", weights.format),
            ("acc", weights.acc),
        ] {
            if !value.is_finite() || value < 0.0 {
                return Err(RewardError::InvalidWeight { name, value });
            }
        }
        Ok(Self { tau, weights })
    }

    pub fn with_tau(tau: f64) -> Result<Self, RewardError> {
        Self::new(tau, RewardWeights::default())
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn weights(&self) -> &RewardWeights {
        &self.weights
    }
}

/// One prediction after matching, in confidence-sorted order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchedBox {
    /// Zero when unmatched, otherwise at least `tau`.
    pub iou: f64,
    pub confidence: f64,
    /// Index into the ground-truth list of the consumed box.
    pub gt_index: Option<usize>,
    /// Position of the prediction in the original emission order.
    pub pred_index: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MatchResult {
    pub pairs: Vec<MatchedBox>,
}

/// Per-component reward and the weighted total. Components that do not apply to
/// the task are `None`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RewardBreakdown {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub r_iou: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub r_conf: Option<f64>,
    pub r_format: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub r_acc: Option<f64>,
    pub total: f64,
}

impl RewardBreakdown {
    fn detection(r_iou: f64, r_conf: f64, r_format: f64, w: &RewardWeights) -> Self {
        Self {
            r_iou: Some(r_iou),
            r_conf: Some(r_conf),
            r_format,
            r_acc: None,
            total: w.iou * r_iou + w.conf * r_conf + w.format * r_format,
        }
    }

    fn classification(r_acc: f64, r_format: f64, w: &RewardWeights) -> Self {
        Self {
            r_iou: None,
            r_conf: None,
            r_format,
            r_acc: Some(r_acc),
            total: w.acc * r_acc + w.format * r_format,
        }
    }
}

/// Intersection over union computed with exact integer areas.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = i64::from(a.x2().min(b.x2()) - a.x1().max(b.x1()));
    let ih = i64::from(a.y2().min(b.y2()) - a.y1().max(b.y1()));
    if iw <= 0 || ih <= 0 {
        return 0.0;
    }
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    inter as f64 / union as f64
}

/// Greedy confidence-ordered matching. Each prediction takes the unconsumed
/// ground-truth box of highest IoU (lowest index on ties); it is unmatched when
/// that IoU is zero or below `tau`, in which case the box stays available.
pub fn match_predictions(
    preds: &[Prediction],
    gts: &[GroundTruthInstance],
    cfg: &RewardConfig,
) -> MatchResult {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    // stable: equal confidences keep emission order
    order.sort_by(|&a, &b| preds[b].confidence.total_cmp(&preds[a].confidence));

    let mut used = vec![false; gts.len()];
    let pairs = order
        .into_iter()
        .map(|pi| {
            let pred = &preds[pi];
            let mut best: Option<(usize, f64)> = None;
            for (gi, gt) in gts.iter().enumerate() {
                if used[gi] {
                    continue;
                }
                let v = iou(&pred.bbox, &gt.bbox);
                if best.is_none_or(|(_, b)| v > b) {
                    best = Some((gi, v));
                }
            }
            match best {
                Some((gi, v)) if v > 0.0 && v >= cfg.tau => {
                    used[gi] = true;
                    MatchedBox {
                        iou: v,
                        confidence: pred.confidence,
                        gt_index: Some(gi),
                        pred_index: pi,
                    }
                }
                _ => MatchedBox {
                    iou: 0.0,
                    confidence: pred.confidence,
                    gt_index: None,
                    pred_index: pi,
                },
            }
        })
        .collect();
    MatchResult { pairs }
}

/// Per-box confidence reward: `c` when matched, `1 - c` when not.
pub fn confidence_reward(iou: f64, confidence: f64) -> f64 {
    if iou != 0.0 {
        confidence
    } else {
        1.0 - confidence
    }
}

/// Reward for an already-parsed detection answer (format assumed valid).
pub fn score_detection_answer(
    answer: &DetectionAnswer,
    gts: &[GroundTruthInstance],
    cfg: &RewardConfig,
) -> RewardBreakdown {
    let w = &cfg.weights;
    let preds = match answer {
        DetectionAnswer::NoObjects => {
            let v = if gts.is_empty() { 1.0 } else { 0.0 };
            return RewardBreakdown::detection(v, v, 1.0, w);
        }
        DetectionAnswer::Boxes(p) => p,
    };
    let matched = match_predictions(preds, gts, cfg);
    let n = matched.pairs.len() as f64;
    let r_iou = matched.pairs.iter().map(|m| m.iou).sum::<f64>() / n;
    let r_conf = matched
        .pairs
        .iter()
        .map(|m| confidence_reward(m.iou, m.confidence))
        .sum::<f64>()
        / n;
    RewardBreakdown::detection(r_iou, r_conf, 1.0, w)
}

/// Scores a raw detection response. Format failures and unparseable payloads
/// score zero on every component.
pub fn detection_reward(
    response: &str,
    gts: &[GroundTruthInstance],
    cfg: &RewardConfig,
) -> RewardBreakdown {
    let parsed = parse_response(response);
    let answer = parsed.answer().and_then(|a| parse_detection_answer(a).ok());
    match answer {
        Some(answer) => score_detection_answer(&answer, gts, cfg),
        None => RewardBreakdown::detection(0.0, 0.0, 0.0, &cfg.weights),
    }
}

/// Scores a raw classification response against a ground-truth label. An empty
/// answer block counts as a format failure.
pub fn classification_reward(
    response: &str,
    gt_label: &str,
    cfg: &RewardConfig,
) -> RewardBreakdown {
    let parsed = parse_response(response);
    let label = parsed.answer().and_then(|a| parse_classification_answer(a).ok());
    match label {
        Some(label) => {
            let acc = verify_exact(label.as_str(), gt_label);
            RewardBreakdown::classification(acc, 1.0, &cfg.weights)
        }
        None => RewardBreakdown::classification(0.0, 0.0, &cfg.weights),
    }
}

/// Binary verification: 1 when the normalized strings are equal, else 0.
pub fn verify_exact(prediction: &str, ground_truth: &str) -> f64 {
    if normalize_label(prediction) == normalize_label(ground_truth) {
        1.0
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grammar::{format_response, serialize_detection_answer};

    fn bbox(x1: i64, y1: i64, x2: i64, y2: i64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    fn pred(b: BBox, c: f64) -> Prediction {
        Prediction::new(b, c).unwrap()
    }

    fn gt(b: BBox) -> GroundTruthInstance {
        GroundTruthInstance::new("obj", b)
    }

    fn det_response(preds: Vec<Prediction>) -> String {
        format_response("r", &serialize_detection_answer(&DetectionAnswer::Boxes(preds)))
    }

    #[test]
    fn iou_examples() {
        let a = bbox(0, 0, 100, 100);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &bbox(200, 200, 300, 300)), 0.0);
        assert_eq!(iou(&a, &bbox(100, 0, 200, 100)), 0.0);
        let v = iou(&bbox(0, 0, 10, 10), &bbox(5, 5, 15, 15));
        assert!((v - 25.0 / 175.0).abs() < 1e-15);
    }

    #[test]
    fn config_validation() {
        assert!(RewardConfig::with_tau(1.0).is_err());
        assert!(RewardConfig::with_tau(-0.1).is_err());
        assert!(RewardConfig::with_tau(0.0).is_ok());
        let w = RewardWeights {
            conf: -1.0,
            ..Default::default()
        };
        assert!(matches!(
            RewardConfig::new(0.5, w),
            Err(RewardError::InvalidWeight { name: "conf", .. })
        ));
        assert_eq!(RewardConfig::default().tau(), 0.5);
    }

    #[test]
    fn perfect_match() {
        let b = bbox(0, 0, 100, 100);
        let m = match_predictions(&[pred(b, 0.9)], &[gt(b)], &RewardConfig::default());
        assert_eq!(m.pairs.len(), 1);
        assert_eq!((m.pairs[0].iou, m.pairs[0].confidence), (1.0, 0.9));
    }

    #[test]
    fn disjoint_prediction_is_unmatched() {
        let m = match_predictions(
            &[pred(bbox(0, 0, 10, 10), 0.7)],
            &[gt(bbox(500, 500, 600, 600))],
            &RewardConfig::default(),
        );
        assert_eq!(m.pairs[0].iou, 0.0);
        assert_eq!(m.pairs[0].gt_index, None);
    }

    #[test]
    fn below_threshold_is_zeroed_and_gt_stays_available() {
        let g = bbox(0, 0, 100, 100);
        // IoU 0.25 then exact; first (higher confidence) is below tau
        let preds = [pred(bbox(0, 0, 50, 50), 0.9), pred(g, 0.5)];
        let m = match_predictions(&preds, &[gt(g)], &RewardConfig::default());
        assert_eq!(m.pairs[0].iou, 0.0);
        assert_eq!(m.pairs[1].iou, 1.0);
        assert_eq!(m.pairs[1].gt_index, Some(0));
    }

    /// Brute force: try every processing order of the predictions and keep the
    /// assignment produced by the descending-confidence order. Confirms the
    /// high-confidence box wins the GT even though the other overlaps more.
    #[test]
    fn greedy_by_confidence_not_by_iou() {
        let g = bbox(0, 0, 100, 100);
        let hi = pred(bbox(0, 0, 100, 80), 0.9); // IoU 0.8
        let lo = pred(bbox(0, 0, 100, 90), 0.6); // IoU 0.9
        assert!((iou(&hi.bbox, &g) - 0.8).abs() < 1e-12);
        assert!((iou(&lo.bbox, &g) - 0.9).abs() < 1e-12);
        let m = match_predictions(&[lo, hi], &[gt(g)], &RewardConfig::default());
        assert_eq!(m.pairs[0].confidence, 0.9);
        assert!((m.pairs[0].iou - 0.8).abs() < 1e-12);
        assert_eq!(m.pairs[1].iou, 0.0);

        let orders = [[0usize, 1], [1, 0]];
        let outcome = |order: &[usize; 2]| {
            let ps = [hi, lo];
            let mut taken = false;
            let mut ious = [0.0; 2];
            for &i in order {
                let v = iou(&ps[i].bbox, &g);
                if !taken && v >= 0.5 {
                    taken = true;
                    ious[i] = v;
                }
            }
            ious
        };
        // the confidence-descending order is [hi, lo] = [0, 1]
        let greedy = outcome(&orders[0]);
        assert_eq!(greedy[1], 0.0);
        assert_ne!(outcome(&orders[1]), greedy);
    }

    #[test]
    fn confidence_ties_keep_emission_order() {
        let g = bbox(0, 0, 100, 100);
        let preds = [pred(bbox(0, 0, 100, 90), 0.5), pred(g, 0.5)];
        let m = match_predictions(&preds, &[gt(g)], &RewardConfig::default());
        assert_eq!(m.pairs[0].pred_index, 0);
        assert!((m.pairs[0].iou - 0.9).abs() < 1e-12);
        assert_eq!(m.pairs[1].iou, 0.0);
    }

    #[test]
    fn maximal_detection_reward() {
        let b = bbox(100, 100, 400, 500);
        let r = detection_reward(&det_response(vec![pred(b, 1.0)]), &[gt(b)], &RewardConfig::default());
        assert_eq!(r.r_iou, Some(1.0));
        assert_eq!(r.r_conf, Some(1.0));
        assert_eq!(r.r_format, 1.0);
        assert_eq!(r.r_acc, None);
        assert_eq!(r.total, 3.0);
    }

    #[test]
    fn unmatched_box_confidence_reward() {
        assert!((confidence_reward(0.0, 0.9) - 0.1).abs() < 1e-15);
        let r = detection_reward(
            &det_response(vec![pred(bbox(0, 0, 10, 10), 0.9)]),
            &[gt(bbox(500, 500, 600, 600))],
            &RewardConfig::default(),
        );
        assert!((r.r_conf.unwrap() - 0.1).abs() < 1e-12);
        assert_eq!(r.r_iou, Some(0.0));
    }

    #[test]
    fn two_prediction_hand_example() {
        let g = bbox(0, 0, 100, 100);
        let preds = vec![pred(bbox(0, 0, 100, 80), 0.9), pred(bbox(600, 600, 700, 700), 0.6)];
        let r = detection_reward(&det_response(preds), &[gt(g)], &RewardConfig::default());
        assert!((r.r_iou.unwrap() - 0.4).abs() < 1e-12);
        assert!((r.r_conf.unwrap() - 0.65).abs() < 1e-12);
        assert!((r.total - 2.05).abs() < 1e-12);
    }

    #[test]
    fn no_objects_conventions() {
        let cfg = RewardConfig::default();
        let text = format_response("r", "No Objects");
        let r = detection_reward(&text, &[], &cfg);
        assert_eq!((r.r_iou, r.r_conf, r.total), (Some(1.0), Some(1.0), 3.0));
        let r = detection_reward(&text, &[gt(bbox(0, 0, 5, 5))], &cfg);
        assert_eq!((r.r_iou, r.r_conf, r.total), (Some(0.0), Some(0.0), 1.0));
        let r = detection_reward(&det_response(vec![pred(bbox(0, 0, 5, 5), 0.3)]), &[], &cfg);
        assert_eq!(r.r_iou, Some(0.0));
        assert!((r.r_conf.unwrap() - 0.7).abs() < 1e-12);
    }

    #[test]
    fn format_and_payload_failures_zero_everything() {
        let cfg = RewardConfig::default();
        let g = [gt(bbox(0, 0, 5, 5))];
        for text in [
            "[{'Position': [0, 0, 5, 5], 'Confidence': 1.0}]",
            "<think>r</think><answer>garbage</answer>",
            "<think>r</think><answer>[{'Position': [5, 0, 0, 5], 'Confidence': 1.0}]</answer>",
        ] {
            let r = detection_reward(text, &g, &cfg);
            assert_eq!(r.total, 0.0, "{text}");
            assert_eq!(r.r_format, 0.0);
        }
    }

    #[test]
    fn weights_scale_components() {
        let w = RewardWeights {
            iou: 2.0,
            conf: 0.5,
            format: 0.0,
            acc: 3.0,
        };
        let cfg = RewardConfig::new(0.5, w).unwrap();
        let b = bbox(0, 0, 10, 10);
        let r = detection_reward(&det_response(vec![pred(b, 0.8)]), &[gt(b)], &cfg);
        assert!((r.total - (2.0 + 0.4)).abs() < 1e-12);
        let r = classification_reward("<think>x</think><answer>pug</answer>", "pug", &cfg);
        assert_eq!(r.total, 3.0);
    }

    #[test]
    fn classification_examples() {
        let cfg = RewardConfig::default();
        let r = classification_reward("<think>…</think><answer>pug</answer>", "Pug", &cfg);
        assert_eq!((r.r_acc, r.r_format, r.total), (Some(1.0), 1.0, 2.0));
        let r = classification_reward("<think>…</think><answer>beagle</answer>", "Pug", &cfg);
        assert_eq!(r.total, 1.0);
        let r = classification_reward("<answer>pug</answer>", "Pug", &cfg);
        assert_eq!((r.r_acc, r.r_format, r.total), (Some(0.0), 0.0, 0.0));
        let r = classification_reward("<think>x</think><answer>  </answer>", "Pug", &cfg);
        assert_eq!(r.total, 0.0);
    }

    #[test]
    fn verify_exact_examples() {
        assert_eq!(verify_exact("42", "42"), 1.0);
        assert_eq!(verify_exact("42", "43"), 0.0);
        assert_eq!(verify_exact(" cat", "CAT"), 1.0);
    }
}

#[cfg(test)]
mod proptests {
    use super::*;
    use crate::grammar::{format_response, serialize_detection_answer};
    use proptest::prelude::*;

    fn arb_box() -> impl Strategy<Value = BBox> {
        (0i64..990, 0i64..990, 1i64..400, 1i64..400).prop_map(|(x, y, w, h)| {
            BBox::new(x, y, (x + w).min(1000), (y + h).min(1000)).unwrap()
        })
    }

    fn arb_pred() -> impl Strategy<Value = Prediction> {
        (arb_box(), 0u32..=100).prop_map(|(b, c)| Prediction::new(b, f64::from(c) / 100.0).unwrap())
    }

    proptest! {
        #[test]
        fn iou_bounded_symmetric(a in arb_box(), b in arb_box()) {
            let v = iou(&a, &b);
            prop_assert!((0.0..=1.0).contains(&v));
            prop_assert_eq!(v, iou(&b, &a));
            prop_assert_eq!(v == 1.0, a == b);
        }

        #[test]
        fn match_invariants(
            preds in prop::collection::vec(arb_pred(), 0..6),
            gts in prop::collection::vec(arb_box(), 0..5),
            tau in 0.0f64..0.95,
        ) {
            let gts: Vec<_> = gts.into_iter().map(|b| GroundTruthInstance::new("c", b)).collect();
            let cfg = RewardConfig::with_tau(tau).unwrap();
            let m = match_predictions(&preds, &gts, &cfg);
            prop_assert_eq!(m.pairs.len(), preds.len());
            let mut seen = std::collections::HashSet::new();
            for p in &m.pairs {
                prop_assert!(p.iou == 0.0 || p.iou >= tau);
                prop_assert!((0.0..=1.0).contains(&p.iou));
                if let Some(g) = p.gt_index {
                    prop_assert!(seen.insert(g));
                }
            }
            for w in m.pairs.windows(2) {
                prop_assert!(w[0].confidence >= w[1].confidence);
            }
        }

        #[test]
        fn detection_reward_bounded_and_pure(
            preds in prop::collection::vec(arb_pred(), 1..6),
            gts in prop::collection::vec(arb_box(), 0..5),
        ) {
            let gts: Vec<_> = gts.into_iter().map(|b| GroundTruthInstance::new("c", b)).collect();
            let text = format_response("r", &serialize_detection_answer(&DetectionAnswer::Boxes(preds)));
            let cfg = RewardConfig::default();
            let r = detection_reward(&text, &gts, &cfg);
            prop_assert_eq!(r, detection_reward(&text, &gts, &cfg));
            let (i, c) = (r.r_iou.unwrap(), r.r_conf.unwrap());
            prop_assert!((0.0..=1.0).contains(&i) && (0.0..=1.0).contains(&c));
            prop_assert_eq!(r.r_format, 1.0);
            prop_assert!((0.0..=3.0).contains(&r.total));
        }

        #[test]
        fn permutation_invariance_with_distinct_confidences(
            boxes in prop::collection::vec(arb_box(), 1..6),
            gts in prop::collection::vec(arb_box(), 0..4),
            seed in any::<u64>(),
        ) {
            let preds: Vec<Prediction> = boxes
                .iter()
                .enumerate()
                .map(|(i, b)| Prediction::new(*b, 0.05 + 0.1 * i as f64).unwrap())
                .collect();
            let mut shuffled = preds.clone();
            // deterministic Fisher-Yates from the seed
            let mut s = seed;
            for i in (1..shuffled.len()).rev() {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                let j = (s >> 33) as usize % (i + 1);
                shuffled.swap(i, j);
            }
            let gts: Vec<_> = gts.into_iter().map(|b| GroundTruthInstance::new("c", b)).collect();
            let cfg = RewardConfig::default();
            let a = score_detection_answer(&DetectionAnswer::Boxes(preds), &gts, &cfg);
            let b = score_detection_answer(&DetectionAnswer::Boxes(shuffled), &gts, &cfg);
            prop_assert_eq!(a, b);
        }

        #[test]
        fn confidence_reward_monotone(c1 in 0.0f64..1.0, c2 in 0.0f64..1.0, v in 0.5f64..1.0) {
            prop_assume!(c1 < c2);
            prop_assert!(confidence_reward(v, c1) < confidence_reward(v, c2));
            prop_assert!(confidence_reward(0.0, c1) > confidence_reward(0.0, c2));
        }

        /// Growing a single matched prediction toward its GT never lowers R_iou.
        #[test]
        fn iou_reward_monotone_in_overlap(shrink in 0i64..40, extra in 1i64..40, c in 0u32..=100) {
            let g = BBox::new(100, 100, 300, 300).unwrap();
            let gts = [GroundTruthInstance::new("c", g)];
            let conf = f64::from(c) / 100.0;
            let cfg = RewardConfig::with_tau(0.0).unwrap();
            let worse = Prediction::new(BBox::new(100, 100, 300 - shrink - extra, 300).unwrap(), conf).unwrap();
            let better = Prediction::new(BBox::new(100, 100, 300 - shrink, 300).unwrap(), conf).unwrap();
            let rw = score_detection_answer(&DetectionAnswer::Boxes(vec![worse]), &gts, &cfg);
            let rb = score_detection_answer(&DetectionAnswer::Boxes(vec![better]), &gts, &cfg);
            prop_assert!(rb.r_iou.unwrap() >= rw.r_iou.unwrap());
        }
    }
}
