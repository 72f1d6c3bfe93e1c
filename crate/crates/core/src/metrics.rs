//! Global Average Precision over pooled top-20 predictions.
//!
//! Every video contributes at most 20 `(class, confidence)` predictions. All
//! predictions are pooled into a single list sorted by confidence, and
//!
//! ```text
//! GAP = Σ_i p(i)·Δr(i)
//! ```
//!
//! where `p(i)` is the precision of the first `i` pooled predictions and
//! `Δr(i)` is `1/P` when prediction `i` is a true label and 0 otherwise.
//! `P` is the number of true labels across all videos, counting at most 20
//! per video.
//!
//! Ties in confidence are broken by ascending video index, then class id.

use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::io::{BufRead, Write};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const TOP_K: usize = 20;

/// Predictions and ground truth for one video.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoPredictions {
    pub predictions: Vec<(usize, f64)>,
    pub labels: BTreeSet<usize>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PredictionSet {
    videos: Vec<VideoPredictions>,
}

/// Which summand the pooled sum uses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum GapForm {
    /// `p(i)·Δr(i)`: standard average precision, bounded by 1.
    #[default]
    RecallIncrement,
    /// `p(i)·r(i)` summed over every rank. Not bounded by 1.
    LiteralProduct,
}

impl PredictionSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a video. Rejects more than 20 predictions, repeated classes and
    /// non-finite confidences.
    pub fn push(&mut self, predictions: Vec<(usize, f64)>, labels: impl IntoIterator<Item = usize>) -> Result<()> {
        if predictions.len() > TOP_K {
            return Err(Error::invalid(
                "prediction_set",
                format!("video {} has {} predictions, at most {TOP_K} allowed", self.videos.len(), predictions.len()),
            ));
        }
        let mut seen = BTreeSet::new();
        for &(class, conf) in &predictions {
            if !seen.insert(class) {
                return Err(Error::invalid(
                    "prediction_set",
                    format!("duplicate prediction (video {}, class {class})", self.videos.len()),
                ));
            }
            if !conf.is_finite() {
                return Err(Error::invalid(
                    "prediction_set",
                    format!("non-finite confidence for (video {}, class {class})", self.videos.len()),
                ));
            }
        }
        self.videos.push(VideoPredictions {
            predictions,
            labels: labels.into_iter().collect(),
        });
        Ok(())
    }

    /// Top-20 predictions of every row of a score matrix.
    pub fn from_scores<T: Scalar>(scores: &Tensor<T>, labels: &[Vec<usize>]) -> Result<Self> {
        let k = TOP_K.min(scores.shape().get(1).copied().unwrap_or(0));
        let top = topk_predictions(scores, k)?;
        if top.len() != labels.len() {
            return Err(Error::invalid("prediction_set", format!("{} score rows for {} label sets", top.len(), labels.len())));
        }
        let mut set = Self::new();
        for (preds, labels) in top.into_iter().zip(labels) {
            set.push(preds, labels.iter().copied())?;
        }
        Ok(set)
    }

    pub fn videos(&self) -> &[VideoPredictions] {
        &self.videos
    }

    pub fn len(&self) -> usize {
        self.videos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.videos.is_empty()
    }

    /// `Σ_v min(|labels_v|, 20)`
    pub fn positives(&self) -> usize {
        self.videos.iter().map(|v| v.labels.len().min(TOP_K)).sum()
    }

    /// Pooled `(confidence, video, class, hit)` in ranking order.
    pub fn pooled(&self) -> Vec<(f64, usize, usize, bool)> {
        let mut pool: Vec<_> = self
            .videos
            .iter()
            .enumerate()
            .flat_map(|(v, vp)| vp.predictions.iter().map(move |&(c, conf)| (conf, v, c, vp.labels.contains(&c))))
            .collect();
        pool.sort_by(|a, b| rank_order((a.0, a.1, a.2), (b.0, b.1, b.2)));
        pool
    }
}

/// Ranking order: confidence descending, then video, then class ascending.
pub fn rank_order(a: (f64, usize, usize), b: (f64, usize, usize)) -> Ordering {
    b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2))
}

pub fn gap_at_20(preds: &PredictionSet) -> Result<f64> {
    gap(preds, GapForm::RecallIncrement)
}

pub fn gap(preds: &PredictionSet, form: GapForm) -> Result<f64> {
    let positives = preds.positives();
    if positives == 0 {
        return Err(Error::invalid("gap", "no true labels in the evaluation set"));
    }
    let denom = positives as f64;
    let mut hits = 0usize;
    let mut total = 0.0;
    for (i, &(_, _, _, hit)) in preds.pooled().iter().enumerate() {
        if hit {
            hits += 1;
        }
        let precision = hits as f64 / (i + 1) as f64;
        total += match form {
            GapForm::RecallIncrement if hit => precision,
            GapForm::RecallIncrement => 0.0,
            GapForm::LiteralProduct => precision * hits as f64,
        };
    }
    Ok(total / denom)
}

/// Quadratic-time GAP that ranks each prediction by counting the pooled
/// predictions ahead of it. Used to cross-check [`gap_at_20`].
pub fn gap_brute_force(preds: &PredictionSet) -> Result<f64> {
    let positives = preds.positives();
    if positives == 0 {
        return Err(Error::invalid("gap", "no true labels in the evaluation set"));
    }
    let all: Vec<(f64, usize, usize, bool)> = preds
        .videos()
        .iter()
        .enumerate()
        .flat_map(|(v, vp)| vp.predictions.iter().map(move |&(c, conf)| (conf, v, c, vp.labels.contains(&c))))
        .collect();
    let mut terms = Vec::new();
    for a in all.iter().filter(|a| a.3) {
        let at_or_ahead = |b: &&(f64, usize, usize, bool)| rank_order((b.0, b.1, b.2), (a.0, a.1, a.2)) != Ordering::Greater;
        let rank = all.iter().filter(at_or_ahead).count();
        let hits = all.iter().filter(at_or_ahead).filter(|b| b.3).count();
        terms.push((rank, hits as f64 / rank as f64));
    }
    // sum in rank order so the result is bit-comparable with the fast path
    terms.sort_by_key(|t| t.0);
    Ok(terms.iter().map(|t| t.1).fold(0.0, |acc, p| acc + p) / positives as f64)
}

/// The `k` highest-scoring classes of every row of `[B, C]` scores,
/// ties broken by ascending class id.
pub fn topk_predictions<T: Scalar>(scores: &Tensor<T>, k: usize) -> Result<Vec<Vec<(usize, f64)>>> {
    if scores.rank() != 2 {
        return Err(Error::invalid("topk", format!("scores must be [B, C], got {:?}", scores.shape())));
    }
    let c = scores.shape()[1];
    if k == 0 || k > c {
        return Err(Error::invalid("topk", format!("k = {k} must be in 1..={c}")));
    }
    if let Some(i) = scores.first_non_finite() {
        return Err(Error::NonFinite { op: "topk", index: i });
    }
    Ok(scores
        .data()
        .chunks(c)
        .map(|row| {
            let mut idx: Vec<usize> = (0..c).collect();
            idx.sort_by(|&a, &b| row[b].as_f64().total_cmp(&row[a].as_f64()).then(a.cmp(&b)));
            idx.truncate(k);
            idx.into_iter().map(|i| (i, row[i].as_f64())).collect()
        })
        .collect())
}

/// Average precision of one class over its pooled predictions.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassReport {
    pub class: usize,
    pub positives: usize,
    pub predicted: usize,
    pub hits: usize,
    /// `None` when the class has no positives.
    pub ap: Option<f64>,
}

pub fn per_class_report(preds: &PredictionSet, num_classes: usize) -> Vec<ClassReport> {
    let mut reports: Vec<ClassReport> = (0..num_classes)
        .map(|class| ClassReport {
            class,
            positives: 0,
            predicted: 0,
            hits: 0,
            ap: None,
        })
        .collect();
    for v in preds.videos() {
        for &l in &v.labels {
            if let Some(r) = reports.get_mut(l) {
                r.positives += 1;
            }
        }
    }
    let mut sums = vec![0.0; num_classes];
    for (_, _, class, hit) in preds.pooled() {
        let Some(r) = reports.get_mut(class) else { continue };
        r.predicted += 1;
        if hit {
            r.hits += 1;
            sums[class] += r.hits as f64 / r.predicted as f64;
        }
    }
    for (r, s) in reports.iter_mut().zip(sums) {
        if r.positives > 0 {
            r.ap = Some(s / r.positives as f64);
        }
    }
    reports
}

/// Writes `video_id,class_id,confidence` lines, videos in set order and
/// predictions in ranking order within each video.
pub fn write_predictions_csv<W: Write>(mut w: W, ids: &[String], preds: &PredictionSet) -> Result<()> {
    if ids.len() != preds.len() {
        return Err(Error::invalid("predictions_csv", format!("{} ids for {} videos", ids.len(), preds.len())));
    }
    writeln!(w, "video_id,class_id,confidence")?;
    for (id, v) in ids.iter().zip(preds.videos()) {
        let mut p = v.predictions.clone();
        p.sort_by(|a, b| rank_order((a.1, 0, a.0), (b.1, 0, b.0)));
        for (c, conf) in p {
            writeln!(w, "{id},{c},{conf}")?;
        }
    }
    Ok(())
}

/// Reads a prediction dump, grouping lines by video id in order of first
/// appearance.
pub fn read_predictions_csv<R: BufRead>(r: R) -> Result<Vec<(String, Vec<(usize, f64)>)>> {
    let mut out: Vec<(String, Vec<(usize, f64)>)> = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        if n == 0 && line.starts_with("video_id") || line.trim().is_empty() {
            continue;
        }
        let bad = || Error::Format(format!("predictions line {}: expected `video_id,class_id,confidence`", n + 1));
        let mut parts = line.rsplitn(3, ',');
        let conf: f64 = parts.next().and_then(|s| s.trim().parse().ok()).ok_or_else(bad)?;
        let class: usize = parts.next().and_then(|s| s.trim().parse().ok()).ok_or_else(bad)?;
        let id = parts.next().ok_or_else(bad)?.to_string();
        match out.iter_mut().find(|(v, _)| *v == id) {
            Some((_, p)) => p.push((class, conf)),
            None => out.push((id, vec![(class, conf)])),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;
    use proptest::prelude::*;

    fn random_set(rng: &mut SplitMix64, videos: usize, classes: usize) -> PredictionSet {
        let mut set = PredictionSet::new();
        for _ in 0..videos {
            let k = 1 + rng.below(classes.min(TOP_K));
            let mut ids: Vec<usize> = (0..classes).collect();
            rng.shuffle(&mut ids);
            // coarse confidences so ties occur
            let preds = ids[..k].iter().map(|&c| (c, (rng.below(5) as f64) / 4.0)).collect();
            let labels: Vec<usize> = (0..classes).filter(|_| rng.uniform() < 0.3).collect();
            set.push(preds, labels).unwrap();
        }
        set
    }

    #[test]
    fn single_hit_at_rank_one_is_perfect() {
        let mut s = PredictionSet::new();
        s.push(vec![(3, 0.01), (1, 0.001)], [3]).unwrap();
        assert_eq!(gap_at_20(&s).unwrap(), 1.0);
    }

    #[test]
    fn total_miss_is_zero() {
        let mut s = PredictionSet::new();
        s.push((0..20).map(|c| (c + 1, 0.9)).collect(), [0]).unwrap();
        assert_eq!(gap_at_20(&s).unwrap(), 0.0);
    }

    #[test]
    fn hits_at_ranks_one_and_three() {
        // pooled order: (v0,c0) hit, (v1,c1) miss, (v2,c2) hit, (v0,c5) miss
        let mut s = PredictionSet::new();
        s.push(vec![(0, 0.9), (5, 0.2)], [0]).unwrap();
        s.push(vec![(1, 0.8)], [4]).unwrap();
        s.push(vec![(2, 0.7)], [2]).unwrap();
        let want = (1.0 + 2.0 / 3.0) / 3.0;
        assert_eq!(gap_at_20(&s).unwrap(), want);
        assert_eq!(gap_brute_force(&s).unwrap(), gap_at_20(&s).unwrap());
    }

    #[test]
    fn literal_form_exceeds_one() {
        let mut s = PredictionSet::new();
        s.push(vec![(0, 0.9), (1, 0.8), (2, 0.7)], [0]).unwrap();
        assert_eq!(gap(&s, GapForm::RecallIncrement).unwrap(), 1.0);
        assert!(gap(&s, GapForm::LiteralProduct).unwrap() > 1.0);
    }

    #[test]
    fn construction_rejects_bad_sets() {
        let mut s = PredictionSet::new();
        assert!(s.push(vec![(1, 0.5), (1, 0.4)], [1]).is_err());
        assert!(s.push((0..21).map(|c| (c, 0.1)).collect(), [1]).is_err());
        assert!(s.push(vec![(0, f64::NAN)], [1]).is_err());
        s.push(vec![(0, 0.5)], []).unwrap();
        assert!(gap_at_20(&s).is_err());
    }

    #[test]
    fn recall_denominator_caps_each_video_at_twenty() {
        let mut s = PredictionSet::new();
        s.push((0..20).map(|c| (c, 1.0 - c as f64 / 100.0)).collect(), 0..30).unwrap();
        assert_eq!(s.positives(), 20);
        assert_eq!(gap_at_20(&s).unwrap(), 1.0);
    }

    #[test]
    fn topk_examples() {
        let s = Tensor::<f64>::from_f64([1, 4], &[0.9, 0.8, 0.7, 0.6]).unwrap();
        assert_eq!(topk_predictions(&s, 2).unwrap()[0], vec![(0, 0.9), (1, 0.8)]);
        let eq = Tensor::<f64>::full([2, 5], 0.5);
        let top = topk_predictions(&eq, 3).unwrap();
        assert!(top.iter().all(|r| r.iter().map(|p| p.0).eq(0..3)));
        assert!(topk_predictions(&eq, 6).is_err());
        assert!(topk_predictions(&eq, 0).is_err());
    }

    #[test]
    fn topk_agrees_with_full_sort() {
        let mut rng = SplitMix64::new(4);
        let s = Tensor::<f64>::rand_uniform([6, 30], 0.0, 1.0, &mut rng);
        let top = topk_predictions(&s, 20).unwrap();
        for (row, got) in s.data().chunks(30).zip(top) {
            let mut all: Vec<(usize, f64)> = row.iter().copied().enumerate().collect();
            all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            assert_eq!(got, all[..20].to_vec());
        }
    }

    #[test]
    fn per_class_report_counts() {
        let mut s = PredictionSet::new();
        s.push(vec![(0, 0.9), (1, 0.5)], [0]).unwrap();
        s.push(vec![(1, 0.8), (0, 0.1)], [1, 2]).unwrap();
        let r = per_class_report(&s, 3);
        assert_eq!((r[0].positives, r[0].predicted, r[0].hits), (1, 2, 1));
        assert_eq!(r[0].ap, Some(1.0));
        assert_eq!(r[2].ap, Some(0.0));
    }

    #[test]
    fn csv_round_trip() {
        let mut s = PredictionSet::new();
        s.push(vec![(2, 0.25), (0, 0.75)], [0]).unwrap();
        s.push(vec![(1, 0.1)], [1]).unwrap();
        let mut buf = Vec::new();
        write_predictions_csv(&mut buf, &["a,b".into(), "c".into()], &s).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text, "video_id,class_id,confidence\na,b,0,0.75\na,b,2,0.25\nc,1,0.1\n");
        let back = read_predictions_csv(&buf[..]).unwrap();
        assert_eq!(back[0], ("a,b".to_string(), vec![(0, 0.75), (2, 0.25)]));
        assert_eq!(back[1].1, vec![(1, 0.1)]);
    }

    #[test]
    fn random_sets_match_brute_force() {
        let mut rng = SplitMix64::new(99);
        for _ in 0..100 {
            let (v, c) = (1 + rng.below(6), 2 + rng.below(8));
            let set = random_set(&mut rng, v, c);
            if set.positives() == 0 {
                continue;
            }
            assert_eq!(gap_at_20(&set).unwrap(), gap_brute_force(&set).unwrap());
        }
    }

    proptest! {
        #[test]
        fn gap_is_in_unit_interval(seed in any::<u64>()) {
            let mut rng = SplitMix64::new(seed);
            let set = random_set(&mut rng, 5, 10);
            prop_assume!(set.positives() > 0);
            let g = gap_at_20(&set).unwrap();
            prop_assert!((0.0..=1.0).contains(&g));
        }

        #[test]
        fn gap_only_depends_on_order(seed in any::<u64>()) {
            let mut rng = SplitMix64::new(seed);
            let set = random_set(&mut rng, 5, 10);
            prop_assume!(set.positives() > 0);
            let mut warped = PredictionSet::new();
            for v in set.videos() {
                let p = v.predictions.iter().map(|&(c, x)| (c, (3.0 * x).exp() - 7.0)).collect();
                warped.push(p, v.labels.iter().copied()).unwrap();
            }
            prop_assert_eq!(gap_at_20(&set).unwrap(), gap_at_20(&warped).unwrap());
        }

        #[test]
        fn perfect_ranking_scores_one(seed in any::<u64>()) {
            let mut rng = SplitMix64::new(seed);
            let mut set = PredictionSet::new();
            for _ in 0..4 {
                let labels: Vec<usize> = (0..8).filter(|_| rng.uniform() < 0.4).collect();
                let preds = (0..8).map(|c| (c, if labels.contains(&c) { 1.0 + rng.uniform() } else { rng.uniform() })).collect();
                set.push(preds, labels).unwrap();
            }
            prop_assume!(set.positives() > 0);
            prop_assert!((gap_at_20(&set).unwrap() - 1.0).abs() < 1e-12);
        }
    }
}
