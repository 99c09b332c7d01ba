//! Route-prediction test criteria and their dataset-level aggregation.
//!
//! All per-sample metrics compare a full predicted route against a label
//! that may cover only a prefix of the visit order. Tasks absent from the
//! label are known to come after every labelled task, but their mutual
//! order is unknown.

use std::fmt::Write as _;

use crate::domain::{position_table, RouteLabel, RoutePermutation, Sample, TaskId};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MetricError {
    #[error("label task {0} is missing from the prediction")]
    LabelNotInPrediction(TaskId),
    #[error("got {preds} predictions for {samples} samples")]
    LengthMismatch { samples: usize, preds: usize },
    #[error("prediction for sample {index} has {got} tasks, sample has {expected}")]
    PredictionSize { index: usize, expected: usize, got: usize },
}

/// Position of every label task in the prediction, in label order.
fn predicted_positions(pred: &[TaskId], label: &[TaskId]) -> Result<Vec<usize>, MetricError> {
    let n = pred.iter().copied().max().unwrap_or(0);
    let table = position_table(pred, n);
    label
        .iter()
        .map(|&id| {
            table
                .get(id)
                .copied()
                .flatten()
                .ok_or(MetricError::LabelNotInPrediction(id))
        })
        .collect()
}

/// Kendall-style rank correlation over labelled pairs plus
/// labelled-vs-unlabelled pairs. `Ok(None)` when no pair is comparable.
pub fn pairwise_rank_correlation(
    pred: &RoutePermutation,
    label: &RouteLabel,
) -> Result<Option<f64>, MetricError> {
    let pred = pred.as_slice();
    let pos = predicted_positions(pred, label.as_slice())?;
    let m = pos.len();
    let mut concordant = 0u64;
    let mut discordant = 0u64;
    // Label order is index order, so a pair is concordant iff the
    // predicted positions increase along it.
    for i in 0..m {
        for j in (i + 1)..m {
            if pos[i] < pos[j] {
                concordant += 1;
            } else {
                discordant += 1;
            }
        }
    }
    // Labelled tasks precede every unlabelled one.
    let mut in_label = vec![false; pred.len() + 1];
    for &id in label.as_slice() {
        in_label[id] = true;
    }
    let mut unlabelled_seen = 0u64;
    let unlabelled_total = (pred.len() - m) as u64;
    for &id in pred {
        if in_label[id] {
            discordant += unlabelled_seen;
            concordant += unlabelled_total - unlabelled_seen;
        } else {
            unlabelled_seen += 1;
        }
    }
    let total = concordant + discordant;
    if total == 0 {
        return Ok(None);
    }
    Ok(Some((concordant as f64 - discordant as f64) / total as f64))
}

/// Levenshtein distance between the label and the first `m` predicted tasks.
pub fn edit_distance(pred: &RoutePermutation, label: &RouteLabel) -> Result<usize, MetricError> {
    predicted_positions(pred.as_slice(), label.as_slice())?;
    let m = label.len();
    Ok(levenshtein(label.as_slice(), &pred.as_slice()[..m]))
}

fn levenshtein(a: &[TaskId], b: &[TaskId]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, &x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, &y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Location square and mean deviation of the label tasks: `(lsd, lmd)`.
pub fn location_deviation(
    pred: &RoutePermutation,
    label: &RouteLabel,
) -> Result<(f64, f64), MetricError> {
    let pos = predicted_positions(pred.as_slice(), label.as_slice())?;
    let m = pos.len() as f64;
    let (sq, abs) = pos
        .iter()
        .enumerate()
        .fold((0.0, 0.0), |(sq, abs), (i, &p)| {
            let d = (i + 1) as f64 - p as f64;
            (sq + d * d, abs + d.abs())
        });
    Ok((sq / m, abs / m))
}

/// Hit rate and exact-prefix accuracy at `k`: `(hr, acc)`.
/// `None` when the label is shorter than `k`; such samples are skipped.
pub fn topk_scores(pred: &RoutePermutation, label: &RouteLabel, k: usize) -> Option<(f64, f64)> {
    if k == 0 || k > label.len() || k > pred.len() {
        return None;
    }
    let p = &pred.as_slice()[..k];
    let l = &label.as_slice()[..k];
    let hits = p.iter().filter(|id| l.contains(id)).count();
    let acc = if p == l { 1.0 } else { 0.0 };
    Some((hits as f64 / k as f64, acc))
}

/// Evaluation bucket over the task count: samples with `0 < n <= max`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Bucket {
    pub max: usize,
}

impl Bucket {
    pub const UP_TO_11: Bucket = Bucket { max: 11 };
    pub const UP_TO_25: Bucket = Bucket { max: 25 };

    pub fn contains(&self, n: usize) -> bool {
        n > 0 && n <= self.max
    }
}

/// Per-sample criteria. `None` marks a metric that is undefined or skipped
/// for that sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleMetrics {
    pub index: usize,
    pub hr1: f64,
    pub acc3: Option<f64>,
    pub krc: Option<f64>,
    pub lmd: f64,
    pub lsd: f64,
    pub ed: f64,
}

impl SampleMetrics {
    pub fn compute(
        index: usize,
        pred: &RoutePermutation,
        label: &RouteLabel,
    ) -> Result<Self, MetricError> {
        let (lsd, lmd) = location_deviation(pred, label)?;
        let krc = pairwise_rank_correlation(pred, label)?;
        let ed = edit_distance(pred, label)? as f64;
        let (hr1, _) = topk_scores(pred, label, 1).expect("labels are non-empty");
        let acc3 = topk_scores(pred, label, 3).map(|(_, acc)| acc);
        Ok(Self {
            index,
            hr1,
            acc3,
            krc,
            lmd,
            lsd,
            ed,
        })
    }
}

/// Bucketed means of the six criteria.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub bucket: Bucket,
    pub samples: Vec<SampleMetrics>,
    pub hr1: f64,
    pub acc3: f64,
    pub krc: f64,
    pub lmd: f64,
    pub lsd: f64,
    pub ed: f64,
    /// Samples inside the bucket.
    pub count: usize,
    pub skipped_acc3: usize,
    pub skipped_krc: usize,
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, count) = values.fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
    if count == 0 {
        f64::NAN
    } else {
        sum / count as f64
    }
}

impl MetricReport {
    pub fn from_samples(bucket: Bucket, samples: Vec<SampleMetrics>) -> Self {
        let count = samples.len();
        let skipped_acc3 = samples.iter().filter(|s| s.acc3.is_none()).count();
        let skipped_krc = samples.iter().filter(|s| s.krc.is_none()).count();
        Self {
            bucket,
            hr1: mean(samples.iter().map(|s| s.hr1)),
            acc3: mean(samples.iter().filter_map(|s| s.acc3)),
            krc: mean(samples.iter().filter_map(|s| s.krc)),
            lmd: mean(samples.iter().map(|s| s.lmd)),
            lsd: mean(samples.iter().map(|s| s.lsd)),
            ed: mean(samples.iter().map(|s| s.ed)),
            count,
            skipped_acc3,
            skipped_krc,
            samples,
        }
    }

    pub const CSV_HEADER: &'static str = "bucket,hr1,acc3,krc,lmd,lsd,ed,count";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.bucket.max, self.hr1, self.acc3, self.krc, self.lmd, self.lsd, self.ed, self.count
        )
    }

    /// Flat `key=value` lines.
    pub fn to_key_values(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "bucket={}", self.bucket.max);
        for (k, v) in [
            ("hr1", self.hr1),
            ("acc3", self.acc3),
            ("krc", self.krc),
            ("lmd", self.lmd),
            ("lsd", self.lsd),
            ("ed", self.ed),
        ] {
            let _ = writeln!(out, "{k}={v}");
        }
        let _ = writeln!(out, "count={}", self.count);
        let _ = writeln!(out, "skipped_acc3={}", self.skipped_acc3);
        let _ = writeln!(out, "skipped_krc={}", self.skipped_krc);
        out
    }
}

/// Means of every criterion over the samples whose task count falls in
/// `bucket`.
pub fn evaluate_dataset(
    samples: &[Sample],
    preds: &[RoutePermutation],
    bucket: Bucket,
) -> Result<MetricReport, MetricError> {
    if samples.len() != preds.len() {
        return Err(MetricError::LengthMismatch {
            samples: samples.len(),
            preds: preds.len(),
        });
    }
    let mut rows = Vec::new();
    for (index, (s, p)) in samples.iter().zip(preds).enumerate() {
        if p.len() != s.n() {
            return Err(MetricError::PredictionSize {
                index,
                expected: s.n(),
                got: p.len(),
            });
        }
        if bucket.contains(s.n()) {
            rows.push(SampleMetrics::compute(index, p, &s.label)?);
        }
    }
    Ok(MetricReport::from_samples(bucket, rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::fixtures::line_sample;
    use proptest::prelude::*;

    fn perm(v: &[usize]) -> RoutePermutation {
        RoutePermutation::new(v.to_vec()).unwrap()
    }

    fn lab(v: &[usize]) -> RouteLabel {
        RouteLabel::new(v.to_vec()).unwrap()
    }

    #[test]
    fn krc_examples() {
        let krc = |p: &[usize], l: &[usize]| pairwise_rank_correlation(&perm(p), &lab(l)).unwrap();
        assert_eq!(krc(&[1, 2, 3], &[1, 2, 3]), Some(1.0));
        assert_eq!(krc(&[3, 2, 1], &[1, 2, 3]), Some(-1.0));
        // 5 concordant, 1 discordant pair.
        let v = krc(&[2, 1, 3, 4], &[2, 3, 1]).unwrap();
        assert!((v - 4.0 / 6.0).abs() < 1e-15);
        assert_eq!(krc(&[1], &[1]), None);
    }

    #[test]
    fn missing_label_task_is_an_error() {
        let r = pairwise_rank_correlation(&perm(&[1, 2]), &lab(&[3]));
        assert_eq!(r, Err(MetricError::LabelNotInPrediction(3)));
        assert!(edit_distance(&perm(&[1, 2]), &lab(&[1, 3])).is_err());
        assert!(location_deviation(&perm(&[1, 2]), &lab(&[3])).is_err());
    }

    #[test]
    fn edit_distance_examples() {
        assert_eq!(edit_distance(&perm(&[1, 2, 3]), &lab(&[1, 2, 3])), Ok(0));
        assert_eq!(edit_distance(&perm(&[1, 3, 2, 4]), &lab(&[1, 2, 3])), Ok(2));
        assert_eq!(edit_distance(&perm(&[4, 5, 6, 1, 2, 3]), &lab(&[1, 2, 3])), Ok(3));
    }

    #[test]
    fn location_deviation_examples() {
        let ld = |p: &[usize], l: &[usize]| location_deviation(&perm(p), &lab(l)).unwrap();
        assert_eq!(ld(&[1, 2, 3], &[1, 2, 3]), (0.0, 0.0));
        let (lsd, lmd) = ld(&[2, 1, 3], &[1, 2, 3]);
        assert!((lsd - 2.0 / 3.0).abs() < 1e-15 && (lmd - 2.0 / 3.0).abs() < 1e-15);
        let (lsd, lmd) = ld(&[3, 1, 2], &[1, 2, 3]);
        assert!((lsd - 2.0).abs() < 1e-15 && (lmd - 4.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn topk_examples() {
        assert_eq!(topk_scores(&perm(&[1, 2, 3, 4]), &lab(&[2, 1, 4]), 2), Some((1.0, 0.0)));
        assert_eq!(topk_scores(&perm(&[1, 2, 3]), &lab(&[1, 2, 3]), 3), Some((1.0, 1.0)));
        assert_eq!(topk_scores(&perm(&[4, 3, 2, 1]), &lab(&[1, 2]), 1), Some((0.0, 0.0)));
        assert_eq!(topk_scores(&perm(&[1, 2, 3]), &lab(&[1, 2]), 3), None);
    }

    #[test]
    fn perfect_predictions_report() {
        let samples: Vec<_> = (3..6)
            .map(|n| line_sample(n, (1..=n).rev().collect()))
            .collect();
        let preds: Vec<_> = samples
            .iter()
            .map(|s| RoutePermutation::new(s.label.as_slice().to_vec()).unwrap())
            .collect();
        let r = evaluate_dataset(&samples, &preds, Bucket::UP_TO_25).unwrap();
        assert_eq!((r.hr1, r.acc3, r.krc, r.lmd, r.lsd, r.ed), (1.0, 1.0, 1.0, 0.0, 0.0, 0.0));
        assert_eq!(r.count, 3);
    }

    #[test]
    fn bucket_filter_and_means() {
        let s = line_sample(12, vec![1]);
        let r = evaluate_dataset(&[s], &[RoutePermutation::identity(12)], Bucket::UP_TO_11).unwrap();
        assert_eq!(r.count, 0);
        assert!(r.lsd.is_nan());

        let a = line_sample(3, vec![1, 2, 3]);
        let b = line_sample(3, vec![1, 2, 3]);
        let preds = [perm(&[1, 2, 3]), perm(&[3, 1, 2])];
        let r = evaluate_dataset(&[a, b], &preds, Bucket::UP_TO_11).unwrap();
        assert_eq!(r.lsd, 1.0);
        assert_eq!(r.count, 2);
    }

    #[test]
    fn skipped_metrics_are_counted() {
        let a = line_sample(1, vec![1]);
        let b = line_sample(4, vec![2, 1]);
        let preds = [perm(&[1]), perm(&[1, 2, 3, 4])];
        let r = evaluate_dataset(&[a, b], &preds, Bucket::UP_TO_25).unwrap();
        assert_eq!(r.skipped_krc, 1);
        assert_eq!(r.skipped_acc3, 2);
        assert!(r.acc3.is_nan());
        assert!(r.to_key_values().contains("skipped_krc=1\n"));
        assert_eq!(r.csv_row().split(',').count(), MetricReport::CSV_HEADER.split(',').count());
    }

    #[test]
    fn length_mismatch() {
        let a = line_sample(2, vec![1]);
        assert!(matches!(
            evaluate_dataset(&[a], &[], Bucket::UP_TO_25),
            Err(MetricError::LengthMismatch { .. })
        ));
    }

    fn instance() -> impl Strategy<Value = (Vec<usize>, Vec<usize>)> {
        (1usize..=8).prop_flat_map(|n| {
            let route = Just((1..=n).collect::<Vec<_>>()).prop_shuffle();
            let label = Just((1..=n).collect::<Vec<_>>()).prop_shuffle();
            (route, label, 1..=n).prop_map(|(r, mut l, m)| {
                l.truncate(m);
                (r, l)
            })
        })
    }

    proptest! {
        #[test]
        fn hr1_equals_acc1((p, l) in instance()) {
            let (hr, acc) = topk_scores(&perm(&p), &lab(&l), 1).unwrap();
            prop_assert_eq!(hr, acc);
        }

        #[test]
        fn deviation_bounds((p, l) in instance()) {
            let (lsd, lmd) = location_deviation(&perm(&p), &lab(&l)).unwrap();
            prop_assert!(lsd >= 0.0 && lmd >= 0.0);
            prop_assert!(lmd <= lsd.sqrt() + 1e-12);
        }

        #[test]
        fn edit_distance_symmetric_and_bounded((p, l) in instance()) {
            let m = l.len();
            let d = levenshtein(&l, &p[..m]);
            prop_assert_eq!(d, levenshtein(&p[..m], &l));
            prop_assert!(d <= m);
        }

        #[test]
        fn krc_in_range((p, l) in instance()) {
            if let Some(k) = pairwise_rank_correlation(&perm(&p), &lab(&l)).unwrap() {
                prop_assert!((-1.0..=1.0).contains(&k));
            }
        }

        #[test]
        fn means_ignore_sample_order(seed in 0u64..1000) {
            use rand::{seq::SliceRandom, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut pairs: Vec<_> = (0..6)
                .map(|i| {
                    let n = 2 + i;
                    let mut r: Vec<usize> = (1..=n).collect();
                    r.shuffle(&mut rng);
                    let mut l: Vec<usize> = (1..=n).collect();
                    l.shuffle(&mut rng);
                    l.truncate(1 + i / 2);
                    (line_sample(n, l), perm(&r))
                })
                .collect();
            let eval = |pairs: &[(Sample, RoutePermutation)]| {
                let (s, p): (Vec<_>, Vec<_>) = pairs.iter().cloned().unzip();
                evaluate_dataset(&s, &p, Bucket::UP_TO_25).unwrap()
            };
            let a = eval(&pairs);
            pairs.reverse();
            let b = eval(&pairs);
            prop_assert!((a.lsd - b.lsd).abs() < 1e-12);
            prop_assert!((a.krc - b.krc).abs() < 1e-12);
            prop_assert!((a.ed - b.ed).abs() < 1e-12);
        }
    }
}
