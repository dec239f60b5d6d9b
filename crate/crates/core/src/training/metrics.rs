use std::fmt::Write as _;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("no samples to evaluate")]
    Empty,
    #[error("{predictions} predictions for {labels} labels")]
    LengthMismatch { predictions: usize, labels: usize },
    #[error("class index {index} out of range for {n_classes} classes")]
    ClassIndex { index: usize, n_classes: usize },
    #[error("no attack-labeled windows to detect")]
    NoAttacks,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassMetrics {
    pub name: String,
    pub support: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// One-vs-rest accuracy `(TP + TN) / total`.
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    /// `confusion[true][predicted]`
    pub confusion: Vec<Vec<usize>>,
    pub per_class: Vec<ClassMetrics>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    /// Mean one-vs-rest accuracy over averaged classes.
    pub macro_accuracy: f64,
    /// trace / total
    pub accuracy: f64,
    pub total: usize,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Confusion matrix and one-vs-rest rates. Macro averages run over classes
/// that occur in the labels or the predictions.
pub fn compute_metrics(
    predictions: &[usize],
    labels: &[usize],
    class_names: &[&str],
) -> Result<MetricsReport, MetricsError> {
    if predictions.len() != labels.len() {
        return Err(MetricsError::LengthMismatch {
            predictions: predictions.len(),
            labels: labels.len(),
        });
    }
    if labels.is_empty() {
        return Err(MetricsError::Empty);
    }
    let c = class_names.len();
    let mut confusion = vec![vec![0usize; c]; c];
    for (&p, &y) in predictions.iter().zip(labels) {
        for index in [p, y] {
            if index >= c {
                return Err(MetricsError::ClassIndex { index, n_classes: c });
            }
        }
        confusion[y][p] += 1;
    }
    let total = labels.len();
    let mut per_class = Vec::with_capacity(c);
    let (mut sp, mut sr, mut sf, mut sa, mut counted) = (0.0, 0.0, 0.0, 0.0, 0usize);
    for k in 0..c {
        let tp = confusion[k][k];
        let support: usize = confusion[k].iter().sum();
        let predicted: usize = confusion.iter().map(|row| row[k]).sum();
        let fp = predicted - tp;
        let fn_ = support - tp;
        let tn = total - tp - fp - fn_;
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let m = ClassMetrics {
            name: class_names[k].to_string(),
            support,
            precision,
            recall,
            f1: f1_score(precision, recall),
            accuracy: ratio(tp + tn, total),
        };
        if support + predicted > 0 {
            sp += m.precision;
            sr += m.recall;
            sf += m.f1;
            sa += m.accuracy;
            counted += 1;
        }
        per_class.push(m);
    }
    let n = counted as f64;
    let trace: usize = (0..c).map(|k| confusion[k][k]).sum();
    Ok(MetricsReport {
        confusion,
        per_class,
        macro_precision: sp / n,
        macro_recall: sr / n,
        macro_f1: sf / n,
        macro_accuracy: sa / n,
        accuracy: ratio(trace, total),
        total,
    })
}

impl MetricsReport {
    /// Machine-readable `key=value` lines.
    pub fn to_key_values(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "samples={}", self.total);
        let _ = writeln!(s, "accuracy={:.6}", self.accuracy);
        let _ = writeln!(s, "macro_accuracy={:.6}", self.macro_accuracy);
        let _ = writeln!(s, "macro_precision={:.6}", self.macro_precision);
        let _ = writeln!(s, "macro_recall={:.6}", self.macro_recall);
        let _ = writeln!(s, "macro_f1={:.6}", self.macro_f1);
        for m in &self.per_class {
            let n = &m.name;
            let _ = writeln!(s, "class.{n}.support={}", m.support);
            let _ = writeln!(s, "class.{n}.precision={:.6}", m.precision);
            let _ = writeln!(s, "class.{n}.recall={:.6}", m.recall);
            let _ = writeln!(s, "class.{n}.f1={:.6}", m.f1);
            let _ = writeln!(s, "class.{n}.accuracy={:.6}", m.accuracy);
        }
        for (m, row) in self.per_class.iter().zip(&self.confusion) {
            let cells: Vec<String> = row.iter().map(usize::to_string).collect();
            let _ = writeln!(s, "confusion.{}={}", m.name, cells.join(","));
        }
        s
    }

    /// Human-readable table.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<12} {:>9} {:>9} {:>9} {:>9} {:>9}",
            "class", "support", "precision", "recall", "f1", "accuracy"
        );
        for m in &self.per_class {
            let _ = writeln!(
                s,
                "{:<12} {:>9} {:>9.4} {:>9.4} {:>9.4} {:>9.4}",
                m.name, m.support, m.precision, m.recall, m.f1, m.accuracy
            );
        }
        let _ = writeln!(
            s,
            "{:<12} {:>9} {:>9.4} {:>9.4} {:>9.4} {:>9.4}",
            "macro", self.total, self.macro_precision, self.macro_recall, self.macro_f1, self.macro_accuracy
        );
        let _ = writeln!(s, "overall accuracy {:.4}", self.accuracy);
        let _ = writeln!(s, "confusion (rows true, columns predicted):");
        for (m, row) in self.per_class.iter().zip(&self.confusion) {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:>8}")).collect();
            let _ = writeln!(s, "{:<12}{}", m.name, cells.join(""));
        }
        s
    }
}

/// Attack-vs-normal view used for cross-profile evaluation: any non-normal
/// prediction on an attack window counts as a detection.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionReport {
    pub attack_windows: usize,
    pub detected: usize,
    pub detection_accuracy: f64,
    pub normal_windows: usize,
    pub false_positives: usize,
    pub false_positive_rate: f64,
    pub binary_accuracy: f64,
}

pub fn detection_report(
    predictions: &[usize],
    labels: &[usize],
    normal_pred: usize,
    normal_label: usize,
) -> Result<DetectionReport, MetricsError> {
    if predictions.len() != labels.len() {
        return Err(MetricsError::LengthMismatch {
            predictions: predictions.len(),
            labels: labels.len(),
        });
    }
    let (mut attack, mut detected, mut normal, mut fp) = (0, 0, 0, 0);
    for (&p, &y) in predictions.iter().zip(labels) {
        let flagged = p != normal_pred;
        if y == normal_label {
            normal += 1;
            fp += usize::from(flagged);
        } else {
            attack += 1;
            detected += usize::from(flagged);
        }
    }
    if attack == 0 {
        return Err(MetricsError::NoAttacks);
    }
    Ok(DetectionReport {
        attack_windows: attack,
        detected,
        detection_accuracy: ratio(detected, attack),
        normal_windows: normal,
        false_positives: fp,
        false_positive_rate: ratio(fp, normal),
        binary_accuracy: ratio(detected + normal - fp, attack + normal),
    })
}

impl DetectionReport {
    pub fn to_key_values(&self) -> String {
        format!(
            "attack_windows={}\ndetected={}\ndetection_accuracy={:.6}\nnormal_windows={}\nfalse_positives={}\nfalse_positive_rate={:.6}\nbinary_accuracy={:.6}\n",
            self.attack_windows,
            self.detected,
            self.detection_accuracy,
            self.normal_windows,
            self.false_positives,
            self.false_positive_rate,
            self.binary_accuracy
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const NAMES: [&str; 4] = ["Normal", "Flooding", "Fuzzy", "Malfunction"];

    #[test]
    fn perfect_predictions() {
        let y = [0, 1, 2, 3, 3, 0];
        let r = compute_metrics(&y, &y, &NAMES).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.macro_f1, 1.0);
        for m in &r.per_class {
            assert_eq!((m.precision, m.recall, m.f1, m.accuracy), (1.0, 1.0, 1.0, 1.0));
        }
    }

    #[test]
    fn published_precision_recall_pair_gives_f1() {
        let f1 = f1_score(0.97, 1.0);
        assert!((f1 - 2.0 * 0.97 / 1.97).abs() < 1e-12);
        assert!((f1 - 0.9848).abs() < 1e-4);
        // the published row (0.97, 1, 0.99) needs an unrounded precision of at least ~0.9705
        let round2 = |v: f64| (v * 100.0).round() / 100.0;
        assert_eq!(round2(f1), 0.98);
        assert_eq!(round2(f1_score(0.9705, 1.0)), 0.99);
        assert_eq!(round2(f1_score(0.9704, 1.0)), 0.98);
    }

    #[test]
    fn symmetric_binary_confusion() {
        // TP=1, FP=1, FN=1, TN=1 for class 1
        let labels = [1, 0, 1, 0];
        let preds = [1, 1, 0, 0];
        let r = compute_metrics(&preds, &labels, &NAMES[..2]).unwrap();
        let m = &r.per_class[1];
        assert_eq!((m.precision, m.recall, m.f1, m.accuracy), (0.5, 0.5, 0.5, 0.5));
    }

    #[test]
    fn zero_denominators_and_errors() {
        let r = compute_metrics(&[0, 0], &[1, 1], &NAMES[..2]).unwrap();
        assert_eq!(r.per_class[1].precision, 0.0);
        assert_eq!(r.per_class[1].f1, 0.0);
        assert_eq!(r.per_class[0].recall, 0.0);
        assert_eq!(compute_metrics(&[], &[], &NAMES), Err(MetricsError::Empty));
        assert!(compute_metrics(&[0], &[0, 1], &NAMES).is_err());
        assert!(compute_metrics(&[4], &[0], &NAMES).is_err());
    }

    #[test]
    fn macro_skips_absent_classes() {
        let r = compute_metrics(&[0, 1], &[0, 1], &NAMES).unwrap();
        assert_eq!(r.macro_f1, 1.0);
        assert_eq!(r.per_class[3].support, 0);
    }

    #[test]
    fn detection_rules() {
        // fuzzy predicted on a malfunction window still counts
        let d = detection_report(&[2, 0, 1, 0], &[3, 3, 0, 0], 0, 0).unwrap();
        assert_eq!(d.detected, 1);
        assert_eq!(d.detection_accuracy, 0.5);
        assert_eq!(d.false_positive_rate, 0.5);
        assert_eq!(d.binary_accuracy, 0.5);
        let d = detection_report(&[0, 0, 0], &[1, 2, 3], 0, 0).unwrap();
        assert_eq!(d.detection_accuracy, 0.0);
        assert_eq!(detection_report(&[0], &[0], 0, 0), Err(MetricsError::NoAttacks));
    }

    #[test]
    fn key_values_parse_back() {
        let r = compute_metrics(&[0, 1, 1], &[0, 1, 0], &NAMES[..2]).unwrap();
        let kv = r.to_key_values();
        let f1: f64 = kv
            .lines()
            .find_map(|l| l.strip_prefix("macro_f1="))
            .unwrap()
            .parse()
            .unwrap();
        assert!((f1 - r.macro_f1).abs() < 1e-6);
        assert!(kv.contains("confusion.Normal=1,1"));
        assert!(r.to_text().contains("overall accuracy 0.6667"));
    }

    proptest! {
        #[test]
        fn confusion_invariants(pairs in proptest::collection::vec((0usize..4, 0usize..4), 1..200)) {
            let (preds, labels): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
            let r = compute_metrics(&preds, &labels, &NAMES).unwrap();
            let sum: usize = r.confusion.iter().flatten().sum();
            prop_assert_eq!(sum, labels.len());
            for k in 0..4 {
                let count = labels.iter().filter(|&&y| y == k).count();
                prop_assert_eq!(r.confusion[k].iter().sum::<usize>(), count);
                let m = &r.per_class[k];
                for v in [m.precision, m.recall, m.f1, m.accuracy] {
                    prop_assert!((0.0..=1.0).contains(&v));
                }
            }
            let trace: usize = (0..4).map(|k| r.confusion[k][k]).sum();
            prop_assert_eq!(r.accuracy, trace as f64 / labels.len() as f64);
        }
    }
}
