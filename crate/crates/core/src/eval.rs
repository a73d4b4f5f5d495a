//! Figures of merit (per-class average precision and ROC AUC, their macro
//! means MAP and MAUC), aggregation over seeded runs, and paired t-tests.

use std::cmp::Ordering;
use std::fmt;
use std::path::Path;

use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::dataset::{LabelMatrix, TagVocabulary, N_CLASSES};
use crate::error::{Error, Result};

/// Two-sided 99% critical value of Student's t with 4 degrees of freedom.
pub const T_CRIT_99_DF4: f64 = 4.604;

/// `n_clips × 12` scores aligned row-for-row with a [`LabelMatrix`].
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    rows: usize,
    data: Vec<f64>,
}

impl ScoreMatrix {
    pub fn new(rows: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * N_CLASSES {
            return Err(Error::shape(format!(
                "{} scores do not form a {rows}x{N_CLASSES} matrix",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("score matrix contains non-finite values"));
        }
        Ok(Self { rows, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Self::new(rows.len(), rows.iter().flatten().copied().collect())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * N_CLASSES..(i + 1) * N_CLASSES]
    }

    pub fn column(&self, class: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.data[i * N_CLASSES + class]).collect()
    }
}

fn check_pair(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::shape(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::invalid("scores contain NaN"));
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::invalid("labels must be 0 or 1"));
    }
    Ok(())
}

/// Mean of precision@k over the ranks k of the positives, ranking by
/// descending score. Ties keep their original order.
pub fn average_precision(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_pair(scores, labels)?;
    let positives = labels.iter().filter(|&&l| l == 1).count();
    if positives == 0 {
        return Err(Error::UndefinedMetric("average precision needs at least one positive".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal));
    let mut hits = 0usize;
    let mut total = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] == 1 {
            hits += 1;
            total += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(total / positives as f64)
}

/// `(#concordant + ½·#tied) / (#pos·#neg)` over positive/negative pairs.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_pair(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric("ROC AUC needs both positives and negatives".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap_or(Ordering::Equal));
    let (mut concordant, mut tied) = (0.0f64, 0.0f64);
    let mut neg_below = 0usize;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut gp, mut gn) = (0usize, 0usize);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] == 1 {
                gp += 1;
            } else {
                gn += 1;
            }
            j += 1;
        }
        concordant += (gp * neg_below) as f64;
        tied += (gp * gn) as f64;
        neg_below += gn;
        i = j;
    }
    Ok((concordant + 0.5 * tied) / (pos as f64 * neg as f64))
}

/// Per-class AP/AUC and their macro means.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub per_class_ap: Vec<f64>,
    pub per_class_auc: Vec<f64>,
    pub map: f64,
    pub mauc: f64,
}

impl EvalReport {
    /// `metric,class,value` rows: per-class `ap`/`auc`, then `map`/`mauc`.
    pub fn write_csv(&self, path: impl AsRef<Path>, vocab: &TagVocabulary) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_path(path)?;
        w.write_record(["metric", "class", "value"])?;
        for (c, v) in self.per_class_ap.iter().enumerate() {
            w.write_record(["ap", vocab.name(c), &v.to_string()])?;
        }
        for (c, v) in self.per_class_auc.iter().enumerate() {
            w.write_record(["auc", vocab.name(c), &v.to_string()])?;
        }
        w.write_record(["map", "all", &self.map.to_string()])?;
        w.write_record(["mauc", "all", &self.mauc.to_string()])?;
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Macro-averaged evaluation. Every class needs at least one positive and
/// one negative clip; offending classes are named in the error.
pub fn evaluate(scores: &ScoreMatrix, labels: &LabelMatrix, vocab: &TagVocabulary) -> Result<EvalReport> {
    if scores.rows() != labels.rows() {
        return Err(Error::shape(format!(
            "{} score rows vs {} label rows",
            scores.rows(),
            labels.rows()
        )));
    }
    let degenerate: Vec<&str> = (0..N_CLASSES)
        .filter(|&c| {
            let col = labels.column(c);
            let pos = col.iter().filter(|&&v| v == 1).count();
            pos == 0 || pos == col.len()
        })
        .map(|c| vocab.name(c))
        .collect();
    if !degenerate.is_empty() {
        return Err(Error::UndefinedMetric(format!(
            "classes without both positives and negatives: {}",
            degenerate.join(", ")
        )));
    }
    let mut per_class_ap = Vec::with_capacity(N_CLASSES);
    let mut per_class_auc = Vec::with_capacity(N_CLASSES);
    for c in 0..N_CLASSES {
        let (s, l) = (scores.column(c), labels.column(c));
        per_class_ap.push(average_precision(&s, &l)?);
        per_class_auc.push(roc_auc(&s, &l)?);
    }
    Ok(EvalReport {
        map: mean(&per_class_ap),
        mauc: mean(&per_class_auc),
        per_class_ap,
        per_class_auc,
    })
}

/// Mean and sample standard deviation (n−1 denominator).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::invalid(format!(
                "mean ± std needs at least 2 values, got {}",
                values.len()
            )));
        }
        let m = mean(values);
        let var = values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (values.len() - 1) as f64;
        Ok(Self { mean: m, std: var.sqrt() })
    }
}

impl fmt::Display for MeanStd {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.3} ± {:.3}", self.mean, self.std)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub runs: usize,
    pub map: MeanStd,
    pub mauc: MeanStd,
}

pub fn aggregate_runs(reports: &[EvalReport]) -> Result<Aggregate> {
    let maps: Vec<f64> = reports.iter().map(|r| r.map).collect();
    let maucs: Vec<f64> = reports.iter().map(|r| r.mauc).collect();
    Ok(Aggregate {
        runs: reports.len(),
        map: MeanStd::of(&maps)?,
        mauc: MeanStd::of(&maucs)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TTestResult {
    pub t: f64,
    pub df: usize,
    pub threshold: f64,
    pub significant: bool,
    /// Differences had zero spread but a non-zero mean; `t` is ±∞.
    pub degenerate: bool,
}

/// Two-sided 99% critical value for `df` degrees of freedom. `df = 4` uses
/// the tabulated 4.604; other values are computed from the t quantile.
pub fn critical_t99(df: usize) -> Result<f64> {
    if df == 0 {
        return Err(Error::invalid("t critical value needs df >= 1"));
    }
    if df == 4 {
        return Ok(T_CRIT_99_DF4);
    }
    let dist = StudentsT::new(0.0, 1.0, df as f64).map_err(|e| Error::invalid(e.to_string()))?;
    Ok(dist.inverse_cdf(0.995))
}

/// Paired-sample t-test on `a − b`, pairs matched by position (run seed).
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTestResult> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!(
            "paired t-test needs equal lengths, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let ms = MeanStd::of(&d)?;
    let n = d.len();
    let threshold = critical_t99(n - 1)?;
    let (t, degenerate) = if ms.std == 0.0 {
        if ms.mean == 0.0 {
            (0.0, false)
        } else {
            (f64::INFINITY.copysign(ms.mean), true)
        }
    } else {
        (ms.mean / (ms.std / (n as f64).sqrt()), false)
    };
    Ok(TTestResult {
        t,
        df: n - 1,
        threshold,
        significant: t.abs() > threshold,
        degenerate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ap_examples() {
        let ap = average_precision(&[0.9, 0.8, 0.7, 0.1], &[1, 0, 1, 0]).unwrap();
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
        assert_eq!(average_precision(&[0.9, 0.8, 0.2, 0.1], &[1, 1, 0, 0]).unwrap(), 1.0);
        assert_eq!(average_precision(&[0.3], &[1]).unwrap(), 1.0);
        assert!(matches!(average_precision(&[0.3, 0.2], &[0, 0]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn ap_ties_keep_original_order() {
        // tie between index 0 (negative) and 1 (positive): negative ranks first
        assert_eq!(average_precision(&[0.5, 0.5], &[0, 1]).unwrap(), 0.5);
        assert_eq!(average_precision(&[0.5, 0.5], &[1, 0]).unwrap(), 1.0);
    }

    #[test]
    fn auc_examples() {
        assert_eq!(roc_auc(&[0.9, 0.8, 0.2, 0.1], &[1, 1, 0, 0]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.1, 0.2, 0.8, 0.9], &[1, 1, 0, 0]).unwrap(), 0.0);
        assert_eq!(roc_auc(&[0.5, 0.5], &[1, 0]).unwrap(), 0.5);
        assert!(matches!(roc_auc(&[0.5, 0.4], &[1, 1]), Err(Error::UndefinedMetric(_))));
        assert!(roc_auc(&[f64::NAN, 0.4], &[1, 0]).is_err());
    }

    #[test]
    fn aggregate_examples() {
        let ms = MeanStd::of(&[0.7; 5]).unwrap();
        assert!((ms.mean - 0.7).abs() < 1e-15);
        assert_eq!(ms.std, 0.0);
        let ms = MeanStd::of(&[0.6, 0.8]).unwrap();
        assert!((ms.mean - 0.7).abs() < 1e-15);
        assert!((ms.std - 0.141_421_356_237_309_5).abs() < 1e-12);
        assert!(MeanStd::of(&[0.5]).is_err());
        let ms = MeanStd { mean: 0.7672, std: 0.00512 };
        assert_eq!(ms.to_string(), "0.767 ± 0.005");
    }

    #[test]
    fn t_test_examples() {
        let r = paired_t_test(&[1.0, 2.0, 3.0, 4.0, 5.0], &[2.0, 2.0, 4.0, 4.0, 6.0]).unwrap();
        let expected = -0.6 / (0.3f64.sqrt() / 5f64.sqrt());
        assert!((r.t - expected).abs() < 1e-12);
        assert!((r.t + 2.449).abs() < 1e-3);
        assert!(!r.significant);
        assert_eq!(r.df, 4);
        assert_eq!(r.threshold, 4.604);

        let r = paired_t_test(&[0.5; 5], &[0.5; 5]).unwrap();
        assert_eq!(r.t, 0.0);
        assert!(!r.significant);

        let r = paired_t_test(&[0.6; 5], &[0.5; 5]).unwrap();
        assert!(r.degenerate && r.significant && r.t > 0.0);
        assert!(paired_t_test(&[1.0], &[1.0]).is_err());
        assert!(paired_t_test(&[1.0, 2.0], &[1.0]).is_err());
    }

    #[test]
    fn critical_values() {
        assert_eq!(critical_t99(4).unwrap(), 4.604);
        assert!((critical_t99(9).unwrap() - 3.2498).abs() < 1e-3);
        assert!(critical_t99(0).is_err());
    }
}
