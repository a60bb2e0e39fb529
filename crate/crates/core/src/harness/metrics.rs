//! Classification and regression scores.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};

/// `counts[t * n + p]` = samples of true class `t` predicted as `p`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub n_classes: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(n_classes: usize) -> Self {
        Self {
            n_classes,
            counts: vec![0; n_classes * n_classes],
        }
    }

    pub fn from_pairs(truth: &[usize], pred: &[usize], n_classes: usize) -> Result<Self> {
        if truth.len() != pred.len() {
            return Err(dim_err!("{} labels but {} predictions", truth.len(), pred.len()));
        }
        let mut m = Self::new(n_classes);
        for (&t, &p) in truth.iter().zip(pred) {
            m.add(t, p)?;
        }
        Ok(m)
    }

    pub fn add(&mut self, truth: usize, pred: usize) -> Result<()> {
        if truth >= self.n_classes || pred >= self.n_classes {
            return Err(Error::Index(format!(
                "class pair ({truth}, {pred}) outside 0..{}",
                self.n_classes
            )));
        }
        self.counts[truth * self.n_classes + pred] += 1;
        Ok(())
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.n_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn correct(&self) -> u64 {
        (0..self.n_classes).map(|c| self.get(c, c)).sum()
    }

    pub fn true_positives(&self, c: usize) -> u64 {
        self.get(c, c)
    }

    pub fn false_positives(&self, c: usize) -> u64 {
        (0..self.n_classes).filter(|&t| t != c).map(|t| self.get(t, c)).sum()
    }

    pub fn false_negatives(&self, c: usize) -> u64 {
        (0..self.n_classes).filter(|&p| p != c).map(|p| self.get(c, p)).sum()
    }

    pub fn accuracy(&self) -> f64 {
        ratio(self.correct(), self.total())
    }

    /// Zero when class `c` is never predicted.
    pub fn precision(&self, c: usize) -> f64 {
        let tp = self.true_positives(c);
        ratio(tp, tp + self.false_positives(c))
    }

    /// Zero when class `c` never occurs.
    pub fn recall(&self, c: usize) -> f64 {
        let tp = self.true_positives(c);
        ratio(tp, tp + self.false_negatives(c))
    }

    pub fn f1(&self, c: usize) -> f64 {
        harmonic(self.precision(c), self.recall(c))
    }
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Averaging {
    /// Scores of class 1 in a two-class problem.
    Positive,
    /// Unweighted mean of per-class scores.
    Macro,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub averaging: Averaging,
    pub confusion: ConfusionMatrix,
}

impl ClassificationMetrics {
    pub fn from_confusion(confusion: ConfusionMatrix) -> Self {
        let n = confusion.n_classes;
        let (averaging, precision, recall, f1) = if n == 2 {
            (
                Averaging::Positive,
                confusion.precision(1),
                confusion.recall(1),
                confusion.f1(1),
            )
        } else {
            let mean = |f: &dyn Fn(usize) -> f64| (0..n).map(f).sum::<f64>() / n.max(1) as f64;
            (
                Averaging::Macro,
                mean(&|c| confusion.precision(c)),
                mean(&|c| confusion.recall(c)),
                mean(&|c| confusion.f1(c)),
            )
        };
        Self {
            accuracy: confusion.accuracy(),
            precision,
            recall,
            f1,
            averaging,
            confusion,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionMetrics {
    pub mae: f64,
    pub mse: f64,
    pub rmse: f64,
    pub r2: f64,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "snake_case")]
pub enum Metrics {
    Classification(ClassificationMetrics),
    Regression(RegressionMetrics),
}

impl Metrics {
    /// Accuracy for classification, R² for regression.
    pub fn headline(&self) -> f64 {
        match self {
            Metrics::Classification(m) => m.accuracy,
            Metrics::Regression(m) => m.r2,
        }
    }

    pub fn headline_name(&self) -> &'static str {
        match self {
            Metrics::Classification(_) => "accuracy",
            Metrics::Regression(_) => "r2",
        }
    }

    /// Named scalar scores in a fixed order, for tables.
    pub fn scalars(&self) -> Vec<(&'static str, f64)> {
        match self {
            Metrics::Classification(m) => vec![
                ("accuracy", m.accuracy),
                ("precision", m.precision),
                ("recall", m.recall),
                ("f1", m.f1),
            ],
            Metrics::Regression(m) => vec![("mae", m.mae), ("mse", m.mse), ("rmse", m.rmse), ("r2", m.r2)],
        }
    }
}

pub fn classification_metrics(truth: &[usize], pred: &[usize], n_classes: usize) -> Result<Metrics> {
    if truth.is_empty() {
        return Err(Error::Data("no samples to score".into()));
    }
    let cm = ConfusionMatrix::from_pairs(truth, pred, n_classes)?;
    Ok(Metrics::Classification(ClassificationMetrics::from_confusion(cm)))
}

/// R² follows the usual convention for a constant target: 1 for an exact
/// fit, 0 otherwise.
pub fn regression_metrics(truth: &[f64], pred: &[f64]) -> Result<Metrics> {
    if truth.len() != pred.len() {
        return Err(dim_err!("{} targets but {} predictions", truth.len(), pred.len()));
    }
    if truth.is_empty() {
        return Err(Error::Data("no samples to score".into()));
    }
    let n = truth.len() as f64;
    let mae = truth.iter().zip(pred).map(|(t, p)| (t - p).abs()).sum::<f64>() / n;
    let ss_res: f64 = truth.iter().zip(pred).map(|(t, p)| (t - p) * (t - p)).sum();
    let mean = truth.iter().sum::<f64>() / n;
    let ss_tot: f64 = truth.iter().map(|t| (t - mean) * (t - mean)).sum();
    let mse = ss_res / n;
    let r2 = if ss_tot > 0.0 {
        1.0 - ss_res / ss_tot
    } else if ss_res == 0.0 {
        1.0
    } else {
        0.0
    };
    Ok(Metrics::Regression(RegressionMetrics {
        mae,
        mse,
        rmse: mse.sqrt(),
        r2,
        n: truth.len(),
    }))
}
