//! Verdict scoring: confusion matrices, accuracies, the zero-rule baseline,
//! Pearson correlation, and exemplar ranking.

use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::classifier::ClassLikelihoods;
use crate::config::Provenance;
use crate::dataset::ConditionClass;
use crate::descriptor::format_float;
use crate::error::{Error, Result};
use crate::imaging::PatchSpec;

/// 3 x 3 contingency table; rows are the true class, columns the predicted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    counts: [[u64; 3]; 3],
}

impl ConfusionMatrix {
    pub fn new(counts: [[u64; 3]; 3]) -> Self {
        ConfusionMatrix { counts }
    }

    pub fn counts(&self) -> [[u64; 3]; 3] {
        self.counts
    }

    pub fn get(&self, truth: ConditionClass, predicted: ConditionClass) -> u64 {
        self.counts[truth.index()][predicted.index()]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn correct(&self) -> u64 {
        (0..3).map(|i| self.counts[i][i]).sum()
    }

    pub fn row_sum(&self, truth: ConditionClass) -> u64 {
        self.counts[truth.index()].iter().sum()
    }
}

/// Builds a confusion matrix from aligned truth/prediction vectors.
pub fn confuse(truth: &[ConditionClass], predicted: &[ConditionClass]) -> Result<ConfusionMatrix> {
    if truth.len() != predicted.len() {
        return Err(Error::LengthMismatch {
            context: "prediction vector",
            expected: truth.len(),
            got: predicted.len(),
        });
    }
    let mut counts = [[0u64; 3]; 3];
    for (t, p) in truth.iter().zip(predicted) {
        counts[t.index()][p.index()] += 1;
    }
    Ok(ConfusionMatrix::new(counts))
}

/// Fraction of diagonal mass. Errors on an empty matrix.
pub fn accuracy(matrix: &ConfusionMatrix) -> Result<f64> {
    let total = matrix.total();
    if total == 0 {
        return Err(Error::EmptyInput("confusion matrix"));
    }
    Ok(matrix.correct() as f64 / total as f64)
}

/// Accuracy of always predicting the most common label.
pub fn zero_rule(labels: &[ConditionClass]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::EmptyInput("label list"));
    }
    let mut counts = [0usize; 3];
    for l in labels {
        counts[l.index()] += 1;
    }
    Ok(*counts.iter().max().unwrap() as f64 / labels.len() as f64)
}

/// Pearson correlation coefficient. Errors when either input has zero
/// variance or fewer than two points.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::LengthMismatch {
            context: "correlation input",
            expected: x.len(),
            got: y.len(),
        });
    }
    if x.len() < 2 {
        return Err(Error::Stats(
            "correlation needs at least two points".into(),
        ));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for (a, b) in x.iter().zip(y) {
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
        sxy += (a - mx) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Stats(
            "correlation undefined: an input has zero variance".into(),
        ));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// A patch with its truth and predicted likelihoods, for exemplar reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedPatch {
    pub spec: PatchSpec,
    pub true_class: ConditionClass,
    pub likelihoods: ClassLikelihoods,
}

/// Exemplars picked by confidence: per-class confident hits, the most
/// ambiguous patches, and confident mistakes across the A/C gap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExemplarReport {
    /// Correct predictions with top likelihood above the threshold, one list
    /// per true class, sorted by top likelihood descending.
    pub confident_correct: [Vec<RankedPatch>; 3],
    /// All patches sorted by top-two margin ascending.
    pub most_ambiguous: Vec<RankedPatch>,
    /// Predictions crossing A and C with top likelihood above the
    /// threshold, sorted by top likelihood descending.
    pub cross_errors: Vec<RankedPatch>,
}

/// Ranks patches by prediction confidence. `threshold` is the minimum top
/// likelihood for the "confident" lists. Sorting is stable, so equal keys
/// keep their input order.
pub fn confidence_rank(patches: &[RankedPatch], threshold: f64) -> Result<ExemplarReport> {
    if !threshold.is_finite() || !(0.0..=1.0).contains(&threshold) {
        return Err(Error::InvalidArgument(format!(
            "confidence threshold {threshold} outside [0, 1]"
        )));
    }
    let mut confident_correct: [Vec<RankedPatch>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    let mut cross_errors = Vec::new();
    for p in patches {
        let predicted = p.likelihoods.argmax_worse_tie();
        let top = p.likelihoods.max();
        if top > threshold {
            if predicted == p.true_class {
                confident_correct[p.true_class.index()].push(p.clone());
            } else if (p.true_class == ConditionClass::A && predicted == ConditionClass::C)
                || (p.true_class == ConditionClass::C && predicted == ConditionClass::A)
            {
                cross_errors.push(p.clone());
            }
        }
    }
    for list in &mut confident_correct {
        list.sort_by(|a, b| {
            b.likelihoods
                .max()
                .partial_cmp(&a.likelihoods.max())
                .unwrap()
        });
    }
    cross_errors.sort_by(|a, b| {
        b.likelihoods
            .max()
            .partial_cmp(&a.likelihoods.max())
            .unwrap()
    });
    let mut most_ambiguous = patches.to_vec();
    most_ambiguous.sort_by(|a, b| {
        a.likelihoods
            .top_two_margin()
            .partial_cmp(&b.likelihoods.top_two_margin())
            .unwrap()
    });
    Ok(ExemplarReport {
        confident_correct,
        most_ambiguous,
        cross_errors,
    })
}

/// The metrics artifact written by evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub confusion_mv: Option<ConfusionMatrix>,
    pub confusion_lh: Option<ConfusionMatrix>,
    pub accuracy_mv: Option<f64>,
    pub accuracy_lh: Option<f64>,
    pub zero_rule: f64,
    pub n_undecidable: u64,
    pub pearson_age_condition: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
}

impl MetricsReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Stats(format!("metrics serialization: {e}")))?;
        std::fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Stats(format!("metrics parse: {e}")))
    }
}

/// Mean retained value per condition class under three groupings: the true
/// class and the two predicted classes. `None` where a group is empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscountBars {
    pub true_mean: [Option<f64>; 3],
    pub mv_mean: [Option<f64>; 3],
    pub lh_mean: [Option<f64>; 3],
}

/// One building's inputs for the discount-bar summary.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscountSample {
    pub retained_value: f64,
    pub true_class: ConditionClass,
    pub mv: Option<ConditionClass>,
    pub lh: Option<ConditionClass>,
}

/// Groups retained values by class under each labeling and averages them.
pub fn discount_bars(samples: &[DiscountSample]) -> DiscountBars {
    fn means(pairs: impl Iterator<Item = (ConditionClass, f64)>) -> [Option<f64>; 3] {
        let mut sums = [0.0f64; 3];
        let mut counts = [0usize; 3];
        for (class, v) in pairs {
            sums[class.index()] += v;
            counts[class.index()] += 1;
        }
        let mut out = [None; 3];
        for i in 0..3 {
            if counts[i] > 0 {
                out[i] = Some(sums[i] / counts[i] as f64);
            }
        }
        out
    }
    DiscountBars {
        true_mean: means(samples.iter().map(|s| (s.true_class, s.retained_value))),
        mv_mean: means(
            samples
                .iter()
                .filter_map(|s| s.mv.map(|c| (c, s.retained_value))),
        ),
        lh_mean: means(
            samples
                .iter()
                .filter_map(|s| s.lh.map(|c| (c, s.retained_value))),
        ),
    }
}

/// Writes the discount bars as CSV: `class,true_mean,mv_mean,lh_mean`.
pub fn write_discount_csv(path: &Path, bars: &DiscountBars, provenance: Option<&str>) -> Result<()> {
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    if let Some(line) = provenance {
        writeln!(file, "# {line}").map_err(|e| Error::io(path, e))?;
    }
    writeln!(file, "class,true_mean,mv_mean,lh_mean").map_err(|e| Error::io(path, e))?;
    for class in ConditionClass::ALL {
        let cell = |v: Option<f64>| v.map_or(String::new(), format_float);
        writeln!(
            file,
            "{class},{},{},{}",
            cell(bars.true_mean[class.index()]),
            cell(bars.mv_mean[class.index()]),
            cell(bars.lh_mean[class.index()])
        )
        .map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}
