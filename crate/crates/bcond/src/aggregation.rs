//! Building-level verdicts from per-patch likelihoods: ambiguity filtering,
//! majority vote, and average likelihood.

use std::io::Write as _;
use std::path::Path;

use crate::classifier::{ClassLikelihoods, ConditionModel};
use crate::dataset::ConditionClass;
use crate::descriptor::{format_float, PatchRecord};
use crate::error::{Error, Result};
use crate::imaging::{GrayImage, PatchSpec};
use crate::selection::{select_pipeline, RelevanceModel, SelectionConfig};

/// Minimum top-two likelihood gap a patch needs to count toward a verdict.
pub const DEFAULT_AMBIGUITY_THRESHOLD: f64 = 0.25;

/// How patch likelihoods are combined into one verdict.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AggregationMethod {
    MajorityVote,
    AverageLikelihood,
}

impl AggregationMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            AggregationMethod::MajorityVote => "MV",
            AggregationMethod::AverageLikelihood => "LH",
        }
    }
}

impl std::fmt::Display for AggregationMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for AggregationMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "MV" | "mv" => Ok(AggregationMethod::MajorityVote),
            "LH" | "lh" => Ok(AggregationMethod::AverageLikelihood),
            _ => Err(Error::InvalidArgument(format!(
                "unknown aggregation method '{s}' (expected MV or LH)"
            ))),
        }
    }
}

/// Likelihoods of one classified patch.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchPrediction {
    pub spec: PatchSpec,
    pub likelihoods: ClassLikelihoods,
}

/// One building-level verdict. `verdict` is `None` when every patch was
/// filtered out (the building is undecidable).
#[derive(Debug, Clone, PartialEq)]
pub struct BuildingPrediction {
    pub image_id: String,
    pub method: AggregationMethod,
    pub verdict: Option<ConditionClass>,
    /// Patches surviving the ambiguity filter.
    pub n_patches_used: usize,
    /// MV: vote shares per class. LH: the mean likelihood vector.
    pub aggregate: Option<ClassLikelihoods>,
    /// Largest single-class likelihood among the used patches.
    pub max_patch_likelihood: Option<f64>,
}

/// Keeps the predictions whose top-two margin is at least `threshold`
/// (a margin exactly at the threshold is kept).
pub fn ambiguity_filter(
    predictions: &[ClassLikelihoods],
    threshold: f64,
) -> Result<Vec<ClassLikelihoods>> {
    if !threshold.is_finite() || !(0.0..=1.0).contains(&threshold) {
        return Err(Error::InvalidArgument(format!(
            "ambiguity threshold {threshold} outside [0, 1]"
        )));
    }
    Ok(predictions
        .iter()
        .filter(|p| p.top_two_margin() >= threshold)
        .copied()
        .collect())
}

/// Majority vote over patch argmax classes. Vote ties break toward the class
/// with the larger summed likelihood over all patches, and a remaining tie
/// toward the worse class. `None` on empty input.
pub fn majority_vote(predictions: &[ClassLikelihoods]) -> Option<ConditionClass> {
    if predictions.is_empty() {
        return None;
    }
    let mut counts = [0usize; 3];
    let mut sums = [0.0f64; 3];
    for p in predictions {
        counts[p.argmax_worse_tie().index()] += 1;
        for (s, v) in sums.iter_mut().zip(p.as_array()) {
            *s += v;
        }
    }
    let mut best = ConditionClass::A;
    for class in [ConditionClass::B, ConditionClass::C] {
        let (i, b) = (class.index(), best.index());
        // `>=` on the sum lets the worse class win exact sum ties because
        // classes are scanned in worsening order.
        if counts[i] > counts[b] || (counts[i] == counts[b] && sums[i] >= sums[b]) {
            best = class;
        }
    }
    Some(best)
}

/// Element-wise mean of the likelihood vectors and its argmax (ties toward
/// the worse class). `None` on empty input.
pub fn average_likelihood(
    predictions: &[ClassLikelihoods],
) -> Option<(ConditionClass, ClassLikelihoods)> {
    if predictions.is_empty() {
        return None;
    }
    let n = predictions.len() as f64;
    let mut mean = [0.0f64; 3];
    for p in predictions {
        for (m, v) in mean.iter_mut().zip(p.as_array()) {
            *m += v / n;
        }
    }
    let sum: f64 = mean.iter().sum();
    for m in &mut mean {
        *m /= sum;
    }
    let likelihoods = ClassLikelihoods::new(mean).expect("mean of distributions is one");
    Some((likelihoods.argmax_worse_tie(), likelihoods))
}

/// Applies the ambiguity filter and one aggregation method to the patch
/// predictions of a single building.
pub fn aggregate(
    image_id: &str,
    patch_predictions: &[PatchPrediction],
    method: AggregationMethod,
    ambiguity_threshold: f64,
) -> Result<BuildingPrediction> {
    let likelihoods: Vec<ClassLikelihoods> =
        patch_predictions.iter().map(|p| p.likelihoods).collect();
    let used = ambiguity_filter(&likelihoods, ambiguity_threshold)?;
    let max_patch_likelihood = used
        .iter()
        .map(|p| p.max())
        .fold(None, |acc: Option<f64>, v| Some(acc.map_or(v, |a| a.max(v))));
    let (verdict, aggregate) = match method {
        AggregationMethod::MajorityVote => {
            let verdict = majority_vote(&used);
            let shares = if used.is_empty() {
                None
            } else {
                let n = used.len() as f64;
                let mut counts = [0.0f64; 3];
                for p in &used {
                    counts[p.argmax_worse_tie().index()] += 1.0 / n;
                }
                Some(ClassLikelihoods::new(counts).expect("vote shares sum to one"))
            };
            (verdict, shares)
        }
        AggregationMethod::AverageLikelihood => match average_likelihood(&used) {
            Some((verdict, mean)) => (Some(verdict), Some(mean)),
            None => (None, None),
        },
    };
    Ok(BuildingPrediction {
        image_id: image_id.to_string(),
        method,
        verdict,
        n_patches_used: used.len(),
        aggregate,
        max_patch_likelihood,
    })
}

/// Runs the condition model over every patch.
pub fn classify_patches(
    patches: &[PatchRecord],
    model: &ConditionModel,
) -> Result<Vec<PatchPrediction>> {
    patches
        .iter()
        .map(|p| {
            Ok(PatchPrediction {
                spec: p.spec.clone(),
                likelihoods: model.predict(p)?,
            })
        })
        .collect()
}

/// Full per-building chain: selection pipeline, patch classification, and
/// aggregation with the given method.
pub fn predict_building(
    image_id: &str,
    image: &GrayImage,
    selection: &SelectionConfig,
    relevance: Option<&RelevanceModel>,
    model: &ConditionModel,
    method: AggregationMethod,
    ambiguity_threshold: f64,
) -> Result<BuildingPrediction> {
    let mut selection = selection.clone();
    if model.mode() == crate::classifier::FeatureMode::Pixels {
        selection.keep_pixels = true;
    }
    let patches = select_pipeline(image_id, image, &selection, relevance)?;
    let predictions = classify_patches(&patches, model)?;
    aggregate(image_id, &predictions, method, ambiguity_threshold)
}

/// Writes predictions as CSV with columns
/// `image_id,method,verdict,n_patches_used,p_A,p_B,p_C,max_patch_likelihood`.
/// Undecidable rows leave the verdict and probability fields empty.
pub fn write_predictions_csv(
    path: &Path,
    predictions: &[BuildingPrediction],
    provenance: Option<&str>,
) -> Result<()> {
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    if let Some(line) = provenance {
        writeln!(file, "# {line}").map_err(|e| Error::io(path, e))?;
    }
    let mut w = csv::Writer::from_writer(file);
    w.write_record([
        "image_id",
        "method",
        "verdict",
        "n_patches_used",
        "p_A",
        "p_B",
        "p_C",
        "max_patch_likelihood",
    ])
    .map_err(|e| Error::csv(path, e.to_string()))?;
    for p in predictions {
        let probs = p.aggregate.map(|a| a.as_array());
        let prob_field = |i: usize| probs.map_or(String::new(), |a| format_float(a[i]));
        w.write_record([
            p.image_id.clone(),
            p.method.to_string(),
            p.verdict.map_or(String::new(), |v| v.to_string()),
            p.n_patches_used.to_string(),
            prob_field(0),
            prob_field(1),
            prob_field(2),
            p.max_patch_likelihood
                .map_or(String::new(), format_float),
        ])
        .map_err(|e| Error::csv(path, e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Reads a predictions CSV written by [`write_predictions_csv`].
pub fn read_predictions_csv(path: &Path) -> Result<Vec<BuildingPrediction>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(file);
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| Error::csv(path, e.to_string()))?;
        if rec.len() != 8 {
            return Err(Error::csv(
                path,
                format!("row {}: expected 8 columns, found {}", i + 1, rec.len()),
            ));
        }
        let field = |idx: usize| rec.get(idx).unwrap_or("");
        let method: AggregationMethod = field(1)
            .parse()
            .map_err(|e: Error| Error::csv(path, format!("row {}: {e}", i + 1)))?;
        let verdict = match field(2) {
            "" => None,
            s => Some(
                s.parse::<ConditionClass>()
                    .map_err(|e| Error::csv(path, format!("row {}: {e}", i + 1)))?,
            ),
        };
        let n_patches_used: usize = field(3)
            .parse()
            .map_err(|_| Error::csv(path, format!("row {}: bad n_patches_used", i + 1)))?;
        let parse_opt = |idx: usize| -> Result<Option<f64>> {
            match field(idx) {
                "" => Ok(None),
                s => s
                    .parse()
                    .map(Some)
                    .map_err(|_| Error::csv(path, format!("row {}: bad float '{s}'", i + 1))),
            }
        };
        let probs = [parse_opt(4)?, parse_opt(5)?, parse_opt(6)?];
        let aggregate = match probs {
            [Some(a), Some(b), Some(c)] => Some(
                ClassLikelihoods::new([a, b, c])
                    .map_err(|e| Error::csv(path, format!("row {}: {e}", i + 1)))?,
            ),
            [None, None, None] => None,
            _ => {
                return Err(Error::csv(
                    path,
                    format!("row {}: probability fields must be all present or all empty", i + 1),
                ))
            }
        };
        out.push(BuildingPrediction {
            image_id: field(0).to_string(),
            method,
            verdict,
            n_patches_used,
            aggregate,
            max_patch_likelihood: parse_opt(7)?,
        });
    }
    Ok(out)
}

/// Writes per-patch likelihoods as CSV with columns
/// `image_id,x,y,side,p_A,p_B,p_C`.
pub fn write_patch_predictions_csv(
    path: &Path,
    predictions: &[PatchPrediction],
    provenance: Option<&str>,
) -> Result<()> {
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    if let Some(line) = provenance {
        writeln!(file, "# {line}").map_err(|e| Error::io(path, e))?;
    }
    let mut w = csv::Writer::from_writer(file);
    w.write_record(["image_id", "x", "y", "side", "p_A", "p_B", "p_C"])
        .map_err(|e| Error::csv(path, e.to_string()))?;
    for p in predictions {
        let l = p.likelihoods.as_array();
        w.write_record([
            p.spec.image_id.clone(),
            p.spec.x.to_string(),
            p.spec.y.to_string(),
            p.spec.side.to_string(),
            format_float(l[0]),
            format_float(l[1]),
            format_float(l[2]),
        ])
        .map_err(|e| Error::csv(path, e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Reads a CSV written by [`write_patch_predictions_csv`].
pub fn read_patch_predictions_csv(path: &Path) -> Result<Vec<PatchPrediction>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(file);
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| Error::csv(path, e.to_string()))?;
        if rec.len() != 7 {
            return Err(Error::csv(
                path,
                format!("row {}: expected 7 columns, found {}", i + 1, rec.len()),
            ));
        }
        let field = |idx: usize| rec.get(idx).unwrap_or("");
        let parse_usize = |idx: usize| -> Result<usize> {
            field(idx)
                .parse()
                .map_err(|_| Error::csv(path, format!("row {}: bad integer '{}'", i + 1, field(idx))))
        };
        let parse_f64 = |idx: usize| -> Result<f64> {
            field(idx)
                .parse()
                .map_err(|_| Error::csv(path, format!("row {}: bad float '{}'", i + 1, field(idx))))
        };
        let likelihoods = ClassLikelihoods::new([parse_f64(4)?, parse_f64(5)?, parse_f64(6)?])
            .map_err(|e| Error::csv(path, format!("row {}: {e}", i + 1)))?;
        out.push(PatchPrediction {
            spec: PatchSpec {
                image_id: field(0).to_string(),
                x: parse_usize(1)?,
                y: parse_usize(2)?,
                side: parse_usize(3)?,
            },
            likelihoods,
        });
    }
    Ok(out)
}
