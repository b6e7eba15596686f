//! Hedonic discount regression: retained value on construction year and
//! condition-class dummies, with full OLS inference.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, FisherSnedecor, StudentsT};

use crate::config::Provenance;
use crate::dataset::ConditionClass;
use crate::error::{Error, Result};

/// Column names of the standard design: intercept, year, and the two
/// treatment dummies against the A baseline.
pub const COEFFICIENT_NAMES: [&str; 4] = ["(Intercept)", "year_built", "B/A", "C/A"];

/// Relative singular-value cutoff below which the design counts as rank
/// deficient.
const RANK_TOLERANCE: f64 = 1e-10;

/// Builds the design matrix and response for the standard model
/// `retained ~ 1 + year + [B] + [C]`. Records without a retained value are
/// excluded; the count of exclusions is returned.
pub fn build_design(
    records: &[(i32, ConditionClass, Option<f64>)],
) -> Result<(DMatrix<f64>, DVector<f64>, usize)> {
    let mut rows = Vec::new();
    let mut response = Vec::new();
    let mut excluded = 0usize;
    for &(year, class, retained) in records {
        match retained {
            Some(v) => {
                rows.push([
                    1.0,
                    year as f64,
                    if class == ConditionClass::B { 1.0 } else { 0.0 },
                    if class == ConditionClass::C { 1.0 } else { 0.0 },
                ]);
                response.push(v);
            }
            None => excluded += 1,
        }
    }
    if rows.is_empty() {
        return Err(Error::EmptyInput("regression rows with a retained value"));
    }
    let x = DMatrix::from_fn(rows.len(), 4, |i, j| rows[i][j]);
    Ok((x, DVector::from_vec(response), excluded))
}

/// A fitted linear model with the usual inference statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionFit {
    pub names: Vec<String>,
    pub coefficients: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub t_values: Vec<f64>,
    pub p_values: Vec<f64>,
    pub r_squared: f64,
    pub adj_r_squared: f64,
    /// Residual standard error, `sqrt(RSS / dof)`.
    pub sigma: f64,
    pub f_statistic: f64,
    pub f_p_value: f64,
    pub n: usize,
    pub dof: usize,
}

/// Ordinary least squares via SVD on the column-equilibrated design.
///
/// Each column is scaled to unit norm before decomposition, which keeps the
/// condition number small for designs mixing magnitudes like an intercept
/// and calendar years; estimates are mapped back to the original scale.
pub fn ols_fit(x: &DMatrix<f64>, y: &DVector<f64>, names: &[&str]) -> Result<RegressionFit> {
    let (n, p) = (x.nrows(), x.ncols());
    if p == 0 {
        return Err(Error::EmptyInput("design matrix columns"));
    }
    if names.len() != p {
        return Err(Error::LengthMismatch {
            context: "coefficient names",
            expected: p,
            got: names.len(),
        });
    }
    if y.len() != n {
        return Err(Error::LengthMismatch {
            context: "response vector",
            expected: n,
            got: y.len(),
        });
    }
    if n < p + 1 {
        return Err(Error::Stats(format!(
            "need at least {} observations for {p} coefficients, got {n}",
            p + 1
        )));
    }
    let mut scale = vec![0.0f64; p];
    for j in 0..p {
        scale[j] = x.column(j).norm();
        if scale[j] == 0.0 {
            return Err(Error::SingularDesign {
                column: names[j].to_string(),
            });
        }
    }
    let mut scaled = x.clone();
    for j in 0..p {
        let mut col = scaled.column_mut(j);
        col /= scale[j];
    }
    let svd = scaled.svd(true, true);
    let sv = &svd.singular_values;
    let v_t = svd.v_t.as_ref().expect("v_t requested");
    let u = svd.u.as_ref().expect("u requested");
    if sv[p - 1] <= sv[0] * RANK_TOLERANCE {
        // The row of V^T for the vanishing singular value spans the null
        // space; its largest component points at the dependent column.
        let null = v_t.row(p - 1);
        let col = (0..p)
            .max_by(|&a, &b| null[a].abs().partial_cmp(&null[b].abs()).unwrap())
            .unwrap();
        return Err(Error::SingularDesign {
            column: names[col].to_string(),
        });
    }
    let mut w = u.transpose() * y;
    for i in 0..p {
        w[i] /= sv[i];
    }
    let beta_scaled = v_t.transpose() * w;
    let coefficients: Vec<f64> = (0..p).map(|j| beta_scaled[j] / scale[j]).collect();

    let beta = DVector::from_vec(coefficients.clone());
    let residuals = y - x * &beta;
    let rss = residuals.norm_squared();
    let ybar = y.mean();
    let tss: f64 = y.iter().map(|v| (v - ybar) * (v - ybar)).sum();
    if tss == 0.0 {
        return Err(Error::Stats("response is constant; R^2 undefined".into()));
    }
    let dof = n - p;
    let sigma2 = rss / dof as f64;
    let mut std_errors = vec![0.0f64; p];
    for j in 0..p {
        // [(X'X)^-1]_jj of the scaled design is sum_k V[j,k]^2 / sv_k^2.
        let mut inv_jj = 0.0;
        for k in 0..p {
            let v = v_t[(k, j)];
            inv_jj += v * v / (sv[k] * sv[k]);
        }
        std_errors[j] = (sigma2 * inv_jj).sqrt() / scale[j];
    }
    let t_values: Vec<f64> = coefficients
        .iter()
        .zip(&std_errors)
        .map(|(b, se)| b / se)
        .collect();
    let t_dist = StudentsT::new(0.0, 1.0, dof as f64)
        .map_err(|e| Error::Stats(format!("t distribution: {e}")))?;
    let p_values: Vec<f64> = t_values
        .iter()
        .map(|t| 2.0 * (1.0 - t_dist.cdf(t.abs())))
        .collect();
    let r_squared = 1.0 - rss / tss;
    let adj_r_squared = 1.0 - (1.0 - r_squared) * (n as f64 - 1.0) / dof as f64;
    let f_statistic = (r_squared / (p as f64 - 1.0)) / ((1.0 - r_squared) / dof as f64);
    let f_dist = FisherSnedecor::new(p as f64 - 1.0, dof as f64)
        .map_err(|e| Error::Stats(format!("F distribution: {e}")))?;
    let f_p_value = 1.0 - f_dist.cdf(f_statistic);
    Ok(RegressionFit {
        names: names.iter().map(|s| s.to_string()).collect(),
        coefficients,
        std_errors,
        t_values,
        p_values,
        r_squared,
        adj_r_squared,
        sigma: sigma2.sqrt(),
        f_statistic,
        f_p_value,
        n,
        dof,
    })
}

/// Predicted retained value under the standard design.
pub fn predict_value(fit: &RegressionFit, year: i32, class: ConditionClass) -> Result<f64> {
    if fit.names != COEFFICIENT_NAMES {
        return Err(Error::InvalidArgument(
            "fit does not use the standard year + class-dummy design".into(),
        ));
    }
    let c = &fit.coefficients;
    Ok(c[0]
        + c[1] * year as f64
        + match class {
            ConditionClass::A => 0.0,
            ConditionClass::B => c[2],
            ConditionClass::C => c[3],
        })
}

/// Conventional significance stars for a p-value.
pub fn significance_stars(p: f64) -> &'static str {
    if p < 0.001 {
        "***"
    } else if p < 0.01 {
        "**"
    } else if p < 0.05 {
        "*"
    } else {
        ""
    }
}

/// One building's inputs to the model comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct ValuationRow {
    pub year_built: i32,
    pub retained_value: Option<f64>,
    pub true_class: ConditionClass,
    pub mv: Option<ConditionClass>,
    pub lh: Option<ConditionClass>,
}

/// One labeled fit inside a comparison report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionColumn {
    pub label: String,
    pub fit: RegressionFit,
    /// Rows dropped for this column (missing retained value or, for
    /// predicted columns, an undecidable verdict).
    pub n_excluded: usize,
}

/// Side-by-side fits of the same design under different class labelings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionReport {
    pub columns: Vec<RegressionColumn>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
}

/// Fits the discount model three times: with true classes and with each
/// classifier's verdicts. Rows whose verdict is undecidable are dropped from
/// the corresponding predicted-class column only.
pub fn compare_models(rows: &[ValuationRow]) -> Result<RegressionReport> {
    if rows.is_empty() {
        return Err(Error::EmptyInput("valuation rows"));
    }
    let mut columns = Vec::new();
    let variants: [(&str, Box<dyn Fn(&ValuationRow) -> Option<ConditionClass>>); 3] = [
        ("True", Box::new(|r: &ValuationRow| Some(r.true_class))),
        ("MV", Box::new(|r: &ValuationRow| r.mv)),
        ("LH", Box::new(|r: &ValuationRow| r.lh)),
    ];
    for (label, class_of) in variants {
        let mut records = Vec::new();
        let mut undecidable = 0usize;
        for row in rows {
            match class_of(row) {
                Some(class) => records.push((row.year_built, class, row.retained_value)),
                None => undecidable += 1,
            }
        }
        if records.is_empty() {
            return Err(Error::Stats(format!(
                "no rows with a {label} class assignment"
            )));
        }
        let (x, y, excluded) = build_design(&records)?;
        let fit = ols_fit(&x, &y, &COEFFICIENT_NAMES)?;
        columns.push(RegressionColumn {
            label: label.to_string(),
            fit,
            n_excluded: excluded + undecidable,
        });
    }
    Ok(RegressionReport {
        columns,
        provenance: None,
    })
}

impl RegressionReport {
    /// Renders the comparison as an aligned text table: one row per
    /// coefficient (standard errors parenthesized beneath), then n,
    /// adjusted R^2, sigma, and F.
    pub fn to_table(&self) -> String {
        const CELL: usize = 12;
        let names = &self.columns[0].fit.names;
        let label_width = names
            .iter()
            .map(|n| n.len())
            .chain(["adj. R^2".len()].into_iter())
            .max()
            .unwrap_or(8)
            + 2;
        let mut out = String::new();
        out.push_str(&format!("{:<label_width$}", ""));
        for col in &self.columns {
            out.push_str(&format!("{:>CELL$}", col.label));
        }
        out.push('\n');
        for (i, name) in names.iter().enumerate() {
            out.push_str(&format!("{name:<label_width$}"));
            for col in &self.columns {
                let cell = format!(
                    "{:.3}{}",
                    col.fit.coefficients[i],
                    significance_stars(col.fit.p_values[i])
                );
                out.push_str(&format!("{cell:>CELL$}"));
            }
            out.push('\n');
            out.push_str(&format!("{:<label_width$}", ""));
            for col in &self.columns {
                let cell = format!("({:.3})", col.fit.std_errors[i]);
                out.push_str(&format!("{cell:>CELL$}"));
            }
            out.push('\n');
        }
        let mut summary_row = |label: &str, f: &dyn Fn(&RegressionFit) -> String| {
            out.push_str(&format!("{label:<label_width$}"));
            for col in &self.columns {
                out.push_str(&format!("{:>CELL$}", f(&col.fit)));
            }
            out.push('\n');
        };
        summary_row("n", &|f| f.n.to_string());
        summary_row("adj. R^2", &|f| format!("{:.3}", f.adj_r_squared));
        summary_row("sigma", &|f| format!("{:.3}", f.sigma));
        summary_row("F", &|f| format!("{:.3}", f.f_statistic));
        out
    }

    pub fn write_json(&self, path: &std::path::Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Stats(format!("regression serialization: {e}")))?;
        std::fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Stats(format!("regression parse: {e}")))
    }
}
