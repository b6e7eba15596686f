//! 128-dimensional gradient-orientation descriptors for square patches.

use std::f64::consts::TAU;
use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::imaging::{GradientField, GrayImage, PatchSpec};

/// Spatial cells per axis.
pub const SPATIAL_CELLS: usize = 4;
/// Orientation bins per cell.
pub const ORIENTATION_BINS: usize = 8;
/// Total descriptor length: 4 x 4 cells x 8 bins.
pub const DESCRIPTOR_LEN: usize = SPATIAL_CELLS * SPATIAL_CELLS * ORIENTATION_BINS;

/// Norm threshold below which a histogram counts as featureless and is left
/// as the zero vector instead of being normalized.
pub const NORM_FLOOR: f64 = 1e-12;

/// An L2-normalized orientation histogram plus its pre-normalization norm.
///
/// `raw_norm` is the L2 norm of the accumulated histogram before
/// normalization and acts as a contrast measure for the patch.
#[derive(Debug, Clone, PartialEq)]
pub struct Descriptor {
    values: [f64; DESCRIPTOR_LEN],
    raw_norm: f64,
}

impl Descriptor {
    pub fn values(&self) -> &[f64; DESCRIPTOR_LEN] {
        &self.values
    }

    pub fn raw_norm(&self) -> f64 {
        self.raw_norm
    }

    /// Reassembles a descriptor from stored components, e.g. a CSV row.
    pub fn from_parts(values: [f64; DESCRIPTOR_LEN], raw_norm: f64) -> Result<Self> {
        if !raw_norm.is_finite() || raw_norm < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "raw_norm {raw_norm} must be finite and non-negative"
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(
                "descriptor values must be finite".into(),
            ));
        }
        Ok(Descriptor { values, raw_norm })
    }

    fn from_histogram(mut hist: [f64; DESCRIPTOR_LEN]) -> Descriptor {
        let raw_norm = hist.iter().map(|v| v * v).sum::<f64>().sqrt();
        if raw_norm > NORM_FLOOR {
            for v in &mut hist {
                *v /= raw_norm;
            }
        } else {
            hist = [0.0; DESCRIPTOR_LEN];
        }
        Descriptor {
            values: hist,
            raw_norm,
        }
    }
}

/// A located patch with its descriptor and, optionally, its pixels.
#[derive(Debug, Clone)]
pub struct PatchRecord {
    pub spec: PatchSpec,
    pub descriptor: Descriptor,
    pub pixels: Option<GrayImage>,
}

/// Computes the descriptor of one patch from a precomputed gradient field.
///
/// The patch is divided into a 4 x 4 cell grid (cell side = `side / 4`,
/// remainder pixels joining the last row/column of cells). Every pixel adds
/// its gradient magnitude to the orientation bin `floor(theta / (2*pi/8))` of
/// its cell. The histogram is then L2-normalized; a histogram whose norm is
/// at or below [`NORM_FLOOR`] stays the zero vector.
pub fn describe(grad: &GradientField, spec: &PatchSpec) -> Result<Descriptor> {
    if spec.side < SPATIAL_CELLS {
        return Err(Error::PatchTooSmall {
            side: spec.side,
            min: SPATIAL_CELLS,
        });
    }
    if spec.x + spec.side > grad.width() || spec.y + spec.side > grad.height() {
        return Err(Error::PatchOutOfBounds {
            id: spec.image_id.clone(),
            x: spec.x,
            y: spec.y,
            side: spec.side,
            width: grad.width(),
            height: grad.height(),
        });
    }
    let cell_side = spec.side / SPATIAL_CELLS;
    let bin_width = TAU / ORIENTATION_BINS as f64;
    let mut hist = [0.0; DESCRIPTOR_LEN];
    for dy in 0..spec.side {
        let cell_y = (dy / cell_side).min(SPATIAL_CELLS - 1);
        for dx in 0..spec.side {
            let cell_x = (dx / cell_side).min(SPATIAL_CELLS - 1);
            let m = grad.magnitude(spec.x + dx, spec.y + dy);
            if m == 0.0 {
                continue;
            }
            let theta = grad.orientation(spec.x + dx, spec.y + dy);
            let bin = ((theta / bin_width) as usize).min(ORIENTATION_BINS - 1);
            hist[(cell_y * SPATIAL_CELLS + cell_x) * ORIENTATION_BINS + bin] += m;
        }
    }
    Ok(Descriptor::from_histogram(hist))
}

/// Writes patch records to CSV with columns
/// `image_id,x,y,side,raw_norm,v0..v127`. An optional provenance string is
/// emitted first as a `#` comment line.
pub fn write_patch_csv(path: &Path, patches: &[PatchRecord], provenance: Option<&str>) -> Result<()> {
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    if let Some(line) = provenance {
        writeln!(file, "# {line}").map_err(|e| Error::io(path, e))?;
    }
    let mut w = csv::Writer::from_writer(file);
    let mut header: Vec<String> = ["image_id", "x", "y", "side", "raw_norm"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend((0..DESCRIPTOR_LEN).map(|i| format!("v{i}")));
    w.write_record(&header)
        .map_err(|e| Error::csv(path, e.to_string()))?;
    for p in patches {
        let mut row: Vec<String> = vec![
            p.spec.image_id.clone(),
            p.spec.x.to_string(),
            p.spec.y.to_string(),
            p.spec.side.to_string(),
            format_float(p.descriptor.raw_norm()),
        ];
        row.extend(p.descriptor.values().iter().map(|v| format_float(*v)));
        w.write_record(&row)
            .map_err(|e| Error::csv(path, e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Reads a patch CSV produced by [`write_patch_csv`]. Pixel data is not part
/// of the format, so `pixels` is `None` on every record.
pub fn read_patch_csv(path: &Path) -> Result<Vec<PatchRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(file);
    let headers = r
        .headers()
        .map_err(|e| Error::csv(path, e.to_string()))?
        .clone();
    if headers.len() != 5 + DESCRIPTOR_LEN {
        return Err(Error::csv(
            path,
            format!(
                "expected {} columns, found {}",
                5 + DESCRIPTOR_LEN,
                headers.len()
            ),
        ));
    }
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| Error::csv(path, e.to_string()))?;
        let field = |idx: usize| -> &str { rec.get(idx).unwrap_or("") };
        let parse_usize = |idx: usize, name: &str| -> Result<usize> {
            field(idx)
                .parse()
                .map_err(|_| Error::csv(path, format!("row {}: bad {name} '{}'", i + 1, field(idx))))
        };
        let parse_f64 = |idx: usize, name: &str| -> Result<f64> {
            field(idx)
                .parse()
                .map_err(|_| Error::csv(path, format!("row {}: bad {name} '{}'", i + 1, field(idx))))
        };
        let spec = PatchSpec {
            image_id: field(0).to_string(),
            x: parse_usize(1, "x")?,
            y: parse_usize(2, "y")?,
            side: parse_usize(3, "side")?,
        };
        let raw_norm = parse_f64(4, "raw_norm")?;
        let mut values = [0.0; DESCRIPTOR_LEN];
        for (j, v) in values.iter_mut().enumerate() {
            *v = parse_f64(5 + j, "descriptor value")?;
        }
        out.push(PatchRecord {
            spec,
            descriptor: Descriptor::from_parts(values, raw_norm)?,
            pixels: None,
        });
    }
    Ok(out)
}

/// Shortest-round-trip float formatting so CSV writes reproduce exact values.
pub(crate) fn format_float(v: f64) -> String {
    let mut buf = ryu_format(v);
    if buf.ends_with(".0") {
        buf.truncate(buf.len() - 2);
    }
    buf
}

fn ryu_format(v: f64) -> String {
    // `{}` on f64 already produces the shortest string that round-trips.
    format!("{v}")
}
