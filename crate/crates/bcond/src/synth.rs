//! Procedural facade images with class-dependent degradation, for exercising
//! the full pipeline without real photographs.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::dataset::{BuildingRecord, ConditionCategory, ConditionClass};
use crate::error::{Error, Result};
use crate::imaging::GrayImage;

/// What to generate: houses per class, image side, and the master seed.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    /// Houses for classes A, B, C.
    pub counts: [usize; 3],
    pub image_side: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            counts: [0, 0, 0],
            image_side: 256,
            seed: 0,
        }
    }
}

/// Construction-year range per class (inclusive): newer houses tend to be in
/// better shape, which gives the synthetic data its year/condition link.
pub const YEAR_RANGES: [(i32, i32); 3] = [(1980, 2016), (1950, 2000), (1920, 1985)];

/// True-model coefficients used to derive retained values:
/// intercept, year slope, B offset, C offset, noise standard deviation.
pub const VALUE_MODEL: (f64, f64, f64, f64, f64) = (-11.471, 0.006, -0.049, -0.090, 0.133);

/// Generates facade PNGs under `out_dir/images/` and returns their records.
///
/// Generation is sequential and fully seeded: the same spec writes
/// byte-identical files and returns identical records on every run. With all
/// counts zero nothing is written at all.
pub fn generate(spec: &SynthSpec, out_dir: &Path) -> Result<Vec<BuildingRecord>> {
    if spec.image_side < 64 {
        return Err(Error::InvalidArgument(format!(
            "image side {} too small; facades need at least 64 pixels",
            spec.image_side
        )));
    }
    let total: usize = spec.counts.iter().sum();
    let mut records = Vec::with_capacity(total);
    if total == 0 {
        return Ok(records);
    }
    let images_dir = out_dir.join("images");
    std::fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, VALUE_MODEL.4).expect("positive sigma");
    for class in ConditionClass::ALL {
        for i in 0..spec.counts[class.index()] {
            let house_id = format!("{}{i:04}", class.as_str().to_lowercase());
            let (y_lo, y_hi) = YEAR_RANGES[class.index()];
            let year = rng.random_range(y_lo..=y_hi);
            let category = sample_category(class, &mut rng);
            let mu = VALUE_MODEL.0
                + VALUE_MODEL.1 * year as f64
                + match class {
                    ConditionClass::A => 0.0,
                    ConditionClass::B => VALUE_MODEL.2,
                    ConditionClass::C => VALUE_MODEL.3,
                };
            let retained = (mu + noise.sample(&mut rng)).clamp(0.0, 1.0);
            let image = render_facade(class, spec.image_side, &mut rng);
            let rel_path = format!("images/{house_id}.png");
            image.save_png(&out_dir.join(&rel_path))?;
            records.push(BuildingRecord {
                house_id,
                images: vec![rel_path],
                category,
                year_built: year,
                retained_value: Some(retained),
                split: None,
            });
        }
    }
    Ok(records)
}

fn sample_category(class: ConditionClass, rng: &mut impl Rng) -> ConditionCategory {
    let options: &[ConditionCategory] = match class {
        ConditionClass::A => &ConditionCategory::ALL[0..2],
        ConditionClass::B => &ConditionCategory::ALL[2..4],
        ConditionClass::C => &ConditionCategory::ALL[4..9],
    };
    options[rng.random_range(0..options.len())]
}

/// Draws one facade: a shaded wall with a regular window grid, then
/// class-dependent noise, cracks, and stains (none for A, moderate for B,
/// heavy for C).
fn render_facade(class: ConditionClass, side: usize, rng: &mut impl Rng) -> GrayImage {
    let mut px = vec![0.0f64; side * side];
    let base = 0.55 + rng.random::<f64>() * 0.2;
    let shade = 0.04 * (rng.random::<f64>() - 0.5);
    for y in 0..side {
        let row_tone = base + shade * (y as f64 / side as f64);
        for x in 0..side {
            px[y * side + x] = row_tone;
        }
    }

    // Window grid: dark panes with a light sill line underneath.
    let rows = 2 + rng.random_range(0..3usize);
    let cols = 2 + rng.random_range(0..3usize);
    let pane = 0.1 + rng.random::<f64>() * 0.12;
    let cell_w = side / cols;
    let cell_h = side / rows;
    let win_w = (cell_w as f64 * 0.45) as usize;
    let win_h = (cell_h as f64 * 0.5) as usize;
    for r in 0..rows {
        for c in 0..cols {
            let x0 = c * cell_w + (cell_w - win_w) / 2;
            let y0 = r * cell_h + (cell_h - win_h) / 2;
            for y in y0..(y0 + win_h).min(side) {
                for x in x0..(x0 + win_w).min(side) {
                    px[y * side + x] = pane;
                }
            }
            let sill_y = (y0 + win_h + 1).min(side - 1);
            for x in x0..(x0 + win_w).min(side) {
                px[sill_y * side + x] = (base + 0.18).min(1.0);
            }
        }
    }

    let (noise_amp, n_cracks, n_stains) = match class {
        ConditionClass::A => (0.012, 0, 0),
        ConditionClass::B => (0.05, 2 + rng.random_range(0..2usize), 1 + rng.random_range(0..2usize)),
        ConditionClass::C => (0.12, 6 + rng.random_range(0..4usize), 3 + rng.random_range(0..3usize)),
    };

    for _ in 0..n_cracks {
        draw_crack(&mut px, side, rng);
    }
    for _ in 0..n_stains {
        draw_stain(&mut px, side, rng);
    }
    for v in &mut px {
        *v += noise_amp * (rng.random::<f64>() * 2.0 - 1.0);
        *v = v.clamp(0.0, 1.0);
    }
    GrayImage::new(side, side, px).expect("values clamped")
}

/// A dark random-walk polyline with a diagonal drift.
fn draw_crack(px: &mut [f64], side: usize, rng: &mut impl Rng) {
    let mut x = rng.random_range(0..side) as f64;
    let mut y = rng.random_range(0..side / 2) as f64;
    let length = (side as f64 * (0.3 + rng.random::<f64>() * 0.4)) as usize;
    let drift_x = rng.random::<f64>() * 2.0 - 1.0;
    for _ in 0..length {
        let xi = x as usize;
        let yi = y as usize;
        if xi >= side || yi >= side {
            break;
        }
        px[yi * side + xi] *= 0.45;
        if xi + 1 < side {
            px[yi * side + xi + 1] *= 0.7;
        }
        x += drift_x + (rng.random::<f64>() - 0.5);
        y += 0.7 + rng.random::<f64>() * 0.6;
    }
}

/// A circular darkened patch with a soft edge.
fn draw_stain(px: &mut [f64], side: usize, rng: &mut impl Rng) {
    let cx = rng.random_range(0..side) as f64;
    let cy = rng.random_range(0..side) as f64;
    let radius = side as f64 * (0.04 + rng.random::<f64>() * 0.08);
    let strength = 0.6 + rng.random::<f64>() * 0.25;
    let x0 = (cx - radius).max(0.0) as usize;
    let x1 = ((cx + radius) as usize + 1).min(side);
    let y0 = (cy - radius).max(0.0) as usize;
    let y1 = ((cy + radius) as usize + 1).min(side);
    for y in y0..y1 {
        for x in x0..x1 {
            let d = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
            if d < radius {
                // Linear falloff: full strength at the center, none at the rim.
                let w = 1.0 - d / radius;
                let factor = 1.0 - (1.0 - strength) * w;
                px[y * side + x] *= factor;
            }
        }
    }
}
