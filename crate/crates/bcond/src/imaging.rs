//! Grayscale rasters, gradient fields, and the dense multi-scale patch grid.

use std::f64::consts::TAU;
use std::path::Path;

use crate::error::{Error, Result};

/// Largest side an image may have before extraction; bigger inputs are
/// downscaled so that the longest side equals this value.
pub const MAX_IMAGE_SIDE: usize = 1024;

/// Row-major luminance raster with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidArgument(
                "image dimensions must be positive".into(),
            ));
        }
        if pixels.len() != width * height {
            return Err(Error::LengthMismatch {
                context: "image pixel buffer",
                expected: width * height,
                got: pixels.len(),
            });
        }
        if let Some(bad) = pixels.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::InvalidArgument(format!(
                "pixel value {bad} outside [0, 1]"
            )));
        }
        Ok(GrayImage {
            width,
            height,
            pixels,
        })
    }

    /// Builds an image from a per-coordinate function; values are clamped to `[0, 1]`.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidArgument(
                "image dimensions must be positive".into(),
            ));
        }
        let mut pixels = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(x, y).clamp(0.0, 1.0));
            }
        }
        Ok(GrayImage {
            width,
            height,
            pixels,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        debug_assert!(x < self.width && y < self.height);
        self.pixels[y * self.width + x]
    }

    /// Bilinear resample to the requested dimensions.
    pub fn resize_bilinear(&self, new_width: usize, new_height: usize) -> Result<GrayImage> {
        if new_width == 0 || new_height == 0 {
            return Err(Error::InvalidArgument(
                "resize target must be positive".into(),
            ));
        }
        let sx = self.width as f64 / new_width as f64;
        let sy = self.height as f64 / new_height as f64;
        let mut pixels = Vec::with_capacity(new_width * new_height);
        for y in 0..new_height {
            // Sample at pixel centers so up- and downscaling stay symmetric.
            let src_y = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            let y0 = src_y.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let fy = src_y - y0 as f64;
            for x in 0..new_width {
                let src_x = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
                let x0 = src_x.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let fx = src_x - x0 as f64;
                let top = self.get(x0, y0) * (1.0 - fx) + self.get(x1, y0) * fx;
                let bottom = self.get(x0, y1) * (1.0 - fx) + self.get(x1, y1) * fx;
                pixels.push((top * (1.0 - fy) + bottom * fy).clamp(0.0, 1.0));
            }
        }
        Ok(GrayImage {
            width: new_width,
            height: new_height,
            pixels,
        })
    }

    /// Downscales so the longest side equals `max_side`, preserving aspect
    /// ratio; returns a clone when the image is already small enough.
    pub fn downscale_to_max(&self, max_side: usize) -> Result<GrayImage> {
        if max_side == 0 {
            return Err(Error::InvalidArgument("max side must be positive".into()));
        }
        let longest = self.width.max(self.height);
        if longest <= max_side {
            return Ok(self.clone());
        }
        let scale = max_side as f64 / longest as f64;
        let new_w = ((self.width as f64 * scale).round() as usize).max(1);
        let new_h = ((self.height as f64 * scale).round() as usize).max(1);
        self.resize_bilinear(new_w, new_h)
    }

    pub fn flip_horizontal(&self) -> GrayImage {
        let mut pixels = Vec::with_capacity(self.pixels.len());
        for y in 0..self.height {
            for x in 0..self.width {
                pixels.push(self.get(self.width - 1 - x, y));
            }
        }
        GrayImage {
            width: self.width,
            height: self.height,
            pixels,
        }
    }

    pub fn mean(&self) -> f64 {
        self.pixels.iter().sum::<f64>() / self.pixels.len() as f64
    }

    /// Quantizes to 8-bit for writing PNG files.
    pub fn to_luma8(&self) -> image::ImageBuffer<image::Luma<u8>, Vec<u8>> {
        let bytes: Vec<u8> = self
            .pixels
            .iter()
            .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect();
        image::ImageBuffer::from_raw(self.width as u32, self.height as u32, bytes)
            .expect("buffer length matches dimensions")
    }

    /// Writes the image as an 8-bit grayscale PNG.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_luma8().save(path).map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::ImageDecode {
                path: path.into(),
                source: Box::new(other),
            },
        })
    }
}

/// Per-pixel gradient magnitude and orientation for one image.
///
/// Orientations lie in `[0, 2*pi)`; the magnitude at a zero gradient is 0 and
/// its orientation is reported as 0.
#[derive(Debug, Clone)]
pub struct GradientField {
    width: usize,
    height: usize,
    magnitude: Vec<f64>,
    orientation: Vec<f64>,
}

impl GradientField {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn magnitude(&self, x: usize, y: usize) -> f64 {
        debug_assert!(x < self.width && y < self.height);
        self.magnitude[y * self.width + x]
    }

    #[inline]
    pub fn orientation(&self, x: usize, y: usize) -> f64 {
        debug_assert!(x < self.width && y < self.height);
        self.orientation[y * self.width + x]
    }
}

/// Location of one square patch inside a named image.
#[derive(Debug, Clone, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct PatchSpec {
    pub image_id: String,
    pub x: usize,
    pub y: usize,
    pub side: usize,
}

impl std::fmt::Display for PatchSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}@({},{})x{}", self.image_id, self.x, self.y, self.side)
    }
}

/// Loads an image file and converts it to luminance.
///
/// Color inputs are reduced with weights 0.299 / 0.587 / 0.114 on R / G / B.
pub fn load_gray(path: &Path) -> Result<GrayImage> {
    let decoded = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::ImageDecode {
            path: path.into(),
            source: Box::new(other),
        },
    })?;
    let rgb = decoded.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut pixels = Vec::with_capacity(w * h);
    for p in rgb.pixels() {
        let r = p.0[0] as f64 / 255.0;
        let g = p.0[1] as f64 / 255.0;
        let b = p.0[2] as f64 / 255.0;
        // Integer-weight form so pure gray levels convert exactly.
        pixels.push((299.0 * r + 587.0 * g + 114.0 * b) / 1000.0);
    }
    GrayImage::new(w, h, pixels)
}

/// Central-difference gradients, one-sided at the borders.
pub fn compute_gradients(img: &GrayImage) -> Result<GradientField> {
    let (w, h) = (img.width, img.height);
    if w < 3 || h < 3 {
        return Err(Error::ImageTooSmall {
            width: w,
            height: h,
            min: 3,
            op: "gradient computation",
        });
    }
    let mut magnitude = Vec::with_capacity(w * h);
    let mut orientation = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let dx = if x == 0 {
                img.get(1, y) - img.get(0, y)
            } else if x == w - 1 {
                img.get(w - 1, y) - img.get(w - 2, y)
            } else {
                (img.get(x + 1, y) - img.get(x - 1, y)) / 2.0
            };
            let dy = if y == 0 {
                img.get(x, 1) - img.get(x, 0)
            } else if y == h - 1 {
                img.get(x, h - 1) - img.get(x, h - 2)
            } else {
                (img.get(x, y + 1) - img.get(x, y - 1)) / 2.0
            };
            magnitude.push((dx * dx + dy * dy).sqrt());
            let mut theta = dy.atan2(dx);
            if theta < 0.0 {
                theta += TAU;
            }
            // atan2 of a tiny negative dy rounds to exactly 2*pi after the
            // shift; fold that back onto 0.
            if theta >= TAU {
                theta = 0.0;
            }
            orientation.push(theta);
        }
    }
    Ok(GradientField {
        width: w,
        height: h,
        magnitude,
        orientation,
    })
}

/// Enumerates the dense multi-scale grid over an image of the given size.
///
/// For each scale `s` the window steps by `round(s * stride_fraction)` pixels
/// (at least 1) and only fully contained windows are kept. Scales larger than
/// the image contribute nothing. Patches are ordered by scale in the order
/// given, then row-major within a scale.
pub fn dense_grid(
    width: usize,
    height: usize,
    scales: &[usize],
    stride_fraction: f64,
    image_id: &str,
) -> Result<Vec<PatchSpec>> {
    if scales.is_empty() {
        return Err(Error::EmptyInput("scale list"));
    }
    if scales.iter().any(|&s| s == 0) {
        return Err(Error::InvalidArgument("scale 0 is not a patch size".into()));
    }
    if !(stride_fraction > 0.0 && stride_fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "stride fraction {stride_fraction} outside (0, 1]"
        )));
    }
    let mut specs = Vec::new();
    for &side in scales {
        if side > width || side > height {
            continue;
        }
        let step = ((side as f64 * stride_fraction).round() as usize).max(1);
        let mut y = 0;
        while y + side <= height {
            let mut x = 0;
            while x + side <= width {
                specs.push(PatchSpec {
                    image_id: image_id.to_string(),
                    x,
                    y,
                    side,
                });
                x += step;
            }
            y += step;
        }
    }
    Ok(specs)
}

/// Copies the pixels of one patch out of an image.
pub fn crop(img: &GrayImage, spec: &PatchSpec) -> Result<GrayImage> {
    if spec.side == 0 {
        return Err(Error::InvalidArgument("patch side must be positive".into()));
    }
    if spec.x + spec.side > img.width || spec.y + spec.side > img.height {
        return Err(Error::PatchOutOfBounds {
            id: spec.image_id.clone(),
            x: spec.x,
            y: spec.y,
            side: spec.side,
            width: img.width,
            height: img.height,
        });
    }
    let mut pixels = Vec::with_capacity(spec.side * spec.side);
    for y in spec.y..spec.y + spec.side {
        for x in spec.x..spec.x + spec.side {
            pixels.push(img.get(x, y));
        }
    }
    Ok(GrayImage {
        width: spec.side,
        height: spec.side,
        pixels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn spec(x: usize, y: usize, side: usize) -> PatchSpec {
        PatchSpec {
            image_id: "img".into(),
            x,
            y,
            side,
        }
    }

    #[test]
    fn luminance_of_white_is_exactly_one() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("white.png");
        let buf = image::RgbImage::from_pixel(2, 2, image::Rgb([255, 255, 255]));
        buf.save(&path).unwrap();
        let img = load_gray(&path).unwrap();
        assert_eq!(img.width(), 2);
        assert_eq!(img.height(), 2);
        assert!(img.pixels().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn luminance_of_pure_red_is_exactly_0_299() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("red.png");
        let buf = image::RgbImage::from_pixel(1, 1, image::Rgb([255, 0, 0]));
        buf.save(&path).unwrap();
        let img = load_gray(&path).unwrap();
        assert_eq!(img.get(0, 0), 0.299);
    }

    #[test]
    fn load_missing_file_reports_path() {
        let err = load_gray(Path::new("/nonexistent/zz.png")).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("/nonexistent/zz.png"), "{msg}");
    }

    #[test]
    fn gradients_of_horizontal_ramp() {
        // I(x, y) = x / 2 on a 3x3 image.
        let img = GrayImage::from_fn(3, 3, |x, _| x as f64 / 2.0).unwrap();
        let g = compute_gradients(&img).unwrap();
        // Central difference at the interior column: (1.0 - 0.0) / 2.
        assert_relative_eq!(g.magnitude(1, 1), 0.5, max_relative = 1e-12);
        assert_relative_eq!(g.orientation(1, 1), 0.0, epsilon = 1e-12);
        // One-sided at the left/right borders gives the same slope here.
        assert_relative_eq!(g.magnitude(0, 1), 0.5, max_relative = 1e-12);
        assert_relative_eq!(g.magnitude(2, 1), 0.5, max_relative = 1e-12);
    }

    #[test]
    fn gradient_of_constant_image_is_zero_with_zero_orientation() {
        let img = GrayImage::from_fn(4, 4, |_, _| 0.6).unwrap();
        let g = compute_gradients(&img).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                assert_eq!(g.magnitude(x, y), 0.0);
                assert_eq!(g.orientation(x, y), 0.0);
            }
        }
    }

    #[test]
    fn orientation_always_in_zero_two_pi() {
        let img = GrayImage::from_fn(5, 5, |x, y| {
            ((x * 7 + y * 13) % 11) as f64 / 10.0
        })
        .unwrap();
        let g = compute_gradients(&img).unwrap();
        for y in 0..5 {
            for x in 0..5 {
                let o = g.orientation(x, y);
                assert!((0.0..TAU).contains(&o), "orientation {o} out of range");
            }
        }
    }

    #[test]
    fn gradients_need_three_pixels_per_side() {
        let img = GrayImage::from_fn(2, 5, |_, _| 0.5).unwrap();
        assert!(matches!(
            compute_gradients(&img),
            Err(Error::ImageTooSmall { .. })
        ));
    }

    #[test]
    fn dense_grid_256_scale_64_half_stride() {
        let specs = dense_grid(256, 256, &[64], 0.5, "img").unwrap();
        // Step 32, positions 0..=192 in each axis.
        assert_eq!(specs.len(), 49);
        assert_eq!(specs[0], spec(0, 0, 64));
        assert_eq!(specs[1], spec(32, 0, 64));
        assert_eq!(specs[48], spec(192, 192, 64));
        for s in &specs {
            assert!(s.x + s.side <= 256 && s.y + s.side <= 256);
        }
    }

    #[test]
    fn dense_grid_skips_scales_larger_than_image() {
        let specs = dense_grid(32, 32, &[64], 0.5, "img").unwrap();
        assert!(specs.is_empty());
        let specs = dense_grid(100, 100, &[64, 128], 0.5, "img").unwrap();
        assert!(specs.iter().all(|s| s.side == 64));
        assert!(!specs.is_empty());
    }

    #[test]
    fn dense_grid_rejects_bad_stride() {
        assert!(dense_grid(64, 64, &[32], 0.0, "img").is_err());
        assert!(dense_grid(64, 64, &[32], 1.5, "img").is_err());
        assert!(dense_grid(64, 64, &[], 0.5, "img").is_err());
    }

    #[test]
    fn grid_ordering_is_scale_then_row_major() {
        let specs = dense_grid(128, 128, &[64, 128], 0.5, "img").unwrap();
        let first_128 = specs.iter().position(|s| s.side == 128).unwrap();
        assert!(specs[..first_128].iter().all(|s| s.side == 64));
        let coords: Vec<(usize, usize)> = specs[..first_128].iter().map(|s| (s.y, s.x)).collect();
        let mut sorted = coords.clone();
        sorted.sort();
        assert_eq!(coords, sorted);
    }

    #[test]
    fn crop_matches_source_region() {
        let img = GrayImage::from_fn(8, 8, |x, y| (x + 8 * y) as f64 / 64.0).unwrap();
        let patch = crop(&img, &spec(2, 3, 4)).unwrap();
        assert_eq!(patch.width(), 4);
        for y in 0..4 {
            for x in 0..4 {
                assert_eq!(patch.get(x, y), img.get(2 + x, 3 + y));
            }
        }
    }

    #[test]
    fn crop_out_of_bounds_is_an_error() {
        let img = GrayImage::from_fn(8, 8, |_, _| 0.5).unwrap();
        assert!(matches!(
            crop(&img, &spec(6, 6, 4)),
            Err(Error::PatchOutOfBounds { .. })
        ));
    }

    #[test]
    fn downscale_preserves_aspect_and_caps_longest_side() {
        let img = GrayImage::from_fn(2048, 1024, |x, _| (x % 7) as f64 / 7.0).unwrap();
        let small = img.downscale_to_max(1024).unwrap();
        assert_eq!(small.width(), 1024);
        assert_eq!(small.height(), 512);
        let untouched = small.downscale_to_max(1024).unwrap();
        assert_eq!(untouched, small);
    }

    #[test]
    fn resize_of_constant_image_is_constant() {
        let img = GrayImage::from_fn(10, 10, |_, _| 0.25).unwrap();
        let out = img.resize_bilinear(7, 13).unwrap();
        assert!(out.pixels().iter().all(|&v| (v - 0.25).abs() < 1e-12));
    }

    #[test]
    fn flip_twice_is_identity() {
        let img = GrayImage::from_fn(9, 4, |x, y| ((x * 31 + y * 17) % 13) as f64 / 13.0).unwrap();
        assert_eq!(img.flip_horizontal().flip_horizontal(), img);
        assert_eq!(img.flip_horizontal().get(0, 2), img.get(8, 2));
    }
}
