//! Per-image patch selection: k-means representatives, the contrast filter,
//! and the optional relevance filter.

use std::collections::HashSet;
use std::io::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::classifier::{
    read_softmax_file, write_softmax_file, SoftmaxRegression, TrainConfig,
};
use crate::descriptor::{describe, format_float, Descriptor, PatchRecord};
use crate::error::{Error, Result};
use crate::imaging::{compute_gradients, crop, dense_grid, GrayImage, MAX_IMAGE_SIDE};

/// Maximum Lloyd iterations before k-means stops regardless of convergence.
pub const KMEANS_MAX_ITERS: usize = 300;

/// Settings for the per-image extraction and selection pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionConfig {
    /// Patch sides in pixels.
    pub scales: Vec<usize>,
    /// Step between windows as a fraction of the patch side.
    pub stride_fraction: f64,
    /// Clusters per image.
    pub k: usize,
    /// Fraction of representatives kept by the contrast filter.
    pub t: f64,
    /// Master seed; the per-image k-means seed is derived from it and the
    /// image id.
    pub seed: u64,
    /// Keep patch pixels on the records (needed for dumping and for pixel
    /// feature mode).
    pub keep_pixels: bool,
    /// Images with a longer side are downscaled to this first.
    pub max_image_side: usize,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig {
            scales: vec![64, 96, 128, 192],
            stride_fraction: 0.5,
            k: 50,
            t: 0.21,
            seed: 0,
            keep_pixels: false,
            max_image_side: MAX_IMAGE_SIDE,
        }
    }
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() {
            return Err(Error::EmptyInput("scale list"));
        }
        if self.scales.iter().any(|&s| s == 0) {
            return Err(Error::InvalidArgument("scale 0 is not a patch size".into()));
        }
        if !(self.stride_fraction > 0.0 && self.stride_fraction <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "stride fraction {} outside (0, 1]",
                self.stride_fraction
            )));
        }
        if self.k == 0 {
            return Err(Error::InvalidArgument("k must be >= 1".into()));
        }
        if !(self.t > 0.0 && self.t <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "contrast fraction {} outside (0, 1]",
                self.t
            )));
        }
        if self.max_image_side == 0 {
            return Err(Error::InvalidArgument("max image side must be positive".into()));
        }
        Ok(())
    }
}

/// Outcome of one k-means run.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterResult {
    /// Effective cluster count (may be below the requested k when the data
    /// has fewer distinct points).
    pub k: usize,
    pub centroids: Vec<Vec<f64>>,
    /// Cluster index per input point.
    pub assignment: Vec<usize>,
    /// Sum of squared distances from each point to its centroid.
    pub inertia: f64,
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest_centroid(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, c) in centroids.iter().enumerate() {
        let d = squared_distance(point, c);
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    (best, best_d)
}

/// Lloyd's algorithm with k-means++ seeding on squared Euclidean distance.
///
/// The requested `k` is reduced to the number of distinct points when the
/// input has duplicates. A cluster left empty after an update is re-seeded
/// with the point farthest from that cluster's previous centroid (ties to
/// the lowest point index). Runs are fully determined by `seed`.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64) -> Result<ClusterResult> {
    if points.is_empty() {
        return Err(Error::EmptyInput("k-means points"));
    }
    if k == 0 {
        return Err(Error::InvalidArgument("k must be >= 1".into()));
    }
    let dim = points[0].len();
    if dim == 0 {
        return Err(Error::InvalidArgument("points must have dimension >= 1".into()));
    }
    if let Some(p) = points.iter().find(|p| p.len() != dim) {
        return Err(Error::LengthMismatch {
            context: "k-means point",
            expected: dim,
            got: p.len(),
        });
    }
    let mut distinct: HashSet<Vec<u64>> = HashSet::new();
    for p in points {
        distinct.insert(p.iter().map(|v| v.to_bits()).collect());
    }
    let k = k.min(distinct.len());

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    centroids.push(points[rng.random_range(0..points.len())].clone());
    let mut d2: Vec<f64> = points
        .iter()
        .map(|p| squared_distance(p, &centroids[0]))
        .collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        // total > 0 because fewer centroids than distinct points exist.
        let r = rng.random::<f64>() * total;
        let mut cum = 0.0;
        let mut chosen = points.len() - 1;
        for (i, &w) in d2.iter().enumerate() {
            cum += w;
            if cum > r {
                chosen = i;
                break;
            }
        }
        centroids.push(points[chosen].clone());
        for (i, p) in points.iter().enumerate() {
            let d = squared_distance(p, centroids.last().unwrap());
            if d < d2[i] {
                d2[i] = d;
            }
        }
    }

    let mut assignment: Vec<usize> = points
        .iter()
        .map(|p| nearest_centroid(p, &centroids).0)
        .collect();
    for _ in 0..KMEANS_MAX_ITERS {
        let previous = centroids.clone();
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assignment) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for s in &mut sums[c] {
                    *s /= counts[c] as f64;
                }
                centroids[c] = sums[c].clone();
            } else {
                // Re-seed at the point farthest from the old centroid.
                let mut far = 0;
                let mut far_d = f64::NEG_INFINITY;
                for (i, p) in points.iter().enumerate() {
                    let d = squared_distance(p, &previous[c]);
                    if d > far_d {
                        far_d = d;
                        far = i;
                    }
                }
                centroids[c] = points[far].clone();
            }
        }
        let next: Vec<usize> = points
            .iter()
            .map(|p| nearest_centroid(p, &centroids).0)
            .collect();
        if next == assignment {
            break;
        }
        assignment = next;
    }
    let inertia = points
        .iter()
        .zip(&assignment)
        .map(|(p, &a)| squared_distance(p, &centroids[a]))
        .sum();
    Ok(ClusterResult {
        k,
        centroids,
        assignment,
        inertia,
    })
}

/// Picks, for every cluster, the member patch nearest the centroid (ties to
/// the lowest patch index). Output is ordered by cluster index.
pub fn select_representatives(
    patches: &[PatchRecord],
    clustering: &ClusterResult,
) -> Result<Vec<PatchRecord>> {
    if clustering.assignment.len() != patches.len() {
        return Err(Error::LengthMismatch {
            context: "cluster assignment",
            expected: patches.len(),
            got: clustering.assignment.len(),
        });
    }
    let mut reps = Vec::with_capacity(clustering.k);
    for c in 0..clustering.k {
        let mut best: Option<(usize, f64)> = None;
        for (i, &a) in clustering.assignment.iter().enumerate() {
            if a != c {
                continue;
            }
            let d = squared_distance(patches[i].descriptor.values(), &clustering.centroids[c]);
            if best.map_or(true, |(_, bd)| d < bd) {
                best = Some((i, d));
            }
        }
        if let Some((i, _)) = best {
            reps.push(patches[i].clone());
        }
    }
    Ok(reps)
}

/// Keeps the `ceil(t * n)` representatives with the largest raw descriptor
/// norm, where `n` is the input length. Zero-norm (featureless) patches are
/// dropped regardless. Relative input order is preserved.
pub fn contrast_filter(reps: &[PatchRecord], t: f64) -> Result<Vec<PatchRecord>> {
    if !(t > 0.0 && t <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "contrast fraction {t} outside (0, 1]"
        )));
    }
    let n = reps.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let keep = (t * n as f64).ceil() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        reps[b]
            .descriptor
            .raw_norm()
            .partial_cmp(&reps[a].descriptor.raw_norm())
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let kept: HashSet<usize> = order
        .into_iter()
        .take(keep)
        .filter(|&i| reps[i].descriptor.raw_norm() > 0.0)
        .collect();
    Ok(reps
        .iter()
        .enumerate()
        .filter(|(i, _)| kept.contains(i))
        .map(|(_, p)| p.clone())
        .collect())
}

/// A patch-level relevance classifier: softmax regression over descriptor
/// features with one designated building-related class.
#[derive(Debug, Clone, PartialEq)]
pub struct RelevanceModel {
    softmax: SoftmaxRegression,
    class_names: Vec<String>,
    building_class: usize,
    seed: u64,
    config_hash: u64,
}

impl RelevanceModel {
    pub fn n_classes(&self) -> usize {
        self.softmax.n_classes()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn building_class(&self) -> usize {
        self.building_class
    }

    pub fn set_config_hash(&mut self, hash: u64) {
        self.config_hash = hash;
    }

    pub fn config_hash(&self) -> u64 {
        self.config_hash
    }

    /// Probabilities over the relevance classes for one descriptor.
    pub fn predict_probs(&self, descriptor: &Descriptor) -> Result<Vec<f64>> {
        self.softmax.predict_probs(descriptor.values().as_slice())
    }

    /// True when the building-related class is the argmax (ties resolve to
    /// the lowest class index, so a tie with an irrelevant class rejects).
    pub fn is_relevant(&self, descriptor: &Descriptor) -> Result<bool> {
        let probs = self.predict_probs(descriptor)?;
        let mut argmax = 0;
        for (i, &p) in probs.iter().enumerate() {
            if p > probs[argmax] {
                argmax = i;
            }
        }
        Ok(argmax == self.building_class)
    }
}

/// Trains the relevance classifier on labeled descriptors.
///
/// `labels[i]` indexes into `class_names`; `building_class` marks which of
/// those names is the building-related one. Returns the model and the
/// per-epoch loss trace.
pub fn train_relevance(
    samples: &[(Descriptor, usize)],
    class_names: &[String],
    building_class: usize,
    config: &TrainConfig,
) -> Result<(RelevanceModel, Vec<f64>)> {
    config.validate()?;
    if samples.is_empty() {
        return Err(Error::EmptyInput("relevance training samples"));
    }
    let n_classes = class_names.len();
    if n_classes < 2 {
        return Err(Error::InvalidArgument(
            "relevance training needs at least 2 classes".into(),
        ));
    }
    if building_class >= n_classes {
        return Err(Error::InvalidArgument(format!(
            "building class index {building_class} out of range 0..{n_classes}"
        )));
    }
    let present: HashSet<usize> = samples.iter().map(|(_, y)| *y).collect();
    if let Some(bad) = present.iter().find(|&&y| y >= n_classes) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} out of range 0..{n_classes}"
        )));
    }
    if present.len() < 2 {
        return Err(Error::InvalidArgument(
            "relevance training data covers fewer than 2 classes".into(),
        ));
    }
    let xs: Vec<Vec<f64>> = samples
        .iter()
        .map(|(d, _)| d.values().to_vec())
        .collect();
    let ys: Vec<usize> = samples.iter().map(|(_, y)| *y).collect();
    let mut softmax = SoftmaxRegression::zeroed(n_classes, crate::descriptor::DESCRIPTOR_LEN)?;
    let trace = softmax.train_sgd(&xs, &ys, config)?;
    Ok((
        RelevanceModel {
            softmax,
            class_names: class_names.to_vec(),
            building_class,
            seed: config.seed,
            config_hash: 0,
        },
        trace,
    ))
}

/// Keeps the patches the relevance model assigns to the building class.
pub fn relevance_filter(patches: &[PatchRecord], model: &RelevanceModel) -> Result<Vec<PatchRecord>> {
    let mut out = Vec::new();
    for p in patches {
        if model.is_relevant(&p.descriptor)? {
            out.push(p.clone());
        }
    }
    Ok(out)
}

/// Writes a relevance model to the shared binary model format. Class names
/// are not part of the format; only the class count and building-class index
/// survive a round trip.
pub fn save_relevance(model: &RelevanceModel, path: &Path) -> Result<()> {
    write_softmax_file(
        path,
        0,
        model.building_class as u8,
        &model.softmax,
        model.seed,
        model.config_hash,
    )
}

/// Reads a relevance model written by [`save_relevance`]. Classes get
/// placeholder names except the building class, which is named "building".
pub fn load_relevance(path: &Path) -> Result<RelevanceModel> {
    let raw = read_softmax_file(path)?;
    if raw.target_class == 0xFF {
        return Err(Error::model_format(
            path,
            "file is a condition model, not a relevance model",
        ));
    }
    if raw.mode_byte != 0 {
        return Err(Error::model_format(
            path,
            "relevance models use descriptor features",
        ));
    }
    let n = raw.softmax.n_classes();
    let building = raw.target_class as usize;
    if building >= n {
        return Err(Error::model_format(
            path,
            format!("building class {building} out of range 0..{n}"),
        ));
    }
    if raw.softmax.n_features() != crate::descriptor::DESCRIPTOR_LEN {
        return Err(Error::model_format(
            path,
            format!(
                "relevance model needs {} features, file has {}",
                crate::descriptor::DESCRIPTOR_LEN,
                raw.softmax.n_features()
            ),
        ));
    }
    let class_names = (0..n)
        .map(|i| {
            if i == building {
                "building".to_string()
            } else {
                format!("class{i}")
            }
        })
        .collect();
    Ok(RelevanceModel {
        softmax: raw.softmax,
        class_names,
        building_class: building,
        seed: raw.seed,
        config_hash: raw.config_hash,
    })
}

/// Stable 64-bit hash of an image id (FNV-1a), mixed with the master seed to
/// give every image its own deterministic k-means stream.
pub fn image_seed(master: u64, image_id: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in image_id.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h ^ master
}

/// Runs the whole per-image selection chain: optional downscale, gradients,
/// dense grid, descriptors, k-means representatives, contrast filter, and
/// (when a model is supplied) the relevance filter.
pub fn select_pipeline(
    image_id: &str,
    image: &GrayImage,
    config: &SelectionConfig,
    relevance: Option<&RelevanceModel>,
) -> Result<Vec<PatchRecord>> {
    config.validate()?;
    let image = image.downscale_to_max(config.max_image_side)?;
    let specs = dense_grid(
        image.width(),
        image.height(),
        &config.scales,
        config.stride_fraction,
        image_id,
    )?;
    if specs.is_empty() {
        return Ok(Vec::new());
    }
    let grad = compute_gradients(&image)?;
    let mut patches = Vec::with_capacity(specs.len());
    for spec in specs {
        let descriptor = describe(&grad, &spec)?;
        let pixels = if config.keep_pixels {
            Some(crop(&image, &spec)?)
        } else {
            None
        };
        patches.push(PatchRecord {
            spec,
            descriptor,
            pixels,
        });
    }
    let points: Vec<Vec<f64>> = patches
        .iter()
        .map(|p| p.descriptor.values().to_vec())
        .collect();
    let clustering = kmeans(&points, config.k, image_seed(config.seed, image_id))?;
    let reps = select_representatives(&patches, &clustering)?;
    let kept = contrast_filter(&reps, config.t)?;
    match relevance {
        Some(model) => relevance_filter(&kept, model),
        None => Ok(kept),
    }
}

/// Writes each patch as a PNG plus an `index.csv` describing them. Every
/// record must carry pixel data.
pub fn dump_patches(dir: &Path, patches: &[PatchRecord]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let index_path = dir.join("index.csv");
    let mut index = std::fs::File::create(&index_path).map_err(|e| Error::io(&index_path, e))?;
    writeln!(index, "file,image_id,x,y,side,raw_norm").map_err(|e| Error::io(&index_path, e))?;
    for p in patches {
        let pixels = p.pixels.as_ref().ok_or(Error::MissingPixels)?;
        let safe_id: String = p
            .spec
            .image_id
            .chars()
            .map(|c| {
                if c.is_ascii_alphanumeric() || c == '.' || c == '-' || c == '_' {
                    c
                } else {
                    '_'
                }
            })
            .collect();
        let name = format!("{safe_id}_{}_{}_{}.png", p.spec.x, p.spec.y, p.spec.side);
        pixels.save_png(&dir.join(&name))?;
        writeln!(
            index,
            "{name},{},{},{},{},{}",
            p.spec.image_id,
            p.spec.x,
            p.spec.y,
            p.spec.side,
            format_float(p.descriptor.raw_norm())
        )
        .map_err(|e| Error::io(&index_path, e))?;
    }
    Ok(())
}
