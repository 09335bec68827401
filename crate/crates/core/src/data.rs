//! Datasets, augmentation, class-balanced sampling and synthetic clusters.

use std::path::Path;

use rand::distributions::{Distribution, Uniform};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{decode_ppm, Image};

/// Independent RNG stream for `(seed, tags...)`.
pub fn substream(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    let mut h = seed ^ 0x9E37_79B9_7F4A_7C15;
    for &t in tags {
        h = splitmix(h ^ splitmix(t.wrapping_add(0x632B_E59B_D9B4_E019)));
    }
    ChaCha8Rng::seed_from_u64(splitmix(h))
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Item {
    pub image: Image,
    pub label: usize,
}

/// Labelled images with labels densely numbered `0..classes`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub items: Vec<Item>,
    pub classes: usize,
    pub class_names: Vec<String>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.items.iter().map(|i| i.label).collect()
    }

    /// Class-disjoint partition: the first `train_classes` classes train, the
    /// rest evaluate. Labels are renumbered from 0 in each part.
    pub fn split(&self, train_classes: usize) -> Result<(Dataset, Dataset)> {
        if train_classes == 0 || train_classes >= self.classes {
            return Err(Error::config(
                "data.train_classes",
                format!(
                    "must be in 1..{} for {} classes",
                    self.classes, self.classes
                ),
            ));
        }
        let part = |range: std::ops::Range<usize>| Dataset {
            items: self
                .items
                .iter()
                .filter(|i| range.contains(&i.label))
                .map(|i| Item {
                    image: i.image.clone(),
                    label: i.label - range.start,
                })
                .collect(),
            classes: range.len(),
            class_names: self.class_names[range.clone()].to_vec(),
        };
        Ok((part(0..train_classes), part(train_classes..self.classes)))
    }

    /// Sample-level partition over all classes: the last `per_class` items of
    /// every class evaluate, the rest train.
    pub fn holdout(&self, per_class: usize) -> Result<(Dataset, Dataset)> {
        let mut counts = vec![0usize; self.classes];
        for i in &self.items {
            counts[i.label] += 1;
        }
        if let Some(c) = counts.iter().position(|&n| n <= per_class) {
            return Err(Error::config(
                "data.holdout_per_class",
                format!("class {c} has only {} items", counts[c]),
            ));
        }
        let mut seen = vec![0usize; self.classes];
        let (mut train, mut eval) = (Vec::new(), Vec::new());
        for i in &self.items {
            seen[i.label] += 1;
            if seen[i.label] > counts[i.label] - per_class {
                eval.push(i.clone());
            } else {
                train.push(i.clone());
            }
        }
        let part = |items| Dataset {
            items,
            classes: self.classes,
            class_names: self.class_names.clone(),
        };
        Ok((part(train), part(eval)))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub per_class: usize,
    pub image_size: usize,
    /// Minimum pairwise L2 distance between class templates, in pixel space.
    pub cluster_separation: f64,
    pub noise_std: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            classes: 16,
            per_class: 8,
            image_size: 32,
            cluster_separation: 4.0,
            noise_std: 0.05,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self, path: &str) -> Result<()> {
        if self.classes == 0 || self.per_class == 0 || self.image_size == 0 {
            return Err(Error::config(
                path,
                "classes, per_class and image_size must be positive",
            ));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::config(
                format!("{path}.noise_std"),
                "must be non-negative",
            ));
        }
        if !(self.cluster_separation >= 0.0 && self.cluster_separation.is_finite()) {
            return Err(Error::config(
                format!("{path}.cluster_separation"),
                "must be non-negative",
            ));
        }
        Ok(())
    }
}

const TEMPLATE_ATTEMPTS: usize = 200;

/// Class templates are smooth random images (a coarse random grid upsampled
/// bicubically), redrawn until pairwise separated; samples add clipped
/// Gaussian noise.
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<Dataset> {
    spec.validate("data.synthetic")?;
    let s = spec.image_size;
    let max_dist = ((s * s * 3) as f64).sqrt();
    if spec.cluster_separation > max_dist {
        return Err(Error::config(
            "data.synthetic.cluster_separation",
            format!(
                "{} exceeds the largest possible distance {max_dist:.3}",
                spec.cluster_separation
            ),
        ));
    }
    let coarse = (s / 4).max(2);
    let mut rng = substream(seed, &[0]);
    let unit = Uniform::new_inclusive(0.0f32, 1.0);
    let mut templates: Vec<Image> = Vec::with_capacity(spec.classes);
    for c in 0..spec.classes {
        let mut placed = false;
        for _ in 0..TEMPLATE_ATTEMPTS {
            let grid = Image::new(
                coarse,
                coarse,
                (0..coarse * coarse * 3)
                    .map(|_| unit.sample(&mut rng))
                    .collect(),
            )?;
            let t = grid.resize(s, s)?.clamp_unit();
            if templates
                .iter()
                .all(|o| l2(o, &t) >= spec.cluster_separation)
            {
                templates.push(t);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::config(
                "data.synthetic.cluster_separation",
                format!(
                    "could not place class {c} at separation {}",
                    spec.cluster_separation
                ),
            ));
        }
    }
    let noise = Normal::new(0.0f64, spec.noise_std.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::Data(e.to_string()))?;
    let mut items = Vec::with_capacity(spec.classes * spec.per_class);
    for (label, t) in templates.iter().enumerate() {
        let mut rng = substream(seed, &[1, label as u64]);
        for _ in 0..spec.per_class {
            let data = t
                .data
                .iter()
                .map(|&v| {
                    if spec.noise_std == 0.0 {
                        v
                    } else {
                        (v as f64 + noise.sample(&mut rng)).clamp(0.0, 1.0) as f32
                    }
                })
                .collect();
            items.push(Item {
                image: Image::new(s, s, data)?,
                label,
            });
        }
    }
    Ok(Dataset {
        items,
        classes: spec.classes,
        class_names: (0..spec.classes).map(|c| format!("class_{c:03}")).collect(),
    })
}

fn l2(a: &Image, b: &Image) -> f64 {
    a.data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| ((x - y) as f64).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// One subdirectory per class (lexicographic order), PPM images, and PNG when
/// the `png` feature is on. Unreadable files are skipped with a warning.
pub fn load_image_folder(root: &Path) -> Result<Dataset> {
    let mut dirs: Vec<_> = std::fs::read_dir(root)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.path())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::Data(format!(
            "{}: no class directories",
            root.display()
        )));
    }
    let mut items = Vec::new();
    let mut names = Vec::new();
    for (label, dir) in dirs.iter().enumerate() {
        let mut files: Vec<_> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        let before = items.len();
        for f in files {
            match read_image(&f) {
                Ok(Some(image)) => items.push(Item { image, label }),
                Ok(None) => {}
                Err(e) => log::warn!("skipping {}: {e}", f.display()),
            }
        }
        if items.len() == before {
            return Err(Error::Data(format!(
                "class directory {} has no images",
                dir.display()
            )));
        }
        names.push(
            dir.file_name()
                .unwrap_or_default()
                .to_string_lossy()
                .into_owned(),
        );
    }
    Ok(Dataset {
        items,
        classes: names.len(),
        class_names: names,
    })
}

fn read_image(path: &Path) -> Result<Option<Image>> {
    let ext = path
        .extension()
        .map(|e| e.to_string_lossy().to_ascii_lowercase())
        .unwrap_or_default();
    match ext.as_str() {
        "ppm" => decode_ppm(&std::fs::read(path)?).map(Some),
        #[cfg(feature = "png")]
        "png" => crate::image::decode_png(&std::fs::read(path)?).map(Some),
        _ => Ok(None),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub flip_p: f64,
    pub scale: [f64; 2],
    pub ratio: [f64; 2],
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            enabled: true,
            flip_p: 0.5,
            scale: [0.08, 1.0],
            ratio: [3.0 / 4.0, 4.0 / 3.0],
        }
    }
}

/// Random flip, random resized crop, bicubic resample to `size`, clamp.
pub fn augment(img: &Image, size: usize, cfg: &AugmentConfig, rng: &mut impl Rng) -> Result<Image> {
    if !cfg.enabled {
        return eval_transform(img, size);
    }
    let flipped;
    let src = if rng.gen_bool(cfg.flip_p.clamp(0.0, 1.0)) {
        flipped = img.flip_horizontal();
        &flipped
    } else {
        img
    };
    let (top, left, h, w) = random_crop(src.height, src.width, cfg, rng);
    Ok(src.resize_region(top, left, h, w, size, size)?.clamp_unit())
}

fn random_crop(
    height: usize,
    width: usize,
    cfg: &AugmentConfig,
    rng: &mut impl Rng,
) -> (usize, usize, usize, usize) {
    let area = (height * width) as f64;
    let (lr0, lr1) = (cfg.ratio[0].ln(), cfg.ratio[1].ln());
    for _ in 0..2 {
        let target = area * rng.gen_range(cfg.scale[0]..=cfg.scale[1]);
        let aspect = rng.gen_range(lr0..=lr1).exp();
        let w = (target * aspect).sqrt().round() as usize;
        let h = (target / aspect).sqrt().round() as usize;
        if w > 0 && h > 0 && w <= width && h <= height {
            let top = rng.gen_range(0..=height - h);
            let left = rng.gen_range(0..=width - w);
            return (top, left, h, w);
        }
    }
    (0, 0, height, width)
}

/// Deterministic centre square crop and resample.
pub fn eval_transform(img: &Image, size: usize) -> Result<Image> {
    if img.height == size && img.width == size {
        return Ok(img.clone());
    }
    let side = img.height.min(img.width);
    let top = (img.height - side) / 2;
    let left = (img.width - side) / 2;
    Ok(img
        .resize_region(top, left, side, side, size, size)?
        .clamp_unit())
}

/// Class-balanced batches of `batch / per_class` distinct classes with
/// `per_class` samples each. Batch `k` is a pure function of `(seed, k)`:
/// classes are drawn without replacement through a per-epoch permutation
/// and leftover classes at the end of an epoch are dropped.
#[derive(Clone, Debug)]
pub struct BalancedSampler {
    by_class: Vec<(usize, Vec<usize>)>,
    per_class: usize,
    classes_per_batch: usize,
    seed: u64,
}

impl BalancedSampler {
    pub fn new(labels: &[usize], batch: usize, per_class: usize, seed: u64) -> Result<Self> {
        if per_class == 0 || batch == 0 || batch % per_class != 0 {
            return Err(Error::config(
                "data.batch_size",
                format!("batch size {batch} must be a positive multiple of per_class {per_class}"),
            ));
        }
        let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
        let mut members = vec![Vec::new(); classes];
        for (i, &l) in labels.iter().enumerate() {
            members[l].push(i);
        }
        let by_class: Vec<(usize, Vec<usize>)> = members
            .into_iter()
            .enumerate()
            .filter(|(_, m)| m.len() >= per_class)
            .collect();
        let classes_per_batch = batch / per_class;
        if by_class.is_empty() {
            return Err(Error::config(
                "data.per_class",
                format!("no class has {per_class} samples"),
            ));
        }
        if by_class.len() < classes_per_batch {
            return Err(Error::config(
                "data.batch_size",
                format!(
                    "{classes_per_batch} classes per batch but only {} classes have {per_class} samples",
                    by_class.len()
                ),
            ));
        }
        Ok(BalancedSampler {
            by_class,
            per_class,
            classes_per_batch,
            seed,
        })
    }

    pub fn classes_per_batch(&self) -> usize {
        self.classes_per_batch
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.by_class.len() / self.classes_per_batch
    }

    /// Item indices of batch `step`, grouped by class.
    pub fn batch_at(&self, step: u64) -> Vec<usize> {
        let bpe = self.batches_per_epoch() as u64;
        let (epoch, pos) = (step / bpe, (step % bpe) as usize);
        let mut order: Vec<usize> = (0..self.by_class.len()).collect();
        order.shuffle(&mut substream(self.seed, &[10, epoch]));
        let mut rng = substream(self.seed, &[11, step]);
        let mut out = Vec::with_capacity(self.classes_per_batch * self.per_class);
        for &slot in &order[pos * self.classes_per_batch..(pos + 1) * self.classes_per_batch] {
            let members = &self.by_class[slot].1;
            for j in rand::seq::index::sample(&mut rng, members.len(), self.per_class) {
                out.push(members[j]);
            }
        }
        out
    }
}
