//! Deterministic synthetic datasets.
//!
//! Classification clusters are built so each half of the feature vector
//! separates a different pairing of the classes strongly and the remaining
//! distinction only weakly. A model that sees one half is confident on one
//! grouping and unsure inside it; the other half covers the complementary
//! grouping. The dense-segmentation generator reuses the same prototypes per
//! pixel; the saliency generator draws Gaussian-mixture fixation maps.

use std::ops::Range;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::container::Container;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Classification,
    DenseSeg,
    Saliency,
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Task::Classification => "classification",
            Task::DenseSeg => "dense-seg",
            Task::Saliency => "saliency",
        })
    }
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "classification" => Ok(Task::Classification),
            "dense-seg" => Ok(Task::DenseSeg),
            "saliency" => Ok(Task::Saliency),
            other => Err(Error::Config(format!("unknown task '{other}'"))),
        }
    }
}

/// Everything needed to regenerate a dataset bit for bit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataSpec {
    pub task: Task,
    pub seed: u64,
    pub n_train: usize,
    pub n_eval: usize,
    /// Features per sample (classification) or per pixel (dense tasks).
    pub dim: usize,
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    /// Standard deviation of the isotropic feature noise.
    pub noise: f64,
    /// Distance between the strongly separated class groups of one half.
    pub strong_margin: f64,
    /// Distance between the two classes inside a group.
    pub weak_margin: f64,
    /// Mean object area as a fraction of the image (dense-seg).
    pub object_fraction: f64,
    /// Fixations sampled per image (saliency).
    pub fixations: usize,
}

impl DataSpec {
    pub fn classification(seed: u64) -> Self {
        DataSpec {
            task: Task::Classification,
            seed,
            n_train: 8000,
            n_eval: 2000,
            dim: 16,
            classes: 4,
            height: 1,
            width: 1,
            noise: 1.0,
            strong_margin: 4.0,
            weak_margin: 0.6,
            object_fraction: 0.0,
            fixations: 0,
        }
    }

    pub fn dense(seed: u64) -> Self {
        DataSpec {
            task: Task::DenseSeg,
            seed,
            n_train: 400,
            n_eval: 200,
            dim: 8,
            classes: 4,
            height: 8,
            width: 8,
            noise: 1.0,
            strong_margin: 4.0,
            weak_margin: 0.6,
            object_fraction: 0.6,
            fixations: 0,
        }
    }

    pub fn saliency(seed: u64) -> Self {
        DataSpec {
            task: Task::Saliency,
            seed,
            n_train: 200,
            n_eval: 100,
            dim: 4,
            classes: 1,
            height: 8,
            width: 8,
            noise: 0.3,
            strong_margin: 0.0,
            weak_margin: 0.0,
            object_fraction: 0.0,
            fixations: 20,
        }
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_train == 0 || self.n_eval == 0 {
            return bad("both splits need at least one sample");
        }
        if !(self.noise >= 0.0) {
            return bad("noise must be non-negative");
        }
        match self.task {
            Task::Classification | Task::DenseSeg => {
                if self.classes < 2 {
                    return bad("need at least 2 classes");
                }
                if self.dim < 4 || !self.dim.is_multiple_of(2) {
                    return bad("feature dimension must be even and at least 4");
                }
                let groups = self.classes.div_ceil(2);
                if groups + 1 > self.dim / 2 {
                    return bad("each feature half needs one more dimension than class groups");
                }
                if !(self.strong_margin > 0.0) || !(self.weak_margin > 0.0) {
                    return bad("margins must be positive");
                }
                if self.task == Task::DenseSeg {
                    if self.height < 4 || self.width < 4 {
                        return bad("dense grid must be at least 4x4");
                    }
                    if !(self.object_fraction > 0.0 && self.object_fraction < 1.0) {
                        return bad("object fraction must lie in (0, 1)");
                    }
                }
            }
            Task::Saliency => {
                if self.height < 8 || self.width < 8 {
                    return bad("saliency grid must be at least 8x8");
                }
                if self.dim < 1 || self.fixations == 0 {
                    return bad("saliency needs features and fixations");
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    Classes(Vec<usize>),
    Segmentation {
        /// `[N · H · W]` pixel classes.
        pixels: Vec<usize>,
        /// Most frequent class of each image.
        dominant: Vec<usize>,
    },
    Saliency {
        /// `[N · H · W]` maps, each summing to one.
        maps: Vec<f64>,
        /// Flat pixel indices of fixations per image.
        fixations: Vec<Vec<usize>>,
    },
}

/// Generated samples with a train split followed by an eval split.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: DataSpec,
    /// `[N, D]` or `[N, H, W, D]`.
    pub x: Tensor,
    pub targets: Targets,
    /// Class prototypes, `classes × dim` (empty for saliency).
    pub means: Vec<Vec<f64>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

/// Targets for a subset of samples.
#[derive(Clone, Debug, PartialEq)]
pub enum TargetBatch {
    Classes(Vec<usize>),
    Segmentation { pixels: Vec<usize>, dominant: Vec<usize> },
    Saliency { maps: Tensor, fixations: Vec<Vec<usize>> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub x: Tensor,
    pub targets: TargetBatch,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn labels(&self) -> Result<&[usize]> {
        match &self.targets {
            TargetBatch::Classes(y) => Ok(y),
            _ => Err(Error::Config("batch has no class labels".into())),
        }
    }
}

impl Dataset {
    pub fn generate(spec: &DataSpec) -> Result<Self> {
        spec.validate()?;
        match spec.task {
            Task::Classification => gen_classification(spec),
            Task::DenseSeg => gen_dense(spec),
            Task::Saliency => gen_saliency(spec),
        }
    }

    pub fn task(&self) -> Task {
        self.spec.task
    }

    pub fn len(&self) -> usize {
        self.spec.n_train + self.spec.n_eval
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn split(&self, split: Split) -> Range<usize> {
        match split {
            Split::Train => 0..self.spec.n_train,
            Split::Eval => self.spec.n_train..self.len(),
        }
    }

    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        self.split(split).collect()
    }

    pub fn labels(&self) -> Option<&[usize]> {
        match &self.targets {
            Targets::Classes(y) => Some(y),
            _ => None,
        }
    }

    pub fn batch(&self, indices: &[usize]) -> Batch {
        let p = self.spec.pixels();
        let targets = match &self.targets {
            Targets::Classes(y) => TargetBatch::Classes(indices.iter().map(|&i| y[i]).collect()),
            Targets::Segmentation { pixels, dominant } => TargetBatch::Segmentation {
                pixels: indices
                    .iter()
                    .flat_map(|&i| pixels[i * p..(i + 1) * p].iter().copied())
                    .collect(),
                dominant: indices.iter().map(|&i| dominant[i]).collect(),
            },
            Targets::Saliency { maps, fixations } => TargetBatch::Saliency {
                maps: Tensor::new(
                    vec![indices.len(), p],
                    indices
                        .iter()
                        .flat_map(|&i| maps[i * p..(i + 1) * p].iter().copied())
                        .collect(),
                )
                .expect("map rows have pixel width"),
                fixations: indices.iter().map(|&i| fixations[i].clone()).collect(),
            },
        };
        Batch {
            indices: indices.to_vec(),
            x: self.x.select_rows(indices),
            targets,
        }
    }

    pub fn split_batch(&self, split: Split) -> Batch {
        self.batch(&self.split_indices(split))
    }

    /// Serializes into the shared container format.
    pub fn to_container(&self) -> Container {
        let spec = serde_json::to_string(&self.spec).expect("spec serializes");
        let mut arrays = vec![("x".to_string(), self.x.data().to_vec())];
        let as_f64 = |v: &[usize]| v.iter().map(|&u| u as f64).collect::<Vec<_>>();
        match &self.targets {
            Targets::Classes(y) => arrays.push(("y".into(), as_f64(y))),
            Targets::Segmentation { pixels, dominant } => {
                arrays.push(("pixels".into(), as_f64(pixels)));
                arrays.push(("dominant".into(), as_f64(dominant)));
            }
            Targets::Saliency { maps, fixations } => {
                arrays.push(("maps".into(), maps.clone()));
                let flat: Vec<usize> = fixations.iter().flatten().copied().collect();
                arrays.push(("fixations".into(), as_f64(&flat)));
            }
        }
        arrays.push(("means".into(), self.means.iter().flatten().copied().collect()));
        Container {
            header: vec![
                ("kind".into(), "dataset".into()),
                ("task".into(), self.spec.task.to_string()),
                ("spec".into(), spec),
            ],
            arrays,
        }
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.header_value("kind") != Some("dataset") {
            return Err(Error::Config("container does not hold a dataset".into()));
        }
        let spec: DataSpec = serde_json::from_str(c.header_value("spec").unwrap_or(""))
            .map_err(|e| Error::Config(format!("bad dataset spec: {e}")))?;
        let array = |name: &str| {
            c.array(name)
                .ok_or_else(|| Error::Config(format!("dataset cache lacks array {name}")))
        };
        let as_usize = |v: &[f64]| v.iter().map(|&f| f as usize).collect::<Vec<_>>();
        let n = spec.n_train + spec.n_eval;
        let shape = match spec.task {
            Task::Classification => vec![n, spec.dim],
            _ => vec![n, spec.height, spec.width, spec.dim],
        };
        let x = Tensor::new(shape, array("x")?.to_vec())?;
        let targets = match spec.task {
            Task::Classification => Targets::Classes(as_usize(array("y")?)),
            Task::DenseSeg => Targets::Segmentation {
                pixels: as_usize(array("pixels")?),
                dominant: as_usize(array("dominant")?),
            },
            Task::Saliency => Targets::Saliency {
                maps: array("maps")?.to_vec(),
                fixations: as_usize(array("fixations")?)
                    .chunks(spec.fixations)
                    .map(<[usize]>::to_vec)
                    .collect(),
            },
        };
        let means = array("means")?
            .chunks(spec.dim.max(1))
            .map(<[f64]>::to_vec)
            .collect();
        Ok(Dataset {
            spec,
            x,
            targets,
            means,
        })
    }

    pub fn save_cache(&self, path: &Path) -> Result<()> {
        self.to_container().write(path)
    }

    pub fn load_cache(path: &Path) -> Result<Self> {
        Self::from_container(&Container::read(path)?)
    }
}

/// Per-model visibility of input features during pretraining.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ViewPolicy {
    /// Model 0 sees the first half, model 1 the second.
    Complementary,
    /// Each of `k` models sees a cyclic window of half the features,
    /// windows spread evenly.
    Overlapping,
    Full,
}

impl std::str::FromStr for ViewPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "complementary" => Ok(ViewPolicy::Complementary),
            "overlapping" => Ok(ViewPolicy::Overlapping),
            "full" => Ok(ViewPolicy::Full),
            other => Err(Error::Config(format!("unknown view policy '{other}'"))),
        }
    }
}

impl ViewPolicy {
    /// Visibility masks for `k` models over `dim` features.
    pub fn masks(self, dim: usize, k: usize) -> Result<Vec<Vec<bool>>> {
        let masks: Vec<Vec<bool>> = match self {
            ViewPolicy::Full => vec![vec![true; dim]; k],
            ViewPolicy::Complementary => {
                if k != 2 {
                    return Err(Error::Config("complementary views need exactly 2 models".into()));
                }
                let half = dim / 2;
                vec![
                    (0..dim).map(|i| i < half).collect(),
                    (0..dim).map(|i| i >= half).collect(),
                ]
            }
            ViewPolicy::Overlapping => {
                let window = dim / 2;
                (0..k)
                    .map(|m| {
                        let start = m * dim / k;
                        let mut v = vec![false; dim];
                        for j in 0..window {
                            v[(start + j) % dim] = true;
                        }
                        v
                    })
                    .collect()
            }
        };
        if (0..dim).any(|i| !masks.iter().any(|m| m[i])) {
            return Err(Error::Config(format!("{k} views do not cover all {dim} features")));
        }
        Ok(masks)
    }
}

/// Zeroes features outside `visible` along the last axis.
pub fn apply_view(x: &Tensor, visible: &[bool]) -> Result<Tensor> {
    if x.last_dim() != visible.len() {
        return Err(Error::shape("apply_view", x.shape(), &[visible.len()]));
    }
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(visible.len()) {
        for (v, &keep) in row.iter_mut().zip(visible) {
            if !keep {
                *v = 0.0;
            }
        }
    }
    Ok(out)
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Gram-Schmidt on Gaussian draws: `count` orthonormal vectors of length `n`.
fn orthonormal(rng: &mut ChaCha8Rng, count: usize, n: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v: Vec<f64> = (0..n).map(|_| gaussian(rng)).collect();
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            basis.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    basis
}

/// Class group inside each feature half: `c / 2` for the first half and
/// `((c + 1) mod C) / 2` for the second, so the halves pair classes differently.
pub fn class_groups(c: usize, classes: usize) -> (usize, usize) {
    (c / 2, ((c + 1) % classes) / 2)
}

/// Class prototypes, `classes × dim`.
///
/// Within one half, group centres are `strong_margin` apart and the two
/// classes of a group sit `weak_margin` apart along a shared direction.
fn class_means(spec: &DataSpec, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let (c, d) = (spec.classes, spec.dim);
    let half = d / 2;
    let groups = c.div_ceil(2);
    let mut means = vec![vec![0.0; d]; c];
    for (h, offset) in [(0usize, 0usize), (1, half)] {
        let width = if h == 0 { half } else { d - half };
        let dirs = orthonormal(rng, groups + 1, width);
        let within = &dirs[groups];
        for (class, mean) in means.iter_mut().enumerate() {
            let g = if h == 0 {
                class_groups(class, c).0
            } else {
                class_groups(class, c).1
            };
            // first class of a pair in this half gets +, the second −
            let first = if h == 0 { class % 2 == 0 } else { (class + 1) % c % 2 == 0 };
            let sign = if first { 0.5 } else { -0.5 };
            for j in 0..width {
                mean[offset + j] = spec.strong_margin / 2f64.sqrt() * dirs[g][j]
                    + sign * spec.weak_margin * within[j];
            }
        }
    }
    means
}

fn sample_around(mean: &[f64], noise: f64, rng: &mut ChaCha8Rng, out: &mut Vec<f64>) {
    out.extend(mean.iter().map(|m| m + noise * gaussian(rng)));
}

/// Balanced labels (`i mod C`) with Gaussian clusters around class prototypes.
pub fn gen_classification(spec: &DataSpec) -> Result<Dataset> {
    spec.validate()?;
    if spec.task != Task::Classification {
        return Err(Error::Config("spec is not a classification spec".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let means = class_means(spec, &mut rng);
    let n = spec.n_train + spec.n_eval;
    let mut x = Vec::with_capacity(n * spec.dim);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % spec.classes;
        sample_around(&means[c], spec.noise, &mut rng, &mut x);
        y.push(c);
    }
    Ok(Dataset {
        spec: spec.clone(),
        x: Tensor::new(vec![n, spec.dim], x)?,
        targets: Targets::Classes(y),
        means,
    })
}

/// Images with class-0 background and one rectangular object of a class in
/// `1..C`, features drawn per pixel around the class prototypes.
pub fn gen_dense(spec: &DataSpec) -> Result<Dataset> {
    spec.validate()?;
    if spec.task != Task::DenseSeg {
        return Err(Error::Config("spec is not a dense-seg spec".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let means = class_means(spec, &mut rng);
    let (h, w, p) = (spec.height, spec.width, spec.pixels());
    let n = spec.n_train + spec.n_eval;
    let mut x = Vec::with_capacity(n * p * spec.dim);
    let mut pixels = Vec::with_capacity(n * p);
    let mut dominant = Vec::with_capacity(n);
    for _ in 0..n {
        let class = rng.random_range(1..spec.classes);
        let target = spec.object_fraction * p as f64;
        let min_rows = (target / w as f64).ceil().max(1.0) as usize;
        let rows = rng.random_range(min_rows..=h);
        let cols = ((target / rows as f64).round() as usize).clamp(1, w);
        let top = rng.random_range(0..=h - rows);
        let left = rng.random_range(0..=w - cols);
        let mut counts = vec![0usize; spec.classes];
        for r in 0..h {
            for c in 0..w {
                let inside = (top..top + rows).contains(&r) && (left..left + cols).contains(&c);
                let label = if inside { class } else { 0 };
                counts[label] += 1;
                pixels.push(label);
                sample_around(&means[label], spec.noise, &mut rng, &mut x);
            }
        }
        dominant.push(crate::autodiff::kernels::argmax(
            &counts.iter().map(|&c| c as f64).collect::<Vec<_>>(),
        ));
    }
    Ok(Dataset {
        spec: spec.clone(),
        x: Tensor::new(vec![n, h, w, spec.dim], x)?,
        targets: Targets::Segmentation { pixels, dominant },
        means,
    })
}

/// Gaussian-mixture saliency maps with fixations sampled from each map.
///
/// Every feature channel is a noisy, differently scaled copy of the map
/// rescaled to a peak of one, so the map is recoverable per pixel.
pub fn gen_saliency(spec: &DataSpec) -> Result<Dataset> {
    spec.validate()?;
    if spec.task != Task::Saliency {
        return Err(Error::Config("spec is not a saliency spec".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (h, w, p, d) = (spec.height, spec.width, spec.pixels(), spec.dim);
    let gains: Vec<f64> = (0..d).map(|k| 1.0 + k as f64 / d as f64).collect();
    let n = spec.n_train + spec.n_eval;
    let mut maps = Vec::with_capacity(n * p);
    let mut x = Vec::with_capacity(n * p * d);
    let mut fixations = Vec::with_capacity(n);
    let side = h.min(w) as f64;
    for _ in 0..n {
        let blobs = rng.random_range(1..=3);
        let params: Vec<(f64, f64, f64, f64)> = (0..blobs)
            .map(|_| {
                (
                    rng.random_range(0.0..h as f64),
                    rng.random_range(0.0..w as f64),
                    rng.random_range(0.1 * side..0.25 * side),
                    rng.random_range(0.5..1.0),
                )
            })
            .collect();
        let mut map: Vec<f64> = (0..p)
            .map(|i| {
                let (r, c) = ((i / w) as f64, (i % w) as f64);
                params
                    .iter()
                    .map(|&(cr, cc, s, a)| {
                        a * (-((r - cr).powi(2) + (c - cc).powi(2)) / (2.0 * s * s)).exp()
                    })
                    .sum()
            })
            .collect();
        let total: f64 = map.iter().sum();
        map.iter_mut().for_each(|v| *v /= total);
        let peak = map.iter().cloned().fold(0.0, f64::max);
        for &v in &map {
            for g in &gains {
                x.push(g * v / peak + spec.noise * gaussian(&mut rng));
            }
        }
        let picker = WeightedIndex::new(&map).map_err(|e| Error::Data(e.to_string()))?;
        fixations.push((0..spec.fixations).map(|_| picker.sample(&mut rng)).collect());
        maps.extend(map);
    }
    Ok(Dataset {
        spec: spec.clone(),
        x: Tensor::new(vec![n, h, w, d], x)?,
        targets: Targets::Saliency { maps, fixations },
        means: Vec::new(),
    })
}

/// One shuffled pass over `indices`, chunked; the final short batch is kept.
pub fn batches(indices: &[usize], batch_size: usize, epoch_seed: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size < 1 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let mut order = indices.to_vec();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Seed mixing so nearby run seeds and epochs give unrelated streams.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cls(seed: u64) -> DataSpec {
        DataSpec {
            n_train: 900,
            n_eval: 100,
            ..DataSpec::classification(seed)
        }
    }

    fn nearest_centroid(x: &[f64], means: &[Vec<f64>], visible: &[bool]) -> usize {
        let dist = |m: &Vec<f64>| -> f64 {
            x.iter()
                .zip(m)
                .zip(visible)
                .filter(|(_, &v)| v)
                .map(|((a, b), _)| (a - b) * (a - b))
                .sum()
        };
        (0..means.len())
            .min_by(|&a, &b| dist(&means[a]).partial_cmp(&dist(&means[b])).unwrap())
            .unwrap()
    }

    #[test]
    fn regeneration_is_bit_identical() {
        for spec in [small_cls(3), DataSpec::dense(3), DataSpec::saliency(3)] {
            let a = Dataset::generate(&spec).unwrap();
            let b = Dataset::generate(&spec).unwrap();
            assert_eq!(a.to_container().to_bytes(), b.to_container().to_bytes());
        }
        let a = Dataset::generate(&small_cls(3)).unwrap();
        let b = Dataset::generate(&small_cls(4)).unwrap();
        assert_ne!(a.x, b.x);
    }

    #[test]
    fn half_views_are_weaker_than_full_view() {
        let spec = DataSpec {
            n_train: 10_000,
            n_eval: 1,
            ..DataSpec::classification(11)
        };
        let ds = Dataset::generate(&spec).unwrap();
        let y = ds.labels().unwrap();
        let masks = ViewPolicy::Complementary.masks(spec.dim, 2).unwrap();
        let full = vec![true; spec.dim];
        let acc = |visible: &[bool]| {
            ds.x.rows()
                .zip(y)
                .filter(|(row, &label)| nearest_centroid(row, &ds.means, visible) == label)
                .count() as f64
                / y.len() as f64
        };
        let (a, b, f) = (acc(&masks[0]), acc(&masks[1]), acc(&full));
        assert!(a > 0.25 && b > 0.25, "{a} {b}");
        assert!(a < f - 0.1 && b < f - 0.1, "{a} {b} {f}");
    }

    #[test]
    fn labels_are_balanced() {
        let spec = DataSpec {
            n_train: 10_000,
            n_eval: 1,
            ..DataSpec::classification(1)
        };
        let ds = Dataset::generate(&spec).unwrap();
        let mut hist = [0usize; 4];
        for &y in &ds.labels().unwrap()[..10_000] {
            hist[y] += 1;
        }
        for h in hist {
            assert!((h as f64 / 10_000.0 - 0.25).abs() <= 0.02);
        }
    }

    #[test]
    fn infeasible_specs_are_config_errors() {
        let mut spec = small_cls(0);
        spec.classes = 8;
        spec.dim = 8;
        assert!(matches!(Dataset::generate(&spec), Err(Error::Config(_))));
        let mut spec = small_cls(0);
        spec.classes = 1;
        assert!(matches!(Dataset::generate(&spec), Err(Error::Config(_))));
        let mut spec = DataSpec::saliency(0);
        spec.height = 4;
        assert!(matches!(Dataset::generate(&spec), Err(Error::Config(_))));
    }

    #[test]
    fn noiseless_dense_labels_recoverable_by_prototype() {
        let spec = DataSpec {
            noise: 0.0,
            n_train: 20,
            n_eval: 5,
            ..DataSpec::dense(2)
        };
        let ds = Dataset::generate(&spec).unwrap();
        let Targets::Segmentation { pixels, .. } = &ds.targets else { panic!() };
        let all = vec![true; spec.dim];
        for (row, &label) in ds.x.data().chunks(spec.dim).zip(pixels) {
            assert_eq!(nearest_centroid(row, &ds.means, &all), label);
        }
    }

    #[test]
    fn dense_object_area_matches_fraction() {
        let spec = DataSpec {
            n_train: 1000,
            n_eval: 1,
            ..DataSpec::dense(5)
        };
        let ds = Dataset::generate(&spec).unwrap();
        let Targets::Segmentation { pixels, dominant } = &ds.targets else { panic!() };
        let p = spec.pixels();
        let mean_area = pixels[..1000 * p].iter().filter(|&&l| l != 0).count() as f64 / (1000 * p) as f64;
        assert!((mean_area - spec.object_fraction).abs() <= 0.05, "{mean_area}");
        for (i, &d) in dominant.iter().enumerate() {
            let object = pixels[i * p..(i + 1) * p].iter().filter(|&&l| l != 0).count();
            assert_eq!(d != 0, object * 2 > p);
        }
    }

    #[test]
    fn saliency_maps_normalized_and_fixations_follow_map() {
        let spec = DataSpec {
            fixations: 1000,
            n_train: 3,
            n_eval: 1,
            ..DataSpec::saliency(8)
        };
        let ds = Dataset::generate(&spec).unwrap();
        let Targets::Saliency { maps, fixations } = &ds.targets else { panic!() };
        let p = spec.pixels();
        for (i, fix) in fixations.iter().enumerate() {
            let map = &maps[i * p..(i + 1) * p];
            assert!((map.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            let mut density = vec![0.0; p];
            for &f in fix {
                density[f] += 1.0;
            }
            let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
            let (mm, md) = (mean(map), mean(&density));
            let cov: f64 = map.iter().zip(&density).map(|(a, b)| (a - mm) * (b - md)).sum();
            let va: f64 = map.iter().map(|a| (a - mm).powi(2)).sum();
            let vb: f64 = density.iter().map(|b| (b - md).powi(2)).sum();
            assert!(cov / (va * vb).sqrt() > 0.5);
        }
    }

    #[test]
    fn batches_cover_split_and_depend_on_seed() {
        let idx: Vec<usize> = (10..110).collect();
        let b = batches(&idx, 32, 7).unwrap();
        assert_eq!(b.len(), 4);
        assert_eq!(b[3].len(), 4);
        let mut all: Vec<usize> = b.concat();
        all.sort_unstable();
        assert_eq!(all, idx);
        assert_eq!(b, batches(&idx, 32, 7).unwrap());
        for s in 0..10 {
            assert_ne!(batches(&idx, 32, s).unwrap(), batches(&idx, 32, s + 100).unwrap());
        }
        assert!(matches!(batches(&idx, 0, 1), Err(Error::Config(_))));
    }

    #[test]
    fn splits_are_disjoint() {
        let ds = Dataset::generate(&small_cls(0)).unwrap();
        let train = ds.split(Split::Train);
        let eval = ds.split(Split::Eval);
        assert!(train.end <= eval.start);
        assert_eq!(eval.end, ds.len());
    }

    #[test]
    fn view_masks_cover_features() {
        let m = ViewPolicy::Overlapping.masks(16, 3).unwrap();
        assert!(m.iter().all(|v| v.iter().filter(|&&b| b).count() == 8));
        assert!(ViewPolicy::Complementary.masks(16, 3).is_err());
        let x = Tensor::new(vec![2, 4], vec![1.0; 8]).unwrap();
        let v = apply_view(&x, &[true, false, true, false]).unwrap();
        assert_eq!(v.data(), &[1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn cache_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        for spec in [small_cls(1), DataSpec::dense(1), DataSpec::saliency(1)] {
            let ds = Dataset::generate(&spec).unwrap();
            let path = dir.path().join("d.bin");
            ds.save_cache(&path).unwrap();
            assert_eq!(Dataset::load_cache(&path).unwrap(), ds);
        }
    }
}
