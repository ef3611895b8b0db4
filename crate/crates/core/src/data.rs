//! Datasets: IDX ingestion, semi-unsupervised splits, the activity-code
//! dictionary and a synthetic windowed-features generator.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::warn;
use rand::distr::weighted::WeightedIndex;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::models::PriorY;
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Feature matrix plus optional labels (`None` = unlabelled).
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub features: Tensor,
    pub labels: Vec<Option<usize>>,
    pub class_names: Vec<String>,
}

impl Dataset {
    pub fn new(features: Tensor, labels: Vec<Option<usize>>, class_names: Vec<String>) -> Result<Self> {
        if features.rank() != 2 || features.rows() != labels.len() {
            return Err(Error::dim("Dataset", features.shape(), &[labels.len()]));
        }
        if let Some(bad) = labels.iter().flatten().find(|&&c| c >= class_names.len()) {
            return Err(Error::Contract(format!(
                "label {bad} out of range for {} classes",
                class_names.len()
            )));
        }
        if !features.is_finite() {
            return Err(Error::NonFinite("dataset features".into()));
        }
        Ok(Self {
            features,
            labels,
            class_names,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            features: self.features.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_names: self.class_names.clone(),
        }
    }

    /// All labels, failing if any point is unlabelled.
    pub fn truth(&self) -> Result<Vec<usize>> {
        self.labels
            .iter()
            .enumerate()
            .map(|(i, l)| l.ok_or_else(|| Error::Contract(format!("point {i} has no ground-truth label"))))
            .collect()
    }
}

fn read_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            offset: offset as u64,
            detail: "truncated header".into(),
        })
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Parses an IDX image file into `(count, rows*cols, pixels)`.
fn parse_idx_images(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = read_file(path)?;
    let magic = read_u32(&bytes, 0, path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            offset: 0,
            detail: format!("bad magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"),
        });
    }
    let n = read_u32(&bytes, 4, path)? as usize;
    let rows = read_u32(&bytes, 8, path)? as usize;
    let cols = read_u32(&bytes, 12, path)? as usize;
    let need = 16 + n * rows * cols;
    if bytes.len() < need {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            offset: bytes.len() as u64,
            detail: format!("truncated: {n} images of {rows}x{cols} need {need} bytes"),
        });
    }
    Ok((n, rows * cols, bytes[16..need].to_vec()))
}

fn parse_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let bytes = read_file(path)?;
    let magic = read_u32(&bytes, 0, path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            offset: 0,
            detail: format!("bad magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"),
        });
    }
    let n = read_u32(&bytes, 4, path)? as usize;
    if bytes.len() < 8 + n {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            offset: bytes.len() as u64,
            detail: format!("truncated: {n} labels need {} bytes", 8 + n),
        });
    }
    Ok(bytes[8..8 + n].to_vec())
}

/// Loads an IDX image/label pair, scaling pixels into `[0, 1]`.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let (images_path, labels_path) = (images_path.as_ref(), labels_path.as_ref());
    let (n, dim, pixels) = parse_idx_images(images_path)?;
    let labels = parse_idx_labels(labels_path)?;
    if labels.len() != n {
        return Err(Error::Parse {
            path: labels_path.to_path_buf(),
            offset: 4,
            detail: format!("{} labels for {n} images in {}", labels.len(), images_path.display()),
        });
    }
    let max_label = labels.iter().copied().max().unwrap_or(0) as usize;
    let classes = (max_label + 1).max(10);
    let features = Tensor::new(vec![n, dim], pixels.iter().map(|&p| p as f64 / 255.0).collect())?;
    Dataset::new(
        features,
        labels.into_iter().map(|l| Some(l as usize)).collect(),
        (0..classes).map(|c| c.to_string()).collect(),
    )
}

/// Writes an IDX image/label pair. Pixel values are `round(255 * v)`.
pub fn write_idx(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
    features: &Tensor,
    labels: &[u8],
    side: (u32, u32),
) -> Result<()> {
    let (images_path, labels_path) = (images_path.as_ref(), labels_path.as_ref());
    if (side.0 * side.1) as usize != features.cols() || features.rows() != labels.len() {
        return Err(Error::dim("write_idx", features.shape(), &[labels.len()]));
    }
    let mut img = Vec::with_capacity(16 + features.len());
    img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    img.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    img.extend_from_slice(&side.0.to_be_bytes());
    img.extend_from_slice(&side.1.to_be_bytes());
    img.extend(
        features
            .data()
            .iter()
            .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8),
    );
    let mut lab = Vec::with_capacity(8 + labels.len());
    lab.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    lab.extend_from_slice(labels);
    write_atomic(images_path, &img)?;
    write_atomic(labels_path, &lab)
}

/// Writes via a temporary sibling file and a rename.
pub fn write_atomic(path: impl AsRef<Path>, contents: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let tmp = tmp_path(path);
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(contents).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn tmp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".tmp");
    path.with_file_name(name)
}

/// Class prior with `k_semi_sup` entries of `mass_semi_sup_each` followed by
/// `k_unsup_total` entries of `mass_unsup_each`.
pub fn build_prior(
    k_semi_sup: usize,
    k_unsup_total: usize,
    mass_semi_sup_each: f64,
    mass_unsup_each: f64,
) -> Result<PriorY> {
    let total = k_semi_sup as f64 * mass_semi_sup_each + k_unsup_total as f64 * mass_unsup_each;
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("prior masses sum to {total}, not 1")));
    }
    let mut probs = vec![mass_semi_sup_each; k_semi_sup];
    probs.extend(std::iter::repeat_n(mass_unsup_each, k_unsup_total));
    PriorY::from_probs(&probs)
}

/// Per-class prior masses. `None` picks `1/(k_semi + k_unsup)` for each
/// semi-supervised class and spreads the remainder evenly over the
/// unsupervised and extra classes.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PriorMasses {
    pub semi_supervised_each: Option<f64>,
    pub unsupervised_each: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct SplitSpec {
    pub semi_supervised: Vec<usize>,
    pub unsupervised: Vec<usize>,
    pub labels_per_class: usize,
    pub extra_classes: usize,
    pub masses: PriorMasses,
}

impl SplitSpec {
    /// Digits {0,1,2,8,9} with 100 labels each, {3,4,5,6,7} unlabelled and
    /// five extra classes.
    pub fn mnist_default() -> Self {
        Self {
            semi_supervised: vec![0, 1, 2, 8, 9],
            unsupervised: vec![3, 4, 5, 6, 7],
            labels_per_class: 100,
            extra_classes: 5,
            masses: PriorMasses::default(),
        }
    }
}

/// A training split for semi-unsupervised learning.
///
/// Model class indices run over the semi-supervised classes first (in the
/// order given), then the unsupervised classes, then the extra classes.
/// Training code only sees `labelled` and `unlabelled`; `unlabelled_truth`
/// is kept for evaluation.
#[derive(Clone, Debug)]
pub struct SemiUnsupervisedSplit {
    pub labelled: Dataset,
    pub unlabelled: Dataset,
    pub unlabelled_truth: Vec<Option<usize>>,
    pub k_semi_supervised: usize,
    pub k_unsupervised: usize,
    pub k_extra: usize,
    pub prior: PriorY,
    /// Original class of each model class index (`None` for extra classes).
    pub class_order: Vec<Option<usize>>,
}

impl SemiUnsupervisedSplit {
    pub fn total_classes(&self) -> usize {
        self.k_semi_supervised + self.k_unsupervised + self.k_extra
    }

    pub fn input_dim(&self) -> usize {
        self.unlabelled.dim()
    }

    /// Model class index of each labelled point.
    pub fn labelled_classes(&self) -> Vec<usize> {
        self.labelled
            .labels
            .iter()
            .map(|l| l.expect("labelled point"))
            .collect()
    }
}

/// Builds a semi-unsupervised split of `ds`.
pub fn build_semi_unsupervised_split<R: Rng + ?Sized>(
    ds: &Dataset,
    spec: &SplitSpec,
    rng: &mut R,
) -> Result<SemiUnsupervisedSplit> {
    let mut seen = std::collections::HashSet::new();
    for &c in spec.semi_supervised.iter().chain(&spec.unsupervised) {
        if !seen.insert(c) {
            return Err(Error::Config(format!("class {c} listed twice across the class sets")));
        }
        if c >= ds.class_names.len() {
            return Err(Error::Config(format!("class {c} does not exist in the dataset")));
        }
    }
    let (ks, ku, ke) = (spec.semi_supervised.len(), spec.unsupervised.len(), spec.extra_classes);
    if ks + ku + ke == 0 {
        return Err(Error::Config("split has no classes".into()));
    }

    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, l) in ds.labels.iter().enumerate() {
        if let Some(c) = l {
            by_class.entry(*c).or_default().push(i);
        }
    }
    let mut labelled_idx = Vec::new();
    let mut labelled_lab = Vec::new();
    let mut taken = vec![false; ds.len()];
    for (model_class, &c) in spec.semi_supervised.iter().enumerate() {
        let mut pool = by_class.get(&c).cloned().unwrap_or_default();
        if pool.len() < spec.labels_per_class {
            return Err(Error::Config(format!(
                "class {c} has {} examples, fewer than the {} labels requested",
                pool.len(),
                spec.labels_per_class
            )));
        }
        pool.shuffle(rng);
        for &i in &pool[..spec.labels_per_class] {
            taken[i] = true;
            labelled_idx.push(i);
            labelled_lab.push(Some(model_class));
        }
    }

    let unlabelled_idx: Vec<usize> = (0..ds.len()).filter(|&i| !taken[i]).collect();
    let class_names: Vec<String> = spec
        .semi_supervised
        .iter()
        .chain(&spec.unsupervised)
        .map(|&c| ds.class_names[c].clone())
        .chain((0..ke).map(|e| format!("extra_{e}")))
        .collect();

    let semi_each = spec.masses.semi_supervised_each.unwrap_or(1.0 / (ks + ku) as f64);
    let unsup_each = match spec.masses.unsupervised_each {
        Some(m) => m,
        None if ku + ke > 0 => (1.0 - ks as f64 * semi_each) / (ku + ke) as f64,
        None => 0.0,
    };
    let prior = build_prior(ks, ku + ke, semi_each, unsup_each)?;

    let mut class_order: Vec<Option<usize>> = spec
        .semi_supervised
        .iter()
        .chain(&spec.unsupervised)
        .map(|&c| Some(c))
        .collect();
    class_order.extend(std::iter::repeat_n(None, ke));

    let labelled = Dataset::new(
        ds.features.select_rows(&labelled_idx),
        labelled_lab,
        class_names.clone(),
    )?;
    let unlabelled = Dataset::new(
        ds.features.select_rows(&unlabelled_idx),
        vec![None; unlabelled_idx.len()],
        class_names,
    )?;
    Ok(SemiUnsupervisedSplit {
        labelled,
        unlabelled,
        unlabelled_truth: unlabelled_idx.iter().map(|&i| ds.labels[i]).collect(),
        k_semi_supervised: ks,
        k_unsupervised: ku,
        k_extra: ke,
        prior,
        class_order,
    })
}

/// Randomly partitions `ds` into `(rest, held_out)` with `held_out` of size `n`.
pub fn hold_out<R: Rng + ?Sized>(ds: &Dataset, n: usize, rng: &mut R) -> Result<(Dataset, Dataset)> {
    if n > ds.len() {
        return Err(Error::Config(format!("cannot hold out {n} of {} points", ds.len())));
    }
    let mut idx: Vec<usize> = (0..ds.len()).collect();
    idx.shuffle(rng);
    let (held, rest) = idx.split_at(n);
    let (mut held, mut rest) = (held.to_vec(), rest.to_vec());
    held.sort_unstable();
    rest.sort_unstable();
    Ok((ds.subset(&rest), ds.subset(&held)))
}

/// Fine-grained activity code to coarse class.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelDictionary {
    classes: Vec<String>,
    codes: BTreeMap<String, usize>,
}

/// Compendium-of-physical-activity codes used as sparse activity labels.
pub const CPA_DICTIONARY: &str = include_str!("../data/cpa_dictionary.tsv");

impl LabelDictionary {
    /// Parses a tab-separated table with a `class_name<TAB>code` header.
    /// Classes are numbered in order of first appearance.
    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'));
        match lines.next() {
            Some((_, header)) if header.split('\t').map(str::trim).eq(["class_name", "code"]) => {}
            other => {
                return Err(Error::Config(format!(
                    "label dictionary must start with a 'class_name<TAB>code' header, found {:?}",
                    other.map(|(_, l)| l)
                )))
            }
        }
        let mut classes: Vec<String> = Vec::new();
        let mut codes = BTreeMap::new();
        for (lineno, line) in lines {
            let cols: Vec<&str> = line.split('\t').map(str::trim).collect();
            let [class, code] = cols[..] else {
                return Err(Error::Config(format!(
                    "line {}: expected 2 columns, got {}",
                    lineno + 1,
                    cols.len()
                )));
            };
            let idx = match classes.iter().position(|c| c == class) {
                Some(i) => i,
                None => {
                    classes.push(class.to_string());
                    classes.len() - 1
                }
            };
            if let Some(prev) = codes.insert(code.to_string(), idx) {
                if prev != idx {
                    return Err(Error::Config(format!(
                        "code {code} maps to both {} and {class}",
                        classes[prev]
                    )));
                }
            }
        }
        Ok(Self { classes, codes })
    }

    pub fn cpa() -> Self {
        Self::parse(CPA_DICTIONARY).expect("bundled dictionary is well-formed")
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn lookup(&self, code: &str) -> Option<usize> {
        self.codes.get(code.trim()).copied()
    }
}

/// Maps raw codes to coarse class indices; unknown codes become `None`.
pub fn label_dictionary_map<S: AsRef<str>>(raw_labels: &[S], dict: &LabelDictionary) -> Vec<Option<usize>> {
    raw_labels.iter().map(|c| dict.lookup(c.as_ref())).collect()
}

/// Generator settings for synthetic windowed activity features.
#[derive(Clone, Debug)]
pub struct SyntheticSpec {
    pub n_windows: usize,
    pub n_classes: usize,
    pub d_features: usize,
    /// Relative class frequencies; normalised internally.
    pub class_weights: Vec<f64>,
    /// Standard deviation of the per-class mean vectors.
    pub separation: f64,
}

impl SyntheticSpec {
    pub const DEFAULT_FEATURES: usize = 126;

    /// Geometric class weights from the commonest to a rarest class
    /// `imbalance` times less frequent.
    pub fn geometric_weights(n_classes: usize, imbalance: f64) -> Vec<f64> {
        if n_classes < 2 {
            return vec![1.0; n_classes];
        }
        let r = imbalance.powf(-1.0 / (n_classes - 1) as f64);
        (0..n_classes).map(|i| r.powi(i as i32)).collect()
    }

    pub fn new(n_windows: usize, n_classes: usize, imbalance: f64) -> Self {
        Self {
            n_windows,
            n_classes,
            d_features: Self::DEFAULT_FEATURES,
            class_weights: Self::geometric_weights(n_classes, imbalance),
            separation: 1.0,
        }
    }
}

/// Draws a class per window from the class weights, then features from that
/// class's diagonal Gaussian. Class means and scales are drawn once per
/// call from `rng`. All labels are returned.
pub fn synthetic_activity_dataset<R: Rng + ?Sized>(spec: &SyntheticSpec, rng: &mut R) -> Result<Dataset> {
    if spec.n_classes < 2 {
        return Err(Error::Config(format!(
            "need at least 2 classes, got {}",
            spec.n_classes
        )));
    }
    if spec.class_weights.len() != spec.n_classes || spec.class_weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
        return Err(Error::Config(format!(
            "class_weights must be {} positive values, got {:?}",
            spec.n_classes, spec.class_weights
        )));
    }
    if spec.d_features == 0 {
        return Err(Error::Config("d_features must be positive".into()));
    }
    let d = spec.d_features;
    let centre = Normal::new(0.0, spec.separation.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let means: Vec<Vec<f64>> = (0..spec.n_classes)
        .map(|_| (0..d).map(|_| centre.sample(rng)).collect())
        .collect();
    let scales: Vec<Vec<f64>> = (0..spec.n_classes)
        .map(|_| (0..d).map(|_| rng.random_range(0.5..1.5)).collect())
        .collect();
    let picker = WeightedIndex::new(&spec.class_weights).map_err(|e| Error::Config(e.to_string()))?;

    let mut data = Vec::with_capacity(spec.n_windows * d);
    let mut labels = Vec::with_capacity(spec.n_windows);
    for _ in 0..spec.n_windows {
        let c = picker.sample(rng);
        for j in 0..d {
            let e: f64 = StandardNormal.sample(rng);
            data.push(means[c][j] + scales[c][j] * e);
        }
        labels.push(Some(c));
    }
    Dataset::new(
        Tensor::new(vec![spec.n_windows, d], data)?,
        labels,
        (0..spec.n_classes).map(|c| format!("activity_{c}")).collect(),
    )
}

/// Writes features plus a final ground-truth class column (`-1` if unknown).
pub fn write_features_csv(path: impl AsRef<Path>, ds: &Dataset) -> Result<()> {
    let mut out = String::new();
    let header: Vec<String> = (0..ds.dim())
        .map(|j| format!("f{j}"))
        .chain(["class".to_string()])
        .collect();
    out.push_str(&header.join(","));
    out.push('\n');
    for i in 0..ds.len() {
        for v in ds.features.row(i) {
            out.push_str(&format!("{v},"));
        }
        match ds.labels[i] {
            Some(c) => out.push_str(&c.to_string()),
            None => out.push_str("-1"),
        }
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

/// Reads a CSV written by [`write_features_csv`].
pub fn read_features_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Parse {
        path: path.to_path_buf(),
        offset: 0,
        detail: "empty file".into(),
    })?;
    let d = header.split(',').count().saturating_sub(1);
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut offset = header.len() as u64 + 1;
    for line in lines {
        let fields: Vec<&str> = line.split(',').collect();
        let bad = |detail: String| Error::Parse {
            path: path.to_path_buf(),
            offset,
            detail,
        };
        if fields.len() != d + 1 {
            return Err(bad(format!("expected {} fields, got {}", d + 1, fields.len())));
        }
        for f in &fields[..d] {
            data.push(f.trim().parse::<f64>().map_err(|e| bad(format!("{f:?}: {e}")))?);
        }
        let c: i64 = fields[d]
            .trim()
            .parse()
            .map_err(|e| bad(format!("class {:?}: {e}", fields[d])))?;
        labels.push(if c < 0 { None } else { Some(c as usize) });
        offset += line.len() as u64 + 1;
    }
    let classes = labels.iter().flatten().max().map_or(0, |m| m + 1);
    Dataset::new(
        Tensor::new(vec![labels.len(), d], data)?,
        labels,
        (0..classes).map(|c| c.to_string()).collect(),
    )
}

/// Per-feature mean and standard deviation from a training split.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Variances below this are floored.
pub const VARIANCE_FLOOR: f64 = 1e-8;

impl FeatureStats {
    pub fn fit(train: &Dataset) -> Self {
        let (n, d) = (train.len() as f64, train.dim());
        let mut mean = vec![0.0; d];
        for i in 0..train.len() {
            for (m, v) in mean.iter_mut().zip(train.features.row(i)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n.max(1.0));
        let mut var = vec![0.0; d];
        for i in 0..train.len() {
            for ((s, v), m) in var.iter_mut().zip(train.features.row(i)).zip(&mean) {
                *s += (v - m).powi(2);
            }
        }
        let std = var
            .into_iter()
            .enumerate()
            .map(|(j, s)| {
                let v = s / n.max(1.0);
                if v < VARIANCE_FLOOR {
                    warn!("feature {j} has variance {v:e}; flooring at {VARIANCE_FLOOR:e}");
                    VARIANCE_FLOOR.sqrt()
                } else {
                    v.sqrt()
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn transform(&self, ds: &Dataset) -> Result<Dataset> {
        if ds.dim() != self.mean.len() {
            return Err(Error::dim("standardize", &[ds.dim()], &[self.mean.len()]));
        }
        let d = ds.dim();
        let mut data = ds.features.data().to_vec();
        for row in data.chunks_exact_mut(d.max(1)) {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s;
            }
        }
        Ok(Dataset {
            features: Tensor::new(ds.features.shape().to_vec(), data)?,
            labels: ds.labels.clone(),
            class_names: ds.class_names.clone(),
        })
    }

    pub fn inverse(&self, ds: &Dataset) -> Result<Dataset> {
        let d = ds.dim();
        let mut data = ds.features.data().to_vec();
        for row in data.chunks_exact_mut(d.max(1)) {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = *v * s + m;
            }
        }
        Ok(Dataset {
            features: Tensor::new(ds.features.shape().to_vec(), data)?,
            labels: ds.labels.clone(),
            class_names: ds.class_names.clone(),
        })
    }
}

/// Standardises `ds` with statistics fitted elsewhere (normally the training split).
pub fn standardize_features(ds: &Dataset, stats: &FeatureStats) -> Result<Dataset> {
    stats.transform(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_digits(per_class: usize) -> Dataset {
        let n = per_class * 10;
        let labels: Vec<Option<usize>> = (0..n).map(|i| Some(i % 10)).collect();
        let features = Tensor::new(vec![n, 4], (0..n * 4).map(|i| (i % 7) as f64 / 7.0).collect()).unwrap();
        Dataset::new(features, labels, (0..10).map(|c| c.to_string()).collect()).unwrap()
    }

    #[test]
    fn idx_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let (img, lab) = (dir.path().join("img"), dir.path().join("lab"));
        let feats = Tensor::new(
            vec![3, 4],
            vec![0.0, 1.0, 0.5, 0.2, 1.0, 1.0, 0.0, 0.0, 0.1, 0.9, 0.3, 0.7],
        )
        .unwrap();
        write_idx(&img, &lab, &feats, &[3, 1, 4], (2, 2)).unwrap();
        let ds = load_idx(&img, &lab).unwrap();
        assert_eq!(ds.features.shape(), &[3, 4]);
        assert_eq!(ds.labels, vec![Some(3), Some(1), Some(4)]);
        assert!(ds.features.data().iter().all(|v| (0.0..=1.0).contains(v)));
        for (a, b) in ds.features.data().iter().zip(feats.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }

        // count mismatch
        let lab2 = dir.path().join("lab2");
        write_idx(
            dir.path().join("img2"),
            &lab2,
            &feats.select_rows(&[0, 1]),
            &[1, 2],
            (2, 2),
        )
        .unwrap();
        assert!(matches!(load_idx(&img, &lab2), Err(Error::Parse { .. })));

        // bad magic names offset 0
        assert!(matches!(load_idx(&lab, &lab), Err(Error::Parse { offset: 0, .. })));

        // truncated image payload
        let bytes = fs::read(&img).unwrap();
        let trunc = dir.path().join("trunc");
        fs::write(&trunc, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_idx(&trunc, &lab), Err(Error::Parse { .. })));
    }

    #[test]
    fn prior_examples() {
        let p = build_prior(5, 10, 0.1, 0.05).unwrap();
        let probs = p.probs();
        assert_eq!(probs.len(), 15);
        assert!(probs[..5].iter().all(|v| (v - 0.1).abs() < 1e-15));
        assert!(probs[5..].iter().all(|v| (v - 0.05).abs() < 1e-15));
        let u = build_prior(0, 4, 0.0, 0.25).unwrap();
        assert!(u.probs().iter().all(|v| (v - 0.25).abs() < 1e-15));
        assert!(matches!(build_prior(5, 10, 0.2, 0.05), Err(Error::Config(_))));
    }

    #[test]
    fn mnist_protocol_split_shape() {
        let ds = toy_digits(120);
        let split =
            build_semi_unsupervised_split(&ds, &SplitSpec::mnist_default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(split.labelled.len(), 500);
        assert_eq!(split.total_classes(), 15);
        assert_eq!(split.labelled.len() + split.unlabelled.len(), ds.len());
        assert!(split.unlabelled.labels.iter().all(Option::is_none));
        let probs = split.prior.probs();
        assert!(probs[..5].iter().all(|v| (v - 0.1).abs() < 1e-12));
        assert!(probs[5..].iter().all(|v| (v - 0.05).abs() < 1e-12));
        let mut counts = [0usize; 15];
        for c in split.labelled_classes() {
            counts[c] += 1;
        }
        assert_eq!(&counts[..5], &[100; 5]);
        assert!(counts[5..].iter().all(|&c| c == 0));
        // labelled points come only from semi-supervised digits
        assert_eq!(split.class_order[..5], [Some(0), Some(1), Some(2), Some(8), Some(9)]);
        // every unsupervised digit lands in the unlabelled pool with its truth kept aside
        for d in 3..=7 {
            assert_eq!(split.unlabelled_truth.iter().filter(|t| **t == Some(d)).count(), 120);
        }
    }

    #[test]
    fn split_degenerate_and_errors() {
        let ds = toy_digits(20);
        let mut spec = SplitSpec::mnist_default();
        spec.labels_per_class = 0;
        let s = build_semi_unsupervised_split(&ds, &spec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(s.labelled.is_empty());
        spec.labels_per_class = 21;
        assert!(matches!(
            build_semi_unsupervised_split(&ds, &spec, &mut ChaCha8Rng::seed_from_u64(0)),
            Err(Error::Config(_))
        ));
        spec.labels_per_class = 1;
        spec.unsupervised.push(0);
        assert!(matches!(
            build_semi_unsupervised_split(&ds, &spec, &mut ChaCha8Rng::seed_from_u64(0)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn split_is_seed_deterministic() {
        let ds = toy_digits(30);
        let spec = SplitSpec {
            labels_per_class: 7,
            ..SplitSpec::mnist_default()
        };
        let a = build_semi_unsupervised_split(&ds, &spec, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let b = build_semi_unsupervised_split(&ds, &spec, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a.labelled, b.labelled);
        assert_eq!(a.unlabelled, b.unlabelled);
    }

    #[test]
    fn cpa_dictionary_reproduces_the_appendix_table() {
        let d = LabelDictionary::cpa();
        assert_eq!(d.len(), 11);
        assert_eq!(d.classes().len(), 8);
        let bike = d.lookup("1010").unwrap();
        assert_eq!(d.classes()[bike], "Bicycling");
        let walking: Vec<_> = ["17250", "17161", "17270", "17082"]
            .iter()
            .map(|c| d.lookup(c))
            .collect();
        assert!(walking.iter().all(|w| *w == walking[0] && w.is_some()));
        assert_eq!(d.classes()[walking[0].unwrap()], "Walking");
        assert_eq!(
            label_dictionary_map(&["1010", "9999", "7030"], &d),
            vec![Some(bike), None, d.lookup("7030")]
        );
        assert_eq!(d.classes()[d.lookup("7030").unwrap()], "Sleep");
    }

    #[test]
    fn dictionary_rejects_conflicts() {
        let text = "class_name\tcode\nA\t1\nB\t1\n";
        assert!(matches!(LabelDictionary::parse(text), Err(Error::Config(_))));
        assert!(LabelDictionary::parse("nope\n").is_err());
    }

    #[test]
    fn synthetic_defaults_and_imbalance() {
        let spec = SyntheticSpec::new(100, 8, 80.0);
        assert_eq!(spec.d_features, 126);
        let w = &spec.class_weights;
        let ratio = w.iter().cloned().fold(f64::MIN, f64::max) / w.iter().cloned().fold(f64::MAX, f64::min);
        assert!((ratio - 80.0).abs() < 1e-9);
        let ds = synthetic_activity_dataset(&spec, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(ds.features.shape(), &[100, 126]);
        assert!(matches!(
            synthetic_activity_dataset(&SyntheticSpec::new(10, 1, 1.0), &mut ChaCha8Rng::seed_from_u64(1)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn synthetic_class_frequencies_match_weights() {
        let mut spec = SyntheticSpec::new(100_000, 8, 80.0);
        spec.d_features = 1;
        let ds = synthetic_activity_dataset(&spec, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let total: f64 = spec.class_weights.iter().sum();
        let n = ds.len() as f64;
        for (c, w) in spec.class_weights.iter().enumerate() {
            let p = w / total;
            let observed = ds.labels.iter().filter(|l| **l == Some(c)).count() as f64;
            let sd = (n * p * (1.0 - p)).sqrt();
            assert!(
                (observed - n * p).abs() < 3.0 * sd,
                "class {c}: {observed} vs {}",
                n * p
            );
        }
    }

    #[test]
    fn csv_round_trip() {
        let mut spec = SyntheticSpec::new(20, 3, 4.0);
        spec.d_features = 5;
        let mut ds = synthetic_activity_dataset(&spec, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        ds.labels[2] = None;
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.csv");
        write_features_csv(&p, &ds).unwrap();
        let back = read_features_csv(&p).unwrap();
        assert_eq!(back.features, ds.features);
        assert_eq!(back.labels, ds.labels);
        let header = fs::read_to_string(&p).unwrap();
        assert!(header.starts_with("f0,f1,f2,f3,f4,class\n"));
    }

    #[test]
    fn standardization_properties() {
        let mut spec = SyntheticSpec::new(500, 3, 2.0);
        spec.d_features = 4;
        let mut ds = synthetic_activity_dataset(&spec, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        for i in 0..ds.len() {
            ds.features.data_mut()[i * 4 + 3] = 7.0;
        }
        let stats = FeatureStats::fit(&ds);
        let z = standardize_features(&ds, &stats).unwrap();
        for j in 0..4 {
            let m: f64 = (0..z.len()).map(|i| z.features.get(i, j)).sum::<f64>() / z.len() as f64;
            assert!(m.abs() < 1e-9);
        }
        assert!((0..z.len()).all(|i| z.features.get(i, 3) == 0.0));
        let back = stats.inverse(&z).unwrap();
        for (a, b) in back.features.data().iter().zip(ds.features.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}
