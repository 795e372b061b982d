//! Labelled datasets: the seeded hierarchical Gaussian generator plus IDX and
//! CSV loaders.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::DenseMatrix;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Parameters of the synthetic class hierarchy.
///
/// Class means come from a random walk down a complete `branching`-ary tree
/// of height `depth`: each child mean is its parent's plus a Gaussian step
/// whose scale is `step_scale * step_decay^level`. Samples are the class
/// mean plus isotropic noise of scale `noise_scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub depth: usize,
    pub branching: usize,
    pub samples_per_class: usize,
    pub dim: usize,
    pub noise_scale: f64,
    pub step_scale: f64,
    pub step_decay: f64,
    pub test_fraction: f64,
    pub standardize: bool,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            seed: 7,
            depth: 2,
            branching: 4,
            samples_per_class: 200,
            dim: 32,
            noise_scale: 0.7,
            step_scale: 1.0,
            step_decay: 0.5,
            test_fraction: 0.25,
            standardize: true,
        }
    }
}

impl SyntheticSpec {
    pub fn num_classes(&self) -> usize {
        self.branching.pow(self.depth as u32)
    }
}

/// Ground-truth tree of a synthetic dataset. Class `c` sits at the leaf
/// whose branch choices, from the root down, are the base-`branching`
/// digits of `c` (most significant first).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassTree {
    pub branching: usize,
    pub depth: usize,
}

impl ClassTree {
    pub fn path(&self, class: usize) -> Vec<usize> {
        let mut digits = vec![0; self.depth];
        let mut c = class;
        for slot in digits.iter_mut().rev() {
            *slot = c % self.branching;
            c /= self.branching;
        }
        digits
    }

    /// Branch taken at the root.
    pub fn top_branch(&self, class: usize) -> usize {
        self.path(class).first().copied().unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    Synthetic { spec: SyntheticSpec },
    Idx { images: PathBuf, labels: PathBuf },
    Csv { path: PathBuf, label_column: String },
}

/// Per-dimension affine map fitted on the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn apply(&self, m: &mut DenseMatrix) {
        for r in 0..m.rows() {
            for ((v, mu), s) in m.row_mut(r).iter_mut().zip(&self.mean).zip(&self.scale) {
                *v = (*v - mu) / s;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    features: DenseMatrix,
    labels: Vec<usize>,
    num_classes: usize,
    splits: Vec<Split>,
    provenance: Provenance,
    tree: Option<ClassTree>,
    label_names: Vec<String>,
}

/// Features and labels of one split, gathered in dataset order.
#[derive(Debug, Clone)]
pub struct SplitView {
    pub indices: Vec<usize>,
    pub features: DenseMatrix,
    pub labels: Vec<usize>,
}

impl SplitView {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

impl LabeledDataset {
    pub fn new(
        features: DenseMatrix,
        labels: Vec<usize>,
        num_classes: usize,
        splits: Vec<Split>,
        provenance: Provenance,
    ) -> Result<Self> {
        if labels.len() != features.rows() {
            return Err(Error::len("dataset labels", features.rows(), labels.len()));
        }
        if splits.len() != labels.len() {
            return Err(Error::len("dataset split tags", labels.len(), splits.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::Index {
                context: "dataset label",
                index: bad,
                bound: num_classes,
            });
        }
        if !features.is_finite() {
            return Err(Error::NonFinite("dataset features".into()));
        }
        Ok(Self {
            features,
            labels,
            num_classes,
            splits,
            provenance,
            tree: None,
            label_names: (0..num_classes).map(|c| c.to_string()).collect(),
        })
    }

    pub fn with_tree(mut self, tree: ClassTree) -> Self {
        self.tree = Some(tree);
        self
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

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn features(&self) -> &DenseMatrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn splits(&self) -> &[Split] {
        &self.splits
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn tree(&self) -> Option<&ClassTree> {
        self.tree.as_ref()
    }

    /// Original label value of each dense class id.
    pub fn label_names(&self) -> &[String] {
        &self.label_names
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }

    pub fn view(&self, split: Split) -> SplitView {
        let indices = self.indices(split);
        SplitView {
            features: self.features.select_rows(&indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            indices,
        }
    }

    /// Every instance regardless of split.
    pub fn view_all(&self) -> SplitView {
        SplitView {
            indices: (0..self.len()).collect(),
            features: self.features.clone(),
            labels: self.labels.clone(),
        }
    }

    /// Classes with no training instance.
    pub fn classes_missing_from_train(&self) -> Vec<usize> {
        let mut seen = vec![false; self.num_classes];
        for (y, s) in self.labels.iter().zip(&self.splits) {
            if *s == Split::Train {
                seen[*y] = true;
            }
        }
        (0..self.num_classes).filter(|&c| !seen[c]).collect()
    }

    /// Re-tags instances with a seeded, label-stratified split. Each class with
    /// at least two instances lands in both splits.
    pub fn resplit(&mut self, seed: u64, test_fraction: f64) -> Result<()> {
        if !(0.0..1.0).contains(&test_fraction) {
            return Err(Error::Validation(format!(
                "test fraction {test_fraction} outside [0, 1)"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.splits = stratified_split(&self.labels, self.num_classes, test_fraction, &mut rng);
        Ok(())
    }

    /// Fits zero-mean unit-variance scaling on the training split and applies it to every instance.
    pub fn standardize(&mut self) -> Standardizer {
        let train = self.indices(Split::Train);
        let d = self.dim();
        let n = train.len().max(1) as f64;
        let mut mean = vec![0.0; d];
        for &i in &train {
            for (m, v) in mean.iter_mut().zip(self.features.row(i)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for &i in &train {
            for ((s, v), m) in var.iter_mut().zip(self.features.row(i)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let scale = var
            .into_iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        let st = Standardizer { mean, scale };
        st.apply(&mut self.features);
        st
    }

    /// Mean feature vector of each class over `split` (zeros for an absent class).
    pub fn class_means(&self, split: Split) -> DenseMatrix {
        let mut sums = DenseMatrix::zeros(self.num_classes, self.dim());
        let mut counts = vec![0usize; self.num_classes];
        for i in self.indices(split) {
            let y = self.labels[i];
            counts[y] += 1;
            for (s, v) in sums.row_mut(y).iter_mut().zip(self.features.row(i)) {
                *s += v;
            }
        }
        for (c, &n) in counts.iter().enumerate() {
            if n > 0 {
                sums.row_mut(c).iter_mut().for_each(|v| *v /= n as f64);
            }
        }
        sums
    }

    /// Splits off the listed classes. Returns `(kept, held_out)`; the kept
    /// part has its labels renumbered densely in ascending order, the
    /// held-out part keeps the original ids.
    pub fn hold_out_classes(&self, held_out: &[usize]) -> Result<(LabeledDataset, LabeledDataset)> {
        let held: BTreeSet<usize> = held_out.iter().copied().collect();
        if let Some(&bad) = held.iter().find(|&&c| c >= self.num_classes) {
            return Err(Error::Index {
                context: "held-out class",
                index: bad,
                bound: self.num_classes,
            });
        }
        let kept_classes: Vec<usize> = (0..self.num_classes).filter(|c| !held.contains(c)).collect();
        let mut remap = vec![usize::MAX; self.num_classes];
        for (new, &old) in kept_classes.iter().enumerate() {
            remap[old] = new;
        }
        let (keep_idx, out_idx): (Vec<usize>, Vec<usize>) =
            (0..self.len()).partition(|&i| !held.contains(&self.labels[i]));
        let build = |idx: &[usize], labels: Vec<usize>, l: usize, names: Vec<String>| {
            let mut ds = LabeledDataset::new(
                self.features.select_rows(idx),
                labels,
                l,
                idx.iter().map(|&i| self.splits[i]).collect(),
                self.provenance.clone(),
            )?;
            ds.label_names = names;
            Ok::<_, Error>(ds)
        };
        let kept = build(
            &keep_idx,
            keep_idx.iter().map(|&i| remap[self.labels[i]]).collect(),
            kept_classes.len(),
            kept_classes.iter().map(|&c| self.label_names[c].clone()).collect(),
        )?;
        let out = build(
            &out_idx,
            out_idx.iter().map(|&i| self.labels[i]).collect(),
            self.num_classes,
            self.label_names.clone(),
        )?;
        Ok((kept, out))
    }

    pub fn sidecar(&self) -> DatasetSidecar {
        DatasetSidecar {
            provenance: self.provenance.clone(),
            num_classes: self.num_classes,
            label_names: self.label_names.clone(),
            splits: self.splits.clone(),
            tree: self.tree.clone(),
        }
    }

    /// Applies split tags, class names and tree from a sidecar. The CSV
    /// written by [`write_csv`](Self::write_csv) stores class ids as labels,
    /// so the ids read back are restored from the loader's label mapping.
    pub fn apply_sidecar(&mut self, sidecar: DatasetSidecar) -> Result<()> {
        if sidecar.splits.len() != self.len() {
            return Err(Error::len("sidecar split tags", self.len(), sidecar.splits.len()));
        }
        let mut original = Vec::with_capacity(self.label_names.len());
        for name in &self.label_names {
            match name.parse::<usize>() {
                Ok(id) if id < sidecar.num_classes => original.push(id),
                _ => {
                    return Err(Error::Validation(format!(
                        "label `{name}` is not a class id below the sidecar's {} classes",
                        sidecar.num_classes
                    )))
                }
            }
        }
        for y in &mut self.labels {
            *y = original[*y];
        }
        self.num_classes = sidecar.num_classes;
        self.splits = sidecar.splits;
        self.label_names = sidecar.label_names;
        self.provenance = sidecar.provenance;
        self.tree = sidecar.tree;
        Ok(())
    }

    /// Writes `x0..x{d-1},label` with the dense class id as label.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
        let mut header: Vec<String> = (0..self.dim()).map(|j| format!("x{j}")).collect();
        header.push("label".into());
        w.write_record(&header).map_err(|e| csv_io(path, e))?;
        for (i, y) in self.labels.iter().enumerate() {
            let mut rec: Vec<String> = self.features.row(i).iter().map(|v| v.to_string()).collect();
            rec.push(y.to_string());
            w.write_record(&rec).map_err(|e| csv_io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e.to_string()))
}

/// JSON sidecar stored next to a dataset CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSidecar {
    pub provenance: Provenance,
    pub num_classes: usize,
    pub label_names: Vec<String>,
    pub splits: Vec<Split>,
    pub tree: Option<ClassTree>,
}

impl DatasetSidecar {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("sidecar serializes");
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            location: path.display().to_string(),
            message: e.to_string(),
        })
    }
}

fn stratified_split(
    labels: &[usize],
    num_classes: usize,
    test_fraction: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<Split> {
    let mut splits = vec![Split::Train; labels.len()];
    for class in 0..num_classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        members.shuffle(rng);
        let n = members.len();
        if n < 2 || test_fraction == 0.0 {
            continue;
        }
        let n_test = ((n as f64 * test_fraction).round() as usize).clamp(1, n - 1);
        for &i in &members[..n_test] {
            splits[i] = Split::Test;
        }
    }
    splits
}

/// Seeded hierarchical Gaussian classes; a pure function of `spec`.
pub fn generate_hierarchical(spec: &SyntheticSpec) -> Result<LabeledDataset> {
    if spec.branching < 2 || spec.depth < 1 {
        return Err(Error::Validation(format!(
            "hierarchy needs branching >= 2 and depth >= 1 (got {} and {})",
            spec.branching, spec.depth
        )));
    }
    if spec.dim == 0 || spec.samples_per_class == 0 {
        return Err(Error::Validation(
            "dimension and samples per class must be positive".into(),
        ));
    }
    if !(spec.noise_scale >= 0.0 && spec.step_scale > 0.0 && spec.step_decay > 0.0) {
        return Err(Error::Validation(
            "noise scale must be >= 0 and step scale/decay > 0".into(),
        ));
    }
    let num_classes = spec
        .branching
        .checked_pow(spec.depth as u32)
        .filter(|&l| l <= 1 << 20)
        .ok_or_else(|| Error::Validation("hierarchy has too many classes".into()))?;

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut level = DenseMatrix::zeros(1, spec.dim);
    for depth in 0..spec.depth {
        let step = spec.step_scale * spec.step_decay.powi(depth as i32);
        let mut next = DenseMatrix::zeros(level.rows() * spec.branching, spec.dim);
        for parent in 0..level.rows() {
            for b in 0..spec.branching {
                let jitter = DenseMatrix::random_normal(1, spec.dim, step, &mut rng);
                let child = parent * spec.branching + b;
                for ((c, p), j) in next
                    .row_mut(child)
                    .iter_mut()
                    .zip(level.row(parent))
                    .zip(jitter.values())
                {
                    *c = p + j;
                }
            }
        }
        level = next;
    }

    let n = num_classes * spec.samples_per_class;
    let mut features = DenseMatrix::zeros(n, spec.dim);
    let mut labels = Vec::with_capacity(n);
    for class in 0..num_classes {
        for s in 0..spec.samples_per_class {
            let i = class * spec.samples_per_class + s;
            let noise = DenseMatrix::random_normal(1, spec.dim, spec.noise_scale, &mut rng);
            for ((f, m), e) in features
                .row_mut(i)
                .iter_mut()
                .zip(level.row(class))
                .zip(noise.values())
            {
                *f = m + e;
            }
            labels.push(class);
        }
    }
    let splits = stratified_split(&labels, num_classes, spec.test_fraction, &mut rng);
    let mut ds = LabeledDataset::new(
        features,
        labels,
        num_classes,
        splits,
        Provenance::Synthetic { spec: spec.clone() },
    )?
    .with_tree(ClassTree {
        branching: spec.branching,
        depth: spec.depth,
    });
    if spec.standardize {
        ds.standardize();
    }
    Ok(ds)
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::Truncated(format!("{what} header")))
}

/// Parses an IDX image file and its label file; pixels are scaled to `[0, 1]`.
/// All instances are tagged as training data.
pub fn parse_idx(images: &[u8], labels: &[u8]) -> Result<(DenseMatrix, Vec<usize>)> {
    if be_u32(images, 0, "image file")? != IDX_IMAGES_MAGIC {
        return Err(Error::BadMagic("IDX image file".into()));
    }
    if be_u32(labels, 0, "label file")? != IDX_LABELS_MAGIC {
        return Err(Error::BadMagic("IDX label file".into()));
    }
    let n = be_u32(images, 4, "image file")? as usize;
    let rows = be_u32(images, 8, "image file")? as usize;
    let cols = be_u32(images, 12, "image file")? as usize;
    let n_labels = be_u32(labels, 4, "label file")? as usize;
    if n != n_labels {
        return Err(Error::Dimension {
            context: "IDX image/label counts",
            left: n.to_string(),
            right: n_labels.to_string(),
        });
    }
    let pixels = rows * cols;
    let body = &images[16..];
    if body.len() < n * pixels {
        return Err(Error::Truncated(format!(
            "IDX image data: need {} bytes, have {}",
            n * pixels,
            body.len()
        )));
    }
    let label_body = &labels[8..];
    if label_body.len() < n {
        return Err(Error::Truncated(format!(
            "IDX label data: need {n} bytes, have {}",
            label_body.len()
        )));
    }
    let values = body[..n * pixels].iter().map(|&b| f64::from(b) / 255.0).collect();
    let features = DenseMatrix::from_vec(n, pixels, values)?;
    Ok((features, label_body[..n].iter().map(|&b| b as usize).collect()))
}

pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledDataset> {
    let images = std::fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let labels = std::fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?;
    let (features, labels) = parse_idx(&images, &labels)?;
    let num_classes = labels.iter().max().map_or(0, |m| m + 1);
    let n = labels.len();
    LabeledDataset::new(
        features,
        labels,
        num_classes,
        vec![Split::Train; n],
        Provenance::Idx {
            images: images_path.to_path_buf(),
            labels: labels_path.to_path_buf(),
        },
    )
}

/// Reads a numeric CSV with a header row. Every column except `label_column`
/// is a feature. Labels are mapped to dense ids in sorted order of their
/// values (numerically when every label parses as a number); the mapping is
/// available from [`LabeledDataset::label_names`].
pub fn load_csv(path: &Path, label_column: &str) -> Result<LabeledDataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut ds = parse_csv(&text, label_column)?;
    ds.provenance = Provenance::Csv {
        path: path.to_path_buf(),
        label_column: label_column.to_string(),
    };
    Ok(ds)
}

pub fn parse_csv(text: &str, label_column: &str) -> Result<LabeledDataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(text.as_bytes());
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Parse {
            location: "header".into(),
            message: e.to_string(),
        })?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let label_idx = header.iter().position(|h| h == label_column).ok_or_else(|| {
        Error::Validation(format!(
            "label column `{label_column}` not found; available columns: {}",
            header.join(", ")
        ))
    })?;
    let d = header.len() - 1;
    let mut values = Vec::new();
    let mut raw_labels = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let location = format!("row {}", row + 2);
        let record = record.map_err(|e| Error::Parse {
            location: location.clone(),
            message: e.to_string(),
        })?;
        if record.len() != header.len() {
            return Err(Error::Parse {
                location,
                message: format!("expected {} fields, found {}", header.len(), record.len()),
            });
        }
        for (j, cell) in record.iter().enumerate() {
            if j == label_idx {
                raw_labels.push(cell.trim().to_string());
                continue;
            }
            let v: f64 = cell.trim().parse().map_err(|_| Error::Parse {
                location: location.clone(),
                message: format!("column `{}` is not numeric: {cell:?}", header[j]),
            })?;
            values.push(v);
        }
    }
    let mut names: Vec<String> = raw_labels.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    let numeric: Option<Vec<f64>> = names.iter().map(|s| s.parse::<f64>().ok()).collect();
    if let Some(nums) = numeric {
        let mut paired: Vec<(f64, String)> = nums.into_iter().zip(names).collect();
        paired.sort_by(|a, b| a.0.total_cmp(&b.0));
        names = paired.into_iter().map(|(_, s)| s).collect();
    }
    let labels: Vec<usize> = raw_labels
        .iter()
        .map(|l| names.iter().position(|n| n == l).expect("label present"))
        .collect();
    let n = labels.len();
    let features = DenseMatrix::from_vec(n, d, values)?;
    let mut ds = LabeledDataset::new(
        features,
        labels,
        names.len(),
        vec![Split::Train; n],
        Provenance::Csv {
            path: PathBuf::new(),
            label_column: label_column.to_string(),
        },
    )?;
    ds.label_names = names;
    Ok(ds)
}
