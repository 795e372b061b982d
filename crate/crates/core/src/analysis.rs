//! Codebook introspection: agglomerative taxonomy over class codes,
//! inner-product heatmaps, row-wise Spearman comparison between heatmaps,
//! and per-bit instance splits.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::bitcode::Codebook;
use crate::diffcore::{linear_forward, DenseMatrix};
use crate::error::{Error, Result};
use crate::model::LlcModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Linkage {
    Single,
    Complete,
    #[default]
    Average,
}

impl FromStr for Linkage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(Self::Single),
            "complete" => Ok(Self::Complete),
            "average" => Ok(Self::Average),
            other => Err(Error::Validation(format!(
                "unknown linkage `{other}` (expected single, complete or average)"
            ))),
        }
    }
}

/// Node ids `0..L` are leaves; merge `i` creates node `L + i`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Merge {
    pub a: usize,
    pub b: usize,
    pub distance: f64,
    pub node: usize,
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dendrogram {
    leaves: usize,
    merges: Vec<Merge>,
}

impl Dendrogram {
    pub fn leaves(&self) -> usize {
        self.leaves
    }

    pub fn merges(&self) -> &[Merge] {
        &self.merges
    }

    pub fn root(&self) -> usize {
        2 * self.leaves - 2
    }

    /// Leaf ids under `node`, ascending.
    pub fn members(&self, node: usize) -> Vec<usize> {
        let mut out = Vec::new();
        let mut stack = vec![node];
        while let Some(n) = stack.pop() {
            if n < self.leaves {
                out.push(n);
            } else {
                let m = &self.merges[n - self.leaves];
                stack.push(m.a);
                stack.push(m.b);
            }
        }
        out.sort_unstable();
        out
    }

    /// The two leaf groups joined by the final merge.
    pub fn top_split(&self) -> (Vec<usize>, Vec<usize>) {
        let last = self.merges.last().expect("at least one merge");
        (self.members(last.a), self.members(last.b))
    }

    fn height(&self, node: usize) -> f64 {
        if node < self.leaves {
            0.0
        } else {
            self.merges[node - self.leaves].distance
        }
    }

    /// Newick text; branch lengths are differences of merge heights.
    pub fn to_newick(&self, names: &dyn Fn(usize) -> String) -> String {
        fn label(raw: &str) -> String {
            if raw.chars().any(|c| "(),:;'[] \t".contains(c)) {
                format!("'{}'", raw.replace('\'', "''"))
            } else {
                raw.to_string()
            }
        }
        fn emit(d: &Dendrogram, node: usize, names: &dyn Fn(usize) -> String, out: &mut String) {
            if node < d.leaves {
                out.push_str(&label(&names(node)));
                return;
            }
            let m = &d.merges[node - d.leaves];
            out.push('(');
            for (i, child) in [m.a, m.b].into_iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                emit(d, child, names, out);
                write!(out, ":{}", m.distance - d.height(child)).expect("string write");
            }
            out.push(')');
        }
        let mut out = String::new();
        emit(self, self.root(), names, &mut out);
        out.push_str(";\n");
        out
    }
}

/// Class names from the codebook, falling back to `c<id>`.
pub fn codebook_names(codebook: &Codebook) -> impl Fn(usize) -> String + '_ {
    move |i| codebook.name(i).map_or_else(|| format!("c{i}"), str::to_string)
}

/// Clustering of class codes under Hamming distance.
pub fn agglomerate(codebook: &Codebook, linkage: Linkage) -> Result<Dendrogram> {
    let n = codebook.len();
    let mut dist = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            dist[i * n + j] = f64::from(codebook.code(i).hamming_unchecked(codebook.code(j)));
        }
    }
    agglomerate_distances(n, &dist, linkage)
}

/// Clustering from a dense row-major distance matrix. The closest active pair
/// merges first, ties going to the lexicographically smallest node-id pair.
pub fn agglomerate_distances(n: usize, dist: &[f64], linkage: Linkage) -> Result<Dendrogram> {
    if n < 2 {
        return Err(Error::Validation(format!("clustering needs at least 2 leaves, got {n}")));
    }
    if dist.len() != n * n {
        return Err(Error::len("distance matrix entries", n * n, dist.len()));
    }
    let total = 2 * n - 1;
    // Average linkage tracks the sum of pairwise leaf distances so the
    // quotient is computed once per comparison; sums of integer Hamming
    // distances stay exact.
    let mut link = vec![f64::NAN; total * total];
    let mut size = vec![1usize; total];
    for i in 0..n {
        for j in 0..n {
            link[i * total + j] = dist[i * n + j];
        }
    }
    let value = |link: &[f64], size: &[usize], a: usize, b: usize| -> f64 {
        let raw = link[a * total + b];
        match linkage {
            Linkage::Average => raw / (size[a] * size[b]) as f64,
            _ => raw,
        }
    };
    let mut active: Vec<usize> = (0..n).collect();
    let mut merges = Vec::with_capacity(n - 1);
    for step in 0..n - 1 {
        let mut best: Option<(f64, usize, usize)> = None;
        for (x, &a) in active.iter().enumerate() {
            for &b in &active[x + 1..] {
                let d = value(&link, &size, a, b);
                if best.is_none_or(|(bd, _, _)| d < bd) {
                    best = Some((d, a, b));
                }
            }
        }
        let (d, a, b) = best.expect("two active clusters");
        if let Some(prev) = merges.last().map(|m: &Merge| m.distance) {
            if d < prev {
                return Err(Error::Validation(format!(
                    "merge heights decreased from {prev} to {d} at step {step}"
                )));
            }
        }
        let node = n + step;
        size[node] = size[a] + size[b];
        active.retain(|&c| c != a && c != b);
        for &c in &active {
            let (la, lb) = (link[a * total + c], link[b * total + c]);
            let v = match linkage {
                Linkage::Single => la.min(lb),
                Linkage::Complete => la.max(lb),
                Linkage::Average => la + lb,
            };
            link[node * total + c] = v;
            link[c * total + node] = v;
        }
        active.push(node);
        merges.push(Merge {
            a,
            b,
            distance: d,
            node,
            size: size[node],
        });
    }
    Ok(Dendrogram { leaves: n, merges })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeatSource {
    BitCodes,
    RealRepresentations,
}

/// Symmetric `L x L` matrix of pairwise inner products.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatMatrix {
    pub values: DenseMatrix,
    pub source: HeatSource,
}

impl HeatMatrix {
    pub fn size(&self) -> usize {
        self.values.rows()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for row in self.values.row_iter() {
            let cells: Vec<String> = row.iter().map(f64::to_string).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }
}

pub fn inner_product_heatmap(matrix: &DenseMatrix, source: HeatSource) -> HeatMatrix {
    let mut values = linear_forward(matrix, matrix).expect("matching inner dimension");
    let n = values.rows();
    for i in 0..n {
        for j in 0..i {
            let v = values.get(j, i);
            values.set(i, j, v);
        }
    }
    HeatMatrix { values, source }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpearmanReport {
    pub per_class: Vec<f64>,
    pub mean: f64,
}

impl SpearmanReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,spearman\n");
        for (i, r) in self.per_class.iter().enumerate() {
            writeln!(out, "{i},{r}").expect("string write");
        }
        writeln!(out, "mean,{}", self.mean).expect("string write");
        out
    }
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        0.0
    } else {
        sxy / (sxx * syy).sqrt()
    }
}

/// Spearman correlation of each row pair with the diagonal left out.
/// A row with no rank variation scores 0.
pub fn spearman_rowwise(a: &HeatMatrix, b: &HeatMatrix) -> Result<SpearmanReport> {
    let n = a.size();
    if b.size() != n || a.values.cols() != n || b.values.cols() != n {
        return Err(Error::dim(
            "spearman heatmaps",
            (a.values.rows(), a.values.cols()),
            (b.values.rows(), b.values.cols()),
        ));
    }
    if n < 3 {
        return Err(Error::Validation(format!(
            "row-wise Spearman needs at least 3 classes, got {n}"
        )));
    }
    let off = |m: &DenseMatrix, i: usize| -> Vec<f64> {
        m.row(i)
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(_, &v)| v)
            .collect()
    };
    let per_class: Vec<f64> = (0..n)
        .map(|i| pearson(&average_ranks(&off(&a.values, i)), &average_ranks(&off(&b.values, i))))
        .collect();
    let mean = per_class.iter().sum::<f64>() / n as f64;
    Ok(SpearmanReport { per_class, mean })
}

/// Instances on each side of one bit, most confident first.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BitSplit {
    pub bit: usize,
    pub positive: Vec<usize>,
    pub negative: Vec<usize>,
}

/// Splits instances by the sign of one projection logit (zero counts as
/// positive) and orders each side by descending `|logit|`, ties by id.
pub fn bit_split_from_logits(logits: &DenseMatrix, ids: &[usize], bit: usize) -> Result<BitSplit> {
    if bit >= logits.cols() {
        return Err(Error::Index {
            context: "bit split",
            index: bit,
            bound: logits.cols(),
        });
    }
    if ids.len() != logits.rows() {
        return Err(Error::len("bit split ids", logits.rows(), ids.len()));
    }
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for (r, &id) in ids.iter().enumerate() {
        let v = logits.get(r, bit);
        if v >= 0.0 {
            pos.push((v.abs(), id));
        } else {
            neg.push((v.abs(), id));
        }
    }
    let order = |v: &mut Vec<(f64, usize)>| -> Vec<usize> {
        v.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));
        v.iter().map(|&(_, id)| id).collect()
    };
    Ok(BitSplit {
        bit,
        positive: order(&mut pos),
        negative: order(&mut neg),
    })
}

pub fn bit_split_report(model: &LlcModel, features: &DenseMatrix, ids: &[usize], bit: usize) -> Result<BitSplit> {
    if bit >= model.bits() {
        return Err(Error::Index {
            context: "bit split",
            index: bit,
            bound: model.bits(),
        });
    }
    bit_split_from_logits(&model.projection_logits(features)?, ids, bit)
}
