//! Labeled datasets: synthetic generation, CSV I/O, label corruption and
//! minibatch planning.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::Write;
use std::path::Path;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledDataset {
    features: Matrix,
    labels: Vec<usize>,
    num_classes: usize,
}

impl LabeledDataset {
    pub fn new(features: Matrix, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if labels.len() != features.rows() {
            return Err(Error::dim("dataset labels", features.rows(), labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} not below num_classes {num_classes}"
            )));
        }
        Ok(LabeledDataset {
            features,
            labels,
            num_classes,
        })
    }

    pub fn n(&self) -> usize {
        self.labels.len()
    }

    pub fn d(&self) -> usize {
        self.features.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Rows `ids` in order, keeping `num_classes`.
    pub fn subset(&self, ids: &[usize]) -> LabeledDataset {
        LabeledDataset {
            features: self.features.select_rows(ids),
            labels: ids.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    /// Features and labels of the rows `ids`.
    pub fn batch(&self, ids: &[usize]) -> (Matrix, Vec<usize>) {
        (
            self.features.select_rows(ids),
            ids.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    /// Seeded split into `(first, second)` where `second` has `second_len` rows.
    pub fn split(&self, second_len: usize, seed: u64) -> Result<(LabeledDataset, LabeledDataset)> {
        if second_len == 0 || second_len >= self.n() {
            return Err(Error::InvalidArgument(format!(
                "cannot split {} rows into parts with {second_len} held out",
                self.n()
            )));
        }
        let mut ids: Vec<usize> = (0..self.n()).collect();
        ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let (a, b) = ids.split_at(self.n() - second_len);
        Ok((self.subset(a), self.subset(b)))
    }

    fn with_labels(&self, labels: Vec<usize>) -> LabeledDataset {
        LabeledDataset {
            features: self.features.clone(),
            labels,
            num_classes: self.num_classes,
        }
    }
}

/// Binary dataset labeled by a median-thresholded third-order polynomial of
/// standard-normal features.
pub fn gen_synthetic(n: usize, d: usize, seed: u64) -> Result<LabeledDataset> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!("synthetic data needs n >= 2, got {n}")));
    }
    if d < 1 {
        return Err(Error::InvalidArgument("synthetic data needs d >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut coef = || -> Vec<f64> { (0..d).map(|_| rng.sample(StandardNormal)).collect() };
    let (w1, w2, w3) = (coef(), coef(), coef());
    let x: Vec<f64> = (0..n * d).map(|_| rng.sample(StandardNormal)).collect();
    let features = Matrix::from_vec(n, d, x)?;

    let scores: Vec<f64> = (0..n)
        .map(|i| {
            features
                .row(i)
                .iter()
                .enumerate()
                .map(|(k, &v)| w1[k] * v + w2[k] * v * v + w3[k] * v * v * v)
                .sum()
        })
        .collect();
    let mut sorted = scores.clone();
    sorted.sort_by(f64::total_cmp);
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    };
    let labels = scores.iter().map(|&s| usize::from(s > median)).collect();
    LabeledDataset::new(features, labels, 2)
}

const LABEL_COLUMN: &str = "label";

fn parse_err(line: u64, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

/// Reads a `f0,...,f{d-1},label` CSV file.
pub fn load_csv(path: impl AsRef<Path>) -> Result<LabeledDataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(file)
}

pub fn read_csv<R: std::io::Read>(reader: R) -> Result<LabeledDataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| parse_err(1, e.to_string()))?
        .clone();
    if headers.is_empty() || (headers.len() == 1 && headers[0].is_empty()) {
        return Err(parse_err(1, "empty file"));
    }
    let label_col = headers
        .iter()
        .position(|h| h.trim() == LABEL_COLUMN)
        .ok_or_else(|| parse_err(1, "missing column `label`"))?;
    // Feature columns must be exactly f0..f{d-1}, in any order.
    let mut feature_cols: BTreeMap<usize, usize> = BTreeMap::new();
    for (col, h) in headers.iter().enumerate() {
        if col == label_col {
            continue;
        }
        let h = h.trim();
        let k = h
            .strip_prefix('f')
            .and_then(|s| s.parse::<usize>().ok())
            .ok_or_else(|| parse_err(1, format!("unexpected column `{h}`")))?;
        if feature_cols.insert(k, col).is_some() {
            return Err(parse_err(1, format!("duplicate column `{h}`")));
        }
    }
    if feature_cols.is_empty() {
        return Err(parse_err(1, "no feature columns"));
    }
    let d = feature_cols.len();
    if let Some(missing) = (0..d).find(|k| !feature_cols.contains_key(k)) {
        return Err(parse_err(1, format!("missing column `f{missing}`")));
    }

    let mut data = Vec::new();
    let mut labels = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        for k in 0..d {
            let cell = record[feature_cols[&k]].trim();
            let v: f64 = cell
                .parse()
                .map_err(|_| parse_err(line, format!("non-numeric feature `{cell}` in f{k}")))?;
            if !v.is_finite() {
                return Err(parse_err(line, format!("non-finite feature `{cell}` in f{k}")));
            }
            data.push(v);
        }
        let cell = record[label_col].trim();
        let label: usize = cell
            .parse()
            .map_err(|_| parse_err(line, format!("invalid label `{cell}`")))?;
        labels.push(label);
    }
    if labels.is_empty() {
        return Err(parse_err(2, "no data rows"));
    }
    let num_classes = labels.iter().max().map_or(0, |m| m + 1);
    LabeledDataset::new(Matrix::from_vec(labels.len(), d, data)?, labels, num_classes)
}

pub fn save_csv(ds: &LabeledDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_csv(ds, file).map_err(|e| Error::io(path, e))
}

pub fn write_csv<W: Write>(ds: &LabeledDataset, writer: W) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = (0..ds.d()).map(|k| format!("f{k}")).collect();
    header.push(LABEL_COLUMN.to_string());
    w.write_record(&header)?;
    for i in 0..ds.n() {
        // `{}` on f64 prints the shortest representation that round-trips.
        let mut row: Vec<String> = ds.features.row(i).iter().map(|v| format!("{v}")).collect();
        row.push(ds.labels[i].to_string());
        w.write_record(&row)?;
    }
    w.flush()
}

/// Which rows were corrupted and what they held before.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlipMask {
    pub flipped: Vec<bool>,
    /// `(row, original label)` for each flipped row, ascending by row.
    pub original_labels: Vec<(usize, usize)>,
}

impl FlipMask {
    pub fn count(&self) -> usize {
        self.original_labels.len()
    }

    pub fn flipped_ids(&self) -> Vec<usize> {
        self.original_labels.iter().map(|&(i, _)| i).collect()
    }

    /// Restores every flipped row.
    pub fn restore(&self, ds: &LabeledDataset) -> LabeledDataset {
        let mut labels = ds.labels.clone();
        for &(i, l) in &self.original_labels {
            labels[i] = l;
        }
        ds.with_labels(labels)
    }

    /// Restores only the flipped rows that appear in `ids`.
    pub fn restore_subset(&self, ds: &LabeledDataset, ids: &[usize]) -> LabeledDataset {
        let mut labels = ds.labels.clone();
        for &i in ids {
            if let Ok(pos) = self.original_labels.binary_search_by_key(&i, |&(r, _)| r) {
                labels[i] = self.original_labels[pos].1;
            }
        }
        ds.with_labels(labels)
    }
}

/// `round(x)` with ties going up.
pub fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor().max(0.0) as usize
}

/// Corrupts `round(fraction * n)` uniformly chosen labels. Binary labels are
/// flipped; multiclass labels move to a uniformly chosen different class.
pub fn flip_labels(
    ds: &LabeledDataset,
    fraction: f64,
    seed: u64,
) -> Result<(LabeledDataset, FlipMask)> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::InvalidArgument(format!("flip fraction {fraction} outside [0, 1]")));
    }
    let n = ds.n();
    let count = round_half_up(fraction * n as f64).min(n);
    if count > 0 && ds.num_classes < 2 {
        return Err(Error::InvalidArgument("cannot flip labels with fewer than 2 classes".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = sample(&mut rng, n, count).into_vec();
    rows.sort_unstable();
    let mut labels = ds.labels.clone();
    let mut flipped = vec![false; n];
    let mut original_labels = Vec::with_capacity(count);
    for &i in &rows {
        let old = labels[i];
        let new = if ds.num_classes == 2 {
            1 - old
        } else {
            let r = rng.gen_range(0..ds.num_classes - 1);
            if r >= old {
                r + 1
            } else {
                r
            }
        };
        labels[i] = new;
        flipped[i] = true;
        original_labels.push((i, old));
    }
    Ok((ds.with_labels(labels), FlipMask { flipped, original_labels }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinibatchPlan {
    pub k: usize,
    /// Minibatch index of every row.
    pub assignment: Vec<usize>,
    /// Order in which minibatches are visited each epoch.
    pub order: Vec<usize>,
    batches: Vec<Vec<usize>>,
}

impl MinibatchPlan {
    /// Row ids of minibatch `b`, ascending.
    pub fn batch(&self, b: usize) -> &[usize] {
        &self.batches[b]
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.batches.iter().map(Vec::len).collect()
    }
}

/// Seeded partition of `n` rows into `k` minibatches whose sizes differ by at most one.
pub fn make_minibatches(n: usize, k: usize, seed: u64) -> Result<MinibatchPlan> {
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!(
            "need 1 <= k <= n for minibatches, got k={k}, n={n}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);
    let (base, extra) = (n / k, n % k);
    let mut assignment = vec![0; n];
    let mut batches = Vec::with_capacity(k);
    let mut pos = 0;
    for b in 0..k {
        let len = base + usize::from(b < extra);
        let mut ids = perm[pos..pos + len].to_vec();
        ids.sort_unstable();
        for &i in &ids {
            assignment[i] = b;
        }
        batches.push(ids);
        pos += len;
    }
    let mut order: Vec<usize> = (0..k).collect();
    order.shuffle(&mut rng);
    Ok(MinibatchPlan {
        k,
        assignment,
        order,
        batches,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_is_balanced_and_deterministic() {
        for (n, d, seed) in [(2, 1, 0), (11, 3, 5), (100, 10, 7), (101, 4, 9)] {
            let ds = gen_synthetic(n, d, seed).unwrap();
            let ones = ds.labels().iter().filter(|&&l| l == 1).count();
            assert!((ones as i64 - (n - ones) as i64).abs() <= 1, "n={n}");
            assert_eq!(ds, gen_synthetic(n, d, seed).unwrap());
        }
        assert!(gen_synthetic(1, 3, 0).is_err());
        assert!(gen_synthetic(5, 0, 0).is_err());
    }

    #[test]
    fn minimal_csv() {
        let ds = read_csv("f0,label\n0.5,1\n-2,0\n".as_bytes()).unwrap();
        assert_eq!((ds.n(), ds.d(), ds.num_classes()), (2, 1, 2));
    }

    #[test]
    fn csv_errors() {
        let e = read_csv("label\n1\n".as_bytes()).unwrap_err();
        assert!(e.to_string().contains("no feature columns"), "{e}");
        let e = read_csv("f0,f1\n1,2\n".as_bytes()).unwrap_err();
        assert!(e.to_string().contains("label"), "{e}");
        let e = read_csv("f0,label\n1,0\nabc,1\n".as_bytes()).unwrap_err();
        assert!(e.to_string().contains("line 3"), "{e}");
        assert!(read_csv("".as_bytes()).is_err());
        assert!(read_csv("f0,label\n".as_bytes()).is_err());
        assert!(read_csv("f1,label\n1,0\n".as_bytes()).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let ds = gen_synthetic(30, 4, 3).unwrap();
        let mut buf = Vec::new();
        write_csv(&ds, &mut buf).unwrap();
        assert_eq!(read_csv(buf.as_slice()).unwrap(), ds);
    }

    #[test]
    fn flip_zero_is_identity() {
        let ds = gen_synthetic(20, 2, 1).unwrap();
        let (out, mask) = flip_labels(&ds, 0.0, 4).unwrap();
        assert_eq!(out, ds);
        assert_eq!(mask.count(), 0);
    }

    #[test]
    fn flip_ten_percent_of_ten() {
        let ds = gen_synthetic(10, 2, 1).unwrap();
        let (out, mask) = flip_labels(&ds, 0.1, 4).unwrap();
        assert_eq!(mask.count(), 1);
        let i = mask.flipped_ids()[0];
        assert_ne!(out.labels()[i], ds.labels()[i]);
        assert_eq!(mask.restore(&out), ds);
    }

    #[test]
    fn multiclass_flip_changes_class() {
        let x = Matrix::zeros(50, 1);
        let labels: Vec<usize> = (0..50).map(|i| i % 10).collect();
        let ds = LabeledDataset::new(x, labels, 10).unwrap();
        let (out, mask) = flip_labels(&ds, 0.5, 2).unwrap();
        assert_eq!(mask.count(), 25);
        for &(i, old) in &mask.original_labels {
            assert_ne!(out.labels()[i], old);
            assert!(out.labels()[i] < 10);
        }
    }

    #[test]
    fn minibatch_sizes() {
        assert_eq!(make_minibatches(10, 1, 0).unwrap().sizes(), vec![10]);
        assert_eq!(make_minibatches(10, 10, 0).unwrap().sizes(), vec![1; 10]);
        let mut s = make_minibatches(10, 3, 0).unwrap().sizes();
        s.sort_unstable();
        assert_eq!(s, vec![3, 3, 4]);
        assert!(make_minibatches(3, 4, 0).is_err());
        assert!(make_minibatches(3, 0, 0).is_err());
    }
}
