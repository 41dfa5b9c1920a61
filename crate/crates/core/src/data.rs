//! Binary-labelled datasets: LIBSVM ingestion, a binary cache, synthetic
//! Gaussian-mixture tasks, stratified splits and class-balanced batches.

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor;

const CACHE_MAGIC: &[u8; 8] = b"MOPTDS01";
/// Train/validation/test fractions of a stratified split.
pub const SPLIT_FRACTIONS: (f64, f64) = (0.7, 0.1);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    fn code(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Split::Train),
            1 => Some(Split::Val),
            2 => Some(Split::Test),
            _ => None,
        }
    }
}

/// Rows of one split, materialized.
#[derive(Debug, Clone, PartialEq)]
pub struct Subset {
    pub features: Tensor<f64>,
    pub labels: Vec<bool>,
}

impl Subset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&y| y).count()
    }

    pub fn has_both_classes(&self) -> bool {
        let pos = self.positives();
        pos > 0 && pos < self.len()
    }

    /// Gathers `rows` into a new batch.
    pub fn gather(&self, rows: &[usize]) -> Subset {
        gather_rows(&self.features, &self.labels, rows)
    }

    /// The first `n` rows (all rows when `n` exceeds the length).
    pub fn head(&self, n: usize) -> Subset {
        let rows: Vec<usize> = (0..n.min(self.len())).collect();
        self.gather(&rows)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub features: Tensor<f64>,
    pub labels: Vec<bool>,
    pub splits: Vec<Split>,
}

impl LabeledDataset {
    /// Every row tagged `Train`.
    pub fn unsplit(features: Tensor<f64>, labels: Vec<bool>) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::shape("dataset labels", features.rows(), labels.len()));
        }
        let splits = vec![Split::Train; labels.len()];
        Ok(Self {
            features,
            labels,
            splits,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_features(&self) -> usize {
        self.features.cols()
    }

    pub fn subset(&self, split: Split) -> Subset {
        let rows: Vec<usize> = (0..self.len()).filter(|&i| self.splits[i] == split).collect();
        gather_rows(&self.features, &self.labels, &rows)
    }

    /// Reassigns split tags: within each class, a shuffled 70% / 10% / 20%.
    pub fn stratified_split(mut self, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for class in [false, true] {
            let mut rows: Vec<usize> = (0..self.len()).filter(|&i| self.labels[i] == class).collect();
            rows.shuffle(&mut rng);
            let n = rows.len() as f64;
            let n_train = (SPLIT_FRACTIONS.0 * n).round() as usize;
            let n_val = ((SPLIT_FRACTIONS.0 + SPLIT_FRACTIONS.1) * n).round() as usize - n_train;
            for (j, &i) in rows.iter().enumerate() {
                self.splits[i] = if j < n_train {
                    Split::Train
                } else if j < n_train + n_val {
                    Split::Val
                } else {
                    Split::Test
                };
            }
        }
        self
    }

    /// Writes the binary cache: magic, `n` and `p` as little-endian u64,
    /// `n·p` f64 features, then one label byte and one split byte per row.
    pub fn save_cache(&self, path: impl AsRef<Path>) -> Result<()> {
        let (n, p) = (self.len(), self.num_features());
        let mut buf = Vec::with_capacity(24 + 8 * n * p + 2 * n);
        buf.extend_from_slice(CACHE_MAGIC);
        buf.extend_from_slice(&(n as u64).to_le_bytes());
        buf.extend_from_slice(&(p as u64).to_le_bytes());
        for v in self.features.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.extend(self.labels.iter().map(|&y| u8::from(y)));
        buf.extend(self.splits.iter().map(|s| s.code()));
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn load_cache(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = fs::read(path)?;
        let bad = |msg: &str| Error::InvalidArgument(format!("dataset cache: {msg}"));
        if bytes.len() < 24 || &bytes[..8] != CACHE_MAGIC {
            return Err(bad("bad magic"));
        }
        let word = |at: usize| u64::from_le_bytes(bytes[at..at + 8].try_into().unwrap()) as usize;
        let (n, p) = (word(8), word(16));
        let body = n
            .checked_mul(p)
            .and_then(|np| np.checked_mul(8))
            .and_then(|b| b.checked_add(2 * n + 24))
            .ok_or_else(|| bad("size overflow"))?;
        if bytes.len() != body {
            return Err(bad("truncated file"));
        }
        let features: Vec<f64> = bytes[24..24 + 8 * n * p]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let tail = &bytes[24 + 8 * n * p..];
        let labels = tail[..n]
            .iter()
            .map(|&b| match b {
                0 => Ok(false),
                1 => Ok(true),
                _ => Err(bad("label byte")),
            })
            .collect::<Result<Vec<_>>>()?;
        let splits = tail[n..]
            .iter()
            .map(|&b| Split::from_code(b).ok_or_else(|| bad("split byte")))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            features: Tensor::matrix(n, p, features)?,
            labels,
            splits,
        })
    }
}

fn gather_rows(features: &Tensor<f64>, labels: &[bool], rows: &[usize]) -> Subset {
    let p = features.cols();
    let mut data = Vec::with_capacity(rows.len() * p);
    for &i in rows {
        data.extend_from_slice(features.row(i));
    }
    Subset {
        features: Tensor::matrix(rows.len(), p, data).expect("consistent row width"),
        labels: rows.iter().map(|&i| labels[i]).collect(),
    }
}

fn parse_label(token: &str, line: usize) -> Result<bool> {
    let err = || Error::Parse {
        line,
        message: format!("label `{token}` is not binary"),
    };
    let v: f64 = token.parse().map_err(|_| err())?;
    if v == 1.0 {
        Ok(true)
    } else if v == -1.0 || v == 0.0 {
        Ok(false)
    } else {
        Err(err())
    }
}

/// Parses LIBSVM text: `<label> <idx>:<val> ...` with 1-based ascending
/// indices. Labels `+1`/`1` map to positive, `-1`/`0` to negative.
///
/// `num_features` fixes the width; otherwise the largest index seen is used.
pub fn parse_libsvm(reader: impl BufRead, num_features: Option<usize>) -> Result<(Tensor<f64>, Vec<bool>)> {
    let mut rows: Vec<Vec<(usize, f64)>> = Vec::new();
    let mut labels = Vec::new();
    let mut width = 0;
    for (k, line) in reader.lines().enumerate() {
        let line_no = k + 1;
        let line = line?;
        let text = line.split('#').next().unwrap_or("").trim();
        if text.is_empty() {
            continue;
        }
        let mut tokens = text.split_whitespace();
        labels.push(parse_label(tokens.next().unwrap(), line_no)?);
        let mut entries = Vec::new();
        let mut last = 0;
        for tok in tokens {
            let parse_err = |message: String| Error::Parse { line: line_no, message };
            let (idx, val) = tok
                .split_once(':')
                .ok_or_else(|| parse_err(format!("expected idx:val, got `{tok}`")))?;
            let idx: usize = idx
                .parse()
                .map_err(|_| parse_err(format!("bad feature index `{idx}`")))?;
            let val: f64 = val
                .parse()
                .map_err(|_| parse_err(format!("bad feature value `{val}`")))?;
            if idx == 0 || idx <= last {
                return Err(parse_err(format!("indices must be 1-based and ascending at `{tok}`")));
            }
            if !val.is_finite() {
                return Err(parse_err(format!("non-finite value at `{tok}`")));
            }
            if let Some(p) = num_features {
                if idx > p {
                    return Err(parse_err(format!("index {idx} exceeds feature count {p}")));
                }
            }
            last = idx;
            entries.push((idx - 1, val));
        }
        width = width.max(last);
        rows.push(entries);
    }
    let p = num_features.unwrap_or(width);
    let mut data = vec![0.0; rows.len() * p];
    for (i, entries) in rows.iter().enumerate() {
        for &(j, v) in entries {
            data[i * p + j] = v;
        }
    }
    Ok((Tensor::matrix(rows.len(), p, data)?, labels))
}

/// Reads a LIBSVM file and applies a stratified split.
pub fn load_libsvm(path: impl AsRef<Path>, num_features: Option<usize>, seed: u64) -> Result<LabeledDataset> {
    let file = fs::File::open(path)?;
    let (features, labels) = parse_libsvm(BufReader::new(file), num_features)?;
    Ok(LabeledDataset::unsplit(features, labels)?.stratified_split(seed))
}

/// Two isotropic Gaussian classes whose means sit `separation` apart along
/// a random unit direction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    /// Probability of the positive class, in `(0, 0.5]`.
    pub imbalance: f64,
    pub n: usize,
    pub p: usize,
    pub separation: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            imbalance: 0.25,
            n: 4000,
            p: 20,
            separation: 2.0,
        }
    }
}

pub fn generate_synthetic_task(spec: &SyntheticSpec, seed: u64) -> Result<LabeledDataset> {
    if !(spec.imbalance > 0.0 && spec.imbalance <= 0.5) {
        return Err(Error::InvalidArgument(format!(
            "class imbalance {} outside (0, 0.5]",
            spec.imbalance
        )));
    }
    if spec.n < 100 || spec.p == 0 {
        return Err(Error::InvalidArgument(
            "synthetic task needs n >= 100 and p >= 1".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dir: Vec<f64> = (0..spec.p).map(|_| rng.sample(StandardNormal)).collect();
    let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    dir.iter_mut().for_each(|x| *x /= norm);
    let mut data = Vec::with_capacity(spec.n * spec.p);
    let mut labels = Vec::with_capacity(spec.n);
    for _ in 0..spec.n {
        let y = rng.random_bool(spec.imbalance);
        let offset = if y { 0.5 } else { -0.5 } * spec.separation;
        for &u in &dir {
            let noise: f64 = rng.sample(StandardNormal);
            data.push(noise + offset * u);
        }
        labels.push(y);
    }
    Ok(LabeledDataset::unsplit(Tensor::matrix(spec.n, spec.p, data)?, labels)?.stratified_split(seed ^ 0x5157))
}

/// Draws mini-batches with `⌈B/2⌉` positives and `⌊B/2⌋` negatives.
#[derive(Debug, Clone)]
pub struct BalancedSampler {
    positives: Vec<usize>,
    negatives: Vec<usize>,
}

impl BalancedSampler {
    pub fn new(labels: &[bool]) -> Result<Self> {
        let positives: Vec<usize> = (0..labels.len()).filter(|&i| labels[i]).collect();
        let negatives: Vec<usize> = (0..labels.len()).filter(|&i| !labels[i]).collect();
        if positives.is_empty() || negatives.is_empty() {
            return Err(Error::DegenerateLabels("balanced sampling needs both classes".into()));
        }
        Ok(Self { positives, negatives })
    }

    fn draw<R: Rng + ?Sized>(pool: &[usize], count: usize, rng: &mut R, out: &mut Vec<usize>) {
        if count <= pool.len() {
            out.extend(index::sample(rng, pool.len(), count).iter().map(|j| pool[j]));
        } else {
            out.extend((0..count).map(|_| pool[rng.random_range(0..pool.len())]));
        }
    }

    /// Row indices of one batch: positives first, then negatives.
    pub fn sample<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Vec<usize> {
        let mut out = Vec::with_capacity(batch);
        Self::draw(&self.positives, batch.div_ceil(2), rng, &mut out);
        Self::draw(&self.negatives, batch / 2, rng, &mut out);
        out
    }
}

/// Uniform mini-batches without replacement (with replacement when `batch`
/// exceeds the pool).
pub fn uniform_batch<R: Rng + ?Sized>(n: usize, batch: usize, rng: &mut R) -> Vec<usize> {
    let mut out = Vec::with_capacity(batch);
    let pool: Vec<usize> = (0..n).collect();
    BalancedSampler::draw(&pool, batch, rng, &mut out);
    out
}
