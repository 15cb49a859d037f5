//! Case matrices, adjacency, chronological splits, scaling and windows.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::DataError;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    Weekly,
    Daily,
}

/// Summary statistics over every entry of a case matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    /// Population standard deviation.
    pub sd: f64,
}

/// A time × region matrix of non-negative case counts.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub granularity: Granularity,
    cases: Tensor,
}

impl Dataset {
    pub fn new(name: impl Into<String>, granularity: Granularity, cases: Tensor) -> Result<Self, DataError> {
        if cases.ndim() != 2 {
            return Err(DataError::Empty { path: PathBuf::new() });
        }
        if let Some((i, &v)) = cases.data().iter().enumerate().find(|(_, v)| **v < 0.0) {
            return Err(DataError::Negative {
                path: PathBuf::new(),
                line: i / cases.shape()[1] + 1,
                value: v,
            });
        }
        Ok(Dataset {
            name: name.into(),
            granularity,
            cases,
        })
    }

    /// Reads a whitespace- or comma-delimited matrix, one time step per row.
    pub fn load(path: &Path, name: &str, granularity: Granularity) -> Result<Self, DataError> {
        let cases = read_matrix(path)?;
        if let Some((i, &v)) = cases.data().iter().enumerate().find(|(_, v)| **v < 0.0) {
            return Err(DataError::Negative {
                path: path.to_path_buf(),
                line: i / cases.shape()[1] + 1,
                value: v,
            });
        }
        Ok(Dataset {
            name: name.to_string(),
            granularity,
            cases,
        })
    }

    pub fn cases(&self) -> &Tensor {
        &self.cases
    }

    pub fn len(&self) -> usize {
        self.cases.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn regions(&self) -> usize {
        self.cases.shape()[1]
    }

    pub fn stats(&self) -> Stats {
        let d = self.cases.data();
        let n = d.len() as f64;
        let mean = d.iter().sum::<f64>() / n;
        let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Stats {
            min: d.iter().copied().fold(f64::INFINITY, f64::min),
            max: d.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            mean,
            sd: var.sqrt(),
        }
    }
}

fn read_matrix(path: &Path) -> Result<Tensor, DataError> {
    let text = fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_matrix(&text, path)
}

/// Parses a rectangular numeric matrix; blank lines are ignored.
pub fn parse_matrix(text: &str, path: &Path) -> Result<Tensor, DataError> {
    let mut data = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for (lineno, line) in text.lines().enumerate() {
        let tokens: Vec<&str> = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|t| !t.is_empty())
            .collect();
        if tokens.is_empty() {
            continue;
        }
        let expected = *cols.get_or_insert(tokens.len());
        if tokens.len() != expected {
            return Err(DataError::Ragged {
                path: path.to_path_buf(),
                line: lineno + 1,
                expected,
                found: tokens.len(),
            });
        }
        for tok in tokens {
            let v: f64 = tok.parse().ok().filter(|v: &f64| v.is_finite()).ok_or_else(|| DataError::NotNumeric {
                path: path.to_path_buf(),
                line: lineno + 1,
                token: tok.to_string(),
            })?;
            data.push(v);
        }
        rows += 1;
    }
    let cols = cols.ok_or_else(|| DataError::Empty {
        path: path.to_path_buf(),
    })?;
    Ok(Tensor::from_parts(vec![rows, cols], data))
}

/// Binary geographic adjacency with self-loops.
#[derive(Debug, Clone, PartialEq)]
pub struct GeoAdjacency {
    matrix: Tensor,
    degrees: Vec<f64>,
}

impl GeoAdjacency {
    /// Validates a 0/1 matrix and forces the diagonal to 1.
    pub fn from_matrix(matrix: Tensor, regions: usize) -> Result<Self, DataError> {
        let (rows, cols) = match matrix.shape() {
            [r, c] => (*r, *c),
            _ => (matrix.len(), 1),
        };
        if rows != regions || cols != regions {
            return Err(DataError::AdjacencyShape {
                expected: regions,
                rows,
                cols,
            });
        }
        let mut m = matrix;
        for i in 0..regions {
            for j in 0..regions {
                let v = m.at(&[i, j]);
                if v != 0.0 && v != 1.0 {
                    return Err(DataError::AdjacencyValue { row: i, col: j, value: v });
                }
            }
            m.set(&[i, i], 1.0);
        }
        let degrees = m.rows().map(|r| r.iter().sum()).collect();
        Ok(GeoAdjacency { matrix: m, degrees })
    }

    pub fn load(path: &Path, regions: usize) -> Result<Self, DataError> {
        Self::from_matrix(read_matrix(path)?, regions)
    }

    /// Adjacency where each region touches only itself.
    pub fn identity(regions: usize) -> Self {
        Self::from_matrix(Tensor::eye(regions), regions).expect("identity is valid")
    }

    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }

    pub fn degrees(&self) -> &[f64] {
        &self.degrees
    }

    pub fn regions(&self) -> usize {
        self.degrees.len()
    }
}

/// Chronological train/validation/test fractions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: f64,
    pub valid: f64,
    pub test: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train: 0.5,
            valid: 0.2,
            test: 0.3,
        }
    }
}

/// Time-index boundaries of the three contiguous segments.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Split {
    pub train: (usize, usize),
    pub valid: (usize, usize),
    pub test: (usize, usize),
}

impl Split {
    pub fn lens(&self) -> [usize; 3] {
        [
            self.train.1 - self.train.0,
            self.valid.1 - self.valid.0,
            self.test.1 - self.test.0,
        ]
    }
}

impl SplitSpec {
    /// Floor-rounded boundaries; the test segment takes the remainder.
    pub fn apply(&self, len: usize, window: usize, horizon: usize) -> Result<Split, DataError> {
        let fr = [self.train, self.valid, self.test];
        if fr.iter().any(|&f| f <= 0.0) || (fr.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(DataError::BadSplit(fr));
        }
        let train_end = (len as f64 * self.train + 1e-9).floor() as usize;
        let valid_end = train_end + (len as f64 * self.valid + 1e-9).floor() as usize;
        let split = Split {
            train: (0, train_end),
            valid: (train_end, valid_end.min(len)),
            test: (valid_end.min(len), len),
        };
        let needed = window + horizon;
        for (segment, n) in ["train", "valid", "test"].into_iter().zip(split.lens()) {
            if n < needed {
                return Err(DataError::SegmentTooShort {
                    segment,
                    len: n,
                    needed,
                    window,
                    horizon,
                });
            }
        }
        Ok(split)
    }
}

/// Per-region divisors fitted on the training segment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    divisors: Vec<f64>,
}

impl Scaler {
    /// Divisor of each column is its maximum over `rows`, floored at 1.
    pub fn fit(cases: &Tensor, rows: (usize, usize)) -> Self {
        let n = cases.shape()[1];
        let mut divisors = vec![1.0f64; n];
        for t in rows.0..rows.1 {
            for (j, d) in divisors.iter_mut().enumerate() {
                *d = d.max(cases.at(&[t, j]));
            }
        }
        Scaler { divisors }
    }

    pub fn from_divisors(divisors: Vec<f64>) -> Self {
        Scaler { divisors }
    }

    pub fn divisors(&self) -> &[f64] {
        &self.divisors
    }

    /// Scales a tensor whose last axis indexes regions.
    pub fn scale(&self, x: &Tensor) -> Tensor {
        self.apply(x, |v, d| v / d)
    }

    pub fn descale(&self, x: &Tensor) -> Tensor {
        self.apply(x, |v, d| v * d)
    }

    fn apply(&self, x: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let n = self.divisors.len();
        assert_eq!(x.shape().last(), Some(&n), "last axis must index regions");
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| f(v, self.divisors[i % n]))
            .collect();
        Tensor::from_parts(x.shape().to_vec(), data)
    }
}

/// Supervised samples: `window` past steps of every region and the vector
/// `horizon` steps after the last input step.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSet {
    pub window: usize,
    pub horizon: usize,
    regions: usize,
    inputs: Vec<f64>,
    targets: Vec<f64>,
    target_rows: Vec<usize>,
}

impl WindowSet {
    /// Samples whose targets fall in `targets.0 .. targets.1`, reading input
    /// rows from anywhere in `series` before them.
    pub fn from_targets(series: &Tensor, targets: (usize, usize), window: usize, horizon: usize) -> Self {
        let n = series.shape()[1];
        let first = targets.0.max(window + horizon - 1);
        let mut set = WindowSet {
            window,
            horizon,
            regions: n,
            inputs: Vec::new(),
            targets: Vec::new(),
            target_rows: Vec::new(),
        };
        for t in first..targets.1 {
            let start = t + 1 - horizon - window;
            set.inputs.extend_from_slice(&series.data()[start * n..(start + window) * n]);
            set.targets.extend_from_slice(&series.data()[t * n..(t + 1) * n]);
            set.target_rows.push(t);
        }
        set
    }

    pub fn len(&self) -> usize {
        self.target_rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.target_rows.is_empty()
    }

    pub fn regions(&self) -> usize {
        self.regions
    }

    /// Row of the source series each target was taken from.
    pub fn target_rows(&self) -> &[usize] {
        &self.target_rows
    }

    pub fn sample(&self, i: usize) -> WindowSample {
        let (w, n) = (self.window, self.regions);
        WindowSample {
            input: Tensor::from_parts(vec![w, n], self.inputs[i * w * n..(i + 1) * w * n].to_vec()),
            target: self.targets[i * n..(i + 1) * n].to_vec(),
            target_row: self.target_rows[i],
        }
    }

    /// Stacks the given samples into `[B, T, N]` inputs and `[B, N]` targets.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Tensor) {
        let (w, n) = (self.window, self.regions);
        let mut x = Vec::with_capacity(indices.len() * w * n);
        let mut y = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            x.extend_from_slice(&self.inputs[i * w * n..(i + 1) * w * n]);
            y.extend_from_slice(&self.targets[i * n..(i + 1) * n]);
        }
        (
            Tensor::from_parts(vec![indices.len(), w, n], x),
            Tensor::from_parts(vec![indices.len(), n], y),
        )
    }

    /// Keeps only the first `count` samples.
    pub fn truncate(&mut self, count: usize) {
        let (w, n) = (self.window, self.regions);
        self.target_rows.truncate(count);
        self.inputs.truncate(count * w * n);
        self.targets.truncate(count * n);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowSample {
    pub input: Tensor,
    pub target: Vec<f64>,
    pub target_row: usize,
}

/// Windows of a standalone segment: `len − window − horizon + 1` samples.
pub fn make_windows(segment: &Tensor, window: usize, horizon: usize) -> WindowSet {
    WindowSet::from_targets(segment, (0, segment.shape()[0]), window, horizon)
}

/// Everything a model needs for one (dataset, window, horizon) run.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub dataset: Dataset,
    pub adjacency: GeoAdjacency,
    pub split: Split,
    pub scaler: Scaler,
    pub train: WindowSet,
    pub valid: WindowSet,
    pub test: WindowSet,
}

impl Prepared {
    /// Splits, fits the scaler on the training rows and builds scaled windows.
    /// Validation and test inputs may reach back into the previous segment.
    pub fn new(
        dataset: Dataset,
        adjacency: GeoAdjacency,
        spec: SplitSpec,
        window: usize,
        horizon: usize,
    ) -> Result<Self, DataError> {
        if adjacency.regions() != dataset.regions() {
            return Err(DataError::AdjacencyShape {
                expected: dataset.regions(),
                rows: adjacency.regions(),
                cols: adjacency.regions(),
            });
        }
        let split = spec.apply(dataset.len(), window, horizon)?;
        let scaler = Scaler::fit(dataset.cases(), split.train);
        let scaled = scaler.scale(dataset.cases());
        let train_rows = Tensor::from_parts(
            vec![split.train.1, dataset.regions()],
            scaled.data()[..split.train.1 * dataset.regions()].to_vec(),
        );
        Ok(Prepared {
            train: make_windows(&train_rows, window, horizon),
            valid: WindowSet::from_targets(&scaled, split.valid, window, horizon),
            test: WindowSet::from_targets(&scaled, split.test, window, horizon),
            dataset,
            adjacency,
            split,
            scaler,
        })
    }

    pub fn regions(&self) -> usize {
        self.dataset.regions()
    }
}

/// The four benchmark datasets and their published characteristics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DatasetName {
    Japan,
    UsRegions,
    UsStates,
    Australia,
}

/// Published shape and summary statistics of a benchmark dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PublishedStats {
    pub regions: usize,
    pub length: usize,
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub sd: f64,
}

impl DatasetName {
    pub const ALL: [DatasetName; 4] = [
        DatasetName::Japan,
        DatasetName::UsRegions,
        DatasetName::UsStates,
        DatasetName::Australia,
    ];

    pub fn key(self) -> &'static str {
        match self {
            DatasetName::Japan => "japan",
            DatasetName::UsRegions => "us-regions",
            DatasetName::UsStates => "us-states",
            DatasetName::Australia => "australia",
        }
    }

    pub fn granularity(self) -> Granularity {
        match self {
            DatasetName::Australia => Granularity::Daily,
            _ => Granularity::Weekly,
        }
    }

    pub fn files(self) -> (&'static str, &'static str) {
        match self {
            DatasetName::Japan => ("japan.txt", "japan-adj.txt"),
            DatasetName::UsRegions => ("region785.txt", "region-adj.txt"),
            DatasetName::UsStates => ("state360.txt", "state-adj-49.txt"),
            DatasetName::Australia => ("australia.txt", "australia-adj.txt"),
        }
    }

    pub fn published(self) -> PublishedStats {
        let (regions, length, max, mean, sd) = match self {
            DatasetName::Japan => (47, 348, 26635.0, 655.0, 1711.0),
            DatasetName::UsRegions => (10, 785, 16526.0, 1009.0, 1351.0),
            DatasetName::UsStates => (49, 360, 9716.0, 223.0, 428.0),
            DatasetName::Australia => (8, 556, 9987.0, 539.0, 1532.0),
        };
        PublishedStats {
            regions,
            length,
            min: 0.0,
            max,
            mean,
            sd,
        }
    }

    /// Directory holding the bundled files: `EPIHYB_DATA_DIR` or `./data`.
    pub fn default_dir() -> PathBuf {
        std::env::var_os("EPIHYB_DATA_DIR")
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("data"))
    }

    pub fn load(self, dir: &Path) -> Result<(Dataset, GeoAdjacency), DataError> {
        let (cases, adj) = self.files();
        let ds = Dataset::load(&dir.join(cases), self.key(), self.granularity())?;
        let adj = GeoAdjacency::load(&dir.join(adj), ds.regions())?;
        Ok((ds, adj))
    }
}

impl fmt::Display for DatasetName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for DatasetName {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.to_ascii_lowercase().replace('_', "-");
        DatasetName::ALL
            .into_iter()
            .find(|d| d.key() == norm)
            .ok_or_else(|| format!("unknown dataset {s:?} (expected japan, us-regions, us-states or australia)"))
    }
}
