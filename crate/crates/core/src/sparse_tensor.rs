//! Observed-entry storage for 3-mode HDI tensors.
//!
//! A [`SparseTensor`] holds the observed cells of a `users × services × time`
//! tensor as a coordinate list. Files follow the WSDream layout: one
//! observation per line, `user service time value`, negative values marking
//! missing measurements.

use std::fmt;
use std::io::{BufRead, BufReader};
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::SplitMix64;

/// Mode sizes `(I, J, K)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorShape {
    pub users: usize,
    pub services: usize,
    pub time_slices: usize,
}

impl TensorShape {
    pub fn new(users: usize, services: usize, time_slices: usize) -> Result<Self> {
        if users == 0 || services == 0 || time_slices == 0 {
            return Err(Error::Validation(format!(
                "tensor shape must be positive in every mode, got {users}x{services}x{time_slices}"
            )));
        }
        Ok(Self {
            users,
            services,
            time_slices,
        })
    }

    pub fn volume(&self) -> usize {
        self.users * self.services * self.time_slices
    }

    pub fn contains(&self, i: usize, j: usize, k: usize) -> bool {
        i < self.users && j < self.services && k < self.time_slices
    }

    /// Row-major linear index of a cell.
    pub fn linear_index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.services + j) * self.time_slices + k
    }
}

impl fmt::Display for TensorShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{}", self.users, self.services, self.time_slices)
    }
}

impl std::str::FromStr for TensorShape {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let dims = parse_usize_list(s)?;
        match dims.as_slice() {
            [i, j, k] => TensorShape::new(*i, *j, *k),
            _ => Err(Error::Config(format!("shape needs three comma-separated sizes, got '{s}'"))),
        }
    }
}

pub(crate) fn parse_usize_list(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("'{p}' is not a non-negative integer")))
        })
        .collect()
}

/// One observed cell. Indices are 0-based; `value` is in dataset units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Entry {
    pub i: usize,
    pub j: usize,
    pub k: usize,
    pub value: f64,
}

impl Entry {
    pub fn new(i: usize, j: usize, k: usize, value: f64) -> Self {
        Self { i, j, k, value }
    }

    pub fn index(&self) -> (usize, usize, usize) {
        (self.i, self.j, self.k)
    }
}

/// Coordinate list of observed entries. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseTensor {
    shape: TensorShape,
    entries: Vec<Entry>,
}

impl SparseTensor {
    /// Builds a tensor after checking bounds, finiteness, sign and uniqueness.
    pub fn new(shape: TensorShape, entries: Vec<Entry>) -> Result<Self> {
        for e in &entries {
            if !shape.contains(e.i, e.j, e.k) {
                return Err(Error::Validation(format!(
                    "entry ({}, {}, {}) outside shape {shape}",
                    e.i, e.j, e.k
                )));
            }
            if !e.value.is_finite() || e.value < 0.0 {
                return Err(Error::Validation(format!(
                    "entry ({}, {}, {}) has invalid value {}",
                    e.i, e.j, e.k, e.value
                )));
            }
        }
        if let Some((i, j, k)) = first_duplicate(&shape, &entries) {
            return Err(Error::Validation(format!("duplicate entry ({i}, {j}, {k})")));
        }
        Ok(Self { shape, entries })
    }

    pub fn empty(shape: TensorShape) -> Self {
        Self {
            shape,
            entries: Vec::new(),
        }
    }

    pub fn shape(&self) -> TensorShape {
        self.shape
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Fraction of cells that are observed.
    pub fn density(&self) -> f64 {
        self.entries.len() as f64 / self.shape.volume() as f64
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.entries.iter().map(|e| e.value)
    }
}

fn first_duplicate(shape: &TensorShape, entries: &[Entry]) -> Option<(usize, usize, usize)> {
    let mut keys: Vec<usize> = entries
        .iter()
        .map(|e| shape.linear_index(e.i, e.j, e.k))
        .collect();
    keys.sort_unstable();
    let dup = keys.windows(2).find(|w| w[0] == w[1])?[0];
    let k = dup % shape.time_slices;
    let j = (dup / shape.time_slices) % shape.services;
    let i = dup / (shape.time_slices * shape.services);
    Some((i, j, k))
}

/// Reads a WSDream-style observation file.
///
/// `index_base` is subtracted from every index, so 1-based files load with
/// `index_base = 1`. Lines starting with `#` and blank lines are ignored, as
/// are observations with a negative value.
pub fn load_wsdream(path: impl AsRef<Path>, shape: TensorShape, index_base: usize) -> Result<SparseTensor> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_wsdream(BufReader::new(file), shape, index_base)
}

pub fn read_wsdream(reader: impl BufRead, shape: TensorShape, index_base: usize) -> Result<SparseTensor> {
    let mut entries = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line_no = n + 1;
        let line = line.map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected 4 fields, found {}", fields.len()),
            });
        }
        let index = |s: &str, mode: &str| -> Result<usize> {
            let raw: usize = s.parse().map_err(|_| Error::Parse {
                line: line_no,
                message: format!("{mode} index '{s}' is not a non-negative integer"),
            })?;
            raw.checked_sub(index_base).ok_or_else(|| {
                Error::Validation(format!("line {line_no}: {mode} index {raw} below index base {index_base}"))
            })
        };
        let i = index(fields[0], "user")?;
        let j = index(fields[1], "service")?;
        let k = index(fields[2], "time")?;
        let value: f64 = fields[3].parse().map_err(|_| Error::Parse {
            line: line_no,
            message: format!("value '{}' is not a number", fields[3]),
        })?;
        if !value.is_finite() {
            return Err(Error::Parse {
                line: line_no,
                message: format!("value '{}' is not finite", fields[3]),
            });
        }
        if value < 0.0 {
            continue;
        }
        if !shape.contains(i, j, k) {
            return Err(Error::Validation(format!(
                "line {line_no}: index ({i}, {j}, {k}) outside shape {shape}"
            )));
        }
        entries.push(Entry::new(i, j, k, value));
    }
    SparseTensor::new(shape, entries)
}

/// Writes entries in the format [`load_wsdream`] reads (0-based indices).
pub fn write_wsdream(path: impl AsRef<Path>, tensor: &SparseTensor) -> Result<()> {
    use std::io::Write;
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    for e in tensor.entries() {
        writeln!(out, "{} {} {} {}", e.i, e.j, e.k, e.value).map_err(|err| Error::io(path, err))?;
    }
    out.flush().map_err(|err| Error::io(path, err))
}

/// Train/validation/test fractions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitRatios {
    pub train: f64,
    pub valid: f64,
    pub test: f64,
}

impl SplitRatios {
    pub fn new(train: f64, valid: f64, test: f64) -> Result<Self> {
        let all = [train, valid, test];
        if all.iter().any(|r| !r.is_finite() || *r < 0.0) {
            return Err(Error::Config(format!("split ratios must be non-negative, got {all:?}")));
        }
        let sum = train + valid + test;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split ratios must sum to 1, got {sum}")));
        }
        Ok(Self { train, valid, test })
    }

    /// Entry counts for `n` records: train and valid are floored, test takes the rest.
    pub fn counts(&self, n: usize) -> (usize, usize, usize) {
        // The small offset keeps products such as 0.7 * 10 from flooring to 6.
        let floor = |r: f64| ((r * n as f64 + 1e-9).floor() as usize).min(n);
        let train = floor(self.train);
        let valid = floor(self.valid).min(n - train);
        (train, valid, n - train - valid)
    }
}

impl fmt::Display for SplitRatios {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{}", self.train, self.valid, self.test)
    }
}

impl std::str::FromStr for SplitRatios {
    type Err = Error;

    /// Accepts fractions (`0.05,0.15,0.8`) or parts (`5:15:80`, normalized by their sum).
    fn from_str(s: &str) -> Result<Self> {
        let (sep, parts) = if s.contains(':') { (':', true) } else { (',', false) };
        let vals: Vec<f64> = s
            .split(sep)
            .map(|p| {
                p.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Config(format!("'{p}' is not a number in split '{s}'")))
            })
            .collect::<Result<_>>()?;
        let [a, b, c] = vals[..] else {
            return Err(Error::Config(format!("split needs three values, got '{s}'")));
        };
        if parts {
            let total = a + b + c;
            if total <= 0.0 {
                return Err(Error::Config(format!("split parts must have a positive sum, got '{s}'")));
            }
            SplitRatios::new(a / total, b / total, c / total)
        } else {
            SplitRatios::new(a, b, c)
        }
    }
}

/// Disjoint train/validation/test partition of one tensor's entries.
#[derive(Debug, Clone)]
pub struct DataSplit {
    pub train: SparseTensor,
    pub valid: SparseTensor,
    pub test: SparseTensor,
    pub seed: u64,
    pub ratios: SplitRatios,
}

/// Shuffles entries with a seeded SplitMix64 permutation and cuts by ratio.
pub fn split(tensor: &SparseTensor, ratios: SplitRatios, seed: u64) -> DataSplit {
    let mut order: Vec<usize> = (0..tensor.len()).collect();
    SplitMix64::new(seed).shuffle(&mut order);
    let (n_train, n_valid, _) = ratios.counts(order.len());
    let take = |idx: &[usize]| SparseTensor {
        shape: tensor.shape,
        entries: idx.iter().map(|&p| tensor.entries[p]).collect(),
    };
    DataSplit {
        train: take(&order[..n_train]),
        valid: take(&order[n_train..n_train + n_valid]),
        test: take(&order[n_train + n_valid..]),
        seed,
        ratios,
    }
}
