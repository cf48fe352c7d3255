//! Low-rank ground-truth tensors for desk-scale recovery checks.
//!
//! Every cell of the dense tensor is the Tucker sum over a random core and
//! random factor matrices. Values are standardized over the whole tensor,
//! optionally perturbed with Gaussian noise and squashed by a sigmoid, so the
//! observed values lie in `(0, 1)`.

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::kv::KvDoc;
use crate::nn::sigmoid;
use crate::rng;
use crate::sparse_tensor::{parse_usize_list, Entry, SparseTensor, SplitRatios, TensorShape};

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorSpec {
    pub shape: TensorShape,
    pub ranks: [usize; 3],
    /// Standard deviation of noise added before the sigmoid.
    pub noise: f64,
    /// Fraction of cells observed.
    pub density: f64,
    pub seed: u64,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self {
            shape: TensorShape::new(20, 20, 10).expect("nonzero"),
            ranks: [3, 3, 3],
            noise: 0.0,
            density: 0.1,
            seed: 0,
        }
    }
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.ranks.contains(&0) {
            return Err(Error::Config("generator ranks must be positive".into()));
        }
        if !self.noise.is_finite() || self.noise < 0.0 {
            return Err(Error::Config(format!("noise must be non-negative, got {}", self.noise)));
        }
        if !(self.density > 0.0 && self.density <= 1.0) {
            return Err(Error::Config(format!("density must lie in (0, 1], got {}", self.density)));
        }
        Ok(())
    }

    /// Number of observed cells.
    pub fn observed(&self) -> usize {
        (self.density * self.shape.volume() as f64).round() as usize
    }

    pub fn to_kv(&self, doc: &mut KvDoc) {
        doc.set("gen.shape", self.shape);
        doc.set("gen.ranks", format!("{},{},{}", self.ranks[0], self.ranks[1], self.ranks[2]));
        doc.set("gen.noise", self.noise);
        doc.set("gen.density", self.density);
        doc.set("gen.seed", self.seed);
    }

    pub fn update_from_kv(&mut self, doc: &KvDoc) -> Result<()> {
        if let Some(v) = doc.parsed("gen.shape")? {
            self.shape = v;
        }
        if let Some(v) = doc.get("gen.ranks") {
            self.ranks = parse_ranks(v)?;
        }
        if let Some(v) = doc.parsed("gen.noise")? {
            self.noise = v;
        }
        if let Some(v) = doc.parsed("gen.density")? {
            self.density = v;
        }
        if let Some(v) = doc.parsed("gen.seed")? {
            self.seed = v;
        }
        Ok(())
    }
}

pub fn parse_ranks(s: &str) -> Result<[usize; 3]> {
    let v = parse_usize_list(s)?;
    <[usize; 3]>::try_from(v.as_slice())
        .map_err(|_| Error::Config(format!("expected three comma-separated ranks, got '{s}'")))
}

/// The dense ground truth and the sampled observations.
#[derive(Debug, Clone)]
pub struct SyntheticTensor {
    pub dense: Vec<f64>,
    pub observed: SparseTensor,
}

pub fn generate(spec: &GeneratorSpec) -> Result<SyntheticTensor> {
    spec.validate()?;
    let shape = spec.shape;
    let [p, q, r] = spec.ranks;
    let mut rng = rng::chacha(spec.seed, &[0x5E7]);
    let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(0.0..1.0)).collect() };
    let a = draw(shape.users * p);
    let b = draw(shape.services * q);
    let c = draw(shape.time_slices * r);
    let core = draw(p * q * r);

    let mut raw = Vec::with_capacity(shape.volume());
    for i in 0..shape.users {
        for j in 0..shape.services {
            for k in 0..shape.time_slices {
                let mut x = 0.0;
                for pp in 0..p {
                    for qq in 0..q {
                        for rr in 0..r {
                            x += core[(pp * q + qq) * r + rr]
                                * a[i * p + pp]
                                * b[j * q + qq]
                                * c[k * r + rr];
                        }
                    }
                }
                raw.push(x);
            }
        }
    }

    let n = raw.len() as f64;
    let mean = raw.iter().sum::<f64>() / n;
    let std = (raw.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt();
    let scale = if std > 0.0 { 1.0 / std } else { 1.0 };
    let mut noise_rng = rng::chacha(spec.seed, &[0x5E7, 1]);
    let dense: Vec<f64> = raw
        .iter()
        .map(|x| {
            let eps: f64 = StandardNormal.sample(&mut noise_rng);
            sigmoid((x - mean) * scale + spec.noise * eps)
        })
        .collect();

    let count = spec.observed();
    if count == 0 {
        return Err(Error::Generation(format!(
            "density {} leaves no observed cells in a {} tensor",
            spec.density, shape
        )));
    }
    let mut cells = index::sample(&mut rng::chacha(spec.seed, &[0x5E7, 2]), dense.len(), count).into_vec();
    cells.sort_unstable();
    let per_user = shape.services * shape.time_slices;
    let entries = cells
        .into_iter()
        .map(|n| Entry::new(n / per_user, (n / shape.time_slices) % shape.services, n % shape.time_slices, dense[n]))
        .collect();
    Ok(SyntheticTensor {
        dense,
        observed: SparseTensor::new(shape, entries)?,
    })
}

/// Fails when any split part would receive no entries.
pub fn check_split_sizes(spec: &GeneratorSpec, ratios: SplitRatios) -> Result<()> {
    let (train, valid, test) = ratios.counts(spec.observed());
    for (name, n, r) in [("train", train, ratios.train), ("valid", valid, ratios.valid), ("test", test, ratios.test)] {
        if n == 0 && r > 0.0 {
            return Err(Error::Generation(format!(
                "density {} yields an empty {name} split ({} observed cells)",
                spec.density,
                spec.observed()
            )));
        }
    }
    if train == 0 || test == 0 {
        return Err(Error::Generation("train and test splits must be non-empty".into()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> GeneratorSpec {
        GeneratorSpec {
            shape: TensorShape::new(6, 5, 4).unwrap(),
            ranks: [2, 3, 2],
            seed,
            density: 0.5,
            ..GeneratorSpec::default()
        }
    }

    #[test]
    fn same_seed_same_tensor() {
        let a = generate(&small(3)).unwrap();
        let b = generate(&small(3)).unwrap();
        assert_eq!(a.dense, b.dense);
        assert_eq!(a.observed, b.observed);
        assert_ne!(generate(&small(4)).unwrap().dense, a.dense);
    }

    #[test]
    fn exact_observed_count_and_values() {
        let spec = small(1);
        let t = generate(&spec).unwrap();
        assert_eq!(t.observed.len(), 60);
        for e in t.observed.entries() {
            assert!(e.value > 0.0 && e.value < 1.0);
            assert_eq!(e.value, t.dense[spec.shape.linear_index(e.i, e.j, e.k)]);
        }
    }

    #[test]
    fn noiseless_values_are_standardized_logits() {
        let t = generate(&small(9)).unwrap();
        let logits: Vec<f64> = t.dense.iter().map(|y| (y / (1.0 - y)).ln()).collect();
        let n = logits.len() as f64;
        let mean = logits.iter().sum::<f64>() / n;
        let var = logits.iter().map(|z| (z - mean) * (z - mean)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-9);
        assert!((var - 1.0).abs() < 1e-9);
    }

    #[test]
    fn rank_one_generator_gives_rank_one_differences() {
        // Logits are s * a_i * w_jk + const, so row differences
        // (a_i - a_i') * w_jk are proportional across columns.
        let spec = GeneratorSpec {
            shape: TensorShape::new(3, 3, 2).unwrap(),
            ranks: [1, 1, 1],
            density: 1.0,
            ..GeneratorSpec::default()
        };
        let t = generate(&spec).unwrap();
        let x = |i: usize, col: usize| {
            let y = t.dense[i * 6 + col];
            (y / (1.0 - y)).ln()
        };
        let d = |i: usize, col: usize| x(0, col) - x(i, col);
        for (c0, c1) in [(0, 1), (2, 5), (3, 4)] {
            let det = d(1, c0) * d(2, c1) - d(1, c1) * d(2, c0);
            assert!(det.abs() < 1e-9, "{det}");
        }
    }

    #[test]
    fn density_too_low() {
        let spec = GeneratorSpec { density: 1e-4, ..small(0) };
        assert!(matches!(generate(&spec), Err(Error::Generation(_))));
        let spec = GeneratorSpec { density: 0.05, ..small(0) };
        assert!(matches!(
            check_split_sizes(&spec, SplitRatios::new(0.7, 0.1, 0.2).unwrap()),
            Err(Error::Generation(_))
        ));
        assert!(check_split_sizes(&GeneratorSpec::default(), SplitRatios::new(0.7, 0.1, 0.2).unwrap()).is_ok());
        assert!(GeneratorSpec { density: 1.5, ..small(0) }.validate().is_err());
    }
}
