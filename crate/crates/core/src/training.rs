//! Mini-batch optimization of the half squared error over observed entries.
//!
//! A batch is cut into fixed-size shards. Each shard runs forward/backward
//! sample by sample into its own [`GradBuffer`]; shards may run on any thread
//! but are merged in shard order, so results do not depend on the thread pool.

use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kv::KvDoc;
use crate::metrics::MetricsReport;
use crate::model::{Model, ModelConfig, ModelKind};
use crate::nn::{GradBuffer, ParamStore, Tape};
use crate::preprocess::NormalizationParams;
use crate::rng;
use crate::sparse_tensor::{DataSplit, SparseTensor};

/// A cell index with its normalized target.
pub type Sample = ((usize, usize, usize), f64);

/// Samples per gradient shard. Fixed so the summation order is too.
const SHARD: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::Sgd => "sgd",
        })
    }
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(Self::Adam),
            "sgd" => Ok(Self::Sgd),
            _ => Err(Error::Config(format!("optimizer must be adam or sgd, got '{s}'"))),
        }
    }
}

/// How per-sample gradients combine within a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
}

impl std::fmt::Display for Reduction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Reduction::Sum => "sum",
            Reduction::Mean => "mean",
        })
    }
}

impl std::str::FromStr for Reduction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(Self::Sum),
            "mean" => Ok(Self::Mean),
            _ => Err(Error::Config(format!("reduction must be sum or mean, got '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement tolerated before stopping.
    pub patience: usize,
    pub optimizer: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub reduction: Reduction,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 128,
            max_epochs: 100,
            patience: 10,
            optimizer: OptimizerKind::Adam,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            reduction: Reduction::Sum,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("max epochs must be positive".into()));
        }
        if self.patience > self.max_epochs {
            return Err(Error::Config(format!(
                "patience {} exceeds max epochs {}",
                self.patience, self.max_epochs
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::Config(format!("{name} must lie in (0, 1), got {b}")));
            }
        }
        if self.adam_eps.is_nan() || self.adam_eps <= 0.0 {
            return Err(Error::Config(format!("adam eps must be positive, got {}", self.adam_eps)));
        }
        Ok(())
    }

    pub fn to_kv(&self, doc: &mut KvDoc) {
        doc.set("lr", self.learning_rate);
        doc.set("batch_size", self.batch_size);
        doc.set("epochs", self.max_epochs);
        doc.set("patience", self.patience);
        doc.set("optimizer", self.optimizer);
        doc.set("beta1", self.beta1);
        doc.set("beta2", self.beta2);
        doc.set("adam_eps", self.adam_eps);
        doc.set("train_seed", self.seed);
        doc.set("reduction", self.reduction);
    }

    pub fn update_from_kv(&mut self, doc: &KvDoc) -> Result<()> {
        if let Some(v) = doc.parsed("lr")? {
            self.learning_rate = v;
        }
        if let Some(v) = doc.parsed("batch_size")? {
            self.batch_size = v;
        }
        if let Some(v) = doc.parsed("epochs")? {
            self.max_epochs = v;
        }
        if let Some(v) = doc.parsed("patience")? {
            self.patience = v;
        }
        if let Some(v) = doc.get("optimizer") {
            self.optimizer = v.parse()?;
        }
        if let Some(v) = doc.parsed("beta1")? {
            self.beta1 = v;
        }
        if let Some(v) = doc.parsed("beta2")? {
            self.beta2 = v;
        }
        if let Some(v) = doc.parsed("adam_eps")? {
            self.adam_eps = v;
        }
        if let Some(v) = doc.parsed("train_seed")? {
            self.seed = v;
        }
        if let Some(v) = doc.get("reduction") {
            self.reduction = v.parse()?;
        }
        Ok(())
    }
}

/// Global step counter; the per-parameter moments live in each [`crate::nn::Parameter`].
#[derive(Debug, Clone, Default)]
pub struct OptimizerState {
    pub step: u64,
}

/// One bias-corrected Adam update of every parameter, then zeroes gradients.
pub fn adam_step(store: &mut ParamStore, state: &mut OptimizerState, lr: f64, (beta1, beta2): (f64, f64), eps: f64) {
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for p in store.iter_mut() {
        let value = p.value.data_mut();
        let grad = p.grad.data_mut();
        let m = p.first_moment.data_mut();
        let v = p.second_moment.data_mut();
        for n in 0..value.len() {
            let g = grad[n];
            m[n] = beta1 * m[n] + (1.0 - beta1) * g;
            v[n] = beta2 * v[n] + (1.0 - beta2) * g * g;
            let m_hat = m[n] / c1;
            let v_hat = v[n] / c2;
            value[n] -= lr * m_hat / (v_hat.sqrt() + eps);
            grad[n] = 0.0;
        }
    }
}

/// Plain gradient descent, then zeroes gradients.
pub fn sgd_step(store: &mut ParamStore, state: &mut OptimizerState, lr: f64) {
    state.step += 1;
    for p in store.iter_mut() {
        let grad = p.grad.data_mut();
        for (w, g) in p.value.data_mut().iter_mut().zip(grad.iter_mut()) {
            *w -= lr * *g;
            *g = 0.0;
        }
    }
}

/// `½ Σ (y − ŷ)²` over a batch of `(cell, normalized target)` pairs, dropout off.
pub fn loss(model: &Model, batch: &[Sample]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Usage("loss of an empty batch".into()));
    }
    let mut rng = rng::chacha(0, &[]);
    let mut total = 0.0;
    for &(idx, target) in batch {
        let mut tape = Tape::new();
        let y = model.forward(&mut tape, idx, false, &mut rng)?;
        let l = tape.half_squared_error(y, target)?;
        total += tape.value(l).data()[0];
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Sum of per-sample half squared errors seen during the epoch.
    pub loss: f64,
    pub valid: MetricsReport,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainTrace {
    pub records: Vec<EpochRecord>,
    pub best_epoch: usize,
}

impl TrainTrace {
    pub const CSV_HEADER: &'static str = "epoch,loss,val_mae,val_mre,val_rmse";

    /// Per-epoch losses and validation metrics. Contains no timing, so two
    /// runs with the same seeds produce identical files.
    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.epoch, r.loss, r.valid.mae, r.valid.mre, r.valid.rmse
            ));
        }
        out
    }

    /// Wall-clock seconds per epoch.
    pub fn timing_csv(&self) -> String {
        let mut out = String::from("epoch,seconds\n");
        for r in &self.records {
            out.push_str(&format!("{},{:.6}\n", r.epoch, r.seconds));
        }
        out
    }

    pub fn best(&self) -> Option<&EpochRecord> {
        self.records.iter().find(|r| r.epoch == self.best_epoch)
    }
}

fn normalized_targets(entries: &SparseTensor, norm: &NormalizationParams) -> Result<Vec<Sample>> {
    entries
        .entries()
        .iter()
        .map(|e| Ok(((e.i, e.j, e.k), norm.transform(e.value)?)))
        .collect()
}

/// Accumulates gradients for one batch into `model.store`; returns the batch loss.
fn batch_gradients(
    model: &Model,
    batch: &[Sample],
    seed: f64,
    rng_key: (u64, u64, u64),
) -> Result<(GradBuffer, f64)> {
    let shards: Vec<Result<(GradBuffer, f64)>> = batch
        .par_chunks(SHARD)
        .enumerate()
        .map(|(s, shard)| {
            let mut sink = model.store.grad_buffer();
            let mut total = 0.0;
            for (n, &(idx, target)) in shard.iter().enumerate() {
                let mut rng = rng::chacha(rng_key.0, &[rng_key.1, rng_key.2, (s * SHARD + n) as u64]);
                let mut tape = Tape::new();
                let y = model.forward(&mut tape, idx, true, &mut rng)?;
                let l = tape.half_squared_error(y, target)?;
                total += tape.value(l).data()[0];
                tape.backward_into(l, &model.store, &mut sink, seed)?;
            }
            Ok((sink, total))
        })
        .collect();
    let mut shards = shards.into_iter();
    let (mut acc, mut total) = shards.next().expect("batch is non-empty")?;
    for shard in shards {
        let (g, l) = shard?;
        acc.merge(&g);
        total += l;
    }
    Ok((acc, total))
}

/// Trains a freshly initialized model and returns the parameters with the
/// lowest validation RMSE together with the per-epoch trace.
///
/// When the validation split is empty, model selection falls back to the
/// training entries.
pub fn fit(
    kind: ModelKind,
    data: &DataSplit,
    norm: &NormalizationParams,
    model_config: ModelConfig,
    config: &TrainConfig,
) -> Result<(Model, TrainTrace)> {
    let model = Model::init(kind, model_config, data.train.shape())?;
    train(model, data, norm, config)
}

/// Trains an existing model in place; see [`fit`].
pub fn train(
    mut model: Model,
    data: &DataSplit,
    norm: &NormalizationParams,
    config: &TrainConfig,
) -> Result<(Model, TrainTrace)> {
    config.validate()?;
    if data.train.is_empty() {
        return Err(Error::Usage("training split is empty".into()));
    }
    let mut samples = normalized_targets(&data.train, norm)?;
    let selection = if data.valid.is_empty() { &data.train } else { &data.valid };

    let mut state = OptimizerState::default();
    let mut trace = TrainTrace::default();
    let mut best: Option<(f64, Vec<crate::nn::DenseTensor>)> = None;
    let mut since_best = 0usize;
    model.store.zero_grad();

    for epoch in 1..=config.max_epochs {
        let started = Instant::now();
        samples.shuffle(&mut rng::chacha(config.seed, &[0xE90C, epoch as u64]));
        let mut epoch_loss = 0.0;
        for (b, batch) in samples.chunks(config.batch_size).enumerate() {
            let seed = match config.reduction {
                Reduction::Sum => 1.0,
                Reduction::Mean => 1.0 / batch.len() as f64,
            };
            let (grads, batch_loss) = batch_gradients(&model, batch, seed, (config.seed, epoch as u64, b as u64))?;
            if !batch_loss.is_finite() {
                return Err(Error::Training {
                    epoch,
                    message: format!("non-finite loss in batch {b}"),
                });
            }
            epoch_loss += batch_loss;
            model.store.accumulate(&grads);
            match config.optimizer {
                OptimizerKind::Adam => adam_step(
                    &mut model.store,
                    &mut state,
                    config.learning_rate,
                    (config.beta1, config.beta2),
                    config.adam_eps,
                ),
                OptimizerKind::Sgd => sgd_step(&mut model.store, &mut state, config.learning_rate),
            }
        }
        if model.store.snapshot().iter().any(|t| !t.is_finite()) {
            return Err(Error::Training {
                epoch,
                message: "parameters became non-finite".into(),
            });
        }
        let valid = evaluate(&model, selection, norm)?;
        trace.records.push(EpochRecord {
            epoch,
            loss: epoch_loss,
            valid,
            seconds: started.elapsed().as_secs_f64(),
        });
        if best.as_ref().is_none_or(|(rmse, _)| valid.rmse < *rmse) {
            best = Some((valid.rmse, model.store.snapshot()));
            trace.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
        }
        if since_best >= config.patience {
            break;
        }
    }
    if let Some((_, values)) = best {
        model.store.restore(&values);
    }
    Ok((model, trace))
}

/// Original-scale metrics of the model on `entries`, dropout off.
pub fn evaluate(model: &Model, entries: &SparseTensor, norm: &NormalizationParams) -> Result<MetricsReport> {
    if entries.is_empty() {
        return Err(Error::Usage("cannot evaluate on an empty entry set".into()));
    }
    let pairs: Vec<(f64, f64)> = entries
        .entries()
        .par_iter()
        .map(|e| {
            let u = model.predict(e.i, e.j, e.k)?;
            Ok((e.value, norm.inverse_transform(u)?))
        })
        .collect::<Result<_>>()?;
    MetricsReport::compute(&pairs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::DenseTensor;
    use crate::sparse_tensor::{split, Entry, SplitRatios, TensorShape};

    fn scalar_store(x: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("x", DenseTensor::scalar(x));
        s
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut store = scalar_store(0.7);
        let mut state = OptimizerState::default();
        for _ in 0..5 {
            adam_step(&mut store, &mut state, 0.1, (0.9, 0.999), 1e-8);
        }
        assert_eq!(store.snapshot()[0].data(), &[0.7]);
        assert_eq!(state.step, 5);
    }

    #[test]
    fn first_step_moves_against_gradient() {
        for g in [3.0, -0.02] {
            let mut store = scalar_store(1.0);
            let id = store.ids().next().unwrap();
            store.get_mut(id).grad.data_mut()[0] = g;
            adam_step(&mut store, &mut OptimizerState::default(), 0.1, (0.9, 0.999), 1e-8);
            let x = store.value(id).data()[0];
            // m̂ / sqrt(v̂) = g / |g| on the first step.
            assert!((x - (1.0 - 0.1 * g.signum())).abs() < 1e-6, "{x}");
            assert_eq!(store.grad(id).data()[0], 0.0);
        }
    }

    #[test]
    fn adam_on_quadratic_matches_scalar_recurrence() {
        let mut store = scalar_store(1.0);
        let id = store.ids().next().unwrap();
        let mut state = OptimizerState::default();
        // Reference recurrence written out independently.
        let (mut x, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for t in 1..=200 {
            let g = 2.0 * x;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            x -= 0.1 * mh / (vh.sqrt() + 1e-8);

            let cur = store.value(id).data()[0];
            store.get_mut(id).grad.data_mut()[0] = 2.0 * cur;
            adam_step(&mut store, &mut state, 0.1, (0.9, 0.999), 1e-8);
        }
        assert!((store.value(id).data()[0] - x).abs() < 1e-12);
        assert!(x.abs() < 0.05, "{x}");
    }

    #[test]
    fn moments_decay_geometrically() {
        let mut store = scalar_store(0.0);
        let id = store.ids().next().unwrap();
        let mut state = OptimizerState::default();
        store.get_mut(id).grad.data_mut()[0] = 2.0;
        adam_step(&mut store, &mut state, 0.01, (0.9, 0.999), 1e-8);
        let m0 = store.get(id).first_moment.data()[0];
        for _ in 0..7 {
            adam_step(&mut store, &mut state, 0.01, (0.9, 0.999), 1e-8);
        }
        let m7 = store.get(id).first_moment.data()[0];
        assert!((m7 - 0.9f64.powi(7) * m0).abs() < 1e-15);
    }

    #[test]
    fn sgd_update() {
        let mut store = scalar_store(1.0);
        let id = store.ids().next().unwrap();
        store.get_mut(id).grad.data_mut()[0] = 0.5;
        sgd_step(&mut store, &mut OptimizerState::default(), 0.2);
        assert!((store.value(id).data()[0] - 0.9).abs() < 1e-15);
        assert_eq!(store.grad(id).data()[0], 0.0);
    }

    fn tiny_model() -> Model {
        let cfg = ModelConfig {
            rank: [2, 2, 2],
            heads: 2,
            loops: 1,
            dropout_rate: 0.0,
            ..ModelConfig::default()
        };
        Model::init(ModelKind::Msntucf, cfg, TensorShape::new(3, 3, 3).unwrap()).unwrap()
    }

    #[test]
    fn loss_examples() {
        let mut model = tiny_model();
        let crate::model::Layout::Msntucf(p) = model.layout.clone() else { unreachable!() };
        model.store.value_mut(p.w_out).fill(0.0);
        assert_eq!(loss(&model, &[((0, 1, 2), 1.0)]).unwrap(), 0.125);
        assert_eq!(loss(&model, &[((0, 1, 2), 0.5), ((2, 2, 2), 0.5)]).unwrap(), 0.0);
        assert!(matches!(loss(&model, &[]), Err(Error::Usage(_))));
    }

    #[test]
    fn loss_gradient_wrt_prediction() {
        let mut tape = Tape::new();
        let y = tape.leaf(DenseTensor::scalar(0.3));
        let l = tape.half_squared_error(y, 0.8).unwrap();
        let g = tape.backward(l, &mut ParamStore::new()).unwrap();
        let h = 1e-5;
        let fd = (0.5 * (0.8 - (0.3 + h)) * (0.8 - (0.3 + h)) - 0.5 * (0.8 - (0.3 - h)) * (0.8 - (0.3 - h))) / (2.0 * h);
        assert!((g.get(y).unwrap()[0] - (0.3 - 0.8)).abs() < 1e-15);
        assert!((g.get(y).unwrap()[0] - fd).abs() < 1e-9);
    }

    fn toy_split() -> (DataSplit, NormalizationParams) {
        let shape = TensorShape::new(3, 3, 3).unwrap();
        let entries = (0..27)
            .map(|n| Entry::new(n / 9, (n / 3) % 3, n % 3, 0.5 + ((n * 7) % 11) as f64 * 0.3))
            .collect();
        let t = SparseTensor::new(shape, entries).unwrap();
        let s = split(&t, SplitRatios::new(0.6, 0.2, 0.2).unwrap(), 1);
        let norm = NormalizationParams::fit(&s, true).unwrap();
        (s, norm)
    }

    #[test]
    fn patience_zero_runs_one_epoch() {
        let (s, norm) = toy_split();
        let cfg = TrainConfig { patience: 0, max_epochs: 10, ..TrainConfig::default() };
        let (_, trace) = train(tiny_model(), &s, &norm, &cfg).unwrap();
        assert_eq!(trace.records.len(), 1);
        assert_eq!(trace.best_epoch, 1);
    }

    #[test]
    fn best_checkpoint_is_returned() {
        let (s, norm) = toy_split();
        let cfg = TrainConfig { patience: 5, max_epochs: 30, learning_rate: 0.05, ..TrainConfig::default() };
        let (model, trace) = train(tiny_model(), &s, &norm, &cfg).unwrap();
        let best = trace.best().unwrap();
        let min = trace.records.iter().map(|r| r.valid.rmse).fold(f64::INFINITY, f64::min);
        assert_eq!(best.valid.rmse, min);
        assert_eq!(evaluate(&model, &s.valid, &norm).unwrap(), best.valid);
    }

    #[test]
    fn identical_seeds_identical_traces() {
        let (s, norm) = toy_split();
        let cfg = TrainConfig { max_epochs: 5, patience: 5, ..TrainConfig::default() };
        let mut m = tiny_model();
        m.config.dropout_rate = 0.3;
        let (a, ta) = train(m.clone(), &s, &norm, &cfg).unwrap();
        let (b, tb) = train(m, &s, &norm, &cfg).unwrap();
        assert_eq!(ta.to_csv(), tb.to_csv());
        assert_eq!(a.store.snapshot(), b.store.snapshot());
    }

    #[test]
    fn sharded_gradient_equals_serial_sum() {
        let (s, norm) = toy_split();
        let model = tiny_model();
        let batch = normalized_targets(&s.train, &norm).unwrap();
        let many: Vec<_> = batch.iter().cycle().take(80).copied().collect();
        let (g, total) = batch_gradients(&model, &many, 1.0, (0, 0, 0)).unwrap();
        let mut serial = model.store.clone();
        serial.zero_grad();
        let mut loss_sum = 0.0;
        for &(idx, target) in &many {
            let mut tape = Tape::new();
            let mut rng = rng::chacha(0, &[]);
            let y = model.forward(&mut tape, idx, false, &mut rng).unwrap();
            let l = tape.half_squared_error(y, target).unwrap();
            loss_sum += tape.value(l).data()[0];
            tape.backward(l, &mut serial).unwrap();
        }
        assert!((total - loss_sum).abs() < 1e-12);
        for id in model.store.ids() {
            for (a, b) in g.get(id).data().iter().zip(serial.grad(id).data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn evaluation_metrics() {
        let (s, norm) = toy_split();
        assert!(matches!(
            evaluate(&tiny_model(), &SparseTensor::empty(s.train.shape()), &norm),
            Err(Error::Usage(_))
        ));
        assert!(TrainConfig { patience: 200, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { beta1: 1.0, ..TrainConfig::default() }.validate().is_err());
    }
}
