//! MSNTucF and the NeuTucF baseline.
//!
//! Both models embed `(i, j, k)` into `a_i ∈ R^P`, `b_j ∈ R^Q`, `c_k ∈ R^R`
//! and form the interaction tensor `a_i ∘ b_j ∘ c_k`. NeuTucF contracts it
//! with a core tensor; MSNTucF flattens it to a length-`PQR` vector, runs it
//! through `N` self-attending blocks and maps the result through a sigmoid
//! head.
//!
//! Inside a block each head `l` projects the input to `q, k, v ∈ R^{d_k}`,
//! scores `softmax(q kᵀ / √d_k)` and returns `scores · v`. Head outputs are
//! concatenated, fused by a biased linear map, added back to the input and
//! layer-normalized.

use std::fmt;
use std::io::Write;
use std::ops::Range;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::kv::KvDoc;
use crate::nn::{DenseTensor, ParamId, ParamStore, SoftmaxAxis, Tape, Var};
use crate::preprocess::NormalizationParams;
use crate::rng;
use crate::sparse_tensor::{parse_usize_list, TensorShape};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Msntucf,
    Neutucf,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Msntucf => "msntucf",
            ModelKind::Neutucf => "neutucf",
        })
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "msntucf" => Ok(ModelKind::Msntucf),
            "neutucf" => Ok(ModelKind::Neutucf),
            _ => Err(Error::Config(format!("model must be msntucf or neutucf, got '{s}'"))),
        }
    }
}

/// How each head's projections see the block input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ProjectionMode {
    /// `W^Q_l` etc. map the full `d_model` input to `d_k`.
    #[default]
    Full,
    /// Head `l` only sees its own contiguous `d_k`-long chunk of the input.
    Chunked,
}

impl fmt::Display for ProjectionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ProjectionMode::Full => "full",
            ProjectionMode::Chunked => "chunked",
        })
    }
}

impl std::str::FromStr for ProjectionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Self::Full),
            "chunked" => Ok(Self::Chunked),
            _ => Err(Error::Config(format!("projection must be full or chunked, got '{s}'"))),
        }
    }
}

/// Where attention dropout is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DropoutPlacement {
    /// On the normalized score matrix.
    #[default]
    PostSoftmax,
    /// On the scaled logits.
    PreSoftmax,
}

impl fmt::Display for DropoutPlacement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DropoutPlacement::PostSoftmax => "post",
            DropoutPlacement::PreSoftmax => "pre",
        })
    }
}

impl std::str::FromStr for DropoutPlacement {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "post" => Ok(Self::PostSoftmax),
            "pre" => Ok(Self::PreSoftmax),
            _ => Err(Error::Config(format!("dropout placement must be pre or post, got '{s}'"))),
        }
    }
}

/// Architecture hyperparameters. `d_model = P·Q·R` and `d_k = d_model / heads`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub rank: [usize; 3],
    pub heads: usize,
    pub loops: usize,
    pub dropout_rate: f64,
    pub seed: u64,
    pub softmax_axis: SoftmaxAxis,
    pub dropout_placement: DropoutPlacement,
    pub projection: ProjectionMode,
    pub share_weights: bool,
}

impl Default for ModelConfig {
    /// Rank 5 per mode, 25 heads, 4 loops.
    fn default() -> Self {
        Self {
            rank: [5, 5, 5],
            heads: 25,
            loops: 4,
            dropout_rate: 0.1,
            seed: 0,
            softmax_axis: SoftmaxAxis::Row,
            dropout_placement: DropoutPlacement::PostSoftmax,
            projection: ProjectionMode::Full,
            share_weights: false,
        }
    }
}

impl ModelConfig {
    pub fn d_model(&self) -> usize {
        self.rank.iter().product()
    }

    pub fn d_k(&self) -> usize {
        self.d_model() / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank.contains(&0) {
            return Err(Error::Config(format!("rank must be positive in every mode, got {:?}", self.rank)));
        }
        if self.heads == 0 || !self.d_model().is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "heads must divide d_model = {}; valid head counts: {:?}",
                self.d_model(),
                divisors(self.d_model())
            )));
        }
        if self.loops == 0 {
            return Err(Error::Config("loops must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!("dropout must lie in [0, 1), got {}", self.dropout_rate)));
        }
        Ok(())
    }

    pub fn to_kv(&self, doc: &mut KvDoc) {
        doc.set("rank", format!("{},{},{}", self.rank[0], self.rank[1], self.rank[2]));
        doc.set("heads", self.heads);
        doc.set("loops", self.loops);
        doc.set("dropout", self.dropout_rate);
        doc.set("model_seed", self.seed);
        doc.set("softmax_axis", self.softmax_axis);
        doc.set("dropout_placement", self.dropout_placement);
        doc.set("projection", self.projection);
        doc.set("share_weights", self.share_weights);
    }

    /// Reads whichever keys are present on top of `self`.
    pub fn update_from_kv(&mut self, doc: &KvDoc) -> Result<()> {
        if let Some(r) = doc.get("rank") {
            let dims = parse_usize_list(r)?;
            self.rank = dims
                .try_into()
                .map_err(|_| Error::Config(format!("rank needs three comma-separated sizes, got '{r}'")))?;
        }
        if let Some(v) = doc.parsed("heads")? {
            self.heads = v;
        }
        if let Some(v) = doc.parsed("loops")? {
            self.loops = v;
        }
        if let Some(v) = doc.parsed("dropout")? {
            self.dropout_rate = v;
        }
        if let Some(v) = doc.parsed("model_seed")? {
            self.seed = v;
        }
        if let Some(v) = doc.get("softmax_axis") {
            self.softmax_axis = v.parse()?;
        }
        if let Some(v) = doc.get("dropout_placement") {
            self.dropout_placement = v.parse()?;
        }
        if let Some(v) = doc.get("projection") {
            self.projection = v.parse()?;
        }
        if let Some(v) = doc.parsed("share_weights")? {
            self.share_weights = v;
        }
        Ok(())
    }
}

pub fn divisors(n: usize) -> Vec<usize> {
    (1..=n).filter(|&d| n.is_multiple_of(d)).collect()
}

#[derive(Debug, Clone)]
pub struct HeadParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
}

#[derive(Debug, Clone)]
pub struct BlockParams {
    pub heads: Vec<HeadParams>,
    pub fusion_w: ParamId,
    pub fusion_b: ParamId,
    pub ln_gain: ParamId,
    pub ln_bias: ParamId,
}

#[derive(Debug, Clone)]
pub struct MsntucfParams {
    pub a: ParamId,
    pub b: ParamId,
    pub c: ParamId,
    /// One entry per loop; entries repeat the same ids when weights are shared.
    pub blocks: Vec<BlockParams>,
    pub w_out: ParamId,
}

#[derive(Debug, Clone)]
pub struct NeutucfParams {
    pub a: ParamId,
    pub b: ParamId,
    pub c: ParamId,
    pub core: ParamId,
}

#[derive(Debug, Clone)]
pub enum Layout {
    Msntucf(MsntucfParams),
    Neutucf(NeutucfParams),
}

/// A model instance: hyperparameters, tensor shape and its parameters.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub shape: TensorShape,
    pub store: ParamStore,
    pub layout: Layout,
}

fn glorot(rng: &mut impl Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> DenseTensor {
    let s = glorot_scale(fan_in, fan_out);
    let n = shape.iter().product();
    DenseTensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-s..s)).collect())
        .expect("shape and data length agree")
}

/// Half-width `sqrt(6 / (fan_in + fan_out))` of the uniform initializer.
pub fn glorot_scale(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

fn embeddings(store: &mut ParamStore, rng: &mut impl Rng, shape: TensorShape, rank: [usize; 3]) -> [ParamId; 3] {
    let dims = [shape.users, shape.services, shape.time_slices];
    let names = ["A", "B", "C"];
    std::array::from_fn(|m| store.add(names[m], glorot(rng, &[dims[m], rank[m]], dims[m], rank[m])))
}

impl Model {
    /// Random initialization, deterministic in `config.seed`.
    pub fn init(kind: ModelKind, config: ModelConfig, shape: TensorShape) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::chacha(config.seed, &[0x1417]);
        let mut store = ParamStore::new();
        let [a, b, c] = embeddings(&mut store, &mut rng, shape, config.rank);
        let layout = match kind {
            ModelKind::Neutucf => {
                let [p, q, r] = config.rank;
                let core = store.add("G", glorot(&mut rng, &[p, q, r], p * q * r, 1));
                Layout::Neutucf(NeutucfParams { a, b, c, core })
            }
            ModelKind::Msntucf => {
                let d_model = config.d_model();
                let d_k = config.d_k();
                let proj_in = match config.projection {
                    ProjectionMode::Full => d_model,
                    ProjectionMode::Chunked => d_k,
                };
                let n_distinct = if config.share_weights { 1 } else { config.loops };
                let mut distinct = Vec::with_capacity(n_distinct);
                for n in 0..n_distinct {
                    let heads = (0..config.heads)
                        .map(|l| {
                            let mut proj = |which: &str| {
                                store.add(
                                    format!("block{n}.head{l}.{which}"),
                                    glorot(&mut rng, &[d_k, proj_in], proj_in, d_k),
                                )
                            };
                            HeadParams {
                                wq: proj("wq"),
                                wk: proj("wk"),
                                wv: proj("wv"),
                            }
                        })
                        .collect();
                    let fusion_w = store.add(
                        format!("block{n}.fusion_w"),
                        glorot(&mut rng, &[d_model, d_model], d_model, d_model),
                    );
                    let fusion_b = store.add(format!("block{n}.fusion_b"), DenseTensor::zeros(&[d_model]));
                    let ln_gain = store.add(format!("block{n}.ln_gain"), DenseTensor::filled(&[d_model], 1.0));
                    let ln_bias = store.add(format!("block{n}.ln_bias"), DenseTensor::zeros(&[d_model]));
                    distinct.push(BlockParams {
                        heads,
                        fusion_w,
                        fusion_b,
                        ln_gain,
                        ln_bias,
                    });
                }
                let blocks = (0..config.loops).map(|n| distinct[n % n_distinct].clone()).collect();
                let w_out = store.add("w_out", glorot(&mut rng, &[1, d_model], d_model, 1));
                Layout::Msntucf(MsntucfParams { a, b, c, blocks, w_out })
            }
        };
        Ok(Self {
            config,
            shape,
            store,
            layout,
        })
    }

    pub fn kind(&self) -> ModelKind {
        match self.layout {
            Layout::Msntucf(_) => ModelKind::Msntucf,
            Layout::Neutucf(_) => ModelKind::Neutucf,
        }
    }

    /// Records the prediction for cell `(i, j, k)` on `tape`; output in (0, 1).
    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        (i, j, k): (usize, usize, usize),
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        match &self.layout {
            Layout::Msntucf(p) => msntucf_forward(p, &self.store, &self.config, tape, (i, j, k), training, rng),
            Layout::Neutucf(p) => neutucf_forward(p, &self.store, tape, (i, j, k)),
        }
    }

    /// Evaluation-mode prediction.
    pub fn predict(&self, i: usize, j: usize, k: usize) -> Result<f64> {
        let mut tape = Tape::new();
        // Evaluation mode never draws from the generator.
        let mut rng = rng::chacha(0, &[]);
        let y = self.forward(&mut tape, (i, j, k), false, &mut rng)?;
        Ok(tape.value(y).data()[0])
    }
}

fn interaction(
    store: &ParamStore,
    tape: &mut Tape,
    [a, b, c]: [ParamId; 3],
    (i, j, k): (usize, usize, usize),
) -> Result<Var> {
    let ai = tape.embedding(store, a, i)?;
    let bj = tape.embedding(store, b, j)?;
    let ck = tape.embedding(store, c, k)?;
    tape.outer3(ai, bj, ck)
}

/// `σ(W_out · e⁽ᴺ⁾)` with `e⁽⁰⁾ = flatten(a_i ∘ b_j ∘ c_k)`.
pub fn msntucf_forward<R: Rng + ?Sized>(
    params: &MsntucfParams,
    store: &ParamStore,
    config: &ModelConfig,
    tape: &mut Tape,
    idx: (usize, usize, usize),
    training: bool,
    rng: &mut R,
) -> Result<Var> {
    let t = interaction(store, tape, [params.a, params.b, params.c], idx)?;
    let mut e = tape.flatten(t)?;
    for block in &params.blocks {
        e = attention_block(tape, store, e, block, config, training, rng)?.output;
    }
    let logit = tape.linear_nobias(store, params.w_out, e)?;
    Ok(tape.sigmoid(logit))
}

/// Output of one self-attending block, plus the per-head score matrices.
#[derive(Debug, Clone)]
pub struct BlockOutput {
    pub output: Var,
    pub scores: Vec<Var>,
    pub head_outputs: Vec<Var>,
}

pub fn attention_block<R: Rng + ?Sized>(
    tape: &mut Tape,
    store: &ParamStore,
    e_prev: Var,
    block: &BlockParams,
    config: &ModelConfig,
    training: bool,
    rng: &mut R,
) -> Result<BlockOutput> {
    let d_model = config.d_model();
    let d_k = config.d_k();
    if tape.value(e_prev).shape() != [d_model] {
        return Err(Error::Shape(format!(
            "attention block expects a length-{d_model} input, got {:?}",
            tape.value(e_prev).shape()
        )));
    }
    let inv_sqrt_dk = 1.0 / (d_k as f64).sqrt();
    let mut scores = Vec::with_capacity(block.heads.len());
    let mut head_outputs = Vec::with_capacity(block.heads.len());
    for (l, head) in block.heads.iter().enumerate() {
        let input = match config.projection {
            ProjectionMode::Full => e_prev,
            ProjectionMode::Chunked => tape.slice(e_prev, l * d_k, d_k)?,
        };
        let q = tape.linear_nobias(store, head.wq, input)?;
        let k = tape.linear_nobias(store, head.wk, input)?;
        let v = tape.linear_nobias(store, head.wv, input)?;
        let qk = tape.outer2(q, k)?;
        let logits = tape.scale(qk, inv_sqrt_dk);
        let s = match config.dropout_placement {
            DropoutPlacement::PostSoftmax => {
                let s = tape.softmax(logits, config.softmax_axis)?;
                tape.dropout(s, config.dropout_rate, training, rng)?
            }
            DropoutPlacement::PreSoftmax => {
                let dropped = tape.dropout(logits, config.dropout_rate, training, rng)?;
                tape.softmax(dropped, config.softmax_axis)?
            }
        };
        head_outputs.push(tape.matvec(s, v)?);
        scores.push(s);
    }
    let cat = tape.concat(&head_outputs)?;
    let r = tape.linear(store, block.fusion_w, Some(block.fusion_b), cat)?;
    let residual = tape.add(e_prev, r)?;
    let output = tape.layer_norm(store, residual, block.ln_gain, block.ln_bias, LAYER_NORM_EPS)?;
    Ok(BlockOutput {
        output,
        scores,
        head_outputs,
    })
}

/// `σ(Σ_{pqr} g_pqr a_ip b_jq c_kr)`.
pub fn neutucf_forward(
    params: &NeutucfParams,
    store: &ParamStore,
    tape: &mut Tape,
    idx: (usize, usize, usize),
) -> Result<Var> {
    let t = interaction(store, tape, [params.a, params.b, params.c], idx)?;
    let pre = tape.inner(store, params.core, t)?;
    Ok(tape.sigmoid(pre))
}

/// What part of the interaction tensor a head's chunk of `t` corresponds to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadRegion {
    /// The whole tensor.
    Whole,
    /// Mode-1 slice `T[p, :, :]`.
    Slice { p: usize },
    /// Mode-3 fiber `T[p, q, :]`.
    Fiber { p: usize, q: usize },
    /// A run of positions that is neither a full slice nor a fiber.
    Span,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeadSpan {
    pub head: usize,
    pub positions: Range<usize>,
    pub region: HeadRegion,
}

/// Maps each head to its contiguous chunk of the row-major flattened
/// interaction vector and names the tensor region that chunk covers.
pub fn head_partition_map(config: &ModelConfig) -> Result<Vec<HeadSpan>> {
    config.validate()?;
    let [_, q, r] = config.rank;
    let d_k = config.d_k();
    Ok((0..config.heads)
        .map(|l| {
            let region = if config.heads == 1 {
                HeadRegion::Whole
            } else if d_k == q * r {
                HeadRegion::Slice { p: l }
            } else if d_k == r {
                HeadRegion::Fiber { p: l / q, q: l % q }
            } else {
                HeadRegion::Span
            };
            HeadSpan {
                head: l,
                positions: l * d_k..(l + 1) * d_k,
                region,
            }
        })
        .collect())
}

const CHECKPOINT_MAGIC: &str = "# msntucf checkpoint v1";

/// Writes model hyperparameters, normalization and every parameter array.
///
/// Floats are written in Rust's shortest round-trip form, so a reload
/// reproduces predictions bit for bit.
pub fn save_checkpoint(path: impl AsRef<Path>, model: &Model, norm: &NormalizationParams) -> Result<()> {
    let path = path.as_ref();
    let mut header = KvDoc::new();
    header.set("model", model.kind());
    header.set("shape", model.shape);
    model.config.to_kv(&mut header);
    header.set("norm.log_applied", norm.log_applied);
    header.set("norm.z_min", norm.z_min);
    header.set("norm.z_max", norm.z_max);

    let io = |e| Error::io(path, e);
    let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    writeln!(out, "{CHECKPOINT_MAGIC}").map_err(io)?;
    out.write_all(header.render().as_bytes()).map_err(io)?;
    for id in model.store.ids() {
        let value = model.store.value(id);
        let dims: Vec<String> = value.shape().iter().map(usize::to_string).collect();
        writeln!(out, "@param {} {}", model.store.name(id), dims.join(" ")).map_err(io)?;
        let vals: Vec<String> = value.data().iter().map(f64::to_string).collect();
        writeln!(out, "{}", vals.join(" ")).map_err(io)?;
    }
    out.flush().map_err(io)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(Model, NormalizationParams)> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_checkpoint(&text)
}

fn parse_checkpoint(text: &str) -> Result<(Model, NormalizationParams)> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, l)) if l.trim() == CHECKPOINT_MAGIC => {}
        _ => {
            return Err(Error::Parse {
                line: 1,
                message: "not a checkpoint file".into(),
            })
        }
    }
    let mut header_text = String::new();
    let mut arrays: Vec<(usize, &str, &str)> = Vec::new();
    while let Some((n, line)) = lines.next() {
        if let Some(decl) = line.strip_prefix("@param ") {
            let (_, data) = lines.next().ok_or_else(|| Error::Parse {
                line: n + 2,
                message: "parameter declaration without data".into(),
            })?;
            arrays.push((n + 1, decl, data));
        } else {
            header_text.push_str(line);
            header_text.push('\n');
        }
    }
    let header = KvDoc::parse(&header_text)?;
    let kind: ModelKind = header.require("model")?.parse()?;
    let shape: TensorShape = header.require("shape")?.parse()?;
    let mut config = ModelConfig::default();
    config.update_from_kv(&header)?;
    let norm = NormalizationParams {
        log_applied: header.parsed("norm.log_applied")?.unwrap_or(true),
        z_min: header.parsed("norm.z_min")?.ok_or_else(|| Error::Config("missing norm.z_min".into()))?,
        z_max: header.parsed("norm.z_max")?.ok_or_else(|| Error::Config("missing norm.z_max".into()))?,
    };

    let mut model = Model::init(kind, config, shape)?;
    let mut seen = vec![false; model.store.len()];
    for (line, decl, data) in arrays {
        let mut parts = decl.split_whitespace();
        let name = parts.next().unwrap_or_default();
        let dims: Vec<usize> = parts
            .map(|d| d.parse().map_err(|_| Error::Parse { line, message: format!("bad dimension '{d}'") }))
            .collect::<Result<_>>()?;
        let id = model
            .store
            .find(name)
            .ok_or_else(|| Error::Validation(format!("checkpoint parameter '{name}' does not belong to this model")))?;
        if model.store.value(id).shape() != dims.as_slice() {
            return Err(Error::Validation(format!(
                "parameter '{name}' has shape {dims:?}, model expects {:?}",
                model.store.value(id).shape()
            )));
        }
        let values: Vec<f64> = data
            .split_whitespace()
            .map(|v| v.parse().map_err(|_| Error::Parse { line: line + 1, message: format!("bad value '{v}'") }))
            .collect::<Result<_>>()?;
        *model.store.value_mut(id) = DenseTensor::new(dims, values)?;
        seen[id.index()] = true;
    }
    if let Some(missing) = model.store.ids().find(|id| !seen[id.index()]) {
        return Err(Error::Validation(format!(
            "checkpoint lacks parameter '{}'",
            model.store.name(missing)
        )));
    }
    Ok((model, norm))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::sigmoid;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> ModelConfig {
        ModelConfig {
            rank: [2, 2, 2],
            heads: 2,
            loops: 1,
            dropout_rate: 0.0,
            seed: 3,
            ..ModelConfig::default()
        }
    }

    fn shape4() -> TensorShape {
        TensorShape::new(4, 4, 4).unwrap()
    }

    fn rows(store: &ParamStore, id: ParamId, row: usize) -> Vec<f64> {
        let t = store.value(id);
        let d = t.shape()[1];
        t.data()[row * d..(row + 1) * d].to_vec()
    }

    #[test]
    fn config_validation() {
        assert_eq!(ModelConfig::default().d_model(), 125);
        assert_eq!(ModelConfig::default().d_k(), 5);
        assert!(ModelConfig::default().validate().is_ok());
        let bad = ModelConfig {
            heads: 7,
            ..ModelConfig::default()
        };
        match bad.validate() {
            Err(Error::Config(m)) => assert!(m.contains("[1, 5, 25, 125]"), "{m}"),
            other => panic!("{other:?}"),
        }
        let bad = ModelConfig {
            loops: 0,
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn zero_output_weights_give_half() {
        let mut m = Model::init(ModelKind::Msntucf, tiny(), shape4()).unwrap();
        let Layout::Msntucf(p) = &m.layout else { unreachable!() };
        let w_out = p.w_out;
        m.store.value_mut(w_out).fill(0.0);
        assert_eq!(m.predict(1, 2, 3).unwrap(), 0.5);
    }

    #[test]
    fn output_in_open_unit_interval() {
        for seed in 0..1000 {
            let cfg = ModelConfig { seed, ..tiny() };
            let m = Model::init(ModelKind::Msntucf, cfg, shape4()).unwrap();
            let y = m.predict((seed % 4) as usize, 1, 2).unwrap();
            assert!(y > 0.0 && y < 1.0);
        }
    }

    #[test]
    fn index_out_of_range() {
        let m = Model::init(ModelKind::Msntucf, tiny(), shape4()).unwrap();
        assert!(matches!(m.predict(4, 0, 0), Err(Error::Lookup { index: 4, rows: 4 })));
        let m = Model::init(ModelKind::Neutucf, tiny(), shape4()).unwrap();
        assert!(matches!(m.predict(0, 0, 9), Err(Error::Lookup { index: 9, rows: 4 })));
    }

    #[test]
    fn zero_values_isolate_the_residual() {
        let cfg = ModelConfig { rank: [2, 3, 2], heads: 3, ..tiny() };
        let mut m = Model::init(ModelKind::Msntucf, cfg.clone(), shape4()).unwrap();
        let Layout::Msntucf(p) = m.layout.clone() else { unreachable!() };
        for h in &p.blocks[0].heads {
            m.store.value_mut(h.wv).fill(0.0);
        }
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let e = tape.leaf(DenseTensor::vector((0..12).map(|x| (x as f64 * 0.37).sin()).collect()));
        let out = attention_block(&mut tape, &m.store, e, &p.blocks[0], &cfg, false, &mut rng).unwrap();
        let direct = tape
            .layer_norm(&m.store, e, p.blocks[0].ln_gain, p.blocks[0].ln_bias, LAYER_NORM_EPS)
            .unwrap();
        assert_eq!(tape.value(out.output), tape.value(direct));
        for s in out.scores {
            for row in tape.value(s).data().chunks(cfg.d_k()) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn uniform_queries_and_keys_average_the_values() {
        let cfg = ModelConfig { rank: [2, 2, 2], heads: 2, ..tiny() };
        let mut m = Model::init(ModelKind::Msntucf, cfg.clone(), shape4()).unwrap();
        let Layout::Msntucf(p) = m.layout.clone() else { unreachable!() };
        // Every row of Wq and Wk equal => q and k have identical elements.
        for h in &p.blocks[0].heads {
            for w in [h.wq, h.wk] {
                let row: Vec<f64> = m.store.value(w).data()[..8].to_vec();
                let t = m.store.value_mut(w);
                for chunk in t.data_mut().chunks_mut(8) {
                    chunk.copy_from_slice(&row);
                }
            }
        }
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let e = tape.leaf(DenseTensor::vector(vec![0.3, -0.1, 0.8, 0.2, -0.5, 0.9, 0.05, -0.7]));
        let out = attention_block(&mut tape, &m.store, e, &p.blocks[0], &cfg, false, &mut rng).unwrap();
        for (h, (s, d)) in p.blocks[0].heads.iter().zip(out.scores.iter().zip(&out.head_outputs)) {
            assert!(tape.value(*s).data().iter().all(|&x| (x - 0.25).abs() < 1e-15));
            let wv = m.store.value(h.wv);
            let v: Vec<f64> = wv
                .data()
                .chunks(8)
                .map(|row| row.iter().zip(tape.value(e).data()).map(|(a, b)| a * b).sum())
                .collect();
            let mean = v.iter().sum::<f64>() / 4.0;
            for &x in tape.value(*d).data() {
                assert!((x - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn head_partition_examples() {
        let base = ModelConfig::default();
        let map = head_partition_map(&base).unwrap();
        assert_eq!(map.len(), 25);
        assert_eq!(map[7].region, HeadRegion::Fiber { p: 1, q: 2 });
        assert_eq!(map[7].positions, 35..40);
        let five = ModelConfig { heads: 5, ..base.clone() };
        let map = head_partition_map(&five).unwrap();
        assert_eq!(map[2].region, HeadRegion::Slice { p: 2 });
        assert_eq!(map[2].positions, 50..75);
        let one = ModelConfig { heads: 1, ..base.clone() };
        let map = head_partition_map(&one).unwrap();
        assert_eq!(map, vec![HeadSpan { head: 0, positions: 0..125, region: HeadRegion::Whole }]);
        let bad = ModelConfig { heads: 7, ..base };
        assert!(head_partition_map(&bad).is_err());
    }

    #[test]
    fn neutucf_matches_summation() {
        let cfg = ModelConfig { rank: [3, 2, 4], ..tiny() };
        let shape = TensorShape::new(5, 6, 7).unwrap();
        let m = Model::init(ModelKind::Neutucf, cfg, shape).unwrap();
        let Layout::Neutucf(p) = &m.layout else { unreachable!() };
        let (a, b, c) = (rows(&m.store, p.a, 4), rows(&m.store, p.b, 1), rows(&m.store, p.c, 6));
        let g = m.store.value(p.core);
        let mut pre = 0.0;
        for (pi, ai) in a.iter().enumerate() {
            for (q, bq) in b.iter().enumerate() {
                for (r, cr) in c.iter().enumerate() {
                    pre += g.at(&[pi, q, r]) * ai * bq * cr;
                }
            }
        }
        assert!((m.predict(4, 1, 6).unwrap() - sigmoid(pre)).abs() <= 1e-12);
    }

    #[test]
    fn neutucf_zero_and_indicator_core() {
        let cfg = ModelConfig { rank: [2, 3, 2], ..tiny() };
        let mut m = Model::init(ModelKind::Neutucf, cfg, shape4()).unwrap();
        let Layout::Neutucf(p) = m.layout.clone() else { unreachable!() };
        m.store.value_mut(p.core).fill(0.0);
        assert_eq!(m.predict(0, 1, 2).unwrap(), 0.5);
        // Indicator at (1, 2, 0): flat index (1*3 + 2)*2 + 0 = 10.
        m.store.value_mut(p.core).data_mut()[10] = 1.0;
        let mut tape = Tape::new();
        let t = interaction(&m.store, &mut tape, [p.a, p.b, p.c], (3, 0, 1)).unwrap();
        let pre = tape.inner(&m.store, p.core, t).unwrap();
        let expect = rows(&m.store, p.a, 3)[1] * rows(&m.store, p.b, 0)[2] * rows(&m.store, p.c, 1)[0];
        assert_eq!(tape.value(pre).data()[0], expect);
    }

    #[test]
    fn init_is_deterministic_and_scaled() {
        let a = Model::init(ModelKind::Msntucf, tiny(), shape4()).unwrap();
        let b = Model::init(ModelKind::Msntucf, tiny(), shape4()).unwrap();
        assert_eq!(a.store.snapshot(), b.store.snapshot());
        let Layout::Msntucf(p) = &a.layout else { unreachable!() };
        assert!(a.store.value(p.blocks[0].ln_gain).data().iter().all(|&g| g == 1.0));
        assert!(a.store.value(p.blocks[0].ln_bias).data().iter().all(|&g| g == 0.0));
        assert!(a.store.value(p.blocks[0].fusion_b).data().iter().all(|&g| g == 0.0));

        // A 1000 x 1 table: fan_in + fan_out = 1001.
        let shape = TensorShape::new(1000, 1, 1).unwrap();
        let cfg = ModelConfig { rank: [1, 1, 1], heads: 1, ..tiny() };
        let m = Model::init(ModelKind::Neutucf, cfg, shape).unwrap();
        let Layout::Neutucf(p) = &m.layout else { unreachable!() };
        let d = m.store.value(p.a).data();
        let mean = d.iter().sum::<f64>() / d.len() as f64;
        let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / d.len() as f64;
        let s = glorot_scale(1000, 1);
        assert!(d.iter().all(|x| x.abs() < s));
        assert!((var - s * s / 3.0).abs() < 0.1 * s * s / 3.0, "{var}");
    }

    #[test]
    fn embedding_locality() {
        let mut m = Model::init(ModelKind::Msntucf, tiny(), shape4()).unwrap();
        let before = m.predict(1, 2, 3).unwrap();
        let Layout::Msntucf(p) = m.layout.clone() else { unreachable!() };
        m.store.value_mut(p.a).data_mut()[0] += 0.5; // row 0
        m.store.value_mut(p.b).data_mut()[6] -= 0.5; // row 3
        assert_eq!(m.predict(1, 2, 3).unwrap().to_bits(), before.to_bits());
        assert_ne!(m.predict(0, 2, 3).unwrap(), before);
    }

    #[test]
    fn blocks_are_a_prefix_when_loops_grow() {
        let one = Model::init(ModelKind::Msntucf, ModelConfig { loops: 1, ..tiny() }, shape4()).unwrap();
        let two = Model::init(ModelKind::Msntucf, ModelConfig { loops: 2, ..tiny() }, shape4()).unwrap();
        let (Layout::Msntucf(p1), Layout::Msntucf(p2)) = (&one.layout, &two.layout) else { unreachable!() };
        assert_eq!(p2.blocks.len(), 2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut t1 = Tape::new();
        let e = t1.leaf(DenseTensor::vector(vec![0.1, 0.4, -0.3, 0.2, 0.9, -0.8, 0.0, 0.5]));
        // Block 0 of the two-loop model reused with the one-loop parameters.
        let mut store = two.store.clone();
        for id in one.store.ids() {
            let name = one.store.name(id);
            if name.starts_with("block0") {
                *store.value_mut(store.find(name).unwrap()) = one.store.value(id).clone();
            }
        }
        let a = attention_block(&mut t1, &one.store, e, &p1.blocks[0], &one.config, false, &mut rng).unwrap();
        let b = attention_block(&mut t1, &store, e, &p2.blocks[0], &two.config, false, &mut rng).unwrap();
        assert_eq!(t1.value(a.output), t1.value(b.output));
    }

    #[test]
    fn shared_and_chunked_variants() {
        let shared = Model::init(
            ModelKind::Msntucf,
            ModelConfig { loops: 3, share_weights: true, ..tiny() },
            shape4(),
        )
        .unwrap();
        let Layout::Msntucf(p) = &shared.layout else { unreachable!() };
        assert_eq!(p.blocks.len(), 3);
        assert_eq!(p.blocks[0].fusion_w, p.blocks[2].fusion_w);
        let chunked = Model::init(
            ModelKind::Msntucf,
            ModelConfig { projection: ProjectionMode::Chunked, ..tiny() },
            shape4(),
        )
        .unwrap();
        let Layout::Msntucf(p) = &chunked.layout else { unreachable!() };
        assert_eq!(chunked.store.value(p.blocks[0].heads[0].wq).shape(), &[4, 4]);
        let y = chunked.predict(0, 1, 2).unwrap();
        assert!(y > 0.0 && y < 1.0);
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.txt");
        let norm = NormalizationParams {
            log_applied: true,
            z_min: 0.1,
            z_max: 2.0 / 3.0,
        };
        for kind in [ModelKind::Msntucf, ModelKind::Neutucf] {
            let m = Model::init(kind, ModelConfig { dropout_rate: 0.2, ..tiny() }, shape4()).unwrap();
            save_checkpoint(&path, &m, &norm).unwrap();
            let (back, norm_back) = load_checkpoint(&path).unwrap();
            assert_eq!(norm_back, norm);
            assert_eq!(back.kind(), kind);
            assert_eq!(back.config, m.config);
            assert_eq!(back.store.snapshot(), m.store.snapshot());
            assert_eq!(back.predict(3, 2, 1).unwrap().to_bits(), m.predict(3, 2, 1).unwrap().to_bits());
        }
    }

    #[test]
    fn checkpoint_shape_mismatch() {
        let m = Model::init(ModelKind::Neutucf, tiny(), shape4()).unwrap();
        let norm = NormalizationParams { log_applied: true, z_min: 0.0, z_max: 1.0 };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.txt");
        save_checkpoint(&path, &m, &norm).unwrap();
        let text = std::fs::read_to_string(&path).unwrap().replace("shape=4,4,4", "shape=5,4,4");
        assert!(matches!(parse_checkpoint(&text), Err(Error::Validation(_))));
        assert!(parse_checkpoint("garbage").is_err());
    }
}
