//! Reverse-mode differentiation over a flat operation record.
//!
//! Every operation appends a node holding its output value and whatever it
//! needs for the vector-Jacobian product. Node inputs always precede the node,
//! so [`Tape::backward`] is a single reverse sweep. Parameters are referenced
//! by [`ParamId`] and read from the [`ParamStore`] during both passes; their
//! gradients are accumulated into the store (or a detached [`GradBuffer`]).

use rand::Rng;

use super::param::{GradBuffer, ParamId, ParamStore};
use super::tensor::DenseTensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Normalization axis for attention scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SoftmaxAxis {
    /// Normalize each row (over the key index).
    #[default]
    Row,
    /// Normalize each column (over the query index).
    Column,
    /// Normalize the whole matrix.
    Global,
}

impl std::str::FromStr for SoftmaxAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "row" => Ok(Self::Row),
            "column" => Ok(Self::Column),
            "global" => Ok(Self::Global),
            _ => Err(Error::Config(format!("softmax axis must be row, column or global, got '{s}'"))),
        }
    }
}

impl std::fmt::Display for SoftmaxAxis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Row => "row",
            Self::Column => "column",
            Self::Global => "global",
        })
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Embedding { table: ParamId, row: usize },
    Linear { w: ParamId, bias: Option<ParamId>, x: Var },
    Inner { w: ParamId, x: Var },
    Outer3 { a: Var, b: Var, c: Var },
    Outer2 { a: Var, b: Var },
    Reshape { x: Var },
    Scale { x: Var, factor: f64 },
    Softmax { x: Var, axis: SoftmaxAxis },
    Dropout { x: Var, mask: Vec<f64> },
    MatVec { m: Var, v: Var },
    Concat { parts: Vec<Var> },
    Slice { x: Var, start: usize },
    Add { a: Var, b: Var },
    LayerNorm { x: Var, gain: ParamId, bias: ParamId, xhat: Vec<f64>, inv_std: f64 },
    Sigmoid { x: Var },
    Sum { x: Var },
    HalfSquaredError { pred: Var, target: f64 },
}

#[derive(Debug)]
struct Node {
    value: DenseTensor,
    op: Op,
}

/// Operation record for one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints of every recorded value after a backward sweep.
#[derive(Debug)]
pub struct Gradients {
    adjoints: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, or `None` if the loss does
    /// not depend on it.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.adjoints[v.0].as_deref()
    }
}

fn one_dim(t: &DenseTensor, what: &str) -> Result<usize> {
    if t.ndim() != 1 {
        return Err(Error::Shape(format!("{what} expects a 1-d input, got shape {:?}", t.shape())));
    }
    Ok(t.numel())
}

fn matrix(t: &DenseTensor, what: &str) -> Result<(usize, usize)> {
    match *t.shape() {
        [r, c] => Ok((r, c)),
        _ => Err(Error::Shape(format!("{what} expects a 2-d input, got shape {:?}", t.shape()))),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &DenseTensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: DenseTensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Records an input whose gradient can be queried after backward.
    pub fn leaf(&mut self, value: DenseTensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Row `index` of an `(M, D)` table.
    pub fn embedding(&mut self, store: &ParamStore, table: ParamId, index: usize) -> Result<Var> {
        let t = store.value(table);
        let (rows, dim) = matrix(t, "embedding")?;
        if index >= rows {
            return Err(Error::Lookup { index, rows });
        }
        let row = t.data()[index * dim..(index + 1) * dim].to_vec();
        Ok(self.push(DenseTensor::vector(row), Op::Embedding { table, row: index }))
    }

    /// `W x` without bias.
    pub fn linear_nobias(&mut self, store: &ParamStore, w: ParamId, x: Var) -> Result<Var> {
        self.linear(store, w, None, x)
    }

    /// `W x + b` for `W` of shape `(out, in)`.
    pub fn linear(&mut self, store: &ParamStore, w: ParamId, bias: Option<ParamId>, x: Var) -> Result<Var> {
        let wt = store.value(w);
        let (out, inp) = matrix(wt, "linear")?;
        let xv = self.value(x);
        if one_dim(xv, "linear")? != inp {
            return Err(Error::Shape(format!(
                "linear weight {:?} cannot map input of length {}",
                wt.shape(),
                xv.numel()
            )));
        }
        let xd = xv.data();
        let mut y: Vec<f64> = wt
            .data()
            .chunks_exact(inp)
            .map(|row| row.iter().zip(xd).map(|(a, b)| a * b).sum())
            .collect();
        if let Some(b) = bias {
            let bt = store.value(b);
            if bt.numel() != out {
                return Err(Error::Shape(format!("bias of length {} for {out} outputs", bt.numel())));
            }
            y.iter_mut().zip(bt.data()).for_each(|(y, b)| *y += b);
        }
        Ok(self.push(DenseTensor::vector(y), Op::Linear { w, bias, x }))
    }

    /// Full contraction `Σ w ⊙ x` with a parameter of the same size.
    pub fn inner(&mut self, store: &ParamStore, w: ParamId, x: Var) -> Result<Var> {
        let wt = store.value(w);
        let xv = self.value(x);
        if wt.numel() != xv.numel() {
            return Err(Error::Shape(format!(
                "inner product of {:?} with {:?}",
                wt.shape(),
                xv.shape()
            )));
        }
        let s = wt.data().iter().zip(xv.data()).map(|(a, b)| a * b).sum();
        Ok(self.push(DenseTensor::scalar(s), Op::Inner { w, x }))
    }

    /// `out[p, q, r] = a[p] b[q] c[r]`.
    pub fn outer3(&mut self, a: Var, b: Var, c: Var) -> Result<Var> {
        let p = one_dim(self.value(a), "outer3")?;
        let q = one_dim(self.value(b), "outer3")?;
        let r = one_dim(self.value(c), "outer3")?;
        let (ad, bd, cd) = (self.value(a).data(), self.value(b).data(), self.value(c).data());
        let mut out = Vec::with_capacity(p * q * r);
        for &x in ad {
            for &y in bd {
                let xy = x * y;
                out.extend(cd.iter().map(|&z| xy * z));
            }
        }
        let value = DenseTensor::new(vec![p, q, r], out)?;
        Ok(self.push(value, Op::Outer3 { a, b, c }))
    }

    /// `out[u, w] = a[u] b[w]`.
    pub fn outer2(&mut self, a: Var, b: Var) -> Result<Var> {
        let n = one_dim(self.value(a), "outer2")?;
        let m = one_dim(self.value(b), "outer2")?;
        if n != m {
            return Err(Error::Shape(format!("outer2 length mismatch: {n} vs {m}")));
        }
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let out: Vec<f64> = ad.iter().flat_map(|&x| bd.iter().map(move |&y| x * y)).collect();
        let value = DenseTensor::new(vec![n, m], out)?;
        Ok(self.push(value, Op::Outer2 { a, b }))
    }

    /// Row-major flattening of a 3-d tensor.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.ndim() != 3 {
            return Err(Error::Shape(format!("flatten expects a 3-d input, got {:?}", t.shape())));
        }
        self.reshape(x, vec![t.numel()])
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape { x }))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let mut value = self.value(x).clone();
        value.data_mut().iter_mut().for_each(|v| *v *= factor);
        self.push(value, Op::Scale { x, factor })
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        self.softmax(x, SoftmaxAxis::Row)
    }

    /// Max-shifted softmax of a matrix along `axis`.
    pub fn softmax(&mut self, x: Var, axis: SoftmaxAxis) -> Result<Var> {
        let t = self.value(x);
        let (rows, cols) = matrix(t, "softmax")?;
        let mut out = t.data().to_vec();
        for_each_group(rows, cols, axis, |idx| {
            let max = idx.clone().map(|i| out[i]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for i in idx.clone() {
                out[i] = (out[i] - max).exp();
                total += out[i];
            }
            for i in idx {
                out[i] /= total;
            }
        });
        let value = DenseTensor::new(vec![rows, cols], out)?;
        Ok(self.push(value, Op::Softmax { x, axis }))
    }

    /// Inverted dropout. Identity when `rate == 0` or outside training.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, training: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate must lie in [0, 1), got {rate}")));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.value(x).numel())
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let mut value = self.value(x).clone();
        value.data_mut().iter_mut().zip(&mask).for_each(|(v, m)| *v *= m);
        Ok(self.push(value, Op::Dropout { x, mask }))
    }

    /// Matrix-vector product `M v`.
    pub fn matvec(&mut self, m: Var, v: Var) -> Result<Var> {
        let (rows, cols) = matrix(self.value(m), "matvec")?;
        if one_dim(self.value(v), "matvec")? != cols {
            return Err(Error::Shape(format!(
                "matvec of {rows}x{cols} matrix with vector of length {}",
                self.value(v).numel()
            )));
        }
        let vd = self.value(v).data();
        let out = self
            .value(m)
            .data()
            .chunks_exact(cols)
            .map(|row| row.iter().zip(vd).map(|(a, b)| a * b).sum())
            .collect();
        Ok(self.push(DenseTensor::vector(out), Op::MatVec { m, v }))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Shape("concat of zero vectors".into()));
        }
        let mut out = Vec::new();
        for &p in parts {
            one_dim(self.value(p), "concat")?;
            out.extend_from_slice(self.value(p).data());
        }
        Ok(self.push(DenseTensor::vector(out), Op::Concat { parts: parts.to_vec() }))
    }

    /// Contiguous sub-vector `x[start .. start + len]`.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let n = one_dim(self.value(x), "slice")?;
        if len == 0 || start + len > n {
            return Err(Error::Shape(format!("slice [{start}, {}) of length-{n} vector", start + len)));
        }
        let out = self.value(x).data()[start..start + len].to_vec();
        Ok(self.push(DenseTensor::vector(out), Op::Slice { x, start }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (at, bt) = (self.value(a), self.value(b));
        if at.shape() != bt.shape() {
            return Err(Error::Shape(format!("add of {:?} and {:?}", at.shape(), bt.shape())));
        }
        let out = at.data().iter().zip(bt.data()).map(|(x, y)| x + y).collect();
        let value = DenseTensor::new(at.shape().to_vec(), out)?;
        Ok(self.push(value, Op::Add { a, b }))
    }

    /// `(x - mean) / sqrt(var + eps) * gain + bias` with population variance.
    pub fn layer_norm(&mut self, store: &ParamStore, x: Var, gain: ParamId, bias: ParamId, eps: f64) -> Result<Var> {
        let n = one_dim(self.value(x), "layer_norm")?;
        let (g, b) = (store.value(gain), store.value(bias));
        if g.numel() != n || b.numel() != n {
            return Err(Error::Shape(format!(
                "layer_norm affine of lengths {}/{} for input of length {n}",
                g.numel(),
                b.numel()
            )));
        }
        let xd = self.value(x).data();
        let mean = xd.iter().sum::<f64>() / n as f64;
        let var = xd.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let inv_std = 1.0 / (var + eps).sqrt();
        let xhat: Vec<f64> = xd.iter().map(|v| (v - mean) * inv_std).collect();
        let out = xhat
            .iter()
            .zip(g.data().iter().zip(b.data()))
            .map(|(h, (g, b))| h * g + b)
            .collect();
        Ok(self.push(
            DenseTensor::vector(out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        ))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let mut value = self.value(x).clone();
        value.data_mut().iter_mut().for_each(|v| *v = sigmoid(*v));
        self.push(value, Op::Sigmoid { x })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(DenseTensor::scalar(s), Op::Sum { x })
    }

    /// `½ (target − pred)²` for a single-element prediction.
    pub fn half_squared_error(&mut self, pred: Var, target: f64) -> Result<Var> {
        let p = self.value(pred);
        if p.numel() != 1 {
            return Err(Error::Shape(format!("squared error expects a scalar, got {:?}", p.shape())));
        }
        let d = target - p.data()[0];
        Ok(self.push(DenseTensor::scalar(0.5 * d * d), Op::HalfSquaredError { pred, target }))
    }

    /// Back-propagates from a scalar `loss`, adding parameter gradients into
    /// the store's accumulators.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<Gradients> {
        let mut sink = store.grad_buffer();
        let grads = self.backward_into(loss, store, &mut sink, 1.0)?;
        store.accumulate(&sink);
        Ok(grads)
    }

    /// Back-propagates `seed · ∂loss` into a detached gradient buffer.
    pub fn backward_into(&self, loss: Var, store: &ParamStore, sink: &mut GradBuffer, seed: f64) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        adj[loss.0] = Some(vec![seed]);
        for n in (0..=loss.0).rev() {
            let Some(g) = adj[n].take() else { continue };
            self.apply_vjp(n, &g, store, sink, &mut adj);
            adj[n] = Some(g);
        }
        Ok(Gradients { adjoints: adj })
    }

    fn apply_vjp(
        &self,
        n: usize,
        g: &[f64],
        store: &ParamStore,
        sink: &mut GradBuffer,
        adj: &mut [Option<Vec<f64>>],
    ) {
        let node = &self.nodes[n];
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Embedding { table, row } => {
                let dim = g.len();
                let dst = &mut sink.get_mut(*table).data_mut()[row * dim..(row + 1) * dim];
                dst.iter_mut().zip(g).for_each(|(d, g)| *d += g);
            }
            Op::Linear { w, bias, x } => {
                let wt = store.value(*w);
                let xd = val(*x);
                let inp = xd.len();
                let gw = sink.get_mut(*w).data_mut();
                for (o, &go) in g.iter().enumerate() {
                    if go != 0.0 {
                        let row = &mut gw[o * inp..(o + 1) * inp];
                        row.iter_mut().zip(xd).for_each(|(d, x)| *d += go * x);
                    }
                }
                if let Some(b) = bias {
                    let gb = sink.get_mut(*b).data_mut();
                    gb.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                }
                accumulate(adj, *x, inp, |gx| {
                    for (row, &go) in wt.data().chunks_exact(inp).zip(g) {
                        gx.iter_mut().zip(row).for_each(|(d, w)| *d += w * go);
                    }
                });
            }
            Op::Inner { w, x } => {
                let g0 = g[0];
                let xd = val(*x);
                let gw = sink.get_mut(*w).data_mut();
                gw.iter_mut().zip(xd).for_each(|(d, x)| *d += g0 * x);
                let wd = store.value(*w).data();
                accumulate(adj, *x, xd.len(), |gx| {
                    gx.iter_mut().zip(wd).for_each(|(d, w)| *d += g0 * w);
                });
            }
            Op::Outer3 { a, b, c } => {
                let (ad, bd, cd) = (val(*a), val(*b), val(*c));
                let (q, r) = (bd.len(), cd.len());
                let mut ga = vec![0.0; ad.len()];
                let mut gb = vec![0.0; q];
                let mut gc = vec![0.0; r];
                for (p, &ap) in ad.iter().enumerate() {
                    for (qi, &bq) in bd.iter().enumerate() {
                        let base = (p * q + qi) * r;
                        let gr = &g[base..base + r];
                        let dot_c: f64 = gr.iter().zip(cd).map(|(g, c)| g * c).sum();
                        ga[p] += bq * dot_c;
                        gb[qi] += ap * dot_c;
                        let ab = ap * bq;
                        gc.iter_mut().zip(gr).for_each(|(d, g)| *d += ab * g);
                    }
                }
                add_into(adj, *a, &ga);
                add_into(adj, *b, &gb);
                add_into(adj, *c, &gc);
            }
            Op::Outer2 { a, b } => {
                let (ad, bd) = (val(*a), val(*b));
                let m = bd.len();
                let mut ga = vec![0.0; ad.len()];
                let mut gb = vec![0.0; m];
                for (u, &au) in ad.iter().enumerate() {
                    let row = &g[u * m..(u + 1) * m];
                    ga[u] = row.iter().zip(bd).map(|(g, b)| g * b).sum();
                    gb.iter_mut().zip(row).for_each(|(d, g)| *d += au * g);
                }
                add_into(adj, *a, &ga);
                add_into(adj, *b, &gb);
            }
            Op::Reshape { x } => add_into(adj, *x, g),
            Op::Scale { x, factor } => {
                accumulate(adj, *x, g.len(), |gx| {
                    gx.iter_mut().zip(g).for_each(|(d, g)| *d += factor * g);
                });
            }
            Op::Softmax { x, axis } => {
                let s = node.value.data();
                let (rows, cols) = (node.value.shape()[0], node.value.shape()[1]);
                let mut gx = vec![0.0; s.len()];
                for_each_group(rows, cols, *axis, |idx| {
                    let dot: f64 = idx.clone().map(|i| g[i] * s[i]).sum();
                    for i in idx {
                        gx[i] = s[i] * (g[i] - dot);
                    }
                });
                add_into(adj, *x, &gx);
            }
            Op::Dropout { x, mask } => {
                accumulate(adj, *x, g.len(), |gx| {
                    gx.iter_mut().zip(g.iter().zip(mask)).for_each(|(d, (g, m))| *d += g * m);
                });
            }
            Op::MatVec { m, v } => {
                let (md, vd) = (val(*m), val(*v));
                let cols = vd.len();
                let mut gm = vec![0.0; md.len()];
                let mut gv = vec![0.0; cols];
                for (u, &gu) in g.iter().enumerate() {
                    let row = &md[u * cols..(u + 1) * cols];
                    let grow = &mut gm[u * cols..(u + 1) * cols];
                    for w in 0..cols {
                        grow[w] = gu * vd[w];
                        gv[w] += row[w] * gu;
                    }
                }
                add_into(adj, *m, &gm);
                add_into(adj, *v, &gv);
            }
            Op::Concat { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p.0].value.numel();
                    add_into(adj, p, &g[offset..offset + len]);
                    offset += len;
                }
            }
            Op::Slice { x, start } => {
                let n = self.nodes[x.0].value.numel();
                accumulate(adj, *x, n, |gx| {
                    gx[*start..start + g.len()].iter_mut().zip(g).for_each(|(d, g)| *d += g);
                });
            }
            Op::Add { a, b } => {
                add_into(adj, *a, g);
                add_into(adj, *b, g);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let gd = store.value(*gain).data();
                let n = g.len() as f64;
                {
                    let ggain = sink.get_mut(*gain).data_mut();
                    ggain.iter_mut().zip(g.iter().zip(xhat)).for_each(|(d, (g, h))| *d += g * h);
                }
                {
                    let gbias = sink.get_mut(*bias).data_mut();
                    gbias.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                }
                let dxhat: Vec<f64> = g.iter().zip(gd).map(|(g, w)| g * w).collect();
                let sum_d: f64 = dxhat.iter().sum();
                let sum_dh: f64 = dxhat.iter().zip(xhat).map(|(d, h)| d * h).sum();
                accumulate(adj, *x, g.len(), |gx| {
                    for ((d, dh), h) in gx.iter_mut().zip(&dxhat).zip(xhat) {
                        *d += inv_std / n * (n * dh - sum_d - h * sum_dh);
                    }
                });
            }
            Op::Sigmoid { x } => {
                let s = node.value.data();
                accumulate(adj, *x, g.len(), |gx| {
                    for ((d, g), s) in gx.iter_mut().zip(g).zip(s) {
                        *d += g * s * (1.0 - s);
                    }
                });
            }
            Op::Sum { x } => {
                let n = self.nodes[x.0].value.numel();
                accumulate(adj, *x, n, |gx| gx.iter_mut().for_each(|d| *d += g[0]));
            }
            Op::HalfSquaredError { pred, target } => {
                let p = val(*pred)[0];
                add_into(adj, *pred, &[g[0] * (p - target)]);
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Calls `f` with the flat indices of each normalization group.
fn for_each_group(rows: usize, cols: usize, axis: SoftmaxAxis, mut f: impl FnMut(std::iter::StepBy<std::ops::Range<usize>>)) {
    match axis {
        SoftmaxAxis::Row => (0..rows).for_each(|r| f((r * cols..(r + 1) * cols).step_by(1))),
        SoftmaxAxis::Column => (0..cols).for_each(|c| f((c..rows * cols).step_by(cols))),
        SoftmaxAxis::Global => f((0..rows * cols).step_by(1)),
    }
}

fn accumulate(adj: &mut [Option<Vec<f64>>], v: Var, len: usize, f: impl FnOnce(&mut [f64])) {
    let slot = adj[v.0].get_or_insert_with(|| vec![0.0; len]);
    f(slot);
}

fn add_into(adj: &mut [Option<Vec<f64>>], v: Var, g: &[f64]) {
    match &mut adj[v.0] {
        Some(existing) => existing.iter_mut().zip(g).for_each(|(d, g)| *d += g),
        slot @ None => *slot = Some(g.to_vec()),
    }
}
