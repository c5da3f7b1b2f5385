use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::params::{ParamId, ParamStore};
use super::tensor::{gemm, Tensor};
use super::DiffError;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Concat(Vec<Var>),
    Slice {
        src: Var,
        start: usize,
    },
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Softmax {
        src: Var,
        axis: usize,
    },
    LogSoftmax {
        src: Var,
        axis: usize,
    },
    Embedding {
        table: Var,
        indices: Vec<usize>,
    },
    Conv2dSame {
        input: Var,
        weight: Var,
        kernel: usize,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
    },
    Reshape(Var),
    SumAll(Var),
    MeanAxis1(Var),
    BatchDot {
        keys: Var,
        query: Var,
    },
    WeightedSum {
        weights: Var,
        values: Var,
    },
    ScaleRows {
        weights: Var,
        values: Var,
    },
    AddMid {
        x: Var,
        y: Var,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Single-threaded tape. Nodes are appended in evaluation order, so every
/// parent index is smaller than its child's.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    training: bool,
    rng: ChaCha8Rng,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Splits `shape` around `axis` into (outer, axis length, inner).
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn dims3(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize), DiffError> {
    match *shape {
        [a, b, c] => Ok((a, b, c)),
        _ => Err(DiffError::invalid(format!(
            "{op} expects a rank-3 tensor, got {shape:?}"
        ))),
    }
}

impl Graph {
    /// Evaluation-mode graph: dropout is the identity.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            training: false,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    /// Training-mode graph whose dropout masks come from `rng`.
    pub fn training(rng: ChaCha8Rng) -> Self {
        Self {
            nodes: Vec::new(),
            training: true,
            rng,
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    /// Returns the dropout stream so a caller can continue it across graphs.
    pub fn into_rng(self) -> ChaCha8Rng {
        self.rng
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let requires_grad = match op {
            Op::Param(_) => true,
            _ => parents.iter().any(|p| self.nodes[p.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, &[])
    }

    /// Leaf that receives a gradient (useful for checking primitives).
    pub fn input(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id), &[])
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), DiffError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(DiffError::shape(op, sa, sb));
        }
        Ok(())
    }

    /// `x[..., K] · w[K, N] -> [..., N]`.
    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var, DiffError> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        let k = self.value(x).last_dim();
        if ws.len() != 2 || xs.is_empty() || ws[0] != k {
            return Err(DiffError::shape("matmul", xs, ws));
        }
        let (m, n) = (self.value(x).rows(), ws[1]);
        let mut shape = xs.to_vec();
        *shape.last_mut().expect("non-empty") = n;
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(x).data(),
            false,
            self.value(w).data(),
            false,
            &mut out,
            false,
        );
        Ok(self.push(Tensor::from_parts(shape, out), Op::MatMul(x, w), &[x, w]))
    }

    fn zip(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, DiffError> {
        self.same_shape(op_name, a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::from_parts(shape, data), op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.zip("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Sum of one or more same-shape tensors.
    pub fn sum(&mut self, vars: &[Var]) -> Result<Var, DiffError> {
        let (&first, rest) = vars
            .split_first()
            .ok_or_else(|| DiffError::invalid("sum of no tensors"))?;
        rest.iter().try_fold(first, |acc, &v| self.add(acc, v))
    }

    /// `x[..., N] + b[N]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var, DiffError> {
        let n = self.value(x).last_dim();
        if self.shape(b) != [n] {
            return Err(DiffError::shape("add_bias", self.shape(x), self.shape(b)));
        }
        let bias = self.value(b).data();
        let data = self
            .value(x)
            .data()
            .chunks(n)
            .flat_map(|row| row.iter().zip(bias).map(|(a, c)| a + c))
            .collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(Tensor::from_parts(shape, data), Op::AddBias(x, b), &[x, b]))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var, DiffError> {
        let data = self.value(x).data().iter().map(|v| v * s).collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(Tensor::from_parts(shape, data), Op::Scale(x, s), &[x]))
    }

    /// Concatenation along the last axis; leading axes must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, DiffError> {
        let (&first, _) = parts
            .split_first()
            .ok_or_else(|| DiffError::invalid("concat of no tensors"))?;
        let lead = &self.shape(first)[..self.shape(first).len().saturating_sub(1)];
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || &s[..s.len() - 1] != lead {
                return Err(DiffError::shape("concat", self.shape(first), s));
            }
        }
        let rows = self.value(first).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).last_dim()).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::Concat(parts.to_vec()),
            parts,
        ))
    }

    /// `x[..., start..start + len]`.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var, DiffError> {
        let n = self.value(x).last_dim();
        if self.shape(x).is_empty() || start + len > n {
            return Err(DiffError::invalid(format!(
                "slice {start}..{} of last axis {n}",
                start + len
            )));
        }
        let data = self
            .value(x)
            .data()
            .chunks(n)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let mut shape = self.shape(x).to_vec();
        *shape.last_mut().expect("non-empty") = len;
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::Slice { src: x, start },
            &[x],
        ))
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let data = self.value(x).data().iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push(Tensor::from_parts(shape, data), op, &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map(x, f64::tanh, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, |v| 1.0 / (1.0 + (-v).exp()), Op::Sigmoid(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, |v| v.max(0.0), Op::Relu(x))
    }

    fn check_axis(&self, x: Var, axis: usize) -> Result<(), DiffError> {
        if axis >= self.shape(x).len() {
            return Err(DiffError::invalid(format!(
                "axis {axis} out of range for shape {:?}",
                self.shape(x)
            )));
        }
        Ok(())
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, DiffError> {
        self.check_axis(x, axis)?;
        let t = self.value(x);
        let (outer, len, inner) = axis_split(t.shape(), axis);
        let src = t.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let max = (0..len)
                    .map(|j| src[at(j)])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for j in 0..len {
                    let e = (src[at(j)] - max).exp();
                    out[at(j)] = e;
                    z += e;
                }
                for j in 0..len {
                    out[at(j)] /= z;
                }
            }
        }
        let shape = t.shape().to_vec();
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Softmax { src: x, axis },
            &[x],
        ))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var, DiffError> {
        self.check_axis(x, axis)?;
        let t = self.value(x);
        let (outer, len, inner) = axis_split(t.shape(), axis);
        let src = t.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let max = (0..len)
                    .map(|j| src[at(j)])
                    .fold(f64::NEG_INFINITY, f64::max);
                let lse = max + (0..len).map(|j| (src[at(j)] - max).exp()).sum::<f64>().ln();
                for j in 0..len {
                    out[at(j)] = src[at(j)] - lse;
                }
            }
        }
        let shape = t.shape().to_vec();
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::LogSoftmax { src: x, axis },
            &[x],
        ))
    }

    /// Rows of `table[V, E]` -> `[indices.len(), E]`.
    pub fn embedding(&mut self, table: Var, indices: &[usize]) -> Result<Var, DiffError> {
        let ts = self.shape(table);
        if ts.len() != 2 {
            return Err(DiffError::invalid(format!(
                "embedding table must be rank 2, got {ts:?}"
            )));
        }
        let (v, e) = (ts[0], ts[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= v) {
            return Err(DiffError::IndexOutOfRange { index: bad, len: v });
        }
        let tdata = self.value(table).data();
        let mut data = Vec::with_capacity(indices.len() * e);
        for &i in indices {
            data.extend_from_slice(&tdata[i * e..(i + 1) * e]);
        }
        let out = Tensor::from_parts(vec![indices.len(), e], data);
        Ok(self.push(
            out,
            Op::Embedding {
                table,
                indices: indices.to_vec(),
            },
            &[table],
        ))
    }

    /// Same-padded 2-D convolution, channels last.
    ///
    /// `input[B, H, W, Cin]`, `weight[k·k·Cin, Cout]` (row index
    /// `(dy·k + dx)·Cin + ci`) -> `[B, H, W, Cout]`. Zero inputs are skipped,
    /// which makes sparse one-hot grids cheap.
    pub fn conv2d_same(
        &mut self,
        input: Var,
        weight: Var,
        kernel: usize,
    ) -> Result<Var, DiffError> {
        if kernel.is_multiple_of(2) {
            return Err(DiffError::invalid(format!(
                "conv2d_same needs an odd kernel, got {kernel}"
            )));
        }
        let is = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        let [b, h, w, cin] = is[..] else {
            return Err(DiffError::invalid(format!(
                "conv2d_same input must be [B,H,W,C], got {is:?}"
            )));
        };
        if ws.len() != 2 || ws[0] != kernel * kernel * cin {
            return Err(DiffError::shape("conv2d_same", &is, &ws));
        }
        let cout = ws[1];
        let x = self.value(input).data();
        let wt = self.value(weight).data();
        let mut out = vec![0.0; b * h * w * cout];
        conv_taps(b, h, w, cin, kernel, |in_idx, out_idx, w_row| {
            let v = x[in_idx];
            if v != 0.0 {
                let dst = &mut out[out_idx * cout..(out_idx + 1) * cout];
                let src = &wt[w_row * cout..(w_row + 1) * cout];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += v * s;
                }
            }
        });
        let t = Tensor::from_parts(vec![b, h, w, cout], out);
        Ok(self.push(
            t,
            Op::Conv2dSame {
                input,
                weight,
                kernel,
            },
            &[input, weight],
        ))
    }

    /// `Σ_r weights[r] · (−log_softmax(logits[r])[targets[r]])` over the rows of `logits[R, C]`.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        weights: &[f64],
    ) -> Result<Var, DiffError> {
        let t = self.value(logits);
        let (rows, c) = (t.rows(), t.last_dim());
        if targets.len() != rows || weights.len() != rows {
            return Err(DiffError::invalid(format!(
                "cross_entropy over {rows} rows given {} targets and {} weights",
                targets.len(),
                weights.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&i| i >= c) {
            return Err(DiffError::IndexOutOfRange { index: bad, len: c });
        }
        let mut loss = 0.0;
        for r in 0..rows {
            if weights[r] == 0.0 {
                continue;
            }
            let row = t.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += weights[r] * (lse - row[targets[r]]);
        }
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            weights: weights.to_vec(),
        };
        Ok(self.push(Tensor::scalar(loss), op, &[logits]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, DiffError> {
        let t = self.value(x).reshaped(shape.to_vec())?;
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(x), &[x])
    }

    /// `x[B, N, C] -> [B, C]`, averaging over N.
    pub fn mean_axis1(&mut self, x: Var) -> Result<Var, DiffError> {
        let (b, n, c) = dims3("mean_axis1", self.shape(x))?;
        let src = self.value(x).data();
        let mut out = vec![0.0; b * c];
        for bi in 0..b {
            for ni in 0..n {
                let row = &src[(bi * n + ni) * c..(bi * n + ni + 1) * c];
                for (o, v) in out[bi * c..(bi + 1) * c].iter_mut().zip(row) {
                    *o += v / n as f64;
                }
            }
        }
        Ok(self.push(Tensor::from_parts(vec![b, c], out), Op::MeanAxis1(x), &[x]))
    }

    /// Per-batch dot products `keys[B, N, C] · query[B, C] -> [B, N]`.
    pub fn batch_dot(&mut self, keys: Var, query: Var) -> Result<Var, DiffError> {
        let (b, n, c) = dims3("batch_dot", self.shape(keys))?;
        if self.shape(query) != [b, c] {
            return Err(DiffError::shape(
                "batch_dot",
                self.shape(keys),
                self.shape(query),
            ));
        }
        let (k, q) = (self.value(keys).data(), self.value(query).data());
        let mut out = vec![0.0; b * n];
        for bi in 0..b {
            let qv = &q[bi * c..(bi + 1) * c];
            for ni in 0..n {
                let kv = &k[(bi * n + ni) * c..(bi * n + ni + 1) * c];
                out[bi * n + ni] = kv.iter().zip(qv).map(|(a, b)| a * b).sum();
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![b, n], out),
            Op::BatchDot { keys, query },
            &[keys, query],
        ))
    }

    /// `Σ_n weights[B, N] · values[B, N, C] -> [B, C]`.
    pub fn weighted_sum(&mut self, weights: Var, values: Var) -> Result<Var, DiffError> {
        let (b, n, c) = dims3("weighted_sum", self.shape(values))?;
        if self.shape(weights) != [b, n] {
            return Err(DiffError::shape(
                "weighted_sum",
                self.shape(weights),
                self.shape(values),
            ));
        }
        let (w, v) = (self.value(weights).data(), self.value(values).data());
        let mut out = vec![0.0; b * c];
        for bi in 0..b {
            let dst = &mut out[bi * c..(bi + 1) * c];
            for ni in 0..n {
                let wt = w[bi * n + ni];
                for (d, x) in dst
                    .iter_mut()
                    .zip(&v[(bi * n + ni) * c..(bi * n + ni + 1) * c])
                {
                    *d += wt * x;
                }
            }
        }
        let op = Op::WeightedSum { weights, values };
        Ok(self.push(Tensor::from_parts(vec![b, c], out), op, &[weights, values]))
    }

    /// Row `n` of `values[B, N, C]` scaled by `weights[B, N]`.
    pub fn scale_rows(&mut self, weights: Var, values: Var) -> Result<Var, DiffError> {
        let (b, n, c) = dims3("scale_rows", self.shape(values))?;
        if self.shape(weights) != [b, n] {
            return Err(DiffError::shape(
                "scale_rows",
                self.shape(weights),
                self.shape(values),
            ));
        }
        let (w, v) = (self.value(weights).data(), self.value(values).data());
        let data = v
            .chunks(c)
            .zip(w)
            .flat_map(|(row, &s)| row.iter().map(move |x| x * s))
            .collect();
        let op = Op::ScaleRows { weights, values };
        Ok(self.push(
            Tensor::from_parts(vec![b, n, c], data),
            op,
            &[weights, values],
        ))
    }

    /// `x[B, N, H] + y[B, H]`, broadcasting `y` over N.
    pub fn add_mid(&mut self, x: Var, y: Var) -> Result<Var, DiffError> {
        let (b, n, h) = dims3("add_mid", self.shape(x))?;
        if self.shape(y) != [b, h] {
            return Err(DiffError::shape("add_mid", self.shape(x), self.shape(y)));
        }
        let (xd, yd) = (self.value(x).data(), self.value(y).data());
        let mut data = xd.to_vec();
        for bi in 0..b {
            let yrow = &yd[bi * h..(bi + 1) * h];
            for ni in 0..n {
                for (d, a) in data[(bi * n + ni) * h..(bi * n + ni + 1) * h]
                    .iter_mut()
                    .zip(yrow)
                {
                    *d += a;
                }
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![b, n, h], data),
            Op::AddMid { x, y },
            &[x, y],
        ))
    }

    /// Inverted dropout; the identity outside training or at rate 0.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var, DiffError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(DiffError::invalid(format!(
                "dropout rate {rate} outside [0, 1)"
            )));
        }
        if !self.training || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - rate;
        let n = self.value(x).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| {
                if self.rng.gen::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        let m = self.constant(Tensor::from_parts(self.shape(x).to_vec(), mask));
        self.mul(x, m)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, DiffError> {
        if self.value(loss).len() != 1 {
            return Err(DiffError::invalid(format!(
                "backward needs a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.propagate(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Runs [`Graph::backward`] and adds parameter gradients into `store`.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore) -> Result<Gradients, DiffError> {
        let grads = self.backward(loss)?;
        for (i, node) in self.nodes.iter().enumerate().take(loss.0 + 1) {
            if let (Op::Param(id), Some(g)) = (&node.op, &grads.grads[i]) {
                store.accumulate_grad(*id, g);
            }
        }
        Ok(grads)
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        // Zero-initialised gradient buffer for `v`, or None if `v` needs none.
        macro_rules! buf {
            ($v:expr) => {{
                let v: Var = $v;
                if self.nodes[v.0].requires_grad {
                    let len = self.nodes[v.0].value.len();
                    Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
                } else {
                    None
                }
            }};
        }
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(x, w) => {
                let (xt, wt) = (self.value(*x), self.value(*w));
                let (m, k, n) = (xt.rows(), xt.last_dim(), wt.shape()[1]);
                if let Some(gx) = buf!(*x) {
                    gemm(m, n, k, g, false, wt.data(), true, gx, true);
                }
                if let Some(gw) = buf!(*w) {
                    gemm(k, m, n, xt.data(), true, g, false, gw, true);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(ga) = buf!(v) {
                        ga.iter_mut().zip(g).for_each(|(d, s)| *d += s);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = buf!(*a) {
                    ga.iter_mut().zip(g).for_each(|(d, s)| *d += s);
                }
                if let Some(gb) = buf!(*b) {
                    gb.iter_mut().zip(g).for_each(|(d, s)| *d -= s);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = buf!(*a) {
                    for ((d, s), o) in ga.iter_mut().zip(g).zip(bv) {
                        *d += s * o;
                    }
                }
                if let Some(gb) = buf!(*b) {
                    for ((d, s), o) in gb.iter_mut().zip(g).zip(av) {
                        *d += s * o;
                    }
                }
            }
            Op::AddBias(x, b) => {
                if let Some(gx) = buf!(*x) {
                    gx.iter_mut().zip(g).for_each(|(d, s)| *d += s);
                }
                if let Some(gb) = buf!(*b) {
                    let n = gb.len();
                    for row in g.chunks(n) {
                        gb.iter_mut().zip(row).for_each(|(d, s)| *d += s);
                    }
                }
            }
            Op::Scale(x, s) => {
                if let Some(gx) = buf!(*x) {
                    gx.iter_mut().zip(g).for_each(|(d, v)| *d += v * s);
                }
            }
            Op::Concat(parts) => {
                let total = node.value.last_dim();
                let rows = node.value.rows();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).last_dim();
                    if let Some(gp) = buf!(p) {
                        for r in 0..rows {
                            let src = &g[r * total + offset..r * total + offset + w];
                            gp[r * w..(r + 1) * w]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(d, s)| *d += s);
                        }
                    }
                    offset += w;
                }
            }
            Op::Slice { src, start } => {
                let n = self.value(*src).last_dim();
                let len = node.value.last_dim();
                if let Some(gs) = buf!(*src) {
                    for (r, row) in g.chunks(len).enumerate() {
                        gs[r * n + start..r * n + start + len]
                            .iter_mut()
                            .zip(row)
                            .for_each(|(d, s)| *d += s);
                    }
                }
            }
            Op::Tanh(x) => {
                if let Some(gx) = buf!(*x) {
                    for ((d, s), yv) in gx.iter_mut().zip(g).zip(y) {
                        *d += s * (1.0 - yv * yv);
                    }
                }
            }
            Op::Sigmoid(x) => {
                if let Some(gx) = buf!(*x) {
                    for ((d, s), yv) in gx.iter_mut().zip(g).zip(y) {
                        *d += s * yv * (1.0 - yv);
                    }
                }
            }
            Op::Relu(x) => {
                if let Some(gx) = buf!(*x) {
                    for ((d, s), yv) in gx.iter_mut().zip(g).zip(y) {
                        if *yv > 0.0 {
                            *d += s;
                        }
                    }
                }
            }
            Op::Softmax { src, axis } => {
                let (outer, len, inner) = axis_split(node.value.shape(), *axis);
                if let Some(gx) = buf!(*src) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| o * len * inner + j * inner + i;
                            let dot: f64 = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                            for j in 0..len {
                                gx[at(j)] += y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                }
            }
            Op::LogSoftmax { src, axis } => {
                let (outer, len, inner) = axis_split(node.value.shape(), *axis);
                if let Some(gx) = buf!(*src) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| o * len * inner + j * inner + i;
                            let total: f64 = (0..len).map(|j| g[at(j)]).sum();
                            for j in 0..len {
                                gx[at(j)] += g[at(j)] - y[at(j)].exp() * total;
                            }
                        }
                    }
                }
            }
            Op::Embedding { table, indices } => {
                let e = node.value.last_dim();
                if let Some(gt) = buf!(*table) {
                    for (r, &idx) in indices.iter().enumerate() {
                        gt[idx * e..(idx + 1) * e]
                            .iter_mut()
                            .zip(&g[r * e..(r + 1) * e])
                            .for_each(|(d, s)| *d += s);
                    }
                }
            }
            Op::Conv2dSame {
                input,
                weight,
                kernel,
            } => {
                let [b, h, w, cin] = self.shape(*input)[..] else {
                    unreachable!("checked in forward")
                };
                let cout = node.value.last_dim();
                let x = self.value(*input).data();
                let wt = self.value(*weight).data();
                if let Some(gw) = buf!(*weight) {
                    conv_taps(b, h, w, cin, *kernel, |in_idx, out_idx, w_row| {
                        let v = x[in_idx];
                        if v != 0.0 {
                            let dst = &mut gw[w_row * cout..(w_row + 1) * cout];
                            for (d, s) in
                                dst.iter_mut().zip(&g[out_idx * cout..(out_idx + 1) * cout])
                            {
                                *d += v * s;
                            }
                        }
                    });
                }
                if let Some(gx) = buf!(*input) {
                    conv_taps(b, h, w, cin, *kernel, |in_idx, out_idx, w_row| {
                        let wrow = &wt[w_row * cout..(w_row + 1) * cout];
                        let grow = &g[out_idx * cout..(out_idx + 1) * cout];
                        gx[in_idx] += wrow.iter().zip(grow).map(|(a, b)| a * b).sum::<f64>();
                    });
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
            } => {
                let t = self.value(*logits);
                let c = t.last_dim();
                if let Some(gl) = buf!(*logits) {
                    for (r, (&tgt, &wr)) in targets.iter().zip(weights).enumerate() {
                        if wr == 0.0 {
                            continue;
                        }
                        let row = t.row(r);
                        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                        let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
                        let scale = g[0] * wr;
                        for j in 0..c {
                            let p = (row[j] - max).exp() / z;
                            gl[r * c + j] += scale * (p - if j == tgt { 1.0 } else { 0.0 });
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = buf!(*x) {
                    gx.iter_mut().zip(g).for_each(|(d, s)| *d += s);
                }
            }
            Op::SumAll(x) => {
                if let Some(gx) = buf!(*x) {
                    gx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::MeanAxis1(x) => {
                let [b, n, c] = self.shape(*x)[..] else {
                    unreachable!("checked in forward")
                };
                if let Some(gx) = buf!(*x) {
                    for bi in 0..b {
                        for ni in 0..n {
                            let dst = &mut gx[(bi * n + ni) * c..(bi * n + ni + 1) * c];
                            dst.iter_mut()
                                .zip(&g[bi * c..(bi + 1) * c])
                                .for_each(|(d, s)| *d += s / n as f64);
                        }
                    }
                }
            }
            Op::BatchDot { keys, query } => {
                let [b, n, c] = self.shape(*keys)[..] else {
                    unreachable!("checked in forward")
                };
                let (k, q) = (self.value(*keys).data(), self.value(*query).data());
                if let Some(gk) = buf!(*keys) {
                    for bi in 0..b {
                        for ni in 0..n {
                            let s = g[bi * n + ni];
                            let dst = &mut gk[(bi * n + ni) * c..(bi * n + ni + 1) * c];
                            dst.iter_mut()
                                .zip(&q[bi * c..(bi + 1) * c])
                                .for_each(|(d, qv)| *d += s * qv);
                        }
                    }
                }
                if let Some(gq) = buf!(*query) {
                    for bi in 0..b {
                        for ni in 0..n {
                            let s = g[bi * n + ni];
                            let kv = &k[(bi * n + ni) * c..(bi * n + ni + 1) * c];
                            gq[bi * c..(bi + 1) * c]
                                .iter_mut()
                                .zip(kv)
                                .for_each(|(d, kk)| *d += s * kk);
                        }
                    }
                }
            }
            Op::WeightedSum { weights, values } => {
                let [b, n, c] = self.shape(*values)[..] else {
                    unreachable!("checked in forward")
                };
                let (w, v) = (self.value(*weights).data(), self.value(*values).data());
                if let Some(gw) = buf!(*weights) {
                    for bi in 0..b {
                        let grow = &g[bi * c..(bi + 1) * c];
                        for ni in 0..n {
                            let vrow = &v[(bi * n + ni) * c..(bi * n + ni + 1) * c];
                            gw[bi * n + ni] +=
                                vrow.iter().zip(grow).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                }
                if let Some(gv) = buf!(*values) {
                    for bi in 0..b {
                        let grow = &g[bi * c..(bi + 1) * c];
                        for ni in 0..n {
                            let wt = w[bi * n + ni];
                            let dst = &mut gv[(bi * n + ni) * c..(bi * n + ni + 1) * c];
                            dst.iter_mut().zip(grow).for_each(|(d, s)| *d += wt * s);
                        }
                    }
                }
            }
            Op::ScaleRows { weights, values } => {
                let [_, _, c] = self.shape(*values)[..] else {
                    unreachable!("checked in forward")
                };
                let (w, v) = (self.value(*weights).data(), self.value(*values).data());
                if let Some(gw) = buf!(*weights) {
                    for (r, d) in gw.iter_mut().enumerate() {
                        let vrow = &v[r * c..(r + 1) * c];
                        *d += vrow
                            .iter()
                            .zip(&g[r * c..(r + 1) * c])
                            .map(|(a, b)| a * b)
                            .sum::<f64>();
                    }
                }
                if let Some(gv) = buf!(*values) {
                    for (r, &wt) in w.iter().enumerate() {
                        let dst = &mut gv[r * c..(r + 1) * c];
                        dst.iter_mut()
                            .zip(&g[r * c..(r + 1) * c])
                            .for_each(|(d, s)| *d += wt * s);
                    }
                }
            }
            Op::AddMid { x, y: yv } => {
                let [b, n, h] = self.shape(*x)[..] else {
                    unreachable!("checked in forward")
                };
                if let Some(gx) = buf!(*x) {
                    gx.iter_mut().zip(g).for_each(|(d, s)| *d += s);
                }
                if let Some(gy) = buf!(*yv) {
                    for bi in 0..b {
                        for ni in 0..n {
                            let src = &g[(bi * n + ni) * h..(bi * n + ni + 1) * h];
                            gy[bi * h..(bi + 1) * h]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(d, s)| *d += s);
                        }
                    }
                }
            }
        }
    }
}

/// Visits every (input element, output cell, weight row) triple of a
/// same-padded convolution over a channels-last `[B, H, W, Cin]` input.
fn conv_taps(
    b: usize,
    h: usize,
    w: usize,
    cin: usize,
    k: usize,
    mut f: impl FnMut(usize, usize, usize),
) {
    let pad = (k / 2) as isize;
    for bi in 0..b {
        for yo in 0..h {
            for xo in 0..w {
                let out_idx = (bi * h + yo) * w + xo;
                for dy in 0..k {
                    let yi = yo as isize + dy as isize - pad;
                    if yi < 0 || yi >= h as isize {
                        continue;
                    }
                    for dx in 0..k {
                        let xi = xo as isize + dx as isize - pad;
                        if xi < 0 || xi >= w as isize {
                            continue;
                        }
                        let in_base = ((bi * h + yi as usize) * w + xi as usize) * cin;
                        let w_base = (dy * k + dx) * cin;
                        for ci in 0..cin {
                            f(in_base + ci, out_idx, w_base + ci);
                        }
                    }
                }
            }
        }
    }
}

/// Per-node gradients from one reverse sweep.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`, or `None` if `v` does not influence
    /// the loss or needs no gradient.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}
