//! Reverse-mode differentiation over a flat tape of tensor operations.
//!
//! A [`Tape`] records every operation in the order it is applied, so
//! parents always precede children and a single reverse sweep visits
//! each node once. Parameters are copied onto the tape as named leaves;
//! [`Tape::backward`] returns a [`Gradients`] map keyed by those names.
//!
//! The op set is deliberately small: exactly what the residual model,
//! the gates and the two losses need.
//!
//! ```
//! use mvfuse::autodiff::Tape;
//! use mvfuse::Tensor;
//!
//! let mut tape = Tape::new();
//! let w = tape.param("w", Tensor::vector(vec![1.0, 2.0, 3.0]).unwrap());
//! let x = tape.input(Tensor::vector(vec![4.0, 5.0, 6.0]).unwrap());
//! let y = tape.hadamard(w, x).unwrap();
//! let loss = tape.sum(y);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.param("w").unwrap().data(), &[4.0, 5.0, 6.0]);
//! ```

use crate::error::{Error, Result};
use crate::tensor::{matmul_into, Tensor};

/// Layer-norm variance epsilon.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Hadamard(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Relu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        /// Normalized input, cached for the backward pass.
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    ConcatCols(Var, Var),
    SoftmaxCrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        smoothing: f64,
        probs: Tensor,
    },
    Mse(Var, Var),
    Sum(Var),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    param: Option<String>,
}

/// Append-only record of a forward computation.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// A named trainable leaf. Its gradient is reported by name.
    pub fn param(&mut self, name: &str, value: Tensor) -> Var {
        let v = self.push(value, Op::Leaf, true);
        self.nodes[v.0].param = Some(name.to_string());
        v
    }

    /// A constant leaf; no gradient flows into it.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A non-parameter leaf whose gradient is still requested.
    pub fn tracked_input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let g = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), g))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let g = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), g))
    }

    /// Adds a length-`c` bias to every row of an `r×c` matrix.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let x = self.value(a);
        let b = self.value(bias);
        let (_, c) = x.dims2()?;
        if b.shape() != [c] {
            return Err(Error::Shape(format!(
                "bias {:?} does not match matrix {:?}",
                b.shape(),
                x.shape()
            )));
        }
        let mut value = x.clone();
        for row in value.data_mut().chunks_mut(c) {
            for (v, bv) in row.iter_mut().zip(b.data()) {
                *v += bv;
            }
        }
        let g = self.any_grad(&[a, bias]);
        Ok(self.push(value, Op::AddBias(a, bias), g))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let g = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Hadamard(a, b), g))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scale(s);
        let g = self.any_grad(&[a]);
        self.push(value, Op::Scale(a, s), g)
    }

    /// Logistic function. Results are kept strictly inside (0, 1) even
    /// where the exact value rounds to an endpoint.
    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        let g = self.any_grad(&[a]);
        self.push(value, Op::Sigmoid(a), g)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        let g = self.any_grad(&[a]);
        self.push(value, Op::Relu(a), g)
    }

    /// Normalizes each row over the last dimension, then applies the
    /// per-column `gain` and `bias`.
    pub fn layer_norm(&mut self, a: Var, gain: Var, bias: Var) -> Result<Var> {
        let x = self.value(a);
        let (r, c) = x.dims2()?;
        if c < 2 {
            return Err(Error::Shape(format!(
                "layer_norm needs last dimension >= 2, got {:?}",
                x.shape()
            )));
        }
        let gv = self.value(gain);
        let bv = self.value(bias);
        if gv.shape() != [c] || bv.shape() != [c] {
            return Err(Error::Shape(format!(
                "layer_norm gain {:?} / bias {:?} do not match {:?}",
                gv.shape(),
                bv.shape(),
                x.shape()
            )));
        }
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = x.row(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[i * c + j] = h;
                out[i * c + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let value = Tensor::new(vec![r, c], out)?;
        let xhat = Tensor::new(vec![r, c], xhat)?;
        let g = self.any_grad(&[a, gain, bias]);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x: a,
                gain,
                bias,
                xhat,
                inv_std,
            },
            g,
        ))
    }

    /// `[a | b]` along columns.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = self.value(a).dims2()?;
        let (rb, cb) = self.value(b).dims2()?;
        if ra != rb {
            return Err(Error::Shape(format!(
                "concat row mismatch: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut data = Vec::with_capacity(ra * (ca + cb));
        for i in 0..ra {
            data.extend_from_slice(self.value(a).row(i));
            data.extend_from_slice(self.value(b).row(i));
        }
        let value = Tensor::new(vec![ra, ca + cb], data)?;
        let g = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::ConcatCols(a, b), g))
    }

    /// Mean over rows of label-smoothed cross-entropy. The smoothing
    /// mass is spread uniformly over all `V` classes.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        smoothing: f64,
    ) -> Result<Var> {
        let l = self.value(logits);
        let (t, v) = l.dims2()?;
        if targets.len() != t {
            return Err(Error::Shape(format!(
                "{} targets for logits {:?}",
                targets.len(),
                l.shape()
            )));
        }
        if !(0.0..1.0).contains(&smoothing) {
            return Err(Error::Config(format!(
                "label smoothing {smoothing} not in [0,1)"
            )));
        }
        if let Some(&id) = targets.iter().find(|&&id| id >= v) {
            return Err(Error::TargetOutOfRange { id, vocab: v });
        }
        let mut probs = vec![0.0; t * v];
        let mut loss = 0.0;
        for (i, &target) in targets.iter().enumerate() {
            let row = l.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            let mut row_loss = 0.0;
            for j in 0..v {
                let logp = row[j] - lse;
                probs[i * v + j] = logp.exp();
                let q = smoothing / v as f64 + if j == target { 1.0 - smoothing } else { 0.0 };
                if q != 0.0 {
                    row_loss -= q * logp;
                }
            }
            loss += row_loss;
        }
        let value = Tensor::scalar(loss / t as f64);
        let probs = Tensor::new(vec![t, v], probs)?;
        let g = self.any_grad(&[logits]);
        Ok(self.push(
            value,
            Op::SoftmaxCrossEntropy {
                logits,
                targets: targets.to_vec(),
                smoothing,
                probs,
            },
            g,
        ))
    }

    /// Mean of squared differences.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self
            .value(a)
            .zip_map(self.value(b), |x, y| (x - y) * (x - y))?;
        let value = Tensor::scalar(d.mean());
        let g = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Mse(a, b), g))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let g = self.any_grad(&[a]);
        self.push(value, Op::Sum(a), g)
    }

    /// Propagates d`loss` back through the tape.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let shape = self.value(loss).shape();
        if shape != [1] {
            return Err(Error::NotScalar(shape.to_vec()));
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(up) = adj[idx].take() else {
                continue;
            };
            self.propagate(node, &up, &mut adj)?;
            adj[idx] = Some(up);
        }

        let params = self
            .nodes
            .iter()
            .enumerate()
            .take(loss.0 + 1)
            .filter_map(|(i, n)| n.param.as_ref().map(|name| (name.clone(), i)))
            .collect();
        Ok(Gradients { adj, params })
    }

    fn accumulate(&self, adj: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut adj[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, node: &Node, up: &Tensor, adj: &mut [Option<Tensor>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, k) = av.dims2()?;
                let n = bv.dims2()?.1;
                if self.wants(*a) {
                    // dA = dC · Bᵀ
                    let bt = bv.transpose()?;
                    let mut da = vec![0.0; m * k];
                    matmul_into(up.data(), bt.data(), &mut da, m, n, k);
                    self.accumulate(adj, *a, Tensor::new(vec![m, k], da)?);
                }
                if self.wants(*b) {
                    // dB = Aᵀ · dC
                    let at = av.transpose()?;
                    let mut db = vec![0.0; k * n];
                    matmul_into(at.data(), up.data(), &mut db, k, m, n);
                    self.accumulate(adj, *b, Tensor::new(vec![k, n], db)?);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(adj, *a, up.clone());
                self.accumulate(adj, *b, up.clone());
            }
            Op::AddBias(a, bias) => {
                self.accumulate(adj, *a, up.clone());
                if self.wants(*bias) {
                    let c = up.last_dim();
                    let mut db = vec![0.0; c];
                    for row in up.data().chunks(c) {
                        for (d, u) in db.iter_mut().zip(row) {
                            *d += u;
                        }
                    }
                    self.accumulate(adj, *bias, Tensor::vector(db)?);
                }
            }
            Op::Hadamard(a, b) => {
                if self.wants(*a) {
                    self.accumulate(adj, *a, up.zip_map(self.value(*b), |u, y| u * y)?);
                }
                if self.wants(*b) {
                    self.accumulate(adj, *b, up.zip_map(self.value(*a), |u, x| u * x)?);
                }
            }
            Op::Scale(a, s) => self.accumulate(adj, *a, up.scale(*s)),
            Op::Sigmoid(a) => {
                let g = up.zip_map(&node.value, |u, y| u * y * (1.0 - y))?;
                self.accumulate(adj, *a, g);
            }
            Op::Relu(a) => {
                let g = up.zip_map(self.value(*a), |u, x| if x > 0.0 { u } else { 0.0 })?;
                self.accumulate(adj, *a, g);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (r, c) = xhat.dims2()?;
                let gv = self.value(*gain).data();
                let mut dgain = vec![0.0; c];
                let mut dbias = vec![0.0; c];
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    let h = xhat.row(i);
                    let u = up.row(i);
                    let mut mean_dh = 0.0;
                    let mut mean_dh_h = 0.0;
                    for j in 0..c {
                        dgain[j] += u[j] * h[j];
                        dbias[j] += u[j];
                        let dh = u[j] * gv[j];
                        mean_dh += dh;
                        mean_dh_h += dh * h[j];
                    }
                    mean_dh /= c as f64;
                    mean_dh_h /= c as f64;
                    for j in 0..c {
                        let dh = u[j] * gv[j];
                        dx[i * c + j] = inv_std[i] * (dh - mean_dh - h[j] * mean_dh_h);
                    }
                }
                self.accumulate(adj, *x, Tensor::new(vec![r, c], dx)?);
                self.accumulate(adj, *gain, Tensor::vector(dgain)?);
                self.accumulate(adj, *bias, Tensor::vector(dbias)?);
            }
            Op::ConcatCols(a, b) => {
                let ca = self.value(*a).last_dim();
                let (r, c) = up.dims2()?;
                let cb = c - ca;
                let mut da = Vec::with_capacity(r * ca);
                let mut db = Vec::with_capacity(r * cb);
                for i in 0..r {
                    let row = up.row(i);
                    da.extend_from_slice(&row[..ca]);
                    db.extend_from_slice(&row[ca..]);
                }
                self.accumulate(adj, *a, Tensor::new(vec![r, ca], da)?);
                self.accumulate(adj, *b, Tensor::new(vec![r, cb], db)?);
            }
            Op::SoftmaxCrossEntropy {
                logits,
                targets,
                smoothing,
                probs,
            } => {
                let (t, v) = probs.dims2()?;
                let scale = up.data()[0] / t as f64;
                let mut d = probs.data().to_vec();
                for (i, &target) in targets.iter().enumerate() {
                    for j in 0..v {
                        let q =
                            smoothing / v as f64 + if j == target { 1.0 - smoothing } else { 0.0 };
                        d[i * v + j] = (d[i * v + j] - q) * scale;
                    }
                }
                self.accumulate(adj, *logits, Tensor::new(vec![t, v], d)?);
            }
            Op::Mse(a, b) => {
                let av = self.value(*a);
                let scale = 2.0 * up.data()[0] / av.len() as f64;
                let da = av.zip_map(self.value(*b), |x, y| scale * (x - y))?;
                if self.wants(*b) {
                    self.accumulate(adj, *b, da.scale(-1.0));
                }
                self.accumulate(adj, *a, da);
            }
            Op::Sum(a) => {
                let shape = self.value(*a).shape().to_vec();
                self.accumulate(adj, *a, Tensor::full(&shape, up.data()[0]));
            }
        }
        Ok(())
    }
}

/// Numerically stable logistic, clamped to the open unit interval.
pub fn sigmoid(x: f64) -> f64 {
    const TOP: f64 = 1.0 - f64::EPSILON / 2.0;
    let y = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    y.clamp(f64::MIN_POSITIVE, TOP)
}

/// Result of [`Tape::backward`].
#[derive(Clone, Debug)]
pub struct Gradients {
    adj: Vec<Option<Tensor>>,
    params: Vec<(String, usize)>,
}

impl Gradients {
    /// Gradient with respect to any node that required one. `None` when
    /// the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.adj.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of a named parameter; `None` if unused by the loss.
    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params
            .iter()
            .find(|(n, _)| n == name)
            .and_then(|(_, i)| self.adj[*i].as_ref())
    }

    /// `(name, gradient)` for every parameter leaf, in tape order. Unused
    /// parameters are omitted.
    pub fn params(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params
            .iter()
            .filter_map(|(n, i)| self.adj[*i].as_ref().map(|g| (n.as_str(), g)))
    }
}

/// Compares [`Tape::backward`] against central differences with step
/// `1e-6` and returns the worst relative error over every element of
/// every parameter.
///
/// The relative error of an element is `|analytic - numeric| /
/// max(|analytic|, |numeric|, 1e-2)`; the floor keeps near-zero
/// gradients from turning finite-difference rounding noise into a
/// spurious failure.
pub fn grad_check<F>(params: &[Tensor], f: F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    const H: f64 = 1e-6;
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps
            .iter()
            .enumerate()
            .map(|(i, p)| tape.param(&format!("p{i}"), p.clone()))
            .collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.scalar(out))
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params
        .iter()
        .enumerate()
        .map(|(i, p)| tape.param(&format!("p{i}"), p.clone()))
        .collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut worst = 0.0f64;
    let mut work = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        let analytic = grads
            .wrt(vars[pi])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(p.shape()));
        for e in 0..p.len() {
            let orig = p.data()[e];
            work[pi].data_mut()[e] = orig + H;
            let plus = eval(&work)?;
            work[pi].data_mut()[e] = orig - H;
            let minus = eval(&work)?;
            work[pi].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * H);
            let a = analytic.data()[e];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-2);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
