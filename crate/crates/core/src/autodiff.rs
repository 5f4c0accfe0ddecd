//! Minimal reverse-mode differentiation over dense float64 matrices.
//!
//! A `Tape` is an append-only graph of 2-D values; node inputs always precede
//! outputs, so the reverse pass is a single backwards sweep. Broadcasting is
//! limited to row vectors (1 x cols) on the right operand of binary ops, which
//! covers bias addition and per-dimension prior parameters.

use crate::error::{Error, Result};
use crate::special::{normal_cdf, normal_pdf, sigmoid, softplus};

/// Handle to a value on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ValueId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    None,
    /// Right operand is 1 x cols, repeated across rows.
    Row,
}

enum Op {
    Leaf,
    MatMul(ValueId, ValueId),
    Add(ValueId, ValueId, Broadcast),
    Sub(ValueId, ValueId, Broadcast),
    Mul(ValueId, ValueId, Broadcast),
    Div(ValueId, ValueId, Broadcast),
    Neg(ValueId),
    AddScalar(ValueId),
    Scale(ValueId, f64),
    Tanh(ValueId),
    Exp(ValueId),
    Ln(ValueId),
    Softplus(ValueId),
    Square(ValueId),
    NormalCdf(ValueId),
    ClampMin(ValueId, f64),
    SumAll(ValueId),
    MeanAll(ValueId),
    StopGradient,
    ConcatCols(ValueId, ValueId),
}

struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Gradients of one scalar output with respect to tape values.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient w.r.t. `id`; zeros if the value does not affect the output.
    pub fn wrt(&self, id: ValueId, len: usize) -> Vec<f64> {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => vec![0.0; len],
        }
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: ValueId) -> (usize, usize) {
        let n = &self.nodes[id.0];
        (n.rows, n.cols)
    }

    pub fn value(&self, id: ValueId) -> &[f64] {
        &self.nodes[id.0].value
    }

    /// Scalar value of a 1x1 node.
    pub fn scalar(&self, id: ValueId) -> f64 {
        debug_assert_eq!(self.nodes[id.0].value.len(), 1);
        self.nodes[id.0].value[0]
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op, needs_grad: bool) -> ValueId {
        debug_assert_eq!(rows * cols, value.len());
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op,
            needs_grad,
        });
        ValueId(self.nodes.len() - 1)
    }

    fn needs(&self, id: ValueId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Constant input; gradients never flow into it.
    pub fn constant(&mut self, rows: usize, cols: usize, value: Vec<f64>) -> Result<ValueId> {
        if rows * cols != value.len() {
            return Err(Error::ShapeMismatch(format!(
                "constant {rows}x{cols} needs {} values, got {}",
                rows * cols,
                value.len()
            )));
        }
        Ok(self.push(rows, cols, value, Op::Leaf, false))
    }

    /// Differentiable leaf (a parameter).
    pub fn leaf(&mut self, rows: usize, cols: usize, value: Vec<f64>) -> Result<ValueId> {
        if rows * cols != value.len() {
            return Err(Error::ShapeMismatch(format!(
                "leaf {rows}x{cols} needs {} values, got {}",
                rows * cols,
                value.len()
            )));
        }
        Ok(self.push(rows, cols, value, Op::Leaf, true))
    }

    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        if ac != br {
            return Err(Error::ShapeMismatch(format!(
                "matmul {ar}x{ac} * {br}x{bc}"
            )));
        }
        let mut out = vec![0.0; ar * bc];
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        for i in 0..ar {
            for k in 0..ac {
                let aik = av[i * ac + k];
                if aik != 0.0 {
                    let brow = &bv[k * bc..(k + 1) * bc];
                    let orow = &mut out[i * bc..(i + 1) * bc];
                    for (o, &b) in orow.iter_mut().zip(brow) {
                        *o += aik * b;
                    }
                }
            }
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(ar, bc, out, Op::MatMul(a, b), needs))
    }

    fn binary(
        &mut self,
        a: ValueId,
        b: ValueId,
        f: impl Fn(f64, f64) -> f64,
        make: impl Fn(ValueId, ValueId, Broadcast) -> Op,
    ) -> Result<ValueId> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        let bcast = if (ar, ac) == (br, bc) {
            Broadcast::None
        } else if br == 1 && bc == ac {
            Broadcast::Row
        } else {
            return Err(Error::ShapeMismatch(format!(
                "elementwise op on {ar}x{ac} and {br}x{bc} (only row-vector broadcast supported)"
            )));
        };
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let mut out = Vec::with_capacity(ar * ac);
        for i in 0..ar {
            for j in 0..ac {
                let bvij = match bcast {
                    Broadcast::None => bv[i * ac + j],
                    Broadcast::Row => bv[j],
                };
                out.push(f(av[i * ac + j], bvij));
            }
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(ar, ac, out, make(a, b, bcast), needs))
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.binary(a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.binary(a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.binary(a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.binary(a, b, |x, y| x / y, Op::Div)
    }

    fn unary(&mut self, a: ValueId, f: impl Fn(f64) -> f64, op: Op) -> ValueId {
        let (r, c) = self.shape(a);
        let out: Vec<f64> = self.nodes[a.0].value.iter().map(|&x| f(x)).collect();
        let needs = self.needs(a);
        self.push(r, c, out, op, needs)
    }

    pub fn neg(&mut self, a: ValueId) -> ValueId {
        self.unary(a, |x| -x, Op::Neg(a))
    }

    pub fn add_scalar(&mut self, a: ValueId, s: f64) -> ValueId {
        self.unary(a, |x| x + s, Op::AddScalar(a))
    }

    pub fn scale(&mut self, a: ValueId, s: f64) -> ValueId {
        self.unary(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn tanh(&mut self, a: ValueId) -> ValueId {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: ValueId) -> ValueId {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn ln(&mut self, a: ValueId) -> ValueId {
        self.unary(a, f64::ln, Op::Ln(a))
    }

    pub fn softplus(&mut self, a: ValueId) -> ValueId {
        self.unary(a, softplus, Op::Softplus(a))
    }

    pub fn square(&mut self, a: ValueId) -> ValueId {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn normal_cdf(&mut self, a: ValueId) -> ValueId {
        self.unary(a, normal_cdf, Op::NormalCdf(a))
    }

    /// max(x, floor); subgradient 0 on the clamped side.
    pub fn clamp_min(&mut self, a: ValueId, floor: f64) -> ValueId {
        self.unary(a, |x| x.max(floor), Op::ClampMin(a, floor))
    }

    pub fn sum_all(&mut self, a: ValueId) -> ValueId {
        let s: f64 = self.nodes[a.0].value.iter().sum();
        let needs = self.needs(a);
        self.push(1, 1, vec![s], Op::SumAll(a), needs)
    }

    pub fn mean_all(&mut self, a: ValueId) -> ValueId {
        let v = &self.nodes[a.0].value;
        let s: f64 = v.iter().sum::<f64>() / v.len() as f64;
        let needs = self.needs(a);
        self.push(1, 1, vec![s], Op::MeanAll(a), needs)
    }

    /// Passes the value through, blocks gradients to ancestors.
    pub fn stop_gradient(&mut self, a: ValueId) -> ValueId {
        let (r, c) = self.shape(a);
        let v = self.nodes[a.0].value.clone();
        let _ = a;
        self.push(r, c, v, Op::StopGradient, false)
    }

    pub fn concat_cols(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        if ar != br {
            return Err(Error::ShapeMismatch(format!(
                "concat of {ar}x{ac} and {br}x{bc}: row counts differ"
            )));
        }
        let mut out = Vec::with_capacity(ar * (ac + bc));
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        for i in 0..ar {
            out.extend_from_slice(&av[i * ac..(i + 1) * ac]);
            out.extend_from_slice(&bv[i * bc..(i + 1) * bc]);
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(ar, ac + bc, out, Op::ConcatCols(a, b), needs))
    }

    /// Reverse sweep from a scalar output. Accumulation order is fixed by node
    /// order, so repeated backward passes are bit-identical.
    pub fn backward(&mut self, output: ValueId) -> Result<Gradients> {
        let (r, c) = self.shape(output);
        if (r, c) != (1, 1) {
            return Err(Error::invalid(format!(
                "backward requires a scalar output, got {r}x{c}"
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(vec![1.0]);

        for i in (0..self.nodes.len()).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            if !self.nodes[i].needs_grad {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(grads: &mut [Option<Vec<f64>>], id: ValueId, len: usize, add: impl Fn(&mut [f64])) {
        let slot = grads[id.0].get_or_insert_with(|| vec![0.0; len]);
        add(slot);
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let (rows, cols) = (node.rows, node.cols);
        match node.op {
            Op::Leaf => {}
            Op::StopGradient => {}
            Op::MatMul(a, b) => {
                let (ar, ac) = self.shape(a);
                let (_br, bc) = self.shape(b);
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                if self.needs(a) {
                    // dA = dC * B^T
                    Self::accumulate(grads, a, ar * ac, |da| {
                        for i2 in 0..ar {
                            for k in 0..ac {
                                let mut s = 0.0;
                                for j in 0..bc {
                                    s += g[i2 * bc + j] * bv[k * bc + j];
                                }
                                da[i2 * ac + k] += s;
                            }
                        }
                    });
                }
                if self.needs(b) {
                    // dB = A^T * dC
                    Self::accumulate(grads, b, ac * bc, |db| {
                        for k in 0..ac {
                            for i2 in 0..ar {
                                let aik = av[i2 * ac + k];
                                if aik != 0.0 {
                                    for j in 0..bc {
                                        db[k * bc + j] += aik * g[i2 * bc + j];
                                    }
                                }
                            }
                        }
                    });
                }
            }
            Op::Add(a, b, bcast) => {
                self.binary_back(a, b, bcast, rows, cols, g, grads, |_, _| 1.0, |_, _| 1.0);
            }
            Op::Sub(a, b, bcast) => {
                self.binary_back(a, b, bcast, rows, cols, g, grads, |_, _| 1.0, |_, _| -1.0);
            }
            Op::Mul(a, b, bcast) => {
                self.binary_back(a, b, bcast, rows, cols, g, grads, |_, y| y, |x, _| x);
            }
            Op::Div(a, b, bcast) => {
                self.binary_back(
                    a,
                    b,
                    bcast,
                    rows,
                    cols,
                    g,
                    grads,
                    |_, y| 1.0 / y,
                    |x, y| -x / (y * y),
                );
            }
            Op::Neg(a) => self.unary_back(a, &node.value, g, grads, |_x, _o| -1.0),
            Op::AddScalar(a) => self.unary_back(a, &node.value, g, grads, |_x, _o| 1.0),
            Op::Scale(a, s) => self.unary_back(a, &node.value, g, grads, move |_x, _o| s),
            Op::Tanh(a) => self.unary_back(a, &node.value, g, grads, |_x, o| 1.0 - o * o),
            Op::Exp(a) => self.unary_back(a, &node.value, g, grads, |_x, o| o),
            Op::Ln(a) => self.unary_back(a, &node.value, g, grads, |x, _o| 1.0 / x),
            Op::Softplus(a) => self.unary_back(a, &node.value, g, grads, |x, _o| sigmoid(x)),
            Op::Square(a) => self.unary_back(a, &node.value, g, grads, |x, _o| 2.0 * x),
            Op::NormalCdf(a) => self.unary_back(a, &node.value, g, grads, |x, _o| normal_pdf(x)),
            Op::ClampMin(a, floor) => self.unary_back(a, &node.value, g, grads, move |x, _o| {
                if x > floor {
                    1.0
                } else {
                    0.0
                }
            }),
            Op::SumAll(a) => {
                let (r, c) = self.shape(a);
                if self.needs(a) {
                    let s = g[0];
                    Self::accumulate(grads, a, r * c, |da| {
                        for d in da.iter_mut() {
                            *d += s;
                        }
                    });
                }
            }
            Op::MeanAll(a) => {
                let (r, c) = self.shape(a);
                if self.needs(a) {
                    let s = g[0] / (r * c) as f64;
                    Self::accumulate(grads, a, r * c, |da| {
                        for d in da.iter_mut() {
                            *d += s;
                        }
                    });
                }
            }
            Op::ConcatCols(a, b) => {
                let (ar, ac) = self.shape(a);
                let (_, bc) = self.shape(b);
                if self.needs(a) {
                    Self::accumulate(grads, a, ar * ac, |da| {
                        for i2 in 0..ar {
                            for j in 0..ac {
                                da[i2 * ac + j] += g[i2 * (ac + bc) + j];
                            }
                        }
                    });
                }
                if self.needs(b) {
                    Self::accumulate(grads, b, ar * bc, |db| {
                        for i2 in 0..ar {
                            for j in 0..bc {
                                db[i2 * bc + j] += g[i2 * (ac + bc) + ac + j];
                            }
                        }
                    });
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn binary_back(
        &self,
        a: ValueId,
        b: ValueId,
        bcast: Broadcast,
        rows: usize,
        cols: usize,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        dfda: impl Fn(f64, f64) -> f64,
        dfdb: impl Fn(f64, f64) -> f64,
    ) {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let bval = |i: usize, j: usize| match bcast {
            Broadcast::None => bv[i * cols + j],
            Broadcast::Row => bv[j],
        };
        if self.needs(a) {
            Self::accumulate(grads, a, rows * cols, |da| {
                for i in 0..rows {
                    for j in 0..cols {
                        let idx = i * cols + j;
                        da[idx] += g[idx] * dfda(av[idx], bval(i, j));
                    }
                }
            });
        }
        if self.needs(b) {
            let blen = match bcast {
                Broadcast::None => rows * cols,
                Broadcast::Row => cols,
            };
            Self::accumulate(grads, b, blen, |db| {
                for i in 0..rows {
                    for j in 0..cols {
                        let idx = i * cols + j;
                        let contrib = g[idx] * dfdb(av[idx], bval(i, j));
                        match bcast {
                            Broadcast::None => db[idx] += contrib,
                            Broadcast::Row => db[j] += contrib,
                        }
                    }
                }
            });
        }
    }

    /// `out_vals` are the forward values of the op being differentiated;
    /// `dfdx` maps (input, output) to the local derivative.
    fn unary_back(
        &self,
        a: ValueId,
        out_vals: &[f64],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        dfdx: impl Fn(f64, f64) -> f64,
    ) {
        if !self.needs(a) {
            return;
        }
        let av = &self.nodes[a.0].value;
        let (r, c) = self.shape(a);
        Self::accumulate(grads, a, r * c, |da| {
            for idx in 0..g.len() {
                da[idx] += g[idx] * dfdx(av[idx], out_vals[idx]);
            }
        });
    }
}
