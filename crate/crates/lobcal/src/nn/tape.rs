use super::tensor::{Real, Tensor};
use super::NnError;

const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC_COEF: f64 = 0.044_715;

/// Handle to a node on a [`Tape`]. Only valid for the tape that created it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Scale(Var, Real),
    Transpose(Var),
    Reshape(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    LayerNorm { x: Var, gain: Var, bias: Var },
    Softmax(Var),
    Gelu(Var),
    Mse(Var, Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scale",
            Op::Transpose(..) => "transpose",
            Op::Reshape(..) => "reshape",
            Op::SliceCols(..) => "slice_cols",
            Op::ConcatCols(..) => "concat_cols",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Softmax(..) => "softmax",
            Op::Gelu(..) => "gelu",
            Op::Mse(..) => "mse",
        }
    }
}

enum Value<'a> {
    Owned(Tensor),
    Borrowed(&'a Tensor),
}

impl Value<'_> {
    fn get(&self) -> &Tensor {
        match self {
            Value::Owned(t) => t,
            Value::Borrowed(t) => t,
        }
    }
}

struct Node<'a> {
    value: Value<'a>,
    op: Op,
}

/// Recording of a forward computation. Operations evaluate eagerly and
/// every produced value is checked for NaN/Inf before it is accepted.
/// Parameters can be recorded by reference ([`Tape::leaf_ref`]) so large
/// weight tensors are shared rather than copied per tape.
#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients {
    by_node: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.by_node[var.0].as_ref()
    }

    /// Gradient of `var`, or zeros when the loss never reached it.
    pub fn get_or_zeros(&self, var: Var, rows: usize, cols: usize) -> Tensor {
        match self.by_node[var.0].as_ref() {
            Some(g) => g.clone(),
            None => Tensor::zeros(rows, cols),
        }
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        self.nodes[var.0].value.get()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var, NnError> {
        if !value.is_all_finite() {
            return Err(NnError::NonFinite { op: op.name() });
        }
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records an input or parameter tensor.
    pub fn leaf(&mut self, value: Tensor) -> Result<Var, NnError> {
        self.push(value, Op::Leaf)
    }

    /// Records a parameter tensor by reference, avoiding a copy.
    pub fn leaf_ref(&mut self, value: &'a Tensor) -> Result<Var, NnError> {
        if !value.is_all_finite() {
            return Err(NnError::NonFinite { op: "leaf" });
        }
        self.nodes.push(Node {
            value: Value::Borrowed(value),
            op: Op::Leaf,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (ar, ac) = self.value(a).shape();
        let (br, bc) = self.value(b).shape();
        if ac != br {
            return Err(NnError::Shape {
                op: "matmul",
                detail: format!("{ar}x{ac} . {br}x{bc}"),
            });
        }
        let value = self.value(a).matmul(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.require_same_shape("add", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.require_same_shape("sub", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(value, Op::Sub(a, b))
    }

    /// Broadcasts a single-row tensor over every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var, NnError> {
        let (_, xc) = self.value(x).shape();
        let (rr, rc) = self.value(row).shape();
        if rr != 1 || rc != xc {
            return Err(NnError::Shape {
                op: "add_row",
                detail: format!("row is {rr}x{rc}, x has {xc} columns"),
            });
        }
        let r = self.value(row).data().to_vec();
        let mut value = self.value(x).clone();
        for row_i in 0..value.rows() {
            for (v, rv) in value.row_mut(row_i).iter_mut().zip(&r) {
                *v += rv;
            }
        }
        self.push(value, Op::AddRow(x, row))
    }

    pub fn scale(&mut self, x: Var, factor: Real) -> Result<Var, NnError> {
        let value = self.value(x).map(|v| v * factor);
        self.push(value, Op::Scale(x, factor))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var, NnError> {
        let value = self.value(x).transpose();
        self.push(value, Op::Transpose(x))
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var, NnError> {
        let v = self.value(x);
        if v.len() != rows * cols {
            return Err(NnError::Shape {
                op: "reshape",
                detail: format!("{}x{} -> {rows}x{cols}", v.rows(), v.cols()),
            });
        }
        let value = Tensor::from_vec(rows, cols, v.data().to_vec())?;
        self.push(value, Op::Reshape(x))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, NnError> {
        let v = self.value(x);
        let (rows, cols) = v.shape();
        if start + len > cols || len == 0 {
            return Err(NnError::Shape {
                op: "slice_cols",
                detail: format!("cols {start}..{} of {cols}", start + len),
            });
        }
        let mut value = Tensor::zeros(rows, len);
        for r in 0..rows {
            let src = &v.row(r)[start..start + len];
            value.row_mut(r).copy_from_slice(src);
        }
        self.push(value, Op::SliceCols(x, start))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NnError> {
        if parts.is_empty() {
            return Err(NnError::Invalid("concat_cols of zero tensors".into()));
        }
        let rows = self.value(parts[0]).rows();
        let mut cols = 0;
        for &p in parts {
            let v = self.value(p);
            if v.rows() != rows {
                return Err(NnError::Shape {
                    op: "concat_cols",
                    detail: format!("row counts differ: {} vs {}", rows, v.rows()),
                });
            }
            cols += v.cols();
        }
        let mut value = Tensor::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let w = self.value(p).cols();
            for r in 0..rows {
                let src: &[Real] = self.value(p).row(r);
                value.row_mut(r)[offset..offset + w].copy_from_slice(src);
            }
            offset += w;
        }
        self.push(value, Op::ConcatCols(parts.to_vec()))
    }

    /// Normalizes each row to zero mean and unit variance, then applies
    /// per-column gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var, NnError> {
        let (_, d) = self.value(x).shape();
        for (name, v) in [("gain", gain), ("bias", bias)] {
            let (r, c) = self.value(v).shape();
            if r != 1 || c != d {
                return Err(NnError::Shape {
                    op: "layer_norm",
                    detail: format!("{name} is {r}x{c}, expected 1x{d}"),
                });
            }
        }
        let g = self.value(gain).data().to_vec();
        let b = self.value(bias).data().to_vec();
        let x_val = self.value(x);
        let rows = x_val.rows();
        let mut value = Tensor::zeros(rows, d);
        for r in 0..rows {
            let src = x_val.row(r);
            let (mean, inv_std) = row_moments(src);
            let dst = &mut value.data_mut()[r * d..(r + 1) * d];
            for c in 0..d {
                let norm = ((src[c] as f64 - mean) * inv_std) as Real;
                dst[c] = norm * g[c] + b[c];
            }
        }
        self.push(value, Op::LayerNorm { x, gain, bias })
    }

    /// Row-wise softmax over the last dimension.
    pub fn softmax(&mut self, x: Var) -> Result<Var, NnError> {
        let x_val = self.value(x);
        let (rows, cols) = x_val.shape();
        let mut value = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let src = x_val.row(r);
            let dst = &mut value.data_mut()[r * cols..(r + 1) * cols];
            let mut max = f64::NEG_INFINITY;
            for &v in src {
                max = max.max(v as f64);
            }
            let mut sum = 0.0f64;
            for (d, &v) in dst.iter_mut().zip(src) {
                let e = ((v as f64) - max).exp();
                *d = e as Real;
                sum += e;
            }
            let inv = (1.0 / sum) as Real;
            for d in dst.iter_mut() {
                *d *= inv;
            }
        }
        self.push(value, Op::Softmax(x))
    }

    /// GELU activation (tanh form).
    pub fn gelu(&mut self, x: Var) -> Result<Var, NnError> {
        let value = self.value(x).map(|v| gelu_value(v as f64) as Real);
        self.push(value, Op::Gelu(x))
    }

    /// Mean squared difference over all entries; returns a 1x1 tensor.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.require_same_shape("mse", a, b)?;
        let av = self.value(a);
        let bv = self.value(b);
        let mut acc = 0.0f64;
        for (x, y) in av.data().iter().zip(bv.data()) {
            let d = (*x as f64) - (*y as f64);
            acc += d * d;
        }
        let value = Tensor::scalar((acc / av.len() as f64) as Real);
        self.push(value, Op::Mse(a, b))
    }

    /// Affine map `x . w + b` with `b` broadcast over rows.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var, NnError> {
        let xw = self.matmul(x, w)?;
        self.add_row(xw, b)
    }

    pub fn residual_add(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.add(a, b)
    }

    fn require_same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), NnError> {
        let sa = self.value(a).shape();
        let sb = self.value(b).shape();
        if sa != sb {
            return Err(NnError::Shape {
                op,
                detail: format!("{}x{} vs {}x{}", sa.0, sa.1, sb.0, sb.1),
            });
        }
        Ok(())
    }

    /// Reverse pass from a scalar loss. Visits each node exactly once in
    /// reverse topological (creation) order.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NnError> {
        if self.value(loss).shape() != (1, 1) {
            return Err(NnError::Shape {
                op: "backward",
                detail: format!("loss must be 1x1, got {:?}", self.value(loss).shape()),
            });
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..self.nodes.len()).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !g.is_all_finite() {
                return Err(NnError::NonFiniteGradient { op: node.op.name() });
            }
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    accumulate(&mut grads, *a, g.matmul_nt(self.value(*b)));
                    accumulate(&mut grads, *b, self.value(*a).matmul_tn(&g));
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.clone());
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.map(|v| -v));
                }
                Op::AddRow(x, row) => {
                    let cols = g.cols();
                    let mut acc = vec![0.0f64; cols];
                    for r in 0..g.rows() {
                        for (a, &v) in acc.iter_mut().zip(g.row(r)) {
                            *a += v as f64;
                        }
                    }
                    let row_grad = Tensor::from_vec(
                        1,
                        cols,
                        acc.into_iter().map(|v| v as Real).collect(),
                    )?;
                    accumulate(&mut grads, *x, g.clone());
                    accumulate(&mut grads, *row, row_grad);
                }
                Op::Scale(x, factor) => {
                    let f = *factor;
                    accumulate(&mut grads, *x, g.map(|v| v * f));
                }
                Op::Transpose(x) => {
                    accumulate(&mut grads, *x, g.transpose());
                }
                Op::Reshape(x) => {
                    let (r, c) = self.value(*x).shape();
                    let back = Tensor::from_vec(r, c, g.data().to_vec())?;
                    accumulate(&mut grads, *x, back);
                }
                Op::SliceCols(x, start) => {
                    let (rows, cols) = self.value(*x).shape();
                    let width = g.cols();
                    let mut back = Tensor::zeros(rows, cols);
                    for r in 0..g.rows() {
                        back.row_mut(r)[*start..start + width].copy_from_slice(g.row(r));
                    }
                    accumulate(&mut grads, *x, back);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        let mut part = Tensor::zeros(g.rows(), w);
                        for r in 0..g.rows() {
                            part.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + w]);
                        }
                        accumulate(&mut grads, p, part);
                        offset += w;
                    }
                }
                Op::LayerNorm { x, gain, bias } => {
                    let (dx, dgain, dbias) = layer_norm_backward(
                        self.value(*x),
                        self.value(*gain),
                        &g,
                    );
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *gain, dgain);
                    accumulate(&mut grads, *bias, dbias);
                }
                Op::Softmax(x) => {
                    let y = node.value.get();
                    let (rows, cols) = y.shape();
                    let mut dx = Tensor::zeros(rows, cols);
                    for r in 0..rows {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let mut dot = 0.0f64;
                        for (yv, gv) in yr.iter().zip(gr) {
                            dot += (*gv as f64) * (*yv as f64);
                        }
                        let dst = &mut dx.data_mut()[r * cols..(r + 1) * cols];
                        for c in 0..cols {
                            dst[c] = ((yr[c] as f64) * ((gr[c] as f64) - dot)) as Real;
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Gelu(x) => {
                    let xv = self.value(*x);
                    let dx = Tensor::from_fn(xv.rows(), xv.cols(), |r, c| {
                        (gelu_derivative(xv.get(r, c) as f64) * (g.get(r, c) as f64)) as Real
                    });
                    accumulate(&mut grads, *x, dx);
                }
                Op::Mse(a, b) => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    let scale = (g.get(0, 0) as f64) * 2.0 / av.len() as f64;
                    let da = av.zip_map(bv, |x, y| (((x as f64) - (y as f64)) * scale) as Real);
                    let db = da.map(|v| -v);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { by_node: grads })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], var: Var, contribution: Tensor) {
    match &mut grads[var.0] {
        Some(existing) => existing.scaled_add(1.0, &contribution),
        slot @ None => *slot = Some(contribution),
    }
}

fn row_moments(row: &[Real]) -> (f64, f64) {
    let d = row.len();
    let mut mean = 0.0f64;
    for &v in row {
        mean += v as f64;
    }
    mean /= d as f64;
    let mut var = 0.0f64;
    for &v in row {
        let diff = v as f64 - mean;
        var += diff * diff;
    }
    var /= d as f64;
    (mean, 1.0 / (var + LAYER_NORM_EPS).sqrt())
}

fn layer_norm_backward(x: &Tensor, gain: &Tensor, g: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (rows, d) = x.shape();
    let mut dx = Tensor::zeros(rows, d);
    let mut dgain_acc = vec![0.0f64; d];
    let mut dbias_acc = vec![0.0f64; d];
    let gain_row = gain.row(0).to_vec();
    let mut norm = vec![0.0f64; d];
    let mut h = vec![0.0f64; d];
    for r in 0..rows {
        let xr = x.row(r);
        let gr = g.row(r);
        let (mean, inv_std) = row_moments(xr);
        let mut h_mean = 0.0f64;
        let mut hx_mean = 0.0f64;
        for c in 0..d {
            norm[c] = (xr[c] as f64 - mean) * inv_std;
            h[c] = (gr[c] as f64) * (gain_row[c] as f64);
            h_mean += h[c];
            hx_mean += h[c] * norm[c];
        }
        h_mean /= d as f64;
        hx_mean /= d as f64;
        let dst = &mut dx.data_mut()[r * d..(r + 1) * d];
        for c in 0..d {
            dst[c] = ((h[c] - h_mean - norm[c] * hx_mean) * inv_std) as Real;
            dgain_acc[c] += (gr[c] as f64) * norm[c];
            dbias_acc[c] += gr[c] as f64;
        }
    }
    let dgain = Tensor::from_vec(1, d, dgain_acc.into_iter().map(|v| v as Real).collect())
        .expect("length d");
    let dbias = Tensor::from_vec(1, d, dbias_acc.into_iter().map(|v| v as Real).collect())
        .expect("length d");
    (dx, dgain, dbias)
}

fn gelu_value(x: f64) -> f64 {
    let u = GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC_COEF * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_derivative(x: f64) -> f64 {
    let u = GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC_COEF * x * x * x);
    let t = u.tanh();
    let du = GELU_SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC_COEF * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Projection weights of one multi-head self-attention layer, already on
/// the tape.
#[derive(Clone, Copy)]
pub struct AttentionVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
}

/// Multi-head self-attention over a `[steps, d]` input. Per head,
/// `softmax(Q Kᵀ / sqrt(d_k)) V`; head outputs are concatenated and
/// projected by `wo`. When `capture` is provided, the per-head attention
/// weight matrices are copied into it.
pub fn multi_head_self_attention(
    tape: &mut Tape<'_>,
    h: Var,
    heads: usize,
    params: &AttentionVars,
    mut capture: Option<&mut Vec<Tensor>>,
) -> Result<Var, NnError> {
    let d = tape.value(h).cols();
    if heads == 0 || d % heads != 0 {
        return Err(NnError::Invalid(format!(
            "model width {d} is not divisible by {heads} heads"
        )));
    }
    let d_head = d / heads;
    let q = tape.matmul(h, params.wq)?;
    let k = tape.matmul(h, params.wk)?;
    let v = tape.matmul(h, params.wv)?;
    let scale = (1.0 / (d_head as f64).sqrt()) as Real;

    let mut contexts = Vec::with_capacity(heads);
    for head in 0..heads {
        let start = head * d_head;
        let qh = tape.slice_cols(q, start, d_head)?;
        let kh = tape.slice_cols(k, start, d_head)?;
        let vh = tape.slice_cols(v, start, d_head)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scaled = tape.scale(scores, scale)?;
        let weights = tape.softmax(scaled)?;
        if let Some(sink) = capture.as_deref_mut() {
            sink.push(tape.value(weights).clone());
        }
        contexts.push(tape.matmul(weights, vh)?);
    }
    let merged = tape.concat_cols(&contexts)?;
    tape.matmul(merged, params.wo)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::check::finite_difference_max_rel_err;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
        Tensor::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn affine_identity_passthrough() {
        let mut tape = Tape::new();
        let x = tape
            .leaf(Tensor::from_vec(2, 3, vec![1.0, -2.0, 3.0, 0.5, 0.0, -1.0]).unwrap())
            .unwrap();
        let eye = tape
            .leaf(Tensor::from_fn(3, 3, |r, c| if r == c { 1.0 } else { 0.0 }))
            .unwrap();
        let zero = tape.leaf(Tensor::zeros(1, 3)).unwrap();
        let y = tape.affine(x, eye, zero).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn layer_norm_standardizes_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::new();
        let x = tape.leaf(random_tensor(&mut rng, 5, 16)).unwrap();
        let gain = tape.leaf(Tensor::from_fn(1, 16, |_, _| 1.0)).unwrap();
        let bias = tape.leaf(Tensor::zeros(1, 16)).unwrap();
        let y = tape.layer_norm(x, gain, bias).unwrap();
        let out = tape.value(y);
        for r in 0..5 {
            let mut mean = 0.0;
            let mut var = 0.0;
            for c in 0..16 {
                mean += out.get(r, c) as f64;
            }
            mean /= 16.0;
            for c in 0..16 {
                let d = out.get(r, c) as f64 - mean;
                var += d * d;
            }
            var /= 16.0;
            assert!(mean.abs() < 1e-6, "row mean {mean}");
            assert!((var - 1.0).abs() < 1e-4, "row var {var}");
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut tape = Tape::new();
        let x = tape.leaf(random_tensor(&mut rng, 7, 9)).unwrap();
        let y = tape.softmax(x).unwrap();
        for r in 0..7 {
            let sum: f64 = (0..9).map(|c| tape.value(y).get(r, c) as f64).sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn mse_of_identical_inputs_is_zero() {
        let mut tape = Tape::new();
        let t = Tensor::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let a = tape.leaf(t.clone()).unwrap();
        let b = tape.leaf(t).unwrap();
        let loss = tape.mse(a, b).unwrap();
        assert_eq!(tape.value(loss).get(0, 0), 0.0);
    }

    #[test]
    fn single_token_attention_is_identity_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut tape = Tape::new();
        let h = tape.leaf(random_tensor(&mut rng, 1, 4)).unwrap();
        let params = AttentionVars {
            wq: tape.leaf(random_tensor(&mut rng, 4, 4)).unwrap(),
            wk: tape.leaf(random_tensor(&mut rng, 4, 4)).unwrap(),
            wv: tape.leaf(random_tensor(&mut rng, 4, 4)).unwrap(),
            wo: tape.leaf(random_tensor(&mut rng, 4, 4)).unwrap(),
        };
        let mut captured = Vec::new();
        let out =
            multi_head_self_attention(&mut tape, h, 2, &params, Some(&mut captured)).unwrap();
        assert_eq!(captured.len(), 2);
        for w in &captured {
            assert_eq!(w.shape(), (1, 1));
            assert_eq!(w.get(0, 0), 1.0);
        }
        // output = V . Wo when the single attention weight is 1
        let mut check = Tape::new();
        let hv = check.leaf(tape.value(h).clone()).unwrap();
        let wv = check.leaf(tape.value(params.wv).clone()).unwrap();
        let wo = check.leaf(tape.value(params.wo).clone()).unwrap();
        let v = check.matmul(hv, wv).unwrap();
        let expect = check.matmul(v, wo).unwrap();
        for c in 0..4 {
            assert!((tape.value(out).get(0, c) - check.value(expect).get(0, c)).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_matches_scalar_loop_reference() {
        // tau=3, d=4, one head: independent nested-loop evaluation.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let h = random_tensor(&mut rng, 3, 4);
        let wq = random_tensor(&mut rng, 4, 4);
        let wk = random_tensor(&mut rng, 4, 4);
        let wv = random_tensor(&mut rng, 4, 4);
        let wo = random_tensor(&mut rng, 4, 4);

        let mut tape = Tape::new();
        let hv = tape.leaf(h.clone()).unwrap();
        let params = AttentionVars {
            wq: tape.leaf(wq.clone()).unwrap(),
            wk: tape.leaf(wk.clone()).unwrap(),
            wv: tape.leaf(wv.clone()).unwrap(),
            wo: tape.leaf(wo.clone()).unwrap(),
        };
        let out = multi_head_self_attention(&mut tape, hv, 1, &params, None).unwrap();

        // Scalar reference, written without any Tensor helpers.
        let mm = |a: &Tensor, b: &Tensor| -> Vec<Vec<f64>> {
            let mut out = vec![vec![0.0; b.cols()]; a.rows()];
            for i in 0..a.rows() {
                for j in 0..b.cols() {
                    for k in 0..a.cols() {
                        out[i][j] += a.get(i, k) as f64 * b.get(k, j) as f64;
                    }
                }
            }
            out
        };
        let q = mm(&h, &wq);
        let k = mm(&h, &wk);
        let v = mm(&h, &wv);
        let scale = 1.0 / 2.0; // sqrt(d_k) = 2
        let mut weights = vec![vec![0.0; 3]; 3];
        for i in 0..3 {
            let mut row = vec![0.0; 3];
            for j in 0..3 {
                for c in 0..4 {
                    row[j] += q[i][c] * k[j][c];
                }
                row[j] *= scale;
            }
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|x| (x - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            for j in 0..3 {
                weights[i][j] = exps[j] / sum;
            }
        }
        let mut ctx = vec![vec![0.0; 4]; 3];
        for i in 0..3 {
            for c in 0..4 {
                for j in 0..3 {
                    ctx[i][c] += weights[i][j] * v[j][c];
                }
            }
        }
        let mut expect = vec![vec![0.0; 4]; 3];
        for i in 0..3 {
            for j in 0..4 {
                for c in 0..4 {
                    expect[i][j] += ctx[i][c] * wo.get(c, j) as f64;
                }
            }
        }
        for i in 0..3 {
            for j in 0..4 {
                assert!(
                    ((tape.value(out).get(i, j) as f64) - expect[i][j]).abs() < 1e-10,
                    "mismatch at ({i},{j})"
                );
            }
        }
    }

    #[test]
    fn unreached_parameter_gets_no_gradient() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::scalar(2.0)).unwrap();
        let b = tape.leaf(Tensor::scalar(3.0)).unwrap();
        let unused = tape.leaf(Tensor::scalar(4.0)).unwrap();
        let loss = tape.mse(a, b).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(unused).is_none());
        assert_eq!(grads.get_or_zeros(unused, 1, 1).get(0, 0), 0.0);
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let mut tape = Tape::new();
        let err = tape.leaf(Tensor::scalar(Real::NAN)).unwrap_err();
        assert!(matches!(err, NnError::NonFinite { .. }));
    }

    #[test]
    fn gradients_match_finite_differences_per_primitive() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        // affine + mse
        let inputs = vec![
            random_tensor(&mut rng, 5, 4),
            random_tensor(&mut rng, 4, 3),
            random_tensor(&mut rng, 1, 3),
            random_tensor(&mut rng, 5, 3),
        ];
        let err = finite_difference_max_rel_err(&inputs, 1e-5, |tape, vars| {
            let y = tape.affine(vars[0], vars[1], vars[2])?;
            tape.mse(y, vars[3])
        })
        .unwrap();
        assert!(err < 1e-4, "affine rel err {err}");

        // layer_norm
        let inputs = vec![
            random_tensor(&mut rng, 4, 6),
            random_tensor(&mut rng, 1, 6),
            random_tensor(&mut rng, 1, 6),
            random_tensor(&mut rng, 4, 6),
        ];
        let err = finite_difference_max_rel_err(&inputs, 1e-5, |tape, vars| {
            let y = tape.layer_norm(vars[0], vars[1], vars[2])?;
            tape.mse(y, vars[3])
        })
        .unwrap();
        assert!(err < 1e-4, "layer_norm rel err {err}");

        // softmax
        let inputs = vec![random_tensor(&mut rng, 3, 5), random_tensor(&mut rng, 3, 5)];
        let err = finite_difference_max_rel_err(&inputs, 1e-5, |tape, vars| {
            let y = tape.softmax(vars[0])?;
            tape.mse(y, vars[1])
        })
        .unwrap();
        assert!(err < 1e-4, "softmax rel err {err}");

        // gelu
        let inputs = vec![random_tensor(&mut rng, 3, 5), random_tensor(&mut rng, 3, 5)];
        let err = finite_difference_max_rel_err(&inputs, 1e-5, |tape, vars| {
            let y = tape.gelu(vars[0])?;
            tape.mse(y, vars[1])
        })
        .unwrap();
        assert!(err < 1e-4, "gelu rel err {err}");

        // residual add, transpose, reshape, scale, slice, concat
        let inputs = vec![
            random_tensor(&mut rng, 4, 6),
            random_tensor(&mut rng, 4, 6),
            random_tensor(&mut rng, 6, 4),
        ];
        let err = finite_difference_max_rel_err(&inputs, 1e-5, |tape, vars| {
            let s = tape.residual_add(vars[0], vars[1])?;
            let t = tape.transpose(s)?;
            let left = tape.slice_cols(t, 0, 2)?;
            let right = tape.slice_cols(t, 2, 2)?;
            let swapped = tape.concat_cols(&[right, left])?;
            let scaled = tape.scale(swapped, 0.7)?;
            let flat = tape.reshape(scaled, 6, 4)?;
            tape.mse(flat, vars[2])
        })
        .unwrap();
        assert!(err < 1e-4, "structural ops rel err {err}");

        // multi-head attention end to end
        let inputs = vec![
            random_tensor(&mut rng, 3, 4),
            random_tensor(&mut rng, 4, 4),
            random_tensor(&mut rng, 4, 4),
            random_tensor(&mut rng, 4, 4),
            random_tensor(&mut rng, 4, 4),
            random_tensor(&mut rng, 3, 4),
        ];
        let err = finite_difference_max_rel_err(&inputs, 1e-5, |tape, vars| {
            let params = AttentionVars {
                wq: vars[1],
                wk: vars[2],
                wv: vars[3],
                wo: vars[4],
            };
            let y = multi_head_self_attention(tape, vars[0], 2, &params, None)?;
            tape.mse(y, vars[5])
        })
        .unwrap();
        assert!(err < 1e-4, "attention rel err {err}");
    }

    #[test]
    fn backward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random_tensor(&mut rng, 4, 4);
        let w = random_tensor(&mut rng, 4, 4);
        let y = random_tensor(&mut rng, 4, 4);
        let run = || {
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone()).unwrap();
            let wv = tape.leaf(w.clone()).unwrap();
            let yv = tape.leaf(y.clone()).unwrap();
            let p = tape.matmul(xv, wv).unwrap();
            let loss = tape.mse(p, yv).unwrap();
            let grads = tape.backward(loss).unwrap();
            grads.get(wv).unwrap().clone()
        };
        assert_eq!(run(), run());
    }
}
