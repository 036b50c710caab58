use super::{Node, Op, Result, Tensor, TensorError};

fn ensure_finite(op: &'static str, inputs: &[&Tensor]) -> Result<()> {
    for t in inputs {
        if t.data().iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op });
        }
    }
    Ok(())
}

fn ensure_rank(op: &'static str, t: &Tensor, rank: usize) -> Result<()> {
    if t.shape().len() != rank {
        return Err(TensorError::Rank {
            op,
            expected: rank,
            shape: t.shape().to_vec(),
        });
    }
    Ok(())
}

fn ensure_same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn softmax_row(row: &[f64], temperature: f64, out: &mut [f64]) {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v / temperature));
    let mut total = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v / temperature - max).exp();
        total += *o;
    }
    out.iter_mut().for_each(|o| *o /= total);
}

impl Tensor {
    fn elementwise(&self, other: &Tensor, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let name = op.name();
        ensure_same_shape(name, self, other)?;
        ensure_finite(name, &[self, other])?;
        let data = self.data().iter().zip(other.data().iter()).map(|(&a, &b)| f(a, b)).collect();
        Tensor::from_op(data, self.shape().to_vec(), op, vec![self.clone(), other.clone()])
    }

    fn unary(&self, op: Op, f: impl Fn(f64) -> f64) -> Result<Tensor> {
        ensure_finite(op.name(), &[self])?;
        let data = self.data().iter().map(|&v| f(v)).collect();
        Tensor::from_op(data, self.shape().to_vec(), op, vec![self.clone()])
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.elementwise(other, Op::Add, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.elementwise(other, Op::Sub, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.elementwise(other, Op::Mul, |a, b| a * b)
    }

    pub fn scale(&self, factor: f64) -> Result<Tensor> {
        self.unary(Op::Scale(factor), |v| v * factor)
    }

    pub fn add_scalar(&self, value: f64) -> Result<Tensor> {
        self.unary(Op::AddScalar, |v| v + value)
    }

    pub fn relu(&self) -> Result<Tensor> {
        self.unary(Op::Relu, |v| v.max(0.0))
    }

    /// Natural log; non-positive inputs surface as a non-finite error.
    pub fn log(&self) -> Result<Tensor> {
        self.unary(Op::Log, f64::ln)
    }

    /// `sqrt(max(x, 0))` whose gradient is zero wherever `x <= floor`.
    pub fn sqrt_clamped(&self, floor: f64) -> Result<Tensor> {
        self.unary(Op::SqrtClamped(floor), |v| v.max(0.0).sqrt())
    }

    /// `[N, K] x [K, M] -> [N, M]`.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        ensure_rank("matmul", self, 2)?;
        ensure_rank("matmul", rhs, 2)?;
        let (n, k) = (self.shape()[0], self.shape()[1]);
        let (k2, m) = (rhs.shape()[0], rhs.shape()[1]);
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape().to_vec(),
                rhs: rhs.shape().to_vec(),
            });
        }
        ensure_finite("matmul", &[self, rhs])?;
        let out = matmul_raw(&self.data(), &rhs.data(), n, k, m);
        Tensor::from_op(out, vec![n, m], Op::MatMul, vec![self.clone(), rhs.clone()])
    }

    /// Adds a length-`C` bias to every row of an `[N, C]` matrix.
    pub fn add_bias(&self, bias: &Tensor) -> Result<Tensor> {
        ensure_rank("add_bias", self, 2)?;
        ensure_rank("add_bias", bias, 1)?;
        let c = self.shape()[1];
        if bias.shape()[0] != c {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                lhs: self.shape().to_vec(),
                rhs: bias.shape().to_vec(),
            });
        }
        ensure_finite("add_bias", &[self, bias])?;
        let b = bias.data();
        let data = self
            .data()
            .chunks(c)
            .flat_map(|row| row.iter().zip(b.iter()).map(|(x, y)| x + y))
            .collect();
        drop(b);
        Tensor::from_op(data, self.shape().to_vec(), Op::AddBias, vec![self.clone(), bias.clone()])
    }

    /// Row-wise `softmax(x / temperature)` of an `[N, C]` matrix.
    pub fn softmax(&self, temperature: f64) -> Result<Tensor> {
        self.row_normalizer(temperature, Op::Softmax(temperature))
    }

    /// Row-wise `log_softmax(x / temperature)` of an `[N, C]` matrix.
    pub fn log_softmax(&self, temperature: f64) -> Result<Tensor> {
        self.row_normalizer(temperature, Op::LogSoftmax(temperature))
    }

    fn row_normalizer(&self, temperature: f64, op: Op) -> Result<Tensor> {
        let name = op.name();
        ensure_rank(name, self, 2)?;
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(TensorError::InvalidArgument {
                op: name,
                reason: format!("temperature must be positive, got {temperature}"),
            });
        }
        ensure_finite(name, &[self])?;
        let c = self.shape()[1];
        let log = matches!(op, Op::LogSoftmax(_));
        let mut out = vec![0.0; self.numel()];
        for (row, o) in self.data().chunks(c).zip(out.chunks_mut(c)) {
            if log {
                let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v / temperature));
                let lse = row.iter().map(|&v| (v / temperature - max).exp()).sum::<f64>().ln() + max;
                o.iter_mut().zip(row).for_each(|(o, &v)| *o = v / temperature - lse);
            } else {
                softmax_row(row, temperature, o);
            }
        }
        Tensor::from_op(out, self.shape().to_vec(), op, vec![self.clone()])
    }

    pub fn sum(&self) -> Result<Tensor> {
        ensure_finite("sum", &[self])?;
        let total = self.data().iter().sum();
        Tensor::from_op(vec![total], Vec::new(), Op::SumAll, vec![self.clone()])
    }

    pub fn mean(&self) -> Result<Tensor> {
        if self.numel() == 0 {
            return Err(TensorError::InvalidArgument {
                op: "mean",
                reason: "empty tensor".into(),
            });
        }
        ensure_finite("mean", &[self])?;
        let mean = self.data().iter().sum::<f64>() / self.numel() as f64;
        Tensor::from_op(vec![mean], Vec::new(), Op::MeanAll, vec![self.clone()])
    }

    /// `[N, C] -> [N]`, summing each row.
    pub fn sum_rows(&self) -> Result<Tensor> {
        ensure_rank("sum_rows", self, 2)?;
        ensure_finite("sum_rows", &[self])?;
        let c = self.shape()[1];
        let data = self.data().chunks(c).map(|r| r.iter().sum()).collect();
        Tensor::from_op(data, vec![self.shape()[0]], Op::SumRows, vec![self.clone()])
    }

    /// `[N, D] -> [N, N]` matrix of squared Euclidean distances between rows.
    pub fn pairwise_sq_dist(&self) -> Result<Tensor> {
        ensure_rank("pairwise_sq_dist", self, 2)?;
        ensure_finite("pairwise_sq_dist", &[self])?;
        let (n, d) = (self.shape()[0], self.shape()[1]);
        let x = self.data();
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for j in (i + 1)..n {
                let dist: f64 = x[i * d..(i + 1) * d]
                    .iter()
                    .zip(&x[j * d..(j + 1) * d])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                out[i * n + j] = dist;
                out[j * n + i] = dist;
            }
        }
        drop(x);
        Tensor::from_op(out, vec![n, n], Op::PairwiseSqDist, vec![self.clone()])
    }

    /// Concatenates two matrices along the feature axis.
    pub fn concat_cols(&self, other: &Tensor) -> Result<Tensor> {
        ensure_rank("concat_cols", self, 2)?;
        ensure_rank("concat_cols", other, 2)?;
        if self.shape()[0] != other.shape()[0] {
            return Err(TensorError::ShapeMismatch {
                op: "concat_cols",
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            });
        }
        ensure_finite("concat_cols", &[self, other])?;
        let (n, a, b) = (self.shape()[0], self.shape()[1], other.shape()[1]);
        let (x, y) = (self.data(), other.data());
        let mut out = Vec::with_capacity(n * (a + b));
        for i in 0..n {
            out.extend_from_slice(&x[i * a..(i + 1) * a]);
            out.extend_from_slice(&y[i * b..(i + 1) * b]);
        }
        drop((x, y));
        Tensor::from_op(out, vec![n, a + b], Op::ConcatCols, vec![self.clone(), other.clone()])
    }

    /// Picks elements by flat row-major index into a 1-D tensor.
    pub fn gather(&self, indices: &[usize]) -> Result<Tensor> {
        let len = self.numel();
        if let Some(&bad) = indices.iter().find(|&&i| i >= len) {
            return Err(TensorError::Index {
                op: "gather",
                index: bad,
                len,
            });
        }
        ensure_finite("gather", &[self])?;
        let x = self.data();
        let data = indices.iter().map(|&i| x[i]).collect();
        drop(x);
        Tensor::from_op(data, vec![indices.len()], Op::Gather(indices.to_vec()), vec![self.clone()])
    }

    /// Columns `start..end` of an `[N, C]` matrix.
    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Tensor> {
        ensure_rank("slice_cols", self, 2)?;
        let c = self.shape()[1];
        if start >= end || end > c {
            return Err(TensorError::InvalidArgument {
                op: "slice_cols",
                reason: format!("range {start}..{end} invalid for {c} columns"),
            });
        }
        ensure_finite("slice_cols", &[self])?;
        let data = self.data().chunks(c).flat_map(|r| r[start..end].to_vec()).collect();
        Tensor::from_op(
            data,
            vec![self.shape()[0], end - start],
            Op::SliceCols(start, end),
            vec![self.clone()],
        )
    }

    /// Scales every row to unit Euclidean norm.
    pub fn l2_normalize_rows(&self) -> Result<Tensor> {
        ensure_rank("l2_normalize_rows", self, 2)?;
        ensure_finite("l2_normalize_rows", &[self])?;
        let c = self.shape()[1];
        let data = self
            .data()
            .chunks(c)
            .flat_map(|r| {
                let norm = row_norm(r);
                r.iter().map(move |v| v / norm).collect::<Vec<_>>()
            })
            .collect();
        Tensor::from_op(data, self.shape().to_vec(), Op::L2NormalizeRows, vec![self.clone()])
    }

    /// Euclidean norm of each row, `[N, D] -> [N]`, without graph recording.
    pub fn row_norms(&self) -> Vec<f64> {
        let c = self.cols();
        self.data().chunks(c).map(row_norm).collect()
    }
}

const NORM_FLOOR: f64 = 1e-12;

fn row_norm(row: &[f64]) -> f64 {
    row.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_FLOOR)
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            for (o, &bv) in row.iter_mut().zip(&b[p * m..(p + 1) * m]) {
                *o += aip * bv;
            }
        }
    }
    out
}

fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// Gradients for each parent of `node`, given the gradient of its output.
pub(crate) fn backward_node(node: &Node, out: &Tensor, g: &[f64]) -> Vec<Option<Vec<f64>>> {
    let p = &node.parents;
    let wants = |i: usize| p[i].requires_grad();
    match &node.op {
        Op::Add => vec![Some(g.to_vec()), Some(g.to_vec())],
        Op::Sub => vec![Some(g.to_vec()), Some(g.iter().map(|v| -v).collect())],
        Op::Mul => {
            let (a, b) = (p[0].data(), p[1].data());
            let ga = wants(0).then(|| g.iter().zip(b.iter()).map(|(g, b)| g * b).collect());
            let gb = wants(1).then(|| g.iter().zip(a.iter()).map(|(g, a)| g * a).collect());
            vec![ga, gb]
        }
        Op::Scale(f) => vec![Some(g.iter().map(|v| v * f).collect())],
        Op::AddScalar => vec![Some(g.to_vec())],
        Op::Relu => {
            let x = p[0].data();
            vec![Some(g.iter().zip(x.iter()).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect())]
        }
        Op::Log => {
            let x = p[0].data();
            vec![Some(g.iter().zip(x.iter()).map(|(g, x)| g / x).collect())]
        }
        Op::SqrtClamped(floor) => {
            let (x, y) = (p[0].data(), out.data());
            vec![Some(
                g.iter()
                    .zip(x.iter().zip(y.iter()))
                    .map(|(g, (&x, &y))| if x > *floor { g * 0.5 / y } else { 0.0 })
                    .collect(),
            )]
        }
        Op::MatMul => {
            let (a, b) = (p[0].data(), p[1].data());
            let (n, k) = (p[0].shape()[0], p[0].shape()[1]);
            let m = p[1].shape()[1];
            let ga = wants(0).then(|| matmul_raw(g, &transpose(&b, k, m), n, m, k));
            let gb = wants(1).then(|| matmul_raw(&transpose(&a, n, k), g, k, n, m));
            vec![ga, gb]
        }
        Op::AddBias => {
            let c = p[1].numel();
            let gb = wants(1).then(|| {
                let mut acc = vec![0.0; c];
                for row in g.chunks(c) {
                    acc.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                }
                acc
            });
            vec![Some(g.to_vec()), gb]
        }
        Op::Softmax(t) => {
            let y = out.data();
            let c = out.shape()[1];
            let mut gx = vec![0.0; g.len()];
            for ((gr, yr), xr) in g.chunks(c).zip(y.chunks(c)).zip(gx.chunks_mut(c)) {
                let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                xr.iter_mut()
                    .zip(gr.iter().zip(yr))
                    .for_each(|(x, (g, y))| *x = y * (g - dot) / t);
            }
            vec![Some(gx)]
        }
        Op::LogSoftmax(t) => {
            let y = out.data();
            let c = out.shape()[1];
            let mut gx = vec![0.0; g.len()];
            for ((gr, yr), xr) in g.chunks(c).zip(y.chunks(c)).zip(gx.chunks_mut(c)) {
                let total: f64 = gr.iter().sum();
                xr.iter_mut()
                    .zip(gr.iter().zip(yr))
                    .for_each(|(x, (g, y))| *x = (g - y.exp() * total) / t);
            }
            vec![Some(gx)]
        }
        Op::SumAll => vec![Some(vec![g[0]; p[0].numel()])],
        Op::MeanAll => {
            let n = p[0].numel();
            vec![Some(vec![g[0] / n as f64; n])]
        }
        Op::SumRows => {
            let c = p[0].shape()[1];
            vec![Some(g.iter().flat_map(|&v| std::iter::repeat_n(v, c)).collect())]
        }
        Op::PairwiseSqDist => {
            let x = p[0].data();
            let (n, d) = (p[0].shape()[0], p[0].shape()[1]);
            let mut gx = vec![0.0; n * d];
            for i in 0..n {
                for j in 0..n {
                    if i == j {
                        continue;
                    }
                    let w = 2.0 * (g[i * n + j] + g[j * n + i]);
                    if w == 0.0 {
                        continue;
                    }
                    for k in 0..d {
                        gx[i * d + k] += w * (x[i * d + k] - x[j * d + k]);
                    }
                }
            }
            vec![Some(gx)]
        }
        Op::ConcatCols => {
            let (n, a) = (p[0].shape()[0], p[0].shape()[1]);
            let b = p[1].shape()[1];
            let (mut ga, mut gb) = (Vec::with_capacity(n * a), Vec::with_capacity(n * b));
            for row in g.chunks(a + b) {
                ga.extend_from_slice(&row[..a]);
                gb.extend_from_slice(&row[a..]);
            }
            vec![Some(ga), Some(gb)]
        }
        Op::Gather(indices) => {
            let mut gx = vec![0.0; p[0].numel()];
            for (&i, v) in indices.iter().zip(g) {
                gx[i] += v;
            }
            vec![Some(gx)]
        }
        Op::SliceCols(start, end) => {
            let c = p[0].shape()[1];
            let w = end - start;
            let mut gx = vec![0.0; p[0].numel()];
            for (row, gr) in gx.chunks_mut(c).zip(g.chunks(w)) {
                row[*start..*end].copy_from_slice(gr);
            }
            vec![Some(gx)]
        }
        Op::L2NormalizeRows => {
            let (x, y) = (p[0].data(), out.data());
            let c = p[0].shape()[1];
            let mut gx = vec![0.0; g.len()];
            for (((xr, yr), gr), or) in x.chunks(c).zip(y.chunks(c)).zip(g.chunks(c)).zip(gx.chunks_mut(c)) {
                let norm = row_norm(xr);
                let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                or.iter_mut()
                    .zip(gr.iter().zip(yr))
                    .for_each(|(o, (g, y))| *o = (g - y * dot) / norm);
            }
            vec![Some(gx)]
        }
    }
}
