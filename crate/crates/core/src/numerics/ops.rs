//! Primitive operators: plain tensor kernels plus their tape-recording
//! counterparts and adjoints.

use std::sync::Arc;

use super::tape::{Node, Op, Tape, Var};
use super::tensor::{matmul_a_bt_into, matmul_at_b_into, Real, Tensor};
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Padding convention of the depthwise sequence convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ConvMode {
    /// Left-pad `K-1`; output `t` only sees inputs `<= t`.
    Causal,
    /// Left-pad `ceil((K-1)/2)`, right-pad `floor((K-1)/2)`.
    Symmetric,
}

impl ConvMode {
    pub fn pad_left(self, k: usize) -> usize {
        match self {
            ConvMode::Causal => k - 1,
            ConvMode::Symmetric => k / 2,
        }
    }
}

impl std::str::FromStr for ConvMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "causal" => Ok(ConvMode::Causal),
            "symmetric" | "causal_free" | "causal-free" => Ok(ConvMode::Symmetric),
            _ => Err(Error::Config(format!("unknown conv mode `{s}`"))),
        }
    }
}

impl std::fmt::Display for ConvMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ConvMode::Causal => "causal",
            ConvMode::Symmetric => "symmetric",
        })
    }
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub fn silu_scalar<T: Real>(x: T) -> T {
    x * sigmoid(x)
}

/// `ln(1 + e^x)` without overflow.
#[inline]
pub fn softplus_scalar<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

pub fn silu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(silu_scalar)
}

pub fn softplus<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(softplus_scalar)
}

/// `x·W (+ b)` for `x: L×Cin`, `W: Cin×Cout`, `b: Cout`.
pub fn linear<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let mut y = x.matmul(w)?;
    if let Some(b) = b {
        add_row_bias_in_place(&mut y, b)?;
    }
    Ok(y)
}

fn add_row_bias_in_place<T: Real>(y: &mut Tensor<T>, b: &Tensor<T>) -> Result<()> {
    let c = y.cols();
    if b.len() != c {
        return Err(Error::dim("bias", y.shape(), b.shape()));
    }
    for row in y.data_mut().chunks_mut(c) {
        for (v, &bv) in row.iter_mut().zip(b.data()) {
            *v += bv;
        }
    }
    Ok(())
}

/// Per-channel convolution along the sequence axis.
pub fn depthwise_conv1d<T: Real>(x: &Tensor<T>, k: &Tensor<T>, mode: ConvMode) -> Result<Tensor<T>> {
    let ksize = k.rows();
    if k.is_empty() || ksize == 0 {
        return Err(Error::Parameter("conv kernel size must be >= 1".into()));
    }
    if k.cols() != x.cols() {
        return Err(Error::dim("depthwise_conv1d", x.shape(), k.shape()));
    }
    let (l, c) = (x.rows(), x.cols());
    let pad = mode.pad_left(ksize) as isize;
    let mut out = vec![T::zero(); l * c];
    let xd = x.data();
    let kd = k.data();
    for t in 0..l {
        let orow = &mut out[t * c..(t + 1) * c];
        for j in 0..ksize {
            let src = t as isize - pad + j as isize;
            if src < 0 || src >= l as isize {
                continue;
            }
            let xrow = &xd[src as usize * c..(src as usize + 1) * c];
            let krow = &kd[j * c..(j + 1) * c];
            for ((o, &xv), &kv) in orow.iter_mut().zip(xrow).zip(krow) {
                *o += kv * xv;
            }
        }
    }
    Tensor::matrix(l, c, out)
}

/// Row-wise normalisation followed by an affine map. Returns the output and
/// the saved `(xhat, rstd)` needed for the adjoint.
pub fn layer_norm<T: Real>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<(Tensor<T>, Vec<T>, Vec<T>)> {
    let (l, c) = (x.rows(), x.cols());
    if gain.len() != c || bias.len() != c {
        return Err(Error::dim("layer_norm", x.shape(), gain.shape()));
    }
    let eps = T::of(LAYER_NORM_EPS);
    let n = T::of(c as f64);
    let mut out = vec![T::zero(); l * c];
    let mut xhat = vec![T::zero(); l * c];
    let mut rstd = vec![T::zero(); l];
    for r in 0..l {
        let row = x.row(r);
        let mean = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let rs = T::one() / (var + eps).sqrt();
        rstd[r] = rs;
        for j in 0..c {
            let h = (row[j] - mean) * rs;
            xhat[r * c + j] = h;
            out[r * c + j] = h * gain.data()[j] + bias.data()[j];
        }
    }
    Ok((Tensor::new(x.shape().to_vec(), out)?, xhat, rstd))
}

pub fn softmax_rows<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let c = x.cols();
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(c) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut s = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    out
}

/// Mean negative log-likelihood over non-ignored rows, plus the softmax
/// probabilities and evaluated row count.
pub fn cross_entropy<T: Real>(
    logits: &Tensor<T>,
    labels: &[i64],
    ignore_label: i64,
) -> Result<(T, Vec<T>, usize)> {
    let (l, k) = (logits.rows(), logits.cols());
    if labels.len() != l {
        return Err(Error::dim("cross_entropy", logits.shape(), &[labels.len()]));
    }
    let probs = softmax_rows(logits).into_data();
    let mut total = T::zero();
    let mut count = 0usize;
    for (r, &lab) in labels.iter().enumerate() {
        if lab == ignore_label {
            continue;
        }
        if lab < 0 || lab as usize >= k {
            return Err(Error::Data(format!(
                "label {lab} at row {r} outside [0, {k})"
            )));
        }
        let row = logits.row(r);
        let (arg, m) = row
            .iter()
            .copied()
            .enumerate()
            .fold((0, T::neg_infinity()), |acc, (j, v)| if v > acc.1 { (j, v) } else { acc });
        // ln Σ exp(x - m) with the max term split out keeps tiny losses exact.
        let rest: T = row
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != arg)
            .map(|(_, &v)| (v - m).exp())
            .sum();
        total += (m - row[lab as usize]) + rest.ln_1p();
        count += 1;
    }
    let loss = if count == 0 {
        T::zero()
    } else {
        total / T::of(count as f64)
    };
    Ok((loss, probs, count))
}

impl<T: Real> Tape<T> {
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b), &[a, b]))
    }

    /// Adds a `[C]` bias to every row.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let mut v = self.value(x).clone();
        add_row_bias_in_place(&mut v, self.value(b))?;
        Ok(self.push(v, Op::AddRowBias(x, b), &[x, b]))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_bias(y, b),
            None => Ok(y),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::dim("add", ta.shape(), tb.shape()));
        }
        let mut v = ta.clone();
        v.add_assign(tb);
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::dim("mul", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).collect();
        let v = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let v = self.value(x).map(|e| e * s);
        self.push(v, Op::Scale(x, s), &[x])
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let v = silu(self.value(x));
        self.push(v, Op::Silu(x), &[x])
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let v = softplus(self.value(x));
        self.push(v, Op::Softplus(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).map(sigmoid);
        self.push(v, Op::Sigmoid(x), &[x])
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (v, xhat, rstd) = layer_norm(self.value(x), self.value(gain), self.value(bias))?;
        Ok(self.push(
            v,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        ))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let v = softmax_rows(self.value(x));
        self.push(v, Op::SoftmaxRows(x), &[x])
    }

    pub fn cross_entropy(&mut self, logits: Var, labels: &[i64], ignore_label: i64) -> Result<Var> {
        let (loss, probs, count) = cross_entropy(self.value(logits), labels, ignore_label)?;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                probs,
                labels: labels.iter().map(|&l| if l == ignore_label { -1 } else { l }).collect(),
                count,
            },
            &[logits],
        ))
    }

    pub fn depthwise_conv1d(&mut self, x: Var, k: Var, mode: ConvMode) -> Result<Var> {
        let v = depthwise_conv1d(self.value(x), self.value(k), mode)?;
        let pad_left = mode.pad_left(self.value(k).rows());
        Ok(self.push(v, Op::Conv1d { x, k, pad_left }, &[x, k]))
    }

    /// `out[i] = x[idx[i]]`; rows may repeat.
    pub fn gather_rows(&mut self, x: Var, idx: Arc<Vec<usize>>) -> Result<Var> {
        let src = self.value(x);
        let c = src.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx.iter() {
            if i >= src.rows() {
                return Err(Error::Range(format!("gather index {i} >= {}", src.rows())));
            }
            data.extend_from_slice(src.row(i));
        }
        let v = Tensor::matrix(idx.len(), c, data)?;
        Ok(self.push(v, Op::GatherRows { x, idx }, &[x]))
    }

    /// Mean of the rows of `x` assigned to each of `groups` targets.
    pub fn scatter_mean(&mut self, x: Var, idx: Arc<Vec<usize>>, groups: usize) -> Result<Var> {
        let src = self.value(x);
        if idx.len() != src.rows() {
            return Err(Error::dim("scatter_mean", src.shape(), &[idx.len()]));
        }
        let c = src.cols();
        let mut counts = vec![0usize; groups];
        let mut data = vec![T::zero(); groups * c];
        for (r, &g) in idx.iter().enumerate() {
            if g >= groups {
                return Err(Error::Range(format!("scatter target {g} >= {groups}")));
            }
            counts[g] += 1;
            for (o, &v) in data[g * c..(g + 1) * c].iter_mut().zip(src.row(r)) {
                *o += v;
            }
        }
        let inv_counts: Vec<T> = counts
            .iter()
            .map(|&n| if n == 0 { T::zero() } else { T::one() / T::of(n as f64) })
            .collect();
        for (g, row) in data.chunks_mut(c).enumerate() {
            row.iter_mut().for_each(|v| *v *= inv_counts[g]);
        }
        let v = Tensor::matrix(groups, c, data)?;
        Ok(self.push(v, Op::ScatterMean { x, idx, inv_counts }, &[x]))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let v = self.value(x).transpose();
        self.push(v, Op::Transpose(x), &[x])
    }

    /// Columns `[start, end)` of a 2D value.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let src = self.value(x);
        if start >= end || end > src.cols() {
            return Err(Error::Range(format!(
                "column slice {start}..{end} of width {}",
                src.cols()
            )));
        }
        let mut data = Vec::with_capacity(src.rows() * (end - start));
        for r in 0..src.rows() {
            data.extend_from_slice(&src.row(r)[start..end]);
        }
        let v = Tensor::matrix(src.rows(), end - start, data)?;
        Ok(self.push(v, Op::SliceCols { x, start }, &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            return Err(Error::dim("concat_cols", self.shape(parts[0]), self.shape(parts[1])));
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let v = Tensor::matrix(rows, total, data)?;
        Ok(self.push(v, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::SumAll(x), &[x])
    }
}

pub(crate) fn op_backward<T: Real>(tape: &Tape<T>, node: &Node<T>, g: &Tensor<T>) -> Vec<(Var, Tensor<T>)> {
    let val = |v: Var| tape.value(v);
    match &node.op {
        Op::Leaf => vec![],
        Op::MatMul(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
            let mut ga = vec![T::zero(); m * k];
            matmul_a_bt_into(g.data(), tb.data(), &mut ga, m, k, n);
            let mut gb = vec![T::zero(); k * n];
            matmul_at_b_into(ta.data(), g.data(), &mut gb, m, k, n);
            vec![
                (*a, Tensor::new(ta.shape().to_vec(), ga).expect("shape")),
                (*b, Tensor::new(tb.shape().to_vec(), gb).expect("shape")),
            ]
        }
        Op::AddRowBias(x, b) => {
            let c = g.cols();
            let mut gb = vec![T::zero(); c];
            for row in g.data().chunks(c) {
                for (o, &v) in gb.iter_mut().zip(row) {
                    *o += v;
                }
            }
            vec![
                (*x, g.clone()),
                (*b, Tensor::new(val(*b).shape().to_vec(), gb).expect("shape")),
            ]
        }
        Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
        Op::Mul(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            let ga = g.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).collect();
            let gb = g.data().iter().zip(ta.data()).map(|(&x, &y)| x * y).collect();
            vec![
                (*a, Tensor::new(g.shape().to_vec(), ga).expect("shape")),
                (*b, Tensor::new(g.shape().to_vec(), gb).expect("shape")),
            ]
        }
        Op::Scale(x, s) => vec![(*x, g.map(|v| v * *s))],
        Op::Silu(x) => {
            let data = g
                .data()
                .iter()
                .zip(val(*x).data())
                .map(|(&gv, &xv)| {
                    let s = sigmoid(xv);
                    gv * s * (T::one() + xv * (T::one() - s))
                })
                .collect();
            vec![(*x, Tensor::new(g.shape().to_vec(), data).expect("shape"))]
        }
        Op::Softplus(x) => {
            let data = g
                .data()
                .iter()
                .zip(val(*x).data())
                .map(|(&gv, &xv)| gv * sigmoid(xv))
                .collect();
            vec![(*x, Tensor::new(g.shape().to_vec(), data).expect("shape"))]
        }
        Op::Sigmoid(x) => {
            let data = g
                .data()
                .iter()
                .zip(node.value.data())
                .map(|(&gv, &s)| gv * s * (T::one() - s))
                .collect();
            vec![(*x, Tensor::new(g.shape().to_vec(), data).expect("shape"))]
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            rstd,
        } => {
            let c = g.cols();
            let n = T::of(c as f64);
            let gd = val(*gain).data();
            let mut gx = vec![T::zero(); g.len()];
            let mut gg = vec![T::zero(); c];
            let mut gbias = vec![T::zero(); c];
            for (r, grow) in g.data().chunks(c).enumerate() {
                let h = &xhat[r * c..(r + 1) * c];
                let mut mean_gh = T::zero();
                let mut mean_ghh = T::zero();
                for j in 0..c {
                    let gh = grow[j] * gd[j];
                    mean_gh += gh;
                    mean_ghh += gh * h[j];
                    gg[j] += grow[j] * h[j];
                    gbias[j] += grow[j];
                }
                mean_gh /= n;
                mean_ghh /= n;
                for j in 0..c {
                    let gh = grow[j] * gd[j];
                    gx[r * c + j] = rstd[r] * (gh - mean_gh - h[j] * mean_ghh);
                }
            }
            vec![
                (*x, Tensor::new(g.shape().to_vec(), gx).expect("shape")),
                (*gain, Tensor::new(val(*gain).shape().to_vec(), gg).expect("shape")),
                (*bias, Tensor::new(val(*bias).shape().to_vec(), gbias).expect("shape")),
            ]
        }
        Op::SoftmaxRows(x) => {
            let c = g.cols();
            let y = node.value.data();
            let mut gx = vec![T::zero(); g.len()];
            for (r, grow) in g.data().chunks(c).enumerate() {
                let yr = &y[r * c..(r + 1) * c];
                let dot: T = grow.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                for j in 0..c {
                    gx[r * c + j] = yr[j] * (grow[j] - dot);
                }
            }
            vec![(*x, Tensor::new(g.shape().to_vec(), gx).expect("shape"))]
        }
        Op::CrossEntropy {
            logits,
            probs,
            labels,
            count,
        } => {
            let shape = val(*logits).shape().to_vec();
            let k = val(*logits).cols();
            let mut gx = vec![T::zero(); probs.len()];
            if *count > 0 {
                let w = g.item() / T::of(*count as f64);
                for (r, &lab) in labels.iter().enumerate() {
                    if lab < 0 {
                        continue;
                    }
                    for j in 0..k {
                        gx[r * k + j] = probs[r * k + j] * w;
                    }
                    gx[r * k + lab as usize] -= w;
                }
            }
            vec![(*logits, Tensor::new(shape, gx).expect("shape"))]
        }
        Op::Conv1d { x, k, pad_left } => {
            let (tx, tk) = (val(*x), val(*k));
            let (l, c, ks) = (tx.rows(), tx.cols(), tk.rows());
            let mut gx = vec![T::zero(); l * c];
            let mut gk = vec![T::zero(); ks * c];
            let pad = *pad_left as isize;
            for t in 0..l {
                let grow = g.row(t);
                for j in 0..ks {
                    let src = t as isize - pad + j as isize;
                    if src < 0 || src >= l as isize {
                        continue;
                    }
                    let s = src as usize;
                    for ch in 0..c {
                        gx[s * c + ch] += grow[ch] * tk.data()[j * c + ch];
                        gk[j * c + ch] += grow[ch] * tx.data()[s * c + ch];
                    }
                }
            }
            vec![
                (*x, Tensor::new(tx.shape().to_vec(), gx).expect("shape")),
                (*k, Tensor::new(tk.shape().to_vec(), gk).expect("shape")),
            ]
        }
        Op::GatherRows { x, idx } => {
            let src = val(*x);
            let c = src.cols();
            let mut gx = vec![T::zero(); src.len()];
            for (r, &i) in idx.iter().enumerate() {
                for (o, &v) in gx[i * c..(i + 1) * c].iter_mut().zip(g.row(r)) {
                    *o += v;
                }
            }
            vec![(*x, Tensor::new(src.shape().to_vec(), gx).expect("shape"))]
        }
        Op::ScatterMean { x, idx, inv_counts } => {
            let src = val(*x);
            let mut gx = Vec::with_capacity(src.len());
            for &grp in idx.iter() {
                gx.extend(g.row(grp).iter().map(|&v| v * inv_counts[grp]));
            }
            vec![(*x, Tensor::new(src.shape().to_vec(), gx).expect("shape"))]
        }
        Op::Transpose(x) => vec![(*x, g.transpose().reshape(val(*x).shape().to_vec()).expect("shape"))],
        Op::SliceCols { x, start } => {
            let src = val(*x);
            let c = src.cols();
            let w = g.cols();
            let mut gx = vec![T::zero(); src.len()];
            for r in 0..src.rows() {
                gx[r * c + start..r * c + start + w].copy_from_slice(g.row(r));
            }
            vec![(*x, Tensor::new(src.shape().to_vec(), gx).expect("shape"))]
        }
        Op::ConcatCols(parts) => {
            let mut offset = 0;
            let mut out = Vec::with_capacity(parts.len());
            for &p in parts {
                let src = val(p);
                let w = src.cols();
                let mut gp = Vec::with_capacity(src.len());
                for r in 0..src.rows() {
                    gp.extend_from_slice(&g.row(r)[offset..offset + w]);
                }
                offset += w;
                out.push((p, Tensor::new(src.shape().to_vec(), gp).expect("shape")));
            }
            out
        }
        Op::SumAll(x) => vec![(*x, Tensor::full(val(*x).shape(), g.item()))],
        Op::Custom { inputs, op } => {
            let ins: Vec<&Tensor<T>> = inputs.iter().map(|&v| val(v)).collect();
            op.backward(&ins, &node.value, g)
                .into_iter()
                .zip(inputs)
                .filter_map(|(grad, &v)| grad.map(|t| (v, t)))
                .collect()
        }
    }
}
