use std::ops::Range;

use super::gemm::{gemm, View};
use super::Tensor;
use crate::error::{Error, Result};

/// Norms at or below this are rejected by [`Tensor::l2_normalize`].
pub const NORM_EPS: f64 = 1e-12;

/// The recorded producer of a non-leaf tensor.
pub(crate) enum Op {
    MatMul(Tensor, Tensor),
    Transpose(Tensor),
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    AddRow(Tensor, Tensor),
    Scale(Tensor, f64),
    Exp(Tensor),
    Ln(Tensor),
    Relu(Tensor),
    Sum(Tensor),
    SumAxis { input: Tensor, axis: usize },
    Softmax { input: Tensor, axis: usize },
    LogSoftmax { input: Tensor, axis: usize },
    LogSumExp { input: Tensor, axis: usize },
    L2Normalize { input: Tensor, axis: usize, norms: Vec<f64> },
    Reshape(Tensor),
    Gather { input: Tensor, index: Vec<Option<usize>> },
    CatRows(Vec<Tensor>),
    SegmentMean { input: Tensor, spans: Vec<Range<usize>> },
    SegmentLogSumExp { input: Tensor, spans: Vec<Range<usize>> },
    SegmentAttention {
        q: Tensor,
        k: Tensor,
        v: Tensor,
        spans: Vec<Range<usize>>,
        scale: f64,
        probs: Vec<Vec<f64>>,
    },
}

/// (outer, len, inner) strides for reducing along `axis`.
fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::Axis { axis, rank: shape.len() });
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s: Vec<usize> = shape.to_vec();
    s.remove(axis);
    if s.is_empty() {
        s.push(1);
    }
    s
}

fn dims2(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        &[r, c] => Ok((r, c)),
        s => Err(Error::shape(op, format!("expected a matrix, got shape {s:?}"))),
    }
}

fn same_shape(a: &Tensor, b: &Tensor, op: &'static str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn check_finite(t: &Tensor) -> Result<()> {
    if t.data().iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite)
    }
}

fn check_spans(spans: &[Range<usize>], n: usize, op: &'static str) -> Result<()> {
    for s in spans {
        if s.start >= s.end || s.end > n {
            return Err(Error::shape(op, format!("bad span {s:?} for {n} rows")));
        }
    }
    Ok(())
}

/// Transposes a row-major `rows × cols` buffer.
fn transpose_buf(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = data[r * cols + c];
        }
    }
    out
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

impl Tensor {
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = dims2(self, "matmul")?;
        let (k2, n) = dims2(other, "matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("{m}x{k} · {k2}x{n}")));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, View::rows(self.data(), k), View::rows(other.data(), n), &mut out, false);
        Ok(Tensor::from_op(out, vec![m, n], Op::MatMul(self.clone(), other.clone())))
    }

    /// Matrix transpose.
    pub fn t(&self) -> Result<Tensor> {
        let (r, c) = dims2(self, "transpose")?;
        let out = transpose_buf(self.data(), r, c);
        Ok(Tensor::from_op(out, vec![c, r], Op::Transpose(self.clone())))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        same_shape(self, other, "add")?;
        let out = self.data().iter().zip(other.data()).map(|(a, b)| a + b).collect();
        Ok(Tensor::from_op(out, self.shape().to_vec(), Op::Add(self.clone(), other.clone())))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        same_shape(self, other, "sub")?;
        let out = self.data().iter().zip(other.data()).map(|(a, b)| a - b).collect();
        Ok(Tensor::from_op(out, self.shape().to_vec(), Op::Sub(self.clone(), other.clone())))
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        same_shape(self, other, "mul")?;
        let out = self.data().iter().zip(other.data()).map(|(a, b)| a * b).collect();
        Ok(Tensor::from_op(out, self.shape().to_vec(), Op::Mul(self.clone(), other.clone())))
    }

    /// Adds a length-`n` vector to every row of an `m × n` matrix.
    pub fn add_row(&self, bias: &Tensor) -> Result<Tensor> {
        let (m, n) = dims2(self, "add_row")?;
        if bias.len() != n {
            return Err(Error::shape("add_row", format!("bias of {} for {m}x{n}", bias.len())));
        }
        let mut out = self.to_vec();
        for row in out.chunks_mut(n) {
            row.iter_mut().zip(bias.data()).for_each(|(v, b)| *v += b);
        }
        Ok(Tensor::from_op(out, vec![m, n], Op::AddRow(self.clone(), bias.clone())))
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let out = self.data().iter().map(|v| v * c).collect();
        Tensor::from_op(out, self.shape().to_vec(), Op::Scale(self.clone(), c))
    }

    pub fn exp(&self) -> Tensor {
        let out = self.data().iter().map(|v| v.exp()).collect();
        Tensor::from_op(out, self.shape().to_vec(), Op::Exp(self.clone()))
    }

    /// Natural log; every entry must be strictly positive.
    pub fn ln(&self) -> Result<Tensor> {
        if self.data().iter().any(|&v| v <= 0.0 || !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        let out = self.data().iter().map(|v| v.ln()).collect();
        Ok(Tensor::from_op(out, self.shape().to_vec(), Op::Ln(self.clone())))
    }

    pub fn relu(&self) -> Tensor {
        let out = self.data().iter().map(|&v| if v > 0.0 || v.is_nan() { v } else { 0.0 }).collect();
        Tensor::from_op(out, self.shape().to_vec(), Op::Relu(self.clone()))
    }

    /// Sum of all entries, as a one-element tensor.
    pub fn sum(&self) -> Tensor {
        let s = self.data().iter().sum();
        Tensor::from_op(vec![s], vec![1], Op::Sum(self.clone()))
    }

    pub fn mean(&self) -> Tensor {
        let n = self.len() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sums along `axis`, removing it.
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        let (outer, len, inner) = axis_split(self.shape(), axis)?;
        let x = self.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    out[o * inner + i] += x[base + i];
                }
            }
        }
        let shape = reduced_shape(self.shape(), axis);
        Ok(Tensor::from_op(out, shape, Op::SumAxis { input: self.clone(), axis }))
    }

    /// Softmax along `axis`, computed with max-subtraction.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        let (outer, len, inner) = axis_split(self.shape(), axis)?;
        check_finite(self)?;
        let x = self.data();
        let mut out = vec![0.0; x.len()];
        let mut buf = vec![0.0; len];
        for o in 0..outer {
            for i in 0..inner {
                for l in 0..len {
                    buf[l] = x[(o * len + l) * inner + i];
                }
                softmax_in_place(&mut buf);
                for l in 0..len {
                    out[(o * len + l) * inner + i] = buf[l];
                }
            }
        }
        Ok(Tensor::from_op(out, self.shape().to_vec(), Op::Softmax { input: self.clone(), axis }))
    }

    pub fn log_softmax(&self, axis: usize) -> Result<Tensor> {
        let (outer, len, inner) = axis_split(self.shape(), axis)?;
        check_finite(self)?;
        let x = self.data();
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let max = (0..len).map(|l| x[at(l)]).fold(f64::NEG_INFINITY, f64::max);
                let lse = max + (0..len).map(|l| (x[at(l)] - max).exp()).sum::<f64>().ln();
                for l in 0..len {
                    out[at(l)] = x[at(l)] - lse;
                }
            }
        }
        Ok(Tensor::from_op(out, self.shape().to_vec(), Op::LogSoftmax { input: self.clone(), axis }))
    }

    /// `log Σ exp(x)` along `axis`, removing it.
    pub fn logsumexp(&self, axis: usize) -> Result<Tensor> {
        let (outer, len, inner) = axis_split(self.shape(), axis)?;
        check_finite(self)?;
        let x = self.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let max = (0..len).map(|l| x[at(l)]).fold(f64::NEG_INFINITY, f64::max);
                out[o * inner + i] = max + (0..len).map(|l| (x[at(l)] - max).exp()).sum::<f64>().ln();
            }
        }
        let shape = reduced_shape(self.shape(), axis);
        Ok(Tensor::from_op(out, shape, Op::LogSumExp { input: self.clone(), axis }))
    }

    /// Scales every slice along `axis` to unit L2 norm.
    pub fn l2_normalize(&self, axis: usize) -> Result<Tensor> {
        let (outer, len, inner) = axis_split(self.shape(), axis)?;
        let x = self.data();
        let mut norms = vec![0.0; outer * inner];
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let n = (0..len).map(|l| x[at(l)] * x[at(l)]).sum::<f64>().sqrt();
                if !n.is_finite() {
                    return Err(Error::NonFinite);
                }
                if n <= NORM_EPS {
                    return Err(Error::ZeroNorm);
                }
                norms[o * inner + i] = n;
                for l in 0..len {
                    out[at(l)] = x[at(l)] / n;
                }
            }
        }
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            Op::L2Normalize { input: self.clone(), axis, norms },
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        super::check_shape(shape, self.len())?;
        Ok(Tensor::from_op(self.to_vec(), shape.to_vec(), Op::Reshape(self.clone())))
    }

    /// Builds a tensor of `shape` whose flat entry `j` is `self[index[j]]`,
    /// or zero where `index[j]` is `None`.
    pub fn gather(&self, index: Vec<Option<usize>>, shape: &[usize]) -> Result<Tensor> {
        super::check_shape(shape, index.len())?;
        let x = self.data();
        let mut out = Vec::with_capacity(index.len());
        for &ix in &index {
            match ix {
                Some(i) if i < x.len() => out.push(x[i]),
                Some(i) => return Err(Error::shape("gather", format!("index {i} of {}", x.len()))),
                None => out.push(0.0),
            }
        }
        Ok(Tensor::from_op(out, shape.to_vec(), Op::Gather { input: self.clone(), index }))
    }

    /// Rows `rows` of a matrix, in the given order (repeats allowed).
    pub fn select_rows(&self, rows: &[usize]) -> Result<Tensor> {
        let (r, c) = dims2(self, "select_rows")?;
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(Error::shape("select_rows", format!("row {bad} of {r}")));
        }
        let index = rows.iter().flat_map(|&i| (0..c).map(move |j| Some(i * c + j))).collect();
        self.gather(index, &[rows.len(), c])
    }

    pub fn slice_rows(&self, range: Range<usize>) -> Result<Tensor> {
        let rows: Vec<usize> = range.collect();
        self.select_rows(&rows)
    }

    /// The `i`-th flat entry as a one-element tensor.
    pub fn take(&self, i: usize) -> Result<Tensor> {
        self.gather(vec![Some(i)], &[1])
    }

    /// Stacks tensors along their first axis; trailing dims must agree.
    pub fn cat_rows(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("cat_rows", "no tensors"))?;
        let tail = &first.shape()[1..];
        let mut rows = 0;
        for p in parts {
            if p.rank() != first.rank() || &p.shape()[1..] != tail {
                return Err(Error::shape("cat_rows", format!("{:?} vs {:?}", p.shape(), first.shape())));
            }
            rows += p.shape()[0];
        }
        let mut out = Vec::with_capacity(parts.iter().map(Tensor::len).sum());
        for p in parts {
            out.extend_from_slice(p.data());
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(tail);
        Ok(Tensor::from_op(out, shape, Op::CatRows(parts.to_vec())))
    }

    /// Mean of each row span of a matrix: `n × k` → `spans.len() × k`.
    pub fn segment_mean(&self, spans: &[Range<usize>]) -> Result<Tensor> {
        let (n, k) = dims2(self, "segment_mean")?;
        check_spans(spans, n, "segment_mean")?;
        let x = self.data();
        let mut out = vec![0.0; spans.len() * k];
        for (s, span) in spans.iter().enumerate() {
            let row = &mut out[s * k..(s + 1) * k];
            for r in span.clone() {
                row.iter_mut().zip(&x[r * k..(r + 1) * k]).for_each(|(o, v)| *o += v);
            }
            let inv = 1.0 / span.len() as f64;
            row.iter_mut().for_each(|o| *o *= inv);
        }
        Ok(Tensor::from_op(
            out,
            vec![spans.len(), k],
            Op::SegmentMean { input: self.clone(), spans: spans.to_vec() },
        ))
    }

    /// `log Σ exp` over each span of the flattened entries.
    pub fn segment_logsumexp(&self, spans: &[Range<usize>]) -> Result<Tensor> {
        check_spans(spans, self.len(), "segment_logsumexp")?;
        check_finite(self)?;
        let x = self.data();
        let out = spans
            .iter()
            .map(|span| {
                let seg = &x[span.clone()];
                let max = seg.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                max + seg.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
            })
            .collect();
        Ok(Tensor::from_op(
            out,
            vec![spans.len()],
            Op::SegmentLogSumExp { input: self.clone(), spans: spans.to_vec() },
        ))
    }

    /// Scaled dot-product self-attention applied independently within each
    /// row span: for span rows, `softmax(scale · Q Kᵀ) V`. Spans must
    /// partition the rows.
    pub fn segment_attention(
        q: &Tensor,
        k: &Tensor,
        v: &Tensor,
        spans: &[Range<usize>],
        scale: f64,
    ) -> Result<Tensor> {
        let (n, d) = dims2(q, "segment_attention")?;
        let (nk, dk) = dims2(k, "segment_attention")?;
        let (nv, dv) = dims2(v, "segment_attention")?;
        if nk != n || nv != n || dk != d {
            return Err(Error::shape(
                "segment_attention",
                format!("q {n}x{d}, k {nk}x{dk}, v {nv}x{dv}"),
            ));
        }
        let mut cursor = 0;
        for s in spans {
            if s.start != cursor || s.end <= s.start {
                return Err(Error::shape("segment_attention", "spans must partition the rows"));
            }
            cursor = s.end;
        }
        if cursor != n {
            return Err(Error::shape("segment_attention", "spans must partition the rows"));
        }
        let mut out = vec![0.0; n * dv];
        let mut probs = Vec::with_capacity(spans.len());
        for span in spans {
            let (r0, len) = (span.start, span.len());
            let mut p = vec![0.0; len * len];
            gemm(
                len,
                d,
                len,
                View::rows(&q.data()[r0 * d..], d),
                View::transposed(&k.data()[r0 * d..], d),
                &mut p,
                false,
            );
            for row in p.chunks_mut(len) {
                row.iter_mut().for_each(|x| *x *= scale);
                softmax_in_place(row);
            }
            gemm(
                len,
                len,
                dv,
                View::rows(&p, len),
                View::rows(&v.data()[r0 * dv..], dv),
                &mut out[r0 * dv..(r0 + len) * dv],
                false,
            );
            probs.push(p);
        }
        Ok(Tensor::from_op(
            out,
            vec![n, dv],
            Op::SegmentAttention {
                q: q.clone(),
                k: k.clone(),
                v: v.clone(),
                spans: spans.to_vec(),
                scale,
                probs,
            },
        ))
    }
}

impl Op {
    pub(crate) fn parents(&self) -> Vec<&Tensor> {
        match self {
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddRow(a, b) => {
                vec![a, b]
            }
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::Exp(a)
            | Op::Ln(a)
            | Op::Relu(a)
            | Op::Sum(a)
            | Op::Reshape(a) => vec![a],
            Op::SumAxis { input, .. }
            | Op::Softmax { input, .. }
            | Op::LogSoftmax { input, .. }
            | Op::LogSumExp { input, .. }
            | Op::L2Normalize { input, .. }
            | Op::Gather { input, .. }
            | Op::SegmentMean { input, .. }
            | Op::SegmentLogSumExp { input, .. } => vec![input],
            Op::CatRows(parts) => parts.iter().collect(),
            Op::SegmentAttention { q, k, v, .. } => vec![q, k, v],
        }
    }

    /// Emits the gradient contribution to each parent given the gradient `g`
    /// of the output `out`.
    pub(crate) fn backward(&self, out: &Tensor, g: &[f64], emit: &mut dyn FnMut(&Tensor, Vec<f64>)) {
        match self {
            Op::MatMul(a, b) => {
                let (m, k) = (a.shape()[0], a.shape()[1]);
                let n = b.shape()[1];
                if a.requires_grad() {
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, View::rows(g, n), View::transposed(b.data(), n), &mut ga, false);
                    emit(a, ga);
                }
                if b.requires_grad() {
                    let mut gb = vec![0.0; k * n];
                    gemm(k, m, n, View::transposed(a.data(), k), View::rows(g, n), &mut gb, false);
                    emit(b, gb);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (a.shape()[0], a.shape()[1]);
                emit(a, transpose_buf(g, c, r));
            }
            Op::Add(a, b) => {
                emit(a, g.to_vec());
                emit(b, g.to_vec());
            }
            Op::Sub(a, b) => {
                emit(a, g.to_vec());
                emit(b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                if a.requires_grad() {
                    emit(a, g.iter().zip(b.data()).map(|(g, b)| g * b).collect());
                }
                if b.requires_grad() {
                    emit(b, g.iter().zip(a.data()).map(|(g, a)| g * a).collect());
                }
            }
            Op::AddRow(a, bias) => {
                emit(a, g.to_vec());
                if bias.requires_grad() {
                    let n = bias.len();
                    let mut gb = vec![0.0; n];
                    for row in g.chunks(n) {
                        gb.iter_mut().zip(row).for_each(|(acc, v)| *acc += v);
                    }
                    emit(bias, gb);
                }
            }
            Op::Scale(a, c) => emit(a, g.iter().map(|v| v * c).collect()),
            Op::Exp(a) => emit(a, g.iter().zip(out.data()).map(|(g, y)| g * y).collect()),
            Op::Ln(a) => emit(a, g.iter().zip(a.data()).map(|(g, x)| g / x).collect()),
            Op::Relu(a) => emit(
                a,
                g.iter()
                    .zip(a.data())
                    .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
                    .collect(),
            ),
            Op::Sum(a) => emit(a, vec![g[0]; a.len()]),
            Op::SumAxis { input, axis } => {
                let (outer, len, inner) = axis_split(input.shape(), *axis).expect("checked in forward");
                let mut gi = vec![0.0; input.len()];
                for o in 0..outer {
                    for l in 0..len {
                        for i in 0..inner {
                            gi[(o * len + l) * inner + i] = g[o * inner + i];
                        }
                    }
                }
                emit(input, gi);
            }
            Op::Softmax { input, axis } => {
                let (outer, len, inner) = axis_split(input.shape(), *axis).expect("checked in forward");
                let y = out.data();
                let mut gi = vec![0.0; input.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |l: usize| (o * len + l) * inner + i;
                        let dot: f64 = (0..len).map(|l| g[at(l)] * y[at(l)]).sum();
                        for l in 0..len {
                            gi[at(l)] = y[at(l)] * (g[at(l)] - dot);
                        }
                    }
                }
                emit(input, gi);
            }
            Op::LogSoftmax { input, axis } => {
                let (outer, len, inner) = axis_split(input.shape(), *axis).expect("checked in forward");
                let y = out.data();
                let mut gi = vec![0.0; input.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |l: usize| (o * len + l) * inner + i;
                        let total: f64 = (0..len).map(|l| g[at(l)]).sum();
                        for l in 0..len {
                            gi[at(l)] = g[at(l)] - y[at(l)].exp() * total;
                        }
                    }
                }
                emit(input, gi);
            }
            Op::LogSumExp { input, axis } => {
                let (outer, len, inner) = axis_split(input.shape(), *axis).expect("checked in forward");
                let x = input.data();
                let y = out.data();
                let mut gi = vec![0.0; input.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let r = o * inner + i;
                        for l in 0..len {
                            let at = (o * len + l) * inner + i;
                            gi[at] = g[r] * (x[at] - y[r]).exp();
                        }
                    }
                }
                emit(input, gi);
            }
            Op::L2Normalize { input, axis, norms } => {
                let (outer, len, inner) = axis_split(input.shape(), *axis).expect("checked in forward");
                let y = out.data();
                let mut gi = vec![0.0; input.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |l: usize| (o * len + l) * inner + i;
                        let n = norms[o * inner + i];
                        let dot: f64 = (0..len).map(|l| g[at(l)] * y[at(l)]).sum();
                        for l in 0..len {
                            gi[at(l)] = (g[at(l)] - y[at(l)] * dot) / n;
                        }
                    }
                }
                emit(input, gi);
            }
            Op::Reshape(a) => emit(a, g.to_vec()),
            Op::Gather { input, index } => {
                let mut gi = vec![0.0; input.len()];
                for (j, ix) in index.iter().enumerate() {
                    if let Some(i) = ix {
                        gi[*i] += g[j];
                    }
                }
                emit(input, gi);
            }
            Op::CatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = p.len();
                    if p.requires_grad() {
                        emit(p, g[offset..offset + n].to_vec());
                    }
                    offset += n;
                }
            }
            Op::SegmentMean { input, spans } => {
                let k = input.shape()[1];
                let mut gi = vec![0.0; input.len()];
                for (s, span) in spans.iter().enumerate() {
                    let inv = 1.0 / span.len() as f64;
                    let gs = &g[s * k..(s + 1) * k];
                    for r in span.clone() {
                        gi[r * k..(r + 1) * k]
                            .iter_mut()
                            .zip(gs)
                            .for_each(|(acc, v)| *acc += v * inv);
                    }
                }
                emit(input, gi);
            }
            Op::SegmentLogSumExp { input, spans } => {
                let x = input.data();
                let y = out.data();
                let mut gi = vec![0.0; input.len()];
                for (s, span) in spans.iter().enumerate() {
                    for r in span.clone() {
                        gi[r] += g[s] * (x[r] - y[s]).exp();
                    }
                }
                emit(input, gi);
            }
            Op::SegmentAttention { q, k, v, spans, scale, probs } => {
                let d = q.shape()[1];
                let dv = v.shape()[1];
                let n = q.shape()[0];
                let mut gq = vec![0.0; n * d];
                let mut gk = vec![0.0; n * d];
                let mut gv = vec![0.0; n * dv];
                for (span, p) in spans.iter().zip(probs) {
                    let (r0, len) = (span.start, span.len());
                    let go = &g[r0 * dv..(r0 + len) * dv];
                    let vs = &v.data()[r0 * dv..(r0 + len) * dv];
                    gemm(
                        len,
                        len,
                        dv,
                        View::transposed(p, len),
                        View::rows(go, dv),
                        &mut gv[r0 * dv..(r0 + len) * dv],
                        false,
                    );
                    let mut dp = vec![0.0; len * len];
                    gemm(len, dv, len, View::rows(go, dv), View::transposed(vs, dv), &mut dp, false);
                    // dS = P ∘ (dP − rowsum(dP ∘ P)), folded with the scale
                    for (dp_row, p_row) in dp.chunks_mut(len).zip(p.chunks(len)) {
                        let dot: f64 = dp_row.iter().zip(p_row).map(|(a, b)| a * b).sum();
                        dp_row
                            .iter_mut()
                            .zip(p_row)
                            .for_each(|(x, &pv)| *x = scale * pv * (*x - dot));
                    }
                    gemm(
                        len,
                        len,
                        d,
                        View::rows(&dp, len),
                        View::rows(&k.data()[r0 * d..], d),
                        &mut gq[r0 * d..(r0 + len) * d],
                        false,
                    );
                    gemm(
                        len,
                        len,
                        d,
                        View::transposed(&dp, len),
                        View::rows(&q.data()[r0 * d..], d),
                        &mut gk[r0 * d..(r0 + len) * d],
                        false,
                    );
                }
                emit(q, gq);
                emit(k, gk);
                emit(v, gv);
            }
        }
    }
}
