use super::kernels::{gelu, gemm_acc, gemm_tn_acc, transpose};
use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::TensorF;

/// Additive mask value that excludes an entry from a softmax row.
///
/// The most negative finite `f64`, so max-subtraction never produces NaN.
pub const MASK_SENTINEL: f64 = f64::MIN;

pub fn is_masked(m: f64) -> bool {
    m <= MASK_SENTINEL
}

const LN_EPS: f64 = 1e-5;

pub(super) enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
        /// (a batch, b batch) for every output batch.
        pairs: Vec<(usize, usize)>,
    },
    Add {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        factor: f64,
    },
    Softmax {
        x: Var,
    },
    GatherRows {
        x: Var,
        rows: usize,
        index: Vec<usize>,
    },
    PadRows {
        x: Var,
        rows: usize,
        pad: usize,
    },
    SliceRows {
        x: Var,
        rows: usize,
        start: usize,
        len: usize,
    },
    Reshape {
        x: Var,
    },
    TransposeLast2 {
        x: Var,
    },
    SwapAxes12 {
        x: Var,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols {
        xs: Vec<Var>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu {
        x: Var,
        slope: Vec<f64>,
    },
    GroupMean {
        x: Var,
        group_len: usize,
        valid: Vec<usize>,
    },
    DepthwiseConv3x3 {
        x: Var,
        kernels: Var,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    WeightedSum {
        x: Var,
        weights: Vec<f64>,
    },
}

impl Op {
    pub(super) fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul { a, b, .. } | Add { a, b } => vec![*a, *b],
            Scale { x, .. }
            | Softmax { x }
            | GatherRows { x, .. }
            | PadRows { x, .. }
            | SliceRows { x, .. }
            | Reshape { x }
            | TransposeLast2 { x }
            | SwapAxes12 { x }
            | SliceCols { x, .. }
            | Gelu { x, .. }
            | GroupMean { x, .. }
            | WeightedSum { x, .. } => vec![*x],
            ConcatCols { xs } => xs.clone(),
            LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            DepthwiseConv3x3 { x, kernels } => vec![*x, *kernels],
            CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

/// Splits `shape` into (leading extents, rows, cols) around the last two axes.
fn split_last2<'a>(shape: &'a [usize], op: &'static str) -> Result<(&'a [usize], usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: format!("{op} needs at least two axes"),
        });
    }
    let n = shape.len();
    Ok((&shape[..n - 2], shape[n - 2], shape[n - 1]))
}

fn swap12(src: &[f64], a: usize, b: usize, c: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for ia in 0..a {
        for ib in 0..b {
            for ic in 0..c {
                let s = ((ia * b + ib) * c + ic) * d;
                let t = ((ia * c + ic) * b + ib) * d;
                out[t..t + d].copy_from_slice(&src[s..s + d]);
            }
        }
    }
    out
}

/// Right-aligned broadcast of two batch shapes, listing the flat input
/// batch index of each side for every output batch.
fn broadcast_batches(a: &[usize], b: &[usize]) -> Option<(Vec<usize>, Vec<(usize, usize)>)> {
    let nd = a.len().max(b.len());
    let pad = |s: &[usize]| {
        let mut v = vec![1; nd - s.len()];
        v.extend_from_slice(s);
        v
    };
    let (a, b) = (pad(a), pad(b));
    let mut out = Vec::with_capacity(nd);
    for (&x, &y) in a.iter().zip(&b) {
        match (x, y) {
            _ if x == y => out.push(x),
            (1, _) => out.push(y),
            (_, 1) => out.push(x),
            _ => return None,
        }
    }
    let total: usize = out.iter().product();
    let mut pairs = Vec::with_capacity(total);
    let mut idx = vec![0usize; nd];
    for _ in 0..total {
        let (mut ia, mut ib) = (0, 0);
        for d in 0..nd {
            ia = ia * a[d] + if a[d] == 1 { 0 } else { idx[d] };
            ib = ib * b[d] + if b[d] == 1 { 0 } else { idx[d] };
        }
        pairs.push((ia, ib));
        for d in (0..nd).rev() {
            idx[d] += 1;
            if idx[d] < out[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Some((out, pairs))
}

/// For every row of `x_shape` (all axes but the last), the offset of the
/// matching mask row; mask axes are right-aligned and may have extent 1.
fn mask_row_offsets(x_shape: &[usize], mask_shape: &[usize]) -> Option<(Vec<usize>, bool)> {
    let nd = x_shape.len();
    if mask_shape.len() > nd {
        return None;
    }
    let mut m = vec![1; nd - mask_shape.len()];
    m.extend_from_slice(mask_shape);
    if m.iter().zip(x_shape).any(|(&mi, &xi)| mi != xi && mi != 1) {
        return None;
    }
    let last_broadcast = m[nd - 1] == 1 && x_shape[nd - 1] != 1;
    let rows: usize = x_shape[..nd - 1].iter().product();
    let mut offsets = Vec::with_capacity(rows);
    let mut idx = vec![0usize; nd - 1];
    for _ in 0..rows {
        let mut off = 0;
        for d in 0..nd - 1 {
            off = off * m[d] + if m[d] == 1 { 0 } else { idx[d] };
        }
        offsets.push(off * m[nd - 1]);
        for d in (0..nd - 1).rev() {
            idx[d] += 1;
            if idx[d] < x_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Some((offsets, last_broadcast))
}

fn check_bijection(chunk: &[usize], n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    for &i in chunk {
        if i >= n {
            return Err(Error::InvalidIndex(format!(
                "index {i} out of range [0, {n})"
            )));
        }
        if std::mem::replace(&mut seen[i], true) {
            return Err(Error::InvalidIndex(format!("index {i} repeated")));
        }
    }
    Ok(())
}

impl Graph {
    /// Batched matrix product `[.., m, k] × [.., k, n]` with right-aligned
    /// broadcasting of the batch axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let mismatch = || Error::ShapeMismatch {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        let (ba, m, k) = split_last2(&sa, "matmul")?;
        let (bb, k2, n) = split_last2(&sb, "matmul")?;
        if k != k2 {
            return Err(mismatch());
        }
        let (batch, mut pairs) = broadcast_batches(ba, bb).ok_or_else(mismatch)?;
        // A shared right operand lets the whole batch run as one taller
        // product; the accumulation order per output element is unchanged.
        let mut m_run = m;
        if pairs.len() > 1 && pairs.iter().enumerate().all(|(o, &p)| p == (o, 0)) {
            m_run = m * pairs.len();
            pairs = vec![(0, 0)];
        }
        let va = self.value(a).data();
        let vb = self.value(b).data();
        let mut out = vec![0.0; pairs.len() * m_run * n];
        for (o, &(ia, ib)) in pairs.iter().enumerate() {
            gemm_acc(
                &va[ia * m_run * k..(ia + 1) * m_run * k],
                &vb[ib * k * n..(ib + 1) * k * n],
                &mut out[o * m_run * n..(o + 1) * m_run * n],
                m_run,
                k,
                n,
            );
        }
        let flops = 2 * (pairs.len() * m_run * k * n) as u64;
        self.matmul_flops += flops;
        *self.tagged_flops.entry(self.flop_tag).or_default() += flops;
        let mut shape = batch;
        shape.extend([m, n]);
        let value = TensorF::new(shape, out)?;
        let m = m_run;
        Ok(self.record(
            value,
            Op::MatMul {
                a,
                b,
                m,
                k,
                n,
                pairs,
            },
        ))
    }

    /// `a + b` where `b`'s shape equals a trailing part of `a`'s shape.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::ShapeMismatch {
                op: "add",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let vb = self.value(b).data();
        let mut value = self.value(a).clone();
        for chunk in value.data_mut().chunks_exact_mut(vb.len()) {
            chunk.iter_mut().zip(vb).for_each(|(x, y)| *x += y);
        }
        Ok(self.record(value, Op::Add { a, b }))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let mut value = self.value(x).clone();
        value.data_mut().iter_mut().for_each(|v| *v *= factor);
        Ok(self.record(value, Op::Scale { x, factor }))
    }

    /// Softmax over the last axis with an optional additive mask.
    ///
    /// Mask axes are right-aligned against `x` and may have extent 1. Entries
    /// at or below [`MASK_SENTINEL`] receive probability exactly 0.
    pub fn softmax_lastdim(&mut self, x: Var, mask: Option<&TensorF>) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.last_dim();
        let rows = xv.numel() / d;
        let (offsets, last_bcast) = match mask {
            Some(m) => {
                mask_row_offsets(xv.shape(), m.shape()).ok_or_else(|| Error::ShapeMismatch {
                    op: "softmax_lastdim (mask)",
                    lhs: xv.shape().to_vec(),
                    rhs: m.shape().to_vec(),
                })?
            }
            None => (Vec::new(), false),
        };
        let mut out = vec![0.0; xv.numel()];
        let mut shifted = vec![0.0; d];
        for r in 0..rows {
            let row = xv.row(r);
            let mut max = f64::NEG_INFINITY;
            let mut any = false;
            for j in 0..d {
                let add = match mask {
                    Some(m) => m.data()[offsets[r] + if last_bcast { 0 } else { j }],
                    None => 0.0,
                };
                if is_masked(add) {
                    shifted[j] = f64::NEG_INFINITY;
                } else {
                    any = true;
                    shifted[j] = row[j] + add;
                    max = max.max(shifted[j]);
                }
            }
            if !any {
                return Err(Error::FullyMaskedRow { row: r });
            }
            let o = &mut out[r * d..(r + 1) * d];
            let mut sum = 0.0;
            for j in 0..d {
                if shifted[j] != f64::NEG_INFINITY {
                    o[j] = (shifted[j] - max).exp();
                    sum += o[j];
                }
            }
            o.iter_mut().for_each(|v| *v /= sum);
        }
        let value = TensorF::new(xv.shape().to_vec(), out)?;
        Ok(self.record(value, Op::Softmax { x }))
    }

    /// Reorders rows along the second-to-last axis: `out[.., i, :] = x[.., index[i], :]`.
    ///
    /// `index` is either one permutation of `[0, rows)` applied to every
    /// leading batch, or one permutation per leading batch, concatenated.
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (lead, rows, cols) = split_last2(&shape, "gather_rows")?;
        let batches: usize = lead.iter().product();
        if index.len() != rows && index.len() != rows * batches {
            return Err(Error::InvalidIndex(format!(
                "index of length {} does not match {rows} rows (x{batches} batches) of {shape:?}",
                index.len()
            )));
        }
        for chunk in index.chunks(rows) {
            check_bijection(chunk, rows)?;
        }
        let xv = self.value(x).data();
        let mut out = vec![0.0; xv.len()];
        for b in 0..batches {
            let idx = if index.len() == rows {
                index
            } else {
                &index[b * rows..(b + 1) * rows]
            };
            let base = b * rows * cols;
            for (i, &src) in idx.iter().enumerate() {
                out[base + i * cols..base + (i + 1) * cols]
                    .copy_from_slice(&xv[base + src * cols..base + (src + 1) * cols]);
            }
        }
        let value = TensorF::new(shape, out)?;
        Ok(self.record(
            value,
            Op::GatherRows {
                x,
                rows,
                index: index.to_vec(),
            },
        ))
    }

    /// Appends `pad` zero rows along the second-to-last axis.
    pub fn pad_rows(&mut self, x: Var, pad: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (lead, rows, cols) = split_last2(&shape, "pad_rows")?;
        let batches: usize = lead.iter().product();
        let xv = self.value(x).data();
        let mut out = vec![0.0; batches * (rows + pad) * cols];
        for b in 0..batches {
            out[b * (rows + pad) * cols..(b * (rows + pad) + rows) * cols]
                .copy_from_slice(&xv[b * rows * cols..(b + 1) * rows * cols]);
        }
        let mut new_shape = lead.to_vec();
        new_shape.extend([rows + pad, cols]);
        let value = TensorF::new(new_shape, out)?;
        Ok(self.record(value, Op::PadRows { x, rows, pad }))
    }

    /// Rows `start..start + len` along the second-to-last axis.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (lead, rows, cols) = split_last2(&shape, "slice_rows")?;
        if len == 0 || start + len > rows {
            return Err(Error::InvalidIndex(format!(
                "row slice {start}..{} out of range for {shape:?}",
                start + len
            )));
        }
        let batches: usize = lead.iter().product();
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(batches * len * cols);
        for b in 0..batches {
            let base = (b * rows + start) * cols;
            out.extend_from_slice(&xv[base..base + len * cols]);
        }
        let mut new_shape = lead.to_vec();
        new_shape.extend([len, cols]);
        let value = TensorF::new(new_shape, out)?;
        Ok(self.record(
            value,
            Op::SliceRows {
                x,
                rows,
                start,
                len,
            },
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.record(value, Op::Reshape { x }))
    }

    pub fn transpose_last2(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (lead, r, c) = split_last2(&shape, "transpose_last2")?;
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(xv.len());
        for block in xv.chunks_exact(r * c) {
            out.extend(transpose(block, r, c));
        }
        let mut new_shape = lead.to_vec();
        new_shape.extend([c, r]);
        let value = TensorF::new(new_shape, out)?;
        Ok(self.record(value, Op::TransposeLast2 { x }))
    }

    /// `[a, b, c, d] -> [a, c, b, d]`.
    pub fn swap_axes12(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let [a, b, c, d] = shape[..] else {
            return Err(Error::InvalidShape {
                shape,
                reason: "swap_axes12 needs four axes".into(),
            });
        };
        let out = swap12(self.value(x).data(), a, b, c, d);
        let value = TensorF::new(vec![a, c, b, d], out)?;
        Ok(self.record(value, Op::SwapAxes12 { x }))
    }

    /// Columns `start..start + len` of the last axis.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.last_dim();
        if len == 0 || start + len > d {
            return Err(Error::InvalidIndex(format!(
                "column slice {start}..{} out of range for {:?}",
                start + len,
                xv.shape()
            )));
        }
        let out: Vec<f64> = xv
            .data()
            .chunks_exact(d)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let value = TensorF::new(shape, out)?;
        Ok(self.record(value, Op::SliceCols { x, start }))
    }

    /// Concatenates along the last axis; all leading extents must agree.
    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let first = self.shape(*xs.first().ok_or_else(|| Error::InvalidShape {
            shape: vec![],
            reason: "concat of zero tensors".into(),
        })?);
        let lead = first[..first.len() - 1].to_vec();
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let s = self.shape(x);
            if s[..s.len() - 1] != lead[..] {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.shape(xs[0]).to_vec(),
                    rhs: s.to_vec(),
                });
            }
            widths.push(*s.last().unwrap());
        }
        let rows: usize = lead.iter().product();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&x, &w) in xs.iter().zip(&widths) {
                out.extend_from_slice(&self.value(x).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let value = TensorF::new(shape, out)?;
        Ok(self.record(value, Op::ConcatCols { xs: xs.to_vec() }))
    }

    /// Layer normalization over the last axis (eps 1e-5).
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.last_dim();
        for p in [gamma, beta] {
            if self.shape(p) != [d] {
                return Err(Error::ShapeMismatch {
                    op: "layernorm",
                    lhs: xv.shape().to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let rows = xv.numel() / d;
        let mut out = vec![0.0; xv.numel()];
        let mut means = Vec::with_capacity(rows);
        let mut rstds = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rstd = 1.0 / (var + LN_EPS).sqrt();
            for j in 0..d {
                out[r * d + j] = (row[j] - mean) * rstd * g[j] + b[j];
            }
            means.push(mean);
            rstds.push(rstd);
        }
        let value = TensorF::new(xv.shape().to_vec(), out)?;
        Ok(self.record(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean: means,
                rstd: rstds,
            },
        ))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (out, slope) = xv.data().iter().map(|&v| gelu(v)).unzip();
        let value = TensorF::new(xv.shape().to_vec(), out)?;
        Ok(self.record(value, Op::Gelu { x, slope }))
    }

    /// Mean over the group axis: `[.., G, g, d] -> [.., G, d]`.
    ///
    /// With `valid`, group `i` averages only its first `valid[i]` rows; the
    /// pattern repeats over any leading axes.
    pub fn mean_lastdim_groups(&mut self, x: Var, valid: Option<&[usize]>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 3 {
            return Err(Error::InvalidShape {
                shape,
                reason: "mean_lastdim_groups needs [.., G, g, d]".into(),
            });
        }
        let nd = shape.len();
        let (groups, glen, d) = (shape[nd - 3], shape[nd - 2], shape[nd - 1]);
        let valid = match valid {
            Some(v) => {
                if v.len() != groups || v.iter().any(|&c| c == 0 || c > glen) {
                    return Err(Error::Grouping(format!(
                        "valid counts {v:?} do not fit {groups} groups of {glen}"
                    )));
                }
                v.to_vec()
            }
            None => vec![glen; groups],
        };
        let xv = self.value(x).data();
        let total_groups = xv.len() / (glen * d);
        let mut out = vec![0.0; total_groups * d];
        for gi in 0..total_groups {
            let count = valid[gi % groups];
            let o = &mut out[gi * d..(gi + 1) * d];
            for r in 0..count {
                let src = &xv[(gi * glen + r) * d..(gi * glen + r + 1) * d];
                o.iter_mut().zip(src).for_each(|(a, b)| *a += b);
            }
            o.iter_mut().for_each(|a| *a /= count as f64);
        }
        let mut new_shape = shape[..nd - 2].to_vec();
        new_shape.push(d);
        let value = TensorF::new(new_shape, out)?;
        Ok(self.record(
            value,
            Op::GroupMean {
                x,
                group_len: glen,
                valid,
            },
        ))
    }

    /// Per-channel 3×3 convolution over `[.., h, w, d]`, zero padding, stride 1.
    pub fn depthwise_conv3x3(&mut self, x: Var, kernels: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 3 {
            return Err(Error::InvalidShape {
                shape,
                reason: "depthwise_conv3x3 needs [.., h, w, d]".into(),
            });
        }
        let nd = shape.len();
        let (h, w, d) = (shape[nd - 3], shape[nd - 2], shape[nd - 1]);
        if self.shape(kernels) != [3, 3, d] {
            return Err(Error::ShapeMismatch {
                op: "depthwise_conv3x3",
                lhs: shape,
                rhs: self.shape(kernels).to_vec(),
            });
        }
        let xv = self.value(x).data();
        let kv = self.value(kernels).data();
        let maps = xv.len() / (h * w * d);
        let mut out = vec![0.0; xv.len()];
        for b in 0..maps {
            let base = b * h * w * d;
            for i in 0..h {
                for j in 0..w {
                    let o = &mut out[base + (i * w + j) * d..base + (i * w + j + 1) * d];
                    for di in 0..3 {
                        let si = i + di;
                        if si < 1 || si > h {
                            continue;
                        }
                        for dj in 0..3 {
                            let sj = j + dj;
                            if sj < 1 || sj > w {
                                continue;
                            }
                            let src = base + ((si - 1) * w + sj - 1) * d;
                            let k = &kv[(di * 3 + dj) * d..(di * 3 + dj + 1) * d];
                            for c in 0..d {
                                o[c] += k[c] * xv[src + c];
                            }
                        }
                    }
                }
            }
        }
        let value = TensorF::new(shape, out)?;
        Ok(self.record(value, Op::DepthwiseConv3x3 { x, kernels }))
    }

    /// Mean negative log-likelihood of `labels` under softmax(`logits`).
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.ndim() != 2 || lv.shape()[0] != labels.len() {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                lhs: lv.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        let classes = lv.shape()[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::InvalidIndex(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        let mut probs = vec![0.0; lv.numel()];
        let mut loss = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            let row = lv.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let p = &mut probs[r * classes..(r + 1) * classes];
            let mut sum = 0.0;
            for (pj, &xj) in p.iter_mut().zip(row) {
                *pj = (xj - max).exp();
                sum += *pj;
            }
            p.iter_mut().for_each(|v| *v /= sum);
            loss += sum.ln() + max - row[label];
        }
        let value = TensorF::scalar(loss / labels.len() as f64);
        Ok(self.record(
            value,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Scalar `Σ x_i w_i` for a constant weight tensor of the same shape.
    pub fn weighted_sum(&mut self, x: Var, weights: &TensorF) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape() != weights.shape() {
            return Err(Error::ShapeMismatch {
                op: "weighted_sum",
                lhs: xv.shape().to_vec(),
                rhs: weights.shape().to_vec(),
            });
        }
        let s = xv
            .data()
            .iter()
            .zip(weights.data())
            .map(|(a, b)| a * b)
            .sum();
        let weights = weights.data().to_vec();
        Ok(self.record(TensorF::scalar(s), Op::WeightedSum { x, weights }))
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let ones = TensorF::full(self.shape(x), 1.0);
        self.weighted_sum(x, &ones)
    }
}

/// Gradient contributions of node `i` to its inputs.
pub(super) fn backward(g: &Graph, i: usize, dy: &[f64]) -> Vec<(Var, Vec<f64>)> {
    let node = &g.nodes[i];
    let y = node.value.data();
    let val = |v: Var| g.value(v).data();
    let needs = |v: Var| g.requires_grad(v);
    let mut out = Vec::new();
    match &node.op {
        Op::Leaf => {}
        Op::MatMul {
            a,
            b,
            m,
            k,
            n,
            pairs,
        } => {
            let (m, k, n) = (*m, *k, *n);
            if needs(*a) {
                let (va, vb) = (val(*a), val(*b));
                let mut da = vec![0.0; va.len()];
                for (o, &(ia, ib)) in pairs.iter().enumerate() {
                    let bt = transpose(&vb[ib * k * n..(ib + 1) * k * n], k, n);
                    gemm_acc(
                        &dy[o * m * n..(o + 1) * m * n],
                        &bt,
                        &mut da[ia * m * k..(ia + 1) * m * k],
                        m,
                        n,
                        k,
                    );
                }
                out.push((*a, da));
            }
            if needs(*b) {
                let (va, vb) = (val(*a), val(*b));
                let mut db = vec![0.0; vb.len()];
                for (o, &(ia, ib)) in pairs.iter().enumerate() {
                    gemm_tn_acc(
                        &va[ia * m * k..(ia + 1) * m * k],
                        &dy[o * m * n..(o + 1) * m * n],
                        &mut db[ib * k * n..(ib + 1) * k * n],
                        k,
                        m,
                        n,
                    );
                }
                out.push((*b, db));
            }
        }
        Op::SwapAxes12 { x } => {
            let [a, c, b, d] = node.value.shape()[..] else {
                unreachable!()
            };
            out.push((*x, swap12(dy, a, c, b, d)));
        }
        Op::Add { a, b } => {
            if needs(*a) {
                out.push((*a, dy.to_vec()));
            }
            if needs(*b) {
                let nb = g.value(*b).numel();
                let mut db = vec![0.0; nb];
                for chunk in dy.chunks_exact(nb) {
                    db.iter_mut().zip(chunk).for_each(|(d, c)| *d += c);
                }
                out.push((*b, db));
            }
        }
        Op::Scale { x, factor } => {
            out.push((*x, dy.iter().map(|v| v * factor).collect()));
        }
        Op::Softmax { x } => {
            let d = node.value.last_dim();
            let mut dx = vec![0.0; dy.len()];
            for ((dxr, yr), dyr) in dx
                .chunks_exact_mut(d)
                .zip(y.chunks_exact(d))
                .zip(dy.chunks_exact(d))
            {
                let dot: f64 = yr.iter().zip(dyr).map(|(a, b)| a * b).sum();
                for j in 0..d {
                    dxr[j] = yr[j] * (dyr[j] - dot);
                }
            }
            out.push((*x, dx));
        }
        Op::GatherRows { x, rows, index } => {
            let rows = *rows;
            let cols = node.value.last_dim();
            let batches = dy.len() / (rows * cols);
            let mut dx = vec![0.0; dy.len()];
            for b in 0..batches {
                let idx = if index.len() == rows {
                    &index[..]
                } else {
                    &index[b * rows..(b + 1) * rows]
                };
                let base = b * rows * cols;
                for (i, &src) in idx.iter().enumerate() {
                    let d = &mut dx[base + src * cols..base + (src + 1) * cols];
                    d.iter_mut()
                        .zip(&dy[base + i * cols..base + (i + 1) * cols])
                        .for_each(|(a, b)| *a += b);
                }
            }
            out.push((*x, dx));
        }
        Op::PadRows { x, rows, pad } => {
            let cols = node.value.last_dim();
            let full = (rows + pad) * cols;
            let dx = dy
                .chunks_exact(full)
                .flat_map(|c| c[..rows * cols].iter().copied())
                .collect();
            out.push((*x, dx));
        }
        Op::SliceRows {
            x,
            rows,
            start,
            len,
        } => {
            let cols = node.value.last_dim();
            let mut dx = vec![0.0; g.value(*x).numel()];
            for (b, chunk) in dy.chunks_exact(len * cols).enumerate() {
                let base = (b * rows + start) * cols;
                dx[base..base + len * cols].copy_from_slice(chunk);
            }
            out.push((*x, dx));
        }
        Op::Reshape { x } => out.push((*x, dy.to_vec())),
        Op::TransposeLast2 { x } => {
            let s = node.value.shape();
            let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
            let dx = dy
                .chunks_exact(r * c)
                .flat_map(|blk| transpose(blk, r, c))
                .collect();
            out.push((*x, dx));
        }
        Op::SliceCols { x, start } => {
            let width = node.value.last_dim();
            let d = g.value(*x).last_dim();
            let mut dx = vec![0.0; g.value(*x).numel()];
            for (r, chunk) in dy.chunks_exact(width).enumerate() {
                dx[r * d + start..r * d + start + width].copy_from_slice(chunk);
            }
            out.push((*x, dx));
        }
        Op::ConcatCols { xs } => {
            let total = node.value.last_dim();
            let mut offset = 0;
            for &x in xs {
                let w = g.value(x).last_dim();
                if needs(x) {
                    let dx = dy
                        .chunks_exact(total)
                        .flat_map(|row| row[offset..offset + w].iter().copied())
                        .collect();
                    out.push((x, dx));
                }
                offset += w;
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            mean,
            rstd,
        } => {
            let xv = val(*x);
            let gv = val(*gamma);
            let d = gv.len();
            let mut dx = vec![0.0; xv.len()];
            let mut dgamma = vec![0.0; d];
            let mut dbeta = vec![0.0; d];
            let mut xhat = vec![0.0; d];
            let mut dxhat = vec![0.0; d];
            for r in 0..xv.len() / d {
                let row = &xv[r * d..(r + 1) * d];
                let dyr = &dy[r * d..(r + 1) * d];
                for j in 0..d {
                    xhat[j] = (row[j] - mean[r]) * rstd[r];
                    dxhat[j] = dyr[j] * gv[j];
                    dgamma[j] += dyr[j] * xhat[j];
                    dbeta[j] += dyr[j];
                }
                let m1 = dxhat.iter().sum::<f64>() / d as f64;
                let m2 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                for j in 0..d {
                    dx[r * d + j] = rstd[r] * (dxhat[j] - m1 - xhat[j] * m2);
                }
            }
            out.push((*x, dx));
            out.push((*gamma, dgamma));
            out.push((*beta, dbeta));
        }
        Op::Gelu { x, slope } => {
            let dx = slope.iter().zip(dy).map(|(&s, &d)| s * d).collect();
            out.push((*x, dx));
        }
        Op::GroupMean {
            x,
            group_len,
            valid,
        } => {
            let d = node.value.last_dim();
            let groups = valid.len();
            let mut dx = vec![0.0; g.value(*x).numel()];
            for (gi, dyr) in dy.chunks_exact(d).enumerate() {
                let count = valid[gi % groups];
                for r in 0..count {
                    let dst = &mut dx[(gi * group_len + r) * d..(gi * group_len + r + 1) * d];
                    dst.iter_mut()
                        .zip(dyr)
                        .for_each(|(a, b)| *a = b / count as f64);
                }
            }
            out.push((*x, dx));
        }
        Op::DepthwiseConv3x3 { x, kernels } => {
            let shape = node.value.shape();
            let nd = shape.len();
            let (h, w, d) = (shape[nd - 3], shape[nd - 2], shape[nd - 1]);
            let xv = val(*x);
            let kv = val(*kernels);
            let mut dx = vec![0.0; xv.len()];
            let mut dk = vec![0.0; kv.len()];
            for b in 0..xv.len() / (h * w * d) {
                let base = b * h * w * d;
                for i in 0..h {
                    for j in 0..w {
                        let o = base + (i * w + j) * d;
                        for di in 0..3 {
                            let si = i + di;
                            if si < 1 || si > h {
                                continue;
                            }
                            for dj in 0..3 {
                                let sj = j + dj;
                                if sj < 1 || sj > w {
                                    continue;
                                }
                                let src = base + ((si - 1) * w + sj - 1) * d;
                                let ko = (di * 3 + dj) * d;
                                for c in 0..d {
                                    dx[src + c] += kv[ko + c] * dy[o + c];
                                    dk[ko + c] += xv[src + c] * dy[o + c];
                                }
                            }
                        }
                    }
                }
            }
            if needs(*x) {
                out.push((*x, dx));
            }
            out.push((*kernels, dk));
        }
        Op::CrossEntropy {
            logits,
            labels,
            probs,
        } => {
            let classes = probs.len() / labels.len();
            let scale = dy[0] / labels.len() as f64;
            let mut dx = probs.clone();
            for (r, &l) in labels.iter().enumerate() {
                dx[r * classes + l] -= 1.0;
            }
            dx.iter_mut().for_each(|v| *v *= scale);
            out.push((*logits, dx));
        }
        Op::WeightedSum { x, weights } => {
            out.push((*x, weights.iter().map(|w| w * dy[0]).collect()));
        }
    }
    out
}
