//! Forward and backward definitions for every tensor operation.
//!
//! All ops allocate fresh output buffers; inputs are never mutated. Each op
//! validates shapes up front and rejects non-finite outputs.

use super::{BackwardFn, Result, Tensor, TensorError, TensorInner};

fn dims2(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        other => Err(TensorError::ShapeMismatch {
            op,
            details: format!("expected rank-2 tensor, got shape {:?}", other),
        }),
    }
}

fn same_shape(a: &Tensor, b: &Tensor, op: &'static str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            details: format!("{:?} vs {:?}", a.shape(), b.shape()),
        });
    }
    Ok(())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    // max(x,0) + ln(1 + e^{-|x|}) avoids overflow on both tails
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// out = a @ b for row-major a (m x k) and b (k x n).
fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

fn unary_op(
    x: &Tensor,
    op: &'static str,
    f: impl Fn(f64) -> f64,
    // local derivative as a function of (input value, output value)
    df: fn(f64, f64) -> f64,
) -> Result<Tensor> {
    let data: Vec<f64> = x.data().iter().map(|&v| f(v)).collect();
    let shape = x.shape().to_vec();
    let back: BackwardFn = Box::new(move |node: &TensorInner| {
        let g = node.out_grad();
        let xin = &node.parents[0];
        let contrib: Vec<f64> = g
            .iter()
            .zip(xin.data().iter().zip(node.data.iter()))
            .map(|(gi, (&xi, &yi))| gi * df(xi, yi))
            .collect();
        xin.accum_grad(&contrib);
    });
    Tensor::from_op(op, shape, data, vec![x.clone()], back)
}

impl Tensor {
    // ── elementwise ─────────────────────────────────────────────────────

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        same_shape(self, other, "add")?;
        let data = self.data().iter().zip(other.data()).map(|(a, b)| a + b).collect();
        let back: BackwardFn = Box::new(|node: &TensorInner| {
            let g = node.out_grad();
            node.parents[0].accum_grad(&g);
            node.parents[1].accum_grad(&g);
        });
        Tensor::from_op("add", self.shape().to_vec(), data, vec![self.clone(), other.clone()], back)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        same_shape(self, other, "sub")?;
        let data = self.data().iter().zip(other.data()).map(|(a, b)| a - b).collect();
        let back: BackwardFn = Box::new(|node: &TensorInner| {
            let g = node.out_grad();
            node.parents[0].accum_grad(&g);
            let neg: Vec<f64> = g.iter().map(|v| -v).collect();
            node.parents[1].accum_grad(&neg);
        });
        Tensor::from_op("sub", self.shape().to_vec(), data, vec![self.clone(), other.clone()], back)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        same_shape(self, other, "mul")?;
        let data = self.data().iter().zip(other.data()).map(|(a, b)| a * b).collect();
        let back: BackwardFn = Box::new(|node: &TensorInner| {
            let g = node.out_grad();
            let a = &node.parents[0];
            let b = &node.parents[1];
            let da: Vec<f64> = g.iter().zip(b.data()).map(|(gi, bv)| gi * bv).collect();
            let db: Vec<f64> = g.iter().zip(a.data()).map(|(gi, av)| gi * av).collect();
            a.accum_grad(&da);
            b.accum_grad(&db);
        });
        Tensor::from_op("mul", self.shape().to_vec(), data, vec![self.clone(), other.clone()], back)
    }

    pub fn neg(&self) -> Result<Tensor> {
        self.scale(-1.0)
    }

    /// Multiply by a compile-time-known constant.
    pub fn scale(&self, c: f64) -> Result<Tensor> {
        let data = self.data().iter().map(|v| v * c).collect();
        let back: BackwardFn = Box::new(move |node: &TensorInner| {
            let g = node.out_grad();
            let contrib: Vec<f64> = g.iter().map(|v| v * c).collect();
            node.parents[0].accum_grad(&contrib);
        });
        Tensor::from_op("scale", self.shape().to_vec(), data, vec![self.clone()], back)
    }

    pub fn add_const(&self, c: f64) -> Result<Tensor> {
        let data = self.data().iter().map(|v| v + c).collect();
        let back: BackwardFn = Box::new(|node: &TensorInner| {
            let g = node.out_grad();
            node.parents[0].accum_grad(&g);
        });
        Tensor::from_op("add_const", self.shape().to_vec(), data, vec![self.clone()], back)
    }

    /// Multiply every element by a single-element tensor (learnable scalar).
    pub fn mul_scalar_t(&self, s: &Tensor) -> Result<Tensor> {
        if s.numel() != 1 {
            return Err(TensorError::ShapeMismatch {
                op: "mul_scalar_t",
                details: format!("scalar operand has shape {:?}", s.shape()),
            });
        }
        let sv = s.data()[0];
        let data = self.data().iter().map(|v| v * sv).collect();
        let back: BackwardFn = Box::new(move |node: &TensorInner| {
            let g = node.out_grad();
            let x = &node.parents[0];
            let s = &node.parents[1];
            let dx: Vec<f64> = g.iter().map(|v| v * sv).collect();
            let ds: f64 = g.iter().zip(x.data()).map(|(gi, xv)| gi * xv).sum();
            x.accum_grad(&dx);
            s.accum_grad(&[ds]);
        });
        Tensor::from_op("mul_scalar_t", self.shape().to_vec(), data, vec![self.clone(), s.clone()], back)
    }

    pub fn exp(&self) -> Result<Tensor> {
        unary_op(self, "exp", |x| x.exp(), |_, y| y)
    }

    pub fn log(&self) -> Result<Tensor> {
        unary_op(self, "log", |x| x.ln(), |x, _| 1.0 / x)
    }

    pub fn sigmoid(&self) -> Result<Tensor> {
        unary_op(self, "sigmoid", sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn silu(&self) -> Result<Tensor> {
        unary_op(self, "silu", |x| x * sigmoid(x), |x, _| {
            let s = sigmoid(x);
            s * (1.0 + x * (1.0 - s))
        })
    }

    pub fn softplus(&self) -> Result<Tensor> {
        unary_op(self, "softplus", softplus, |x, _| sigmoid(x))
    }

    // ── linear algebra ──────────────────────────────────────────────────

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = dims2(self, "matmul")?;
        let (k2, n) = dims2(other, "matmul")?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                details: format!("{:?} @ {:?}", self.shape(), other.shape()),
            });
        }
        let data = matmul_raw(self.data(), other.data(), m, k, n);
        let back: BackwardFn = Box::new(move |node: &TensorInner| {
            let g = node.out_grad();
            let a = &node.parents[0];
            let b = &node.parents[1];
            if a.requires_grad() {
                // dA = G @ B^T
                let bt = transpose_raw(b.data(), k, n);
                a.accum_grad(&matmul_raw(&g, &bt, m, n, k));
            }
            if b.requires_grad() {
                // dB = A^T @ G
                let at = transpose_raw(a.data(), m, k);
                b.accum_grad(&matmul_raw(&at, &g, k, m, n));
            }
        });
        Tensor::from_op("matmul", vec![m, n], data, vec![self.clone(), other.clone()], back)
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = dims2(self, "transpose")?;
        let data = transpose_raw(self.data(), r, c);
        let back: BackwardFn = Box::new(move |node: &TensorInner| {
            let g = node.out_grad();
            node.parents[0].accum_grad(&transpose_raw(&g, c, r));
        });
        Tensor::from_op("transpose", vec![c, r], data, vec![self.clone()], back)
    }

    /// Broadcast-add a length-c row vector to every row of an r x c matrix.
    pub fn add_row(&self, v: &Tensor) -> Result<Tensor> {
        let (r, c) = dims2(self, "add_row")?;
        if v.shape() != [c] {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                details: format!("matrix {:?} + row {:?}", self.shape(), v.shape()),
            });
        }
        let mut data = self.data().to_vec();
        for i in 0..r {
            for j in 0..c {
                data[i * c + j] += v.data()[j];
            }
        }
        let back: BackwardFn = Box::new(move |node: &TensorInner| {
            let g = node.out_grad();
            node.parents[0].accum_grad(&g);
            let mut dv = vec![0.0; c];
            for i in 0..r {
                for j in 0..c {
                    dv[j] += g[i * c + j];
                }
            }
            node.parents[1].accum_grad(&dv);
        });
        Tensor::from_op("add_row", vec![r, c], data, vec![self.clone(), v.clone()], back)
    }

    /// Scale row i of an r x c matrix by v[i].
    pub fn mul_col(&self, v: &Tensor) -> Result<Tensor> {
        let (r, c) = dims2(self, "mul_col")?;
        if v.shape() != [r] {
            return Err(TensorError::ShapeMismatch {
                op: "mul_col",
                details: format!("matrix {:?} scaled by column {:?}", self.shape(), v.shape()),
            });
        }
        let mut data = self.data().to_vec();
        for i in 0..r {
            let s = v.data()[i];
            for j in 0..c {
                data[i * c + j] *= s;
            }
        }
        let back: BackwardFn = Box::new(move |node: &TensorInner| {
            let g = node.out_grad();
            let x = &node.parents[0];
            let v = &node.parents[1];
            if x.requires_grad() {
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    let s = v.data()[i];
                    for j in 0..c {
                        dx[i * c + j] = g[i * c + j] * s;
                    }
                }
                x.accum_grad(&dx);
            }
            if v.requires_grad() {
                let mut dv = vec![0.0; r];
                for i in 0..r {
                    for j in 0..c {
                        dv[i] += g[i * c + j] * x.data()[i * c + j];
                    }
                }
                v.accum_grad(&dv);
            }
        });
        Tensor::from_op("mul_col", vec![r, c], data, vec![self.clone(), v.clone()], back)
    }

    // ── shape manipulation ──────────────────────────────────────────────

    pub fn concat_rows(parts: &[Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(TensorError::Invalid { op: "concat_rows", msg: "no inputs".into() });
        }
        let (_, c) = dims2(&parts[0], "concat_rows")?;
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            let (r, pc) = dims2(p, "concat_rows")?;
            if pc != c {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    details: format!("column counts differ: {} vs {}", c, pc),
                });
            }
            rows += r;
            data.extend_from_slice(p.data());
        }
        let back: BackwardFn = Box::new(move |node: &TensorInner| {
            let g = node.out_grad();
            let mut offset = 0;
            for p in &node.parents {
                let n = p.numel();
                p.accum_grad(&g[offset..offset + n]);
                offset += n;
            }
        });
        Tensor::from_op("concat_rows", vec![rows, c], data, parts.to_vec(), back)
    }

    pub fn concat_cols(parts: &[Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(TensorError::Invalid { op: "concat_cols", msg: "no inputs".into() });
        }
        let (r, _) = dims2(&parts[0], "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        let mut total = 0;
        for p in parts {
            let (pr, pc) = dims2(p, "concat_cols")?;
            if pr != r {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    details: format!("row counts differ: {} vs {}", r, pr),
                });
            }
            widths.push(pc);
            total += pc;
        }
        let mut data = vec![0.0; r * total];
        for i in 0..r {
            let mut off = 0;
            for (p, &w) in parts.iter().zip(&widths) {
                data[i * total + off..i * total + off + w]
                    .copy_from_slice(&p.data()[i * w..(i + 1) * w]);
                off += w;
            }
        }
        let back: BackwardFn = Box::new(move |node: &TensorInner| {
            let g = node.out_grad();
            let mut off = 0;
            for (p, &w) in node.parents.iter().zip(&widths) {
                if p.requires_grad() {
                    let mut dp = vec![0.0; r * w];
                    for i in 0..r {
                        dp[i * w..(i + 1) * w]
                            .copy_from_slice(&g[i * total + off..i * total + off + w]);
                    }
                    p.accum_grad(&dp);
                }
                off += w;
            }
        });
        Tensor::from_op("concat_cols", vec![r, total], data, parts.to_vec(), back)
    }

    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Tensor> {
        let (r, c) = dims2(self, "slice_rows")?;
        if start >= end || end > r {
            return Err(TensorError::Invalid {
                op: "slice_rows",
                msg: format!("range {}..{} out of {} rows", start, end, r),
            });
        }
        let data = self.data()[start * c..end * c].to_vec();
        let back: BackwardFn = Box::new(move |node: &TensorInner| {
            let g = node.out_grad();
            let mut dx = vec![0.0; r * c];
            dx[start * c..end * c].copy_from_slice(&g);
            node.parents[0].accum_grad(&dx);
        });
        Tensor::from_op("slice_rows", vec![end - start, c], data, vec![self.clone()], back)
    }

    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Tensor> {
        let (r, c) = dims2(self, "slice_cols")?;
        if start >= end || end > c {
            return Err(TensorError::Invalid {
                op: "slice_cols",
                msg: format!("range {}..{} out of {} columns", start, end, c),
            });
        }
        let w = end - start;
        let mut data = vec![0.0; r * w];
        for i in 0..r {
            data[i * w..(i + 1) * w].copy_from_slice(&self.data()[i * c + start..i * c + end]);
        }
        let back: BackwardFn = Box::new(move |node: &TensorInner| {
            let g = node.out_grad();
            let mut dx = vec![0.0; r * c];
            for i in 0..r {
                dx[i * c + start..i * c + end].copy_from_slice(&g[i * w..(i + 1) * w]);
            }
            node.parents[0].accum_grad(&dx);
        });
        Tensor::from_op("slice_cols", vec![r, w], data, vec![self.clone()], back)
    }

    /// Select rows of a table by index; gradients scatter-add back.
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Tensor> {
        let (r, c) = dims2(self, "gather_rows")?;
        for &i in idx {
            if i >= r {
                return Err(TensorError::Invalid {
                    op: "gather_rows",
                    msg: format!("index {} out of {} rows", i, r),
                });
            }
        }
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(&self.data()[i * c..(i + 1) * c]);
        }
        let idx_own = idx.to_vec();
        let k = idx.len();
        let back: BackwardFn = Box::new(move |node: &TensorInner| {
            let g = node.out_grad();
            let mut dx = vec![0.0; r * c];
            for (slot, &i) in idx_own.iter().enumerate() {
                for j in 0..c {
                    dx[i * c + j] += g[slot * c + j];
                }
            }
            node.parents[0].accum_grad(&dx);
        });
        Tensor::from_op("gather_rows", vec![k, c], data, vec![self.clone()], back)
    }

    // ── segment reductions ──────────────────────────────────────────────

    /// Sum rows into `num_segments` buckets: out[seg[i]] += row i.
    pub fn segment_sum(&self, seg: &[usize], num_segments: usize) -> Result<Tensor> {
        let (r, c) = dims2(self, "segment_sum")?;
        if seg.len() != r {
            return Err(TensorError::ShapeMismatch {
                op: "segment_sum",
                details: format!("{} rows vs {} segment ids", r, seg.len()),
            });
        }
        if let Some(&bad) = seg.iter().find(|&&s| s >= num_segments) {
            return Err(TensorError::Invalid {
                op: "segment_sum",
                msg: format!("segment id {} >= {}", bad, num_segments),
            });
        }
        let mut data = vec![0.0; num_segments * c];
        for (i, &s) in seg.iter().enumerate() {
            for j in 0..c {
                data[s * c + j] += self.data()[i * c + j];
            }
        }
        let seg_own = seg.to_vec();
        let back: BackwardFn = Box::new(move |node: &TensorInner| {
            let g = node.out_grad();
            let mut dx = vec![0.0; r * c];
            for (i, &s) in seg_own.iter().enumerate() {
                dx[i * c..(i + 1) * c].copy_from_slice(&g[s * c..(s + 1) * c]);
            }
            node.parents[0].accum_grad(&dx);
        });
        Tensor::from_op("segment_sum", vec![num_segments, c], data, vec![self.clone()], back)
    }

    /// Columnwise max over rows of each segment. Every segment must be
    /// non-empty. Ties route the gradient to the first maximal row.
    pub fn segment_max(&self, seg: &[usize], num_segments: usize) -> Result<Tensor> {
        let (r, c) = dims2(self, "segment_max")?;
        if seg.len() != r {
            return Err(TensorError::ShapeMismatch {
                op: "segment_max",
                details: format!("{} rows vs {} segment ids", r, seg.len()),
            });
        }
        let mut data = vec![f64::NEG_INFINITY; num_segments * c];
        let mut argmax = vec![usize::MAX; num_segments * c];
        for (i, &s) in seg.iter().enumerate() {
            if s >= num_segments {
                return Err(TensorError::Invalid {
                    op: "segment_max",
                    msg: format!("segment id {} >= {}", s, num_segments),
                });
            }
            for j in 0..c {
                let v = self.data()[i * c + j];
                if v > data[s * c + j] {
                    data[s * c + j] = v;
                    argmax[s * c + j] = i;
                }
            }
        }
        if argmax.iter().any(|&a| a == usize::MAX) {
            return Err(TensorError::Invalid {
                op: "segment_max",
                msg: "empty segment".into(),
            });
        }
        let back: BackwardFn = Box::new(move |node: &TensorInner| {
            let g = node.out_grad();
            let mut dx = vec![0.0; r * c];
            for (slot, &src) in argmax.iter().enumerate() {
                let j = slot % c;
                dx[src * c + j] += g[slot];
            }
            node.parents[0].accum_grad(&dx);
        });
        Tensor::from_op("segment_max", vec![num_segments, c], data, vec![self.clone()], back)
    }

    // ── row-wise normalizations ─────────────────────────────────────────

    pub fn softmax_rows(&self) -> Result<Tensor> {
        let (r, c) = dims2(self, "softmax_rows")?;
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let row = &self.data()[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..c {
                let e = (row[j] - m).exp();
                data[i * c + j] = e;
                z += e;
            }
            for j in 0..c {
                data[i * c + j] /= z;
            }
        }
        let back: BackwardFn = Box::new(move |node: &TensorInner| {
            let g = node.out_grad();
            let y = &node.data;
            let mut dx = vec![0.0; r * c];
            for i in 0..r {
                let dot: f64 = (0..c).map(|j| g[i * c + j] * y[i * c + j]).sum();
                for j in 0..c {
                    dx[i * c + j] = y[i * c + j] * (g[i * c + j] - dot);
                }
            }
            node.parents[0].accum_grad(&dx);
        });
        Tensor::from_op("softmax_rows", vec![r, c], data, vec![self.clone()], back)
    }

    pub fn log_softmax_rows(&self) -> Result<Tensor> {
        let (r, c) = dims2(self, "log_softmax_rows")?;
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let row = &self.data()[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            for j in 0..c {
                data[i * c + j] = row[j] - lse;
            }
        }
        let back: BackwardFn = Box::new(move |node: &TensorInner| {
            let g = node.out_grad();
            let y = &node.data; // log-probabilities
            let mut dx = vec![0.0; r * c];
            for i in 0..r {
                let gsum: f64 = g[i * c..(i + 1) * c].iter().sum();
                for j in 0..c {
                    dx[i * c + j] = g[i * c + j] - y[i * c + j].exp() * gsum;
                }
            }
            node.parents[0].accum_grad(&dx);
        });
        Tensor::from_op("log_softmax_rows", vec![r, c], data, vec![self.clone()], back)
    }

    /// Non-affine layer normalization over each row.
    pub fn layernorm_rows(&self) -> Result<Tensor> {
        const EPS: f64 = 1e-5;
        let (r, c) = dims2(self, "layernorm_rows")?;
        let mut data = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        for i in 0..r {
            let row = &self.data()[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + EPS).sqrt();
            inv_std[i] = inv;
            for j in 0..c {
                data[i * c + j] = (row[j] - mean) * inv;
            }
        }
        let back: BackwardFn = Box::new(move |node: &TensorInner| {
            let g = node.out_grad();
            let y = &node.data;
            let mut dx = vec![0.0; r * c];
            for i in 0..r {
                let gm: f64 = g[i * c..(i + 1) * c].iter().sum::<f64>() / c as f64;
                let gym: f64 =
                    (0..c).map(|j| g[i * c + j] * y[i * c + j]).sum::<f64>() / c as f64;
                for j in 0..c {
                    dx[i * c + j] = inv_std[i] * (g[i * c + j] - gm - y[i * c + j] * gym);
                }
            }
            node.parents[0].accum_grad(&dx);
        });
        Tensor::from_op("layernorm_rows", vec![r, c], data, vec![self.clone()], back)
    }

    // ── sequence ops ────────────────────────────────────────────────────

    /// Depthwise causal 1-d convolution over an l x c sequence.
    ///
    /// `weight` is c x k (one kernel per channel), `bias` length c. The
    /// input is left-padded with k-1 zeros so output t only sees inputs
    /// at positions <= t.
    pub fn conv1d_causal(&self, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let (l, c) = dims2(self, "conv1d_causal")?;
        let (wc, k) = dims2(weight, "conv1d_causal")?;
        if wc != c || bias.shape() != [c] {
            return Err(TensorError::ShapeMismatch {
                op: "conv1d_causal",
                details: format!(
                    "input {:?}, weight {:?}, bias {:?}",
                    self.shape(),
                    weight.shape(),
                    bias.shape()
                ),
            });
        }
        let x = self.data();
        let w = weight.data();
        let b = bias.data();
        let mut data = vec![0.0; l * c];
        for t in 0..l {
            for ch in 0..c {
                let mut acc = b[ch];
                for kk in 0..k {
                    // input position aligned so kernel tap k-1 reads x[t]
                    let ti = t as isize - (k as isize - 1) + kk as isize;
                    if ti >= 0 {
                        acc += w[ch * k + kk] * x[ti as usize * c + ch];
                    }
                }
                data[t * c + ch] = acc;
            }
        }
        let back: BackwardFn = Box::new(move |node: &TensorInner| {
            let g = node.out_grad();
            let x = &node.parents[0];
            let weight = &node.parents[1];
            let bias = &node.parents[2];
            if x.requires_grad() {
                let mut dx = vec![0.0; l * c];
                let w = weight.data();
                for t in 0..l {
                    for ch in 0..c {
                        let gv = g[t * c + ch];
                        for kk in 0..k {
                            let ti = t as isize - (k as isize - 1) + kk as isize;
                            if ti >= 0 {
                                dx[ti as usize * c + ch] += gv * w[ch * k + kk];
                            }
                        }
                    }
                }
                x.accum_grad(&dx);
            }
            if weight.requires_grad() {
                let mut dw = vec![0.0; c * k];
                let xd = x.data();
                for t in 0..l {
                    for ch in 0..c {
                        let gv = g[t * c + ch];
                        for kk in 0..k {
                            let ti = t as isize - (k as isize - 1) + kk as isize;
                            if ti >= 0 {
                                dw[ch * k + kk] += gv * xd[ti as usize * c + ch];
                            }
                        }
                    }
                }
                weight.accum_grad(&dw);
            }
            if bias.requires_grad() {
                let mut db = vec![0.0; c];
                for t in 0..l {
                    for ch in 0..c {
                        db[ch] += g[t * c + ch];
                    }
                }
                bias.accum_grad(&db);
            }
        });
        Tensor::from_op(
            "conv1d_causal",
            vec![l, c],
            data,
            vec![self.clone(), weight.clone(), bias.clone()],
            back,
        )
    }

    /// out[t,c,s] = self[t,c] * m[c,s]; broadcast of a channel-state matrix
    /// over the sequence axis.
    pub fn mul_cs(&self, m: &Tensor) -> Result<Tensor> {
        let (l, c) = dims2(self, "mul_cs")?;
        let (mc, s) = dims2(m, "mul_cs")?;
        if mc != c {
            return Err(TensorError::ShapeMismatch {
                op: "mul_cs",
                details: format!("{:?} x {:?}", self.shape(), m.shape()),
            });
        }
        let mut data = vec![0.0; l * c * s];
        for t in 0..l {
            for cc in 0..c {
                let av = self.data()[t * c + cc];
                for ss in 0..s {
                    data[(t * c + cc) * s + ss] = av * m.data()[cc * s + ss];
                }
            }
        }
        let back: BackwardFn = Box::new(move |node: &TensorInner| {
            let g = node.out_grad();
            let a = &node.parents[0];
            let m = &node.parents[1];
            if a.requires_grad() {
                let mut da = vec![0.0; l * c];
                for t in 0..l {
                    for cc in 0..c {
                        let mut acc = 0.0;
                        for ss in 0..s {
                            acc += g[(t * c + cc) * s + ss] * m.data()[cc * s + ss];
                        }
                        da[t * c + cc] = acc;
                    }
                }
                a.accum_grad(&da);
            }
            if m.requires_grad() {
                let mut dm = vec![0.0; c * s];
                for t in 0..l {
                    for cc in 0..c {
                        let av = a.data()[t * c + cc];
                        for ss in 0..s {
                            dm[cc * s + ss] += g[(t * c + cc) * s + ss] * av;
                        }
                    }
                }
                m.accum_grad(&dm);
            }
        });
        Tensor::from_op("mul_cs", vec![l, c, s], data, vec![self.clone(), m.clone()], back)
    }

    /// out[t,c,s] = self[t,c] * b[t,s]; per-step outer product over channels
    /// and states.
    pub fn mul_ts(&self, b: &Tensor) -> Result<Tensor> {
        let (l, c) = dims2(self, "mul_ts")?;
        let (lb, s) = dims2(b, "mul_ts")?;
        if lb != l {
            return Err(TensorError::ShapeMismatch {
                op: "mul_ts",
                details: format!("{:?} x {:?}", self.shape(), b.shape()),
            });
        }
        let mut data = vec![0.0; l * c * s];
        for t in 0..l {
            for cc in 0..c {
                let av = self.data()[t * c + cc];
                for ss in 0..s {
                    data[(t * c + cc) * s + ss] = av * b.data()[t * s + ss];
                }
            }
        }
        let back: BackwardFn = Box::new(move |node: &TensorInner| {
            let g = node.out_grad();
            let a = &node.parents[0];
            let b = &node.parents[1];
            if a.requires_grad() {
                let mut da = vec![0.0; l * c];
                for t in 0..l {
                    for cc in 0..c {
                        let mut acc = 0.0;
                        for ss in 0..s {
                            acc += g[(t * c + cc) * s + ss] * b.data()[t * s + ss];
                        }
                        da[t * c + cc] = acc;
                    }
                }
                a.accum_grad(&da);
            }
            if b.requires_grad() {
                let mut db = vec![0.0; l * s];
                for t in 0..l {
                    for cc in 0..c {
                        let av = a.data()[t * c + cc];
                        for ss in 0..s {
                            db[t * s + ss] += g[(t * c + cc) * s + ss] * av;
                        }
                    }
                }
                b.accum_grad(&db);
            }
        });
        Tensor::from_op("mul_ts", vec![l, c, s], data, vec![self.clone(), b.clone()], back)
    }

    /// Selective-SSM recurrence.
    ///
    /// Inputs: `abar`, `bx` of shape l x c x n and readout `cmat` of shape
    /// l x n. Runs h[t] = abar[t] (*) h[t-1] + bx[t] with h[-1] = 0 and
    /// emits y[t,c] = sum_s cmat[t,s] * h[t,c,s].
    pub fn ssm_scan(abar: &Tensor, bx: &Tensor, cmat: &Tensor) -> Result<Tensor> {
        let (l, c, n) = match abar.shape() {
            [l, c, n] => (*l, *c, *n),
            other => {
                return Err(TensorError::ShapeMismatch {
                    op: "ssm_scan",
                    details: format!("abar must be rank-3, got {:?}", other),
                })
            }
        };
        if bx.shape() != [l, c, n] || cmat.shape() != [l, n] {
            return Err(TensorError::ShapeMismatch {
                op: "ssm_scan",
                details: format!(
                    "abar {:?}, bx {:?}, cmat {:?}",
                    abar.shape(),
                    bx.shape(),
                    cmat.shape()
                ),
            });
        }
        let mut states = vec![0.0; l * c * n];
        let mut data = vec![0.0; l * c];
        {
            let a = abar.data();
            let b = bx.data();
            let cm = cmat.data();
            for t in 0..l {
                for cc in 0..c {
                    let base = (t * c + cc) * n;
                    let prev_base = base.wrapping_sub(c * n);
                    let mut acc = 0.0;
                    for ss in 0..n {
                        let prev = if t == 0 { 0.0 } else { states[prev_base + ss] };
                        let h = a[base + ss] * prev + b[base + ss];
                        states[base + ss] = h;
                        acc += cm[t * n + ss] * h;
                    }
                    data[t * c + cc] = acc;
                }
            }
        }
        let back: BackwardFn = Box::new(move |node: &TensorInner| {
            let g = node.out_grad();
            let abar = &node.parents[0];
            let bx = &node.parents[1];
            let cmat = &node.parents[2];
            let a = abar.data();
            let cm = cmat.data();
            let mut da = vec![0.0; l * c * n];
            let mut db = vec![0.0; l * c * n];
            let mut dc = vec![0.0; l * n];
            // carry[c,s]: gradient flowing into h[t] from steps > t
            let mut carry = vec![0.0; c * n];
            for t in (0..l).rev() {
                for cc in 0..c {
                    let base = (t * c + cc) * n;
                    let gy = g[t * c + cc];
                    for ss in 0..n {
                        let dh = gy * cm[t * n + ss] + carry[cc * n + ss];
                        let h_prev = if t == 0 { 0.0 } else { states[base - c * n + ss] };
                        da[base + ss] = dh * h_prev;
                        db[base + ss] = dh;
                        dc[t * n + ss] += gy * states[base + ss];
                        carry[cc * n + ss] = dh * a[base + ss];
                    }
                }
            }
            abar.accum_grad(&da);
            bx.accum_grad(&db);
            cmat.accum_grad(&dc);
        });
        Tensor::from_op(
            "ssm_scan",
            vec![l, c],
            data,
            vec![abar.clone(), bx.clone(), cmat.clone()],
            back,
        )
    }

    // ── reductions ──────────────────────────────────────────────────────

    pub fn sum_all(&self) -> Result<Tensor> {
        let total: f64 = self.data().iter().sum();
        let n = self.numel();
        let back: BackwardFn = Box::new(move |node: &TensorInner| {
            let g = node.out_grad()[0];
            node.parents[0].accum_grad(&vec![g; n]);
        });
        Tensor::from_op("sum_all", vec![1], vec![total], vec![self.clone()], back)
    }

    pub fn mean_all(&self) -> Result<Tensor> {
        let n = self.numel();
        if n == 0 {
            return Err(TensorError::Invalid { op: "mean_all", msg: "empty tensor".into() });
        }
        let mean: f64 = self.data().iter().sum::<f64>() / n as f64;
        let back: BackwardFn = Box::new(move |node: &TensorInner| {
            let g = node.out_grad()[0] / n as f64;
            node.parents[0].accum_grad(&vec![g; n]);
        });
        Tensor::from_op("mean_all", vec![1], vec![mean], vec![self.clone()], back)
    }

    /// Mean over rows: r x c -> 1 x c.
    pub fn mean_axis0(&self) -> Result<Tensor> {
        let (r, c) = dims2(self, "mean_axis0")?;
        let mut data = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                data[j] += self.data()[i * c + j];
            }
        }
        for v in data.iter_mut() {
            *v /= r as f64;
        }
        let back: BackwardFn = Box::new(move |node: &TensorInner| {
            let g = node.out_grad();
            let mut dx = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    dx[i * c + j] = g[j] / r as f64;
                }
            }
            node.parents[0].accum_grad(&dx);
        });
        Tensor::from_op("mean_axis0", vec![1, c], data, vec![self.clone()], back)
    }

    /// Mean over columns: r x c -> r x 1.
    pub fn mean_axis1(&self) -> Result<Tensor> {
        let (r, c) = dims2(self, "mean_axis1")?;
        let mut data = vec![0.0; r];
        for i in 0..r {
            data[i] = self.data()[i * c..(i + 1) * c].iter().sum::<f64>() / c as f64;
        }
        let back: BackwardFn = Box::new(move |node: &TensorInner| {
            let g = node.out_grad();
            let mut dx = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    dx[i * c + j] = g[i] / c as f64;
                }
            }
            node.parents[0].accum_grad(&dx);
        });
        Tensor::from_op("mean_axis1", vec![r, 1], data, vec![self.clone()], back)
    }

    // ── losses ──────────────────────────────────────────────────────────

    /// Mean squared error between same-shape tensors.
    pub fn mse(&self, target: &Tensor) -> Result<Tensor> {
        same_shape(self, target, "mse")?;
        let n = self.numel();
        let loss: f64 = self
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n as f64;
        let back: BackwardFn = Box::new(move |node: &TensorInner| {
            let g = node.out_grad()[0];
            let a = &node.parents[0];
            let b = &node.parents[1];
            let scale = 2.0 * g / n as f64;
            if a.requires_grad() {
                let da: Vec<f64> =
                    a.data().iter().zip(b.data()).map(|(x, y)| scale * (x - y)).collect();
                a.accum_grad(&da);
            }
            if b.requires_grad() {
                let db: Vec<f64> =
                    a.data().iter().zip(b.data()).map(|(x, y)| -scale * (x - y)).collect();
                b.accum_grad(&db);
            }
        });
        Tensor::from_op("mse", vec![1], vec![loss], vec![self.clone(), target.clone()], back)
    }

    /// Numerically stable mean binary cross-entropy on logits.
    ///
    /// With `mask` given, only entries where mask is true contribute; the
    /// mean is over contributing entries.
    pub fn bce_with_logits(&self, targets: &Tensor, mask: Option<&[bool]>) -> Result<Tensor> {
        same_shape(self, targets, "bce_with_logits")?;
        let n = self.numel();
        if let Some(m) = mask {
            if m.len() != n {
                return Err(TensorError::ShapeMismatch {
                    op: "bce_with_logits",
                    details: format!("{} logits vs {} mask entries", n, m.len()),
                });
            }
        }
        let active: Vec<bool> = match mask {
            Some(m) => m.to_vec(),
            None => vec![true; n],
        };
        let count = active.iter().filter(|&&a| a).count();
        if count == 0 {
            return Err(TensorError::Invalid {
                op: "bce_with_logits",
                msg: "no active entries".into(),
            });
        }
        let mut loss = 0.0;
        for i in 0..n {
            if active[i] {
                let x = self.data()[i];
                let t = targets.data()[i];
                loss += x.max(0.0) - x * t + (-x.abs()).exp().ln_1p();
            }
        }
        loss /= count as f64;
        let back: BackwardFn = Box::new(move |node: &TensorInner| {
            let g = node.out_grad()[0] / count as f64;
            let logits = &node.parents[0];
            let targets = &node.parents[1];
            if logits.requires_grad() {
                let dx: Vec<f64> = logits
                    .data()
                    .iter()
                    .zip(targets.data().iter().zip(active.iter()))
                    .map(|(&x, (&t, &a))| if a { g * (sigmoid(x) - t) } else { 0.0 })
                    .collect();
                logits.accum_grad(&dx);
            }
        });
        Tensor::from_op(
            "bce_with_logits",
            vec![1],
            vec![loss],
            vec![self.clone(), targets.clone()],
            back,
        )
    }
}

/// Row-wise cross-entropy -mean_i sum_j p[i,j] * log_softmax(logits)[i,j].
///
/// `target_probs` rows should be distributions; pass a detached tensor to
/// stop gradients on the pseudo-label side.
pub fn cross_entropy_rows(target_probs: &Tensor, logits: &Tensor) -> Result<Tensor> {
    same_shape(target_probs, logits, "cross_entropy_rows")?;
    let (r, _) = dims2(logits, "cross_entropy_rows")?;
    let log_q = logits.log_softmax_rows()?;
    target_probs.mul(&log_q)?.sum_all()?.scale(-1.0 / r as f64)
}

#[cfg(test)]
mod tests {
    use super::super::gradcheck;
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::param(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn analytic_points() {
        let x = t(&[1], &[0.0]);
        assert_eq!(x.silu().unwrap().item(), 0.0);
        assert!((x.softplus().unwrap().item() - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((x.sigmoid().unwrap().item() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn layernorm_constant_row_is_zero() {
        let x = t(&[1, 4], &[3.0, 3.0, 3.0, 3.0]);
        let y = x.layernorm_rows().unwrap();
        assert!(y.data().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = t(&[2, 3], &[1.0, -2.0, 0.5, 10.0, 10.0, 10.0]);
        let y = x.softmax_rows().unwrap();
        for i in 0..2 {
            let s: f64 = y.data()[i * 3..(i + 1) * 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_known_product() {
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]);
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn shape_mismatch_names_op() {
        let a = t(&[2, 2], &[1.0; 4]);
        let b = t(&[3], &[1.0; 3]);
        let err = a.add(&b).unwrap_err();
        assert!(err.to_string().contains("add"));
    }

    #[test]
    fn log_of_zero_fails_fast() {
        let x = t(&[1], &[0.0]);
        assert!(matches!(x.log(), Err(TensorError::NonFinite { .. })));
    }

    #[test]
    fn segment_max_routes_gradient_to_argmax() {
        let x = t(&[3, 2], &[1.0, 5.0, 4.0, 2.0, 0.0, 7.0]);
        let y = x.segment_max(&[0, 0, 1], 2).unwrap();
        assert_eq!(y.data(), &[4.0, 5.0, 0.0, 7.0]);
        y.sum_all().unwrap().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0, 1.0, 1.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn segment_max_rejects_empty_segment() {
        let x = t(&[2, 1], &[1.0, 2.0]);
        assert!(x.segment_max(&[0, 0], 2).is_err());
    }

    #[test]
    fn conv1d_is_causal() {
        // kernel [0, 1] per channel reads the current element only
        let x = t(&[3, 1], &[1.0, 2.0, 3.0]);
        let w = Tensor::constant(&[1, 2], vec![0.0, 1.0]).unwrap();
        let b = Tensor::constant(&[1], vec![0.0]).unwrap();
        let y = x.conv1d_causal(&w, &b).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0, 3.0]);
        // kernel [1, 0] reads the previous element, zero-padded at t=0
        let w2 = Tensor::constant(&[1, 2], vec![1.0, 0.0]).unwrap();
        let y2 = x.conv1d_causal(&w2, &b).unwrap();
        assert_eq!(y2.data(), &[0.0, 1.0, 2.0]);
    }

    #[test]
    fn ssm_scan_single_step() {
        // l=1: y[0,c] = sum_s cmat[0,s] * bx[0,c,s]
        let abar = t(&[1, 2, 2], &[0.5, 0.5, 0.5, 0.5]);
        let bx = t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let cm = t(&[1, 2], &[1.0, 10.0]);
        let y = Tensor::ssm_scan(&abar, &bx, &cm).unwrap();
        assert_eq!(y.data(), &[21.0, 43.0]);
    }

    #[test]
    fn cross_entropy_uniform_target() {
        // uniform target against uniform logits gives ln(d)
        let p = Tensor::constant(&[1, 4], vec![0.25; 4]).unwrap();
        let logits = t(&[1, 4], &[0.0; 4]);
        let ce = cross_entropy_rows(&p, &logits).unwrap();
        assert!((ce.item() - 4.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn bce_masked_skips_entries() {
        let logits = t(&[1, 3], &[2.0, -50.0, 1.0]);
        let targets = Tensor::constant(&[1, 3], vec![1.0, 1.0, 0.0]).unwrap();
        let full = logits.bce_with_logits(&targets, None).unwrap();
        let masked = logits
            .bce_with_logits(&targets, Some(&[true, false, true]))
            .unwrap();
        // dropping the badly-predicted middle entry lowers the loss
        assert!(masked.item() < full.item());
    }

    // Finite-difference checks for every primitive op, per the derived
    // gradient oracle: central differences, eps = 1e-5, rel err <= 1e-6.
    #[test]
    fn gradcheck_primitive_ops() {
        let specs: Vec<(&str, Box<dyn Fn(&[Tensor]) -> Result<Tensor>>, Vec<Vec<usize>>)> = vec![
            ("add", Box::new(|xs| xs[0].add(&xs[1])), vec![vec![3, 4], vec![3, 4]]),
            ("sub", Box::new(|xs| xs[0].sub(&xs[1])), vec![vec![3, 4], vec![3, 4]]),
            ("mul", Box::new(|xs| xs[0].mul(&xs[1])), vec![vec![3, 4], vec![3, 4]]),
            ("scale", Box::new(|xs| xs[0].scale(-1.7)), vec![vec![3, 4]]),
            ("mul_scalar_t", Box::new(|xs| xs[0].mul_scalar_t(&xs[1])), vec![vec![3, 4], vec![1]]),
            ("exp", Box::new(|xs| xs[0].exp()), vec![vec![3, 4]]),
            ("sigmoid", Box::new(|xs| xs[0].sigmoid()), vec![vec![3, 4]]),
            ("silu", Box::new(|xs| xs[0].silu()), vec![vec![3, 4]]),
            ("softplus", Box::new(|xs| xs[0].softplus()), vec![vec![3, 4]]),
            ("matmul", Box::new(|xs| xs[0].matmul(&xs[1])), vec![vec![3, 4], vec![4, 2]]),
            ("transpose", Box::new(|xs| xs[0].transpose()), vec![vec![3, 4]]),
            ("add_row", Box::new(|xs| xs[0].add_row(&xs[1])), vec![vec![3, 4], vec![4]]),
            ("mul_col", Box::new(|xs| xs[0].mul_col(&xs[1])), vec![vec![3, 4], vec![3]]),
            (
                "concat_rows",
                Box::new(|xs| Tensor::concat_rows(&[xs[0].clone(), xs[1].clone()])),
                vec![vec![2, 3], vec![4, 3]],
            ),
            (
                "concat_cols",
                Box::new(|xs| Tensor::concat_cols(&[xs[0].clone(), xs[1].clone()])),
                vec![vec![3, 2], vec![3, 4]],
            ),
            ("slice_rows", Box::new(|xs| xs[0].slice_rows(1, 3)), vec![vec![4, 3]]),
            ("slice_cols", Box::new(|xs| xs[0].slice_cols(1, 3)), vec![vec![3, 4]]),
            ("gather_rows", Box::new(|xs| xs[0].gather_rows(&[2, 0, 2, 1])), vec![vec![3, 4]]),
            (
                "segment_sum",
                Box::new(|xs| xs[0].segment_sum(&[0, 1, 0, 2], 3)),
                vec![vec![4, 3]],
            ),
            (
                "segment_max",
                Box::new(|xs| xs[0].segment_max(&[0, 1, 0, 1], 2)),
                vec![vec![4, 3]],
            ),
            ("softmax_rows", Box::new(|xs| xs[0].softmax_rows()), vec![vec![3, 4]]),
            ("log_softmax_rows", Box::new(|xs| xs[0].log_softmax_rows()), vec![vec![3, 4]]),
            ("layernorm_rows", Box::new(|xs| xs[0].layernorm_rows()), vec![vec![3, 4]]),
            (
                "conv1d_causal",
                Box::new(|xs| xs[0].conv1d_causal(&xs[1], &xs[2])),
                vec![vec![5, 3], vec![3, 4], vec![3]],
            ),
            ("mul_cs", Box::new(|xs| xs[0].mul_cs(&xs[1])), vec![vec![3, 2], vec![2, 4]]),
            ("mul_ts", Box::new(|xs| xs[0].mul_ts(&xs[1])), vec![vec![3, 2], vec![3, 4]]),
            (
                "ssm_scan",
                Box::new(|xs| Tensor::ssm_scan(&xs[0], &xs[1], &xs[2])),
                vec![vec![4, 2, 3], vec![4, 2, 3], vec![4, 3]],
            ),
            ("sum_all", Box::new(|xs| xs[0].sum_all()), vec![vec![3, 4]]),
            ("mean_all", Box::new(|xs| xs[0].mean_all()), vec![vec![3, 4]]),
            ("mean_axis0", Box::new(|xs| xs[0].mean_axis0()), vec![vec![3, 4]]),
            ("mean_axis1", Box::new(|xs| xs[0].mean_axis1()), vec![vec![3, 4]]),
            ("mse", Box::new(|xs| xs[0].mse(&xs[1])), vec![vec![3, 4], vec![3, 4]]),
            (
                "bce_with_logits",
                Box::new(|xs| {
                    let t = Tensor::constant(&[3, 4], vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0]).unwrap();
                    xs[0].bce_with_logits(&t, None)
                }),
                vec![vec![3, 4]],
            ),
            (
                "cross_entropy_rows",
                Box::new(|xs| cross_entropy_rows(&xs[0].softmax_rows()?, &xs[1])),
                vec![vec![3, 4], vec![3, 4]],
            ),
        ];
        for (name, f, shapes) in specs {
            gradcheck(name, f.as_ref(), &shapes, 99, 1e-5, 1e-6)
                .unwrap_or_else(|e| panic!("gradcheck {name}: {e}"));
        }
    }

    #[test]
    fn gradcheck_random_compositions() {
        // small random DAGs mixing several ops, depth <= 6
        let f = |xs: &[Tensor]| -> Result<Tensor> {
            let a = xs[0].silu()?.matmul(&xs[1])?;
            let b = a.layernorm_rows()?.softmax_rows()?;
            let c = b.add(&a.sigmoid()?)?;
            c.mul(&c)?.mean_all()
        };
        gradcheck("composition", &f, &[vec![3, 3], vec![3, 3]], 7, 1e-5, 1e-6).unwrap();

        let g = |xs: &[Tensor]| -> Result<Tensor> {
            let u = xs[0].mul_ts(&xs[1])?;
            let a = xs[2].exp()?.neg()?.exp()?.mul_cs(&xs[3])?.exp()?;
            let y = Tensor::ssm_scan(&a, &u.exp()?, &xs[1])?;
            y.softplus()?.sum_all()
        };
        gradcheck(
            "composition_scan",
            &g,
            &[vec![3, 2], vec![3, 2], vec![3, 2], vec![2, 2]],
            11,
            1e-5,
            1e-6,
        )
        .unwrap();
    }
}
