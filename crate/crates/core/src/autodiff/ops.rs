//! Differentiable primitives.
//!
//! Binary elementwise ops accept equal shapes, or a right operand that is a
//! single value or a vector matching the left operand's trailing axis. Any
//! other combination is an error.

use std::rc::Rc;

use super::{Tape, Tensor};
use crate::error::{Error, Result};

/// Variance floor used by [`Tensor::layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy)]
enum Broadcast {
    Same,
    Scalar,
    Trailing(usize),
}

fn broadcast(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Broadcast> {
    if a.shape == b.shape {
        return Ok(Broadcast::Same);
    }
    if b.len() == 1 && b.shape.len() <= 1 {
        return Ok(Broadcast::Scalar);
    }
    if b.shape.len() == 1 && a.shape.last() == Some(&b.shape[0]) {
        return Ok(Broadcast::Trailing(b.shape[0]));
    }
    Err(Error::ShapeMismatch {
        op,
        lhs: a.shape.clone(),
        rhs: b.shape.clone(),
    })
}

fn b_index(kind: Broadcast, i: usize) -> usize {
    match kind {
        Broadcast::Same => i,
        Broadcast::Scalar => 0,
        Broadcast::Trailing(n) => i % n,
    }
}

/// Sums a full-size gradient back down to the broadcast operand's shape.
fn reduce_to(kind: Broadcast, g: Vec<f64>, b_len: usize) -> Vec<f64> {
    match kind {
        Broadcast::Same => g,
        _ => {
            let mut out = vec![0.0; b_len];
            for (i, v) in g.iter().enumerate() {
                out[b_index(kind, i)] += v;
            }
            out
        }
    }
}

fn unary(t: &Tensor, values: Vec<f64>, backward: impl Fn(&[f64]) -> Vec<f64> + 'static) -> Tensor {
    Tape::record(
        &[t],
        t.shape.clone(),
        values,
        Box::new(move |g| vec![backward(g)]),
    )
    .expect("unary ops preserve shape")
}

fn check_finite(op: &'static str, v: &[f64]) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

fn rows(shape: &[usize]) -> (usize, usize) {
    let cols = *shape.last().unwrap_or(&1);
    let n: usize = shape.iter().product();
    (n / cols.max(1), cols)
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        let kind = broadcast("add", self, other)?;
        let values = self
            .values
            .iter()
            .enumerate()
            .map(|(i, a)| a + other.values[b_index(kind, i)])
            .collect();
        let b_len = other.len();
        Tape::record(
            &[self, other],
            self.shape.clone(),
            values,
            Box::new(move |g| vec![g.to_vec(), reduce_to(kind, g.to_vec(), b_len)]),
        )
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        let kind = broadcast("sub", self, other)?;
        let values = self
            .values
            .iter()
            .enumerate()
            .map(|(i, a)| a - other.values[b_index(kind, i)])
            .collect();
        let b_len = other.len();
        Tape::record(
            &[self, other],
            self.shape.clone(),
            values,
            Box::new(move |g| {
                let neg = g.iter().map(|v| -v).collect();
                vec![g.to_vec(), reduce_to(kind, neg, b_len)]
            }),
        )
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        let kind = broadcast("mul", self, other)?;
        let values = self
            .values
            .iter()
            .enumerate()
            .map(|(i, a)| a * other.values[b_index(kind, i)])
            .collect();
        let (a, b) = (self.values.clone(), other.values.clone());
        Tape::record(
            &[self, other],
            self.shape.clone(),
            values,
            Box::new(move |g| {
                let ga = g
                    .iter()
                    .enumerate()
                    .map(|(i, v)| v * b[b_index(kind, i)])
                    .collect();
                let gb = g.iter().zip(a.iter()).map(|(v, x)| v * x).collect();
                vec![ga, reduce_to(kind, gb, b.len())]
            }),
        )
    }

    /// Multiplies by a constant.
    pub fn scale(&self, c: f64) -> Tensor {
        let values = self.values.iter().map(|v| v * c).collect();
        unary(self, values, move |g| g.iter().map(|v| v * c).collect())
    }

    /// `a · b` for `a: [m, k]`, `b: [k, n]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let mismatch = || Error::ShapeMismatch {
            op: "matmul",
            lhs: self.shape.clone(),
            rhs: other.shape.clone(),
        };
        let (&[m, k], &[k2, n]) = (self.shape.as_slice(), other.shape.as_slice()) else {
            return Err(mismatch());
        };
        if k != k2 {
            return Err(mismatch());
        }
        let (a, b) = (self.values.clone(), other.values.clone());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let av = a[i * k + p];
                for j in 0..n {
                    out[i * n + j] += av * b[p * n + j];
                }
            }
        }
        Tape::record(
            &[self, other],
            vec![m, n],
            out,
            Box::new(move |g| {
                let mut ga = vec![0.0; m * k];
                let mut gb = vec![0.0; k * n];
                for i in 0..m {
                    for p in 0..k {
                        let mut acc = 0.0;
                        for j in 0..n {
                            acc += g[i * n + j] * b[p * n + j];
                            gb[p * n + j] += a[i * k + p] * g[i * n + j];
                        }
                        ga[i * k + p] = acc;
                    }
                }
                vec![ga, gb]
            }),
        )
    }

    /// `W · x` for `W: [m, k]` (self) and `x: [k]`.
    pub fn matvec(&self, x: &Tensor) -> Result<Tensor> {
        let (&[m, k], &[k2]) = (self.shape.as_slice(), x.shape.as_slice()) else {
            return Err(Error::ShapeMismatch {
                op: "matvec",
                lhs: self.shape.clone(),
                rhs: x.shape.clone(),
            });
        };
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matvec",
                lhs: self.shape.clone(),
                rhs: x.shape.clone(),
            });
        }
        let (w, xv) = (self.values.clone(), x.values.clone());
        let out = (0..m)
            .map(|i| w[i * k..(i + 1) * k].iter().zip(xv.iter()).map(|(a, b)| a * b).sum())
            .collect();
        Tape::record(
            &[self, x],
            vec![m],
            out,
            Box::new(move |g| {
                let mut gw = vec![0.0; m * k];
                let mut gx = vec![0.0; k];
                for i in 0..m {
                    let gi = g[i];
                    let row = &w[i * k..(i + 1) * k];
                    for j in 0..k {
                        gw[i * k + j] = gi * xv[j];
                        gx[j] += gi * row[j];
                    }
                }
                vec![gw, gx]
            }),
        )
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&self) -> Tensor {
        let total = self.values.iter().sum();
        let n = self.len();
        Tape::record(&[self], Vec::new(), vec![total], Box::new(move |g| vec![vec![g[0]; n]]))
            .expect("scalar shape")
    }

    pub fn mean(&self) -> Tensor {
        self.sum().scale(1.0 / self.len() as f64)
    }

    pub fn dot(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op: "dot",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(self.mul(other)?.sum())
    }

    pub fn exp(&self) -> Result<Tensor> {
        check_finite("exp", &self.values)?;
        let out: Rc<Vec<f64>> = Rc::new(self.values.iter().map(|v| v.exp()).collect());
        let saved = out.clone();
        Ok(unary(self, (*out).clone(), move |g| {
            g.iter().zip(saved.iter()).map(|(a, b)| a * b).collect()
        }))
    }

    pub fn log(&self) -> Result<Tensor> {
        if self.values.iter().any(|v| !v.is_finite() || *v <= 0.0) {
            return Err(Error::NonFinite { op: "log" });
        }
        let x = self.values.clone();
        let values = x.iter().map(|v| v.ln()).collect();
        Ok(unary(self, values, move |g| {
            g.iter().zip(x.iter()).map(|(a, b)| a / b).collect()
        }))
    }

    /// `x · sigmoid(x)`.
    pub fn silu(&self) -> Result<Tensor> {
        check_finite("silu", &self.values)?;
        let x = self.values.clone();
        let values = x.iter().map(|&v| v * sigmoid(v)).collect();
        Ok(unary(self, values, move |g| {
            g.iter()
                .zip(x.iter())
                .map(|(gi, &v)| {
                    let s = sigmoid(v);
                    gi * s * (1.0 + v * (1.0 - s))
                })
                .collect()
        }))
    }

    /// Softmax over the trailing axis. `-inf` entries get probability exactly
    /// zero; a row that is entirely `-inf` is an error, as are NaN and `+inf`.
    pub fn softmax(&self) -> Result<Tensor> {
        if self.values.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
            return Err(Error::NonFinite { op: "softmax" });
        }
        let (nrows, cols) = rows(&self.shape);
        let mut p = vec![0.0; self.len()];
        for r in 0..nrows {
            let row = &self.values[r * cols..(r + 1) * cols];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::AllMasked);
            }
            let out = &mut p[r * cols..(r + 1) * cols];
            let mut total = 0.0;
            for (o, &v) in out.iter_mut().zip(row) {
                *o = (v - max).exp();
                total += *o;
            }
            for o in out.iter_mut() {
                *o /= total;
            }
        }
        let saved = Rc::new(p.clone());
        Ok(unary(self, p, move |g| {
            let mut out = vec![0.0; g.len()];
            for r in 0..nrows {
                let s = r * cols..(r + 1) * cols;
                let pr = &saved[s.clone()];
                let gr = &g[s.clone()];
                let inner: f64 = pr.iter().zip(gr).map(|(a, b)| a * b).sum();
                for ((o, pi), gi) in out[s].iter_mut().zip(pr).zip(gr) {
                    *o = pi * (gi - inner);
                }
            }
            out
        }))
    }

    /// Normalizes each trailing-axis row to zero mean and unit variance
    /// (no affine parameters).
    pub fn layer_norm(&self) -> Result<Tensor> {
        check_finite("layer_norm", &self.values)?;
        let (nrows, cols) = rows(&self.shape);
        let mut xhat = vec![0.0; self.len()];
        let mut inv_std = vec![0.0; nrows];
        for r in 0..nrows {
            let row = &self.values[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for (o, v) in xhat[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
        }
        let saved = Rc::new(xhat.clone());
        Ok(unary(self, xhat, move |g| {
            let mut out = vec![0.0; g.len()];
            for r in 0..nrows {
                let s = r * cols..(r + 1) * cols;
                let xr = &saved[s.clone()];
                let gr = &g[s.clone()];
                let gm = gr.iter().sum::<f64>() / cols as f64;
                let gx = gr.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                for ((o, gi), xi) in out[s].iter_mut().zip(gr).zip(xr) {
                    *o = inv_std[r] * (gi - gm - xi * gx);
                }
            }
            out
        }))
    }

    /// Mean softmax cross-entropy of logits `[C]` or `[B, C]` against labels.
    pub fn cross_entropy(&self, labels: &[usize]) -> Result<Tensor> {
        check_finite("cross_entropy", &self.values)?;
        let (nrows, cols) = rows(&self.shape);
        if labels.len() != nrows {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                lhs: self.shape.clone(),
                rhs: vec![labels.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= cols) {
            return Err(Error::IndexOutOfRange {
                index: bad,
                len: cols,
            });
        }
        let mut probs = vec![0.0; self.len()];
        let mut loss = 0.0;
        for r in 0..nrows {
            let row = &self.values[r * cols..(r + 1) * cols];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[labels[r]];
            for (p, v) in probs[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                *p = (v - lse).exp();
            }
        }
        loss /= nrows as f64;
        let labels = labels.to_vec();
        Tape::record(
            &[self],
            Vec::new(),
            vec![loss],
            Box::new(move |g| {
                let scale = g[0] / nrows as f64;
                let mut out: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (r, &l) in labels.iter().enumerate() {
                    out[r * cols + l] -= scale;
                }
                vec![out]
            }),
        )
    }

    /// Selects one entry as a scalar.
    pub fn gather(&self, index: usize) -> Result<Tensor> {
        let n = self.len();
        if index >= n {
            return Err(Error::IndexOutOfRange { index, len: n });
        }
        Tape::record(
            &[self],
            Vec::new(),
            vec![self.values[index]],
            Box::new(move |g| {
                let mut out = vec![0.0; n];
                out[index] = g[0];
                vec![out]
            }),
        )
    }

    /// Overwrites entries where `mask` is true with `fill`; those entries
    /// pass no gradient back.
    pub fn mask_fill(&self, mask: &[bool], fill: f64) -> Result<Tensor> {
        if mask.len() != self.len() {
            return Err(Error::ShapeMismatch {
                op: "mask_fill",
                lhs: self.shape.clone(),
                rhs: vec![mask.len()],
            });
        }
        let values = self
            .values
            .iter()
            .zip(mask)
            .map(|(&v, &m)| if m { fill } else { v })
            .collect();
        let mask = mask.to_vec();
        Ok(unary(self, values, move |g| {
            g.iter()
                .zip(&mask)
                .map(|(&v, &m)| if m { 0.0 } else { v })
                .collect()
        }))
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or(Error::EmptyBatch)?;
        let inner = first.shape.clone();
        let width = first.len();
        let mut values = Vec::with_capacity(width * parts.len());
        for p in parts {
            if p.shape != inner {
                return Err(Error::ShapeMismatch {
                    op: "stack",
                    lhs: inner,
                    rhs: p.shape.clone(),
                });
            }
            values.extend_from_slice(&p.values);
        }
        let mut shape = vec![parts.len()];
        shape.extend(&inner);
        let refs: Vec<&Tensor> = parts.iter().collect();
        let count = parts.len();
        Tape::record(
            &refs,
            shape,
            values,
            Box::new(move |g| (0..count).map(|i| g[i * width..(i + 1) * width].to_vec()).collect()),
        )
    }

    /// Mean over the leading axis of a `[T, n]` tensor.
    pub fn mean_rows(&self) -> Result<Tensor> {
        let &[t, n] = self.shape.as_slice() else {
            return Err(Error::ShapeMismatch {
                op: "mean_rows",
                lhs: self.shape.clone(),
                rhs: Vec::new(),
            });
        };
        let mut out = vec![0.0; n];
        for r in 0..t {
            for (o, v) in out.iter_mut().zip(&self.values[r * n..(r + 1) * n]) {
                *o += v;
            }
        }
        let inv = 1.0 / t as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        Tape::record(
            &[self],
            vec![n],
            out,
            Box::new(move |g| {
                let mut gi = Vec::with_capacity(t * n);
                for _ in 0..t {
                    gi.extend(g.iter().map(|v| v * inv));
                }
                vec![gi]
            }),
        )
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
