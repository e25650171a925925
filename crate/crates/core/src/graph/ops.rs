//! Primitive differentiable operations.
//!
//! Every op pushes one node whose backward closure captures exactly the
//! values it needs (via `Rc`, so captures are cheap). Shape errors here are
//! programming errors and panic; user-facing validation happens at module
//! boundaries before graphs are built.

use std::rc::Rc;

use ndarray::{Array1, Array2, Array3, ArrayView2, Axis, Ix1, Ix2, Ix3, Slice};

use super::{Arr, Tape, Var};

fn as2(a: &Arr) -> ArrayView2<'_, f32> {
    a.view().into_dimensionality::<Ix2>().expect("expected 2-d array")
}

fn scalar_of(g: &Arr) -> f32 {
    debug_assert_eq!(g.len(), 1);
    *g.iter().next().unwrap()
}

impl Tape {
    // ---- elementwise ----

    pub fn add(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add shape mismatch");
        let out = &*va + &*vb;
        self.push(
            out,
            vec![a.0, b.0],
            Some(Box::new(move |g, emit| {
                emit(0, g.clone());
                emit(1, g.clone());
            })),
        )
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "sub shape mismatch");
        let out = &*va - &*vb;
        self.push(
            out,
            vec![a.0, b.0],
            Some(Box::new(move |g, emit| {
                emit(0, g.clone());
                emit(1, -g);
            })),
        )
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mul shape mismatch");
        let out = &*va * &*vb;
        self.push(
            out,
            vec![a.0, b.0],
            Some(Box::new(move |g, emit| {
                emit(0, g * &*vb);
                emit(1, g * &*va);
            })),
        )
    }

    pub fn scale(&self, a: Var, c: f32) -> Var {
        let va = self.value(a);
        let out = va.mapv(|x| x * c);
        self.push(
            out,
            vec![a.0],
            Some(Box::new(move |g, emit| emit(0, g.mapv(|x| x * c)))),
        )
    }

    pub fn relu(&self, a: Var) -> Var {
        let va = self.value(a);
        let out = va.mapv(|x| x.max(0.0));
        self.push(
            out,
            vec![a.0],
            Some(Box::new(move |g, emit| {
                let mut dx = g.clone();
                dx.zip_mut_with(&va, |d, &x| {
                    if x <= 0.0 {
                        *d = 0.0;
                    }
                });
                emit(0, dx);
            })),
        )
    }

    pub fn gelu(&self, a: Var) -> Var {
        const C: f32 = 0.797_884_6; // sqrt(2/pi)
        const A: f32 = 0.044_715;
        let va = self.value(a);
        let out = va.mapv(|x| 0.5 * x * (1.0 + (C * (x + A * x * x * x)).tanh()));
        self.push(
            out,
            vec![a.0],
            Some(Box::new(move |g, emit| {
                let mut dx = g.clone();
                dx.zip_mut_with(&va, |d, &x| {
                    let t = (C * (x + A * x * x * x)).tanh();
                    let du = C * (1.0 + 3.0 * A * x * x);
                    *d *= 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
                });
                emit(0, dx);
            })),
        )
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let va = self.value(a);
        let out = va.mapv(|x| 1.0 / (1.0 + (-x).exp()));
        let y = Rc::new(out.clone());
        self.push(
            out,
            vec![a.0],
            Some(Box::new(move |g, emit| {
                let mut dx = g.clone();
                dx.zip_mut_with(&y, |d, &v| *d *= v * (1.0 - v));
                emit(0, dx);
            })),
        )
    }

    pub fn tanh(&self, a: Var) -> Var {
        let va = self.value(a);
        let out = va.mapv(f32::tanh);
        let y = Rc::new(out.clone());
        self.push(
            out,
            vec![a.0],
            Some(Box::new(move |g, emit| {
                let mut dx = g.clone();
                dx.zip_mut_with(&y, |d, &v| *d *= 1.0 - v * v);
                emit(0, dx);
            })),
        )
    }

    /// Value passthrough that blocks gradient flow.
    pub fn stop_gradient(&self, a: Var) -> Var {
        let va = self.value(a);
        self.push((*va).clone(), Vec::new(), None)
    }

    // ---- structural ----

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Var {
        let va = self.value(a);
        assert_eq!(va.len(), shape.iter().product::<usize>(), "reshape length mismatch");
        let old_shape: Vec<usize> = va.shape().to_vec();
        let flat: Vec<f32> = va.as_standard_layout().iter().copied().collect();
        let out = Arr::from_shape_vec(shape.to_vec(), flat).unwrap();
        self.push(
            out,
            vec![a.0],
            Some(Box::new(move |g, emit| {
                let flat: Vec<f32> = g.as_standard_layout().iter().copied().collect();
                emit(0, Arr::from_shape_vec(old_shape.clone(), flat).unwrap());
            })),
        )
    }

    /// Permute a 3-d array's axes (copies to standard layout).
    pub fn permute3(&self, a: Var, perm: [usize; 3]) -> Var {
        let va = self.value(a);
        let v3 = va.view().into_dimensionality::<Ix3>().expect("permute3 needs 3-d");
        let out = v3.permuted_axes(perm).as_standard_layout().to_owned().into_dyn();
        let mut inv = [0usize; 3];
        for (i, &p) in perm.iter().enumerate() {
            inv[p] = i;
        }
        self.push(
            out,
            vec![a.0],
            Some(Box::new(move |g, emit| {
                let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                emit(0, g3.permuted_axes(inv).as_standard_layout().to_owned().into_dyn());
            })),
        )
    }

    /// Concatenate along rows (axis 0).
    pub fn concat_rows(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let values: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
        let views: Vec<_> = values.iter().map(|v| v.view()).collect();
        let out = ndarray::concatenate(Axis(0), &views).expect("concat_rows shape mismatch");
        let row_counts: Vec<usize> = values.iter().map(|v| v.shape()[0]).collect();
        self.push(
            out,
            parts.iter().map(|p| p.0).collect(),
            Some(Box::new(move |g, emit| {
                let mut start = 0usize;
                for (slot, &rows) in row_counts.iter().enumerate() {
                    let part = g
                        .slice_axis(Axis(0), Slice::from(start..start + rows))
                        .to_owned();
                    emit(slot, part);
                    start += rows;
                }
            })),
        )
    }

    pub fn slice_rows(&self, a: Var, start: usize, end: usize) -> Var {
        let va = self.value(a);
        let out = va.slice_axis(Axis(0), Slice::from(start..end)).to_owned();
        let full_shape: Vec<usize> = va.shape().to_vec();
        self.push(
            out,
            vec![a.0],
            Some(Box::new(move |g, emit| {
                let mut dx = Arr::zeros(full_shape.clone());
                dx.slice_axis_mut(Axis(0), Slice::from(start..end)).assign(g);
                emit(0, dx);
            })),
        )
    }

    pub fn slice_cols(&self, a: Var, start: usize, end: usize) -> Var {
        let va = self.value(a);
        let out = va.slice_axis(Axis(1), Slice::from(start..end)).to_owned();
        let full_shape: Vec<usize> = va.shape().to_vec();
        self.push(
            out,
            vec![a.0],
            Some(Box::new(move |g, emit| {
                let mut dx = Arr::zeros(full_shape.clone());
                dx.slice_axis_mut(Axis(1), Slice::from(start..end)).assign(g);
                emit(0, dx);
            })),
        )
    }

    /// Reverse row order (used by the backward direction of recurrent encoders).
    pub fn flip_rows(&self, a: Var) -> Var {
        let va = self.value(a);
        let out = va.slice_axis(Axis(0), Slice::new(0, None, -1)).to_owned();
        self.push(
            out,
            vec![a.0],
            Some(Box::new(move |g, emit| {
                emit(0, g.slice_axis(Axis(0), Slice::new(0, None, -1)).to_owned());
            })),
        )
    }

    /// Select rows of `a` by index; gradients scatter-add back.
    pub fn gather_rows(&self, a: Var, idx: Rc<Vec<usize>>) -> Var {
        let va = self.value(a);
        let a2 = as2(&va);
        let (n, d) = a2.dim();
        let mut out = Array2::<f32>::zeros((idx.len(), d));
        for (row, &i) in idx.iter().enumerate() {
            assert!(i < n, "gather_rows index {i} out of range {n}");
            out.row_mut(row).assign(&a2.row(i));
        }
        let idx_b = Rc::clone(&idx);
        self.push(
            out.into_dyn(),
            vec![a.0],
            Some(Box::new(move |g, emit| {
                let g2 = as2(g);
                let mut dx = Array2::<f32>::zeros((n, d));
                for (row, &i) in idx_b.iter().enumerate() {
                    let mut target = dx.row_mut(i);
                    target += &g2.row(row);
                }
                emit(0, dx.into_dyn());
            })),
        )
    }

    // ---- linear algebra ----

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let a2 = as2(&va);
        let b2 = as2(&vb);
        assert_eq!(a2.ncols(), b2.nrows(), "matmul inner dims");
        let out = a2.dot(&b2).into_dyn();
        self.push(
            out,
            vec![a.0, b.0],
            Some(Box::new(move |g, emit| {
                let g2 = as2(g);
                emit(0, g2.dot(&as2(&vb).t()).into_dyn());
                emit(1, as2(&va).t().dot(&g2).into_dyn());
            })),
        )
    }

    /// Batched matmul on (B,m,k) x (B,k,n).
    pub fn bmm(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let a3 = va.view().into_dimensionality::<Ix3>().expect("bmm a 3-d");
        let b3 = vb.view().into_dimensionality::<Ix3>().expect("bmm b 3-d");
        let (bs, m, k) = a3.dim();
        let (bs2, k2, n) = b3.dim();
        assert_eq!(bs, bs2);
        assert_eq!(k, k2);
        let mut out = Array3::<f32>::zeros((bs, m, n));
        for i in 0..bs {
            out.index_axis_mut(Axis(0), i)
                .assign(&a3.index_axis(Axis(0), i).dot(&b3.index_axis(Axis(0), i)));
        }
        self.push(
            out.into_dyn(),
            vec![a.0, b.0],
            Some(Box::new(move |g, emit| {
                let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                let a3 = va.view().into_dimensionality::<Ix3>().unwrap();
                let b3 = vb.view().into_dimensionality::<Ix3>().unwrap();
                let mut da = Array3::<f32>::zeros(a3.dim());
                let mut db = Array3::<f32>::zeros(b3.dim());
                for i in 0..g3.dim().0 {
                    let gi = g3.index_axis(Axis(0), i);
                    da.index_axis_mut(Axis(0), i)
                        .assign(&gi.dot(&b3.index_axis(Axis(0), i).t()));
                    db.index_axis_mut(Axis(0), i)
                        .assign(&a3.index_axis(Axis(0), i).t().dot(&gi));
                }
                emit(0, da.into_dyn());
                emit(1, db.into_dyn());
            })),
        )
    }

    /// Add a bias row vector to every row of a 2-d array.
    pub fn add_bias(&self, x: Var, b: Var) -> Var {
        let (vx, vb) = (self.value(x), self.value(b));
        let x2 = as2(&vx);
        let b1 = vb.view().into_dimensionality::<Ix1>().expect("bias 1-d");
        assert_eq!(x2.ncols(), b1.len());
        let out = (&x2 + &b1).into_dyn();
        self.push(
            out,
            vec![x.0, b.0],
            Some(Box::new(move |g, emit| {
                let g2 = as2(g);
                emit(1, g2.sum_axis(Axis(0)).into_dyn());
                emit(0, g.clone());
            })),
        )
    }

    // ---- reductions & losses ----

    pub fn sum_all(&self, a: Var) -> Var {
        let va = self.value(a);
        let out = Arr::from_elem(vec![1], va.sum());
        let shape: Vec<usize> = va.shape().to_vec();
        self.push(
            out,
            vec![a.0],
            Some(Box::new(move |g, emit| {
                emit(0, Arr::from_elem(shape.clone(), scalar_of(g)));
            })),
        )
    }

    pub fn mean_all(&self, a: Var) -> Var {
        let va = self.value(a);
        let n = va.len() as f32;
        let out = Arr::from_elem(vec![1], va.sum() / n);
        let shape: Vec<usize> = va.shape().to_vec();
        self.push(
            out,
            vec![a.0],
            Some(Box::new(move |g, emit| {
                emit(0, Arr::from_elem(shape.clone(), scalar_of(g) / n));
            })),
        )
    }

    /// Mean of squared entries (used by codebook embedding/commitment terms).
    pub fn mean_sq(&self, a: Var) -> Var {
        let va = self.value(a);
        let n = va.len() as f32;
        let out = Arr::from_elem(vec![1], va.iter().map(|x| x * x).sum::<f32>() / n);
        self.push(
            out,
            vec![a.0],
            Some(Box::new(move |g, emit| {
                let s = 2.0 * scalar_of(g) / n;
                emit(0, va.mapv(|x| x * s));
            })),
        )
    }

    /// Mean over rows of the Euclidean row norm: (1/N) sum_i sqrt(sum_j a_ij^2 + eps).
    pub fn mean_row_norm(&self, a: Var, eps: f32) -> Var {
        let va = self.value(a);
        let a2 = as2(&va);
        let n = a2.nrows() as f32;
        let norms: Vec<f32> = a2
            .rows()
            .into_iter()
            .map(|r| (r.iter().map(|x| x * x).sum::<f32>() + eps).sqrt())
            .collect();
        let out = Arr::from_elem(vec![1], norms.iter().sum::<f32>() / n);
        let norms = Rc::new(norms);
        self.push(
            out,
            vec![a.0],
            Some(Box::new(move |g, emit| {
                let s = scalar_of(g) / n;
                let a2 = as2(&va);
                let mut dx = Array2::<f32>::zeros(a2.dim());
                for (i, mut row) in dx.rows_mut().into_iter().enumerate() {
                    let inv = s / norms[i];
                    row.assign(&a2.row(i).mapv(|x| x * inv));
                }
                emit(0, dx.into_dyn());
            })),
        )
    }

    /// Sum over rows of cross-entropy between `logits` rows and integer targets.
    /// Stable log-softmax; backward is (softmax - onehot) scaled by the output grad.
    pub fn ce_sum(&self, logits: Var, targets: Rc<Vec<usize>>) -> Var {
        let vl = self.value(logits);
        let l2 = as2(&vl);
        let (n, v) = l2.dim();
        assert_eq!(n, targets.len(), "ce_sum targets length");
        let mut probs = Array2::<f32>::zeros((n, v));
        let mut total = 0.0f64;
        for (i, row) in l2.rows().into_iter().enumerate() {
            let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let mut z = 0.0f32;
            for &x in row.iter() {
                z += (x - m).exp();
            }
            let lse = m + z.ln();
            total += f64::from(lse - row[targets[i]]);
            let mut p = probs.row_mut(i);
            for (j, &x) in row.iter().enumerate() {
                p[j] = (x - m).exp() / z;
            }
        }
        let probs = Rc::new(probs);
        let targets_b = Rc::clone(&targets);
        let out = Arr::from_elem(vec![1], total as f32);
        self.push(
            out,
            vec![logits.0],
            Some(Box::new(move |g, emit| {
                let s = scalar_of(g);
                let mut dl = (*probs).clone();
                for (i, &t) in targets_b.iter().enumerate() {
                    dl[[i, t]] -= 1.0;
                }
                dl.mapv_inplace(|x| x * s);
                emit(0, dl.into_dyn());
            })),
        )
    }

    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var, eps: f32) -> Var {
        let (vx, vg, vb) = (self.value(x), self.value(gamma), self.value(beta));
        let x2 = as2(&vx);
        let (n, d) = x2.dim();
        let g1 = vg.view().into_dimensionality::<Ix1>().unwrap();
        let b1 = vb.view().into_dimensionality::<Ix1>().unwrap();
        assert_eq!(g1.len(), d);
        let mut xhat = Array2::<f32>::zeros((n, d));
        let mut invstd = Array1::<f32>::zeros(n);
        let mut out = Array2::<f32>::zeros((n, d));
        for i in 0..n {
            let row = x2.row(i);
            let mean = row.sum() / d as f32;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
            let is = 1.0 / (var + eps).sqrt();
            invstd[i] = is;
            for j in 0..d {
                let xh = (row[j] - mean) * is;
                xhat[[i, j]] = xh;
                out[[i, j]] = xh * g1[j] + b1[j];
            }
        }
        let xhat = Rc::new(xhat);
        let invstd = Rc::new(invstd);
        self.push(
            out.into_dyn(),
            vec![x.0, gamma.0, beta.0],
            Some(Box::new(move |g, emit| {
                let g2 = as2(g);
                let gamma1 = vg.view().into_dimensionality::<Ix1>().unwrap();
                let mut dgamma = Array1::<f32>::zeros(d);
                let mut dbeta = Array1::<f32>::zeros(d);
                let mut dx = Array2::<f32>::zeros((n, d));
                for i in 0..n {
                    let gr = g2.row(i);
                    let xh = xhat.row(i);
                    let mut sum_gg = 0.0f32;
                    let mut sum_gg_xh = 0.0f32;
                    for j in 0..d {
                        let gg = gr[j] * gamma1[j];
                        sum_gg += gg;
                        sum_gg_xh += gg * xh[j];
                        dgamma[j] += gr[j] * xh[j];
                        dbeta[j] += gr[j];
                    }
                    let m1 = sum_gg / d as f32;
                    let m2 = sum_gg_xh / d as f32;
                    for j in 0..d {
                        let gg = gr[j] * gamma1[j];
                        dx[[i, j]] = invstd[i] * (gg - m1 - xh[j] * m2);
                    }
                }
                emit(0, dx.into_dyn());
                emit(1, dgamma.into_dyn());
                emit(2, dbeta.into_dyn());
            })),
        )
    }

    /// Row softmax over the last axis of (H,T,T) scores, with a boolean
    /// allow-mask shared across heads. Disallowed entries get probability 0.
    pub fn masked_softmax(&self, scores: Var, mask: Rc<Array2<bool>>) -> Var {
        let vs = self.value(scores);
        let s3 = vs.view().into_dimensionality::<Ix3>().expect("scores 3-d");
        let (h, t, t2) = s3.dim();
        assert_eq!(t, t2);
        assert_eq!(mask.dim(), (t, t2), "mask shape");
        let mut out = Array3::<f32>::zeros((h, t, t));
        for hi in 0..h {
            for i in 0..t {
                let mut m = f32::NEG_INFINITY;
                for j in 0..t {
                    if mask[[i, j]] {
                        m = m.max(s3[[hi, i, j]]);
                    }
                }
                let mut z = 0.0f32;
                for j in 0..t {
                    if mask[[i, j]] {
                        let e = (s3[[hi, i, j]] - m).exp();
                        out[[hi, i, j]] = e;
                        z += e;
                    }
                }
                debug_assert!(z > 0.0, "attention row {i} fully masked");
                for j in 0..t {
                    out[[hi, i, j]] /= z;
                }
            }
        }
        let y = Rc::new(out.clone());
        self.push(
            out.into_dyn(),
            vec![scores.0],
            Some(Box::new(move |g, emit| {
                let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                let mut ds = Array3::<f32>::zeros((h, t, t));
                for hi in 0..h {
                    for i in 0..t {
                        let mut dot = 0.0f32;
                        for j in 0..t {
                            dot += g3[[hi, i, j]] * y[[hi, i, j]];
                        }
                        for j in 0..t {
                            ds[[hi, i, j]] = y[[hi, i, j]] * (g3[[hi, i, j]] - dot);
                        }
                    }
                }
                emit(0, ds.into_dyn());
            })),
        )
    }

    // ---- rowwise geometry (3-d rotations as (N,9) row-major matrices) ----

    pub fn normalize_rows(&self, a: Var, eps: f32) -> Var {
        let va = self.value(a);
        let a2 = as2(&va);
        let (n, d) = a2.dim();
        let mut out = Array2::<f32>::zeros((n, d));
        let mut norms = Vec::with_capacity(n);
        for i in 0..n {
            let norm = (a2.row(i).iter().map(|x| x * x).sum::<f32>() + eps).sqrt();
            norms.push(norm);
            out.row_mut(i).assign(&a2.row(i).mapv(|x| x / norm));
        }
        let y = Rc::new(out.clone());
        let norms = Rc::new(norms);
        self.push(
            out.into_dyn(),
            vec![a.0],
            Some(Box::new(move |g, emit| {
                let g2 = as2(g);
                let mut dx = Array2::<f32>::zeros((n, d));
                for i in 0..n {
                    let yi = y.row(i);
                    let gi = g2.row(i);
                    let dot = gi.dot(&yi);
                    for j in 0..d {
                        dx[[i, j]] = (gi[j] - yi[j] * dot) / norms[i];
                    }
                }
                emit(0, dx.into_dyn());
            })),
        )
    }

    pub fn rowwise_dot(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let a2 = as2(&va);
        let b2 = as2(&vb);
        assert_eq!(a2.dim(), b2.dim());
        let n = a2.nrows();
        let mut out = Array2::<f32>::zeros((n, 1));
        for i in 0..n {
            out[[i, 0]] = a2.row(i).dot(&b2.row(i));
        }
        self.push(
            out.into_dyn(),
            vec![a.0, b.0],
            Some(Box::new(move |g, emit| {
                let g2 = as2(g);
                let a2 = as2(&va);
                let b2 = as2(&vb);
                let mut da = Array2::<f32>::zeros(a2.dim());
                let mut db = Array2::<f32>::zeros(b2.dim());
                for i in 0..a2.nrows() {
                    let gi = g2[[i, 0]];
                    da.row_mut(i).assign(&b2.row(i).mapv(|x| x * gi));
                    db.row_mut(i).assign(&a2.row(i).mapv(|x| x * gi));
                }
                emit(0, da.into_dyn());
                emit(1, db.into_dyn());
            })),
        )
    }

    /// Broadcast-multiply rows of (N,d) by a column (N,1).
    pub fn mul_col(&self, a: Var, c: Var) -> Var {
        let (va, vc) = (self.value(a), self.value(c));
        let a2 = as2(&va);
        let c2 = as2(&vc);
        assert_eq!(c2.ncols(), 1);
        assert_eq!(a2.nrows(), c2.nrows());
        let mut out = a2.to_owned();
        for (i, mut row) in out.rows_mut().into_iter().enumerate() {
            row.mapv_inplace(|x| x * c2[[i, 0]]);
        }
        self.push(
            out.into_dyn(),
            vec![a.0, c.0],
            Some(Box::new(move |g, emit| {
                let g2 = as2(g);
                let a2 = as2(&va);
                let c2 = as2(&vc);
                let mut da = g2.to_owned();
                let mut dc = Array2::<f32>::zeros((a2.nrows(), 1));
                for i in 0..a2.nrows() {
                    dc[[i, 0]] = g2.row(i).dot(&a2.row(i));
                    da.row_mut(i).mapv_inplace(|x| x * c2[[i, 0]]);
                }
                emit(0, da.into_dyn());
                emit(1, dc.into_dyn());
            })),
        )
    }

    /// Rowwise 3-vector cross product on (N,3) arrays.
    pub fn cross3(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let a2 = as2(&va);
        let b2 = as2(&vb);
        assert_eq!(a2.ncols(), 3);
        assert_eq!(a2.dim(), b2.dim());
        let n = a2.nrows();
        let mut out = Array2::<f32>::zeros((n, 3));
        for i in 0..n {
            let (ax, ay, az) = (a2[[i, 0]], a2[[i, 1]], a2[[i, 2]]);
            let (bx, by, bz) = (b2[[i, 0]], b2[[i, 1]], b2[[i, 2]]);
            out[[i, 0]] = ay * bz - az * by;
            out[[i, 1]] = az * bx - ax * bz;
            out[[i, 2]] = ax * by - ay * bx;
        }
        self.push(
            out.into_dyn(),
            vec![a.0, b.0],
            Some(Box::new(move |g, emit| {
                let g2 = as2(g);
                let a2 = as2(&va);
                let b2 = as2(&vb);
                let n = a2.nrows();
                let mut da = Array2::<f32>::zeros((n, 3));
                let mut db = Array2::<f32>::zeros((n, 3));
                for i in 0..n {
                    let (gx, gy, gz) = (g2[[i, 0]], g2[[i, 1]], g2[[i, 2]]);
                    let (ax, ay, az) = (a2[[i, 0]], a2[[i, 1]], a2[[i, 2]]);
                    let (bx, by, bz) = (b2[[i, 0]], b2[[i, 1]], b2[[i, 2]]);
                    // dL/da = b x g ; dL/db = g x a
                    da[[i, 0]] = by * gz - bz * gy;
                    da[[i, 1]] = bz * gx - bx * gz;
                    da[[i, 2]] = bx * gy - by * gx;
                    db[[i, 0]] = gy * az - gz * ay;
                    db[[i, 1]] = gz * ax - gx * az;
                    db[[i, 2]] = gx * ay - gy * ax;
                }
                emit(0, da.into_dyn());
                emit(1, db.into_dyn());
            })),
        )
    }

    /// Assemble (N,9) row-major rotation matrices from three column vectors.
    pub fn cols_to_mat3(&self, c1: Var, c2: Var, c3: Var) -> Var {
        let (v1, v2, v3) = (self.value(c1), self.value(c2), self.value(c3));
        let (a1, a2c, a3) = (as2(&v1), as2(&v2), as2(&v3));
        let n = a1.nrows();
        assert!(a1.ncols() == 3 && a2c.ncols() == 3 && a3.ncols() == 3);
        let mut out = Array2::<f32>::zeros((n, 9));
        for i in 0..n {
            for r in 0..3 {
                out[[i, r * 3]] = a1[[i, r]];
                out[[i, r * 3 + 1]] = a2c[[i, r]];
                out[[i, r * 3 + 2]] = a3[[i, r]];
            }
        }
        self.push(
            out.into_dyn(),
            vec![c1.0, c2.0, c3.0],
            Some(Box::new(move |g, emit| {
                let g2 = as2(g);
                let n = g2.nrows();
                for col in 0..3 {
                    let mut d = Array2::<f32>::zeros((n, 3));
                    for i in 0..n {
                        for r in 0..3 {
                            d[[i, r]] = g2[[i, r * 3 + col]];
                        }
                    }
                    emit(col, d.into_dyn());
                }
            })),
        )
    }

    /// Rowwise 3x3 matrix product on (N,9) row-major matrices.
    pub fn bmm3(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let a2 = as2(&va);
        let b2 = as2(&vb);
        assert!(a2.ncols() == 9 && b2.ncols() == 9);
        let n = a2.nrows();
        let mut out = Array2::<f32>::zeros((n, 9));
        for i in 0..n {
            for r in 0..3 {
                for c in 0..3 {
                    let mut s = 0.0f32;
                    for k in 0..3 {
                        s += a2[[i, r * 3 + k]] * b2[[i, k * 3 + c]];
                    }
                    out[[i, r * 3 + c]] = s;
                }
            }
        }
        self.push(
            out.into_dyn(),
            vec![a.0, b.0],
            Some(Box::new(move |g, emit| {
                let g2 = as2(g);
                let a2 = as2(&va);
                let b2 = as2(&vb);
                let n = a2.nrows();
                let mut da = Array2::<f32>::zeros((n, 9));
                let mut db = Array2::<f32>::zeros((n, 9));
                for i in 0..n {
                    // dA = G B^T, dB = A^T G
                    for r in 0..3 {
                        for c in 0..3 {
                            let mut sa = 0.0f32;
                            let mut sb = 0.0f32;
                            for k in 0..3 {
                                sa += g2[[i, r * 3 + k]] * b2[[i, c * 3 + k]];
                                sb += a2[[i, k * 3 + r]] * g2[[i, k * 3 + c]];
                            }
                            da[[i, r * 3 + c]] = sa;
                            db[[i, r * 3 + c]] = sb;
                        }
                    }
                }
                emit(0, da.into_dyn());
                emit(1, db.into_dyn());
            })),
        )
    }

    /// Apply rowwise rotations (N,9) to a fixed set of k points (k,3),
    /// producing (N, 3k) with point i occupying columns 3i..3i+3.
    pub fn rot_points(&self, r: Var, points: Rc<Array2<f32>>) -> Var {
        let vr = self.value(r);
        let r2 = as2(&vr);
        assert_eq!(r2.ncols(), 9);
        let n = r2.nrows();
        let k = points.nrows();
        let mut out = Array2::<f32>::zeros((n, 3 * k));
        for i in 0..n {
            for p in 0..k {
                for c in 0..3 {
                    let mut s = 0.0f32;
                    for d in 0..3 {
                        s += r2[[i, c * 3 + d]] * points[[p, d]];
                    }
                    out[[i, p * 3 + c]] = s;
                }
            }
        }
        let pts = Rc::clone(&points);
        self.push(
            out.into_dyn(),
            vec![r.0],
            Some(Box::new(move |g, emit| {
                let g2 = as2(g);
                let n = g2.nrows();
                let k = pts.nrows();
                let mut dr = Array2::<f32>::zeros((n, 9));
                for i in 0..n {
                    for p in 0..k {
                        for c in 0..3 {
                            let gv = g2[[i, p * 3 + c]];
                            for d in 0..3 {
                                dr[[i, c * 3 + d]] += gv * pts[[p, d]];
                            }
                        }
                    }
                }
                emit(0, dr.into_dyn());
            })),
        )
    }

    /// Add a (N,3) translation to every 3-vector block of (N,3k).
    pub fn add_tile3(&self, x: Var, t: Var) -> Var {
        let (vx, vt) = (self.value(x), self.value(t));
        let x2 = as2(&vx);
        let t2 = as2(&vt);
        assert_eq!(t2.ncols(), 3);
        assert_eq!(x2.nrows(), t2.nrows());
        assert_eq!(x2.ncols() % 3, 0);
        let k = x2.ncols() / 3;
        let mut out = x2.to_owned();
        for i in 0..x2.nrows() {
            for p in 0..k {
                for c in 0..3 {
                    out[[i, p * 3 + c]] += t2[[i, c]];
                }
            }
        }
        self.push(
            out.into_dyn(),
            vec![x.0, t.0],
            Some(Box::new(move |g, emit| {
                let g2 = as2(g);
                let n = g2.nrows();
                let k = g2.ncols() / 3;
                let mut dt = Array2::<f32>::zeros((n, 3));
                for i in 0..n {
                    for p in 0..k {
                        for c in 0..3 {
                            dt[[i, c]] += g2[[i, p * 3 + c]];
                        }
                    }
                }
                emit(0, g.clone());
                emit(1, dt.into_dyn());
            })),
        )
    }
}
