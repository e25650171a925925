//! 1-D convolutions (im2col-backed) and a fused bidirectional-GRU step op.

use std::rc::Rc;

use ndarray::{Array1, Array2, Array3, Ix1, Ix2, Ix3};

use super::{Tape, Var};

fn conv_out_len(l: usize, k: usize, stride: usize, pad: usize) -> usize {
    (l + 2 * pad - k) / stride + 1
}

/// im2col for (B,Ci,L) with zero padding: rows are (b,o), cols are (ci,kk).
fn im2col(x: &Array3<f32>, k: usize, stride: usize, pad: usize) -> Array2<f32> {
    let (bs, ci, l) = x.dim();
    let lo = conv_out_len(l, k, stride, pad);
    let mut col = Array2::<f32>::zeros((bs * lo, ci * k));
    for b in 0..bs {
        for o in 0..lo {
            let row = b * lo + o;
            for c in 0..ci {
                for kk in 0..k {
                    let ii = o * stride + kk;
                    if ii >= pad && ii - pad < l {
                        col[[row, c * k + kk]] = x[[b, c, ii - pad]];
                    }
                }
            }
        }
    }
    col
}

fn col2im(dcol: &Array2<f32>, bs: usize, ci: usize, l: usize, k: usize, stride: usize, pad: usize) -> Array3<f32> {
    let lo = conv_out_len(l, k, stride, pad);
    let mut dx = Array3::<f32>::zeros((bs, ci, l));
    for b in 0..bs {
        for o in 0..lo {
            let row = b * lo + o;
            for c in 0..ci {
                for kk in 0..k {
                    let ii = o * stride + kk;
                    if ii >= pad && ii - pad < l {
                        dx[[b, c, ii - pad]] += dcol[[row, c * k + kk]];
                    }
                }
            }
        }
    }
    dx
}

impl Tape {
    /// conv1d on (B,Ci,L) with weight (Co,Ci,k) and bias (Co,).
    pub fn conv1d(&self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let (vx, vw, vb) = (self.value(x), self.value(w), self.value(b));
        let x3 = vx.view().into_dimensionality::<Ix3>().expect("conv1d input 3-d").to_owned();
        let w3 = vw.view().into_dimensionality::<Ix3>().expect("conv1d weight 3-d");
        let bias = vb.view().into_dimensionality::<Ix1>().expect("conv1d bias 1-d");
        let (bs, ci, l) = x3.dim();
        let (co, ci2, k) = w3.dim();
        assert_eq!(ci, ci2, "conv1d channel mismatch");
        assert_eq!(bias.len(), co);
        let lo = conv_out_len(l, k, stride, pad);
        let col = Rc::new(im2col(&x3, k, stride, pad));
        let w2 = w3.to_shape((co, ci * k)).unwrap().to_owned();
        let y2 = col.dot(&w2.t()); // (B*Lo, Co)
        let mut y = Array3::<f32>::zeros((bs, co, lo));
        for bb in 0..bs {
            for o in 0..lo {
                for c in 0..co {
                    y[[bb, c, o]] = y2[[bb * lo + o, c]] + bias[c];
                }
            }
        }
        let col_b = Rc::clone(&col);
        self.push(
            y.into_dyn(),
            vec![x.0, w.0, b.0],
            Some(Box::new(move |g, emit| {
                let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                let mut g2 = Array2::<f32>::zeros((bs * lo, co));
                let mut db = Array1::<f32>::zeros(co);
                for bb in 0..bs {
                    for o in 0..lo {
                        for c in 0..co {
                            let gv = g3[[bb, c, o]];
                            g2[[bb * lo + o, c]] = gv;
                            db[c] += gv;
                        }
                    }
                }
                let w3 = vw.view().into_dimensionality::<Ix3>().unwrap();
                let w2 = w3.to_shape((co, ci * k)).unwrap().to_owned();
                let dw2 = g2.t().dot(&*col_b); // (Co, Ci*k)
                let dcol = g2.dot(&w2); // (B*Lo, Ci*k)
                let dx = col2im(&dcol, bs, ci, l, k, stride, pad);
                emit(0, dx.into_dyn());
                emit(1, dw2.into_shape_with_order((co, ci, k)).unwrap().into_dyn());
                emit(2, db.into_dyn());
            })),
        )
    }

    /// conv_transpose1d on (B,Ci,L) with weight (Ci,Co,k) and bias (Co,).
    /// Output length is (L-1)*stride + k - 2*pad.
    pub fn conv_transpose1d(&self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let (vx, vw, vb) = (self.value(x), self.value(w), self.value(b));
        let x3 = vx.view().into_dimensionality::<Ix3>().expect("convT input 3-d").to_owned();
        let w3 = vw.view().into_dimensionality::<Ix3>().expect("convT weight 3-d");
        let bias = vb.view().into_dimensionality::<Ix1>().expect("convT bias 1-d");
        let (bs, ci, l) = x3.dim();
        let (ci2, co, k) = w3.dim();
        assert_eq!(ci, ci2, "convT channel mismatch");
        assert_eq!(bias.len(), co);
        let lo = (l - 1) * stride + k - 2 * pad;
        // rows are (b,l), cols are ci
        let mut x2 = Array2::<f32>::zeros((bs * l, ci));
        for bb in 0..bs {
            for ll in 0..l {
                for c in 0..ci {
                    x2[[bb * l + ll, c]] = x3[[bb, c, ll]];
                }
            }
        }
        let x2 = Rc::new(x2);
        let w2 = w3.to_shape((ci, co * k)).unwrap().to_owned();
        let cols = x2.dot(&w2); // (B*L, Co*k)
        let mut y = Array3::<f32>::zeros((bs, co, lo));
        for bb in 0..bs {
            for ll in 0..l {
                for c in 0..co {
                    for kk in 0..k {
                        let o = ll * stride + kk;
                        if o >= pad && o - pad < lo {
                            y[[bb, c, o - pad]] += cols[[bb * l + ll, c * k + kk]];
                        }
                    }
                }
            }
        }
        for bb in 0..bs {
            for c in 0..co {
                for o in 0..lo {
                    y[[bb, c, o]] += bias[c];
                }
            }
        }
        let x2_b = Rc::clone(&x2);
        self.push(
            y.into_dyn(),
            vec![x.0, w.0, b.0],
            Some(Box::new(move |g, emit| {
                let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                let mut dcols = Array2::<f32>::zeros((bs * l, co * k));
                let mut db = Array1::<f32>::zeros(co);
                for bb in 0..bs {
                    for c in 0..co {
                        for o in 0..lo {
                            db[c] += g3[[bb, c, o]];
                        }
                    }
                    for ll in 0..l {
                        for c in 0..co {
                            for kk in 0..k {
                                let o = ll * stride + kk;
                                if o >= pad && o - pad < lo {
                                    dcols[[bb * l + ll, c * k + kk]] = g3[[bb, c, o - pad]];
                                }
                            }
                        }
                    }
                }
                let w3 = vw.view().into_dimensionality::<Ix3>().unwrap();
                let w2 = w3.to_shape((ci, co * k)).unwrap().to_owned();
                let dx2 = dcols.dot(&w2.t()); // (B*L, Ci)
                let dw2 = x2_b.t().dot(&dcols); // (Ci, Co*k)
                let mut dx = Array3::<f32>::zeros((bs, ci, l));
                for bb in 0..bs {
                    for ll in 0..l {
                        for c in 0..ci {
                            dx[[bb, c, ll]] = dx2[[bb * l + ll, c]];
                        }
                    }
                }
                emit(0, dx.into_dyn());
                emit(1, dw2.into_shape_with_order((ci, co, k)).unwrap().into_dyn());
                emit(2, db.into_dyn());
            })),
        )
    }

    /// Single-direction GRU over a (T,E) input sequence, returning all hidden
    /// states (T,H). Gate layout in `wx` (E,3H), `wh` (H,3H), `bias` (3H) is
    /// [update | reset | candidate]; the candidate uses
    /// n = tanh(x W_n + r * (h W_hn) + b_n). Backward is hand-rolled BPTT.
    pub fn gru_seq(&self, x: Var, wx: Var, wh: Var, bias: Var) -> Var {
        let (vx, vwx, vwh, vb) = (self.value(x), self.value(wx), self.value(wh), self.value(bias));
        let x2 = vx.view().into_dimensionality::<Ix2>().expect("gru input 2-d").to_owned();
        let wx2 = vwx.view().into_dimensionality::<Ix2>().unwrap().to_owned();
        let wh2 = vwh.view().into_dimensionality::<Ix2>().unwrap().to_owned();
        let b1 = vb.view().into_dimensionality::<Ix1>().unwrap().to_owned();
        let (t_len, e) = x2.dim();
        let h3 = wx2.ncols();
        assert_eq!(h3 % 3, 0);
        let h = h3 / 3;
        assert_eq!(wh2.dim(), (h, 3 * h));
        assert_eq!(wx2.nrows(), e);

        let gi = x2.dot(&wx2) + &b1; // (T,3H)
        let mut hs = Array2::<f32>::zeros((t_len, h));
        let mut zs = Array2::<f32>::zeros((t_len, h));
        let mut rs = Array2::<f32>::zeros((t_len, h));
        let mut ns = Array2::<f32>::zeros((t_len, h));
        let mut hns = Array2::<f32>::zeros((t_len, h)); // h_{t-1} W_hn slice
        let mut h_prev = Array1::<f32>::zeros(h);
        for t in 0..t_len {
            let hi = h_prev.dot(&wh2); // (3H)
            for j in 0..h {
                let z = sigmoid(gi[[t, j]] + hi[j]);
                let r = sigmoid(gi[[t, h + j]] + hi[h + j]);
                let hn = hi[2 * h + j];
                let n = (gi[[t, 2 * h + j]] + r * hn).tanh();
                zs[[t, j]] = z;
                rs[[t, j]] = r;
                ns[[t, j]] = n;
                hns[[t, j]] = hn;
                hs[[t, j]] = (1.0 - z) * n + z * h_prev[j];
            }
            h_prev.assign(&hs.row(t));
        }

        let caches = Rc::new((x2, zs, rs, ns, hns, hs.clone(), wx2, wh2));
        self.push(
            hs.into_dyn(),
            vec![x.0, wx.0, wh.0, bias.0],
            Some(Box::new(move |g, emit| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let (x2, zs, rs, ns, hns, hs, wx2, wh2) = &*caches;
                let (t_len, e) = x2.dim();
                let h = zs.ncols();
                let mut dgi_all = Array2::<f32>::zeros((t_len, 3 * h));
                let mut dwh = Array2::<f32>::zeros((h, 3 * h));
                let mut dh_carry = Array1::<f32>::zeros(h);
                for t in (0..t_len).rev() {
                    let mut dhi = Array1::<f32>::zeros(3 * h);
                    let mut dh_prev = Array1::<f32>::zeros(h);
                    for j in 0..h {
                        let dh_total = g2[[t, j]] + dh_carry[j];
                        let z = zs[[t, j]];
                        let r = rs[[t, j]];
                        let n = ns[[t, j]];
                        let hn = hns[[t, j]];
                        let hp = if t == 0 { 0.0 } else { hs[[t - 1, j]] };
                        let dz = dh_total * (hp - n);
                        let dn = dh_total * (1.0 - z);
                        dh_prev[j] += dh_total * z;
                        let dn_pre = dn * (1.0 - n * n);
                        let dr = dn_pre * hn;
                        let dhn = dn_pre * r;
                        let dz_pre = dz * z * (1.0 - z);
                        let dr_pre = dr * r * (1.0 - r);
                        dgi_all[[t, j]] = dz_pre;
                        dgi_all[[t, h + j]] = dr_pre;
                        dgi_all[[t, 2 * h + j]] = dn_pre;
                        dhi[j] = dz_pre;
                        dhi[h + j] = dr_pre;
                        dhi[2 * h + j] = dhn;
                    }
                    // dWh += h_{t-1}^T dhi ; dh_prev += dhi Wh^T
                    if t > 0 {
                        let hp = hs.row(t - 1);
                        for a in 0..h {
                            let hv = hp[a];
                            if hv != 0.0 {
                                for bcol in 0..3 * h {
                                    dwh[[a, bcol]] += hv * dhi[bcol];
                                }
                            }
                        }
                    }
                    for a in 0..h {
                        let mut s = 0.0f32;
                        for bcol in 0..3 * h {
                            s += dhi[bcol] * wh2[[a, bcol]];
                        }
                        dh_prev[a] += s;
                    }
                    dh_carry = dh_prev;
                }
                let dx = dgi_all.dot(&wx2.t()); // (T,E)
                let dwx = x2.t().dot(&dgi_all); // (E,3H)
                let dbias = dgi_all.sum_axis(ndarray::Axis(0));
                debug_assert_eq!(dx.dim(), (t_len, e));
                emit(0, dx.into_dyn());
                emit(1, dwx.into_dyn());
                emit(2, dwh.into_dyn());
                emit(3, dbias.into_dyn());
            })),
        )
    }
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}
