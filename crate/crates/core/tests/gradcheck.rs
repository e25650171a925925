//! Finite-difference checks for every primitive op's backward pass.
//!
//! Each case builds a scalar loss from a parameter, computes the analytic
//! gradient with the tape, and compares against central differences of the
//! forward value. Tolerances account for f32 rounding.

use std::rc::Rc;

use ndarray::Array2;
use unipose_core::graph::nn::{randn_array, ParamStore};
use unipose_core::graph::{Arr, Tape, Var};
use unipose_core::rng::rng_from_seed;

fn check_gradient(
    name: &str,
    shape: &[usize],
    seed: u64,
    f: impl Fn(&Tape, &ParamStore, usize) -> Var,
) {
    let mut rng = rng_from_seed(seed);
    let base = randn_array(&mut rng, shape, 0.5);
    let mut store = ParamStore::new();
    let slot = store.add("x", base.clone(), true);

    let tape = Tape::new();
    let loss = f(&tape, &store, slot);
    assert_eq!(tape.value(loss).len(), 1, "{name}: loss must be scalar");
    let grads = tape.backward(loss, store.len());
    let analytic = grads.slots[slot]
        .clone()
        .expect("missing gradient")
        .as_standard_layout()
        .to_owned();

    let eps = 1e-2f32;
    let flat_len = base.len();
    // probe a deterministic spread of coordinates to keep the test fast
    let stride = (flat_len / 24).max(1);
    for lin in (0..flat_len).step_by(stride) {
        let mut plus = base.clone();
        let mut minus = base.clone();
        {
            let p = plus.as_slice_mut().unwrap();
            p[lin] += eps;
            let m = minus.as_slice_mut().unwrap();
            m[lin] -= eps;
        }
        let mut s2 = ParamStore::new();
        let sp = s2.add("x", plus, true);
        let tp = Tape::new();
        let lp = tp.scalar(f(&tp, &s2, sp)) as f64;

        let mut s3 = ParamStore::new();
        let sm = s3.add("x", minus, true);
        let tm = Tape::new();
        let lm = tm.scalar(f(&tm, &s3, sm)) as f64;

        let fd = ((lp - lm) / (2.0 * eps as f64)) as f32;
        let an = analytic.as_slice().unwrap()[lin];
        let denom = an.abs().max(fd.abs()).max(1e-2);
        let rel = (an - fd).abs() / denom;
        assert!(
            rel < 2e-2,
            "{name}: grad mismatch at {lin}: analytic {an} vs fd {fd} (rel {rel})"
        );
    }
}

fn aux(t: &Tape, seed: u64, shape: &[usize]) -> Var {
    let mut rng = rng_from_seed(seed);
    t.input(randn_array(&mut rng, shape, 0.5))
}

#[test]
fn elementwise_ops() {
    check_gradient("add", &[3, 4], 1, |t, s, p| {
        let x = t.param(s, p);
        let y = aux(t, 100, &[3, 4]);
        t.mean_sq(t.add(x, y))
    });
    check_gradient("sub", &[3, 4], 2, |t, s, p| {
        let x = t.param(s, p);
        let y = aux(t, 101, &[3, 4]);
        t.mean_sq(t.sub(y, x))
    });
    check_gradient("mul", &[3, 4], 3, |t, s, p| {
        let x = t.param(s, p);
        let y = aux(t, 102, &[3, 4]);
        t.mean_all(t.mul(x, y))
    });
    check_gradient("scale", &[5], 4, |t, s, p| t.mean_sq(t.scale(t.param(s, p), -2.5)));
    check_gradient("relu", &[4, 4], 5, |t, s, p| t.mean_sq(t.relu(t.param(s, p))));
    check_gradient("gelu", &[4, 4], 6, |t, s, p| t.mean_sq(t.gelu(t.param(s, p))));
    check_gradient("sigmoid", &[4, 4], 7, |t, s, p| t.mean_sq(t.sigmoid(t.param(s, p))));
    check_gradient("tanh", &[4, 4], 8, |t, s, p| t.mean_sq(t.tanh(t.param(s, p))));
}

#[test]
fn structural_ops() {
    check_gradient("reshape", &[4, 6], 10, |t, s, p| {
        let x = t.reshape(t.param(s, p), &[2, 12]);
        t.mean_sq(x)
    });
    check_gradient("permute3", &[2, 3, 4], 11, |t, s, p| {
        let x = t.permute3(t.param(s, p), [2, 0, 1]);
        t.mean_sq(x)
    });
    check_gradient("concat_rows", &[3, 4], 12, |t, s, p| {
        let x = t.param(s, p);
        let y = aux(t, 110, &[2, 4]);
        t.mean_sq(t.concat_rows(&[x, y, x]))
    });
    check_gradient("slice_rows", &[5, 3], 13, |t, s, p| {
        t.mean_sq(t.slice_rows(t.param(s, p), 1, 4))
    });
    check_gradient("slice_cols", &[3, 6], 14, |t, s, p| {
        t.mean_sq(t.slice_cols(t.param(s, p), 2, 5))
    });
    check_gradient("flip_rows", &[4, 3], 15, |t, s, p| {
        let x = t.flip_rows(t.param(s, p));
        let y = aux(t, 111, &[4, 3]);
        t.mean_sq(t.mul(x, y))
    });
    check_gradient("gather_rows", &[5, 3], 16, |t, s, p| {
        let idx = Rc::new(vec![0usize, 2, 2, 4]);
        t.mean_sq(t.gather_rows(t.param(s, p), idx))
    });
}

#[test]
fn matmul_ops() {
    check_gradient("matmul_lhs", &[3, 4], 20, |t, s, p| {
        let x = t.param(s, p);
        let y = aux(t, 120, &[4, 5]);
        t.mean_sq(t.matmul(x, y))
    });
    check_gradient("matmul_rhs", &[4, 5], 21, |t, s, p| {
        let x = aux(t, 121, &[3, 4]);
        let y = t.param(s, p);
        t.mean_sq(t.matmul(x, y))
    });
    check_gradient("bmm", &[2, 3, 4], 22, |t, s, p| {
        let x = t.param(s, p);
        let y = aux(t, 122, &[2, 4, 3]);
        t.mean_sq(t.bmm(x, y))
    });
    check_gradient("add_bias_x", &[4, 3], 23, |t, s, p| {
        let x = t.param(s, p);
        let b = aux(t, 123, &[3]);
        t.mean_sq(t.add_bias(x, b))
    });
    check_gradient("add_bias_b", &[3], 24, |t, s, p| {
        let x = aux(t, 124, &[4, 3]);
        t.mean_sq(t.add_bias(x, t.param(s, p)))
    });
}

#[test]
fn reduction_and_loss_ops() {
    check_gradient("sum_all", &[3, 3], 30, |t, s, p| t.sum_all(t.param(s, p)));
    check_gradient("mean_all", &[3, 3], 31, |t, s, p| t.mean_all(t.param(s, p)));
    check_gradient("mean_sq", &[3, 3], 32, |t, s, p| t.mean_sq(t.param(s, p)));
    check_gradient("mean_row_norm", &[4, 5], 33, |t, s, p| {
        t.mean_row_norm(t.param(s, p), 1e-8)
    });
    check_gradient("ce_sum", &[4, 6], 34, |t, s, p| {
        let targets = Rc::new(vec![1usize, 0, 5, 3]);
        t.ce_sum(t.param(s, p), targets)
    });
    check_gradient("layer_norm_x", &[4, 8], 35, |t, s, p| {
        let g = aux(t, 130, &[8]);
        let b = aux(t, 131, &[8]);
        t.mean_sq(t.layer_norm(t.param(s, p), g, b, 1e-5))
    });
    check_gradient("layer_norm_gamma", &[8], 36, |t, s, p| {
        let x = aux(t, 132, &[4, 8]);
        let b = aux(t, 133, &[8]);
        t.mean_sq(t.layer_norm(x, t.param(s, p), b, 1e-5))
    });
}

#[test]
fn softmax_and_geometry_ops() {
    check_gradient("masked_softmax", &[2, 4, 4], 40, |t, s, p| {
        let mut mask = Array2::from_elem((4, 4), false);
        for i in 0..4 {
            for j in 0..=i {
                mask[[i, j]] = true;
            }
        }
        mask[[1, 2]] = true; // one bidirectional edge
        let y = t.masked_softmax(t.param(s, p), Rc::new(mask));
        let w = aux(t, 140, &[2, 4, 4]);
        t.mean_sq(t.mul(y, w))
    });
    check_gradient("normalize_rows", &[4, 3], 41, |t, s, p| {
        let y = t.normalize_rows(t.param(s, p), 1e-8);
        let w = aux(t, 141, &[4, 3]);
        t.mean_sq(t.mul(y, w))
    });
    check_gradient("rowwise_dot", &[4, 3], 42, |t, s, p| {
        let x = t.param(s, p);
        let y = aux(t, 142, &[4, 3]);
        t.mean_sq(t.rowwise_dot(x, y))
    });
    check_gradient("mul_col", &[4, 3], 43, |t, s, p| {
        let x = t.param(s, p);
        let c = aux(t, 143, &[4, 1]);
        t.mean_sq(t.mul_col(x, c))
    });
    check_gradient("mul_col_c", &[4, 1], 44, |t, s, p| {
        let x = aux(t, 144, &[4, 3]);
        t.mean_sq(t.mul_col(x, t.param(s, p)))
    });
    check_gradient("cross3_a", &[4, 3], 45, |t, s, p| {
        let x = t.param(s, p);
        let y = aux(t, 145, &[4, 3]);
        t.mean_sq(t.cross3(x, y))
    });
    check_gradient("cross3_b", &[4, 3], 46, |t, s, p| {
        let x = aux(t, 146, &[4, 3]);
        t.mean_sq(t.cross3(x, t.param(s, p)))
    });
    check_gradient("cols_to_mat3", &[4, 3], 47, |t, s, p| {
        let c1 = t.param(s, p);
        let c2 = aux(t, 147, &[4, 3]);
        let c3 = aux(t, 148, &[4, 3]);
        t.mean_sq(t.cols_to_mat3(c1, c2, c3))
    });
    check_gradient("bmm3_a", &[3, 9], 48, |t, s, p| {
        let a = t.param(s, p);
        let b = aux(t, 149, &[3, 9]);
        t.mean_sq(t.bmm3(a, b))
    });
    check_gradient("bmm3_b", &[3, 9], 49, |t, s, p| {
        let a = aux(t, 150, &[3, 9]);
        t.mean_sq(t.bmm3(a, t.param(s, p)))
    });
    check_gradient("rot_points", &[3, 9], 50, |t, s, p| {
        let pts = Rc::new(Array2::from_shape_vec((2, 3), vec![0.3, -0.2, 0.5, 1.0, 0.1, -0.4]).unwrap());
        t.mean_sq(t.rot_points(t.param(s, p), pts))
    });
    check_gradient("add_tile3_x", &[3, 6], 51, |t, s, p| {
        let x = t.param(s, p);
        let tr = aux(t, 151, &[3, 3]);
        t.mean_sq(t.add_tile3(x, tr))
    });
    check_gradient("add_tile3_t", &[3, 3], 52, |t, s, p| {
        let x = aux(t, 152, &[3, 6]);
        t.mean_sq(t.add_tile3(x, t.param(s, p)))
    });
}

#[test]
fn conv_ops() {
    check_gradient("conv1d_x", &[2, 3, 8], 60, |t, s, p| {
        let w = aux(t, 160, &[4, 3, 3]);
        let b = aux(t, 161, &[4]);
        t.mean_sq(t.conv1d(t.param(s, p), w, b, 1, 1))
    });
    check_gradient("conv1d_w", &[4, 3, 3], 61, |t, s, p| {
        let x = aux(t, 162, &[2, 3, 8]);
        let b = aux(t, 163, &[4]);
        t.mean_sq(t.conv1d(x, t.param(s, p), b, 1, 1))
    });
    check_gradient("conv1d_stride2", &[2, 3, 8], 62, |t, s, p| {
        let w = aux(t, 164, &[4, 3, 4]);
        let b = aux(t, 165, &[4]);
        t.mean_sq(t.conv1d(t.param(s, p), w, b, 2, 1))
    });
    check_gradient("convT_x", &[2, 3, 5], 63, |t, s, p| {
        let w = aux(t, 166, &[3, 4, 4]);
        let b = aux(t, 167, &[4]);
        t.mean_sq(t.conv_transpose1d(t.param(s, p), w, b, 2, 1))
    });
    check_gradient("convT_w", &[3, 4, 4], 64, |t, s, p| {
        let x = aux(t, 168, &[2, 3, 5]);
        let b = aux(t, 169, &[4]);
        t.mean_sq(t.conv_transpose1d(x, t.param(s, p), b, 2, 1))
    });
    check_gradient("convT_b", &[4], 65, |t, s, p| {
        let x = aux(t, 170, &[2, 3, 5]);
        let w = aux(t, 171, &[3, 4, 4]);
        t.mean_sq(t.conv_transpose1d(x, w, t.param(s, p), 2, 1))
    });
}

#[test]
fn conv_transpose_doubles_length() {
    let t = Tape::new();
    let x = aux(&t, 170, &[1, 2, 11]);
    let w = aux(&t, 171, &[2, 3, 4]);
    let b = t.input(Arr::zeros(vec![3]));
    let y = t.conv_transpose1d(x, w, b, 2, 1);
    assert_eq!(t.shape(y), vec![1, 3, 22]);
}

#[test]
fn gru_ops() {
    check_gradient("gru_x", &[5, 4], 70, |t, s, p| {
        let wx = aux(t, 180, &[4, 9]);
        let wh = aux(t, 181, &[3, 9]);
        let b = aux(t, 182, &[9]);
        t.mean_sq(t.gru_seq(t.param(s, p), wx, wh, b))
    });
    check_gradient("gru_wx", &[4, 9], 71, |t, s, p| {
        let x = aux(t, 183, &[5, 4]);
        let wh = aux(t, 184, &[3, 9]);
        let b = aux(t, 185, &[9]);
        t.mean_sq(t.gru_seq(x, t.param(s, p), wh, b))
    });
    check_gradient("gru_wh", &[3, 9], 72, |t, s, p| {
        let x = aux(t, 186, &[5, 4]);
        let wx = aux(t, 187, &[4, 9]);
        let b = aux(t, 188, &[9]);
        t.mean_sq(t.gru_seq(x, wx, t.param(s, p), b))
    });
    check_gradient("gru_bias", &[9], 73, |t, s, p| {
        let x = aux(t, 189, &[5, 4]);
        let wx = aux(t, 190, &[4, 9]);
        let wh = aux(t, 191, &[3, 9]);
        t.mean_sq(t.gru_seq(x, wx, wh, t.param(s, p)))
    });
}

#[test]
fn stop_gradient_blocks_flow() {
    let mut store = ParamStore::new();
    let mut rng = rng_from_seed(9);
    let slot = store.add("x", randn_array(&mut rng, &[3, 3], 1.0), true);
    let t = Tape::new();
    let x = t.param(&store, slot);
    let loss = t.mean_sq(t.stop_gradient(x));
    let grads = t.backward(loss, store.len());
    assert!(grads.slots[slot].is_none(), "stop_gradient leaked a gradient");
}

#[test]
fn param_reuse_accumulates_once() {
    let mut store = ParamStore::new();
    let slot = store.add("x", Arr::from_elem(vec![2, 2], 1.5f32), true);
    let t = Tape::new();
    let x1 = t.param(&store, slot);
    let x2 = t.param(&store, slot);
    assert_eq!(x1, x2);
    let loss = t.mean_sq(t.add(x1, x2)); // mean (2x)^2 -> d/dx = 8x/4*... checked vs fd below
    let grads = t.backward(loss, store.len());
    let g = grads.slots[slot].as_ref().unwrap();
    // loss = mean((2x)^2) = 4 * mean(x^2); dloss/dx = 8x/n with n=4
    for &v in g.iter() {
        assert!((v - 8.0 * 1.5 / 4.0).abs() < 1e-5);
    }
}
