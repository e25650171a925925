//! Differentiable forward kinematics over a batch of flattened poses.
//!
//! Mirrors [`super::forward_kinematics`] on the autodiff tape so tokenizer
//! training can supervise joint and vertex positions. Norms are eps-floored
//! (no error paths inside a graph); values match the lenient f64 path to f32
//! precision.

use std::rc::Rc;

use ndarray::Array2;

use crate::graph::{Tape, Var};

use super::SkeletonTemplate;

const NORM_EPS: f32 = 1e-8;

/// Per-node tape handles produced by batched FK.
pub struct FkVars {
    /// joints[i]: (B,3) world position of tree node i.
    pub joints: Vec<Var>,
    /// verts[i]: (B, 3*anchors_i) anchor positions owned by node i.
    pub verts: Vec<Var>,
}

/// Decode a (B,6) block of 6D rotations into (B,9) row-major matrices.
pub fn rot6d_batch(t: &Tape, six: Var) -> Var {
    let a = t.slice_cols(six, 0, 3);
    let b = t.slice_cols(six, 3, 6);
    let c1 = t.normalize_rows(a, NORM_EPS);
    let proj = t.rowwise_dot(c1, b);
    let c2 = t.normalize_rows(t.sub(b, t.mul_col(c1, proj)), NORM_EPS);
    let c3 = t.cross3(c1, c2);
    t.cols_to_mat3(c1, c2, c3)
}

/// Batched FK on flattened poses (B, 6*(K+1)); block i of 6 columns is the
/// rotation of tree node i (block 0 = root orientation).
pub fn fk_batch(t: &Tape, pose: Var, skel: &SkeletonTemplate) -> FkVars {
    let n = skel.node_count();
    let batch = t.shape(pose)[0];
    debug_assert_eq!(t.shape(pose)[1], 6 * n, "pose width mismatch");

    let mut local = Vec::with_capacity(n);
    for i in 0..n {
        let block = t.slice_cols(pose, i * 6, i * 6 + 6);
        local.push(rot6d_batch(t, block));
    }

    let mut global = Vec::with_capacity(n);
    let mut pos = Vec::with_capacity(n);
    for i in 0..n {
        if i == 0 {
            global.push(local[0]);
            pos.push(t.input(ndarray::ArrayD::zeros(vec![batch, 3])));
        } else {
            let par = skel.parent[i] as usize;
            global.push(t.bmm3(global[par], local[i]));
            let off = skel.rest_offset[i];
            let off_pts = Rc::new(Array2::from_shape_vec(
                (1, 3),
                vec![off.x as f32, off.y as f32, off.z as f32],
            )
            .unwrap());
            let delta = t.rot_points(global[par], off_pts);
            pos.push(t.add(pos[par], delta));
        }
    }

    let mut verts = Vec::with_capacity(n);
    for i in 0..n {
        let pts: Vec<f32> = skel.anchors[i]
            .iter()
            .flat_map(|a| [a.x as f32, a.y as f32, a.z as f32])
            .collect();
        let k = skel.anchors[i].len();
        let pts = Rc::new(Array2::from_shape_vec((k, 3), pts).unwrap());
        let rotated = t.rot_points(global[i], pts);
        verts.push(t.add_tile3(rotated, pos[i]));
    }

    FkVars { joints: pos, verts }
}
