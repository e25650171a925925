//! Rotation representations, the procedural skeleton, and forward kinematics.
//!
//! A pose is a root orientation plus one 6D rotation per joint. The 6D form is
//! the first two columns of a rotation matrix; decoding runs Gram-Schmidt and
//! completes the basis with a cross product. The world is y-up; the rest pose
//! faces +z with arms along the x axis.
//!
//! Everything here is pure f64 and deterministic per seed; the differentiable
//! f32 counterpart used inside tokenizer training lives in [`diff`].

pub mod diff;

use nalgebra::{Matrix3, Vector3};
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::rng_from_seed;

/// Default non-root joint count (root + 21 joints = 22 tree nodes).
pub const DEFAULT_JOINTS: usize = 21;
/// Anchor points rigidly attached to each bone frame.
pub const ANCHORS_PER_BONE: usize = 6;

pub type Mat3 = Matrix3<f64>;
pub type Vec3 = Vector3<f64>;

/// Continuous 6D rotation: two basis seed vectors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation6D {
    pub a: [f64; 3],
    pub b: [f64; 3],
}

impl Rotation6D {
    pub const IDENTITY: Rotation6D = Rotation6D { a: [1.0, 0.0, 0.0], b: [0.0, 1.0, 0.0] };

    pub fn flatten(&self) -> [f64; 6] {
        [self.a[0], self.a[1], self.a[2], self.b[0], self.b[1], self.b[2]]
    }

    pub fn from_flat(v: &[f64]) -> Self {
        Rotation6D { a: [v[0], v[1], v[2]], b: [v[3], v[4], v[5]] }
    }
}

/// Root orientation plus per-joint rotations; flattened width is 6 + 6K.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseParams {
    pub root_orient: Rotation6D,
    pub joint_rots: Vec<Rotation6D>,
}

impl PoseParams {
    pub fn rest(k: usize) -> Self {
        PoseParams {
            root_orient: Rotation6D::IDENTITY,
            joint_rots: vec![Rotation6D::IDENTITY; k],
        }
    }

    pub fn joint_count(&self) -> usize {
        self.joint_rots.len()
    }

    pub fn flat_dim(&self) -> usize {
        6 + 6 * self.joint_rots.len()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.flat_dim());
        out.extend_from_slice(&self.root_orient.flatten());
        for r in &self.joint_rots {
            out.extend_from_slice(&r.flatten());
        }
        out
    }

    pub fn from_flat(v: &[f64]) -> Result<Self> {
        if v.len() < 6 || v.len() % 6 != 0 {
            return Err(Error::DimensionMismatch(format!(
                "pose vector length {} is not a multiple of 6",
                v.len()
            )));
        }
        let root_orient = Rotation6D::from_flat(&v[0..6]);
        let joint_rots = v[6..].chunks(6).map(Rotation6D::from_flat).collect();
        Ok(PoseParams { root_orient, joint_rots })
    }

    /// Rotation block for tree node `i` (0 = root).
    pub fn node_rotation(&self, i: usize) -> &Rotation6D {
        if i == 0 {
            &self.root_orient
        } else {
            &self.joint_rots[i - 1]
        }
    }
}

/// Per-joint Euler sampling limits in radians, intrinsic z-x-y order.
#[derive(Debug, Clone, Copy, Default)]
pub struct EulerLimits {
    pub z: (f64, f64),
    pub x: (f64, f64),
    pub y: (f64, f64),
}

/// Procedural articulated skeleton: a joint tree with rest offsets, surface
/// anchor points per bone, and sampling limits.
#[derive(Debug, Clone)]
pub struct SkeletonTemplate {
    pub names: Vec<String>,
    pub parent: Vec<isize>,
    pub rest_offset: Vec<Vec3>,
    /// anchors[j] holds the bone-local surface points transformed by node j.
    pub anchors: Vec<Vec<Vec3>>,
    pub limits: Vec<EulerLimits>,
}

impl SkeletonTemplate {
    /// Number of tree nodes (root + K joints).
    pub fn node_count(&self) -> usize {
        self.parent.len()
    }

    pub fn joint_count(&self) -> usize {
        self.node_count() - 1
    }

    pub fn vertex_count(&self) -> usize {
        self.anchors.iter().map(Vec::len).sum()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Built-in 22-node humanlike skeleton shipped with the crate.
    pub fn builtin() -> SkeletonTemplate {
        Self::parse(include_str!("../../assets/skeleton_v1.txt"))
            .expect("bundled skeleton asset is valid")
    }

    pub fn parse(text: &str) -> Result<SkeletonTemplate> {
        let mut n_joints = None;
        let mut names = Vec::new();
        let mut parent = Vec::new();
        let mut rest_offset = Vec::new();
        let mut anchors: Vec<Vec<Vec3>> = Vec::new();
        let mut limits = Vec::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            match parts[0] {
                "version" => {
                    if parts.get(1) != Some(&"1") {
                        return Err(Error::InvalidSpec("unsupported skeleton version".into()));
                    }
                }
                "joints" => {
                    let n: usize = parts[1].parse().map_err(|_| bad(line))?;
                    n_joints = Some(n);
                    anchors = vec![Vec::new(); n];
                    limits = vec![EulerLimits::default(); n];
                }
                "joint" => {
                    let idx: usize = parts[1].parse().map_err(|_| bad(line))?;
                    if idx != names.len() {
                        return Err(Error::InvalidSpec("joint lines out of order".into()));
                    }
                    names.push(parts[2].to_string());
                    parent.push(parts[3].parse().map_err(|_| bad(line))?);
                    rest_offset.push(parse_vec3(&parts[4..7]).ok_or_else(|| bad(line))?);
                }
                "anchor" => {
                    let idx: usize = parts[1].parse().map_err(|_| bad(line))?;
                    anchors[idx].push(parse_vec3(&parts[2..5]).ok_or_else(|| bad(line))?);
                }
                "limit" => {
                    let idx: usize = parts[1].parse().map_err(|_| bad(line))?;
                    let v: Vec<f64> = parts[2..8]
                        .iter()
                        .map(|s| s.parse::<f64>().map(f64::to_radians))
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|_| bad(line))?;
                    limits[idx] = EulerLimits { z: (v[0], v[1]), x: (v[2], v[3]), y: (v[4], v[5]) };
                }
                _ => return Err(bad(line)),
            }
        }
        let n = n_joints.ok_or_else(|| Error::InvalidSpec("missing joints count".into()))?;
        if names.len() != n {
            return Err(Error::InvalidSpec("joint count mismatch".into()));
        }
        let skel = SkeletonTemplate { names, parent, rest_offset, anchors, limits };
        skel.validate()?;
        Ok(skel)
    }

    fn validate(&self) -> Result<()> {
        if self.parent[0] != -1 {
            return Err(Error::InvalidSpec("node 0 must be the root".into()));
        }
        for (i, &p) in self.parent.iter().enumerate().skip(1) {
            if p < 0 || p as usize >= i {
                return Err(Error::InvalidSpec(format!(
                    "node {i} parent {p} does not precede it"
                )));
            }
            if self.rest_offset[i].norm() == 0.0 {
                return Err(Error::InvalidSpec(format!("node {i} has zero rest offset")));
            }
        }
        if self.vertex_count() < self.node_count() {
            return Err(Error::InvalidSpec("fewer vertices than joints".into()));
        }
        Ok(())
    }

    /// Joint positions of the rest pose (identity rotations).
    pub fn rest_joints(&self) -> Vec<Vec3> {
        let mut out = vec![Vec3::zeros(); self.node_count()];
        for i in 1..self.node_count() {
            out[i] = out[self.parent[i] as usize] + self.rest_offset[i];
        }
        out
    }
}

fn bad(line: &str) -> Error {
    Error::InvalidSpec(format!("bad skeleton line: {line}"))
}

fn parse_vec3(parts: &[&str]) -> Option<Vec3> {
    if parts.len() < 3 {
        return None;
    }
    Some(Vec3::new(
        parts[0].parse().ok()?,
        parts[1].parse().ok()?,
        parts[2].parse().ok()?,
    ))
}

/// Joint and surface-point positions produced by forward kinematics, meters.
#[derive(Debug, Clone)]
pub struct FKResult {
    pub joints: Vec<Vec3>,
    pub vertices: Vec<Vec3>,
}

/// Gram-Schmidt decode of a 6D rotation into an orthonormal matrix with
/// determinant +1. Columns are c1=normalize(a), c2=orthogonalized b, c3=c1xc2.
pub fn rot6d_to_matrix(r: &Rotation6D) -> Result<Mat3> {
    let a = Vec3::from(r.a);
    let b = Vec3::from(r.b);
    let na = a.norm();
    if na < 1e-8 {
        return Err(Error::DegenerateRotation(format!("|a| = {na:e}")));
    }
    let c1 = a / na;
    let nb = b.norm();
    if nb < 1e-8 || (c1.dot(&(b / nb))).abs() > 1.0 - 1e-8 {
        return Err(Error::DegenerateRotation("b parallel to a".into()));
    }
    let b_orth = b - c1 * c1.dot(&b);
    let c2 = b_orth / b_orth.norm();
    let c3 = c1.cross(&c2);
    Ok(Mat3::from_columns(&[c1, c2, c3]))
}

/// Lenient decode used on raw network outputs: norms are floored instead of
/// erroring, matching the differentiable path in [`diff`].
pub fn rot6d_to_matrix_lenient(r: &Rotation6D) -> Mat3 {
    const EPS: f64 = 1e-8;
    let a = Vec3::from(r.a);
    let b = Vec3::from(r.b);
    let c1 = a / (a.norm_squared() + EPS).sqrt();
    let b_orth = b - c1 * c1.dot(&b);
    let c2 = b_orth / (b_orth.norm_squared() + EPS).sqrt();
    let c3 = c1.cross(&c2);
    Mat3::from_columns(&[c1, c2, c3])
}

/// First two columns of an orthonormal rotation matrix.
pub fn matrix_to_rot6d(m: &Mat3) -> Result<Rotation6D> {
    let err = (m.transpose() * m - Mat3::identity()).abs().max();
    if err > 1e-6 || m.determinant() < 0.0 {
        return Err(Error::InvalidRotation(format!("orthonormality residual {err:e}")));
    }
    let c1 = m.column(0);
    let c2 = m.column(1);
    Ok(Rotation6D {
        a: [c1[0], c1[1], c1[2]],
        b: [c2[0], c2[1], c2[2]],
    })
}

/// Forward kinematics: accumulate global rotations down the tree, place each
/// joint at parent position + parent global rotation * rest offset, and attach
/// anchor points with each bone's own global transform. Root sits at the
/// origin (zero global translation).
pub fn forward_kinematics(p: &PoseParams, skel: &SkeletonTemplate) -> Result<FKResult> {
    fk_impl(p, skel, rot6d_to_matrix)
}

/// FK with the lenient rotation decode; for model outputs during evaluation.
pub fn forward_kinematics_lenient(p: &PoseParams, skel: &SkeletonTemplate) -> Result<FKResult> {
    fk_impl(p, skel, |r| Ok(rot6d_to_matrix_lenient(r)))
}

fn fk_impl(
    p: &PoseParams,
    skel: &SkeletonTemplate,
    decode: impl Fn(&Rotation6D) -> Result<Mat3>,
) -> Result<FKResult> {
    let n = skel.node_count();
    if p.joint_count() + 1 != n {
        return Err(Error::DimensionMismatch(format!(
            "pose has {} joints, skeleton expects {}",
            p.joint_count(),
            n - 1
        )));
    }
    let mut global_rot = Vec::with_capacity(n);
    let mut pos = Vec::with_capacity(n);
    for i in 0..n {
        let local = decode(p.node_rotation(i))?;
        if i == 0 {
            global_rot.push(local);
            pos.push(Vec3::zeros());
        } else {
            let par = skel.parent[i] as usize;
            let parent_rot: Mat3 = global_rot[par];
            global_rot.push(parent_rot * local);
            pos.push(pos[par] + parent_rot * skel.rest_offset[i]);
        }
    }
    let mut vertices = Vec::with_capacity(skel.vertex_count());
    for i in 0..n {
        for a in &skel.anchors[i] {
            vertices.push(pos[i] + global_rot[i] * a);
        }
    }
    Ok(FKResult { joints: pos, vertices })
}

pub fn euler_zxy(z: f64, x: f64, y: f64) -> Mat3 {
    rot_z(z) * rot_x(x) * rot_y(y)
}

pub fn rot_x(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    Mat3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

pub fn rot_y(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    Mat3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

pub fn rot_z(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    Mat3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// Orientation-noise ranges: +/-45 degrees about z, +/-20 about x and y.
pub const ORIENT_NOISE_Z: f64 = 45.0;
pub const ORIENT_NOISE_XY: f64 = 20.0;

/// Compose the root orientation with a random rotation sampled uniformly in
/// the fixed Euler ranges (z, then x, then y, intrinsic). Joint rotations are
/// untouched.
pub fn perturb_global_orientation(p: &PoseParams, seed: u64) -> PoseParams {
    let mut rng = rng_from_seed(seed);
    let z = rng.random_range(-ORIENT_NOISE_Z..=ORIENT_NOISE_Z).to_radians();
    let x = rng.random_range(-ORIENT_NOISE_XY..=ORIENT_NOISE_XY).to_radians();
    let y = rng.random_range(-ORIENT_NOISE_XY..=ORIENT_NOISE_XY).to_radians();
    let noise = euler_zxy(z, x, y);
    let root = noise * rot6d_to_matrix_lenient(&p.root_orient);
    PoseParams {
        root_orient: matrix_to_rot6d(&root).expect("product of rotations is a rotation"),
        joint_rots: p.joint_rots.clone(),
    }
}

/// Perturb a random subset of joints (each with probability 1/2) by rotations
/// whose angle scales with `sigma` radians; sigma = 0 is the identity.
pub fn add_joint_noise(p: &PoseParams, sigma: f64, seed: u64) -> Result<PoseParams> {
    if sigma < 0.0 {
        return Err(Error::InvalidArgument(format!("negative noise sigma {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(p.clone());
    }
    let mut rng = rng_from_seed(seed);
    let mut out = p.clone();
    for rot in out.joint_rots.iter_mut() {
        let flip: bool = rng.random();
        // draw the noise regardless so the stream stays aligned per joint
        let axis = loop {
            let v = Vec3::new(nrm(&mut rng), nrm(&mut rng), nrm(&mut rng));
            if v.norm() > 1e-6 {
                break v.normalize();
            }
        };
        let angle = sigma * nrm(&mut rng);
        if !flip {
            continue;
        }
        let noise = axis_angle(&axis, angle);
        let m = noise * rot6d_to_matrix_lenient(rot);
        *rot = matrix_to_rot6d(&m).expect("product of rotations is a rotation");
    }
    Ok(out)
}

fn nrm(rng: &mut crate::rng::Rng) -> f64 {
    // Box-Muller; keeps the crate free of distribution deps
    loop {
        let u1: f64 = rng.random();
        let u2: f64 = rng.random();
        if u1 > 1e-300 {
            return (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        }
    }
}

pub fn axis_angle(axis: &Vec3, angle: f64) -> Mat3 {
    let (s, c) = angle.sin_cos();
    let k = Mat3::new(
        0.0, -axis.z, axis.y,
        axis.z, 0.0, -axis.x,
        -axis.y, axis.x, 0.0,
    );
    Mat3::identity() + k * s + k * k * (1.0 - c)
}

/// Uniformly sample joint rotations within the skeleton's per-joint limits.
/// `root_scale` in [0,1] shrinks the root ranges (0 pins the root upright).
pub fn sample_pose(skel: &SkeletonTemplate, seed: u64, root_scale: f64) -> PoseParams {
    let mut rng = rng_from_seed(seed);
    let mut rots = Vec::with_capacity(skel.node_count());
    for i in 0..skel.node_count() {
        let lim = &skel.limits[i];
        let scale = if i == 0 { root_scale } else { 1.0 };
        let z = sample_range(&mut rng, lim.z, scale);
        let x = sample_range(&mut rng, lim.x, scale);
        let y = sample_range(&mut rng, lim.y, scale);
        let m = euler_zxy(z, x, y);
        rots.push(matrix_to_rot6d(&m).expect("euler product is a rotation"));
    }
    PoseParams {
        root_orient: rots[0],
        joint_rots: rots[1..].to_vec(),
    }
}

fn sample_range(rng: &mut crate::rng::Rng, (lo, hi): (f64, f64), scale: f64) -> f64 {
    if hi <= lo {
        return lo * scale;
    }
    rng.random_range(lo..=hi) * scale
}

#[cfg(test)]
mod tests;
