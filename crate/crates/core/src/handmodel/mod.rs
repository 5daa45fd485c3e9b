//! Parametric hand skeleton and mesh.
//!
//! A [`KinematicModel`] holds a joint tree, rest joint positions with a
//! linear shape basis, and an optional mesh block (template, shape and pose
//! blendshapes, skinning weights, joint regressor). Joint rotations in a
//! [`Pose`] are local: joint `j`'s rotation is applied in its parent's posed
//! frame and moves every descendant of `j` about `j`. The tree root keeps its
//! rest location; global translation is recovered separately.

mod file;
mod synth;

pub use file::{load_model, save_model, MODEL_FORMAT};
pub use synth::synth_model;

use nalgebra::{DMatrix, DVector, Matrix3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rotmath::{quat_matrix, AxisAngle, Quaternion, Vec3, UNIT_TOL};

/// Number of shape coefficients in the standard model.
pub const SHAPE_DIM: usize = 10;
/// Bound applied to fitted shape coefficients.
pub const SHAPE_BOUND: f64 = 10.0;

/// Optional mesh block of a model.
#[derive(Clone, Debug, PartialEq)]
pub struct MeshBlock {
    /// Mean template, one row per vertex.
    pub template: Vec<Vec3>,
    /// `3V x B`, row `3v + c` holds coordinate `c` of vertex `v`.
    pub shape_basis: DMatrix<f64>,
    /// `3V x 9P` where `P` is the number of pose-corrective joints.
    pub pose_basis: DMatrix<f64>,
    /// `V x J` skinning weights.
    pub skinning: DMatrix<f64>,
    /// `J x V` vertex-to-joint regressor.
    pub regressor: DMatrix<f64>,
}

impl MeshBlock {
    pub fn vertex_count(&self) -> usize {
        self.template.len()
    }
}

/// Everything needed to build a [`KinematicModel`].
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParts {
    /// Parent of each joint, `None` for the tree root. Parents precede children.
    pub parents: Vec<Option<usize>>,
    pub rest_joints0: Vec<Vec3>,
    /// `3J x B`, row `3j + c` holds coordinate `c` of joint `j`.
    pub joint_shape_basis: DMatrix<f64>,
    /// Joint used as the origin of the normalized frame (middle MCP).
    pub root_index: usize,
    /// Wrist joint; the reference bone runs from the root to the wrist.
    pub wrist_index: usize,
    pub fingertips: [usize; 5],
    pub mesh: Option<MeshBlock>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KinematicModel {
    parts: ModelParts,
    children: Vec<Vec<usize>>,
    pose_joints: Vec<usize>,
}

impl KinematicModel {
    pub fn from_parts(parts: ModelParts) -> Result<Self> {
        let j = parts.parents.len();
        let bad = |m: String| Err(Error::Format(m));
        if j == 0 {
            return bad("model has no joints".into());
        }
        if parts.rest_joints0.len() != j {
            return bad(format!("rest_joints0 has {} rows, expected {j}", parts.rest_joints0.len()));
        }
        if parts.joint_shape_basis.nrows() != 3 * j {
            return bad(format!("joint_shape_basis has {} rows, expected {}", parts.joint_shape_basis.nrows(), 3 * j));
        }
        let mut roots = 0;
        for (i, p) in parts.parents.iter().enumerate() {
            match p {
                None => roots += 1,
                Some(p) if *p >= i => return bad(format!("joint {i} has parent {p}; parents must precede children")),
                Some(_) => {}
            }
        }
        if roots != 1 || parts.parents[0].is_some() {
            return bad("parents must form a single tree rooted at joint 0".into());
        }
        if parts.wrist_index != 0 {
            return bad("the wrist must be the root of the joint tree".into());
        }
        if parts.root_index >= j || parts.parents[parts.root_index] != Some(parts.wrist_index) {
            return bad("the normalization root must be a child of the wrist".into());
        }
        let mut children = vec![Vec::new(); j];
        for (i, p) in parts.parents.iter().enumerate() {
            if let Some(p) = p {
                children[*p].push(i);
            }
        }
        for &t in &parts.fingertips {
            if t >= j || !children[t].is_empty() {
                return bad(format!("fingertip {t} is not a leaf joint"));
            }
        }
        let pose_joints: Vec<usize> = (1..j).filter(|&i| !children[i].is_empty()).collect();
        if let Some(mesh) = &parts.mesh {
            validate_mesh(mesh, &parts, pose_joints.len())?;
        }
        Ok(Self { parts, children, pose_joints })
    }

    pub fn parts(&self) -> &ModelParts {
        &self.parts
    }

    pub fn into_parts(self) -> ModelParts {
        self.parts
    }

    pub fn joint_count(&self) -> usize {
        self.parts.parents.len()
    }

    pub fn shape_dim(&self) -> usize {
        self.parts.joint_shape_basis.ncols()
    }

    pub fn parents(&self) -> &[Option<usize>] {
        &self.parts.parents
    }

    pub fn children(&self, joint: usize) -> &[usize] {
        &self.children[joint]
    }

    pub fn root_index(&self) -> usize {
        self.parts.root_index
    }

    pub fn wrist_index(&self) -> usize {
        self.parts.wrist_index
    }

    pub fn fingertips(&self) -> [usize; 5] {
        self.parts.fingertips
    }

    pub fn rest_joints0(&self) -> &[Vec3] {
        &self.parts.rest_joints0
    }

    pub fn joint_shape_basis(&self) -> &DMatrix<f64> {
        &self.parts.joint_shape_basis
    }

    pub fn mesh(&self) -> Option<&MeshBlock> {
        self.parts.mesh.as_ref()
    }

    /// Copy of the model with the mesh block removed.
    pub fn without_mesh(&self) -> Self {
        let mut parts = self.parts.clone();
        parts.mesh = None;
        Self { parts, children: self.children.clone(), pose_joints: self.pose_joints.clone() }
    }

    /// Non-root joints with children, in index order. These drive the pose blendshapes.
    pub fn pose_joints(&self) -> &[usize] {
        &self.pose_joints
    }

    /// `(parent, child)` pairs ordered by child index.
    pub fn bones(&self) -> Vec<(usize, usize)> {
        self.parts.parents.iter().enumerate().filter_map(|(c, p)| p.map(|p| (p, c))).collect()
    }

    /// Index into [`Self::bones`] of the reference bone (wrist to root).
    pub fn reference_bone(&self) -> usize {
        self.parts.root_index - 1
    }
}

fn validate_mesh(mesh: &MeshBlock, parts: &ModelParts, pose_joint_count: usize) -> Result<()> {
    let v = mesh.template.len();
    let j = parts.parents.len();
    let b = parts.joint_shape_basis.ncols();
    let bad = |m: String| Err(Error::Format(m));
    if mesh.shape_basis.shape() != (3 * v, b) {
        return bad(format!("mesh shape_basis is {:?}, expected {:?}", mesh.shape_basis.shape(), (3 * v, b)));
    }
    if mesh.pose_basis.shape() != (3 * v, 9 * pose_joint_count) {
        return bad(format!(
            "mesh pose_basis is {:?}, expected {:?}",
            mesh.pose_basis.shape(),
            (3 * v, 9 * pose_joint_count)
        ));
    }
    if mesh.skinning.shape() != (v, j) {
        return bad(format!("skinning is {:?}, expected {:?}", mesh.skinning.shape(), (v, j)));
    }
    if mesh.regressor.shape() != (j, v) {
        return bad(format!("regressor is {:?}, expected {:?}", mesh.regressor.shape(), (j, v)));
    }
    for (i, row) in mesh.skinning.row_iter().enumerate() {
        if row.iter().any(|w| *w < 0.0) || (row.sum() - 1.0).abs() > 1e-6 {
            return bad(format!("skinning row {i} is not a convex combination"));
        }
    }
    // Joints regressed from the template and its shape basis must agree
    // with the direct joint-level representation.
    let t = flatten(&mesh.template);
    let reg = |x: &DVector<f64>| -> DVector<f64> {
        let mut out = DVector::zeros(3 * j);
        for jj in 0..j {
            for c in 0..3 {
                out[3 * jj + c] = (0..v).map(|vv| mesh.regressor[(jj, vv)] * x[3 * vv + c]).sum();
            }
        }
        out
    };
    let j0 = reg(&t);
    let rest0 = flatten(&parts.rest_joints0);
    if (&j0 - &rest0).amax() > 1e-6 {
        return bad("regressed template joints disagree with rest_joints0".into());
    }
    for k in 0..b {
        let col: DVector<f64> = mesh.shape_basis.column(k).into_owned();
        let jk = reg(&col);
        let direct: DVector<f64> = parts.joint_shape_basis.column(k).into_owned();
        if (&jk - &direct).amax() > 1e-6 {
            return bad(format!("regressed shape basis column {k} disagrees with joint_shape_basis"));
        }
    }
    Ok(())
}

fn flatten(points: &[Vec3]) -> DVector<f64> {
    DVector::from_iterator(points.len() * 3, points.iter().flat_map(|p| [p.x, p.y, p.z]))
}

/// Shape coefficients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Shape {
    pub beta: Vec<f64>,
}

impl Shape {
    pub fn zeros(dim: usize) -> Self {
        Self { beta: vec![0.0; dim] }
    }

    pub fn new(beta: Vec<f64>) -> Result<Self> {
        if beta.iter().any(|b| !b.is_finite()) {
            return Err(Error::Contract("shape coefficients must be finite".into()));
        }
        Ok(Self { beta })
    }

    pub fn unit(dim: usize, k: usize) -> Self {
        let mut beta = vec![0.0; dim];
        beta[k] = 1.0;
        Self { beta }
    }

    pub fn norm(&self) -> f64 {
        self.beta.iter().map(|b| b * b).sum::<f64>().sqrt()
    }
}

/// Local joint rotations relative to the rest pose.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rotations: Vec<Quaternion>,
}

impl Pose {
    pub fn identity(joints: usize) -> Self {
        Self { rotations: vec![Quaternion::IDENTITY; joints] }
    }

    pub fn new(rotations: Vec<Quaternion>) -> Result<Self> {
        if let Some(i) = rotations.iter().position(|q| !q.is_unit(UNIT_TOL)) {
            return Err(Error::Precondition(format!("rotation {i} is not a unit quaternion")));
        }
        Ok(Self { rotations })
    }

    pub fn from_axis_angles(angles: &[AxisAngle]) -> Self {
        Self { rotations: angles.iter().map(AxisAngle::to_quat).collect() }
    }

    pub fn to_axis_angles(&self) -> Vec<AxisAngle> {
        self.rotations.iter().map(Quaternion::to_axis_angle).collect()
    }

    /// Same rotations with every quaternion moved to the `w >= 0` hemisphere.
    pub fn canonical(&self) -> Self {
        Self { rotations: self.rotations.iter().map(Quaternion::canonical).collect() }
    }

    pub fn len(&self) -> usize {
        self.rotations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rotations.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Frame {
    /// Model or camera space in millimetres.
    Absolute,
    /// Root at the origin, reference bone of unit length.
    Normalized,
}

#[derive(Clone, Debug, PartialEq)]
pub struct JointSet {
    pub positions: Vec<Vec3>,
    pub frame: Frame,
}

impl JointSet {
    pub fn new(positions: Vec<Vec3>, frame: Frame) -> Self {
        Self { positions, frame }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self { positions: self.positions.iter().map(|p| p * s).collect(), frame: self.frame }
    }

    pub fn translated(&self, t: &Vec3) -> Self {
        Self { positions: self.positions.iter().map(|p| p + t).collect(), frame: self.frame }
    }

    /// Apply `rotation` about `center` to every joint.
    pub fn rotated_about(&self, rotation: &Matrix3<f64>, center: &Vec3) -> Self {
        Self { positions: self.positions.iter().map(|p| rotation * (p - center) + center).collect(), frame: self.frame }
    }

    pub fn reference_length(&self, model: &KinematicModel) -> f64 {
        (self.positions[model.root_index()] - self.positions[model.wrist_index()]).norm()
    }
}

/// Rest joints for a shape: `rest_joints0 + basis * beta`.
pub fn rest_joints(model: &KinematicModel, shape: &Shape) -> JointSet {
    let basis = model.joint_shape_basis();
    let positions = model
        .rest_joints0()
        .iter()
        .enumerate()
        .map(|(j, r)| {
            let mut p = *r;
            for (k, b) in shape.beta.iter().enumerate().take(basis.ncols()) {
                p.x += basis[(3 * j, k)] * b;
                p.y += basis[(3 * j + 1, k)] * b;
                p.z += basis[(3 * j + 2, k)] * b;
            }
            p
        })
        .collect();
    JointSet::new(positions, Frame::Absolute)
}

/// Propagate local rotations down the tree. Returns posed positions and the
/// global rotation of every joint.
pub(crate) fn forward_kinematics(
    parents: &[Option<usize>],
    rest: &[Vec3],
    local: &[Matrix3<f64>],
) -> (Vec<Vec3>, Vec<Matrix3<f64>>) {
    let n = parents.len();
    let mut pos = Vec::with_capacity(n);
    let mut glob: Vec<Matrix3<f64>> = Vec::with_capacity(n);
    for j in 0..n {
        match parents[j] {
            None => {
                pos.push(rest[j]);
                glob.push(local[j]);
            }
            Some(p) => {
                let pj = pos[p] + glob[p] * (rest[j] - rest[p]);
                let gj = glob[p] * local[j];
                pos.push(pj);
                glob.push(gj);
            }
        }
    }
    (pos, glob)
}

/// Reverse-mode pass of [`forward_kinematics`]: given `dL/dpos`, returns
/// `dL/dlocal` for every joint.
pub(crate) fn forward_kinematics_backward(
    parents: &[Option<usize>],
    rest: &[Vec3],
    local: &[Matrix3<f64>],
    glob: &[Matrix3<f64>],
    grad_pos: &[Vec3],
) -> Vec<Matrix3<f64>> {
    let n = parents.len();
    let mut gp: Vec<Vec3> = grad_pos.to_vec();
    let mut gg = vec![Matrix3::zeros(); n];
    let mut gl = vec![Matrix3::zeros(); n];
    for j in (0..n).rev() {
        match parents[j] {
            None => gl[j] = gg[j],
            Some(p) => {
                let bone = rest[j] - rest[p];
                let gpj = gp[j];
                gp[p] += gpj;
                gg[p] += gpj * bone.transpose();
                let ggj = gg[j];
                gg[p] += ggj * local[j].transpose();
                gl[j] = glob[p].transpose() * ggj;
            }
        }
    }
    gl
}

fn pose_matrices(pose: &Pose) -> Vec<Matrix3<f64>> {
    pose.rotations.iter().map(quat_matrix).collect()
}

fn check_pose(model: &KinematicModel, pose: &Pose) {
    assert_eq!(
        pose.len(),
        model.joint_count(),
        "pose has {} rotations for a {}-joint model",
        pose.len(),
        model.joint_count()
    );
}

/// Posed joint positions. The tree root stays at its rest location.
pub fn fk_joints(model: &KinematicModel, shape: &Shape, pose: &Pose) -> JointSet {
    check_pose(model, pose);
    let rest = rest_joints(model, shape);
    let (pos, _) = forward_kinematics(model.parents(), &rest.positions, &pose_matrices(pose));
    JointSet::new(pos, Frame::Absolute)
}

/// Template deformed by shape and pose blendshapes.
pub fn deform_template(model: &KinematicModel, shape: &Shape, pose: &Pose) -> Result<Vec<Vec3>> {
    let mesh = model.mesh().ok_or_else(|| Error::Capability("model has no mesh block".into()))?;
    check_pose(model, pose);
    let beta = DVector::from_column_slice(&shape.beta[..model.shape_dim().min(shape.beta.len())]);
    let mut offsets = if beta.len() == mesh.shape_basis.ncols() {
        &mesh.shape_basis * &beta
    } else {
        mesh.shape_basis.columns(0, beta.len()) * &beta
    };
    let mut feat = DVector::zeros(9 * model.pose_joints().len());
    for (i, &j) in model.pose_joints().iter().enumerate() {
        let r = quat_matrix(&pose.rotations[j]) - Matrix3::identity();
        for a in 0..3 {
            for b in 0..3 {
                feat[9 * i + 3 * a + b] = r[(a, b)];
            }
        }
    }
    offsets += &mesh.pose_basis * feat;
    Ok(mesh
        .template
        .iter()
        .enumerate()
        .map(|(v, t)| t + Vec3::new(offsets[3 * v], offsets[3 * v + 1], offsets[3 * v + 2]))
        .collect())
}

/// Linear blend skinning of the deformed template.
pub fn lbs_mesh(model: &KinematicModel, shape: &Shape, pose: &Pose) -> Result<Vec<Vec3>> {
    let verts = deform_template(model, shape, pose)?;
    let mesh = model.mesh().expect("checked by deform_template");
    let rest = rest_joints(model, shape);
    let (posed, glob) = forward_kinematics(model.parents(), &rest.positions, &pose_matrices(pose));
    let j = model.joint_count();
    Ok(verts
        .iter()
        .enumerate()
        .map(|(v, t)| {
            let mut out = Vec3::zeros();
            for jj in 0..j {
                let w = mesh.skinning[(v, jj)];
                if w != 0.0 {
                    out += (glob[jj] * (t - rest.positions[jj]) + posed[jj]) * w;
                }
            }
            out
        })
        .collect())
}

/// Unit parent-to-child bone directions, one entry per joint; the root entry is zero.
#[derive(Clone, Debug, PartialEq)]
pub struct BoneVectors {
    pub directions: Vec<Vec3>,
    /// Joints whose bone has zero length; their entry is also zero.
    pub zero_length: Vec<usize>,
}

pub fn bone_vectors(joints: &JointSet, model: &KinematicModel) -> BoneVectors {
    let mut zero_length = Vec::new();
    let directions = model
        .parents()
        .iter()
        .enumerate()
        .map(|(j, p)| match p {
            None => Vec3::zeros(),
            Some(p) => {
                let d = joints.positions[j] - joints.positions[*p];
                let n = d.norm();
                if n <= 1e-12 {
                    zero_length.push(j);
                    Vec3::zeros()
                } else {
                    d / n
                }
            }
        })
        .collect();
    BoneVectors { directions, zero_length }
}

/// Move the root to the origin and scale the reference bone to unit length.
pub fn normalize_joints(joints: &JointSet, model: &KinematicModel) -> Result<JointSet> {
    let len = joints.reference_length(model);
    if !(len > 1e-12) {
        return Err(Error::Degenerate(format!("reference bone length {len:e}")));
    }
    let root = joints.positions[model.root_index()];
    Ok(JointSet::new(joints.positions.iter().map(|p| (p - root) / len).collect(), Frame::Normalized))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rotmath::RotMatrix;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::FRAC_PI_2;

    fn model() -> KinematicModel {
        synth_model(7)
    }

    fn random_pose(rng: &mut ChaCha8Rng, j: usize, scale: f64) -> Pose {
        Pose::from_axis_angles(
            &(0..j)
                .map(|_| {
                    AxisAngle::new(
                        rng.random_range(-scale..scale),
                        rng.random_range(-scale..scale),
                        rng.random_range(-scale..scale),
                    )
                })
                .collect::<Vec<_>>(),
        )
    }

    fn random_shape(rng: &mut ChaCha8Rng) -> Shape {
        Shape::new((0..SHAPE_DIM).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
    }

    fn lengths(js: &JointSet, m: &KinematicModel) -> Vec<f64> {
        m.bones().iter().map(|(p, c)| (js.positions[*c] - js.positions[*p]).norm()).collect()
    }

    #[test]
    fn rest_joints_is_affine_in_shape() {
        let m = model();
        let zero = rest_joints(&m, &Shape::zeros(SHAPE_DIM));
        assert_eq!(zero.positions, m.rest_joints0());
        let e1 = rest_joints(&m, &Shape::unit(SHAPE_DIM, 0));
        for j in 0..m.joint_count() {
            let col = Vec3::new(
                m.joint_shape_basis()[(3 * j, 0)],
                m.joint_shape_basis()[(3 * j + 1, 0)],
                m.joint_shape_basis()[(3 * j + 2, 0)],
            );
            assert_abs_diff_eq!(e1.positions[j], m.rest_joints0()[j] + col, epsilon = 1e-12);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (b1, b2) = (random_shape(&mut rng), random_shape(&mut rng));
        let sum = Shape::new(b1.beta.iter().zip(&b2.beta).map(|(a, b)| a + b).collect()).unwrap();
        let lhs = rest_joints(&m, &sum);
        let (r1, r2) = (rest_joints(&m, &b1), rest_joints(&m, &b2));
        for j in 0..m.joint_count() {
            let rhs = r1.positions[j] + r2.positions[j] - m.rest_joints0()[j];
            assert_abs_diff_eq!(lhs.positions[j], rhs, epsilon = 1e-10);
        }
    }

    #[test]
    fn fk_rest_pose_is_rest_joints() {
        let m = model();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = random_shape(&mut rng);
        let fk = fk_joints(&m, &s, &Pose::identity(m.joint_count()));
        for (a, b) in fk.positions.iter().zip(&rest_joints(&m, &s).positions) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-12);
        }
    }

    #[test]
    fn fk_wrist_rotation_is_rigid() {
        let m = model();
        let s = Shape::zeros(SHAPE_DIM);
        let mut pose = Pose::identity(m.joint_count());
        let qz = Quaternion::from_axis_angle(&Vec3::z(), FRAC_PI_2);
        pose.rotations[0] = qz;
        let fk = fk_joints(&m, &s, &pose);
        let rest = rest_joints(&m, &s);
        let rz = qz.to_matrix().unwrap();
        let w = rest.positions[0];
        for j in 0..m.joint_count() {
            assert_abs_diff_eq!(fk.positions[j], rz.apply(&(rest.positions[j] - w)) + w, epsilon = 1e-9);
        }
    }

    /// Two-bone chain along x bent 90 degrees about z at the middle joint.
    #[test]
    fn fk_two_link_chain() {
        let parents = [None, Some(0), Some(1)];
        let rest = [Vec3::zeros(), Vec3::new(2.0, 0.0, 0.0), Vec3::new(5.0, 0.0, 0.0)];
        let bend = Quaternion::from_axis_angle(&Vec3::z(), FRAC_PI_2).to_matrix().unwrap().0;
        let local = [Matrix3::identity(), bend, Matrix3::identity()];
        let (pos, _) = forward_kinematics(&parents, &rest, &local);
        assert_abs_diff_eq!(pos[1], Vec3::new(2.0, 0.0, 0.0), epsilon = 1e-15);
        assert_abs_diff_eq!(pos[2], Vec3::new(2.0, 3.0, 0.0), epsilon = 1e-15);
    }

    #[test]
    fn fingertip_rotations_have_no_effect() {
        let m = model();
        let s = Shape::zeros(SHAPE_DIM);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut pose = random_pose(&mut rng, m.joint_count(), 0.5);
        let a = fk_joints(&m, &s, &pose);
        for t in m.fingertips() {
            pose.rotations[t] = Quaternion::from_axis_angle(&Vec3::x(), 1.0);
        }
        assert_eq!(a, fk_joints(&m, &s, &pose));
    }

    #[test]
    fn fk_backward_matches_finite_differences() {
        let m = model();
        let rest = m.rest_joints0().to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let local: Vec<Matrix3<f64>> =
            (0..m.joint_count()).map(|_| Matrix3::from_fn(|_, _| rng.random_range(-1.0..1.0))).collect();
        let weights: Vec<Vec3> = (0..m.joint_count())
            .map(|_| Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect();
        let f = |local: &[Matrix3<f64>]| -> f64 {
            let (pos, _) = forward_kinematics(m.parents(), &rest, local);
            pos.iter().zip(&weights).map(|(p, w)| p.dot(w)).sum()
        };
        let (_, glob) = forward_kinematics(m.parents(), &rest, &local);
        let grad = forward_kinematics_backward(m.parents(), &rest, &local, &glob, &weights);
        let h = 1e-6;
        for j in [0, 1, 5, 9, 10, 11] {
            for r in 0..3 {
                for c in 0..3 {
                    let mut lp = local.clone();
                    let mut lm = local.clone();
                    lp[j][(r, c)] += h;
                    lm[j][(r, c)] -= h;
                    let num = (f(&lp) - f(&lm)) / (2.0 * h);
                    assert!((num - grad[j][(r, c)]).abs() < 1e-5 * (1.0 + num.abs()), "joint {j} ({r},{c})");
                }
            }
        }
    }

    #[test]
    fn template_deformation_cases() {
        let m = model();
        let mesh = m.mesh().unwrap();
        let rest = Pose::identity(m.joint_count());
        let t0 = deform_template(&m, &Shape::zeros(SHAPE_DIM), &rest).unwrap();
        assert_eq!(t0, mesh.template);
        let t1 = deform_template(&m, &Shape::unit(SHAPE_DIM, 0), &rest).unwrap();
        for (v, p) in t1.iter().enumerate() {
            let col = Vec3::new(
                mesh.shape_basis[(3 * v, 0)],
                mesh.shape_basis[(3 * v + 1, 0)],
                mesh.shape_basis[(3 * v + 2, 0)],
            );
            assert_abs_diff_eq!(*p, mesh.template[v] + col, epsilon = 1e-12);
        }
        let mut parts = m.parts().clone();
        parts.mesh.as_mut().unwrap().pose_basis.fill(0.0);
        let flat = KinematicModel::from_parts(parts).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pose = random_pose(&mut rng, m.joint_count(), 0.8);
        let s = random_shape(&mut rng);
        let posed = deform_template(&flat, &s, &pose).unwrap();
        let unposed = deform_template(&flat, &s, &rest).unwrap();
        assert_eq!(posed, unposed);
    }

    #[test]
    fn mesh_ops_need_mesh() {
        let m = model().without_mesh();
        let s = Shape::zeros(SHAPE_DIM);
        let p = Pose::identity(m.joint_count());
        assert!(matches!(deform_template(&m, &s, &p), Err(Error::Capability(_))));
        assert!(matches!(lbs_mesh(&m, &s, &p), Err(Error::Capability(_))));
    }

    #[test]
    fn lbs_rest_pose_is_deformed_template() {
        let m = model();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let s = random_shape(&mut rng);
        let p = Pose::identity(m.joint_count());
        let a = lbs_mesh(&m, &s, &p).unwrap();
        let b = deform_template(&m, &s, &p).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_abs_diff_eq!(*x, *y, epsilon = 1e-12);
        }
    }

    #[test]
    fn lbs_single_weight_follows_joint() {
        let m = model();
        let mut parts = m.parts().clone();
        let mesh = parts.mesh.as_mut().unwrap();
        let target = 10;
        mesh.skinning.fill(0.0);
        mesh.skinning.column_mut(target).fill(1.0);
        let m = KinematicModel::from_parts(parts).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let s = random_shape(&mut rng);
        let pose = random_pose(&mut rng, m.joint_count(), 0.6);
        let verts = lbs_mesh(&m, &s, &pose).unwrap();
        let t = deform_template(&m, &s, &pose).unwrap();
        let rest = rest_joints(&m, &s);
        let (posed, glob) = forward_kinematics(m.parents(), &rest.positions, &pose_matrices(&pose));
        for (v, p) in verts.iter().enumerate() {
            let expected = glob[target] * (t[v] - rest.positions[target]) + posed[target];
            assert_abs_diff_eq!(*p, expected, epsilon = 1e-9);
        }
    }

    #[test]
    fn lbs_wrist_rotation_is_rigid() {
        let m = model();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let s = random_shape(&mut rng);
        let mut pose = Pose::identity(m.joint_count());
        let q = Quaternion::from_axis_angle(&Vec3::new(0.3, 1.0, -0.2), 1.1);
        pose.rotations[0] = q;
        let verts = lbs_mesh(&m, &s, &pose).unwrap();
        let rest = deform_template(&m, &s, &Pose::identity(m.joint_count())).unwrap();
        let w = rest_joints(&m, &s).positions[0];
        let r = q.to_matrix().unwrap();
        for (p, t) in verts.iter().zip(&rest) {
            assert_abs_diff_eq!(*p, r.apply(&(t - w)) + w, epsilon = 1e-9);
        }
    }

    #[test]
    fn lbs_all_weight_on_wrist_is_rigid() {
        let m = model();
        let mut parts = m.parts().clone();
        let mesh = parts.mesh.as_mut().unwrap();
        mesh.skinning.fill(0.0);
        mesh.skinning.column_mut(0).fill(1.0);
        let m = KinematicModel::from_parts(parts).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let s = random_shape(&mut rng);
        let pose = random_pose(&mut rng, m.joint_count(), 0.7);
        let verts = lbs_mesh(&m, &s, &pose).unwrap();
        let t = deform_template(&m, &s, &pose).unwrap();
        let w = rest_joints(&m, &s).positions[0];
        let r = pose.rotations[0].to_matrix().unwrap();
        for (p, t) in verts.iter().zip(&t) {
            assert_abs_diff_eq!(*p, r.apply(&(t - w)) + w, epsilon = 1e-9);
        }
    }

    #[test]
    fn bone_vector_cases() {
        let m = KinematicModel::from_parts(ModelParts {
            parents: vec![None, Some(0)],
            rest_joints0: vec![Vec3::zeros(), Vec3::new(0.0, 0.0, 5.0)],
            joint_shape_basis: DMatrix::zeros(6, 1),
            root_index: 1,
            wrist_index: 0,
            fingertips: [1; 5],
            mesh: None,
        })
        .unwrap();
        let js = JointSet::new(m.rest_joints0().to_vec(), Frame::Absolute);
        let b = bone_vectors(&js, &m);
        assert_eq!(b.directions[0], Vec3::zeros());
        assert_eq!(b.directions[1], Vec3::new(0.0, 0.0, 1.0));
        assert!(b.zero_length.is_empty());
        let flat = JointSet::new(vec![Vec3::zeros(), Vec3::zeros()], Frame::Absolute);
        let b = bone_vectors(&flat, &m);
        assert_eq!(b.directions[1], Vec3::zeros());
        assert_eq!(b.zero_length, vec![1]);
    }

    #[test]
    fn bone_vectors_follow_rigid_rotation() {
        let m = model();
        let js = rest_joints(&m, &Shape::zeros(SHAPE_DIM));
        let r = Quaternion::from_axis_angle(&Vec3::new(1.0, 2.0, 3.0), 0.7).to_matrix().unwrap().0;
        let rotated = js.rotated_about(&r, &Vec3::new(5.0, -3.0, 2.0));
        let a = bone_vectors(&js, &m);
        let b = bone_vectors(&rotated, &m);
        for (x, y) in a.directions.iter().zip(&b.directions) {
            assert_abs_diff_eq!(r * x, *y, epsilon = 1e-12);
        }
    }

    #[test]
    fn normalization_cases() {
        let m = model();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let pose = random_pose(&mut rng, m.joint_count(), 0.5);
        let js = fk_joints(&m, &random_shape(&mut rng), &pose).translated(&Vec3::new(40.0, -10.0, 600.0));
        let n = normalize_joints(&js, &m).unwrap();
        assert_eq!(n.frame, Frame::Normalized);
        assert_abs_diff_eq!(n.positions[m.root_index()], Vec3::zeros(), epsilon = 1e-12);
        assert_abs_diff_eq!(n.reference_length(&m), 1.0, epsilon = 1e-12);
        let twice = normalize_joints(&n, &m).unwrap();
        for (a, b) in n.positions.iter().zip(&twice.positions) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-12);
        }
        let scaled = normalize_joints(&js.scaled(2.0), &m).unwrap();
        for (a, b) in n.positions.iter().zip(&scaled.positions) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-12);
        }
        let collapsed = JointSet::new(vec![Vec3::zeros(); m.joint_count()], Frame::Absolute);
        assert!(matches!(normalize_joints(&collapsed, &m), Err(Error::Degenerate(_))));
    }

    #[test]
    fn invalid_trees_are_rejected() {
        let mut parts = model().into_parts();
        parts.parents[3] = Some(5);
        assert!(matches!(KinematicModel::from_parts(parts), Err(Error::Format(_))));
        let mut parts = model().into_parts();
        parts.mesh.as_mut().unwrap().skinning[(0, 0)] += 0.1;
        assert!(matches!(KinematicModel::from_parts(parts), Err(Error::Format(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn bone_lengths_are_pose_invariant(seed in 0u64..10_000) {
            let m = model();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = random_shape(&mut rng);
            let pose = random_pose(&mut rng, m.joint_count(), 1.5);
            let rest = lengths(&rest_joints(&m, &s), &m);
            let posed = lengths(&fk_joints(&m, &s, &pose), &m);
            for (a, b) in rest.iter().zip(&posed) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }

        #[test]
        fn fk_is_equivariant_to_wrist_rotation(seed in 0u64..10_000) {
            let m = model();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = random_shape(&mut rng);
            let pose = random_pose(&mut rng, m.joint_count(), 1.0);
            let extra = random_pose(&mut rng, 1, 2.0).rotations[0];
            let mut rotated = pose.clone();
            rotated.rotations[0] = extra * pose.rotations[0];
            let a = fk_joints(&m, &s, &pose);
            let b = fk_joints(&m, &s, &rotated);
            let r: RotMatrix = extra.to_matrix().unwrap();
            let w = a.positions[0];
            for (pa, pb) in a.positions.iter().zip(&b.positions) {
                prop_assert!((r.apply(&(pa - w)) + w - pb).amax() < 1e-9);
            }
        }
    }
}
