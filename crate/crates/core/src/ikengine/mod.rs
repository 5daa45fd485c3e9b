//! Learned inverse kinematics: joint positions in, local joint rotations out.
//!
//! The network emits one raw quaternion per joint. Rows are normalized, and
//! the losses compare them with target rotations (`L_cos`, `L_l2`), with
//! target positions after forward kinematics (`L_xyz`), and penalize raw row
//! norms away from one (`L_norm`).

mod file;
mod input;
mod mlp;
mod train;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

pub use file::{load_mlp, save_mlp, MLP_FORMAT};
pub use input::{encode_input, IkInput};
pub use mlp::{
    Activation, BatchNorm, Forward, Grads, Layer, LayerGrads, Mlp, Mode, BN_EPS, BN_MOMENTUM, DEFAULT_DEPTH,
    DEFAULT_HIDDEN,
};
pub use train::{train, train_with, Adam, Dataset, EpochStats, SampleSource, TrainConfig, TrainHistory};

use crate::error::{Error, Result};
use crate::handmodel::{
    forward_kinematics, forward_kinematics_backward, normalize_joints, rest_joints, Frame, JointSet, KinematicModel,
    Pose, Shape,
};
use crate::rotmath::{quat_matrix, quat_matrix_backward, Quaternion, Vec3, NORMALIZE_EPS, UNIT_TOL};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleKind {
    /// Rotation and clean position targets.
    Mocap,
    /// Perturbed input, clean position target only.
    Noisy,
}

/// One training pair. Position targets are always present and normalized.
#[derive(Clone, Debug, PartialEq)]
pub struct IkSample {
    pub input: IkInput,
    pub rotations: Option<Pose>,
    pub positions: JointSet,
    pub kind: SampleKind,
}

#[derive(Clone, Debug, PartialEq)]
pub struct IkOutput {
    /// Raw network rows.
    pub q_hat: Vec<[f64; 4]>,
    /// Unit rows; degenerate rows are replaced by the identity.
    pub q: Vec<Quaternion>,
    pub degenerate: Vec<bool>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub cos: f64,
    pub l2: f64,
    pub xyz: f64,
    pub norm: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { cos: 1.0, l2: 1.0, xyz: 1.0, norm: 1.0 }
    }
}

impl LossWeights {
    pub fn xyz_only() -> Self {
        Self { cos: 0.0, l2: 0.0, xyz: 1.0, norm: 0.0 }
    }
}

fn normalize_row(r: [f64; 4]) -> (Quaternion, f64, bool) {
    let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n <= NORMALIZE_EPS {
        (Quaternion::IDENTITY, n, true)
    } else {
        (Quaternion::new(r[0] / n, r[1] / n, r[2] / n, r[3] / n), n, false)
    }
}

fn output_rows(out: &Array2<f64>, row: usize) -> Vec<[f64; 4]> {
    out.row(row).as_slice().expect("standard layout").chunks_exact(4).map(|c| [c[0], c[1], c[2], c[3]]).collect()
}

fn to_output(rows: Vec<[f64; 4]>) -> IkOutput {
    let (q, degenerate) = rows.iter().map(|r| normalize_row(*r)).map(|(q, _, d)| (q, d)).unzip();
    IkOutput { q_hat: rows, q, degenerate }
}

fn features(inputs: &[&IkInput], dim: usize) -> Result<Array2<f64>> {
    let mut x = Array2::zeros((inputs.len(), dim));
    for (i, inp) in inputs.iter().enumerate() {
        if inp.feature_len() != dim {
            return Err(Error::Contract(format!("input has {} features, network expects {dim}", inp.feature_len())));
        }
        inp.write_into(x.row_mut(i).as_slice_mut().expect("standard layout"));
    }
    Ok(x)
}

fn check_head(net: &Mlp, joints: usize) -> Result<()> {
    if net.output_dim() != 4 * joints {
        return Err(Error::Contract(format!(
            "network emits {} values, expected {} for {joints} joints",
            net.output_dim(),
            4 * joints
        )));
    }
    Ok(())
}

/// Run the network on a batch of inputs.
pub fn forward(net: &Mlp, inputs: &[IkInput], mode: Mode) -> Result<Vec<IkOutput>> {
    let Some(first) = inputs.first() else { return Ok(Vec::new()) };
    check_head(net, first.joint_count())?;
    let refs: Vec<&IkInput> = inputs.iter().collect();
    let out = net.forward(&features(&refs, net.input_dim())?, mode)?.output;
    Ok((0..inputs.len()).map(|i| to_output(output_rows(&out, i))).collect())
}

/// Encode, run in inference mode, and return hemisphere-canonical rotations.
pub fn predict_pose(net: &Mlp, joints: &JointSet, rest: &JointSet, model: &KinematicModel) -> Result<Pose> {
    let inp = encode_input(joints, rest, model)?;
    let out = forward(net, std::slice::from_ref(&inp), Mode::Infer)?.pop().unwrap();
    Ok(Pose { rotations: out.q.iter().map(Quaternion::canonical).collect() })
}

fn check_unit(qs: &[Quaternion], what: &str) -> Result<()> {
    if let Some(q) = qs.iter().find(|q| !q.is_unit(UNIT_TOL)) {
        return Err(Error::Contract(format!("{what} has non-unit quaternion (norm {})", q.norm())));
    }
    Ok(())
}

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b || a == 0 {
        return Err(Error::Contract(format!("joint counts {a} and {b} differ or are zero")));
    }
    Ok(())
}

/// Mean over joints of `1 - real(q_gt * q^-1)`.
pub fn loss_cos(q_gt: &[Quaternion], q: &[Quaternion]) -> Result<f64> {
    check_lengths(q_gt.len(), q.len())?;
    check_unit(q_gt, "target")?;
    check_unit(q, "prediction")?;
    Ok(q_gt.iter().zip(q).map(|(g, p)| 1.0 - (*g * p.conjugate()).w).sum::<f64>() / q.len() as f64)
}

/// Mean over joints of the squared componentwise difference.
pub fn loss_l2(q_gt: &[Quaternion], q: &[Quaternion]) -> Result<f64> {
    check_lengths(q_gt.len(), q.len())?;
    Ok(q_gt
        .iter()
        .zip(q)
        .map(|(g, p)| {
            let d = g.to_array();
            let e = p.to_array();
            (0..4).map(|i| (d[i] - e[i]).powi(2)).sum::<f64>()
        })
        .sum::<f64>()
        / q.len() as f64)
}

/// Mean over joints of `|1 - |q_hat|^2|`.
pub fn loss_norm(q_hat: &[[f64; 4]]) -> f64 {
    q_hat.iter().map(|r| (1.0 - r.iter().map(|v| v * v).sum::<f64>()).abs()).sum::<f64>() / q_hat.len() as f64
}

/// Posed joints for normalized rest joints, translated so the root is at
/// the origin. The reference bone keeps unit length under any rotation.
fn posed_normalized(
    model: &KinematicModel,
    x_ref: &[Vec3],
    q: &[Quaternion],
) -> (Vec<Vec3>, Vec<nalgebra::Matrix3<f64>>, Vec<nalgebra::Matrix3<f64>>) {
    let local: Vec<_> = q.iter().map(quat_matrix).collect();
    let (mut pos, glob) = forward_kinematics(model.parents(), x_ref, &local);
    let root = pos[model.root_index()];
    pos.iter_mut().for_each(|p| *p -= root);
    (pos, local, glob)
}

/// Normalized joint positions for rotations `q` applied to normalized rest
/// joints `x_ref`.
pub fn reconstruct_positions(model: &KinematicModel, x_ref: &[Vec3], q: &[Quaternion]) -> Vec<Vec3> {
    posed_normalized(model, x_ref, q).0
}

/// Mean squared distance between the normalized FK of `q` on the shape's
/// rest joints and `x_gt`.
pub fn loss_xyz(q: &[Quaternion], x_gt: &JointSet, shape: &Shape, model: &KinematicModel) -> Result<f64> {
    check_lengths(q.len(), model.joint_count())?;
    check_lengths(x_gt.len(), model.joint_count())?;
    if x_gt.frame != Frame::Normalized {
        return Err(Error::Precondition("position target must be normalized".into()));
    }
    let rest = normalize_joints(&rest_joints(model, shape), model)?;
    let (pos, _, _) = posed_normalized(model, &rest.positions, q);
    Ok(pos.iter().zip(&x_gt.positions).map(|(a, b)| (a - b).norm_squared()).sum::<f64>() / q.len() as f64)
}

/// Batch loss terms, each averaged over the samples it applies to.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossTerms {
    pub total: f64,
    pub cos: f64,
    pub l2: f64,
    pub xyz: f64,
    pub norm: f64,
    pub degenerate_rows: usize,
}

/// Weighted objective over a batch and its gradient with respect to the raw
/// network output. `L_cos` and `L_l2` apply to samples with rotation targets,
/// `L_xyz` and `L_norm` to every sample.
pub(crate) fn batch_objective(
    out: &Array2<f64>,
    samples: &[&IkSample],
    model: &KinematicModel,
    w: &LossWeights,
) -> (LossTerms, Array2<f64>) {
    let j = model.joint_count();
    let jf = j as f64;
    let n_all = samples.len() as f64;
    let n_rot = samples.iter().filter(|s| s.rotations.is_some()).count() as f64;
    let mut terms = LossTerms::default();
    let mut grad = Array2::zeros(out.dim());
    for (row, s) in samples.iter().enumerate() {
        let raw = output_rows(out, row);
        let norm: Vec<(Quaternion, f64, bool)> = raw.iter().map(|r| normalize_row(*r)).collect();
        let q: Vec<Quaternion> = norm.iter().map(|n| n.0).collect();
        let mut gq = vec![[0.0f64; 4]; j];
        let mut graw = vec![[0.0f64; 4]; j];

        for (jj, r) in raw.iter().enumerate() {
            let n2: f64 = r.iter().map(|v| v * v).sum();
            terms.norm += (1.0 - n2).abs() / (jf * n_all);
            let sgn = if n2 > 1.0 {
                1.0
            } else if n2 < 1.0 {
                -1.0
            } else {
                0.0
            };
            for c in 0..4 {
                graw[jj][c] += w.norm * sgn * 2.0 * r[c] / (jf * n_all);
            }
        }

        if let Some(pose) = &s.rotations {
            for (jj, gt) in pose.rotations.iter().enumerate() {
                let g = gt.canonical().to_array();
                let p = q[jj].to_array();
                let mut dot = 0.0;
                let mut sq = 0.0;
                for c in 0..4 {
                    dot += g[c] * p[c];
                    sq += (g[c] - p[c]).powi(2);
                    gq[jj][c] += -w.cos * g[c] / (jf * n_rot) - 2.0 * w.l2 * (g[c] - p[c]) / (jf * n_rot);
                }
                terms.cos += (1.0 - dot) / (jf * n_rot);
                terms.l2 += sq / (jf * n_rot);
            }
        }

        let (pos, local, glob) = posed_normalized(model, &s.input.x_ref, &q);
        let mut gpos = vec![Vec3::zeros(); j];
        let mut gsum = Vec3::zeros();
        for jj in 0..j {
            let e = pos[jj] - s.positions.positions[jj];
            terms.xyz += e.norm_squared() / (jf * n_all);
            gpos[jj] = e * (2.0 * w.xyz / (jf * n_all));
            gsum += gpos[jj];
        }
        gpos[model.root_index()] -= gsum;
        if w.xyz != 0.0 {
            let gl = forward_kinematics_backward(model.parents(), &s.input.x_ref, &local, &glob, &gpos);
            for jj in 0..j {
                let d = quat_matrix_backward(&q[jj], &gl[jj]);
                for c in 0..4 {
                    gq[jj][c] += d[c];
                }
            }
        }

        for jj in 0..j {
            let (qn, n, degenerate) = norm[jj];
            if degenerate {
                terms.degenerate_rows += 1;
            } else {
                let p = qn.to_array();
                let proj: f64 = (0..4).map(|c| p[c] * gq[jj][c]).sum();
                for c in 0..4 {
                    graw[jj][c] += (gq[jj][c] - p[c] * proj) / n;
                }
            }
            for c in 0..4 {
                grad[[row, 4 * jj + c]] = graw[jj][c];
            }
        }
    }
    terms.total = w.cos * terms.cos + w.l2 * terms.l2 + w.xyz * terms.xyz + w.norm * terms.norm;
    (terms, grad)
}

/// Training-mode loss and parameter gradients for one batch.
pub fn loss_and_grads(
    net: &Mlp,
    samples: &[&IkSample],
    model: &KinematicModel,
    weights: &LossWeights,
) -> Result<(LossTerms, Grads, Forward)> {
    check_head(net, model.joint_count())?;
    let inputs: Vec<&IkInput> = samples.iter().map(|s| &s.input).collect();
    let fwd = net.forward(&features(&inputs, net.input_dim())?, Mode::Train)?;
    let (terms, g) = batch_objective(&fwd.output, samples, model, weights);
    let grads = net.backward(&fwd, &g)?;
    Ok((terms, grads, fwd))
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub worst_param: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub params: usize,
}

/// Relative-error floor for parameters whose true gradient is near zero.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Compare analytic gradients with central differences of step `h` on every
/// parameter. Relative error is `|a - n| / max(|a|, |n|, GRAD_CHECK_FLOOR)`.
pub fn gradient_check(
    net: &Mlp,
    samples: &[&IkSample],
    model: &KinematicModel,
    weights: &LossWeights,
    h: f64,
) -> Result<GradCheck> {
    let (_, grads, _) = loss_and_grads(net, samples, model, weights)?;
    let analytic = grads.to_flat();
    let base = net.params_flat();
    let mut probe = net.clone();
    let mut eval = |p: &[f64]| -> Result<f64> {
        probe.set_params_flat(p)?;
        let inputs: Vec<&IkInput> = samples.iter().map(|s| &s.input).collect();
        let out = probe.forward(&features(&inputs, probe.input_dim())?, Mode::Train)?.output;
        Ok(batch_objective(&out, samples, model, weights).0.total)
    };
    let mut worst = GradCheck { max_rel_error: 0.0, worst_param: 0, analytic: 0.0, numeric: 0.0, params: base.len() };
    let mut p = base.clone();
    for i in 0..base.len() {
        p[i] = base[i] + h;
        let up = eval(&p)?;
        p[i] = base[i] - h;
        let dn = eval(&p)?;
        p[i] = base[i];
        let numeric = (up - dn) / (2.0 * h);
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
        if rel > worst.max_rel_error {
            worst = GradCheck { max_rel_error: rel, worst_param: i, analytic: a, numeric, params: base.len() };
        }
    }
    Ok(worst)
}
