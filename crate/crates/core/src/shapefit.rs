//! Shape coefficients from bone-length ratios.
//!
//! Minimizes `E(b) = sum_k (l_k(b) / l_ref(b) - t_k)^2 + lambda |b|^2` over the
//! rest-pose bones with damped Gauss-Newton. Rest joints are linear in the
//! shape coefficients, so the Jacobian is exact.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::handmodel::{rest_joints, JointSet, KinematicModel, Shape, SHAPE_BOUND};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShapeFitConfig {
    pub lambda_beta: f64,
    pub max_iters: usize,
    /// Stop once an accepted step is shorter than this.
    pub step_tol: f64,
    /// Converged once `|grad E| <= residual_tol`.
    pub residual_tol: f64,
}

impl Default for ShapeFitConfig {
    fn default() -> Self {
        Self { lambda_beta: 1e-3, max_iters: 50, step_tol: 1e-10, residual_tol: 1e-8 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShapeFitResult {
    pub beta: Shape,
    /// `E(beta)`.
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
    /// `E` after the start and after each accepted step.
    pub history: Vec<f64>,
}

/// Length of each parent-to-child bone, ordered as [`KinematicModel::bones`].
pub fn bone_lengths(joints: &JointSet, model: &KinematicModel) -> Vec<f64> {
    model.bones().iter().map(|&(p, c)| (joints.positions[c] - joints.positions[p]).norm()).collect()
}

/// Bone lengths divided by the reference bone's length.
pub fn bone_ratios(joints: &JointSet, model: &KinematicModel) -> Result<Vec<f64>> {
    let lengths = bone_lengths(joints, model);
    let l_ref = lengths[model.reference_bone()];
    if !(l_ref > 0.0) {
        return Err(Error::Degenerate("reference bone has zero length".into()));
    }
    Ok(lengths.iter().map(|l| l / l_ref).collect())
}

struct Problem<'a> {
    model: &'a KinematicModel,
    targets: &'a [f64],
    sqrt_lambda: f64,
}

impl Problem<'_> {
    /// Stacked residuals (bones then regularizer) and their Jacobian.
    fn linearize(&self, beta: &[f64]) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let m = self.model;
        let nb = beta.len();
        let js = rest_joints(m, &Shape { beta: beta.to_vec() });
        let basis = m.joint_shape_basis();
        let bones = m.bones();
        let mut lengths = Vec::with_capacity(bones.len());
        let mut dl = DMatrix::<f64>::zeros(bones.len(), nb);
        for (i, &(p, c)) in bones.iter().enumerate() {
            let d = js.positions[c] - js.positions[p];
            let l = d.norm();
            lengths.push(l);
            if l > 0.0 {
                let u = d / l;
                for k in 0..nb {
                    dl[(i, k)] = (0..3).map(|a| u[a] * (basis[(3 * c + a, k)] - basis[(3 * p + a, k)])).sum::<f64>();
                }
            }
        }
        let r_idx = m.reference_bone();
        let l_ref = lengths[r_idx];
        if !(l_ref > 0.0) {
            return Err(Error::Degenerate("reference bone collapsed during fit".into()));
        }
        let nr = bones.len();
        let mut r = DVector::zeros(nr + nb);
        let mut jac = DMatrix::zeros(nr + nb, nb);
        for i in 0..nr {
            r[i] = lengths[i] / l_ref - self.targets[i];
            for k in 0..nb {
                jac[(i, k)] = (dl[(i, k)] * l_ref - lengths[i] * dl[(r_idx, k)]) / (l_ref * l_ref);
            }
        }
        for k in 0..nb {
            r[nr + k] = self.sqrt_lambda * beta[k];
            jac[(nr + k, k)] = self.sqrt_lambda;
        }
        Ok((r, jac))
    }

    fn energy(&self, beta: &[f64]) -> Result<f64> {
        Ok(self.linearize(beta)?.0.norm_squared())
    }
}

/// `E(beta)` for the given targets.
pub fn shape_energy(beta: &Shape, targets: &[f64], model: &KinematicModel, lambda_beta: f64) -> Result<f64> {
    check_targets(targets, model)?;
    Problem { model, targets, sqrt_lambda: lambda_beta.sqrt() }.energy(&beta.beta)
}

fn check_targets(targets: &[f64], model: &KinematicModel) -> Result<()> {
    let n = model.bones().len();
    if targets.len() != n {
        return Err(Error::Contract(format!("expected {n} bone ratios, got {}", targets.len())));
    }
    if targets.iter().any(|t| !t.is_finite()) {
        return Err(Error::Contract("bone ratio targets must be finite".into()));
    }
    Ok(())
}

/// Fit shape coefficients to target bone ratios, starting from the mean shape.
/// Coefficients are kept within `[-SHAPE_BOUND, SHAPE_BOUND]`.
pub fn fit_shape(targets: &[f64], model: &KinematicModel, cfg: &ShapeFitConfig) -> Result<ShapeFitResult> {
    check_targets(targets, model)?;
    if !(cfg.lambda_beta >= 0.0) || !(cfg.step_tol > 0.0) || !(cfg.residual_tol > 0.0) {
        return Err(Error::Contract("shape fit needs lambda >= 0 and positive tolerances".into()));
    }
    let prob = Problem { model, targets, sqrt_lambda: cfg.lambda_beta.sqrt() };
    let nb = model.shape_dim();
    let mut beta = vec![0.0; nb];
    let (mut r, mut jac) = prob.linearize(&beta)?;
    let mut energy = r.norm_squared();
    let mut history = vec![energy];
    let mut mu = 1e-3;
    let mut iterations = 0;
    let grad_norm = |r: &DVector<f64>, j: &DMatrix<f64>| 2.0 * (j.transpose() * r).norm();
    let mut converged = grad_norm(&r, &jac) <= cfg.residual_tol;

    while !converged && iterations < cfg.max_iters {
        iterations += 1;
        let jtj = jac.transpose() * &jac;
        let jtr = jac.transpose() * &r;
        let mut accepted = None;
        for _ in 0..30 {
            let mut a = jtj.clone();
            for k in 0..nb {
                a[(k, k)] += mu * jtj[(k, k)].max(1e-12);
            }
            let Some(delta) = a.cholesky().map(|c| c.solve(&(-&jtr))) else {
                mu *= 10.0;
                continue;
            };
            let cand: Vec<f64> =
                beta.iter().zip(delta.iter()).map(|(b, d)| (b + d).clamp(-SHAPE_BOUND, SHAPE_BOUND)).collect();
            let e = prob.energy(&cand)?;
            if e <= energy {
                mu = (mu / 3.0).max(1e-12);
                accepted = Some(cand);
                break;
            }
            mu *= 4.0;
        }
        let Some(cand) = accepted else { break };
        let step: f64 = beta.iter().zip(&cand).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        beta = cand;
        (r, jac) = prob.linearize(&beta)?;
        energy = r.norm_squared();
        history.push(energy);
        converged = grad_norm(&r, &jac) <= cfg.residual_tol;
        if step < cfg.step_tol {
            break;
        }
    }
    Ok(ShapeFitResult { beta: Shape { beta }, residual: energy, iterations, converged, history })
}
