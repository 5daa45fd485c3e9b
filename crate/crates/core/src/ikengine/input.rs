//! Network input features.

use crate::error::{Error, Result};
use crate::handmodel::{bone_vectors, normalize_joints, Frame, JointSet, KinematicModel};
use crate::rotmath::Vec3;

/// `[X, D, X_ref, D_ref]`: normalized joints, unit bone directions, and the
/// same two blocks for the rest pose. Flattened joint-major, `x, y, z` innermost.
#[derive(Clone, Debug, PartialEq)]
pub struct IkInput {
    pub x: Vec<Vec3>,
    pub d: Vec<Vec3>,
    pub x_ref: Vec<Vec3>,
    pub d_ref: Vec<Vec3>,
}

impl IkInput {
    pub fn joint_count(&self) -> usize {
        self.x.len()
    }

    /// Flattened length `4 * J * 3`.
    pub fn feature_len(&self) -> usize {
        12 * self.joint_count()
    }

    pub fn write_into(&self, out: &mut [f64]) {
        assert_eq!(out.len(), self.feature_len(), "feature buffer length");
        let blocks = [&self.x, &self.d, &self.x_ref, &self.d_ref];
        for (b, block) in blocks.iter().enumerate() {
            for (j, v) in block.iter().enumerate() {
                let o = 3 * (b * self.joint_count() + j);
                out[o..o + 3].copy_from_slice(v.as_slice());
            }
        }
    }

    pub fn to_features(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.feature_len()];
        self.write_into(&mut out);
        out
    }

    pub fn from_features(features: &[f64], joints: usize) -> Result<Self> {
        if features.len() != 12 * joints {
            return Err(Error::Format(format!(
                "expected {} input features for {joints} joints, got {}",
                12 * joints,
                features.len()
            )));
        }
        let block = |b: usize| -> Vec<Vec3> {
            (0..joints)
                .map(|j| {
                    let o = 3 * (b * joints + j);
                    Vec3::new(features[o], features[o + 1], features[o + 2])
                })
                .collect()
        };
        Ok(Self { x: block(0), d: block(1), x_ref: block(2), d_ref: block(3) })
    }

    /// Normalized rest joints as a joint set.
    pub fn rest(&self) -> JointSet {
        JointSet::new(self.x_ref.clone(), Frame::Normalized)
    }
}

/// Normalize both joint sets and attach their bone directions.
pub fn encode_input(joints: &JointSet, rest: &JointSet, model: &KinematicModel) -> Result<IkInput> {
    let x = normalize_joints(joints, model)?;
    let x_ref = normalize_joints(rest, model)?;
    let d = bone_vectors(&x, model).directions;
    let d_ref = bone_vectors(&x_ref, model).directions;
    Ok(IkInput { x: x.positions, d, x_ref: x_ref.positions, d_ref })
}
