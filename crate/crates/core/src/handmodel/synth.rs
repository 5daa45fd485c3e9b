//! Procedural stand-in for a licensed hand model.
//!
//! Joint layout (21 joints): 0 wrist, then four joints per finger from base
//! to tip for thumb (1-4), index (5-8), middle (9-12), ring (13-16) and
//! little (17-20). The middle MCP (9) is the normalization root. Units are
//! millimetres; fingers point along +y, the palm faces +z.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{KinematicModel, MeshBlock, ModelParts, SHAPE_DIM};
use crate::rotmath::Vec3;

struct FingerSpec {
    base: [f64; 3],
    dir: [f64; 3],
    lengths: [f64; 3],
}

const FINGERS: [FingerSpec; 5] = [
    FingerSpec { base: [-20.0, 25.0, 6.0], dir: [-0.62, 0.74, 0.26], lengths: [36.0, 31.0, 27.0] },
    FingerSpec { base: [-23.0, 88.0, 0.0], dir: [-0.10, 1.0, 0.0], lengths: [42.0, 25.0, 21.0] },
    FingerSpec { base: [0.0, 92.0, 0.0], dir: [0.0, 1.0, 0.0], lengths: [46.0, 28.0, 23.0] },
    FingerSpec { base: [19.0, 86.0, 0.0], dir: [0.08, 1.0, 0.0], lengths: [43.0, 27.0, 22.0] },
    FingerSpec { base: [36.0, 76.0, 0.0], dir: [0.18, 1.0, 0.0], lengths: [34.0, 20.0, 19.0] },
];

const RING_RADIUS: f64 = 8.0;
const WRIST_RING_RADIUS: f64 = 15.0;

/// Deterministic synthetic 21-joint hand with a joint shape basis and a coarse
/// mesh (six vertices around each joint).
pub fn synth_model(seed: u64) -> KinematicModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let jitter = |rng: &mut ChaCha8Rng, amp: f64| rng.random_range(-amp..amp);

    let mut parents = vec![None];
    let mut rest = vec![Vec3::zeros()];
    for f in &FINGERS {
        let base_idx = rest.len();
        let base = Vec3::new(
            f.base[0] + jitter(&mut rng, 1.5),
            f.base[1] + jitter(&mut rng, 1.5),
            f.base[2] + jitter(&mut rng, 0.5),
        );
        parents.push(Some(0));
        rest.push(base);
        let dir = Vec3::new(f.dir[0] + jitter(&mut rng, 0.03), f.dir[1], f.dir[2]).normalize();
        let mut p = base;
        for (k, len) in f.lengths.iter().enumerate() {
            p += dir * (len * (1.0 + jitter(&mut rng, 0.04)));
            parents.push(Some(base_idx + k));
            rest.push(p);
        }
    }
    let j = rest.len();

    // Each shape coefficient rescales bones by small per-bone factors and
    // bends them slightly; offsets accumulate down each chain.
    let scale = Normal::new(0.0, 0.015).unwrap();
    let bend = Normal::new(0.0, 0.004).unwrap();
    let mut basis = DMatrix::zeros(3 * j, SHAPE_DIM);
    for k in 0..SHAPE_DIM {
        let global = match k {
            0 => 0.02,
            _ => 0.0,
        };
        for c in 1..j {
            let p = parents[c].unwrap();
            let bone = rest[c] - rest[p];
            let mut s = global + scale.sample(&mut rng);
            if k == 1 && p != 0 {
                // finger length relative to palm
                s += 0.02;
            }
            let perp = Vec3::new(bend.sample(&mut rng), 0.0, bend.sample(&mut rng)) * bone.norm();
            let off = bone * s + perp;
            for a in 0..3 {
                basis[(3 * c + a, k)] = basis[(3 * p + a, k)] + off[a];
            }
        }
    }

    let root_index = 9;
    let fingertips = [4, 8, 12, 16, 20];
    let mesh = build_mesh(&mut rng, &parents, &rest, &basis);
    KinematicModel::from_parts(ModelParts {
        parents,
        rest_joints0: rest,
        joint_shape_basis: basis,
        root_index,
        wrist_index: 0,
        fingertips,
        mesh: Some(mesh),
    })
    .expect("synthetic model is valid by construction")
}

fn build_mesh(rng: &mut ChaCha8Rng, parents: &[Option<usize>], rest: &[Vec3], joint_basis: &DMatrix<f64>) -> MeshBlock {
    let j = rest.len();
    let v = 6 * j;
    let mut has_children = vec![false; j];
    for p in parents.iter().flatten() {
        has_children[*p] = true;
    }
    let pose_joints = (1..j).filter(|&i| has_children[i]).count();
    let dirs = [Vec3::x(), -Vec3::x(), Vec3::y(), -Vec3::y(), Vec3::z(), -Vec3::z()];
    let radial = Normal::new(0.0, 0.3).unwrap();
    let corrective = Normal::new(0.0, 0.2).unwrap();

    let mut template = Vec::with_capacity(v);
    let mut shape_basis = DMatrix::zeros(3 * v, SHAPE_DIM);
    let mut skinning = DMatrix::zeros(v, j);
    let mut regressor = DMatrix::zeros(j, v);
    for jj in 0..j {
        let r = if jj == 0 { WRIST_RING_RADIUS } else { RING_RADIUS };
        // Opposite vertices get opposite radial offsets, so the ring mean
        // (the regressed joint) follows the joint basis exactly.
        let radial_k: Vec<[f64; 3]> =
            (0..SHAPE_DIM).map(|_| [radial.sample(rng), radial.sample(rng), radial.sample(rng)]).collect();
        for (d, dir) in dirs.iter().enumerate() {
            let vi = 6 * jj + d;
            template.push(rest[jj] + dir * r);
            let sign = if d % 2 == 0 { 1.0 } else { -1.0 };
            for k in 0..SHAPE_DIM {
                for a in 0..3 {
                    shape_basis[(3 * vi + a, k)] =
                        joint_basis[(3 * jj + a, k)] + sign * radial_k[k][d / 2] * dir[a].abs();
                }
            }
            regressor[(jj, vi)] = 1.0 / 6.0;
            match parents[jj] {
                None => skinning[(vi, jj)] = 1.0,
                Some(p) if !has_children[jj] => skinning[(vi, p)] = 1.0,
                Some(p) => {
                    skinning[(vi, p)] = 0.5;
                    skinning[(vi, jj)] = 0.5;
                }
            }
        }
    }
    let pose_basis = DMatrix::from_fn(3 * v, 9 * pose_joints, |_, _| corrective.sample(rng));
    MeshBlock { template, shape_basis, pose_basis, skinning, regressor }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_model() {
        assert_eq!(synth_model(3), synth_model(3));
        assert_ne!(synth_model(3), synth_model(4));
    }

    #[test]
    fn tree_has_five_leaf_fingertips() {
        let m = synth_model(0);
        assert_eq!(m.joint_count(), 21);
        let leaves: Vec<usize> = (0..21).filter(|&j| m.children(j).is_empty()).collect();
        assert_eq!(leaves, m.fingertips().to_vec());
        assert_eq!(m.pose_joints().len(), 15);
        assert_eq!(m.bones().len(), 20);
        assert_eq!(m.bones()[m.reference_bone()], (0, 9));
    }

    #[test]
    fn skinning_rows_are_convex() {
        let m = synth_model(1);
        for row in m.mesh().unwrap().skinning.row_iter() {
            assert!(row.iter().all(|w| *w >= 0.0));
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn bones_stay_positive_over_wide_shapes() {
        let m = synth_model(2);
        for k in 0..SHAPE_DIM {
            for sign in [-9.0, 9.0] {
                let mut beta = vec![0.0; SHAPE_DIM];
                beta[k] = sign;
                let js = super::super::rest_joints(&m, &super::super::Shape { beta });
                for (p, c) in m.bones() {
                    assert!((js.positions[c] - js.positions[p]).norm() > 5.0);
                }
            }
        }
    }
}
