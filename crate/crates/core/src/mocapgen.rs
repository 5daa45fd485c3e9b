//! Training data: pose-library augmentation and noisy position pairs.
//!
//! Augmented poses recombine fingers from independent library poses, slerp
//! every joint from the identity with one shared `t`, and draw a random
//! shape. Noisy samples perturb the input joints and keep clean targets.
//!
//! Generation is deterministic per `(seed, index)`, so datasets can be built
//! in parallel over index ranges.

use std::borrow::Cow;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::handmodel::{fk_joints, normalize_joints, rest_joints, JointSet, KinematicModel, Pose, Shape, SHAPE_BOUND};
use crate::ikengine::{encode_input, SampleSource};
use crate::rotmath::{slerp, AxisAngle, Quaternion, Vec3};

pub use crate::ikengine::{IkSample, SampleKind};

pub const POSES_FORMAT: &str = "handik-poses-v1";

/// Joints grouped into five fingers and the remaining (wrist) set.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FingerPartition {
    pub fingers: [Vec<usize>; 5],
    pub wrist: Vec<usize>,
}

impl FingerPartition {
    /// Each finger is the chain from a fingertip up to (not including) the
    /// tree root; everything else goes to the wrist set.
    pub fn anatomical(model: &KinematicModel) -> Self {
        let mut owner = vec![None; model.joint_count()];
        let fingers = model.fingertips().map(|tip| {
            let mut chain = Vec::new();
            let mut j = tip;
            while let Some(p) = model.parents()[j] {
                chain.push(j);
                j = p;
            }
            chain.reverse();
            chain
        });
        for (f, chain) in fingers.iter().enumerate() {
            for &j in chain {
                owner[j] = Some(f);
            }
        }
        let wrist = (0..model.joint_count()).filter(|&j| owner[j].is_none()).collect();
        Self { fingers, wrist }
    }

    pub fn validate(&self, joints: usize) -> Result<()> {
        let mut seen = vec![false; joints];
        for &j in self.fingers.iter().flatten().chain(&self.wrist) {
            if j >= joints || seen[j] {
                return Err(Error::Contract(format!("partition index {j} out of range or repeated")));
            }
            seen[j] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Contract("partition does not cover every joint".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoseLibrary {
    pub poses: Vec<Pose>,
    pub subjects: Option<Vec<u32>>,
    pub partition: FingerPartition,
}

impl PoseLibrary {
    pub fn new(poses: Vec<Pose>, subjects: Option<Vec<u32>>, partition: FingerPartition) -> Result<Self> {
        let joints = poses.first().map(Pose::len).ok_or_else(|| Error::Contract("empty pose library".into()))?;
        if poses.iter().any(|p| p.len() != joints) {
            return Err(Error::Contract("library poses have different joint counts".into()));
        }
        if subjects.as_ref().is_some_and(|s| s.len() != poses.len()) {
            return Err(Error::Contract("subject ids do not match pose count".into()));
        }
        partition.validate(joints)?;
        Ok(Self { poses, subjects, partition })
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn joint_count(&self) -> usize {
        self.poses[0].len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    /// Standard deviation of each shape coefficient.
    pub shape_std: f64,
    /// Interpolation parameter is uniform on `[t_min, t_max]`.
    pub t_min: f64,
    pub t_max: f64,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { shape_std: 3.0, t_min: 0.0, t_max: 1.0, seed: 0 }
    }
}

/// Isotropic Gaussian noise per joint, standard deviation a fraction of the
/// reference-bone length.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseModel {
    pub std: f64,
    pub seed: u64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self { std: 0.05, seed: 1 }
    }
}

/// Copy each finger's rotations from its source pose and the wrist set from
/// the last id. `ids` holds five finger sources then the wrist source.
pub fn recombine_fingers(lib: &PoseLibrary, ids: &[usize; 6]) -> Result<Pose> {
    if let Some(bad) = ids.iter().find(|&&i| i >= lib.len()) {
        return Err(Error::Contract(format!("pose id {bad} out of range for library of {}", lib.len())));
    }
    let mut rotations = vec![Quaternion::IDENTITY; lib.joint_count()];
    let groups = lib.partition.fingers.iter().chain(std::iter::once(&lib.partition.wrist));
    for (group, &id) in groups.zip(ids) {
        for &j in group {
            rotations[j] = lib.poses[id].rotations[j];
        }
    }
    Ok(Pose { rotations })
}

/// Six independent uniform pose ids.
pub fn random_sources(lib: &PoseLibrary, rng: &mut impl Rng) -> [usize; 6] {
    std::array::from_fn(|_| rng.random_range(0..lib.len()))
}

/// Slerp every joint from the identity towards `target` by the same `t`.
pub fn interpolate_pose(target: &Pose, t: f64) -> Pose {
    Pose { rotations: target.rotations.iter().map(|q| slerp(&Quaternion::IDENTITY, q, t)).collect() }
}

pub fn sample_shape(cfg: &AugmentConfig, dim: usize, rng: &mut impl Rng) -> Shape {
    let normal = Normal::new(0.0, cfg.shape_std.max(0.0)).expect("finite std");
    Shape { beta: (0..dim).map(|_| normal.sample(rng)).collect() }
}

fn sample_t(cfg: &AugmentConfig, rng: &mut impl Rng) -> f64 {
    if cfg.t_max > cfg.t_min {
        rng.random_range(cfg.t_min..=cfg.t_max)
    } else {
        cfg.t_min
    }
}

/// Augmented pose and shape, clamped to the shape bounds.
fn sample_pose_and_shape(
    lib: &PoseLibrary,
    model: &KinematicModel,
    cfg: &AugmentConfig,
    rng: &mut impl Rng,
) -> (Pose, Shape) {
    let ids = random_sources(lib, rng);
    let pose = recombine_fingers(lib, &ids).expect("ids drawn in range");
    let t = sample_t(cfg, rng);
    let pose = interpolate_pose(&pose, t).canonical();
    let mut shape = sample_shape(cfg, model.shape_dim(), rng);
    shape.beta.iter_mut().for_each(|b| *b = b.clamp(-SHAPE_BOUND, SHAPE_BOUND));
    (pose, shape)
}

/// A sample with both rotation and position targets.
pub fn gen_paired_sample(
    lib: &PoseLibrary,
    model: &KinematicModel,
    cfg: &AugmentConfig,
    rng: &mut impl Rng,
) -> Result<IkSample> {
    let (pose, shape) = sample_pose_and_shape(lib, model, cfg, rng);
    let rest = rest_joints(model, &shape);
    let posed = fk_joints(model, &shape, &pose);
    Ok(IkSample {
        input: encode_input(&posed, &rest, model)?,
        rotations: Some(pose),
        positions: normalize_joints(&posed, model)?,
        kind: SampleKind::Mocap,
    })
}

/// Add noise to normalized joints (std in reference-bone units) and renormalize.
pub fn perturb_joints(clean: &JointSet, model: &KinematicModel, std: f64, rng: &mut impl Rng) -> Result<JointSet> {
    if std == 0.0 {
        return Ok(clean.clone());
    }
    let normal = Normal::new(0.0, std).map_err(|e| Error::Contract(e.to_string()))?;
    let noisy = JointSet::new(
        clean
            .positions
            .iter()
            .map(|p| p + Vec3::new(normal.sample(rng), normal.sample(rng), normal.sample(rng)))
            .collect(),
        clean.frame,
    );
    normalize_joints(&noisy, model)
}

/// A position-only sample whose input joints carry noise.
pub fn gen_noisy_sample(
    lib: &PoseLibrary,
    model: &KinematicModel,
    cfg: &AugmentConfig,
    noise: &NoiseModel,
    rng: &mut impl Rng,
) -> Result<IkSample> {
    if !(noise.std >= 0.0) {
        return Err(Error::Contract(format!("noise std must be >= 0, got {}", noise.std)));
    }
    let (pose, shape) = sample_pose_and_shape(lib, model, cfg, rng);
    let rest = rest_joints(model, &shape);
    let clean = normalize_joints(&fk_joints(model, &shape, &pose), model)?;
    let noisy = perturb_joints(&clean, model, noise.std, rng)?;
    Ok(IkSample {
        input: encode_input(&noisy, &rest, model)?,
        rotations: None,
        positions: clean,
        kind: SampleKind::Noisy,
    })
}

/// Generator for `(seed, index)`; streams keep indices independent.
pub fn indexed_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// `count` samples starting at `start`, generated in parallel. With `noise`
/// set the samples are noisy pairs, otherwise rotation-labeled.
pub fn gen_samples(
    lib: &PoseLibrary,
    model: &KinematicModel,
    cfg: &AugmentConfig,
    noise: Option<&NoiseModel>,
    start: u64,
    count: usize,
) -> Result<Vec<IkSample>> {
    (0..count as u64)
        .into_par_iter()
        .map(|i| match noise {
            None => gen_paired_sample(lib, model, cfg, &mut indexed_rng(cfg.seed, start + i)),
            Some(n) => {
                let mut rng = indexed_rng(cfg.seed ^ n.seed.rotate_left(32), start + i);
                gen_noisy_sample(lib, model, cfg, n, &mut rng)
            }
        })
        .collect()
}

/// Samples regenerated every epoch from the library.
pub struct OnTheFly<'a> {
    pub lib: &'a PoseLibrary,
    pub model: &'a KinematicModel,
    pub cfg: AugmentConfig,
    pub noise: Option<NoiseModel>,
    /// Rotation-labeled and noisy samples per epoch.
    pub mocap_per_epoch: usize,
    pub noisy_per_epoch: usize,
}

impl SampleSource for OnTheFly<'_> {
    fn epoch_samples(&self, epoch: usize) -> Cow<'_, [IkSample]> {
        let base = epoch as u64 * (self.mocap_per_epoch + self.noisy_per_epoch) as u64;
        let mut out = gen_samples(self.lib, self.model, &self.cfg, None, base, self.mocap_per_epoch)
            .expect("library samples are valid");
        if let Some(n) = &self.noise {
            out.extend(
                gen_samples(self.lib, self.model, &self.cfg, Some(n), base, self.noisy_per_epoch)
                    .expect("library samples are valid"),
            );
        }
        Cow::Owned(out)
    }
}

/// Angle limits of one joint, in radians, about its flexion, abduction and
/// twist axes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JointLimits {
    pub flex: (f64, f64),
    pub abduct: (f64, f64),
    pub twist: (f64, f64),
}

const fn lim(flex: (f64, f64), abduct: f64, twist: f64) -> JointLimits {
    JointLimits { flex, abduct: (-abduct, abduct), twist: (-twist, twist) }
}

/// Finger joints base to tip: MCP, PIP, DIP.
pub const FINGER_LIMITS: [JointLimits; 3] =
    [lim((-0.3, 1.4), 0.3, 0.15), lim((0.0, 1.6), 0.05, 0.05), lim((0.0, 1.2), 0.05, 0.05)];
/// Thumb joints base to tip: CMC, MCP, IP.
pub const THUMB_LIMITS: [JointLimits; 3] =
    [lim((-0.4, 0.9), 0.6, 0.4), lim((-0.2, 1.0), 0.2, 0.1), lim((-0.2, 1.3), 0.05, 0.05)];
/// Bound on each axis-angle component of the wrist rotation.
pub const WRIST_LIMIT: f64 = 0.6;

/// Flexion, abduction and twist axes of a joint from its rest bone `u`
/// (towards the child): flexion `normalize(u x z)` curls towards `+z`,
/// abduction is `flex x u`, twist is `u`.
pub fn joint_axes(u: &Vec3) -> [Vec3; 3] {
    let u = u.normalize();
    let f = u.cross(&Vec3::z()).normalize();
    [f, f.cross(&u), u]
}

/// Compose a joint rotation from flexion, abduction and twist angles:
/// twist first, then abduction, then flexion.
pub fn joint_rotation(axes: &[Vec3; 3], angles: [f64; 3]) -> Quaternion {
    Quaternion::from_axis_angle(&axes[0], angles[0])
        * Quaternion::from_axis_angle(&axes[1], angles[1])
        * Quaternion::from_axis_angle(&axes[2], angles[2])
}

/// Per-joint limits and axes for the model's mean shape. Fingertips and the
/// tree root have none.
pub fn joint_limit_table(model: &KinematicModel) -> Vec<Option<(JointLimits, [Vec3; 3])>> {
    let partition = FingerPartition::anatomical(model);
    let rest = model.rest_joints0();
    let mut table = vec![None; model.joint_count()];
    for (f, chain) in partition.fingers.iter().enumerate() {
        let limits = if f == 0 { &THUMB_LIMITS } else { &FINGER_LIMITS };
        for (k, &j) in chain.iter().enumerate() {
            if let (Some(l), Some(&c)) = (limits.get(k), model.children(j).first()) {
                table[j] = Some((*l, joint_axes(&(rest[c] - rest[j]))));
            }
        }
    }
    table
}

fn uniform(r: (f64, f64), rng: &mut impl Rng) -> f64 {
    if r.1 > r.0 {
        rng.random_range(r.0..=r.1)
    } else {
        r.0
    }
}

/// `n` random poses within the documented joint limits, uniform per angle.
pub fn synth_pose_library(n: usize, model: &KinematicModel, rng: &mut impl Rng) -> Result<PoseLibrary> {
    if n == 0 {
        return Err(Error::Contract("pose library needs at least one pose".into()));
    }
    let table = joint_limit_table(model);
    let root = model.parents().iter().position(Option::is_none).expect("tree has a root");
    let poses = (0..n)
        .map(|_| {
            let mut rotations = vec![Quaternion::IDENTITY; model.joint_count()];
            let w = (-WRIST_LIMIT, WRIST_LIMIT);
            rotations[root] = AxisAngle::new(uniform(w, rng), uniform(w, rng), uniform(w, rng)).to_quat().canonical();
            for (j, entry) in table.iter().enumerate() {
                if let Some((l, axes)) = entry {
                    let angles = [uniform(l.flex, rng), uniform(l.abduct, rng), uniform(l.twist, rng)];
                    rotations[j] = joint_rotation(axes, angles).canonical();
                }
            }
            Pose { rotations }
        })
        .collect();
    PoseLibrary::new(poses, None, FingerPartition::anatomical(model))
}

#[derive(Serialize, Deserialize)]
struct PosesFile {
    format: String,
    joints: usize,
    partition: FingerPartition,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    subjects: Option<Vec<u32>>,
    /// `[w, x, y, z]` per joint per pose.
    poses: Vec<Vec<[f64; 4]>>,
}

impl PoseLibrary {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&PosesFile {
            format: POSES_FORMAT.into(),
            joints: self.joint_count(),
            partition: self.partition.clone(),
            subjects: self.subjects.clone(),
            poses: self.poses.iter().map(|p| p.rotations.iter().map(|q| q.to_array()).collect()).collect(),
        })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let f: PosesFile = serde_json::from_str(text)?;
        if f.format != POSES_FORMAT {
            return Err(Error::Format(format!("unsupported pose library format {:?}", f.format)));
        }
        if f.poses.iter().any(|p| p.len() != f.joints) {
            return Err(Error::Format("pose has the wrong joint count".into()));
        }
        let poses = f
            .poses
            .iter()
            .map(|p| Pose::new(p.iter().map(|a| Quaternion::from_array(*a)).collect()))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| Error::Format(e.to_string()))?;
        Self::new(poses, f.subjects, f.partition).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}
