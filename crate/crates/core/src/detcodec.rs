//! Heat, location and delta maps, their losses, and recovery of the global
//! hand translation from 2D detections.
//!
//! Map pixels are addressed `[joint, row, col]` with `u` the column and `v`
//! the row. Heat maps are unnormalized Gaussians (peak 1, no truncation).

use std::io::{Read, Write};

use ndarray::{Array3, Array4, Axis};

use crate::error::{Error, Result};
use crate::handmodel::{Frame, JointSet};
use crate::rotmath::Vec3;

pub const DEFAULT_RESOLUTION: usize = 32;
pub const DEFAULT_SIGMA: f64 = 1.0;
pub const MAPS_MAGIC: &[u8; 8] = b"HIKMAPS1";

/// Pinhole intrinsics.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub skew: f64,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        Self::with_skew(fx, fy, cx, cy, 0.0)
    }

    pub fn with_skew(fx: f64, fy: f64, cx: f64, cy: f64, skew: f64) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) || ![cx, cy, skew].iter().all(|v| v.is_finite()) {
            return Err(Error::Contract(format!("invalid intrinsics fx={fx} fy={fy}")));
        }
        Ok(Self { fx, fy, cx, cy, skew })
    }

    /// `K^-1 (u, v, 1)^T`.
    pub fn unproject(&self, uv: [f64; 2]) -> Vec3 {
        let y = (uv[1] - self.cy) / self.fy;
        let x = (uv[0] - self.cx - self.skew * y) / self.fx;
        Vec3::new(x, y, 1.0)
    }

    /// Pixel coordinates of a camera-space point in front of the camera.
    pub fn project(&self, p: &Vec3) -> [f64; 2] {
        let (x, y) = (p.x / p.z, p.y / p.z);
        [self.fx * x + self.skew * y + self.cx, self.fy * y + self.cy]
    }
}

/// 2D joint annotations in map-resolution pixel coordinates `(u, v)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Annotation2D {
    pub uv: Vec<[f64; 2]>,
    pub visible: Vec<bool>,
}

impl Annotation2D {
    pub fn visible(uv: Vec<[f64; 2]>) -> Self {
        let visible = vec![true; uv.len()];
        Self { uv, visible }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MapStack {
    /// `J x S x S` confidences.
    pub heat: Array3<f64>,
    /// `J x S x S x 3` root-relative normalized coordinates.
    pub loc: Array4<f64>,
    /// `J x S x S x 3` bone directions; the tree root's map is zero.
    pub delta: Array4<f64>,
}

impl MapStack {
    pub fn joints(&self) -> usize {
        self.heat.len_of(Axis(0))
    }

    pub fn resolution(&self) -> usize {
        self.heat.len_of(Axis(1))
    }

    /// Ground-truth maps for one hand.
    pub fn encode(
        ann: &Annotation2D,
        xyz: &JointSet,
        bones: &[Vec3],
        resolution: usize,
        sigma: f64,
    ) -> Result<(Self, Annotation2D)> {
        let (heat, ann) = encode_heatmap(ann, resolution, sigma);
        Ok((Self { heat, loc: encode_location_map(xyz, resolution)?, delta: encode_delta_map(bones, resolution) }, ann))
    }

    fn check(&self) -> Result<()> {
        let (j, s) = (self.joints(), self.resolution());
        if self.heat.dim() != (j, s, s) || self.loc.dim() != (j, s, s, 3) || self.delta.dim() != (j, s, s, 3) {
            return Err(Error::Contract("map stack components have inconsistent shapes".into()));
        }
        Ok(())
    }

    /// Little-endian blob: magic, `J` and `S` as `u32`, then heat, loc and
    /// delta as `f32` in row-major order.
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        self.check()?;
        w.write_all(MAPS_MAGIC)?;
        w.write_all(&(self.joints() as u32).to_le_bytes())?;
        w.write_all(&(self.resolution() as u32).to_le_bytes())?;
        for v in self.heat.iter().chain(self.loc.iter()).chain(self.delta.iter()) {
            w.write_all(&(*v as f32).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        self.write_to(&mut out)?;
        Ok(out)
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAPS_MAGIC {
            return Err(Error::Format("not a HIKMAPS1 blob".into()));
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word)?;
        let j = u32::from_le_bytes(word) as usize;
        r.read_exact(&mut word)?;
        let s = u32::from_le_bytes(word) as usize;
        let mut read_vals = |n: usize| -> Result<Vec<f64>> {
            let mut buf = vec![0u8; 4 * n];
            r.read_exact(&mut buf)?;
            Ok(buf.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect())
        };
        let shape_err = |_| Error::Format("map blob has inconsistent dimensions".into());
        let heat = Array3::from_shape_vec((j, s, s), read_vals(j * s * s)?).map_err(shape_err)?;
        let loc = Array4::from_shape_vec((j, s, s, 3), read_vals(j * s * s * 3)?).map_err(shape_err)?;
        let delta = Array4::from_shape_vec((j, s, s, 3), read_vals(j * s * s * 3)?).map_err(shape_err)?;
        Ok(Self { heat, loc, delta })
    }
}

/// Gaussian heat maps centred on each visible annotation. Annotations outside
/// `[0, S)` are marked invisible and get an all-zero map.
pub fn encode_heatmap(ann: &Annotation2D, resolution: usize, sigma: f64) -> (Array3<f64>, Annotation2D) {
    let s = resolution;
    let mut out = ann.clone();
    let mut heat = Array3::zeros((ann.uv.len(), s, s));
    let inv = 1.0 / (2.0 * sigma * sigma);
    for (j, uv) in ann.uv.iter().enumerate() {
        let in_range = uv.iter().all(|c| c.is_finite() && *c >= 0.0 && *c < s as f64);
        if !ann.visible[j] || !in_range {
            out.visible[j] = false;
            continue;
        }
        for row in 0..s {
            let dv = row as f64 - uv[1];
            for col in 0..s {
                let du = col as f64 - uv[0];
                heat[[j, row, col]] = (-(du * du + dv * dv) * inv).exp();
            }
        }
    }
    (heat, out)
}

fn tile(points: &[Vec3], s: usize) -> Array4<f64> {
    let mut maps = Array4::zeros((points.len(), s, s, 3));
    for (j, p) in points.iter().enumerate() {
        for c in 0..3 {
            maps.index_axis_mut(Axis(0), j).index_axis_mut(Axis(2), c).fill(p[c]);
        }
    }
    maps
}

/// Tile each joint's normalized coordinates over its map.
pub fn encode_location_map(xyz: &JointSet, resolution: usize) -> Result<Array4<f64>> {
    if xyz.frame != Frame::Normalized {
        return Err(Error::Precondition("location maps need root-relative normalized joints".into()));
    }
    Ok(tile(&xyz.positions, resolution))
}

/// Tile each bone direction over its map.
pub fn encode_delta_map(bones: &[Vec3], resolution: usize) -> Array4<f64> {
    tile(bones, resolution)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    pub annotation: Annotation2D,
    pub joints: JointSet,
    /// Joints whose heat map had no positive value.
    pub low_confidence: Vec<bool>,
}

/// Argmax of each heat map (first maximum in row-major order) and the
/// location-map lookup at that pixel. No sub-pixel refinement.
pub fn decode_joints(maps: &MapStack) -> Result<Decoded> {
    maps.check()?;
    let (j, s) = (maps.joints(), maps.resolution());
    let mut uv = Vec::with_capacity(j);
    let mut low = Vec::with_capacity(j);
    let mut pos = Vec::with_capacity(j);
    for jj in 0..j {
        let mut best = (f64::NEG_INFINITY, 0, 0);
        for row in 0..s {
            for col in 0..s {
                let v = maps.heat[[jj, row, col]];
                if v > best.0 {
                    best = (v, row, col);
                }
            }
        }
        let (row, col, weak) = if best.0 > 0.0 { (best.1, best.2, false) } else { (s / 2, s / 2, true) };
        uv.push([col as f64, row as f64]);
        low.push(weak);
        pos.push(Vec3::new(maps.loc[[jj, row, col, 0]], maps.loc[[jj, row, col, 1]], maps.loc[[jj, row, col, 2]]));
    }
    let visible = low.iter().map(|l| !l).collect();
    Ok(Decoded {
        annotation: Annotation2D { uv, visible },
        joints: JointSet::new(pos, Frame::Normalized),
        low_confidence: low,
    })
}

/// `||H_gt - H||_F^2`.
pub fn loss_heat(h_gt: &Array3<f64>, h: &Array3<f64>) -> Result<f64> {
    if h_gt.dim() != h.dim() {
        return Err(Error::Contract(format!("heat shapes {:?} and {:?} differ", h_gt.dim(), h.dim())));
    }
    Ok(h_gt.iter().zip(h.iter()).map(|(a, b)| (a - b) * (a - b)).sum())
}

fn weighted_map_loss(h_gt: &Array3<f64>, gt: &Array4<f64>, pred: &Array4<f64>) -> Result<f64> {
    let (j, s, s2) = h_gt.dim();
    if gt.dim() != pred.dim() || gt.dim() != (j, s, s2, 3) {
        return Err(Error::Contract(format!(
            "map shapes {:?}, {:?} do not match heat {:?}",
            gt.dim(),
            pred.dim(),
            h_gt.dim()
        )));
    }
    let mut total = 0.0;
    for (w, (g, p)) in h_gt.iter().zip(gt.lanes(Axis(3)).into_iter().zip(pred.lanes(Axis(3)))) {
        for c in 0..3 {
            let d = w * (g[c] - p[c]);
            total += d * d;
        }
    }
    Ok(total)
}

/// `||H_gt (.) (L_gt - L)||_F^2`, with the heat map broadcast over coordinates.
pub fn loss_loc(h_gt: &Array3<f64>, l_gt: &Array4<f64>, l: &Array4<f64>) -> Result<f64> {
    weighted_map_loss(h_gt, l_gt, l)
}

/// `||H_gt (.) (D_gt - D)||_F^2`.
pub fn loss_delta(h_gt: &Array3<f64>, d_gt: &Array4<f64>, d: &Array4<f64>) -> Result<f64> {
    weighted_map_loss(h_gt, d_gt, d)
}

/// Absolute root depth from the root and wrist detections, the wrist's
/// normalized relative depth `d_w` and the metric reference-bone length.
///
/// With `a = K^-1 (u_r, v_r, 1)` and `b = K^-1 (u_w, v_w, 1)` this solves
/// `||z (a - b) - l_ref d_w b||^2 = l_ref^2` and returns the largest positive root.
pub fn solve_root_depth(k: &Intrinsics, uv_root: [f64; 2], uv_wrist: [f64; 2], d_w: f64, l_ref: f64) -> Result<f64> {
    if !(l_ref > 0.0) {
        return Err(Error::Contract(format!("reference bone length must be positive, got {l_ref}")));
    }
    let a = k.unproject(uv_root);
    let b = k.unproject(uv_wrist);
    let ab = a - b;
    let qa = ab.norm_squared();
    let qb = -2.0 * l_ref * d_w * ab.dot(&b);
    let qc = l_ref * l_ref * (d_w * d_w * b.norm_squared() - 1.0);
    if qa <= 1e-24 * b.norm_squared() {
        return Err(Error::Degenerate("root and wrist project to the same ray".into()));
    }
    let disc = qb * qb - 4.0 * qa * qc;
    if disc < 0.0 {
        return Err(Error::NoSolution(format!("negative discriminant {disc:e}")));
    }
    let q = -0.5 * (qb + qb.signum() * disc.sqrt());
    let mut roots = vec![q / qa];
    if q != 0.0 {
        roots.push(qc / q);
    }
    roots
        .into_iter()
        .filter(|z| *z > 0.0)
        .fold(None, |best: Option<f64>, z| Some(best.map_or(z, |b| b.max(z))))
        .ok_or_else(|| Error::NoSolution("no positive root depth".into()))
}

/// `z_r K^-1 (u_r, v_r, 1)`.
pub fn recover_translation(k: &Intrinsics, uv_root: [f64; 2], z_r: f64) -> Result<Vec3> {
    if !(z_r > 0.0) {
        return Err(Error::Contract(format!("root depth must be positive, got {z_r}")));
    }
    Ok(k.unproject(uv_root) * z_r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ann(points: &[[f64; 2]]) -> Annotation2D {
        Annotation2D::visible(points.to_vec())
    }

    #[test]
    fn heatmap_peak_and_falloff() {
        let (h, _) = encode_heatmap(&ann(&[[10.0, 20.0]]), 32, 1.0);
        assert_eq!(h[[0, 20, 10]], 1.0);
        let max = h.iter().cloned().fold(f64::MIN, f64::max);
        assert_eq!(max, 1.0);
        assert_abs_diff_eq!(h[[0, 20, 11]], (-0.5f64).exp(), epsilon = 1e-15);
        assert_abs_diff_eq!(h[[0, 20, 11]], 0.6065, epsilon = 1e-4);
    }

    #[test]
    fn invisible_and_out_of_range_maps_are_zero() {
        let mut a = ann(&[[3.0, 4.0], [40.0, 2.0], [-1.0, 0.0]]);
        a.visible[0] = false;
        let (h, out) = encode_heatmap(&a, 32, 1.0);
        assert!(h.iter().all(|v| *v == 0.0));
        assert_eq!(out.visible, vec![false, false, false]);
    }

    #[test]
    fn location_maps_tile() {
        let xyz = JointSet::new(vec![Vec3::zeros(), Vec3::new(0.1, -0.2, 0.3)], Frame::Normalized);
        let l = encode_location_map(&xyz, 8).unwrap();
        for row in 0..8 {
            for col in 0..8 {
                assert_eq!(l[[1, row, col, 0]], 0.1);
                assert_eq!(l[[1, row, col, 1]], -0.2);
                assert_eq!(l[[1, row, col, 2]], 0.3);
                for c in 0..3 {
                    assert_eq!(l[[0, row, col, c]], 0.0);
                }
            }
        }
        let d = encode_delta_map(&[Vec3::zeros(), Vec3::new(0.0, 1.0, 0.0)], 8);
        assert!(d.index_axis(Axis(0), 0).iter().all(|v| *v == 0.0));
        let abs = JointSet::new(xyz.positions.clone(), Frame::Absolute);
        assert!(encode_location_map(&abs, 8).is_err());
    }

    #[test]
    fn encode_decode_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let uv: Vec<[f64; 2]> =
            (0..21).map(|_| [rng.random_range(0..32) as f64, rng.random_range(0..32) as f64]).collect();
        let xyz = JointSet::new(
            (0..21).map(|_| Vec3::new(rng.random(), rng.random(), rng.random())).collect(),
            Frame::Normalized,
        );
        let (maps, a) = MapStack::encode(&ann(&uv), &xyz, &xyz.positions, 32, 1.0).unwrap();
        let dec = decode_joints(&maps).unwrap();
        assert_eq!(dec.annotation, a);
        assert_eq!(dec.joints, xyz);
        assert!(dec.low_confidence.iter().all(|l| !l));
    }

    #[test]
    fn decode_ties_and_empty_maps() {
        let mut maps = MapStack {
            heat: Array3::zeros((2, 4, 4)),
            loc: Array4::zeros((2, 4, 4, 3)),
            delta: Array4::zeros((2, 4, 4, 3)),
        };
        maps.heat[[0, 1, 3]] = 0.7;
        maps.heat[[0, 2, 0]] = 0.7;
        maps.loc[[0, 1, 3, 2]] = 5.0;
        let dec = decode_joints(&maps).unwrap();
        assert_eq!(dec.annotation.uv[0], [3.0, 1.0]);
        assert_eq!(dec.joints.positions[0].z, 5.0);
        assert!(!dec.low_confidence[0]);
        assert!(dec.low_confidence[1]);
        assert_eq!(dec.annotation.uv[1], [2.0, 2.0]);
    }

    #[test]
    fn map_losses() {
        let (h, _) = encode_heatmap(&ann(&[[1.0, 2.0], [3.0, 3.0]]), 4, 1.0);
        assert_eq!(loss_heat(&h, &h).unwrap(), 0.0);
        let l_gt = Array4::from_elem((2, 4, 4, 3), 0.4);
        assert_eq!(loss_loc(&h, &l_gt, &l_gt).unwrap(), 0.0);
        let mut one = Array3::zeros((1, 1, 1));
        one[[0, 0, 0]] = 1.0;
        let gt = Array4::from_shape_vec((1, 1, 1, 3), vec![1.0, 2.0, 2.0]).unwrap();
        let pred = Array4::zeros((1, 1, 1, 3));
        assert_eq!(loss_loc(&one, &gt, &pred).unwrap(), 9.0);
        assert_eq!(loss_delta(&one, &gt, &pred).unwrap(), 9.0);
        assert!(matches!(loss_heat(&h, &one), Err(Error::Contract(_))));
        assert!(matches!(loss_loc(&h, &gt, &pred), Err(Error::Contract(_))));
    }

    #[test]
    fn loc_loss_vanishes_iff_agreement_on_support() {
        let mut h = Array3::zeros((1, 3, 3));
        h[[0, 1, 1]] = 0.5;
        let gt = Array4::from_elem((1, 3, 3, 3), 1.0);
        let mut pred = gt.clone();
        pred[[0, 0, 0, 0]] = 7.0;
        assert_eq!(loss_loc(&h, &gt, &pred).unwrap(), 0.0);
        pred[[0, 1, 1, 2]] = 3.0;
        assert_eq!(loss_loc(&h, &gt, &pred).unwrap(), 1.0);
    }

    #[test]
    fn blob_round_trip() {
        let (maps, _) = MapStack::encode(
            &ann(&[[1.0, 1.0], [2.0, 0.0]]),
            &JointSet::new(vec![Vec3::zeros(), Vec3::new(0.25, 0.5, -1.0)], Frame::Normalized),
            &[Vec3::zeros(), Vec3::new(0.0, 0.0, 1.0)],
            4,
            1.0,
        )
        .unwrap();
        let bytes = maps.to_bytes().unwrap();
        assert_eq!(&bytes[..8], MAPS_MAGIC);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 4);
        assert_eq!(bytes.len(), 16 + 4 * (2 * 16 * 7));
        let back = MapStack::read_from(bytes.as_slice()).unwrap();
        assert_eq!(back.loc, maps.loc);
        for (a, b) in back.heat.iter().zip(maps.heat.iter()) {
            assert_eq!(*a, *b as f32 as f64);
        }
        assert!(MapStack::read_from(&b"HIKMAPS0"[..]).is_err());
    }

    /// Root at depth `z`, wrist one reference bone away. Only configurations
    /// with `|d_w| |b| < 1` are drawn, where the positive root is unique.
    fn project_case(rng: &mut ChaCha8Rng, k: &Intrinsics) -> ([f64; 2], [f64; 2], f64, f64, Vec3) {
        loop {
            let case = any_case(rng, k);
            if case.2.abs() * k.unproject(case.1).norm() < 1.0 {
                return case;
            }
        }
    }

    fn any_case(rng: &mut ChaCha8Rng, k: &Intrinsics) -> ([f64; 2], [f64; 2], f64, f64, Vec3) {
        let z = rng.random_range(300.0..1500.0);
        let root = Vec3::new(rng.random_range(-0.3..0.3) * z, rng.random_range(-0.3..0.3) * z, z);
        let l_ref = rng.random_range(60.0..110.0);
        let dir = loop {
            let d = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let n = d.norm();
            if n > 0.1 && n <= 1.0 {
                break d / n;
            }
        };
        let wrist = root + dir * l_ref;
        (k.project(&root), k.project(&wrist), (wrist.z - root.z) / l_ref, l_ref, root)
    }

    #[test]
    fn depth_round_trip_on_synthetic_camera() {
        let k = Intrinsics::new(500.0, 500.0, 0.0, 0.0).unwrap();
        let root = Vec3::new(20.0, -35.0, 600.0);
        let wrist = root + Vec3::new(30.0, -80.0, 25.0).normalize() * 90.0;
        let z = solve_root_depth(&k, k.project(&root), k.project(&wrist), (wrist.z - root.z) / 90.0, 90.0).unwrap();
        assert!(((z - 600.0) / 600.0).abs() < 1e-6);
    }

    #[test]
    fn depth_with_equal_depths_reduces_to_ratio() {
        let k = Intrinsics::new(500.0, 480.0, 16.0, 12.0).unwrap();
        let (ur, uw) = ([40.0, -10.0], [-5.0, 60.0]);
        let z = solve_root_depth(&k, ur, uw, 0.0, 85.0).unwrap();
        let expected = 85.0 / (k.unproject(ur) - k.unproject(uw)).norm();
        assert!(((z - expected) / expected).abs() < 1e-12);
    }

    #[test]
    fn depth_error_paths() {
        let k = Intrinsics::new(500.0, 500.0, 0.0, 0.0).unwrap();
        assert!(matches!(solve_root_depth(&k, [3.0, 4.0], [3.0, 4.0], 0.0, 80.0), Err(Error::Degenerate(_))));
        assert!(matches!(solve_root_depth(&k, [3.0, 4.0], [5.0, 4.0], 0.0, 0.0), Err(Error::Contract(_))));
        // Discriminant is 4 l^2 (|a-b|^2 - d_w^2 |(a-b) x b|^2).
        assert!(matches!(solve_root_depth(&k, [1000.0, 500.0], [1000.0, 0.0], 0.9, 90.0), Err(Error::NoSolution(_))));
        // Both roots negative.
        assert!(matches!(solve_root_depth(&k, [0.0, 0.0], [1000.0, 0.0], 0.9, 90.0), Err(Error::NoSolution(_))));
    }

    #[test]
    fn recover_translation_cases() {
        let k = Intrinsics::new(500.0, 500.0, 0.0, 0.0).unwrap();
        assert_eq!(recover_translation(&k, [0.0, 0.0], 700.0).unwrap(), Vec3::new(0.0, 0.0, 700.0));
        let k2 = Intrinsics::with_skew(610.0, 590.0, 320.0, 240.0, 1.5).unwrap();
        let p = Vec3::new(-45.0, 80.0, 820.0);
        let back = recover_translation(&k2, k2.project(&p), p.z).unwrap();
        assert_abs_diff_eq!(back, p, epsilon = 1e-9);
        assert!(matches!(recover_translation(&k, [0.0, 0.0], 0.0), Err(Error::Contract(_))));
    }

    #[test]
    fn random_depth_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..1000 {
            let k = Intrinsics::new(rng.random_range(300.0..900.0), rng.random_range(300.0..900.0), 0.0, 0.0).unwrap();
            let (ur, uw, dw, l, root) = project_case(&mut rng, &k);
            let z = solve_root_depth(&k, ur, uw, dw, l).unwrap();
            assert!(((z - root.z) / root.z).abs() < 1e-6, "z {z} vs {}", root.z);
            let t = recover_translation(&k, ur, z).unwrap();
            assert!((t - root).norm() / root.z < 1e-6);
        }
    }

    #[test]
    fn largest_root_can_be_wrong_outside_unique_regime() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let k = Intrinsics::new(500.0, 500.0, 0.0, 0.0).unwrap();
        let (mut ambiguous, mut wrong) = (0, 0);
        for _ in 0..20000 {
            let (ur, uw, dw, l, root) = any_case(&mut rng, &k);
            if dw.abs() * k.unproject(uw).norm() < 1.0 {
                continue;
            }
            ambiguous += 1;
            let z = solve_root_depth(&k, ur, uw, dw, l).unwrap();
            if ((z - root.z) / root.z).abs() > 1e-6 {
                wrong += 1;
            }
        }
        assert!(ambiguous > 0);
        eprintln!("ambiguous configurations: {ambiguous}, largest root wrong: {wrong}");
    }

    #[test]
    fn consistent_rescaling_leaves_translation_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let k = Intrinsics::new(520.0, 515.0, 11.0, -7.0).unwrap();
        for _ in 0..100 {
            let (ur, uw, dw, l, _) = project_case(&mut rng, &k);
            let s = rng.random_range(0.2..5.0);
            let ks = Intrinsics::new(k.fx * s, k.fy * s, k.cx * s, k.cy * s).unwrap();
            let sc = |p: [f64; 2]| [p[0] * s, p[1] * s];
            let z = solve_root_depth(&k, ur, uw, dw, l).unwrap();
            let zs = solve_root_depth(&ks, sc(ur), sc(uw), dw, l).unwrap();
            let t = recover_translation(&k, ur, z).unwrap();
            let ts = recover_translation(&ks, sc(ur), zs).unwrap();
            assert!((t - ts).amax() < 1e-9);
        }
    }
}
