//! 3D PCK curves, their area, and translation alignment.
//!
//! Errors are in millimetres. Normalized predictions must be scaled back by a
//! known reference-bone length first. PCK pools every joint of every frame.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::handmodel::{Frame, JointSet, KinematicModel};
use crate::ikengine::{forward, reconstruct_positions, IkSample, Mlp, Mode};
use crate::rotmath::Vec3;

pub const AUC_LO: f64 = 20.0;
pub const AUC_HI: f64 = 50.0;
pub const DEFAULT_STEPS: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AlignMode {
    /// Translate so the predicted root joint matches the ground truth.
    Root,
    /// Translate so the fingertip centroids match.
    FingertipCentroid,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PckCurve {
    /// Ascending; repeated values mark a jump.
    pub thresholds: Vec<f64>,
    pub values: Vec<f64>,
}

fn centroid(js: &JointSet, idx: &[usize]) -> Vec3 {
    idx.iter().map(|&i| js.positions[i]).sum::<Vec3>() / idx.len() as f64
}

/// Translation-only alignment of `pred` onto `gt`.
pub fn align(pred: &JointSet, gt: &JointSet, mode: AlignMode, model: &KinematicModel) -> JointSet {
    let offset = match mode {
        AlignMode::None => return pred.clone(),
        AlignMode::Root => gt.positions[model.root_index()] - pred.positions[model.root_index()],
        AlignMode::FingertipCentroid => {
            let tips = model.fingertips();
            centroid(gt, &tips) - centroid(pred, &tips)
        }
    };
    pred.translated(&offset)
}

/// Per-joint Euclidean errors, pooled over frames.
pub fn joint_errors(pred: &[JointSet], gt: &[JointSet]) -> Result<Vec<f64>> {
    if pred.len() != gt.len() {
        return Err(Error::Contract(format!("{} predictions for {} ground-truth frames", pred.len(), gt.len())));
    }
    let mut out = Vec::new();
    for (p, g) in pred.iter().zip(gt) {
        if p.len() != g.len() {
            return Err(Error::Contract(format!("frame has {} predicted and {} true joints", p.len(), g.len())));
        }
        out.extend(p.positions.iter().zip(&g.positions).map(|(a, b)| (a - b).norm()));
    }
    if out.is_empty() {
        return Err(Error::Contract("no joints to evaluate".into()));
    }
    Ok(out)
}

pub fn mean_error(pred: &[JointSet], gt: &[JointSet]) -> Result<f64> {
    let e = joint_errors(pred, gt)?;
    Ok(e.iter().sum::<f64>() / e.len() as f64)
}

/// `steps` uniform thresholds over `[lo, hi]`.
pub fn threshold_grid(lo: f64, hi: f64, steps: usize) -> Vec<f64> {
    match steps {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..steps).map(|i| lo + (hi - lo) * i as f64 / (steps - 1) as f64).collect(),
    }
}

pub fn default_thresholds() -> Vec<f64> {
    threshold_grid(AUC_LO, AUC_HI, DEFAULT_STEPS)
}

/// Fraction of joints with error at most each threshold.
pub fn pck(pred: &[JointSet], gt: &[JointSet], thresholds: &[f64]) -> Result<PckCurve> {
    pck_from_errors(&joint_errors(pred, gt)?, thresholds)
}

pub fn pck_from_errors(errors: &[f64], thresholds: &[f64]) -> Result<PckCurve> {
    if thresholds.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::Contract("thresholds must be ascending".into()));
    }
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let values = thresholds.iter().map(|t| sorted.partition_point(|e| e <= t) as f64 / n).collect();
    Ok(PckCurve { thresholds: thresholds.to_vec(), values })
}

/// The exact PCK step function on `[lo, hi]`: every error inside the range
/// contributes a zero-width jump, so trapezoidal integration is exact.
pub fn pck_step_curve(pred: &[JointSet], gt: &[JointSet], lo: f64, hi: f64) -> Result<PckCurve> {
    let mut errors = joint_errors(pred, gt)?;
    errors.sort_by(f64::total_cmp);
    let n = errors.len() as f64;
    let frac = |t: f64| errors.partition_point(|e| *e <= t) as f64 / n;
    let below = |t: f64| errors.partition_point(|e| *e < t) as f64 / n;
    let mut thresholds = vec![lo];
    let mut values = vec![frac(lo)];
    let mut jumps: Vec<f64> = errors.iter().copied().filter(|e| *e > lo && *e <= hi).collect();
    jumps.dedup();
    for e in jumps {
        thresholds.extend([e, e]);
        values.extend([below(e), frac(e)]);
    }
    thresholds.push(hi);
    values.push(frac(hi));
    Ok(PckCurve { thresholds, values })
}

impl PckCurve {
    fn value_at(&self, t: f64) -> f64 {
        let i = self.thresholds.partition_point(|x| *x <= t);
        if i == 0 {
            return self.values[0];
        }
        if i == self.thresholds.len() {
            return *self.values.last().unwrap();
        }
        let (t0, t1) = (self.thresholds[i - 1], self.thresholds[i]);
        let (v0, v1) = (self.values[i - 1], self.values[i]);
        v0 + (v1 - v0) * (t - t0) / (t1 - t0)
    }

    /// Two columns, `threshold_mm` and `pck`, tab separated.
    pub fn to_table(&self) -> String {
        let mut out = String::from("threshold_mm\tpck\n");
        for (t, v) in self.thresholds.iter().zip(&self.values) {
            writeln!(out, "{t:.4}\t{v:.6}").unwrap();
        }
        out
    }

    pub fn from_table(text: &str) -> Result<Self> {
        let mut thresholds = Vec::new();
        let mut values = Vec::new();
        for line in text.lines().skip(1).filter(|l| !l.trim().is_empty()) {
            let mut cols = line.split_whitespace().map(str::parse::<f64>);
            match (cols.next(), cols.next()) {
                (Some(Ok(t)), Some(Ok(v))) => {
                    thresholds.push(t);
                    values.push(v);
                }
                _ => return Err(Error::Format(format!("bad PCK table row {line:?}"))),
            }
        }
        Ok(Self { thresholds, values })
    }

    /// Standalone SVG line plot.
    pub fn to_svg(&self, title: &str) -> String {
        let (w, h, m) = (480.0, 320.0, 48.0);
        let lo = self.thresholds.first().copied().unwrap_or(0.0);
        let hi = self.thresholds.last().copied().unwrap_or(1.0).max(lo + 1e-9);
        let x = |t: f64| m + (t - lo) / (hi - lo) * (w - 2.0 * m);
        let y = |v: f64| h - m - v * (h - 2.0 * m);
        let points: Vec<String> =
            self.thresholds.iter().zip(&self.values).map(|(t, v)| format!("{:.2},{:.2}", x(*t), y(*v))).collect();
        let mut s = String::new();
        writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#)
            .unwrap();
        writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#).unwrap();
        let escaped = title.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;");
        writeln!(s, r#"<text x="{}" y="24" font-size="14" text-anchor="middle">{escaped}</text>"#, w / 2.0).unwrap();
        writeln!(s, r#"<path d="M{m} {} L{m} {} L{} {}" stroke="black" fill="none"/>"#, m, h - m, w - m, h - m)
            .unwrap();
        for v in [0.0, 0.5, 1.0] {
            writeln!(
                s,
                r#"<text x="{}" y="{:.1}" font-size="11" text-anchor="end">{v:.1}</text>"#,
                m - 6.0,
                y(v) + 4.0
            )
            .unwrap();
        }
        for t in [lo, (lo + hi) / 2.0, hi] {
            writeln!(
                s,
                r#"<text x="{:.1}" y="{}" font-size="11" text-anchor="middle">{t:.0}</text>"#,
                x(t),
                h - m + 16.0
            )
            .unwrap();
        }
        writeln!(
            s,
            r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">error threshold (mm)</text>"#,
            w / 2.0,
            h - 10.0
        )
        .unwrap();
        writeln!(s, r#"<polyline points="{}" stroke="steelblue" stroke-width="2" fill="none"/>"#, points.join(" "))
            .unwrap();
        s.push_str("</svg>\n");
        s
    }
}

/// Trapezoidal area under the curve over `[lo, hi]`, divided by `hi - lo`.
pub fn auc(curve: &PckCurve, lo: f64, hi: f64) -> Result<f64> {
    let t = &curve.thresholds;
    if t.len() != curve.values.len() || t.is_empty() {
        return Err(Error::Contract("PCK curve is empty or malformed".into()));
    }
    if !(hi > lo) || t[0] > lo || *t.last().unwrap() < hi {
        return Err(Error::Contract(format!(
            "curve covers [{}, {}], cannot integrate over [{lo}, {hi}]",
            t[0],
            t.last().unwrap()
        )));
    }
    let mut pts = vec![(lo, curve.value_at(lo))];
    let first_inside = t.partition_point(|x| *x <= lo);
    // Keep a jump that sits exactly at `lo`.
    if first_inside > 0 && t[first_inside - 1] == lo {
        pts[0].1 = curve.values[first_inside - 1];
    }
    let inside = t[first_inside..].iter().zip(&curve.values[first_inside..]);
    pts.extend(inside.take_while(|(ti, _)| **ti < hi).map(|(ti, vi)| (*ti, *vi)));
    let end = t.partition_point(|x| *x < hi);
    pts.push((hi, if t[end] == hi { curve.values[end] } else { curve.value_at(hi) }));
    let area: f64 = pts.windows(2).map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0).sum();
    Ok(area / (hi - lo))
}

/// Network accuracy on a sample set, in reference-bone units.
#[derive(Clone, Debug)]
pub struct IkEvaluation {
    /// Normalized FK of the predicted rotations on each sample's rest joints.
    pub predicted: Vec<JointSet>,
    pub targets: Vec<JointSet>,
    /// Mean joint distance between `predicted` and `targets`.
    pub position_error: f64,
    /// Mean joint distance between the network input and `targets`.
    pub input_error: f64,
    /// Mean geodesic angle over articulated joints of rotation-labeled samples.
    pub rotation_error: Option<f64>,
}

/// Joints whose rotation moves some other joint.
pub fn articulated_joints(model: &KinematicModel) -> Vec<usize> {
    (0..model.joint_count()).filter(|&j| !model.children(j).is_empty()).collect()
}

pub fn evaluate_ik(net: &Mlp, samples: &[IkSample], model: &KinematicModel) -> Result<IkEvaluation> {
    if samples.is_empty() {
        return Err(Error::Contract("no samples to evaluate".into()));
    }
    let joints = articulated_joints(model);
    let mut predicted = Vec::with_capacity(samples.len());
    let mut inputs = Vec::with_capacity(samples.len());
    let (mut rot_sum, mut rot_n) = (0.0, 0usize);
    for chunk in samples.chunks(1024) {
        let batch: Vec<_> = chunk.iter().map(|s| s.input.clone()).collect();
        for (out, s) in forward(net, &batch, Mode::Infer)?.iter().zip(chunk) {
            predicted.push(JointSet::new(reconstruct_positions(model, &s.input.x_ref, &out.q), Frame::Normalized));
            inputs.push(JointSet::new(s.input.x.clone(), Frame::Normalized));
            if let Some(gt) = &s.rotations {
                rot_sum += joints.iter().map(|&j| out.q[j].angle_to(&gt.rotations[j])).sum::<f64>();
                rot_n += joints.len();
            }
        }
    }
    let targets: Vec<JointSet> = samples.iter().map(|s| s.positions.clone()).collect();
    Ok(IkEvaluation {
        position_error: mean_error(&predicted, &targets)?,
        input_error: mean_error(&inputs, &targets)?,
        rotation_error: (rot_n > 0).then(|| rot_sum / rot_n as f64),
        predicted,
        targets,
    })
}
