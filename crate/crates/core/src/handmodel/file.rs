//! JSON model file (`handik-model-v1`).
//!
//! Row-major nested arrays in millimetres:
//!
//! ```text
//! { "format": "handik-model-v1", "joints": J, "parents": [-1, 0, ...],
//!   "rest_joints0": [[x,y,z] * J], "joint_shape_basis": [[[B], [B], [B]] * J],
//!   "root_index": 9, "wrist_index": 0, "fingertips": [4, 8, 12, 16, 20],
//!   "mesh": { "template": [[x,y,z] * V], "shape_basis": [[[B],[B],[B]] * V],
//!             "pose_basis": [[[9P],[9P],[9P]] * V], "skinning": [[J] * V],
//!             "regressor": [[V] * J] } }
//! ```
//!
//! MANO conversion: `v_template` -> `template`, `shapedirs` -> `shape_basis`,
//! `posedirs` -> `pose_basis`, `weights` -> `skinning`, `J_regressor` ->
//! `regressor`, `kintree_table[0]` -> `parents`. `rest_joints0` and
//! `joint_shape_basis` are the regressor applied to the template and the
//! shape basis; fingertip joints are appended from chosen tip vertices.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{KinematicModel, MeshBlock, ModelParts};
use crate::error::{Error, Result};
use crate::rotmath::Vec3;

pub const MODEL_FORMAT: &str = "handik-model-v1";

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format: String,
    joints: usize,
    parents: Vec<i64>,
    rest_joints0: Vec<[f64; 3]>,
    joint_shape_basis: Vec<[Vec<f64>; 3]>,
    root_index: usize,
    wrist_index: usize,
    fingertips: [usize; 5],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mesh: Option<MeshFile>,
}

#[derive(Serialize, Deserialize)]
struct MeshFile {
    template: Vec<[f64; 3]>,
    shape_basis: Vec<[Vec<f64>; 3]>,
    pose_basis: Vec<[Vec<f64>; 3]>,
    skinning: Vec<Vec<f64>>,
    regressor: Vec<Vec<f64>>,
}

fn points_out(p: &[Vec3]) -> Vec<[f64; 3]> {
    p.iter().map(|v| [v.x, v.y, v.z]).collect()
}

fn points_in(p: &[[f64; 3]]) -> Vec<Vec3> {
    p.iter().map(|v| Vec3::new(v[0], v[1], v[2])).collect()
}

fn basis_out(m: &DMatrix<f64>) -> Vec<[Vec<f64>; 3]> {
    (0..m.nrows() / 3).map(|i| std::array::from_fn(|c| m.row(3 * i + c).iter().copied().collect())).collect()
}

fn basis_in(rows: &[[Vec<f64>; 3]], what: &str) -> Result<DMatrix<f64>> {
    let cols = rows.first().map_or(0, |r| r[0].len());
    if rows.iter().any(|r| r.iter().any(|c| c.len() != cols)) {
        return Err(Error::Format(format!("{what} rows have inconsistent lengths")));
    }
    Ok(DMatrix::from_fn(rows.len() * 3, cols, |r, c| rows[r / 3][r % 3][c]))
}

fn matrix_out(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn matrix_in(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(Error::Format(format!("{what} rows have inconsistent lengths")));
    }
    Ok(DMatrix::from_fn(rows.len(), cols, |r, c| rows[r][c]))
}

impl KinematicModel {
    pub fn to_json(&self) -> Result<String> {
        let p = self.parts();
        let file = ModelFile {
            format: MODEL_FORMAT.into(),
            joints: self.joint_count(),
            parents: p.parents.iter().map(|x| x.map_or(-1, |v| v as i64)).collect(),
            rest_joints0: points_out(&p.rest_joints0),
            joint_shape_basis: basis_out(&p.joint_shape_basis),
            root_index: p.root_index,
            wrist_index: p.wrist_index,
            fingertips: p.fingertips,
            mesh: p.mesh.as_ref().map(|m| MeshFile {
                template: points_out(&m.template),
                shape_basis: basis_out(&m.shape_basis),
                pose_basis: basis_out(&m.pose_basis),
                skinning: matrix_out(&m.skinning),
                regressor: matrix_out(&m.regressor),
            }),
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let f: ModelFile = serde_json::from_str(text)?;
        if f.format != MODEL_FORMAT {
            return Err(Error::Format(format!("unsupported model format {:?}", f.format)));
        }
        if f.parents.len() != f.joints {
            return Err(Error::Format(format!("parents has {} entries for {} joints", f.parents.len(), f.joints)));
        }
        let parents = f
            .parents
            .iter()
            .map(|&p| match p {
                -1 => Ok(None),
                p if p >= 0 => Ok(Some(p as usize)),
                p => Err(Error::Format(format!("invalid parent index {p}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        let mesh = match &f.mesh {
            None => None,
            Some(m) => Some(MeshBlock {
                template: points_in(&m.template),
                shape_basis: basis_in(&m.shape_basis, "mesh.shape_basis")?,
                pose_basis: basis_in(&m.pose_basis, "mesh.pose_basis")?,
                skinning: matrix_in(&m.skinning, "mesh.skinning")?,
                regressor: matrix_in(&m.regressor, "mesh.regressor")?,
            }),
        };
        KinematicModel::from_parts(ModelParts {
            parents,
            rest_joints0: points_in(&f.rest_joints0),
            joint_shape_basis: basis_in(&f.joint_shape_basis, "joint_shape_basis")?,
            root_index: f.root_index,
            wrist_index: f.wrist_index,
            fingertips: f.fingertips,
            mesh,
        })
    }
}

pub fn save_model(model: &KinematicModel, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, model.to_json()?)?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<KinematicModel> {
    KinematicModel::from_json(&fs::read_to_string(path)?)
}
