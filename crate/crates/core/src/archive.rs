//! Sample archive (`handik-samples-v1`).
//!
//! Layout, all little-endian:
//!
//! ```text
//! "handik-samples-v1\n"          18 bytes
//! J: u32, N: u64
//! N records:
//!   kind: u8                      0 = mocap, 1 = noisy
//!   flags: u8                     bit 0 = rotations present
//!   input: 12*J f64               [X, D, X_ref, D_ref], joint-major
//!   positions: 3*J f64            normalized target joints
//!   rotations: 4*J f64            (w, x, y, z) per joint, if flagged
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::handmodel::{Frame, JointSet, Pose};
use crate::ikengine::{IkInput, IkSample, SampleKind};
use crate::rotmath::{Quaternion, Vec3};

pub const SAMPLES_MAGIC: &[u8] = b"handik-samples-v1\n";

fn put(w: &mut impl Write, v: f64) -> Result<()> {
    Ok(w.write_all(&v.to_le_bytes())?)
}

pub fn write_samples(w: impl Write, samples: &[IkSample]) -> Result<()> {
    let joints = samples.first().map_or(0, |s| s.positions.len());
    let mut w = BufWriter::new(w);
    w.write_all(SAMPLES_MAGIC)?;
    w.write_all(&(joints as u32).to_le_bytes())?;
    w.write_all(&(samples.len() as u64).to_le_bytes())?;
    for (i, s) in samples.iter().enumerate() {
        if s.positions.len() != joints || s.input.joint_count() != joints {
            return Err(Error::Contract(format!("sample {i} has a different joint count")));
        }
        let kind = match s.kind {
            SampleKind::Mocap => 0u8,
            SampleKind::Noisy => 1,
        };
        w.write_all(&[kind, s.rotations.is_some() as u8])?;
        for v in s.input.to_features() {
            put(&mut w, v)?;
        }
        for p in &s.positions.positions {
            for v in p.iter() {
                put(&mut w, *v)?;
            }
        }
        if let Some(pose) = &s.rotations {
            if pose.len() != joints {
                return Err(Error::Contract(format!("sample {i} has {} rotations for {joints} joints", pose.len())));
            }
            for q in &pose.rotations {
                for v in [q.w, q.x, q.y, q.z] {
                    put(&mut w, v)?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format("sample archive is truncated".into()),
        _ => Error::Io(e),
    })
}

fn take_f64s(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; 8 * n];
    read_exact(r, &mut buf)?;
    Ok(buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
}

pub fn read_samples(r: impl Read) -> Result<Vec<IkSample>> {
    let mut r = BufReader::new(r);
    let mut magic = vec![0u8; SAMPLES_MAGIC.len()];
    read_exact(&mut r, &mut magic)?;
    if magic != SAMPLES_MAGIC {
        return Err(Error::Format("not a handik-samples-v1 archive".into()));
    }
    let mut b4 = [0u8; 4];
    let mut b8 = [0u8; 8];
    read_exact(&mut r, &mut b4)?;
    read_exact(&mut r, &mut b8)?;
    let joints = u32::from_le_bytes(b4) as usize;
    let count = u64::from_le_bytes(b8);
    let mut out = Vec::with_capacity(count.min(1 << 20) as usize);
    for i in 0..count {
        let mut tag = [0u8; 2];
        read_exact(&mut r, &mut tag)?;
        let kind = match tag[0] {
            0 => SampleKind::Mocap,
            1 => SampleKind::Noisy,
            k => return Err(Error::Format(format!("record {i} has unknown kind {k}"))),
        };
        if tag[1] & !1 != 0 {
            return Err(Error::Format(format!("record {i} has unknown flags {:#x}", tag[1])));
        }
        let input = IkInput::from_features(&take_f64s(&mut r, 12 * joints)?, joints)?;
        let positions = take_f64s(&mut r, 3 * joints)?;
        let positions =
            JointSet::new(positions.chunks_exact(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect(), Frame::Normalized);
        let rotations = if tag[1] & 1 == 1 {
            let q = take_f64s(&mut r, 4 * joints)?;
            Some(Pose::new(q.chunks_exact(4).map(|c| Quaternion::new(c[0], c[1], c[2], c[3])).collect())?)
        } else {
            None
        };
        out.push(IkSample { input, rotations, positions, kind });
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after the last record".into()));
    }
    Ok(out)
}

pub fn save_samples(samples: &[IkSample], path: impl AsRef<Path>) -> Result<()> {
    write_samples(File::create(path)?, samples)
}

pub fn load_samples(path: impl AsRef<Path>) -> Result<Vec<IkSample>> {
    read_samples(File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::handmodel::synth_model;
    use crate::mocapgen::{gen_samples, synth_pose_library, AugmentConfig, NoiseModel};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mixed() -> Vec<IkSample> {
        let model = synth_model(0);
        let lib = synth_pose_library(8, &model, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let cfg = AugmentConfig::default();
        let mut s = gen_samples(&lib, &model, &cfg, None, 0, 3).unwrap();
        s.extend(gen_samples(&lib, &model, &cfg, Some(&NoiseModel::default()), 0, 2).unwrap());
        s
    }

    #[test]
    fn round_trip_is_exact() {
        let samples = mixed();
        let mut bytes = Vec::new();
        write_samples(&mut bytes, &samples).unwrap();
        assert!(bytes.starts_with(SAMPLES_MAGIC));
        let per = |rot: bool| 2 + 8 * 21 * (12 + 3 + if rot { 4 } else { 0 });
        assert_eq!(bytes.len(), SAMPLES_MAGIC.len() + 12 + 3 * per(true) + 2 * per(false));
        assert_eq!(read_samples(bytes.as_slice()).unwrap(), samples);
    }

    #[test]
    fn rejects_bad_archives() {
        let mut bytes = Vec::new();
        write_samples(&mut bytes, &mixed()).unwrap();
        assert!(matches!(read_samples(&bytes[..bytes.len() - 1]), Err(Error::Format(_))));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(read_samples(extra.as_slice()), Err(Error::Format(_))));
        let mut other = bytes.clone();
        other[15] = b'2';
        assert!(matches!(read_samples(other.as_slice()), Err(Error::Format(_))));
        assert!(matches!(read_samples(&b""[..]), Err(Error::Format(_))));
    }

    #[test]
    fn empty_archive_round_trips() {
        let mut bytes = Vec::new();
        write_samples(&mut bytes, &[]).unwrap();
        assert!(read_samples(bytes.as_slice()).unwrap().is_empty());
    }
}
