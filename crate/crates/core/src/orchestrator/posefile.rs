use std::path::Path;

use nalgebra::Quaternion;
use thiserror::Error;

use crate::digest::fmt_f64;
use crate::geometry::{Pose6DoF, Timestamp, Vec3};

#[derive(Debug, Error)]
pub enum PoseFileError {
    #[error("pose file i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("pose file line {line}: {reason}")]
    Malformed { line: usize, reason: String },
}

/// Parses `t_ns x y z qw qx qy qz` records; blank lines and `#` comments are skipped.
pub fn parse_poses(text: &str) -> Result<Vec<Pose6DoF>, PoseFileError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |reason: String| PoseFileError::Malformed { line: i + 1, reason };
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 8 {
            return Err(bad(format!("expected 8 fields, got {}", f.len())));
        }
        let t = f[0].parse::<u64>().map_err(|e| bad(format!("timestamp: {e}")))?;
        let mut v = [0.0f64; 7];
        for (k, slot) in v.iter_mut().enumerate() {
            *slot = f[k + 1]
                .parse::<f64>()
                .map_err(|e| bad(format!("field {}: {e}", k + 2)))?;
        }
        let pose = Pose6DoF::new(
            Timestamp(t),
            Vec3::new(v[0], v[1], v[2]),
            Quaternion::new(v[3], v[4], v[5], v[6]),
        )
        .map_err(|e| bad(e.to_string()))?;
        out.push(pose);
    }
    Ok(out)
}

pub fn format_poses(poses: &[Pose6DoF]) -> String {
    let mut out = String::new();
    for p in poses {
        let q = &p.orientation;
        out.push_str(&format!(
            "{} {} {} {} {} {} {} {}\n",
            p.t.nanos(),
            fmt_f64(p.position.x),
            fmt_f64(p.position.y),
            fmt_f64(p.position.z),
            fmt_f64(q.w),
            fmt_f64(q.i),
            fmt_f64(q.j),
            fmt_f64(q.k)
        ));
    }
    out
}

pub fn load_poses(path: &Path) -> Result<Vec<Pose6DoF>, PoseFileError> {
    parse_poses(&std::fs::read_to_string(path)?)
}
