//! CSV logs and outputs.
//!
//! Floats are written with at most 9 significant digits. Values already rounded to that
//! precision (see [`crate::sim::quantize`]) read back bit-exactly.

use std::io::{BufRead, Write};

use crate::error::{Error, Result};
use crate::sim::quantize;
use crate::types::{ClassLabel, Landmark, Pose, SemanticMeasurement, Vec3};

pub const MEASUREMENT_HEADER: &str = "t,scene_id,class_id,x,y,z";
pub const ODOMETRY_HEADER: &str = "t,dx,dy,dz,dqw,dqx,dqy,dqz";
pub const POSE_HEADER: &str = "t,x,y,z,qw,qx,qy,qz";
pub const MAP_HEADER: &str =
    "landmark_id,class_id,x,y,z,cov_xx,cov_xy,cov_xz,cov_yx,cov_yy,cov_yz,cov_zx,cov_zy,cov_zz";
pub const METRICS_HEADER: &str = "frame,rmse,n_hypotheses,n_landmarks,n_loop_closures";

/// Formats a float with at most 9 significant digits, in plain decimal notation.
pub fn fmt_f64(x: f64) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    format!("{}", quantize(x))
}

fn parse_f64(s: &str, line: usize) -> Result<f64> {
    let s = s.trim();
    s.parse::<f64>().map_err(|_| Error::Parse { line, msg: format!("bad number '{s}'") })
}

fn parse_u64(s: &str, line: usize) -> Result<u64> {
    let s = s.trim();
    s.parse::<u64>().map_err(|_| Error::Parse { line, msg: format!("bad integer '{s}'") })
}

/// Reads a CSV body after checking the header; calls `row` with (line number, fields).
fn read_rows<R: BufRead, F: FnMut(usize, &[&str]) -> Result<()>>(r: R, header: &str, mut row: F) -> Result<usize> {
    let ncols = header.split(',').count();
    let mut lines = r.lines();
    let first = lines.next().ok_or(Error::Empty("log"))??;
    if first.trim_end_matches('\r').trim() != header {
        return Err(Error::Parse { line: 1, msg: format!("expected header '{header}'") });
    }
    let mut n = 0;
    for (i, l) in lines.enumerate() {
        let l = l?;
        let l = l.trim_end_matches('\r');
        if l.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = l.split(',').collect();
        if fields.len() != ncols {
            return Err(Error::Parse { line: i + 2, msg: format!("expected {ncols} fields, got {}", fields.len()) });
        }
        row(i + 2, &fields)?;
        n += 1;
    }
    Ok(n)
}

pub fn write_measurements<W: Write>(mut w: W, ms: &[SemanticMeasurement]) -> Result<()> {
    writeln!(w, "{MEASUREMENT_HEADER}")?;
    for m in ms {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            fmt_f64(m.time),
            m.scene_id,
            m.class.0,
            fmt_f64(m.position.x),
            fmt_f64(m.position.y),
            fmt_f64(m.position.z)
        )?;
    }
    Ok(())
}

pub fn read_measurements<R: BufRead>(r: R) -> Result<Vec<SemanticMeasurement>> {
    let mut out = vec![];
    read_rows(r, MEASUREMENT_HEADER, |line, f| {
        let class = parse_u64(f[2], line)?;
        let class = u32::try_from(class).map_err(|_| Error::Parse { line, msg: "class id out of range".into() })?;
        let m = SemanticMeasurement {
            time: parse_f64(f[0], line)?,
            scene_id: parse_u64(f[1], line)?,
            class: ClassLabel(class),
            position: Vec3::new(parse_f64(f[3], line)?, parse_f64(f[4], line)?, parse_f64(f[5], line)?),
        };
        if let Some(prev) = out.last().map(|p: &SemanticMeasurement| p.scene_id) {
            if m.scene_id < prev {
                return Err(Error::Parse { line, msg: "scene ids must be non-decreasing".into() });
            }
        }
        out.push(m);
        Ok(())
    })?;
    Ok(out)
}

fn write_pose_rows<W: Write>(mut w: W, header: &str, rows: &[(f64, Pose)]) -> Result<()> {
    writeln!(w, "{header}")?;
    for (t, p) in rows {
        let q = p.quat_wxyz();
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            fmt_f64(*t),
            fmt_f64(p.translation.x),
            fmt_f64(p.translation.y),
            fmt_f64(p.translation.z),
            fmt_f64(q[0]),
            fmt_f64(q[1]),
            fmt_f64(q[2]),
            fmt_f64(q[3])
        )?;
    }
    Ok(())
}

fn read_pose_rows<R: BufRead>(r: R, header: &str) -> Result<Vec<(f64, Pose)>> {
    let mut out = vec![];
    let n = read_rows(r, header, |line, f| {
        let v: Vec<f64> = f.iter().map(|s| parse_f64(s, line)).collect::<Result<_>>()?;
        let p = Pose::from_parts(Vec3::new(v[1], v[2], v[3]), v[4], v[5], v[6], v[7])
            .map_err(|e| Error::Parse { line, msg: e.to_string() })?;
        out.push((v[0], p));
        Ok(())
    })?;
    if n == 0 {
        return Err(Error::Empty("pose log"));
    }
    Ok(out)
}

pub fn write_odometry<W: Write>(w: W, rows: &[(f64, Pose)]) -> Result<()> {
    write_pose_rows(w, ODOMETRY_HEADER, rows)
}

pub fn read_odometry<R: BufRead>(r: R) -> Result<Vec<(f64, Pose)>> {
    read_pose_rows(r, ODOMETRY_HEADER)
}

pub fn write_poses<W: Write>(w: W, rows: &[(f64, Pose)]) -> Result<()> {
    write_pose_rows(w, POSE_HEADER, rows)
}

pub fn read_poses<R: BufRead>(r: R) -> Result<Vec<(f64, Pose)>> {
    read_pose_rows(r, POSE_HEADER)
}

pub fn write_map<'a, W: Write, I: IntoIterator<Item = &'a Landmark>>(mut w: W, landmarks: I) -> Result<()> {
    writeln!(w, "{MAP_HEADER}")?;
    for l in landmarks {
        let mut row = format!("{},{},{},{},{}", l.id.0, l.class.0, fmt_f64(l.mean.x), fmt_f64(l.mean.y), fmt_f64(l.mean.z));
        for i in 0..3 {
            for j in 0..3 {
                row.push(',');
                row.push_str(&fmt_f64(l.cov[(i, j)]));
            }
        }
        writeln!(w, "{row}")?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub frame: u64,
    /// NaN when no ground truth is available.
    pub rmse: f64,
    pub n_hypotheses: usize,
    pub n_landmarks: usize,
    pub n_loop_closures: usize,
}

pub fn write_metrics<W: Write>(mut w: W, rows: &[MetricsRow]) -> Result<()> {
    writeln!(w, "{METRICS_HEADER}")?;
    for r in rows {
        writeln!(w, "{},{},{},{},{}", r.frame, fmt_f64(r.rmse), r.n_hypotheses, r.n_landmarks, r.n_loop_closures)?;
    }
    Ok(())
}

pub fn read_metrics<R: BufRead>(r: R) -> Result<Vec<MetricsRow>> {
    let mut out = vec![];
    read_rows(r, METRICS_HEADER, |line, f| {
        out.push(MetricsRow {
            frame: parse_u64(f[0], line)?,
            rmse: parse_f64(f[1], line)?,
            n_hypotheses: parse_u64(f[2], line)? as usize,
            n_landmarks: parse_u64(f[3], line)? as usize,
            n_loop_closures: parse_u64(f[4], line)? as usize,
        });
        Ok(())
    })?;
    Ok(out)
}
