//! CSV persistence, one frame per row.
//!
//! Raw motion header: `fps,root_x,root_y,root_z,root_yaw,j{k}_x,j{k}_y,j{k}_z...`
//! (joint positions root-relative in the facing frame). Feature header comes
//! from [`FeatureLayout::column_names`].

use std::io::{Read, Write};

use super::codec::{FeatureLayout, MotionFeatures, RawMotion};
use crate::diffcore::Tensor2;
use crate::error::{Error, Result};

pub fn write_raw_csv<W: Write>(motion: &RawMotion, out: W) -> Result<()> {
    let joints = motion.local_joint_positions.first().map_or(0, Vec::len);
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = ["fps", "root_x", "root_y", "root_z", "root_yaw"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for j in 0..joints {
        for a in ["x", "y", "z"] {
            header.push(format!("j{j}_{a}"));
        }
    }
    w.write_record(&header)?;
    for t in 0..motion.frames() {
        let mut rec = vec![motion.fps];
        rec.extend_from_slice(&motion.root_position[t]);
        rec.push(motion.root_yaw[t]);
        for p in &motion.local_joint_positions[t] {
            rec.extend_from_slice(p);
        }
        w.write_record(rec.iter().map(|v| format!("{v:?}")))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_raw_csv<R: Read>(input: R) -> Result<RawMotion> {
    let mut r = csv::Reader::from_reader(input);
    let cols = r.headers()?.len();
    if cols < 5 || (cols - 5) % 3 != 0 {
        return Err(Error::Parse(format!("raw motion CSV has {cols} columns")));
    }
    let joints = (cols - 5) / 3;
    let mut m = RawMotion {
        fps: 0.0,
        root_position: Vec::new(),
        root_yaw: Vec::new(),
        local_joint_positions: Vec::new(),
    };
    for rec in r.records() {
        let v = parse_record(&rec?)?;
        m.fps = v[0];
        m.root_position.push([v[1], v[2], v[3]]);
        m.root_yaw.push(v[4]);
        m.local_joint_positions
            .push((0..joints).map(|j| [v[5 + 3 * j], v[6 + 3 * j], v[7 + 3 * j]]).collect());
    }
    m.validate(joints)?;
    Ok(m)
}

pub fn write_features_csv<W: Write>(features: &MotionFeatures, joints: usize, out: W) -> Result<()> {
    let layout = FeatureLayout { joints };
    if layout.dim() != features.dim() {
        return Err(Error::Shape {
            op: "write_features_csv",
            detail: format!("{} columns for {joints} joints", features.dim()),
        });
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record(layout.column_names())?;
    for t in 0..features.frames() {
        w.write_record(features.data.row(t).iter().map(|v| format!("{v:?}")))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_features_csv<R: Read>(input: R) -> Result<MotionFeatures> {
    let mut r = csv::Reader::from_reader(input);
    let cols = r.headers()?.len();
    let mut rows = Vec::new();
    for rec in r.records() {
        let v = parse_record(&rec?)?;
        if v.len() != cols {
            return Err(Error::Parse(format!("row has {} fields, header {cols}", v.len())));
        }
        rows.push(v);
    }
    let data = if rows.is_empty() {
        Tensor2::zeros(0, cols)
    } else {
        Tensor2::from_rows(&rows)?
    };
    Ok(MotionFeatures::new(data))
}

fn parse_record(rec: &csv::StringRecord) -> Result<Vec<f64>> {
    rec.iter()
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|e| Error::Parse(format!("bad number `{s}`: {e}")))
        })
        .collect()
}
