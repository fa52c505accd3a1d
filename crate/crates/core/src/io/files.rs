use std::fs;
use std::path::Path;

use super::{ClassId, LabelArray, Point, PointCloud};
use crate::{Error, Result};

/// Reads a scan of little-endian `f32` quadruples `(x, y, z, intensity)`.
pub fn read_scan(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 16 != 0 {
        return Err(Error::format(
            path,
            format!("size {} is not a multiple of 16 bytes", bytes.len()),
        ));
    }
    let mut points = Vec::with_capacity(bytes.len() / 16);
    for (i, chunk) in bytes.chunks_exact(16).enumerate() {
        let f = |k: usize| f32::from_le_bytes(chunk[4 * k..4 * k + 4].try_into().unwrap());
        let p = Point::new(f(0), f(1), f(2), f(3));
        if !p.is_finite() {
            return Err(Error::format(path, format!("point {i} is not finite")));
        }
        points.push(p);
    }
    Ok(PointCloud { points })
}

pub fn write_scan(cloud: &PointCloud, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, cloud.to_bytes()).map_err(|e| Error::io(path, e))
}

/// Reads a label file; the instance id in the upper 16 bits is dropped.
pub fn read_labels(path: impl AsRef<Path>) -> Result<LabelArray> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::format(
            path,
            format!("size {} is not a multiple of 4 bytes", bytes.len()),
        ));
    }
    let labels = bytes
        .chunks_exact(4)
        .map(|c| (u32::from_le_bytes(c.try_into().unwrap()) & 0xFFFF) as ClassId)
        .collect();
    Ok(LabelArray { labels })
}

pub fn write_labels(labels: &LabelArray, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, labels.to_bytes()).map_err(|e| Error::io(path, e))
}

/// Reads a scan together with its label file and checks that they pair up.
pub fn read_labeled_scan(
    scan: impl AsRef<Path>,
    labels: impl AsRef<Path>,
) -> Result<(PointCloud, LabelArray)> {
    let cloud = read_scan(scan)?;
    let labels = read_labels(labels)?;
    labels.check_paired(&cloud)?;
    Ok((cloud, labels))
}

/// Per-point score sidecar: one little-endian `f32` per point.
pub fn write_scores(scores: &[f32], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::with_capacity(scores.len() * 4);
    for s in scores {
        out.extend_from_slice(&s.to_le_bytes());
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_scores(path: impl AsRef<Path>) -> Result<Vec<f32>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::format(path, "score file size is not a multiple of 4"));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect())
}
