//! KITTI velodyne scans and region-of-interest filtering.
//!
//! A scan file is a packed sequence of little-endian `f32` quadruples
//! `(x, y, z, reflectance)` in the sensor frame: x forward, y left, z up.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

const RECORD_BYTES: usize = 16;

/// Region of interest in the sensor frame, meters.
pub const ROI_X: (f32, f32) = (6.0, 26.0);
pub const ROI_Y: (f32, f32) = (-10.0, 10.0);
pub const ROI_Z: (f32, f32) = (-2.0, -1.0);

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LidarPoint {
    pub x: f32,
    pub y: f32,
    pub z: f32,
    /// Reflectance in `[0, 1]`.
    pub intensity: f32,
}

impl LidarPoint {
    pub fn new(x: f32, y: f32, z: f32, intensity: f32) -> Self {
        Self { x, y, z, intensity }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloudFrame {
    pub frame_id: u64,
    pub points: Vec<LidarPoint>,
}

/// Records rejected or adjusted while decoding a scan.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ParseReport {
    pub records: usize,
    /// Records with a NaN or infinite field, dropped.
    pub dropped_non_finite: usize,
    /// Reflectance values outside `[0, 1]`, clamped.
    pub clamped_intensity: usize,
}

/// Decodes packed scan bytes. `origin` only labels errors.
pub fn decode_velodyne(bytes: &[u8], origin: &str) -> Result<(Vec<LidarPoint>, ParseReport)> {
    if !bytes.len().is_multiple_of(RECORD_BYTES) {
        return Err(Error::Truncated {
            path: origin.to_string(),
            offset: (bytes.len() - bytes.len() % RECORD_BYTES) as u64,
        });
    }
    let mut report = ParseReport { records: bytes.len() / RECORD_BYTES, ..Default::default() };
    let mut points = Vec::with_capacity(report.records);
    for rec in bytes.chunks_exact(RECORD_BYTES) {
        let f = |i: usize| f32::from_le_bytes(rec[i * 4..i * 4 + 4].try_into().unwrap());
        let (x, y, z, mut intensity) = (f(0), f(1), f(2), f(3));
        if ![x, y, z, intensity].iter().all(|v| v.is_finite()) {
            report.dropped_non_finite += 1;
            continue;
        }
        if !(0.0..=1.0).contains(&intensity) {
            intensity = intensity.clamp(0.0, 1.0);
            report.clamped_intensity += 1;
        }
        points.push(LidarPoint { x, y, z, intensity });
    }
    Ok((points, report))
}

pub fn encode_velodyne(points: &[LidarPoint]) -> Vec<u8> {
    let mut out = Vec::with_capacity(points.len() * RECORD_BYTES);
    for p in points {
        for v in [p.x, p.y, p.z, p.intensity] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Frame id from a numeric file stem (`000081.bin` -> 81), else 0.
pub fn frame_id_from_path(path: &Path) -> u64 {
    path.file_stem()
        .and_then(|s| s.to_str())
        .and_then(|s| s.parse().ok())
        .unwrap_or(0)
}

pub fn read_velodyne_bin_with_report(path: &Path) -> Result<(PointCloudFrame, ParseReport)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (points, report) = decode_velodyne(&bytes, &path.display().to_string())?;
    Ok((PointCloudFrame { frame_id: frame_id_from_path(path), points }, report))
}

pub fn read_velodyne_bin(path: &Path) -> Result<PointCloudFrame> {
    read_velodyne_bin_with_report(path).map(|(frame, _)| frame)
}

pub fn write_velodyne_bin(path: &Path, points: &[LidarPoint]) -> Result<()> {
    fs::write(path, encode_velodyne(points)).map_err(|e| Error::io(path, e))
}

/// `6 <= x < 26`, `-10 <= y < 10`, `-2 <= z <= -1`.
pub fn in_roi(p: &LidarPoint) -> bool {
    p.x >= ROI_X.0 && p.x < ROI_X.1 && p.y >= ROI_Y.0 && p.y < ROI_Y.1 && p.z >= ROI_Z.0 && p.z <= ROI_Z.1
}

pub fn filter_roi(frame: &PointCloudFrame) -> PointCloudFrame {
    PointCloudFrame {
        frame_id: frame.frame_id,
        points: frame.points.iter().copied().filter(in_roi).collect(),
    }
}
