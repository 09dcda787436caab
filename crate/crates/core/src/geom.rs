//! Core geometric types: point clouds, rigid transforms, displacement fields,
//! and the ASCII xyz file format shared by every CLI command.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

const ORTHO_TOL: f64 = 1e-6;

/// An ordered set of 3D points. Point order is significant: every transform
/// preserves it, and correspondence-based metrics rely on it.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<Vector3<f64>>,
}

impl PointCloud {
    pub fn new(points: Vec<Vector3<f64>>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyCloud);
        }
        if points.iter().any(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(Error::NonFinite);
        }
        Ok(Self { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vector3<f64>] {
        &self.points
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Vector3<f64>> {
        self.points.iter()
    }

    /// Reads the ASCII format: one point per line, three whitespace-separated
    /// decimals, `#` lines and blank lines ignored.
    pub fn read_xyz(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path)?;
        let mut points = Vec::new();
        for (idx, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let mut coords = [0.0f64; 3];
            let mut fields = trimmed.split_whitespace();
            for c in coords.iter_mut() {
                let tok = fields.next().ok_or_else(|| Error::Parse {
                    path: path.display().to_string(),
                    line: idx + 1,
                    msg: "expected three coordinates".into(),
                })?;
                *c = tok.parse().map_err(|e| Error::Parse {
                    path: path.display().to_string(),
                    line: idx + 1,
                    msg: format!("{e}"),
                })?;
            }
            if fields.next().is_some() {
                return Err(Error::Parse {
                    path: path.display().to_string(),
                    line: idx + 1,
                    msg: "more than three coordinates".into(),
                });
            }
            points.push(Vector3::new(coords[0], coords[1], coords[2]));
        }
        Self::new(points)
    }

    /// Writes the ASCII format. `Display` for f64 prints the shortest decimal
    /// that parses back to the same value, so round-trips are exact.
    pub fn write_xyz(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        for p in &self.points {
            writeln!(out, "{} {} {}", p.x, p.y, p.z)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// A proper rigid motion: orthonormal rotation with det +1, plus translation.
#[derive(Debug, Clone, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl RigidTransform {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        if !rotation.iter().all(|c| c.is_finite()) || !translation.iter().all(|c| c.is_finite()) {
            return Err(Error::NonFinite);
        }
        let gram = rotation.transpose() * rotation;
        let dev = (gram - Matrix3::identity()).abs().max();
        if dev > ORTHO_TOL {
            return Err(Error::InvalidRotation(format!(
                "RtR deviates from identity by {dev:.3e}"
            )));
        }
        let det = rotation.determinant();
        if (det - 1.0).abs() > ORTHO_TOL {
            return Err(Error::InvalidRotation(format!("determinant {det}")));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Rotation by `angle_rad` about a (not necessarily unit) axis.
    pub fn from_axis_angle(axis: Vector3<f64>, angle_rad: f64, translation: Vector3<f64>) -> Result<Self> {
        let n = axis.norm();
        if n == 0.0 || !n.is_finite() {
            return Err(Error::InvalidRotation("zero or non-finite axis".into()));
        }
        let rotation = nalgebra::Rotation3::from_axis_angle(
            &nalgebra::Unit::new_normalize(axis),
            angle_rad,
        )
        .into_inner();
        Self::new(rotation, translation)
    }

    pub fn apply_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// `compose(b, a)` applies `a` first, then `b`.
    pub fn compose(b: &Self, a: &Self) -> Self {
        Self {
            rotation: b.rotation * a.rotation,
            translation: b.rotation * a.translation + b.translation,
        }
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }
}

/// Per-point 3-vector displacements, same units as the cloud they apply to.
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementField {
    displacements: Vec<Vector3<f64>>,
}

impl DisplacementField {
    pub fn new(displacements: Vec<Vector3<f64>>) -> Result<Self> {
        if displacements
            .iter()
            .any(|d| !d.iter().all(|c| c.is_finite()))
        {
            return Err(Error::NonFinite);
        }
        Ok(Self { displacements })
    }

    pub fn len(&self) -> usize {
        self.displacements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.displacements.is_empty()
    }

    pub fn displacements(&self) -> &[Vector3<f64>] {
        &self.displacements
    }

    pub fn mean_magnitude(&self) -> f64 {
        if self.displacements.is_empty() {
            return 0.0;
        }
        self.displacements.iter().map(|d| d.norm()).sum::<f64>() / self.displacements.len() as f64
    }

    /// `b - a` per index.
    pub fn between(a: &PointCloud, b: &PointCloud) -> Result<Self> {
        if a.len() != b.len() {
            return Err(Error::LengthMismatch {
                expected: a.len(),
                got: b.len(),
            });
        }
        Self::new(
            a.iter()
                .zip(b.iter())
                .map(|(pa, pb)| pb - pa)
                .collect(),
        )
    }
}

/// Output point i = R x_i + t. Order and count preserved.
pub fn apply_rigid(cloud: &PointCloud, xf: &RigidTransform) -> PointCloud {
    PointCloud {
        points: cloud.iter().map(|p| xf.apply_point(p)).collect(),
    }
}

/// Output point i = x_i + d_i.
pub fn apply_displacement(cloud: &PointCloud, field: &DisplacementField) -> Result<PointCloud> {
    if field.len() != cloud.len() {
        return Err(Error::LengthMismatch {
            expected: cloud.len(),
            got: field.len(),
        });
    }
    Ok(PointCloud {
        points: cloud
            .iter()
            .zip(field.displacements().iter())
            .map(|(p, d)| p + d)
            .collect(),
    })
}

/// Arithmetic mean of the points.
pub fn centroid(cloud: &PointCloud) -> Vector3<f64> {
    cloud.iter().sum::<Vector3<f64>>() / cloud.len() as f64
}

/// Normalization parameters: `original = normalized * scale + offset`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormParams {
    pub scale: f64,
    pub offset: Vector3<f64>,
}

/// Centers the cloud at its centroid and scales so the maximum absolute
/// coordinate is 1. Returns the cloud plus parameters that invert exactly.
pub fn normalize(cloud: &PointCloud) -> Result<(PointCloud, NormParams)> {
    if cloud.len() < 2 {
        return Err(Error::DegenerateCloud("need at least 2 points".into()));
    }
    let offset = centroid(cloud);
    let scale = cloud
        .iter()
        .map(|p| (p - offset).abs().max())
        .fold(0.0f64, f64::max);
    if scale == 0.0 {
        return Err(Error::DegenerateCloud("all points identical".into()));
    }
    let points = cloud.iter().map(|p| (p - offset) / scale).collect();
    Ok((PointCloud { points }, NormParams { scale, offset }))
}

/// Jointly normalizes a pair: one scale/offset computed over the union of both
/// clouds, so their relative placement is preserved.
pub fn normalize_pair(
    a: &PointCloud,
    b: &PointCloud,
) -> Result<(PointCloud, PointCloud, NormParams)> {
    let mut all = a.points.clone();
    all.extend_from_slice(&b.points);
    let union = PointCloud::new(all)?;
    let (_, params) = normalize(&union)?;
    let map = |c: &PointCloud| PointCloud {
        points: c.iter().map(|p| (p - params.offset) / params.scale).collect(),
    };
    Ok((map(a), map(b), params))
}

/// Uniform random subset of `n` points without replacement (Fisher-Yates
/// prefix). Deterministic for a given rng state.
pub fn subsample_points(cloud: &PointCloud, n: usize, rng: &mut impl rand::Rng) -> Result<PointCloud> {
    if n == 0 || n > cloud.len() {
        return Err(Error::LengthMismatch {
            expected: cloud.len(),
            got: n,
        });
    }
    let mut idx: Vec<usize> = (0..cloud.len()).collect();
    for i in 0..n {
        let j = rng.random_range(i..idx.len());
        idx.swap(i, j);
    }
    PointCloud::new(idx[..n].iter().map(|&i| cloud.points[i]).collect())
}

pub fn denormalize(cloud: &PointCloud, params: &NormParams) -> PointCloud {
    PointCloud {
        points: cloud
            .iter()
            .map(|p| p * params.scale + params.offset)
            .collect(),
    }
}
