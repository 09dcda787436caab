//! Synthetic training/eval pair generation: procedural base shapes, TPS
//! deformations of controlled strength, Case A/B perturbations, subsampling,
//! noise, dropout, and the on-disk dataset manifest.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector, Matrix3x4, Vector3, Vector4};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{
    apply_rigid, centroid, normalize, subsample_points, DisplacementField, PointCloud,
    RigidTransform,
};

const TPS_COND_LIMIT: f64 = 1e12;

/// Thin-plate-spline warp in 3D with kernel U(r) = r. Stored as a position
/// map: warp(x) = affine * [1, x, y, z]^T + sum_j w_j * U(|x - c_j|).
#[derive(Debug, Clone)]
pub struct TpsWarp {
    pub control_points: Vec<Vector3<f64>>,
    pub target_offsets: Vec<Vector3<f64>>,
    /// 3x4, first column is the constant term; identity map is [0 | I].
    pub affine: Matrix3x4<f64>,
    /// M x 3 kernel weights, one row per control point.
    pub kernel_weights: Vec<Vector3<f64>>,
    pub lambda: f64,
}

/// Solves the standard TPS interpolation system for the displacement field
/// d(c_i) = offset_i, then folds the identity back in so the returned warp is
/// a position map.
pub fn tps_fit(
    control: &[Vector3<f64>],
    offsets: &[Vector3<f64>],
    lambda: f64,
) -> Result<TpsWarp> {
    let m = control.len();
    if m < 4 {
        return Err(Error::InvalidSpec(format!(
            "TPS needs at least 4 control points, got {m}"
        )));
    }
    if offsets.len() != m {
        return Err(Error::LengthMismatch {
            expected: m,
            got: offsets.len(),
        });
    }
    if lambda < 0.0 {
        return Err(Error::InvalidSpec("lambda must be >= 0".into()));
    }

    // [[K + lambda I, P], [P^T, 0]]
    let dim = m + 4;
    let mut sys = DMatrix::<f64>::zeros(dim, dim);
    for i in 0..m {
        for j in 0..m {
            sys[(i, j)] = (control[i] - control[j]).norm();
        }
        sys[(i, i)] += lambda;
        sys[(i, m)] = 1.0;
        sys[(m, i)] = 1.0;
        for a in 0..3 {
            sys[(i, m + 1 + a)] = control[i][a];
            sys[(m + 1 + a, i)] = control[i][a];
        }
    }

    let svd = sys.clone().svd(false, false);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if smin <= 0.0 || smax / smin > TPS_COND_LIMIT {
        return Err(Error::IllConditioned(if smin > 0.0 {
            smax / smin
        } else {
            f64::INFINITY
        }));
    }

    let lu = sys.lu();
    let mut kernel_weights = vec![Vector3::zeros(); m];
    let mut disp_affine = Matrix3x4::<f64>::zeros();
    for axis in 0..3 {
        let mut rhs = DVector::<f64>::zeros(dim);
        for i in 0..m {
            rhs[i] = offsets[i][axis];
        }
        let sol = lu
            .solve(&rhs)
            .ok_or(Error::IllConditioned(f64::INFINITY))?;
        for i in 0..m {
            kernel_weights[i][axis] = sol[i];
        }
        for c in 0..4 {
            disp_affine[(axis, c)] = sol[m + c];
        }
    }
    // displacement affine -> position affine
    let mut affine = disp_affine;
    for a in 0..3 {
        affine[(a, a + 1)] += 1.0;
    }
    Ok(TpsWarp {
        control_points: control.to_vec(),
        target_offsets: offsets.to_vec(),
        affine,
        kernel_weights,
        lambda,
    })
}

pub fn tps_apply_point(warp: &TpsWarp, x: &Vector3<f64>) -> Vector3<f64> {
    let h = Vector4::new(1.0, x.x, x.y, x.z);
    let mut out = warp.affine * h;
    for (c, w) in warp.control_points.iter().zip(warp.kernel_weights.iter()) {
        out += w * (x - c).norm();
    }
    out
}

/// Per-point evaluation of the warp; order preserved.
pub fn tps_apply(warp: &TpsWarp, cloud: &PointCloud) -> PointCloud {
    PointCloud::new(cloud.iter().map(|p| tps_apply_point(warp, p)).collect())
        .expect("warp of a valid cloud stays valid")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeFamily {
    Sphere,
    Ellipsoid,
    Blob,
    Torus,
    FromFile,
}

impl ShapeFamily {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sphere" => Ok(Self::Sphere),
            "ellipsoid" => Ok(Self::Ellipsoid),
            "blob" => Ok(Self::Blob),
            "torus" => Ok(Self::Torus),
            "from_file" => Ok(Self::FromFile),
            other => Err(Error::InvalidSpec(format!("unknown family {other}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Sphere => "sphere",
            Self::Ellipsoid => "ellipsoid",
            Self::Blob => "blob",
            Self::Torus => "torus",
            Self::FromFile => "from_file",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Case {
    A,
    B,
}

impl Case {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "A" | "a" => Ok(Self::A),
            "B" | "b" => Ok(Self::B),
            other => Err(Error::InvalidSpec(format!("unknown case {other}"))),
        }
    }
}

/// Full recipe for one synthetic pair. All randomness derives from `seed`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairSpec {
    pub shape_family: ShapeFamily,
    /// Input cloud for `ShapeFamily::FromFile`.
    pub source_file: Option<PathBuf>,
    pub n_points: usize,
    /// Half-extent of the generated shape in raw units (a 200-unit shape has
    /// scale 100).
    pub scale: f64,
    /// Target mean per-point displacement magnitude, raw units.
    pub deform: f64,
    pub case: Case,
    /// Degrees; angle drawn uniformly from this interval, axis uniform.
    pub rotation_range_deg: (f64, f64),
    /// Per-axis translation interval in normalized units.
    pub translation_range: (f64, f64),
    pub noise_sigma: f64,
    pub dropout_fraction: f64,
    pub seed: u64,
    /// Number of TPS control points.
    pub control_points: usize,
}

impl Default for PairSpec {
    fn default() -> Self {
        Self {
            shape_family: ShapeFamily::Sphere,
            source_file: None,
            n_points: 1024,
            scale: 100.0,
            deform: 15.0,
            case: Case::A,
            rotation_range_deg: (-45.0, 45.0),
            translation_range: (-0.2, 0.2),
            noise_sigma: 0.0,
            dropout_fraction: 0.0,
            seed: 0,
            control_points: 8,
        }
    }
}

impl PairSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_points == 0 {
            return Err(Error::InvalidSpec("n_points must be positive".into()));
        }
        if self.deform < 0.0 || self.noise_sigma < 0.0 || self.scale <= 0.0 {
            return Err(Error::InvalidSpec("negative magnitude".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_fraction) {
            return Err(Error::InvalidSpec("dropout_fraction must be in [0,1)".into()));
        }
        if self.rotation_range_deg.0 > self.rotation_range_deg.1
            || self.translation_range.0 > self.translation_range.1
        {
            return Err(Error::InvalidSpec("range not well-ordered".into()));
        }
        if self.control_points < 4 {
            return Err(Error::InvalidSpec("need at least 4 control points".into()));
        }
        if self.shape_family == ShapeFamily::FromFile && self.source_file.is_none() {
            return Err(Error::InvalidSpec("from_file family needs source_file".into()));
        }
        Ok(())
    }
}

/// One generated pair. Ground truth is per-index (apply_displacement(source,
/// gt) == target) and is dropped once dropout breaks the 1:1 indexing.
#[derive(Debug, Clone)]
pub struct SynthPair {
    pub source: PointCloud,
    pub target: PointCloud,
    pub ground_truth: Option<DisplacementField>,
    /// The rigid motion injected in Case B, for oracle checks.
    pub applied_rigid: Option<RigidTransform>,
    pub has_correspondence: bool,
}

fn unit_direction(rng: &mut impl Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
        );
        let n = v.norm();
        if n > 1e-12 {
            return v / n;
        }
    }
}

/// Samples `n` surface points of the requested family at unit scale.
pub fn base_shape(family: ShapeFamily, n: usize, rng: &mut ChaCha8Rng) -> Result<PointCloud> {
    let points: Vec<Vector3<f64>> = match family {
        ShapeFamily::Sphere => (0..n).map(|_| unit_direction(rng)).collect(),
        ShapeFamily::Ellipsoid => {
            // elongated: strongly anisotropic semi-axes
            let axes = Vector3::new(1.8, 0.5, 0.35);
            (0..n)
                .map(|_| unit_direction(rng).component_mul(&axes))
                .collect()
        }
        ShapeFamily::Blob => {
            // sphere with a smooth low-order radial perturbation
            let dirs: Vec<Vector3<f64>> = (0..6).map(|_| unit_direction(rng)).collect();
            let amps: Vec<f64> = (0..6).map(|_| rng.random_range(-0.2..0.2)).collect();
            (0..n)
                .map(|_| {
                    let d = unit_direction(rng);
                    let r = 1.0
                        + dirs
                            .iter()
                            .zip(amps.iter())
                            .map(|(u, a)| a * d.dot(u).powi(2))
                            .sum::<f64>();
                    d * r
                })
                .collect()
        }
        ShapeFamily::Torus => {
            let (major, minor) = (1.0, 0.35);
            (0..n)
                .map(|_| {
                    let u = rng.random::<f64>() * std::f64::consts::TAU;
                    let v = rng.random::<f64>() * std::f64::consts::TAU;
                    Vector3::new(
                        (major + minor * v.cos()) * u.cos(),
                        (major + minor * v.cos()) * u.sin(),
                        minor * v.sin(),
                    )
                })
                .collect()
        }
        ShapeFamily::FromFile => {
            return Err(Error::InvalidSpec(
                "from_file shapes are read, not sampled".into(),
            ))
        }
    };
    PointCloud::new(points)
}

/// Farthest-point sampling; first pick is random, each next pick maximizes
/// distance to the chosen set.
pub fn farthest_point_sample(
    cloud: &PointCloud,
    m: usize,
    rng: &mut impl Rng,
) -> Result<Vec<Vector3<f64>>> {
    if m == 0 || m > cloud.len() {
        return Err(Error::LengthMismatch {
            expected: cloud.len(),
            got: m,
        });
    }
    let mut picked = vec![cloud.points()[rng.random_range(0..cloud.len())]];
    let mut d2: Vec<f64> = cloud
        .iter()
        .map(|p| (p - picked[0]).norm_squared())
        .collect();
    while picked.len() < m {
        let (best, _) = d2
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, &d)| {
                if d > acc.1 {
                    (i, d)
                } else {
                    acc
                }
            });
        let next = cloud.points()[best];
        picked.push(next);
        for (i, p) in cloud.iter().enumerate() {
            d2[i] = d2[i].min((p - next).norm_squared());
        }
    }
    Ok(picked)
}

/// Uniform random subset without replacement; deterministic per seed.
pub fn subsample(cloud: &PointCloud, n: usize, seed: u64) -> Result<PointCloud> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    subsample_points(cloud, n, &mut rng)
}

/// Generates one registered pair per the spec. The target is the base shape;
/// the source is a TPS-deformed (and, in Case B, rigidly perturbed) copy.
pub fn make_pair(spec: &PairSpec) -> Result<SynthPair> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let target = match spec.shape_family {
        ShapeFamily::FromFile => {
            let path = spec.source_file.as_ref().expect("validated");
            let raw = PointCloud::read_xyz(path)?;
            if raw.len() < spec.n_points {
                return Err(Error::LengthMismatch {
                    expected: spec.n_points,
                    got: raw.len(),
                });
            }
            subsample_points(&raw, spec.n_points, &mut rng)?
        }
        family => {
            let unit = base_shape(family, spec.n_points, &mut rng)?;
            PointCloud::new(unit.iter().map(|p| p * spec.scale).collect())?
        }
    };

    // TPS deformation, mean-centered and rescaled so the mean per-point
    // displacement magnitude equals spec.deform exactly.
    let mut source_pts: Vec<Vector3<f64>> = target.points().to_vec();
    if spec.deform > 0.0 {
        let control = farthest_point_sample(&target, spec.control_points, &mut rng)?;
        let offsets: Vec<Vector3<f64>> = (0..control.len())
            .map(|_| unit_direction(&mut rng) * rng.random_range(0.5..1.5) * spec.deform)
            .collect();
        let warp = tps_fit(&control, &offsets, 0.0)?;
        let mut disp: Vec<Vector3<f64>> =
            target.iter().map(|p| tps_apply_point(&warp, p) - p).collect();
        let mean: Vector3<f64> = disp.iter().sum::<Vector3<f64>>() / disp.len() as f64;
        for d in disp.iter_mut() {
            *d -= mean;
        }
        let mean_mag = disp.iter().map(|d| d.norm()).sum::<f64>() / disp.len() as f64;
        if mean_mag > 0.0 {
            let s = spec.deform / mean_mag;
            for (p, d) in source_pts.iter_mut().zip(disp.iter()) {
                *p += d * s;
            }
        }
    }
    let mut source = PointCloud::new(source_pts)?;

    // Case B: rotation about the target centroid plus a translation sampled
    // in normalized units and mapped back to raw units.
    let applied_rigid = if spec.case == Case::B {
        let angle_deg = rng.random_range(spec.rotation_range_deg.0..=spec.rotation_range_deg.1);
        let axis = unit_direction(&mut rng);
        let (_, norm) = normalize(&target)?;
        let t_raw = Vector3::new(
            rng.random_range(spec.translation_range.0..=spec.translation_range.1),
            rng.random_range(spec.translation_range.0..=spec.translation_range.1),
            rng.random_range(spec.translation_range.0..=spec.translation_range.1),
        ) * norm.scale;
        let c = centroid(&target);
        let rot = RigidTransform::from_axis_angle(axis, angle_deg.to_radians(), Vector3::zeros())?;
        let xf = RigidTransform::new(rot.rotation, c - rot.rotation * c + t_raw)?;
        source = apply_rigid(&source, &xf);
        Some(xf)
    } else {
        None
    };

    let ground_truth = DisplacementField::between(&source, &target)?;

    // noise and dropout last, source only
    if spec.noise_sigma > 0.0 {
        source = PointCloud::new(
            source
                .iter()
                .map(|p| {
                    p + Vector3::new(
                        rng.sample::<f64, _>(StandardNormal),
                        rng.sample::<f64, _>(StandardNormal),
                        rng.sample::<f64, _>(StandardNormal),
                    ) * spec.noise_sigma
                })
                .collect(),
        )?;
    }
    let mut has_correspondence = true;
    let mut ground_truth = Some(ground_truth);
    if spec.dropout_fraction > 0.0 {
        let keep = spec.n_points - (spec.dropout_fraction * spec.n_points as f64).floor() as usize;
        let keep = keep.max(1);
        if keep < source.len() {
            source = subsample_points(&source, keep, &mut rng)?;
            has_correspondence = false;
            ground_truth = None;
        }
    }

    Ok(SynthPair {
        source,
        target,
        ground_truth,
        applied_rigid,
        has_correspondence,
    })
}

/// One dataset entry; paths are relative to the manifest's directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub source_path: String,
    pub target_path: String,
    pub case: Case,
    pub deform_mm: f64,
    pub seed: u64,
    pub has_correspondence: bool,
    pub family: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub pairs: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Writes one source/target file pair per sample plus `manifest.json`.
pub fn write_dataset(pairs: &[(PairSpec, SynthPair)], dir: impl AsRef<Path>) -> Result<Manifest> {
    if pairs.is_empty() {
        return Err(Error::InvalidSpec("no pairs to write".into()));
    }
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(pairs.len());
    for (i, (spec, pair)) in pairs.iter().enumerate() {
        let id = format!("pair_{i:04}");
        let source_path = format!("{id}_source.xyz");
        let target_path = format!("{id}_target.xyz");
        pair.source.write_xyz(dir.join(&source_path))?;
        pair.target.write_xyz(dir.join(&target_path))?;
        entries.push(ManifestEntry {
            id,
            source_path,
            target_path,
            case: spec.case,
            deform_mm: spec.deform,
            seed: spec.seed,
            has_correspondence: pair.has_correspondence,
            family: spec.shape_family.name().to_string(),
        });
    }
    let manifest = Manifest { pairs: entries };
    manifest.write(dir.join("manifest.json"))?;
    Ok(manifest)
}

/// Loads the clouds referenced by a manifest entry.
pub fn load_entry(dir: impl AsRef<Path>, entry: &ManifestEntry) -> Result<(PointCloud, PointCloud)> {
    let dir = dir.as_ref();
    Ok((
        PointCloud::read_xyz(dir.join(&entry.source_path))?,
        PointCloud::read_xyz(dir.join(&entry.target_path))?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Matrix3;
    use crate::geom::apply_displacement;
    use crate::metrics::rmse_corresponded;

    fn random_controls(m: usize, rng: &mut ChaCha8Rng) -> Vec<Vector3<f64>> {
        (0..m)
            .map(|_| {
                Vector3::new(
                    rng.random::<f64>() * 2.0 - 1.0,
                    rng.random::<f64>() * 2.0 - 1.0,
                    rng.random::<f64>() * 2.0 - 1.0,
                )
            })
            .collect()
    }

    #[test]
    fn tps_zero_offsets_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let control = random_controls(8, &mut rng);
        let warp = tps_fit(&control, &vec![Vector3::zeros(); 8], 0.0).unwrap();
        for w in &warp.kernel_weights {
            assert!(w.norm() <= 1e-8);
        }
        let mut id = Matrix3x4::<f64>::zeros();
        for a in 0..3 {
            id[(a, a + 1)] = 1.0;
        }
        assert!((warp.affine - id).abs().max() <= 1e-8);
        let x = Vector3::new(0.3, -0.4, 0.9);
        assert!((tps_apply_point(&warp, &x) - x).norm() <= 1e-8);
    }

    #[test]
    fn tps_constant_offsets_is_translation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let control = random_controls(8, &mut rng);
        let v = Vector3::new(0.5, -1.0, 2.0);
        let warp = tps_fit(&control, &vec![v; 8], 0.0).unwrap();
        for w in &warp.kernel_weights {
            assert!(w.norm() <= 1e-8);
        }
        let x = Vector3::new(2.0, 1.0, -3.0);
        assert!((tps_apply_point(&warp, &x) - (x + v)).norm() <= 1e-7);
    }

    #[test]
    fn tps_affine_offsets_leave_no_kernel_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let control = random_controls(10, &mut rng);
        let b = Matrix3::new(0.1, 0.2, -0.1, 0.0, -0.3, 0.05, 0.2, 0.0, 0.15);
        let v = Vector3::new(1.0, -0.5, 0.25);
        let offsets: Vec<Vector3<f64>> = control.iter().map(|c| b * c + v).collect();
        let warp = tps_fit(&control, &offsets, 0.0).unwrap();
        for w in &warp.kernel_weights {
            assert!(w.norm() <= 1e-8, "kernel weight {}", w.norm());
        }
    }

    #[test]
    fn tps_exact_interpolation_at_lambda_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let control = random_controls(8, &mut rng);
        let offsets: Vec<Vector3<f64>> = (0..8)
            .map(|_| {
                Vector3::new(
                    rng.random::<f64>() - 0.5,
                    rng.random::<f64>() - 0.5,
                    rng.random::<f64>() - 0.5,
                )
            })
            .collect();
        let warp = tps_fit(&control, &offsets, 0.0).unwrap();
        for (c, o) in control.iter().zip(offsets.iter()) {
            let got = tps_apply_point(&warp, c);
            assert!((got - (c + o)).norm() <= 1e-8);
        }
    }

    #[test]
    fn tps_rejects_coplanar_controls() {
        // all controls in the z = 0 plane
        let control: Vec<Vector3<f64>> = (0..6)
            .map(|i| Vector3::new(i as f64, (i * i) as f64 * 0.1, 0.0))
            .collect();
        let offsets = vec![Vector3::x(); 6];
        assert!(matches!(
            tps_fit(&control, &offsets, 0.0),
            Err(Error::IllConditioned(_))
        ));
    }

    #[test]
    fn make_pair_zero_deform_case_a_is_identity() {
        let spec = PairSpec {
            deform: 0.0,
            n_points: 64,
            ..PairSpec::default()
        };
        let pair = make_pair(&spec).unwrap();
        assert_eq!(pair.source, pair.target);
        assert_eq!(rmse_corresponded(&pair.source, &pair.target).unwrap(), 0.0);
    }

    #[test]
    fn make_pair_ground_truth_closes_the_pair() {
        let spec = PairSpec {
            n_points: 128,
            case: Case::B,
            seed: 5,
            ..PairSpec::default()
        };
        let pair = make_pair(&spec).unwrap();
        let gt = pair.ground_truth.as_ref().unwrap();
        let restored = apply_displacement(&pair.source, gt).unwrap();
        for (a, b) in restored.iter().zip(pair.target.iter()) {
            assert!((a - b).norm() <= 1e-10);
        }
    }

    // Kabsch / orthogonal Procrustes oracle on exact correspondences.
    fn procrustes(source: &PointCloud, target: &PointCloud) -> Matrix3<f64> {
        let cs = centroid(source);
        let ct = centroid(target);
        let mut h = Matrix3::<f64>::zeros();
        for (s, t) in source.iter().zip(target.iter()) {
            h += (s - cs) * (t - ct).transpose();
        }
        let svd = h.svd(true, true);
        let u = svd.u.unwrap();
        let vt = svd.v_t.unwrap();
        let d = (vt.transpose() * u.transpose()).determinant();
        let fix = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d.signum()));
        vt.transpose() * fix * u.transpose()
    }

    #[test]
    fn make_pair_case_b_rotation_recovered_by_procrustes() {
        let spec = PairSpec {
            deform: 0.0,
            n_points: 96,
            case: Case::B,
            rotation_range_deg: (45.0, 45.0),
            translation_range: (0.0, 0.0),
            seed: 6,
            ..PairSpec::default()
        };
        let pair = make_pair(&spec).unwrap();
        let applied = pair.applied_rigid.as_ref().unwrap();
        // source = R(target) so source -> target recovers R^T
        let recovered = procrustes(&pair.source, &pair.target);
        assert!(
            (recovered - applied.rotation.transpose()).abs().max() <= 1e-6,
            "recovered rotation deviates"
        );
        let angle = ((applied.rotation.trace() - 1.0) / 2.0).acos().to_degrees();
        assert!((angle - 45.0).abs() <= 1e-9);
    }

    #[test]
    fn make_pair_deform_magnitude_is_enforced() {
        let spec = PairSpec {
            n_points: 512,
            deform: 15.0,
            scale: 100.0,
            seed: 7,
            ..PairSpec::default()
        };
        let pair = make_pair(&spec).unwrap();
        let mag = pair.ground_truth.as_ref().unwrap().mean_magnitude();
        assert!((mag - 15.0).abs() <= 0.05 * 15.0, "mean magnitude {mag}");
    }

    #[test]
    fn make_pair_case_a_centroids_coincide() {
        let spec = PairSpec {
            n_points: 256,
            seed: 8,
            ..PairSpec::default()
        };
        let pair = make_pair(&spec).unwrap();
        let offset = (centroid(&pair.source) - centroid(&pair.target)).norm();
        assert!(offset <= 1e-9, "centroid offset {offset}");
    }

    #[test]
    fn make_pair_case_b_centroid_offset_respects_translation_range() {
        for seed in 0..8 {
            let spec = PairSpec {
                n_points: 128,
                case: Case::B,
                translation_range: (-0.2, 0.2),
                seed,
                ..PairSpec::default()
            };
            let pair = make_pair(&spec).unwrap();
            let (_, norm) = normalize(&pair.target).unwrap();
            let offset = centroid(&pair.source) - centroid(&pair.target);
            for a in 0..3 {
                assert!(offset[a].abs() <= 0.2 * norm.scale + 1e-9);
            }
        }
    }

    #[test]
    fn make_pair_dropout_breaks_correspondence() {
        let spec = PairSpec {
            n_points: 100,
            dropout_fraction: 0.25,
            seed: 9,
            ..PairSpec::default()
        };
        let pair = make_pair(&spec).unwrap();
        assert_eq!(pair.source.len(), 75);
        assert!(!pair.has_correspondence);
        assert!(pair.ground_truth.is_none());
    }

    #[test]
    fn subsample_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let cloud = base_shape(ShapeFamily::Sphere, 32, &mut rng).unwrap();
        // n = N: set-equal permutation
        let all = subsample(&cloud, 32, 3).unwrap();
        let mut a: Vec<_> = all.iter().map(|p| format!("{p:?}")).collect();
        let mut b: Vec<_> = cloud.iter().map(|p| format!("{p:?}")).collect();
        a.sort();
        b.sort();
        assert_eq!(a, b);
        // n = 1: one of the originals
        let one = subsample(&cloud, 1, 4).unwrap();
        assert!(cloud.iter().any(|p| p == &one.points()[0]));
        // determinism
        assert_eq!(subsample(&cloud, 10, 5).unwrap(), subsample(&cloud, 10, 5).unwrap());
        assert!(subsample(&cloud, 33, 0).is_err());
    }

    #[test]
    fn dataset_round_trip_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        let specs: Vec<PairSpec> = (0..3)
            .map(|i| PairSpec {
                n_points: 32,
                seed: i,
                ..PairSpec::default()
            })
            .collect();
        let gen = |d: &Path| -> Manifest {
            let pairs: Vec<(PairSpec, SynthPair)> = specs
                .iter()
                .map(|s| (s.clone(), make_pair(s).unwrap()))
                .collect();
            write_dataset(&pairs, d).unwrap()
        };
        let d1 = dir.path().join("a");
        let d2 = dir.path().join("b");
        let m1 = gen(&d1);
        gen(&d2);
        assert_eq!(m1.pairs.len(), 3);
        // round trip to full precision
        let (src, tgt) = load_entry(&d1, &m1.pairs[0]).unwrap();
        let regen = make_pair(&specs[0]).unwrap();
        assert_eq!(src, regen.source);
        assert_eq!(tgt, regen.target);
        // byte-identical regeneration
        for entry in &m1.pairs {
            for p in [&entry.source_path, &entry.target_path] {
                let b1 = std::fs::read(d1.join(p)).unwrap();
                let b2 = std::fs::read(d2.join(p)).unwrap();
                assert_eq!(b1, b2, "file {p} differs between runs");
            }
        }
    }
}
