//! Synthetic partial-to-partial scene pairs.
//!
//! Source and target are drawn independently from one set of lines: the target
//! copy is moved by a random rigid pose, both copies get footprint and
//! direction noise, and each side keeps an independent random subset.

use nalgebra::{Matrix3, Rotation3, Unit, Vector3};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, UnitSphere};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::plucker::{
    from_point_direction, line_distance_unsigned, to_point_direction, transform_line, PluckerLine,
    RigidTransform,
};

/// Scenes with fewer lines than this are rejected.
pub const MIN_SCENE_LINES: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseConfig {
    /// Std of the per-component footprint noise, meters.
    pub footprint_sigma: f64,
    /// Per-component clip of the footprint noise, meters.
    pub footprint_clip: f64,
    /// Std of the direction perturbation angle, degrees.
    pub angle_sigma: f64,
    /// Clip of the direction perturbation angle, degrees.
    pub angle_clip: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            footprint_sigma: 0.05,
            footprint_clip: 0.25,
            angle_sigma: 2.0,
            angle_clip: 5.0,
        }
    }
}

impl NoiseConfig {
    pub fn zero() -> Self {
        Self {
            footprint_sigma: 0.0,
            footprint_clip: 0.0,
            angle_sigma: 0.0,
            angle_clip: 0.0,
        }
    }

    /// Gaussian noise at the given levels, clipped at `clip_factor` sigmas.
    pub fn gaussian(angle_sigma: f64, footprint_sigma: f64, clip_factor: f64) -> Self {
        Self {
            footprint_sigma,
            footprint_clip: footprint_sigma * clip_factor,
            angle_sigma,
            angle_clip: angle_sigma * clip_factor,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let vals = [
            self.footprint_sigma,
            self.footprint_clip,
            self.angle_sigma,
            self.angle_clip,
        ];
        if vals.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config("noise parameters must be finite and non-negative".into()));
        }
        if self.footprint_clip < self.footprint_sigma || self.angle_clip < self.angle_sigma {
            return Err(Error::Config("noise clip must be at least sigma".into()));
        }
        Ok(())
    }
}

/// Sampling ranges for the ground-truth pose. Rotation is per Euler axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PoseRanges {
    pub rotation_deg: (f64, f64),
    pub translation_m: (f64, f64),
}

impl Default for PoseRanges {
    fn default() -> Self {
        Self {
            rotation_deg: (0.0, 45.0),
            translation_m: (-2.0, 2.0),
        }
    }
}

/// Shape of the fully synthetic line sets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneLinesConfig {
    pub num_lines: usize,
    /// Room-like box the footprints are drawn from, meters, centered at the origin.
    pub extent: [f64; 3],
    /// Fraction of lines aligned with a coordinate axis; the rest are uniformly oriented.
    pub axis_aligned_fraction: f64,
}

impl Default for SceneLinesConfig {
    fn default() -> Self {
        Self {
            num_lines: 40,
            extent: [11.0, 10.0, 3.0],
            axis_aligned_fraction: 0.7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenePair {
    #[serde(with = "line_list")]
    pub source: Vec<PluckerLine>,
    #[serde(with = "line_list")]
    pub target: Vec<PluckerLine>,
    #[serde(with = "pose_serde")]
    pub gt_pose: RigidTransform,
    pub gt_matches: Vec<(usize, usize)>,
    pub seed: u64,
    pub noise: NoiseConfig,
    pub overlap_ratio: f64,
}

impl ScenePair {
    /// Dense 0/1 correspondence matrix, row-major `M x N`.
    pub fn correspondence_matrix(&self) -> Vec<Vec<bool>> {
        let mut c = vec![vec![false; self.target.len()]; self.source.len()];
        for &(i, j) in &self.gt_matches {
            c[i][j] = true;
        }
        c
    }

    /// Sign-invariant line residual of every ground-truth pair under the ground-truth pose.
    pub fn gt_residuals(&self) -> Vec<f64> {
        self.gt_matches
            .iter()
            .map(|&(i, j)| line_distance_unsigned(&self.target[j], &transform_line(&self.gt_pose, &self.source[i])))
            .collect()
    }

    /// Bounds and uniqueness of the ground-truth matches.
    pub fn check_matches(&self) -> Result<()> {
        let mut seen_s = vec![false; self.source.len()];
        let mut seen_t = vec![false; self.target.len()];
        for &(i, j) in &self.gt_matches {
            if i >= self.source.len() || j >= self.target.len() {
                return Err(Error::Config(format!("gt match ({i}, {j}) out of range")));
            }
            if seen_s[i] || seen_t[j] {
                return Err(Error::Config(format!("gt match ({i}, {j}) reuses an index")));
            }
            seen_s[i] = true;
            seen_t[j] = true;
        }
        Ok(())
    }
}

/// Deterministic RNG for scene `index` of a run seeded with `seed`.
pub fn scene_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

pub fn euler_xyz(rx_deg: f64, ry_deg: f64, rz_deg: f64) -> Matrix3<f64> {
    let rx = Rotation3::from_axis_angle(&Vector3::x_axis(), rx_deg.to_radians());
    let ry = Rotation3::from_axis_angle(&Vector3::y_axis(), ry_deg.to_radians());
    let rz = Rotation3::from_axis_angle(&Vector3::z_axis(), rz_deg.to_radians());
    *(rz * ry * rx).matrix()
}

fn uniform(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi <= lo {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

/// Euler angles drawn per axis and applied X, then Y, then Z.
pub fn sample_pose(rng: &mut impl Rng, ranges: &PoseRanges) -> RigidTransform {
    let ax = uniform(rng, ranges.rotation_deg);
    let ay = uniform(rng, ranges.rotation_deg);
    let az = uniform(rng, ranges.rotation_deg);
    let t = Vector3::new(
        uniform(rng, ranges.translation_m),
        uniform(rng, ranges.translation_m),
        uniform(rng, ranges.translation_m),
    );
    RigidTransform::new(euler_xyz(ax, ay, az), t)
}

/// One draw of `N(0, sigma)` clipped to `[-clip, clip]`.
pub fn sample_clipped_normal(rng: &mut impl Rng, sigma: f64, clip: f64) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    (z * sigma).clamp(-clip, clip)
}

pub fn perturb_line(rng: &mut impl Rng, l: &PluckerLine, cfg: &NoiseConfig) -> PluckerLine {
    let (p, v) = to_point_direction(l);
    let dp = Vector3::from_fn(|_, _| sample_clipped_normal(rng, cfg.footprint_sigma, cfg.footprint_clip));
    let angle = sample_clipped_normal(rng, cfg.angle_sigma, cfg.angle_clip).to_radians();
    let axis: [f64; 3] = UnitSphere.sample(rng);
    let rot = Rotation3::from_axis_angle(&Unit::new_normalize(Vector3::from(axis)), angle);
    from_point_direction(&(p + dp), &(rot * v)).expect("rotated unit direction is nonzero")
}

/// Random room-like line set: a mix of axis-aligned and uniformly oriented lines.
pub fn generate_lines(rng: &mut impl Rng, cfg: &SceneLinesConfig) -> Vec<PluckerLine> {
    (0..cfg.num_lines)
        .map(|_| {
            let p = Vector3::from_fn(|k, _| (rng.random::<f64>() - 0.5) * cfg.extent[k]);
            let v = if rng.random::<f64>() < cfg.axis_aligned_fraction {
                let mut v = Vector3::zeros();
                v[rng.random_range(0..3)] = 1.0;
                v
            } else {
                Vector3::from(UnitSphere.sample(rng))
            };
            from_point_direction(&p, &v).expect("unit direction")
        })
        .collect()
}

fn subset(rng: &mut impl Rng, n: usize, overlap: f64) -> Vec<usize> {
    let k = ((n as f64) * overlap).round().clamp(1.0, n as f64) as usize;
    let mut idx = sample(rng, n, k).into_vec();
    idx.sort_unstable();
    idx
}

/// Builds one partial-to-partial pair from `lines`. Selection keeps the original order.
pub fn make_scene_pair(
    rng: &mut impl Rng,
    lines: &[PluckerLine],
    overlap: f64,
    cfg: &NoiseConfig,
    ranges: &PoseRanges,
    seed: u64,
) -> Result<ScenePair> {
    if lines.len() < MIN_SCENE_LINES {
        return Err(Error::TooFewLines {
            needed: MIN_SCENE_LINES,
            got: lines.len(),
        });
    }
    if !(overlap > 0.0 && overlap <= 1.0) {
        return Err(Error::Config(format!("overlap must lie in (0, 1], got {overlap}")));
    }
    cfg.validate()?;
    let gt_pose = sample_pose(rng, ranges);

    let src_noisy: Vec<_> = lines.iter().map(|l| perturb_line(rng, l, cfg)).collect();
    let dst_noisy: Vec<_> = lines
        .iter()
        .map(|l| perturb_line(rng, &transform_line(&gt_pose, l), cfg))
        .collect();

    let src_idx = subset(rng, lines.len(), overlap);
    let dst_idx = subset(rng, lines.len(), overlap);

    let mut dst_pos = vec![usize::MAX; lines.len()];
    for (j, &orig) in dst_idx.iter().enumerate() {
        dst_pos[orig] = j;
    }
    let gt_matches = src_idx
        .iter()
        .enumerate()
        .filter_map(|(i, &orig)| (dst_pos[orig] != usize::MAX).then_some((i, dst_pos[orig])))
        .collect();

    Ok(ScenePair {
        source: src_idx.iter().map(|&k| src_noisy[k]).collect(),
        target: dst_idx.iter().map(|&k| dst_noisy[k]).collect(),
        gt_pose,
        gt_matches,
        seed,
        noise: *cfg,
        overlap_ratio: overlap,
    })
}

/// Full synthetic generation for scene `index`: lines and pair from one stream.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub lines: SceneLinesConfig,
    pub overlap: f64,
    pub noise: NoiseConfig,
    pub pose: PoseRanges,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            lines: SceneLinesConfig::default(),
            overlap: 0.7,
            noise: NoiseConfig::default(),
            pose: PoseRanges::default(),
        }
    }
}

pub fn synth_scene(spec: &SceneSpec, seed: u64, index: u64) -> Result<ScenePair> {
    let mut rng = scene_rng(seed, index);
    let lines = generate_lines(&mut rng, &spec.lines);
    make_scene_pair(&mut rng, &lines, spec.overlap, &spec.noise, &spec.pose, seed)
}

pub(crate) mod line_list {
    use serde::de::Error as _;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use crate::plucker::PluckerLine;

    pub fn serialize<S: Serializer>(lines: &[PluckerLine], s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<[f64; 6]> = lines.iter().map(|l| l.to_array()).collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<PluckerLine>, D::Error> {
        let rows: Vec<[f64; 6]> = Vec::deserialize(d)?;
        rows.into_iter()
            .map(|r| PluckerLine::from_stored(r).map_err(D::Error::custom))
            .collect()
    }
}

pub(crate) mod pose_serde {
    use nalgebra::{Matrix3, Vector3};
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use crate::plucker::RigidTransform;

    #[derive(Serialize, Deserialize)]
    struct PoseRepr {
        rotation: [f64; 9],
        translation: [f64; 3],
    }

    pub fn to_row_major(r: &Matrix3<f64>) -> [f64; 9] {
        let mut out = [0.0; 9];
        for i in 0..3 {
            for j in 0..3 {
                out[3 * i + j] = r[(i, j)];
            }
        }
        out
    }

    pub fn serialize<S: Serializer>(g: &RigidTransform, s: S) -> Result<S::Ok, S::Error> {
        PoseRepr {
            rotation: to_row_major(&g.rotation),
            translation: [g.translation.x, g.translation.y, g.translation.z],
        }
        .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<RigidTransform, D::Error> {
        let p = PoseRepr::deserialize(d)?;
        Ok(RigidTransform::new(
            Matrix3::from_row_slice(&p.rotation),
            Vector3::from(p.translation),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plucker::{line_distance, rotation_error};

    fn base_lines(seed: u64, n: usize) -> Vec<PluckerLine> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        generate_lines(
            &mut rng,
            &SceneLinesConfig {
                num_lines: n,
                ..Default::default()
            },
        )
    }

    #[test]
    fn zero_ranges_give_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let g = sample_pose(
            &mut rng,
            &PoseRanges {
                rotation_deg: (0.0, 0.0),
                translation_m: (0.0, 0.0),
            },
        );
        assert_eq!(g, RigidTransform::identity());
    }

    #[test]
    fn pose_angle_bounded_by_composed_max() {
        // oracle: grid search of the composed angle over the per-axis box
        let mut worst: f64 = 0.0;
        let steps = 45;
        for a in 0..=steps {
            for b in 0..=steps {
                for c in 0..=steps {
                    let r = euler_xyz(a as f64, b as f64, c as f64);
                    worst = worst.max(rotation_error(&Matrix3::identity(), &r));
                }
            }
        }
        assert!(worst <= 77.9, "grid max {worst}");

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..2000 {
            let g = sample_pose(&mut rng, &PoseRanges::default());
            assert!(g.rotation_angle_deg() <= worst + 1e-9);
            assert!(g.translation.iter().all(|t| t.abs() <= 2.0));
            assert!(g.is_valid(1e-9));
        }
    }

    #[test]
    fn pose_sampling_is_deterministic() {
        let a = sample_pose(&mut ChaCha8Rng::seed_from_u64(5), &PoseRanges::default());
        let b = sample_pose(&mut ChaCha8Rng::seed_from_u64(5), &PoseRanges::default());
        assert_eq!(a, b);
    }

    #[test]
    fn zero_noise_keeps_line() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for l in base_lines(2, 50) {
            let out = perturb_line(&mut rng, &l, &NoiseConfig::zero());
            assert!(line_distance(&l, &out) < 1e-12);
        }
    }

    #[test]
    fn default_noise_respects_clips() {
        let cfg = NoiseConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let lines = base_lines(4, 100);
        for k in 0..10_000 {
            let l = &lines[k % lines.len()];
            let out = perturb_line(&mut rng, l, &cfg);
            let angle = l.direction().dot(&out.direction()).abs().min(1.0).acos().to_degrees();
            assert!(angle <= 5.0 + 1e-9, "angle {angle}");
            // the displaced footprint lies on the new line, so the old footprint
            // is within the clipped box of it
            let (p_old, _) = to_point_direction(l);
            let dist = (out.moment() - p_old.cross(&out.direction())).norm();
            assert!(dist <= 0.25 * 3f64.sqrt() + 1e-9);
        }
    }

    #[test]
    fn angle_std_matches_clipped_normal() {
        // oracle: std of N(0, 2) clipped to +-5 by numerical integration
        let (sigma, clip) = (2.0f64, 5.0f64);
        let pdf = |x: f64| (-(x * x) / (2.0 * sigma * sigma)).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt());
        let n = 200_000;
        let h = clip / n as f64;
        let mut inner = 0.0;
        let mut mass = 0.0;
        for k in 0..n {
            let x = (k as f64 + 0.5) * h;
            inner += x * x * pdf(x) * h;
            mass += pdf(x) * h;
        }
        let tail = 0.5 - mass;
        let var = 2.0 * (inner + tail * clip * clip);
        let expected = var.sqrt();

        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let draws: Vec<f64> = (0..100_000).map(|_| sample_clipped_normal(&mut rng, sigma, clip)).collect();
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        let std = (draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / draws.len() as f64).sqrt();
        assert!((std - expected).abs() / expected < 0.02, "{std} vs {expected}");
        assert!((std - 2.0).abs() / 2.0 < 0.1);
    }

    #[test]
    fn full_overlap_noise_free_identity() {
        let lines = base_lines(9, 30);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ranges = PoseRanges {
            rotation_deg: (0.0, 0.0),
            translation_m: (0.0, 0.0),
        };
        let pair = make_scene_pair(&mut rng, &lines, 1.0, &NoiseConfig::zero(), &ranges, 1).unwrap();
        assert_eq!(pair.gt_matches, (0..30).map(|i| (i, i)).collect::<Vec<_>>());
        for i in 0..30 {
            assert!(line_distance(&pair.source[i], &pair.target[i]) < 1e-12);
        }
    }

    #[test]
    fn noise_free_pairs_are_consistent() {
        let lines = base_lines(10, 60);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pair = make_scene_pair(&mut rng, &lines, 0.7, &NoiseConfig::zero(), &PoseRanges::default(), 2).unwrap();
        pair.check_matches().unwrap();
        assert!(pair.gt_residuals().iter().all(|&r| r < 1e-9));
    }

    #[test]
    fn match_count_matches_expectation() {
        let lines = base_lines(12, 300);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pair = make_scene_pair(&mut rng, &lines, 0.7, &NoiseConfig::default(), &PoseRanges::default(), 3).unwrap();
        let n = pair.gt_matches.len() as f64;
        // binomial(300, 0.49) oracle
        let (mean, sd) = (300.0 * 0.49, (300.0f64 * 0.49 * 0.51).sqrt());
        assert!((n - mean).abs() < 3.0 * sd, "{n}");
        assert_eq!(pair.source.len(), 210);
        assert_eq!(pair.target.len(), 210);
    }

    #[test]
    fn too_few_lines() {
        let lines = base_lines(1, 19);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(matches!(
            make_scene_pair(&mut rng, &lines, 0.7, &NoiseConfig::default(), &PoseRanges::default(), 0),
            Err(Error::TooFewLines { .. })
        ));
    }

    #[test]
    fn residuals_bounded_under_default_noise() {
        let spec = SceneSpec::default();
        let bound = 2.0 * (0.25 * 3f64.sqrt() + 2.0 * (2.5f64).to_radians().sin());
        let mut res = Vec::new();
        for k in 0..100 {
            res.extend(synth_scene(&spec, 77, k).unwrap().gt_residuals());
        }
        res.sort_by(f64::total_cmp);
        let p99 = res[(res.len() as f64 * 0.99) as usize];
        assert!(p99 < bound, "p99 {p99} bound {bound}");
    }

    #[test]
    fn same_seed_same_scene() {
        let spec = SceneSpec::default();
        assert_eq!(synth_scene(&spec, 4, 2).unwrap(), synth_scene(&spec, 4, 2).unwrap());
        assert_ne!(synth_scene(&spec, 4, 2).unwrap(), synth_scene(&spec, 4, 3).unwrap());
    }
}
