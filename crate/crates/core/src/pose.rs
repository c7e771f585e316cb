//! Pose recovery from line correspondences.
//!
//! Rotation comes from the orthogonal Procrustes problem on line directions,
//! translation from the stacked moment equations `[R v]ₓᵀ t = m' − R m`.
//! A pair of lines fixes the pose up to a discrete ambiguity, so the minimal
//! solver returns every sign-consistent candidate and RANSAC scores them.

use nalgebra::{DMatrix, DVector, Matrix3, Matrix4, Quaternion, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ot::MatchList;
use crate::plucker::{line_distance_unsigned, skew, transform_line, PluckerLine, RigidTransform};

/// Singular values below this mark a degenerate system.
pub const SINGULAR_EPS: f64 = 1e-9;
/// Minimum angle between the two source directions of a minimal sample, radians.
pub const MIN_PAIR_ANGLE: f64 = 1e-4;
pub const MAX_REFINE_ROUNDS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RansacConfig {
    pub iterations: usize,
    /// Inlier threshold on the line score, meters.
    pub inlier_threshold: f64,
    pub min_inliers: usize,
    pub seed: u64,
    /// Fix `det R = -1` by negating `R` instead of flipping the weakest singular direction.
    #[serde(default)]
    pub divide_by_det: bool,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            iterations: 1000,
            inlier_threshold: 0.5,
            min_inliers: 2,
            seed: 0,
            divide_by_det: false,
        }
    }
}

impl RansacConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || !(self.inlier_threshold > 0.0) {
            return Err(Error::Config("RANSAC needs iterations >= 1 and a positive threshold".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegistrationResult {
    pub pose: RigidTransform,
    /// `(source, target)` index pairs accepted as inliers.
    pub inlier_pairs: Vec<(usize, usize)>,
    pub score_sum: f64,
    pub hypothesis_count: usize,
}

/// Closest rotation to `M = Σ v' vᵀ` over the given `(v, v')` pairs.
pub fn rotation_from_directions(pairs: &[(Vector3<f64>, Vector3<f64>)]) -> Result<Matrix3<f64>> {
    rotation_from_directions_with(pairs, false)
}

pub fn rotation_from_directions_with(
    pairs: &[(Vector3<f64>, Vector3<f64>)],
    divide_by_det: bool,
) -> Result<Matrix3<f64>> {
    if pairs.len() < 2 {
        return Err(Error::DegenerateDirections);
    }
    let m: Matrix3<f64> = pairs.iter().map(|(v, vp)| vp * v.transpose()).sum();
    procrustes(&m, divide_by_det)
}

fn procrustes(m: &Matrix3<f64>, divide_by_det: bool) -> Result<Matrix3<f64>> {
    let sv = m.singular_values();
    let mut sorted = [sv[0], sv[1], sv[2]];
    sorted.sort_by(f64::total_cmp);
    if sorted[0] < SINGULAR_EPS && sorted[1] < SINGULAR_EPS {
        return Err(Error::DegenerateDirections);
    }
    if divide_by_det {
        let svd = m.svd(true, true);
        let r = svd.u.expect("u requested") * svd.v_t.expect("v_t requested");
        let det = r.determinant();
        return Ok(if det >= 0.0 { r } else { r / det });
    }
    Ok(closest_rotation(m))
}

/// Rotation maximizing `tr(Rᵀ M)`, as the top eigenvector of the 4x4 quaternion form.
fn closest_rotation(m: &Matrix3<f64>) -> Matrix3<f64> {
    let s = m.transpose();
    let (xx, xy, xz) = (s[(0, 0)], s[(0, 1)], s[(0, 2)]);
    let (yx, yy, yz) = (s[(1, 0)], s[(1, 1)], s[(1, 2)]);
    let (zx, zy, zz) = (s[(2, 0)], s[(2, 1)], s[(2, 2)]);
    let n = Matrix4::new(
        xx + yy + zz, yz - zy, zx - xz, xy - yx,
        yz - zy, xx - yy - zz, xy + yx, zx + xz,
        zx - xz, xy + yx, -xx + yy - zz, yz + zy,
        xy - yx, zx + xz, yz + zy, -xx - yy + zz,
    );
    let eig = n.symmetric_eigen();
    let top = eig.eigenvalues.imax();
    let q = eig.eigenvectors.column(top);
    UnitQuaternion::from_quaternion(Quaternion::new(q[0], q[1], q[2], q[3]))
        .to_rotation_matrix()
        .into_inner()
}

/// Least-squares translation given `R` for the stacked system, solved by QR.
///
/// Each target line is used with the orientation that agrees with `R v`, so
/// canonical (unoriented) inputs work.
pub fn translation_least_squares(
    r: &Matrix3<f64>,
    pairs: &[(PluckerLine, PluckerLine)],
) -> Result<Vector3<f64>> {
    let n = pairs.len();
    let mut a = DMatrix::zeros(3 * n, 3);
    let mut b = DVector::zeros(3 * n);
    for (k, (src, dst)) in pairs.iter().enumerate() {
        let rv = r * src.direction();
        let s = orientation(&rv, &dst.direction());
        a.view_mut((3 * k, 0), (3, 3)).copy_from(&skew(&rv).transpose());
        b.rows_mut(3 * k, 3)
            .copy_from(&(dst.moment() * s - r * src.moment()));
    }
    if n == 0 {
        return Err(Error::RankDeficient(0.0));
    }
    let smallest = a.singular_values().iter().copied().fold(f64::INFINITY, f64::min);
    if smallest < SINGULAR_EPS {
        return Err(Error::RankDeficient(smallest));
    }
    let qr = a.qr();
    let t = qr
        .r()
        .solve_upper_triangular(&(qr.q().transpose() * b))
        .ok_or(Error::RankDeficient(smallest))?;
    Ok(Vector3::new(t[0], t[1], t[2]))
}

fn orientation(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    if a.dot(b) < 0.0 {
        -1.0
    } else {
        1.0
    }
}

/// Score of a correspondence under `pose`: the sign-invariant distance between
/// the target line and the transported source line.
pub fn score(pose: &RigidTransform, src: &PluckerLine, dst: &PluckerLine) -> f64 {
    line_distance_unsigned(dst, &transform_line(pose, src))
}

fn directions_parallel(a: &Vector3<f64>, b: &Vector3<f64>) -> bool {
    a.cross(b).norm().asin() < MIN_PAIR_ANGLE
}

/// Pose candidates from two line correspondences, best two-pair fit first.
///
/// Both sign assignments of the target directions are tried, so every
/// rigid motion consistent with the two unoriented correspondences is
/// among the candidates.
pub fn two_line_solver(
    pair_a: (&PluckerLine, &PluckerLine),
    pair_b: (&PluckerLine, &PluckerLine),
) -> Result<Vec<RigidTransform>> {
    two_line_solver_with(pair_a, pair_b, false)
}

pub fn two_line_solver_with(
    pair_a: (&PluckerLine, &PluckerLine),
    pair_b: (&PluckerLine, &PluckerLine),
    divide_by_det: bool,
) -> Result<Vec<RigidTransform>> {
    let (va, vb) = (pair_a.0.direction(), pair_b.0.direction());
    if directions_parallel(&va, &vb) {
        return Err(Error::DegenerateDirections);
    }
    let (wa, wb) = (pair_a.1.direction(), pair_b.1.direction());
    let pairs = [(*pair_a.0, *pair_a.1), (*pair_b.0, *pair_b.1)];
    let mut out = Vec::with_capacity(4);
    for (sa, sb) in [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)] {
        let r = rotation_from_directions_with(&[(va, wa * sa), (vb, wb * sb)], divide_by_det)?;
        let t = translation_least_squares(&r, &pairs)?;
        let g = RigidTransform::new(r, t);
        let fit = score(&g, pair_a.0, pair_a.1) + score(&g, pair_b.0, pair_b.1);
        out.push((fit, g));
    }
    out.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(out.into_iter().map(|(_, g)| g).collect())
}

/// Re-estimates `R` and `t` from all pairs, orienting targets to agree with `reference`.
pub fn estimate_from_pairs(
    reference: &Matrix3<f64>,
    pairs: &[(PluckerLine, PluckerLine)],
    divide_by_det: bool,
) -> Result<RigidTransform> {
    let dirs: Vec<_> = pairs
        .iter()
        .map(|(s, d)| {
            let v = s.direction();
            (v, d.direction() * orientation(&(reference * v), &d.direction()))
        })
        .collect();
    let r = rotation_from_directions_with(&dirs, divide_by_det)?;
    let t = translation_least_squares(&r, pairs)?;
    Ok(RigidTransform::new(r, t))
}

fn inliers(pose: &RigidTransform, pairs: &[(PluckerLine, PluckerLine)], eps: f64) -> (Vec<usize>, f64) {
    let mut idx = Vec::new();
    let mut sum = 0.0;
    for (k, (s, d)) in pairs.iter().enumerate() {
        let e = score(pose, s, d);
        if e < eps {
            idx.push(k);
            sum += e;
        }
    }
    (idx, sum)
}

fn total_score(pose: &RigidTransform, pairs: &[(PluckerLine, PluckerLine)], idx: &[usize]) -> f64 {
    idx.iter().map(|&k| score(pose, &pairs[k].0, &pairs[k].1)).sum()
}

/// Summed score over one round's inlier set, before and after re-estimation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoundScore {
    pub before: f64,
    pub after: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Refinement {
    pub pose: RigidTransform,
    pub inliers: Vec<usize>,
    /// Accepted rounds only.
    pub rounds: Vec<RoundScore>,
}

/// Alternates closed-form re-estimation on all inliers with inlier re-selection.
///
/// A round is accepted only if it does not raise the summed score over the
/// current inlier set. If the final pose scores worse than `pose0` on the final
/// inlier set, `pose0` is kept.
pub fn refine(
    pose0: &RigidTransform,
    pairs: &[(PluckerLine, PluckerLine)],
    eps: f64,
    divide_by_det: bool,
) -> Refinement {
    let (start_inliers, _) = inliers(pose0, pairs, eps);
    let mut pose = *pose0;
    let mut inl = start_inliers.clone();
    let mut rounds = Vec::new();
    for _ in 0..MAX_REFINE_ROUNDS {
        if inl.len() < 2 {
            break;
        }
        let subset: Vec<_> = inl.iter().map(|&k| pairs[k]).collect();
        let Ok(cand) = estimate_from_pairs(&pose.rotation, &subset, divide_by_det) else {
            break;
        };
        let old = total_score(&pose, pairs, &inl);
        let new = total_score(&cand, pairs, &inl);
        if !(new <= old) {
            break;
        }
        pose = cand;
        rounds.push(RoundScore { before: old, after: new });
        let (next, _) = inliers(&pose, pairs, eps);
        if next == inl {
            break;
        }
        inl = next;
    }
    if total_score(&pose, pairs, &inl) > total_score(pose0, pairs, &inl) {
        return Refinement {
            pose: *pose0,
            inliers: start_inliers,
            rounds: Vec::new(),
        };
    }
    Refinement {
        pose,
        inliers: inl,
        rounds,
    }
}

/// RANSAC over uniformly sampled pairs of matches, followed by [`refine`].
pub fn ransac_register(
    matches: &MatchList,
    src: &[PluckerLine],
    dst: &[PluckerLine],
    cfg: &RansacConfig,
) -> Result<RegistrationResult> {
    cfg.validate()?;
    let pairs: Vec<(PluckerLine, PluckerLine)> = matches
        .iter()
        .map(|m| {
            if m.source >= src.len() || m.target >= dst.len() {
                Err(Error::Config(format!("match ({}, {}) out of range", m.source, m.target)))
            } else {
                Ok((src[m.source], dst[m.target]))
            }
        })
        .collect::<Result<_>>()?;
    let n = pairs.len();
    if n < 2 {
        return Err(Error::NoValidHypothesis);
    }
    let eps = cfg.inlier_threshold;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<(usize, f64, RigidTransform)> = None;
    let mut hypotheses = 0;
    let max_attempts = cfg.iterations.saturating_mul(10);
    let mut attempts = 0;
    while hypotheses < cfg.iterations && attempts < max_attempts {
        attempts += 1;
        let i = rng.random_range(0..n);
        let mut j = rng.random_range(0..n - 1);
        if j >= i {
            j += 1;
        }
        let (a, b) = (&pairs[i], &pairs[j]);
        if directions_parallel(&a.0.direction(), &b.0.direction())
            || directions_parallel(&a.1.direction(), &b.1.direction())
        {
            continue;
        }
        let Ok(cands) = two_line_solver_with((&a.0, &a.1), (&b.0, &b.1), cfg.divide_by_det) else {
            continue;
        };
        hypotheses += 1;
        for g in cands {
            let (idx, sum) = inliers(&g, &pairs, eps);
            let better = match &best {
                None => true,
                Some((c, s, _)) => idx.len() > *c || (idx.len() == *c && sum < *s),
            };
            if better {
                best = Some((idx.len(), sum, g));
            }
        }
    }
    let Some((count, _, pose0)) = best else {
        return Err(Error::NoValidHypothesis);
    };
    if count < cfg.min_inliers.max(2) {
        return Err(Error::NoValidHypothesis);
    }
    let refined = refine(&pose0, &pairs, eps, cfg.divide_by_det);
    let score_sum = total_score(&refined.pose, &pairs, &refined.inliers);
    Ok(RegistrationResult {
        pose: refined.pose,
        inlier_pairs: refined
            .inliers
            .iter()
            .map(|&k| (matches.0[k].source, matches.0[k].target))
            .collect(),
        score_sum,
        hypothesis_count: hypotheses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ot::Match;
    use crate::plucker::{canonicalize, from_point_direction, rotation_error, translation_error};
    use crate::scene::{perturb_line, NoiseConfig};
    use rand_distr::{Distribution, UnitSphere};

    fn unit(rng: &mut impl Rng) -> Vector3<f64> {
        Vector3::from(UnitSphere.sample(rng))
    }

    #[test]
    fn nearly_parallel_pairs_stay_exact() {
        let va = Vector3::new(0.9202200855024849, 0.37700367206954505, -0.10518186860803737);
        let vb = Vector3::new(0.9083488251681864, 0.3945824786943043, -0.13858960755783511);
        let g = RigidTransform::from_axis_angle(&Vector3::new(1.0, 2.0, 2.0).normalize(), 2.46, Vector3::new(0.3, -1.2, 0.7));
        let a = from_point_direction(&Vector3::new(1.0, -2.0, 0.5), &va).unwrap();
        let b = from_point_direction(&Vector3::new(-3.0, 1.0, 2.0), &vb).unwrap();
        let pairs = [(a, transform_line(&g, &a)), (b, transform_line(&g, &b))];
        let t = translation_least_squares(&g.rotation, &pairs).unwrap();
        assert!((t - g.translation).norm() < 1e-12);
        let r = rotation_from_directions(&[(va, g.rotation * va), (vb, g.rotation * vb)]).unwrap();
        assert!(rotation_error(&g.rotation, &r) < 1e-9);
    }

    fn line(rng: &mut impl Rng) -> PluckerLine {
        let p = Vector3::from_fn(|_, _| rng.random_range(-5.0..5.0));
        from_point_direction(&p, &unit(rng)).unwrap()
    }

    fn pose(rng: &mut impl Rng) -> RigidTransform {
        RigidTransform::from_axis_angle(
            &unit(rng),
            rng.random_range(0.0..3.1),
            Vector3::from_fn(|_, _| rng.random_range(-2.0..2.0)),
        )
    }

    fn e(i: usize) -> Vector3<f64> {
        let mut v = Vector3::zeros();
        v[i] = 1.0;
        v
    }

    #[test]
    fn rotation_examples() {
        let r = rotation_from_directions(&[(e(0), e(0)), (e(1), e(1))]).unwrap();
        assert!((r - Matrix3::identity()).amax() < 1e-12);

        let r = rotation_from_directions(&[(e(0), e(1)), (e(1), e(2))]).unwrap();
        assert!((r * e(0) - e(1)).norm() < 1e-12);
        assert!((r * e(1) - e(2)).norm() < 1e-12);
        assert!((r * e(2) - e(0)).norm() < 1e-12);
        assert!((r.determinant() - 1.0).abs() < 1e-12);
        assert!((r.transpose() * r - Matrix3::identity()).amax() < 1e-12);
    }

    #[test]
    fn rotation_recovered_from_many_directions() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let g = pose(&mut rng);
            let pairs: Vec<_> = (0..5)
                .map(|_| {
                    let v = unit(&mut rng);
                    (v, g.rotation * v)
                })
                .collect();
            let r = rotation_from_directions(&pairs).unwrap();
            assert!((r - g.rotation).amax() < 1e-9);
        }
    }

    #[test]
    fn parallel_directions_are_degenerate() {
        let v = Vector3::new(0.3, 0.4, 0.5).normalize();
        assert!(matches!(
            rotation_from_directions(&[(v, v), (v, v)]),
            Err(Error::DegenerateDirections)
        ));
    }

    #[test]
    fn reflection_fix_modes() {
        // M with det(UVᵀ) = -1: directions mapped by a reflection
        let refl = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0));
        let pairs: Vec<_> = [e(0), e(1), e(2), Vector3::new(1.0, 1.0, 1.0).normalize()]
            .iter()
            .map(|v| (*v, refl * v))
            .collect();
        let standard = rotation_from_directions_with(&pairs, false).unwrap();
        let literal = rotation_from_directions_with(&pairs, true).unwrap();
        assert!((standard.determinant() - 1.0).abs() < 1e-12);
        assert!((literal.determinant() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn translation_example() {
        let l1 = canonicalize(e(0), Vector3::zeros()).unwrap();
        let l2 = canonicalize(e(1), Vector3::zeros()).unwrap();
        let t1 = canonicalize(e(0), Vector3::new(0.0, 3.0, -2.0)).unwrap();
        let t2 = canonicalize(e(1), Vector3::new(-3.0, 0.0, 1.0)).unwrap();
        let t = translation_least_squares(&Matrix3::identity(), &[(l1, t1), (l2, t2)]).unwrap();
        assert!((t - Vector3::new(1.0, 2.0, 3.0)).norm() < 1e-12);

        let t = translation_least_squares(&Matrix3::identity(), &[(l1, l1), (l2, l2)]).unwrap();
        assert!(t.norm() < 1e-12);

        let p1 = canonicalize(e(0), Vector3::new(0.0, 1.0, 0.0)).unwrap();
        assert!(matches!(
            translation_least_squares(&Matrix3::identity(), &[(l1, l1), (p1, p1)]),
            Err(Error::RankDeficient(_))
        ));
    }

    #[test]
    fn two_line_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (a, b) = (line(&mut rng), line(&mut rng));
        let cands = two_line_solver((&a, &a), (&b, &b)).unwrap();
        let best = cands[0];
        assert!((best.rotation - Matrix3::identity()).amax() < 1e-9);
        assert!(best.translation.norm() < 1e-9);
    }

    #[test]
    fn two_line_exact_recovery() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..500 {
            let g = pose(&mut rng);
            let (a, b) = (line(&mut rng), line(&mut rng));
            let (ta, tb) = (transform_line(&g, &a), transform_line(&g, &b));
            let cands = two_line_solver((&a, &ta), (&b, &tb)).unwrap();
            let best = cands
                .iter()
                .map(|c| {
                    (
                        rotation_error(&g.rotation, &c.rotation),
                        translation_error(&g.translation, &c.translation),
                    )
                })
                .min_by(|x, y| x.0.total_cmp(&y.0))
                .unwrap();
            assert!(best.0 < 1e-8 && best.1 < 1e-8, "{best:?}");
            // the leading candidates fit both correspondences exactly
            assert!(score(&cands[0], &a, &ta) < 1e-9 && score(&cands[0], &b, &tb) < 1e-9);
        }
    }

    #[test]
    fn two_line_parallel_rejected() {
        let a = canonicalize(e(0), Vector3::zeros()).unwrap();
        let b = canonicalize(e(0), Vector3::new(0.0, 0.0, 1.0)).unwrap();
        assert!(matches!(
            two_line_solver((&a, &a), (&b, &b)),
            Err(Error::DegenerateDirections)
        ));
    }

    #[test]
    fn score_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = pose(&mut rng);
        let l = line(&mut rng);
        assert!(score(&g, &l, &transform_line(&g, &l)) < 1e-12);
        assert_eq!(score(&RigidTransform::identity(), &l, &l), 0.0);
    }

    fn contaminated(
        rng: &mut impl Rng,
        g: &RigidTransform,
        n_in: usize,
        n_out: usize,
    ) -> (MatchList, Vec<PluckerLine>, Vec<PluckerLine>) {
        let mut src = Vec::new();
        let mut dst = Vec::new();
        for _ in 0..n_in {
            let l = line(rng);
            src.push(l);
            dst.push(transform_line(g, &l));
        }
        for _ in 0..n_out {
            src.push(line(rng));
            dst.push(line(rng));
        }
        let matches = MatchList(
            (0..n_in + n_out)
                .map(|k| Match {
                    source: k,
                    target: k,
                    weight: 1.0,
                })
                .collect(),
        );
        (matches, src, dst)
    }

    #[test]
    fn ransac_with_half_outliers() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = pose(&mut rng);
        let (m, src, dst) = contaminated(&mut rng, &g, 100, 100);
        let res = ransac_register(&m, &src, &dst, &RansacConfig::default()).unwrap();
        assert!(rotation_error(&g.rotation, &res.pose.rotation) < 1e-3);
        assert!((0..100).all(|k| res.inlier_pairs.contains(&(k, k))));
        let again = ransac_register(&m, &src, &dst, &RansacConfig::default()).unwrap();
        assert_eq!(res, again);
    }

    #[test]
    fn ransac_needs_two_matches() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (m, src, dst) = contaminated(&mut rng, &RigidTransform::identity(), 1, 0);
        assert!(ransac_register(&m, &src, &dst, &RansacConfig::default()).is_err());
    }

    #[test]
    fn refinement_fixed_point_on_exact_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let g = pose(&mut rng);
        let pairs: Vec<_> = (0..20)
            .map(|_| {
                let l = line(&mut rng);
                (l, transform_line(&g, &l))
            })
            .collect();
        let out = refine(&g, &pairs, 0.5, false);
        assert!((out.pose.rotation - g.rotation).amax() < 1e-9);
        assert!((out.pose.translation - g.translation).norm() < 1e-9);
        assert_eq!(out.inliers.len(), 20);
        let again = refine(&out.pose, &pairs, 0.5, false);
        assert_eq!(again.inliers, out.inliers);
    }

    #[test]
    fn refinement_score_non_increasing() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let noise = NoiseConfig::default();
        for _ in 0..20 {
            let g = pose(&mut rng);
            let pairs: Vec<_> = (0..40)
                .map(|_| {
                    let l = line(&mut rng);
                    (perturb_line(&mut rng, &l, &noise), perturb_line(&mut rng, &transform_line(&g, &l), &noise))
                })
                .collect();
            let start = RigidTransform::from_axis_angle(&unit(&mut rng), 0.02, Vector3::zeros()).compose(&g);
            let out = refine(&start, &pairs, 0.5, false);
            for r in &out.rounds {
                assert!(r.after <= r.before);
            }
            let before: f64 = out.inliers.iter().map(|&k| score(&start, &pairs[k].0, &pairs[k].1)).sum();
            let after: f64 = out.inliers.iter().map(|&k| score(&out.pose, &pairs[k].0, &pairs[k].1)).sum();
            assert!(after <= before + 1e-12);
        }
    }
}
