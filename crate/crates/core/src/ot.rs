//! Optimal-transport line matching.
//!
//! Feature distances become a rectangular joint probability matrix `W` whose
//! row and column sums are the two matchability histograms. `W` is computed by
//! Sinkhorn scaling of the Gibbs kernel `exp(-H / λ)`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Scaling denominators below this are reported as underflow.
pub const UNDERFLOW_EPS: f64 = 1e-300;
/// Clamp applied to `W` inside the loss logarithms.
pub const LOSS_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct SinkhornConfig {
    pub lambda: f64,
    pub iterations: usize,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            iterations: 30,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix(pub DMatrix<f64>);

#[derive(Debug, Clone, PartialEq)]
pub struct MatchWeightMatrix(pub DMatrix<f64>);

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Match {
    pub source: usize,
    pub target: usize,
    pub weight: f64,
}

/// Matches in descending weight order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MatchList(pub Vec<Match>);

impl MatchList {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Match> {
        self.0.iter()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("source_idx,target_idx,weight\n");
        for m in &self.0 {
            out.push_str(&format!("{},{},{:.17e}\n", m.source, m.target, m.weight));
        }
        out
    }
}

/// Pairwise Euclidean distances between the rows of `fx` (M×D) and `fy` (N×D).
pub fn cost_matrix(fx: &DMatrix<f64>, fy: &DMatrix<f64>) -> CostMatrix {
    assert_eq!(fx.ncols(), fy.ncols(), "feature widths differ");
    let (m, n) = (fx.nrows(), fy.nrows());
    CostMatrix(DMatrix::from_fn(m, n, |i, j| {
        (fx.row(i) - fy.row(j)).norm()
    }))
}

fn check_inputs(h: &CostMatrix, r: &[f64], s: &[f64], cfg: &SinkhornConfig) -> Result<()> {
    if r.len() != h.0.nrows() || s.len() != h.0.ncols() {
        return Err(Error::Config(format!(
            "histogram lengths ({}, {}) do not match cost matrix {}x{}",
            r.len(),
            s.len(),
            h.0.nrows(),
            h.0.ncols()
        )));
    }
    if !(cfg.lambda > 0.0) || cfg.iterations == 0 {
        return Err(Error::Config("sinkhorn needs lambda > 0 and at least one iteration".into()));
    }
    Ok(())
}

/// Sinkhorn scaling in the scaled (non-log) domain.
///
/// The kernel is normalized once by its total sum, then `a = r ⊘ (Υ b)` and
/// `b = s ⊘ (Υᵀ a)` alternate from `b = 1`. Any denominator below
/// [`UNDERFLOW_EPS`] is reported instead of clamped.
pub fn sinkhorn(h: &CostMatrix, r: &[f64], s: &[f64], cfg: &SinkhornConfig) -> Result<MatchWeightMatrix> {
    check_inputs(h, r, s, cfg)?;
    let mut k = h.0.map(|x| (-x / cfg.lambda).exp());
    let total = k.sum();
    if !(total > UNDERFLOW_EPS) {
        return Err(Error::NumericalUnderflow(total));
    }
    k /= total;
    let r = DVector::from_column_slice(r);
    let s = DVector::from_column_slice(s);
    let mut b = DVector::from_element(h.0.ncols(), 1.0);
    let mut a = DVector::zeros(h.0.nrows());
    for _ in 0..cfg.iterations {
        let kb = &k * &b;
        if let Some(&bad) = kb.iter().find(|&&x| !(x >= UNDERFLOW_EPS)) {
            return Err(Error::NumericalUnderflow(bad));
        }
        a = r.component_div(&kb);
        let kta = k.tr_mul(&a);
        if let Some(&bad) = kta.iter().find(|&&x| !(x >= UNDERFLOW_EPS)) {
            return Err(Error::NumericalUnderflow(bad));
        }
        b = s.component_div(&kta);
    }
    let mut w = k;
    for i in 0..w.nrows() {
        for j in 0..w.ncols() {
            w[(i, j)] *= a[i] * b[j];
        }
    }
    Ok(MatchWeightMatrix(w))
}

fn log_sum_exp(it: impl Iterator<Item = f64> + Clone) -> f64 {
    let mx = it.clone().fold(f64::NEG_INFINITY, f64::max);
    if mx == f64::NEG_INFINITY {
        return mx;
    }
    mx + it.map(|x| (x - mx).exp()).sum::<f64>().ln()
}

/// The same iteration carried out on logarithms of the scalings.
pub fn sinkhorn_log(h: &CostMatrix, r: &[f64], s: &[f64], cfg: &SinkhornConfig) -> Result<MatchWeightMatrix> {
    check_inputs(h, r, s, cfg)?;
    let (m, n) = h.0.shape();
    let mut logk = h.0.map(|x| -x / cfg.lambda);
    let lz = log_sum_exp(logk.iter().copied());
    logk.add_scalar_mut(-lz);
    let log_r: Vec<f64> = r.iter().map(|x| x.ln()).collect();
    let log_s: Vec<f64> = s.iter().map(|x| x.ln()).collect();
    let mut log_a = vec![0.0; m];
    let mut log_b = vec![0.0; n];
    for _ in 0..cfg.iterations {
        for i in 0..m {
            log_a[i] = log_r[i] - log_sum_exp((0..n).map(|j| logk[(i, j)] + log_b[j]));
        }
        for j in 0..n {
            log_b[j] = log_s[j] - log_sum_exp((0..m).map(|i| logk[(i, j)] + log_a[i]));
        }
    }
    Ok(MatchWeightMatrix(DMatrix::from_fn(m, n, |i, j| {
        (log_a[i] + logk[(i, j)] + log_b[j]).exp()
    })))
}

/// Scaled-domain Sinkhorn, falling back to the log domain on underflow.
pub fn sinkhorn_robust(h: &CostMatrix, r: &[f64], s: &[f64], cfg: &SinkhornConfig) -> Result<MatchWeightMatrix> {
    match sinkhorn(h, r, s, cfg) {
        Err(Error::NumericalUnderflow(_)) => sinkhorn_log(h, r, s, cfg),
        other => other,
    }
}

impl MatchWeightMatrix {
    pub fn row_sums(&self) -> Vec<f64> {
        self.0.row_iter().map(|r| r.sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        self.0.column_iter().map(|c| c.sum()).collect()
    }

    /// Shannon entropy `-Σ W log W`.
    pub fn entropy(&self) -> f64 {
        -self.0.iter().filter(|&&w| w > 0.0).map(|w| w * w.ln()).sum::<f64>()
    }
}

/// The `k` largest entries, descending; ties go to the smaller `(i, j)`.
pub fn topk(w: &MatchWeightMatrix, k: usize) -> Result<MatchList> {
    let (rows, cols) = w.0.shape();
    if k > rows * cols {
        return Err(Error::KTooLarge { k, rows, cols });
    }
    let mut all: Vec<Match> = (0..rows)
        .flat_map(|i| (0..cols).map(move |j| (i, j)))
        .map(|(i, j)| Match {
            source: i,
            target: j,
            weight: w.0[(i, j)],
        })
        .collect();
    all.sort_by(|a, b| {
        b.weight
            .total_cmp(&a.weight)
            .then(a.source.cmp(&b.source))
            .then(a.target.cmp(&b.target))
    });
    all.truncate(k);
    Ok(MatchList(all))
}

/// Balanced negative log-likelihood of true and false correspondences.
///
/// `truth[i][j]` marks ground-truth pairs; at least one must be set.
pub fn matching_loss(w: &MatchWeightMatrix, truth: &[Vec<bool>]) -> Result<f64> {
    let (rows, cols) = w.0.shape();
    if truth.len() != rows || truth.iter().any(|r| r.len() != cols) {
        return Err(Error::Config("correspondence matrix shape mismatch".into()));
    }
    let n_true = truth.iter().flatten().filter(|&&c| c).count();
    if n_true == 0 {
        return Err(Error::Config("matching loss needs at least one true pair".into()));
    }
    let n_false = rows * cols - n_true;
    let (mut lt, mut lf) = (0.0, 0.0);
    for i in 0..rows {
        for j in 0..cols {
            let x = w.0[(i, j)].clamp(LOSS_CLAMP, 1.0 - LOSS_CLAMP);
            if truth[i][j] {
                lt -= x.ln();
            } else {
                lf -= (1.0 - x).ln();
            }
        }
    }
    let mut loss = lt / n_true as f64;
    if n_false > 0 {
        loss += lf / n_false as f64;
    }
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_hist(rng: &mut impl Rng, n: usize) -> Vec<f64> {
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..1.0)).collect();
        let s: f64 = v.iter().sum();
        v.into_iter().map(|x| x / s).collect()
    }

    fn random_unit_rows(rng: &mut impl Rng, n: usize, d: usize) -> DMatrix<f64> {
        let mut f = DMatrix::from_fn(n, d, |_, _| rng.random_range(-1.0..1.0));
        for mut row in f.row_iter_mut() {
            let nrm = row.norm();
            row /= nrm;
        }
        f
    }

    #[test]
    fn cost_examples() {
        let f = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let h = cost_matrix(&f, &f);
        assert_eq!(h.0[(0, 0)], 0.0);
        assert_eq!(h.0[(1, 1)], 0.0);
        assert!((h.0[(0, 1)] - 2f64.sqrt()).abs() < 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_unit_rows(&mut rng, 7, 5);
        let b = random_unit_rows(&mut rng, 4, 5);
        let h = cost_matrix(&a, &b);
        for i in 0..7 {
            for j in 0..4 {
                let mut acc = 0.0;
                for d in 0..5 {
                    acc += (a[(i, d)] - b[(j, d)]).powi(2);
                }
                assert!((h.0[(i, j)] - acc.sqrt()).abs() < 1e-14);
                assert!((0.0..=2.0).contains(&h.0[(i, j)]));
            }
        }
    }

    #[test]
    fn constant_cost_uniform_plan() {
        let h = CostMatrix(DMatrix::from_element(2, 2, 0.7));
        let w = sinkhorn(&h, &[0.5, 0.5], &[0.5, 0.5], &SinkhornConfig::default()).unwrap();
        for x in w.0.iter() {
            assert!((x - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn marginals_after_default_iterations() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let (m, n) = (rng.random_range(5..40), rng.random_range(5..40));
            let h = cost_matrix(&random_unit_rows(&mut rng, m, 32), &random_unit_rows(&mut rng, n, 32));
            let (r, s) = (random_hist(&mut rng, m), random_hist(&mut rng, n));
            let w = sinkhorn(&h, &r, &s, &SinkhornConfig::default()).unwrap();
            let rs = w.row_sums();
            let cs = w.col_sums();
            for i in 0..m {
                assert!((rs[i] - r[i]).abs() < 1e-6);
            }
            for j in 0..n {
                assert!((cs[j] - s[j]).abs() < 1e-6);
            }
            assert!((w.0.sum() - 1.0).abs() < 1e-6);
            assert!(w.0.iter().all(|&x| x >= 0.0));
        }
    }

    #[test]
    fn log_domain_agrees() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = cost_matrix(&random_unit_rows(&mut rng, 9, 8), &random_unit_rows(&mut rng, 12, 8));
        let (r, s) = (random_hist(&mut rng, 9), random_hist(&mut rng, 12));
        let cfg = SinkhornConfig::default();
        let a = sinkhorn(&h, &r, &s, &cfg).unwrap();
        let b = sinkhorn_log(&h, &r, &s, &cfg).unwrap();
        assert!((a.0 - b.0).amax() < 1e-12);
    }

    #[test]
    fn underflow_is_reported_and_recovered() {
        let mut h = DMatrix::from_element(3, 3, 2.0);
        h[(0, 0)] = 0.0;
        let h = CostMatrix(h);
        let u = [1.0 / 3.0; 3];
        let cfg = SinkhornConfig {
            lambda: 1e-3,
            iterations: 30,
        };
        assert!(matches!(sinkhorn(&h, &u, &u, &cfg), Err(Error::NumericalUnderflow(_))));
        let w = sinkhorn_robust(&h, &u, &u, &cfg).unwrap();
        assert!(w.0.iter().all(|x| x.is_finite()));
        assert!((w.0.sum() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn shift_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let h = cost_matrix(&random_unit_rows(&mut rng, 6, 4), &random_unit_rows(&mut rng, 8, 4));
        let (r, s) = (random_hist(&mut rng, 6), random_hist(&mut rng, 8));
        let cfg = SinkhornConfig::default();
        let a = sinkhorn(&h, &r, &s, &cfg).unwrap();
        let b = sinkhorn(&CostMatrix(h.0.add_scalar(0.37)), &r, &s, &cfg).unwrap();
        assert!((a.0 - b.0).amax() < 1e-12);
    }

    #[test]
    fn entropy_decreases_with_lambda() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let h = cost_matrix(&random_unit_rows(&mut rng, 10, 6), &random_unit_rows(&mut rng, 10, 6));
            let (r, s) = (random_hist(&mut rng, 10), random_hist(&mut rng, 10));
            let ent: Vec<f64> = [1.0, 0.5, 0.1, 0.05]
                .iter()
                .map(|&lambda| {
                    sinkhorn_robust(&h, &r, &s, &SinkhornConfig { lambda, iterations: 200 })
                        .unwrap()
                        .entropy()
                })
                .collect();
            for w in ent.windows(2) {
                assert!(w[1] <= w[0] + 1e-9, "{ent:?}");
            }
        }
    }

    #[test]
    fn topk_examples() {
        let mut w = DMatrix::zeros(3, 4);
        w[(2, 1)] = 0.5;
        let l = topk(&MatchWeightMatrix(w.clone()), 3).unwrap();
        assert_eq!((l.0[0].source, l.0[0].target), (2, 1));
        // remaining ties in row-major order
        assert_eq!((l.0[1].source, l.0[1].target), (0, 0));
        assert_eq!((l.0[2].source, l.0[2].target), (0, 1));
        let full = topk(&MatchWeightMatrix(w.clone()), 12).unwrap();
        assert_eq!(full.len(), 12);
        assert!(matches!(
            topk(&MatchWeightMatrix(w), 13),
            Err(Error::KTooLarge { .. })
        ));
    }

    #[test]
    fn topk_is_sorted_prefix() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let w = MatchWeightMatrix(DMatrix::from_fn(20, 30, |_, _| rng.random::<f64>()));
        let top = topk(&w, 200).unwrap();
        let mut flat: Vec<f64> = w.0.iter().copied().collect();
        flat.sort_by(|a, b| b.total_cmp(a));
        for (m, v) in top.iter().zip(flat) {
            assert_eq!(m.weight, v);
            assert_eq!(w.0[(m.source, m.target)], v);
        }
    }

    #[test]
    fn loss_examples() {
        let truth = vec![vec![true, false], vec![false, false]];
        let w = MatchWeightMatrix(DMatrix::from_element(2, 2, 0.25));
        let l = matching_loss(&w, &truth).unwrap();
        // direct arithmetic: -ln 0.25 + (1/3) * 3 * (-ln 0.75)
        let expect = -(0.25f64).ln() - (0.75f64).ln();
        assert!((l - expect).abs() < 1e-12);
        assert!((l - 1.6740).abs() < 1e-4);

        let w = MatchWeightMatrix(DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]));
        assert!(matching_loss(&w, &truth).unwrap() < 1e-11);
        assert!(matching_loss(&w, &[vec![false; 2], vec![false; 2]]).is_err());
        let w = MatchWeightMatrix(DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 1.0]));
        assert!(matching_loss(&w, &truth).unwrap().is_finite());
    }
}
