//! Unconstrained-feature-model oracle: optimizes free unit-norm features
//! against fixed orthogonal heads and checks the predicted decomposition
//! `z_i = W1ᵀ a_{y_i} + W2ᵀ b_{e_i}`.

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, CfaError, Result};
use crate::heads::{build_sel, HeadMode, HeadPair};
use crate::linalg::{dot, norm, softmax_xent_into, svd_compact, Matrix, RngState};

/// Fixed feasible heads plus labels for the free-feature objective.
#[derive(Clone, Debug)]
pub struct UfmProblem {
    pub heads: HeadPair,
    pub y: Vec<usize>,
    pub e: Vec<usize>,
    pub lambda: f64,
}

impl UfmProblem {
    pub fn new(heads: HeadPair, y: Vec<usize>, e: Vec<usize>, lambda: f64) -> Result<Self> {
        let (k, ecount, d) = (heads.num_classes(), heads.num_domains(), heads.dim());
        if heads.mode != HeadMode::NormalizedNoBias {
            return arg_err("the free-feature problem needs normalized heads");
        }
        if d < k + ecount {
            return arg_err(format!("d={d} is below K+E={}", k + ecount));
        }
        if heads.w1.matmul_t(&heads.w2).frobenius_norm() > 1e-8 {
            return arg_err("heads are not orthogonal (W1 W2ᵀ != 0)");
        }
        if y.len() != e.len() || y.is_empty() {
            return arg_err("need equally many (>= 1) class and domain labels");
        }
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return arg_err(format!("lambda must be finite and >= 0, got {lambda}"));
        }
        if let Some((yi, ei)) = y.iter().zip(&e).find(|(&yi, &ei)| yi >= k || ei >= ecount) {
            return arg_err(format!("label ({yi}, {ei}) out of range for K={k}, E={ecount}"));
        }
        Ok(Self { heads, y, e, lambda })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn dim(&self) -> usize {
        self.heads.dim()
    }

    /// Per-sample contribution (already divided by `N`) and its Euclidean
    /// gradient with respect to the feature.
    fn column(&self, i: usize, z: &[f64], grad: &mut [f64], buf1: &mut [f64], buf2: &mut [f64]) -> (f64, f64) {
        let h = &self.heads;
        let n = self.n() as f64;
        let k = h.num_classes() as f64;
        let ecount = h.num_domains() as f64;
        let l1 = h.class_logits(z);
        let ce1 = softmax_xent_into(&l1, self.y[i], buf1);
        grad.iter_mut().for_each(|g| *g = 0.0);
        let s1 = h.beta1 / (k * n);
        for (c, &gc) in buf1.iter().enumerate() {
            for (g, &w) in grad.iter_mut().zip(h.w1.row(c)) {
                *g += s1 * gc * w;
            }
        }
        let mut ce2 = 0.0;
        if self.lambda > 0.0 {
            let l2 = h.domain_logits(z);
            ce2 = softmax_xent_into(&l2, self.e[i], buf2);
            let s2 = self.lambda * h.beta2 / (ecount * n);
            for (c, &gc) in buf2.iter().enumerate() {
                for (g, &w) in grad.iter_mut().zip(h.w2.row(c)) {
                    *g += s2 * gc * w;
                }
            }
        }
        (ce1 / (k * n), self.lambda * ce2 / (ecount * n))
    }

    /// Objective at `z` (`d x N`, unit columns) split as `(class, lambda * domain)`.
    pub fn objective_terms(&self, z: &Matrix) -> Result<(f64, f64)> {
        if z.shape() != (self.dim(), self.n()) {
            return arg_err(format!("Z must be {}x{}, got {:?}", self.dim(), self.n(), z.shape()));
        }
        let zt = z.transpose();
        let mut g = vec![0.0; self.dim()];
        let mut b1 = vec![0.0; self.heads.num_classes()];
        let mut b2 = vec![0.0; self.heads.num_domains()];
        let mut tot = (0.0, 0.0);
        for i in 0..self.n() {
            let (c, d) = self.column(i, zt.row(i), &mut g, &mut b1, &mut b2);
            tot.0 += c;
            tot.1 += d;
        }
        Ok(tot)
    }

    pub fn objective(&self, z: &Matrix) -> Result<f64> {
        let (c, d) = self.objective_terms(z)?;
        Ok(c + d)
    }
}

/// Result of [`solve_ufm`].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct UfmSolution {
    /// `d x N`, unit-norm columns.
    pub z: Matrix,
    pub objective: f64,
    pub trace: Vec<f64>,
    pub iterations: usize,
}

/// Relative objective change over this many steps defines convergence.
const WINDOW: usize = 100;
const CONV_TOL: f64 = 1e-6;
const ARMIJO_C: f64 = 1e-4;
const MAX_ANGLE: f64 = std::f64::consts::FRAC_PI_2;

/// Riemannian gradient descent on the product of unit spheres.
///
/// Each column moves along the geodesic in its negative tangent-gradient
/// direction by an angle accepted under an Armijo test. The angle starts at
/// `lr`, doubles after an accepted step and halves on rejection, so progress
/// does not depend on the gradient scale (which is exponentially small once
/// a softmax saturates). Converged when the objective changed by at most
/// `1e-6` relative to its value `100` steps earlier.
pub fn solve_ufm(problem: &UfmProblem, steps: usize, lr: f64, rng: &mut RngState) -> Result<UfmSolution> {
    if steps == 0 {
        return arg_err("steps must be at least 1");
    }
    if !(lr > 0.0 && lr.is_finite()) {
        return arg_err(format!("lr must be positive, got {lr}"));
    }
    let (n, d) = (problem.n(), problem.dim());
    let mut zt = Matrix::from_vec(n, d, rng.normal_vec(n * d))?;
    crate::linalg::l2_normalize_rows_in_place(&mut zt, crate::linalg::NORM_EPS);
    descend(problem, zt, steps, lr)
}

fn descend(problem: &UfmProblem, mut zt: Matrix, steps: usize, lr: f64) -> Result<UfmSolution> {
    let (n, d) = (problem.n(), problem.dim());
    let mut angle = vec![lr.min(MAX_ANGLE); n];
    let mut g = vec![0.0; d];
    let mut trial = vec![0.0; d];
    let mut scratch = vec![0.0; d];
    let mut b1 = vec![0.0; problem.heads.num_classes()];
    let mut b2 = vec![0.0; problem.heads.num_domains()];
    let mut f_col: Vec<f64> = (0..n)
        .map(|i| {
            let (c, dd) = problem.column(i, zt.row(i), &mut g, &mut b1, &mut b2);
            c + dd
        })
        .collect();
    let mut trace = vec![f_col.iter().sum::<f64>()];

    for t in 1..=steps {
        for i in 0..n {
            let z = zt.row(i).to_vec();
            problem.column(i, &z, &mut g, &mut b1, &mut b2);
            let radial = dot(&g, &z);
            for (gj, zj) in g.iter_mut().zip(&z) {
                *gj -= radial * zj;
            }
            let gn = norm(&g);
            if gn == 0.0 || !gn.is_finite() {
                continue;
            }
            let mut theta = (angle[i] * 2.0).min(MAX_ANGLE);
            while theta > 1e-18 {
                let (c, sn) = (theta.cos(), theta.sin());
                for j in 0..d {
                    trial[j] = c * z[j] - sn * g[j] / gn;
                }
                let tn = norm(&trial);
                trial.iter_mut().for_each(|v| *v /= tn);
                let (fc, fd) = problem.column(i, &trial, &mut scratch, &mut b1, &mut b2);
                let f_new = fc + fd;
                if f_new <= f_col[i] - ARMIJO_C * theta * gn {
                    zt.row_mut(i).copy_from_slice(&trial);
                    f_col[i] = f_new;
                    break;
                }
                theta *= 0.5;
            }
            angle[i] = theta.max(1e-12);
        }
        let f: f64 = f_col.iter().sum();
        if !f.is_finite() {
            trace.push(f);
            return Err(CfaError::NonConvergence {
                what: "free-feature descent".into(),
                trace,
            });
        }
        trace.push(f);
        if t >= WINDOW {
            let prev = trace[t - WINDOW];
            if (f - prev).abs() <= CONV_TOL * prev.abs() {
                return Ok(UfmSolution {
                    z: zt.transpose(),
                    objective: f,
                    trace,
                    iterations: t,
                });
            }
        }
    }
    Err(CfaError::NonConvergence {
        what: format!("free-feature descent within {steps} steps"),
        trace,
    })
}

/// Solves with `beta1, beta2` doubled every `anneal_every` steps, starting
/// from the problem's values, for `rounds` rounds. Each round warm-starts from
/// the previous solution. Returns the final solution and the heads it used.
pub fn solve_ufm_annealed(
    problem: &UfmProblem,
    rounds: usize,
    anneal_every: usize,
    lr: f64,
    rng: &mut RngState,
) -> Result<(UfmSolution, HeadPair)> {
    if rounds == 0 {
        return arg_err("rounds must be at least 1");
    }
    let mut p = problem.clone();
    let mut sol = solve_ufm(&p, anneal_every, lr, rng)?;
    for _ in 1..rounds {
        p.heads.beta1 *= 2.0;
        p.heads.beta2 *= 2.0;
        sol = descend(&p, sol.z.transpose(), anneal_every, lr)?;
    }
    Ok((sol, p.heads))
}

/// Least-squares `gamma` with `W1 Z ≈ gamma S1`, and the relative residual
/// `||W1 Z - gamma S1||_F / ||gamma S1||_F`.
pub fn verify_alignment(z_star: &Matrix, heads: &HeadPair, y: &[usize]) -> Result<(f64, f64)> {
    fit_sel(&heads.w1, z_star, y, heads.num_classes())
}

fn fit_sel(w: &Matrix, z: &Matrix, labels: &[usize], count: usize) -> Result<(f64, f64)> {
    if z.rows() != w.cols() || z.cols() != labels.len() {
        return arg_err(format!("Z must be {}x{}, got {:?}", w.cols(), labels.len(), z.shape()));
    }
    let m = w.matmul(z);
    let s = build_sel(labels, count)?;
    let ss = s.frobenius_dot(&s);
    if ss == 0.0 {
        return arg_err("label matrix is zero (single label)");
    }
    let gamma = m.frobenius_dot(&s) / ss;
    let fit = s.scale(gamma);
    let denom = fit.frobenius_norm();
    let rel = if denom > 0.0 {
        m.sub(&fit).frobenius_norm() / denom
    } else {
        f64::INFINITY
    };
    Ok((gamma, rel))
}

/// Relative residuals of the two candidate closed forms for the class
/// coefficients, `a_y ∝ U Λ^p Uᵀ (e_y - 1/K)` with `W1 = U Λ Vᵀ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExponentFit {
    pub residual_pos2: f64,
    pub residual_neg2: f64,
}

/// Aggregates of the decomposition `z_i = W1ᵀ a_i + W2ᵀ b_i + r_i`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecompositionReport {
    /// Mean class coefficient `â_y` per class.
    pub a_coeffs: Vec<Vec<f64>>,
    /// Mean domain coefficient `b̂_e` per domain.
    pub b_coeffs: Vec<Vec<f64>>,
    /// `Σ ||r_i||² / Σ ||z_i||²`.
    pub residual_fraction: f64,
    pub gamma1_hat: f64,
    pub gamma2_hat: f64,
    pub gamma1_rel_residual: f64,
    pub gamma2_rel_residual: f64,
    /// Largest distance between class coefficients of two samples of one class.
    pub within_class_spread: f64,
    /// Largest distance between domain coefficients of two samples of one domain.
    pub within_domain_spread: f64,
    /// `||Proj_{W1} Z||_F` and `||Proj_{W2} Z||_F`.
    pub class_projection_norm: f64,
    pub domain_projection_norm: f64,
    pub class_exponent_fit: ExponentFit,
}

fn max_pairwise(vectors: &[Vec<f64>], labels: &[usize], count: usize) -> f64 {
    let mut worst: f64 = 0.0;
    for g in 0..count {
        let members: Vec<&Vec<f64>> = vectors.iter().zip(labels).filter(|(_, &l)| l == g).map(|(v, _)| v).collect();
        for a in 0..members.len() {
            for b in (a + 1)..members.len() {
                let dist = members[a]
                    .iter()
                    .zip(members[b])
                    .map(|(x, y)| (x - y).powi(2))
                    .sum::<f64>()
                    .sqrt();
                worst = worst.max(dist);
            }
        }
    }
    worst
}

fn group_means(vectors: &[Vec<f64>], labels: &[usize], count: usize) -> Vec<Vec<f64>> {
    let dim = vectors.first().map_or(0, Vec::len);
    let mut sums = vec![vec![0.0; dim]; count];
    let mut n = vec![0usize; count];
    for (v, &l) in vectors.iter().zip(labels) {
        n[l] += 1;
        for (s, x) in sums[l].iter_mut().zip(v) {
            *s += x;
        }
    }
    for (s, &c) in sums.iter_mut().zip(&n) {
        if c > 0 {
            s.iter_mut().for_each(|v| *v /= c as f64);
        }
    }
    sums
}

fn exponent_fit(w1: &Matrix, a_hat: &[Vec<f64>]) -> ExponentFit {
    let k = w1.rows();
    let svd = svd_compact(w1);
    let residual = |p: i32| {
        // Candidate columns c_y = U Λ^p Uᵀ (e_y - 1/K), then one shared scale.
        let mut num = 0.0;
        let mut den = 0.0;
        let mut cands = Vec::with_capacity(k);
        for y in 0..k {
            let centered: Vec<f64> = (0..k).map(|c| if c == y { 1.0 } else { 0.0 } - 1.0 / k as f64).collect();
            let proj = svd.u.t_matvec(&centered);
            let scaled: Vec<f64> = proj.iter().zip(&svd.s).map(|(v, s)| v * s.powi(p)).collect();
            let c = svd.u.matvec(&scaled);
            num += dot(&c, &a_hat[y]);
            den += dot(&c, &c);
            cands.push(c);
        }
        if den == 0.0 {
            return f64::INFINITY;
        }
        let scale = num / den;
        let (mut err, mut tot) = (0.0, 0.0);
        for y in 0..k {
            for (c, a) in cands[y].iter().zip(&a_hat[y]) {
                err += (scale * c - a).powi(2);
                tot += a * a;
            }
        }
        if tot == 0.0 {
            f64::INFINITY
        } else {
            (err / tot).sqrt()
        }
    };
    ExponentFit {
        residual_pos2: residual(2),
        residual_neg2: residual(-2),
    }
}

/// Decomposes each column of `z_star` (`d x N`) by least squares onto the
/// rows of both heads (minimum-norm coefficients via the compact-SVD
/// pseudo-inverse of `[W1; W2]ᵀ`) and aggregates the spreads and residuals.
pub fn verify_decomposition(z_star: &Matrix, heads: &HeadPair, y: &[usize], e: &[usize]) -> Result<DecompositionReport> {
    let (k, ecount, d) = (heads.num_classes(), heads.num_domains(), heads.dim());
    let n = y.len();
    if z_star.shape() != (d, n) || e.len() != n {
        return arg_err(format!("Z must be {d}x{n} with matching labels, got {:?}", z_star.shape()));
    }
    if y.iter().any(|&v| v >= k) || e.iter().any(|&v| v >= ecount) {
        return arg_err("label out of range");
    }
    let stacked = heads.w1.vstack(&heads.w2);
    let pinv = svd_compact(&stacked.transpose()).pinv();
    let coeffs = pinv.matmul(z_star);
    let recon = stacked.t_matmul(&coeffs);
    let total = z_star.frobenius_dot(z_star);
    let resid = z_star.sub(&recon);
    let residual_fraction = if total > 0.0 {
        (resid.frobenius_dot(&resid) / total).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let a: Vec<Vec<f64>> = (0..n).map(|i| (0..k).map(|r| coeffs.get(r, i)).collect()).collect();
    let b: Vec<Vec<f64>> = (0..n).map(|i| (k..k + ecount).map(|r| coeffs.get(r, i)).collect()).collect();

    let proj_norm = |w: &Matrix| {
        let p = svd_compact(&w.transpose());
        p.u.t_matmul(z_star).frobenius_norm()
    };
    let a_coeffs = group_means(&a, y, k);
    let (gamma1_hat, gamma1_rel_residual) = fit_sel(&heads.w1, z_star, y, k)?;
    let (gamma2_hat, gamma2_rel_residual) = if ecount > 1 {
        fit_sel(&heads.w2, z_star, e, ecount)?
    } else {
        (0.0, 0.0)
    };
    Ok(DecompositionReport {
        class_exponent_fit: exponent_fit(&heads.w1, &a_coeffs),
        a_coeffs,
        b_coeffs: group_means(&b, e, ecount),
        residual_fraction,
        gamma1_hat,
        gamma2_hat,
        gamma1_rel_residual,
        gamma2_rel_residual,
        within_class_spread: max_pairwise(&a, y, k),
        within_domain_spread: max_pairwise(&b, e, ecount),
        class_projection_norm: proj_norm(&heads.w1),
        domain_projection_norm: proj_norm(&heads.w2),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(n: usize, k: usize, e: usize) -> (Vec<usize>, Vec<usize>) {
        ((0..n).map(|i| i % k).collect(), (0..n).map(|i| (i / k) % e).collect())
    }

    #[test]
    fn single_sample_descends() {
        let mut rng = RngState::new(0);
        let heads = HeadPair::orthonormal(2, 1, 4, 20.0, 20.0, &mut rng).unwrap();
        let p = UfmProblem::new(heads, vec![0], vec![0], 0.0).unwrap();
        let sol = solve_ufm(&p, 5000, 0.1, &mut RngState::new(1)).unwrap();
        assert!(sol.objective < sol.trace[0]);
        // Optimum direction is w1_0 - w1_1 for orthonormal rows.
        let target: Vec<f64> = (0..4).map(|j| p.heads.w1.get(0, j) - p.heads.w1.get(1, j)).collect();
        let cos = dot(&sol.z.col(0), &target) / norm(&target);
        assert!(cos > 0.999, "{cos}");
    }

    #[test]
    fn identical_seeds_identical_solutions() {
        let mut rng = RngState::new(2);
        let heads = HeadPair::simplex_etf(3, 2, 8, 20.0, 20.0, &mut rng).unwrap();
        let (y, e) = labels(12, 3, 2);
        let p = UfmProblem::new(heads, y, e, 1.0).unwrap();
        let a = solve_ufm(&p, 5000, 0.1, &mut RngState::new(3)).unwrap();
        let b = solve_ufm(&p, 5000, 0.1, &mut RngState::new(3)).unwrap();
        assert_eq!(a.z, b.z);
    }

    #[test]
    fn constructed_decomposition_is_exact() {
        let mut rng = RngState::new(4);
        let heads = HeadPair::orthonormal(3, 2, 8, 1.0, 1.0, &mut rng).unwrap();
        let (y, e) = labels(12, 3, 2);
        let a_y = [[0.5, 0.1, -0.2], [0.0, 0.4, 0.1], [-0.3, 0.2, 0.5]];
        let b_e = [[0.3, -0.1], [-0.2, 0.4]];
        let mut z = Matrix::zeros(8, 12);
        for i in 0..12 {
            let col: Vec<f64> = (0..8)
                .map(|j| {
                    (0..3).map(|r| a_y[y[i]][r] * heads.w1.get(r, j)).sum::<f64>()
                        + (0..2).map(|r| b_e[e[i]][r] * heads.w2.get(r, j)).sum::<f64>()
                })
                .collect();
            z.set_col(i, &col);
        }
        let rep = verify_decomposition(&z, &heads, &y, &e).unwrap();
        assert!(rep.residual_fraction < 1e-20);
        assert!(rep.within_class_spread < 1e-12 && rep.within_domain_spread < 1e-12);
        assert!((rep.a_coeffs[1][1] - 0.4).abs() < 1e-12);
    }

    #[test]
    fn complement_noise_is_all_residual() {
        let mut rng = RngState::new(5);
        let q = crate::linalg::random_orthonormal(8, &mut rng).unwrap();
        let heads = HeadPair::normalized(q.select_rows(&[0, 1, 2]), q.select_rows(&[3, 4]), 1.0, 1.0).unwrap();
        let (y, e) = labels(6, 3, 2);
        let mut z = Matrix::zeros(8, 6);
        for i in 0..6 {
            let c: Vec<f64> = (0..8).map(|j| q.get(5 + i % 3, j)).collect();
            z.set_col(i, &c);
        }
        let rep = verify_decomposition(&z, &heads, &y, &e).unwrap();
        assert!((rep.residual_fraction - 1.0).abs() < 1e-12);
    }

    #[test]
    fn alignment_gamma_matches_simplex_prediction() {
        for k in [2usize, 3, 4] {
            let mut rng = RngState::new(10 + k as u64);
            let heads = HeadPair::simplex_etf(k, 2, k + 4, 20.0, 20.0, &mut rng).unwrap();
            let (y, e) = labels(6 * k, k, 2);
            let p = UfmProblem::new(heads, y.clone(), e, 0.0).unwrap();
            let sol = solve_ufm(&p, 20_000, 0.1, &mut rng).unwrap();
            let (gamma, rel) = verify_alignment(&sol.z, &p.heads, &y).unwrap();
            let want = 1.0 / (1.0 - 1.0 / k as f64);
            assert!((gamma - want).abs() / want < 1e-3 && rel < 1e-3, "K={k}: {gamma} {rel}");
        }
    }

    #[test]
    fn rejects_infeasible_problems() {
        let mut rng = RngState::new(6);
        let h = HeadPair::orthonormal(3, 2, 5, 1.0, 1.0, &mut rng).unwrap();
        assert!(UfmProblem::new(h.clone(), vec![0, 1], vec![0, 1], -1.0).is_err());
        assert!(UfmProblem::new(h.clone(), vec![0, 3], vec![0, 1], 1.0).is_err());
        let bad = HeadPair::normalized(h.w1.clone(), h.w1.select_rows(&[0, 1]), 1.0, 1.0).unwrap();
        assert!(UfmProblem::new(bad, vec![0, 1, 2], vec![0, 1, 0], 1.0).is_err());
    }
}
