use crate::error::{arg_err, Result};
use crate::linalg::{psd_cholesky, random_orthonormal, Matrix, RngState};
use crate::split::{coverage_error, validate_mask, CombinationMask};

use super::LabeledDataset;

/// Parameters of the compositional feature generator: a class block, a domain
/// block and an isotropic noise block, mixed by an orthonormal rotation.
#[derive(Clone, Debug)]
pub struct SyntheticSpec {
    pub d1: usize,
    pub d2: usize,
    pub d: usize,
    pub class_means: Vec<Vec<f64>>,
    pub class_covs: Vec<Matrix>,
    pub domain_means: Vec<Vec<f64>>,
    pub domain_covs: Vec<Matrix>,
    pub noise_scale: f64,
    pub rotation: Matrix,
    class_chol: Vec<Matrix>,
    domain_chol: Vec<Matrix>,
}

impl SyntheticSpec {
    /// Validates dimensions, covariances (symmetric PSD) and the rotation.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        d1: usize,
        d2: usize,
        d: usize,
        class_means: Vec<Vec<f64>>,
        class_covs: Vec<Matrix>,
        domain_means: Vec<Vec<f64>>,
        domain_covs: Vec<Matrix>,
        noise_scale: f64,
        rotation: Matrix,
    ) -> Result<Self> {
        if d < d1 + d2 {
            return arg_err(format!("d={d} must be at least d1+d2={}", d1 + d2));
        }
        if class_means.is_empty() || domain_means.is_empty() {
            return arg_err("need at least one class and one domain");
        }
        if class_covs.len() != class_means.len() || domain_covs.len() != domain_means.len() {
            return arg_err("one covariance per mean is required");
        }
        if !(noise_scale >= 0.0 && noise_scale.is_finite()) {
            return arg_err(format!("noise_scale must be finite and >= 0, got {noise_scale}"));
        }
        for (mu, dim, what) in class_means
            .iter()
            .map(|m| (m, d1, "class"))
            .chain(domain_means.iter().map(|m| (m, d2, "domain")))
        {
            if mu.len() != dim {
                return arg_err(format!("{what} mean has length {}, expected {dim}", mu.len()));
            }
        }
        for (c, dim) in class_covs
            .iter()
            .map(|c| (c, d1))
            .chain(domain_covs.iter().map(|c| (c, d2)))
        {
            if c.shape() != (dim, dim) {
                return arg_err(format!("covariance is {:?}, expected {dim}x{dim}", c.shape()));
            }
        }
        if rotation.shape() != (d, d) {
            return arg_err(format!("rotation is {:?}, expected {d}x{d}", rotation.shape()));
        }
        if rotation.matmul_t(&rotation).sub(&Matrix::identity(d)).frobenius_norm() > 1e-10 {
            return arg_err("rotation is not orthonormal");
        }
        let class_chol = class_covs.iter().map(psd_cholesky).collect::<Result<Vec<_>>>()?;
        let domain_chol = domain_covs.iter().map(psd_cholesky).collect::<Result<Vec<_>>>()?;
        Ok(Self {
            d1,
            d2,
            d,
            class_means,
            class_covs,
            domain_means,
            domain_covs,
            noise_scale,
            rotation,
            class_chol,
            domain_chol,
        })
    }

    /// Simplex means of unit norm, isotropic covariances `sigma^2 I`, and a
    /// Haar-random rotation (or the identity when `rotate` is false).
    #[allow(clippy::too_many_arguments)]
    pub fn isotropic(
        num_classes: usize,
        num_domains: usize,
        d1: usize,
        d2: usize,
        d: usize,
        sigma: f64,
        noise_scale: f64,
        rotate: bool,
        rng: &mut RngState,
    ) -> Result<Self> {
        let class_means = simplex_vertices(num_classes, d1)?;
        let domain_means = simplex_vertices(num_domains, d2)?;
        let var = sigma * sigma;
        let rotation = if rotate {
            random_orthonormal(d, rng)?
        } else {
            Matrix::identity(d)
        };
        Self::new(
            d1,
            d2,
            d,
            class_means,
            vec![Matrix::identity(d1).scale(var); num_classes],
            domain_means,
            vec![Matrix::identity(d2).scale(var); num_domains],
            noise_scale,
            rotation,
        )
    }

    pub fn num_classes(&self) -> usize {
        self.class_means.len()
    }

    pub fn num_domains(&self) -> usize {
        self.domain_means.len()
    }
}

/// `count` vertices of a centered regular simplex with unit norm, embedded in
/// the first `count - 1` coordinates of `R^dim` through a Helmert basis.
/// A single vertex is the origin.
pub fn simplex_vertices(count: usize, dim: usize) -> Result<Vec<Vec<f64>>> {
    if count == 0 {
        return arg_err("simplex needs at least one vertex");
    }
    if dim + 1 < count {
        return arg_err(format!("{count} simplex vertices need dimension >= {}", count - 1));
    }
    let scale = if count > 1 {
        1.0 / (1.0 - 1.0 / count as f64).sqrt()
    } else {
        0.0
    };
    let mut out = vec![vec![0.0; dim]; count];
    for j in 1..count {
        let jf = j as f64;
        let denom = (jf * (jf + 1.0)).sqrt();
        for (k, v) in out.iter_mut().enumerate() {
            let h = match k.cmp(&j) {
                std::cmp::Ordering::Less => 1.0,
                std::cmp::Ordering::Equal => -jf,
                std::cmp::Ordering::Greater => 0.0,
            };
            v[j - 1] = scale * h / denom;
        }
    }
    Ok(out)
}

fn sample_gaussian(mean: &[f64], chol: &Matrix, rng: &mut RngState, out: &mut [f64]) {
    let g = rng.normal_vec(mean.len());
    for i in 0..mean.len() {
        out[i] = mean[i] + (0..=i).map(|j| chol.get(i, j) * g[j]).sum::<f64>();
    }
}

/// Draws `n_per_cell` samples for every ID cell of `mask`, cell by cell in
/// row-major `(domain, class)` order. Rows are not normalized.
pub fn gen_structured_features(
    spec: &SyntheticSpec,
    mask: &CombinationMask,
    n_per_cell: usize,
    rng: &mut RngState,
) -> Result<LabeledDataset> {
    let (e_count, k_count) = (spec.num_domains(), spec.num_classes());
    if mask.num_domains() != e_count || mask.num_classes() != k_count {
        return arg_err(format!(
            "mask is {}x{} but spec has E={e_count} K={k_count}",
            mask.num_domains(),
            mask.num_classes()
        ));
    }
    if n_per_cell == 0 {
        return arg_err("n_per_cell must be at least 1");
    }
    validate_mask(mask, false).map_err(|v| coverage_error(&v))?;

    let d = spec.d;
    let id_cells: Vec<(usize, usize)> = mask.cells().filter(|&(e, k)| mask.is_id(e, k)).collect();
    let n = id_cells.len() * n_per_cell;
    let mut data = Vec::with_capacity(n * d);
    let mut ys = Vec::with_capacity(n);
    let mut es = Vec::with_capacity(n);
    let mut block = vec![0.0; d];
    for &(e, k) in &id_cells {
        for _ in 0..n_per_cell {
            sample_gaussian(&spec.class_means[k], &spec.class_chol[k], rng, &mut block[..spec.d1]);
            sample_gaussian(
                &spec.domain_means[e],
                &spec.domain_chol[e],
                rng,
                &mut block[spec.d1..spec.d1 + spec.d2],
            );
            for v in &mut block[spec.d1 + spec.d2..] {
                *v = spec.noise_scale * rng.normal();
            }
            data.extend(spec.rotation.matvec(&block));
            ys.push(k);
            es.push(e);
        }
    }
    LabeledDataset::new(Matrix::from_vec(n, d, data)?, ys, es, k_count, e_count)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{dot, norm};

    #[test]
    fn simplex_vertices_are_unit_and_equiangular() {
        for k in 2..6 {
            let v = simplex_vertices(k, k + 1).unwrap();
            for i in 0..k {
                assert!((norm(&v[i]) - 1.0).abs() < 1e-12);
                for j in (i + 1)..k {
                    assert!((dot(&v[i], &v[j]) + 1.0 / (k as f64 - 1.0)).abs() < 1e-12);
                }
            }
        }
        assert_eq!(simplex_vertices(1, 3).unwrap(), vec![vec![0.0; 3]]);
        assert!(simplex_vertices(4, 2).is_err());
    }

    #[test]
    fn degenerate_gaussians_emit_means() {
        let mut rng = RngState::new(0);
        let spec = SyntheticSpec::isotropic(3, 2, 2, 1, 5, 0.0, 0.0, false, &mut rng).unwrap();
        let mask = CombinationMask::all_id(2, 3).unwrap();
        let ds = gen_structured_features(&spec, &mask, 4, &mut rng).unwrap();
        assert_eq!(ds.len(), 24);
        for i in 0..ds.len() {
            let (y, e) = (ds.class_labels[i], ds.domain_labels[i]);
            let mut expect = spec.class_means[y].clone();
            expect.extend(&spec.domain_means[e]);
            expect.extend([0.0, 0.0]);
            assert_eq!(ds.inputs.row(i), expect.as_slice());
        }
    }

    #[test]
    fn inverse_rotation_recovers_blocks() {
        let mut rng = RngState::new(2);
        let spec = SyntheticSpec::isotropic(2, 2, 1, 1, 6, 0.05, 0.05, true, &mut rng).unwrap();
        let mask = CombinationMask::all_id(2, 2).unwrap();
        let ds = gen_structured_features(&spec, &mask, 50, &mut rng).unwrap();
        let unrotated = ds.inputs.matmul(&spec.rotation);
        for i in 0..ds.len() {
            let class_sign = if ds.class_labels[i] == 0 { 1.0 } else { -1.0 };
            let domain_sign = if ds.domain_labels[i] == 0 { 1.0 } else { -1.0 };
            assert!(unrotated.get(i, 0) * class_sign > 0.5);
            assert!(unrotated.get(i, 1) * domain_sign > 0.5);
        }
    }

    #[test]
    fn generator_rejects_uncovered_mask() {
        let mut rng = RngState::new(0);
        let spec = SyntheticSpec::isotropic(2, 2, 1, 1, 3, 0.1, 0.1, false, &mut rng).unwrap();
        let mask = CombinationMask::from_rows(&[vec![1, 1], vec![0, 0]]).unwrap();
        assert!(matches!(
            gen_structured_features(&spec, &mask, 1, &mut rng),
            Err(crate::CfaError::Curation(_))
        ));
    }

    #[test]
    fn spec_validation() {
        let mut rng = RngState::new(0);
        assert!(SyntheticSpec::isotropic(2, 2, 1, 1, 1, 0.1, 0.1, false, &mut rng).is_err());
        let bad_rot = Matrix::from_rows(&[[1.0, 1.0], [0.0, 1.0]]).unwrap();
        assert!(SyntheticSpec::new(
            1,
            1,
            2,
            vec![vec![1.0]],
            vec![Matrix::zeros(1, 1)],
            vec![vec![1.0]],
            vec![Matrix::zeros(1, 1)],
            0.0,
            bad_rot
        )
        .is_err());
    }
}
