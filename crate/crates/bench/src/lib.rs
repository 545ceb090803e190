//! Fixtures shared by the benchmarks.

use cfa_core::data::{gen_structured_features, LabeledDataset, SyntheticSpec};
use cfa_core::split::CombinationMask;
use cfa_core::{Matrix, RngState};

pub fn gaussian(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = RngState::new(seed);
    Matrix::from_vec(rows, cols, rng.normal_vec(rows * cols)).expect("shape matches")
}

/// Structured features with every cell populated.
pub fn structured(k: usize, e: usize, dim: usize, n_per_cell: usize, seed: u64) -> LabeledDataset {
    let mut rng = RngState::new(seed);
    let spec = SyntheticSpec::isotropic(k, e, k, e, dim, 0.1, 0.1, true, &mut rng).expect("valid spec");
    let mask = CombinationMask::all_id(e, k).expect("non-empty grid");
    gen_structured_features(&spec, &mask, n_per_cell, &mut rng).expect("generation succeeds")
}
