//! Contribution matrices and the assembled PHM weight `U = Σᵢ Cᵢ ⊗ Wᵢ`.
//!
//! With algebra dimension `n`, a PHM layer mapping `d` inputs to `k` outputs
//! stores `n` contribution matrices `Cᵢ` (`n × n`) and `n` component weights
//! `Wᵢ` (`k/n × d/n`). The `Cᵢ` encode the multiplication rule of the
//! algebra: for the complex and quaternion schemes they are the fixed sign
//! patterns of the usual matrix representations, otherwise they are learned.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// How contribution matrices are initialized.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ContributionInit {
    /// `n = 2`: `C₁ = I`, `C₂ = [[0, −1], [1, 0]]`.
    Complex,
    /// `n = 4`: the Hamilton-product sign pattern.
    Quaternion,
    /// `Cᵢ = Ĩₙ · Pₙ^(i−1)`: alternating-sign diagonal times a cyclic shift.
    ShiftedIdentity,
    /// i.i.d. entries from `U(−1, 1)`.
    Uniform,
}

impl ContributionInit {
    pub fn as_str(self) -> &'static str {
        match self {
            ContributionInit::Complex => "complex",
            ContributionInit::Quaternion => "quaternion",
            ContributionInit::ShiftedIdentity => "shifted-identity",
            ContributionInit::Uniform => "uniform",
        }
    }
}

impl fmt::Display for ContributionInit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ContributionInit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "complex" => Ok(ContributionInit::Complex),
            "quaternion" => Ok(ContributionInit::Quaternion),
            "shifted-identity" => Ok(ContributionInit::ShiftedIdentity),
            "uniform" => Ok(ContributionInit::Uniform),
            other => Err(Error::invalid(format!("unknown contribution scheme `{other}`"))),
        }
    }
}

/// The `n` contribution matrices of one PHM layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ContributionSet {
    n: usize,
    matrices: Vec<Tensor>,
}

impl ContributionSet {
    pub fn new(matrices: Vec<Tensor>) -> Result<Self> {
        let n = matrices.len();
        if n == 0 {
            return Err(Error::invalid("a contribution set needs at least one matrix"));
        }
        for (i, m) in matrices.iter().enumerate() {
            if m.shape() != [n, n] {
                return Err(Error::shape(format!(
                    "contribution matrix {i} has shape {:?}, expected [{n}, {n}]",
                    m.shape()
                )));
            }
            m.ensure_finite("contribution matrix")?;
        }
        Ok(ContributionSet { n, matrices })
    }

    /// Splits an `n × n × n` tensor into its leading-axis slices.
    pub fn from_stacked(stacked: &Tensor) -> Result<Self> {
        let n = stacked.shape().first().copied().unwrap_or(0);
        if stacked.shape() != [n, n, n] {
            return Err(Error::shape(format!(
                "stacked contributions must be n×n×n, got {:?}",
                stacked.shape()
            )));
        }
        Self::new((0..n).map(|i| stacked.select(i)).collect::<Result<_>>()?)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn matrices(&self) -> &[Tensor] {
        &self.matrices
    }

    pub fn stacked(&self) -> Tensor {
        Tensor::stack(&self.matrices).expect("validated on construction")
    }
}

/// Kronecker product of two matrices.
pub fn kronecker(x: &Tensor, y: &Tensor) -> Result<Tensor> {
    x.kronecker(y)
}

fn signed_permutation(n: usize, entries: &[(usize, usize, f64)]) -> Tensor {
    let mut m = Tensor::zeros(&[n, n]);
    for &(r, c, v) in entries {
        m.data_mut()[r * n + c] = v;
    }
    m
}

/// `Ĩₙ · Pₙ^shift`, where `(Pₙ)ᵢⱼ = 1` iff `j − i = 1` or `(i, j) = (n, 1)`.
/// Row `r` of the result has its single nonzero at column `(r + shift) mod n`
/// with sign `(−1)^r`.
fn shifted_identity(n: usize, shift: usize) -> Tensor {
    let entries: Vec<_> = (0..n)
        .map(|r| {
            let sign = if r % 2 == 0 { 1.0 } else { -1.0 };
            (r, (r + shift) % n, sign)
        })
        .collect();
    signed_permutation(n, &entries)
}

/// Keyed generator for one contribution matrix: the stream is derived from
/// `(layer, matrix)` so sampling order does not affect the result.
pub(crate) fn keyed_rng(seed: u64, layer: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((layer << 32) | index);
    rng
}

/// Samples from the open interval `(−1, 1)`.
pub(crate) fn open_unit_uniform(rng: &mut impl Rng) -> f64 {
    loop {
        let v: f64 = rng.random_range(-1.0..1.0);
        if v > -1.0 {
            return v;
        }
    }
}

pub fn init_contributions(n: usize, scheme: ContributionInit, seed: u64) -> Result<ContributionSet> {
    init_contributions_for_layer(n, scheme, seed, 0)
}

/// As [`init_contributions`], with the uniform scheme keyed by layer index.
pub fn init_contributions_for_layer(
    n: usize,
    scheme: ContributionInit,
    seed: u64,
    layer: u64,
) -> Result<ContributionSet> {
    if n == 0 {
        return Err(Error::invalid("algebra dimension must be positive"));
    }
    let matrices = match scheme {
        ContributionInit::Complex => {
            if n != 2 {
                return Err(Error::invalid(format!("complex scheme needs n = 2, got {n}")));
            }
            vec![
                Tensor::eye(2),
                signed_permutation(2, &[(0, 1, -1.0), (1, 0, 1.0)]),
            ]
        }
        ContributionInit::Quaternion => {
            if n != 4 {
                return Err(Error::invalid(format!("quaternion scheme needs n = 4, got {n}")));
            }
            vec![
                Tensor::eye(4),
                // i
                signed_permutation(4, &[(0, 1, -1.0), (1, 0, 1.0), (2, 3, -1.0), (3, 2, 1.0)]),
                // j
                signed_permutation(4, &[(0, 2, -1.0), (1, 3, 1.0), (2, 0, 1.0), (3, 1, -1.0)]),
                // k
                signed_permutation(4, &[(0, 3, -1.0), (1, 2, -1.0), (2, 1, 1.0), (3, 0, 1.0)]),
            ]
        }
        ContributionInit::ShiftedIdentity => (0..n).map(|i| shifted_identity(n, i)).collect(),
        ContributionInit::Uniform => (0..n)
            .map(|i| {
                let mut rng = keyed_rng(seed, layer, i as u64);
                let data = (0..n * n).map(|_| open_unit_uniform(&mut rng)).collect();
                Tensor::new(&[n, n], data).expect("n×n")
            })
            .collect(),
    };
    ContributionSet::new(matrices)
}

/// The `k × d` block matrix `U = Σᵢ Cᵢ ⊗ Wᵢ`.
#[derive(Clone, Debug, PartialEq)]
pub struct AssembledWeight {
    matrix: Tensor,
    k: usize,
    d: usize,
}

impl AssembledWeight {
    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }

    pub fn into_matrix(self) -> Tensor {
        self.matrix
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn d(&self) -> usize {
        self.d
    }
}

pub fn assemble(contributions: &ContributionSet, weights: &[Tensor]) -> Result<AssembledWeight> {
    let n = contributions.n();
    if weights.len() != n {
        return Err(Error::shape(format!(
            "{} weight matrices for an algebra of dimension {n}",
            weights.len()
        )));
    }
    let (r, c) = weights[0].dims2()?;
    if let Some(w) = weights.iter().find(|w| w.shape() != [r, c]) {
        return Err(Error::shape(format!(
            "component weights disagree: {:?} vs [{r}, {c}]",
            w.shape()
        )));
    }
    let mut u = Tensor::zeros(&[n * r, n * c]);
    for (ci, wi) in contributions.matrices().iter().zip(weights) {
        let term = ci.kronecker(wi)?;
        for (acc, t) in u.data_mut().iter_mut().zip(term.data()) {
            *acc += t;
        }
    }
    Ok(AssembledWeight {
        matrix: u,
        k: n * r,
        d: n * c,
    })
}

/// `s(U) = 1 − mean |U[i, j]|`; values near 1 mean little weight mass.
pub fn sparsity(u: &Tensor) -> Result<f64> {
    let (k, d) = u.dims2()?;
    if k * d == 0 {
        return Err(Error::shape("sparsity of an empty matrix"));
    }
    let mass: f64 = u.data().iter().map(|x| x.abs()).sum();
    Ok(1.0 - mass / (k * d) as f64)
}

/// Trainable scalars of a PHM layer: `kd/n + n³`, plus `k` with a bias.
pub fn phm_param_count(n: usize, k: usize, d: usize, with_bias: bool) -> Result<usize> {
    if n == 0 || k % n != 0 || d % n != 0 {
        return Err(Error::invalid(format!(
            "PHM dimensions k={k}, d={d} must be divisible by n={n}"
        )));
    }
    Ok(k * d / n + n * n * n + if with_bias { k } else { 0 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn rows(r: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&r.iter().map(|x| x.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn rank(m: &Tensor) -> usize {
        let (r, c) = m.dims2().unwrap();
        nalgebra::DMatrix::from_row_slice(r, c, m.data()).rank(1e-9)
    }

    #[test]
    fn kronecker_with_unit_scalar_is_identity() {
        let y = random(&[3, 2], 1);
        assert_eq!(kronecker(&Tensor::eye(1), &y).unwrap(), y);
    }

    #[test]
    fn kronecker_hand_expansion() {
        let x = rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let y = rows(&[&[0.0, 1.0], &[1.0, 0.0]]);
        let expect = rows(&[
            &[0.0, 1.0, 0.0, 2.0],
            &[1.0, 0.0, 2.0, 0.0],
            &[0.0, 3.0, 0.0, 4.0],
            &[3.0, 0.0, 4.0, 0.0],
        ]);
        assert_eq!(kronecker(&x, &y).unwrap(), expect);
    }

    #[test]
    fn quaternion_i_term_places_w_b_blocks() {
        // Blocks of the Hamilton matrix holding ±W_b: (0,1) −, (1,0) +, (2,3) −, (3,2) +.
        let q = init_contributions(4, ContributionInit::Quaternion, 0).unwrap();
        let wb = random(&[2, 3], 2);
        let term = kronecker(&q.matrices()[1], &wb).unwrap();
        let expected_sign = |bi: usize, bj: usize| match (bi, bj) {
            (0, 1) | (2, 3) => -1.0,
            (1, 0) | (3, 2) => 1.0,
            _ => 0.0,
        };
        for bi in 0..4 {
            for bj in 0..4 {
                for r in 0..2 {
                    for c in 0..3 {
                        let got = term.at2(bi * 2 + r, bj * 3 + c);
                        assert_eq!(got, expected_sign(bi, bj) * wb.at2(r, c));
                    }
                }
            }
        }
    }

    #[test]
    fn complex_scheme() {
        let c = init_contributions(2, ContributionInit::Complex, 0).unwrap();
        assert_eq!(c.matrices()[0], rows(&[&[1.0, 0.0], &[0.0, 1.0]]));
        assert_eq!(c.matrices()[1], rows(&[&[0.0, -1.0], &[1.0, 0.0]]));
    }

    #[test]
    fn shifted_identity_n3() {
        let c = init_contributions(3, ContributionInit::ShiftedIdentity, 0).unwrap();
        assert_eq!(c.matrices()[0], rows(&[&[1.0, 0.0, 0.0], &[0.0, -1.0, 0.0], &[0.0, 0.0, 1.0]]));
        assert_eq!(c.matrices()[1], rows(&[&[0.0, 1.0, 0.0], &[0.0, 0.0, -1.0], &[1.0, 0.0, 0.0]]));
        assert_eq!(c.matrices()[2], rows(&[&[0.0, 0.0, 1.0], &[-1.0, 0.0, 0.0], &[0.0, 1.0, 0.0]]));
    }

    #[test]
    fn shifted_identity_matches_matrix_product_definition() {
        // Ĩₙ · Pₙ^(i−1) computed with explicit matrix powers.
        for n in [1, 2, 5, 8] {
            let mut tilde = Tensor::zeros(&[n, n]);
            let mut p = Tensor::zeros(&[n, n]);
            for i in 0..n {
                tilde.data_mut()[i * n + i] = if i % 2 == 0 { 1.0 } else { -1.0 };
                p.data_mut()[i * n + (i + 1) % n] = 1.0;
            }
            let c = init_contributions(n, ContributionInit::ShiftedIdentity, 0).unwrap();
            let mut power = Tensor::eye(n);
            for i in 0..n {
                assert_eq!(c.matrices()[i], tilde.matmul(&power).unwrap(), "n={n} i={i}");
                power = power.matmul(&p).unwrap();
            }
        }
    }

    #[test]
    fn degenerate_algebra() {
        let c = init_contributions(1, ContributionInit::ShiftedIdentity, 0).unwrap();
        assert_eq!(c.matrices()[0].data(), &[1.0]);
    }

    #[test]
    fn fixed_schemes_reject_wrong_dimension() {
        assert!(init_contributions(3, ContributionInit::Complex, 0).is_err());
        assert!(init_contributions(2, ContributionInit::Quaternion, 0).is_err());
        assert!(init_contributions(0, ContributionInit::Uniform, 0).is_err());
    }

    #[test]
    fn shifted_identity_structure() {
        for n in [1, 2, 3, 5, 8, 16] {
            let c = init_contributions(n, ContributionInit::ShiftedIdentity, 0).unwrap();
            for m in c.matrices() {
                let nonzero = m.data().iter().filter(|&&x| x != 0.0).count();
                assert_eq!(nonzero, n);
                assert!(m.data().iter().all(|&x| x == 0.0 || x.abs() == 1.0));
                assert_eq!(rank(m), n);
                let (r, cc) = m.dims2().unwrap();
                let det = nalgebra::DMatrix::from_row_slice(r, cc, m.data()).determinant();
                assert!((det.abs() - 1.0).abs() < 1e-12, "det {det}");
            }
        }
    }

    #[test]
    fn fixed_schemes_have_full_rank() {
        for (n, s) in [(2, ContributionInit::Complex), (4, ContributionInit::Quaternion)] {
            let c = init_contributions(n, s, 0).unwrap();
            assert!(c.matrices().iter().all(|m| rank(m) == n));
        }
    }

    #[test]
    fn uniform_is_keyed_and_bounded() {
        let a = init_contributions_for_layer(5, ContributionInit::Uniform, 7, 3).unwrap();
        let b = init_contributions_for_layer(5, ContributionInit::Uniform, 7, 3).unwrap();
        let other_layer = init_contributions_for_layer(5, ContributionInit::Uniform, 7, 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, other_layer);
        assert!(a.matrices().iter().flat_map(|m| m.data()).all(|&x| x > -1.0 && x < 1.0));
    }

    #[test]
    fn assemble_n1_is_the_weight() {
        let c = init_contributions(1, ContributionInit::ShiftedIdentity, 0).unwrap();
        let w = random(&[3, 4], 5);
        assert_eq!(assemble(&c, &[w.clone()]).unwrap().into_matrix(), w);
    }

    #[test]
    fn assemble_complex_scalar() {
        let c = init_contributions(2, ContributionInit::Complex, 0).unwrap();
        let u = assemble(&c, &[rows(&[&[1.0]]), rows(&[&[2.0]])]).unwrap();
        assert_eq!(u.matrix(), &rows(&[&[1.0, -2.0], &[2.0, 1.0]]));
    }

    #[test]
    fn assemble_quaternion_matches_hamilton_block_matrix() {
        let c = init_contributions(4, ContributionInit::Quaternion, 0).unwrap();
        let w: Vec<Tensor> = (0..4).map(|i| random(&[2, 3], 10 + i)).collect();
        let u = assemble(&c, &w).unwrap();
        // block (row, col) → (component index, sign)
        let layout = [
            [(0, 1.0), (1, -1.0), (2, -1.0), (3, -1.0)],
            [(1, 1.0), (0, 1.0), (3, -1.0), (2, 1.0)],
            [(2, 1.0), (3, 1.0), (0, 1.0), (1, -1.0)],
            [(3, 1.0), (2, -1.0), (1, 1.0), (0, 1.0)],
        ];
        for (bi, row) in layout.iter().enumerate() {
            for (bj, &(comp, sign)) in row.iter().enumerate() {
                for r in 0..2 {
                    for cc in 0..3 {
                        assert_eq!(u.matrix().at2(bi * 2 + r, bj * 3 + cc), sign * w[comp].at2(r, cc));
                    }
                }
            }
        }
    }

    #[test]
    fn assemble_shape_errors() {
        let c = init_contributions(2, ContributionInit::Complex, 0).unwrap();
        assert!(assemble(&c, &[Tensor::zeros(&[1, 1])]).is_err());
        assert!(assemble(&c, &[Tensor::zeros(&[1, 1]), Tensor::zeros(&[1, 2])]).is_err());
    }

    #[test]
    fn sparsity_examples() {
        assert_eq!(sparsity(&Tensor::zeros(&[3, 3])).unwrap(), 1.0);
        assert_eq!(sparsity(&Tensor::full(&[3, 3], 1.0)).unwrap(), 0.0);
        assert_eq!(sparsity(&rows(&[&[0.5, 0.0], &[0.0, 0.5]])).unwrap(), 0.75);
    }

    #[test]
    fn param_count_examples() {
        assert_eq!(phm_param_count(4, 512, 512, false).unwrap(), 65600);
        assert_eq!(phm_param_count(1, 8, 8, false).unwrap(), 65);
        assert_eq!(phm_param_count(2, 4, 4, true).unwrap(), 20);
        assert!(phm_param_count(3, 4, 6, false).is_err());
    }

    proptest! {
        #[test]
        fn assemble_is_bilinear(seed in 0u64..1000, alpha in -3.0f64..3.0, beta in -3.0f64..3.0) {
            let c = init_contributions(3, ContributionInit::Uniform, seed).unwrap();
            let w: Vec<Tensor> = (0..3).map(|i| random(&[2, 2], seed * 10 + i)).collect();
            let v: Vec<Tensor> = (0..3).map(|i| random(&[2, 2], seed * 10 + 5 + i)).collect();
            let mix: Vec<Tensor> = w.iter().zip(&v)
                .map(|(a, b)| a.scale(alpha).add(&b.scale(beta)).unwrap())
                .collect();
            let lhs = assemble(&c, &mix).unwrap().into_matrix();
            let rhs = assemble(&c, &w).unwrap().matrix().scale(alpha)
                .add(&assemble(&c, &v).unwrap().matrix().scale(beta)).unwrap();
            prop_assert!(lhs.max_abs_diff(&rhs).unwrap() < 1e-12);
        }

        #[test]
        fn kronecker_rank_multiplies(seed in 0u64..500) {
            let x = random(&[2, 2], seed);
            let y = random(&[3, 3], seed + 1000);
            let k = kronecker(&x, &y).unwrap();
            prop_assert_eq!(rank(&k), rank(&x) * rank(&y));
        }

        #[test]
        fn sparsity_scales_linearly(seed in 0u64..500, c in -4.0f64..4.0) {
            let u = random(&[3, 5], seed);
            let lhs = sparsity(&u.scale(c)).unwrap();
            let rhs = 1.0 - c.abs() * (1.0 - sparsity(&u).unwrap());
            prop_assert!((lhs - rhs).abs() < 1e-12);
        }
    }
}
