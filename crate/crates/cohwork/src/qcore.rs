//! Dense-matrix quantum state toolkit: density operators on labeled energy
//! bases, tensor products with recorded factorizations, partial traces,
//! energy dephasing, entropies and trace distances.
//!
//! Everything here is exact dense linear algebra; this module is the oracle
//! layer that the scalable ladder representations are checked against.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{CohworkError, Result};

/// Trace and Hermiticity tolerance for valid density operators.
pub const STATE_TOL: f64 = 1e-12;
/// Eigenvalues in [-EIG_CLAMP, 0) are clamped to zero before logarithms.
pub const EIG_CLAMP: f64 = 1e-12;
/// Basis energies closer than this are treated as degenerate.
pub const ENERGY_GROUP_TOL: f64 = 1e-9;

/// Global cap on Hilbert-space dimensions, overridable via `COHWORK_MAX_DIM`.
pub fn max_dim() -> usize {
    std::env::var("COHWORK_MAX_DIM")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .unwrap_or(1 << 18)
}

fn c(re: f64) -> Complex64 {
    Complex64::new(re, 0.0)
}

#[derive(Debug, Clone)]
struct TensorFactors {
    dim_left: usize,
    dim_right: usize,
    energies_left: Vec<f64>,
    energies_right: Vec<f64>,
}

/// Which factor of a recorded tensor product to keep in a partial trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Subsystem {
    First,
    Second,
}

/// A density operator over a basis labeled by energies (gap units).
#[derive(Debug, Clone)]
pub struct DensityOperator {
    matrix: DMatrix<Complex64>,
    basis_energies: Vec<f64>,
    factors: Option<TensorFactors>,
}

impl DensityOperator {
    /// Validating constructor: trace 1, Hermitian and positive semidefinite
    /// within `STATE_TOL`.
    pub fn new(matrix: DMatrix<Complex64>, basis_energies: Vec<f64>) -> Result<Self> {
        let op = Self::from_valid_parts(matrix, basis_energies)?;
        let min_eig = hermitian_eigenvalues(&op.matrix)
            .into_iter()
            .fold(f64::INFINITY, f64::min);
        if min_eig < -EIG_CLAMP {
            return Err(CohworkError::ContractViolation(format!(
                "negative eigenvalue {min_eig:.3e}"
            )));
        }
        Ok(op)
    }

    /// Cheap construction for outputs of structure-preserving maps (tensor,
    /// partial trace, unitary conjugation). Checks trace and Hermiticity only.
    pub(crate) fn from_valid_parts(
        matrix: DMatrix<Complex64>,
        basis_energies: Vec<f64>,
    ) -> Result<Self> {
        let dim = matrix.nrows();
        if matrix.ncols() != dim {
            return Err(CohworkError::DimensionMismatch(format!(
                "{}x{} matrix is not square",
                matrix.nrows(),
                matrix.ncols()
            )));
        }
        if basis_energies.len() != dim {
            return Err(CohworkError::DimensionMismatch(format!(
                "{} energies for dimension {dim}",
                basis_energies.len()
            )));
        }
        let tr = matrix.trace();
        if (tr.re - 1.0).abs() > STATE_TOL || tr.im.abs() > STATE_TOL {
            return Err(CohworkError::ContractViolation(format!(
                "trace {tr} is not 1"
            )));
        }
        let herm_dev = hermiticity_deviation(&matrix);
        if herm_dev > STATE_TOL {
            return Err(CohworkError::ContractViolation(format!(
                "Hermiticity deviation {herm_dev:.3e}"
            )));
        }
        Ok(Self {
            matrix,
            basis_energies,
            factors: None,
        })
    }

    /// Rank-one projector |psi><psi| for a normalized amplitude vector.
    pub fn from_pure(amplitudes: &DVector<Complex64>, basis_energies: Vec<f64>) -> Result<Self> {
        let norm = amplitudes.norm();
        if (norm - 1.0).abs() > 1e-9 {
            return Err(CohworkError::ContractViolation(format!(
                "pure-state norm {norm} is not 1"
            )));
        }
        let psi = amplitudes / c(norm);
        let matrix = &psi * psi.adjoint();
        Self::from_valid_parts(matrix, basis_energies)
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<Complex64> {
        &self.matrix
    }

    pub fn basis_energies(&self) -> &[f64] {
        &self.basis_energies
    }

    /// Diagonal populations (real parts of the diagonal).
    pub fn populations(&self) -> Vec<f64> {
        (0..self.dim()).map(|i| self.matrix[(i, i)].re).collect()
    }

    /// Mean energy tr(rho H) for H diagonal in the labeled basis.
    pub fn mean_energy(&self) -> f64 {
        self.populations()
            .iter()
            .zip(&self.basis_energies)
            .map(|(p, e)| p * e)
            .sum()
    }

    /// Conjugate by a unitary, keeping the energy labels.
    pub fn apply_unitary(&self, u: &DMatrix<Complex64>) -> Result<Self> {
        if u.nrows() != self.dim() || u.ncols() != self.dim() {
            return Err(CohworkError::DimensionMismatch(format!(
                "unitary {}x{} on dimension {}",
                u.nrows(),
                u.ncols(),
                self.dim()
            )));
        }
        let m = u * &self.matrix * u.adjoint();
        let mut out = Self::from_valid_parts(m, self.basis_energies.clone())?;
        out.factors = self.factors.clone();
        Ok(out)
    }

    /// Dephase in this operator's own energy grouping.
    pub fn dephased(&self) -> Self {
        let proj = EnergyBasisProjectors::from_energies(&self.basis_energies);
        dephase(self, &proj)
    }
}

/// Max entry-wise deviation from Hermiticity.
pub fn hermiticity_deviation(m: &DMatrix<Complex64>) -> f64 {
    let diff = m - m.adjoint();
    diff.iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// Eigenvalues of a Hermitian matrix, ascending, with tiny negatives clamped.
pub fn hermitian_eigenvalues(m: &DMatrix<Complex64>) -> Vec<f64> {
    let eig = m.clone().symmetric_eigen();
    let mut vals: Vec<f64> = eig
        .eigenvalues
        .iter()
        .map(|&v| if v < 0.0 && v >= -EIG_CLAMP { 0.0 } else { v })
        .collect();
    vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
    vals
}

/// The system state |psi> = sqrt(1-p)|0> + sqrt(p) e^{-i phi}|1> on a unit-gap qubit.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PureQubit {
    p: f64,
    phi: f64,
}

impl PureQubit {
    pub fn new(p: f64, phi: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&p) || !p.is_finite() {
            return Err(CohworkError::ContractViolation(format!(
                "excited-state weight {p} outside [0, 1]"
            )));
        }
        Ok(Self { p, phi })
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    pub fn phi(&self) -> f64 {
        self.phi
    }

    /// Same state with the phase rotated away. The rotation about z conserves
    /// energy, so protocols may apply it at zero work cost.
    pub fn canonical(&self) -> Self {
        Self {
            p: self.p,
            phi: 0.0,
        }
    }

    pub fn amplitudes(&self) -> DVector<Complex64> {
        DVector::from_vec(vec![
            c((1.0 - self.p).sqrt()),
            Complex64::from_polar(self.p.sqrt(), -self.phi),
        ])
    }

    pub fn density(&self) -> DensityOperator {
        DensityOperator::from_pure(&self.amplitudes(), vec![0.0, 1.0])
            .expect("qubit projector is a valid state")
    }
}

/// Partition of basis indices into equal-energy groups.
#[derive(Debug, Clone)]
pub struct EnergyBasisProjectors {
    groups: Vec<Vec<usize>>,
    group_of: Vec<usize>,
    group_energy: Vec<f64>,
}

impl EnergyBasisProjectors {
    pub fn from_energies(energies: &[f64]) -> Self {
        let mut order: Vec<usize> = (0..energies.len()).collect();
        order.sort_by(|&a, &b| energies[a].partial_cmp(&energies[b]).unwrap());
        let mut groups: Vec<Vec<usize>> = Vec::new();
        let mut group_energy: Vec<f64> = Vec::new();
        let mut group_of = vec![0usize; energies.len()];
        for idx in order {
            match group_energy.last() {
                Some(&e) if (energies[idx] - e).abs() <= ENERGY_GROUP_TOL => {
                    group_of[idx] = groups.len() - 1;
                    groups.last_mut().unwrap().push(idx);
                }
                _ => {
                    group_of[idx] = groups.len();
                    groups.push(vec![idx]);
                    group_energy.push(energies[idx]);
                }
            }
        }
        Self {
            groups,
            group_of,
            group_energy,
        }
    }

    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }

    pub fn group_of(&self, index: usize) -> usize {
        self.group_of[index]
    }

    pub fn group_energies(&self) -> &[f64] {
        &self.group_energy
    }
}

/// Tensor product with pairwise-summed basis energies. Records the
/// factorization so the product can later be partial-traced.
pub fn tensor(a: &DensityOperator, b: &DensityOperator) -> Result<DensityOperator> {
    let dim = a.dim() * b.dim();
    if dim > max_dim() {
        return Err(CohworkError::ResourceLimit(format!(
            "tensor dimension {dim} exceeds cap {}",
            max_dim()
        )));
    }
    let matrix = a.matrix().kronecker(b.matrix());
    let mut energies = Vec::with_capacity(dim);
    for ea in a.basis_energies() {
        for eb in b.basis_energies() {
            energies.push(ea + eb);
        }
    }
    let mut out = DensityOperator::from_valid_parts(matrix, energies)?;
    out.factors = Some(TensorFactors {
        dim_left: a.dim(),
        dim_right: b.dim(),
        energies_left: a.basis_energies().to_vec(),
        energies_right: b.basis_energies().to_vec(),
    });
    Ok(out)
}

/// Partial trace over the factor not kept. The joint operator must carry a
/// recorded factorization (it was produced by [`tensor`] and then evolved
/// through [`DensityOperator::apply_unitary`]).
pub fn partial_trace(joint: &DensityOperator, keep: Subsystem) -> Result<DensityOperator> {
    let factors = joint.factors.as_ref().ok_or_else(|| {
        CohworkError::ContractViolation("partial trace of a state with no recorded factorization".into())
    })?;
    let (da, db) = (factors.dim_left, factors.dim_right);
    let m = joint.matrix();
    let (kept_dim, energies) = match keep {
        Subsystem::First => (da, factors.energies_left.clone()),
        Subsystem::Second => (db, factors.energies_right.clone()),
    };
    let mut out = DMatrix::<Complex64>::zeros(kept_dim, kept_dim);
    match keep {
        Subsystem::First => {
            for i in 0..da {
                for j in 0..da {
                    let mut acc = Complex64::default();
                    for k in 0..db {
                        acc += m[(i * db + k, j * db + k)];
                    }
                    out[(i, j)] = acc;
                }
            }
        }
        Subsystem::Second => {
            for i in 0..db {
                for j in 0..db {
                    let mut acc = Complex64::default();
                    for k in 0..da {
                        acc += m[(k * db + i, k * db + j)];
                    }
                    out[(i, j)] = acc;
                }
            }
        }
    }
    DensityOperator::from_valid_parts(out, energies)
}

/// Remove coherence between distinct energy eigenspaces.
pub fn dephase(rho: &DensityOperator, proj: &EnergyBasisProjectors) -> DensityOperator {
    let mut m = rho.matrix().clone();
    let n = rho.dim();
    for i in 0..n {
        for j in 0..n {
            if proj.group_of(i) != proj.group_of(j) {
                m[(i, j)] = Complex64::default();
            }
        }
    }
    let mut out = DensityOperator::from_valid_parts(m, rho.basis_energies().to_vec())
        .expect("dephasing preserves validity");
    out.factors = rho.factors.clone();
    out
}

fn entropy_of_distribution(probs: impl IntoIterator<Item = f64>) -> f64 {
    probs
        .into_iter()
        .map(|p| {
            let p = if p < 0.0 && p >= -EIG_CLAMP { 0.0 } else { p };
            if p > 0.0 {
                -p * p.ln()
            } else {
                0.0
            }
        })
        .sum()
}

/// Von Neumann entropy in nats, with 0 log 0 = 0.
pub fn von_neumann_entropy(rho: &DensityOperator) -> f64 {
    entropy_of_distribution(hermitian_eigenvalues(rho.matrix()))
}

/// Shannon entropy (nats) of the outcome distribution of an energy
/// measurement: diagonal populations aggregated over degenerate levels.
pub fn energy_measurement_entropy(rho: &DensityOperator) -> f64 {
    let proj = EnergyBasisProjectors::from_energies(rho.basis_energies());
    let pops = rho.populations();
    let by_energy = proj
        .groups()
        .iter()
        .map(|g| g.iter().map(|&i| pops[i]).sum::<f64>());
    entropy_of_distribution(by_energy)
}

/// Relative entropy of coherence A(rho) = S(D(rho)) - S(rho), in nats.
pub fn coherence_measure(rho: &DensityOperator) -> f64 {
    let a = von_neumann_entropy(&rho.dephased()) - von_neumann_entropy(rho);
    a.max(0.0)
}

/// Half the trace norm of rho - sigma.
pub fn trace_distance(rho: &DensityOperator, sigma: &DensityOperator) -> Result<f64> {
    Ok(0.5 * trace_norm_diff(rho, sigma)?)
}

/// Full trace norm ||rho - sigma||_1 (sum of absolute eigenvalues). This is
/// the normalization the gentle-measurement bound is checked under; the
/// halved distance is [`trace_distance`].
pub fn trace_norm_diff(rho: &DensityOperator, sigma: &DensityOperator) -> Result<f64> {
    if rho.dim() != sigma.dim() {
        return Err(CohworkError::DimensionMismatch(format!(
            "trace distance between dims {} and {}",
            rho.dim(),
            sigma.dim()
        )));
    }
    let diff = rho.matrix() - sigma.matrix();
    Ok(hermitian_eigenvalues(&diff).iter().map(|v| v.abs()).sum())
}

/// Random Ginibre matrix.
fn ginibre<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> DMatrix<Complex64> {
    DMatrix::from_fn(dim, dim, |_, _| {
        Complex64::new(rng.sample(StandardNormal), rng.sample(StandardNormal))
    })
}

/// Haar-random unitary via QR of a Ginibre matrix with phase fixing.
pub fn haar_unitary<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> DMatrix<Complex64> {
    let g = ginibre(dim, rng);
    let qr = g.qr();
    let q = qr.q();
    let r = qr.r();
    let phases = DVector::from_iterator(dim, (0..dim).map(|i| r[(i, i)] / c(r[(i, i)].norm())));
    let mut u = q;
    for j in 0..dim {
        for i in 0..dim {
            u[(i, j)] *= phases[j];
        }
    }
    u
}

/// Random density operator from the Hilbert-Schmidt (Ginibre) ensemble.
pub fn random_density<R: Rng + ?Sized>(
    energies: &[f64],
    rng: &mut R,
) -> DensityOperator {
    let dim = energies.len();
    let g = ginibre(dim, rng);
    let mut m = &g * g.adjoint();
    let tr = m.trace().re;
    m /= c(tr);
    // Symmetrize away the last bits of rounding noise.
    let m = (&m + m.adjoint()) * c(0.5);
    DensityOperator::from_valid_parts(m, energies.to_vec()).expect("Ginibre state is valid")
}

/// Random pure state on the given basis.
pub fn random_pure<R: Rng + ?Sized>(energies: &[f64], rng: &mut R) -> DensityOperator {
    let dim = energies.len();
    let mut v = DVector::from_fn(dim, |_, _| {
        Complex64::new(rng.sample(StandardNormal), rng.sample(StandardNormal))
    });
    let n = v.norm();
    v /= c(n);
    DensityOperator::from_pure(&v, energies.to_vec()).expect("normalized vector")
}

/// Random strictly energy-conserving unitary: independent Haar blocks on each
/// degenerate eigenspace of the diagonal Hamiltonian, identity across spaces.
pub fn energy_conserving_unitary<R: Rng + ?Sized>(
    energies: &[f64],
    rng: &mut R,
) -> DMatrix<Complex64> {
    let dim = energies.len();
    let proj = EnergyBasisProjectors::from_energies(energies);
    let mut u = DMatrix::<Complex64>::identity(dim, dim);
    for group in proj.groups() {
        if group.len() == 1 {
            let phase = Complex64::from_polar(1.0, rng.gen_range(0.0..std::f64::consts::TAU));
            u[(group[0], group[0])] = phase;
            continue;
        }
        let block = haar_unitary(group.len(), rng);
        for (bi, &gi) in group.iter().enumerate() {
            for (bj, &gj) in group.iter().enumerate() {
                u[(gi, gj)] = block[(bi, bj)];
            }
        }
    }
    u
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn basis_state(dim: usize, level: usize, energies: Vec<f64>) -> DensityOperator {
        let mut v = DVector::from_element(dim, Complex64::default());
        v[level] = c(1.0);
        DensityOperator::from_pure(&v, energies).unwrap()
    }

    fn maximally_mixed(dim: usize, energies: Vec<f64>) -> DensityOperator {
        let m = DMatrix::<Complex64>::identity(dim, dim) / c(dim as f64);
        DensityOperator::from_valid_parts(m, energies).unwrap()
    }

    #[test]
    fn tensor_of_maximally_mixed_qubits() {
        let a = maximally_mixed(2, vec![0.0, 1.0]);
        let joint = tensor(&a, &a).unwrap();
        assert_eq!(joint.dim(), 4);
        for i in 0..4 {
            assert_abs_diff_eq!(joint.matrix()[(i, i)].re, 0.25, epsilon = 1e-15);
        }
        assert_eq!(joint.basis_energies(), &[0.0, 1.0, 1.0, 2.0]);
    }

    #[test]
    fn tensor_of_basis_states_sums_energies() {
        let zero = basis_state(2, 0, vec![0.0, 1.0]);
        let one = basis_state(2, 1, vec![0.0, 1.0]);
        let joint = tensor(&zero, &one).unwrap();
        assert_abs_diff_eq!(joint.matrix()[(1, 1)].re, 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(joint.basis_energies()[1], 1.0, epsilon = 1e-15);
    }

    #[test]
    fn tensor_trace_is_one_for_random_states() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..5 {
            let a = random_density(&[0.0, 1.0, 2.0], &mut rng);
            let b = random_density(&[0.0, 1.0], &mut rng);
            let joint = tensor(&a, &b).unwrap();
            assert_abs_diff_eq!(joint.matrix().trace().re, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn partial_trace_inverts_tensor() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random_density(&[0.0, 1.0, 2.0], &mut rng);
        let b = random_density(&[0.0, 1.0], &mut rng);
        let joint = tensor(&a, &b).unwrap();
        let back = partial_trace(&joint, Subsystem::First).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_abs_diff_eq!(
                    back.matrix()[(i, j)].re,
                    a.matrix()[(i, j)].re,
                    epsilon = 1e-12
                );
                assert_abs_diff_eq!(
                    back.matrix()[(i, j)].im,
                    a.matrix()[(i, j)].im,
                    epsilon = 1e-12
                );
            }
        }
    }

    #[test]
    fn partial_trace_of_bell_state_is_maximally_mixed() {
        let amps = DVector::from_vec(vec![
            c(std::f64::consts::FRAC_1_SQRT_2),
            Complex64::default(),
            Complex64::default(),
            c(std::f64::consts::FRAC_1_SQRT_2),
        ]);
        let mut bell = DensityOperator::from_pure(&amps, vec![0.0, 1.0, 1.0, 2.0]).unwrap();
        bell.factors = Some(TensorFactors {
            dim_left: 2,
            dim_right: 2,
            energies_left: vec![0.0, 1.0],
            energies_right: vec![0.0, 1.0],
        });
        let red = partial_trace(&bell, Subsystem::First).unwrap();
        assert_abs_diff_eq!(red.matrix()[(0, 0)].re, 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(red.matrix()[(1, 1)].re, 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(red.matrix()[(0, 1)].norm(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn partial_trace_without_factorization_errors() {
        let rho = maximally_mixed(4, vec![0.0, 1.0, 1.0, 2.0]);
        assert!(matches!(
            partial_trace(&rho, Subsystem::First),
            Err(CohworkError::ContractViolation(_))
        ));
    }

    #[test]
    fn dephase_is_idempotent_and_trace_preserving() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rho = random_density(&[0.0, 1.0, 2.0, 2.0], &mut rng);
        let d1 = rho.dephased();
        let d2 = d1.dephased();
        assert_abs_diff_eq!(d1.matrix().trace().re, 1.0, epsilon = 1e-13);
        let dev = (d1.matrix() - d2.matrix())
            .iter()
            .map(|z| z.norm())
            .fold(0.0, f64::max);
        assert!(dev <= 1e-12, "dephase not idempotent: {dev}");
    }

    #[test]
    fn dephase_of_plus_state_is_maximally_mixed() {
        let plus = PureQubit::new(0.5, 0.0).unwrap().density();
        let d = plus.dephased();
        assert_abs_diff_eq!(d.matrix()[(0, 0)].re, 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(d.matrix()[(0, 1)].norm(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn pure_state_entropy_is_zero_mixed_is_log2() {
        let pure = basis_state(2, 0, vec![0.0, 1.0]);
        assert_abs_diff_eq!(von_neumann_entropy(&pure), 0.0, epsilon = 1e-12);
        let mixed = maximally_mixed(2, vec![0.0, 1.0]);
        assert_abs_diff_eq!(von_neumann_entropy(&mixed), 2f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn binary_diagonal_entropy() {
        let q = 0.3;
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![c(1.0 - q), c(q)]));
        let rho = DensityOperator::from_valid_parts(m, vec![0.0, 1.0]).unwrap();
        let expect = -(q * q.ln() + (1.0 - q) * (1.0 - q).ln());
        assert_abs_diff_eq!(von_neumann_entropy(&rho), expect, epsilon = 1e-12);
        assert_abs_diff_eq!(energy_measurement_entropy(&rho), expect, epsilon = 1e-12);
    }

    #[test]
    fn entropy_invariant_under_unitaries() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let rho = random_density(&[0.0, 1.0, 2.0, 3.0], &mut rng);
            let u = haar_unitary(4, &mut rng);
            let s0 = von_neumann_entropy(&rho);
            let s1 = von_neumann_entropy(&rho.apply_unitary(&u).unwrap());
            assert_abs_diff_eq!(s0, s1, epsilon = 1e-10);
        }
    }

    #[test]
    fn energy_entropy_decomposes_into_vn_plus_coherence() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..20 {
            let rho = random_density(&[0.0, 1.0, 2.0, 3.0, 4.0], &mut rng);
            let h = energy_measurement_entropy(&rho);
            let s = von_neumann_entropy(&rho);
            let a = coherence_measure(&rho);
            assert_abs_diff_eq!(h, s + a, epsilon = 1e-10);
        }
    }

    #[test]
    fn superposed_neighbor_levels_measure_log2() {
        let mut v = DVector::from_element(5, Complex64::default());
        v[1] = c(std::f64::consts::FRAC_1_SQRT_2);
        v[3] = c(std::f64::consts::FRAC_1_SQRT_2);
        let rho =
            DensityOperator::from_pure(&v, vec![0.0, 1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_abs_diff_eq!(energy_measurement_entropy(&rho), 2f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(coherence_measure(&rho), 2f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn coherence_of_incoherent_state_is_zero() {
        let mixed = maximally_mixed(3, vec![0.0, 1.0, 2.0]);
        assert_abs_diff_eq!(coherence_measure(&mixed), 0.0, epsilon = 1e-12);
        let plus = PureQubit::new(0.5, 0.3).unwrap().density();
        assert_abs_diff_eq!(coherence_measure(&plus), 2f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn trace_distance_extremes() {
        let zero = basis_state(2, 0, vec![0.0, 1.0]);
        let one = basis_state(2, 1, vec![0.0, 1.0]);
        assert_abs_diff_eq!(trace_distance(&zero, &zero).unwrap(), 0.0, epsilon = 1e-14);
        assert_abs_diff_eq!(trace_distance(&zero, &one).unwrap(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(trace_norm_diff(&zero, &one).unwrap(), 2.0, epsilon = 1e-12);
    }

    #[test]
    fn trace_distance_dimension_mismatch() {
        let a = maximally_mixed(2, vec![0.0, 1.0]);
        let b = maximally_mixed(3, vec![0.0, 1.0, 2.0]);
        assert!(trace_distance(&a, &b).is_err());
    }

    #[test]
    fn conserving_unitary_commutes_with_hamiltonian() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let energies = vec![0.0, 1.0, 1.0, 2.0, 2.0, 3.0];
        let u = energy_conserving_unitary(&energies, &mut rng);
        let h = DMatrix::from_diagonal(&DVector::from_iterator(
            energies.len(),
            energies.iter().map(|&e| c(e)),
        ));
        let comm = &u * &h - &h * &u;
        let dev = comm.iter().map(|z| z.norm()).fold(0.0, f64::max);
        assert!(dev < 1e-12, "commutator deviation {dev}");
        let id_dev = (&u * u.adjoint() - DMatrix::<Complex64>::identity(6, 6))
            .iter()
            .map(|z| z.norm())
            .fold(0.0, f64::max);
        assert!(id_dev < 1e-12, "unitarity deviation {id_dev}");
    }

    #[test]
    fn incoherent_fixed_shift_kraus_channels_commute_with_dephasing() {
        // Channels whose Kraus operators map each energy level to a single
        // shifted level commute with the dephasing map.
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let dim = 6;
        let energies: Vec<f64> = (0..dim).map(|i| i as f64).collect();
        for _ in 0..20 {
            // One shift-0 and one shift-+1 Kraus, normalized to a channel.
            let k0 = DMatrix::from_fn(dim, dim, |i, j| {
                if i == j {
                    Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
                } else {
                    Complex64::default()
                }
            });
            let k1 = DMatrix::from_fn(dim, dim, |i, j| {
                if i == j + 1 {
                    Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
                } else {
                    Complex64::default()
                }
            });
            // M = sum K^dag K is diagonal; rescale by M^{-1/2}.
            let m = k0.adjoint() * &k0 + k1.adjoint() * &k1;
            let scale = DMatrix::from_fn(dim, dim, |i, j| {
                if i == j {
                    c(1.0 / m[(i, i)].re.sqrt())
                } else {
                    Complex64::default()
                }
            });
            let k0 = &k0 * &scale;
            let k1 = &k1 * &scale;
            let apply = |rho: &DensityOperator| {
                let m = &k0 * rho.matrix() * k0.adjoint() + &k1 * rho.matrix() * k1.adjoint();
                DensityOperator::from_valid_parts(m, energies.clone()).unwrap()
            };
            let rho = random_density(&energies, &mut rng);
            let lhs = apply(&rho).dephased();
            let rhs = apply(&rho.dephased());
            let dev = trace_distance(&lhs, &rhs).unwrap();
            assert!(dev < 1e-10, "covariance deviation {dev}");
        }
    }
}
