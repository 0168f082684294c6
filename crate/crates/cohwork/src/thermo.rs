//! Thermodynamic primitives: thermal states, free energies, the average and
//! single-shot work formulas for incoherent states, and the coherence-to-work
//! conversion bound. Units: k_B = 1, qubit gap = 1, entropies in nats.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{CohworkError, Result};
use crate::qcore::{coherence_measure, von_neumann_entropy, DensityOperator};

/// Coherence below this threshold counts as incoherent for the work-locking
/// guard.
pub const INCOHERENCE_TOL: f64 = 1e-10;
/// Slack applied to the strict population constraint in the Z_epsilon search.
pub const SUBSET_SLACK: f64 = 1e-12;
/// Exhaustive subset minimization is limited to this many levels.
pub const SUBSET_DIM_CAP: usize = 20;

/// Heat bath at fixed inverse temperature (energies in gap units).
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Bath {
    beta: f64,
}

impl Bath {
    pub fn new(beta: f64) -> Result<Self> {
        if !(beta > 0.0) || !beta.is_finite() {
            return Err(CohworkError::ContractViolation(format!(
                "inverse temperature {beta} must be positive"
            )));
        }
        Ok(Self { beta })
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn kt(&self) -> f64 {
        1.0 / self.beta
    }

    /// Thermal occupation of the excited level of a unit-gap qubit.
    pub fn qubit_excited_occupation(&self) -> f64 {
        let b = (-self.beta).exp();
        b / (1.0 + b)
    }

    /// log Z for the unit-gap qubit.
    pub fn qubit_log_z(&self) -> f64 {
        (1.0 + (-self.beta).exp()).ln()
    }
}

/// Failure-probability budget for single-shot work extraction.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SingleShotSpec {
    epsilon: f64,
}

impl SingleShotSpec {
    pub fn new(epsilon: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&epsilon) {
            return Err(CohworkError::ContractViolation(format!(
                "failure probability {epsilon} outside [0, 1)"
            )));
        }
        Ok(Self { epsilon })
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }
}

/// Binary entropy in nats with the 0 log 0 = 0 convention.
pub fn binary_entropy(x: f64) -> f64 {
    let term = |p: f64| if p > 0.0 { -p * p.ln() } else { 0.0 };
    term(x) + term(1.0 - x)
}

/// A thermal state together with its partition function.
#[derive(Debug, Clone)]
pub struct ThermalState {
    pub state: DensityOperator,
    pub partition_function: f64,
}

/// Gibbs state on the given energy levels.
pub fn thermal_state(energies: &[f64], bath: &Bath) -> ThermalState {
    let weights: Vec<f64> = energies.iter().map(|e| (-bath.beta() * e).exp()).collect();
    let z: f64 = weights.iter().sum();
    let diag = DVector::from_iterator(
        energies.len(),
        weights.iter().map(|w| Complex64::new(w / z, 0.0)),
    );
    let state = DensityOperator::from_valid_parts(DMatrix::from_diagonal(&diag), energies.to_vec())
        .expect("Gibbs state is valid");
    ThermalState {
        state,
        partition_function: z,
    }
}

/// F(rho) = tr(rho H) - kT S(rho), with H read off the basis energies.
pub fn free_energy(rho: &DensityOperator, bath: &Bath) -> f64 {
    rho.mean_energy() - bath.kt() * von_neumann_entropy(rho)
}

fn require_incoherent(rho: &DensityOperator, what: &str) -> Result<()> {
    let a = coherence_measure(rho);
    if a >= INCOHERENCE_TOL {
        return Err(CohworkError::ContractViolation(format!(
            "{what} requires an incoherent state (coherence {a:.3e}); dephase first — \
             coherence is locked without a reference"
        )));
    }
    Ok(())
}

/// Average extractable work from an incoherent state: the free energy drop to
/// the thermal state on the same levels. Coherent inputs are rejected.
pub fn average_work_incoherent(rho: &DensityOperator, bath: &Bath) -> Result<f64> {
    require_incoherent(rho, "average work extraction")?;
    let gamma = thermal_state(rho.basis_energies(), bath);
    Ok(free_energy(rho, bath) - free_energy(&gamma.state, bath))
}

/// Minimal partial partition function over level subsets capturing more than
/// 1 - epsilon of the population.
pub fn z_epsilon(rho: &DensityOperator, bath: &Bath, spec: &SingleShotSpec) -> Result<f64> {
    let dim = rho.dim();
    if dim > SUBSET_DIM_CAP {
        return Err(CohworkError::ResourceLimit(format!(
            "subset minimization over {dim} levels exceeds the cap of {SUBSET_DIM_CAP}"
        )));
    }
    let pops = rho.populations();
    let boltzmann: Vec<f64> = rho
        .basis_energies()
        .iter()
        .map(|e| (-bath.beta() * e).exp())
        .collect();
    let needed = 1.0 - spec.epsilon() - SUBSET_SLACK;
    let mut best = f64::INFINITY;
    for mask in 0u32..(1u32 << dim) {
        let mut p = 0.0;
        let mut z = 0.0;
        for (i, (&pi, &bi)) in pops.iter().zip(&boltzmann).enumerate() {
            if mask & (1 << i) != 0 {
                p += pi;
                z += bi;
            }
        }
        if p > needed && z < best {
            best = z;
        }
    }
    Ok(best)
}

/// Sharp work extractable with failure probability at most epsilon from an
/// incoherent state: kT log(Z / Z_epsilon).
pub fn single_shot_work(
    rho: &DensityOperator,
    bath: &Bath,
    spec: &SingleShotSpec,
) -> Result<f64> {
    require_incoherent(rho, "single-shot work extraction")?;
    let z_eps = z_epsilon(rho, bath, spec)?;
    let z = thermal_state(rho.basis_energies(), bath).partition_function;
    Ok(bath.kt() * (z.ln() - z_eps.ln()))
}

/// kT A(rho): the average work stored in coherence, equal to
/// F(rho) - F(D(rho)).
pub fn coherence_work_bound(rho: &DensityOperator, bath: &Bath) -> f64 {
    bath.kt() * coherence_measure(rho)
}

/// Failure budgets reported by [`work_locking_check`].
pub const LOCKING_EPSILONS: [f64; 4] = [0.0, 0.05, 0.25, 0.5];

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct WorkLockingReport {
    /// Average work of the dephased state, the best any reference-free
    /// pipeline can do on the input.
    pub average_work: f64,
    /// Single-shot work of the dephased state at each entry of
    /// [`LOCKING_EPSILONS`].
    pub single_shot: Vec<(f64, f64)>,
    /// Coherence of the input that stays locked.
    pub locked_coherence: f64,
}

/// Evaluate the reference-free pipeline on a (possibly coherent) state: all
/// extractable values equal those of the dephased state.
pub fn work_locking_check(rho: &DensityOperator, bath: &Bath) -> Result<WorkLockingReport> {
    let dephased = rho.dephased();
    let average_work = average_work_incoherent(&dephased, bath)?;
    let mut single_shot = Vec::with_capacity(LOCKING_EPSILONS.len());
    for eps in LOCKING_EPSILONS {
        let w = single_shot_work(&dephased, bath, &SingleShotSpec::new(eps)?)?;
        single_shot.push((eps, w));
    }
    Ok(WorkLockingReport {
        average_work,
        single_shot,
        locked_coherence: coherence_measure(rho),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qcore::{random_density, PureQubit};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn diag_state(pops: &[f64], energies: &[f64]) -> DensityOperator {
        let d = DVector::from_iterator(pops.len(), pops.iter().map(|&p| Complex64::new(p, 0.0)));
        DensityOperator::from_valid_parts(DMatrix::from_diagonal(&d), energies.to_vec()).unwrap()
    }

    #[test]
    fn qubit_thermal_state() {
        let bath = Bath::new(1.0).unwrap();
        let t = thermal_state(&[0.0, 1.0], &bath);
        let z = 1.0 + (-1.0f64).exp();
        assert_abs_diff_eq!(t.partition_function, z, epsilon = 1e-15);
        assert_abs_diff_eq!(t.state.matrix()[(0, 0)].re, 1.0 / z, epsilon = 1e-15);
        assert_abs_diff_eq!(t.state.matrix()[(1, 1)].re, (-1.0f64).exp() / z, epsilon = 1e-15);
    }

    #[test]
    fn cold_limit_is_ground_state() {
        let bath = Bath::new(60.0).unwrap();
        let t = thermal_state(&[0.0, 1.0, 2.0], &bath);
        assert_abs_diff_eq!(t.state.matrix()[(0, 0)].re, 1.0, epsilon = 1e-10);
    }

    #[test]
    fn truncated_ladder_partition_function_is_geometric() {
        let bath = Bath::new(1.0).unwrap();
        let d = 12;
        let energies: Vec<f64> = (0..d).map(|n| n as f64).collect();
        let t = thermal_state(&energies, &bath);
        let q = (-1.0f64).exp();
        let expect = (1.0 - q.powi(d as i32)) / (1.0 - q);
        assert_abs_diff_eq!(t.partition_function, expect, epsilon = 1e-12);
    }

    #[test]
    fn gibbs_state_free_energy_is_minus_kt_log_z() {
        for beta in [0.5, 1.0, 2.5] {
            let bath = Bath::new(beta).unwrap();
            let t = thermal_state(&[0.0, 1.0, 2.0, 3.5], &bath);
            assert_abs_diff_eq!(
                free_energy(&t.state, &bath),
                -bath.kt() * t.partition_function.ln(),
                epsilon = 1e-10
            );
        }
    }

    #[test]
    fn excited_state_free_energy() {
        let bath = Bath::new(1.0).unwrap();
        let excited = diag_state(&[0.0, 1.0], &[0.0, 1.0]);
        assert_abs_diff_eq!(free_energy(&excited, &bath), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn coherent_gibbs_free_energy_gap() {
        let bath = Bath::new(1.0).unwrap();
        let r = bath.qubit_excited_occupation();
        let gamma_ket = PureQubit::new(r, 0.0).unwrap().density();
        let gamma = thermal_state(&[0.0, 1.0], &bath);
        let gap = free_energy(&gamma_ket, &bath) - free_energy(&gamma.state, &bath);
        assert_abs_diff_eq!(gap, r + bath.qubit_log_z(), epsilon = 1e-12);
    }

    #[test]
    fn free_energy_minimized_by_gibbs() {
        let bath = Bath::new(1.3).unwrap();
        let energies = [0.0, 1.0, 2.0];
        let gamma = thermal_state(&energies, &bath);
        let f_gamma = free_energy(&gamma.state, &bath);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..25 {
            let rho = random_density(&energies, &mut rng);
            assert!(free_energy(&rho, &bath) >= f_gamma - 1e-9);
        }
    }

    #[test]
    fn average_work_of_gibbs_is_zero() {
        let bath = Bath::new(1.0).unwrap();
        let gamma = thermal_state(&[0.0, 1.0], &bath);
        assert_abs_diff_eq!(
            average_work_incoherent(&gamma.state, &bath).unwrap(),
            0.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn average_work_of_excited_state() {
        let bath = Bath::new(1.0).unwrap();
        let excited = diag_state(&[0.0, 1.0], &[0.0, 1.0]);
        assert_abs_diff_eq!(
            average_work_incoherent(&excited, &bath).unwrap(),
            1.0 + bath.qubit_log_z(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn average_work_of_binary_diagonal() {
        let bath = Bath::new(1.0).unwrap();
        let q = 0.83;
        let rho = diag_state(&[1.0 - q, q], &[0.0, 1.0]);
        let expect = q - bath.kt() * binary_entropy(q) + bath.kt() * bath.qubit_log_z();
        assert_abs_diff_eq!(
            average_work_incoherent(&rho, &bath).unwrap(),
            expect,
            epsilon = 1e-12
        );
    }

    #[test]
    fn coherent_input_is_rejected() {
        let bath = Bath::new(1.0).unwrap();
        let psi = PureQubit::new(0.4, 0.0).unwrap().density();
        assert!(matches!(
            average_work_incoherent(&psi, &bath),
            Err(CohworkError::ContractViolation(_))
        ));
        let spec = SingleShotSpec::new(0.1).unwrap();
        assert!(single_shot_work(&psi, &bath, &spec).is_err());
    }

    #[test]
    fn single_shot_work_of_gibbs_qubit_has_three_regimes() {
        let bath = Bath::new(1.0).unwrap();
        let r = bath.qubit_excited_occupation();
        let gamma = thermal_state(&[0.0, 1.0], &bath);
        let log_z = bath.qubit_log_z();
        // Below r: no usable subset, Z_eps = Z.
        let w = single_shot_work(&gamma.state, &bath, &SingleShotSpec::new(0.5 * r).unwrap())
            .unwrap();
        assert_abs_diff_eq!(w, 0.0, epsilon = 1e-12);
        // At the boundary and above: drop the excited level.
        for eps in [r, r + 0.05] {
            let w =
                single_shot_work(&gamma.state, &bath, &SingleShotSpec::new(eps).unwrap()).unwrap();
            assert_abs_diff_eq!(w, log_z, epsilon = 1e-12);
        }
        // Above 1 - r: keep only the excited level.
        let w = single_shot_work(
            &gamma.state,
            &bath,
            &SingleShotSpec::new(1.0 - r + 0.01).unwrap(),
        )
        .unwrap();
        assert_abs_diff_eq!(w, 1.0 + log_z, epsilon = 1e-12);
    }

    #[test]
    fn zero_epsilon_on_full_support_gives_zero_for_gibbs() {
        let bath = Bath::new(0.7).unwrap();
        let gamma = thermal_state(&[0.0, 1.0, 2.0], &bath);
        let w = single_shot_work(&gamma.state, &bath, &SingleShotSpec::new(0.0).unwrap()).unwrap();
        assert_abs_diff_eq!(w, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn coherence_bound_matches_free_energy_gap() {
        let bath = Bath::new(1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for _ in 0..20 {
            let rho = random_density(&[0.0, 1.0, 2.0], &mut rng);
            let lhs = free_energy(&rho, &bath) - free_energy(&rho.dephased(), &bath);
            assert_abs_diff_eq!(lhs, coherence_work_bound(&rho, &bath), epsilon = 1e-10);
        }
        let r = bath.qubit_excited_occupation();
        let gamma_ket = PureQubit::new(r, 0.0).unwrap().density();
        assert_abs_diff_eq!(
            coherence_work_bound(&gamma_ket, &bath),
            binary_entropy(r) * bath.kt(),
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            coherence_work_bound(&gamma_ket.dephased(), &bath),
            0.0,
            epsilon = 1e-15
        );
    }

    #[test]
    fn work_locking_reports_match_dephased_state() {
        let bath = Bath::new(1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        for _ in 0..10 {
            let p: f64 = rng.gen_range(0.05..0.95);
            let phi: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let psi = PureQubit::new(p, phi).unwrap().density();
            let coherent = work_locking_check(&psi, &bath).unwrap();
            let incoherent = work_locking_check(&psi.dephased(), &bath).unwrap();
            assert_eq!(coherent.average_work, incoherent.average_work);
            assert_eq!(coherent.single_shot, incoherent.single_shot);
        }
        // Gibbs ket against the Gibbs state itself.
        let r = bath.qubit_excited_occupation();
        let ket = PureQubit::new(r, 0.0).unwrap().density();
        let gamma = thermal_state(&[0.0, 1.0], &bath);
        let a = work_locking_check(&ket, &bath).unwrap();
        let b = work_locking_check(&gamma.state, &bath).unwrap();
        assert_abs_diff_eq!(a.average_work, b.average_work, epsilon = 1e-12);
        assert_abs_diff_eq!(a.average_work, 0.0, epsilon = 1e-12);
        // Incoherent input: same as plain average work.
        let excited = diag_state(&[0.0, 1.0], &[0.0, 1.0]);
        let rep = work_locking_check(&excited, &bath).unwrap();
        assert_abs_diff_eq!(
            rep.average_work,
            average_work_incoherent(&excited, &bath).unwrap(),
            epsilon = 1e-15
        );
    }

    fn diag_state_strategy() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (2usize..6).prop_flat_map(|dim| {
            (
                proptest::collection::vec(0.01f64..1.0, dim),
                proptest::collection::vec(0.0f64..3.0, dim),
            )
        })
    }

    proptest! {
        #[test]
        fn z_epsilon_monotone_in_epsilon((weights, energies) in diag_state_strategy()) {
            let total: f64 = weights.iter().sum();
            let pops: Vec<f64> = weights.iter().map(|w| w / total).collect();
            let rho = diag_state(&pops, &energies);
            let bath = Bath::new(1.0).unwrap();
            let mut last = f64::INFINITY;
            for eps in [0.0, 0.1, 0.3, 0.6, 0.9] {
                let z = z_epsilon(&rho, &bath, &SingleShotSpec::new(eps).unwrap()).unwrap();
                prop_assert!(z <= last + 1e-12);
                last = z;
            }
        }

        #[test]
        fn single_shot_work_nondecreasing_in_epsilon((weights, energies) in diag_state_strategy()) {
            let total: f64 = weights.iter().sum();
            let pops: Vec<f64> = weights.iter().map(|w| w / total).collect();
            let rho = diag_state(&pops, &energies);
            let bath = Bath::new(1.0).unwrap();
            let mut last = f64::NEG_INFINITY;
            for eps in [0.0, 0.2, 0.5, 0.8] {
                let w = single_shot_work(&rho, &bath, &SingleShotSpec::new(eps).unwrap()).unwrap();
                prop_assert!(w >= last - 1e-12);
                last = w;
            }
        }
    }
}
