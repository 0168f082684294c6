//! Executable embodiments of two structural facts used throughout the
//! protocol analysis:
//!
//! - strict energy conservation forces energy fluctuations into any ancilla
//!   that absorbs a system's coherence (the `(|0> + |2>)/sqrt 2 -> |1>`
//!   example, reported through the H = S + A entropy decomposition), and
//! - channels built from a conserving unitary and an incoherent ancilla
//!   commute with energy dephasing, while coherent ancillas break that
//!   covariance.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;
use serde::Serialize;

use crate::error::{CohworkError, Result};
use crate::ladder::make_uniform_reference;
use crate::qcore::{
    self, coherence_measure, energy_measurement_entropy, trace_distance, von_neumann_entropy,
    DensityOperator, Subsystem,
};

/// Energy-measurement (H), von Neumann (S) and coherence (A) entropies of the
/// ancilla before and after the conserving interaction; H = S + A on both
/// sides.
#[derive(Debug, Clone, Serialize)]
pub struct FluctuationReport {
    pub h_before: f64,
    pub h_after: f64,
    pub s_before: f64,
    pub s_after: f64,
    pub a_before: f64,
    pub a_after: f64,
}

/// Demonstrate the forced fluctuation growth: a three-level system in
/// `(|0> + |2>)/sqrt 2` is mapped to `|1>` by a strictly conserving unitary
/// acting jointly with a ladder ancilla prepared in `|m>`, which ends in
/// `(|m-1> + |m+1>)/sqrt 2`.
pub fn appendix_b_demo(m: usize) -> Result<FluctuationReport> {
    if m < 1 {
        return Err(CohworkError::ContractViolation(
            "the ancilla window needs a level below m; require m >= 1".into(),
        ));
    }
    // System: energies 0, 1, 2; state (|0> + |2>)/sqrt 2.
    let sys_energies = vec![0.0, 1.0, 2.0];
    let amp = Complex64::new(std::f64::consts::FRAC_1_SQRT_2, 0.0);
    let psi = DVector::from_vec(vec![amp, Complex64::default(), amp]);
    let system = DensityOperator::from_pure(&psi, sys_energies)?;
    // Ancilla: window [m-1, m+2) of the ladder, prepared in |m>.
    let anc_energies: Vec<f64> = (m - 1..m + 2).map(|n| n as f64).collect();
    let mut anc_amp = DVector::from_element(3, Complex64::default());
    anc_amp[1] = Complex64::new(1.0, 0.0);
    let ancilla = DensityOperator::from_pure(&anc_amp, anc_energies)?;

    let h_before = energy_measurement_entropy(&ancilla);
    let s_before = von_neumann_entropy(&ancilla);
    let a_before = coherence_measure(&ancilla);

    // Joint basis |s, a> at index 3 s + a (ancilla window index a).
    // The conserving unitary swaps within the two degenerate sectors that
    // carry the initial support: |0, m> <-> |1, m-1> (total energy m) and
    // |2, m> <-> |1, m+1> (total energy m + 2); identity elsewhere.
    let mut u = DMatrix::<Complex64>::identity(9, 9);
    let swap = |u: &mut DMatrix<Complex64>, i: usize, j: usize| {
        u[(i, i)] = Complex64::default();
        u[(j, j)] = Complex64::default();
        u[(i, j)] = Complex64::new(1.0, 0.0);
        u[(j, i)] = Complex64::new(1.0, 0.0);
    };
    swap(&mut u, 1, 3); // |0, m> <-> |1, m-1>
    swap(&mut u, 7, 5); // |2, m> <-> |1, m+1>

    let joint = qcore::tensor(&system, &ancilla)?;
    let evolved = joint.apply_unitary(&u)?;
    let anc_after = qcore::partial_trace(&evolved, Subsystem::Second)?;

    Ok(FluctuationReport {
        h_before,
        h_after: energy_measurement_entropy(&anc_after),
        s_before,
        s_after: von_neumann_entropy(&anc_after),
        a_before,
        a_after: coherence_measure(&anc_after),
    })
}

/// A channel of the form rho -> tr_A[ U (rho (x) rho_A) U^dag ] with U
/// strictly energy conserving.
#[derive(Debug, Clone)]
pub struct AncillaChannel {
    unitary: DMatrix<Complex64>,
    ancilla: DensityOperator,
    sys_energies: Vec<f64>,
}

impl AncillaChannel {
    /// Build from an explicit conserving unitary on system (x) ancilla.
    pub fn new(
        unitary: DMatrix<Complex64>,
        ancilla: DensityOperator,
        sys_energies: Vec<f64>,
    ) -> Result<Self> {
        let dim = sys_energies.len() * ancilla.dim();
        if unitary.nrows() != dim || unitary.ncols() != dim {
            return Err(CohworkError::DimensionMismatch(format!(
                "unitary {}x{} on joint dimension {dim}",
                unitary.nrows(),
                unitary.ncols()
            )));
        }
        Ok(Self {
            unitary,
            ancilla,
            sys_energies,
        })
    }

    /// Random sector-wise Haar unitary on the joint energies.
    pub fn random<R: Rng + ?Sized>(
        sys_energies: &[f64],
        ancilla: DensityOperator,
        rng: &mut R,
    ) -> Result<Self> {
        let mut joint_energies = Vec::with_capacity(sys_energies.len() * ancilla.dim());
        for es in sys_energies {
            for ea in ancilla.basis_energies() {
                joint_energies.push(es + ea);
            }
        }
        let unitary = qcore::energy_conserving_unitary(&joint_energies, rng);
        Self::new(unitary, ancilla, sys_energies.to_vec())
    }

    /// The identity channel (trivial ancilla coupling).
    pub fn identity(sys_energies: &[f64], ancilla: DensityOperator) -> Result<Self> {
        let dim = sys_energies.len() * ancilla.dim();
        Self::new(
            DMatrix::<Complex64>::identity(dim, dim),
            ancilla,
            sys_energies.to_vec(),
        )
    }

    pub fn sys_energies(&self) -> &[f64] {
        &self.sys_energies
    }

    pub fn apply(&self, rho: &DensityOperator) -> Result<DensityOperator> {
        if rho.basis_energies() != self.sys_energies.as_slice() {
            return Err(CohworkError::DimensionMismatch(
                "input energies do not match the channel's system".into(),
            ));
        }
        let joint = qcore::tensor(rho, &self.ancilla)?;
        let evolved = joint.apply_unitary(&self.unitary)?;
        qcore::partial_trace(&evolved, Subsystem::First)
    }
}

/// Maximal deviation of `D(E(rho))` from `E(D(rho))` over random inputs:
/// zero (to tolerance) exactly when the ancilla carries no coherence.
pub fn covariance_check<R: Rng + ?Sized>(
    channel: &AncillaChannel,
    samples: usize,
    rng: &mut R,
) -> Result<f64> {
    let mut max_dev: f64 = 0.0;
    for _ in 0..samples {
        let rho = qcore::random_density(channel.sys_energies(), rng);
        let lhs = channel.apply(&rho)?.dephased();
        let rhs = channel.apply(&rho.dephased())?;
        max_dev = max_dev.max(trace_distance(&lhs, &rhs)?);
    }
    Ok(max_dev)
}

/// The preprocessing interaction viewed as a channel on the qubit, with a
/// uniform-superposition ladder ancilla: a deterministic coherent-ancilla
/// channel that visibly breaks dephasing covariance.
pub fn coherent_ancilla_channel(levels: usize) -> Result<AncillaChannel> {
    let width = levels + 2;
    let ancilla = make_uniform_reference(0, levels)?.to_density_operator()?;
    let padded = {
        let mut m = DMatrix::<Complex64>::zeros(width, width);
        for i in 0..levels {
            for j in 0..levels {
                m[(i, j)] = ancilla.matrix()[(i, j)];
            }
        }
        DensityOperator::from_valid_parts(m, (0..width).map(|n| n as f64).collect())?
    };
    let v = crate::ladder::preprocessing_unitary(0.5, width);
    AncillaChannel::new(v, padded, vec![0.0, 1.0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::thermo::{thermal_state, Bath};
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn fluctuation_demo_entropy_bookkeeping() {
        for m in 1..=10 {
            let rep = appendix_b_demo(m).unwrap();
            assert_abs_diff_eq!(rep.h_before, 0.0, epsilon = 1e-12);
            assert_abs_diff_eq!(rep.h_after - rep.h_before, 2f64.ln(), epsilon = 1e-12);
            assert!(rep.h_after > rep.h_before);
            // Pure throughout.
            assert_abs_diff_eq!(rep.s_before, 0.0, epsilon = 1e-12);
            assert_abs_diff_eq!(rep.s_after, 0.0, epsilon = 1e-10);
            // The coherence moved into the ancilla.
            assert_abs_diff_eq!(rep.a_after - rep.a_before, 2f64.ln(), epsilon = 1e-10);
            // Decomposition H = S + A on both sides.
            assert_abs_diff_eq!(rep.h_before, rep.s_before + rep.a_before, epsilon = 1e-10);
            assert_abs_diff_eq!(rep.h_after, rep.s_after + rep.a_after, epsilon = 1e-10);
        }
    }

    #[test]
    fn fluctuation_demo_needs_headroom() {
        assert!(appendix_b_demo(0).is_err());
    }

    #[test]
    fn incoherent_ancilla_channels_are_covariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let bath = Bath::new(1.0).unwrap();
        for _ in 0..20 {
            let ancilla = thermal_state(&[0.0, 1.0, 2.0], &bath).state;
            let channel = AncillaChannel::random(&[0.0, 1.0], ancilla, &mut rng).unwrap();
            let dev = covariance_check(&channel, 5, &mut rng).unwrap();
            assert!(dev < 1e-10, "covariance deviation {dev}");
        }
    }

    #[test]
    fn identity_channel_has_zero_deviation() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let bath = Bath::new(1.0).unwrap();
        let ancilla = thermal_state(&[0.0, 1.0], &bath).state;
        let channel = AncillaChannel::identity(&[0.0, 1.0], ancilla).unwrap();
        let dev = covariance_check(&channel, 5, &mut rng).unwrap();
        assert_abs_diff_eq!(dev, 0.0, epsilon = 1e-14);
    }

    #[test]
    fn coherent_ancilla_breaks_covariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let channel = coherent_ancilla_channel(4).unwrap();
        let dev = covariance_check(&channel, 20, &mut rng).unwrap();
        assert!(dev > 0.01, "expected visible deviation, got {dev}");
    }
}
