//! The coherence reservoir: a ladder system H_R = sum_n n |n><n| simulated on
//! a finite window of levels. States carry either a dense window matrix (the
//! oracle representation) or a weighted ensemble of pure branches (the
//! scalable representation used for long protocol runs).
//!
//! The joint system-reservoir interaction is the energy-conserving unitary
//! that rotates the qubit from |psi> to |1> while the reservoir absorbs the
//! back-reaction, described exactly by the Kraus pair
//!
//! ```text
//! A0 = (1 - sqrt p) sqrt(1-p) |0><0| + sqrt(p(1-p)) (I - S),
//! A1 = p I + (1-p) S^dag,
//! ```
//!
//! where S is the upward shift operator on the ladder.

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::Rng;

use crate::error::{CohworkError, Result};
use crate::qcore::{self, max_dim, DensityOperator, PureQubit, Subsystem};
use crate::thermo::binary_entropy;

/// Populations above this threshold count as occupied when locating the
/// lowest occupied level.
pub const OCCUPANCY_THRESHOLD: f64 = 1e-12;
/// Preprocessing refuses fixed windows whose top two levels carry more than
/// this much population.
pub const TRUNCATION_GUARD: f64 = 1e-9;
/// Branch classes lighter than this are pruned.
pub const BRANCH_PRUNE_WEIGHT: f64 = 1e-15;
/// Dense window width cap for joint evolutions.
pub const DENSE_WINDOW_CAP: usize = 256;
/// Ensembles larger than this are spectrally recompressed after a step.
pub const RECOMPRESS_CAP: usize = 64;

fn c(re: f64) -> Complex64 {
    Complex64::new(re, 0.0)
}

/// Quality parameters of a reservoir state: shift-operator expectation,
/// lowest occupied level, and the two ground-sector matrix elements entering
/// the closed-form performance expressions.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct QualityParams {
    /// <(S + S^dag)/2>, window-local.
    pub delta_bar: f64,
    /// Lowest level with population above [`OCCUPANCY_THRESHOLD`].
    pub m_lowest: usize,
    /// Ground population <0|rho|0>.
    pub r00: f64,
    /// Ground coherence <0|rho|1>. Not part of the (delta_bar, M) pair but
    /// required by the back-reaction formulas, so it is carried along.
    pub r01: Complex64,
}

/// The target excited-state weight defining the qubit rotation |psi> -> |1>.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RotationSpec {
    p: f64,
}

impl RotationSpec {
    pub fn new(p: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&p) || !p.is_finite() {
            return Err(CohworkError::ContractViolation(format!(
                "rotation weight {p} outside [0, 1]"
            )));
        }
        Ok(Self { p })
    }

    pub fn for_system(sys: &PureQubit) -> Self {
        Self { p: sys.p() }
    }

    pub fn p(&self) -> f64 {
        self.p
    }
}

/// Edge amplitudes below this magnitude are trimmed away (population 1e-34,
/// far below every tolerance in use); keeps window spans tight.
pub const EDGE_AMP_TRIM: f64 = 1e-17;

/// One pure component of a branch ensemble. `amps[i]` is the amplitude at
/// absolute ladder level `offset + i`; `multiplicity` is the mixture weight
/// of the (unnormalized) vector.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct Branch {
    pub offset: usize,
    pub amps: Vec<Complex64>,
    pub multiplicity: f64,
}

impl Branch {
    fn weight(&self) -> f64 {
        self.multiplicity * self.amps.iter().map(|z| z.norm_sqr()).sum::<f64>()
    }

    /// Drop negligible entries at both ends, keeping offsets tight.
    fn trim(&mut self) {
        let negligible =
            |z: &Complex64| z.re.abs() <= EDGE_AMP_TRIM && z.im.abs() <= EDGE_AMP_TRIM;
        let leading = self.amps.iter().take_while(|z| negligible(z)).count();
        if leading == self.amps.len() {
            self.amps.clear();
            return;
        }
        let trailing = self.amps.iter().rev().take_while(|z| negligible(z)).count();
        if leading > 0 {
            self.amps.drain(..leading);
            self.offset += leading;
        }
        if trailing > 0 {
            let keep = self.amps.len() - trailing;
            self.amps.truncate(keep);
        }
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(tag = "repr", rename_all = "snake_case")]
enum LadderRepr {
    Dense {
        offset: usize,
        matrix: DMatrix<Complex64>,
    },
    Branches {
        branches: Vec<Branch>,
    },
}

/// A reservoir state on a finite ladder window.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct LadderState {
    repr: LadderRepr,
}

impl LadderState {
    /// Dense window state starting at the given absolute level.
    pub fn from_dense_window(offset: usize, matrix: DMatrix<Complex64>) -> Result<Self> {
        let dim = matrix.nrows();
        if matrix.ncols() != dim || dim == 0 {
            return Err(CohworkError::DimensionMismatch(format!(
                "{}x{} window matrix",
                matrix.nrows(),
                matrix.ncols()
            )));
        }
        check_window_extent(offset, dim)?;
        let tr = matrix.trace();
        if (tr.re - 1.0).abs() > 1e-12 || tr.im.abs() > 1e-12 {
            return Err(CohworkError::ContractViolation(format!(
                "window trace {tr} is not 1"
            )));
        }
        if qcore::hermiticity_deviation(&matrix) > 1e-12 {
            return Err(CohworkError::ContractViolation(
                "window matrix is not Hermitian".into(),
            ));
        }
        Ok(Self {
            repr: LadderRepr::Dense { offset, matrix },
        })
    }

    /// Pure state from window amplitudes.
    pub fn from_amplitudes(offset: usize, amps: Vec<Complex64>) -> Result<Self> {
        let norm_sqr: f64 = amps.iter().map(|z| z.norm_sqr()).sum();
        if (norm_sqr - 1.0).abs() > 1e-12 {
            return Err(CohworkError::ContractViolation(format!(
                "amplitude norm^2 {norm_sqr} is not 1"
            )));
        }
        check_window_extent(offset, amps.len())?;
        let mut b = Branch {
            offset,
            amps,
            multiplicity: 1.0,
        };
        b.trim();
        Ok(Self {
            repr: LadderRepr::Branches { branches: vec![b] },
        })
    }

    /// Fock state |level>.
    pub fn fock(level: usize) -> Self {
        Self::from_amplitudes(level, vec![c(1.0)]).expect("Fock state is valid")
    }

    pub fn is_dense(&self) -> bool {
        matches!(self.repr, LadderRepr::Dense { .. })
    }

    /// Lowest represented absolute level.
    pub fn offset(&self) -> usize {
        match &self.repr {
            LadderRepr::Dense { offset, .. } => *offset,
            LadderRepr::Branches { branches } => {
                branches.iter().map(|b| b.offset).min().unwrap_or(0)
            }
        }
    }

    /// Window width.
    pub fn dim(&self) -> usize {
        match &self.repr {
            LadderRepr::Dense { matrix, .. } => matrix.nrows(),
            LadderRepr::Branches { branches } => {
                let lo = self.offset();
                branches
                    .iter()
                    .map(|b| b.offset + b.amps.len())
                    .max()
                    .unwrap_or(lo)
                    - lo
            }
        }
    }

    pub fn branch_count(&self) -> usize {
        match &self.repr {
            LadderRepr::Dense { .. } => 1,
            LadderRepr::Branches { branches } => branches.len(),
        }
    }

    /// Total weight; 1 for a valid state.
    pub fn total_weight(&self) -> f64 {
        match &self.repr {
            LadderRepr::Dense { matrix, .. } => matrix.trace().re,
            LadderRepr::Branches { branches } => branches.iter().map(Branch::weight).sum(),
        }
    }

    /// Population at an absolute level.
    pub fn population(&self, level: usize) -> f64 {
        match &self.repr {
            LadderRepr::Dense { offset, matrix } => {
                if level >= *offset && level < offset + matrix.nrows() {
                    matrix[(level - offset, level - offset)].re
                } else {
                    0.0
                }
            }
            LadderRepr::Branches { branches } => branches
                .iter()
                .map(|b| {
                    if level >= b.offset && level < b.offset + b.amps.len() {
                        b.multiplicity * b.amps[level - b.offset].norm_sqr()
                    } else {
                        0.0
                    }
                })
                .sum(),
        }
    }

    /// Matrix element <row|rho|col> at absolute levels.
    pub fn matrix_element(&self, row: usize, col: usize) -> Complex64 {
        match &self.repr {
            LadderRepr::Dense { offset, matrix } => {
                let d = matrix.nrows();
                if row >= *offset && row < offset + d && col >= *offset && col < offset + d {
                    matrix[(row - offset, col - offset)]
                } else {
                    Complex64::default()
                }
            }
            LadderRepr::Branches { branches } => branches
                .iter()
                .map(|b| {
                    let lo = b.offset;
                    let hi = b.offset + b.amps.len();
                    if row >= lo && row < hi && col >= lo && col < hi {
                        c(b.multiplicity) * b.amps[row - lo] * b.amps[col - lo].conj()
                    } else {
                        Complex64::default()
                    }
                })
                .sum(),
        }
    }

    /// Window-local expectation of (S + S^dag)/2.
    pub fn delta_bar(&self) -> f64 {
        let total = self.total_weight();
        let raw = match &self.repr {
            LadderRepr::Dense { matrix, .. } => {
                let d = matrix.nrows();
                (0..d.saturating_sub(1))
                    .map(|i| matrix[(i + 1, i)].re)
                    .sum::<f64>()
            }
            LadderRepr::Branches { branches } => branches
                .iter()
                .map(|b| {
                    b.multiplicity
                        * b.amps
                            .windows(2)
                            .map(|w| (w[1] * w[0].conj()).re)
                            .sum::<f64>()
                })
                .sum(),
        };
        raw / total
    }

    /// Materialize the state as a dense matrix on the requested window.
    pub fn dense_window(&self, offset: usize, width: usize) -> Result<DMatrix<Complex64>> {
        let lo = self.offset();
        let hi = lo + self.dim();
        if lo < offset || hi > offset + width {
            return Err(CohworkError::DimensionMismatch(format!(
                "support [{lo}, {hi}) does not fit window [{offset}, {})",
                offset + width
            )));
        }
        let mut out = DMatrix::<Complex64>::zeros(width, width);
        match &self.repr {
            LadderRepr::Dense {
                offset: this_off,
                matrix,
            } => {
                let shift = this_off - offset;
                for i in 0..matrix.nrows() {
                    for j in 0..matrix.ncols() {
                        out[(i + shift, j + shift)] = matrix[(i, j)];
                    }
                }
            }
            LadderRepr::Branches { branches } => {
                for b in branches {
                    let shift = b.offset - offset;
                    for i in 0..b.amps.len() {
                        for j in 0..b.amps.len() {
                            out[(i + shift, j + shift)] +=
                                c(b.multiplicity) * b.amps[i] * b.amps[j].conj();
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// View as a density operator with absolute levels as basis energies.
    pub fn to_density_operator(&self) -> Result<DensityOperator> {
        let offset = self.offset();
        let width = self.dim();
        let m = self.dense_window(offset, width)?;
        let energies: Vec<f64> = (offset..offset + width).map(|n| n as f64).collect();
        DensityOperator::from_valid_parts(m, energies)
    }

    /// Mean energy tr(rho H_R) in gap units.
    pub fn mean_energy(&self) -> f64 {
        match &self.repr {
            LadderRepr::Dense { offset, matrix } => (0..matrix.nrows())
                .map(|i| matrix[(i, i)].re * (offset + i) as f64)
                .sum(),
            LadderRepr::Branches { branches } => branches
                .iter()
                .map(|b| {
                    b.multiplicity
                        * b.amps
                            .iter()
                            .enumerate()
                            .map(|(i, z)| z.norm_sqr() * (b.offset + i) as f64)
                            .sum::<f64>()
                })
                .sum(),
        }
    }

    /// Von Neumann entropy in nats. Branch ensembles go through the Gram
    /// matrix of their components, so the cost scales with the branch count
    /// rather than the window width.
    pub fn von_neumann_entropy(&self) -> f64 {
        match &self.repr {
            LadderRepr::Dense { matrix, .. } => {
                let vals = qcore::hermitian_eigenvalues(matrix);
                vals.iter().map(|&p| if p > 0.0 { -p * p.ln() } else { 0.0 }).sum()
            }
            LadderRepr::Branches { branches } => {
                let n = branches.len();
                let mut gram = DMatrix::<Complex64>::zeros(n, n);
                for i in 0..n {
                    for j in 0..n {
                        let scale = (branches[i].multiplicity * branches[j].multiplicity).sqrt();
                        gram[(i, j)] = c(scale)
                            * inner_abs(
                                branches[i].offset,
                                &branches[i].amps,
                                branches[j].offset,
                                &branches[j].amps,
                            );
                    }
                }
                qcore::hermitian_eigenvalues(&gram)
                    .iter()
                    .map(|&p| if p > 0.0 { -p * p.ln() } else { 0.0 })
                    .sum()
            }
        }
    }

}

fn check_window_extent(offset: usize, dim: usize) -> Result<()> {
    let cap = max_dim();
    if offset + dim > cap {
        return Err(CohworkError::ResourceLimit(format!(
            "window [{offset}, {}) exceeds COHWORK_MAX_DIM = {cap}",
            offset + dim
        )));
    }
    Ok(())
}

/// <a|b> over absolute levels for two amplitude windows.
fn inner_abs(a_off: usize, a: &[Complex64], b_off: usize, b: &[Complex64]) -> Complex64 {
    let lo = a_off.max(b_off);
    let hi = (a_off + a.len()).min(b_off + b.len());
    let mut acc = Complex64::default();
    for abs in lo..hi {
        acc += a[abs - a_off].conj() * b[abs - b_off];
    }
    acc
}

/// Uniform superposition of L consecutive levels starting at `offset`.
/// Its shift expectation is (L-1)/L.
pub fn make_uniform_reference(offset: usize, l: usize) -> Result<LadderState> {
    if l == 0 {
        return Err(CohworkError::ContractViolation(
            "uniform reference needs at least one level".into(),
        ));
    }
    let amp = c(1.0 / (l as f64).sqrt());
    LadderState::from_amplitudes(offset, vec![amp; l])
}

/// Read the quality parameters off a state.
pub fn quality(state: &LadderState) -> QualityParams {
    let total = state.total_weight();
    let delta_bar = state.delta_bar();
    let lo = state.offset();
    let hi = lo + state.dim();
    let mut m_lowest = hi;
    for level in lo..hi {
        if state.population(level) / total > OCCUPANCY_THRESHOLD {
            m_lowest = level;
            break;
        }
    }
    QualityParams {
        delta_bar,
        m_lowest,
        r00: state.population(0) / total,
        r01: state.matrix_element(0, 1) / c(total),
    }
}

/// q = 1 - 2p(1-p)(1 - delta_bar) - (1-p)^2 R00: the excited-state weight of
/// the system after preprocessing.
pub fn predicted_q(p: f64, qp: &QualityParams) -> f64 {
    1.0 - 2.0 * p * (1.0 - p) * (1.0 - qp.delta_bar) - (1.0 - p) * (1.0 - p) * qp.r00
}

/// Closed-form change of delta_bar across one preprocessing step, derived
/// from the Kraus pair:
///
/// ```text
/// d<S_bar> = (1-p) [ (sqrt p - 1) Re R01 - sqrt p R00 ].
/// ```
///
/// It vanishes whenever the reservoir has no ground support (R00 = R01 = 0).
pub fn predicted_delta_quality(p: f64, qp: &QualityParams) -> f64 {
    (1.0 - p) * ((p.sqrt() - 1.0) * qp.r01.re - p.sqrt() * qp.r00)
}

/// The joint energy-conserving unitary on qubit (x) window [0, width), with
/// the system index major. Couples |0, n> with |1, n-1> through the rotation
/// that takes |psi(p)> to |1>; the zero-energy sector |0, 0> is fixed.
pub fn preprocessing_unitary(p: f64, width: usize) -> DMatrix<Complex64> {
    let dim = 2 * width;
    let mut v = DMatrix::<Complex64>::identity(dim, dim);
    let (u00, u01, u10, u11) = (
        c(p.sqrt()),
        c(-(1.0 - p).sqrt()),
        c((1.0 - p).sqrt()),
        c(p.sqrt()),
    );
    for j in 1..width {
        let i0 = j; // |0, j>
        let i1 = width + j - 1; // |1, j-1>
        v[(i0, i0)] = u00;
        v[(i0, i1)] = u01;
        v[(i1, i0)] = u10;
        v[(i1, i1)] = u11;
    }
    v
}

/// Which Kraus operator of the back-reaction pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum KrausOperator {
    A0,
    A1,
}

/// Dense Kraus matrix on the window [0, width).
pub fn kraus_dense(which: KrausOperator, p: f64, width: usize) -> DMatrix<Complex64> {
    let mut m = DMatrix::<Complex64>::zeros(width, width);
    match which {
        KrausOperator::A0 => {
            let a = (1.0 - p.sqrt()) * (1.0 - p).sqrt();
            let b = (p * (1.0 - p)).sqrt();
            for i in 0..width {
                m[(i, i)] = c(b);
                if i + 1 < width {
                    m[(i + 1, i)] = c(-b);
                }
            }
            m[(0, 0)] += c(a);
        }
        KrausOperator::A1 => {
            for i in 0..width {
                m[(i, i)] = c(p);
                if i + 1 < width {
                    m[(i, i + 1)] = c(1.0 - p);
                }
            }
        }
    }
    m
}

fn branch_apply_a1(b: &Branch, p: f64) -> Branch {
    let len = b.amps.len();
    let get = |i: isize| -> Complex64 {
        if i >= 0 && (i as usize) < len {
            b.amps[i as usize]
        } else {
            Complex64::default()
        }
    };
    let mut out = if b.offset >= 1 {
        let amps = (0..len + 1)
            .map(|j| c(p) * get(j as isize - 1) + c(1.0 - p) * get(j as isize))
            .collect();
        Branch {
            offset: b.offset - 1,
            amps,
            multiplicity: b.multiplicity,
        }
    } else {
        // Ground in window: the lowering part annihilates level 0.
        let amps = (0..len)
            .map(|j| c(p) * get(j as isize) + c(1.0 - p) * get(j as isize + 1))
            .collect();
        Branch {
            offset: 0,
            amps,
            multiplicity: b.multiplicity,
        }
    };
    out.trim();
    out
}

fn branch_apply_a0(b: &Branch, p: f64) -> Branch {
    let a = (1.0 - p.sqrt()) * (1.0 - p).sqrt();
    let bb = (p * (1.0 - p)).sqrt();
    let len = b.amps.len();
    let get = |i: isize| -> Complex64 {
        if i >= 0 && (i as usize) < len {
            b.amps[i as usize]
        } else {
            Complex64::default()
        }
    };
    let mut amps: Vec<Complex64> = (0..len + 1)
        .map(|j| c(bb) * (get(j as isize) - get(j as isize - 1)))
        .collect();
    if b.offset == 0 {
        amps[0] += c(a) * b.amps[0];
    }
    let mut out = Branch {
        offset: b.offset,
        amps,
        multiplicity: b.multiplicity,
    };
    out.trim();
    out
}

/// Outcome of applying one Kraus operator: normalized state plus the weight
/// tr(A rho A^dag).
pub fn kraus_apply(
    state: &LadderState,
    which: KrausOperator,
    p: f64,
) -> Result<(LadderState, f64)> {
    RotationSpec::new(p)?;
    match &state.repr {
        LadderRepr::Dense { offset, matrix } => {
            let width = offset + matrix.nrows() + 1;
            if width > DENSE_WINDOW_CAP {
                return Err(CohworkError::ResourceLimit(format!(
                    "dense Kraus window {width} exceeds cap {DENSE_WINDOW_CAP}"
                )));
            }
            let full = state.dense_window(0, width)?;
            let a = kraus_dense(which, p, width);
            let mapped = &a * full * a.adjoint();
            let weight = mapped.trace().re;
            if weight <= OCCUPANCY_THRESHOLD {
                return Err(CohworkError::DegenerateBranch { weight });
            }
            let normalized = mapped / c(weight);
            Ok((LadderState::from_dense_window(0, normalized)?, weight))
        }
        LadderRepr::Branches { branches } => {
            let children: Vec<Branch> = branches
                .iter()
                .map(|b| match which {
                    KrausOperator::A0 => branch_apply_a0(b, p),
                    KrausOperator::A1 => branch_apply_a1(b, p),
                })
                .filter(|b| !b.amps.is_empty())
                .collect();
            let weight: f64 = children.iter().map(Branch::weight).sum();
            if weight <= OCCUPANCY_THRESHOLD {
                return Err(CohworkError::DegenerateBranch { weight });
            }
            let scale = 1.0 / weight;
            let normalized = children
                .into_iter()
                .map(|mut b| {
                    b.multiplicity *= scale;
                    b
                })
                .collect();
            Ok((
                LadderState {
                    repr: LadderRepr::Branches {
                        branches: normalized,
                    },
                },
                weight,
            ))
        }
    }
}

/// Result of one preprocessing step.
#[derive(Debug, Clone)]
pub struct PreprocessOutput {
    /// The system marginal after the joint evolution.
    pub system: DensityOperator,
    /// The reservoir marginal.
    pub reference: LadderState,
    /// Excited-state population of the system marginal.
    pub q: f64,
}

/// One round of the joint energy-conserving evolution. The system phase must
/// already be canonicalized to zero and the rotation must target the system's
/// own excited weight.
pub fn apply_preprocessing(
    sys: &PureQubit,
    state: &LadderState,
    rot: &RotationSpec,
) -> Result<PreprocessOutput> {
    if sys.phi() != 0.0 {
        return Err(CohworkError::PreconditionViolation(
            "system phase must be canonicalized to zero before preprocessing".into(),
        ));
    }
    if (sys.p() - rot.p()).abs() > 1e-12 {
        return Err(CohworkError::PreconditionViolation(format!(
            "rotation weight {} does not match system weight {}",
            rot.p(),
            sys.p()
        )));
    }
    let p = rot.p();
    match &state.repr {
        LadderRepr::Dense { offset, matrix } => {
            let d = matrix.nrows();
            let mut width = offset + d + 2;
            if width > DENSE_WINDOW_CAP {
                // No headroom left: accept the window as-is only if the top
                // two levels are effectively empty.
                let top = state.population(offset + d - 1) + state.population(offset + d - 2);
                if top >= TRUNCATION_GUARD {
                    return Err(CohworkError::TruncationGuard(format!(
                        "top-two window population {top:.3e} with no headroom (cap {DENSE_WINDOW_CAP})"
                    )));
                }
                width = offset + d;
                if width > DENSE_WINDOW_CAP {
                    return Err(CohworkError::ResourceLimit(format!(
                        "dense window {width} exceeds cap {DENSE_WINDOW_CAP}"
                    )));
                }
            }
            let ref_matrix = state.dense_window(0, width)?;
            let energies: Vec<f64> = (0..width).map(|n| n as f64).collect();
            let ref_do = DensityOperator::from_valid_parts(ref_matrix, energies)?;
            let joint = qcore::tensor(&sys.density(), &ref_do)?;
            let v = preprocessing_unitary(p, width);
            let evolved = joint.apply_unitary(&v)?;
            let system = qcore::partial_trace(&evolved, Subsystem::First)?;
            let reference_m = qcore::partial_trace(&evolved, Subsystem::Second)?;
            let q = system.matrix()[(1, 1)].re;
            Ok(PreprocessOutput {
                system,
                reference: LadderState::from_dense_window(0, reference_m.matrix().clone())?,
                q,
            })
        }
        LadderRepr::Branches { branches } => {
            let (children, marginal) = preprocess_branch_ensemble(branches, p)?;
            let system = DensityOperator::from_valid_parts(marginal, vec![0.0, 1.0])?;
            let q = system.matrix()[(1, 1)].re;
            Ok(PreprocessOutput {
                system,
                reference: LadderState {
                    repr: LadderRepr::Branches { branches: children },
                },
                q,
            })
        }
    }
}

/// Split every branch into its A0 and A1 children and accumulate the system
/// marginal. Exact for any input, including ground-supported states.
fn split_step(branches: &[Branch], p: f64) -> (Vec<Branch>, DMatrix<Complex64>) {
    let mut marginal = DMatrix::<Complex64>::zeros(2, 2);
    let mut children: Vec<Branch> = Vec::with_capacity(branches.len() * 2);
    for b in branches {
        let a0 = branch_apply_a0(b, p);
        let a1 = branch_apply_a1(b, p);
        marginal[(0, 0)] += c(a0.weight());
        marginal[(1, 1)] += c(a1.weight());
        // <0|rho'_S|1> = mult <A1 v | A0 v>.
        let cross = c(b.multiplicity) * inner_abs(a1.offset, &a1.amps, a0.offset, &a0.amps);
        marginal[(0, 1)] += cross;
        marginal[(1, 0)] += cross.conj();
        if !a1.amps.is_empty() {
            children.push(a1);
        }
        if !a0.amps.is_empty() {
            children.push(a0);
        }
    }
    (children, marginal)
}

fn prune_and_renormalize(mut children: Vec<Branch>) -> Result<Vec<Branch>> {
    children.retain(|b| b.weight() >= BRANCH_PRUNE_WEIGHT);
    if children.is_empty() {
        return Err(CohworkError::DegenerateBranch { weight: 0.0 });
    }
    let total: f64 = children.iter().map(Branch::weight).sum();
    let scale = 1.0 / total;
    for b in &mut children {
        b.multiplicity *= scale;
        check_window_extent(b.offset, b.amps.len())?;
    }
    Ok(children)
}

/// Replace an ensemble by the spectral decomposition of the state it
/// represents: branches become orthonormal eigenvectors weighted by
/// eigenvalues. This is representation-exact and numerically stable, and it
/// caps the branch count at the effective rank.
fn recompress(branches: &[Branch]) -> Result<Vec<Branch>> {
    let n = branches.len();
    let lo = branches.iter().map(|b| b.offset).min().unwrap_or(0);
    let hi = branches
        .iter()
        .map(|b| b.offset + b.amps.len())
        .max()
        .unwrap_or(lo);
    let width = hi - lo;
    let mut gram = DMatrix::<Complex64>::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let scale = (branches[i].multiplicity * branches[j].multiplicity).sqrt();
            let g = c(scale)
                * inner_abs(
                    branches[i].offset,
                    &branches[i].amps,
                    branches[j].offset,
                    &branches[j].amps,
                );
            gram[(i, j)] = g;
            gram[(j, i)] = g.conj();
        }
    }
    let eig = gram.symmetric_eigen();
    let mut out: Vec<Branch> = Vec::new();
    for (idx, &lambda) in eig.eigenvalues.iter().enumerate() {
        if lambda < BRANCH_PRUNE_WEIGHT {
            continue;
        }
        // Eigenvector of the state: sum_j sqrt(m_j) u_{j,idx} v_j / sqrt(lambda).
        let mut amps = vec![Complex64::default(); width];
        for (j, b) in branches.iter().enumerate() {
            let coeff = eig.eigenvectors[(j, idx)] * c(b.multiplicity.sqrt());
            if coeff.norm_sqr() == 0.0 {
                continue;
            }
            let shift = b.offset - lo;
            for (i, a) in b.amps.iter().enumerate() {
                amps[i + shift] += coeff * a;
            }
        }
        let norm = amps.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        for z in &mut amps {
            *z /= c(norm);
        }
        let mut branch = Branch {
            offset: lo,
            amps,
            multiplicity: lambda,
        };
        branch.trim();
        out.push(branch);
    }
    if out.is_empty() {
        return Err(CohworkError::DegenerateBranch { weight: 0.0 });
    }
    Ok(out)
}

/// One preprocessing step of a branch ensemble: exact splitting, pruning, and
/// spectral recompression once the ensemble outgrows [`RECOMPRESS_CAP`].
fn preprocess_branch_ensemble(
    branches: &[Branch],
    p: f64,
) -> Result<(Vec<Branch>, DMatrix<Complex64>)> {
    let (children, marginal) = split_step(branches, p);
    let mut kept = prune_and_renormalize(children)?;
    if kept.len() > RECOMPRESS_CAP {
        kept = prune_and_renormalize(recompress(&kept)?)?;
    }
    Ok((kept, marginal))
}

/// Output of a batched run of preprocessing steps.
#[derive(Debug, Clone)]
pub struct BatchedPreprocessOutput {
    pub reference: LadderState,
    /// Excited-state population of the system marginal at each round.
    pub qs: Vec<f64>,
}

/// Run `rounds` preprocessing steps without repumping, as the batched
/// protocol does. The support precondition `m_lowest >= rounds + 1` keeps the
/// reservoir clear of the ground sector for the whole batch, which is what
/// conserves its shift expectation throughout.
pub fn batched_preprocess(
    sys: &PureQubit,
    state: &LadderState,
    rot: &RotationSpec,
    rounds: usize,
) -> Result<BatchedPreprocessOutput> {
    let q0 = quality(state);
    if q0.m_lowest < rounds + 1 {
        return Err(CohworkError::PreconditionViolation(format!(
            "batched preprocessing over {rounds} rounds needs m_lowest >= {} (got {})",
            rounds + 1,
            q0.m_lowest
        )));
    }
    let mut current = state.clone();
    let mut qs = Vec::with_capacity(rounds);
    for _ in 0..rounds {
        let out = apply_preprocessing(sys, &current, rot)?;
        qs.push(out.q);
        current = out.reference;
    }
    Ok(BatchedPreprocessOutput {
        reference: current,
        qs,
    })
}

/// Shift the whole state up one level by relabeling the window. Costs one
/// unit of work, which the caller records.
pub fn repump(state: &LadderState) -> Result<LadderState> {
    if state.offset() == 0 && state.population(0) > OCCUPANCY_THRESHOLD {
        return Err(CohworkError::PreconditionViolation(format!(
            "repump requires an empty ground level (population {:.3e})",
            state.population(0)
        )));
    }
    let repr = match &state.repr {
        LadderRepr::Dense { offset, matrix } => {
            check_window_extent(offset + 1, matrix.nrows())?;
            LadderRepr::Dense {
                offset: offset + 1,
                matrix: matrix.clone(),
            }
        }
        LadderRepr::Branches { branches } => {
            let shifted: Result<Vec<Branch>> = branches
                .iter()
                .map(|b| {
                    check_window_extent(b.offset + 1, b.amps.len())?;
                    Ok(Branch {
                        offset: b.offset + 1,
                        amps: b.amps.clone(),
                        multiplicity: b.multiplicity,
                    })
                })
                .collect();
            LadderRepr::Branches {
                branches: shifted?,
            }
        }
    };
    Ok(LadderState { repr })
}

/// [`repump`] applied `count` times in one relabeling step.
pub fn repump_many(state: &LadderState, count: usize) -> Result<LadderState> {
    if count == 0 {
        return Ok(state.clone());
    }
    if state.offset() == 0 && state.population(0) > OCCUPANCY_THRESHOLD {
        return Err(CohworkError::PreconditionViolation(format!(
            "repump requires an empty ground level (population {:.3e})",
            state.population(0)
        )));
    }
    let repr = match &state.repr {
        LadderRepr::Dense { offset, matrix } => {
            check_window_extent(offset + count, matrix.nrows())?;
            LadderRepr::Dense {
                offset: offset + count,
                matrix: matrix.clone(),
            }
        }
        LadderRepr::Branches { branches } => {
            let shifted: Result<Vec<Branch>> = branches
                .iter()
                .map(|b| {
                    check_window_extent(b.offset + count, b.amps.len())?;
                    Ok(Branch {
                        offset: b.offset + count,
                        amps: b.amps.clone(),
                        multiplicity: b.multiplicity,
                    })
                })
                .collect();
            LadderRepr::Branches {
                branches: shifted?,
            }
        }
    };
    Ok(LadderState { repr })
}

/// Outcome labels of the two-outcome restoration measurement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum MeasurementOutcome {
    Above,
    Below,
}

/// Record of a restoration measurement at a threshold level.
#[derive(Debug, Clone)]
pub struct MeasurementRecord {
    pub outcome: MeasurementOutcome,
    pub state: LadderState,
    /// Probability of the Above outcome.
    pub p_above: f64,
    /// Shannon entropy (nats) of the outcome register; times kT this is the
    /// erasure cost of the measurement memory.
    pub erasure_entropy: f64,
}

/// Project onto levels above / at-or-below `m` without sampling.
pub fn restoration_split(
    state: &LadderState,
    m: usize,
) -> Result<(f64, Option<LadderState>, Option<LadderState>)> {
    let (above, below, w_above) = match &state.repr {
        LadderRepr::Dense { offset, matrix } => {
            let d = matrix.nrows();
            let mut up = matrix.clone();
            let mut down = matrix.clone();
            for i in 0..d {
                for j in 0..d {
                    let abs_i = offset + i;
                    let abs_j = offset + j;
                    if abs_i <= m || abs_j <= m {
                        up[(i, j)] = Complex64::default();
                    }
                    if abs_i > m || abs_j > m {
                        down[(i, j)] = Complex64::default();
                    }
                }
            }
            let w = up.trace().re;
            let mk = |mat: DMatrix<Complex64>, w: f64| -> Option<LadderState> {
                if w > OCCUPANCY_THRESHOLD {
                    Some(LadderState {
                        repr: LadderRepr::Dense {
                            offset: *offset,
                            matrix: mat / c(w),
                        },
                    })
                } else {
                    None
                }
            };
            (mk(up, w), mk(down, 1.0 - w), w)
        }
        LadderRepr::Branches { branches } => {
            let mut up: Vec<Branch> = Vec::new();
            let mut down: Vec<Branch> = Vec::new();
            for b in branches {
                let mut bu = b.clone();
                let mut bd = b.clone();
                for i in 0..b.amps.len() {
                    if b.offset + i <= m {
                        bu.amps[i] = Complex64::default();
                    } else {
                        bd.amps[i] = Complex64::default();
                    }
                }
                bu.trim();
                bd.trim();
                if !bu.amps.is_empty() {
                    up.push(bu);
                }
                if !bd.amps.is_empty() {
                    down.push(bd);
                }
            }
            let w: f64 = up.iter().map(Branch::weight).sum();
            let mk = |mut list: Vec<Branch>, w: f64| -> Option<LadderState> {
                if w > OCCUPANCY_THRESHOLD && !list.is_empty() {
                    let scale = 1.0 / w;
                    for b in &mut list {
                        b.multiplicity *= scale;
                    }
                    Some(LadderState {
                        repr: LadderRepr::Branches { branches: list },
                    })
                } else {
                    None
                }
            };
            let wd: f64 = down.iter().map(Branch::weight).sum();
            (mk(up, w), mk(down, wd), w)
        }
    };
    Ok((w_above.clamp(0.0, 1.0), above, below))
}

/// Sample the two-outcome measurement {P_m, I - P_m} on the ladder and
/// project accordingly.
pub fn restoration_measurement<R: Rng + ?Sized>(
    state: &LadderState,
    m: usize,
    rng: &mut R,
) -> Result<MeasurementRecord> {
    let (p_above, above, below) = restoration_split(state, m)?;
    let take_above = rng.gen::<f64>() < p_above;
    let (outcome, projected) = if take_above {
        (MeasurementOutcome::Above, above)
    } else {
        (MeasurementOutcome::Below, below)
    };
    let state = projected.ok_or(CohworkError::DegenerateBranch {
        weight: if take_above { p_above } else { 1.0 - p_above },
    })?;
    Ok(MeasurementRecord {
        outcome,
        state,
        p_above,
        erasure_entropy: binary_entropy(p_above),
    })
}
