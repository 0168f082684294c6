//! End-to-end protocol runners with complete resource accounting.
//!
//! Three variants are implemented:
//!
//! - [`run_average`]: perfectly repeatable average extraction. Each run
//!   preprocesses one copy, dephases, extracts the free-energy drop of the
//!   dephased qubit, and repumps the reservoir once so its quality parameters
//!   are restored exactly.
//! - [`run_single_shot`]: perfectly repeatable sharp extraction of
//!   `1 + kT log Z` with success probability `q`; the unit repump is paid on
//!   failure as well.
//! - [`run_theorem1`]: batched extraction from M copies without intermediate
//!   repumping, followed by `ceil(M(1-p)) + ceil(s sigma^{4/3})` repumps and a
//!   restoration measurement above level M, with the success-probability and
//!   gentle-measurement bounds evaluated alongside.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erf;

use crate::error::{CohworkError, Result};
use crate::ladder::{
    self, apply_preprocessing, make_uniform_reference, quality, repump, LadderState,
    MeasurementOutcome, QualityParams, RotationSpec,
};
use crate::qcore::{self, PureQubit};
use crate::thermo::{binary_entropy, Bath};

/// Ground population below this threshold counts as the exact R00 = 0 regime
/// required for perfect repeatability.
pub const REPEATABILITY_R00_TOL: f64 = 1e-12;
/// Batched setups should satisfy M p >> 1 and M (1-p) >> 1; below this the
/// report carries a flag.
pub const BATCH_SIZE_SOFT_MIN: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Average,
    SingleShot,
    Theorem1,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    /// Work values are exact means; ledgers are deterministic.
    Analytic,
    /// Outcomes are drawn from the seeded generator.
    Sampled,
}

/// Declarative reservoir choice carried in configs.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ReferenceSpec {
    Uniform {
        offset: usize,
        levels: usize,
    },
    Fock {
        level: usize,
    },
    /// Quality-tracked model: the reservoir is represented by its conserved
    /// quality parameters instead of an evolving window state. `delta_bar = 1`
    /// is the unbounded-reference limit.
    AnalyticLimit {
        delta_bar: f64,
    },
    Explicit {
        state: LadderState,
    },
}

/// Runtime form of the reservoir.
#[derive(Debug, Clone)]
pub enum ReferenceModel {
    Simulated(LadderState),
    QualityTracked { delta_bar: f64, m_lowest: usize },
}

impl ReferenceModel {
    pub fn quality(&self) -> QualityParams {
        match self {
            ReferenceModel::Simulated(state) => quality(state),
            ReferenceModel::QualityTracked {
                delta_bar,
                m_lowest,
            } => QualityParams {
                delta_bar: *delta_bar,
                m_lowest: *m_lowest,
                r00: 0.0,
                r01: num_complex::Complex64::default(),
            },
        }
    }
}

/// Full configuration of one protocol execution.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProtocolConfig {
    pub variant: Variant,
    pub beta: f64,
    /// Number of copies processed (runs for the repeatable variants, batch
    /// size M for the batched variant).
    pub copies: usize,
    /// Confidence parameter s > 0 of the batched repumping schedule.
    pub confidence_s: f64,
    pub seed: u64,
    pub reference: ReferenceSpec,
    pub mode: EvalMode,
}

impl ProtocolConfig {
    pub fn validate(&self) -> Result<()> {
        if self.copies == 0 {
            return Err(CohworkError::InvalidConfig("copies must be >= 1".into()));
        }
        if !(self.beta > 0.0) {
            return Err(CohworkError::InvalidConfig(format!(
                "beta {} must be positive",
                self.beta
            )));
        }
        if !(self.confidence_s > 0.0) {
            return Err(CohworkError::InvalidConfig(format!(
                "confidence_s {} must be positive",
                self.confidence_s
            )));
        }
        if let ReferenceSpec::AnalyticLimit { delta_bar } = self.reference {
            if !(0.0..=1.0).contains(&delta_bar) {
                return Err(CohworkError::InvalidConfig(format!(
                    "delta_bar {delta_bar} outside [0, 1]"
                )));
            }
        }
        Ok(())
    }

    pub fn bath(&self) -> Result<Bath> {
        Bath::new(self.beta)
    }

    pub fn build_reference(&self) -> Result<ReferenceModel> {
        Ok(match &self.reference {
            ReferenceSpec::Uniform { offset, levels } => {
                ReferenceModel::Simulated(make_uniform_reference(*offset, *levels)?)
            }
            ReferenceSpec::Fock { level } => ReferenceModel::Simulated(LadderState::fock(*level)),
            ReferenceSpec::AnalyticLimit { delta_bar } => ReferenceModel::QualityTracked {
                delta_bar: *delta_bar,
                m_lowest: 2,
            },
            ReferenceSpec::Explicit { state } => ReferenceModel::Simulated(state.clone()),
        })
    }
}

/// Per-run accounting entry. `net = work_extracted - repump_spend -
/// erasure_spend` by construction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub run: usize,
    pub q: f64,
    pub work_extracted: f64,
    pub repump_spend: f64,
    pub erasure_spend: f64,
    pub net: f64,
    pub succeeded: bool,
    /// Change of the reservoir free energy across this run, when the
    /// representation makes it computable.
    pub ref_delta_f: Option<f64>,
}

impl RunRecord {
    fn new(
        run: usize,
        q: f64,
        work_extracted: f64,
        repump_spend: f64,
        erasure_spend: f64,
        succeeded: bool,
        ref_delta_f: Option<f64>,
    ) -> Self {
        Self {
            run,
            q,
            work_extracted,
            repump_spend,
            erasure_spend,
            net: work_extracted - repump_spend - erasure_spend,
            succeeded,
            ref_delta_f,
        }
    }
}

/// Per-run and cumulative work accounting.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct WorkLedger {
    pub records: Vec<RunRecord>,
    /// Repump units paid at batch level (the batched schedule) rather than
    /// per run.
    pub batch_repump: f64,
    /// Erasure cost paid at batch level (restoration measurement memory).
    pub batch_erasure: f64,
    pub notes: Vec<String>,
}

impl WorkLedger {
    pub fn total_extracted(&self) -> f64 {
        self.records.iter().map(|r| r.work_extracted).sum()
    }

    pub fn total_repump(&self) -> f64 {
        self.records.iter().map(|r| r.repump_spend).sum::<f64>() + self.batch_repump
    }

    pub fn total_erasure(&self) -> f64 {
        self.records.iter().map(|r| r.erasure_spend).sum::<f64>() + self.batch_erasure
    }

    pub fn net(&self) -> f64 {
        self.total_extracted() - self.total_repump() - self.total_erasure()
    }

    pub fn mean_net_per_run(&self) -> f64 {
        self.net() / self.records.len().max(1) as f64
    }

    /// Cumulative reservoir free-energy change, when recorded every run.
    pub fn cumulative_ref_delta_f(&self) -> Option<f64> {
        self.records.iter().map(|r| r.ref_delta_f).sum()
    }
}

/// Output of the repeatable protocol runners.
#[derive(Debug, Clone, Serialize)]
pub struct ProtocolOutput {
    pub ledger: WorkLedger,
    pub quality_initial: QualityParams,
    pub quality_final: QualityParams,
    /// Final reservoir state for simulated references.
    pub final_reference: Option<LadderState>,
}

/// Improvement of the single-shot failure probability over the
/// reference-free value r, for a ground-free reservoir:
/// `r - 2 r (1-r) (1 - delta_bar)`.
pub fn delta_epsilon(r: f64, delta_bar: f64) -> f64 {
    r - 2.0 * r * (1.0 - r) * (1.0 - delta_bar)
}

/// Average work extracted from the dephased post-interaction state, before
/// the repump is paid: `1 + kT log Z - x - kT h2(x)` with
/// `x = 2p(1-p)(1 - delta_bar)`.
pub fn mean_work_tilde(p: f64, delta_bar: f64, beta: f64) -> f64 {
    let kt = 1.0 / beta;
    let x = 2.0 * p * (1.0 - p) * (1.0 - delta_bar);
    1.0 + kt * (1.0 + (-beta).exp()).ln() - x - kt * binary_entropy(x)
}

/// Asymptotic net work per copy of the batched protocol:
/// `DeltaF(|psi>) - x - kT h2(x)`. Identically `mean_work_tilde - (1-p)`.
pub fn mean_work_net(p: f64, delta_bar: f64, beta: f64) -> f64 {
    let kt = 1.0 / beta;
    let x = 2.0 * p * (1.0 - p) * (1.0 - delta_bar);
    let delta_f = p + kt * (1.0 + (-beta).exp()).ln();
    delta_f - x - kt * binary_entropy(x)
}

/// Per-run net yield of the perfectly repeatable average variant:
/// `q + kT(log Z - h2(q)) - 1` with `q = 1 - 2r(1-r)(1 - delta_bar)`.
pub fn average_work_yield(r: f64, delta_bar: f64, beta: f64) -> f64 {
    let kt = 1.0 / beta;
    let q = 1.0 - 2.0 * r * (1.0 - r) * (1.0 - delta_bar);
    q + kt * ((1.0 + (-beta).exp()).ln() - binary_entropy(q)) - 1.0
}

/// Reservoir quality at which the average yield crosses zero for the given
/// thermal occupation; 0 when the yield is positive already at delta_bar = 0.
pub fn critical_delta_bar(r: f64, beta: f64) -> f64 {
    if average_work_yield(r, 0.0, beta) > 0.0 {
        return 0.0;
    }
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if average_work_yield(r, mid, beta) > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Lower bound on the batched-protocol success probability:
/// `p1^M erf(s M^{1/6} / sqrt 2)` with `p1 = 1 - 2p(1-p)(1 - delta_bar)`.
pub fn theorem1_success_bound(p: f64, delta_bar: f64, m: usize, s: f64) -> f64 {
    let p1 = 1.0 - 2.0 * p * (1.0 - p) * (1.0 - delta_bar);
    let e_s = erf(s * (m as f64).powf(1.0 / 6.0) / std::f64::consts::SQRT_2);
    p1.powi(m as i32) * e_s
}

/// Closed-form part of the per-copy deficit of the batched protocol:
/// `s (p(1-p))^{2/3} M^{-1/3}`.
pub fn analytic_deficit_per_copy(p: f64, s: f64, m: usize) -> f64 {
    s * (p * (1.0 - p)).powf(2.0 / 3.0) * (m as f64).powf(-1.0 / 3.0)
}

/// Number of repumps of the batched schedule.
pub fn theorem1_repump_count(p: f64, m: usize, s: f64) -> u64 {
    let m_bar = (m as f64) * (1.0 - p);
    let sigma = ((m as f64) * p * (1.0 - p)).sqrt();
    m_bar.ceil() as u64 + (s * sigma.powf(4.0 / 3.0)).ceil() as u64
}

fn reference_free_energy(state: &LadderState, bath: &Bath) -> f64 {
    state.mean_energy() - bath.kt() * state.von_neumann_entropy()
}

/// Free energy of the thermal state of the full (infinite) ladder,
/// -kT log Z_R with Z_R = 1/(1 - e^{-beta}).
pub fn ladder_gibbs_free_energy(bath: &Bath) -> f64 {
    bath.kt() * (1.0 - (-bath.beta()).exp()).ln()
}

struct RunningReference {
    model: ReferenceModel,
    bath: Bath,
}

impl RunningReference {
    /// Preprocess one copy and repump once; returns (q, reservoir free-energy
    /// change) for this run.
    fn step(&mut self, sys: &PureQubit, rot: &RotationSpec) -> Result<(f64, Option<f64>)> {
        match &mut self.model {
            ReferenceModel::Simulated(state) => {
                let f_before = reference_free_energy(state, &self.bath);
                let out = apply_preprocessing(sys, state, rot)?;
                let repumped = repump(&out.reference)?;
                let f_after = reference_free_energy(&repumped, &self.bath);
                *state = repumped;
                Ok((out.q, Some(f_after - f_before)))
            }
            ReferenceModel::QualityTracked { delta_bar, .. } => {
                let q = 1.0 - 2.0 * sys.p() * (1.0 - sys.p()) * (1.0 - *delta_bar);
                // In the unbounded limit the reservoir entropy is constant and
                // its energy rises by exactly p per run.
                let delta_f = if *delta_bar == 1.0 { Some(sys.p()) } else { None };
                Ok((q, delta_f))
            }
        }
    }
}

type PreparedRun = (
    PureQubit,
    RotationSpec,
    RunningReference,
    QualityParams,
    Vec<String>,
);

fn prepare_repeatable_run(cfg: &ProtocolConfig, sys: &PureQubit) -> Result<PreparedRun> {
    cfg.validate()?;
    let bath = cfg.bath()?;
    let mut notes = Vec::new();
    let sys = if sys.phi() != 0.0 {
        notes.push(format!(
            "phase {:.6} rotated to zero by an energy-conserving z-rotation (no work cost)",
            sys.phi()
        ));
        sys.canonical()
    } else {
        *sys
    };
    let rot = RotationSpec::for_system(&sys);
    let model = cfg.build_reference()?;
    let q0 = model.quality();
    if q0.r00 > REPEATABILITY_R00_TOL {
        return Err(CohworkError::PreconditionViolation(format!(
            "perfect repeatability needs R00 = 0 (got {:.3e}); start the reservoir above the ground level",
            q0.r00
        )));
    }
    if let ReferenceModel::Simulated(_) = model {
        if q0.m_lowest < 2 {
            return Err(CohworkError::PreconditionViolation(format!(
                "repeatable runs need support starting at level 2 or higher (m_lowest = {})",
                q0.m_lowest
            )));
        }
    }
    Ok((sys, rot, RunningReference { model, bath }, q0, notes))
}

/// Perfectly repeatable average work extraction.
///
/// Analytic mode books the exact mean `DeltaF(D(rho'_S))` per run. Sampled
/// mode draws the two-point work variable `{kT log Z, 1 + kT log Z}` from an
/// energy measurement of the dephased qubit and charges the measurement
/// memory erasure `kT h2(q)` per run, so the sampled mean net matches the
/// analytic value.
pub fn run_average(cfg: &ProtocolConfig, sys: &PureQubit) -> Result<ProtocolOutput> {
    let (sys, rot, mut reference, q0, notes) = prepare_repeatable_run(cfg, sys)?;
    let bath = cfg.bath()?;
    let kt = bath.kt();
    let log_z = bath.qubit_log_z();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut ledger = WorkLedger {
        notes,
        ..WorkLedger::default()
    };
    for run in 1..=cfg.copies {
        let (q, ref_delta_f) = reference.step(&sys, &rot)?;
        let (work, erasure) = match cfg.mode {
            EvalMode::Analytic => (q + kt * (log_z - binary_entropy(q)), 0.0),
            EvalMode::Sampled => {
                let excited = rng.gen::<f64>() < q;
                let w = if excited { 1.0 + kt * log_z } else { kt * log_z };
                (w, kt * binary_entropy(q))
            }
        };
        ledger
            .records
            .push(RunRecord::new(run, q, work, 1.0, erasure, true, ref_delta_f));
    }
    let quality_final = reference.model.quality();
    let final_reference = match reference.model {
        ReferenceModel::Simulated(state) => Some(state),
        ReferenceModel::QualityTracked { .. } => None,
    };
    Ok(ProtocolOutput {
        ledger,
        quality_initial: q0,
        quality_final,
        final_reference,
    })
}

/// Perfectly repeatable single-shot extraction of `1 + kT log Z` with success
/// probability q. The unit repump is paid on failure as well; the reservoir
/// evolves unconditionally (the work outcome lives on the system side), so
/// its quality parameters are restored exactly every run.
pub fn run_single_shot(cfg: &ProtocolConfig, sys: &PureQubit) -> Result<ProtocolOutput> {
    let (sys, rot, mut reference, q0, notes) = prepare_repeatable_run(cfg, sys)?;
    let bath = cfg.bath()?;
    let kt = bath.kt();
    let log_z = bath.qubit_log_z();
    let sharp = 1.0 + kt * log_z;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut ledger = WorkLedger {
        notes,
        ..WorkLedger::default()
    };
    for run in 1..=cfg.copies {
        let (q, ref_delta_f) = reference.step(&sys, &rot)?;
        let (work, succeeded) = match cfg.mode {
            EvalMode::Analytic => (q * sharp, true),
            EvalMode::Sampled => {
                if rng.gen::<f64>() < q {
                    (sharp, true)
                } else {
                    (0.0, false)
                }
            }
        };
        ledger
            .records
            .push(RunRecord::new(run, q, work, 1.0, 0.0, succeeded, ref_delta_f));
    }
    let quality_final = reference.model.quality();
    let final_reference = match reference.model {
        ReferenceModel::Simulated(state) => Some(state),
        ReferenceModel::QualityTracked { .. } => None,
    };
    Ok(ProtocolOutput {
        ledger,
        quality_initial: q0,
        quality_final,
        final_reference,
    })
}

/// Report of one batched execution.
#[derive(Debug, Clone, Serialize)]
pub struct Theorem1Report {
    pub copies: usize,
    pub p: f64,
    pub delta_bar_initial: f64,
    pub q_first: f64,
    pub q_last: f64,
    pub p_succ_observed: f64,
    pub p_succ_bound: f64,
    pub outcome: MeasurementOutcome,
    pub repump_count: u64,
    pub erasure_cost: f64,
    /// Work advanced to the repump schedule beyond what extraction had
    /// produced by that point (0 when financing closes).
    pub advance: f64,
    /// Mean extracted work per copy before batch costs.
    pub mean_work_tilde_observed: f64,
    /// Net work per copy after repump and erasure costs.
    pub mean_work_per_copy: f64,
    /// `mean_work_net(p, delta_bar) - mean_work_per_copy`.
    pub deficit_per_copy: f64,
    pub delta_quality_observed: f64,
    pub delta_quality_bound: f64,
    pub m_lowest_initial: usize,
    pub m_lowest_final: usize,
    /// Trace norm between the measured state and the repumped
    /// pre-measurement state, when the windows are small enough to
    /// materialize densely.
    pub gentle_trace_norm: Option<f64>,
    pub flags: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Theorem1Output {
    pub report: Theorem1Report,
    pub ledger: WorkLedger,
    pub final_reference: LadderState,
}

fn trace_norm_between(a: &LadderState, b: &LadderState) -> Option<f64> {
    let lo = a.offset().min(b.offset());
    let hi = (a.offset() + a.dim()).max(b.offset() + b.dim());
    let width = hi - lo;
    if width > ladder::DENSE_WINDOW_CAP {
        return None;
    }
    let ma = a.dense_window(lo, width).ok()?;
    let mb = b.dense_window(lo, width).ok()?;
    let diff = ma - mb;
    Some(
        qcore::hermitian_eigenvalues(&diff)
            .iter()
            .map(|v| v.abs())
            .sum(),
    )
}

/// Batched protocol: M preprocessing rounds, the repump schedule, then the
/// restoration measurement above level M.
pub fn run_theorem1(cfg: &ProtocolConfig, sys: &PureQubit) -> Result<Theorem1Output> {
    cfg.validate()?;
    let bath = cfg.bath()?;
    let kt = bath.kt();
    let log_z = bath.qubit_log_z();
    let m = cfg.copies;
    let s = cfg.confidence_s;
    let mut notes = Vec::new();
    let sys = if sys.phi() != 0.0 {
        notes.push(format!(
            "phase {:.6} rotated to zero by an energy-conserving z-rotation (no work cost)",
            sys.phi()
        ));
        sys.canonical()
    } else {
        *sys
    };
    let p = sys.p();
    let rot = RotationSpec::for_system(&sys);
    let model = cfg.build_reference()?;
    let mut state = match model {
        ReferenceModel::Simulated(state) => state,
        ReferenceModel::QualityTracked { .. } => {
            return Err(CohworkError::InvalidConfig(
                "the batched protocol needs a simulated reservoir state".into(),
            ));
        }
    };
    let q0 = quality(&state);
    if q0.m_lowest < m + 1 {
        return Err(CohworkError::PreconditionViolation(format!(
            "batched runs over {m} copies need m_lowest >= {} (got {})",
            m + 1,
            q0.m_lowest
        )));
    }
    let mut flags = Vec::new();
    if (m as f64) * p < BATCH_SIZE_SOFT_MIN {
        flags.push(format!("M*p = {:.2} is not >> 1", (m as f64) * p));
    }
    if (m as f64) * (1.0 - p) < BATCH_SIZE_SOFT_MIN {
        flags.push(format!(
            "M*(1-p) = {:.2} is not >> 1",
            (m as f64) * (1.0 - p)
        ));
    }

    let mut ledger = WorkLedger {
        notes,
        ..WorkLedger::default()
    };
    let batched = ladder::batched_preprocess(&sys, &state, &rot, m)?;
    state = batched.reference;
    let q_first = batched.qs[0];
    let q_last = *batched.qs.last().expect("at least one round");
    for (run, &q) in batched.qs.iter().enumerate() {
        let work = q + kt * (log_z - binary_entropy(q));
        ledger
            .records
            .push(RunRecord::new(run + 1, q, work, 0.0, 0.0, true, None));
    }

    let extracted = ledger.total_extracted();
    let repump_count = theorem1_repump_count(p, m, s);
    let advance = (repump_count as f64 - extracted).max(0.0);
    if advance > 0.0 {
        ledger.notes.push(format!(
            "repump schedule advanced {advance:.6} units beyond extracted work"
        ));
    }
    state = ladder::repump_many(&state, repump_count as usize)?;
    ledger.batch_repump = repump_count as f64;
    let pre_measurement = state.clone();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (p_succ, outcome, measured) = match cfg.mode {
        EvalMode::Analytic => {
            let (p_above, above, below) = ladder::restoration_split(&state, m)?;
            let (outcome, st) = if let Some(st) = above {
                (MeasurementOutcome::Above, st)
            } else {
                (
                    MeasurementOutcome::Below,
                    below.ok_or(CohworkError::DegenerateBranch { weight: 0.0 })?,
                )
            };
            (p_above, outcome, st)
        }
        EvalMode::Sampled => {
            let rec = ladder::restoration_measurement(&state, m, &mut rng)?;
            (rec.p_above, rec.outcome, rec.state)
        }
    };
    if outcome == MeasurementOutcome::Below {
        ledger.notes.push(
            "restoration measurement failed: coherence properties of the reservoir are degraded"
                .into(),
        );
    }
    let erasure_cost = kt * binary_entropy(p_succ);
    ledger.batch_erasure = erasure_cost;

    let q_final = quality(&measured);
    let mean_work_tilde_observed = extracted / m as f64;
    let mean_work_per_copy = ledger.net() / m as f64;
    let deficit_per_copy = mean_work_net(p, q0.delta_bar, cfg.beta) - mean_work_per_copy;
    let gentle_trace_norm = trace_norm_between(&measured, &pre_measurement);

    let report = Theorem1Report {
        copies: m,
        p,
        delta_bar_initial: q0.delta_bar,
        q_first,
        q_last,
        p_succ_observed: p_succ,
        p_succ_bound: theorem1_success_bound(p, q0.delta_bar, m, s),
        outcome,
        repump_count,
        erasure_cost,
        advance,
        mean_work_tilde_observed,
        mean_work_per_copy,
        deficit_per_copy,
        delta_quality_observed: q_final.delta_bar - q0.delta_bar,
        delta_quality_bound: 2.0 * (1.0 - p_succ).max(0.0).sqrt(),
        m_lowest_initial: q0.m_lowest,
        m_lowest_final: q_final.m_lowest,
        gentle_trace_norm,
        flags,
    };
    Ok(Theorem1Output {
        report,
        ledger,
        final_reference: measured,
    })
}

/// Outcome of the free-energy audit of a ledger.
#[derive(Debug, Clone, Serialize)]
pub struct LedgerCheckReport {
    pub runs: usize,
    /// F_final - F_initial of the reservoir.
    pub cumulative_change: f64,
    /// Free energy extracted from the reservoir (minus the cumulative
    /// change); this is the quantity bounded by the initial surplus.
    pub extracted_from_reference: f64,
    /// F(rho_R) - F(gamma_R) of the initial state.
    pub extraction_bound: f64,
    pub bound_satisfied: bool,
    pub running_average_early: f64,
    pub running_average_mid: f64,
    pub running_average_final: f64,
    /// Whether the running average has settled (late variation no larger
    /// than the earlier one).
    pub converging: bool,
    pub all_increments_nonnegative: bool,
}

/// Audit the reservoir free-energy flow recorded in a ledger against the
/// initial surplus F(rho_R) - F(gamma_R): no protocol can extract more than
/// that surplus from the reservoir, however long it runs.
pub fn free_energy_ledger_check(
    ledger: &WorkLedger,
    initial_reference: &LadderState,
    bath: &Bath,
) -> Result<LedgerCheckReport> {
    let deltas: Vec<f64> = ledger
        .records
        .iter()
        .filter_map(|r| r.ref_delta_f)
        .collect();
    if deltas.len() < 100 || deltas.len() != ledger.records.len() {
        return Err(CohworkError::ContractViolation(format!(
            "ledger audit needs >= 100 runs with reservoir deltas (got {})",
            deltas.len()
        )));
    }
    let n = deltas.len();
    let cumulative_change: f64 = deltas.iter().sum();
    let extracted = -cumulative_change;
    let f0 = reference_free_energy(initial_reference, bath);
    let bound = f0 - ladder_gibbs_free_energy(bath);
    let running_avg = |upto: usize| -> f64 { deltas[..upto].iter().sum::<f64>() / upto as f64 };
    let early = running_avg(n / 5 + 1);
    let mid = running_avg(n / 2 + 1);
    let fin = running_avg(n);
    Ok(LedgerCheckReport {
        runs: n,
        cumulative_change,
        extracted_from_reference: extracted,
        extraction_bound: bound,
        bound_satisfied: extracted <= bound + 1e-8,
        running_average_early: early,
        running_average_mid: mid,
        running_average_final: fin,
        converging: (fin - mid).abs() <= (mid - early).abs() + 1e-12,
        all_increments_nonnegative: deltas.iter().all(|&d| d >= -1e-12),
    })
}

/// Summary of a seeded Monte Carlo over independent protocol runs with a
/// quality-tracked reservoir.
#[derive(Debug, Clone, Serialize)]
pub struct MonteCarloStats {
    pub runs: usize,
    pub failures: usize,
    pub failure_frequency: f64,
    pub mean_net: f64,
}

/// Sample `runs` single-shot outcomes at fixed (r, delta_bar). Outcomes are
/// i.i.d. Bernoulli(q) because the quality parameters are conserved exactly
/// from run to run; chunks use separate ChaCha streams so the result is
/// deterministic under any parallel schedule.
pub fn monte_carlo_single_shot(
    r: f64,
    delta_bar: f64,
    beta: f64,
    runs: usize,
    seed: u64,
) -> Result<MonteCarloStats> {
    use rayon::prelude::*;
    let bath = Bath::new(beta)?;
    PureQubit::new(r, 0.0)?;
    if !(0.0..=1.0).contains(&delta_bar) {
        return Err(CohworkError::InvalidConfig(format!(
            "delta_bar {delta_bar} outside [0, 1]"
        )));
    }
    if runs == 0 {
        return Err(CohworkError::InvalidConfig("runs must be >= 1".into()));
    }
    let q = 1.0 - 2.0 * r * (1.0 - r) * (1.0 - delta_bar);
    let sharp = 1.0 + bath.kt() * bath.qubit_log_z();
    const CHUNK: usize = 8192;
    let chunks: Vec<(usize, usize)> = (0..runs.div_ceil(CHUNK))
        .map(|i| (i, (runs - i * CHUNK).min(CHUNK)))
        .collect();
    let (failures, net_sum) = chunks
        .par_iter()
        .map(|&(stream, count)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(stream as u64 + 1);
            let mut failures = 0usize;
            let mut net = 0.0f64;
            for _ in 0..count {
                if rng.gen::<f64>() < q {
                    net += sharp - 1.0;
                } else {
                    failures += 1;
                    net -= 1.0;
                }
            }
            (failures, net)
        })
        .reduce(|| (0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1));
    Ok(MonteCarloStats {
        runs,
        failures,
        failure_frequency: failures as f64 / runs as f64,
        mean_net: net_sum / runs as f64,
    })
}
