use cohwork::protocol::*;
use cohwork::qcore::PureQubit;
use std::time::Instant;

fn main() {
    let sys = PureQubit::new(0.5, 0.0).unwrap();
    // Criterion 11 scale.
    let c = ProtocolConfig {
        variant: Variant::Average, beta: 1.0, copies: 500, confidence_s: 2.0, seed: 7,
        reference: ReferenceSpec::Uniform { offset: 4, levels: 16 },
        mode: EvalMode::Analytic,
    };
    let t = Instant::now();
    let out = run_average(&c, &sys).unwrap();
    println!("avg 500 runs: {:.2?}  d(db)={:.3e} branches={}",
        t.elapsed(), (out.quality_final.delta_bar - out.quality_initial.delta_bar).abs(),
        out.final_reference.as_ref().unwrap().branch_count());

    // Criterion 4/5 scales.
    for (m, l) in [(200usize, 4096usize), (1000, 4096), (10000, 4096)] {
        let c = ProtocolConfig {
            variant: Variant::Theorem1, beta: 1.0, copies: m, confidence_s: 2.0, seed: 7,
            reference: ReferenceSpec::Uniform { offset: m + 1, levels: l },
            mode: EvalMode::Analytic,
        };
        let t = Instant::now();
        let out = run_theorem1(&c, &sys).unwrap();
        let rep = &out.report;
        println!("t1 M={m} L={l}: {:.2?} p_succ={:.12} (bound {:.12}) dq={:+.2e} (bound {:.2e}) deficit={:.6e} nb={}",
            t.elapsed(), rep.p_succ_observed, rep.p_succ_bound,
            rep.delta_quality_observed, rep.delta_quality_bound, rep.deficit_per_copy,
            out.final_reference.branch_count());
    }
}
