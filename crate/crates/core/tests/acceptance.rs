//! Acceptance suite. Each test prints one pass/fail line; run with
//! `cargo test --test acceptance -- --nocapture` to see them all.
//!
//! Every tolerance here is exact: rollback correctness is defined as
//! bitwise equality of the final verification value with the fault-free
//! run, and all accounting checks compare integers.

use std::collections::BTreeMap;
use std::time::Instant;

use mlsim_core::harness::{run, run_with, sweep, RunOptions, SweepSpec};
use mlsim_core::kernels::cg::CgTopology;
use mlsim_core::kernels::stencil::StencilTopology;
use mlsim_core::kernels;
use mlsim_core::sim::Hooks;
use mlsim_core::{FailureSpec, KernelKind, RollbackPolicy, RunConfig};

fn pass(n: usize, what: &str, detail: String) {
    println!("acceptance {n} ({what}): PASS [{detail}]");
}

fn cg_base(procs: usize, iters: u64, cp_int: u64, log_size: u64) -> RunConfig {
    let mut cfg = RunConfig::new(KernelKind::Cg, procs, iters);
    cfg.size = Some(1024);
    cfg.cp_int = cp_int;
    cfg.log_size = log_size;
    cfg.mode = RollbackPolicy::Local;
    cfg
}

fn stencil_base(iters: u64, cp_int: u64, log_size: u64) -> RunConfig {
    let mut cfg = RunConfig::new(KernelKind::Stencil, 27, iters);
    cfg.size = Some(12);
    cfg.cp_int = cp_int;
    cfg.log_size = log_size;
    cfg.mode = RollbackPolicy::Local;
    cfg
}

/// Criterion 1: for both kernels, crash a fixed rank at every iteration of
/// the checkpoint interval and every kill point; the local-rollback final
/// metric is bitwise-equal to the fault-free metric, and the committed
/// delivery ledger is identical. Failures at the exact next checkpoint
/// boundary fall back to global rollback (payloads were already evicted);
/// the metric equality holds there too.
#[test]
fn acceptance_1_correctness_sweep() {
    let t0 = Instant::now();
    let mut checked = 0usize;

    // CG: 16 processes, cp_int 25, failures across iterations 26..=50.
    let base = cg_base(16, 55, 25, 25);
    let fault_free = run(&base).unwrap();
    let spec = SweepSpec {
        base,
        fail_rank: 2,
        fail_iters: (26..=50).collect(),
        fail_phases: (0..=4).collect(),
    };
    for report in sweep(&spec).unwrap() {
        let f = report.config.failures[0];
        assert_eq!(
            report.final_metric_bits, fault_free.final_metric_bits,
            "cg final metric diverged for {f:?}"
        );
        assert_eq!(
            report.obs.committed_ledger, fault_free.obs.committed_ledger,
            "cg delivery ledger diverged for {f:?}"
        );
        let boundary_late = f.iter == 50 && f.phase > 0;
        assert_eq!(
            report.metrics.mode_taken,
            if boundary_late { "global" } else { "local" },
            "unexpected mode for {f:?}"
        );
        checked += 1;
    }

    // Stencil: 27 processes, cp_int 20, failures across iterations 21..=40.
    let base = stencil_base(45, 20, 20);
    let fault_free = run(&base).unwrap();
    let spec = SweepSpec {
        base,
        fail_rank: 13,
        fail_iters: (21..=40).collect(),
        fail_phases: (0..=3).collect(),
    };
    for report in sweep(&spec).unwrap() {
        let f = report.config.failures[0];
        assert_eq!(
            report.final_metric_bits, fault_free.final_metric_bits,
            "stencil final metric diverged for {f:?}"
        );
        assert_eq!(
            report.obs.committed_ledger, fault_free.obs.committed_ledger,
            "stencil delivery ledger diverged for {f:?}"
        );
        checked += 1;
    }
    pass(
        1,
        "correctness sweep",
        format!("{checked} failure points bitwise-equal in {:?}", t0.elapsed()),
    );
}

/// Criterion 2: recompute accounting. A crash k iterations after the
/// checkpoint costs exactly k recomputed iterations under local rollback
/// (failed rank only), Σ_r (detect_iter_r - cp) under global rollback, and
/// a double crash doubles the local figure.
#[test]
fn acceptance_2_recompute_accounting() {
    let mut points = 0usize;
    for k in 1..=9u64 {
        let fail = FailureSpec {
            rank: 2,
            iter: 10 + k,
            phase: 2,
        };
        // Local: failed rank recomputes k, survivors nothing.
        let mut cfg = cg_base(16, 24, 10, 10);
        cfg.size = Some(256);
        cfg.failures = vec![fail];
        let local = run(&cfg).unwrap();
        assert_eq!(local.metrics.mode_taken, "local");
        assert_eq!(local.metrics.recompute_iters_failed_rank, k);
        assert_eq!(local.metrics.recompute_iters_total, k);

        // Global: every rank pays for the iterations it had passed.
        let mut cfg = cg_base(16, 24, 10, 10);
        cfg.size = Some(256);
        cfg.mode = RollbackPolicy::Global;
        cfg.failures = vec![fail];
        let global = run(&cfg).unwrap();
        let rec = &global.obs.recoveries[0];
        let mut expected = 0u64;
        for (rank, &front) in rec.front.iters.iter().enumerate() {
            if rank == fail.rank {
                expected += rec.victims[0].1 - rec.last_cp_iter;
            } else {
                expected += front - rec.last_cp_iter;
            }
        }
        assert_eq!(global.metrics.recompute_iters_total, expected);
        assert!(global.metrics.recompute_iters_total >= 16 + k - 1);

        // Double crash at the same iteration doubles the local figure.
        let mut cfg = cg_base(16, 24, 10, 10);
        cfg.size = Some(256);
        cfg.failures = vec![
            FailureSpec {
                rank: 0,
                iter: 10 + k,
                phase: 2,
            },
            FailureSpec {
                rank: 8,
                iter: 10 + k,
                phase: 2,
            },
        ];
        let double = run(&cfg).unwrap();
        assert_eq!(double.metrics.mode_taken, "local");
        assert_eq!(double.metrics.recompute_iters_failed_rank, 2 * k);
        assert_eq!(double.metrics.recompute_iters_total, 2 * k);
        points += 3;
    }
    pass(2, "recompute accounting", format!("{points} exact checks"));
}

/// Criterion 3: hybrid switching with log_size = cp_int/2. Local exactly
/// when the gathered front-line maximum is within cp + log_size, global
/// beyond, and no replay ever misses a log entry.
#[test]
fn acceptance_3_hybrid_switching() {
    let mut base = cg_base(16, 45, 20, 10);
    base.mode = RollbackPolicy::Hybrid;
    let fault_free = run(&base).unwrap();
    let spec = SweepSpec {
        base,
        fail_rank: 2,
        fail_iters: (21..=40).collect(),
        fail_phases: (0..=4).collect(),
    };
    // A missing log entry would abort the sweep with a protocol error.
    let reports = sweep(&spec).unwrap();
    let (mut locals, mut globals) = (0usize, 0usize);
    let mut boundary_local = false;
    let mut boundary_global = false;
    for r in &reports {
        let rec = &r.obs.recoveries[0];
        let within = rec.front.maxit - rec.last_cp_iter <= 10;
        assert_eq!(
            r.metrics.mode_taken == "local",
            within,
            "mode must flip exactly at the window boundary: {:?} front max {} cp {}",
            r.config.failures[0],
            rec.front.maxit,
            rec.last_cp_iter
        );
        assert_eq!(r.final_metric_bits, fault_free.final_metric_bits);
        if within {
            locals += 1;
            boundary_local |= rec.front.maxit - rec.last_cp_iter == 10;
        } else {
            globals += 1;
            boundary_global |= rec.front.maxit - rec.last_cp_iter == 11;
        }
    }
    assert!(locals > 0 && globals > 0);
    assert!(
        boundary_local && boundary_global,
        "sweep must probe both sides of the exact boundary"
    );
    pass(
        3,
        "hybrid switching",
        format!("{locals} local / {globals} global, exact boundary, zero missing entries"),
    );
}

/// Criterion 4: detection spread for CG at 16 and 64 processes. Killing
/// before the first communication phase stops every survivor in the
/// failure iteration; killing after the last phase stops them all in the
/// next; middle kill points split survivors across the two.
#[test]
fn acceptance_4_detection_spread() {
    let fail_iter = 13u64;
    let mut summary = Vec::new();
    for procs in [16usize, 64] {
        let last_point = kernels::comm_phase_count(KernelKind::Cg) as u8;
        for phase in 0..=last_point {
            let mut cfg = cg_base(procs, 20, 10, 10);
            cfg.size = Some(1024);
            cfg.failures = vec![FailureSpec {
                rank: 2,
                iter: fail_iter,
                phase,
            }];
            let report = run(&cfg).unwrap();
            let rec = &report.obs.recoveries[0];
            let mut in_fail = 0usize;
            let mut in_next = 0usize;
            for (rank, d) in rec.detect_iters.iter().enumerate() {
                if rank == 2 {
                    continue;
                }
                match d {
                    Some(i) if *i == fail_iter => in_fail += 1,
                    Some(i) if *i == fail_iter + 1 => in_next += 1,
                    other => panic!("rank {rank} detected at {other:?}"),
                }
            }
            let survivors = procs - 1;
            if phase == 0 {
                assert_eq!(in_fail, survivors, "{procs} procs, first kill point");
            } else if phase == last_point {
                assert_eq!(in_next, survivors, "{procs} procs, last kill point");
            } else {
                assert!(
                    in_fail > 0 && in_next > 0,
                    "{procs} procs phase {phase}: split {in_fail}/{in_next} not nonempty"
                );
            }
            summary.push(format!("{procs}p/ph{phase}:{in_fail}+{in_next}"));
        }
    }
    pass(4, "detection spread", summary.join(" "));
}

/// Criterion 5: payload-log accounting. Retained bytes always equal the
/// sum of retained payload sizes, the retained window never exceeds
/// log_size iterations (both enforced continuously by debug assertions on
/// every append during every test run), and with log_size = cp_int the
/// per-process peak equals sends-per-iteration x payload-size x cp_int,
/// with the expectation derived independently from the topology.
#[test]
fn acceptance_5_payload_accounting() {
    // CG, full window.
    let cp_int = 10u64;
    let cfg = cg_base(16, 30, cp_int, cp_int);
    let report = run(&cfg).unwrap();
    let n = 1024usize;
    for rank in 0..16 {
        let topo = CgTopology::new(rank, 16);
        let vec_bytes = (n / topo.nrows) * 8;
        let per_iter =
            topo.reduce_partners.len() * vec_bytes      // w reduce
            + vec_bytes                                  // transpose
            + topo.reduce_partners.len() * 8             // dot partials
            + topo.reduce_partners.len() * 24; // residual triple
        assert_eq!(
            report.obs.payload_bytes_peak[rank],
            per_iter as u64 * cp_int,
            "cg rank {rank} peak"
        );
    }

    // Stencil, full window: 3 halo phases of one face plane per neighbor.
    let cp_int = 8u64;
    let mut cfg = stencil_base(20, cp_int, cp_int);
    cfg.size = Some(6);
    let report = run(&cfg).unwrap();
    for rank in 0..27 {
        let topo = StencilTopology::new(rank, 27);
        let per_iter = topo.neighbor_count() * 3 * (6 * 6 * 8);
        assert_eq!(
            report.obs.payload_bytes_peak[rank],
            per_iter as u64 * cp_int,
            "stencil rank {rank} peak"
        );
    }

    // Capped window: peak scales with log_size instead of cp_int.
    let mut capped = cg_base(16, 30, 10, 4);
    capped.mode = RollbackPolicy::Hybrid;
    let capped_report = run(&capped).unwrap();
    let full_cg_peak = report_peak_for_cg_rank0();
    assert_eq!(
        capped_report.obs.payload_bytes_peak[0] / 4,
        full_cg_peak / 10,
        "peak proportional to retained iterations"
    );
    assert!(capped_report.obs.suppressed_appends > 0);
    pass(
        5,
        "payload accounting",
        "per-rank peaks match topology-derived formula; window enforced on every append".into(),
    );
}

fn report_peak_for_cg_rank0() -> u64 {
    let cfg = cg_base(16, 30, 10, 10);
    run(&cfg).unwrap().obs.payload_bytes_peak[0]
}

/// Criterion 6: transactional iterations. For every kill phase, aborting
/// after that phase and re-running yields a final state bitwise-equal to
/// the straight-through run, for both kernels.
#[test]
fn acceptance_6_transaction_property() {
    let mut checked = 0usize;
    for kernel in [KernelKind::Cg, KernelKind::Stencil] {
        let mut base = match kernel {
            KernelKind::Cg => {
                let mut c = cg_base(16, 12, 6, 6);
                c.size = Some(256);
                c
            }
            KernelKind::Stencil => {
                let mut c = stencil_base(12, 6, 6);
                c.size = Some(4);
                c.procs = 27;
                c
            }
        };
        base.mode = RollbackPolicy::Local;
        let straight = run(&base).unwrap();
        let phases = kernels::comm_phase_count(kernel) as u8;
        for phase in 0..phases {
            for iter in [2u64, 7] {
                let report = run_with(
                    &base,
                    RunOptions {
                        hooks: Hooks {
                            abort_after_phase: Some((1, iter, phase)),
                            ..Hooks::default()
                        },
                        trace: false,
                        ..RunOptions::default()
                    },
                )
                .unwrap();
                assert_eq!(
                    report.final_metric_bits, straight.final_metric_bits,
                    "{kernel:?}: abort at iter {iter} after phase {phase} changed the result"
                );
                checked += 1;
            }
        }
    }
    pass(
        6,
        "transaction property",
        format!("{checked} abort/re-run points bitwise-equal"),
    );
}

/// Criterion 7: determinism. Two identical invocations produce
/// byte-identical trace files and metrics rows.
#[test]
fn acceptance_7_determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = cg_base(16, 24, 10, 5);
    cfg.size = Some(1024);
    cfg.mode = RollbackPolicy::Hybrid;
    cfg.failures = vec![FailureSpec {
        rank: 2,
        iter: 17,
        phase: 1,
    }];
    let mut outputs: Vec<(Vec<u8>, Vec<u8>)> = Vec::new();
    for sub in ["a", "b"] {
        let dir = tmp.path().join(sub);
        run_with(
            &cfg,
            RunOptions {
                out_dir: Some(dir.clone()),
                trace: true,
                ..RunOptions::default()
            },
        )
        .unwrap();
        outputs.push((
            std::fs::read(dir.join("trace.jsonl")).unwrap(),
            std::fs::read(dir.join("metrics.csv")).unwrap(),
        ));
    }
    assert_eq!(outputs[0].0, outputs[1].0, "trace files differ");
    assert_eq!(outputs[0].1, outputs[1].1, "metrics rows differ");
    assert!(!outputs[0].0.is_empty());

    // Same determinism holds for the in-memory runner and a stencil run.
    let mut scfg = stencil_base(18, 8, 4);
    scfg.mode = RollbackPolicy::Hybrid;
    scfg.failures = vec![FailureSpec {
        rank: 13,
        iter: 11,
        phase: 2,
    }];
    let a = run(&scfg).unwrap();
    let b = run(&scfg).unwrap();
    assert_eq!(a.trace_jsonl, b.trace_jsonl);
    assert_eq!(a.metrics, b.metrics);
    pass(
        7,
        "determinism",
        format!("{} trace bytes identical across twin runs", outputs[0].0.len()),
    );
}

/// Pins of the first oracle executions, guarding against regressions in
/// the numerics or the communication schedule.
#[test]
fn pinned_verification_values() {
    let cfg = cg_base(16, 25, 25, 25);
    let report = run(&cfg).unwrap();
    assert_eq!(
        report.metrics.final_metric_hex, "403400eb080c7fb4",
        "cg zeta (16 procs, seed 1, n 1024, 25 iters) moved"
    );

    let cfg = stencil_base(20, 20, 20);
    let report = run(&cfg).unwrap();
    assert_eq!(
        report.metrics.final_metric_hex, "3f3982f4e9ec6382",
        "stencil origin energy (27 procs, seed 1, 12^3, 20 iters) moved"
    );

    // The committed ledger of a fault-free CG run is dense and unique: one
    // entry per (dst, src, iter, seq).
    let mut cfg = cg_base(16, 10, 10, 10);
    cfg.size = Some(256);
    let report = run(&cfg).unwrap();
    let per_iter: BTreeMap<u64, usize> =
        report
            .obs
            .committed_ledger
            .keys()
            .fold(BTreeMap::new(), |mut m, &(_, _, iter, _)| {
                *m.entry(iter).or_default() += 1;
                m
            });
    // 16 ranks x 7 receives per iteration (2+1+2+2).
    for (&iter, &count) in &per_iter {
        assert_eq!(count, 16 * 7, "iteration {iter} delivered-message count");
    }
}
