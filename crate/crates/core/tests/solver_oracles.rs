//! Every solver against an independent high-precision reference.

#[path = "support/oracle.rs"]
mod oracle;

use nanoworld::solvers::SolverId;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const POINTS: usize = 1_000;
const TOL: f64 = 1e-9;

#[test]
fn closed_forms_match_high_precision_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for id in SolverId::ALL {
        if id == SolverId::TimeToRunaway {
            continue;
        }
        let s = oracle::check_solver(id, POINTS, TOL, &mut rng);
        println!("{:<22} max rel {:.2e}", s.solver, s.max_rel);
        assert!(s.failures.is_empty(), "{}: {:?}", s.solver, &s.failures[..s.failures.len().min(5)]);
    }
}

#[test]
fn runaway_step_count_matches_double_double_rk4() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let s = oracle::check_solver(SolverId::TimeToRunaway, POINTS, TOL, &mut rng);
    println!("runaway: max rel {:.2e}, ambiguous {}", s.max_rel, s.ambiguous);
    assert!(s.failures.is_empty(), "{:?}", &s.failures[..s.failures.len().min(5)]);
    assert!(s.ambiguous <= POINTS / 100);
}

#[test]
fn double_double_exp_agrees_with_big_float() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let worst = oracle::dd_exp_error(500, &mut rng);
    assert!(worst < 1e-28, "dd exp rel error {worst:e}");
}

#[test]
fn reference_reproduces_hand_values() {
    // F·L³/(3EI) with F=100, L=2, E=200e9, I=8e-6 is 1/6000 m exactly.
    let mut c = oracle::HpCtx::new();
    let x = SolverId::BeamDeflection.probe_inputs();
    let out = oracle::closed_form(SolverId::BeamDeflection, &x, &mut c).unwrap();
    assert!((out[0].1 - 1.0 / 6000.0).abs() < 1e-18);
}
