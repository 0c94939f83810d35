//! Independent reference implementations for the solver pack.
//!
//! Closed forms are evaluated in 256-bit binary floating point from the
//! exact f64 inputs. The runaway integrator is re-run in double-double
//! arithmetic at the same step size and compared by step count.

#![allow(dead_code)]

use astro_float::{BigFloat, Consts, Radix, RoundingMode};
use nanoworld::budget::Meter;
use nanoworld::solvers::SolverId;
use rand::Rng;
use std::collections::BTreeMap;

const P: usize = 256;
const RM: RoundingMode = RoundingMode::ToEven;

// Reference values, restated here rather than imported.
const SIGMA: f64 = 5.670374419e-8;
const R_GAS: f64 = 8.314462618;
const G0: f64 = 9.80665;
const FARADAY: f64 = 96485.33212;

/// High-precision scalar with just the operations the oracles need.
#[derive(Clone, Debug)]
pub struct Hp(BigFloat);

pub struct HpCtx {
    cc: Consts,
}

impl HpCtx {
    pub fn new() -> Self {
        Self {
            cc: Consts::new().expect("astro-float constants"),
        }
    }

    pub fn v(&self, x: f64) -> Hp {
        Hp(BigFloat::from_f64(x, P))
    }

    pub fn pi(&mut self) -> Hp {
        Hp(self.cc.pi(P, RM))
    }

    pub fn add(&self, a: &Hp, b: &Hp) -> Hp {
        Hp(a.0.add(&b.0, P, RM))
    }

    pub fn sub(&self, a: &Hp, b: &Hp) -> Hp {
        Hp(a.0.sub(&b.0, P, RM))
    }

    pub fn mul(&self, a: &Hp, b: &Hp) -> Hp {
        Hp(a.0.mul(&b.0, P, RM))
    }

    pub fn div(&self, a: &Hp, b: &Hp) -> Hp {
        Hp(a.0.div(&b.0, P, RM))
    }

    pub fn powi(&self, a: &Hp, n: usize) -> Hp {
        Hp(a.0.powi(n, P, RM))
    }

    pub fn pow(&mut self, a: &Hp, b: &Hp) -> Hp {
        Hp(a.0.pow(&b.0, P, RM, &mut self.cc))
    }

    pub fn exp(&mut self, a: &Hp) -> Hp {
        Hp(a.0.exp(P, RM, &mut self.cc))
    }

    pub fn ln(&mut self, a: &Hp) -> Hp {
        Hp(a.0.ln(P, RM, &mut self.cc))
    }

    pub fn sqrt(&self, a: &Hp) -> Hp {
        Hp(a.0.sqrt(P, RM))
    }

    pub fn f64(&mut self, a: &Hp) -> f64 {
        let s = a.0.format(Radix::Dec, RM, &mut self.cc).expect("formats");
        s.parse().unwrap_or_else(|_| panic!("unparseable {s}"))
    }

    /// `a` rounded to f64 together with its error term: `(hi, lo)` with
    /// `hi + lo` matching `a` to about 106 bits.
    pub fn dd(&mut self, a: &Hp) -> (f64, f64) {
        let hi = self.f64(a);
        let rest = self.sub(a, &self.v(hi));
        (hi, self.f64(&rest))
    }
}

fn log_uniform<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    (rng.gen_range(lo.ln()..hi.ln())).exp()
}

/// Random in-domain inputs spanning realistic engineering ranges.
pub fn sample_inputs<R: Rng>(id: SolverId, rng: &mut R) -> BTreeMap<String, f64> {
    let pairs: Vec<(&str, f64)> = match id {
        SolverId::BeamDeflection => vec![
            ("F", rng.gen_range(-1e5..1e5)),
            ("L", log_uniform(rng, 0.1, 20.0)),
            ("E", log_uniform(rng, 1e9, 4e11)),
            ("I", log_uniform(rng, 1e-8, 1e-2)),
        ],
        SolverId::EulerBuckling => vec![
            ("E", log_uniform(rng, 1e9, 4e11)),
            ("I", log_uniform(rng, 1e-8, 1e-2)),
            ("L", log_uniform(rng, 0.1, 20.0)),
            ("K", rng.gen_range(0.5..2.0)),
        ],
        SolverId::Conduction => vec![
            ("k", log_uniform(rng, 0.01, 400.0)),
            ("A", log_uniform(rng, 1e-3, 100.0)),
            ("dT", rng.gen_range(-500.0..500.0)),
            ("L", log_uniform(rng, 1e-3, 1.0)),
        ],
        SolverId::Convection => vec![
            ("h", log_uniform(rng, 1.0, 1e4)),
            ("A", log_uniform(rng, 1e-3, 100.0)),
            ("dT", rng.gen_range(-500.0..500.0)),
        ],
        SolverId::Radiation => vec![
            ("eps", rng.gen_range(0.01..1.0)),
            ("A", log_uniform(rng, 1e-3, 100.0)),
            ("T", rng.gen_range(200.0..2000.0)),
            ("T_amb", rng.gen_range(200.0..400.0)),
        ],
        SolverId::ArrheniusRate => vec![
            ("A", log_uniform(rng, 1e3, 1e15)),
            ("Ea", rng.gen_range(1e4..2e5)),
            ("T", rng.gen_range(250.0..1000.0)),
        ],
        SolverId::TimeToRunaway => {
            let t0 = rng.gen_range(290.0..360.0);
            let dt_ad = rng.gen_range(50.0..250.0);
            let ea = rng.gen_range(5e4..1.2e5);
            let t_max = t0 + rng.gen_range(10.0..(0.8 * dt_ad));
            // pick A so the initial heating time scale is 10..2000 s
            let tau = log_uniform(rng, 10.0, 2000.0);
            let a = (t_max - t0) / (tau * dt_ad * (-ea / (R_GAS * t0)).exp());
            vec![("T0", t0), ("dT_ad", dt_ad), ("A", a), ("Ea", ea), ("T_max", t_max)]
        }
        SolverId::Scaleup => vec![
            ("N1", log_uniform(rng, 0.1, 50.0)),
            ("D1", log_uniform(rng, 0.05, 1.0)),
            ("D2", log_uniform(rng, 0.1, 5.0)),
            ("rho", rng.gen_range(500.0..2000.0)),
            ("mu", log_uniform(rng, 1e-4, 10.0)),
            ("Np", rng.gen_range(0.3..6.0)),
        ],
        SolverId::ArpsDecline => vec![
            ("qi", log_uniform(rng, 1.0, 1e5)),
            ("Di", log_uniform(rng, 1e-3, 2.0)),
            ("b", if rng.gen_bool(0.1) { 0.0 } else { rng.gen_range(0.0..=1.0) }),
            ("t", rng.gen_range(0.0..50.0)),
        ],
        SolverId::ParisCycles => {
            let a0 = log_uniform(rng, 1e-5, 1e-2);
            vec![
                ("a0", a0),
                ("af", a0 * log_uniform(rng, 1.01, 100.0)),
                ("C", log_uniform(rng, 1e-13, 1e-9)),
                ("m", if rng.gen_bool(0.5) { rng.gen_range(2.1..4.5) } else { rng.gen_range(1.0..1.9) }),
                ("dsigma", log_uniform(rng, 10.0, 500.0)),
                ("Y", rng.gen_range(0.5..2.0)),
            ]
        }
        SolverId::StokesVelocity => vec![
            ("r", log_uniform(rng, 1e-7, 1e-3)),
            ("rho_p", rng.gen_range(100.0..20000.0)),
            ("rho_f", rng.gen_range(500.0..1500.0)),
            ("mu", log_uniform(rng, 1e-5, 1.0)),
        ],
        SolverId::FaradayMassLoss => vec![
            ("I", log_uniform(rng, 1e-3, 1e3)),
            ("t", rng.gen_range(0.0..1e6)),
            ("M", rng.gen_range(1.0..250.0)),
            ("n", rng.gen_range(1..=4) as f64),
        ],
    };
    pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

/// High-precision closed form; `None` for the integrator.
pub fn closed_form(id: SolverId, x: &BTreeMap<String, f64>, c: &mut HpCtx) -> Option<Vec<(String, f64)>> {
    let g = |k: &str| x[k];
    let one = |v: Hp, c: &mut HpCtx, name: &str| Some(vec![(name.to_string(), c.f64(&v))]);
    match id {
        SolverId::BeamDeflection => {
            let num = c.mul(&c.v(g("F")), &c.powi(&c.v(g("L")), 3));
            let den = c.mul(&c.mul(&c.v(3.0), &c.v(g("E"))), &c.v(g("I")));
            one(c.div(&num, &den), c, "delta")
        }
        SolverId::EulerBuckling => {
            let pi = c.pi();
            let num = c.mul(&c.mul(&c.powi(&pi, 2), &c.v(g("E"))), &c.v(g("I")));
            let kl = c.mul(&c.v(g("K")), &c.v(g("L")));
            one(c.div(&num, &c.powi(&kl, 2)), c, "P_cr")
        }
        SolverId::Conduction => {
            let num = c.mul(&c.mul(&c.v(g("k")), &c.v(g("A"))), &c.v(g("dT")));
            one(c.div(&num, &c.v(g("L"))), c, "q")
        }
        SolverId::Convection => one(c.mul(&c.mul(&c.v(g("h")), &c.v(g("A"))), &c.v(g("dT"))), c, "q"),
        SolverId::Radiation => {
            let diff = c.sub(&c.powi(&c.v(g("T")), 4), &c.powi(&c.v(g("T_amb")), 4));
            let k = c.mul(&c.mul(&c.v(g("eps")), &c.v(SIGMA)), &c.v(g("A")));
            one(c.mul(&k, &diff), c, "q")
        }
        SolverId::ArrheniusRate => {
            let arg = c.div(&c.v(-g("Ea")), &c.mul(&c.v(R_GAS), &c.v(g("T"))));
            let e = c.exp(&arg);
            one(c.mul(&c.v(g("A")), &e), c, "k")
        }
        SolverId::TimeToRunaway => None,
        SolverId::Scaleup => {
            let (n1, d1, d2) = (c.v(g("N1")), c.v(g("D1")), c.v(g("D2")));
            let (rho, mu, np) = (c.v(g("rho")), c.v(g("mu")), c.v(g("Np")));
            let two_thirds = c.div(&c.v(2.0), &c.v(3.0));
            let ratio = c.div(&d1, &d2);
            let scale = c.pow(&ratio, &two_thirds);
            let n2 = c.mul(&n1, &scale);
            let re = |c: &mut HpCtx, n: &Hp, d: &Hp| c.div(&c.mul(&c.mul(&rho, n), &c.powi(d, 2)), &mu);
            let pw = |c: &mut HpCtx, n: &Hp, d: &Hp| c.mul(&c.mul(&c.mul(&np, &rho), &c.powi(n, 3)), &c.powi(d, 5));
            let vals = [
                ("N2", n2.clone()),
                ("Re1", re(c, &n1, &d1)),
                ("Re2", re(c, &n2, &d2)),
                ("P1", pw(c, &n1, &d1)),
                ("P2", pw(c, &n2, &d2)),
            ];
            Some(vals.iter().map(|(k, v)| (k.to_string(), c.f64(v))).collect())
        }
        SolverId::ArpsDecline => {
            let (qi, di, b, t) = (c.v(g("qi")), c.v(g("Di")), g("b"), c.v(g("t")));
            let q = if b == 0.0 {
                let e = c.exp(&c.mul(&c.v(-g("Di")), &t));
                c.mul(&qi, &e)
            } else {
                let base = c.add(&c.v(1.0), &c.mul(&c.mul(&c.v(b), &di), &t));
                let expo = c.div(&c.v(-1.0), &c.v(b));
                let p = c.pow(&base, &expo);
                c.mul(&qi, &p)
            };
            one(q, c, "q")
        }
        SolverId::ParisCycles => {
            let pi = c.pi();
            let m = c.v(g("m"));
            let p = c.sub(&c.v(1.0), &c.div(&m, &c.v(2.0)));
            let grow = {
                let af = c.pow(&c.v(g("af")), &p);
                let a0 = c.pow(&c.v(g("a0")), &p);
                c.sub(&af, &a0)
            };
            let k = c.mul(&c.mul(&c.v(g("Y")), &c.v(g("dsigma"))), &c.sqrt(&pi));
            let km = c.pow(&k, &m);
            let den = c.mul(&c.mul(&c.v(g("C")), &km), &p);
            one(c.div(&grow, &den), c, "N")
        }
        SolverId::StokesVelocity => {
            let r2 = c.powi(&c.v(g("r")), 2);
            let drho = c.sub(&c.v(g("rho_p")), &c.v(g("rho_f")));
            let num = c.mul(&c.mul(&c.mul(&c.v(2.0), &r2), &drho), &c.v(G0));
            one(c.div(&num, &c.mul(&c.v(9.0), &c.v(g("mu")))), c, "v")
        }
        SolverId::FaradayMassLoss => {
            let num = c.mul(&c.mul(&c.v(g("I")), &c.v(g("t"))), &c.v(g("M")));
            one(c.div(&num, &c.mul(&c.v(g("n")), &c.v(FARADAY))), c, "m")
        }
    }
}

// -- double-double -----------------------------------------------------------

/// Unevaluated sum `hi + lo` with |lo| ≤ ulp(hi)/2.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dd {
    pub hi: f64,
    pub lo: f64,
}

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

fn quick_two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    (s, b - (s - a))
}

fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    (p, a.mul_add(b, -p))
}

impl Dd {
    pub const fn new(hi: f64, lo: f64) -> Self {
        Self { hi, lo }
    }

    pub fn from(x: f64) -> Self {
        Self { hi: x, lo: 0.0 }
    }

    pub fn add(self, o: Dd) -> Dd {
        let (s, e) = two_sum(self.hi, o.hi);
        let (t, f) = two_sum(self.lo, o.lo);
        let (s, e) = quick_two_sum(s, e + t);
        let (hi, lo) = quick_two_sum(s, e + f);
        Dd { hi, lo }
    }

    pub fn neg(self) -> Dd {
        Dd {
            hi: -self.hi,
            lo: -self.lo,
        }
    }

    pub fn sub(self, o: Dd) -> Dd {
        self.add(o.neg())
    }

    pub fn mul(self, o: Dd) -> Dd {
        let (p, e) = two_prod(self.hi, o.hi);
        let e = e + (self.hi * o.lo + self.lo * o.hi);
        let (hi, lo) = quick_two_sum(p, e);
        Dd { hi, lo }
    }

    pub fn mul_f(self, f: f64) -> Dd {
        self.mul(Dd::from(f))
    }

    pub fn div(self, o: Dd) -> Dd {
        let q1 = self.hi / o.hi;
        let r = self.sub(o.mul_f(q1));
        let q2 = r.hi / o.hi;
        let r = r.sub(o.mul_f(q2));
        let q3 = r.hi / o.hi;
        let (hi, lo) = quick_two_sum(q1, q2);
        Dd { hi, lo }.add(Dd::from(q3))
    }

    pub fn ge(self, o: Dd) -> bool {
        self.hi > o.hi || (self.hi == o.hi && self.lo >= o.lo)
    }

    pub fn to_f64(self) -> f64 {
        self.hi + self.lo
    }
}

const LN2: Dd = Dd::new(std::f64::consts::LN_2, 2.319_046_813_846_299_6e-17);

/// exp in double-double: reduce by ln 2, scale down by 2^10, Taylor, square.
pub fn dd_exp(x: Dd) -> Dd {
    if x.hi < -745.0 {
        return Dd::from(0.0);
    }
    let k = (x.hi / LN2.hi).round();
    let r = x.sub(LN2.mul_f(k));
    let r = r.mul_f(1.0 / 1024.0);
    let mut term = Dd::from(1.0);
    let mut sum = Dd::from(1.0);
    for i in 1..=24 {
        term = term.mul(r).div(Dd::from(i as f64));
        sum = sum.add(term);
        if term.hi.abs() < 1e-36 {
            break;
        }
    }
    for _ in 0..10 {
        sum = sum.mul(sum);
    }
    let scale = 2f64.powi(k as i32);
    Dd {
        hi: sum.hi * scale,
        lo: sum.lo * scale,
    }
}

/// Outcome of the reference integration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RunawayRef {
    /// First step index with T ≥ T_max.
    pub steps: u64,
    /// |T − T_max| / T_max at the nearest step on either side of the
    /// crossing; a tiny value means the crossing step is ambiguous in f64.
    pub margin: f64,
}

/// RK4 on dT/dt = ΔT_ad·A·exp(−Ea/(R·T)) in double-double.
pub fn runaway_reference(x: &BTreeMap<String, f64>, dt: f64, max_steps: u64) -> Option<RunawayRef> {
    let (t0, dt_ad, a, ea, t_max) = (x["T0"], x["dT_ad"], x["A"], x["Ea"], x["T_max"]);
    let pre = Dd::from(dt_ad).mul_f(a);
    let neg_ea = Dd::from(-ea);
    let r = Dd::from(R_GAS);
    let rate = |t: Dd| pre.mul(dd_exp(neg_ea.div(r.mul(t))));
    let h = Dd::from(dt);
    let half = h.mul_f(0.5);
    let sixth = h.div(Dd::from(6.0));
    let limit = Dd::from(t_max);
    let mut temp = Dd::from(t0);
    for n in 1..=max_steps {
        let prev = temp;
        let k1 = rate(temp);
        let k2 = rate(temp.add(half.mul(k1)));
        let k3 = rate(temp.add(half.mul(k2)));
        let k4 = rate(temp.add(h.mul(k3)));
        let incr = k1.add(k2.mul_f(2.0)).add(k3.mul_f(2.0)).add(k4);
        temp = temp.add(sixth.mul(incr));
        if temp.ge(limit) {
            let after = (temp.sub(limit)).to_f64().abs() / t_max;
            let before = (limit.sub(prev)).to_f64().abs() / t_max;
            return Some(RunawayRef {
                steps: n,
                margin: after.min(before),
            });
        }
    }
    None
}

/// Summary of one solver's oracle comparison.
#[derive(Clone, Debug)]
pub struct OracleSummary {
    pub solver: &'static str,
    pub points: usize,
    pub max_rel: f64,
    pub failures: Vec<String>,
    /// Integrator points whose crossing step was within f64 noise of the
    /// threshold and so not decidable by step count.
    pub ambiguous: usize,
}

pub fn rel_err(got: f64, want: f64) -> f64 {
    if got == want {
        0.0
    } else {
        (got - want).abs() / want.abs().max(f64::MIN_POSITIVE)
    }
}

/// Compare `points` random inputs of `id` against the oracle.
pub fn check_solver<R: Rng>(id: SolverId, points: usize, tol: f64, rng: &mut R) -> OracleSummary {
    let mut ctx = HpCtx::new();
    let mut s = OracleSummary {
        solver: id.name(),
        points,
        max_rel: 0.0,
        failures: Vec::new(),
        ambiguous: 0,
    };
    let meter = Meter::unlimited();
    for _ in 0..points {
        let x = sample_inputs(id, rng);
        if id == SolverId::TimeToRunaway {
            let mut coeffs = id.default_coefficients();
            let dt = x["T_max"] - x["T0"];
            // a step size giving a few hundred to a few thousand steps
            let dt = (dt / (x["dT_ad"] * x["A"] * (-x["Ea"] / (R_GAS * x["T0"])).exp())) / rng.gen_range(300.0..3000.0);
            coeffs.insert("dt".into(), dt);
            let max_steps = coeffs["max_steps"] as u64;
            let got = id.evaluate(&x, &coeffs, &meter);
            let want = runaway_reference(&x, dt, max_steps);
            match (got, want) {
                (Ok(out), Some(r)) => {
                    let t = out.iter().find(|(k, _)| k == "t_runaway").map(|p| p.1).unwrap_or(f64::NAN);
                    let steps = (t / dt).round() as u64;
                    let want_t = r.steps as f64 * dt;
                    if steps == r.steps {
                        s.max_rel = s.max_rel.max(rel_err(t, want_t));
                    } else if r.margin < 1e-11 && steps.abs_diff(r.steps) == 1 {
                        s.ambiguous += 1;
                    } else {
                        s.failures.push(format!("{x:?}: {steps} steps vs reference {}", r.steps));
                    }
                }
                (got, want) => s.failures.push(format!("{x:?}: solver {got:?} vs reference {want:?}")),
            }
            continue;
        }
        let want = closed_form(id, &x, &mut ctx).expect("closed form");
        match id.evaluate(&x, &id.default_coefficients(), &meter) {
            Ok(got) => {
                for ((gk, gv), (wk, wv)) in got.iter().zip(&want) {
                    assert_eq!(gk, wk);
                    let e = rel_err(*gv, *wv);
                    s.max_rel = s.max_rel.max(e);
                    if !(e <= tol) {
                        s.failures.push(format!("{x:?}: {gk} = {gv:e} vs {wv:e} (rel {e:e})"));
                    }
                }
            }
            Err(e) => s.failures.push(format!("{x:?}: {e}")),
        }
    }
    s
}

/// Max relative error of [`dd_exp`] against the 256-bit exp over `n`
/// arguments in [-700, 700].
pub fn dd_exp_error<R: Rng>(n: usize, rng: &mut R) -> f64 {
    let mut c = HpCtx::new();
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let x = rng.gen_range(-700.0..700.0);
        let got = dd_exp(Dd::from(x));
        let want = c.exp(&c.v(x));
        let (hi, lo) = c.dd(&want);
        let diff = (got.hi - hi) + (got.lo - lo);
        worst = worst.max(diff.abs() / hi.abs());
    }
    worst
}
