//! Adaptive Dormand-Prince 5(4) integrator.
//!
//! Steps are clamped so that every requested output time is hit exactly;
//! no dense-output interpolation is involved. The right-hand side may refuse
//! a state (returning `Err`), in which case the step is retried with a
//! smaller size. Running out of step size while the right-hand side keeps
//! refusing is reported as [`Outcome::Refused`] so callers can distinguish
//! leaving the physical domain from plain step-size underflow.

use std::ops::ControlFlow;

use serde::{Deserialize, Serialize};

/// Tolerances and limits for [`integrate`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IntegratorOptions {
    pub abs_tol: f64,
    pub rel_tol: f64,
    /// Initial trial step; 0 selects one automatically.
    pub initial_step: f64,
    pub min_step: f64,
    pub max_steps: usize,
}

impl Default for IntegratorOptions {
    fn default() -> Self {
        Self {
            abs_tol: 1e-10,
            rel_tol: 1e-10,
            initial_step: 0.0,
            min_step: 1e-14,
            max_steps: 50_000_000,
        }
    }
}

/// A first-order system y' = f(t, y).
pub trait OdeSystem {
    type Refusal;

    fn dim(&self) -> usize;

    fn rhs(&self, t: f64, y: &[f64], dy: &mut [f64]) -> Result<(), Self::Refusal>;
}

#[derive(Debug, Clone, PartialEq)]
pub enum Outcome<R, B> {
    /// All output times reached.
    Completed { steps: usize },
    /// The observer asked to stop.
    Stopped { t: f64, reason: B },
    /// The right-hand side kept refusing states until the step underflowed.
    Refused { t: f64, refusal: R },
    /// Step size underflow or step budget exhausted.
    Failed { t: f64, reason: String },
}

// Dormand-Prince tableau.
const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;
// error coefficients: b - b*
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

const SAFETY: f64 = 0.9;
const MAX_GROWTH: f64 = 5.0;
const MIN_SHRINK: f64 = 0.2;

/// Integrates from `t0` through every time in `outputs` (ascending, all
/// `>= t0`).
///
/// `observer(t, y, output)` runs after every accepted step; `output` is
/// `Some(k)` when the step landed on `outputs[k]`. An output equal to `t0`
/// is reported before the first step.
pub fn integrate<S, B>(
    system: &S,
    t0: f64,
    y0: &[f64],
    outputs: &[f64],
    opts: &IntegratorOptions,
    mut observer: impl FnMut(f64, &[f64], Option<usize>) -> ControlFlow<B>,
) -> Outcome<S::Refusal, B>
where
    S: OdeSystem,
{
    let n = system.dim();
    assert_eq!(y0.len(), n, "initial state has the wrong dimension");
    let mut y = y0.to_vec();
    let mut t = t0;
    let mut next_out = 0;
    while next_out < outputs.len() && outputs[next_out] <= t0 {
        if let ControlFlow::Break(reason) = observer(t, &y, Some(next_out)) {
            return Outcome::Stopped { t, reason };
        }
        next_out += 1;
    }
    if next_out == outputs.len() {
        return Outcome::Completed { steps: 0 };
    }

    let mut k1 = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut k5 = vec![0.0; n];
    let mut k6 = vec![0.0; n];
    let mut k7 = vec![0.0; n];
    let mut stage = vec![0.0; n];
    let mut y_new = vec![0.0; n];

    if let Err(refusal) = system.rhs(t, &y, &mut k1) {
        return Outcome::Refused { t, refusal };
    }

    let span = outputs[outputs.len() - 1] - t0;
    let mut h = if opts.initial_step > 0.0 {
        opts.initial_step
    } else {
        initial_step(&y, &k1, opts, span)
    };
    let mut steps = 0usize;
    let mut last_refusal = None;

    loop {
        if steps >= opts.max_steps {
            return Outcome::Failed {
                t,
                reason: format!("step budget of {} exhausted", opts.max_steps),
            };
        }
        let target = outputs[next_out];
        let mut h_try = h;
        let lands = t + h_try >= target;
        if lands {
            h_try = target - t;
        }

        let stages_ok = (|| {
            for i in 0..n {
                stage[i] = y[i] + h_try * A21 * k1[i];
            }
            system.rhs(t + C2 * h_try, &stage, &mut k2)?;
            for i in 0..n {
                stage[i] = y[i] + h_try * (A31 * k1[i] + A32 * k2[i]);
            }
            system.rhs(t + C3 * h_try, &stage, &mut k3)?;
            for i in 0..n {
                stage[i] = y[i] + h_try * (A41 * k1[i] + A42 * k2[i] + A43 * k3[i]);
            }
            system.rhs(t + C4 * h_try, &stage, &mut k4)?;
            for i in 0..n {
                stage[i] =
                    y[i] + h_try * (A51 * k1[i] + A52 * k2[i] + A53 * k3[i] + A54 * k4[i]);
            }
            system.rhs(t + C5 * h_try, &stage, &mut k5)?;
            for i in 0..n {
                stage[i] = y[i]
                    + h_try
                        * (A61 * k1[i] + A62 * k2[i] + A63 * k3[i] + A64 * k4[i] + A65 * k5[i]);
            }
            system.rhs(t + h_try, &stage, &mut k6)?;
            for i in 0..n {
                y_new[i] = y[i]
                    + h_try
                        * (A71 * k1[i] + A73 * k3[i] + A74 * k4[i] + A75 * k5[i] + A76 * k6[i]);
            }
            system.rhs(t + h_try, &y_new, &mut k7)
        })();

        if let Err(refusal) = stages_ok {
            h = 0.25 * h_try;
            if h < opts.min_step {
                return Outcome::Refused { t, refusal };
            }
            last_refusal = Some(refusal);
            continue;
        }

        let mut err_sq = 0.0;
        for i in 0..n {
            let e = h_try
                * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i] + E7 * k7[i]);
            let scale = opts.abs_tol + opts.rel_tol * y[i].abs().max(y_new[i].abs());
            err_sq += (e / scale) * (e / scale);
        }
        let err = (err_sq / n as f64).sqrt();
        if !err.is_finite() {
            h = 0.25 * h_try;
            if h < opts.min_step {
                return Outcome::Failed {
                    t,
                    reason: "non-finite error estimate".into(),
                };
            }
            continue;
        }

        if err <= 1.0 {
            steps += 1;
            t = if lands { target } else { t + h_try };
            std::mem::swap(&mut y, &mut y_new);
            std::mem::swap(&mut k1, &mut k7);
            last_refusal = None;
            let output = if lands { Some(next_out) } else { None };
            if let ControlFlow::Break(reason) = observer(t, &y, output) {
                return Outcome::Stopped { t, reason };
            }
            if lands {
                next_out += 1;
                if next_out == outputs.len() {
                    return Outcome::Completed { steps };
                }
            }
            let factor = if err == 0.0 {
                MAX_GROWTH
            } else {
                (SAFETY * err.powf(-0.2)).clamp(MIN_SHRINK, MAX_GROWTH)
            };
            // A step clamped onto an output time says little about the
            // natural step size; never let it shrink the next one.
            h = if lands { h.max(h_try * factor) } else { h_try * factor };
        } else {
            h = h_try * (SAFETY * err.powf(-0.2)).clamp(MIN_SHRINK, 1.0);
            if h < opts.min_step {
                return match last_refusal {
                    Some(refusal) => Outcome::Refused { t, refusal },
                    None => Outcome::Failed {
                        t,
                        reason: format!("step size underflow (h = {h:e})"),
                    },
                };
            }
        }
    }
}

fn initial_step(y: &[f64], f: &[f64], opts: &IntegratorOptions, span: f64) -> f64 {
    let mut d0 = 0.0;
    let mut d1 = 0.0;
    for (yi, fi) in y.iter().zip(f) {
        let sc = opts.abs_tol + opts.rel_tol * yi.abs();
        d0 += (yi / sc).powi(2);
        d1 += (fi / sc).powi(2);
    }
    let n = y.len() as f64;
    let (d0, d1) = ((d0 / n).sqrt(), (d1 / n).sqrt());
    let h = if d0 < 1e-5 || d1 < 1e-5 {
        1e-6
    } else {
        0.01 * d0 / d1
    };
    h.min(span.max(opts.min_step)).max(opts.min_step)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Oscillator(f64);

    impl OdeSystem for Oscillator {
        type Refusal = ();
        fn dim(&self) -> usize {
            2
        }
        fn rhs(&self, _t: f64, y: &[f64], dy: &mut [f64]) -> Result<(), ()> {
            dy[0] = y[1];
            dy[1] = -self.0 * self.0 * y[0];
            Ok(())
        }
    }

    #[test]
    fn harmonic_oscillator_hits_outputs() {
        let w = 3.0;
        let times: Vec<f64> = (0..=40).map(|k| 0.25 * k as f64).collect();
        let mut seen = Vec::new();
        let out = integrate(
            &Oscillator(w),
            0.0,
            &[1.0, 0.0],
            &times,
            &IntegratorOptions::default(),
            |t, y, k| {
                if let Some(k) = k {
                    seen.push((k, t, y[0]));
                }
                ControlFlow::<()>::Continue(())
            },
        );
        assert!(matches!(out, Outcome::Completed { .. }));
        assert_eq!(seen.len(), times.len());
        for (k, t, x) in seen {
            assert_eq!(t, times[k]);
            assert!((x - (w * t).cos()).abs() < 1e-8, "t={t}");
        }
    }

    struct Wall;

    impl OdeSystem for Wall {
        type Refusal = &'static str;
        fn dim(&self) -> usize {
            1
        }
        fn rhs(&self, _t: f64, y: &[f64], dy: &mut [f64]) -> Result<(), &'static str> {
            if y[0] >= 1.0 {
                return Err("wall");
            }
            // y' = 1/(2√(1-y)): (1-y)^(3/2) = 1 - 3t/4, so y = 1 at t = 4/3
            dy[0] = 0.5 / (1.0 - y[0]).sqrt();
            Ok(())
        }
    }

    #[test]
    fn refusal_is_reported() {
        let out = integrate(
            &Wall,
            0.0,
            &[0.0],
            &[2.0],
            &IntegratorOptions::default(),
            |_, _, _| ControlFlow::<()>::Continue(()),
        );
        match out {
            Outcome::Refused { t, refusal } => {
                assert_eq!(refusal, "wall");
                assert!((t - 4.0 / 3.0).abs() < 1e-4, "t = {t}");
            }
            Outcome::Failed { t, .. } => assert!((t - 4.0 / 3.0).abs() < 1e-4, "t = {t}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn observer_can_stop() {
        let out = integrate(
            &Oscillator(1.0),
            0.0,
            &[1.0, 0.0],
            &[1.0, 2.0, 3.0],
            &IntegratorOptions::default(),
            |t, _, k| {
                if k == Some(1) {
                    ControlFlow::Break(t)
                } else {
                    ControlFlow::Continue(())
                }
            },
        );
        assert_eq!(out, Outcome::Stopped { t: 2.0, reason: 2.0 });
    }

    #[test]
    fn output_at_start_time() {
        let mut first = None;
        integrate(
            &Oscillator(1.0),
            0.0,
            &[1.0, 0.0],
            &[0.0, 1.0],
            &IntegratorOptions::default(),
            |t, y, k| {
                if k == Some(0) {
                    first = Some((t, y.to_vec()));
                }
                ControlFlow::<()>::Continue(())
            },
        );
        assert_eq!(first, Some((0.0, vec![1.0, 0.0])));
    }
}
