//! Adaptive Dormand–Prince 5(4) integrator for complex-valued systems.

use num_complex::Complex64;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct OdeOptions {
    pub rtol: f64,
    pub atol: f64,
    pub max_steps: usize,
    pub initial_step: Option<f64>,
}

impl Default for OdeOptions {
    fn default() -> Self {
        OdeOptions {
            rtol: 1e-10,
            atol: 1e-13,
            max_steps: 1_000_000,
            initial_step: None,
        }
    }
}

impl OdeOptions {
    pub fn tight() -> Self {
        OdeOptions {
            rtol: 1e-12,
            atol: 1e-15,
            ..Default::default()
        }
    }
}

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

const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

/// Integrates `dy/dt = rhs(t, y)` from `grid[0]` and returns the state at
/// every grid point (the first entry is `y0`). Steps are clipped so that
/// every grid point is hit exactly.
pub fn integrate<F>(rhs: F, y0: &[Complex64], grid: &[f64], opts: &OdeOptions) -> Result<Vec<Vec<Complex64>>>
where
    F: Fn(f64, &[Complex64], &mut [Complex64]),
{
    let n = y0.len();
    if grid.is_empty() {
        return Ok(Vec::new());
    }
    if grid.windows(2).any(|w| !(w[1] >= w[0])) {
        return Err(Error::InvalidParameter("time grid must be ascending".into()));
    }
    let mut out = Vec::with_capacity(grid.len());
    out.push(y0.to_vec());

    let zero = Complex64::new(0.0, 0.0);
    let mut y = y0.to_vec();
    let mut t = grid[0];
    let mut k: Vec<Vec<Complex64>> = vec![vec![zero; n]; 7];
    let mut tmp = vec![zero; n];
    let mut ynew = vec![zero; n];
    rhs(t, &y, &mut k[0]);

    let span = grid[grid.len() - 1] - grid[0];
    let mut h = opts.initial_step.unwrap_or_else(|| initial_step(&y, &k[0], span, opts));
    let mut steps = 0usize;

    for &target in &grid[1..] {
        while t < target {
            if steps >= opts.max_steps {
                return Err(Error::IntegrationFailure {
                    time: t,
                    reason: format!("step budget of {} exhausted", opts.max_steps),
                });
            }
            let mut hs = h.min(target - t);
            let last = hs >= target - t;
            if last {
                hs = target - t;
            }
            if hs <= f64::EPSILON * t.abs().max(1.0) && !last {
                return Err(Error::IntegrationFailure {
                    time: t,
                    reason: "step size underflow".into(),
                });
            }

            stage(&y, &[(A21, &k[0])], hs, &mut tmp);
            rhs(t + C2 * hs, &tmp, &mut k[1]);
            stage(&y, &[(A31, &k[0]), (A32, &k[1])], hs, &mut tmp);
            rhs(t + C3 * hs, &tmp, &mut k[2]);
            stage(&y, &[(A41, &k[0]), (A42, &k[1]), (A43, &k[2])], hs, &mut tmp);
            rhs(t + C4 * hs, &tmp, &mut k[3]);
            stage(
                &y,
                &[(A51, &k[0]), (A52, &k[1]), (A53, &k[2]), (A54, &k[3])],
                hs,
                &mut tmp,
            );
            rhs(t + C5 * hs, &tmp, &mut k[4]);
            stage(
                &y,
                &[(A61, &k[0]), (A62, &k[1]), (A63, &k[2]), (A64, &k[3]), (A65, &k[4])],
                hs,
                &mut tmp,
            );
            rhs(t + hs, &tmp, &mut k[5]);
            stage(
                &y,
                &[(A71, &k[0]), (A73, &k[2]), (A74, &k[3]), (A75, &k[4]), (A76, &k[5])],
                hs,
                &mut ynew,
            );
            rhs(t + hs, &ynew, &mut k[6]);

            let mut acc = 0.0;
            for i in 0..n {
                let err = hs
                    * (E1 * k[0][i] + E3 * k[2][i] + E4 * k[3][i] + E5 * k[4][i] + E6 * k[5][i] + E7 * k[6][i]);
                let sc = opts.atol + opts.rtol * y[i].norm().max(ynew[i].norm());
                acc += (err.norm() / sc).powi(2);
            }
            let err = if n > 0 { (acc / n as f64).sqrt() } else { 0.0 };
            steps += 1;

            if !err.is_finite() || ynew.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
                if hs < 1e-300 {
                    return Err(Error::IntegrationFailure {
                        time: t,
                        reason: "non-finite state".into(),
                    });
                }
                h = hs * 0.1;
                continue;
            }

            if err <= 1.0 {
                t = if last { target } else { t + hs };
                std::mem::swap(&mut y, &mut ynew);
                k.swap(0, 6);
                let fac = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };
                // Do not let a short clipped step shrink the next proposal.
                h = if last { h.max(hs * fac) } else { hs * fac };
            } else {
                h = hs * (0.9 * err.powf(-0.2)).clamp(0.1, 1.0);
            }
        }
        out.push(y.clone());
    }
    Ok(out)
}

fn stage(y: &[Complex64], terms: &[(f64, &Vec<Complex64>)], h: f64, out: &mut [Complex64]) {
    for i in 0..y.len() {
        let mut acc = Complex64::new(0.0, 0.0);
        for (a, k) in terms {
            acc += *a * k[i];
        }
        out[i] = y[i] + h * acc;
    }
}

fn initial_step(y: &[Complex64], f0: &[Complex64], span: f64, opts: &OdeOptions) -> f64 {
    let ny = y.iter().map(|v| v.norm()).fold(0.0, f64::max);
    let nf = f0.iter().map(|v| v.norm()).fold(0.0, f64::max);
    let tol = opts.atol + opts.rtol * ny;
    let h = if nf > 0.0 { 0.01 * (tol / nf).powf(0.2) * (ny / nf).clamp(1e-3, 1.0) } else { 1e-3 };
    let h = if h.is_finite() && h > 0.0 { h } else { 1e-3 };
    if span > 0.0 {
        h.min(span)
    } else {
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn damped_rotation() {
        // y' = (-a + i w) y
        let lam = Complex64::new(-1.3, 7.0);
        let grid: Vec<f64> = (0..=20).map(|i| i as f64 * 0.1).collect();
        let ys = integrate(
            |_, y, dy| dy[0] = lam * y[0],
            &[Complex64::new(1.0, 0.0)],
            &grid,
            &OdeOptions::tight(),
        )
        .unwrap();
        for (t, y) in grid.iter().zip(&ys) {
            let exact = (lam * t).exp();
            assert!((y[0] - exact).norm() < 1e-11, "t={t}");
        }
    }

    #[test]
    fn driven_decay_with_constant() {
        // y' = -k y + e, y(0)=0 -> e/k (1 - e^{-kt})
        let (kk, e) = (28.0, 1.4);
        let grid: Vec<f64> = (0..=50).map(|i| i as f64 * 0.01).collect();
        let ys = integrate(
            |_, y, dy| dy[0] = -kk * y[0] + e,
            &[Complex64::new(0.0, 0.0)],
            &grid,
            &OdeOptions::default(),
        )
        .unwrap();
        for (t, y) in grid.iter().zip(&ys) {
            let exact = e / kk * (1.0 - (-kk * t).exp());
            assert!((y[0].re - exact).abs() < 1e-10 * (e / kk) + 1e-13);
        }
    }

    #[test]
    fn rejects_descending_grid() {
        let r = integrate(|_, _, _| {}, &[Complex64::new(1.0, 0.0)], &[1.0, 0.0], &OdeOptions::default());
        assert!(r.is_err());
    }

    #[test]
    fn blowup_reports_time() {
        let r = integrate(
            |_, y, dy| dy[0] = y[0] * y[0],
            &[Complex64::new(1.0, 0.0)],
            &[0.0, 2.0],
            &OdeOptions {
                max_steps: 100_000,
                ..Default::default()
            },
        );
        match r {
            Err(Error::IntegrationFailure { time, .. }) => assert!(time < 1.0 + 1e-6),
            other => panic!("expected failure, got {other:?}"),
        }
    }
}
