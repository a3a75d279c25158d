//! Inverted-Lorentzian fits of antibunching dips, the a₀/HWHM speed
//! metric and its dependence on the vacuum Rabi frequency.

use std::io::Write;

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;

use crate::ensemble::{average_curves, BeamConfig, Ensemble, ModeGeometry};
use crate::error::{Error, Result};
use crate::model::{atoms_for_omega_vr, mhz_to_rate, RateParams};
use crate::trace::{uniform_grid, CorrelationTrace};

pub const MIN_FIT_POINTS: usize = 10;
const MAX_ITERATIONS: usize = 500;
const REL_TOL: f64 = 1e-10;

/// Result of fitting c − a0/(1 + (τ/w)²).
#[derive(Debug, Clone, PartialEq)]
pub struct LorentzFit {
    pub c: f64,
    pub a0: f64,
    pub w: f64,
    /// Covariance of (c, a0, w).
    pub covariance: [[f64; 3]; 3],
    /// sqrt of the weighted sum of squared residuals.
    pub residual_norm: f64,
    /// Unweighted RMS residual.
    pub rms: f64,
    pub points: usize,
    pub iterations: usize,
    /// Objective after each accepted step, starting with the initial guess.
    pub objective_history: Vec<f64>,
    /// Set when the fitted dip has a0 ≤ 0 (bunched input).
    pub bunched: bool,
}

impl LorentzFit {
    pub fn speed(&self) -> f64 {
        self.a0 / self.w
    }

    /// First-order error of a0/w from the parameter covariance.
    pub fn speed_error(&self) -> f64 {
        let cv = &self.covariance;
        let (da, dw) = (1.0 / self.w, -self.a0 / (self.w * self.w));
        (da * da * cv[1][1] + dw * dw * cv[2][2] + 2.0 * da * dw * cv[1][2]).max(0.0).sqrt()
    }

    pub fn eval(&self, tau: f64) -> f64 {
        lorentz(&Vector3::new(self.c, self.a0, self.w), tau)
    }
}

fn lorentz(p: &Vector3<f64>, tau: f64) -> f64 {
    let x = tau / p[2];
    p[0] - p[1] / (1.0 + x * x)
}

fn lorentz_gradient(p: &Vector3<f64>, tau: f64) -> Vector3<f64> {
    let x = tau / p[2];
    let den = 1.0 + x * x;
    Vector3::new(1.0, -1.0 / den, -2.0 * p[1] * x * x / (p[2] * den * den))
}

/// Initial (c, a0, w): c from the last decile, a0 from the extreme point,
/// w from the first crossing of the half-depth level.
fn initial_guess(tau: &[f64], g: &[f64]) -> (f64, f64, f64) {
    let n = g.len();
    let tail = (n / 10).max(1);
    let c = g[n - tail..].iter().sum::<f64>() / tail as f64;
    let (imin, _) = g
        .iter()
        .enumerate()
        .max_by(|a, b| (a.1 - c).abs().total_cmp(&(b.1 - c).abs()))
        .unwrap();
    let a0 = c - g[imin];
    let half = c - a0 / 2.0;
    let w = (imin..n)
        .find(|&i| (g[i] - half) * a0.signum() >= 0.0)
        .map(|i| {
            if i == 0 {
                tau[0]
            } else {
                let (t0, t1, g0, g1) = (tau[i - 1], tau[i], g[i - 1], g[i]);
                if g1 != g0 {
                    t0 + (half - g0) * (t1 - t0) / (g1 - g0)
                } else {
                    t1
                }
            }
        })
        .unwrap_or(tau[n - 1] / 2.0);
    let span = tau[n - 1] - tau[0];
    let w = if w > 0.0 { w } else { span / n as f64 };
    (c, a0, w)
}

/// Default fit window: 1.5× the first τ at which the trace recovers to
/// c − 0.1·a0 (estimated from the initial guess).
pub fn default_window(trace: &CorrelationTrace) -> Option<f64> {
    let idx: Vec<usize> = (0..trace.len()).filter(|&i| trace.tau[i] >= 0.0).collect();
    if idx.len() < 2 {
        return None;
    }
    let tau: Vec<f64> = idx.iter().map(|&i| trace.tau[i]).collect();
    let g: Vec<f64> = idx.iter().map(|&i| trace.g2[i]).collect();
    let (c, a0, _) = initial_guess(&tau, &g);
    let level = c - 0.1 * a0;
    let start = g
        .iter()
        .enumerate()
        .max_by(|a, b| (a.1 - c).abs().total_cmp(&(b.1 - c).abs()))
        .map(|(i, _)| i)?;
    (start..g.len())
        .find(|&i| (g[i] - level) * a0.signum() >= 0.0)
        .map(|i| 1.5 * tau[i])
}

/// Weighted Levenberg–Marquardt fit on τ ≥ 0 (and τ ≤ `window` when given;
/// otherwise [`default_window`]). Weights are 1/stderr² when the trace has
/// errors; zero errors are floored at the smallest positive one.
pub fn fit_inverted_lorentzian(trace: &CorrelationTrace, window: Option<f64>) -> Result<LorentzFit> {
    let window = window.or_else(|| default_window(trace)).unwrap_or(f64::INFINITY);
    let keep: Vec<usize> = (0..trace.len())
        .filter(|&i| trace.tau[i] >= 0.0 && trace.tau[i] <= window && trace.g2[i].is_finite())
        .collect();
    if keep.len() < MIN_FIT_POINTS {
        return Err(Error::InvalidParameter(format!(
            "fit window holds {} points, need at least {MIN_FIT_POINTS}",
            keep.len()
        )));
    }
    let tau: Vec<f64> = keep.iter().map(|&i| trace.tau[i]).collect();
    let g: Vec<f64> = keep.iter().map(|&i| trace.g2[i]).collect();
    let has_errors = trace.has_errors();
    let weights: Vec<f64> = if has_errors {
        let floor = keep
            .iter()
            .map(|&i| trace.stderr[i])
            .filter(|&e| e > 0.0)
            .fold(f64::INFINITY, f64::min);
        keep.iter().map(|&i| trace.stderr[i].max(floor).powi(-2)).collect()
    } else {
        vec![1.0; keep.len()]
    };

    let objective = |p: &Vector3<f64>| -> f64 {
        tau.iter()
            .zip(&g)
            .zip(&weights)
            .map(|((&t, &y), &wt)| wt * (y - lorentz(p, t)).powi(2))
            .sum()
    };
    let normal = |p: &Vector3<f64>| -> (Matrix3<f64>, Vector3<f64>) {
        let mut jtj = Matrix3::zeros();
        let mut jtr = Vector3::zeros();
        for ((&t, &y), &wt) in tau.iter().zip(&g).zip(&weights) {
            let j = lorentz_gradient(p, t);
            let r = y - lorentz(p, t);
            jtj += wt * j * j.transpose();
            jtr += wt * r * j;
        }
        (jtj, jtr)
    };

    let (c0, a00, w0) = initial_guess(&tau, &g);
    let mut p = Vector3::new(c0, a00, w0);
    let mut f = objective(&p);
    let mut history = vec![f];
    let mut lambda = 1e-3;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < MAX_ITERATIONS {
        iterations += 1;
        let (jtj, jtr) = normal(&p);
        let mut damped = jtj;
        for k in 0..3 {
            damped[(k, k)] += lambda * jtj[(k, k)].max(1e-300);
        }
        let step = match damped.cholesky() {
            Some(ch) => ch.solve(&jtr),
            None => {
                lambda *= 10.0;
                if lambda > 1e16 {
                    break;
                }
                continue;
            }
        };
        let trial = p + step;
        let ft = if trial[2] > 0.0 { objective(&trial) } else { f64::INFINITY };
        if ft <= f {
            let rel = (0..3)
                .map(|k| step[k].abs() / p[k].abs().max(1e-12))
                .fold(0.0, f64::max);
            p = trial;
            f = ft;
            history.push(f);
            lambda = (lambda / 10.0).max(1e-12);
            if rel < REL_TOL {
                converged = true;
                break;
            }
        } else {
            lambda *= 10.0;
            if lambda > 1e16 {
                // No direction lowers the objective: a minimum to rounding.
                converged = true;
                break;
            }
        }
    }
    if !converged {
        return Err(Error::FitNonConvergence {
            iterations,
            last: [p[0], p[1], p[2]],
        });
    }

    let (jtj, _) = normal(&p);
    let dof = keep.len().saturating_sub(3).max(1) as f64;
    let inv = jtj.try_inverse().ok_or_else(|| Error::SingularSystem("fit normal matrix".into()))?;
    let cov = if has_errors { inv } else { inv * (f / dof) };
    let rms = (tau
        .iter()
        .zip(&g)
        .map(|(&t, &y)| (y - lorentz(&p, t)).powi(2))
        .sum::<f64>()
        / keep.len() as f64)
        .sqrt();
    let mut covariance = [[0.0; 3]; 3];
    for (r, row) in covariance.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            *v = cov[(r, c)];
        }
    }
    Ok(LorentzFit {
        c: p[0],
        a0: p[1],
        w: p[2],
        covariance,
        residual_norm: f.sqrt(),
        rms,
        points: keep.len(),
        iterations,
        objective_history: history,
        bunched: p[1] <= 0.0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearFit {
    pub slope: f64,
    pub slope_err: f64,
    pub intercept: f64,
    pub intercept_err: f64,
    pub chi2_red: f64,
}

/// Weighted least-squares line y = intercept + slope·x.
pub fn linear_fit(x: &[f64], y: &[f64], sigma: &[f64]) -> Result<LinearFit> {
    if x.len() != y.len() || x.len() != sigma.len() {
        return Err(Error::InvalidParameter("x, y and sigma lengths differ".into()));
    }
    if x.len() < 3 {
        return Err(Error::InvalidParameter("linear fit needs at least 3 points".into()));
    }
    if sigma.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
        return Err(Error::InvalidParameter("errors must be positive".into()));
    }
    let (mut s, mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for i in 0..x.len() {
        let w = sigma[i].powi(-2);
        s += w;
        sx += w * x[i];
        sy += w * y[i];
        sxx += w * x[i] * x[i];
        sxy += w * x[i] * y[i];
    }
    let delta = s * sxx - sx * sx;
    if delta <= 1e-12 * s * sxx.max(f64::MIN_POSITIVE) {
        return Err(Error::SingularParameters("degenerate abscissae".into()));
    }
    let slope = (s * sxy - sx * sy) / delta;
    let intercept = (sxx * sy - sx * sxy) / delta;
    let chi2: f64 = (0..x.len())
        .map(|i| ((y[i] - intercept - slope * x[i]) / sigma[i]).powi(2))
        .sum();
    Ok(LinearFit {
        slope,
        slope_err: (s / delta).sqrt(),
        intercept,
        intercept_err: (sxx / delta).sqrt(),
        chi2_red: chi2 / (x.len() - 2) as f64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepOptions {
    pub tau_max_us: f64,
    pub tau_points: usize,
    /// Realizations are split into this many batches for a jackknife
    /// estimate of the ensemble scatter of the speed.
    pub batches: usize,
    /// Background contrast β: g² ↦ 1 + β(g² − 1).
    pub contrast: f64,
    /// Fit window (µs); the default rule applies when absent.
    pub window_us: Option<f64>,
}

impl Default for SweepOptions {
    fn default() -> Self {
        SweepOptions {
            tau_max_us: 1.5,
            tau_points: 301,
            batches: 10,
            contrast: 1.0,
            window_us: None,
        }
    }
}

impl SweepOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_max_us > 0.0 && self.tau_max_us.is_finite()) || self.tau_points < MIN_FIT_POINTS {
            return Err(Error::InvalidParameter("sweep τ grid too small".into()));
        }
        if self.batches == 0 {
            return Err(Error::InvalidParameter("batches must be >= 1".into()));
        }
        if !(self.contrast > 0.0 && self.contrast <= 1.0) {
            return Err(Error::InvalidParameter("contrast must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub omega_vr_mhz: f64,
    pub n_eff: f64,
    pub speed: f64,
    pub speed_err: f64,
    pub fit: LorentzFit,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub points: Vec<SweepPoint>,
    pub regression: LinearFit,
}

impl SweepResult {
    pub fn slope(&self) -> f64 {
        self.regression.slope
    }

    pub fn slope_err(&self) -> f64 {
        self.regression.slope_err
    }

    /// Writes `omega_vr_mhz,speed_per_us,speed_err` rows followed by a
    /// commented summary line.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "omega_vr_mhz,speed_per_us,speed_err")?;
        for p in &self.points {
            writeln!(out, "{:e},{:e},{:e}", p.omega_vr_mhz, p.speed, p.speed_err)?;
        }
        let r = &self.regression;
        writeln!(
            out,
            "# slope_per_us_per_mhz={:e} slope_err={:e} intercept={:e} chi2_red={:e}",
            r.slope, r.slope_err, r.intercept, r.chi2_red
        )?;
        Ok(())
    }
}

/// Seed of sweep point `index`, distinct for every point.
pub fn point_seed(master: u64, index: usize) -> u64 {
    master ^ (index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Fits one ensemble-averaged trace; returns the fit and the speed error
/// combining the fit covariance with the scatter of batch speeds.
pub fn ensemble_speed(ens: &Ensemble, opts: &SweepOptions) -> Result<(LorentzFit, f64, CorrelationTrace)> {
    let tau = uniform_grid(opts.tau_max_us, opts.tau_points);
    let curves = ens.g2_curves(&tau)?;
    let trace = average_curves(&tau, &curves).with_contrast(opts.contrast);
    let fit = fit_inverted_lorentzian(&trace, opts.window_us)?;
    let batches = opts.batches.min(curves.len());
    let mut scatter = 0.0;
    if batches > 1 {
        // Leave-one-batch-out jackknife of the fitted speed.
        let size = curves.len() / batches;
        let speeds: Vec<f64> = (0..batches)
            .map(|b| {
                let rest: Vec<Vec<f64>> = curves
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| i / size != b)
                    .map(|(_, c)| c.clone())
                    .collect();
                let tr = average_curves(&tau, &rest).with_contrast(opts.contrast);
                fit_inverted_lorentzian(&tr, opts.window_us).map(|f| f.speed())
            })
            .collect::<Result<_>>()?;
        let bf = batches as f64;
        let m = speeds.iter().sum::<f64>() / bf;
        let var = speeds.iter().map(|s| (s - m).powi(2)).sum::<f64>() * (bf - 1.0) / bf;
        scatter = var.sqrt();
    }
    let err = fit.speed_error().hypot(scatter);
    Ok((fit, err, trace))
}

/// Speed a0/HWHM of the refined model at each Ω_VR/2π target (MHz) and the
/// weighted regression of speed on Ω_VR/2π.
pub fn speed_sweep(
    targets_mhz: &[f64],
    geom: &ModeGeometry,
    beam: &BeamConfig,
    params: &RateParams,
    opts: &SweepOptions,
) -> Result<SweepResult> {
    opts.validate()?;
    if targets_mhz.len() < 3 {
        return Err(Error::InvalidParameter("sweep needs at least 3 targets".into()));
    }
    let points: Vec<SweepPoint> = targets_mhz
        .par_iter()
        .enumerate()
        .map(|(i, &nu)| {
            let n_eff = atoms_for_omega_vr(params, mhz_to_rate(nu));
            let cfg = BeamConfig {
                n_eff,
                seed: point_seed(beam.seed, i),
                ..*beam
            };
            let ens = Ensemble::new(*geom, cfg, *params)?;
            let (fit, speed_err, _) = ensemble_speed(&ens, opts)?;
            Ok(SweepPoint {
                omega_vr_mhz: nu,
                n_eff,
                speed: fit.speed(),
                speed_err,
                fit,
            })
        })
        .collect::<Result<_>>()?;
    let x: Vec<f64> = points.iter().map(|p| p.omega_vr_mhz).collect();
    let y: Vec<f64> = points.iter().map(|p| p.speed).collect();
    let s: Vec<f64> = points.iter().map(|p| p.speed_err).collect();
    let regression = linear_fit(&x, &y, &s)?;
    Ok(SweepResult { points, regression })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{derive, g2_closed_form};

    fn synthetic(c: f64, a0: f64, w: f64, tau_max: f64, n: usize) -> CorrelationTrace {
        let tau = uniform_grid(tau_max, n);
        let g = tau.iter().map(|t| c - a0 / (1.0 + (t / w).powi(2))).collect();
        CorrelationTrace::deterministic(tau, g)
    }

    #[test]
    fn noiseless_recovery() {
        let tr = synthetic(1.0, 0.4, 0.15, 2.0, 201);
        let f = fit_inverted_lorentzian(&tr, Some(2.0)).unwrap();
        assert!((f.c - 1.0).abs() < 1e-6);
        assert!((f.a0 - 0.4).abs() < 1e-6);
        assert!((f.w - 0.15).abs() < 1e-6);
        assert!((f.speed() - 0.4 / 0.15).abs() < 1e-5);
        assert!((f.speed() - 2.667).abs() < 1e-3);
        assert!(!f.bunched);
    }

    #[test]
    fn objective_monotone() {
        let mut tr = synthetic(1.02, 0.3, 0.1, 1.0, 120);
        for (i, g) in tr.g2.iter_mut().enumerate() {
            *g += 0.01 * ((i * 7919 % 13) as f64 / 13.0 - 0.5);
        }
        let f = fit_inverted_lorentzian(&tr, None).unwrap();
        assert!(f.objective_history.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn tau_rescaling() {
        let tr = synthetic(1.0, 0.35, 0.12, 1.5, 151);
        let f1 = fit_inverted_lorentzian(&tr, None).unwrap();
        let mut tr2 = tr.clone();
        tr2.tau.iter_mut().for_each(|t| *t *= 2.0);
        let f2 = fit_inverted_lorentzian(&tr2, None).unwrap();
        assert!((f2.w - 2.0 * f1.w).abs() < 1e-8);
        assert!((f2.speed() - f1.speed() / 2.0).abs() < 1e-8);
        assert!((f2.a0 - f1.a0).abs() < 1e-8 && (f2.c - f1.c).abs() < 1e-8);
    }

    #[test]
    fn bunched_input_flagged() {
        let tr = synthetic(1.0, -0.3, 0.1, 1.0, 101);
        let f = fit_inverted_lorentzian(&tr, Some(1.0)).unwrap();
        assert!(f.bunched);
        assert!((f.a0 + 0.3).abs() < 1e-6);
    }

    #[test]
    fn too_few_points() {
        let tr = synthetic(1.0, 0.4, 0.15, 2.0, 8);
        assert!(matches!(fit_inverted_lorentzian(&tr, None), Err(Error::InvalidParameter(_))));
    }

    fn closed_form_trace(n: f64) -> CorrelationTrace {
        let p = RateParams::paper();
        let d = derive(&p, n).unwrap();
        g2_closed_form(&p, &d, &uniform_grid(1.5, 601)).unwrap()
    }

    #[test]
    fn closed_form_dip() {
        let tr = closed_form_trace(1.0);
        let f = fit_inverted_lorentzian(&tr, None).unwrap();
        assert!(f.rms < 0.02, "rms {}", f.rms);
        let depth = 1.0 - tr.g2[0];
        let half = 1.0 - depth / 2.0;
        let i = tr.g2.iter().position(|&g| g >= half).unwrap();
        let t0 = tr.tau[i - 1] + (half - tr.g2[i - 1]) * (tr.tau[i] - tr.tau[i - 1]) / (tr.g2[i] - tr.g2[i - 1]);
        assert!((f.w / t0 - 1.0).abs() < 0.2, "w {} vs {}", f.w, t0);
    }

    #[test]
    fn window_robustness() {
        for n in [0.5, 1.0, 2.0] {
            let tr = closed_form_trace(n);
            let w = default_window(&tr).unwrap();
            let a = fit_inverted_lorentzian(&tr, Some(w)).unwrap();
            let b = fit_inverted_lorentzian(&tr, Some(1.25 * w)).unwrap();
            assert!((b.speed() / a.speed() - 1.0).abs() < 0.05, "N={n}");
        }
    }

    #[test]
    fn exact_line() {
        let x = [0.0, 1.0, 2.0, 3.0];
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 1.0).collect();
        let f = linear_fit(&x, &y, &[1.0; 4]).unwrap();
        assert!((f.slope - 2.0).abs() < 1e-12);
        assert!((f.intercept - 1.0).abs() < 1e-12);
        assert!(f.chi2_red < 1e-20);
        assert!(linear_fit(&[1.0, 1.0, 1.0], &[0.0, 1.0, 2.0], &[1.0; 3]).is_err());
        assert!(linear_fit(&[1.0, 2.0], &[0.0, 1.0], &[1.0; 2]).is_err());
    }

    #[test]
    fn outlier_raises_chi2() {
        let x = [0.0, 1.0, 2.0, 3.0, 4.0];
        let mut prev = -1.0;
        for shift in [0.0, 0.5, 1.0, 2.0, 4.0] {
            let mut y: Vec<f64> = x.iter().map(|v| 0.5 * v).collect();
            y[2] += shift;
            let f = linear_fit(&x, &y, &[0.1; 5]).unwrap();
            assert!(f.chi2_red > prev);
            prev = f.chi2_red;
        }
    }

    #[test]
    fn speed_error_from_covariance() {
        let mut f = fit_inverted_lorentzian(&synthetic(1.0, 0.4, 0.2, 2.0, 101), None).unwrap();
        f.covariance = [[0.0; 3], [0.0, 0.01, 0.0], [0.0, 0.0, 0.0]];
        assert!((f.speed_error() - 0.1 / 0.2).abs() < 1e-12);
    }

    #[test]
    fn distinct_point_seeds() {
        let seeds: std::collections::HashSet<u64> = (0..100).map(|i| point_seed(7, i)).collect();
        assert_eq!(seeds.len(), 100);
    }
}
