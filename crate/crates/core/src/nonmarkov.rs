//! BLP non-Markovianity of the cavity field with the atoms as environment.
//!
//! In the weak-drive limit the field channel acts on the {|0⟩, |1⟩}
//! subspace through a coherence factor G(t) and a population factor P(t).
//! For antipodal pure pairs at Bloch polar angle θ the trace distance is
//! D(t) = sqrt(P²cos²θ + |G|²sin²θ). The measure sums the increases of D,
//! maximized over θ.

use std::f64::consts::FRAC_PI_2;
use std::io::Write;

use num_complex::Complex64;
use rayon::prelude::*;

use crate::dynamics::Medium;
use crate::ensemble::{BeamConfig, Ensemble, FieldKernel, KernelKind, ModeGeometry};
use crate::error::{Error, Result};
use crate::model::{rate_to_mhz, oscillatory_omega_vr, RateParams, DEFAULT_EPS_OVER_KAPPA};
use crate::trace::uniform_grid;

type C = Complex64;

/// Measures below this are reported as zero.
pub const NOISE_FLOOR: f64 = 1e-12;

/// G, P and their time derivatives at one instant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelPoint {
    pub coherence: C,
    pub d_coherence: C,
    pub population: f64,
    pub d_population: f64,
}

/// A field channel: the mean over member kernels of G and |G|².
#[derive(Debug, Clone)]
pub struct ReducedChannel {
    members: Vec<FieldKernel>,
}

/// The kernels ignore the drive strength; a zero drive is replaced by the
/// default so that the post-detection state is defined.
fn kernel_params(params: &RateParams) -> RateParams {
    if params.eps == 0.0 {
        params.with_eps_over_kappa(DEFAULT_EPS_OVER_KAPPA)
    } else {
        *params
    }
}

impl ReducedChannel {
    pub fn single(kernel: FieldKernel) -> Self {
        ReducedChannel { members: vec![kernel] }
    }

    pub fn averaged(members: Vec<FieldKernel>) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::InvalidParameter("averaged channel needs at least one member".into()));
        }
        Ok(ReducedChannel { members })
    }

    /// Regression kernel of `medium`.
    pub fn from_medium(params: &RateParams, medium: &Medium) -> Result<Self> {
        Ok(Self::single(FieldKernel::new(&kernel_params(params), medium, KernelKind::Regression)?))
    }

    /// Free a(0) = 1 response of `medium`, for comparison.
    pub fn from_response(params: &RateParams, medium: &Medium) -> Result<Self> {
        Ok(Self::single(FieldKernel::new(&kernel_params(params), medium, KernelKind::Response)?))
    }

    /// `n_atoms` identical maximally coupled atoms.
    pub fn maximally_coupled(params: &RateParams, n_atoms: f64) -> Result<Self> {
        Self::from_medium(params, &Medium::homogeneous(params, n_atoms)?)
    }

    /// Every realization of `ens` as a member.
    pub fn from_ensemble(ens: &Ensemble, kind: KernelKind) -> Result<Self> {
        let base = Ensemble::new(ens.geometry, ens.config, kernel_params(&ens.params))?;
        let members = (0..ens.config.realizations as u64)
            .into_par_iter()
            .map(|i| base.kernel(i, kind))
            .collect::<Result<Vec<_>>>()?;
        Self::averaged(members)
    }

    pub fn members(&self) -> usize {
        self.members.len()
    }

    pub fn eval(&self, t: f64) -> ChannelPoint {
        let n = self.members.len() as f64;
        let (mut g, mut dg, mut p, mut dp) = (C::new(0.0, 0.0), C::new(0.0, 0.0), 0.0, 0.0);
        for k in &self.members {
            let (v, dv) = k.eval(t);
            g += v;
            dg += dv;
            p += v.norm_sqr();
            dp += 2.0 * (v.conj() * dv).re;
        }
        ChannelPoint {
            coherence: g / n,
            d_coherence: dg / n,
            population: p / n,
            d_population: dp / n,
        }
    }

    pub fn sample(&self, t: &[f64]) -> Vec<ChannelPoint> {
        t.par_iter().map(|&s| self.eval(s)).collect()
    }
}

/// Antipodal pure pair at Bloch polar angle θ ∈ [0, π/2].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StatePair {
    pub theta: f64,
}

impl StatePair {
    pub fn new(theta: f64) -> Result<Self> {
        if !(0.0..=FRAC_PI_2).contains(&theta) {
            return Err(Error::InvalidParameter(format!("θ = {theta} outside [0, π/2]")));
        }
        Ok(StatePair { theta })
    }

    /// |0⟩ and |1⟩.
    pub fn population() -> Self {
        StatePair { theta: 0.0 }
    }

    /// (|0⟩ ± |1⟩)/√2.
    pub fn coherence() -> Self {
        StatePair { theta: FRAC_PI_2 }
    }

    fn weights(&self) -> (f64, f64) {
        let (s, c) = self.theta.sin_cos();
        (c * c, s * s)
    }

    pub fn distance(&self, pt: &ChannelPoint) -> f64 {
        let (wz, wp) = self.weights();
        (pt.population.powi(2) * wz + pt.coherence.norm_sqr() * wp).sqrt()
    }

    /// dD/dt.
    pub fn rate(&self, pt: &ChannelPoint) -> f64 {
        let (wz, wp) = self.weights();
        let d = self.distance(pt);
        if d == 0.0 {
            return 0.0;
        }
        (pt.population * pt.d_population * wz + (pt.coherence.conj() * pt.d_coherence).re * wp) / d
    }
}

pub fn trace_distance_curve(ch: &ReducedChannel, pair: StatePair, t: &[f64]) -> Vec<f64> {
    ch.sample(t).iter().map(|p| pair.distance(p)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BlpOptions {
    pub t_max_us: f64,
    pub points: usize,
    pub theta_points: usize,
    /// Bisection depth allowed when a grid interval hides extrema.
    pub max_depth: u32,
}

impl Default for BlpOptions {
    fn default() -> Self {
        BlpOptions {
            t_max_us: 1.0,
            points: 2001,
            theta_points: 64,
            max_depth: 20,
        }
    }
}

impl BlpOptions {
    pub fn grid(&self) -> Vec<f64> {
        uniform_grid(self.t_max_us, self.points)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t_max_us > 0.0 && self.t_max_us.is_finite()) || self.points < 3 || self.theta_points < 2 {
            return Err(Error::InvalidParameter("BLP grids too small".into()));
        }
        Ok(())
    }
}

fn sign(x: f64) -> i8 {
    if x > 0.0 {
        1
    } else if x < 0.0 {
        -1
    } else {
        0
    }
}

/// Root of dD/dt in (a, b) where the rate changes sign.
fn bisect_rate(ch: &ReducedChannel, pair: StatePair, mut a: f64, mut sa: i8, mut b: f64) -> (f64, ChannelPoint) {
    let mut pb = ch.eval(b);
    while b - a > 1e-13 * b.max(1e-9) {
        let m = 0.5 * (a + b);
        let pm = ch.eval(m);
        let sm = sign(pair.rate(&pm));
        if sm == 0 {
            return (m, pm);
        }
        if sm == sa {
            a = m;
            sa = sm;
        } else {
            b = m;
            pb = pm;
        }
    }
    (b, pb)
}

/// Appends the D values at every extremum of D inside [a, b].
#[allow(clippy::too_many_arguments)]
fn resolve(
    ch: &ReducedChannel,
    pair: StatePair,
    (a, pa): (f64, &ChannelPoint),
    (b, pb): (f64, &ChannelPoint),
    depth: u32,
    max_depth: u32,
    out: &mut Vec<f64>,
) -> Result<()> {
    let (ra, rb) = (pair.rate(pa), pair.rate(pb));
    let (sa, sb) = (sign(ra), sign(rb));
    if sa * sb < 0 {
        let (_, pr) = bisect_rate(ch, pair, a, sa, b);
        out.push(pair.distance(&pr));
        return Ok(());
    }
    let m = 0.5 * (a + b);
    let pm = ch.eval(m);
    let sm = sign(pair.rate(&pm));
    let s = if sa != 0 { sa } else { sb };
    let rise = sign(pair.distance(pb) - pair.distance(pa));
    let consistent = (s == 0 || sm == 0 || sm == s) && (s == 0 || rise == 0 || rise == s);
    if consistent {
        return Ok(());
    }
    if depth >= max_depth {
        return Err(Error::UnresolvedExtrema(format!(
            "extrema of D between t = {a} and {b} us unresolved after {depth} bisections (θ = {})",
            pair.theta
        )));
    }
    resolve(ch, pair, (a, pa), (m, &pm), depth + 1, max_depth, out)?;
    resolve(ch, pair, (m, &pm), (b, pb), depth + 1, max_depth, out)
}

/// Σ of the increases of D between its consecutive extrema.
pub fn extrema_sum(
    ch: &ReducedChannel,
    pair: StatePair,
    t: &[f64],
    samples: &[ChannelPoint],
    max_depth: u32,
) -> Result<f64> {
    let mut values = vec![pair.distance(&samples[0])];
    for i in 0..t.len() - 1 {
        resolve(
            ch,
            pair,
            (t[i], &samples[i]),
            (t[i + 1], &samples[i + 1]),
            0,
            max_depth,
            &mut values,
        )?;
    }
    values.push(pair.distance(&samples[t.len() - 1]));
    Ok(values.windows(2).map(|w| (w[1] - w[0]).max(0.0)).sum())
}

/// ∫ max(0, dD/dt) dt by adaptive Simpson quadrature over each grid
/// interval.
pub fn positive_rate_integral(ch: &ReducedChannel, pair: StatePair, t: &[f64], samples: &[ChannelPoint]) -> f64 {
    let f = |s: f64| pair.rate(&ch.eval(s)).max(0.0);
    (0..t.len() - 1)
        .into_par_iter()
        .map(|i| {
            let (a, b) = (t[i], t[i + 1]);
            let fa = pair.rate(&samples[i]).max(0.0);
            let fb = pair.rate(&samples[i + 1]).max(0.0);
            let m = 0.5 * (a + b);
            let fm = f(m);
            let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
            simpson(&f, a, b, fa, fm, fb, whole, 1e-13, 40)
        })
        .collect::<Vec<f64>>()
        .iter()
        .sum()
}

#[allow(clippy::too_many_arguments)]
fn simpson<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
    let m = 0.5 * (a + b);
    let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
    let (flm, frm) = (f(lm), f(rm));
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        return left + right + delta / 15.0;
    }
    simpson(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1) + simpson(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlpResult {
    /// max over θ of the extrema sum (zero below the noise floor).
    pub measure: f64,
    /// Maximizing Bloch angle.
    pub theta: f64,
    /// Positive-rate quadrature at the maximizing θ.
    pub quadrature: f64,
    /// Measure of the |0⟩, |1⟩ pair.
    pub population_pair: f64,
}

impl BlpResult {
    pub fn path_difference(&self) -> f64 {
        (self.measure - self.quadrature).abs()
    }
}

fn floor(x: f64) -> f64 {
    if x < NOISE_FLOOR {
        0.0
    } else {
        x
    }
}

/// BLP measure maximized over antipodal pure pairs: a θ grid followed by
/// golden-section refinement around the best grid point.
pub fn blp_measure(ch: &ReducedChannel, opts: &BlpOptions) -> Result<BlpResult> {
    opts.validate()?;
    let t = opts.grid();
    let samples = ch.sample(&t);
    let at = |theta: f64| extrema_sum(ch, StatePair { theta }, &t, &samples, opts.max_depth);
    let thetas: Vec<f64> = (0..opts.theta_points)
        .map(|i| FRAC_PI_2 * i as f64 / (opts.theta_points - 1) as f64)
        .collect();
    let values = thetas.par_iter().map(|&th| at(th)).collect::<Result<Vec<f64>>>()?;
    let (best, _) = values
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
    let (mut theta, mut value) = (thetas[best], values[best]);
    if value > NOISE_FLOOR {
        let lo = thetas[best.saturating_sub(1)];
        let hi = thetas[(best + 1).min(thetas.len() - 1)];
        let (th, v) = golden_section(&at, lo, hi)?;
        if v > value {
            theta = th;
            value = v;
        }
    }
    let pair = StatePair { theta };
    let quadrature = positive_rate_integral(ch, pair, &t, &samples);
    Ok(BlpResult {
        measure: floor(value),
        theta,
        quadrature: floor(quadrature),
        population_pair: floor(values[0]),
    })
}

fn golden_section<F: Fn(f64) -> Result<f64>>(f: &F, mut a: f64, mut b: f64) -> Result<(f64, f64)> {
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - r * (b - a);
    let mut d = a + r * (b - a);
    let (mut fc, mut fd) = (f(c)?, f(d)?);
    while b - a > 1e-7 {
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - r * (b - a);
            fc = f(c)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + r * (b - a);
            fd = f(d)?;
        }
    }
    Ok(if fc >= fd { (c, fc) } else { (d, fd) })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Averaged,
    MaximallyCoupled,
}

impl Variant {
    pub fn name(&self) -> &'static str {
        match self {
            Variant::Averaged => "averaged",
            Variant::MaximallyCoupled => "maximally_coupled",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlpPoint {
    pub variant: Variant,
    pub n_eff: f64,
    /// Oscillatory-branch |Ω_VR|/2π at this N (zero below threshold).
    pub omega_vr_mhz: f64,
    pub result: BlpResult,
}

/// BLP measure against the coupling for the beam-averaged channel and for
/// identical maximally coupled atoms. Every averaged point uses the same
/// master seed.
pub fn blp_vs_coupling(
    geom: &ModeGeometry,
    beam: &BeamConfig,
    params: &RateParams,
    n_eff_grid: &[f64],
    opts: &BlpOptions,
) -> Result<Vec<BlpPoint>> {
    let jobs: Vec<(Variant, f64)> = [Variant::Averaged, Variant::MaximallyCoupled]
        .iter()
        .flat_map(|&v| n_eff_grid.iter().map(move |&n| (v, n)))
        .collect();
    jobs.par_iter()
        .map(|&(variant, n)| {
            if !(n.is_finite() && n >= 0.0) {
                return Err(Error::InvalidParameter(format!("N_eff = {n} must be >= 0")));
            }
            let ch = match variant {
                Variant::Averaged if n > 0.0 => {
                    let ens = Ensemble::new(*geom, BeamConfig { n_eff: n, ..*beam }, *params)?;
                    ReducedChannel::from_ensemble(&ens, KernelKind::Regression)?
                }
                _ => ReducedChannel::maximally_coupled(params, n)?,
            };
            Ok(BlpPoint {
                variant,
                n_eff: n,
                omega_vr_mhz: rate_to_mhz(oscillatory_omega_vr(params, n)),
                result: blp_measure(&ch, opts)?,
            })
        })
        .collect()
}

/// Writes `omega_vr_mhz,blp_measure,variant`.
pub fn write_curve_csv<W: Write>(points: &[BlpPoint], mut out: W) -> Result<()> {
    writeln!(out, "omega_vr_mhz,blp_measure,variant")?;
    for p in points {
        writeln!(out, "{:e},{:e},{}", p.omega_vr_mhz, p.result.measure, p.variant.name())?;
    }
    Ok(())
}
