//! Monte Carlo model of an atomic beam crossing the cavity mode.
//!
//! Each realization draws a Poissonian number of atoms at uniform positions
//! in a box around the mode, a quasi-static cavity detuning and, optionally,
//! a Zeeman-shifted twin for every atom. Averages are taken over
//! per-realization correlation functions.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use statrs::distribution::{DiscreteCDF, Poisson};

use crate::dynamics::{self, Emitter, Medium, Regression};
use crate::error::{Error, Result};
use crate::model::{mhz_to_rate, RateParams};
use crate::trace::CorrelationTrace;

type C = Complex64;

/// Number of pilot positions used to calibrate the atom density.
pub const PILOT_POINTS: usize = 1_000_000;

/// Gaussian standing-wave mode and the box atoms are sampled in (µm).
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModeGeometry {
    pub waist: f64,
    pub wavelength: f64,
    pub half_x: f64,
    pub half_y: f64,
    pub z_extent: f64,
}

impl Default for ModeGeometry {
    fn default() -> Self {
        let waist = 25.0;
        let wavelength = 0.78;
        ModeGeometry {
            waist,
            wavelength,
            half_x: 2.0 * waist,
            half_y: 2.0 * waist,
            z_extent: 2.0 * wavelength,
        }
    }
}

impl ModeGeometry {
    /// All atoms at the mode maximum.
    pub fn point(waist: f64, wavelength: f64) -> Self {
        ModeGeometry {
            waist,
            wavelength,
            half_x: 0.0,
            half_y: 0.0,
            z_extent: 0.0,
        }
    }

    fn is_point(&self) -> bool {
        self.half_x == 0.0 && self.half_y == 0.0 && self.z_extent == 0.0
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.waist, self.wavelength, self.half_x, self.half_y, self.z_extent]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.waist <= 0.0 || self.wavelength <= 0.0 {
            return Err(Error::InvalidParameter("waist and wavelength must be positive".into()));
        }
        if self.is_point() {
            return Ok(());
        }
        if self.half_x < 2.0 * self.waist || self.half_y < 2.0 * self.waist {
            return Err(Error::InvalidParameter(format!(
                "sampling box half-widths ({}, {}) must be at least 2·w0 = {}",
                self.half_x,
                self.half_y,
                2.0 * self.waist
            )));
        }
        if self.z_extent < self.wavelength {
            return Err(Error::InvalidParameter(format!(
                "z extent {} must be at least one wavelength {}",
                self.z_extent, self.wavelength
            )));
        }
        Ok(())
    }

    /// Relative coupling g/g_max at a position.
    pub fn relative_coupling(&self, x: f64, y: f64, z: f64) -> f64 {
        let r2 = x * x + y * y;
        (-r2 / (self.waist * self.waist)).exp() * (std::f64::consts::TAU * z / self.wavelength).cos().abs()
    }

    fn sample_position<R: Rng>(&self, rng: &mut R) -> [f64; 3] {
        [
            self.half_x * (2.0 * rng.random::<f64>() - 1.0),
            self.half_y * (2.0 * rng.random::<f64>() - 1.0),
            self.z_extent * rng.random::<f64>(),
        ]
    }
}

/// How many atoms a realization holds.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AtomNumber {
    /// Poissonian with the calibrated mean.
    Poisson,
    /// Exactly this many atoms.
    Fixed(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BeamConfig {
    /// Target mean of Σ(g_i/g_max)².
    pub n_eff: f64,
    /// Half-width of the uniform cavity-detuning jitter, in units of κ.
    pub jitter_kappa: f64,
    /// Zeeman twin offset (rad/µs).
    pub zeeman_offset: f64,
    /// Zeeman twin coupling scale ζ; 0 disables the twin.
    pub zeeman_scale: f64,
    pub realizations: usize,
    pub seed: u64,
    /// Atoms below this fraction of g_max are dropped.
    pub cutoff: f64,
    pub atom_number: AtomNumber,
}

impl Default for BeamConfig {
    fn default() -> Self {
        BeamConfig {
            n_eff: 1.0,
            jitter_kappa: 2.5,
            zeeman_offset: mhz_to_rate(5.0),
            zeeman_scale: 1.0,
            realizations: 200,
            seed: 0,
            cutoff: 0.01,
            atom_number: AtomNumber::Poisson,
        }
    }
}

impl BeamConfig {
    /// Random positions only: no detuning jitter and no Zeeman twin.
    pub fn positions_only(n_eff: f64) -> Self {
        BeamConfig {
            n_eff,
            jitter_kappa: 0.0,
            zeeman_scale: 0.0,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.05..=50.0).contains(&self.n_eff) {
            return Err(Error::InvalidParameter(format!(
                "target N_eff {} outside [0.05, 50]",
                self.n_eff
            )));
        }
        if self.realizations == 0 {
            return Err(Error::InvalidParameter("realization count must be >= 1".into()));
        }
        if !(self.jitter_kappa.is_finite() && self.jitter_kappa >= 0.0) {
            return Err(Error::InvalidParameter("jitter must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.zeeman_scale) || !self.zeeman_offset.is_finite() {
            return Err(Error::InvalidParameter("Zeeman scale must lie in [0, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.cutoff) {
            return Err(Error::InvalidParameter("cutoff must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampledAtom {
    pub position: [f64; 3],
    /// Coupling to the main transition (rad/µs).
    pub coupling: f64,
}

/// One snapshot of the beam.
#[derive(Debug, Clone, PartialEq)]
pub struct AtomRealization {
    pub atoms: Vec<SampledAtom>,
    /// Cavity detuning of this realization (rad/µs), added to the base
    /// cavity detuning.
    pub cavity_detuning: f64,
}

impl AtomRealization {
    /// Σ(g_i/g_max)² over the main transition.
    pub fn n_eff(&self, g_max: f64) -> f64 {
        self.atoms.iter().map(|a| (a.coupling / g_max).powi(2)).sum()
    }

    /// Parameters of this realization (base parameters plus its cavity
    /// detuning).
    pub fn params(&self, base: &RateParams) -> RateParams {
        let mut p = *base;
        p.delta_c += self.cavity_detuning;
        p
    }

    /// Emitters of the main transition followed by their Zeeman twins.
    pub fn emitters(&self, base: &RateParams, cfg: &BeamConfig) -> Vec<Emitter> {
        let mut out: Vec<Emitter> = self
            .atoms
            .iter()
            .map(|a| Emitter::atom(a.coupling, base.delta_a))
            .collect();
        if cfg.zeeman_scale > 0.0 {
            out.extend(
                self.atoms
                    .iter()
                    .map(|a| Emitter::atom(cfg.zeeman_scale * a.coupling, base.delta_a + cfg.zeeman_offset)),
            );
        }
        out
    }

    pub fn medium(&self, base: &RateParams, cfg: &BeamConfig) -> Result<Medium> {
        Medium::new(self.emitters(base, cfg))
    }
}

/// Estimates E[(g/g_max)²·1{g ≥ cutoff·g_max}] per sampled atom and returns
/// the Poisson mean atom count that yields `target_n_eff`.
pub fn calibrate_density(geom: &ModeGeometry, target_n_eff: f64, cutoff: f64) -> Result<f64> {
    geom.validate()?;
    let per_atom = mean_coupling_weight(geom, cutoff);
    if per_atom < 1e-6 {
        return Err(Error::InvalidParameter(format!(
            "degenerate geometry: mean squared relative coupling {per_atom:e}"
        )));
    }
    Ok(target_n_eff / per_atom)
}

fn mean_coupling_weight(geom: &ModeGeometry, cutoff: f64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_ca1b);
    let mut sum = Neumaier::default();
    for _ in 0..PILOT_POINTS {
        let [x, y, z] = geom.sample_position(&mut rng);
        let g = geom.relative_coupling(x, y, z);
        if g >= cutoff {
            sum.add(g * g);
        }
    }
    sum.value() / PILOT_POINTS as f64
}

/// Random stream for realization `index` of a run seeded with `master`.
pub fn realization_rng(master: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(index);
    rng
}

/// Draws one realization. The atom count uses the inverse Poisson CDF of
/// the first uniform draw, so that nearby means give nearby counts for the
/// same stream.
pub fn sample_realization<R: Rng>(
    geom: &ModeGeometry,
    cfg: &BeamConfig,
    params: &RateParams,
    mean_atoms: f64,
    rng: &mut R,
) -> AtomRealization {
    let u: f64 = rng.random();
    let count = match cfg.atom_number {
        AtomNumber::Fixed(n) => n,
        AtomNumber::Poisson if mean_atoms > 0.0 => Poisson::new(mean_atoms)
            .map(|d| d.inverse_cdf(u))
            .unwrap_or(0),
        AtomNumber::Poisson => 0,
    };
    let mut atoms = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let position = geom.sample_position(rng);
        let rel = geom.relative_coupling(position[0], position[1], position[2]);
        if rel >= cfg.cutoff {
            atoms.push(SampledAtom {
                position,
                coupling: params.g_max * rel,
            });
        }
    }
    let cavity_detuning = if cfg.jitter_kappa > 0.0 {
        cfg.jitter_kappa * params.kappa * (2.0 * rng.random::<f64>() - 1.0)
    } else {
        0.0
    };
    AtomRealization { atoms, cavity_detuning }
}

/// Which field kernel to average.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelKind {
    /// Free response to a(0) = 1, b(0) = 0.
    Response,
    /// Post-detection regression kernel (g² = |1 + (Δα/α)K|²).
    Regression,
}

/// A field kernel of one medium, either kind.
#[derive(Debug, Clone)]
pub enum FieldKernel {
    Response(dynamics::KernelPropagator),
    Regression(Regression),
}

impl FieldKernel {
    pub fn new(params: &RateParams, medium: &Medium, kind: KernelKind) -> Result<Self> {
        Ok(match kind {
            KernelKind::Response => {
                FieldKernel::Response(dynamics::KernelPropagator::new(params, medium.classes()))
            }
            KernelKind::Regression => FieldKernel::Regression(Regression::new(params, medium)?),
        })
    }

    /// (G(t), dG/dt).
    pub fn eval(&self, t: f64) -> (C, C) {
        match self {
            FieldKernel::Response(k) => k.eval(t),
            FieldKernel::Regression(r) => r.kernel(t),
        }
    }
}

/// Ensemble means E[G(t)] and E[|G(t)|²].
#[derive(Debug, Clone, PartialEq)]
pub struct AveragedKernel {
    pub t: Vec<f64>,
    pub mean: Vec<C>,
    pub mean_sqr: Vec<f64>,
}

/// A calibrated beam model.
#[derive(Debug, Clone)]
pub struct Ensemble {
    pub geometry: ModeGeometry,
    pub config: BeamConfig,
    pub params: RateParams,
    mean_atoms: f64,
}

impl Ensemble {
    pub fn new(geometry: ModeGeometry, config: BeamConfig, params: RateParams) -> Result<Self> {
        params.validate()?;
        config.validate()?;
        let mean_atoms = calibrate_density(&geometry, config.n_eff, config.cutoff)?;
        Ok(Ensemble {
            geometry,
            config,
            params,
            mean_atoms,
        })
    }

    /// Calibrated Poisson mean of the atom count.
    pub fn mean_atoms(&self) -> f64 {
        self.mean_atoms
    }

    pub fn realization(&self, index: u64) -> AtomRealization {
        let mut rng = realization_rng(self.config.seed, index);
        sample_realization(&self.geometry, &self.config, &self.params, self.mean_atoms, &mut rng)
    }

    pub fn regression(&self, index: u64) -> Result<Regression> {
        let r = self.realization(index);
        Regression::new(&r.params(&self.params), &r.medium(&self.params, &self.config)?)
    }

    /// The field kernel of realization `index`.
    pub fn kernel(&self, index: u64, kind: KernelKind) -> Result<FieldKernel> {
        let r = self.realization(index);
        FieldKernel::new(&r.params(&self.params), &r.medium(&self.params, &self.config)?, kind)
    }

    /// g²(τ) of every realization, in realization order.
    pub fn g2_curves(&self, tau: &[f64]) -> Result<Vec<Vec<f64>>> {
        self.params.check_weak_drive()?;
        (0..self.config.realizations as u64)
            .into_par_iter()
            .map(|i| {
                let reg = self.regression(i)?;
                Ok(tau.iter().map(|&t| reg.g2(t)).collect())
            })
            .collect()
    }

    /// Mean of per-realization g²(τ), with the standard error of the mean.
    pub fn averaged_g2(&self, tau: &[f64]) -> Result<CorrelationTrace> {
        Ok(average_curves(tau, &self.g2_curves(tau)?))
    }

    pub fn averaged_kernel(&self, t: &[f64], kind: KernelKind) -> Result<AveragedKernel> {
        let n = self.config.realizations;
        let curves: Vec<Vec<C>> = (0..n as u64)
            .into_par_iter()
            .map(|i| {
                let k = self.kernel(i, kind)?;
                let values: Vec<C> = t.iter().map(|&s| k.eval(s).0).collect();
                Ok(values)
            })
            .collect::<Result<_>>()?;
        let mut mean = Vec::with_capacity(t.len());
        let mut mean_sqr = Vec::with_capacity(t.len());
        for j in 0..t.len() {
            let (mut re, mut imag, mut sq) = (Neumaier::default(), Neumaier::default(), Neumaier::default());
            for c in &curves {
                re.add(c[j].re);
                imag.add(c[j].im);
                sq.add(c[j].norm_sqr());
            }
            let nf = n as f64;
            mean.push(C::new(re.value() / nf, imag.value() / nf));
            mean_sqr.push(sq.value() / nf);
        }
        Ok(AveragedKernel {
            t: t.to_vec(),
            mean,
            mean_sqr,
        })
    }
}

/// Pointwise mean of `curves` with the standard error of the mean.
pub fn average_curves(tau: &[f64], curves: &[Vec<f64>]) -> CorrelationTrace {
    let (mean, stderr) = mean_and_stderr(curves, tau.len());
    CorrelationTrace::with_errors(tau.to_vec(), mean, stderr)
}

fn mean_and_stderr(curves: &[Vec<f64>], len: usize) -> (Vec<f64>, Vec<f64>) {
    let n = curves.len() as f64;
    let mut mean = Vec::with_capacity(len);
    let mut stderr = Vec::with_capacity(len);
    for j in 0..len {
        let mut s = Neumaier::default();
        for c in curves {
            s.add(c[j]);
        }
        let m = s.value() / n;
        let mut v = Neumaier::default();
        for c in curves {
            v.add((c[j] - m).powi(2));
        }
        let var = if curves.len() > 1 { v.value() / (n - 1.0) } else { 0.0 };
        mean.push(m);
        stderr.push((var / n).sqrt());
    }
    (mean, stderr)
}

pub fn averaged_g2(
    geom: &ModeGeometry,
    cfg: &BeamConfig,
    params: &RateParams,
    tau: &[f64],
) -> Result<CorrelationTrace> {
    Ensemble::new(*geom, *cfg, *params)?.averaged_g2(tau)
}

pub fn averaged_kernel(
    geom: &ModeGeometry,
    cfg: &BeamConfig,
    params: &RateParams,
    t: &[f64],
    kind: KernelKind,
) -> Result<AveragedKernel> {
    Ensemble::new(*geom, *cfg, *params)?.averaged_kernel(t, kind)
}

/// Neumaier compensated summation.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct Neumaier {
    sum: f64,
    comp: f64,
}

impl Neumaier {
    pub(crate) fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub(crate) fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{derive, g2_closed_form};
    use statrs::function::erf::erf;

    #[test]
    fn coupling_profile() {
        let g = ModeGeometry::default();
        assert_eq!(g.relative_coupling(0.0, 0.0, 0.0), 1.0);
        assert!(g.relative_coupling(0.0, 0.0, g.wavelength / 4.0) < 1e-15);
        let p = RateParams::paper();
        let cfg = BeamConfig {
            atom_number: AtomNumber::Fixed(1),
            ..BeamConfig::positions_only(1.0)
        };
        let mut rng = realization_rng(1, 0);
        let r = sample_realization(&ModeGeometry::point(25.0, 0.78), &cfg, &p, 1.0, &mut rng);
        assert_eq!(r.atoms.len(), 1);
        assert_eq!(r.atoms[0].coupling, p.g_max);
    }

    #[test]
    fn geometry_invariants() {
        let mut g = ModeGeometry::default();
        g.validate().unwrap();
        g.half_x = 40.0;
        assert!(g.validate().is_err());
        let mut g = ModeGeometry::default();
        g.z_extent = 0.5;
        assert!(g.validate().is_err());
    }

    #[test]
    fn calibration_against_quadrature() {
        let g = ModeGeometry {
            z_extent: 0.78,
            ..Default::default()
        };
        // Separable: radial Gaussian factor per axis times ⟨cos²⟩ = 1/2.
        let axis = (std::f64::consts::PI / 2.0).sqrt() * erf(2.0 * 2f64.sqrt()) / 4.0;
        let analytic = 0.5 * axis * axis;
        let pilot = mean_coupling_weight(&g, 0.0);
        assert!((pilot / analytic - 1.0).abs() < 0.01, "{pilot} vs {analytic}");
        let n1 = calibrate_density(&g, 1.0, 0.01).unwrap();
        let n2 = calibrate_density(&g, 2.0, 0.01).unwrap();
        assert!((n2 / n1 - 2.0).abs() < 1e-12);
        let pt = ModeGeometry::point(25.0, 0.78);
        assert!((calibrate_density(&pt, 3.0, 0.01).unwrap() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn mean_n_eff_matches_target() {
        let p = RateParams::paper();
        let cfg = BeamConfig {
            n_eff: 2.0,
            realizations: 10_000,
            seed: 7,
            ..Default::default()
        };
        let ens = Ensemble::new(ModeGeometry::default(), cfg, p).unwrap();
        let n_eff: Vec<f64> = (0..10_000).map(|i| ens.realization(i).n_eff(p.g_max)).collect();
        let m = n_eff.iter().sum::<f64>() / n_eff.len() as f64;
        let sd = (n_eff.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n_eff.len() - 1) as f64).sqrt();
        let se = sd / (n_eff.len() as f64).sqrt();
        assert!((m - 2.0).abs() < 0.02 * 2.0 + 3.0 * se, "mean {m} se {se}");
    }

    #[test]
    fn counts_are_poissonian() {
        let p = RateParams::paper();
        let cfg = BeamConfig {
            n_eff: 0.5,
            cutoff: 0.0,
            seed: 3,
            ..Default::default()
        };
        let ens = Ensemble::new(ModeGeometry::default(), cfg, p).unwrap();
        let counts: Vec<f64> = (0..20_000)
            .map(|i| {
                let mut rng = realization_rng(3, i);
                let r = sample_realization(&ens.geometry, &ens.config, &p, ens.mean_atoms(), &mut rng);
                r.atoms.len() as f64
            })
            .collect();
        let n = counts.len() as f64;
        let m = counts.iter().sum::<f64>() / n;
        let v = counts.iter().map(|c| (c - m).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((m / ens.mean_atoms() - 1.0).abs() < 0.01);
        // Var/mean of a Poisson sample has relative spread ≈ sqrt(2/n).
        assert!((v / m - 1.0).abs() < 4.0 * (2.0 / n).sqrt());
    }

    #[test]
    fn degenerate_ensemble_reproduces_closed_form() {
        let p = RateParams::paper();
        let cfg = BeamConfig {
            realizations: 1,
            atom_number: AtomNumber::Fixed(1),
            ..BeamConfig::positions_only(1.0)
        };
        let tau: Vec<f64> = (0..=100).map(|i| i as f64 * 0.01).collect();
        let avg = averaged_g2(&ModeGeometry::point(25.0, 0.78), &cfg, &p, &tau).unwrap();
        let cf = g2_closed_form(&p, &derive(&p, 1.0).unwrap(), &tau).unwrap();
        for (a, b) in avg.g2.iter().zip(&cf.g2) {
            assert!((a - b).abs() < 1e-9);
        }
        let k = averaged_kernel(&ModeGeometry::point(25.0, 0.78), &cfg, &p, &tau, KernelKind::Response).unwrap();
        let g = dynamics::response_kernel(&p, Medium::homogeneous(&p, 1.0).unwrap().classes(), &tau).unwrap();
        for (a, b) in k.mean.iter().zip(&g) {
            assert!((a - b).norm() < 1e-9);
        }
    }

    #[test]
    fn deterministic_across_worker_counts() {
        let p = RateParams::paper();
        let cfg = BeamConfig {
            n_eff: 1.5,
            realizations: 64,
            seed: 11,
            ..Default::default()
        };
        let tau: Vec<f64> = (0..50).map(|i| i as f64 * 0.02).collect();
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| averaged_g2(&ModeGeometry::default(), &cfg, &p, &tau).unwrap())
        };
        let a = run(1);
        let b = run(4);
        assert_eq!(a, b);
    }

    #[test]
    fn averaged_curves_antibunched() {
        let p = RateParams::paper();
        let tau: Vec<f64> = (0..=200).map(|i| i as f64 * 0.01).collect();
        for omega in [1.1, 2.8, 5.2] {
            let n_eff = crate::model::atoms_for_omega_vr(&p, mhz_to_rate(omega));
            let cfg = BeamConfig {
                n_eff,
                realizations: 100,
                seed: 5,
                ..Default::default()
            };
            let tr = averaged_g2(&ModeGeometry::default(), &cfg, &p, &tau).unwrap();
            assert!(tr.g2[0] < 1.0);
            assert!((tr.g2[200] - 1.0).abs() < 0.01);
        }
    }

    #[test]
    fn jensen_and_dephasing() {
        let p = RateParams::paper();
        // Uniform cavity-detuning jitter would imprint sinc-shaped lobes on
        // E[G]; the dephasing claim concerns the spread of couplings.
        let cfg = BeamConfig {
            realizations: 100,
            seed: 9,
            ..BeamConfig::positions_only(2.0)
        };
        let t: Vec<f64> = (0..=400).map(|i| i as f64 * 0.005).collect();
        let ens = Ensemble::new(ModeGeometry::default(), cfg, p).unwrap();
        let k = ens.averaged_kernel(&t, KernelKind::Response).unwrap();
        for (m, s) in k.mean.iter().zip(&k.mean_sqr) {
            assert!(*s >= m.norm_sqr() * (1.0 - 1e-12));
        }
        let revival = |v: &[f64]| {
            let mut best: f64 = 0.0;
            let mut low = v[0];
            for &x in v {
                low = low.min(x);
                best = best.max(x - low);
            }
            best
        };
        let avg = revival(&k.mean.iter().map(|c| c.norm()).collect::<Vec<_>>());
        let mut singles: Vec<f64> = (0..100)
            .map(|i| {
                let r = ens.realization(i);
                let m = r.medium(&p, &cfg).unwrap();
                let kp = dynamics::KernelPropagator::new(&r.params(&p), m.classes());
                revival(&t.iter().map(|&s| kp.eval(s).0.norm()).collect::<Vec<_>>())
            })
            .collect();
        singles.sort_by(f64::total_cmp);
        assert!(avg < singles[50]);
    }

    #[test]
    fn cutoff_insensitivity() {
        let p = RateParams::paper();
        let tau: Vec<f64> = (0..=100).map(|i| i as f64 * 0.01).collect();
        let base = BeamConfig {
            n_eff: 1.0,
            realizations: 200,
            seed: 21,
            ..Default::default()
        };
        let half = BeamConfig { cutoff: 0.005, ..base };
        let a = averaged_g2(&ModeGeometry::default(), &base, &p, &tau).unwrap();
        let b = averaged_g2(&ModeGeometry::default(), &half, &p, &tau).unwrap();
        for (x, y) in a.g2.iter().zip(&b.g2) {
            assert!((x / y - 1.0).abs() < 2e-3);
        }
    }

    #[test]
    fn neumaier_sum() {
        let mut s = Neumaier::default();
        for x in [1.0, 1e100, 1.0, -1e100] {
            s.add(x);
        }
        assert_eq!(s.value(), 2.0);
    }
}
