//! Coincidence histograms and g²(τ) estimates from click streams.

use rayon::prelude::*;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};
use crate::trace::{CorrelationTrace, PairCounts};
use crate::trajectories::{ClickStream, PS_PER_US};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Auto,
    Cross,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorrelatorConfig {
    pub bin_width_ns: f64,
    pub tau_max_us: f64,
    pub mode: Mode,
    /// Cross mode: smallest acceptable p-value of the symmetry test between
    /// the positive- and negative-delay halves.
    pub symmetry_p_min: f64,
}

impl Default for CorrelatorConfig {
    fn default() -> Self {
        CorrelatorConfig {
            bin_width_ns: 10.0,
            tau_max_us: 2.0,
            mode: Mode::Cross,
            symmetry_p_min: 1e-6,
        }
    }
}

impl CorrelatorConfig {
    pub fn bin_ps(&self) -> u64 {
        (self.bin_width_ns * 1e3).round() as u64
    }

    pub fn bins(&self) -> usize {
        let w = self.bin_ps() as f64;
        ((self.tau_max_us * PS_PER_US / w) - 1e-9).ceil() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.bin_width_ns.is_finite() && self.bin_width_ns > 0.0) || self.bin_ps() == 0 {
            return Err(Error::InvalidParameter("bin width must be at least 1 ps".into()));
        }
        if !(self.tau_max_us.is_finite() && self.tau_max_us * 1e3 >= 10.0 * self.bin_width_ns * (1.0 - 1e-12)) {
            return Err(Error::InvalidParameter("tau_max must be at least 10 bin widths".into()));
        }
        if !(0.0..1.0).contains(&self.symmetry_p_min) {
            return Err(Error::InvalidParameter("symmetry p-value threshold must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Delay histogram of a stream pair. Bin k holds delays in (k·w, (k+1)·w].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DelayHistogram {
    pub bin_ps: u64,
    pub positive: Vec<u64>,
    /// Delays t1 − t2 > 0 (cross mode only; empty for auto).
    pub negative: Vec<u64>,
    /// Coincidences at exactly zero delay (cross mode only).
    pub zero: u64,
}

const CHUNK: usize = 1 << 15;

fn bin_of(d: u64, w: u64) -> usize {
    ((d - 1) / w) as usize
}

/// Counts delays t2 − t1 for t1 in `a`, t2 in `b`, within ±`span` ps.
/// With `auto` set, `a` and `b` are the same stream and only later clicks
/// are paired.
fn histogram(a: &[u64], b: &[u64], w: u64, bins: usize, auto: bool) -> DelayHistogram {
    let span = w * bins as u64;
    let parts: Vec<(Vec<u64>, Vec<u64>, u64)> = a
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut pos = vec![0u64; bins];
            let mut neg = vec![0u64; if auto { 0 } else { bins }];
            let mut zero = 0u64;
            let mut lo = b.partition_point(|&t| t + span < chunk[0]);
            for &t1 in chunk {
                while lo < b.len() && b[lo] + span < t1 {
                    lo += 1;
                }
                let mut j = lo;
                if auto {
                    j = j.max(b.partition_point(|&t| t <= t1));
                }
                while j < b.len() && b[j] <= t1 + span {
                    let t2 = b[j];
                    if t2 > t1 {
                        pos[bin_of(t2 - t1, w)] += 1;
                    } else if t2 < t1 {
                        neg[bin_of(t1 - t2, w)] += 1;
                    } else if !auto {
                        zero += 1;
                    }
                    j += 1;
                }
            }
            (pos, neg, zero)
        })
        .collect();
    let mut positive = vec![0u64; bins];
    let mut negative = vec![0u64; if auto { 0 } else { bins }];
    let mut zero = 0;
    for (p, n, z) in parts {
        positive.iter_mut().zip(p).for_each(|(acc, v)| *acc += v);
        negative.iter_mut().zip(n).for_each(|(acc, v)| *acc += v);
        zero += z;
    }
    DelayHistogram {
        bin_ps: w,
        positive,
        negative,
        zero,
    }
}

/// The delay histogram without normalization.
pub fn delay_histogram(s1: &ClickStream, s2: Option<&ClickStream>, cfg: &CorrelatorConfig) -> Result<DelayHistogram> {
    cfg.validate()?;
    let (a, b, _) = windowed(s1, s2)?;
    let auto = cfg.mode == Mode::Auto;
    let b = if auto { a } else { b };
    Ok(histogram(a, b, cfg.bin_ps(), cfg.bins(), auto))
}

/// Clicks of both streams restricted to the overlap window, and its length.
fn windowed<'a>(s1: &'a ClickStream, s2: Option<&'a ClickStream>) -> Result<(&'a [u64], &'a [u64], u64)> {
    check_sorted(s1)?;
    let s2 = s2.unwrap_or(s1);
    check_sorted(s2)?;
    let overlap = s1.duration_ps.min(s2.duration_ps);
    let cut = |s: &'a ClickStream| &s.timestamps[..s.timestamps.partition_point(|&t| t < overlap)];
    let (a, b) = (cut(s1), cut(s2));
    if a.is_empty() || b.is_empty() || overlap == 0 {
        return Err(Error::EmptyStream);
    }
    Ok((a, b, overlap))
}

fn check_sorted(s: &ClickStream) -> Result<()> {
    match s.timestamps.windows(2).position(|w| w[1] <= w[0]) {
        Some(i) => Err(Error::Unsorted { index: i + 1 }),
        None => Ok(()),
    }
}

/// Pearson χ² symmetry test between the two delay halves; returns the
/// p-value.
pub fn symmetry_p_value(h: &DelayHistogram) -> f64 {
    let mut chi2 = 0.0;
    let mut dof = 0usize;
    for (&p, &n) in h.positive.iter().zip(&h.negative) {
        if p + n > 0 {
            let d = p as f64 - n as f64;
            chi2 += d * d / (p + n) as f64;
            dof += 1;
        }
    }
    if dof == 0 {
        return 1.0;
    }
    ChiSquared::new(dof as f64).map_or(1.0, |c| c.sf(chi2))
}

/// Estimates g²(τ) from one stream (auto) or two (cross).
///
/// Normalization is pairs/(r₁·r₂·T·Δτ) with the rates measured over the
/// overlap window T. Cross traces are folded onto |τ|; zero-delay
/// coincidences are assigned to the first bin.
pub fn correlate(s1: &ClickStream, s2: Option<&ClickStream>, cfg: &CorrelatorConfig) -> Result<CorrelationTrace> {
    cfg.validate()?;
    let (a, b, overlap) = windowed(s1, s2)?;
    let auto = cfg.mode == Mode::Auto;
    if !auto && s2.is_none() {
        return Err(Error::InvalidParameter("cross mode needs two streams".into()));
    }
    let w = cfg.bin_ps();
    let bins = cfg.bins();
    let b = if auto { a } else { b };
    let h = histogram(a, b, w, bins, auto);

    let t_us = overlap as f64 / PS_PER_US;
    let w_us = w as f64 / PS_PER_US;
    let (r1, r2) = (a.len() as f64 / t_us, b.len() as f64 / t_us);
    let mut pairs = h.positive.clone();
    let mut per_bin = r1 * r2 * t_us * w_us;
    if !auto {
        let p = symmetry_p_value(&h);
        if p < cfg.symmetry_p_min {
            return Err(Error::UndefinedCorrelation(format!(
                "cross-correlation halves are asymmetric (p = {p:.3e})"
            )));
        }
        for (acc, n) in pairs.iter_mut().zip(&h.negative) {
            *acc += n;
        }
        pairs[0] += h.zero;
        per_bin *= 2.0;
    }
    Ok(normalize(pairs, vec![per_bin; bins], w_us))
}

fn normalize(pairs: Vec<u64>, expected: Vec<f64>, w_us: f64) -> CorrelationTrace {
    let tau = (0..pairs.len()).map(|k| (k as f64 + 0.5) * w_us).collect();
    let g2 = pairs.iter().zip(&expected).map(|(&p, &e)| p as f64 / e).collect();
    let stderr = pairs.iter().zip(&expected).map(|(&p, &e)| (p as f64).sqrt() / e).collect();
    CorrelationTrace {
        tau,
        g2,
        stderr,
        counts: Some(PairCounts { pairs, expected }),
        bin_width: Some(w_us),
    }
}

/// Merges groups of `factor` adjacent bins.
pub fn rebin(trace: &CorrelationTrace, factor: usize) -> Result<CorrelationTrace> {
    let counts = trace
        .counts
        .as_ref()
        .ok_or_else(|| Error::InvalidParameter("rebinning needs raw pair counts".into()))?;
    let w = trace
        .bin_width
        .ok_or_else(|| Error::InvalidParameter("rebinning needs a bin width".into()))?;
    if factor == 0 || !trace.len().is_multiple_of(factor) {
        return Err(Error::InvalidParameter(format!(
            "factor {factor} does not divide {} bins",
            trace.len()
        )));
    }
    let pairs: Vec<u64> = counts.pairs.chunks(factor).map(|c| c.iter().sum()).collect();
    let expected: Vec<f64> = counts.expected.chunks(factor).map(|c| c.iter().sum()).collect();
    Ok(normalize(pairs, expected, w * factor as f64))
}
