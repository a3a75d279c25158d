//! Monte Carlo wave-function synthesis of photon click streams.
//!
//! The conditional state lives in the two-excitation truncated basis of
//! [`crate::oracle`]. Between jumps it evolves under the non-Hermitian
//! generator; the waiting time is found by drawing a norm threshold and
//! locating its crossing with exact propagators for power-of-two
//! picosecond steps.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use rayon::prelude::*;

use crate::dynamics::Emitter;
use crate::error::{Error, Result};
use crate::model::RateParams;
use crate::oracle::MasterEquation;

type C = Complex64;

pub const MAGIC: &[u8; 4] = b"CQTS";
pub const FORMAT_VERSION: u16 = 1;
const HEADER_LEN: u64 = 4 + 2 + 2 + 8 + 8;

pub const PS_PER_US: f64 = 1e6;

/// Time-tagged clicks of one detector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClickStream {
    pub detector: u16,
    pub duration_ps: u64,
    /// Strictly increasing, all below `duration_ps`.
    pub timestamps: Vec<u64>,
}

impl ClickStream {
    pub fn new(detector: u16, duration_ps: u64, timestamps: Vec<u64>) -> Result<Self> {
        if let Some(i) = timestamps.windows(2).position(|w| w[1] <= w[0]) {
            return Err(Error::Unsorted { index: i + 1 });
        }
        if let Some(&last) = timestamps.last() {
            if last >= duration_ps {
                return Err(Error::InvalidParameter(format!(
                    "timestamp {last} ps not below duration {duration_ps} ps"
                )));
            }
        }
        Ok(ClickStream {
            detector,
            duration_ps,
            timestamps,
        })
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn duration_us(&self) -> f64 {
        self.duration_ps as f64 / PS_PER_US
    }

    /// Mean click rate (counts/µs).
    pub fn rate(&self) -> f64 {
        self.len() as f64 / self.duration_us()
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(MAGIC)?;
        out.write_all(&FORMAT_VERSION.to_le_bytes())?;
        out.write_all(&self.detector.to_le_bytes())?;
        out.write_all(&(self.timestamps.len() as u64).to_le_bytes())?;
        out.write_all(&self.duration_ps.to_le_bytes())?;
        for t in &self.timestamps {
            out.write_all(&t.to_le_bytes())?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut input: R) -> Result<Self> {
        let mut offset = 0u64;
        let mut take = |buf: &mut [u8], what: &str, offset: &mut u64| -> Result<()> {
            read_full(&mut input, buf).map_err(|got| Error::Parse {
                offset: *offset + got as u64,
                reason: format!("truncated {what}"),
            })?;
            *offset += buf.len() as u64;
            Ok(())
        };
        let mut magic = [0u8; 4];
        take(&mut magic, "magic", &mut offset)?;
        if &magic != MAGIC {
            let bad = magic.iter().zip(MAGIC).position(|(a, b)| a != b).unwrap_or(0);
            return Err(Error::Parse {
                offset: bad as u64,
                reason: format!("bad magic {magic:?}"),
            });
        }
        let mut b2 = [0u8; 2];
        take(&mut b2, "version", &mut offset)?;
        let version = u16::from_le_bytes(b2);
        if version != FORMAT_VERSION {
            return Err(Error::Parse {
                offset: 4,
                reason: format!("unsupported version {version}"),
            });
        }
        take(&mut b2, "detector id", &mut offset)?;
        let detector = u16::from_le_bytes(b2);
        let mut b8 = [0u8; 8];
        take(&mut b8, "count", &mut offset)?;
        let count = u64::from_le_bytes(b8);
        take(&mut b8, "duration", &mut offset)?;
        let duration_ps = u64::from_le_bytes(b8);
        let mut timestamps = Vec::with_capacity(count.min(1 << 24) as usize);
        let mut prev: Option<u64> = None;
        for i in 0..count {
            let at = offset;
            take(&mut b8, "timestamp", &mut offset)?;
            let t = u64::from_le_bytes(b8);
            if prev.is_some_and(|p| t <= p) {
                return Err(Error::Unsorted { index: i as usize });
            }
            if t >= duration_ps {
                return Err(Error::Parse {
                    offset: at,
                    reason: format!("timestamp {t} ps not below duration {duration_ps} ps"),
                });
            }
            prev = Some(t);
            timestamps.push(t);
        }
        let mut extra = [0u8; 1];
        if input.read(&mut extra)? != 0 {
            return Err(Error::Parse {
                offset: HEADER_LEN + 8 * count,
                reason: "trailing bytes after declared timestamps".into(),
            });
        }
        Ok(ClickStream {
            detector,
            duration_ps,
            timestamps,
        })
    }

    /// One timestamp (ps) per line. `#` lines carry the detector id and
    /// duration as `# detector=<id>` and `# duration_ps=<n>`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "# detector={}", self.detector)?;
        writeln!(out, "# duration_ps={}", self.duration_ps)?;
        for t in &self.timestamps {
            writeln!(out, "{t}")?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(input: R) -> Result<Self> {
        let mut detector = 0u16;
        let mut duration = None;
        let mut timestamps = Vec::new();
        let mut offset = 0u64;
        for line in input.lines() {
            let line = line?;
            let at = offset;
            offset += line.len() as u64 + 1;
            let s = line.trim();
            if s.is_empty() {
                continue;
            }
            let parse_err = |reason: String| Error::Parse { offset: at, reason };
            if let Some(meta) = s.strip_prefix('#') {
                if let Some((k, v)) = meta.trim().split_once('=') {
                    match k.trim() {
                        "detector" => detector = v.trim().parse().map_err(|e| parse_err(format!("{e}")))?,
                        "duration_ps" => duration = Some(v.trim().parse().map_err(|e| parse_err(format!("{e}")))?),
                        _ => {}
                    }
                }
                continue;
            }
            timestamps.push(s.parse::<u64>().map_err(|e| parse_err(format!("{e}")))?);
        }
        let duration_ps = match duration {
            Some(d) => d,
            None => timestamps.last().map_or(0, |t| t + 1),
        };
        ClickStream::new(detector, duration_ps, timestamps)
    }
}

/// Reads into `buf` until full; on EOF returns the number of bytes read.
fn read_full<R: Read>(r: &mut R, buf: &mut [u8]) -> std::result::Result<(), usize> {
    let mut got = 0;
    while got < buf.len() {
        match r.read(&mut buf[got..]) {
            Ok(0) => return Err(got),
            Ok(n) => got += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(_) => return Err(got),
        }
    }
    Ok(())
}

pub fn write_stream(stream: &ClickStream, path: &Path) -> Result<()> {
    stream.write_to(BufWriter::new(File::create(path)?))
}

pub fn read_stream(path: &Path) -> Result<ClickStream> {
    ClickStream::read_from(BufReader::new(File::open(path)?))
}

/// Reads either the binary format (detected by its magic) or the CSV form.
pub fn read_stream_any(path: &Path) -> Result<ClickStream> {
    let mut head = [0u8; 4];
    let n = File::open(path)?.read(&mut head)?;
    if n == 4 && &head == MAGIC {
        read_stream(path)
    } else {
        ClickStream::read_csv(BufReader::new(File::open(path)?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrajectoryConfig {
    pub duration_us: f64,
    /// Detection efficiency η.
    pub efficiency: f64,
    /// Total background rate over both detectors (counts/µs), routed by the
    /// split ratio.
    pub background_rate: f64,
    /// Probability that a click goes to detector 0.
    pub split_ratio: f64,
    /// Detector dead time (µs); 0 disables it.
    pub dead_time_us: f64,
    pub seed: u64,
    /// Independent trajectory segments (each with its own burn-in).
    pub segments: usize,
}

impl Default for TrajectoryConfig {
    fn default() -> Self {
        TrajectoryConfig {
            duration_us: 1e4,
            efficiency: 0.3,
            background_rate: 0.0,
            split_ratio: 0.5,
            dead_time_us: 0.0,
            seed: 0,
            segments: 1,
        }
    }
}

impl TrajectoryConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.duration_us.is_finite() && self.duration_us > 0.0) {
            return Err(Error::InvalidParameter("duration must be positive".into()));
        }
        if self.duration_us * PS_PER_US >= u64::MAX as f64 / 2.0 {
            return Err(Error::InvalidParameter("duration overflows the picosecond clock".into()));
        }
        if !(0.0..=1.0).contains(&self.efficiency) {
            return Err(Error::InvalidParameter("efficiency must lie in [0, 1]".into()));
        }
        if !(self.background_rate.is_finite() && self.background_rate >= 0.0) {
            return Err(Error::InvalidParameter("background rate must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.split_ratio) {
            return Err(Error::InvalidParameter("split ratio must lie in [0, 1]".into()));
        }
        if !(self.dead_time_us.is_finite() && self.dead_time_us >= 0.0) {
            return Err(Error::InvalidParameter("dead time must be >= 0".into()));
        }
        if self.segments == 0 {
            return Err(Error::InvalidParameter("segments must be >= 1".into()));
        }
        Ok(())
    }

    pub fn duration_ps(&self) -> u64 {
        (self.duration_us * PS_PER_US).round() as u64
    }
}

/// Largest propagation step, 2^LEVELS ps.
const LEVELS: usize = 17;
/// Relaxation time simulated before recording starts (µs).
const BURN_IN_US: f64 = 5.0;

struct Propagators {
    /// exp(X·2^k ps) for k = 0..=LEVELS.
    steps: Vec<DMatrix<C>>,
    jumps: Vec<DMatrix<C>>,
}

impl Propagators {
    fn new(me: &MasterEquation) -> Self {
        let x = me.effective_generator();
        let steps = (0..=LEVELS)
            .map(|k| (x * C::new((1u64 << k) as f64 / PS_PER_US, 0.0)).exp())
            .collect();
        Propagators {
            steps,
            jumps: me.jump_operators().to_vec(),
        }
    }
}

fn norm_sqr(v: &DVector<C>) -> f64 {
    v.iter().map(|c| c.norm_sqr()).sum()
}

/// Simulates one trajectory segment and returns recorded emission times
/// (ps, relative to the segment start) before thinning.
fn run_segment<R: Rng>(props: &Propagators, length_ps: u64, rng: &mut R) -> Result<Vec<u64>> {
    let d = props.steps[0].nrows();
    let mut psi = DVector::from_element(d, C::new(0.0, 0.0));
    psi[0] = C::new(1.0, 0.0);
    let mut trial = psi.clone();
    let burn_in = (BURN_IN_US * PS_PER_US) as i64;
    let end = length_ps as i64;
    let mut t: i64 = -burn_in;
    let mut emissions = Vec::new();
    let coarse = 1i64 << LEVELS;
    'outer: loop {
        let threshold: f64 = 1.0 - rng.random::<f64>();
        loop {
            trial.gemv(C::new(1.0, 0.0), &props.steps[LEVELS], &psi, C::new(0.0, 0.0));
            if norm_sqr(&trial) > threshold {
                std::mem::swap(&mut psi, &mut trial);
                t += coarse;
                if t >= end {
                    break 'outer;
                }
                continue;
            }
            for k in (0..LEVELS).rev() {
                trial.gemv(C::new(1.0, 0.0), &props.steps[k], &psi, C::new(0.0, 0.0));
                if norm_sqr(&trial) > threshold {
                    std::mem::swap(&mut psi, &mut trial);
                    t += 1i64 << k;
                }
            }
            trial.gemv(C::new(1.0, 0.0), &props.steps[0], &psi, C::new(0.0, 0.0));
            std::mem::swap(&mut psi, &mut trial);
            t += 1;
            break;
        }
        if t >= end {
            break;
        }
        let weights: Vec<f64> = props.jumps.iter().map(|j| norm_sqr(&(j * &psi))).collect();
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) || !total.is_finite() {
            return Err(Error::IntegrationFailure {
                time: t as f64 / PS_PER_US,
                reason: "no jump channel available at norm crossing".into(),
            });
        }
        let mut pick = rng.random::<f64>() * total;
        let mut channel = weights.len() - 1;
        for (i, w) in weights.iter().enumerate() {
            if pick < *w {
                channel = i;
                break;
            }
            pick -= w;
        }
        psi = &props.jumps[channel] * &psi;
        let n = norm_sqr(&psi).sqrt();
        psi /= C::new(n, 0.0);
        if channel == 0 && t >= 0 {
            emissions.push(t as u64);
        }
    }
    Ok(emissions)
}

/// Splits emissions into two detectors after thinning by η.
fn detect<R: Rng>(emissions: &[u64], eta: f64, split: f64, rng: &mut R) -> (Vec<u64>, Vec<u64>) {
    let mut d0 = Vec::new();
    let mut d1 = Vec::new();
    for &t in emissions {
        if rng.random::<f64>() < eta {
            if rng.random::<f64>() < split {
                d0.push(t);
            } else {
                d1.push(t);
            }
        }
    }
    (d0, d1)
}

fn poisson_times<R: Rng>(rate_per_us: f64, duration_ps: u64, rng: &mut R) -> Vec<u64> {
    let mut out = Vec::new();
    if rate_per_us <= 0.0 {
        return out;
    }
    let exp = Exp::new(rate_per_us).expect("positive rate");
    let mut t = 0.0;
    let end = duration_ps as f64 / PS_PER_US;
    loop {
        t += exp.sample(rng);
        if t >= end {
            break;
        }
        out.push((t * PS_PER_US) as u64);
    }
    out
}

fn finish(detector: u16, duration_ps: u64, mut ts: Vec<u64>, dead_ps: u64) -> ClickStream {
    ts.sort_unstable();
    ts.dedup();
    ts.retain(|&t| t < duration_ps);
    let stream = ClickStream {
        detector,
        duration_ps,
        timestamps: ts,
    };
    if dead_ps > 0 {
        apply_dead_time(&stream, dead_ps)
    } else {
        stream
    }
}

/// Synthesizes the two detector streams of a Hanbury Brown–Twiss setup.
pub fn mcwf_synthesize(
    params: &RateParams,
    atoms: &[Emitter],
    cfg: &TrajectoryConfig,
) -> Result<(ClickStream, ClickStream)> {
    cfg.validate()?;
    params.check_weak_drive()?;
    let me = MasterEquation::new(params, atoms)?;
    if params.eps == 0.0 {
        return Err(Error::UndefinedCorrelation("zero drive gives zero steady intensity".into()));
    }
    let props = Propagators::new(&me);
    let duration_ps = cfg.duration_ps();
    let segs = cfg.segments as u64;
    let seg_len = duration_ps.div_ceil(segs);
    let parts: Vec<(Vec<u64>, Vec<u64>)> = (0..segs)
        .into_par_iter()
        .map(|s| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(s);
            let start = s * seg_len;
            let len = seg_len.min(duration_ps.saturating_sub(start));
            let em = run_segment(&props, len, &mut rng)?;
            let (a, b) = detect(&em, cfg.efficiency, cfg.split_ratio, &mut rng);
            Ok((
                a.into_iter().map(|t| t + start).collect(),
                b.into_iter().map(|t| t + start).collect(),
            ))
        })
        .collect::<Result<_>>()?;
    let mut d0: Vec<u64> = Vec::new();
    let mut d1: Vec<u64> = Vec::new();
    for (a, b) in parts {
        d0.extend(a);
        d1.extend(b);
    }
    let mut bg = ChaCha8Rng::seed_from_u64(cfg.seed);
    bg.set_stream(u64::MAX);
    d0.extend(poisson_times(cfg.background_rate * cfg.split_ratio, duration_ps, &mut bg));
    d1.extend(poisson_times(cfg.background_rate * (1.0 - cfg.split_ratio), duration_ps, &mut bg));
    let dead_ps = (cfg.dead_time_us * PS_PER_US).round() as u64;
    Ok((finish(0, duration_ps, d0, dead_ps), finish(1, duration_ps, d1, dead_ps)))
}

/// Expected total detected rate η·2κ⟨a†a⟩_ss + background (counts/µs).
pub fn expected_detected_rate(params: &RateParams, atoms: &[Emitter], cfg: &TrajectoryConfig) -> Result<f64> {
    let me = MasterEquation::new(params, atoms)?;
    let ss = me.steady_state()?;
    let n = ss.expectation(me.photon_number()).re;
    Ok(cfg.efficiency * 2.0 * params.kappa * n + cfg.background_rate)
}

/// Keeps each click independently with probability `eta`.
pub fn thin(stream: &ClickStream, eta: f64, seed: u64) -> ClickStream {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ClickStream {
        detector: stream.detector,
        duration_ps: stream.duration_ps,
        timestamps: stream
            .timestamps
            .iter()
            .copied()
            .filter(|_| rng.random::<f64>() < eta)
            .collect(),
    }
}

/// Drops clicks that arrive within `dead_ps` of the previous kept click.
pub fn apply_dead_time(stream: &ClickStream, dead_ps: u64) -> ClickStream {
    let mut kept = Vec::with_capacity(stream.len());
    let mut last: Option<u64> = None;
    for &t in &stream.timestamps {
        if last.is_none_or(|l| t - l >= dead_ps) {
            kept.push(t);
            last = Some(t);
        }
    }
    ClickStream {
        detector: stream.detector,
        duration_ps: stream.duration_ps,
        timestamps: kept,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_stream() -> ClickStream {
        ClickStream::new(1, 1_000_000, vec![3, 17, 999_999]).unwrap()
    }

    #[test]
    fn binary_round_trip() {
        for s in [sample_stream(), ClickStream::new(0, 5, vec![]).unwrap()] {
            let mut buf = Vec::new();
            s.write_to(&mut buf).unwrap();
            assert_eq!(buf.len() as u64, HEADER_LEN + 8 * s.len() as u64);
            assert_eq!(&buf[..4], b"CQTS");
            assert_eq!(ClickStream::read_from(&buf[..]).unwrap(), s);
        }
    }

    #[test]
    fn corrupted_header() {
        let mut buf = Vec::new();
        sample_stream().write_to(&mut buf).unwrap();
        let mut bad = buf.clone();
        bad[2] = b'X';
        assert!(matches!(ClickStream::read_from(&bad[..]), Err(Error::Parse { offset: 2, .. })));
        let mut bad = buf.clone();
        bad[4] = 9;
        assert!(matches!(ClickStream::read_from(&bad[..]), Err(Error::Parse { offset: 4, .. })));
        let cut = &buf[..buf.len() - 3];
        assert!(matches!(
            ClickStream::read_from(cut),
            Err(Error::Parse { offset, .. }) if offset == buf.len() as u64 - 3
        ));
    }

    #[test]
    fn csv_round_trip() {
        let s = sample_stream();
        let mut buf = Vec::new();
        s.write_csv(&mut buf).unwrap();
        assert_eq!(ClickStream::read_csv(&buf[..]).unwrap(), s);
        assert!(matches!(
            ClickStream::read_csv(&b"5\n4\n"[..]),
            Err(Error::Unsorted { index: 1 })
        ));
    }

    #[test]
    fn unsorted_rejected() {
        assert!(matches!(ClickStream::new(0, 10, vec![1, 1]), Err(Error::Unsorted { index: 1 })));
    }

    #[test]
    fn dead_time_filter() {
        let s = ClickStream::new(0, 100, vec![0, 5, 9, 10, 30]).unwrap();
        assert_eq!(apply_dead_time(&s, 10).timestamps, vec![0, 10, 30]);
    }

    #[test]
    fn norm_decreases_between_jumps() {
        let p = RateParams::paper().with_eps_over_kappa(0.1);
        let me = MasterEquation::new(&p, &[Emitter::atom(p.g_max, 0.0)]).unwrap();
        let props = Propagators::new(&me);
        let mut psi = DVector::from_element(me.basis().dim(), C::new(0.0, 0.0));
        psi[0] = C::new(1.0, 0.0);
        let mut prev = 1.0;
        for _ in 0..200 {
            psi = &props.steps[12] * &psi;
            let n = norm_sqr(&psi);
            assert!(n <= prev * (1.0 + 1e-15));
            prev = n;
        }
        let j = &props.jumps[0] * &psi;
        let j = &j / C::new(norm_sqr(&j).sqrt(), 0.0);
        assert!((norm_sqr(&j) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn coherent_click_rate() {
        let p = RateParams::paper().with_eps_over_kappa(0.1);
        let cfg = TrajectoryConfig {
            duration_us: 2e4,
            efficiency: 1.0,
            seed: 4,
            ..Default::default()
        };
        let (a, b) = mcwf_synthesize(&p, &[], &cfg).unwrap();
        let n = (a.len() + b.len()) as f64;
        let want = 2.0 * p.kappa * 0.01 * cfg.duration_us;
        assert!((n - want).abs() < 3.0 * want.sqrt(), "{n} vs {want}");
    }

    #[test]
    fn detected_rate_formula() {
        let p = RateParams::paper().with_eps_over_kappa(0.1);
        let at = [Emitter::atom(p.g_max, 0.0)];
        for (eta, seed) in [(0.1, 1), (0.3, 2), (1.0, 3)] {
            let cfg = TrajectoryConfig {
                duration_us: 5e4,
                efficiency: eta,
                background_rate: 0.02,
                seed,
                ..Default::default()
            };
            let (a, b) = mcwf_synthesize(&p, &at, &cfg).unwrap();
            let n = (a.len() + b.len()) as f64;
            let want = expected_detected_rate(&p, &at, &cfg).unwrap() * cfg.duration_us;
            assert!((n - want).abs() < 3.0 * want.sqrt(), "eta {eta}: {n} vs {want}");
        }
    }

    #[test]
    fn zero_efficiency_leaves_background() {
        let p = RateParams::paper().with_eps_over_kappa(0.1);
        let cfg = TrajectoryConfig {
            duration_us: 1e4,
            efficiency: 0.0,
            background_rate: 0.1,
            seed: 8,
            ..Default::default()
        };
        let (a, b) = mcwf_synthesize(&p, &[Emitter::atom(p.g_max, 0.0)], &cfg).unwrap();
        let n = (a.len() + b.len()) as f64;
        assert!((n - 1000.0).abs() < 3.0 * 1000f64.sqrt());
        let silent = TrajectoryConfig {
            background_rate: 0.0,
            ..cfg
        };
        let (a, b) = mcwf_synthesize(&p, &[Emitter::atom(p.g_max, 0.0)], &silent).unwrap();
        assert!(a.is_empty() && b.is_empty());
    }

    #[test]
    fn segments_are_deterministic() {
        let p = RateParams::paper().with_eps_over_kappa(0.1);
        let cfg = TrajectoryConfig {
            duration_us: 2000.0,
            segments: 4,
            seed: 12,
            ..Default::default()
        };
        let at = [Emitter::atom(p.g_max, 0.0)];
        assert_eq!(
            mcwf_synthesize(&p, &at, &cfg).unwrap(),
            mcwf_synthesize(&p, &at, &cfg).unwrap()
        );
    }
}
