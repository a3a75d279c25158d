//! Run configuration: TOML file, `CQED_<SECTION>_<KEY>` environment
//! overrides and command-line overrides, resolved in that order over the
//! defaults.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use cqed_core::analysis::SweepOptions;
use cqed_core::correlator::CorrelatorConfig;
use cqed_core::dynamics::Emitter;
use cqed_core::ensemble::{AtomNumber, BeamConfig, ModeGeometry};
use cqed_core::model::{atoms_for_omega_vr, mhz_to_rate, RateParams, DEFAULT_EPS_OVER_KAPPA};
use cqed_core::nonmarkov::BlpOptions;
use cqed_core::trajectories::TrajectoryConfig;
use cqed_core::{Error, Result};

/// Rates in MHz (ν = ω/2π).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SystemSection {
    pub g_mhz: f64,
    pub kappa_mhz: f64,
    pub gamma_mhz: f64,
    pub eps_over_kappa: f64,
    pub delta_c_mhz: f64,
    pub delta_a_mhz: f64,
}

impl Default for SystemSection {
    fn default() -> Self {
        SystemSection {
            g_mhz: 3.2,
            kappa_mhz: 4.5,
            gamma_mhz: 6.0,
            eps_over_kappa: DEFAULT_EPS_OVER_KAPPA,
            delta_c_mhz: 0.0,
            delta_a_mhz: 0.0,
        }
    }
}

impl SystemSection {
    pub fn params(&self) -> Result<RateParams> {
        let p = RateParams::from_mhz(self.g_mhz, self.kappa_mhz, self.gamma_mhz, self.eps_over_kappa)?;
        let p = p.with_detunings(mhz_to_rate(self.delta_c_mhz), mhz_to_rate(self.delta_a_mhz));
        p.validate()?;
        Ok(p)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BeamSection {
    pub n_eff: f64,
    /// When set, N_eff is derived from this |Ω_VR|/2π instead.
    pub omega_vr_mhz: Option<f64>,
    pub jitter_kappa: f64,
    pub zeeman_offset_mhz: f64,
    pub zeeman_scale: f64,
    pub realizations: usize,
    pub cutoff: f64,
    pub atom_number: AtomNumber,
    /// Background contrast β: g² ↦ 1 + β(g² − 1).
    pub contrast: f64,
}

impl Default for BeamSection {
    fn default() -> Self {
        let b = BeamConfig::default();
        BeamSection {
            n_eff: b.n_eff,
            omega_vr_mhz: None,
            jitter_kappa: b.jitter_kappa,
            zeeman_offset_mhz: 5.0,
            zeeman_scale: b.zeeman_scale,
            realizations: b.realizations,
            cutoff: b.cutoff,
            atom_number: b.atom_number,
            contrast: 1.0,
        }
    }
}

impl BeamSection {
    pub fn config(&self, params: &RateParams, seed: u64) -> BeamConfig {
        let n_eff = match self.omega_vr_mhz {
            Some(nu) => atoms_for_omega_vr(params, mhz_to_rate(nu)),
            None => self.n_eff,
        };
        BeamConfig {
            n_eff,
            jitter_kappa: self.jitter_kappa,
            zeeman_offset: mhz_to_rate(self.zeeman_offset_mhz),
            zeeman_scale: self.zeeman_scale,
            realizations: self.realizations,
            seed,
            cutoff: self.cutoff,
            atom_number: self.atom_number,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StreamFormat {
    Binary,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrajectorySection {
    pub duration_us: f64,
    pub efficiency: f64,
    pub background_rate: f64,
    pub split_ratio: f64,
    pub dead_time_us: f64,
    pub segments: usize,
    /// Number of maximally coupled resonant atoms (≤ 4), used when `atoms`
    /// is empty.
    pub n_atoms: usize,
    /// Explicit atoms as [coupling MHz, detuning MHz].
    pub atoms: Vec<[f64; 2]>,
    pub format: StreamFormat,
}

impl Default for TrajectorySection {
    fn default() -> Self {
        let t = TrajectoryConfig::default();
        TrajectorySection {
            duration_us: t.duration_us,
            efficiency: t.efficiency,
            background_rate: t.background_rate,
            split_ratio: t.split_ratio,
            dead_time_us: t.dead_time_us,
            segments: t.segments,
            n_atoms: 1,
            atoms: Vec::new(),
            format: StreamFormat::Binary,
        }
    }
}

impl TrajectorySection {
    pub fn config(&self, seed: u64) -> TrajectoryConfig {
        TrajectoryConfig {
            duration_us: self.duration_us,
            efficiency: self.efficiency,
            background_rate: self.background_rate,
            split_ratio: self.split_ratio,
            dead_time_us: self.dead_time_us,
            seed,
            segments: self.segments,
        }
    }

    pub fn emitters(&self, params: &RateParams) -> Vec<Emitter> {
        if self.atoms.is_empty() {
            (0..self.n_atoms).map(|_| Emitter::atom(params.g_max, params.delta_a)).collect()
        } else {
            self.atoms
                .iter()
                .map(|[g, d]| Emitter::atom(mhz_to_rate(*g), mhz_to_rate(*d)))
                .collect()
        }
    }
}

/// Grids for the closed-form, refined and spectrum commands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSection {
    pub n_atoms: f64,
    pub tau_max_us: f64,
    pub points: usize,
    pub span_mhz: f64,
    pub spectrum_points: usize,
}

impl Default for GridSection {
    fn default() -> Self {
        GridSection {
            n_atoms: 1.0,
            tau_max_us: 1.0,
            points: 201,
            span_mhz: 40.0,
            spectrum_points: 4001,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitSection {
    pub window_us: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub targets_mhz: Vec<f64>,
    pub tau_max_us: f64,
    pub tau_points: usize,
    pub batches: usize,
}

impl Default for SweepSection {
    fn default() -> Self {
        let o = SweepOptions::default();
        SweepSection {
            targets_mhz: (0..11).map(|i| 1.0 + 0.5 * i as f64).collect(),
            tau_max_us: o.tau_max_us,
            tau_points: o.tau_points,
            batches: o.batches,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Averaging {
    /// Random positions only.
    PositionsOnly,
    /// The full beam model of `[beam]`.
    Beam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BlpSection {
    pub n_eff: Vec<f64>,
    pub averaging: Averaging,
    pub t_max_us: f64,
    pub points: usize,
    pub theta_points: usize,
    pub max_depth: u32,
}

impl Default for BlpSection {
    fn default() -> Self {
        let o = BlpOptions::default();
        BlpSection {
            n_eff: vec![0.0, 0.05, 0.1, 0.2, 0.3, 0.5, 0.75, 1.0, 1.5, 2.0, 2.5, 3.0, 4.0, 5.0, 6.0, 8.0, 10.0],
            averaging: Averaging::PositionsOnly,
            t_max_us: o.t_max_us,
            points: o.points,
            theta_points: o.theta_points,
            max_depth: o.max_depth,
        }
    }
}

impl BlpSection {
    pub fn options(&self) -> BlpOptions {
        BlpOptions {
            t_max_us: self.t_max_us,
            points: self.points,
            theta_points: self.theta_points,
            max_depth: self.max_depth,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub system: SystemSection,
    pub grid: GridSection,
    pub beam: BeamSection,
    pub geometry: ModeGeometry,
    pub trajectory: TrajectorySection,
    pub correlator: CorrelatorConfig,
    pub fit: FitSection,
    pub sweep: SweepSection,
    pub blp: BlpSection,
}

const SECTIONS: [&str; 9] = [
    "correlator",
    "trajectory",
    "geometry",
    "system",
    "sweep",
    "beam",
    "grid",
    "blp",
    "fit",
];

/// One `section.key = value` override; `section` is empty for top-level keys.
#[derive(Debug, Clone, PartialEq)]
pub struct Override {
    pub section: String,
    pub key: String,
    pub value: toml::Value,
}

impl Override {
    pub fn new(section: &str, key: &str, value: impl Into<toml::Value>) -> Self {
        Override {
            section: section.into(),
            key: key.into(),
            value: value.into(),
        }
    }

    /// Parses `section.key=value`; the value is read as a TOML literal and
    /// falls back to a string.
    pub fn parse(spec: &str) -> Result<Self> {
        let (path, raw) = spec
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{spec}` is not of the form section.key=value")))?;
        let (section, key) = match path.trim().split_once('.') {
            Some((s, k)) => (s.to_string(), k.to_string()),
            None => (String::new(), path.trim().to_string()),
        };
        Ok(Override {
            section,
            key,
            value: parse_value(raw.trim()),
        })
    }
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Overrides from `CQED_<SECTION>_<KEY>` variables, sorted by name.
pub fn env_overrides<I: IntoIterator<Item = (String, String)>>(vars: I) -> Vec<Override> {
    let mut out: Vec<(String, Override)> = vars
        .into_iter()
        .filter_map(|(name, value)| {
            let rest = name.strip_prefix("CQED_")?.to_ascii_lowercase();
            let section = SECTIONS.iter().find(|s| {
                rest.strip_prefix(*s).is_some_and(|r| r.starts_with('_') && r.len() > 1)
            })?;
            let key = rest[section.len() + 1..].to_string();
            Some((
                name.clone(),
                Override {
                    section: section.to_string(),
                    key,
                    value: parse_value(value.trim()),
                },
            ))
        })
        .collect();
    out.sort_by(|a, b| a.0.cmp(&b.0));
    out.into_iter().map(|(_, o)| o).collect()
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn apply(table: &mut toml::Table, o: &Override) -> Result<()> {
    let target = if o.section.is_empty() {
        table
    } else {
        match table
            .entry(o.section.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
        {
            toml::Value::Table(t) => t,
            _ => return Err(Error::Config(format!("`{}` is not a section", o.section))),
        }
    };
    target.insert(o.key.clone(), o.value.clone());
    Ok(())
}

impl RunConfig {
    /// Resolves defaults ← file ← overrides (applied in order).
    pub fn resolve(file: Option<&Path>, overrides: &[Override]) -> Result<Self> {
        let mut table = toml::Table::try_from(RunConfig::default()).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)?;
            let parsed: toml::Table = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            merge(&mut table, parsed);
        }
        for o in overrides {
            apply(&mut table, o)?;
        }
        toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> String {
        Sha256::digest(self.to_toml().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn sweep_options(&self) -> SweepOptions {
        SweepOptions {
            tau_max_us: self.sweep.tau_max_us,
            tau_points: self.sweep.tau_points,
            batches: self.sweep.batches,
            contrast: self.beam.contrast,
            window_us: self.fit.window_us,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::default();
        let back: RunConfig = toml::from_str(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(c.hash().len(), 64);
    }

    #[test]
    fn precedence() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "seed = 3\n[system]\ng_mhz = 2.0\nkappa_mhz = 5.0\n").unwrap();
        let env = env_overrides(vec![
            ("CQED_SYSTEM_G_MHZ".to_string(), "2.5".to_string()),
            ("CQED_SEED".to_string(), "9".to_string()),
            ("HOME".to_string(), "/".to_string()),
        ]);
        assert_eq!(env.len(), 1);
        let mut all = env;
        all.push(Override::parse("beam.realizations=7").unwrap());
        let c = RunConfig::resolve(Some(&path), &all).unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.system.g_mhz, 2.5);
        assert_eq!(c.system.kappa_mhz, 5.0);
        assert_eq!(c.beam.realizations, 7);
    }

    #[test]
    fn unknown_keys_rejected() {
        let r = RunConfig::resolve(None, &[Override::parse("system.bogus=1").unwrap()]);
        assert!(matches!(r, Err(Error::Config(_))));
        assert!(Override::parse("no-equals").is_err());
    }

    #[test]
    fn mode_and_lists_parse() {
        let c = RunConfig::resolve(
            None,
            &[
                Override::parse("correlator.mode=\"auto\"").unwrap(),
                Override::parse("sweep.targets_mhz=[1.1, 2.8, 5.2]").unwrap(),
                Override::parse("correlator.mode=auto").unwrap(),
            ],
        )
        .unwrap();
        assert_eq!(c.correlator.mode, cqed_core::correlator::Mode::Auto);
        assert_eq!(c.sweep.targets_mhz, vec![1.1, 2.8, 5.2]);
    }

    #[test]
    fn omega_target_sets_n_eff() {
        let mut c = RunConfig::default();
        c.beam.omega_vr_mhz = Some(2.8);
        let p = c.system.params().unwrap();
        let b = c.beam.config(&p, 0);
        assert!((b.n_eff - 0.82).abs() < 0.01);
    }
}
