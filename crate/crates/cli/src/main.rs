mod config;

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{env_overrides, Averaging, Override, RunConfig, StreamFormat};
use cqed_core::analysis::{fit_inverted_lorentzian, speed_sweep};
use cqed_core::correlator::{correlate, Mode};
use cqed_core::dynamics::{transmission_spectrum, Medium};
use cqed_core::ensemble::{BeamConfig, Ensemble};
use cqed_core::model::{
    derive, g2_closed_form, mhz_to_rate, oscillation_threshold, purcell_rates, rate_to_mhz,
};
use cqed_core::nonmarkov::{blp_vs_coupling, write_curve_csv};
use cqed_core::oracle::check_matrix;
use cqed_core::trace::{uniform_grid, CorrelationTrace};
use cqed_core::trajectories::{mcwf_synthesize, read_stream_any, ClickStream};
use cqed_core::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "cqed", version, about = "Weak-drive cavity QED field dynamics")]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed.
    #[arg(long, global = true, env = "CQED_SEED")]
    seed: Option<u64>,
    /// Worker threads (0 = all cores). Does not affect results.
    #[arg(long, global = true, env = "CQED_WORKERS", default_value_t = 0)]
    workers: usize,
    /// Output path (stdout when omitted; file prefix for `synthesize`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Extra override `section.key=value`, repeatable.
    #[arg(long = "set", global = true, value_name = "SECTION.KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct SystemFlags {
    #[arg(long)]
    g_mhz: Option<f64>,
    #[arg(long)]
    kappa_mhz: Option<f64>,
    #[arg(long)]
    gamma_mhz: Option<f64>,
    #[arg(long)]
    eps_over_kappa: Option<f64>,
    #[arg(long)]
    delta_c_mhz: Option<f64>,
    #[arg(long)]
    delta_a_mhz: Option<f64>,
}

#[derive(Args, Debug, Default)]
struct GridFlags {
    /// Number of maximally coupled atoms (may be fractional).
    #[arg(long)]
    n_atoms: Option<f64>,
    #[arg(long)]
    tau_max_us: Option<f64>,
    #[arg(long)]
    points: Option<usize>,
}

#[derive(Args, Debug, Default)]
struct BeamFlags {
    #[arg(long)]
    n_eff: Option<f64>,
    #[arg(long)]
    omega_vr_mhz: Option<f64>,
    #[arg(long)]
    jitter_kappa: Option<f64>,
    #[arg(long)]
    zeeman_scale: Option<f64>,
    #[arg(long)]
    realizations: Option<usize>,
    #[arg(long)]
    contrast: Option<f64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Derived constants for N maximally coupled atoms.
    Params {
        #[command(flatten)]
        system: SystemFlags,
        #[arg(long)]
        n_atoms: Option<f64>,
    },
    /// Closed-form g²(τ) for N maximally coupled atoms.
    G2Closed {
        #[command(flatten)]
        system: SystemFlags,
        #[command(flatten)]
        grid: GridFlags,
    },
    /// Beam-averaged g²(τ) from the refined model.
    G2Refined {
        #[command(flatten)]
        system: SystemFlags,
        #[command(flatten)]
        beam: BeamFlags,
        #[arg(long)]
        tau_max_us: Option<f64>,
        #[arg(long)]
        points: Option<usize>,
    },
    /// Transmission spectrum and its peaks.
    Spectrum {
        #[command(flatten)]
        system: SystemFlags,
        #[arg(long)]
        n_atoms: Option<f64>,
        #[arg(long)]
        span_mhz: Option<f64>,
        #[arg(long)]
        spectrum_points: Option<usize>,
    },
    /// Quantum-trajectory click streams for two detectors.
    Synthesize {
        #[command(flatten)]
        system: SystemFlags,
        #[arg(long)]
        duration_us: Option<f64>,
        #[arg(long)]
        efficiency: Option<f64>,
        #[arg(long)]
        background_rate: Option<f64>,
        #[arg(long)]
        split_ratio: Option<f64>,
        #[arg(long)]
        dead_time_us: Option<f64>,
        #[arg(long)]
        segments: Option<usize>,
        #[arg(long)]
        n_atoms: Option<usize>,
        #[arg(long, value_enum)]
        format: Option<FormatArg>,
    },
    /// Delay histogram of one (auto) or two (cross) click streams.
    Correlate {
        stream1: PathBuf,
        stream2: Option<PathBuf>,
        #[arg(long)]
        bin_width_ns: Option<f64>,
        #[arg(long)]
        tau_max_us: Option<f64>,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[arg(long)]
        symmetry_p_min: Option<f64>,
    },
    /// Inverted-Lorentzian fit of a g² trace.
    Fit {
        trace: PathBuf,
        #[arg(long)]
        window_us: Option<f64>,
    },
    /// Antibunching speed versus vacuum Rabi frequency.
    Sweep {
        #[command(flatten)]
        system: SystemFlags,
        #[command(flatten)]
        beam: BeamFlags,
        /// Comma-separated Ω_VR/2π targets in MHz.
        #[arg(long, value_delimiter = ',')]
        targets_mhz: Option<Vec<f64>>,
        #[arg(long)]
        batches: Option<usize>,
        #[arg(long)]
        window_us: Option<f64>,
    },
    /// Non-Markovianity measure versus collective coupling.
    Blp {
        #[command(flatten)]
        system: SystemFlags,
        /// Comma-separated N_eff values.
        #[arg(long, value_delimiter = ',')]
        n_eff: Option<Vec<f64>>,
        #[arg(long, value_enum)]
        averaging: Option<AveragingArg>,
        #[arg(long)]
        realizations: Option<usize>,
        #[arg(long)]
        t_max_us: Option<f64>,
        #[arg(long)]
        points: Option<usize>,
    },
    /// Fast path against the exact master equation on the standard cases.
    OracleCheck,
}

#[derive(clap::ValueEnum, Clone, Copy, Debug)]
enum FormatArg {
    Binary,
    Csv,
}

#[derive(clap::ValueEnum, Clone, Copy, Debug)]
enum ModeArg {
    Auto,
    Cross,
}

#[derive(clap::ValueEnum, Clone, Copy, Debug)]
enum AveragingArg {
    PositionsOnly,
    Beam,
}

struct Overrides(Vec<Override>);

impl Overrides {
    fn put<T: Into<toml::Value>>(&mut self, section: &str, key: &str, v: Option<T>) {
        if let Some(v) = v {
            self.0.push(Override::new(section, key, v));
        }
    }

    fn put_f64s(&mut self, section: &str, key: &str, v: Option<Vec<f64>>) {
        self.put(section, key, v.map(|v| v.into_iter().map(toml::Value::from).collect::<Vec<_>>()));
    }

    fn put_usize(&mut self, section: &str, key: &str, v: Option<usize>) {
        self.put(section, key, v.map(|v| v as i64));
    }

    fn system(&mut self, f: SystemFlags) {
        self.put("system", "g_mhz", f.g_mhz);
        self.put("system", "kappa_mhz", f.kappa_mhz);
        self.put("system", "gamma_mhz", f.gamma_mhz);
        self.put("system", "eps_over_kappa", f.eps_over_kappa);
        self.put("system", "delta_c_mhz", f.delta_c_mhz);
        self.put("system", "delta_a_mhz", f.delta_a_mhz);
    }

    fn beam(&mut self, f: BeamFlags) {
        self.put("beam", "n_eff", f.n_eff);
        self.put("beam", "omega_vr_mhz", f.omega_vr_mhz);
        self.put("beam", "jitter_kappa", f.jitter_kappa);
        self.put("beam", "zeeman_scale", f.zeeman_scale);
        self.put_usize("beam", "realizations", f.realizations);
        self.put("beam", "contrast", f.contrast);
    }
}

/// Splits the subcommand into its name, its flag overrides and its input
/// files.
fn command_overrides(cmd: Command) -> (&'static str, Vec<Override>, Vec<PathBuf>) {
    let mut o = Overrides(Vec::new());
    let mut inputs = Vec::new();
    let name = match cmd {
        Command::Params { system, n_atoms } => {
            o.system(system);
            o.put("grid", "n_atoms", n_atoms);
            "params"
        }
        Command::G2Closed { system, grid } => {
            o.system(system);
            o.put("grid", "n_atoms", grid.n_atoms);
            o.put("grid", "tau_max_us", grid.tau_max_us);
            o.put_usize("grid", "points", grid.points);
            "g2-closed"
        }
        Command::G2Refined { system, beam, tau_max_us, points } => {
            o.system(system);
            o.beam(beam);
            o.put("grid", "tau_max_us", tau_max_us);
            o.put_usize("grid", "points", points);
            "g2-refined"
        }
        Command::Spectrum { system, n_atoms, span_mhz, spectrum_points } => {
            o.system(system);
            o.put("grid", "n_atoms", n_atoms);
            o.put("grid", "span_mhz", span_mhz);
            o.put_usize("grid", "spectrum_points", spectrum_points);
            "spectrum"
        }
        Command::Synthesize {
            system,
            duration_us,
            efficiency,
            background_rate,
            split_ratio,
            dead_time_us,
            segments,
            n_atoms,
            format,
        } => {
            o.system(system);
            o.put("trajectory", "duration_us", duration_us);
            o.put("trajectory", "efficiency", efficiency);
            o.put("trajectory", "background_rate", background_rate);
            o.put("trajectory", "split_ratio", split_ratio);
            o.put("trajectory", "dead_time_us", dead_time_us);
            o.put_usize("trajectory", "segments", segments);
            o.put_usize("trajectory", "n_atoms", n_atoms);
            o.put(
                "trajectory",
                "format",
                format.map(|f| match f {
                    FormatArg::Binary => "binary",
                    FormatArg::Csv => "csv",
                }),
            );
            "synthesize"
        }
        Command::Correlate { stream1, stream2, bin_width_ns, tau_max_us, mode, symmetry_p_min } => {
            inputs.push(stream1);
            inputs.extend(stream2);
            o.put("correlator", "bin_width_ns", bin_width_ns);
            o.put("correlator", "tau_max_us", tau_max_us);
            o.put("correlator", "symmetry_p_min", symmetry_p_min);
            o.put(
                "correlator",
                "mode",
                mode.map(|m| match m {
                    ModeArg::Auto => "auto",
                    ModeArg::Cross => "cross",
                }),
            );
            "correlate"
        }
        Command::Fit { trace, window_us } => {
            inputs.push(trace);
            o.put("fit", "window_us", window_us);
            "fit"
        }
        Command::Sweep { system, beam, targets_mhz, batches, window_us } => {
            o.system(system);
            o.beam(beam);
            o.put_f64s("sweep", "targets_mhz", targets_mhz);
            o.put_usize("sweep", "batches", batches);
            o.put("fit", "window_us", window_us);
            "sweep"
        }
        Command::Blp { system, n_eff, averaging, realizations, t_max_us, points } => {
            o.system(system);
            o.put_f64s("blp", "n_eff", n_eff);
            o.put(
                "blp",
                "averaging",
                averaging.map(|a| match a {
                    AveragingArg::PositionsOnly => "positions_only",
                    AveragingArg::Beam => "beam",
                }),
            );
            o.put_usize("beam", "realizations", realizations);
            o.put("blp", "t_max_us", t_max_us);
            o.put_usize("blp", "points", points);
            "blp"
        }
        Command::OracleCheck => "oracle-check",
    };
    (name, o.0, inputs)
}

/// Where a command's CSV goes, with the self-describing header.
struct Output {
    header: String,
    path: Option<PathBuf>,
}

impl Output {
    fn new(cfg: &RunConfig, command: &str, inputs: &[PathBuf], path: Option<PathBuf>) -> Self {
        let mut h = String::new();
        h.push_str(&format!("# cqed {}\n", env!("CARGO_PKG_VERSION")));
        h.push_str(&format!("# command: {command}\n"));
        for p in inputs {
            h.push_str(&format!("# input: {}\n", p.display()));
        }
        h.push_str(&format!("# seed: {}\n", cfg.seed));
        h.push_str(&format!("# config_sha256: {}\n", cfg.hash()));
        h.push_str("# config:\n");
        for line in cfg.to_toml().lines() {
            h.push_str(&format!("#   {line}\n"));
        }
        Output { header: h, path }
    }

    /// Writes the header and body to the output path (plus a config sidecar)
    /// or to stdout.
    fn emit(&self, cfg: &RunConfig, body: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
        match &self.path {
            Some(p) => {
                let mut w = BufWriter::new(File::create(p)?);
                w.write_all(self.header.as_bytes())?;
                body(&mut w)?;
                w.flush()?;
                write_sidecar(cfg, p)?;
            }
            None => {
                let mut w = BufWriter::new(io::stdout().lock());
                w.write_all(self.header.as_bytes())?;
                body(&mut w)?;
                w.flush()?;
            }
        }
        Ok(())
    }
}

fn sidecar_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".config.toml");
    PathBuf::from(s)
}

fn write_sidecar(cfg: &RunConfig, out: &Path) -> Result<()> {
    std::fs::write(sidecar_path(out), cfg.to_toml())?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let (name, flags, inputs) = command_overrides(cli.command);
    let mut overrides = env_overrides(std::env::vars());
    for s in &cli.set {
        overrides.push(Override::parse(s)?);
    }
    overrides.extend(flags);
    if let Some(seed) = cli.seed {
        overrides.push(Override::new("", "seed", seed as i64));
    }
    let cfg = RunConfig::resolve(cli.config.as_deref(), &overrides)?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.workers)
        .build_global()
        .map_err(|e| Error::Config(e.to_string()))?;
    let out = Output::new(&cfg, name, &inputs, cli.out.clone());
    match name {
        "params" => cmd_params(&cfg, &out),
        "g2-closed" => cmd_g2_closed(&cfg, &out),
        "g2-refined" => cmd_g2_refined(&cfg, &out),
        "spectrum" => cmd_spectrum(&cfg, &out),
        "synthesize" => cmd_synthesize(&cfg, &out),
        "correlate" => cmd_correlate(&cfg, &out, &inputs),
        "fit" => cmd_fit(&cfg, &out, &inputs[0]),
        "sweep" => cmd_sweep(&cfg, &out),
        "blp" => cmd_blp(&cfg, &out),
        "oracle-check" => cmd_oracle_check(&cfg, &out),
        _ => unreachable!("every subcommand is named"),
    }
}

fn cmd_params(cfg: &RunConfig, out: &Output) -> Result<()> {
    let p = cfg.system.params()?;
    let n = cfg.grid.n_atoms;
    let d = derive(&p, n)?;
    let (gamma_p, kappa_p) = purcell_rates(&p, n);
    let rows: Vec<(&str, f64)> = vec![
        ("n_atoms", n),
        ("c1", d.c1),
        ("cooperativity", d.c),
        ("c1_prime", d.c1_prime),
        ("n_sat", d.n_sat),
        ("delta_alpha_ratio", d.delta_alpha_ratio),
        ("g2_zero", d.g2_zero()),
        ("collective_coupling_mhz", rate_to_mhz(p.collective_coupling(n))),
        ("omega_vr_re_mhz", rate_to_mhz(d.omega_vr.re)),
        ("omega_vr_im_mhz", rate_to_mhz(d.omega_vr.im)),
        ("oscillation_threshold", oscillation_threshold(&p)),
        ("purcell_gamma_mhz", rate_to_mhz(gamma_p)),
        ("purcell_kappa_mhz", rate_to_mhz(kappa_p)),
    ];
    out.emit(cfg, |w| {
        writeln!(w, "quantity,value")?;
        for (k, v) in rows {
            writeln!(w, "{k},{v:e}")?;
        }
        Ok(())
    })
}

fn cmd_g2_closed(cfg: &RunConfig, out: &Output) -> Result<()> {
    let p = cfg.system.params()?;
    let d = derive(&p, cfg.grid.n_atoms)?;
    let tau = uniform_grid(cfg.grid.tau_max_us, cfg.grid.points);
    let trace = g2_closed_form(&p, &d, &tau)?;
    out.emit(cfg, |w| trace.write_csv(w))
}

fn cmd_g2_refined(cfg: &RunConfig, out: &Output) -> Result<()> {
    let p = cfg.system.params()?;
    let ens = Ensemble::new(cfg.geometry, cfg.beam.config(&p, cfg.seed), p)?;
    let tau = uniform_grid(cfg.grid.tau_max_us, cfg.grid.points);
    let trace = ens.averaged_g2(&tau)?.with_contrast(cfg.beam.contrast);
    out.emit(cfg, |w| trace.write_csv(w))
}

fn cmd_spectrum(cfg: &RunConfig, out: &Output) -> Result<()> {
    let p = cfg.system.params()?;
    let medium = Medium::homogeneous(&p, cfg.grid.n_atoms)?;
    let half = mhz_to_rate(cfg.grid.span_mhz) / 2.0;
    let n = cfg.grid.spectrum_points;
    let grid: Vec<f64> = uniform_grid(2.0 * half, n).into_iter().map(|x| x - half).collect();
    let s = transmission_spectrum(&p, medium.classes(), &grid)?;
    let sep = s.separation(&p, medium.classes());
    out.emit(cfg, |w| {
        let peaks: Vec<String> = s.peaks.iter().map(|d| format!("{:e}", rate_to_mhz(*d))).collect();
        writeln!(w, "# peaks_mhz: {}", peaks.join(" "))?;
        match sep {
            Some(x) => writeln!(w, "# separation_mhz: {:e}", rate_to_mhz(x))?,
            None => writeln!(w, "# separation_mhz: none")?,
        }
        writeln!(w, "detuning_mhz,intensity")?;
        for (d, i) in s.detuning.iter().zip(&s.intensity) {
            writeln!(w, "{:e},{:e}", rate_to_mhz(*d), i)?;
        }
        Ok(())
    })
}

fn cmd_synthesize(cfg: &RunConfig, out: &Output) -> Result<()> {
    let prefix = out
        .path
        .clone()
        .ok_or_else(|| Error::Config("synthesize needs --out PREFIX".into()))?;
    let p = cfg.system.params()?;
    let atoms = cfg.trajectory.emitters(&p);
    let tcfg = cfg.trajectory.config(cfg.seed);
    let (d0, d1) = mcwf_synthesize(&p, &atoms, &tcfg)?;
    let ext = match cfg.trajectory.format {
        StreamFormat::Binary => "cqts",
        StreamFormat::Csv => "csv",
    };
    let mut rows = Vec::new();
    for s in [&d0, &d1] {
        let path = with_suffix(&prefix, &format!("_d{}.{ext}", s.detector));
        let mut w = BufWriter::new(File::create(&path)?);
        match cfg.trajectory.format {
            StreamFormat::Binary => s.write_to(&mut w)?,
            StreamFormat::Csv => {
                w.write_all(out.header.as_bytes())?;
                s.write_csv(&mut w)?;
            }
        }
        w.flush()?;
        rows.push((path, s));
    }
    write_sidecar(cfg, &prefix)?;
    let summary = Output {
        header: out.header.clone(),
        path: None,
    };
    summary.emit(cfg, |w| {
        writeln!(w, "detector,path,clicks,rate_per_us")?;
        for (path, s) in &rows {
            writeln!(w, "{},{},{},{:e}", s.detector, path.display(), s.len(), s.rate())?;
        }
        Ok(())
    })
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn load_stream(path: &Path) -> Result<ClickStream> {
    read_stream_any(path)
}

fn cmd_correlate(cfg: &RunConfig, out: &Output, inputs: &[PathBuf]) -> Result<()> {
    let s1 = load_stream(&inputs[0])?;
    let s2 = inputs.get(1).map(|p| load_stream(p)).transpose()?;
    if cfg.correlator.mode == Mode::Cross && s2.is_none() {
        return Err(Error::Config("cross mode needs two streams".into()));
    }
    let s2 = match cfg.correlator.mode {
        Mode::Cross => s2.as_ref(),
        Mode::Auto => None,
    };
    let trace = correlate(&s1, s2, &cfg.correlator)?;
    out.emit(cfg, |w| trace.write_csv(w))
}

fn cmd_fit(cfg: &RunConfig, out: &Output, path: &Path) -> Result<()> {
    let trace = CorrelationTrace::read_csv(BufReader::new(File::open(path)?))?;
    let fit = fit_inverted_lorentzian(&trace, cfg.fit.window_us)?;
    let sd = |i: usize| fit.covariance[i][i].max(0.0).sqrt();
    out.emit(cfg, |w| {
        writeln!(w, "parameter,value,stderr")?;
        writeln!(w, "c,{:e},{:e}", fit.c, sd(0))?;
        writeln!(w, "a0,{:e},{:e}", fit.a0, sd(1))?;
        writeln!(w, "w_us,{:e},{:e}", fit.w, sd(2))?;
        writeln!(w, "speed_per_us,{:e},{:e}", fit.speed(), fit.speed_error())?;
        writeln!(
            w,
            "# points={} iterations={} residual_norm={:e} rms={:e} bunched={}",
            fit.points, fit.iterations, fit.residual_norm, fit.rms, fit.bunched
        )?;
        Ok(())
    })
}

fn cmd_sweep(cfg: &RunConfig, out: &Output) -> Result<()> {
    let p = cfg.system.params()?;
    let beam = cfg.beam.config(&p, cfg.seed);
    let r = speed_sweep(&cfg.sweep.targets_mhz, &cfg.geometry, &beam, &p, &cfg.sweep_options())?;
    out.emit(cfg, |w| r.write_csv(w))
}

fn cmd_blp(cfg: &RunConfig, out: &Output) -> Result<()> {
    let p = cfg.system.params()?;
    let beam = match cfg.blp.averaging {
        Averaging::PositionsOnly => BeamConfig {
            realizations: cfg.beam.realizations,
            seed: cfg.seed,
            cutoff: cfg.beam.cutoff,
            atom_number: cfg.beam.atom_number,
            ..BeamConfig::positions_only(1.0)
        },
        Averaging::Beam => cfg.beam.config(&p, cfg.seed),
    };
    let points = blp_vs_coupling(&cfg.geometry, &beam, &p, &cfg.blp.n_eff, &cfg.blp.options())?;
    out.emit(cfg, |w| write_curve_csv(&points, w))
}

/// Fails with a numerical error when any case exceeds its tolerance.
fn cmd_oracle_check(cfg: &RunConfig, out: &Output) -> Result<()> {
    let cases = check_matrix();
    let mut rows = Vec::with_capacity(cases.len());
    for c in &cases {
        rows.push((c.name, c.max_abs_diff()?, c.tolerance));
    }
    out.emit(cfg, |w| {
        writeln!(w, "case,max_abs_diff,tolerance,pass")?;
        for (name, d, tol) in &rows {
            writeln!(w, "{name},{d:e},{tol:e},{}", d < tol)?;
        }
        Ok(())
    })?;
    match rows.iter().find(|r| !(r.1 < r.2)) {
        Some((name, d, tol)) => Err(Error::SingularParameters(format!(
            "oracle check `{name}` deviates by {d:e} > {tol:e}"
        ))),
        None => Ok(()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_input_error() { 2 } else { 3 })
        }
    }
}
