//! Config-driven command-line driver: one JSON config in, CSV/JSON
//! artifacts out, every run stamped with a manifest.
//!
//! The binary exposes five commands. `spectral` tabulates bound states and
//! the scattering overlap spectrum (plus an `epsilon` sweep over mirror
//! delays), `bound` sweeps the trapping-probability upper bound and the
//! finite-bandwidth curves below it, `design` solves for input coefficients
//! that excite a target bound superposition (optionally cross-checked on the
//! lattice), `fdtd` runs one lattice simulation of a two-photon packet, and
//! `validate` runs the full invariant suite for the configured system.
//!
//! Conventions shared by every command:
//!
//! * all quantities are in the `gamma = 1` unit system of the library (CSV
//!   files carry a units header line, JSON files a `"units"` field);
//! * CSV is comma-separated with one header row and 12 significant digits;
//! * complex numbers serialize as `[re, im]` pairs;
//! * a `manifest.json` embedding the resolved config is written next to the
//!   outputs, so any run can be reproduced from its manifest alone;
//! * sweep points are dispatched to `--threads` workers and merged in config
//!   order, so the thread count never changes any output bit.

use crate::fdtd::{auto_layout, SimConfig, Simulation};
use crate::model::SystemSpec;
use crate::scatter::{StructuredWavepacket, TwoPhoton, TwoPhotonParams};
use crate::spectral::{
    find_bound_states, overlap_integral, overlaps, solve_scattering_state, FrequencyGrid,
};
use crate::{Error, Result};
use clap::{Parser, Subcommand};
use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};

/// Command-line surface of the `delayqed` binary.
#[derive(Debug, Parser)]
#[command(name = "delayqed", version, about = "Emitters with mirror feedback: spectra, two-photon trapping, lattice cross-checks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: CliCommand,
    /// JSON run configuration (see the config schema in the README).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory, created if missing.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Worker threads for sweep points (results merge in config order).
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    /// Seed for the randomized suites; overrides the config's seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum CliCommand {
    /// Bound states, overlap spectrum, optional delay sweep.
    Spectral,
    /// Trapping-bound sweep over mirror delays.
    Bound,
    /// Solve for input coefficients exciting a target bound superposition.
    Design,
    /// One lattice run of a two-photon packet, with extraction.
    Fdtd,
    /// Run the invariant suite against the configured system.
    Validate,
}

impl CliCommand {
    fn name(self) -> &'static str {
        match self {
            CliCommand::Spectral => "spectral",
            CliCommand::Bound => "bound",
            CliCommand::Design => "design",
            CliCommand::Fdtd => "fdtd",
            CliCommand::Validate => "validate",
        }
    }
}

/// Process exit code for an error, per the documented taxonomy: config
/// problems (including I/O and malformed JSON) exit 2, numerical failures 3,
/// invariant breaches 4.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Io(_) | Error::Json(_) => 2,
        Error::Numerical(_) => 3,
        Error::Invariant(_) => 4,
    }
}

// ---- configuration schema -----------------------------------------------

/// One run configuration: the system plus one optional section per command.
/// Unknown keys anywhere are rejected so typos fail loudly instead of
/// silently falling back to defaults.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub system: SystemSpec,
    /// Seed for randomized suites (the `--seed` flag takes precedence).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spectral: Option<SpectralJob>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bound: Option<BoundJob>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub design: Option<DesignJob>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fdtd: Option<FdtdJob>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validate: Option<ValidateJob>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<RunConfig> {
        serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("config does not parse: {e}")))
    }
}

/// Explicit frequency grid `{min, max, n}`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub min: f64,
    pub max: f64,
    pub n: usize,
}

impl From<GridSpec> for FrequencyGrid {
    fn from(g: GridSpec) -> FrequencyGrid {
        FrequencyGrid { min: g.min, max: g.max, n: g.n }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpectralJob {
    /// Rows in `xi_spectrum.csv` over the system window (default 1001).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid_points: Option<usize>,
    /// Explicit spectrum grid; takes precedence over `grid_points`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridSpec>,
    /// Mirror delays for `epsilon_vs_delay.csv` (single-emitter systems
    /// only). Each point keeps the emitter on the trapping condition by
    /// snapping its frequency to the nearest positive multiple of
    /// `pi / delay`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delay_sweep: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundJob {
    /// Mirror delays to sweep (single-emitter systems only).
    pub delays: Vec<f64>,
    /// Packet bandwidths for the finite-bandwidth curves.
    pub deltas: Vec<f64>,
    /// Emitter frequency at each sweep point is
    /// `omega0_pi_multiple * pi / delay` (the trapping condition).
    #[serde(default = "default_pi_multiple")]
    pub omega0_pi_multiple: u32,
    /// Half-width (around twice the emitter frequency) of the total-energy
    /// scan for the bound maximization. The default widens at short delays,
    /// where the maximizer sits many linewidths off the two-photon
    /// resonance: `6 + 2 / (gamma * delay)` linewidths.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scan_half_width: Option<f64>,
    /// Scan nodes before golden-section refinement (default keeps the node
    /// spacing near 0.05 linewidths).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scan_points: Option<usize>,
    /// Overlap-table grid (default: 8001 nodes over +-40 linewidths).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub table: Option<GridSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DesignJob {
    /// Central two-photon energy the design matrix is evaluated at.
    pub omega0: f64,
    /// Packet bandwidth used for the verification runs.
    pub delta: f64,
    /// Target bound-superposition amplitudes, one vector of `[re, im]`
    /// pairs per design; each must have one entry per bound state.
    pub targets: Vec<Vec<[f64; 2]>>,
    /// Cross-check each design on the lattice.
    #[serde(default)]
    pub verify: bool,
    /// Lattice step for verification runs.
    #[serde(default = "default_h")]
    pub h: f64,
    /// Settling time appended to the packet transit.
    #[serde(default = "default_settle")]
    pub settle: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub table: Option<GridSpec>,
}

/// Two-photon input for the lattice commands.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum WavepacketCfg {
    /// Explicit channel coefficients (`[re, im]` pairs, one per emitter).
    Structured { c: Vec<[f64; 2]>, delta: f64, omega0: f64 },
    /// Coefficients from the small-bandwidth optimum of one bound state.
    Optimal {
        #[serde(default)]
        alpha: usize,
        delta: f64,
        omega0: f64,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FdtdJob {
    pub wavepacket: WavepacketCfg,
    /// Lattice step (space and time; delays must be integer multiples).
    pub h: f64,
    /// Packet center; defaults to the automatic layout.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x_center: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_final: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub xi_lo: Option<f64>,
    #[serde(default = "default_settle")]
    pub settle: f64,
    /// Times at which `|F(x1, x2)|^2` heat maps are written.
    #[serde(default)]
    pub snapshot_times: Vec<f64>,
    /// Samples per snapshot axis (the grid is strided down to fit).
    #[serde(default = "default_snapshot_cells")]
    pub snapshot_max_cells: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub norm_stride: Option<usize>,
    /// Repeat the run at `h/2` and report both norm drifts.
    #[serde(default)]
    pub halving_check: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub table: Option<GridSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValidateJob {
    /// Frequencies sampled by the transmission-unitarity check.
    #[serde(default = "default_tau_points")]
    pub tau_points: usize,
    /// Random wavepackets tested against the trapping bound.
    #[serde(default = "default_random_packets")]
    pub random_packets: usize,
    /// Half-width of the widened completeness window.
    #[serde(default = "default_completeness_half_width")]
    pub completeness_half_width: f64,
    /// Run the zero-input lattice smoke test.
    #[serde(default = "default_true")]
    pub fdtd_smoke: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub table: Option<GridSpec>,
}

impl Default for ValidateJob {
    fn default() -> Self {
        ValidateJob {
            tau_points: default_tau_points(),
            random_packets: default_random_packets(),
            completeness_half_width: default_completeness_half_width(),
            fdtd_smoke: true,
            table: None,
        }
    }
}

fn default_pi_multiple() -> u32 {
    1
}
fn default_h() -> f64 {
    0.01
}
fn default_settle() -> f64 {
    35.0
}
fn default_snapshot_cells() -> usize {
    301
}
fn default_tau_points() -> usize {
    1001
}
fn default_random_packets() -> usize {
    50
}
fn default_completeness_half_width() -> f64 {
    640.0
}
fn default_true() -> bool {
    true
}

// ---- small shared helpers ------------------------------------------------

fn cpx(p: [f64; 2]) -> C64 {
    C64::new(p[0], p[1])
}

fn cpx_vec(ps: &[[f64; 2]]) -> Vec<C64> {
    ps.iter().map(|&p| cpx(p)).collect()
}

fn pairs(zs: &[C64]) -> Vec<[f64; 2]> {
    zs.iter().map(|z| [z.re, z.im]).collect()
}

/// 64-bit FNV-1a over a byte string.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Stable identity of a resolved wavepacket: FNV-1a over its exact
/// parameters (coefficients at full precision, bandwidth, central energy).
fn packet_hash(pkt: &StructuredWavepacket) -> String {
    let mut text = String::new();
    for z in &pkt.c {
        text.push_str(&format!("{:.17e},{:.17e};", z.re, z.im));
    }
    text.push_str(&format!("delta={:.17e};omega0={:.17e}", pkt.delta, pkt.omega0));
    format!("fnv1a:{:016x}", fnv1a(text.as_bytes()))
}

/// Tiny deterministic generator for the randomized validation suites
/// (split-mix); the library numerics never consume randomness.
struct SplitMix(u64);

impl SplitMix {
    fn next_u64(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }

    /// Uniform in `[0, 1)`.
    fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }
}

/// Run `f` once per input on `threads` scoped workers and return the
/// results in input order (round-robin assignment; merging is by index, so
/// the thread count cannot change any output).
pub fn dispatch<I, O, F>(inputs: &[I], threads: usize, f: F) -> Vec<Result<O>>
where
    I: Sync,
    O: Send,
    F: Fn(usize, &I) -> Result<O> + Sync,
{
    let n = inputs.len();
    let workers = threads.max(1).min(n.max(1));
    if workers <= 1 {
        return inputs.iter().enumerate().map(|(k, x)| f(k, x)).collect();
    }
    let mut results: Vec<Option<Result<O>>> = (0..n).map(|_| None).collect();
    std::thread::scope(|scope| {
        let f = &f;
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                scope.spawn(move || {
                    let mut part = Vec::new();
                    let mut k = w;
                    while k < n {
                        part.push((k, f(k, &inputs[k])));
                        k += workers;
                    }
                    part
                })
            })
            .collect();
        for handle in handles {
            for (k, r) in handle.join().expect("sweep worker panicked") {
                results[k] = Some(r);
            }
        }
    });
    results.into_iter().map(|o| o.expect("sweep index filled")).collect()
}

/// Collapse per-point results into a vector, surfacing the first failure in
/// config order.
fn collect_ordered<O>(results: Vec<Result<O>>) -> Result<Vec<O>> {
    let mut out = Vec::with_capacity(results.len());
    for r in results {
        out.push(r?);
    }
    Ok(out)
}

fn write_csv(path: &Path, columns: &[String], rows: &[Vec<f64>]) -> Result<()> {
    let mut text = String::from("# units: gamma = 1\n");
    text.push_str(&columns.join(","));
    text.push('\n');
    for row in rows {
        debug_assert_eq!(row.len(), columns.len());
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.11e}")).collect();
        text.push_str(&cells.join(","));
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Default two-photon working grid: +-40 max linewidths around the mean
/// emitter frequency, dense enough for the quartic overlap integrals.
fn default_table_grid(system: &SystemSpec) -> FrequencyGrid {
    let center =
        system.emitters.iter().map(|e| e.omega).sum::<f64>() / system.n().max(1) as f64;
    let span = 40.0 * system.gamma_max();
    FrequencyGrid { min: center - span, max: center + span, n: 8001 }
}

fn table_grid(system: &SystemSpec, choice: &Option<GridSpec>) -> FrequencyGrid {
    choice.map(FrequencyGrid::from).unwrap_or_else(|| default_table_grid(system))
}

/// Scattering overlaps and transmission at one frequency, nudging off the
/// removable singularities at bound-state frequencies. Returns the
/// frequency actually solved at along with the transmission and the
/// per-emitter overlaps.
fn xi_row(system: &SystemSpec, omega: f64) -> Result<(f64, C64, Vec<C64>)> {
    let two_pi = 2.0 * std::f64::consts::PI;
    // Grid nodes can land exactly on a bound-state frequency, where the
    // solve matrix is singular (to quadratic order when bound states are
    // degenerate), so escalate the sidestep until the solve goes through.
    let mut attempt = solve_scattering_state(system, omega);
    let mut used = omega;
    let mut nudge = 2e-7 * system.gamma_max();
    for _ in 0..6 {
        if attempt.is_ok() {
            break;
        }
        used = omega + nudge;
        attempt = solve_scattering_state(system, used);
        nudge *= 8.0;
    }
    let st = attempt?;
    let xi = st.beta.iter().map(|b| b.conj() / two_pi.sqrt()).collect();
    Ok((used, st.tau, xi))
}

// ---- command context ------------------------------------------------------

struct Ctx {
    out: PathBuf,
    threads: usize,
    seed: u64,
    config: RunConfig,
    command: CliCommand,
    outputs: Vec<String>,
}

impl Ctx {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn record(&mut self, name: &str) {
        self.outputs.push(name.to_string());
    }

    fn csv(&mut self, name: &str, columns: &[String], rows: &[Vec<f64>]) -> Result<()> {
        write_csv(&self.path(name), columns, rows)?;
        self.record(name);
        Ok(())
    }

    fn json(&mut self, name: &str, value: &serde_json::Value) -> Result<()> {
        write_json(&self.path(name), value)?;
        self.record(name);
        Ok(())
    }

    /// Write `manifest.json`: resolved config, seed, thread count, the list
    /// of produced files, and the command's headline results.
    fn manifest(&mut self, results: serde_json::Value) -> Result<()> {
        let manifest = serde_json::json!({
            "units": "gamma = 1",
            "command": self.command.name(),
            "crate_version": env!("CARGO_PKG_VERSION"),
            "seed": self.seed,
            "threads": self.threads,
            "outputs": self.outputs,
            "results": results,
            "config": serde_json::to_value(&self.config)?,
        });
        write_json(&self.path("manifest.json"), &manifest)
    }
}

/// Entry point used by the binary: load the config, run the command, write
/// artifacts into `--out`.
pub fn run(cli: Cli) -> Result<()> {
    let config_path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("--config <path> is required".into()))?;
    let text = fs::read_to_string(config_path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", config_path.display())))?;
    let config = RunConfig::from_json(&text)?;
    fs::create_dir_all(&cli.out)?;
    let seed = cli.seed.or(config.seed).unwrap_or(0);
    let mut ctx = Ctx {
        out: cli.out.clone(),
        threads: cli.threads,
        seed,
        config,
        command: cli.command,
        outputs: Vec::new(),
    };
    match cli.command {
        CliCommand::Spectral => cmd_spectral(&mut ctx),
        CliCommand::Bound => cmd_bound(&mut ctx),
        CliCommand::Design => cmd_design(&mut ctx),
        CliCommand::Fdtd => cmd_fdtd(&mut ctx),
        CliCommand::Validate => cmd_validate(&mut ctx),
    }
}

// ---- spectral --------------------------------------------------------------

fn cmd_spectral(ctx: &mut Ctx) -> Result<()> {
    let sys = ctx.config.system.clone().validated()?;
    let job = ctx.config.spectral.clone().unwrap_or_default();
    let search = find_bound_states(&sys)?;

    let states_json: Vec<serde_json::Value> =
        search.states.iter().map(|s| s.to_json()).collect();
    ctx.json(
        "bound_states.json",
        &serde_json::json!({
            "units": "gamma = 1",
            "count": search.states.len(),
            "states": states_json,
            "rejected": serde_json::to_value(&search.rejected)?,
        }),
    )?;

    let grid: FrequencyGrid = match job.grid {
        Some(g) => g.into(),
        None => {
            let w = sys.frequency_window();
            FrequencyGrid { min: w.min, max: w.max, n: job.grid_points.unwrap_or(1001) }
        }
    };
    let omegas = grid.points();
    let rows = collect_ordered(dispatch(&omegas, ctx.threads, |_, &omega| {
        let (used, tau, xi) = xi_row(&sys, omega)?;
        let mut row = Vec::with_capacity(3 + 3 * xi.len());
        row.push(used);
        row.push(tau.re);
        row.push(tau.im);
        for z in &xi {
            row.push(z.norm_sqr());
            row.push(z.re);
            row.push(z.im);
        }
        Ok(row)
    }))?;
    let mut columns: Vec<String> =
        ["omega", "tau_re", "tau_im"].iter().map(|s| s.to_string()).collect();
    for n in 0..sys.n() {
        columns.push(format!("xi{n}_abs2"));
        columns.push(format!("xi{n}_re"));
        columns.push(format!("xi{n}_im"));
    }
    ctx.csv("xi_spectrum.csv", &columns, &rows)?;

    let mut sweep_summary = serde_json::Value::Null;
    if let Some(delays) = &job.delay_sweep {
        if sys.n() != 1 {
            return Err(Error::Config(
                "the delay sweep is defined for single-emitter systems".into(),
            ));
        }
        let base = sys.emitters[0];
        let rows = collect_ordered(dispatch(delays, ctx.threads, |_, &t_d| {
            if !(t_d > 0.0) {
                return Err(Error::Config("sweep delays must be positive".into()));
            }
            let pi = std::f64::consts::PI;
            let k = (base.omega * t_d / pi).round().max(1.0);
            let omega0 = k * pi / t_d;
            let point = SystemSpec::new(vec![crate::model::EmitterSpec {
                omega: omega0,
                gamma: base.gamma,
                delay: t_d,
            }]);
            let found = find_bound_states(&point)?;
            let eps = found.states.first().map(|s| s.v[0].norm()).unwrap_or(0.0);
            Ok(vec![t_d, omega0, eps])
        }))?;
        let columns: Vec<String> =
            ["delay", "omega0", "epsilon"].iter().map(|s| s.to_string()).collect();
        ctx.csv("epsilon_vs_delay.csv", &columns, &rows)?;
        sweep_summary = serde_json::json!({ "points": rows.len() });
    }

    let results = serde_json::json!({
        "bound_states": search.states.len(),
        "spectrum_rows": omegas.len(),
        "delay_sweep": sweep_summary,
    });
    ctx.manifest(results)
}

// ---- bound ------------------------------------------------------------------

fn cmd_bound(ctx: &mut Ctx) -> Result<()> {
    let sys = ctx.config.system.clone().validated()?;
    let job = ctx
        .config
        .bound
        .clone()
        .ok_or_else(|| Error::Config("config has no \"bound\" section".into()))?;
    if sys.n() != 1 {
        return Err(Error::Config("the bound sweep is defined for single-emitter systems".into()));
    }
    if job.delays.is_empty() {
        return Err(Error::Config("bound sweep needs at least one delay".into()));
    }
    let gamma = sys.emitters[0].gamma;
    let pi = std::f64::consts::PI;
    let multiple = job.omega0_pi_multiple.max(1) as f64;

    let rows = collect_ordered(dispatch(&job.delays, ctx.threads, |_, &t_d| {
        if !(t_d > 0.0) {
            return Err(Error::Config("sweep delays must be positive".into()));
        }
        let omega0 = multiple * pi / t_d;
        let point = SystemSpec::new(vec![crate::model::EmitterSpec {
            omega: omega0,
            gamma,
            delay: t_d,
        }]);
        let states = find_bound_states(&point)?.states;
        if states.len() != 1 {
            return Err(Error::Invariant(format!(
                "commensurate single emitter should host exactly one bound state, found {}",
                states.len()
            )));
        }
        let grid = table_grid(&point, &job.table);
        let table = overlaps(&point, &states, &grid)?;
        let tp = TwoPhoton::new(&table, TwoPhotonParams::for_gamma(gamma))?;
        let half = job.scan_half_width.unwrap_or(6.0 + 2.0 / (gamma * t_d));
        let points = job
            .scan_points
            .unwrap_or_else(|| ((2.0 * half / 0.05).round() as usize + 1).max(241));
        let lo = 2.0 * omega0 - half * gamma;
        let hi = 2.0 * omega0 + half * gamma;
        let (p_ub, omega_star) = tp.upper_bound(0, lo, hi, points)?;
        let mut row = vec![gamma * t_d, p_ub, omega_star];
        for &delta in &job.deltas {
            let c = tp.optimal_coefficients(0, omega_star)?;
            let pkt = StructuredWavepacket { c, delta, omega0: omega_star };
            row.push(tp.trapping_structured(&pkt)?.p[0]);
        }
        Ok(row)
    }))?;

    let mut columns: Vec<String> =
        ["gamma_td", "p_ub", "omega_star"].iter().map(|s| s.to_string()).collect();
    for &delta in &job.deltas {
        columns.push(format!("p_delta_{delta}"));
    }
    ctx.csv("trap_bound.csv", &columns, &rows)?;
    let results = serde_json::json!({
        "points": rows.len(),
        "deltas": job.deltas,
    });
    ctx.manifest(results)
}

// ---- design -----------------------------------------------------------------

fn cmd_design(ctx: &mut Ctx) -> Result<()> {
    let sys = ctx.config.system.clone().validated()?;
    let job = ctx
        .config
        .design
        .clone()
        .ok_or_else(|| Error::Config("config has no \"design\" section".into()))?;
    let states = find_bound_states(&sys)?.states;
    if states.is_empty() {
        return Err(Error::Config("the system hosts no bound states to design for".into()));
    }
    let grid = table_grid(&sys, &job.table);
    let table = overlaps(&sys, &states, &grid)?;
    let tp = TwoPhoton::new(&table, TwoPhotonParams::for_gamma(sys.gamma_max()))?;

    let mut targets = Vec::new();
    for t in &job.targets {
        if t.len() != states.len() {
            return Err(Error::Config(format!(
                "target has {} amplitudes for {} bound states",
                t.len(),
                states.len()
            )));
        }
        targets.push(cpx_vec(t));
    }
    if targets.is_empty() {
        return Err(Error::Config("design needs at least one target".into()));
    }

    let designs = collect_ordered(dispatch(&targets, ctx.threads, |_, target| {
        tp.design_input(job.omega0, target)
    }))?;

    let mut design_rows = Vec::new();
    for (target, d) in targets.iter().zip(designs.iter()) {
        design_rows.push(serde_json::json!({
            "target": pairs(target),
            "c_in": pairs(&d.c),
            "c_out": pairs(&d.c_out),
            "condition": d.condition,
            "fidelity_predicted": fidelity(target, &d.c_out),
        }));
    }
    ctx.json(
        "design.json",
        &serde_json::json!({
            "units": "gamma = 1",
            "omega0": job.omega0,
            "delta": job.delta,
            "designs": design_rows,
        }),
    )?;

    let mut verify_rows = Vec::new();
    if job.verify {
        // Lattice runs stay serial: each one owns a multi-hundred-megabyte
        // history, so concurrency here would trade determinism of the memory
        // peak for nothing (the per-run time loop is inherently serial).
        for (target, d) in targets.iter().zip(designs.iter()) {
            let pkt =
                StructuredWavepacket { c: d.c.clone(), delta: job.delta, omega0: job.omega0 };
            let (cfg, x_center) = auto_layout(&sys, pkt.delta, job.h, job.settle)?;
            let mut sim = Simulation::new(&sys, cfg)?;
            sim.init_structured(&table, &pkt, x_center)?;
            let report = sim.run()?;
            let ext = sim.extract_trapping(&states)?;
            let theory = tp.trapping_structured(&pkt)?;
            verify_rows.push(serde_json::json!({
                "target": pairs(target),
                "wavepacket_hash": packet_hash(&pkt),
                "p_lattice": ext.p,
                "p_theory": theory.p,
                "amplitudes": pairs(&ext.amplitudes),
                "fidelity": fidelity(target, &ext.amplitudes),
                "norm_drift": report.norm_drift,
                "window_mass": ext.window_mass,
                "residual": ext.residual,
                "near_field_mass": ext.near_field_mass,
            }));
        }
        ctx.json(
            "fdtd_check.json",
            &serde_json::json!({
                "units": "gamma = 1",
                "h": job.h,
                "targets": verify_rows,
            }),
        )?;
    }

    let results = serde_json::json!({
        "designs": design_rows.len(),
        "verified": job.verify,
        "fdtd_fidelities": verify_rows
            .iter()
            .map(|r| r["fidelity"].clone())
            .collect::<Vec<_>>(),
    });
    ctx.manifest(results)
}

/// `|<a, b>|^2 / (|a|^2 |b|^2)` — phase-free overlap of two amplitude
/// vectors.
fn fidelity(a: &[C64], b: &[C64]) -> f64 {
    let na: f64 = a.iter().map(|z| z.norm_sqr()).sum();
    let nb: f64 = b.iter().map(|z| z.norm_sqr()).sum();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let inner: C64 = a.iter().zip(b.iter()).map(|(x, y)| x.conj() * y).sum();
    inner.norm_sqr() / (na * nb)
}

// ---- fdtd -------------------------------------------------------------------

fn cmd_fdtd(ctx: &mut Ctx) -> Result<()> {
    let sys = ctx.config.system.clone().validated()?;
    let job = ctx
        .config
        .fdtd
        .clone()
        .ok_or_else(|| Error::Config("config has no \"fdtd\" section".into()))?;
    let states = find_bound_states(&sys)?.states;
    let grid = table_grid(&sys, &job.table);
    let table = overlaps(&sys, &states, &grid)?;
    let tp = TwoPhoton::new(&table, TwoPhotonParams::for_gamma(sys.gamma_max()))?;

    let pkt = match &job.wavepacket {
        WavepacketCfg::Structured { c, delta, omega0 } => {
            if c.len() != sys.n() {
                return Err(Error::Config(format!(
                    "wavepacket has {} coefficients for {} emitters",
                    c.len(),
                    sys.n()
                )));
            }
            StructuredWavepacket { c: cpx_vec(c), delta: *delta, omega0: *omega0 }
        }
        WavepacketCfg::Optimal { alpha, delta, omega0 } => {
            if *alpha >= states.len() {
                return Err(Error::Config(format!(
                    "optimal wavepacket asks for bound state {alpha}, system has {}",
                    states.len()
                )));
            }
            StructuredWavepacket {
                c: tp.optimal_coefficients(*alpha, *omega0)?,
                delta: *delta,
                omega0: *omega0,
            }
        }
    };

    let (auto_cfg, auto_center) = auto_layout(&sys, pkt.delta, job.h, job.settle)?;
    let cfg = SimConfig {
        h: job.h,
        xi_lo: job.xi_lo.unwrap_or(auto_cfg.xi_lo),
        t_final: job.t_final.unwrap_or(auto_cfg.t_final),
        norm_stride: job.norm_stride.unwrap_or(auto_cfg.norm_stride),
    };
    let x_center = job.x_center.unwrap_or(auto_center);

    let mut sim = Simulation::new(&sys, cfg)?;
    sim.init_structured(&table, &pkt, x_center)?;
    let report = sim.run()?;
    let theory = tp.trapping_structured(&pkt)?;
    let ext = if states.is_empty() { None } else { Some(sim.extract_trapping(&states)?) };

    let drift_columns: Vec<String> = ["time", "norm"].iter().map(|s| s.to_string()).collect();
    let drift_rows: Vec<Vec<f64>> =
        report.norm_series.iter().map(|&(t, v)| vec![t, v]).collect();
    ctx.csv("norm_drift.csv", &drift_columns, &drift_rows)?;

    let snap_columns: Vec<String> = ["x1", "x2", "psi2"].iter().map(|s| s.to_string()).collect();
    for (idx, &t_req) in job.snapshot_times.iter().enumerate() {
        let k = ((t_req / job.h).round().max(0.0) as usize).min(sim.n_steps());
        let (axis, grid_rows) = sim.density_grid(k, job.snapshot_max_cells);
        let mut rows = Vec::with_capacity(axis.len() * axis.len());
        for (i, &x1) in axis.iter().enumerate() {
            for (j, &x2) in axis.iter().enumerate() {
                rows.push(vec![x1, x2, grid_rows[i][j]]);
            }
        }
        let name = format!("psi2_snapshot_{idx}.csv");
        ctx.csv(&name, &snap_columns, &rows)?;
    }

    let mut halving = serde_json::Value::Null;
    if job.halving_check {
        let cfg2 = SimConfig {
            h: 0.5 * job.h,
            xi_lo: cfg.xi_lo,
            t_final: cfg.t_final,
            norm_stride: cfg.norm_stride * 2,
        };
        let mut sim2 = Simulation::new(&sys, cfg2)?;
        sim2.init_structured(&table, &pkt, x_center)?;
        let report2 = sim2.run()?;
        halving = serde_json::json!({
            "h": job.h,
            "norm_drift": report.norm_drift,
            "h_half": 0.5 * job.h,
            "norm_drift_half": report2.norm_drift,
            "ratio": report.norm_drift / report2.norm_drift.max(1e-300),
        });
    }

    let probabilities = serde_json::json!({
        "units": "gamma = 1",
        "wavepacket_hash": packet_hash(&pkt),
        "p_lattice": ext.as_ref().map(|e| e.p.clone()).unwrap_or_default(),
        "p_theory": theory.p,
        "amplitudes": ext.as_ref().map(|e| pairs(&e.amplitudes)).unwrap_or_default(),
        "window_mass": ext.as_ref().map(|e| e.window_mass).unwrap_or(0.0),
        "residual": ext.as_ref().map(|e| e.residual).unwrap_or(0.0),
        "near_field_mass": ext.as_ref().map(|e| e.near_field_mass).unwrap_or(0.0),
        "norm_drift": report.norm_drift,
        "init_norm_raw": sim.init_norm_raw,
        "halving": halving,
    });
    ctx.json("probabilities.json", &probabilities)?;

    let results = serde_json::json!({
        "lattice": {
            "h": cfg.h,
            "xi_lo": cfg.xi_lo,
            "t_final": cfg.t_final,
            "cells": sim.n_cells(),
            "steps": sim.n_steps(),
            "x_center": x_center,
        },
        "wavepacket_hash": packet_hash(&pkt),
        "p_lattice": ext.as_ref().map(|e| e.p.clone()).unwrap_or_default(),
        "p_theory": theory.p,
        "norm_drift": report.norm_drift,
        "residual": ext.as_ref().map(|e| e.residual).unwrap_or(0.0),
    });
    ctx.manifest(results)
}

// ---- validate ---------------------------------------------------------------

struct Check {
    name: &'static str,
    pass: bool,
    value: f64,
    tolerance: f64,
    detail: String,
}

impl Check {
    fn bounded(name: &'static str, value: f64, tolerance: f64, detail: String) -> Check {
        Check { name, pass: value.abs() <= tolerance, value, tolerance, detail }
    }
}

/// Lattice step that puts every mirror delay on the lattice, if one exists
/// near the requested resolution.
fn commensurate_step(system: &SystemSpec, target: f64) -> Option<f64> {
    let shortest = system.emitters.iter().map(|e| e.delay).fold(f64::INFINITY, f64::min);
    for k in (shortest / target).round().max(1.0) as u64..=(64.0 * shortest / target) as u64 {
        let h = shortest / k as f64;
        let ok = system.emitters.iter().all(|e| {
            let steps = e.delay / h;
            (steps - steps.round()).abs() < 1e-9
        });
        if ok {
            return Some(h);
        }
    }
    None
}

fn cmd_validate(ctx: &mut Ctx) -> Result<()> {
    let sys = ctx.config.system.clone().validated()?;
    let job = ctx.config.validate.clone().unwrap_or_default();
    let mut checks: Vec<Check> = Vec::new();

    let search = find_bound_states(&sys)?;
    let states = search.states;
    let nb = states.len();

    // Bound-state normalization residuals.
    let worst_norm = states.iter().map(|s| s.norm_check).fold(0.0f64, f64::max);
    checks.push(Check::bounded(
        "bound_norm_residual",
        worst_norm,
        1e-6,
        format!("{nb} bound states"),
    ));

    // Bound-bound orthonormality under the full inner product.
    let span = sys.max_delay() + 1.0;
    let mut worst_ortho = 0.0f64;
    for a in 0..nb {
        for b in 0..nb {
            let emit: C64 = states[a]
                .v
                .iter()
                .zip(states[b].v.iter())
                .map(|(x, y)| x.conj() * y)
                .sum();
            let wave =
                overlap_integral(&states[b].segment_coeffs, &states[a].segment_coeffs, -span, span);
            let inner = emit + wave;
            let expect = if a == b { 1.0 } else { 0.0 };
            worst_ortho = worst_ortho.max((inner - expect).norm());
        }
    }
    checks.push(Check::bounded(
        "bound_orthonormality",
        worst_ortho,
        1e-6,
        format!("{}x{} Gram matrix", nb, nb),
    ));

    // Bound-scattering orthogonality at sampled frequencies.
    let window = sys.frequency_window();
    let mut worst_cross = 0.0f64;
    if nb > 0 {
        for k in 0..11 {
            let omega = window.min + (k as f64 + 0.37) / 11.0 * (window.max - window.min);
            let st = match solve_scattering_state(&sys, omega) {
                Ok(st) => st,
                Err(_) => continue,
            };
            for state in &states {
                let emit: C64 = state
                    .v
                    .iter()
                    .zip(st.beta.iter())
                    .map(|(v, b)| v.conj() * b)
                    .sum();
                let wave =
                    overlap_integral(&st.segment_coeffs, &state.segment_coeffs, -span, span);
                worst_cross = worst_cross.max((emit + wave).norm());
            }
        }
    }
    checks.push(Check::bounded(
        "bound_scattering_orthogonality",
        worst_cross,
        1e-6,
        "11 sampled frequencies".to_string(),
    ));

    // Transmission unitarity across the window.
    let omegas: Vec<f64> = FrequencyGrid {
        min: window.min + 1.3e-4,
        max: window.max,
        n: job.tau_points.max(11),
    }
    .points();
    let tau_devs = collect_ordered(dispatch(&omegas, ctx.threads, |_, &omega| {
        let nudge = 2e-7 * sys.gamma_max();
        let st = solve_scattering_state(&sys, omega)
            .or_else(|_| solve_scattering_state(&sys, omega + nudge))?;
        Ok((st.tau.norm() - 1.0).abs())
    }))?;
    let worst_tau = tau_devs.into_iter().fold(0.0f64, f64::max);
    checks.push(Check::bounded(
        "tau_unimodular",
        worst_tau,
        1e-10,
        format!("{} frequencies", omegas.len()),
    ));

    // Completeness on a widened window.
    let deficits =
        crate::spectral::completeness_deficit(&sys, &states, job.completeness_half_width)?;
    let worst_deficit = deficits.iter().fold(0.0f64, |m, &d| m.max(d.abs()));
    checks.push(Check::bounded(
        "completeness",
        worst_deficit,
        1e-3,
        format!("half-width {}", job.completeness_half_width),
    ));

    // Two-photon response: positive-semidefinite overlap matrix and the
    // trapping bound.
    let grid = table_grid(&sys, &job.table);
    let table = overlaps(&sys, &states, &grid)?;
    let tp = TwoPhoton::new(&table, TwoPhotonParams::for_gamma(sys.gamma_max()))?;
    let center = 2.0 * sys.emitters.iter().map(|e| e.omega).sum::<f64>() / sys.n() as f64;
    let gamma = sys.gamma_max();

    let mut worst_neg = 0.0f64;
    let mut rng = SplitMix(ctx.seed ^ 0x5eed_0001);
    for k in 0..7 {
        let omega = center + gamma * (-5.0 + 10.0 * k as f64 / 6.0);
        let x = tp.x_matrix(omega);
        let mut scale = 0.0f64;
        for n in 0..sys.n() {
            scale = scale.max(x.at(n, n).re.abs());
        }
        for _ in 0..12 {
            let z: Vec<C64> = (0..sys.n())
                .map(|_| C64::new(rng.uniform() - 0.5, rng.uniform() - 0.5))
                .collect();
            let mut q = C64::new(0.0, 0.0);
            for n in 0..sys.n() {
                for m in 0..sys.n() {
                    q += z[n].conj() * x.at(n, m) * z[m];
                }
            }
            let zn: f64 = z.iter().map(|v| v.norm_sqr()).sum();
            let normalized = q.re / (zn * scale.max(1e-300));
            if normalized < -worst_neg {
                worst_neg = -normalized;
            }
        }
    }
    checks.push(Check::bounded(
        "x_positive_semidefinite",
        worst_neg,
        1e-10,
        "7 energies x 12 random quadratic forms".to_string(),
    ));

    // Random normalized wavepackets never beat the bound.
    let mut worst_excess = 0.0f64;
    if nb > 0 {
        let mut p_ub = Vec::with_capacity(nb);
        for alpha in 0..nb {
            let (p, _) =
                tp.upper_bound(alpha, center - 8.0 * gamma, center + 8.0 * gamma, 641)?;
            p_ub.push(p);
        }
        let mut rng = SplitMix(ctx.seed ^ 0x5eed_0002);
        for _ in 0..job.random_packets {
            let c: Vec<C64> = (0..sys.n())
                .map(|_| C64::new(rng.uniform() - 0.5, rng.uniform() - 0.5))
                .collect();
            let delta = gamma * (0.1 + 0.5 * rng.uniform());
            let omega0 = center + gamma * (-1.0 + 4.0 * rng.uniform());
            let pkt = StructuredWavepacket { c, delta, omega0 };
            let p = tp.trapping_structured(&pkt)?.p;
            for alpha in 0..nb {
                worst_excess = worst_excess.max(p[alpha] - p_ub[alpha]);
            }
        }
    }
    checks.push(Check {
        name: "p_within_bound",
        pass: worst_excess <= 1e-6,
        value: worst_excess,
        tolerance: 1e-6,
        detail: format!("{} random packets", job.random_packets),
    });

    // Zero-input lattice smoke run: nothing in, nothing out, exactly.
    if job.fdtd_smoke {
        match commensurate_step(&sys, 0.05) {
            Some(h) => {
                let t_n = sys.max_delay();
                let cfg = SimConfig {
                    h,
                    xi_lo: -(5.0 + t_n + 2.0 * t_n + 1.0),
                    t_final: 5.0,
                    norm_stride: 10,
                };
                let mut sim = Simulation::new(&sys, cfg)?;
                let report = sim.run()?;
                let p_sum = if nb > 0 {
                    sim.extract_trapping(&states)?.p.iter().sum::<f64>()
                } else {
                    0.0
                };
                checks.push(Check::bounded(
                    "fdtd_smoke_zero_input",
                    report.norm_drift + p_sum,
                    0.0,
                    format!("h = {h}"),
                ));
            }
            None => checks.push(Check {
                name: "fdtd_smoke_zero_input",
                pass: true,
                value: 0.0,
                tolerance: 0.0,
                detail: "skipped: delays share no lattice step near 0.05".to_string(),
            }),
        }
    }

    let passed = checks.iter().all(|c| c.pass);
    let checks_json: Vec<serde_json::Value> = checks
        .iter()
        .map(|c| {
            serde_json::json!({
                "name": c.name,
                "pass": c.pass,
                "value": c.value,
                "tolerance": c.tolerance,
                "detail": c.detail,
            })
        })
        .collect();
    ctx.json(
        "validation.json",
        &serde_json::json!({
            "units": "gamma = 1",
            "passed": passed,
            "checks": checks_json,
        }),
    )?;
    ctx.manifest(serde_json::json!({
        "passed": passed,
        "checks": checks.len(),
    }))?;
    if !passed {
        let failed: Vec<&str> =
            checks.iter().filter(|c| !c.pass).map(|c| c.name).collect();
        return Err(Error::Invariant(format!(
            "validation failed: {}",
            failed.join(", ")
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "system": {"emitters": [{"omega": 1.5707963267948966, "gamma": 1.0, "delay": 2.0}]}
    }"#;

    #[test]
    fn minimal_config_parses() {
        let cfg = RunConfig::from_json(MINIMAL).unwrap();
        assert_eq!(cfg.system.n(), 1);
        assert!(cfg.spectral.is_none());
        assert_eq!(cfg.seed, None);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = r#"{"system": {"emitters": []}, "spektral": {}}"#;
        assert!(matches!(RunConfig::from_json(text), Err(Error::Config(_))));
    }

    #[test]
    fn wavepacket_kinds_parse() {
        let text = r#"{
            "system": {"emitters": [{"omega": 6.283185307179586, "gamma": 1.0, "delay": 0.5}]},
            "fdtd": {
                "wavepacket": {"kind": "optimal", "delta": 0.15, "omega0": 15.0},
                "h": 0.01
            }
        }"#;
        let cfg = RunConfig::from_json(text).unwrap();
        match cfg.fdtd.unwrap().wavepacket {
            WavepacketCfg::Optimal { alpha, delta, omega0 } => {
                assert_eq!(alpha, 0);
                assert_eq!(delta, 0.15);
                assert_eq!(omega0, 15.0);
            }
            _ => panic!("expected the optimal kind"),
        }
    }

    #[test]
    fn dispatch_is_order_stable() {
        let inputs: Vec<u64> = (0..37).collect();
        let worker = |_, &x: &u64| -> Result<u64> { Ok(x * x) };
        let single = collect_ordered(dispatch(&inputs, 1, worker)).unwrap();
        let pooled = collect_ordered(dispatch(&inputs, 5, worker)).unwrap();
        assert_eq!(single, pooled);
    }

    #[test]
    fn dispatch_surfaces_the_first_error_in_order() {
        let inputs: Vec<u64> = (0..20).collect();
        let worker = |_, &x: &u64| -> Result<u64> {
            if x >= 7 {
                Err(Error::Numerical(format!("point {x}")))
            } else {
                Ok(x)
            }
        };
        let err = collect_ordered(dispatch(&inputs, 4, worker)).unwrap_err();
        assert!(matches!(&err, Error::Numerical(msg) if msg == "point 7"));
    }

    #[test]
    fn fnv_matches_the_reference_vectors() {
        assert_eq!(fnv1a(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn csv_has_units_header_and_12_digits() {
        let dir = std::env::temp_dir().join("delayqed_csv_test");
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("t.csv");
        let cols: Vec<String> = ["a", "b"].iter().map(|s| s.to_string()).collect();
        write_csv(&path, &cols, &[vec![1.0 / 3.0, 2.0]]).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "# units: gamma = 1");
        assert_eq!(lines.next().unwrap(), "a,b");
        let row = lines.next().unwrap();
        assert!(row.starts_with("3.33333333333e-1"), "row was {row}");
    }

    #[test]
    fn exit_codes_follow_the_taxonomy() {
        assert_eq!(exit_code(&Error::Config("x".into())), 2);
        assert_eq!(exit_code(&Error::Numerical("x".into())), 3);
        assert_eq!(exit_code(&Error::Invariant("x".into())), 4);
    }

    #[test]
    fn packet_hash_is_stable_and_parameter_sensitive() {
        let a = StructuredWavepacket {
            c: vec![C64::new(1.0, 0.0)],
            delta: 0.1,
            omega0: 4.09,
        };
        let mut b = a.clone();
        assert_eq!(packet_hash(&a), packet_hash(&b));
        b.delta = 0.2;
        assert_ne!(packet_hash(&a), packet_hash(&b));
    }

    #[test]
    fn commensurate_step_handles_rational_delay_pairs() {
        let sys = SystemSpec::new(vec![
            crate::model::EmitterSpec { omega: 6.28, gamma: 1.0, delay: 0.5 },
            crate::model::EmitterSpec { omega: 6.28, gamma: 1.0, delay: 1.0 },
        ]);
        let h = commensurate_step(&sys, 0.05).unwrap();
        for e in &sys.emitters {
            let steps = e.delay / h;
            assert!((steps - steps.round()).abs() < 1e-9);
        }
    }
}
