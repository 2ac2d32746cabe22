//! Shared support for the acceptance suite: helpers that drive the
//! command-line binary and parse its artifacts, plus an independent
//! eta-damped evaluation of the two-excitation response used to check the
//! production split (analytic rational part + Filon transform + tail).

use delayqed::numerics::CMat;
use delayqed::scatter::TwoPhoton;
use num_complex::Complex64 as C64;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

/// Path of the compiled CLI binary under test.
pub fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_delayqed")
}

/// Fresh scratch directory for one criterion's artifacts.
pub fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join("delayqed-acceptance").join(name);
    if dir.exists() {
        std::fs::remove_dir_all(&dir).unwrap();
    }
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

pub fn write_config(dir: &Path, value: &serde_json::Value) -> PathBuf {
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(value).unwrap()).unwrap();
    path
}

/// Run the binary to completion, panicking with its stderr on failure.
/// Returns the wall time of the invocation.
pub fn run_ok(args: &[&str]) -> Duration {
    let start = Instant::now();
    let out = Command::new(bin()).args(args).output().expect("binary launches");
    let elapsed = start.elapsed();
    assert!(
        out.status.success(),
        "command {:?} failed with {:?}\nstderr: {}",
        args,
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    elapsed
}

pub fn read_json(path: &Path) -> serde_json::Value {
    let text = std::fs::read_to_string(path)
        .unwrap_or_else(|e| panic!("cannot read {}: {e}", path.display()));
    serde_json::from_str(&text).unwrap()
}

/// Parse one of the produced CSV files: comment lines start with `#`, the
/// first remaining line is the header, every later line is numeric.
pub fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<f64>>) {
    let text = std::fs::read_to_string(path)
        .unwrap_or_else(|e| panic!("cannot read {}: {e}", path.display()));
    let mut lines = text.lines().filter(|l| !l.starts_with('#') && !l.is_empty());
    let header: Vec<String> =
        lines.next().expect("header row").split(',').map(|s| s.to_string()).collect();
    let rows = lines
        .map(|l| l.split(',').map(|c| c.parse::<f64>().expect("numeric cell")).collect())
        .collect();
    (header, rows)
}

/// Column index by name, panicking with the available names on a miss.
pub fn col(header: &[String], name: &str) -> usize {
    header
        .iter()
        .position(|h| h == name)
        .unwrap_or_else(|| panic!("no column {name} in {header:?}"))
}

/// The single-emitter reference system: `gamma = 1`, `t_d = 2`,
/// `omega0 = pi / 2` (on the trapping condition).
pub fn single_emitter_system() -> serde_json::Value {
    serde_json::json!({
        "emitters": [
            {"omega": std::f64::consts::FRAC_PI_2, "gamma": 1.0, "delay": 2.0}
        ]
    })
}

/// The degenerate-pair reference system: both emitters at `2 pi`, mirror
/// delays 0.5 and 1.0.
pub fn emitter_pair_system() -> serde_json::Value {
    let omega0 = 2.0 * std::f64::consts::PI;
    serde_json::json!({
        "emitters": [
            {"omega": omega0, "gamma": 1.0, "delay": 0.5},
            {"omega": omega0, "gamma": 1.0, "delay": 1.0}
        ]
    })
}

// ---- eta-damped response oracle -------------------------------------------

/// Independent evaluation of the two-excitation response
/// `T_mn(W + i0+) = int_0^inf G_mn(t)^2 e^{iWt} dt`.
///
/// Instead of splitting the square into a rational part and a transformed
/// remainder, damp the full integrand with `e^{-eta t}`, integrate it by
/// composite Simpson on the Green-table time grid (plus the analytic
/// bound-pair tail beyond the grid end), and extrapolate `eta -> 0` through
/// Neville's scheme on `eta_k = 0.1 / 2^k`. The only shared input is the
/// sampled continuum Green function itself.
///
/// The ladder must start below the narrowest single-excitation resonance
/// width (about `0.12 gamma` for the long-delay reference emitter): the
/// damped integral equals the response at complex energy `W + i eta`, and
/// polynomial extrapolation only converges once every rung sits inside the
/// analyticity scale set by that resonance.
pub fn eta_damped_response(tp: &TwoPhoton, omega: f64) -> CMat {
    let etas = [0.1, 0.05, 0.025, 0.0125, 0.00625];
    let nn = tp.green.nn;
    let mut per_eta: Vec<CMat> = etas.iter().map(|&eta| damped_once(tp, omega, eta)).collect();
    // Neville extrapolation to eta = 0, entry by entry.
    let k = etas.len();
    for level in 1..k {
        for row in 0..(k - level) {
            let x0 = etas[row];
            let x1 = etas[row + level];
            let mut next = CMat::zeros(nn);
            for m in 0..nn {
                for n in 0..nn {
                    let lo = per_eta[row].at(m, n);
                    let hi = per_eta[row + 1].at(m, n);
                    // value at eta = 0 of the line through (x0, lo), (x1, hi)
                    next.set(m, n, (hi * x0 - lo * x1) / (x0 - x1));
                }
            }
            per_eta[row] = next;
        }
    }
    per_eta[0].clone()
}

fn damped_once(tp: &TwoPhoton, omega: f64, eta: f64) -> CMat {
    let green = &tp.green;
    let nn = green.nn;
    let nb = green.omega_b.len();
    let dt = green.dt;
    let mut t = CMat::zeros(nn);
    for m in 0..nn {
        for n in 0..nn {
            let gc = &green.gc[m * nn + n].values;
            // Composite Simpson needs an even interval count.
            let steps = (gc.len() - 1) & !1usize;
            let z = C64::new(-eta, omega);
            let phase_step = (z * dt).exp();
            let mut phase = C64::new(1.0, 0.0);
            let mut acc = C64::new(0.0, 0.0);
            for j in 0..=steps {
                let g = green.g_bound(m, n, j as f64 * dt) + gc[j];
                let w = if j == 0 || j == steps {
                    1.0
                } else if j % 2 == 1 {
                    4.0
                } else {
                    2.0
                };
                acc += w * g * g * phase;
                phase *= phase_step;
            }
            acc *= dt / 3.0;
            // Analytic tail of the pure bound-pair part past the grid end;
            // the continuum factors have decayed to numerical dust there.
            let t_end = steps as f64 * dt;
            for a in 0..nb {
                for b in 0..nb {
                    let eab = green.eps[a][m]
                        * green.eps[a][n].conj()
                        * green.eps[b][m]
                        * green.eps[b][n].conj();
                    let zab = C64::new(-eta, omega - green.omega_b[a] - green.omega_b[b]);
                    acc -= eab * (zab * t_end).exp() / zab;
                }
            }
            t.set(m, n, acc);
        }
    }
    t
}
