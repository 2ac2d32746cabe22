//! Print the scattering-state overlap spectrum `|xi_n(omega)|^2` of a
//! degenerate emitter pair as a coarse text profile. The two emitters see
//! different mirror delays, so their spectra interleave peaks of different
//! widths around the shared resonance.

use delayqed::spectral::{find_bound_states, overlaps, FrequencyGrid};
use delayqed::{EmitterSpec, SystemSpec};

fn main() {
    let pi = std::f64::consts::PI;
    let omega0 = 2.0 * pi;
    let system = SystemSpec::new(vec![
        EmitterSpec { omega: omega0, gamma: 1.0, delay: 0.5 },
        EmitterSpec { omega: omega0, gamma: 1.0, delay: 1.0 },
    ]);
    let states = find_bound_states(&system).unwrap().states;
    let grid = FrequencyGrid { min: omega0 - 8.0, max: omega0 + 8.0, n: 161 };
    let table = overlaps(&system, &states, &grid).unwrap();

    let mut peak = 0.0f64;
    for j in 0..grid.n {
        for n in 0..2 {
            peak = peak.max(table.xi[n][j].norm_sqr());
        }
    }
    println!("peak |xi|^2 = {peak:.5}; columns: omega - omega0, emitter 1, emitter 2\n");
    for j in (0..grid.n).step_by(4) {
        let omega = grid.min + (grid.max - grid.min) * j as f64 / (grid.n - 1) as f64;
        let mut line = format!("{:>6.2} ", omega - omega0);
        for n in 0..2 {
            let frac = table.xi[n][j].norm_sqr() / peak;
            let bars = (32.0 * frac).round() as usize;
            line.push_str(&format!(" |{:<32}", "#".repeat(bars)));
        }
        println!("{line}");
    }
    for (n, t) in table.truncation_estimate.iter().enumerate() {
        println!("\nwindow-truncation estimate, emitter {n}: {t:.2e}");
    }
}
