//! Scan the transmission across the frequency window for one- and
//! two-emitter feedback systems. A single lossless waveguide forces
//! `|tau(omega)| = 1`; the scan prints the worst deviation found.

use delayqed::spectral::{solve_scattering_state, FrequencyGrid};
use delayqed::{EmitterSpec, SystemSpec};

fn scan(label: &str, system: &SystemSpec) {
    let window = system.frequency_window();
    let grid = FrequencyGrid { min: window.min + 1.3e-4, max: window.max, n: 1001 };
    let mut worst = 0.0f64;
    let mut solved = 0usize;
    for omega in grid.points() {
        // Bound-state frequencies are removable singularities of the solve;
        // step over them rather than interpolating through.
        let st = match solve_scattering_state(system, omega) {
            Ok(st) => st,
            Err(_) => match solve_scattering_state(system, omega + 2e-7) {
                Ok(st) => st,
                Err(_) => continue,
            },
        };
        solved += 1;
        worst = worst.max((st.tau.norm() - 1.0).abs());
    }
    println!("{label}: {solved} frequencies, max | |tau| - 1 | = {worst:.3e}");
}

fn main() {
    let pi = std::f64::consts::PI;
    let single = SystemSpec::new(vec![EmitterSpec {
        omega: pi / 2.0,
        gamma: 1.0,
        delay: 2.0,
    }]);
    scan("single emitter", &single);

    let pair = SystemSpec::new(vec![
        EmitterSpec { omega: 2.0 * pi, gamma: 1.0, delay: 0.5 },
        EmitterSpec { omega: 2.0 * pi, gamma: 1.0, delay: 1.0 },
    ]);
    scan("emitter pair ", &pair);
}
