//! Design incident two-photon wavepackets that excite chosen superpositions
//! of the two bound states of a degenerate emitter pair: each basis state,
//! then the equal superposition. Prints the design coefficients, the
//! predicted trapped amplitudes, and the condition number of the design
//! matrix.

use delayqed::scatter::{TwoPhoton, TwoPhotonParams};
use delayqed::spectral::{find_bound_states, overlaps, FrequencyGrid};
use delayqed::{EmitterSpec, SystemSpec};
use num_complex::Complex64 as C64;

fn main() {
    let pi = std::f64::consts::PI;
    let omega0 = 2.0 * pi;
    let system = SystemSpec::new(vec![
        EmitterSpec { omega: omega0, gamma: 1.0, delay: 0.5 },
        EmitterSpec { omega: omega0, gamma: 1.0, delay: 1.0 },
    ]);
    let states = find_bound_states(&system).unwrap().states;
    assert_eq!(states.len(), 2);
    let grid = FrequencyGrid { min: omega0 - 40.0, max: omega0 + 40.0, n: 8001 };
    let table = overlaps(&system, &states, &grid).unwrap();
    let tp = TwoPhoton::new(&table, TwoPhotonParams::for_gamma(1.0)).unwrap();

    // Total two-photon energy a little above the pair resonance.
    let big_omega = 2.0 * omega0 + 2.4;
    let r = 1.0 / 2.0f64.sqrt();
    let targets: [(&str, Vec<C64>); 3] = [
        ("first bound state ", vec![C64::new(1.0, 0.0), C64::new(0.0, 0.0)]),
        ("second bound state", vec![C64::new(0.0, 0.0), C64::new(1.0, 0.0)]),
        ("equal superposition", vec![C64::new(r, 0.0), C64::new(r, 0.0)]),
    ];
    for (label, target) in &targets {
        let d = tp.design_input(big_omega, target).unwrap();
        println!("{label}: condition = {:.3}", d.condition);
        for (n, c) in d.c.iter().enumerate() {
            println!("  c_in[{n}]  = {:+.4}{:+.4}i", c.re, c.im);
        }
        for (a, c) in d.c_out.iter().enumerate() {
            println!("  c_out[{a}] = {:+.4}{:+.4}i", c.re, c.im);
        }
    }
}
