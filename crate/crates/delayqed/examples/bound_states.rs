//! Find the single-excitation bound states of two feedback systems: a pair
//! of degenerate emitters (which hosts two bound states) and a detuned
//! single emitter (which hosts none — every candidate fails the
//! normalizability check).

use delayqed::spectral::find_bound_states;
use delayqed::{EmitterSpec, SystemSpec};

fn main() {
    let pi = std::f64::consts::PI;

    // Two emitters at the same frequency, mirror delays 0.5 and 1.0.
    let degenerate = SystemSpec::new(vec![
        EmitterSpec { omega: 2.0 * pi, gamma: 1.0, delay: 0.5 },
        EmitterSpec { omega: 2.0 * pi, gamma: 1.0, delay: 1.0 },
    ]);
    let found = find_bound_states(&degenerate).unwrap();
    println!("degenerate pair: {} bound states", found.states.len());
    for (a, st) in found.states.iter().enumerate() {
        print!("  state {a}: omega_b = {:.6}, v = [", st.omega_b);
        for (n, v) in st.v.iter().enumerate() {
            let sep = if n == 0 { "" } else { ", " };
            print!("{sep}{:.6}{:+.6}i", v.re, v.im);
        }
        println!("], norm residual = {:.2e}", st.norm_check);
    }

    // A single emitter pulled off the trapping condition omega0 t_d = n pi.
    let detuned = SystemSpec::new(vec![EmitterSpec {
        omega: 1.9,
        gamma: 1.0,
        delay: 2.0,
    }]);
    let found = find_bound_states(&detuned).unwrap();
    println!("\ndetuned emitter: {} bound states", found.states.len());
    for rej in &found.rejected {
        println!("  rejected candidate: {}", rej.detail);
    }
}
