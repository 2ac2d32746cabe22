//! Profile the two-excitation response and the trapping bound against the
//! total two-photon energy for a single emitter with mirror feedback. The
//! response matrix `T` has a pole at twice the bound-state frequency; the
//! bound profile peaks about one linewidth away from it.

use delayqed::scatter::{TwoPhoton, TwoPhotonParams};
use delayqed::spectral::{find_bound_states, overlaps, FrequencyGrid};
use delayqed::{EmitterSpec, SystemSpec};

fn main() {
    let pi = std::f64::consts::PI;
    let system = SystemSpec::new(vec![EmitterSpec {
        omega: pi / 2.0,
        gamma: 1.0,
        delay: 2.0,
    }]);
    let states = find_bound_states(&system).unwrap().states;
    let grid = FrequencyGrid { min: pi / 2.0 - 40.0, max: pi / 2.0 + 40.0, n: 8001 };
    let table = overlaps(&system, &states, &grid).unwrap();
    let tp = TwoPhoton::new(&table, TwoPhotonParams::for_gamma(1.0)).unwrap();

    let two_wb = 2.0 * states[0].omega_b;
    println!("response pole at 2 omega_b = {two_wb:.6}\n");
    println!("{:>9}  {:>12}  {:>12}  {:>10}", "W - pole", "|T(W)|", "arg T(W)", "P_ub(W)");
    for k in 0..13 {
        let d = -3.0 + 0.5 * k as f64;
        if d.abs() < 0.25 {
            continue; // stay clear of the pole itself
        }
        let omega = two_wb + d;
        let t = tp.t_matrix(omega).unwrap().at(0, 0);
        let p = tp.p_ub_profile(0, omega).unwrap();
        println!("{d:>9.2}  {:>12.5}  {:>12.5}  {p:>10.6}", t.norm(), t.arg());
    }
}
