//! Compute the wavepacket-independent upper bound on the trapping
//! probability for a single-emitter feedback system at `gamma t_d = 2`,
//! then evaluate the optimal-packet family at shrinking total-energy
//! uncertainty and watch it climb toward the bound.

use delayqed::scatter::{StructuredWavepacket, TwoPhoton, TwoPhotonParams};
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

    let (p_ub, omega_star) = tp.upper_bound(0, pi - 6.0, pi + 6.0, 481).unwrap();
    println!("P_ub = {p_ub:.6} at total energy {omega_star:.6} (2 omega0 = {:.6})", pi);

    println!("\n{:>8}  {:>10}  {:>10}", "Delta", "P", "P_ub - P");
    let c = tp.optimal_coefficients(0, omega_star).unwrap();
    for &delta in &[0.4, 0.2, 0.1, 0.05] {
        let pkt = StructuredWavepacket { c: c.clone(), delta, omega0: omega_star };
        let p = tp.trapping_structured(&pkt).unwrap().p[0];
        println!("{delta:>8.2}  {p:>10.6}  {:>10.6}", p_ub - p);
    }
}
