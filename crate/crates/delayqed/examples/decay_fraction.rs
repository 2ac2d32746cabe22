//! Sweep the mirror delay of a single emitter held on the trapping
//! condition `omega0 t_d = n pi` and compare the computed emitter weight of
//! the bound state against the closed form `1 / sqrt(1 + 2 gamma t_d)`.

use delayqed::spectral::find_bound_states;
use delayqed::{EmitterSpec, SystemSpec};

fn main() {
    let pi = std::f64::consts::PI;
    println!("{:>6}  {:>16}  {:>16}  {:>9}", "t_d", "epsilon", "closed form", "diff");
    for &t_d in &[0.1, 0.5, 1.0, 2.0, 4.0] {
        let system = SystemSpec::new(vec![EmitterSpec {
            omega: pi / t_d,
            gamma: 1.0,
            delay: t_d,
        }]);
        let found = find_bound_states(&system).unwrap();
        assert_eq!(found.states.len(), 1, "one bound state on the condition");
        let eps = found.states[0].v[0].norm();
        let closed = 1.0 / (1.0 + 2.0 * t_d).sqrt();
        println!(
            "{t_d:>6.2}  {eps:>16.12}  {closed:>16.12}  {:>9.2e}",
            (eps - closed).abs()
        );
    }
}
