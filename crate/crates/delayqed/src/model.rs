//! System description: two-level emitters coupled to a semi-infinite
//! waveguide terminated by a mirror.
//!
//! Units: the waveguide group velocity is 1, so delays are lengths and
//! frequencies are inverse times; decay rates are quoted in the same units
//! (the examples use the first emitter's `gamma` as the reference scale).
//! Emitter `n` sits at distance `t_n` from the mirror, so an emitted photon
//! returns after the round trip `2 t_n`. Folding the mirror turns this into
//! a bidirectional line with an effective frequency-dependent coupling
//!
//! ```text
//! V_n(omega) = 2 i sqrt(gamma_n) sin(omega t_n)
//! ```
//!
//! which vanishes at `omega t_n = k pi` — the commensurate points where a
//! single-photon bound state forms in front of the mirror.

use crate::{Error, Result};
use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::sync::Arc;

/// One emitter: transition frequency, bare decay rate into the line, and
/// mirror distance (in time units; the feedback round trip is `2 * delay`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmitterSpec {
    pub omega: f64,
    pub gamma: f64,
    pub delay: f64,
}

/// Frequency window used for every continuum integral in the crate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrequencyWindow {
    pub min: f64,
    pub max: f64,
}

/// How the emitters couple to the waveguide continuum.
#[derive(Clone, Default)]
pub enum CouplingKind {
    /// Mirror feedback: `V_n(omega) = 2 i sqrt(gamma_n) sin(omega t_n)`.
    /// All closed-form fast paths assume this family.
    #[default]
    Feedback,
    /// Caller-supplied coupling functions `(emitter index, omega) -> V`.
    /// Accepted through the same interface but served by generic slow paths
    /// only; constructed programmatically (not representable in config files).
    Custom(Arc<dyn Fn(usize, f64) -> C64 + Send + Sync>),
}

impl fmt::Debug for CouplingKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CouplingKind::Feedback => write!(f, "Feedback"),
            CouplingKind::Custom(_) => write!(f, "Custom(..)"),
        }
    }
}

/// A full system: ordered emitters (delays strictly increasing), the
/// coupling family, and an optional explicit frequency window.
///
/// The serialized form is `{"emitters":[{"omega":…,"gamma":…,"delay":…}],
/// "window":{"min":…,"max":…}}` with `window` optional; the coupling kind is
/// not part of the wire format (config files always describe the feedback
/// family).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SystemSpec {
    pub emitters: Vec<EmitterSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window: Option<FrequencyWindow>,
    #[serde(skip, default)]
    pub coupling: CouplingKind,
}

/// A named invariant violation, pointing at the offending emitter when the
/// invariant is per-emitter. Emitter indices are zero-based.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Diagnostic {
    pub invariant: &'static str,
    pub emitter: Option<usize>,
    pub detail: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.emitter {
            Some(n) => write!(f, "{} @ emitter {}: {}", self.invariant, n, self.detail),
            None => write!(f, "{}: {}", self.invariant, self.detail),
        }
    }
}

impl SystemSpec {
    pub fn new(emitters: Vec<EmitterSpec>) -> Self {
        SystemSpec { emitters, window: None, coupling: CouplingKind::Feedback }
    }

    pub fn with_window(mut self, min: f64, max: f64) -> Self {
        self.window = Some(FrequencyWindow { min, max });
        self
    }

    pub fn n(&self) -> usize {
        self.emitters.len()
    }

    pub fn gamma_max(&self) -> f64 {
        self.emitters.iter().map(|e| e.gamma).fold(0.0, f64::max)
    }

    /// Largest mirror delay; the emitter cloud lives inside `|x| <= t_N` in
    /// the folded (bidirectional) picture.
    pub fn max_delay(&self) -> f64 {
        self.emitters.iter().map(|e| e.delay).fold(0.0, f64::max)
    }

    /// Explicit window, or the default `[min omega_n - 20 gamma_max,
    /// max omega_n + 20 gamma_max]`. Twenty linewidths bound the truncation
    /// of the Lorentzian-like tails of the scattering overlaps; the window is
    /// a config knob and downstream code reports its truncation error.
    pub fn frequency_window(&self) -> FrequencyWindow {
        if let Some(w) = self.window {
            return w;
        }
        let lo = self.emitters.iter().map(|e| e.omega).fold(f64::INFINITY, f64::min);
        let hi = self.emitters.iter().map(|e| e.omega).fold(f64::NEG_INFINITY, f64::max);
        let pad = 20.0 * self.gamma_max();
        FrequencyWindow { min: lo - pad, max: hi + pad }
    }

    /// Check every structural invariant; an empty list means the system is
    /// well formed. Violations are reported, not thrown, so a config checker
    /// can show all of them at once.
    pub fn validate(&self) -> Vec<Diagnostic> {
        let mut out = Vec::new();
        if self.emitters.is_empty() {
            out.push(Diagnostic {
                invariant: "at least one emitter",
                emitter: None,
                detail: "emitter list is empty".into(),
            });
        }
        for (i, e) in self.emitters.iter().enumerate() {
            if !e.omega.is_finite() {
                out.push(Diagnostic {
                    invariant: "finite frequency",
                    emitter: Some(i),
                    detail: format!("omega = {}", e.omega),
                });
            }
            if !(e.gamma >= 0.0) || !e.gamma.is_finite() {
                out.push(Diagnostic {
                    invariant: "negative decay rate",
                    emitter: Some(i),
                    detail: format!("gamma = {}", e.gamma),
                });
            }
            if !(e.delay > 0.0) || !e.delay.is_finite() {
                out.push(Diagnostic {
                    invariant: "delay must be positive",
                    emitter: Some(i),
                    detail: format!("delay = {}", e.delay),
                });
            }
        }
        for i in 1..self.emitters.len() {
            if self.emitters[i].delay <= self.emitters[i - 1].delay {
                out.push(Diagnostic {
                    invariant: "delays not strictly increasing",
                    emitter: Some(i),
                    detail: format!(
                        "delay {} <= previous delay {}",
                        self.emitters[i].delay,
                        self.emitters[i - 1].delay
                    ),
                });
            }
        }
        if let Some(w) = self.window {
            if !(w.min < w.max) {
                out.push(Diagnostic {
                    invariant: "window must be a nonempty interval",
                    emitter: None,
                    detail: format!("[{}, {}]", w.min, w.max),
                });
            }
            for (i, e) in self.emitters.iter().enumerate() {
                if e.omega < w.min || e.omega > w.max {
                    out.push(Diagnostic {
                        invariant: "window must contain every emitter frequency",
                        emitter: Some(i),
                        detail: format!("omega = {} outside [{}, {}]", e.omega, w.min, w.max),
                    });
                }
            }
        }
        out
    }

    /// `validate`, promoted to an error for entry points that must refuse
    /// malformed systems outright.
    pub fn validated(self) -> Result<Self> {
        let diags = self.validate();
        if diags.is_empty() {
            Ok(self)
        } else {
            let joined: Vec<String> = diags.iter().map(|d| d.to_string()).collect();
            Err(Error::Config(joined.join("; ")))
        }
    }

    /// Per-emitter commensurability with the mirror: true iff
    /// `omega_k t_k` is within `tol * pi` of a multiple of pi. An all-true
    /// result with equal frequencies certifies the regime with N degenerate
    /// single-photon bound states.
    pub fn bound_state_condition(&self, tol: f64) -> Vec<bool> {
        self.emitters
            .iter()
            .map(|e| distance_to_multiple_of_pi(e.omega * e.delay) <= tol * std::f64::consts::PI)
            .collect()
    }

    /// True when all emitters share one frequency and all satisfy the
    /// commensurability condition: the regime where the bound subspace has
    /// dimension N and can be written down in closed form.
    pub fn degenerate_feedback_regime(&self, tol: f64) -> bool {
        if self.emitters.is_empty() || !matches!(self.coupling, CouplingKind::Feedback) {
            return false;
        }
        let w0 = self.emitters[0].omega;
        self.emitters.iter().all(|e| (e.omega - w0).abs() <= tol * (1.0 + w0.abs()))
            && self.bound_state_condition(tol).iter().all(|&b| b)
    }

    /// Coupling amplitude `V_n(omega)` (zero-based emitter index).
    pub fn coupling_value(&self, n: usize, omega: f64) -> Result<C64> {
        let e = self
            .emitters
            .get(n)
            .ok_or_else(|| Error::Config(format!("emitter index {n} out of range")))?;
        Ok(match &self.coupling {
            CouplingKind::Feedback => C64::new(0.0, 2.0 * e.gamma.sqrt() * (omega * e.delay).sin()),
            CouplingKind::Custom(f) => f(n, omega),
        })
    }
}

/// Distance from `x` to the nearest integer multiple of pi.
pub fn distance_to_multiple_of_pi(x: f64) -> f64 {
    let r = x.rem_euclid(std::f64::consts::PI);
    r.min(std::f64::consts::PI - r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn single(omega: f64, gamma: f64, delay: f64) -> SystemSpec {
        SystemSpec::new(vec![EmitterSpec { omega, gamma, delay }])
    }

    #[test]
    fn valid_single_emitter_passes() {
        assert!(single(PI / 2.0, 1.0, 2.0).validate().is_empty());
    }

    #[test]
    fn negative_decay_rate_is_flagged() {
        let d = single(PI / 2.0, -1.0, 2.0).validate();
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].invariant, "negative decay rate");
        assert_eq!(d[0].emitter, Some(0));
    }

    #[test]
    fn equal_delays_are_flagged() {
        let sys = SystemSpec::new(vec![
            EmitterSpec { omega: 1.0, gamma: 1.0, delay: 2.0 },
            EmitterSpec { omega: 1.0, gamma: 1.0, delay: 2.0 },
        ]);
        let d = sys.validate();
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].invariant, "delays not strictly increasing");
    }

    #[test]
    fn commensurability_examples() {
        assert_eq!(single(PI / 2.0, 1.0, 2.0).bound_state_condition(1e-12), vec![true]);
        assert_eq!(single(PI / 2.0 + 0.1, 1.0, 2.0).bound_state_condition(1e-12), vec![false]);
        let two = SystemSpec::new(vec![
            EmitterSpec { omega: PI / 2.0, gamma: 1.0, delay: 2.0 },
            EmitterSpec { omega: PI / 2.0, gamma: 1.0, delay: 4.0 },
        ]);
        assert_eq!(two.bound_state_condition(1e-12), vec![true, true]);
        assert!(two.degenerate_feedback_regime(1e-12));
    }

    #[test]
    fn coupling_closed_form_values() {
        let s = single(0.0, 1.0, 2.0);
        let v = s.coupling_value(0, PI / 4.0).unwrap();
        assert!((v - C64::new(0.0, 2.0)).norm() < 1e-14);
        assert!(s.coupling_value(0, 0.0).unwrap().norm() == 0.0);
        let s2 = single(0.0, 0.25, 1.0);
        let v2 = s2.coupling_value(0, PI / 2.0).unwrap();
        assert!((v2 - C64::new(0.0, 1.0)).norm() < 1e-14);
        assert!(s.coupling_value(1, 0.0).is_err());
    }

    #[test]
    fn coupling_vanishes_at_commensurate_frequency() {
        let s = single(PI / 2.0, 1.0, 2.0);
        assert!(s.bound_state_condition(1e-12)[0]);
        assert!(s.coupling_value(0, PI / 2.0).unwrap().norm() < 1e-12);
    }

    #[test]
    fn coupling_parity_and_antisymmetry() {
        // For the feedback family V is odd in omega and purely imaginary, so
        // V(-omega) = conj(V(omega)) = -V(omega) on any grid.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let s = single(
                rng.gen_range(0.5..8.0),
                rng.gen_range(0.01..3.0),
                rng.gen_range(0.1..5.0),
            );
            for _ in 0..25 {
                let w = rng.gen_range(-30.0..30.0);
                let vp = s.coupling_value(0, w).unwrap();
                let vm = s.coupling_value(0, -w).unwrap();
                assert!((vm - vp.conj()).norm() < 1e-12);
                assert!((vm + vp).norm() < 1e-12);
                assert!(vp.re.abs() < 1e-15);
            }
        }
    }

    #[test]
    fn config_json_round_trip() {
        let text = r#"{"emitters":[{"omega":1.5707963267948966,"gamma":1.0,"delay":2.0}],
                       "window":{"min":-18.0,"max":21.0}}"#;
        let s: SystemSpec = serde_json::from_str(text).unwrap();
        assert_eq!(s.n(), 1);
        assert_eq!(s.frequency_window(), FrequencyWindow { min: -18.0, max: 21.0 });
        let back = serde_json::to_string(&s).unwrap();
        let s2: SystemSpec = serde_json::from_str(&back).unwrap();
        assert_eq!(s2.emitters, s.emitters);
        // Window is optional and defaults to 20 linewidths around the band.
        let s3: SystemSpec =
            serde_json::from_str(r#"{"emitters":[{"omega":2.0,"gamma":0.5,"delay":1.0}]}"#)
                .unwrap();
        let w = s3.frequency_window();
        assert!((w.min - (2.0 - 10.0)).abs() < 1e-12);
        assert!((w.max - (2.0 + 10.0)).abs() < 1e-12);
    }

    #[test]
    fn custom_coupling_is_callable() {
        let mut s = single(1.0, 1.0, 1.0);
        s.coupling = CouplingKind::Custom(Arc::new(|_, w| C64::new(0.0, w)));
        assert!((s.coupling_value(0, 3.0).unwrap() - C64::new(0.0, 3.0)).norm() == 0.0);
        assert!(!s.degenerate_feedback_regime(1e-12));
    }
}
