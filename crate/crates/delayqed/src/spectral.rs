//! Single-excitation spectral theory: scattering states, bound states in
//! the continuum, and the emitter overlap tables that every two-photon
//! quantity downstream consumes.
//!
//! In the folded (bidirectional-line) picture each emitter couples at the
//! two points `x = -t_n` (incoming side) and `x = +t_n` (mirror side), so
//! eigenmodes are plane waves `e^{-i omega x}` with a piecewise-constant
//! envelope that jumps at those points. Scattering states are normalized to
//! a unit incoming envelope on the far left; the transmission through the
//! whole structure is the envelope on the far right and has unit modulus.
//!
//! Overlap conventions: the emitter lowering operator expands on the
//! eigenbasis as `sigma_n = sum_a eps_n^a phi_a + int xi_n(w) psi_w dw`
//! with delta-normalized continuum modes, which fixes
//! `xi_n(w) = conj(beta_n(w)) / sqrt(2 pi)` relative to the unit-envelope
//! `beta` returned by [`solve_scattering_state`] (the `2 pi` converts
//! between the unit-amplitude and delta-normalized plane waves). With that
//! convention the per-emitter completeness sum
//! `sum_a |eps_n^a|^2 + int |xi_n|^2 dw = 1` holds with a plain `dw`.

use crate::model::{CouplingKind, Diagnostic, SystemSpec};
use crate::numerics::{
    self, integrate, interp_cubic, linspace, maximize_1d, solve_linear, CMat,
};
use crate::{Error, Result};
use num_complex::Complex64 as C64;

const I: C64 = C64::new(0.0, 1.0);

fn sqrt_2pi() -> f64 {
    (2.0 * std::f64::consts::PI).sqrt()
}

/// A piecewise plane wave `A(x) = e^{-i omega x} C(x)` with the envelope
/// `C` constant between consecutive breakpoints.
#[derive(Debug, Clone)]
pub struct PiecewiseAmplitude {
    /// Sorted envelope breakpoints: `-t_N .. -t_1, t_1 .. t_N`.
    pub breakpoints: Vec<f64>,
    /// Envelope on each of the `breakpoints.len() + 1` segments, left to
    /// right (index 0 is the segment left of the first breakpoint).
    pub segments: Vec<C64>,
    /// Carrier frequency of the plane-wave factor.
    pub omega: f64,
    /// If set, the amplitude is exactly zero outside the breakpoint span
    /// (bound-state profiles have compact support).
    pub compact: bool,
}

impl PiecewiseAmplitude {
    /// Envelope value at `x` (value on the segment containing `x`).
    pub fn envelope(&self, x: f64) -> C64 {
        if self.compact
            && (x < self.breakpoints[0] || x > *self.breakpoints.last().unwrap())
        {
            return C64::new(0.0, 0.0);
        }
        let idx = self.breakpoints.partition_point(|&b| b <= x);
        self.segments[idx]
    }

    /// Full amplitude `e^{-i omega x} C(x)`.
    pub fn eval(&self, x: f64) -> C64 {
        let env = self.envelope(x);
        if env.norm_sqr() == 0.0 {
            return env;
        }
        C64::from_polar(1.0, -self.omega * x) * env
    }
}

/// `integral_lo^hi a(x) conj(b(x)) dx`, exactly, segment by segment.
pub fn overlap_integral(a: &PiecewiseAmplitude, b: &PiecewiseAmplitude, lo: f64, hi: f64) -> C64 {
    let (mut lo, mut hi) = (lo, hi);
    if a.compact {
        lo = lo.max(a.breakpoints[0]);
        hi = hi.min(*a.breakpoints.last().unwrap());
    }
    if b.compact {
        lo = lo.max(b.breakpoints[0]);
        hi = hi.min(*b.breakpoints.last().unwrap());
    }
    if !(lo < hi) {
        return C64::new(0.0, 0.0);
    }
    let mut cuts = vec![lo];
    for &p in a.breakpoints.iter().chain(b.breakpoints.iter()) {
        if p > lo && p < hi {
            cuts.push(p);
        }
    }
    cuts.push(hi);
    cuts.sort_by(|p, q| p.partial_cmp(q).unwrap());
    cuts.dedup();
    let d = a.omega - b.omega;
    let mut acc = C64::new(0.0, 0.0);
    for w in cuts.windows(2) {
        let (u, v) = (w[0], w[1]);
        let mid = 0.5 * (u + v);
        let c = a.envelope(mid) * b.envelope(mid).conj();
        if c.norm_sqr() == 0.0 {
            continue;
        }
        // integral_u^v e^{-i d x} dx = (v-u) sinc(d (v-u)/2) e^{-i d (u+v)/2}
        let half = 0.5 * d * (v - u);
        let sinc = if half.abs() < 1e-6 {
            1.0 - half * half / 6.0
        } else {
            half.sin() / half
        };
        acc += c * (v - u) * sinc * C64::from_polar(1.0, -d * mid);
    }
    acc
}

/// Build the piecewise envelope generated by emitter amplitudes `amp`:
/// starting from `leftmost` on the far left, the envelope jumps by
/// `+i sqrt(gamma_m) amp_m e^{-i omega t_m}` crossing `x = -t_m` and by
/// `-i sqrt(gamma_m) amp_m e^{+i omega t_m}` crossing `x = +t_m`.
fn build_piecewise(
    system: &SystemSpec,
    omega: f64,
    amp: &[C64],
    leftmost: C64,
    compact: bool,
) -> PiecewiseAmplitude {
    let n = system.n();
    let mut breakpoints = Vec::with_capacity(2 * n);
    for k in (0..n).rev() {
        breakpoints.push(-system.emitters[k].delay);
    }
    for k in 0..n {
        breakpoints.push(system.emitters[k].delay);
    }
    let mut segments = Vec::with_capacity(2 * n + 1);
    segments.push(leftmost);
    let mut cur = leftmost;
    for (j, &b) in breakpoints.iter().enumerate() {
        let m = if j < n { n - 1 - j } else { j - n };
        let sign = if b < 0.0 { 1.0 } else { -1.0 };
        cur += I * sign * system.emitters[m].gamma.sqrt() * amp[m]
            * C64::from_polar(1.0, omega * b);
        segments.push(cur);
    }
    PiecewiseAmplitude { breakpoints, segments, omega, compact }
}

/// Continuum eigenmode at frequency `omega`, normalized to a unit incoming
/// plane-wave envelope.
#[derive(Debug, Clone)]
pub struct ScatteringState {
    pub omega: f64,
    /// Emitter amplitudes `beta_n(omega)`.
    pub beta: Vec<C64>,
    /// Waveguide part `Psi_omega(x)`; leftmost envelope is exactly 1.
    pub segment_coeffs: PiecewiseAmplitude,
    /// Transmission: the envelope on the far right. `|tau| = 1`.
    pub tau: C64,
}

/// Normalizable eigenmode inside the continuum band.
#[derive(Debug, Clone)]
pub struct BoundState {
    pub omega_b: f64,
    /// Emitter amplitudes `v_n`, normalized together with the waveguide
    /// profile: `sum |v_n|^2 + int |Phi(x)|^2 dx = 1`.
    pub v: Vec<C64>,
    /// Waveguide profile `Phi(x)`; identically zero for `|x| > t_N`.
    pub segment_coeffs: PiecewiseAmplitude,
    /// Residual of the normalization identity, recomputed after scaling.
    pub norm_check: f64,
}

impl BoundState {
    /// `Phi(x)` (0 outside the mirror round trip).
    pub fn profile(&self, x: f64) -> C64 {
        self.segment_coeffs.eval(x)
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "omega_b": self.omega_b,
            "v": self.v.iter().map(|z| vec![z.re, z.im]).collect::<Vec<_>>(),
            "norm_check": self.norm_check,
        })
    }
}

/// The emitter-by-emitter coefficient matrix and drive vector of the
/// single-excitation eigenproblem: `M(omega) beta = f(omega)` for scattering
/// states, `M(omega_b) v = 0` for bound states.
///
/// For the feedback family both are closed forms:
///
/// ```text
/// [M]_nn = omega - omega_n + 2 gamma_n sin(omega t_n) e^{-i omega t_n}
/// [M]_mn = 2 sqrt(gamma_m gamma_n) sin(omega t_min) e^{-i omega t_max}
/// f_n    = 2 i sqrt(gamma_n) sin(omega t_n)   (= V_n(omega))
/// ```
///
/// Custom couplings use the generic decomposition of the causal double
/// integral, `(i/2) V_m*(w) V_n(w) + (1/2pi) PV int V_m*(k) V_n(k)/(w-k) dk`
/// (subtracted off the diagonal `omega - omega_n`), with the principal-value
/// integral taken over a window symmetric about `omega` so the slowly
/// decaying tails cancel pairwise. This path is orders of magnitude slower
/// and is meant for exploratory couplings, not grid sweeps.
pub fn build_m(system: &SystemSpec, omega: f64) -> Result<(CMat, Vec<C64>)> {
    let n = system.n();
    match &system.coupling {
        CouplingKind::Feedback => {
            let mut m = CMat::zeros(n);
            let mut f = Vec::with_capacity(n);
            for a in 0..n {
                let ea = &system.emitters[a];
                for b in 0..n {
                    let eb = &system.emitters[b];
                    let val = if a == b {
                        C64::new(omega - ea.omega, 0.0)
                            + 2.0 * ea.gamma * (omega * ea.delay).sin()
                                * C64::from_polar(1.0, -omega * ea.delay)
                    } else {
                        let tmin = ea.delay.min(eb.delay);
                        let tmax = ea.delay.max(eb.delay);
                        2.0 * (ea.gamma * eb.gamma).sqrt() * (omega * tmin).sin()
                            * C64::from_polar(1.0, -omega * tmax)
                    };
                    m.set(a, b, val);
                }
                f.push(C64::new(0.0, 2.0 * ea.gamma.sqrt() * (omega * ea.delay).sin()));
            }
            Ok((m, f))
        }
        CouplingKind::Custom(_) => {
            let w = system.frequency_window();
            // Symmetric principal-value window about omega, wide enough to
            // cover the configured band on both sides.
            let half = (w.max - w.min).max(2.0 * (omega - w.min).abs())
                .max(2.0 * (w.max - omega).abs());
            let mut m = CMat::zeros(n);
            let mut f = Vec::with_capacity(n);
            for a in 0..n {
                f.push(system.coupling_value(a, omega)?);
            }
            for a in 0..n {
                for b in 0..n {
                    let g = |k: f64| -> Result<C64> {
                        Ok(system.coupling_value(a, k)?.conj() * system.coupling_value(b, k)?)
                    };
                    let g0 = g(omega)?;
                    // PV int g(k)/(omega-k) dk over [omega-half, omega+half]
                    // with the singular part subtracted; the log term of the
                    // subtraction vanishes on a symmetric window.
                    let eps = 1e-7 * (1.0 + omega.abs());
                    let reg = |k: f64| {
                        let gk = g(k).unwrap_or(g0);
                        if (omega - k).abs() < eps {
                            // Central-difference limit of the quotient.
                            let gp = g(k + eps).unwrap_or(g0);
                            let gm = g(k - eps).unwrap_or(g0);
                            -(gp - gm) / (2.0 * eps)
                        } else {
                            (gk - g0) / (omega - k)
                        }
                    };
                    let left = integrate(reg, omega - half, omega, 1e-9);
                    let right = integrate(reg, omega, omega + half, 1e-9);
                    let pv = left.value + right.value;
                    let mut val = -I * 0.5 * g0 - pv / (2.0 * std::f64::consts::PI);
                    if a == b {
                        val += C64::new(omega - system.emitters[a].omega, 0.0);
                    }
                    m.set(a, b, val);
                }
            }
            Ok((m, f))
        }
    }
}

/// Solve for the scattering state at `omega`. Fails when `omega` collides
/// with a bound-state frequency (singular coefficient matrix) so that grid
/// drivers can exclude that node and fill it by a two-sided limit.
///
/// Singularity is detected by comparing `|det M|` against the product of
/// physical row scales rather than by the condition number: at a frequency
/// where the whole matrix collapses (every entry ~ machine epsilon, e.g. a
/// 1x1 system exactly on its bound frequency) the condition number stays
/// O(1) even though the solve is meaningless.
pub fn solve_scattering_state(system: &SystemSpec, omega: f64) -> Result<ScatteringState> {
    let (m, f) = build_m(system, omega)?;
    let mut scale = 1.0f64;
    for a in 0..system.n() {
        let ea = &system.emitters[a];
        let mut row = (omega - ea.omega).abs();
        for eb in &system.emitters {
            row += 2.0 * (ea.gamma * eb.gamma).sqrt();
        }
        scale *= row;
    }
    if m.det().norm() <= 1e-12 * scale {
        return Err(Error::Numerical(format!(
            "scattering solve at omega = {omega}: matrix is singular to working precision; \
             frequency collides with a bound state"
        )));
    }
    let (beta, cond) = solve_linear(&m, &f)?;
    if !cond.is_finite() || cond > 1e13 {
        return Err(Error::Numerical(format!(
            "scattering solve at omega = {omega}: matrix is singular to working precision \
             (condition {cond:.2e}); frequency collides with a bound state"
        )));
    }
    let segment_coeffs = build_piecewise(system, omega, &beta, C64::new(1.0, 0.0), false);
    let tau = *segment_coeffs.segments.last().unwrap();
    Ok(ScatteringState { omega, beta, segment_coeffs, tau })
}

/// Result of a bound-state search: accepted states plus diagnostics for
/// determinant roots that failed the normalizability consistency check.
#[derive(Debug, Clone)]
pub struct BoundSearch {
    pub states: Vec<BoundState>,
    pub rejected: Vec<Diagnostic>,
}

/// Normalizability consistency residual `|sum_n v_n V_n(omega)|` for a unit
/// vector `v`; must vanish for a genuine bound state.
fn consistency_residual(system: &SystemSpec, omega: f64, v: &[C64]) -> f64 {
    let mut s = C64::new(0.0, 0.0);
    for (n, &vn) in v.iter().enumerate() {
        s += vn * system.coupling_value(n, omega).expect("index in range");
    }
    s.norm()
}

/// Normalize `v` (any scale) against the full single-excitation norm and
/// build the compact waveguide profile. Returns the finished state.
fn finish_bound_state(system: &SystemSpec, omega_b: f64, v_raw: &[C64]) -> BoundState {
    let span = system.max_delay() + 1.0;
    let profile_raw = build_piecewise(system, omega_b, v_raw, C64::new(0.0, 0.0), true);
    let wave = overlap_integral(&profile_raw, &profile_raw, -span, span).re;
    let emit: f64 = v_raw.iter().map(|z| z.norm_sqr()).sum();
    let scale = 1.0 / (emit + wave).sqrt();
    let v: Vec<C64> = v_raw.iter().map(|&z| z * scale).collect();
    let segment_coeffs = build_piecewise(system, omega_b, &v, C64::new(0.0, 0.0), true);
    let wave2 = overlap_integral(&segment_coeffs, &segment_coeffs, -span, span).re;
    let emit2: f64 = v.iter().map(|z| z.norm_sqr()).sum();
    let norm_check = (emit2 + wave2 - 1.0).abs();
    BoundState { omega_b, v, segment_coeffs, norm_check }
}

/// Find every single-excitation bound state of the system.
///
/// When all emitters share one frequency commensurate with their mirror
/// delays, the coefficient matrix vanishes identically at that frequency and
/// the bound subspace has dimension N; the N states are then constructed
/// directly from the unit-vector basis and orthonormalized under the full
/// (emitter + waveguide) inner product. Otherwise — and additionally, to
/// catch isolated roots away from the degenerate frequency — the real axis
/// is scanned for determinant zeros: local minima of `|det M|` are refined
/// by a bracketed root find on the phase-rotated real part, kept only if the
/// determinant magnitude collapses and the null vector passes the
/// normalizability consistency check. Rejected candidates are reported.
pub fn find_bound_states(system: &SystemSpec) -> Result<BoundSearch> {
    let diags = system.validate();
    if !diags.is_empty() {
        let joined: Vec<String> = diags.iter().map(|d| d.to_string()).collect();
        return Err(Error::Config(joined.join("; ")));
    }
    let n = system.n();
    let gamma_ref = system.gamma_max().max(1e-300);
    let mut states = Vec::new();
    let mut rejected = Vec::new();

    let degenerate = system.degenerate_feedback_regime(1e-9);
    let omega0 = system.emitters[0].omega;
    if degenerate {
        // Gram matrix of the raw unit-vector family under the full norm.
        let span = system.max_delay() + 1.0;
        let kernels: Vec<PiecewiseAmplitude> = (0..n)
            .map(|m| {
                let mut e = vec![C64::new(0.0, 0.0); n];
                e[m] = C64::new(1.0, 0.0);
                build_piecewise(system, omega0, &e, C64::new(0.0, 0.0), true)
            })
            .collect();
        let mut gram = CMat::zeros(n);
        for a in 0..n {
            for b in 0..n {
                let mut g = overlap_integral(&kernels[a], &kernels[b], -span, span);
                if a == b {
                    g += 1.0;
                }
                gram.set(a, b, g);
            }
        }
        let ip = |x: &[C64], y: &[C64]| -> C64 {
            let mut s = C64::new(0.0, 0.0);
            for a in 0..n {
                for b in 0..n {
                    s += x[a] * y[b].conj() * gram.at(a, b);
                }
            }
            s
        };
        // Modified Gram-Schmidt over e_1 .. e_N.
        let mut basis: Vec<Vec<C64>> = Vec::with_capacity(n);
        for alpha in 0..n {
            let mut c = vec![C64::new(0.0, 0.0); n];
            c[alpha] = C64::new(1.0, 0.0);
            for u in &basis {
                let proj = ip(&c, u);
                for k in 0..n {
                    c[k] -= proj * u[k];
                }
            }
            let norm = ip(&c, &c).re.sqrt();
            for k in 0..n {
                c[k] /= norm;
            }
            basis.push(c);
        }
        for v in &basis {
            states.push(finish_bound_state(system, omega0, v));
        }
    }

    // Determinant scan over the configured window.
    let w = system.frequency_window();
    let n_scan = 8001.max(512 * n + 1);
    let grid = linspace(w.min, w.max, n_scan);
    let step = grid[1] - grid[0];
    let dets: Vec<C64> = grid.iter().map(|&om| build_m(system, om).map(|(m, _)| m.det()))
        .collect::<Result<_>>()?;
    for j in 1..n_scan - 1 {
        let (dm, d0, dp) = (dets[j - 1].norm(), dets[j].norm(), dets[j + 1].norm());
        if !(d0 < dm && d0 <= dp) {
            continue;
        }
        // Skip candidates at the directly constructed degenerate frequency.
        if degenerate && (grid[j] - omega0).abs() < 2.0 * step {
            continue;
        }
        // Refine: rotate the determinant so its leading linear behavior is
        // real, then bracket the sign change.
        let slope = (dets[j + 1] - dets[j - 1]) / (2.0 * step);
        if slope.norm() == 0.0 {
            continue;
        }
        let phase = slope.conj() / slope.norm();
        let rot = |om: f64| -> f64 {
            let (m, _) = build_m(system, om).expect("feedback closed form");
            (phase * m.det()).re
        };
        let (ra, rb) = (rot(grid[j - 1]), rot(grid[j + 1]));
        let root = if ra.signum() != rb.signum() {
            numerics::find_root_bracketed(rot, grid[j - 1], grid[j + 1], 1e-12 * gamma_ref)
        } else {
            // Fall back to minimizing |det| directly.
            let (om, _) = maximize_1d(
                |om| {
                    let (m, _) = build_m(system, om).expect("feedback closed form");
                    -m.det().norm()
                },
                grid[j - 1],
                grid[j + 1],
                17,
                1e-12 * gamma_ref,
            );
            Ok(om)
        };
        let Ok(om_c) = root else { continue };
        let (m_c, _) = build_m(system, om_c)?;
        let d_c = m_c.det().norm();
        let local_scale = dm.max(dp).max(1e-300);
        if d_c > 1e-8 * local_scale {
            continue; // ordinary non-zero minimum of an oscillatory determinant
        }
        // Null vector by inverse iteration on the (numerically) singular M.
        let mut v = vec![C64::new(1.0, 0.0); n];
        let nrm = (n as f64).sqrt();
        v.iter_mut().for_each(|z| *z /= nrm);
        let mut ok = false;
        for _ in 0..4 {
            match solve_linear(&m_c, &v) {
                Ok((x, _)) => {
                    let s: f64 = x.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
                    if !s.is_finite() || s == 0.0 {
                        break;
                    }
                    v = x.iter().map(|&z| z / s).collect();
                    let res: f64 =
                        m_c.matvec(&v).iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
                    if res <= 1e-9 * m_c.norm1().max(1.0) {
                        ok = true;
                        break;
                    }
                }
                Err(_) => break,
            }
        }
        if !ok {
            rejected.push(Diagnostic {
                invariant: "determinant root without a resolvable null vector",
                emitter: None,
                detail: format!("omega = {om_c:.12}, |det| = {d_c:.3e}"),
            });
            continue;
        }
        let res = consistency_residual(system, om_c, &v);
        if res > 1e-8 * gamma_ref.sqrt() {
            rejected.push(Diagnostic {
                invariant: "normalizability consistency residual exceeds tolerance",
                emitter: None,
                detail: format!("omega = {om_c:.12}, residual = {res:.3e}"),
            });
            continue;
        }
        if states.iter().any(|s: &BoundState| (s.omega_b - om_c).abs() < 1e-7 * (1.0 + om_c.abs()))
        {
            continue;
        }
        states.push(finish_bound_state(system, om_c, &v));
    }
    states.sort_by(|a, b| a.omega_b.partial_cmp(&b.omega_b).unwrap());
    Ok(BoundSearch { states, rejected })
}

/// Uniform frequency grid specification for overlap tables.
#[derive(Debug, Clone, Copy)]
pub struct FrequencyGrid {
    pub min: f64,
    pub max: f64,
    pub n: usize,
}

impl FrequencyGrid {
    /// Default grid on the system window. Density is a config knob; the
    /// quartic-in-`xi` integrals downstream get a convergence self-test.
    pub fn for_system(system: &SystemSpec, n: usize) -> Self {
        let w = system.frequency_window();
        FrequencyGrid { min: w.min, max: w.max, n: n.max(4001) }
    }

    pub fn points(&self) -> Vec<f64> {
        linspace(self.min, self.max, self.n)
    }

    pub fn step(&self) -> f64 {
        (self.max - self.min) / (self.n - 1) as f64
    }
}

/// Sampled overlap coefficients of the emitter operators on the eigenbasis.
#[derive(Debug, Clone)]
pub struct OverlapTable {
    /// Bound-state frequencies, ascending.
    pub omega_b: Vec<f64>,
    /// `eps[alpha][n]` — bound-state overlaps (conjugates of `v_n`).
    pub eps: Vec<Vec<C64>>,
    /// Uniform frequency grid.
    pub grid: Vec<f64>,
    /// `xi[n][j]` — continuum overlaps on the grid, delta-normalized.
    pub xi: Vec<Vec<C64>>,
    /// Grid nodes that collided with a bound frequency and were filled by a
    /// two-sided polynomial limit.
    pub filled_nodes: Vec<usize>,
    /// Per-emitter estimate of the completeness mass lost outside the
    /// window (the overlaps decay like a Lorentzian envelope).
    pub truncation_estimate: Vec<f64>,
}

impl OverlapTable {
    pub fn n_emitters(&self) -> usize {
        self.xi.len()
    }

    pub fn step(&self) -> f64 {
        self.grid[1] - self.grid[0]
    }

    /// `xi_n(omega)` by cubic interpolation; zero outside the window
    /// (window truncation is part of the table's contract).
    pub fn xi_at(&self, n: usize, omega: f64) -> C64 {
        if omega < self.grid[0] || omega > *self.grid.last().unwrap() {
            return C64::new(0.0, 0.0);
        }
        interp_cubic(self.grid[0], self.step(), &self.xi[n], omega)
    }

    /// Window-limited completeness residual for emitter `n`:
    /// `sum_a |eps_n^a|^2 + int_window |xi_n|^2 domega - 1` by composite
    /// Simpson on the grid. Expect a deficit of order the truncation
    /// estimate on narrow windows.
    pub fn completeness_residual(&self, n: usize) -> f64 {
        let h = self.step();
        let y: Vec<f64> = self.xi[n].iter().map(|z| z.norm_sqr()).collect();
        let m = y.len();
        let mut s;
        if m % 2 == 1 {
            s = y[0] + y[m - 1];
            for (j, &v) in y.iter().enumerate().take(m - 1).skip(1) {
                s += if j % 2 == 1 { 4.0 * v } else { 2.0 * v };
            }
            s *= h / 3.0;
        } else {
            s = 0.5 * (y[0] + y[m - 1]);
            for &v in y.iter().take(m - 1).skip(1) {
                s += v;
            }
            s *= h;
        }
        let bound: f64 = self.eps.iter().map(|row| row[n].norm_sqr()).sum();
        bound + s - 1.0
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "omega_b": self.omega_b,
            "eps": self
                .eps
                .iter()
                .map(|row| row.iter().map(|z| vec![z.re, z.im]).collect::<Vec<_>>())
                .collect::<Vec<_>>(),
            "grid": {
                "min": self.grid[0],
                "max": self.grid.last().unwrap(),
                "n": self.grid.len(),
            },
            "filled_nodes": self.filled_nodes,
            "truncation_estimate": self.truncation_estimate,
        })
    }
}

/// Four-point Lagrange extrapolation (used to fill singular grid nodes by
/// their one-sided limits).
fn lagrange4(xs: &[f64], ys: &[C64], x: f64) -> C64 {
    let mut acc = C64::new(0.0, 0.0);
    for i in 0..4 {
        let mut w = 1.0;
        for j in 0..4 {
            if j != i {
                w *= (x - xs[j]) / (xs[i] - xs[j]);
            }
        }
        acc += ys[i] * w;
    }
    acc
}

/// Build the overlap table: `eps` from the bound states, `xi` by solving
/// the scattering problem at every grid node. Nodes that collide with a
/// bound-state frequency (where the solve is singular but the limit exists)
/// are filled by averaging cubic extrapolations from both sides.
pub fn overlaps(system: &SystemSpec, states: &[BoundState], grid: &FrequencyGrid) -> Result<OverlapTable> {
    let n = system.n();
    let pts = grid.points();
    let gamma_ref = system.gamma_max().max(1e-300);
    let fill_radius = 1e-6 * gamma_ref;
    let mut xi: Vec<Vec<C64>> = vec![vec![C64::new(0.0, 0.0); pts.len()]; n];
    let mut filled = Vec::new();
    let norm = 1.0 / sqrt_2pi();
    for (j, &om) in pts.iter().enumerate() {
        let singular = states.iter().any(|s| (om - s.omega_b).abs() < fill_radius);
        if singular {
            filled.push(j);
            continue;
        }
        match solve_scattering_state(system, om) {
            Ok(st) => {
                for k in 0..n {
                    xi[k][j] = st.beta[k].conj() * norm;
                }
            }
            Err(Error::Numerical(_)) => filled.push(j),
            Err(e) => return Err(e),
        }
    }
    // Fill masked nodes from both sides.
    let filled_set: std::collections::BTreeSet<usize> = filled.iter().copied().collect();
    for &j in &filled {
        let mut left: Vec<usize> = Vec::new();
        let mut k = j;
        while k > 0 && left.len() < 4 {
            k -= 1;
            if !filled_set.contains(&k) {
                left.push(k);
            }
        }
        left.reverse();
        let mut right: Vec<usize> = Vec::new();
        let mut k = j;
        while k + 1 < pts.len() && right.len() < 4 {
            k += 1;
            if !filled_set.contains(&k) {
                right.push(k);
            }
        }
        for e in 0..n {
            let from_left = (left.len() == 4).then(|| {
                let xs: Vec<f64> = left.iter().map(|&i| pts[i]).collect();
                let ys: Vec<C64> = left.iter().map(|&i| xi[e][i]).collect();
                lagrange4(&xs, &ys, pts[j])
            });
            let from_right = (right.len() == 4).then(|| {
                let xs: Vec<f64> = right.iter().map(|&i| pts[i]).collect();
                let ys: Vec<C64> = right.iter().map(|&i| xi[e][i]).collect();
                lagrange4(&xs, &ys, pts[j])
            });
            xi[e][j] = match (from_left, from_right) {
                (Some(a), Some(b)) => 0.5 * (a + b),
                (Some(a), None) => a,
                (None, Some(b)) => b,
                (None, None) => {
                    return Err(Error::Numerical(
                        "overlap grid too sparse to fill singular nodes".into(),
                    ))
                }
            };
        }
    }
    let eps: Vec<Vec<C64>> = states
        .iter()
        .map(|s| s.v.iter().map(|z| z.conj()).collect())
        .collect();
    // Tail-mass estimate: average |xi|^2 (omega - center)^2 over the outer
    // 5% of nodes on each side, extended as a 1/(omega - center)^2 tail.
    let center = system.emitters.iter().map(|e| e.omega).sum::<f64>() / n as f64;
    let band = (pts.len() / 20).max(2);
    let mut trunc = Vec::with_capacity(n);
    for e in 0..n {
        let mut c_lo = 0.0;
        let mut c_hi = 0.0;
        for j in 0..band {
            c_lo += xi[e][j].norm_sqr() * (pts[j] - center).powi(2);
            c_hi += xi[e][pts.len() - 1 - j].norm_sqr()
                * (pts[pts.len() - 1 - j] - center).powi(2);
        }
        c_lo /= band as f64;
        c_hi /= band as f64;
        trunc.push(c_lo / (center - pts[0]).abs() + c_hi / (pts[pts.len() - 1] - center).abs());
    }
    Ok(OverlapTable {
        omega_b: states.iter().map(|s| s.omega_b).collect(),
        eps,
        grid: pts,
        xi,
        filled_nodes: filled,
        truncation_estimate: trunc,
    })
}

/// Per-emitter completeness deficit `1 - sum_a |eps_n^a|^2 - int |xi_n|^2`
/// evaluated by adaptive quadrature on a window of the given half-width
/// (slightly asymmetric so quadrature nodes cannot land exactly on the
/// removable singularities at bound frequencies). Wide windows (hundreds of
/// linewidths) are cheap here because the quadrature adapts to the tails.
pub fn completeness_deficit(
    system: &SystemSpec,
    states: &[BoundState],
    half_width: f64,
) -> Result<Vec<f64>> {
    let n = system.n();
    let center = system.emitters.iter().map(|e| e.omega).sum::<f64>() / n as f64;
    let gamma_ref = system.gamma_max().max(1e-300);
    let lo = center - half_width * 1.0012;
    let hi = center + half_width;
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut out = Vec::with_capacity(n);
    for e in 0..n {
        let density = |om: f64| -> C64 {
            let st = solve_scattering_state(system, om)
                .or_else(|_| solve_scattering_state(system, om + 1e-9 * gamma_ref))
                .expect("off-singular retry");
            C64::new(st.beta[e].norm_sqr() / two_pi, 0.0)
        };
        let q = integrate(density, lo, hi, 1e-9);
        let bound: f64 = states.iter().map(|s| s.v[e].norm_sqr()).sum();
        out.push(1.0 - bound - q.value.re);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::EmitterSpec;
    use std::f64::consts::PI;

    fn single(omega: f64, gamma: f64, delay: f64) -> SystemSpec {
        SystemSpec::new(vec![EmitterSpec { omega, gamma, delay }])
    }

    fn commensurate_single() -> SystemSpec {
        single(PI / 2.0, 1.0, 2.0)
    }

    #[test]
    fn coefficient_matrix_closed_form_values() {
        let s = commensurate_single();
        let (m, _) = build_m(&s, PI / 2.0).unwrap();
        assert!(m.at(0, 0).norm() < 1e-14, "matrix should vanish at the bound frequency");
        let om = PI / 2.0 + 0.5;
        let (m, f) = build_m(&s, om).unwrap();
        let expect = C64::new(0.5, 0.0)
            + 2.0 * (PI + 1.0).sin() * C64::from_polar(1.0, -(PI + 1.0));
        assert!((m.at(0, 0) - expect).norm() < 1e-14);
        assert!((m.at(0, 0) - C64::new(1.4093, -1.4161)).norm() < 1e-3);
        assert!((f[0] - C64::new(0.0, 2.0 * (PI + 1.0).sin())).norm() < 1e-14);
    }

    #[test]
    fn coefficient_matrix_is_symmetric_for_two_emitters() {
        let s = SystemSpec::new(vec![
            EmitterSpec { omega: 1.0, gamma: 0.7, delay: 0.9 },
            EmitterSpec { omega: 1.3, gamma: 1.4, delay: 2.3 },
        ]);
        for &om in &[0.3, 1.1, 2.9] {
            let (m, _) = build_m(&s, om).unwrap();
            assert!((m.at(0, 1) - m.at(1, 0)).norm() < 1e-14);
        }
    }

    #[test]
    fn generic_coupling_path_matches_feedback_closed_form() {
        let mut s = single(2.0, 0.7, 1.3).with_window(2.0 - 300.0, 2.0 + 300.0);
        let (m_fast, f_fast) = build_m(&s, 2.7).unwrap();
        let g = 0.7f64;
        let t = 1.3f64;
        s.coupling = CouplingKind::Custom(std::sync::Arc::new(move |_, w: f64| {
            C64::new(0.0, 2.0 * g.sqrt() * (w * t).sin())
        }));
        let (m_slow, f_slow) = build_m(&s, 2.7).unwrap();
        // The principal-value window is finite, so agreement is limited by
        // the O(gamma / (t * half_width)) truncation of the slow path.
        assert!((m_fast.at(0, 0) - m_slow.at(0, 0)).norm() < 2e-3);
        assert!((f_fast[0] - f_slow[0]).norm() < 1e-12);
    }

    #[test]
    fn unit_amplitude_example_near_resonance() {
        let s = commensurate_single();
        let om = PI / 2.0 + 0.5;
        let st = solve_scattering_state(&s, om).unwrap();
        // Closed form: beta = f / M.
        let (m, f) = build_m(&s, om).unwrap();
        let expect = f[0] / m.at(0, 0);
        assert!((st.beta[0] - expect).norm() < 1e-12);
        assert!((st.beta[0].norm_sqr() - 0.71).abs() < 2e-3);
        assert!((st.segment_coeffs.segments[0] - C64::new(1.0, 0.0)).norm() == 0.0);
    }

    #[test]
    fn transmission_is_unimodular() {
        let one = commensurate_single();
        let two = SystemSpec::new(vec![
            EmitterSpec { omega: PI / 2.0, gamma: 1.0, delay: 2.0 },
            EmitterSpec { omega: PI / 2.0, gamma: 0.6, delay: 4.0 },
        ]);
        for sys in [&one, &two] {
            for &om in linspace(PI / 2.0 - 15.0, PI / 2.0 + 15.0, 401).iter() {
                if (om - PI / 2.0).abs() < 1e-6 {
                    continue;
                }
                let st = solve_scattering_state(sys, om).unwrap();
                assert!(
                    (st.tau.norm() - 1.0).abs() < 1e-10,
                    "|tau| = {} at omega = {om}",
                    st.tau.norm()
                );
            }
        }
    }

    #[test]
    fn far_detuned_amplitude_decays() {
        let s = commensurate_single();
        let st = solve_scattering_state(&s, PI / 2.0 + 500.0).unwrap();
        assert!(st.beta[0].norm() < 0.01);
    }

    #[test]
    fn solve_at_bound_frequency_is_an_error() {
        let s = commensurate_single();
        assert!(solve_scattering_state(&s, PI / 2.0).is_err());
    }

    #[test]
    fn single_emitter_bound_state_closed_form() {
        // omega0 = pi / t_d keeps the commensurability condition as t_d sweeps.
        for td in [0.1, 0.5, 1.0, 2.0, 4.0] {
            let s = single(PI / td, 1.0, td);
            let found = find_bound_states(&s).unwrap();
            assert_eq!(found.states.len(), 1, "t_d = {td}");
            let b = &found.states[0];
            assert!((b.omega_b - PI / td).abs() < 1e-9);
            let eps = 1.0 / (1.0 + 2.0 * td).sqrt();
            assert!(
                (b.v[0].norm() - eps).abs() < 1e-10,
                "t_d = {td}: |v| = {} vs {eps}",
                b.v[0].norm()
            );
            assert!(b.norm_check < 1e-10);
            // Waveguide weight is the complement of the emitter weight.
            let span = td + 1.0;
            let wave = overlap_integral(&b.segment_coeffs, &b.segment_coeffs, -span, span).re;
            assert!((wave - 2.0 * td / (1.0 + 2.0 * td)).abs() < 1e-10);
        }
    }

    #[test]
    fn detuned_single_emitter_has_no_bound_states() {
        let s = single(PI / 2.0 + 0.1, 1.0, 2.0);
        let found = find_bound_states(&s).unwrap();
        assert!(found.states.is_empty(), "found {:?}", found.states.len());
    }

    #[test]
    fn degenerate_pair_yields_two_orthonormal_states() {
        let s = SystemSpec::new(vec![
            EmitterSpec { omega: PI / 2.0, gamma: 1.0, delay: 2.0 },
            EmitterSpec { omega: PI / 2.0, gamma: 1.0, delay: 4.0 },
        ]);
        let found = find_bound_states(&s).unwrap();
        assert_eq!(found.states.len(), 2);
        let span = 5.0;
        for a in &found.states {
            assert!((a.omega_b - PI / 2.0).abs() < 1e-12);
            assert!(a.norm_check < 1e-10);
        }
        for i in 0..2 {
            for j in 0..2 {
                let emit: C64 = (0..2)
                    .map(|k| found.states[i].v[k] * found.states[j].v[k].conj())
                    .sum();
                let wave = overlap_integral(
                    &found.states[i].segment_coeffs,
                    &found.states[j].segment_coeffs,
                    -span,
                    span,
                );
                let want = if i == j { 1.0 } else { 0.0 };
                assert!(
                    (emit + wave - want).norm() < 1e-10,
                    "[{i},{j}] = {:?}",
                    emit + wave
                );
            }
        }
    }

    #[test]
    fn bound_profile_is_compact_and_piecewise_constant() {
        let s = commensurate_single();
        let b = &find_bound_states(&s).unwrap().states[0];
        assert_eq!(b.profile(3.0), C64::new(0.0, 0.0));
        assert_eq!(b.profile(-2.5), C64::new(0.0, 0.0));
        // Envelope magnitude is constant between the kicks and jumps by
        // sqrt(gamma)|v| across them.
        let inside = b.segment_coeffs.envelope(0.3);
        assert!((inside.norm() - b.v[0].norm()).abs() < 1e-12);
        let jump = (b.segment_coeffs.envelope(-1.9) - b.segment_coeffs.envelope(-2.1)).norm();
        assert!((jump - b.v[0].norm()).abs() < 1e-12);
    }

    #[test]
    fn overlap_table_matches_definitions_and_fills_singular_node() {
        let s = commensurate_single();
        let states = find_bound_states(&s).unwrap().states;
        // Window symmetric around omega0 with odd count: the center node
        // lands exactly on the bound frequency and must be filled.
        let grid = FrequencyGrid { min: PI / 2.0 - 10.0, max: PI / 2.0 + 10.0, n: 4001 };
        let table = overlaps(&s, &states, &grid).unwrap();
        assert_eq!(table.filled_nodes, vec![2000]);
        let eps = 1.0 / 5.0f64.sqrt();
        assert!((table.eps[0][0].norm() - eps).abs() < 1e-10);
        // Off the singular node, xi equals the scattering solve exactly.
        let j = 1234;
        let st = solve_scattering_state(&s, table.grid[j]).unwrap();
        let want = st.beta[0].conj() / (2.0 * PI).sqrt();
        assert!((table.xi[0][j] - want).norm() == 0.0);
        // The filled node reproduces the removable limit:
        // |beta(omega0)|^2 = 4 gamma t_d^2/(1+2 gamma t_d)^2 = 0.64.
        let got = table.xi[0][2000].norm_sqr() * 2.0 * PI;
        assert!((got - 0.64).abs() < 1e-6, "filled |beta|^2 = {got}");
        // Interpolation agrees with a fresh solve between nodes.
        let om = table.grid[500] + 0.37 * table.step();
        let st = solve_scattering_state(&s, om).unwrap();
        let want = st.beta[0].conj() / (2.0 * PI).sqrt();
        assert!((table.xi_at(0, om) - want).norm() < 1e-8);
    }

    #[test]
    fn completeness_closes_on_a_wide_window() {
        let s = commensurate_single();
        let states = find_bound_states(&s).unwrap().states;
        let deficits = completeness_deficit(&s, &states, 640.0).unwrap();
        assert!(deficits[0].abs() < 1e-3, "deficit = {}", deficits[0]);
        // The default-window table reports its own truncation honestly.
        let grid = FrequencyGrid::for_system(&s, 4001);
        let table = overlaps(&s, &states, &grid).unwrap();
        let res = table.completeness_residual(0);
        assert!(res < 0.0 && res.abs() < 0.06, "residual = {res}");
        assert!(
            (res.abs() - table.truncation_estimate[0]).abs() < 0.4 * res.abs(),
            "estimate {} vs residual {res}",
            table.truncation_estimate[0]
        );
    }
}
