//! Two-photon scattering off the emitter nonlinearity: emitter Green
//! functions, the two-excitation response matrix, bound-state trapping
//! amplitudes and probabilities, the Cauchy-Schwarz upper bound on trapping,
//! and design of incident wavepackets that excite chosen bound-state
//! superpositions.
//!
//! Everything here is driven by an [`OverlapTable`]: the emitter commutator
//! Green function splits into an analytic bound part and a continuum part
//!
//! ```text
//! G_mn(t) = sum_a eps_m^a conj(eps_n^a) e^{-i w_a t}
//!         + int xi_m(w) conj(xi_n(w)) e^{-i w t} dw,
//! ```
//!
//! and the two-excitation response at total energy `W` (upper half-plane
//! boundary value) is the entrywise half-line Fourier transform
//!
//! ```text
//! T_mn(W + i0+) = int_0^inf G_mn(t)^2 e^{i W t} dt,
//! ```
//!
//! evaluated as an exact rational expression for the bound-bound square plus
//! a Filon quadrature of the sampled remainder and an exponential-tail
//! correction. Trapping of bound state `a` from a two-photon wavepacket
//! `psi(nu1, nu2)` is governed by the amplitude
//!
//! ```text
//! Gamma_a(w; nu1, nu2) = -4 pi sum_mn conj(eps_m^a) conj(xi_m(w))
//!                        [T^{-1}(w + w_a + i0+)]_mn xi_n(nu1) xi_n(nu2)
//! ```
//!
//! with trapping probability `P_a = 1/2 int dW |int Gamma_a psi dnu|^2` and
//! the wavepacket-independent bound
//! `P_a <= max_W 1/2 int |Gamma_a(W - w_a; nu, W - nu)|^2 dnu`.

use crate::numerics::{
    filon_linear, gauss_hermite, maximize_1d, spectrum_to_time, CMat, TimeSeries,
};
use crate::spectral::OverlapTable;
use crate::{Error, Result};
use num_complex::Complex64 as C64;

const I: C64 = C64::new(0.0, 1.0);
const FOUR_PI: f64 = 4.0 * std::f64::consts::PI;

/// Grid and guard knobs for the two-photon machinery. All quantities scale
/// with the reference decay rate, so [`TwoPhotonParams::for_gamma`] is the
/// usual constructor.
#[derive(Debug, Clone, Copy)]
pub struct TwoPhotonParams {
    /// Decay-rate scale used for guards and defaults.
    pub gamma_ref: f64,
    /// Length of the time grid carrying the continuum Green function.
    pub t_max: f64,
    /// Lower bound on the zero-padded FFT length (sets the time step).
    pub min_pad: usize,
    /// Tukey taper fraction applied to the spectral samples.
    pub taper_frac: f64,
    /// Half-width (around the table center) of the frequency band kept in
    /// the quartic overlap integrals; the integrand decays like the fourth
    /// power of the detuning, so a moderate band loses nothing.
    pub x_band: f64,
    /// Total energies closer than this to a bound-pair pole are nudged off
    /// the pole before evaluating the response matrix.
    pub pole_guard: f64,
}

impl TwoPhotonParams {
    pub fn for_gamma(gamma: f64) -> Self {
        TwoPhotonParams {
            gamma_ref: gamma,
            t_max: 160.0 / gamma,
            min_pad: 1 << 18,
            taper_frac: 0.2,
            x_band: 25.0 * gamma,
            pole_guard: 1e-6 * gamma,
        }
    }
}

/// Sampled emitter Green functions and the precomputed integrand of the
/// two-excitation response.
#[derive(Debug, Clone)]
pub struct GreenTable {
    /// Number of emitters.
    pub nn: usize,
    /// Time step of all series.
    pub dt: f64,
    /// Bound-state frequencies.
    pub omega_b: Vec<f64>,
    /// `eps[alpha][n]` copied from the overlap table.
    pub eps: Vec<Vec<C64>>,
    /// Continuum part `G_c` per entry, flattened `m * nn + n`.
    pub gc: Vec<TimeSeries>,
    /// `2 G_b G_c + G_c^2` per entry on the same grid (the part of `G^2`
    /// that needs numerical transforming).
    pub w_samples: Vec<Vec<C64>>,
    /// Exponential continuation rate of `G_c` past the grid end (`None`
    /// when the tail is too small or not decaying; it is then dropped).
    pub zeta: Vec<Option<C64>>,
    /// `|G(0) - delta_mn|` per entry: the window-truncation residual of the
    /// completeness relation, reported rather than hidden.
    pub g0_residual: Vec<f64>,
    /// Largest `|G_c(t_max)| / |G_c(0)|` over entries; should be small for
    /// the half-line transform to have converged.
    pub tail_fraction: f64,
}

impl GreenTable {
    /// Build the table from overlap data. `t_max` and the taper come from
    /// `params`; the time step is `2 pi / (M d_omega)` with `M` the padded
    /// FFT length.
    pub fn build(table: &OverlapTable, params: &TwoPhotonParams) -> Result<GreenTable> {
        let nn = table.n_emitters();
        let grid = &table.grid;
        let d_omega = table.step();
        let len = grid.len();
        let mut m_pad = 1usize;
        while m_pad < (4 * len).max(params.min_pad) {
            m_pad <<= 1;
        }
        let dt = 2.0 * std::f64::consts::PI / (m_pad as f64 * d_omega);
        // The discrete transform is periodic in 2 pi / d_omega; times past
        // half a period start absorbing the aliased negative-time image, so
        // a too-long window would corrupt the table silently.
        let period = 2.0 * std::f64::consts::PI / d_omega;
        if params.t_max > 0.5 * period {
            return Err(Error::Numerical(format!(
                "time window t_max = {:.1} exceeds half the transform period {:.1}; \
                 use a denser frequency grid or a shorter window",
                params.t_max, period
            )));
        }
        let n_keep = (params.t_max / dt).ceil() as usize + 2;
        let eps = table.eps.clone();
        let omega_b = table.omega_b.clone();
        let nb = omega_b.len();
        let g_bound = |m: usize, n: usize, t: f64| -> C64 {
            let mut acc = C64::new(0.0, 0.0);
            for a in 0..nb {
                acc += eps[a][m] * eps[a][n].conj() * C64::from_polar(1.0, -omega_b[a] * t);
            }
            acc
        };
        let mut gc = Vec::with_capacity(nn * nn);
        let mut w_samples = Vec::with_capacity(nn * nn);
        let mut zeta = Vec::with_capacity(nn * nn);
        let mut g0_residual = Vec::with_capacity(nn * nn);
        let mut tail_fraction = 0.0f64;
        for m in 0..nn {
            for n in 0..nn {
                let spec: Vec<C64> = (0..len).map(|j| table.xi[m][j] * table.xi[n][j].conj()).collect();
                let ts = spectrum_to_time(grid[0], d_omega, &spec, params.min_pad, n_keep, params.taper_frac);
                debug_assert!((ts.dt - dt).abs() < 1e-12 * dt);
                let w: Vec<C64> = ts
                    .values
                    .iter()
                    .enumerate()
                    .map(|(j, &gcv)| {
                        let gb = g_bound(m, n, j as f64 * dt);
                        2.0 * gb * gcv + gcv * gcv
                    })
                    .collect();
                let last = ts.values.len() - 1;
                let (g_t, g_p) = (ts.values[last], ts.values[last - 1]);
                let z = if g_t.norm() > 1e-12 && g_p.norm() > 1e-12 {
                    let rate = (g_t / g_p).ln() / dt;
                    (rate.re < 0.0).then_some(rate)
                } else {
                    None
                };
                let g0 = g_bound(m, n, 0.0) + ts.values[0];
                let want = if m == n { 1.0 } else { 0.0 };
                g0_residual.push((g0 - want).norm());
                if ts.values[0].norm() > 0.0 {
                    tail_fraction = tail_fraction.max(g_t.norm() / ts.values[0].norm().max(1e-300));
                }
                gc.push(ts);
                w_samples.push(w);
                zeta.push(z);
            }
        }
        Ok(GreenTable {
            nn,
            dt,
            omega_b,
            eps,
            gc,
            w_samples,
            zeta,
            g0_residual,
            tail_fraction,
        })
    }

    /// Analytic bound part `G_b` at time `t`.
    pub fn g_bound(&self, m: usize, n: usize, t: f64) -> C64 {
        let mut acc = C64::new(0.0, 0.0);
        for a in 0..self.omega_b.len() {
            acc += self.eps[a][m] * self.eps[a][n].conj()
                * C64::from_polar(1.0, -self.omega_b[a] * t);
        }
        acc
    }

    /// Distinct bound-pair total energies `w_a + w_b` (poles of the
    /// response matrix).
    pub fn pole_frequencies(&self) -> Vec<f64> {
        let mut poles = Vec::new();
        for (a, &wa) in self.omega_b.iter().enumerate() {
            for &wb in self.omega_b.iter().skip(a) {
                let p = wa + wb;
                if !poles.iter().any(|&q: &f64| (q - p).abs() < 1e-12 * (1.0 + p.abs())) {
                    poles.push(p);
                }
            }
        }
        poles
    }
}

/// The full two-photon computation context: an overlap table plus its
/// derived Green table.
pub struct TwoPhoton<'a> {
    pub table: &'a OverlapTable,
    pub green: GreenTable,
    pub params: TwoPhotonParams,
    poles: Vec<f64>,
    /// Index range `[lo, hi]` of the table grid kept in quartic integrals.
    band: (usize, usize),
}

/// Energy-entangled wavepacket in the emitter-channel family:
///
/// ```text
/// psi(nu1, nu2) = N f(nu1 + nu2) sum_n c_n conj(xi_n(nu1)) conj(xi_n(nu2)),
/// f(v) = (pi Delta^2)^{-1/4} exp(-(v - Omega0)^2 / 2 Delta^2),
/// ```
///
/// with `N` fixed by normalization (computed on the fly; probabilities are
/// scale-invariant in `c`).
#[derive(Debug, Clone)]
pub struct StructuredWavepacket {
    pub c: Vec<C64>,
    pub delta: f64,
    pub omega0: f64,
}

/// Trapping probabilities of a structured wavepacket, one per bound state,
/// plus the squared normalization constant that was applied.
#[derive(Debug, Clone)]
pub struct StructuredTrapping {
    pub p: Vec<f64>,
    pub norm_const_sq: f64,
}

/// Two-photon wavepacket sampled on a square uniform frequency grid,
/// `psi[i][j]` at `(nu0 + i dnu, nu0 + j dnu)`. Bosonic symmetry
/// `psi(a, b) = psi(b, a)` is assumed.
#[derive(Debug, Clone)]
pub struct GridWavepacket {
    pub nu0: f64,
    pub dnu: f64,
    pub psi: Vec<Vec<C64>>,
}

impl GridWavepacket {
    pub fn n(&self) -> usize {
        self.psi.len()
    }

    /// `integral |psi|^2 dnu1 dnu2` by the trapezoid-free Riemann sum the
    /// rest of the grid machinery uses (consistent measures keep the
    /// Cauchy-Schwarz bound exact in the discrete setting too).
    pub fn norm_sq(&self) -> f64 {
        let s: f64 = self.psi.iter().flatten().map(|z| z.norm_sqr()).sum();
        s * self.dnu * self.dnu
    }

    pub fn normalize(&mut self) {
        let s = self.norm_sq().sqrt();
        if s > 0.0 {
            for row in &mut self.psi {
                for z in row {
                    *z /= s;
                }
            }
        }
    }

    pub fn symmetrize(&mut self) {
        let n = self.n();
        for i in 0..n {
            for j in (i + 1)..n {
                let avg = 0.5 * (self.psi[i][j] + self.psi[j][i]);
                self.psi[i][j] = avg;
                self.psi[j][i] = avg;
            }
        }
    }
}

/// Result of solving the superposition-design system at a central energy.
#[derive(Debug, Clone)]
pub struct Design {
    /// Input-channel coefficients, scaled so the designed wavepacket is
    /// normalized in the small-bandwidth limit (`c^dag X(Omega0) c = 1`).
    pub c: Vec<C64>,
    /// Predicted bound-superposition amplitudes: `|c_out[a]|^2` is the
    /// small-bandwidth trapping probability of bound state `a`.
    pub c_out: Vec<C64>,
    /// Condition number of the design matrix at `omega0`.
    pub condition: f64,
    pub omega0: f64,
}

impl<'a> TwoPhoton<'a> {
    pub fn new(table: &'a OverlapTable, params: TwoPhotonParams) -> Result<TwoPhoton<'a>> {
        let green = GreenTable::build(table, &params)?;
        let poles = green.pole_frequencies();
        let center = 0.5 * (table.grid[0] + table.grid.last().unwrap());
        let lo = table.grid.partition_point(|&w| w < center - params.x_band);
        let hi = table.grid.partition_point(|&w| w <= center + params.x_band) - 1;
        if hi <= lo + 8 {
            return Err(Error::Config(
                "quartic-integral band keeps too few grid nodes; widen the window or the band"
                    .into(),
            ));
        }
        Ok(TwoPhoton { table, green, params, poles, band: (lo, hi) })
    }

    pub fn n_emitters(&self) -> usize {
        self.green.nn
    }

    pub fn n_bound(&self) -> usize {
        self.green.omega_b.len()
    }

    /// Deterministically move `omega` off any bound-pair pole by twice the
    /// pole guard (the response inverse has a continuous limit there).
    fn nudge_off_poles(&self, omega: f64) -> f64 {
        for &p in &self.poles {
            let d = omega - p;
            if d.abs() < self.params.pole_guard {
                return p + if d >= 0.0 { 2.0 } else { -2.0 } * self.params.pole_guard;
            }
        }
        omega
    }

    /// Two-excitation response matrix `T(omega + i0+)`: exact bound-pair
    /// rational part, Filon transform of the sampled remainder, and an
    /// exponential tail continuation. Near-pole inputs are nudged off the
    /// pole (documented limit evaluation); errors only reflect genuinely
    /// unusable input.
    pub fn t_matrix(&self, omega: f64) -> Result<CMat> {
        let omega = self.nudge_off_poles(omega);
        let nn = self.green.nn;
        let nb = self.green.omega_b.len();
        let dt = self.green.dt;
        let mut t = CMat::zeros(nn);
        for m in 0..nn {
            for n in 0..nn {
                let idx = m * nn + n;
                let mut acc = C64::new(0.0, 0.0);
                for a in 0..nb {
                    let ea = self.green.eps[a][m] * self.green.eps[a][n].conj();
                    for b in 0..nb {
                        let eb = self.green.eps[b][m] * self.green.eps[b][n].conj();
                        let denom = omega - self.green.omega_b[a] - self.green.omega_b[b];
                        acc += I * ea * eb / denom;
                    }
                }
                let w = &self.green.w_samples[idx];
                acc += filon_linear(w, dt, C64::new(omega, 0.0));
                if let Some(z) = self.green.zeta[idx] {
                    let gcv = &self.green.gc[idx].values;
                    let last = gcv.len() - 1;
                    let g_t = gcv[last];
                    let t_end = last as f64 * dt;
                    for a in 0..nb {
                        let ea = self.green.eps[a][m] * self.green.eps[a][n].conj();
                        let det = C64::new(0.0, omega - self.green.omega_b[a]) + z;
                        acc -= 2.0 * ea * g_t
                            * C64::from_polar(1.0, (omega - self.green.omega_b[a]) * t_end)
                            / det;
                    }
                    let det2 = C64::new(0.0, omega) + 2.0 * z;
                    acc -= g_t * g_t * C64::from_polar(1.0, omega * t_end) / det2;
                }
                t.set(m, n, acc);
            }
        }
        Ok(t)
    }

    fn t_inverse(&self, omega: f64) -> Result<CMat> {
        self.t_matrix(omega)?.inverse().map_err(|_| {
            Error::Numerical(format!(
                "two-excitation response matrix is singular at total energy {omega}"
            ))
        })
    }

    /// Channel weights of the trapping amplitude at total energy `omega`:
    /// `W_n = -4 pi sum_m conj(eps_m^a) conj(xi_m(omega - w_a)) [T^{-1}]_mn`,
    /// so that `Gamma_a(omega - w_a; nu1, nu2) = sum_n W_n xi_n(nu1) xi_n(nu2)`.
    pub fn w_vector(&self, alpha: usize, omega: f64) -> Result<Vec<C64>> {
        let tinv = self.t_inverse(omega)?;
        Ok(self.w_vector_with(&tinv, alpha, omega))
    }

    fn w_vector_with(&self, tinv: &CMat, alpha: usize, omega: f64) -> Vec<C64> {
        let nn = self.green.nn;
        let wa = self.green.omega_b[alpha];
        let mut w = vec![C64::new(0.0, 0.0); nn];
        for n in 0..nn {
            let mut acc = C64::new(0.0, 0.0);
            for m in 0..nn {
                acc += self.green.eps[alpha][m].conj()
                    * self.table.xi_at(m, omega - wa).conj()
                    * tinv.at(m, n);
            }
            w[n] = -FOUR_PI * acc;
        }
        w
    }

    /// Quartic overlap matrix
    /// `X_nk = int xi_n(nu) xi_n(omega - nu) conj(xi_k(nu) xi_k(omega - nu)) dnu`
    /// by the trapezoid rule on the table grid (band-limited; Hermitian and
    /// positive semidefinite by construction).
    pub fn x_matrix(&self, omega: f64) -> CMat {
        let nn = self.green.nn;
        let (lo, hi) = self.band;
        let dn = self.table.step();
        let mut x = CMat::zeros(nn);
        let mut q = vec![C64::new(0.0, 0.0); nn];
        for j in lo..=hi {
            let nu = self.table.grid[j];
            let mut all_zero = true;
            for n in 0..nn {
                q[n] = self.table.xi[n][j] * self.table.xi_at(n, omega - nu);
                all_zero &= q[n].norm_sqr() == 0.0;
            }
            if all_zero {
                continue;
            }
            let wgt = if j == lo || j == hi { 0.5 } else { 1.0 };
            for n in 0..nn {
                for k in 0..nn {
                    let add = wgt * q[n] * q[k].conj();
                    let cur = x.at(n, k);
                    x.set(n, k, cur + add);
                }
            }
        }
        for n in 0..nn {
            for k in 0..nn {
                x.set(n, k, x.at(n, k) * dn);
            }
        }
        x
    }

    /// Trapping amplitude `Gamma_a(w; nu1, nu2)` (the coefficient of the
    /// energy-conservation delta in the scattering matrix element).
    pub fn gamma_amplitude(&self, alpha: usize, w: f64, nu1: f64, nu2: f64) -> Result<C64> {
        let omega = w + self.green.omega_b[alpha];
        let tinv = self.t_inverse(omega)?;
        let wv = self.w_vector_with(&tinv, alpha, omega);
        let mut acc = C64::new(0.0, 0.0);
        for (n, &wn) in wv.iter().enumerate() {
            acc += wn * self.table.xi_at(n, nu1) * self.table.xi_at(n, nu2);
        }
        Ok(acc)
    }

    /// `1/2 int |Gamma_a(omega - w_a; nu, omega - nu)|^2 dnu` — the quantity
    /// whose maximum over `omega` is the trapping bound.
    pub fn p_ub_profile(&self, alpha: usize, omega: f64) -> Result<f64> {
        let tinv = self.t_inverse(omega)?;
        let w = self.w_vector_with(&tinv, alpha, omega);
        let x = self.x_matrix(omega);
        let nn = self.green.nn;
        let mut acc = C64::new(0.0, 0.0);
        for n in 0..nn {
            for k in 0..nn {
                acc += w[n] * x.at(n, k) * w[k].conj();
            }
        }
        Ok(0.5 * acc.re.max(0.0))
    }

    /// Maximize the trapping-bound profile over total energies in
    /// `[lo, hi]`: coarse scan (`n_scan` nodes) plus golden-section
    /// refinement. Returns `(P_ub, argmax)`.
    pub fn upper_bound(&self, alpha: usize, lo: f64, hi: f64, n_scan: usize) -> Result<(f64, f64)> {
        let profile = |om: f64| self.p_ub_profile(alpha, om).unwrap_or(0.0);
        let (om_star, p) = maximize_1d(profile, lo, hi, n_scan.max(41), 1e-6 * self.params.gamma_ref);
        Ok((p, om_star))
    }

    /// Channel coefficients whose structured wavepacket attains the bound
    /// as the bandwidth shrinks: `c_n = conj(W_n(omega))`.
    pub fn optimal_coefficients(&self, alpha: usize, omega: f64) -> Result<Vec<C64>> {
        Ok(self.w_vector(alpha, omega)?.iter().map(|z| z.conj()).collect())
    }

    /// Trapping probabilities of a structured wavepacket, one per bound
    /// state. The Gaussian energy envelope turns both the normalization and
    /// the probability integrals into Gauss-Hermite sums (40 nodes).
    pub fn trapping_structured(&self, pkt: &StructuredWavepacket) -> Result<StructuredTrapping> {
        if pkt.c.len() != self.green.nn {
            return Err(Error::Config(format!(
                "wavepacket has {} channel coefficients for {} emitters",
                pkt.c.len(),
                self.green.nn
            )));
        }
        if !(pkt.delta > 0.0) {
            return Err(Error::Config("wavepacket bandwidth must be positive".into()));
        }
        let nb = self.green.omega_b.len();
        let (s_nodes, s_weights) = gauss_hermite(40);
        let inv_sqrt_pi = 1.0 / std::f64::consts::PI.sqrt();
        let mut denom = 0.0f64;
        let mut nums = vec![0.0f64; nb];
        for (&s, &wq) in s_nodes.iter().zip(s_weights.iter()) {
            let omega = pkt.omega0 + pkt.delta * s;
            let x = self.x_matrix(omega);
            let xc = x.matvec(&pkt.c);
            let cxc: C64 = pkt.c.iter().zip(xc.iter()).map(|(&cn, &v)| cn.conj() * v).sum();
            denom += wq * cxc.re;
            let tinv = self.t_inverse(omega)?;
            for alpha in 0..nb {
                let w = self.w_vector_with(&tinv, alpha, omega);
                let amp: C64 = w.iter().zip(xc.iter()).map(|(&wn, &v)| wn * v).sum();
                nums[alpha] += wq * amp.norm_sqr();
            }
        }
        denom *= inv_sqrt_pi;
        if !(denom > 0.0) {
            return Err(Error::Numerical(
                "structured wavepacket has vanishing norm on this overlap table".into(),
            ));
        }
        let norm_const_sq = 1.0 / denom;
        let p = nums.iter().map(|&v| 0.5 * inv_sqrt_pi * v * norm_const_sq).collect();
        Ok(StructuredTrapping { p, norm_const_sq })
    }

    /// Small-bandwidth limit of the structured trapping probabilities:
    /// `P_a = |（S(omega0) c)_a|^2 / (c^dag X(omega0) c)` — cheap and exact
    /// as `Delta -> 0`.
    pub fn delta_limit_trapping(&self, c: &[C64], omega0: f64) -> Result<Vec<f64>> {
        let s = self.s_matrix(omega0)?;
        let x = self.x_matrix(omega0);
        let xc = x.matvec(c);
        let cxc: f64 = c.iter().zip(xc.iter()).map(|(&cn, &v)| (cn.conj() * v).re).sum();
        if !(cxc > 0.0) {
            return Err(Error::Numerical(
                "channel coefficients have vanishing norm under the quartic overlap".into(),
            ));
        }
        Ok(s.iter()
            .map(|row| {
                let amp: C64 = row.iter().zip(c.iter()).map(|(&sn, &cn)| sn * cn).sum();
                amp.norm_sqr() / cxc
            })
            .collect())
    }

    /// Superposition-design matrix
    /// `S_an = -2 sqrt(2) pi sum_m conj(eps_m^a) conj(xi_m(omega - w_a))
    ///  [T^{-1}(omega + i0+) X(omega)]_mn`
    /// mapping channel coefficients to trapped bound-state amplitudes.
    pub fn s_matrix(&self, omega: f64) -> Result<Vec<Vec<C64>>> {
        let nb = self.green.omega_b.len();
        let nn = self.green.nn;
        let tinv = self.t_inverse(omega)?;
        let x = self.x_matrix(omega);
        let inv_sqrt2 = 1.0 / 2.0f64.sqrt();
        let mut s = Vec::with_capacity(nb);
        for alpha in 0..nb {
            let w = self.w_vector_with(&tinv, alpha, omega);
            let mut row = vec![C64::new(0.0, 0.0); nn];
            for n in 0..nn {
                let mut acc = C64::new(0.0, 0.0);
                for k in 0..nn {
                    acc += w[k] * x.at(k, n);
                }
                row[n] = inv_sqrt2 * acc;
            }
            s.push(row);
        }
        Ok(s)
    }

    /// Solve the design problem: find channel coefficients whose
    /// small-bandwidth trapped state is the requested bound-state
    /// superposition. Requires as many bound states as emitter channels
    /// (square design matrix). The returned coefficients are scaled so the
    /// designed wavepacket is normalized in the small-bandwidth limit.
    pub fn design_input(&self, omega0: f64, target: &[C64]) -> Result<Design> {
        let nb = self.green.omega_b.len();
        let nn = self.green.nn;
        if nb != nn {
            return Err(Error::Config(format!(
                "superposition design needs a square map ({nb} bound states vs {nn} emitter \
                 channels)"
            )));
        }
        if target.len() != nb {
            return Err(Error::Config(format!(
                "design target has {} amplitudes for {nb} bound states",
                target.len()
            )));
        }
        let tnorm: f64 = target.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        if !(tnorm > 0.0) {
            return Err(Error::Config("design target must be nonzero".into()));
        }
        let target: Vec<C64> = target.iter().map(|&z| z / tnorm).collect();
        let rows = self.s_matrix(omega0)?;
        let mut s = CMat::zeros(nn);
        for (a, row) in rows.iter().enumerate() {
            for (n, &v) in row.iter().enumerate() {
                s.set(a, n, v);
            }
        }
        let (c_raw, condition) = crate::numerics::solve_linear(&s, &target)?;
        if condition > 1e6 {
            return Err(Error::Numerical(format!(
                "design matrix condition {condition:.3e} at central energy {omega0}: the \
                 requested superposition is not reachable here; try a different central energy"
            )));
        }
        let x = self.x_matrix(omega0);
        let xc = x.matvec(&c_raw);
        let cxc: f64 = c_raw.iter().zip(xc.iter()).map(|(&cn, &v)| (cn.conj() * v).re).sum();
        if !(cxc > 0.0) {
            return Err(Error::Numerical(
                "designed coefficients have vanishing norm under the quartic overlap".into(),
            ));
        }
        let scale = 1.0 / cxc.sqrt();
        let c: Vec<C64> = c_raw.iter().map(|&z| z * scale).collect();
        let c_out: Vec<C64> = rows
            .iter()
            .map(|row| row.iter().zip(c.iter()).map(|(&sn, &cn)| sn * cn).sum())
            .collect();
        Ok(Design { c, c_out, condition, omega0 })
    }

    /// Sample a structured wavepacket on a square grid (normalized), for
    /// consumers that want an explicit `psi(nu1, nu2)`.
    pub fn sample_structured(
        &self,
        pkt: &StructuredWavepacket,
        nu_lo: f64,
        nu_hi: f64,
        n: usize,
    ) -> GridWavepacket {
        let dnu = (nu_hi - nu_lo) / (n - 1) as f64;
        let delta2 = pkt.delta * pkt.delta;
        let envelope_norm = (std::f64::consts::PI * delta2).powf(-0.25);
        let xi_conj: Vec<Vec<C64>> = (0..self.green.nn)
            .map(|ch| {
                (0..n)
                    .map(|i| self.table.xi_at(ch, nu_lo + i as f64 * dnu).conj())
                    .collect()
            })
            .collect();
        let mut psi = vec![vec![C64::new(0.0, 0.0); n]; n];
        for i in 0..n {
            let nu1 = nu_lo + i as f64 * dnu;
            for j in 0..n {
                let nu2 = nu_lo + j as f64 * dnu;
                let v = nu1 + nu2 - pkt.omega0;
                let f = envelope_norm * (-v * v / (2.0 * delta2)).exp();
                let mut acc = C64::new(0.0, 0.0);
                for (ch, &cn) in pkt.c.iter().enumerate() {
                    acc += cn * xi_conj[ch][i] * xi_conj[ch][j];
                }
                psi[i][j] = f * acc;
            }
        }
        let mut g = GridWavepacket { nu0: nu_lo, dnu, psi };
        g.normalize();
        g
    }

    /// Trapping probabilities for an arbitrary grid wavepacket, one per
    /// bound state. Total energies are walked along the grid anti-diagonals
    /// (so `omega - nu` lands back on the grid), rows with negligible
    /// wavepacket mass are skipped, and the amplitude integral uses the
    /// plain Riemann sum matching [`GridWavepacket::norm_sq`].
    pub fn trapping_grid(&self, pkt: &GridWavepacket) -> Result<Vec<f64>> {
        let n = pkt.n();
        let nb = self.green.omega_b.len();
        let nn = self.green.nn;
        // Mass per anti-diagonal, to skip empty total energies.
        let mut rho = vec![0.0f64; 2 * n - 1];
        for k in 0..2 * n - 1 {
            let j_min = k.saturating_sub(n - 1);
            let j_max = k.min(n - 1);
            for j in j_min..=j_max {
                rho[k] += pkt.psi[j][k - j].norm_sqr();
            }
        }
        let rho_max = rho.iter().cloned().fold(0.0f64, f64::max);
        let mut p = vec![0.0f64; nb];
        let mut xi_cache: Vec<Vec<C64>> = vec![Vec::new(); nn];
        for (ch, cache) in xi_cache.iter_mut().enumerate() {
            *cache = (0..n)
                .map(|i| self.table.xi_at(ch, pkt.nu0 + i as f64 * pkt.dnu))
                .collect();
        }
        for k in 0..2 * n - 1 {
            if rho[k] <= 1e-14 * rho_max {
                continue;
            }
            let omega = 2.0 * pkt.nu0 + k as f64 * pkt.dnu;
            let tinv = self.t_inverse(omega)?;
            let j_min = k.saturating_sub(n - 1);
            let j_max = k.min(n - 1);
            let mut y = vec![C64::new(0.0, 0.0); nn];
            for j in j_min..=j_max {
                let psival = pkt.psi[j][k - j];
                if psival.norm_sqr() == 0.0 {
                    continue;
                }
                for ch in 0..nn {
                    y[ch] += xi_cache[ch][j] * xi_cache[ch][k - j] * psival;
                }
            }
            for v in &mut y {
                *v *= pkt.dnu;
            }
            for alpha in 0..nb {
                let w = self.w_vector_with(&tinv, alpha, omega);
                let amp: C64 = w.iter().zip(y.iter()).map(|(&wn, &yn)| wn * yn).sum();
                p[alpha] += 0.5 * amp.norm_sqr() * pkt.dnu;
            }
        }
        Ok(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{EmitterSpec, SystemSpec};
    use crate::spectral::{find_bound_states, overlaps, FrequencyGrid};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn make_context(system: &SystemSpec) -> (crate::spectral::OverlapTable, TwoPhotonParams) {
        let states = find_bound_states(system).unwrap().states;
        let gamma = system.gamma_max();
        let center = system.emitters[0].omega;
        let grid = FrequencyGrid { min: center - 80.0 * gamma, max: center + 80.0 * gamma, n: 64001 };
        let table = overlaps(system, &states, &grid).unwrap();
        (table, TwoPhotonParams::for_gamma(gamma))
    }

    fn feedback_single() -> SystemSpec {
        SystemSpec::new(vec![EmitterSpec { omega: PI / 2.0, gamma: 1.0, delay: 2.0 }])
    }

    fn feedback_pair() -> SystemSpec {
        SystemSpec::new(vec![
            EmitterSpec { omega: 2.0 * PI, gamma: 1.0, delay: 0.5 },
            EmitterSpec { omega: 2.0 * PI, gamma: 1.0, delay: 1.0 },
        ])
    }

    #[test]
    fn green_function_closes_at_zero_time() {
        let sys = feedback_single();
        let (table, params) = make_context(&sys);
        let tp = TwoPhoton::new(&table, params).unwrap();
        // G(0) = 1 up to the window-truncation deficit, which the table
        // reports; both should be below a couple percent at this window.
        assert!(tp.green.g0_residual[0] < 0.02, "residual {}", tp.green.g0_residual[0]);
        assert!(tp.green.tail_fraction < 1e-3, "tail {}", tp.green.tail_fraction);
    }

    #[test]
    fn quartic_overlap_matrix_is_hermitian_psd() {
        let sys = feedback_pair();
        let (table, params) = make_context(&sys);
        let tp = TwoPhoton::new(&table, params).unwrap();
        let omega0 = 4.0 * PI + 2.4;
        let x = tp.x_matrix(omega0);
        for n in 0..2 {
            for k in 0..2 {
                assert!((x.at(n, k) - x.at(k, n).conj()).norm() < 1e-12);
            }
            assert!(x.at(n, n).re > 0.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let c: Vec<C64> =
                (0..2).map(|_| C64::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5)).collect();
            let xc = x.matvec(&c);
            let q: C64 = c.iter().zip(xc.iter()).map(|(&a, &b)| a.conj() * b).sum();
            assert!(q.re >= -1e-12);
            assert!(q.im.abs() < 1e-12);
        }
    }

    #[test]
    fn response_matrix_is_finite_on_the_pole() {
        let sys = feedback_single();
        let (table, params) = make_context(&sys);
        let tp = TwoPhoton::new(&table, params).unwrap();
        let t_on = tp.t_matrix(PI).unwrap(); // exactly twice the bound frequency
        assert!(t_on.at(0, 0).norm().is_finite());
        let t_off = tp.t_matrix(PI + 3.0).unwrap();
        assert!((t_on.at(0, 0) - t_off.at(0, 0)).norm() > 1e-6);
    }

    #[test]
    fn trapping_bound_peaks_where_expected() {
        let sys = feedback_single();
        let (table, params) = make_context(&sys);
        let tp = TwoPhoton::new(&table, params).unwrap();
        let (p_ub, om_star) = tp.upper_bound(0, PI - 4.0, PI + 4.0, 401).unwrap();
        assert!(p_ub > 0.9 && p_ub <= 1.0 + 1e-9, "P_ub = {p_ub}");
        // Known optimum for this delay: about 0.95 linewidths above twice
        // the emitter frequency.
        assert!((om_star - (PI + 0.95)).abs() < 0.06, "argmax = {}", om_star - PI);
    }

    #[test]
    fn optimal_wavepacket_approaches_the_bound() {
        let sys = feedback_single();
        let (table, params) = make_context(&sys);
        let tp = TwoPhoton::new(&table, params).unwrap();
        let (p_ub, om_star) = tp.upper_bound(0, PI - 4.0, PI + 4.0, 401).unwrap();
        let c = tp.optimal_coefficients(0, om_star).unwrap();
        let narrow = tp
            .trapping_structured(&StructuredWavepacket { c: c.clone(), delta: 0.05, omega0: om_star })
            .unwrap();
        assert!(narrow.p[0] <= p_ub + 1e-9);
        assert!(narrow.p[0] > 0.95 * p_ub, "P = {} vs bound {p_ub}", narrow.p[0]);
        let wider = tp
            .trapping_structured(&StructuredWavepacket { c, delta: 0.1, omega0: om_star })
            .unwrap();
        assert!(wider.p[0] >= 0.9, "P = {}", wider.p[0]);
        assert!(wider.p[0] <= narrow.p[0] + 1e-9, "bandwidth ordering violated");
    }

    #[test]
    fn random_wavepackets_respect_the_bound() {
        let sys = feedback_single();
        let (table, params) = make_context(&sys);
        let tp = TwoPhoton::new(&table, params).unwrap();
        let (p_ub, _) = tp.upper_bound(0, PI - 4.0, PI + 4.0, 401).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..5 {
            let c = vec![C64::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5)];
            let delta = 0.05 + 0.4 * rng.gen::<f64>();
            let omega0 = PI + 2.0 * (rng.gen::<f64>() - 0.5);
            let res = tp.trapping_structured(&StructuredWavepacket { c, delta, omega0 }).unwrap();
            assert!(res.p[0] <= p_ub + 1e-6, "P = {} > bound {p_ub}", res.p[0]);
        }
    }

    #[test]
    fn small_bandwidth_limit_matches_the_design_formula() {
        let sys = feedback_single();
        let (table, params) = make_context(&sys);
        let tp = TwoPhoton::new(&table, params).unwrap();
        let om = PI + 0.95;
        let c = tp.optimal_coefficients(0, om).unwrap();
        let narrow = tp
            .trapping_structured(&StructuredWavepacket { c: c.clone(), delta: 1e-4, omega0: om })
            .unwrap();
        let limit = tp.delta_limit_trapping(&c, om).unwrap();
        assert!(
            (narrow.p[0] - limit[0]).abs() < 1e-4,
            "narrow {} vs limit {}",
            narrow.p[0],
            limit[0]
        );
    }

    #[test]
    fn design_reaches_individual_bound_states_and_superpositions() {
        let sys = feedback_pair();
        let (table, params) = make_context(&sys);
        let tp = TwoPhoton::new(&table, params).unwrap();
        assert_eq!(tp.n_bound(), 2);
        let omega0 = 4.0 * PI + 2.4;
        let inv_sqrt2 = 1.0 / 2.0f64.sqrt();
        let targets: Vec<Vec<C64>> = vec![
            vec![C64::new(1.0, 0.0), C64::new(0.0, 0.0)],
            vec![C64::new(0.0, 0.0), C64::new(1.0, 0.0)],
            vec![C64::new(inv_sqrt2, 0.0), C64::new(inv_sqrt2, 0.0)],
        ];
        for target in &targets {
            let design = tp.design_input(omega0, target).unwrap();
            assert!(design.condition < 1e6);
            // Predicted output must be parallel to the target.
            let t_norm: f64 = target.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
            let o_norm: f64 = design.c_out.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
            let ip: C64 = design
                .c_out
                .iter()
                .zip(target.iter())
                .map(|(&o, &t)| o * t.conj())
                .sum();
            let fidelity = ip.norm() / (t_norm * o_norm);
            assert!(fidelity > 1.0 - 1e-10, "fidelity {fidelity}");
            // Probabilities in the small-bandwidth limit match |c_out|^2.
            let limit = tp.delta_limit_trapping(&design.c, omega0).unwrap();
            for (a, &pa) in limit.iter().enumerate() {
                assert!((pa - design.c_out[a].norm_sqr()).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn grid_and_structured_trapping_agree() {
        let sys = feedback_single();
        let (table, params) = make_context(&sys);
        let tp = TwoPhoton::new(&table, params).unwrap();
        let pkt = StructuredWavepacket {
            c: vec![C64::new(1.0, 0.0)],
            delta: 0.25,
            omega0: PI + 0.95,
        };
        let structured = tp.trapping_structured(&pkt).unwrap();
        let grid = tp.sample_structured(&pkt, PI / 2.0 - 12.0, PI / 2.0 + 12.0, 1601);
        let p_grid = tp.trapping_grid(&grid).unwrap();
        assert!(
            (structured.p[0] - p_grid[0]).abs() < 5e-3,
            "structured {} vs grid {}",
            structured.p[0],
            p_grid[0]
        );
    }
}
