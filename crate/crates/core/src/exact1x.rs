//! Exact dynamics in the single-excitation sector
//! `A|e,0⟩ + B|g,1⟩ + C|g,0⟩ + Σ_k D_k|g,0,1_k⟩` with an exponential bath kernel.
//!
//! Amplitudes are kept in the frame that rotates every excited component at
//! the bare atomic frequency `ω0`; `|A C*|` is unaffected by that choice. The
//! bath enters through the memory integral `I(t) = ∫ α(t-s) e^{iω0(t-s)} B(s) ds`.

use num_complex::Complex64 as C64;

use crate::error::{Error, Result};
use crate::model::{CorrelationSpec, Drive, ModelParams};

const I: C64 = C64 { re: 0.0, im: 1.0 };

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Amplitudes {
    /// Excited atom, empty cavity.
    pub a: C64,
    /// Ground atom, one photon.
    pub b: C64,
    /// Ground atom, empty cavity (constant).
    pub c: C64,
    /// Bath memory integral.
    pub i: C64,
    pub t: f64,
}

impl Amplitudes {
    /// `(c_e|e⟩ + c_g|g⟩) ⊗ |0⟩` with the bath in vacuum.
    pub fn initial(params: &ModelParams) -> Self {
        Self {
            a: params.init_atom.0,
            b: C64::new(0.0, 0.0),
            c: params.init_atom.1,
            i: C64::new(0.0, 0.0),
            t: 0.0,
        }
    }

    fn is_finite(&self) -> bool {
        self.a.is_finite() && self.b.is_finite() && self.i.is_finite()
    }
}

/// Coefficients of the `(A, B, I)` linear system for one exponential kernel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SingleExcitation {
    pub strength: f64,
    pub gamma: f64,
    /// `Ω - ω0`.
    pub cavity_detuning: f64,
    /// `ω_c - ω0`: offset of the bath spectral peak from the atom.
    pub bath_detuning: f64,
}

impl SingleExcitation {
    /// Resonant system `dA = -iGB, dB = -iG*A - I, dI = (Γγ/2)B - γI`.
    pub fn resonant(strength: f64, gamma: f64) -> Self {
        Self { strength, gamma, cavity_detuning: 0.0, bath_detuning: 0.0 }
    }

    /// System matching the master-equation solver for the same parameters.
    pub fn for_model(params: &ModelParams, alpha1: &CorrelationSpec) -> Result<Self> {
        match alpha1 {
            CorrelationSpec::Ou { strength, gamma, center } => Ok(Self {
                strength: *strength,
                gamma: *gamma,
                cavity_detuning: params.omega_cavity - params.omega0,
                bath_detuning: center - params.omega0,
            }),
            other => Err(Error::UnsupportedSpec(format!(
                "single-excitation solver needs a single OU kernel, got {other:?}"
            ))),
        }
    }

    #[inline]
    fn rhs(&self, s: &Amplitudes, g: C64, eta: f64) -> (C64, C64, C64) {
        let da = -I * eta * s.a - I * g * s.b;
        let db = -I * self.cavity_detuning * s.b - I * g.conj() * s.a - s.i;
        let di = 0.5 * self.strength * self.gamma * s.b
            - C64::new(self.gamma, self.bath_detuning) * s.i;
        (da, db, di)
    }

    /// One RK4 step. `g` and `eta` hold the coupling and atomic frequency
    /// offset at `t`, `t + dt/2`, `t + dt`.
    pub fn step(&self, s: &Amplitudes, g: [C64; 3], eta: [f64; 3], dt: f64) -> Result<Amplitudes> {
        let shift = |k: (C64, C64, C64), h: f64| Amplitudes {
            a: s.a + k.0 * h,
            b: s.b + k.1 * h,
            i: s.i + k.2 * h,
            ..*s
        };
        let k1 = self.rhs(s, g[0], eta[0]);
        let k2 = self.rhs(&shift(k1, 0.5 * dt), g[1], eta[1]);
        let k3 = self.rhs(&shift(k2, 0.5 * dt), g[1], eta[1]);
        let k4 = self.rhs(&shift(k3, dt), g[2], eta[2]);
        let w = dt / 6.0;
        let next = Amplitudes {
            a: s.a + (k1.0 + 2.0 * k2.0 + 2.0 * k3.0 + k4.0) * w,
            b: s.b + (k1.1 + 2.0 * k2.1 + 2.0 * k3.1 + k4.1) * w,
            c: s.c,
            i: s.i + (k1.2 + 2.0 * k2.2 + 2.0 * k3.2 + k4.2) * w,
            t: s.t + dt,
        };
        if !next.is_finite() {
            return Err(Error::NumericOverflow { t: next.t });
        }
        Ok(next)
    }
}

/// One RK4 step of the resonant system with coupling samples at the stage points.
pub fn step_single_excitation(
    state: &Amplitudes,
    g: [C64; 3],
    gamma1: f64,
    strength1: f64,
    dt: f64,
) -> Result<Amplitudes> {
    SingleExcitation::resonant(strength1, gamma1).step(state, g, [0.0; 3], dt)
}

/// `|A C*|`, the atomic coherence.
pub fn coherence_1x(state: &Amplitudes) -> f64 {
    (state.a * state.c.conj()).norm()
}

/// `4|A|²|B|²`. For the pure one-excitation state this is the square of the
/// Wootters concurrence `2|A||B|` (the tangle); the two agree at `|A||B| = 1/2`.
pub fn concurrence_1x(state: &Amplitudes) -> f64 {
    4.0 * state.a.norm_sqr() * state.b.norm_sqr()
}

/// Population transferred into the bath, `1 - |A|² - |B|² - |C|²`, clamped at 0.
pub fn bath_population(state: &Amplitudes) -> f64 {
    (1.0 - state.a.norm_sqr() - state.b.norm_sqr() - state.c.norm_sqr()).max(0.0)
}

/// Integrates `n_steps` steps under `drive`, returning the states at every
/// `stride`-th step (including `t = 0`).
pub fn run(
    system: &SingleExcitation,
    init: Amplitudes,
    drive: &Drive,
    omega0: f64,
    stride: usize,
) -> Result<Vec<Amplitudes>> {
    let n_steps = drive.n_steps();
    let stride = stride.max(1);
    let mut out = Vec::with_capacity(n_steps / stride + 1);
    let mut s = init;
    out.push(s);
    for n in 0..n_steps {
        let om = drive.omega_stages(n);
        s = system.step(&s, drive.g_stages(n), om.map(|w| w - omega0), drive.dt)?;
        if (n + 1) % stride == 0 {
            out.push(s);
        }
    }
    Ok(out)
}

/// Writes `t,re_A,im_A,re_B,im_B,coherence,concurrence,bath_pop` rows for
/// states sampled every `stride_dt`.
pub fn write_csv<W: std::io::Write + ?Sized>(states: &[Amplitudes], stride_dt: f64, out: &mut W) -> std::io::Result<()> {
    writeln!(out, "t,re_A,im_A,re_B,im_B,coherence,concurrence,bath_pop")?;
    for (k, s) in states.iter().enumerate() {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            k as f64 * stride_dt,
            s.a.re,
            s.a.im,
            s.b.re,
            s.b.im,
            coherence_1x(s),
            concurrence_1x(s),
            bath_population(s)
        )?;
    }
    Ok(())
}

/// Dense `(atom ⊗ cavity)` density matrix of the reduced state, with the bath
/// excitation folded into `|g,0⟩⟨g,0|`. Basis order `|e,n⟩` then `|g,n⟩`.
pub fn reduced_density(state: &Amplitudes, n_max: usize) -> nalgebra::DMatrix<C64> {
    let dim = 2 * (n_max + 1);
    let e0 = 0;
    let g1 = n_max + 2;
    let g0 = n_max + 1;
    let mut psi = nalgebra::DVector::<C64>::zeros(dim);
    psi[e0] = state.a;
    psi[g1] = state.b;
    psi[g0] = state.c;
    let mut rho = &psi * psi.adjoint();
    rho[(g0, g0)] += C64::new(bath_population(state), 0.0);
    rho
}

#[cfg(test)]
mod tests {
    use super::*;

    fn start() -> Amplitudes {
        Amplitudes::initial(&ModelParams::default())
    }

    #[test]
    fn decoupled_atom_is_frozen() {
        let mut s = start();
        for _ in 0..1000 {
            s = step_single_excitation(&s, [C64::new(0.0, 0.0); 3], 1.0, 1.0, 0.01).unwrap();
        }
        assert_eq!(s.a, start().a);
    }

    #[test]
    fn rabi_without_bath() {
        let g = C64::new(0.3, 0.0);
        let dt = 1e-3;
        let mut s = start();
        for n in 1..=20_000 {
            s = step_single_excitation(&s, [g; 3], 1.0, 0.0, dt).unwrap();
            let t = n as f64 * dt;
            let exact = start().a.norm() * (0.3 * t).cos().abs();
            assert!((s.a.norm() - exact).abs() < 1e-8, "t = {t}");
            assert!(bath_population(&s) < 1e-9);
        }
    }

    #[test]
    fn coherence_and_concurrence_values() {
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let s = Amplitudes {
            a: C64::new(h, 0.0),
            b: C64::new(0.0, 0.0),
            c: C64::new(h, 0.0),
            i: C64::new(0.0, 0.0),
            t: 0.0,
        };
        assert!((coherence_1x(&s) - 0.5).abs() < 1e-15);
        assert_eq!(concurrence_1x(&s), 0.0);
        assert_eq!(bath_population(&s), 0.0);
        let z = Amplitudes { a: C64::new(0.0, 0.0), ..s };
        assert_eq!(coherence_1x(&z), 0.0);
        let rotated = Amplitudes { a: s.a * C64::from_polar(1.0, 0.7), ..s };
        assert!((coherence_1x(&rotated) - coherence_1x(&s)).abs() < 1e-15);
        let ent = Amplitudes { a: C64::new(h, 0.0), b: C64::new(0.0, h), c: C64::new(0.0, 0.0), ..s };
        assert!((concurrence_1x(&ent) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn overflow_is_reported() {
        let s = Amplitudes { a: C64::new(f64::MAX, 0.0), ..start() };
        let r = step_single_excitation(&s, [C64::new(1e300, 0.0); 3], 1.0, 1.0, 1.0);
        assert!(matches!(r, Err(Error::NumericOverflow { .. })));
    }

    #[test]
    fn non_ou_kernel_rejected() {
        let p = ModelParams::default();
        assert!(SingleExcitation::for_model(&p, &CorrelationSpec::Delta { strength: 1.0 }).is_err());
    }

    fn drive_for(p: &ModelParams, n: usize, dt: f64) -> Drive {
        Drive::constant(p, C64::new(p.static_coupling(), 0.0), n, dt)
    }

    #[test]
    fn matches_matrix_exponential_near_markov() {
        let p = ModelParams::default();
        let sys = SingleExcitation::for_model(&p, &CorrelationSpec::ou(1.0, 40.0)).unwrap();
        let (dt, n) = (1e-3, 10_000);
        let g = C64::new(0.0799, 0.0);
        let drive = Drive::constant(&p, g, n, dt);
        let states = run(&sys, Amplitudes::initial(&p), &drive, p.omega0, 1000).unwrap();
        let z = C64::new(0.0, 0.0);
        // resonant cavity, bath peak at 0 so the bath detuning is -ω0
        #[rustfmt::skip]
        let m = nalgebra::Matrix3::new(
            z, -I * g, z,
            -I * g, z, C64::new(-1.0, 0.0),
            z, C64::new(20.0, 0.0), -C64::new(40.0, -1.0),
        );
        let x0 = nalgebra::Vector3::new(p.init_atom.0, z, z);
        for (k, st) in states.iter().enumerate() {
            let x = (m * C64::new(k as f64, 0.0)).exp() * x0;
            let err = (st.a - x[0]).norm().max((st.b - x[1]).norm()).max((st.i - x[2]).norm());
            assert!(err < 1e-6, "t = {k}: {err:e}");
        }
    }

    #[test]
    fn bath_population_never_decreases_for_real_coupling() {
        let p = ModelParams::default();
        for spec in [CorrelationSpec::ou(1.0, 1.0), CorrelationSpec::ou(1.0, 0.5), CorrelationSpec::ou(1.0, 40.0)] {
            let sys = SingleExcitation::for_model(&p, &spec).unwrap();
            let states = run(&sys, Amplitudes::initial(&p), &drive_for(&p, 10_000, 0.01), p.omega0, 1).unwrap();
            for w in states.windows(2) {
                assert!(bath_population(&w[1]) >= bath_population(&w[0]) - 1e-7, "{spec:?} t = {}", w[1].t);
            }
        }
    }

    #[test]
    fn step_halving_shows_fourth_order() {
        let p = ModelParams::default();
        let sys = SingleExcitation::for_model(&p, &CorrelationSpec::ou(1.0, 1.0)).unwrap();
        let end = |dt: f64| {
            let n = (10.0 / dt).round() as usize;
            *run(&sys, Amplitudes::initial(&p), &drive_for(&p, n, dt), p.omega0, n).unwrap().last().unwrap()
        };
        let (a, b, c) = (end(0.2), end(0.1), end(0.05));
        let d1 = (a.a - b.a).norm() + (a.b - b.b).norm();
        let d2 = (b.a - c.a).norm() + (b.b - c.b).norm();
        assert!(d1 > 0.0 && d1 <= 16.5 * d2, "{d1:e} vs {d2:e}");
    }

    #[test]
    fn norm_loss_matches_memory_flux() {
        // d(|A|²+|B|²)/dt = -2 Re(B* I), checked with Simpson over step pairs
        let p = ModelParams::default();
        let sys = SingleExcitation::for_model(&p, &CorrelationSpec::ou(1.0, 1.0)).unwrap();
        let dt = 0.01;
        let states = run(&sys, Amplitudes::initial(&p), &drive_for(&p, 2000, dt), p.omega0, 1).unwrap();
        let norm = |s: &Amplitudes| s.a.norm_sqr() + s.b.norm_sqr();
        let flux = |s: &Amplitudes| -2.0 * (s.b.conj() * s.i).re;
        for w in states.windows(3).step_by(2) {
            let lhs = norm(&w[2]) - norm(&w[0]);
            let rhs = dt / 3.0 * (flux(&w[0]) + 4.0 * flux(&w[1]) + flux(&w[2]));
            assert!((lhs - rhs).abs() < 1e-9, "t = {}: {lhs:e} vs {rhs:e}", w[0].t);
        }
    }

    #[test]
    fn pure_state_entanglement_identities() {
        // Schmidt form of A|e0> + B|g1> + C|g0>: concurrence 2|A||B|,
        // negativity |A||B|, and concurrence_1x = 4|A|^2|B|^2 is their square
        let p = ModelParams { g0: 1.0, ..ModelParams::default() };
        let sys = SingleExcitation::resonant(0.0, 1.0);
        let states = run(&sys, Amplitudes::initial(&p), &drive_for(&p, 5000, 0.01), p.omega0, 50).unwrap();
        for s in &states {
            let rho = reduced_density(s, 1);
            let n = crate::measures::negativity(&rho).unwrap();
            let c = crate::measures::concurrence_2x2(&rho).unwrap();
            let ab = s.a.norm() * s.b.norm();
            assert!((n - ab).abs() < 1e-9, "t = {}", s.t);
            assert!((c - 2.0 * n).abs() < 1e-8);
            assert!((concurrence_1x(s) - c * c).abs() < 1e-8);
        }
    }
}
