//! Physical parameters, bath correlation functions and the maps from
//! classical noise values to the instantaneous coupling and atomic frequency.
//!
//! Frequencies and rates are in units of the cavity frequency; time is in
//! units of its inverse.

use std::f64::consts::PI;

use num_complex::Complex64 as C64;

use crate::error::{Error, Result};

/// Deterministic constants of the atom–cavity–bath system.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    /// Bare atomic transition frequency.
    pub omega0: f64,
    /// Cavity mode frequency.
    pub omega_cavity: f64,
    /// Bare coupling amplitude.
    pub g0: f64,
    /// Dimensionless balance phase `k x0`.
    pub kx0: f64,
    /// Highest retained cavity Fock state.
    pub n_max: usize,
    /// Initial atomic amplitudes `(c_e, c_g)`.
    pub init_atom: (C64, C64),
}

impl Default for ModelParams {
    fn default() -> Self {
        let h = std::f64::consts::FRAC_1_SQRT_2;
        Self {
            omega0: 1.0,
            omega_cavity: 1.0,
            g0: 1.0,
            kx0: 0.08,
            n_max: 1,
            init_atom: (C64::new(h, 0.0), C64::new(h, 0.0)),
        }
    }
}

impl ModelParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("omega0", self.omega0),
            ("omega_cavity", self.omega_cavity),
            ("g0", self.g0),
            ("kx0", self.kx0),
        ] {
            if !v.is_finite() {
                return Err(Error::Parameter(format!("{name} must be finite, got {v}")));
            }
        }
        if self.n_max < 1 {
            return Err(Error::Parameter("n_max must be >= 1".into()));
        }
        let (ce, cg) = self.init_atom;
        let norm = ce.norm_sqr() + cg.norm_sqr();
        if (norm - 1.0).abs() > 1e-12 {
            return Err(Error::Parameter(format!(
                "initial atomic state must be normalized, |c_e|^2 + |c_g|^2 = {norm}"
            )));
        }
        Ok(())
    }

    /// Dimension of the truncated atom ⊗ cavity space.
    pub fn dim(&self) -> usize {
        2 * (self.n_max + 1)
    }

    /// Coupling at the balance point, `G0 sin(k x0)`.
    pub fn static_coupling(&self) -> f64 {
        coupling_of(self, 0.0)
    }
}

/// One exponential component of a multi-exponential kernel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OuComponent {
    pub weight: f64,
    pub strength: f64,
    pub gamma: f64,
}

/// Bath (or classical-noise) two-time correlation function `α(τ)`, `τ = t - s`.
#[derive(Clone, Debug, PartialEq)]
pub enum CorrelationSpec {
    /// `(Γγ/2) exp(-γ|τ| - i ω_c τ)`; `center` is the spectral peak `ω_c`.
    Ou { strength: f64, gamma: f64, center: f64 },
    /// Markov limit `Γ δ(τ)`.
    Delta { strength: f64 },
    /// Weighted sum of real exponential kernels.
    SumOu(Vec<OuComponent>),
    /// Linearly interpolated table of `α(τ)` for `τ ≥ 0`; `α(-τ) = α(τ)*`.
    Tabulated { lags: Vec<f64>, values: Vec<C64> },
}

impl CorrelationSpec {
    pub fn ou(strength: f64, gamma: f64) -> Self {
        CorrelationSpec::Ou { strength, gamma, center: 0.0 }
    }

    /// Superposition of Lorentzians with weight `dγ/γ²` over `[gamma_low, gamma_high]`,
    /// discretized on `n` log-spaced nodes. Its spectrum approaches
    /// [`one_over_f_spectrum`] as `n` grows.
    pub fn one_over_f(strength: f64, gamma_low: f64, gamma_high: f64, n: usize) -> Result<Self> {
        if !(gamma_low > 0.0 && gamma_high > gamma_low) || n < 1 {
            return Err(Error::Parameter(
                "1/f superposition needs 0 < gamma_low < gamma_high and n >= 1".into(),
            ));
        }
        let (ll, lh) = (gamma_low.ln(), gamma_high.ln());
        let step = (lh - ll) / n as f64;
        let comps = (0..n)
            .map(|i| {
                // midpoint in log space; dγ = γ d(ln γ)
                let gamma = (ll + (i as f64 + 0.5) * step).exp();
                OuComponent { weight: step / gamma, strength, gamma }
            })
            .collect();
        Ok(CorrelationSpec::SumOu(comps))
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            CorrelationSpec::Ou { strength, gamma, center } => {
                if !(*strength >= 0.0) || !center.is_finite() {
                    return Err(Error::Parameter("OU strength must be >= 0".into()));
                }
                if !(*gamma > 0.0) || !gamma.is_finite() {
                    return Err(Error::Parameter(format!("OU gamma must be > 0, got {gamma}")));
                }
            }
            CorrelationSpec::Delta { strength } => {
                if !(*strength >= 0.0) {
                    return Err(Error::Parameter("delta strength must be >= 0".into()));
                }
            }
            CorrelationSpec::SumOu(comps) => {
                if comps.is_empty() {
                    return Err(Error::Parameter("sum of OU kernels is empty".into()));
                }
                for c in comps {
                    if !(c.weight >= 0.0) || !(c.strength >= 0.0) || !(c.gamma > 0.0) {
                        return Err(Error::Parameter(
                            "sum-OU components need weight >= 0, strength >= 0, gamma > 0".into(),
                        ));
                    }
                }
            }
            CorrelationSpec::Tabulated { lags, values } => {
                if lags.len() < 2 || lags.len() != values.len() {
                    return Err(Error::Parameter(
                        "tabulated correlation needs >= 2 lags and matching values".into(),
                    ));
                }
                if lags[0] != 0.0 || lags.windows(2).any(|w| !(w[1] > w[0])) {
                    return Err(Error::Parameter(
                        "tabulated lags must start at 0 and increase strictly".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Longest memory time of the kernel (0 for white noise).
    pub fn memory_time(&self) -> f64 {
        match self {
            CorrelationSpec::Ou { gamma, .. } => 1.0 / gamma,
            CorrelationSpec::Delta { .. } => 0.0,
            CorrelationSpec::SumOu(c) => c.iter().map(|c| 1.0 / c.gamma).fold(0.0, f64::max),
            CorrelationSpec::Tabulated { lags, .. } => *lags.last().unwrap_or(&0.0),
        }
    }

    /// Complex correlation `α(τ)` for any sign of `τ`.
    pub fn eval(&self, tau: f64) -> Result<C64> {
        if !tau.is_finite() {
            return Err(Error::Domain(format!("lag must be finite, got {tau}")));
        }
        let lag = tau.abs();
        let value = match self {
            CorrelationSpec::Ou { strength, gamma, center } => {
                C64::from_polar(0.5 * strength * gamma * (-gamma * lag).exp(), -center * lag)
            }
            CorrelationSpec::Delta { .. } => {
                return Err(Error::Parameter(
                    "delta correlation has no pointwise value".into(),
                ))
            }
            CorrelationSpec::SumOu(comps) => C64::new(
                comps
                    .iter()
                    .map(|c| c.weight * 0.5 * c.strength * c.gamma * (-c.gamma * lag).exp())
                    .sum(),
                0.0,
            ),
            CorrelationSpec::Tabulated { lags, values } => {
                let max = *lags.last().unwrap();
                if lag > max {
                    return Err(Error::OutOfRange { tau, max });
                }
                let j = lags.partition_point(|&x| x <= lag).clamp(1, lags.len() - 1);
                let w = (lag - lags[j - 1]) / (lags[j] - lags[j - 1]);
                values[j - 1] * (1.0 - w) + values[j] * w
            }
        };
        Ok(if tau < 0.0 { value.conj() } else { value })
    }

    /// Total weight `∫₀^∞ α` used to collapse the kernel in the Markov limit.
    pub fn markov_strength(&self) -> Option<f64> {
        match self {
            CorrelationSpec::Delta { strength } => Some(*strength),
            _ => None,
        }
    }
}

/// Real correlation value `α(τ)` of an exponential kernel.
pub fn ou_correlation(spec: &CorrelationSpec, tau: f64) -> Result<f64> {
    match spec {
        CorrelationSpec::Delta { .. } => Err(Error::Parameter(
            "ou_correlation needs an exponential or tabulated kernel".into(),
        )),
        _ => Ok(spec.eval(tau)?.re),
    }
}

/// Lorentzian spectral density `(1/2π) Γγ² / ((ω - ω_c)² + γ²)`, the Fourier
/// partner of [`ou_correlation`] under `α(τ) = ∫ g(ω) e^{-iωτ} dω`.
pub fn lorentzian_spectrum(spec: &CorrelationSpec, omega: f64) -> Result<f64> {
    let lorentz = |strength: f64, gamma: f64, center: f64| {
        strength * gamma * gamma / (2.0 * PI * ((omega - center).powi(2) + gamma * gamma))
    };
    match spec {
        CorrelationSpec::Ou { strength, gamma, center } => Ok(lorentz(*strength, *gamma, *center)),
        CorrelationSpec::SumOu(comps) => Ok(comps
            .iter()
            .map(|c| c.weight * lorentz(c.strength, c.gamma, 0.0))
            .sum()),
        CorrelationSpec::Delta { strength } => Ok(strength / (2.0 * PI)),
        CorrelationSpec::Tabulated { .. } => Err(Error::UnsupportedSpec(
            "no closed-form spectrum for a tabulated kernel".into(),
        )),
    }
}

/// Spectrum of the `dγ/γ²`-weighted Lorentzian superposition between the
/// cutoffs; behaves as `Γ/(4ω)` for `γ_L ≪ ω ≪ γ_H`.
pub fn one_over_f_spectrum(strength: f64, gamma_low: f64, gamma_high: f64, omega: f64) -> Result<f64> {
    if omega == 0.0 || !omega.is_finite() {
        return Err(Error::Domain("1/f spectrum is singular at omega = 0".into()));
    }
    if !(gamma_low > 0.0) || gamma_high < gamma_low {
        return Err(Error::Parameter("need 0 < gamma_low <= gamma_high".into()));
    }
    let band = (gamma_high / omega).atan() - (gamma_low / omega).atan();
    Ok(strength / (2.0 * PI) / omega * band)
}

/// `G0 sin(k x0 + kξ)`; `xi` is already the dimensionless phase `kξ`.
pub fn coupling_of(params: &ModelParams, xi: f64) -> f64 {
    params.g0 * (params.kx0 + xi).sin()
}

/// `ω0 + η`.
pub fn frequency_of(params: &ModelParams, eta: f64) -> f64 {
    params.omega0 + eta
}

/// Which Hamiltonian term the classical noise enters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NoiseChannel {
    None,
    /// Position noise in the coupling `G(t)`.
    XiCoupling,
    /// Frequency noise in `ω(t)`.
    EtaFrequency,
}

/// Statistics of the classical noise process.
#[derive(Clone, Debug, PartialEq)]
pub enum NoiseProcess {
    Ou { strength: f64, gamma: f64 },
    /// Two-valued `±amplitude` process; `flip_interval = None` means one
    /// simulation step.
    Telegraph { p: f64, amplitude: f64, flip_interval: Option<f64> },
    ConstantOffset(f64),
    Spectral(CorrelationSpec),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassicalNoiseSpec {
    pub channel: NoiseChannel,
    pub process: NoiseProcess,
    /// Label mixed into per-trajectory seeds so that different noise
    /// families drawn from the same base seed stay independent.
    pub seed_stream: u64,
}

impl ClassicalNoiseSpec {
    pub fn none() -> Self {
        Self {
            channel: NoiseChannel::None,
            process: NoiseProcess::ConstantOffset(0.0),
            seed_stream: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match &self.process {
            NoiseProcess::Ou { strength, gamma } => {
                if !(*strength >= 0.0) || !(*gamma > 0.0) {
                    return Err(Error::Parameter(
                        "classical OU noise needs strength >= 0 and gamma > 0".into(),
                    ));
                }
            }
            NoiseProcess::Telegraph { p, amplitude, flip_interval } => {
                if !(0.0..=1.0).contains(p) {
                    return Err(Error::Parameter(format!("telegraph p must lie in [0,1], got {p}")));
                }
                if !amplitude.is_finite() {
                    return Err(Error::Parameter("telegraph amplitude must be finite".into()));
                }
                if let Some(fi) = flip_interval {
                    if !(*fi > 0.0) {
                        return Err(Error::Parameter("telegraph flip_interval must be > 0".into()));
                    }
                }
            }
            NoiseProcess::ConstantOffset(c) => {
                if !c.is_finite() {
                    return Err(Error::Parameter("constant offset must be finite".into()));
                }
            }
            NoiseProcess::Spectral(spec) => spec.validate()?,
        }
        Ok(())
    }

    /// True when every trajectory sees the same noise path.
    pub fn is_deterministic(&self) -> bool {
        self.channel == NoiseChannel::None || matches!(self.process, NoiseProcess::ConstantOffset(_))
    }
}

/// How the η channel is represented during integration.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum EtaFrame {
    /// `ω(t) = ω0 + η(t)` in the Hamiltonian.
    #[default]
    Direct,
    /// Constant `ω0` with phase-noise coupling `G e^{iΦ(t)}`, `Φ = ∫η`.
    Rotated,
}

/// Coupling and atomic frequency sampled on a half-step grid. Index `2n` is
/// step `n`, `2n+1` its midpoint.
///
/// Smooth drives feed each RK4 stage its own sample. Noise paths are rough on
/// the scale of `dt` (a telegraph flip, or an OU path with `1/γ ~ dt`), and
/// stage-wise sampling then breaks positivity of the step map. With `hold`
/// set, step `n` uses the midpoint sample for every stage, so each step
/// integrates a constant generator.
#[derive(Clone, Debug)]
pub struct Drive {
    pub dt: f64,
    pub coupling: Vec<C64>,
    pub omega: Vec<f64>,
    pub hold: bool,
}

impl Drive {
    /// Noise-free drive with the balance-point coupling.
    pub fn constant(params: &ModelParams, coupling: C64, n_steps: usize, dt: f64) -> Self {
        Self {
            dt,
            coupling: vec![coupling; 2 * n_steps + 1],
            omega: vec![params.omega0; 2 * n_steps + 1],
            hold: false,
        }
    }

    /// Builds the drive for one trajectory. `noise` must be sampled at `dt/2`
    /// and cover at least `2 n_steps + 1` points when a channel is active.
    pub fn from_noise(
        params: &ModelParams,
        channel: NoiseChannel,
        noise: Option<&crate::noise_gen::NoisePath>,
        n_steps: usize,
        dt: f64,
        frame: EtaFrame,
    ) -> Result<Self> {
        let static_g = C64::new(params.static_coupling(), 0.0);
        let noise = match (channel, noise) {
            (NoiseChannel::None, _) => return Ok(Self::constant(params, static_g, n_steps, dt)),
            (_, None) => {
                return Err(Error::Parameter(
                    "an active noise channel needs a noise path".into(),
                ))
            }
            (_, Some(n)) => n,
        };
        let needed = 2 * n_steps + 1;
        if (noise.grid.dt - 0.5 * dt).abs() > 1e-12 * dt || noise.values.len() < needed {
            return Err(Error::Shape(format!(
                "noise path must have step dt/2 = {} and >= {needed} samples (got step {}, {} samples)",
                0.5 * dt,
                noise.grid.dt,
                noise.values.len()
            )));
        }
        let samples = &noise.values[..needed];
        match channel {
            NoiseChannel::XiCoupling => Ok(Self {
                dt,
                coupling: samples
                    .iter()
                    .map(|x| C64::new(coupling_of(params, x.re), 0.0))
                    .collect(),
                omega: vec![params.omega0; needed],
                hold: true,
            }),
            NoiseChannel::EtaFrequency => match frame {
                EtaFrame::Direct => Ok(Self {
                    dt,
                    coupling: vec![static_g; needed],
                    omega: samples.iter().map(|x| frequency_of(params, x.re)).collect(),
                    hold: true,
                }),
                EtaFrame::Rotated => {
                    let eta: Vec<f64> = samples.iter().map(|x| x.re).collect();
                    Ok(Self {
                        dt,
                        coupling: crate::evolve::rotate_frame_eta(&eta, static_g, 0.5 * dt),
                        omega: vec![params.omega0; needed],
                        // Φ is an integral of the path, smooth enough for stage sampling
                        hold: false,
                    })
                }
            },
            NoiseChannel::None => unreachable!(),
        }
    }

    pub fn n_steps(&self) -> usize {
        (self.coupling.len() - 1) / 2
    }

    /// Coupling at the three RK4 stage times of step `n`.
    #[inline]
    pub fn g_stages(&self, n: usize) -> [C64; 3] {
        stages(&self.coupling, n, self.hold)
    }

    #[inline]
    pub fn omega_stages(&self, n: usize) -> [f64; 3] {
        stages(&self.omega, n, self.hold)
    }
}

#[inline]
fn stages<T: Copy>(v: &[T], n: usize, hold: bool) -> [T; 3] {
    if hold {
        [v[2 * n + 1]; 3]
    } else {
        [v[2 * n], v[2 * n + 1], v[2 * n + 2]]
    }
}
