//! Classical noise realizations on a uniform time grid and the empirical
//! correlation estimator used to validate them.

use std::io::Write;

use num_complex::Complex64 as C64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::model::{CorrelationSpec, NoiseProcess};

/// Uniform grid `t0, t0 + dt, …, t0 + n_steps·dt`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimeGrid {
    pub t0: f64,
    pub dt: f64,
    pub n_steps: usize,
}

impl TimeGrid {
    pub fn new(t0: f64, dt: f64, n_steps: usize) -> Result<Self> {
        if !(dt > 0.0) || !dt.is_finite() || n_steps < 1 || !t0.is_finite() {
            return Err(Error::Parameter(format!(
                "time grid needs dt > 0 and n_steps >= 1 (dt = {dt}, n_steps = {n_steps})"
            )));
        }
        Ok(Self { t0, dt, n_steps })
    }

    /// Half-step grid covering `[0, horizon]` used to drive RK4 stage points.
    pub fn half_step(dt: f64, n_steps: usize) -> Result<Self> {
        Self::new(0.0, 0.5 * dt, 2 * n_steps)
    }

    pub fn len(&self) -> usize {
        self.n_steps + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn time(&self, i: usize) -> f64 {
        self.t0 + i as f64 * self.dt
    }

    pub fn span(&self) -> f64 {
        self.n_steps as f64 * self.dt
    }
}

/// One realization of a classical process. Real processes have zero
/// imaginary parts.
#[derive(Clone, Debug, PartialEq)]
pub struct NoisePath {
    pub grid: TimeGrid,
    pub values: Vec<C64>,
    pub spec_tag: NoiseProcess,
}

impl NoisePath {
    fn real(grid: TimeGrid, values: Vec<f64>, spec_tag: NoiseProcess) -> Self {
        Self {
            grid,
            values: values.into_iter().map(|v| C64::new(v, 0.0)).collect(),
            spec_tag,
        }
    }

    pub fn real_parts(&self) -> Vec<f64> {
        self.values.iter().map(|v| v.re).collect()
    }

    /// Writes `t, value_re, value_im` rows.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "t,value_re,value_im")?;
        for (i, v) in self.values.iter().enumerate() {
            writeln!(out, "{},{},{}", self.grid.time(i), v.re, v.im)?;
        }
        Ok(())
    }
}

pub(crate) fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Counter-based seed derivation: independent streams for every
/// `(base, stream, index)` triple, independent of scheduling.
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;
    mix(mix(mix(base).wrapping_add(stream.wrapping_mul(GOLDEN))).wrapping_add(index.wrapping_mul(GOLDEN)))
}

/// Exact AR(1) discretization of a stationary OU process with correlation
/// `(Γγ/2) e^{-γ|τ|}`, started from its stationary law.
pub fn sample_ou(strength: f64, gamma: f64, grid: TimeGrid, seed: u64) -> Result<NoisePath> {
    if !(gamma > 0.0) || !gamma.is_finite() {
        return Err(Error::Parameter(format!("OU gamma must be > 0, got {gamma}")));
    }
    if !(strength >= 0.0) {
        return Err(Error::Parameter(format!("OU strength must be >= 0, got {strength}")));
    }
    let mut rng = rng_from_seed(seed);
    let sigma = (0.5 * strength * gamma).sqrt();
    let decay = (-gamma * grid.dt).exp();
    let kick = sigma * (-(-2.0 * gamma * grid.dt).exp_m1()).sqrt();
    let mut x = sigma * rng.sample::<f64, _>(StandardNormal);
    let mut values = Vec::with_capacity(grid.len());
    values.push(x);
    for _ in 0..grid.n_steps {
        x = x * decay + kick * rng.sample::<f64, _>(StandardNormal);
        values.push(x);
    }
    Ok(NoisePath::real(grid, values, NoiseProcess::Ou { strength, gamma }))
}

/// Piecewise-constant `±amplitude` path. Interval boundaries sit at
/// `t0 + k·flip_interval`; at each one the sign flips with probability `p`.
pub fn sample_telegraph(
    p: f64,
    amplitude: f64,
    flip_interval: f64,
    grid: TimeGrid,
    seed: u64,
) -> Result<NoisePath> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Parameter(format!("telegraph p must lie in [0,1], got {p}")));
    }
    if !(flip_interval > 0.0) {
        return Err(Error::Parameter("telegraph flip_interval must be > 0".into()));
    }
    let mut rng = rng_from_seed(seed);
    let mut sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
    let mut interval = 0u64;
    let mut values = Vec::with_capacity(grid.len());
    for i in 0..grid.len() {
        // tolerance keeps boundaries that coincide with grid points on the grid
        let k = ((i as f64 * grid.dt) / flip_interval + 1e-9).floor() as u64;
        while interval < k {
            if rng.random::<f64>() < p {
                sign = -sign;
            }
            interval += 1;
        }
        values.push(sign * amplitude);
    }
    Ok(NoisePath::real(
        grid,
        values,
        NoiseProcess::Telegraph { p, amplitude, flip_interval: Some(flip_interval) },
    ))
}

/// Path identically equal to `c`.
pub fn constant_offset(c: f64, grid: TimeGrid) -> NoisePath {
    NoisePath::real(grid, vec![c; grid.len()], NoiseProcess::ConstantOffset(c))
}

/// Complex Gaussian path with two-point function `⟨z(t+τ) z*(t)⟩ = α(τ)`,
/// built by filtering complex white noise `(z1 + i z2)/√2` with the kernel
/// whose power spectrum is the Fourier transform of `α`. The filtering is a
/// circular convolution; a burn-in margin of four memory times is discarded
/// at each end to suppress wrap-around correlation.
pub fn sample_spectral(target: &CorrelationSpec, grid: TimeGrid, seed: u64) -> Result<NoisePath> {
    target.validate()?;
    let memory = target.memory_time();
    if memory > grid.span() / 4.0 {
        return Err(Error::Parameter(format!(
            "memory time {memory} exceeds a quarter of the grid span {}",
            grid.span()
        )));
    }
    let margin = (4.0 * memory / grid.dt).ceil() as usize;
    let n = (grid.len() + 2 * margin).next_power_of_two();
    let dt = grid.dt;

    // circular correlation sequence c_m = α(m dt), c_{N-m} = α(m dt)*
    let mut c = vec![C64::new(0.0, 0.0); n];
    match target {
        CorrelationSpec::Delta { strength } => c[0] = C64::new(strength / dt, 0.0),
        _ => {
            for m in 0..=n / 2 {
                let v = match target.eval(m as f64 * dt) {
                    // tables are zero beyond their last lag
                    Err(Error::OutOfRange { .. }) => C64::new(0.0, 0.0),
                    other => other?,
                };
                c[m] = v;
                if m > 0 && m < n - m {
                    c[n - m] = v.conj();
                }
            }
        }
    }
    let mut planner = FftPlanner::<f64>::new();
    let forward = planner.plan_fft_forward(n);
    let inverse = planner.plan_fft_inverse(n);
    forward.process(&mut c);
    let peak = c.iter().map(|v| v.re.abs()).fold(0.0, f64::max);
    let floor = -1e-9 * peak.max(f64::MIN_POSITIVE);
    if let Some(k) = c.iter().position(|v| v.re < floor) {
        return Err(Error::InvalidCorrelation(format!(
            "spectral density is negative ({}) at frequency bin {k}",
            c[k].re
        )));
    }
    let filter: Vec<f64> = c.iter().map(|v| v.re.max(0.0).sqrt()).collect();

    let mut rng = rng_from_seed(seed);
    let scale = std::f64::consts::FRAC_1_SQRT_2;
    let mut buf: Vec<C64> = (0..n)
        .map(|_| {
            let (z1, z2): (f64, f64) = (rng.sample(StandardNormal), rng.sample(StandardNormal));
            C64::new(z1 * scale, z2 * scale)
        })
        .collect();
    forward.process(&mut buf);
    for (b, f) in buf.iter_mut().zip(&filter) {
        *b *= *f;
    }
    inverse.process(&mut buf);
    let norm = 1.0 / n as f64;
    let values = buf[margin..margin + grid.len()].iter().map(|v| v * norm).collect();
    Ok(NoisePath { grid, values, spec_tag: NoiseProcess::Spectral(target.clone()) })
}

/// Real path with correlation `α(τ)` obtained from the complex synthesis as
/// `√2 Re z`.
pub fn sample_spectral_real(target: &CorrelationSpec, grid: TimeGrid, seed: u64) -> Result<NoisePath> {
    let mut path = sample_spectral(target, grid, seed)?;
    for v in &mut path.values {
        *v = C64::new(std::f64::consts::SQRT_2 * v.re, 0.0);
    }
    Ok(path)
}

/// Draws the path a [`NoiseProcess`] describes on `grid`. Telegraph paths
/// without an explicit flip interval flip on every `default_flip_interval`.
pub fn sample_process(
    process: &NoiseProcess,
    grid: TimeGrid,
    seed: u64,
    default_flip_interval: f64,
) -> Result<NoisePath> {
    match process {
        NoiseProcess::Ou { strength, gamma } => sample_ou(*strength, *gamma, grid, seed),
        NoiseProcess::Telegraph { p, amplitude, flip_interval } => sample_telegraph(
            *p,
            *amplitude,
            flip_interval.unwrap_or(default_flip_interval),
            grid,
            seed,
        ),
        NoiseProcess::ConstantOffset(c) => Ok(constant_offset(*c, grid)),
        NoiseProcess::Spectral(spec) => sample_spectral_real(spec, grid, seed),
    }
}

/// Empirical correlation at one lag.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CorrelationEstimate {
    pub tau: f64,
    pub value: f64,
    pub stderr: f64,
}

/// Estimates `Re⟨x(t+τ) x*(t)⟩` for lags `0..=max_lag` grid steps, averaging
/// over `t` within each path and then over paths; the standard error comes
/// from the path-to-path scatter.
pub fn estimate_correlation(paths: &[NoisePath], max_lag: usize) -> Result<Vec<CorrelationEstimate>> {
    if paths.len() < 2 {
        return Err(Error::Parameter("correlation estimate needs at least 2 paths".into()));
    }
    let grid = paths[0].grid;
    if paths.iter().any(|p| p.grid != grid || p.values.len() != grid.len()) {
        return Err(Error::Shape("all paths must share one time grid".into()));
    }
    if max_lag > grid.n_steps {
        return Err(Error::Shape(format!(
            "max_lag {max_lag} exceeds the grid length {}",
            grid.n_steps
        )));
    }
    let n_paths = paths.len() as f64;
    let out = (0..=max_lag)
        .map(|lag| {
            let count = (grid.len() - lag) as f64;
            let per_path: Vec<f64> = paths
                .iter()
                .map(|p| {
                    p.values[lag..]
                        .iter()
                        .zip(&p.values)
                        .map(|(a, b)| (a * b.conj()).re)
                        .sum::<f64>()
                        / count
                })
                .collect();
            let mean = per_path.iter().sum::<f64>() / n_paths;
            let var = per_path.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n_paths - 1.0);
            CorrelationEstimate {
                tau: lag as f64 * grid.dt,
                value: mean,
                stderr: (var / n_paths).sqrt(),
            }
        })
        .collect();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> TimeGrid {
        TimeGrid::new(0.0, 0.01, 1000).unwrap()
    }

    #[test]
    fn ou_is_seed_deterministic() {
        let a = sample_ou(1.0, 1.0, grid(), 7).unwrap();
        let b = sample_ou(1.0, 1.0, grid(), 7).unwrap();
        let c = sample_ou(1.0, 1.0, grid(), 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.values, c.values);
        assert!(matches!(sample_ou(1.0, 0.0, grid(), 1), Err(Error::Parameter(_))));
    }

    #[test]
    fn telegraph_limits() {
        let g = TimeGrid::new(0.0, 0.01, 200).unwrap();
        let flip = sample_telegraph(1.0, 2.0, 0.01, g, 3).unwrap();
        for w in flip.values.windows(2) {
            assert_eq!(w[0].re, -w[1].re);
            assert_eq!(w[0].re.abs(), 2.0);
        }
        let hold = sample_telegraph(0.0, 2.0, 0.01, g, 3).unwrap();
        assert!(hold.values.iter().all(|v| *v == hold.values[0]));
    }

    #[test]
    fn telegraph_flips_only_at_boundaries() {
        // half-step grid, boundaries every full step
        let g = TimeGrid::new(0.0, 0.005, 400).unwrap();
        let path = sample_telegraph(1.0, 1.0, 0.01, g, 11).unwrap();
        for k in 0..200 {
            assert_eq!(path.values[2 * k], path.values[2 * k + 1]);
            assert_eq!(path.values[2 * k + 1].re, -path.values[2 * k + 2].re);
        }
    }

    #[test]
    fn constant_offset_values() {
        let p = constant_offset(0.05, grid());
        assert!(p.values.iter().all(|v| v.re == 0.05 && v.im == 0.0));
        let z = constant_offset(0.0, grid());
        assert!(z.values.iter().all(|v| *v == C64::new(0.0, 0.0)));
    }

    #[test]
    fn zero_paths_estimate_zero() {
        let paths = vec![constant_offset(0.0, grid()); 3];
        for e in estimate_correlation(&paths, 5).unwrap() {
            assert_eq!(e.value, 0.0);
            assert_eq!(e.stderr, 0.0);
        }
    }

    #[test]
    fn telegraph_lag_zero_is_amplitude_squared() {
        let paths: Vec<_> = (0..4)
            .map(|s| sample_telegraph(0.3, 1.5, 0.01, grid(), s).unwrap())
            .collect();
        let est = estimate_correlation(&paths, 0).unwrap();
        assert_eq!(est[0].value, 2.25);
    }

    #[test]
    fn estimator_rejects_bad_input() {
        let one = vec![constant_offset(0.0, grid())];
        assert!(estimate_correlation(&one, 1).is_err());
        let mixed = vec![
            constant_offset(0.0, grid()),
            constant_offset(0.0, TimeGrid::new(0.0, 0.02, 1000).unwrap()),
        ];
        assert!(matches!(estimate_correlation(&mixed, 1), Err(Error::Shape(_))));
    }

    #[test]
    fn white_noise_synthesis_is_delta_correlated() {
        let g = TimeGrid::new(0.0, 0.01, 2000).unwrap();
        let spec = CorrelationSpec::Delta { strength: 1.0 };
        let paths: Vec<_> = (0..50).map(|s| sample_spectral(&spec, g, s).unwrap()).collect();
        let est = estimate_correlation(&paths, 1).unwrap();
        assert!((est[0].value - 100.0).abs() < 5.0, "{}", est[0].value);
        assert!(est[0].value > 50.0 * est[1].value.abs());
    }

    #[test]
    fn spectral_rejects_negative_spectrum() {
        // a box correlation has a sinc spectrum with negative lobes
        let lags: Vec<f64> = (0..=40).map(|i| i as f64 * 0.01).collect();
        let values = lags.iter().map(|_| C64::new(1.0, 0.0)).collect();
        let spec = CorrelationSpec::Tabulated { lags, values };
        let g = TimeGrid::new(0.0, 0.01, 1000).unwrap();
        assert!(matches!(sample_spectral(&spec, g, 1), Err(Error::InvalidCorrelation(_))));
    }

    #[test]
    fn derived_seeds_differ() {
        let a = derive_seed(1, 0, 0);
        assert_ne!(a, derive_seed(1, 0, 1));
        assert_ne!(a, derive_seed(1, 1, 0));
        assert_ne!(a, derive_seed(2, 0, 0));
        assert_eq!(a, derive_seed(1, 0, 0));
    }

    fn ou_paths(n: usize, dt: f64, steps: usize) -> Vec<NoisePath> {
        let g = TimeGrid::new(0.0, dt, steps).unwrap();
        (0..n).map(|i| sample_ou(1.0, 1.0, g, derive_seed(2024, 0, i as u64)).unwrap()).collect()
    }

    #[test]
    fn ou_ensemble_variance_and_unit_lag() {
        let paths = ou_paths(10_000, 0.01, 2000);
        let est = estimate_correlation(&paths, 100).unwrap();
        assert!((est[0].value - 0.5).abs() < 0.025, "variance {}", est[0].value);
        let target = 0.5 * (-1.0f64).exp();
        assert!((est[100].value - target).abs() < 0.05 * target, "lag 1: {}", est[100].value);
    }

    #[test]
    fn ou_frequency_noise_has_unbiased_mean() {
        let p = crate::model::ModelParams::default();
        let paths = ou_paths(10_000, 0.01, 10);
        let xs: Vec<f64> = paths.iter().map(|path| crate::model::frequency_of(&p, path.values[5].re)).collect();
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((mean - p.omega0).abs() < 3.0 * (var / n).sqrt(), "{mean}");
    }

    #[test]
    fn telegraph_half_flip_decorrelates_one_boundary() {
        // ten boundary crossings per path, 10^5 pairs in total
        let g = TimeGrid::new(0.0, 0.01, 10).unwrap();
        let n = 10_000;
        let sum: f64 = (0..n)
            .map(|i| {
                let path = sample_telegraph(0.5, 1.0, 0.01, g, derive_seed(5, 0, i)).unwrap();
                path.values.windows(2).map(|w| w[0].re * w[1].re).sum::<f64>()
            })
            .sum();
        let mean = sum / (10 * n) as f64;
        assert!(mean.abs() < 0.02, "{mean}");
    }

    #[test]
    fn spectral_synthesis_reproduces_ou_kernel() {
        let g = TimeGrid::new(0.0, 0.1, 200).unwrap();
        let spec = CorrelationSpec::ou(1.0, 1.0);
        let paths: Vec<_> = (0..10_000).map(|i| sample_spectral(&spec, g, derive_seed(9, 1, i)).unwrap()).collect();
        let est = estimate_correlation(&paths, 30).unwrap();
        for e in &est {
            let target = 0.5 * (-e.tau).exp();
            assert!((e.value - target).abs() < 0.1 * target, "tau {}: {} vs {target}", e.tau, e.value);
        }
        let count = (paths.len() * g.len()) as f64;
        let re: f64 = paths.iter().flat_map(|p| p.values.iter()).map(|v| v.re * v.re).sum::<f64>() / count;
        let im: f64 = paths.iter().flat_map(|p| p.values.iter()).map(|v| v.im * v.im).sum::<f64>() / count;
        assert!((re - 0.25).abs() < 0.0125 && (im - 0.25).abs() < 0.0125, "{re} {im}");
    }

    #[test]
    fn real_spectral_paths_match_ou_generator() {
        let g = TimeGrid::new(0.0, 0.1, 200).unwrap();
        let spec = CorrelationSpec::ou(1.0, 1.0);
        let spectral: Vec<_> =
            (0..10_000).map(|i| sample_spectral_real(&spec, g, derive_seed(3, 2, i)).unwrap()).collect();
        let ou = ou_paths(10_000, 0.1, 200);
        let a = estimate_correlation(&spectral, 20).unwrap();
        let b = estimate_correlation(&ou, 20).unwrap();
        assert!((b[0].value - 0.5).abs() < 0.025);
        for lag in [0, 10, 20] {
            let tol = 2.0 * a[lag].stderr.hypot(b[lag].stderr);
            assert!((a[lag].value - b[lag].value).abs() < tol, "lag {lag}: {} vs {}", a[lag].value, b[lag].value);
        }
    }

    proptest::proptest! {
        #[test]
        fn telegraph_is_two_valued(p in 0.0f64..=1.0, amp in 0.01f64..5.0, seed in 0u64..1000) {
            let path = sample_telegraph(p, amp, 0.03, grid(), seed).unwrap();
            proptest::prop_assert!(path.values.iter().all(|v| v.im == 0.0 && v.re.abs() == amp));
        }

        #[test]
        fn ou_paths_are_finite_and_reproducible(g in 0.05f64..50.0, s in 0.0f64..5.0, seed: u64) {
            let a = sample_ou(s, g, grid(), seed).unwrap();
            proptest::prop_assert!(a.values.iter().all(|v| v.is_finite()));
            proptest::prop_assert_eq!(a, sample_ou(s, g, grid(), seed).unwrap());
        }
    }
}
