//! Memory functionals `F_i(t) = ∫₀ᵗ α(t,s) f_i(t,s) ds` of the O-operator
//! expansion `O(t,s) = Σ f_i(t,s) O_i` with `O1 = a`, `O2 = σ₋aa†`,
//! `O3 = σ₋a†a`, `O4 = σ_z a`, and the effective dissipator `Ō = Σ F_i O_i`.

use nalgebra::DMatrix;
use num_complex::Complex64 as C64;

use crate::error::{Error, Result};
use crate::evolve::Operators;
use crate::model::CorrelationSpec;
use crate::noise_gen::TimeGrid;

const I: C64 = C64 { re: 0.0, im: 1.0 };
const ZERO: C64 = C64 { re: 0.0, im: 0.0 };
const ONE: C64 = C64 { re: 1.0, im: 0.0 };

/// Boundary values `f_i(t,t)`.
pub const BOUNDARY: [C64; 4] = [ONE, ZERO, ZERO, ZERO];

/// Sign of the quadratic `f·F` terms in the coefficient equations.
///
/// `Consistent` follows from `∂ₜO = [-iH - a†Ō, O]`. `Published` flips every
/// quadratic term; it is kept to demonstrate the resulting mismatch against the
/// exact single-excitation solution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum SignConvention {
    #[default]
    Consistent,
    Published,
}

impl SignConvention {
    fn factor(self) -> f64 {
        match self {
            SignConvention::Consistent => 1.0,
            SignConvention::Published => -1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FCoefficients {
    pub t: f64,
    pub f: [C64; 4],
    pub f5: Option<C64>,
}

impl FCoefficients {
    pub fn zero(t: f64) -> Self {
        Self { t, f: [ZERO; 4], f5: None }
    }

    /// Markov values `F1 = Γ/2`, all others zero.
    pub fn markov(t: f64, strength: f64) -> Self {
        Self { t, f: [C64::new(0.5 * strength, 0.0), ZERO, ZERO, ZERO], f5: None }
    }

    fn is_finite(&self) -> bool {
        self.f.iter().all(|z| z.is_finite())
    }
}

/// Instantaneous Hamiltonian parameters seen by the coefficient equations.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Couplings {
    pub g: C64,
    pub omega: f64,
    pub omega_cavity: f64,
}

/// Linear part `[-iH, Σ f_i O_i]` projected on the basis.
#[inline]
fn linear(f: &[C64; 4], c: &Couplings) -> [C64; 4] {
    let g = c.g;
    let gc = c.g.conj();
    [
        I * c.omega_cavity * f[0] + I * 0.5 * g * (f[1] - f[2]),
        I * c.omega * f[1] + I * gc * (f[0] - f[3]),
        I * c.omega * f[2] - I * gc * (f[0] + f[3]),
        I * c.omega_cavity * f[3] - I * 0.5 * g * (f[1] + f[2]),
    ]
}

/// Quadratic part `-[a†Ō, O]` for the consistent convention.
#[inline]
fn quadratic(f: &[C64; 4], big: &[C64; 4]) -> [C64; 4] {
    [
        f[0] * big[0] + f[3] * big[3],
        f[0] * big[1] - f[3] * big[1],
        -f[0] * big[1] - f[3] * big[1] + 2.0 * f[2] * big[3],
        f[3] * big[0] + f[0] * big[3],
    ]
}

#[inline]
fn f_rhs(f: &[C64; 4], big: &[C64; 4], c: &Couplings, sign: f64) -> [C64; 4] {
    let l = linear(f, c);
    let q = quadratic(f, big);
    [
        l[0] + sign * q[0],
        l[1] + sign * q[1],
        l[2] + sign * q[2],
        l[3] + sign * q[3],
    ]
}

#[inline]
fn axpy(x: &[C64; 4], k: &[C64; 4], h: f64) -> [C64; 4] {
    [x[0] + k[0] * h, x[1] + k[1] * h, x[2] + k[2] * h, x[3] + k[3] * h]
}

#[inline]
fn rk4_combine(x: &[C64; 4], k: [&[C64; 4]; 4], dt: f64) -> [C64; 4] {
    let w = dt / 6.0;
    let mut out = *x;
    for i in 0..4 {
        out[i] += (k[0][i] + 2.0 * k[1][i] + 2.0 * k[2][i] + k[3][i]) * w;
    }
    out
}

fn stage_couplings(g: [C64; 3], omega: [f64; 3], omega_cavity: f64) -> [Couplings; 3] {
    [0, 1, 2].map(|j| Couplings { g: g[j], omega: omega[j], omega_cavity })
}

/// Closed ODE for `F1..F4` under a single exponential kernel
/// `α(τ) = (Γγ/2) e^{-(γ + iω_c)τ}`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClosedKernel {
    pub strength: f64,
    pub gamma: f64,
    pub center: f64,
}

impl ClosedKernel {
    pub fn from_spec(spec: &CorrelationSpec) -> Result<Self> {
        match spec {
            CorrelationSpec::Ou { strength, gamma, center } => {
                Ok(Self { strength: *strength, gamma: *gamma, center: *center })
            }
            other => Err(Error::UnsupportedSpec(format!(
                "closed F equations need a single OU kernel, got {}",
                kind_name(other)
            ))),
        }
    }

    fn rhs(&self, big: &[C64; 4], c: &Couplings, sign: f64) -> [C64; 4] {
        let decay = C64::new(self.gamma, self.center);
        let mut d = f_rhs(big, big, c, sign);
        for (i, di) in d.iter_mut().enumerate() {
            *di -= decay * big[i];
        }
        d[0] += 0.5 * self.strength * self.gamma;
        d
    }
}

fn kind_name(spec: &CorrelationSpec) -> &'static str {
    match spec {
        CorrelationSpec::Ou { .. } => "Ou",
        CorrelationSpec::Delta { .. } => "Delta",
        CorrelationSpec::SumOu(_) => "SumOu",
        CorrelationSpec::Tabulated { .. } => "Tabulated",
    }
}

/// One RK4 step of the closed `F` system; `g`, `omega` at `t, t+dt/2, t+dt`.
#[allow(clippy::too_many_arguments)]
pub fn step_f_closed(
    state: &FCoefficients,
    g: [C64; 3],
    omega: [f64; 3],
    omega_cavity: f64,
    kernel: &ClosedKernel,
    dt: f64,
    convention: SignConvention,
) -> Result<FCoefficients> {
    closed_stages(state, g, omega, omega_cavity, kernel, dt, convention).map(|(next, _)| next)
}

/// Closed step that also returns `F` at the four RK4 stage points.
#[allow(clippy::too_many_arguments)]
fn closed_stages(
    state: &FCoefficients,
    g: [C64; 3],
    omega: [f64; 3],
    omega_cavity: f64,
    kernel: &ClosedKernel,
    dt: f64,
    convention: SignConvention,
) -> Result<(FCoefficients, [[C64; 4]; 4])> {
    let sign = convention.factor();
    let c = stage_couplings(g, omega, omega_cavity);
    let x = state.f;
    let s2 = |k: &[C64; 4], h: f64| axpy(&x, k, h);
    let k1 = kernel.rhs(&x, &c[0], sign);
    let x2 = s2(&k1, 0.5 * dt);
    let k2 = kernel.rhs(&x2, &c[1], sign);
    let x3 = s2(&k2, 0.5 * dt);
    let k3 = kernel.rhs(&x3, &c[1], sign);
    let x4 = s2(&k3, dt);
    let k4 = kernel.rhs(&x4, &c[2], sign);
    let next = FCoefficients { t: state.t + dt, f: rk4_combine(&x, [&k1, &k2, &k3, &k4], dt), f5: None };
    if !next.is_finite() {
        return Err(Error::NumericOverflow { t: next.t });
    }
    Ok((next, [x, x2, x3, x4]))
}

/// Two-time table of `f_i(t, s)` for `s` on a uniform grid up to the current `t`.
#[derive(Clone, Debug)]
pub struct FGrid {
    pub s_grid: TimeGrid,
    /// `rows[k] = f(t, s_k)`; the last row is the boundary `f(t,t)`.
    pub rows: Vec<[C64; 4]>,
    /// `α(m dt/2)` for `m = 0, 1, ...`.
    alpha_half: Vec<C64>,
    /// Strength of a white-noise kernel, which bypasses the quadrature.
    markov: Option<f64>,
    pub convention: SignConvention,
    pub t: f64,
}

impl FGrid {
    /// Empty grid at `t = 0` with the kernel tabulated for `n_steps` steps.
    pub fn new(alpha1: &CorrelationSpec, dt: f64, n_steps: usize, convention: SignConvention) -> Result<Self> {
        alpha1.validate()?;
        let s_grid = TimeGrid::new(0.0, dt, n_steps.max(1))?;
        let markov = alpha1.markov_strength();
        let alpha_half = if markov.is_some() {
            Vec::new()
        } else {
            (0..=2 * n_steps + 2)
                .map(|m| match alpha1.eval(0.5 * dt * m as f64) {
                    Err(Error::OutOfRange { .. }) => Ok(ZERO),
                    other => other,
                })
                .collect::<Result<Vec<_>>>()?
        };
        Ok(Self {
            s_grid,
            rows: vec![BOUNDARY],
            alpha_half,
            markov,
            convention,
            t: 0.0,
        })
    }

    fn dt(&self) -> f64 {
        self.s_grid.dt
    }

    /// `F(t_n + c dt)` for stage rows `f(·, s_k)`, `k = 0..=n`, with the
    /// segment `[s_n, t_n + c dt]` closed by the boundary value. `half` is `2c`.
    fn quadrature(&self, rows: &[[C64; 4]], half: usize) -> [C64; 4] {
        if let Some(strength) = self.markov {
            return [C64::new(0.5 * strength, 0.0), ZERO, ZERO, ZERO];
        }
        let n = rows.len() - 1;
        let dt = self.dt();
        let mut acc = [ZERO; 4];
        if n == 0 && half == 0 {
            return acc;
        }
        let mut add = |row: &[C64; 4], w: C64| {
            for i in 0..4 {
                acc[i] += w * row[i];
            }
        };
        for (k, row) in rows.iter().enumerate() {
            // lag (n - k) dt + c dt in half steps
            let a = self.alpha_half[2 * (n - k) + half];
            let mut w = if k == 0 || k == n { 0.5 * dt } else { dt };
            if n == 0 {
                w = 0.0;
            }
            if k == n {
                w += 0.25 * dt * half as f64;
            }
            add(row, a * w);
        }
        let tail = 0.25 * dt * half as f64;
        add(&BOUNDARY, self.alpha_half[0] * tail);
        acc
    }

    /// Current functionals.
    pub fn coefficients(&self) -> FCoefficients {
        FCoefficients { t: self.t, f: self.quadrature(&self.rows, 0), f5: None }
    }
}

/// Advances every stored `f(·, s)` by one RK4 step in `t`, then appends the
/// boundary row for `s = t + dt`.
pub fn step_f_grid(grid: &mut FGrid, g: [C64; 3], omega: [f64; 3], omega_cavity: f64) -> Result<FCoefficients> {
    grid_stages(grid, g, omega, omega_cavity).map(|(next, _)| next)
}

fn grid_stages(
    grid: &mut FGrid,
    g: [C64; 3],
    omega: [f64; 3],
    omega_cavity: f64,
) -> Result<(FCoefficients, [[C64; 4]; 4])> {
    let n = grid.rows.len();
    if grid.markov.is_none() && grid.alpha_half.len() < 2 * n + 1 {
        return Err(Error::Shape(format!("F grid was sized for {} steps", grid.s_grid.n_steps)));
    }
    let dt = grid.dt();
    let sign = grid.convention.factor();
    let c = stage_couplings(g, omega, omega_cavity);
    let x = std::mem::take(&mut grid.rows);
    let mut ks: [Vec<[C64; 4]>; 4] = Default::default();
    let mut stage_f = [[ZERO; 4]; 4];
    let mut buf = x.clone();
    let plan = [(0usize, 0usize, 0.0), (1, 1, 0.5), (2, 1, 0.5), (3, 2, 1.0)];
    for &(j, half, _) in &plan {
        if j > 0 {
            let h = plan[j].2 * dt;
            for ((b, r), d) in buf.iter_mut().zip(&x).zip(&ks[j - 1]) {
                *b = axpy(r, d, h);
            }
        }
        let big = grid.quadrature(&buf, half);
        stage_f[j] = big;
        let cc = &c[half];
        ks[j] = buf.iter().map(|r| f_rhs(r, &big, cc, sign)).collect();
    }
    let mut rows: Vec<[C64; 4]> = x
        .iter()
        .enumerate()
        .map(|(i, r)| rk4_combine(r, [&ks[0][i], &ks[1][i], &ks[2][i], &ks[3][i]], dt))
        .collect();
    rows.push(BOUNDARY);
    grid.rows = rows;
    grid.t += dt;
    let out = grid.coefficients();
    if !out.is_finite() {
        return Err(Error::NumericOverflow { t: out.t });
    }
    Ok((out, stage_f))
}

/// `Ō = F1 a + F2 σ₋aa† + F3 σ₋a†a + F4 σ_z a`.
pub fn obar_matrix(f: &FCoefficients, n_max: usize) -> DMatrix<C64> {
    Operators::new(n_max).obar(&f.f)
}

/// Per-trajectory source of `F(t)`.
#[derive(Clone, Debug)]
pub enum MemorySolver {
    Markov(f64),
    Closed { kernel: ClosedKernel, state: FCoefficients, convention: SignConvention },
    Grid(Box<FGrid>),
}

impl MemorySolver {
    /// Closed equations for a single OU kernel, the tabulated grid otherwise.
    pub fn for_spec(alpha1: &CorrelationSpec, dt: f64, n_steps: usize, convention: SignConvention) -> Result<Self> {
        alpha1.validate()?;
        Ok(match alpha1 {
            CorrelationSpec::Delta { strength } => MemorySolver::Markov(*strength),
            CorrelationSpec::Ou { .. } => MemorySolver::Closed {
                kernel: ClosedKernel::from_spec(alpha1)?,
                state: FCoefficients::zero(0.0),
                convention,
            },
            _ => MemorySolver::Grid(Box::new(FGrid::new(alpha1, dt, n_steps, convention)?)),
        })
    }

    pub fn current(&self) -> FCoefficients {
        match self {
            MemorySolver::Markov(s) => FCoefficients::markov(0.0, *s),
            MemorySolver::Closed { state, .. } => *state,
            MemorySolver::Grid(g) => g.coefficients(),
        }
    }

    /// Advances one step and returns `F` at the four RK4 stage points, so a
    /// master-equation RK4 driven by these values integrates the joint system.
    pub fn advance(&mut self, g: [C64; 3], omega: [f64; 3], omega_cavity: f64, dt: f64) -> Result<[[C64; 4]; 4]> {
        match self {
            MemorySolver::Markov(s) => Ok([FCoefficients::markov(0.0, *s).f; 4]),
            MemorySolver::Closed { kernel, state, convention } => {
                let (next, stages) = closed_stages(state, g, omega, omega_cavity, kernel, dt, *convention)?;
                *state = next;
                Ok(stages)
            }
            MemorySolver::Grid(grid) => grid_stages(grid, g, omega, omega_cavity).map(|(_, s)| s),
        }
    }
}

/// Two-time diagnostic including the noise-dependent `O5 = σ₋a` term, with
/// `F5' (t,s') = ∫ α(t,s) f5(t,s,s') ds` and `F5 = ∫ α(t,s') F5'(t,s') ds'`.
/// Cost grows as `(t_max/dt)³`; intended for coarse grids.
#[allow(clippy::too_many_arguments)]
pub fn f5_diagnostic(
    g: C64,
    omega: f64,
    omega_cavity: f64,
    alpha1: &CorrelationSpec,
    t_max: f64,
    dt: f64,
    convention: SignConvention,
) -> Result<Vec<FCoefficients>> {
    let n_steps = crate::evolve::steps_for(t_max, dt)?;
    let mut grid = FGrid::new(alpha1, dt, n_steps, convention)?;
    if grid.markov.is_some() {
        return Ok((0..=n_steps)
            .map(|n| FCoefficients { f5: Some(ZERO), ..FCoefficients::markov(n as f64 * dt, alpha1.markov_strength().unwrap()) })
            .collect());
    }
    let sign = convention.factor();
    let c = Couplings { g, omega, omega_cavity };
    let spin = I * (omega + omega_cavity);
    // f5[k][j] = f5(t, s_k, s'_j)
    let mut f5: Vec<Vec<C64>> = vec![vec![ZERO]];
    let mut out = vec![FCoefficients { f5: Some(ZERO), ..grid.coefficients() }];
    const PLAN: [(usize, f64, f64); 4] = [(0, 0.0, 1.0), (1, 0.5, 2.0), (1, 0.5, 2.0), (2, 1.0, 1.0)];
    for _ in 0..n_steps {
        let n = grid.rows.len() - 1;
        let x = grid.rows.clone();
        let x5 = f5.clone();
        let mut acc = x.clone();
        let mut acc5 = x5.clone();
        let mut k_prev: Vec<[C64; 4]> = vec![[ZERO; 4]; n + 1];
        let mut k5_prev: Vec<Vec<C64>> = vec![vec![ZERO; n + 1]; n + 1];
        for &(half, cc, weight) in PLAN.iter() {
            let h = cc * dt;
            let rows: Vec<[C64; 4]> = x.iter().zip(&k_prev).map(|(r, d)| axpy(r, d, h)).collect();
            let m5: Vec<Vec<C64>> = x5
                .iter()
                .zip(&k5_prev)
                .map(|(r, d)| r.iter().zip(d).map(|(a, b)| a + b * h).collect())
                .collect();
            let big = grid.quadrature(&rows, half);
            let weights = grid.stage_weights(n, half);
            // F5'(τ, s'_j) for on-grid s'_j
            let f5p: Vec<C64> = (0..=n).map(|jj| (0..=n).map(|k| weights[k] * m5[k][jj]).sum()).collect();
            let mut kr = Vec::with_capacity(n + 1);
            let mut k5 = Vec::with_capacity(n + 1);
            for k in 0..=n {
                let mut d = f_rhs(&rows[k], &big, &c, sign);
                // the F5' term comes from the same commutator as the quadratic terms
                d[2] += sign * f5p[k];
                kr.push(d);
                let u = rows[k][0] - rows[k][3];
                k5.push(
                    (0..=n)
                        .map(|jj| spin * m5[k][jj] + sign * (m5[k][jj] * (big[0] + big[3]) + u * f5p[jj]))
                        .collect::<Vec<_>>(),
                );
            }
            let w = weight * dt / 6.0;
            for k in 0..=n {
                acc[k] = axpy(&acc[k], &kr[k], w);
                for jj in 0..=n {
                    acc5[k][jj] += k5[k][jj] * w;
                }
            }
            k_prev = kr;
            k5_prev = k5;
        }
        acc.push(BOUNDARY);
        for (k, row) in acc5.iter_mut().enumerate() {
            row.push(acc[k][2] - acc[k][1]);
        }
        acc5.push(vec![ZERO; n + 2]);
        grid.rows = acc;
        grid.t += dt;
        f5 = acc5;
        let big = grid.coefficients();
        let m = grid.rows.len() - 1;
        let weights = grid.stage_weights(m, 0);
        let f5p: Vec<C64> = (0..=m).map(|jj| (0..=m).map(|k| weights[k] * f5[k][jj]).sum()).collect();
        // the s' = t end point of F5' is F3 - F2
        let mut tail = f5p.clone();
        tail[m] = big.f[2] - big.f[1];
        let total: C64 = (0..=m).map(|jj| weights[jj] * tail[jj]).sum();
        if !total.is_finite() || !big.is_finite() {
            return Err(Error::NumericOverflow { t: grid.t });
        }
        out.push(FCoefficients { f5: Some(total), ..big });
    }
    Ok(out)
}

impl FGrid {
    /// Quadrature weights `w_k α(τ - s_k)` at stage time `t_n + (half/2) dt`,
    /// excluding the boundary tail.
    fn stage_weights(&self, n: usize, half: usize) -> Vec<C64> {
        let dt = self.dt();
        (0..=n)
            .map(|k| {
                let mut w = if n == 0 { 0.0 } else if k == 0 || k == n { 0.5 * dt } else { dt };
                if k == n {
                    w += 0.25 * dt * half as f64;
                }
                self.alpha_half[2 * (n - k) + half] * w
            })
            .collect()
    }
}

/// `t,|F1|,|F2|,|F3|,|F4|,|F5|`; `|F5|` is empty when not computed.
pub fn write_f_csv<W: std::io::Write>(rows: &[FCoefficients], mut out: W) -> std::io::Result<()> {
    writeln!(out, "t,|F1|,|F2|,|F3|,|F4|,|F5|")?;
    for r in rows {
        let f5 = r.f5.map(|z| z.norm().to_string()).unwrap_or_default();
        writeln!(out, "{},{},{},{},{},{}", r.t, r.f[0].norm(), r.f[1].norm(), r.f[2].norm(), r.f[3].norm(), f5)?;
    }
    Ok(())
}
