//! Master-equation integration on the truncated atom ⊗ cavity space.
//!
//! Basis index is `atom * (n_max + 1) + n` with `e = 0`, `g = 1`.

use nalgebra::DMatrix;
use num_complex::Complex64 as C64;

use crate::error::{Error, Result};
use crate::measures::ObservableRecord;
use crate::model::{CorrelationSpec, Drive, EtaFrame, ModelParams, NoiseChannel};
use crate::noise_gen::NoisePath;
use crate::o_operator::{MemorySolver, SignConvention};

const I: C64 = C64 { re: 0.0, im: 1.0 };
const ZERO: C64 = C64 { re: 0.0, im: 0.0 };

pub const TRACE_TOLERANCE: f64 = 1e-6;

/// Ladder and spin operators for a given Fock truncation.
#[derive(Clone, Debug)]
pub struct Operators {
    pub n_max: usize,
    pub a: DMatrix<C64>,
    pub a_dag: DMatrix<C64>,
    pub sigma_minus: DMatrix<C64>,
    pub sigma_plus: DMatrix<C64>,
    pub sigma_z: DMatrix<C64>,
    pub number: DMatrix<C64>,
    /// `σ₋aa†`, `σ₋a†a`, `σ_z a`.
    basis: [DMatrix<C64>; 3],
}

impl Operators {
    pub fn new(n_max: usize) -> Self {
        let nc = n_max + 1;
        let dim = 2 * nc;
        let idx = |atom: usize, n: usize| atom * nc + n;
        let mut a = DMatrix::zeros(dim, dim);
        let mut sm = DMatrix::zeros(dim, dim);
        let mut sz = DMatrix::zeros(dim, dim);
        for atom in 0..2 {
            for n in 0..nc {
                if n + 1 < nc {
                    a[(idx(atom, n), idx(atom, n + 1))] = C64::new(((n + 1) as f64).sqrt(), 0.0);
                }
                sz[(idx(atom, n), idx(atom, n))] = C64::new(if atom == 0 { 1.0 } else { -1.0 }, 0.0);
            }
        }
        for n in 0..nc {
            sm[(idx(1, n), idx(0, n))] = C64::new(1.0, 0.0);
        }
        let a_dag = a.adjoint();
        let sp = sm.adjoint();
        let number = &a_dag * &a;
        let basis = [&sm * &a * &a_dag, &sm * &a_dag * &a, &sz * &a];
        Self { n_max, a, a_dag, sigma_minus: sm, sigma_plus: sp, sigma_z: sz, number, basis }
    }

    pub fn dim(&self) -> usize {
        2 * (self.n_max + 1)
    }

    pub fn index(&self, excited: bool, n: usize) -> usize {
        (if excited { 0 } else { 1 }) * (self.n_max + 1) + n
    }

    /// `Ō = F1 a + F2 σ₋aa† + F3 σ₋a†a + F4 σ_z a`.
    pub fn obar(&self, f: &[C64; 4]) -> DMatrix<C64> {
        let mut out = &self.a * f[0];
        for (m, c) in self.basis.iter().zip(&f[1..]) {
            out += m * *c;
        }
        out
    }

    /// Writes `Ō` into `out` without allocating.
    fn obar_into(&self, f: &[C64; 4], out: &mut DMatrix<C64>) {
        out.copy_from(&self.a);
        *out *= f[0];
        for (m, c) in self.basis.iter().zip(&f[1..]) {
            out.zip_apply(m, |o, x| *o += x * *c);
        }
    }
}

/// Hermitian unit-trace operator on the atom ⊗ cavity space.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityMatrix {
    pub t: f64,
    pub entries: DMatrix<C64>,
}

impl DensityMatrix {
    /// `(c_e|e⟩ + c_g|g⟩) ⊗ |0⟩⟨...|`.
    pub fn initial(params: &ModelParams) -> Self {
        let ops_dim = params.dim();
        let nc = params.n_max + 1;
        let mut psi = nalgebra::DVector::zeros(ops_dim);
        psi[0] = params.init_atom.0;
        psi[nc] = params.init_atom.1;
        Self { t: 0.0, entries: &psi * psi.adjoint() }
    }

    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    pub fn trace(&self) -> C64 {
        self.entries.trace()
    }

    /// `max |ρ - ρ†|`.
    pub fn hermiticity_error(&self) -> f64 {
        let n = self.dim();
        let mut worst = 0.0f64;
        for i in 0..n {
            for j in i..n {
                worst = worst.max((self.entries[(i, j)] - self.entries[(j, i)].conj()).norm());
            }
        }
        worst
    }

    /// Population outside the `≤ 1` excitation sector.
    pub fn leakage(&self) -> f64 {
        let nc = self.dim() / 2;
        (0..self.dim())
            .filter(|&k| {
                let (atom, n) = (k / nc, k % nc);
                n + usize::from(atom == 0) > 1
            })
            .map(|k| self.entries[(k, k)].re.abs())
            .sum()
    }
}

/// `(ω/2)σ_z + Ω a†a + G aσ₊ + G* a†σ₋`.
pub fn hjc_matrix(params: &ModelParams, g: C64, omega: f64) -> DMatrix<C64> {
    let ops = Operators::new(params.n_max);
    hjc_with(&ops, params.omega_cavity, g, omega)
}

fn hjc_with(ops: &Operators, omega_cavity: f64, g: C64, omega: f64) -> DMatrix<C64> {
    let mut h = &ops.sigma_z * C64::new(0.5 * omega, 0.0) + &ops.number * C64::new(omega_cavity, 0.0);
    h += (&ops.a * &ops.sigma_plus) * g;
    h += (&ops.a_dag * &ops.sigma_minus) * g.conj();
    h
}

/// Scratch buffers for the master-equation right-hand side.
struct Workspace {
    k: DMatrix<C64>,
    w: DMatrix<C64>,
    tmp: DMatrix<C64>,
    stage: DMatrix<C64>,
    acc: DMatrix<C64>,
    kcur: DMatrix<C64>,
    kprev: DMatrix<C64>,
}

impl Workspace {
    fn new(dim: usize) -> Self {
        let z = || DMatrix::zeros(dim, dim);
        Self { k: z(), w: z(), tmp: z(), stage: z(), acc: z(), kcur: z(), kprev: z() }
    }
}

/// Extra Lindblad dephasing `Γ3(σ_z ρ σ_z - ρ)`.
struct Dephasing<'a> {
    rate: f64,
    sigma_z: &'a DMatrix<C64>,
}

/// `out = -i[H,ρ] + [a, ρŌ†] + [Ōρ, a†]`, evaluated as `W + W†` with
/// `W = -iHρ - a†Ōρ + Ōρa†`.
#[allow(clippy::too_many_arguments)]
fn meq_rhs(
    rho: &DMatrix<C64>,
    h: &DMatrix<C64>,
    obar: &DMatrix<C64>,
    ops: &Operators,
    deph: Option<&Dephasing>,
    ws_k: &mut DMatrix<C64>,
    ws_w: &mut DMatrix<C64>,
    ws_tmp: &mut DMatrix<C64>,
    out: &mut DMatrix<C64>,
) {
    obar.mul_to(rho, ws_k);
    h.mul_to(rho, ws_w);
    *ws_w *= -I;
    ops.a_dag.mul_to(ws_k, ws_tmp);
    *ws_w -= &*ws_tmp;
    ws_k.mul_to(&ops.a_dag, ws_tmp);
    *ws_w += &*ws_tmp;
    ws_w.adjoint_to(out);
    *out += &*ws_w;
    if let Some(d) = deph {
        d.sigma_z.mul_to(rho, ws_tmp);
        ws_tmp.mul_to(d.sigma_z, ws_k);
        *ws_k -= rho;
        out.zip_apply(ws_k, |o, x| *o += x * d.rate);
    }
}

/// One RK4 step with per-stage Hamiltonians (`t, t+dt/2, t+dt`) and per-stage
/// dissipators (the four RK4 stage points).
fn rk4_meq(
    rho: &mut DMatrix<C64>,
    hs: &[DMatrix<C64>; 3],
    obars: &[DMatrix<C64>; 4],
    ops: &Operators,
    deph: Option<&Dephasing>,
    dt: f64,
    ws: &mut Workspace,
) {
    const PLAN: [(usize, f64, f64); 4] = [(0, 0.0, 1.0), (1, 0.5, 2.0), (1, 0.5, 2.0), (2, 1.0, 1.0)];
    ws.acc.fill(ZERO);
    for (j, &(hi, c, weight)) in PLAN.iter().enumerate() {
        ws.stage.copy_from(rho);
        if j > 0 {
            let h = c * dt;
            ws.stage.zip_apply(&ws.kprev, |s, k| *s += k * h);
        }
        meq_rhs(&ws.stage, &hs[hi], &obars[j], ops, deph, &mut ws.k, &mut ws.w, &mut ws.tmp, &mut ws.kcur);
        let wj = weight * dt / 6.0;
        ws.acc.zip_apply(&ws.kcur, |a, k| *a += k * wj);
        std::mem::swap(&mut ws.kprev, &mut ws.kcur);
    }
    *rho += &ws.acc;
}

/// One RK4 step of the master equation with fixed `H` and `Ō`.
pub fn step_meq_half(rho: &DensityMatrix, h: &DMatrix<C64>, obar: &DMatrix<C64>, dt: f64) -> Result<DensityMatrix> {
    let dim = rho.dim();
    if h.shape() != (dim, dim) || obar.shape() != (dim, dim) || dim % 2 != 0 || dim < 4 {
        return Err(Error::Shape(format!(
            "state is {dim}x{dim}, H is {:?}, Obar is {:?}",
            h.shape(),
            obar.shape()
        )));
    }
    let ops = Operators::new(dim / 2 - 1);
    let mut ws = Workspace::new(dim);
    let mut next = rho.entries.clone();
    let hs = [h.clone(), h.clone(), h.clone()];
    let obars = [obar.clone(), obar.clone(), obar.clone(), obar.clone()];
    rk4_meq(&mut next, &hs, &obars, &ops, None, dt, &mut ws);
    let out = DensityMatrix { t: rho.t + dt, entries: next };
    check_trace(&out)?;
    Ok(out)
}

fn check_trace(rho: &DensityMatrix) -> Result<()> {
    let tr = rho.trace();
    if !tr.is_finite() {
        return Err(Error::NumericOverflow { t: rho.t });
    }
    if (tr - C64::new(1.0, 0.0)).norm() > TRACE_TOLERANCE {
        return Err(Error::Integrator {
            t: rho.t,
            reason: format!("trace drifted to {tr}"),
        });
    }
    Ok(())
}

/// Largest invariant violations seen along a run.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct InvariantReport {
    pub max_trace_error: f64,
    pub max_hermiticity_error: f64,
    pub max_leakage: f64,
    pub min_diagonal: f64,
}

impl InvariantReport {
    fn observe(&mut self, rho: &DensityMatrix) {
        self.max_trace_error = self.max_trace_error.max((rho.trace() - C64::new(1.0, 0.0)).norm());
        self.max_hermiticity_error = self.max_hermiticity_error.max(rho.hermiticity_error());
        self.max_leakage = self.max_leakage.max(rho.leakage());
        let d = (0..rho.dim()).map(|k| rho.entries[(k, k)].re).fold(f64::INFINITY, f64::min);
        self.min_diagonal = self.min_diagonal.min(d);
    }

    pub fn merge(&mut self, other: &InvariantReport) {
        self.max_trace_error = self.max_trace_error.max(other.max_trace_error);
        self.max_hermiticity_error = self.max_hermiticity_error.max(other.max_hermiticity_error);
        self.max_leakage = self.max_leakage.max(other.max_leakage);
        self.min_diagonal = self.min_diagonal.min(other.min_diagonal);
    }

    /// Trace and Hermiticity within `1e-8`, leakage below `1e-10`, diagonals above `-1e-6`.
    pub fn holds(&self) -> bool {
        self.max_trace_error < 1e-8
            && self.max_hermiticity_error < 1e-8
            && self.max_leakage < 1e-10
            && self.min_diagonal >= -1e-6
    }
}

/// Recorded output of one trajectory.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub records: Vec<ObservableRecord>,
    pub final_state: DensityMatrix,
    pub invariants: InvariantReport,
}

/// Integration options shared by the master-equation runs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RunOptions {
    pub stride: usize,
    pub convention: SignConvention,
    pub frame: EtaFrame,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self { stride: 10, convention: SignConvention::Consistent, frame: EtaFrame::Direct }
    }
}

/// Co-evolves `F(t)` and `ρ′(t)` for one noise realization.
#[allow(clippy::too_many_arguments)]
pub fn run_trajectory(
    params: &ModelParams,
    alpha1: &CorrelationSpec,
    noise: Option<&NoisePath>,
    channel: NoiseChannel,
    t_max: f64,
    dt: f64,
    opts: RunOptions,
) -> Result<Trajectory> {
    params.validate()?;
    let n_steps = steps_for(t_max, dt)?;
    let drive = Drive::from_noise(params, channel, noise, n_steps, dt, opts.frame)?;
    run_drive(params, alpha1, &drive, opts)
}

/// Number of `dt` steps covering `[0, t_max]`.
pub fn steps_for(t_max: f64, dt: f64) -> Result<usize> {
    if !(dt > 0.0 && dt.is_finite()) || !(t_max > 0.0 && t_max.is_finite()) {
        return Err(Error::Parameter(format!("need T > 0 and dt > 0, got T = {t_max}, dt = {dt}")));
    }
    Ok((t_max / dt).round().max(1.0) as usize)
}

/// Same as [`run_trajectory`] with a prepared drive.
pub fn run_drive(params: &ModelParams, alpha1: &CorrelationSpec, drive: &Drive, opts: RunOptions) -> Result<Trajectory> {
    let n_steps = drive.n_steps();
    let dt = drive.dt;
    let ops = Operators::new(params.n_max);
    let dim = ops.dim();
    let mut memory = MemorySolver::for_spec(alpha1, dt, n_steps, opts.convention)?;
    let mut ws = Workspace::new(dim);
    let mut rho = DensityMatrix::initial(params);
    let stride = opts.stride.max(1);
    let mut records = Vec::with_capacity(n_steps / stride + 1);
    let mut inv = InvariantReport::default();
    inv.observe(&rho);
    records.push(ObservableRecord::from_state(&rho)?);
    let mut hs: [DMatrix<C64>; 3] = std::array::from_fn(|_| DMatrix::zeros(dim, dim));
    let mut obars: [DMatrix<C64>; 4] = std::array::from_fn(|_| DMatrix::zeros(dim, dim));
    let mut last_g = [C64::new(f64::NAN, 0.0); 3];
    let mut last_w = [f64::NAN; 3];
    for n in 0..n_steps {
        let g = drive.g_stages(n);
        let w = drive.omega_stages(n);
        for j in 0..3 {
            if g[j] != last_g[j] || w[j] != last_w[j] {
                hs[j] = hjc_with(&ops, params.omega_cavity, g[j], w[j]);
            }
        }
        last_g = g;
        last_w = w;
        let fs = memory.advance(g, w, params.omega_cavity, dt)?;
        for (o, f) in obars.iter_mut().zip(&fs) {
            ops.obar_into(f, o);
        }
        rk4_meq(&mut rho.entries, &hs, &obars, &ops, None, dt, &mut ws);
        rho.t = (n + 1) as f64 * dt;
        check_trace(&rho)?;
        if (n + 1) % stride == 0 {
            inv.observe(&rho);
            let mut rec = ObservableRecord::from_state(&rho)?;
            rec.t = rho.t;
            records.push(rec);
        }
    }
    Ok(Trajectory { records, final_state: rho, invariants: inv })
}

/// `G0 e^{iΦ(t)}` with `Φ` the cumulative trapezoid integral of `η` sampled at spacing `h`.
pub fn rotate_frame_eta(eta: &[f64], g0: C64, h: f64) -> Vec<C64> {
    let mut phi = 0.0;
    let mut out = Vec::with_capacity(eta.len());
    for (i, &x) in eta.iter().enumerate() {
        if i > 0 {
            phi += 0.5 * h * (eta[i - 1] + x);
        }
        out.push(g0 * C64::from_polar(1.0, phi));
    }
    out
}

/// Lindblad reference with cavity loss `Γ1` and atomic dephasing `Γ3`, recorded
/// every `stride` steps.
pub fn run_lindblad(
    params: &ModelParams,
    gamma1: f64,
    gamma3: f64,
    t_max: f64,
    dt: f64,
    stride: usize,
) -> Result<Vec<DensityMatrix>> {
    params.validate()?;
    if !(gamma1 >= 0.0) || !(gamma3 >= 0.0) {
        return Err(Error::Parameter("Lindblad rates must be >= 0".into()));
    }
    let n_steps = steps_for(t_max, dt)?;
    let ops = Operators::new(params.n_max);
    let dim = ops.dim();
    let h = hjc_with(&ops, params.omega_cavity, C64::new(params.static_coupling(), 0.0), params.omega0);
    let hs = [h.clone(), h.clone(), h];
    let o = &ops.a * C64::new(0.5 * gamma1, 0.0);
    let obars = [o.clone(), o.clone(), o.clone(), o];
    let deph = Dephasing { rate: gamma3, sigma_z: &ops.sigma_z };
    let mut ws = Workspace::new(dim);
    let mut rho = DensityMatrix::initial(params);
    let stride = stride.max(1);
    let mut out = vec![rho.clone()];
    for n in 0..n_steps {
        rk4_meq(&mut rho.entries, &hs, &obars, &ops, Some(&deph), dt, &mut ws);
        rho.t = (n + 1) as f64 * dt;
        if (n + 1) % stride == 0 {
            out.push(rho.clone());
        }
    }
    Ok(out)
}
