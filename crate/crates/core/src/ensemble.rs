//! Parallel Monte Carlo over classical-noise realizations with a reduction
//! whose result does not depend on the worker count.

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use num_complex::Complex64 as C64;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::evolve::{self, DensityMatrix, InvariantReport, RunOptions, Trajectory};
use crate::exact1x::{self, Amplitudes, SingleExcitation};
use crate::measures::ObservableRecord;
use crate::model::{ClassicalNoiseSpec, CorrelationSpec, Drive, EtaFrame, ModelParams, NoiseChannel};
use crate::noise_gen::{derive_seed, sample_process, TimeGrid};
use crate::o_operator::SignConvention;

/// Trajectories per reduction block; fixed so the summation tree is too.
const BLOCK: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Solver {
    Exact1x,
    #[default]
    MeqHalf,
    Lindblad,
}

impl Solver {
    pub fn name(self) -> &'static str {
        match self {
            Solver::Exact1x => "exact1x",
            Solver::MeqHalf => "meqhalf",
            Solver::Lindblad => "lindblad",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "exact1x" => Some(Solver::Exact1x),
            "meqhalf" => Some(Solver::MeqHalf),
            "lindblad" => Some(Solver::Lindblad),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleConfig {
    pub n_traj: usize,
    pub base_seed: u64,
    pub params: ModelParams,
    pub alpha1: CorrelationSpec,
    pub classical: ClassicalNoiseSpec,
    pub t_max: f64,
    pub dt: f64,
    pub record_stride: usize,
    pub solver: Solver,
    pub convention: SignConvention,
    pub frame: EtaFrame,
    /// Atomic dephasing rate used only by the Lindblad solver.
    pub dephasing: f64,
}

impl EnsembleConfig {
    pub fn new(params: ModelParams, alpha1: CorrelationSpec, classical: ClassicalNoiseSpec) -> Self {
        Self {
            n_traj: 1,
            base_seed: 0,
            params,
            alpha1,
            classical,
            t_max: 100.0,
            dt: 0.01,
            record_stride: 10,
            solver: Solver::MeqHalf,
            convention: SignConvention::Consistent,
            frame: EtaFrame::Direct,
            dephasing: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        let mut check = |r: Result<()>| {
            if let Err(e) = r {
                problems.push(e.to_string());
            }
        };
        check(self.params.validate());
        check(self.alpha1.validate());
        check(self.classical.validate());
        if self.n_traj < 1 {
            problems.push("n_traj must be >= 1".into());
        }
        if !(self.t_max > 0.0 && self.t_max.is_finite()) {
            problems.push(format!("T must be > 0, got {}", self.t_max));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) || self.dt > self.t_max {
            problems.push(format!("dt must be in (0, T], got {}", self.dt));
        }
        if self.record_stride < 1 {
            problems.push("record_stride must be >= 1".into());
        }
        if self.solver == Solver::Lindblad && self.classical.channel != NoiseChannel::None {
            problems.push("the lindblad solver needs classical channel None".into());
        }
        if self.solver == Solver::Lindblad {
            if let Err(e) = self.lindblad_rate() {
                problems.push(e.to_string());
            }
        }
        if self.solver == Solver::Exact1x {
            if let Err(e) = SingleExcitation::for_model(&self.params, &self.alpha1) {
                problems.push(e.to_string());
            }
        }
        if !(self.dephasing >= 0.0) {
            problems.push("dephasing must be >= 0".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }

    fn lindblad_rate(&self) -> Result<f64> {
        match &self.alpha1 {
            CorrelationSpec::Delta { strength } | CorrelationSpec::Ou { strength, .. } => Ok(*strength),
            _ => Err(Error::UnsupportedSpec("lindblad solver needs an OU or delta kernel".into())),
        }
    }

    pub fn n_steps(&self) -> usize {
        (self.t_max / self.dt).round().max(1.0) as usize
    }

    /// Seed of trajectory `index`.
    pub fn trajectory_seed(&self, index: usize) -> u64 {
        derive_seed(self.base_seed, self.classical.seed_stream, index as u64)
    }

    /// Canonical `key = value` lines; the hash is taken over this text.
    pub fn canonical(&self) -> Vec<(String, String)> {
        let p = &self.params;
        let mut kv = vec![
            ("model.omega0".to_string(), fmt(p.omega0)),
            ("model.omega_cavity".into(), fmt(p.omega_cavity)),
            ("model.g0".into(), fmt(p.g0)),
            ("model.kx0".into(), fmt(p.kx0)),
            ("model.n_max".into(), p.n_max.to_string()),
            ("model.init_e".into(), fmt_c(p.init_atom.0)),
            ("model.init_g".into(), fmt_c(p.init_atom.1)),
        ];
        kv.extend(crate::config::correlation_kv("bath", "kind", &self.alpha1));
        kv.extend(crate::config::classical_kv(&self.classical));
        kv.extend([
            ("sim.n_traj".into(), self.n_traj.to_string()),
            ("sim.seed".into(), self.base_seed.to_string()),
            ("sim.t_max".into(), fmt(self.t_max)),
            ("sim.dt".into(), fmt(self.dt)),
            ("sim.record_stride".into(), self.record_stride.to_string()),
            ("sim.solver".into(), self.solver.name().into()),
            ("sim.signs".into(), crate::config::convention_name(self.convention).into()),
            ("sim.eta_frame".into(), crate::config::frame_name(self.frame).into()),
            ("sim.dephasing".into(), fmt(self.dephasing)),
        ]);
        kv
    }

    pub fn config_hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.canonical() {
            h.update(k.as_bytes());
            h.update(b"=");
            h.update(v.as_bytes());
            h.update(b"\n");
        }
        let digest = h.finalize();
        let mut s = String::with_capacity(64);
        for b in digest.iter() {
            let _ = write!(s, "{b:02x}");
        }
        s
    }
}

pub(crate) fn fmt(x: f64) -> String {
    format!("{x:?}")
}

pub(crate) fn fmt_c(z: C64) -> String {
    if z.im == 0.0 {
        fmt(z.re)
    } else {
        format!("{:?}{:+?}i", z.re, z.im)
    }
}

/// Pointwise means and standard errors of the recorded observables.
#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleResult {
    pub times: Vec<f64>,
    pub mean: Vec<ObservableRecord>,
    pub stderr: Vec<ObservableRecord>,
    pub n_traj: usize,
    pub config_hash: String,
    pub invariants: InvariantReport,
    /// Average of the final states.
    pub final_state: DensityMatrix,
}

impl EnsembleResult {
    pub fn coherence(&self) -> Vec<f64> {
        self.mean.iter().map(|r| r.coherence).collect()
    }

    pub fn coherence_stderr(&self) -> Vec<f64> {
        self.stderr.iter().map(|r| r.coherence).collect()
    }

    /// `t, coherence_mean, coherence_stderr, purity_mean, negativity_mean, pop_e_mean`
    /// preceded by a comment line with the tool version and config hash.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "# hiercoh {} config_hash={}", env!("CARGO_PKG_VERSION"), self.config_hash)?;
        writeln!(out, "t,coherence_mean,coherence_stderr,purity_mean,negativity_mean,pop_e_mean")?;
        for (m, s) in self.mean.iter().zip(&self.stderr) {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                m.t, m.coherence, s.coherence, m.purity, m.negativity, m.pop_e
            )?;
        }
        Ok(())
    }

    /// All observables with their standard errors.
    pub fn write_full_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "# hiercoh {} config_hash={}", env!("CARGO_PKG_VERSION"), self.config_hash)?;
        let mut header = vec!["t".to_string()];
        for f in ObservableRecord::FIELDS {
            header.push(format!("{f}_mean"));
            header.push(format!("{f}_stderr"));
        }
        writeln!(out, "{}", header.join(","))?;
        for (m, s) in self.mean.iter().zip(&self.stderr) {
            let mut row = vec![m.t.to_string()];
            for (a, b) in m.values().iter().zip(s.values()) {
                row.push(a.to_string());
                row.push(b.to_string());
            }
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// Writes `<stem>.csv` and `<stem>.json` (config and hash) into `dir`.
pub fn write_outputs(dir: &Path, stem: &str, config: &EnsembleConfig, result: &EnsembleResult) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv = dir.join(format!("{stem}.csv"));
    let file = std::fs::File::create(&csv).map_err(|e| Error::io(&csv, e))?;
    result.write_csv(std::io::BufWriter::new(file)).map_err(|e| Error::io(&csv, e))?;
    let json = dir.join(format!("{stem}.json"));
    std::fs::write(&json, sidecar(config, result)).map_err(|e| Error::io(&json, e))?;
    Ok(())
}

/// JSON description of the configuration and its hash.
pub fn sidecar(config: &EnsembleConfig, result: &EnsembleResult) -> String {
    let mut cfg = serde_json::Map::new();
    for (k, v) in config.canonical() {
        cfg.insert(k, serde_json::Value::String(v));
    }
    let doc = serde_json::json!({
        "tool": "hiercoh",
        "version": env!("CARGO_PKG_VERSION"),
        "config_hash": result.config_hash,
        "n_traj": result.n_traj,
        "config": cfg,
    });
    serde_json::to_string_pretty(&doc).expect("JSON values are always serializable")
}

/// Running mean and sum of squared deviations per time and observable.
#[derive(Clone, Debug)]
struct Accumulator {
    n: usize,
    mean: Vec<[f64; 6]>,
    m2: Vec<[f64; 6]>,
    times: Vec<f64>,
    final_sum: DMatrix<C64>,
    invariants: InvariantReport,
}

impl Accumulator {
    fn from_trajectory(tr: &Trajectory) -> Self {
        Self {
            n: 1,
            mean: tr.records.iter().map(|r| r.values()).collect(),
            m2: vec![[0.0; 6]; tr.records.len()],
            times: tr.records.iter().map(|r| r.t).collect(),
            final_sum: tr.final_state.entries.clone(),
            invariants: tr.invariants,
        }
    }

    /// Pairwise merge of two disjoint sample sets.
    fn merge(mut self, other: Accumulator) -> Result<Self> {
        if self.mean.len() != other.mean.len() {
            return Err(Error::Shape("trajectories recorded different lengths".into()));
        }
        let (na, nb) = (self.n as f64, other.n as f64);
        let n = na + nb;
        for (i, (ma, mb)) in self.mean.iter_mut().zip(&other.mean).enumerate() {
            for k in 0..6 {
                let delta = mb[k] - ma[k];
                ma[k] += delta * nb / n;
                self.m2[i][k] += other.m2[i][k] + delta * delta * na * nb / n;
            }
        }
        self.n += other.n;
        self.final_sum += other.final_sum;
        self.invariants.merge(&other.invariants);
        Ok(self)
    }
}

/// Drive seen by trajectory `index`, including its classical-noise path.
pub fn trajectory_drive(config: &EnsembleConfig, index: usize) -> Result<Drive> {
    let seed = config.trajectory_seed(index);
    let n_steps = config.n_steps();
    let dt = config.dt;
    let noise = match config.classical.channel {
        NoiseChannel::None => None,
        _ => {
            let grid = TimeGrid::half_step(dt, n_steps)?;
            Some(sample_process(&config.classical.process, grid, seed, dt)?)
        }
    };
    Drive::from_noise(&config.params, config.classical.channel, noise.as_ref(), n_steps, dt, config.frame)
}

/// Single-excitation amplitudes of trajectory `index` at the record stride.
pub fn exact_trajectory(config: &EnsembleConfig, index: usize) -> Result<Vec<Amplitudes>> {
    let drive = trajectory_drive(config, index)?;
    let sys = SingleExcitation::for_model(&config.params, &config.alpha1)?;
    exact1x::run(&sys, Amplitudes::initial(&config.params), &drive, config.params.omega0, config.record_stride)
}

fn run_one(config: &EnsembleConfig, index: usize) -> Result<Trajectory> {
    let seed = config.trajectory_seed(index);
    let wrap = |e: Error| Error::Trajectory { index, seed, source: Box::new(e) };
    let opts = RunOptions { stride: config.record_stride, convention: config.convention, frame: config.frame };
    if config.solver == Solver::Lindblad {
        return run_lindblad(config).map_err(wrap);
    }
    let drive = trajectory_drive(config, index).map_err(wrap)?;
    match config.solver {
        Solver::MeqHalf => evolve::run_drive(&config.params, &config.alpha1, &drive, opts),
        _ => run_exact(config, &drive),
    }
    .map_err(wrap)
}

fn run_exact(config: &EnsembleConfig, drive: &Drive) -> Result<Trajectory> {
    let sys = SingleExcitation::for_model(&config.params, &config.alpha1)?;
    let states = exact1x::run(&sys, Amplitudes::initial(&config.params), drive, config.params.omega0, config.record_stride)?;
    let stride_dt = config.record_stride as f64 * config.dt;
    let mut inv = InvariantReport::default();
    let mut records = Vec::with_capacity(states.len());
    let mut last = None;
    for (k, s) in states.iter().enumerate() {
        let rho = DensityMatrix { t: k as f64 * stride_dt, entries: exact1x::reduced_density(s, config.params.n_max) };
        inv.merge(&report_for(&rho));
        records.push(ObservableRecord::from_state(&rho)?);
        last = Some(rho);
    }
    Ok(Trajectory { records, final_state: last.expect("at least the initial state"), invariants: inv })
}

fn run_lindblad(config: &EnsembleConfig) -> Result<Trajectory> {
    let states = evolve::run_lindblad(
        &config.params,
        config.lindblad_rate()?,
        config.dephasing,
        config.t_max,
        config.dt,
        config.record_stride,
    )?;
    let mut inv = InvariantReport::default();
    let records = states
        .iter()
        .map(|rho| {
            inv.merge(&report_for(rho));
            ObservableRecord::from_state(rho)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Trajectory { records, final_state: states.last().cloned().expect("initial state"), invariants: inv })
}

fn report_for(rho: &DensityMatrix) -> InvariantReport {
    let mut r = InvariantReport::default();
    r.max_trace_error = (rho.trace() - C64::new(1.0, 0.0)).norm();
    r.max_hermiticity_error = rho.hermiticity_error();
    r.max_leakage = rho.leakage();
    r.min_diagonal = (0..rho.dim()).map(|k| rho.entries[(k, k)].re).fold(0.0, f64::min);
    r
}

/// Runs every trajectory on the current rayon pool.
pub fn run_ensemble(config: &EnsembleConfig) -> Result<EnsembleResult> {
    config.validate()?;
    let n = config.n_traj;
    let blocks: Vec<Accumulator> = (0..n.div_ceil(BLOCK))
        .into_par_iter()
        .map(|b| {
            let lo = b * BLOCK;
            let hi = (lo + BLOCK).min(n);
            let mut acc: Option<Accumulator> = None;
            for i in lo..hi {
                let tr = run_one(config, i)?;
                let one = Accumulator::from_trajectory(&tr);
                acc = Some(match acc {
                    None => one,
                    Some(a) => a.merge(one)?,
                });
            }
            Ok(acc.expect("blocks are non-empty"))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut total: Option<Accumulator> = None;
    for b in blocks {
        total = Some(match total {
            None => b,
            Some(a) => a.merge(b)?,
        });
    }
    let total = total.expect("n_traj >= 1");
    let nf = total.n as f64;
    let stderr = total
        .m2
        .iter()
        .zip(&total.times)
        .map(|(m2, &t)| {
            let se = if total.n > 1 { m2.map(|x| (x / (nf - 1.0)).max(0.0).sqrt() / nf.sqrt()) } else { [0.0; 6] };
            ObservableRecord::from_values(t, se)
        })
        .collect();
    let mean = total.mean.iter().zip(&total.times).map(|(m, &t)| ObservableRecord::from_values(t, *m)).collect();
    let final_state = DensityMatrix {
        t: config.n_steps() as f64 * config.dt,
        entries: total.final_sum / C64::new(nf, 0.0),
    };
    Ok(EnsembleResult {
        times: total.times,
        mean,
        stderr,
        n_traj: total.n,
        config_hash: config.config_hash(),
        invariants: total.invariants,
        final_state,
    })
}

/// Runs on a dedicated pool of `threads` workers.
pub fn run_ensemble_with_threads(config: &EnsembleConfig, threads: usize) -> Result<EnsembleResult> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::Parameter(format!("cannot build a pool of {threads} workers: {e}")))?;
    pool.install(|| run_ensemble(config))
}

/// Value with a conservative standard error (the time average of the
/// pointwise standard errors, an upper bound for the error of the average).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Estimate {
    pub value: f64,
    pub stderr: f64,
}

fn check_grids(a: &EnsembleResult, b: &EnsembleResult) -> Result<()> {
    if a.times.len() != b.times.len() || a.times.iter().zip(&b.times).any(|(x, y)| (x - y).abs() > 1e-9) {
        return Err(Error::Shape(format!(
            "time grids differ ({} vs {} points)",
            a.times.len(),
            b.times.len()
        )));
    }
    Ok(())
}

/// Trapezoid time average of `coherence - coherence₀` over `[t0, t1]`.
pub fn windowed_delta(with_noise: &EnsembleResult, baseline: &EnsembleResult, t0: f64, t1: f64) -> Result<Estimate> {
    check_grids(with_noise, baseline)?;
    let eps = 1e-9;
    let pts: Vec<(f64, f64, f64)> = with_noise
        .times
        .iter()
        .enumerate()
        .filter(|(_, &t)| t >= t0 - eps && t <= t1 + eps)
        .map(|(i, &t)| {
            let d = with_noise.mean[i].coherence - baseline.mean[i].coherence;
            let s = with_noise.stderr[i].coherence.hypot(baseline.stderr[i].coherence);
            (t, d, s)
        })
        .collect();
    if pts.len() < 2 {
        return Err(Error::Shape(format!("window [{t0}, {t1}] holds fewer than two samples")));
    }
    let (mut area, mut err) = (0.0, 0.0);
    for w in pts.windows(2) {
        let h = w[1].0 - w[0].0;
        area += 0.5 * h * (w[0].1 + w[1].1);
        err += 0.5 * h * (w[0].2 + w[1].2);
    }
    let span = pts.last().unwrap().0 - pts[0].0;
    Ok(Estimate { value: area / span, stderr: err / span })
}

/// Protection metric over `[0, horizon]` with its conservative error.
pub fn protection_estimate(with_noise: &EnsembleResult, baseline: &EnsembleResult, horizon: f64) -> Result<Estimate> {
    windowed_delta(with_noise, baseline, 0.0, horizon)
}

/// `(1/T) ∫₀ᵀ [coherence(t) - coherence₀(t)] dt` with `T = 100` (or the run length if shorter).
pub fn protection_metric(with_noise: &EnsembleResult, baseline: &EnsembleResult) -> Result<f64> {
    protection_estimate(with_noise, baseline, 100.0).map(|e| e.value)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SurfacePoint {
    pub sweep_value: f64,
    pub t: f64,
    pub coherence_mean: f64,
    pub coherence_stderr: f64,
    pub delta: f64,
}

/// `Δ(x, t) = coherence(t; x) - coherence₀(t)` for every sweep member.
pub fn difference_surface(sweep: &[(f64, EnsembleResult)], baseline: &EnsembleResult) -> Result<Vec<SurfacePoint>> {
    let mut out = Vec::new();
    for (x, r) in sweep {
        check_grids(r, baseline)?;
        for i in 0..r.times.len() {
            out.push(SurfacePoint {
                sweep_value: *x,
                t: r.times[i],
                coherence_mean: r.mean[i].coherence,
                coherence_stderr: r.stderr[i].coherence,
                delta: r.mean[i].coherence - baseline.mean[i].coherence,
            });
        }
    }
    Ok(out)
}

/// `sweep_value, t, coherence_mean, coherence_stderr, delta_vs_baseline`.
pub fn write_surface_csv<W: Write>(points: &[SurfacePoint], header_comment: &str, mut out: W) -> std::io::Result<()> {
    writeln!(out, "# {header_comment}")?;
    writeln!(out, "sweep_value,t,coherence_mean,coherence_stderr,delta_vs_baseline")?;
    for p in points {
        writeln!(out, "{},{},{},{},{}", p.sweep_value, p.t, p.coherence_mean, p.coherence_stderr, p.delta)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::NoiseProcess;

    fn short(classical: ClassicalNoiseSpec, n_traj: usize) -> EnsembleConfig {
        let mut c = EnsembleConfig::new(ModelParams::default(), CorrelationSpec::ou(1.0, 1.0), classical);
        c.n_traj = n_traj;
        c.t_max = 2.0;
        c
    }

    #[test]
    fn deterministic_channel_has_zero_stderr() {
        let r = run_ensemble(&short(ClassicalNoiseSpec::none(), 5)).unwrap();
        assert_eq!(r.n_traj, 5);
        assert!(r.stderr.iter().all(|s| s.values().iter().all(|&v| v == 0.0)));
        let single = run_ensemble(&short(ClassicalNoiseSpec::none(), 1)).unwrap();
        assert_eq!(single.mean, r.mean);
    }

    #[test]
    fn worker_count_does_not_change_results() {
        let noisy = ClassicalNoiseSpec {
            channel: NoiseChannel::XiCoupling,
            process: NoiseProcess::Ou { strength: 1.0, gamma: 5.0 },
            seed_stream: 2,
        };
        let cfg = short(noisy, 40);
        let a = run_ensemble_with_threads(&cfg, 1).unwrap();
        let b = run_ensemble_with_threads(&cfg, 4).unwrap();
        assert_eq!(a.mean, b.mean);
        assert_eq!(a.stderr, b.stderr);
    }

    #[test]
    fn metric_of_baseline_against_itself_is_zero() {
        let r = run_ensemble(&short(ClassicalNoiseSpec::none(), 1)).unwrap();
        assert_eq!(protection_metric(&r, &r).unwrap(), 0.0);
    }

    #[test]
    fn metric_of_constant_offset() {
        let base = run_ensemble(&short(ClassicalNoiseSpec::none(), 1)).unwrap();
        let mut up = base.clone();
        for m in &mut up.mean {
            m.coherence += 0.01;
        }
        assert!((protection_metric(&up, &base).unwrap() - 0.01).abs() < 1e-12);
    }

    #[test]
    fn grid_mismatch_is_a_shape_error() {
        let a = run_ensemble(&short(ClassicalNoiseSpec::none(), 1)).unwrap();
        let mut b = a.clone();
        b.times.pop();
        assert!(matches!(protection_metric(&a, &b), Err(Error::Shape(_))));
    }

    #[test]
    fn lindblad_requires_no_classical_noise() {
        let mut c = short(
            ClassicalNoiseSpec {
                channel: NoiseChannel::EtaFrequency,
                process: NoiseProcess::ConstantOffset(0.1),
                seed_stream: 0,
            },
            1,
        );
        c.solver = Solver::Lindblad;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn difference_surface_starts_at_zero() {
        let base = run_ensemble(&short(ClassicalNoiseSpec::none(), 1)).unwrap();
        let noisy = run_ensemble(&short(
            ClassicalNoiseSpec {
                channel: NoiseChannel::XiCoupling,
                process: NoiseProcess::ConstantOffset(0.05),
                seed_stream: 0,
            },
            1,
        ))
        .unwrap();
        let s = difference_surface(&[(0.05, noisy)], &base).unwrap();
        assert_eq!(s[0].delta, 0.0);
        assert!(s.iter().any(|p| p.delta != 0.0));
    }

    fn ou_xi() -> ClassicalNoiseSpec {
        ClassicalNoiseSpec {
            channel: NoiseChannel::XiCoupling,
            process: NoiseProcess::Ou { strength: 1.0, gamma: 1.0 },
            seed_stream: 0,
        }
    }

    #[test]
    fn stderr_follows_square_root_scaling() {
        let run = |n| {
            let mut c = short(ou_xi(), n);
            c.solver = Solver::Exact1x;
            c.t_max = 10.0;
            run_ensemble(&c).unwrap()
        };
        let (small, large) = (run(2000), run(8000));
        let k = small.times.len() - 1;
        let ratio = large.stderr[k].coherence / small.stderr[k].coherence;
        assert!((ratio - 0.5).abs() < 0.1, "{ratio}");
    }

    #[test]
    fn same_seed_gives_identical_csv() {
        let c = short(ou_xi(), 20);
        let csv = |r: &EnsembleResult| {
            let mut out = Vec::new();
            r.write_csv(&mut out).unwrap();
            out
        };
        let a = csv(&run_ensemble(&c).unwrap());
        assert_eq!(a, csv(&run_ensemble(&c).unwrap()));
        let mut other = c.clone();
        other.base_seed += 1;
        assert_ne!(a, csv(&run_ensemble(&other).unwrap()));
        let text = String::from_utf8(a).unwrap();
        let mut lines = text.lines();
        assert!(lines.next().unwrap().starts_with("# hiercoh "));
        assert_eq!(lines.next().unwrap(), "t,coherence_mean,coherence_stderr,purity_mean,negativity_mean,pop_e_mean");
    }

    #[test]
    fn config_hash_tracks_every_field() {
        let c = short(ou_xi(), 4);
        let h = c.config_hash();
        assert_eq!(h.len(), 64);
        assert_eq!(h, c.clone().config_hash());
        let mut d = c.clone();
        d.dt = 0.005;
        assert_ne!(h, d.config_hash());
        let mut d = c.clone();
        d.classical.process = NoiseProcess::Ou { strength: 1.0, gamma: 2.0 };
        assert_ne!(h, d.config_hash());
    }

    #[test]
    fn exact_solver_matches_reduced_records() {
        let mut c = short(ClassicalNoiseSpec::none(), 1);
        c.solver = Solver::Exact1x;
        let r = run_ensemble(&c).unwrap();
        let states = exact_trajectory(&c, 0).unwrap();
        for (m, s) in r.mean.iter().zip(&states) {
            assert!((m.coherence - exact1x::coherence_1x(s)).abs() < 1e-9);
        }
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(8))]
        #[test]
        fn ensemble_invariants_hold(seed: u64, gamma in 0.5f64..20.0) {
            let mut c = short(ClassicalNoiseSpec { process: NoiseProcess::Ou { strength: 1.0, gamma }, ..ou_xi() }, 3);
            c.base_seed = seed;
            let r = run_ensemble(&c).unwrap();
            proptest::prop_assert!(r.invariants.holds(), "{:?}", r.invariants);
            proptest::prop_assert!(r.mean.iter().all(|m| (0.0..=0.5 + 1e-9).contains(&m.coherence)));
        }
    }
}
