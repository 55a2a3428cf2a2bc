//! Flat `[section]` / `key = value` configuration, figure presets and the
//! runners that turn them into CSV files.
//!
//! Sections are `model`, `bath`, `classical_noise`, `sim` and `output`. Lines
//! starting with `#` or `;` are comments. Lists are comma separated; complex
//! numbers are written `re`, `re+imi` or `re-imi`.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use num_complex::Complex64 as C64;

use crate::ensemble::{
    self, difference_surface, fmt, fmt_c, run_ensemble, run_ensemble_with_threads, write_surface_csv,
    EnsembleConfig, EnsembleResult, Solver,
};
use crate::error::{Error, Result};
use crate::measures;
use crate::model::{ClassicalNoiseSpec, CorrelationSpec, EtaFrame, ModelParams, NoiseChannel, NoiseProcess, OuComponent};
use crate::noise_gen::{sample_process, TimeGrid};
use crate::o_operator::{f5_diagnostic, write_f_csv, SignConvention};

pub const SECTIONS: [&str; 5] = ["model", "bath", "classical_noise", "sim", "output"];

/// Default sweep over classical-noise inverse memory times.
pub const GAMMA_GRID: [f64; 9] = [0.1, 0.2, 0.5, 1.0, 2.0, 5.0, 10.0, 20.0, 50.0];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PresetName {
    Fig2XiSurface,
    Fig3FrozenOffsets,
    Fig4Thresholds,
    Fig5EtaSurface,
    Fig6CoherenceVsNegativity,
    FigFiFCoefficients,
    Fig8Telegraph,
    Custom,
}

impl PresetName {
    pub const ALL: [PresetName; 8] = [
        PresetName::Fig2XiSurface,
        PresetName::Fig3FrozenOffsets,
        PresetName::Fig4Thresholds,
        PresetName::Fig5EtaSurface,
        PresetName::Fig6CoherenceVsNegativity,
        PresetName::FigFiFCoefficients,
        PresetName::Fig8Telegraph,
        PresetName::Custom,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PresetName::Fig2XiSurface => "fig2_xi_surface",
            PresetName::Fig3FrozenOffsets => "fig3_frozen_offsets",
            PresetName::Fig4Thresholds => "fig4_thresholds",
            PresetName::Fig5EtaSurface => "fig5_eta_surface",
            PresetName::Fig6CoherenceVsNegativity => "fig6_coherence_vs_negativity",
            PresetName::FigFiFCoefficients => "figFi_fcoefficients",
            PresetName::Fig8Telegraph => "fig8_telegraph",
            PresetName::Custom => "custom",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.name() == s)
    }

    /// Default key-value pairs; explicit configuration entries override them.
    pub fn defaults(self) -> Vec<(&'static str, String)> {
        let mut kv: Vec<(&'static str, String)> = match self {
            PresetName::Custom => return Vec::new(),
            _ => vec![
                ("model.omega0", "1".into()),
                ("model.omega_cavity", "1".into()),
                ("model.g0", "1".into()),
                ("model.kx0", "0.08".into()),
                ("model.n_max", "1".into()),
                ("model.init_e", fmt(std::f64::consts::FRAC_1_SQRT_2)),
                ("model.init_g", fmt(std::f64::consts::FRAC_1_SQRT_2)),
                ("bath.kind", "ou".into()),
                ("bath.strength", "1".into()),
                ("bath.gamma", "1".into()),
                ("bath.center", "0".into()),
                ("classical_noise.channel", "none".into()),
                ("sim.n_traj", "2000".into()),
                ("sim.seed", "1".into()),
                ("sim.t_max", "100".into()),
                ("sim.dt", "0.01".into()),
            ],
        };
        let grid = join(&GAMMA_GRID);
        let ou_noise = |kv: &mut Vec<(&'static str, String)>, channel: &str| {
            kv.push(("classical_noise.channel", channel.into()));
            kv.push(("classical_noise.process", "ou".into()));
            kv.push(("classical_noise.strength", "1".into()));
            kv.push(("classical_noise.gamma", "1".into()));
        };
        match self {
            PresetName::Fig2XiSurface => {
                ou_noise(&mut kv, "xi");
                kv.push(("sim.sweep_key", "classical_noise.gamma".into()));
                kv.push(("sim.sweep_values", grid));
            }
            PresetName::Fig3FrozenOffsets => {
                kv.push(("classical_noise.channel", "xi".into()));
                kv.push(("classical_noise.process", "constant".into()));
                kv.push(("classical_noise.offset", "0.05".into()));
                kv.push(("sim.n_traj", "1".into()));
                kv.push(("sim.sweep_key", "classical_noise.offset".into()));
                kv.push(("sim.sweep_values", "0.05, -0.05, 0".into()));
            }
            PresetName::Fig4Thresholds => {
                ou_noise(&mut kv, "xi");
                kv.push(("bath.gamma", "0.5".into()));
                kv.push(("sim.sweep_key", "bath.gamma".into()));
                kv.push(("sim.sweep_values", "0.2, 0.5, 1, 2, 5".into()));
                kv.push(("sim.sweep2_key", "classical_noise.gamma".into()));
                kv.push(("sim.sweep2_values", grid));
            }
            PresetName::Fig5EtaSurface => {
                ou_noise(&mut kv, "eta");
                kv.push(("model.g0", "0.1".into()));
                kv.push(("sim.sweep_key", "classical_noise.gamma".into()));
                kv.push(("sim.sweep_values", grid));
            }
            PresetName::Fig6CoherenceVsNegativity => {
                kv.push(("model.kx0", "0.1".into()));
                kv.push(("bath.strength", "0.5".into()));
                kv.push(("sim.n_traj", "1".into()));
            }
            PresetName::FigFiFCoefficients => {
                kv.push(("bath.gamma", "0.5".into()));
                kv.push(("sim.n_traj", "1".into()));
                kv.push(("sim.t_max", "20".into()));
            }
            PresetName::Fig8Telegraph => {
                // the telegraph amplitude is deliberately left to the user
                kv.push(("classical_noise.channel", "xi".into()));
                kv.push(("classical_noise.process", "telegraph".into()));
                kv.push(("classical_noise.p", "0.5".into()));
                kv.push(("sim.sweep_key", "classical_noise.p".into()));
                kv.push(("sim.sweep_values", "0.1, 0.25, 0.5, 0.75, 1".into()));
            }
            PresetName::Custom => {}
        }
        kv
    }
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| fmt(*x)).collect::<Vec<_>>().join(", ")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Kind {
    Float,
    Int,
    Bool,
    Complex,
    Text,
    FloatList,
    ComplexList,
}

const SCHEMA: &[(&str, Kind)] = &[
    ("model.omega0", Kind::Float),
    ("model.omega_cavity", Kind::Float),
    ("model.g0", Kind::Float),
    ("model.kx0", Kind::Float),
    ("model.n_max", Kind::Int),
    ("model.init_e", Kind::Complex),
    ("model.init_g", Kind::Complex),
    ("bath.kind", Kind::Text),
    ("bath.strength", Kind::Float),
    ("bath.gamma", Kind::Float),
    ("bath.center", Kind::Float),
    ("bath.gamma_low", Kind::Float),
    ("bath.gamma_high", Kind::Float),
    ("bath.components", Kind::Int),
    ("bath.weights", Kind::FloatList),
    ("bath.strengths", Kind::FloatList),
    ("bath.gammas", Kind::FloatList),
    ("bath.lags", Kind::FloatList),
    ("bath.values", Kind::ComplexList),
    ("classical_noise.channel", Kind::Text),
    ("classical_noise.process", Kind::Text),
    ("classical_noise.strength", Kind::Float),
    ("classical_noise.gamma", Kind::Float),
    ("classical_noise.center", Kind::Float),
    ("classical_noise.p", Kind::Float),
    ("classical_noise.amplitude", Kind::Float),
    ("classical_noise.flip_interval", Kind::Float),
    ("classical_noise.offset", Kind::Float),
    ("classical_noise.spectrum", Kind::Text),
    ("classical_noise.gamma_low", Kind::Float),
    ("classical_noise.gamma_high", Kind::Float),
    ("classical_noise.components", Kind::Int),
    ("classical_noise.weights", Kind::FloatList),
    ("classical_noise.strengths", Kind::FloatList),
    ("classical_noise.gammas", Kind::FloatList),
    ("classical_noise.lags", Kind::FloatList),
    ("classical_noise.values", Kind::ComplexList),
    ("classical_noise.seed_stream", Kind::Int),
    ("sim.preset", Kind::Text),
    ("sim.n_traj", Kind::Int),
    ("sim.seed", Kind::Int),
    ("sim.t_max", Kind::Float),
    ("sim.dt", Kind::Float),
    ("sim.record_stride", Kind::Int),
    ("sim.solver", Kind::Text),
    ("sim.signs", Kind::Text),
    ("sim.eta_frame", Kind::Text),
    ("sim.dephasing", Kind::Float),
    ("sim.threads", Kind::Int),
    ("sim.sweep_key", Kind::Text),
    ("sim.sweep_values", Kind::FloatList),
    ("sim.sweep2_key", Kind::Text),
    ("sim.sweep2_values", Kind::FloatList),
    ("output.dir", Kind::Text),
    ("output.full_errors", Kind::Bool),
    ("output.debug_trajectory", Kind::Bool),
    ("output.metric_horizon", Kind::Float),
    ("output.f_dt", Kind::Float),
];

fn kind_of(key: &str) -> Option<Kind> {
    SCHEMA.iter().find(|(k, _)| *k == key).map(|(_, t)| *t)
}

/// A value together with where it came from, for error messages.
#[derive(Clone, Debug, PartialEq)]
struct Entry {
    value: String,
    origin: String,
}

/// Drops a `#` or `;` comment that starts the line or follows whitespace.
fn strip_comment(line: &str) -> &str {
    let mut prev_ws = true;
    for (i, ch) in line.char_indices() {
        if (ch == '#' || ch == ';') && prev_ws {
            return &line[..i];
        }
        prev_ws = ch.is_whitespace();
    }
    line
}

/// Parses the document into `section.key → value`, collecting every problem.
fn parse_document(text: &str) -> std::result::Result<BTreeMap<String, Entry>, Vec<String>> {
    let mut out = BTreeMap::new();
    let mut errors = Vec::new();
    let mut section: Option<String> = None;
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = strip_comment(raw).trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('[') {
            match rest.strip_suffix(']').map(str::trim) {
                Some(name) if SECTIONS.contains(&name) => section = Some(name.to_string()),
                Some(name) => {
                    errors.push(format!("line {line_no}: unknown section [{name}]"));
                    section = None;
                }
                None => errors.push(format!("line {line_no}: malformed section header `{line}`")),
            }
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            errors.push(format!("line {line_no}: expected `key = value`, got `{line}`"));
            continue;
        };
        let k = k.trim();
        let key = match (&section, k.contains('.')) {
            (_, true) => k.to_string(),
            (Some(s), false) => format!("{s}.{k}"),
            (None, false) => {
                errors.push(format!("line {line_no}: key `{k}` appears outside any section"));
                continue;
            }
        };
        if kind_of(&key).is_none() {
            errors.push(format!("line {line_no}: unknown key `{key}`"));
            continue;
        }
        let entry = Entry { value: v.trim().to_string(), origin: format!("line {line_no}") };
        if let Some(prev) = out.insert(key.clone(), entry) {
            errors.push(format!("line {line_no}: duplicate key `{key}` (first set at {})", prev.origin));
        }
    }
    if errors.is_empty() {
        Ok(out)
    } else {
        Err(errors)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sweep {
    pub key: String,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OutputOptions {
    pub dir: PathBuf,
    pub full_errors: bool,
    pub debug_trajectory: bool,
    pub metric_horizon: f64,
    /// Coarse step of the two-time `F5` diagnostic.
    pub f_dt: f64,
}

/// A preset with the explicit overrides applied on top of its defaults.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentPreset {
    pub name: PresetName,
    pub overrides: BTreeMap<String, String>,
}

/// Fully validated experiment description.
#[derive(Clone, Debug, PartialEq)]
pub struct Experiment {
    pub preset: ExperimentPreset,
    pub config: EnsembleConfig,
    pub sweep: Option<Sweep>,
    pub sweep2: Option<Sweep>,
    pub output: OutputOptions,
    pub threads: Option<usize>,
    values: BTreeMap<String, Entry>,
}

struct Builder<'a> {
    values: &'a BTreeMap<String, Entry>,
    errors: Vec<String>,
}

impl<'a> Builder<'a> {
    fn raw(&mut self, key: &str, required: bool) -> Option<&'a Entry> {
        let e = self.values.get(key);
        if e.is_none() && required {
            self.errors.push(format!("missing required key `{key}`"));
        }
        e
    }

    fn bad(&mut self, key: &str, e: &Entry, what: &str) {
        self.errors.push(format!("`{key}` ({}): expected {what}, got `{}`", e.origin, e.value));
    }

    fn float(&mut self, key: &str) -> Option<f64> {
        let e = self.raw(key, true)?;
        match e.value.parse::<f64>() {
            Ok(x) if x.is_finite() => Some(x),
            _ => {
                self.bad(key, e, "a finite number");
                None
            }
        }
    }

    fn float_or(&mut self, key: &str, default: f64) -> Option<f64> {
        if self.values.contains_key(key) {
            self.float(key)
        } else {
            Some(default)
        }
    }

    fn int(&mut self, key: &str) -> Option<u64> {
        let e = self.raw(key, true)?;
        match e.value.parse::<u64>() {
            Ok(x) => Some(x),
            Err(_) => {
                self.bad(key, e, "a non-negative integer");
                None
            }
        }
    }

    fn int_or(&mut self, key: &str, default: u64) -> Option<u64> {
        if self.values.contains_key(key) {
            self.int(key)
        } else {
            Some(default)
        }
    }

    fn boolean_or(&mut self, key: &str, default: bool) -> Option<bool> {
        let Some(e) = self.raw(key, false) else { return Some(default) };
        match e.value.as_str() {
            "true" => Some(true),
            "false" => Some(false),
            _ => {
                self.bad(key, e, "`true` or `false`");
                None
            }
        }
    }

    fn complex(&mut self, key: &str) -> Option<C64> {
        let e = self.raw(key, true)?;
        match parse_complex(&e.value) {
            Some(z) => Some(z),
            None => {
                self.bad(key, e, "a complex number such as `0.5` or `0.5-0.1i`");
                None
            }
        }
    }

    fn text(&mut self, key: &str, choices: &[&str]) -> Option<&'a str> {
        let e = self.raw(key, true)?;
        if choices.is_empty() || choices.contains(&e.value.as_str()) {
            Some(e.value.as_str())
        } else {
            self.bad(key, e, &format!("one of {}", choices.join(", ")));
            None
        }
    }

    fn text_or(&mut self, key: &str, choices: &[&str], default: &'a str) -> Option<&'a str> {
        if self.values.contains_key(key) {
            self.text(key, choices)
        } else {
            Some(default)
        }
    }

    fn floats(&mut self, key: &str) -> Option<Vec<f64>> {
        let e = self.raw(key, true)?;
        let parsed: Option<Vec<f64>> = e
            .value
            .split(',')
            .map(|s| s.trim().parse::<f64>().ok().filter(|x| x.is_finite()))
            .collect();
        match parsed {
            Some(v) if !v.is_empty() => Some(v),
            _ => {
                self.bad(key, e, "a comma-separated list of numbers");
                None
            }
        }
    }

    fn complexes(&mut self, key: &str) -> Option<Vec<C64>> {
        let e = self.raw(key, true)?;
        let parsed: Option<Vec<C64>> = e.value.split(',').map(|s| parse_complex(s.trim())).collect();
        match parsed {
            Some(v) if !v.is_empty() => Some(v),
            _ => {
                self.bad(key, e, "a comma-separated list of complex numbers");
                None
            }
        }
    }

    fn correlation(&mut self, section: &str, kind_key: &str) -> Option<CorrelationSpec> {
        let k = |name: &str| format!("{section}.{name}");
        let kind = self.text(&k(kind_key), &["ou", "delta", "sum_ou", "one_over_f", "tabulated"])?;
        let spec = match kind {
            "ou" => {
                let strength = self.float(&k("strength"));
                let gamma = self.float(&k("gamma"));
                let center = self.float_or(&k("center"), 0.0);
                CorrelationSpec::Ou { strength: strength?, gamma: gamma?, center: center? }
            }
            "delta" => CorrelationSpec::Delta { strength: self.float(&k("strength"))? },
            "one_over_f" => {
                let strength = self.float(&k("strength"));
                let lo = self.float(&k("gamma_low"));
                let hi = self.float(&k("gamma_high"));
                let n = self.int_or(&k("components"), 200);
                match CorrelationSpec::one_over_f(strength?, lo?, hi?, n? as usize) {
                    Ok(s) => s,
                    Err(e) => {
                        self.errors.push(format!("`{section}`: {e}"));
                        return None;
                    }
                }
            }
            "sum_ou" => {
                let w = self.floats(&k("weights"));
                let s = self.floats(&k("strengths"));
                let g = self.floats(&k("gammas"));
                let (w, s, g) = (w?, s?, g?);
                if w.len() != s.len() || w.len() != g.len() {
                    self.errors.push(format!("`{section}`: weights, strengths and gammas differ in length"));
                    return None;
                }
                CorrelationSpec::SumOu(
                    w.iter()
                        .zip(&s)
                        .zip(&g)
                        .map(|((&weight, &strength), &gamma)| OuComponent { weight, strength, gamma })
                        .collect(),
                )
            }
            _ => {
                let lags = self.floats(&k("lags"));
                let values = self.complexes(&k("values"));
                CorrelationSpec::Tabulated { lags: lags?, values: values? }
            }
        };
        if let Err(e) = spec.validate() {
            self.errors.push(format!("`{section}`: {e}"));
            return None;
        }
        Some(spec)
    }

    fn classical(&mut self) -> Option<ClassicalNoiseSpec> {
        let channel = match self.text("classical_noise.channel", &["none", "xi", "eta"])? {
            "none" => NoiseChannel::None,
            "xi" => NoiseChannel::XiCoupling,
            _ => NoiseChannel::EtaFrequency,
        };
        let seed_stream = self.int_or("classical_noise.seed_stream", 0)?;
        if channel == NoiseChannel::None {
            return Some(ClassicalNoiseSpec { seed_stream, ..ClassicalNoiseSpec::none() });
        }
        let process = match self.text("classical_noise.process", &["ou", "telegraph", "constant", "spectral"])? {
            "ou" => {
                let strength = self.float("classical_noise.strength");
                let gamma = self.float("classical_noise.gamma");
                NoiseProcess::Ou { strength: strength?, gamma: gamma? }
            }
            "telegraph" => {
                let p = self.float("classical_noise.p");
                let amplitude = self.float("classical_noise.amplitude");
                let flip = if self.values.contains_key("classical_noise.flip_interval") {
                    Some(self.float("classical_noise.flip_interval")?)
                } else {
                    None
                };
                NoiseProcess::Telegraph { p: p?, amplitude: amplitude?, flip_interval: flip }
            }
            "constant" => NoiseProcess::ConstantOffset(self.float("classical_noise.offset")?),
            _ => NoiseProcess::Spectral(self.correlation("classical_noise", "spectrum")?),
        };
        let spec = ClassicalNoiseSpec { channel, process, seed_stream };
        if let Err(e) = spec.validate() {
            self.errors.push(format!("`classical_noise`: {e}"));
            return None;
        }
        Some(spec)
    }

    fn sweep(&mut self, key_key: &str, values_key: &str) -> Option<Option<Sweep>> {
        match (self.values.get(key_key), self.values.get(values_key)) {
            (None, None) => Some(None),
            (Some(_), None) | (None, Some(_)) => {
                self.errors.push(format!("`{key_key}` and `{values_key}` must be given together"));
                None
            }
            (Some(k), Some(_)) => {
                let key = k.value.clone();
                if !matches!(kind_of(&key), Some(Kind::Float | Kind::Int)) {
                    self.errors.push(format!("`{key_key}` ({}): `{key}` is not a numeric key", k.origin));
                    return None;
                }
                let values = self.floats(values_key)?;
                Some(Some(Sweep { key, values }))
            }
        }
    }
}

/// Parses `re`, `re+imi`, `re-imi` or `imi`.
pub fn parse_complex(s: &str) -> Option<C64> {
    let s = s.trim();
    if let Ok(x) = s.parse::<f64>() {
        return x.is_finite().then(|| C64::new(x, 0.0));
    }
    let body = s.strip_suffix('i')?;
    let bytes = body.as_bytes();
    let split = (1..bytes.len())
        .rev()
        .find(|&j| (bytes[j] == b'+' || bytes[j] == b'-') && !matches!(bytes[j - 1], b'e' | b'E'));
    let (re, im) = match split {
        Some(j) => (body[..j].parse::<f64>().ok()?, body[j..].parse::<f64>().ok()?),
        None => (0.0, body.parse::<f64>().ok()?),
    };
    (re.is_finite() && im.is_finite()).then(|| C64::new(re, im))
}

fn build(values: BTreeMap<String, Entry>, preset: PresetName) -> Result<Experiment> {
    let mut b = Builder { values: &values, errors: Vec::new() };
    let omega0 = b.float("model.omega0");
    let omega_cavity = b.float("model.omega_cavity");
    let g0 = b.float("model.g0");
    let kx0 = b.float("model.kx0");
    let n_max = b.int("model.n_max");
    let init_e = b.complex("model.init_e");
    let init_g = b.complex("model.init_g");
    let alpha1 = b.correlation("bath", "kind");
    let classical = b.classical();
    let n_traj = b.int("sim.n_traj");
    let seed = b.int("sim.seed");
    let t_max = b.float("sim.t_max");
    let dt = b.float("sim.dt");
    let stride = b.int_or("sim.record_stride", 10);
    let solver = b.text_or("sim.solver", &["exact1x", "meqhalf", "lindblad"], "meqhalf");
    let signs = b.text_or("sim.signs", &["consistent", "published"], "consistent");
    let frame = b.text_or("sim.eta_frame", &["direct", "rotated"], "direct");
    let dephasing = b.float_or("sim.dephasing", 0.0);
    let threads = if values.contains_key("sim.threads") { b.int("sim.threads").map(Some) } else { Some(None) };
    let sweep = b.sweep("sim.sweep_key", "sim.sweep_values");
    let sweep2 = b.sweep("sim.sweep2_key", "sim.sweep2_values");
    let dir = b.raw("output.dir", false).map(|e| e.value.clone()).unwrap_or_else(|| "out".into());
    let full_errors = b.boolean_or("output.full_errors", false);
    let debug_trajectory = b.boolean_or("output.debug_trajectory", false);
    let metric_horizon = b.float_or("output.metric_horizon", 100.0);
    let f_dt = b.float_or("output.f_dt", 0.05);
    if let Some(e) = values.get("sim.preset") {
        if PresetName::parse(&e.value).is_none() {
            let names: Vec<_> = PresetName::ALL.iter().map(|p| p.name()).collect();
            b.bad("sim.preset", e, &format!("one of {}", names.join(", ")));
        }
    }
    let mut errors = b.errors;
    let built = (|| {
        let params = ModelParams {
            omega0: omega0?,
            omega_cavity: omega_cavity?,
            g0: g0?,
            kx0: kx0?,
            n_max: n_max? as usize,
            init_atom: (init_e?, init_g?),
        };
        let mut config = EnsembleConfig::new(params, alpha1?, classical?);
        config.n_traj = n_traj? as usize;
        config.base_seed = seed?;
        config.t_max = t_max?;
        config.dt = dt?;
        config.record_stride = stride? as usize;
        config.solver = Solver::parse(solver?)?;
        config.convention = if signs? == "published" { SignConvention::Published } else { SignConvention::Consistent };
        config.frame = if frame? == "rotated" { EtaFrame::Rotated } else { EtaFrame::Direct };
        config.dephasing = dephasing?;
        let output = OutputOptions {
            dir: PathBuf::from(&dir),
            full_errors: full_errors?,
            debug_trajectory: debug_trajectory?,
            metric_horizon: metric_horizon?,
            f_dt: f_dt?,
        };
        Some((config, sweep?, sweep2?, output, threads?))
    })();
    let Some((config, sweep, sweep2, output, threads)) = built else {
        return Err(Error::Config(errors));
    };
    if let Err(Error::Config(more)) = config.validate() {
        errors.extend(more);
    }
    if threads == Some(0) {
        errors.push("`sim.threads` must be >= 1".into());
    }
    if !(output.f_dt > 0.0) {
        errors.push("`output.f_dt` must be > 0".into());
    }
    if !errors.is_empty() {
        return Err(Error::Config(errors));
    }
    let overrides = values
        .iter()
        .filter(|(_, e)| e.origin != "preset")
        .map(|(k, e)| (k.clone(), e.value.clone()))
        .collect();
    Ok(Experiment {
        preset: ExperimentPreset { name: preset, overrides },
        config,
        sweep,
        sweep2,
        output,
        threads: threads.map(|t| t as usize),
        values,
    })
}

/// Parses configuration text. `preset` and `overrides` take precedence over
/// the document (command-line flags).
pub fn parse_str(text: &str, preset: Option<&str>, overrides: &[(&str, String)]) -> Result<Experiment> {
    let mut doc = parse_document(text).map_err(Error::Config)?;
    for (k, v) in overrides {
        if kind_of(k).is_none() {
            return Err(Error::Config(vec![format!("unknown key `{k}`")]));
        }
        doc.insert(k.to_string(), Entry { value: v.clone(), origin: "command line".into() });
    }
    let name = match preset.map(str::to_string).or_else(|| doc.get("sim.preset").map(|e| e.value.clone())) {
        None => PresetName::Custom,
        Some(n) => PresetName::parse(&n).ok_or_else(|| {
            let names: Vec<_> = PresetName::ALL.iter().map(|p| p.name()).collect();
            Error::Config(vec![format!("unknown preset `{n}` (expected one of {})", names.join(", "))])
        })?,
    };
    doc.insert("sim.preset".into(), Entry { value: name.name().into(), origin: "preset".into() });
    let mut values: BTreeMap<String, Entry> = name
        .defaults()
        .into_iter()
        .map(|(k, v)| (k.to_string(), Entry { value: v, origin: "preset".into() }))
        .collect();
    values.extend(doc);
    build(values, name)
}

pub fn parse_config(path: &Path, preset: Option<&str>, overrides: &[(&str, String)]) -> Result<Experiment> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_str(&text, preset, overrides)
}

impl Experiment {
    /// Configuration with sweep keys set to the given values.
    pub fn config_with(&self, assignments: &[(&str, f64)]) -> Result<EnsembleConfig> {
        let mut values = self.values.clone();
        for (k, v) in assignments {
            values.insert(k.to_string(), Entry { value: fmt(*v), origin: format!("sweep {k}") });
        }
        build(values, self.preset.name).map(|e| e.config)
    }

    /// The same experiment with the classical channel switched off and one trajectory.
    pub fn baseline_of(config: &EnsembleConfig) -> EnsembleConfig {
        let mut c = config.clone();
        c.classical = ClassicalNoiseSpec { seed_stream: c.classical.seed_stream, ..ClassicalNoiseSpec::none() };
        c.n_traj = 1;
        c
    }

    /// Configuration text that parses back to this experiment.
    pub fn emit(&self) -> String {
        let mut by_section: BTreeMap<&str, Vec<(String, String)>> = BTreeMap::new();
        let mut push = |k: String, v: String| {
            let (s, rest) = k.split_once('.').expect("keys are qualified");
            let s = SECTIONS.iter().find(|x| **x == s).copied().expect("known section");
            by_section.entry(s).or_default().push((rest.to_string(), v));
        };
        for (k, v) in self.config.canonical() {
            push(k, v);
        }
        push("sim.preset".into(), self.preset.name.name().into());
        if let Some(t) = self.threads {
            push("sim.threads".into(), t.to_string());
        }
        for (n, s) in [("", &self.sweep), ("2", &self.sweep2)] {
            if let Some(s) = s {
                push(format!("sim.sweep{n}_key"), s.key.clone());
                push(format!("sim.sweep{n}_values"), join(&s.values));
            }
        }
        push("output.dir".into(), self.output.dir.display().to_string());
        push("output.full_errors".into(), self.output.full_errors.to_string());
        push("output.debug_trajectory".into(), self.output.debug_trajectory.to_string());
        push("output.metric_horizon".into(), fmt(self.output.metric_horizon));
        push("output.f_dt".into(), fmt(self.output.f_dt));
        let mut out = String::new();
        for s in SECTIONS {
            if let Some(entries) = by_section.get(s) {
                out.push_str(&format!("[{s}]\n"));
                for (k, v) in entries {
                    out.push_str(&format!("{k} = {v}\n"));
                }
                out.push('\n');
            }
        }
        out
    }
}

pub(crate) fn convention_name(c: SignConvention) -> &'static str {
    match c {
        SignConvention::Consistent => "consistent",
        SignConvention::Published => "published",
    }
}

pub(crate) fn frame_name(f: EtaFrame) -> &'static str {
    match f {
        EtaFrame::Direct => "direct",
        EtaFrame::Rotated => "rotated",
    }
}

/// Keys describing a correlation function under `section`.
pub(crate) fn correlation_kv(section: &str, kind_key: &str, spec: &CorrelationSpec) -> Vec<(String, String)> {
    let k = |n: &str| format!("{section}.{n}");
    let list = |v: Vec<f64>| join(&v);
    match spec {
        CorrelationSpec::Ou { strength, gamma, center } => vec![
            (k(kind_key), "ou".into()),
            (k("strength"), fmt(*strength)),
            (k("gamma"), fmt(*gamma)),
            (k("center"), fmt(*center)),
        ],
        CorrelationSpec::Delta { strength } => vec![(k(kind_key), "delta".into()), (k("strength"), fmt(*strength))],
        CorrelationSpec::SumOu(c) => vec![
            (k(kind_key), "sum_ou".into()),
            (k("weights"), list(c.iter().map(|c| c.weight).collect())),
            (k("strengths"), list(c.iter().map(|c| c.strength).collect())),
            (k("gammas"), list(c.iter().map(|c| c.gamma).collect())),
        ],
        CorrelationSpec::Tabulated { lags, values } => vec![
            (k(kind_key), "tabulated".into()),
            (k("lags"), list(lags.clone())),
            (k("values"), values.iter().map(|z| fmt_c(*z)).collect::<Vec<_>>().join(", ")),
        ],
    }
}

pub(crate) fn classical_kv(spec: &ClassicalNoiseSpec) -> Vec<(String, String)> {
    let mut kv = vec![(
        "classical_noise.channel".to_string(),
        match spec.channel {
            NoiseChannel::None => "none",
            NoiseChannel::XiCoupling => "xi",
            NoiseChannel::EtaFrequency => "eta",
        }
        .to_string(),
    )];
    kv.push(("classical_noise.seed_stream".into(), spec.seed_stream.to_string()));
    if spec.channel == NoiseChannel::None {
        return kv;
    }
    let k = |n: &str| format!("classical_noise.{n}");
    match &spec.process {
        NoiseProcess::Ou { strength, gamma } => kv.extend([
            (k("process"), "ou".into()),
            (k("strength"), fmt(*strength)),
            (k("gamma"), fmt(*gamma)),
        ]),
        NoiseProcess::Telegraph { p, amplitude, flip_interval } => {
            kv.extend([(k("process"), "telegraph".into()), (k("p"), fmt(*p)), (k("amplitude"), fmt(*amplitude))]);
            if let Some(f) = flip_interval {
                kv.push((k("flip_interval"), fmt(*f)));
            }
        }
        NoiseProcess::ConstantOffset(c) => kv.extend([(k("process"), "constant".into()), (k("offset"), fmt(*c))]),
        NoiseProcess::Spectral(s) => {
            kv.push((k("process"), "spectral".into()));
            kv.extend(correlation_kv("classical_noise", "spectrum", s));
        }
    }
    kv
}

fn run_with(config: &EnsembleConfig, threads: Option<usize>) -> Result<EnsembleResult> {
    match threads {
        Some(t) => run_ensemble_with_threads(config, t),
        None => run_ensemble(config),
    }
}

fn header(config: &EnsembleConfig) -> String {
    format!("hiercoh {} config_hash={}", env!("CARGO_PKG_VERSION"), config.config_hash())
}

fn create(path: &Path) -> Result<std::io::BufWriter<std::fs::File>> {
    std::fs::File::create(path).map(std::io::BufWriter::new).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, f: impl FnOnce(&mut dyn Write) -> std::io::Result<()>) -> Result<()> {
    let mut w = create(path)?;
    f(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

/// Runs the experiment and writes its CSV files into `out_dir`.
pub fn run_preset(exp: &Experiment, out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let name = exp.preset.name;
    let stem = name.name();
    let mut written = Vec::new();
    let threads = exp.threads;
    match name {
        PresetName::FigFiFCoefficients => {
            let c = &exp.config;
            let rows = f5_diagnostic(
                C64::new(c.params.static_coupling(), 0.0),
                c.params.omega0,
                c.params.omega_cavity,
                &c.alpha1,
                c.t_max,
                exp.output.f_dt,
                c.convention,
            )?;
            let path = out_dir.join(format!("{stem}.csv"));
            write_text(&path, |w| {
                writeln!(w, "# {}", header(c))?;
                write_f_csv(&rows, w)
            })?;
            written.push(path);
        }
        PresetName::Fig6CoherenceVsNegativity => {
            let r = run_with(&exp.config, threads)?;
            let coh = r.coherence();
            let neg: Vec<f64> = r.mean.iter().map(|m| -m.negativity).collect();
            let path = out_dir.join(format!("{stem}.csv"));
            write_text(&path, |w| {
                writeln!(w, "# {}", header(&exp.config))?;
                writeln!(w, "# pearson={}", measures::pearson(&coh, &neg))?;
                writeln!(w, "t,coherence,minus_negativity")?;
                for ((t, c), n) in r.times.iter().zip(&coh).zip(&neg) {
                    writeln!(w, "{t},{c},{n}")?;
                }
                Ok(())
            })?;
            written.push(path);
        }
        PresetName::Fig4Thresholds => written.extend(run_thresholds(exp, out_dir)?),
        _ => match &exp.sweep {
            None => {
                let r = run_with(&exp.config, threads)?;
                ensemble::write_outputs(out_dir, stem, &exp.config, &r)?;
                written.push(out_dir.join(format!("{stem}.csv")));
                if exp.output.full_errors {
                    let path = out_dir.join(format!("{stem}_full.csv"));
                    write_text(&path, |w| r.write_full_csv(w))?;
                    written.push(path);
                }
            }
            Some(sweep) => written.extend(run_sweep(exp, sweep, out_dir)?),
        },
    }
    if exp.output.debug_trajectory {
        let path = out_dir.join(format!("{stem}_trajectory0.csv"));
        let states = ensemble::exact_trajectory(&exp.config, 0)?;
        let stride_dt = exp.config.record_stride as f64 * exp.config.dt;
        write_text(&path, |w| {
            writeln!(w, "# {}", header(&exp.config))?;
            crate::exact1x::write_csv(&states, stride_dt, w)
        })?;
        written.push(path);
    }
    Ok(written)
}

fn baseline_for(config: &EnsembleConfig, cache: &mut Vec<(String, EnsembleResult)>, threads: Option<usize>) -> Result<EnsembleResult> {
    let b = Experiment::baseline_of(config);
    let h = b.config_hash();
    if let Some((_, r)) = cache.iter().find(|(k, _)| *k == h) {
        return Ok(r.clone());
    }
    let r = run_with(&b, threads)?;
    cache.push((h, r.clone()));
    Ok(r)
}

fn run_sweep(exp: &Experiment, sweep: &Sweep, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let stem = exp.preset.name.name();
    let mut cache = Vec::new();
    let mut members = Vec::new();
    let mut surface = Vec::new();
    for &x in &sweep.values {
        let cfg = exp.config_with(&[(&sweep.key, x)])?;
        let base = baseline_for(&cfg, &mut cache, exp.threads)?;
        let r = run_with(&cfg, exp.threads)?;
        surface.extend(difference_surface(&[(x, r.clone())], &base)?);
        members.push((x, r, base));
    }
    let mut written = Vec::new();
    let path = out_dir.join(format!("{stem}.csv"));
    write_text(&path, |w| write_surface_csv(&surface, &header(&exp.config), w))?;
    written.push(path);
    let base = &members[0].2;
    ensemble::write_outputs(out_dir, &format!("{stem}_baseline"), &Experiment::baseline_of(&exp.config), base)?;
    written.push(out_dir.join(format!("{stem}_baseline.csv")));
    if exp.output.full_errors {
        for (x, r, _) in &members {
            let path = out_dir.join(format!("{stem}_{}_full.csv", fmt(*x)));
            write_text(&path, |w| r.write_full_csv(w))?;
            written.push(path);
        }
    }
    if exp.preset.name == PresetName::Fig3FrozenOffsets {
        let signed: Vec<&EnsembleResult> = members.iter().filter(|(x, _, _)| *x != 0.0).map(|(_, r, _)| r).collect();
        let zero = members.iter().find(|(x, _, _)| *x == 0.0).map(|(_, r, _)| r).unwrap_or(base);
        if !signed.is_empty() {
            let path = out_dir.join(format!("{stem}_average.csv"));
            write_text(&path, |w| {
                writeln!(w, "# {}", header(&exp.config))?;
                writeln!(w, "t,coherence_average,coherence_zero")?;
                for (i, t) in zero.times.iter().enumerate() {
                    let avg = signed.iter().map(|r| r.mean[i].coherence).sum::<f64>() / signed.len() as f64;
                    writeln!(w, "{t},{avg},{}", zero.mean[i].coherence)?;
                }
                Ok(())
            })?;
            written.push(path);
        }
    }
    Ok(written)
}

fn run_thresholds(exp: &Experiment, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let stem = exp.preset.name.name();
    let (Some(s1), Some(s2)) = (&exp.sweep, &exp.sweep2) else {
        return Err(Error::Config(vec![format!("{stem} needs both sweep and sweep2 keys")]));
    };
    let mut cache = Vec::new();
    let mut rows = Vec::new();
    for &x in &s1.values {
        for &y in &s2.values {
            let cfg = exp.config_with(&[(&s1.key, x), (&s2.key, y)])?;
            let base = baseline_for(&cfg, &mut cache, exp.threads)?;
            let r = run_with(&cfg, exp.threads)?;
            let m = ensemble::protection_estimate(&r, &base, exp.output.metric_horizon)?;
            rows.push((x, y, m.value));
        }
    }
    let path = out_dir.join(format!("{stem}_metric.csv"));
    write_text(&path, |w| {
        writeln!(w, "# {} sweep_x={} gamma2={}", header(&exp.config), s1.key, s2.key)?;
        writeln!(w, "sweep_x,gamma2,metric")?;
        for (x, y, m) in &rows {
            writeln!(w, "{x},{y},{m}")?;
        }
        Ok(())
    })?;
    Ok(vec![path])
}

/// Writes the classical-noise paths of the first trajectories (at most 8).
pub fn noise_dump(exp: &Experiment, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let c = &exp.config;
    if c.classical.channel == NoiseChannel::None {
        return Err(Error::Config(vec!["noise-dump needs an active classical channel".into()]));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let grid = TimeGrid::half_step(c.dt, c.n_steps())?;
    let mut written = Vec::new();
    for i in 0..c.n_traj.min(8) {
        let path = sample_process(&c.classical.process, grid, c.trajectory_seed(i), c.dt)?;
        let file = out_dir.join(format!("noise_{i}.csv"));
        write_text(&file, |w| {
            writeln!(w, "# {} trajectory={i}", header(c))?;
            path.write_csv(w)
        })?;
        written.push(file);
    }
    Ok(written)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlotKind {
    Surface,
    Lines,
}

/// Reshapes a long-format sweep CSV into a gnuplot `nonuniform matrix`
/// (first row: column count then `t` values; each further row: sweep value
/// then data), or passes line data through unchanged.
pub fn export_plotdata(csv: &Path, kind: PlotKind) -> Result<String> {
    let text = std::fs::read_to_string(csv).map_err(|e| Error::io(csv, e))?;
    if kind == PlotKind::Lines {
        return Ok(text);
    }
    let mut lines = text.lines().filter(|l| !l.trim().is_empty() && !l.starts_with('#'));
    let head: Vec<&str> = lines.next().ok_or_else(|| Error::Shape("empty CSV".into()))?.split(',').map(str::trim).collect();
    let col = |name: &str| head.iter().position(|h| *h == name);
    let (Some(xs), Some(ts)) = (col("sweep_value"), col("t")) else {
        return Err(Error::Shape("surface export needs `sweep_value` and `t` columns".into()));
    };
    let zs = col("delta_vs_baseline")
        .or_else(|| col("coherence_mean"))
        .ok_or_else(|| Error::Shape("no value column to export".into()))?;
    let mut rows: Vec<(f64, Vec<(f64, f64)>)> = Vec::new();
    for (i, l) in lines.enumerate() {
        let f: Vec<&str> = l.split(',').map(str::trim).collect();
        let get = |j: usize| -> Result<f64> {
            f.get(j)
                .and_then(|s| s.parse::<f64>().ok())
                .ok_or_else(|| Error::Shape(format!("row {}: bad or missing field {j}", i + 2)))
        };
        let (x, t, z) = (get(xs)?, get(ts)?, get(zs)?);
        match rows.iter_mut().find(|(v, _)| *v == x) {
            Some((_, r)) => r.push((t, z)),
            None => rows.push((x, vec![(t, z)])),
        }
    }
    if rows.len() < 2 {
        return Err(Error::Shape(format!("a surface needs at least two sweep values, found {}", rows.len())));
    }
    let times: Vec<f64> = rows[0].1.iter().map(|(t, _)| *t).collect();
    for (x, r) in &rows {
        if r.len() != times.len() || r.iter().zip(&times).any(|((t, _), u)| t != u) {
            return Err(Error::Shape(format!("sweep value {x} has a different time grid (ragged input)")));
        }
    }
    let mut out = String::new();
    out.push_str(&times.len().to_string());
    for t in &times {
        out.push_str(&format!(" {t}"));
    }
    out.push('\n');
    for (x, r) in &rows {
        out.push_str(&x.to_string());
        for (_, z) in r {
            out.push_str(&format!(" {z}"));
        }
        out.push('\n');
    }
    Ok(out)
}
