//! Experiment harness behind the `infedit` binary: config parsing, the four
//! commands, and their JSON/CSV reports.
//!
//! Config files are flat TOML. Unknown keys are rejected.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, ensure, Context};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::attention::{AlignmentMap, BlendSpec, ControlSchedule};
use crate::compare::compare_samplers;
use crate::denoiser::{
    Condition, ConditionalDenoiser, GaussianComponent, GaussianOracle, MixtureOracle, ToyAttentionDenoiser,
    ToyDenoiserConfig,
};
use crate::infedit::{infedit_run, NoiseRefiner, VanillaRefiner};
use crate::inversion::virtual_invert_strided;
use crate::io::{read_latent, write_latent};
use crate::latent::Latent;
use crate::metrics::{mse, psnr, ssim};
use crate::rng::{NoiseStreams, Purpose};
use crate::schedules::{make_linear_schedule, make_timesteps, TimestepSequence, VarianceSchedule};
use crate::uac::UacRefiner;

pub const SCHEMA_VERSION: u32 = 1;
/// `reconstruct` fails when any run's error exceeds this.
pub const RECONSTRUCTION_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Only "linear" is supported.
    pub schedule: String,
    pub total_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Number of sampling timesteps (N - 1).
    pub steps: usize,
    pub seed: u64,
    /// Consecutive seeds starting at `seed`.
    pub sweep: usize,
    pub trace_stride: usize,
    /// Source latent file; synthetic when absent.
    pub input: Option<PathBuf>,
    /// Synthetic latent shape for oracle denoisers.
    pub shape: Vec<usize>,
    /// "gaussian", "mixture" or "toy".
    pub denoiser: String,
    /// Constant value of each component mean; "gaussian" uses the first.
    pub means: Vec<f64>,
    pub std: f64,
    pub toy_seed: u64,
    pub grid_h: usize,
    pub grid_w: usize,
    pub channels: usize,
    pub token_dim: usize,
    pub max_tokens: usize,
    pub source_tokens: Vec<u32>,
    pub target_tokens: Vec<u32>,
    /// "none" or "uac".
    pub control: String,
    pub tau_c: Option<usize>,
    pub tau_s: Option<usize>,
    pub a_src: f64,
    pub a_tgt: f64,
    /// `[target_index, source_index]` pairs.
    pub alignment: Vec<[usize; 2]>,
    pub blend_target_tokens: Vec<usize>,
    pub blend_source_tokens: Vec<usize>,
    /// Inputs of the `metrics` command.
    pub a: Option<PathBuf>,
    pub b: Option<PathBuf>,
    pub max_val: f64,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schedule: "linear".into(),
            total_steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            steps: 12,
            seed: 0,
            sweep: 1,
            trace_stride: 1,
            input: None,
            shape: vec![4, 8, 8],
            denoiser: "mixture".into(),
            means: vec![-2.0, 2.0],
            std: 0.1,
            toy_seed: 0,
            grid_h: 8,
            grid_w: 8,
            channels: 4,
            token_dim: 16,
            max_tokens: 16,
            source_tokens: vec![0],
            target_tokens: vec![1],
            control: "none".into(),
            tau_c: None,
            tau_s: None,
            a_src: 0.3,
            a_tgt: 0.3,
            alignment: Vec::new(),
            blend_target_tokens: Vec::new(),
            blend_source_tokens: Vec::new(),
            a: None,
            b: None,
            max_val: 1.0,
            out_dir: PathBuf::from("out"),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> anyhow::Result<Self> {
        let cfg: Self = toml::from_str(text).context("parsing config")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::from_toml_str(&text).with_context(|| format!("in config {}", path.display()))
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        ensure!(self.schedule == "linear", "unknown schedule {:?} (only \"linear\")", self.schedule);
        ensure!(self.total_steps >= 1, "total_steps must be >= 1");
        ensure!(self.steps >= 1 && self.steps <= self.total_steps, "steps must lie in [1, total_steps]");
        ensure!(self.sweep >= 1, "sweep must be >= 1");
        ensure!(
            matches!(self.denoiser.as_str(), "gaussian" | "mixture" | "toy"),
            "unknown denoiser {:?} (gaussian, mixture, toy)",
            self.denoiser
        );
        ensure!(matches!(self.control.as_str(), "none" | "uac"), "unknown control {:?} (none, uac)", self.control);
        ensure!(self.std.is_finite() && self.std >= 0.0, "std must be >= 0");
        ensure!(!self.means.is_empty(), "means must not be empty");
        ensure!(!self.shape.is_empty() && self.shape.iter().all(|&d| d > 0), "shape dims must be positive");
        ensure!(!self.source_tokens.is_empty() && !self.target_tokens.is_empty(), "token lists must not be empty");
        ensure!(self.max_val > 0.0, "max_val must be positive");
        for (name, a) in [("a_src", self.a_src), ("a_tgt", self.a_tgt)] {
            ensure!(a > 0.0 && a <= 1.0, "{name} must lie in (0, 1]");
        }
        for tau in [self.tau_c, self.tau_s].into_iter().flatten() {
            ensure!(tau <= self.total_steps + 1, "tau_c / tau_s must not exceed total_steps + 1");
        }
        if let Some(p) = &self.input {
            ensure!(p.exists(), "input {} does not exist", p.display());
        }
        Ok(())
    }

    pub fn variance_schedule(&self) -> anyhow::Result<VarianceSchedule> {
        Ok(make_linear_schedule(self.total_steps, self.beta_start, self.beta_end)?)
    }

    pub fn timesteps(&self) -> anyhow::Result<TimestepSequence> {
        Ok(make_timesteps(self.total_steps, self.steps + 1)?)
    }

    fn seeds(&self) -> Vec<u64> {
        (0..self.sweep as u64).map(|i| self.seed.wrapping_add(i)).collect()
    }

    fn latent_shape(&self) -> Vec<usize> {
        if self.denoiser == "toy" {
            vec![self.channels, self.grid_h, self.grid_w]
        } else {
            self.shape.clone()
        }
    }

    fn components(&self) -> anyhow::Result<Vec<GaussianComponent>> {
        let shape = self.latent_shape();
        self.means
            .iter()
            .map(|&m| Ok(GaussianComponent::new(Latent::filled(&shape, m), self.std)?))
            .collect()
    }

    pub fn build_denoiser(&self, schedule: &VarianceSchedule) -> anyhow::Result<Box<dyn ConditionalDenoiser>> {
        Ok(match self.denoiser.as_str() {
            "gaussian" => {
                let c = self.components()?.swap_remove(0);
                Box::new(GaussianOracle::new(c.mu, c.s, schedule.clone())?)
            }
            "mixture" => Box::new(MixtureOracle::new(self.components()?, schedule.clone())?),
            "toy" => {
                let cfg = ToyDenoiserConfig {
                    seed: self.toy_seed,
                    grid_h: self.grid_h,
                    grid_w: self.grid_w,
                    channels: self.channels,
                    token_dim: self.token_dim,
                    max_tokens: self.max_tokens,
                };
                Box::new(ToyAttentionDenoiser::new(cfg, schedule)?)
            }
            other => bail!("unknown denoiser {other:?}"),
        })
    }

    pub fn build_refiner(&self) -> anyhow::Result<Box<dyn NoiseRefiner>> {
        if self.control == "none" {
            return Ok(Box::new(VanillaRefiner));
        }
        let pairs: Vec<(usize, usize)> = self.alignment.iter().map(|p| (p[0], p[1])).collect();
        let alignment = AlignmentMap::from_pairs(&pairs, self.target_tokens.len(), self.source_tokens.len())?;
        let blend = BlendSpec::new(
            self.blend_target_tokens.iter().copied().collect::<BTreeSet<_>>(),
            self.blend_source_tokens.iter().copied().collect::<BTreeSet<_>>(),
            self.a_tgt,
            self.a_src,
        )?;
        let half = self.total_steps / 2;
        let sched = ControlSchedule::new(
            self.tau_c.unwrap_or(half),
            self.tau_s.unwrap_or(half),
            self.total_steps,
        )?;
        Ok(Box::new(UacRefiner::new(alignment, blend, sched)))
    }

    /// Reference latent: the input file, or a seed-derived synthetic draw
    /// (from the source component for oracle denoisers, standard normal for
    /// the toy denoiser).
    fn source_latent(&self, seed: u64) -> anyhow::Result<Latent> {
        if let Some(p) = &self.input {
            return read_latent(p).with_context(|| format!("reading {}", p.display()));
        }
        let mut rng = NoiseStreams::new(seed).stream(Purpose::Data, 0);
        Ok(match self.denoiser.as_str() {
            "toy" => Latent::randn(&self.latent_shape(), &mut rng),
            _ => {
                let comps = self.components()?;
                let idx = (self.source_tokens[0] as usize).min(comps.len() - 1);
                comps[idx].sample(&mut rng)
            }
        })
    }
}

/// Overrides from the command line.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut ExperimentConfig) {
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out_dir {
            cfg.out_dir = o.clone();
        }
    }
}

/// Outcome of a command: the JSON summary and whether it passed its gate.
#[derive(Debug, Clone)]
pub struct CommandReport {
    pub summary: Value,
    pub ok: bool,
}

fn timestamp() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

fn write_json(path: &Path, value: &Value) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn run_dir(out: &Path, seed: u64) -> anyhow::Result<PathBuf> {
    let dir = out.join(format!("seed-{seed}"));
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

/// JSON has no infinity; identical inputs report the string "inf".
fn db_value(v: f64) -> Value {
    if v.is_infinite() {
        Value::String("inf".into())
    } else {
        json!(v)
    }
}

pub fn cmd_reconstruct(cfg: &ExperimentConfig) -> anyhow::Result<CommandReport> {
    let schedule = cfg.variance_schedule()?;
    let taus = cfg.timesteps()?;
    fs::create_dir_all(&cfg.out_dir)?;

    let runs: Vec<Value> = cfg
        .seeds()
        .into_par_iter()
        .map(|seed| -> anyhow::Result<Value> {
            let z0 = cfg.source_latent(seed)?;
            let mut rng = NoiseStreams::new(seed).stream(Purpose::Custom(0), 0);
            let (z, trace) = virtual_invert_strided(&z0, &taus, &schedule, &mut rng, cfg.trace_stride)?;
            let error = z.max_abs_diff(&z0)?;
            let dir = run_dir(&cfg.out_dir, seed)?;
            let out_path = dir.join("reconstructed.dlt");
            write_latent(&out_path, &z)?;
            let trace_json: Vec<Value> = trace
                .records
                .iter()
                .map(|r| {
                    Ok(json!({
                        "step": r.step,
                        "timestep": r.timestep,
                        "max_abs_error": r.z.max_abs_diff(&z0)?,
                        "z_t_norm": r.z_t.l2_norm(),
                        "eps_cons_norm": r.eps_cons.l2_norm(),
                    }))
                })
                .collect::<crate::Result<_>>()?;
            Ok(json!({
                "seed": seed,
                "max_abs_error": error,
                "output": out_path,
                "trace": trace_json,
            }))
        })
        .collect::<anyhow::Result<_>>()?;

    let worst = runs.iter().filter_map(|r| r["max_abs_error"].as_f64()).fold(0.0f64, f64::max);
    let ok = worst <= RECONSTRUCTION_TOLERANCE;
    let summary = json!({
        "schema": SCHEMA_VERSION,
        "command": "reconstruct",
        "steps": cfg.steps,
        "timesteps": taus.as_slice(),
        "seeds": cfg.seeds(),
        "max_abs_error": worst,
        "tolerance": RECONSTRUCTION_TOLERANCE,
        "passed": ok,
        "runs": runs,
        "created_at_unix": timestamp(),
    });
    write_json(&cfg.out_dir.join("reconstruct.json"), &summary)?;
    Ok(CommandReport { summary, ok })
}

pub fn cmd_edit(cfg: &ExperimentConfig) -> anyhow::Result<CommandReport> {
    let schedule = cfg.variance_schedule()?;
    let taus = cfg.timesteps()?;
    let denoiser = cfg.build_denoiser(&schedule)?;
    let refiner = cfg.build_refiner()?;
    let c_src = Condition::new(cfg.source_tokens.clone())?;
    let c_tgt = Condition::new(cfg.target_tokens.clone())?;
    refiner.validate(denoiser.as_ref(), &c_src, &c_tgt)?;
    fs::create_dir_all(&cfg.out_dir)?;

    let results: Vec<(Value, Latent, Latent)> = cfg
        .seeds()
        .into_par_iter()
        .map(|seed| -> anyhow::Result<(Value, Latent, Latent)> {
            let z0_src = cfg.source_latent(seed)?;
            let outcome = infedit_run(
                &z0_src,
                &c_src,
                &c_tgt,
                denoiser.as_ref(),
                &taus,
                &schedule,
                refiner.as_ref(),
                &NoiseStreams::new(seed),
            )?;
            let dir = run_dir(&cfg.out_dir, seed)?;
            let out_path = dir.join("z0_tgt.dlt");
            write_latent(&out_path, &outcome.z0_tgt)?;
            if let Some(lay) = outcome.states.last().and_then(|s| s.z0_lay.as_ref()) {
                write_latent(dir.join("z0_lay.dlt"), lay)?;
            }
            let mut csv = format!("# schema: {SCHEMA_VERSION}\nstep,timestep,z0_distance,eps_gap\n");
            for d in &outcome.diagnostics {
                writeln!(csv, "{},{},{:e},{:e}", d.step, d.timestep, d.z0_distance, d.eps_gap)?;
            }
            let csv_path = dir.join("steps.csv");
            fs::write(&csv_path, csv)?;
            let final_distance = outcome.diagnostics.last().map(|d| d.z0_distance).unwrap_or(0.0);
            let summary = json!({
                "seed": seed,
                "final_z0_distance": final_distance,
                "output": out_path,
                "steps_csv": csv_path,
            });
            Ok((summary, z0_src, outcome.z0_tgt))
        })
        .collect::<anyhow::Result<_>>()?;

    let n = results.len() as f64;
    let len = results[0].2.len();
    let mut mean_tgt = vec![0.0; len];
    for (_, _, z) in &results {
        for (m, v) in mean_tgt.iter_mut().zip(z.iter()) {
            *m += v / n;
        }
    }
    let target_mean_deviation = match cfg.denoiser.as_str() {
        "toy" => Value::Null,
        _ => {
            let idx = cfg.target_tokens[0] as usize;
            match cfg.means.get(if cfg.denoiser == "gaussian" { 0 } else { idx }) {
                Some(&mu) => json!(mean_tgt.iter().map(|m| (m - mu).abs()).fold(0.0f64, f64::max)),
                None => Value::Null,
            }
        }
    };
    let max_final_distance = results
        .iter()
        .filter_map(|(r, _, _)| r["final_z0_distance"].as_f64())
        .fold(0.0f64, f64::max);
    let summary = json!({
        "schema": SCHEMA_VERSION,
        "command": "edit",
        "denoiser": denoiser.name(),
        "control": cfg.control,
        "steps": cfg.steps,
        "timesteps": taus.as_slice(),
        "seeds": cfg.seeds(),
        "max_final_z0_distance": max_final_distance,
        "target_mean_max_deviation": target_mean_deviation,
        "runs": results.iter().map(|(r, _, _)| r.clone()).collect::<Vec<_>>(),
        "created_at_unix": timestamp(),
    });
    write_json(&cfg.out_dir.join("edit.json"), &summary)?;
    Ok(CommandReport { summary, ok: true })
}

pub fn cmd_compare_samplers(cfg: &ExperimentConfig) -> anyhow::Result<CommandReport> {
    ensure!(
        matches!(cfg.denoiser.as_str(), "gaussian" | "mixture"),
        "compare-samplers needs an analytic oracle denoiser (gaussian or mixture), got {:?}",
        cfg.denoiser
    );
    let schedule = cfg.variance_schedule()?;
    let taus = cfg.timesteps()?;
    let denoiser = cfg.build_denoiser(&schedule)?;
    let c = Condition::new(cfg.source_tokens.clone())?;
    let z0 = cfg.source_latent(cfg.seed)?;
    let mut rng = ChaCha8Rng::from_rng(NoiseStreams::new(cfg.seed).stream(Purpose::Custom(1), 0))?;
    let rows = compare_samplers(&z0, denoiser.as_ref(), &c, &taus, &schedule, &mut rng)?;

    fs::create_dir_all(&cfg.out_dir)?;
    let mut csv = format!("# schema: {SCHEMA_VERSION}\nstrategy,step,timestep,max_abs_error,mse\n");
    for r in &rows {
        writeln!(csv, "{},{},{},{:e},{:e}", r.strategy.as_str(), r.step, r.timestep, r.max_abs_error, r.mse)?;
    }
    let csv_path = cfg.out_dir.join("compare.csv");
    fs::write(&csv_path, &csv)?;

    let final_of = |s: crate::compare::Strategy| rows.iter().filter(|r| r.strategy == s).last().map(|r| r.max_abs_error);
    let ddim = final_of(crate::compare::Strategy::DdimInversion).unwrap_or(f64::NAN);
    let ddcm = final_of(crate::compare::Strategy::Ddcm).unwrap_or(f64::NAN);
    let summary = json!({
        "schema": SCHEMA_VERSION,
        "command": "compare-samplers",
        "steps": cfg.steps,
        "std": cfg.std,
        "final_error_ddim_inversion": ddim,
        "final_error_ddcm": ddcm,
        "csv": csv_path,
        "created_at_unix": timestamp(),
    });
    write_json(&cfg.out_dir.join("compare.json"), &summary)?;
    Ok(CommandReport { summary, ok: ddcm <= 1e-12 })
}

pub fn cmd_metrics(cfg: &ExperimentConfig) -> anyhow::Result<CommandReport> {
    let (Some(pa), Some(pb)) = (&cfg.a, &cfg.b) else {
        bail!("metrics needs both `a` and `b` latent paths in the config");
    };
    let a = read_latent(pa).with_context(|| format!("reading {}", pa.display()))?;
    let b = read_latent(pb).with_context(|| format!("reading {}", pb.display()))?;
    let m = mse(&a, &b)?;
    let p = psnr(&a, &b, cfg.max_val)?;
    let s = match a.shape() {
        [_, _] => Some(ssim(&a, &b)?),
        [c, h, w] => {
            // mean over channels
            let mut acc = 0.0;
            for ch in 0..*c {
                let slice = |z: &Latent| {
                    let v = z.to_vec()[ch * h * w..(ch + 1) * h * w].to_vec();
                    Latent::from_vec(&[*h, *w], v)
                };
                acc += ssim(&slice(&a)?, &slice(&b)?)?;
            }
            Some(acc / *c as f64)
        }
        _ => None,
    };
    let summary = json!({
        "schema": SCHEMA_VERSION,
        "command": "metrics",
        "a": pa,
        "b": pb,
        "shape": a.shape(),
        "mse": m,
        "psnr_db": db_value(p),
        "max_val": cfg.max_val,
        "ssim": s,
        "created_at_unix": timestamp(),
    });
    if let Err(e) = fs::create_dir_all(&cfg.out_dir).map_err(anyhow::Error::from).and_then(|_| write_json(&cfg.out_dir.join("metrics.json"), &summary)) {
        bail!("writing metrics report: {e}");
    }
    Ok(CommandReport { summary, ok: true })
}

/// Strips the timestamp so reports can be compared across runs.
pub fn without_timestamp(mut v: Value) -> Value {
    if let Some(obj) = v.as_object_mut() {
        obj.remove("created_at_unix");
    }
    v
}
