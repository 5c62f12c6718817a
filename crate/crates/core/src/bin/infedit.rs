use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use infedit_core::harness::{
    cmd_compare_samplers, cmd_edit, cmd_metrics, cmd_reconstruct, CommandReport, ExperimentConfig, Overrides,
};

const OUTPUT_HELP: &str = "\
FLAGS (every command)
  --config PATH            TOML config; defaults apply when omitted
  --seed INT               overrides `seed`
  --out DIR                overrides `out_dir`

CONFIG (flat TOML, unknown keys rejected; all keys optional)
  schedule = \"linear\"      total_steps = 1000   beta_start = 1e-4   beta_end = 0.02
  steps = 12               number of sampling timesteps
  seed = 0                 sweep = 1 (runs seeds seed..seed+sweep-1 in parallel)
  trace_stride = 1         reconstruct: keep every k-th trace record (0 = none)
  input = \"z.dlt\"          source latent; otherwise drawn from the source component
  shape = [4, 8, 8]        synthetic latent shape for oracle denoisers
  denoiser = \"mixture\"     gaussian | mixture | toy
  means = [-2.0, 2.0]      constant mean of each component   std = 0.1
  toy_seed, grid_h, grid_w, channels, token_dim, max_tokens   toy denoiser geometry
  source_tokens = [0]      target_tokens = [1]   (mixture: first token = component)
  control = \"none\"         none | uac
  tau_c, tau_s             attention-control thresholds (default total_steps / 2)
  a_src = 0.3  a_tgt = 0.3 blend thresholds in (0, 1]
  alignment = [[t, s]]     target token t aligned with source token s
  blend_target_tokens, blend_source_tokens   token indices for local blending
  a, b                     metrics inputs   max_val = 1.0
  out_dir = \"out\"

OUTPUTS (every file carries schema version 1)
  reconstruct.json  schema, command, steps, timesteps, seeds, max_abs_error (worst over
                    seeds), tolerance, passed, runs[{seed, max_abs_error, output,
                    trace[{step, timestep, max_abs_error, z_t_norm, eps_cons_norm}]}],
                    created_at_unix
  seed-S/reconstructed.dlt   reconstructed latent
  edit.json         schema, command, denoiser, control, steps, timesteps, seeds,
                    max_final_z0_distance, target_mean_max_deviation (oracle
                    denoisers: max |mean z0_tgt - target mean|), runs[{seed,
                    final_z0_distance, output, steps_csv}], created_at_unix
  seed-S/z0_tgt.dlt, seed-S/z0_lay.dlt (uac only)
  seed-S/steps.csv  step, timestep, z0_distance (L2 norm of z0_tgt - z0_src), eps_gap
                    (L2 norm of eps_tgt - eps_src)
  compare.csv       strategy (ddim_inversion | ddcm), step, timestep, max_abs_error, mse
  compare.json      schema, command, steps, std, final_error_ddim_inversion,
                    final_error_ddcm, csv, created_at_unix
  metrics.json      schema, command, a, b, shape, mse, psnr_db (\"inf\" when identical),
                    max_val, ssim (2-D; channel mean for 3-D; null otherwise),
                    created_at_unix

Latent files (.dlt): \"DLT1\", version u8 = 1, dtype u8 = 1 (f64), ndim u8,
ndim x u32 dims, row-major f64 payload; all little-endian.

EXIT STATUS: 0 on success, 1 on error, 2 when reconstruct exceeds its 1e-9 tolerance
or compare-samplers sees a non-exact ddcm curve.";

#[derive(Parser)]
#[command(name = "infedit", version, about = "Inversion-free editing experiments", after_long_help = OUTPUT_HELP)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Virtual inversion round trip of a latent.
    Reconstruct(Common),
    /// Edit a source latent from source to target condition.
    Edit(Common),
    /// Reconstruction error of DDIM inversion versus virtual inversion.
    CompareSamplers(Common),
    /// MSE, PSNR and SSIM between latents `a` and `b`.
    Metrics(Common),
}

#[derive(Args)]
struct Common {
    /// TOML config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `out_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> anyhow::Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        Overrides { seed: self.seed, out_dir: self.out.clone() }.apply(&mut cfg);
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run(cli: Cli) -> anyhow::Result<CommandReport> {
    match cli.command {
        Command::Reconstruct(c) => cmd_reconstruct(&c.load()?).context("reconstruct"),
        Command::Edit(c) => cmd_edit(&c.load()?).context("edit"),
        Command::CompareSamplers(c) => cmd_compare_samplers(&c.load()?).context("compare-samplers"),
        Command::Metrics(c) => cmd_metrics(&c.load()?).context("metrics"),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(report) => {
            println!("{}", serde_json::to_string_pretty(&report.summary).unwrap_or_default());
            if report.ok {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(2)
            }
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
