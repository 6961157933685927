//! Pipeline front end: train the gait policy, roll it out in closed loop,
//! refine it against a mismatched plant, certify it, and export plot data.
//!
//! Exit codes: 0 success, 1 usage or input error, 2 the run finished but
//! its scientific gate failed (loss above threshold, fall, certification
//! failure, no episodic improvement). Primary artifacts are deterministic
//! for a fixed config and seed; wall-clock metadata lives in a sidecar.

mod plot;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;
use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;
use zdgait_core::barriers::{derive_seed, FlowModel};
use zdgait_core::config::RunConfig;
use zdgait_core::dynamics::z2_of_speed;
use zdgait_core::error::{Error, Result};
use zdgait_core::policy::{Checkpoint, MlpParams};
use zdgait_core::residual::{episodic_refine, RefineConfig};
use zdgait_core::simulator::{rollout_with_models, Outcome, RolloutResult, TrajectoryLog};
use zdgait_core::training::{seed_policy, train_policy};
use zdgait_core::verification::{certify, output_lyapunov, sigma_sweep};
use zdgait_core::zero_dynamics::{phi_inverse_zero, zero_impact};

/// Overrides the configured output directory when set.
const OUT_DIR_ENV: &str = "ZDGAIT_OUT_DIR";

#[derive(Parser, Debug)]
#[command(name = "zdgait", version, about = "Gait policy training and certification pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Write the default configuration to a file.
    Init {
        #[arg(default_value = "config.json")]
        path: PathBuf,
    },
    /// Train the policy; writes checkpoint.json, history.csv and a summary.
    Train { config: PathBuf },
    /// Closed-loop rollout of a checkpoint on the chosen plant.
    Rollout {
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = Plant::Nominal)]
        plant: Plant,
    },
    /// Alternate training on the corrected flow with plant rollouts.
    Refine {
        config: PathBuf,
        /// Overrides the configured episode count.
        #[arg(long)]
        episodes: Option<usize>,
        /// Warm-start policy; defaults to the seeded reference fit.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Sampled certification of a checkpoint, including the combined
    /// reduced-plus-tracking barrier.
    Verify {
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Re-emit a rollout log as per-quantity series or SVG line plots.
    Export {
        log: PathBuf,
        #[arg(long, value_enum, default_value_t = ExportFormat::Csv)]
        format: ExportFormat,
        /// Barrier bounds for the torso plot come from this config.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Plant {
    Nominal,
    Surrogate,
}

impl fmt::Display for Plant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Plant::Nominal => "nominal",
            Plant::Surrogate => "surrogate",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ExportFormat {
    Csv,
    SvgLines,
}

fn main() -> ExitCode {
    env_logger::init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Cmd::Init { path } => cmd_init(&path),
        Cmd::Train { config } => cmd_train(&config),
        Cmd::Rollout { config, checkpoint, plant } => cmd_rollout(&config, &checkpoint, plant),
        Cmd::Refine { config, episodes, checkpoint } => {
            cmd_refine(&config, episodes, checkpoint.as_deref())
        }
        Cmd::Verify { config, checkpoint } => cmd_verify(&config, &checkpoint),
        Cmd::Export { log, format, config, out_dir } => {
            cmd_export(&log, format, config.as_deref(), out_dir)
        }
    }
}

// ------------------------------------------------------------------
// Shared plumbing
// ------------------------------------------------------------------

fn out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = std::env::var_os(OUT_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| cfg.out_dir.clone());
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut body = serde_json::to_string_pretty(value)?;
    body.push('\n');
    std::fs::write(path, body)?;
    Ok(())
}

/// Wall-clock sidecar; the only artifact allowed to differ between reruns.
fn write_meta(dir: &Path, command: &str, wall_seconds: f64) -> Result<()> {
    let unix = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    write_json(
        &dir.join("meta.json"),
        &json!({ "command": command, "wall_seconds": wall_seconds, "finished_unix": unix }),
    )
}

fn initial_policy(cfg: &RunConfig) -> Result<MlpParams> {
    if cfg.policy.seeded_init {
        seed_policy(
            cfg.policy_arch(),
            cfg.policy.seed_torso,
            cfg.regions.impact_z1,
            cfg.policy.seed_fling,
            cfg.seed,
        )
    } else {
        MlpParams::init(cfg.policy_arch(), cfg.seed)
    }
}

/// Loads a policy checkpoint and rejects anything that does not slot into
/// this configuration: wrong kind, inconsistent weight count, or an
/// architecture that differs from the one the config derives.
fn load_policy(cfg: &RunConfig, path: &Path) -> Result<MlpParams> {
    let ck = Checkpoint::load(path)?;
    if ck.kind != "policy" {
        return Err(Error::InvalidConfig(format!(
            "checkpoint {} holds a '{}' network, expected a policy",
            path.display(),
            ck.kind
        )));
    }
    if ck.weights.len() != ck.arch.n_params() {
        return Err(Error::InvalidConfig(format!(
            "checkpoint carries {} weights for an architecture of {}",
            ck.weights.len(),
            ck.arch.n_params()
        )));
    }
    if ck.arch != cfg.policy_arch() {
        return Err(Error::InvalidConfig(
            "checkpoint architecture does not match the configuration".into(),
        ));
    }
    Ok(ck.params())
}

/// Start state shared by every rollout: the post-impact image of touchdown
/// at the configured speed, lifted onto the surface.
fn initial_state(
    cfg: &RunConfig,
    policy: &MlpParams,
) -> Result<zdgait_core::dynamics::RobotState> {
    let pre = [cfg.regions.impact_z1, z2_of_speed(&cfg.model, cfg.rollout.init_speed)];
    let z0 = zero_impact(pre, &cfg.model, policy)?;
    phi_inverse_zero(z0, &cfg.model, policy)
}

fn reported_torso_range(log: &TrajectoryLog) -> [f64; 2] {
    log.rows.iter().map(|r| -(r.q[0] + r.q[1])).fold(
        [f64::INFINITY, f64::NEG_INFINITY],
        |acc, t| [acc[0].min(t), acc[1].max(t)],
    )
}

fn gate(ok: bool) -> ExitCode {
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(2)
    }
}

// ------------------------------------------------------------------
// Subcommands
// ------------------------------------------------------------------

fn cmd_init(path: &Path) -> Result<ExitCode> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    RunConfig::default().save(path)?;
    println!("wrote default configuration to {}", path.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_train(config: &Path) -> Result<ExitCode> {
    let cfg = RunConfig::load(config)?;
    let out = out_dir(&cfg)?;
    let specs = cfg.build_training_specs()?;
    let init = initial_policy(&cfg)?;
    let epochs = cfg.train.epochs;

    let t0 = Instant::now();
    let result = train_policy(&cfg.train, &specs, &cfg.model, init, None, |rec| {
        if rec.epoch % 100 == 0 || rec.epoch + 1 == epochs {
            eprintln!("epoch {:4}  lr {:.1e}  loss {:.6}", rec.epoch, rec.lr, rec.total);
        }
    })?;

    let mut hist = String::from("epoch,lr,total");
    for spec in &specs {
        hist.push(',');
        hist.push_str(&spec.name);
    }
    hist.push('\n');
    for rec in &result.history {
        hist.push_str(&format!("{},{},{}", rec.epoch, rec.lr, rec.total));
        for v in &rec.per_spec {
            hist.push_str(&format!(",{v}"));
        }
        hist.push('\n');
    }
    std::fs::write(out.join("history.csv"), hist)?;

    Checkpoint::new("policy", &result.params, cfg.train.seed, epochs, result.best_loss)
        .save(&out.join("checkpoint.json"))?;

    let converged = result.best_loss <= cfg.loss_threshold;
    write_json(
        &out.join("train_summary.json"),
        &json!({
            "epochs": epochs,
            "best_epoch": result.best_epoch,
            "best_loss": result.best_loss,
            "final_loss": result.history.last().map(|r| r.total),
            "loss_threshold": cfg.loss_threshold,
            "converged": converged,
            "n_params": result.params.n_params(),
            "barriers": specs.iter().map(|s| s.name.clone()).collect::<Vec<_>>(),
        }),
    )?;
    write_meta(&out, "train", t0.elapsed().as_secs_f64())?;

    println!(
        "trained {epochs} epochs: best loss {:.6} at epoch {} ({})",
        result.best_loss,
        result.best_epoch,
        if converged { "converged" } else { "above threshold" }
    );
    println!("artifacts in {}", out.display());
    Ok(gate(converged))
}

fn cmd_rollout(config: &Path, checkpoint: &Path, plant: Plant) -> Result<ExitCode> {
    let cfg = RunConfig::load(config)?;
    let out = out_dir(&cfg)?;
    let policy = load_policy(&cfg, checkpoint)?;
    let plant_model = match plant {
        Plant::Nominal => cfg.model.clone(),
        Plant::Surrogate => cfg.surrogate.clone(),
    };
    let x0 = initial_state(&cfg, &policy)?;
    let t0 = Instant::now();
    let run = rollout_with_models(&x0, &plant_model, &cfg.model, &policy, &cfg.sim)?;

    run.log.write_csv(&out.join(format!("rollout_{plant}.csv")))?;
    let torso = reported_torso_range(&run.log);
    write_json(
        &out.join(format!("steps_{plant}.json")),
        &json!({
            "plant": plant.to_string(),
            "outcome": run.outcome,
            "n_steps": run.steps.len(),
            "torso_range": torso,
            "steps": run.steps,
        }),
    )?;
    write_meta(&out, "rollout", t0.elapsed().as_secs_f64())?;

    let completed = matches!(run.outcome, Outcome::Completed { .. });
    println!(
        "rollout on {plant}: {:?}, {} steps, torso range [{:.4}, {:.4}]",
        run.outcome,
        run.steps.len(),
        torso[0],
        torso[1]
    );
    Ok(gate(completed))
}

fn cmd_refine(
    config: &Path,
    episodes: Option<usize>,
    checkpoint: Option<&Path>,
) -> Result<ExitCode> {
    let cfg = RunConfig::load(config)?;
    let out = out_dir(&cfg)?;
    let refine_dir = out.join("refine");
    std::fs::create_dir_all(&refine_dir)?;

    let init = match checkpoint {
        Some(path) => load_policy(&cfg, path)?,
        None => initial_policy(&cfg)?,
    };
    let rc = RefineConfig {
        episodes: episodes.unwrap_or(cfg.refine.episodes),
        train: cfg.train.clone(),
        sim: cfg.sim.clone(),
        fit: cfg.residual.clone(),
        impact_z1: cfg.regions.impact_z1,
        init_speed: cfg.rollout.init_speed,
    };
    let train_specs = cfg.build_training_specs()?;
    let eval_specs = cfg.build_specs()?;

    let t0 = Instant::now();
    let dir = refine_dir.clone();
    let report = episodic_refine(
        &rc,
        &train_specs,
        &eval_specs,
        &cfg.model,
        &cfg.surrogate,
        init,
        |rec, trained, run: &RolloutResult, fit| {
            let policy_file = format!("policy_ep{}.json", rec.episode);
            Checkpoint::new(
                "policy",
                &trained.params,
                rc.train.seed,
                rc.train.epochs,
                trained.best_loss,
            )
            .save(&dir.join(&policy_file))?;
            let residual_file = match fit {
                Some(f) => {
                    let name = format!("residual_ep{}.json", rec.episode);
                    Checkpoint::new("residual", &f.params, rc.fit.seed, rc.fit.epochs, f.train_mse)
                        .save(&dir.join(&name))?;
                    Some(name)
                }
                None => None,
            };
            let fell = matches!(rec.outcome, Outcome::Fell { .. });
            write_json(
                &dir.join(format!("episode_{}.json", rec.episode)),
                &json!({
                    "episode": rec.episode,
                    "policy_checkpoint": policy_file,
                    "residual_checkpoint": residual_file,
                    "violation": rec.violation,
                    "fell": fell,
                    "outcome": rec.outcome,
                    "steps": rec.steps,
                    "train_best_loss": rec.train_best_loss,
                    "train_best_epoch": rec.train_best_epoch,
                    "fit_holdout_mse": rec.fit_holdout_mse,
                    "fit_target_rms": rec.fit_target_rms,
                }),
            )?;
            println!(
                "episode {}: violation {:.6}, {} steps, {:?}, torso range [{:.4}, {:.4}]",
                rec.episode,
                rec.violation,
                rec.steps,
                rec.outcome,
                reported_torso_range(&run.log)[0],
                reported_torso_range(&run.log)[1]
            );
            Ok(())
        },
    )?;

    let violations: Vec<f64> = report.episodes.iter().map(|e| e.violation).collect();
    let improved = violations.len() >= 2
        && violations.last().unwrap() < violations.first().unwrap();
    write_json(
        &refine_dir.join("summary.json"),
        &json!({
            "episodes": violations.len(),
            "violations": violations,
            "improved": improved,
        }),
    )?;
    write_meta(&out, "refine", t0.elapsed().as_secs_f64())?;

    println!(
        "violation {:.6} -> {:.6} over {} episodes ({})",
        violations.first().copied().unwrap_or(f64::NAN),
        violations.last().copied().unwrap_or(f64::NAN),
        violations.len(),
        if improved { "improved" } else { "no improvement" }
    );
    Ok(gate(improved))
}

fn cmd_verify(config: &Path, checkpoint: &Path) -> Result<ExitCode> {
    let cfg = RunConfig::load(config)?;
    let out = out_dir(&cfg)?;
    let policy = load_policy(&cfg, checkpoint)?;
    let specs = cfg.build_specs()?;
    let flow = FlowModel { model: &cfg.model, policy: &policy, residual: None };

    let t0 = Instant::now();
    let mut report =
        certify(&specs, &flow, cfg.verify.n_samples, cfg.verify.tol, derive_seed(cfg.seed, 0xCE))?;
    for b in &report.barriers {
        println!(
            "{:18} {:10} min residual {:+.6} at ({:+.4}, {:8.3})  {}",
            b.name,
            b.condition,
            b.min_residual,
            b.worst_z[0],
            b.worst_z[1],
            if b.pass { "pass" } else { "FAIL" }
        );
    }

    let lyap = output_lyapunov(cfg.verify.lyap_kp, cfg.verify.lyap_kd)?;
    let combined_spec = cfg.combined_spec()?;
    let block = sigma_sweep(
        &combined_spec,
        &flow,
        &lyap,
        cfg.verify.n_samples,
        cfg.verify.tol,
        derive_seed(cfg.seed, 0x51),
    )?;
    println!(
        "combined ({}): sigma {:.4}, c {:.6}, alpha {:.3}, margin {:+.6} at ({:+.4}, {:8.3})  {}",
        block.barrier,
        block.sigma,
        block.c,
        block.alpha,
        block.margin_strengthened,
        block.worst_z[0],
        block.worst_z[1],
        if block.pass { "pass" } else { "FAIL" }
    );
    println!(
        "constants: gamma_v {:.4}, lambda_min(P) {:.4}, L_hz {:.4}, L_omega_eta {:.4}",
        block.gamma_v, block.lambda_min_p, block.l_hz, block.l_omega_eta
    );
    report.attach_combined(block);

    write_json(&out.join("certification.json"), &report)?;
    write_meta(&out, "verify", t0.elapsed().as_secs_f64())?;
    println!("certification: {}", if report.pass { "PASS" } else { "FAIL" });
    Ok(gate(report.pass))
}

fn cmd_export(
    log_path: &Path,
    format: ExportFormat,
    config: Option<&Path>,
    out_dir: Option<PathBuf>,
) -> Result<ExitCode> {
    let log = TrajectoryLog::read_csv(log_path)?;
    if log.rows.is_empty() {
        return Err(Error::MalformedLog(format!("{} has no rows", log_path.display())));
    }
    let cfg = match config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let dir = out_dir
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| log_path.parent().unwrap_or(Path::new(".")).to_path_buf());
    std::fs::create_dir_all(&dir)?;
    let stem = log_path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::InvalidConfig("log path has no usable stem".into()))?;

    let torso: Vec<[f64; 2]> = log.rows.iter().map(|r| [r.t, -(r.q[0] + r.q[1])]).collect();
    let phase: Vec<[f64; 2]> = log.rows.iter().map(|r| [r.z[0], r.z[1]]).collect();
    let swing: Vec<[f64; 2]> = log.rows.iter().map(|r| [r.t, r.swing_z]).collect();
    let mut written = Vec::new();

    match format {
        ExportFormat::Csv => {
            let series: [(&str, &str, &Vec<[f64; 2]>); 3] = [
                ("torso", "t,torso", &torso),
                ("phase", "z1,z2", &phase),
                ("swing", "t,swing_height", &swing),
            ];
            for (name, header, rows) in series {
                let mut body = String::from(header);
                body.push('\n');
                for p in rows {
                    body.push_str(&format!("{},{}\n", p[0], p[1]));
                }
                let path = dir.join(format!("{stem}_{name}.csv"));
                std::fs::write(&path, body)?;
                written.push(path);
            }
            let mut body = String::from("t,u1,u2\n");
            for r in &log.rows {
                body.push_str(&format!("{},{},{}\n", r.t, r.u[0], r.u[1]));
            }
            let path = dir.join(format!("{stem}_torque.csv"));
            std::fs::write(&path, body)?;
            written.push(path);
        }
        ExportFormat::SvgLines => {
            let b = &cfg.barriers;
            let docs = [
                (
                    "phase",
                    plot::line_plot(
                        "reduced phase portrait",
                        "z1 (rad)",
                        "z2 (kg m^2/s)",
                        &[plot::Series { label: "z(t)".into(), points: phase }],
                        &[],
                    ),
                ),
                (
                    "torso",
                    plot::line_plot(
                        "torso angle with window bounds",
                        "t (s)",
                        "torso (rad)",
                        &[plot::Series { label: "torso".into(), points: torso }],
                        &[b.torso_min, b.torso_max],
                    ),
                ),
                (
                    "swing",
                    plot::line_plot(
                        "swing foot height",
                        "t (s)",
                        "height (m)",
                        &[plot::Series { label: "swing".into(), points: swing }],
                        &[0.0],
                    ),
                ),
            ];
            for (name, svg) in docs {
                let path = dir.join(format!("{stem}_{name}.svg"));
                std::fs::write(&path, svg)?;
                written.push(path);
            }
        }
    }

    for path in &written {
        println!("wrote {}", path.display());
    }
    Ok(ExitCode::SUCCESS)
}
