//! Command-line entry points.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Parser, Subcommand};
use metaction_core::control_fit::fit_controls;
use metaction_core::labeler::{label_actions, MetaAction};
use metaction_core::metrics::{aggregate, check_compliance, min_ade, ComplianceVerdict, MetricsError};
use metaction_core::scene::Scene;
use metaction_core::sim::{rollout_batch, OverrideCommand, OverrideEvent};
use metaction_core::synth::{generate_scene, sample_maneuver};
use metaction_core::{AgentState, Trajectory};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::scene_io::*;
use crate::service;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "metaction", version, about = "Meta-action labeling, rollout and evaluation")]
pub struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write scripted scenes, their ground-truth labels and a manifest.
    GenScenes {
        #[arg(long, short)]
        out: PathBuf,
        /// Scenes per meta-action class.
        #[arg(long, default_value_t = 1)]
        per_class: usize,
        /// Agents per scene; agent 1 carries the scene's class.
        #[arg(long, default_value_t = 1)]
        agents: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Label every agent of a scene with per-frame meta-actions.
    Label {
        scene: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Recover per-frame action bins from every track of a scene.
    FitActions {
        scene: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Roll out K samples of a scene, or of every manifest scenario.
    Simulate {
        #[arg(required_unless_present = "manifest", conflicts_with = "manifest")]
        scene: Option<PathBuf>,
        #[arg(long, short, required_unless_present = "manifest")]
        out: Option<PathBuf>,
        /// Run each scenario with its target injected on its agent.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        k: usize,
        #[arg(long)]
        seed: Option<u64>,
        /// Agent to steer with `--target`.
        #[arg(long, requires = "target")]
        agent: Option<u32>,
        /// Meta-action code injected from the first frame.
        #[arg(long, requires = "agent", value_parser = parse_code)]
        target: Option<MetaAction>,
    },
    /// Score manifest rollouts for decision following.
    Evaluate {
        manifest: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Run the session service.
    Serve {
        /// Overrides METACTION_PORT; default 8080.
        #[arg(long)]
        port: Option<u16>,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
    },
}

fn parse_code(s: &str) -> Result<MetaAction, String> {
    MetaAction::from_code(s).map_err(|e| e.to_string())
}

/// Failure with its exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(_) => EXIT_DATA,
        }
    }
}

fn data(e: impl std::fmt::Display) -> CliError {
    CliError::Data(e.to_string())
}

/// Parses `args` (program name first) and runs; returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match run(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.code()
        }
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = RunConfig::load(cli.config.as_deref()).map_err(data)?;
    match cli.command {
        Command::GenScenes {
            out,
            per_class,
            agents,
            seed,
        } => gen_scenes(&cfg, &out, per_class, agents, seed.unwrap_or(cfg.seed)),
        Command::Label { scene, out } => label(&cfg, &scene, &out),
        Command::FitActions { scene, out } => fit_actions(&cfg, &scene, &out),
        Command::Simulate {
            scene,
            out,
            manifest,
            k,
            seed,
            agent,
            target,
        } => {
            let seed = seed.unwrap_or(cfg.seed);
            match (manifest, scene, out) {
                (Some(m), _, _) => simulate_manifest(&cfg, &m, k, seed),
                (None, Some(scene), Some(out)) => {
                    let overrides = agent.zip(target).map(|(a, t)| initial_override(a, t)).into_iter().collect::<Vec<_>>();
                    simulate(&cfg, &scene, &out, k, seed, &overrides)
                }
                _ => Err(CliError::Usage("simulate needs a scene and --out, or --manifest".into())),
            }
        }
        Command::Evaluate { manifest, out } => evaluate(&cfg, &manifest, &out),
        Command::Serve { port, host } => serve(&cfg, port, &host),
    }
}

fn initial_override(agent: u32, target: MetaAction) -> OverrideEvent {
    OverrideEvent {
        frame: 0,
        agent,
        command: OverrideCommand::Set(target),
    }
}

fn gen_scenes(cfg: &RunConfig, out: &Path, per_class: usize, agents: usize, seed: u64) -> Result<(), CliError> {
    if per_class == 0 || agents == 0 {
        return Err(CliError::Usage("--per-class and --agents must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut scenarios = Vec::new();
    for target in MetaAction::ALL {
        for _ in 0..per_class {
            let mut maneuvers = vec![sample_maneuver(target, &mut rng)];
            for _ in 1..agents {
                let kind = MetaAction::ALL[rng.gen_range(0..MetaAction::COUNT)];
                maneuvers.push(sample_maneuver(kind, &mut rng));
            }
            let g = generate_scene(&maneuvers, &cfg.grid, &cfg.labels.thresholds, rng.gen()).map_err(data)?;
            let stem = format!("scene-{:04}", scenarios.len());
            let mut scene = g.scene;
            scene.id = stem.clone();
            save_scene(&scene, &out.join(format!("{stem}.scene.json"))).map_err(data)?;
            let labels = LabelFile {
                version: FORMAT_VERSION,
                scene_id: stem.clone(),
                labels: scene.agents.iter().map(|a| a.id).zip(g.ground_truth).collect(),
            };
            save_labels(&labels, &out.join(format!("{stem}.labels.json"))).map_err(data)?;
            scenarios.push(ScenarioEntry {
                id: stem.clone(),
                scene: format!("{stem}.scene.json").into(),
                rollout: format!("{stem}.rollout.json").into(),
                agent: scene.agents[0].id,
                target,
            });
        }
    }
    let n = scenarios.len();
    save_manifest(
        &ManifestFile {
            version: FORMAT_VERSION,
            scenarios,
        },
        &out.join("manifest.json"),
    )
    .map_err(data)?;
    println!("wrote {n} scenes to {}", out.display());
    Ok(())
}

fn label(cfg: &RunConfig, scene: &Path, out: &Path) -> Result<(), CliError> {
    let scene = load_scene(scene).map_err(data)?;
    let mut labels = std::collections::BTreeMap::new();
    for a in &scene.agents {
        labels.insert(a.id, label_actions(&a.track, &scene.map, &cfg.labels).map_err(|e| data(format!("agent {}: {e}", a.id)))?);
    }
    save_labels(
        &LabelFile {
            version: FORMAT_VERSION,
            scene_id: scene.id.clone(),
            labels,
        },
        out,
    )
    .map_err(data)
}

fn fit_actions(cfg: &RunConfig, scene: &Path, out: &Path) -> Result<(), CliError> {
    let scene = load_scene(scene).map_err(data)?;
    let mut agents = std::collections::BTreeMap::new();
    for a in &scene.agents {
        let fit = fit_controls(&a.track, &cfg.grid, &cfg.fit).map_err(|e| data(format!("agent {}: {e}", a.id)))?;
        agents.insert(
            a.id,
            AgentActions {
                max_residual: fit.max_residual(),
                bins: fit.bin_indices,
            },
        );
    }
    save_actions(
        &ActionsFile {
            version: FORMAT_VERSION,
            scene_id: scene.id.clone(),
            grid: cfg.grid,
            agents,
        },
        out,
    )
    .map_err(data)
}

fn rollout_file(cfg: &RunConfig, scene: &Scene, k: usize, seed: u64, overrides: &[OverrideEvent]) -> Result<RolloutFile, CliError> {
    if k == 0 {
        return Err(CliError::Usage("--k must be at least 1".into()));
    }
    let policy = Arc::new(cfg.load_policy().map_err(data)?);
    let sim = cfg.sim_config();
    let samples = rollout_batch(scene, policy, &sim, k, seed, overrides).map_err(data)?;
    Ok(RolloutFile {
        version: FORMAT_VERSION,
        scene_id: scene.id.clone(),
        warmup: sim.warmup,
        horizon: sim.horizon,
        temperature: sim.temperature,
        samples: samples
            .into_iter()
            .map(|s| RolloutSampleLog {
                seed: s.seed,
                overrides: overrides.to_vec(),
                records: s.records,
            })
            .collect(),
    })
}

fn simulate(cfg: &RunConfig, scene: &Path, out: &Path, k: usize, seed: u64, overrides: &[OverrideEvent]) -> Result<(), CliError> {
    let scene = load_scene(scene).map_err(data)?;
    let log = rollout_file(cfg, &scene, k, seed, overrides)?;
    save_rollout(&log, out).map_err(data)
}

fn manifest_dir(manifest: &Path) -> PathBuf {
    manifest.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn simulate_manifest(cfg: &RunConfig, manifest: &Path, k: usize, seed: u64) -> Result<(), CliError> {
    let m = load_manifest(manifest).map_err(data)?;
    let dir = manifest_dir(manifest);
    for e in &m.scenarios {
        let scene = load_scene(&dir.join(&e.scene)).map_err(data)?;
        let log = rollout_file(cfg, &scene, k, seed, &[initial_override(e.agent, e.target)])?;
        save_rollout(&log, &dir.join(&e.rollout)).map_err(data)?;
    }
    println!("simulated {} scenarios", m.scenarios.len());
    Ok(())
}

fn evaluate(cfg: &RunConfig, manifest: &Path, out: &Path) -> Result<(), CliError> {
    let m = load_manifest(manifest).map_err(data)?;
    if m.scenarios.is_empty() {
        return Err(data(MetricsError::Empty));
    }
    let dir = manifest_dir(manifest);
    let mut verdicts = Vec::with_capacity(m.scenarios.len());
    for e in &m.scenarios {
        let scene = load_scene(&dir.join(&e.scene)).map_err(data)?;
        let log = load_rollout(&dir.join(&e.rollout)).map_err(data)?;
        verdicts.push(judge(cfg, e, &scene, &log)?);
    }
    let report = aggregate(&verdicts).map_err(data)?;
    println!(
        "{} scenarios: recall {:.3}, precision {:.3}, mAP {:.3}",
        report.scenarios, report.recall, report.precision, report.map_score
    );
    save_report(
        &ReportFile {
            version: FORMAT_VERSION,
            min_run: cfg.min_run,
            report,
            scenarios: verdicts,
        },
        out,
    )
    .map_err(data)
}

fn judge(cfg: &RunConfig, e: &ScenarioEntry, scene: &Scene, log: &RolloutFile) -> Result<ComplianceVerdict, CliError> {
    let ctx = |msg: String| data(format!("scenario {}: {msg}", e.id));
    let agent = scene.agent(e.agent).map_err(|err| ctx(err.to_string()))?;
    let slot = scene.agents.iter().position(|a| a.id == e.agent).expect("agent exists");
    if log.warmup > agent.track.len() {
        return Err(ctx(format!("rollout warmup {} exceeds the scene length", log.warmup)));
    }
    let compliance = metaction_core::metrics::ComplianceConfig {
        skip: log.warmup,
        ..cfg.compliance()
    };
    let mut checks = Vec::with_capacity(log.samples.len());
    let mut generated: Vec<Vec<AgentState>> = Vec::with_capacity(log.samples.len());
    for s in &log.samples {
        let mut states = agent.track.states[..log.warmup].to_vec();
        for r in &s.records {
            let step = r.agents.get(slot).filter(|a| a.agent == e.agent).ok_or_else(|| ctx("agent missing from rollout".into()))?;
            states.push(step.state);
        }
        let traj = Trajectory::new(states, scene.dt());
        checks.push(check_compliance(&traj, e.target, &scene.map, &compliance).map_err(|err| ctx(err.to_string()))?);
        generated.push(traj.states[log.warmup..].to_vec());
    }
    let mut v = ComplianceVerdict::from_checks(e.id.clone(), e.target, &checks);
    let end = log.warmup + generated.first().map_or(0, Vec::len);
    if end <= agent.track.len() {
        let truth = &agent.track.states[log.warmup..end];
        let refs: Vec<&[AgentState]> = generated.iter().map(Vec::as_slice).collect();
        v.min_ade = min_ade(&refs, truth).ok();
    }
    Ok(v)
}

fn serve(cfg: &RunConfig, port: Option<u16>, host: &str) -> Result<(), CliError> {
    let port = match port {
        Some(p) => p,
        None => match std::env::var("METACTION_PORT") {
            Ok(v) => v.parse().map_err(|_| CliError::Usage(format!("METACTION_PORT={v:?} is not a port")))?,
            Err(_) => 8080,
        },
    };
    let policy = Arc::new(cfg.load_policy().map_err(data)?);
    let state = service::AppState::new(policy, cfg.sim_config(), cfg.seed);
    let rt = tokio::runtime::Runtime::new().map_err(data)?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind((host, port)).await.map_err(data)?;
        let addr = listener.local_addr().map_err(data)?;
        println!("listening on http://{addr}");
        let _ = std::io::stdout().flush();
        service::serve(listener, state).await.map_err(data)
    })
}
