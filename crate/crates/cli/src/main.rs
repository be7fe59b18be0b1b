use std::fs;
use std::net::{SocketAddr, ToSocketAddrs};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Parser, Subcommand, ValueEnum};

use pixart::dataops::{
    caption_stats, stats_report, DatasetManifest, SpaceToDepth, REFERENCE_CORPORA,
};
use pixart::diffusion::{DiffusionSchedule, SamplerKind, IDDPM_DEFAULT_STEPS};
use pixart::pipeline::{
    autolabel, resolve_plan, run_plan, run_stage, sample_cli, AutolabelOptions, DeskPlan,
    HashingTextStub, MockScript, MockServer, PipelineError, PlanConfig, PlanOptions, Prompt,
    RetryPolicy, RunLedger, SampleRequest, StageContext, TcpTransport, ThreadSleeper,
    DEFAULT_PROMPT,
};
use pixart::reparam::{reparameterize, Checkpoint, SurgeryOptions, DEFAULT_T_STAR};

#[derive(Parser)]
#[command(
    name = "pixart",
    version,
    about = "Train, convert and sample desk-scale text-to-image diffusion transformers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// Plan file (TOML); layered over built-in defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted override applied last, e.g. `stage.0.lr=1e-3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Ledger file (JSON lines, appended); defaults to `<out_dir>/ledger.jsonl`.
    #[arg(long)]
    ledger: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Sampler {
    Dpm,
    Iddpm,
}

#[derive(Subcommand)]
enum Command {
    /// Run one stage of a plan.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value_t = 0)]
        stage: usize,
        /// Continue from a mid-stage checkpoint of the same stage.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Run every stage of a plan in order.
    Plan {
        #[command(flatten)]
        config: ConfigArgs,
        /// Skip stages whose final checkpoint already exists.
        #[arg(long)]
        resume: bool,
        /// Validate the chain and print the effective config without training.
        #[arg(long)]
        dry_run: bool,
    },
    /// Draw latents from a text-conditioned checkpoint.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "prompt")]
        prompts: Vec<String>,
        /// File with one prompt per line.
        #[arg(long)]
        prompts_file: Option<PathBuf>,
        /// Tensor file of precomputed token embeddings. Repeatable.
        #[arg(long = "embedding")]
        embeddings: Vec<PathBuf>,
        #[arg(long = "seed", default_values_t = [0u64])]
        seeds: Vec<u64>,
        #[arg(long = "cfg", default_values_t = [4.5f64])]
        cfg: Vec<f64>,
        /// Use the standard guidance sweep 1.5, 2, 3, 4, 5, 6.
        #[arg(long)]
        sweep: bool,
        #[arg(long, value_enum, default_value_t = Sampler::Dpm)]
        sampler: Sampler,
        /// Defaults to 20 for DPM-Solver and 250 for iDDPM.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value_t = 8)]
        height: usize,
        #[arg(long, default_value_t = 8)]
        width: usize,
        /// Plan file whose diffusion section defines the noise schedule.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Convert a class-conditional checkpoint into the adaLN-single text model.
    Reparam {
        #[arg(long)]
        source: PathBuf,
        #[arg(long, default_value_t = DEFAULT_T_STAR)]
        t_star: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Write the surgery report (JSON) here.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Noun-concept statistics of manifest captions.
    Analyze {
        #[arg(long)]
        manifest: PathBuf,
        /// Second manifest to compare against.
        #[arg(long)]
        compare: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        threshold: u64,
        /// Key/value report path; the human table goes to stdout and `<out>.table`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Relabel manifest captions through a vision-language service.
    Autolabel {
        #[arg(long)]
        manifest: PathBuf,
        /// host:port of the service.
        #[arg(long)]
        endpoint: String,
        #[arg(long, default_value = DEFAULT_PROMPT)]
        prompt: String,
        #[arg(long, default_value_t = 4)]
        concurrency: usize,
        #[arg(long, default_value_t = 5)]
        max_retries: u32,
        /// First backoff delay in seconds; doubles on every retry.
        #[arg(long, default_value_t = 1.0)]
        backoff: f64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        ledger: Option<PathBuf>,
    },
    /// Serve a scripted mock labelling service.
    MockServer {
        /// JSON script; defaults to a fixed caption for every sample.
        #[arg(long)]
        script: Option<PathBuf>,
        #[arg(long, default_value = "127.0.0.1:7878")]
        addr: String,
    },
    /// Write synthetic data and a three-stage desk plan into a directory.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

type Result<T> = std::result::Result<T, PipelineError>;

fn load_plan(args: &ConfigArgs) -> Result<PlanConfig> {
    PlanConfig::load_layered(args.config.as_deref(), &args.overrides)
}

fn open_ledger(path: Option<&Path>, fallback: PathBuf) -> Result<RunLedger> {
    let path = path.map(Path::to_path_buf).unwrap_or(fallback);
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    RunLedger::open(&path)
}

fn text_stub(model: &pixart::model::ModelConfig) -> HashingTextStub {
    HashingTextStub::new(model.text_dim, model.max_text_tokens)
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Train {
            config,
            stage,
            resume,
        } => {
            let plan = resolve_plan(&load_plan(&config)?)?;
            if stage >= plan.stages.len() {
                return Err(PipelineError::Config(format!(
                    "plan has {} stages, no stage {stage}",
                    plan.stages.len()
                )));
            }
            if let Some(p) = plan.stages[stage].init_from.path().filter(|p| !p.exists()) {
                return Err(PipelineError::Plan(format!(
                    "stage {stage} starts from {}, which does not exist yet",
                    p.display()
                )));
            }
            let mut ledger =
                open_ledger(config.ledger.as_deref(), plan.out_dir.join("ledger.jsonl"))?;
            let schedule = plan.diffusion.build()?;
            let text = text_stub(&plan.model);
            let ctx = StageContext {
                plan: &plan,
                stage_index: stage,
                schedule: &schedule,
                codec: &SpaceToDepth {
                    factor: plan.codec_downsample,
                },
                text: &text,
            };
            let out = run_stage(&ctx, &mut ledger, resume.as_deref())?;
            log::info!("stage {stage} finished: {}", out.final_path.display());
            println!("{}", out.final_path.display());
        }
        Command::Plan {
            config,
            resume,
            dry_run,
        } => {
            let plan = load_plan(&config)?;
            if dry_run {
                print!("{}", resolve_plan(&plan)?.to_toml());
                return Ok(());
            }
            let mut ledger =
                open_ledger(config.ledger.as_deref(), plan.out_dir.join("ledger.jsonl"))?;
            let text = text_stub(&plan.model);
            let codec = SpaceToDepth {
                factor: plan.codec_downsample,
            };
            let out = run_plan(&plan, &codec, &text, &mut ledger, PlanOptions { resume })?;
            if out.checkpoints.is_empty() {
                log::warn!("empty plan: no stages to run");
            }
            for p in &out.checkpoints {
                println!("{}", p.display());
            }
        }
        Command::Sample {
            checkpoint,
            mut prompts,
            prompts_file,
            embeddings,
            seeds,
            cfg,
            sweep,
            sampler,
            steps,
            height,
            width,
            config,
            out,
        } => {
            if let Some(f) = prompts_file {
                let text = fs::read_to_string(&f)
                    .map_err(|e| PipelineError::Data(format!("{}: {e}", f.display())))?;
                prompts.extend(
                    text.lines()
                        .map(str::trim)
                        .filter(|l| !l.is_empty())
                        .map(String::from),
                );
            }
            let mut all: Vec<Prompt> = prompts.into_iter().map(Prompt::Text).collect();
            for e in &embeddings {
                all.push(Prompt::from_embedding_file(e)?);
            }
            let schedule = match config {
                Some(c) => PlanConfig::load_layered(Some(&c), &[])?.diffusion.build()?,
                None => DiffusionSchedule::default(),
            };
            let ck = Checkpoint::load(&checkpoint)?;
            let kind = match sampler {
                Sampler::Dpm => SamplerKind::DpmSolver2,
                Sampler::Iddpm => SamplerKind::IddpmAncestral,
            };
            let steps = steps.unwrap_or(match kind {
                SamplerKind::DpmSolver2 => 20,
                SamplerKind::IddpmAncestral => IDDPM_DEFAULT_STEPS,
            });
            let request = SampleRequest {
                prompts: all,
                seeds,
                cfg_scales: cfg,
                cfg_sweep: sweep,
                kind,
                steps,
                height,
                width,
                out_dir: out,
            };
            let result = sample_cli(&ck, &request, &text_stub(&ck.config), &schedule)?;
            for n in &result.notices {
                log::warn!("{n}");
            }
            println!(
                "{} samples written to {}",
                result.records.len(),
                request.out_dir.display()
            );
        }
        Command::Reparam {
            source,
            t_star,
            seed,
            out,
            report,
        } => {
            let src = Checkpoint::load(&source)?;
            let options = SurgeryOptions {
                t_star,
                seed,
                target: None,
            };
            let (ck, rep) = reparameterize(&src, &options)?;
            ck.save(&out)?;
            if let Some(r) = report {
                fs::write(&r, rep.to_json())?;
            }
            println!(
                "max modulation residual at t={t_star}: {:.3e}",
                rep.max_modulation_residual
            );
        }
        Command::Analyze {
            manifest,
            compare,
            threshold,
            out,
        } => {
            let stats_of = |p: &Path| -> Result<_> {
                let m = DatasetManifest::load(p)?;
                Ok(caption_stats(&m.captions().collect::<Vec<_>>(), threshold))
            };
            let a = stats_of(&manifest)?;
            let name = |p: &Path| p.display().to_string();
            let (b, b_name) = match &compare {
                Some(p) => (stats_of(p)?, name(p)),
                None => (a.clone(), name(&manifest)),
            };
            let report = stats_report(&a, &name(&manifest), &b, &b_name);
            let mut table = report.render_table();
            table.push_str("\nreference corpora (reported figures, different tagger):\n");
            for r in REFERENCE_CORPORA {
                table.push_str(&format!(
                    "{:<16} {:>24} {:>12} {:>12}\n",
                    r.dataset,
                    format!(
                        "{}/{} = {:.1}%",
                        r.valid_nouns,
                        r.distinct_nouns,
                        100.0 * r.valid_nouns as f64 / r.distinct_nouns as f64
                    ),
                    r.total_nouns,
                    format!("{:.1}/Img", r.avg_per_image)
                ));
            }
            print!("{table}");
            fs::write(&out, report.to_key_values())?;
            let mut table_path = out.into_os_string();
            table_path.push(".table");
            fs::write(table_path, table)?;
        }
        Command::Autolabel {
            manifest,
            endpoint,
            prompt,
            concurrency,
            max_retries,
            backoff,
            out,
            ledger,
        } => {
            let m = DatasetManifest::load(&manifest)?;
            let records: Vec<_> = m
                .records
                .iter()
                .chain(m.quarantined.iter().map(|q| &q.record))
                .cloned()
                .collect();
            let addr: SocketAddr = endpoint
                .to_socket_addrs()
                .ok()
                .and_then(|mut a| a.next())
                .ok_or_else(|| {
                    PipelineError::Config(format!("cannot resolve endpoint `{endpoint}`"))
                })?;
            if !(backoff >= 0.0 && backoff.is_finite()) {
                return Err(PipelineError::Config(format!(
                    "backoff must be a non-negative number of seconds, got {backoff}"
                )));
            }
            let options = AutolabelOptions {
                prompt,
                concurrency,
                policy: RetryPolicy {
                    base: Duration::from_secs_f64(backoff),
                    max_retries,
                    ..RetryPolicy::default()
                },
            };
            let mut ledger = open_ledger(ledger.as_deref(), out.with_extension("ledger.jsonl"))?;
            let result = autolabel(
                &records,
                &TcpTransport::new(addr),
                &options,
                &ThreadSleeper,
                &mut ledger,
            )?;
            result.manifest.save(&out)?;
            let quarantine = out.with_extension("quarantine.jsonl");
            let lines: String = result
                .manifest
                .quarantined
                .iter()
                .map(|q| {
                    serde_json::json!({ "record": q.record, "reason": q.reason }).to_string() + "\n"
                })
                .collect();
            fs::write(&quarantine, lines)?;
            println!(
                "{} labelled, {} quarantined ({})",
                result.manifest.records.len(),
                result.quarantine_count(),
                quarantine.display()
            );
        }
        Command::MockServer { script, addr } => {
            let script = match script {
                Some(p) => {
                    let text = fs::read_to_string(&p)?;
                    serde_json::from_str(&text)
                        .map_err(|e| PipelineError::Config(format!("{}: {e}", p.display())))?
                }
                None => MockScript::fixed("a mock caption"),
            };
            let server = MockServer::bind(&addr, script)?;
            println!("listening on {}", server.addr);
            server.wait();
        }
        Command::Synth { out, seed } => {
            fs::create_dir_all(&out)?;
            let plan = DeskPlan {
                seed,
                ..DeskPlan::default()
            }
            .build(&out)?;
            let path = out.join("plan.toml");
            fs::write(&path, plan.to_toml())?;
            println!("{}", path.display());
        }
    }
    Ok(())
}
