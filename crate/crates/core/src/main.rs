use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use avloc_core::dataset::{load_manifest, MediaIssue, Mode};
use avloc_core::harness::{self, BackendKind, HarnessError, Overrides, RunConfig, RESULTS_FILE};
use avloc_core::prompts::Variant;

#[derive(Parser)]
#[command(name = "avloc", version, about = "Training-free audio-visual sound source localization")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Parse a manifest and check every referenced media file.
    ValidateManifest(Common),
    /// Run the pipeline over a manifest.
    Run(Common),
    /// Score a results file against its manifest.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Results file; defaults to <out>/results.jsonl.
        #[arg(long)]
        results: Option<PathBuf>,
        /// Also re-gate under (tau_av, tau_aud) in {0.5, 0.75}^2.
        #[arg(long)]
        sweep: bool,
    },
    /// Compare prompt variants and analysis trial counts.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long = "variants", value_delimiter = ',', default_value = "gar")]
        variants: Vec<Variant>,
        #[arg(long = "ns", value_delimiter = ',', default_value = "1,3,5")]
        ns: Vec<u32>,
    },
    /// Run against the live endpoint and append every reply to the replay store.
    Record(Common),
    /// Print a saved report, sweep or ablation file as a table.
    Report {
        #[arg(required = true)]
        files: Vec<PathBuf>,
    },
}

#[derive(Args, Clone)]
struct Common {
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    backend: Option<BackendKind>,
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    replay_store: Option<PathBuf>,
    #[arg(long)]
    n: Option<u32>,
    #[arg(long)]
    tau_av: Option<f64>,
    #[arg(long)]
    tau_aud: Option<f64>,
    #[arg(long)]
    mode: Option<Mode>,
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    parallelism: Option<usize>,
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    #[arg(long)]
    resume: bool,
}

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides {
            manifest: self.manifest.clone(),
            out: self.out.clone(),
            backend: self.backend,
            endpoint: self.endpoint.clone(),
            model: self.model.clone(),
            replay_store: self.replay_store.clone(),
            n: self.n,
            tau_av: self.tau_av,
            tau_aud: self.tau_aud,
            mode: self.mode,
            variant: self.variant,
            parallelism: self.parallelism,
            cache_dir: self.cache_dir.clone(),
            resume: self.resume.then_some(true),
        }
    }

    fn resolve(&self) -> Result<RunConfig, HarnessError> {
        let env = Overrides::from_env(&|k| std::env::var(k).ok())?;
        RunConfig::resolve(self.config.as_deref(), &env, &self.overrides())
    }
}

const EXIT_FAILURES: u8 = 1;
const EXIT_ERROR: u8 = 2;

fn run_batch(cfg: &RunConfig) -> Result<ExitCode, HarnessError> {
    let backend = cfg.build_backend()?;
    let s = harness::cmd_run(cfg, backend)?;
    eprintln!(
        "{} samples: {} run, {} resumed, {} failed; {} backend calls, {} cache hits",
        s.total,
        s.executed,
        s.skipped,
        s.failed,
        s.stats.backend_total(),
        s.stats.cache_hits
    );
    Ok(if s.any_failure() { ExitCode::from(EXIT_FAILURES) } else { ExitCode::SUCCESS })
}

fn dispatch(cmd: Cmd) -> Result<ExitCode, HarnessError> {
    match cmd {
        Cmd::ValidateManifest(c) => {
            let cfg = c.resolve()?;
            let samples = load_manifest(cfg.manifest_path()?)?;
            let mut errors = 0;
            for s in &samples {
                if let Ok(Some(w)) = s.validate() {
                    println!("warning {}: {w}", s.id);
                }
            }
            for issue in avloc_core::dataset::validate_media(&samples) {
                match issue {
                    MediaIssue::Error { id, message } => {
                        errors += 1;
                        println!("error {id}: {message}");
                    }
                    MediaIssue::Warning { id, warning } => {
                        println!("warning {id}: {}", serde_json::to_string(&warning).unwrap_or_default())
                    }
                }
            }
            println!("{} samples, {errors} media errors", samples.len());
            Ok(if errors > 0 { ExitCode::from(EXIT_FAILURES) } else { ExitCode::SUCCESS })
        }
        Cmd::Run(c) => run_batch(&c.resolve()?),
        Cmd::Record(c) => {
            let mut cfg = c.resolve()?;
            cfg.backend = BackendKind::Record;
            run_batch(&cfg)
        }
        Cmd::Eval { common, results, sweep } => {
            let cfg = common.resolve()?;
            let path = match results {
                Some(p) => p,
                None => cfg.out_dir()?.join(RESULTS_FILE),
            };
            let backend = if sweep { Some(cfg.build_backend()?) } else { None };
            let set = harness::cmd_eval(&cfg, &path, backend)?;
            print!("{}", set.render("gar"));
            if sweep {
                let s = harness::render_saved(&cfg.out_dir()?.join(harness::SWEEP_FILE))?;
                print!("{s}");
            }
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Ablate { common, variants, ns } => {
            let cfg = common.resolve()?;
            let backend = cfg.build_backend()?;
            let a = harness::cmd_ablate(&cfg, backend, &variants, &ns)?;
            print!("{}", harness::render_ablation(&a));
            let failed = a.rows.iter().any(|r| r.failures > 0);
            Ok(if failed { ExitCode::from(EXIT_FAILURES) } else { ExitCode::SUCCESS })
        }
        Cmd::Report { files } => {
            for f in files {
                print!("{}", harness::render_saved(&f)?);
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli.cmd) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_ERROR)
        }
    }
}
