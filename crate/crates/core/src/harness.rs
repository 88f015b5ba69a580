//! Run configuration, backend construction, result persistence and the
//! batch commands behind the CLI.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{mpsc, Arc};
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::client::{Backend, CallStats, Client, ClientError, LiveBackend, LiveConfig, RecordingBackend, ReplayBackend};
use crate::dataset::{load_manifest, DatasetError, Mode, SampleManifest};
use crate::metrics::{build_report, check_alignment, ground_truth, ClassMatcher, EvalConfig, MetricsError, MetricsReport};
use crate::pipeline::{Pipeline, PipelineConfig, SampleResult, Thresholds};
use crate::prompts::{PromptError, TemplateSet, Variant};
use crate::schemas::StageTag;

pub const RESULTS_FILE: &str = "results.jsonl";
pub const RUN_CONFIG_FILE: &str = "run_config.json";
pub const REPORT_FILE: &str = "report.json";
pub const REPORT_TABLE_FILE: &str = "report.txt";
pub const SWEEP_FILE: &str = "sweep.json";
pub const SWEEP_TABLE_FILE: &str = "sweep.txt";
pub const ABLATION_FILE: &str = "ablation.json";
pub const ABLATION_TABLE_FILE: &str = "ablation.txt";

/// Fields carrying wall-clock measurements; masked when comparing runs.
pub const TIMING_FIELDS: [&str; 2] = ["elapsed_ms", "latency_ms"];

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Manifest(#[from] DatasetError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Results { path: PathBuf, line: usize, message: String },
}

pub type Result<T> = std::result::Result<T, HarnessError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Live,
    #[default]
    Replay,
    Record,
}

impl std::str::FromStr for BackendKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "live" => Ok(Self::Live),
            "replay" => Ok(Self::Replay),
            "record" => Ok(Self::Record),
            other => Err(format!("unknown backend `{other}` (live | replay | record)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    #[serde(flatten)]
    pub pipeline: PipelineConfig,
    pub backend: BackendKind,
    pub endpoint: Option<String>,
    /// Name of the environment variable holding the endpoint credential.
    pub credential_env: String,
    pub replay_store: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub out: Option<PathBuf>,
    /// Restricts runs and reports to one mode; both when absent.
    pub mode: Option<Mode>,
    pub parallelism: usize,
    pub cache_dir: Option<PathBuf>,
    pub prompts_dir: Option<PathBuf>,
    pub resume: bool,
    pub request_timeout_s: u64,
    pub max_in_flight: usize,
    /// Class-token aliases used by class-aware scoring.
    pub class_aliases: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            pipeline: PipelineConfig::default(),
            backend: BackendKind::Replay,
            endpoint: None,
            credential_env: "AVLOC_API_KEY".into(),
            replay_store: None,
            manifest: None,
            out: None,
            mode: None,
            parallelism: 4,
            cache_dir: None,
            prompts_dir: None,
            resume: false,
            request_timeout_s: 120,
            max_in_flight: 4,
            class_aliases: BTreeMap::new(),
        }
    }
}

/// Optional settings from one configuration layer.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub manifest: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub backend: Option<BackendKind>,
    pub endpoint: Option<String>,
    pub model: Option<String>,
    pub replay_store: Option<PathBuf>,
    pub n: Option<u32>,
    pub tau_av: Option<f64>,
    pub tau_aud: Option<f64>,
    pub mode: Option<Mode>,
    pub variant: Option<Variant>,
    pub parallelism: Option<usize>,
    pub cache_dir: Option<PathBuf>,
    pub resume: Option<bool>,
}

fn parse_env<T: std::str::FromStr>(get: &dyn Fn(&str) -> Option<String>, name: &str) -> Result<Option<T>>
where
    T::Err: std::fmt::Display,
{
    match get(name) {
        None => Ok(None),
        Some(v) if v.is_empty() => Ok(None),
        Some(v) => v
            .parse()
            .map(Some)
            .map_err(|e| HarnessError::Config(format!("{name}={v}: {e}"))),
    }
}

impl Overrides {
    /// Reads `AVLOC_*` variables through `get`.
    pub fn from_env(get: &dyn Fn(&str) -> Option<String>) -> Result<Self> {
        let bool_var = |name: &str| -> Result<Option<bool>> {
            match get(name).as_deref() {
                None | Some("") => Ok(None),
                Some("1" | "true" | "yes") => Ok(Some(true)),
                Some("0" | "false" | "no") => Ok(Some(false)),
                Some(v) => Err(HarnessError::Config(format!("{name}={v}: expected a boolean"))),
            }
        };
        Ok(Self {
            manifest: parse_env(get, "AVLOC_MANIFEST")?,
            out: parse_env(get, "AVLOC_OUT")?,
            backend: parse_env(get, "AVLOC_BACKEND")?,
            endpoint: parse_env(get, "AVLOC_ENDPOINT")?,
            model: parse_env(get, "AVLOC_MODEL")?,
            replay_store: parse_env(get, "AVLOC_REPLAY_STORE")?,
            n: parse_env(get, "AVLOC_N")?,
            tau_av: parse_env(get, "AVLOC_TAU_AV")?,
            tau_aud: parse_env(get, "AVLOC_TAU_AUD")?,
            mode: parse_env(get, "AVLOC_MODE")?,
            variant: parse_env(get, "AVLOC_VARIANT")?,
            parallelism: parse_env(get, "AVLOC_PARALLELISM")?,
            cache_dir: parse_env(get, "AVLOC_CACHE_DIR")?,
            resume: bool_var("AVLOC_RESUME")?,
        })
    }

    pub fn apply(&self, cfg: &mut RunConfig) {
        macro_rules! set {
            ($($src:ident => $($dst:ident).+),* $(,)?) => {
                $(if let Some(v) = &self.$src { cfg.$($dst).+ = v.clone().into(); })*
            };
        }
        set!(
            manifest => manifest,
            out => out,
            backend => backend,
            endpoint => endpoint,
            model => pipeline.model,
            replay_store => replay_store,
            n => pipeline.n,
            tau_av => pipeline.tau_av,
            tau_aud => pipeline.tau_aud,
            mode => mode,
            variant => pipeline.variant,
            parallelism => parallelism,
            cache_dir => cache_dir,
            resume => resume,
        );
    }
}

impl RunConfig {
    pub fn from_toml_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        toml::from_str(&text).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))
    }

    /// Layers defaults, the optional file, environment and CLI, in
    /// increasing precedence.
    pub fn resolve(file: Option<&Path>, env: &Overrides, cli: &Overrides) -> Result<Self> {
        let mut cfg = match file {
            Some(p) => Self::from_toml_file(p)?,
            None => Self::default(),
        };
        env.apply(&mut cfg);
        cli.apply(&mut cfg);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.pipeline.validate().map_err(HarnessError::Config)?;
        if self.parallelism == 0 {
            return Err(HarnessError::Config("parallelism must be at least 1".into()));
        }
        Ok(())
    }

    pub fn thresholds(&self) -> Thresholds {
        self.pipeline.thresholds()
    }

    pub fn out_dir(&self) -> Result<&Path> {
        self.out
            .as_deref()
            .ok_or_else(|| HarnessError::Config("no output directory (--out)".into()))
    }

    pub fn manifest_path(&self) -> Result<&Path> {
        self.manifest
            .as_deref()
            .ok_or_else(|| HarnessError::Config("no manifest (--manifest)".into()))
    }

    pub fn matcher(&self) -> ClassMatcher {
        ClassMatcher::new(self.class_aliases.clone())
    }

    fn replay_path(&self) -> Result<&Path> {
        self.replay_store
            .as_deref()
            .ok_or_else(|| HarnessError::Config("backend needs --replay-store".into()))
    }

    fn live_backend(&self) -> Result<LiveBackend> {
        let endpoint = self
            .endpoint
            .clone()
            .ok_or_else(|| HarnessError::Config("live backend needs --endpoint".into()))?;
        let api_key = std::env::var(&self.credential_env).ok().filter(|k| !k.is_empty());
        if api_key.is_none() {
            log::warn!("{} is not set; sending requests without credentials", self.credential_env);
        }
        let mut lc = LiveConfig::new(endpoint);
        lc.api_key = api_key;
        lc.timeout = Duration::from_secs(self.request_timeout_s);
        lc.max_in_flight = self.max_in_flight.max(1);
        Ok(LiveBackend::new(lc))
    }

    /// Builds the configured backend.
    pub fn build_backend(&self) -> Result<Arc<dyn Backend>> {
        Ok(match self.backend {
            BackendKind::Replay => Arc::new(ReplayBackend::open(self.replay_path()?)?),
            BackendKind::Live => Arc::new(self.live_backend()?),
            BackendKind::Record => {
                let live: Arc<dyn Backend> = Arc::new(self.live_backend()?);
                Arc::new(RecordingBackend::new(live, self.replay_path()?)?)
            }
        })
    }

    pub fn build_client(&self, backend: Arc<dyn Backend>) -> Arc<Client> {
        let client = Client::new(backend);
        Arc::new(match &self.cache_dir {
            Some(d) => client.with_cache_dir(d),
            None => client,
        })
    }

    pub fn build_pipeline(&self, pipeline_cfg: PipelineConfig, client: Arc<Client>) -> Result<Pipeline> {
        let templates = TemplateSet::load(pipeline_cfg.variant, self.prompts_dir.as_deref())?;
        Ok(Pipeline::new(pipeline_cfg, templates, client))
    }

    /// The emitted config record. Credentials are referenced by variable
    /// name only.
    pub fn to_record(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

/// Sets every timing field to 0 so runs can be compared byte for byte.
pub fn mask_timing(v: &mut Value) {
    match v {
        Value::Object(map) => {
            for (k, val) in map.iter_mut() {
                if TIMING_FIELDS.contains(&k.as_str()) {
                    *val = Value::from(0);
                } else {
                    mask_timing(val);
                }
            }
        }
        Value::Array(items) => items.iter_mut().for_each(mask_timing),
        _ => {}
    }
}

pub fn masked_line(line: &str) -> String {
    match serde_json::from_str::<Value>(line) {
        Ok(mut v) => {
            mask_timing(&mut v);
            v.to_string()
        }
        Err(_) => line.to_string(),
    }
}

/// Parses a results file. A truncated final line (interrupted write) is
/// ignored; malformed lines elsewhere are errors.
pub fn read_results(path: &Path) -> Result<Vec<SampleResult>> {
    Ok(read_results_with_len(path)?.0)
}

fn read_results_with_len(path: &Path) -> Result<(Vec<SampleResult>, u64)> {
    let f = File::open(path).map_err(io_err(path))?;
    let mut reader = BufReader::new(f);
    let mut out = Vec::new();
    let mut good_len = 0u64;
    let mut buf = String::new();
    let mut line_no = 0;
    loop {
        buf.clear();
        let read = reader.read_line(&mut buf).map_err(io_err(path))?;
        if read == 0 {
            break;
        }
        line_no += 1;
        let complete = buf.ends_with('\n');
        let text = buf.trim();
        if text.is_empty() {
            good_len += read as u64;
            continue;
        }
        match serde_json::from_str::<SampleResult>(text) {
            Ok(r) if complete => {
                out.push(r);
                good_len += read as u64;
            }
            Ok(_) | Err(_) if !complete => {
                log::warn!("{}: dropping incomplete final line {line_no}", path.display());
                break;
            }
            Err(e) => {
                return Err(HarnessError::Results {
                    path: path.to_path_buf(),
                    line: line_no,
                    message: e.to_string(),
                })
            }
            Ok(_) => unreachable!(),
        }
    }
    Ok((out, good_len))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub total: usize,
    pub skipped: usize,
    pub executed: usize,
    pub failed: usize,
    pub stats: CallStats,
}

impl RunSummary {
    pub fn any_failure(&self) -> bool {
        self.failed > 0
    }
}

/// Runs `samples` with bounded parallelism, yielding results to `sink` in
/// input order.
pub fn run_ordered(
    pipeline: &Pipeline,
    samples: &[SampleManifest],
    parallelism: usize,
    mut sink: impl FnMut(SampleResult) -> Result<()>,
) -> Result<()> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism.max(1))
        .build()
        .map_err(|e| HarnessError::Config(e.to_string()))?;
    let (tx, rx) = mpsc::channel::<(usize, SampleResult)>();
    std::thread::scope(|scope| {
        scope.spawn(move || {
            pool.install(|| {
                samples.par_iter().enumerate().for_each_with(tx, |tx, (i, s)| {
                    let _ = tx.send((i, pipeline.run_sample(s)));
                });
            });
        });
        let mut pending = BTreeMap::new();
        let mut next = 0;
        for (i, r) in rx {
            pending.insert(i, r);
            while let Some(r) = pending.remove(&next) {
                sink(r)?;
                next += 1;
            }
        }
        Ok(())
    })
}

fn filter_mode(samples: Vec<SampleManifest>, mode: Option<Mode>) -> Vec<SampleManifest> {
    match mode {
        Some(m) => samples.into_iter().filter(|s| s.mode == m).collect(),
        None => samples,
    }
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(v).expect("serializable") + "\n";
    fs::write(path, text).map_err(io_err(path))
}

/// Batch run over the manifest, streaming results to `<out>/results.jsonl`.
pub fn cmd_run(cfg: &RunConfig, backend: Arc<dyn Backend>) -> Result<RunSummary> {
    let out_dir = cfg.out_dir()?;
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let samples = filter_mode(load_manifest(cfg.manifest_path()?)?, cfg.mode);
    write_json(&out_dir.join(RUN_CONFIG_FILE), &cfg.to_record())?;

    let results_path = out_dir.join(RESULTS_FILE);
    let mut done = BTreeSet::new();
    let mut prior_failed = 0;
    if cfg.resume && results_path.exists() {
        let (prior, good_len) = read_results_with_len(&results_path)?;
        let f = OpenOptions::new().write(true).open(&results_path).map_err(io_err(&results_path))?;
        f.set_len(good_len).map_err(io_err(&results_path))?;
        prior_failed = prior.iter().filter(|r| r.is_failed()).count();
        done.extend(prior.into_iter().map(|r| r.sample_id));
    }
    let todo: Vec<SampleManifest> = samples.iter().filter(|s| !done.contains(&s.id)).cloned().collect();
    let mut file = OpenOptions::new()
        .create(true)
        .append(true)
        .truncate(false)
        .open(&results_path)
        .map_err(io_err(&results_path))?;
    if !cfg.resume {
        file.set_len(0).map_err(io_err(&results_path))?;
    }

    let client = cfg.build_client(backend);
    let pipeline = cfg.build_pipeline(cfg.pipeline.clone(), client.clone())?;
    let mut summary = RunSummary {
        total: samples.len(),
        skipped: samples.len() - todo.len(),
        failed: prior_failed,
        ..Default::default()
    };
    run_ordered(&pipeline, &todo, cfg.parallelism, |r| {
        summary.executed += 1;
        if r.is_failed() {
            summary.failed += 1;
        }
        let line = serde_json::to_string(&r).expect("result serializes");
        writeln!(file, "{line}").map_err(io_err(&results_path))?;
        file.flush().map_err(io_err(&results_path))
    })?;
    summary.stats = client.stats();
    Ok(summary)
}

/// Reports for every mode present, in single, duet order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSet {
    pub thresholds: Thresholds,
    pub reports: Vec<MetricsReport>,
}

impl ReportSet {
    pub fn get(&self, mode: Mode) -> Option<&MetricsReport> {
        self.reports.iter().find(|r| r.mode == mode)
    }

    pub fn render(&self, label: &str) -> String {
        let mut s = String::new();
        for r in &self.reports {
            let _ = writeln!(s, "[{}] tau_av={} tau_aud={}", r.mode, self.thresholds.tau_av, self.thresholds.tau_aud);
            s.push_str(&r.render_table(label));
            s.push('\n');
        }
        s
    }
}

/// Builds per-mode reports for `results` against `manifest`.
pub fn evaluate(
    results: &[SampleResult],
    manifest: &[SampleManifest],
    mode: Option<Mode>,
    matcher: &ClassMatcher,
    thresholds: Thresholds,
) -> Result<ReportSet> {
    check_alignment(results, manifest)?;
    let gts = ground_truth(manifest);
    let mut reports = Vec::new();
    for m in [Mode::Single, Mode::Duet] {
        if mode.is_some_and(|want| want != m) {
            continue;
        }
        let subset: Vec<SampleResult> = results
            .iter()
            .filter(|r| manifest.iter().any(|s| s.id == r.sample_id && s.mode == m))
            .cloned()
            .collect();
        if subset.is_empty() {
            continue;
        }
        let mut ec = EvalConfig::for_mode(m);
        ec.matcher = matcher.clone();
        reports.push(build_report(&subset, &gts, m, &ec)?);
    }
    if reports.is_empty() {
        return Err(MetricsError::EmptyInput.into());
    }
    Ok(ReportSet { thresholds, reports })
}

pub const SWEEP_GRID: [f64; 2] = [0.5, 0.75];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepOutput {
    pub cells: Vec<ReportSet>,
    /// Refinement calls issued for gates that newly closed.
    pub new_backend_calls: u64,
}

/// Re-gates the stored consensus under each threshold pair.
pub fn sweep(
    results: &[SampleResult],
    manifest: &[SampleManifest],
    pipeline: &Pipeline,
    mode: Option<Mode>,
    matcher: &ClassMatcher,
) -> Result<SweepOutput> {
    check_alignment(results, manifest)?;
    let by_id: BTreeMap<&str, &SampleManifest> = manifest.iter().map(|s| (s.id.as_str(), s)).collect();
    let before = pipeline.client().stats().backend_total();
    let mut cells = Vec::new();
    for tau_av in SWEEP_GRID {
        for tau_aud in SWEEP_GRID {
            let th = Thresholds { tau_av, tau_aud };
            let regated: Vec<SampleResult> = results
                .par_iter()
                .map(|r| pipeline.regate(by_id[r.sample_id.as_str()], r, th))
                .collect();
            cells.push(evaluate(&regated, manifest, mode, matcher, th)?);
        }
    }
    Ok(SweepOutput {
        cells,
        new_backend_calls: pipeline.client().stats().backend_total() - before,
    })
}

pub fn render_sweep(s: &SweepOutput) -> String {
    let mut out = String::new();
    for cell in &s.cells {
        let label = format!("av={} aud={}", cell.thresholds.tau_av, cell.thresholds.tau_aud);
        for r in &cell.reports {
            let _ = writeln!(out, "[{}]", r.mode);
            out.push_str(&r.render_table(&label));
        }
        out.push('\n');
    }
    out
}

/// Evaluates `<out>/results.jsonl`, optionally with the threshold sweep.
pub fn cmd_eval(cfg: &RunConfig, results_path: &Path, sweep_backend: Option<Arc<dyn Backend>>) -> Result<ReportSet> {
    let manifest = filter_mode(load_manifest(cfg.manifest_path()?)?, cfg.mode);
    let results = read_results(results_path)?;
    let out_dir = cfg.out_dir()?;
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let matcher = cfg.matcher();
    let set = evaluate(&results, &manifest, cfg.mode, &matcher, cfg.thresholds())?;
    write_json(&out_dir.join(REPORT_FILE), &set)?;
    let table = out_dir.join(REPORT_TABLE_FILE);
    fs::write(&table, set.render("gar")).map_err(io_err(&table))?;
    if let Some(backend) = sweep_backend {
        let pipeline = cfg.build_pipeline(cfg.pipeline.clone(), cfg.build_client(backend))?;
        let s = sweep(&results, &manifest, &pipeline, cfg.mode, &matcher)?;
        write_json(&out_dir.join(SWEEP_FILE), &s)?;
        let t = out_dir.join(SWEEP_TABLE_FILE);
        fs::write(&t, render_sweep(&s)).map_err(io_err(&t))?;
    }
    Ok(set)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub n: u32,
    pub reports: Vec<MetricsReport>,
    pub failures: usize,
    /// Backend calls this cell added beyond earlier cells.
    pub new_backend_calls: u64,
    pub new_analysis_calls: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationOutput {
    pub rows: Vec<AblationRow>,
}

/// Runs every (variant, n) cell through one shared client so identical
/// requests are answered once. `n` only matters for the sampled variant;
/// other variants get one row each.
pub fn ablate(
    cfg: &RunConfig,
    client: Arc<Client>,
    samples: &[SampleManifest],
    variants: &[Variant],
    ns: &[u32],
) -> Result<(AblationOutput, Vec<Vec<SampleResult>>)> {
    let mut rows = Vec::new();
    let mut all = Vec::new();
    let matcher = cfg.matcher();
    for &variant in variants {
        let cell_ns: Vec<u32> = if variant == Variant::Gar { ns.to_vec() } else { vec![cfg.pipeline.n] };
        for n in cell_ns {
            let pc = PipelineConfig {
                n,
                variant,
                ..cfg.pipeline.clone()
            };
            pc.validate().map_err(HarnessError::Config)?;
            let pipeline = cfg.build_pipeline(pc, client.clone())?;
            let before = client.stats();
            let mut results = Vec::new();
            run_ordered(&pipeline, samples, cfg.parallelism, |r| {
                results.push(r);
                Ok(())
            })?;
            let after = client.stats();
            let set = evaluate(&results, samples, cfg.mode, &matcher, cfg.thresholds())?;
            rows.push(AblationRow {
                variant,
                n,
                reports: set.reports,
                failures: results.iter().filter(|r| r.is_failed()).count(),
                new_backend_calls: after.backend_total() - before.backend_total(),
                new_analysis_calls: after.stage(StageTag::Analysis) - before.stage(StageTag::Analysis),
            });
            all.push(results);
        }
    }
    Ok((AblationOutput { rows }, all))
}

pub fn render_ablation(a: &AblationOutput) -> String {
    let mut out = String::new();
    for mode in [Mode::Single, Mode::Duet] {
        let mut header_done = false;
        for row in &a.rows {
            let Some(r) = row.reports.iter().find(|r| r.mode == mode) else { continue };
            if !header_done {
                let _ = writeln!(out, "[{mode}]");
                out.push_str(r.render_table(&format!("{} n={}", row.variant, row.n)).as_str());
                header_done = true;
            } else {
                let _ = writeln!(out, "{}", r.table_row(&format!("{} n={}", row.variant, row.n)));
            }
        }
        if header_done {
            out.push('\n');
        }
    }
    out
}

pub fn cmd_ablate(cfg: &RunConfig, backend: Arc<dyn Backend>, variants: &[Variant], ns: &[u32]) -> Result<AblationOutput> {
    let samples = filter_mode(load_manifest(cfg.manifest_path()?)?, cfg.mode);
    let out_dir = cfg.out_dir()?;
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let client = cfg.build_client(backend);
    let (a, _) = ablate(cfg, client, &samples, variants, ns)?;
    write_json(&out_dir.join(ABLATION_FILE), &a)?;
    let t = out_dir.join(ABLATION_TABLE_FILE);
    fs::write(&t, render_ablation(&a)).map_err(io_err(&t))?;
    Ok(a)
}

/// Renders a saved report, sweep or ablation file as a table.
pub fn render_saved(path: &Path) -> Result<String> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let bad = |e: serde_json::Error| HarnessError::Config(format!("{}: {e}", path.display()));
    let v: Value = serde_json::from_str(&text).map_err(bad)?;
    if v.get("rows").is_some() {
        Ok(render_ablation(&serde_json::from_value(v).map_err(bad)?))
    } else if v.get("cells").is_some() {
        Ok(render_sweep(&serde_json::from_value(v).map_err(bad)?))
    } else {
        let set: ReportSet = serde_json::from_value(v).map_err(bad)?;
        Ok(set.render("gar") + &set.reports.iter().map(|r| r.render_thresholds()).collect::<String>())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precedence_cli_over_env_over_file() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("c.toml");
        fs::write(&file, "n = 3\ntau_av = 0.6\nparallelism = 2\nmodel = \"from-file\"\n").unwrap();
        let env = Overrides::from_env(&|k: &str| match k {
            "AVLOC_TAU_AV" => Some("0.7".into()),
            "AVLOC_MODEL" => Some("from-env".into()),
            _ => None,
        })
        .unwrap();
        let cli = Overrides {
            model: Some("from-cli".into()),
            ..Default::default()
        };
        let cfg = RunConfig::resolve(Some(&file), &env, &cli).unwrap();
        assert_eq!(cfg.pipeline.n, 3);
        assert_eq!(cfg.pipeline.tau_av, 0.7);
        assert_eq!(cfg.pipeline.tau_aud, 0.75);
        assert_eq!(cfg.pipeline.model, "from-cli");
        assert_eq!(cfg.parallelism, 2);
    }

    #[test]
    fn bad_env_value_is_config_error() {
        let r = Overrides::from_env(&|k: &str| (k == "AVLOC_N").then(|| "five".to_string()));
        assert!(matches!(r, Err(HarnessError::Config(_))));
    }

    #[test]
    fn defaults_present_in_record() {
        let v = RunConfig::default().to_record();
        assert_eq!(v["tau_av"], 0.5);
        assert_eq!(v["tau_aud"], 0.75);
        assert_eq!(v["credential_env"], "AVLOC_API_KEY");
    }

    #[test]
    fn masking_zeroes_nested_timing() {
        let line = r#"{"elapsed_ms":12,"calls":[{"latency_ms":5,"x":1}]}"#;
        assert_eq!(masked_line(line), r#"{"calls":[{"latency_ms":0,"x":1}],"elapsed_ms":0}"#);
    }
}
