//! Per-sample generation, sampled analysis, gating and refinement.
//!
//! In single mode one localization call and one audio classification call
//! produce the initial hypothesis. In duet mode a mixture classification
//! runs once and each returned class gets its own class-conditioned
//! localization, analysis and refinement; every class yields one
//! [`ClassEntry`].

mod consensus;

pub use consensus::{consensus, gate, AnalysisTrial, ConsensusError, ConsensusResult, GatingDecision, Thresholds};

use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::client::{inspect_media, Client, ClientError, DecodingParams, MediaKind, MediaWarning, MultimodalRequest};
use crate::dataset::{Mode, SampleManifest};
use crate::geometry::{validate_box_noted, BoundingBox, ImageDims, RefinementOp};
use crate::prompts::{PromptContext, PromptError, TemplateId, TemplateSet, Variant};
use crate::schemas::{
    parse_text, AnchorVote, AudioReply, RefinementReply, RepairNote, RepairRule, Reply, StageTag,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Analysis trials per class.
    pub n: u32,
    pub tau_av: f64,
    pub tau_aud: f64,
    pub temperature_generation: f64,
    pub temperature_analysis: f64,
    pub temperature_refine: f64,
    pub max_tokens: u32,
    /// Attempts per stage call before a structural parse failure is final.
    pub max_attempts: u32,
    /// Per-side refinement budget at 224 px width; scales with width.
    pub max_delta_px_at_224: u32,
    pub variant: Variant,
    pub model: String,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            n: 5,
            tau_av: 0.5,
            tau_aud: 0.75,
            temperature_generation: 0.2,
            temperature_analysis: 0.7,
            temperature_refine: 0.2,
            max_tokens: 512,
            max_attempts: 3,
            max_delta_px_at_224: 32,
            variant: Variant::Gar,
            model: "qwen2.5-omni-7b".to_string(),
        }
    }
}

impl PipelineConfig {
    pub fn thresholds(&self) -> Thresholds {
        Thresholds {
            tau_av: self.tau_av,
            tau_aud: self.tau_aud,
        }
    }

    pub fn max_delta_px(&self, dims: ImageDims) -> u32 {
        (f64::from(self.max_delta_px_at_224) * dims.w() / 224.0).round() as u32
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.n == 0 {
            return Err("n must be at least 1".into());
        }
        if self.n.is_multiple_of(2) {
            log::warn!("even n={} : keep ties resolve to refine", self.n);
        }
        for (name, v) in [("tau_av", self.tau_av), ("tau_aud", self.tau_aud)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(format!("{name}={v} outside [0, 1]"));
            }
        }
        if self.max_attempts == 0 {
            return Err("max_attempts must be at least 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationOutput {
    pub initial_box: BoundingBox,
    pub description: String,
    /// Absent only for the box-only prompt variant in single mode.
    pub audio_class: Option<String>,
    pub audio_confidence: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefinementSource {
    /// Gate kept the initial box; no refinement call.
    Skipped,
    /// Refinement reply said nothing changed.
    Unchanged,
    ReplyBox,
    /// Reply box unusable; declared op applied to the initial box.
    Ops,
    Fallback,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinementRecord {
    pub source: RefinementSource,
    pub declared_ops: Option<Value>,
    pub applied_op: Option<RefinementOp>,
    pub clipped: bool,
    pub refined_description: Option<String>,
}

impl RefinementRecord {
    fn skipped() -> Self {
        Self {
            source: RefinementSource::Skipped,
            declared_ops: None,
            applied_op: None,
            clipped: false,
            refined_description: None,
        }
    }
}

/// Audit line for one request sent through the client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CallRecord {
    pub stage: StageTag,
    pub class_index: Option<u32>,
    pub trial: u32,
    pub attempt: u32,
    /// Digest of the request key; the cache and replay store are keyed by it.
    pub key_digest: String,
    pub outcome: String,
    pub latency_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageFailure {
    pub stage: StageTag,
    pub class_index: Option<u32>,
    pub cause: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassEntry {
    pub class_index: u32,
    pub generation: GenerationOutput,
    /// Anchor-only analysis of the anchor-guided variant.
    pub anchors: Option<Vec<AnchorVote>>,
    pub trials: Vec<AnalysisTrial>,
    /// Some trials failed to parse; consensus used the survivors.
    pub degraded: bool,
    pub consensus: Option<ConsensusResult>,
    pub gating: Option<GatingDecision>,
    pub final_box: BoundingBox,
    pub changed: bool,
    pub refinement: RefinementRecord,
    /// Ranking score for AP.
    pub confidence: f64,
    pub repair_notes: Vec<RepairNote>,
}

impl ClassEntry {
    pub fn class(&self) -> Option<&str> {
        self.generation.audio_class.as_deref()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleStatus {
    Ok,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleResult {
    pub sample_id: String,
    pub mode: Mode,
    pub variant: Variant,
    pub n: u32,
    pub status: SampleStatus,
    pub failure: Option<StageFailure>,
    /// Mixture classification (duet mode).
    pub audio_sources: Option<Vec<AudioReply>>,
    pub entries: Vec<ClassEntry>,
    pub repair_notes: Vec<RepairNote>,
    pub warnings: Vec<MediaWarning>,
    pub calls: Vec<CallRecord>,
    pub model_calls: u32,
    pub elapsed_ms: u64,
}

impl SampleResult {
    pub fn is_failed(&self) -> bool {
        self.status == SampleStatus::Failed
    }

    pub fn calls_for(&self, stage: StageTag) -> usize {
        self.calls.iter().filter(|c| c.stage == stage).count()
    }
}

#[derive(Debug, Error)]
enum StageError {
    #[error(transparent)]
    Backend(#[from] ClientError),
    #[error("{0}")]
    Parse(String),
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

impl StageError {
    fn into_failure(self, stage: StageTag, class_index: Option<u32>) -> StageFailure {
        StageFailure {
            stage,
            class_index,
            cause: self.to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum AnalysisKind {
    None,
    AnchorsOnly,
    Sampled,
}

struct Plan {
    classify: bool,
    analysis: AnalysisKind,
}

fn plan(variant: Variant) -> Plan {
    match variant {
        Variant::Gar => Plan {
            classify: true,
            analysis: AnalysisKind::Sampled,
        },
        Variant::Method1 => Plan {
            classify: false,
            analysis: AnalysisKind::None,
        },
        Variant::Method2 => Plan {
            classify: true,
            analysis: AnalysisKind::None,
        },
        Variant::Method3 => Plan {
            classify: true,
            analysis: AnalysisKind::AnchorsOnly,
        },
    }
}

/// Call log and repair notes accumulated by one unit of work.
#[derive(Default)]
struct Trail {
    calls: Vec<CallRecord>,
    notes: Vec<RepairNote>,
}

impl Trail {
    fn absorb(&mut self, other: Trail) {
        self.calls.extend(other.calls);
        self.notes.extend(other.notes);
    }
}

struct StageCall {
    stage: StageTag,
    template: TemplateId,
    trial: u32,
    class_index: Option<u32>,
    ctx: PromptContext,
    temperature: f64,
}

pub struct Pipeline {
    cfg: PipelineConfig,
    templates: TemplateSet,
    client: Arc<Client>,
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig, templates: TemplateSet, client: Arc<Client>) -> Self {
        Self { cfg, templates, client }
    }

    pub fn with_builtin_templates(cfg: PipelineConfig, client: Arc<Client>) -> Self {
        let templates = TemplateSet::builtin(cfg.variant);
        Self::new(cfg, templates, client)
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn client(&self) -> &Client {
        &self.client
    }

    /// Renders, sends and parses one stage call, retrying on structural
    /// parse failures. `accept` may reject a parsed reply, which also
    /// counts as a failed attempt.
    fn call<T>(
        &self,
        sample: &SampleManifest,
        c: StageCall,
        trail: &mut Trail,
        mut accept: impl FnMut(Reply, &mut Vec<RepairNote>) -> Result<T, String>,
    ) -> Result<T, StageError> {
        let user = self.templates.render(c.template, &c.ctx, false)?;
        let decoding = DecodingParams {
            temperature: c.temperature,
            max_tokens: self.cfg.max_tokens,
        };
        let image = c.stage.needs_image().then(|| sample.image_path());
        let req = MultimodalRequest::new(&sample.id, c.stage, c.trial, String::new(), user, &self.cfg.model, decoding)
            .with_media(image, Some(sample.audio_path()));
        let key_digest = req.key.digest();
        let mut last = String::new();
        for attempt in 1..=self.cfg.max_attempts.max(1) {
            let mut record = CallRecord {
                stage: c.stage,
                class_index: c.class_index,
                trial: c.trial,
                attempt,
                key_digest: key_digest.clone(),
                outcome: String::new(),
                latency_ms: 0,
            };
            let resp = match self.client.complete(&req, attempt) {
                Ok(r) => r,
                Err(e) => {
                    record.outcome = format!("error: {e}");
                    trail.calls.push(record);
                    return Err(e.into());
                }
            };
            record.latency_ms = resp.latency_ms;
            let parsed = parse_text(c.stage, &resp.text)
                .map_err(|e| e.to_string())
                .and_then(|(reply, mut notes)| accept(reply, &mut notes).map(|t| (t, notes)));
            match parsed {
                Ok((value, notes)) => {
                    record.outcome = "ok".into();
                    trail.calls.push(record);
                    trail.notes.extend(notes);
                    return Ok(value);
                }
                Err(msg) => {
                    record.outcome = format!("retry: {msg}");
                    trail.calls.push(record);
                    last = msg;
                }
            }
        }
        Err(StageError::Parse(last))
    }

    fn localize(
        &self,
        sample: &SampleManifest,
        class: Option<&str>,
        class_index: Option<u32>,
        trail: &mut Trail,
    ) -> Result<(BoundingBox, String), StageError> {
        let mut ctx = PromptContext::new().dims(sample.dims);
        let template = match class {
            Some(cls) => {
                ctx = ctx.set("audio_class", cls);
                TemplateId::GenLocClass
            }
            None => TemplateId::GenLoc,
        };
        let call = StageCall {
            stage: StageTag::GenLoc,
            template,
            trial: 0,
            class_index,
            ctx,
            temperature: self.cfg.temperature_generation,
        };
        let dims = sample.dims;
        self.call(sample, call, trail, |reply, notes| match reply {
            Reply::Localization(r) => {
                let v = validate_box_noted(r.bbox, dims).map_err(|e| e.to_string())?;
                if v.clamped {
                    notes.push(RepairNote::new("bbox", json!(r.bbox), json!(v.bbox), RepairRule::ClampedToImage));
                }
                Ok((v.bbox, r.description))
            }
            _ => Err("unexpected reply kind".into()),
        })
    }

    fn classify(&self, sample: &SampleManifest, trail: &mut Trail) -> Result<AudioReply, StageError> {
        let call = StageCall {
            stage: StageTag::GenAud,
            template: TemplateId::GenAud,
            trial: 0,
            class_index: None,
            ctx: PromptContext::new(),
            temperature: self.cfg.temperature_generation,
        };
        self.call(sample, call, trail, |reply, _| match reply {
            Reply::Audio(a) => Ok(a),
            _ => Err("unexpected reply kind".into()),
        })
    }

    fn classify_mixture(&self, sample: &SampleManifest, trail: &mut Trail) -> Result<Vec<AudioReply>, StageError> {
        let call = StageCall {
            stage: StageTag::GenAudMulti,
            template: TemplateId::GenAudMulti,
            trial: 0,
            class_index: None,
            ctx: PromptContext::new(),
            temperature: self.cfg.temperature_generation,
        };
        self.call(sample, call, trail, |reply, _| match reply {
            Reply::AudioMulti(m) => Ok(m.sources),
            _ => Err("unexpected reply kind".into()),
        })
    }

    fn analysis_ctx(&self, sample: &SampleManifest, gen: &GenerationOutput) -> PromptContext {
        let mut ctx = PromptContext::new().dims(sample.dims).previous_bbox(&gen.initial_box);
        if let (Some(c), Some(s)) = (&gen.audio_class, gen.audio_confidence) {
            ctx = ctx.audio(c, s);
        }
        ctx
    }

    /// Runs `n` analysis trials. Trials that never parse are dropped as
    /// long as at least half (rounded up) survive.
    fn run_analysis(
        &self,
        sample: &SampleManifest,
        gen: &GenerationOutput,
        class_index: u32,
        trail: &mut Trail,
    ) -> Result<(Vec<AnalysisTrial>, bool), StageFailure> {
        let n = self.cfg.n;
        let outcomes: Vec<(u32, Result<AnalysisTrial, StageError>, Trail)> = (1..=n)
            .into_par_iter()
            .map(|trial| {
                let mut t = Trail::default();
                let call = StageCall {
                    stage: StageTag::Analysis,
                    template: TemplateId::Analysis,
                    trial,
                    class_index: Some(class_index),
                    ctx: self.analysis_ctx(sample, gen),
                    temperature: self.cfg.temperature_analysis,
                };
                let r = self.call(sample, call, &mut t, |reply, _| match reply {
                    Reply::Analysis(a) => Ok(AnalysisTrial { trial, reply: a }),
                    _ => Err("unexpected reply kind".into()),
                });
                (trial, r, t)
            })
            .collect();
        let mut trials = Vec::new();
        let mut first_backend_err = None;
        for (trial, r, t) in outcomes {
            trail.absorb(t);
            match r {
                Ok(a) => trials.push(a),
                Err(e @ (StageError::Backend(_) | StageError::Prompt(_))) => {
                    first_backend_err.get_or_insert(e);
                }
                Err(e) => log::info!("{}: analysis trial {trial} dropped: {e}", sample.id),
            }
        }
        if let Some(e) = first_backend_err {
            return Err(e.into_failure(StageTag::Analysis, Some(class_index)));
        }
        let needed = n.div_ceil(2) as usize;
        if trials.len() < needed {
            return Err(StageFailure {
                stage: StageTag::Analysis,
                class_index: Some(class_index),
                cause: format!("only {} of {n} analysis trials parsed, need {needed}", trials.len()),
            });
        }
        let degraded = trials.len() < n as usize;
        Ok((trials, degraded))
    }

    fn run_anchors(
        &self,
        sample: &SampleManifest,
        gen: &GenerationOutput,
        class_index: u32,
        trail: &mut Trail,
    ) -> Result<Vec<AnchorVote>, StageFailure> {
        let call = StageCall {
            stage: StageTag::Anchors,
            template: TemplateId::Anchors,
            trial: 1,
            class_index: Some(class_index),
            ctx: self.analysis_ctx(sample, gen),
            temperature: self.cfg.temperature_analysis,
        };
        self.call(sample, call, trail, |reply, _| match reply {
            Reply::Anchors(a) => Ok(a.anchor_votes),
            _ => Err("unexpected reply kind".into()),
        })
        .map_err(|e| e.into_failure(StageTag::Anchors, Some(class_index)))
    }

    fn refine_ctx(
        &self,
        sample: &SampleManifest,
        gen: &GenerationOutput,
        cons: Option<&ConsensusResult>,
        anchors: Option<&[AnchorVote]>,
    ) -> PromptContext {
        let mut ctx = self
            .analysis_ctx(sample, gen)
            .max_delta(self.cfg.max_delta_px(sample.dims));
        if let Some(c) = cons {
            ctx = ctx
                .av_consistency(c.mean_av_consistency)
                .role_tags(&c.role_tags)
                .anchor_votes(&c.anchors)
                .keep(c.keep);
        } else if let Some(a) = anchors {
            ctx = ctx.anchor_votes(a);
        }
        ctx
    }

    /// One refinement call and resolution of its reply into a final box.
    fn refine(
        &self,
        sample: &SampleManifest,
        gen: &GenerationOutput,
        cons: Option<&ConsensusResult>,
        anchors: Option<&[AnchorVote]>,
        class_index: u32,
        trail: &mut Trail,
    ) -> Result<(BoundingBox, RefinementRecord), StageFailure> {
        let call = StageCall {
            stage: StageTag::Refine,
            template: TemplateId::Refine,
            trial: 0,
            class_index: Some(class_index),
            ctx: self.refine_ctx(sample, gen, cons, anchors),
            temperature: self.cfg.temperature_refine,
        };
        let reply = self.call(sample, call, trail, |reply, _| match reply {
            Reply::Refinement(r) => Ok(r),
            _ => Err("unexpected reply kind".into()),
        });
        let init = gen.initial_box;
        match reply {
            Ok(r) => {
                // a larger move is allowed only when analysis judged the box inconsistent
                let allow_large = cons.is_some_and(|c| c.mean_av_consistency < self.cfg.tau_av);
                let max_delta = f64::from(self.cfg.max_delta_px(sample.dims));
                Ok(resolve_refinement(&init, &r, sample.dims, max_delta, allow_large, &mut trail.notes))
            }
            Err(StageError::Parse(msg)) => {
                trail.notes.push(RepairNote::new(
                    "refinement",
                    json!(msg),
                    json!(init),
                    RepairRule::Fallback,
                ));
                Ok((
                    init,
                    RefinementRecord {
                        source: RefinementSource::Fallback,
                        ..RefinementRecord::skipped()
                    },
                ))
            }
            Err(e) => Err(e.into_failure(StageTag::Refine, Some(class_index))),
        }
    }

    fn run_class(
        &self,
        sample: &SampleManifest,
        class_index: u32,
        gen: GenerationOutput,
        trail: &mut Trail,
    ) -> Result<ClassEntry, StageFailure> {
        let notes_before = trail.notes.len();
        let mut trials = Vec::new();
        let mut degraded = false;
        let mut cons = None;
        let mut gating = None;
        let mut anchors = None;
        match plan(self.cfg.variant).analysis {
            AnalysisKind::Sampled => {
                let (t, d) = self.run_analysis(sample, &gen, class_index, trail)?;
                let c = consensus(&t).map_err(|e| StageFailure {
                    stage: StageTag::Analysis,
                    class_index: Some(class_index),
                    cause: e.to_string(),
                })?;
                let s_aud = gen.audio_confidence.unwrap_or(0.0);
                gating = Some(gate(&c, s_aud, self.cfg.thresholds()));
                trials = t;
                degraded = d;
                cons = Some(c);
            }
            AnalysisKind::AnchorsOnly => anchors = Some(self.run_anchors(sample, &gen, class_index, trail)?),
            AnalysisKind::None => {}
        }
        let (final_box, refinement) = if gating.is_some_and(|g| g.keep_initial) {
            (gen.initial_box, RefinementRecord::skipped())
        } else {
            self.refine(sample, &gen, cons.as_ref(), anchors.as_deref(), class_index, trail)?
        };
        let confidence = cons
            .as_ref()
            .map(|c| c.mean_av_consistency)
            .or(gen.audio_confidence)
            .unwrap_or(0.0);
        Ok(ClassEntry {
            class_index,
            changed: final_box != gen.initial_box,
            generation: gen,
            anchors,
            trials,
            degraded,
            consensus: cons,
            gating,
            final_box,
            refinement,
            confidence,
            repair_notes: trail.notes.split_off(notes_before),
        })
    }

    fn run_single(&self, sample: &SampleManifest, out: &mut SampleResult, trail: &mut Trail) -> Result<(), StageFailure> {
        let classify = plan(self.cfg.variant).classify;
        let ((loc, mut loc_trail), (aud, aud_trail)) = rayon::join(
            || {
                let mut t = Trail::default();
                (self.localize(sample, None, None, &mut t), t)
            },
            || {
                let mut t = Trail::default();
                let r = classify.then(|| self.classify(sample, &mut t));
                (r, t)
            },
        );
        loc_trail.absorb(aud_trail);
        trail.absorb(loc_trail);
        let (initial_box, description) = loc.map_err(|e| e.into_failure(StageTag::GenLoc, None))?;
        let audio = aud.transpose().map_err(|e| e.into_failure(StageTag::GenAud, None))?;
        let gen = GenerationOutput {
            initial_box,
            description,
            audio_class: audio.as_ref().map(|a| a.audio_class.clone()),
            audio_confidence: audio.map(|a| a.audio_confidence),
        };
        let mut class_trail = Trail::default();
        let entry = self.run_class(sample, 0, gen, &mut class_trail);
        trail.calls.extend(class_trail.calls);
        trail.notes.extend(class_trail.notes);
        out.entries.push(entry?);
        Ok(())
    }

    fn run_duet(&self, sample: &SampleManifest, out: &mut SampleResult, trail: &mut Trail) -> Result<(), StageFailure> {
        let sources = self
            .classify_mixture(sample, trail)
            .map_err(|e| e.into_failure(StageTag::GenAudMulti, None))?;
        out.audio_sources = Some(sources.clone());
        let per_class: Vec<(Result<ClassEntry, StageFailure>, Trail)> = sources
            .par_iter()
            .enumerate()
            .map(|(i, src)| {
                let ci = i as u32;
                let mut t = Trail::default();
                let r = self
                    .localize(sample, Some(&src.audio_class), Some(ci), &mut t)
                    .map_err(|e| e.into_failure(StageTag::GenLoc, Some(ci)))
                    .and_then(|(initial_box, description)| {
                        let gen = GenerationOutput {
                            initial_box,
                            description,
                            audio_class: Some(src.audio_class.clone()),
                            audio_confidence: Some(src.audio_confidence),
                        };
                        self.run_class(sample, ci, gen, &mut t)
                    });
                (r, t)
            })
            .collect();
        let mut first_err = None;
        for (r, t) in per_class {
            trail.calls.extend(t.calls);
            trail.notes.extend(t.notes);
            match r {
                Ok(e) => out.entries.push(e),
                Err(f) => {
                    first_err.get_or_insert(f);
                }
            }
        }
        first_err.map_or(Ok(()), Err)
    }

    fn empty_result(&self, sample: &SampleManifest) -> SampleResult {
        SampleResult {
            sample_id: sample.id.clone(),
            mode: sample.mode,
            variant: self.cfg.variant,
            n: self.cfg.n,
            status: SampleStatus::Ok,
            failure: None,
            audio_sources: None,
            entries: Vec::new(),
            repair_notes: Vec::new(),
            warnings: Vec::new(),
            calls: Vec::new(),
            model_calls: 0,
            elapsed_ms: 0,
        }
    }

    fn preflight(&self, sample: &SampleManifest, out: &mut SampleResult) -> Result<(), StageFailure> {
        let media_failure = |stage, e: ClientError| StageFailure {
            stage,
            class_index: None,
            cause: e.to_string(),
        };
        let (_, warning) = inspect_media(&sample.image_path(), MediaKind::Image, Some(sample.dims))
            .map_err(|e| media_failure(StageTag::GenLoc, e))?;
        out.warnings.extend(warning);
        inspect_media(&sample.audio_path(), MediaKind::Audio, None).map_err(|e| media_failure(StageTag::GenAud, e))?;
        Ok(())
    }

    /// Runs every stage for one sample. Failures are recorded in the
    /// result rather than returned.
    pub fn run_sample(&self, sample: &SampleManifest) -> SampleResult {
        let started = Instant::now();
        let mut out = self.empty_result(sample);
        let mut trail = Trail::default();
        let outcome = self.preflight(sample, &mut out).and_then(|_| match sample.mode {
            Mode::Single => self.run_single(sample, &mut out, &mut trail),
            Mode::Duet => self.run_duet(sample, &mut out, &mut trail),
        });
        out.repair_notes = trail.notes;
        out.calls = trail.calls;
        if let Err(f) = outcome {
            log::warn!("{}: {} failed: {}", sample.id, f.stage, f.cause);
            out.status = SampleStatus::Failed;
            out.failure = Some(f);
            out.entries.clear();
        }
        out.model_calls = out.calls.len() as u32;
        out.elapsed_ms = started.elapsed().as_millis() as u64;
        out
    }

    /// Re-applies the gate under new thresholds using the stored consensus.
    /// Entries whose gate newly closes get a refinement call; entries whose
    /// gate opens fall back to the initial box without any call.
    pub fn regate(
        &self,
        sample: &SampleManifest,
        prev: &SampleResult,
        th: Thresholds,
    ) -> SampleResult {
        let mut out = prev.clone();
        if prev.is_failed() {
            return out;
        }
        let mut trail = Trail::default();
        for entry in &mut out.entries {
            let (Some(cons), Some(old)) = (&entry.consensus, entry.gating) else { continue };
            let s_aud = entry.generation.audio_confidence.unwrap_or(0.0);
            let new = gate(cons, s_aud, th);
            entry.gating = Some(new);
            if new.keep_initial {
                entry.final_box = entry.generation.initial_box;
                entry.refinement = RefinementRecord::skipped();
                entry.changed = false;
            } else if old.keep_initial {
                let mut t = Trail::default();
                match self.refine(sample, &entry.generation, Some(cons), None, entry.class_index, &mut t) {
                    Ok((b, rec)) => {
                        entry.final_box = b;
                        entry.refinement = rec;
                        entry.changed = b != entry.generation.initial_box;
                        entry.repair_notes.extend(t.notes.iter().cloned());
                    }
                    Err(f) => {
                        out.status = SampleStatus::Failed;
                        out.failure = Some(f);
                    }
                }
                trail.absorb(t);
            }
        }
        if out.is_failed() {
            out.entries.clear();
        }
        out.calls.extend(trail.calls);
        out.model_calls = out.calls.len() as u32;
        out
    }
}

/// Limits each side's movement relative to `init` to `max_delta` pixels.
fn clip_to_budget(init: &BoundingBox, cand: &BoundingBox, max_delta: f64) -> Option<[f64; 4]> {
    let (a, b) = (init.to_array(), cand.to_array());
    if a.iter().zip(&b).all(|(x, y)| (y - x).abs() <= max_delta) {
        return None;
    }
    let mut out = [0.0; 4];
    for i in 0..4 {
        out[i] = a[i] + (b[i] - a[i]).clamp(-max_delta, max_delta);
    }
    Some(out)
}

/// Turns a parsed refinement reply into the final box.
///
/// Order: a usable reply box wins; otherwise a parsed op is applied to the
/// initial box; otherwise the initial box is kept. Unless `allow_large`,
/// per-side movement is clipped to `max_delta`.
pub fn resolve_refinement(
    init: &BoundingBox,
    reply: &RefinementReply,
    dims: ImageDims,
    max_delta: f64,
    allow_large: bool,
    notes: &mut Vec<RepairNote>,
) -> (BoundingBox, RefinementRecord) {
    let mut rec = RefinementRecord {
        source: RefinementSource::Unchanged,
        declared_ops: reply.ops.op().map(|op| crate::schemas::op_to_value(&op)).or_else(|| {
            match &reply.ops {
                crate::schemas::OpsField::Unparseable(v) => Some(v.clone()),
                _ => None,
            }
        }),
        applied_op: None,
        clipped: false,
        refined_description: Some(reply.refined_description.clone()),
    };
    if !reply.changed {
        return (*init, rec);
    }
    let candidate = match validate_box_noted(reply.bbox, dims) {
        Ok(v) => {
            if v.clamped {
                notes.push(RepairNote::new("bbox", json!(reply.bbox), json!(v.bbox), RepairRule::ClampedToImage));
            }
            rec.source = RefinementSource::ReplyBox;
            Some(v.bbox)
        }
        Err(_) => match reply.ops.op().map(|op| (op, op.apply(init, dims))) {
            Some((op, Ok(v))) => {
                if v.clamped {
                    notes.push(RepairNote::new("ops", crate::schemas::op_to_value(&op), json!(v.bbox), RepairRule::EdgeClamp));
                }
                rec.source = RefinementSource::Ops;
                rec.applied_op = Some(op);
                Some(v.bbox)
            }
            _ => None,
        },
    };
    let Some(mut candidate) = candidate else {
        notes.push(RepairNote::new("bbox", json!(reply.bbox), json!(init), RepairRule::Fallback));
        rec.source = RefinementSource::Fallback;
        return (*init, rec);
    };
    if !allow_large {
        if let Some(clipped) = clip_to_budget(init, &candidate, max_delta) {
            match BoundingBox::try_from(clipped) {
                Ok(b) => {
                    notes.push(RepairNote::new("bbox", json!(candidate), json!(b), RepairRule::ClippedDelta));
                    candidate = b;
                    rec.clipped = true;
                }
                Err(_) => {
                    notes.push(RepairNote::new("bbox", json!(candidate), json!(init), RepairRule::Fallback));
                    rec.source = RefinementSource::Fallback;
                    return (*init, rec);
                }
            }
        }
    }
    (candidate, rec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schemas::OpsField;

    fn d224() -> ImageDims {
        ImageDims::new(224, 224).unwrap()
    }

    fn reply(bbox: [f64; 4], changed: bool, ops: OpsField) -> RefinementReply {
        RefinementReply {
            bbox,
            changed,
            ops,
            refined_description: "d".into(),
        }
    }

    fn init() -> BoundingBox {
        BoundingBox::new(10., 20., 110., 220.).unwrap()
    }

    #[test]
    fn valid_reply_box_is_used() {
        let mut notes = vec![];
        let (b, rec) = resolve_refinement(&init(), &reply([12., 22., 108., 216.], true, OpsField::Absent), d224(), 32., false, &mut notes);
        assert_eq!(b, BoundingBox::new(12., 22., 108., 216.).unwrap());
        assert_eq!(rec.source, RefinementSource::ReplyBox);
        assert!(notes.is_empty());
    }

    #[test]
    fn invalid_box_falls_back_to_ops() {
        let mut notes = vec![];
        let ops = OpsField::Parsed(RefinementOp::Recenter { cx: 112., cy: 112. });
        let (b, rec) = resolve_refinement(&init(), &reply([500., 500., 100., 100.], true, ops), d224(), 32., true, &mut notes);
        assert_eq!(b, crate::geometry::apply_recenter(&init(), 112., 112., d224()).unwrap());
        assert_eq!(rec.source, RefinementSource::Ops);
    }

    #[test]
    fn nothing_usable_keeps_initial() {
        let mut notes = vec![];
        let (b, rec) = resolve_refinement(&init(), &reply([500., 500., 100., 100.], true, OpsField::Absent), d224(), 32., false, &mut notes);
        assert_eq!(b, init());
        assert_eq!(rec.source, RefinementSource::Fallback);
        assert_eq!(notes[0].rule, RepairRule::Fallback);
    }

    #[test]
    fn unchanged_reply_keeps_initial() {
        let mut notes = vec![];
        let (b, rec) = resolve_refinement(&init(), &reply([0., 0., 5., 5.], false, OpsField::Absent), d224(), 32., false, &mut notes);
        assert_eq!(b, init());
        assert_eq!(rec.source, RefinementSource::Unchanged);
    }

    #[test]
    fn large_moves_are_clipped_unless_allowed() {
        let mut notes = vec![];
        let r = reply([60., 20., 160., 220.], true, OpsField::Absent);
        let (b, rec) = resolve_refinement(&init(), &r, d224(), 32., false, &mut notes);
        assert_eq!(b, BoundingBox::new(42., 20., 142., 220.).unwrap());
        assert!(rec.clipped);
        assert_eq!(notes[0].rule, RepairRule::ClippedDelta);
        let (b, rec) = resolve_refinement(&init(), &r, d224(), 32., true, &mut vec![]);
        assert_eq!(b, BoundingBox::new(60., 20., 160., 220.).unwrap());
        assert!(!rec.clipped);
    }

    #[test]
    fn delta_budget_scales_with_width() {
        let cfg = PipelineConfig::default();
        assert_eq!(cfg.max_delta_px(d224()), 32);
        assert_eq!(cfg.max_delta_px(ImageDims::new(448, 224).unwrap()), 64);
    }

    #[test]
    fn config_validation() {
        assert!(PipelineConfig::default().validate().is_ok());
        let bad = PipelineConfig { n: 0, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = PipelineConfig { tau_av: 1.5, ..Default::default() };
        assert!(bad.validate().is_err());
    }
}
