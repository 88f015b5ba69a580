//! Regenerates the replay store and golden outputs under tests/fixtures.
//!
//! A scripted backend answers every request; a recording wrapper captures
//! the answers. All variants, trial counts in {1, 3, 5} and the threshold
//! sweep are exercised so the store covers every request the tests make.
//!
//! cargo run -p avloc-core --example make_fixtures

use std::fs;
use std::path::PathBuf;
use std::sync::Arc;

use regex::Regex;
use serde_json::json;

use avloc_core::client::{Backend, Client, ClientError, FnBackend, MultimodalRequest, RecordingBackend, ReplayBackend, ReplayStore};
use avloc_core::dataset::load_manifest;
use avloc_core::harness::{self, masked_line, RunConfig, RESULTS_FILE};
use avloc_core::prompts::Variant;
use avloc_core::schemas::StageTag;

struct ClassScript {
    class: &'static str,
    conf: f64,
    b_init: [f64; 4],
    /// (av_consistency, keep) per trial.
    trials: [(f64, bool); 5],
    refine: String,
}

fn refine(bbox: [f64; 4], changed: bool, ops: serde_json::Value, desc: &str) -> String {
    json!({"bbox": bbox, "changed": changed, "ops": ops, "refined_description": desc}).to_string()
}

fn script(sample: &str) -> Vec<ClassScript> {
    let violin = |b_init, trials| ClassScript {
        class: "violin",
        conf: 0.9,
        b_init,
        trials,
        refine: refine([29., 38., 183., 212.], true, json!(null), "A violinist bows the instrument held under the chin."),
    };
    match sample {
        "violin-001" => vec![violin(
            [30., 40., 180., 210.],
            [(0.7, true), (0.6, false), (0.8, true), (0.7, true), (0.5, false)],
        )],
        "guitar-002" => vec![ClassScript {
            class: "guitar",
            conf: 0.85,
            b_init: [10., 20., 110., 220.],
            trials: [(0.4, false), (0.5, false), (0.45, true), (0.3, false), (0.5, false)],
            refine: refine(
                [12., 22., 108., 216.],
                true,
                json!({"op": "delta", "d_l": 2, "d_t": 2, "d_r": -2, "d_b": -4}),
                "The guitar body and the strumming hand are tightly enclosed.",
            ),
        }],
        "dog-003" => vec![ClassScript {
            class: "dog",
            conf: 0.6,
            b_init: [20., 30., 120., 130.],
            trials: [(0.8, true), (0.85, true), (0.75, true), (0.8, true), (0.9, true)],
            refine: refine(
                [500., 500., 100., 100.],
                true,
                json!({"op": "recenter", "cx": 112, "cy": 112}),
                "The barking dog sits near the image center.",
            ),
        }],
        "piano-004" => vec![ClassScript {
            class: "piano",
            conf: 0.95,
            b_init: [30., 60., 190., 210.],
            trials: [(0.6, false), (0.55, true), (0.7, false), (0.5, false), (0.6, true)],
            refine: refine([38., 76., 198., 204.], true, json!(null), "The keyboard and the pianist's hands are visible."),
        }],
        "drum-005" => vec![ClassScript {
            class: "drum",
            conf: 0.8,
            b_init: [90., 90., 210., 215.],
            trials: [(0.3, false), (0.35, false), (0.2, false), (0.4, true), (0.3, false)],
            refine: "I think the box is fine as it is.".into(),
        }],
        "flute-006" => vec![ClassScript {
            class: "flute",
            conf: 0.82,
            b_init: [45., 25., 160., 230.],
            trials: [(1.3, false), (0.55, true), (0.6, false), (0.5, false), (0.65, true)],
            refine: refine([48., 28., 152., 204.], true, json!(null), "The flute is held horizontally at the player's mouth."),
        }],
        "violin-001+piano-004" => vec![
            ClassScript {
                b_init: [25., 35., 185., 215.],
                conf: 0.88,
                ..violin([0.; 4], [(0.7, true), (0.75, true), (0.65, true), (0.7, false), (0.8, true)])
            },
            ClassScript {
                class: "piano",
                conf: 0.8,
                b_init: [260., 70., 420., 205.],
                trials: [(0.45, false), (0.5, false), (0.4, false), (0.5, true), (0.45, false)],
                refine: refine([262., 78., 424., 202.], true, json!(null), "The piano occupies the right frame."),
            },
        ],
        "guitar-002+dog-003" => vec![
            ClassScript {
                class: "guitar",
                conf: 0.9,
                b_init: [12., 20., 108., 218.],
                trials: [(0.75, true), (0.8, true), (0.7, true), (0.75, true), (0.7, false)],
                refine: refine([12., 20., 108., 218.], false, json!(null), "The guitar is already well enclosed."),
            },
            ClassScript {
                class: "cat",
                conf: 0.5,
                b_init: [280., 50., 400., 180.],
                trials: [(0.3, false), (0.35, false), (0.2, false), (0.3, false), (0.25, false)],
                refine: refine([280., 50., 400., 180.], false, json!(null), "An animal sits in the right frame."),
            },
        ],
        other => panic!("no script for {other}"),
    }
}

fn render_box(b: &[f64; 4]) -> String {
    format!("[{}, {}, {}, {}]", b[0].round(), b[1].round(), b[2].round(), b[3].round())
}

/// Finds the class a prompt is about, by class name or by previous box.
fn pick<'a>(classes: &'a [ClassScript], user: &str) -> &'a ClassScript {
    if classes.len() == 1 {
        return &classes[0];
    }
    let by_name = Regex::new(r#"(?m)(?:^- audio_class: (\S+)$|sound "([^"]+)")"#).unwrap();
    if let Some(c) = by_name.captures(user) {
        let name = c.get(1).or(c.get(2)).unwrap().as_str();
        if let Some(cs) = classes.iter().find(|cs| cs.class == name) {
            return cs;
        }
    }
    classes
        .iter()
        .find(|cs| user.contains(&render_box(&cs.b_init)))
        .unwrap_or_else(|| panic!("cannot tell which class this prompt targets:\n{user}"))
}

fn analysis_reply(cs: &ClassScript, trial: u32) -> String {
    let (av, keep) = cs.trials[(trial as usize - 1) % 5];
    let base = [format!("{}_body", cs.class), "hands".to_string(), "center_frame".to_string()];
    let tags: Vec<&str> = base.iter().take(1 + (trial as usize % 3)).map(String::as_str).collect();
    let anchors = json!([
        {"anchor": format!("{}_body", cs.class), "score": 0.9 - 0.05 * f64::from(trial)},
        {"anchor": "hands", "score": 0.5 + 0.02 * f64::from(trial)},
    ]);
    json!({"av_consistency": av, "role_tags": tags, "anchor_votes": anchors, "keep": keep}).to_string()
}

fn respond(req: &MultimodalRequest, attempt: u32) -> Result<String, ClientError> {
    let sample = req.key.sample_id.as_str();
    let classes = script(sample);
    let user = req.user.as_str();
    let text = match req.key.stage {
        StageTag::GenLoc => {
            let cs = pick(&classes, user);
            let description = match cs.class {
                "violin" => "a violin being bowed".to_string(),
                other => format!("a {other} producing sound"),
            };
            json!({"bbox": cs.b_init, "description": description}).to_string()
        }
        StageTag::GenAud if sample == "flute-006" => r#"{"audio_class": "FLUTE", "audio_confidence": 0.82}"#.into(),
        StageTag::GenAud => {
            json!({"audio_class": classes[0].class, "audio_confidence_score": classes[0].conf}).to_string()
        }
        StageTag::GenAudMulti => {
            let sources: Vec<_> = classes
                .iter()
                .map(|c| json!({"audio_class": c.class, "audio_confidence_score": c.conf}))
                .collect();
            json!({ "sources": sources }).to_string()
        }
        StageTag::Analysis if sample == "flute-006" && req.key.trial == 1 => {
            if attempt == 1 {
                "Sure! Here is my analysis of the flute clip.".into()
            } else {
                json!({
                    "av_consistency": 1.3,
                    "role_tags": ["Flute_Body", "HANDS", "mouth_on_flute", "fingers", "breath"],
                    "anchor_votes": [
                        {"anchor": "flute_body", "score": 0.9},
                        {"anchor": "lips", "score": 0.8},
                        {"anchor": "fingers", "score": 0.7},
                        {"anchor": "keys", "score": 0.6},
                        {"anchor": "music_stand", "score": 0.2},
                        {"anchor": "hands", "score": 0.5}
                    ],
                    "keep": false
                })
                .to_string()
            }
        }
        StageTag::Analysis => analysis_reply(pick(&classes, user), req.key.trial),
        StageTag::Anchors => {
            let cs = pick(&classes, user);
            json!({"anchor_votes": [{"anchor": format!("{}_body", cs.class), "score": 0.8}]}).to_string()
        }
        StageTag::Refine => pick(&classes, user).refine.clone(),
    };
    Ok(text)
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let root = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures");
    let manifest = root.join("manifest.jsonl");
    let store = root.join("replay.jsonl");
    let golden = root.join("golden");
    fs::create_dir_all(&golden)?;
    let _ = fs::remove_file(&store);

    let scripted: Arc<dyn Backend> = Arc::new(FnBackend::new("scripted", respond));
    let recorder: Arc<dyn Backend> = Arc::new(RecordingBackend::new(scripted, &store)?);
    let samples = load_manifest(&manifest)?;

    let cfg = RunConfig {
        manifest: Some(manifest.clone()),
        replay_store: Some(store.clone()),
        ..RunConfig::default()
    };
    let client = Arc::new(Client::new(recorder));
    let (_, cells) = harness::ablate(&cfg, client.clone(), &samples, &Variant::ALL, &[1, 3, 5])?;
    let gar_n5 = &cells[2];
    let pipeline = cfg.build_pipeline(cfg.pipeline.clone(), client.clone())?;
    harness::sweep(gar_n5, &samples, &pipeline, None, &cfg.matcher())?;

    // canonical order, no duplicates
    ReplayStore::load(&store)?.write(&store)?;

    let tmp_dir = tempfile::tempdir()?;
    let tmp = tmp_dir.path().to_path_buf();
    let replay = |c: &RunConfig| -> Result<Arc<dyn Backend>, ClientError> {
        Ok(Arc::new(ReplayBackend::open(c.replay_store.as_deref().unwrap())?))
    };
    let run_cfg = RunConfig {
        out: Some(tmp.clone()),
        ..cfg.clone()
    };
    harness::cmd_run(&run_cfg, replay(&run_cfg)?)?;
    let results = fs::read_to_string(tmp.join(RESULTS_FILE))?;
    let masked: String = results.lines().map(|l| masked_line(l) + "\n").collect();
    fs::write(golden.join(RESULTS_FILE), masked)?;

    let eval_cfg = RunConfig {
        out: Some(golden.clone()),
        ..cfg.clone()
    };
    harness::cmd_eval(&eval_cfg, &golden.join(RESULTS_FILE), Some(replay(&eval_cfg)?))?;
    let ab_cfg = RunConfig {
        out: Some(golden.clone()),
        ..cfg
    };
    harness::cmd_ablate(&ab_cfg, replay(&ab_cfg)?, &Variant::ALL, &[1, 3, 5])?;
    println!("wrote {} and {}", store.display(), golden.display());
    Ok(())
}
