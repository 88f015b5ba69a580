//! Aggregation of sampled analysis trials and the keep/refine gate.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::schemas::{AnalysisReply, AnchorVote, MAX_ANCHORS, MAX_ROLE_TAGS};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConsensusError {
    #[error("no analysis trials to aggregate")]
    EmptyTrials,
}

/// One sampled analysis, with its 1-based trial index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisTrial {
    pub trial: u32,
    #[serde(flatten)]
    pub reply: AnalysisReply,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsensusResult {
    pub mean_av_consistency: f64,
    pub role_tags: Vec<String>,
    pub anchors: Vec<AnchorVote>,
    pub keep: bool,
    pub keep_votes: u32,
    pub trials: u32,
}

/// Order-independent sum: values are sorted before adding.
fn stable_mean(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    values.iter().sum::<f64>() / values.len() as f64
}

/// Mean score, frequency-ranked tags (top 4), score-averaged anchors
/// (top 5), strict-majority keep. Ties break lexicographically.
pub fn consensus(trials: &[AnalysisTrial]) -> Result<ConsensusResult, ConsensusError> {
    if trials.is_empty() {
        return Err(ConsensusError::EmptyTrials);
    }
    let n = trials.len();

    let mut scores: Vec<f64> = trials.iter().map(|t| t.reply.av_consistency).collect();
    let mean_av_consistency = stable_mean(&mut scores).clamp(0.0, 1.0);

    let mut tag_counts: BTreeMap<&str, usize> = BTreeMap::new();
    for t in trials {
        let mut seen: Vec<&str> = t.reply.role_tags.iter().map(String::as_str).collect();
        seen.sort_unstable();
        seen.dedup();
        for tag in seen {
            *tag_counts.entry(tag).or_insert(0) += 1;
        }
    }
    let mut ranked_tags: Vec<(&str, usize)> = tag_counts.into_iter().collect();
    ranked_tags.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let role_tags = ranked_tags
        .into_iter()
        .take(MAX_ROLE_TAGS)
        .map(|(t, _)| t.to_string())
        .collect();

    let mut anchor_scores: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for t in trials {
        for v in &t.reply.anchor_votes {
            anchor_scores.entry(v.anchor.as_str()).or_default().push(v.score);
        }
    }
    let mut anchors: Vec<AnchorVote> = anchor_scores
        .into_iter()
        .map(|(name, mut s)| AnchorVote {
            anchor: name.to_string(),
            score: stable_mean(&mut s),
        })
        .collect();
    anchors.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.anchor.cmp(&b.anchor)));
    anchors.truncate(MAX_ANCHORS);

    let keep_votes = trials.iter().filter(|t| t.reply.keep).count();
    // strict majority: 2 * votes > n
    let keep = 2 * keep_votes > n;

    Ok(ConsensusResult {
        mean_av_consistency,
        role_tags,
        anchors,
        keep,
        keep_votes: keep_votes as u32,
        trials: n as u32,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub tau_av: f64,
    pub tau_aud: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            tau_av: 0.5,
            tau_aud: 0.75,
        }
    }
}

/// Whether to keep the initial box, with the three conditions behind it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GatingDecision {
    /// True skips refinement.
    pub keep_initial: bool,
    pub keep_flag: bool,
    pub av_ok: bool,
    pub audio_ok: bool,
    pub mean_av_consistency: f64,
    pub audio_confidence: f64,
    pub tau_av: f64,
    pub tau_aud: f64,
}

/// Both comparisons are inclusive.
pub fn gate(cons: &ConsensusResult, audio_confidence: f64, th: Thresholds) -> GatingDecision {
    let av_ok = cons.mean_av_consistency >= th.tau_av;
    let audio_ok = audio_confidence >= th.tau_aud;
    GatingDecision {
        keep_initial: cons.keep && av_ok && audio_ok,
        keep_flag: cons.keep,
        av_ok,
        audio_ok,
        mean_av_consistency: cons.mean_av_consistency,
        audio_confidence,
        tau_av: th.tau_av,
        tau_aud: th.tau_aud,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn trial(i: u32, av: f64, tags: &[&str], anchors: &[(&str, f64)], keep: bool) -> AnalysisTrial {
        AnalysisTrial {
            trial: i,
            reply: AnalysisReply {
                av_consistency: av,
                role_tags: tags.iter().map(|s| s.to_string()).collect(),
                anchor_votes: anchors
                    .iter()
                    .map(|(a, s)| AnchorVote {
                        anchor: a.to_string(),
                        score: *s,
                    })
                    .collect(),
                keep,
            },
        }
    }

    fn cons(trials: &[AnalysisTrial]) -> ConsensusResult {
        consensus(trials).unwrap()
    }

    #[test]
    fn mean_of_scores() {
        let ts: Vec<_> = [0.2, 0.4, 0.6, 0.8, 1.0]
            .iter()
            .enumerate()
            .map(|(i, &s)| trial(i as u32 + 1, s, &[], &[], true))
            .collect();
        assert!((cons(&ts).mean_av_consistency - 0.6).abs() < 1e-12);
    }

    #[test]
    fn strict_majority() {
        let flags = |fs: &[bool]| -> Vec<AnalysisTrial> {
            fs.iter().enumerate().map(|(i, &k)| trial(i as u32, 0.5, &[], &[], k)).collect()
        };
        assert!(cons(&flags(&[true, true, true, false, false])).keep);
        assert!(!cons(&flags(&[true, true, false, false])).keep);
    }

    #[test]
    fn tags_by_frequency_then_name() {
        let mut ts = Vec::new();
        let counts: [(&str, usize); 5] =
            [("bow_on_strings", 5), ("violin_body", 4), ("hands", 2), ("mouth", 2), ("bell", 1)];
        for i in 0..5 {
            let tags: Vec<&str> = counts.iter().filter(|(_, c)| i < *c).map(|(t, _)| *t).collect();
            ts.push(trial(i as u32, 0.5, &tags, &[], true));
        }
        assert_eq!(cons(&ts).role_tags, ["bow_on_strings", "violin_body", "hands", "mouth"]);
    }

    #[test]
    fn anchors_averaged() {
        let ts = vec![
            trial(1, 0.5, &[], &[("bow_on_strings", 0.9), ("violin_body", 0.6)], true),
            trial(2, 0.5, &[], &[("bow_on_strings", 0.7)], true),
        ];
        let c = cons(&ts);
        assert_eq!(c.anchors.len(), 2);
        assert_eq!(c.anchors[0].anchor, "bow_on_strings");
        assert!((c.anchors[0].score - 0.8).abs() < 1e-12);
        assert_eq!(c.anchors[1], AnchorVote { anchor: "violin_body".into(), score: 0.6 });
    }

    #[test]
    fn empty_is_error() {
        assert_eq!(consensus(&[]), Err(ConsensusError::EmptyTrials));
    }

    #[test]
    fn single_trial_passes_through() {
        let t = trial(1, 0.37, &["a", "b"], &[("x", 0.4), ("y", 0.9)], false);
        let c = cons(std::slice::from_ref(&t));
        assert_eq!(c.mean_av_consistency, 0.37);
        assert!(!c.keep);
        assert_eq!(c.role_tags, ["a", "b"]);
        assert_eq!(c.anchors[0].anchor, "y");
    }

    #[test]
    fn gate_examples() {
        let mk = |av: f64, keep: bool| ConsensusResult {
            mean_av_consistency: av,
            role_tags: vec![],
            anchors: vec![],
            keep,
            keep_votes: 0,
            trials: 5,
        };
        let th = Thresholds::default();
        assert!(gate(&mk(0.62, true), 0.80, th).keep_initial);
        let g = gate(&mk(0.62, true), 0.70, th);
        assert!(!g.keep_initial && !g.audio_ok);
        assert!(gate(&mk(0.50, true), 0.75, th).keep_initial);
    }

    fn arb_trials() -> impl Strategy<Value = Vec<AnalysisTrial>> {
        let tag = prop::sample::select(vec!["a", "b", "c", "d", "e", "f"]);
        prop::collection::vec(
            (
                0.0f64..=1.0,
                prop::collection::vec(tag.clone(), 0..5),
                prop::collection::vec((tag, 0.0f64..=1.0), 0..6),
                any::<bool>(),
            ),
            1..8,
        )
        .prop_map(|v| {
            v.into_iter()
                .enumerate()
                .map(|(i, (av, tags, anchors, keep))| {
                    let mut tags: Vec<&str> = tags;
                    tags.dedup();
                    let mut seen = std::collections::BTreeSet::new();
                    let anchors: Vec<(&str, f64)> =
                        anchors.into_iter().filter(|(a, _)| seen.insert(*a)).collect();
                    trial(i as u32 + 1, av, &tags, &anchors, keep)
                })
                .collect()
        })
    }

    proptest! {
        #[test]
        fn permutation_invariant(ts in arb_trials(), seed in any::<u64>()) {
            use rand::{seq::SliceRandom, SeedableRng};
            let mut shuffled = ts.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(cons(&ts), cons(&shuffled));
        }

        #[test]
        fn gating_monotone(av in 0.0f64..=1.0, aud in 0.0f64..=1.0, keep: bool,
                           t1 in 0.0f64..=1.0, t2 in 0.0f64..=1.0, bump in 0.0f64..0.5) {
            let c = ConsensusResult { mean_av_consistency: av, role_tags: vec![], anchors: vec![],
                keep, keep_votes: 0, trials: 1 };
            let lo = gate(&c, aud, Thresholds { tau_av: t1, tau_aud: t2 });
            let hi = gate(&c, aud, Thresholds { tau_av: t1 + bump, tau_aud: t2 + bump });
            prop_assert!(!(hi.keep_initial && !lo.keep_initial));
        }
    }
}
