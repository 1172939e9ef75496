//! Synthetic factorized speech corpus.
//!
//! Every utterance is rendered from three independent ground-truth factors:
//! the content (text tokens read from a shared script), the speaker's timbre
//! vector, and the articulation condition's distortion probabilities. The
//! acoustic token for content token `c` spoken with timbre `τ` is
//! `c · G + argmax_j ⟨τ, w[c][j]⟩`, where `G` allophone variants per content
//! token are scored against fixed random directions `w`. Articulation then
//! substitutes, repeats, or follows tokens with the reserved pause id.
//!
//! Because the generator is the oracle, timbre/condition swaps (the
//! voice-conversion pairs) are produced exactly by re-rendering with a
//! different factor and the original noise stream.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::seeds;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Healthy,
    Mild,
    Moderate,
    ModerateSevere,
    Severe,
}

impl Severity {
    pub const DYSARTHRIC: [Severity; 4] = [
        Severity::Mild,
        Severity::Moderate,
        Severity::ModerateSevere,
        Severity::Severe,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Severity::Healthy => "healthy",
            Severity::Mild => "mild",
            Severity::Moderate => "moderate",
            Severity::ModerateSevere => "moderate_severe",
            Severity::Severe => "severe",
        }
    }

    pub fn rank(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Severity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Severity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "healthy" => Severity::Healthy,
            "mild" => Severity::Mild,
            "moderate" => Severity::Moderate,
            "moderate_severe" => Severity::ModerateSevere,
            "severe" => Severity::Severe,
            other => return Err(Error::Input(format!("unknown severity `{other}`"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    pub utt_id: String,
    pub speaker_id: String,
    pub content: Vec<usize>,
    pub speech: Vec<usize>,
    pub condition: usize,
    pub severity: Severity,
    /// Produced by the synthesis model rather than the generator.
    pub synthetic: bool,
    /// Lineage for converted or synthesized utterances.
    pub source_utt_id: Option<String>,
}

impl Utterance {
    pub fn is_dysarthric(&self) -> bool {
        self.condition > 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerFactor {
    pub speaker_id: String,
    /// Unit-norm ground-truth timbre latent.
    pub timbre: Vec<f64>,
    /// The speaker's own articulation condition (0 for control speakers).
    pub condition: usize,
    pub severity: Severity,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistortionProbs {
    pub substitution: f64,
    pub repeat: f64,
    pub pause: f64,
}

impl DistortionProbs {
    pub const ZERO: DistortionProbs = DistortionProbs {
        substitution: 0.0,
        repeat: 0.0,
        pause: 0.0,
    };
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathologyFactor {
    pub condition: usize,
    pub severity: Severity,
    pub substitution_prob: f64,
    pub repeat_prob: f64,
    pub pause_prob: f64,
}

impl PathologyFactor {
    pub fn probs(&self) -> DistortionProbs {
        DistortionProbs {
            substitution: self.substitution_prob,
            repeat: self.repeat_prob,
            pause: self.pause_prob,
        }
    }
}

/// Speaker ids and severity tiers of the eight dysarthric speakers the
/// corpus imitates, in prototype order.
pub const DYSARTHRIC_SPEAKERS: [(&str, Severity); 8] = [
    ("F01", Severity::Severe),
    ("M01", Severity::Severe),
    ("M02", Severity::Severe),
    ("M04", Severity::Severe),
    ("M05", Severity::ModerateSevere),
    ("F03", Severity::Moderate),
    ("F04", Severity::Mild),
    ("M03", Severity::Mild),
];

pub const CONTROL_SPEAKERS: [&str; 7] = ["FC01", "FC02", "FC03", "MC01", "MC02", "MC03", "MC04"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub n_dysarthric_speakers: usize,
    pub n_healthy_speakers: usize,
    pub utterances_per_speaker: usize,
    pub content_len_min: usize,
    pub content_len_max: usize,
    /// Text vocabulary size.
    pub v_text: usize,
    /// Acoustic vocabulary size; the last id is the pause token.
    pub v_speech: usize,
    /// Dimension of the ground-truth timbre latent.
    pub d_gt: usize,
    pub seed: u64,
    /// Distortion probabilities for mild, moderate, moderate-severe, severe.
    pub severity_profile: [DistortionProbs; 4],
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            n_dysarthric_speakers: 8,
            n_healthy_speakers: 7,
            utterances_per_speaker: 24,
            content_len_min: 5,
            content_len_max: 8,
            v_text: 16,
            v_speech: 65,
            d_gt: 8,
            seed: 17,
            severity_profile: linear_profile(
                DistortionProbs {
                    substitution: 0.03,
                    repeat: 0.1,
                    pause: 0.1,
                },
                DistortionProbs {
                    substitution: 0.12,
                    repeat: 0.4,
                    pause: 0.4,
                },
            ),
        }
    }
}

/// Four linearly spaced tiers from `mild` to `severe`.
pub fn linear_profile(mild: DistortionProbs, severe: DistortionProbs) -> [DistortionProbs; 4] {
    let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
    std::array::from_fn(|i| {
        let t = i as f64 / 3.0;
        DistortionProbs {
            substitution: lerp(mild.substitution, severe.substitution, t),
            repeat: lerp(mild.repeat, severe.repeat, t),
            pause: lerp(mild.pause, severe.pause, t),
        }
    })
}

impl CorpusSpec {
    pub fn variants_per_token(&self) -> usize {
        (self.v_speech - 1) / self.v_text
    }

    pub fn pause_token(&self) -> usize {
        self.v_speech - 1
    }

    pub fn n_speakers(&self) -> usize {
        self.n_dysarthric_speakers + self.n_healthy_speakers
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_dysarthric_speakers", self.n_dysarthric_speakers),
            ("n_healthy_speakers", self.n_healthy_speakers),
            ("utterances_per_speaker", self.utterances_per_speaker),
            ("content_len_min", self.content_len_min),
            ("d_gt", self.d_gt),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be at least 1"));
            }
        }
        if self.content_len_max < self.content_len_min {
            return Err(Error::config("content_len_max", "must be >= content_len_min"));
        }
        if self.v_text < 2 {
            return Err(Error::config("v_text", "must be at least 2"));
        }
        if self.v_speech < self.v_text + 1 || (self.v_speech - 1) % self.v_text != 0 {
            return Err(Error::config(
                "v_speech",
                format!(
                    "must be v_text * G + 1 (one reserved pause id) for some G >= 1; got {} with v_text {}",
                    self.v_speech, self.v_text
                ),
            ));
        }
        let axes: [(&str, fn(&DistortionProbs) -> f64); 3] = [
            ("substitution", |p| p.substitution),
            ("repeat", |p| p.repeat),
            ("pause", |p| p.pause),
        ];
        for (name, get) in axes {
            for (i, tier) in self.severity_profile.iter().enumerate() {
                let v = get(tier);
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::config(format!("severity_profile.{name}"), format!("tier {i} probability {v} outside [0, 1]")));
                }
                if i > 0 && v <= get(&self.severity_profile[i - 1]) {
                    return Err(Error::config(
                        format!("severity_profile.{name}"),
                        "probabilities must strictly increase with severity",
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn probs_for(&self, severity: Severity) -> DistortionProbs {
        match severity {
            Severity::Healthy => DistortionProbs::ZERO,
            s => self.severity_profile[s.rank() - 1],
        }
    }

    /// `(speaker_id, condition, severity)` for every speaker, dysarthric first.
    pub fn speaker_roster(&self) -> Vec<(String, usize, Severity)> {
        let tiers = [Severity::Severe, Severity::ModerateSevere, Severity::Moderate, Severity::Mild];
        let mut roster = Vec::with_capacity(self.n_speakers());
        for i in 0..self.n_dysarthric_speakers {
            let (id, sev) = match DYSARTHRIC_SPEAKERS.get(i) {
                Some(&(id, sev)) => (id.to_string(), sev),
                None => (format!("D{:02}", i + 1), tiers[i % 4]),
            };
            roster.push((id, i + 1, sev));
        }
        for i in 0..self.n_healthy_speakers {
            let id = CONTROL_SPEAKERS
                .get(i)
                .map_or_else(|| format!("HC{:02}", i + 1), |s| s.to_string());
            roster.push((id, 0, Severity::Healthy));
        }
        roster
    }

    const KEYS: [&'static str; 16] = [
        "n_dysarthric_speakers",
        "n_healthy_speakers",
        "utterances_per_speaker",
        "content_len_min",
        "content_len_max",
        "v_text",
        "v_speech",
        "d_gt",
        "seed",
        "mild_substitution",
        "mild_repeat",
        "mild_pause",
        "severe_substitution",
        "severe_repeat",
        "severe_pause",
        "corpus_seed",
    ];

    pub fn known_keys() -> &'static [&'static str] {
        &Self::KEYS
    }

    /// Override defaults from `key = value` settings. `mild_*` / `severe_*`
    /// set the end points of the linear severity ladder.
    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let d = Self::default();
        let mild = d.severity_profile[0];
        let severe = d.severity_profile[3];
        let spec = Self {
            n_dysarthric_speakers: kv.get_or("n_dysarthric_speakers", d.n_dysarthric_speakers)?,
            n_healthy_speakers: kv.get_or("n_healthy_speakers", d.n_healthy_speakers)?,
            utterances_per_speaker: kv.get_or("utterances_per_speaker", d.utterances_per_speaker)?,
            content_len_min: kv.get_or("content_len_min", d.content_len_min)?,
            content_len_max: kv.get_or("content_len_max", d.content_len_max)?,
            v_text: kv.get_or("v_text", d.v_text)?,
            v_speech: kv.get_or("v_speech", d.v_speech)?,
            d_gt: kv.get_or("d_gt", d.d_gt)?,
            seed: match kv.get("corpus_seed")? {
                Some(s) => s,
                None => kv.get_or("seed", d.seed)?,
            },
            severity_profile: linear_profile(
                DistortionProbs {
                    substitution: kv.get_or("mild_substitution", mild.substitution)?,
                    repeat: kv.get_or("mild_repeat", mild.repeat)?,
                    pause: kv.get_or("mild_pause", mild.pause)?,
                },
                DistortionProbs {
                    substitution: kv.get_or("severe_substitution", severe.substitution)?,
                    repeat: kv.get_or("severe_repeat", severe.repeat)?,
                    pause: kv.get_or("severe_pause", severe.pause)?,
                },
            ),
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// The deterministic content-and-timbre → acoustic-token mapping plus the
/// stochastic articulation distortions.
#[derive(Debug, Clone)]
pub struct Renderer {
    v_text: usize,
    v_speech: usize,
    variants: usize,
    d_gt: usize,
    /// `[content][variant][dim]`, flattened.
    directions: Vec<f64>,
}

impl Renderer {
    pub fn new(spec: &CorpusSpec) -> Self {
        let variants = spec.variants_per_token();
        let mut rng = seeds::rng(spec.seed, "voice-directions");
        let directions = (0..spec.v_text * variants * spec.d_gt)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        Self {
            v_text: spec.v_text,
            v_speech: spec.v_speech,
            variants,
            d_gt: spec.d_gt,
            directions,
        }
    }

    pub fn pause_token(&self) -> usize {
        self.v_speech - 1
    }

    /// Healthy acoustic token for `content` spoken with `timbre`.
    pub fn voiced_token(&self, content: usize, timbre: &[f64]) -> usize {
        let mut best = 0;
        let mut best_score = f64::NEG_INFINITY;
        for j in 0..self.variants {
            let off = (content * self.variants + j) * self.d_gt;
            let score: f64 = self.directions[off..off + self.d_gt]
                .iter()
                .zip(timbre)
                .map(|(a, b)| a * b)
                .sum();
            if score > best_score {
                best_score = score;
                best = j;
            }
        }
        content * self.variants + best
    }

    /// Render one utterance. The noise stream is consumed identically for
    /// every probability setting, so renderings that differ only in
    /// timbre or distortion probabilities share their random draws.
    pub fn render(&self, content: &[usize], timbre: &[f64], probs: DistortionProbs, noise_seed: u64) -> Vec<usize> {
        debug_assert!(content.iter().all(|&c| c < self.v_text));
        let mut rng = seeds::rng_n(noise_seed, 0);
        let pause = self.pause_token();
        let mut speech = Vec::with_capacity(content.len() * 2);
        for &c in content {
            let u_sub: f64 = rng.random();
            let sub_tok = rng.random_range(0..pause);
            let u_rep: f64 = rng.random();
            let u_pause: f64 = rng.random();
            let tok = if u_sub < probs.substitution {
                sub_tok
            } else {
                self.voiced_token(c, timbre)
            };
            speech.push(tok);
            if u_rep < probs.repeat {
                speech.push(tok);
            }
            if u_pause < probs.pause {
                speech.push(pause);
            }
        }
        speech
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub spec: CorpusSpec,
    pub utterances: Vec<Utterance>,
    pub speaker_factors: BTreeMap<String, SpeakerFactor>,
    pub pathology_factors: BTreeMap<usize, PathologyFactor>,
}

pub fn noise_seed(spec: &CorpusSpec, utt_id: &str) -> u64 {
    seeds::derive(spec.seed, &format!("noise/{utt_id}"))
}

fn unit_timbre(spec: &CorpusSpec, speaker_id: &str) -> Vec<f64> {
    let mut rng = seeds::rng(spec.seed, &format!("timbre/{speaker_id}"));
    let v: Vec<f64> = (0..spec.d_gt).map(|_| StandardNormal.sample(&mut rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.into_iter().map(|x| x / norm).collect()
}

/// The shared reading script: one content sequence per utterance index,
/// with no immediately repeated tokens.
pub fn script(spec: &CorpusSpec) -> Vec<Vec<usize>> {
    let mut rng = seeds::rng(spec.seed, "script");
    (0..spec.utterances_per_speaker)
        .map(|_| {
            let len = rng.random_range(spec.content_len_min..=spec.content_len_max);
            let mut seq: Vec<usize> = Vec::with_capacity(len);
            while seq.len() < len {
                let t = rng.random_range(0..spec.v_text);
                if seq.last() != Some(&t) {
                    seq.push(t);
                }
            }
            seq
        })
        .collect()
}

pub fn generate_corpus(spec: &CorpusSpec) -> Result<Corpus> {
    spec.validate()?;
    let renderer = Renderer::new(spec);
    let lines = script(spec);
    let mut speaker_factors = BTreeMap::new();
    let mut pathology_factors = BTreeMap::new();
    let mut utterances = Vec::with_capacity(spec.n_speakers() * spec.utterances_per_speaker);

    for (speaker_id, condition, severity) in spec.speaker_roster() {
        let timbre = unit_timbre(spec, &speaker_id);
        if condition > 0 {
            let p = spec.probs_for(severity);
            pathology_factors.insert(
                condition,
                PathologyFactor {
                    condition,
                    severity,
                    substitution_prob: p.substitution,
                    repeat_prob: p.repeat,
                    pause_prob: p.pause,
                },
            );
        }
        let probs = spec.probs_for(severity);
        for (i, content) in lines.iter().enumerate() {
            let utt_id = format!("{speaker_id}_{i:03}");
            let speech = renderer.render(content, &timbre, probs, noise_seed(spec, &utt_id));
            utterances.push(Utterance {
                utt_id,
                speaker_id: speaker_id.clone(),
                content: content.clone(),
                speech,
                condition,
                severity,
                synthetic: false,
                source_utt_id: None,
            });
        }
        speaker_factors.insert(
            speaker_id.clone(),
            SpeakerFactor {
                speaker_id,
                timbre,
                condition,
                severity,
            },
        );
    }
    Ok(Corpus {
        spec: spec.clone(),
        utterances,
        speaker_factors,
        pathology_factors,
    })
}

impl Corpus {
    pub fn empty_like(&self) -> Corpus {
        Corpus {
            spec: self.spec.clone(),
            utterances: Vec::new(),
            speaker_factors: self.speaker_factors.clone(),
            pathology_factors: self.pathology_factors.clone(),
        }
    }

    pub fn with_utterances(&self, utterances: Vec<Utterance>) -> Corpus {
        Corpus {
            utterances,
            ..self.empty_like()
        }
    }

    pub fn renderer(&self) -> Renderer {
        Renderer::new(&self.spec)
    }

    /// Number of dysarthric prototypes (conditions 1..=n).
    pub fn n_prototypes(&self) -> usize {
        self.pathology_factors.keys().copied().max().unwrap_or(0)
    }

    pub fn speakers(&self) -> Vec<String> {
        let mut seen = Vec::new();
        for u in &self.utterances {
            if !seen.contains(&u.speaker_id) {
                seen.push(u.speaker_id.clone());
            }
        }
        seen
    }

    pub fn speaker(&self, id: &str) -> Result<&SpeakerFactor> {
        self.speaker_factors.get(id).ok_or_else(|| Error::Lookup {
            what: "speaker",
            name: id.to_string(),
        })
    }

    pub fn pathology(&self, condition: usize) -> Result<&PathologyFactor> {
        self.pathology_factors.get(&condition).ok_or_else(|| Error::Lookup {
            what: "condition",
            name: condition.to_string(),
        })
    }

    pub fn probs(&self, condition: usize) -> Result<DistortionProbs> {
        if condition == 0 {
            Ok(DistortionProbs::ZERO)
        } else {
            Ok(self.pathology(condition)?.probs())
        }
    }

    pub fn by_speaker(&self, id: &str) -> Vec<&Utterance> {
        self.utterances.iter().filter(|u| u.speaker_id == id).collect()
    }

    pub fn healthy(&self) -> Vec<&Utterance> {
        self.utterances.iter().filter(|u| u.condition == 0).collect()
    }

    pub fn dysarthric(&self) -> Vec<&Utterance> {
        self.utterances.iter().filter(|u| u.condition > 0).collect()
    }

    /// Render `content` with an arbitrary timbre / condition combination.
    pub fn render_with(&self, content: &[usize], timbre_speaker: &str, condition: usize, noise_seed: u64) -> Result<Vec<usize>> {
        let timbre = &self.speaker(timbre_speaker)?.timbre;
        Ok(self.renderer().render(content, timbre, self.probs(condition)?, noise_seed))
    }

    /// Check every data-model invariant.
    pub fn validate(&self) -> Result<()> {
        let spec = &self.spec;
        for u in &self.utterances {
            let ctx = |m: &str| Error::Integrity(format!("{}: {m}", u.utt_id));
            if (u.condition == 0) != (u.severity == Severity::Healthy) {
                return Err(ctx("condition 0 must coincide with healthy severity"));
            }
            if u.content.iter().any(|&t| t >= spec.v_text) {
                return Err(ctx("content token out of vocabulary"));
            }
            if u.speech.iter().any(|&t| t >= spec.v_speech) {
                return Err(ctx("speech token out of vocabulary"));
            }
            if !u.synthetic && u.speech.len() < u.content.len() {
                return Err(ctx("speech shorter than content"));
            }
            if !self.speaker_factors.contains_key(&u.speaker_id) {
                return Err(ctx("unknown speaker"));
            }
            if u.condition > 0 && !self.pathology_factors.contains_key(&u.condition) {
                return Err(ctx("unknown condition"));
            }
        }
        Ok(())
    }
}

/// Cross-condition, timbre-shifted pairs: every dysarthric utterance is
/// re-rendered with a random control speaker's timbre, and every control
/// utterance with a random dysarthric speaker's timbre. Content, articulation
/// condition and noise stream are kept, so labels follow the articulation.
pub fn make_vc_pairs(corpus: &Corpus) -> Result<Vec<Utterance>> {
    let healthy: Vec<&str> = corpus
        .speaker_factors
        .values()
        .filter(|s| s.condition == 0)
        .map(|s| s.speaker_id.as_str())
        .collect();
    let dysarthric: Vec<&str> = corpus
        .speaker_factors
        .values()
        .filter(|s| s.condition > 0)
        .map(|s| s.speaker_id.as_str())
        .collect();
    if healthy.is_empty() || dysarthric.is_empty() {
        return Err(Error::Precondition(
            "voice-conversion pairs need at least one healthy and one dysarthric speaker".into(),
        ));
    }
    let renderer = corpus.renderer();
    corpus
        .utterances
        .iter()
        .map(|u| {
            let mut rng = seeds::rng(corpus.spec.seed, &format!("vc/{}", u.utt_id));
            let pool = if u.condition > 0 { &healthy } else { &dysarthric };
            let donor = *pool.choose(&mut rng).expect("non-empty pool");
            let timbre = &corpus.speaker(donor)?.timbre;
            let speech = renderer.render(
                &u.content,
                timbre,
                corpus.probs(u.condition)?,
                noise_seed(&corpus.spec, u.source_utt_id.as_deref().unwrap_or(&u.utt_id)),
            );
            Ok(Utterance {
                utt_id: format!("{}~vc~{donor}", u.utt_id),
                speaker_id: donor.to_string(),
                content: u.content.clone(),
                speech,
                condition: u.condition,
                severity: u.severity,
                synthetic: false,
                source_utt_id: Some(u.utt_id.clone()),
            })
        })
        .collect()
}

/// Leave-one-speaker-out split: `(train, test)`.
pub fn loso_split(corpus: &Corpus, held_out: &str) -> Result<(Corpus, Corpus)> {
    if !corpus.utterances.iter().any(|u| u.speaker_id == held_out) {
        return Err(Error::Lookup {
            what: "speaker",
            name: held_out.to_string(),
        });
    }
    let (test, train): (Vec<_>, Vec<_>) = corpus
        .utterances
        .iter()
        .cloned()
        .partition(|u| u.speaker_id == held_out);
    Ok((corpus.with_utterances(train), corpus.with_utterances(test)))
}

/// Pause and repetition rates of an acoustic token sequence.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DistortionStats {
    pub pause_rate: f64,
    pub repeat_rate: f64,
}

impl DistortionStats {
    pub fn measure(speech: &[usize], pause_token: usize) -> Self {
        if speech.is_empty() {
            return Self::default();
        }
        let n = speech.len() as f64;
        let pauses = speech.iter().filter(|&&t| t == pause_token).count();
        let repeats = speech
            .windows(2)
            .filter(|w| w[0] == w[1] && w[0] != pause_token)
            .count();
        Self {
            pause_rate: pauses as f64 / n,
            repeat_rate: repeats as f64 / n,
        }
    }

    pub fn mean(items: impl IntoIterator<Item = DistortionStats>) -> Self {
        let mut n = 0.0;
        let mut acc = Self::default();
        for s in items {
            acc.pause_rate += s.pause_rate;
            acc.repeat_rate += s.repeat_rate;
            n += 1.0;
        }
        if n > 0.0 {
            acc.pause_rate /= n;
            acc.repeat_rate /= n;
        }
        acc
    }
}

// ---------------------------------------------------------------------------
// File format

const HEADER: &str = "# protodisent-corpus v1";
const COLUMNS: &str = "# utt_id\tspeaker_id\tcondition\tseverity\tcontent\tspeech\tsynthetic\tsource_utt_id";

#[derive(Serialize, Deserialize)]
struct CorpusMeta {
    spec: CorpusSpec,
    speaker_factors: BTreeMap<String, SpeakerFactor>,
    pathology_factors: BTreeMap<usize, PathologyFactor>,
}

pub fn meta_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".meta.json");
    path.with_file_name(name)
}

fn join(tokens: &[usize]) -> String {
    tokens.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" ")
}

pub fn write_records<W: Write>(mut w: W, utterances: &[Utterance]) -> Result<()> {
    writeln!(w, "{HEADER}")?;
    writeln!(w, "{COLUMNS}")?;
    for u in utterances {
        writeln!(
            w,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            u.utt_id,
            u.speaker_id,
            u.condition,
            u.severity,
            join(&u.content),
            join(&u.speech),
            u8::from(u.synthetic),
            u.source_utt_id.as_deref().unwrap_or("-"),
        )?;
    }
    writeln!(w, "# end {}", utterances.len())?;
    Ok(())
}

fn parse_tokens(field: &str, line: usize, what: &str) -> Result<Vec<usize>> {
    if field.is_empty() {
        return Ok(Vec::new());
    }
    field
        .split(' ')
        .map(|t| {
            t.parse().map_err(|_| Error::Parse {
                line,
                reason: format!("bad {what} token `{t}`"),
            })
        })
        .collect()
}

pub fn read_records<R: BufRead>(r: R) -> Result<Vec<Utterance>> {
    let mut utterances = Vec::new();
    let mut footer: Option<usize> = None;
    let mut saw_header = false;
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if footer.is_some() {
            if line.trim().is_empty() {
                continue;
            }
            return Err(Error::Parse {
                line: lineno,
                reason: "content after end marker".into(),
            });
        }
        if let Some(rest) = line.strip_prefix("# end ") {
            let n = rest.trim().parse().map_err(|_| Error::Parse {
                line: lineno,
                reason: "bad end marker".into(),
            })?;
            footer = Some(n);
            continue;
        }
        if line == HEADER {
            saw_header = true;
            continue;
        }
        if line.starts_with('#') {
            continue;
        }
        if !saw_header {
            return Err(Error::Parse {
                line: lineno,
                reason: "missing corpus header".into(),
            });
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 8 {
            return Err(Error::Parse {
                line: lineno,
                reason: format!("expected 8 tab-separated fields, found {}", f.len()),
            });
        }
        let condition = f[2].parse().map_err(|_| Error::Parse {
            line: lineno,
            reason: format!("bad condition `{}`", f[2]),
        })?;
        let severity = f[3].parse().map_err(|e: Error| Error::Parse {
            line: lineno,
            reason: e.to_string(),
        })?;
        let synthetic = match f[6] {
            "0" => false,
            "1" => true,
            other => {
                return Err(Error::Parse {
                    line: lineno,
                    reason: format!("bad synthetic flag `{other}`"),
                })
            }
        };
        utterances.push(Utterance {
            utt_id: f[0].to_string(),
            speaker_id: f[1].to_string(),
            condition,
            severity,
            content: parse_tokens(f[4], lineno, "content")?,
            speech: parse_tokens(f[5], lineno, "speech")?,
            synthetic,
            source_utt_id: (f[7] != "-").then(|| f[7].to_string()),
        });
    }
    match footer {
        Some(n) if n == utterances.len() => Ok(utterances),
        Some(n) => Err(Error::Parse {
            line: 0,
            reason: format!("end marker announces {n} records, found {}", utterances.len()),
        }),
        None => Err(Error::Parse {
            line: 0,
            reason: "truncated file: missing end marker".into(),
        }),
    }
}

/// Write the record file at `path` and its factor metadata beside it. Both
/// files are replaced atomically.
pub fn write_corpus(path: &Path, corpus: &Corpus) -> Result<()> {
    let mut records = Vec::new();
    write_records(&mut records, &corpus.utterances)?;
    let meta = CorpusMeta {
        spec: corpus.spec.clone(),
        speaker_factors: corpus.speaker_factors.clone(),
        pathology_factors: corpus.pathology_factors.clone(),
    };
    crate::checkpoint::write_atomic(&meta_path(path), serde_json::to_string_pretty(&meta)?.as_bytes())?;
    crate::checkpoint::write_atomic(path, &records)
}

pub fn read_corpus(path: &Path) -> Result<Corpus> {
    let utterances = read_records(BufReader::new(fs::File::open(path)?))?;
    let meta: CorpusMeta = serde_json::from_str(&fs::read_to_string(meta_path(path))?)?;
    let corpus = Corpus {
        spec: meta.spec,
        utterances,
        speaker_factors: meta.speaker_factors,
        pathology_factors: meta.pathology_factors,
    };
    corpus.validate()?;
    Ok(corpus)
}
