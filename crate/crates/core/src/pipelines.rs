//! Healthy→dysarthric augmentation and dysarthric→healthy reconstruction.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::asr::Recognizer;
use crate::backbone::{decode_registry, DecodeStrategy};
use crate::config::KeyValues;
use crate::corpus::{Corpus, Utterance};
use crate::disent::{Example, ProtoDisentModel};
use crate::error::{Error, Result};
use crate::registry::Registry;
use crate::seeds;

/// Decode batch size used by the pipelines; per-item seeds make results
/// independent of it.
const DECODE_CHUNK: usize = 64;

/// Relative weight of each candidate prototype when sampling a condition.
pub trait PrototypeSampler: Send + Sync {
    fn name(&self) -> &'static str;
    fn weight(&self, corpus: &Corpus, k: usize) -> f64;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct UniformSampler;

impl PrototypeSampler for UniformSampler {
    fn name(&self) -> &'static str {
        "uniform"
    }

    fn weight(&self, _corpus: &Corpus, _k: usize) -> f64 {
        1.0
    }
}

/// Weight proportional to severity rank (mild 1 … severe 4).
#[derive(Debug, Default, Clone, Copy)]
pub struct SeverityWeightedSampler;

impl PrototypeSampler for SeverityWeightedSampler {
    fn name(&self) -> &'static str {
        "severity_weighted"
    }

    fn weight(&self, corpus: &Corpus, k: usize) -> f64 {
        corpus.pathology(k).map(|p| p.severity.rank() as f64).unwrap_or(0.0)
    }
}

pub fn sampler_registry() -> Registry<dyn PrototypeSampler> {
    Registry::<dyn PrototypeSampler>::new("prototype sampler")
        .with("uniform", |_| Ok(Box::new(UniformSampler)))
        .with("severity_weighted", |_| Ok(Box::new(SeverityWeightedSampler)))
}

fn draw_weighted<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    weights.len() - 1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationPlan {
    /// Synthetic utterances as a fraction of the real set size.
    pub ratio: f64,
    pub sampler: String,
    pub decode: String,
    pub temperature: f64,
    pub seed: u64,
    /// Prototypes never drawn (for example a held-out speaker's own).
    pub exclude: Vec<usize>,
}

impl Default for AugmentationPlan {
    fn default() -> Self {
        Self {
            ratio: 1.0,
            sampler: "uniform".into(),
            decode: "greedy".into(),
            temperature: 1.0,
            seed: 17,
            exclude: Vec::new(),
        }
    }
}

impl AugmentationPlan {
    pub fn validate(&self) -> Result<()> {
        if !(self.ratio >= 0.0) || !self.ratio.is_finite() {
            return Err(Error::config("ratio", format!("must be non-negative, got {}", self.ratio)));
        }
        if !sampler_registry().contains(&self.sampler) {
            return Err(Error::config("sampler", format!("unknown sampler `{}`", self.sampler)));
        }
        self.strategy()?;
        Ok(())
    }

    pub fn strategy(&self) -> Result<Box<dyn DecodeStrategy>> {
        let mut kv = KeyValues::default();
        kv.set("temperature", self.temperature);
        decode_registry().create(&self.decode, &kv)
    }

    /// Candidate prototypes and their sampling weights.
    pub fn candidates(&self, corpus: &Corpus) -> Result<(Vec<usize>, Vec<f64>)> {
        let sampler = sampler_registry().create(&self.sampler, &KeyValues::default())?;
        let ks: Vec<usize> = (1..=corpus.n_prototypes()).filter(|k| !self.exclude.contains(k)).collect();
        let ws: Vec<f64> = ks.iter().map(|&k| sampler.weight(corpus, k)).collect();
        if ks.is_empty() || ws.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Precondition("no dysarthric prototype available for augmentation".into()));
        }
        Ok((ks, ws))
    }
}

/// Synthesize `source.content` under condition `k`, voiced after `prompt`
/// (normally the source's own speech).
#[derive(Debug, Clone)]
pub struct AugmentRequest<'a> {
    pub source: &'a Utterance,
    pub prompt: &'a Utterance,
    pub k: usize,
    pub utt_id: String,
}

/// Batched augmentation. Each output is decoded with a seed derived from
/// `(seed, utt_id)`.
pub fn augment_batch(
    model: &ProtoDisentModel,
    corpus: &Corpus,
    requests: &[AugmentRequest<'_>],
    strategy: &dyn DecodeStrategy,
    seed: u64,
) -> Result<Vec<Utterance>> {
    for r in requests {
        if r.k == 0 {
            return Err(Error::Precondition(
                "augmentation needs a dysarthric prototype (k >= 1); use plain synthesis for k = 0".into(),
            ));
        }
    }
    let chunks: Vec<&[AugmentRequest]> = requests.chunks(DECODE_CHUNK).collect();
    let decoded: Vec<Vec<Vec<usize>>> = chunks
        .par_iter()
        .map(|chunk| {
            let ex: Vec<Example> = chunk
                .iter()
                .map(|r| Example {
                    text: r.source.content.clone(),
                    prompt: r.prompt.speech.clone(),
                    k: r.k,
                    prompt_k: r.prompt.condition,
                    speech: Vec::new(),
                })
                .collect();
            let seeds: Vec<u64> = chunk.iter().map(|r| seeds::derive(seed, &r.utt_id)).collect();
            model.synthesize(&ex, strategy, &seeds)
        })
        .collect::<Result<_>>()?;
    requests
        .iter()
        .zip(decoded.into_iter().flatten())
        .map(|(r, speech)| {
            Ok(Utterance {
                utt_id: r.utt_id.clone(),
                speaker_id: r.prompt.speaker_id.clone(),
                content: r.source.content.clone(),
                speech,
                condition: r.k,
                severity: corpus.pathology(r.k)?.severity,
                synthetic: true,
                source_utt_id: Some(r.source.utt_id.clone()),
            })
        })
        .collect()
}

pub fn augment_healthy_to_dysarthric(
    model: &ProtoDisentModel,
    corpus: &Corpus,
    healthy_utt: &Utterance,
    k: usize,
    strategy: &dyn DecodeStrategy,
    seed: u64,
) -> Result<Utterance> {
    let req = AugmentRequest {
        source: healthy_utt,
        prompt: healthy_utt,
        k,
        utt_id: format!("{}~aug~k{k}", healthy_utt.utt_id),
    };
    Ok(augment_batch(model, corpus, &[req], strategy, seed)?.remove(0))
}

/// Source and prototype for each of `count` synthetic items. Item `i`
/// depends only on `(plan.seed, i)`, so a smaller count yields a prefix of
/// a larger one.
pub fn plan_requests<'a>(
    corpus: &Corpus,
    sources: &[&'a Utterance],
    plan: &AugmentationPlan,
    count: usize,
) -> Result<Vec<AugmentRequest<'a>>> {
    plan.validate()?;
    if count == 0 {
        return Ok(Vec::new());
    }
    if sources.is_empty() {
        return Err(Error::Precondition("augmentation needs at least one healthy source utterance".into()));
    }
    let (ks, ws) = plan.candidates(corpus)?;
    Ok((0..count)
        .map(|i| {
            let mut rng = seeds::rng_n(seeds::derive(plan.seed, "augment/item"), i as u64);
            let source = sources[rng.random_range(0..sources.len())];
            let k = ks[draw_weighted(&ws, &mut rng)];
            AugmentRequest {
                source,
                prompt: source,
                k,
                utt_id: format!("{}~aug{i}~k{k}", source.utt_id),
            }
        })
        .collect())
}

/// The synthetic utterances of [`plan_requests`].
pub fn synthesize_pool(
    model: &ProtoDisentModel,
    corpus: &Corpus,
    sources: &[&Utterance],
    plan: &AugmentationPlan,
    count: usize,
) -> Result<Vec<Utterance>> {
    let requests = plan_requests(corpus, sources, plan, count)?;
    if requests.is_empty() {
        return Ok(Vec::new());
    }
    let strategy = plan.strategy()?;
    augment_batch(model, corpus, &requests, strategy.as_ref(), plan.seed)
}

pub fn synthetic_count(real: usize, ratio: f64) -> usize {
    (ratio * real as f64).round() as usize
}

/// `real ∪ synthetic`, with `round(ratio × |real|)` synthetic utterances
/// built from the healthy utterances of `real`.
pub fn build_augmented_set(real: &Corpus, plan: &AugmentationPlan, model: &ProtoDisentModel) -> Result<Corpus> {
    plan.validate()?;
    let sources = real.healthy();
    let count = synthetic_count(real.utterances.len(), plan.ratio);
    let synthetic = synthesize_pool(model, real, &sources, plan, count)?;
    let mut utts = real.utterances.clone();
    utts.extend(synthetic);
    Ok(real.with_utterances(utts))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionResult {
    pub utt_id: String,
    pub recognized_text: Vec<usize>,
    pub reconstructed_speech: Vec<usize>,
    pub prompt_utt_id: String,
    pub used_prototype: usize,
}

/// Where the reconstruction text comes from.
#[derive(Clone, Copy)]
pub enum TextSource<'a> {
    Asr(&'a dyn Recognizer),
    /// Ground-truth content of the input utterance.
    Oracle,
}

/// Re-synthesize dysarthric utterances as healthy speech in the same voice:
/// the text is recognized (or taken from the ground truth), the input
/// utterance is the prompt, and the healthy prototype is used.
pub fn reconstruct_batch(
    model: &ProtoDisentModel,
    text: TextSource<'_>,
    utterances: &[&Utterance],
    strategy: &dyn DecodeStrategy,
    seed: u64,
) -> Result<Vec<ReconstructionResult>> {
    let texts: Vec<Vec<usize>> = match text {
        TextSource::Oracle => utterances.iter().map(|u| u.content.clone()).collect(),
        TextSource::Asr(asr) => {
            let speech: Vec<&[usize]> = utterances.iter().map(|u| u.speech.as_slice()).collect();
            asr.transcribe_batch(&speech)?
        }
    };
    for (u, t) in utterances.iter().zip(&texts) {
        if t.is_empty() {
            return Err(Error::Reconstruction {
                utt_id: u.utt_id.clone(),
                reason: "recognizer returned no tokens".into(),
            });
        }
    }
    let idx: Vec<usize> = (0..utterances.len()).collect();
    let decoded: Vec<Vec<Vec<usize>>> = idx
        .par_chunks(DECODE_CHUNK)
        .map(|chunk| {
            let ex: Vec<Example> = chunk
                .iter()
                .map(|&i| Example {
                    text: texts[i].clone(),
                    prompt: utterances[i].speech.clone(),
                    k: 0,
                    prompt_k: utterances[i].condition,
                    speech: Vec::new(),
                })
                .collect();
            let seeds: Vec<u64> = chunk
                .iter()
                .map(|&i| seeds::derive(seed, &format!("reconstruct/{}", utterances[i].utt_id)))
                .collect();
            model.synthesize(&ex, strategy, &seeds)
        })
        .collect::<Result<_>>()?;
    Ok(utterances
        .iter()
        .zip(texts)
        .zip(decoded.into_iter().flatten())
        .map(|((u, t), speech)| ReconstructionResult {
            utt_id: u.utt_id.clone(),
            recognized_text: t,
            reconstructed_speech: speech,
            prompt_utt_id: u.utt_id.clone(),
            used_prototype: 0,
        })
        .collect())
}

pub fn reconstruct(
    model: &ProtoDisentModel,
    text: TextSource<'_>,
    dys_utt: &Utterance,
    strategy: &dyn DecodeStrategy,
    seed: u64,
) -> Result<ReconstructionResult> {
    Ok(reconstruct_batch(model, text, &[dys_utt], strategy, seed)?.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::Greedy;
    use crate::corpus::{generate_corpus, CorpusSpec};
    use crate::training::{train_from_scratch, TrainConfig};

    fn setup() -> (Corpus, ProtoDisentModel) {
        let corpus = generate_corpus(&CorpusSpec {
            n_dysarthric_speakers: 2,
            n_healthy_speakers: 2,
            utterances_per_speaker: 4,
            v_text: 6,
            v_speech: 13,
            ..CorpusSpec::default()
        })
        .unwrap();
        let cfg = TrainConfig {
            d_model: 16,
            n_heads: 2,
            n_layers: 1,
            lora_rank: 4,
            lora_scale: 0.25,
            batch_size: 4,
            steps: 2,
            pretrain_steps: 2,
            pretrain_batch_size: 4,
            ..TrainConfig::default()
        };
        let (model, _, _) = train_from_scratch(&corpus, &cfg).unwrap();
        (corpus, model)
    }

    #[test]
    fn augmentation_labels_and_errors() {
        let (corpus, model) = setup();
        let src = corpus.healthy()[0];
        let out = augment_healthy_to_dysarthric(&model, &corpus, src, 2, &Greedy, 5).unwrap();
        assert!(out.synthetic);
        assert_eq!(out.condition, 2);
        assert_eq!(out.severity, corpus.pathology(2).unwrap().severity);
        assert_eq!(out.speaker_id, src.speaker_id);
        assert_eq!(out.source_utt_id.as_deref(), Some(src.utt_id.as_str()));
        assert!(matches!(
            augment_healthy_to_dysarthric(&model, &corpus, src, 0, &Greedy, 5),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn pools_nest_and_sizes_round() {
        let (corpus, model) = setup();
        let plan = |ratio| AugmentationPlan {
            ratio,
            ..AugmentationPlan::default()
        };
        let small = build_augmented_set(&corpus, &plan(0.25), &model).unwrap();
        let large = build_augmented_set(&corpus, &plan(0.5), &model).unwrap();
        let n = corpus.utterances.len();
        assert_eq!(small.utterances.len(), n + synthetic_count(n, 0.25));
        assert_eq!(large.utterances.len(), n + 8);
        assert_eq!(small.utterances[..], large.utterances[..small.utterances.len()]);
        let none = build_augmented_set(&corpus, &plan(0.0), &model).unwrap();
        assert_eq!(none.utterances, corpus.utterances);
        assert!(matches!(build_augmented_set(&corpus, &plan(-0.1), &model), Err(Error::Config { .. })));
        let bad = AugmentationPlan {
            sampler: "nope".into(),
            ..AugmentationPlan::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn exclusion_and_weighting() {
        let (corpus, _) = setup();
        let plan = AugmentationPlan {
            exclude: vec![1],
            sampler: "severity_weighted".into(),
            ..AugmentationPlan::default()
        };
        let (ks, ws) = plan.candidates(&corpus).unwrap();
        assert_eq!(ks, vec![2]);
        assert_eq!(ws, vec![corpus.pathology(2).unwrap().severity.rank() as f64]);
        let all = AugmentationPlan {
            exclude: vec![1, 2],
            ..AugmentationPlan::default()
        };
        assert!(matches!(all.candidates(&corpus), Err(Error::Precondition(_))));
    }

    #[test]
    fn reconstruction_reads_only_the_healthy_prototype() {
        let (corpus, model) = setup();
        let dys = corpus.dysarthric();
        model.audit.take();
        let out = reconstruct_batch(&model, TextSource::Oracle, &dys, &Greedy, 1).unwrap();
        let used = model.audit.take();
        assert!(!used.is_empty());
        assert!(used.iter().all(|&k| k == 0));
        for (r, u) in out.iter().zip(&dys) {
            assert_eq!(r.used_prototype, 0);
            assert_eq!(r.prompt_utt_id, u.utt_id);
            assert_eq!(r.recognized_text, u.content);
        }
    }

    struct Silent;

    impl Recognizer for Silent {
        fn transcribe_batch(&self, batch: &[&[usize]]) -> Result<Vec<Vec<usize>>> {
            Ok(vec![Vec::new(); batch.len()])
        }
    }

    #[test]
    fn empty_recognition_is_a_reconstruction_error() {
        let (corpus, model) = setup();
        let dys = corpus.dysarthric()[0];
        assert!(matches!(
            reconstruct(&model, TextSource::Asr(&Silent), dys, &Greedy, 0),
            Err(Error::Reconstruction { .. })
        ));
    }
}
