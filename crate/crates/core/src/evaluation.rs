//! Speaker similarity, the content-matched baseline, disentanglement probes
//! and the two recognizer experiments (augmentation-ratio sweep and
//! real-vs-synthetic substitution).

use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::asr::{train_asr, AsrConfig, ToyAsr};
use crate::autograd::Tape;
use crate::config::KeyValues;
use crate::corpus::{loso_split, noise_seed, Corpus, Severity, Utterance};
use crate::disent::ProtoDisentModel;
use crate::error::{Error, Result};
use crate::metrics::{cosine_similarity, error_rate, ErrorRateResult, Lexicon};
use crate::nn::Linear;
use crate::optim;
use crate::params::{Mat, ParamGroup, ParamId, ParamStore};
use crate::pipelines::{augment_batch, synthesize_pool, synthetic_count, AugmentRequest, AugmentationPlan};
use crate::seeds;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedderConfig {
    pub dim: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            epochs: 40,
            lr: 1e-2,
            batch_size: 32,
        }
    }
}

/// Speaker-identity embedder: bag of acoustic tokens (pauses excluded),
/// projected and squashed. Trained as a speaker classifier, then frozen.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpeakerEmbedder {
    store: ParamStore,
    table: ParamId,
    proj: Linear,
    head: Linear,
    pause: usize,
    v_speech: usize,
    pub speakers: Vec<String>,
}

impl SpeakerEmbedder {
    fn pooled(&self, tape: &mut Tape, batch: &[&[usize]]) -> Result<crate::autograd::Var> {
        let mut idx = Vec::new();
        let mut ranges = Vec::with_capacity(batch.len());
        for speech in batch {
            if speech.is_empty() {
                return Err(Error::Input("empty speech sequence".into()));
            }
            if let Some(&t) = speech.iter().find(|&&t| t >= self.v_speech) {
                return Err(Error::Input(format!("speech token {t} outside vocabulary {}", self.v_speech)));
            }
            let start = idx.len();
            idx.extend(speech.iter().copied().filter(|&t| t != self.pause));
            // All-pause input: fall back to pooling the pauses themselves.
            if idx.len() == start {
                idx.extend_from_slice(speech);
            }
            ranges.push(start..idx.len());
        }
        let table = tape.param(self.table);
        let e = tape.gather_rows(table, idx);
        let pooled = tape.mean_pool(e, ranges);
        let h = self.proj.forward(tape, pooled, false);
        Ok(tape.tanh(h))
    }

    pub fn embed_batch(&self, batch: &[&[usize]]) -> Result<Vec<Vec<f64>>> {
        if batch.is_empty() {
            return Ok(Vec::new());
        }
        let mut tape = Tape::inference(&self.store);
        let h = self.pooled(&mut tape, batch)?;
        Ok(tape.value(h).rows().into_iter().map(|r| r.to_vec()).collect())
    }

    pub fn embed(&self, speech: &[usize]) -> Result<Vec<f64>> {
        Ok(self.embed_batch(&[speech])?.remove(0))
    }

    pub fn checksum(&self) -> String {
        self.store.checksum()
    }
}

/// Train the embedder on the healthy utterances of `corpus` with a
/// speaker-classification objective.
pub fn train_speaker_embedder(corpus: &Corpus, config: &EmbedderConfig, seed: u64) -> Result<SpeakerEmbedder> {
    let data: Vec<&Utterance> = corpus.healthy().into_iter().filter(|u| !u.synthetic).collect();
    let mut speakers: Vec<String> = data.iter().map(|u| u.speaker_id.clone()).collect();
    speakers.sort();
    speakers.dedup();
    if speakers.len() < 2 {
        return Err(Error::Precondition("speaker embedder needs at least two healthy speakers".into()));
    }
    let v_speech = corpus.spec.v_speech;
    let mut rng = seeds::rng(seed, "embedder/init");
    let mut store = ParamStore::new();
    let g = ParamGroup::Aux;
    let table = store.normal("embedder.table", g, (v_speech, config.dim), 1.0, &mut rng)?;
    let proj = Linear::new(&mut store, "embedder.proj", g, config.dim, config.dim, true, &mut rng)?;
    let head = Linear::new(&mut store, "embedder.head", g, config.dim, speakers.len(), true, &mut rng)?;
    let mut emb = SpeakerEmbedder {
        store,
        table,
        proj,
        head,
        pause: corpus.spec.pause_token(),
        v_speech,
        speakers,
    };
    let labels: Vec<usize> = data
        .iter()
        .map(|u| emb.speakers.binary_search(&u.speaker_id).expect("speaker listed"))
        .collect();
    let mut opt = optim::create("adam", &KeyValues::default())?;
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..config.epochs {
        order.shuffle(&mut seeds::rng_n(seeds::derive(seed, "embedder/shuffle"), epoch as u64));
        for chunk in order.chunks(config.batch_size.max(1)) {
            let batch: Vec<&[usize]> = chunk.iter().map(|&i| data[i].speech.as_slice()).collect();
            let grads = {
                let mut tape = Tape::new(&emb.store);
                let h = emb.pooled(&mut tape, &batch)?;
                let logits = emb.head.forward(&mut tape, h, false);
                let targets: Vec<(usize, usize)> = chunk.iter().enumerate().map(|(r, &i)| (r, labels[i])).collect();
                let loss = tape.cross_entropy(logits, &targets);
                if !tape.scalar(loss).is_finite() {
                    return Err(Error::Numeric(format!("speaker embedder diverged in epoch {epoch}")));
                }
                tape.backward(loss)
            };
            opt.step(&mut emb.store, &grads, &|_| Some(config.lr));
        }
    }
    Ok(emb)
}

/// One method's per-speaker mean similarities. `None` marks a speaker with
/// no scored pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityRow {
    pub method: String,
    pub values: BTreeMap<String, Option<f64>>,
    /// Utterances that could not be paired.
    pub skipped: usize,
}

impl SimilarityRow {
    pub fn get(&self, speaker: &str) -> Option<f64> {
        self.values.get(speaker).copied().flatten()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityTable {
    pub speakers: Vec<String>,
    pub rows: Vec<SimilarityRow>,
}

fn per_speaker_mean(speakers: &[String], scored: &[(String, f64)]) -> BTreeMap<String, Option<f64>> {
    speakers
        .iter()
        .map(|s| {
            let v: Vec<f64> = scored.iter().filter(|(id, _)| id == s).map(|(_, x)| *x).collect();
            let mean = (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
            (s.clone(), mean)
        })
        .collect()
}

/// Mean cosine similarity between each original and its reconstruction,
/// per speaker of the original.
pub fn speaker_similarity_eval(
    method: &str,
    speakers: &[String],
    originals: &[&Utterance],
    reconstructions: &[Vec<usize>],
    embedder: &SpeakerEmbedder,
) -> Result<SimilarityRow> {
    if originals.len() != reconstructions.len() {
        return Err(Error::Input(format!(
            "pairing error: {} originals against {} reconstructions",
            originals.len(),
            reconstructions.len()
        )));
    }
    let a = embedder.embed_batch(&originals.iter().map(|u| u.speech.as_slice()).collect::<Vec<_>>())?;
    let b = embedder.embed_batch(&reconstructions.iter().map(|r| r.as_slice()).collect::<Vec<_>>())?;
    let scored = originals
        .iter()
        .zip(a.iter().zip(&b))
        .map(|(u, (x, y))| Ok((u.speaker_id.clone(), cosine_similarity(x, y)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(SimilarityRow {
        method: method.to_string(),
        values: per_speaker_mean(speakers, &scored),
        skipped: 0,
    })
}

/// Content-matched healthy reference: every dysarthric utterance of
/// `speakers` is paired with a real healthy utterance of identical content
/// from another speaker, averaged over `draws` random donors.
pub fn cmhr_baseline(
    corpus: &Corpus,
    speakers: &[String],
    embedder: &SpeakerEmbedder,
    draws: usize,
    seed: u64,
) -> Result<SimilarityRow> {
    let healthy: Vec<&Utterance> = corpus.healthy().into_iter().filter(|u| !u.synthetic).collect();
    let healthy_emb = embedder.embed_batch(&healthy.iter().map(|u| u.speech.as_slice()).collect::<Vec<_>>())?;
    let targets: Vec<&Utterance> = corpus
        .dysarthric()
        .into_iter()
        .filter(|u| !u.synthetic && speakers.contains(&u.speaker_id))
        .collect();
    let target_emb = embedder.embed_batch(&targets.iter().map(|u| u.speech.as_slice()).collect::<Vec<_>>())?;
    let mut scored = Vec::new();
    let mut skipped = 0;
    for (u, e) in targets.iter().zip(&target_emb) {
        let matches: Vec<usize> = (0..healthy.len())
            .filter(|&j| healthy[j].content == u.content && healthy[j].speaker_id != u.speaker_id)
            .collect();
        if matches.is_empty() {
            skipped += 1;
            continue;
        }
        let mut rng = seeds::rng(seed, &format!("cmhr/{}", u.utt_id));
        let mut sum = 0.0;
        for _ in 0..draws.max(1) {
            let j = *matches.choose(&mut rng).expect("non-empty");
            sum += cosine_similarity(e, &healthy_emb[j])?;
        }
        scored.push((u.speaker_id.clone(), sum / draws.max(1) as f64));
    }
    Ok(SimilarityRow {
        method: "CMHR".into(),
        values: per_speaker_mean(speakers, &scored),
        skipped,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub lr: f64,
    pub train_fraction: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            hidden: 16,
            epochs: 300,
            lr: 1e-2,
            train_fraction: 0.7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub accuracy: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub parameter_checksum: String,
}

/// Held-out accuracy of a fresh MLP classifier predicting `labels` from
/// standardized `embeddings`.
pub fn probe_disentanglement(embeddings: &[Vec<f64>], labels: &[bool], config: &ProbeConfig, seed: u64) -> Result<ProbeResult> {
    if embeddings.len() != labels.len() {
        return Err(Error::Input("one label per embedding required".into()));
    }
    if !labels.iter().any(|&l| l) || labels.iter().all(|&l| l) {
        return Err(Error::Precondition("probe needs both classes present".into()));
    }
    let d = embeddings[0].len();
    if d == 0 || embeddings.iter().any(|e| e.len() != d) {
        return Err(Error::Shape("embeddings must share a non-zero dimension".into()));
    }
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.shuffle(&mut seeds::rng(seed, "probe/split"));
    let n_train = ((labels.len() as f64) * config.train_fraction).round() as usize;
    let n_train = n_train.clamp(1, labels.len() - 1);
    let (train, test) = order.split_at(n_train);

    let mut mean = vec![0.0; d];
    let mut std = vec![0.0; d];
    for &i in train {
        for (m, x) in mean.iter_mut().zip(&embeddings[i]) {
            *m += x / n_train as f64;
        }
    }
    for &i in train {
        for ((s, x), m) in std.iter_mut().zip(&embeddings[i]).zip(&mean) {
            *s += (x - m).powi(2) / n_train as f64;
        }
    }
    let features = |rows: &[usize]| {
        Mat::from_shape_fn((rows.len(), d), |(r, c)| {
            (embeddings[rows[r]][c] - mean[c]) / (std[c].sqrt() + 1e-8)
        })
    };
    let (xtr, xte) = (features(train), features(test));

    let mut rng = seeds::rng(seed, "probe/init");
    let mut store = ParamStore::new();
    let mlp = crate::nn::Mlp::new(&mut store, "probe", ParamGroup::Aux, d, config.hidden, 2, &mut rng)?;
    let targets: Vec<(usize, usize)> = train.iter().enumerate().map(|(r, &i)| (r, labels[i] as usize)).collect();
    let mut opt = optim::create("adam", &KeyValues::default())?;
    for _ in 0..config.epochs {
        let grads = {
            let mut tape = Tape::new(&store);
            let x = tape.constant(xtr.clone());
            let logits = mlp.forward(&mut tape, x);
            let loss = tape.cross_entropy(logits, &targets);
            tape.backward(loss)
        };
        opt.step(&mut store, &grads, &|_| Some(config.lr));
    }
    let mut tape = Tape::inference(&store);
    let x = tape.constant(xte);
    let logits = mlp.forward(&mut tape, x);
    let lv = tape.value(logits);
    let correct = test
        .iter()
        .enumerate()
        .filter(|&(r, &i)| (lv[[r, 1]] > lv[[r, 0]]) == labels[i])
        .count();
    Ok(ProbeResult {
        accuracy: correct as f64 / test.len() as f64,
        n_train,
        n_test: test.len(),
        parameter_checksum: store.checksum(),
    })
}

/// Timbre × condition crossed renderings: every speaker says `per_speaker`
/// script lines both healthy and under a dysarthric condition (its own for
/// dysarthric speakers, a random one for controls). Labels are balanced
/// within every voice, so a probe can only succeed by reading articulation.
pub fn factor_crossed_set(corpus: &Corpus, per_speaker: usize, seed: u64) -> Result<Vec<Utterance>> {
    let n = corpus.n_prototypes();
    if n == 0 {
        return Err(Error::Precondition("corpus has no dysarthric prototype".into()));
    }
    let mut scripts: Vec<Vec<usize>> = Vec::new();
    for u in &corpus.utterances {
        if !u.synthetic && !scripts.contains(&u.content) {
            scripts.push(u.content.clone());
        }
    }
    if scripts.is_empty() {
        return Err(Error::Precondition("corpus has no utterances".into()));
    }
    let mut out = Vec::new();
    for (id, f) in &corpus.speaker_factors {
        let mut rng = seeds::rng(seed, &format!("probe-set/{id}"));
        let picks: Vec<&Vec<usize>> = scripts.choose_multiple(&mut rng, per_speaker.min(scripts.len())).collect();
        for (i, content) in picks.into_iter().enumerate() {
            let k = if f.condition > 0 { f.condition } else { rng.random_range(1..=n) };
            let noise = noise_seed(&corpus.spec, &format!("probe/{id}/{i}"));
            for cond in [0, k] {
                let severity = if cond == 0 { Severity::Healthy } else { corpus.pathology(cond)?.severity };
                out.push(Utterance {
                    utt_id: format!("probe/{id}/{i}/k{cond}"),
                    speaker_id: id.clone(),
                    content: content.clone(),
                    speech: corpus.render_with(content, id, cond, noise)?,
                    condition: cond,
                    severity,
                    synthetic: false,
                    source_utt_id: None,
                });
            }
        }
    }
    Ok(out)
}

/// Probe the model's speaker embeddings `s` for healthy/dysarthric
/// articulation on a factor-crossed set.
pub fn probe_model(model: &ProtoDisentModel, probe_set: &[Utterance], config: &ProbeConfig, seed: u64) -> Result<ProbeResult> {
    let prompts: Vec<&[usize]> = probe_set.iter().map(|u| u.speech.as_slice()).collect();
    let s = model.encode_speakers(&prompts)?;
    let emb: Vec<Vec<f64>> = s.rows().into_iter().map(|r| r.to_vec()).collect();
    let labels: Vec<bool> = probe_set.iter().map(|u| u.condition > 0).collect();
    probe_disentanglement(&emb, &labels, config, seed)
}

/// Pooled word- and phone-level error of a recognizer on `test`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub wer: f64,
    pub per: f64,
}

pub fn score_recognizer(asr: &ToyAsr, test: &[&Utterance]) -> Result<Scores> {
    let lex = Lexicon::new(asr.v_text);
    let hyps = asr.transcribe_batch(&test.iter().map(|u| u.speech.as_slice()).collect::<Vec<_>>())?;
    let mut w: Vec<ErrorRateResult> = Vec::with_capacity(test.len());
    let mut p: Vec<ErrorRateResult> = Vec::with_capacity(test.len());
    for (u, h) in test.iter().zip(&hyps) {
        w.push(error_rate(&u.content, h)?);
        p.push(error_rate(&lex.expand(&u.content), &lex.expand(h))?);
    }
    Ok(Scores {
        wer: ErrorRateResult::pooled(&w)?,
        per: ErrorRateResult::pooled(&p)?,
    })
}

/// Train `repeats` recognizers with seeds derived from `seed` and average
/// their scores.
fn train_and_score(train: &[Utterance], test: &[&Utterance], spec: (usize, usize), asr: &AsrConfig, seed: u64, repeats: usize) -> Result<Scores> {
    let mut sum = Scores { wer: 0.0, per: 0.0 };
    for r in 0..repeats.max(1) {
        let (model, _) = train_asr(train, spec.0, spec.1, asr, seeds::derive_n(seed, r as u64))?;
        let s = score_recognizer(&model, test)?;
        sum.wer += s.wer;
        sum.per += s.per;
    }
    let n = repeats.max(1) as f64;
    Ok(Scores {
        wer: sum.wer / n,
        per: sum.per / n,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub ratios: Vec<f64>,
    /// Held-out test speakers; empty means every severe speaker.
    pub speakers: Vec<String>,
    pub asr: AsrConfig,
    /// Recognizers trained per cell (scores are averaged).
    pub asr_repeats: usize,
    pub sampler: String,
    pub decode: String,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            ratios: vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0],
            speakers: Vec::new(),
            asr: AsrConfig::default(),
            asr_repeats: 3,
            sampler: "uniform".into(),
            decode: "greedy".into(),
            temperature: 1.0,
            seed: 17,
        }
    }
}

fn severe_speakers(corpus: &Corpus) -> Vec<String> {
    let mut ids: Vec<(usize, String)> = corpus
        .speaker_factors
        .values()
        .filter(|f| f.severity == Severity::Severe)
        .map(|f| (f.condition, f.speaker_id.clone()))
        .collect();
    ids.sort();
    ids.into_iter().map(|(_, s)| s).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub ratio: f64,
    pub speaker: String,
    pub wer: f64,
    pub per: f64,
    pub n_real: usize,
    pub n_synthetic: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub ratios: Vec<f64>,
    pub speakers: Vec<String>,
    /// Ratio-major: `cells[r * speakers.len() + s]`.
    pub cells: Vec<SweepCell>,
}

impl SweepResult {
    pub fn cell(&self, ratio_index: usize, speaker: &str) -> Option<&SweepCell> {
        let s = self.speakers.iter().position(|x| x == speaker)?;
        self.cells.get(ratio_index * self.speakers.len() + s)
    }

    /// Speaker-averaged WER for every ratio.
    pub fn mean_wer(&self) -> Vec<f64> {
        self.cells
            .chunks(self.speakers.len().max(1))
            .map(|row| row.iter().map(|c| c.wer).sum::<f64>() / row.len() as f64)
            .collect()
    }
}

/// Augmentation-ratio sweep under leave-one-speaker-out: for every held-out
/// speaker and ratio, the recognizer is trained on the remaining real data
/// plus `round(ratio × |real|)` synthetic dysarthric utterances and scored on
/// the held-out speaker. Synthetic pools nest across ratios, the held-out
/// speaker's own prototype is never used, and each speaker's recognizers
/// share one initialization seed across ratios.
pub fn run_sweep(corpus: &Corpus, model: &ProtoDisentModel, config: &SweepConfig) -> Result<SweepResult> {
    for &r in &config.ratios {
        if !(r >= 0.0) || !r.is_finite() {
            return Err(Error::config("ratios", format!("ratio {r} must be non-negative")));
        }
    }
    let speakers = if config.speakers.is_empty() {
        severe_speakers(corpus)
    } else {
        config.speakers.clone()
    };
    if speakers.is_empty() {
        return Err(Error::Precondition("sweep has no held-out speaker".into()));
    }
    let max_ratio = config.ratios.iter().copied().fold(0.0, f64::max);
    let vocab = (corpus.spec.v_text, corpus.spec.v_speech);
    let cell_err = |ratio: f64, speaker: &str| {
        let cell = format!("ratio {ratio}, speaker {speaker}");
        move |e: Error| Error::Cell {
            cell,
            source: Box::new(e),
        }
    };

    // One nested pool per held-out speaker, sized for the largest ratio.
    let prepared: Vec<(Corpus, Corpus, Vec<Utterance>)> = speakers
        .par_iter()
        .map(|h| {
            let (train, test) = loso_split(corpus, h).map_err(cell_err(max_ratio, h))?;
            let plan = AugmentationPlan {
                ratio: max_ratio,
                sampler: config.sampler.clone(),
                decode: config.decode.clone(),
                temperature: config.temperature,
                seed: seeds::derive(config.seed, &format!("sweep/pool/{h}")),
                exclude: vec![corpus.speaker(h).map_err(cell_err(max_ratio, h))?.condition],
            };
            let count = synthetic_count(train.utterances.len(), max_ratio);
            let pool = synthesize_pool(model, corpus, &train.healthy(), &plan, count).map_err(cell_err(max_ratio, h))?;
            Ok((train, test, pool))
        })
        .collect::<Result<_>>()?;

    let jobs: Vec<(usize, usize)> = (0..config.ratios.len())
        .flat_map(|r| (0..speakers.len()).map(move |s| (r, s)))
        .collect();
    let cells = jobs
        .par_iter()
        .map(|&(r, s)| {
            let ratio = config.ratios[r];
            let h = &speakers[s];
            let (train, test, pool) = &prepared[s];
            let n_syn = synthetic_count(train.utterances.len(), ratio);
            let mut data = train.utterances.clone();
            data.extend_from_slice(&pool[..n_syn]);
            let test: Vec<&Utterance> = test.utterances.iter().collect();
            let seed = seeds::derive(config.seed, &format!("sweep/asr/{h}"));
            let scores = train_and_score(&data, &test, vocab, &config.asr, seed, config.asr_repeats).map_err(cell_err(ratio, h))?;
            Ok(SweepCell {
                ratio,
                speaker: h.clone(),
                wer: scores.wer,
                per: scores.per,
                n_real: train.utterances.len(),
                n_synthetic: n_syn,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepResult {
        ratios: config.ratios.clone(),
        speakers,
        cells,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TrainingData {
    /// Healthy speech only.
    NoAdapt,
    /// Healthy plus real dysarthric speech.
    Real,
    /// Healthy plus synthetic counterparts of the real dysarthric speech.
    Synthetic,
}

impl TrainingData {
    pub const ALL: [TrainingData; 3] = [TrainingData::NoAdapt, TrainingData::Real, TrainingData::Synthetic];

    pub fn as_str(self) -> &'static str {
        match self {
            TrainingData::NoAdapt => "no-adapt",
            TrainingData::Real => "real",
            TrainingData::Synthetic => "synthetic",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubstitutionConfig {
    /// Held-out test speakers; empty means every dysarthric speaker.
    pub speakers: Vec<String>,
    pub asr: AsrConfig,
    pub asr_repeats: usize,
    pub decode: String,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for SubstitutionConfig {
    fn default() -> Self {
        Self {
            speakers: Vec::new(),
            asr: AsrConfig::default(),
            asr_repeats: 3,
            decode: "sampled".into(),
            temperature: 1.0,
            seed: 17,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubstitutionCell {
    pub data: TrainingData,
    pub speaker: String,
    pub wer: f64,
    pub per: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubstitutionResult {
    pub speakers: Vec<String>,
    pub cells: Vec<SubstitutionCell>,
}

impl SubstitutionResult {
    pub fn mean(&self, data: TrainingData) -> Scores {
        let c: Vec<&SubstitutionCell> = self.cells.iter().filter(|c| c.data == data).collect();
        let n = c.len().max(1) as f64;
        Scores {
            wer: c.iter().map(|c| c.wer).sum::<f64>() / n,
            per: c.iter().map(|c| c.per).sum::<f64>() / n,
        }
    }
}

/// Synthetic stand-ins for real dysarthric utterances: same text, the
/// patient's own prototype, prompted by another utterance of the same
/// patient.
pub fn synthetic_counterparts(
    model: &ProtoDisentModel,
    corpus: &Corpus,
    real: &[&Utterance],
    strategy: &dyn crate::backbone::DecodeStrategy,
    seed: u64,
) -> Result<Vec<Utterance>> {
    let mut requests = Vec::with_capacity(real.len());
    for (i, u) in real.iter().enumerate() {
        let own: Vec<&&Utterance> = real.iter().filter(|v| v.speaker_id == u.speaker_id).collect();
        let pos = own.iter().position(|v| v.utt_id == u.utt_id).expect("present");
        let prompt = own[(pos + 1) % own.len()];
        requests.push(AugmentRequest {
            source: u,
            prompt,
            k: u.condition,
            utt_id: format!("{}~syn{i}~k{}", u.utt_id, u.condition),
        });
    }
    augment_batch(model, corpus, &requests, strategy, seed)
}

/// Real-versus-synthetic substitution under leave-one-speaker-out.
pub fn run_substitution_experiment(corpus: &Corpus, model: &ProtoDisentModel, config: &SubstitutionConfig) -> Result<SubstitutionResult> {
    let speakers = if config.speakers.is_empty() {
        let mut ids: Vec<(usize, String)> = corpus
            .speaker_factors
            .values()
            .filter(|f| f.condition > 0)
            .map(|f| (f.condition, f.speaker_id.clone()))
            .collect();
        ids.sort();
        ids.into_iter().map(|(_, s)| s).collect()
    } else {
        config.speakers.clone()
    };
    let plan = AugmentationPlan {
        decode: config.decode.clone(),
        temperature: config.temperature,
        ..AugmentationPlan::default()
    };
    let strategy = plan.strategy()?;
    let vocab = (corpus.spec.v_text, corpus.spec.v_speech);
    let per_speaker = speakers
        .par_iter()
        .map(|h| {
            let wrap = |e: Error| Error::Cell {
                cell: format!("speaker {h}"),
                source: Box::new(e),
            };
            let (train, test) = loso_split(corpus, h).map_err(wrap)?;
            let healthy: Vec<Utterance> = train.healthy().into_iter().cloned().collect();
            let real_dys: Vec<&Utterance> = train.dysarthric();
            let syn = synthetic_counterparts(
                model,
                corpus,
                &real_dys,
                strategy.as_ref(),
                seeds::derive(config.seed, &format!("substitution/syn/{h}")),
            )
            .map_err(wrap)?;
            let test: Vec<&Utterance> = test.utterances.iter().collect();
            let seed = seeds::derive(config.seed, &format!("substitution/asr/{h}"));
            TrainingData::ALL
                .iter()
                .map(|&data| {
                    let mut set = healthy.clone();
                    match data {
                        TrainingData::NoAdapt => {}
                        TrainingData::Real => set.extend(real_dys.iter().map(|u| (*u).clone())),
                        TrainingData::Synthetic => set.extend(syn.iter().cloned()),
                    }
                    let s = train_and_score(&set, &test, vocab, &config.asr, seed, config.asr_repeats).map_err(wrap)?;
                    Ok(SubstitutionCell {
                        data,
                        speaker: h.clone(),
                        wer: s.wer,
                        per: s.per,
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SubstitutionResult {
        speakers,
        cells: per_speaker.into_iter().flatten().collect(),
    })
}

fn get_list<T: std::str::FromStr>(kv: &KeyValues, key: &str) -> Result<Option<Vec<T>>>
where
    T::Err: std::fmt::Display,
{
    let Some(raw) = kv.get_str(key) else {
        return Ok(None);
    };
    raw.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<T>().map_err(|e| Error::config(key, format!("cannot parse `{s}`: {e}"))))
        .collect::<Result<Vec<T>>>()
        .map(Some)
}

impl SweepConfig {
    pub const KEYS: &'static [&'static str] = &["ratios", "speakers", "asr_repeats", "sampler", "decode", "temperature", "seed"];

    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let d = Self::default();
        let c = Self {
            ratios: get_list(kv, "ratios")?.unwrap_or(d.ratios),
            speakers: get_list(kv, "speakers")?.unwrap_or(d.speakers),
            asr: AsrConfig::from_kv(kv)?,
            asr_repeats: kv.get_or("asr_repeats", d.asr_repeats)?,
            sampler: kv.get_or("sampler", d.sampler)?,
            decode: kv.get_or("decode", d.decode)?,
            temperature: kv.get_or("temperature", d.temperature)?,
            seed: kv.get_or("seed", d.seed)?,
        };
        if c.ratios.is_empty() {
            return Err(Error::config("ratios", "at least one ratio required"));
        }
        AugmentationPlan {
            ratio: 0.0,
            sampler: c.sampler.clone(),
            decode: c.decode.clone(),
            temperature: c.temperature,
            ..AugmentationPlan::default()
        }
        .validate()?;
        Ok(c)
    }
}

impl SubstitutionConfig {
    pub const KEYS: &'static [&'static str] = &["speakers", "asr_repeats", "decode", "temperature", "seed"];

    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let d = Self::default();
        Ok(Self {
            speakers: get_list(kv, "speakers")?.unwrap_or(d.speakers),
            asr: AsrConfig::from_kv(kv)?,
            asr_repeats: kv.get_or("asr_repeats", d.asr_repeats)?,
            decode: kv.get_or("decode", d.decode)?,
            temperature: kv.get_or("temperature", d.temperature)?,
            seed: kv.get_or("seed", d.seed)?,
        })
    }
}

/// Settings of the similarity and probe evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Dysarthric speakers scored; empty means the five most severe.
    pub speakers: Vec<String>,
    pub embedder: EmbedderConfig,
    pub probe: ProbeConfig,
    pub cmhr_draws: usize,
    pub probe_per_speaker: usize,
    pub decode: String,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            speakers: Vec::new(),
            embedder: EmbedderConfig::default(),
            probe: ProbeConfig::default(),
            cmhr_draws: 3,
            probe_per_speaker: 24,
            decode: "greedy".into(),
            seed: 17,
        }
    }
}

impl EvalConfig {
    pub const KEYS: &'static [&'static str] = &[
        "speakers",
        "embedder_dim",
        "embedder_epochs",
        "embedder_lr",
        "probe_hidden",
        "probe_epochs",
        "probe_lr",
        "cmhr_draws",
        "probe_per_speaker",
        "decode",
        "seed",
    ];

    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let d = Self::default();
        Ok(Self {
            speakers: get_list(kv, "speakers")?.unwrap_or(d.speakers),
            embedder: EmbedderConfig {
                dim: kv.get_or("embedder_dim", d.embedder.dim)?,
                epochs: kv.get_or("embedder_epochs", d.embedder.epochs)?,
                lr: kv.get_or("embedder_lr", d.embedder.lr)?,
                ..d.embedder
            },
            probe: ProbeConfig {
                hidden: kv.get_or("probe_hidden", d.probe.hidden)?,
                epochs: kv.get_or("probe_epochs", d.probe.epochs)?,
                lr: kv.get_or("probe_lr", d.probe.lr)?,
                ..d.probe
            },
            cmhr_draws: kv.get_or("cmhr_draws", d.cmhr_draws)?,
            probe_per_speaker: kv.get_or("probe_per_speaker", d.probe_per_speaker)?,
            decode: kv.get_or("decode", d.decode)?,
            seed: kv.get_or("seed", d.seed)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub similarity: SimilarityTable,
    /// `(method, probe result)` for every evaluated model.
    pub probes: Vec<(String, ProbeResult)>,
}

/// Speaker similarity of oracle-text reconstructions for each named model,
/// the content-matched baseline, and an articulation probe on each model's
/// speaker embeddings.
pub fn evaluate_models(corpus: &Corpus, models: &[(&str, &ProtoDisentModel)], config: &EvalConfig) -> Result<EvalReport> {
    let speakers = if config.speakers.is_empty() {
        let mut ids: Vec<(usize, String)> = corpus
            .speaker_factors
            .values()
            .filter(|f| f.condition > 0)
            .map(|f| (f.condition, f.speaker_id.clone()))
            .collect();
        ids.sort();
        ids.into_iter().take(5).map(|(_, s)| s).collect()
    } else {
        config.speakers.clone()
    };
    let embedder = train_speaker_embedder(corpus, &config.embedder, seeds::derive(config.seed, "eval/embedder"))?;
    let mut rows = vec![cmhr_baseline(corpus, &speakers, &embedder, config.cmhr_draws, seeds::derive(config.seed, "eval/cmhr"))?];
    let originals: Vec<&Utterance> = corpus
        .dysarthric()
        .into_iter()
        .filter(|u| !u.synthetic && speakers.contains(&u.speaker_id))
        .collect();
    let plan = AugmentationPlan {
        decode: config.decode.clone(),
        ..AugmentationPlan::default()
    };
    let strategy = plan.strategy()?;
    let probe_set = factor_crossed_set(corpus, config.probe_per_speaker, seeds::derive(config.seed, "eval/probe-set"))?;
    let mut probes = Vec::new();
    for (name, model) in models {
        let rec = crate::pipelines::reconstruct_batch(
            model,
            crate::pipelines::TextSource::Oracle,
            &originals,
            strategy.as_ref(),
            seeds::derive(config.seed, "eval/reconstruct"),
        )?;
        let speech: Vec<Vec<usize>> = rec.into_iter().map(|r| r.reconstructed_speech).collect();
        rows.push(speaker_similarity_eval(name, &speakers, &originals, &speech, &embedder)?);
        probes.push((
            name.to_string(),
            probe_model(model, &probe_set, &config.probe, seeds::derive(config.seed, "eval/probe"))?,
        ));
    }
    Ok(EvalReport {
        similarity: SimilarityTable { speakers, rows },
        probes,
    })
}
