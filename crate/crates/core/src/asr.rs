//! Toy speech recognizer: a windowed frame classifier trained with CTC.
//!
//! Each acoustic token is embedded together with its left and right
//! neighbours, passed through a small MLP, and emits two output frames over
//! the text vocabulary plus a blank. Two frames per token leave room for the
//! blank CTC needs between identical adjacent labels.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autograd::{SeqLayout, Tape, Var};
use crate::config::KeyValues;
use crate::corpus::Utterance;
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::optim;
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::seeds;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AsrConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for AsrConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            epochs: 12,
            lr: 3e-3,
            batch_size: 16,
        }
    }
}

impl AsrConfig {
    pub const KEYS: &'static [&'static str] = &["asr_hidden", "asr_epochs", "asr_lr", "asr_batch_size"];

    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let d = Self::default();
        let c = Self {
            hidden: kv.get_or("asr_hidden", d.hidden)?,
            epochs: kv.get_or("asr_epochs", d.epochs)?,
            lr: kv.get_or("asr_lr", d.lr)?,
            batch_size: kv.get_or("asr_batch_size", d.batch_size)?,
        };
        if c.hidden == 0 || c.batch_size == 0 {
            return Err(Error::config("asr_hidden", "sizes must be positive"));
        }
        if !(c.lr > 0.0) {
            return Err(Error::config("asr_lr", "must be positive"));
        }
        Ok(c)
    }
}

/// Anything that maps acoustic token sequences to text tokens.
pub trait Recognizer: Send + Sync {
    fn transcribe_batch(&self, batch: &[&[usize]]) -> Result<Vec<Vec<usize>>>;
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ToyAsr {
    pub config: AsrConfig,
    pub v_text: usize,
    pub v_speech: usize,
    store: ParamStore,
    /// Left, centre and right token tables, `(v_speech + 1) × hidden`; the
    /// extra row pads sequence edges.
    window: [ParamId; 3],
    window_bias: ParamId,
    mid: Linear,
    heads: [Linear; 2],
}

impl ToyAsr {
    pub fn new(v_text: usize, v_speech: usize, config: AsrConfig, seed: u64) -> Result<Self> {
        let mut rng = seeds::rng(seed, "asr/init");
        let mut store = ParamStore::new();
        let g = ParamGroup::Aux;
        let h = config.hidden;
        let std = 1.0 / (3.0f64).sqrt();
        let window = [
            store.normal("asr.window.left", g, (v_speech + 1, h), std, &mut rng)?,
            store.normal("asr.window.centre", g, (v_speech + 1, h), std, &mut rng)?,
            store.normal("asr.window.right", g, (v_speech + 1, h), std, &mut rng)?,
        ];
        let window_bias = store.zeros("asr.window.bias", g, (1, h))?;
        let mid = Linear::new(&mut store, "asr.mid", g, h, h, true, &mut rng)?;
        let heads = [
            Linear::new(&mut store, "asr.head.a", g, h, v_text + 1, true, &mut rng)?,
            Linear::new(&mut store, "asr.head.b", g, h, v_text + 1, true, &mut rng)?,
        ];
        Ok(Self {
            config,
            v_text,
            v_speech,
            store,
            window,
            window_bias,
            mid,
            heads,
        })
    }

    pub fn blank(&self) -> usize {
        self.v_text
    }

    /// Frame logits for a batch; returns the logits and the per-utterance
    /// frame layout.
    fn forward(&self, tape: &mut Tape, batch: &[&[usize]]) -> Result<(Var, SeqLayout)> {
        let pad = self.v_speech;
        let mut idx = [Vec::new(), Vec::new(), Vec::new()];
        let mut lengths = Vec::with_capacity(batch.len());
        for speech in batch {
            if speech.is_empty() {
                return Err(Error::Input("empty speech sequence".into()));
            }
            if let Some(&t) = speech.iter().find(|&&t| t >= self.v_speech) {
                return Err(Error::Input(format!("speech token {t} outside vocabulary {}", self.v_speech)));
            }
            let n = speech.len();
            for t in 0..n {
                idx[0].push(if t == 0 { pad } else { speech[t - 1] });
                idx[1].push(speech[t]);
                idx[2].push(if t + 1 == n { pad } else { speech[t + 1] });
            }
            lengths.push(n);
        }
        let total: usize = lengths.iter().sum();
        let [l, c, r] = idx;
        let tl = tape.param(self.window[0]);
        let tc = tape.param(self.window[1]);
        let tr = tape.param(self.window[2]);
        let a = tape.gather_rows(tl, l);
        let b = tape.gather_rows(tc, c);
        let cc = tape.gather_rows(tr, r);
        let h = tape.add(a, b);
        let h = tape.add(h, cc);
        let wb = tape.param(self.window_bias);
        let h = tape.add_row(h, wb);
        let h = tape.tanh(h);
        let h = self.mid.forward(tape, h, false);
        let h = tape.tanh(h);
        let oa = self.heads[0].forward(tape, h, false);
        let ob = self.heads[1].forward(tape, h, false);
        let both = tape.concat_rows(&[oa, ob]);
        let order: Vec<usize> = (0..total).flat_map(|t| [t, total + t]).collect();
        let logits = tape.gather_rows(both, order);
        Ok((logits, SeqLayout::from_lengths(lengths.iter().map(|n| 2 * n))))
    }

    /// Greedy CTC decoding: per-frame argmax, merge repeats, drop blanks.
    pub fn transcribe_batch(&self, batch: &[&[usize]]) -> Result<Vec<Vec<usize>>> {
        if batch.is_empty() {
            return Ok(Vec::new());
        }
        let mut tape = Tape::inference(&self.store);
        let (logits, layout) = self.forward(&mut tape, batch)?;
        let lv = tape.value(logits);
        let blank = self.blank();
        Ok(layout
            .blocks
            .iter()
            .map(|block| {
                let mut out = Vec::new();
                let mut prev = blank;
                for r in block.clone() {
                    let row = lv.row(r);
                    let mut best = 0;
                    for (i, &v) in row.iter().enumerate() {
                        if v > row[best] {
                            best = i;
                        }
                    }
                    if best != blank && best != prev {
                        out.push(best);
                    }
                    prev = best;
                }
                out
            })
            .collect())
    }

    pub fn transcribe(&self, speech: &[usize]) -> Result<Vec<usize>> {
        Ok(self.transcribe_batch(&[speech])?.remove(0))
    }

    pub fn checksum(&self) -> String {
        self.store.checksum()
    }

    pub(crate) fn reindex(&mut self) -> Result<()> {
        self.store.reindex()
    }

    /// Mean CTC loss over `utterances` (sequences that cannot be aligned are
    /// excluded from the mean).
    pub fn loss(&self, utterances: &[&Utterance]) -> Result<f64> {
        let mut tape = Tape::inference(&self.store);
        let speech: Vec<&[usize]> = utterances.iter().map(|u| u.speech.as_slice()).collect();
        let labels: Vec<Vec<usize>> = utterances.iter().map(|u| u.content.clone()).collect();
        let (logits, layout) = self.forward(&mut tape, &speech)?;
        let (l, _) = tape.ctc_loss(logits, &layout, &labels, self.blank());
        Ok(tape.scalar(l))
    }
}

impl Recognizer for ToyAsr {
    fn transcribe_batch(&self, batch: &[&[usize]]) -> Result<Vec<Vec<usize>>> {
        ToyAsr::transcribe_batch(self, batch)
    }
}

/// Train a recognizer from scratch for a fixed number of epochs. Returns the
/// model and the mean loss of the final epoch.
pub fn train_asr(train_set: &[Utterance], v_text: usize, v_speech: usize, config: &AsrConfig, seed: u64) -> Result<(ToyAsr, f64)> {
    if train_set.is_empty() {
        return Err(Error::Precondition("cannot train a recognizer on an empty set".into()));
    }
    let mut asr = ToyAsr::new(v_text, v_speech, config.clone(), seed)?;
    let mut optimizer = optim::create("adam", &KeyValues::default())?;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut last_epoch = 0.0;
    for epoch in 0..config.epochs {
        let mut rng = seeds::rng_n(seeds::derive(seed, "asr/shuffle"), epoch as u64);
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let speech: Vec<&[usize]> = chunk.iter().map(|&i| train_set[i].speech.as_slice()).collect();
            let labels: Vec<Vec<usize>> = chunk.iter().map(|&i| train_set[i].content.clone()).collect();
            let grads = {
                let mut tape = Tape::new(&asr.store);
                let (logits, layout) = asr.forward(&mut tape, &speech)?;
                let (loss, skipped) = tape.ctc_loss(logits, &layout, &labels, asr.blank());
                if skipped == chunk.len() {
                    continue;
                }
                let v = tape.scalar(loss);
                if !v.is_finite() {
                    return Err(Error::Numeric(format!("recognizer loss diverged in epoch {epoch}")));
                }
                sum += v;
                batches += 1;
                tape.backward(loss)
            };
            optimizer.step(&mut asr.store, &grads, &|_| Some(config.lr));
        }
        last_epoch = if batches > 0 { sum / batches as f64 } else { 0.0 };
    }
    Ok((asr, last_epoch))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, CorpusSpec};
    use crate::metrics::error_rate;
    use crate::params::Mat;

    fn frame_logits(asr: &ToyAsr, speech: &[usize]) -> Mat {
        let mut tape = Tape::inference(&asr.store);
        let (l, _) = asr.forward(&mut tape, &[speech]).unwrap();
        tape.value(l).clone()
    }

    #[test]
    fn two_frames_per_token() {
        let asr = ToyAsr::new(4, 9, AsrConfig::default(), 1).unwrap();
        assert_eq!(frame_logits(&asr, &[1, 2, 3]).dim(), (6, 5));
        assert!(matches!(asr.transcribe(&[]), Err(Error::Input(_))));
    }

    #[test]
    fn empty_training_set_is_rejected() {
        assert!(matches!(
            train_asr(&[], 4, 9, &AsrConfig::default(), 0),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn learns_healthy_speech_deterministically() {
        let spec = CorpusSpec {
            n_dysarthric_speakers: 1,
            n_healthy_speakers: 4,
            utterances_per_speaker: 24,
            ..CorpusSpec::default()
        };
        let corpus = generate_corpus(&spec).unwrap();
        let (train, test): (Vec<Utterance>, Vec<Utterance>) =
            corpus.healthy().into_iter().cloned().partition(|u| !u.utt_id.ends_with('3'));
        let cfg = AsrConfig {
            epochs: 20,
            ..AsrConfig::default()
        };
        let (a, _) = train_asr(&train, spec.v_text, spec.v_speech, &cfg, 3).unwrap();
        let (b, _) = train_asr(&train, spec.v_text, spec.v_speech, &cfg, 3).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        let mut errors = 0;
        let mut total = 0;
        for u in &test {
            let r = error_rate(&u.content, &a.transcribe(&u.speech).unwrap()).unwrap();
            errors += r.errors();
            total += r.reference_length;
        }
        assert!((errors as f64 / total as f64) < 0.1, "{errors}/{total}");
    }
}
