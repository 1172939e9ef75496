//! Autoregressive discrete-token synthesis backbone.
//!
//! A small pre-LN transformer decoder reads one sequence per example:
//!
//! ```text
//! [z] [text_0 .. text_{L-1}] [SOS] [speech_0 .. speech_{M-1}]
//! ```
//!
//! The conditioning vector `z` occupies the first position. Text positions
//! are trained as a language model over the text vocabulary; speech
//! positions predict the next acoustic token (or end-of-speech). Each speech
//! position also receives an alignment feature computed causally from the
//! speech prefix: the index of the next content position to be voiced and
//! whether the previous token opened a position, repeated it, or was a
//! pause. The attention and MLP projections carry low-rank adapters.

use std::ops::Range;

use ndarray::ArrayView1;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{SeqLayout, Tape, Var};
use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear};
use crate::params::{Mat, ParamGroup, ParamId, ParamStore};
use crate::registry::Registry;
use crate::seeds;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub v_text: usize,
    /// Acoustic vocabulary of the corpus (pause included, EOS excluded).
    pub v_speech: usize,
    pub max_seq_len: usize,
    pub lora_rank: usize,
    pub lora_scale: f64,
    pub mlp_ratio: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            v_text: 16,
            v_speech: 65,
            max_seq_len: 64,
            lora_rank: 16,
            lora_scale: 1.0 / 16.0,
            mlp_ratio: 4,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::config("d_model", "must be divisible by n_heads"));
        }
        if self.lora_rank == 0 {
            return Err(Error::config("lora_rank", "must be at least 1"));
        }
        if self.n_layers == 0 {
            return Err(Error::config("n_layers", "must be at least 1"));
        }
        if self.v_speech < 2 || self.v_text < 1 {
            return Err(Error::config("v_speech", "vocabularies too small"));
        }
        if self.max_seq_len < 4 {
            return Err(Error::config("max_seq_len", "must be at least 4"));
        }
        Ok(())
    }

    pub fn pause_token(&self) -> usize {
        self.v_speech - 1
    }

    /// End-of-speech id in the output vocabulary.
    pub fn eos(&self) -> usize {
        self.v_speech
    }

    /// Start-of-speech id in the input vocabulary.
    pub fn sos(&self) -> usize {
        self.v_speech
    }

    pub fn speech_out_vocab(&self) -> usize {
        self.v_speech + 1
    }

    /// Rows one example occupies.
    pub fn rows_for(&self, text_len: usize, prefix_len: usize) -> usize {
        1 + text_len + 1 + prefix_len
    }
}

/// Low-rank adapter factors in the conventional orientation:
/// `A: r × d_in`, `B: d_out × r`.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankAdapter {
    pub a: Mat,
    pub b: Mat,
    pub scale: f64,
}

impl LowRankAdapter {
    pub fn zero_b(a: Mat, d_out: usize, scale: f64) -> Self {
        let r = a.nrows();
        Self {
            a,
            b: Mat::zeros((d_out, r)),
            scale,
        }
    }
}

/// `W·x + scale·B·(A·x)` for a base weight `W: d_out × d_in`.
pub fn lora_apply(base_weight: &Mat, adapter: &LowRankAdapter, x: &[f64]) -> Result<Vec<f64>> {
    let (d_out, d_in) = base_weight.dim();
    if x.len() != d_in {
        return Err(Error::Shape(format!("input has {} entries, weight expects {d_in}", x.len())));
    }
    if adapter.a.ncols() != d_in || adapter.b.nrows() != d_out || adapter.a.nrows() != adapter.b.ncols() {
        return Err(Error::Shape(format!(
            "adapter A {:?} / B {:?} incompatible with weight {:?}",
            adapter.a.dim(),
            adapter.b.dim(),
            base_weight.dim()
        )));
    }
    let xv = ArrayView1::from(x);
    let base = base_weight.dot(&xv);
    let low = adapter.a.dot(&xv);
    let delta = adapter.b.dot(&low);
    Ok((base + delta * adapter.scale).to_vec())
}

/// Parse state of a speech prefix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Start = 0,
    Opened = 1,
    Repeated = 2,
    Paused = 3,
}

/// Alignment feature before each prediction: for a prefix of length `M`,
/// returns `M + 1` pairs `(next content index, phase)`. A token opens a new
/// content position unless it is a pause or an immediate repeat of the token
/// that opened the current position.
pub fn alignment_track(prefix: &[usize], pause: usize) -> Vec<(usize, Phase)> {
    let mut out = Vec::with_capacity(prefix.len() + 1);
    let mut opened = 0usize;
    let mut phase = Phase::Start;
    let mut last: Option<usize> = None;
    out.push((opened, phase));
    for &t in prefix {
        if t == pause {
            phase = Phase::Paused;
        } else if phase == Phase::Opened && last == Some(t) {
            phase = Phase::Repeated;
        } else {
            opened += 1;
            phase = Phase::Opened;
            last = Some(t);
        }
        out.push((opened, phase));
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Block {
    ln1: LayerNorm,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

/// Which output rows to compute.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Heads {
    /// Text logits for every text prediction and speech logits for every
    /// speech prediction (training).
    All,
    /// Only the speech logits of the final position of each example (decoding).
    LastSpeech,
}

pub struct ForwardOut {
    /// Speech logits; rows of example `i` are `speech_rows[i]`.
    pub speech_logits: Var,
    pub speech_rows: Vec<Range<usize>>,
    pub text_logits: Option<Var>,
    pub text_rows: Vec<Range<usize>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Backbone {
    pub config: BackboneConfig,
    text_emb: ParamId,
    speech_emb: ParamId,
    pos_emb: ParamId,
    seg_emb: ParamId,
    phase_emb: ParamId,
    blocks: Vec<Block>,
    ln_f: LayerNorm,
    text_head: Linear,
    speech_bias: ParamId,
}

impl Backbone {
    /// Register base weights (group `frozen`) and adapters (group `lora`).
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, config: BackboneConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let g = ParamGroup::Frozen;
        let emb_std = 0.1;
        let text_emb = store.normal("backbone.text_emb", g, (config.v_text, d), emb_std, rng)?;
        let speech_emb = store.normal("backbone.speech_emb", g, (config.v_speech + 1, d), emb_std, rng)?;
        let pos_emb = store.normal("backbone.pos_emb", g, (config.max_seq_len, d), emb_std, rng)?;
        let seg_emb = store.normal("backbone.seg_emb", g, (3, d), emb_std, rng)?;
        let phase_emb = store.normal("backbone.phase_emb", g, (4, d), emb_std, rng)?;
        let mut blocks = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let p = format!("backbone.layer{l}");
            let lin = |name: &str, din: usize, dout: usize, bias: bool, store: &mut ParamStore, rng: &mut R| -> Result<Linear> {
                let full = format!("{p}.{name}");
                let mut layer = Linear::new(store, &full, g, din, dout, bias, rng)?;
                layer.attach_adapter(store, &full, config.lora_rank, config.lora_scale, rng)?;
                Ok(layer)
            };
            let ln1 = LayerNorm::new(store, &format!("{p}.ln1"), g, d)?;
            let wq = lin("wq", d, d, false, store, rng)?;
            let wk = lin("wk", d, d, false, store, rng)?;
            let wv = lin("wv", d, d, false, store, rng)?;
            let wo = lin("wo", d, d, false, store, rng)?;
            let ln2 = LayerNorm::new(store, &format!("{p}.ln2"), g, d)?;
            let fc1 = lin("fc1", d, d * config.mlp_ratio, true, store, rng)?;
            let fc2 = lin("fc2", d * config.mlp_ratio, d, true, store, rng)?;
            blocks.push(Block {
                ln1,
                wq,
                wk,
                wv,
                wo,
                ln2,
                fc1,
                fc2,
            });
        }
        let ln_f = LayerNorm::new(store, "backbone.ln_f", g, d)?;
        let text_head = Linear::new(store, "backbone.text_head", g, d, config.v_text, true, rng)?;
        let speech_bias = store.zeros("backbone.speech_bias", g, (1, config.speech_out_vocab()))?;
        Ok(Self {
            config,
            text_emb,
            speech_emb,
            pos_emb,
            seg_emb,
            phase_emb,
            blocks,
            ln_f,
            text_head,
            speech_bias,
        })
    }

    /// Forward pass over a batch. `z` is `B × d_model`; `prefixes[i]` are the
    /// speech tokens fed after SOS. Example `i` gets `prefixes[i].len() + 1`
    /// rows of speech logits (and `texts[i].len()` rows of text logits with
    /// [`Heads::All`]).
    pub fn forward(
        &self,
        tape: &mut Tape,
        z: Var,
        texts: &[&[usize]],
        prefixes: &[&[usize]],
        use_adapters: bool,
        heads: Heads,
    ) -> Result<ForwardOut> {
        let cfg = &self.config;
        let d = cfg.d_model;
        let batch = texts.len();
        if prefixes.len() != batch {
            return Err(Error::Shape("texts and prefixes differ in batch size".into()));
        }
        if tape.value(z).dim() != (batch, d) {
            return Err(Error::Shape(format!(
                "conditioning is {:?}, expected ({batch}, {d})",
                tape.value(z).dim()
            )));
        }

        // Row index plan into the concatenated embedding table:
        // [zero | text | speech(+SOS) | pos | seg | phase].
        let zero = 0usize;
        let text_off = 1;
        let speech_off = text_off + cfg.v_text;
        let pos_off = speech_off + cfg.v_speech + 1;
        let seg_off = pos_off + cfg.max_seq_len;
        let phase_off = seg_off + 3;

        let mut tok_idx = Vec::new();
        let mut pos_idx = Vec::new();
        let mut seg_idx = Vec::new();
        let mut phase_idx = Vec::new();
        let mut z_idx = Vec::new();
        let mut lengths = Vec::with_capacity(batch);
        let mut speech_hidden_rows = Vec::new();
        let mut text_hidden_rows = Vec::new();
        let mut speech_rows = Vec::with_capacity(batch);
        let mut text_rows = Vec::with_capacity(batch);
        let mut row = 0usize;

        for (b, (&text, &prefix)) in texts.iter().zip(prefixes).enumerate() {
            let len = cfg.rows_for(text.len(), prefix.len());
            if len > cfg.max_seq_len {
                return Err(Error::Length {
                    len,
                    max: cfg.max_seq_len,
                });
            }
            if let Some(&t) = text.iter().find(|&&t| t >= cfg.v_text) {
                return Err(Error::Input(format!("text token {t} outside vocabulary {}", cfg.v_text)));
            }
            if let Some(&t) = prefix.iter().find(|&&t| t >= cfg.v_speech) {
                return Err(Error::Input(format!("speech token {t} outside vocabulary {}", cfg.v_speech)));
            }
            lengths.push(len);

            // Conditioning position.
            tok_idx.push(zero);
            pos_idx.push(zero);
            seg_idx.push(seg_off);
            phase_idx.push(zero);
            z_idx.push(1 + b);

            for (i, &t) in text.iter().enumerate() {
                tok_idx.push(text_off + t);
                pos_idx.push(pos_off + i);
                seg_idx.push(seg_off + 1);
                phase_idx.push(zero);
                z_idx.push(0);
            }

            let track = alignment_track(prefix, cfg.pause_token());
            for (j, &(next, phase)) in track.iter().enumerate() {
                let input = if j == 0 { cfg.sos() } else { prefix[j - 1] };
                tok_idx.push(speech_off + input);
                pos_idx.push(pos_off + next.min(cfg.max_seq_len - 1));
                seg_idx.push(seg_off + 2);
                phase_idx.push(phase_off + phase as usize);
                z_idx.push(0);
            }

            let speech_start = row + 1 + text.len();
            match heads {
                Heads::All => {
                    let s0 = speech_hidden_rows.len();
                    speech_hidden_rows.extend(speech_start..row + len);
                    speech_rows.push(s0..speech_hidden_rows.len());
                    let t0 = text_hidden_rows.len();
                    text_hidden_rows.extend(row..row + text.len());
                    text_rows.push(t0..text_hidden_rows.len());
                }
                Heads::LastSpeech => {
                    let s0 = speech_hidden_rows.len();
                    speech_hidden_rows.push(row + len - 1);
                    speech_rows.push(s0..s0 + 1);
                }
            }
            row += len;
        }

        let zero_row = tape.constant(Mat::zeros((1, d)));
        let tables = [
            zero_row,
            tape.param(self.text_emb),
            tape.param(self.speech_emb),
            tape.param(self.pos_emb),
            tape.param(self.seg_emb),
            tape.param(self.phase_emb),
        ];
        let table = tape.concat_rows(&tables);
        let zt = tape.concat_rows(&[zero_row, z]);

        let mut x = tape.gather_rows(table, tok_idx);
        for idx in [pos_idx, seg_idx, phase_idx] {
            let e = tape.gather_rows(table, idx);
            x = tape.add(x, e);
        }
        let zc = tape.gather_rows(zt, z_idx);
        x = tape.add(x, zc);

        let layout = SeqLayout::from_lengths(lengths);
        for block in &self.blocks {
            let h = block.ln1.forward(tape, x);
            let q = block.wq.forward(tape, h, use_adapters);
            let k = block.wk.forward(tape, h, use_adapters);
            let v = block.wv.forward(tape, h, use_adapters);
            let a = tape.causal_attention(q, k, v, &layout, cfg.n_heads);
            let o = block.wo.forward(tape, a, use_adapters);
            x = tape.add(x, o);
            let h = block.ln2.forward(tape, x);
            let f = block.fc1.forward(tape, h, use_adapters);
            let f = tape.gelu(f);
            let f = block.fc2.forward(tape, f, use_adapters);
            x = tape.add(x, f);
        }
        let hidden = self.ln_f.forward(tape, x);

        let sh = tape.gather_rows(hidden, speech_hidden_rows);
        // Output projection tied to the speech input table; the SOS row
        // doubles as the end-of-speech class.
        let emb = tape.param(self.speech_emb);
        let speech_logits = tape.matmul_t(sh, emb);
        let bias = tape.param(self.speech_bias);
        let speech_logits = tape.add_row(speech_logits, bias);
        let text_logits = if heads == Heads::All && !text_hidden_rows.is_empty() {
            let th = tape.gather_rows(hidden, text_hidden_rows);
            Some(self.text_head.forward(tape, th, false))
        } else {
            None
        };
        Ok(ForwardOut {
            speech_logits,
            speech_rows,
            text_logits,
            text_rows,
        })
    }

    /// Autoregressive decoding of a batch. Stops each sequence at EOS or
    /// when the sequence would exceed `max_seq_len`.
    #[allow(clippy::too_many_arguments)]
    pub fn decode_batch(
        &self,
        store: &ParamStore,
        z: &Mat,
        texts: &[&[usize]],
        strategy: &dyn DecodeStrategy,
        seeds: &[u64],
        use_adapters: bool,
    ) -> Result<Vec<Vec<usize>>> {
        let cfg = &self.config;
        let batch = texts.len();
        if seeds.len() != batch || z.nrows() != batch {
            return Err(Error::Shape("decode: texts, seeds and conditioning differ in batch size".into()));
        }
        let mut rngs: Vec<ChaCha8Rng> = seeds.iter().map(|&s| seeds::rng_n(s, 1)).collect();
        let mut outputs: Vec<Vec<usize>> = vec![Vec::new(); batch];
        let mut active: Vec<usize> = (0..batch).collect();
        for (i, t) in texts.iter().enumerate() {
            if cfg.rows_for(t.len(), 0) > cfg.max_seq_len {
                return Err(Error::Length {
                    len: cfg.rows_for(t.len(), 0),
                    max: cfg.max_seq_len,
                });
            }
            if t.is_empty() {
                active.retain(|&a| a != i);
            }
        }
        while !active.is_empty() {
            let mut tape = Tape::inference(store);
            let zs = Mat::from_shape_fn((active.len(), cfg.d_model), |(r, c)| z[[active[r], c]]);
            let zv = tape.constant(zs);
            let act_texts: Vec<&[usize]> = active.iter().map(|&i| texts[i]).collect();
            let act_prefix: Vec<&[usize]> = active.iter().map(|&i| outputs[i].as_slice()).collect();
            let out = self.forward(&mut tape, zv, &act_texts, &act_prefix, use_adapters, Heads::LastSpeech)?;
            let logits = tape.value(out.speech_logits);
            let mut still = Vec::with_capacity(active.len());
            for (r, &i) in active.iter().enumerate() {
                // End of sequence is not allowed before one token per text token.
                let tok = if outputs[i].len() < texts[i].len() {
                    let mut row = logits.row(r).to_owned();
                    row[cfg.eos()] = f64::NEG_INFINITY;
                    strategy.pick(row.view(), &mut rngs[i])
                } else {
                    strategy.pick(logits.row(r), &mut rngs[i])
                };
                if tok == cfg.eos() {
                    continue;
                }
                outputs[i].push(tok);
                if cfg.rows_for(texts[i].len(), outputs[i].len() + 1) <= cfg.max_seq_len {
                    still.push(i);
                }
            }
            active = still;
        }
        Ok(outputs)
    }

    pub fn lora_params(&self) -> Vec<ParamId> {
        let mut out = Vec::new();
        for b in &self.blocks {
            for l in [&b.wq, &b.wk, &b.wv, &b.wo, &b.fc1, &b.fc2] {
                if let Some(ad) = l.adapter {
                    out.push(ad.a_t);
                    out.push(ad.b_t);
                }
            }
        }
        out
    }
}

/// Token selection rule used by [`Backbone::decode_batch`].
pub trait DecodeStrategy: Send + Sync {
    fn name(&self) -> &'static str;
    fn pick(&self, logits: ArrayView1<f64>, rng: &mut ChaCha8Rng) -> usize;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct Greedy;

impl DecodeStrategy for Greedy {
    fn name(&self) -> &'static str {
        "greedy"
    }

    fn pick(&self, logits: ArrayView1<f64>, _rng: &mut ChaCha8Rng) -> usize {
        let mut best = 0;
        for (i, &v) in logits.iter().enumerate() {
            if v > logits[best] {
                best = i;
            }
        }
        best
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Sampled {
    pub temperature: f64,
}

impl DecodeStrategy for Sampled {
    fn name(&self) -> &'static str {
        "sampled"
    }

    fn pick(&self, logits: ArrayView1<f64>, rng: &mut ChaCha8Rng) -> usize {
        let t = self.temperature.max(1e-6);
        let max = logits.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let weights: Vec<f64> = logits.iter().map(|&l| ((l - max) / t).exp()).collect();
        let total: f64 = weights.iter().sum();
        let mut u: f64 = rng.random::<f64>() * total;
        for (i, w) in weights.iter().enumerate() {
            if u < *w {
                return i;
            }
            u -= w;
        }
        weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
    }
}

pub fn decode_registry() -> Registry<dyn DecodeStrategy> {
    Registry::<dyn DecodeStrategy>::new("decode strategy")
        .with("greedy", |_| Ok(Box::new(Greedy)))
        .with("sampled", |kv: &KeyValues| {
            let temperature: f64 = kv.get_or("temperature", 1.0)?;
            if temperature <= 0.0 {
                return Err(Error::config("temperature", "must be positive"));
            }
            Ok(Box::new(Sampled { temperature }))
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_distr::{Distribution, Normal};

    fn model(seed: u64) -> (ParamStore, Backbone) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = BackboneConfig {
            d_model: 16,
            n_heads: 2,
            v_text: 5,
            v_speech: 11,
            max_seq_len: 24,
            lora_rank: 4,
            lora_scale: 0.25,
            ..BackboneConfig::default()
        };
        let bb = Backbone::new(&mut store, cfg, &mut rng).unwrap();
        (store, bb)
    }

    fn logits(store: &ParamStore, bb: &Backbone, z: &Mat, text: &[usize], prefix: &[usize], lora: bool) -> Mat {
        let mut t = Tape::inference(store);
        let zv = t.constant(z.clone());
        let out = bb.forward(&mut t, zv, &[text], &[prefix], lora, Heads::All).unwrap();
        t.value(out.speech_logits).clone()
    }

    #[test]
    fn lora_scalar_example() {
        let ad = LowRankAdapter {
            a: array![[3.0]],
            b: array![[4.0]],
            scale: 1.0,
        };
        assert_eq!(lora_apply(&array![[2.0]], &ad, &[5.0]).unwrap(), vec![70.0]);
    }

    #[test]
    fn lora_zero_b_is_base() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = Normal::new(0.0, 1.0).unwrap();
        let w = Mat::from_shape_simple_fn((6, 8), || n.sample(&mut rng));
        let a = Mat::from_shape_simple_fn((16, 8), || n.sample(&mut rng));
        let x: Vec<f64> = (0..8).map(|_| n.sample(&mut rng)).collect();
        let ad = LowRankAdapter::zero_b(a, 6, 1.0 / 16.0);
        let base = w.dot(&ArrayView1::from(&x[..])).to_vec();
        assert_eq!(lora_apply(&w, &ad, &x).unwrap(), base);
    }

    #[test]
    fn lora_matches_dense_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = Normal::new(0.0, 1.0).unwrap();
        let w = Mat::from_shape_simple_fn((12, 10), || n.sample(&mut rng));
        let a = Mat::from_shape_simple_fn((16, 10), || n.sample(&mut rng));
        let b = Mat::from_shape_simple_fn((12, 16), || n.sample(&mut rng));
        let x: Vec<f64> = (0..10).map(|_| n.sample(&mut rng)).collect();
        let scale = 0.5;
        let dense = &w + &(b.dot(&a) * scale);
        let expected = dense.dot(&ArrayView1::from(&x[..]));
        let got = lora_apply(&w, &LowRankAdapter { a, b, scale }, &x).unwrap();
        for (g, e) in got.iter().zip(expected.iter()) {
            assert!((g - e).abs() <= 1e-5 * e.abs().max(1.0));
        }
    }

    #[test]
    fn lora_shape_errors() {
        let ad = LowRankAdapter::zero_b(Mat::zeros((2, 3)), 4, 1.0);
        assert!(matches!(lora_apply(&Mat::zeros((4, 3)), &ad, &[1.0, 2.0]), Err(Error::Shape(_))));
        assert!(matches!(lora_apply(&Mat::zeros((5, 3)), &ad, &[1.0, 2.0, 3.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn alignment_parse() {
        // 3 3 P 7 | 9 9 | 2 P
        let track = alignment_track(&[3, 3, 10, 7, 9, 9, 2, 10], 10);
        let idx: Vec<usize> = track.iter().map(|t| t.0).collect();
        assert_eq!(idx, [0, 1, 1, 1, 2, 3, 3, 4, 4]);
        assert_eq!(track[2].1, Phase::Repeated);
        assert_eq!(track[3].1, Phase::Paused);
        assert_eq!(track[0].1, Phase::Start);
    }

    #[test]
    fn output_shape_and_causality() {
        let (store, bb) = model(1);
        let z = Mat::from_elem((1, 16), 0.3);
        let text = [1, 2, 3];
        let prefix = [4, 4, 10, 5, 6];
        let base = logits(&store, &bb, &z, &text, &prefix, true);
        assert_eq!(base.dim(), (6, 12));
        for t in 0..prefix.len() {
            let mut p = prefix;
            p[t] = (p[t] + 3) % 10;
            let pert = logits(&store, &bb, &z, &text, &p, true);
            for row in 0..=t {
                assert_eq!(base.row(row), pert.row(row), "row {row} changed after perturbing {t}");
            }
        }
    }

    #[test]
    fn zero_adapters_leave_logits_unchanged() {
        let (store, bb) = model(2);
        let z = Mat::from_elem((1, 16), -0.2);
        let a = logits(&store, &bb, &z, &[0, 1], &[3, 4], true);
        let b = logits(&store, &bb, &z, &[0, 1], &[3, 4], false);
        assert_eq!(a, b);
    }

    #[test]
    fn conditioning_is_live() {
        let (store, bb) = model(3);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = Normal::new(0.0, 1.0).unwrap();
        for _ in 0..5 {
            let z1 = Mat::from_shape_simple_fn((1, 16), || n.sample(&mut rng));
            let z2 = Mat::from_shape_simple_fn((1, 16), || n.sample(&mut rng));
            assert_ne!(logits(&store, &bb, &z1, &[1, 2], &[5], false), logits(&store, &bb, &z2, &[1, 2], &[5], false));
        }
    }

    #[test]
    fn overlong_input_is_rejected() {
        let (store, bb) = model(4);
        let mut t = Tape::inference(&store);
        let z = t.constant(Mat::zeros((1, 16)));
        let prefix = vec![1usize; 30];
        let res = bb.forward(&mut t, z, &[&[1, 2]], &[&prefix], false, Heads::All);
        assert!(matches!(res, Err(Error::Length { .. })));
    }

    #[test]
    fn decoding_is_reproducible() {
        let (store, bb) = model(5);
        let z = Mat::from_elem((2, 16), 0.1);
        let texts: [&[usize]; 2] = [&[1, 2, 3], &[4]];
        let g1 = bb.decode_batch(&store, &z, &texts, &Greedy, &[0, 0], false).unwrap();
        let g2 = bb.decode_batch(&store, &z, &texts, &Greedy, &[7, 9], false).unwrap();
        assert_eq!(g1, g2);
        let s = Sampled { temperature: 1.0 };
        let s1 = bb.decode_batch(&store, &z, &texts, &s, &[11, 12], false).unwrap();
        let s2 = bb.decode_batch(&store, &z, &texts, &s, &[11, 12], false).unwrap();
        assert_eq!(s1, s2);
        for (t, o) in texts.iter().zip(&s1) {
            assert!(bb.config.rows_for(t.len(), o.len()) <= bb.config.max_seq_len);
        }
    }

    #[test]
    fn batched_decode_matches_single() {
        let (store, bb) = model(6);
        let z = Mat::from_shape_fn((2, 16), |(r, c)| (r as f64 + 1.0) * (c as f64 * 0.1).sin());
        let texts: [&[usize]; 2] = [&[1, 2, 3], &[4, 0]];
        let both = bb.decode_batch(&store, &z, &texts, &Greedy, &[0, 0], false).unwrap();
        for i in 0..2 {
            let zi = z.slice(ndarray::s![i..i + 1, ..]).to_owned();
            let one = bb.decode_batch(&store, &zi, &texts[i..i + 1], &Greedy, &[0], false).unwrap();
            assert_eq!(one[0], both[i]);
        }
    }

    #[test]
    fn end_of_sequence_waits_for_one_token_per_text_token() {
        let (mut store, bb) = model(8);
        let eos = bb.config.eos();
        store.value_mut(bb.speech_bias)[[0, eos]] = 50.0;
        let z = Mat::zeros((1, 16));
        let text: [&[usize]; 1] = [&[1, 2, 3]];
        for strategy in [&Greedy as &dyn DecodeStrategy, &Sampled { temperature: 1.0 }] {
            let out = bb.decode_batch(&store, &z, &text, strategy, &[3], false).unwrap();
            assert_eq!(out[0].len(), 3);
            assert!(out[0].iter().all(|&t| t != eos));
        }
    }
}
