//! Speaker encoder, pathology prototype codebook, dual classifiers and the
//! composite objective.
//!
//! The conditioning vector handed to the backbone is `z = s + p_k`: a
//! speaker embedding `s` extracted from prompt speech plus row `k` of a
//! learnable codebook (row 0 is the healthy prototype). A condition
//! classifier reads `z` directly; an adversarial classifier reads `s`
//! through a gradient reversal node so the encoder is pushed to drop
//! articulation cues from `s`.

use std::sync::Mutex;

use ndarray::ArrayView1;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::backbone::{Backbone, BackboneConfig, DecodeStrategy, Heads};
use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::nn::{Linear, Mlp};
use crate::params::{Mat, ParamGroup, ParamId, ParamStore};
use crate::registry::Registry;
use crate::seeds;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Codebook {
    pub table: ParamId,
    /// Number of dysarthric prototypes; the table has `n + 1` rows.
    pub n: usize,
    pub dim: usize,
}

impl Codebook {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, n: usize, dim: usize, rng: &mut R) -> Result<Self> {
        let table = store.normal("codebook", ParamGroup::Codebook, (n + 1, dim), 0.02, rng)?;
        Ok(Self { table, n, dim })
    }

    fn check(&self, k: usize) -> Result<()> {
        if k > self.n {
            return Err(Error::Range {
                what: "prototype index",
                index: k,
                max: self.n,
            });
        }
        Ok(())
    }

    pub fn lookup(&self, store: &ParamStore, k: usize) -> Result<Vec<f64>> {
        self.check(k)?;
        Ok(store.value(self.table).row(k).to_vec())
    }

    /// Rows `ks` of the table as a `len(ks) × dim` tape variable.
    pub fn forward(&self, tape: &mut Tape, ks: &[usize]) -> Result<Var> {
        for &k in ks {
            self.check(k)?;
        }
        let t = tape.param(self.table);
        Ok(tape.gather_rows(t, ks.to_vec()))
    }

    /// One tab-separated line per prototype, row 0 first.
    pub fn export_tsv(&self, store: &ParamStore) -> String {
        let mut out = String::new();
        for row in store.value(self.table).rows() {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.17e}")).collect();
            out.push_str(&cells.join("\t"));
            out.push('\n');
        }
        out
    }
}

/// Conditioner (mean of token embeddings, frozen during fine-tuning)
/// followed by a two-layer perceiver.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpeakerEncoder {
    conditioner: ParamId,
    perceiver_in: Linear,
    perceiver_out: Linear,
    v_speech: usize,
    dim: usize,
}

impl SpeakerEncoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, v_speech: usize, dim: usize, rng: &mut R) -> Result<Self> {
        let conditioner = store.normal("encoder.conditioner", ParamGroup::Frozen, (v_speech, dim), 0.5, rng)?;
        let g = ParamGroup::Perceiver;
        Ok(Self {
            conditioner,
            perceiver_in: Linear::new(store, "encoder.perceiver.in", g, dim, dim, true, rng)?,
            perceiver_out: Linear::new(store, "encoder.perceiver.out", g, dim, dim, true, rng)?,
            v_speech,
            dim,
        })
    }

    pub fn forward(&self, tape: &mut Tape, prompts: &[&[usize]]) -> Result<Var> {
        let mut idx = Vec::new();
        let mut ranges = Vec::with_capacity(prompts.len());
        for p in prompts {
            if p.is_empty() {
                return Err(Error::Input("empty prompt speech".into()));
            }
            if let Some(&t) = p.iter().find(|&&t| t >= self.v_speech) {
                return Err(Error::Input(format!("prompt token {t} outside vocabulary {}", self.v_speech)));
            }
            let start = idx.len();
            idx.extend_from_slice(p);
            ranges.push(start..idx.len());
        }
        let table = tape.param(self.conditioner);
        let e = tape.gather_rows(table, idx);
        let pooled = tape.mean_pool(e, ranges);
        let h = self.perceiver_in.forward(tape, pooled, false);
        let h = tape.gelu(h);
        Ok(self.perceiver_out.forward(tape, h, false))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
}

/// `z = s + p` elementwise.
pub fn combine(s: &[f64], p: &[f64]) -> Result<Vec<f64>> {
    if s.len() != p.len() {
        return Err(Error::Shape(format!("speaker embedding has {} entries, prototype {}", s.len(), p.len())));
    }
    Ok(s.iter().zip(p).map(|(a, b)| a + b).collect())
}

/// Gradient reversal: identity forward, `-lambda` times the gradient backward.
pub fn grl(tape: &mut Tape, x: Var, lambda: f64) -> Var {
    tape.grl(x, lambda)
}

/// Label scheme for the condition classifier.
pub trait ConditionTarget: Send + Sync {
    fn name(&self) -> &'static str;
    fn n_classes(&self, n_prototypes: usize) -> usize;
    fn label(&self, k: usize) -> usize;
}

/// Healthy (class 0) against any dysarthric prototype (class 1).
#[derive(Debug, Clone, Copy, Default)]
pub struct BinaryTarget;

impl ConditionTarget for BinaryTarget {
    fn name(&self) -> &'static str {
        "binary"
    }

    fn n_classes(&self, _n: usize) -> usize {
        2
    }

    fn label(&self, k: usize) -> usize {
        usize::from(k > 0)
    }
}

/// One class per codebook row.
#[derive(Debug, Clone, Copy, Default)]
pub struct PerPrototypeTarget;

impl ConditionTarget for PerPrototypeTarget {
    fn name(&self) -> &'static str {
        "per_prototype"
    }

    fn n_classes(&self, n: usize) -> usize {
        n + 1
    }

    fn label(&self, k: usize) -> usize {
        k
    }
}

pub fn condition_target_registry() -> Registry<dyn ConditionTarget> {
    Registry::<dyn ConditionTarget>::new("condition target")
        .with("binary", |_| Ok(Box::new(BinaryTarget)))
        .with("per_prototype", |_| Ok(Box::new(PerPrototypeTarget)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DisentLossParts {
    pub l_tts: f64,
    pub l_dys: f64,
    pub l_adv: f64,
    pub alpha: f64,
    pub beta: f64,
    pub lambda_grl: f64,
}

pub fn check_weights(alpha: f64, beta: f64, lambda_grl: f64) -> Result<()> {
    for (name, v) in [("alpha", alpha), ("beta", beta), ("lambda_grl", lambda_grl)] {
        if !(v >= 0.0) || !v.is_finite() {
            return Err(Error::config(name, format!("must be a finite non-negative number, got {v}")));
        }
    }
    Ok(())
}

/// `l_tts + alpha·l_dys + beta·l_adv`.
pub fn total_loss(parts: &DisentLossParts) -> Result<f64> {
    check_weights(parts.alpha, parts.beta, parts.lambda_grl)?;
    Ok(parts.l_tts + parts.alpha * parts.l_dys + parts.beta * parts.l_adv)
}

/// Mean cross-entropy of the speech stream plus mean cross-entropy of the
/// text stream (omitted when `text_targets` is empty). Targets are
/// `(row, class)` pairs into the respective logit matrices.
pub fn tts_loss(
    tape: &mut Tape,
    speech_logits: Var,
    speech_targets: &[(usize, usize)],
    text_logits: Option<Var>,
    text_targets: &[(usize, usize)],
) -> Result<Var> {
    fn check(tape: &Tape, logits: Var, targets: &[(usize, usize)], stream: &str) -> Result<()> {
        let (rows, vocab) = tape.value(logits).dim();
        for &(r, c) in targets {
            if c >= vocab {
                return Err(Error::Input(format!("{stream} target {c} outside vocabulary {vocab}")));
            }
            if r >= rows {
                return Err(Error::Shape(format!("{stream} target row {r} beyond {rows} logit rows")));
            }
        }
        Ok(())
    }
    if speech_targets.is_empty() {
        return Err(Error::Input("empty speech target stream".into()));
    }
    check(tape, speech_logits, speech_targets, "speech")?;
    let mut loss = tape.cross_entropy(speech_logits, speech_targets);
    if !text_targets.is_empty() {
        let tl = text_logits.ok_or_else(|| Error::Shape("text targets given without text logits".into()))?;
        check(tape, tl, text_targets, "text")?;
        let lt = tape.cross_entropy(tl, text_targets);
        loss = tape.add(loss, lt);
    }
    Ok(loss)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Untrained,
    Pretrained,
    FineTuned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub n_prototypes: usize,
    pub condition_target: String,
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(backbone: BackboneConfig, n_prototypes: usize, seed: u64) -> Self {
        Self {
            backbone,
            n_prototypes,
            condition_target: "binary".into(),
            seed,
        }
    }
}

/// Records every codebook row read through [`ProtoDisentModel::lookup_prototype`].
#[derive(Debug, Default)]
pub struct PrototypeAudit(Mutex<Vec<usize>>);

impl Clone for PrototypeAudit {
    fn clone(&self) -> Self {
        Self::default()
    }
}

impl PrototypeAudit {
    fn record(&self, k: usize) {
        self.0.lock().unwrap_or_else(|e| e.into_inner()).push(k);
    }

    pub fn take(&self) -> Vec<usize> {
        std::mem::take(&mut *self.0.lock().unwrap_or_else(|e| e.into_inner()))
    }
}

/// One training or synthesis item.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub text: Vec<usize>,
    pub prompt: Vec<usize>,
    pub k: usize,
    /// Condition of the prompt utterance; the adversarial classifier's label.
    pub prompt_k: usize,
    /// Target speech (empty for synthesis requests).
    pub speech: Vec<usize>,
}

/// Loss weights and switches for one graph construction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSettings {
    pub alpha: f64,
    pub beta: f64,
    pub lambda_grl: f64,
    /// Build the classifier branches at all.
    pub classifiers: bool,
    /// Add the prototype to `s`; off during base pre-training (`z = s`).
    pub use_codebook: bool,
    /// Route through the low-rank adapters.
    pub use_adapters: bool,
}

pub struct LossGraph {
    pub l_tts: Var,
    pub l_dys: Option<Var>,
    pub l_adv: Option<Var>,
    pub total: Var,
    pub s: Var,
    pub z: Var,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProtoDisentModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub backbone: Backbone,
    pub encoder: SpeakerEncoder,
    pub codebook: Codebook,
    pub dys_head: Mlp,
    pub adv_head: Mlp,
    pub stage: Stage,
    #[serde(skip)]
    pub audit: PrototypeAudit,
}

impl ProtoDisentModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.backbone.validate()?;
        let target = condition_target_registry().create(&config.condition_target, &KeyValues::default())?;
        let classes = target.n_classes(config.n_prototypes);
        let d = config.backbone.d_model;
        let mut rng = seeds::rng(config.seed, "model/init");
        let mut store = ParamStore::new();
        let backbone = Backbone::new(&mut store, config.backbone.clone(), &mut rng)?;
        let encoder = SpeakerEncoder::new(&mut store, config.backbone.v_speech, d, &mut rng)?;
        let codebook = Codebook::new(&mut store, config.n_prototypes, d, &mut rng)?;
        let g = ParamGroup::Classifiers;
        let dys_head = Mlp::new(&mut store, "classifier.dys", g, d, d, classes, &mut rng)?;
        let adv_head = Mlp::new(&mut store, "classifier.adv", g, d, d, classes, &mut rng)?;
        Ok(Self {
            config,
            store,
            backbone,
            encoder,
            codebook,
            dys_head,
            adv_head,
            stage: Stage::Untrained,
            audit: PrototypeAudit::default(),
        })
    }

    pub fn condition_target(&self) -> Result<Box<dyn ConditionTarget>> {
        condition_target_registry().create(&self.config.condition_target, &KeyValues::default())
    }

    pub fn n_prototypes(&self) -> usize {
        self.codebook.n
    }

    pub fn adapters_enabled(&self) -> bool {
        self.stage == Stage::FineTuned
    }

    pub fn encode_speakers(&self, prompts: &[&[usize]]) -> Result<Mat> {
        let mut tape = Tape::inference(&self.store);
        let s = self.encoder.forward(&mut tape, prompts)?;
        Ok(tape.value(s).clone())
    }

    pub fn encode_speaker(&self, prompt: &[usize]) -> Result<Vec<f64>> {
        Ok(self.encode_speakers(&[prompt])?.row(0).to_vec())
    }

    pub fn lookup_prototype(&self, k: usize) -> Result<Vec<f64>> {
        let row = self.codebook.lookup(&self.store, k)?;
        self.audit.record(k);
        Ok(row)
    }

    /// Condition classifier logits for a batch of joint representations.
    pub fn classify_dys(&self, z: &Mat) -> Result<Mat> {
        self.head_logits(&self.dys_head, z)
    }

    /// Adversarial classifier logits on speaker embeddings.
    pub fn classify_adv(&self, s: &Mat) -> Result<Mat> {
        self.head_logits(&self.adv_head, s)
    }

    fn head_logits(&self, head: &Mlp, x: &Mat) -> Result<Mat> {
        if x.ncols() != self.codebook.dim {
            return Err(Error::Shape(format!("input has {} columns, expected {}", x.ncols(), self.codebook.dim)));
        }
        let mut tape = Tape::inference(&self.store);
        let v = tape.constant(x.clone());
        let out = head.forward(&mut tape, v);
        Ok(tape.value(out).clone())
    }

    /// Build the training objective for a batch.
    pub fn loss_graph(&self, tape: &mut Tape, batch: &[Example], settings: &LossSettings) -> Result<LossGraph> {
        check_weights(settings.alpha, settings.beta, settings.lambda_grl)?;
        if batch.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        let prompts: Vec<&[usize]> = batch.iter().map(|e| e.prompt.as_slice()).collect();
        let texts: Vec<&[usize]> = batch.iter().map(|e| e.text.as_slice()).collect();
        let targets: Vec<&[usize]> = batch.iter().map(|e| e.speech.as_slice()).collect();
        let ks: Vec<usize> = batch.iter().map(|e| e.k).collect();

        let s = self.encoder.forward(tape, &prompts)?;
        let z = if settings.use_codebook {
            let p = self.codebook.forward(tape, &ks)?;
            tape.add(s, p)
        } else {
            s
        };
        let out = self.backbone.forward(tape, z, &texts, &targets, settings.use_adapters, Heads::All)?;

        let eos = self.config.backbone.eos();
        let mut speech_t = Vec::new();
        let mut text_t = Vec::new();
        for (i, ex) in batch.iter().enumerate() {
            let rows = out.speech_rows[i].clone();
            for (r, tok) in rows.zip(ex.speech.iter().copied().chain(std::iter::once(eos))) {
                speech_t.push((r, tok));
            }
            for (r, &tok) in out.text_rows[i].clone().zip(&ex.text) {
                text_t.push((r, tok));
            }
        }
        let l_tts = tts_loss(tape, out.speech_logits, &speech_t, out.text_logits, &text_t)?;

        let (mut l_dys, mut l_adv) = (None, None);
        let mut total = l_tts;
        if settings.classifiers {
            let target = self.condition_target()?;
            let labels: Vec<(usize, usize)> = ks.iter().enumerate().map(|(i, &k)| (i, target.label(k))).collect();
            let dl = self.dys_head.forward(tape, z);
            let ld = tape.cross_entropy(dl, &labels);
            let prompt_labels: Vec<(usize, usize)> =
                batch.iter().enumerate().map(|(i, e)| (i, target.label(e.prompt_k))).collect();
            let rs = grl(tape, s, settings.lambda_grl);
            let al = self.adv_head.forward(tape, rs);
            let la = tape.cross_entropy(al, &prompt_labels);
            let wd = tape.scale(ld, settings.alpha);
            let wa = tape.scale(la, settings.beta);
            total = tape.add(total, wd);
            total = tape.add(total, wa);
            l_dys = Some(ld);
            l_adv = Some(la);
        }
        Ok(LossGraph {
            l_tts,
            l_dys,
            l_adv,
            total,
            s,
            z,
        })
    }

    /// Decode one speech sequence per request using `z = s(prompt) + p_k`.
    pub fn synthesize(&self, requests: &[Example], strategy: &dyn DecodeStrategy, seeds: &[u64]) -> Result<Vec<Vec<usize>>> {
        if self.stage == Stage::Untrained {
            return Err(Error::State("model has not been trained".into()));
        }
        if requests.is_empty() {
            return Ok(Vec::new());
        }
        let prompts: Vec<&[usize]> = requests.iter().map(|r| r.prompt.as_slice()).collect();
        let mut z = self.encode_speakers(&prompts)?;
        for (i, r) in requests.iter().enumerate() {
            let p = self.lookup_prototype(r.k)?;
            let mut row = z.row_mut(i);
            row += &ArrayView1::from(&p[..]);
        }
        let texts: Vec<&[usize]> = requests.iter().map(|r| r.text.as_slice()).collect();
        self.backbone.decode_batch(&self.store, &z, &texts, strategy, seeds, self.adapters_enabled())
    }

    /// Mean speech+text cross-entropy on a set of examples, evaluated with
    /// the prototypes and adapters the current stage uses.
    pub fn eval_tts_loss(&self, examples: &[Example]) -> Result<f64> {
        let mut tape = Tape::inference(&self.store);
        let g = self.loss_graph(
            &mut tape,
            examples,
            &LossSettings {
                alpha: 0.0,
                beta: 0.0,
                lambda_grl: 0.0,
                classifiers: false,
                use_codebook: self.stage == Stage::FineTuned,
                use_adapters: self.adapters_enabled(),
            },
        )?;
        Ok(tape.scalar(g.l_tts))
    }

    pub fn checksum(&self) -> String {
        self.store.checksum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Grads;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_config() -> ModelConfig {
        ModelConfig::new(
            BackboneConfig {
                d_model: 16,
                n_heads: 2,
                n_layers: 1,
                v_text: 4,
                v_speech: 9,
                max_seq_len: 32,
                lora_rank: 4,
                lora_scale: 0.25,
                mlp_ratio: 2,
            },
            3,
            5,
        )
    }

    fn batch() -> Vec<Example> {
        vec![
            Example {
                text: vec![0, 1],
                prompt: vec![1, 2, 3],
                k: 0,
                prompt_k: 0,
                speech: vec![1, 3],
            },
            Example {
                text: vec![2, 3, 1],
                prompt: vec![4, 8, 4],
                k: 3,
                prompt_k: 3,
                speech: vec![4, 4, 8, 6, 2],
            },
        ]
    }

    fn settings() -> LossSettings {
        LossSettings {
            alpha: 1.0,
            beta: 1.0,
            lambda_grl: 0.1,
            classifiers: true,
            use_codebook: true,
            use_adapters: true,
        }
    }

    #[test]
    fn combine_examples() {
        assert_eq!(combine(&[1.0, 2.0], &[3.0, 4.0]).unwrap(), vec![4.0, 6.0]);
        assert_eq!(combine(&[0.1, -0.1], &[-0.1, 0.1]).unwrap(), vec![0.0, 0.0]);
        assert_eq!(combine(&[0.7, 0.2], &[0.0, 0.0]).unwrap(), vec![0.7, 0.2]);
        assert!(matches!(combine(&[1.0], &[1.0, 2.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn total_loss_examples() {
        let p = |alpha, beta| DisentLossParts {
            l_tts: 2.0,
            l_dys: 0.5,
            l_adv: 0.3,
            alpha,
            beta,
            lambda_grl: 0.1,
        };
        assert!((total_loss(&p(1.0, 1.0)).unwrap() - 2.8).abs() < 1e-12);
        assert!((total_loss(&p(2.0, 0.5)).unwrap() - 3.15).abs() < 1e-12);
        assert_eq!(total_loss(&p(0.0, 0.0)).unwrap(), 2.0);
        assert!(matches!(total_loss(&p(-1.0, 0.0)), Err(Error::Config { .. })));
    }

    #[test]
    fn lookup_range() {
        let m = ProtoDisentModel::new(small_config()).unwrap();
        assert_eq!(m.lookup_prototype(0).unwrap(), m.store.value(m.codebook.table).row(0).to_vec());
        assert_eq!(m.lookup_prototype(3).unwrap(), m.store.value(m.codebook.table).row(3).to_vec());
        assert!(matches!(m.lookup_prototype(4), Err(Error::Range { max: 3, .. })));
        assert_eq!(m.audit.take(), vec![0, 3]);
    }

    #[test]
    fn encoder_contract() {
        let m = ProtoDisentModel::new(small_config()).unwrap();
        let a = m.encode_speaker(&[1, 2, 2]).unwrap();
        assert_eq!(a, m.encode_speaker(&[1, 2, 2]).unwrap());
        assert_eq!(a.len(), 16);
        assert!(matches!(m.encode_speaker(&[]), Err(Error::Input(_))));
    }

    #[test]
    fn binary_labels() {
        assert_eq!(BinaryTarget.label(0), 0);
        assert_eq!(BinaryTarget.label(5), 1);
        let m = ProtoDisentModel::new(small_config()).unwrap();
        assert_eq!(m.classify_dys(&Mat::zeros((3, 16))).unwrap().dim(), (3, 2));
        assert!(matches!(m.classify_dys(&Mat::zeros((1, 15))), Err(Error::Shape(_))));
    }

    #[test]
    fn tts_loss_uniform_and_oov() {
        let store = ParamStore::new();
        let mut t = Tape::new(&store);
        let sl = t.constant(Mat::zeros((3, 7)));
        let tl = t.constant(Mat::zeros((2, 4)));
        let l = tts_loss(&mut t, sl, &[(0, 1), (1, 2), (2, 6)], Some(tl), &[]).unwrap();
        assert!((t.scalar(l) - 7f64.ln()).abs() < 1e-12);
        let l = tts_loss(&mut t, sl, &[(0, 1)], Some(tl), &[(0, 3), (1, 0)]).unwrap();
        assert!((t.scalar(l) - 7f64.ln() - 4f64.ln()).abs() < 1e-12);
        assert!(matches!(tts_loss(&mut t, sl, &[(0, 7)], None, &[]), Err(Error::Input(_))));
        let mut sharp = Mat::zeros((1, 3));
        sharp[[0, 2]] = 60.0;
        let sv = t.constant(sharp);
        let l = tts_loss(&mut t, sv, &[(0, 2)], None, &[]).unwrap();
        assert!(t.scalar(l) < 1e-20);
    }

    #[test]
    fn codebook_gradient_is_row_sparse() {
        let m = ProtoDisentModel::new(small_config()).unwrap();
        let mut tape = Tape::new(&m.store);
        let g = m.loss_graph(&mut tape, &batch(), &settings()).unwrap();
        let grads: Grads = tape.backward(g.total);
        let cg = grads.get(m.codebook.table).unwrap();
        for r in [1, 2] {
            assert!(cg.row(r).iter().all(|&v| v == 0.0));
        }
        for r in [0, 3] {
            assert!(cg.row(r).iter().any(|&v| v != 0.0));
        }
    }

    #[test]
    fn dys_gradient_matches_finite_difference() {
        let mut m = ProtoDisentModel::new(small_config()).unwrap();
        let only_dys = LossSettings {
            beta: 0.0,
            ..settings()
        };
        let dys_only = |m: &ProtoDisentModel| {
            let mut tape = Tape::new(&m.store);
            let g = m.loss_graph(&mut tape, &batch(), &only_dys).unwrap();
            let v = tape.scalar(g.l_dys.unwrap());
            let grads = tape.backward(g.l_dys.unwrap());
            (v, grads)
        };
        let (_, grads) = dys_only(&m);
        let analytic = grads.get(m.codebook.table).unwrap()[[3, 5]];
        let h = 1e-5;
        m.store.value_mut(m.codebook.table)[[3, 5]] += h;
        let (up, _) = dys_only(&m);
        m.store.value_mut(m.codebook.table)[[3, 5]] -= 2.0 * h;
        let (down, _) = dys_only(&m);
        let fd = (up - down) / (2.0 * h);
        assert!(analytic != 0.0);
        assert!((analytic - fd).abs() <= 1e-6 + 1e-4 * fd.abs(), "{analytic} vs {fd}");
        assert!(grads.get(m.codebook.table).unwrap().row(1).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn adversarial_gradient_flips_with_lambda() {
        let m = ProtoDisentModel::new(small_config()).unwrap();
        let adv_grad = |lambda: f64| {
            let mut tape = Tape::new(&m.store);
            let s = m.encoder.forward(&mut tape, &[&[1, 2, 3], &[4, 8, 4]]).unwrap();
            let r = tape.grl(s, lambda);
            let logits = m.adv_head.forward(&mut tape, r);
            let l = tape.cross_entropy(logits, &[(0, 0), (1, 1)]);
            let grads = tape.backward(l);
            let w = m.encoder.perceiver_out.weight;
            (grads.get(w).unwrap().clone(), grads.get(m.adv_head.out.weight).unwrap().clone())
        };
        let (pos, head_pos) = adv_grad(0.1);
        let (neg, head_neg) = adv_grad(-0.1);
        let (zero, _) = adv_grad(0.0);
        assert!(pos.iter().any(|&v| v != 0.0));
        for ((a, b), z) in pos.iter().zip(neg.iter()).zip(zero.iter()) {
            assert!((a + b).abs() <= 1e-12);
            assert_eq!(*z, 0.0);
        }
        assert_eq!(head_pos, head_neg);
    }

    #[test]
    fn classifier_step_reduces_its_loss() {
        let mut m = ProtoDisentModel::new(small_config()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = Mat::from_shape_fn((8, 16), |(r, c)| ((r * 16 + c) as f64 * 0.37).sin() + rng.random::<f64>() * 0.1);
        let labels: Vec<(usize, usize)> = (0..8).map(|i| (i, i % 2)).collect();
        let eval = |m: &ProtoDisentModel| {
            let mut tape = Tape::new(&m.store);
            let sv = tape.constant(s.clone());
            let r = tape.grl(sv, 0.1);
            let lo = m.adv_head.forward(&mut tape, r);
            let l = tape.cross_entropy(lo, &labels);
            (tape.scalar(l), tape.backward(l))
        };
        let (before, grads) = eval(&m);
        for id in [m.adv_head.hidden.weight, m.adv_head.out.weight] {
            let g = grads.get(id).unwrap().clone();
            m.store.value_mut(id).scaled_add(-0.05, &g);
        }
        let (after, _) = eval(&m);
        assert!(after < before);
    }

    #[test]
    fn untrained_model_refuses_to_decode() {
        let m = ProtoDisentModel::new(small_config()).unwrap();
        let req = [Example {
            text: vec![1],
            prompt: vec![1],
            k: 0,
            prompt_k: 0,
            speech: vec![],
        }];
        let greedy = crate::backbone::Greedy;
        assert!(matches!(m.synthesize(&req, &greedy, &[0]), Err(Error::State(_))));
    }

    #[test]
    fn codebook_export_has_one_line_per_row() {
        let m = ProtoDisentModel::new(small_config()).unwrap();
        let tsv = m.codebook.export_tsv(&m.store);
        let lines: Vec<&str> = tsv.lines().collect();
        assert_eq!(lines.len(), 4);
        let first: Vec<f64> = lines[0].split('\t').map(|c| c.parse().unwrap()).collect();
        assert_eq!(first, m.lookup_prototype(0).unwrap());
    }
}
