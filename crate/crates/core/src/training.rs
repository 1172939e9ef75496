//! Base pre-training, adapter fine-tuning with per-group learning rates, and
//! the loss curve.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::backbone::BackboneConfig;
use crate::config::KeyValues;
use crate::corpus::{make_vc_pairs, Corpus, Utterance};
use crate::disent::{check_weights, Example, LossSettings, ModelConfig, ProtoDisentModel, Stage};
use crate::error::{Error, Result};
use crate::optim::{self, Optimizer};
use crate::params::{Param, ParamGroup, ParamId};
use crate::seeds;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr_lora: f64,
    pub lr_codebook: f64,
    pub lr_classifiers: f64,
    pub lr_perceiver: f64,
    pub alpha: f64,
    pub beta: f64,
    pub lambda_grl: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub ablation_no_disent: bool,
    pub optimizer: String,
    /// `self` or `same_speaker`.
    pub prompt_policy: String,
    pub vc_fraction: f64,
    pub checkpoint_every: usize,
    pub pretrain_steps: usize,
    pub pretrain_lr: f64,
    pub pretrain_batch_size: usize,
    /// `healthy` or `all`: which real utterances the base pre-training
    /// sees. Condition labels are never used there.
    pub pretrain_data: String,
    pub condition_target: String,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub lora_rank: usize,
    pub lora_scale: f64,
    pub max_seq_len: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_lora: 5e-5,
            lr_codebook: 2.5e-3,
            lr_classifiers: 2.5e-4,
            lr_perceiver: 2.5e-4,
            alpha: 1.0,
            beta: 1.0,
            lambda_grl: 0.1,
            batch_size: 16,
            steps: 3000,
            seed: 17,
            ablation_no_disent: false,
            optimizer: "adam".into(),
            prompt_policy: "cross_condition".into(),
            vc_fraction: 0.5,
            checkpoint_every: 0,
            pretrain_steps: 1500,
            pretrain_lr: 2e-3,
            pretrain_batch_size: 16,
            pretrain_data: "all".into(),
            condition_target: "binary".into(),
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            lora_rank: 16,
            lora_scale: 1.0 / 16.0,
            max_seq_len: 64,
        }
    }
}

macro_rules! train_keys {
    ($($field:ident),* $(,)?) => {
        impl TrainConfig {
            pub const KEYS: &'static [&'static str] = &[$(stringify!($field)),*];

            pub fn from_kv(kv: &KeyValues) -> Result<Self> {
                let d = Self::default();
                let mut c = Self { $($field: kv.get_or(stringify!($field), d.$field.clone())?),* };
                if kv.get_str("lora_scale").is_none() && c.lora_rank > 0 {
                    c.lora_scale = 1.0 / c.lora_rank as f64;
                }
                c.validate()?;
                Ok(c)
            }

            pub fn to_kv(&self) -> KeyValues {
                let mut kv = KeyValues::default();
                $(kv.set(stringify!($field), format_value(&self.$field));)*
                kv
            }
        }
    };
}

train_keys!(
    lr_lora,
    lr_codebook,
    lr_classifiers,
    lr_perceiver,
    alpha,
    beta,
    lambda_grl,
    batch_size,
    steps,
    seed,
    ablation_no_disent,
    optimizer,
    prompt_policy,
    vc_fraction,
    checkpoint_every,
    pretrain_steps,
    pretrain_lr,
    pretrain_batch_size,
    pretrain_data,
    condition_target,
    d_model,
    n_layers,
    n_heads,
    lora_rank,
    lora_scale,
    max_seq_len,
);

trait ConfigValue {
    fn render(&self) -> String;
}

impl ConfigValue for f64 {
    fn render(&self) -> String {
        format!("{self:?}")
    }
}

macro_rules! display_value {
    ($($t:ty),*) => {$(impl ConfigValue for $t {
        fn render(&self) -> String {
            self.to_string()
        }
    })*};
}

display_value!(usize, u64, bool, String);

fn format_value<T: ConfigValue>(v: &T) -> String {
    v.render()
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lr_lora", self.lr_lora),
            ("lr_codebook", self.lr_codebook),
            ("lr_classifiers", self.lr_classifiers),
            ("lr_perceiver", self.lr_perceiver),
            ("pretrain_lr", self.pretrain_lr),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::config(name, format!("learning rate must be positive, got {v}")));
            }
        }
        check_weights(self.alpha, self.beta, self.lambda_grl)?;
        if self.batch_size < 2 {
            return Err(Error::config("batch_size", "must be at least 2"));
        }
        if self.pretrain_batch_size == 0 {
            return Err(Error::config("pretrain_batch_size", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.vc_fraction) {
            return Err(Error::config("vc_fraction", "must lie in [0, 1]"));
        }
        if !optim::registry().contains(&self.optimizer) {
            return Err(Error::config("optimizer", format!("unknown optimizer `{}`", self.optimizer)));
        }
        PromptPolicy::parse(&self.prompt_policy)?;
        if !matches!(self.pretrain_data.as_str(), "healthy" | "all") {
            return Err(Error::config("pretrain_data", format!("expected `healthy` or `all`, got `{}`", self.pretrain_data)));
        }
        self.backbone(2, 2).validate()
    }

    pub fn backbone(&self, v_text: usize, v_speech: usize) -> BackboneConfig {
        BackboneConfig {
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            v_text,
            v_speech,
            max_seq_len: self.max_seq_len,
            lora_rank: self.lora_rank,
            lora_scale: self.lora_scale,
            mlp_ratio: 4,
        }
    }

    /// Model configuration sized for `corpus`.
    pub fn model_config(&self, corpus: &Corpus) -> ModelConfig {
        let mut mc = ModelConfig::new(
            self.backbone(corpus.spec.v_text, corpus.spec.v_speech),
            corpus.n_prototypes(),
            seeds::derive(self.seed, "model"),
        );
        mc.condition_target = self.condition_target.clone();
        mc
    }

    pub fn group_lr(&self, group: ParamGroup) -> Option<f64> {
        match group {
            ParamGroup::Lora => Some(self.lr_lora),
            ParamGroup::Codebook => Some(self.lr_codebook),
            ParamGroup::Classifiers => Some(self.lr_classifiers),
            ParamGroup::Perceiver => Some(self.lr_perceiver),
            ParamGroup::Frozen | ParamGroup::Aux => None,
        }
    }

    /// Effective (alpha, beta) after the ablation switch.
    pub fn effective_weights(&self) -> (f64, f64) {
        if self.ablation_no_disent {
            (0.0, 0.0)
        } else {
            (self.alpha, self.beta)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PromptPolicy {
    /// The target utterance is its own prompt.
    SelfPrompt,
    /// Another utterance of the same speaker and condition.
    SameSpeaker,
    /// Another utterance in the same voice under any condition.
    CrossCondition,
}

impl PromptPolicy {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "self" => Ok(Self::SelfPrompt),
            "same_speaker" => Ok(Self::SameSpeaker),
            "cross_condition" => Ok(Self::CrossCondition),
            other => Err(Error::config(
                "prompt_policy",
                format!("unknown policy `{other}` (self, same_speaker, cross_condition)"),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupEntry {
    pub params: Vec<String>,
    pub lr: Option<f64>,
    pub trainable: bool,
}

/// Optimizer groups of a model, keyed by group name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterGroupManifest {
    pub groups: BTreeMap<String, GroupEntry>,
}

impl ParameterGroupManifest {
    /// Build from explicit assignments; a parameter listed twice is an
    /// integrity error.
    pub fn from_assignments(assignments: Vec<(String, Vec<String>, Option<f64>)>) -> Result<Self> {
        let mut seen: BTreeMap<String, String> = BTreeMap::new();
        let mut groups = BTreeMap::new();
        for (group, params, lr) in assignments {
            for p in &params {
                if let Some(prev) = seen.insert(p.clone(), group.clone()) {
                    return Err(Error::Integrity(format!("parameter `{p}` assigned to both `{prev}` and `{group}`")));
                }
            }
            let entry = groups.entry(group.clone()).or_insert(GroupEntry {
                params: Vec::new(),
                lr,
                trainable: lr.is_some(),
            });
            entry.params.extend(params);
        }
        Ok(Self { groups })
    }

    pub fn group_of(&self, param: &str) -> Option<&str> {
        self.groups
            .iter()
            .find(|(_, e)| e.params.iter().any(|p| p == param))
            .map(|(g, _)| g.as_str())
    }
}

pub fn build_param_groups(model: &ProtoDisentModel, config: &TrainConfig) -> Result<ParameterGroupManifest> {
    let assignments = ParamGroup::FINETUNE
        .iter()
        .map(|&g| {
            let names = model
                .store
                .iter()
                .filter(|(_, p)| p.group == g)
                .map(|(_, p)| p.name.clone())
                .collect();
            (g.name().to_string(), names, config.group_lr(g))
        })
        .collect();
    let manifest = ParameterGroupManifest::from_assignments(assignments)?;
    let covered: usize = manifest.groups.values().map(|e| e.params.len()).sum();
    if covered != model.store.len() {
        return Err(Error::Integrity(format!(
            "{} of {} parameters fall outside the fine-tuning groups",
            model.store.len() - covered,
            model.store.len()
        )));
    }
    Ok(manifest)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub l_tts: f64,
    pub l_dys: f64,
    pub l_adv: f64,
    pub total: f64,
}

pub const LOSS_CURVE_HEADER: &str = "step\tl_tts\tl_dys\tl_adv\ttotal";

impl StepRecord {
    pub fn to_line(&self) -> String {
        format!(
            "{}\t{:.8}\t{:.8}\t{:.8}\t{:.8}",
            self.step, self.l_tts, self.l_dys, self.l_adv, self.total
        )
    }
}

pub fn format_loss_curve(records: &[StepRecord]) -> String {
    let mut out = String::from(LOSS_CURVE_HEADER);
    out.push('\n');
    for r in records {
        let _ = writeln!(out, "{}", r.to_line());
    }
    out
}

/// Composition of one fine-tuning batch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchStats {
    pub original: usize,
    pub converted: usize,
    /// Converted samples whose timbre side differs from their condition side.
    pub cross_condition: usize,
}

/// Training pool: real utterances, converted pairs and the prompt index.
pub struct TrainingPool {
    pub originals: Vec<Utterance>,
    pub converted: Vec<Utterance>,
    prompts: BTreeMap<(String, usize), Vec<usize>>,
    all: Vec<Utterance>,
    policy: PromptPolicy,
}

impl TrainingPool {
    pub fn new(originals: Vec<Utterance>, converted: Vec<Utterance>, policy: PromptPolicy) -> Self {
        let all: Vec<Utterance> = originals.iter().chain(&converted).cloned().collect();
        let mut prompts: BTreeMap<(String, usize), Vec<usize>> = BTreeMap::new();
        for (i, u) in all.iter().enumerate() {
            prompts.entry((u.speaker_id.clone(), u.condition)).or_default().push(i);
        }
        Self {
            originals,
            converted,
            prompts,
            all,
            policy,
        }
    }

    /// Prompt speech for `target`: itself, or a different utterance in the
    /// same voice (and, for `SameSpeaker`, the same condition) when one
    /// exists.
    pub fn prompt_for<'a, R: Rng + ?Sized>(&'a self, target: &'a Utterance, rng: &mut R) -> &'a Utterance {
        let keys: Vec<&(String, usize)> = match self.policy {
            PromptPolicy::SelfPrompt => return target,
            PromptPolicy::SameSpeaker => self
                .prompts
                .keys()
                .filter(|(id, c)| *id == target.speaker_id && *c == target.condition)
                .collect(),
            PromptPolicy::CrossCondition => self.prompts.keys().filter(|(id, _)| *id == target.speaker_id).collect(),
        };
        let candidates: Vec<usize> = keys
            .into_iter()
            .flat_map(|k| self.prompts[k].iter().copied())
            .filter(|&i| self.all[i].utt_id != target.utt_id)
            .collect();
        if candidates.is_empty() {
            return target;
        }
        &self.all[candidates[rng.random_range(0..candidates.len())]]
    }

    pub fn example<R: Rng + ?Sized>(&self, u: &Utterance, rng: &mut R) -> Example {
        let prompt = self.prompt_for(u, rng);
        Example {
            text: u.content.clone(),
            prompt: prompt.speech.clone(),
            k: u.condition,
            prompt_k: prompt.condition,
            speech: u.speech.clone(),
        }
    }

    /// Batch for `step`, a pure function of `(seed, step)`.
    pub fn batch(&self, seed: u64, step: usize, size: usize, vc_fraction: f64) -> (Vec<Example>, BatchStats) {
        let mut rng = seeds::rng_n(seeds::derive(seed, "batch"), step as u64);
        let n_vc = if self.converted.is_empty() {
            0
        } else {
            (size as f64 * vc_fraction).round() as usize
        };
        let mut stats = BatchStats::default();
        let mut out = Vec::with_capacity(size);
        for i in 0..size {
            let u = if i < n_vc {
                stats.converted += 1;
                let u = &self.converted[rng.random_range(0..self.converted.len())];
                if u.source_utt_id.is_some() {
                    stats.cross_condition += 1;
                }
                u
            } else {
                stats.original += 1;
                &self.originals[rng.random_range(0..self.originals.len())]
            };
            out.push(self.example(u, &mut rng));
        }
        (out, stats)
    }
}

/// Trainable set during fine-tuning.
fn finetune_trainable(config: &TrainConfig) -> impl Fn(&Param) -> bool + Clone {
    let classifiers = !config.ablation_no_disent;
    move |p: &Param| match p.group {
        ParamGroup::Lora | ParamGroup::Codebook | ParamGroup::Perceiver => true,
        ParamGroup::Classifiers => classifiers,
        ParamGroup::Frozen | ParamGroup::Aux => false,
    }
}

/// One fine-tuning step on `batch`.
pub fn train_step(
    model: &mut ProtoDisentModel,
    optimizer: &mut dyn Optimizer,
    batch: &[Example],
    config: &TrainConfig,
    step: usize,
) -> Result<StepRecord> {
    let (alpha, beta) = config.effective_weights();
    let settings = LossSettings {
        alpha,
        beta,
        lambda_grl: config.lambda_grl,
        classifiers: !config.ablation_no_disent,
        use_codebook: true,
        use_adapters: true,
    };
    let trainable = finetune_trainable(config);
    let (record, grads) = {
        let mut tape = Tape::with_trainable(&model.store, trainable.clone());
        let g = model.loss_graph(&mut tape, batch, &settings)?;
        let l_dys = g.l_dys.map(|v| tape.scalar(v)).unwrap_or(0.0);
        let l_adv = g.l_adv.map(|v| tape.scalar(v)).unwrap_or(0.0);
        let record = StepRecord {
            step,
            l_tts: tape.scalar(g.l_tts),
            l_dys,
            l_adv,
            total: tape.scalar(g.total),
        };
        if !(record.total.is_finite() && record.l_tts.is_finite() && l_dys.is_finite() && l_adv.is_finite()) {
            return Err(Error::NonFinite { step });
        }
        (record, tape.backward(g.total))
    };
    if !grads.all_finite() {
        return Err(Error::NonFinite { step });
    }
    let lr = |p: &Param| if trainable(p) { config.group_lr(p.group) } else { None };
    optimizer.step(&mut model.store, &grads, &lr);
    model.stage = Stage::FineTuned;
    Ok(record)
}

pub struct TrainOutcome {
    pub curve: Vec<StepRecord>,
    pub batch_stats: Vec<BatchStats>,
}

/// Base pre-training with `z = s` on healthy speech (or on every real
/// utterance, per `pretrain_data`): the backbone, the conditioner and the
/// perceiver are trained, adapters and codebook are not used.
pub fn pretrain(model: &mut ProtoDisentModel, corpus: &Corpus, config: &TrainConfig) -> Result<Vec<StepRecord>> {
    config.validate()?;
    let data: Vec<Utterance> = match config.pretrain_data.as_str() {
        "all" => corpus.utterances.iter().filter(|u| !u.synthetic).cloned().collect(),
        _ => corpus.healthy().into_iter().cloned().collect(),
    };
    if data.is_empty() {
        return Err(Error::Precondition("pre-training needs real utterances".into()));
    }
    let pool = TrainingPool::new(data, Vec::new(), PromptPolicy::parse(&config.prompt_policy)?);
    let mut optimizer = optim::create(&config.optimizer, &KeyValues::default())?;
    let settings = LossSettings {
        alpha: 0.0,
        beta: 0.0,
        lambda_grl: 0.0,
        classifiers: false,
        use_codebook: false,
        use_adapters: false,
    };
    let trainable = |p: &Param| matches!(p.group, ParamGroup::Frozen | ParamGroup::Perceiver);
    let seed = seeds::derive(config.seed, "pretrain");
    let mut curve = Vec::with_capacity(config.pretrain_steps);
    for step in 0..config.pretrain_steps {
        let (batch, _) = pool.batch(seed, step, config.pretrain_batch_size, 0.0);
        let grads = {
            let mut tape = Tape::with_trainable(&model.store, trainable);
            let g = model.loss_graph(&mut tape, &batch, &settings)?;
            let l = tape.scalar(g.total);
            if !l.is_finite() {
                return Err(Error::NonFinite { step });
            }
            curve.push(StepRecord {
                step,
                l_tts: l,
                l_dys: 0.0,
                l_adv: 0.0,
                total: l,
            });
            tape.backward(g.total)
        };
        if !grads.all_finite() {
            return Err(Error::NonFinite { step });
        }
        let lr = |p: &Param| trainable(p).then_some(config.pretrain_lr);
        optimizer.step(&mut model.store, &grads, &lr);
    }
    model.stage = Stage::Pretrained;
    Ok(curve)
}

/// Adapter fine-tuning on real utterances plus converted pairs. The model
/// must have been pre-trained. `on_checkpoint` is called every
/// `checkpoint_every` steps (when non-zero) with the step count so far.
pub fn train(
    model: &mut ProtoDisentModel,
    corpus: &Corpus,
    config: &TrainConfig,
    on_checkpoint: &mut dyn FnMut(usize, &ProtoDisentModel) -> Result<()>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if model.stage == Stage::Untrained {
        return Err(Error::State("fine-tuning requires a pre-trained backbone".into()));
    }
    let pool = TrainingPool::new(
        corpus.utterances.clone(),
        make_vc_pairs(corpus)?,
        PromptPolicy::parse(&config.prompt_policy)?,
    );
    let mut optimizer = optim::create(&config.optimizer, &KeyValues::default())?;
    let mut curve = Vec::with_capacity(config.steps);
    let mut batch_stats = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let (batch, stats) = pool.batch(config.seed, step, config.batch_size, config.vc_fraction);
        curve.push(train_step(model, optimizer.as_mut(), &batch, config, step)?);
        batch_stats.push(stats);
        if config.checkpoint_every > 0 && (step + 1) % config.checkpoint_every == 0 {
            on_checkpoint(step + 1, model)?;
        }
    }
    model.stage = Stage::FineTuned;
    Ok(TrainOutcome { curve, batch_stats })
}

/// Fresh model, pre-training and fine-tuning in one call.
pub fn train_from_scratch(corpus: &Corpus, config: &TrainConfig) -> Result<(ProtoDisentModel, Vec<StepRecord>, TrainOutcome)> {
    let mut model = ProtoDisentModel::new(config.model_config(corpus))?;
    let pre = pretrain(&mut model, corpus, config)?;
    let outcome = train(&mut model, corpus, config, &mut |_, _| Ok(()))?;
    Ok((model, pre, outcome))
}

/// Ids of every parameter in `group`.
pub fn group_params(model: &ProtoDisentModel, group: ParamGroup) -> Vec<ParamId> {
    model.store.iter().filter(|(_, p)| p.group == group).map(|(id, _)| id).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, CorpusSpec};
    use crate::optim::Sgd;
    use crate::params::{Grads, Mat};

    fn tiny_corpus() -> Corpus {
        generate_corpus(&CorpusSpec {
            n_dysarthric_speakers: 2,
            n_healthy_speakers: 2,
            utterances_per_speaker: 4,
            v_text: 6,
            v_speech: 13,
            ..CorpusSpec::default()
        })
        .unwrap()
    }

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            d_model: 16,
            n_heads: 2,
            n_layers: 1,
            lora_rank: 4,
            lora_scale: 0.25,
            batch_size: 4,
            steps: 3,
            pretrain_steps: 2,
            pretrain_batch_size: 4,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn defaults_and_kv_round_trip() {
        let c = TrainConfig::default();
        assert_eq!(c.lr_lora, 5e-5);
        assert_eq!(c.lr_codebook, 2.5e-3);
        assert_eq!(c.lr_classifiers, 2.5e-4);
        assert_eq!(c.lr_perceiver, 2.5e-4);
        assert_eq!((c.alpha, c.beta, c.lambda_grl), (1.0, 1.0, 0.1));
        assert_eq!(c.lora_rank, 16);
        let back = TrainConfig::from_kv(&c.to_kv()).unwrap();
        assert_eq!(back, c);
        let text = c.to_kv().render();
        assert_eq!(TrainConfig::from_kv(&KeyValues::parse(&text).unwrap()).unwrap(), c);
        for key in TrainConfig::KEYS {
            assert!(c.to_kv().get_str(key).is_some(), "{key}");
        }
    }

    #[test]
    fn lora_scale_follows_rank_unless_given() {
        let mut kv = KeyValues::default();
        kv.set("lora_rank", 8);
        assert_eq!(TrainConfig::from_kv(&kv).unwrap().lora_scale, 0.125);
        kv.set("lora_scale", 1.0);
        assert_eq!(TrainConfig::from_kv(&kv).unwrap().lora_scale, 1.0);
    }

    #[test]
    fn invalid_configs() {
        let mut kv = KeyValues::default();
        kv.set("lr_lora", 0);
        assert!(matches!(TrainConfig::from_kv(&kv), Err(Error::Config { field, .. }) if field == "lr_lora"));
        let mut kv = KeyValues::default();
        kv.set("beta", -1);
        assert!(matches!(TrainConfig::from_kv(&kv), Err(Error::Config { field, .. }) if field == "beta"));
        let mut kv = KeyValues::default();
        kv.set("prompt_policy", "other");
        assert!(TrainConfig::from_kv(&kv).is_err());
    }

    #[test]
    fn five_groups_with_rates() {
        let corpus = tiny_corpus();
        let cfg = tiny_config();
        let model = ProtoDisentModel::new(cfg.model_config(&corpus)).unwrap();
        let m = build_param_groups(&model, &cfg).unwrap();
        let names: Vec<&str> = m.groups.keys().map(String::as_str).collect();
        assert_eq!(names, ["classifiers", "codebook", "frozen", "lora", "perceiver"]);
        assert_eq!(m.groups["codebook"].lr, Some(2.5e-3));
        assert_eq!(m.groups["codebook"].params, ["codebook"]);
        assert_eq!(m.groups["frozen"].lr, None);
        assert!(!m.groups["frozen"].trainable);
        assert_eq!(m.group_of("backbone.layer0.wq.weight"), Some("frozen"));
        assert_eq!(m.group_of("encoder.conditioner"), Some("frozen"));
        assert_eq!(m.group_of("backbone.layer0.wq.lora_b"), Some("lora"));
    }

    #[test]
    fn duplicate_assignment_is_integrity_error() {
        let res = ParameterGroupManifest::from_assignments(vec![
            ("lora".into(), vec!["w".into()], Some(1.0)),
            ("codebook".into(), vec!["w".into()], Some(1.0)),
        ]);
        assert!(matches!(res, Err(Error::Integrity(_))));
    }

    #[test]
    fn sgd_step_honors_group_rates() {
        let corpus = tiny_corpus();
        let cfg = tiny_config();
        let mut model = ProtoDisentModel::new(cfg.model_config(&corpus)).unwrap();
        let before = model.store.clone();
        let mut grads = Grads::new(model.store.len());
        for (id, p) in model.store.iter() {
            grads.accumulate(id, &Mat::ones(p.value.dim()));
        }
        let trainable = finetune_trainable(&cfg);
        let lr = |p: &Param| if trainable(p) { cfg.group_lr(p.group) } else { None };
        Sgd.step(&mut model.store, &grads, &lr);
        for (id, p) in model.store.iter() {
            let old = before.value(id);
            let expected = cfg.group_lr(p.group).unwrap_or(0.0);
            for (a, b) in p.value.iter().zip(old.iter()) {
                assert_eq!(*a, b - expected, "{}", p.name);
            }
        }
    }

    #[test]
    fn untrained_model_cannot_fine_tune() {
        let corpus = tiny_corpus();
        let cfg = tiny_config();
        let mut model = ProtoDisentModel::new(cfg.model_config(&corpus)).unwrap();
        assert!(matches!(train(&mut model, &corpus, &cfg, &mut |_, _| Ok(())), Err(Error::State(_))));
    }

    #[test]
    fn frozen_and_ablation_invariants() {
        let corpus = tiny_corpus();
        let cfg = tiny_config();
        let mut model = ProtoDisentModel::new(cfg.model_config(&corpus)).unwrap();
        pretrain(&mut model, &corpus, &cfg).unwrap();
        let frozen = model.store.group_checksum(ParamGroup::Frozen);
        let start = model.store.clone();

        let mut full = model.clone();
        let out = train(&mut full, &corpus, &cfg, &mut |_, _| Ok(())).unwrap();
        assert_eq!(full.store.group_checksum(ParamGroup::Frozen), frozen);
        for g in [ParamGroup::Lora, ParamGroup::Codebook, ParamGroup::Classifiers, ParamGroup::Perceiver] {
            assert_ne!(full.store.group_checksum(g), start.group_checksum(g), "{g}");
        }
        assert!(out.curve.iter().all(|r| r.l_dys > 0.0 && r.l_adv > 0.0));

        let ab_cfg = TrainConfig {
            ablation_no_disent: true,
            ..cfg.clone()
        };
        let mut ab = model.clone();
        let ab_out = train(&mut ab, &corpus, &ab_cfg, &mut |_, _| Ok(())).unwrap();
        assert_eq!(ab.store.group_checksum(ParamGroup::Classifiers), start.group_checksum(ParamGroup::Classifiers));
        assert_eq!(ab.store.group_checksum(ParamGroup::Frozen), frozen);
        for r in &ab_out.curve {
            assert_eq!((r.l_dys, r.l_adv), (0.0, 0.0));
            assert_eq!(r.total, r.l_tts);
        }
    }

    #[test]
    fn batches_mix_original_and_converted() {
        let corpus = tiny_corpus();
        let pool = TrainingPool::new(
            corpus.utterances.clone(),
            make_vc_pairs(&corpus).unwrap(),
            PromptPolicy::SameSpeaker,
        );
        let (b1, s1) = pool.batch(3, 7, 8, 0.5);
        let (b2, s2) = pool.batch(3, 7, 8, 0.5);
        assert_eq!(b1, b2);
        assert_eq!(s1, s2);
        assert_eq!((s1.original, s1.converted), (4, 4));
        assert_eq!(s1.cross_condition, 4);
    }

    #[test]
    fn same_speaker_prompt_is_another_utterance() {
        let corpus = tiny_corpus();
        let pool = TrainingPool::new(corpus.utterances.clone(), Vec::new(), PromptPolicy::SameSpeaker);
        let mut rng = seeds::rng(1, "t");
        for u in &corpus.utterances {
            let p = pool.prompt_for(u, &mut rng);
            assert_eq!((&p.speaker_id, p.condition), (&u.speaker_id, u.condition));
            assert_ne!(p.utt_id, u.utt_id);
        }
    }

    #[test]
    fn cross_condition_prompt_keeps_voice_and_labels_adversary() {
        let corpus = tiny_corpus();
        let converted = make_vc_pairs(&corpus).unwrap();
        let pool = TrainingPool::new(corpus.utterances.clone(), converted, PromptPolicy::CrossCondition);
        let mut rng = seeds::rng(2, "t");
        let mut other_condition = 0;
        for u in pool.originals.iter().chain(&pool.converted) {
            let p = pool.prompt_for(u, &mut rng);
            assert_eq!(p.speaker_id, u.speaker_id);
            assert_ne!(p.utt_id, u.utt_id);
            other_condition += usize::from(p.condition != u.condition);
            let ex = pool.example(u, &mut rng);
            assert_eq!(ex.k, u.condition);
        }
        assert!(other_condition > 0);
        let (batch, _) = pool.batch(5, 0, 32, 0.5);
        for ex in &batch {
            let src = pool.originals.iter().chain(&pool.converted).find(|v| v.speech == ex.prompt).unwrap();
            assert_eq!(ex.prompt_k, src.condition);
        }
    }

    #[test]
    fn loss_curve_format() {
        let text = format_loss_curve(&[StepRecord {
            step: 0,
            l_tts: 1.5,
            l_dys: 0.25,
            l_adv: 0.5,
            total: 2.25,
        }]);
        assert_eq!(text, "step\tl_tts\tl_dys\tl_adv\ttotal\n0\t1.50000000\t0.25000000\t0.50000000\t2.25000000\n");
    }
}
