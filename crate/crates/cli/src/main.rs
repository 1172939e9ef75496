use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, CommandFactory, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use protodisent::asr::{train_asr, AsrConfig};
use protodisent::backbone::decode_registry;
use protodisent::checkpoint::{write_atomic, AsrCheckpoint, ModelCheckpoint};
use protodisent::config::KeyValues;
use protodisent::corpus::{generate_corpus, read_corpus, write_records, Corpus, CorpusSpec, Severity, Utterance};
use protodisent::disent::{Example, ProtoDisentModel};
use protodisent::evaluation::{
    evaluate_models, run_substitution_experiment, run_sweep, EvalConfig, SubstitutionConfig, SweepConfig,
};
use protodisent::pipelines::{build_augmented_set, reconstruct_batch, AugmentationPlan, TextSource};
use protodisent::report::{self, render_report};
use protodisent::training::{format_loss_curve, pretrain, train, TrainConfig};
use protodisent::{seeds, Error};

const SEED_ENV: &str = "PROTODISENT_SEED";

#[derive(Parser)]
#[command(
    name = "protodisent",
    version,
    about = "Pathology-controllable toy speech synthesis and its evaluation harness",
    after_help = "Any configuration key can also be given as `--key value` (dashes and underscores are interchangeable)."
)]
struct Cli {
    /// Seed for every random stream. Overrides the config file and the
    /// PROTODISENT_SEED environment variable.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; nothing is written outside it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Pre-train and fine-tune the synthesis model.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train a toy recognizer.
    TrainAsr {
        #[arg(long)]
        corpus: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Synthesize one utterance.
    Synth {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Space-separated text token ids.
        #[arg(long, allow_hyphen_values = true)]
        text: String,
        /// Utterance whose speech is the voice prompt.
        #[arg(long)]
        prompt_utt: String,
        /// Condition: 0 healthy, 1..=n dysarthric prototypes.
        #[arg(long)]
        k: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Add synthetic dysarthric speech to a corpus.
    Augment {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, allow_hyphen_values = true)]
        ratio: f64,
        #[command(flatten)]
        common: Common,
    },
    /// Re-synthesize dysarthric utterances as healthy speech.
    Reconstruct {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Recognizer checkpoint supplying the text.
        #[arg(long, conflicts_with = "oracle_text", required_unless_present = "oracle_text")]
        asr: Option<PathBuf>,
        /// Use the ground-truth text instead of a recognizer.
        #[arg(long)]
        oracle_text: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Speaker similarity, content-matched baseline and articulation probe.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Checkpoint of a model trained without the classifiers.
        #[arg(long)]
        ablation: Option<PathBuf>,
        #[arg(long)]
        corpus: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Augmentation-ratio sweep with a toy recognizer.
    Sweep {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Real versus synthetic dysarthric training data for the recognizer.
    Substitution {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Serialize)]
struct FileDigest {
    path: String,
    sha256: String,
}

#[derive(Serialize)]
struct RunManifest {
    command: String,
    argv: Vec<String>,
    version: &'static str,
    config_path: Option<String>,
    overrides: String,
    config: serde_json::Value,
    seed: Option<u64>,
    inputs: Vec<FileDigest>,
    outputs: Vec<FileDigest>,
    started_at: String,
    finished_at: String,
}

fn digest(path: &Path) -> Result<FileDigest> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(FileDigest {
        path: path.display().to_string(),
        sha256: hex::encode(Sha256::digest(&bytes)),
    })
}

/// Files a command produced, written atomically into its output directory.
struct Outputs {
    dir: PathBuf,
    written: Vec<PathBuf>,
}

impl Outputs {
    fn new(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            written: Vec::new(),
        })
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.dir.join(name);
        write_atomic(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.written.push(path);
        Ok(())
    }

    fn records(&mut self, name: &str, utterances: &[Utterance]) -> Result<()> {
        let mut buf = Vec::new();
        write_records(&mut buf, utterances)?;
        self.write(name, &buf)
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut s = serde_json::to_string_pretty(value)?;
        s.push('\n');
        self.write(name, s.as_bytes())
    }
}

/// Separate `--key value` configuration overrides from the flags clap knows
/// about for the chosen subcommand.
fn split_overrides(argv: &[String]) -> (Vec<String>, Vec<String>) {
    let cmd = Cli::command();
    let mut known = Vec::new();
    let mut clap_args = Vec::new();
    let mut overrides = Vec::new();
    let mut it = argv.iter().cloned();
    clap_args.extend(it.next());
    let mut in_sub = false;
    while let Some(arg) = it.next() {
        if !in_sub {
            if let Some(sub) = cmd.find_subcommand(&arg) {
                in_sub = true;
                known = sub
                    .get_arguments()
                    .chain(cmd.get_arguments())
                    .filter_map(|a| a.get_long().map(|l| (l.to_string(), a.get_action().takes_values())))
                    .collect::<Vec<_>>();
                known.push(("help".into(), false));
            } else if arg == "--seed" {
                clap_args.push(arg);
                clap_args.extend(it.next());
                continue;
            }
            clap_args.push(arg);
            continue;
        }
        let Some(body) = arg.strip_prefix("--") else {
            clap_args.push(arg);
            continue;
        };
        let name = body.split_once('=').map_or(body, |(k, _)| k);
        match known.iter().find(|(l, _)| l == name) {
            Some((_, takes)) => {
                let takes = *takes && !body.contains('=');
                clap_args.push(arg);
                if takes {
                    clap_args.extend(it.next());
                }
            }
            None => {
                let inline = body.contains('=');
                overrides.push(arg);
                if !inline {
                    overrides.extend(it.next());
                }
            }
        }
    }
    (clap_args, overrides)
}

/// Parse `--key value` / `--key=value` pairs; dashes in keys become
/// underscores.
fn parse_overrides(raw: &[String]) -> Result<KeyValues> {
    let mut kv = KeyValues::default();
    let mut it = raw.iter();
    while let Some(flag) = it.next() {
        let Some(body) = flag.strip_prefix("--") else {
            bail!(Error::config(flag.clone(), "expected `--key value`"));
        };
        let (key, value) = match body.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it
                    .next()
                    .ok_or_else(|| Error::config(body.to_string(), "missing value"))?;
                (body.to_string(), v.clone())
            }
        };
        kv.set(key.replace('-', "_"), value);
    }
    Ok(kv)
}

struct Resolved {
    kv: KeyValues,
    seed: Option<u64>,
    /// Fully resolved configuration, defaults included, for the manifest.
    snapshot: serde_json::Value,
}

/// Config file, then `--key value` overrides, then the seed. The
/// environment seed only fills in when neither file nor flags set one.
fn resolve(common: &Common, overrides: &[String], cli_seed: Option<u64>, known: &[&[&str]]) -> Result<Resolved> {
    let mut kv = match &common.config {
        Some(p) => KeyValues::load(p).with_context(|| format!("reading config {}", p.display()))?,
        None => KeyValues::default(),
    };
    kv.merge(&parse_overrides(overrides)?);
    let env_seed = match std::env::var(SEED_ENV) {
        Ok(s) => Some(
            s.parse::<u64>()
                .map_err(|e| Error::config(SEED_ENV, format!("cannot parse `{s}`: {e}")))?,
        ),
        Err(_) => None,
    };
    if let Some(s) = cli_seed {
        kv.set("seed", s);
    } else if kv.get_str("seed").is_none() {
        if let Some(s) = env_seed {
            kv.set("seed", s);
        }
    }
    let all: Vec<&str> = known.iter().flat_map(|k| k.iter().copied()).chain(["seed"]).collect();
    let unknown = kv.unknown_keys(&all);
    if let Some(k) = unknown.first() {
        bail!(Error::config(k.to_string(), "unknown configuration key"));
    }
    let seed = kv.get::<u64>("seed")?;
    Ok(Resolved {
        snapshot: serde_json::Value::Null,
        kv,
        seed,
    })
}

fn load_corpus(path: &Path) -> Result<Corpus> {
    read_corpus(path).with_context(|| format!("loading corpus {}", path.display()))
}

fn load_model(path: &Path) -> Result<ModelCheckpoint> {
    ModelCheckpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn parse_tokens(text: &str) -> Result<Vec<usize>> {
    text.split_whitespace()
        .map(|t| {
            t.parse::<usize>()
                .map_err(|e| Error::Input(format!("text token `{t}`: {e}")).into())
        })
        .collect()
}

const DECODE_KEYS: &[&str] = &["decode", "temperature"];

fn strategy(kv: &KeyValues, default: &str) -> Result<Box<dyn protodisent::backbone::DecodeStrategy>> {
    let name: String = kv.get_or("decode", default.to_string())?;
    Ok(decode_registry().create(&name, kv)?)
}

fn decode_snapshot(kv: &KeyValues, default: &str) -> Result<serde_json::Value> {
    let name: String = kv.get_or("decode", default.to_string())?;
    let temperature: Option<f64> = kv.get("temperature")?;
    Ok(serde_json::json!({ "decode": name, "temperature": temperature, "seed": kv.get::<u64>("seed")? }))
}

fn run(cli: Cli, argv: Vec<String>, overrides: Vec<String>) -> Result<()> {
    let started_at = chrono::Utc::now().to_rfc3339();
    let (name, common) = match &cli.command {
        Command::GenData { common } => ("gen-data", common),
        Command::Train { common, .. } => ("train", common),
        Command::TrainAsr { common, .. } => ("train-asr", common),
        Command::Synth { common, .. } => ("synth", common),
        Command::Augment { common, .. } => ("augment", common),
        Command::Reconstruct { common, .. } => ("reconstruct", common),
        Command::Eval { common, .. } => ("eval", common),
        Command::Sweep { common, .. } => ("sweep", common),
        Command::Substitution { common, .. } => ("substitution", common),
    };
    let common = common.clone();
    let mut out = Outputs::new(&common.out)?;
    let mut inputs: Vec<PathBuf> = common.config.iter().cloned().collect();

    let resolved = match &cli.command {
        Command::GenData { .. } => {
            let mut r = resolve(&common, &overrides, cli.seed, &[CorpusSpec::known_keys()])?;
            let spec = CorpusSpec::from_kv(&r.kv)?;
            r.snapshot = serde_json::to_value(&spec)?;
            let corpus = generate_corpus(&spec)?;
            let path = out.dir.join("corpus.tsv");
            protodisent::corpus::write_corpus(&path, &corpus)?;
            out.written.push(path.clone());
            out.written.push(protodisent::corpus::meta_path(&path));
            r
        }
        Command::Train { corpus, .. } => {
            let mut r = resolve(&common, &overrides, cli.seed, &[TrainConfig::KEYS])?;
            let cfg = TrainConfig::from_kv(&r.kv)?;
            r.snapshot = serde_json::to_value(&cfg)?;
            inputs.push(corpus.clone());
            let corpus = load_corpus(corpus)?;
            let mut model = ProtoDisentModel::new(cfg.model_config(&corpus))?;
            let pre = pretrain(&mut model, &corpus, &cfg)?;
            out.write("pretrain_curve.tsv", format_loss_curve(&pre).as_bytes())?;
            let dir = out.dir.clone();
            let mut saved = Vec::new();
            let outcome = train(&mut model, &corpus, &cfg, &mut |step, m| {
                let path = dir.join("checkpoints").join(format!("step_{step:06}.json"));
                ModelCheckpoint::new(m.clone(), cfg.clone())?.save(&path)?;
                saved.push(path);
                Ok(())
            })?;
            out.written.extend(saved);
            out.write("loss_curve.tsv", format_loss_curve(&outcome.curve).as_bytes())?;
            let path = out.dir.join("model.json");
            ModelCheckpoint::new(model, cfg.clone())?.save(&path)?;
            out.written.push(path);
            r
        }
        Command::TrainAsr { corpus, .. } => {
            let mut r = resolve(&common, &overrides, cli.seed, &[AsrConfig::KEYS, &["exclude_speakers"]])?;
            let cfg = AsrConfig::from_kv(&r.kv)?;
            r.snapshot = serde_json::to_value(&cfg)?;
            inputs.push(corpus.clone());
            let corpus = load_corpus(corpus)?;
            let exclude: Vec<String> = r
                .kv
                .get_str("exclude_speakers")
                .map(|s| s.split(',').map(|x| x.trim().to_string()).collect())
                .unwrap_or_default();
            let data: Vec<Utterance> = corpus
                .utterances
                .iter()
                .filter(|u| !exclude.contains(&u.speaker_id))
                .cloned()
                .collect();
            let (asr, loss) = train_asr(&data, corpus.spec.v_text, corpus.spec.v_speech, &cfg, r.seed.unwrap_or(17))?;
            let path = out.dir.join("asr.json");
            AsrCheckpoint::save(&asr, &path)?;
            out.written.push(path);
            out.write("final_loss.txt", format!("{loss:.6}\n").as_bytes())?;
            r
        }
        Command::Synth {
            checkpoint,
            corpus,
            text,
            prompt_utt,
            k,
            ..
        } => {
            let mut r = resolve(&common, &overrides, cli.seed, &[DECODE_KEYS])?;
            r.snapshot = decode_snapshot(&r.kv, "greedy")?;
            inputs.extend([checkpoint.clone(), corpus.clone()]);
            let ck = load_model(checkpoint)?;
            let corpus = load_corpus(corpus)?;
            let n = ck.model.n_prototypes();
            if *k > n {
                bail!(Error::Range {
                    what: "condition k",
                    index: *k,
                    max: n
                });
            }
            let text = parse_tokens(text)?;
            if let Some(&t) = text.iter().find(|&&t| t >= corpus.spec.v_text) {
                bail!(Error::Range {
                    what: "text token",
                    index: t,
                    max: corpus.spec.v_text - 1
                });
            }
            let prompt = corpus
                .utterances
                .iter()
                .find(|u| &u.utt_id == prompt_utt)
                .ok_or_else(|| Error::Lookup {
                    what: "utterance",
                    name: prompt_utt.clone(),
                })?;
            let utt_id = format!("synth~{}~k{k}", prompt.utt_id);
            let seed = seeds::derive(r.seed.unwrap_or(17), &utt_id);
            let speech = ck.model.synthesize(
                &[Example {
                    text: text.clone(),
                    prompt: prompt.speech.clone(),
                    k: *k,
                    prompt_k: prompt.condition,
                    speech: Vec::new(),
                }],
                strategy(&r.kv, "greedy")?.as_ref(),
                &[seed],
            )?;
            let severity = if *k == 0 { Severity::Healthy } else { corpus.pathology(*k)?.severity };
            out.records(
                "synth.tsv",
                &[Utterance {
                    utt_id,
                    speaker_id: prompt.speaker_id.clone(),
                    content: text,
                    speech: speech.into_iter().next().unwrap_or_default(),
                    condition: *k,
                    severity,
                    synthetic: true,
                    source_utt_id: Some(prompt.utt_id.clone()),
                }],
            )?;
            r
        }
        Command::Augment {
            checkpoint, corpus, ratio, ..
        } => {
            let mut r = resolve(&common, &overrides, cli.seed, &[DECODE_KEYS, &["sampler", "exclude"]])?;
            inputs.extend([checkpoint.clone(), corpus.clone()]);
            let ck = load_model(checkpoint)?;
            let corpus = load_corpus(corpus)?;
            let d = AugmentationPlan::default();
            let plan = AugmentationPlan {
                ratio: *ratio,
                sampler: r.kv.get_or("sampler", d.sampler)?,
                decode: r.kv.get_or("decode", d.decode)?,
                temperature: r.kv.get_or("temperature", d.temperature)?,
                seed: r.seed.unwrap_or(d.seed),
                exclude: match r.kv.get_str("exclude") {
                    Some(s) => s
                        .split(',')
                        .map(|x| x.trim().parse::<usize>().map_err(|e| Error::config("exclude", e.to_string())))
                        .collect::<Result<_, _>>()?,
                    None => Vec::new(),
                },
            };
            r.snapshot = serde_json::to_value(&plan)?;
            let augmented = build_augmented_set(&corpus, &plan, &ck.model)?;
            let path = out.dir.join("corpus.tsv");
            protodisent::corpus::write_corpus(&path, &augmented)?;
            out.written.push(path.clone());
            out.written.push(protodisent::corpus::meta_path(&path));
            r
        }
        Command::Reconstruct {
            checkpoint,
            corpus,
            asr,
            oracle_text,
            ..
        } => {
            let mut r = resolve(&common, &overrides, cli.seed, &[DECODE_KEYS, &["speakers"]])?;
            r.snapshot = decode_snapshot(&r.kv, "greedy")?;
            inputs.extend([checkpoint.clone(), corpus.clone()]);
            let ck = load_model(checkpoint)?;
            let corpus = load_corpus(corpus)?;
            let recognizer = match asr {
                Some(p) if !oracle_text => {
                    inputs.push(p.clone());
                    Some(AsrCheckpoint::load(p).with_context(|| format!("loading recognizer {}", p.display()))?)
                }
                _ => None,
            };
            let speakers: Vec<String> = r
                .kv
                .get_str("speakers")
                .map(|s| s.split(',').map(|x| x.trim().to_string()).collect())
                .unwrap_or_default();
            let targets: Vec<&Utterance> = corpus
                .dysarthric()
                .into_iter()
                .filter(|u| speakers.is_empty() || speakers.contains(&u.speaker_id))
                .collect();
            let source = match &recognizer {
                Some(a) => TextSource::Asr(a),
                None => TextSource::Oracle,
            };
            let results = reconstruct_batch(
                &ck.model,
                source,
                &targets,
                strategy(&r.kv, "greedy")?.as_ref(),
                r.seed.unwrap_or(17),
            )?;
            let utts: Vec<Utterance> = results
                .iter()
                .zip(&targets)
                .map(|(res, u)| Utterance {
                    utt_id: format!("{}~rec", u.utt_id),
                    speaker_id: u.speaker_id.clone(),
                    content: res.recognized_text.clone(),
                    speech: res.reconstructed_speech.clone(),
                    condition: 0,
                    severity: Severity::Healthy,
                    synthetic: true,
                    source_utt_id: Some(u.utt_id.clone()),
                })
                .collect();
            out.records("reconstructions.tsv", &utts)?;
            out.json("reconstructions.json", &results)?;
            r
        }
        Command::Eval {
            checkpoint,
            ablation,
            corpus,
            ..
        } => {
            let mut r = resolve(&common, &overrides, cli.seed, &[EvalConfig::KEYS])?;
            let cfg = EvalConfig::from_kv(&r.kv)?;
            r.snapshot = serde_json::to_value(&cfg)?;
            inputs.extend([checkpoint.clone(), corpus.clone()]);
            let ours = load_model(checkpoint)?;
            let abl = match ablation {
                Some(p) => {
                    inputs.push(p.clone());
                    Some(load_model(p)?)
                }
                None => None,
            };
            let corpus = load_corpus(corpus)?;
            let mut models: Vec<(&str, &ProtoDisentModel)> = Vec::new();
            if let Some(a) = &abl {
                models.push(("w/o Disent.", &a.model));
            }
            models.push(("Ours", &ours.model));
            let rep = evaluate_models(&corpus, &models, &cfg)?;
            let mut probe = report::Table::new("Articulation probe accuracy on speaker embeddings", "Method", vec!["Accuracy".into()]);
            for (m, p) in &rep.probes {
                probe.push(m.clone(), vec![Some(p.accuracy)]);
            }
            let (fixed, tsv) = render_report(&[report::similarity_table(&rep.similarity), probe]);
            out.write("eval.txt", fixed.as_bytes())?;
            out.write("eval.tsv", tsv.as_bytes())?;
            out.json("eval.json", &rep)?;
            r
        }
        Command::Sweep { checkpoint, corpus, .. } => {
            let mut r = resolve(&common, &overrides, cli.seed, &[SweepConfig::KEYS, AsrConfig::KEYS, &["label"]])?;
            let cfg = SweepConfig::from_kv(&r.kv)?;
            r.snapshot = serde_json::to_value(&cfg)?;
            let label: String = r.kv.get_or("label", "ASR".to_string())?;
            inputs.extend([checkpoint.clone(), corpus.clone()]);
            let ck = load_model(checkpoint)?;
            let corpus = load_corpus(corpus)?;
            let result = run_sweep(&corpus, &ck.model, &cfg)?;
            let (fixed, tsv) = render_report(&[report::sweep_table(&result, &label)]);
            out.write("sweep.txt", fixed.as_bytes())?;
            out.write("sweep.tsv", tsv.as_bytes())?;
            out.write("sweep_cells.tsv", report::sweep_records(&result).as_bytes())?;
            out.json("sweep.json", &result)?;
            r
        }
        Command::Substitution { checkpoint, corpus, .. } => {
            let mut r = resolve(&common, &overrides, cli.seed, &[SubstitutionConfig::KEYS, AsrConfig::KEYS])?;
            let cfg = SubstitutionConfig::from_kv(&r.kv)?;
            r.snapshot = serde_json::to_value(&cfg)?;
            inputs.extend([checkpoint.clone(), corpus.clone()]);
            let ck = load_model(checkpoint)?;
            let corpus = load_corpus(corpus)?;
            let result = run_substitution_experiment(&corpus, &ck.model, &cfg)?;
            let (fixed, tsv) = render_report(&report::substitution_tables(&result));
            out.write("substitution.txt", fixed.as_bytes())?;
            out.write("substitution.tsv", tsv.as_bytes())?;
            out.write("substitution_cells.tsv", report::substitution_records(&result).as_bytes())?;
            out.json("substitution.json", &result)?;
            r
        }
    };

    let manifest = RunManifest {
        command: name.to_string(),
        argv,
        version: env!("CARGO_PKG_VERSION"),
        config_path: common.config.as_ref().map(|p| p.display().to_string()),
        overrides: resolved.kv.render(),
        config: resolved.snapshot,
        seed: resolved.seed,
        inputs: inputs.iter().map(|p| digest(p)).collect::<Result<_>>()?,
        outputs: out.written.iter().map(|p| digest(p)).collect::<Result<_>>()?,
        started_at,
        finished_at: chrono::Utc::now().to_rfc3339(),
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    write_atomic(&out.dir.join("manifest.json"), text.as_bytes())?;
    Ok(())
}

/// Exit status by failure class.
fn exit_code(err: &anyhow::Error) -> u8 {
    fn classify(e: &Error) -> u8 {
        match e {
            Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => 3,
            Error::Io(_) => 10,
            Error::Parse { .. } | Error::Json(_) => 4,
            Error::Config { .. } | Error::Range { .. } | Error::Lookup { .. } | Error::Input(_) | Error::Length { .. } => 5,
            Error::State(_) => 6,
            Error::Integrity(_) => 7,
            Error::Precondition(_) | Error::Reconstruction { .. } => 8,
            Error::NonFinite { .. } | Error::Numeric(_) => 9,
            Error::Cell { source, .. } => classify(source),
            Error::Shape(_) => 1,
        }
    }
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return classify(e);
        }
        if let Some(io) = cause.downcast_ref::<std::io::Error>() {
            return if io.kind() == std::io::ErrorKind::NotFound { 3 } else { 10 };
        }
        if cause.downcast_ref::<serde_json::Error>().is_some() {
            return 4;
        }
    }
    1
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let (clap_args, overrides) = split_overrides(&argv);
    let cli = Cli::parse_from(clap_args);
    match run(cli, argv, overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg: Vec<String> = e.chain().map(|c| c.to_string()).collect();
            eprintln!("error: {}", msg.join(": "));
            ExitCode::from(exit_code(&e))
        }
    }
}
