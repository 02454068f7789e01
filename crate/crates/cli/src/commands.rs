use std::fs::File;
use std::io::{BufRead, BufWriter, IsTerminal, Write};
use std::path::{Path, PathBuf};

use affectlm::data::{
    corpus_stats, expand_split, format_plain_text, format_prefix, parse_corpus, truncate_prefix,
    Conversation, CorpusSplit, EmotionRegistry, ExampleRecord, FormattedExample, Mode, Role, SplitName, Turn,
};
use affectlm::decode::{generate_with_rng, GenerationSettings};
use affectlm::metrics::{evaluate_suite, generate_split, REFERENCE_TABLE};
use affectlm::model::{ModelConfig, TransformerModel};
use affectlm::rng::{generation_seed, rng_from_seed};
use affectlm::synthetic::{emotion_keyed, generic_corpus, SyntheticSpec};
use affectlm::tokenizer::{train_bpe_with, AlphabetChoice, Vocabulary};
use affectlm::train::{continue_training, write_history_csv, Stage, TrainConfig, TrainError, TrainState};
use anyhow::{anyhow, Context};

use crate::error::{CliError, CliResult};
use crate::manifest::{manifest_path, RunManifest};
use crate::settings::{list, opt, switch, Settings};
use crate::{
    ChatArgs, Common, EvaluateArgs, FinetuneArgs, FormatArgs, GenerateArgs, ModelArgs, OptimArgs, PretrainArgs,
    SamplingArgs, StatsArgs, SynthArgs, TrainTokenizerArgs,
};

const DEFAULT_VOCAB_SIZE: usize = 2000;

fn ensure_writable(path: &Path, force: bool) -> CliResult<()> {
    if path.exists() && !force {
        return Err(CliError::Refused(format!("refusing to overwrite {} (pass --force)", path.display())));
    }
    Ok(())
}

fn common_flags(c: &Common) -> Vec<(&'static str, Option<String>)> {
    vec![("force", switch(c.force))]
}

fn model_flags(m: &ModelArgs) -> Vec<(&'static str, Option<String>)> {
    vec![
        ("n_layers", opt(&m.n_layers)),
        ("n_heads", opt(&m.n_heads)),
        ("d_model", opt(&m.d_model)),
        ("d_ff", opt(&m.d_ff)),
        ("context_len", opt(&m.context_len)),
    ]
}

fn optim_flags(o: &OptimArgs) -> Vec<(&'static str, Option<String>)> {
    vec![
        ("learning_rate", opt(&o.learning_rate)),
        ("batch_size", opt(&o.batch_size)),
        ("max_steps", opt(&o.max_steps)),
        ("warmup_steps", opt(&o.warmup_steps)),
        ("grad_clip_norm", o.grad_clip_norm.clone()),
        ("eval_every", opt(&o.eval_every)),
        ("weight_decay", opt(&o.weight_decay)),
        ("seed", opt(&o.seed)),
    ]
}

fn sampling_flags(s: &SamplingArgs) -> Vec<(&'static str, Option<String>)> {
    vec![
        ("top_p", opt(&s.top_p)),
        ("temperature", opt(&s.temperature)),
        ("max_new_tokens", opt(&s.max_new_tokens)),
        ("seed", opt(&s.seed)),
    ]
}

fn mode_of(s: &Settings) -> CliResult<Mode> {
    match s.raw("mode") {
        None => Ok(Mode::EmoPrepend),
        Some(m) => m.parse().map_err(CliError::Usage),
    }
}

fn load_vocab(path: &Path) -> CliResult<Vocabulary> {
    Vocabulary::load(path).with_context(|| format!("loading vocabulary {}", path.display())).map_err(Into::into)
}

fn load_model(path: &Path, vocab: &Vocabulary) -> CliResult<TransformerModel> {
    let model = TransformerModel::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    check_vocab(model.config(), vocab)?;
    Ok(model)
}

fn check_vocab(cfg: &ModelConfig, vocab: &Vocabulary) -> CliResult<()> {
    if cfg.vocab_size != vocab.vocab_size() {
        return Err(CliError::Usage(format!(
            "checkpoint vocab_size {} does not match vocabulary size {}",
            cfg.vocab_size,
            vocab.vocab_size()
        )));
    }
    Ok(())
}

fn load_split(path: &Path) -> CliResult<CorpusSplit> {
    let name = SplitName::from_path(path).unwrap_or(SplitName::Train);
    let (split, report) = parse_corpus(path, name).with_context(|| format!("reading corpus {}", path.display()))?;
    for w in &report.warnings {
        log::warn!("{}: {w}", path.display());
    }
    if report.rows_skipped > 0 {
        eprintln!("{}: {} of {} rows skipped", path.display(), report.rows_skipped, report.rows_read);
    }
    Ok(split)
}

/// Dialogue split as the model sees it, honouring `no_situation`.
fn load_dialogue(path: &Path, s: &Settings) -> CliResult<CorpusSplit> {
    let split = load_split(path)?;
    Ok(if s.flag("no_situation")? { split.without_situations() } else { split })
}

fn read_lines(path: &Path) -> CliResult<Vec<String>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())
}

fn model_config(s: &Settings, vocab_size: usize) -> CliResult<ModelConfig> {
    let d = ModelConfig::desk(vocab_size);
    let cfg = ModelConfig {
        n_layers: s.get_or("n_layers", d.n_layers)?,
        n_heads: s.get_or("n_heads", d.n_heads)?,
        d_model: s.get_or("d_model", d.d_model)?,
        d_ff: s.get_or("d_ff", d.d_ff)?,
        context_len: s.get_or("context_len", d.context_len)?,
        vocab_size,
    };
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(cfg)
}

fn train_config(s: &Settings, stage: Stage, mode: Mode) -> CliResult<TrainConfig> {
    let mut cfg = TrainConfig { stage, mode, ..TrainConfig::default() };
    for key in ["learning_rate", "batch_size", "max_steps", "warmup_steps", "grad_clip_norm", "eval_every", "weight_decay", "seed"] {
        if let Some(v) = s.raw(key) {
            cfg.apply(key, v).map_err(CliError::Usage)?;
        }
    }
    if cfg.max_steps > 0 {
        cfg.validate()?;
    }
    Ok(cfg)
}

fn generation_settings(s: &Settings, vocab: &Vocabulary) -> CliResult<GenerationSettings> {
    let mut g = GenerationSettings::for_vocab(vocab, s.get_or("seed", 0)?);
    g.top_p = s.get_or("top_p", g.top_p)?;
    g.temperature = s.get_or("temperature", g.temperature)?;
    g.max_new_tokens = s.get_or("max_new_tokens", g.max_new_tokens)?;
    g.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(g)
}

fn write_jsonl<T: serde::Serialize>(path: Option<&Path>, records: &[T]) -> CliResult<()> {
    let mut w: Box<dyn Write> = match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(std::io::stdout().lock()),
    };
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn finish_manifest(manifest: &mut RunManifest, outputs: &[&Path]) -> CliResult<()> {
    for p in outputs {
        manifest.output(p);
    }
    if let Some(first) = outputs.first() {
        manifest.write(&manifest_path(first))?;
    }
    Ok(())
}

pub fn train_tokenizer(a: TrainTokenizerArgs) -> CliResult<()> {
    let mut flags = common_flags(&a.common);
    flags.extend([
        ("corpus", list(&a.corpus)),
        ("text", list(&a.text)),
        ("emotions", opt(&a.emotions.as_ref().map(|p| p.display().to_string()))),
        ("vocab_size", opt(&a.vocab_size)),
        ("alphabet", a.alphabet.clone()),
        ("out", opt(&a.out.as_ref().map(|p| p.display().to_string()))),
    ]);
    let s = Settings::resolve(a.common.config.as_deref(), flags)?;
    let out = s.require_path("out")?;
    ensure_writable(&out, s.flag("force")?)?;
    let vocab_size = s.get_or("vocab_size", DEFAULT_VOCAB_SIZE)?;
    let alphabet = match s.raw("alphabet").unwrap_or("full") {
        "full" => AlphabetChoice::AllBytes,
        "corpus" => AlphabetChoice::CorpusBytes,
        other => return Err(CliError::Usage(format!("alphabet must be full or corpus, got {other:?}"))),
    };
    let mut manifest = RunManifest::new("train-tokenizer", &s);

    let mut texts = Vec::new();
    let mut splits = Vec::new();
    for p in s.paths("corpus") {
        let split = load_split(&p)?;
        for c in &split.conversations {
            texts.push(c.situation.clone());
            texts.extend(c.turns.iter().map(|t| t.text.clone()));
        }
        splits.push(split);
        manifest.input(&p);
    }
    for p in s.paths("text") {
        texts.extend(read_lines(&p)?);
        manifest.input(&p);
    }
    let registry = match s.path("emotions") {
        Some(p) => {
            manifest.input(&p);
            Some(EmotionRegistry::load(&p).with_context(|| format!("reading {}", p.display()))?)
        }
        None if !splits.is_empty() => Some(EmotionRegistry::from_splits(&splits)?),
        None => None,
    };
    if let Some(reg) = &registry {
        for split in &splits {
            let unknown = reg.unknown_labels(split);
            if !unknown.is_empty() {
                return Err(CliError::Usage(format!("label not in registry: {}", unknown.join(", "))));
            }
        }
    }
    let specials = match &registry {
        Some(r) => r.special_tokens(),
        None => affectlm::data::STRUCTURAL_SPECIALS.iter().map(|s| s.to_string()).collect(),
    };
    let vocab = train_bpe_with(&texts, vocab_size, &specials, alphabet)?;
    vocab.save(&out)?;
    finish_manifest(&mut manifest, &[&out])?;
    println!(
        "vocab size {} ({} merges, {} specials) -> {}",
        vocab.vocab_size(),
        vocab.merges().len(),
        vocab.specials().len(),
        out.display()
    );
    Ok(())
}

pub fn stats(a: StatsArgs) -> CliResult<()> {
    println!("{:<28} {:<6} {:>13} {:>11} {:>10}", "file", "split", "conversations", "utterances", "avg_turns");
    for p in &a.corpus {
        let split = load_split(p)?;
        let st = corpus_stats(&split);
        let file = p.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default();
        println!(
            "{:<28} {:<6} {:>13} {:>11} {:>10.2}",
            file, split.name, st.num_conversations, st.num_utterances, st.avg_turns
        );
    }
    Ok(())
}

pub fn format(a: FormatArgs) -> CliResult<()> {
    let mut flags = common_flags(&a.common);
    flags.extend([
        ("corpus", opt(&a.corpus.as_ref().map(|p| p.display().to_string()))),
        ("vocab", opt(&a.vocab.as_ref().map(|p| p.display().to_string()))),
        ("mode", a.mode.clone()),
        ("no_situation", switch(a.no_situation)),
        ("context_len", opt(&a.context_len)),
        ("out", opt(&a.out.as_ref().map(|p| p.display().to_string()))),
    ]);
    let s = Settings::resolve(a.common.config.as_deref(), flags)?;
    let out = s.require_path("out")?;
    ensure_writable(&out, s.flag("force")?)?;
    let corpus = s.require_path("corpus")?;
    let vocab_path = s.require_path("vocab")?;
    let mode = mode_of(&s)?;
    let max_len = s.get_or("context_len", ModelConfig::desk(0).context_len)?;
    let vocab = load_vocab(&vocab_path)?;
    let split = load_dialogue(&corpus, &s)?;
    let (examples, skipped) = expand_split(&split, mode, &vocab, max_len)?;
    let records: Vec<ExampleRecord> = examples.iter().map(|(id, turn, ex)| ExampleRecord::new(ex, id, *turn)).collect();
    write_jsonl(Some(&out), &records)?;
    let mut manifest = RunManifest::new("format", &s);
    manifest.input(&corpus).input(&vocab_path);
    finish_manifest(&mut manifest, &[&out])?;
    println!("{} examples ({skipped} skipped: target longer than context) -> {}", records.len(), out.display());
    Ok(())
}

/// Outcome of the shared training path.
struct Trained {
    model: TransformerModel,
    state: TrainState,
    best: Option<TransformerModel>,
    history: Vec<affectlm::train::HistoryRow>,
}

fn run_or_divert(
    state: TrainState,
    train: &[FormattedExample],
    valid: &[FormattedExample],
    cfg: &TrainConfig,
    stop_at: usize,
    out: &Path,
) -> CliResult<Trained> {
    match continue_training(state, train, valid, cfg, stop_at) {
        Ok(o) => Ok(Trained {
            model: o.state.model.clone(),
            best: o.best.map(|(_, m)| m),
            history: o.history,
            state: o.state,
        }),
        Err(TrainError::Diverged { step, last_good }) => {
            let mut name = out.as_os_str().to_owned();
            name.push(".last_good");
            let path = PathBuf::from(name);
            last_good.save(&path)?;
            Err(CliError::Runtime(anyhow!(
                "training diverged at step {step}; last finite checkpoint saved to {}",
                path.display()
            )))
        }
        Err(e) => Err(e.into()),
    }
}

pub fn pretrain(a: PretrainArgs) -> CliResult<()> {
    let mut flags = common_flags(&a.common);
    flags.extend(model_flags(&a.model));
    flags.extend(optim_flags(&a.optim));
    flags.extend([
        ("text", list(&a.text)),
        ("valid_text", opt(&a.valid_text.as_ref().map(|p| p.display().to_string()))),
        ("vocab", opt(&a.vocab.as_ref().map(|p| p.display().to_string()))),
        ("init", opt(&a.init.as_ref().map(|p| p.display().to_string()))),
        ("out", opt(&a.out.as_ref().map(|p| p.display().to_string()))),
        ("history", opt(&a.history.as_ref().map(|p| p.display().to_string()))),
    ]);
    let s = Settings::resolve(a.common.config.as_deref(), flags)?;
    let force = s.flag("force")?;
    let out = s.require_path("out")?;
    ensure_writable(&out, force)?;
    let history_path = s.path("history");
    if let Some(h) = &history_path {
        ensure_writable(h, force)?;
    }
    let vocab_path = s.require_path("vocab")?;
    let vocab = load_vocab(&vocab_path)?;
    let cfg = train_config(&s, Stage::Pretrain, Mode::FineTuned)?;
    let mut manifest = RunManifest::new("pretrain", &s);
    manifest.input(&vocab_path);

    let model = match s.path("init") {
        Some(p) => {
            manifest.input(&p);
            load_model(&p, &vocab)?
        }
        None => TransformerModel::init(model_config(&s, vocab.vocab_size())?, cfg.seed)?,
    };
    let ctx = model.config().context_len;
    let to_examples = |path: &Path| -> CliResult<Vec<FormattedExample>> {
        read_lines(path)?.iter().map(|l| format_plain_text(l, &vocab, ctx).map_err(Into::into)).collect()
    };
    let mut train = Vec::new();
    for p in s.paths("text") {
        train.extend(to_examples(&p)?);
        manifest.input(&p);
    }
    let valid = match s.path("valid_text") {
        Some(p) => {
            manifest.input(&p);
            to_examples(&p)?
        }
        None => Vec::new(),
    };

    let (final_model, history) = if cfg.max_steps == 0 {
        (model, Vec::new())
    } else {
        let t = run_or_divert(TrainState::fresh(model), &train, &valid, &cfg, cfg.max_steps, &out)?;
        (t.model, t.history)
    };
    final_model.save(&out)?;
    let mut outputs = vec![out.as_path()];
    if let Some(h) = &history_path {
        write_history_csv(BufWriter::new(File::create(h)?), &history)?;
        outputs.push(h);
    }
    finish_manifest(&mut manifest, &outputs)?;
    report_history(&history);
    println!("checkpoint -> {}", out.display());
    Ok(())
}

fn report_history(history: &[affectlm::train::HistoryRow]) {
    if let Some(last) = history.last() {
        match last.valid_ppl {
            Some(p) => println!("step {} train loss {:.4} valid PPL {:.4}", last.step, last.train_loss, p),
            None => println!("step {} train loss {:.4}", last.step, last.train_loss),
        }
    }
}

pub fn finetune(a: FinetuneArgs) -> CliResult<()> {
    let mut flags = common_flags(&a.common);
    flags.extend(model_flags(&a.model));
    flags.extend(optim_flags(&a.optim));
    let p = |x: &Option<PathBuf>| opt(&x.as_ref().map(|p| p.display().to_string()));
    flags.extend([
        ("train", p(&a.train)),
        ("valid", p(&a.valid)),
        ("vocab", p(&a.vocab)),
        ("mode", a.mode.clone()),
        ("no_situation", switch(a.no_situation)),
        ("init", p(&a.init)),
        ("out", p(&a.out)),
        ("history", p(&a.history)),
        ("best_out", p(&a.best_out)),
        ("resume", p(&a.resume)),
        ("stop_after", opt(&a.stop_after)),
        ("state_out", p(&a.state_out)),
    ]);
    let s = Settings::resolve(a.common.config.as_deref(), flags)?;
    let force = s.flag("force")?;
    let out = s.require_path("out")?;
    let optional_outputs = ["history", "best_out", "state_out"].map(|k| s.path(k));
    for path in std::iter::once(Some(out.clone())).chain(optional_outputs.iter().cloned()).flatten() {
        ensure_writable(&path, force)?;
    }
    let [history_path, best_path, state_path] = optional_outputs;
    let mode = mode_of(&s)?;
    let cfg = train_config(&s, Stage::Finetune, mode)?;
    let vocab_path = s.require_path("vocab")?;
    let vocab = load_vocab(&vocab_path)?;
    let mut manifest = RunManifest::new("finetune", &s);
    manifest.input(&vocab_path);

    let state = if let Some(r) = s.path("resume") {
        manifest.input(&r);
        let st = TrainState::load(&r).with_context(|| format!("loading training state {}", r.display()))?;
        check_vocab(st.model.config(), &vocab)?;
        st
    } else {
        let model = match s.path("init") {
            Some(p) => {
                manifest.input(&p);
                load_model(&p, &vocab)?
            }
            None => TransformerModel::init(model_config(&s, vocab.vocab_size())?, cfg.seed)?,
        };
        TrainState::fresh(model)
    };
    let ctx = state.model.config().context_len;
    let train_path = s.require_path("train")?;
    manifest.input(&train_path);
    let (train, skipped) = expand_split(&load_dialogue(&train_path, &s)?, mode, &vocab, ctx)?;
    if skipped > 0 {
        eprintln!("{skipped} training targets longer than the context were skipped");
    }
    let train: Vec<FormattedExample> = train.into_iter().map(|(_, _, ex)| ex).collect();
    let valid: Vec<FormattedExample> = match s.path("valid") {
        Some(v) => {
            manifest.input(&v);
            expand_split(&load_dialogue(&v, &s)?, mode, &vocab, ctx)?.0.into_iter().map(|(_, _, ex)| ex).collect()
        }
        None => Vec::new(),
    };

    let stop_at = s.get::<usize>("stop_after")?.unwrap_or(cfg.max_steps);
    let trained = if cfg.max_steps == 0 {
        Trained { model: state.model.clone(), best: None, history: Vec::new(), state }
    } else {
        run_or_divert(state, &train, &valid, &cfg, stop_at, &out)?
    };
    trained.model.save(&out)?;
    let mut outputs = vec![out.as_path()];
    if let Some(h) = &history_path {
        write_history_csv(BufWriter::new(File::create(h)?), &trained.history)?;
        outputs.push(h);
    }
    if let Some(b) = &best_path {
        trained.best.as_ref().unwrap_or(&trained.model).save(b)?;
        outputs.push(b);
    }
    if let Some(st) = &state_path {
        trained.state.save(st).map_err(|e| CliError::Runtime(e.into()))?;
        outputs.push(st);
    }
    finish_manifest(&mut manifest, &outputs)?;
    report_history(&trained.history);
    println!("checkpoint -> {}", out.display());
    Ok(())
}

fn eval_inputs(
    s: &Settings,
    manifest: &mut RunManifest,
) -> CliResult<(Vocabulary, TransformerModel, CorpusSplit, Mode, GenerationSettings)> {
    let vocab_path = s.require_path("vocab")?;
    let ckpt = s.require_path("checkpoint")?;
    let corpus = s.require_path("corpus")?;
    manifest.input(&vocab_path).input(&ckpt).input(&corpus);
    let vocab = load_vocab(&vocab_path)?;
    let model = load_model(&ckpt, &vocab)?;
    let split = load_dialogue(&corpus, s)?;
    let mode = mode_of(s)?;
    let settings = generation_settings(s, &vocab)?;
    Ok((vocab, model, split, mode, settings))
}

pub fn generate(a: GenerateArgs) -> CliResult<()> {
    let mut flags = common_flags(&a.common);
    flags.extend(sampling_flags(&a.sampling));
    let p = |x: &Option<PathBuf>| opt(&x.as_ref().map(|p| p.display().to_string()));
    flags.extend([
        ("checkpoint", p(&a.checkpoint)),
        ("vocab", p(&a.vocab)),
        ("corpus", p(&a.corpus)),
        ("mode", a.mode.clone()),
        ("no_situation", switch(a.no_situation)),
        ("out", p(&a.out)),
    ]);
    let s = Settings::resolve(a.common.config.as_deref(), flags)?;
    let out = s.path("out");
    if let Some(o) = &out {
        ensure_writable(o, s.flag("force")?)?;
    }
    let mut manifest = RunManifest::new("generate", &s);
    let (vocab, model, split, mode, settings) = eval_inputs(&s, &mut manifest)?;
    let records = generate_split(&model, &vocab, &split, mode, &settings)?;
    write_jsonl(out.as_deref(), &records)?;
    if let Some(o) = &out {
        finish_manifest(&mut manifest, &[o])?;
        eprintln!("{} generations -> {}", records.len(), o.display());
    }
    Ok(())
}

pub fn evaluate(a: EvaluateArgs) -> CliResult<()> {
    let mut flags = common_flags(&a.common);
    flags.extend(sampling_flags(&a.sampling));
    let p = |x: &Option<PathBuf>| opt(&x.as_ref().map(|p| p.display().to_string()));
    flags.extend([
        ("checkpoint", p(&a.checkpoint)),
        ("vocab", p(&a.vocab)),
        ("corpus", p(&a.corpus)),
        ("mode", a.mode.clone()),
        ("no_situation", switch(a.no_situation)),
        ("out", p(&a.out)),
        ("examples_out", p(&a.examples_out)),
    ]);
    let s = Settings::resolve(a.common.config.as_deref(), flags)?;
    let force = s.flag("force")?;
    let out = s.path("out");
    let examples_out = s.path("examples_out");
    for o in out.iter().chain(&examples_out) {
        ensure_writable(o, force)?;
    }
    let mut manifest = RunManifest::new("evaluate", &s);
    let (vocab, model, split, mode, settings) = eval_inputs(&s, &mut manifest)?;
    let (report, records) = evaluate_suite(&model, &vocab, &split, mode, &settings)?;
    println!("{report}");
    println!();
    println!("reference rows (full-scale published numbers, not reproducible here):");
    for (name, ppl, bleu, ..) in REFERENCE_TABLE {
        println!("  {name:<32} PPL {ppl:>6.2}  BLEU {bleu:>5.2}");
    }
    let mut outputs: Vec<&Path> = Vec::new();
    if let Some(o) = &out {
        let mut json = serde_json::to_string_pretty(&report)?;
        json.push('\n');
        std::fs::write(o, json)?;
        outputs.push(o);
    }
    if let Some(e) = &examples_out {
        write_jsonl(Some(e), &records)?;
        outputs.push(e);
    }
    finish_manifest(&mut manifest, &outputs)?;
    Ok(())
}

/// Emotion labels declared in the vocabulary's special tokens.
fn vocab_labels(vocab: &Vocabulary) -> Vec<String> {
    vocab
        .specials()
        .iter()
        .filter_map(|s| s.strip_prefix("<|emo_").and_then(|r| r.strip_suffix("|>")).map(String::from))
        .collect()
}

pub fn chat(a: ChatArgs) -> CliResult<()> {
    let mut flags = sampling_flags(&a.sampling);
    let p = |x: &Option<PathBuf>| opt(&x.as_ref().map(|p| p.display().to_string()));
    flags.extend([
        ("checkpoint", p(&a.checkpoint)),
        ("vocab", p(&a.vocab)),
        ("mode", a.mode.clone()),
        ("no_situation", switch(a.no_situation)),
        ("emotion", a.emotion.clone()),
        ("situation", a.situation.clone()),
        ("show_prefix", switch(a.show_prefix)),
    ]);
    let s = Settings::resolve(a.config.as_deref(), flags)?;
    let vocab = load_vocab(&s.require_path("vocab")?)?;
    let model = load_model(&s.require_path("checkpoint")?, &vocab)?;
    let mode = mode_of(&s)?;
    let settings = generation_settings(&s, &vocab)?;
    let show_prefix = s.flag("show_prefix")?;
    let labels = vocab_labels(&vocab);
    let mut emotion = match s.raw("emotion") {
        Some(e) => e.to_string(),
        None => labels.first().cloned().unwrap_or_default(),
    };
    if mode == Mode::EmoPrepend && !labels.contains(&emotion) {
        return Err(CliError::Usage(unknown_label_message(&emotion, &labels)));
    }
    let mut conv = Conversation {
        conv_id: "chat".into(),
        emotion: emotion.clone(),
        situation: if s.flag("no_situation")? { String::new() } else { s.raw("situation").unwrap_or("").to_string() },
        turns: Vec::new(),
    };
    let mut rng = rng_from_seed(generation_seed(settings.seed, 0));
    let ctx = model.config().context_len;
    let interactive = std::io::stdin().is_terminal();
    let mut stdout = std::io::stdout().lock();
    let stdin = std::io::stdin();
    let mut lines = stdin.lock().lines();
    loop {
        if interactive {
            write!(stdout, "[{emotion}] > ")?;
            stdout.flush()?;
        }
        let Some(line) = lines.next() else { break };
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if line == "/quit" {
            break;
        }
        if let Some(rest) = line.strip_prefix("/emotion") {
            let label = rest.trim();
            if labels.iter().any(|l| l == label) {
                emotion = label.to_string();
                conv.emotion = emotion.clone();
                writeln!(stdout, "emotion set to {emotion}")?;
            } else {
                eprintln!("{}", unknown_label_message(label, &labels));
            }
            continue;
        }
        conv.turns.push(Turn { role: Role::Speaker, text: line.to_string() });
        conv.turns.push(Turn { role: Role::Listener, text: String::new() });
        let target = conv.turns.len() - 1;
        let prefix = truncate_prefix(&format_prefix(&conv, target, mode, &vocab)?, mode, ctx - 1);
        if show_prefix {
            writeln!(stdout, "prefix: {}", vocab.decode(&prefix)?)?;
        }
        let g = generate_with_rng(&model, &prefix, &settings, &vocab, &mut rng)?;
        let reply = g.text.trim().to_string();
        writeln!(stdout, "listener: {reply}")?;
        conv.turns[target].text = reply;
    }
    Ok(())
}

fn unknown_label_message(label: &str, labels: &[String]) -> String {
    format!(
        "unknown emotion label {label:?} ({} valid labels: {})",
        labels.len(),
        labels.join(", ")
    )
}

pub fn synth(a: SynthArgs) -> CliResult<()> {
    let mut flags = common_flags(&a.common);
    flags.extend([
        ("out", opt(&a.out.as_ref().map(|p| p.display().to_string()))),
        ("conversations", opt(&a.conversations)),
        ("generic_lines", opt(&a.generic_lines)),
        ("seed", opt(&a.seed)),
    ]);
    let s = Settings::resolve(a.common.config.as_deref(), flags)?;
    let out = s.require_path("out")?;
    let nonempty = out.is_dir() && std::fs::read_dir(&out)?.next().is_some();
    if nonempty && !s.flag("force")? {
        return Err(CliError::Refused(format!("refusing to write into non-empty {} (pass --force)", out.display())));
    }
    let seed = s.get_or("seed", 0)?;
    let spec = SyntheticSpec {
        n_conversations: s.get_or("conversations", SyntheticSpec::default().n_conversations)?,
        seed,
        ..SyntheticSpec::default()
    };
    let corpus = emotion_keyed(&spec);
    corpus.write_dir(&out)?;
    let generic = generic_corpus(&corpus, s.get_or("generic_lines", 4000)?, seed);
    let generic_path = out.join("generic.txt");
    std::fs::write(&generic_path, generic.join("\n") + "\n")?;
    let files: Vec<PathBuf> =
        ["train.csv", "valid.csv", "test.csv", "emotions.txt", "generic.txt"].iter().map(|f| out.join(f)).collect();
    let mut manifest = RunManifest::new("synth", &s);
    for f in &files {
        manifest.output(f);
    }
    manifest.write(&out.join("manifest.txt"))?;
    println!(
        "{} conversations ({} train / {} valid / {} test), {} generic lines -> {}",
        spec.n_conversations,
        corpus.train.conversations.len(),
        corpus.valid.conversations.len(),
        corpus.test.conversations.len(),
        generic.len(),
        out.display()
    );
    Ok(())
}
