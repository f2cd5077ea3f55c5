use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use mgcot::autodiff::Graph;
use mgcot::dataio::{
    load_interactions, sessionize_and_filter, synth_generate, temporal_split, ColumnSchema, Corpus,
    SplitRule, SynthConfig, TimeFormat,
};
use mgcot::evaluation::{
    evaluate_markov, evaluate_model, evaluate_popularity, format_ablation, format_reports, from_jsonl,
    to_jsonl, MarkovBaseline, MetricsReport, PopularityBaseline,
};
use mgcot::graphs::{CooccurrenceGraph, GlobalItemGraph};
use mgcot::model::{attention_records, Ablation};
use mgcot::trainer::{self, Checkpoint, TrainConfig, BEST_CHECKPOINT, CONFIG_FILE, LAST_CHECKPOINT};

use crate::args::{
    AblateArgs, BuildGraphsArgs, ConfigArgs, EvaluateArgs, PreprocessArgs, ReportArgs, SchemaPreset,
    SynthArgs, SynthOptions, TimeFormatArg, TrainArgs,
};
use crate::{CmdResult, Failure};

pub const METRICS_JSONL: &str = "metrics.jsonl";
pub const METRICS_TXT: &str = "metrics.txt";
pub const ATTENTION_JSONL: &str = "attention.jsonl";
pub const ABLATION_TXT: &str = "ablation.txt";
pub const ABLATION_JSONL: &str = "ablation.jsonl";
const SECONDS_PER_DAY: f64 = 86_400.0;

fn write(path: &Path, body: impl AsRef<[u8]>) -> CmdResult {
    fs::write(path, body).map_err(|e| Failure::io(format!("cannot write {}: {e}", path.display())))
}

fn read(path: &Path) -> CmdResult<String> {
    fs::read_to_string(path).map_err(|e| Failure::io(format!("cannot read {}: {e}", path.display())))
}

/// Creates `dir`, refusing to reuse a non-empty one unless `force` is set.
fn prepare_dir(dir: &Path, force: bool) -> CmdResult {
    let occupied = dir.exists()
        && fs::read_dir(dir)
            .map(|mut d| d.next().is_some())
            .unwrap_or(true);
    if occupied {
        if !force {
            return Err(Failure::io(format!(
                "{} already exists and is not empty; pass --force to overwrite",
                dir.display()
            )));
        }
        fs::remove_dir_all(dir).map_err(|e| Failure::io(format!("cannot clear {}: {e}", dir.display())))?;
    }
    fs::create_dir_all(dir).map_err(|e| Failure::io(format!("cannot create {}: {e}", dir.display())))
}

fn load_corpus(dir: &Path) -> CmdResult<Corpus> {
    Ok(Corpus::load(dir)?)
}

fn stats_table(name: &str, corpus: &Corpus) -> String {
    let s = &corpus.stats;
    format!(
        "{:<14}{:>12}{:>12}{:>10}{:>10}\n{:<14}{:>12}{:>12}{:>10}{:>10.2}\n",
        "dataset", "#train", "#test", "#items", "avg.len", name, s.train_examples, s.test_examples, s.items, s.avg_len
    )
}

fn synth_config(o: &SynthOptions) -> SynthConfig {
    SynthConfig {
        n_items: o.items,
        n_sessions: o.sessions,
        concentration: o.concentration,
        seed: o.synth_seed,
        test_fraction: o.synth_test_fraction,
        ..SynthConfig::default()
    }
}

fn save_synthetic(o: &SynthOptions, out: &Path, force: bool) -> CmdResult {
    prepare_dir(out, force)?;
    let synth = synth_generate(&synth_config(o))?;
    synth.corpus.save(out)?;
    print!("{}", stats_table("synthetic", &synth.corpus));
    Ok(())
}

pub fn synth(a: SynthArgs) -> CmdResult {
    save_synthetic(&a.synth, &a.out, a.force)
}

pub fn preprocess(a: PreprocessArgs) -> CmdResult {
    if a.synthetic {
        return save_synthetic(&a.synth, &a.out, a.force);
    }
    let input = a.input.as_ref().expect("clap requires --input");
    if !input.exists() {
        return Err(Failure::io(format!("input {} does not exist", input.display())));
    }
    let mut schema = match a.schema {
        SchemaPreset::Generic => ColumnSchema::default(),
        SchemaPreset::Diginetica => ColumnSchema::diginetica(),
    };
    schema.delimiter = a.delimiter.unwrap_or(schema.delimiter);
    schema.session_col = a.session_col.unwrap_or(schema.session_col);
    schema.item_col = a.item_col.unwrap_or(schema.item_col);
    schema.time_col = a.time_col.unwrap_or(schema.time_col);
    schema.has_header |= a.header;
    if let Some(f) = a.time_format {
        schema.time_format = match f {
            TimeFormatArg::Epoch => TimeFormat::Epoch,
            TimeFormatArg::EpochMillis => TimeFormat::EpochMillis,
            TimeFormatArg::Date => TimeFormat::Date,
        };
    }

    let loaded = load_interactions(input, &schema)?;
    info!("{} interactions read, {} malformed lines", loaded.interactions.len(), loaded.malformed);
    let (sessions, vocab) = sessionize_and_filter(&loaded.interactions, a.min_session_len, a.min_item_freq)?;
    let rule = match (a.test_days, a.test_fraction, a.boundary) {
        (_, _, Some(b)) => SplitRule::Boundary(b),
        (_, Some(f), _) => SplitRule::TestFraction(f),
        (days, None, None) => {
            let days = days.unwrap_or(match a.schema {
                SchemaPreset::Diginetica => 7.0,
                SchemaPreset::Generic => -1.0,
            });
            if days < 0.0 {
                SplitRule::TestFraction(0.1)
            } else {
                let last = sessions.iter().map(|s| s.time).max().unwrap_or(0);
                SplitRule::Boundary(last - (days * SECONDS_PER_DAY).round() as i64)
            }
        }
    };
    let corpus = temporal_split(sessions, &vocab, rule)?;
    prepare_dir(&a.out, a.force)?;
    corpus.save(&a.out)?;
    let name = input.file_stem().map_or("corpus".into(), |s| s.to_string_lossy().into_owned());
    print!("{}", stats_table(&name, &corpus));
    Ok(())
}

pub fn build_graphs(a: BuildGraphsArgs) -> CmdResult {
    if a.out.exists() && !a.force {
        return Err(Failure::io(format!(
            "{} already exists; pass --force to overwrite",
            a.out.display()
        )));
    }
    let corpus = load_corpus(&a.corpus)?;
    let co = CooccurrenceGraph::build(
        corpus.train_sessions.iter().map(|s| s.items.as_slice()),
        corpus.item_count() + 1,
        a.window,
        a.directed,
    );
    let graph = GlobalItemGraph::from_cooccurrence(&co, (a.k_sp > 0).then_some(a.k_sp));
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Failure::io(format!("cannot create {}: {e}", parent.display())))?;
    }
    graph.save(&a.out)?;
    println!(
        "global graph: {} nodes, {} co-occurrence edges, {} shortest-path edges",
        graph.num_nodes(),
        co.num_edges(),
        graph.num_edges()
    );
    Ok(())
}

/// The training config from a base text, the config file, and flag
/// overrides. A key set twice, or settings that contradict each other, are
/// configuration errors.
pub fn resolve_config(args: &ConfigArgs, ablate: Option<&str>, base: Option<&str>) -> CmdResult<TrainConfig> {
    let parse = |text: &str, what: &str| -> CmdResult<toml::Table> {
        text.parse::<toml::Table>()
            .map_err(|e| Failure::config(format!("{what}: {}", e.message())))
    };
    let mut table = match base {
        Some(text) => parse(text, "run config")?,
        None => toml::Table::new(),
    };
    if let Some(path) = &args.config {
        for (k, v) in parse(&read(path)?, &path.display().to_string())? {
            table.insert(k, v);
        }
    }
    if let (Some(d), Some(toml::Value::String(f))) = (&args.dataset, table.get("dataset")) {
        if d != f {
            return Err(Failure::config(format!(
                "--dataset {d} conflicts with dataset = {f:?} in the config"
            )));
        }
    }

    let mut overrides = toml::Table::new();
    let mut set = |key: &str, value: toml::Value| -> CmdResult {
        if overrides.insert(key.to_string(), value).is_some() {
            return Err(Failure::config(format!("{key} is given more than once")));
        }
        Ok(())
    };
    let int = |v: usize| toml::Value::Integer(v as i64);
    if let Some(v) = args.epochs {
        set("epochs", int(v))?;
    }
    if let Some(v) = args.seed {
        set("seed", toml::Value::Integer(v as i64))?;
    }
    if let Some(v) = args.d {
        set("d", int(v))?;
    }
    if let Some(v) = args.heads {
        set("heads", int(v))?;
    }
    if let Some(v) = args.top_k {
        set("top_k", int(v))?;
    }
    if let Some(v) = args.beta {
        set("beta", toml::Value::Float(v))?;
    }
    if let Some(v) = args.batch_size {
        set("batch_size", int(v))?;
    }
    if let Some(v) = args.learning_rate {
        set("learning_rate", toml::Value::Float(v))?;
    }
    if args.no_clip {
        set("clip_norm", toml::Value::Float(0.0))?;
    }
    if let Some(v) = ablate {
        set("ablation", toml::Value::String(v.to_string()))?;
    }
    for kv in &args.set {
        let parsed = parse(kv, &format!("--set {kv}"))?;
        for (k, v) in parsed {
            set(&k, v)?;
        }
    }
    let explicit_beta = overrides.get("beta").and_then(|v| v.as_float().or(v.as_integer().map(|i| i as f64)));
    for (k, v) in overrides {
        table.insert(k, v);
    }

    let text = toml::to_string(&table).map_err(|e| Failure::config(e.to_string()))?;
    let cfg = TrainConfig::from_toml_str(&text, args.dataset.as_deref())?;
    let ablation = cfg.ablation()?;
    if let Some(b) = explicit_beta.filter(|&b| ablation.no_contrastive && b > 0.0) {
        return Err(Failure::config(format!(
            "beta = {b} conflicts with the no-contrastive ablation"
        )));
    }
    Ok(cfg)
}

pub fn train(a: TrainArgs) -> CmdResult {
    let corpus = load_corpus(&a.corpus)?;
    let outcome = if a.resume {
        let base = read(&a.out.join(CONFIG_FILE))?;
        let cfg = resolve_config(&a.config, a.ablate.as_deref(), Some(&base))?;
        let checkpoint = Checkpoint::load(&a.out.join(LAST_CHECKPOINT))?;
        info!("resuming after epoch {}", checkpoint.progress.epoch);
        trainer::resume(checkpoint, &corpus, &cfg, Some(&a.out))?
    } else {
        let cfg = resolve_config(&a.config, a.ablate.as_deref(), None)?;
        prepare_dir(&a.out, a.force)?;
        trainer::train(&corpus, &cfg, Some(&a.out))?
    };
    let p = &outcome.checkpoint.progress;
    println!(
        "trained {} epochs (ablation {}); best validation M@20 {} at epoch {}",
        p.epoch,
        outcome.log().header.ablation,
        p.best_metric.map_or("-".into(), |m| format!("{m:.2}")),
        p.best_epoch.map_or("-".into(), |e| e.to_string()),
    );
    Ok(())
}

fn run_slice_threshold(checkpoint: &Checkpoint) -> usize {
    TrainConfig::from_toml_str(&checkpoint.train_config, None)
        .map(|c| c.slice_threshold)
        .unwrap_or(mgcot::evaluation::DEFAULT_SLICE_THRESHOLD)
}

pub fn evaluate(a: EvaluateArgs) -> CmdResult {
    let checkpoint = Checkpoint::load(&a.run.join(BEST_CHECKPOINT))?;
    let corpus = load_corpus(&a.corpus)?;
    if checkpoint.items != corpus.item_count() {
        return Err(Failure::config(format!(
            "run was trained on {} items but the corpus has {}",
            checkpoint.items,
            corpus.item_count()
        )));
    }
    let (store, model) = trainer::restore_model(&checkpoint)?;
    let threshold = a.slice_threshold.unwrap_or_else(|| run_slice_threshold(&checkpoint));
    let out = a.out.clone().unwrap_or_else(|| a.run.join("eval"));
    prepare_dir(&out, a.force)?;

    let mut reports = vec![evaluate_model(&model, &store, &corpus.test, a.batch_size, threshold)?];
    if a.baselines {
        reports.extend(baseline_reports(&corpus, threshold)?);
    }
    write(&out.join(METRICS_JSONL), to_jsonl(&reports))?;
    let table = format_reports(&reports);
    write(&out.join(METRICS_TXT), &table)?;
    print!("{table}");

    if a.export_attention {
        if model.config.ablation.no_multi_attention {
            warn!("the no-multi-attention variant has no attention weights to export");
        }
        let n = a.attention_limit.min(corpus.test.len());
        let mut body = String::new();
        for (chunk_no, chunk) in corpus.test[..n].chunks(64).enumerate() {
            let prefixes: Vec<&[u32]> = chunk.iter().map(|e| e.prefix.as_slice()).collect();
            let mut g = Graph::new();
            let fwd = model.forward(&mut g, &store, &prefixes, None, None)?;
            for r in attention_records(&g, &fwd, &prefixes, chunk_no * 64) {
                body.push_str(&serde_json::to_string(&r).map_err(anyhow::Error::from)?);
                body.push('\n');
            }
        }
        write(&out.join(ATTENTION_JSONL), body)?;
        info!("attention weights of {n} test examples written");
    }
    Ok(())
}

fn baseline_reports(corpus: &Corpus, threshold: usize) -> CmdResult<Vec<MetricsReport>> {
    let sessions = || corpus.train_sessions.iter().map(|s| s.items.as_slice());
    let pop = PopularityBaseline::fit(sessions(), corpus.item_count());
    let markov = MarkovBaseline::fit(sessions(), corpus.item_count());
    Ok(vec![
        evaluate_popularity(&pop, &corpus.test, threshold)?,
        evaluate_markov(&markov, &corpus.test, threshold)?,
    ])
}

pub fn ablate(a: AblateArgs) -> CmdResult {
    let corpus = load_corpus(&a.corpus)?;
    let base = resolve_config(&a.config, None, None)?;
    if base.ablation()? != Ablation::default() {
        return Err(Failure::config(format!(
            "ablate runs every variant itself; the config sets ablation = {:?}",
            base.ablation
        )));
    }
    prepare_dir(&a.out, a.force)?;
    let mut reports = Vec::new();
    for variant in std::iter::once("full").chain(Ablation::NAMES) {
        let cfg = TrainConfig {
            ablation: variant.to_string(),
            ..base.clone()
        };
        let dir = a.out.join(variant);
        info!("training variant {variant}");
        let outcome = trainer::train(&corpus, &cfg, Some(&dir))?;
        let store = outcome.best_params();
        let report = evaluate_model(&outcome.model, &store, &corpus.test, cfg.eval_batch_size, cfg.slice_threshold)?;
        let eval_dir = dir.join("eval");
        prepare_dir(&eval_dir, true)?;
        write(&eval_dir.join(METRICS_JSONL), to_jsonl(std::slice::from_ref(&report)))?;
        reports.push(report);
    }
    let table = format_ablation(&reports);
    write(&a.out.join(ABLATION_TXT), &table)?;
    write(&a.out.join(ABLATION_JSONL), to_jsonl(&reports))?;
    print!("{table}");
    Ok(())
}

fn metrics_file(dir: &Path) -> Option<PathBuf> {
    [
        dir.join(METRICS_JSONL),
        dir.join("eval").join(METRICS_JSONL),
        dir.join(ABLATION_JSONL),
    ]
    .into_iter()
    .find(|p| p.is_file())
}

pub fn report(a: ReportArgs) -> CmdResult {
    let mut reports = Vec::new();
    for dir in &a.runs {
        let path = metrics_file(dir)
            .ok_or_else(|| Failure::io(format!("no metrics found under {}", dir.display())))?;
        reports.extend(from_jsonl(&read(&path)?)?);
    }
    let table = format_reports(&reports);
    if let Some(out) = &a.out {
        write(out, &table)?;
    }
    print!("{table}");
    Ok(())
}
