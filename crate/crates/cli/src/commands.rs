use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use wvlp_core::corpus::{
    build_manifest_with_categories, read_jsonl, synthetic_images, CategoryIndex, ImageRecord, Split, SplitPolicy,
};
use wvlp_core::demo::corpus_tokenizer;
use wvlp_core::evalkit::{
    evaluate as run_eval, table_row, EvalInputs, EvalReportFile, ItmScorer, PairScorer, RelevanceMode, RetrievalReport,
};
use wvlp_core::model::Model;
use wvlp_core::promptgen::{
    build_text_corpus, builtin_templates, load_categories, load_templates, parse_prompt_set, FixtureBackend,
    LanguageModelBackend, LiveBackend, LiveConfig, PromptCache, PromptId, Retrying, RetryPolicy,
};
use wvlp_core::tokenizer::Tokenizer;
use wvlp_core::trainer::{load_model, TrainingData, Trainer};

use crate::config::{config_hash, read_config_file, resolve, RunConfig};
use crate::run::{RunDir, RunManifest};
use crate::{AblateArgs, BackendKind, BuildCorpusArgs, CliError, CorpusArgs, EvalFlags, EvaluateArgs, PretrainArgs, SplitArg, TrainFlags};

type CliResult<T> = Result<T, CliError>;

pub const CORPUS_FILE: &str = "corpus.jsonl";
const CACHE_VERSION: u32 = 1;
const VOCAB_MIN_COUNT: usize = 1;
const VOCAB_MAX_SIZE: usize = 8192;

fn input<T>(what: &str, r: wvlp_core::Result<T>) -> CliResult<T> {
    r.map_err(|e| CliError::usage(format!("{what}: {e}")))
}

// ---------------------------------------------------------------------------

#[derive(Debug, Serialize)]
struct BuildCorpusRecord<'a> {
    categories: String,
    templates: Option<String>,
    responses_per_prompt: u32,
    backend: BackendKind,
    images: Option<String>,
    synthetic_images: usize,
    split_policy: &'a str,
    eval_fraction: f64,
    seed: u64,
}

pub fn build_corpus(a: &BuildCorpusArgs) -> CliResult<()> {
    let entries = input("categories", load_categories(&a.categories))?;
    let templates = match &a.templates {
        Some(p) => input("templates", load_templates(p))?,
        None => builtin_templates(),
    };
    let policy = SplitPolicy::parse(&a.split_policy, a.eval_fraction).map_err(CliError::usage)?;
    if a.images.is_none() && a.synthetic_images == 0 {
        return Err(CliError::usage("need --images or a positive --synthetic-images"));
    }
    let record = BuildCorpusRecord {
        categories: a.categories.display().to_string(),
        templates: a.templates.as_ref().map(|p| p.display().to_string()),
        responses_per_prompt: a.responses_per_prompt,
        backend: a.backend,
        images: a.images.as_ref().map(|p| p.display().to_string()),
        synthetic_images: a.synthetic_images,
        split_policy: policy.name(),
        eval_fraction: a.eval_fraction,
        seed: a.seed,
    };
    let mut manifest = RunManifest::new("build-corpus", &record, vec![a.seed]);
    manifest.add_input(&a.categories)?;
    for p in a.templates.iter().chain(&a.images) {
        manifest.add_input(p)?;
    }
    let mut run = RunDir::create(&a.run.runs_dir, a.run.out.as_deref(), manifest)?;

    let mut backend: Box<dyn LanguageModelBackend> = match a.backend {
        BackendKind::Fixture => Box::new(FixtureBackend::new()),
        BackendKind::Live => {
            let cfg: LiveConfig = match &a.backend_config {
                Some(p) => {
                    let text = std::fs::read_to_string(p).map_err(|e| CliError::usage(format!("{}: {e}", p.display())))?;
                    serde_json::from_str(&text).map_err(|e| CliError::usage(format!("{}: {e}", p.display())))?
                }
                None => LiveConfig::default(),
            };
            Box::new(Retrying::new(LiveBackend::new(cfg).map_err(CliError::usage)?, RetryPolicy::default()))
        }
    };
    let mut cache = match &a.cache_dir {
        Some(d) => PromptCache::on_disk(d, CACHE_VERSION)?,
        None => PromptCache::in_memory(CACHE_VERSION),
    };
    let corpus = match build_text_corpus(&entries, &templates, backend.as_mut(), &mut cache, a.responses_per_prompt) {
        Ok(c) => c,
        Err(wvlp_core::Error::Partial { completed, source }) => {
            let path = run.output("descriptions.partial.jsonl");
            wvlp_core::promptgen::write_descriptions(&path, &completed)?;
            run.finish()?;
            return Err(CliError::runtime(format!(
                "generation stopped: {source}; {} records kept in {}",
                completed.len(),
                path.display()
            )));
        }
        Err(e) => return Err(e.into()),
    };
    corpus.write(&run.path)?;
    run.output(wvlp_core::promptgen::DESCRIPTIONS_FILE);
    run.output(wvlp_core::promptgen::STATS_FILE);

    let known: BTreeSet<String> = entries.iter().map(|e| e.category_id.clone()).collect();
    let images: Vec<ImageRecord> = match &a.images {
        Some(p) => input("images", read_jsonl(p))?,
        None => {
            let ids: Vec<String> = known.iter().cloned().collect();
            synthetic_images(&ids, a.synthetic_images, a.seed)
        }
    };
    let mut index = input("corpus", build_manifest_with_categories(&known, images, corpus.records.clone()))?;
    index.assign_splits(policy, a.seed)?;
    let coverage = index.coverage();
    let path = run.output(CORPUS_FILE);
    index.write_manifest(&path, Some(policy.name()))?;
    run.manifest.details.insert("coverage".into(), serde_json::to_value(&coverage).map_err(CliError::runtime)?);
    run.manifest.details.insert("stats".into(), serde_json::to_value(&corpus.stats).map_err(CliError::runtime)?);
    let manifest_path = run.finish()?;

    println!("descriptions per prompt:");
    for (p, n) in &corpus.stats.per_prompt {
        println!("  {p}  {n:>6}");
    }
    println!(
        "total {} descriptions ({} duplicates collapsed, {} empty) over {} categories, {} images",
        corpus.stats.total_texts,
        corpus.stats.duplicates_collapsed,
        corpus.stats.empty_responses,
        corpus.stats.categories,
        index.num_images()
    );
    println!("corpus: {}", path.display());
    println!("manifest: {}", manifest_path.display());
    Ok(())
}

// ---------------------------------------------------------------------------

fn load_corpus(a: &CorpusArgs) -> CliResult<(CategoryIndex, PathBuf)> {
    let (_, index) = input("corpus", CategoryIndex::read_manifest(&a.corpus))?;
    let base = match &a.image_base {
        Some(b) => b.clone(),
        None => a.corpus.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    Ok((index, base))
}

fn overrides(f: &TrainFlags) -> CliResult<Map<String, Value>> {
    let mut m = Map::new();
    let mut put = |k: &str, v: Value| {
        m.insert(k.to_string(), v);
    };
    if let Some(v) = f.steps {
        put("steps", json!(v));
    }
    if let Some(v) = f.seed {
        put("seed", json!(v));
    }
    if let Some(v) = f.batch_size {
        put("batch_size", json!(v));
    }
    if let Some(v) = f.learning_rate {
        put("learning_rate", json!(v));
    }
    if let Some(v) = f.queue_size {
        put("queue_size", json!(v));
    }
    if f.shuffled {
        put("shuffled", json!(true));
    }
    if let Some(p) = &f.prompt_filter {
        let ids = parse_prompt_set(p).map_err(CliError::usage)?;
        put("prompt_filter", json!(ids));
    }
    if let Some(v) = &f.target {
        put("target_mode", json!(v));
    }
    if let Some(v) = &f.negatives {
        put("negative_strategy", json!(v));
    }
    if let Some(v) = f.momentum {
        put("momentum", json!(v));
    }
    if let Some(v) = f.checkpoint_interval {
        put("checkpoint_interval", json!(v));
    }
    Ok(m)
}

fn run_config(f: &TrainFlags) -> CliResult<RunConfig> {
    let file = f.config.as_deref().map(read_config_file).transpose()?;
    resolve(file.as_ref(), &overrides(f)?)
}

#[derive(Debug, Serialize)]
struct PretrainRecord<'a> {
    #[serde(flatten)]
    config: &'a RunConfig,
    corpus: String,
    resume: Option<String>,
}

/// Trains into `dir`. A non-finite loss leaves `diagnostics.json` behind.
fn train_into(
    cfg: &RunConfig,
    index: &CategoryIndex,
    image_base: &Path,
    dir: &Path,
    resume: Option<&Path>,
) -> CliResult<(Trainer, Tokenizer)> {
    let tokenizer = corpus_tokenizer(index, VOCAB_MIN_COUNT, VOCAB_MAX_SIZE);
    let data = TrainingData::prepare(index.view(Split::Pretrain), tokenizer.clone(), &cfg.model, Some(image_base))?;
    let mut trainer = match resume {
        Some(ckpt) => {
            let mut t = Trainer::resume(ckpt, data)?;
            t.set_steps(cfg.train.steps);
            t
        }
        None => Trainer::new(cfg.train.clone(), cfg.model.clone(), data)?,
    };
    match trainer.run(Some(dir)) {
        Ok(_) => Ok((trainer, tokenizer)),
        Err(e @ wvlp_core::Error::NonFinite { .. }) => {
            let path = dir.join("diagnostics.json");
            let body = json!({ "error": e.to_string(), "step": trainer.step_count() });
            std::fs::write(&path, serde_json::to_string_pretty(&body).map_err(CliError::runtime)?)
                .map_err(CliError::runtime)?;
            Err(CliError::runtime(format!("{e}\ndiagnostics: {}", path.display())))
        }
        Err(e) => Err(CliError::runtime(e)),
    }
}

fn record_shuffle(run: &mut RunDir, trainer: &Trainer) {
    if let Some(info) = trainer.train_index().shuffle_info() {
        run.manifest.details.insert("shuffle".into(), json!(info));
    }
}

pub fn pretrain(a: &PretrainArgs) -> CliResult<()> {
    let cfg = run_config(&a.train)?;
    let (index, base) = load_corpus(&a.corpus)?;
    if let Some(r) = &a.resume {
        if !r.join("config.json").is_file() {
            return Err(CliError::usage(format!("no checkpoint at {}", r.display())));
        }
    }
    let record = PretrainRecord {
        config: &cfg,
        corpus: a.corpus.corpus.display().to_string(),
        resume: a.resume.as_ref().map(|p| p.display().to_string()),
    };
    let mut manifest = RunManifest::new("pretrain", &record, vec![cfg.train.seed]);
    manifest.add_input(&a.corpus.corpus)?;
    if let Some(r) = &a.resume {
        manifest.add_input(r)?;
    }
    let mut run = RunDir::create(&a.run.runs_dir, a.run.out.as_deref(), manifest)?;
    run.output("metrics.jsonl");
    run.output("checkpoint");
    let result = train_into(&cfg, &index, &base, &run.path.clone(), a.resume.as_deref());
    let (trainer, _) = match result {
        Ok(t) => t,
        Err(e) => {
            run.finish()?;
            return Err(e);
        }
    };
    record_shuffle(&mut run, &trainer);
    let manifest_path = run.finish()?;
    println!("trained {} steps; checkpoint {}", trainer.step_count(), run.join("checkpoint").display());
    println!("manifest: {}", manifest_path.display());
    Ok(())
}

// ---------------------------------------------------------------------------

#[derive(Debug, Deserialize)]
struct PairLine {
    image_id: String,
    description_id: String,
}

fn eval_index(index: &CategoryIndex, split: SplitArg) -> CategoryIndex {
    match split {
        SplitArg::Eval => index.view(Split::Eval),
        SplitArg::Pretrain => index.view(Split::Pretrain),
        SplitArg::All => index.clone(),
    }
}

fn evaluate_model(
    model: &Model,
    tokenizer: &Tokenizer,
    index: &CategoryIndex,
    image_base: &Path,
    flags: &EvalFlags,
) -> CliResult<(RetrievalReport, RetrievalReport)> {
    let mode: RelevanceMode = flags.mode.parse().map_err(CliError::usage)?;
    let view = eval_index(index, flags.split);
    let inputs = input("evaluation split", EvalInputs::from_index(&view, tokenizer, model, Some(image_base)))?;
    let mut set = inputs.embed(model)?;
    if mode == RelevanceMode::Instance {
        let path = flags
            .pairs
            .as_ref()
            .ok_or_else(|| CliError::usage("instance mode needs --pairs"))?;
        let lines: Vec<PairLine> = input("pairs", read_jsonl(path))?;
        let img: HashMap<&str, usize> = set.image_ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        let txt: HashMap<&str, usize> = set.text_ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        set.instance_pairs = lines
            .iter()
            .filter_map(|l| Some((*img.get(l.image_id.as_str())?, *txt.get(l.description_id.as_str())?)))
            .collect();
    }
    let mut scorer = ItmScorer { model, inputs: &inputs };
    let scorer: Option<&mut dyn PairScorer> = (flags.rerank_k > 0).then_some(&mut scorer as &mut dyn PairScorer);
    run_eval(&set, mode, flags.rerank_k, scorer).map_err(CliError::usage)
}

#[derive(Debug, Serialize)]
struct EvaluateRecord<'a> {
    checkpoint: String,
    corpus: String,
    split: SplitArg,
    mode: &'a str,
    rerank_k: usize,
    pairs: Option<String>,
}

pub fn evaluate(a: &EvaluateArgs) -> CliResult<()> {
    if !a.checkpoint.join("config.json").is_file() {
        return Err(CliError::usage(format!("no checkpoint at {}", a.checkpoint.display())));
    }
    let (model, tokenizer, meta) = load_model(&a.checkpoint)?;
    let (index, base) = load_corpus(&a.corpus)?;
    let record = EvaluateRecord {
        checkpoint: a.checkpoint.display().to_string(),
        corpus: a.corpus.corpus.display().to_string(),
        split: a.eval.split,
        mode: &a.eval.mode,
        rerank_k: a.eval.rerank_k,
        pairs: a.eval.pairs.as_ref().map(|p| p.display().to_string()),
    };
    let mut manifest = RunManifest::new("evaluate", &record, vec![meta.train.seed]);
    manifest.add_input(&a.checkpoint)?;
    manifest.add_input(&a.corpus.corpus)?;
    if let Some(p) = &a.eval.pairs {
        manifest.add_input(p)?;
    }
    let hash = manifest.config_hash.clone();
    let mut run = RunDir::create(&a.run.runs_dir, a.run.out.as_deref(), manifest)?;
    let (i2t, t2i) = evaluate_model(&model, &tokenizer, &index, &base, &a.eval)?;
    write_json(&run.output("report_i2t.json"), &i2t)?;
    write_json(&run.output("report_t2i.json"), &t2i)?;
    let report = EvalReportFile::new(i2t, t2i, hash);
    report.write(&run.output("report.json"))?;
    run.finish()?;
    println!("{}", table_row("checkpoint", &report.i2t, &report.t2i));
    println!("report: {}", run.join("report.json").display());
    Ok(())
}

fn write_json(path: &Path, v: &impl Serialize) -> CliResult<()> {
    let text = serde_json::to_string_pretty(v).map_err(CliError::runtime)?;
    std::fs::write(path, text).map_err(CliError::runtime)
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub i2t: RetrievalReport,
    pub t2i: RetrievalReport,
    pub overall_avg_r: f64,
}

#[derive(Debug, Serialize)]
struct AblationRecord<'a> {
    #[serde(flatten)]
    config: &'a RunConfig,
    corpus: String,
    split: SplitArg,
    mode: &'a str,
    rerank_k: usize,
    variants: Vec<String>,
}

fn ablate(a: &AblateArgs, name: &str, variants: Vec<(String, RunConfig)>) -> CliResult<()> {
    let base_cfg = run_config(&a.train)?;
    let (index, base) = load_corpus(&a.corpus)?;
    // Fail on a bad mode before any training happens.
    a.eval.mode.parse::<RelevanceMode>().map_err(CliError::usage)?;
    let record = AblationRecord {
        config: &base_cfg,
        corpus: a.corpus.corpus.display().to_string(),
        split: a.eval.split,
        mode: &a.eval.mode,
        rerank_k: a.eval.rerank_k,
        variants: variants.iter().map(|(l, _)| l.clone()).collect(),
    };
    let mut manifest = RunManifest::new(name, &record, vec![base_cfg.train.seed]);
    manifest.add_input(&a.corpus.corpus)?;
    let mut run = RunDir::create(&a.run.runs_dir, a.run.out.as_deref(), manifest)?;
    let mut rows = Vec::new();
    let mut variant_hashes = BTreeMap::new();
    for (label, cfg) in &variants {
        let dir = run.output(label);
        let (trainer, tokenizer) = train_into(cfg, &index, &base, &dir, None)?;
        if let Some(info) = trainer.train_index().shuffle_info() {
            run.manifest.details.insert(format!("shuffle/{label}"), json!(info));
        }
        variant_hashes.insert(label.clone(), config_hash(cfg));
        let (i2t, t2i) = evaluate_model(trainer.model(), &tokenizer, &index, &base, &a.eval)?;
        let row = AblationRow {
            label: label.clone(),
            overall_avg_r: wvlp_core::evalkit::overall_avg_r(&i2t, &t2i),
            i2t,
            t2i,
        };
        println!("{}", table_row(label, &row.i2t, &row.t2i));
        rows.push(row);
    }
    run.manifest.details.insert("variant_config_hashes".into(), json!(variant_hashes));
    write_json(&run.output("summary.json"), &rows)?;
    let table: String = rows.iter().map(|r| table_row(&r.label, &r.i2t, &r.t2i) + "\n").collect();
    std::fs::write(run.output("summary.txt"), table).map_err(CliError::runtime)?;
    let manifest_path = run.finish()?;
    println!("manifest: {}", manifest_path.display());
    Ok(())
}

pub fn ablate_prompts(a: &AblateArgs) -> CliResult<()> {
    let cfg = run_config(&a.train)?;
    let mut variants: Vec<(String, RunConfig)> = PromptId::ALL
        .iter()
        .map(|&p| {
            let mut c = cfg.clone();
            c.train.prompt_filter = Some(vec![p]);
            (p.to_string(), c)
        })
        .collect();
    let mut all = cfg;
    all.train.prompt_filter = None;
    variants.push(("All".into(), all));
    ablate(a, "ablate-prompts", variants)
}

pub fn ablate_shuffle(a: &AblateArgs) -> CliResult<()> {
    let cfg = run_config(&a.train)?;
    let mut aligned = cfg.clone();
    aligned.train.shuffled = false;
    let mut shuffled = cfg;
    shuffled.train.shuffled = true;
    ablate(a, "ablate-shuffle", vec![("aligned".into(), aligned), ("shuffled".into(), shuffled)])
}
