//! The pre-training loop: sampling, forward passes for the four losses,
//! AdamW updates, queue maintenance, metrics and checkpoints.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Matrix, ParamStore, Var};
use crate::checkpoint::{load_params, read_arrays, save_params, write_arrays};
use crate::corpus::{sample_batch, shuffle_pairs, CategoryIndex, PairBatch, SampleOptions, ShuffleInfo};
use crate::error::{Error, Result};
use crate::images::{self, Pixels};
use crate::model::{Model, ModelConfig, Similarity};
use crate::objectives::{
    imc_loss, itc_loss, itm_loss, mask_tokens, mlm_loss, sample_itm_negatives, total_loss, EmbeddingQueue,
    ItmNegatives, LossComponents, MaskedText, NegativeStrategy, TargetMode,
};
use crate::optim::{learning_rate, AdamW, AdamWConfig};
use crate::promptgen::PromptId;
use crate::rng::{derived_u64, substream, RngState, Stream};
use crate::tokenizer::{Encoded, Tokenizer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Defaults to 10% of `steps`.
    pub warmup_steps: Option<u64>,
    pub seed: u64,
    pub queue_size: usize,
    pub mask_rate: f64,
    /// Save a checkpoint every this many steps; 0 saves only the final one.
    pub checkpoint_interval: u64,
    pub prompt_filter: Option<Vec<PromptId>>,
    pub shuffled: bool,
    pub allow_repeats: bool,
    pub target_mode: TargetMode,
    pub negative_strategy: NegativeStrategy,
    /// EMA coefficient of a momentum encoder that feeds the queues.
    pub momentum: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 8,
            learning_rate: 1e-4,
            weight_decay: 0.01,
            warmup_steps: None,
            seed: 0,
            queue_size: 256,
            mask_rate: 0.15,
            checkpoint_interval: 0,
            prompt_filter: None,
            shuffled: false,
            allow_repeats: false,
            target_mode: TargetMode::Uniform,
            negative_strategy: NegativeStrategy::Uniform,
            momentum: None,
        }
    }
}

impl TrainConfig {
    pub fn warmup(&self) -> u64 {
        self.warmup_steps.unwrap_or(self.steps / 10)
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("steps must be at least 1".into()));
        }
        if self.warmup() > self.steps {
            return Err(Error::Config("warmup exceeds total steps".into()));
        }
        if !(self.mask_rate > 0.0 && self.mask_rate < 1.0) {
            return Err(Error::Config(format!("mask_rate {} outside (0, 1)", self.mask_rate)));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning rate must be finite and non-negative".into()));
        }
        if let Some(m) = self.momentum {
            if !(0.0..1.0).contains(&m) {
                return Err(Error::Config(format!("momentum {m} outside [0, 1)")));
            }
        }
        if matches!(&self.prompt_filter, Some(f) if f.is_empty()) {
            return Err(Error::Config("empty prompt filter".into()));
        }
        Ok(())
    }
}

/// One metrics-log row; `step` counts completed updates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub itc: f64,
    pub itm: f64,
    pub mlm: f64,
    pub imc: f64,
    pub total: f64,
    pub tau: f64,
    pub queue_occupancy: usize,
    pub lr: f64,
}

/// Pixels and token ids for every record of a corpus view.
#[derive(Debug, Clone)]
pub struct TrainingData {
    pub index: CategoryIndex,
    pub tokenizer: Tokenizer,
    pub pixels: HashMap<String, Pixels>,
    pub tokens: HashMap<String, Encoded>,
}

impl TrainingData {
    pub fn prepare(
        index: CategoryIndex,
        tokenizer: Tokenizer,
        model: &ModelConfig,
        image_base: Option<&Path>,
    ) -> Result<Self> {
        let mut pixels = HashMap::new();
        for r in index.images() {
            let p = images::load(&r.source, image_base, model.image_size, model.channels)?;
            pixels.insert(r.image_id.clone(), p);
        }
        let tokens = index
            .descriptions()
            .map(|d| (d.description_id.clone(), tokenizer.encode(&d.text, model.max_text_len)))
            .collect();
        Ok(Self {
            index,
            tokenizer,
            pixels,
            tokens,
        })
    }
}

/// Everything the losses need for one batch.
#[derive(Debug, Clone)]
pub struct StepInputs<'a> {
    pub pixels: Vec<&'a Pixels>,
    pub texts: Vec<&'a Encoded>,
    pub categories: Vec<String>,
    pub masked: Vec<MaskedText>,
    pub image_queue: &'a EmbeddingQueue,
    pub text_queue: &'a EmbeddingQueue,
    pub target_mode: TargetMode,
}

#[derive(Debug, Clone)]
pub struct LossVars {
    pub itc: Var,
    pub itm: Var,
    pub mlm: Var,
    pub imc: Var,
    pub total: Var,
    pub image_emb: Var,
    pub text_emb: Var,
    pub negatives: ItmNegatives,
}

impl LossVars {
    pub fn components(&self, g: &Graph) -> LossComponents {
        LossComponents {
            itc: g.scalar(self.itc),
            itm: g.scalar(self.itm),
            mlm: g.scalar(self.mlm),
            imc: g.scalar(self.imc),
        }
    }
}

/// Builds all four losses on one graph. `negatives` receives the detached
/// image-text similarity matrix and picks the ITM negatives.
pub fn forward_losses(
    model: &Model,
    g: &mut Graph,
    inputs: &StepInputs<'_>,
    negatives: &mut dyn FnMut(&Matrix) -> Result<ItmNegatives>,
) -> Result<LossVars> {
    let b = inputs.pixels.len();
    if inputs.texts.len() != b || inputs.categories.len() != b || inputs.masked.len() != b {
        return Err(Error::Contract("step inputs disagree on batch size".into()));
    }
    let mut imgs = Vec::with_capacity(b);
    let mut txts = Vec::with_capacity(b);
    for k in 0..b {
        imgs.push(model.encode_image(g, inputs.pixels[k])?);
        txts.push(model.encode_text(g, inputs.texts[k])?);
    }
    let ie: Vec<Var> = imgs.iter().map(|e| model.image_embedding(g, e)).collect();
    let te: Vec<Var> = txts.iter().map(|e| model.text_embedding(g, e)).collect();
    let image_emb = g.concat_rows(&ie);
    let text_emb = g.concat_rows(&te);
    let inv_tau = model.inverse_tau(g);
    let cats = &inputs.categories;
    let itc = itc_loss(g, image_emb, text_emb, cats, inputs.image_queue, inputs.text_queue, inv_tau, inputs.target_mode);
    let imc = imc_loss(g, image_emb, text_emb, cats, inputs.image_queue, inputs.text_queue, inv_tau, inputs.target_mode);

    let sims = g.value(image_emb).dot(&g.value(text_emb).t());
    let negs = negatives(&sims)?;
    let mut pairs: Vec<(usize, usize, bool)> = (0..b).map(|k| (k, k, true)).collect();
    pairs.extend(negs.pairs().into_iter().map(|(i, t)| (i, t, false)));
    let mut logits = Vec::with_capacity(pairs.len());
    for &(i, t, _) in &pairs {
        let f = model.fuse(g, &imgs[i], &txts[t])?;
        logits.push(model.itm_logits(g, &f));
    }
    let logits = g.concat_rows(&logits);
    let labels: Vec<bool> = pairs.iter().map(|p| p.2).collect();
    let itm = itm_loss(g, logits, &labels);

    let mut mlm_logits = Vec::new();
    let mut targets = Vec::new();
    for (k, m) in inputs.masked.iter().enumerate() {
        if m.positions.is_empty() {
            continue;
        }
        let t = model.encode_text(g, &m.input)?;
        let f = model.fuse(g, &imgs[k], &t)?;
        mlm_logits.push(model.mlm_logits(g, &f, &m.positions));
        targets.extend_from_slice(&m.targets);
    }
    let mlm_in = (!mlm_logits.is_empty()).then(|| g.concat_rows(&mlm_logits));
    let mlm = mlm_loss(g, mlm_in, &targets);
    let total = total_loss(g, itc.loss, itm, mlm, imc.loss);
    Ok(LossVars {
        itc: itc.loss,
        itm,
        mlm,
        imc: imc.loss,
        total,
        image_emb,
        text_emb,
        negatives: negs,
    })
}

#[derive(Debug, Clone)]
struct Rngs {
    sampler: ChaCha8Rng,
    mask: ChaCha8Rng,
    negatives: ChaCha8Rng,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
struct RngStates {
    sampler: RngState,
    mask: RngState,
    negatives: RngState,
}

impl Rngs {
    fn new(seed: u64) -> Self {
        Self {
            sampler: substream(seed, Stream::Sampler),
            mask: substream(seed, Stream::Mask),
            negatives: substream(seed, Stream::Negatives),
        }
    }

    fn capture(&self) -> RngStates {
        RngStates {
            sampler: RngState::capture(&self.sampler),
            mask: RngState::capture(&self.mask),
            negatives: RngState::capture(&self.negatives),
        }
    }

    fn restore(s: &RngStates) -> Self {
        Self {
            sampler: s.sampler.restore(),
            mask: s.mask.restore(),
            negatives: s.negatives.restore(),
        }
    }
}

pub const CHECKPOINT_VERSION: u32 = 1;

/// `config.json` of a checkpoint directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub version: u32,
    pub step: u64,
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub shuffle: Option<ShuffleInfo>,
    rng: RngStates,
    optimizer: AdamWConfig,
    optimizer_t: u64,
    image_queue_categories: Vec<String>,
    text_queue_categories: Vec<String>,
}

/// Loads just the model and tokenizer of a checkpoint, for evaluation.
pub fn load_model(dir: &Path) -> Result<(Model, Tokenizer, CheckpointMeta)> {
    let meta: CheckpointMeta = serde_json::from_str(
        &fs::read_to_string(dir.join("config.json"))
            .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", dir.join("config.json").display())))?,
    )?;
    if meta.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {}", meta.version)));
    }
    let model = Model::from_params(meta.model.clone(), load_params(&dir.join("params.bin"))?)?;
    let tokenizer = Tokenizer::load(&dir.join("vocab.txt"))?;
    Ok((model, tokenizer, meta))
}

#[derive(Debug, Clone)]
pub struct Trainer {
    config: TrainConfig,
    data: TrainingData,
    train_index: CategoryIndex,
    model: Model,
    momentum: Option<Model>,
    optimizer: AdamW,
    image_queue: EmbeddingQueue,
    text_queue: EmbeddingQueue,
    rngs: Rngs,
    step: u64,
    last_checkpoint: Option<PathBuf>,
}

impl Trainer {
    /// A fresh run. The model's vocabulary size is taken from the data's
    /// tokenizer.
    pub fn new(config: TrainConfig, mut model_config: ModelConfig, data: TrainingData) -> Result<Self> {
        config.validate()?;
        model_config.vocab_size = data.tokenizer.vocab_size();
        let model = Model::new(model_config, &mut substream(config.seed, Stream::Init))?;
        let optimizer = AdamW::new(
            AdamWConfig {
                weight_decay: config.weight_decay,
                ..Default::default()
            },
            model.params(),
        );
        let (image_queue, text_queue) = new_queues(&config, model.config());
        let train_index = training_view(&config, &data.index)?;
        Ok(Self {
            momentum: config.momentum.map(|_| model.clone()),
            rngs: Rngs::new(config.seed),
            config,
            data,
            train_index,
            model,
            optimizer,
            image_queue,
            text_queue,
            step: 0,
            last_checkpoint: None,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn train_index(&self) -> &CategoryIndex {
        &self.train_index
    }

    pub fn image_queue(&self) -> &EmbeddingQueue {
        &self.image_queue
    }

    pub fn text_queue(&self) -> &EmbeddingQueue {
        &self.text_queue
    }

    pub fn set_steps(&mut self, steps: u64) {
        self.config.steps = steps;
    }

    /// The next batch the sampler will draw, without advancing it.
    pub fn peek_batch(&self) -> Result<PairBatch> {
        let seed: u64 = self.rngs.sampler.clone().random();
        self.sample(seed)
    }

    fn sample(&self, seed: u64) -> Result<PairBatch> {
        let opts = SampleOptions {
            prompt_filter: self.config.prompt_filter.as_deref(),
            allow_repeats: self.config.allow_repeats,
        };
        sample_batch(&self.train_index, self.config.batch_size, seed, &opts)
    }

    /// One optimizer update.
    pub fn step(&mut self) -> Result<StepMetrics> {
        let seed: u64 = self.rngs.sampler.random();
        let batch = self.sample(seed)?;
        self.step_on(&batch)
    }

    /// One optimizer update on a given batch.
    pub fn step_on(&mut self, batch: &PairBatch) -> Result<StepMetrics> {
        let data = &self.data;
        let lookup_px = |id: &str| {
            data.pixels
                .get(id)
                .ok_or_else(|| Error::Contract(format!("no pixels for image {id}")))
        };
        let lookup_tx = |id: &str| {
            data.tokens
                .get(id)
                .ok_or_else(|| Error::Contract(format!("no tokens for description {id}")))
        };
        let pixels = batch.triples.iter().map(|t| lookup_px(&t.image_id)).collect::<Result<Vec<_>>>()?;
        let texts = batch
            .triples
            .iter()
            .map(|t| lookup_tx(&t.description_id))
            .collect::<Result<Vec<_>>>()?;
        let categories: Vec<String> = batch.triples.iter().map(|t| t.category_id.clone()).collect();
        let vocab = self.model.config().vocab_size;
        let masked = texts
            .iter()
            .map(|t| mask_tokens(t, self.config.mask_rate, vocab, &mut self.rngs.mask))
            .collect();
        let inputs = StepInputs {
            pixels,
            texts,
            categories: categories.clone(),
            masked,
            image_queue: &self.image_queue,
            text_queue: &self.text_queue,
            target_mode: self.config.target_mode,
        };
        let mut g = Graph::new();
        let strategy = self.config.negative_strategy;
        let neg_rng = &mut self.rngs.negatives;
        let lv = forward_losses(&self.model, &mut g, &inputs, &mut |sims| {
            sample_itm_negatives(&categories, strategy, Some(sims), neg_rng)
        })?;
        let comps = lv.components(&g);
        if !comps.all_finite() || !g.scalar(lv.total).is_finite() {
            return Err(Error::NonFinite {
                step: self.step + 1,
                detail: format!(
                    "itc={} itm={} mlm={} imc={}",
                    comps.itc, comps.itm, comps.mlm, comps.imc
                ),
                last_checkpoint: self.last_checkpoint.clone(),
            });
        }
        let grads = g.backward(lv.total).to_dense(self.model.params());
        let lr = learning_rate(self.config.learning_rate, self.step, self.config.warmup(), self.config.steps);
        self.optimizer.step(self.model.params_mut(), &grads, lr);
        self.model.clamp_tau();

        let (img_feats, txt_feats) = match (&mut self.momentum, self.config.momentum) {
            (Some(mom), Some(coef)) => {
                ema_update(mom.params_mut(), self.model.params(), coef);
                let mut mg = Graph::new();
                let mut iv = Vec::new();
                let mut tv = Vec::new();
                for (p, t) in inputs.pixels.iter().zip(&inputs.texts) {
                    let e = mom.encode_image(&mut mg, p)?;
                    iv.push(mom.image_embedding(&mut mg, &e));
                    let e = mom.encode_text(&mut mg, t)?;
                    tv.push(mom.text_embedding(&mut mg, &e));
                }
                let i = mg.concat_rows(&iv);
                let t = mg.concat_rows(&tv);
                (mg.value(i).clone(), mg.value(t).clone())
            }
            _ => (g.value(lv.image_emb).clone(), g.value(lv.text_emb).clone()),
        };
        self.image_queue.enqueue(&img_feats, &categories)?;
        self.text_queue.enqueue(&txt_feats, &categories)?;
        self.step += 1;
        Ok(StepMetrics {
            step: self.step,
            itc: comps.itc,
            itm: comps.itm,
            mlm: comps.mlm,
            imc: comps.imc,
            total: g.scalar(lv.total),
            tau: self.model.tau(),
            queue_occupancy: self.image_queue.len(),
            lr,
        })
    }

    /// Runs until `config.steps`. With an output directory, appends to
    /// `metrics.jsonl`, writes periodic checkpoints under `checkpoints/` and
    /// the final one to `checkpoint/`.
    pub fn run(&mut self, out: Option<&Path>) -> Result<Vec<StepMetrics>> {
        let mut log = match out {
            Some(dir) => {
                fs::create_dir_all(dir)?;
                Some(MetricsLog::open(&dir.join("metrics.jsonl"), self.step)?)
            }
            None => None,
        };
        let mut rows = Vec::new();
        while self.step < self.config.steps {
            let m = self.step()?;
            if let Some(l) = log.as_mut() {
                l.append(&m)?;
            }
            rows.push(m);
            if let Some(dir) = out {
                let every = self.config.checkpoint_interval;
                if every > 0 && self.step % every == 0 && self.step < self.config.steps {
                    let path = dir.join("checkpoints").join(format!("step-{:06}", self.step));
                    self.save(&path)?;
                }
            }
        }
        if let Some(dir) = out {
            self.save(&dir.join("checkpoint"))?;
        }
        Ok(rows)
    }

    pub fn save(&mut self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let meta = CheckpointMeta {
            version: CHECKPOINT_VERSION,
            step: self.step,
            train: self.config.clone(),
            model: self.model.config().clone(),
            shuffle: self.train_index.shuffle_info(),
            rng: self.rngs.capture(),
            optimizer: self.optimizer.config,
            optimizer_t: self.optimizer.t,
            image_queue_categories: self.image_queue.categories().map(str::to_string).collect(),
            text_queue_categories: self.text_queue.categories().map(str::to_string).collect(),
        };
        fs::write(dir.join("config.json"), serde_json::to_string_pretty(&meta)?)?;
        save_params(&dir.join("params.bin"), self.model.params())?;
        let names: Vec<String> = self.model.params().iter().map(|(_, p)| p.name.clone()).collect();
        let m_names: Vec<String> = names.iter().map(|n| format!("m/{n}")).collect();
        let v_names: Vec<String> = names.iter().map(|n| format!("v/{n}")).collect();
        write_arrays(
            &dir.join("optimizer.bin"),
            m_names
                .iter()
                .zip(&self.optimizer.m)
                .chain(v_names.iter().zip(&self.optimizer.v))
                .map(|(n, m)| (n.as_str(), m)),
        )?;
        let (iq, tq) = (self.image_queue.matrix(), self.text_queue.matrix());
        write_arrays(&dir.join("queues.bin"), [("image", &iq), ("text", &tq)])?;
        if let Some(mom) = &self.momentum {
            save_params(&dir.join("momentum.bin"), mom.params())?;
        }
        self.data.tokenizer.save(&dir.join("vocab.txt"))?;
        self.last_checkpoint = Some(dir.to_path_buf());
        Ok(())
    }

    /// Restores a run from a checkpoint directory; `data` must be the same
    /// corpus view the run started from.
    pub fn resume(dir: &Path, data: TrainingData) -> Result<Self> {
        let (model, tokenizer, meta) = load_model(dir)?;
        if tokenizer != data.tokenizer {
            return Err(Error::Checkpoint("checkpoint vocabulary differs from the corpus tokenizer".into()));
        }
        let config = meta.train.clone();
        let train_index = training_view(&config, &data.index)?;
        if train_index.shuffle_info() != meta.shuffle {
            return Err(Error::Checkpoint("shuffle state does not match the checkpoint".into()));
        }
        let opt_arrays = read_arrays(&dir.join("optimizer.bin"))?;
        let n = model.params().len();
        if opt_arrays.len() != 2 * n {
            return Err(Error::Checkpoint("optimizer state does not match parameters".into()));
        }
        let mut arrays = opt_arrays.into_iter().map(|(_, m)| m);
        let m: Vec<Matrix> = arrays.by_ref().take(n).collect();
        let v: Vec<Matrix> = arrays.collect();
        let optimizer = AdamW {
            config: meta.optimizer,
            t: meta.optimizer_t,
            m,
            v,
        };
        let (mut image_queue, mut text_queue) = new_queues(&config, model.config());
        let queues = read_arrays(&dir.join("queues.bin"))?;
        let get = |name: &str| {
            queues
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, m)| m.clone())
                .ok_or_else(|| Error::Checkpoint(format!("queue {name} missing")))
        };
        image_queue.enqueue(&get("image")?, &meta.image_queue_categories)?;
        text_queue.enqueue(&get("text")?, &meta.text_queue_categories)?;
        let momentum = match config.momentum {
            Some(_) => Some(Model::from_params(
                meta.model.clone(),
                load_params(&dir.join("momentum.bin"))?,
            )?),
            None => None,
        };
        Ok(Self {
            rngs: Rngs::restore(&meta.rng),
            step: meta.step,
            config,
            data,
            train_index,
            model,
            momentum,
            optimizer,
            image_queue,
            text_queue,
            last_checkpoint: Some(dir.to_path_buf()),
        })
    }

    pub fn into_model(self) -> Model {
        self.model
    }
}

fn new_queues(config: &TrainConfig, model: &ModelConfig) -> (EmbeddingQueue, EmbeddingQueue) {
    let unit = model.similarity == Similarity::Projected;
    let dim = model.projection_dim;
    (
        EmbeddingQueue::new(config.queue_size, dim, unit),
        EmbeddingQueue::new(config.queue_size, dim, unit),
    )
}

fn training_view(config: &TrainConfig, index: &CategoryIndex) -> Result<CategoryIndex> {
    if config.shuffled {
        shuffle_pairs(index, derived_u64(config.seed, Stream::Shuffle))
    } else {
        Ok(index.clone())
    }
}

fn ema_update(target: &mut ParamStore, source: &ParamStore, coef: f64) {
    let ids: Vec<_> = source.ids().collect();
    for id in ids {
        let s = source.value(id);
        ndarray::Zip::from(target.value_mut(id))
            .and(s)
            .for_each(|t, &s| *t = coef * *t + (1.0 - coef) * s);
    }
}

/// Line-delimited metrics file. Opening at step `k` drops rows past `k`,
/// so a resumed run does not duplicate steps.
struct MetricsLog {
    file: fs::File,
}

impl MetricsLog {
    fn open(path: &Path, keep_through: u64) -> Result<Self> {
        let mut kept = Vec::new();
        if keep_through > 0 && path.exists() {
            for line in BufReader::new(fs::File::open(path)?).lines() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let row: StepMetrics = serde_json::from_str(&line)?;
                if row.step <= keep_through {
                    kept.push(line);
                }
            }
        }
        let mut file = fs::File::create(path)?;
        for line in kept {
            writeln!(file, "{line}")?;
        }
        Ok(Self { file })
    }

    fn append(&mut self, m: &StepMetrics) -> Result<()> {
        writeln!(self.file, "{}", serde_json::to_string(m)?)?;
        self.file.flush()?;
        Ok(())
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<StepMetrics>> {
    crate::corpus::read_jsonl(path)
}
