//! Finite-difference verification of the analytic gradients of every loss.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Matrix};
use crate::error::Result;
use crate::images::Pixels;
use crate::model::{Model, ModelConfig};
use crate::objectives::{mask_tokens, normalize_rows, sample_itm_negatives, EmbeddingQueue, ItmNegatives, MaskedText, NegativeStrategy, TargetMode};
use crate::tokenizer::Encoded;
use crate::trainer::{forward_losses, LossVars, StepInputs};

pub const LOSS_NAMES: [&str; 5] = ["itc", "itm", "mlm", "imc", "total"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheckOptions {
    /// Coordinates sampled per loss.
    pub n_coords: usize,
    /// Largest acceptable relative error.
    pub tolerance: f64,
    /// Finite-difference step. Smaller steps lose tiny gradients to
    /// round-off; larger ones pick up fourth-order truncation error.
    pub step: f64,
    /// Lower bound on the relative-error denominator, so coordinates whose
    /// gradient is round-off sized are judged on absolute error.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            n_coords: 100,
            tolerance: 1e-5,
            step: 1e-3,
            floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoordCheck {
    pub param: String,
    pub row: usize,
    pub col: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossCheck {
    pub loss: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub failures: Vec<CoordCheck>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub losses: Vec<LossCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.losses.iter().all(|l| l.failures.is_empty())
    }

    pub fn coords_checked(&self) -> usize {
        self.losses.iter().map(|l| l.checked).sum()
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn pick(lv: &LossVars, which: usize) -> crate::autograd::Var {
    [lv.itc, lv.itm, lv.mlm, lv.imc, lv.total][which]
}

fn loss_values(model: &Model, inputs: &StepInputs<'_>, negatives: &ItmNegatives) -> Result<[f64; 5]> {
    let mut g = Graph::new();
    let lv = forward_losses(model, &mut g, inputs, &mut |_| Ok(negatives.clone()))?;
    Ok([0, 1, 2, 3, 4].map(|k| g.scalar(pick(&lv, k))))
}

pub fn gradient_check(
    model: &Model,
    inputs: &StepInputs<'_>,
    negatives: &ItmNegatives,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    gradient_check_with(model, inputs, negatives, opts, &|_, _| {})
}

/// As [`gradient_check`]; `tamper` may alter the analytic gradients of a
/// loss before comparison.
pub fn gradient_check_with(
    model: &Model,
    inputs: &StepInputs<'_>,
    negatives: &ItmNegatives,
    opts: &GradCheckOptions,
    tamper: &dyn Fn(&str, &mut Vec<Matrix>),
) -> Result<GradCheckReport> {
    if opts.n_coords == 0 {
        log::warn!("gradient check with zero coordinates");
        return Ok(GradCheckReport::default());
    }
    let mut g = Graph::new();
    let lv = forward_losses(model, &mut g, inputs, &mut |_| Ok(negatives.clone()))?;
    let params = model.params();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport::default();
    for (which, name) in LOSS_NAMES.iter().enumerate() {
        let mut analytic = g.backward(pick(&lv, which)).to_dense(params);
        tamper(name, &mut analytic);
        // Sample among parameters this loss actually reaches.
        let live: Vec<(usize, usize)> = analytic
            .iter()
            .enumerate()
            .filter(|(_, a)| a.iter().any(|v| *v != 0.0))
            .map(|(k, a)| (k, a.len()))
            .collect();
        let mut check = LossCheck {
            loss: name.to_string(),
            checked: 0,
            max_rel_error: 0.0,
            failures: Vec::new(),
        };
        if live.is_empty() {
            log::warn!("gradient check: {name} has no parameter gradient");
            report.losses.push(check);
            continue;
        }
        for _ in 0..opts.n_coords {
            let &(k, _) = live
                .choose_weighted(&mut rng, |&(_, n)| n)
                .expect("non-empty weights");
            let id = crate::autograd::ParamId(k);
            let (rows, cols) = params.value(id).dim();
            let (r, c) = (rng.random_range(0..rows), rng.random_range(0..cols));
            let eval = |delta: f64| -> Result<f64> {
                let mut m = model.clone();
                m.params_mut().value_mut(id)[[r, c]] += delta;
                Ok(loss_values(&m, inputs, negatives)?[which])
            };
            let h = opts.step;
            let numeric = (-eval(2.0 * h)? + 8.0 * eval(h)? - 8.0 * eval(-h)? + eval(-2.0 * h)?) / (12.0 * h);
            let a = analytic[k][[r, c]];
            let rel = relative_error(a, numeric, opts.floor);
            check.checked += 1;
            check.max_rel_error = check.max_rel_error.max(rel);
            if rel > opts.tolerance || !rel.is_finite() {
                check.failures.push(CoordCheck {
                    param: params.get(id).name.clone(),
                    row: r,
                    col: c,
                    analytic: a,
                    numeric,
                    rel_error: rel,
                });
            }
        }
        report.losses.push(check);
    }
    Ok(report)
}

/// An owned batch with partly filled queues, for checking a model outside a
/// training run.
#[derive(Debug, Clone)]
pub struct CheckFixture {
    pub model: Model,
    pub pixels: Vec<Pixels>,
    pub texts: Vec<Encoded>,
    pub categories: Vec<String>,
    pub masked: Vec<MaskedText>,
    pub image_queue: EmbeddingQueue,
    pub text_queue: EmbeddingQueue,
    pub negatives: ItmNegatives,
    pub target_mode: TargetMode,
}

impl CheckFixture {
    /// A batch of four demo pairs over three categories, queues holding
    /// five random entries, and a model initialised at `init_std`.
    pub fn demo(model_config: &ModelConfig, init_std: f64, seed: u64) -> Result<Self> {
        let data = crate::demo::demo_training_data(3, 2, 1, seed, model_config)?;
        let cfg = ModelConfig {
            vocab_size: data.tokenizer.vocab_size(),
            init_std,
            ..model_config.clone()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = Model::new(cfg.clone(), &mut rng)?;
        let opts = crate::corpus::SampleOptions {
            prompt_filter: None,
            allow_repeats: true,
        };
        let batch = crate::corpus::sample_batch(&data.index, 4, seed, &opts)?;
        let pixels: Vec<Pixels> = batch.triples.iter().map(|t| data.pixels[&t.image_id].clone()).collect();
        let texts: Vec<Encoded> = batch
            .triples
            .iter()
            .map(|t| data.tokens[&t.description_id].clone())
            .collect();
        let categories: Vec<String> = batch.triples.iter().map(|t| t.category_id.clone()).collect();
        // A high rate so every text has at least one masked position.
        let masked = texts.iter().map(|t| mask_tokens(t, 0.5, cfg.vocab_size, &mut rng)).collect();
        let queue_cats: Vec<String> = (0..5).map(|k| format!("c{:02}", k % 3)).collect();
        let mut fill = |q: &mut EmbeddingQueue| -> Result<()> {
            let m = Matrix::from_shape_fn((5, cfg.projection_dim), |_| rng.random_range(-1.0..1.0));
            q.enqueue(&normalize_rows(&m), &queue_cats)
        };
        let mut image_queue = EmbeddingQueue::new(8, cfg.projection_dim, true);
        let mut text_queue = EmbeddingQueue::new(8, cfg.projection_dim, true);
        fill(&mut image_queue)?;
        fill(&mut text_queue)?;
        let negatives = sample_itm_negatives(&categories, NegativeStrategy::Uniform, None, &mut rng)?;
        Ok(Self {
            model,
            pixels,
            texts,
            categories,
            masked,
            image_queue,
            text_queue,
            negatives,
            target_mode: TargetMode::Uniform,
        })
    }

    pub fn inputs(&self) -> StepInputs<'_> {
        StepInputs {
            pixels: self.pixels.iter().collect(),
            texts: self.texts.iter().collect(),
            categories: self.categories.clone(),
            masked: self.masked.clone(),
            image_queue: &self.image_queue,
            text_queue: &self.text_queue,
            target_mode: self.target_mode,
        }
    }

    pub fn check(&self, opts: &GradCheckOptions) -> Result<GradCheckReport> {
        gradient_check(&self.model, &self.inputs(), &self.negatives, opts)
    }
}
