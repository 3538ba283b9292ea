//! The four pre-training losses, embedding queues and ITM negative mining.

use std::collections::VecDeque;

use ndarray::{Array1, ArrayView1};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Matrix, Var};
use crate::error::{Error, Result};
use crate::tokenizer::{is_special, Encoded, MASK, SPECIALS};

pub const TAU_INIT: f64 = 0.07;
pub const TAU_MIN: f64 = 1e-3;
pub const TAU_MAX: f64 = 10.0;
/// Logit offset that removes a candidate: `exp` of it underflows to zero.
const EXCLUDED: f64 = -1e30;

pub fn similarity(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.dot(&b)
}

/// How category positives become a cross-entropy target.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetMode {
    /// Uniform distribution over positives.
    #[default]
    Uniform,
    /// Weight 1 on every positive (sum of per-positive log-losses).
    BinarySum,
}

impl std::str::FromStr for TargetMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Self::Uniform),
            "binary-sum" => Ok(Self::BinarySum),
            other => Err(Error::Config(format!("unknown target mode {other:?}"))),
        }
    }
}

/// FIFO of embeddings tagged with their category.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingQueue {
    capacity: usize,
    dim: usize,
    require_unit_norm: bool,
    entries: VecDeque<(Vec<f64>, String)>,
}

pub const QUEUE_NORM_TOL: f64 = 1e-5;

impl EmbeddingQueue {
    pub fn new(capacity: usize, dim: usize, require_unit_norm: bool) -> Self {
        Self {
            capacity,
            dim,
            require_unit_norm,
            entries: VecDeque::with_capacity(capacity),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Appends rows in order, evicting the oldest beyond capacity. The
    /// whole batch is validated before anything is stored.
    pub fn enqueue(&mut self, embeddings: &Matrix, categories: &[String]) -> Result<()> {
        if embeddings.nrows() != categories.len() || embeddings.ncols() != self.dim {
            return Err(Error::Contract(format!(
                "enqueue of {:?} with {} tags into a queue of width {}",
                embeddings.dim(),
                categories.len(),
                self.dim
            )));
        }
        if self.require_unit_norm {
            for (i, row) in embeddings.rows().into_iter().enumerate() {
                let n = row.dot(&row).sqrt();
                if (n - 1.0).abs() > QUEUE_NORM_TOL {
                    return Err(Error::Contract(format!("queued embedding {i} has norm {n}")));
                }
            }
        }
        for (row, cat) in embeddings.rows().into_iter().zip(categories) {
            if self.capacity == 0 {
                break;
            }
            if self.entries.len() == self.capacity {
                self.entries.pop_front();
            }
            self.entries.push_back((row.to_vec(), cat.clone()));
        }
        Ok(())
    }

    /// Oldest first.
    pub fn matrix(&self) -> Matrix {
        let mut m = Matrix::zeros((self.entries.len(), self.dim));
        for (mut r, (v, _)) in m.rows_mut().into_iter().zip(&self.entries) {
            r.assign(&ArrayView1::from(v.as_slice()));
        }
        m
    }

    pub fn categories(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(_, c)| c.as_str())
    }

    pub fn entries(&self) -> impl Iterator<Item = (&[f64], &str)> {
        self.entries.iter().map(|(v, c)| (v.as_slice(), c.as_str()))
    }
}

/// Per-step loss values.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub itc: f64,
    pub itm: f64,
    pub mlm: f64,
    pub imc: f64,
}

impl LossComponents {
    /// Unweighted sum.
    pub fn total(&self) -> f64 {
        self.itc + self.itm + self.mlm + self.imc
    }

    pub fn all_finite(&self) -> bool {
        [self.itc, self.itm, self.mlm, self.imc].iter().all(|v| v.is_finite())
    }
}

pub fn total_loss(g: &mut Graph, itc: Var, itm: Var, mlm: Var, imc: Var) -> Var {
    let a = g.add(itc, itm);
    let b = g.add(mlm, imc);
    g.add(a, b)
}

/// `-sum(y * log_softmax(logits)) / denom`.
pub fn soft_cross_entropy(g: &mut Graph, logits: Var, targets: Matrix, denom: f64) -> Var {
    let lp = g.log_softmax_rows(logits);
    let y = g.constant(targets);
    let prod = g.mul(lp, y);
    let s = g.sum_all(prod);
    g.scale(s, -1.0 / denom)
}

/// `1 x 1` node holding `1/τ` computed from a `1 x 1` log-temperature node.
pub fn inverse_temperature(g: &mut Graph, log_tau: Var) -> Var {
    let neg = g.scale(log_tau, -1.0);
    g.exp(neg)
}

/// One direction of a contrastive loss plus how many queries were dropped
/// for lacking a positive.
#[derive(Debug, Clone, Copy)]
pub struct DirectionLoss {
    pub loss: Var,
    pub included: usize,
    pub excluded: usize,
}

/// Contrastive cross-entropy of `queries` against in-batch candidates
/// followed by queue candidates.
#[allow(clippy::too_many_arguments)]
pub fn contrastive_direction(
    g: &mut Graph,
    queries: Var,
    batch_candidates: Var,
    queue: &EmbeddingQueue,
    categories: &[String],
    inv_tau: Var,
    exclude_self: bool,
    mode: TargetMode,
) -> DirectionLoss {
    let b = categories.len();
    let cands = if queue.is_empty() {
        batch_candidates
    } else {
        let q = g.constant(queue.matrix());
        g.concat_rows(&[batch_candidates, q])
    };
    let sims = g.matmul_t(queries, cands);
    let mut logits = g.mul_scalar(sims, inv_tau);
    let cand_cats: Vec<&str> = categories.iter().map(String::as_str).chain(queue.categories()).collect();
    let n = cand_cats.len();
    if exclude_self {
        let mask = g.constant(Matrix::from_shape_fn((b, n), |(i, j)| if i == j { EXCLUDED } else { 0.0 }));
        logits = g.add(logits, mask);
    }
    let mut y = Matrix::zeros((b, n));
    let mut included = 0;
    for (i, cat) in categories.iter().enumerate() {
        let pos: Vec<usize> = (0..n)
            .filter(|&j| cand_cats[j] == cat && !(exclude_self && i == j))
            .collect();
        if pos.is_empty() {
            continue;
        }
        included += 1;
        let w = match mode {
            TargetMode::Uniform => 1.0 / pos.len() as f64,
            TargetMode::BinarySum => 1.0,
        };
        for j in pos {
            y[[i, j]] = w;
        }
    }
    let loss = if included == 0 {
        g.constant_scalar(0.0)
    } else {
        soft_cross_entropy(g, logits, y, included as f64)
    };
    DirectionLoss {
        loss,
        included,
        excluded: b - included,
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ContrastiveLoss {
    pub loss: Var,
    pub forward: DirectionLoss,
    pub backward: DirectionLoss,
}

fn symmetric(g: &mut Graph, a: DirectionLoss, b: DirectionLoss, what: &str) -> ContrastiveLoss {
    if a.included == 0 && b.included == 0 {
        log::warn!("{what}: no query has a positive candidate; loss defined as zero");
    }
    let s = g.add(a.loss, b.loss);
    ContrastiveLoss {
        loss: g.scale(s, 0.5),
        forward: a,
        backward: b,
    }
}

/// Image-text contrastive loss; image queries rank texts and vice versa.
#[allow(clippy::too_many_arguments)]
pub fn itc_loss(
    g: &mut Graph,
    image: Var,
    text: Var,
    categories: &[String],
    image_queue: &EmbeddingQueue,
    text_queue: &EmbeddingQueue,
    inv_tau: Var,
    mode: TargetMode,
) -> ContrastiveLoss {
    let i2t = contrastive_direction(g, image, text, text_queue, categories, inv_tau, false, mode);
    let t2i = contrastive_direction(g, text, image, image_queue, categories, inv_tau, false, mode);
    symmetric(g, i2t, t2i, "itc")
}

/// Intra-modal contrastive loss: image-image and text-text, self excluded.
#[allow(clippy::too_many_arguments)]
pub fn imc_loss(
    g: &mut Graph,
    image: Var,
    text: Var,
    categories: &[String],
    image_queue: &EmbeddingQueue,
    text_queue: &EmbeddingQueue,
    inv_tau: Var,
    mode: TargetMode,
) -> ContrastiveLoss {
    let ii = contrastive_direction(g, image, image, image_queue, categories, inv_tau, true, mode);
    let tt = contrastive_direction(g, text, text, text_queue, categories, inv_tau, true, mode);
    symmetric(g, ii, tt, "imc")
}

/// Inputs for evaluating the contrastive losses on plain arrays.
#[derive(Debug, Clone, Copy)]
pub struct ContrastiveBatch<'a> {
    pub image: &'a Matrix,
    pub text: &'a Matrix,
    pub categories: &'a [String],
    pub image_queue: &'a EmbeddingQueue,
    pub text_queue: &'a EmbeddingQueue,
    pub tau: f64,
    pub mode: TargetMode,
}

type ContrastiveFn =
    fn(&mut Graph, Var, Var, &[String], &EmbeddingQueue, &EmbeddingQueue, Var, TargetMode) -> ContrastiveLoss;

fn eval_contrastive(b: &ContrastiveBatch<'_>, f: ContrastiveFn) -> f64 {
    let mut g = Graph::new();
    let i = g.constant(b.image.clone());
    let t = g.constant(b.text.clone());
    let inv = g.constant_scalar(1.0 / b.tau);
    let l = f(&mut g, i, t, b.categories, b.image_queue, b.text_queue, inv, b.mode);
    g.scalar(l.loss)
}

pub fn itc_loss_value(batch: &ContrastiveBatch<'_>) -> f64 {
    eval_contrastive(batch, itc_loss)
}

pub fn imc_loss_value(batch: &ContrastiveBatch<'_>) -> f64 {
    eval_contrastive(batch, imc_loss)
}

/// Mean two-way cross-entropy; column 1 of `logits` means "matched".
pub fn itm_loss(g: &mut Graph, logits: Var, matched: &[bool]) -> Var {
    let n = matched.len();
    assert_eq!(g.shape(logits), (n, 2), "itm logits shape");
    if n == 0 {
        log::warn!("itm: empty batch; loss defined as zero");
        return g.constant_scalar(0.0);
    }
    if matched.iter().all(|&m| m) || matched.iter().all(|&m| !m) {
        log::info!("itm: batch holds a single class");
    }
    let y = Matrix::from_shape_fn((n, 2), |(i, j)| if (j == 1) == matched[i] { 1.0 } else { 0.0 });
    soft_cross_entropy(g, logits, y, n as f64)
}

pub fn itm_loss_value(logits: &Matrix, matched: &[bool]) -> f64 {
    let mut g = Graph::new();
    let l = g.constant(logits.clone());
    let loss = itm_loss(&mut g, l, matched);
    g.scalar(loss)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NegativeStrategy {
    #[default]
    Uniform,
    /// Most similar category-disjoint candidate under the contrastive score.
    Hard,
}

impl std::str::FromStr for NegativeStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Self::Uniform),
            "hard" => Ok(Self::Hard),
            other => Err(Error::Config(format!("unknown negative strategy {other:?}"))),
        }
    }
}

/// One mismatched text per image anchor and one mismatched image per text
/// anchor, as batch indices.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItmNegatives {
    pub text_for_image: Vec<Option<usize>>,
    pub image_for_text: Vec<Option<usize>>,
    pub skipped: usize,
}

impl ItmNegatives {
    /// (image index, text index) of every negative pair.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        let a = self
            .text_for_image
            .iter()
            .enumerate()
            .filter_map(|(i, t)| t.map(|t| (i, t)));
        let b = self
            .image_for_text
            .iter()
            .enumerate()
            .filter_map(|(t, i)| i.map(|i| (i, t)));
        a.chain(b).collect()
    }
}

/// `sims[i][j]` is the image-i / text-j contrastive score; required for the
/// hard strategy. Ties go to the lowest index.
pub fn sample_itm_negatives(
    categories: &[String],
    strategy: NegativeStrategy,
    sims: Option<&Matrix>,
    rng: &mut impl Rng,
) -> Result<ItmNegatives> {
    let b = categories.len();
    if strategy == NegativeStrategy::Hard && sims.is_none_or(|s| s.dim() != (b, b)) {
        return Err(Error::Contract("hard negatives need a batch x batch similarity matrix".into()));
    }
    let mut out = ItmNegatives::default();
    let mut pick = |anchor: usize, score: &dyn Fn(usize) -> f64| -> Option<usize> {
        let cands: Vec<usize> = (0..b).filter(|&j| categories[j] != categories[anchor]).collect();
        if cands.is_empty() {
            out.skipped += 1;
            return None;
        }
        Some(match strategy {
            NegativeStrategy::Uniform => cands[rng.random_range(0..cands.len())],
            NegativeStrategy::Hard => cands.iter().copied().fold(cands[0], |best, j| {
                if score(j) > score(best) {
                    j
                } else {
                    best
                }
            }),
        })
    };
    let zero = Matrix::zeros((b, b));
    let s = sims.unwrap_or(&zero);
    let text_for_image: Vec<_> = (0..b).map(|i| pick(i, &|j| s[[i, j]])).collect();
    let image_for_text: Vec<_> = (0..b).map(|t| pick(t, &|j| s[[j, t]])).collect();
    out.text_for_image = text_for_image;
    out.image_for_text = image_for_text;
    if out.skipped > 0 {
        log::info!("itm: {} anchors had no category-disjoint candidate", out.skipped);
    }
    Ok(out)
}

/// A corrupted copy of a token sequence and what to predict where.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedText {
    pub input: Encoded,
    pub positions: Vec<usize>,
    pub targets: Vec<u32>,
}

/// Selects each real, non-special token with probability `rate`; selected
/// tokens become `[MASK]` 80% of the time, a random word 10%, unchanged 10%.
pub fn mask_tokens(text: &Encoded, rate: f64, vocab_size: usize, rng: &mut impl Rng) -> MaskedText {
    let mut input = text.clone();
    let mut positions = Vec::new();
    let mut targets = Vec::new();
    let words = SPECIALS.len() as u32..vocab_size as u32;
    for i in 0..text.ids.len() {
        if !text.mask[i] || is_special(text.ids[i]) {
            continue;
        }
        if rng.random::<f64>() >= rate {
            continue;
        }
        positions.push(i);
        targets.push(text.ids[i]);
        let r: f64 = rng.random();
        if r < 0.8 {
            input.ids[i] = MASK;
        } else if r < 0.9 && !words.is_empty() {
            input.ids[i] = rng.random_range(words.clone());
        }
    }
    MaskedText {
        input,
        positions,
        targets,
    }
}

/// Mean vocabulary cross-entropy over the given rows of logits.
pub fn mlm_loss(g: &mut Graph, logits: Option<Var>, targets: &[u32]) -> Var {
    let Some(logits) = logits.filter(|_| !targets.is_empty()) else {
        log::warn!("mlm: no masked tokens in batch; loss defined as zero");
        return g.constant_scalar(0.0);
    };
    let (k, v) = g.shape(logits);
    assert_eq!(k, targets.len(), "mlm logits rows");
    let y = Matrix::from_shape_fn((k, v), |(i, j)| if targets[i] as usize == j { 1.0 } else { 0.0 });
    soft_cross_entropy(g, logits, y, k as f64)
}

pub fn mlm_loss_value(logits: &Matrix, targets: &[u32]) -> f64 {
    let mut g = Graph::new();
    let l = (logits.nrows() > 0).then(|| g.constant(logits.clone()));
    let loss = mlm_loss(&mut g, l, targets);
    g.scalar(loss)
}

/// Row-normalizes a matrix, as the projection heads do.
pub fn normalize_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for mut r in out.rows_mut() {
        let n = r.dot(&r).sqrt().max(crate::model::NORM_EPS);
        r.mapv_inplace(|v| v / n);
    }
    out
}

pub fn row(m: &Matrix, i: usize) -> Array1<f64> {
    m.row(i).to_owned()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cats(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    fn empty(dim: usize) -> EmbeddingQueue {
        EmbeddingQueue::new(8, dim, true)
    }

    /// Brute force: per query, candidates in (batch, queue) order.
    fn oracle_direction(
        q: &Matrix,
        batch: &Matrix,
        queue: &[(Vec<f64>, String)],
        cats: &[String],
        tau: f64,
        exclude_self: bool,
    ) -> f64 {
        let mut total = 0.0;
        let mut n = 0;
        for i in 0..q.nrows() {
            let mut logits = Vec::new();
            let mut pos = Vec::new();
            for j in 0..batch.nrows() {
                if exclude_self && i == j {
                    continue;
                }
                logits.push(q.row(i).dot(&batch.row(j)) / tau);
                pos.push(cats[j] == cats[i]);
            }
            for (v, c) in queue {
                logits.push(q.row(i).iter().zip(v).map(|(a, b)| a * b).sum::<f64>() / tau);
                pos.push(*c == cats[i]);
            }
            let npos = pos.iter().filter(|&&p| p).count();
            if npos == 0 {
                continue;
            }
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
            let ce: f64 = logits
                .iter()
                .zip(&pos)
                .filter(|(_, &p)| p)
                .map(|(l, _)| -(l - lse) / npos as f64)
                .sum();
            total += ce;
            n += 1;
        }
        if n == 0 {
            0.0
        } else {
            total / n as f64
        }
    }

    #[test]
    fn similarity_examples() {
        let v = array![0.6, 0.8];
        let o = array![-0.8, 0.6];
        assert_eq!(similarity(v.view(), v.view()), 1.0);
        assert_eq!(similarity(v.view(), o.view()), 0.0);
        assert_eq!(similarity(v.view(), (-&v).view()), -1.0);
    }

    #[test]
    fn itc_two_candidate_example() {
        // One image and one text of category a, one text of category b,
        // similarities 1 and 0, tau 1.
        let image = array![[1.0, 0.0]];
        let text = array![[1.0, 0.0]];
        let mut tq = empty(2);
        tq.enqueue(&array![[0.0, 1.0]], &cats(&["b"])).unwrap();
        let mut g = Graph::new();
        let i = g.constant(image);
        let t = g.constant(text);
        let inv = g.constant_scalar(1.0);
        let d = contrastive_direction(&mut g, i, t, &tq, &cats(&["a"]), inv, false, TargetMode::Uniform);
        let expect = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
        assert!((g.scalar(d.loss) - expect).abs() < 1e-12);
        assert!((expect - 0.3133).abs() < 1e-4);
    }

    #[test]
    fn uniform_similarities_give_log_m() {
        let e = array![[1.0, 0.0]];
        let mut tq = empty(2);
        tq.enqueue(&array![[1.0, 0.0], [1.0, 0.0], [1.0, 0.0]], &cats(&["b", "c", "d"]))
            .unwrap();
        let mut g = Graph::new();
        let i = g.constant(e.clone());
        let t = g.constant(e);
        let inv = g.constant_scalar(1.0 / 0.3);
        let d = contrastive_direction(&mut g, i, t, &tq, &cats(&["a"]), inv, false, TargetMode::Uniform);
        assert!((g.scalar(d.loss) - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn merged_positive_mass() {
        // Two equally similar positives under a uniform target: the loss is
        // -log of either one's probability, i.e. the merged-mass loss plus log 2.
        let e = array![[1.0, 0.0]];
        let mut tq = empty(2);
        tq.enqueue(&array![[1.0, 0.0], [0.0, 1.0], [0.0, -1.0]], &cats(&["a", "b", "c"]))
            .unwrap();
        let mut g = Graph::new();
        let i = g.constant(e.clone());
        let t = g.constant(e);
        let inv = g.constant_scalar(1.0);
        let d = contrastive_direction(&mut g, i, t, &tq, &cats(&["a"]), inv, false, TargetMode::Uniform);
        let (p, z) = (1f64.exp(), 2.0 * 1f64.exp() + 2.0);
        // Each positive has probability p/z; uniform target over two.
        let expect = -(p / z).ln();
        assert!((g.scalar(d.loss) - expect).abs() < 1e-12);
        let merged = -(2.0 * p / z).ln();
        assert!((expect - merged - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn contrastive_matches_oracle_on_random_batches() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for trial in 0..30 {
            let b = rng.random_range(1..5);
            let pool = ["a", "b", "c"];
            let c: Vec<String> = (0..b).map(|_| pool[rng.random_range(0..3)].to_string()).collect();
            let rand_unit = |rng: &mut ChaCha8Rng, n: usize| {
                normalize_rows(&Matrix::from_shape_fn((n, 4), |_| rng.random_range(-1.0..1.0)))
            };
            let image = rand_unit(&mut rng, b);
            let text = rand_unit(&mut rng, b);
            let m = rng.random_range(0..6);
            let mut iq = EmbeddingQueue::new(8, 4, true);
            let mut tq = EmbeddingQueue::new(8, 4, true);
            let qc: Vec<String> = (0..m).map(|_| pool[rng.random_range(0..3)].to_string()).collect();
            iq.enqueue(&rand_unit(&mut rng, m), &qc).unwrap();
            tq.enqueue(&rand_unit(&mut rng, m), &qc).unwrap();
            let tau = rng.random_range(0.05..2.0);
            let batch = ContrastiveBatch {
                image: &image,
                text: &text,
                categories: &c,
                image_queue: &iq,
                text_queue: &tq,
                tau,
                mode: TargetMode::Uniform,
            };
            let iqv: Vec<_> = iq.entries().map(|(v, c)| (v.to_vec(), c.to_string())).collect();
            let tqv: Vec<_> = tq.entries().map(|(v, c)| (v.to_vec(), c.to_string())).collect();
            let itc = 0.5
                * (oracle_direction(&image, &text, &tqv, &c, tau, false)
                    + oracle_direction(&text, &image, &iqv, &c, tau, false));
            let imc = 0.5
                * (oracle_direction(&image, &image, &iqv, &c, tau, true)
                    + oracle_direction(&text, &text, &tqv, &c, tau, true));
            let got_itc = itc_loss_value(&batch);
            let got_imc = imc_loss_value(&batch);
            assert!((got_itc - itc).abs() <= 1e-10 * itc.abs().max(1.0), "trial {trial}");
            assert!((got_imc - imc).abs() <= 1e-10 * imc.abs().max(1.0), "trial {trial}");
        }
    }

    #[test]
    fn imc_excludes_queries_without_positives() {
        let image = array![[1.0, 0.0], [0.0, 1.0]];
        let c = cats(&["a", "b"]);
        let mut iq = empty(2);
        let tq = empty(2);
        let mut g = Graph::new();
        let i = g.constant(image.clone());
        let inv = g.constant_scalar(1.0);
        let d = contrastive_direction(&mut g, i, i, &iq, &c, inv, true, TargetMode::Uniform);
        assert_eq!(d.included, 0);
        assert_eq!(g.scalar(d.loss), 0.0);

        // Category a now has a queued twin at similarity 1 and b's queued
        // vector sits at similarity 0: the a query loses -log(e/(e+1)), the b
        // query has no positive and is dropped.
        iq.enqueue(&array![[1.0, 0.0]], &cats(&["a"])).unwrap();
        let batch = ContrastiveBatch {
            image: &array![[1.0, 0.0], [0.0, 1.0]],
            text: &array![[1.0, 0.0], [0.0, 1.0]],
            categories: &c,
            image_queue: &iq,
            text_queue: &tq,
            tau: 1.0,
            mode: TargetMode::Uniform,
        };
        let mut g = Graph::new();
        let i = g.constant(image);
        let inv = g.constant_scalar(1.0);
        let d = contrastive_direction(&mut g, i, i, &iq, &c, inv, true, TargetMode::Uniform);
        assert_eq!((d.included, d.excluded), (1, 1));
        let expect = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
        assert!((g.scalar(d.loss) - expect).abs() < 1e-12);
        // Text side has an empty queue, so only the image direction counts.
        assert!((imc_loss_value(&batch) - 0.5 * expect).abs() < 1e-12);
    }

    #[test]
    fn softmax_over_candidates_sums_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let q = normalize_rows(&Matrix::from_shape_fn((3, 4), |_| rng.random_range(-1.0..1.0)));
        let mut g = Graph::new();
        let a = g.constant(q.clone());
        let s = g.matmul_t(a, a);
        let mask = g.constant(Matrix::from_shape_fn((3, 3), |(i, j)| if i == j { EXCLUDED } else { 0.0 }));
        let s = g.add(s, mask);
        let p = g.softmax_rows(s);
        for r in g.value(p).rows() {
            assert!((r.sum() - 1.0).abs() < 1e-12);
        }
        assert!((0..3).all(|i| g.value(p)[[i, i]] == 0.0));
    }

    #[test]
    fn itc_increases_with_temperature() {
        let image = array![[1.0, 0.0]];
        let text = array![[0.8, 0.6]];
        let mut tq = empty(2);
        tq.enqueue(&array![[0.0, 1.0]], &cats(&["b"])).unwrap();
        let iq = empty(2);
        let c = cats(&["a"]);
        let mut prev = f64::NEG_INFINITY;
        for k in 0..=40 {
            let tau = 0.05 * (100f64).powf(k as f64 / 40.0);
            let v = itc_loss_value(&ContrastiveBatch {
                image: &image,
                text: &text,
                categories: &c,
                image_queue: &iq,
                text_queue: &tq,
                tau,
                mode: TargetMode::Uniform,
            });
            assert!(v > prev, "not increasing at tau {tau}");
            prev = v;
        }
    }

    #[test]
    fn binary_sum_counts_each_positive() {
        let e = array![[1.0, 0.0]];
        let mut tq = empty(2);
        tq.enqueue(&array![[1.0, 0.0], [0.0, 1.0]], &cats(&["a", "b"])).unwrap();
        let mut g = Graph::new();
        let i = g.constant(e.clone());
        let t = g.constant(e);
        let inv = g.constant_scalar(1.0);
        let u = contrastive_direction(&mut g, i, t, &tq, &cats(&["a"]), inv, false, TargetMode::Uniform);
        let s = contrastive_direction(&mut g, i, t, &tq, &cats(&["a"]), inv, false, TargetMode::BinarySum);
        assert!((g.scalar(s.loss) - 2.0 * g.scalar(u.loss)).abs() < 1e-12);
    }

    #[test]
    fn queue_fifo() {
        let mut q = EmbeddingQueue::new(4, 1, false);
        let tag = |v: &[&str]| cats(v);
        q.enqueue(&array![[1.0], [2.0], [3.0]], &tag(&["a", "b", "c"])).unwrap();
        q.enqueue(&array![[4.0], [5.0], [6.0]], &tag(&["d", "e", "f"])).unwrap();
        assert_eq!(q.len(), 4);
        assert_eq!(q.matrix().column(0).to_vec(), vec![3.0, 4.0, 5.0, 6.0]);
        assert_eq!(q.categories().collect::<Vec<_>>(), vec!["c", "d", "e", "f"]);
        let mut small = EmbeddingQueue::new(2, 1, false);
        small.enqueue(&array![[1.0], [2.0], [3.0]], &tag(&["a", "b", "c"])).unwrap();
        assert_eq!(small.matrix().column(0).to_vec(), vec![2.0, 3.0]);
        assert_eq!(small.categories().collect::<Vec<_>>(), vec!["b", "c"]);
    }

    #[test]
    fn queue_rejects_non_unit_rows() {
        let mut q = EmbeddingQueue::new(4, 2, true);
        assert!(matches!(
            q.enqueue(&array![[1.0, 0.0], [1.0, 1.0]], &cats(&["a", "b"])),
            Err(Error::Contract(_))
        ));
        assert!(q.is_empty());
        assert!(q.enqueue(&array![[1.0 + 5e-6, 0.0]], &cats(&["a"])).is_ok());
    }

    #[test]
    fn itm_examples() {
        let logit = |p: f64| (p / (1.0 - p)).ln();
        let logits = Matrix::from_shape_fn((4, 2), |(i, j)| if j == 1 { logit([0.9, 0.8, 0.2, 0.3][i]) } else { 0.0 });
        let v = itm_loss_value(&logits, &[true, true, false, false]);
        let expect = -0.25 * (0.9f64.ln() + 0.8f64.ln() + 0.8f64.ln() + 0.7f64.ln());
        assert!((v - expect).abs() < 1e-12);
        // The closed form evaluates to 0.22708.
        assert!((v - 0.22708).abs() < 1e-5);
        let half = Matrix::zeros((3, 2));
        assert!((itm_loss_value(&half, &[true, false, true]) - 2f64.ln()).abs() < 1e-15);
        let sure = array![[-40.0, 40.0], [40.0, -40.0]];
        assert!(itm_loss_value(&sure, &[true, false]) < 1e-30);
        assert!(itm_loss_value(&half.slice(ndarray::s![..2, ..]).to_owned(), &[true, true]).is_finite());
    }

    #[test]
    fn negatives_cross_categories() {
        let c = cats(&["a", "b", "a", "c"]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let n = sample_itm_negatives(&c, NegativeStrategy::Uniform, None, &mut rng).unwrap();
            assert_eq!(n.skipped, 0);
            for (i, t) in n.pairs() {
                assert_ne!(c[i], c[t]);
            }
        }
        let one = cats(&["a", "a"]);
        let n = sample_itm_negatives(&one, NegativeStrategy::Uniform, None, &mut rng).unwrap();
        assert_eq!(n.skipped, 4);
        assert!(n.pairs().is_empty());
    }

    #[test]
    fn hard_negatives_follow_argmax() {
        let c = cats(&["a", "b", "c"]);
        let sims = array![[0.9, 0.1, 0.5], [0.7, 0.8, 0.2], [0.3, 0.6, 0.4]];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = sample_itm_negatives(&c, NegativeStrategy::Hard, Some(&sims), &mut rng).unwrap();
        assert_eq!(n.text_for_image, vec![Some(2), Some(0), Some(1)]);
        assert_eq!(n.image_for_text, vec![Some(1), Some(2), Some(0)]);
        assert!(sample_itm_negatives(&c, NegativeStrategy::Hard, None, &mut rng).is_err());
    }

    #[test]
    fn mask_rate_is_fifteen_percent() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let text = Encoded {
            ids: std::iter::once(crate::tokenizer::CLS).chain((0..100).map(|i| 4 + i % 20)).collect(),
            mask: vec![true; 101],
        };
        let (mut selected, mut masked, mut total) = (0usize, 0usize, 0usize);
        for _ in 0..1000 {
            let m = mask_tokens(&text, 0.15, 24, &mut rng);
            assert!(!m.positions.contains(&0));
            selected += m.positions.len();
            masked += m.positions.iter().filter(|&&p| m.input.ids[p] == MASK).count();
            total += 100;
        }
        let rate = selected as f64 / total as f64;
        assert!((rate - 0.15).abs() < 0.005, "rate {rate}");
        let frac = masked as f64 / selected as f64;
        assert!((frac - 0.8).abs() < 0.02, "mask fraction {frac}");
    }

    #[test]
    fn mlm_examples() {
        let uniform = Matrix::zeros((3, 17));
        assert!((mlm_loss_value(&uniform, &[4, 5, 6]) - 17f64.ln()).abs() < 1e-12);
        assert_eq!(mlm_loss_value(&Matrix::zeros((0, 17)), &[]), 0.0);
    }

    #[test]
    fn mlm_gradient_is_zero_off_mask() {
        let mut g = Graph::new();
        let fused = g.input(Matrix::from_shape_fn((5, 3), |(i, j)| (i * 3 + j) as f64 * 0.1));
        let w = g.constant(Matrix::from_shape_fn((3, 6), |(i, j)| ((i + 2 * j) % 5) as f64 - 2.0));
        let rows = g.gather_rows(fused, &[1, 3]);
        let logits = g.matmul(rows, w);
        let loss = mlm_loss(&mut g, Some(logits), &[2, 5]);
        let grads = g.backward(loss);
        let gf = grads.get(fused).unwrap();
        for r in [0, 2, 4] {
            assert!(gf.row(r).iter().all(|&v| v == 0.0));
        }
        assert!(gf.row(1).iter().any(|&v| v != 0.0));
    }

    #[test]
    fn total_is_unweighted_sum() {
        let c = LossComponents {
            itc: 0.3,
            itm: 0.7,
            mlm: 2.0,
            imc: 0.4,
        };
        assert!((c.total() - 3.4).abs() < 1e-12);
        let nan = LossComponents { itm: f64::NAN, ..c };
        assert!(nan.total().is_nan());
        assert!(!nan.all_finite());
        let only = LossComponents {
            itc: 0.0,
            itm: 0.0,
            mlm: 1.25,
            imc: 0.0,
        };
        assert_eq!(only.total(), 1.25);
    }
}
