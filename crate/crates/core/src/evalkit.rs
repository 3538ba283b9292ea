//! Cross-modal retrieval: ranking, optional matching-head reranking, and
//! R@K / AvgR reports.

use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Matrix;
use crate::corpus::CategoryIndex;
use crate::error::{Error, Result};
use crate::images::Pixels;
use crate::model::Model;
use crate::tokenizer::{Encoded, Tokenizer};

pub const K_GRID: [usize; 3] = [1, 5, 10];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    I2T,
    T2I,
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::I2T => "I2T",
            Self::T2I => "T2I",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RelevanceMode {
    /// Relevant items are the query's own captions (or images).
    Instance,
    /// Relevant items share the query's category.
    Category,
}

impl std::str::FromStr for RelevanceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "instance" => Ok(Self::Instance),
            "category" => Ok(Self::Category),
            other => Err(Error::Config(format!("unknown relevance mode {other:?}"))),
        }
    }
}

/// Relevant gallery indices per query.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RelevanceMap {
    pub mode: RelevanceMode,
    pub relevant: Vec<BTreeSet<usize>>,
}

impl RelevanceMap {
    pub fn category(query_categories: &[String], gallery_categories: &[String]) -> Result<Self> {
        let relevant = query_categories
            .iter()
            .map(|q| {
                gallery_categories
                    .iter()
                    .enumerate()
                    .filter(|(_, g)| *g == q)
                    .map(|(j, _)| j)
                    .collect()
            })
            .collect();
        Self::new(RelevanceMode::Category, relevant, gallery_categories.len())
    }

    /// From (query, gallery item) pairs.
    pub fn instance(n_queries: usize, gallery_len: usize, pairs: &[(usize, usize)]) -> Result<Self> {
        let mut relevant = vec![BTreeSet::new(); n_queries];
        for &(q, g) in pairs {
            relevant
                .get_mut(q)
                .ok_or_else(|| Error::Report(format!("query {q} out of range")))?
                .insert(g);
        }
        Self::new(RelevanceMode::Instance, relevant, gallery_len)
    }

    pub fn new(mode: RelevanceMode, relevant: Vec<BTreeSet<usize>>, gallery_len: usize) -> Result<Self> {
        for (q, r) in relevant.iter().enumerate() {
            if r.is_empty() {
                return Err(Error::Report(format!("query {q} has no relevant item")));
            }
            if r.iter().any(|&g| g >= gallery_len) {
                return Err(Error::Report(format!("query {q} names a missing gallery item")));
            }
        }
        Ok(Self { mode, relevant })
    }

    /// The same relations seen from the gallery side.
    pub fn transpose(&self, gallery_len: usize) -> Result<Self> {
        let mut relevant = vec![BTreeSet::new(); gallery_len];
        for (q, r) in self.relevant.iter().enumerate() {
            for &g in r {
                relevant[g].insert(q);
            }
        }
        Self::new(self.mode, relevant, self.relevant.len())
    }
}

/// Gallery indices per query by descending dot product; ties go to the
/// smaller gallery id.
pub fn rank_candidates(queries: &Matrix, gallery: &Matrix, gallery_ids: &[String]) -> Result<Vec<Vec<usize>>> {
    if gallery.nrows() == 0 {
        return Err(Error::Contract("empty gallery".into()));
    }
    if queries.ncols() != gallery.ncols() {
        return Err(Error::Contract(format!(
            "query width {} differs from gallery width {}",
            queries.ncols(),
            gallery.ncols()
        )));
    }
    if gallery_ids.len() != gallery.nrows() {
        return Err(Error::Contract("one id per gallery row required".into()));
    }
    let scores = queries.dot(&gallery.t());
    Ok(scores
        .rows()
        .into_iter()
        .map(|s| {
            let mut order: Vec<usize> = (0..gallery.nrows()).collect();
            order.sort_by(|&a, &b| {
                s[b].partial_cmp(&s[a])
                    .unwrap_or(Ordering::Equal)
                    .then_with(|| gallery_ids[a].cmp(&gallery_ids[b]))
            });
            order
        })
        .collect())
}

/// Reorders the first `k` entries by descending `score`, keeping the
/// incoming order among equal scores. Entries past `k` are untouched.
pub fn rerank_topk(ranked: &[usize], k: usize, mut score: impl FnMut(usize) -> Result<f64>) -> Result<Vec<usize>> {
    let k = k.min(ranked.len());
    if k <= 1 {
        return Ok(ranked.to_vec());
    }
    let mut head: Vec<(usize, f64)> = ranked[..k].iter().map(|&c| Ok((c, score(c)?))).collect::<Result<_>>()?;
    head.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal));
    Ok(head.into_iter().map(|(c, _)| c).chain(ranked[k..].iter().copied()).collect())
}

/// Percentage of queries with a relevant item in the top `k`.
pub fn recall_at_k(ranked: &[Vec<usize>], relevance: &RelevanceMap, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::Report("k must be at least 1".into()));
    }
    if ranked.is_empty() {
        return Err(Error::Report("no queries".into()));
    }
    if ranked.len() != relevance.relevant.len() {
        return Err(Error::Report("relevance map does not cover every query".into()));
    }
    let hits = ranked
        .iter()
        .zip(&relevance.relevant)
        .filter(|(r, rel)| r.iter().take(k).any(|g| rel.contains(g)))
        .count();
    Ok(100.0 * hits as f64 / ranked.len() as f64)
}

pub fn avg_recall(r1: f64, r5: f64, r10: f64) -> f64 {
    (r1 + r5 + r10) / 3.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub direction: Direction,
    pub mode: RelevanceMode,
    /// Matching-head rerank depth, if reranking was applied.
    pub rerank_k: Option<usize>,
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    pub avg_r: f64,
    pub queries: usize,
}

impl RetrievalReport {
    pub fn from_rankings(
        direction: Direction,
        ranked: &[Vec<usize>],
        relevance: &RelevanceMap,
        rerank_k: Option<usize>,
    ) -> Result<Self> {
        let r1 = recall_at_k(ranked, relevance, 1)?;
        let r5 = recall_at_k(ranked, relevance, 5)?;
        let r10 = recall_at_k(ranked, relevance, 10)?;
        Ok(Self {
            direction,
            mode: relevance.mode,
            rerank_k,
            r1,
            r5,
            r10,
            avg_r: avg_recall(r1, r5, r10),
            queries: ranked.len(),
        })
    }
}

/// Mean of the two directions' AvgR.
pub fn overall_avg_r(i2t: &RetrievalReport, t2i: &RetrievalReport) -> f64 {
    (i2t.avg_r + t2i.avg_r) / 2.0
}

/// Percentile interval of R@k over query resamples.
pub fn bootstrap_recall(
    ranked: &[Vec<usize>],
    relevance: &RelevanceMap,
    k: usize,
    resamples: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if ranked.is_empty() || resamples == 0 {
        return Err(Error::Report("bootstrap needs queries and resamples".into()));
    }
    let hits: Vec<bool> = ranked
        .iter()
        .zip(&relevance.relevant)
        .map(|(r, rel)| r.iter().take(k).any(|g| rel.contains(g)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = hits.len();
    let mut stats: Vec<f64> = (0..resamples)
        .map(|_| 100.0 * (0..n).filter(|_| hits[rng.random_range(0..n)]).count() as f64 / n as f64)
        .collect();
    stats.sort_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
    let at = |q: f64| stats[((q * (resamples - 1) as f64).round() as usize).min(resamples - 1)];
    Ok((at(0.025), at(0.975)))
}

/// Scores an (image, text) pair by gallery indices.
pub trait PairScorer {
    fn score(&mut self, image: usize, text: usize) -> Result<f64>;
}

/// Embeddings and labels for one evaluation split.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSet {
    pub image_ids: Vec<String>,
    pub text_ids: Vec<String>,
    pub image_categories: Vec<String>,
    pub text_categories: Vec<String>,
    pub image_emb: Matrix,
    pub text_emb: Matrix,
    /// (image index, text index) pairs for instance-mode relevance.
    pub instance_pairs: Vec<(usize, usize)>,
}

/// Both directions over one shared gallery.
pub fn evaluate(
    set: &EvalSet,
    mode: RelevanceMode,
    rerank_k: usize,
    scorer: Option<&mut dyn PairScorer>,
) -> Result<(RetrievalReport, RetrievalReport)> {
    let i2t_rel = match mode {
        RelevanceMode::Category => RelevanceMap::category(&set.image_categories, &set.text_categories)?,
        RelevanceMode::Instance => {
            RelevanceMap::instance(set.image_ids.len(), set.text_ids.len(), &set.instance_pairs)?
        }
    };
    let t2i_rel = i2t_rel.transpose(set.text_ids.len())?;
    let mut i2t = rank_candidates(&set.image_emb, &set.text_emb, &set.text_ids)?;
    let mut t2i = rank_candidates(&set.text_emb, &set.image_emb, &set.image_ids)?;
    let rerank = match scorer {
        Some(s) if rerank_k > 0 => {
            for (i, r) in i2t.iter_mut().enumerate() {
                *r = rerank_topk(r, rerank_k, |t| s.score(i, t))?;
            }
            for (t, r) in t2i.iter_mut().enumerate() {
                *r = rerank_topk(r, rerank_k, |i| s.score(i, t))?;
            }
            Some(rerank_k)
        }
        _ => None,
    };
    Ok((
        RetrievalReport::from_rankings(Direction::I2T, &i2t, &i2t_rel, rerank)?,
        RetrievalReport::from_rankings(Direction::T2I, &t2i, &t2i_rel, rerank)?,
    ))
}

/// Pixels and tokens of an evaluation split, in id order.
#[derive(Debug, Clone)]
pub struct EvalInputs {
    pub image_ids: Vec<String>,
    pub text_ids: Vec<String>,
    pub image_categories: Vec<String>,
    pub text_categories: Vec<String>,
    pub pixels: Vec<Pixels>,
    pub tokens: Vec<Encoded>,
}

impl EvalInputs {
    pub fn from_index(
        index: &CategoryIndex,
        tokenizer: &Tokenizer,
        model: &Model,
        image_base: Option<&Path>,
    ) -> Result<Self> {
        let c = model.config();
        let mut out = Self {
            image_ids: Vec::new(),
            text_ids: Vec::new(),
            image_categories: Vec::new(),
            text_categories: Vec::new(),
            pixels: Vec::new(),
            tokens: Vec::new(),
        };
        for r in index.images() {
            out.image_ids.push(r.image_id.clone());
            out.image_categories.push(r.category_id.clone());
            out.pixels
                .push(crate::images::load(&r.source, image_base, c.image_size, c.channels)?);
        }
        for d in index.descriptions() {
            out.text_ids.push(d.description_id.clone());
            out.text_categories.push(d.category_id.clone());
            out.tokens.push(tokenizer.encode(&d.text, c.max_text_len));
        }
        if out.image_ids.is_empty() || out.text_ids.is_empty() {
            return Err(Error::Report("evaluation split needs images and descriptions".into()));
        }
        Ok(out)
    }

    pub fn embed(&self, model: &Model) -> Result<EvalSet> {
        let stack = |rows: Vec<ndarray::Array1<f64>>| -> Matrix {
            let d = rows.first().map_or(0, |r| r.len());
            let mut m = Matrix::zeros((rows.len(), d));
            for (mut dst, src) in m.rows_mut().into_iter().zip(rows) {
                dst.assign(&src);
            }
            m
        };
        let image_emb = stack(self.pixels.iter().map(|p| model.embed_image(p)).collect::<Result<_>>()?);
        let text_emb = stack(self.tokens.iter().map(|t| model.embed_text(t)).collect::<Result<_>>()?);
        Ok(EvalSet {
            image_ids: self.image_ids.clone(),
            text_ids: self.text_ids.clone(),
            image_categories: self.image_categories.clone(),
            text_categories: self.text_categories.clone(),
            image_emb,
            text_emb,
            instance_pairs: Vec::new(),
        })
    }
}

/// Matching-head probability as the rerank score.
pub struct ItmScorer<'a> {
    pub model: &'a Model,
    pub inputs: &'a EvalInputs,
}

impl PairScorer for ItmScorer<'_> {
    fn score(&mut self, image: usize, text: usize) -> Result<f64> {
        self.model
            .itm_probability(&self.inputs.pixels[image], &self.inputs.tokens[text])
    }
}

/// Report file contents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReportFile {
    pub mode: RelevanceMode,
    pub k_grid: Vec<usize>,
    pub rerank_k: Option<usize>,
    pub i2t: RetrievalReport,
    pub t2i: RetrievalReport,
    pub overall_avg_r: f64,
    pub config_hash: String,
}

impl EvalReportFile {
    pub fn new(i2t: RetrievalReport, t2i: RetrievalReport, config_hash: impl Into<String>) -> Self {
        Self {
            mode: i2t.mode,
            k_grid: K_GRID.to_vec(),
            rerank_k: i2t.rerank_k,
            overall_avg_r: overall_avg_r(&i2t, &t2i),
            i2t,
            t2i,
            config_hash: config_hash.into(),
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// One-decimal row: R@1, R@5, R@10 and AvgR per direction, then overall.
pub fn table_row(label: &str, i2t: &RetrievalReport, t2i: &RetrievalReport) -> String {
    format!(
        "{label:<14} I2T {:5.1} {:5.1} {:5.1} {:5.1} | T2I {:5.1} {:5.1} {:5.1} {:5.1} | AvgR {:5.1}",
        i2t.r1,
        i2t.r5,
        i2t.r10,
        i2t.avg_r,
        t2i.r1,
        t2i.r5,
        t2i.r10,
        t2i.avg_r,
        overall_avg_r(i2t, t2i)
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("g{i:03}")).collect()
    }

    #[test]
    fn ranking_examples() {
        let q = array![[1.0, 0.0]];
        let gallery = array![[-1.0, 0.0], [1.0, 0.0], [0.0, 1.0]];
        assert_eq!(rank_candidates(&q, &gallery, &ids(3)).unwrap(), vec![vec![1, 2, 0]]);
        let same = array![[0.5, 0.5], [0.5, 0.5], [0.5, 0.5]];
        let names: Vec<String> = ["b", "c", "a"].iter().map(|s| s.to_string()).collect();
        assert_eq!(rank_candidates(&q, &same, &names).unwrap(), vec![vec![2, 0, 1]]);
        assert!(rank_candidates(&array![[1.0, 0.0, 0.0]], &gallery, &ids(3)).is_err());
        assert!(rank_candidates(&q, &Matrix::zeros((0, 2)), &[]).is_err());
    }

    #[test]
    fn rerank_examples() {
        let ranked = vec![4, 2, 7, 1];
        // Scores that agree with the incoming order change nothing.
        let agree = rerank_topk(&ranked, 3, |c| Ok(-(ranked.iter().position(|&x| x == c).unwrap() as f64))).unwrap();
        assert_eq!(agree, ranked);
        assert_eq!(rerank_topk(&ranked, 1, |_| Ok(0.0)).unwrap(), ranked);
        assert_eq!(rerank_topk(&ranked, 0, |_| Ok(0.0)).unwrap(), ranked);
        let inverted = rerank_topk(&ranked, 3, |c| Ok(match c { 4 => 0.1, 2 => 0.5, 7 => 0.9, _ => 1.0 })).unwrap();
        assert_eq!(inverted, vec![7, 2, 4, 1]);
    }

    #[test]
    fn recall_examples() {
        let rel = RelevanceMap::instance(2, 12, &[(0, 0), (1, 3)]).unwrap();
        let first = vec![vec![0, 1, 2], vec![3, 0, 1]];
        assert_eq!(recall_at_k(&first, &rel, 1).unwrap(), 100.0);
        let late: Vec<Vec<usize>> = vec![(1..12).chain([0]).collect(), vec![0, 1, 2, 4, 5, 6, 7, 8, 9, 10, 11, 3]];
        assert_eq!(recall_at_k(&late, &rel, 10).unwrap(), 0.0);
        assert!(recall_at_k(&[], &rel, 1).is_err());
        let rel10 = RelevanceMap::instance(10, 10, &(0..10).map(|q| (q, q)).collect::<Vec<_>>()).unwrap();
        let ranked: Vec<Vec<usize>> = (0..10)
            .map(|q| {
                let mut r: Vec<usize> = (0..10).filter(|&g| g != q).collect();
                r.insert(if q < 3 { 2 } else { 7 }, q);
                r
            })
            .collect();
        assert_eq!(recall_at_k(&ranked, &rel10, 5).unwrap(), 30.0);
    }

    #[test]
    fn avg_recall_examples() {
        assert_eq!(format!("{:.1}", avg_recall(85.4, 97.7, 98.9)), "94.0");
        assert_eq!(format!("{:.1}", avg_recall(86.8, 97.6, 99.3)), "94.6");
        assert_eq!(avg_recall(0.0, 0.0, 0.0), 0.0);
        assert_eq!(format!("{:.1}", (94.6 + 86.2) / 2.0), "90.4");
    }

    #[test]
    fn instance_fixture_with_five_captions() {
        // Three images, five captions each; captions sit near their image.
        let image_emb = array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let text_emb = Matrix::from_shape_fn((15, 3), |(t, d)| if d == t / 5 { 1.0 } else { 0.1 * (t % 5) as f64 });
        let set = EvalSet {
            image_ids: ids(3),
            text_ids: ids(15),
            image_categories: vec!["a".into(); 3],
            text_categories: vec!["a".into(); 15],
            image_emb,
            text_emb,
            instance_pairs: (0..15).map(|t| (t / 5, t)).collect(),
        };
        let (i2t, t2i) = evaluate(&set, RelevanceMode::Instance, 0, None).unwrap();
        assert_eq!((i2t.r1, t2i.r1), (100.0, 100.0));
        assert_eq!((i2t.queries, t2i.queries), (3, 15));
        // Category mode with one shared category is trivially perfect.
        let (c, _) = evaluate(&set, RelevanceMode::Category, 0, None).unwrap();
        assert_eq!(c.r1, 100.0);
    }

    #[test]
    fn bootstrap_brackets_point_estimate() {
        let rel = RelevanceMap::instance(20, 20, &(0..20).map(|q| (q, q)).collect::<Vec<_>>()).unwrap();
        let ranked: Vec<Vec<usize>> = (0..20)
            .map(|q| if q % 2 == 0 { vec![q] } else { vec![(q + 1) % 20] })
            .collect();
        let (lo, hi) = bootstrap_recall(&ranked, &rel, 1, 500, 3).unwrap();
        assert!(lo < 50.0 && hi > 50.0 && lo >= 0.0 && hi <= 100.0);
    }

    #[test]
    fn missing_relevance_is_an_error() {
        assert!(RelevanceMap::category(&["a".into()], &["b".into()]).is_err());
        assert!(RelevanceMap::instance(2, 3, &[(0, 1)]).is_err());
        assert!(RelevanceMap::instance(1, 3, &[(0, 5)]).is_err());
    }

    #[test]
    fn report_file_round_trip() {
        let rel = RelevanceMap::instance(1, 1, &[(0, 0)]).unwrap();
        let r = RetrievalReport::from_rankings(Direction::I2T, &[vec![0]], &rel, None).unwrap();
        let t = RetrievalReport {
            direction: Direction::T2I,
            ..r.clone()
        };
        let f = EvalReportFile::new(r, t, "abc");
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.json");
        f.write(&p).unwrap();
        assert_eq!(EvalReportFile::read(&p).unwrap(), f);
        assert_eq!(f.overall_avg_r, 100.0);
        assert!(table_row("All", &f.i2t, &f.t2i).contains("100.0"));
    }
}
