//! Image/description join structure, pair sampling, and the ablation views
//! (prompt filtering, shuffled pairing).

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::promptgen::{DescriptionRecord, PromptId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Pretrain,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageSource {
    /// Path or URI of an image file.
    Uri(String),
    /// Procedural class-conditional pattern, see [`crate::images`].
    Synthetic { class: u32, seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: String,
    pub category_id: String,
    pub source: ImageSource,
    #[serde(default)]
    pub split: Split,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryMembers {
    pub images: Vec<String>,
    pub descriptions: Vec<String>,
}

/// Which categories cannot take part in pairing.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub lacking_images: Vec<String>,
    pub lacking_descriptions: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShuffleInfo {
    pub seed: u64,
    pub redraws: u32,
    /// Descriptions now listed under a category other than their own.
    pub moved: usize,
    pub total: usize,
}

/// The corpus: records plus the category-level join.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoryIndex {
    images: BTreeMap<String, ImageRecord>,
    descriptions: BTreeMap<String, DescriptionRecord>,
    description_split: BTreeMap<String, Split>,
    categories: BTreeMap<String, CategoryMembers>,
    shuffle: Option<ShuffleInfo>,
}

/// Builds the index with the category universe taken from the images.
/// A description naming a category no image has is a dangling reference.
pub fn build_manifest(images: Vec<ImageRecord>, descriptions: Vec<DescriptionRecord>) -> Result<CategoryIndex> {
    let known: BTreeSet<String> = images.iter().map(|i| i.category_id.clone()).collect();
    build_manifest_with_categories(&known, images, descriptions)
}

/// Builds the index against an explicit category list, so categories with
/// no images or no descriptions can be reported instead of rejected.
pub fn build_manifest_with_categories(
    known: &BTreeSet<String>,
    images: Vec<ImageRecord>,
    descriptions: Vec<DescriptionRecord>,
) -> Result<CategoryIndex> {
    if images.is_empty() {
        return Err(Error::Manifest("image list is empty".into()));
    }
    if descriptions.is_empty() {
        return Err(Error::Manifest("description list is empty".into()));
    }
    let mut categories: BTreeMap<String, CategoryMembers> =
        known.iter().map(|c| (c.clone(), CategoryMembers::default())).collect();
    let mut image_map = BTreeMap::new();
    for img in images {
        let members = categories.get_mut(&img.category_id).ok_or_else(|| {
            Error::Manifest(format!("image {} names unknown category {}", img.image_id, img.category_id))
        })?;
        members.images.push(img.image_id.clone());
        if image_map.insert(img.image_id.clone(), img).is_some() {
            return Err(Error::Manifest("duplicate image id".into()));
        }
    }
    let mut desc_map = BTreeMap::new();
    let mut description_split = BTreeMap::new();
    for d in descriptions {
        let members = categories.get_mut(&d.category_id).ok_or_else(|| {
            Error::Manifest(format!(
                "description {} names unknown category {}",
                d.description_id, d.category_id
            ))
        })?;
        members.descriptions.push(d.description_id.clone());
        description_split.insert(d.description_id.clone(), Split::Pretrain);
        if let Some(prev) = desc_map.insert(d.description_id.clone(), d) {
            return Err(Error::Manifest(format!("duplicate description id {}", prev.description_id)));
        }
    }
    let index = CategoryIndex {
        images: image_map,
        descriptions: desc_map,
        description_split,
        categories,
        shuffle: None,
    };
    let report = index.coverage();
    if !report.lacking_images.is_empty() || !report.lacking_descriptions.is_empty() {
        log::warn!(
            "categories without images: {:?}; without descriptions: {:?}",
            report.lacking_images,
            report.lacking_descriptions
        );
    }
    Ok(index)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "kebab-case")]
pub enum SplitPolicy {
    /// Whole categories go to evaluation.
    CategoryHoldout { eval_fraction: f64 },
    /// Each category keeps some images and descriptions back.
    InstanceHoldout { eval_fraction: f64 },
}

impl SplitPolicy {
    pub fn parse(name: &str, eval_fraction: f64) -> Result<Self> {
        match name {
            "category-holdout" => Ok(Self::CategoryHoldout { eval_fraction }),
            "instance-holdout" => Ok(Self::InstanceHoldout { eval_fraction }),
            other => Err(Error::Config(format!("unknown split policy {other:?}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::CategoryHoldout { .. } => "category-holdout",
            Self::InstanceHoldout { .. } => "instance-holdout",
        }
    }
}

/// A sampled training batch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairBatch {
    pub triples: Vec<PairTriple>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairTriple {
    pub image_id: String,
    pub description_id: String,
    pub category_id: String,
}

impl PairBatch {
    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    pub fn categories(&self) -> Vec<&str> {
        self.triples.iter().map(|t| t.category_id.as_str()).collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SampleOptions<'a> {
    /// Only descriptions from these prompt types are eligible.
    pub prompt_filter: Option<&'a [PromptId]>,
    /// Permit several triples of one category in a batch.
    pub allow_repeats: bool,
}

impl CategoryIndex {
    pub fn images(&self) -> impl Iterator<Item = &ImageRecord> {
        self.images.values()
    }

    pub fn descriptions(&self) -> impl Iterator<Item = &DescriptionRecord> {
        self.descriptions.values()
    }

    pub fn image(&self, id: &str) -> Option<&ImageRecord> {
        self.images.get(id)
    }

    pub fn description(&self, id: &str) -> Option<&DescriptionRecord> {
        self.descriptions.get(id)
    }

    pub fn description_split(&self, id: &str) -> Option<Split> {
        self.description_split.get(id).copied()
    }

    pub fn categories(&self) -> &BTreeMap<String, CategoryMembers> {
        &self.categories
    }

    pub fn shuffle_info(&self) -> Option<ShuffleInfo> {
        self.shuffle
    }

    pub fn num_images(&self) -> usize {
        self.images.len()
    }

    pub fn num_descriptions(&self) -> usize {
        self.descriptions.len()
    }

    pub fn coverage(&self) -> CoverageReport {
        let mut r = CoverageReport::default();
        for (c, m) in &self.categories {
            if m.images.is_empty() {
                r.lacking_images.push(c.clone());
            }
            if m.descriptions.is_empty() {
                r.lacking_descriptions.push(c.clone());
            }
        }
        r
    }

    fn eligible<'a>(&'a self, members: &'a CategoryMembers, filter: Option<&'a [PromptId]>) -> Vec<&'a str> {
        members
            .descriptions
            .iter()
            .filter(|d| match filter {
                None => true,
                Some(f) => f.contains(&self.descriptions[d.as_str()].prompt_id),
            })
            .map(String::as_str)
            .collect()
    }

    /// Categories with at least one image and one eligible description.
    pub fn usable_categories(&self, prompt_filter: Option<&[PromptId]>) -> Vec<&str> {
        self.categories
            .iter()
            .filter(|(_, m)| !m.images.is_empty() && !self.eligible(m, prompt_filter).is_empty())
            .map(|(c, _)| c.as_str())
            .collect()
    }

    /// Keeps only records of one split.
    pub fn view(&self, split: Split) -> CategoryIndex {
        let images: BTreeMap<_, _> = self
            .images
            .iter()
            .filter(|(_, r)| r.split == split)
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        let keep_desc = |id: &str| self.description_split.get(id).copied().unwrap_or_default() == split;
        let categories = self
            .categories
            .iter()
            .map(|(c, m)| {
                (
                    c.clone(),
                    CategoryMembers {
                        images: m.images.iter().filter(|i| images.contains_key(*i)).cloned().collect(),
                        descriptions: m.descriptions.iter().filter(|d| keep_desc(d)).cloned().collect(),
                    },
                )
            })
            .filter(|(_, m)| !m.images.is_empty() || !m.descriptions.is_empty())
            .collect();
        let descriptions: BTreeMap<_, _> = self
            .descriptions
            .iter()
            .filter(|(k, _)| keep_desc(k))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        let description_split = descriptions.keys().map(|k| (k.clone(), split)).collect();
        CategoryIndex {
            images,
            descriptions,
            description_split,
            categories,
            shuffle: self.shuffle,
        }
    }

    /// Assigns records to the pretrain and eval splits.
    pub fn assign_splits(&mut self, policy: SplitPolicy, seed: u64) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for r in self.images.values_mut() {
            r.split = Split::Pretrain;
        }
        for s in self.description_split.values_mut() {
            *s = Split::Pretrain;
        }
        match policy {
            SplitPolicy::CategoryHoldout { eval_fraction } => {
                check_fraction(eval_fraction)?;
                let cats: Vec<String> = self.categories.keys().cloned().collect();
                if cats.len() < 2 {
                    return Err(Error::Precondition("category holdout needs at least 2 categories".into()));
                }
                let n_eval = ((eval_fraction * cats.len() as f64).round() as usize).clamp(1, cats.len() - 1);
                for i in index::sample(&mut rng, cats.len(), n_eval) {
                    let m = &self.categories[&cats[i]];
                    for img in &m.images {
                        self.images.get_mut(img).expect("indexed image").split = Split::Eval;
                    }
                    for d in &m.descriptions {
                        self.description_split.insert(d.clone(), Split::Eval);
                    }
                }
            }
            SplitPolicy::InstanceHoldout { eval_fraction } => {
                check_fraction(eval_fraction)?;
                for m in self.categories.values() {
                    let n_img = holdout_count(m.images.len(), eval_fraction);
                    for i in index::sample(&mut rng, m.images.len(), n_img) {
                        self.images.get_mut(&m.images[i]).expect("indexed image").split = Split::Eval;
                    }
                    let n_desc = holdout_count(m.descriptions.len(), eval_fraction);
                    for i in index::sample(&mut rng, m.descriptions.len(), n_desc) {
                        self.description_split.insert(m.descriptions[i].clone(), Split::Eval);
                    }
                }
            }
        }
        Ok(())
    }
}

fn check_fraction(f: f64) -> Result<()> {
    if f > 0.0 && f < 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("eval fraction must lie in (0, 1), got {f}")))
    }
}

/// At least one held out (when there are two or more), never all.
fn holdout_count(n: usize, fraction: f64) -> usize {
    if n < 2 {
        return 0;
    }
    ((fraction * n as f64).round() as usize).clamp(1, n - 1)
}

/// Draws a batch: categories uniformly (distinct unless repeats are
/// allowed), then an image and an eligible description uniformly within
/// each category.
pub fn sample_batch(index: &CategoryIndex, batch_size: usize, seed: u64, opts: &SampleOptions<'_>) -> Result<PairBatch> {
    if batch_size < 2 {
        return Err(Error::Precondition(format!("batch size must be at least 2, got {batch_size}")));
    }
    if let Some(f) = opts.prompt_filter {
        if index.usable_categories(Some(f)).is_empty() && !index.usable_categories(None).is_empty() {
            return Err(Error::Sampling(format!(
                "prompt filter {f:?} leaves no eligible description in any category"
            )));
        }
    }
    let usable = index.usable_categories(opts.prompt_filter);
    if usable.len() < 2 {
        return Err(Error::Precondition(format!(
            "need at least 2 usable categories for in-batch negatives, found {}",
            usable.len()
        )));
    }
    if !opts.allow_repeats && batch_size > usable.len() {
        return Err(Error::Precondition(format!(
            "batch size {batch_size} exceeds {} usable categories; allow repeats to sample with replacement",
            usable.len()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks: Vec<usize> = if opts.allow_repeats {
        (0..batch_size).map(|_| rng.random_range(0..usable.len())).collect()
    } else {
        index::sample(&mut rng, usable.len(), batch_size).into_vec()
    };
    let triples = picks
        .into_iter()
        .map(|ci| {
            let cat = usable[ci];
            let members = &index.categories[cat];
            let eligible = index.eligible(members, opts.prompt_filter);
            let image = &members.images[rng.random_range(0..members.images.len())];
            let desc = eligible[rng.random_range(0..eligible.len())];
            PairTriple {
                image_id: image.clone(),
                description_id: desc.to_string(),
                category_id: cat.to_string(),
            }
        })
        .collect();
    Ok(PairBatch { triples, seed })
}

/// Reassigns descriptions to categories by a uniform random permutation,
/// keeping each category's description count. Images are untouched.
/// A draw that leaves every description in its own category is redrawn.
pub fn shuffle_pairs(index: &CategoryIndex, seed: u64) -> Result<CategoryIndex> {
    let with_desc = index.categories.values().filter(|m| !m.descriptions.is_empty()).count();
    if with_desc < 2 {
        log::warn!("shuffle requested on a corpus with fewer than 2 described categories; no-op");
        let mut out = index.clone();
        out.shuffle = Some(ShuffleInfo {
            seed,
            redraws: 0,
            moved: 0,
            total: index.descriptions.len(),
        });
        return Ok(out);
    }

    let slots: Vec<&str> = index
        .categories
        .iter()
        .flat_map(|(c, m)| m.descriptions.iter().map(move |_| c.as_str()))
        .collect();
    let all: Vec<&String> = index.categories.values().flat_map(|m| m.descriptions.iter()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..all.len()).collect();
    let mut redraws = 0u32;
    let moved = loop {
        order.shuffle(&mut rng);
        let moved = order
            .iter()
            .zip(&slots)
            .filter(|(&src, &slot)| index.descriptions[all[src]].category_id != slot)
            .count();
        if moved > 0 {
            break moved;
        }
        log::warn!("shuffle draw kept every description in place; redrawing");
        redraws += 1;
    };

    let mut out = index.clone();
    for m in out.categories.values_mut() {
        m.descriptions.clear();
    }
    for (&src, &slot) in order.iter().zip(&slots) {
        out.categories
            .get_mut(slot)
            .expect("slot category")
            .descriptions
            .push(all[src].clone());
    }
    out.shuffle = Some(ShuffleInfo {
        seed,
        redraws,
        moved,
        total: all.len(),
    });
    Ok(out)
}

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub version: u32,
    pub images: usize,
    pub descriptions: usize,
    pub categories: usize,
    pub splits: BTreeMap<Split, SplitCounts>,
    pub split_policy: Option<String>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub images: usize,
    pub descriptions: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum ManifestLine {
    Image(ImageRecord),
    Description {
        #[serde(flatten)]
        record: DescriptionRecord,
        split: Split,
    },
}

impl CategoryIndex {
    pub fn header(&self, split_policy: Option<&str>) -> ManifestHeader {
        let mut splits: BTreeMap<Split, SplitCounts> = BTreeMap::new();
        for r in self.images.values() {
            splits.entry(r.split).or_default().images += 1;
        }
        for s in self.description_split.values() {
            splits.entry(*s).or_default().descriptions += 1;
        }
        ManifestHeader {
            version: MANIFEST_VERSION,
            images: self.images.len(),
            descriptions: self.descriptions.len(),
            categories: self.categories.len(),
            splits,
            split_policy: split_policy.map(str::to_string),
        }
    }

    /// Header line, then one line per image and per description.
    pub fn write_manifest(&self, path: &Path, split_policy: Option<&str>) -> Result<()> {
        let mut out = std::io::BufWriter::new(fs::File::create(path)?);
        serde_json::to_writer(&mut out, &self.header(split_policy))?;
        out.write_all(b"\n")?;
        for r in self.images.values() {
            serde_json::to_writer(&mut out, &ManifestLine::Image(r.clone()))?;
            out.write_all(b"\n")?;
        }
        for (id, r) in &self.descriptions {
            let line = ManifestLine::Description {
                record: r.clone(),
                split: self.description_split[id],
            };
            serde_json::to_writer(&mut out, &line)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_manifest(path: &Path) -> Result<(ManifestHeader, CategoryIndex)> {
        let mut lines = BufReader::new(fs::File::open(path)?).lines();
        let header: ManifestHeader = match lines.next() {
            Some(l) => serde_json::from_str(&l?)?,
            None => return Err(Error::Manifest(format!("{} is empty", path.display()))),
        };
        if header.version != MANIFEST_VERSION {
            return Err(Error::Manifest(format!("unsupported manifest version {}", header.version)));
        }
        let mut images = Vec::new();
        let mut descriptions = Vec::new();
        let mut splits = Vec::new();
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str(&line)? {
                ManifestLine::Image(r) => images.push(r),
                ManifestLine::Description { record, split } => {
                    splits.push((record.description_id.clone(), split));
                    descriptions.push(record);
                }
            }
        }
        let mut index = build_manifest(images, descriptions)?;
        index.description_split.extend(splits);
        if index.images.len() != header.images || index.descriptions.len() != header.descriptions {
            return Err(Error::Manifest("manifest counts disagree with its header".into()));
        }
        Ok((header, index))
    }
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for line in BufReader::new(fs::File::open(path)?).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut out, item)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// `per_category` synthetic images for each category; class numbers follow
/// the sorted category order.
pub fn synthetic_images(categories: &[String], per_category: usize, seed: u64) -> Vec<ImageRecord> {
    let sorted: BTreeSet<&String> = categories.iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sorted
        .into_iter()
        .enumerate()
        .flat_map(|(class, cat)| {
            (0..per_category)
                .map(|k| ImageRecord {
                    image_id: format!("{cat}/img{k:04}"),
                    category_id: cat.clone(),
                    source: ImageSource::Synthetic {
                        class: class as u32,
                        seed: rng.random(),
                    },
                    split: Split::Pretrain,
                })
                .collect::<Vec<_>>()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::promptgen::{build_text_corpus, builtin_templates, CategoryEntry, FixtureBackend, PromptCache};

    fn descriptions(labels: &[(&str, &str)]) -> Vec<DescriptionRecord> {
        let entries: Vec<_> = labels
            .iter()
            .map(|(id, l)| CategoryEntry::new(*id, *l, vec![]).unwrap())
            .collect();
        let mut cache = PromptCache::in_memory(1);
        build_text_corpus(&entries, &builtin_templates(), &mut FixtureBackend::new(), &mut cache, 5)
            .unwrap()
            .records
    }

    fn fixture(n_cat: usize, imgs: usize) -> CategoryIndex {
        let names = ["duck", "goose", "heron", "swan", "crane", "gull"];
        let labels: Vec<(String, &str)> = (0..n_cat).map(|i| (format!("c{i}"), names[i])).collect();
        let refs: Vec<(&str, &str)> = labels.iter().map(|(a, b)| (a.as_str(), *b)).collect();
        let cats: Vec<String> = labels.iter().map(|(a, _)| a.clone()).collect();
        build_manifest(synthetic_images(&cats, imgs, 1), descriptions(&refs)).unwrap()
    }

    #[test]
    fn manifest_counts() {
        let descs = descriptions(&[("a", "duck"), ("b", "goose")]);
        assert_eq!(descs.len(), 90);
        let mut images = synthetic_images(&["a".into(), "b".into()], 1, 0);
        images.push(ImageRecord {
            image_id: "a/extra".into(),
            category_id: "a".into(),
            source: ImageSource::Uri("x.png".into()),
            split: Split::Pretrain,
        });
        let index = build_manifest(images, descs).unwrap();
        assert_eq!(index.num_images(), 3);
        assert_eq!(index.usable_categories(None), vec!["a", "b"]);
    }

    #[test]
    fn manifest_errors() {
        let descs = descriptions(&[("a", "duck"), ("zzz", "goose")]);
        let images = synthetic_images(&["a".into()], 1, 0);
        assert!(matches!(build_manifest(images.clone(), descs.clone()), Err(Error::Manifest(_))));
        assert!(matches!(build_manifest(vec![], descs), Err(Error::Manifest(_))));
        assert!(matches!(build_manifest(images, vec![]), Err(Error::Manifest(_))));
    }

    #[test]
    fn coverage_reports_missing_members() {
        let known: BTreeSet<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let index = build_manifest_with_categories(
            &known,
            synthetic_images(&["a".into(), "b".into()], 1, 0),
            descriptions(&[("a", "duck"), ("c", "heron")]),
        )
        .unwrap();
        let r = index.coverage();
        assert_eq!(r.lacking_images, vec!["c"]);
        assert_eq!(r.lacking_descriptions, vec!["b"]);
        assert_eq!(index.usable_categories(None), vec!["a"]);
    }

    #[test]
    fn sampling_is_deterministic_and_consistent() {
        let index = fixture(4, 3);
        let opts = SampleOptions::default();
        let a = sample_batch(&index, 4, 7, &opts).unwrap();
        let b = sample_batch(&index, 4, 7, &opts).unwrap();
        assert_eq!(a, b);
        let cats: BTreeSet<_> = a.categories().into_iter().collect();
        assert_eq!(cats.len(), 4);
        for t in &a.triples {
            assert_eq!(index.image(&t.image_id).unwrap().category_id, t.category_id);
            assert_eq!(index.description(&t.description_id).unwrap().category_id, t.category_id);
        }
        let repeats = SampleOptions {
            allow_repeats: true,
            ..Default::default()
        };
        assert_eq!(sample_batch(&index, 8, 7, &repeats).unwrap().len(), 8);
        assert!(matches!(sample_batch(&index, 8, 7, &opts), Err(Error::Precondition(_))));
        assert!(matches!(sample_batch(&index, 1, 7, &opts), Err(Error::Precondition(_))));
    }

    #[test]
    fn prompt_filter_restricts_descriptions() {
        let index = fixture(4, 2);
        let filter = [PromptId::P1];
        let opts = SampleOptions {
            prompt_filter: Some(&filter),
            allow_repeats: true,
        };
        for seed in 0..20 {
            let batch = sample_batch(&index, 6, seed, &opts).unwrap();
            for t in &batch.triples {
                assert_eq!(index.description(&t.description_id).unwrap().prompt_id, PromptId::P1);
            }
        }
    }

    #[test]
    fn filter_that_removes_everything_is_a_sampling_error() {
        let descs: Vec<_> = descriptions(&[("a", "duck"), ("b", "goose")])
            .into_iter()
            .filter(|d| d.prompt_id != PromptId::P2)
            .collect();
        let index = build_manifest(synthetic_images(&["a".into(), "b".into()], 1, 0), descs).unwrap();
        let filter = [PromptId::P2];
        let opts = SampleOptions {
            prompt_filter: Some(&filter),
            allow_repeats: false,
        };
        assert!(matches!(sample_batch(&index, 2, 0, &opts), Err(Error::Sampling(_))));
    }

    #[test]
    fn single_category_is_a_precondition_error() {
        let index = fixture(1, 2);
        let opts = SampleOptions {
            allow_repeats: true,
            ..Default::default()
        };
        assert!(matches!(sample_batch(&index, 2, 0, &opts), Err(Error::Precondition(_))));
    }

    #[test]
    fn shuffle_preserves_multisets() {
        let index = fixture(3, 2);
        let shuffled = shuffle_pairs(&index, 11).unwrap();
        let info = shuffled.shuffle_info().unwrap();
        assert!(info.moved > 0);
        for (c, m) in index.categories() {
            let s = &shuffled.categories()[c];
            assert_eq!(m.images, s.images);
            assert_eq!(m.descriptions.len(), s.descriptions.len());
        }
        let before: BTreeSet<_> = index.categories().values().flat_map(|m| m.descriptions.clone()).collect();
        let after: BTreeSet<_> = shuffled.categories().values().flat_map(|m| m.descriptions.clone()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn shuffle_never_returns_identity() {
        // Two categories with one description each: half of all draws are the identity.
        let descs: Vec<_> = descriptions(&[("a", "duck"), ("b", "goose")])
            .into_iter()
            .filter(|d| d.prompt_id == PromptId::P1 && d.response_index == 0)
            .collect();
        let index = build_manifest(synthetic_images(&["a".into(), "b".into()], 1, 0), descs).unwrap();
        let mut saw_redraw = false;
        for seed in 0..16 {
            let s = shuffle_pairs(&index, seed).unwrap();
            let info = s.shuffle_info().unwrap();
            assert_eq!(info.moved, 2);
            saw_redraw |= info.redraws > 0;
        }
        assert!(saw_redraw);
    }

    #[test]
    fn shuffle_of_single_category_is_noop() {
        let index = fixture(1, 2);
        let s = shuffle_pairs(&index, 3).unwrap();
        assert_eq!(s.categories(), index.categories());
        assert_eq!(s.shuffle_info().unwrap().moved, 0);
    }

    #[test]
    fn shuffle_cross_fraction_matches_permutation_oracle() {
        // Unequal category sizes: 2 x 45 and 1 x 45 descriptions, plus a third
        // category with only P1 descriptions.
        let mut descs = descriptions(&[("a", "duck"), ("b", "goose"), ("c", "heron")]);
        descs.retain(|d| d.category_id != "c" || d.prompt_id == PromptId::P1);
        let n = descs.len() as f64;
        let mut counts: BTreeMap<&str, f64> = BTreeMap::new();
        for d in &descs {
            *counts.entry(d.category_id.as_str()).or_default() += 1.0;
        }
        let expected = 1.0 - counts.values().map(|c| (c / n).powi(2)).sum::<f64>();
        let index = build_manifest(
            synthetic_images(&["a".into(), "b".into(), "c".into()], 1, 0),
            descs.clone(),
        )
        .unwrap();
        let mut total = 0.0;
        let trials = 50;
        for seed in 0..trials {
            let info = shuffle_pairs(&index, seed).unwrap().shuffle_info().unwrap();
            total += info.moved as f64 / info.total as f64;
        }
        let mean = total / trials as f64;
        let sigma = (expected * (1.0 - expected) / (n * trials as f64)).sqrt();
        assert!((mean - expected).abs() < 4.0 * sigma, "mean {mean} expected {expected}");
    }

    #[test]
    fn splits_and_manifest_round_trip() {
        let mut index = fixture(4, 4);
        index
            .assign_splits(SplitPolicy::InstanceHoldout { eval_fraction: 0.25 }, 5)
            .unwrap();
        let eval = index.view(Split::Eval);
        assert_eq!(eval.num_images(), 4);
        assert_eq!(eval.usable_categories(None).len(), 4);
        let train = index.view(Split::Pretrain);
        assert_eq!(train.num_images() + eval.num_images(), 16);
        assert_eq!(train.num_descriptions() + eval.num_descriptions(), index.num_descriptions());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.jsonl");
        index.write_manifest(&path, Some("instance-holdout")).unwrap();
        let (header, back) = CategoryIndex::read_manifest(&path).unwrap();
        assert_eq!(header.splits[&Split::Eval].images, 4);
        assert_eq!(back, index);

        let mut by_cat = fixture(4, 2);
        by_cat
            .assign_splits(SplitPolicy::CategoryHoldout { eval_fraction: 0.25 }, 5)
            .unwrap();
        let eval = by_cat.view(Split::Eval);
        assert_eq!(eval.categories().len(), 1);
        assert_eq!(eval.num_images(), 2);
        assert_eq!(eval.num_descriptions(), 45);
    }
}
