//! A self-contained corpus: built-in category names, fixture descriptions
//! and procedural images. Used by tests, benches and the CLI's offline mode.

use crate::corpus::{build_manifest, synthetic_images, CategoryIndex};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::promptgen::{build_text_corpus, builtin_templates, CategoryEntry, FixtureBackend, PromptCache};
use crate::tokenizer::Tokenizer;
use crate::trainer::TrainingData;

const NAMES: &[&str] = &[
    "goldfish", "tree frog", "pelican", "hedgehog", "tabby cat", "sea turtle", "red fox", "barn owl",
    "koala", "flamingo", "ladybug", "otter", "tiger shark", "peacock", "snail", "zebra",
];

/// The first `n` built-in categories, ids `c00`, `c01`, ...
pub fn demo_categories(n: usize) -> Result<Vec<CategoryEntry>> {
    if n > NAMES.len() {
        return Err(Error::Config(format!("at most {} demo categories", NAMES.len())));
    }
    NAMES[..n]
        .iter()
        .enumerate()
        .map(|(i, name)| CategoryEntry::new(format!("c{i:02}"), name.replace(' ', "_"), vec![]))
        .collect()
}

/// `n_categories` categories, each with `images_per_category` procedural
/// images and 9 x `responses_per_prompt` fixture descriptions.
pub fn demo_corpus(
    n_categories: usize,
    images_per_category: usize,
    responses_per_prompt: u32,
    seed: u64,
) -> Result<CategoryIndex> {
    let entries = demo_categories(n_categories)?;
    let mut cache = PromptCache::in_memory(1);
    let corpus = build_text_corpus(
        &entries,
        &builtin_templates(),
        &mut FixtureBackend::new(),
        &mut cache,
        responses_per_prompt,
    )?;
    let ids: Vec<String> = entries.iter().map(|e| e.category_id.clone()).collect();
    build_manifest(synthetic_images(&ids, images_per_category, seed), corpus.records)
}

/// Vocabulary over every description of the index.
pub fn corpus_tokenizer(index: &CategoryIndex, min_count: usize, max_size: usize) -> Tokenizer {
    Tokenizer::build(index.descriptions().map(|d| d.text.as_str()), min_count, max_size)
}

/// A model small enough for per-test training runs.
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        vision_layers: 2,
        text_layers: 1,
        fusion_layers: 1,
        hidden_dim: 16,
        heads: 2,
        mlp_ratio: 2,
        patch_size: 4,
        image_size: 8,
        channels: 3,
        max_text_len: 16,
        projection_dim: 16,
        ..Default::default()
    }
}

/// Demo corpus, tokenizer and decoded inputs in one call.
pub fn demo_training_data(
    n_categories: usize,
    images_per_category: usize,
    responses_per_prompt: u32,
    seed: u64,
    model: &ModelConfig,
) -> Result<TrainingData> {
    let index = demo_corpus(n_categories, images_per_category, responses_per_prompt, seed)?;
    let tokenizer = corpus_tokenizer(&index, 1, 4096);
    TrainingData::prepare(index, tokenizer, model, None)
}
