//! Vision, text and fusion transformers plus the projection, matching and
//! masked-token heads.

use std::path::Path;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Matrix, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::images::Pixels;
use crate::objectives::{TAU_INIT, TAU_MAX, TAU_MIN};
use crate::tokenizer::Encoded;

/// How contrastive similarity is computed from CLS vectors.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Similarity {
    /// Dot product of the raw CLS vectors.
    Raw,
    /// Linear projection followed by L2 normalization.
    #[default]
    Projected,
}

impl std::str::FromStr for Similarity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw" => Ok(Self::Raw),
            "projected" => Ok(Self::Projected),
            other => Err(Error::Config(format!("unknown similarity mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub vision_layers: usize,
    pub text_layers: usize,
    pub fusion_layers: usize,
    pub hidden_dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub patch_size: usize,
    pub image_size: usize,
    pub channels: usize,
    pub vocab_size: usize,
    pub max_text_len: usize,
    pub projection_dim: usize,
    pub similarity: Similarity,
    pub layer_norm_eps: f64,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vision_layers: 2,
            text_layers: 2,
            fusion_layers: 2,
            hidden_dim: 64,
            heads: 4,
            mlp_ratio: 2,
            patch_size: 8,
            image_size: 32,
            channels: 3,
            vocab_size: 0,
            max_text_len: 24,
            projection_dim: 64,
            similarity: Similarity::Projected,
            layer_norm_eps: 1e-6,
            init_std: 0.02,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("vision_layers", self.vision_layers),
            ("text_layers", self.text_layers),
            ("fusion_layers", self.fusion_layers),
            ("hidden_dim", self.hidden_dim),
            ("heads", self.heads),
            ("mlp_ratio", self.mlp_ratio),
            ("patch_size", self.patch_size),
            ("image_size", self.image_size),
            ("channels", self.channels),
            ("vocab_size", self.vocab_size),
            ("max_text_len", self.max_text_len),
            ("projection_dim", self.projection_dim),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.hidden_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden_dim {} not divisible by heads {}",
                self.hidden_dim, self.heads
            )));
        }
        if self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.similarity == Similarity::Raw && self.projection_dim != self.hidden_dim {
            return Err(Error::Config("raw similarity needs projection_dim == hidden_dim".into()));
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        (self.image_size / self.patch_size).pow(2)
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.heads
    }
}

#[derive(Debug, Clone, Copy)]
struct LinearIds {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct NormIds {
    g: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct Block {
    ln1: NormIds,
    qkv: LinearIds,
    out: LinearIds,
    ln2: NormIds,
    fc1: LinearIds,
    fc2: LinearIds,
}

#[derive(Debug, Clone, Copy)]
struct FusionBlock {
    self_attn: Block,
    ln_x: NormIds,
    xq: LinearIds,
    xkv: LinearIds,
    xout: LinearIds,
}

#[derive(Debug, Clone)]
struct Layout {
    patch: LinearIds,
    vis_cls: ParamId,
    vis_pos: ParamId,
    vision: Vec<Block>,
    vis_ln: NormIds,
    tok_emb: ParamId,
    txt_pos: ParamId,
    text: Vec<Block>,
    txt_ln: NormIds,
    fusion: Vec<FusionBlock>,
    fus_ln: NormIds,
    image_proj: LinearIds,
    text_proj: LinearIds,
    itm: LinearIds,
    mlm: LinearIds,
    log_tau: ParamId,
}

/// Encoder output: row 0 is the CLS vector.
#[derive(Debug, Clone, Copy)]
pub struct EncodedImage {
    pub seq: Var,
}

#[derive(Debug, Clone)]
pub struct EncodedText {
    pub seq: Var,
    /// `1 x T` additive mask: 0 for real tokens, `-inf` for padding.
    pub key_mask: Var,
    pub mask: Vec<bool>,
}

#[derive(Debug, Clone, Copy)]
pub struct FusedSequence {
    pub seq: Var,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    Image,
    Text,
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
    layout: Layout,
}

fn trunc_normal(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Matrix {
    let dist = Normal::new(0.0, std).expect("valid std");
    Matrix::from_shape_fn((rows, cols), |_| loop {
        let v: f64 = dist.sample(rng);
        if v.abs() <= 2.0 * std {
            break v;
        }
    })
}

struct Builder<'a, R: Rng> {
    store: ParamStore,
    rng: &'a mut R,
    std: f64,
}

impl<R: Rng> Builder<'_, R> {
    fn weight(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        let v = trunc_normal(self.rng, rows, cols, self.std);
        self.store.insert(name, v)
    }

    fn linear(&mut self, name: &str, i: usize, o: usize) -> LinearIds {
        LinearIds {
            w: self.weight(&format!("{name}.w"), i, o),
            b: self.store.insert(format!("{name}.b"), Matrix::zeros((1, o))),
        }
    }

    fn norm(&mut self, name: &str, n: usize) -> NormIds {
        NormIds {
            g: self.store.insert(format!("{name}.g"), Matrix::ones((1, n))),
            b: self.store.insert(format!("{name}.b"), Matrix::zeros((1, n))),
        }
    }

    fn block(&mut self, name: &str, h: usize, mlp: usize) -> Block {
        Block {
            ln1: self.norm(&format!("{name}.ln1"), h),
            qkv: self.linear(&format!("{name}.qkv"), h, 3 * h),
            out: self.linear(&format!("{name}.attn_out"), h, h),
            ln2: self.norm(&format!("{name}.ln2"), h),
            fc1: self.linear(&format!("{name}.fc1"), h, mlp),
            fc2: self.linear(&format!("{name}.fc2"), mlp, h),
        }
    }
}

impl Model {
    /// Fresh model with truncated-normal weights, unit norm gains and zero
    /// biases.
    pub fn new(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let h = config.hidden_dim;
        let mlp = h * config.mlp_ratio;
        let patch_in = config.patch_size * config.patch_size * config.channels;
        let mut b = Builder {
            store: ParamStore::new(),
            rng,
            std: config.init_std,
        };
        let patch = b.linear("vision.patch", patch_in, h);
        let vis_cls = b.weight("vision.cls", 1, h);
        let vis_pos = b.weight("vision.pos", config.num_patches() + 1, h);
        let vision = (0..config.vision_layers)
            .map(|i| b.block(&format!("vision.block{i}"), h, mlp))
            .collect();
        let vis_ln = b.norm("vision.ln", h);
        let tok_emb = b.weight("text.embed", config.vocab_size, h);
        let txt_pos = b.weight("text.pos", config.max_text_len, h);
        let text = (0..config.text_layers)
            .map(|i| b.block(&format!("text.block{i}"), h, mlp))
            .collect();
        let txt_ln = b.norm("text.ln", h);
        let fusion = (0..config.fusion_layers)
            .map(|i| {
                let name = format!("fusion.block{i}");
                FusionBlock {
                    self_attn: b.block(&name, h, mlp),
                    ln_x: b.norm(&format!("{name}.ln_x"), h),
                    xq: b.linear(&format!("{name}.cross_q"), h, h),
                    xkv: b.linear(&format!("{name}.cross_kv"), h, 2 * h),
                    xout: b.linear(&format!("{name}.cross_out"), h, h),
                }
            })
            .collect();
        let fus_ln = b.norm("fusion.ln", h);
        let image_proj = b.linear("head.image_proj", h, config.projection_dim);
        let text_proj = b.linear("head.text_proj", h, config.projection_dim);
        let itm = b.linear("head.itm", h, 2);
        let mlm = b.linear("head.mlm", h, config.vocab_size);
        let log_tau = b
            .store
            .insert("head.log_tau", Matrix::from_elem((1, 1), TAU_INIT.ln()));
        let layout = Layout {
            patch,
            vis_cls,
            vis_pos,
            vision,
            vis_ln,
            tok_emb,
            txt_pos,
            text,
            txt_ln,
            fusion,
            fus_ln,
            image_proj,
            text_proj,
            itm,
            mlm,
            log_tau,
        };
        Ok(Self {
            config,
            params: b.store,
            layout,
        })
    }

    /// Rebuilds a model around stored parameters, checking every name and
    /// shape against the configuration.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let template = Self::new(config.clone(), &mut rng)?;
        if template.params.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter arrays, found {}",
                template.params.len(),
                params.len()
            )));
        }
        for ((_, a), (_, b)) in template.params.iter().zip(params.iter()) {
            if a.name != b.name || a.value.dim() != b.value.dim() {
                return Err(Error::Checkpoint(format!(
                    "parameter mismatch: expected {} {:?}, found {} {:?}",
                    a.name,
                    a.value.dim(),
                    b.name,
                    b.value.dim()
                )));
            }
        }
        Ok(Self {
            config,
            params,
            layout: template.layout,
        })
    }

    /// Importing external pre-trained encoder weights is not supported.
    pub fn import_pretrained(&mut self, path: &Path) -> Result<()> {
        Err(Error::Checkpoint(format!(
            "importing pre-trained weights from {} is not implemented",
            path.display()
        )))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn log_tau_id(&self) -> ParamId {
        self.layout.log_tau
    }

    /// Current contrastive temperature.
    pub fn tau(&self) -> f64 {
        self.params.value(self.layout.log_tau)[[0, 0]].exp()
    }

    /// Pulls τ back into its allowed range.
    pub fn clamp_tau(&mut self) {
        let v = &mut self.params.value_mut(self.layout.log_tau)[[0, 0]];
        *v = v.clamp(TAU_MIN.ln(), TAU_MAX.ln());
    }

    /// `1 x 1` node holding `1/τ`.
    pub fn inverse_tau(&self, g: &mut Graph) -> Var {
        let lt = self.p(g, self.layout.log_tau);
        crate::objectives::inverse_temperature(g, lt)
    }

    fn p(&self, g: &mut Graph, id: ParamId) -> Var {
        g.param(&self.params, id)
    }

    fn lin(&self, g: &mut Graph, x: Var, l: LinearIds) -> Var {
        let (w, b) = (self.p(g, l.w), self.p(g, l.b));
        g.linear(x, w, b)
    }

    fn ln(&self, g: &mut Graph, x: Var, n: NormIds) -> Var {
        let (gamma, beta) = (self.p(g, n.g), self.p(g, n.b));
        g.layer_norm(x, gamma, beta, self.config.layer_norm_eps)
    }

    /// Multi-head attention of `q` rows over `k`/`v` rows, all `n x hidden`.
    fn attend(&self, g: &mut Graph, q: Var, k: Var, v: Var, key_mask: Option<Var>) -> Var {
        let d = self.config.head_dim();
        let scale = 1.0 / (d as f64).sqrt();
        let heads: Vec<Var> = (0..self.config.heads)
            .map(|h| {
                let qh = g.slice_cols(q, h * d, d);
                let kh = g.slice_cols(k, h * d, d);
                let vh = g.slice_cols(v, h * d, d);
                let s = g.matmul_t(qh, kh);
                let mut s = g.scale(s, scale);
                if let Some(m) = key_mask {
                    s = g.add_row(s, m);
                }
                let p = g.softmax_rows(s);
                g.matmul(p, vh)
            })
            .collect();
        if heads.len() == 1 {
            heads[0]
        } else {
            g.concat_cols(&heads)
        }
    }

    fn self_attention(&self, g: &mut Graph, x: Var, b: &Block, key_mask: Option<Var>) -> Var {
        let h = self.config.hidden_dim;
        let n = self.ln(g, x, b.ln1);
        let qkv = self.lin(g, n, b.qkv);
        let q = g.slice_cols(qkv, 0, h);
        let k = g.slice_cols(qkv, h, h);
        let v = g.slice_cols(qkv, 2 * h, h);
        let a = self.attend(g, q, k, v, key_mask);
        let a = self.lin(g, a, b.out);
        g.add(x, a)
    }

    fn mlp(&self, g: &mut Graph, x: Var, b: &Block) -> Var {
        let n = self.ln(g, x, b.ln2);
        let hdn = self.lin(g, n, b.fc1);
        let hdn = g.gelu(hdn);
        let o = self.lin(g, hdn, b.fc2);
        g.add(x, o)
    }

    fn block(&self, g: &mut Graph, x: Var, b: &Block, key_mask: Option<Var>) -> Var {
        let x = self.self_attention(g, x, b, key_mask);
        self.mlp(g, x, b)
    }

    /// Patch rows in raster order; each row is the patch's pixels in
    /// (y, x, channel) order.
    pub fn patchify(&self, pixels: &Pixels) -> Result<Matrix> {
        let c = &self.config;
        let expected = (c.image_size, c.image_size, c.channels);
        if pixels.dim() != expected {
            return Err(Error::Contract(format!(
                "pixels shaped {:?}, expected {expected:?}",
                pixels.dim()
            )));
        }
        let per_side = c.image_size / c.patch_size;
        let p = c.patch_size;
        Ok(Matrix::from_shape_fn((c.num_patches(), p * p * c.channels), |(i, j)| {
            let (py, px) = (i / per_side, i % per_side);
            let (y, rest) = (j / (p * c.channels), j % (p * c.channels));
            let (x, ch) = (rest / c.channels, rest % c.channels);
            pixels[[py * p + y, px * p + x, ch]]
        }))
    }

    pub fn encode_image(&self, g: &mut Graph, pixels: &Pixels) -> Result<EncodedImage> {
        let patches = g.constant(self.patchify(pixels)?);
        Ok(self.encode_patches(g, patches))
    }

    /// Vision encoder over a `num_patches x patch_len` node.
    pub fn encode_patches(&self, g: &mut Graph, patches: Var) -> EncodedImage {
        let x = self.lin(g, patches, self.layout.patch);
        let cls = self.p(g, self.layout.vis_cls);
        let x = g.concat_rows(&[cls, x]);
        let pos = self.p(g, self.layout.vis_pos);
        let mut x = g.add(x, pos);
        for b in &self.layout.vision {
            x = self.block(g, x, b, None);
        }
        let seq = self.ln(g, x, self.layout.vis_ln);
        EncodedImage { seq }
    }

    pub fn encode_text(&self, g: &mut Graph, text: &Encoded) -> Result<EncodedText> {
        let t = text.ids.len();
        if t == 0 || t > self.config.max_text_len || text.mask.len() != t {
            return Err(Error::Contract(format!(
                "token sequence of length {t} (mask {}), max {}",
                text.mask.len(),
                self.config.max_text_len
            )));
        }
        if let Some(&bad) = text.ids.iter().find(|&&i| i as usize >= self.config.vocab_size) {
            return Err(Error::Contract(format!(
                "token id {bad} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        if !text.mask[0] {
            return Err(Error::Contract("first position must be a real token".into()));
        }
        let idx: Vec<usize> = text.ids.iter().map(|&i| i as usize).collect();
        let table = self.p(g, self.layout.tok_emb);
        let emb = g.gather_rows(table, &idx);
        let pos_table = self.p(g, self.layout.txt_pos);
        let pos = g.slice_rows(pos_table, 0, t);
        let mut x = g.add(emb, pos);
        let key_mask = g.constant(Array2::from_shape_fn((1, t), |(_, j)| {
            if text.mask[j] {
                0.0
            } else {
                f64::NEG_INFINITY
            }
        }));
        for b in &self.layout.text {
            x = self.block(g, x, b, Some(key_mask));
        }
        let seq = self.ln(g, x, self.layout.txt_ln);
        Ok(EncodedText {
            seq,
            key_mask,
            mask: text.mask.clone(),
        })
    }

    /// Text positions attend to unmasked text (self-attention) and to every
    /// image token (cross-attention) in each layer.
    pub fn fuse(&self, g: &mut Graph, image: &EncodedImage, text: &EncodedText) -> Result<FusedSequence> {
        let (hi, ht) = (g.shape(image.seq).1, g.shape(text.seq).1);
        if hi != ht || hi != self.config.hidden_dim {
            return Err(Error::Contract(format!("fusion width mismatch: image {hi}, text {ht}")));
        }
        let h = self.config.hidden_dim;
        let mut x = text.seq;
        for fb in &self.layout.fusion {
            x = self.self_attention(g, x, &fb.self_attn, Some(text.key_mask));
            let n = self.ln(g, x, fb.ln_x);
            let q = self.lin(g, n, fb.xq);
            let kv = self.lin(g, image.seq, fb.xkv);
            let k = g.slice_cols(kv, 0, h);
            let v = g.slice_cols(kv, h, h);
            let a = self.attend(g, q, k, v, None);
            let a = self.lin(g, a, fb.xout);
            x = g.add(x, a);
            x = self.mlp(g, x, &fb.self_attn);
        }
        let seq = self.ln(g, x, self.layout.fus_ln);
        Ok(FusedSequence { seq })
    }

    /// Contrastive embedding of a `1 x hidden` CLS row. In projected mode
    /// this is a linear head plus L2 normalization; in raw mode the CLS row
    /// itself.
    pub fn project_cls(&self, g: &mut Graph, cls: Var, head: Head) -> Var {
        match self.config.similarity {
            Similarity::Raw => cls,
            Similarity::Projected => {
                let l = match head {
                    Head::Image => self.layout.image_proj,
                    Head::Text => self.layout.text_proj,
                };
                let z = self.lin(g, cls, l);
                let out = g.l2_normalize_rows(z, NORM_EPS);
                if g.value(z).rows().into_iter().any(|r| r.dot(&r).sqrt() < NORM_EPS) {
                    log::warn!("projected embedding has near-zero norm; epsilon floor applied");
                }
                out
            }
        }
    }

    pub fn image_embedding(&self, g: &mut Graph, image: &EncodedImage) -> Var {
        let cls = g.row(image.seq, 0);
        self.project_cls(g, cls, Head::Image)
    }

    pub fn text_embedding(&self, g: &mut Graph, text: &EncodedText) -> Var {
        let cls = g.row(text.seq, 0);
        self.project_cls(g, cls, Head::Text)
    }

    /// `1 x 2` logits, column 1 is "matched".
    pub fn itm_logits(&self, g: &mut Graph, fused: &FusedSequence) -> Var {
        let cls = g.row(fused.seq, 0);
        self.lin(g, cls, self.layout.itm)
    }

    /// Vocabulary logits for the given positions of a fused sequence.
    pub fn mlm_logits(&self, g: &mut Graph, fused: &FusedSequence, positions: &[usize]) -> Var {
        let rows = g.gather_rows(fused.seq, positions);
        self.lin(g, rows, self.layout.mlm)
    }

    /// Forward-only image embedding.
    pub fn embed_image(&self, pixels: &Pixels) -> Result<Array1<f64>> {
        let mut g = Graph::new();
        let e = self.encode_image(&mut g, pixels)?;
        let v = self.image_embedding(&mut g, &e);
        Ok(g.value(v).row(0).to_owned())
    }

    /// Forward-only text embedding.
    pub fn embed_text(&self, text: &Encoded) -> Result<Array1<f64>> {
        let mut g = Graph::new();
        let e = self.encode_text(&mut g, text)?;
        let v = self.text_embedding(&mut g, &e);
        Ok(g.value(v).row(0).to_owned())
    }

    /// Forward-only matched probability of an image-text pair.
    pub fn itm_probability(&self, pixels: &Pixels, text: &Encoded) -> Result<f64> {
        let mut g = Graph::new();
        let i = self.encode_image(&mut g, pixels)?;
        let t = self.encode_text(&mut g, text)?;
        let f = self.fuse(&mut g, &i, &t)?;
        let l = self.itm_logits(&mut g, &f);
        let p = g.softmax_rows(l);
        Ok(g.value(p)[[0, 1]])
    }
}

/// Floor on embedding norms before division.
pub const NORM_EPS: f64 = 1e-12;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::images::render_synthetic;
    use crate::tokenizer::{PAD, UNK};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> ModelConfig {
        ModelConfig {
            vision_layers: 2,
            text_layers: 2,
            fusion_layers: 1,
            hidden_dim: 16,
            heads: 2,
            mlp_ratio: 2,
            patch_size: 4,
            image_size: 8,
            channels: 3,
            vocab_size: 12,
            max_text_len: 6,
            projection_dim: 8,
            ..Default::default()
        }
    }

    fn model(cfg: ModelConfig) -> Model {
        // A larger init scale keeps finite differences well above round-off.
        let cfg = ModelConfig { init_std: 0.3, ..cfg };
        Model::new(cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap()
    }

    fn text(ids: &[u32], real: usize) -> Encoded {
        Encoded {
            ids: ids.to_vec(),
            mask: (0..ids.len()).map(|i| i < real).collect(),
        }
    }

    #[test]
    fn config_invariants() {
        assert!(tiny().validate().is_ok());
        assert!(ModelConfig { heads: 3, ..tiny() }.validate().is_err());
        assert!(ModelConfig { patch_size: 3, ..tiny() }.validate().is_err());
        assert!(ModelConfig { fusion_layers: 0, ..tiny() }.validate().is_err());
    }

    #[test]
    fn shape_contracts() {
        for (image_size, patch) in [(8, 4), (8, 2), (12, 4)] {
            let cfg = ModelConfig {
                image_size,
                patch_size: patch,
                ..tiny()
            };
            let m = model(cfg.clone());
            let mut g = Graph::new();
            let px = render_synthetic(0, 0, image_size, 3);
            let i = m.encode_image(&mut g, &px).unwrap();
            assert_eq!(g.shape(i.seq), (cfg.num_patches() + 1, 16));
            let t = m.encode_text(&mut g, &text(&[1, 4, 5, 0, 0, 0], 3)).unwrap();
            assert_eq!(g.shape(t.seq), (6, 16));
            let f = m.fuse(&mut g, &i, &t).unwrap();
            assert_eq!(g.shape(f.seq), (6, 16));
            let e = m.image_embedding(&mut g, &i);
            let n = g.value(e).row(0).dot(&g.value(e).row(0)).sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
        let m = model(ModelConfig {
            image_size: 32,
            patch_size: 8,
            max_text_len: 13,
            ..tiny()
        });
        let mut g = Graph::new();
        let i = m.encode_image(&mut g, &render_synthetic(1, 1, 32, 3)).unwrap();
        assert_eq!(g.shape(i.seq).0, 17);
        let ids: Vec<u32> = (0..13).map(|k| if k == 0 { 1 } else { 4 + k % 5 }).collect();
        let t = m.encode_text(&mut g, &text(&ids, 13)).unwrap();
        assert_eq!(g.shape(t.seq).0, 13);
    }

    #[test]
    fn contract_errors() {
        let m = model(tiny());
        let mut g = Graph::new();
        assert!(matches!(
            m.encode_image(&mut g, &render_synthetic(0, 0, 16, 3)),
            Err(Error::Contract(_))
        ));
        assert!(matches!(
            m.encode_text(&mut g, &text(&[1, 99, 0, 0, 0, 0], 2)),
            Err(Error::Contract(_))
        ));
        assert!(matches!(
            m.encode_text(&mut g, &text(&[1, 4, 4, 4, 4, 4, 4], 2)),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn deterministic_forward() {
        let m = model(tiny());
        let px = render_synthetic(2, 5, 8, 3);
        assert_eq!(m.embed_image(&px).unwrap(), m.embed_image(&px).unwrap());
    }

    #[test]
    fn padding_does_not_leak() {
        let m = model(tiny());
        let px = render_synthetic(2, 5, 8, 3);
        let a = text(&[1, 4, 5, PAD, PAD, PAD], 3);
        let mut b = a.clone();
        b.ids[4] = UNK;
        b.ids[5] = 7;
        let run = |t: &Encoded| {
            let mut g = Graph::new();
            let i = m.encode_image(&mut g, &px).unwrap();
            let e = m.encode_text(&mut g, t).unwrap();
            let f = m.fuse(&mut g, &i, &e).unwrap();
            (g.value(e.seq).clone(), g.value(f.seq).clone())
        };
        let (ta, fa) = run(&a);
        let (tb, fb) = run(&b);
        for r in 0..3 {
            assert_eq!(ta.row(r), tb.row(r));
            assert_eq!(fa.row(r), fb.row(r));
        }
        assert_ne!(ta.row(4), tb.row(4));
    }

    #[test]
    fn cross_attention_is_not_degenerate() {
        let m = model(tiny());
        let t = text(&[1, 4, 5, 6, 0, 0], 4);
        let mut g = Graph::new();
        let i = m.encode_image(&mut g, &render_synthetic(1, 1, 8, 3)).unwrap();
        let e = m.encode_text(&mut g, &t).unwrap();
        let f = m.fuse(&mut g, &i, &e).unwrap();
        let zeros = g.constant(Matrix::zeros(g.value(i.seq).raw_dim()));
        let f0 = m.fuse(&mut g, &EncodedImage { seq: zeros }, &e).unwrap();
        assert_ne!(g.value(f.seq).row(0), g.value(f0.seq).row(0));
    }

    #[test]
    fn gradient_reaches_both_encoders_from_fused_cls() {
        let m = model(tiny());
        let mut g = Graph::new();
        let i = m.encode_image(&mut g, &render_synthetic(1, 1, 8, 3)).unwrap();
        let e = m.encode_text(&mut g, &text(&[1, 4, 5, 6, 0, 0], 4)).unwrap();
        let f = m.fuse(&mut g, &i, &e).unwrap();
        let l = m.itm_logits(&mut g, &f);
        let s = g.row(l, 0);
        let loss = g.sum_all(s);
        let grads = g.backward(loss).to_dense(m.params());
        for name in ["vision.patch.w", "text.embed", "fusion.block0.cross_q.w"] {
            let id = m.params().id(name).unwrap();
            assert!(grads[id.0].iter().any(|v| *v != 0.0), "{name} got no gradient");
        }
    }

    fn fd_check(m: &Model, f: impl Fn(&Model) -> f64, name: &str, coords: &[(usize, usize)], analytic: &Matrix) {
        let id = m.params().id(name).unwrap();
        let h = 1e-5;
        for &(r, c) in coords {
            let eval = |delta: f64| {
                let mut mm = m.clone();
                mm.params_mut().value_mut(id)[[r, c]] += delta;
                f(&mm)
            };
            let num = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic[[r, c]];
            let rel = (num - a).abs() / (num.abs().max(a.abs()).max(1e-6));
            assert!(rel < 1e-5, "{name}[{r},{c}]: analytic {a} numeric {num}");
        }
    }

    #[test]
    fn cls_gradient_matches_finite_differences() {
        let m = model(tiny());
        let px = render_synthetic(4, 2, 8, 3);
        let run = |mm: &Model, px: &Pixels| {
            let mut g = Graph::new();
            let patches = g.input(mm.patchify(px).unwrap());
            let e = mm.encode_patches(&mut g, patches);
            let cls = g.row(e.seq, 0);
            let l = g.mean_all(cls);
            (g, patches, l)
        };
        let (g, patches, l) = run(&m, &px);
        let grads = g.backward(l);
        let dense = grads.to_dense(m.params());
        let id = m.params().id("vision.patch.w").unwrap();
        fd_check(
            &m,
            |mm| {
                let (g, _, l) = run(mm, &px);
                g.scalar(l)
            },
            "vision.patch.w",
            &[(0, 0), (5, 3), (47, 15)],
            &dense[id.0],
        );

        // Pixel (y=3, x=5, c=1) lives in patch row 1, column (3*4 + 1)*3 + 1.
        let analytic = grads.get(patches).unwrap()[[1, (3 * 4 + 1) * 3 + 1]];
        let h = 1e-5;
        let eval = |delta: f64| {
            let mut p = px.clone();
            p[[3, 5, 1]] += delta;
            let (g, _, l) = run(&m, &p);
            g.scalar(l)
        };
        let numeric = (eval(h) - eval(-h)) / (2.0 * h);
        assert!((numeric - analytic).abs() <= 1e-4 * numeric.abs().max(1e-6), "{numeric} vs {analytic}");
    }

    #[test]
    fn embedding_table_gradient_matches_finite_differences() {
        let m = model(tiny());
        let t = text(&[1, 4, 5, 4, 0, 0], 4);
        let run = |mm: &Model| {
            let mut g = Graph::new();
            let e = mm.encode_text(&mut g, &t).unwrap();
            let proj = mm.text_embedding(&mut g, &e);
            let w = g.constant(Matrix::from_shape_fn((1, 8), |(_, j)| j as f64 - 3.5));
            let s = g.mul(proj, w);
            let l = g.sum_all(s);
            (g, l)
        };
        let (g, l) = run(&m);
        let dense = g.backward(l).to_dense(m.params());
        let id = m.params().id("text.embed").unwrap();
        assert!(dense[id.0].row(0).iter().all(|v| *v == 0.0), "unused token row got gradient");
        fd_check(
            &m,
            |mm| {
                let (g, l) = run(mm);
                g.scalar(l)
            },
            "text.embed",
            &[(1, 0), (4, 7), (5, 15), (4, 2)],
            &dense[id.0],
        );
    }

    #[test]
    fn patch_permutation_leaves_cls_unchanged() {
        let m = model(tiny());
        let px = render_synthetic(3, 3, 8, 3);
        let base = m.embed_image(&px).unwrap();
        // Swap patches 0 and 3 in pixel space and the matching position rows.
        let mut swapped = px.clone();
        for y in 0..4 {
            for x in 0..4 {
                for c in 0..3 {
                    swapped[[y, x, c]] = px[[y + 4, x + 4, c]];
                    swapped[[y + 4, x + 4, c]] = px[[y, x, c]];
                }
            }
        }
        let mut m2 = m.clone();
        let id = m2.params().id("vision.pos").unwrap();
        let pos = m2.params_mut().value_mut(id);
        let (r1, r4) = (pos.row(1).to_owned(), pos.row(4).to_owned());
        pos.row_mut(1).assign(&r4);
        pos.row_mut(4).assign(&r1);
        let moved = m2.embed_image(&swapped).unwrap();
        for (a, b) in base.iter().zip(moved.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn projection_scaling() {
        // Zero bias: scaling the input leaves the normalized direction alone.
        let m = model(tiny());
        let mut g = Graph::new();
        let x = g.constant(Matrix::from_shape_fn((1, 16), |(_, j)| (j as f64).sin()));
        let x3 = g.scale(x, 3.0);
        let a = m.project_cls(&mut g, x, Head::Image);
        let b = m.project_cls(&mut g, x3, Head::Image);
        for (u, v) in g.value(a).iter().zip(g.value(b).iter()) {
            assert!((u - v).abs() < 1e-12);
        }
        // Non-zero bias: pre-normalization output is affine in the input.
        let mut m2 = m.clone();
        let bid = m2.params().id("head.image_proj.b").unwrap();
        m2.params_mut().value_mut(bid).fill(0.5);
        let wid = m2.params().id("head.image_proj.w").unwrap();
        let w = m2.params().value(wid).clone();
        let xv = g.value(x).clone();
        let pre1 = xv.dot(&w) + 0.5;
        let pre3 = (&xv * 3.0).dot(&w) + 0.5;
        let expect = &pre1 * 3.0 - 1.0;
        for (u, v) in pre3.iter().zip(expect.iter()) {
            assert!((u - v).abs() < 1e-12);
        }
        let mut g2 = Graph::new();
        let x = g2.constant(xv.clone());
        let x3 = g2.scale(x, 3.0);
        let c = m2.project_cls(&mut g2, x, Head::Image);
        let d = m2.project_cls(&mut g2, x3, Head::Image);
        assert!(g2.value(c).iter().zip(g2.value(d).iter()).any(|(u, v)| (u - v).abs() > 1e-6));
    }

    #[test]
    fn identity_projection_preserves_direction() {
        let cfg = ModelConfig {
            projection_dim: 16,
            ..tiny()
        };
        let mut m = model(cfg);
        let wid = m.params().id("head.text_proj.w").unwrap();
        *m.params_mut().value_mut(wid) = Matrix::eye(16);
        let mut g = Graph::new();
        let raw = Matrix::from_shape_fn((1, 16), |(_, j)| j as f64 + 1.0);
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        let x = g.constant(raw.clone());
        let p = m.project_cls(&mut g, x, Head::Text);
        for (u, v) in g.value(p).iter().zip(raw.iter()) {
            assert!((u - v / norm).abs() < 1e-12);
        }
    }

    #[test]
    fn temperature_starts_at_default_and_clamps() {
        let mut m = model(tiny());
        assert!((m.tau() - 0.07).abs() < 1e-15);
        let id = m.log_tau_id();
        m.params_mut().value_mut(id)[[0, 0]] = 5.0;
        m.clamp_tau();
        assert!((m.tau() - 10.0).abs() < 1e-12);
        m.params_mut().value_mut(id)[[0, 0]] = -50.0;
        m.clamp_tau();
        assert!((m.tau() - 1e-3).abs() < 1e-15);
    }

    #[test]
    fn import_hook_is_unimplemented() {
        let mut m = model(tiny());
        assert!(m.import_pretrained(Path::new("weights.bin")).is_err());
    }

    #[test]
    fn from_params_checks_layout() {
        let m = model(tiny());
        assert!(Model::from_params(tiny(), m.params().clone()).is_ok());
        let other = model(ModelConfig { vocab_size: 13, ..tiny() });
        assert!(Model::from_params(tiny(), other.params().clone()).is_err());
    }
}
