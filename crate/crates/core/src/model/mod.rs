//! Two-image vision-language model: a shared patch-transformer image encoder,
//! one affine projection into the language model's embedding space, and a
//! causal decoder-only language model.

pub mod checkpoint;
pub mod nn;

use std::collections::BTreeMap;
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::imgedit::{Image, CHANNELS, IMAGE_SIZE};
use crate::prompting::{ImageSlot, SpecialInit, TokenId};
use nn::{AttnCache, LnCache, Real};

/// Parameter groups; freezing works per group.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Group {
    Vision,
    Projection,
    Lm,
}

impl Group {
    pub const ALL: [Group; 3] = [Group::Vision, Group::Projection, Group::Lm];

    pub fn as_str(self) -> &'static str {
        match self {
            Group::Vision => "vision",
            Group::Projection => "projection",
            Group::Lm => "lm",
        }
    }

    fn code(self) -> u8 {
        self as u8
    }

    fn from_code(c: u8) -> Option<Group> {
        Group::ALL.into_iter().find(|g| g.code() == c)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub d_vision: usize,
    pub d_lm: usize,
    pub lm_layers: usize,
    pub lm_heads: usize,
    pub vision_layers: usize,
    pub vision_heads: usize,
    pub patch: usize,
    /// Image tokens per image.
    pub k: usize,
    pub max_seq: usize,
    pub vocab_size: usize,
    pub mlp_ratio: usize,
    pub freeze_vision: bool,
    pub freeze_lm: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_vision: 64,
            d_lm: 128,
            lm_layers: 4,
            lm_heads: 4,
            vision_layers: 2,
            vision_heads: 4,
            patch: 4,
            k: 16,
            max_seq: 128,
            vocab_size: 0,
            mlp_ratio: 4,
            freeze_vision: true,
            freeze_lm: true,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn patches(&self) -> usize {
        (IMAGE_SIZE / self.patch).pow(2)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * CHANNELS
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d_lm % self.lm_heads != 0 {
            return bad(format!("d_lm {} not divisible by lm_heads {}", self.d_lm, self.lm_heads));
        }
        if self.d_vision % self.vision_heads != 0 {
            return bad(format!(
                "d_vision {} not divisible by vision_heads {}",
                self.d_vision, self.vision_heads
            ));
        }
        if self.patch == 0 || IMAGE_SIZE % self.patch != 0 {
            return bad(format!("patch {} must divide {IMAGE_SIZE}", self.patch));
        }
        if self.vocab_size == 0 {
            return bad("vocab_size must be set".into());
        }
        if 2 * self.k + 2 > self.max_seq {
            return bad(format!("max_seq {} cannot hold two image slots of {}", self.max_seq, self.k));
        }
        Ok(())
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        [
            ("d_vision", self.d_vision.to_string()),
            ("d_lm", self.d_lm.to_string()),
            ("lm_layers", self.lm_layers.to_string()),
            ("lm_heads", self.lm_heads.to_string()),
            ("vision_layers", self.vision_layers.to_string()),
            ("vision_heads", self.vision_heads.to_string()),
            ("patch", self.patch.to_string()),
            ("k", self.k.to_string()),
            ("max_seq", self.max_seq.to_string()),
            ("vocab_size", self.vocab_size.to_string()),
            ("mlp_ratio", self.mlp_ratio.to_string()),
            ("freeze_vision", self.freeze_vision.to_string()),
            ("freeze_lm", self.freeze_lm.to_string()),
            ("model_seed", self.seed.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    pub fn from_pairs(pairs: &BTreeMap<String, String>) -> Result<Self> {
        fn get<V: std::str::FromStr>(pairs: &BTreeMap<String, String>, key: &str) -> Result<V> {
            pairs
                .get(key)
                .ok_or_else(|| Error::Checkpoint(format!("missing config key {key}")))?
                .parse()
                .map_err(|_| Error::Checkpoint(format!("bad value for {key}")))
        }
        Ok(ModelConfig {
            d_vision: get(pairs, "d_vision")?,
            d_lm: get(pairs, "d_lm")?,
            lm_layers: get(pairs, "lm_layers")?,
            lm_heads: get(pairs, "lm_heads")?,
            vision_layers: get(pairs, "vision_layers")?,
            vision_heads: get(pairs, "vision_heads")?,
            patch: get(pairs, "patch")?,
            k: get(pairs, "k")?,
            max_seq: get(pairs, "max_seq")?,
            vocab_size: get(pairs, "vocab_size")?,
            mlp_ratio: get(pairs, "mlp_ratio")?,
            freeze_vision: get(pairs, "freeze_vision")?,
            freeze_lm: get(pairs, "freeze_lm")?,
            seed: get(pairs, "model_seed")?,
        })
    }

    pub fn group_frozen(&self, g: Group) -> bool {
        match g {
            Group::Vision => self.freeze_vision,
            Group::Projection => false,
            Group::Lm => self.freeze_lm,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamTensor<T> {
    pub name: String,
    pub group: Group,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

/// Every trainable tensor, in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct Params<T> {
    pub tensors: Vec<ParamTensor<T>>,
}

impl<T: Real> Params<T> {
    pub fn zeros_like(&self) -> Params<T> {
        Params {
            tensors: self
                .tensors
                .iter()
                .map(|t| ParamTensor {
                    data: vec![T::zero(); t.data.len()],
                    ..t.clone()
                })
                .collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> Params<U> {
        Params {
            tensors: self
                .tensors
                .iter()
                .map(|t| ParamTensor {
                    name: t.name.clone(),
                    group: t.group,
                    shape: t.shape.clone(),
                    data: t.data.iter().map(|v| U::of(v.f64())).collect(),
                })
                .collect(),
        }
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn fill_zero(&mut self) {
        for t in &mut self.tensors {
            t.data.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    pub fn by_name(&self, name: &str) -> Option<&ParamTensor<T>> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// SHA-256 over the little-endian bytes of one group's tensors.
    pub fn group_checksum(&self, group: Group) -> String {
        let mut h = Sha256::new();
        for t in self.tensors.iter().filter(|t| t.group == group) {
            h.update(t.name.as_bytes());
            for v in &t.data {
                h.update(v.f64().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

#[derive(Clone, Debug, PartialEq)]
struct BlockIdx {
    ln1_g: usize,
    ln1_b: usize,
    qkv_w: usize,
    qkv_b: usize,
    out_w: usize,
    out_b: usize,
    ln2_g: usize,
    ln2_b: usize,
    fc1_w: usize,
    fc1_b: usize,
    fc2_w: usize,
    fc2_b: usize,
}

#[derive(Clone, Debug, PartialEq)]
struct Layout {
    patch_w: usize,
    patch_b: usize,
    vis_pos: usize,
    vis_blocks: Vec<BlockIdx>,
    vis_ln_g: usize,
    vis_ln_b: usize,
    pool_w: usize,
    proj_w: usize,
    proj_b: usize,
    tok_emb: usize,
    pos_emb: usize,
    lm_blocks: Vec<BlockIdx>,
    lm_ln_g: usize,
    lm_ln_b: usize,
    head_w: usize,
    head_b: usize,
}

/// How a tensor is initialized.
#[derive(Clone, Copy)]
enum Init {
    Zeros,
    Ones,
    Normal(f64),
}

struct LayoutBuilder {
    specs: Vec<(String, Group, Vec<usize>, Init)>,
}

impl LayoutBuilder {
    fn add(&mut self, name: String, group: Group, shape: Vec<usize>, init: Init) -> usize {
        self.specs.push((name, group, shape, init));
        self.specs.len() - 1
    }

    fn block(&mut self, prefix: &str, group: Group, d: usize, ratio: usize, layers: usize) -> BlockIdx {
        let std = 0.02;
        let resid = 0.02 / (2.0 * layers as f64).sqrt();
        let mut add = |n: &str, shape: Vec<usize>, init| self.add(format!("{prefix}.{n}"), group, shape, init);
        BlockIdx {
            ln1_g: add("ln1_g", vec![d], Init::Ones),
            ln1_b: add("ln1_b", vec![d], Init::Zeros),
            qkv_w: add("qkv_w", vec![d, 3 * d], Init::Normal(std)),
            qkv_b: add("qkv_b", vec![3 * d], Init::Zeros),
            out_w: add("out_w", vec![d, d], Init::Normal(resid)),
            out_b: add("out_b", vec![d], Init::Zeros),
            ln2_g: add("ln2_g", vec![d], Init::Ones),
            ln2_b: add("ln2_b", vec![d], Init::Zeros),
            fc1_w: add("fc1_w", vec![d, ratio * d], Init::Normal(std)),
            fc1_b: add("fc1_b", vec![ratio * d], Init::Zeros),
            fc2_w: add("fc2_w", vec![ratio * d, d], Init::Normal(resid)),
            fc2_b: add("fc2_b", vec![d], Init::Zeros),
        }
    }
}

fn build_layout(c: &ModelConfig) -> (Layout, Vec<(String, Group, Vec<usize>, Init)>) {
    let mut b = LayoutBuilder { specs: Vec::new() };
    let (dv, dl) = (c.d_vision, c.d_lm);
    let patch_w = b.add("vision.patch_w".into(), Group::Vision, vec![c.patch_dim(), dv], Init::Normal(0.02));
    let patch_b = b.add("vision.patch_b".into(), Group::Vision, vec![dv], Init::Zeros);
    let vis_pos = b.add("vision.pos".into(), Group::Vision, vec![c.patches(), dv], Init::Normal(0.02));
    let vis_blocks = (0..c.vision_layers)
        .map(|i| b.block(&format!("vision.block{i}"), Group::Vision, dv, c.mlp_ratio, c.vision_layers))
        .collect();
    let vis_ln_g = b.add("vision.ln_g".into(), Group::Vision, vec![dv], Init::Ones);
    let vis_ln_b = b.add("vision.ln_b".into(), Group::Vision, vec![dv], Init::Zeros);
    let pool_w = b.add(
        "vision.pool_w".into(),
        Group::Vision,
        vec![c.k, c.patches()],
        Init::Normal(1.0 / c.patches() as f64),
    );
    let proj_w = b.add("projection.w".into(), Group::Projection, vec![dv, dl], Init::Normal(0.02));
    let proj_b = b.add("projection.b".into(), Group::Projection, vec![dl], Init::Zeros);
    let tok_emb = b.add("lm.tok_emb".into(), Group::Lm, vec![c.vocab_size, dl], Init::Normal(0.02));
    let pos_emb = b.add("lm.pos_emb".into(), Group::Lm, vec![c.max_seq, dl], Init::Normal(0.02));
    let lm_blocks = (0..c.lm_layers)
        .map(|i| b.block(&format!("lm.block{i}"), Group::Lm, dl, c.mlp_ratio, c.lm_layers))
        .collect();
    let lm_ln_g = b.add("lm.ln_g".into(), Group::Lm, vec![dl], Init::Ones);
    let lm_ln_b = b.add("lm.ln_b".into(), Group::Lm, vec![dl], Init::Zeros);
    let head_w = b.add("lm.head_w".into(), Group::Lm, vec![c.vocab_size, dl], Init::Normal(0.02));
    let head_b = b.add("lm.head_b".into(), Group::Lm, vec![c.vocab_size], Init::Zeros);
    let layout = Layout {
        patch_w,
        patch_b,
        vis_pos,
        vis_blocks,
        vis_ln_g,
        vis_ln_b,
        pool_w,
        proj_w,
        proj_b,
        tok_emb,
        pos_emb,
        lm_blocks,
        lm_ln_g,
        lm_ln_b,
        head_w,
        head_b,
    };
    (layout, b.specs)
}

/// Saved activations of one transformer block.
#[derive(Clone, Debug)]
pub struct BlockCache<T> {
    x: Vec<T>,
    xn1: Vec<T>,
    ln1: LnCache,
    qkv: Vec<T>,
    attn: AttnCache<T>,
    att: Vec<T>,
    x1: Vec<T>,
    xn2: Vec<T>,
    ln2: LnCache,
    h_pre: Vec<T>,
    h_act: Vec<T>,
}

/// Saved activations of the image encoder for one image.
#[derive(Clone, Debug)]
pub struct VisionTrace<T> {
    patches: Vec<T>,
    blocks: Vec<BlockCache<T>>,
    pre_ln: Vec<T>,
    ln: LnCache,
    normed: Vec<T>,
    /// `K x d_vision` encoder output.
    pub tokens: Vec<T>,
}

/// Saved activations of the language model for one sequence.
#[derive(Clone, Debug)]
pub struct LmTrace<T> {
    ids: Vec<TokenId>,
    slots: [ImageSlot; 2],
    uses_slot_embeddings: bool,
    blocks: Vec<BlockCache<T>>,
    pre_ln: Vec<T>,
    ln: LnCache,
    normed: Vec<T>,
    /// `n x vocab` next-token logits.
    pub logits: Vec<T>,
}

/// What fills the two image slots of a sequence.
#[derive(Clone, Copy)]
pub enum SlotInput<'a, T> {
    /// Slots keep the text embedding of their placeholder token.
    Placeholder,
    /// Raw images pass through the encoder (and back, during training).
    Images([&'a Image; 2]),
    /// Pre-computed encoder outputs, `K x d_vision` each.
    Encoded([&'a [T]; 2]),
}

/// Full forward record for one sample.
#[derive(Clone, Debug)]
pub struct Trace<T> {
    pub vision: Option<[VisionTrace<T>; 2]>,
    pub encoded: Option<[Vec<T>; 2]>,
    pub lm: LmTrace<T>,
}

impl<T> Trace<T> {
    pub fn logits(&self) -> &[T] {
        &self.lm.logits
    }
}

/// Result of greedy decoding.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Decoded {
    /// Generated tokens, without the terminating `<eos>`.
    pub tokens: Vec<TokenId>,
    /// True when decoding stopped at the token limit instead of `<eos>`.
    pub truncated: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: Params<T>,
    layout: Layout,
}

impl<T> fmt::Display for Model<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let c = &self.config;
        write!(
            f,
            "Model(d_vision={}, d_lm={}, layers={}, k={}, vocab={})",
            c.d_vision, c.d_lm, c.lm_layers, c.k, c.vocab_size
        )
    }
}

impl Model<f32> {
    /// Fresh model with seeded initialization.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let (layout, specs) = build_layout(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let tensors = specs
            .into_iter()
            .map(|(name, group, shape, init)| {
                let len = shape.iter().product();
                let data = match init {
                    Init::Zeros => vec![0.0; len],
                    Init::Ones => vec![1.0; len],
                    Init::Normal(std) => {
                        let dist = Normal::new(0.0, std).expect("positive std");
                        (0..len).map(|_| dist.sample(&mut rng) as f32).collect()
                    }
                };
                ParamTensor { name, group, shape, data }
            })
            .collect();
        Ok(Model {
            config,
            params: Params { tensors },
            layout,
        })
    }
}

impl<T: Real> Model<T> {
    /// Rebuilds a model around loaded tensors, checking names and shapes.
    pub fn from_params(config: ModelConfig, params: Params<T>) -> Result<Self> {
        config.validate()?;
        let (layout, specs) = build_layout(&config);
        if specs.len() != params.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                specs.len(),
                params.tensors.len()
            )));
        }
        for ((name, group, shape, _), t) in specs.iter().zip(&params.tensors) {
            if *name != t.name || *group != t.group || *shape != t.shape {
                return Err(Error::Checkpoint(format!("tensor {} does not match the layout", t.name)));
            }
            if t.data.len() != shape.iter().product::<usize>() {
                return Err(Error::Checkpoint(format!("tensor {} has the wrong length", t.name)));
            }
        }
        Ok(Model { config, params, layout })
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            layout: self.layout.clone(),
        }
    }

    fn p(&self, idx: usize) -> &[T] {
        &self.params.tensors[idx].data
    }

    fn block_forward(&self, b: &BlockIdx, x: Vec<T>, n: usize, d: usize, heads: usize, causal: bool) -> (Vec<T>, BlockCache<T>) {
        let hidden = self.config.mlp_ratio * d;
        let (xn1, ln1) = nn::layer_norm(&x, self.p(b.ln1_g), self.p(b.ln1_b), d);
        let qkv = nn::linear(&xn1, self.p(b.qkv_w), Some(self.p(b.qkv_b)), n, d, 3 * d);
        let (att, attn) = nn::attention(&qkv, n, d, heads, causal);
        let mut x1 = nn::linear(&att, self.p(b.out_w), Some(self.p(b.out_b)), n, d, d);
        nn::add_in_place(&mut x1, &x);
        let (xn2, ln2) = nn::layer_norm(&x1, self.p(b.ln2_g), self.p(b.ln2_b), d);
        let h_pre = nn::linear(&xn2, self.p(b.fc1_w), Some(self.p(b.fc1_b)), n, d, hidden);
        let h_act = nn::gelu(&h_pre);
        let mut y = nn::linear(&h_act, self.p(b.fc2_w), Some(self.p(b.fc2_b)), n, hidden, d);
        nn::add_in_place(&mut y, &x1);
        let cache = BlockCache { x, xn1, ln1, qkv, attn, att, x1, xn2, ln2, h_pre, h_act };
        (y, cache)
    }

    #[allow(clippy::too_many_arguments)]
    fn block_backward(
        &self,
        b: &BlockIdx,
        c: &BlockCache<T>,
        dy: &[T],
        n: usize,
        d: usize,
        heads: usize,
        mut grads: Option<&mut Params<T>>,
    ) -> Vec<T> {
        let hidden = self.config.mlp_ratio * d;
        // MLP branch
        let dh_act = { let (dw, db) = pair(&mut grads, b.fc2_w, b.fc2_b); nn::linear_backward(&c.h_act, self.p(b.fc2_w), dy, n, hidden, d, dw, db, true) }
            .expect("dx requested");
        let dh_pre = nn::gelu_backward(&c.h_pre, &dh_act);
        let dxn2 = { let (dw, db) = pair(&mut grads, b.fc1_w, b.fc1_b); nn::linear_backward(&c.xn2, self.p(b.fc1_w), &dh_pre, n, d, hidden, dw, db, true) }
            .expect("dx requested");
        let (dg, db) = pair(&mut grads, b.ln2_g, b.ln2_b);
        let mut dx1 = nn::layer_norm_backward(&c.x1, self.p(b.ln2_g), &c.ln2, &dxn2, d, dg, db);
        nn::add_in_place(&mut dx1, dy);
        // attention branch
        let datt = { let (dw, db) = pair(&mut grads, b.out_w, b.out_b); nn::linear_backward(&c.att, self.p(b.out_w), &dx1, n, d, d, dw, db, true) }
            .expect("dx requested");
        let dqkv = nn::attention_backward(&c.qkv, &c.attn, &datt, n, d, heads);
        let dxn1 = { let (dw, db) = pair(&mut grads, b.qkv_w, b.qkv_b); nn::linear_backward(&c.xn1, self.p(b.qkv_w), &dqkv, n, d, 3 * d, dw, db, true) }
            .expect("dx requested");
        let (dg, db) = pair(&mut grads, b.ln1_g, b.ln1_b);
        let mut dx = nn::layer_norm_backward(&c.x, self.p(b.ln1_g), &c.ln1, &dxn1, d, dg, db);
        nn::add_in_place(&mut dx, &dx1);
        dx
    }

    fn patchify(&self, img: &Image) -> Vec<T> {
        let p = self.config.patch;
        let per_side = IMAGE_SIZE / p;
        let mut out = Vec::with_capacity(self.config.patches() * self.config.patch_dim());
        for py in 0..per_side {
            for px in 0..per_side {
                for y in 0..p {
                    for x in 0..p {
                        let pix = img.pixel(px * p + x, py * p + y);
                        out.extend(pix.iter().map(|&v| T::of(v as f64 - 0.5)));
                    }
                }
            }
        }
        out
    }

    /// Encoder forward with saved activations.
    pub fn vision_forward(&self, img: &Image) -> VisionTrace<T> {
        let c = &self.config;
        let l = &self.layout;
        let (n, dv) = (c.patches(), c.d_vision);
        let patches = self.patchify(img);
        let mut x = nn::linear(&patches, self.p(l.patch_w), Some(self.p(l.patch_b)), n, c.patch_dim(), dv);
        nn::add_in_place(&mut x, self.p(l.vis_pos));
        let mut blocks = Vec::with_capacity(l.vis_blocks.len());
        for b in &l.vis_blocks {
            let (y, cache) = self.block_forward(b, x, n, dv, c.vision_heads, false);
            blocks.push(cache);
            x = y;
        }
        let (normed, ln) = nn::layer_norm(&x, self.p(l.vis_ln_g), self.p(l.vis_ln_b), dv);
        let tokens = nn::linear(self.p(l.pool_w), &normed, None, c.k, n, dv);
        VisionTrace { patches, blocks, pre_ln: x, ln, normed, tokens }
    }

    /// `K x d_vision` tokens for one image; the same weights serve both slots.
    pub fn encode_image(&self, img: &Image) -> Vec<T> {
        self.vision_forward(img).tokens
    }

    /// Accumulates encoder gradients for `dtokens` (`K x d_vision`).
    pub fn vision_backward(&self, trace: &VisionTrace<T>, dtokens: &[T], grads: &mut Params<T>) {
        let c = &self.config;
        let l = &self.layout;
        let (n, dv) = (c.patches(), c.d_vision);
        // tokens = pool_w[K x n] * normed[n x dv]
        nn::gemm(
            nn::View::dense(dtokens, c.k, dv),
            nn::View::dense(&trace.normed, n, dv).t(),
            nn::ViewMut::dense(&mut grads.tensors[l.pool_w].data, c.k, n),
            true,
        );
        let mut dnormed = vec![T::zero(); n * dv];
        nn::gemm(
            nn::View::dense(self.p(l.pool_w), c.k, n).t(),
            nn::View::dense(dtokens, c.k, dv),
            nn::ViewMut::dense(&mut dnormed, n, dv),
            false,
        );
        let (dg, db) = two_mut(&mut grads.tensors, l.vis_ln_g, l.vis_ln_b);
        let mut dx = nn::layer_norm_backward(&trace.pre_ln, self.p(l.vis_ln_g), &trace.ln, &dnormed, dv, Some(dg), Some(db));
        for (b, cache) in l.vis_blocks.iter().zip(&trace.blocks).rev() {
            dx = self.block_backward(b, cache, &dx, n, dv, c.vision_heads, Some(grads));
        }
        nn::add_in_place(&mut grads.tensors[l.vis_pos].data, &dx);
        let (dw, db) = two_mut(&mut grads.tensors, l.patch_w, l.patch_b);
        nn::linear_backward(&trace.patches, self.p(l.patch_w), &dx, n, c.patch_dim(), dv, Some(dw), Some(db), false);
    }

    /// Affine map `K x d_vision -> K x d_lm`, shared by both images.
    pub fn project(&self, tokens: &[T]) -> Vec<T> {
        let c = &self.config;
        let rows = tokens.len() / c.d_vision;
        nn::linear(tokens, self.p(self.layout.proj_w), Some(self.p(self.layout.proj_b)), rows, c.d_vision, c.d_lm)
    }

    fn check_sequence(&self, ids: &[TokenId], slots: &[ImageSlot; 2]) -> Result<()> {
        let c = &self.config;
        if ids.is_empty() || ids.len() > c.max_seq {
            return Err(Error::Shape(format!("sequence length {} outside 1..={}", ids.len(), c.max_seq)));
        }
        if let Some(&bad) = ids.iter().find(|&&t| t as usize >= c.vocab_size) {
            return Err(Error::Shape(format!("token id {bad} outside vocabulary of {}", c.vocab_size)));
        }
        for s in slots {
            if s.len != c.k || s.start + s.len > ids.len() {
                return Err(Error::Shape(format!(
                    "image slot at {} of length {} does not fit K={} in a sequence of {}",
                    s.start,
                    s.len,
                    c.k,
                    ids.len()
                )));
            }
        }
        if slots[0].start < slots[1].start + slots[1].len && slots[1].start < slots[0].start + slots[0].len {
            return Err(Error::Shape("image slots overlap".into()));
        }
        Ok(())
    }

    fn embed(&self, ids: &[TokenId], slots: &[ImageSlot; 2], slot_emb: Option<[&[T]; 2]>) -> Vec<T> {
        let dl = self.config.d_lm;
        let tok = self.p(self.layout.tok_emb);
        let pos = self.p(self.layout.pos_emb);
        let mut x = vec![T::zero(); ids.len() * dl];
        for (t, (&id, row)) in ids.iter().zip(x.chunks_exact_mut(dl)).enumerate() {
            let slot = slots.iter().position(|s| t >= s.start && t < s.start + s.len);
            let src = match (slot, slot_emb) {
                (Some(which), Some(emb)) => {
                    let r = t - slots[which].start;
                    &emb[which][r * dl..(r + 1) * dl]
                }
                _ => &tok[id as usize * dl..(id as usize + 1) * dl],
            };
            for j in 0..dl {
                row[j] = src[j] + pos[t * dl + j];
            }
        }
        x
    }

    /// Language-model forward; `slot_emb` are the projected image tokens.
    pub fn lm_forward(&self, ids: &[TokenId], slots: &[ImageSlot; 2], slot_emb: Option<[&[T]; 2]>) -> Result<LmTrace<T>> {
        self.check_sequence(ids, slots)?;
        let c = &self.config;
        let l = &self.layout;
        let (n, dl) = (ids.len(), c.d_lm);
        let mut x = self.embed(ids, slots, slot_emb);
        let mut blocks = Vec::with_capacity(l.lm_blocks.len());
        for b in &l.lm_blocks {
            let (y, cache) = self.block_forward(b, x, n, dl, c.lm_heads, true);
            blocks.push(cache);
            x = y;
        }
        let (normed, ln) = nn::layer_norm(&x, self.p(l.lm_ln_g), self.p(l.lm_ln_b), dl);
        let logits = self.head(&normed, n);
        Ok(LmTrace {
            ids: ids.to_vec(),
            slots: *slots,
            uses_slot_embeddings: slot_emb.is_some(),
            blocks,
            pre_ln: x,
            ln,
            normed,
            logits,
        })
    }

    fn head(&self, normed: &[T], n: usize) -> Vec<T> {
        let c = &self.config;
        let l = &self.layout;
        let mut logits = vec![T::zero(); n * c.vocab_size];
        for row in logits.chunks_exact_mut(c.vocab_size) {
            row.copy_from_slice(self.p(l.head_b));
        }
        nn::gemm(
            nn::View::dense(normed, n, c.d_lm),
            nn::View::dense(self.p(l.head_w), c.vocab_size, c.d_lm).t(),
            nn::ViewMut::dense(&mut logits, n, c.vocab_size),
            true,
        );
        logits
    }

    /// Backpropagates `dlogits`. LM weight gradients are accumulated unless the
    /// LM is frozen; returns gradients for the slot embeddings when the trace
    /// used them.
    pub fn lm_backward(&self, trace: &LmTrace<T>, dlogits: &[T], grads: &mut Params<T>) -> Option<[Vec<T>; 2]> {
        let c = &self.config;
        let l = &self.layout;
        let (n, dl, v) = (trace.ids.len(), c.d_lm, c.vocab_size);
        let train = !c.freeze_lm;
        if !train && !trace.uses_slot_embeddings {
            return None;
        }
        if train {
            nn::gemm(
                nn::View::dense(dlogits, n, v).t(),
                nn::View::dense(&trace.normed, n, dl),
                nn::ViewMut::dense(&mut grads.tensors[l.head_w].data, v, dl),
                true,
            );
            let hb = &mut grads.tensors[l.head_b].data;
            for row in dlogits.chunks_exact(v) {
                nn::add_in_place(hb, row);
            }
        }
        let mut dnormed = vec![T::zero(); n * dl];
        nn::gemm(
            nn::View::dense(dlogits, n, v),
            nn::View::dense(self.p(l.head_w), v, dl),
            nn::ViewMut::dense(&mut dnormed, n, dl),
            false,
        );
        let mut dx = if train {
            let (dg, db) = two_mut(&mut grads.tensors, l.lm_ln_g, l.lm_ln_b);
            nn::layer_norm_backward(&trace.pre_ln, self.p(l.lm_ln_g), &trace.ln, &dnormed, dl, Some(dg), Some(db))
        } else {
            nn::layer_norm_backward(&trace.pre_ln, self.p(l.lm_ln_g), &trace.ln, &dnormed, dl, None, None)
        };
        for (b, cache) in l.lm_blocks.iter().zip(&trace.blocks).rev() {
            dx = self.block_backward(b, cache, &dx, n, dl, c.lm_heads, train.then_some(&mut *grads));
        }
        if train {
            nn::add_in_place(&mut grads.tensors[l.pos_emb].data[..n * dl], &dx);
        }
        let mut slot_grads = [vec![T::zero(); c.k * dl], vec![T::zero(); c.k * dl]];
        for (t, (&id, row)) in trace.ids.iter().zip(dx.chunks_exact(dl)).enumerate() {
            let slot = trace.slots.iter().position(|s| t >= s.start && t < s.start + s.len);
            match slot {
                Some(which) if trace.uses_slot_embeddings => {
                    let r = t - trace.slots[which].start;
                    slot_grads[which][r * dl..(r + 1) * dl].copy_from_slice(row);
                }
                _ if train => {
                    let te = &mut grads.tensors[l.tok_emb].data;
                    nn::add_in_place(&mut te[id as usize * dl..(id as usize + 1) * dl], row);
                }
                _ => {}
            }
        }
        trace.uses_slot_embeddings.then_some(slot_grads)
    }

    /// Forward over a full sample.
    pub fn forward_trace(&self, ids: &[TokenId], slots: &[ImageSlot; 2], input: SlotInput<'_, T>) -> Result<Trace<T>> {
        let (vision, encoded) = match input {
            SlotInput::Placeholder => (None, None),
            SlotInput::Images(imgs) => {
                let a = self.vision_forward(imgs[0]);
                let b = self.vision_forward(imgs[1]);
                (Some([a, b]), None)
            }
            SlotInput::Encoded(enc) => {
                for e in enc {
                    if e.len() != self.config.k * self.config.d_vision {
                        return Err(Error::Shape(format!(
                            "encoded image has {} values, expected {}",
                            e.len(),
                            self.config.k * self.config.d_vision
                        )));
                    }
                }
                (None, Some([enc[0].to_vec(), enc[1].to_vec()]))
            }
        };
        let enc: Option<[&[T]; 2]> = match (&vision, &encoded) {
            (Some(v), _) => Some([&v[0].tokens, &v[1].tokens]),
            (_, Some(e)) => Some([&e[0], &e[1]]),
            _ => None,
        };
        let projected = enc.map(|e| [self.project(e[0]), self.project(e[1])]);
        let lm = self.lm_forward(ids, slots, projected.as_ref().map(|p| [p[0].as_slice(), p[1].as_slice()]))?;
        Ok(Trace { vision, encoded, lm })
    }

    /// Logits for every position: `len x vocab`.
    pub fn forward(&self, ids: &[TokenId], slots: &[ImageSlot; 2], input: SlotInput<'_, T>) -> Result<Vec<T>> {
        Ok(self.forward_trace(ids, slots, input)?.lm.logits)
    }

    /// Accumulates gradients of a scalar loss whose logit gradient is `dlogits`,
    /// honouring the freeze flags.
    pub fn backward(&self, trace: &Trace<T>, dlogits: &[T], grads: &mut Params<T>) {
        let c = &self.config;
        let l = &self.layout;
        let Some(dslots) = self.lm_backward(&trace.lm, dlogits, grads) else {
            return;
        };
        let enc: [&[T]; 2] = match (&trace.vision, &trace.encoded) {
            (Some(v), _) => [&v[0].tokens, &v[1].tokens],
            (_, Some(e)) => [&e[0], &e[1]],
            _ => return,
        };
        for (which, dproj) in dslots.iter().enumerate() {
            let (dw, db) = two_mut(&mut grads.tensors, l.proj_w, l.proj_b);
            let dtokens = nn::linear_backward(
                enc[which],
                self.p(l.proj_w),
                dproj,
                c.k,
                c.d_vision,
                c.d_lm,
                Some(dw),
                Some(db),
                !c.freeze_vision && trace.vision.is_some(),
            );
            if let (Some(dt), Some(v)) = (dtokens, &trace.vision) {
                self.vision_backward(&v[which], &dt, grads);
            }
        }
    }

    /// Greedy decoding from a prompt prefix (`<bos>` + expanded prompt).
    /// Argmax ties go to the lowest token id.
    pub fn greedy_decode(
        &self,
        prefix: &[TokenId],
        slots: &[ImageSlot; 2],
        input: SlotInput<'_, T>,
        eos: TokenId,
        max_new: usize,
    ) -> Result<Decoded> {
        let trace = self.forward_trace(prefix, slots, input)?;
        let c = &self.config;
        let v = c.vocab_size;
        let mut kv: Vec<Vec<T>> = trace.lm.blocks.iter().map(|b| b.qkv.clone()).collect();
        let mut len = prefix.len();
        let mut next = argmax(&trace.lm.logits[(len - 1) * v..len * v]);
        let mut tokens = Vec::new();
        loop {
            if next == eos {
                return Ok(Decoded { tokens, truncated: false });
            }
            if tokens.len() == max_new || len == c.max_seq {
                return Ok(Decoded { tokens, truncated: true });
            }
            tokens.push(next);
            let logits = self.step(next, len, &mut kv);
            len += 1;
            next = argmax(&logits);
        }
    }

    /// One incremental decoder step for the token at `pos`, appending its
    /// keys and values to `kv`.
    fn step(&self, id: TokenId, pos: usize, kv: &mut [Vec<T>]) -> Vec<T> {
        let c = &self.config;
        let l = &self.layout;
        let dl = c.d_lm;
        let hidden = c.mlp_ratio * dl;
        let tok = self.p(l.tok_emb);
        let pe = self.p(l.pos_emb);
        let mut x: Vec<T> = (0..dl)
            .map(|j| tok[id as usize * dl + j] + pe[pos * dl + j])
            .collect();
        for (b, cache) in l.lm_blocks.iter().zip(kv.iter_mut()) {
            let (xn1, _) = nn::layer_norm(&x, self.p(b.ln1_g), self.p(b.ln1_b), dl);
            let qkv = nn::linear(&xn1, self.p(b.qkv_w), Some(self.p(b.qkv_b)), 1, dl, 3 * dl);
            cache.extend_from_slice(&qkv);
            let n = pos + 1;
            let att = attend_last(cache, n, dl, c.lm_heads);
            let mut x1 = nn::linear(&att, self.p(b.out_w), Some(self.p(b.out_b)), 1, dl, dl);
            nn::add_in_place(&mut x1, &x);
            let (xn2, _) = nn::layer_norm(&x1, self.p(b.ln2_g), self.p(b.ln2_b), dl);
            let h = nn::gelu(&nn::linear(&xn2, self.p(b.fc1_w), Some(self.p(b.fc1_b)), 1, dl, hidden));
            x = nn::linear(&h, self.p(b.fc2_w), Some(self.p(b.fc2_b)), 1, hidden, dl);
            nn::add_in_place(&mut x, &x1);
        }
        let (normed, _) = nn::layer_norm(&x, self.p(l.lm_ln_g), self.p(l.lm_ln_b), dl);
        self.head(&normed, 1)
    }

    /// Grows the token embedding and output head to `new_vocab` rows and
    /// initializes each registered special token as the mean of the rows of
    /// its former tokenization.
    pub fn add_special_tokens(&mut self, new_vocab: usize, inits: &[SpecialInit]) -> Result<()> {
        if new_vocab < self.config.vocab_size {
            return Err(Error::Config("vocabulary cannot shrink".into()));
        }
        let dl = self.config.d_lm;
        let extra = new_vocab - self.config.vocab_size;
        for (idx, width) in [(self.layout.tok_emb, dl), (self.layout.head_w, dl), (self.layout.head_b, 1)] {
            let t = &mut self.params.tensors[idx];
            t.data.extend(std::iter::repeat_n(T::zero(), extra * width));
            t.shape[0] = new_vocab;
        }
        self.config.vocab_size = new_vocab;
        for init in inits {
            self.init_special_embedding(init.id, &init.source_ids)?;
        }
        Ok(())
    }

    /// Sets the embedding (and head row and bias) of `new_token` to the mean of
    /// the rows of `source_ids`.
    pub fn init_special_embedding(&mut self, new_token: TokenId, source_ids: &[TokenId]) -> Result<()> {
        if source_ids.is_empty() {
            return Err(Error::EmptySourceTokens(new_token.to_string()));
        }
        let dl = self.config.d_lm;
        let v = self.config.vocab_size;
        if new_token as usize >= v || source_ids.iter().any(|&s| s as usize >= v) {
            return Err(Error::Shape("token id outside the vocabulary".into()));
        }
        let count = source_ids.len() as f64;
        for (idx, width) in [(self.layout.tok_emb, dl), (self.layout.head_w, dl), (self.layout.head_b, 1)] {
            let data = &mut self.params.tensors[idx].data;
            let mean: Vec<T> = (0..width)
                .map(|j| {
                    let sum: f64 = source_ids.iter().map(|&s| data[s as usize * width + j].f64()).sum();
                    T::of(sum / count)
                })
                .collect();
            data[new_token as usize * width..(new_token as usize + 1) * width].copy_from_slice(&mean);
        }
        Ok(())
    }

    pub fn token_embedding(&self, id: TokenId) -> &[T] {
        let dl = self.config.d_lm;
        &self.p(self.layout.tok_emb)[id as usize * dl..(id as usize + 1) * dl]
    }

    /// Sets the output-head bias; used by tests to rig the decoder.
    pub fn head_bias_mut(&mut self) -> &mut [T] {
        let idx = self.layout.head_b;
        &mut self.params.tensors[idx].data
    }
}

/// Lowest index among the maximal entries.
pub fn argmax<T: Real>(row: &[T]) -> TokenId {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best as TokenId
}

/// Attention output for the last of `n` cached positions.
fn attend_last<T: Real>(qkv: &[T], n: usize, d: usize, heads: usize) -> Vec<T> {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let q_row = &qkv[(n - 1) * 3 * d..n * 3 * d];
    let mut out = vec![T::zero(); d];
    let mut scores = vec![0f64; n];
    for h in 0..heads {
        let q = &q_row[h * dh..(h + 1) * dh];
        for (j, s) in scores.iter_mut().enumerate() {
            let k = &qkv[j * 3 * d + d + h * dh..j * 3 * d + d + (h + 1) * dh];
            *s = q.iter().zip(k).map(|(a, b)| a.f64() * b.f64()).sum::<f64>() * scale;
        }
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for s in &mut scores {
            *s = (*s - max).exp();
            sum += *s;
        }
        for i in 0..dh {
            let acc: f64 = scores
                .iter()
                .enumerate()
                .map(|(j, p)| p / sum * qkv[j * 3 * d + 2 * d + h * dh + i].f64())
                .sum();
            out[h * dh + i] = T::of(acc);
        }
    }
    out
}

/// Optional gradient slices for a weight/bias pair.
fn pair<'a, T>(grads: &'a mut Option<&mut Params<T>>, a: usize, b: usize) -> (Option<&'a mut [T]>, Option<&'a mut [T]>) {
    match grads.as_deref_mut() {
        Some(p) => {
            let (x, y) = two_mut(&mut p.tensors, a, b);
            (Some(x), Some(y))
        }
        None => (None, None),
    }
}

/// Two distinct tensors of the store, mutably.
fn two_mut<T>(tensors: &mut [ParamTensor<T>], a: usize, b: usize) -> (&mut [T], &mut [T]) {
    assert!(a < b, "tensor indices must be increasing");
    let (lo, hi) = tensors.split_at_mut(b);
    (&mut lo[a].data, &mut hi[0].data)
}

#[cfg(test)]
mod tests;
