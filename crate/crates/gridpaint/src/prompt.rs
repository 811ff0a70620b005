//! Visual prompt encoding.
//!
//! The conditioning signal for the denoiser is built from the panels
//! themselves: a shared patch tokenizer (small ViT) turns each panel into
//! tokens, optional interest-region boxes are embedded via Fourier features
//! plus an MLP, role and pair embeddings mark which slot every token came
//! from, and a bidirectional transformer fuses the whole sequence into the
//! context tokens that cross-attention consumes.
//!
//! Sequence layout for `n` example pairs with `L` tokens per panel:
//! `[before_1 (L), after_1 (L), box_before_1, box_after_1, ..., query (L)]`,
//! giving `(2n+1)*L + 2n` context tokens.

use crate::error::{Error, Result};
use crate::grid::Panel;
use crate::nn::ops::{silu, silu_backward};
use crate::nn::{self, Grads, Init, Linear, ParamId, ParamStore, SelfAttention};
use ndarray::{s, Array1, Array2};
use rand::Rng;

/// Axis-aligned box in normalised panel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BoundingBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BoundingBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        let b = BoundingBox { x0, y0, x1, y1 };
        b.validate()?;
        Ok(b)
    }

    /// The whole panel; used whenever no box is given or a box is dropped.
    pub fn full() -> Self {
        BoundingBox { x0: 0.0, y0: 0.0, x1: 1.0, y1: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        let coords = [self.x0, self.y0, self.x1, self.y1];
        if coords.iter().any(|c| !c.is_finite() || !(0.0..=1.0).contains(c)) {
            return Err(Error::Validation(format!(
                "box coordinates must lie in [0, 1]: {self:?}"
            )));
        }
        if self.x1 < self.x0 || self.y1 < self.y0 {
            return Err(Error::Validation(format!(
                "box must have x0 <= x1 and y0 <= y1: {self:?}"
            )));
        }
        Ok(())
    }

    /// Intersection-over-union with another box.
    pub fn iou(&self, other: &BoundingBox) -> f64 {
        let ix = (self.x1.min(other.x1) - self.x0.max(other.x0)).max(0.0);
        let iy = (self.y1.min(other.y1) - self.y0.max(other.y0)).max(0.0);
        let inter = ix * iy;
        let a = (self.x1 - self.x0) * (self.y1 - self.y0);
        let b = (other.x1 - other.x0) * (other.y1 - other.y0);
        if a + b - inter <= 0.0 {
            return 0.0;
        }
        inter / (a + b - inter)
    }
}

/// One demonstration: a before/after panel pair with optional boxes marking
/// the changed region in each panel.
#[derive(Debug, Clone)]
pub struct ExamplePair {
    pub before: Panel,
    pub after: Panel,
    pub box_before: Option<BoundingBox>,
    pub box_after: Option<BoundingBox>,
}

/// Everything the model is shown about an edit: examples plus the query.
#[derive(Debug, Clone)]
pub struct VisualPrompt {
    pub examples: Vec<ExamplePair>,
    pub query: Panel,
}

/// Tokens of a single panel, `(L, D)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenizedImage {
    pub tokens: Array2<f64>,
}

/// Embedded box, a single `D`-vector.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxToken {
    pub token: Array1<f64>,
}

/// Fused context sequence consumed by cross-attention, `(L_c, D)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptContext {
    pub tokens: Array2<f64>,
}

/// Octave-spaced sine/cosine features of the four box coordinates, ordered
/// `[sin(2^0 pi c), cos(2^0 pi c), sin(2^1 pi c), ...]` per coordinate.
pub fn fourier_features(b: &BoundingBox, freqs: usize) -> Array1<f64> {
    let coords = [b.x0, b.y0, b.x1, b.y1];
    let mut out = Array1::zeros(coords.len() * freqs * 2);
    for (ci, c) in coords.iter().enumerate() {
        for k in 0..freqs {
            let arg = (2f64).powi(k as i32) * std::f64::consts::PI * c;
            out[(ci * freqs + k) * 2] = arg.sin();
            out[(ci * freqs + k) * 2 + 1] = arg.cos();
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PromptConfig {
    /// Width of every token (`D`).
    pub token_dim: usize,
    pub patch_size: usize,
    pub panel_size: usize,
    /// Transformer depth of the shared panel tokenizer.
    pub vit_layers: usize,
    /// Transformer depth of the fusion encoder.
    pub encoder_layers: usize,
    /// Fourier octaves per box coordinate.
    pub fourier_freqs: usize,
    /// Hidden width of the box MLP.
    pub box_hidden: usize,
    pub max_examples: usize,
}

impl Default for PromptConfig {
    fn default() -> Self {
        PromptConfig {
            token_dim: 64,
            patch_size: 8,
            panel_size: crate::grid::DEFAULT_PANEL_SIZE,
            vit_layers: 2,
            encoder_layers: 2,
            fourier_freqs: 8,
            box_hidden: 64,
            max_examples: crate::grid::MAX_EXAMPLES,
        }
    }
}

impl PromptConfig {
    pub fn validate(&self) -> Result<()> {
        if self.token_dim == 0
            || self.patch_size == 0
            || self.vit_layers == 0
            || self.encoder_layers == 0
            || self.fourier_freqs == 0
            || self.box_hidden == 0
            || self.max_examples == 0
        {
            return Err(Error::Config("prompt dimensions must be positive".into()));
        }
        if self.panel_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "panel size {} must be divisible by patch size {}",
                self.panel_size, self.patch_size
            )));
        }
        Ok(())
    }

    pub fn tokens_per_panel(&self) -> usize {
        let side = self.panel_size / self.patch_size;
        side * side
    }

    /// Context length for `n` example pairs.
    pub fn context_len(&self, n: usize) -> usize {
        (2 * n + 1) * self.tokens_per_panel() + 2 * n
    }
}

/// Pre-norm transformer block: LN → self-attention → residual, then
/// LN → MLP (silu) → residual.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    ln1: nn::LayerNorm,
    attn: SelfAttention,
    ln2: nn::LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

pub struct TransformerCache {
    h1: Array2<f64>,
    ln1: nn::norm::LayerNormCache,
    attn: nn::attention::SelfAttnCache,
    h2: Array2<f64>,
    ln2: nn::norm::LayerNormCache,
    m1: Array2<f64>,
    m1s: Array2<f64>,
}

impl TransformerBlock {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, d: usize) -> Self {
        TransformerBlock {
            ln1: nn::LayerNorm::new(store, &format!("{name}.ln1"), d),
            attn: SelfAttention::new(store, rng, &format!("{name}.attn"), d),
            ln2: nn::LayerNorm::new(store, &format!("{name}.ln2"), d),
            fc1: Linear::new(store, rng, &format!("{name}.fc1"), d, 4 * d, Init::Lecun),
            fc2: Linear::new(store, rng, &format!("{name}.fc2"), 4 * d, d, Init::Lecun),
        }
    }

    pub fn forward(&self, x: &Array2<f64>, store: &ParamStore) -> (Array2<f64>, TransformerCache) {
        let (h1, ln1) = self.ln1.forward(x, store);
        let (a, attn) = self.attn.forward(&h1, store);
        let x1 = x + &a;
        let (h2, ln2) = self.ln2.forward(&x1, store);
        let m1 = self.fc1.forward(&h2, store);
        let m1s = silu(&m1);
        let m2 = self.fc2.forward(&m1s, store);
        let y = &x1 + &m2;
        (y, TransformerCache { h1, ln1, attn, h2, ln2, m1, m1s })
    }

    pub fn backward(
        &self,
        dy: &Array2<f64>,
        cache: &TransformerCache,
        store: &ParamStore,
        grads: &mut Grads,
    ) -> Array2<f64> {
        let d_m1s = self.fc2.backward(&cache.m1s, dy, store, grads);
        let d_m1 = silu_backward(&cache.m1, &d_m1s);
        let d_h2 = self.fc1.backward(&cache.h2, &d_m1, store, grads);
        let mut d_x1 = self.ln2.backward(&d_h2, &cache.ln2, store, grads);
        d_x1 += dy;
        let d_h1 = self.attn.backward(&cache.h1, &d_x1, &cache.attn, store, grads);
        let mut dx = self.ln1.backward(&d_h1, &cache.ln1, store, grads);
        dx += &d_x1;
        dx
    }
}

/// Token roles inside the fused sequence.
const ROLE_BEFORE: usize = 0;
const ROLE_AFTER: usize = 1;
const ROLE_QUERY: usize = 2;

/// The full prompt encoder: shared panel tokenizer, box embedder, role/pair
/// embeddings, fusion transformer, and the learned null condition.
#[derive(Debug, Clone)]
pub struct PromptStack {
    pub cfg: PromptConfig,
    patch_proj: Linear,
    pos_emb: ParamId,
    role_emb: ParamId, // (3, D): before / after / query
    box_role_emb: ParamId,
    pair_emb: ParamId, // (max_examples, D)
    vit: Vec<TransformerBlock>,
    box_fc1: Linear,
    box_fc2: Linear,
    encoder: Vec<TransformerBlock>,
    null_token: ParamId, // (1, D)
}

struct PanelCache {
    patches: Array2<f64>,
    vit: Vec<TransformerCache>,
}

struct BoxCache {
    feats: Array1<f64>,
    m1: Array2<f64>,
    m1s: Array2<f64>,
}

pub struct PromptCache {
    panels: Vec<PanelCache>,
    boxes: Vec<BoxCache>,
    encoder: Vec<TransformerCache>,
    n_examples: usize,
}

impl PromptStack {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, cfg: PromptConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.token_dim;
        let patch_dim = cfg.patch_size * cfg.patch_size * 3;
        let l = cfg.tokens_per_panel();
        let patch_proj = Linear::new(store, rng, "prompt.patch", patch_dim, d, Init::Lecun);
        let pos_emb = store.add(
            "prompt.pos_emb",
            nn::init_tensor(rng, &[l, d], Init::Normal(0.02), l),
        );
        let role_emb = store.add(
            "prompt.role_emb",
            nn::init_tensor(rng, &[3, d], Init::Normal(0.02), 3),
        );
        let box_role_emb = store.add(
            "prompt.box_role_emb",
            nn::init_tensor(rng, &[d], Init::Normal(0.02), 1),
        );
        let pair_emb = store.add(
            "prompt.pair_emb",
            nn::init_tensor(rng, &[cfg.max_examples, d], Init::Normal(0.02), 1),
        );
        let vit = (0..cfg.vit_layers)
            .map(|i| TransformerBlock::new(store, rng, &format!("prompt.vit{i}"), d))
            .collect();
        let feat_dim = 4 * cfg.fourier_freqs * 2;
        let box_fc1 = Linear::new(store, rng, "prompt.box_fc1", feat_dim, cfg.box_hidden, Init::Lecun);
        let box_fc2 = Linear::new(store, rng, "prompt.box_fc2", cfg.box_hidden, d, Init::Lecun);
        let encoder = (0..cfg.encoder_layers)
            .map(|i| TransformerBlock::new(store, rng, &format!("prompt.enc{i}"), d))
            .collect();
        let null_token = store.add(
            "prompt.null_token",
            nn::init_tensor(rng, &[1, d], Init::Normal(0.02), 1),
        );
        Ok(PromptStack {
            cfg,
            patch_proj,
            pos_emb,
            role_emb,
            box_role_emb,
            pair_emb,
            vit,
            box_fc1,
            box_fc2,
            encoder,
            null_token,
        })
    }

    /// Flatten a panel into per-patch rows ordered `(dy, dx, channel)`.
    fn gather_patches(&self, panel: &Panel) -> Result<Array2<f64>> {
        let p = self.cfg.patch_size;
        let (h, w) = (panel.height(), panel.width());
        if h != self.cfg.panel_size || w != self.cfg.panel_size {
            return Err(Error::Shape(format!(
                "panel is {h}x{w}, prompt encoder expects {0}x{0}",
                self.cfg.panel_size
            )));
        }
        let side = h / p;
        let mut out = Array2::zeros((side * side, p * p * 3));
        for py in 0..side {
            for px in 0..side {
                let row = py * side + px;
                let mut col = 0;
                for dy in 0..p {
                    for dx in 0..p {
                        for c in 0..3 {
                            out[[row, col]] = panel.pixels[[py * p + dy, px * p + dx, c]];
                            col += 1;
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    fn run_vit(&self, patches: &Array2<f64>, store: &ParamStore) -> (Array2<f64>, PanelCache) {
        let mut x = self.patch_proj.forward(patches, store);
        x += &store.p2(self.pos_emb);
        let mut caches = Vec::with_capacity(self.vit.len());
        for block in &self.vit {
            let (y, c) = block.forward(&x, store);
            caches.push(c);
            x = y;
        }
        (x, PanelCache { patches: patches.clone(), vit: caches })
    }

    /// Tokenize one panel with the shared visual encoder.
    pub fn tokenize_image(&self, panel: &Panel, store: &ParamStore) -> Result<TokenizedImage> {
        let patches = self.gather_patches(panel)?;
        let (tokens, _) = self.run_vit(&patches, store);
        Ok(TokenizedImage { tokens })
    }

    fn run_box(
        &self,
        b: &BoundingBox,
        store: &ParamStore,
    ) -> Result<(Array1<f64>, BoxCache)> {
        b.validate()?;
        let feats = fourier_features(b, self.cfg.fourier_freqs);
        let row = feats.view().insert_axis(ndarray::Axis(0)).to_owned();
        let m1 = self.box_fc1.forward(&row, store);
        let m1s = silu(&m1);
        let out = self.box_fc2.forward(&m1s, store);
        let token = out.row(0).to_owned();
        Ok((token, BoxCache { feats, m1, m1s }))
    }

    /// Embed one interest-region box.
    pub fn encode_box(&self, b: &BoundingBox, store: &ParamStore) -> Result<BoxToken> {
        let (token, _) = self.run_box(b, store)?;
        Ok(BoxToken { token })
    }

    /// Encode a full prompt into context tokens. Missing boxes default to
    /// the whole panel.
    pub fn encode(
        &self,
        prompt: &VisualPrompt,
        store: &ParamStore,
    ) -> Result<(PromptContext, PromptCache)> {
        let n = prompt.examples.len();
        if n == 0 || n > self.cfg.max_examples {
            return Err(Error::Arity(format!(
                "prompt needs 1..={} example pairs, got {n}",
                self.cfg.max_examples
            )));
        }
        let d = self.cfg.token_dim;
        let l = self.cfg.tokens_per_panel();
        let lc = self.cfg.context_len(n);
        let role = store.p2(self.role_emb);
        let pair = store.p2(self.pair_emb);

        let mut seq = Array2::zeros((lc, d));
        let mut panels = Vec::new();
        let mut boxes = Vec::new();
        let mut cursor = 0;

        for (i, ex) in prompt.examples.iter().enumerate() {
            for (panel, role_idx) in [(&ex.before, ROLE_BEFORE), (&ex.after, ROLE_AFTER)] {
                let patches = self.gather_patches(panel)?;
                let (tokens, cache) = self.run_vit(&patches, store);
                panels.push(cache);
                let mut dst = seq.slice_mut(s![cursor..cursor + l, ..]);
                dst.assign(&tokens);
                for mut t in dst.rows_mut() {
                    for c in 0..d {
                        t[c] += role[[role_idx, c]] + pair[[i, c]];
                    }
                }
                cursor += l;
            }
            let before_box = ex.box_before.unwrap_or_else(BoundingBox::full);
            let after_box = ex.box_after.unwrap_or_else(BoundingBox::full);
            for b in [&before_box, &after_box] {
                let (token, cache) = self.run_box(b, store)?;
                boxes.push(cache);
                let brole = store.p1(self.box_role_emb);
                for c in 0..d {
                    seq[[cursor, c]] = token[c] + brole[c] + pair[[i, c]];
                }
                cursor += 1;
            }
        }
        // query panel
        let patches = self.gather_patches(&prompt.query)?;
        let (tokens, cache) = self.run_vit(&patches, store);
        panels.push(cache);
        let mut dst = seq.slice_mut(s![cursor..cursor + l, ..]);
        dst.assign(&tokens);
        for mut t in dst.rows_mut() {
            for c in 0..d {
                t[c] += role[[ROLE_QUERY, c]];
            }
        }
        cursor += l;
        debug_assert_eq!(cursor, lc);

        let mut x = seq;
        let mut enc_caches = Vec::with_capacity(self.encoder.len());
        for block in &self.encoder {
            let (y, c) = block.forward(&x, store);
            enc_caches.push(c);
            x = y;
        }
        Ok((
            PromptContext { tokens: x },
            PromptCache { panels, boxes, encoder: enc_caches, n_examples: n },
        ))
    }

    /// The learned null condition used when conditioning is dropped.
    pub fn null_context(&self, store: &ParamStore) -> PromptContext {
        PromptContext { tokens: store.p2(self.null_token).to_owned() }
    }

    pub fn null_backward(&self, d_ctx: &Array2<f64>, grads: &mut Grads) {
        grads.add2(self.null_token, d_ctx);
    }

    fn vit_backward(
        &self,
        mut d: Array2<f64>,
        cache: &PanelCache,
        store: &ParamStore,
        grads: &mut Grads,
    ) {
        for (block, bc) in self.vit.iter().zip(&cache.vit).rev() {
            d = block.backward(&d, bc, store, grads);
        }
        grads.add2(self.pos_emb, &d);
        self.patch_proj.backward(&cache.patches, &d, store, grads);
    }

    fn box_backward(
        &self,
        d_token: &Array1<f64>,
        cache: &BoxCache,
        store: &ParamStore,
        grads: &mut Grads,
    ) {
        let dy = d_token.view().insert_axis(ndarray::Axis(0)).to_owned();
        let d_m1s = self.box_fc2.backward(&cache.m1s, &dy, store, grads);
        let d_m1 = silu_backward(&cache.m1, &d_m1s);
        let row = cache.feats.view().insert_axis(ndarray::Axis(0)).to_owned();
        self.box_fc1.backward(&row, &d_m1, store, grads);
    }

    /// Backpropagate a context gradient through the whole stack.
    pub fn backward(
        &self,
        d_ctx: &Array2<f64>,
        cache: &PromptCache,
        store: &ParamStore,
        grads: &mut Grads,
    ) {
        let mut d = d_ctx.clone();
        for (block, bc) in self.encoder.iter().zip(&cache.encoder).rev() {
            d = block.backward(&d, bc, store, grads);
        }

        let n = cache.n_examples;
        let l = self.cfg.tokens_per_panel();
        let dim = self.cfg.token_dim;
        let mut d_role = Array2::zeros((3, dim));
        let mut d_pair = Array2::zeros((self.cfg.max_examples, dim));
        let mut d_box_role = Array1::zeros(dim);
        let mut cursor = 0;
        let mut panel_idx = 0;
        let mut box_idx = 0;

        for i in 0..n {
            for role_idx in [ROLE_BEFORE, ROLE_AFTER] {
                let slab = d.slice(s![cursor..cursor + l, ..]).to_owned();
                for t in slab.rows() {
                    for c in 0..dim {
                        d_role[[role_idx, c]] += t[c];
                        d_pair[[i, c]] += t[c];
                    }
                }
                self.vit_backward(slab, &cache.panels[panel_idx], store, grads);
                panel_idx += 1;
                cursor += l;
            }
            for _ in 0..2 {
                let row = d.row(cursor).to_owned();
                for c in 0..dim {
                    d_box_role[c] += row[c];
                    d_pair[[i, c]] += row[c];
                }
                self.box_backward(&row, &cache.boxes[box_idx], store, grads);
                box_idx += 1;
                cursor += 1;
            }
        }
        let slab = d.slice(s![cursor..cursor + l, ..]).to_owned();
        for t in slab.rows() {
            for c in 0..dim {
                d_role[[ROLE_QUERY, c]] += t[c];
            }
        }
        self.vit_backward(slab, &cache.panels[panel_idx], store, grads);

        grads.add2(self.role_emb, &d_role);
        grads.add2(self.pair_emb, &d_pair);
        grads.add1(self.box_role_emb, &d_box_role);
    }

    /// Ids of every parameter belonging to the prompt stack (checked by the
    /// trainer when cross-attention is ablated: all must stay at zero grad).
    pub fn param_ids(&self, store: &ParamStore) -> Vec<ParamId> {
        store
            .ids()
            .filter(|id| store.name(*id).starts_with("prompt."))
            .collect()
    }
}
