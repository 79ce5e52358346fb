use rand::Rng;

use super::{KeepMask, TokenBatch, ViTConfig};
use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamSet, Scalar, Tensor, Var};
use crate::pruning::apply_prune;
use crate::rng::{substream, Stream};

const LN_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy)]
struct Linear {
    weight: usize,
    bias: usize,
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    gain: usize,
    bias: usize,
}

#[derive(Debug, Clone)]
struct BlockSlots {
    norm1: Norm,
    q: Linear,
    k: Linear,
    v: Linear,
    proj: Linear,
    norm2: Norm,
    fc1: Linear,
    fc2: Linear,
}

#[derive(Debug, Clone)]
struct Slots {
    patch: Linear,
    cls: usize,
    pos: usize,
    blocks: Vec<BlockSlots>,
    norm: Norm,
    head: Linear,
}

/// Patch embedder, pre-norm transformer blocks and a class-token classifier.
#[derive(Debug, Clone)]
pub struct ViT<F: Scalar> {
    pub config: ViTConfig,
    pub params: ParamSet<F>,
    slots: Slots,
}

/// Everything a pruning layer sees after its block has run (the state `S^l`).
#[derive(Debug)]
pub struct StageState<'a, F> {
    /// 0-based position in `prune_after`.
    pub stage: usize,
    /// 1-based index of the block that just ran.
    pub block: usize,
    /// Row-major `[batch * tokens, dim]` features.
    pub features: &'a [F],
    pub batch: usize,
    pub tokens: usize,
    pub dim: usize,
    /// Original token index of every row, per image.
    pub token_ids: &'a [Vec<usize>],
    /// Rows holding kept non-class tokens, per image, ascending.
    pub active_rows: Vec<Vec<usize>>,
}

impl<F: Scalar> StageState<'_, F> {
    pub fn row(&self, b: usize, r: usize) -> &[F] {
        let i = b * self.tokens + r;
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn cls(&self, b: usize) -> &[F] {
        self.row(b, 0)
    }

    /// Original token indices of the active agents of image `b`.
    pub fn active_tokens(&self, b: usize) -> Vec<usize> {
        self.active_rows[b].iter().map(|r| self.token_ids[b][*r]).collect()
    }

    pub fn num_active(&self) -> usize {
        self.active_rows.iter().map(Vec::len).sum()
    }
}

/// Decision source invoked after every pruning block.
pub trait PruneHook<F: Scalar> {
    /// Returns one action per active row and image: 0 prunes, 1 preserves.
    fn decide(&mut self, state: &StageState<'_, F>) -> Result<Vec<Vec<u8>>>;
}

/// Preserves every token.
#[derive(Debug, Default, Clone, Copy)]
pub struct NoPruning;

impl<F: Scalar> PruneHook<F> for NoPruning {
    fn decide(&mut self, state: &StageState<'_, F>) -> Result<Vec<Vec<u8>>> {
        Ok(state.active_rows.iter().map(|r| vec![1; r.len()]).collect())
    }
}

#[derive(Debug)]
pub struct ForwardOutput {
    /// `[batch, num_classes]`
    pub logits: Var,
    /// Keep mask in original token space after each pruning layer.
    pub masks: Vec<KeepMask>,
}

fn layout(config: &ViTConfig) -> Vec<(String, Vec<usize>)> {
    let d = config.embed_dim;
    let h = d * config.ffn_mult;
    let mut out = vec![
        ("patch_embed.weight".to_string(), vec![config.patch_dim(), d]),
        ("patch_embed.bias".to_string(), vec![d]),
        ("cls_token".to_string(), vec![d]),
        ("pos_embed".to_string(), vec![config.num_tokens(), d]),
    ];
    for i in 0..config.depth {
        let p = format!("blocks.{i}");
        let lin = |name: &str, fi: usize, fo: usize| {
            [
                (format!("{p}.{name}.weight"), vec![fi, fo]),
                (format!("{p}.{name}.bias"), vec![fo]),
            ]
        };
        out.push((format!("{p}.norm1.gain"), vec![d]));
        out.push((format!("{p}.norm1.bias"), vec![d]));
        out.extend(lin("attn.q", d, d));
        out.extend(lin("attn.k", d, d));
        out.extend(lin("attn.v", d, d));
        out.extend(lin("attn.proj", d, d));
        out.push((format!("{p}.norm2.gain"), vec![d]));
        out.push((format!("{p}.norm2.bias"), vec![d]));
        out.extend(lin("mlp.fc1", d, h));
        out.extend(lin("mlp.fc2", h, d));
    }
    out.push(("norm.gain".to_string(), vec![d]));
    out.push(("norm.bias".to_string(), vec![d]));
    out.push(("head.weight".to_string(), vec![d, config.num_classes]));
    out.push(("head.bias".to_string(), vec![config.num_classes]));
    out
}

fn slots(config: &ViTConfig) -> Slots {
    // Mirrors the order produced by `layout`.
    let mut next = 0usize;
    let mut take = || {
        next += 1;
        next - 1
    };
    let patch = Linear {
        weight: take(),
        bias: take(),
    };
    let cls = take();
    let pos = take();
    let mut blocks = Vec::with_capacity(config.depth);
    for _ in 0..config.depth {
        let norm1 = Norm {
            gain: take(),
            bias: take(),
        };
        let mut lin = || Linear {
            weight: take(),
            bias: take(),
        };
        let (q, k, v, proj) = (lin(), lin(), lin(), lin());
        let norm2 = Norm {
            gain: take(),
            bias: take(),
        };
        let mut lin = || Linear {
            weight: take(),
            bias: take(),
        };
        let (fc1, fc2) = (lin(), lin());
        blocks.push(BlockSlots {
            norm1,
            q,
            k,
            v,
            proj,
            norm2,
            fc1,
            fc2,
        });
    }
    let norm = Norm {
        gain: take(),
        bias: take(),
    };
    let head = Linear {
        weight: take(),
        bias: take(),
    };
    Slots {
        patch,
        cls,
        pos,
        blocks,
        norm,
        head,
    }
}

impl<F: Scalar> ViT<F> {
    /// Random initialization from the weight-init substream of `seed`.
    pub fn new(config: ViTConfig, seed: u64) -> Result<Self> {
        Self::init_with(config, &mut substream(seed, Stream::WeightInit, 0))
    }

    pub fn init_with<R: Rng + ?Sized>(config: ViTConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        for (name, shape) in layout(&config) {
            let t = if name.ends_with(".gain") {
                Tensor::filled(&shape, F::one())
            } else if name.ends_with(".bias") {
                Tensor::zeros(&shape)
            } else if name == "cls_token" || name == "pos_embed" {
                Tensor::randn(&shape, 0.02, rng)
            } else {
                let std = (2.0 / (shape[0] + shape[1]) as f64).sqrt();
                Tensor::randn(&shape, std, rng)
            };
            params.push(name, t);
        }
        let slots = slots(&config);
        Ok(Self { config, params, slots })
    }

    /// Builds a model around existing parameters, checking names and shapes.
    pub fn from_params(config: ViTConfig, params: ParamSet<F>) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        model.params.load_from(&params)?;
        Ok(model)
    }

    pub fn bind<'p>(&'p self, g: &mut Graph<'p, F>, trainable: bool) -> Vec<Var> {
        g.bind(&self.params, trainable)
    }

    fn linear(&self, g: &mut Graph<'_, F>, vars: &[Var], x: Var, l: Linear) -> Var {
        let y = g.matmul(x, vars[l.weight]);
        g.add_bias(y, vars[l.bias])
    }

    fn norm(&self, g: &mut Graph<'_, F>, vars: &[Var], x: Var, n: Norm) -> Var {
        g.layer_norm(x, vars[n.gain], vars[n.bias], F::of(LN_EPS))
    }

    fn check_images(&self, images: &Tensor<F>) -> Result<usize> {
        let c = &self.config;
        let want = [c.channels, c.image_size, c.image_size];
        if images.shape.len() != 4 || images.shape[1..] != want {
            return Err(Error::Config(format!(
                "images of shape {:?} do not match [B, {}, {}, {}]",
                images.shape, want[0], want[1], want[2]
            )));
        }
        Ok(images.shape[0])
    }

    /// Flattened patches `[B * N, C * p * p]`, patches in row-major grid order.
    pub fn patchify(&self, images: &Tensor<F>) -> Result<Tensor<F>> {
        let batch = self.check_images(images)?;
        let c = &self.config;
        let (p, s, grid) = (c.patch_size, c.image_size, c.grid());
        let mut out = Vec::with_capacity(images.numel());
        for b in 0..batch {
            for gy in 0..grid {
                for gx in 0..grid {
                    for ch in 0..c.channels {
                        for py in 0..p {
                            let row = ((b * c.channels + ch) * s + gy * p + py) * s + gx * p;
                            out.extend_from_slice(&images.values[row..row + p]);
                        }
                    }
                }
            }
        }
        Tensor::new(&[batch * c.num_patches(), c.patch_dim()], out)
    }

    /// Token rows `[B * T, D]` after patch projection, class token and positions.
    pub fn embed_graph(&self, g: &mut Graph<'_, F>, vars: &[Var], images: &Tensor<F>) -> Result<Var> {
        let batch = self.check_images(images)?;
        let patches = g.constant(self.patchify(images)?);
        let proj = self.linear(g, vars, patches, self.slots.patch);
        Ok(g.assemble_tokens(proj, vars[self.slots.cls], vars[self.slots.pos], batch))
    }

    #[allow(clippy::too_many_arguments)]
    fn block_graph_inner(
        &self,
        g: &mut Graph<'_, F>,
        vars: &[Var],
        block: usize,
        x: Var,
        batch: usize,
        tokens: usize,
        additive_mask: &[F],
    ) -> Result<(Var, Var)> {
        let s = &self.slots.blocks[block];
        let heads = self.config.num_heads;
        let dh = self.config.embed_dim / heads;
        let h = self.norm(g, vars, x, s.norm1);
        let q = self.linear(g, vars, h, s.q);
        let k = self.linear(g, vars, h, s.k);
        let v = self.linear(g, vars, h, s.v);
        let q = g.split_heads(q, batch, tokens, heads);
        let k = g.split_heads(k, batch, tokens, heads);
        let v = g.split_heads(v, batch, tokens, heads);
        let scores = g.bmm(q, k, true);
        let scores = g.scale(scores, F::of(1.0 / (dh as f64).sqrt()));
        let attn = g.masked_softmax(scores, additive_mask, tokens)?;
        let ctx = g.bmm(attn, v, false);
        let ctx = g.merge_heads(ctx, batch, tokens, heads);
        let out = self.linear(g, vars, ctx, s.proj);
        let x = g.add(x, out);
        let h = self.norm(g, vars, x, s.norm2);
        let h = self.linear(g, vars, h, s.fc1);
        let h = g.gelu(h);
        let h = self.linear(g, vars, h, s.fc2);
        Ok((g.add(x, h), attn))
    }

    /// One pre-norm block; `additive_mask` holds one key row per (image, head).
    #[allow(clippy::too_many_arguments)]
    pub fn block_graph(
        &self,
        g: &mut Graph<'_, F>,
        vars: &[Var],
        block: usize,
        x: Var,
        batch: usize,
        tokens: usize,
        additive_mask: &[F],
    ) -> Result<Var> {
        Ok(self
            .block_graph_inner(g, vars, block, x, batch, tokens, additive_mask)?
            .0)
    }

    /// Final norm and linear head on the class token (row 0 of each image).
    pub fn head_graph(&self, g: &mut Graph<'_, F>, vars: &[Var], x: Var, batch: usize, tokens: usize) -> Var {
        let rows: Vec<usize> = (0..batch).map(|b| b * tokens).collect();
        let cls = g.gather_rows(x, &rows);
        let cls = self.norm(g, vars, cls, self.slots.norm);
        self.linear(g, vars, cls, self.slots.head)
    }

    /// Full forward pass with a pruning layer after every block in `prune_after`.
    ///
    /// With `compact`, pruned rows are physically removed after each pruning
    /// layer instead of being masked; this requires a batch of one.
    pub fn forward<'p>(
        &'p self,
        g: &mut Graph<'p, F>,
        vars: &[Var],
        images: &Tensor<F>,
        hook: &mut dyn PruneHook<F>,
        compact: bool,
    ) -> Result<ForwardOutput> {
        let batch = self.check_images(images)?;
        if compact && batch != 1 {
            return Err(Error::Shape(format!(
                "compacted execution runs one image at a time, got {batch}"
            )));
        }
        let c = &self.config;
        let mut tokens = c.num_tokens();
        let mut x = self.embed_graph(g, vars, images)?;
        let mut mask = KeepMask::all(batch, tokens);
        let mut token_ids: Vec<Vec<usize>> = vec![(0..tokens).collect(); batch];
        let mut masks = Vec::with_capacity(c.num_stages());

        for block in 0..c.depth {
            let additive = if compact {
                vec![F::zero(); batch * c.num_heads * tokens]
            } else {
                mask.additive(c.num_heads)
            };
            x = self.block_graph(g, vars, block, x, batch, tokens, &additive)?;

            let Some(stage) = c.prune_after.iter().position(|b| *b == block + 1) else {
                continue;
            };
            let active_rows: Vec<Vec<usize>> = (0..batch)
                .map(|b| (1..tokens).filter(|&r| mask.get(b, token_ids[b][r])).collect())
                .collect();
            let state = StageState {
                stage,
                block: block + 1,
                features: g.value(x),
                batch,
                tokens,
                dim: c.embed_dim,
                token_ids: &token_ids,
                active_rows,
            };
            let actions = hook.decide(&state)?;
            if actions.len() != batch {
                return Err(Error::Invariant(format!(
                    "{} action rows for {batch} images",
                    actions.len()
                )));
            }
            for (b, acts) in actions.iter().enumerate() {
                let active = state.active_tokens(b);
                apply_prune(&mut mask, b, acts, &active)?;
            }
            masks.push(mask.clone());

            if compact {
                let kept: Vec<usize> = (0..tokens).filter(|&r| mask.get(0, token_ids[0][r])).collect();
                if kept.len() < tokens {
                    x = g.gather_rows(x, &kept);
                    token_ids[0] = kept.iter().map(|r| token_ids[0][*r]).collect();
                    tokens = kept.len();
                }
            }
        }
        let logits = self.head_graph(g, vars, x, batch, tokens);
        Ok(ForwardOutput { logits, masks })
    }

    /// Inference-only logits `[B, num_classes]` and per-stage masks.
    pub fn infer(
        &self,
        images: &Tensor<F>,
        hook: &mut dyn PruneHook<F>,
        compact: bool,
    ) -> Result<(Tensor<F>, Vec<KeepMask>)> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let out = self.forward(&mut g, &vars, images, hook, compact)?;
        Ok((g.tensor(out.logits), out.masks))
    }

    /// Like [`ViT::infer`] but also reports executed matrix-product MACs.
    pub fn infer_counting(
        &self,
        images: &Tensor<F>,
        hook: &mut dyn PruneHook<F>,
        compact: bool,
    ) -> Result<(Tensor<F>, u64)> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let out = self.forward(&mut g, &vars, images, hook, compact)?;
        Ok((g.tensor(out.logits), g.macs()))
    }

    pub fn patch_embed(&self, images: &Tensor<F>) -> Result<TokenBatch<F>> {
        let batch = self.check_images(images)?;
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let x = self.embed_graph(&mut g, &vars, images)?;
        let t = self.config.num_tokens();
        Ok(TokenBatch {
            features: Tensor::new(&[batch, t, self.config.embed_dim], g.value(x).to_vec())?,
            keep_mask: KeepMask::all(batch, t),
        })
    }

    /// Runs block `block` (0-based) on a token batch under its keep mask.
    pub fn block_forward(&self, block: usize, tokens: &TokenBatch<F>) -> Result<TokenBatch<F>> {
        Ok(self.block_with_attention(block, tokens)?.0)
    }

    /// Block output together with its attention probabilities `[B, H, T, T]`.
    pub fn block_with_attention(&self, block: usize, tokens: &TokenBatch<F>) -> Result<(TokenBatch<F>, Tensor<F>)> {
        if block >= self.config.depth {
            return Err(Error::Config(format!("block {block} out of range")));
        }
        let (b, t, d) = (tokens.batch(), tokens.tokens(), tokens.dim());
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let x = g.constant(Tensor::new(&[b * t, d], tokens.features.values.clone())?);
        let additive = tokens.keep_mask.additive(self.config.num_heads);
        let (y, attn) = self.block_graph_inner(&mut g, &vars, block, x, b, t, &additive)?;
        let out = TokenBatch {
            features: Tensor::new(&[b, t, d], g.value(y).to_vec())?,
            keep_mask: tokens.keep_mask.clone(),
        };
        let probs = Tensor::new(&[b, self.config.num_heads, t, t], g.value(attn).to_vec())?;
        Ok((out, probs))
    }

    /// Logits from the class token of a token batch.
    pub fn classify(&self, tokens: &TokenBatch<F>) -> Result<Tensor<F>> {
        let (b, t, d) = (tokens.batch(), tokens.tokens(), tokens.dim());
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let x = g.constant(Tensor::new(&[b * t, d], tokens.features.values.clone())?);
        let logits = self.head_graph(&mut g, &vars, x, b, t);
        Ok(g.tensor(logits))
    }

    /// Patch projection, head weights and other named parameters, by name.
    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<F>> {
        let slot = self.params.slot(name)?;
        Some(self.params.get_mut(slot))
    }
}
