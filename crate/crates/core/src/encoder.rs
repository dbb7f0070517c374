//! Point-map patch tokenizer, a small pre-norm token-mixing encoder with a
//! per-view summary token, low-rank adapters on the attention Q/V
//! projections, the EMA-tracked target encoder, and the masked-patch
//! predictor.
//!
//! The same forward code serves the trainable context encoder, the frozen
//! reference image encoder, and the EMA target encoder: weights are bound
//! into the autodiff graph either as leaves (trainable) or constants
//! (frozen), so there is exactly one implementation to verify.

use crate::geometry::PointMap;
use crate::graph::{Graph, NodeId};
use crate::masking::PatchKey;
use crate::mat::Mat;
use crate::rng::{next_gaussian, rng_for};
use crate::scalar::Scalar;
use crate::{codec, Error, Result};
use std::collections::BTreeSet;
use std::io::{Read, Write};

/// Architecture hyperparameters. `dim` must be divisible by `heads`;
/// point maps fed to [`patchify`] must be `patch`-divisible and produce a
/// grid no larger than (`grid_h`, `grid_w`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncoderConfig {
    pub dim: usize,
    pub blocks: usize,
    pub heads: usize,
    pub patch: usize,
    /// Maximum number of views addressable by the positional table.
    pub view_max: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub predictor_blocks: usize,
}

impl EncoderConfig {
    /// Desk-scale default: d=64, 2 blocks, 4 heads, 16px patches on 64x64
    /// maps, 8 views, rank-32 adapters with alpha 64, 2 predictor blocks.
    pub fn default_desk() -> Self {
        EncoderConfig {
            dim: 64,
            blocks: 2,
            heads: 4,
            patch: 16,
            view_max: 8,
            grid_h: 4,
            grid_w: 4,
            lora_rank: 32,
            lora_alpha: 64.0,
            predictor_blocks: 2,
        }
    }

    /// Flattened patch dimension (3 coordinates per pixel).
    pub fn patch_dim(&self) -> usize {
        3 * self.patch * self.patch
    }

    /// Input width of the patch projection: patch dim plus the validity
    /// fraction feature.
    pub fn input_dim(&self) -> usize {
        self.patch_dim() + 1
    }

    pub fn pos_rows(&self) -> usize {
        self.view_max * self.grid_h * self.grid_w
    }

    pub fn pos_index(&self, key: PatchKey) -> Result<usize> {
        if key.view >= self.view_max || key.row >= self.grid_h || key.col >= self.grid_w {
            return Err(Error::InvalidArgument(format!(
                "patch key {key:?} outside positional table ({}x{}x{})",
                self.view_max, self.grid_h, self.grid_w
            )));
        }
        Ok((key.view * self.grid_h + key.row) * self.grid_w + key.col)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "dim {} must be a positive multiple of heads {}",
                self.dim, self.heads
            )));
        }
        if self.blocks == 0 || self.patch == 0 || self.view_max == 0 {
            return Err(Error::Config("zero-sized architecture field".into()));
        }
        if self.lora_rank == 0 {
            return Err(Error::Config("adapter rank must be >= 1".into()));
        }
        Ok(())
    }
}

/// One pre-norm attention + feed-forward block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights<T> {
    pub ln1_gain: Mat<T>,
    pub ln1_bias: Mat<T>,
    pub q: Mat<T>,
    pub k: Mat<T>,
    pub v: Mat<T>,
    pub o: Mat<T>,
    pub ln2_gain: Mat<T>,
    pub ln2_bias: Mat<T>,
    pub ff1: Mat<T>,
    pub ff2: Mat<T>,
}

/// Low-rank delta for one matrix: effective update is (alpha/rank)·(B·A)ᵀ
/// for weights stored in x·W orientation.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterPair<T> {
    /// rank × dim
    pub a: Mat<T>,
    /// dim × rank, zero-initialized so the warm start equals the base model
    pub b: Mat<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockAdapters<T> {
    pub q: AdapterPair<T>,
    pub v: AdapterPair<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterSet<T> {
    pub rank: usize,
    pub alpha: f64,
    pub blocks: Vec<BlockAdapters<T>>,
}

impl<T: Scalar> AdapterSet<T> {
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

/// Mask-query construction and joint blocks of the predictor.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictorWeights<T> {
    pub mask_token: Mat<T>,
    pub pos_table: Mat<T>,
    pub blocks: Vec<BlockWeights<T>>,
}

/// Full parameter set: encoder, output head, temperature, optional
/// adapters, and the predictor.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights<T> {
    pub config: EncoderConfig,
    pub patch_proj: Mat<T>,
    pub patch_bias: Mat<T>,
    pub pos_table: Mat<T>,
    pub summary: Mat<T>,
    pub blocks: Vec<BlockWeights<T>>,
    pub head: Mat<T>,
    /// Temperature stored as log(tau).
    pub log_tau: Mat<T>,
    pub adapters: Option<AdapterSet<T>>,
    pub predictor: PredictorWeights<T>,
}

pub const TAU_INIT: f64 = 0.07;
const INIT_STD: f64 = 0.02;

fn gauss_mat<T: Scalar>(rng: &mut rand_chacha::ChaCha8Rng, rows: usize, cols: usize) -> Mat<T> {
    Mat::from_fn(rows, cols, |_, _| T::from_f64(next_gaussian(rng) * INIT_STD))
}

fn init_block<T: Scalar>(rng: &mut rand_chacha::ChaCha8Rng, d: usize) -> BlockWeights<T> {
    BlockWeights {
        ln1_gain: Mat::from_fn(1, d, |_, _| T::one()),
        ln1_bias: Mat::zeros(1, d),
        q: gauss_mat(rng, d, d),
        k: gauss_mat(rng, d, d),
        v: gauss_mat(rng, d, d),
        o: gauss_mat(rng, d, d),
        ln2_gain: Mat::from_fn(1, d, |_, _| T::one()),
        ln2_bias: Mat::zeros(1, d),
        ff1: gauss_mat(rng, d, 4 * d),
        ff2: gauss_mat(rng, 4 * d, d),
    }
}

impl<T: Scalar> ModelWeights<T> {
    /// Seeded random initialization. Adapter A matrices are small random,
    /// B matrices zero, so the adapted model starts exactly at the base.
    pub fn init(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_for(seed, 0x696e_6974);
        let d = config.dim;
        let blocks = (0..config.blocks).map(|_| init_block(&mut rng, d)).collect();
        let adapters = AdapterSet {
            rank: config.lora_rank,
            alpha: config.lora_alpha,
            blocks: (0..config.blocks)
                .map(|_| BlockAdapters {
                    q: AdapterPair {
                        a: gauss_mat(&mut rng, config.lora_rank, d),
                        b: Mat::zeros(d, config.lora_rank),
                    },
                    v: AdapterPair {
                        a: gauss_mat(&mut rng, config.lora_rank, d),
                        b: Mat::zeros(d, config.lora_rank),
                    },
                })
                .collect(),
        };
        let predictor = PredictorWeights {
            mask_token: gauss_mat(&mut rng, 1, d),
            pos_table: gauss_mat(&mut rng, config.pos_rows(), d),
            blocks: (0..config.predictor_blocks)
                .map(|_| init_block(&mut rng, d))
                .collect(),
        };
        Ok(ModelWeights {
            config,
            patch_proj: gauss_mat(&mut rng, config.input_dim(), d),
            patch_bias: Mat::zeros(1, d),
            pos_table: gauss_mat(&mut rng, config.pos_rows(), d),
            summary: gauss_mat(&mut rng, 1, d),
            blocks,
            head: gauss_mat(&mut rng, d, d),
            log_tau: Mat::scalar(T::from_f64(TAU_INIT.ln())),
            adapters: Some(adapters),
            predictor,
        })
    }

    pub fn convert<U: Scalar>(&self) -> ModelWeights<U> {
        let conv_block = |b: &BlockWeights<T>| BlockWeights {
            ln1_gain: b.ln1_gain.convert(),
            ln1_bias: b.ln1_bias.convert(),
            q: b.q.convert(),
            k: b.k.convert(),
            v: b.v.convert(),
            o: b.o.convert(),
            ln2_gain: b.ln2_gain.convert(),
            ln2_bias: b.ln2_bias.convert(),
            ff1: b.ff1.convert(),
            ff2: b.ff2.convert(),
        };
        ModelWeights {
            config: self.config,
            patch_proj: self.patch_proj.convert(),
            patch_bias: self.patch_bias.convert(),
            pos_table: self.pos_table.convert(),
            summary: self.summary.convert(),
            blocks: self.blocks.iter().map(conv_block).collect(),
            head: self.head.convert(),
            log_tau: self.log_tau.convert(),
            adapters: self.adapters.as_ref().map(|a| AdapterSet {
                rank: a.rank,
                alpha: a.alpha,
                blocks: a
                    .blocks
                    .iter()
                    .map(|ba| BlockAdapters {
                        q: AdapterPair {
                            a: ba.q.a.convert(),
                            b: ba.q.b.convert(),
                        },
                        v: AdapterPair {
                            a: ba.v.a.convert(),
                            b: ba.v.b.convert(),
                        },
                    })
                    .collect(),
            }),
            predictor: PredictorWeights {
                mask_token: self.predictor.mask_token.convert(),
                pos_table: self.predictor.pos_table.convert(),
                blocks: self.predictor.blocks.iter().map(conv_block).collect(),
            },
        }
    }

    pub fn tau(&self) -> T {
        self.log_tau.item().exp()
    }

    /// All parameters with stable names, in a fixed order.
    pub fn named_params(&self) -> Vec<(String, &Mat<T>)> {
        let mut out: Vec<(String, &Mat<T>)> = vec![
            ("patch_proj".into(), &self.patch_proj),
            ("patch_bias".into(), &self.patch_bias),
            ("pos_table".into(), &self.pos_table),
            ("summary".into(), &self.summary),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            push_block_refs(&mut out, &format!("blocks.{i}"), b);
        }
        out.push(("head".into(), &self.head));
        out.push(("log_tau".into(), &self.log_tau));
        if let Some(ad) = &self.adapters {
            for (i, ba) in ad.blocks.iter().enumerate() {
                out.push((format!("adapters.{i}.q.a"), &ba.q.a));
                out.push((format!("adapters.{i}.q.b"), &ba.q.b));
                out.push((format!("adapters.{i}.v.a"), &ba.v.a));
                out.push((format!("adapters.{i}.v.b"), &ba.v.b));
            }
        }
        out.push(("pred.mask_token".into(), &self.predictor.mask_token));
        out.push(("pred.pos_table".into(), &self.predictor.pos_table));
        for (i, b) in self.predictor.blocks.iter().enumerate() {
            push_block_refs(&mut out, &format!("pred.blocks.{i}"), b);
        }
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Mat<T>)> {
        let mut out: Vec<(String, &mut Mat<T>)> = vec![
            ("patch_proj".into(), &mut self.patch_proj),
            ("patch_bias".into(), &mut self.patch_bias),
            ("pos_table".into(), &mut self.pos_table),
            ("summary".into(), &mut self.summary),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            push_block_muts(&mut out, &format!("blocks.{i}"), b);
        }
        out.push(("head".into(), &mut self.head));
        out.push(("log_tau".into(), &mut self.log_tau));
        if let Some(ad) = &mut self.adapters {
            for (i, ba) in ad.blocks.iter_mut().enumerate() {
                out.push((format!("adapters.{i}.q.a"), &mut ba.q.a));
                out.push((format!("adapters.{i}.q.b"), &mut ba.q.b));
                out.push((format!("adapters.{i}.v.a"), &mut ba.v.a));
                out.push((format!("adapters.{i}.v.b"), &mut ba.v.b));
            }
        }
        out.push(("pred.mask_token".into(), &mut self.predictor.mask_token));
        out.push(("pred.pos_table".into(), &mut self.predictor.pos_table));
        for (i, b) in self.predictor.blocks.iter_mut().enumerate() {
            push_block_muts(&mut out, &format!("pred.blocks.{i}"), b);
        }
        out
    }
}

fn push_block_refs<'a, T>(
    out: &mut Vec<(String, &'a Mat<T>)>,
    prefix: &str,
    b: &'a BlockWeights<T>,
) {
    out.push((format!("{prefix}.ln1.g"), &b.ln1_gain));
    out.push((format!("{prefix}.ln1.b"), &b.ln1_bias));
    out.push((format!("{prefix}.attn.q"), &b.q));
    out.push((format!("{prefix}.attn.k"), &b.k));
    out.push((format!("{prefix}.attn.v"), &b.v));
    out.push((format!("{prefix}.attn.o"), &b.o));
    out.push((format!("{prefix}.ln2.g"), &b.ln2_gain));
    out.push((format!("{prefix}.ln2.b"), &b.ln2_bias));
    out.push((format!("{prefix}.ff.w1"), &b.ff1));
    out.push((format!("{prefix}.ff.w2"), &b.ff2));
}

fn push_block_muts<'a, T>(
    out: &mut Vec<(String, &'a mut Mat<T>)>,
    prefix: &str,
    b: &'a mut BlockWeights<T>,
) {
    out.push((format!("{prefix}.ln1.g"), &mut b.ln1_gain));
    out.push((format!("{prefix}.ln1.b"), &mut b.ln1_bias));
    out.push((format!("{prefix}.attn.q"), &mut b.q));
    out.push((format!("{prefix}.attn.k"), &mut b.k));
    out.push((format!("{prefix}.attn.v"), &mut b.v));
    out.push((format!("{prefix}.attn.o"), &mut b.o));
    out.push((format!("{prefix}.ln2.g"), &mut b.ln2_gain));
    out.push((format!("{prefix}.ln2.b"), &mut b.ln2_bias));
    out.push((format!("{prefix}.ff.w1"), &mut b.ff1));
    out.push((format!("{prefix}.ff.w2"), &mut b.ff2));
}

/// Frozen/trainable split: the base encoder (patch projection and block
/// matrices) is frozen; adapters, positional table, summary token, output
/// head, temperature and the whole predictor train.
pub fn is_trainable(name: &str) -> bool {
    name == "pos_table"
        || name == "summary"
        || name == "head"
        || name == "log_tau"
        || name.starts_with("adapters.")
        || name.starts_with("pred.")
}

/// Merge adapter deltas into dense weights: for each adapted matrix,
/// W' = W + (alpha/rank)·(B·A)ᵀ. The result carries no adapters.
pub fn effective_weights<T: Scalar>(
    base: &ModelWeights<T>,
    adapters: &AdapterSet<T>,
) -> Result<ModelWeights<T>> {
    if adapters.blocks.len() != base.blocks.len() {
        return Err(Error::Adapter(format!(
            "adapter blocks {} != encoder blocks {}",
            adapters.blocks.len(),
            base.blocks.len()
        )));
    }
    let scale = T::from_f64(adapters.scaling());
    let mut out = base.clone();
    for (block, ba) in out.blocks.iter_mut().zip(adapters.blocks.iter()) {
        block.q = apply_delta(&block.q, &ba.q, scale)?;
        block.v = apply_delta(&block.v, &ba.v, scale)?;
    }
    out.adapters = None;
    Ok(out)
}

fn apply_delta<T: Scalar>(w: &Mat<T>, pair: &AdapterPair<T>, scale: T) -> Result<Mat<T>> {
    if pair.b.cols() != pair.a.rows()
        || pair.a.cols() != w.rows()
        || pair.b.rows() != w.cols()
    {
        return Err(Error::Adapter(format!(
            "adapter shapes A{:?} B{:?} incompatible with W{:?}",
            pair.a.shape(),
            pair.b.shape(),
            w.shape()
        )));
    }
    let delta = pair.b.matmul(&pair.a).transpose();
    let mut out = w.clone();
    out.add_scaled(&delta, scale);
    Ok(out)
}

/// In-place EMA step over every parameter: each target parameter becomes
/// m·target + (1-m)·context. Both sides must have identical shapes (and so
/// identical adapter presence).
pub fn ema_update<T: Scalar>(
    target: &mut ModelWeights<T>,
    context: &ModelWeights<T>,
    momentum: T,
) -> Result<()> {
    if !(momentum >= T::zero() && momentum <= T::one()) {
        return Err(Error::InvalidArgument(format!(
            "EMA momentum must lie in [0, 1], got {momentum}"
        )));
    }
    let ctx = context.named_params();
    let mut tgt = target.named_params_mut();
    if ctx.len() != tgt.len() {
        return Err(Error::ShapeMismatch(
            "EMA parameter sets differ in length".into(),
        ));
    }
    for ((tname, tmat), (cname, cmat)) in tgt.iter_mut().zip(ctx.iter()) {
        if tname != cname || tmat.shape() != cmat.shape() {
            return Err(Error::ShapeMismatch(format!(
                "EMA mismatch at {tname} vs {cname}"
            )));
        }
        let m = momentum;
        **tmat = tmat.zip_map(cmat, |t, c| m * t + (T::one() - m) * c);
    }
    Ok(())
}

/// Patch tokens of a single view: flattened patch coordinates, validity
/// fractions, and grid positions (view index 0 until re-tagged).
#[derive(Debug, Clone)]
pub struct TokenSequence<T> {
    /// n × (3·P²) flattened patches, invalid coordinates zero-filled.
    pub tokens: Mat<T>,
    /// Fraction of valid pixels per patch.
    pub validity: Vec<T>,
    pub positions: Vec<PatchKey>,
}

impl<T: Scalar> TokenSequence<T> {
    pub fn with_view(mut self, view: usize) -> Self {
        for p in &mut self.positions {
            p.view = view;
        }
        self
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Cut a point map into P×P patches, row-major within each patch, NaN
/// coordinates replaced by zero with the valid fraction recorded.
pub fn patchify<T: Scalar>(pm: &PointMap, patch: usize) -> Result<TokenSequence<T>> {
    if patch == 0 || pm.height() % patch != 0 || pm.width() % patch != 0 {
        return Err(Error::ShapeMismatch(format!(
            "{}x{} map not divisible by patch size {patch}",
            pm.height(),
            pm.width()
        )));
    }
    let gh = pm.height() / patch;
    let gw = pm.width() / patch;
    let d_in = 3 * patch * patch;
    let mut tokens = Mat::zeros(gh * gw, d_in);
    let mut validity = Vec::with_capacity(gh * gw);
    let mut positions = Vec::with_capacity(gh * gw);
    for pr in 0..gh {
        for pc in 0..gw {
            let t = pr * gw + pc;
            let mut valid = 0usize;
            let row = tokens.row_mut(t);
            for dy in 0..patch {
                for dx in 0..patch {
                    let p = pm.get(pr * patch + dy, pc * patch + dx);
                    let at = 3 * (dy * patch + dx);
                    if PointMap::is_valid(p) {
                        valid += 1;
                        row[at] = T::from_f64(p[0]);
                        row[at + 1] = T::from_f64(p[1]);
                        row[at + 2] = T::from_f64(p[2]);
                    }
                }
            }
            validity.push(T::from_usize(valid) / T::from_usize(patch * patch));
            positions.push(PatchKey {
                view: 0,
                row: pr,
                col: pc,
            });
        }
    }
    Ok(TokenSequence {
        tokens,
        validity,
        positions,
    })
}

/// Whether weights enter the graph as differentiable leaves or constants.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BindMode {
    Trainable,
    Frozen,
}

#[derive(Debug, Clone, Copy)]
pub struct BoundBlock {
    pub ln1_gain: NodeId,
    pub ln1_bias: NodeId,
    pub q: NodeId,
    pub k: NodeId,
    pub v: NodeId,
    pub o: NodeId,
    pub ln2_gain: NodeId,
    pub ln2_bias: NodeId,
    pub ff1: NodeId,
    pub ff2: NodeId,
}

/// Model weights bound into a graph, with adapter deltas already merged
/// into the attention projections as graph ops (so gradients reach A/B).
pub struct BoundModel {
    pub config: EncoderConfig,
    pub patch_proj: NodeId,
    pub patch_bias: NodeId,
    pub pos_table: NodeId,
    pub summary: NodeId,
    pub blocks: Vec<BoundBlock>,
    pub head: NodeId,
    pub log_tau: NodeId,
    pub pred_mask_token: NodeId,
    pub pred_pos_table: NodeId,
    pub pred_blocks: Vec<BoundBlock>,
    /// Leaf registry (name, node) for gradient extraction; empty in frozen
    /// mode.
    pub leaves: Vec<(String, NodeId)>,
}

/// Bind weights into the graph. In trainable mode the trainable subset
/// becomes leaves and everything else constants; in frozen mode everything
/// is constant. Adapters, when present, are merged via graph ops either way.
pub fn bind_model<T: Scalar>(
    g: &mut Graph<T>,
    w: &ModelWeights<T>,
    mode: BindMode,
) -> Result<BoundModel> {
    let mut leaves = Vec::new();
    let mut bind = |g: &mut Graph<T>, name: String, m: &Mat<T>| -> NodeId {
        if mode == BindMode::Trainable && is_trainable(&name) {
            let id = g.leaf(m.clone());
            leaves.push((name, id));
            id
        } else {
            g.constant(m.clone())
        }
    };

    let patch_proj = bind(g, "patch_proj".into(), &w.patch_proj);
    let patch_bias = bind(g, "patch_bias".into(), &w.patch_bias);
    let pos_table = bind(g, "pos_table".into(), &w.pos_table);
    let summary = bind(g, "summary".into(), &w.summary);

    let mut blocks = Vec::with_capacity(w.blocks.len());
    for (i, b) in w.blocks.iter().enumerate() {
        let prefix = format!("blocks.{i}");
        let mut bb = BoundBlock {
            ln1_gain: bind(g, format!("{prefix}.ln1.g"), &b.ln1_gain),
            ln1_bias: bind(g, format!("{prefix}.ln1.b"), &b.ln1_bias),
            q: bind(g, format!("{prefix}.attn.q"), &b.q),
            k: bind(g, format!("{prefix}.attn.k"), &b.k),
            v: bind(g, format!("{prefix}.attn.v"), &b.v),
            o: bind(g, format!("{prefix}.attn.o"), &b.o),
            ln2_gain: bind(g, format!("{prefix}.ln2.g"), &b.ln2_gain),
            ln2_bias: bind(g, format!("{prefix}.ln2.b"), &b.ln2_bias),
            ff1: bind(g, format!("{prefix}.ff.w1"), &b.ff1),
            ff2: bind(g, format!("{prefix}.ff.w2"), &b.ff2),
        };
        if let Some(ad) = &w.adapters {
            let ba = ad.blocks.get(i).ok_or_else(|| {
                Error::Adapter(format!("missing adapters for block {i}"))
            })?;
            let scale = T::from_f64(ad.scaling());
            bb.q = adapted(g, &mut bind, &format!("adapters.{i}.q"), bb.q, &ba.q, scale)?;
            bb.v = adapted(g, &mut bind, &format!("adapters.{i}.v"), bb.v, &ba.v, scale)?;
        }
        blocks.push(bb);
    }

    let head = bind(g, "head".into(), &w.head);
    let log_tau = bind(g, "log_tau".into(), &w.log_tau);
    let pred_mask_token = bind(g, "pred.mask_token".into(), &w.predictor.mask_token);
    let pred_pos_table = bind(g, "pred.pos_table".into(), &w.predictor.pos_table);
    let mut pred_blocks = Vec::with_capacity(w.predictor.blocks.len());
    for (i, b) in w.predictor.blocks.iter().enumerate() {
        let prefix = format!("pred.blocks.{i}");
        pred_blocks.push(BoundBlock {
            ln1_gain: bind(g, format!("{prefix}.ln1.g"), &b.ln1_gain),
            ln1_bias: bind(g, format!("{prefix}.ln1.b"), &b.ln1_bias),
            q: bind(g, format!("{prefix}.attn.q"), &b.q),
            k: bind(g, format!("{prefix}.attn.k"), &b.k),
            v: bind(g, format!("{prefix}.attn.v"), &b.v),
            o: bind(g, format!("{prefix}.attn.o"), &b.o),
            ln2_gain: bind(g, format!("{prefix}.ln2.g"), &b.ln2_gain),
            ln2_bias: bind(g, format!("{prefix}.ln2.b"), &b.ln2_bias),
            ff1: bind(g, format!("{prefix}.ff.w1"), &b.ff1),
            ff2: bind(g, format!("{prefix}.ff.w2"), &b.ff2),
        });
    }

    Ok(BoundModel {
        config: w.config,
        patch_proj,
        patch_bias,
        pos_table,
        summary,
        blocks,
        head,
        log_tau,
        pred_mask_token,
        pred_pos_table,
        pred_blocks,
        leaves,
    })
}

fn adapted<T: Scalar>(
    g: &mut Graph<T>,
    bind: &mut impl FnMut(&mut Graph<T>, String, &Mat<T>) -> NodeId,
    prefix: &str,
    base: NodeId,
    pair: &AdapterPair<T>,
    scale: T,
) -> Result<NodeId> {
    if pair.b.cols() != pair.a.rows()
        || g.value(base).rows() != pair.a.cols()
        || g.value(base).cols() != pair.b.rows()
    {
        return Err(Error::Adapter(format!(
            "adapter shapes A{:?} B{:?} incompatible at {prefix}",
            pair.a.shape(),
            pair.b.shape()
        )));
    }
    let a = bind(g, format!("{prefix}.a"), &pair.a);
    let b = bind(g, format!("{prefix}.b"), &pair.b);
    let ba = g.matmul(b, a);
    let delta = g.transpose(ba);
    let scaled = g.scale_const(delta, scale);
    Ok(g.add(base, scaled))
}

fn run_block<T: Scalar>(g: &mut Graph<T>, x: NodeId, b: &BoundBlock, heads: usize) -> NodeId {
    let normed = g.layer_norm(x, b.ln1_gain, b.ln1_bias);
    let q = g.matmul(normed, b.q);
    let k = g.matmul(normed, b.k);
    let v = g.matmul(normed, b.v);
    let d = g.value(q).cols();
    let dh = d / heads;
    let scale = T::from_f64(1.0 / (dh as f64).sqrt());
    let mut head_outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(q, h * dh, (h + 1) * dh);
        let kh = g.slice_cols(k, h * dh, (h + 1) * dh);
        let vh = g.slice_cols(v, h * dh, (h + 1) * dh);
        let kt = g.transpose(kh);
        let scores = g.matmul(qh, kt);
        let scaled = g.scale_const(scores, scale);
        let attn = g.softmax_rows(scaled);
        head_outs.push(g.matmul(attn, vh));
    }
    let cat = g.concat_cols(&head_outs);
    let proj = g.matmul(cat, b.o);
    let x = g.add(x, proj);
    let normed2 = g.layer_norm(x, b.ln2_gain, b.ln2_bias);
    let h1 = g.matmul(normed2, b.ff1);
    let act = g.gelu(h1);
    let h2 = g.matmul(act, b.ff2);
    g.add(x, h2)
}

/// Encoder output for one view.
pub struct ViewEncoding {
    /// Unit-normalized alignment embedding of the view (1×d).
    pub summary: NodeId,
    /// Raw patch embeddings (n×d); None when all tokens were restricted away.
    pub patches: Option<NodeId>,
    pub keys: Vec<PatchKey>,
}

/// Encode one or more views. Views attend only within themselves (a
/// per-view summary token is prepended); the predictor is where views meet.
/// `restrict` limits participating tokens to the listed visible keys.
pub fn encode_views<T: Scalar>(
    g: &mut Graph<T>,
    bm: &BoundModel,
    views: &[TokenSequence<T>],
    restrict: Option<&BTreeSet<PatchKey>>,
) -> Result<Vec<ViewEncoding>> {
    if views.is_empty() {
        return Err(Error::InvalidArgument("no views to encode".into()));
    }
    let total: usize = views.iter().map(|v| v.len()).sum();
    if total == 0 {
        return Err(Error::InvalidArgument("empty token set".into()));
    }
    let cfg = &bm.config;
    let mut out = Vec::with_capacity(views.len());
    for view in views {
        let selected: Vec<usize> = view
            .positions
            .iter()
            .enumerate()
            .filter(|(_, key)| restrict.map_or(true, |set| set.contains(key)))
            .map(|(i, _)| i)
            .collect();
        if selected.is_empty() {
            // Fully masked view: only its summary token runs the blocks.
            let mut x = bm.summary;
            for b in &bm.blocks {
                x = run_block(g, x, b, cfg.heads);
            }
            let pooled = g.matmul(x, bm.head);
            let summary = g.l2_normalize_rows(pooled);
            out.push(ViewEncoding {
                summary,
                patches: None,
                keys: Vec::new(),
            });
            continue;
        }
        let keys: Vec<PatchKey> = selected.iter().map(|&i| view.positions[i]).collect();
        let mut pos_idx = Vec::with_capacity(keys.len());
        for key in &keys {
            pos_idx.push(cfg.pos_index(*key)?);
        }
        let n = selected.len();
        let mut input = Mat::zeros(n, cfg.input_dim());
        for (r, &i) in selected.iter().enumerate() {
            let src = view.tokens.row(i);
            let dst = input.row_mut(r);
            dst[..src.len()].copy_from_slice(src);
            dst[src.len()] = view.validity[i];
        }
        let input = g.constant(input);
        let projected = g.matmul(input, bm.patch_proj);
        let projected = g.add_row(projected, bm.patch_bias);
        let pos = g.gather_rows(bm.pos_table, &pos_idx);
        let tokens = g.add(projected, pos);
        let seq = g.concat_rows(&[bm.summary, tokens]);
        let mut x = seq;
        for b in &bm.blocks {
            x = run_block(g, x, b, cfg.heads);
        }
        let summary_raw = g.slice_rows(x, 0, 1);
        let pooled = g.matmul(summary_raw, bm.head);
        let summary = g.l2_normalize_rows(pooled);
        let patches = g.slice_rows(x, 1, n + 1);
        out.push(ViewEncoding {
            summary,
            patches: Some(patches),
            keys,
        });
    }
    Ok(out)
}

/// Predict embeddings for the masked patch keys from the concatenated
/// visible-patch embeddings of all views. Mask queries are the shared mask
/// token plus the predictor's positional embedding of the queried cell;
/// context tokens get the positional embedding of their own cell added.
/// Output rows follow `queries` order.
pub fn predict_masked<T: Scalar>(
    g: &mut Graph<T>,
    bm: &BoundModel,
    context: &[(NodeId, Vec<PatchKey>)],
    queries: &[PatchKey],
) -> Result<NodeId> {
    let cfg = &bm.config;
    let mut seen = BTreeSet::new();
    for q in queries {
        if !seen.insert(*q) {
            return Err(Error::InvalidArgument(format!(
                "duplicate mask query {q:?}"
            )));
        }
    }
    for (_, keys) in context {
        for k in keys {
            if seen.contains(k) {
                return Err(Error::InvalidArgument(format!(
                    "mask query {k:?} overlaps context"
                )));
            }
        }
    }
    if queries.is_empty() {
        return Ok(g.constant(Mat::zeros(0, cfg.dim)));
    }

    let mut parts = Vec::new();
    let mut n_ctx = 0usize;
    for (node, keys) in context {
        if keys.is_empty() {
            continue;
        }
        let mut idx = Vec::with_capacity(keys.len());
        for k in keys {
            idx.push(cfg.pos_index(*k)?);
        }
        let pos = g.gather_rows(bm.pred_pos_table, &idx);
        parts.push(g.add(*node, pos));
        n_ctx += keys.len();
    }
    let mut q_idx = Vec::with_capacity(queries.len());
    for k in queries {
        q_idx.push(cfg.pos_index(*k)?);
    }
    let q_pos = g.gather_rows(bm.pred_pos_table, &q_idx);
    let query_tokens = g.add_row(q_pos, bm.pred_mask_token);
    parts.push(query_tokens);

    let seq = g.concat_rows(&parts);
    let mut x = seq;
    for b in &bm.pred_blocks {
        x = run_block(g, x, b, cfg.heads);
    }
    Ok(g.slice_rows(x, n_ctx, n_ctx + queries.len()))
}

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"POMC";
pub const CHECKPOINT_VERSION: u32 = 1;

/// On-disk training state: the adapted context model, the optional EMA
/// target model, and optimizer tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub context: ModelWeights<f32>,
    pub target: Option<ModelWeights<f32>>,
    /// Flat named optimizer tensors ("opt.step", "opt.m.<param>",
    /// "opt.v.<param>").
    pub opt: Vec<(String, Mat<f32>)>,
}

struct TensorEntry {
    name: String,
    dims: Vec<u32>,
    data: Vec<f32>,
}

fn tensor_dims(name: &str, m: &Mat<f32>, cfg: &EncoderConfig) -> Vec<u32> {
    // Positional tables carry their factored shape so the architecture can
    // be reconstructed from the file alone.
    if name.ends_with("pos_table") {
        vec![
            cfg.view_max as u32,
            cfg.grid_h as u32,
            cfg.grid_w as u32,
            cfg.dim as u32,
        ]
    } else {
        vec![m.rows() as u32, m.cols() as u32]
    }
}

fn write_tensor<W: Write>(w: &mut W, name: &str, dims: &[u32], data: &[f32]) -> Result<()> {
    codec::write_str(w, name)?;
    codec::write_u32(w, dims.len() as u32)?;
    let mut n = 1usize;
    for &d in dims {
        codec::write_u32(w, d)?;
        n *= d as usize;
    }
    debug_assert_eq!(n, data.len());
    codec::write_f32s(w, data.iter().copied())?;
    Ok(())
}

fn read_tensor<R: Read>(r: &mut R) -> Result<TensorEntry> {
    let name = codec::read_str(r)?;
    let rank = codec::read_u32(r)? as usize;
    if rank == 0 || rank > 8 {
        return Err(Error::Corrupt(format!("implausible tensor rank {rank}")));
    }
    let mut dims = Vec::with_capacity(rank);
    let mut n = 1usize;
    for _ in 0..rank {
        let d = codec::read_u32(r)?;
        dims.push(d);
        n = n
            .checked_mul(d as usize)
            .ok_or_else(|| Error::Corrupt("tensor dims overflow".into()))?;
    }
    let data = codec::read_f32s(r, n, &name)?;
    Ok(TensorEntry { name, dims, data })
}

pub fn write_checkpoint<W: Write>(w: &mut W, ckpt: &Checkpoint) -> Result<()> {
    let cfg = &ckpt.context.config;
    codec::write_magic(w, &CHECKPOINT_MAGIC)?;
    codec::write_u32(w, CHECKPOINT_VERSION)?;
    codec::write_u32(w, cfg.dim as u32)?;
    codec::write_u32(w, cfg.blocks as u32)?;
    codec::write_u32(w, cfg.patch as u32)?;
    codec::write_u32(w, cfg.heads as u32)?;
    codec::write_u32(w, cfg.lora_rank as u32)?;
    codec::write_f32(w, cfg.lora_alpha as f32)?;

    let ctx_params = ckpt.context.named_params();
    let tgt_params: Vec<(String, &Mat<f32>)> = ckpt
        .target
        .as_ref()
        .map(|t| t.named_params())
        .unwrap_or_default();
    let count = ctx_params.len() + tgt_params.len() + ckpt.opt.len();
    codec::write_u32(w, count as u32)?;
    for (name, m) in &ctx_params {
        write_tensor(w, &format!("ctx.{name}"), &tensor_dims(name, m, cfg), m.as_slice())?;
    }
    for (name, m) in &tgt_params {
        write_tensor(w, &format!("tgt.{name}"), &tensor_dims(name, m, cfg), m.as_slice())?;
    }
    for (name, m) in &ckpt.opt {
        let dims = vec![m.rows() as u32, m.cols() as u32];
        write_tensor(w, &format!("opt.{name}"), &dims, m.as_slice())?;
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<Checkpoint> {
    codec::expect_magic(r, &CHECKPOINT_MAGIC)?;
    codec::expect_version(r, CHECKPOINT_VERSION)?;
    let dim = codec::read_u32(r)? as usize;
    let blocks = codec::read_u32(r)? as usize;
    let patch = codec::read_u32(r)? as usize;
    let heads = codec::read_u32(r)? as usize;
    let lora_rank = codec::read_u32(r)? as usize;
    let alpha_bytes = codec::read_f32s(r, 1, "alpha")?;
    let lora_alpha = alpha_bytes[0] as f64;
    let count = codec::read_u32(r)? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        tensors.push(read_tensor(r)?);
    }
    codec::expect_eof(r)?;

    let pos = tensors
        .iter()
        .find(|t| t.name == "ctx.pos_table")
        .ok_or_else(|| Error::Corrupt("checkpoint missing ctx.pos_table".into()))?;
    if pos.dims.len() != 4 {
        return Err(Error::Corrupt("pos_table must be rank 4".into()));
    }
    let predictor_blocks = tensors
        .iter()
        .filter(|t| t.name.starts_with("ctx.pred.blocks.") && t.name.ends_with(".attn.q"))
        .count();
    let config = EncoderConfig {
        dim,
        blocks,
        heads,
        patch,
        view_max: pos.dims[0] as usize,
        grid_h: pos.dims[1] as usize,
        grid_w: pos.dims[2] as usize,
        lora_rank,
        lora_alpha,
        predictor_blocks,
    };
    config.validate().map_err(|e| Error::Corrupt(e.to_string()))?;

    let has_adapters = tensors.iter().any(|t| t.name.starts_with("ctx.adapters."));
    let context = weights_from_tensors(config, &tensors, "ctx.", has_adapters)?;
    let target = if tensors.iter().any(|t| t.name.starts_with("tgt.")) {
        Some(weights_from_tensors(config, &tensors, "tgt.", false)?)
    } else {
        None
    };
    let opt = tensors
        .iter()
        .filter(|t| t.name.starts_with("opt."))
        .map(|t| {
            let (rows, cols) = match t.dims.as_slice() {
                [r, c] => (*r as usize, *c as usize),
                _ => (1, t.data.len()),
            };
            (
                t.name["opt.".len()..].to_string(),
                Mat::from_vec(rows, cols, t.data.clone()),
            )
        })
        .collect();
    Ok(Checkpoint {
        context,
        target,
        opt,
    })
}

fn weights_from_tensors(
    config: EncoderConfig,
    tensors: &[TensorEntry],
    prefix: &str,
    with_adapters: bool,
) -> Result<ModelWeights<f32>> {
    let mut w = ModelWeights::<f32>::init(config, 0)?;
    if !with_adapters {
        w.adapters = None;
    }
    for (name, mat) in w.named_params_mut() {
        let full = format!("{prefix}{name}");
        let entry = tensors
            .iter()
            .find(|t| t.name == full)
            .ok_or_else(|| Error::Corrupt(format!("checkpoint missing tensor {full}")))?;
        if entry.data.len() != mat.len() {
            return Err(Error::Corrupt(format!(
                "tensor {full} has {} values, expected {}",
                entry.data.len(),
                mat.len()
            )));
        }
        *mat = Mat::from_vec(mat.rows(), mat.cols(), entry.data.clone());
    }
    Ok(w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::INVALID_POINT;
    use crate::masking::{build_partition, MaskSpec};

    fn small_config() -> EncoderConfig {
        EncoderConfig {
            dim: 16,
            blocks: 1,
            heads: 2,
            patch: 2,
            view_max: 2,
            grid_h: 2,
            grid_w: 2,
            lora_rank: 4,
            lora_alpha: 8.0,
            predictor_blocks: 2,
        }
    }

    fn grid_pointmap(h: usize, w: usize) -> PointMap {
        let points = (0..h * w)
            .map(|i| {
                let r = (i / w) as f64;
                let c = (i % w) as f64;
                [c * 0.1, r * 0.1, (r + c) * 0.05]
            })
            .collect();
        PointMap::new(h, w, points).unwrap()
    }

    fn tokens_for(cfg: &EncoderConfig, view: usize) -> TokenSequence<f64> {
        patchify::<f64>(&grid_pointmap(cfg.grid_h * cfg.patch, cfg.grid_w * cfg.patch), cfg.patch)
            .unwrap()
            .with_view(view)
    }

    #[test]
    fn patchify_shapes() {
        let pm = grid_pointmap(64, 64);
        let ts = patchify::<f32>(&pm, 16).unwrap();
        assert_eq!(ts.len(), 16);
        assert_eq!(ts.tokens.cols(), 768);

        let pm = grid_pointmap(32, 64);
        let ts = patchify::<f32>(&pm, 16).unwrap();
        assert_eq!(ts.len(), 8);

        let pm = grid_pointmap(30, 32);
        assert!(matches!(
            patchify::<f32>(&pm, 16),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn patchify_records_validity_and_zero_fills() {
        let mut points = grid_pointmap(4, 4).points().to_vec();
        points[0] = INVALID_POINT; // patch (0,0) loses 1 of 4 pixels
        let pm = PointMap::new(4, 4, points).unwrap();
        let ts = patchify::<f64>(&pm, 2).unwrap();
        assert_eq!(ts.validity[0], 0.75);
        assert_eq!(ts.validity[1], 1.0);
        assert_eq!(ts.tokens.get(0, 0), 0.0);
        assert_eq!(ts.tokens.get(0, 1), 0.0);
        assert_eq!(ts.tokens.get(0, 2), 0.0);
    }

    #[test]
    fn encode_shapes_and_unit_summary() {
        let cfg = small_config();
        let w = ModelWeights::<f64>::init(cfg, 7).unwrap();
        let mut g = Graph::new();
        let bm = bind_model(&mut g, &w, BindMode::Frozen).unwrap();
        let views = vec![tokens_for(&cfg, 0), tokens_for(&cfg, 1)];
        let encs = encode_views(&mut g, &bm, &views, None).unwrap();
        assert_eq!(encs.len(), 2);
        for enc in &encs {
            let s = g.value(enc.summary);
            assert_eq!(s.shape(), (1, cfg.dim));
            let norm: f64 = s.as_slice().iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-6);
            let p = g.value(enc.patches.unwrap());
            assert_eq!(p.shape(), (4, cfg.dim));
        }
    }

    #[test]
    fn restrict_drops_tokens() {
        let cfg = small_config();
        let w = ModelWeights::<f64>::init(cfg, 7).unwrap();
        let mut g = Graph::new();
        let bm = bind_model(&mut g, &w, BindMode::Frozen).unwrap();
        let views = vec![tokens_for(&cfg, 0)];
        let visible: BTreeSet<PatchKey> = [
            PatchKey { view: 0, row: 0, col: 0 },
            PatchKey { view: 0, row: 1, col: 1 },
            PatchKey { view: 0, row: 0, col: 1 },
        ]
        .into_iter()
        .collect();
        let encs = encode_views(&mut g, &bm, &views, Some(&visible)).unwrap();
        let p = g.value(encs[0].patches.unwrap());
        assert_eq!(p.rows(), 3);
        assert_eq!(encs[0].keys.len(), 3);
    }

    fn tokens_f32(cfg: &EncoderConfig, view: usize) -> TokenSequence<f32> {
        patchify::<f32>(&grid_pointmap(cfg.grid_h * cfg.patch, cfg.grid_w * cfg.patch), cfg.patch)
            .unwrap()
            .with_view(view)
    }

    #[test]
    fn encode_is_deterministic() {
        let cfg = small_config();
        let w = ModelWeights::<f32>::init(cfg, 3).unwrap();
        let run = || {
            let mut g = Graph::new();
            let bm = bind_model(&mut g, &w, BindMode::Frozen).unwrap();
            let ts = tokens_f32(&cfg, 0);
            let encs = encode_views(&mut g, &bm, &[ts], None).unwrap();
            g.value(encs[0].summary).clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn zero_adapters_reproduce_base_outputs_exactly() {
        let cfg = small_config();
        let w = ModelWeights::<f32>::init(cfg, 11).unwrap();
        let mut base = w.clone();
        base.adapters = None;

        let ts = tokens_f32(&cfg, 0);

        let run = |weights: &ModelWeights<f32>| {
            let mut g = Graph::new();
            let bm = bind_model(&mut g, weights, BindMode::Frozen).unwrap();
            let encs = encode_views(&mut g, &bm, std::slice::from_ref(&ts), None).unwrap();
            (
                g.value(encs[0].summary).clone(),
                g.value(encs[0].patches.unwrap()).clone(),
            )
        };
        let (s_adapted, p_adapted) = run(&w);
        let (s_base, p_base) = run(&base);
        assert_eq!(s_adapted, s_base);
        assert_eq!(p_adapted, p_base);
    }

    #[test]
    fn adapter_scaling_and_dense_oracle() {
        let ad = AdapterSet::<f64> {
            rank: 32,
            alpha: 64.0,
            blocks: vec![],
        };
        assert_eq!(ad.scaling(), 2.0);

        // Random rank-2 adapter on a 4x4 matrix matches the explicit dense
        // product W + (alpha/r) * (B*A)^T.
        let mut rng = rng_for(21, 0);
        let w = Mat::<f64>::from_fn(4, 4, |_, _| next_gaussian(&mut rng));
        let a = Mat::<f64>::from_fn(2, 4, |_, _| next_gaussian(&mut rng));
        let b = Mat::<f64>::from_fn(4, 2, |_, _| next_gaussian(&mut rng));
        let pair = AdapterPair { a: a.clone(), b: b.clone() };
        let scale = 6.0 / 2.0;
        let got = apply_delta(&w, &pair, scale).unwrap();
        let mut want = w.clone();
        for i in 0..4 {
            for j in 0..4 {
                let mut acc = 0.0;
                for r in 0..2 {
                    acc += b.get(j, r) * a.get(r, i);
                }
                want.set(i, j, want.get(i, j) + scale * acc);
            }
        }
        for (x, y) in got.as_slice().iter().zip(want.as_slice()) {
            assert!((x - y).abs() < 1e-7);
        }
    }

    #[test]
    fn effective_weights_rejects_mismatched_shapes() {
        let cfg = small_config();
        let w = ModelWeights::<f64>::init(cfg, 5).unwrap();
        let mut bad = w.adapters.clone().unwrap();
        bad.blocks[0].q.a = Mat::zeros(4, 7);
        assert!(matches!(
            effective_weights(&w, &bad),
            Err(Error::Adapter(_))
        ));
    }

    #[test]
    fn ema_update_rules() {
        let cfg = small_config();
        let mut target = ModelWeights::<f64>::init(cfg, 1).unwrap();
        target.adapters = None;
        let mut context = ModelWeights::<f64>::init(cfg, 2).unwrap();
        context.adapters = None;

        let before = target.clone();
        ema_update(&mut target, &context, 1.0).unwrap();
        assert_eq!(target, before);

        ema_update(&mut target, &context, 0.0).unwrap();
        assert_eq!(target, context);

        let mut t = before.clone();
        ema_update(&mut t, &context, 0.9).unwrap();
        let expect = 0.9 * before.summary.get(0, 0) + 0.1 * context.summary.get(0, 0);
        assert!((t.summary.get(0, 0) - expect).abs() < 1e-12);

        // Fixed point: context == target leaves everything unchanged.
        let mut fixed = context.clone();
        ema_update(&mut fixed, &context, 0.996).unwrap();
        for ((_, a), (_, b)) in fixed.named_params().iter().zip(context.named_params()) {
            for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn predictor_shapes_and_empty_queries() {
        let cfg = small_config();
        let w = ModelWeights::<f64>::init(cfg, 9).unwrap();
        let mut g = Graph::new();
        let bm = bind_model(&mut g, &w, BindMode::Frozen).unwrap();
        let views = vec![tokens_for(&cfg, 0), tokens_for(&cfg, 1)];
        let masks = vec![
            MaskSpec { view: 0, top: 0, left: 0, height: 1, width: 2 },
            MaskSpec { view: 1, top: 1, left: 0, height: 1, width: 1 },
        ];
        let part = build_partition(&[(2, 2), (2, 2)], &masks).unwrap();
        let visible: BTreeSet<PatchKey> = part.visible.iter().copied().collect();
        let encs = encode_views(&mut g, &bm, &views, Some(&visible)).unwrap();
        let context: Vec<(NodeId, Vec<PatchKey>)> = encs
            .iter()
            .filter_map(|e| e.patches.map(|p| (p, e.keys.clone())))
            .collect();
        let pred = predict_masked(&mut g, &bm, &context, &part.masked).unwrap();
        assert_eq!(g.value(pred).shape(), (3, cfg.dim));

        let empty = predict_masked(&mut g, &bm, &context, &[]).unwrap();
        assert_eq!(g.value(empty).shape(), (0, cfg.dim));
    }

    #[test]
    fn predictor_rejects_duplicate_and_overlapping_queries() {
        let cfg = small_config();
        let w = ModelWeights::<f64>::init(cfg, 9).unwrap();
        let mut g = Graph::new();
        let bm = bind_model(&mut g, &w, BindMode::Frozen).unwrap();
        let k = PatchKey { view: 0, row: 0, col: 0 };
        assert!(predict_masked(&mut g, &bm, &[], &[k, k]).is_err());

        let views = vec![tokens_for(&cfg, 0)];
        let encs = encode_views(&mut g, &bm, &views, None).unwrap();
        let ctx: Vec<(NodeId, Vec<PatchKey>)> = encs
            .iter()
            .filter_map(|e| e.patches.map(|p| (p, e.keys.clone())))
            .collect();
        assert!(predict_masked(&mut g, &bm, &ctx, &[k]).is_err());
    }

    #[test]
    fn predictor_invariant_to_context_order() {
        let cfg = small_config();
        let w = ModelWeights::<f64>::init(cfg, 13).unwrap();
        let mut g = Graph::new();
        let bm = bind_model(&mut g, &w, BindMode::Frozen).unwrap();
        let views = vec![tokens_for(&cfg, 0), tokens_for(&cfg, 1)];
        let masks = vec![
            MaskSpec { view: 0, top: 0, left: 0, height: 1, width: 1 },
            MaskSpec { view: 1, top: 1, left: 1, height: 1, width: 1 },
        ];
        let part = build_partition(&[(2, 2), (2, 2)], &masks).unwrap();
        let visible: BTreeSet<PatchKey> = part.visible.iter().copied().collect();
        let encs = encode_views(&mut g, &bm, &views, Some(&visible)).unwrap();
        let ctx: Vec<(NodeId, Vec<PatchKey>)> = encs
            .iter()
            .filter_map(|e| e.patches.map(|p| (p, e.keys.clone())))
            .collect();
        let straight = predict_masked(&mut g, &bm, &ctx, &part.masked).unwrap();

        // Same context tokens presented in reversed view order and with the
        // rows of each view permuted (positions kept attached).
        let mut reversed: Vec<(NodeId, Vec<PatchKey>)> = Vec::new();
        for (node, keys) in ctx.iter().rev() {
            let n = keys.len();
            let perm: Vec<usize> = (0..n).rev().collect();
            let permuted = g.gather_rows(*node, &perm);
            let pkeys: Vec<PatchKey> = perm.iter().map(|&i| keys[i]).collect();
            reversed.push((permuted, pkeys));
        }
        let shuffled = predict_masked(&mut g, &bm, &reversed, &part.masked).unwrap();
        let a = g.value(straight);
        let b = g.value(shuffled);
        for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
            assert!((x - y).abs() < 1e-6, "{x} vs {y}");
        }
    }

    #[test]
    fn checkpoint_round_trip_and_errors() {
        let cfg = small_config();
        let mut context = ModelWeights::<f32>::init(cfg, 17).unwrap();
        // Perturb a parameter so the file is not all-init.
        context.head.set(0, 0, 0.5);
        let target = {
            let eff = effective_weights(&context, context.adapters.as_ref().unwrap()).unwrap();
            Some(eff)
        };
        let ckpt = Checkpoint {
            context,
            target,
            opt: vec![
                ("step".into(), Mat::scalar(3.0f32)),
                ("m.head".into(), Mat::zeros(16, 16)),
            ],
        };
        let mut bytes = Vec::new();
        write_checkpoint(&mut bytes, &ckpt).unwrap();
        let decoded = read_checkpoint(&mut bytes.as_slice()).unwrap();
        assert_eq!(decoded, ckpt);
        let mut bytes2 = Vec::new();
        write_checkpoint(&mut bytes2, &decoded).unwrap();
        assert_eq!(bytes, bytes2);

        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'Q';
        assert!(matches!(
            read_checkpoint(&mut bad_magic.as_slice()),
            Err(Error::BadMagic { .. })
        ));

        let truncated = &bytes[..bytes.len() - 7];
        assert!(matches!(
            read_checkpoint(&mut &truncated[..]),
            Err(Error::Corrupt(_))
        ));

        let mut bad_version = bytes.clone();
        bad_version[4] = 42;
        assert!(matches!(
            read_checkpoint(&mut bad_version.as_slice()),
            Err(Error::VersionMismatch { .. })
        ));
    }
}
