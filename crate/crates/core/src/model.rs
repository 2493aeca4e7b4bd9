//! The forecaster: input embedding, location fusion, stacked structured
//! attention blocks over the partition hierarchy, and a linear forecast
//! head trained on mean absolute error.
//!
//! Each block runs scaled dot-product attention inside every part (biased
//! by hop distance), mean-pools parts into summaries, runs attention
//! between the summaries (biased by part-level hop distance), and fuses
//! the two streams back through a `2D x D` linear map with a residual.

use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::ForecastBatch;
use crate::error::{Error, Result};
use crate::harmonics::HarmonicBasis;
use crate::optim::Parameter;
use crate::partition::PartitionHierarchy;
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

/// Switches that disable one mechanism at a time for comparison runs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationFlags {
    /// Random balanced partition instead of the multilevel partitioner.
    pub no_partitioner: bool,
    /// Zero out the spherical-harmonic location features.
    pub no_sh: bool,
    /// Identity attention on the value path inside parts.
    pub no_intra: bool,
    /// Zeros instead of the global summary stream.
    pub no_inter: bool,
    /// Drop the hop-distance bias from both attentions.
    pub no_spatial_bias: bool,
}

/// Model shapes and switches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n: usize,
    pub c: usize,
    pub t_in: usize,
    pub f_out: usize,
    pub dim: usize,
    pub levels: usize,
    pub l_max: usize,
    pub heads: usize,
    /// Hop distances at or above this share one bias scalar.
    pub d_max: usize,
    /// Optional pre-pool RMS normalization (off in the reference setup).
    pub rms_norm: bool,
    pub ablation: AblationFlags,
}

impl ModelConfig {
    pub fn sh_features(&self) -> usize {
        (self.l_max + 1) * (self.l_max + 1)
    }

    pub fn bias_table_len(&self) -> usize {
        self.d_max + 2
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.c == 0 || self.t_in == 0 || self.f_out == 0 {
            return Err(Error::invalid("n, c, t_in and f_out must be positive"));
        }
        if self.levels == 0 {
            return Err(Error::invalid("need at least one block level"));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::invalid(format!(
                "dim {} must be divisible by heads {}",
                self.dim, self.heads
            )));
        }
        if self.dim <= self.sh_features() {
            return Err(Error::invalid(format!(
                "dim {} must exceed the {} location features",
                self.dim,
                self.sh_features()
            )));
        }
        Ok(())
    }
}

/// Per-block learnable tensors. The hop-bias tables are *not* here: one
/// intra table and one inter table are shared across all blocks.
#[derive(Debug, Clone)]
pub struct SsaBlockParams {
    pub intra_wq: Parameter,
    pub intra_wk: Parameter,
    pub intra_wv: Parameter,
    pub intra_w1: Parameter,
    pub intra_w2: Parameter,
    pub inter_wq: Parameter,
    pub inter_wk: Parameter,
    pub inter_wv: Parameter,
    pub inter_w1: Parameter,
    pub inter_w2: Parameter,
    pub fusion_w: Parameter,
}

const PARAMS_BEFORE_BLOCKS: usize = 5;
const PARAMS_PER_BLOCK: usize = 11;

/// All learnable state of the forecaster.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub embed_w: Parameter,
    pub embed_b: Parameter,
    pub fuse_w: Parameter,
    pub fuse_b: Parameter,
    pub sh_w: Parameter,
    pub blocks: Vec<SsaBlockParams>,
    pub intra_bias: Parameter,
    pub inter_bias: Parameter,
    pub head_w: Parameter,
    pub head_b: Parameter,
}

fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let bound = (6.0 / (rows + cols) as f64).sqrt() as Real;
    Tensor::from_fn(vec![rows, cols], |_| rng.gen_range(-bound..bound))
}

impl ModelParams {
    /// Seeded initialization: Xavier-uniform weights, zero biases, unit
    /// location weights, zero bias tables. All parameters are always
    /// allocated, whatever the ablation flags, so initialization draws
    /// stay aligned across comparison runs.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        use rand::SeedableRng;
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.dim;
        let hidden = 2 * d;
        let sh = config.sh_features();
        let embed_w = Parameter::new(xavier(&mut rng, config.t_in * config.c, d));
        let embed_b = Parameter::new(Tensor::zeros(vec![d]));
        let fuse_w = Parameter::new(xavier(&mut rng, d + sh, d));
        let fuse_b = Parameter::new(Tensor::zeros(vec![d]));
        let sh_w = Parameter::new(Tensor::full(vec![sh], 1.0));
        let mut blocks = Vec::with_capacity(config.levels);
        for _ in 0..config.levels {
            blocks.push(SsaBlockParams {
                intra_wq: Parameter::new(xavier(&mut rng, d, d)),
                intra_wk: Parameter::new(xavier(&mut rng, d, d)),
                intra_wv: Parameter::new(xavier(&mut rng, d, d)),
                intra_w1: Parameter::new(xavier(&mut rng, d, hidden)),
                intra_w2: Parameter::new(xavier(&mut rng, hidden, d)),
                inter_wq: Parameter::new(xavier(&mut rng, d, d)),
                inter_wk: Parameter::new(xavier(&mut rng, d, d)),
                inter_wv: Parameter::new(xavier(&mut rng, d, d)),
                inter_w1: Parameter::new(xavier(&mut rng, d, hidden)),
                inter_w2: Parameter::new(xavier(&mut rng, hidden, d)),
                fusion_w: Parameter::new(xavier(&mut rng, 2 * d, d)),
            });
        }
        let intra_bias = Parameter::new(Tensor::zeros(vec![config.bias_table_len()]));
        let inter_bias = Parameter::new(Tensor::zeros(vec![config.bias_table_len()]));
        let head_w = Parameter::new(xavier(&mut rng, d, config.f_out * config.c));
        let head_b = Parameter::new(Tensor::zeros(vec![config.f_out * config.c]));
        Ok(ModelParams {
            config,
            embed_w,
            embed_b,
            fuse_w,
            fuse_b,
            sh_w,
            blocks,
            intra_bias,
            inter_bias,
            head_w,
            head_b,
        })
    }

    /// Canonical (name, shape) listing; checkpoints serialize in this order.
    pub fn param_specs(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        let d = config.dim;
        let hidden = 2 * d;
        let sh = config.sh_features();
        let mut specs = vec![
            ("embed_w".to_string(), vec![config.t_in * config.c, d]),
            ("embed_b".to_string(), vec![d]),
            ("fuse_w".to_string(), vec![d + sh, d]),
            ("fuse_b".to_string(), vec![d]),
            ("sh_w".to_string(), vec![sh]),
        ];
        for l in 0..config.levels {
            for (name, shape) in [
                ("intra_wq", vec![d, d]),
                ("intra_wk", vec![d, d]),
                ("intra_wv", vec![d, d]),
                ("intra_w1", vec![d, hidden]),
                ("intra_w2", vec![hidden, d]),
                ("inter_wq", vec![d, d]),
                ("inter_wk", vec![d, d]),
                ("inter_wv", vec![d, d]),
                ("inter_w1", vec![d, hidden]),
                ("inter_w2", vec![hidden, d]),
                ("fusion_w", vec![2 * d, d]),
            ] {
                specs.push((format!("block{}.{}", l, name), shape));
            }
        }
        specs.push(("intra_bias".to_string(), vec![config.bias_table_len()]));
        specs.push(("inter_bias".to_string(), vec![config.bias_table_len()]));
        specs.push(("head_w".to_string(), vec![d, config.f_out * config.c]));
        specs.push(("head_b".to_string(), vec![config.f_out * config.c]));
        specs
    }

    pub fn params(&self) -> Vec<&Parameter> {
        let mut v: Vec<&Parameter> =
            vec![&self.embed_w, &self.embed_b, &self.fuse_w, &self.fuse_b, &self.sh_w];
        for b in &self.blocks {
            v.extend([
                &b.intra_wq, &b.intra_wk, &b.intra_wv, &b.intra_w1, &b.intra_w2,
                &b.inter_wq, &b.inter_wk, &b.inter_wv, &b.inter_w1, &b.inter_w2,
                &b.fusion_w,
            ]);
        }
        v.extend([&self.intra_bias, &self.inter_bias, &self.head_w, &self.head_b]);
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut v: Vec<&mut Parameter> = vec![
            &mut self.embed_w,
            &mut self.embed_b,
            &mut self.fuse_w,
            &mut self.fuse_b,
            &mut self.sh_w,
        ];
        for b in &mut self.blocks {
            v.extend([
                &mut b.intra_wq, &mut b.intra_wk, &mut b.intra_wv, &mut b.intra_w1, &mut b.intra_w2,
                &mut b.inter_wq, &mut b.inter_wk, &mut b.inter_wv, &mut b.inter_w1, &mut b.inter_w2,
                &mut b.fusion_w,
            ]);
        }
        v.extend([&mut self.intra_bias, &mut self.inter_bias, &mut self.head_w, &mut self.head_b]);
        v
    }

    pub fn zero_grads(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    pub fn total_param_count(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }

    /// Parameters that can actually receive gradients under the configured
    /// ablation. Dropping the spatial bias freezes exactly the two tables.
    pub fn trainable_param_count(&self) -> usize {
        let mut count = self.total_param_count();
        if self.config.ablation.no_spatial_bias {
            count -= self.intra_bias.numel() + self.inter_bias.numel();
        }
        count
    }

    /// Rebuild from checkpoint tensors, verifying names and shapes.
    pub fn from_tensors(config: ModelConfig, tensors: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let specs = Self::param_specs(&config);
        if specs.len() != tensors.len() {
            return Err(Error::data(format!(
                "checkpoint has {} tensors, model wants {}",
                tensors.len(),
                specs.len()
            )));
        }
        for ((name, shape), (got_name, got)) in specs.iter().zip(&tensors) {
            if name != got_name || shape.as_slice() != got.shape() {
                return Err(Error::data(format!(
                    "checkpoint tensor `{}` {:?} does not match `{}` {:?}",
                    got_name,
                    got.shape(),
                    name,
                    shape
                )));
            }
        }
        let mut it = tensors.into_iter().map(|(_, t)| Parameter::new(t));
        let mut next = || it.next().expect("length checked");
        let embed_w = next();
        let embed_b = next();
        let fuse_w = next();
        let fuse_b = next();
        let sh_w = next();
        let mut blocks = Vec::with_capacity(config.levels);
        for _ in 0..config.levels {
            blocks.push(SsaBlockParams {
                intra_wq: next(),
                intra_wk: next(),
                intra_wv: next(),
                intra_w1: next(),
                intra_w2: next(),
                inter_wq: next(),
                inter_wk: next(),
                inter_wv: next(),
                inter_w1: next(),
                inter_w2: next(),
                fusion_w: next(),
            });
        }
        let intra_bias = next();
        let inter_bias = next();
        let head_w = next();
        let head_b = next();
        Ok(ModelParams {
            config,
            embed_w,
            embed_b,
            fuse_w,
            fuse_b,
            sh_w,
            blocks,
            intra_bias,
            inter_bias,
            head_w,
            head_b,
        })
    }
}

fn bias_index(spd: i32, d_max: usize) -> usize {
    if spd < 0 {
        0
    } else {
        (spd as usize).min(d_max) + 1
    }
}

/// Precomputed per-level wiring: slot maps, masks, and bias-table indices
/// replicated per attention head.
#[derive(Debug, Clone)]
pub struct LevelPlan {
    pub p: usize,
    pub m: usize,
    slots: Rc<Vec<Option<usize>>>,
    positions: Rc<Vec<usize>>,
    pad_rows: Rc<Vec<bool>>,
    intra_bias_idx: Rc<Vec<usize>>,
    inter_bias_idx: Rc<Vec<usize>>,
    valid_heads: Rc<Vec<bool>>,
    all_valid_inter: Rc<Vec<bool>>,
}

impl LevelPlan {
    fn new(level: &crate::partition::HierarchyLevel, heads: usize, d_max: usize) -> Self {
        let layout = &level.layout;
        let (p, m) = (layout.p, layout.m);
        let mut intra_idx = Vec::with_capacity(p * heads * m * m);
        for table in level.intra_spd.iter() {
            let k = table.size();
            for _h in 0..heads {
                for i in 0..m {
                    for j in 0..m {
                        let idx = if i < k && j < k { bias_index(table.get(i, j), d_max) } else { 0 };
                        intra_idx.push(idx);
                    }
                }
            }
        }
        let mut inter_idx = Vec::with_capacity(heads * p * p);
        for _h in 0..heads {
            for i in 0..p {
                for j in 0..p {
                    inter_idx.push(bias_index(level.coarse.get(i, j), d_max));
                }
            }
        }
        let mut valid_heads = Vec::with_capacity(p * heads * m);
        for pi in 0..p {
            for _h in 0..heads {
                valid_heads.extend_from_slice(&layout.pad_mask[pi * m..(pi + 1) * m]);
            }
        }
        LevelPlan {
            p,
            m,
            slots: Rc::new(layout.slots.clone()),
            positions: Rc::new(layout.positions.clone()),
            pad_rows: Rc::new(layout.pad_mask.clone()),
            intra_bias_idx: Rc::new(intra_idx),
            inter_bias_idx: Rc::new(inter_idx),
            valid_heads: Rc::new(valid_heads),
            all_valid_inter: Rc::new(vec![true; heads * p]),
        }
    }

    pub fn pad_rows(&self) -> &[bool] {
        &self.pad_rows
    }
}

/// Wiring for the whole stack, derived once from the hierarchy.
#[derive(Debug, Clone)]
pub struct ModelPlan {
    pub levels: Vec<LevelPlan>,
}

impl ModelPlan {
    pub fn new(config: &ModelConfig, hierarchy: &PartitionHierarchy) -> Result<Self> {
        if hierarchy.depth() != config.levels {
            return Err(Error::invalid(format!(
                "hierarchy has {} levels, model wants {}",
                hierarchy.depth(),
                config.levels
            )));
        }
        if hierarchy.levels[0].layout.n() != config.n {
            return Err(Error::invalid(format!(
                "hierarchy covers {} stations, model wants {}",
                hierarchy.levels[0].layout.n(),
                config.n
            )));
        }
        Ok(ModelPlan {
            levels: hierarchy
                .levels
                .iter()
                .map(|l| LevelPlan::new(l, config.heads, config.d_max))
                .collect(),
        })
    }
}

struct BlockVars {
    intra_wq: Var,
    intra_wk: Var,
    intra_wv: Var,
    intra_w1: Var,
    intra_w2: Var,
    inter_wq: Var,
    inter_wk: Var,
    inter_wv: Var,
    inter_w1: Var,
    inter_w2: Var,
    fusion_w: Var,
}

struct ParamVars {
    embed_w: Var,
    embed_b: Var,
    fuse_w: Var,
    fuse_b: Var,
    sh_w: Var,
    blocks: Vec<BlockVars>,
    intra_bias: Var,
    inter_bias: Var,
    head_w: Var,
    head_b: Var,
}

fn lease_params(tape: &mut Tape, params: &ModelParams) -> Result<ParamVars> {
    let list = params.params();
    let mut vars = Vec::with_capacity(list.len());
    for (key, p) in list.iter().enumerate() {
        vars.push(tape.param(key, p.value.clone())?);
    }
    let blocks = (0..params.config.levels)
        .map(|l| {
            let b = PARAMS_BEFORE_BLOCKS + l * PARAMS_PER_BLOCK;
            BlockVars {
                intra_wq: vars[b],
                intra_wk: vars[b + 1],
                intra_wv: vars[b + 2],
                intra_w1: vars[b + 3],
                intra_w2: vars[b + 4],
                inter_wq: vars[b + 5],
                inter_wk: vars[b + 6],
                inter_wv: vars[b + 7],
                inter_w1: vars[b + 8],
                inter_w2: vars[b + 9],
                fusion_w: vars[b + 10],
            }
        })
        .collect();
    let tail = PARAMS_BEFORE_BLOCKS + params.config.levels * PARAMS_PER_BLOCK;
    Ok(ParamVars {
        embed_w: vars[0],
        embed_b: vars[1],
        fuse_w: vars[2],
        fuse_b: vars[3],
        sh_w: vars[4],
        blocks,
        intra_bias: vars[tail],
        inter_bias: vars[tail + 1],
        head_w: vars[tail + 2],
        head_b: vars[tail + 3],
    })
}

/// Everything the forward pass exposes: the prediction, the optional loss,
/// and the post-softmax attention tensors per level (absent for ablated
/// attention paths).
pub struct ForwardPass {
    pub pred: Var,
    pub loss: Option<Var>,
    pub intra_attn: Vec<Option<Var>>,
    pub inter_attn: Vec<Option<Var>>,
}

/// One structured-attention block over a laid-out level.
fn ssa_block(
    tape: &mut Tape,
    x: Var,
    lp: &LevelPlan,
    bv: &BlockVars,
    intra_bias: Var,
    inter_bias: Var,
    cfg: &ModelConfig,
) -> Result<(Var, Option<Var>, Option<Var>)> {
    let heads = cfg.heads;
    let dh = cfg.dim / heads;
    let scale = 1.0 / (dh as Real).sqrt();
    let ab = cfg.ablation;

    // Local stream.
    let (y, intra_attn) = if ab.no_intra {
        let v = tape.linear(x, bv.intra_wv, None)?;
        (tape.ffn(v, bv.intra_w1, bv.intra_w2)?, None)
    } else {
        let q = tape.linear(x, bv.intra_wq, None)?;
        let k = tape.linear(x, bv.intra_wk, None)?;
        let v = tape.linear(x, bv.intra_wv, None)?;
        let qh = tape.split_heads(q, heads)?;
        let kh = tape.split_heads(k, heads)?;
        let vh = tape.split_heads(v, heads)?;
        let mut scores = tape.bmm_nt(qh, kh, scale)?;
        let entries = tape.value(scores).numel() as u64;
        tape.add_score_entries(entries);
        if !ab.no_spatial_bias {
            let bias = tape.gather(
                intra_bias,
                lp.intra_bias_idx.clone(),
                vec![lp.p * heads, lp.m, lp.m],
            )?;
            scores = tape.add(scores, bias)?;
        }
        let attn = tape.masked_softmax(scores, lp.valid_heads.clone(), lp.valid_heads.clone())?;
        let ctx = tape.bmm(attn, vh)?;
        let merged = tape.merge_heads(ctx, heads)?;
        (tape.ffn(merged, bv.intra_w1, bv.intra_w2)?, Some(attn))
    };

    // Part summaries.
    let pool_src = if cfg.rms_norm { tape.rms_norm(y, 1e-8)? } else { y };
    let pooled = tape.masked_mean(pool_src, lp.pad_rows.clone())?;

    // Global stream.
    let (summary, inter_attn) = if ab.no_inter {
        (tape.leaf(Tensor::zeros(vec![lp.p, cfg.dim]))?, None)
    } else {
        let s3 = tape.reshape(pooled, vec![1, lp.p, cfg.dim])?;
        let q = tape.linear(s3, bv.inter_wq, None)?;
        let k = tape.linear(s3, bv.inter_wk, None)?;
        let v = tape.linear(s3, bv.inter_wv, None)?;
        let qh = tape.split_heads(q, heads)?;
        let kh = tape.split_heads(k, heads)?;
        let vh = tape.split_heads(v, heads)?;
        let mut scores = tape.bmm_nt(qh, kh, scale)?;
        let entries = tape.value(scores).numel() as u64;
        tape.add_score_entries(entries);
        if !ab.no_spatial_bias {
            let bias = tape.gather(inter_bias, lp.inter_bias_idx.clone(), vec![heads, lp.p, lp.p])?;
            scores = tape.add(scores, bias)?;
        }
        let attn =
            tape.masked_softmax(scores, lp.all_valid_inter.clone(), lp.all_valid_inter.clone())?;
        let ctx = tape.bmm(attn, vh)?;
        let merged = tape.merge_heads(ctx, heads)?;
        let s = tape.ffn(merged, bv.inter_w1, bv.inter_w2)?;
        (tape.reshape(s, vec![lp.p, cfg.dim])?, Some(attn))
    };

    // Fuse [Y || expand(S')] through the 2D x D map, add the residual,
    // then re-mask so padded slots stay exactly zero.
    let expanded = tape.broadcast_expand(summary, lp.m)?;
    let cat = tape.concat_last(y, expanded)?;
    let fused = tape.linear(cat, bv.fusion_w, None)?;
    let res = tape.add(fused, x)?;
    let out = tape.row_mask(res, lp.pad_rows.clone())?;
    Ok((out, intra_attn, inter_attn))
}

/// Full forward pass on an existing tape. `input` is `[N, T, C]`; when
/// `target` is given the mean-absolute-error loss node is built too.
pub fn forward(
    tape: &mut Tape,
    params: &ModelParams,
    plan: &ModelPlan,
    basis: &HarmonicBasis,
    input: &Tensor,
    target: Option<&Tensor>,
) -> Result<ForwardPass> {
    let cfg = &params.config;
    if input.shape() != [cfg.n, cfg.t_in, cfg.c] {
        return Err(Error::shape(
            "forward",
            format!("input {:?}, want [{}, {}, {}]", input.shape(), cfg.n, cfg.t_in, cfg.c),
        ));
    }
    if basis.n_stations() != cfg.n || basis.n_columns() != cfg.sh_features() {
        return Err(Error::shape(
            "forward",
            format!(
                "basis {}x{}, want {}x{}",
                basis.n_stations(),
                basis.n_columns(),
                cfg.n,
                cfg.sh_features()
            ),
        ));
    }
    if plan.levels.len() != cfg.levels {
        return Err(Error::invalid("plan depth disagrees with config"));
    }
    let pv = lease_params(tape, params)?;

    let flat = tape.leaf(input.reshaped(vec![cfg.n, cfg.t_in * cfg.c])?)?;
    let embedded = tape.linear(flat, pv.embed_w, Some(pv.embed_b))?;
    let sh = if cfg.ablation.no_sh {
        tape.leaf(Tensor::zeros(vec![cfg.n, cfg.sh_features()]))?
    } else {
        let b = tape.leaf(basis.values.clone())?;
        tape.col_scale(b, pv.sh_w)?
    };
    let cat = tape.concat_last(embedded, sh)?;
    let mut h = tape.linear(cat, pv.fuse_w, Some(pv.fuse_b))?;

    let mut intra_attn = Vec::with_capacity(cfg.levels);
    let mut inter_attn = Vec::with_capacity(cfg.levels);
    for (lp, bv) in plan.levels.iter().zip(&pv.blocks) {
        let laid = tape.gather_slots(h, lp.slots.clone(), lp.p, lp.m)?;
        let (out, ia, ea) = ssa_block(tape, laid, lp, bv, pv.intra_bias, pv.inter_bias, cfg)?;
        h = tape.scatter_slots(out, lp.positions.clone())?;
        intra_attn.push(ia);
        inter_attn.push(ea);
    }

    let out = tape.linear(h, pv.head_w, Some(pv.head_b))?;
    let pred = tape.reshape(out, vec![cfg.n, cfg.f_out, cfg.c])?;
    let loss = match target {
        Some(t) => {
            if t.shape() != [cfg.n, cfg.f_out, cfg.c] {
                return Err(Error::shape(
                    "forward",
                    format!("target {:?}, want [{}, {}, {}]", t.shape(), cfg.n, cfg.f_out, cfg.c),
                ));
            }
            let tv = tape.leaf(t.clone())?;
            Some(tape.mean_abs_error(pred, tv)?)
        }
        None => None,
    };
    Ok(ForwardPass { pred, loss, intra_attn, inter_attn })
}

/// Prediction on a fresh tape; returns the `[N, F, C]` tensor.
pub fn predict(
    params: &ModelParams,
    plan: &ModelPlan,
    basis: &HarmonicBasis,
    input: &Tensor,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let pass = forward(&mut tape, params, plan, basis, input, None)?;
    Ok(tape.value(pass.pred).clone())
}

/// Loss for one batch on a fresh tape; returns (tape, loss node, loss value).
pub fn batch_loss(
    params: &ModelParams,
    plan: &ModelPlan,
    basis: &HarmonicBasis,
    batch: &ForecastBatch,
) -> Result<(Tape, Var, Real)> {
    let mut tape = Tape::new();
    let pass = forward(&mut tape, params, plan, basis, &batch.input, Some(&batch.target))?;
    let loss = pass.loss.expect("target given");
    let value = tape.value(loss).item()?;
    Ok((tape, loss, value))
}

/// Post-softmax attention weights per level, with every entry touching a
/// padded slot reported as zero. Ablated paths export the maps they
/// effectively use: identity for the local path, zeros for the global one.
pub struct AttentionMaps {
    /// Per level: [P, M, M].
    pub intra: Vec<Tensor>,
    /// Per level: [P, P].
    pub inter: Vec<Tensor>,
}

pub fn attention_maps(
    params: &ModelParams,
    plan: &ModelPlan,
    basis: &HarmonicBasis,
    input: &Tensor,
) -> Result<AttentionMaps> {
    let cfg = &params.config;
    let mut tape = Tape::new();
    let pass = forward(&mut tape, params, plan, basis, input, None)?;
    let heads = cfg.heads as Real;
    let mut intra = Vec::with_capacity(cfg.levels);
    let mut inter = Vec::with_capacity(cfg.levels);
    for (li, lp) in plan.levels.iter().enumerate() {
        let (p, m) = (lp.p, lp.m);
        let mut map = vec![0.0 as Real; p * m * m];
        match pass.intra_attn[li] {
            Some(v) => {
                // average heads, zero padded rows and columns
                let t = tape.value(v);
                for pi in 0..p {
                    for h in 0..cfg.heads {
                        let base = ((pi * cfg.heads + h) * m) * m;
                        for i in 0..m {
                            for j in 0..m {
                                if lp.pad_rows[pi * m + i] && lp.pad_rows[pi * m + j] {
                                    map[(pi * m + i) * m + j] += t.data()[base + i * m + j] / heads;
                                }
                            }
                        }
                    }
                }
            }
            None => {
                for pi in 0..p {
                    for i in 0..m {
                        if lp.pad_rows[pi * m + i] {
                            map[(pi * m + i) * m + i] = 1.0;
                        }
                    }
                }
            }
        }
        intra.push(Tensor::new(vec![p, m, m], map)?);

        let mut imap = vec![0.0 as Real; p * p];
        if let Some(v) = pass.inter_attn[li] {
            let t = tape.value(v);
            for h in 0..cfg.heads {
                for i in 0..p {
                    for j in 0..p {
                        imap[i * p + j] += t.data()[(h * p + i) * p + j] / heads;
                    }
                }
            }
        }
        inter.push(Tensor::new(vec![p, p], imap)?);
    }
    Ok(AttentionMaps { intra, inter })
}

/// Diagnostic: run one block level on an explicit laid-out `[P, M, D]`
/// tensor and return its output together with d(sum(output))/d(param) for
/// every parameter slot. Exercises the padding contract at the block
/// boundary, where padded slots are directly addressable.
pub fn block_probe(
    params: &ModelParams,
    plan: &ModelPlan,
    level: usize,
    x: &Tensor,
) -> Result<(Tensor, Vec<Tensor>)> {
    let cfg = &params.config;
    let lp = plan
        .levels
        .get(level)
        .ok_or_else(|| Error::invalid(format!("no block level {}", level)))?;
    if x.shape() != [lp.p, lp.m, cfg.dim] {
        return Err(Error::shape(
            "block_probe",
            format!("input {:?}, want [{}, {}, {}]", x.shape(), lp.p, lp.m, cfg.dim),
        ));
    }
    let mut tape = Tape::new();
    let pv = lease_params(&mut tape, params)?;
    let xv = tape.leaf(x.clone())?;
    let (out, _, _) = ssa_block(&mut tape, xv, lp, &pv.blocks[level], pv.intra_bias, pv.inter_bias, cfg)?;
    let s = tape.sum(out)?;
    let value = tape.value(out).clone();
    let grads = tape.backward(s, 1.0)?;
    let list = params.params();
    let grad_list = (0..list.len())
        .map(|k| {
            grads
                .get(k)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(list[k].value.shape().to_vec()))
        })
        .collect();
    Ok((value, grad_list))
}

/// Plain mean absolute error between two `[N, F, C]` tensors.
pub fn mae_loss(pred: &Tensor, target: &Tensor) -> Result<Real> {
    if pred.shape() != target.shape() {
        return Err(Error::shape(
            "mae_loss",
            format!("{:?} vs {:?}", pred.shape(), target.shape()),
        ));
    }
    let n = pred.numel() as Real;
    Ok(pred.data().iter().zip(target.data()).map(|(a, b)| (a - b).abs()).sum::<Real>() / n)
}
