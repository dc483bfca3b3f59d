//! The TUnet network: patch embedding, pre-LN transformer stack,
//! token-to-feature-map reshape, auxiliary CNN encoder (skips only), and the
//! Unet decoder that turns the transformer output back into a pixel map.
//!
//! All forward functions build onto a caller-supplied [`Tape`], so the same
//! code path serves inference, training and gradient checking.

use std::collections::HashMap;

use rand_chacha::ChaCha20Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::rng;
use crate::tape::{Precision, Tape, Var};
use crate::tensor::Tensor;

/// Layer-norm epsilon used throughout the transformer.
pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct ConvParams {
    pub w: Tensor,
    pub b: Tensor,
}

#[derive(Clone, Debug)]
pub struct BlockParams {
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

#[derive(Clone, Debug)]
pub struct DecoderStageParams {
    pub conv1: ConvParams,
    /// Present for the deep backbone, absent in the shallow variant.
    pub conv2: Option<ConvParams>,
}

/// Named collection of every learnable tensor in the network.
#[derive(Clone, Debug)]
pub struct TUnetParams {
    pub embed: ConvParams,
    pub pos_embed: Tensor,
    pub blocks: Vec<BlockParams>,
    pub encoder: Vec<ConvParams>,
    pub decoder: Vec<DecoderStageParams>,
    pub head: ConvParams,
}

/// (name, shape) of every parameter tensor, in canonical order. This is the
/// single source of truth shared by initialization, checkpoints and binding.
pub fn expected_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let d = cfg.token_dim();
    let s = cfg.seq_len();
    let rd = cfg.mlp_ratio * d;
    let mut out = Vec::new();
    out.push(("embed.w".into(), vec![cfg.embed_channels, cfg.channels, 1, 1]));
    out.push(("embed.b".into(), vec![cfg.embed_channels]));
    out.push(("pos_embed".into(), vec![s, d]));
    for l in 0..cfg.num_layers {
        let p = format!("block{l}");
        out.push((format!("{p}.ln1.gamma"), vec![d]));
        out.push((format!("{p}.ln1.beta"), vec![d]));
        for nm in ["wq", "wk", "wv", "wo"] {
            out.push((format!("{p}.attn.{nm}"), vec![d, d]));
            out.push((format!("{p}.attn.{}", nm.replace('w', "b")), vec![d]));
        }
        out.push((format!("{p}.ln2.gamma"), vec![d]));
        out.push((format!("{p}.ln2.beta"), vec![d]));
        out.push((format!("{p}.mlp.w1"), vec![d, rd]));
        out.push((format!("{p}.mlp.b1"), vec![rd]));
        out.push((format!("{p}.mlp.w2"), vec![rd, d]));
        out.push((format!("{p}.mlp.b2"), vec![d]));
    }
    let mut in_ch = cfg.channels;
    for (i, &wd) in cfg.encoder_widths.iter().enumerate() {
        out.push((format!("enc{i}.conv.w"), vec![wd, in_ch, 3, 3]));
        out.push((format!("enc{i}.conv.b"), vec![wd]));
        in_ch = wd;
    }
    let stages = cfg.num_stages();
    let mut up_ch = cfg.embed_channels * s;
    for (j, &wd) in cfg.decoder_widths.iter().enumerate() {
        let skip_ch = cfg.encoder_widths[stages - 1 - j];
        out.push((format!("dec{j}.conv1.w"), vec![wd, up_ch + skip_ch, 3, 3]));
        out.push((format!("dec{j}.conv1.b"), vec![wd]));
        if cfg.decoder_convs_per_stage == 2 {
            out.push((format!("dec{j}.conv2.w"), vec![wd, wd, 3, 3]));
            out.push((format!("dec{j}.conv2.b"), vec![wd]));
        }
        up_ch = wd;
    }
    out.push(("head.w".into(), vec![1, up_ch, 1, 1]));
    out.push(("head.b".into(), vec![1]));
    out
}

impl TUnetParams {
    /// Assemble parameters from a name→tensor map, validating the exact entry
    /// set and every shape against the config.
    pub fn from_named(cfg: &ModelConfig, mut map: HashMap<String, Tensor>) -> Result<Self> {
        cfg.validate()?;
        let expected = expected_shapes(cfg);
        let mut take = |name: &str, shape: &[usize]| -> Result<Tensor> {
            let t = map
                .remove(name)
                .ok_or_else(|| Error::Schema(format!("missing parameter tensor '{name}'")))?;
            if t.shape() != shape {
                return Err(Error::Schema(format!(
                    "parameter '{name}' has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            Ok(t.with_requires_grad(true))
        };

        let mut tensors = Vec::with_capacity(expected.len());
        for (name, shape) in &expected {
            tensors.push(take(name, shape)?);
        }
        if let Some(extra) = map.keys().next() {
            return Err(Error::Schema(format!(
                "unexpected parameter tensor '{extra}'"
            )));
        }

        let mut it = tensors.into_iter();
        let mut next = || it.next().expect("length checked against expected_shapes");
        let embed = ConvParams { w: next(), b: next() };
        let pos_embed = next();
        let mut blocks = Vec::with_capacity(cfg.num_layers);
        for _ in 0..cfg.num_layers {
            let ln1_gamma = next();
            let ln1_beta = next();
            let wq = next();
            let bq = next();
            let wk = next();
            let bk = next();
            let wv = next();
            let bv = next();
            let wo = next();
            let bo = next();
            let ln2_gamma = next();
            let ln2_beta = next();
            let w1 = next();
            let b1 = next();
            let w2 = next();
            let b2 = next();
            blocks.push(BlockParams {
                ln1_gamma, ln1_beta, wq, bq, wk, bk, wv, bv, wo, bo,
                ln2_gamma, ln2_beta, w1, b1, w2, b2,
            });
        }
        let mut encoder = Vec::with_capacity(cfg.num_stages());
        for _ in 0..cfg.num_stages() {
            encoder.push(ConvParams { w: next(), b: next() });
        }
        let mut decoder = Vec::with_capacity(cfg.num_stages());
        for _ in 0..cfg.num_stages() {
            let conv1 = ConvParams { w: next(), b: next() };
            let conv2 = if cfg.decoder_convs_per_stage == 2 {
                Some(ConvParams { w: next(), b: next() })
            } else {
                None
            };
            decoder.push(DecoderStageParams { conv1, conv2 });
        }
        let head = ConvParams { w: next(), b: next() };
        Ok(TUnetParams {
            embed,
            pos_embed,
            blocks,
            encoder,
            decoder,
            head,
        })
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = Vec::new();
        out.push(("embed.w".into(), &self.embed.w));
        out.push(("embed.b".into(), &self.embed.b));
        out.push(("pos_embed".into(), &self.pos_embed));
        for (l, b) in self.blocks.iter().enumerate() {
            let p = format!("block{l}");
            out.push((format!("{p}.ln1.gamma"), &b.ln1_gamma));
            out.push((format!("{p}.ln1.beta"), &b.ln1_beta));
            out.push((format!("{p}.attn.wq"), &b.wq));
            out.push((format!("{p}.attn.bq"), &b.bq));
            out.push((format!("{p}.attn.wk"), &b.wk));
            out.push((format!("{p}.attn.bk"), &b.bk));
            out.push((format!("{p}.attn.wv"), &b.wv));
            out.push((format!("{p}.attn.bv"), &b.bv));
            out.push((format!("{p}.attn.wo"), &b.wo));
            out.push((format!("{p}.attn.bo"), &b.bo));
            out.push((format!("{p}.ln2.gamma"), &b.ln2_gamma));
            out.push((format!("{p}.ln2.beta"), &b.ln2_beta));
            out.push((format!("{p}.mlp.w1"), &b.w1));
            out.push((format!("{p}.mlp.b1"), &b.b1));
            out.push((format!("{p}.mlp.w2"), &b.w2));
            out.push((format!("{p}.mlp.b2"), &b.b2));
        }
        for (i, c) in self.encoder.iter().enumerate() {
            out.push((format!("enc{i}.conv.w"), &c.w));
            out.push((format!("enc{i}.conv.b"), &c.b));
        }
        for (j, st) in self.decoder.iter().enumerate() {
            out.push((format!("dec{j}.conv1.w"), &st.conv1.w));
            out.push((format!("dec{j}.conv1.b"), &st.conv1.b));
            if let Some(c2) = &st.conv2 {
                out.push((format!("dec{j}.conv2.w"), &c2.w));
                out.push((format!("dec{j}.conv2.b"), &c2.b));
            }
        }
        out.push(("head.w".into(), &self.head.w));
        out.push(("head.b".into(), &self.head.b));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = Vec::new();
        out.push(("embed.w".into(), &mut self.embed.w));
        out.push(("embed.b".into(), &mut self.embed.b));
        out.push(("pos_embed".into(), &mut self.pos_embed));
        for (l, b) in self.blocks.iter_mut().enumerate() {
            let p = format!("block{l}");
            out.push((format!("{p}.ln1.gamma"), &mut b.ln1_gamma));
            out.push((format!("{p}.ln1.beta"), &mut b.ln1_beta));
            out.push((format!("{p}.attn.wq"), &mut b.wq));
            out.push((format!("{p}.attn.bq"), &mut b.bq));
            out.push((format!("{p}.attn.wk"), &mut b.wk));
            out.push((format!("{p}.attn.bk"), &mut b.bk));
            out.push((format!("{p}.attn.wv"), &mut b.wv));
            out.push((format!("{p}.attn.bv"), &mut b.bv));
            out.push((format!("{p}.attn.wo"), &mut b.wo));
            out.push((format!("{p}.attn.bo"), &mut b.bo));
            out.push((format!("{p}.ln2.gamma"), &mut b.ln2_gamma));
            out.push((format!("{p}.ln2.beta"), &mut b.ln2_beta));
            out.push((format!("{p}.mlp.w1"), &mut b.w1));
            out.push((format!("{p}.mlp.b1"), &mut b.b1));
            out.push((format!("{p}.mlp.w2"), &mut b.w2));
            out.push((format!("{p}.mlp.b2"), &mut b.b2));
        }
        for (i, c) in self.encoder.iter_mut().enumerate() {
            out.push((format!("enc{i}.conv.w"), &mut c.w));
            out.push((format!("enc{i}.conv.b"), &mut c.b));
        }
        for (j, st) in self.decoder.iter_mut().enumerate() {
            out.push((format!("dec{j}.conv1.w"), &mut st.conv1.w));
            out.push((format!("dec{j}.conv1.b"), &mut st.conv1.b));
            if let Some(c2) = &mut st.conv2 {
                out.push((format!("dec{j}.conv2.w"), &mut c2.w));
                out.push((format!("dec{j}.conv2.b"), &mut c2.b));
            }
        }
        out.push(("head.w".into(), &mut self.head.w));
        out.push(("head.b".into(), &mut self.head.b));
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for (_, t) in self.named_tensors_mut() {
            t.zero_grad();
        }
    }

    pub fn all_finite(&self) -> bool {
        self.named_tensors().iter().all(|(_, t)| t.is_finite())
    }

    /// Round every parameter through f32 (used when training in 32-bit mode).
    pub fn round_to_f32(&mut self) {
        for (_, t) in self.named_tensors_mut() {
            t.round_to_f32();
        }
    }
}

/// Deterministic initialization: weights ~ U(−√(1/fan_in), +√(1/fan_in)),
/// positional embedding ~ N(0, 0.02), LN gains 1, everything else 0.
pub fn init_params(cfg: &ModelConfig) -> Result<TUnetParams> {
    cfg.validate()?;
    let mut r = rng::seeded(cfg.seed, rng::STREAM_INIT);
    let mut map = HashMap::new();
    for (name, shape) in expected_shapes(cfg) {
        let n: usize = shape.iter().product();
        let data = if name.ends_with(".gamma") {
            vec![1.0; n]
        } else if name == "pos_embed" {
            (0..n).map(|_| rng::normal(&mut r, 0.0, 0.02)).collect()
        } else if shape.len() == 1 {
            vec![0.0; n] // biases and LN betas
        } else {
            let fan_in: usize = match shape.len() {
                4 => shape[1] * shape[2] * shape[3],
                2 => shape[0],
                _ => unreachable!("parameters are 1-D, 2-D or 4-D"),
            };
            let bound = (1.0 / fan_in as f64).sqrt();
            (0..n).map(|_| rng::uniform(&mut r, -bound, bound)).collect()
        };
        map.insert(name, Tensor::from_vec(shape, data)?);
    }
    TUnetParams::from_named(cfg, map)
}

// ── Tape binding ───────────────────────────────────────────────────────

#[derive(Clone, Copy)]
pub struct ConvVars {
    pub w: Var,
    pub b: Var,
}

#[derive(Clone, Copy)]
pub struct BlockVars {
    pub ln1_gamma: Var,
    pub ln1_beta: Var,
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
    pub ln2_gamma: Var,
    pub ln2_beta: Var,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

#[derive(Clone, Copy)]
pub struct DecoderStageVars {
    pub conv1: ConvVars,
    pub conv2: Option<ConvVars>,
}

/// Tape handles for every parameter tensor, in the same canonical order as
/// [`TUnetParams::named_tensors`] (asserted when binding).
pub struct TUnetVars {
    pub embed: ConvVars,
    pub pos_embed: Var,
    pub blocks: Vec<BlockVars>,
    pub encoder: Vec<ConvVars>,
    pub decoder: Vec<DecoderStageVars>,
    pub head: ConvVars,
    ordered: Vec<Var>,
}

impl TUnetVars {
    /// Vars aligned with `named_tensors` order.
    pub fn ordered(&self) -> &[Var] {
        &self.ordered
    }
}

/// Record every parameter on the tape. With `trainable` the leaves receive
/// gradients on backward.
pub fn bind(tape: &mut Tape, params: &TUnetParams, trainable: bool) -> TUnetVars {
    let mut ordered = Vec::new();
    let mut leaf = |tape: &mut Tape, t: &Tensor| {
        let v = if trainable { tape.param(t) } else { tape.constant(t) };
        ordered.push(v);
        v
    };
    let embed = ConvVars {
        w: leaf(tape, &params.embed.w),
        b: leaf(tape, &params.embed.b),
    };
    let pos_embed = leaf(tape, &params.pos_embed);
    let blocks: Vec<BlockVars> = params
        .blocks
        .iter()
        .map(|b| BlockVars {
            ln1_gamma: leaf(tape, &b.ln1_gamma),
            ln1_beta: leaf(tape, &b.ln1_beta),
            wq: leaf(tape, &b.wq),
            bq: leaf(tape, &b.bq),
            wk: leaf(tape, &b.wk),
            bk: leaf(tape, &b.bk),
            wv: leaf(tape, &b.wv),
            bv: leaf(tape, &b.bv),
            wo: leaf(tape, &b.wo),
            bo: leaf(tape, &b.bo),
            ln2_gamma: leaf(tape, &b.ln2_gamma),
            ln2_beta: leaf(tape, &b.ln2_beta),
            w1: leaf(tape, &b.w1),
            b1: leaf(tape, &b.b1),
            w2: leaf(tape, &b.w2),
            b2: leaf(tape, &b.b2),
        })
        .collect();
    let encoder: Vec<ConvVars> = params
        .encoder
        .iter()
        .map(|c| ConvVars {
            w: leaf(tape, &c.w),
            b: leaf(tape, &c.b),
        })
        .collect();
    let decoder: Vec<DecoderStageVars> = params
        .decoder
        .iter()
        .map(|st| DecoderStageVars {
            conv1: ConvVars {
                w: leaf(tape, &st.conv1.w),
                b: leaf(tape, &st.conv1.b),
            },
            conv2: st.conv2.as_ref().map(|c2| ConvVars {
                w: leaf(tape, &c2.w),
                b: leaf(tape, &c2.b),
            }),
        })
        .collect();
    let head = ConvVars {
        w: leaf(tape, &params.head.w),
        b: leaf(tape, &params.head.b),
    };
    debug_assert_eq!(ordered.len(), params.named_tensors().len());
    TUnetVars {
        embed,
        pos_embed,
        blocks,
        encoder,
        decoder,
        head,
        ordered,
    }
}

/// Accumulate the tape's gradients into the parameter tensors' grad fields.
pub fn harvest_grads(tape: &Tape, vars: &TUnetVars, params: &mut TUnetParams) -> Result<()> {
    let named = params.named_tensors_mut();
    if named.len() != vars.ordered.len() {
        return Err(Error::Contract(
            "parameter binding does not match parameter set".into(),
        ));
    }
    for ((_, tensor), var) in named.into_iter().zip(vars.ordered.iter()) {
        if let Some(g) = tape.grad(*var) {
            tensor.accumulate_grad(g)?;
        }
    }
    Ok(())
}

// ── Forward pieces: embedding, transformer blocks, reshape, CNN paths ──

/// Patch + positional embedding: 1×1 conv over the whole image, patchify,
/// add the learned positional table. `[C,H,W] -> [S,d]`.
pub fn embed(tape: &mut Tape, vars: &TUnetVars, cfg: &ModelConfig, image: Var) -> Result<Var> {
    let shape = tape.shape(image).to_vec();
    if shape != [cfg.channels, cfg.height, cfg.width] {
        return Err(Error::Config(format!(
            "image shape {shape:?} does not match config [{}, {}, {}]",
            cfg.channels, cfg.height, cfg.width
        )));
    }
    let mapped = tape.conv2d(image, vars.embed.w, vars.embed.b)?;
    let tokens = tape.patchify(mapped, cfg.patch_size)?;
    tape.add(tokens, vars.pos_embed)
}

/// Multi-head self-attention over all tokens, no masking.
pub fn mha(tape: &mut Tape, block: &BlockVars, cfg: &ModelConfig, x: Var) -> Result<Var> {
    let d = cfg.token_dim();
    let h = cfg.num_heads;
    if !d.is_multiple_of(h) {
        return Err(Error::Config(format!(
            "token dim {d} is not divisible by {h} heads"
        )));
    }
    let dh = d / h;
    let q0 = tape.matmul(x, block.wq)?;
    let q = tape.add_row_bias(q0, block.bq)?;
    let k0 = tape.matmul(x, block.wk)?;
    let k = tape.add_row_bias(k0, block.bk)?;
    let v0 = tape.matmul(x, block.wv)?;
    let v = tape.add_row_bias(v0, block.bv)?;
    let inv_sqrt_dh = 1.0 / (dh as f64).sqrt();

    let mut merged: Option<Var> = None;
    for head in 0..h {
        let qi = tape.slice_cols(q, head * dh, dh)?;
        let ki = tape.slice_cols(k, head * dh, dh)?;
        let vi = tape.slice_cols(v, head * dh, dh)?;
        let kt = tape.transpose_last2(ki)?;
        let scores_raw = tape.matmul(qi, kt)?;
        let scores = tape.scale(scores_raw, inv_sqrt_dh)?;
        let attn = tape.softmax_lastdim(scores)?;
        let oi = tape.matmul(attn, vi)?;
        merged = Some(match merged {
            None => oi,
            Some(acc) => tape.concat_cols(acc, oi)?,
        });
    }
    let o = merged.expect("at least one head");
    let proj = tape.matmul(o, block.wo)?;
    tape.add_row_bias(proj, block.bo)
}

fn mlp(tape: &mut Tape, block: &BlockVars, cfg: &ModelConfig, x: Var) -> Result<Var> {
    let h0 = tape.matmul(x, block.w1)?;
    let h1 = tape.add_row_bias(h0, block.b1)?;
    let a = tape.elu(h1, cfg.alpha)?;
    let o0 = tape.matmul(a, block.w2)?;
    tape.add_row_bias(o0, block.b2)
}

/// One pre-LN block: `z' = MHA(LN(z)) + z`, `out = MLP(LN(z')) + z'`.
pub fn transformer_block(
    tape: &mut Tape,
    block: &BlockVars,
    cfg: &ModelConfig,
    z: Var,
) -> Result<Var> {
    let n1 = tape.layernorm(z, block.ln1_gamma, block.ln1_beta, LN_EPS)?;
    let att = mha(tape, block, cfg, n1)?;
    let z_mid = tape.add(att, z)?;
    let n2 = tape.layernorm(z_mid, block.ln2_gamma, block.ln2_beta, LN_EPS)?;
    let ff = mlp(tape, block, cfg, n2)?;
    tape.add(ff, z_mid)
}

/// All transformer layers in sequence.
pub fn transformer_stack(
    tape: &mut Tape,
    vars: &TUnetVars,
    cfg: &ModelConfig,
    z0: Var,
) -> Result<Var> {
    let mut z = z0;
    for block in &vars.blocks {
        z = transformer_block(tape, block, cfg, z)?;
    }
    Ok(z)
}

/// `[S,d] -> [E_c·S, n, n]`. Because tokens are channel-major internally this
/// is a pure row-major reshape; the inverse is exact.
pub fn tokens_to_map(tape: &mut Tape, cfg: &ModelConfig, z: Var) -> Result<Var> {
    let shape = tape.shape(z).to_vec();
    let (s, d) = (cfg.seq_len(), cfg.token_dim());
    if shape != [s, d] {
        return Err(Error::Config(format!(
            "token matrix {shape:?} does not match config [{s}, {d}]"
        )));
    }
    let n = cfg.patch_size;
    tape.reshape(z, vec![cfg.embed_channels * s, n, n])
}

/// Auxiliary CNN encoder: per stage conv3×3 → ELU (recorded as a skip) →
/// maxpool. Returns the skips at resolutions H, H/2, …, 2n; the final pooled
/// map is discarded — the encoder feeds the decoder only through skips.
pub fn unet_encoder(
    tape: &mut Tape,
    vars: &TUnetVars,
    cfg: &ModelConfig,
    image: Var,
) -> Result<Vec<Var>> {
    let mut x = image;
    let mut skips = Vec::with_capacity(vars.encoder.len());
    for stage in &vars.encoder {
        let c = tape.conv2d(x, stage.w, stage.b)?;
        let a = tape.elu(c, cfg.alpha)?;
        skips.push(a);
        x = tape.maxpool2d(a)?;
    }
    Ok(skips)
}

/// Unet decoder: per stage upsample ×2 → concat the matching skip → conv3×3 →
/// ELU (→ second conv+ELU for the deep backbone); a final 1×1 conv produces
/// single-channel logits.
pub fn decoder(
    tape: &mut Tape,
    vars: &TUnetVars,
    cfg: &ModelConfig,
    tmap: Var,
    skips: &[Var],
) -> Result<Var> {
    let stages = cfg.num_stages();
    if skips.len() != stages {
        return Err(Error::Dim(format!(
            "decoder: expected {stages} skips, got {}",
            skips.len()
        )));
    }
    let mut x = tmap;
    for (j, stage) in vars.decoder.iter().enumerate() {
        x = tape.bilinear_upsample2x(x)?;
        let skip = skips[stages - 1 - j];
        let (sx, ss) = (tape.shape(x).to_vec(), tape.shape(skip).to_vec());
        if sx[1..] != ss[1..] {
            return Err(Error::Dim(format!(
                "decoder stage {j}: upsampled map {sx:?} does not match skip {ss:?}"
            )));
        }
        x = tape.concat_channels(x, skip)?;
        let c1 = tape.conv2d(x, stage.conv1.w, stage.conv1.b)?;
        x = tape.elu(c1, cfg.alpha)?;
        if let Some(c2) = &stage.conv2 {
            let c = tape.conv2d(x, c2.w, c2.b)?;
            x = tape.elu(c, cfg.alpha)?;
        }
    }
    tape.conv2d(x, vars.head.w, vars.head.b)
}

/// Full forward pass producing the probability map `[1,H,W]`, values in (0,1).
pub fn forward(tape: &mut Tape, vars: &TUnetVars, cfg: &ModelConfig, image: Var) -> Result<Var> {
    let z0 = embed(tape, vars, cfg, image)?;
    let zm = transformer_stack(tape, vars, cfg, z0)?;
    let tmap = tokens_to_map(tape, cfg, zm)?;
    let skips = unet_encoder(tape, vars, cfg, image)?;
    let logits = decoder(tape, vars, cfg, tmap, &skips)?;
    tape.sigmoid(logits)
}

/// Convenience inference entry point: fresh tape, no gradients.
pub fn forward_inference(
    cfg: &ModelConfig,
    params: &TUnetParams,
    image: &Tensor,
    precision: Precision,
) -> Result<Tensor> {
    let mut tape = Tape::new(precision);
    let vars = bind(&mut tape, params, false);
    let img = tape.constant(image);
    let prob = forward(&mut tape, &vars, cfg, img)?;
    Ok(tape.value(prob))
}

// ── Pure tensor-level layout ops (used by tests and tools) ─────────────

/// `[C,H,W] -> [S, C·n²]` without a tape.
pub fn patchify(t: &Tensor, n: usize) -> Result<Tensor> {
    let s = t.shape();
    if s.len() != 3 {
        return Err(Error::Config(format!("patchify: expected [C,H,W], got {s:?}")));
    }
    if n == 0 || !s[1].is_multiple_of(n) || !s[2].is_multiple_of(n) {
        return Err(Error::Config(format!(
            "patchify: {}x{} image is not divisible by patch size {n}",
            s[1], s[2]
        )));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let data = crate::tape::patchify_raw(t.data(), c, h, w, n);
    Tensor::from_vec(vec![(h / n) * (w / n), c * n * n], data)
}

/// Inverse of [`patchify`].
pub fn unpatchify(t: &Tensor, n: usize, height: usize, width: usize) -> Result<Tensor> {
    let s = t.shape();
    if s.len() != 2 || n == 0 {
        return Err(Error::Config(format!(
            "unpatchify: expected [S, C*n*n] with n > 0, got {s:?}"
        )));
    }
    let pn = n * n;
    if !s[1].is_multiple_of(pn)
        || !height.is_multiple_of(n)
        || !width.is_multiple_of(n)
        || s[0] != (height / n) * (width / n)
    {
        return Err(Error::Config(format!(
            "unpatchify: tokens {s:?} do not tile a {height}x{width} image with patch {n}"
        )));
    }
    let c = s[1] / pn;
    let data = crate::tape::unpatchify_raw(t.data(), c, height, width, n);
    Tensor::from_vec(vec![c, height, width], data)
}

/// `[S,d] -> [E_c·S, n, n]` without a tape (row-major reshape).
pub fn tokens_to_map_tensor(t: &Tensor, embed_channels: usize, n: usize) -> Result<Tensor> {
    let s = t.shape();
    if s.len() != 2 || s[1] != embed_channels * n * n {
        return Err(Error::Config(format!(
            "tokens_to_map: token dim of {s:?} is not {embed_channels}·{n}²"
        )));
    }
    Tensor::from_vec(vec![embed_channels * s[0], n, n], t.data().to_vec())
}

/// Inverse of [`tokens_to_map_tensor`].
pub fn map_to_tokens_tensor(t: &Tensor, embed_channels: usize) -> Result<Tensor> {
    let s = t.shape();
    if s.len() != 3 || s[1] != s[2] || !s[0].is_multiple_of(embed_channels) {
        return Err(Error::Config(format!(
            "map_to_tokens: {s:?} is not an [E_c·S, n, n] map"
        )));
    }
    let n = s[1];
    Tensor::from_vec(
        vec![s[0] / embed_channels, embed_channels * n * n],
        t.data().to_vec(),
    )
}

/// Draw a config-shaped random image (test/GradCheck fixture helper).
pub fn random_image(cfg: &ModelConfig, rng: &mut ChaCha20Rng) -> Tensor {
    let n = cfg.channels * cfg.height * cfg.width;
    let data: Vec<f64> = (0..n).map(|_| rng::uniform(rng, -0.5, 0.5)).collect();
    Tensor::from_vec(vec![cfg.channels, cfg.height, cfg.width], data)
        .expect("shape and data agree by construction")
}
