//! Masked transformer autoencoder for object views.
//!
//! One network runs in two modes. The teacher bypasses the keep mask and
//! sends every token; the student keeps the top `⌈ρS⌉` tokens chosen by the
//! mask head. Both modes share the channel encoder/decoder and are trained
//! through a simulated fading link.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::channel::{draw_channel, equalize, transmit, ChannelModel, EqualizeMode};
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::nn::{Adam, LayerNorm, Linear, ParamSet, Tape, Tensor, Var};
use crate::raster::Image;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CodecConfig {
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub keep_rate: f64,
    pub quant_bits: u32,
    pub clip: f64,
    /// Real channel uses per token.
    pub channel_dim: usize,
    pub positional: bool,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            patch: 8,
            embed_dim: 32,
            layers: 2,
            heads: 4,
            keep_rate: 0.2,
            quant_bits: 16,
            clip: 4.0,
            channel_dim: 16,
            positional: true,
        }
    }
}

impl CodecConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::invalid("image and patch sizes must be positive"));
        }
        if self.height % self.patch != 0 || self.width % self.patch != 0 {
            return Err(Error::invalid(format!(
                "patch size {} does not divide {}x{}",
                self.patch, self.height, self.width
            )));
        }
        if !(self.keep_rate > 0.0 && self.keep_rate <= 1.0) {
            return Err(Error::invalid(format!("keep rate {} outside (0, 1]", self.keep_rate)));
        }
        if self.embed_dim == 0 || self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::invalid("embedding width must be a positive multiple of the head count"));
        }
        if !(1..=32).contains(&self.quant_bits) {
            return Err(Error::invalid(format!("{} quantization bits unsupported", self.quant_bits)));
        }
        if !(self.clip > 0.0 && self.clip.is_finite()) || self.channel_dim == 0 {
            return Err(Error::invalid("clip and channel width must be positive"));
        }
        Ok(())
    }

    pub fn tokens(&self) -> usize {
        (self.height / self.patch) * (self.width / self.patch)
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.patch * self.patch
    }

    pub fn kept_tokens(&self) -> usize {
        kept_count(self.tokens(), self.keep_rate)
    }

    /// Bits for the full latent at `q` bits per scalar.
    pub fn full_bits(&self) -> u64 {
        (self.tokens() * self.embed_dim) as u64 * self.quant_bits as u64
    }

    /// Kept-latent bits with no side information: `⌊ρ · full⌋`.
    pub fn paper_style_bits(&self) -> u64 {
        self.full_bits() * rho_milli(self.keep_rate) as u64 / 1000
    }

    /// Exact wire size of a student payload.
    pub fn wire_bits(&self) -> u64 {
        payload_bits(self.tokens(), self.embed_dim, self.quant_bits, self.kept_tokens())
    }

    /// Wire size when every token is sent.
    pub fn teacher_wire_bits(&self) -> u64 {
        payload_bits(self.tokens(), self.embed_dim, self.quant_bits, self.tokens())
    }
}

fn kept_count(tokens: usize, rho: f64) -> usize {
    ((rho * tokens as f64 - 1e-9).ceil() as usize).clamp(1, tokens)
}

fn rho_milli(rho: f64) -> u16 {
    (rho * 1000.0).round() as u16
}

/// `S × d_e` token matrix, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Latents<T> {
    pub tokens: usize,
    pub dim: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Latents<T> {
    pub fn new(tokens: usize, dim: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != tokens * dim {
            return Err(Error::invalid(format!("{} values for {tokens}x{dim} latents", data.len())));
        }
        Ok(Self { tokens, dim, data })
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn tensor(&self) -> Tensor<T> {
        Tensor::new(vec![self.tokens, self.dim], self.data.clone())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KeepMask {
    pub bits: Vec<bool>,
}

impl KeepMask {
    pub fn ones(n: usize) -> Self {
        Self { bits: vec![true; n] }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    fn as_tensor<T: Scalar>(&self) -> Tensor<T> {
        let data = self.bits.iter().map(|&b| if b { T::one() } else { T::zero() }).collect();
        Tensor::new(vec![self.bits.len(), 1], data)
    }
}

/// Top-`⌈ρS⌉` selection; equal logits favour the lower index.
pub fn binarize_mask<T: Scalar>(logits: &[T], rho: f64) -> Result<KeepMask> {
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(Error::invalid(format!("keep rate {rho} outside (0, 1]")));
    }
    let n = logits.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| logits[b].partial_cmp(&logits[a]).unwrap_or(std::cmp::Ordering::Equal));
    let mut bits = vec![false; n];
    if n > 0 {
        for &i in &order[..kept_count(n, rho)] {
            bits[i] = true;
        }
    }
    Ok(KeepMask { bits })
}

/// Zeroes the rows of dropped tokens.
pub fn compress<T: Scalar>(e: &Latents<T>, m: &KeepMask) -> Result<Latents<T>> {
    if m.len() != e.tokens {
        return Err(Error::invalid(format!("mask of length {} for {} tokens", m.len(), e.tokens)));
    }
    let mut out = e.clone();
    for (row, &keep) in out.data.chunks_mut(e.dim.max(1)).zip(&m.bits) {
        if !keep {
            row.iter_mut().for_each(|v| *v = T::zero());
        }
    }
    Ok(out)
}

/// `softmax(QKᵀ/√d) V` for `n×d_k`, `m×d_k` and `m×d_v` inputs.
pub fn attention<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>, d: f64) -> Result<Tensor<T>> {
    if !(d > 0.0) {
        return Err(Error::invalid(format!("attention scale d = {d} must be positive")));
    }
    if q.shape.len() != 2 || k.shape.len() != 2 || v.shape.len() != 2 {
        return Err(Error::invalid("attention expects matrices"));
    }
    if q.shape[1] != k.shape[1] || k.shape[0] != v.shape[0] {
        return Err(Error::invalid(format!(
            "attention shapes {:?}, {:?}, {:?} do not conform",
            q.shape, k.shape, v.shape
        )));
    }
    let mut tape = Tape::new();
    let (q, k, v) = (tape.leaf(q.clone()), tape.leaf(k.clone()), tape.leaf(v.clone()));
    let out = attend(&mut tape, q, k, v, T::of(1.0 / d.sqrt()));
    Ok(tape.value(out).clone())
}

fn attend<T: Scalar>(tape: &mut Tape<T>, q: Var, k: Var, v: Var, scale: T) -> Var {
    let s = tape.matmul_t(q, false, k, true);
    let s = tape.scale(s, scale);
    let a = tape.softmax_rows(s);
    tape.matmul(a, v)
}

// ---------------------------------------------------------------------------
// Network

#[derive(Clone, Copy, Debug)]
struct Block {
    ln1: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

impl Block {
    fn new<T: Scalar>(params: &mut ParamSet<T>, name: &str, d: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            ln1: LayerNorm::new(params, &format!("{name}.ln1"), d),
            q: Linear::new(params, &format!("{name}.q"), d, d, rng),
            k: Linear::new(params, &format!("{name}.k"), d, d, rng),
            v: Linear::new(params, &format!("{name}.v"), d, d, rng),
            o: Linear::new(params, &format!("{name}.o"), d, d, rng),
            ln2: LayerNorm::new(params, &format!("{name}.ln2"), d),
            fc1: Linear::new(params, &format!("{name}.fc1"), d, 2 * d, rng),
            fc2: Linear::new(params, &format!("{name}.fc2"), 2 * d, d, rng),
        }
    }

    /// Pre-norm self-attention and MLP over `batch` stacked sequences.
    fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &[Var], x: Var, batch: usize, heads: usize) -> Var {
        let (rows, d) = tape.value(x).dims2();
        let s = rows / batch;
        let dh = d / heads;
        let h = self.ln1.forward(tape, p, x);
        let q = self.q.forward(tape, p, h);
        let k = self.k.forward(tape, p, h);
        let v = self.v.forward(tape, p, h);
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let mut seqs = Vec::with_capacity(batch);
        for b in 0..batch {
            let (qb, kb, vb) =
                (tape.slice_rows(q, b * s, s), tape.slice_rows(k, b * s, s), tape.slice_rows(v, b * s, s));
            let mut outs = Vec::with_capacity(heads);
            for hd in 0..heads {
                let qh = tape.slice_cols(qb, hd * dh, dh);
                let kh = tape.slice_cols(kb, hd * dh, dh);
                let vh = tape.slice_cols(vb, hd * dh, dh);
                outs.push(attend(tape, qh, kh, vh, scale));
            }
            seqs.push(if heads == 1 { outs[0] } else { tape.concat_cols(&outs) });
        }
        let att = if batch == 1 { seqs[0] } else { tape.concat_rows(&seqs) };
        let att = self.o.forward(tape, p, att);
        let x = tape.add(x, att);
        let h = self.ln2.forward(tape, p, x);
        let h = self.fc1.forward(tape, p, h);
        let h = tape.gelu(h);
        let h = self.fc2.forward(tape, p, h);
        tape.add(x, h)
    }
}

/// Whether the keep mask is applied.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CodecMode {
    Teacher,
    Student,
}

impl CodecMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "teacher" => Ok(Self::Teacher),
            "student" => Ok(Self::Student),
            other => Err(Error::invalid(format!("unknown codec mode '{other}'"))),
        }
    }
}

/// Mask binarization flavour: training attaches a straight-through gradient.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskMode {
    Train,
    Infer,
}

/// Codec parameters. Slots are prefixed `enc.` (semantic encoder),
/// `chan_enc.`, `chan_dec.` and `dec.` (semantic decoder).
#[derive(Clone)]
pub struct SemanticCodec<T: Scalar> {
    pub cfg: CodecConfig,
    pub params: ParamSet<T>,
    embed: Linear,
    pos: Option<usize>,
    enc_blocks: Vec<Block>,
    enc_norm: LayerNorm,
    sem_head: Linear,
    mask_head: Linear,
    chan_enc: Linear,
    chan_dec: Linear,
    dec_in: Linear,
    dec_pos: Option<usize>,
    dec_blocks: Vec<Block>,
    dec_norm: LayerNorm,
    dec_out: Linear,
}

pub const CODEC_KIND: &str = "semantic_codec";

/// Tape handles of one batched forward pass.
pub struct CodecGraph {
    pub latents: Var,
    pub logits: Var,
    pub mask: Var,
    pub masks: Vec<KeepMask>,
    pub symbols: Var,
    pub received: Var,
    pub output: Var,
}

impl<T: Scalar> SemanticCodec<T> {
    pub fn new(cfg: CodecConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let (d, s) = (cfg.embed_dim, cfg.tokens());
        let embed = Linear::new(&mut params, "enc.embed", cfg.patch_dim(), d, &mut rng);
        let pos = cfg.positional.then(|| params.add_glorot("enc.pos", &[s, d], s, d, &mut rng));
        let enc_blocks = (0..cfg.layers).map(|i| Block::new(&mut params, &format!("enc.block{i}"), d, &mut rng)).collect();
        let enc_norm = LayerNorm::new(&mut params, "enc.norm", d);
        let sem_head = Linear::new(&mut params, "enc.semantic", d, d, &mut rng);
        let mask_head = Linear::new(&mut params, "enc.mask", d, 1, &mut rng);
        let chan_enc = Linear::new(&mut params, "chan_enc", d, cfg.channel_dim, &mut rng);
        let chan_dec = Linear::new(&mut params, "chan_dec", cfg.channel_dim, d, &mut rng);
        let dec_in = Linear::new(&mut params, "dec.in", d, d, &mut rng);
        let dec_pos = cfg.positional.then(|| params.add_glorot("dec.pos", &[s, d], s, d, &mut rng));
        let dec_blocks = (0..cfg.layers).map(|i| Block::new(&mut params, &format!("dec.block{i}"), d, &mut rng)).collect();
        let dec_norm = LayerNorm::new(&mut params, "dec.norm", d);
        let dec_out = Linear::new(&mut params, "dec.out", d, cfg.patch_dim(), &mut rng);
        Ok(Self {
            cfg,
            params,
            embed,
            pos,
            enc_blocks,
            enc_norm,
            sem_head,
            mask_head,
            chan_enc,
            chan_dec,
            dec_in,
            dec_pos,
            dec_blocks,
            dec_norm,
            dec_out,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let arch = serde_json::to_value(&self.cfg).expect("config serializes");
        checkpoint::save(path, CODEC_KIND, &arch, &self.params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let header = checkpoint::read_header(path)?;
        let cfg: CodecConfig = serde_json::from_value(header.arch.clone())
            .map_err(|e| Error::format(path, format!("bad codec configuration: {e}")))?;
        let loaded = checkpoint::load::<T>(path, CODEC_KIND, &header.arch)?;
        let mut codec = Self::new(cfg, 0)?;
        checkpoint::adopt(path, &mut codec.params, loaded)?;
        Ok(codec)
    }

    fn check_image(&self, image: &Image<T>) -> Result<()> {
        if image.width != self.cfg.width || image.height != self.cfg.height {
            return Err(Error::invalid(format!(
                "image is {}x{}, codec expects {}x{}",
                image.width, image.height, self.cfg.width, self.cfg.height
            )));
        }
        Ok(())
    }

    fn tile(&self, tape: &mut Tape<T>, v: Var, batch: usize) -> Var {
        if batch == 1 {
            v
        } else {
            tape.concat_rows(&vec![v; batch])
        }
    }

    fn embed_patches(&self, tape: &mut Tape<T>, p: &[Var], patches: Var, batch: usize) -> Var {
        let x = self.embed.forward(tape, p, patches);
        match self.pos {
            Some(slot) => {
                let pos = self.tile(tape, p[slot], batch);
                tape.add(x, pos)
            }
            None => x,
        }
    }

    /// Shared trunk plus both heads: `(E⁺, logits)` for `batch` images.
    pub fn encoder_graph(&self, tape: &mut Tape<T>, p: &[Var], patches: Var, batch: usize) -> (Var, Var) {
        let mut x = self.embed_patches(tape, p, patches, batch);
        for b in &self.enc_blocks {
            x = b.forward(tape, p, x, batch, self.cfg.heads);
        }
        let h = self.enc_norm.forward(tape, p, x);
        let e = self.sem_head.forward(tape, p, h);
        let logits = self.mask_head.forward(tape, p, h);
        (e, logits)
    }

    /// `tanh(E⁻ w_t + b_t)` on kept rows, scaled per image to unit
    /// complex-symbol power.
    pub fn channel_encoder_graph(&self, tape: &mut Tape<T>, p: &[Var], e: Var, mask: Var, kept: &[usize]) -> Var {
        let z = self.chan_enc.forward(tape, p, e);
        let x = tape.tanh(z);
        let x = tape.mul_col(x, mask);
        let s = self.cfg.tokens();
        let one = tape.leaf(Tensor::scalar(T::one()));
        let mut parts = Vec::with_capacity(kept.len());
        for (b, &k) in kept.iter().enumerate() {
            let xb = if kept.len() == 1 { x } else { tape.slice_rows(x, b * s, s) };
            let sq = tape.square(xb);
            let pw = tape.sum(sq);
            let symbols = (k * self.cfg.channel_dim) as f64 / 2.0;
            let pw = tape.scale(pw, T::of(1.0 / symbols));
            let pw = tape.add_scalar(pw, T::of(1e-12));
            let r = tape.sqrt(pw);
            let inv = tape.div(one, r);
            parts.push(tape.scale_by(xb, inv));
        }
        if parts.len() == 1 {
            parts[0]
        } else {
            tape.concat_rows(&parts)
        }
    }

    /// `Y w_r + b_r`, with dropped rows zeroed again.
    pub fn channel_decoder_graph(&self, tape: &mut Tape<T>, p: &[Var], y: Var, mask: Var) -> Var {
        let e = self.chan_dec.forward(tape, p, y);
        tape.mul_col(e, mask)
    }

    /// Token latents to patch pixels in `[0, 1]`.
    pub fn decoder_graph(&self, tape: &mut Tape<T>, p: &[Var], e: Var, batch: usize) -> Var {
        let mut x = self.dec_in.forward(tape, p, e);
        if let Some(slot) = self.dec_pos {
            let pos = self.tile(tape, p[slot], batch);
            x = tape.add(x, pos);
        }
        for b in &self.dec_blocks {
            x = b.forward(tape, p, x, batch, self.cfg.heads);
        }
        let h = self.dec_norm.forward(tape, p, x);
        let out = self.dec_out.forward(tape, p, h);
        // Clamped to [0, 1] on the way forward, identity on the way back, so
        // dark pixels do not saturate the gradient.
        let hard = tape.value(out).data.iter().map(|v| v.max(T::zero()).min(T::one())).collect();
        let hard = Tensor::new(tape.shape(out).to_vec(), hard);
        tape.straight_through(hard, out)
    }

    /// Builds the mask variable for `batch` sequences of logits.
    pub fn mask_graph(&self, tape: &mut Tape<T>, logits: Var, batch: usize, mode: CodecMode, mask_mode: MaskMode) -> Result<(Var, Vec<KeepMask>)> {
        let s = self.cfg.tokens();
        let masks: Vec<KeepMask> = match mode {
            CodecMode::Teacher => vec![KeepMask::ones(s); batch],
            CodecMode::Student => {
                let l = tape.data(logits).to_vec();
                l.chunks(s).map(|c| binarize_mask(c, self.cfg.keep_rate)).collect::<Result<_>>()?
            }
        };
        let mut hard = Vec::with_capacity(batch * s);
        for m in &masks {
            hard.extend(m.as_tensor::<T>().data);
        }
        let hard = Tensor::new(vec![batch * s, 1], hard);
        let var = match (mode, mask_mode) {
            (CodecMode::Student, MaskMode::Train) => {
                let soft = tape.sigmoid(logits);
                tape.straight_through(hard, soft)
            }
            _ => tape.leaf(hard),
        };
        Ok((var, masks))
    }

    /// Full batched pass. `noise` supplies the equalized additive
    /// disturbance for the kept symbols of each image.
    pub fn forward_graph(
        &self,
        tape: &mut Tape<T>,
        p: &[Var],
        images: &[&Image<T>],
        mode: CodecMode,
        mask_mode: MaskMode,
        noise: &mut dyn FnMut(usize, usize) -> Result<Vec<f64>>,
    ) -> Result<CodecGraph> {
        let batch = images.len();
        let mut patches = Vec::with_capacity(batch * self.cfg.tokens() * self.cfg.patch_dim());
        for im in images {
            self.check_image(im)?;
            patches.extend(patchify(im, self.cfg.patch));
        }
        let s = self.cfg.tokens();
        let patches = tape.leaf(Tensor::new(vec![batch * s, self.cfg.patch_dim()], patches));
        let (latents, logits) = self.encoder_graph(tape, p, patches, batch);
        let (mask, masks) = self.mask_graph(tape, logits, batch, mode, mask_mode)?;
        let e_minus = tape.mul_col(latents, mask);
        let kept: Vec<usize> = masks.iter().map(KeepMask::count).collect();
        let symbols = self.channel_encoder_graph(tape, p, e_minus, mask, &kept);
        let dc = self.cfg.channel_dim;
        let mut dist = vec![T::zero(); batch * s * dc];
        for (b, m) in masks.iter().enumerate() {
            let n = noise(b, m.count() * dc)?;
            let mut it = n.into_iter();
            for (i, _) in m.bits.iter().enumerate().filter(|(_, &k)| k) {
                let row = &mut dist[(b * s + i) * dc..(b * s + i + 1) * dc];
                for v in row.iter_mut() {
                    *v = T::of(it.next().unwrap_or(0.0));
                }
            }
        }
        let dist = tape.leaf(Tensor::new(vec![batch * s, dc], dist));
        let y = tape.add(symbols, dist);
        let received = self.channel_decoder_graph(tape, p, y, mask);
        let output = self.decoder_graph(tape, p, received, batch);
        Ok(CodecGraph { latents, logits, mask, masks, symbols, received, output })
    }
}

/// `S × 3p²` patch rows: patches in raster order, pixels row-major, RGB innermost.
pub fn patchify<T: Scalar>(image: &Image<T>, p: usize) -> Vec<T> {
    let (gw, gh) = (image.width / p, image.height / p);
    let mut out = Vec::with_capacity(image.data.len());
    for pr in 0..gh {
        for pc in 0..gw {
            for i in 0..p {
                let start = ((pr * p + i) * image.width + pc * p) * 3;
                out.extend_from_slice(&image.data[start..start + 3 * p]);
            }
        }
    }
    out
}

pub fn unpatchify<T: Scalar>(rows: &[T], width: usize, height: usize, p: usize) -> Result<Image<T>> {
    let gw = width / p;
    let mut data = vec![T::zero(); width * height * 3];
    for (s, patch) in rows.chunks(3 * p * p).enumerate() {
        let (pr, pc) = (s / gw, s % gw);
        for i in 0..p {
            let start = ((pr * p + i) * width + pc * p) * 3;
            data[start..start + 3 * p].copy_from_slice(&patch[i * 3 * p..(i + 1) * 3 * p]);
        }
    }
    Image::new(width, height, data)
}

fn no_noise(_: usize, n: usize) -> Result<Vec<f64>> {
    Ok(vec![0.0; n])
}

/// Token embeddings before the transformer trunk.
pub fn patch_embed<T: Scalar>(image: &Image<T>, codec: &SemanticCodec<T>) -> Result<Latents<T>> {
    codec.check_image(image)?;
    let mut tape = Tape::new();
    let p = codec.params.load(&mut tape);
    let patches = Tensor::new(vec![codec.cfg.tokens(), codec.cfg.patch_dim()], patchify(image, codec.cfg.patch));
    let patches = tape.leaf(patches);
    let x = codec.embed_patches(&mut tape, &p, patches, 1);
    Latents::new(codec.cfg.tokens(), codec.cfg.embed_dim, tape.data(x).to_vec())
}

/// Semantic latents `E⁺` and mask logits of one image.
pub fn encode<T: Scalar>(image: &Image<T>, codec: &SemanticCodec<T>) -> Result<(Latents<T>, Vec<T>)> {
    codec.check_image(image)?;
    let mut tape = Tape::new();
    let p = codec.params.load(&mut tape);
    let patches = Tensor::new(vec![codec.cfg.tokens(), codec.cfg.patch_dim()], patchify(image, codec.cfg.patch));
    let patches = tape.leaf(patches);
    let (e, logits) = codec.encoder_graph(&mut tape, &p, patches, 1);
    let e = Latents::new(codec.cfg.tokens(), codec.cfg.embed_dim, tape.data(e).to_vec())?;
    let logits = tape.data(logits).to_vec();
    if !e.is_finite() || logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("encoder produced non-finite activations".into()));
    }
    Ok((e, logits))
}

/// Kept rows through the channel encoder, flattened to a real vector of
/// unit complex-symbol power.
pub fn channel_encode<T: Scalar>(e: &Latents<T>, m: &KeepMask, codec: &SemanticCodec<T>) -> Result<Vec<f64>> {
    check_latents(e, m, &codec.cfg)?;
    let mut tape = Tape::new();
    let p = codec.params.load(&mut tape);
    let ev = tape.leaf(e.tensor());
    let mv = tape.leaf(m.as_tensor());
    let x = codec.channel_encoder_graph(&mut tape, &p, ev, mv, &[m.count()]);
    let dc = codec.cfg.channel_dim;
    let data = tape.data(x);
    let mut out = Vec::with_capacity(m.count() * dc);
    for (i, _) in m.bits.iter().enumerate().filter(|(_, &k)| k) {
        out.extend(data[i * dc..(i + 1) * dc].iter().map(|v| v.f64()));
    }
    Ok(out)
}

/// Inverse layout of [`channel_encode`]: received reals back to `S × d_e`.
pub fn channel_decode<T: Scalar>(y: &[f64], m: &KeepMask, codec: &SemanticCodec<T>) -> Result<Latents<T>> {
    let (s, dc) = (codec.cfg.tokens(), codec.cfg.channel_dim);
    if m.len() != s || y.len() != m.count() * dc {
        return Err(Error::invalid(format!(
            "{} received values for {} kept tokens of width {dc}",
            y.len(),
            m.count()
        )));
    }
    let mut full = vec![T::zero(); s * dc];
    let mut it = y.iter();
    for (i, _) in m.bits.iter().enumerate().filter(|(_, &k)| k) {
        for v in &mut full[i * dc..(i + 1) * dc] {
            *v = T::of(*it.next().expect("length checked"));
        }
    }
    let mut tape = Tape::new();
    let p = codec.params.load(&mut tape);
    let yv = tape.leaf(Tensor::new(vec![s, dc], full));
    let mv = tape.leaf(m.as_tensor());
    let e = codec.channel_decoder_graph(&mut tape, &p, yv, mv);
    Latents::new(s, codec.cfg.embed_dim, tape.data(e).to_vec())
}

/// Received latents to an image in `[0, 1]`.
pub fn decode<T: Scalar>(e: &Latents<T>, codec: &SemanticCodec<T>) -> Result<Image<T>> {
    if e.tokens != codec.cfg.tokens() || e.dim != codec.cfg.embed_dim {
        return Err(Error::invalid(format!("latents are {}x{}, codec expects {}x{}", e.tokens, e.dim, codec.cfg.tokens(), codec.cfg.embed_dim)));
    }
    let mut tape = Tape::new();
    let p = codec.params.load(&mut tape);
    let ev = tape.leaf(e.tensor());
    let out = codec.decoder_graph(&mut tape, &p, ev, 1);
    unpatchify(tape.data(out), codec.cfg.width, codec.cfg.height, codec.cfg.patch)
}

fn check_latents<T: Scalar>(e: &Latents<T>, m: &KeepMask, cfg: &CodecConfig) -> Result<()> {
    if e.tokens != cfg.tokens() || e.dim != cfg.embed_dim || m.len() != e.tokens {
        return Err(Error::invalid(format!(
            "latents {}x{} with mask of length {} do not match the codec",
            e.tokens,
            e.dim,
            m.len()
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Losses

pub const KD_EPS: f64 = 1e-6;

/// `KL(softmax(a) ‖ softmax(b))` over all entries.
pub fn kl_softmax_graph<T: Scalar>(tape: &mut Tape<T>, a: Var, b: Var) -> Var {
    let n = tape.value(a).len();
    let a = tape.reshape(a, &[1, n]);
    let b = tape.reshape(b, &[1, n]);
    let la = tape.log_softmax_all(a);
    let lb = tape.log_softmax_all(b);
    let pa = tape.exp(la);
    let d = tape.sub(la, lb);
    let t = tape.mul(pa, d);
    tape.sum(t)
}

/// `(L_tech, L_stu, L_KD)` recorded on `tape`.
#[allow(clippy::too_many_arguments)]
pub fn skd_losses_graph<T: Scalar>(
    tape: &mut Tape<T>,
    truth: Var,
    teacher_img: Var,
    student_img: Var,
    teacher_lat: Var,
    student_lat: Var,
    eps: T,
) -> (Var, Var, Var) {
    let l_tech = tape.mse(truth, teacher_img);
    let l_stu = tape.mse(truth, student_img);
    let kl = kl_softmax_graph(tape, teacher_lat, student_lat);
    let denom = tape.add(l_tech, l_stu);
    let denom = tape.add_scalar(denom, eps);
    let l_kd = tape.div(kl, denom);
    (l_tech, l_stu, l_kd)
}

/// Value-only form of [`skd_losses_graph`].
pub fn skd_losses(
    truth: &[f64],
    teacher_img: &[f64],
    student_img: &[f64],
    teacher_lat: &[f64],
    student_lat: &[f64],
    eps: f64,
) -> Result<(f64, f64, f64)> {
    if truth.len() != teacher_img.len() || truth.len() != student_img.len() || teacher_lat.len() != student_lat.len() {
        return Err(Error::invalid("skd loss inputs differ in length"));
    }
    if truth.is_empty() || teacher_lat.is_empty() || !(eps > 0.0) {
        return Err(Error::invalid("skd losses need nonempty inputs and a positive guard"));
    }
    let mut tape = Tape::<f64>::new();
    let mut leaf = |v: &[f64]| tape.leaf(Tensor::new(vec![v.len()], v.to_vec()));
    let vars = [leaf(truth), leaf(teacher_img), leaf(student_img), leaf(teacher_lat), leaf(student_lat)];
    let (a, b, c) = skd_losses_graph(&mut tape, vars[0], vars[1], vars[2], vars[3], vars[4], eps);
    Ok((tape.value(a).item(), tape.value(b).item(), tape.value(c).item()))
}

// ---------------------------------------------------------------------------
// Payload

pub const PAYLOAD_MAGIC: [u8; 4] = *b"SCP1";
pub const PAYLOAD_VERSION: u8 = 1;
/// magic, version, S, d_e, q, ρ×1000, offset (f64), step (f64).
pub const HEADER_BYTES: usize = 4 + 1 + 2 + 2 + 1 + 2 + 8 + 8;
pub const HEADER_BITS: u64 = 8 * HEADER_BYTES as u64;

/// Closed-form payload size: kept scalars, one bit per token, fixed header.
pub fn payload_bits(tokens: usize, dim: usize, q: u32, kept: usize) -> u64 {
    (kept * dim) as u64 * q as u64 + tokens as u64 + HEADER_BITS
}

#[derive(Clone, Debug, PartialEq)]
pub struct SemanticPayload {
    pub tokens: usize,
    pub dim: usize,
    pub quant_bits: u32,
    pub rho_milli: u16,
    pub offset: f64,
    pub step: f64,
    pub mask: KeepMask,
    /// Kept scalars as quantizer codes, row-major over kept tokens.
    pub codes: Vec<u32>,
    /// Values that fell outside `[−A, A]` and were clipped.
    pub clipped: usize,
}

impl SemanticPayload {
    pub fn bits(&self) -> u64 {
        payload_bits(self.tokens, self.dim, self.quant_bits, self.mask.count())
    }

    /// Kept scalars only, no mask or header.
    pub fn kept_bits(&self) -> u64 {
        self.codes.len() as u64 * self.quant_bits as u64
    }

    /// Bit-exact byte serialization.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_BYTES + self.tokens.div_ceil(8) + (self.kept_bits() as usize).div_ceil(8));
        out.extend_from_slice(&PAYLOAD_MAGIC);
        out.push(PAYLOAD_VERSION);
        out.extend_from_slice(&(self.tokens as u16).to_le_bytes());
        out.extend_from_slice(&(self.dim as u16).to_le_bytes());
        out.push(self.quant_bits as u8);
        out.extend_from_slice(&self.rho_milli.to_le_bytes());
        out.extend_from_slice(&self.offset.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        let mut bits = BitWriter::default();
        for &b in &self.mask.bits {
            bits.put(b as u64, 1);
        }
        out.extend(bits.finish());
        let mut bits = BitWriter::default();
        for &c in &self.codes {
            bits.put(c as u64, self.quant_bits);
        }
        out.extend(bits.finish());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: String| Error::Format { file: "<payload>".into(), msg };
        if bytes.len() < HEADER_BYTES {
            return Err(bad(format!("{} bytes is shorter than the header", bytes.len())));
        }
        if bytes[..4] != PAYLOAD_MAGIC {
            return Err(bad("bad magic".into()));
        }
        if bytes[4] != PAYLOAD_VERSION {
            return Err(bad(format!("unsupported version {}", bytes[4])));
        }
        let u16_at = |i: usize| u16::from_le_bytes([bytes[i], bytes[i + 1]]);
        let f64_at = |i: usize| f64::from_le_bytes(bytes[i..i + 8].try_into().expect("eight bytes"));
        let tokens = u16_at(5) as usize;
        let dim = u16_at(7) as usize;
        let quant_bits = bytes[9] as u32;
        let rho_milli = u16_at(10);
        let (offset, step) = (f64_at(12), f64_at(20));
        if !(1..=32).contains(&quant_bits) {
            return Err(bad(format!("{quant_bits} quantization bits")));
        }
        let mask_bytes = tokens.div_ceil(8);
        let mut pos = HEADER_BYTES;
        if bytes.len() < pos + mask_bytes {
            return Err(bad("truncated keep mask".into()));
        }
        let mut r = BitReader::new(&bytes[pos..pos + mask_bytes]);
        let bits = (0..tokens).map(|_| r.get(1) == 1).collect();
        let mask = KeepMask { bits };
        pos += mask_bytes;
        let n = mask.count() * dim;
        let code_bytes = (n * quant_bits as usize).div_ceil(8);
        if bytes.len() != pos + code_bytes {
            return Err(bad(format!("expected {} payload bytes, found {}", pos + code_bytes, bytes.len())));
        }
        let mut r = BitReader::new(&bytes[pos..]);
        let codes = (0..n).map(|_| r.get(quant_bits) as u32).collect();
        Ok(Self { tokens, dim, quant_bits, rho_milli, offset, step, mask, codes, clipped: 0 })
    }
}

#[derive(Default)]
struct BitWriter {
    bytes: Vec<u8>,
    used: u32,
}

impl BitWriter {
    /// Appends the low `n` bits of `v`, least significant first.
    fn put(&mut self, v: u64, n: u32) {
        for i in 0..n {
            if self.used % 8 == 0 {
                self.bytes.push(0);
            }
            if (v >> i) & 1 == 1 {
                *self.bytes.last_mut().expect("byte pushed") |= 1 << (self.used % 8);
            }
            self.used += 1;
        }
    }

    fn finish(self) -> Vec<u8> {
        self.bytes
    }
}

struct BitReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> BitReader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn get(&mut self, n: u32) -> u64 {
        let mut v = 0u64;
        for i in 0..n {
            let bit = (self.bytes[self.pos / 8] >> (self.pos % 8)) & 1;
            v |= (bit as u64) << i;
            self.pos += 1;
        }
        v
    }
}

/// Quantizes kept rows of `E⁻` to `q`-bit codes on `[−A, A]`.
pub fn pack_payload<T: Scalar>(e: &Latents<T>, m: &KeepMask, cfg: &CodecConfig) -> Result<SemanticPayload> {
    check_latents(e, m, cfg)?;
    let levels = ((1u64 << cfg.quant_bits) - 1) as f64;
    let (offset, step) = (-cfg.clip, 2.0 * cfg.clip / levels);
    let mut codes = Vec::with_capacity(m.count() * e.dim);
    let mut clipped = 0;
    for (i, _) in m.bits.iter().enumerate().filter(|(_, &k)| k) {
        for &v in e.row(i) {
            let v = v.f64();
            if !v.is_finite() {
                return Err(Error::Numeric(format!("non-finite latent in token {i}")));
            }
            if v.abs() > cfg.clip {
                clipped += 1;
            }
            let c = ((v - offset) / step).round().clamp(0.0, levels);
            codes.push(c as u32);
        }
    }
    Ok(SemanticPayload {
        tokens: e.tokens,
        dim: e.dim,
        quant_bits: cfg.quant_bits,
        rho_milli: rho_milli(cfg.keep_rate),
        offset,
        step,
        mask: m.clone(),
        codes,
        clipped,
    })
}

/// Dequantized latents with zero rows at dropped tokens.
pub fn unpack_payload<T: Scalar>(payload: &SemanticPayload) -> Result<(Latents<T>, KeepMask)> {
    let (s, d) = (payload.tokens, payload.dim);
    if payload.mask.len() != s || payload.codes.len() != payload.mask.count() * d {
        return Err(Error::invalid("payload codes do not match its keep mask"));
    }
    let mut data = vec![T::zero(); s * d];
    let mut codes = payload.codes.iter();
    for (i, _) in payload.mask.bits.iter().enumerate().filter(|(_, &k)| k) {
        for v in &mut data[i * d..(i + 1) * d] {
            *v = T::of(payload.offset + *codes.next().expect("length checked") as f64 * payload.step);
        }
    }
    Ok((Latents::new(s, d, data)?, payload.mask.clone()))
}

// ---------------------------------------------------------------------------
// Link

/// Result of sending one image through the codec and a link.
pub struct CodecTransfer<T> {
    pub image: Image<T>,
    pub payload: SemanticPayload,
    pub symbols: usize,
}

/// encode → mask → pack/unpack → channel code → `link` → decode.
pub fn transfer_image<T: Scalar>(
    image: &Image<T>,
    codec: &SemanticCodec<T>,
    mode: CodecMode,
    link: &mut dyn FnMut(&[f64]) -> Result<Vec<f64>>,
) -> Result<CodecTransfer<T>> {
    let (e, logits) = encode(image, codec)?;
    let m = match mode {
        CodecMode::Teacher => KeepMask::ones(e.tokens),
        CodecMode::Student => binarize_mask(&logits, codec.cfg.keep_rate)?,
    };
    let e_minus = compress(&e, &m)?;
    let payload = pack_payload(&e_minus, &m, &codec.cfg)?;
    let (e_q, m) = unpack_payload::<T>(&payload)?;
    let x = channel_encode(&e_q, &m, codec)?;
    let y = link(&x)?;
    if y.len() != x.len() {
        return Err(Error::invalid(format!("link returned {} values for {} sent", y.len(), x.len())));
    }
    let e_hat = channel_decode(&y, &m, codec)?;
    let out = decode(&e_hat, codec)?;
    Ok(CodecTransfer { image: out, payload, symbols: x.len().div_ceil(2) })
}

// ---------------------------------------------------------------------------
// Training

/// Simulated link used during training: fading grid and an SNR range
/// sampled uniformly per image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainChannel {
    pub model: ChannelModel,
    pub rows: usize,
    pub cols: usize,
    pub snr_db: (f64, f64),
}

impl Default for TrainChannel {
    fn default() -> Self {
        Self { model: ChannelModel::Rician { k: 3.0 }, rows: 16, cols: 16, snr_db: (0.0, 25.0) }
    }
}

impl TrainChannel {
    /// Equalized disturbance `N/H` for `n` reals under perfect CSI.
    pub fn disturbance(&self, n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        let (lo, hi) = self.snr_db;
        let snr = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
        let chan = draw_channel(self.model, self.rows, self.cols, rng.gen())?;
        let y = transmit(&vec![0.0; n], &chan, snr, rng.gen())?;
        equalize(&y, &chan, EqualizeMode::Elementwise)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CodecTrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub clip_norm: f64,
    pub channel: TrainChannel,
    pub seed: u64,
}

impl Default for CodecTrainConfig {
    fn default() -> Self {
        Self { epochs: 40, batch: 2, lr: 1e-3, clip_norm: 1.0, channel: TrainChannel::default(), seed: 0 }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CodecReport {
    pub initial_teacher_loss: f64,
    pub teacher_losses: Vec<f64>,
    pub student_losses: Vec<f64>,
    pub kd_losses: Vec<f64>,
}

/// Mean squared error of batched sigmoid patches against `truth`.
fn truth_leaf<T: Scalar>(tape: &mut Tape<T>, images: &[&Image<T>], cfg: &CodecConfig) -> Var {
    let mut data = Vec::new();
    for im in images {
        data.extend(patchify(im, cfg.patch));
    }
    tape.leaf(Tensor::new(vec![images.len() * cfg.tokens(), cfg.patch_dim()], data))
}

/// Alternating teacher and student passes per epoch.
pub fn train_codec<T: Scalar>(
    images: &[Image<T>],
    cfg: &CodecConfig,
    train: &CodecTrainConfig,
) -> Result<(SemanticCodec<T>, CodecReport)> {
    if train.epochs == 0 {
        return Err(Error::invalid("codec training needs at least one epoch"));
    }
    if images.is_empty() {
        return Err(Error::invalid("codec training needs images"));
    }
    let mut codec = SemanticCodec::<T>::new(cfg.clone(), train.seed)?;
    for im in images {
        codec.check_image(im)?;
    }
    let mut opt = Adam::<T>::new(train.lr).with_clip(train.clip_norm);
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed.wrapping_add(0x5eed));
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut report = CodecReport::default();
    let batch = train.batch.max(1);
    let s = cfg.tokens();
    for epoch in 0..train.epochs {
        let diverged = |what: &str, v: f64| Error::Divergence { epoch, msg: format!("{what} loss became {v}") };

        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut steps = 0;
        for idx in order.chunks(batch) {
            let batch_imgs: Vec<&Image<T>> = idx.iter().map(|&i| &images[i]).collect();
            let mut tape = Tape::new();
            let p = codec.params.load(&mut tape);
            let mut noise = |_: usize, n: usize| train.channel.disturbance(n, &mut rng);
            let g = codec.forward_graph(&mut tape, &p, &batch_imgs, CodecMode::Teacher, MaskMode::Train, &mut noise)?;
            let truth = truth_leaf(&mut tape, &batch_imgs, cfg);
            let loss = tape.mse(truth, g.output);
            let lv = tape.value(loss).item().f64();
            if !lv.is_finite() {
                return Err(diverged("teacher", lv));
            }
            if epoch == 0 && steps == 0 {
                report.initial_teacher_loss = lv;
            }
            let grads = tape.backward(loss);
            opt.step(&mut codec.params, &grads);
            total += lv;
            steps += 1;
        }
        report.teacher_losses.push(total / steps as f64);

        order.shuffle(&mut rng);
        let (mut stu, mut kd, mut steps) = (0.0, 0.0, 0);
        for idx in order.chunks(batch) {
            let batch_imgs: Vec<&Image<T>> = idx.iter().map(|&i| &images[i]).collect();
            let nb = batch_imgs.len();
            let (t_img, t_lat) = {
                let mut tape = Tape::new();
                let p = codec.params.load(&mut tape);
                let mut noise = |_: usize, n: usize| train.channel.disturbance(n, &mut rng);
                let g = codec.forward_graph(&mut tape, &p, &batch_imgs, CodecMode::Teacher, MaskMode::Infer, &mut noise)?;
                (tape.value(g.output).clone(), tape.value(g.received).clone())
            };
            let mut tape = Tape::new();
            let p = codec.params.load(&mut tape);
            let mut noise = |_: usize, n: usize| train.channel.disturbance(n, &mut rng);
            let g = codec.forward_graph(&mut tape, &p, &batch_imgs, CodecMode::Student, MaskMode::Train, &mut noise)?;
            let truth = truth_leaf(&mut tape, &batch_imgs, cfg);
            let t_img = tape.leaf(t_img);
            let t_lat = tape.leaf(t_lat);
            let l_tech = tape.mse(truth, t_img);
            let l_stu = tape.mse(truth, g.output);
            let mut kls = Vec::with_capacity(nb);
            for b in 0..nb {
                let a = tape.slice_rows(t_lat, b * s, s);
                // Distillation reaches the network only through the keep mask.
                let c = tape.slice_rows(g.received, b * s, s);
                let raw = tape.value(c).clone();
                let raw = tape.leaf(raw);
                let mb = tape.slice_rows(g.mask, b * s, s);
                let c = tape.mul_col(raw, mb);
                kls.push(kl_softmax_graph(&mut tape, a, c));
            }
            let kl = if nb == 1 { kls[0] } else { tape.concat_rows(&kls) };
            let kl = tape.mean(kl);
            // The normalizer is held constant: differentiating through it
            // would reward a larger student loss.
            let denom = tape.value(l_tech).item() + tape.value(l_stu).item() + T::of(KD_EPS);
            let l_kd = tape.scale(kl, T::one() / denom);
            let loss = tape.add(l_stu, l_kd);
            let (sv, kv) = (tape.value(l_stu).item().f64(), tape.value(l_kd).item().f64());
            if !(sv.is_finite() && kv.is_finite()) {
                return Err(diverged("student", sv + kv));
            }
            let grads = tape.backward(loss);
            opt.step(&mut codec.params, &grads);
            stu += sv;
            kd += kv;
            steps += 1;
        }
        report.student_losses.push(stu / steps as f64);
        report.kd_losses.push(kd / steps as f64);
        if !codec.params.is_finite() {
            return Err(Error::Divergence { epoch, msg: "non-finite codec parameters".into() });
        }
    }
    Ok((codec, report))
}

/// Noise-free forward of a batch, for inspection and tests.
pub fn forward_values<T: Scalar>(
    codec: &SemanticCodec<T>,
    images: &[&Image<T>],
    mode: CodecMode,
    mask_mode: MaskMode,
) -> Result<(Vec<T>, Vec<T>)> {
    let mut tape = Tape::new();
    let p = codec.params.load(&mut tape);
    let g = codec.forward_graph(&mut tape, &p, images, mode, mask_mode, &mut no_noise)?;
    Ok((tape.data(g.output).to_vec(), tape.data(g.received).to_vec()))
}
