//! Post-ablation image generator.
//!
//! Two convolutional encoders map the pre-image and the parameter maps to
//! `[C, Hb, Wb]` bottlenecks, a single-head cross-attention block fuses them
//! (queries from the pre-image, keys and values from the parameters), and a
//! decoder produces the predicted post-image, from which a small convolutional
//! head extracts a soft scar map.
//!
//! All tensors are batched NCHW. Flattening a bottleneck to `[N, C]` is
//! row-major over spatial positions.

use std::path::Path;

use candle_core::{DType, Tensor, D};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use ndarray::{Array2, Array3, ArrayView3};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SofaError};
use crate::hash::{config_hash, sha256_hex};
use crate::io::{read_json, write_json_file, FORMAT_VERSION};
use crate::nn::{
    device, load_matrix, scalar, sigmoid, softmax_last, Conv2d, Init, Mode, ParamStore, TensorEntry,
};
use crate::study::{RgbImage, ScarMask, Study, ViewSample, NUM_PARAM_CHANNELS};
use crate::synth::rng_for;

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const WEIGHTS_FILE: &str = "generator.bin";

/// Pre-image values are clamped to `[BASE_CLAMP, 1 - BASE_CLAMP]` before
/// taking their logit.
const BASE_CLAMP: f64 = 1e-3;

const LOGIT_CLAMP: f64 = 30.0;

const RESIDUAL_INIT_GAIN: f64 = 0.1;

/// Fusion projections start near scaled identities. With the shared position
/// code in both bottlenecks, each query then initially attends to keys at its
/// own location.
const QK_INIT_GAIN: f64 = 3.0;

/// Which inputs the generator sees. `ParamsOnly` replaces the pre-image with
/// zeros everywhere, so it never reaches the output.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputMode {
    Fusion,
    ParamsOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub resolution: usize,
    /// Bottleneck channels `C`.
    pub channels: usize,
    /// Output width of each stride-2 encoder block; the length is the depth.
    pub encoder_widths: Vec<usize>,
    /// Width of each upsampling stage of the decoder; same length as the encoder.
    pub decoder_widths: Vec<usize>,
    pub mask_hidden: usize,
    pub dice_weight: f64,
    pub dice_eps: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub inputs: InputMode,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            resolution: 256,
            channels: 128,
            encoder_widths: vec![32, 64, 128, 128],
            decoder_widths: vec![128, 64, 32, 16],
            mask_hidden: 16,
            dice_weight: 1.0,
            dice_eps: 1e-6,
            learning_rate: 1e-3,
            epochs: 50,
            batch_size: 4,
            seed: 0,
            inputs: InputMode::Fusion,
        }
    }
}

impl GeneratorConfig {
    /// Desk-scale model for 64 px views: two blocks, `C = 32`, 16x16 bottleneck.
    pub fn tiny() -> Self {
        Self {
            resolution: 64,
            channels: 32,
            encoder_widths: vec![16, 32],
            decoder_widths: vec![16, 8],
            epochs: 20,
            ..Self::default()
        }
    }

    /// Smallest model used by gradient checks: 8 px input, `C = 4`, `N = 4`.
    pub fn probe() -> Self {
        Self {
            resolution: 8,
            channels: 4,
            encoder_widths: vec![3, 4],
            decoder_widths: vec![4, 3],
            mask_hidden: 2,
            epochs: 1,
            ..Self::default()
        }
    }

    pub fn depth(&self) -> usize {
        self.encoder_widths.len()
    }

    pub fn bottleneck(&self) -> (usize, usize) {
        let s = self.resolution >> self.depth();
        (s, s)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(SofaError::Config(m.to_string()));
        if self.channels == 0 {
            return fail("channels must be positive");
        }
        if self.encoder_widths.is_empty() || self.encoder_widths.contains(&0) {
            return fail("encoder widths must be nonempty and positive");
        }
        if self.decoder_widths.len() != self.encoder_widths.len()
            || self.decoder_widths.contains(&0)
        {
            return fail("decoder widths must match encoder depth and be positive");
        }
        let scale = 1usize << self.depth();
        if self.resolution == 0 || !self.resolution.is_multiple_of(scale) {
            return fail("resolution must be a positive multiple of 2^depth");
        }
        if self.mask_hidden == 0 {
            return fail("mask_hidden must be positive");
        }
        if self.dice_weight.is_nan()
            || self.dice_weight < 0.0
            || self.dice_eps.is_nan()
            || self.dice_eps <= 0.0
        {
            return fail("dice weight must be >= 0 and eps > 0");
        }
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 || self.batch_size == 0 {
            return fail("learning rate and batch size must be positive");
        }
        Ok(())
    }

    pub fn hash(&self) -> Result<String> {
        config_hash(self)
    }
}

/// Cross-attention projections, each `[C, C]`, applied per position as
/// `q_i = W_q z_i`.
#[derive(Clone, Debug)]
pub struct FusionWeights {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
}

impl FusionWeights {
    pub fn channels(&self) -> usize {
        self.wq.dims()[0]
    }

    fn check(&self, c: usize) -> Result<()> {
        for (name, w) in [
            ("wq", &self.wq),
            ("wk", &self.wk),
            ("wv", &self.wv),
            ("wo", &self.wo),
        ] {
            if w.dims() != [c, c] {
                return Err(SofaError::Shape(format!(
                    "fusion {name} is {:?}, features have C = {c}",
                    w.dims()
                )));
            }
        }
        Ok(())
    }
}

/// `[B, C, Hb, Wb] -> [B, N, C]`
fn flatten_positions(z: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = z.dims4()?;
    Ok(z.reshape((b, c, h * w))?.transpose(1, 2)?.contiguous()?)
}

fn project(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    Ok(x.broadcast_matmul(&w.t()?)?)
}

fn attention_logits(z_pre: &Tensor, z_feat: &Tensor, w: &FusionWeights) -> Result<Tensor> {
    let (b, c, h, wd) = z_pre.dims4()?;
    if z_feat.dims() != [b, c, h, wd] {
        return Err(SofaError::Shape(format!(
            "z_pre {:?} vs z_feat {:?}",
            z_pre.dims(),
            z_feat.dims()
        )));
    }
    w.check(c)?;
    let q = project(&flatten_positions(z_pre)?, &w.wq)?;
    let k = project(&flatten_positions(z_feat)?, &w.wk)?;
    Ok((q.matmul(&k.transpose(1, 2)?.contiguous()?)? / (c as f64).sqrt())?)
}

/// Attention weights `[B, N, N]`; row `i` is the distribution of query `i`
/// over keys.
pub fn attention_weights(z_pre: &Tensor, z_feat: &Tensor, w: &FusionWeights) -> Result<Tensor> {
    softmax_last(&attention_logits(z_pre, z_feat, w)?)
}

/// `softmax(Q K^T / sqrt(C)) V`, projected by `W_o` and reshaped back to
/// `[B, C, Hb, Wb]`.
pub fn cross_attention_fuse(z_pre: &Tensor, z_feat: &Tensor, w: &FusionWeights) -> Result<Tensor> {
    let (b, c, h, wd) = z_pre.dims4()?;
    let attn = attention_weights(z_pre, z_feat, w)?;
    let v = project(&flatten_positions(z_feat)?, &w.wv)?;
    let out = project(&attn.matmul(&v)?, &w.wo)?;
    Ok(out.transpose(1, 2)?.reshape((b, c, h, wd))?)
}

/// Per-sample `1 - (2 sum(m_hat m) + eps) / (sum(m_hat) + sum(m) + eps)`,
/// summing over every non-batch element. Returns `[B]`.
pub fn dice_term(m_hat: &Tensor, m: &Tensor, eps: f64) -> Result<Tensor> {
    if m_hat.dims() != m.dims() {
        return Err(SofaError::Shape(format!(
            "{:?} vs {:?}",
            m_hat.dims(),
            m.dims()
        )));
    }
    let b = m_hat.dims()[0];
    let p = m_hat.reshape((b, ()))?;
    let t = m.reshape((b, ()))?;
    let inter = (p.mul(&t)?.sum(1)? * 2.0)?;
    let denom = (p.sum(1)? + t.sum(1)?)?;
    let ratio = ((inter + eps)? / (denom + eps)?)?;
    Ok(ratio.affine(-1.0, 1.0)?)
}

/// Mean absolute error over every element plus `lambda` times the mean
/// per-sample dice term.
pub fn phase1_loss(
    post_hat: &Tensor,
    post: &Tensor,
    m_hat: &Tensor,
    m: &Tensor,
    lambda: f64,
    eps: f64,
) -> Result<Tensor> {
    if post_hat.dims() != post.dims() {
        return Err(SofaError::Shape(format!(
            "{:?} vs {:?}",
            post_hat.dims(),
            post.dims()
        )));
    }
    let l1 = (post_hat - post)?.abs()?.mean_all()?;
    let dice = dice_term(m_hat, m, eps)?.mean_all()?;
    Ok((l1 + (dice * lambda)?)?)
}

/// Fixed 2D sinusoidal position code `[1, C, h, w]`, scaled by 0.5.
fn position_code(c: usize, h: usize, w: usize, dtype: DType) -> Result<Tensor> {
    let mut data = vec![0f64; c * h * w];
    for k in 0..c {
        let band = (k / 4) as f64;
        let freq = std::f64::consts::PI / 2f64.powf(band);
        for i in 0..h {
            for j in 0..w {
                let v = match k % 4 {
                    0 => (freq * i as f64).sin(),
                    1 => (freq * i as f64).cos(),
                    2 => (freq * j as f64).sin(),
                    _ => (freq * j as f64).cos(),
                };
                data[(k * h + i) * w + j] = 0.5 * v;
            }
        }
    }
    Ok(Tensor::from_vec(data, (1, c, h, w), &device())?.to_dtype(dtype)?)
}

#[derive(Clone, Debug)]
struct Encoder {
    blocks: Vec<(Conv2d, Conv2d)>,
    proj: Conv2d,
    position: Tensor,
    in_channels: usize,
}

impl Encoder {
    fn register(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        c_in: usize,
        cfg: &GeneratorConfig,
    ) -> Result<()> {
        let mut prev = c_in;
        for (i, &w) in cfg.encoder_widths.iter().enumerate() {
            Conv2d::register(
                store,
                init,
                &format!("{name}.block{i}.down"),
                (prev, w, 3),
                0.0,
            )?;
            Conv2d::register(
                store,
                init,
                &format!("{name}.block{i}.conv"),
                (w, w, 3),
                0.0,
            )?;
            prev = w;
        }
        Conv2d::register(
            store,
            init,
            &format!("{name}.proj"),
            (prev, cfg.channels, 1),
            0.0,
        )
    }

    fn load(
        store: &ParamStore,
        name: &str,
        c_in: usize,
        cfg: &GeneratorConfig,
        mode: Mode,
    ) -> Result<Self> {
        let blocks = (0..cfg.depth())
            .map(|i| {
                Ok((
                    Conv2d::load(store, &format!("{name}.block{i}.down"), 2, mode)?,
                    Conv2d::load(store, &format!("{name}.block{i}.conv"), 1, mode)?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        let (hb, wb) = cfg.bottleneck();
        Ok(Self {
            blocks,
            proj: Conv2d::load(store, &format!("{name}.proj"), 1, mode)?,
            position: position_code(cfg.channels, hb, wb, store.dtype())?,
            in_channels: c_in,
        })
    }

    fn forward(&self, x: &Tensor, resolution: usize) -> Result<Tensor> {
        let dims = x.dims();
        if dims.len() != 4
            || dims[1] != self.in_channels
            || dims[2] != resolution
            || dims[3] != resolution
        {
            return Err(SofaError::Shape(format!(
                "encoder expects [B, {}, {resolution}, {resolution}], got {dims:?}",
                self.in_channels
            )));
        }
        let mut h = x.clone();
        for (down, conv) in &self.blocks {
            h = down.forward(&h)?.silu()?;
            h = conv.forward(&h)?.silu()?;
        }
        Ok(self.proj.forward(&h)?.broadcast_add(&self.position)?)
    }
}

/// Sigmoid of logits clamped to `[-LOGIT_CLAMP, LOGIT_CLAMP]`. Saturated
/// outputs would otherwise produce subnormal gradients, which are very slow on
/// CPU.
fn bounded_sigmoid(x: &Tensor) -> Result<Tensor> {
    sigmoid(&x.clamp(-LOGIT_CLAMP, LOGIT_CLAMP)?)
}

/// Nearest-neighbour 2x upsampling written as a broadcast, whose backward is a
/// plain sum.
fn upsample2(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x.reshape((b, c, h, 1, w, 1))?
        .broadcast_as((b, c, h, 2, w, 2))?
        .reshape((b, c, 2 * h, 2 * w))?)
}

#[derive(Clone, Debug)]
struct Decoder {
    stages: Vec<Conv2d>,
    residual: Conv2d,
}

impl Decoder {
    fn register(store: &mut ParamStore, init: &mut Init, cfg: &GeneratorConfig) -> Result<()> {
        let mut prev = cfg.channels;
        for (i, &w) in cfg.decoder_widths.iter().enumerate() {
            Conv2d::register(store, init, &format!("dec.stage{i}"), (prev, w, 3), 0.0)?;
            prev = w;
        }
        Conv2d::register_scaled(
            store,
            init,
            "dec.residual",
            (prev, 3, 3),
            RESIDUAL_INIT_GAIN,
        )
    }

    fn load(store: &ParamStore, cfg: &GeneratorConfig, mode: Mode) -> Result<Self> {
        Ok(Self {
            stages: (0..cfg.depth())
                .map(|i| Conv2d::load(store, &format!("dec.stage{i}"), 1, mode))
                .collect::<Result<_>>()?,
            residual: Conv2d::load(store, "dec.residual", 1, mode)?,
        })
    }

    /// Output is `sigmoid(base_logit + residual)`. The residual head starts
    /// small, so an untrained decoder stays close to its base image.
    fn forward(&self, fused: &Tensor, base_logit: &Tensor) -> Result<Tensor> {
        let mut h = fused.clone();
        for stage in &self.stages {
            h = stage.forward(&upsample2(&h)?)?.silu()?;
        }
        bounded_sigmoid(&base_logit.add(&self.residual.forward(&h)?)?)
    }
}

#[derive(Clone, Debug)]
pub struct MaskHead {
    pub hidden: Conv2d,
    pub out: Conv2d,
}

impl MaskHead {
    /// Logits `h(x; psi)`.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        self.out.forward(&self.hidden.forward(x)?.silu()?)
    }
}

#[derive(Clone, Debug)]
struct Net {
    enc_pre: Encoder,
    enc_feat: Encoder,
    fusion: FusionWeights,
    decoder: Decoder,
    mask: MaskHead,
}

impl Net {
    fn load(store: &ParamStore, cfg: &GeneratorConfig, mode: Mode) -> Result<Self> {
        Ok(Self {
            enc_pre: Encoder::load(store, "enc_pre", 3, cfg, mode)?,
            enc_feat: Encoder::load(store, "enc_feat", NUM_PARAM_CHANNELS, cfg, mode)?,
            fusion: FusionWeights {
                wq: load_matrix(store, "fusion.wq", mode)?,
                wk: load_matrix(store, "fusion.wk", mode)?,
                wv: load_matrix(store, "fusion.wv", mode)?,
                wo: load_matrix(store, "fusion.wo", mode)?,
            },
            decoder: Decoder::load(store, cfg, mode)?,
            mask: MaskHead {
                hidden: Conv2d::load(store, "mask.hidden", 1, mode)?,
                out: Conv2d::load(store, "mask.out", 1, mode)?,
            },
        })
    }
}

pub struct GeneratorOutput {
    pub post: Tensor,
    pub mask: Tensor,
    pub fused: Tensor,
}

/// Generator parameters, config and step counter. Cloning shares the
/// underlying parameter storage.
#[derive(Clone)]
pub struct GeneratorState {
    config: GeneratorConfig,
    store: ParamStore,
    net: Net,
    pub step: u64,
}

impl GeneratorState {
    /// Fresh model with weights drawn from `cfg.seed`.
    pub fn new(cfg: &GeneratorConfig, dtype: DType) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new(dtype);
        let mut init = Init::new(rng_for(cfg.seed, "generator-init", 0));
        Encoder::register(&mut store, &mut init, "enc_pre", 3, cfg)?;
        Encoder::register(&mut store, &mut init, "enc_feat", NUM_PARAM_CHANNELS, cfg)?;
        let c = cfg.channels;
        let noise = 0.1 * (3.0 / c as f64).sqrt();
        for (name, diag) in [
            ("fusion.wq", QK_INIT_GAIN),
            ("fusion.wk", QK_INIT_GAIN),
            ("fusion.wv", 1.0),
            ("fusion.wo", 1.0),
        ] {
            let mut w = init.uniform(c * c, noise);
            for i in 0..c {
                w[i * c + i] += diag;
            }
            store.add(name, &[c, c], w)?;
        }
        Decoder::register(&mut store, &mut init, cfg)?;
        Conv2d::register(
            &mut store,
            &mut init,
            "mask.hidden",
            (3, cfg.mask_hidden, 3),
            0.0,
        )?;
        Conv2d::register(
            &mut store,
            &mut init,
            "mask.out",
            (cfg.mask_hidden, 1, 3),
            0.0,
        )?;
        let net = Net::load(&store, cfg, Mode::Train)?;
        Ok(Self {
            config: cfg.clone(),
            store,
            net,
            step: 0,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn fusion(&self) -> &FusionWeights {
        &self.net.fusion
    }

    pub fn mask_head(&self) -> &MaskHead {
        &self.net.mask
    }

    /// Content hash of every parameter; identifies the model to downstream
    /// stages.
    pub fn hash(&self) -> Result<String> {
        self.store.hash()
    }

    /// Same weights with gradient tracking switched off.
    pub fn frozen(&self) -> Result<Self> {
        Ok(Self {
            net: Net::load(&self.store, &self.config, Mode::Frozen)?,
            ..self.clone()
        })
    }

    /// Independent copy converted to `dtype`.
    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        let out = Self::new(&self.config, dtype)?;
        out.store.load_from(&self.store)?;
        Ok(Self {
            step: self.step,
            ..out
        })
    }

    fn check_image(&self, x: &Tensor, channels: usize, what: &str) -> Result<()> {
        let r = self.config.resolution;
        let d = x.dims();
        if d.len() != 4 || d[1] != channels || d[2] != r || d[3] != r {
            return Err(SofaError::Shape(format!(
                "{what} expects [B, {channels}, {r}, {r}], got {d:?}"
            )));
        }
        Ok(())
    }

    fn encoder_input(&self, pre: &Tensor) -> Result<Tensor> {
        Ok(match self.config.inputs {
            InputMode::Fusion => pre.clone(),
            InputMode::ParamsOnly => pre.zeros_like()?,
        })
    }

    fn base_logit(&self, pre: &Tensor) -> Result<Tensor> {
        let p = self
            .encoder_input(pre)?
            .clamp(BASE_CLAMP, 1.0 - BASE_CLAMP)?;
        Ok((p.log()? - p.affine(-1.0, 1.0)?.log()?)?)
    }

    /// `[B, 3, H, W] -> [B, C, Hb, Wb]`
    pub fn encode_pre(&self, pre: &Tensor) -> Result<Tensor> {
        self.check_image(pre, 3, "encode_pre")?;
        self.net
            .enc_pre
            .forward(&self.encoder_input(pre)?, self.config.resolution)
    }

    /// `[B, 4, H, W] -> [B, C, Hb, Wb]`
    pub fn encode_feat(&self, feat: &Tensor) -> Result<Tensor> {
        self.check_image(feat, NUM_PARAM_CHANNELS, "encode_feat")?;
        self.net.enc_feat.forward(feat, self.config.resolution)
    }

    pub fn fuse(&self, z_pre: &Tensor, z_feat: &Tensor) -> Result<Tensor> {
        cross_attention_fuse(z_pre, z_feat, &self.net.fusion)
    }

    /// Decodes a fused bottleneck into a residual on top of `pre`.
    pub fn decode(&self, fused: &Tensor, pre: &Tensor) -> Result<Tensor> {
        let (hb, wb) = self.config.bottleneck();
        let d = fused.dims();
        if d.len() != 4 || d[1] != self.config.channels || d[2] != hb || d[3] != wb {
            return Err(SofaError::Shape(format!(
                "decode expects [B, {}, {hb}, {wb}], got {d:?}",
                self.config.channels
            )));
        }
        self.check_image(pre, 3, "decode")?;
        self.net.decoder.forward(fused, &self.base_logit(pre)?)
    }

    /// `sigmoid(h(post_hat))`, `[B, 1, H, W]`.
    pub fn extract_scar(&self, post_hat: &Tensor) -> Result<Tensor> {
        self.check_image(post_hat, 3, "extract_scar")?;
        bounded_sigmoid(&self.net.mask.logits(post_hat)?)
    }

    pub fn forward(&self, pre: &Tensor, feat: &Tensor) -> Result<GeneratorOutput> {
        let fused = self.fuse(&self.encode_pre(pre)?, &self.encode_feat(feat)?)?;
        let post = self.decode(&fused, pre)?;
        let mask = self.extract_scar(&post)?;
        Ok(GeneratorOutput { post, mask, fused })
    }

    /// Global-average-pooled fused bottleneck, `[B, C]`.
    pub fn embed(&self, pre: &Tensor, feat: &Tensor) -> Result<Tensor> {
        let fused = self.fuse(&self.encode_pre(pre)?, &self.encode_feat(feat)?)?;
        Ok(fused.mean((2, 3))?)
    }

    /// Predicted post-image and soft scar map for each sample.
    pub fn predict(&self, samples: &[&ViewSample]) -> Result<Vec<(RgbImage, ScarMask)>> {
        let frozen = self.frozen()?;
        let pre = stack_images(samples.iter().map(|s| s.pre.0.view()), self.dtype())?;
        let feat = stack_images(
            samples.iter().map(|s| s.params.channels.view()),
            self.dtype(),
        )?;
        let out = frozen.forward(&pre, &feat)?;
        (0..samples.len())
            .map(|i| {
                let post = tensor_to_array3(&out.post.get(i)?)?;
                let mask = tensor_to_array3(&out.mask.get(i)?)?;
                let mask = mask.index_axis_move(ndarray::Axis(0), 0);
                Ok((RgbImage(post), ScarMask(mask)))
            })
            .collect()
    }

    pub fn save(&self, dir: &Path, report: Option<&Phase1Report>) -> Result<String> {
        std::fs::create_dir_all(dir)?;
        let (blob, tensors) = self.store.to_blob()?;
        std::fs::write(dir.join(WEIGHTS_FILE), &blob)?;
        let hash = self.hash()?;
        let ckpt = GeneratorCheckpoint {
            format_version: FORMAT_VERSION,
            kind: "generator".into(),
            config_hash: self.config.hash()?,
            config: self.config.clone(),
            seed: self.config.seed,
            step: self.step,
            model_hash: hash.clone(),
            blob_sha256: sha256_hex(&blob),
            report: report.cloned(),
            tensors,
        };
        write_json_file(&dir.join(CHECKPOINT_FILE), &ckpt)?;
        Ok(hash)
    }

    pub fn load(dir: &Path) -> Result<(Self, GeneratorCheckpoint)> {
        let ckpt: GeneratorCheckpoint = read_json(&dir.join(CHECKPOINT_FILE))?;
        if ckpt.kind != "generator" || ckpt.format_version != FORMAT_VERSION {
            return Err(SofaError::Format {
                path: dir.join(CHECKPOINT_FILE).display().to_string(),
                reason: format!("not a v{FORMAT_VERSION} generator checkpoint"),
            });
        }
        let blob = std::fs::read(dir.join(WEIGHTS_FILE))?;
        let found = sha256_hex(&blob);
        if found != ckpt.blob_sha256 {
            return Err(SofaError::HashMismatch {
                expected: ckpt.blob_sha256.clone(),
                found,
            });
        }
        let mut state = Self::new(&ckpt.config, DType::F32)?;
        state.store.load_blob(&blob, &ckpt.tensors)?;
        state.step = ckpt.step;
        Ok((state, ckpt))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GeneratorCheckpoint {
    pub format_version: u32,
    pub kind: String,
    pub config_hash: String,
    pub config: GeneratorConfig,
    pub seed: u64,
    pub step: u64,
    pub model_hash: String,
    pub blob_sha256: String,
    pub report: Option<Phase1Report>,
    pub tensors: Vec<TensorEntry>,
}

/// Stacks `[c, h, w]` arrays into a `[B, c, h, w]` tensor.
pub fn stack_images<'a>(
    arrays: impl IntoIterator<Item = ArrayView3<'a, f32>>,
    dtype: DType,
) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut shape: Option<(usize, usize, usize)> = None;
    let mut n = 0;
    for a in arrays {
        match shape {
            None => shape = Some(a.dim()),
            Some(s) if s != a.dim() => {
                return Err(SofaError::Shape(format!("{s:?} vs {:?}", a.dim())))
            }
            _ => {}
        }
        data.extend(a.iter().copied());
        n += 1;
    }
    let (c, h, w) = shape.ok_or_else(|| SofaError::InvalidValue("empty batch".into()))?;
    Ok(Tensor::from_vec(data, (n, c, h, w), &device())?.to_dtype(dtype)?)
}

pub fn tensor_to_array3(t: &Tensor) -> Result<Array3<f32>> {
    let (c, h, w) = t.dims3()?;
    let v = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    Array3::from_shape_vec((c, h, w), v).map_err(|e| SofaError::Shape(e.to_string()))
}

pub fn tensor_to_array2(t: &Tensor) -> Result<Array2<f32>> {
    let (h, w) = t.dims2()?;
    let v = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    Array2::from_shape_vec((h, w), v).map_err(|e| SofaError::Shape(e.to_string()))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Phase1Report {
    /// Full-pass training loss before the first update.
    pub initial_loss: f64,
    /// Mean minibatch loss of each epoch.
    pub loss_history: Vec<f64>,
    /// Full-pass training loss after the last update.
    pub final_loss: f64,
    pub val_loss: Option<f64>,
    pub steps: u64,
    pub train_samples: usize,
}

/// Every view of a set of studies, stacked once.
pub struct SampleBank {
    pub pre: Tensor,
    pub feat: Tensor,
    pub post: Tensor,
    pub scar: Tensor,
}

impl SampleBank {
    pub fn from_studies(studies: &[Study], dtype: DType) -> Result<Self> {
        let mut samples = Vec::new();
        for s in studies {
            for v in s.ordered_samples()? {
                if v.target.is_none() {
                    return Err(SofaError::MissingTarget(format!("{} / {}", s.id, v.view)));
                }
                samples.push(v);
            }
        }
        let targets = samples.iter().map(|s| s.target.as_ref().expect("checked"));
        let scars: Vec<Array3<f32>> = targets
            .clone()
            .map(|t| t.scar.0.clone().insert_axis(ndarray::Axis(0)))
            .collect();
        Ok(Self {
            pre: stack_images(samples.iter().map(|s| s.pre.0.view()), dtype)?,
            feat: stack_images(samples.iter().map(|s| s.params.channels.view()), dtype)?,
            post: stack_images(targets.map(|t| t.post.0.view()), dtype)?,
            scar: stack_images(scars.iter().map(|a| a.view()), dtype)?,
        })
    }

    pub fn len(&self) -> usize {
        self.pre.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn batch(&self, idx: &[u32]) -> Result<[Tensor; 4]> {
        let ix = Tensor::new(idx, &device())?;
        Ok([
            self.pre.index_select(&ix, 0)?,
            self.feat.index_select(&ix, 0)?,
            self.post.index_select(&ix, 0)?,
            self.scar.index_select(&ix, 0)?,
        ])
    }
}

fn batch_loss(gen: &GeneratorState, b: &[Tensor; 4]) -> Result<Tensor> {
    let out = gen.forward(&b[0], &b[1])?;
    let cfg = gen.config();
    phase1_loss(
        &out.post,
        &b[2],
        &out.mask,
        &b[3],
        cfg.dice_weight,
        cfg.dice_eps,
    )
}

/// Sample-weighted mean loss over a bank, without gradients.
pub fn evaluate_loss(gen: &GeneratorState, bank: &SampleBank) -> Result<f64> {
    let frozen = gen.frozen()?;
    let n = bank.len();
    let chunk = 16;
    let mut total = 0.0;
    for start in (0..n).step_by(chunk) {
        let idx: Vec<u32> = (start..(start + chunk).min(n)).map(|i| i as u32).collect();
        let loss = scalar(&batch_loss(&frozen, &bank.batch(&idx)?)?)?;
        total += loss * idx.len() as f64;
    }
    Ok(total / n as f64)
}

/// Trains a generator on every view of `train`. Sample order is reshuffled
/// each epoch from the config seed.
pub fn train_phase1(
    train: &[Study],
    val: &[Study],
    cfg: &GeneratorConfig,
) -> Result<(GeneratorState, Phase1Report)> {
    cfg.validate()?;
    let bank = SampleBank::from_studies(train, DType::F32)?;
    if bank.is_empty() {
        return Err(SofaError::InvalidValue("empty training set".into()));
    }
    if bank.pre.dims()[2] != cfg.resolution {
        return Err(SofaError::Shape(format!(
            "cohort resolution {} vs model {}",
            bank.pre.dims()[2],
            cfg.resolution
        )));
    }
    let mut gen = GeneratorState::new(cfg, DType::F32)?;
    let mut opt = AdamW::new(
        gen.store.vars(),
        ParamsAdamW {
            lr: cfg.learning_rate,
            weight_decay: 0.0,
            ..Default::default()
        },
    )?;
    let mut report = Phase1Report {
        initial_loss: evaluate_loss(&gen, &bank)?,
        train_samples: bank.len(),
        ..Default::default()
    };
    let mut order: Vec<u32> = (0..bank.len() as u32).collect();
    for epoch in 0..cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut rng_for(cfg.seed, "generator-order", epoch as u64));
        let mut sum = 0.0;
        let mut batches = 0;
        for idx in order.chunks(cfg.batch_size) {
            let loss = batch_loss(&gen, &bank.batch(idx)?)?;
            let value = scalar(&loss)?;
            if !value.is_finite() {
                return Err(SofaError::NonFiniteLoss {
                    value,
                    context: format!("generator epoch {epoch} step {}", gen.step),
                });
            }
            opt.backward_step(&loss)?;
            gen.step += 1;
            sum += value;
            batches += 1;
        }
        let mean = sum / batches as f64;
        log::info!("generator epoch {epoch}: loss {mean:.5}");
        report.loss_history.push(mean);
    }
    report.final_loss = evaluate_loss(&gen, &bank)?;
    report.steps = gen.step;
    if !val.is_empty() {
        report.val_loss = Some(evaluate_loss(
            &gen,
            &SampleBank::from_studies(val, DType::F32)?,
        )?);
    }
    Ok((gen, report))
}

/// Row sums of the attention matrix, for checking the simplex property.
pub fn attention_row_sums(z_pre: &Tensor, z_feat: &Tensor, w: &FusionWeights) -> Result<Tensor> {
    Ok(attention_weights(z_pre, z_feat, w)?.sum(D::Minus1)?)
}
