//! The conditional noise-prediction network.
//!
//! A small UNet takes the channel-concatenation of the upsampled LR
//! conditioner and the noisy latent, plus a continuous noise-scale value
//! injected through a learned embedding, and predicts the noise that was
//! mixed into the latent. Forward and reverse passes are hand-written in
//! f64; gradients are exact (verified against finite differences in the
//! tests), single-threaded, and bit-reproducible.

pub mod ops;

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array1, Array2, Array4, ArrayD, Axis, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;
use crate::tensor::ImageTensor;
use ops::*;

/// Named parameter arrays; rank 1 (biases, norm scales), rank 2 (linear
/// weights) and rank 4 (convolution kernels). Sorted iteration order makes
/// serialization and optimizer traversal deterministic.
pub type ParamStore = BTreeMap<String, ArrayD<f64>>;

/// Architecture of the denoiser. Channel counts per stage are
/// `base_channels * channel_multipliers[i]`; each downsample halves the
/// spatial grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DenoiserConfig {
    /// Channels of the images being super-resolved (1 grayscale, 3 RGB).
    pub image_channels: usize,
    pub base_channels: usize,
    pub channel_multipliers: Vec<usize>,
    pub residual_blocks_per_stage: usize,
    /// Channels per normalization group.
    pub group_channels: usize,
}

impl DenoiserConfig {
    /// Desk-scale default: a two-stage UNet for single-channel toy images.
    pub fn toy_default() -> Self {
        Self {
            image_channels: 1,
            base_channels: 32,
            channel_multipliers: vec![1, 2],
            residual_blocks_per_stage: 2,
            group_channels: 16,
        }
    }

    /// Network input channels: noisy latent plus the LR conditioner,
    /// concatenated.
    pub fn in_channels(&self) -> usize {
        2 * self.image_channels
    }

    pub fn stage_channels(&self) -> Vec<usize> {
        self.channel_multipliers
            .iter()
            .map(|m| self.base_channels * m)
            .collect()
    }

    /// Width of the sinusoidal noise-scale feature vector.
    pub fn feature_dim(&self) -> usize {
        2 * self.base_channels
    }

    /// Width of the shared noise-scale embedding.
    pub fn embed_dim(&self) -> usize {
        4 * self.base_channels
    }

    pub fn groups_for(&self, channels: usize) -> usize {
        channels / self.group_channels
    }

    /// Spatial sizes must be divisible by this (one halving per downsample).
    pub fn spatial_divisor(&self) -> usize {
        1 << (self.channel_multipliers.len() - 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_channels < 1 {
            return Err(Error::Config("image_channels must be at least 1".into()));
        }
        if self.base_channels < 1 || self.group_channels < 1 {
            return Err(Error::Config(
                "base_channels and group_channels must be at least 1".into(),
            ));
        }
        if !self.base_channels.is_multiple_of(self.group_channels) {
            return Err(Error::Config(format!(
                "base_channels {} not divisible by group_channels {}",
                self.base_channels, self.group_channels
            )));
        }
        if self.channel_multipliers.is_empty() {
            return Err(Error::Config("channel_multipliers must be non-empty".into()));
        }
        if self.channel_multipliers.iter().any(|&m| m < 1) {
            return Err(Error::Config("channel multipliers must be positive".into()));
        }
        if self.residual_blocks_per_stage < 1 {
            return Err(Error::Config(
                "residual_blocks_per_stage must be at least 1".into(),
            ));
        }
        for (i, &c) in self.stage_channels().iter().enumerate() {
            if !c.is_multiple_of(self.group_channels) {
                return Err(Error::Config(format!(
                    "stage {i} channels {c} not divisible by group_channels {}",
                    self.group_channels
                )));
            }
        }
        Ok(())
    }
}

/// How a parameter tensor is initialized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Zero-mean normal with standard deviation 1/sqrt(fan_in).
    FanIn(usize),
    /// Fan-in normal additionally scaled down (used for the output head so a
    /// fresh network predicts near zero).
    FanInScaled(usize, f64),
    Zeros,
    Ones,
}

/// Name, shape and initializer of one parameter tensor.
#[derive(Debug, Clone)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

fn push_conv(plan: &mut Vec<ParamSpec>, prefix: &str, cout: usize, cin: usize, k: usize) {
    plan.push(ParamSpec {
        name: format!("{prefix}.w"),
        shape: vec![cout, cin, k, k],
        init: Init::FanIn(cin * k * k),
    });
    plan.push(ParamSpec {
        name: format!("{prefix}.b"),
        shape: vec![cout],
        init: Init::Zeros,
    });
}

fn push_norm(plan: &mut Vec<ParamSpec>, prefix: &str, channels: usize) {
    plan.push(ParamSpec {
        name: format!("{prefix}.g"),
        shape: vec![channels],
        init: Init::Ones,
    });
    plan.push(ParamSpec {
        name: format!("{prefix}.b"),
        shape: vec![channels],
        init: Init::Zeros,
    });
}

fn push_block(plan: &mut Vec<ParamSpec>, prefix: &str, cin: usize, cout: usize, embed: usize) {
    push_norm(plan, &format!("{prefix}.gn1"), cin);
    push_conv(plan, &format!("{prefix}.conv1"), cout, cin, 3);
    plan.push(ParamSpec {
        name: format!("{prefix}.emb.w"),
        shape: vec![embed, cout],
        init: Init::FanIn(embed),
    });
    plan.push(ParamSpec {
        name: format!("{prefix}.emb.b"),
        shape: vec![cout],
        init: Init::Zeros,
    });
    push_norm(plan, &format!("{prefix}.gn2"), cout);
    push_conv(plan, &format!("{prefix}.conv2"), cout, cout, 3);
    if cin != cout {
        push_conv(plan, &format!("{prefix}.skip"), cout, cin, 1);
    }
}

/// Complete, deterministic listing of every parameter tensor the
/// configuration requires. Shared by initialization, checkpoint validation
/// and optimizer-state construction.
pub fn param_plan(config: &DenoiserConfig) -> Result<Vec<ParamSpec>> {
    config.validate()?;
    let chans = config.stage_channels();
    let stages = chans.len();
    let blocks = config.residual_blocks_per_stage;
    let feat = config.feature_dim();
    let embed = config.embed_dim();

    let mut plan = vec![
        ParamSpec {
            name: "emb.fc1.w".into(),
            shape: vec![feat, embed],
            init: Init::FanIn(feat),
        },
        ParamSpec {
            name: "emb.fc1.b".into(),
            shape: vec![embed],
            init: Init::Zeros,
        },
        ParamSpec {
            name: "emb.fc2.w".into(),
            shape: vec![embed, embed],
            init: Init::FanIn(embed),
        },
        ParamSpec {
            name: "emb.fc2.b".into(),
            shape: vec![embed],
            init: Init::Zeros,
        },
    ];

    push_conv(&mut plan, "stem", chans[0], config.in_channels(), 3);

    for i in 0..stages {
        for j in 0..blocks {
            push_block(&mut plan, &format!("enc.{i}.block.{j}"), chans[i], chans[i], embed);
        }
        if i + 1 < stages {
            push_conv(&mut plan, &format!("enc.{i}.down"), chans[i + 1], chans[i], 3);
        }
    }

    push_block(&mut plan, "mid", chans[stages - 1], chans[stages - 1], embed);

    for i in (0..stages.saturating_sub(1)).rev() {
        push_conv(&mut plan, &format!("dec.{i}.up"), chans[i], chans[i + 1], 3);
        for j in 0..blocks {
            let cin = if j == 0 { 2 * chans[i] } else { chans[i] };
            push_block(&mut plan, &format!("dec.{i}.block.{j}"), cin, chans[i], embed);
        }
    }

    push_norm(&mut plan, "head.gn", chans[0]);
    plan.push(ParamSpec {
        name: "head.conv.w".into(),
        shape: vec![config.image_channels, chans[0], 3, 3],
        init: Init::FanInScaled(chans[0] * 9, 0.1),
    });
    plan.push(ParamSpec {
        name: "head.conv.b".into(),
        shape: vec![config.image_channels],
        init: Init::Zeros,
    });
    Ok(plan)
}

/// Draw fresh parameters. Weight tensors use zero-mean normals with
/// 1/sqrt(fan_in) standard deviation; biases start at zero, normalization
/// scales at one. Every value is rounded through f32 so serialized
/// parameters reload bit-exactly.
pub fn init_params(config: &DenoiserConfig, rng: &mut ChaCha8Rng) -> Result<ParamStore> {
    let mut params = ParamStore::new();
    for spec in param_plan(config)? {
        let n: usize = spec.shape.iter().product();
        let values: Vec<f64> = match spec.init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::FanIn(fan) => {
                let std = (1.0 / fan as f64).sqrt();
                (0..n)
                    .map(|_| (rng.sample::<f64, _>(StandardNormal) * std) as f32 as f64)
                    .collect()
            }
            Init::FanInScaled(fan, scale) => {
                let std = (1.0 / fan as f64).sqrt() * scale;
                (0..n)
                    .map(|_| (rng.sample::<f64, _>(StandardNormal) * std) as f32 as f64)
                    .collect()
            }
        };
        let arr = ArrayD::from_shape_vec(IxDyn(&spec.shape), values).expect("planned shape");
        params.insert(spec.name, arr);
    }
    Ok(params)
}

/// Zero-filled gradients (or optimizer moments) matching a parameter plan.
pub fn zeros_like_plan(config: &DenoiserConfig) -> Result<ParamStore> {
    let mut store = ParamStore::new();
    for spec in param_plan(config)? {
        store.insert(spec.name, ArrayD::zeros(IxDyn(&spec.shape)));
    }
    Ok(store)
}

/// Which residual norm the training loss uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossNorm {
    L2,
    L1,
}

impl std::str::FromStr for LossNorm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "l2" => Ok(Self::L2),
            "l1" => Ok(Self::L1),
            other => Err(Error::Config(format!("loss must be l1 or l2, got `{other}`"))),
        }
    }
}

impl std::fmt::Display for LossNorm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::L2 => write!(f, "l2"),
            Self::L1 => write!(f, "l1"),
        }
    }
}

/// One supervised example: predict `eps_target` from (x_t, lr_cond) at the
/// given continuous noise scale.
#[derive(Debug, Clone)]
pub struct TrainingExample {
    pub x_t: ImageTensor,
    pub lr_cond: ImageTensor,
    pub noise_scale: f64,
    pub eps_target: ImageTensor,
}

/// Compute the reverse-step mean from a noise prediction:
/// `(1/sqrt(alpha_t)) (x_t - (beta_t / sqrt(1 - alpha_bar_t)) eps_hat)`.
/// When eps_hat is the exact noise this equals the forward posterior mean.
pub fn mu_from_eps(
    x_t: &ImageTensor,
    eps_hat: &ImageTensor,
    schedule: &NoiseSchedule,
    t: usize,
) -> Result<ImageTensor> {
    x_t.ensure_same_shape(eps_hat)?;
    let alpha = schedule.alpha(t)?;
    let beta = schedule.beta(t)?;
    let abar = schedule.alpha_bar(t)?;
    let coef = beta / (1.0 - abar).sqrt();
    Ok(ImageTensor::new(
        (&x_t.data - &eps_hat.data * coef) / alpha.sqrt(),
    ))
}

// ---------------------------------------------------------------------------
// Forward/backward tape
// ---------------------------------------------------------------------------

struct EmbedCache {
    feats: Array2<f64>,
    fc1_out: Array2<f64>,
    silu1_out: Array2<f64>,
    fc2_out: Array2<f64>,
    emb: Array2<f64>,
}

struct BlockCache {
    x: Array4<f64>,
    gn1: GroupNormCache,
    gn1_out: Array4<f64>,
    s1: Array4<f64>,
    gn2: GroupNormCache,
    gn2_out: Array4<f64>,
    s2: Array4<f64>,
}

struct Tape {
    embed: EmbedCache,
    stem_in: Array4<f64>,
    enc: Vec<Vec<BlockCache>>,
    /// Encoder stage outputs; also the inputs of the downsample convs.
    skips: Vec<Array4<f64>>,
    mid: BlockCache,
    /// Inputs of the post-upsample convs, one per decoder stage (deepest
    /// first, matching forward order).
    up_in: Vec<Array4<f64>>,
    dec: Vec<Vec<BlockCache>>,
    head_gn: GroupNormCache,
    head_gn_out: Array4<f64>,
    head_silu_out: Array4<f64>,
}

fn check_finite(layer: &str, values: &Array4<f64>) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(format!(
            "non-finite activations after layer {layer}"
        )))
    }
}

/// Sinusoidal features of the noise scale: `half` geometrically spaced
/// frequencies from 1 to 1e4, sine and cosine each.
fn sinusoidal_features(scales: &[f64], half: usize) -> Array2<f64> {
    let mut feats = Array2::<f64>::zeros((scales.len(), 2 * half));
    for (bi, &s) in scales.iter().enumerate() {
        for i in 0..half {
            let exponent = if half > 1 {
                4.0 * i as f64 / (half as f64 - 1.0)
            } else {
                0.0
            };
            let omega = 10f64.powf(exponent);
            feats[(bi, i)] = (omega * s).sin();
            feats[(bi, half + i)] = (omega * s).cos();
        }
    }
    feats
}

/// The denoiser: configuration, parameters, and an instrumentation counter
/// of forward evaluations (used by the samplers' step-count contracts).
#[derive(Debug)]
pub struct Denoiser {
    config: DenoiserConfig,
    params: ParamStore,
    evals: AtomicU64,
}

impl Denoiser {
    /// Wrap existing parameters, validating them against the plan for this
    /// configuration: every planned tensor present with the planned shape,
    /// no strays, all values finite.
    pub fn new(config: DenoiserConfig, params: ParamStore) -> Result<Self> {
        let plan = param_plan(&config)?;
        if plan.len() != params.len() {
            let planned: Vec<&String> = plan.iter().map(|s| &s.name).collect();
            let got: Vec<&String> = params.keys().collect();
            return Err(Error::Config(format!(
                "parameter set mismatch: expected {} tensors, got {} (expected {:?}, got {:?})",
                plan.len(),
                params.len(),
                planned,
                got
            )));
        }
        for spec in &plan {
            let arr = params.get(&spec.name).ok_or_else(|| {
                Error::Config(format!("missing parameter tensor `{}`", spec.name))
            })?;
            if arr.shape() != spec.shape.as_slice() {
                return Err(Error::Shape(format!(
                    "parameter `{}` has shape {:?}, expected {:?}",
                    spec.name,
                    arr.shape(),
                    spec.shape
                )));
            }
            if !arr.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "parameter `{}` contains non-finite values",
                    spec.name
                )));
            }
        }
        Ok(Self {
            config,
            params,
            evals: AtomicU64::new(0),
        })
    }

    /// Fresh network from a seed-derived rng.
    pub fn init(config: DenoiserConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let params = init_params(&config, rng)?;
        Self::new(config, params)
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Number of forward evaluations since construction or the last reset.
    pub fn network_evals(&self) -> u64 {
        self.evals.load(Ordering::Relaxed)
    }

    pub fn reset_network_evals(&self) {
        self.evals.store(0, Ordering::Relaxed);
    }

    // Typed parameter accessors. Presence and rank are guaranteed by the
    // plan validation in `new`, so failures here are internal bugs.
    fn w4(&self, name: &str) -> Array4<f64> {
        self.params[name]
            .view()
            .into_dimensionality()
            .expect("rank-4 parameter")
            .to_owned()
    }

    fn w2(&self, name: &str) -> Array2<f64> {
        self.params[name]
            .view()
            .into_dimensionality()
            .expect("rank-2 parameter")
            .to_owned()
    }

    fn w1(&self, name: &str) -> Array1<f64> {
        self.params[name]
            .view()
            .into_dimensionality()
            .expect("rank-1 parameter")
            .to_owned()
    }

    fn embed_forward(&self, scales: &[f64]) -> EmbedCache {
        let feats = sinusoidal_features(scales, self.config.base_channels);
        let fc1_out = linear_forward(&feats, &self.w2("emb.fc1.w"), &self.w1("emb.fc1.b"));
        let silu1_out = silu_forward(&fc1_out);
        let fc2_out = linear_forward(&silu1_out, &self.w2("emb.fc2.w"), &self.w1("emb.fc2.b"));
        let emb = silu_forward(&fc2_out);
        EmbedCache {
            feats,
            fc1_out,
            silu1_out,
            fc2_out,
            emb,
        }
    }

    fn block_forward(
        &self,
        prefix: &str,
        x: Array4<f64>,
        emb: &Array2<f64>,
    ) -> Result<(Array4<f64>, BlockCache)> {
        let cin = x.dim().1;
        let groups_in = self.config.groups_for(cin);
        let (gn1_out, gn1) = group_norm_forward(
            &x,
            &self.w1(&format!("{prefix}.gn1.g")),
            &self.w1(&format!("{prefix}.gn1.b")),
            groups_in,
        );
        let s1 = silu_forward(&gn1_out);
        let mut h = conv2d_forward(
            &s1,
            &self.w4(&format!("{prefix}.conv1.w")),
            &self.w1(&format!("{prefix}.conv1.b")),
            1,
            1,
        );
        check_finite(&format!("{prefix}.conv1"), &h)?;

        // Per-channel noise-scale bias, broadcast over the spatial grid.
        let ebias = linear_forward(
            emb,
            &self.w2(&format!("{prefix}.emb.w")),
            &self.w1(&format!("{prefix}.emb.b")),
        );
        let (b, cout) = ebias.dim();
        let ebias4 = ebias
            .into_shape_with_order((b, cout, 1, 1))
            .expect("embedding bias reshape");
        h += &ebias4;

        let groups_out = self.config.groups_for(cout);
        let (gn2_out, gn2) = group_norm_forward(
            &h,
            &self.w1(&format!("{prefix}.gn2.g")),
            &self.w1(&format!("{prefix}.gn2.b")),
            groups_out,
        );
        let s2 = silu_forward(&gn2_out);
        let c2 = conv2d_forward(
            &s2,
            &self.w4(&format!("{prefix}.conv2.w")),
            &self.w1(&format!("{prefix}.conv2.b")),
            1,
            1,
        );
        check_finite(&format!("{prefix}.conv2"), &c2)?;

        let skip = if cin != c2.dim().1 {
            conv2d_forward(
                &x,
                &self.w4(&format!("{prefix}.skip.w")),
                &self.w1(&format!("{prefix}.skip.b")),
                1,
                0,
            )
        } else {
            x.clone()
        };
        let out = skip + &c2;
        Ok((
            out,
            BlockCache {
                x,
                gn1,
                gn1_out,
                s1,
                gn2,
                gn2_out,
                s2,
            },
        ))
    }

    /// Accumulates this block's parameter gradients into `grads`; returns
    /// the gradient w.r.t. the block input and the shared embedding.
    fn block_backward(
        &self,
        prefix: &str,
        cache: &BlockCache,
        emb: &Array2<f64>,
        d_out: &Array4<f64>,
        grads: &mut ParamStore,
    ) -> (Array4<f64>, Array2<f64>) {
        let cin = cache.x.dim().1;
        let cout = d_out.dim().1;

        // Main path, in reverse: conv2 <- silu <- gn2 <- (+emb bias) <- conv1
        // <- silu <- gn1.
        let (d_s2, d_w2, d_b2) = conv2d_backward(
            &cache.s2,
            &self.w4(&format!("{prefix}.conv2.w")),
            1,
            1,
            d_out,
        );
        accumulate(grads, &format!("{prefix}.conv2.w"), d_w2.into_dyn());
        accumulate(grads, &format!("{prefix}.conv2.b"), d_b2.into_dyn());

        let d_gn2_out = silu_backward(&cache.gn2_out, &d_s2);
        let (d_h, d_g2, d_bt2) = group_norm_backward(
            &cache.gn2,
            &self.w1(&format!("{prefix}.gn2.g")),
            &d_gn2_out,
        );
        accumulate(grads, &format!("{prefix}.gn2.g"), d_g2.into_dyn());
        accumulate(grads, &format!("{prefix}.gn2.b"), d_bt2.into_dyn());

        let d_ebias = d_h.sum_axis(Axis(3)).sum_axis(Axis(2));
        let (d_emb, d_embw, d_embb) =
            linear_backward(emb, &self.w2(&format!("{prefix}.emb.w")), &d_ebias);
        accumulate(grads, &format!("{prefix}.emb.w"), d_embw.into_dyn());
        accumulate(grads, &format!("{prefix}.emb.b"), d_embb.into_dyn());

        let (d_s1, d_w1, d_b1) = conv2d_backward(
            &cache.s1,
            &self.w4(&format!("{prefix}.conv1.w")),
            1,
            1,
            &d_h,
        );
        accumulate(grads, &format!("{prefix}.conv1.w"), d_w1.into_dyn());
        accumulate(grads, &format!("{prefix}.conv1.b"), d_b1.into_dyn());

        let d_gn1_out = silu_backward(&cache.gn1_out, &d_s1);
        let (d_x_main, d_g1, d_bt1) = group_norm_backward(
            &cache.gn1,
            &self.w1(&format!("{prefix}.gn1.g")),
            &d_gn1_out,
        );
        accumulate(grads, &format!("{prefix}.gn1.g"), d_g1.into_dyn());
        accumulate(grads, &format!("{prefix}.gn1.b"), d_bt1.into_dyn());

        // Skip path.
        let d_x = if cin != cout {
            let (d_x_skip, d_sw, d_sb) = conv2d_backward(
                &cache.x,
                &self.w4(&format!("{prefix}.skip.w")),
                1,
                0,
                d_out,
            );
            accumulate(grads, &format!("{prefix}.skip.w"), d_sw.into_dyn());
            accumulate(grads, &format!("{prefix}.skip.b"), d_sb.into_dyn());
            d_x_main + &d_x_skip
        } else {
            d_x_main + d_out
        };
        (d_x, d_emb)
    }

    /// Full forward pass over a batch. `input` is (B, 2*image_channels, H, W)
    /// with the LR conditioner in the first channel half.
    fn forward(&self, input: Array4<f64>, scales: &[f64]) -> Result<(Array4<f64>, Tape)> {
        let (b, cin, h, w) = input.dim();
        if cin != self.config.in_channels() {
            return Err(Error::Shape(format!(
                "network input has {cin} channels, expected {}",
                self.config.in_channels()
            )));
        }
        if b != scales.len() {
            return Err(Error::Shape(format!(
                "{b} batch items but {} noise scales",
                scales.len()
            )));
        }
        let div = self.config.spatial_divisor();
        if h % div != 0 || w % div != 0 {
            return Err(Error::Shape(format!(
                "spatial size {h}x{w} not divisible by {div} (one halving per stage)"
            )));
        }

        let chans = self.config.stage_channels();
        let stages = chans.len();
        let blocks = self.config.residual_blocks_per_stage;
        let embed = self.embed_forward(scales);

        let stem_in = input;
        let mut hcur = conv2d_forward(&stem_in, &self.w4("stem.w"), &self.w1("stem.b"), 1, 1);
        check_finite("stem", &hcur)?;

        let mut enc: Vec<Vec<BlockCache>> = Vec::with_capacity(stages);
        let mut skips: Vec<Array4<f64>> = Vec::new();
        for i in 0..stages {
            let mut stage_caches = Vec::with_capacity(blocks);
            for j in 0..blocks {
                let (next, cache) =
                    self.block_forward(&format!("enc.{i}.block.{j}"), hcur, &embed.emb)?;
                hcur = next;
                stage_caches.push(cache);
            }
            enc.push(stage_caches);
            if i + 1 < stages {
                skips.push(hcur.clone());
                hcur = conv2d_forward(
                    &hcur,
                    &self.w4(&format!("enc.{i}.down.w")),
                    &self.w1(&format!("enc.{i}.down.b")),
                    2,
                    1,
                );
                check_finite(&format!("enc.{i}.down"), &hcur)?;
            }
        }

        let (mid_out, mid_cache) = self.block_forward("mid", hcur, &embed.emb)?;
        hcur = mid_out;

        let mut up_in: Vec<Array4<f64>> = Vec::new();
        let mut dec: Vec<Vec<BlockCache>> = Vec::new();
        for i in (0..stages.saturating_sub(1)).rev() {
            let upsampled = nearest_upsample2_forward(&hcur);
            hcur = conv2d_forward(
                &upsampled,
                &self.w4(&format!("dec.{i}.up.w")),
                &self.w1(&format!("dec.{i}.up.b")),
                1,
                1,
            );
            check_finite(&format!("dec.{i}.up"), &hcur)?;
            up_in.push(upsampled);

            hcur = concat_channels(&hcur, &skips[i]);
            let mut stage_caches = Vec::with_capacity(blocks);
            for j in 0..blocks {
                let (next, cache) =
                    self.block_forward(&format!("dec.{i}.block.{j}"), hcur, &embed.emb)?;
                hcur = next;
                stage_caches.push(cache);
            }
            dec.push(stage_caches);
        }

        let (head_gn_out, head_gn) = group_norm_forward(
            &hcur,
            &self.w1("head.gn.g"),
            &self.w1("head.gn.b"),
            self.config.groups_for(chans[0]),
        );
        let head_silu_out = silu_forward(&head_gn_out);
        let eps = conv2d_forward(
            &head_silu_out,
            &self.w4("head.conv.w"),
            &self.w1("head.conv.b"),
            1,
            1,
        );
        check_finite("head.conv", &eps)?;

        Ok((
            eps,
            Tape {
                embed,
                stem_in,
                enc,
                skips,
                mid: mid_cache,
                up_in,
                dec,
                head_gn,
                head_gn_out,
                head_silu_out,
            },
        ))
    }

    /// Reverse pass: exact gradients of a scalar loss with upstream
    /// derivative `d_eps` w.r.t. every parameter.
    fn backward(&self, tape: &Tape, d_eps: &Array4<f64>) -> Result<ParamStore> {
        let chans = self.config.stage_channels();
        let stages = chans.len();
        let blocks = self.config.residual_blocks_per_stage;
        let mut grads = zeros_like_plan(&self.config)?;
        let emb = &tape.embed.emb;
        let mut d_emb_total = Array2::<f64>::zeros(emb.dim());

        // Head.
        let (d_silu, d_hw, d_hb) =
            conv2d_backward(&tape.head_silu_out, &self.w4("head.conv.w"), 1, 1, d_eps);
        accumulate(&mut grads, "head.conv.w", d_hw.into_dyn());
        accumulate(&mut grads, "head.conv.b", d_hb.into_dyn());
        let d_gn_out = silu_backward(&tape.head_gn_out, &d_silu);
        let (mut d_h, d_hg, d_hbeta) =
            group_norm_backward(&tape.head_gn, &self.w1("head.gn.g"), &d_gn_out);
        accumulate(&mut grads, "head.gn.g", d_hg.into_dyn());
        accumulate(&mut grads, "head.gn.b", d_hbeta.into_dyn());

        // Decoder stages, unwinding in reverse forward order: the forward
        // loop ran i = stages-2 .. 0, so here i climbs back up, and
        // `tape.dec`/`tape.up_in` are indexed by forward processing order.
        let shallow = stages.saturating_sub(1);
        let mut d_skips: Vec<Option<Array4<f64>>> = vec![None; shallow];
        for i in 0..shallow {
            let pos = shallow - 1 - i;
            let stage_caches = &tape.dec[pos];
            for j in (0..blocks).rev() {
                let (d_prev, d_e) = self.block_backward(
                    &format!("dec.{i}.block.{j}"),
                    &stage_caches[j],
                    emb,
                    &d_h,
                    &mut grads,
                );
                d_h = d_prev;
                d_emb_total += &d_e;
            }
            let (d_up_path, d_skip) = split_channels(&d_h, chans[i]);
            d_skips[i] = Some(d_skip);
            let (d_upsampled, d_uw, d_ub) = conv2d_backward(
                &tape.up_in[pos],
                &self.w4(&format!("dec.{i}.up.w")),
                1,
                1,
                &d_up_path,
            );
            accumulate(&mut grads, &format!("dec.{i}.up.w"), d_uw.into_dyn());
            accumulate(&mut grads, &format!("dec.{i}.up.b"), d_ub.into_dyn());
            d_h = nearest_upsample2_backward(&d_upsampled);
        }

        // Mid block.
        let (d_prev, d_e) = self.block_backward("mid", &tape.mid, emb, &d_h, &mut grads);
        d_h = d_prev;
        d_emb_total += &d_e;

        // Encoder stages, deepest first.
        for i in (0..stages).rev() {
            if i + 1 < stages {
                let (d_down_in, d_dw, d_db) = conv2d_backward(
                    &tape.skips[i],
                    &self.w4(&format!("enc.{i}.down.w")),
                    2,
                    1,
                    &d_h,
                );
                accumulate(&mut grads, &format!("enc.{i}.down.w"), d_dw.into_dyn());
                accumulate(&mut grads, &format!("enc.{i}.down.b"), d_db.into_dyn());
                d_h = d_down_in;
                if let Some(d_skip) = d_skips[i].take() {
                    d_h += &d_skip;
                }
            }
            for j in (0..blocks).rev() {
                let (d_prev, d_e) = self.block_backward(
                    &format!("enc.{i}.block.{j}"),
                    &tape.enc[i][j],
                    emb,
                    &d_h,
                    &mut grads,
                );
                d_h = d_prev;
                d_emb_total += &d_e;
            }
        }

        // Stem (input gradients are discarded; the inputs are data).
        let (_, d_sw, d_sb) = conv2d_backward(&tape.stem_in, &self.w4("stem.w"), 1, 1, &d_h);
        accumulate(&mut grads, "stem.w", d_sw.into_dyn());
        accumulate(&mut grads, "stem.b", d_sb.into_dyn());

        // Shared embedding MLP.
        let d_fc2_out = silu_backward(&tape.embed.fc2_out, &d_emb_total);
        let (d_silu1, d_f2w, d_f2b) =
            linear_backward(&tape.embed.silu1_out, &self.w2("emb.fc2.w"), &d_fc2_out);
        accumulate(&mut grads, "emb.fc2.w", d_f2w.into_dyn());
        accumulate(&mut grads, "emb.fc2.b", d_f2b.into_dyn());
        let d_fc1_out = silu_backward(&tape.embed.fc1_out, &d_silu1);
        let (_, d_f1w, d_f1b) =
            linear_backward(&tape.embed.feats, &self.w2("emb.fc1.w"), &d_fc1_out);
        accumulate(&mut grads, "emb.fc1.w", d_f1w.into_dyn());
        accumulate(&mut grads, "emb.fc1.b", d_f1b.into_dyn());

        Ok(grads)
    }

    /// Predict the noise inside `x_t` given the LR conditioner and the
    /// continuous noise scale. Deterministic; counts one network evaluation.
    pub fn predict_noise(
        &self,
        x_t: &ImageTensor,
        lr_cond: &ImageTensor,
        noise_scale: f64,
    ) -> Result<ImageTensor> {
        x_t.ensure_same_shape(lr_cond)?;
        if x_t.channels() != self.config.image_channels {
            return Err(Error::Shape(format!(
                "latent has {} channels, network expects {}",
                x_t.channels(),
                self.config.image_channels
            )));
        }
        if !(noise_scale > 0.0 && noise_scale <= 1.0) {
            return Err(Error::Domain(format!(
                "noise scale must lie in (0,1], got {noise_scale}"
            )));
        }
        if !x_t.is_finite() || !lr_cond.is_finite() {
            return Err(Error::NonFinite("network inputs are non-finite".into()));
        }

        let (c, h, w) = x_t.shape();
        let mut input = Array4::<f64>::zeros((1, 2 * c, h, w));
        input
            .slice_mut(ndarray::s![0, ..c, .., ..])
            .assign(&lr_cond.data);
        input
            .slice_mut(ndarray::s![0, c.., .., ..])
            .assign(&x_t.data);

        let (eps, _tape) = self.forward(input, &[noise_scale])?;
        self.evals.fetch_add(1, Ordering::Relaxed);
        Ok(ImageTensor::new(
            eps.index_axis(Axis(0), 0).to_owned(),
        ))
    }

    /// Batch loss (mean over examples of the per-example mean residual
    /// norm) and its exact gradients for every parameter.
    pub fn loss_and_grad(
        &self,
        batch: &[TrainingExample],
        norm: LossNorm,
    ) -> Result<(f64, ParamStore)> {
        if batch.is_empty() {
            return Err(Error::Domain("training batch is empty".into()));
        }
        let (c, h, w) = batch[0].x_t.shape();
        if c != self.config.image_channels {
            return Err(Error::Shape(format!(
                "batch has {c} channels, network expects {}",
                self.config.image_channels
            )));
        }
        let b = batch.len();
        let mut input = Array4::<f64>::zeros((b, 2 * c, h, w));
        let mut target = Array4::<f64>::zeros((b, c, h, w));
        let mut scales = Vec::with_capacity(b);
        for (bi, ex) in batch.iter().enumerate() {
            ex.x_t.ensure_same_shape(&batch[0].x_t)?;
            ex.x_t.ensure_same_shape(&ex.lr_cond)?;
            ex.x_t.ensure_same_shape(&ex.eps_target)?;
            if !(ex.noise_scale > 0.0 && ex.noise_scale <= 1.0) {
                return Err(Error::Domain(format!(
                    "noise scale must lie in (0,1], got {}",
                    ex.noise_scale
                )));
            }
            input
                .slice_mut(ndarray::s![bi, ..c, .., ..])
                .assign(&ex.lr_cond.data);
            input
                .slice_mut(ndarray::s![bi, c.., .., ..])
                .assign(&ex.x_t.data);
            target
                .slice_mut(ndarray::s![bi, .., .., ..])
                .assign(&ex.eps_target.data);
            scales.push(ex.noise_scale);
        }
        if !input.iter().all(|v| v.is_finite()) || !target.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("training batch is non-finite".into()));
        }

        let (eps, tape) = self.forward(input, &scales)?;
        let residual = &eps - &target;
        let n = (b * c * h * w) as f64;
        let (loss, d_eps) = match norm {
            LossNorm::L2 => (
                residual.iter().map(|r| r * r).sum::<f64>() / n,
                residual.mapv(|r| 2.0 * r / n),
            ),
            LossNorm::L1 => (
                residual.iter().map(|r| r.abs()).sum::<f64>() / n,
                residual.mapv(|r| r.signum() / n),
            ),
        };
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("loss is non-finite ({loss})")));
        }
        let grads = self.backward(&tape, &d_eps)?;
        Ok((loss, grads))
    }
}

fn accumulate(grads: &mut ParamStore, name: &str, contribution: ArrayD<f64>) {
    *grads
        .get_mut(name)
        .unwrap_or_else(|| panic!("gradient accumulation for unknown parameter `{name}`")) +=
        &contribution;
}
