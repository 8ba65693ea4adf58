//! Depth encoder and decoder around the latent bank.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Conv2d, ParamStore, ResBlock, Scope, LEAKY_SLOPE};
use crate::tensor::Tensor;

/// Number of depth scales the decoder emits.
pub const NUM_SCALES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthScaleConfig {
    pub min_depth: f64,
    pub max_depth: f64,
}

impl Default for DepthScaleConfig {
    fn default() -> Self {
        DepthScaleConfig {
            min_depth: 0.1,
            max_depth: 20.0,
        }
    }
}

impl DepthScaleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.min_depth > 0.0 && self.min_depth < self.max_depth && self.max_depth.is_finite()) {
            return Err(Error::Config(format!(
                "need 0 < min_depth < max_depth, got {} and {}",
                self.min_depth, self.max_depth
            )));
        }
        Ok(())
    }

    fn coeffs(&self) -> (f64, f64) {
        let a = 1.0 / self.max_depth;
        (a, 1.0 / self.min_depth - a)
    }
}

impl DepthScaleConfig {
    /// Pre-sigmoid value whose depth is the geometric mean of the range,
    /// so an untrained head starts equally far from both bounds in log depth.
    pub fn mid_logit(&self) -> f64 {
        let (a, b) = self.coeffs();
        let s = (1.0 / (self.min_depth * self.max_depth).sqrt() - a) / b;
        (s / (1.0 - s)).ln()
    }
}

/// Maps a sigmoid output to metric depth through inverse depth.
pub fn sigmoid_to_depth(s: f64, cfg: &DepthScaleConfig) -> Result<f64> {
    if !(s > 0.0 && s < 1.0) {
        return Err(Error::domain(format!("sigmoid value {s} outside (0, 1)")));
    }
    let (a, b) = cfg.coeffs();
    Ok(1.0 / (a + b * s))
}

/// Elementwise [`sigmoid_to_depth`] on a tensor.
pub fn sigmoid_to_depth_tensor(s: &Tensor, cfg: &DepthScaleConfig) -> Tensor {
    let (a, b) = cfg.coeffs();
    s.affine(b, a).recip()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthNetConfig {
    /// Pyramid levels `n`.
    pub levels: usize,
    /// Encoder widths, finest level first.
    pub encoder_channels: Vec<usize>,
    /// Decoder widths, finest level first.
    pub decoder_channels: Vec<usize>,
    pub scale: DepthScaleConfig,
}

impl Default for DepthNetConfig {
    fn default() -> Self {
        DepthNetConfig {
            levels: 5,
            encoder_channels: vec![64, 64, 128, 256, 512],
            decoder_channels: vec![16, 32, 64, 128, 256],
            scale: DepthScaleConfig::default(),
        }
    }
}

impl DepthNetConfig {
    pub fn toy() -> Self {
        DepthNetConfig {
            levels: 5,
            encoder_channels: vec![8, 8, 16, 16, 32],
            decoder_channels: vec![8, 8, 16, 16, 32],
            scale: DepthScaleConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels < NUM_SCALES {
            return Err(Error::Config(format!(
                "need at least {NUM_SCALES} pyramid levels, got {}",
                self.levels
            )));
        }
        if self.encoder_channels.len() != self.levels || self.decoder_channels.len() != self.levels {
            return Err(Error::Config(format!(
                "channel lists must have {} entries",
                self.levels
            )));
        }
        if self.encoder_channels.iter().chain(&self.decoder_channels).any(|&c| c == 0) {
            return Err(Error::Config("channel widths must be positive".into()));
        }
        self.scale.validate()
    }

    pub fn divisor(&self) -> usize {
        1 << (self.levels - 1)
    }

    pub fn check_input_size(&self, h: usize, w: usize) -> Result<()> {
        let d = self.divisor();
        if h == 0 || w == 0 || h % d != 0 || w % d != 0 {
            return Err(Error::domain(format!(
                "input size {h}x{w} must be divisible by {d} (2^{})",
                self.levels - 1
            )));
        }
        Ok(())
    }

    /// Encoder width at coarsest-first level `k`.
    pub fn enc_at(&self, k: usize) -> usize {
        self.encoder_channels[self.levels - 1 - k]
    }

    fn dec_at(&self, k: usize) -> usize {
        self.decoder_channels[self.levels - 1 - k]
    }
}

/// Encoder outputs, coarsest level first (`levels[0]` is `h^0`).
#[derive(Clone)]
pub struct FeaturePyramid {
    pub levels: Vec<Tensor>,
}

impl FeaturePyramid {
    /// Spatial sizes, finest first.
    pub fn sizes_finest_first(&self) -> Vec<(usize, usize)> {
        self.levels
            .iter()
            .rev()
            .map(|t| {
                let (_, _, h, w) = t.dims4();
                (h, w)
            })
            .collect()
    }
}

/// Latent-bank features, aligned level-for-level with a [`FeaturePyramid`].
#[derive(Clone)]
pub struct BankFeatures {
    pub levels: Vec<Tensor>,
}

impl BankFeatures {
    /// All-zero features, used when the bank is switched off.
    pub fn zeros(pyramid: &FeaturePyramid, channels: &[usize]) -> Self {
        BankFeatures {
            levels: pyramid
                .levels
                .iter()
                .zip(channels)
                .map(|(h, &c)| {
                    let (b, _, hh, ww) = h.dims4();
                    Tensor::zeros(&[b, c, hh, ww])
                })
                .collect(),
        }
    }
}

/// Sigmoid maps `s^0..s^3` (`s^0` full resolution) and their metric depth.
#[derive(Clone)]
pub struct DepthPrediction {
    pub sigmoid: Vec<Tensor>,
    pub depth: Vec<Tensor>,
}

#[derive(Debug, Clone)]
pub struct DepthEncoder {
    cfg: DepthNetConfig,
    stem: Conv2d,
    blocks: Vec<ResBlock>,
}

impl DepthEncoder {
    pub fn new(cfg: &DepthNetConfig) -> Self {
        let c = &cfg.encoder_channels;
        let blocks = (0..cfg.levels)
            .map(|i| {
                if i == 0 {
                    ResBlock::new("block0", c[0], c[0], 1)
                } else {
                    ResBlock::new(&format!("block{i}"), c[i - 1], c[i], 2)
                }
            })
            .collect();
        DepthEncoder {
            cfg: cfg.clone(),
            stem: Conv2d::new("stem", 3, c[0], 3, 1),
            blocks,
        }
    }

    pub fn init(&self, rng: &mut ChaCha8Rng) -> ParamStore {
        let mut store = ParamStore::new();
        self.stem.init(&mut store, rng);
        for b in &self.blocks {
            b.init(&mut store, rng);
        }
        store
    }

    /// `image` is `[B,3,H,W]` in [0, 1].
    pub fn encode(&self, s: &Scope, image: &Tensor) -> Result<FeaturePyramid> {
        let (_, c, h, w) = image.dims4();
        if c != 3 {
            return Err(Error::domain(format!("encoder expects 3 channels, got {c}")));
        }
        self.cfg.check_input_size(h, w)?;
        let x = image.affine(1.0 / 0.225, -0.45 / 0.225);
        let mut x = self.stem.forward(s, &x).leaky_relu(LEAKY_SLOPE);
        let mut levels = Vec::with_capacity(self.cfg.levels);
        for b in &self.blocks {
            x = b.forward(s, &x);
            levels.push(x.clone());
        }
        levels.reverse();
        Ok(FeaturePyramid { levels })
    }
}

#[derive(Debug, Clone)]
struct DecoderLevel {
    conv_a: Conv2d,
    conv_b: Conv2d,
    head: Option<Conv2d>,
}

#[derive(Debug, Clone)]
pub struct DepthDecoder {
    cfg: DepthNetConfig,
    bank_channels: Vec<usize>,
    levels: Vec<DecoderLevel>,
}

impl DepthDecoder {
    /// `bank_channels` lists the bank feature widths, coarsest first.
    pub fn new(cfg: &DepthNetConfig, bank_channels: &[usize]) -> Self {
        let n = cfg.levels;
        let levels = (0..n)
            .map(|k| {
                let up = if k > 0 { cfg.dec_at(k - 1) } else { 0 };
                let c_in = up + cfg.enc_at(k) + bank_channels[k];
                let d = cfg.dec_at(k);
                DecoderLevel {
                    conv_a: Conv2d::new(format!("level{k}.conv_a"), c_in, d, 3, 1),
                    conv_b: Conv2d::new(format!("level{k}.conv_b"), d, d, 3, 1),
                    head: (k + NUM_SCALES >= n).then(|| Conv2d::new(format!("level{k}.head"), d, 1, 3, 1)),
                }
            })
            .collect();
        DepthDecoder {
            cfg: cfg.clone(),
            bank_channels: bank_channels.to_vec(),
            levels,
        }
    }

    pub fn bank_channels(&self) -> &[usize] {
        &self.bank_channels
    }

    pub fn init(&self, rng: &mut ChaCha8Rng) -> ParamStore {
        let mut store = ParamStore::new();
        for l in &self.levels {
            l.conv_a.init(&mut store, rng);
            l.conv_b.init(&mut store, rng);
            if let Some(hd) = &l.head {
                hd.init_with_gain(&mut store, rng, 0.1);
                store
                    .set(&format!("{}.bias", hd.name), vec![self.cfg.scale.mid_logit()])
                    .expect("head bias exists");
            }
        }
        store
    }

    pub fn decode(&self, s: &Scope, h: &FeaturePyramid, a: &BankFeatures) -> Result<DepthPrediction> {
        let n = self.cfg.levels;
        if h.levels.len() != n || a.levels.len() != n {
            return Err(Error::domain(format!(
                "decoder needs {n} levels, got {} encoder and {} bank levels",
                h.levels.len(),
                a.levels.len()
            )));
        }
        let mut x: Option<Tensor> = None;
        let mut sig = Vec::with_capacity(NUM_SCALES);
        for (k, l) in self.levels.iter().enumerate() {
            let (hb, hc, hh, hw) = h.levels[k].dims4();
            let (ab, ac, ah, aw) = a.levels[k].dims4();
            if (hb, hh, hw) != (ab, ah, aw) || hc != self.cfg.enc_at(k) || ac != self.bank_channels[k] {
                return Err(Error::domain(format!(
                    "level {k}: encoder {:?} and bank {:?} are misaligned",
                    h.levels[k].shape(),
                    a.levels[k].shape()
                )));
            }
            let mut parts = Vec::with_capacity(3);
            if let Some(prev) = &x {
                let up = prev.upsample2();
                if up.dims4().2 != hh || up.dims4().3 != hw {
                    return Err(Error::domain(format!("level {k}: resolutions do not halve")));
                }
                parts.push(up);
            }
            parts.push(h.levels[k].clone());
            parts.push(a.levels[k].clone());
            let y = l.conv_a.forward(s, &Tensor::concat(&parts, 1)).leaky_relu(LEAKY_SLOPE);
            let y = l.conv_b.forward(s, &y).leaky_relu(LEAKY_SLOPE);
            if let Some(hd) = &l.head {
                sig.push(hd.forward(s, &y).sigmoid());
            }
            x = Some(y);
        }
        sig.reverse();
        let depth = sig.iter().map(|t| sigmoid_to_depth_tensor(t, &self.cfg.scale)).collect();
        Ok(DepthPrediction { sigmoid: sig, depth })
    }
}
