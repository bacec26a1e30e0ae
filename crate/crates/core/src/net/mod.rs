//! A small differentiable 3D encoder-decoder with a projection head.
//!
//! The encoder is a stack of strided convolutions, the decoder mirrors it
//! with transposed convolutions, and there are deliberately no skip
//! connections: the decoder sees only the bottleneck, so reconstruction
//! cannot shortcut through spatial detail. A bias-free convolution maps
//! decoder features to the single-channel reconstruction, and a pooled
//! affine head produces the contrastive embedding. Reverse-mode gradients
//! are available for every parameter and, on request, for the input voxels
//! (that path is what trains the modality templates).

pub mod layers;

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::chacha;
use crate::volume::Volume;

pub use layers::{Activation, Conv3d, ConvTranspose3d, Feature, Linear};
use layers::{global_avg_pool, global_avg_pool_backward};

/// Architecture description. The decoder mirrors the encoder strides, so
/// outputs keep the input shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    pub in_channels: usize,
    pub stage_channels: Vec<usize>,
    pub strides: Vec<usize>,
    pub kernel: usize,
    pub activation: Activation,
    pub embed_dim: usize,
    /// Gain constant for the fan-in-scaled uniform init (bound =
    /// init_gain / sqrt(fan_in)). Values near sqrt(3) keep layer output
    /// variance close to input variance through the smooth nonlinearity.
    pub init_gain: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            stage_channels: vec![8, 16, 32],
            strides: vec![2, 2, 2],
            kernel: 3,
            activation: Activation::Silu,
            embed_dim: 32,
            init_gain: 1.0,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 {
            return Err(Error::Config("in_channels must be >= 1".into()));
        }
        if self.stage_channels.is_empty() {
            return Err(Error::Config("at least one stage is required".into()));
        }
        if self.stage_channels.iter().any(|&c| c == 0) {
            return Err(Error::Config("stage channels must be >= 1".into()));
        }
        if self.strides.len() != self.stage_channels.len() {
            return Err(Error::Config(format!(
                "{} strides for {} stages",
                self.strides.len(),
                self.stage_channels.len()
            )));
        }
        if self.strides.iter().any(|&s| s == 0) {
            return Err(Error::Config("strides must be >= 1".into()));
        }
        if self.kernel == 0 || self.kernel % 2 == 0 {
            return Err(Error::Config(format!(
                "kernel must be odd and >= 1, got {}",
                self.kernel
            )));
        }
        if self.embed_dim == 0 {
            return Err(Error::Config("embed_dim must be >= 1".into()));
        }
        if !(self.init_gain > 0.0) {
            return Err(Error::Config(format!(
                "init_gain must be > 0, got {}",
                self.init_gain
            )));
        }
        Ok(())
    }

    pub fn stride_product(&self) -> usize {
        self.strides.iter().product()
    }

    pub fn bottleneck_channels(&self) -> usize {
        *self.stage_channels.last().expect("validated")
    }
}

/// Model parameters as a flat indexed collection of arrays, plus the seed
/// they were initialized from. All values are finite 64-bit reals.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub params: Vec<Vec<f64>>,
    pub rng_seed: u64,
}

impl ModelState {
    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    pub fn zeros_like(&self) -> Vec<Vec<f64>> {
        self.params.iter().map(|p| vec![0.0; p.len()]).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.params
            .iter()
            .all(|p| p.iter().all(|v| v.is_finite()))
    }
}

/// Per-parameter gradient arrays mirroring [`ModelState::params`], plus the
/// optional gradient with respect to the input voxels.
#[derive(Clone, Debug)]
pub struct TapeGradients {
    pub params: Vec<Vec<f64>>,
    pub input: Option<Feature>,
}

/// Encoder-decoder trunk shared by pre-training and downstream models.
#[derive(Clone, Debug)]
pub(crate) struct Trunk {
    pub enc: Vec<Conv3d>,
    pub dec: Vec<ConvTranspose3d>,
    pub act: Activation,
    pub stride_product: usize,
    pub in_channels: usize,
    pub init_gain: f64,
}

/// Intermediate activations kept for the backward pass.
pub(crate) struct TrunkTape {
    pub enc_pre: Vec<Feature>,
    pub enc_post: Vec<Feature>,
    pub dec_pre: Vec<Feature>,
    pub dec_post: Vec<Feature>,
}

impl TrunkTape {
    pub fn bottleneck(&self) -> &Feature {
        self.enc_post.last().expect("at least one stage")
    }

    pub fn dec_out(&self) -> &Feature {
        self.dec_post.last().expect("at least one stage")
    }
}

impl Trunk {
    pub fn new(cfg: &NetConfig) -> Result<Self> {
        cfg.validate()?;
        let pad = cfg.kernel / 2;
        let mut enc = Vec::new();
        let mut prev = cfg.in_channels;
        for (i, &ch) in cfg.stage_channels.iter().enumerate() {
            enc.push(Conv3d {
                in_ch: prev,
                out_ch: ch,
                k: cfg.kernel,
                stride: cfg.strides[i],
                pad,
                bias: true,
            });
            prev = ch;
        }
        let mut dec = Vec::new();
        for i in (0..cfg.stage_channels.len()).rev() {
            let out_ch = if i > 0 {
                cfg.stage_channels[i - 1]
            } else {
                cfg.stage_channels[0]
            };
            dec.push(ConvTranspose3d {
                in_ch: cfg.stage_channels[i],
                out_ch,
                k: cfg.kernel,
                stride: cfg.strides[i],
                pad,
                out_pad: cfg.strides[i] - 1,
                bias: true,
            });
        }
        Ok(Self {
            enc,
            dec,
            act: cfg.activation,
            stride_product: cfg.stride_product(),
            in_channels: cfg.in_channels,
            init_gain: cfg.init_gain,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.dec.last().expect("stages").out_ch
    }

    /// Parameter array lengths: per encoder stage (weight, bias), then per
    /// decoder stage (weight, bias).
    pub fn param_lens(&self) -> Vec<usize> {
        let mut lens = Vec::new();
        for c in &self.enc {
            lens.push(c.weight_len());
            lens.push(c.out_ch);
        }
        for t in &self.dec {
            lens.push(t.weight_len());
            lens.push(t.out_ch);
        }
        lens
    }

    /// Fan-in-scaled uniform weights, zero biases, drawn in array order.
    pub fn init_params(&self, rng: &mut impl Rng) -> Vec<Vec<f64>> {
        let mut params = Vec::new();
        for c in &self.enc {
            params.push(uniform_init(rng, c.weight_len(), c.fan_in(), self.init_gain));
            params.push(vec![0.0; c.out_ch]);
        }
        for t in &self.dec {
            params.push(uniform_init(rng, t.weight_len(), t.fan_in(), self.init_gain));
            params.push(vec![0.0; t.out_ch]);
        }
        params
    }

    pub fn check_input(&self, x: &Feature) -> Result<()> {
        if x.channels != self.in_channels {
            return Err(Error::Shape(format!(
                "input has {} channels, network expects {}",
                x.channels, self.in_channels
            )));
        }
        let dims = x.dims;
        for n in [dims.d, dims.h, dims.w] {
            if n % self.stride_product != 0 || n == 0 {
                return Err(Error::Shape(format!(
                    "input dims {dims} not divisible by stride product {}",
                    self.stride_product
                )));
            }
        }
        Ok(())
    }

    pub fn forward(&self, params: &[Vec<f64>], x: &Feature) -> Result<TrunkTape> {
        self.check_input(x)?;
        let stages = self.enc.len();
        let mut enc_pre = Vec::with_capacity(stages);
        let mut enc_post = Vec::with_capacity(stages);
        let mut cur = x;
        for (i, conv) in self.enc.iter().enumerate() {
            let pre = conv.forward(cur, &params[2 * i], Some(&params[2 * i + 1]))?;
            let post = self.act.apply(&pre);
            enc_pre.push(pre);
            enc_post.push(post);
            cur = enc_post.last().expect("pushed");
        }
        let mut dec_pre = Vec::with_capacity(stages);
        let mut dec_post = Vec::with_capacity(stages);
        let mut cur = enc_post.last().expect("stages");
        for (j, tconv) in self.dec.iter().enumerate() {
            let base = 2 * stages + 2 * j;
            let pre = tconv.forward(cur, &params[base], Some(&params[base + 1]))?;
            let post = self.act.apply(&pre);
            dec_pre.push(pre);
            dec_post.push(post);
            cur = dec_post.last().expect("pushed");
        }
        Ok(TrunkTape {
            enc_pre,
            enc_post,
            dec_pre,
            dec_post,
        })
    }

    /// Run the decoder stack alone from a bottleneck feature (used to verify
    /// the no-skip structure).
    pub fn decode(&self, params: &[Vec<f64>], bottleneck: &Feature) -> Result<Feature> {
        let stages = self.enc.len();
        let mut cur = bottleneck.clone();
        for (j, tconv) in self.dec.iter().enumerate() {
            let base = 2 * stages + 2 * j;
            let pre = tconv.forward(&cur, &params[base], Some(&params[base + 1]))?;
            cur = self.act.apply(&pre);
        }
        Ok(cur)
    }

    /// Backpropagate `d_dec_out` through the decoder and `d_bottleneck_extra`
    /// plus the decoder contribution through the encoder, accumulating into
    /// `dparams[0..4*stages]`.
    pub fn backward(
        &self,
        params: &[Vec<f64>],
        x: &Feature,
        tape: &TrunkTape,
        d_dec_out: &Feature,
        d_bottleneck_extra: Option<&Feature>,
        dparams: &mut [Vec<f64>],
        want_input_grad: bool,
    ) -> Result<Option<Feature>> {
        let stages = self.enc.len();
        let mut d = d_dec_out.clone();
        for j in (0..stages).rev() {
            let base = 2 * stages + 2 * j;
            let d_pre = self.act.backward(&tape.dec_pre[j], &d);
            let input = if j == 0 {
                tape.bottleneck()
            } else {
                &tape.dec_post[j - 1]
            };
            let (dw, rest) = dparams[base..].split_first_mut().expect("layout");
            let db = &mut rest[0];
            d = self.dec[j]
                .backward(input, &d_pre, &params[base], dw, Some(db), true)?
                .expect("dx requested");
        }
        if let Some(extra) = d_bottleneck_extra {
            for (a, b) in d.data.iter_mut().zip(&extra.data) {
                *a += b;
            }
        }
        for i in (0..stages).rev() {
            let d_pre = self.act.backward(&tape.enc_pre[i], &d);
            let input = if i == 0 { x } else { &tape.enc_post[i - 1] };
            let want = want_input_grad || i > 0;
            let (dw, rest) = dparams[2 * i..].split_first_mut().expect("layout");
            let db = &mut rest[0];
            let dx = self.enc[i]
                .backward(input, &d_pre, &params[2 * i], dw, Some(db), want)?;
            match dx {
                Some(g) => d = g,
                None => return Ok(None),
            }
        }
        Ok(Some(d))
    }
}

fn uniform_init(rng: &mut impl Rng, len: usize, fan_in: usize, gain: f64) -> Vec<f64> {
    let bound = gain / (fan_in as f64).sqrt();
    (0..len).map(|_| rng.random_range(-bound..bound)).collect()
}

/// The pre-training model: trunk, bias-free reconstruction head, and the
/// pooled affine projection head for contrastive embeddings.
#[derive(Clone, Debug)]
pub struct Network {
    pub cfg: NetConfig,
    pub(crate) trunk: Trunk,
    recon: Conv3d,
    proj: Linear,
}

/// Forward activations for one input; everything the backward pass needs.
pub struct Tape {
    pub input: Feature,
    pub(crate) trunk: TrunkTape,
    pub recon: Feature,
    pub pooled: Vec<f64>,
    pub embedding: Vec<f64>,
}

impl Tape {
    pub fn bottleneck(&self) -> &Feature {
        self.trunk.bottleneck()
    }

    pub fn recon_slice(&self) -> &[f64] {
        &self.recon.data
    }
}

/// Upstream gradients feeding the backward pass; absent slots contribute
/// nothing.
#[derive(Default)]
pub struct Upstream<'a> {
    pub d_recon: Option<&'a [f64]>,
    pub d_pooled: Option<&'a [f64]>,
    pub d_embedding: Option<&'a [f64]>,
}

impl Network {
    pub fn new(cfg: NetConfig) -> Result<Self> {
        let trunk = Trunk::new(&cfg)?;
        let recon = Conv3d {
            in_ch: trunk.out_channels(),
            out_ch: 1,
            k: cfg.kernel,
            stride: 1,
            pad: cfg.kernel / 2,
            bias: false,
        };
        let proj = Linear {
            in_dim: cfg.bottleneck_channels(),
            out_dim: cfg.embed_dim,
        };
        Ok(Self {
            cfg,
            trunk,
            recon,
            proj,
        })
    }

    pub fn param_lens(&self) -> Vec<usize> {
        let mut lens = self.trunk.param_lens();
        lens.push(self.recon.weight_len());
        lens.push(self.proj.weight_len());
        lens.push(self.proj.out_dim);
        lens
    }

    /// Deterministic fan-in-scaled uniform initialization.
    pub fn init_state(&self, seed: u64) -> ModelState {
        let mut rng = chacha(seed);
        let gain = self.cfg.init_gain;
        let mut params = self.trunk.init_params(&mut rng);
        params.push(uniform_init(&mut rng, self.recon.weight_len(), self.recon.fan_in(), gain));
        params.push(uniform_init(&mut rng, self.proj.weight_len(), self.proj.in_dim, gain));
        params.push(vec![0.0; self.proj.out_dim]);
        ModelState {
            params,
            rng_seed: seed,
        }
    }

    fn check_params(&self, params: &[Vec<f64>]) -> Result<()> {
        let lens = self.param_lens();
        if params.len() != lens.len()
            || params.iter().zip(&lens).any(|(p, &l)| p.len() != l)
        {
            return Err(Error::State("parameter arrays do not match network".into()));
        }
        Ok(())
    }

    /// Run the full forward pass, keeping activations for backward.
    pub fn forward_tape(&self, state: &ModelState, x: Feature) -> Result<Tape> {
        self.check_params(&state.params)?;
        let trunk_tape = self.trunk.forward(&state.params, &x)?;
        let n_trunk = self.trunk.param_lens().len();
        let recon = self
            .recon
            .forward(trunk_tape.dec_out(), &state.params[n_trunk], None)?;
        let pooled = global_avg_pool(trunk_tape.bottleneck());
        let embedding = self.proj.forward(
            &pooled,
            &state.params[n_trunk + 1],
            &state.params[n_trunk + 2],
        );
        Ok(Tape {
            input: x,
            trunk: trunk_tape,
            recon,
            pooled,
            embedding,
        })
    }

    /// Volume-level forward: reconstruction plus contrastive embedding.
    pub fn forward(&self, state: &ModelState, x: &Volume) -> Result<(Volume, Vec<f64>)> {
        if self.cfg.in_channels != 1 {
            return Err(Error::Shape(format!(
                "volume forward requires a single-channel network, got {}",
                self.cfg.in_channels
            )));
        }
        let feat = Feature::from_data(1, x.dims(), x.to_f64())?;
        let tape = self.forward_tape(state, feat)?;
        let recon = Volume::from_f64(tape.recon.dims, &tape.recon.data)?;
        Ok((recon, tape.embedding))
    }

    /// Reverse-mode gradients for every parameter and, when requested, the
    /// input voxels.
    pub fn backward(
        &self,
        state: &ModelState,
        tape: &Tape,
        upstream: Upstream<'_>,
        want_input_grad: bool,
    ) -> Result<TapeGradients> {
        self.check_params(&state.params)?;
        let mut dparams = state.zeros_like();
        let n_trunk = self.trunk.param_lens().len();
        let bneck = tape.trunk.bottleneck();

        // Projection head path into the pooled vector.
        let mut d_pooled = vec![0.0; self.proj.in_dim];
        if let Some(d_emb) = upstream.d_embedding {
            let (dw, rest) = dparams[n_trunk + 1..].split_first_mut().expect("layout");
            let db = &mut rest[0];
            d_pooled = self.proj.backward(
                &tape.pooled,
                d_emb,
                &state.params[n_trunk + 1],
                dw,
                db,
            );
        }
        if let Some(extra) = upstream.d_pooled {
            for (a, b) in d_pooled.iter_mut().zip(extra) {
                *a += b;
            }
        }
        let has_pooled_grad = d_pooled.iter().any(|&v| v != 0.0);
        let d_bneck_extra = has_pooled_grad
            .then(|| global_avg_pool_backward(bneck.dims, bneck.channels, &d_pooled));

        // Reconstruction head path into decoder features.
        let dec_out = tape.trunk.dec_out();
        let d_dec_out = match upstream.d_recon {
            Some(d_recon) => {
                let d_recon = Feature::from_data(1, tape.recon.dims, d_recon.to_vec())?;
                self.recon
                    .backward(
                        dec_out,
                        &d_recon,
                        &state.params[n_trunk],
                        &mut dparams[n_trunk],
                        None,
                        true,
                    )?
                    .expect("dx requested")
            }
            None => Feature::zeros(dec_out.channels, dec_out.dims),
        };

        let input = self.trunk.backward(
            &state.params,
            &tape.input,
            &tape.trunk,
            &d_dec_out,
            d_bneck_extra.as_ref(),
            &mut dparams[..n_trunk],
            want_input_grad,
        )?;
        Ok(TapeGradients {
            params: dparams,
            input: if want_input_grad { input } else { None },
        })
    }

    /// Decoder + reconstruction head run directly from a bottleneck feature.
    pub fn decode_from_bottleneck(
        &self,
        state: &ModelState,
        bottleneck: &Feature,
    ) -> Result<Feature> {
        let dec_out = self.trunk.decode(&state.params, bottleneck)?;
        let n_trunk = self.trunk.param_lens().len();
        self.recon.forward(&dec_out, &state.params[n_trunk], None)
    }
}

// ---------------------------------------------------------------------------
// Checkpoint format ("MVPC")
// ---------------------------------------------------------------------------

pub const CKPT_MAGIC: [u8; 4] = *b"MVPC";
pub const CKPT_VERSION: u8 = 1;

/// FNV-1a 64-bit hash; applied to the canonical JSON of a config to key
/// checkpoints to the architecture that produced them.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn config_hash<T: Serialize>(cfg: &T) -> u64 {
    let json = serde_json::to_vec(cfg).expect("config serializes");
    fnv1a64(&json)
}

pub fn save_checkpoint(path: &Path, cfg_hash: u64, state: &ModelState) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&CKPT_MAGIC)?;
    w.write_all(&[CKPT_VERSION, 0, 0, 0])?;
    w.write_all(&cfg_hash.to_le_bytes())?;
    w.write_all(&state.rng_seed.to_le_bytes())?;
    w.write_all(&(state.params.len() as u32).to_le_bytes())?;
    for arr in &state.params {
        w.write_all(&(arr.len() as u64).to_le_bytes())?;
        for &v in arr {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path, expected_hash: u64) -> Result<ModelState> {
    let mut r = BufReader::new(File::open(path)?);
    let mut header = [0u8; 28];
    r.read_exact(&mut header).map_err(truncated)?;
    if header[0..4] != CKPT_MAGIC {
        return Err(Error::BadMagic);
    }
    if header[4] != CKPT_VERSION {
        return Err(Error::UnsupportedVersion(header[4]));
    }
    let got_hash = u64::from_le_bytes(header[8..16].try_into().unwrap());
    if got_hash != expected_hash {
        return Err(Error::Format(format!(
            "config hash mismatch: checkpoint {got_hash:#018x}, expected {expected_hash:#018x}"
        )));
    }
    let rng_seed = u64::from_le_bytes(header[16..24].try_into().unwrap());
    let count = u32::from_le_bytes(header[24..28].try_into().unwrap()) as usize;
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let mut lenb = [0u8; 8];
        r.read_exact(&mut lenb).map_err(truncated)?;
        let len = u64::from_le_bytes(lenb);
        if len > (isize::MAX as u64) / 8 {
            return Err(Error::DimOverflow(format!("parameter array of {len} values")));
        }
        let mut bytes = vec![0u8; (len * 8) as usize];
        r.read_exact(&mut bytes).map_err(truncated)?;
        params.push(
            bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        );
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::Format("trailing bytes after checkpoint payload".into()));
    }
    Ok(ModelState { params, rng_seed })
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Truncated {
            expected: 0,
            got: 0,
        }
    } else {
        Error::Io(e)
    }
}

/// Load a checkpoint and verify the arrays match the network layout.
pub fn load_checkpoint_for(path: &Path, net: &Network) -> Result<ModelState> {
    let state = load_checkpoint(path, config_hash(&net.cfg))?;
    let lens = net.param_lens();
    if state.params.len() != lens.len()
        || state.params.iter().zip(&lens).any(|(p, &l)| p.len() != l)
    {
        return Err(Error::Format(
            "checkpoint arrays do not match network layout".into(),
        ));
    }
    if !state.all_finite() {
        return Err(Error::NonFinite("checkpoint parameters".into()));
    }
    Ok(state)
}
