//! The desk-scale denoising network epsilon_theta: a two-resolution
//! convolutional encoder/decoder with FiLM time conditioning and a single
//! decoupled cross-attention block at the bottleneck.
//!
//! Forward and backward passes are written out by hand; gradients are checked
//! against central finite differences in the trainer tests.

use ndarray::{Array1, Array2, Array3, Array4, ArrayViewD, ArrayViewMutD};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    decoupled_cross_attention_cached, decoupled_cross_attention_backward, AttentionCache,
    AttentionGrads, AttentionParams,
};
use crate::diffusion::{Latent, NoisePredictor};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    /// Latent tensor shape (channels, height, width); height and width even.
    pub latent_channels: usize,
    pub latent_height: usize,
    pub latent_width: usize,
    /// Encoder width at full resolution; the bottleneck runs at twice this.
    pub width: usize,
    pub d_time: usize,
    pub d_text: usize,
    pub d_img: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub text_tokens: usize,
    pub face_tokens: usize,
    /// Largest timestep the model accepts (the schedule length).
    pub max_timestep: usize,
    /// Zero-init the image-branch projections so training starts from the
    /// text-only model.
    pub adapter_zero_init: bool,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            latent_channels: 4,
            latent_height: 16,
            latent_width: 16,
            width: 16,
            d_time: 32,
            d_text: 32,
            d_img: 32,
            d_k: 32,
            d_v: 32,
            text_tokens: 8,
            face_tokens: 4,
            max_timestep: 1000,
            adapter_zero_init: true,
        }
    }
}

impl DenoiserConfig {
    /// A minimal configuration (about 1.5k parameters) for gradient checks.
    pub fn tiny() -> Self {
        Self {
            latent_channels: 4,
            latent_height: 8,
            latent_width: 8,
            width: 4,
            d_time: 8,
            d_text: 8,
            d_img: 8,
            d_k: 8,
            d_v: 8,
            text_tokens: 3,
            face_tokens: 2,
            max_timestep: 50,
            adapter_zero_init: true,
        }
    }

    pub fn d_model(&self) -> usize {
        2 * self.width
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_height % 2 != 0 || self.latent_width % 2 != 0 {
            return Err(Error::invalid("latent size", "height and width must be even"));
        }
        if self.latent_height == 0 || self.latent_width == 0 || self.latent_channels == 0 {
            return Err(Error::invalid("latent size", "must be positive"));
        }
        if self.d_time % 2 != 0 || self.d_time == 0 {
            return Err(Error::invalid("d_time", "must be positive and even"));
        }
        if self.width == 0 || self.d_k == 0 || self.d_v == 0 || self.d_text == 0 || self.d_img == 0 {
            return Err(Error::invalid("dimensions", "all model dimensions must be positive"));
        }
        if self.max_timestep == 0 {
            return Err(Error::invalid("max_timestep", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub weight: Array4<f64>, // out x in x 3 x 3
    pub bias: Array1<f64>,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Array2<f64>, // in x out
    pub bias: Array1<f64>,
}

/// The full parameter set theta.
#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser {
    pub config: DenoiserConfig,
    pub conv_in: Conv2d,
    pub conv_down: Conv2d,
    /// FiLM projection of the sinusoidal time embedding: d_time -> 2*d_model
    /// (per-channel scale then shift at the bottleneck).
    pub time_proj: Linear,
    pub attn: AttentionParams,
    pub attn_out: Linear,
    pub conv_up: Conv2d,
    pub conv_out: Conv2d,
}

/// Round to the nearest f32 value. Parameters live on the f32 grid so the
/// float32 checkpoint container is lossless.
fn snap32(x: f64) -> f64 {
    x as f32 as f64
}

fn fan_in_uniform(rows: usize, cols: usize, fan_in: usize, rng: &mut rng::CrateRng) -> Array2<f64> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Array2::from_shape_simple_fn((rows, cols), || snap32(rng.random_range(-bound..bound)))
}

fn conv_init(out_ch: usize, in_ch: usize, stride: usize, rng: &mut rng::CrateRng) -> Conv2d {
    let fan_in = in_ch * 9;
    let bound = 1.0 / (fan_in as f64).sqrt();
    Conv2d {
        weight: Array4::from_shape_simple_fn((out_ch, in_ch, 3, 3), || snap32(rng.random_range(-bound..bound))),
        bias: Array1::zeros(out_ch),
        stride,
    }
}

impl Denoiser {
    pub fn init(config: DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::rng_from(rng::derive_seed(seed, "denoiser-init", 0));
        let w = config.width;
        let d_model = config.d_model();
        let conv_in = conv_init(w, config.latent_channels, 1, &mut r);
        let conv_down = conv_init(d_model, w, 2, &mut r);
        let time_proj = Linear {
            weight: fan_in_uniform(config.d_time, 2 * d_model, config.d_time, &mut r),
            bias: Array1::zeros(2 * d_model),
        };
        let w_q = fan_in_uniform(d_model, config.d_k, d_model, &mut r);
        let w_k = fan_in_uniform(config.d_text, config.d_k, config.d_text, &mut r);
        let w_v = fan_in_uniform(config.d_text, config.d_v, config.d_text, &mut r);
        let (w_kp, w_vp) = if config.adapter_zero_init {
            (
                Array2::zeros((config.d_img, config.d_k)),
                Array2::zeros((config.d_img, config.d_v)),
            )
        } else {
            (
                fan_in_uniform(config.d_img, config.d_k, config.d_img, &mut r),
                fan_in_uniform(config.d_img, config.d_v, config.d_img, &mut r),
            )
        };
        let attn = AttentionParams { w_q, w_k, w_v, w_kp, w_vp };
        let attn_out = Linear {
            weight: fan_in_uniform(config.d_v, d_model, config.d_v, &mut r),
            bias: Array1::zeros(d_model),
        };
        let conv_up = conv_init(w, d_model, 1, &mut r);
        let conv_out = conv_init(config.latent_channels, w, 1, &mut r);
        Ok(Self { config, conv_in, conv_down, time_proj, attn, attn_out, conv_up, conv_out })
    }

    /// Deep immutable snapshot; training the original leaves it untouched.
    pub fn freeze_copy(&self) -> Denoiser {
        self.clone()
    }

    pub fn latent_shape(&self) -> (usize, usize, usize) {
        (self.config.latent_channels, self.config.latent_height, self.config.latent_width)
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, v)| v.len()).sum()
    }

    /// Named parameter views in a fixed order shared with [`DenoiserGrads`].
    pub fn params(&self) -> Vec<(&'static str, ArrayViewD<'_, f64>)> {
        vec![
            ("conv_in.weight", self.conv_in.weight.view().into_dyn()),
            ("conv_in.bias", self.conv_in.bias.view().into_dyn()),
            ("conv_down.weight", self.conv_down.weight.view().into_dyn()),
            ("conv_down.bias", self.conv_down.bias.view().into_dyn()),
            ("time_proj.weight", self.time_proj.weight.view().into_dyn()),
            ("time_proj.bias", self.time_proj.bias.view().into_dyn()),
            ("attn.w_q", self.attn.w_q.view().into_dyn()),
            ("attn.w_k", self.attn.w_k.view().into_dyn()),
            ("attn.w_v", self.attn.w_v.view().into_dyn()),
            ("attn.w_kp", self.attn.w_kp.view().into_dyn()),
            ("attn.w_vp", self.attn.w_vp.view().into_dyn()),
            ("attn_out.weight", self.attn_out.weight.view().into_dyn()),
            ("attn_out.bias", self.attn_out.bias.view().into_dyn()),
            ("conv_up.weight", self.conv_up.weight.view().into_dyn()),
            ("conv_up.bias", self.conv_up.bias.view().into_dyn()),
            ("conv_out.weight", self.conv_out.weight.view().into_dyn()),
            ("conv_out.bias", self.conv_out.bias.view().into_dyn()),
        ]
    }

    pub fn params_mut(&mut self) -> Vec<(&'static str, ArrayViewMutD<'_, f64>)> {
        vec![
            ("conv_in.weight", self.conv_in.weight.view_mut().into_dyn()),
            ("conv_in.bias", self.conv_in.bias.view_mut().into_dyn()),
            ("conv_down.weight", self.conv_down.weight.view_mut().into_dyn()),
            ("conv_down.bias", self.conv_down.bias.view_mut().into_dyn()),
            ("time_proj.weight", self.time_proj.weight.view_mut().into_dyn()),
            ("time_proj.bias", self.time_proj.bias.view_mut().into_dyn()),
            ("attn.w_q", self.attn.w_q.view_mut().into_dyn()),
            ("attn.w_k", self.attn.w_k.view_mut().into_dyn()),
            ("attn.w_v", self.attn.w_v.view_mut().into_dyn()),
            ("attn.w_kp", self.attn.w_kp.view_mut().into_dyn()),
            ("attn.w_vp", self.attn.w_vp.view_mut().into_dyn()),
            ("attn_out.weight", self.attn_out.weight.view_mut().into_dyn()),
            ("attn_out.bias", self.attn_out.bias.view_mut().into_dyn()),
            ("conv_up.weight", self.conv_up.weight.view_mut().into_dyn()),
            ("conv_up.bias", self.conv_up.bias.view_mut().into_dyn()),
            ("conv_out.weight", self.conv_out.weight.view_mut().into_dyn()),
            ("conv_out.bias", self.conv_out.bias.view_mut().into_dyn()),
        ]
    }

    /// True iff every parameter tensor is bit-identical.
    pub fn params_bit_equal(&self, other: &Denoiser) -> bool {
        let a = self.params();
        let b = other.params();
        a.len() == b.len()
            && a.iter().zip(b.iter()).all(|((na, va), (nb, vb))| {
                na == nb
                    && va.shape() == vb.shape()
                    && va.iter().zip(vb.iter()).all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }

    fn check_inputs(&self, z_t: &Latent, t: usize, c_t: &Array2<f64>, c_i: &Array2<f64>) -> Result<()> {
        if z_t.shape() != self.latent_shape() {
            return Err(Error::shape("denoiser_forward", format!("{:?}", self.latent_shape()), format!("{:?}", z_t.shape())));
        }
        if t < 1 || t > self.config.max_timestep {
            return Err(Error::invalid("t", format!("must be in [1, {}], got {t}", self.config.max_timestep)));
        }
        if c_t.dim() != (self.config.text_tokens, self.config.d_text) {
            return Err(Error::shape(
                "denoiser_forward",
                format!("text tokens ({}, {})", self.config.text_tokens, self.config.d_text),
                format!("{:?}", c_t.dim()),
            ));
        }
        if c_i.dim() != (self.config.face_tokens, self.config.d_img) {
            return Err(Error::shape(
                "denoiser_forward",
                format!("face tokens ({}, {})", self.config.face_tokens, self.config.d_img),
                format!("{:?}", c_i.dim()),
            ));
        }
        Ok(())
    }

    pub fn forward(&self, z_t: &Latent, t: usize, c_t: &Array2<f64>, c_i: &Array2<f64>) -> Result<Latent> {
        Ok(self.forward_cached(z_t, t, c_t, c_i)?.0)
    }

    pub fn forward_cached(
        &self,
        z_t: &Latent,
        t: usize,
        c_t: &Array2<f64>,
        c_i: &Array2<f64>,
    ) -> Result<(Latent, ForwardCache)> {
        self.check_inputs(z_t, t, c_t, c_i)?;
        let (h2_dim_y, h2_dim_x) = (self.config.latent_height / 2, self.config.latent_width / 2);
        let d_model = self.config.d_model();

        let h1_pre = conv2d(&z_t.data, &self.conv_in);
        let h1 = silu(&h1_pre);
        let h2_pre = conv2d(&h1, &self.conv_down);
        let h2 = silu(&h2_pre);

        let temb = sinusoidal_embedding(t, self.config.d_time);
        let film = self.time_proj.weight.t().dot(&temb) + &self.time_proj.bias;
        let (scale, shift) = film_split(&film, d_model);
        let mut h3 = h2.clone();
        for c in 0..d_model {
            for y in 0..h2_dim_y {
                for x in 0..h2_dim_x {
                    h3[[c, y, x]] = h2[[c, y, x]] * (1.0 + scale[c]) + shift[c];
                }
            }
        }

        let tokens = to_tokens(&h3);
        let (attn_raw, attn_cache) = decoupled_cross_attention_cached(&tokens, c_t, c_i, &self.attn)?;
        let zprime = &tokens + &(attn_raw.dot(&self.attn_out.weight) + &self.attn_out.bias);
        let h4 = from_tokens(&zprime, d_model, h2_dim_y, h2_dim_x);

        let up = upsample2x(&h4);
        let h5_pre = conv2d(&up, &self.conv_up);
        let h5 = silu(&h5_pre);
        let out = conv2d(&h5, &self.conv_out);

        let cache = ForwardCache {
            z_in: z_t.data.clone(),
            h1_pre,
            h1,
            h2_pre,
            h2,
            temb,
            scale,
            h3,
            attn_cache,
            attn_raw,
            up,
            h5_pre,
            h5,
        };
        Ok((Latent { data: out }, cache))
    }

    /// Backward pass accumulating into `grads`; returns gradients with
    /// respect to the input latent, the text tokens, and the face tokens.
    pub fn backward(
        &self,
        d_out: &Array3<f64>,
        cache: &ForwardCache,
        grads: &mut DenoiserGrads,
    ) -> (Array3<f64>, Array2<f64>, Array2<f64>) {
        let d_model = self.config.d_model();
        let (h2_dim_y, h2_dim_x) = (self.config.latent_height / 2, self.config.latent_width / 2);

        let d_h5 = conv2d_backward(&cache.h5, &self.conv_out, d_out, &mut grads.conv_out);
        let d_h5_pre = silu_backward(&cache.h5_pre, &d_h5);
        let d_up = conv2d_backward(&cache.up, &self.conv_up, &d_h5_pre, &mut grads.conv_up);
        let d_h4 = upsample2x_backward(&d_up);

        let d_zprime = to_tokens(&d_h4);
        // zprime = tokens + attn_raw . W_o + b_o
        grads.attn_out.weight += &cache.attn_raw.t().dot(&d_zprime);
        for j in 0..d_model {
            grads.attn_out.bias[j] += d_zprime.column(j).sum();
        }
        let d_attn_raw = d_zprime.dot(&self.attn_out.weight.t());
        let mut d_tokens = d_zprime;
        let (d_tokens_attn, d_ct, d_ci) =
            decoupled_cross_attention_backward(&d_attn_raw, &cache.attn_cache, &self.attn, &mut grads.attn);
        d_tokens += &d_tokens_attn;

        let d_h3 = from_tokens(&d_tokens, d_model, h2_dim_y, h2_dim_x);
        // FiLM: h3 = h2 * (1 + scale_c) + shift_c
        let mut d_h2 = Array3::zeros(cache.h2.raw_dim());
        let mut d_film = Array1::zeros(2 * d_model);
        for c in 0..d_model {
            let mut d_scale = 0.0;
            let mut d_shift = 0.0;
            for y in 0..h2_dim_y {
                for x in 0..h2_dim_x {
                    let g = d_h3[[c, y, x]];
                    d_h2[[c, y, x]] = g * (1.0 + cache.scale[c]);
                    d_scale += g * cache.h2[[c, y, x]];
                    d_shift += g;
                }
            }
            d_film[c] = d_scale;
            d_film[d_model + c] = d_shift;
        }
        // film = W_t^T temb + b_t
        for i in 0..self.config.d_time {
            for j in 0..2 * d_model {
                grads.time_proj.weight[[i, j]] += cache.temb[i] * d_film[j];
            }
        }
        grads.time_proj.bias += &d_film;

        let d_h2_pre = silu_backward(&cache.h2_pre, &d_h2);
        let d_h1 = conv2d_backward(&cache.h1, &self.conv_down, &d_h2_pre, &mut grads.conv_down);
        let d_h1_pre = silu_backward(&cache.h1_pre, &d_h1);
        let d_z = conv2d_backward(&cache.z_in, &self.conv_in, &d_h1_pre, &mut grads.conv_in);

        (d_z, d_ct, d_ci)
    }
}

impl NoisePredictor for Denoiser {
    fn predict(&self, z_t: &Latent, t: usize, text_tokens: &Array2<f64>, face_tokens: &Array2<f64>) -> Result<Latent> {
        self.forward(z_t, t, text_tokens, face_tokens)
    }

    fn latent_shape(&self) -> (usize, usize, usize) {
        Denoiser::latent_shape(self)
    }
}

/// Intermediate activations retained for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    z_in: Array3<f64>,
    h1_pre: Array3<f64>,
    h1: Array3<f64>,
    h2_pre: Array3<f64>,
    h2: Array3<f64>,
    temb: Array1<f64>,
    scale: Array1<f64>,
    h3: Array3<f64>,
    attn_cache: AttentionCache,
    attn_raw: Array2<f64>,
    up: Array3<f64>,
    h5_pre: Array3<f64>,
    h5: Array3<f64>,
}

/// Per-tensor gradient accumulators mirroring [`Denoiser`].
#[derive(Debug, Clone)]
pub struct DenoiserGrads {
    pub conv_in: ConvGrads,
    pub conv_down: ConvGrads,
    pub time_proj: LinearGrads,
    pub attn: AttentionGrads,
    pub attn_out: LinearGrads,
    pub conv_up: ConvGrads,
    pub conv_out: ConvGrads,
}

#[derive(Debug, Clone)]
pub struct ConvGrads {
    pub weight: Array4<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct LinearGrads {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl DenoiserGrads {
    pub fn zeros_like(model: &Denoiser) -> Self {
        let conv = |c: &Conv2d| ConvGrads {
            weight: Array4::zeros(c.weight.raw_dim()),
            bias: Array1::zeros(c.bias.raw_dim()),
        };
        let lin = |l: &Linear| LinearGrads {
            weight: Array2::zeros(l.weight.raw_dim()),
            bias: Array1::zeros(l.bias.raw_dim()),
        };
        Self {
            conv_in: conv(&model.conv_in),
            conv_down: conv(&model.conv_down),
            time_proj: lin(&model.time_proj),
            attn: AttentionGrads::zeros_like(&model.attn),
            attn_out: lin(&model.attn_out),
            conv_up: conv(&model.conv_up),
            conv_out: conv(&model.conv_out),
        }
    }

    /// Views aligned with [`Denoiser::params`] order.
    pub fn views(&self) -> Vec<(&'static str, ArrayViewD<'_, f64>)> {
        vec![
            ("conv_in.weight", self.conv_in.weight.view().into_dyn()),
            ("conv_in.bias", self.conv_in.bias.view().into_dyn()),
            ("conv_down.weight", self.conv_down.weight.view().into_dyn()),
            ("conv_down.bias", self.conv_down.bias.view().into_dyn()),
            ("time_proj.weight", self.time_proj.weight.view().into_dyn()),
            ("time_proj.bias", self.time_proj.bias.view().into_dyn()),
            ("attn.w_q", self.attn.w_q.view().into_dyn()),
            ("attn.w_k", self.attn.w_k.view().into_dyn()),
            ("attn.w_v", self.attn.w_v.view().into_dyn()),
            ("attn.w_kp", self.attn.w_kp.view().into_dyn()),
            ("attn.w_vp", self.attn.w_vp.view().into_dyn()),
            ("attn_out.weight", self.attn_out.weight.view().into_dyn()),
            ("attn_out.bias", self.attn_out.bias.view().into_dyn()),
            ("conv_up.weight", self.conv_up.weight.view().into_dyn()),
            ("conv_up.bias", self.conv_up.bias.view().into_dyn()),
            ("conv_out.weight", self.conv_out.weight.view().into_dyn()),
            ("conv_out.bias", self.conv_out.bias.view().into_dyn()),
        ]
    }

    pub fn scale(&mut self, factor: f64) {
        let apply = |a: &mut ArrayViewMutD<f64>| a.iter_mut().for_each(|v| *v *= factor);
        apply(&mut self.conv_in.weight.view_mut().into_dyn());
        apply(&mut self.conv_in.bias.view_mut().into_dyn());
        apply(&mut self.conv_down.weight.view_mut().into_dyn());
        apply(&mut self.conv_down.bias.view_mut().into_dyn());
        apply(&mut self.time_proj.weight.view_mut().into_dyn());
        apply(&mut self.time_proj.bias.view_mut().into_dyn());
        apply(&mut self.attn.w_q.view_mut().into_dyn());
        apply(&mut self.attn.w_k.view_mut().into_dyn());
        apply(&mut self.attn.w_v.view_mut().into_dyn());
        apply(&mut self.attn.w_kp.view_mut().into_dyn());
        apply(&mut self.attn.w_vp.view_mut().into_dyn());
        apply(&mut self.attn_out.weight.view_mut().into_dyn());
        apply(&mut self.attn_out.bias.view_mut().into_dyn());
        apply(&mut self.conv_up.weight.view_mut().into_dyn());
        apply(&mut self.conv_up.bias.view_mut().into_dyn());
        apply(&mut self.conv_out.weight.view_mut().into_dyn());
        apply(&mut self.conv_out.bias.view_mut().into_dyn());
    }
}

fn silu(x: &Array3<f64>) -> Array3<f64> {
    x.mapv(|v| v / (1.0 + (-v).exp()))
}

fn silu_backward(x_pre: &Array3<f64>, g: &Array3<f64>) -> Array3<f64> {
    let mut out = g.clone();
    out.zip_mut_with(x_pre, |gv, &xv| {
        let s = 1.0 / (1.0 + (-xv).exp());
        *gv *= s * (1.0 + xv * (1.0 - s));
    });
    out
}

/// 3x3 convolution, zero padding 1.
fn conv2d(x: &Array3<f64>, conv: &Conv2d) -> Array3<f64> {
    let (in_ch, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let out_ch = conv.weight.shape()[0];
    let s = conv.stride;
    let oh = (h - 1) / s + 1;
    let ow = (w - 1) / s + 1;
    let mut out = Array3::zeros((out_ch, oh, ow));
    for o in 0..out_ch {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = conv.bias[o];
                for c in 0..in_ch {
                    for ky in 0..3 {
                        let iy = (oy * s + ky) as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let ix = (ox * s + kx) as isize - 1;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            acc += conv.weight[[o, c, ky, kx]] * x[[c, iy as usize, ix as usize]];
                        }
                    }
                }
                out[[o, oy, ox]] = acc;
            }
        }
    }
    out
}

fn conv2d_backward(x: &Array3<f64>, conv: &Conv2d, g: &Array3<f64>, grads: &mut ConvGrads) -> Array3<f64> {
    let (in_ch, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (out_ch, oh, ow) = (g.shape()[0], g.shape()[1], g.shape()[2]);
    let s = conv.stride;
    let mut dx = Array3::zeros((in_ch, h, w));
    for o in 0..out_ch {
        for oy in 0..oh {
            for ox in 0..ow {
                let gv = g[[o, oy, ox]];
                grads.bias[o] += gv;
                for c in 0..in_ch {
                    for ky in 0..3 {
                        let iy = (oy * s + ky) as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let ix = (ox * s + kx) as isize - 1;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let (iy, ix) = (iy as usize, ix as usize);
                            grads.weight[[o, c, ky, kx]] += gv * x[[c, iy, ix]];
                            dx[[c, iy, ix]] += gv * conv.weight[[o, c, ky, kx]];
                        }
                    }
                }
            }
        }
    }
    dx
}

fn upsample2x(x: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    Array3::from_shape_fn((c, h * 2, w * 2), |(ch, y, xx)| x[[ch, y / 2, xx / 2]])
}

fn upsample2x_backward(g: &Array3<f64>) -> Array3<f64> {
    let (c, h2, w2) = (g.shape()[0], g.shape()[1], g.shape()[2]);
    let mut out = Array3::zeros((c, h2 / 2, w2 / 2));
    for ch in 0..c {
        for y in 0..h2 {
            for x in 0..w2 {
                out[[ch, y / 2, x / 2]] += g[[ch, y, x]];
            }
        }
    }
    out
}

/// (C, H, W) -> (H*W, C) token matrix, row n = y*W + x.
fn to_tokens(x: &Array3<f64>) -> Array2<f64> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    Array2::from_shape_fn((h * w, c), |(n, ch)| x[[ch, n / w, n % w]])
}

fn from_tokens(tokens: &Array2<f64>, c: usize, h: usize, w: usize) -> Array3<f64> {
    Array3::from_shape_fn((c, h, w), |(ch, y, x)| tokens[[y * w + x, ch]])
}

fn film_split(film: &Array1<f64>, d_model: usize) -> (Array1<f64>, Array1<f64>) {
    let scale = Array1::from_shape_fn(d_model, |i| film[i]);
    let shift = Array1::from_shape_fn(d_model, |i| film[d_model + i]);
    (scale, shift)
}

/// Transformer-style sinusoidal features of the integer timestep.
pub fn sinusoidal_embedding(t: usize, dim: usize) -> Array1<f64> {
    let half = dim / 2;
    let mut out = Array1::zeros(dim);
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        out[i] = (t as f64 * freq).sin();
        out[half + i] = (t as f64 * freq).cos();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;

    fn tokens_for(config: &DenoiserConfig, seed: u64) -> (Array2<f64>, Array2<f64>) {
        let mut r = rng_from(seed);
        let c_t = Array2::from_shape_simple_fn((config.text_tokens, config.d_text), || r.random_range(-1.0..1.0));
        let c_i = Array2::from_shape_simple_fn((config.face_tokens, config.d_img), || r.random_range(-1.0..1.0));
        (c_t, c_i)
    }

    #[test]
    fn forward_is_deterministic_and_shape_preserving() {
        let config = DenoiserConfig::tiny();
        let model = Denoiser::init(config.clone(), 1).unwrap();
        let mut r = rng_from(2);
        let z = Latent::standard_normal(model.latent_shape(), &mut r);
        let (c_t, c_i) = tokens_for(&config, 3);
        let a = model.forward(&z, 7, &c_t, &c_i).unwrap();
        let b = model.forward(&z, 7, &c_t, &c_i).unwrap();
        assert_eq!(a.data, b.data);
        assert_eq!(a.shape(), z.shape());
        assert!(a.data.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn timestep_out_of_range_rejected() {
        let config = DenoiserConfig::tiny();
        let model = Denoiser::init(config.clone(), 1).unwrap();
        let z = Latent::zeros(model.latent_shape());
        let (c_t, c_i) = tokens_for(&config, 3);
        assert!(model.forward(&z, 0, &c_t, &c_i).is_err());
        assert!(model.forward(&z, config.max_timestep + 1, &c_t, &c_i).is_err());
    }

    #[test]
    fn default_init_ignores_face_tokens_and_random_init_does_not() {
        // zero-initialized adapter: the image branch contributes nothing
        let config = DenoiserConfig::tiny();
        let model = Denoiser::init(config.clone(), 5).unwrap();
        let mut r = rng_from(6);
        let z = Latent::standard_normal(model.latent_shape(), &mut r);
        let (c_t, c_i) = tokens_for(&config, 7);
        let (_, c_i2) = tokens_for(&config, 8);
        let a = model.forward(&z, 3, &c_t, &c_i).unwrap();
        let b = model.forward(&z, 3, &c_t, &c_i2).unwrap();
        assert_eq!(a.data, b.data);

        // randomly initialized adapter: every face token matters
        let mut config_r = config.clone();
        config_r.adapter_zero_init = false;
        let model_r = Denoiser::init(config_r.clone(), 5).unwrap();
        for tok in 0..config_r.face_tokens {
            let mut c_i_perturbed = c_i.clone();
            c_i_perturbed[[tok, 0]] += 0.5;
            let base = model_r.forward(&z, 3, &c_t, &c_i).unwrap();
            let pert = model_r.forward(&z, 3, &c_t, &c_i_perturbed).unwrap();
            let max_diff = base
                .data
                .iter()
                .zip(pert.data.iter())
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max);
            assert!(max_diff > 0.0, "face token {tok} had no effect");
        }
    }

    #[test]
    fn freeze_copy_isolates_and_is_idempotent() {
        let config = DenoiserConfig::tiny();
        let mut model = Denoiser::init(config, 9).unwrap();
        let frozen = model.freeze_copy();
        assert!(model.params_bit_equal(&frozen));
        let copy_of_copy = frozen.freeze_copy();
        assert!(frozen.params_bit_equal(&copy_of_copy));

        // mutate the original; the copy must not move
        model.conv_in.weight[[0, 0, 0, 0]] += 1.0;
        assert!(!model.params_bit_equal(&frozen));
        assert!(frozen.params_bit_equal(&copy_of_copy));
    }

    #[test]
    fn param_names_align_with_grads() {
        let model = Denoiser::init(DenoiserConfig::tiny(), 1).unwrap();
        let grads = DenoiserGrads::zeros_like(&model);
        let pn: Vec<_> = model.params().into_iter().map(|(n, v)| (n, v.shape().to_vec())).collect();
        let gn: Vec<_> = grads.views().into_iter().map(|(n, v)| (n, v.shape().to_vec())).collect();
        assert_eq!(pn, gn);
    }

    #[test]
    fn param_count_default_is_desk_scale() {
        let model = Denoiser::init(DenoiserConfig::default(), 1).unwrap();
        let n = model.param_count();
        assert!(n > 10_000 && n < 100_000, "param count {n}");
        let tiny = Denoiser::init(DenoiserConfig::tiny(), 1).unwrap();
        assert!(tiny.param_count() < 10_000, "tiny param count {}", tiny.param_count());
    }

    #[test]
    fn conv_stride2_output_dims() {
        let mut r = rng_from(10);
        let conv = conv_init(3, 2, 2, &mut r);
        let x = Array3::from_shape_simple_fn((2, 8, 8), || r.random_range(-1.0..1.0));
        let y = conv2d(&x, &conv);
        assert_eq!(y.shape(), &[3, 4, 4]);
    }

    #[test]
    fn upsample_round_trip_shapes() {
        let x = Array3::from_shape_fn((2, 3, 3), |(c, y, xx)| (c * 9 + y * 3 + xx) as f64);
        let up = upsample2x(&x);
        assert_eq!(up.shape(), &[2, 6, 6]);
        assert_eq!(up[[1, 5, 5]], x[[1, 2, 2]]);
        let back = upsample2x_backward(&up);
        // each input cell fans out to 4 outputs
        assert_eq!(back[[0, 0, 0]], 4.0 * x[[0, 0, 0]]);
    }

    #[test]
    fn token_round_trip() {
        let x = Array3::from_shape_fn((3, 2, 4), |(c, y, xx)| (c * 8 + y * 4 + xx) as f64);
        let t = to_tokens(&x);
        assert_eq!(t.dim(), (8, 3));
        let back = from_tokens(&t, 3, 2, 4);
        assert_eq!(back, x);
    }

    #[test]
    fn sinusoidal_embedding_is_bounded_and_distinct() {
        let a = sinusoidal_embedding(1, 16);
        let b = sinusoidal_embedding(2, 16);
        assert!(a.iter().all(|v| v.abs() <= 1.0));
        assert_ne!(a, b);
    }

    /// Finite-difference gradient check through the full denoiser for a
    /// sum-of-squares loss on the output.
    #[test]
    fn backward_matches_finite_differences() {
        let mut config = DenoiserConfig::tiny();
        config.adapter_zero_init = false; // exercise the image branch
        let model = Denoiser::init(config.clone(), 11).unwrap();
        let mut r = rng_from(12);
        let z = Latent::standard_normal(model.latent_shape(), &mut r);
        let (c_t, c_i) = tokens_for(&config, 13);
        let t = 5;

        let loss = |m: &Denoiser| {
            let out = m.forward(&z, t, &c_t, &c_i).unwrap();
            out.data.iter().map(|v| v * v).sum::<f64>()
        };

        let (out, cache) = model.forward_cached(&z, t, &c_t, &c_i).unwrap();
        let d_out = &out.data * 2.0;
        let mut grads = DenoiserGrads::zeros_like(&model);
        let (d_z, _d_ct, _d_ci) = model.backward(&d_out, &cache, &mut grads);

        let h = 1e-5;
        // sample a handful of coordinates from every tensor
        let names: Vec<&'static str> = model.params().into_iter().map(|(n, _)| n).collect();
        for name in names {
            let len = model
                .params()
                .into_iter()
                .find(|(n, _)| *n == name)
                .map(|(_, v)| v.len())
                .unwrap();
            let stride = (len / 5).max(1);
            for flat in (0..len).step_by(stride) {
                let mut plus = model.clone();
                perturb(&mut plus, name, flat, h);
                let mut minus = model.clone();
                perturb(&mut minus, name, flat, -h);
                let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
                let analytic = grads
                    .views()
                    .into_iter()
                    .find(|(n, _)| *n == name)
                    .map(|(_, v)| v.as_slice().unwrap()[flat])
                    .unwrap();
                let denom = analytic.abs().max(fd.abs()).max(1e-6);
                assert!(
                    (analytic - fd).abs() / denom < 1e-4,
                    "{name}[{flat}]: analytic {analytic}, fd {fd}"
                );
            }
        }

        // input gradient
        for flat in (0..z.data.len()).step_by(17) {
            let mut zp = z.clone();
            zp.data.as_slice_mut().unwrap()[flat] += h;
            let mut zm = z.clone();
            zm.data.as_slice_mut().unwrap()[flat] -= h;
            let lp: f64 = model.forward(&zp, t, &c_t, &c_i).unwrap().data.iter().map(|v| v * v).sum();
            let lm: f64 = model.forward(&zm, t, &c_t, &c_i).unwrap().data.iter().map(|v| v * v).sum();
            let fd = (lp - lm) / (2.0 * h);
            let analytic = d_z.as_slice().unwrap()[flat];
            let denom = analytic.abs().max(fd.abs()).max(1e-6);
            assert!((analytic - fd).abs() / denom < 1e-4, "d_z[{flat}]: {analytic} vs {fd}");
        }
    }

    fn perturb(model: &mut Denoiser, name: &str, flat: usize, delta: f64) {
        for (n, mut v) in model.params_mut() {
            if n == name {
                v.as_slice_mut().unwrap()[flat] += delta;
                return;
            }
        }
        panic!("no parameter named {name}");
    }
}
