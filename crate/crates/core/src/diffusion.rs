//! Conditioning-agnostic diffusion math: noise schedules, the closed-form
//! forward process, the denoising objective, deterministic DDIM steps, and
//! classifier-free guidance.
//!
//! Timesteps are 1-based: `t` ranges over `[1, T]` and `alpha_bar(0) = 1` by
//! convention, so a terminal DDIM step to `t_prev = 0` returns the predicted
//! clean latent.

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image_buf::ImageBuf;
use crate::rng;

/// Linear is the only schedule kind; the enum leaves room for more.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear,
}

/// Variance schedule beta_t with derived alpha_t = 1 - beta_t and
/// alpha_bar_t = prod_{s<=t} alpha_s.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub steps: usize,
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

/// Build a linear beta schedule over `steps` points, endpoints inclusive.
/// A single-step schedule degenerates to `[beta_start]`.
pub fn build_schedule(
    steps: usize,
    beta_start: f64,
    beta_end: f64,
    kind: ScheduleKind,
) -> Result<NoiseSchedule> {
    let ScheduleKind::Linear = kind;
    if steps < 1 {
        return Err(Error::invalid("steps", "must be at least 1"));
    }
    if !(beta_start > 0.0) {
        return Err(Error::invalid("beta_start", format!("must be > 0, got {beta_start}")));
    }
    if !(beta_end < 1.0) {
        return Err(Error::invalid("beta_end", format!("must be < 1, got {beta_end}")));
    }
    if beta_start > beta_end {
        return Err(Error::invalid(
            "beta_start",
            format!("must be <= beta_end, got {beta_start} > {beta_end}"),
        ));
    }
    let betas: Vec<f64> = if steps == 1 {
        vec![beta_start]
    } else {
        (0..steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
            .collect()
    };
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bars = Vec::with_capacity(steps);
    let mut prod = 1.0;
    for &a in &alphas {
        prod *= a;
        alpha_bars.push(prod);
    }
    Ok(NoiseSchedule { steps, betas, alphas, alpha_bars })
}

impl NoiseSchedule {
    /// alpha_bar at 1-based `t`, with `alpha_bar(0) = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t < 1 || t > self.steps {
            return Err(Error::invalid("t", format!("must be in [1, {}], got {t}", self.steps)));
        }
        Ok(())
    }
}

/// The C x H x W tensor diffusion operates on.
#[derive(Debug, Clone, PartialEq)]
pub struct Latent {
    pub data: Array3<f64>,
}

impl Latent {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("latent data", "all entries must be finite"));
        }
        Ok(Self { data })
    }

    pub fn zeros(shape: (usize, usize, usize)) -> Self {
        Self { data: Array3::zeros(shape) }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        let s = self.data.shape();
        (s[0], s[1], s[2])
    }

    pub fn channels(&self) -> usize {
        self.shape().0
    }

    pub fn standard_normal(shape: (usize, usize, usize), rng: &mut rng::CrateRng) -> Self {
        Self { data: rng::normal_array3(shape, rng) }
    }

    fn check_same_shape(&self, other: &Latent, context: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(
                context,
                format!("{:?}", self.shape()),
                format!("{:?}", other.shape()),
            ));
        }
        Ok(())
    }
}

/// z_t = sqrt(alpha_bar_t) z0 + sqrt(1 - alpha_bar_t) eps, the t-step
/// composition of the stepwise Gaussian forward kernel.
pub fn forward_diffuse(z0: &Latent, t: usize, eps: &Latent, schedule: &NoiseSchedule) -> Result<Latent> {
    schedule.check_t(t)?;
    z0.check_same_shape(eps, "forward_diffuse")?;
    let ab = schedule.alpha_bar(t);
    let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(Latent { data: &z0.data * sa + &eps.data * sb })
}

/// Mean squared error over all elements.
pub fn denoise_loss(eps_pred: &Latent, eps: &Latent) -> Result<f64> {
    eps_pred.check_same_shape(eps, "denoise_loss")?;
    let n = eps.data.len() as f64;
    let sum: f64 = eps_pred
        .data
        .iter()
        .zip(eps.data.iter())
        .map(|(a, b)| {
            let d = a - b;
            d * d
        })
        .sum();
    Ok(sum / n)
}

/// eps_uncond + scale * (eps_cond - eps_uncond). The scale 0 and 1 endpoints
/// return the respective input exactly.
pub fn cfg_combine(eps_uncond: &Latent, eps_cond: &Latent, scale: f64) -> Result<Latent> {
    eps_uncond.check_same_shape(eps_cond, "cfg_combine")?;
    if scale == 0.0 {
        return Ok(eps_uncond.clone());
    }
    if scale == 1.0 {
        return Ok(eps_cond.clone());
    }
    Ok(Latent {
        data: &eps_uncond.data + &(&eps_cond.data - &eps_uncond.data) * scale,
    })
}

/// One deterministic (eta = 0) DDIM update from `t` down to `t_prev`.
/// Returns the previous latent and the x0 prediction.
pub fn ddim_step(
    z_t: &Latent,
    eps_pred: &Latent,
    t: usize,
    t_prev: usize,
    schedule: &NoiseSchedule,
) -> Result<(Latent, Latent)> {
    schedule.check_t(t)?;
    if t_prev >= t {
        return Err(Error::invalid("t_prev", format!("must be < t, got t={t}, t_prev={t_prev}")));
    }
    z_t.check_same_shape(eps_pred, "ddim_step")?;
    let a_t = schedule.alpha_bar(t);
    let a_p = schedule.alpha_bar(t_prev);
    let x0 = (&z_t.data - &(&eps_pred.data * (1.0 - a_t).sqrt())) / a_t.sqrt();
    let z_prev = &x0 * a_p.sqrt() + &eps_pred.data * (1.0 - a_p).sqrt();
    Ok((Latent { data: z_prev }, Latent { data: x0 }))
}

/// Evenly spaced k-step timestep subsequence: t_i = round(i*T/k) for
/// i = k..0, descending, always ending at 0.
pub fn timestep_subsequence(total_steps: usize, steps: usize) -> Result<Vec<usize>> {
    if steps < 1 {
        return Err(Error::invalid("steps", "must be at least 1"));
    }
    if steps > total_steps {
        return Err(Error::invalid(
            "steps",
            format!("must be <= schedule length {total_steps}, got {steps}"),
        ));
    }
    Ok((0..=steps)
        .rev()
        .map(|i| (i as f64 * total_steps as f64 / steps as f64).round() as usize)
        .collect())
}

/// Anything that predicts noise for a latent at timestep `t` under token
/// conditioning. Implemented by the fusion model and by test stand-ins.
pub trait NoisePredictor {
    fn predict(&self, z_t: &Latent, t: usize, text_tokens: &ndarray::Array2<f64>, face_tokens: &ndarray::Array2<f64>) -> Result<Latent>;

    fn latent_shape(&self) -> (usize, usize, usize);
}

/// Text-token and face-token conditioning plus the null (empty-prompt)
/// embeddings used for the unconditional CFG branch.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditioningBundle {
    pub text_tokens: ndarray::Array2<f64>,
    pub face_tokens: ndarray::Array2<f64>,
    pub null_text_tokens: ndarray::Array2<f64>,
    pub null_face_tokens: ndarray::Array2<f64>,
}

impl ConditioningBundle {
    pub fn validate(&self) -> Result<()> {
        if self.text_tokens.dim() != self.null_text_tokens.dim() {
            return Err(Error::shape(
                "ConditioningBundle",
                format!("null_text_tokens {:?}", self.text_tokens.dim()),
                format!("{:?}", self.null_text_tokens.dim()),
            ));
        }
        if self.face_tokens.dim() != self.null_face_tokens.dim() {
            return Err(Error::shape(
                "ConditioningBundle",
                format!("null_face_tokens {:?}", self.face_tokens.dim()),
                format!("{:?}", self.null_face_tokens.dim()),
            ));
        }
        Ok(())
    }
}

/// Run the evenly spaced DDIM trajectory from seeded Gaussian noise,
/// applying classifier-free guidance at every step.
pub fn ddim_sample(
    model: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    steps: usize,
    cfg_scale: f64,
    cond: &ConditioningBundle,
    seed: u64,
) -> Result<Latent> {
    let mut rng = rng::rng_from(seed);
    let z_init = Latent::standard_normal(model.latent_shape(), &mut rng);
    ddim_sample_from(model, schedule, steps, cfg_scale, cond, z_init)
}

/// As [`ddim_sample`] but starting from a caller-provided terminal latent.
pub fn ddim_sample_from(
    model: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    steps: usize,
    cfg_scale: f64,
    cond: &ConditioningBundle,
    z_init: Latent,
) -> Result<Latent> {
    cond.validate()?;
    let ts = timestep_subsequence(schedule.steps, steps)?;
    let mut z = z_init;
    for win in ts.windows(2) {
        let (t, t_prev) = (win[0], win[1]);
        let eps_cond = model.predict(&z, t, &cond.text_tokens, &cond.face_tokens)?;
        let eps_hat = if cfg_scale == 1.0 {
            eps_cond
        } else {
            let eps_uncond = model.predict(&z, t, &cond.null_text_tokens, &cond.null_face_tokens)?;
            cfg_combine(&eps_uncond, &eps_cond, cfg_scale)?
        };
        let (z_prev, _x0) = ddim_step(&z, &eps_hat, t, t_prev, schedule)?;
        z = z_prev;
    }
    Ok(z)
}

/// Codec between RGB images and latents. RGB maps linearly to [-1, 1] on the
/// first three channels; extra latent channels encode to zero and are
/// ignored on decode.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LatentCodec {
    pub kind: CodecKind,
    pub channels: usize,
    pub patch: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodecKind {
    /// Average-pool patch x patch blocks to encode, nearest-upsample to decode.
    IdentityDownsample,
    /// Per-pixel linear maps applied after pooling / before upsampling:
    /// latent = encode * rgb_centered, rgb_centered = decode * latent.
    LearnedLinear { encode: Vec<Vec<f64>>, decode: Vec<Vec<f64>> },
}

impl LatentCodec {
    pub fn identity(channels: usize, patch: usize) -> Result<Self> {
        if channels < 3 {
            return Err(Error::invalid("channels", "codec needs at least 3 latent channels"));
        }
        if patch < 1 {
            return Err(Error::invalid("patch", "must be at least 1"));
        }
        Ok(Self { kind: CodecKind::IdentityDownsample, channels, patch })
    }

    /// `encode` is channels x 3 and `decode` is 3 x channels, acting on
    /// centered RGB in [-1, 1].
    pub fn learned_linear(channels: usize, patch: usize, encode: Vec<Vec<f64>>, decode: Vec<Vec<f64>>) -> Result<Self> {
        if encode.len() != channels || encode.iter().any(|r| r.len() != 3) {
            return Err(Error::shape("LatentCodec::learned_linear", format!("{channels}x3 encode"), format!("{}x{}", encode.len(), encode.first().map_or(0, |r| r.len()))));
        }
        if decode.len() != 3 || decode.iter().any(|r| r.len() != channels) {
            return Err(Error::shape("LatentCodec::learned_linear", format!("3x{channels} decode"), format!("{}x{}", decode.len(), decode.first().map_or(0, |r| r.len()))));
        }
        if patch < 1 {
            return Err(Error::invalid("patch", "must be at least 1"));
        }
        Ok(Self { kind: CodecKind::LearnedLinear { encode, decode }, channels, patch })
    }

    pub fn encode(&self, image: &ImageBuf) -> Result<Latent> {
        let (h, w) = (image.height(), image.width());
        if h % self.patch != 0 || w % self.patch != 0 {
            return Err(Error::invalid(
                "image size",
                format!("{h}x{w} not divisible by patch {}", self.patch),
            ));
        }
        let (lh, lw) = (h / self.patch, w / self.patch);
        let pooled = image.downsample_avg(lh, lw)?;
        let mut data = Array3::zeros((self.channels, lh, lw));
        for y in 0..lh {
            for x in 0..lw {
                let rgb = pooled.get(y, x);
                let centered = [rgb[0] * 2.0 - 1.0, rgb[1] * 2.0 - 1.0, rgb[2] * 2.0 - 1.0];
                match &self.kind {
                    CodecKind::IdentityDownsample => {
                        for c in 0..3 {
                            data[[c, y, x]] = centered[c];
                        }
                    }
                    CodecKind::LearnedLinear { encode, .. } => {
                        for (c, row) in encode.iter().enumerate() {
                            data[[c, y, x]] = row[0] * centered[0] + row[1] * centered[1] + row[2] * centered[2];
                        }
                    }
                }
            }
        }
        Ok(Latent { data })
    }

    pub fn decode(&self, latent: &Latent) -> Result<ImageBuf> {
        let (c, lh, lw) = latent.shape();
        if c != self.channels {
            return Err(Error::shape("LatentCodec::decode", format!("{} channels", self.channels), format!("{c}")));
        }
        let (h, w) = (lh * self.patch, lw * self.patch);
        let mut pixels = Array3::zeros((h, w, 3));
        for y in 0..lh {
            for x in 0..lw {
                let centered = match &self.kind {
                    CodecKind::IdentityDownsample => {
                        [latent.data[[0, y, x]], latent.data[[1, y, x]], latent.data[[2, y, x]]]
                    }
                    CodecKind::LearnedLinear { decode, .. } => {
                        let mut out = [0.0; 3];
                        for (i, row) in decode.iter().enumerate() {
                            out[i] = row.iter().enumerate().map(|(j, v)| v * latent.data[[j, y, x]]).sum();
                        }
                        out
                    }
                };
                let rgb = [
                    ((centered[0] + 1.0) / 2.0).clamp(0.0, 1.0),
                    ((centered[1] + 1.0) / 2.0).clamp(0.0, 1.0),
                    ((centered[2] + 1.0) / 2.0).clamp(0.0, 1.0),
                ];
                for dy in 0..self.patch {
                    for dx in 0..self.patch {
                        for ch in 0..3 {
                            pixels[[y * self.patch + dy, x * self.patch + dx, ch]] = rgb[ch];
                        }
                    }
                }
            }
        }
        ImageBuf::new(pixels)
    }
}
