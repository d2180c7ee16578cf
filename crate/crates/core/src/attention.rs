//! Decoupled cross-attention: two branches sharing one query projection,
//! one attending over text tokens and one over face-image tokens, summed.
//!
//!   Z' = softmax(Q K^T / sqrt(d_k)) V + softmax(Q K'^T / sqrt(d_k)) V'
//!
//! with Q = Z W_q, K = c_t W_k, V = c_t W_v, K' = c_i W_k', V' = c_i W_v'.

use ndarray::Array2;

use crate::error::{Error, Result};

/// Learnable projections. The text and image branches share the single W_q.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub w_q: Array2<f64>,  // d_model x d_k
    pub w_k: Array2<f64>,  // d_text x d_k
    pub w_v: Array2<f64>,  // d_text x d_v
    pub w_kp: Array2<f64>, // d_img x d_k
    pub w_vp: Array2<f64>, // d_img x d_v
}

impl AttentionParams {
    pub fn d_k(&self) -> usize {
        self.w_q.ncols()
    }

    pub fn d_v(&self) -> usize {
        self.w_v.ncols()
    }

    pub fn validate(&self, d_model: usize, d_text: usize, d_img: usize) -> Result<()> {
        let d_k = self.d_k();
        let d_v = self.d_v();
        if d_k == 0 {
            return Err(Error::invalid("d_k", "must be positive"));
        }
        let checks = [
            ("w_q", self.w_q.dim(), (d_model, d_k)),
            ("w_k", self.w_k.dim(), (d_text, d_k)),
            ("w_v", self.w_v.dim(), (d_text, d_v)),
            ("w_kp", self.w_kp.dim(), (d_img, d_k)),
            ("w_vp", self.w_vp.dim(), (d_img, d_v)),
        ];
        for (name, got, want) in checks {
            if got != want {
                return Err(Error::shape("AttentionParams", format!("{name} {want:?}"), format!("{got:?}")));
            }
        }
        if !self.w_q.iter().chain(&self.w_k).chain(&self.w_v).chain(&self.w_kp).chain(&self.w_vp).all(|v| v.is_finite()) {
            return Err(Error::invalid("attention weights", "all entries must be finite"));
        }
        Ok(())
    }
}

fn softmax_rows(scores: &Array2<f64>) -> Array2<f64> {
    let mut out = scores.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Everything the backward pass needs from one forward evaluation.
#[derive(Debug, Clone)]
pub struct AttentionCache {
    pub q: Array2<f64>,
    pub attn_text: Array2<f64>,
    pub attn_img: Array2<f64>,
    pub k: Array2<f64>,
    pub v: Array2<f64>,
    pub kp: Array2<f64>,
    pub vp: Array2<f64>,
    pub z: Array2<f64>,
    pub c_t: Array2<f64>,
    pub c_i: Array2<f64>,
}

/// Gradients with respect to the five projection matrices.
#[derive(Debug, Clone)]
pub struct AttentionGrads {
    pub w_q: Array2<f64>,
    pub w_k: Array2<f64>,
    pub w_v: Array2<f64>,
    pub w_kp: Array2<f64>,
    pub w_vp: Array2<f64>,
}

impl AttentionGrads {
    pub fn zeros_like(p: &AttentionParams) -> Self {
        Self {
            w_q: Array2::zeros(p.w_q.dim()),
            w_k: Array2::zeros(p.w_k.dim()),
            w_v: Array2::zeros(p.w_v.dim()),
            w_kp: Array2::zeros(p.w_kp.dim()),
            w_vp: Array2::zeros(p.w_vp.dim()),
        }
    }
}

fn check_dims(z: &Array2<f64>, c_t: &Array2<f64>, c_i: &Array2<f64>, params: &AttentionParams) -> Result<()> {
    if z.ncols() != params.w_q.nrows() {
        return Err(Error::shape("decoupled_cross_attention", format!("Z with {} columns", params.w_q.nrows()), format!("{}", z.ncols())));
    }
    if c_t.ncols() != params.w_k.nrows() {
        return Err(Error::shape("decoupled_cross_attention", format!("c_t with {} columns", params.w_k.nrows()), format!("{}", c_t.ncols())));
    }
    if c_i.ncols() != params.w_kp.nrows() {
        return Err(Error::shape("decoupled_cross_attention", format!("c_i with {} columns", params.w_kp.nrows()), format!("{}", c_i.ncols())));
    }
    Ok(())
}

/// Forward pass returning the summed two-branch output (N x d_v).
pub fn decoupled_cross_attention(
    z: &Array2<f64>,
    c_t: &Array2<f64>,
    c_i: &Array2<f64>,
    params: &AttentionParams,
) -> Result<Array2<f64>> {
    Ok(decoupled_cross_attention_cached(z, c_t, c_i, params)?.0)
}

pub fn decoupled_cross_attention_cached(
    z: &Array2<f64>,
    c_t: &Array2<f64>,
    c_i: &Array2<f64>,
    params: &AttentionParams,
) -> Result<(Array2<f64>, AttentionCache)> {
    check_dims(z, c_t, c_i, params)?;
    let scale = 1.0 / (params.d_k() as f64).sqrt();
    let q = z.dot(&params.w_q);
    let k = c_t.dot(&params.w_k);
    let v = c_t.dot(&params.w_v);
    let kp = c_i.dot(&params.w_kp);
    let vp = c_i.dot(&params.w_vp);
    let attn_text = softmax_rows(&(q.dot(&k.t()) * scale));
    let attn_img = softmax_rows(&(q.dot(&kp.t()) * scale));
    let out = attn_text.dot(&v) + attn_img.dot(&vp);
    let cache = AttentionCache {
        q,
        attn_text,
        attn_img,
        k,
        v,
        kp,
        vp,
        z: z.clone(),
        c_t: c_t.clone(),
        c_i: c_i.clone(),
    };
    Ok((out, cache))
}

/// d(softmax)/d(scores): ds_ij = a_ij * (da_ij - sum_k a_ik da_ik).
fn softmax_backward(a: &Array2<f64>, da: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(a.dim());
    for i in 0..a.nrows() {
        let mut dot = 0.0;
        for j in 0..a.ncols() {
            dot += a[[i, j]] * da[[i, j]];
        }
        for j in 0..a.ncols() {
            out[[i, j]] = a[[i, j]] * (da[[i, j]] - dot);
        }
    }
    out
}

/// Backward pass. Returns gradients for Z, c_t, c_i; accumulates parameter
/// gradients into `grads`.
pub fn decoupled_cross_attention_backward(
    d_out: &Array2<f64>,
    cache: &AttentionCache,
    params: &AttentionParams,
    grads: &mut AttentionGrads,
) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let scale = 1.0 / (params.d_k() as f64).sqrt();

    // text branch
    let d_attn_text = d_out.dot(&cache.v.t());
    let d_v = cache.attn_text.t().dot(d_out);
    let d_scores_t = softmax_backward(&cache.attn_text, &d_attn_text) * scale;
    let mut d_q = d_scores_t.dot(&cache.k);
    let d_k = d_scores_t.t().dot(&cache.q);

    // image branch
    let d_attn_img = d_out.dot(&cache.vp.t());
    let d_vp = cache.attn_img.t().dot(d_out);
    let d_scores_i = softmax_backward(&cache.attn_img, &d_attn_img) * scale;
    d_q += &d_scores_i.dot(&cache.kp);
    let d_kp = d_scores_i.t().dot(&cache.q);

    // projections
    grads.w_q += &cache.z.t().dot(&d_q);
    grads.w_k += &cache.c_t.t().dot(&d_k);
    grads.w_v += &cache.c_t.t().dot(&d_v);
    grads.w_kp += &cache.c_i.t().dot(&d_kp);
    grads.w_vp += &cache.c_i.t().dot(&d_vp);

    let d_z = d_q.dot(&params.w_q.t());
    let d_ct = d_k.dot(&params.w_k.t()) + d_v.dot(&params.w_v.t());
    let d_ci = d_kp.dot(&params.w_kp.t()) + d_vp.dot(&params.w_vp.t());
    (d_z, d_ct, d_ci)
}
