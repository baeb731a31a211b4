//! Gated kinematic cross-attention for audio latents.
//!
//! Audio tokens attend to kinematic tokens. Queries and keys are RMS
//! normalized and rotary encoded on a shared time axis: kinematic token
//! `(i, n)` sits at frame index `i`, audio token `l` at `l * f / L_a`. The
//! attention output enters the residual stream through `sigmoid(gamma)`.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::nn::{sigmoid, slice1, slice1_mut, slice2, slice2_mut, Parameterized, RmsNorm};
use crate::rng::Seed;
use crate::tensor::Tensor;

pub const DEFAULT_ROPE_BASE: f64 = 10_000.0;
pub const DEFAULT_GAMMA_INIT: f64 = -10.0;

fn rotate(x: &mut Array2<f64>, positions: &[f64], base: f64, n_heads: usize, inverse: bool) {
    let d = x.ncols();
    let dh = d / n_heads;
    let freqs: Vec<f64> = (0..dh / 2)
        .map(|k| base.powf(-2.0 * k as f64 / dh as f64))
        .collect();
    for (mut row, &pos) in x.rows_mut().into_iter().zip(positions) {
        for (k, &fr) in freqs.iter().enumerate() {
            let (mut sn, cs) = (pos * fr).sin_cos();
            if inverse {
                sn = -sn;
            }
            for h in 0..n_heads {
                let j = h * dh + 2 * k;
                let (a, b) = (row[j], row[j + 1]);
                row[j] = a * cs - b * sn;
                row[j + 1] = a * sn + b * cs;
            }
        }
    }
}

/// Rotary position encoding of each row's adjacent pairs `(2k, 2k+1)` by
/// angle `position * base^(-2k / width)`. Positions may be fractional.
pub fn rope(x: &Array2<f64>, positions: &[f64], base: f64) -> Result<Array2<f64>> {
    if x.ncols() % 2 != 0 {
        return Err(Error::invalid(format!(
            "rope needs an even width, got {}",
            x.ncols()
        )));
    }
    if positions.len() != x.nrows() {
        return Err(Error::invalid("one position per row required"));
    }
    let mut out = x.to_owned();
    rotate(&mut out, positions, base, 1, false);
    Ok(out)
}

/// Audio positions `l * f / L_a` and kinematic positions `i` for frame-major tokens.
pub fn temporal_positions(frames: usize, objects: usize, audio_len: usize) -> (Vec<f64>, Vec<f64>) {
    let scale = frames as f64 / audio_len as f64;
    let audio = (0..audio_len).map(|l| l as f64 * scale).collect();
    let kin = (0..frames * objects)
        .map(|r| (r / objects) as f64)
        .collect();
    (audio, kin)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionBlock {
    pub w_q: Array2<f64>,
    pub w_k: Array2<f64>,
    pub w_v: Array2<f64>,
    pub norm_q: RmsNorm,
    pub norm_k: RmsNorm,
    pub gamma: f64,
    pub n_heads: usize,
    pub rope_base: f64,
}

struct FusionCache {
    pq: Array2<f64>,
    rms_q: Array1<f64>,
    q: Array2<f64>,
    pk: Array2<f64>,
    rms_k: Array1<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    attn: Vec<Array2<f64>>,
    delta: Array2<f64>,
}

/// Output of a forward pass, plus what the backward pass needs.
pub struct FusionOutput {
    pub out: Array2<f64>,
    /// Pre-gate attention output.
    pub delta: Array2<f64>,
    /// Per-head `L_a x (f N)` attention matrices.
    pub attn: Vec<Array2<f64>>,
    /// Per-head scaled logits.
    pub logits: Vec<Array2<f64>>,
    cache: Option<FusionCache>,
}

impl FusionBlock {
    pub fn new(d: usize, n_heads: usize, seed: Seed) -> Result<Self> {
        Self::with_gamma(d, n_heads, DEFAULT_GAMMA_INIT, seed)
    }

    pub fn with_gamma(d: usize, n_heads: usize, gamma: f64, seed: Seed) -> Result<Self> {
        if n_heads == 0 || d % (2 * n_heads) != 0 {
            return Err(Error::invalid(format!(
                "width {d} must be divisible by 2 x {n_heads} heads"
            )));
        }
        let init = |k: u64| {
            use rand::Rng;
            let mut rng = seed.derive(&[k]).rng();
            let bound = 1.0 / (d as f64).sqrt();
            Array2::from_shape_fn((d, d), |_| rng.random_range(-bound..bound))
        };
        Ok(Self {
            w_q: init(0),
            w_k: init(1),
            w_v: init(2),
            norm_q: RmsNorm::new(d),
            norm_k: RmsNorm::new(d),
            gamma,
            n_heads,
            rope_base: DEFAULT_ROPE_BASE,
        })
    }

    pub fn width(&self) -> usize {
        self.w_q.nrows()
    }

    pub fn head_dim(&self) -> usize {
        self.width() / self.n_heads
    }

    pub fn zeros_like(&self) -> Self {
        let d = self.width();
        Self {
            w_q: Array2::zeros((d, d)),
            w_k: Array2::zeros((d, d)),
            w_v: Array2::zeros((d, d)),
            norm_q: RmsNorm {
                gain: Array1::zeros(d),
                eps: self.norm_q.eps,
            },
            norm_k: RmsNorm {
                gain: Array1::zeros(d),
                eps: self.norm_k.eps,
            },
            gamma: 0.0,
            n_heads: self.n_heads,
            rope_base: self.rope_base,
        }
    }

    /// `H_a' = H_a + sigmoid(gamma) softmax(Q K^T / sqrt(d_head)) V` for
    /// frame-major kinematic tokens of `frames` frames. No tokens means no change.
    pub fn fuse(
        &self,
        h_a: &Array2<f64>,
        h_kin: &Array2<f64>,
        frames: usize,
    ) -> Result<Array2<f64>> {
        Ok(self.forward(h_a, h_kin, frames, false)?.out)
    }

    /// Fuses `[f, N, d]` kinematic tokens.
    pub fn fuse_tensor(&self, h_a: &Array2<f64>, h_kin: &Tensor) -> Result<Array2<f64>> {
        let &[f, n, d] = h_kin.dims() else {
            return Err(Error::invalid("kinematic tokens must be [f, N, d]"));
        };
        let m = ArrayView2::from_shape((f * n, d), h_kin.data()).expect("dims checked");
        self.fuse(h_a, &m.to_owned(), f)
    }

    pub fn forward(
        &self,
        h_a: &Array2<f64>,
        h_kin: &Array2<f64>,
        frames: usize,
        keep_cache: bool,
    ) -> Result<FusionOutput> {
        let m = h_kin.nrows();
        if h_a.nrows() == 0 {
            return Err(Error::invalid("audio latents need at least one token"));
        }
        let objects = if m == 0 { 0 } else { m / frames.max(1) };
        if m > 0 && (frames == 0 || m % frames != 0) {
            return Err(Error::invalid(format!(
                "{m} kinematic tokens do not split into {frames} frames"
            )));
        }
        let (pos_a, pos_k) = temporal_positions(frames, objects, h_a.nrows());
        self.forward_at(h_a, h_kin, &pos_a, &pos_k, keep_cache)
    }

    /// Forward pass with explicit rotary positions.
    pub fn forward_at(
        &self,
        h_a: &Array2<f64>,
        h_kin: &Array2<f64>,
        pos_a: &[f64],
        pos_k: &[f64],
        keep_cache: bool,
    ) -> Result<FusionOutput> {
        let d = self.width();
        if h_a.ncols() != d || (h_kin.nrows() > 0 && h_kin.ncols() != d) {
            return Err(Error::invalid(format!(
                "block width {d}, audio width {}, kinematic width {}",
                h_a.ncols(),
                h_kin.ncols()
            )));
        }
        if pos_a.len() != h_a.nrows() || pos_k.len() != h_kin.nrows() {
            return Err(Error::invalid("position count does not match token count"));
        }
        if h_kin.nrows() == 0 {
            return Ok(FusionOutput {
                out: h_a.clone(),
                delta: Array2::zeros(h_a.raw_dim()),
                attn: Vec::new(),
                logits: Vec::new(),
                cache: None,
            });
        }
        let dh = self.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();

        let pq = h_a.dot(&self.w_q);
        let (mut q, rms_q) = self.norm_q.forward(&pq);
        rotate(&mut q, pos_a, self.rope_base, self.n_heads, false);
        let pk = h_kin.dot(&self.w_k);
        let (mut k, rms_k) = self.norm_k.forward(&pk);
        rotate(&mut k, pos_k, self.rope_base, self.n_heads, false);
        let v = h_kin.dot(&self.w_v);

        let mut delta = Array2::zeros(h_a.raw_dim());
        let mut attn = Vec::with_capacity(self.n_heads);
        let mut logits = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let lg = q.slice(cols).dot(&k.slice(cols).t()) * scale;
            let mut a = lg.clone();
            for mut row in a.rows_mut() {
                let mx = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
                row.mapv_inplace(|x| (x - mx).exp());
                let sum = row.sum();
                row /= sum;
            }
            delta.slice_mut(cols).assign(&a.dot(&v.slice(cols)));
            attn.push(a);
            logits.push(lg);
        }
        let out = h_a + &(&delta * sigmoid(self.gamma));
        let cache = keep_cache.then(|| FusionCache {
            pq,
            rms_q,
            q,
            pk,
            rms_k,
            k,
            v,
            attn: attn.clone(),
            delta: delta.clone(),
        });
        Ok(FusionOutput {
            out,
            delta,
            attn,
            logits,
            cache,
        })
    }

    /// Gradients of a scalar loss given `dL/dH_a'`. Returns parameter
    /// gradients (as a block), `dL/dH_a` and `dL/dH_kin`.
    pub fn backward(
        &self,
        h_a: &Array2<f64>,
        h_kin: &Array2<f64>,
        pos_a: &[f64],
        pos_k: &[f64],
        fwd: &FusionOutput,
        d_out: &Array2<f64>,
    ) -> Result<FusionGrads> {
        let mut g = self.zeros_like();
        let Some(c) = fwd.cache.as_ref() else {
            if h_kin.nrows() == 0 {
                return Ok(FusionGrads {
                    params: g,
                    d_audio: d_out.clone(),
                    d_kin: Array2::zeros(h_kin.raw_dim()),
                });
            }
            return Err(Error::invalid("forward pass was run without a cache"));
        };
        let dh = self.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let sig = sigmoid(self.gamma);
        g.gamma = sig * (1.0 - sig) * (d_out * &c.delta).sum();
        let d_delta = d_out * sig;

        let mut dq = Array2::zeros(c.q.raw_dim());
        let mut dk = Array2::zeros(c.k.raw_dim());
        let mut dv = Array2::zeros(c.v.raw_dim());
        for h in 0..self.n_heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let a = &c.attn[h];
            let d_o = d_delta.slice(cols);
            let da = d_o.dot(&c.v.slice(cols).t());
            dv.slice_mut(cols).assign(&a.t().dot(&d_o));
            let row_dot = (&da * a).sum_axis(Axis(1)).insert_axis(Axis(1));
            let ds = a * &(&da - &row_dot) * scale;
            dq.slice_mut(cols).assign(&ds.dot(&c.k.slice(cols)));
            dk.slice_mut(cols).assign(&ds.t().dot(&c.q.slice(cols)));
        }
        rotate(&mut dq, pos_a, self.rope_base, self.n_heads, true);
        rotate(&mut dk, pos_k, self.rope_base, self.n_heads, true);
        let dpq = self
            .norm_q
            .backward(&c.pq, &c.rms_q, &dq, &mut g.norm_q.gain);
        let dpk = self
            .norm_k
            .backward(&c.pk, &c.rms_k, &dk, &mut g.norm_k.gain);
        g.w_q = h_a.t().dot(&dpq);
        g.w_k = h_kin.t().dot(&dpk);
        g.w_v = h_kin.t().dot(&dv);
        let d_audio = d_out + &dpq.dot(&self.w_q.t());
        let d_kin = dpk.dot(&self.w_k.t()) + dv.dot(&self.w_v.t());
        Ok(FusionGrads {
            params: g,
            d_audio,
            d_kin,
        })
    }
}

pub struct FusionGrads {
    pub params: FusionBlock,
    pub d_audio: Array2<f64>,
    pub d_kin: Array2<f64>,
}

impl Parameterized for FusionBlock {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        f("w_q", self.w_q.shape(), slice2(&self.w_q));
        f("w_k", self.w_k.shape(), slice2(&self.w_k));
        f("w_v", self.w_v.shape(), slice2(&self.w_v));
        f(
            "norm_q.gain",
            self.norm_q.gain.shape(),
            slice1(&self.norm_q.gain),
        );
        f(
            "norm_k.gain",
            self.norm_k.gain.shape(),
            slice1(&self.norm_k.gain),
        );
        f("gamma", &[1], std::slice::from_ref(&self.gamma));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        f("w_q", slice2_mut(&mut self.w_q));
        f("w_k", slice2_mut(&mut self.w_k));
        f("w_v", slice2_mut(&mut self.w_v));
        f("norm_q.gain", slice1_mut(&mut self.norm_q.gain));
        f("norm_k.gain", slice1_mut(&mut self.norm_k.gain));
        f("gamma", std::slice::from_mut(&mut self.gamma));
    }
}
