//! Video latents and the stand-in autoencoder used by the toy pipeline.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `[frames, h, w, channels]` latent video. Frame 0 is the conditioning frame.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentVideo {
    pub data: Tensor,
}

impl LatentVideo {
    pub fn new(data: Tensor) -> Result<Self> {
        if data.rank() != 4 {
            return Err(Error::invalid(format!(
                "latent video must be rank 4, got {:?}",
                data.dims()
            )));
        }
        if !data.all_finite() {
            return Err(Error::invalid("latent video contains non-finite values"));
        }
        Ok(Self { data })
    }

    pub fn frames(&self) -> usize {
        self.data.dims()[0]
    }

    pub fn h(&self) -> usize {
        self.data.dims()[1]
    }

    pub fn w(&self) -> usize {
        self.data.dims()[2]
    }

    pub fn channels(&self) -> usize {
        self.data.dims()[3]
    }

    /// Copies out frame `i` as an `[h, w, channels]` tensor.
    pub fn frame(&self, i: usize) -> Tensor {
        let n = self.h() * self.w() * self.channels();
        let data = self.data.data()[i * n..(i + 1) * n].to_vec();
        Tensor::new(vec![self.h(), self.w(), self.channels()], data).expect("frame dims")
    }
}

/// Average-pool encoder / nearest-neighbour decoder with an integer factor.
/// Factor 1 is the identity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ToyVae {
    pub downsample: usize,
}

impl ToyVae {
    /// `[H, W, C]` image to `[ceil(H/s), ceil(W/s), C]` latent. Edge windows
    /// average only the pixels they cover.
    pub fn encode(&self, image: &Tensor) -> Result<Tensor> {
        let &[hh, ww, c] = image.dims() else {
            return Err(Error::invalid("image must be [H, W, C]"));
        };
        let s = self.downsample;
        if s == 0 {
            return Err(Error::invalid("downsample factor must be >= 1"));
        }
        if s == 1 {
            return Ok(image.clone());
        }
        let (h, w) = (hh.div_ceil(s), ww.div_ceil(s));
        let mut out = Tensor::zeros(&[h, w, c])?;
        for p in 0..h {
            for q in 0..w {
                let rows = p * s..((p + 1) * s).min(hh);
                let cols = q * s..((q + 1) * s).min(ww);
                let count = (rows.len() * cols.len()) as f64;
                for ch in 0..c {
                    let mut acc = 0.0;
                    for y in rows.clone() {
                        for x in cols.clone() {
                            acc += image.get(&[y, x, ch]);
                        }
                    }
                    out.set(&[p, q, ch], acc / count);
                }
            }
        }
        Ok(out)
    }

    /// Latent video to pixel video `[f, H, W, C]` by cell replication.
    pub fn decode(&self, latent: &LatentVideo, height: usize, width: usize) -> Result<Tensor> {
        let s = self.downsample;
        let (f, h, w, c) = (latent.frames(), latent.h(), latent.w(), latent.channels());
        if height.div_ceil(s) != h || width.div_ceil(s) != w {
            return Err(Error::invalid(format!(
                "latent {h}x{w} does not decode to {height}x{width} at factor {s}"
            )));
        }
        let mut out = Tensor::zeros(&[f, height, width, c])?;
        for i in 0..f {
            for y in 0..height {
                for x in 0..width {
                    for ch in 0..c {
                        out.set(&[i, y, x, ch], latent.data.get(&[i, y / s, x / s, ch]));
                    }
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pool_and_replicate() {
        let img = Tensor::new(vec![2, 4, 1], vec![1.0, 3.0, 0.0, 0.0, 5.0, 7.0, 0.0, 4.0]).unwrap();
        let vae = ToyVae { downsample: 2 };
        let z = vae.encode(&img).unwrap();
        assert_eq!(z.dims(), &[1, 2, 1]);
        assert_eq!(z.data(), &[4.0, 1.0]);
        let lv = LatentVideo::new(z.reshape(vec![1, 1, 2, 1]).unwrap()).unwrap();
        let px = vae.decode(&lv, 2, 4).unwrap();
        assert_eq!(px.data(), &[4.0, 4.0, 1.0, 1.0, 4.0, 4.0, 1.0, 1.0]);
    }

    #[test]
    fn odd_edges_average_partial_windows() {
        let img = Tensor::new(vec![3, 3, 1], (1..=9).map(f64::from).collect()).unwrap();
        let z = ToyVae { downsample: 2 }.encode(&img).unwrap();
        assert_eq!(z.dims(), &[2, 2, 1]);
        assert_eq!(z.data(), &[3.0, 4.5, 7.5, 9.0]);
    }
}
