//! Trajectory-conditioned latent: first-frame features carried along each
//! object's path.

use crate::error::{Error, Result};
use crate::mask::TrajMask;
use crate::tensor::Tensor;
use crate::trajectory::LatentTrajectory;

#[derive(Debug, Clone, PartialEq)]
pub struct TrajLatent {
    /// `[frames, h, w, channels]`.
    pub data: Tensor,
    pub mask: TrajMask,
}

/// Frame 0 is `z`. In later frames each masked cell receives the frame-0
/// feature of the object that owns it; every other cell is zero.
pub fn inject(z: &Tensor, lt: &LatentTrajectory, mask: &TrajMask) -> Result<TrajLatent> {
    let &[h, w, c] = z.dims() else {
        return Err(Error::invalid(format!(
            "first-frame latent must be [h, w, d], got {:?}",
            z.dims()
        )));
    };
    if (lt.h, lt.w) != (h, w) || (mask.h, mask.w) != (h, w) {
        return Err(Error::invalid(format!(
            "grid mismatch: latent {h}x{w}, trajectory {}x{}, mask {}x{}",
            lt.h, lt.w, mask.h, mask.w
        )));
    }
    if mask.frames != lt.frames {
        return Err(Error::invalid(format!(
            "mask has {} frames, trajectory {}",
            mask.frames, lt.frames
        )));
    }
    let f = lt.frames;
    let frame_len = h * w * c;
    let mut data = vec![0.0; f * frame_len];
    data[..frame_len].copy_from_slice(z.data());
    let src = z.data();
    for i in 1..f {
        for p in 0..h {
            for q in 0..w {
                let owner = mask.owner[mask.index(i, p, q)];
                if owner < 0 {
                    continue;
                }
                let n = owner as usize;
                if n >= lt.objects {
                    return Err(Error::invalid(format!(
                        "mask owner {n} but only {} objects",
                        lt.objects
                    )));
                }
                let [p0, q0] = lt.cell(0, n);
                let from = (p0 * w + q0) * c;
                let to = i * frame_len + (p * w + q) * c;
                data[to..to + c].copy_from_slice(&src[from..from + c]);
            }
        }
    }
    Ok(TrajLatent {
        data: Tensor::new(vec![f, h, w, c], data)?,
        mask: mask.clone(),
    })
}

/// Unconditional counterpart: frame 0 is `z`, everything else zero.
pub fn frame0_only(z: &Tensor, frames: usize) -> Result<Tensor> {
    let mut dims = vec![frames];
    dims.extend_from_slice(z.dims());
    let mut out = Tensor::zeros(&dims)?;
    out.data_mut()[..z.len()].copy_from_slice(z.data());
    Ok(out)
}
