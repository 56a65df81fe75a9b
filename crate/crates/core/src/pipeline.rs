//! End-to-end generation: embedding → stage-1 sketch → stage-2 image.

use cvaegan_tensor::Tensor;
use rand::Rng;

use crate::cgan::Generator;
use crate::cvae::Cvae;
use crate::error::Result;

const CHUNK: usize = 64;

/// Sketches `[N, 3, S, S]` and refined images `[N, 3, 4S, 4S]` for the rows
/// of `embeddings`, generated in chunks of 64 with noise drawn from `rng`.
pub fn generate_images<R: Rng + ?Sized>(
    stage1: &Cvae<f32>,
    stage2: &Generator<f32>,
    embeddings: &Tensor<f32>,
    rng: &mut R,
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let (n, dim) = match embeddings.shape() {
        [n, d] => (*n, *d),
        other => {
            return Err(crate::error::Error::config(format!(
                "embeddings must be [N, dim], got {other:?}"
            )))
        }
    };
    let s = stage1.config.image_size;
    let mut sketches = Vec::with_capacity(n * 3 * s * s);
    let mut images = Vec::with_capacity(n * 48 * s * s);
    for lo in (0..n).step_by(CHUNK) {
        let hi = (lo + CHUNK).min(n);
        let phi = Tensor::new([hi - lo, dim], embeddings.data()[lo * dim..hi * dim].to_vec())?;
        let sample = stage1.generate(&phi, rng)?;
        let out = stage2.generate(&sample.image, &sample.condition.c_hat)?;
        sketches.extend_from_slice(sample.image.data());
        images.extend_from_slice(out.data());
    }
    Ok((
        Tensor::new([n, 3, s, s], sketches)?,
        Tensor::new([n, 3, 4 * s, 4 * s], images)?,
    ))
}
