//! The fixed latent structure shared by the synthetic tasks and the frozen
//! encoders.
//!
//! Every class has a semantic code `c ∈ ℝ^d_c` (its "word embedding"). The
//! world renders a code into image-feature space through a fixed linear map
//! `A ∈ ℝ^(d_x × d_c)`. Pretrained encoders are aligned to this map, which is
//! what gives the reference (zero-prompt) model its zero-shot ability.

use rand_distr::{Distribution, Normal};

use crate::rng::SeedStreams;
use crate::tensor::Tensor;

const WORLD_SEED: u64 = 0x005e_ed0f_a11c_1a55;

/// The rendering map `A` as a `[d_x, d_c]` matrix with `N(0, 1/d_c)` entries.
pub fn rendering(d_x: usize, d_c: usize) -> Tensor {
    let mut rng = SeedStreams::new(WORLD_SEED).stream(&format!("render/{d_x}x{d_c}"));
    let normal = Normal::new(0.0, 1.0 / (d_c as f64).sqrt()).expect("valid std");
    Tensor::matrix(d_x, d_c, (0..d_x * d_c).map(|_| normal.sample(&mut rng)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rendering_is_fixed() {
        assert_eq!(rendering(16, 8), rendering(16, 8));
        assert_ne!(rendering(16, 8).data()[..8], rendering(8, 8).data()[..8]);
    }
}
