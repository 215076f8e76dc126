//! Fixtures shared by the criterion benches.

use cfft_core::{Dataset, ModelConfig, ModelParams, ScmSpec, Split};

pub struct Fixture {
    pub config: ModelConfig,
    pub params: ModelParams,
    pub data: Dataset,
}

/// The compact benchmark geometry with a randomly initialised model and
/// `n` in-distribution samples.
pub fn fixture(n: usize) -> Fixture {
    let spec = ScmSpec {
        num_classes: 4,
        num_domains: 4,
        image_side: 16,
        ..ScmSpec::default()
    };
    let config = ModelConfig {
        embed_dim: 32,
        num_layers: 2,
        num_heads: 4,
        num_patches: spec.num_patches(),
        patch_len: spec.patch_len(),
        num_classes: spec.num_classes,
        mlp_dim: 64,
    };
    Fixture {
        params: ModelParams::init(&config, 0).expect("valid config"),
        data: Dataset::generate(&spec, Split::IdTrain, n, 0).expect("valid spec"),
        config,
    }
}
