//! Fixtures shared by the benchmarks: an untrained toy network at the
//! default size (speed does not depend on the weights) and a source image.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use dac_core::abduction::AbductionConfig;
use dac_core::generator::{GeneratorBackend, ToyArchitecture, ToyBackend};
use dac_core::imaging::Image;
use dac_core::lora::{AdapterTarget, LoraAdapter};
use dac_core::schedule::NoiseSchedule;
use dac_core::{DType, Device};

pub fn backend() -> ToyBackend {
    let schedule = NoiseSchedule::linear(1000, 1e-4, 0.02).expect("valid schedule");
    ToyBackend::random(&ToyArchitecture::default(), schedule, 0, DType::F32, &Device::Cpu).expect("toy backend")
}

/// A seeded generator adapter at the toy abduction rank.
pub fn generator_adapter(backend: &dyn GeneratorBackend) -> LoraAdapter {
    let cfg = AbductionConfig::toy();
    LoraAdapter::init(
        &backend.host_layers(AdapterTarget::Generator),
        AdapterTarget::Generator,
        cfg.placement,
        cfg.rank_u,
        1,
        backend.dtype(),
        backend.device(),
    )
    .expect("adapter init")
}

/// Mid-grey image with a red square in the middle.
pub fn source(size: usize) -> Image {
    let mut data = vec![0.5f32; 3 * size * size];
    for y in size / 4..3 * size / 4 {
        for x in size / 4..3 * size / 4 {
            let i = y * size + x;
            data[i] = 0.9;
            data[size * size + i] = 0.1;
            data[2 * size * size + i] = 0.1;
        }
    }
    Image::new(size, size, data).expect("image")
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
