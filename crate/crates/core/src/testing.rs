//! Shared fixtures for unit tests.

use candle_core::{DType, Device};

use crate::generator::{ToyArchitecture, ToyBackend};
use crate::imaging::Image;
use crate::schedule::NoiseSchedule;

pub(crate) fn tiny_backend(dtype: DType) -> ToyBackend {
    let sched = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
    ToyBackend::random(&ToyArchitecture::tiny(), sched, 0, dtype, &Device::Cpu).unwrap()
}

/// A red disc on grey at `size` pixels.
pub(crate) fn disc_image(size: usize) -> Image {
    let mut data = vec![0.5f32; 3 * size * size];
    let c = (size as f32 - 1.0) / 2.0;
    for y in 0..size {
        for x in 0..size {
            let (dx, dy) = (x as f32 - c, y as f32 - c);
            if dx * dx + dy * dy <= (size as f32 / 3.0).powi(2) {
                let i = y * size + x;
                data[i] = 0.9;
                data[size * size + i] = 0.1;
                data[2 * size * size + i] = 0.1;
            }
        }
    }
    Image::new(size, size, data).unwrap()
}

pub(crate) fn quick_config() -> crate::abduction::AbductionConfig {
    crate::abduction::AbductionConfig {
        iterations: 4,
        learning_rate: 1e-2,
        rank_u: 4,
        rank_delta: 2,
        checkpoint_iters: [2, 4].into_iter().collect(),
        ..Default::default()
    }
}

/// A completed session over the tiny backend.
pub(crate) fn done_session(
    store: &crate::session::SessionStore,
    backend: &ToyBackend,
    cfg: crate::abduction::AbductionConfig,
) -> crate::session::EditSession {
    let mut s = store
        .create(backend, &disc_image(8), "a red circle", "a blue circle", cfg)
        .unwrap();
    s.abduct(backend, &mut ()).unwrap();
    s
}
