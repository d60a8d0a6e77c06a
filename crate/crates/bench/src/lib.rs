//! Shared fixtures for the benchmark targets.

use upscale_core::types::{Image, Latent};

pub fn block_image(h: usize, w: usize) -> Image {
    Image::from_fn(h, w, 1, |y, x, _| {
        (((y / 8) * 13 + (x / 8) * 29) % 97) as f64 / 97.0
    })
}

pub fn ramp_latent(channels: usize, h: usize, w: usize) -> Latent {
    Latent::from_fn(channels, h, w, |c, y, x| {
        ((c * 7 + y * 3 + x) % 23) as f64 * 0.05 - 0.5
    })
}
