//! Synthetic ground-truth sequences for desk-scale experiments.
//!
//! Each sequence is an analytic scene (low-frequency sinusoid texture plus a
//! few moving soft blobs) sampled at sub-pixel positions, so motion is smooth
//! and there are no resampling artifacts in the ground truth.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{Frame, VideoSequence};
use crate::error::Result;

struct Blob {
    x: f32,
    y: f32,
    vx: f32,
    vy: f32,
    radius: f32,
    color: [f32; 3],
}

struct Wave {
    fx: f32,
    fy: f32,
    phase: f32,
    amp: [f32; 3],
}

/// Generate one toy sequence of `n` frames at `height`x`width`.
pub fn toy_sequence(
    id: impl Into<String>,
    height: usize,
    width: usize,
    n: usize,
    seed: u64,
) -> Result<VideoSequence> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Global scene drift, sub-pixel per frame.
    let drift = (rng.gen_range(-1.5..1.5f32), rng.gen_range(-1.5..1.5f32));
    let base: [f32; 3] = [
        rng.gen_range(0.25..0.75),
        rng.gen_range(0.25..0.75),
        rng.gen_range(0.25..0.75),
    ];
    let waves: Vec<Wave> = (0..4)
        .map(|_| Wave {
            fx: rng.gen_range(0.02..0.25),
            fy: rng.gen_range(0.02..0.25),
            phase: rng.gen_range(0.0..std::f32::consts::TAU),
            amp: [
                rng.gen_range(-0.12..0.12),
                rng.gen_range(-0.12..0.12),
                rng.gen_range(-0.12..0.12),
            ],
        })
        .collect();
    let blobs: Vec<Blob> = (0..3)
        .map(|_| Blob {
            x: rng.gen_range(0.0..width as f32),
            y: rng.gen_range(0.0..height as f32),
            vx: rng.gen_range(-2.0..2.0),
            vy: rng.gen_range(-2.0..2.0),
            radius: rng.gen_range(4.0..(width.min(height) as f32 / 3.0)),
            color: [rng.gen(), rng.gen(), rng.gen()],
        })
        .collect();

    let mut frames = Vec::with_capacity(n);
    for t in 0..n {
        let tf = t as f32;
        let (ox, oy) = (drift.0 * tf, drift.1 * tf);
        let mut frame = Frame::zeros(height, width);
        for y in 0..height {
            for x in 0..width {
                let sx = x as f32 + ox;
                let sy = y as f32 + oy;
                let mut rgb = base;
                for wave in &waves {
                    let v = (wave.fx * sx + wave.fy * sy + wave.phase).sin();
                    for c in 0..3 {
                        rgb[c] += wave.amp[c] * v;
                    }
                }
                for blob in &blobs {
                    let bx = wrap(blob.x + blob.vx * tf, width as f32);
                    let by = wrap(blob.y + blob.vy * tf, height as f32);
                    let dx = torus_dist(sx.rem_euclid(width as f32), bx, width as f32);
                    let dy = torus_dist(sy.rem_euclid(height as f32), by, height as f32);
                    let d2 = dx * dx + dy * dy;
                    let w = (-d2 / (2.0 * blob.radius * blob.radius)).exp();
                    for c in 0..3 {
                        rgb[c] = rgb[c] * (1.0 - w) + blob.color[c] * w;
                    }
                }
                for c in 0..3 {
                    frame.set(y, x, c, rgb[c].clamp(0.0, 1.0));
                }
            }
        }
        frame.quantize_u8();
        frames.push(frame);
    }
    VideoSequence::new(id, frames)
}

fn wrap(v: f32, period: f32) -> f32 {
    v.rem_euclid(period)
}

fn torus_dist(a: f32, b: f32, period: f32) -> f32 {
    let d = (a - b).abs();
    d.min(period - d)
}
