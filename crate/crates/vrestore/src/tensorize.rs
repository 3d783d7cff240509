//! Frame <-> tensor conversions (planar CHW, f32).

use candle_core::{Device, Tensor};

use crate::data::{Frame, VideoSequence};
use crate::error::Result;

pub fn frame_to_tensor(frame: &Frame, device: &Device) -> Result<Tensor> {
    let (h, w) = (frame.height, frame.width);
    let mut planar = vec![0.0f32; h * w * 3];
    for c in 0..3 {
        for i in 0..h * w {
            planar[c * h * w + i] = frame.pixels[i * 3 + c];
        }
    }
    Ok(Tensor::from_vec(planar, (3, h, w), device)?)
}

pub fn tensor_to_frame(t: &Tensor) -> Result<Frame> {
    let (_, h, w) = t.dims3()?;
    let planar = t.flatten_all()?.to_vec1::<f32>()?;
    let mut pixels = vec![0.0f32; h * w * 3];
    for c in 0..3 {
        for i in 0..h * w {
            pixels[i * 3 + c] = planar[c * h * w + i];
        }
    }
    Frame::new(h, w, pixels)
}

/// (N, 3, H, W) clip tensor.
pub fn sequence_to_tensor(seq: &VideoSequence, device: &Device) -> Result<Tensor> {
    let frames: Vec<Tensor> = seq
        .frames
        .iter()
        .map(|f| frame_to_tensor(f, device))
        .collect::<Result<_>>()?;
    Ok(Tensor::stack(&frames, 0)?)
}

pub fn tensor_to_sequence(t: &Tensor, id: &str) -> Result<VideoSequence> {
    let n = t.dim(0)?;
    let mut frames = Vec::with_capacity(n);
    for i in 0..n {
        frames.push(tensor_to_frame(&t.get(i)?)?);
    }
    VideoSequence::new(id, frames)
}
