//! Small neural-net building blocks on top of the parameter store.

use candle_core::Tensor;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::params::{Init, ParamStore};

#[derive(Clone)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    /// 2D convolution; `zero_init` zeroes the weight (bias is always zero at
    /// creation), which several growth/identity invariants rely on.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        zero_init: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let init = if zero_init {
            Init::Zeros
        } else {
            Init::HeUniform {
                fan_in: in_ch * kernel * kernel,
            }
        };
        let weight = store.create(
            &format!("{name}.w"),
            &[out_ch, in_ch, kernel, kernel],
            init,
            rng,
        )?;
        let bias = store.create(&format!("{name}.b"), &[out_ch], Init::Zeros, rng)?;
        Ok(Conv2d {
            weight,
            bias,
            stride,
            padding: kernel / 2,
        })
    }

    /// x: (N, C, H, W)
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?;
        let b = self.bias.reshape((1, self.bias.dim(0)?, 1, 1))?;
        Ok(y.broadcast_add(&b)?)
    }
}

/// Leaky ReLU with the slope used throughout the restoration trunk. A small
/// negative slope keeps gradient flowing through units that would otherwise
/// saturate at zero early in training.
pub fn lrelu(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::leaky_relu(x, 0.1)?)
}

/// conv3x3 -> LReLU -> conv3x3 (zero-initialized) with identity skip.
#[derive(Clone)]
pub struct ResidualBlock {
    c1: Conv2d,
    c2: Conv2d,
}

impl ResidualBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let c1 = Conv2d::new(store, &format!("{name}.c1"), channels, channels, 3, 1, false, rng)?;
        let c2 = Conv2d::new(store, &format!("{name}.c2"), channels, channels, 3, 1, true, rng)?;
        Ok(ResidualBlock { c1, c2 })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = lrelu(&self.c1.forward(x)?)?;
        let y = self.c2.forward(&y)?;
        Ok((x + y)?)
    }

    /// Scalar parameters in one residual block of the given width.
    pub fn param_count(channels: usize) -> usize {
        2 * (3 * 3 * channels * channels) + 2 * channels
    }
}

/// (N, C·s², H, W) -> (N, C, sH, sW)
pub fn pixel_shuffle(x: &Tensor, s: usize) -> Result<Tensor> {
    let (n, cs2, h, w) = x.dims4()?;
    let c = cs2 / (s * s);
    let x = x.reshape((n, c, s, s, h, w))?;
    let x = x.permute((0, 1, 4, 2, 5, 3))?;
    Ok(x.reshape((n, c, h * s, w * s))?.contiguous()?)
}

/// Reflect-pad the two spatial dims of (N, C, H, W) on the bottom/right so
/// both become multiples of `align`. Returns the padded tensor and the
/// original (H, W) for cropping afterwards.
pub fn reflect_pad_to_multiple(x: &Tensor, align: usize) -> Result<(Tensor, (usize, usize))> {
    let (_, _, h, w) = x.dims4()?;
    let ph = (align - h % align) % align;
    let pw = (align - w % align) % align;
    if ph == 0 && pw == 0 {
        return Ok((x.clone(), (h, w)));
    }
    let mut out = x.clone();
    if ph > 0 {
        let idx: Vec<u32> = reflect_indices(h, ph);
        let idx = Tensor::from_vec(idx, ph, x.device())?;
        let tail = out.index_select(&idx, 2)?;
        out = Tensor::cat(&[&out, &tail], 2)?;
    }
    if pw > 0 {
        let idx: Vec<u32> = reflect_indices(w, pw);
        let idx = Tensor::from_vec(idx, pw, x.device())?;
        let tail = out.index_select(&idx, 3)?;
        out = Tensor::cat(&[&out, &tail], 3)?;
    }
    Ok((out.contiguous()?, (h, w)))
}

fn reflect_indices(len: usize, pad: usize) -> Vec<u32> {
    // Mirror without repeating the edge sample: len-2, len-3, ...,
    // bouncing back at the borders for long extensions.
    (0..pad)
        .map(|i| {
            if len < 2 {
                return 0;
            }
            let period = 2 * (len - 1);
            let m = (len + i) % period;
            let idx = if m < len { m } else { period - m };
            idx as u32
        })
        .collect()
}

pub fn crop_to(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    Ok(x.narrow(2, 0, h)?.narrow(3, 0, w)?.contiguous()?)
}

/// Per-pixel layer norm over the channel dim of (N, C, H, W).
#[derive(Clone)]
pub struct ChannelLayerNorm {
    gamma: Tensor,
    beta: Tensor,
    eps: f64,
}

impl ChannelLayerNorm {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let gamma = store.create(&format!("{name}.g"), &[channels], Init::Ones, rng)?;
        let beta = store.create(&format!("{name}.bt"), &[channels], Init::Zeros, rng)?;
        Ok(ChannelLayerNorm {
            gamma,
            beta,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        let c = self.gamma.dim(0)?;
        let g = self.gamma.reshape((1, c, 1, 1))?;
        let b = self.beta.reshape((1, c, 1, 1))?;
        Ok(normed.broadcast_mul(&g)?.broadcast_add(&b)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{Init, ParamStore};
    use candle_core::{DType, Device, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn residual_block_is_identity_at_init() {
        let dev = Device::Cpu;
        let mut store = ParamStore::new(dev.clone());
        let rb = ResidualBlock::new(&mut store, "rb", 8, &mut rng(3)).unwrap();
        let x = Tensor::rand(0f32, 1f32, (1, 8, 6, 6), &dev).unwrap();
        let y = rb.forward(&x).unwrap();
        let diff = (y - &x).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert!(diff <= 1e-7, "residual block not identity at init: {diff}");
    }

    #[test]
    fn residual_block_param_count_formula() {
        let dev = Device::Cpu;
        let mut store = ParamStore::new(dev.clone());
        ResidualBlock::new(&mut store, "rb", 16, &mut rng(7)).unwrap();
        assert_eq!(store.count_scalars(), ResidualBlock::param_count(16));
        assert_eq!(ResidualBlock::param_count(16), 2 * (9 * 16 * 16) + 2 * 16);
    }

    #[test]
    fn pixel_shuffle_matches_manual_rearrangement() {
        let dev = Device::Cpu;
        // 1 batch, c*s^2 = 4 channels, 2x2 spatial, s=2 -> 1 channel 4x4.
        let vals: Vec<f32> = (0..16).map(|i| i as f32).collect();
        let x = Tensor::from_vec(vals, (1, 4, 2, 2), &dev).unwrap();
        let y = pixel_shuffle(&x, 2).unwrap();
        assert_eq!(y.dims(), [1, 1, 4, 4]);
        let got = y.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        // out[sy+dy, sx+dx] = in[ch=dy*s+dx, y, x]
        let mut want = vec![0f32; 16];
        for ch in 0..4 {
            for yy in 0..2 {
                for xx in 0..2 {
                    let v = (ch * 4 + yy * 2 + xx) as f32;
                    let (dy, dx) = (ch / 2, ch % 2);
                    want[(yy * 2 + dy) * 4 + (xx * 2 + dx)] = v;
                }
            }
        }
        assert_eq!(got, want);
    }

    #[test]
    fn reflect_pad_mirrors_without_edge_repeat() {
        let dev = Device::Cpu;
        let vals: Vec<f32> = (0..6).map(|i| i as f32).collect();
        let x = Tensor::from_vec(vals, (1, 1, 2, 3), &dev).unwrap();
        let (padded, (h, w)) = reflect_pad_to_multiple(&x, 4).unwrap();
        assert_eq!((h, w), (2, 3));
        assert_eq!(padded.dims(), [1, 1, 4, 4]);
        let got = padded.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        // rows: 0,1 then bounce -> 0,1 ; cols: 0,1,2 then reflect -> 1
        let want = vec![
            0., 1., 2., 1., //
            3., 4., 5., 4., //
            0., 1., 2., 1., //
            3., 4., 5., 4.,
        ];
        assert_eq!(got, want);
    }

    #[test]
    fn pad_then_crop_roundtrips() {
        let dev = Device::Cpu;
        let x = Tensor::rand(0f32, 1f32, (2, 3, 5, 7), &dev).unwrap();
        let (padded, (h, w)) = reflect_pad_to_multiple(&x, 8).unwrap();
        let back = crop_to(&padded, h, w).unwrap();
        let diff = (back - &x).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert_eq!(diff, 0.0);
    }

    #[test]
    fn channel_layer_norm_normalizes_per_pixel() {
        let dev = Device::Cpu;
        let mut store = ParamStore::new(dev.clone());
        let ln = ChannelLayerNorm::new(&mut store, "ln", 16, &mut rng(5)).unwrap();
        let x = Tensor::rand(-2f32, 3f32, (1, 16, 4, 4), &dev).unwrap();
        let y = ln.forward(&x).unwrap();
        // gamma=1, beta=0 at init: each pixel's channel vector is standardized.
        let mean = y.mean(1).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert!(mean <= 1e-5, "per-pixel mean {mean}");
        let var = y.sqr().unwrap().mean(1).unwrap();
        let dev_from_one = (var - 1.0).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert!(dev_from_one <= 1e-2, "per-pixel variance off by {dev_from_one}");
    }

    #[test]
    fn conv2d_zero_init_outputs_zero() {
        let dev = Device::Cpu;
        let mut store = ParamStore::new(dev.clone());
        let conv = Conv2d::new(&mut store, "c", 4, 8, 3, 1, true, &mut rng(9)).unwrap();
        let x = Tensor::rand(0f32, 1f32, (1, 4, 5, 5), &dev).unwrap();
        let y = conv.forward(&x).unwrap();
        assert_eq!(y.dims(), [1, 8, 5, 5]);
        let m = y.abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert_eq!(m, 0.0);
        let _ = (Init::Zeros, DType::F32); // silence unused-import lint paths
    }
}
