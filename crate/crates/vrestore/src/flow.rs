//! Optical flow estimation and differentiable warping.
//!
//! Convention: flow[y, x] = (dy, dx) and warp samples
//! output[y, x] = input[y + dy, x + dx] bilinearly, replicating the border.

use candle_core::{DType, Device, Tensor};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Frame;
use crate::error::{Error, Result};
use crate::layers::{lrelu, reflect_pad_to_multiple, Conv2d};
use crate::params::ParamStore;
use crate::tensorize::frame_to_tensor;

/// Per-pixel 2D displacement map, shape (H, W, 2), (dy, dx) in pixels.
#[derive(Debug, Clone)]
pub struct FlowField {
    pub vectors: Tensor,
    pub resolution: (usize, usize),
}

impl FlowField {
    pub fn new(vectors: Tensor) -> Result<Self> {
        let (h, w, two) = vectors.dims3()?;
        if two != 2 {
            return Err(Error::Argument(format!(
                "flow field must be HxWx2, got last dim {two}"
            )));
        }
        let max_mag = vectors.abs()?.max_all()?.to_scalar::<f32>()?;
        if !max_mag.is_finite() {
            return Err(Error::Numerics("flow field contains non-finite values".into()));
        }
        let bound = h.max(w) as f32;
        if max_mag > bound {
            return Err(Error::Numerics(format!(
                "flow magnitude {max_mag} exceeds bound {bound}"
            )));
        }
        Ok(FlowField {
            vectors,
            resolution: (h, w),
        })
    }

    pub fn zeros(h: usize, w: usize, device: &Device) -> Result<Self> {
        Ok(FlowField {
            vectors: Tensor::zeros((h, w, 2), DType::F32, device)?,
            resolution: (h, w),
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FlowEstimatorConfig {
    pub pyramid_levels: usize,
    pub channels: usize,
    pub trainable: bool,
}

impl Default for FlowEstimatorConfig {
    fn default() -> Self {
        FlowEstimatorConfig {
            pyramid_levels: 3,
            channels: 16,
            trainable: true,
        }
    }
}

// ---------------------------------------------------------------------------
// Bicubic resize (Catmull-Rom, a = -0.5), on plain frame data
// ---------------------------------------------------------------------------

fn cubic_kernel(x: f32) -> f32 {
    const A: f32 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        (A + 2.0) * x * x * x - (A + 3.0) * x * x + 1.0
    } else if x < 2.0 {
        A * x * x * x - 5.0 * A * x * x + 8.0 * A * x - 4.0 * A
    } else {
        0.0
    }
}

/// Standard bicubic interpolation to an explicit output size; border samples
/// are clamped. The identity size is exact.
pub fn bicubic_resize(frame: &Frame, out_h: usize, out_w: usize) -> Result<Frame> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::Argument("bicubic output size must be positive".into()));
    }
    let (h, w) = (frame.height, frame.width);
    if out_h == h && out_w == w {
        return Ok(frame.clone());
    }
    let scale_y = h as f32 / out_h as f32;
    let scale_x = w as f32 / out_w as f32;
    let mut out = Frame::zeros(out_h, out_w);
    // Separable: rows first into a scratch buffer, then columns.
    let mut horiz = vec![0.0f32; h * out_w * 3];
    for y in 0..h {
        for ox in 0..out_w {
            let sx = (ox as f32 + 0.5) * scale_x - 0.5;
            let x0 = sx.floor() as isize;
            let fx = sx - x0 as f32;
            let mut acc = [0.0f32; 3];
            let mut wsum = 0.0f32;
            for tap in -1..=2isize {
                let weight = cubic_kernel(tap as f32 - fx);
                let xi = (x0 + tap).clamp(0, w as isize - 1) as usize;
                wsum += weight;
                for c in 0..3 {
                    acc[c] += weight * frame.get(y, xi, c);
                }
            }
            for c in 0..3 {
                horiz[(y * out_w + ox) * 3 + c] = acc[c] / wsum;
            }
        }
    }
    for oy in 0..out_h {
        let sy = (oy as f32 + 0.5) * scale_y - 0.5;
        let y0 = sy.floor() as isize;
        let fy = sy - y0 as f32;
        for ox in 0..out_w {
            let mut acc = [0.0f32; 3];
            let mut wsum = 0.0f32;
            for tap in -1..=2isize {
                let weight = cubic_kernel(tap as f32 - fy);
                let yi = (y0 + tap).clamp(0, h as isize - 1) as usize;
                wsum += weight;
                for c in 0..3 {
                    acc[c] += weight * horiz[(yi * out_w + ox) * 3 + c];
                }
            }
            for c in 0..3 {
                out.set(oy, ox, c, acc[c] / wsum);
            }
        }
    }
    Ok(out)
}

/// Bicubic resize by a rational scale.
pub fn bicubic_scale(frame: &Frame, num: usize, den: usize) -> Result<Frame> {
    let out_h = frame.height * num / den;
    let out_w = frame.width * num / den;
    bicubic_resize(frame, out_h, out_w)
}

// ---------------------------------------------------------------------------
// Differentiable bilinear warp
// ---------------------------------------------------------------------------

/// Warp (C, H, W) features by a (H, W, 2) flow. Differentiable with respect
/// to both inputs; out-of-bounds samples replicate the border.
pub fn warp(features: &Tensor, flow: &Tensor) -> Result<Tensor> {
    let (c, h, w) = features.dims3()?;
    let (fh, fw, two) = flow.dims3()?;
    if fh != h || fw != w || two != 2 {
        return Err(Error::Argument(format!(
            "flow resolution {fh}x{fw}x{two} does not match features {h}x{w}"
        )));
    }
    let device = features.device();
    let grid_y = Tensor::arange(0f32, h as f32, device)?.reshape((h, 1))?;
    let grid_x = Tensor::arange(0f32, w as f32, device)?.reshape((1, w))?;
    let dy = flow.narrow(2, 0, 1)?.squeeze(2)?;
    let dx = flow.narrow(2, 1, 1)?.squeeze(2)?;
    let py = grid_y.broadcast_add(&dy)?;
    let px = grid_x.broadcast_add(&dx)?;

    let y0f = py.floor()?.detach();
    let x0f = px.floor()?.detach();
    let fy = (&py - &y0f)?;
    let fx = (&px - &x0f)?;

    let clampf = |t: &Tensor, max: usize| -> Result<Tensor> {
        Ok(t.clamp(0f32, (max - 1) as f32)?)
    };
    let y0 = clampf(&y0f, h)?;
    let y1 = clampf(&(&y0f + 1.0)?, h)?;
    let x0 = clampf(&x0f, w)?;
    let x1 = clampf(&(&x0f + 1.0)?, w)?;

    let flat = features.reshape((c, h * w))?;
    let gather_at = |yy: &Tensor, xx: &Tensor| -> Result<Tensor> {
        let idx = (yy * (w as f64))?.add(xx)?.to_dtype(DType::U32)?;
        let idx = idx.reshape((1, h * w))?.broadcast_as((c, h * w))?.contiguous()?;
        Ok(flat.gather(&idx, 1)?)
    };
    let v00 = gather_at(&y0, &x0)?;
    let v01 = gather_at(&y0, &x1)?;
    let v10 = gather_at(&y1, &x0)?;
    let v11 = gather_at(&y1, &x1)?;

    let one = Tensor::ones((h, w), DType::F32, device)?;
    let wy1 = fy.clone();
    let wy0 = (&one - &fy)?;
    let wx1 = fx.clone();
    let wx0 = (&one - &fx)?;
    let weight = |a: &Tensor, b: &Tensor| -> Result<Tensor> {
        Ok((a * b)?.reshape((1, h * w))?)
    };
    let out = v00
        .broadcast_mul(&weight(&wy0, &wx0)?)?
        .add(&v01.broadcast_mul(&weight(&wy0, &wx1)?)?)?
        .add(&v10.broadcast_mul(&weight(&wy1, &wx0)?)?)?
        .add(&v11.broadcast_mul(&weight(&wy1, &wx1)?)?)?;
    Ok(out.reshape((c, h, w))?)
}

/// Resize a (H, W, 2) flow to a new resolution, scaling displacement values
/// by the resize factors exactly.
pub fn resize_flow(flow: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (h, w, _) = flow.dims3()?;
    if h == out_h && w == out_w {
        return Ok(flow.clone());
    }
    let chw = flow.permute((2, 0, 1))?.unsqueeze(0)?.contiguous()?;
    let resized = chw.upsample_nearest2d(out_h, out_w)?;
    let sy = out_h as f64 / h as f64;
    let sx = out_w as f64 / w as f64;
    let dy = (resized.narrow(1, 0, 1)? * sy)?;
    let dx = (resized.narrow(1, 1, 1)? * sx)?;
    let scaled = Tensor::cat(&[dy, dx], 1)?;
    Ok(scaled.squeeze(0)?.permute((1, 2, 0))?.contiguous()?)
}

// ---------------------------------------------------------------------------
// Coarse-to-fine pyramid flow estimator
// ---------------------------------------------------------------------------

/// Tiny trainable stand-in for a pretrained flow network. Each pyramid level
/// predicts a residual flow from (reference, warped target, current flow);
/// level heads are zero-initialized so an untrained estimator outputs zero
/// flow everywhere.
pub struct PyramidFlowNet {
    pub cfg: FlowEstimatorConfig,
    levels: Vec<[Conv2d; 3]>,
}

impl PyramidFlowNet {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        cfg: &FlowEstimatorConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if cfg.pyramid_levels < 1 {
            return Err(Error::Config("pyramid_levels must be >= 1".into()));
        }
        let mut levels = Vec::with_capacity(cfg.pyramid_levels);
        for l in 0..cfg.pyramid_levels {
            let name = format!("{prefix}.l{l}");
            let c1 = Conv2d::new(store, &format!("{name}.c1"), 8, cfg.channels, 3, 1, false, rng)?;
            let c2 = Conv2d::new(store, &format!("{name}.c2"), cfg.channels, cfg.channels, 3, 1, false, rng)?;
            let c3 = Conv2d::new(store, &format!("{name}.c3"), cfg.channels, 2, 3, 1, true, rng)?;
            levels.push([c1, c2, c3]);
        }
        Ok(PyramidFlowNet { cfg: cfg.clone(), levels })
    }

    /// Estimate flow ref -> target at the input resolution.
    /// Both inputs are (3, H, W); the output is (H, W, 2).
    pub fn estimate(&self, reference: &Tensor, target: &Tensor) -> Result<Tensor> {
        if reference.dims() != target.dims() {
            return Err(Error::Argument(format!(
                "flow inputs differ in shape: {:?} vs {:?}",
                reference.dims(),
                target.dims()
            )));
        }
        let align = 1 << (self.cfg.pyramid_levels - 1);
        let r4 = reference.unsqueeze(0)?;
        let t4 = target.unsqueeze(0)?;
        let (r4, orig) = reflect_pad_to_multiple(&r4, align)?;
        let (t4, _) = reflect_pad_to_multiple(&t4, align)?;

        // Image pyramids, finest first.
        let mut refs = vec![r4];
        let mut tgts = vec![t4];
        for _ in 1..self.cfg.pyramid_levels {
            refs.push(refs.last().unwrap().avg_pool2d(2)?);
            tgts.push(tgts.last().unwrap().avg_pool2d(2)?);
        }

        let coarsest = self.cfg.pyramid_levels - 1;
        let (_, _, ch, cw) = refs[coarsest].dims4()?;
        let mut flow = Tensor::zeros((ch, cw, 2), DType::F32, reference.device())?;
        for level in (0..self.cfg.pyramid_levels).rev() {
            let (_, _, lh, lw) = refs[level].dims4()?;
            flow = resize_flow(&flow, lh, lw)?;
            let tgt = tgts[level].squeeze(0)?;
            let warped = warp(&tgt, &flow)?;
            let flow_chw = flow.permute((2, 0, 1))?.contiguous()?;
            let inp = Tensor::cat(&[refs[level].squeeze(0)?, warped, flow_chw], 0)?
                .unsqueeze(0)?;
            let [c1, c2, c3] = &self.levels[level];
            let y = lrelu(&c1.forward(&inp)?)?;
            let y = lrelu(&c2.forward(&y)?)?;
            let residual = c3.forward(&y)?.squeeze(0)?.permute((1, 2, 0))?;
            flow = (flow + residual)?.contiguous()?;
        }
        let (oh, ow) = orig;
        Ok(flow
            .permute((2, 0, 1))?
            .unsqueeze(0)?
            .narrow(2, 0, oh)?
            .narrow(3, 0, ow)?
            .squeeze(0)?
            .permute((1, 2, 0))?
            .contiguous()?)
    }
}

/// Full-resolution flow between two frames: estimated on x4 bicubically
/// downsampled inputs, then upsampled with displacements multiplied by 4.
pub fn estimate_flow(
    reference: &Frame,
    target: &Frame,
    net: &PyramidFlowNet,
    device: &Device,
) -> Result<FlowField> {
    if !reference.same_shape(target) {
        return Err(Error::Argument("flow inputs must share a shape".into()));
    }
    let (h, w) = (reference.height, reference.width);
    let (dh, dw) = ((h / 4).max(1), (w / 4).max(1));
    let ref_ds = frame_to_tensor(&bicubic_resize(reference, dh, dw)?, device)?;
    let tgt_ds = frame_to_tensor(&bicubic_resize(target, dh, dw)?, device)?;
    let flow_ds = net.estimate(&ref_ds, &tgt_ds)?;
    FlowField::new(resize_flow(&flow_ds, h, w)?)
}

// ---------------------------------------------------------------------------
// Debug dump: raw little-endian f32 with a (H, W) header
// ---------------------------------------------------------------------------

pub fn write_flow(flow: &FlowField, path: &std::path::Path) -> Result<()> {
    use byteorder::{LittleEndian, WriteBytesExt};
    let mut buf: Vec<u8> = Vec::new();
    let (h, w) = flow.resolution;
    buf.write_u32::<LittleEndian>(h as u32).unwrap();
    buf.write_u32::<LittleEndian>(w as u32).unwrap();
    for v in flow.vectors.flatten_all()?.to_vec1::<f32>()? {
        buf.write_f32::<LittleEndian>(v).unwrap();
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path.to_path_buf(), e))
}

pub fn read_flow(path: &std::path::Path, device: &Device) -> Result<FlowField> {
    use byteorder::{LittleEndian, ReadBytesExt};
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.to_path_buf(), e))?;
    let mut cur = std::io::Cursor::new(bytes);
    let h = cur.read_u32::<LittleEndian>().map_err(|e| Error::io(path, e))? as usize;
    let w = cur.read_u32::<LittleEndian>().map_err(|e| Error::io(path, e))? as usize;
    let mut data = vec![0f32; h * w * 2];
    for v in &mut data {
        *v = cur.read_f32::<LittleEndian>().map_err(|e| Error::io(path, e))?;
    }
    FlowField::new(Tensor::from_vec(data, (h, w, 2), device)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Frame;
    use candle_core::{DType, Device, Var};
    use rand::SeedableRng;

    fn sine_frame(h: usize, w: usize) -> Frame {
        let mut f = Frame::zeros(h, w);
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    let v = 0.5 + 0.4 * (0.9 * y as f32 + 1.7 * x as f32 + 0.3 * c as f32).sin();
                    f.set(y, x, c, v);
                }
            }
        }
        f
    }

    #[test]
    fn bicubic_same_size_is_identity() {
        let f = sine_frame(6, 9);
        let out = bicubic_resize(&f, 6, 9).unwrap();
        for (a, b) in f.pixels.iter().zip(&out.pixels) {
            assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn bicubic_preserves_constants() {
        let f = Frame::constant(5, 5, [0.2, 0.5, 0.8]);
        let up = bicubic_resize(&f, 13, 11).unwrap();
        for y in 0..13 {
            for x in 0..11 {
                assert!((up.get(y, x, 1) - 0.5).abs() <= 1e-6);
            }
        }
    }

    // Frozen outputs of an independent reference implementation
    // (Catmull-Rom a=-0.5, src = (dst+0.5)*scale-0.5, clamped borders).
    #[test]
    fn bicubic_matches_reference_samples() {
        let f = sine_frame(5, 7);
        let up = bicubic_resize(&f, 10, 14).unwrap();
        let dn = bicubic_resize(&f, 3, 4).unwrap();
        let up_cases = [
            ((0usize, 0usize, 0usize), 0.447587667f32),
            ((3, 5, 1), 0.168595770),
            ((7, 11, 2), 0.418827197),
            ((9, 13, 0), 0.934168700),
            ((4, 6, 1), 0.632459450),
            ((2, 9, 2), 0.804214813),
        ];
        for ((y, x, c), want) in up_cases {
            let got = up.get(y, x, c);
            assert!((got - want).abs() <= 1e-5, "up[{y},{x},{c}] {got} vs {want}");
        }
        let dn_cases = [
            ((0usize, 0usize, 0usize), 0.704422766f32),
            ((1, 2, 1), 0.741591201),
            ((2, 3, 2), 0.748148930),
            ((1, 1, 0), 0.185106544),
        ];
        for ((y, x, c), want) in dn_cases {
            let got = dn.get(y, x, c);
            assert!((got - want).abs() <= 1e-5, "dn[{y},{x},{c}] {got} vs {want}");
        }
    }

    #[test]
    fn warp_with_zero_flow_is_identity() {
        let dev = Device::Cpu;
        let feat = Tensor::rand(0f32, 1f32, (3, 6, 5), &dev).unwrap();
        let flow = Tensor::zeros((6, 5, 2), DType::F32, &dev).unwrap();
        let out = warp(&feat, &flow).unwrap();
        let diff = (out - &feat).unwrap().abs().unwrap().max_all().unwrap();
        assert!(diff.to_scalar::<f32>().unwrap() <= 1e-6);
    }

    // Frozen against an independent numpy bilinear sampler with border clamp:
    // feat[y,x] = 0.1*(4y+x), flow[y,x] = (0.3+0.1y, -0.6+0.2x).
    #[test]
    fn warp_matches_reference_samples() {
        let dev = Device::Cpu;
        let feat_vals: Vec<f32> = (0..16).map(|i| 0.1 * i as f32).collect();
        let feat = Tensor::from_vec(feat_vals, (1, 4, 4), &dev).unwrap();
        let mut flow_vals = Vec::new();
        for y in 0..4 {
            for x in 0..4 {
                flow_vals.push(0.3 + 0.1 * y as f32);
                flow_vals.push(-0.6 + 0.2 * x as f32);
            }
        }
        let flow = Tensor::from_vec(flow_vals, (4, 4, 2), &dev).unwrap();
        let out = warp(&feat, &flow).unwrap().flatten_all().unwrap();
        let got = out.to_vec1::<f32>().unwrap();
        let want = [
            0.12, 0.18, 0.30, 0.42, 0.56, 0.62, 0.74, 0.86, 1.00, 1.06, 1.18, 1.30, 1.20,
            1.26, 1.38, 1.50,
        ];
        for (i, (&g, &w)) in got.iter().zip(want.iter()).enumerate() {
            assert!((g - w).abs() <= 1e-6, "idx {i}: {g} vs {w}");
        }
    }

    #[test]
    fn warp_gradient_matches_finite_differences() {
        let dev = Device::Cpu;
        let h = 5usize;
        let w = 5usize;
        // Smooth feature map so finite differences are well conditioned.
        let mut feat_vals = Vec::new();
        for y in 0..h {
            for x in 0..w {
                feat_vals.push(0.5 + 0.3 * (0.7 * y as f32).sin() + 0.2 * (0.9 * x as f32).cos());
            }
        }
        let feat = Tensor::from_vec(feat_vals, (1, h, w), &dev).unwrap();
        // Fractional flows away from integer lattice crossings.
        let mut flow_vals = Vec::new();
        for y in 0..h {
            for x in 0..w {
                flow_vals.push(0.35 + 0.013 * (x + y) as f32);
                flow_vals.push(-0.45 + 0.017 * x as f32);
            }
        }
        let flow_var = Var::from_vec(flow_vals.clone(), (h, w, 2), &dev).unwrap();
        // Weighted-sum loss exercises all output pixels.
        let weight_vals: Vec<f32> = (0..h * w).map(|i| 0.3 + 0.01 * i as f32).collect();
        let weights = Tensor::from_vec(weight_vals, (1, h, w), &dev).unwrap();
        let loss = warp(&feat, flow_var.as_tensor())
            .unwrap()
            .mul(&weights)
            .unwrap()
            .sum_all()
            .unwrap();
        let grads = loss.backward().unwrap();
        let analytic = grads
            .get(flow_var.as_tensor())
            .expect("flow gradient missing")
            .flatten_all()
            .unwrap()
            .to_vec1::<f32>()
            .unwrap();

        // The warp output is piecewise bilinear in the flow, so a central
        // difference taken inside one interpolation cell is exact up to
        // rounding; accumulate the probe loss in f64 to keep that rounding
        // far below the tolerance.
        let eps = 4.5e-2f32;
        let eval_loss = |vals: &[f32]| -> f64 {
            let flow = Tensor::from_vec(vals.to_vec(), (h, w, 2), &dev).unwrap();
            warp(&feat, &flow)
                .unwrap()
                .to_dtype(DType::F64)
                .unwrap()
                .mul(&weights.to_dtype(DType::F64).unwrap())
                .unwrap()
                .sum_all()
                .unwrap()
                .to_scalar::<f64>()
                .unwrap()
        };
        let mut diff_sq = 0f64;
        let mut norm_sq = 0f64;
        for i in 0..flow_vals.len() {
            let mut plus = flow_vals.clone();
            plus[i] += eps;
            let mut minus = flow_vals.clone();
            minus[i] -= eps;
            let fd = (eval_loss(&plus) - eval_loss(&minus)) / (2.0 * eps as f64);
            diff_sq += (fd - analytic[i] as f64).powi(2);
            norm_sq += (analytic[i] as f64).powi(2).max(fd.powi(2));
        }
        let rel = diff_sq.sqrt() / norm_sq.sqrt().max(1e-12);
        assert!(rel <= 1e-3, "relative gradient error {rel}");
    }

    #[test]
    fn resize_flow_rescales_displacements() {
        let dev = Device::Cpu;
        let mut vals = Vec::new();
        for _ in 0..16 {
            vals.push(1.0f32);
            vals.push(2.0);
        }
        let flow = Tensor::from_vec(vals, (4, 4, 2), &dev).unwrap();
        let up = resize_flow(&flow, 8, 8).unwrap();
        let v = up.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        for pair in v.chunks(2) {
            assert!((pair[0] - 2.0).abs() <= 1e-6);
            assert!((pair[1] - 4.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn untrained_pyramid_net_outputs_zero_flow() {
        let dev = Device::Cpu;
        let mut store = crate::params::ParamStore::new(dev.clone());
        let cfg = FlowEstimatorConfig::default();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let net = PyramidFlowNet::new(&mut store, "flow", &cfg, &mut rng).unwrap();
        let a = Tensor::rand(0f32, 1f32, (3, 16, 16), &dev).unwrap();
        let b = Tensor::rand(0f32, 1f32, (3, 16, 16), &dev).unwrap();
        let flow = net.estimate(&a, &b).unwrap();
        let m = flow.abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert!(m <= 1e-7, "untrained flow magnitude {m}");
    }

    #[test]
    fn flow_field_rejects_non_finite_and_huge_vectors() {
        let dev = Device::Cpu;
        let bad = Tensor::from_vec(vec![f32::NAN; 8], (2, 2, 2), &dev).unwrap();
        assert!(FlowField::new(bad).is_err());
        let huge = Tensor::from_vec(vec![100.0f32; 8], (2, 2, 2), &dev).unwrap();
        assert!(FlowField::new(huge).is_err());
    }

    #[test]
    fn flow_file_roundtrip() {
        let dev = Device::Cpu;
        let dir = tempfile::tempdir().unwrap();
        let vals: Vec<f32> = (0..24).map(|i| (i as f32) * 0.1 - 1.0).collect();
        let flow = FlowField::new(Tensor::from_vec(vals.clone(), (3, 4, 2), &dev).unwrap()).unwrap();
        let path = dir.path().join("f.flo");
        write_flow(&flow, &path).unwrap();
        let back = read_flow(&path, &dev).unwrap();
        let got = back.vectors.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(got, vals);
    }

    /// A short photometric-training run must drive the estimated flow
    /// toward a known sub-pixel shift.
    #[test]
    fn pyramid_net_learns_a_global_shift() {
        use candle_nn::optim::{AdamW, Optimizer, ParamsAdamW};
        let dev = Device::Cpu;
        let h = 16usize;
        let w = 16usize;
        let shift = 1.0f32; // target frame is the reference shifted by one row
        let mut ref_vals = Vec::new();
        let mut tgt_vals = Vec::new();
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    let v = |yy: f32| {
                        0.5 + 0.3 * (0.5 * yy + 0.2 * c as f32).sin()
                            + 0.2 * (0.4 * x as f32).cos()
                    };
                    ref_vals.push(v(y as f32));
                    tgt_vals.push(v(y as f32 + shift));
                }
            }
        }
        let reference = Tensor::from_vec(ref_vals, (3, h, w), &dev).unwrap();
        let target = Tensor::from_vec(tgt_vals, (3, h, w), &dev).unwrap();

        let mut store = crate::params::ParamStore::new(dev.clone());
        let cfg = FlowEstimatorConfig { pyramid_levels: 2, channels: 8, trainable: true };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let net = PyramidFlowNet::new(&mut store, "flow", &cfg, &mut rng).unwrap();
        let photometric = |net: &PyramidFlowNet| -> f32 {
            let flow = net.estimate(&reference, &target).unwrap();
            let warped = warp(&target, &flow).unwrap();
            (warped - &reference)
                .unwrap()
                .sqr()
                .unwrap()
                .mean_all()
                .unwrap()
                .to_scalar::<f32>()
                .unwrap()
        };
        let initial = photometric(&net);
        let mut opt = AdamW::new(
            store.all_vars(),
            ParamsAdamW { lr: 5e-3, beta1: 0.9, beta2: 0.99, weight_decay: 0.0, ..Default::default() },
        )
        .unwrap();
        for _ in 0..120 {
            let flow = net.estimate(&reference, &target).unwrap();
            let warped = warp(&target, &flow).unwrap();
            let loss = (warped - &reference).unwrap().sqr().unwrap().mean_all().unwrap();
            opt.backward_step(&loss).unwrap();
        }
        let trained = photometric(&net);
        assert!(
            trained < 0.5 * initial,
            "photometric loss did not improve: {initial} -> {trained}"
        );
    }
}
