use candle_core::{CpuStorage, CustomOp1, Layout, Shape, Tensor, D};

use super::params::{Init, ParamStore};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Option<Tensor>,
    stride: usize,
    padding: usize,
    frozen: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct ConvConfig {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub bias: bool,
    pub init: Init,
}

impl ConvConfig {
    pub fn same(kernel: usize, init: Init) -> Self {
        Self {
            kernel,
            stride: 1,
            padding: kernel / 2,
            bias: true,
            init,
        }
    }

    pub fn strided(kernel: usize, stride: usize, padding: usize, init: Init) -> Self {
        Self {
            kernel,
            stride,
            padding,
            bias: true,
            init,
        }
    }
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        cfg: ConvConfig,
    ) -> Result<Self> {
        let k = cfg.kernel;
        let weight = store.get(
            &format!("{name}.weight"),
            &[out_channels, in_channels, k, k],
            cfg.init,
        )?;
        let bias = if cfg.bias {
            Some(store.get(&format!("{name}.bias"), &[out_channels], Init::Zeros)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            stride: cfg.stride,
            padding: cfg.padding,
            frozen: store.is_frozen(),
        })
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn kernel(&self) -> usize {
        self.weight.dims()[2]
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn padding(&self) -> usize {
        self.padding
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let c = x.dim(1)?;
        if c != self.in_channels() {
            return Err(Error::shape(format!(
                "convolution expects {} input channels, got {c}",
                self.in_channels()
            )));
        }
        if self.frozen {
            return Ok(x.apply_op1(FrozenConv(self.clone()))?);
        }
        Ok(self.apply(x)?)
    }

    fn apply(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let y = x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?;
        match &self.bias {
            Some(b) => y.broadcast_add(&b.reshape((1, b.dim(0)?, 1, 1))?),
            None => Ok(y),
        }
    }
}

/// Convolution with constant weights as a single graph node whose backward
/// pass yields the input gradient only, so no gradient buffer is ever
/// produced for the weights.
struct FrozenConv(Conv2d);

fn gather<T: Copy>(data: &[T], layout: &Layout) -> Vec<T> {
    match layout.contiguous_offsets() {
        Some((a, b)) => data[a..b].to_vec(),
        None => {
            let (dims, stride) = (layout.dims(), layout.stride());
            let n: usize = dims.iter().product();
            let mut out = Vec::with_capacity(n);
            let mut idx = vec![0usize; dims.len()];
            for _ in 0..n {
                let off: usize = idx.iter().zip(stride).map(|(i, s)| i * s).sum();
                out.push(data[layout.start_offset() + off]);
                for d in (0..dims.len()).rev() {
                    idx[d] += 1;
                    if idx[d] < dims[d] {
                        break;
                    }
                    idx[d] = 0;
                }
            }
            out
        }
    }
}

impl CustomOp1 for FrozenConv {
    fn name(&self) -> &'static str {
        "frozen-conv2d"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let dev = candle_core::Device::Cpu;
        let shape = layout.shape().clone();
        let y = match storage {
            CpuStorage::F32(v) => self.0.apply(&Tensor::from_vec(gather(v, layout), shape, &dev)?)?,
            CpuStorage::F64(v) => self.0.apply(&Tensor::from_vec(gather(v, layout), shape, &dev)?)?,
            _ => candle_core::bail!("frozen convolution supports f32 and f64 only"),
        };
        let out_shape = y.shape().clone();
        let flat = y.flatten_all()?;
        let out = match storage {
            CpuStorage::F32(_) => CpuStorage::F32(flat.to_vec1()?),
            _ => CpuStorage::F64(flat.to_vec1()?),
        };
        Ok((out, out_shape))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let c = &self.0;
        let k = c.weight.dim(2)?;
        let out_size = (grad.dim(2)? - 1) * c.stride + k - 2 * c.padding;
        let out_padding = arg.dim(2)? - out_size;
        Ok(Some(grad.conv_transpose2d(&c.weight, c.padding, out_padding, c.stride, 1)?))
    }
}

/// Parameter-free instance normalization over the spatial dims.
///
/// With `detach_stats` the per-channel mean and variance are treated as
/// constants, which restores the purely convolutional spatial footprint of
/// the surrounding network for gradient-support probes.
pub fn instance_norm(x: &Tensor, detach_stats: bool) -> Result<Tensor> {
    const EPS: f64 = 1e-5;
    let (b, c, h, w) = x.dims4()?;
    let flat = x.reshape((b, c, h * w))?;
    let mut mean = flat.mean_keepdim(D::Minus1)?;
    if detach_stats {
        mean = mean.detach();
    }
    let centered = flat.broadcast_sub(&mean)?;
    let mut var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    if detach_stats {
        var = var.detach();
    }
    let out = centered.broadcast_div(&(var + EPS)?.sqrt()?)?;
    Ok(out.reshape((b, c, h, w))?)
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok(x.maximum(&(x * slope)?)?)
}

/// Logistic function in a form whose gradient stays finite for large inputs.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((((x * 0.5)?.tanh()? + 1.0)? * 0.5)?)
}

/// Nearest-neighbour resampling of a `(B, C, H, W)` tensor to `(h, w)`,
/// picking source index `floor(i · H / h)`.
pub fn resize_nearest(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (_, _, sh, sw) = x.dims4()?;
    if (sh, sw) == (h, w) {
        return Ok(x.clone());
    }
    if h % sh == 0 && w % sw == 0 && h >= sh && w >= sw {
        return Ok(x.upsample_nearest2d(h, w)?);
    }
    let rows: Vec<u32> = (0..h).map(|i| (i * sh / h) as u32).collect();
    let cols: Vec<u32> = (0..w).map(|j| (j * sw / w) as u32).collect();
    let rows = Tensor::new(rows.as_slice(), x.device())?;
    let cols = Tensor::new(cols.as_slice(), x.device())?;
    Ok(x.index_select(&rows, 2)?.index_select(&cols, 3)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn conv_output_geometry() {
        let mut store = ParamStore::new(0, DType::F32, &Device::Cpu);
        let conv = Conv2d::new(&mut store, "c", 2, 3, ConvConfig::strided(4, 2, 1, Init::Normal(0.02)))
            .unwrap();
        let x = Tensor::zeros((1, 2, 16, 16), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(conv.forward(&x).unwrap().dims(), &[1, 3, 8, 8]);
        let bad = Tensor::zeros((1, 1, 16, 16), DType::F32, &Device::Cpu).unwrap();
        assert!(conv.forward(&bad).is_err());
    }

    #[test]
    fn frozen_convolution_matches_trainable_one() {
        let dev = Device::Cpu;
        for cfg in [ConvConfig::strided(4, 2, 1, Init::He), ConvConfig::same(3, Init::He)] {
            let mut store = ParamStore::new(3, DType::F64, &dev);
            let live = Conv2d::new(&mut store, "c", 2, 3, cfg).unwrap();
            let mut frozen_store = store.frozen_copy().unwrap();
            let frozen = Conv2d::new(&mut frozen_store, "c", 2, 3, cfg).unwrap();
            let x = candle_core::Var::from_tensor(&Tensor::randn(0f64, 1.0, (2, 2, 9, 9), &dev).unwrap()).unwrap();
            let a = live.forward(x.as_tensor()).unwrap();
            let b = frozen.forward(x.as_tensor()).unwrap();
            let av: Vec<f64> = a.flatten_all().unwrap().to_vec1().unwrap();
            let bv: Vec<f64> = b.flatten_all().unwrap().to_vec1().unwrap();
            assert!(av.iter().zip(&bv).all(|(p, q)| (p - q).abs() < 1e-12));
            let ga = a.sqr().unwrap().sum_all().unwrap().backward().unwrap();
            let gb = b.sqr().unwrap().sum_all().unwrap().backward().unwrap();
            let gxa: Vec<f64> = ga.get(x.as_tensor()).unwrap().flatten_all().unwrap().to_vec1().unwrap();
            let gxb: Vec<f64> = gb.get(x.as_tensor()).unwrap().flatten_all().unwrap().to_vec1().unwrap();
            assert!(gxa.iter().zip(&gxb).all(|(p, q)| (p - q).abs() < 1e-10));
            for t in frozen_store.tensors().values() {
                assert!(gb.get(t).is_none());
            }
        }
    }

    #[test]
    fn instance_norm_zero_mean_unit_var() {
        let x = Tensor::arange(0f32, 32.0, &Device::Cpu)
            .unwrap()
            .reshape((1, 2, 4, 4))
            .unwrap();
        let y = instance_norm(&x, false).unwrap();
        let v: Vec<f32> = y.flatten_all().unwrap().to_vec1().unwrap();
        for ch in v.chunks(16) {
            let m: f32 = ch.iter().sum::<f32>() / 16.0;
            let var: f32 = ch.iter().map(|a| (a - m).powi(2)).sum::<f32>() / 16.0;
            assert!(m.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn sigmoid_matches_logistic_and_is_bounded() {
        let x = Tensor::new(&[-100f32, -1.0, 0.0, 2.0, 100.0], &Device::Cpu).unwrap();
        let y: Vec<f32> = sigmoid(&x).unwrap().to_vec1().unwrap();
        for (xi, yi) in [-100f32, -1.0, 0.0, 2.0, 100.0].iter().zip(y) {
            let want = 1.0 / (1.0 + (-xi).exp());
            assert!((want - yi).abs() < 1e-6);
        }
    }

    #[test]
    fn nearest_resize_picks_floor_indices() {
        let x = Tensor::arange(0f32, 16.0, &Device::Cpu)
            .unwrap()
            .reshape((1, 1, 4, 4))
            .unwrap();
        let down = resize_nearest(&x, 2, 2).unwrap();
        assert_eq!(
            down.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            vec![0.0, 2.0, 8.0, 10.0]
        );
        let up = resize_nearest(&down, 4, 4).unwrap();
        assert_eq!(up.dims(), &[1, 1, 4, 4]);
    }
}
