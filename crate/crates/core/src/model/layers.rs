use candle_core::{Tensor, Var, D};
use rand_chacha::ChaCha8Rng;

use super::gdn::Gdn;
use super::params::ParamStore;
use crate::error::{Error, Result};

/// Architectural description of one layer, independent of its weights.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerSpec {
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
    },
    ConvTranspose {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
    },
    Gdn {
        channels: usize,
        inverse: bool,
    },
    Relu,
    /// Anything the built-in layer set does not describe.
    Other(String),
}

impl LayerSpec {
    pub fn name(&self) -> String {
        match self {
            LayerSpec::Conv { .. } => "conv2d".into(),
            LayerSpec::ConvTranspose { .. } => "conv_transpose2d".into(),
            LayerSpec::Gdn { inverse: false, .. } => "gdn".into(),
            LayerSpec::Gdn { inverse: true, .. } => "igdn".into(),
            LayerSpec::Relu => "relu".into(),
            LayerSpec::Other(name) => name.clone(),
        }
    }
}

/// Where a transform takes its input from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransformInput {
    Image,
    /// Output of the transform at this index in the same list.
    Transform(usize),
}

#[derive(Debug, Clone)]
pub struct TransformSpec {
    pub name: String,
    pub input: TransformInput,
    pub layers: Vec<LayerSpec>,
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Var,
    bias: Var,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    /// Conv with PyTorch's default fan-in scaled uniform initialisation.
    pub fn new(
        params: &mut ParamStore,
        prefix: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let bound = 1.0 / ((in_channels * kernel * kernel) as f64).sqrt();
        let weight =
            params.uniform(&format!("{prefix}.weight"), &[out_channels, in_channels, kernel, kernel], bound, rng)?;
        let bias = params.uniform(&format!("{prefix}.bias"), &[out_channels], bound, rng)?;
        Ok(Self { weight, bias, stride, padding: kernel / 2 })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        // candle's built-in conv padding miscomputes some small strided
        // inputs, so pad explicitly
        let x = x.pad_with_zeros(2, self.padding, self.padding)?.pad_with_zeros(3, self.padding, self.padding)?;
        let out = x.conv2d(&self.weight, 0, self.stride, 1, 1)?;
        let c = self.bias.dim(0)?;
        Ok(out.broadcast_add(&self.bias.reshape((1, c, 1, 1))?)?)
    }

    pub fn spec(&self) -> LayerSpec {
        let (out_channels, in_channels, kernel, _) = self.weight.dims4().expect("4d weight");
        LayerSpec::Conv { in_channels, out_channels, kernel, stride: self.stride }
    }
}

/// Transposed conv with `output_padding = stride - 1`, so a stride-2 layer
/// exactly doubles the spatial size.
#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    weight: Var,
    bias: Var,
    stride: usize,
    padding: usize,
}

impl ConvTranspose2d {
    pub fn new(
        params: &mut ParamStore,
        prefix: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        // PyTorch computes fan-in from weight dim 1, i.e. out_channels here.
        let bound = 1.0 / ((out_channels * kernel * kernel) as f64).sqrt();
        let weight =
            params.uniform(&format!("{prefix}.weight"), &[in_channels, out_channels, kernel, kernel], bound, rng)?;
        let bias = params.uniform(&format!("{prefix}.bias"), &[out_channels], bound, rng)?;
        Ok(Self { weight, bias, stride, padding: kernel / 2 })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let out = x.conv_transpose2d(&self.weight, self.padding, self.stride - 1, self.stride, 1)?;
        let c = self.bias.dim(0)?;
        Ok(out.broadcast_add(&self.bias.reshape((1, c, 1, 1))?)?)
    }

    pub fn spec(&self) -> LayerSpec {
        let (in_channels, out_channels, kernel, _) = self.weight.dims4().expect("4d weight");
        LayerSpec::ConvTranspose { in_channels, out_channels, kernel, stride: self.stride }
    }
}

#[derive(Debug, Clone)]
pub enum Layer {
    Conv(Conv2d),
    ConvTranspose(ConvTranspose2d),
    Gdn(Gdn),
    Relu,
}

impl Layer {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Layer::Conv(c) => c.forward(x),
            Layer::ConvTranspose(c) => c.forward(x),
            Layer::Gdn(g) => g.forward(x),
            Layer::Relu => Ok(x.relu()?),
        }
    }

    pub fn spec(&self) -> LayerSpec {
        match self {
            Layer::Conv(c) => c.spec(),
            Layer::ConvTranspose(c) => c.spec(),
            Layer::Gdn(g) => g.spec(),
            Layer::Relu => LayerSpec::Relu,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Sequential {
    layers: Vec<Layer>,
}

impl Sequential {
    pub fn push(&mut self, layer: Layer) {
        self.layers.push(layer);
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut x = x.clone();
        for layer in &self.layers {
            x = layer.forward(&x)?;
        }
        Ok(x)
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(Layer::spec).collect()
    }
}

fn mirror_index(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let m = i.rem_euclid(period);
    if m < len as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// Reflection-pads the last two dims at the bottom/right up to `(height, width)`.
///
/// Pads wider than the image keep mirroring back and forth.
pub fn reflect_pad(x: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if height < h || width < w {
        return Err(Error::Shape(format!("cannot pad {h}x{w} down to {height}x{width}")));
    }
    let mut out = x.clone();
    if height > h {
        let idx: Vec<u32> = (0..height).map(|i| mirror_index(i as isize, h) as u32).collect();
        let idx = Tensor::new(idx.as_slice(), x.device())?;
        out = out.index_select(&idx, D::Minus2)?;
    }
    if width > w {
        let idx: Vec<u32> = (0..width).map(|i| mirror_index(i as isize, w) as u32).collect();
        let idx = Tensor::new(idx.as_slice(), x.device())?;
        out = out.index_select(&idx, D::Minus1)?;
    }
    Ok(out)
}

pub fn crop(x: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if h == height && w == width {
        return Ok(x.clone());
    }
    Ok(x.narrow(2, 0, height)?.narrow(3, 0, width)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn mirror_index_reflects_without_edge_repeat() {
        let got: Vec<usize> = (0..9).map(|i| mirror_index(i, 4)).collect();
        assert_eq!(got, vec![0, 1, 2, 3, 2, 1, 0, 1, 2]);
        assert_eq!(mirror_index(5, 1), 0);
    }

    #[test]
    fn pad_then_crop_is_identity() {
        let x = Tensor::arange(0f32, 30., &Device::Cpu).unwrap().reshape((1, 2, 3, 5)).unwrap();
        let p = reflect_pad(&x, 8, 9).unwrap();
        assert_eq!(p.dims(), &[1, 2, 8, 9]);
        let back = crop(&p, 3, 5).unwrap();
        let a: Vec<f32> = x.flatten_all().unwrap().to_vec1().unwrap();
        let b: Vec<f32> = back.flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(a, b);
        // the padded row 3 mirrors row 1
        let row3: Vec<f32> =
            p.get(0).unwrap().get(0).unwrap().get(3).unwrap().narrow(0, 0, 5).unwrap().to_vec1().unwrap();
        let row1: Vec<f32> = x.get(0).unwrap().get(0).unwrap().get(1).unwrap().to_vec1().unwrap();
        assert_eq!(row3, row1);
    }

    #[test]
    fn stride_two_layers_halve_and_double() {
        let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut ps = ParamStore::new(DType::F32, Device::Cpu);
        let conv = Conv2d::new(&mut ps, "c", 3, 4, 5, 2, &mut rng).unwrap();
        let deconv = ConvTranspose2d::new(&mut ps, "d", 4, 3, 5, 2, &mut rng).unwrap();
        let x = Tensor::zeros((2, 3, 16, 12), DType::F32, &Device::Cpu).unwrap();
        let y = conv.forward(&x).unwrap();
        assert_eq!(y.dims(), &[2, 4, 8, 6]);
        assert_eq!(deconv.forward(&y).unwrap().dims(), &[2, 3, 16, 12]);
        assert_eq!(ps.num_elements(), 3 * 4 * 25 + 4 + 4 * 3 * 25 + 3);
    }
}
