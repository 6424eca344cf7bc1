use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use std::rc::Rc;

use super::{Scalar, Tape, Tensor, Var, ZERO_INDEX};
use crate::error::{Error, Result};

/// Seeded generator used for every parameter initialization.
pub fn init_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A named trainable tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
}

impl<T: Scalar> Param<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        Self {
            name: name.into(),
            value,
        }
    }

    pub fn zeros(name: impl Into<String>, shape: &[usize]) -> Self {
        Self::new(name, Tensor::zeros(shape))
    }

    /// Glorot-uniform sample drawn in f64 so both precisions see the same values.
    pub fn glorot(
        name: impl Into<String>,
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data: Vec<f64> = (0..fan_in * fan_out)
            .map(|_| rng.gen_range(-limit..limit))
            .collect();
        Self::new(name, Tensor::from_f64(&[fan_in, fan_out], &data))
    }

    pub fn uniform(
        name: impl Into<String>,
        shape: &[usize],
        limit: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let len = shape.iter().product();
        let data: Vec<f64> = (0..len).map(|_| rng.gen_range(-limit..limit)).collect();
        Self::new(name, Tensor::from_f64(shape, &data))
    }
}

/// Anything that owns named parameters.
pub trait Parameterized<T: Scalar> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |p| n += p.value.len());
        n
    }

    /// Sets every parameter to zero.
    fn zero_params(&mut self) {
        self.visit_mut(&mut |p| p.value.data_mut().iter_mut().for_each(|v| *v = T::zero()));
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    #[default]
    Gelu,
}

impl Activation {
    pub fn apply<T: Scalar>(self, tape: &Tape<T>, x: Var) -> Var {
        match self {
            Activation::Identity => x,
            Activation::Relu => tape.relu(x),
            Activation::Gelu => tape.gelu(x),
        }
    }
}

/// `y = x · weight + bias` with `weight: [in, out]`.
#[derive(Clone, Debug)]
pub struct AffineLayer<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Scalar> AffineLayer<T> {
    pub fn new(name: &str, in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            weight: Param::glorot(format!("{name}.weight"), in_dim, out_dim, rng),
            bias: Param::zeros(format!("{name}.bias"), &[out_dim]),
        }
    }

    pub fn from_tensors(name: &str, weight: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        let ws = weight.shape();
        if ws.len() != 2 || bias.shape() != [ws[1]] {
            return Err(Error::Shape(format!(
                "affine `{name}`: weight {:?} incompatible with bias {:?}",
                ws,
                bias.shape()
            )));
        }
        Ok(Self {
            weight: Param::new(format!("{name}.weight"), weight),
            bias: Param::new(format!("{name}.bias"), bias),
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn forward(&self, tape: &Tape<T>, x: Var) -> Var {
        let w = tape.param(&self.weight);
        let b = tape.param(&self.bias);
        let y = tape.matmul(x, w);
        tape.add_bias(y, b)
    }
}

impl<T: Scalar> Parameterized<T> for AffineLayer<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.weight);
        f(&self.bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

/// Affine layers with an activation between consecutive layers (not after the last).
#[derive(Clone, Debug)]
pub struct Mlp<T> {
    pub layers: Vec<AffineLayer<T>>,
    pub activation: Activation,
}

impl<T: Scalar> Mlp<T> {
    /// `dims = [in, hidden.., out]`.
    pub fn new(name: &str, dims: &[usize], activation: Activation, rng: &mut impl Rng) -> Self {
        assert!(dims.len() >= 2, "mlp needs at least input and output dims");
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| AffineLayer::new(&format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Self { layers, activation }
    }

    pub fn from_layers(layers: Vec<AffineLayer<T>>, activation: Activation) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument(
                "mlp needs at least one layer".into(),
            ));
        }
        for pair in layers.windows(2) {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::Shape(format!(
                    "mlp: layer `{}` emits {} but `{}` expects {}",
                    pair[0].weight.name,
                    pair[0].out_dim(),
                    pair[1].weight.name,
                    pair[1].in_dim()
                )));
            }
        }
        Ok(Self { layers, activation })
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map(|l| l.out_dim()).unwrap_or(0)
    }

    pub fn forward(&self, tape: &Tape<T>, x: Var) -> Var {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            if i > 0 {
                h = self.activation.apply(tape, h);
            }
            h = layer.forward(tape, h);
        }
        h
    }

    /// Checked forward: the input's last extent must match the first layer.
    pub fn try_forward(&self, tape: &Tape<T>, x: Var) -> Result<Var> {
        let c = *tape.shape(x).last().unwrap_or(&0);
        let want = self.layers[0].in_dim();
        if c != want {
            return Err(Error::Shape(format!(
                "mlp expects last dim {want}, got {c}"
            )));
        }
        Ok(self.forward(tape, x))
    }
}

impl<T: Scalar> Parameterized<T> for Mlp<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.layers.iter().for_each(|l| l.visit(f));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.layers.iter_mut().for_each(|l| l.visit_mut(f));
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct LayerNorm<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
}

impl<T: Scalar> LayerNorm<T> {
    pub fn new(name: &str, dim: usize) -> Self {
        Self {
            gamma: Param::new(format!("{name}.gamma"), Tensor::full(&[dim], T::one())),
            beta: Param::zeros(format!("{name}.beta"), &[dim]),
        }
    }

    pub fn forward(&self, tape: &Tape<T>, x: Var) -> Var {
        let g = tape.param(&self.gamma);
        let b = tape.param(&self.beta);
        tape.layer_norm(x, g, b, T::from_f64_lossy(LAYER_NORM_EPS))
    }

    pub fn try_forward(&self, tape: &Tape<T>, x: Var) -> Result<Var> {
        let c = *tape.shape(x).last().unwrap_or(&0);
        if c == 0 {
            return Err(Error::Shape("layer_norm over an empty last axis".into()));
        }
        if c != self.gamma.value.len() {
            return Err(Error::Shape(format!(
                "layer_norm expects {} channels, got {c}",
                self.gamma.value.len()
            )));
        }
        Ok(self.forward(tape, x))
    }
}

impl<T: Scalar> Parameterized<T> for LayerNorm<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.gamma);
        f(&self.beta);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }
}

/// 2-D convolution over `[H, W, C_in]` maps, realized as im2col + matmul.
#[derive(Clone, Debug)]
pub struct Conv2d<T> {
    /// `[k·k·C_in, C_out]`, rows ordered (ky, kx, c_in).
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            weight: Param::glorot(
                format!("{name}.weight"),
                kernel * kernel * in_ch,
                out_ch,
                rng,
            ),
            bias: Param::zeros(format!("{name}.bias"), &[out_ch]),
            kernel,
            stride,
            padding,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.value.shape()[0] / (self.kernel * self.kernel)
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn output_extent(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let span = |d: usize| -> Option<usize> {
            let padded = d + 2 * self.padding;
            (padded >= self.kernel).then(|| (padded - self.kernel) / self.stride + 1)
        };
        match (span(h), span(w)) {
            (Some(ho), Some(wo)) if ho >= 1 && wo >= 1 => Ok((ho, wo)),
            _ => Err(Error::Shape(format!(
                "conv {k}x{k}/{s} leaves no output for a {h}x{w} input",
                k = self.kernel,
                s = self.stride
            ))),
        }
    }

    pub fn forward(&self, tape: &Tape<T>, x: Var) -> Result<Var> {
        let shape = tape.shape(x);
        if shape.len() != 3 || shape[2] != self.in_channels() {
            return Err(Error::Shape(format!(
                "conv expects [H, W, {}], got {shape:?}",
                self.in_channels()
            )));
        }
        let (h, w, c) = (shape[0], shape[1], shape[2]);
        let (ho, wo) = self.output_extent(h, w)?;
        let k = self.kernel;
        let mut index = Vec::with_capacity(ho * wo * k * k * c);
        for oy in 0..ho {
            for ox in 0..wo {
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                        let inside = iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w;
                        for ci in 0..c {
                            index.push(if inside {
                                (iy as usize * w + ix as usize) * c + ci
                            } else {
                                ZERO_INDEX
                            });
                        }
                    }
                }
            }
        }
        let cols = tape.gather(x, Rc::new(index), &[ho * wo, k * k * c]);
        let wv = tape.param(&self.weight);
        let bv = tape.param(&self.bias);
        let y = tape.matmul(cols, wv);
        let y = tape.add_bias(y, bv);
        Ok(tape.reshape(y, &[ho, wo, self.out_channels()]))
    }
}

impl<T: Scalar> Parameterized<T> for Conv2d<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.weight);
        f(&self.bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradient_check;

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = init_rng(seed);
        let n = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::from_f64(shape, &data)
    }

    #[test]
    fn layer_norm_constant_row_gives_shift() {
        let tape = Tape::<f64>::new();
        let mut ln = LayerNorm::<f64>::new("ln", 4);
        ln.beta.value = Tensor::from_f64(&[4], &[0.1, 0.2, 0.3, 0.4]);
        let x = tape.constant(Tensor::full(&[1, 4], 7.0));
        let y = ln.forward(&tape, x);
        assert_eq!(tape.value(y).data(), &[0.1, 0.2, 0.3, 0.4]);
    }

    #[test]
    fn layer_norm_standardized_pair() {
        let tape = Tape::<f64>::new();
        let ln = LayerNorm::<f64>::new("ln", 2);
        let x = tape.constant(Tensor::from_f64(&[1, 2], &[1.0, -1.0]));
        let y = tape.value(ln.forward(&tape, x));
        // var = 1, so output = x / sqrt(1 + eps)
        let want = 1.0 / (1.0 + LAYER_NORM_EPS).sqrt();
        assert!((y.data()[0] - want).abs() < 1e-12);
        assert!((y.data()[1] + want).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_row_statistics() {
        let tape = Tape::<f64>::new();
        let ln = LayerNorm::<f64>::new("ln", 8);
        let x = tape.constant(random(&[4, 8], 3));
        let y = tape.value(ln.forward(&tape, x));
        for r in 0..4 {
            let row = y.row(r);
            let mean = row.iter().sum::<f64>() / 8.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-5, "mean {mean}");
            assert!((var - 1.0).abs() < 1e-4, "var {var}");
        }
    }

    #[test]
    fn layer_norm_rejects_empty_axis() {
        let tape = Tape::<f64>::new();
        let ln = LayerNorm::<f64>::new("ln", 0);
        let x = tape.constant(Tensor::zeros(&[3, 0]));
        assert!(ln.try_forward(&tape, x).is_err());
    }

    #[test]
    fn mlp_identity_and_constant() {
        let eye = Tensor::from_f64(&[3, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let layer = AffineLayer::from_tensors("a", eye.clone(), Tensor::zeros(&[3])).unwrap();
        let layer2 = AffineLayer::from_tensors("b", eye, Tensor::zeros(&[3])).unwrap();
        let mlp = Mlp::from_layers(vec![layer, layer2], Activation::Identity).unwrap();
        let tape = Tape::<f64>::new();
        let x = random(&[2, 3], 9);
        let xv = tape.constant(x.clone());
        assert_eq!(*tape.value(mlp.forward(&tape, xv)), x);

        let bias = Tensor::from_f64(&[2], &[0.5, -1.5]);
        let zero = AffineLayer::from_tensors("z", Tensor::zeros(&[3, 2]), bias).unwrap();
        let mlp = Mlp::from_layers(vec![zero], Activation::Gelu).unwrap();
        let y = tape.value(mlp.forward(&tape, xv));
        for r in 0..2 {
            assert_eq!(y.row(r), &[0.5, -1.5]);
        }
    }

    #[test]
    fn mlp_dimension_mismatch() {
        let mut rng = init_rng(0);
        let a = AffineLayer::<f64>::new("a", 3, 4, &mut rng);
        let b = AffineLayer::<f64>::new("b", 5, 2, &mut rng);
        assert!(Mlp::from_layers(vec![a, b], Activation::Gelu).is_err());
        let mlp = Mlp::<f64>::new("m", &[3, 4], Activation::Gelu, &mut rng);
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 5]));
        assert!(mlp.try_forward(&tape, x).is_err());
    }

    #[test]
    fn mlp_gradient_matches_finite_differences() {
        let mut rng = init_rng(11);
        let mlp = Mlp::<f64>::new("m", &[8, 16, 8], Activation::Gelu, &mut rng);
        let report = gradient_check(
            |tape, x| {
                let y = mlp.forward(tape, x);
                let y2 = tape.mul(y, y);
                tape.sum(y2)
            },
            &random(&[3, 8], 5),
            1e-5,
            1e-3,
        )
        .unwrap();
        assert!(report.passed, "max rel err {}", report.max_rel_error);
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = init_rng(4);
        let conv = Conv2d::<f64>::new("c", 2, 3, 3, 2, 1, &mut rng);
        let x = random(&[5, 4, 2], 8);
        let tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = tape.value(conv.forward(&tape, xv).unwrap());
        assert_eq!(y.shape(), &[3, 2, 3]);
        for oy in 0..3 {
            for ox in 0..2 {
                for co in 0..3 {
                    let mut want = 0.0;
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let (iy, ix) = (
                                oy as isize * 2 + ky as isize - 1,
                                ox as isize * 2 + kx as isize - 1,
                            );
                            if iy < 0 || ix < 0 || iy >= 5 || ix >= 4 {
                                continue;
                            }
                            for ci in 0..2 {
                                let wrow = (ky * 3 + kx) * 2 + ci;
                                want += x.at(&[iy as usize, ix as usize, ci])
                                    * conv.weight.value.at(&[wrow, co]);
                            }
                        }
                    }
                    assert!((y.at(&[oy, ox, co]) - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn conv_gradient_and_extent_errors() {
        let mut rng = init_rng(5);
        let conv = Conv2d::<f64>::new("c", 2, 2, 3, 2, 1, &mut rng);
        let r = gradient_check(
            |t, x| {
                let y = conv.forward(t, x).unwrap();
                let y2 = t.mul(y, y);
                t.sum(y2)
            },
            &random(&[4, 4, 2], 1),
            1e-5,
            1e-3,
        )
        .unwrap();
        assert!(r.passed, "{}", r.max_rel_error);
        let big = Conv2d::<f64>::new("b", 1, 1, 5, 1, 0, &mut rng);
        assert!(big.output_extent(3, 3).is_err());
        assert_eq!(conv.output_extent(1, 1).unwrap(), (1, 1));
    }
}
