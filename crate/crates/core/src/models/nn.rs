use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{conv_out_dim, conv_transpose_out_dim, Tape, Tensor, Var};

/// One stage of a [`Sequential`] network. Shapes are per sample; every
/// forward pass runs on a batch with a leading sample axis.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Layer {
    Linear {
        fan_in: usize,
        fan_out: usize,
    },
    /// Cross-correlation with `[c_out, c_in, kh, kw]` kernels.
    Conv2d {
        c_in: usize,
        c_out: usize,
        kernel: (usize, usize),
        stride: usize,
        padding: usize,
    },
    /// Transposed convolution with `[c_in, c_out, kh, kw]` kernels.
    ConvTranspose2d {
        c_in: usize,
        c_out: usize,
        kernel: (usize, usize),
        stride: usize,
    },
    Relu,
    Sigmoid,
    Flatten,
    Reshape(Vec<usize>),
}

impl Layer {
    fn is_activation(&self) -> bool {
        matches!(self, Layer::Relu | Layer::Sigmoid)
    }

    /// Parameter shapes in declaration order (weight, then bias).
    pub(crate) fn param_shapes(&self) -> Vec<Vec<usize>> {
        match *self {
            Layer::Linear { fan_in, fan_out } => vec![vec![fan_in, fan_out], vec![fan_out]],
            Layer::Conv2d {
                c_in,
                c_out,
                kernel: (kh, kw),
                ..
            } => vec![vec![c_out, c_in, kh, kw], vec![c_out]],
            Layer::ConvTranspose2d {
                c_in,
                c_out,
                kernel: (kh, kw),
                ..
            } => vec![vec![c_in, c_out, kh, kw], vec![c_out]],
            _ => Vec::new(),
        }
    }

    /// Per-sample output shape, or a geometry error.
    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let mismatch = |expected: Vec<usize>| Err(Error::shape("layer", input, &expected));
        match self {
            Layer::Linear { fan_in, fan_out } => match input {
                [n] if n == fan_in => Ok(vec![*fan_out]),
                _ => mismatch(vec![*fan_in]),
            },
            Layer::Conv2d {
                c_in,
                c_out,
                kernel: (kh, kw),
                stride,
                padding,
            } => match *input {
                [c, h, w] if c == *c_in => Ok(vec![
                    *c_out,
                    conv_out_dim(h, *kh, *stride, *padding)?,
                    conv_out_dim(w, *kw, *stride, *padding)?,
                ]),
                _ => mismatch(vec![*c_in, 0, 0]),
            },
            Layer::ConvTranspose2d {
                c_in,
                c_out,
                kernel: (kh, kw),
                stride,
            } => match *input {
                [c, h, w] if c == *c_in => Ok(vec![
                    *c_out,
                    conv_transpose_out_dim(h, *kh, *stride)?,
                    conv_transpose_out_dim(w, *kw, *stride)?,
                ]),
                _ => mismatch(vec![*c_in, 0, 0]),
            },
            Layer::Relu | Layer::Sigmoid => Ok(input.to_vec()),
            Layer::Flatten => Ok(vec![input.iter().product()]),
            Layer::Reshape(target) => {
                if target.iter().product::<usize>() == input.iter().product::<usize>() {
                    Ok(target.clone())
                } else {
                    mismatch(target.clone())
                }
            }
        }
    }

    /// Number of input terms that reach one (interior) output element.
    fn fan_in(&self, input: &[usize]) -> usize {
        match *self {
            Layer::Linear { fan_in, .. } => fan_in,
            Layer::Conv2d {
                c_in, kernel: (kh, kw), ..
            } => c_in * kh * kw,
            Layer::ConvTranspose2d {
                c_in,
                kernel: (kh, kw),
                stride,
                ..
            } => {
                let reach = |k: usize, extent: usize| k.div_ceil(stride).min(extent);
                c_in * reach(kh, input[1]) * reach(kw, input[2])
            }
            _ => 0,
        }
    }
}

/// A feed-forward stack of layers and its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequential {
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
    params: Vec<Tensor>,
}

impl Sequential {
    /// Validates the layer chain against `input_shape` and initialises
    /// weights uniformly in `±sqrt(6/fan_in)` with zero biases.
    pub fn new(input_shape: &[usize], layers: Vec<Layer>, rng: &mut Rng) -> Result<Self> {
        let mut shape = input_shape.to_vec();
        let mut params = Vec::new();
        for layer in &layers {
            let shapes = layer.param_shapes();
            if let [w_shape, b_shape] = shapes.as_slice() {
                let bound = (6.0 / layer.fan_in(&shape) as f64).sqrt();
                let numel: usize = w_shape.iter().product();
                let w = (0..numel).map(|_| rng.random_range(-bound..bound)).collect();
                params.push(Tensor::new(w_shape, w)?);
                params.push(Tensor::zeros(b_shape));
            }
            shape = layer.output_shape(&shape)?;
        }
        Ok(Sequential {
            input_shape: input_shape.to_vec(),
            layers,
            params,
        })
    }

    /// Rebuilds a network around existing parameters (e.g. from a checkpoint).
    pub fn with_params(input_shape: &[usize], layers: Vec<Layer>, params: Vec<Tensor>) -> Result<Self> {
        let expected: Vec<Vec<usize>> = layers.iter().flat_map(Layer::param_shapes).collect();
        if expected.len() != params.len() {
            return Err(Error::ArchitectureMismatch(format!(
                "expected {} parameter tensors, got {}",
                expected.len(),
                params.len()
            )));
        }
        for (e, p) in expected.iter().zip(&params) {
            if e.as_slice() != p.shape() {
                return Err(Error::ArchitectureMismatch(format!(
                    "parameter shape {:?} where {e:?} expected",
                    p.shape()
                )));
            }
        }
        let mut shape = input_shape.to_vec();
        for layer in &layers {
            shape = layer.output_shape(&shape)?;
        }
        Ok(Sequential {
            input_shape: input_shape.to_vec(),
            layers,
            params,
        })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> Vec<usize> {
        self.shape_chain().pop().unwrap_or_else(|| self.input_shape.clone())
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    /// Per-sample output shape after every non-activation layer.
    pub fn shape_chain(&self) -> Vec<Vec<usize>> {
        let mut shape = self.input_shape.clone();
        let mut chain = Vec::new();
        for layer in &self.layers {
            shape = layer.output_shape(&shape).expect("validated at construction");
            if !layer.is_activation() {
                chain.push(shape.clone());
            }
        }
        chain
    }

    /// Records the parameters on `tape` as trainable leaves.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.iter().map(|p| tape.param(p)).collect()
    }

    /// Records the parameters as constants (inference only).
    pub fn bind_frozen(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.iter().map(|p| tape.constant(p.clone())).collect()
    }

    /// Runs a batch `[n, ...input_shape]` through the network.
    pub fn forward(&self, tape: &mut Tape, params: &[Var], x: Var) -> Result<Var> {
        self.forward_traced(tape, params, x, |_, _| {})
    }

    /// Like [`Sequential::forward`], calling `visit(layer, output)` after
    /// every layer.
    pub fn forward_traced(
        &self,
        tape: &mut Tape,
        params: &[Var],
        x: Var,
        mut visit: impl FnMut(&Layer, Var),
    ) -> Result<Var> {
        let sample = &tape.shape(x)[1..];
        if tape.shape(x).is_empty() || sample != self.input_shape.as_slice() {
            return Err(Error::shape("forward", tape.shape(x), &self.input_shape));
        }
        if params.len() != self.params.len() {
            return Err(Error::ArchitectureMismatch(format!(
                "{} bound parameters for a network with {}",
                params.len(),
                self.params.len()
            )));
        }
        let batch = tape.shape(x)[0];
        let mut p = params.iter().copied();
        let mut h = x;
        for layer in &self.layers {
            h = match layer {
                Layer::Linear { .. } => {
                    let (w, b) = (p.next().unwrap(), p.next().unwrap());
                    tape.linear(h, w, b)?
                }
                Layer::Conv2d { stride, padding, .. } => {
                    let (w, b) = (p.next().unwrap(), p.next().unwrap());
                    tape.conv2d(h, w, b, *stride, *padding)?
                }
                Layer::ConvTranspose2d { stride, .. } => {
                    let (w, b) = (p.next().unwrap(), p.next().unwrap());
                    tape.conv2d_transpose(h, w, b, *stride)?
                }
                Layer::Relu => tape.relu(h),
                Layer::Sigmoid => tape.sigmoid(h),
                Layer::Flatten => {
                    let n: usize = tape.shape(h)[1..].iter().product();
                    tape.reshape(h, &[batch, n])?
                }
                Layer::Reshape(target) => {
                    let mut shape = vec![batch];
                    shape.extend_from_slice(target);
                    tape.reshape(h, &shape)?
                }
            };
            visit(layer, h);
        }
        Ok(h)
    }

    /// Convenience inference on a batch tensor, no gradients recorded.
    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.bind_frozen(&mut tape);
        let xv = tape.constant(x.clone());
        let y = self.forward(&mut tape, &vars, xv)?;
        Ok(tape.value(y).clone())
    }
}
