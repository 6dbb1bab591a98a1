use serde::{Deserialize, Serialize};

use super::nn::{Layer, Sequential};
use super::noise::NoiseSampler;
use crate::dataset::FeatureShape;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HallucinatorVariant {
    /// Operates on `d×h×w` feature tensors (TFH).
    Tensor,
    /// Operates on globally pooled `d`-vectors (VFH).
    Vector,
}

impl HallucinatorVariant {
    pub fn tag(self) -> u32 {
        match self {
            HallucinatorVariant::Tensor => 0,
            HallucinatorVariant::Vector => 1,
        }
    }

    pub fn from_tag(tag: u32) -> Option<Self> {
        match tag {
            0 => Some(HallucinatorVariant::Tensor),
            1 => Some(HallucinatorVariant::Vector),
            _ => None,
        }
    }
}

impl std::str::FromStr for HallucinatorVariant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "tensor" | "tfh" => Ok(HallucinatorVariant::Tensor),
            "vector" | "vfh" => Ok(HallucinatorVariant::Vector),
            other => Err(format!("unknown hallucinator variant {other:?}")),
        }
    }
}

/// Noise dimension `k`, conditioning dimension `d′`, hidden width of the
/// generator (and of the vector conditioner) and the feature shape the
/// hallucinator reproduces. Together with the variant these fix the whole
/// architecture.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HallucinatorDims {
    pub noise_dim: usize,
    pub cond_dim: usize,
    pub width: usize,
    pub feature: FeatureShape,
}

impl HallucinatorDims {
    /// Full-size setting: `k = d′ = 1024` and 512 hidden channels for
    /// `512×7×7` features.
    pub fn reference() -> Self {
        HallucinatorDims {
            noise_dim: 1024,
            cond_dim: 1024,
            width: 512,
            feature: FeatureShape::new(512, 7, 7),
        }
    }

    /// Desk-scale default: `k = d′ = 2d` as in the full-size setting, and a
    /// hidden width of `2d`. With only `d` channels a small generator's last
    /// layer cannot reach arbitrary class means.
    pub fn proportional(feature: FeatureShape) -> Self {
        HallucinatorDims {
            noise_dim: 2 * feature.d,
            cond_dim: 2 * feature.d,
            width: 2 * feature.d,
            feature,
        }
    }
}

/// Kernel extents of the three stride-1 transposed convolutions that grow a
/// `1×1` seed to `extent`; the growth `extent − 1` is spread evenly, earlier
/// layers taking the remainder. For `extent = 7` every kernel is 3.
pub fn generator_kernels(extent: usize) -> [usize; 3] {
    let growth = extent.saturating_sub(1);
    let (base, rem) = (growth / 3, growth % 3);
    std::array::from_fn(|i| 1 + base + usize::from(i < rem))
}

/// Conditioner `h` and generator `g`.
#[derive(Clone, Debug, PartialEq)]
pub struct HallucinatorModel {
    variant: HallucinatorVariant,
    dims: HallucinatorDims,
    conditioner: Sequential,
    generator: Sequential,
}

fn layer_plan(variant: HallucinatorVariant, dims: &HallucinatorDims) -> Result<[(Vec<usize>, Vec<Layer>); 2]> {
    let HallucinatorDims {
        noise_dim: k,
        cond_dim,
        width,
        feature,
    } = *dims;
    let FeatureShape { d, h, w } = feature;
    if k == 0 || cond_dim == 0 || width == 0 || d == 0 || h == 0 || w == 0 {
        return Err(Error::InvalidConfig(format!("hallucinator dims must be positive: {dims:?}")));
    }
    Ok(match variant {
        HallucinatorVariant::Tensor => {
            if h < 3 || w < 3 {
                return Err(Error::geometry(
                    "build_tensor_conditioner",
                    format!("feature spatial size {h}×{w} is smaller than the 3×3 unpadded convolution"),
                ));
            }
            let c1 = d;
            let c2 = (d / 2).max(1);
            let conditioner = vec![
                Layer::Conv2d {
                    c_in: d,
                    c_out: c1,
                    kernel: (3, 3),
                    stride: 1,
                    padding: 1,
                },
                Layer::Relu,
                Layer::Conv2d {
                    c_in: c1,
                    c_out: c2,
                    kernel: (3, 3),
                    stride: 1,
                    padding: 0,
                },
                Layer::Flatten,
                Layer::Linear {
                    fan_in: c2 * (h - 2) * (w - 2),
                    fan_out: cond_dim,
                },
            ];
            let kh = generator_kernels(h);
            let kw = generator_kernels(w);
            let seed = k + cond_dim;
            let generator = vec![
                Layer::Reshape(vec![seed, 1, 1]),
                Layer::ConvTranspose2d {
                    c_in: seed,
                    c_out: width,
                    kernel: (kh[0], kw[0]),
                    stride: 1,
                },
                Layer::Relu,
                Layer::ConvTranspose2d {
                    c_in: width,
                    c_out: width,
                    kernel: (kh[1], kw[1]),
                    stride: 1,
                },
                Layer::Relu,
                Layer::ConvTranspose2d {
                    c_in: width,
                    c_out: d,
                    kernel: (kh[2], kw[2]),
                    stride: 1,
                },
                Layer::Sigmoid,
            ];
            [(vec![d, h, w], conditioner), (vec![seed], generator)]
        }
        HallucinatorVariant::Vector => {
            let hidden = width;
            let conditioner = vec![
                Layer::Linear {
                    fan_in: d,
                    fan_out: hidden,
                },
                Layer::Relu,
                Layer::Linear {
                    fan_in: hidden,
                    fan_out: cond_dim,
                },
            ];
            let generator = vec![
                Layer::Linear {
                    fan_in: k + cond_dim,
                    fan_out: hidden,
                },
                Layer::Relu,
                Layer::Linear {
                    fan_in: hidden,
                    fan_out: d,
                },
                Layer::Sigmoid,
            ];
            [(vec![d], conditioner), (vec![k + cond_dim], generator)]
        }
    })
}

impl HallucinatorModel {
    pub fn new(variant: HallucinatorVariant, dims: HallucinatorDims, rng: &mut Rng) -> Result<Self> {
        let [(c_in, c_layers), (g_in, g_layers)] = layer_plan(variant, &dims)?;
        Ok(HallucinatorModel {
            variant,
            dims,
            conditioner: Sequential::new(&c_in, c_layers, rng)?,
            generator: Sequential::new(&g_in, g_layers, rng)?,
        })
    }

    /// Tensor conditioner (conv 3×3 pad 1 → ReLU → conv 3×3 → flatten → FC)
    /// and generator (reshape to `(k+d′)×1×1` → three transposed convs with
    /// ReLU between and a sigmoid at the end).
    pub fn tensor(dims: HallucinatorDims, rng: &mut Rng) -> Result<Self> {
        Self::new(HallucinatorVariant::Tensor, dims, rng)
    }

    /// Two-layer fully-connected conditioner and generator on pooled features;
    /// every hidden width equals `d′`.
    pub fn vector(dims: HallucinatorDims, rng: &mut Rng) -> Result<Self> {
        Self::new(HallucinatorVariant::Vector, dims, rng)
    }

    /// Reassembles a model from parameters in declaration order
    /// (conditioner first, then generator).
    pub fn from_params(variant: HallucinatorVariant, dims: HallucinatorDims, params: Vec<Tensor>) -> Result<Self> {
        let [(c_in, c_layers), (g_in, g_layers)] = layer_plan(variant, &dims)?;
        let split = c_layers
            .iter()
            .filter(|l| matches!(l, Layer::Linear { .. } | Layer::Conv2d { .. } | Layer::ConvTranspose2d { .. }))
            .count()
            * 2;
        if params.len() < split {
            return Err(Error::ArchitectureMismatch(format!(
                "{} parameter tensors, conditioner alone needs {split}",
                params.len()
            )));
        }
        let mut params = params;
        let generator_params = params.split_off(split);
        Ok(HallucinatorModel {
            variant,
            dims,
            conditioner: Sequential::with_params(&c_in, c_layers, params)?,
            generator: Sequential::with_params(&g_in, g_layers, generator_params)?,
        })
    }

    /// Parameter shapes in declaration order, without allocating a model.
    pub fn param_shapes(variant: HallucinatorVariant, dims: &HallucinatorDims) -> Result<Vec<Vec<usize>>> {
        let [(_, c_layers), (_, g_layers)] = layer_plan(variant, dims)?;
        Ok(c_layers.iter().chain(&g_layers).flat_map(Layer::param_shapes).collect())
    }

    pub fn variant(&self) -> HallucinatorVariant {
        self.variant
    }

    pub fn dims(&self) -> HallucinatorDims {
        self.dims
    }

    pub fn conditioner(&self) -> &Sequential {
        &self.conditioner
    }

    pub fn generator(&self) -> &Sequential {
        &self.generator
    }

    /// Per-sample shape of a prototype / generated feature.
    pub fn feature_shape(&self) -> Vec<usize> {
        match self.variant {
            HallucinatorVariant::Tensor => self.dims.feature.to_vec(),
            HallucinatorVariant::Vector => vec![self.dims.feature.d],
        }
    }

    pub fn params(&self) -> impl Iterator<Item = &Tensor> {
        self.conditioner.params().iter().chain(self.generator.params())
    }

    pub fn param_count(&self) -> usize {
        self.conditioner.param_count() + self.generator.param_count()
    }

    pub fn params_cloned(&self) -> Vec<Tensor> {
        self.params().cloned().collect()
    }

    /// Overwrites all parameters (declaration order) with `params`.
    pub fn set_params(&mut self, params: Vec<Tensor>) -> Result<()> {
        let rebuilt = Self::from_params(self.variant, self.dims, params)?;
        *self = rebuilt;
        Ok(())
    }

    /// Binds all parameters on `tape`, trainable or frozen.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundHallucinator<'_> {
        let (cond, generator) = if trainable {
            (self.conditioner.bind(tape), self.generator.bind(tape))
        } else {
            (self.conditioner.bind_frozen(tape), self.generator.bind_frozen(tape))
        };
        BoundHallucinator {
            model: self,
            cond,
            generator,
        }
    }

    /// Uses caller-provided handles (declaration order) as the parameters,
    /// e.g. perturbed copies in a finite-difference check.
    pub fn bind_vars(&self, vars: &[Var]) -> Result<BoundHallucinator<'_>> {
        let split = self.conditioner.params().len();
        if vars.len() != split + self.generator.params().len() {
            return Err(Error::ArchitectureMismatch(format!(
                "{} parameter handles for a model with {}",
                vars.len(),
                split + self.generator.params().len()
            )));
        }
        Ok(BoundHallucinator {
            model: self,
            cond: vars[..split].to_vec(),
            generator: vars[split..].to_vec(),
        })
    }
}

/// A hallucinator whose parameters live on a tape.
pub struct BoundHallucinator<'a> {
    model: &'a HallucinatorModel,
    cond: Vec<Var>,
    generator: Vec<Var>,
}

impl BoundHallucinator<'_> {
    /// All parameter handles in declaration order.
    pub fn vars(&self) -> Vec<Var> {
        self.cond.iter().chain(&self.generator).copied().collect()
    }

    /// `s = h(p)` for a batch of prototypes `[n, ...feature]` → `[n, d′]`.
    pub fn condition(&self, tape: &mut Tape, prototypes: Var) -> Result<Var> {
        self.model.conditioner.forward(tape, &self.cond, prototypes)
    }

    /// `g(z; s)` for `per_class` noise rows per conditioning row: `cond` is
    /// `[n, d′]`, `noise` is `[n·per_class, k]` grouped by class, the result
    /// `[n·per_class, ...feature]`.
    pub fn generate(&self, tape: &mut Tape, cond: Var, noise: Var, per_class: usize) -> Result<Var> {
        let repeated = tape.repeat_rows(cond, per_class)?;
        if tape.shape(noise)[0] != tape.shape(repeated)[0] {
            return Err(Error::shape("generate", tape.shape(noise), tape.shape(repeated)));
        }
        let input = tape.concat(noise, repeated)?;
        self.model.generator.forward(tape, &self.generator, input)
    }

    /// Generator forward with per-layer hooks, for shape and statistics checks.
    pub fn generate_traced(
        &self,
        tape: &mut Tape,
        cond: Var,
        noise: Var,
        per_class: usize,
        visit: impl FnMut(&Layer, Var),
    ) -> Result<Var> {
        let repeated = tape.repeat_rows(cond, per_class)?;
        let input = tape.concat(noise, repeated)?;
        self.model.generator.forward_traced(tape, &self.generator, input, visit)
    }
}

/// `M` class-conditional features for one prototype. The conditioning vector
/// is computed once; every sample draws fresh noise from `sampler`.
pub fn hallucinate(
    model: &HallucinatorModel,
    prototype: &Tensor,
    count: usize,
    sampler: &mut NoiseSampler,
) -> Result<Vec<Tensor>> {
    let expected = model.feature_shape();
    if prototype.shape() != expected.as_slice() {
        return Err(Error::shape("hallucinate", prototype.shape(), &expected));
    }
    if sampler.dim() != model.dims.noise_dim {
        return Err(Error::shape("hallucinate", &[sampler.dim()], &[model.dims.noise_dim]));
    }
    if count == 0 {
        return Ok(Vec::new());
    }
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, false);
    let mut batched = vec![1];
    batched.extend_from_slice(&expected);
    let p = tape.constant(prototype.reshape(&batched)?);
    let s = bound.condition(&mut tape, p)?;
    let z = tape.constant(sampler.sample(count));
    let out = bound.generate(&mut tape, s, z, count)?;
    Ok(tape.value(out).unstack())
}
