use super::nn::{Layer, Sequential};
use crate::dataset::FeatureShape;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{conv_out_dim, Tape, Tensor, Var};

/// Small convolutional embedding `f_θ`: a stack of 3×3 stride-2 convolutions,
/// each followed by ReLU, so features are nonnegative `d×h×w` tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneModel {
    input_shape: [usize; 3],
    feature: FeatureShape,
    hidden: usize,
    net: Sequential,
}

/// Linear base classifier `c_φ` on pooled features.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierHead {
    num_classes: usize,
    net: Sequential,
}

/// A backbone with its classifier head: the unit trained by cross-entropy or
/// distillation and stored in one checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingNet {
    pub backbone: BackboneModel,
    pub classifier: ClassifierHead,
}

fn stride2_depth(input: usize, target: usize) -> Option<usize> {
    let mut x = input;
    let mut n = 0;
    while x > target {
        x = conv_out_dim(x, 3, 2, 1).ok()?;
        n += 1;
    }
    (x == target && n > 0).then_some(n)
}

fn backbone_layers(input_shape: [usize; 3], feature: FeatureShape, hidden: usize) -> Result<Vec<Layer>> {
    let [c, h, w] = input_shape;
    let unreachable = || {
        Error::geometry(
            "build_toy_backbone",
            format!("{h}×{w} cannot be reduced to {}×{} by stride-2 convolutions", feature.h, feature.w),
        )
    };
    let depth_h = stride2_depth(h, feature.h).ok_or_else(unreachable)?;
    let depth_w = stride2_depth(w, feature.w).ok_or_else(unreachable)?;
    if depth_h != depth_w {
        return Err(unreachable());
    }
    if c == 0 || hidden == 0 || feature.d == 0 {
        return Err(Error::InvalidConfig("backbone channel counts must be positive".into()));
    }
    let mut layers = Vec::new();
    let mut c_in = c;
    for i in 0..depth_h {
        let c_out = if i + 1 == depth_h { feature.d } else { hidden };
        layers.push(Layer::Conv2d {
            c_in,
            c_out,
            kernel: (3, 3),
            stride: 2,
            padding: 1,
        });
        layers.push(Layer::Relu);
        c_in = c_out;
    }
    Ok(layers)
}

impl BackboneModel {
    pub fn new(input_shape: [usize; 3], feature: FeatureShape, hidden: usize, rng: &mut Rng) -> Result<Self> {
        let layers = backbone_layers(input_shape, feature, hidden)?;
        Ok(BackboneModel {
            input_shape,
            feature,
            hidden,
            net: Sequential::new(&input_shape, layers, rng)?,
        })
    }

    pub fn from_params(input_shape: [usize; 3], feature: FeatureShape, hidden: usize, params: Vec<Tensor>) -> Result<Self> {
        let layers = backbone_layers(input_shape, feature, hidden)?;
        Ok(BackboneModel {
            input_shape,
            feature,
            hidden,
            net: Sequential::with_params(&input_shape, layers, params)?,
        })
    }

    pub fn param_shapes(input_shape: [usize; 3], feature: FeatureShape, hidden: usize) -> Result<Vec<Vec<usize>>> {
        Ok(backbone_layers(input_shape, feature, hidden)?
            .iter()
            .flat_map(Layer::param_shapes)
            .collect())
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn feature_shape(&self) -> FeatureShape {
        self.feature
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn net(&self) -> &Sequential {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Sequential {
        &mut self.net
    }

    /// `f_θ` on a batch `[n, c, H, W]` → `[n, d, h, w]`.
    pub fn features(&self, tape: &mut Tape, params: &[Var], images: Var) -> Result<Var> {
        self.net.forward(tape, params, images)
    }

    /// `f̄_θ`: features followed by global average pooling → `[n, d]`.
    pub fn pooled(&self, tape: &mut Tape, params: &[Var], images: Var) -> Result<Var> {
        let f = self.features(tape, params, images)?;
        tape.global_average_pool(f)
    }

    /// Feature tensors for a batch of images, without gradients.
    pub fn embed(&self, images: &Tensor) -> Result<Tensor> {
        self.net.infer(images)
    }
}

impl ClassifierHead {
    pub fn new(feature_dim: usize, num_classes: usize, rng: &mut Rng) -> Result<Self> {
        let net = Sequential::new(
            &[feature_dim],
            vec![Layer::Linear {
                fan_in: feature_dim,
                fan_out: num_classes,
            }],
            rng,
        )?;
        Ok(ClassifierHead { num_classes, net })
    }

    pub fn from_params(feature_dim: usize, num_classes: usize, params: Vec<Tensor>) -> Result<Self> {
        let net = Sequential::with_params(
            &[feature_dim],
            vec![Layer::Linear {
                fan_in: feature_dim,
                fan_out: num_classes,
            }],
            params,
        )?;
        Ok(ClassifierHead { num_classes, net })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn net(&self) -> &Sequential {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Sequential {
        &mut self.net
    }

    /// Weight matrix (without bias), the part regularised by `R(φ)`.
    pub fn weights(&self) -> &Tensor {
        &self.net.params()[0]
    }
}

impl EmbeddingNet {
    pub fn new(
        input_shape: [usize; 3],
        feature: FeatureShape,
        hidden: usize,
        num_classes: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let backbone = BackboneModel::new(input_shape, feature, hidden, rng)?;
        let classifier = ClassifierHead::new(feature.d, num_classes, rng)?;
        Ok(EmbeddingNet { backbone, classifier })
    }

    /// True when `other` has exactly the same architecture.
    pub fn same_architecture(&self, other: &EmbeddingNet) -> bool {
        self.backbone.input_shape == other.backbone.input_shape
            && self.backbone.feature == other.backbone.feature
            && self.backbone.hidden == other.backbone.hidden
            && self.classifier.num_classes == other.classifier.num_classes
    }

    pub fn params(&self) -> impl Iterator<Item = &Tensor> {
        self.backbone.net.params().iter().chain(self.classifier.net.params())
    }

    pub fn params_cloned(&self) -> Vec<Tensor> {
        self.params().cloned().collect()
    }

    pub fn set_params(&mut self, mut params: Vec<Tensor>) -> Result<()> {
        let split = self.backbone.net.params().len();
        if params.len() != split + self.classifier.net.params().len() {
            return Err(Error::ArchitectureMismatch("parameter count differs".into()));
        }
        let head = params.split_off(split);
        self.backbone = BackboneModel::from_params(self.backbone.input_shape, self.backbone.feature, self.backbone.hidden, params)?;
        self.classifier = ClassifierHead::from_params(self.backbone.feature.d, self.classifier.num_classes, head)?;
        Ok(())
    }

    /// Logits `c_φ(f̄_θ(x))` for a batch of images; `params` come from
    /// binding backbone then classifier parameters.
    pub fn logits(&self, tape: &mut Tape, params: &[Var], images: Var) -> Result<Var> {
        let split = self.backbone.net.params().len();
        let pooled = self.backbone.pooled(tape, &params[..split], images)?;
        self.classifier.net.forward(tape, &params[split..], pooled)
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.params()
            .map(|p| if trainable { tape.param(p) } else { tape.constant(p.clone()) })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn two_stride2_convs_for_28_to_7() {
        let b = BackboneModel::new([3, 28, 28], FeatureShape::new(64, 7, 7), 16, &mut seeded(0)).unwrap();
        let convs = b.net().layers().iter().filter(|l| matches!(l, Layer::Conv2d { .. })).count();
        assert_eq!(convs, 2);
        assert_eq!(b.net().output_shape(), vec![64, 7, 7]);
    }

    #[test]
    fn unreachable_geometry() {
        assert!(BackboneModel::new([3, 28, 28], FeatureShape::new(8, 6, 6), 4, &mut seeded(0)).is_err());
        assert!(BackboneModel::new([3, 7, 7], FeatureShape::new(8, 7, 7), 4, &mut seeded(0)).is_err());
        assert!(BackboneModel::new([3, 28, 14], FeatureShape::new(8, 7, 7), 4, &mut seeded(0)).is_err());
    }

    #[test]
    fn pooled_is_gap_of_features_and_nonnegative() {
        let b = BackboneModel::new([2, 8, 8], FeatureShape::new(5, 2, 2), 3, &mut seeded(4)).unwrap();
        let x: Vec<f64> = (0..2 * 2 * 64).map(|i| ((i * 37 % 11) as f64 - 5.0) / 5.0).collect();
        let x = Tensor::new(&[2, 2, 8, 8], x).unwrap();
        let mut tape = Tape::new();
        let vars = b.net().bind_frozen(&mut tape);
        let xv = tape.constant(x);
        let f = b.features(&mut tape, &vars, xv).unwrap();
        let p = tape.global_average_pool(f).unwrap();
        assert!(tape.value(f).data().iter().all(|&v| v >= 0.0));
        for (i, feat) in tape.value(f).unstack().iter().enumerate() {
            let gap = feat.global_average_pool().unwrap();
            assert_eq!(gap.data(), &tape.value(p).data()[i * 5..(i + 1) * 5]);
        }
    }
}
