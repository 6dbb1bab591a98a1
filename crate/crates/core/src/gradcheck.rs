//! Central finite-difference checks of the tape's gradients, in double
//! precision.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::dataset::FeatureShape;
use crate::error::Result;
use crate::halluc_train::{class_prototypes, hallucination_loss};
use crate::models::{EmbeddingNet, HallucinatorDims, HallucinatorModel, HallucinatorVariant, NoiseSampler};
use crate::rng::{seeded, Rng};
use crate::tensor::{Tape, Tensor, Var};

/// Largest accepted relative error.
pub const TOLERANCE: f64 = 1e-4;
const STEP: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    /// `‖analytic − numeric‖ / (‖analytic‖ + ‖numeric‖)`, worst input.
    pub max_rel_error: f64,
    /// Number of scalar entries perturbed.
    pub entries: usize,
    pub passed: bool,
}

fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut analytic.iter().zip(numeric).map(|(a, n)| a - n));
    let scale = norm(&mut analytic.iter().copied()) + norm(&mut numeric.iter().copied());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Compares the tape gradient of the scalar `f(inputs)` against central
/// differences for every entry of every input.
pub fn check(name: &str, inputs: &[Tensor], f: impl Fn(&mut Tape, &[Var]) -> Result<Var>) -> Result<CheckResult> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t)).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; tape.value(v).numel()]))
        .collect();

    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = values.iter().map(|x| t.leaf(x.clone())).collect();
        let out = f(&mut t, &vs)?;
        Ok(t.value(out).item())
    };
    let mut worst = 0.0f64;
    let mut entries = 0;
    let mut work = inputs.to_vec();
    for (i, grad) in analytic.iter().enumerate() {
        let mut numeric = Vec::with_capacity(grad.len());
        for j in 0..grad.len() {
            let x = work[i].data()[j];
            work[i].data_mut()[j] = x + STEP;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = x - STEP;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = x;
            numeric.push((plus - minus) / (2.0 * STEP));
        }
        entries += grad.len();
        worst = worst.max(rel_error(grad, &numeric));
    }
    Ok(CheckResult {
        name: name.to_string(),
        max_rel_error: worst,
        entries,
        passed: worst < TOLERANCE,
    })
}

fn normal(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| StandardNormal.sample(rng)).collect()).expect("shape")
}

fn uniform(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape")
}

fn jitter(p: &Tensor, rng: &mut Rng) -> Tensor {
    let values = p.data().iter().map(|&v| v + rng.random_range(-0.05..0.05)).collect();
    Tensor::new(p.shape(), values).expect("same shape")
}

/// `Σ out ⊙ w` with fixed random weights, turning any output into a scalar
/// whose gradient exercises every output entry differently.
fn project(tape: &mut Tape, out: Var, rng_seed: u64) -> Result<Var> {
    let w = normal(&mut seeded(rng_seed), tape.shape(out));
    let w = tape.constant(w);
    let prod = tape.mul(out, w)?;
    Ok(tape.sum(prod))
}

/// Checks of every differentiable operator on small random inputs.
pub fn operator_checks(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = seeded(seed);
    let mut r = Vec::new();
    let a = normal(&mut rng, &[3, 4]);
    let b = normal(&mut rng, &[3, 4]);
    r.push(check("add", &[a.clone(), b.clone()], |t, v| {
        let o = t.add(v[0], v[1])?;
        project(t, o, 1)
    })?);
    r.push(check("sub", &[a.clone(), b.clone()], |t, v| {
        let o = t.sub(v[0], v[1])?;
        project(t, o, 2)
    })?);
    r.push(check("mul", &[a.clone(), b.clone()], |t, v| {
        let o = t.mul(v[0], v[1])?;
        project(t, o, 3)
    })?);
    r.push(check("scale", std::slice::from_ref(&a), |t, v| {
        let o = t.scale(v[0], -1.7);
        project(t, o, 4)
    })?);
    r.push(check("add_scalar", std::slice::from_ref(&a), |t, v| {
        let o = t.add_scalar(v[0], 0.3);
        project(t, o, 5)
    })?);
    let m = normal(&mut rng, &[4, 5]);
    r.push(check("matmul", &[a.clone(), m.clone()], |t, v| {
        let o = t.matmul(v[0], v[1])?;
        project(t, o, 6)
    })?);
    let bias = normal(&mut rng, &[5]);
    r.push(check("linear (batch)", &[a.clone(), m.clone(), bias.clone()], |t, v| {
        let o = t.linear(v[0], v[1], v[2])?;
        project(t, o, 7)
    })?);
    let x1 = normal(&mut rng, &[4]);
    r.push(check("linear (vector)", &[x1, m, bias], |t, v| {
        let o = t.linear(v[0], v[1], v[2])?;
        project(t, o, 8)
    })?);
    let img = normal(&mut rng, &[2, 2, 5, 5]);
    let k = normal(&mut rng, &[3, 2, 3, 3]);
    let kb = normal(&mut rng, &[3]);
    r.push(check("conv2d (stride 1, pad 1)", &[img.clone(), k.clone(), kb.clone()], |t, v| {
        let o = t.conv2d(v[0], v[1], v[2], 1, 1)?;
        project(t, o, 9)
    })?);
    r.push(check("conv2d (stride 2, pad 1)", &[img.clone(), k.clone(), kb.clone()], |t, v| {
        let o = t.conv2d(v[0], v[1], v[2], 2, 1)?;
        project(t, o, 10)
    })?);
    let img3 = normal(&mut rng, &[2, 4, 4]);
    let k3 = normal(&mut rng, &[3, 2, 2, 3]);
    r.push(check("conv2d (rank 3, rectangular kernel)", &[img3.clone(), k3, kb.clone()], |t, v| {
        let o = t.conv2d(v[0], v[1], v[2], 1, 0)?;
        project(t, o, 11)
    })?);
    let kt = normal(&mut rng, &[2, 3, 3, 3]);
    r.push(check("conv2d_transpose (stride 1)", &[img.clone(), kt.clone(), kb.clone()], |t, v| {
        let o = t.conv2d_transpose(v[0], v[1], v[2], 1)?;
        project(t, o, 12)
    })?);
    r.push(check("conv2d_transpose (stride 2)", &[img3, kt, kb], |t, v| {
        let o = t.conv2d_transpose(v[0], v[1], v[2], 2)?;
        project(t, o, 13)
    })?);
    // keep entries away from the kink at zero
    let away: Vec<f64> = a.data().iter().map(|&x| if x.abs() < 0.05 { x + 0.1 } else { x }).collect();
    let away = Tensor::new(a.shape(), away)?;
    r.push(check("relu", &[away], |t, v| {
        let o = t.relu(v[0]);
        project(t, o, 14)
    })?);
    r.push(check("sigmoid", std::slice::from_ref(&a), |t, v| {
        let o = t.sigmoid(v[0]);
        project(t, o, 15)
    })?);
    r.push(check("global_average_pool", std::slice::from_ref(&img), |t, v| {
        let o = t.global_average_pool(v[0])?;
        project(t, o, 16)
    })?);
    r.push(check("reshape", std::slice::from_ref(&img), |t, v| {
        let o = t.reshape(v[0], &[2, 50])?;
        project(t, o, 17)
    })?);
    let c = normal(&mut rng, &[3, 2]);
    r.push(check("concat", &[a.clone(), c], |t, v| {
        let o = t.concat(v[0], v[1])?;
        project(t, o, 18)
    })?);
    r.push(check("repeat_rows", std::slice::from_ref(&a), |t, v| {
        let o = t.repeat_rows(v[0], 3)?;
        project(t, o, 19)
    })?);
    r.push(check("sum", std::slice::from_ref(&a), |t, v| {
        let s = t.sum(v[0]);
        let s2 = t.mul(s, s)?;
        Ok(s2)
    })?);
    r.push(check("mean", std::slice::from_ref(&a), |t, v| {
        let s = t.mean(v[0]);
        t.mul(s, s)
    })?);
    r.push(check("softmax", std::slice::from_ref(&a), |t, v| {
        let o = t.softmax(v[0])?;
        project(t, o, 20)
    })?);
    r.push(check("softmax_cross_entropy", std::slice::from_ref(&a), |t, v| {
        t.softmax_cross_entropy(v[0], &[3, 0, 2])
    })?);
    let teacher = {
        let mut tape = Tape::new();
        let x = tape.constant(b.clone());
        let p = tape.softmax(x)?;
        tape.value(p).clone()
    };
    r.push(check("kl_divergence (through softmax)", std::slice::from_ref(&a), |t, v| {
        let p = t.softmax(v[0])?;
        t.kl_divergence(p, &teacher)
    })?);
    r.push(check("mse_to_target", &[a, b], |t, v| t.mse_to_target(v[0], v[1]))?);
    Ok(r)
}

/// Episode loss of a tiny hallucinator (features 2×3×3, k = d′ = 4, N = 2,
/// K = 2, M = 2) with respect to every conditioner and generator parameter.
pub fn hallucinator_check(variant: HallucinatorVariant, seed: u64) -> Result<CheckResult> {
    let dims = HallucinatorDims::proportional(FeatureShape::new(2, 3, 3));
    let mut rng = seeded(seed ^ 0xfeed);
    let mut model = HallucinatorModel::new(variant, dims, &mut seeded(seed))?;
    // zero biases behind dead units put pre-activations exactly on the ReLU
    // kink; a small jitter moves the check to a generic point
    let jittered = model.params().map(|p| jitter(p, &mut rng)).collect();
    model.set_params(jittered)?;
    let features: Vec<Vec<Tensor>> = (0..2)
        .map(|_| (0..2).map(|_| uniform(&mut rng, &[2, 3, 3], 0.0, 1.0)).collect())
        .collect();
    let refs: Vec<Vec<&Tensor>> = features.iter().map(|c| c.iter().collect()).collect();
    let protos = class_prototypes(variant, &refs)?;
    let per_class = 2;
    let noise = NoiseSampler::new(dims.noise_dim, seed).sample(2 * per_class);
    let name = match variant {
        HallucinatorVariant::Tensor => "tensor hallucinator episode loss",
        HallucinatorVariant::Vector => "vector hallucinator episode loss",
    };
    check(name, &model.params_cloned(), |t, v| {
        let bound = model.bind_vars(v)?;
        let p = t.constant(protos.clone());
        let s = bound.condition(t, p)?;
        let z = t.constant(noise.clone());
        let g = bound.generate(t, s, z, per_class)?;
        hallucination_loss(t, g, &protos, per_class)
    })
}

/// Distillation objective through a tiny backbone and classifier, with
/// respect to every student parameter.
pub fn distillation_check(seed: u64) -> Result<CheckResult> {
    let mut rng = seeded(seed);
    let mut net = EmbeddingNet::new([2, 6, 6], FeatureShape::new(3, 2, 2), 3, 4, &mut rng)?;
    let jittered = net.params().map(|p| jitter(p, &mut rng)).collect();
    net.set_params(jittered)?;
    let images = uniform(&mut rng, &[3, 2, 6, 6], 0.0, 1.0);
    let teacher = {
        let logits = normal(&mut rng, &[3, 4]);
        let mut tape = Tape::new();
        let x = tape.constant(logits);
        let p = tape.softmax(x)?;
        tape.value(p).clone()
    };
    check("backbone distillation loss", &net.params_cloned(), |t, v| {
        let x = t.constant(images.clone());
        let logits = net.logits(t, v, x)?;
        let ce = t.softmax_cross_entropy(logits, &[0, 3, 1])?;
        let p = t.softmax(logits)?;
        let kl = t.kl_divergence(p, &teacher)?;
        let a = t.scale(ce, 0.5);
        let b = t.scale(kl, 0.5);
        t.add(a, b)
    })
}

/// Every operator, both hallucinators and the distillation objective.
pub fn full_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut results = operator_checks(seed)?;
    results.push(hallucinator_check(HallucinatorVariant::Tensor, seed)?);
    results.push(hallucinator_check(HallucinatorVariant::Vector, seed)?);
    results.push(distillation_check(seed)?);
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_wrong_gradient() {
        let x = Tensor::from_vec(vec![0.5, -1.0]);
        let ok = check("square", std::slice::from_ref(&x), |t, v| {
            let sq = t.mul(v[0], v[0])?;
            Ok(t.sum(sq))
        })
        .unwrap();
        assert!(ok.passed, "{ok:?}");
        // the copy is a constant on the tape, so the analytic gradient is x
        // while the numeric one is 2x
        let bad = check("detached square", &[x], |t, v| {
            let c = t.constant(t.value(v[0]).clone());
            let sq = t.mul(v[0], c)?;
            Ok(t.sum(sq))
        })
        .unwrap();
        assert!(!bad.passed);
    }
}
