//! The gradient-check suite: every primitive, every layer block and a tiny end-to-end
//! network, each compared against central differences over many random seeds.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::models::{ModelSpec, TpoNet, Variant};
use crate::nn::{self, BasicConv2d, BasicConv3d, BatchNorm, DenseHead, Linear, Mode};
use crate::tensor::{
    grad_check, Differentiable, GradCheckOptions, Graph, ParamId, ParamStore, Precision, Scalar, Tensor, Var,
};

pub const TOL_F32: f64 = 1e-4;
pub const TOL_F64: f64 = 1e-6;
/// Small enough that a central difference rarely straddles a ReLU kink.
pub const FD_STEP: f64 = 1e-6;

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Σ out ⊙ W for a fixed pseudo-random W, so every output element carries a distinct weight.
fn weighted_sum<T: Scalar>(g: &mut Graph<T>, v: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = Tensor::from_fn(g.shape(v), |_| T::from_f64_lossy(rng.gen_range(-1.0..1.0)));
    let w = g.constant(w);
    let p = g.mul(v, w)?;
    g.sum_all(p)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Primitive {
    Add,
    Sub,
    Mul,
    Scale,
    AddScalar,
    MatMul,
    Transpose,
    Reshape,
    Concat,
    Slice,
    Sum,
    Mean,
    Max,
    Expand,
    BiasAdd,
    Relu,
    Exp,
    Log,
    Powf,
    Pad2d,
    Conv2d,
    Conv2dStrided,
    Conv3dPointwise,
    AvgPool2d,
}

impl Primitive {
    pub const ALL: [Primitive; 24] = [
        Primitive::Add,
        Primitive::Sub,
        Primitive::Mul,
        Primitive::Scale,
        Primitive::AddScalar,
        Primitive::MatMul,
        Primitive::Transpose,
        Primitive::Reshape,
        Primitive::Concat,
        Primitive::Slice,
        Primitive::Sum,
        Primitive::Mean,
        Primitive::Max,
        Primitive::Expand,
        Primitive::BiasAdd,
        Primitive::Relu,
        Primitive::Exp,
        Primitive::Log,
        Primitive::Powf,
        Primitive::Pad2d,
        Primitive::Conv2d,
        Primitive::Conv2dStrided,
        Primitive::Conv3dPointwise,
        Primitive::AvgPool2d,
    ];

    fn inputs(self, rng: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
        let u = |s: &[usize], rng: &mut ChaCha8Rng| uniform(s, -1.0, 1.0, rng);
        match self {
            Primitive::Add | Primitive::Sub | Primitive::Mul => vec![u(&[3, 4], rng), u(&[3, 4], rng)],
            Primitive::MatMul => vec![u(&[3, 4], rng), u(&[4, 2], rng)],
            Primitive::Concat => vec![u(&[2, 1, 3], rng), u(&[2, 3, 3], rng)],
            Primitive::Expand => vec![u(&[2, 1, 3], rng)],
            Primitive::BiasAdd => vec![u(&[2, 3, 2, 2], rng), u(&[3], rng)],
            Primitive::Log | Primitive::Powf => vec![uniform(&[3, 4], 0.5, 2.0, rng)],
            Primitive::Pad2d | Primitive::AvgPool2d => vec![u(&[2, 2, 4, 4], rng)],
            Primitive::Conv2d | Primitive::Conv2dStrided => {
                vec![u(&[2, 3, 5, 5], rng), u(&[2, 3, 3, 3], rng), u(&[2], rng)]
            }
            Primitive::Conv3dPointwise => vec![u(&[2, 3, 6, 2, 2], rng), u(&[2, 3, 3, 1, 1], rng), u(&[2], rng)],
            _ => vec![u(&[3, 4], rng)],
        }
    }

    fn apply<T: Scalar>(self, g: &mut Graph<T>, x: &[Var]) -> Result<Var> {
        match self {
            Primitive::Add => g.add(x[0], x[1]),
            Primitive::Sub => g.sub(x[0], x[1]),
            Primitive::Mul => g.mul(x[0], x[1]),
            Primitive::Scale => g.scale(x[0], T::from_f64_lossy(-1.7)),
            Primitive::AddScalar => g.add_scalar(x[0], T::from_f64_lossy(0.3)),
            Primitive::MatMul => g.matmul(x[0], x[1]),
            Primitive::Transpose => g.transpose(x[0]),
            Primitive::Reshape => g.reshape(x[0], &[2, 6]),
            Primitive::Concat => g.concat(&[x[0], x[1]], 1),
            Primitive::Slice => g.slice(x[0], 1, 1, 2),
            Primitive::Sum => g.sum(x[0], &[1]),
            Primitive::Mean => g.mean(x[0], &[0]),
            Primitive::Max => g.max(x[0], &[1]),
            Primitive::Expand => g.expand(x[0], &[2, 4, 3]),
            Primitive::BiasAdd => g.bias_add(x[0], x[1]),
            Primitive::Relu => g.relu(x[0]),
            Primitive::Exp => g.exp(x[0]),
            Primitive::Log => g.log(x[0]),
            Primitive::Powf => g.powf(x[0], T::from_f64_lossy(-0.5)),
            Primitive::Pad2d => g.pad2d(x[0], 1),
            Primitive::Conv2d => g.conv2d(x[0], x[1], Some(x[2]), 1, 1),
            Primitive::Conv2dStrided => g.conv2d(x[0], x[1], Some(x[2]), 2, 0),
            Primitive::Conv3dPointwise => g.conv3d_pointwise(x[0], x[1], Some(x[2])),
            Primitive::AvgPool2d => g.avg_pool2d(x[0], 3, 1, 1),
        }
    }
}

/// A layer block evaluated with its parameters supplied as check inputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    BatchNormTrain,
    BatchNormEval,
    BasicConv3d,
    BasicConv2d1,
    BasicConv2d3,
    BasicConv2d5,
    AvgPool3x3,
    AdaptivePool,
    Linear,
    DenseHead,
    CrossEntropy,
    BandReduction,
    FeatureExtractor1,
    FeatureExtractor2,
}

impl LayerKind {
    pub const ALL: [LayerKind; 14] = [
        LayerKind::BatchNormTrain,
        LayerKind::BatchNormEval,
        LayerKind::BasicConv3d,
        LayerKind::BasicConv2d1,
        LayerKind::BasicConv2d3,
        LayerKind::BasicConv2d5,
        LayerKind::AvgPool3x3,
        LayerKind::AdaptivePool,
        LayerKind::Linear,
        LayerKind::DenseHead,
        LayerKind::CrossEntropy,
        LayerKind::BandReduction,
        LayerKind::FeatureExtractor1,
        LayerKind::FeatureExtractor2,
    ];
}

enum Block {
    Bn(BatchNorm, Mode),
    Conv3(BasicConv3d),
    Conv2(BasicConv2d),
    Pool,
    Adaptive,
    Linear(Linear),
    Head(DenseHead),
    Loss,
    Net(Box<TpoNet>, Stage),
}

#[derive(Clone, Copy)]
enum Stage {
    Band,
    Features,
    Full,
}

/// A scalar objective over an input tensor and the trainable entries of a parameter store.
struct Case {
    block: Block,
    store: ParamStore<f64>,
    params: Vec<ParamId>,
    input: Tensor<f64>,
    labels: Vec<usize>,
    seed: u64,
}

fn tiny_spec(variant: Variant) -> ModelSpec {
    ModelSpec {
        variant,
        p: 2,
        q: 2,
        r: 2,
        input_bands: 6,
        patch_size: 3,
        views: 9,
        branch_channels: 2,
        classes: 2,
    }
}

/// Random values in every trainable parameter and plausible running statistics.
fn randomize(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let name = store.entry(id).name.clone();
        let shape = store.value(id).shape().to_vec();
        let v = if name.ends_with(".gamma") || name.ends_with(".running_var") {
            uniform(&shape, 0.5, 1.5, rng)
        } else {
            uniform(&shape, -0.5, 0.5, rng)
        };
        *store.value_mut(id) = v;
    }
}

impl Case {
    fn layer(kind: LayerKind, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::<f64>::new();
        let u = |s: &[usize], rng: &mut ChaCha8Rng| uniform(s, -1.0, 1.0, rng);
        let mut labels = Vec::new();
        let (block, input) = match kind {
            LayerKind::BatchNormTrain => (
                Block::Bn(BatchNorm::new(&mut store, "bn", 3), Mode::Train),
                u(&[4, 3, 2, 2], &mut rng),
            ),
            LayerKind::BatchNormEval => (
                Block::Bn(BatchNorm::new(&mut store, "bn", 3), Mode::Eval),
                u(&[4, 3, 2, 2], &mut rng),
            ),
            LayerKind::BasicConv3d => (
                Block::Conv3(BasicConv3d::new(&mut store, "c3", 3, 3, 2)),
                u(&[2, 3, 5, 2, 2], &mut rng),
            ),
            LayerKind::BasicConv2d1 | LayerKind::BasicConv2d3 | LayerKind::BasicConv2d5 => {
                let k = match kind {
                    LayerKind::BasicConv2d1 => 1,
                    LayerKind::BasicConv2d3 => 3,
                    _ => 5,
                };
                (
                    Block::Conv2(BasicConv2d::same(&mut store, "c2", 3, 2, k)),
                    u(&[2, 3, 3, 3], &mut rng),
                )
            }
            LayerKind::AvgPool3x3 => (Block::Pool, u(&[2, 2, 3, 3], &mut rng)),
            LayerKind::AdaptivePool => (Block::Adaptive, u(&[2, 3, 3, 3], &mut rng)),
            LayerKind::Linear => (Block::Linear(Linear::new(&mut store, "fc", 5, 3)), u(&[4, 5], &mut rng)),
            LayerKind::DenseHead => (
                Block::Head(DenseHead::new(&mut store, "head", 5, 3)),
                u(&[4, 5], &mut rng),
            ),
            LayerKind::CrossEntropy => {
                labels = (0..4).map(|_| rng.gen_range(0..3)).collect();
                (Block::Loss, uniform(&[4, 3], -10.0, 10.0, &mut rng))
            }
            LayerKind::BandReduction | LayerKind::FeatureExtractor1 | LayerKind::FeatureExtractor2 => {
                let variant = if kind == LayerKind::FeatureExtractor2 {
                    Variant::TpoCnn2
                } else {
                    Variant::TpoCnn1
                };
                let spec = tiny_spec(variant);
                let net = Box::new(TpoNet::new(spec.clone(), &mut store)?);
                if kind == LayerKind::BandReduction {
                    (Block::Net(net, Stage::Band), u(&spec.input_shape(2), &mut rng))
                } else {
                    let s = [2, spec.feature_channels(), 3, 3];
                    (Block::Net(net, Stage::Features), u(&s, &mut rng))
                }
            }
        };
        randomize(&mut store, &mut rng);
        let params = store.trainable_ids().collect();
        Ok(Self {
            block,
            store,
            params,
            input,
            labels,
            seed,
        })
    }

    fn model(variant: Variant, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = tiny_spec(variant);
        let mut store = ParamStore::<f64>::new();
        let net = Box::new(TpoNet::new(spec.clone(), &mut store)?);
        nn::init_params(&mut store, seed);
        let batch = 3;
        let input = uniform(&spec.input_shape(batch), -1.0, 1.0, &mut rng);
        let labels = (0..batch).map(|_| rng.gen_range(0..spec.classes)).collect();
        let params = store.trainable_ids().collect();
        Ok(Self {
            block: Block::Net(net, Stage::Full),
            store,
            params,
            input,
            labels,
            seed,
        })
    }

    fn inputs(&self) -> Vec<Tensor<f64>> {
        let mut v = vec![self.input.clone()];
        v.extend(self.params.iter().map(|&id| self.store.value(id).clone()));
        v
    }
}

impl Differentiable for Case {
    fn eval<T: Scalar>(&self, g: &mut Graph<T>, inputs: &[Var]) -> Result<Var> {
        let store: ParamStore<T> = self.store.cast();
        for (&id, &v) in self.params.iter().zip(&inputs[1..]) {
            g.bind_param(id, v);
        }
        let x = inputs[0];
        let out = match &self.block {
            Block::Bn(bn, mode) => bn.forward(g, &store, x, *mode)?,
            Block::Conv3(c) => c.forward(g, &store, x, Mode::Train)?,
            Block::Conv2(c) => c.forward(g, &store, x, Mode::Train)?,
            Block::Pool => nn::avg_pool2d(g, x, 3, 1, 1)?,
            Block::Adaptive => nn::adaptive_avg_pool_1x1(g, x)?,
            Block::Linear(l) => l.forward(g, &store, x)?,
            Block::Head(h) => h.forward(g, &store, x, Mode::Train)?,
            Block::Loss => return nn::cross_entropy_labels(g, x, &self.labels),
            Block::Net(net, Stage::Band) => net.band.forward(g, &store, x, Mode::Train)?,
            Block::Net(net, Stage::Features) => net.features.forward(g, &store, x, Mode::Train)?,
            Block::Net(net, Stage::Full) => {
                let z = net.logits(g, &store, x, Mode::Train)?;
                return nn::cross_entropy_labels(g, z, &self.labels);
            }
        };
        weighted_sum(g, out, self.seed)
    }
}

struct PrimCase {
    op: Primitive,
    seed: u64,
}

impl Differentiable for PrimCase {
    fn eval<T: Scalar>(&self, g: &mut Graph<T>, inputs: &[Var]) -> Result<Var> {
        let out = self.op.apply(g, inputs)?;
        weighted_sum(g, out, self.seed)
    }
}

/// Outcome of one suite entry at one precision, aggregated over seeds.
#[derive(Clone, Debug)]
pub struct SuiteResult {
    pub group: &'static str,
    pub name: String,
    pub precision: Precision,
    pub seeds: usize,
    pub worst_error: f64,
    pub tol: f64,
    pub passed: bool,
}

fn options(precision: Precision, seed: u64, max_coords: Option<usize>) -> GradCheckOptions {
    let base = match precision {
        Precision::F32 => GradCheckOptions::f32(TOL_F32),
        Precision::F64 => GradCheckOptions::f64(TOL_F64),
    };
    GradCheckOptions {
        h: FD_STEP,
        max_coords,
        ..base.with_seed(seed)
    }
}

fn aggregate<F>(
    group: &'static str,
    name: String,
    precision: Precision,
    seeds: usize,
    mut one: F,
) -> Result<SuiteResult>
where
    F: FnMut(u64) -> Result<crate::tensor::GradCheckReport>,
{
    let mut worst = 0.0f64;
    let mut passed = true;
    for seed in 0..seeds as u64 {
        let r = one(seed)?;
        worst = worst.max(r.max_rel_error);
        passed &= r.passed;
    }
    let tol = match precision {
        Precision::F32 => TOL_F32,
        Precision::F64 => TOL_F64,
    };
    Ok(SuiteResult {
        group,
        name,
        precision,
        seeds,
        worst_error: worst,
        tol,
        passed,
    })
}

pub fn check_primitive(op: Primitive, precision: Precision, seeds: usize) -> Result<SuiteResult> {
    aggregate("primitive", format!("{op:?}"), precision, seeds, |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let inputs = op.inputs(&mut rng);
        grad_check(&PrimCase { op, seed }, &inputs, &options(precision, seed, None))
    })
}

pub fn check_layer(kind: LayerKind, precision: Precision, seeds: usize) -> Result<SuiteResult> {
    aggregate("layer", format!("{kind:?}"), precision, seeds, |seed| {
        let case = Case::layer(kind, 2000 + seed)?;
        grad_check(&case, &case.inputs(), &options(precision, seed, Some(24)))
    })
}

/// Full tiny network (V=9, D=6, p=q=r=2, k=3, C=2) under the summed cross-entropy loss.
pub fn check_model(variant: Variant, precision: Precision, seeds: usize) -> Result<SuiteResult> {
    aggregate("model", format!("{variant}"), precision, seeds, |seed| {
        let case = Case::model(variant, 3000 + seed)?;
        grad_check(&case, &case.inputs(), &options(precision, seed, Some(12)))
    })
}

/// Every primitive, layer and model case at both precisions.
pub fn run_suite(seeds: usize) -> Result<Vec<SuiteResult>> {
    let mut out = Vec::new();
    for precision in [Precision::F64, Precision::F32] {
        for op in Primitive::ALL {
            out.push(check_primitive(op, precision, seeds)?);
        }
        for kind in LayerKind::ALL {
            out.push(check_layer(kind, precision, seeds)?);
        }
        for variant in [Variant::TpoCnn1, Variant::TpoCnn2] {
            out.push(check_model(variant, precision, seeds)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_primitive_passes_f64() {
        for op in Primitive::ALL {
            let r = check_primitive(op, Precision::F64, 3).unwrap();
            assert!(r.passed, "{op:?}: {}", r.worst_error);
        }
    }

    #[test]
    fn every_layer_passes_both_precisions() {
        for kind in LayerKind::ALL {
            for p in [Precision::F64, Precision::F32] {
                let r = check_layer(kind, p, 2).unwrap();
                assert!(r.passed, "{kind:?} {p:?}: {}", r.worst_error);
            }
        }
    }

    #[test]
    fn tiny_models_pass() {
        for v in [Variant::TpoCnn1, Variant::TpoCnn2] {
            for p in [Precision::F64, Precision::F32] {
                let r = check_model(v, p, 2).unwrap();
                assert!(r.passed, "{v} {p:?}: {}", r.worst_error);
            }
        }
    }
}
