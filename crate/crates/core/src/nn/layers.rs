use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Mode;
use crate::error::{shape_err, Result};
use crate::tensor::{Graph, ParamId, ParamStore, Scalar, Tensor, Var};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

/// Re-initialises every entry of `store` by its name suffix.
///
/// `*.weight` ~ U(−1/√fan_in, 1/√fan_in) with fan_in the product of all but the first
/// extent; biases, `beta` and running means are zeroed; `gamma` and running variances
/// are set to one.
pub fn init_params<T: Scalar>(store: &mut ParamStore<T>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let name = store.entry(id).name.clone();
        let shape = store.value(id).shape().to_vec();
        let value = if name.ends_with(".weight") {
            let fan_in: usize = shape[1..].iter().product();
            let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound);
            Tensor::from_fn(&shape, |_| T::from_f64_lossy(dist.sample(&mut rng)))
        } else if name.ends_with(".gamma") || name.ends_with(".running_var") {
            Tensor::full(&shape, T::one())
        } else {
            Tensor::zeros(&shape)
        };
        *store.value_mut(id) = value;
    }
    store.zero_grads();
}

/// Per-channel batch normalisation over every axis except axis 1.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub channels: usize,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        Self {
            channels,
            gamma: store.add_param(&format!("{name}.gamma"), Tensor::full(&[channels], T::one())),
            beta: store.add_param(&format!("{name}.beta"), Tensor::zeros(&[channels])),
            running_mean: store.add_buffer(&format!("{name}.running_mean"), Tensor::zeros(&[channels])),
            running_var: store.add_buffer(&format!("{name}.running_var"), Tensor::full(&[channels], T::one())),
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        }
    }

    fn channel_view(&self, rank: usize) -> Vec<usize> {
        let mut s = vec![1; rank];
        s[1] = self.channels;
        s
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, mode: Mode) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        if shape.len() < 2 || shape[1] != self.channels {
            return shape_err(format!(
                "batch norm over {} channels got input {shape:?}",
                self.channels
            ));
        }
        let axes: Vec<usize> = (0..shape.len()).filter(|&a| a != 1).collect();
        let view = self.channel_view(shape.len());
        let eps = T::from_f64_lossy(self.eps);
        let xhat = match mode {
            Mode::Train => {
                let count = g.value(x).len() / self.channels;
                let mean = g.mean(x, &axes)?;
                let mean_e = g.expand(mean, &shape)?;
                let xc = g.sub(x, mean_e)?;
                let sq = g.mul(xc, xc)?;
                let var = g.mean(sq, &axes)?;
                self.record_running_stats(g, store, mean, var, count);
                let ve = g.add_scalar(var, eps)?;
                let inv = g.powf(ve, T::from_f64_lossy(-0.5))?;
                let inv_e = g.expand(inv, &shape)?;
                g.mul(xc, inv_e)?
            }
            Mode::Eval => {
                let rm = store.value(self.running_mean).clone().reshape(&view)?;
                let inv = store
                    .value(self.running_var)
                    .map(|v| T::one() / (v + eps).sqrt())
                    .reshape(&view)?;
                let rm = g.constant(rm);
                let rm = g.expand(rm, &shape)?;
                let inv = g.constant(inv);
                let inv = g.expand(inv, &shape)?;
                let xc = g.sub(x, rm)?;
                g.mul(xc, inv)?
            }
        };
        let gamma = g.param(store, self.gamma);
        let gamma = g.reshape(gamma, &view)?;
        let gamma = g.expand(gamma, &shape)?;
        let scaled = g.mul(xhat, gamma)?;
        let beta = g.param(store, self.beta);
        g.bias_add(scaled, beta)
    }

    fn record_running_stats<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        mean: Var,
        var: Var,
        count: usize,
    ) {
        let m = T::from_f64_lossy(self.momentum);
        let keep = T::one() - m;
        // running variance tracks the unbiased estimate
        let unbias = if count > 1 {
            T::from_usize(count).unwrap() / T::from_usize(count - 1).unwrap()
        } else {
            T::one()
        };
        let blend =
            |old: &Tensor<T>, new: &[T], k: T| Tensor::from_fn(old.shape(), |i| keep * old.data()[i] + m * new[i] * k);
        let new_mean = blend(store.value(self.running_mean), g.value(mean).data(), T::one());
        let new_var = blend(store.value(self.running_var), g.value(var).data(), unbias);
        g.push_stat_update(self.running_mean, new_mean);
        g.push_stat_update(self.running_var, new_var);
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        padding: usize,
    ) -> Self {
        Self {
            weight: store.add_param(
                &format!("{name}.weight"),
                Tensor::zeros(&[out_channels, in_channels, kernel, kernel]),
            ),
            bias: store.add_param(&format!("{name}.bias"), Tensor::zeros(&[out_channels])),
            in_channels,
            out_channels,
            kernel,
            padding,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.conv2d(x, w, Some(b), 1, self.padding)
    }
}

#[derive(Clone, Debug)]
pub struct Conv3dPointwise {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub taps: usize,
}

impl Conv3dPointwise {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        taps: usize,
    ) -> Self {
        Self {
            weight: store.add_param(
                &format!("{name}.weight"),
                Tensor::zeros(&[out_channels, in_channels, taps, 1, 1]),
            ),
            bias: store.add_param(&format!("{name}.bias"), Tensor::zeros(&[out_channels])),
            in_channels,
            out_channels,
            taps,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.conv3d_pointwise(x, w, Some(b))
    }
}

/// Spectral pointwise 3-D convolution → batch norm → ReLU.
#[derive(Clone, Debug)]
pub struct BasicConv3d {
    pub conv: Conv3dPointwise,
    pub bn: BatchNorm,
}

impl BasicConv3d {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        taps: usize,
    ) -> Self {
        Self {
            conv: Conv3dPointwise::new(store, &format!("{name}.conv"), in_channels, out_channels, taps),
            bn: BatchNorm::new(store, &format!("{name}.bn"), out_channels),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, mode: Mode) -> Result<Var> {
        let y = self.conv.forward(g, store, x)?;
        let y = self.bn.forward(g, store, y, mode)?;
        g.relu(y)
    }
}

/// 2-D convolution → batch norm → ReLU.
#[derive(Clone, Debug)]
pub struct BasicConv2d {
    pub conv: Conv2d,
    pub bn: BatchNorm,
}

impl BasicConv2d {
    /// Stride 1 with `(kernel − 1) / 2` zero padding, so odd kernels keep the spatial size.
    pub fn same<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
    ) -> Self {
        Self::new(store, name, in_channels, out_channels, kernel, (kernel - 1) / 2)
    }

    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        padding: usize,
    ) -> Self {
        Self {
            conv: Conv2d::new(
                store,
                &format!("{name}.conv"),
                in_channels,
                out_channels,
                kernel,
                padding,
            ),
            bn: BatchNorm::new(store, &format!("{name}.bn"), out_channels),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, mode: Mode) -> Result<Var> {
        let y = self.conv.forward(g, store, x)?;
        let y = self.bn.forward(g, store, y, mode)?;
        g.relu(y)
    }
}

pub fn avg_pool2d<T: Scalar>(g: &mut Graph<T>, x: Var, kernel: usize, stride: usize, padding: usize) -> Result<Var> {
    g.avg_pool2d(x, kernel, stride, padding)
}

/// Global spatial mean per channel: `B×C×H×W → B×C×1×1`.
pub fn adaptive_avg_pool_1x1<T: Scalar>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    if g.shape(x).len() != 4 {
        return shape_err(format!("adaptive pooling expects B×C×H×W, got {:?}", g.shape(x)));
    }
    g.mean(x, &[2, 3])
}

/// Fully connected layer, `W: out×in`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, in_features: usize, out_features: usize) -> Self {
        Self {
            weight: store.add_param(&format!("{name}.weight"), Tensor::zeros(&[out_features, in_features])),
            bias: store.add_param(&format!("{name}.bias"), Tensor::zeros(&[out_features])),
            in_features,
            out_features,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let s = g.shape(x);
        if s.len() != 2 || s[1] != self.in_features {
            return shape_err(format!("linear layer expects B×{}, got {s:?}", self.in_features));
        }
        let w = g.param(store, self.weight);
        let wt = g.transpose(w)?;
        let y = g.matmul(x, wt)?;
        let b = g.param(store, self.bias);
        g.bias_add(y, b)
    }
}

/// Fully connected layer followed by 1-D batch norm; produces class logits.
#[derive(Clone, Debug)]
pub struct DenseHead {
    pub fc: Linear,
    pub bn: BatchNorm,
}

impl DenseHead {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, features: usize, classes: usize) -> Self {
        Self {
            fc: Linear::new(store, &format!("{name}.fc"), features, classes),
            bn: BatchNorm::new(store, &format!("{name}.bn"), classes),
        }
    }

    /// Normalised logits `BN(Wa + b)`; apply [`super::softmax`] for probabilities.
    pub fn logits<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, a: Var, mode: Mode) -> Result<Var> {
        let z = self.fc.forward(g, store, a)?;
        self.bn.forward(g, store, z, mode)
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, a: Var, mode: Mode) -> Result<Var> {
        let z = self.logits(g, store, a, mode)?;
        super::softmax(g, z)
    }
}
