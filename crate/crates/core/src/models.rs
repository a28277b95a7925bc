//! The two TPO networks: band reduction, an inception-style feature extractor and the
//! dense classification head.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::nn::{self, adaptive_avg_pool_1x1, BasicConv2d, BasicConv3d, DenseHead, Mode};
use crate::tensor::kernels::window_out;
use crate::tensor::{Graph, ParamStore, Scalar, Var};

pub const DEFAULT_BRANCH_CHANNELS: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    TpoCnn1,
    TpoCnn2,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::TpoCnn1 => "tpo_cnn1",
            Variant::TpoCnn2 => "tpo_cnn2",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tpo_cnn1" => Ok(Variant::TpoCnn1),
            "tpo_cnn2" => Ok(Variant::TpoCnn2),
            other => Err(Error::Config(format!("unknown model variant {other:?}"))),
        }
    }
}

/// Declarative description of a network instance.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub variant: Variant,
    /// Spectral kernel sizes of the three band-reduction stages.
    pub p: usize,
    pub q: usize,
    pub r: usize,
    pub input_bands: usize,
    pub patch_size: usize,
    /// 9 for the full TPO stack, 1 for the centred-window ablation.
    pub views: usize,
    pub branch_channels: usize,
    pub classes: usize,
}

impl ModelSpec {
    /// University of Pavia band-reduction kernels (8, 16, 32) over 103 bands, 9 classes.
    pub fn pavia(variant: Variant, patch_size: usize) -> Self {
        Self {
            variant,
            p: 8,
            q: 16,
            r: 32,
            input_bands: 103,
            patch_size,
            views: 9,
            branch_channels: DEFAULT_BRANCH_CHANNELS,
            classes: 9,
        }
    }

    /// Indian Pines (32, 57, 64) over the 200 bands left after water-band removal.
    pub fn indian_pines(variant: Variant, patch_size: usize, classes: usize) -> Self {
        Self {
            p: 32,
            q: 57,
            r: 64,
            input_bands: 200,
            classes,
            ..Self::pavia(variant, patch_size)
        }
    }

    /// Salinas (32, 61, 64); the band count depends on which bands the caller discards.
    pub fn salinas(variant: Variant, patch_size: usize, bands: usize) -> Self {
        Self {
            p: 32,
            q: 61,
            r: 64,
            input_bands: bands,
            classes: 16,
            ..Self::pavia(variant, patch_size)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.p == 0 || self.q == 0 || self.r == 0 {
            return Err(Error::Config("spectral kernels p, q, r must be >= 1".into()));
        }
        if self.input_bands + 3 < self.p + self.q + self.r + 1 {
            return Err(Error::Config(format!(
                "kernels ({}, {}, {}) leave no bands out of {}",
                self.p, self.q, self.r, self.input_bands
            )));
        }
        if self.patch_size.is_multiple_of(2) || self.patch_size == 0 {
            return Err(Error::Config(format!("patch size {} must be odd", self.patch_size)));
        }
        if self.views != 1 && self.views != 9 {
            return Err(Error::Config(format!("views must be 1 or 9, got {}", self.views)));
        }
        if self.branch_channels == 0 {
            return Err(Error::Config("branch_channels must be >= 1".into()));
        }
        if self.classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        Ok(())
    }

    /// Spectral extent entering and leaving each band-reduction stage.
    pub fn spectral_chain(&self) -> [usize; 4] {
        let d1 = self.input_bands + 1 - self.p;
        let d2 = d1 + 1 - self.q;
        let d3 = d2 + 1 - self.r;
        [self.input_bands, d1, d2, d3]
    }

    pub fn reduced_bands(&self) -> usize {
        self.spectral_chain()[3]
    }

    /// Channels seen by the 2-D feature extractor: views × reduced bands.
    pub fn feature_channels(&self) -> usize {
        self.views * self.reduced_bands()
    }

    pub fn feature_len(&self) -> usize {
        match self.variant {
            Variant::TpoCnn1 => 4 * self.branch_channels,
            Variant::TpoCnn2 => 6 * self.branch_channels,
        }
    }

    pub fn input_shape(&self, batch: usize) -> [usize; 5] {
        [batch, self.views, self.input_bands, self.patch_size, self.patch_size]
    }
}

/// Three spectral-only BasicConv3d stages; the view axis is the channel axis throughout.
#[derive(Clone, Debug)]
pub struct BandReductionBlock {
    pub stages: [BasicConv3d; 3],
}

impl BandReductionBlock {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, spec: &ModelSpec) -> Self {
        let v = spec.views;
        Self {
            stages: [
                BasicConv3d::new(store, "band.c1", v, v, spec.p),
                BasicConv3d::new(store, "band.c2", v, v, spec.q),
                BasicConv3d::new(store, "band.c3", v, v, spec.r),
            ],
        }
    }

    /// Returns the `B×V×D_r×k×k` output of the last stage.
    pub fn stages_forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        mode: Mode,
    ) -> Result<Vec<Var>> {
        let mut outs = Vec::with_capacity(3);
        let mut h = x;
        for stage in &self.stages {
            h = stage.forward(g, store, h, mode)?;
            outs.push(h);
        }
        Ok(outs)
    }

    /// `B×V×D×k×k → B×(V·D_r)×k×k`, views outermost in the merged channel axis.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, mode: Mode) -> Result<Var> {
        let last = *self.stages_forward(g, store, x, mode)?.last().unwrap();
        let s = g.shape(last).to_vec();
        g.reshape(last, &[s[0], s[1] * s[2], s[3], s[4]])
    }
}

/// One inception branch: optional 3×3/stride-1/pad-1 average pool, then BasicConv2d layers.
#[derive(Clone, Debug)]
pub struct Branch {
    pub pool_first: bool,
    pub convs: Vec<BasicConv2d>,
}

impl Branch {
    fn build<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        width: usize,
        pool_first: bool,
        kernels: &[usize],
    ) -> Self {
        let mut c_in = in_channels;
        let convs = kernels
            .iter()
            .enumerate()
            .map(|(i, &k)| {
                let layer = BasicConv2d::same(store, &format!("{name}.c{i}"), c_in, width, k);
                c_in = width;
                layer
            })
            .collect();
        Self { pool_first, convs }
    }

    /// Spatial extent after the branch for a `size×size` input.
    fn output_size(&self, size: usize) -> Option<usize> {
        let mut s = size;
        if self.pool_first {
            s = window_out(s, 3, 1, 1)?;
        }
        for c in &self.convs {
            s = window_out(s, c.conv.kernel, c.conv.padding, 1)?;
        }
        Some(s)
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, mode: Mode) -> Result<Var> {
        let mut h = x;
        if self.pool_first {
            h = nn::avg_pool2d(g, h, 3, 1, 1)?;
        }
        for c in &self.convs {
            h = c.forward(g, store, h, mode)?;
        }
        Ok(h)
    }
}

fn check_concat(branches: &[&Branch], size: usize) -> Result<()> {
    for (i, b) in branches.iter().enumerate() {
        if b.output_size(size) != Some(size) {
            return shape_err(format!(
                "inception branch {i} maps {size}×{size} to {:?}; concatenation needs {size}×{size}",
                b.output_size(size)
            ));
        }
    }
    Ok(())
}

/// Concatenates branch outputs on channels and pools to a `B×C` vector.
fn concat_pool<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    branches: &[&Branch],
    x: Var,
    mode: Mode,
) -> Result<Var> {
    let outs = branches
        .iter()
        .map(|b| b.forward(g, store, x, mode))
        .collect::<Result<Vec<_>>>()?;
    let cat = g.concat(&outs, 1)?;
    let pooled = adaptive_avg_pool_1x1(g, cat)?;
    let s = g.shape(pooled).to_vec();
    g.reshape(pooled, &[s[0], s[1]])
}

/// Four parallel branches {1×1, 1×1→3×3→3×3, 1×1→5×5, pool→1×1}, one concat, one pool.
#[derive(Clone, Debug)]
pub struct FeatureExtractor1 {
    pub branches: [Branch; 4],
}

impl FeatureExtractor1 {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, spec: &ModelSpec) -> Result<Self> {
        let (c, w) = (spec.feature_channels(), spec.branch_channels);
        let fe = Self {
            branches: [
                Branch::build(store, "fe.b0", c, w, false, &[1]),
                Branch::build(store, "fe.b1", c, w, false, &[1, 3, 3]),
                Branch::build(store, "fe.b2", c, w, false, &[1, 5]),
                Branch::build(store, "fe.b3", c, w, true, &[1]),
            ],
        };
        check_concat(&fe.branches.iter().collect::<Vec<_>>(), spec.patch_size)?;
        Ok(fe)
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, mode: Mode) -> Result<Var> {
        concat_pool(g, store, &self.branches.iter().collect::<Vec<_>>(), x, mode)
    }
}

/// Three two-branch inception layers over the same input, each concatenated and pooled
/// separately; the three pooled vectors are concatenated.
#[derive(Clone, Debug)]
pub struct FeatureExtractor2 {
    pub layers: [[Branch; 2]; 3],
}

impl FeatureExtractor2 {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, spec: &ModelSpec) -> Result<Self> {
        let (c, w) = (spec.feature_channels(), spec.branch_channels);
        let fe = Self {
            layers: [
                [
                    Branch::build(store, "fe.l0.b0", c, w, false, &[1]),
                    Branch::build(store, "fe.l0.b1", c, w, false, &[1, 3, 3]),
                ],
                [
                    Branch::build(store, "fe.l1.b0", c, w, false, &[1]),
                    Branch::build(store, "fe.l1.b1", c, w, false, &[1, 5]),
                ],
                [
                    Branch::build(store, "fe.l2.b0", c, w, false, &[1]),
                    Branch::build(store, "fe.l2.b1", c, w, true, &[1]),
                ],
            ],
        };
        for layer in &fe.layers {
            check_concat(&layer.iter().collect::<Vec<_>>(), spec.patch_size)?;
        }
        Ok(fe)
    }

    /// Per-layer pooled vectors, each `B×(2·branch_channels)`.
    pub fn layer_outputs<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        mode: Mode,
    ) -> Result<Vec<Var>> {
        self.layers
            .iter()
            .map(|layer| concat_pool(g, store, &layer.iter().collect::<Vec<_>>(), x, mode))
            .collect()
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, mode: Mode) -> Result<Var> {
        let pooled = self.layer_outputs(g, store, x, mode)?;
        g.concat(&pooled, 1)
    }
}

#[derive(Clone, Debug)]
pub enum FeatureExtractor {
    Cnn1(FeatureExtractor1),
    Cnn2(FeatureExtractor2),
}

impl FeatureExtractor {
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, mode: Mode) -> Result<Var> {
        match self {
            FeatureExtractor::Cnn1(fe) => fe.forward(g, store, x, mode),
            FeatureExtractor::Cnn2(fe) => fe.forward(g, store, x, mode),
        }
    }
}

/// A complete network. Parameters live in a [`ParamStore`] owned by the caller.
#[derive(Clone, Debug)]
pub struct TpoNet {
    pub spec: ModelSpec,
    pub band: BandReductionBlock,
    pub features: FeatureExtractor,
    pub head: DenseHead,
}

impl TpoNet {
    /// Registers all parameters in `store` (zero-valued; see [`nn::init_params`]).
    pub fn new<T: Scalar>(spec: ModelSpec, store: &mut ParamStore<T>) -> Result<Self> {
        spec.validate()?;
        let band = BandReductionBlock::new(store, &spec);
        let features = match spec.variant {
            Variant::TpoCnn1 => FeatureExtractor::Cnn1(FeatureExtractor1::new(store, &spec)?),
            Variant::TpoCnn2 => FeatureExtractor::Cnn2(FeatureExtractor2::new(store, &spec)?),
        };
        let head = DenseHead::new(store, "head", spec.feature_len(), spec.classes);
        Ok(Self {
            spec,
            band,
            features,
            head,
        })
    }

    /// Builds the network with freshly initialised parameters.
    pub fn build<T: Scalar>(spec: ModelSpec, seed: u64) -> Result<(Self, ParamStore<T>)> {
        let mut store = ParamStore::new();
        let net = Self::new(spec, &mut store)?;
        nn::init_params(&mut store, seed);
        Ok((net, store))
    }

    fn check_input<T: Scalar>(&self, g: &Graph<T>, x: Var) -> Result<()> {
        let s = g.shape(x);
        let want = self.spec.input_shape(s.first().copied().unwrap_or(0));
        if s != want {
            return shape_err(format!("model expects input {want:?}, got {s:?}"));
        }
        Ok(())
    }

    /// Normalised class logits for a `B×V×D×k×k` batch.
    pub fn logits<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, mode: Mode) -> Result<Var> {
        self.check_input(g, x)?;
        let reduced = self.band.forward(g, store, x, mode)?;
        let feats = self.features.forward(g, store, reduced, mode)?;
        self.head.logits(g, store, feats, mode)
    }

    /// Class probabilities, `B×C` with rows summing to one.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, mode: Mode) -> Result<Var> {
        let z = self.logits(g, store, x, mode)?;
        nn::softmax(g, z)
    }

    /// Shapes after each band-reduction stage and after the view/band merge, for batch 1.
    pub fn shape_trace<T: Scalar>(&self, store: &ParamStore<T>) -> Result<Vec<Vec<usize>>> {
        let mut g = Graph::new();
        let x = g.constant(crate::tensor::Tensor::zeros(&self.spec.input_shape(1)));
        let mut trace = vec![g.shape(x)[1..].to_vec()];
        for v in self.band.stages_forward(&mut g, store, x, Mode::Eval)? {
            trace.push(g.shape(v)[1..].to_vec());
        }
        let merged = self.band.forward(&mut g, store, x, Mode::Eval)?;
        trace.push(g.shape(merged)[1..].to_vec());
        Ok(trace)
    }
}
