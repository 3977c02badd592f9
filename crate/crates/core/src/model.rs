//! The SAPI network, the recurrent baseline, ablations and checkpoints.
//!
//! Pipeline of the full model for one sample:
//!
//! ```text
//! rasters (m, H, W, 2) -> pooled 3-D conv -> 2-D conv -> per-step FC -> T1 (m, 3)
//! T2 = [T1 | S] (m, 5) -> LSTM -> 1-D conv -> max pool -> 1-D conv -> T3 (L3, 2)
//! T4 = W1^T S + W2^T T3 (h, 2) -> GRU over h steps -> FC -> FC -> head (n, 2)
//! ```
//!
//! Positions enter divided by `position_scale` and predictions leave
//! multiplied by it.

use crate::dataset::Sample;
use crate::nn::{
    init_uniform, maxpool1d_backward, maxpool1d_forward, nest, relu_, relu_backward_, BoxMeans, Conv1d, Conv2d, Gru, GruCache, Linear,
    Lstm, LstmCache, Parameterized, PooledConv3d,
};
use crate::raster::EnvRaster;
use crate::scalar::Scalar;
use ndarray::{s, Array2, Array3, Array4, ArrayView2, ArrayViewD, ArrayViewMutD, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;
use std::sync::Arc;
use thiserror::Error;

/// Features per history step produced by the scene encoder.
pub const STEP_FEATURES: usize = 3;
/// Channels of the last sequence-encoder convolution.
pub const SEQUENCE_OUT_CHANNELS: usize = 2;
pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("shape mismatch in {what}: expected {expected:?}, found {found:?}")]
    ShapeMismatch { what: String, expected: Vec<usize>, found: Vec<usize> },
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("no checkpoint at {0}")]
    MissingCheckpoint(String),
    #[error("checkpoint schema version {found} is not supported (expected {CHECKPOINT_SCHEMA_VERSION})")]
    SchemaVersionMismatch { found: u32 },
    #[error("checkpoint is inconsistent: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn shape_err(what: &str, expected: &[usize], found: &[usize]) -> ModelError {
    ModelError::ShapeMismatch { what: what.into(), expected: expected.to_vec(), found: found.to_vec() }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    pub conv3d_channels: usize,
    /// (time, height, width), all odd.
    pub conv3d_kernel: [usize; 3],
    /// Spatial average-pool window and stride.
    pub pool: usize,
    pub conv2d_channels: usize,
    pub conv2d_kernel: usize,
    /// Hidden width of the per-step fully connected pair (the second emits 3 features).
    pub fc_width: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceConfig {
    pub lstm_hidden: usize,
    pub conv_channels: usize,
    pub conv_kernel: usize,
    /// Max-pool window and stride along time.
    pub pool: usize,
    /// Kernel of the final 2-channel convolution.
    pub out_kernel: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    pub gru_hidden: usize,
    pub fc_widths: [usize; 2],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineConfig {
    pub lstm_hidden: usize,
    pub fc_width: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub m: usize,
    pub n: usize,
    pub raster_height: usize,
    pub raster_width: usize,
    pub scene: SceneConfig,
    pub sequence: SequenceConfig,
    /// Width `h` of the refiner output.
    pub refiner_width: usize,
    pub decoder: DecoderConfig,
    pub baseline: BaselineConfig,
    /// Meters per unit of network position input and output.
    pub position_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            m: 12,
            n: 15,
            raster_height: 200,
            raster_width: 200,
            scene: SceneConfig { conv3d_channels: 8, conv3d_kernel: [3, 5, 5], pool: 4, conv2d_channels: 16, conv2d_kernel: 3, fc_width: 128 },
            sequence: SequenceConfig { lstm_hidden: 64, conv_channels: 32, conv_kernel: 3, pool: 2, out_kernel: 3 },
            refiner_width: 32,
            decoder: DecoderConfig { gru_hidden: 128, fc_widths: [128, 64] },
            baseline: BaselineConfig { lstm_hidden: 1024, fc_width: 256 },
            position_scale: 10.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: &str| Err(ModelError::InvalidConfig(msg.into()));
        let positive = [
            ("m", self.m),
            ("n", self.n),
            ("raster_height", self.raster_height),
            ("raster_width", self.raster_width),
            ("scene.conv3d_channels", self.scene.conv3d_channels),
            ("scene.pool", self.scene.pool),
            ("scene.conv2d_channels", self.scene.conv2d_channels),
            ("scene.fc_width", self.scene.fc_width),
            ("sequence.lstm_hidden", self.sequence.lstm_hidden),
            ("sequence.conv_channels", self.sequence.conv_channels),
            ("sequence.pool", self.sequence.pool),
            ("refiner_width", self.refiner_width),
            ("decoder.gru_hidden", self.decoder.gru_hidden),
            ("decoder.fc_widths[0]", self.decoder.fc_widths[0]),
            ("decoder.fc_widths[1]", self.decoder.fc_widths[1]),
            ("baseline.lstm_hidden", self.baseline.lstm_hidden),
            ("baseline.fc_width", self.baseline.fc_width),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::InvalidConfig(format!("{name} must be at least 1")));
        }
        let kernels = [
            self.scene.conv3d_kernel[0],
            self.scene.conv3d_kernel[1],
            self.scene.conv3d_kernel[2],
            self.scene.conv2d_kernel,
            self.sequence.conv_kernel,
            self.sequence.out_kernel,
        ];
        if kernels.iter().any(|k| k % 2 == 0) {
            return bad("convolution kernels must be odd");
        }
        if self.raster_height < self.scene.pool || self.raster_width < self.scene.pool {
            return bad("raster is smaller than the scene pooling window");
        }
        if self.m < self.sequence.pool {
            return bad("history is shorter than the sequence pooling window");
        }
        if !(self.position_scale > 0.0 && self.position_scale.is_finite()) {
            return bad("position_scale must be positive");
        }
        Ok(())
    }

    pub fn pooled_hw(&self) -> (usize, usize) {
        (self.raster_height / self.scene.pool, self.raster_width / self.scene.pool)
    }

    /// Length of the sequence-encoder output.
    pub fn l3(&self) -> usize {
        self.m / self.sequence.pool
    }

    /// Flattened per-step width entering the scene encoder's first FC layer.
    pub fn scene_flat(&self) -> usize {
        let (h, w) = self.pooled_hw();
        h * w * self.scene.conv2d_channels
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    None,
    NoLra,
    NoTraffic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Sapi,
    SapiNoLra,
    SapiNoTraffic,
    Lstm,
}

impl ModelKind {
    /// Comparison-table order.
    pub const ALL: [ModelKind; 4] = [ModelKind::Lstm, ModelKind::SapiNoLra, ModelKind::SapiNoTraffic, ModelKind::Sapi];

    pub fn ablation(self) -> Ablation {
        match self {
            ModelKind::SapiNoLra => Ablation::NoLra,
            ModelKind::SapiNoTraffic => Ablation::NoTraffic,
            _ => Ablation::None,
        }
    }

    pub fn uses_rasters(self) -> bool {
        self != ModelKind::Lstm
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Sapi => "sapi",
            ModelKind::SapiNoLra => "sapi_no_lra",
            ModelKind::SapiNoTraffic => "sapi_no_traffic",
            ModelKind::Lstm => "lstm",
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ModelKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        ModelKind::ALL.into_iter().find(|k| k.as_str() == s).ok_or_else(|| format!("unknown model kind `{s}`"))
    }
}

/// A batch of network inputs: per-sample raster histories and `N x m x 2` positions in meters.
#[derive(Debug, Clone)]
pub struct ModelInput<'a> {
    pub rasters: Vec<&'a [Arc<EnvRaster>]>,
    pub history: Array3<f32>,
}

impl<'a> ModelInput<'a> {
    pub fn from_samples(samples: &[&'a Sample]) -> Self {
        ModelInput { rasters: samples.iter().map(|s| s.history_rasters.as_slice()).collect(), history: crate::dataset::stack_history(samples) }
    }

    pub fn len(&self) -> usize {
        self.history.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Stacks one raster history into `m x H x W x 2` values in `[0, 1]`, zeroing
/// the channel an ablation removes.
pub fn raster_tensor<T: Scalar>(rasters: &[Arc<EnvRaster>], ablation: Ablation) -> Array4<T> {
    let (h, w) = rasters.first().map_or((0, 0), |r| r.shape());
    let mut out = Array4::zeros((rasters.len(), h, w, 2));
    let scale = T::one() / T::of(255.0);
    for (t, r) in rasters.iter().enumerate() {
        if ablation != Ablation::NoLra {
            out.slice_mut(s![t, .., .., 0]).zip_mut_with(&r.lra_channel, |o, &v| *o = T::of(v as f64) * scale);
        }
        if ablation != Ablation::NoTraffic {
            out.slice_mut(s![t, .., .., 1]).zip_mut_with(&r.traffic_channel, |o, &v| *o = T::of(v as f64) * scale);
        }
    }
    out
}

/// `W1^T S + W2^T T3` for one sample.
pub fn refine<T: Scalar>(s: &ArrayView2<T>, t3: &ArrayView2<T>, w1: &ArrayView2<T>, w2: &ArrayView2<T>) -> Result<Array2<T>, ModelError> {
    if s.nrows() != w1.nrows() || s.ncols() != t3.ncols() {
        return Err(shape_err("refine S", &[w1.nrows(), t3.ncols()], s.shape()));
    }
    if t3.nrows() != w2.nrows() || w1.ncols() != w2.ncols() {
        return Err(shape_err("refine T3/W2", &[t3.nrows(), w1.ncols()], w2.shape()));
    }
    Ok(w1.t().dot(s) + w2.t().dot(t3))
}

fn scaled_history<T: Scalar>(history: &Array3<f32>, scale: f64) -> Array3<T> {
    let inv = 1.0 / scale;
    history.mapv(|v| T::of(v as f64 * inv))
}

/// The full raster-plus-trajectory network.
#[derive(Debug, Clone, PartialEq)]
pub struct SapiNet<T> {
    pub config: ModelConfig,
    pub conv3d: PooledConv3d<T>,
    pub conv2d: Conv2d<T>,
    pub scene_fc1: Linear<T>,
    pub scene_fc2: Linear<T>,
    pub lstm: Lstm<T>,
    pub seq_conv: Conv1d<T>,
    pub seq_out: Conv1d<T>,
    /// `m x h`
    pub w1: Array2<T>,
    /// `L3 x h`
    pub w2: Array2<T>,
    pub gru: Gru<T>,
    pub dec_fc1: Linear<T>,
    pub dec_fc2: Linear<T>,
    pub head: Linear<T>,
}

struct SceneCache<T> {
    means: BoxMeans<T>,
    /// Rectified pooled 3-D conv output, `(m * H' * W') x C3`.
    a3: Array2<T>,
}

/// Intermediate values kept by [`SapiNet::forward_train`] for the backward pass.
pub struct SapiCache<T> {
    scene: Vec<SceneCache<T>>,
    fc_in: Array2<T>,
    h1: Array2<T>,
    s_scaled: Array3<T>,
    lstm: LstmCache<T>,
    hs: Array3<T>,
    aa: Array3<T>,
    pool_arg: Array3<usize>,
    pa: Array3<T>,
    t3: Array3<T>,
    gru: GruCache<T>,
    hg: Array2<T>,
    d1: Array2<T>,
    d2: Array2<T>,
}

fn active<T: Scalar, D: ndarray::Dimension>(a: &ndarray::Array<T, D>) -> impl Iterator<Item = usize> + '_ {
    a.iter().map(|v| usize::from(*v > T::zero()))
}

impl<T: Scalar> SapiCache<T> {
    /// Which rectifiers fired and which max-pool inputs won. Parameters giving
    /// equal patterns lie on the same smooth piece of the network.
    pub fn activation_pattern(&self) -> Vec<usize> {
        let scene = self.scene.iter().flat_map(|sc| active(&sc.a3));
        let dense = active(&self.fc_in).chain(active(&self.h1)).chain(active(&self.aa));
        scene.chain(dense).chain(self.pool_arg.iter().copied()).chain(active(&self.d1)).chain(active(&self.d2)).collect()
    }
}

impl<T: Scalar> SapiNet<T> {
    pub fn zeros(config: &ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let c = config;
        let c3 = c.scene.conv3d_channels;
        Ok(SapiNet {
            config: *c,
            conv3d: PooledConv3d::zeros(2, c3, c.scene.conv3d_kernel, c.scene.pool),
            conv2d: Conv2d::zeros(c3, c.scene.conv2d_channels, c.scene.conv2d_kernel),
            scene_fc1: Linear::zeros(c.scene_flat(), c.scene.fc_width),
            scene_fc2: Linear::zeros(c.scene.fc_width, STEP_FEATURES),
            lstm: Lstm::zeros(STEP_FEATURES + 2, c.sequence.lstm_hidden),
            seq_conv: Conv1d::zeros(c.sequence.lstm_hidden, c.sequence.conv_channels, c.sequence.conv_kernel),
            seq_out: Conv1d::zeros(c.sequence.conv_channels, SEQUENCE_OUT_CHANNELS, c.sequence.out_kernel),
            w1: Array2::zeros((c.m, c.refiner_width)),
            w2: Array2::zeros((c.l3(), c.refiner_width)),
            gru: Gru::zeros(2, c.decoder.gru_hidden),
            dec_fc1: Linear::zeros(c.decoder.gru_hidden, c.decoder.fc_widths[0]),
            dec_fc2: Linear::zeros(c.decoder.fc_widths[0], c.decoder.fc_widths[1]),
            head: Linear::zeros(c.decoder.fc_widths[1], 2 * c.n),
        })
    }

    /// Uniform `+-1/sqrt(fan_in)` initialisation from `seed`.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        let mut net = Self::zeros(config)?;
        let c = *config;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let refiner_fan = (c.m + c.l3()) as f64;
        for (name, mut p) in net.params_mut() {
            let fan = match name.as_str() {
                "scene.conv3d.w" | "scene.conv3d.b" => (c.scene.conv3d_kernel.iter().product::<usize>() * 2) as f64,
                "scene.conv2d.w" | "scene.conv2d.b" => (c.scene.conv2d_kernel.pow(2) * c.scene.conv3d_channels) as f64,
                "scene.fc1.w" | "scene.fc1.b" => c.scene_flat() as f64,
                "scene.fc2.w" | "scene.fc2.b" => c.scene.fc_width as f64,
                n if n.starts_with("sequence.lstm") => c.sequence.lstm_hidden as f64,
                "sequence.conv.w" | "sequence.conv.b" => (c.sequence.conv_kernel * c.sequence.lstm_hidden) as f64,
                "sequence.out.w" | "sequence.out.b" => (c.sequence.out_kernel * c.sequence.conv_channels) as f64,
                "refiner.w1" | "refiner.w2" => refiner_fan,
                n if n.starts_with("decoder.gru") => c.decoder.gru_hidden as f64,
                "decoder.fc1.w" | "decoder.fc1.b" => c.decoder.gru_hidden as f64,
                "decoder.fc2.w" | "decoder.fc2.b" => c.decoder.fc_widths[0] as f64,
                _ => c.decoder.fc_widths[1] as f64,
            };
            init_uniform(&mut p, 1.0 / fan.sqrt(), &mut rng);
        }
        Ok(net)
    }

    fn check_input(&self, input: &ModelInput<'_>) -> Result<(), ModelError> {
        let c = &self.config;
        let n = input.len();
        if input.history.dim() != (n, c.m, 2) {
            let d = input.history.dim();
            return Err(shape_err("history", &[n, c.m, 2], &[d.0, d.1, d.2]));
        }
        if input.rasters.len() != n {
            return Err(shape_err("raster batch", &[n], &[input.rasters.len()]));
        }
        for r in &input.rasters {
            if r.len() != c.m {
                return Err(shape_err("raster history", &[c.m], &[r.len()]));
            }
            for e in r.iter() {
                if e.shape() != (c.raster_height, c.raster_width) {
                    return Err(shape_err("raster", &[c.raster_height, c.raster_width], &[e.shape().0, e.shape().1]));
                }
            }
        }
        Ok(())
    }

    /// Runs conv stages for one sample; returns the FC input rows (`m x flat`).
    fn scene_conv(&self, x: &Array4<T>) -> (Array2<T>, SceneCache<T>) {
        let c = &self.config;
        let (hp, wp) = c.pooled_hw();
        let means = self.conv3d.box_means(&x.view());
        let mut a3 = self.conv3d.forward(&means);
        relu_(&mut a3);
        let a3v = a3.view().into_shape_with_order((c.m, hp, wp, c.scene.conv3d_channels)).expect("contiguous");
        let mut a2 = self.conv2d.forward(&a3v);
        relu_(&mut a2);
        let rows = a2.into_shape_with_order((c.m, c.scene_flat())).expect("contiguous");
        (rows, SceneCache { means, a3 })
    }

    /// Scene encoder for one sample given `m x H x W x 2` inputs already in `[0, 1]`.
    pub fn scene_encode(&self, x: &Array4<T>) -> Result<Array2<T>, ModelError> {
        let c = &self.config;
        let want = (c.m, c.raster_height, c.raster_width, 2);
        if x.dim() != want {
            let d = x.dim();
            return Err(shape_err("scene input", &[want.0, want.1, want.2, want.3], &[d.0, d.1, d.2, d.3]));
        }
        let (rows, _) = self.scene_conv(x);
        let mut h1 = self.scene_fc1.forward(&rows.view());
        relu_(&mut h1);
        Ok(self.scene_fc2.forward(&h1.view()))
    }

    /// Sequence encoder over `N x m x 5`, returning `N x L3 x 2`.
    fn sequence_batch(&self, t2: &Array3<T>) -> (Array3<T>, LstmCache<T>, Array3<T>, Array3<T>, Array3<usize>, Array3<T>) {
        let (hs, lc) = self.lstm.forward(t2);
        let mut aa = self.seq_conv.forward(&hs.view());
        relu_(&mut aa);
        let (pa, arg) = maxpool1d_forward(&aa, self.config.sequence.pool);
        let t3 = self.seq_out.forward(&pa.view());
        (t3, lc, hs, aa, arg, pa)
    }

    /// Sequence encoder for one `m x 5` input.
    pub fn sequence_encode(&self, t2: &Array2<T>) -> Result<Array2<T>, ModelError> {
        let m = self.config.m;
        if t2.dim() != (m, STEP_FEATURES + 2) {
            return Err(shape_err("T2", &[m, STEP_FEATURES + 2], t2.shape()));
        }
        let batch = t2.clone().insert_axis(Axis(0));
        Ok(self.sequence_batch(&batch).0.index_axis_move(Axis(0), 0))
    }

    /// Refiner with this network's weights; `s` is in network units.
    pub fn refine(&self, s: &Array2<T>, t3: &Array2<T>) -> Result<Array2<T>, ModelError> {
        refine(&s.view(), &t3.view(), &self.w1.view(), &self.w2.view())
    }

    fn decode_batch(&self, t4: &Array3<T>) -> (Array3<T>, GruCache<T>, Array2<T>, Array2<T>, Array2<T>) {
        let (hg, gc) = self.gru.forward(t4);
        let mut d1 = self.dec_fc1.forward(&hg.view());
        relu_(&mut d1);
        let mut d2 = self.dec_fc2.forward(&d1.view());
        relu_(&mut d2);
        let out = self.head.forward(&d2.view()) * T::of(self.config.position_scale);
        let n = t4.dim().0;
        (out.into_shape_with_order((n, self.config.n, 2)).expect("contiguous"), gc, hg, d1, d2)
    }

    /// Decoder for one `h x 2` refined tensor; returns `n x 2` offsets in meters.
    pub fn decode(&self, t4: &Array2<T>) -> Result<Array2<T>, ModelError> {
        let h = self.config.refiner_width;
        if t4.dim() != (h, 2) {
            return Err(shape_err("T4", &[h, 2], t4.shape()));
        }
        Ok(self.decode_batch(&t4.clone().insert_axis(Axis(0))).0.index_axis_move(Axis(0), 0))
    }

    pub fn forward(&self, input: &ModelInput<'_>, ablation: Ablation) -> Result<Array3<T>, ModelError> {
        Ok(self.forward_train(input, ablation)?.0)
    }

    /// Forward pass keeping everything the backward pass needs. Returns `N x n x 2` meters.
    pub fn forward_train(&self, input: &ModelInput<'_>, ablation: Ablation) -> Result<(Array3<T>, SapiCache<T>), ModelError> {
        self.check_input(input)?;
        let c = &self.config;
        let (n, m) = (input.len(), c.m);
        let mut fc_in = Array2::zeros((n * m, c.scene_flat()));
        let mut scene = Vec::with_capacity(n);
        for (i, r) in input.rasters.iter().enumerate() {
            let x = raster_tensor::<T>(r, ablation);
            let (rows, sc) = self.scene_conv(&x);
            fc_in.slice_mut(s![i * m..(i + 1) * m, ..]).assign(&rows);
            scene.push(sc);
        }
        let mut h1 = self.scene_fc1.forward(&fc_in.view());
        relu_(&mut h1);
        let t1 = self.scene_fc2.forward(&h1.view());

        let s_scaled: Array3<T> = scaled_history(&input.history, c.position_scale);
        let mut t2 = Array3::zeros((n, m, STEP_FEATURES + 2));
        t2.slice_mut(s![.., .., ..STEP_FEATURES]).assign(&t1.view().into_shape_with_order((n, m, STEP_FEATURES)).expect("contiguous"));
        t2.slice_mut(s![.., .., STEP_FEATURES..]).assign(&s_scaled);

        let (t3, lstm, hs, aa, pool_arg, pa) = self.sequence_batch(&t2);
        let mut t4 = Array3::zeros((n, c.refiner_width, 2));
        for i in 0..n {
            let r = self.w1.t().dot(&s_scaled.index_axis(Axis(0), i)) + self.w2.t().dot(&t3.index_axis(Axis(0), i));
            t4.index_axis_mut(Axis(0), i).assign(&r);
        }
        let (out, gru, hg, d1, d2) = self.decode_batch(&t4);
        Ok((out, SapiCache { scene, fc_in, h1, s_scaled, lstm, hs, aa, pool_arg, pa, t3, gru, hg, d1, d2 }))
    }

    /// Accumulates `dL/dθ` into `g` given `dL/dprediction` (`N x n x 2`, meters).
    pub fn backward(&self, cache: &SapiCache<T>, dout: &Array3<T>, g: &mut SapiNet<T>) {
        let c = &self.config;
        let (n, m) = (dout.dim().0, c.m);
        let (hp, wp) = c.pooled_hw();

        let dhead = dout.to_shape((n, 2 * c.n)).expect("reshape").to_owned() * T::of(c.position_scale);
        let mut dd2 = self.head.backward(&cache.d2.view(), &dhead.view(), &mut g.head);
        relu_backward_(&mut dd2, &cache.d2);
        let mut dd1 = self.dec_fc2.backward(&cache.d1.view(), &dd2.view(), &mut g.dec_fc2);
        relu_backward_(&mut dd1, &cache.d1);
        let dhg = self.dec_fc1.backward(&cache.hg.view(), &dd1.view(), &mut g.dec_fc1);
        let dt4 = self.gru.backward(&cache.gru, &dhg, &mut g.gru);

        let mut dt3 = Array3::zeros(cache.t3.dim());
        for i in 0..n {
            let d = dt4.index_axis(Axis(0), i);
            g.w1 += &cache.s_scaled.index_axis(Axis(0), i).dot(&d.t());
            g.w2 += &cache.t3.index_axis(Axis(0), i).dot(&d.t());
            dt3.index_axis_mut(Axis(0), i).assign(&self.w2.dot(&d));
        }

        let dpa = self.seq_out.backward(&cache.pa.view(), &dt3.view(), &mut g.seq_out);
        let mut daa = maxpool1d_backward(&dpa, &cache.pool_arg, m);
        relu_backward_(&mut daa, &cache.aa);
        let dhs = self.seq_conv.backward(&cache.hs.view(), &daa.view(), &mut g.seq_conv);
        let dt2 = self.lstm.backward(&cache.lstm, &dhs, &mut g.lstm);

        let dt1 = dt2.slice(s![.., .., ..STEP_FEATURES]).to_owned().into_shape_with_order((n * m, STEP_FEATURES)).expect("contiguous");
        let mut dh1 = self.scene_fc2.backward(&cache.h1.view(), &dt1.view(), &mut g.scene_fc2);
        relu_backward_(&mut dh1, &cache.h1);
        let dfc_in = self.scene_fc1.backward(&cache.fc_in.view(), &dh1.view(), &mut g.scene_fc1);

        let c3 = c.scene.conv3d_channels;
        for (i, sc) in cache.scene.iter().enumerate() {
            let rows = s![i * m..(i + 1) * m, ..];
            let mut dz2 = dfc_in.slice(rows).to_owned();
            relu_backward_(&mut dz2, &cache.fc_in.slice(rows).to_owned());
            let dz2 = dz2.into_shape_with_order((m * hp * wp, c.scene.conv2d_channels)).expect("contiguous");
            let a3v = sc.a3.view().into_shape_with_order((m, hp, wp, c3)).expect("contiguous");
            let da3 = self.conv2d.backward(&a3v, &dz2.view(), &mut g.conv2d);
            let mut dz3 = da3.into_shape_with_order((m * hp * wp, c3)).expect("contiguous");
            relu_backward_(&mut dz3, &sc.a3);
            self.conv3d.backward(&sc.means, &dz3.view(), &mut g.conv3d);
        }
    }
}

impl<T: Scalar> Parameterized<T> for SapiNet<T> {
    fn params(&self) -> Vec<(String, ArrayViewD<'_, T>)> {
        let mut v = nest("scene.conv3d", self.conv3d.params());
        v.extend(nest("scene.conv2d", self.conv2d.params()));
        v.extend(nest("scene.fc1", self.scene_fc1.params()));
        v.extend(nest("scene.fc2", self.scene_fc2.params()));
        v.extend(nest("sequence.lstm", self.lstm.params()));
        v.extend(nest("sequence.conv", self.seq_conv.params()));
        v.extend(nest("sequence.out", self.seq_out.params()));
        v.push(("refiner.w1".into(), self.w1.view().into_dyn()));
        v.push(("refiner.w2".into(), self.w2.view().into_dyn()));
        v.extend(nest("decoder.gru", self.gru.params()));
        v.extend(nest("decoder.fc1", self.dec_fc1.params()));
        v.extend(nest("decoder.fc2", self.dec_fc2.params()));
        v.extend(nest("decoder.head", self.head.params()));
        v
    }

    fn params_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, T>)> {
        let mut v = nest("scene.conv3d", self.conv3d.params_mut());
        v.extend(nest("scene.conv2d", self.conv2d.params_mut()));
        v.extend(nest("scene.fc1", self.scene_fc1.params_mut()));
        v.extend(nest("scene.fc2", self.scene_fc2.params_mut()));
        v.extend(nest("sequence.lstm", self.lstm.params_mut()));
        v.extend(nest("sequence.conv", self.seq_conv.params_mut()));
        v.extend(nest("sequence.out", self.seq_out.params_mut()));
        v.push(("refiner.w1".into(), self.w1.view_mut().into_dyn()));
        v.push(("refiner.w2".into(), self.w2.view_mut().into_dyn()));
        v.extend(nest("decoder.gru", self.gru.params_mut()));
        v.extend(nest("decoder.fc1", self.dec_fc1.params_mut()));
        v.extend(nest("decoder.fc2", self.dec_fc2.params_mut()));
        v.extend(nest("decoder.head", self.head.params_mut()));
        v
    }
}

/// Recurrent baseline over raw history positions.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmBaseline<T> {
    pub config: ModelConfig,
    pub lstm: Lstm<T>,
    pub fc: Linear<T>,
    pub head: Linear<T>,
}

pub struct BaselineCache<T> {
    lstm: LstmCache<T>,
    last: Array2<T>,
    h: Array2<T>,
}

impl<T: Scalar> BaselineCache<T> {
    pub fn activation_pattern(&self) -> Vec<usize> {
        active(&self.h).collect()
    }
}

impl<T: Scalar> LstmBaseline<T> {
    pub fn zeros(config: &ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let b = config.baseline;
        Ok(LstmBaseline {
            config: *config,
            lstm: Lstm::zeros(2, b.lstm_hidden),
            fc: Linear::zeros(b.lstm_hidden, b.fc_width),
            head: Linear::zeros(b.fc_width, 2 * config.n),
        })
    }

    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        let mut net = Self::zeros(config)?;
        let b = config.baseline;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (name, mut p) in net.params_mut() {
            let fan = if name.starts_with("lstm") || name.starts_with("fc.") { b.lstm_hidden } else { b.fc_width };
            init_uniform(&mut p, 1.0 / (fan as f64).sqrt(), &mut rng);
        }
        Ok(net)
    }

    pub fn forward(&self, history: &Array3<f32>) -> Result<Array3<T>, ModelError> {
        Ok(self.forward_train(history)?.0)
    }

    pub fn forward_train(&self, history: &Array3<f32>) -> Result<(Array3<T>, BaselineCache<T>), ModelError> {
        let c = &self.config;
        let (n, m, k) = history.dim();
        if m != c.m || k != 2 {
            return Err(shape_err("history", &[n, c.m, 2], &[n, m, k]));
        }
        let x: Array3<T> = scaled_history(history, c.position_scale);
        let (hs, lstm) = self.lstm.forward(&x);
        let last = hs.index_axis(Axis(1), m - 1).to_owned();
        let mut h = self.fc.forward(&last.view());
        relu_(&mut h);
        let out = self.head.forward(&h.view()) * T::of(c.position_scale);
        Ok((out.into_shape_with_order((n, c.n, 2)).expect("contiguous"), BaselineCache { lstm, last, h }))
    }

    pub fn backward(&self, cache: &BaselineCache<T>, dout: &Array3<T>, g: &mut LstmBaseline<T>) {
        let c = &self.config;
        let n = dout.dim().0;
        let dhead = dout.to_shape((n, 2 * c.n)).expect("reshape").to_owned() * T::of(c.position_scale);
        let mut dh = self.head.backward(&cache.h.view(), &dhead.view(), &mut g.head);
        relu_backward_(&mut dh, &cache.h);
        let dlast = self.fc.backward(&cache.last.view(), &dh.view(), &mut g.fc);
        let mut dhs = Array3::zeros((n, c.m, self.lstm.hidden()));
        dhs.index_axis_mut(Axis(1), c.m - 1).assign(&dlast);
        self.lstm.backward(&cache.lstm, &dhs, &mut g.lstm);
    }
}

impl<T: Scalar> Parameterized<T> for LstmBaseline<T> {
    fn params(&self) -> Vec<(String, ArrayViewD<'_, T>)> {
        let mut v = nest("lstm", self.lstm.params());
        v.extend(nest("fc", self.fc.params()));
        v.extend(nest("head", self.head.params()));
        v
    }
    fn params_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, T>)> {
        let mut v = nest("lstm", self.lstm.params_mut());
        v.extend(nest("fc", self.fc.params_mut()));
        v.extend(nest("head", self.head.params_mut()));
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Network<T> {
    Sapi(SapiNet<T>),
    Lstm(LstmBaseline<T>),
}

/// A network of a given kind plus the seed it was initialised from.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub kind: ModelKind,
    pub seed: u64,
    pub net: Network<T>,
}

pub enum ModelCache<T> {
    Sapi(SapiCache<T>),
    Lstm(BaselineCache<T>),
}

impl<T: Scalar> ModelCache<T> {
    pub fn activation_pattern(&self) -> Vec<usize> {
        match self {
            ModelCache::Sapi(c) => c.activation_pattern(),
            ModelCache::Lstm(c) => c.activation_pattern(),
        }
    }
}

impl<T: Scalar> Model<T> {
    pub fn init(kind: ModelKind, config: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        let net = match kind {
            ModelKind::Lstm => Network::Lstm(LstmBaseline::init(config, seed)?),
            _ => Network::Sapi(SapiNet::init(config, seed)?),
        };
        Ok(Model { kind, seed, net })
    }

    pub fn zeros(kind: ModelKind, config: &ModelConfig) -> Result<Self, ModelError> {
        let net = match kind {
            ModelKind::Lstm => Network::Lstm(LstmBaseline::zeros(config)?),
            _ => Network::Sapi(SapiNet::zeros(config)?),
        };
        Ok(Model { kind, seed: 0, net })
    }

    pub fn config(&self) -> &ModelConfig {
        match &self.net {
            Network::Sapi(n) => &n.config,
            Network::Lstm(n) => &n.config,
        }
    }

    /// Same shapes, all zeros; used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.zero_();
        z
    }

    pub fn forward(&self, input: &ModelInput<'_>) -> Result<Array3<T>, ModelError> {
        Ok(self.forward_train(input)?.0)
    }

    pub fn forward_train(&self, input: &ModelInput<'_>) -> Result<(Array3<T>, ModelCache<T>), ModelError> {
        match &self.net {
            Network::Sapi(n) => n.forward_train(input, self.kind.ablation()).map(|(o, c)| (o, ModelCache::Sapi(c))),
            Network::Lstm(n) => n.forward_train(&input.history).map(|(o, c)| (o, ModelCache::Lstm(c))),
        }
    }

    pub fn backward(&self, cache: &ModelCache<T>, dout: &Array3<T>, grads: &mut Model<T>) {
        match (&self.net, cache, &mut grads.net) {
            (Network::Sapi(n), ModelCache::Sapi(c), Network::Sapi(g)) => n.backward(c, dout, g),
            (Network::Lstm(n), ModelCache::Lstm(c), Network::Lstm(g)) => n.backward(c, dout, g),
            _ => panic!("gradient accumulator does not match the model kind"),
        }
    }

    /// Writes `manifest.json` plus one little-endian f32 blob per parameter into `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), ModelError> {
        std::fs::create_dir_all(dir.join("params"))?;
        let mut entries = Vec::new();
        for (name, p) in self.params() {
            let file = format!("params/{name}.f32");
            let mut out = std::io::BufWriter::new(std::fs::File::create(dir.join(&file))?);
            for v in p.iter() {
                out.write_all(&(v.to_f64_lossy() as f32).to_le_bytes())?;
            }
            out.flush()?;
            entries.push(ParamEntry { name, shape: p.shape().to_vec(), file });
        }
        let manifest = CheckpointManifest {
            schema_version: CHECKPOINT_SCHEMA_VERSION,
            kind: self.kind,
            seed: self.seed,
            config: *self.config(),
            params: entries,
        };
        std::fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, ModelError> {
        let path = dir.join("manifest.json");
        if !path.is_file() {
            return Err(ModelError::MissingCheckpoint(dir.display().to_string()));
        }
        let probe: serde_json::Value = serde_json::from_slice(&std::fs::read(&path)?)?;
        let found = probe.get("schema_version").and_then(serde_json::Value::as_u64).unwrap_or(0) as u32;
        if found != CHECKPOINT_SCHEMA_VERSION {
            return Err(ModelError::SchemaVersionMismatch { found });
        }
        let manifest: CheckpointManifest = serde_json::from_value(probe)?;
        let mut model = Model::zeros(manifest.kind, &manifest.config)?;
        model.seed = manifest.seed;
        let by_name: std::collections::HashMap<&str, &ParamEntry> = manifest.params.iter().map(|e| (e.name.as_str(), e)).collect();
        if by_name.len() != manifest.params.len() || manifest.params.len() != model.params().len() {
            return Err(ModelError::Corrupt("parameter list does not match the model".into()));
        }
        for (name, mut p) in model.params_mut() {
            let e = by_name.get(name.as_str()).ok_or_else(|| ModelError::Corrupt(format!("missing parameter {name}")))?;
            if e.shape != p.shape() {
                return Err(shape_err(&name, p.shape(), &e.shape));
            }
            let bytes = std::fs::read(dir.join(&e.file))?;
            if bytes.len() != 4 * p.len() {
                return Err(ModelError::Corrupt(format!("blob size of {name}")));
            }
            for (v, c) in p.iter_mut().zip(bytes.chunks_exact(4)) {
                *v = T::of(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64);
            }
        }
        Ok(model)
    }
}

impl<T: Scalar> Parameterized<T> for Model<T> {
    fn params(&self) -> Vec<(String, ArrayViewD<'_, T>)> {
        match &self.net {
            Network::Sapi(n) => n.params(),
            Network::Lstm(n) => n.params(),
        }
    }
    fn params_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, T>)> {
        match &mut self.net {
            Network::Sapi(n) => n.params_mut(),
            Network::Lstm(n) => n.params_mut(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    file: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointManifest {
    schema_version: u32,
    kind: ModelKind,
    seed: u64,
    config: ModelConfig,
    params: Vec<ParamEntry>,
}
