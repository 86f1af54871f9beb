//! The full lip-reading network.
//!
//! A 3D convolutional stem followed by per-frame 2D residual stages produces
//! one feature vector per frame. An optional word-boundary indicator is
//! appended to every step before the recurrent backend, and the temporal
//! mean of the backend outputs feeds the classifier.
//!
//! ```text
//! video [B,1,T,H,W]
//!   -> conv3d 5x7x7 /(1,2,2) -> BN -> relu -> maxpool 1x3x3 /(1,2,2)
//!   -> [B*T, C, H', W'] -> residual stages (optional SE) -> global avg pool
//!   -> [B, T, D] (+ boundary column) -> GRU stack -> temporal mean -> FC
//! ```

mod checkpoint;

use serde::{Deserialize, Serialize};

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, TensorEntry, CHECKPOINT_MAGIC};

use crate::error::{Error, Result};
use crate::nn::kernels::ConvGeom;
use crate::nn::{BatchNorm, Conv2d, Conv3d, Graph, Linear, LinearInit, Mode, ParamStore, Var};
use crate::recurrent::{GruStack, GruStackConfig, TemporalMeanHead};
use crate::tensor::{Rng, Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FrontendConfig {
    pub stem_kernel: [usize; 3],
    pub stem_stride: [usize; 3],
    pub stem_pad: [usize; 3],
    pub pool_kernel: [usize; 3],
    pub pool_stride: [usize; 3],
    pub pool_pad: [usize; 3],
    /// Channel width of each residual stage. The stem emits `widths[0]` channels.
    pub widths: Vec<usize>,
    /// Residual blocks per stage.
    pub blocks: Vec<usize>,
    pub se_enabled: bool,
    pub se_reduction: usize,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        FrontendConfig::desk()
    }
}

impl FrontendConfig {
    /// Half-width, one-block-per-stage plan used at desk scale.
    pub fn desk() -> Self {
        FrontendConfig {
            stem_kernel: [5, 7, 7],
            stem_stride: [1, 2, 2],
            stem_pad: [2, 3, 3],
            pool_kernel: [1, 3, 3],
            pool_stride: [1, 2, 2],
            pool_pad: [0, 1, 1],
            widths: vec![8, 16, 32, 64],
            blocks: vec![1, 1, 1, 1],
            se_enabled: false,
            se_reduction: 4,
        }
    }

    /// The full ResNet-18 plan.
    pub fn resnet18() -> Self {
        FrontendConfig {
            widths: vec![64, 128, 256, 512],
            blocks: vec![2, 2, 2, 2],
            se_reduction: 16,
            ..FrontendConfig::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let p = "model.frontend";
        if self.widths.is_empty() {
            return Err(Error::config(format!("{p}.widths"), "needs at least one stage"));
        }
        if self.widths.len() != self.blocks.len() {
            return Err(Error::config(
                format!("{p}.blocks"),
                format!("{} stages in widths but {} in blocks", self.widths.len(), self.blocks.len()),
            ));
        }
        if self.widths.contains(&0) || self.blocks.contains(&0) {
            return Err(Error::config(format!("{p}.widths"), "widths and block counts must be positive"));
        }
        if self.stem_stride[0] != 1 {
            return Err(Error::config(format!("{p}.stem_stride"), "temporal stride must be 1"));
        }
        if self.pool_stride[0] != 1 || self.pool_kernel[0] != 1 {
            return Err(Error::config(format!("{p}.pool_kernel"), "pooling must not touch the time axis"));
        }
        if 2 * self.stem_pad[0] + 1 != self.stem_kernel[0] {
            return Err(Error::config(format!("{p}.stem_pad"), "temporal padding must preserve T"));
        }
        if self.se_enabled {
            if self.se_reduction == 0 {
                return Err(Error::config(format!("{p}.se_reduction"), "must be positive"));
            }
            if let Some(w) = self.widths.iter().find(|&&w| w % self.se_reduction != 0) {
                return Err(Error::config(
                    format!("{p}.se_reduction"),
                    format!("{} does not divide stage width {w}", self.se_reduction),
                ));
            }
        }
        Ok(())
    }

    /// Spatial extent after the stem and pool, then after each stage.
    pub fn spatial_plan(&self, h: usize, w: usize) -> Result<Vec<[usize; 2]>> {
        let stem = ConvGeom::new(self.stem_kernel, self.stem_stride, self.stem_pad)?;
        let pool = ConvGeom::new(self.pool_kernel, self.pool_stride, self.pool_pad)?;
        let too_small = |_| Error::invalid(format!("input {h}x{w} is too small for the frontend"));
        let s = stem.out_dims([1, h, w]).map_err(too_small)?;
        let s = pool.out_dims(s).map_err(too_small)?;
        let mut dims = vec![[s[1], s[2]]];
        let mut cur = [s[1], s[2]];
        for stage in 0..self.widths.len() {
            let stride = if stage == 0 { 1 } else { 2 };
            cur = [(cur[0] - 1) / stride + 1, (cur[1] - 1) / stride + 1];
            dims.push(cur);
        }
        Ok(dims)
    }

    pub fn feature_dim(&self) -> usize {
        *self.widths.last().unwrap_or(&0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub frontend: FrontendConfig,
    pub backend: GruStackConfig,
    pub num_classes: usize,
    pub use_word_boundary: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            frontend: FrontendConfig::desk(),
            backend: GruStackConfig::default(),
            num_classes: 10,
            use_word_boundary: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.frontend.validate()?;
        self.backend.validate()?;
        if self.num_classes < 2 {
            return Err(Error::config("model.num_classes", "must be at least 2"));
        }
        Ok(())
    }

    /// Width of each step entering the backend.
    pub fn backend_input_dim(&self) -> usize {
        self.frontend.feature_dim() + usize::from(self.use_word_boundary)
    }
}

/// Per-frame word indicator: ones on `[start, end)`, zeros elsewhere.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundaryMask {
    pub len: usize,
    pub start: usize,
    pub end: usize,
}

impl BoundaryMask {
    pub fn new(len: usize, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > len {
            return Err(Error::invalid(format!("boundary [{start}, {end}) is empty or exceeds {len} frames")));
        }
        Ok(BoundaryMask { len, start, end })
    }

    /// Recovers the interval from a 0/1 vector; rejects other values and split intervals.
    pub fn from_values(values: &[f64]) -> Result<Self> {
        if let Some(v) = values.iter().find(|&&v| v != 0.0 && v != 1.0) {
            return Err(Error::invalid(format!("boundary values must be 0 or 1, found {v}")));
        }
        let start = values.iter().position(|&v| v == 1.0).ok_or_else(|| Error::invalid("boundary has no marked frame"))?;
        let end = values.iter().rposition(|&v| v == 1.0).unwrap() + 1;
        if values[start..end].iter().any(|&v| v != 1.0) {
            return Err(Error::invalid("marked frames must be contiguous"));
        }
        BoundaryMask::new(values.len(), start, end)
    }

    pub fn values(&self) -> Vec<f64> {
        (0..self.len).map(|t| if (self.start..self.end).contains(&t) { 1.0 } else { 0.0 }).collect()
    }

    pub fn to_tensor<S: Scalar>(&self) -> Tensor<S> {
        Tensor::from_f64(&[self.len], &self.values()).expect("mask length is positive")
    }

    pub fn center(&self) -> usize {
        (self.start + self.end) / 2
    }
}

/// Squeeze-and-excitation gate: `x · σ(W₂ relu(W₁ avgpool(x)))` per channel.
#[derive(Clone, Debug)]
pub struct SeBlock {
    pub fc1: Linear,
    pub fc2: Linear,
    pub channels: usize,
}

impl SeBlock {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, channels: usize, reduction: usize, rng: &mut Rng) -> Result<Self> {
        if reduction == 0 || !channels.is_multiple_of(reduction) {
            return Err(Error::invalid(format!("SE reduction {reduction} does not divide {channels} channels")));
        }
        let hidden = channels / reduction;
        Ok(SeBlock {
            fc1: Linear::new(store, &format!("{name}.fc1"), channels, hidden, false, LinearInit::Glorot, rng)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, channels, false, LinearInit::Glorot, rng)?,
            channels,
        })
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        let c = g.value(x).shape().get(1).copied();
        if c != Some(self.channels) {
            return Err(Error::shape("se_block", g.value(x).shape(), &[0, self.channels]));
        }
        let s = g.global_avgpool(x)?;
        let h = self.fc1.forward(g, store, s)?;
        let h = g.relu(h)?;
        let gate = self.fc2.forward(g, store, h)?;
        let gate = g.sigmoid(gate)?;
        g.channel_scale(x, gate)
    }
}

/// SE gating of a plain `[B, C, H, W]` tensor.
pub fn se_block<S: Scalar>(x: &Tensor<S>, store: &ParamStore<S>, se: &SeBlock) -> Result<Tensor<S>> {
    let mut g = Graph::new();
    let v = g.input(x.clone());
    let y = se.forward(&mut g, store, v)?;
    Ok(g.value(y).clone())
}

/// Two 3×3 convolutions with batch norm, optional SE after the second norm,
/// and an identity or 1×1 projection shortcut.
#[derive(Clone, Debug)]
pub struct BasicBlock {
    pub conv1: Conv2d,
    pub bn1: BatchNorm,
    pub conv2: Conv2d,
    pub bn2: BatchNorm,
    pub se: Option<SeBlock>,
    pub shortcut: Option<(Conv2d, BatchNorm)>,
}

impl BasicBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
        se_reduction: Option<usize>,
        rng: &mut Rng,
    ) -> Result<Self> {
        let conv1 = Conv2d::new(store, &format!("{name}.conv1"), cin, cout, [3, 3], [stride; 2], [1, 1], false, rng)?;
        let bn1 = BatchNorm::new(store, &format!("{name}.bn1"), cout)?;
        let conv2 = Conv2d::new(store, &format!("{name}.conv2"), cout, cout, [3, 3], [1, 1], [1, 1], false, rng)?;
        let bn2 = BatchNorm::new(store, &format!("{name}.bn2"), cout)?;
        let se = match se_reduction {
            Some(r) => Some(SeBlock::new(store, &format!("{name}.se"), cout, r, rng)?),
            None => None,
        };
        let shortcut = if stride != 1 || cin != cout {
            Some((
                Conv2d::new(store, &format!("{name}.down"), cin, cout, [1, 1], [stride; 2], [0, 0], false, rng)?,
                BatchNorm::new(store, &format!("{name}.down_bn"), cout)?,
            ))
        } else {
            None
        };
        Ok(BasicBlock { conv1, bn1, conv2, bn2, se, shortcut })
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, store: &mut ParamStore<S>, x: Var, mode: Mode) -> Result<Var> {
        let y = self.conv1.forward(g, store, x)?;
        let y = self.bn1.forward(g, store, y, mode)?;
        let y = g.relu(y)?;
        let y = self.conv2.forward(g, store, y)?;
        let mut y = self.bn2.forward(g, store, y, mode)?;
        if let Some(se) = &self.se {
            y = se.forward(g, store, y)?;
        }
        let skip = match &self.shortcut {
            Some((conv, bn)) => {
                let s = conv.forward(g, store, x)?;
                bn.forward(g, store, s, mode)?
            }
            None => x,
        };
        let sum = g.add(y, skip)?;
        g.relu(sum)
    }
}

/// Stem plus residual stages.
#[derive(Clone, Debug)]
pub struct Frontend {
    pub cfg: FrontendConfig,
    pub stem: Conv3d,
    pub stem_bn: BatchNorm,
    pub stages: Vec<Vec<BasicBlock>>,
}

impl Frontend {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, cfg: &FrontendConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let c0 = cfg.widths[0];
        let stem = Conv3d::new(store, "stem.conv", 1, c0, cfg.stem_kernel, cfg.stem_stride, cfg.stem_pad, false, rng)?;
        let stem_bn = BatchNorm::new(store, "stem.bn", c0)?;
        let se = cfg.se_enabled.then_some(cfg.se_reduction);
        let mut stages = Vec::new();
        let mut cin = c0;
        for (s, (&w, &n)) in cfg.widths.iter().zip(&cfg.blocks).enumerate() {
            let mut blocks = Vec::new();
            for b in 0..n {
                let stride = if s > 0 && b == 0 { 2 } else { 1 };
                blocks.push(BasicBlock::new(store, &format!("stage{s}.block{b}"), cin, w, stride, se, rng)?);
                cin = w;
            }
            stages.push(blocks);
        }
        Ok(Frontend { cfg: cfg.clone(), stem, stem_bn, stages })
    }

    /// `[B, 1, T, H, W]` → `[B, T, D]`.
    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, store: &mut ParamStore<S>, video: Var, mode: Mode) -> Result<Var> {
        let shape = g.value(video).shape().to_vec();
        if shape.len() != 5 || shape[1] != 1 {
            return Err(Error::invalid(format!("frontend expects [B, 1, T, H, W], got {shape:?}")));
        }
        let (b, t) = (shape[0], shape[2]);
        self.cfg.spatial_plan(shape[3], shape[4])?;
        let x = self.stem.forward(g, store, video)?;
        let x = self.stem_bn.forward(g, store, x, mode)?;
        let x = g.relu(x)?;
        let x = g.maxpool3d(x, self.cfg.pool_kernel, self.cfg.pool_stride, self.cfg.pool_pad)?;
        let s = g.value(x).shape().to_vec();
        let x = g.permute(x, &[0, 2, 1, 3, 4])?;
        let mut x = g.reshape(x, &[b * t, s[1], s[3], s[4]])?;
        for block in self.stages.iter().flatten() {
            x = block.forward(g, store, x, mode)?;
        }
        let pooled = g.global_avgpool(x)?;
        g.reshape(pooled, &[b, t, self.cfg.feature_dim()])
    }
}

/// Appends `mask` (`[B, T]`, or `[T]` shared by the batch) as one extra feature per step.
pub fn attach_word_boundary<S: Scalar>(g: &mut Graph<S>, features: Var, mask: Var) -> Result<Var> {
    let fs = g.value(features).shape().to_vec();
    let ms = g.value(mask).shape().to_vec();
    if fs.len() != 3 {
        return Err(Error::invalid(format!("features must be [B, T, D], got {fs:?}")));
    }
    let (b, t) = (fs[0], fs[1]);
    let column = if ms == [b, t] {
        g.reshape(mask, &[b, t, 1])?
    } else if ms == [t] {
        let row = g.reshape(mask, &[t, 1])?;
        let rows = vec![row; b];
        g.stack(&rows, 0)?
    } else {
        return Err(Error::shape("attach_word_boundary", &fs, &ms));
    };
    g.concat(&[features, column], 2)
}

/// Plain-tensor form of [`attach_word_boundary`].
pub fn attach_word_boundary_tensor<S: Scalar>(features: &Tensor<S>, mask: &Tensor<S>) -> Result<Tensor<S>> {
    let mut g = Graph::new();
    let (f, m) = (g.input(features.clone()), g.input(mask.clone()));
    let y = attach_word_boundary(&mut g, f, m)?;
    Ok(g.value(y).clone())
}

/// The assembled network. Parameters live in a separate [`ParamStore`].
#[derive(Clone, Debug)]
pub struct LipModel {
    pub cfg: ModelConfig,
    pub frontend: Frontend,
    pub backend: GruStack,
    pub head: TemporalMeanHead,
}

impl LipModel {
    pub fn new<S: Scalar>(cfg: &ModelConfig, store: &mut ParamStore<S>, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let frontend = Frontend::new(store, &cfg.frontend, rng)?;
        let backend = GruStack::new(store, "gru", cfg.backend_input_dim(), &cfg.backend, rng)?;
        let head = TemporalMeanHead::new(store, "fc", cfg.backend.output_dim(), cfg.num_classes, rng)?;
        Ok(LipModel { cfg: cfg.clone(), frontend, backend, head })
    }

    /// Builds a model and a fresh store for `cfg` from a seed.
    pub fn init<S: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<(Self, ParamStore<S>)> {
        let mut store = ParamStore::new();
        let model = LipModel::new(cfg, &mut store, &mut Rng::new(seed))?;
        Ok((model, store))
    }

    /// `video: [B, 1, T, H, W]`, `boundary: [B, T]` → logits `[B, N]`.
    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &mut ParamStore<S>,
        video: Var,
        boundary: Option<Var>,
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<Var> {
        let feats = self.frontend.forward(g, store, video, mode)?;
        let feats = match (self.cfg.use_word_boundary, boundary) {
            (true, Some(mask)) => attach_word_boundary(g, feats, mask)?,
            (true, None) => return Err(Error::invalid("model uses word boundaries but none were supplied")),
            (false, Some(_)) => return Err(Error::invalid("boundary supplied to a model without word-boundary input")),
            (false, None) => feats,
        };
        let seq = self.backend.forward(g, store, feats, mode, rng)?;
        self.head.forward(g, store, seq)
    }

    /// Convenience wrapper returning the logits tensor.
    pub fn logits<S: Scalar>(
        &self,
        store: &mut ParamStore<S>,
        video: &Tensor<S>,
        boundary: Option<&Tensor<S>>,
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<Tensor<S>> {
        let mut g = Graph::new();
        let v = g.constant(video.clone());
        let b = boundary.map(|b| g.constant(b.clone()));
        let y = self.forward(&mut g, store, v, b, mode, rng)?;
        Ok(g.value(y).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{check_gradients, GradCheckOptions, ParamKind};
    use crate::recurrent::GruInit;
    use crate::tensor::rand_uniform;

    fn micro_cfg(se: bool, boundary: bool) -> ModelConfig {
        ModelConfig {
            frontend: FrontendConfig {
                widths: vec![2, 2],
                blocks: vec![1, 1],
                se_enabled: se,
                se_reduction: 2,
                ..FrontendConfig::desk()
            },
            backend: GruStackConfig {
                layers: 2,
                hidden: 3,
                bidirectional: true,
                inter_layer_dropout: 0.2,
                init: GruInit::Scaled,
            },
            num_classes: 3,
            use_word_boundary: boundary,
        }
    }

    fn desk(se: bool, boundary: bool) -> ModelConfig {
        ModelConfig {
            frontend: FrontendConfig { se_enabled: se, ..FrontendConfig::desk() },
            use_word_boundary: boundary,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn desk_parameter_counts_are_frozen() {
        // Frontend 81_816 with SE (79_096 without), GRU 198_144 (+384 with
        // the boundary column), head 1_290.
        let count = |cfg: &ModelConfig| LipModel::init::<f32>(cfg, 0).unwrap().1.num_scalars();
        assert_eq!(count(&desk(false, false)), 278_530);
        assert_eq!(count(&desk(true, true)), 281_634);
        assert_eq!(count(&desk(true, true)), count(&desk(true, true)));
    }

    #[test]
    fn desk_spatial_plan() {
        let plan = FrontendConfig::desk().spatial_plan(88, 88).unwrap();
        assert_eq!(plan, vec![[22, 22], [22, 22], [11, 11], [6, 6], [3, 3]]);
        assert_eq!(FrontendConfig::desk().feature_dim(), 64);
        assert_eq!(FrontendConfig::desk().spatial_plan(1, 1).unwrap().last(), Some(&[1, 1]));
        let unpadded = FrontendConfig { stem_pad: [2, 0, 0], ..FrontendConfig::desk() };
        assert!(unpadded.spatial_plan(4, 4).is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = desk(true, false);
        c.frontend.se_reduction = 16;
        assert!(matches!(c.validate(), Err(Error::Config { .. })));
        let mut c = desk(false, false);
        c.frontend.blocks.pop();
        assert!(c.validate().is_err());
        let c = ModelConfig { num_classes: 1, ..desk(false, false) };
        assert!(c.validate().is_err());
        assert!(FrontendConfig::resnet18().validate().is_ok());
        let c = ModelConfig { frontend: FrontendConfig { se_enabled: true, ..FrontendConfig::resnet18() }, ..desk(false, false) };
        assert!(c.validate().is_ok());
    }

    #[test]
    fn frontend_shapes_and_errors() {
        let cfg = micro_cfg(true, false);
        let (model, mut store) = LipModel::init::<f32>(&cfg, 1).unwrap();
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[2, 1, 5, 12, 12]).unwrap());
        let y = model.frontend.forward(&mut g, &mut store, x, Mode::Eval).unwrap();
        assert_eq!(g.value(y).shape(), &[2, 5, 2]);
        let bad = g.input(Tensor::zeros(&[2, 3, 5, 12, 12]).unwrap());
        assert!(model.frontend.forward(&mut g, &mut store, bad, Mode::Eval).is_err());
    }

    #[test]
    fn se_zero_weights_halve_input() {
        let mut store = ParamStore::<f64>::new();
        let se = SeBlock::new(&mut store, "se", 4, 2, &mut Rng::new(0)).unwrap();
        for p in store.params_mut() {
            p.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let x: Tensor<f64> = rand_uniform(&mut Rng::new(1), &[2, 4, 3, 3], -2.0, 2.0).unwrap();
        let y = se_block(&x, &store, &se).unwrap();
        assert!(y.sub(&x.scale(0.5)).unwrap().max_abs() < 1e-15);
        assert!(SeBlock::new(&mut store, "bad", 6, 4, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn se_hand_evaluated_gate() {
        let mut store = ParamStore::<f64>::new();
        let se = SeBlock::new(&mut store, "se", 2, 2, &mut Rng::new(0)).unwrap();
        store.get_mut(se.fc1.w).value = Tensor::from_f64(&[1, 2], &[0.5, 0.25]).unwrap();
        store.get_mut(se.fc2.w).value = Tensor::from_f64(&[2, 1], &[1.0, -2.0]).unwrap();
        let mut data = vec![1.0; 4];
        data.extend([3.0; 4]);
        let x = Tensor::from_f64(&[1, 2, 2, 2], &data).unwrap();
        let y = se_block(&x, &store, &se).unwrap();
        // s = (1, 3); relu(0.5 + 0.75) = 1.25; gates σ(1.25), σ(−2.5).
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        assert!((y.at(&[0, 0, 0, 0]).unwrap() - sig(1.25)).abs() < 1e-15);
        assert!((y.at(&[0, 1, 1, 1]).unwrap() - 3.0 * sig(-2.5)).abs() < 1e-15);
    }

    #[test]
    fn se_scales_equal_channels_equally() {
        let mut store = ParamStore::<f64>::new();
        let se = SeBlock::new(&mut store, "se", 4, 2, &mut Rng::new(3)).unwrap();
        // Symmetric weights: every row of fc1 is constant, every entry of fc2 equal.
        store.get_mut(se.fc1.w).value = Tensor::from_f64(&[2, 4], &[0.3, 0.3, 0.3, 0.3, -0.1, -0.1, -0.1, -0.1]).unwrap();
        store.get_mut(se.fc2.w).value = Tensor::full(&[4, 2], 0.7).unwrap();
        let plane: Vec<f64> = (0..9).map(|i| i as f64 / 9.0).collect();
        let data: Vec<f64> = (0..4).flat_map(|_| plane.clone()).collect();
        let x = Tensor::from_f64(&[1, 4, 3, 3], &data).unwrap();
        let y = se_block(&x, &store, &se).unwrap();
        let ratio = |c: usize| y.at(&[0, c, 2, 2]).unwrap() / x.at(&[0, c, 2, 2]).unwrap();
        for c in 1..4 {
            assert!((ratio(c) - ratio(0)).abs() < 1e-15);
        }
        assert!(ratio(0) > 0.0 && ratio(0) < 1.0);
    }

    #[test]
    fn boundary_attachment() {
        let f = Tensor::from_f64(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let m = Tensor::from_f64(&[1, 2], &[0.0, 1.0]).unwrap();
        let y: Tensor<f64> = attach_word_boundary_tensor(&f, &m).unwrap();
        assert_eq!(y.to_f64_vec(), vec![1.0, 2.0, 0.0, 3.0, 4.0, 1.0]);
        let ones = Tensor::ones(&[3]).unwrap();
        let f3: Tensor<f64> = Tensor::zeros(&[2, 3, 4]).unwrap();
        let y = attach_word_boundary_tensor(&f3, &ones).unwrap();
        assert_eq!(y.shape(), &[2, 3, 5]);
        assert!((0..2).all(|b| (0..3).all(|t| y.at(&[b, t, 4]).unwrap() == 1.0)));
        assert!(attach_word_boundary_tensor(&f3, &Tensor::ones(&[4]).unwrap()).is_err());
    }

    #[test]
    fn boundary_mask_contract() {
        let m = BoundaryMask::new(6, 2, 4).unwrap();
        assert_eq!(m.values(), vec![0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
        assert_eq!(BoundaryMask::from_values(&m.values()).unwrap(), m);
        assert!(BoundaryMask::new(6, 4, 4).is_err());
        assert!(BoundaryMask::new(6, 2, 7).is_err());
        assert!(BoundaryMask::from_values(&[1.0, 0.0, 1.0]).is_err());
        assert!(BoundaryMask::from_values(&[0.5, 1.0]).is_err());
    }

    #[test]
    fn logits_shape_determinism_and_boundary_contract() {
        let cfg = micro_cfg(true, true);
        let (model, mut store) = LipModel::init::<f32>(&cfg, 2).unwrap();
        let x: Tensor<f32> = rand_uniform(&mut Rng::new(5), &[3, 1, 4, 12, 12], 0.0, 1.0).unwrap();
        let mask = Tensor::from_f64(&[3, 4], &[0., 1., 1., 0., 1., 1., 0., 0., 0., 0., 1., 1.]).unwrap();
        let a = model.logits(&mut store, &x, Some(&mask), Mode::Eval, &mut Rng::new(0)).unwrap();
        let b = model.logits(&mut store, &x, Some(&mask), Mode::Eval, &mut Rng::new(99)).unwrap();
        assert_eq!(a.shape(), &[3, 3]);
        assert_eq!(a, b);
        assert!(model.logits(&mut store, &x, None, Mode::Eval, &mut Rng::new(0)).is_err());
        let (plain, mut ps) = LipModel::init::<f32>(&micro_cfg(false, false), 2).unwrap();
        assert!(plain.logits(&mut ps, &x, Some(&mask), Mode::Eval, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn parameter_kinds_cover_norms_and_biases() {
        let (_, store) = LipModel::init::<f32>(&micro_cfg(true, false), 0).unwrap();
        let kinds: Vec<ParamKind> = store.params().iter().map(|p| p.kind).collect();
        assert!(kinds.contains(&ParamKind::NormScale));
        assert!(kinds.contains(&ParamKind::Bias));
        let fc = store.find("fc.bias").unwrap();
        assert!(store.get(fc).value.max_abs() <= 1.0);
    }

    #[test]
    fn gradcheck_se_block() {
        let mut rng = Rng::new(30);
        for (b, c, h, r) in [(1, 2, 2, 1), (2, 4, 3, 2), (2, 4, 2, 4), (3, 6, 2, 3), (1, 8, 3, 4)] {
            let mut store = ParamStore::new();
            let se = SeBlock::new(&mut store, "se", c, r, &mut rng).unwrap();
            let x = rand_uniform(&mut rng, &[b, c, h, h], -1.0, 1.0).unwrap();
            let report = check_gradients(&[x], &mut store, &GradCheckOptions::default(), |g, st, v| se.forward(g, st, v[0])).unwrap();
            assert!(report.max_rel_error <= 1e-5, "{report:?}");
        }
    }

    #[test]
    fn gradcheck_micro_model() {
        let cfg = micro_cfg(true, true);
        let (model, mut store) = LipModel::init::<f64>(&cfg, 4).unwrap();
        let x = rand_uniform(&mut Rng::new(6), &[2, 1, 4, 12, 12], 0.0, 1.0).unwrap();
        let mask = Tensor::from_f64(&[2, 4], &[0., 1., 1., 0., 1., 1., 1., 0.]).unwrap();
        let opts = GradCheckOptions { max_entries: Some(12), ..Default::default() };
        let report = check_gradients(&[x, mask], &mut store, &opts, |g, st, v| {
            model.forward(g, st, v[0], Some(v[1]), Mode::Train, &mut Rng::new(8))
        })
        .unwrap();
        assert!(report.max_rel_error <= 1e-4, "{report:?}");
    }
}
