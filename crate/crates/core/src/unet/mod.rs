//! Five-level (by default) 3D U-Net: strided-convolution encoder,
//! transposed-convolution decoder, concatenated skip connections.
//!
//! Every convolution inside a block is followed by instance normalization and
//! leaky ReLU. Those convolutions carry no bias because the normalization
//! removes any per-channel constant; the up-sampling and output convolutions
//! do carry one.

mod checkpoint;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ConvGeometry, Real, Tape, Tensor, Var};

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub levels: usize,
    pub base_channels: usize,
    pub channel_growth: usize,
    pub max_channels: usize,
    /// Cubic kernel extent of the block convolutions (odd).
    pub kernel: usize,
    pub convs_per_block: usize,
    pub negative_slope: f64,
    pub norm_eps: f64,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            num_classes: 5,
            levels: 5,
            base_channels: 8,
            channel_growth: 2,
            max_channels: 320,
            kernel: 3,
            convs_per_block: 2,
            negative_slope: 0.01,
            norm_eps: 1e-5,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(format!("unet: {m}")));
        if self.levels < 2 {
            return fail("levels must be >= 2");
        }
        if self.base_channels < 1 || self.in_channels < 1 {
            return fail("channel counts must be >= 1");
        }
        if self.num_classes < 2 {
            return fail("num_classes must be >= 2");
        }
        if self.channel_growth < 1 || self.max_channels < self.base_channels {
            return fail("channel_growth must be >= 1 and max_channels >= base_channels");
        }
        if self.kernel % 2 == 0 {
            return fail("kernel must be odd");
        }
        if self.convs_per_block < 1 {
            return fail("convs_per_block must be >= 1");
        }
        if !(self.norm_eps > 0.0) || !self.negative_slope.is_finite() {
            return fail("norm_eps must be > 0 and negative_slope finite");
        }
        Ok(())
    }

    /// Feature channels at resolution level `level` (0 = full resolution).
    pub fn channels(&self, level: usize) -> usize {
        let mut c = self.base_channels;
        for _ in 0..level {
            c = c.saturating_mul(self.channel_growth);
        }
        c.min(self.max_channels)
    }

    /// Spatial extents must be multiples of this.
    pub fn divisor(&self) -> usize {
        1 << (self.levels - 1)
    }

    pub fn check_extents(&self, extents: [usize; 3]) -> Result<()> {
        let divisor = self.divisor();
        if extents.iter().any(|&e| e == 0 || e % divisor != 0) {
            return Err(Error::Indivisible { extents, divisor });
        }
        Ok(())
    }

    /// Shapes of all parameters in construction order.
    pub fn parameter_layout(&self) -> Vec<ParamSpec> {
        let k = self.kernel;
        let mut specs = Vec::new();
        let block = |specs: &mut Vec<ParamSpec>, prefix: &str, cin: usize, cout: usize| {
            for j in 0..self.convs_per_block {
                let cin = if j == 0 { cin } else { cout };
                specs.push(ParamSpec::new(format!("{prefix}.conv{j}.weight"), vec![cout, cin, k, k, k], ParamKind::Weight));
                specs.push(ParamSpec::new(format!("{prefix}.norm{j}.gamma"), vec![cout], ParamKind::NormScale));
                specs.push(ParamSpec::new(format!("{prefix}.norm{j}.beta"), vec![cout], ParamKind::NormShift));
            }
        };
        for level in 0..self.levels {
            let cin = if level == 0 { self.in_channels } else { self.channels(level - 1) };
            block(&mut specs, &format!("enc{level}"), cin, self.channels(level));
        }
        for level in (0..self.levels - 1).rev() {
            let (below, here) = (self.channels(level + 1), self.channels(level));
            specs.push(ParamSpec::new(format!("dec{level}.up.weight"), vec![below, here, 2, 2, 2], ParamKind::UpWeight));
            specs.push(ParamSpec::new(format!("dec{level}.up.bias"), vec![here], ParamKind::Bias { fan_in: below }));
            block(&mut specs, &format!("dec{level}"), 2 * here, here);
        }
        let c0 = self.channels(0);
        specs.push(ParamSpec::new("head.weight".into(), vec![self.num_classes, c0, 1, 1, 1], ParamKind::Weight));
        specs.push(ParamSpec::new("head.bias".into(), vec![self.num_classes], ParamKind::Bias { fan_in: c0 }));
        specs
    }

    pub fn parameter_count(&self) -> usize {
        self.parameter_layout().iter().map(|s| s.shape.iter().product::<usize>()).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    UpWeight,
    Bias { fan_in: usize },
    NormScale,
    NormShift,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
}

impl ParamSpec {
    fn new(name: String, shape: Vec<usize>, kind: ParamKind) -> Self {
        Self { name, shape, kind }
    }

    /// Fan-in-scaled uniform initial values (Kaiming bound for leaky ReLU on
    /// weights, `1/sqrt(fan_in)` on biases); norm scale 1 and shift 0.
    fn init(&self, slope: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let n: usize = self.shape.iter().product();
        let uniform = |bound: f64, rng: &mut ChaCha8Rng| (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
        match self.kind {
            ParamKind::Weight => {
                let fan_in: usize = self.shape[1..].iter().product();
                uniform((6.0 / ((1.0 + slope * slope) * fan_in as f64)).sqrt(), rng)
            }
            ParamKind::UpWeight => uniform((6.0 / ((1.0 + slope * slope) * self.shape[0] as f64)).sqrt(), rng),
            ParamKind::Bias { fan_in } => uniform(1.0 / (fan_in as f64).sqrt(), rng),
            ParamKind::NormScale => vec![1.0; n],
            ParamKind::NormShift => vec![0.0; n],
        }
    }
}

/// A U-Net's configuration and parameters, in construction order.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T: Real> {
    config: UNetConfig,
    params: Vec<Tensor<T>>,
}

/// Tape handles of a model's parameters for one forward pass.
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Parameter handles already on a tape, in construction order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

struct Cursor<'a> {
    vars: std::slice::Iter<'a, Var>,
}

impl Cursor<'_> {
    fn next(&mut self) -> Var {
        *self.vars.next().expect("parameter layout and forward pass agree")
    }
}

impl<T: Real> Model<T> {
    /// Build a network with deterministic initialization from `seed`.
    pub fn build(config: UNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = config
            .parameter_layout()
            .iter()
            .map(|spec| {
                let values = spec.init(config.negative_slope, &mut rng);
                Tensor::from_f64(&spec.shape, &values).map(|t| t.with_requires_grad(true))
            })
            .collect::<Result<_, _>>()?;
        Ok(Self { config, params })
    }

    pub fn from_parts(config: UNetConfig, params: Vec<Tensor<T>>) -> Result<Self> {
        config.validate()?;
        let layout = config.parameter_layout();
        if layout.len() != params.len() || layout.iter().zip(&params).any(|(s, p)| s.shape != p.shape()) {
            return Err(Error::Checkpoint("parameter shapes do not match configuration".into()));
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn zero_grads(&mut self) {
        self.params.iter_mut().for_each(Tensor::zero_grad);
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
        }
    }

    /// Record every parameter on the tape.
    pub fn bind(&self, tape: &mut Tape<T>) -> Bound {
        Bound {
            vars: self.params.iter().map(|p| tape.param(p)).collect(),
        }
    }

    /// Copy tape gradients of bound parameters into each parameter's `grad`.
    pub fn collect_grads(&mut self, tape: &Tape<T>, bound: &Bound) {
        for (p, &v) in self.params.iter_mut().zip(&bound.vars) {
            tape.accumulate_into(v, p);
        }
    }

    /// Logits `[batch, classes, D, H, W]` for an input `[batch, in_channels, D, H, W]`.
    pub fn forward_on(&self, tape: &mut Tape<T>, bound: &Bound, input: Var) -> Result<Var> {
        let shape = tape.shape(input).to_vec();
        if shape.len() != 5 || shape[1] != self.config.in_channels {
            return Err(Error::Shape(format!(
                "expected input [batch, {}, D, H, W], got {shape:?}",
                self.config.in_channels
            )));
        }
        self.config.check_extents([shape[2], shape[3], shape[4]])?;
        let cfg = &self.config;
        let slope = T::lit(cfg.negative_slope);
        let eps = T::lit(cfg.norm_eps);
        let pad = cfg.kernel / 2;
        let mut cursor = Cursor { vars: bound.vars.iter() };

        let block = |tape: &mut Tape<T>, cursor: &mut Cursor, mut h: Var, first_stride: usize| -> Result<Var> {
            for j in 0..cfg.convs_per_block {
                let stride = if j == 0 { first_stride } else { 1 };
                let (w, gamma, beta) = (cursor.next(), cursor.next(), cursor.next());
                h = tape.conv3d(h, w, None, ConvGeometry::uniform(stride, pad))?;
                h = tape.instance_norm(h, gamma, beta, eps)?;
                h = tape.leaky_relu(h, slope);
            }
            Ok(h)
        };

        let mut skips = Vec::with_capacity(cfg.levels);
        let mut h = input;
        for level in 0..cfg.levels {
            h = block(tape, &mut cursor, h, if level == 0 { 1 } else { 2 })?;
            skips.push(h);
        }
        skips.pop();
        for _ in (0..cfg.levels - 1).rev() {
            let (w, b) = (cursor.next(), cursor.next());
            let up = tape.conv_transpose3d(h, w, Some(b), ConvGeometry::uniform(2, 0))?;
            let skip = skips.pop().expect("one skip per decoder level");
            let merged = tape.concat_channels(skip, up)?;
            h = block(tape, &mut cursor, merged, 1)?;
        }
        let (w, b) = (cursor.next(), cursor.next());
        Ok(tape.conv3d(h, w, Some(b), ConvGeometry::default())?)
    }

    /// Logits for an input tensor, without keeping a tape around.
    pub fn forward(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::leaf_grads_only();
        let bound = self.bind_frozen(&mut tape);
        let x = tape.constant(input.clone());
        let out = self.forward_on(&mut tape, &bound, x)?;
        Ok(tape.value(out).clone().with_requires_grad(false))
    }

    /// Channel-softmax probabilities for an input tensor.
    pub fn predict_proba(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::leaf_grads_only();
        let bound = self.bind_frozen(&mut tape);
        let x = tape.constant(input.clone());
        let logits = self.forward_on(&mut tape, &bound, x)?;
        let p = tape.softmax_channels(logits)?;
        Ok(tape.value(p).clone().with_requires_grad(false))
    }

    fn bind_frozen(&self, tape: &mut Tape<T>) -> Bound {
        Bound {
            vars: self
                .params
                .iter()
                .map(|p| tape.constant(Tensor::new(p.shape(), p.data().to_vec()).expect("valid")))
                .collect(),
        }
    }

    /// Order-sensitive checksum of all parameters (f64 sum of `value · (index+1)`).
    pub fn checksum(&self) -> f64 {
        let mut acc = 0.0;
        let mut i = 0usize;
        for p in &self.params {
            for v in p.data() {
                i += 1;
                acc += v.to_f64().unwrap() * i as f64;
            }
        }
        acc
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn channel_schedule_caps() {
        let cfg = UNetConfig {
            max_channels: 32,
            ..Default::default()
        };
        let widths: Vec<_> = (0..5).map(|l| cfg.channels(l)).collect();
        assert_eq!(widths, vec![8, 16, 32, 32, 32]);
        assert_eq!(UNetConfig::default().divisor(), 16);
    }

    #[test]
    fn default_config_has_four_transitions() {
        let layout = UNetConfig::default().parameter_layout();
        let ups = layout.iter().filter(|s| s.name.ends_with("up.weight")).count();
        let downs = layout
            .iter()
            .filter(|s| s.name.starts_with("enc") && s.name.ends_with("conv0.weight") && !s.name.starts_with("enc0"))
            .count();
        assert_eq!((downs, ups), (4, 4));
    }

    #[test]
    fn invalid_configs_rejected() {
        for cfg in [
            UNetConfig { levels: 1, ..Default::default() },
            UNetConfig { num_classes: 1, ..Default::default() },
            UNetConfig { base_channels: 0, ..Default::default() },
            UNetConfig { kernel: 2, ..Default::default() },
        ] {
            assert!(Model::<f64>::build(cfg, 0).is_err());
        }
    }

    #[test]
    fn indivisible_extent_names_divisor() {
        let model = Model::<f64>::build(
            UNetConfig {
                levels: 3,
                base_channels: 2,
                ..Default::default()
            },
            1,
        )
        .unwrap();
        let err = model.forward(&Tensor::zeros(&[1, 1, 8, 8, 6])).unwrap_err();
        assert!(matches!(err, Error::Indivisible { divisor: 4, .. }));
        assert!(err.to_string().contains("divisible by 4"));
    }
}
