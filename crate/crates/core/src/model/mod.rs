//! Perceptron backbone plus a dense or mixture-of-experts classifier head,
//! all parameters stored in one flat vector.

mod checkpoint;
mod flops;
mod forward;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moe::GateMode;
use crate::rng::{streams, Rng};

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_VERSION,
};
pub use flops::{count_flops, FlopCount};
pub use forward::{argmax_rows, Forward, LossParts, Prediction};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Dense,
    Soft,
    Sparse,
    Hard,
}

impl HeadKind {
    pub fn as_str(self) -> &'static str {
        match self {
            HeadKind::Dense => "dense",
            HeadKind::Soft => "soft",
            HeadKind::Sparse => "sparse",
            HeadKind::Hard => "hard",
        }
    }

    pub fn is_moe(self) -> bool {
        self != HeadKind::Dense
    }

    pub fn is_top_k(self) -> bool {
        matches!(self, HeadKind::Sparse | HeadKind::Hard)
    }
}

impl std::str::FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dense" => Ok(HeadKind::Dense),
            "soft" => Ok(HeadKind::Soft),
            "sparse" => Ok(HeadKind::Sparse),
            "hard" => Ok(HeadKind::Hard),
            _ => Err(Error::config(format!("unknown head kind {s:?}"))),
        }
    }
}

/// Head geometry. `hidden` is the expert width, and the hidden width of the
/// dense head. The dense head ignores `experts` and `k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    pub kind: HeadKind,
    pub experts: usize,
    pub hidden: usize,
    pub k: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig { kind: HeadKind::Sparse, experts: 8, hidden: 64, k: 2 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub kl: f64,
    pub importance: f64,
    pub load: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { kl: 0.01, importance: 0.01, load: 0.01 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub input_dim: usize,
    /// Hidden widths between the input and the feature layer.
    pub backbone: Vec<usize>,
    pub feature_dim: usize,
    pub head: HeadConfig,
    pub classes: usize,
    pub loss_weights: LossWeights,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_dim: 3072,
            backbone: vec![256, 256],
            feature_dim: 128,
            head: HeadConfig::default(),
            classes: 10,
            loss_weights: LossWeights::default(),
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: usize| {
            if v == 0 {
                Err(Error::config(format!("{name} must be positive")))
            } else {
                Ok(())
            }
        };
        positive("input_dim", self.input_dim)?;
        positive("feature_dim", self.feature_dim)?;
        positive("classes", self.classes)?;
        positive("head.hidden", self.head.hidden)?;
        if let Some(i) = self.backbone.iter().position(|&w| w == 0) {
            return Err(Error::config(format!("backbone[{i}] must be positive")));
        }
        let h = &self.head;
        match h.kind {
            HeadKind::Dense => {}
            HeadKind::Soft => positive("head.experts", h.experts)?,
            HeadKind::Sparse => {
                positive("head.experts", h.experts)?;
                if h.k == 0 || h.k > h.experts {
                    return Err(Error::config(format!("sparse head needs 1 <= k <= {}, got k={}", h.experts, h.k)));
                }
            }
            HeadKind::Hard => {
                positive("head.experts", h.experts)?;
                if h.k != 1 {
                    return Err(Error::config(format!("hard head requires k=1, got k={}", h.k)));
                }
            }
        }
        for (name, w) in [
            ("kl", self.loss_weights.kl),
            ("importance", self.loss_weights.importance),
            ("load", self.loss_weights.load),
        ] {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::config(format!("loss_weights.{name} must be finite and >= 0, got {w}")));
            }
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` of each backbone layer; empty for an identity
    /// backbone.
    pub fn backbone_layers(&self) -> Vec<(usize, usize)> {
        if self.backbone.is_empty() && self.input_dim == self.feature_dim {
            return Vec::new();
        }
        let mut dims = vec![self.input_dim];
        dims.extend(&self.backbone);
        dims.push(self.feature_dim);
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn gate_mode(&self) -> Option<GateMode> {
        match self.head.kind {
            HeadKind::Dense => None,
            HeadKind::Soft => Some(GateMode::Soft),
            HeadKind::Sparse | HeadKind::Hard => Some(GateMode::TopK { k: self.head.k }),
        }
    }

    pub fn experts(&self) -> usize {
        if self.head.kind.is_moe() {
            self.head.experts
        } else {
            0
        }
    }

    /// Parameter count of one two-layer perceptron `d → hidden → classes`.
    fn mlp_params(&self) -> usize {
        let (d, h, c) = (self.feature_dim, self.head.hidden, self.classes);
        d * h + h + h * c + c
    }

    pub fn head_param_count(&self) -> usize {
        let (d, n) = (self.feature_dim, self.head.experts);
        match self.head.kind {
            HeadKind::Dense => self.mlp_params(),
            HeadKind::Soft => n * self.mlp_params() + d * n + n,
            HeadKind::Sparse | HeadKind::Hard => n * self.mlp_params() + 2 * d * n + n,
        }
    }

    pub fn backbone_param_count(&self) -> usize {
        self.backbone_layers().iter().map(|&(i, o)| i * o + o).sum()
    }

    pub fn param_count(&self) -> usize {
        self.backbone_param_count() + self.head_param_count()
    }
}

/// A named contiguous range of the flat parameter vector.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Slot {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl Slot {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Initialization recipe for a slot.
#[derive(Clone, Copy, Debug, PartialEq)]
enum Init {
    /// `U(±1/√fan_in)`.
    Uniform {
        fan_in: usize,
    },
    Zero,
}

struct SlotSpec {
    name: String,
    shape: Vec<usize>,
    stream: u64,
    init: Init,
}

const GATE_STREAM: u64 = streams::INIT_BASE + 1000;
const EXPERT_STREAM: u64 = streams::INIT_BASE + 2000;

fn push_linear(specs: &mut Vec<SlotSpec>, prefix: &str, fan_in: usize, fan_out: usize, stream: u64) {
    let init = Init::Uniform { fan_in };
    specs.push(SlotSpec { name: format!("{prefix}.weight"), shape: vec![fan_in, fan_out], stream, init });
    specs.push(SlotSpec { name: format!("{prefix}.bias"), shape: vec![fan_out], stream, init });
}

/// Slot order and init streams. The dense head shares expert 0's stream so a
/// one-expert soft head starts from the same weights as a dense head.
fn slot_specs(cfg: &ModelConfig) -> Vec<SlotSpec> {
    let mut specs = Vec::new();
    for (l, &(i, o)) in cfg.backbone_layers().iter().enumerate() {
        push_linear(&mut specs, &format!("backbone.{l}"), i, o, streams::INIT_BASE + l as u64);
    }
    let (d, h, c, n) = (cfg.feature_dim, cfg.head.hidden, cfg.classes, cfg.head.experts);
    if cfg.head.kind == HeadKind::Dense {
        push_linear(&mut specs, "head.fc1", d, h, EXPERT_STREAM);
        push_linear(&mut specs, "head.fc2", h, c, EXPERT_STREAM);
        return specs;
    }
    let gate = |name: &str, shape: Vec<usize>, init| SlotSpec { name: name.into(), shape, stream: GATE_STREAM, init };
    specs.push(gate("gate.weight", vec![d, n], Init::Uniform { fan_in: d }));
    specs.push(gate("gate.bias", vec![n], Init::Zero));
    if cfg.head.kind.is_top_k() {
        specs.push(gate("gate.noise_weight", vec![d, n], Init::Zero));
    }
    for e in 0..n {
        let stream = EXPERT_STREAM + e as u64;
        push_linear(&mut specs, &format!("expert.{e}.fc1"), d, h, stream);
        push_linear(&mut specs, &format!("expert.{e}.fc2"), h, c, stream);
    }
    specs
}

pub fn layout(cfg: &ModelConfig) -> Vec<Slot> {
    let mut offset = 0;
    slot_specs(cfg)
        .into_iter()
        .map(|s| {
            let slot = Slot { name: s.name, offset, shape: s.shape };
            offset += slot.len();
            slot
        })
        .collect()
}

/// Flat parameters with their named layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub values: Vec<f64>,
    pub slots: Vec<Slot>,
}

impl ModelParams {
    pub fn init(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut values = Vec::with_capacity(cfg.param_count());
        let mut rngs: Vec<(u64, Rng)> = Vec::new();
        for spec in slot_specs(cfg) {
            let len: usize = spec.shape.iter().product();
            match spec.init {
                Init::Zero => values.extend(std::iter::repeat_n(0.0, len)),
                Init::Uniform { fan_in } => {
                    let rng = match rngs.iter_mut().find(|(s, _)| *s == spec.stream) {
                        Some((_, r)) => r,
                        None => {
                            rngs.push((spec.stream, Rng::new(cfg.seed, spec.stream)));
                            &mut rngs.last_mut().expect("just pushed").1
                        }
                    };
                    let a = 1.0 / (fan_in as f64).sqrt();
                    values.extend((0..len).map(|_| rng.uniform_range(-a, a)));
                }
            }
        }
        Ok(ModelParams { values, slots: layout(cfg) })
    }

    pub fn from_values(cfg: &ModelConfig, values: Vec<f64>) -> Result<Self> {
        cfg.validate()?;
        let slots = layout(cfg);
        let expected = slots.last().map_or(0, |s| s.offset + s.len());
        if values.len() != expected {
            return Err(Error::format(format!("{} parameters, layout expects {expected}", values.len())));
        }
        Ok(ModelParams { values, slots })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn slot(&self, name: &str) -> Result<&Slot> {
        self.slots.iter().find(|s| s.name == name).ok_or_else(|| Error::Internal(format!("no parameter slot {name:?}")))
    }

    pub fn get(&self, name: &str) -> Result<&[f64]> {
        let r = self.slot(name)?.range();
        Ok(&self.values[r])
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut [f64]> {
        let r = self.slot(name)?.range();
        Ok(&mut self.values[r])
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

/// Config plus parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
}

impl Model {
    pub fn build(config: ModelConfig) -> Result<Self> {
        let params = ModelParams::init(&config)?;
        Ok(Model { config, params })
    }

    pub fn with_values(config: ModelConfig, values: Vec<f64>) -> Result<Self> {
        let params = ModelParams::from_values(&config, values)?;
        Ok(Model { config, params })
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn head_kind(&self) -> HeadKind {
        self.config.head.kind
    }
}
