//! Named parameter store partitioned into encoder, decoder, temporal and
//! classifier groups, plus the deterministic architecture walk used for
//! initialization.

use crate::config::ModelConfig;
use crate::error::{AlignError, Result};
use crate::ops::norm::BnStats;
use crate::rng::SeededRng;
use crate::tensor::{Dims4, Tensor4};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Partition {
    Encoder,
    Decoder,
    Temporal,
    Classifier,
}

impl Partition {
    pub fn of(name: &str) -> Result<Partition> {
        if name.starts_with("enc.") {
            Ok(Partition::Encoder)
        } else if name.starts_with("dec.") {
            Ok(Partition::Decoder)
        } else if name.starts_with("trn.") {
            Ok(Partition::Temporal)
        } else if name.starts_with("cls.") {
            Ok(Partition::Classifier)
        } else {
            Err(AlignError::config(format!(
                "parameter `{name}` belongs to no partition"
            )))
        }
    }
}

#[derive(Debug, Clone)]
pub struct Param {
    pub value: Tensor4,
    pub grad: Tensor4,
}

impl Param {
    fn new(value: Tensor4) -> Self {
        let d = value.dims();
        Param {
            grad: Tensor4::zeros(d.n, d.c, d.h, d.w),
            value,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct ParameterStore {
    params: BTreeMap<String, Param>,
    pub bn: BTreeMap<String, BnStats>,
}

impl ParameterStore {
    pub fn insert(&mut self, name: &str, value: Tensor4) -> Result<()> {
        Partition::of(name)?;
        if self.params.contains_key(name) {
            return Err(AlignError::config(format!("duplicate parameter `{name}`")));
        }
        self.params.insert(name.to_string(), Param::new(value));
        Ok(())
    }

    pub fn get(&self, name: &str) -> &Param {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
    }

    pub fn value(&self, name: &str) -> &Tensor4 {
        &self.get(name).value
    }

    pub fn set_value(&mut self, name: &str, value: Tensor4) {
        let p = self
            .params
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"));
        assert_eq!(p.value.dims(), value.dims());
        p.value = value;
    }

    pub fn names(&self) -> Vec<String> {
        self.params.keys().cloned().collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn total_values(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub fn partition_names(&self, part: Partition) -> Vec<String> {
        self.params
            .keys()
            .filter(|n| Partition::of(n).map(|p| p == part).unwrap_or(false))
            .cloned()
            .collect()
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            p.grad.data_mut().fill(0.0);
        }
    }

    /// Accumulate a gradient contribution into a named slot.
    pub fn accumulate_grad(&mut self, name: &str, grad: &Tensor4) {
        let p = self
            .params
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"));
        p.grad.add_assign(grad);
    }

    pub fn scale_grads(&mut self, s: f64) {
        for p in self.params.values_mut() {
            p.grad.scale_assign(s);
        }
    }
}

#[derive(Debug, Clone)]
pub enum InitRule {
    HeNormal { fan_in: usize },
    Zeros,
    Ones,
    /// LSTM bias layout `[i, f, g, o]`: zeros with the forget slice set to 1.
    LstmBias { hidden: usize },
}

#[derive(Debug, Clone)]
pub struct ParamSpec {
    pub name: String,
    pub dims: Dims4,
    pub init: InitRule,
}

fn conv_spec(out: &mut Vec<ParamSpec>, name: &str, oc: usize, ic: usize, k: usize) {
    out.push(ParamSpec {
        name: format!("{name}.w"),
        dims: Dims4::new(oc, ic, k, k),
        init: InitRule::HeNormal { fan_in: ic * k * k },
    });
    out.push(ParamSpec {
        name: format!("{name}.b"),
        dims: Dims4::new(1, oc, 1, 1),
        init: InitRule::Zeros,
    });
}

fn bn_spec(out: &mut Vec<ParamSpec>, name: &str, c: usize) {
    out.push(ParamSpec {
        name: format!("{name}.gamma"),
        dims: Dims4::new(1, c, 1, 1),
        init: InitRule::Ones,
    });
    out.push(ParamSpec {
        name: format!("{name}.beta"),
        dims: Dims4::new(1, c, 1, 1),
        init: InitRule::Zeros,
    });
}

fn dense_spec(out: &mut Vec<ParamSpec>, name: &str, od: usize, id: usize) {
    out.push(ParamSpec {
        name: format!("{name}.w"),
        dims: Dims4::new(od, id, 1, 1),
        init: InitRule::HeNormal { fan_in: id },
    });
    out.push(ParamSpec {
        name: format!("{name}.b"),
        dims: Dims4::new(1, od, 1, 1),
        init: InitRule::Zeros,
    });
}

/// Decoder stage output channels: the mirror of the encoder walk.
pub fn decoder_stage_out(cfg: &ModelConfig, stage: usize) -> usize {
    if stage == 0 {
        cfg.block_channels[0]
    } else {
        cfg.block_channels[stage - 1]
    }
}

/// Deterministic enumeration of every parameter in creation order.
pub fn enumerate_params(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let mut out = Vec::new();
    let mut prev = 3 + cfg.c_d; // image stacked with the C_d-channel response map
    for (i, &c) in cfg.block_channels.iter().enumerate() {
        conv_spec(&mut out, &format!("enc.b{i}.c1"), c, prev, 3);
        bn_spec(&mut out, &format!("enc.b{i}.n1"), c);
        conv_spec(&mut out, &format!("enc.b{i}.c2"), c, c, 3);
        bn_spec(&mut out, &format!("enc.b{i}.n2"), c);
        prev = c;
    }
    for i in (0..cfg.block_channels.len()).rev() {
        let c = cfg.block_channels[i];
        let next = decoder_stage_out(cfg, i);
        conv_spec(&mut out, &format!("dec.b{i}.c1"), c, c, 3);
        bn_spec(&mut out, &format!("dec.b{i}.n1"), c);
        conv_spec(&mut out, &format!("dec.b{i}.c2"), next, c, 3);
        bn_spec(&mut out, &format!("dec.b{i}.n2"), next);
    }
    let trunk_out = cfg.block_channels[0];
    conv_spec(&mut out, "dec.head_d", cfg.c_d, trunk_out, 1);
    conv_spec(&mut out, "dec.head_r", cfg.c_r, trunk_out, 1);

    let hidden = cfg.lstm_hidden;
    out.push(ParamSpec {
        name: "trn.w_ih".into(),
        dims: Dims4::new(4 * hidden, cfg.c_p, 1, 1),
        init: InitRule::HeNormal { fan_in: cfg.c_p },
    });
    out.push(ParamSpec {
        name: "trn.w_hh".into(),
        dims: Dims4::new(4 * hidden, hidden, 1, 1),
        init: InitRule::HeNormal { fan_in: hidden },
    });
    out.push(ParamSpec {
        name: "trn.b".into(),
        dims: Dims4::new(1, 4 * hidden, 1, 1),
        init: InitRule::LstmBias { hidden },
    });
    dense_spec(&mut out, "trn.q", cfg.c_p, hidden);

    let he = cfg.bottleneck_hw();
    dense_spec(&mut out, "cls.fc1", cfg.id_feature, cfg.c_i * he * he);
    dense_spec(&mut out, "cls.fc2", cfg.n_identities, cfg.id_feature);
    out
}

/// Names of the batchnorm state slots, in creation order.
pub fn enumerate_bn(cfg: &ModelConfig) -> Vec<(String, usize)> {
    let mut out = Vec::new();
    for (i, &c) in cfg.block_channels.iter().enumerate() {
        out.push((format!("enc.b{i}.n1"), c));
        out.push((format!("enc.b{i}.n2"), c));
    }
    for i in (0..cfg.block_channels.len()).rev() {
        let c = cfg.block_channels[i];
        out.push((format!("dec.b{i}.n1"), c));
        out.push((format!("dec.b{i}.n2"), decoder_stage_out(cfg, i)));
    }
    out
}

/// Gaussian initialization: conv/dense weights `N(0, sqrt(2/fan_in))`,
/// biases zero, batchnorm affine identity, LSTM forget-gate bias 1.
pub fn init_parameters(cfg: &ModelConfig, rng: &mut SeededRng) -> Result<ParameterStore> {
    cfg.validate()?;
    let mut store = ParameterStore::default();
    for spec in enumerate_params(cfg) {
        let d = spec.dims;
        let mut t = Tensor4::zeros(d.n, d.c, d.h, d.w);
        match spec.init {
            InitRule::HeNormal { fan_in } => {
                let std = (2.0 / fan_in as f64).sqrt();
                t.fill_normal(rng, 0.0, std);
            }
            InitRule::Zeros => {}
            InitRule::Ones => t.data_mut().fill(1.0),
            InitRule::LstmBias { hidden } => {
                t.data_mut()[hidden..2 * hidden].fill(1.0);
            }
        }
        store.insert(&spec.name, t)?;
    }
    for (name, c) in enumerate_bn(cfg) {
        store.bn.insert(name, BnStats::new(c));
    }
    Ok(store)
}
