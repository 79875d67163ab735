use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::numcore::{Tape, Tensor, Var};

/// Disjoint partitions of the learnable parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ParamGroup {
    /// Token/position embeddings, encoder layers and pooler.
    Language,
    /// Question decoder with its attended projection and score head.
    QuestionDecoder,
    /// Reasoning decoder with its attended projection and score head.
    ReasoningDecoder,
    /// 2-D position table for image tokens, shared by both decoders.
    Geometric,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 4] = [
        ParamGroup::Language,
        ParamGroup::QuestionDecoder,
        ParamGroup::ReasoningDecoder,
        ParamGroup::Geometric,
    ];
}

/// Which of the two visual decoders.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecoderKind {
    Question,
    Reasoning,
}

impl DecoderKind {
    pub fn prefix(self) -> &'static str {
        match self {
            DecoderKind::Question => "dec_q",
            DecoderKind::Reasoning => "dec_r",
        }
    }

    pub fn group(self) -> ParamGroup {
        match self {
            DecoderKind::Question => ParamGroup::QuestionDecoder,
            DecoderKind::Reasoning => ParamGroup::ReasoningDecoder,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor,
}

/// All learnable tensors of the model, in a fixed creation order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

/// Weight matrix and bias of one affine layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let (din, dout) = (self.weight.shape()[0], self.weight.shape()[1]);
        assert_eq!(x.len(), din, "linear input width");
        let w = self.weight.data();
        let mut out = self.bias.data().to_vec();
        for (i, &xi) in x.iter().enumerate() {
            for j in 0..dout {
                out[j] += xi * w[i * dout + j];
            }
        }
        out
    }
}

struct Builder<'a> {
    cfg: &'a ModelConfig,
    rng: ChaCha8Rng,
    params: Vec<Param>,
}

impl Builder<'_> {
    fn add(&mut self, name: String, group: ParamGroup, value: Tensor) {
        self.params.push(Param { name, group, value });
    }

    fn weight(&mut self, name: String, group: ParamGroup, shape: &[usize]) {
        let t = Tensor::randn(shape, self.cfg.init_std, &mut self.rng);
        self.add(name, group, t);
    }

    fn linear(&mut self, prefix: &str, group: ParamGroup, din: usize, dout: usize) {
        self.weight(format!("{prefix}.w"), group, &[din, dout]);
        self.add(format!("{prefix}.b"), group, Tensor::zeros(&[dout]));
    }

    fn layer_norm(&mut self, prefix: &str, group: ParamGroup) {
        let d = self.cfg.d_model;
        self.add(format!("{prefix}.g"), group, Tensor::ones(&[d]));
        self.add(format!("{prefix}.b"), group, Tensor::zeros(&[d]));
    }

    fn attention(&mut self, prefix: &str, group: ParamGroup) {
        let d = self.cfg.d_model;
        for p in ["q", "k", "v", "o"] {
            self.linear(&format!("{prefix}.{p}"), group, d, d);
        }
    }

    fn ffn(&mut self, prefix: &str, group: ParamGroup) {
        let (d, f) = (self.cfg.d_model, self.cfg.d_ff);
        self.linear(&format!("{prefix}.fc1"), group, d, f);
        self.linear(&format!("{prefix}.fc2"), group, f, d);
    }
}

impl ModelParams {
    /// Normal(0, init_std) weights and zero biases from a fixed seed.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let cfg = config;
        let mut b = Builder {
            cfg,
            rng: ChaCha8Rng::seed_from_u64(seed),
            params: Vec::new(),
        };
        let d = cfg.d_model;
        let lang = ParamGroup::Language;
        b.weight("lang.tok_emb".into(), lang, &[cfg.vocab_size, d]);
        b.weight("lang.pos_emb".into(), lang, &[cfg.max_seq_len, d]);
        for l in 0..cfg.n_enc_layers {
            let p = format!("lang.enc{l}");
            b.layer_norm(&format!("{p}.ln1"), lang);
            b.attention(&format!("{p}.attn"), lang);
            b.layer_norm(&format!("{p}.ln2"), lang);
            b.ffn(&format!("{p}.ffn"), lang);
        }
        b.layer_norm("lang.ln_f", lang);
        b.linear("lang.pool", lang, d, d);

        for kind in [DecoderKind::Question, DecoderKind::Reasoning] {
            let (p, g) = (kind.prefix(), kind.group());
            b.weight(format!("{p}.cls"), g, &[1, d]);
            b.weight(format!("{p}.pos_emb"), g, &[cfg.max_seq_len, d]);
            b.linear(&format!("{p}.in_proj"), g, cfg.d_visual, d);
            b.layer_norm(&format!("{p}.mem_ln"), g);
            for l in 0..cfg.n_dec_layers {
                let lp = format!("{p}.layer{l}");
                b.layer_norm(&format!("{lp}.ln1"), g);
                b.attention(&format!("{lp}.self"), g);
                b.layer_norm(&format!("{lp}.ln2"), g);
                b.attention(&format!("{lp}.cross"), g);
                b.layer_norm(&format!("{lp}.ln3"), g);
                b.ffn(&format!("{lp}.ffn"), g);
            }
            b.linear(&format!("{p}.attend"), g, cfg.d_visual, d);
            b.linear(&format!("{p}.score"), g, d, 1);
        }

        b.weight(
            "geo.emb".into(),
            ParamGroup::Geometric,
            &[cfg.grid_h * cfg.grid_w, d],
        );
        Self::from_parts(config.clone(), b.params)
    }

    pub fn from_parts(config: ModelConfig, params: Vec<Param>) -> Result<Self> {
        let mut index = HashMap::with_capacity(params.len());
        for (i, p) in params.iter().enumerate() {
            if index.insert(p.name.clone(), i).is_some() {
                return Err(Error::Input(format!("duplicate parameter {}", p.name)));
            }
        }
        Ok(Self {
            config,
            params,
            index,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.position(name).map(|i| &self.params[i].value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.position(name).map(move |i| &mut self.params[i].value)
    }

    pub fn value_at_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.params[i].value
    }

    pub fn linear(&self, prefix: &str) -> Option<Linear> {
        Some(Linear {
            weight: self.get(&format!("{prefix}.w"))?.clone(),
            bias: self.get(&format!("{prefix}.b"))?.clone(),
        })
    }

    pub fn group_params(&self, group: ParamGroup) -> impl Iterator<Item = &Param> {
        self.params.iter().filter(move |p| p.group == group)
    }

    /// Sets every parameter to zero.
    pub fn zero_all(&mut self) {
        for p in &mut self.params {
            p.value.data_mut().fill(0.0);
        }
    }
}

/// Set of parameter groups that receive gradients.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct GroupSet(u8);

impl FromIterator<ParamGroup> for GroupSet {
    fn from_iter<I: IntoIterator<Item = ParamGroup>>(iter: I) -> Self {
        iter.into_iter().fold(Self::empty(), Self::with)
    }
}

/// Serialized as a list of group names.
impl Serialize for GroupSet {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_seq(self.groups())
    }
}

impl<'de> Deserialize<'de> for GroupSet {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        Ok(Vec::<ParamGroup>::deserialize(d)?.into_iter().collect())
    }
}

impl GroupSet {
    pub fn empty() -> Self {
        Self(0)
    }

    pub fn all() -> Self {
        ParamGroup::ALL.iter().fold(Self::empty(), |s, &g| s.with(g))
    }

    pub fn with(self, g: ParamGroup) -> Self {
        Self(self.0 | Self::bit(g))
    }

    pub fn without(self, g: ParamGroup) -> Self {
        Self(self.0 & !Self::bit(g))
    }

    pub fn contains(self, g: ParamGroup) -> bool {
        self.0 & Self::bit(g) != 0
    }

    pub fn groups(self) -> impl Iterator<Item = ParamGroup> {
        ParamGroup::ALL.into_iter().filter(move |&g| self.contains(g))
    }

    fn bit(g: ParamGroup) -> u8 {
        1 << (g as u8)
    }
}

/// Lazily places parameters on a tape, marking only trainable groups as
/// requiring gradients.
pub struct Binder<'p> {
    params: &'p ModelParams,
    trainable: GroupSet,
    vars: Vec<Option<Var>>,
}

impl<'p> Binder<'p> {
    pub fn new(params: &'p ModelParams, trainable: GroupSet) -> Self {
        Self {
            params,
            trainable,
            vars: vec![None; params.len()],
        }
    }

    /// Binder with nothing trainable, for inference.
    pub fn frozen(params: &'p ModelParams) -> Self {
        Self::new(params, GroupSet::empty())
    }

    pub fn params(&self) -> &'p ModelParams {
        self.params
    }

    pub fn get(&mut self, tape: &mut Tape, name: &str) -> Result<Var> {
        let i = self
            .params
            .position(name)
            .ok_or_else(|| Error::Input(format!("unknown parameter {name}")))?;
        if let Some(v) = self.vars[i] {
            return Ok(v);
        }
        let p = &self.params.params[i];
        let v = tape.leaf(p.value.clone(), self.trainable.contains(p.group));
        self.vars[i] = Some(v);
        Ok(v)
    }

    /// Gradients after `tape.backward`, aligned with [`ModelParams::params`].
    /// Parameters that were never bound or are frozen yield `None`.
    pub fn gradients(&self, tape: &Tape) -> Vec<Option<Tensor>> {
        self.vars
            .iter()
            .map(|v| v.and_then(|v| tape.grad(v).cloned()))
            .collect()
    }
}
