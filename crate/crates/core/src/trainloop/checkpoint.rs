//! Checkpoints reuse the tensor container. Tensors are named
//! `param/<name>`, `adam.m/<name>` and `adam.v/<name>`; the config block
//! carries the model config, schedule position, frozen groups and the
//! shuffle RNG position.

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::optim::OptimizerState;
use super::TrainState;
use crate::container::Container;
use crate::error::{Error, Result};
use crate::model::{GroupSet, ModelConfig, ModelParams, Param};

const KIND: &str = "attd-checkpoint";

#[derive(Serialize, Deserialize)]
struct RngState {
    /// 32 seed bytes as hex.
    seed: String,
    stream: u64,
    /// `u128` word position as a decimal string.
    word_pos: String,
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    model: ModelConfig,
    stage: u8,
    epoch: usize,
    step: u64,
    opt_t: u64,
    best_val: Option<f64>,
    frozen: GroupSet,
    rng: RngState,
}

fn rng_state(rng: &ChaCha8Rng) -> RngState {
    RngState {
        seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
        stream: rng.get_stream(),
        word_pos: rng.get_word_pos().to_string(),
    }
}

fn restore_rng(s: &RngState, path: &Path) -> Result<ChaCha8Rng> {
    use rand::SeedableRng;
    let bad = || Error::format(path, "malformed rng state");
    if s.seed.len() != 64 {
        return Err(bad());
    }
    let mut seed = [0u8; 32];
    for (i, b) in seed.iter_mut().enumerate() {
        *b = u8::from_str_radix(&s.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
    }
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(s.stream);
    rng.set_word_pos(s.word_pos.parse().map_err(|_| bad())?);
    Ok(rng)
}

pub fn encode_checkpoint(state: &TrainState) -> Container {
    let header = Header {
        kind: KIND.into(),
        model: state.params.config().clone(),
        stage: state.stage,
        epoch: state.epoch,
        step: state.step,
        opt_t: state.optimizer.t,
        best_val: state.best_val,
        frozen: state.frozen,
        rng: rng_state(&state.rng),
    };
    let mut c = Container::new(serde_json::to_value(header).expect("header serializes"));
    for p in state.params.params() {
        c.push(format!("param/{}", p.name), p.value.clone());
    }
    for (p, m) in state.params.params().iter().zip(&state.optimizer.m) {
        c.push(format!("adam.m/{}", p.name), m.clone());
    }
    for (p, v) in state.params.params().iter().zip(&state.optimizer.v) {
        c.push(format!("adam.v/{}", p.name), v.clone());
    }
    c
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    encode_checkpoint(state).write(path)
}

pub fn decode_checkpoint(c: &Container, path: &Path) -> Result<TrainState> {
    let header: Header = serde_json::from_value(c.config.clone())
        .map_err(|e| Error::format(path, format!("checkpoint header: {e}")))?;
    if header.kind != KIND {
        return Err(Error::format(path, format!("container kind {:?} is not a checkpoint", header.kind)));
    }
    if !matches!(header.stage, 1 | 2) {
        return Err(Error::format(path, format!("stage {} out of range", header.stage)));
    }
    header
        .model
        .validate()
        .map_err(|e| Error::Mismatch(format!("{}: {e}", path.display())))?;
    // The config determines every parameter's name, group and shape.
    let skeleton = ModelParams::init(&header.model, 0)?;
    let expected = 3 * skeleton.len();
    if c.tensors.len() != expected {
        return Err(Error::Mismatch(format!(
            "{}: {} tensors, config implies {expected}",
            path.display(),
            c.tensors.len()
        )));
    }
    let fetch = |prefix: &str, p: &Param| {
        let name = format!("{prefix}/{}", p.name);
        match c.get(&name) {
            Some(t) if t.shape() == p.value.shape() => Ok(t.clone()),
            Some(t) => Err(Error::Mismatch(format!(
                "{}: {name} has shape {:?}, config implies {:?}",
                path.display(),
                t.shape(),
                p.value.shape()
            ))),
            None => Err(Error::Mismatch(format!("{}: missing tensor {name}", path.display()))),
        }
    };
    let mut params = Vec::with_capacity(skeleton.len());
    let mut m = Vec::with_capacity(skeleton.len());
    let mut v = Vec::with_capacity(skeleton.len());
    for p in skeleton.params() {
        params.push(Param {
            name: p.name.clone(),
            group: p.group,
            value: fetch("param", p)?,
        });
        m.push(fetch("adam.m", p)?);
        v.push(fetch("adam.v", p)?);
    }
    Ok(TrainState {
        params: ModelParams::from_parts(header.model, params)?,
        optimizer: OptimizerState { m, v, t: header.opt_t },
        stage: header.stage,
        epoch: header.epoch,
        step: header.step,
        rng: restore_rng(&header.rng, path)?,
        best_val: header.best_val,
        frozen: header.frozen,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    decode_checkpoint(&Container::read(path)?, path)
}
