use std::sync::Arc;

use super::params::{Binder, DecoderKind, Linear, ModelParams};
use super::{AttentionMap, FeatureGrid, ForwardOutput, Mode, ModelConfig, ReasoningOutput, N_CANDIDATES};
use crate::error::{Error, Result};
use crate::gridvqa::{Sample, CLS_ID, SEP_ID};
use crate::numcore::{AttnLayout, Segment, Tape, Tensor, Var};

/// Tape handles for the reasoning branch of a batched forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ReasoningVars {
    /// `[batch, h·w]`
    pub alpha_r: Var,
    /// `[batch, d_model]`
    pub v_r: Var,
    /// `[batch, 4]`
    pub y_r: Var,
}

/// Tape handles for a batched forward pass.
#[derive(Clone, Copy, Debug)]
pub struct BatchForward {
    pub batch: usize,
    /// `[batch·4, d_model]`, candidate-major within each sample.
    pub x_cls: Var,
    /// `[batch, h·w]`
    pub alpha_q: Var,
    /// `[batch, d_model]`
    pub v_q: Var,
    /// `[batch, 4]`
    pub y_q: Var,
    pub reasoning: Option<ReasoningVars>,
}

fn linear(tape: &mut Tape, b: &mut Binder, x: Var, prefix: &str) -> Result<Var> {
    let w = b.get(tape, &format!("{prefix}.w"))?;
    let bias = b.get(tape, &format!("{prefix}.b"))?;
    let y = tape.matmul(x, w)?;
    tape.add_row(y, bias)
}

fn layer_norm(tape: &mut Tape, b: &mut Binder, x: Var, prefix: &str) -> Result<Var> {
    let g = b.get(tape, &format!("{prefix}.g"))?;
    let bias = b.get(tape, &format!("{prefix}.b"))?;
    let eps = b.params().config().ln_eps;
    tape.layer_norm(x, g, bias, eps)
}

/// Multi-head attention from `xq` rows onto `xkv` rows. Returns the output
/// projection and the attention probabilities.
fn attention(
    tape: &mut Tape,
    b: &mut Binder,
    xq: Var,
    xkv: Var,
    prefix: &str,
    layout: &Arc<AttnLayout>,
) -> Result<(Var, Var)> {
    let q = linear(tape, b, xq, &format!("{prefix}.q"))?;
    let k = linear(tape, b, xkv, &format!("{prefix}.k"))?;
    let probs = tape.attn_scores(q, k, layout)?;
    let v = linear(tape, b, xkv, &format!("{prefix}.v"))?;
    let mixed = tape.attn_apply(probs, v, layout)?;
    let out = linear(tape, b, mixed, &format!("{prefix}.o"))?;
    Ok((out, probs))
}

fn feed_forward(tape: &mut Tape, b: &mut Binder, x: Var, prefix: &str) -> Result<Var> {
    let h = linear(tape, b, x, &format!("{prefix}.fc1"))?;
    let h = tape.gelu(h);
    linear(tape, b, h, &format!("{prefix}.fc2"))
}

fn check_tokens(cfg: &ModelConfig, tokens: &[u32], what: &str) -> Result<()> {
    if let Some(&t) = tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
        return Err(Error::Input(format!(
            "{what} token {t} outside vocabulary of {}",
            cfg.vocab_size
        )));
    }
    Ok(())
}

/// `[CLS] question [SEP] answer [SEP]`
fn language_sequence(cfg: &ModelConfig, question: &[u32], answer: &[u32]) -> Result<Vec<usize>> {
    check_tokens(cfg, question, "question")?;
    check_tokens(cfg, answer, "answer")?;
    let len = question.len() + answer.len() + 3;
    if len > cfg.max_seq_len {
        return Err(Error::Input(format!(
            "question/answer sequence of {len} tokens exceeds max_seq_len {}",
            cfg.max_seq_len
        )));
    }
    let mut seq = Vec::with_capacity(len);
    seq.push(CLS_ID as usize);
    seq.extend(question.iter().map(|&t| t as usize));
    seq.push(SEP_ID as usize);
    seq.extend(answer.iter().map(|&t| t as usize));
    seq.push(SEP_ID as usize);
    Ok(seq)
}

/// Runs the language encoder over packed sequences and returns the pooled
/// `[CLS]` representation of each, `[n_seq, d_model]`.
fn encode_sequences(tape: &mut Tape, b: &mut Binder, seqs: &[Vec<usize>]) -> Result<Var> {
    let cfg = b.params().config().clone();
    let ids: Vec<usize> = seqs.iter().flatten().copied().collect();
    let positions: Vec<usize> = seqs.iter().flat_map(|s| 0..s.len()).collect();
    let lengths: Vec<usize> = seqs.iter().map(Vec::len).collect();
    let mut cls_rows = Vec::with_capacity(seqs.len());
    let mut start = 0;
    for len in &lengths {
        cls_rows.push(start);
        start += len;
    }

    let tok = b.get(tape, "lang.tok_emb")?;
    let pos = b.get(tape, "lang.pos_emb")?;
    let te = tape.index_rows(tok, &ids)?;
    let pe = tape.index_rows(pos, &positions)?;
    let mut x = tape.add(te, pe)?;

    let layout = Arc::new(AttnLayout::self_attention(&lengths, cfg.n_heads)?);
    for l in 0..cfg.n_enc_layers {
        let p = format!("lang.enc{l}");
        let h = layer_norm(tape, b, x, &format!("{p}.ln1"))?;
        let (a, _) = attention(tape, b, h, h, &format!("{p}.attn"), &layout)?;
        x = tape.add(x, a)?;
        let h = layer_norm(tape, b, x, &format!("{p}.ln2"))?;
        let f = feed_forward(tape, b, h, &format!("{p}.ffn"))?;
        x = tape.add(x, f)?;
    }
    let x = layer_norm(tape, b, x, "lang.ln_f")?;
    let cls = tape.index_rows(x, &cls_rows)?;
    let pooled = linear(tape, b, cls, "lang.pool")?;
    Ok(tape.tanh(pooled))
}

fn check_grid(cfg: &ModelConfig, grid: &FeatureGrid) -> Result<()> {
    if (grid.h(), grid.w(), grid.d()) != (cfg.grid_h, cfg.grid_w, cfg.d_visual) {
        return Err(Error::Dimension(format!(
            "grid {}×{}×{} does not match model config {}×{}×{}",
            grid.h(),
            grid.w(),
            grid.d(),
            cfg.grid_h,
            cfg.grid_w,
            cfg.d_visual
        )));
    }
    Ok(())
}

/// Packs grids into a constant `[batch·h·w, d_visual]` matrix.
fn pack_grids(tape: &mut Tape, cfg: &ModelConfig, grids: &[&FeatureGrid]) -> Result<Var> {
    let mut data = Vec::with_capacity(grids.len() * cfg.cells() * cfg.d_visual);
    for g in grids {
        check_grid(cfg, g)?;
        data.extend_from_slice(g.features().data());
    }
    Ok(tape.constant(Tensor::new(vec![grids.len() * cfg.cells(), cfg.d_visual], data)?))
}

struct Decoded {
    alpha: Var,
    sequence: Option<Var>,
}

/// Cross-attention decoder over packed query sequences. `queries` hold word
/// ids only; the decoder's learned `[CLS]` query is prepended to each.
///
/// With `need_sequence == false` the final layer stops once its
/// cross-attention probabilities exist, since nothing downstream of the
/// attention map reads the decoded tokens.
fn decode(
    tape: &mut Tape,
    b: &mut Binder,
    kind: DecoderKind,
    queries: &[&[u32]],
    img: Var,
    need_sequence: bool,
) -> Result<Decoded> {
    let cfg = b.params().config().clone();
    let p = kind.prefix();
    let cells = cfg.cells();
    let batch = queries.len();

    let mut ids = Vec::new();
    let mut positions = Vec::new();
    let mut lengths = Vec::with_capacity(batch);
    for q in queries {
        check_tokens(&cfg, q, "query")?;
        let len = q.len() + 1;
        if len > cfg.max_seq_len {
            return Err(Error::Input(format!(
                "decoder query of {len} tokens exceeds max_seq_len {}",
                cfg.max_seq_len
            )));
        }
        // Row 0 of the lookup table is the learned [CLS] query; word `t`
        // sits at row `t + 1`.
        ids.push(0);
        ids.extend(q.iter().map(|&t| t as usize + 1));
        positions.extend(0..len);
        lengths.push(len);
    }

    let cls = b.get(tape, &format!("{p}.cls"))?;
    let tok = b.get(tape, "lang.tok_emb")?;
    let table = tape.concat_rows(&[cls, tok])?;
    let qe = tape.index_rows(table, &ids)?;
    let pos = b.get(tape, &format!("{p}.pos_emb"))?;
    let pe = tape.index_rows(pos, &positions)?;
    let mut x = tape.add(qe, pe)?;

    let proj = linear(tape, b, img, &format!("{p}.in_proj"))?;
    let geo = b.get(tape, "geo.emb")?;
    let cell_ids: Vec<usize> = (0..batch).flat_map(|_| 0..cells).collect();
    let ge = tape.index_rows(geo, &cell_ids)?;
    let memory = tape.add(proj, ge)?;
    // Image tokens have no encoder of their own, so they are normalised
    // here the way an encoder's final layer norm would.
    let memory = layer_norm(tape, b, memory, &format!("{p}.mem_ln"))?;

    let self_layout = Arc::new(AttnLayout::self_attention(&lengths, cfg.n_heads)?);
    let mut start = 0;
    let cross_segments = lengths
        .iter()
        .enumerate()
        .map(|(i, &len)| {
            let s = Segment {
                q_start: start,
                q_len: len,
                k_start: i * cells,
                k_len: cells,
            };
            start += len;
            s
        })
        .collect();
    let cross_layout = Arc::new(AttnLayout::new(cross_segments, cfg.n_heads)?);

    let mut alpha = None;
    for l in 0..cfg.n_dec_layers {
        let lp = format!("{p}.layer{l}");
        let last = l + 1 == cfg.n_dec_layers;
        let h = layer_norm(tape, b, x, &format!("{lp}.ln1"))?;
        let (a, _) = attention(tape, b, h, h, &format!("{lp}.self"), &self_layout)?;
        x = tape.add(x, a)?;
        let h = layer_norm(tape, b, x, &format!("{lp}.ln2"))?;
        if last && !need_sequence {
            let q = linear(tape, b, h, &format!("{lp}.cross.q"))?;
            let k = linear(tape, b, memory, &format!("{lp}.cross.k"))?;
            let probs = tape.attn_scores(q, k, &cross_layout)?;
            alpha = Some(tape.attn_cls_mean(probs, &cross_layout)?);
            break;
        }
        let (a, probs) = attention(tape, b, h, memory, &format!("{lp}.cross"), &cross_layout)?;
        if last {
            alpha = Some(tape.attn_cls_mean(probs, &cross_layout)?);
        }
        x = tape.add(x, a)?;
        let h = layer_norm(tape, b, x, &format!("{lp}.ln3"))?;
        let f = feed_forward(tape, b, h, &format!("{lp}.ffn"))?;
        x = tape.add(x, f)?;
    }
    Ok(Decoded {
        alpha: alpha.expect("decoder has at least one layer"),
        sequence: need_sequence.then_some(x),
    })
}

/// `Linear(Σ α·F)` for each sample in the batch.
fn attend(tape: &mut Tape, b: &mut Binder, kind: DecoderKind, alpha: Var, img: Var, batch: usize) -> Result<Var> {
    let pooled = tape.bmm(alpha, img, batch)?;
    linear(tape, b, pooled, &format!("{}.attend", kind.prefix()))
}

/// Softmax over the per-candidate logits `score(x_cls ⊙ v)`.
fn score(tape: &mut Tape, b: &mut Binder, kind: DecoderKind, x_cls: Var, v: Var, batch: usize) -> Result<Var> {
    let rep: Vec<usize> = (0..batch).flat_map(|i| [i; N_CANDIDATES]).collect();
    let v_rep = tape.index_rows(v, &rep)?;
    let fused = tape.mul(x_cls, v_rep)?;
    let logits = linear(tape, b, fused, &format!("{}.score", kind.prefix()))?;
    let logits = tape.reshape(logits, &[batch, N_CANDIDATES])?;
    tape.softmax(logits, 1)
}

/// Batched forward pass recorded on `tape`.
///
/// In [`Mode::Test`] no reasoning-decoder parameter is touched.
pub fn forward_batch(tape: &mut Tape, b: &mut Binder, samples: &[&Sample], mode: Mode) -> Result<BatchForward> {
    let cfg = b.params().config().clone();
    let batch = samples.len();
    if batch == 0 {
        return Err(Error::Input("empty batch".into()));
    }
    let mut seqs = Vec::with_capacity(batch * N_CANDIDATES);
    for s in samples {
        if s.candidates.len() != N_CANDIDATES {
            return Err(Error::Input(format!(
                "sample {} has {} candidates, expected {N_CANDIDATES}",
                s.id,
                s.candidates.len()
            )));
        }
        if mode == Mode::Train && s.rationale.is_none() {
            return Err(Error::Input(format!(
                "sample {} has no rationale; train mode needs one",
                s.id
            )));
        }
        for c in &s.candidates {
            seqs.push(language_sequence(&cfg, &s.question, c)?);
        }
    }
    let grids: Vec<&FeatureGrid> = samples.iter().map(|s| &s.grid).collect();
    let img = pack_grids(tape, &cfg, &grids)?;

    let x_cls = encode_sequences(tape, b, &seqs)?;

    let questions: Vec<&[u32]> = samples.iter().map(|s| s.question.as_slice()).collect();
    let dq = decode(tape, b, DecoderKind::Question, &questions, img, false)?;
    let v_q = attend(tape, b, DecoderKind::Question, dq.alpha, img, batch)?;
    let y_q = score(tape, b, DecoderKind::Question, x_cls, v_q, batch)?;

    let reasoning = match mode {
        Mode::Test => None,
        Mode::Train => {
            let rationales: Vec<&[u32]> = samples
                .iter()
                .map(|s| s.rationale.as_deref().unwrap_or_default())
                .collect();
            let dr = decode(tape, b, DecoderKind::Reasoning, &rationales, img, false)?;
            let v_r = attend(tape, b, DecoderKind::Reasoning, dr.alpha, img, batch)?;
            let y_r = score(tape, b, DecoderKind::Reasoning, x_cls, v_r, batch)?;
            Some(ReasoningVars {
                alpha_r: dr.alpha,
                v_r,
                y_r,
            })
        }
    };

    Ok(BatchForward {
        batch,
        x_cls,
        alpha_q: dq.alpha,
        v_q,
        y_q,
        reasoning,
    })
}

/// Reasoning-decoder attention maps `[batch, h·w]` for samples that carry a
/// rationale. Touches neither the language stream nor the question decoder.
pub fn reasoning_attention(tape: &mut Tape, b: &mut Binder, samples: &[&Sample]) -> Result<Var> {
    let cfg = b.params().config().clone();
    if samples.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    let mut rationales = Vec::with_capacity(samples.len());
    for s in samples {
        let r = s
            .rationale
            .as_deref()
            .ok_or_else(|| Error::Input(format!("sample {} has no rationale", s.id)))?;
        rationales.push(r);
    }
    let grids: Vec<&FeatureGrid> = samples.iter().map(|s| &s.grid).collect();
    let img = pack_grids(tape, &cfg, &grids)?;
    Ok(decode(tape, b, DecoderKind::Reasoning, &rationales, img, false)?.alpha)
}

fn row_tensor(tape: &Tape, v: Var, row: usize) -> Tensor {
    Tensor::vector(tape.value(v).row(row))
}

fn attention_map(tape: &Tape, v: Var, row: usize, cfg: &ModelConfig) -> Result<AttentionMap> {
    AttentionMap::new(Tensor::new(
        vec![cfg.grid_h, cfg.grid_w],
        tape.value(v).row(row).to_vec(),
    )?)
}

impl BatchForward {
    /// Extracts the outputs of sample `i` as plain tensors.
    pub fn output(&self, tape: &Tape, i: usize, cfg: &ModelConfig) -> Result<ForwardOutput> {
        let d = cfg.d_model;
        let xc = tape.value(self.x_cls).data();
        let x_cls = Tensor::new(
            vec![N_CANDIDATES, d],
            xc[i * N_CANDIDATES * d..(i + 1) * N_CANDIDATES * d].to_vec(),
        )?;
        let reasoning = match self.reasoning {
            None => None,
            Some(r) => Some(ReasoningOutput {
                alpha_r: attention_map(tape, r.alpha_r, i, cfg)?,
                v_r: row_tensor(tape, r.v_r, i),
                y_r: row_tensor(tape, r.y_r, i),
            }),
        };
        Ok(ForwardOutput {
            x_cls,
            alpha_q: attention_map(tape, self.alpha_q, i, cfg)?,
            v_q: row_tensor(tape, self.v_q, i),
            y_q: row_tensor(tape, self.y_q, i),
            reasoning,
        })
    }
}

/// Full forward pass for one sample.
pub fn forward(sample: &Sample, params: &ModelParams, mode: Mode) -> Result<ForwardOutput> {
    let mut tape = Tape::new();
    let mut b = Binder::frozen(params);
    let out = forward_batch(&mut tape, &mut b, &[sample], mode)?;
    out.output(&tape, 0, params.config())
}

/// Pooled language representation of one question/answer pair, `[d_model]`.
pub fn encode_language(question: &[u32], answer: &[u32], params: &ModelParams) -> Result<Tensor> {
    let seq = language_sequence(params.config(), question, answer)?;
    let mut tape = Tape::new();
    let mut b = Binder::frozen(params);
    let x = encode_sequences(&mut tape, &mut b, &[seq])?;
    Ok(row_tensor(&tape, x, 0))
}

/// Runs one decoder on a single query sequence. Returns the `[CLS]`
/// attention map and the decoded sequence `[1 + len, d_model]`.
pub fn cross_attention_decode(
    query: &[u32],
    grid: &FeatureGrid,
    params: &ModelParams,
    kind: DecoderKind,
) -> Result<(AttentionMap, Tensor)> {
    let cfg = params.config();
    let mut tape = Tape::new();
    let mut b = Binder::frozen(params);
    let img = pack_grids(&mut tape, cfg, &[grid])?;
    let out = decode(&mut tape, &mut b, kind, &[query], img, true)?;
    let seq = tape.value(out.sequence.expect("sequence requested")).clone();
    Ok((attention_map(&tape, out.alpha, 0, cfg)?, seq))
}

/// `projection(Σ_{i,j} α[i,j]·F[i,j,·])`
pub fn attended_representation(alpha: &AttentionMap, grid: &FeatureGrid, projection: &Linear) -> Result<Tensor> {
    if (alpha.h(), alpha.w()) != (grid.h(), grid.w()) {
        return Err(Error::Dimension(format!(
            "attention {}×{} does not match grid {}×{}",
            alpha.h(),
            alpha.w(),
            grid.h(),
            grid.w()
        )));
    }
    let cells = grid.h() * grid.w();
    let mut tape = Tape::new();
    let a = tape.constant(alpha.weights().reshape(&[1, cells])?);
    let f = tape.constant(grid.features().reshape(&[cells, grid.d()])?);
    let w = tape.constant(projection.weight.clone());
    let bias = tape.constant(projection.bias.clone());
    let pooled = tape.bmm(a, f, 1)?;
    let y = tape.matmul(pooled, w)?;
    let y = tape.add_row(y, bias)?;
    Ok(row_tensor(&tape, y, 0))
}

/// `score_head(x_cls ⊙ v)` for one candidate.
pub fn fuse_and_score(x_cls: &Tensor, v: &Tensor, score_head: &Linear) -> Result<f64> {
    let d = x_cls.numel();
    if v.numel() != d || score_head.weight.shape() != [d, 1] {
        return Err(Error::Dimension(format!(
            "fuse_and_score: x_cls {:?}, v {:?}, head {:?}",
            x_cls.shape(),
            v.shape(),
            score_head.weight.shape()
        )));
    }
    let mut tape = Tape::new();
    let x = tape.constant(x_cls.reshape(&[1, d])?);
    let vv = tape.constant(v.reshape(&[1, d])?);
    let w = tape.constant(score_head.weight.clone());
    let bias = tape.constant(score_head.bias.clone());
    let fused = tape.mul(x, vv)?;
    let y = tape.matmul(fused, w)?;
    let y = tape.add_row(y, bias)?;
    Ok(tape.value(y).data()[0])
}
