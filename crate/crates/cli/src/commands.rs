use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use attd_core::evalviz::{ablation, check_compatible, compare_checkpoints, evaluate, fit_to_dataset};
use attd_core::gridvqa::{generate_dataset, load_dataset};
use attd_core::selfcheck::{run_selfcheck_with, SelfCheckOptions};
use attd_core::trainloop::{
    final_checkpoint_path, load_checkpoint, save_checkpoint, train_stage1, train_stage2, MetricsLog, RecordKind,
};
use attd_core::{AttentionMap, Dataset, Error, GenConfig, ModelConfig, Split, TrainConfig, TrainState};

use crate::manifest::RunRecorder;
use crate::{Cli, Command, EvalArgs, Failure, GenDataArgs, SelfcheckArgs, SplitArg, StageArg, TrainArgs, VizArgs};

pub fn run(cli: Cli) -> Result<(), Failure> {
    let manifest = cli.run_manifest;
    match cli.command {
        Command::GenData(a) => gen_data(a, manifest),
        Command::Train(a) => train(a, manifest),
        Command::Eval(a) => eval(a, false, manifest),
        Command::Ablate(a) => eval(a, true, manifest),
        Command::Viz(a) => viz(a, manifest),
        Command::Selfcheck(a) => selfcheck(a, manifest),
    }
}

fn print_json(value: &impl Serialize) {
    println!("{}", serde_json::to_string_pretty(value).expect("reports serialize"));
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|source| Error::Io { path: dir.into(), source })?;
    }
    let mut text = serde_json::to_string_pretty(value).expect("reports serialize");
    text.push('\n');
    std::fs::write(path, text).map_err(|source| Error::Io { path: path.into(), source })?;
    Ok(())
}

fn read_config<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, Failure> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io { path: path.into(), source })?;
    serde_json::from_str(&text).map_err(|e| Failure::usage(format!("config {}: {e}", path.display())))
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct GenSettings {
    seed: u64,
    train: usize,
    val: usize,
    config: GenConfig,
}

impl Default for GenSettings {
    fn default() -> Self {
        Self {
            seed: 1,
            train: 4000,
            val: 1000,
            config: GenConfig::default(),
        }
    }
}

#[derive(Serialize)]
struct GenSummary<'a> {
    out: &'a Path,
    seed: u64,
    train: usize,
    val: usize,
    config: &'a GenConfig,
    checksums: &'a std::collections::BTreeMap<String, u32>,
}

fn gen_data(a: GenDataArgs, manifest: Option<PathBuf>) -> Result<(), Failure> {
    let mut rec = RunRecorder::start("gen-data");
    let mut s: GenSettings = match &a.config {
        Some(p) => read_config(p)?,
        None => GenSettings::default(),
    };
    if let Some(v) = a.seed {
        s.seed = v;
    }
    if let Some(v) = a.train {
        s.train = v;
    }
    if let Some(v) = a.val {
        s.val = v;
    }
    if let Some((h, w)) = a.grid {
        s.config.grid_h = h;
        s.config.grid_w = w;
    }
    if let Some(v) = a.d_visual {
        s.config.d_visual = v;
    }
    if let Some(v) = a.noise_sigma {
        s.config.noise_sigma = v;
    }
    let (_, m) = generate_dataset(s.train, s.val, &s.config, s.seed, &a.out)?;
    print_json(&GenSummary {
        out: &a.out,
        seed: m.seed,
        train: m.counts.train,
        val: m.counts.val,
        config: &m.config,
        checksums: &m.checksums,
    });
    rec.seed(s.seed);
    rec.config(&s);
    rec.dataset(&a.out)?;
    rec.artifact(&a.out);
    rec.finish(&manifest.unwrap_or_else(|| a.out.join("run-gen-data.json")))
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TrainSettings {
    model: ModelConfig,
    train: TrainConfig,
}

#[derive(Serialize)]
struct StageSummary {
    stage: u8,
    epochs: usize,
    step: u64,
    val_acc: Option<f64>,
    attn_on_target: Option<f64>,
    val_kl: Option<f64>,
    checkpoint: PathBuf,
}

#[derive(Serialize)]
struct TrainSummary {
    stages: Vec<StageSummary>,
    metrics: PathBuf,
}

fn train(a: TrainArgs, manifest: Option<PathBuf>) -> Result<(), Failure> {
    let mut rec = RunRecorder::start("train");
    let mut s: TrainSettings = match &a.config {
        Some(p) => read_config(p)?,
        None => TrainSettings::default(),
    };
    let tc = &mut s.train;
    if let Some(v) = a.seed {
        tc.seed = v;
    }
    if let Some(v) = a.batch_size {
        tc.batch_size = v;
    }
    if let Some(v) = a.log_every {
        tc.log_every = v;
    }
    if a.train_language {
        tc.train_language_in_stage2 = true;
    }
    if let Some(e) = a.epochs {
        match a.stage {
            StageArg::One => tc.stage1_epochs = e,
            StageArg::Two => tc.stage2_epochs = e,
            StageArg::Both => (tc.stage1_epochs, tc.stage2_epochs) = (e, e),
        }
    }
    tc.checkpoint_dir = Some(a.out.clone());
    tc.validate()?;
    if a.stage == StageArg::Two && a.from.is_none() {
        return Err(Failure::usage("--stage 2 needs --from <stage-1 checkpoint>"));
    }

    let data = load_dataset(&a.data)?;
    let state = match &a.from {
        Some(p) => load_checkpoint(p)?,
        None => TrainState::init(&fit_to_dataset(&s.model, &data), s.train.seed)?,
    };
    check_compatible(state.params.config(), &data)?;
    s.model = state.params.config().clone();
    rec.seed(s.train.seed);
    rec.config(serde_json::json!({
        "stage": format!("{:?}", a.stage).to_lowercase(),
        "data": a.data,
        "from": a.from,
        "model": s.model,
        "train": s.train,
    }));
    rec.dataset(&a.data)?;

    let metrics = a.out.join("metrics.jsonl");
    if a.from.is_none() {
        // A fresh run starts a fresh log.
        std::fs::create_dir_all(&a.out).map_err(|source| Error::Io { path: a.out.clone(), source })?;
        std::fs::write(&metrics, b"").map_err(|source| Error::Io { path: metrics.clone(), source })?;
    }
    let mut log = MetricsLog::to_file(&metrics)?;
    let mut stages = Vec::new();
    let mut state = state;
    let run_one = matches!(a.stage, StageArg::One | StageArg::Both) && state.stage == 1;
    if a.stage == StageArg::One && state.stage != 1 {
        return Err(Failure::usage("--stage 1 cannot continue a stage-2 checkpoint"));
    }
    if run_one {
        state = train_stage1(&data, &s.train, state, &mut log)?;
        stages.push(finish_stage(&state, &a.out, &log)?);
    }
    if matches!(a.stage, StageArg::Two | StageArg::Both) {
        state = train_stage2(&data, &s.train, state, &mut log)?;
        stages.push(finish_stage(&state, &a.out, &log)?);
    }
    for st in &stages {
        rec.artifact(&st.checkpoint);
    }
    rec.artifact(&metrics);
    print_json(&TrainSummary { stages, metrics });
    rec.finish(&manifest.unwrap_or_else(|| a.out.join("run-train.json")))
}

fn finish_stage(state: &TrainState, out: &Path, log: &MetricsLog) -> Result<StageSummary, Failure> {
    // Also covers zero-epoch runs, which write no per-epoch checkpoint.
    let checkpoint = final_checkpoint_path(out, state.stage);
    save_checkpoint(state, &checkpoint)?;
    let last = log
        .records()
        .iter()
        .rev()
        .find(|r| r.kind == RecordKind::Epoch && r.stage == state.stage);
    Ok(StageSummary {
        stage: state.stage,
        epochs: state.epoch,
        step: state.step,
        val_acc: last.and_then(|r| r.val_acc),
        attn_on_target: last.and_then(|r| r.attn_on_target),
        val_kl: last.and_then(|r| r.val_kl),
        checkpoint,
    })
}

fn split_of(s: SplitArg) -> Split {
    match s {
        SplitArg::Train => Split::Train,
        SplitArg::Val => Split::Val,
    }
}

fn load_pair(ckpt: &Path, data: &Path) -> Result<(TrainState, Dataset), Failure> {
    let state = load_checkpoint(ckpt)?;
    let data = load_dataset(data)?;
    check_compatible(state.params.config(), &data)?;
    Ok((state, data))
}

#[derive(Serialize)]
struct EvalOutput<'a, R: Serialize> {
    checkpoint: &'a Path,
    stage: u8,
    split: Split,
    #[serde(flatten)]
    report: R,
}

fn eval(a: EvalArgs, masked: bool, manifest: Option<PathBuf>) -> Result<(), Failure> {
    let command = if masked { "ablate" } else { "eval" };
    let mut rec = RunRecorder::start(command);
    let (state, data) = load_pair(&a.ckpt, &a.data)?;
    let split = split_of(a.split);
    let samples = data.split(split);
    let report = if masked {
        serde_json::to_value(ablation(&state.params, samples)?)
    } else {
        serde_json::to_value(evaluate(&state.params, samples)?)
    }
    .expect("reports serialize");
    let out = EvalOutput {
        checkpoint: &a.ckpt,
        stage: state.stage,
        split,
        report,
    };
    print_json(&out);
    if let Some(p) = &a.out {
        write_json(p, &out)?;
        rec.artifact(p);
    }
    rec.config(serde_json::json!({ "ckpt": a.ckpt, "data": a.data, "split": split, "out": a.out }));
    rec.dataset(&a.data)?;
    let default = {
        let stem = a.ckpt.file_stem().unwrap_or_default().to_string_lossy();
        a.ckpt.with_file_name(format!("{stem}.{command}-{split}.run.json"))
    };
    rec.finish(&manifest.unwrap_or(default))
}

fn viz(a: VizArgs, manifest: Option<PathBuf>) -> Result<(), Failure> {
    let mut rec = RunRecorder::start("viz");
    let (baseline, data) = load_pair(&a.baseline, &a.data)?;
    let distilled = load_checkpoint(&a.distilled)?;
    check_compatible(distilled.params.config(), &data)?;
    let split = split_of(a.split);
    let report = compare_checkpoints(&baseline.params, &distilled.params, data.split(split), a.samples, Some(&a.out))?;
    print_json(&report);
    rec.config(serde_json::json!({
        "baseline": a.baseline,
        "distilled": a.distilled,
        "data": a.data,
        "split": split,
        "samples": a.samples,
        "out": a.out,
    }));
    rec.dataset(&a.data)?;
    for h in &report.heatmaps {
        for p in h.baseline.iter().chain(&h.distilled) {
            rec.artifact(p);
        }
    }
    rec.artifact(a.out.join("summary.json"));
    rec.finish(&manifest.unwrap_or_else(|| a.out.join("run-viz.json")))
}

fn flipped_kl(p: &AttentionMap, q: &AttentionMap) -> attd_core::Result<f64> {
    attd_core::losses::forward_kl(p, q).map(|v| -v)
}

fn selfcheck(a: SelfcheckArgs, manifest: Option<PathBuf>) -> Result<(), Failure> {
    let mut rec = RunRecorder::start("selfcheck");
    let mut opts = SelfCheckOptions::default();
    if a.corrupt_kl_sign {
        opts.forward_kl = flipped_kl;
    }
    let report = run_selfcheck_with(&opts);
    print_json(&report);
    rec.config(serde_json::json!({ "corrupt_kl_sign": a.corrupt_kl_sign }));
    if let Some(p) = manifest {
        rec.finish(&p)?;
    }
    match report.first_failure() {
        None => Ok(()),
        Some(c) => Err(Failure::property(format!("selfcheck failed: {}: {}", c.name, c.detail))),
    }
}
