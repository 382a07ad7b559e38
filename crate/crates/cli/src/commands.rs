use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use ghost_stereo::analysis::analyze;
use ghost_stereo::checkpoint;
use ghost_stereo::data::datasets::{kitti_pairs, load_pair, sceneflow_pairs, Split};
use ghost_stereo::data::kitti::{read_rgb, write_disparity_visualization, write_kitti_disparity};
use ghost_stereo::data::metrics::MetricReport;
use ghost_stereo::data::pfm::write_pfm;
use ghost_stereo::data::synthetic::random_dot_dataset;
use ghost_stereo::data::Normalization;
use ghost_stereo::inference::{evaluate_dataset, predict_disparity, EvalItem};
use ghost_stereo::nn::ParamStore;
use ghost_stereo::train::{evaluate_samples, train_loop, EpochRecord, LrSchedule, TrainOptions, TrainState};
use ghost_stereo::{validate_sample, GhostStereo, ModelConfig, StereoSample};
use log::{debug, info};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::args::{AnalyzeArgs, DataArgs, DatasetArg, EvalArgs, InferArgs, OutputFormat, SplitArg, TrainArgs};
use crate::manifest::RunManifest;

pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const EPOCH_LOG: &str = "metrics.jsonl";
pub const TEXT_LOG: &str = "train_log.txt";
pub const EVAL_REPORT: &str = "report.json";
/// Default random crop for file datasets.
const FILE_CROP: (usize, usize) = (256, 512);

struct Loaded {
    samples: Vec<StereoSample>,
    foreground: Vec<Option<Vec<bool>>>,
    source: String,
}

fn load_samples(data: &DataArgs, cfg: &ModelConfig, seed: u64) -> Result<Loaded> {
    let (raw, foreground, source) = if data.synthetic {
        let (h, w) = data.synthetic_size;
        let samples = random_dot_dataset(h, w, data.synthetic_pairs, seed)?;
        let n = samples.len();
        (samples, vec![None; n], format!("synthetic {h}x{w} x{n} seed {seed}"))
    } else {
        let Some(kind) = data.dataset else {
            bail!("no data source: pass --synthetic or --dataset");
        };
        let root = data
            .data_root
            .as_deref()
            .ok_or_else(|| anyhow!("no dataset root: pass --data-root or set GHOSTSTEREO_DATA_ROOT"))?;
        let mut pairs = match kind {
            DatasetArg::Sceneflow => sceneflow_pairs(
                root,
                match data.split {
                    SplitArg::Train => Split::Train,
                    SplitArg::Test => Split::Test,
                },
            )?,
            DatasetArg::Kitti => kitti_pairs(root)?,
        };
        if let Some(n) = data.limit {
            pairs.truncate(n);
        }
        let mut samples = Vec::with_capacity(pairs.len());
        let mut fg = Vec::with_capacity(pairs.len());
        for p in &pairs {
            let (s, f) = load_pair(p).with_context(|| format!("cannot load pair {}", p.id))?;
            samples.push(s);
            fg.push(f);
        }
        (
            samples,
            fg,
            format!("{kind:?} {} ({} pairs)", root.display(), pairs.len()).to_lowercase(),
        )
    };
    if raw.is_empty() {
        bail!("data source {source} has no pairs");
    }
    let samples = raw
        .into_iter()
        .map(|s| validate_sample(s, cfg))
        .collect::<ghost_stereo::Result<Vec<_>>>()?;
    Ok(Loaded {
        samples,
        foreground,
        source,
    })
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))
}

fn same_file(a: &Path, b: &Path) -> bool {
    match (a.canonicalize(), b.canonicalize()) {
        (Ok(x), Ok(y)) => x == y,
        _ => false,
    }
}

/// Refuse to write over any input.
fn guard_outputs(inputs: &[&Path], outputs: &[PathBuf]) -> Result<()> {
    for o in outputs {
        if let Some(i) = inputs.iter().find(|i| same_file(i, o)) {
            bail!("output {} would overwrite input {}", o.display(), i.display());
        }
    }
    Ok(())
}

/// Run `body` and record its outcome in the manifest of `dir`.
fn with_manifest(
    dir: &Path,
    command: &str,
    cfg: &ModelConfig,
    body: impl FnOnce() -> Result<serde_json::Value>,
) -> Result<()> {
    let mut manifest = RunManifest::begin(command, cfg);
    let outcome = body();
    manifest.finish(outcome.as_ref().map(|v| v.clone()));
    manifest.write(dir)?;
    outcome.map(|_| ())
}

#[derive(Serialize)]
struct EpochLine<'a> {
    round: u32,
    #[serde(flatten)]
    record: &'a EpochRecord,
}

struct TrainLogs {
    jsonl: BufWriter<File>,
    text: BufWriter<File>,
}

impl TrainLogs {
    fn create(dir: &Path) -> Result<Self> {
        let open = |name: &str| -> Result<BufWriter<File>> {
            let p = dir.join(name);
            Ok(BufWriter::new(
                File::create(&p).with_context(|| format!("cannot create {}", p.display()))?,
            ))
        };
        Ok(TrainLogs {
            jsonl: open(EPOCH_LOG)?,
            text: open(TEXT_LOG)?,
        })
    }

    fn epoch(&mut self, round: u32, r: &EpochRecord) -> std::io::Result<()> {
        serde_json::to_writer(&mut self.jsonl, &EpochLine { round, record: r })?;
        writeln!(self.jsonl)?;
        self.jsonl.flush()?;
        let val = r.val_epe.map(|v| format!(" val EPE {v:.4}")).unwrap_or_default();
        writeln!(
            self.text,
            "round {round} epoch {} step {} lr {:.3e} loss {:.5} train EPE {:.4} bad3 {:.2}%{val}",
            r.epoch, r.step, r.lr, r.mean_loss, r.train_epe, r.train_bad3
        )?;
        self.text.flush()
    }

    fn line(&mut self, line: &str) -> std::io::Result<()> {
        writeln!(self.text, "{line}")?;
        self.text.flush()
    }
}

enum Start {
    Resume(Box<TrainState>),
    Fresh(ParamStore),
}

pub fn train(a: &TrainArgs) -> Result<()> {
    if a.rounds == 0 {
        bail!("--rounds must be at least 1");
    }
    let (model, start) = match &a.resume {
        Some(p) => {
            let (model, state) =
                checkpoint::load_model(p).with_context(|| format!("cannot resume from {}", p.display()))?;
            (model, Start::Resume(Box::new(state)))
        }
        None => {
            let (model, store) = GhostStereo::new(&a.model.resolve()?)?;
            (model, Start::Fresh(store))
        }
    };
    let cfg = model.config.clone();
    let data = load_samples(&a.data, &cfg, cfg.seed)?;
    create_dir(&a.out)?;
    let outputs = [
        a.out.join(LAST_CHECKPOINT),
        a.out.join(FINAL_CHECKPOINT),
        a.out.join("config.json"),
    ];
    let inputs: Vec<&Path> = a
        .resume
        .iter()
        .map(PathBuf::as_path)
        .chain(a.model.config.as_deref())
        .collect();
    guard_outputs(&inputs, &outputs)?;
    cfg.save(&outputs[2])?;
    let mut state = match start {
        Start::Resume(s) => *s,
        Start::Fresh(store) => TrainState::new(&cfg, store, Normalization::fit(&data.samples)),
    };
    let resumed = state.step > 0;
    let crop = match (a.crop, a.data.synthetic) {
        (Some(c), _) => Some(c),
        (None, true) => None,
        (None, false) => Some(FILE_CROP),
    };
    info!(
        "training on {} for {} step(s) x {} round(s){}",
        data.source,
        a.steps,
        a.rounds,
        if resumed {
            format!(", resumed at step {}", state.step)
        } else {
            String::new()
        }
    );
    with_manifest(&a.out, "train", &cfg, || {
        let mut logs = TrainLogs::create(&a.out)?;
        let mut last: Option<EpochRecord> = None;
        let mut log_err: Option<std::io::Error> = None;
        let first_round = state.round;
        for r in 0..a.rounds {
            if r > 0 {
                state.start_round();
            }
            let round = state.round;
            let opts = TrainOptions {
                total_steps: state.round_start_step + a.steps,
                batch_size: a.batch_size,
                steps_per_epoch: a.steps_per_epoch,
                schedule: LrSchedule::for_phase(a.phase.into()),
                crop,
                checkpoint_dir: Some(a.out.clone()),
            };
            state = train_loop(
                &model,
                state,
                &data.samples,
                None,
                &opts,
                |s| debug!("step {} lr {:.3e} loss {:.5}", s.step, s.lr, s.loss),
                |e| {
                    if let Err(err) = logs.epoch(round, e) {
                        log_err.get_or_insert(err);
                    }
                    last = Some(e.clone());
                },
            )?;
            if let Some(err) = log_err.take() {
                return Err(anyhow!(err).context("cannot write metric logs"));
            }
        }
        checkpoint::save(&a.out.join(FINAL_CHECKPOINT), &state)?;
        let (epe, bad3) = match &last {
            Some(r) if r.step == state.step => (r.train_epe, r.train_bad3),
            _ => evaluate_samples(&model, &state.store, &state.norm, &data.samples)?,
        };
        let line = format!(
            "final step {} epoch {} train EPE {epe:.4} bad3 {bad3:.2}%",
            state.step, state.epoch
        );
        logs.line(&line)?;
        println!("{line}");
        Ok(json!({
            "data": data.source,
            "steps": state.step,
            "epochs": state.epoch,
            "rounds": state.round - first_round + 1,
            "deterministic": a.deterministic,
            "train_epe": epe,
            "train_bad3": bad3,
            "best_val_epe": state.best_val_epe,
            "checkpoint": FINAL_CHECKPOINT,
        }))
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub checkpoint: String,
    pub data: String,
    pub pairs: usize,
    pub step: u64,
    pub metrics: MetricReport,
}

impl EvalReport {
    fn to_text(&self) -> String {
        let m = &self.metrics;
        let opt = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.3}%"));
        format!(
            "{} on {} ({} pairs, {} valid px)\nEPE {:.4}\nD1-all {:.3}%  D1-bg {}  D1-fg {}\nbad1 {:.3}%  bad2 {:.3}%  bad3 {:.3}%",
            self.checkpoint,
            self.data,
            self.pairs,
            m.num_valid_pixels,
            m.epe,
            m.d1_all,
            opt(m.d1_bg),
            opt(m.d1_fg),
            m.bad1,
            m.bad2,
            m.bad3
        )
    }
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let (model, state) = checkpoint::load_model(&a.checkpoint)
        .with_context(|| format!("cannot load checkpoint {}", a.checkpoint.display()))?;
    let seed = a.seed.unwrap_or(state.config.seed);
    let data = load_samples(&a.data, &state.config, seed)?;
    create_dir(&a.out)?;
    let report_path = a.out.join(EVAL_REPORT);
    guard_outputs(&[&a.checkpoint], std::slice::from_ref(&report_path))?;
    with_manifest(&a.out, "eval", &state.config, || {
        let items: Vec<EvalItem> = data
            .samples
            .iter()
            .zip(&data.foreground)
            .map(|(sample, fg)| EvalItem {
                sample,
                foreground: fg.as_deref(),
            })
            .collect();
        let metrics = evaluate_dataset(&model, &state.store, &state.norm, &items)?;
        let report = EvalReport {
            checkpoint: a.checkpoint.display().to_string(),
            data: data.source.clone(),
            pairs: items.len(),
            step: state.step,
            metrics,
        };
        let body = serde_json::to_string_pretty(&report)?;
        std::fs::write(&report_path, &body).with_context(|| format!("cannot write {}", report_path.display()))?;
        match a.format {
            OutputFormat::Text => println!("{}", report.to_text()),
            OutputFormat::Json => println!("{body}"),
        }
        Ok(serde_json::to_value(&report)?)
    })
}

pub const DISPARITY_PFM: &str = "disparity.pfm";
pub const DISPARITY_PNG: &str = "disparity.png";
pub const DISPARITY_VIZ: &str = "disparity_color.png";

pub fn infer(a: &InferArgs) -> Result<()> {
    let (model, state) = checkpoint::load_model(&a.checkpoint)
        .with_context(|| format!("cannot load checkpoint {}", a.checkpoint.display()))?;
    let left = read_rgb(&a.left)?;
    let right = read_rgb(&a.right)?;
    if left.shape() != right.shape() {
        bail!(
            "left image is {:?} but right image is {:?}",
            left.shape(),
            right.shape()
        );
    }
    create_dir(&a.out)?;
    let mut outputs = vec![a.out.join(DISPARITY_PFM), a.out.join(DISPARITY_PNG)];
    if !a.no_viz {
        outputs.push(a.out.join(DISPARITY_VIZ));
    }
    guard_outputs(&[&a.checkpoint, &a.left, &a.right], &outputs)?;
    with_manifest(&a.out, "infer", &state.config, || {
        let disp = predict_disparity(&model, &state.store, &state.norm, &left, &right)?;
        write_pfm(&outputs[0], &disp)?;
        write_kitti_disparity(&outputs[1], &disp)?;
        if !a.no_viz {
            write_disparity_visualization(&outputs[2], &disp, state.config.max_disparity as f64)?;
        }
        let d = disp.data();
        let (min, max) = d.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
        info!(
            "wrote {} ({}x{}, disparity {min:.2}..{max:.2})",
            outputs[0].display(),
            disp.dim(0),
            disp.dim(1)
        );
        Ok(json!({
            "left": a.left.display().to_string(),
            "right": a.right.display().to_string(),
            "height": disp.dim(0),
            "width": disp.dim(1),
            "min_disparity": min,
            "max_disparity": max,
            "mean_disparity": disp.mean(),
            "files": outputs.iter().filter_map(|p| p.file_name()).map(|n| n.to_string_lossy().into_owned()).collect::<Vec<_>>(),
        }))
    })
}

pub fn analyze_cmd(a: &AnalyzeArgs) -> Result<()> {
    let cfg = a.model.resolve()?;
    let report = analyze(&cfg, a.batch, a.height, a.width).context("cannot analyze configuration")?;
    let text = report.to_text();
    let body = serde_json::to_string_pretty(&report)?;
    match a.format {
        OutputFormat::Text => print!("{text}"),
        OutputFormat::Json => println!("{body}"),
    }
    let Some(dir) = &a.out else { return Ok(()) };
    create_dir(dir)?;
    let outputs = [dir.join("analysis.txt"), dir.join("analysis.json")];
    let inputs: Vec<&Path> = a.model.config.iter().map(PathBuf::as_path).collect();
    guard_outputs(&inputs, &outputs)?;
    with_manifest(dir, "analyze", &cfg, || {
        std::fs::write(&outputs[0], &text).with_context(|| format!("cannot write {}", outputs[0].display()))?;
        std::fs::write(&outputs[1], &body).with_context(|| format!("cannot write {}", outputs[1].display()))?;
        Ok(json!({
            "total_params": report.model.total_params,
            "total_macs": report.model.total_macs,
            "twin_total_params": report.vanilla_twin.total_params,
            "twin_total_macs": report.vanilla_twin.total_macs,
            "compression": report.compression,
        }))
    })
}
