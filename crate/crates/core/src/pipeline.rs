//! End-to-end runs shared by the command line tool and the acceptance tests:
//! synthetic corpus generation, preparation into a segment cache with splits,
//! per-seed training, per-seed evaluation with a cross-seed mean, and
//! single-series prediction. Every function writes only derived, timestamp
//! free artifacts, so reruns with equal inputs produce identical bytes.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::data::{
    self, load_rri_csv, load_segment_cache, pre_event_crop, resample_window, save_segment_cache,
    split_subjects, window_segments, BeatSeries, Segment, Splits, SynthConfig, WINDOW_LEN,
};
use crate::error::Error;
use crate::metrics::{self, MetricsReport};
use crate::model::{checkpoint_header, CkptMeta, Model, ModelConfig};
use crate::tensor::{Element, Tensor};
use crate::train::{self, evaluate, OptimConfig, TrainOutcome};
use crate::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl FromStr for Precision {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(Error::Config(format!(
                "precision must be f32 or f64, got '{other}'"
            ))),
        }
    }
}

pub const DEFAULT_SEEDS: [u64; 5] = [101, 102, 103, 104, 105];

/// Model, optimizer, and generator settings resolved from a key=value file
/// plus overrides.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub synth: SynthConfig,
}

fn parse_scalar(raw: &str) -> Value {
    let raw = raw.trim();
    if raw == "auto" || raw == "null" {
        return Value::Null;
    }
    if let Ok(v) = raw.parse::<i64>() {
        return json!(v);
    }
    if let Ok(v) = raw.parse::<f64>() {
        return json!(v);
    }
    if let Ok(v) = raw.parse::<bool>() {
        return json!(v);
    }
    json!(raw)
}

fn parse_value(raw: &str) -> Value {
    let raw = raw.trim();
    if raw.contains(',') {
        Value::Array(raw.split(',').map(parse_scalar).collect())
    } else {
        parse_scalar(raw)
    }
}

fn render_value(v: &Value) -> String {
    match v {
        Value::Null => "auto".into(),
        Value::Array(items) => items.iter().map(render_value).collect::<Vec<_>>().join(","),
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

impl RunConfig {
    /// Applies one dotted `section.field=value` override.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        let (section, field) = key
            .split_once('.')
            .ok_or_else(|| Error::Config(format!("key '{key}' is not section.field")))?;
        let bad = |e: String| Error::Config(format!("cannot set {key}={value}: {e}"));
        let set = |obj: Value| -> Result<Value> {
            let mut obj = obj;
            let map = obj.as_object_mut().expect("configs serialize to objects");
            if !map.contains_key(field) {
                return Err(bad(format!("unknown field '{field}'")));
            }
            map.insert(field.to_string(), parse_value(value));
            Ok(obj)
        };
        match section {
            "model" => {
                let v = set(serde_json::to_value(&self.model).unwrap())?;
                self.model = serde_json::from_value(v).map_err(|e| bad(e.to_string()))?;
            }
            "optim" => {
                let v = set(serde_json::to_value(&self.optim).unwrap())?;
                self.optim = serde_json::from_value(v).map_err(|e| bad(e.to_string()))?;
            }
            "synth" => {
                let v = set(serde_json::to_value(&self.synth).unwrap())?;
                self.synth = serde_json::from_value(v).map_err(|e| bad(e.to_string()))?;
            }
            other => return Err(Error::Config(format!("unknown config section '{other}'"))),
        }
        Ok(())
    }

    /// Parses a flat key=value file ('#' comments, blank lines allowed);
    /// later assignments win.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: path.display().to_string(),
                line: i as u64 + 1,
                msg: format!("expected key=value, got '{line}'"),
            })?;
            self.apply(k.trim(), v.trim())?;
        }
        Ok(())
    }

    /// Full settings as sorted `section.field=value` lines, the same syntax
    /// [`RunConfig::apply_file`] reads back.
    pub fn dump(&self) -> String {
        let mut lines = Vec::new();
        for (section, value) in [
            ("model", serde_json::to_value(&self.model).unwrap()),
            ("optim", serde_json::to_value(&self.optim).unwrap()),
            ("synth", serde_json::to_value(&self.synth).unwrap()),
        ] {
            for (k, v) in value.as_object().unwrap() {
                lines.push(format!("{section}.{k}={}", render_value(v)));
            }
        }
        lines.sort();
        lines.join("\n") + "\n"
    }

    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        let path = dir.join("config.resolved");
        std::fs::write(&path, self.dump()).map_err(|e| Error::io(&path, e))
    }
}

/// Creates `dir`; refuses to reuse a non-empty one unless `force`.
pub fn ensure_out_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let occupied = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .next()
            .is_some();
        if occupied && !force {
            return Err(Error::Config(format!(
                "output directory {} is not empty (use --force to overwrite)",
                dir.display()
            )));
        }
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Other(format!("serializing {}: {e}", path.display())))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

// ── synth ────────────────────────────────────────────────────────────────

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SynthSummary {
    pub seed: u64,
    pub n_control: usize,
    pub n_event: usize,
    pub files: Vec<String>,
    pub total_beats: u64,
}

/// Writes one CSV per synthetic subject plus `manifest.json`.
pub fn run_synth(cfg: &SynthConfig, seed: u64, out: &Path, force: bool) -> Result<SynthSummary> {
    ensure_out_dir(out, force)?;
    let mut files = Vec::new();
    let mut total_beats = 0u64;
    let mut emit = |series: BeatSeries| -> Result<()> {
        let name = format!("{}.csv", series.subject_id);
        total_beats += series.beats.len() as u64;
        data::write_rri_csv(&out.join(&name), &[series])?;
        files.push(name);
        Ok(())
    };
    for i in 0..cfg.n_control {
        emit(data::synth_control(cfg, i, seed))?;
    }
    for i in 0..cfg.n_event {
        emit(data::synth_pre_event(cfg, i, seed))?;
    }
    files.sort();
    let summary = SynthSummary {
        seed,
        n_control: cfg.n_control,
        n_event: cfg.n_event,
        files,
        total_beats,
    };
    write_json(
        &out.join("manifest.json"),
        &json!({ "config": cfg, "summary": &summary }),
    )?;
    Ok(summary)
}

// ── prepare ──────────────────────────────────────────────────────────────

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Exclusion {
    pub subject: String,
    pub reason: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PrepareSummary {
    pub n_subjects: usize,
    pub n_event_subjects: usize,
    pub n_segments: usize,
    pub n_event_segments: usize,
    pub skipped_windows: usize,
    pub exclusions: Vec<Exclusion>,
    pub seeds: Vec<u64>,
    pub counts: BTreeMap<String, usize>,
}

fn csv_files_sorted(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    files.sort();
    Ok(files)
}

/// Loads every CSV under `data_dir`, crops event records to their pre-onset
/// history, windows everything into the segment cache, and writes one split
/// file per requested seed. Subjects that cannot be processed land in
/// `exclusions.json` and the run continues.
pub fn run_prepare(
    data_dir: &Path,
    out: &Path,
    seeds: &[u64],
    force: bool,
) -> Result<PrepareSummary> {
    ensure_out_dir(out, force)?;
    let mut exclusions = Vec::new();
    let mut records = Vec::new();
    for file in csv_files_sorted(data_dir)? {
        match load_rri_csv(&file) {
            Ok(recs) => records.extend(recs),
            Err(e) => exclusions.push(Exclusion {
                subject: file.file_name().unwrap().to_string_lossy().into_owned(),
                reason: e.to_string(),
            }),
        }
    }
    records.sort_by(|a, b| a.subject_id.cmp(&b.subject_id));

    let mut segments: Vec<Segment> = Vec::new();
    let mut skipped_windows = 0;
    let mut event_ids = Vec::new();
    let mut control_ids = Vec::new();
    let mut n_event_subjects = 0;
    let n_subjects = records.len();
    for rec in &records {
        let windowed = if rec.label == 1 {
            n_event_subjects += 1;
            match pre_event_crop(rec) {
                Ok(cropped) => cropped,
                Err(e) => {
                    exclusions.push(Exclusion {
                        subject: rec.subject_id.clone(),
                        reason: e.to_string(),
                    });
                    continue;
                }
            }
        } else {
            rec.clone()
        };
        let (segs, skipped) = window_segments(&windowed);
        skipped_windows += skipped;
        if segs.is_empty() {
            exclusions.push(Exclusion {
                subject: rec.subject_id.clone(),
                reason: "no complete windows".into(),
            });
            continue;
        }
        if rec.label == 1 {
            event_ids.push(rec.subject_id.clone());
        } else {
            control_ids.push(rec.subject_id.clone());
        }
        segments.extend(segs);
    }

    save_segment_cache(out, &segments)?;
    let mut counts = BTreeMap::new();
    for seed in seeds {
        let splits = split_subjects(&[&event_ids[..], &control_ids[..]], *seed);
        // a subject must never appear in two splits
        let mut all: Vec<&String> = splits
            .train
            .iter()
            .chain(&splits.val)
            .chain(&splits.test)
            .collect();
        let total = all.len();
        all.sort();
        all.dedup();
        assert_eq!(
            all.len(),
            total,
            "split leak: a subject landed in two splits"
        );
        counts = data::count_by_split(&segments, &splits);
        write_json(&out.join(format!("splits_seed{seed}.json")), &splits)?;
    }
    write_json(&out.join("exclusions.json"), &exclusions)?;
    let summary = PrepareSummary {
        n_subjects,
        n_event_subjects,
        n_segments: segments.len(),
        n_event_segments: segments.iter().filter(|s| s.label == 1).count(),
        skipped_windows,
        exclusions,
        seeds: seeds.to_vec(),
        counts,
    };
    write_json(&out.join("manifest.json"), &summary)?;
    Ok(summary)
}

fn load_splits(prep: &Path, seed: u64) -> Result<Splits> {
    let path = prep.join(format!("splits_seed{seed}.json"));
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        line: 0,
        msg: e.to_string(),
    })
}

fn partition<'a>(
    segments: &'a [Segment],
    splits: &Splits,
) -> (Vec<&'a Segment>, Vec<&'a Segment>, Vec<&'a Segment>) {
    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut test = Vec::new();
    for seg in segments {
        match splits.split_of(&seg.subject_id) {
            Some("train") => train.push(seg),
            Some("val") => val.push(seg),
            Some("test") => test.push(seg),
            _ => {}
        }
    }
    (train, val, test)
}

fn owned(segs: &[&Segment]) -> Vec<Segment> {
    segs.iter().map(|s| (*s).clone()).collect()
}

// ── train ────────────────────────────────────────────────────────────────

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainSummary {
    pub seed: u64,
    pub precision: Precision,
    pub checkpoint: String,
    pub n_train: usize,
    pub n_val: usize,
    pub outcome: TrainOutcome,
}

fn train_generic<E: Element>(
    prep: &Path,
    out: &Path,
    model_cfg: &ModelConfig,
    optim: &OptimConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&train::EpochStats),
) -> Result<TrainSummary> {
    let segments = load_segment_cache(prep)?;
    let splits = load_splits(prep, seed)?;
    let (train_refs, val_refs, _) = partition(&segments, &splits);
    let (train_segs, val_segs) = (owned(&train_refs), owned(&val_refs));
    let mut model = Model::<E>::build(model_cfg.clone(), seed)?;

    let history_path = out.join(format!("history_seed{seed}.jsonl"));
    let mut history_lines = Vec::new();
    let outcome = train::train(&mut model, &train_segs, &val_segs, optim, seed, |stats| {
        history_lines.push(serde_json::to_string(stats).unwrap());
        on_epoch(stats);
    })?;
    std::fs::write(&history_path, history_lines.join("\n") + "\n")
        .map_err(|e| Error::io(&history_path, e))?;

    let ckpt_name = format!("model_seed{seed}.ckpt");
    let meta = CkptMeta {
        epoch: outcome.best_epoch,
        best_val_loss: outcome
            .best_val_loss
            .is_finite()
            .then_some(outcome.best_val_loss),
        seed,
    };
    model.save_checkpoint(&out.join(&ckpt_name), &meta)?;
    let summary = TrainSummary {
        seed,
        precision: if E::DTYPE == "f32" {
            Precision::F32
        } else {
            Precision::F64
        },
        checkpoint: ckpt_name,
        n_train: train_segs.len(),
        n_val: val_segs.len(),
        outcome,
    };
    write_json(&out.join(format!("train_seed{seed}.json")), &summary)?;
    Ok(summary)
}

/// Trains one seed from a prepared cache and writes the checkpoint, the
/// epoch history (JSON lines), and a summary. `on_epoch` observes progress.
#[allow(clippy::too_many_arguments)]
pub fn run_train(
    prep: &Path,
    out: &Path,
    model_cfg: &ModelConfig,
    optim: &OptimConfig,
    seed: u64,
    precision: Precision,
    force: bool,
    on_epoch: impl FnMut(&train::EpochStats),
) -> Result<TrainSummary> {
    ensure_out_dir(out, force)?;
    match precision {
        Precision::F32 => train_generic::<f32>(prep, out, model_cfg, optim, seed, on_epoch),
        Precision::F64 => train_generic::<f64>(prep, out, model_cfg, optim, seed, on_epoch),
    }
}

// ── eval ─────────────────────────────────────────────────────────────────

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalOutput {
    pub seed: u64,
    pub split: String,
    pub n_subjects: usize,
    #[serde(flatten)]
    pub segment_level: MetricsReport,
    /// Same metrics after collapsing each subject's segments to its
    /// positive-vote fraction.
    pub subject_level: MetricsReport,
}

fn eval_generic<E: Element>(
    prep: &Path,
    ckpt: &Path,
    split: &str,
    seed: u64,
    batch_size: usize,
) -> Result<EvalOutput> {
    let segments = load_segment_cache(prep)?;
    let splits = load_splits(prep, seed)?;
    let (train_refs, val_refs, test_refs) = partition(&segments, &splits);
    let chosen = match split {
        "train" => train_refs,
        "val" => val_refs,
        "test" => test_refs,
        other => {
            return Err(Error::Config(format!(
                "split must be train, val, or test, got '{other}'"
            )))
        }
    };
    if chosen.is_empty() {
        return Err(Error::Config(format!(
            "split '{split}' holds no segments for seed {seed}"
        )));
    }
    let segs = owned(&chosen);
    let (mut model, _) = Model::<E>::load_checkpoint(ckpt)?;
    let (probs, _) = evaluate(&mut model, &segs, batch_size)?;
    let labels: Vec<u8> = segs.iter().map(|s| s.label).collect();
    let subjects: Vec<String> = segs.iter().map(|s| s.subject_id.clone()).collect();
    let segment_level = metrics::report(&probs, &labels, 0.5);
    let (ids, votes, vote_labels) = metrics::subject_votes(&subjects, &probs, &labels, 0.5);
    let subject_level = metrics::report(&votes, &vote_labels, 0.5);
    Ok(EvalOutput {
        seed,
        split: split.into(),
        n_subjects: ids.len(),
        segment_level,
        subject_level,
    })
}

/// Evaluates one seed's checkpoint on one split of the prepared data and
/// writes `metrics_seed<k>.json`. Numeric precision follows the checkpoint.
pub fn run_eval(
    prep: &Path,
    ckpt: &Path,
    out: &Path,
    split: &str,
    seed: u64,
    batch_size: usize,
) -> Result<EvalOutput> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let (dtype, _, _) = checkpoint_header(ckpt)?;
    let output = match dtype.as_str() {
        "f32" => eval_generic::<f32>(prep, ckpt, split, seed, batch_size)?,
        "f64" => eval_generic::<f64>(prep, ckpt, split, seed, batch_size)?,
        other => {
            return Err(Error::Checkpoint {
                path: ckpt.display().to_string(),
                msg: format!("unsupported dtype '{other}'"),
            })
        }
    };
    write_json(&out.join(format!("metrics_seed{seed}.json")), &output)?;
    Ok(output)
}

/// Cross-seed mean and standard deviation of the headline metrics, from the
/// per-seed files `run_eval` wrote into `out`.
pub fn run_eval_mean(out: &Path, seeds: &[u64]) -> Result<Value> {
    let mut per_metric: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for seed in seeds {
        let path = out.join(format!("metrics_seed{seed}.json"));
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let v: Value = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: 0,
            msg: e.to_string(),
        })?;
        for key in ["sens", "spec", "f1_weighted", "auroc", "auprc"] {
            if let Some(x) = v.get(key).and_then(Value::as_f64) {
                per_metric.entry(key).or_default().push(x);
            }
        }
    }
    let mut mean = serde_json::Map::new();
    let mut sd = serde_json::Map::new();
    let mut defined = serde_json::Map::new();
    for (key, values) in &per_metric {
        let (m, s) = metrics::mean_sd(values);
        mean.insert(key.to_string(), json!(m));
        sd.insert(key.to_string(), json!(s));
        defined.insert(key.to_string(), json!(values.len()));
    }
    let summary = json!({
        "seeds": seeds,
        "mean": mean,
        "sd": sd,
        "defined_seeds": defined,
    });
    write_json(&out.join("metrics_mean.json"), &summary)?;
    Ok(summary)
}

// ── predict ──────────────────────────────────────────────────────────────

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PredictOutput {
    pub subject_id: String,
    pub window_start_s: f64,
    pub n_windows_available: usize,
    pub p_event: f64,
    pub p_control: f64,
}

fn predict_generic<E: Element>(ckpt: &Path, values: &[f64]) -> Result<(f64, f64)> {
    let (mut model, _) = Model::<E>::load_checkpoint(ckpt)?;
    let data: Vec<E> = values
        .iter()
        .map(|&v| E::from_f64(v as f32 as f64))
        .collect();
    let x = Tensor::new(vec![1, 1, values.len()], data);
    let probs = model.predict_proba(&x)?;
    Ok((probs[0][1], probs[0][0]))
}

/// Scores the last complete window of one subject's series with a trained
/// checkpoint. The CSV must contain exactly one subject unless `subject`
/// names which one to use.
pub fn run_predict(ckpt: &Path, csv: &Path, subject: Option<&str>) -> Result<PredictOutput> {
    let records = load_rri_csv(csv)?;
    let rec = match subject {
        Some(id) => records
            .iter()
            .find(|r| r.subject_id == id)
            .ok_or_else(|| Error::Record {
                subject: id.into(),
                msg: "not in the file".into(),
            })?,
        None => {
            if records.len() != 1 {
                let ids: Vec<&str> = records.iter().map(|r| r.subject_id.as_str()).collect();
                return Err(Error::Config(format!(
                    "file holds {} subjects ({}); pick one with --subject",
                    records.len(),
                    ids.join(", ")
                )));
            }
            &records[0]
        }
    };
    let span = rec.t_end - rec.t_start;
    let n_windows = if span + 1.0 >= WINDOW_LEN as f64 {
        ((span - (WINDOW_LEN as f64 - 1.0)) / WINDOW_LEN as f64) as usize + 1
    } else {
        0
    };
    if n_windows == 0 {
        return Err(Error::WindowNotCovered {
            t0: rec.t_start,
            t0_end: rec.t_start + WINDOW_LEN as f64 - 1.0,
            msg: format!("series spans {span:.0}s, shorter than one window"),
        });
    }
    let t0 = rec.t_start + ((n_windows - 1) * WINDOW_LEN) as f64;
    let values = resample_window(&rec.times, &rec.rr, t0, WINDOW_LEN)?;
    let (dtype, config, _) = checkpoint_header(ckpt)?;
    if config.input_len != WINDOW_LEN {
        return Err(Error::Config(format!(
            "checkpoint expects input length {}, windows are {WINDOW_LEN}",
            config.input_len
        )));
    }
    let (p_event, p_control) = match dtype.as_str() {
        "f32" => predict_generic::<f32>(ckpt, &values)?,
        "f64" => predict_generic::<f64>(ckpt, &values)?,
        other => {
            return Err(Error::Checkpoint {
                path: ckpt.display().to_string(),
                msg: format!("unsupported dtype '{other}'"),
            })
        }
    };
    Ok(PredictOutput {
        subject_id: rec.subject_id.clone(),
        window_start_s: t0,
        n_windows_available: n_windows,
        p_event,
        p_control,
    })
}
