//! RR-interval data handling: the beat-time CSV format, interval cleaning,
//! the pre-event crop, 1 Hz resampling, fixed-length windowing, subject-level
//! splits, the synthetic tachogram generator, and the on-disk segment cache.
//!
//! Times are seconds. An interval's timestamp is the time of its later beat,
//! so intervals stay anchored to absolute time even after cleaning removes
//! implausible values.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::rng::{stream, DOMAIN_SPLIT, DOMAIN_SYNTH};
use crate::Result;

/// Physiologically plausible RR bounds; intervals outside are artifacts.
pub const RR_MIN_S: f64 = 0.2;
pub const RR_MAX_S: f64 = 4.0;
/// Samples per window at 1 Hz.
pub const WINDOW_LEN: usize = 1800;
/// History required before an event onset: four windows.
pub const PRE_EVENT_HISTORY_S: f64 = 7200.0;
/// Longest gap a window edge may bridge by repeating the nearest value.
pub const EDGE_CLAMP_S: f64 = 5.0;

/// One subject's cleaned interval series.
#[derive(Clone, Debug, PartialEq)]
pub struct RriRecord {
    pub subject_id: String,
    /// 0 = control, 1 = event subject.
    pub label: u8,
    /// Time of each interval's later beat, strictly increasing.
    pub times: Vec<f64>,
    /// Interval lengths, same order as `times`.
    pub rr: Vec<f64>,
    pub af_onset: Option<f64>,
    /// First and last beat time of the raw series (before cleaning).
    pub t_start: f64,
    pub t_end: f64,
    /// Intervals dropped by the plausibility filter.
    pub removed_rr: usize,
}

/// Raw beat times for one subject, the unit the CSV format stores.
#[derive(Clone, Debug, PartialEq)]
pub struct BeatSeries {
    pub subject_id: String,
    pub label: u8,
    pub af_onset: Option<f64>,
    pub beats: Vec<f64>,
}

/// Reads `subject_id,label,beat_time_s[,af_onset_s]` rows into per-subject
/// records, converting beats to intervals and dropping implausible ones.
/// Rows of one subject must be contiguous and strictly increasing in time.
pub fn load_rri_csv(path: &Path) -> Result<Vec<RriRecord>> {
    let display = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::Parse {
                path: display.clone(),
                line: 1,
                msg: format!("{other:?}"),
            },
        })?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Parse {
            path: display.clone(),
            line: 1,
            msg: e.to_string(),
        })?
        .clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let (si, li, ti) = match (col("subject_id"), col("label"), col("beat_time_s")) {
        (Some(a), Some(b), Some(c)) => (a, b, c),
        _ => {
            return Err(Error::Parse {
                path: display,
                line: 1,
                msg: format!("header must name subject_id, label, beat_time_s; got {headers:?}"),
            })
        }
    };
    let oi = col("af_onset_s");

    let mut series: Vec<BeatSeries> = Vec::new();
    let mut seen: Vec<String> = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| Error::Parse {
            path: display.clone(),
            line: e.position().map_or(0, |p| p.line()),
            msg: e.to_string(),
        })?;
        let line = row.position().map_or(0, |p| p.line());
        let err = |msg: String| Error::Parse {
            path: display.clone(),
            line,
            msg,
        };
        let field = |i: usize| row.get(i).unwrap_or("");

        let sid = field(si).to_string();
        let label: u8 = match field(li) {
            "0" => 0,
            "1" => 1,
            other => return Err(err(format!("label must be 0 or 1, got '{other}'"))),
        };
        let t: f64 = field(ti)
            .parse()
            .map_err(|_| err(format!("beat_time_s '{}' is not a number", field(ti))))?;
        let onset: Option<f64> = match oi.map(field) {
            None | Some("") => None,
            Some(raw) => Some(
                raw.parse()
                    .map_err(|_| err(format!("af_onset_s '{raw}' is not a number")))?,
            ),
        };

        match series.last_mut() {
            Some(cur) if cur.subject_id == sid => {
                if cur.label != label {
                    return Err(err(format!("subject {sid} changes label mid-file")));
                }
                if cur.af_onset != onset {
                    return Err(err(format!("subject {sid} changes af_onset_s mid-file")));
                }
                let prev = *cur.beats.last().unwrap();
                if t <= prev {
                    return Err(err(format!(
                        "beat time {t} not after previous {prev} for subject {sid}"
                    )));
                }
                cur.beats.push(t);
            }
            _ => {
                if seen.contains(&sid) {
                    return Err(err(format!("subject {sid} appears in two separate blocks")));
                }
                seen.push(sid.clone());
                if label == 0 && onset.is_some() {
                    return Err(err(format!("control subject {sid} has an af_onset_s")));
                }
                series.push(BeatSeries {
                    subject_id: sid,
                    label,
                    af_onset: onset,
                    beats: vec![t],
                });
            }
        }
    }
    series.into_iter().map(record_from_beats).collect()
}

/// Beats to intervals plus the plausibility filter.
pub fn record_from_beats(s: BeatSeries) -> Result<RriRecord> {
    if s.beats.len() < 2 {
        return Err(Error::Record {
            subject: s.subject_id,
            msg: format!("needs at least two beats, got {}", s.beats.len()),
        });
    }
    let t_start = s.beats[0];
    let t_end = *s.beats.last().unwrap();
    let mut times = Vec::with_capacity(s.beats.len() - 1);
    let mut rr = Vec::with_capacity(s.beats.len() - 1);
    let mut removed = 0;
    for w in s.beats.windows(2) {
        let dt = w[1] - w[0];
        if (RR_MIN_S..=RR_MAX_S).contains(&dt) {
            times.push(w[1]);
            rr.push(dt);
        } else {
            removed += 1;
        }
    }
    if rr.is_empty() {
        return Err(Error::Record {
            subject: s.subject_id,
            msg: "no plausible intervals survive cleaning".into(),
        });
    }
    Ok(RriRecord {
        subject_id: s.subject_id,
        label: s.label,
        times,
        rr,
        af_onset: s.af_onset,
        t_start,
        t_end,
        removed_rr: removed,
    })
}

/// Writes series in the same CSV layout [`load_rri_csv`] reads. The onset
/// column is present whenever any series has one.
pub fn write_rri_csv(path: &Path, series: &[BeatSeries]) -> Result<()> {
    let mut out = Vec::new();
    let with_onset = series.iter().any(|s| s.af_onset.is_some());
    let header = if with_onset {
        "subject_id,label,beat_time_s,af_onset_s"
    } else {
        "subject_id,label,beat_time_s"
    };
    writeln!(out, "{header}").unwrap();
    for s in series {
        let onset = s.af_onset.map(|v| format!("{v:.6}")).unwrap_or_default();
        for &b in &s.beats {
            if with_onset {
                writeln!(out, "{},{},{:.6},{}", s.subject_id, s.label, b, onset).unwrap();
            } else {
                writeln!(out, "{},{},{:.6}", s.subject_id, s.label, b).unwrap();
            }
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Restricts an event record to the two hours before onset:
/// `[onset - 7200, onset)`. Requires the raw series to reach back that far.
pub fn pre_event_crop(rec: &RriRecord) -> Result<RriRecord> {
    let onset = rec.af_onset.ok_or_else(|| Error::Record {
        subject: rec.subject_id.clone(),
        msg: "event subject has no onset time".into(),
    })?;
    let lo = onset - PRE_EVENT_HISTORY_S;
    if rec.t_start > lo {
        return Err(Error::Record {
            subject: rec.subject_id.clone(),
            msg: format!(
                "only {:.0}s of history before onset, need {PRE_EVENT_HISTORY_S:.0}",
                onset - rec.t_start
            ),
        });
    }
    let mut times = Vec::new();
    let mut rr = Vec::new();
    for (&t, &v) in rec.times.iter().zip(&rec.rr) {
        if t >= lo && t < onset {
            times.push(t);
            rr.push(v);
        }
    }
    if rr.is_empty() {
        return Err(Error::Record {
            subject: rec.subject_id.clone(),
            msg: "no intervals inside the pre-onset span".into(),
        });
    }
    Ok(RriRecord {
        subject_id: rec.subject_id.clone(),
        label: rec.label,
        times,
        rr,
        af_onset: rec.af_onset,
        t_start: lo,
        t_end: onset,
        removed_rr: rec.removed_rr,
    })
}

/// Samples the interval series at 1 Hz: `len` values at t0, t0+1, ...
/// Interior sample times interpolate linearly between the two surrounding
/// points; times hanging off either end repeat the nearest value if the gap
/// is at most [`EDGE_CLAMP_S`], otherwise the window is not covered.
pub fn resample_window(times: &[f64], rr: &[f64], t0: f64, len: usize) -> Result<Vec<f64>> {
    assert_eq!(
        times.len(),
        rr.len(),
        "resample: times and rr lengths differ"
    );
    assert!(!times.is_empty(), "resample: empty series");
    let t_last = len as f64 - 1.0 + t0;
    let not_covered = |msg: String| Error::WindowNotCovered {
        t0,
        t0_end: t_last,
        msg,
    };
    if times[0] - t0 > EDGE_CLAMP_S {
        return Err(not_covered(format!(
            "first interval at {:.3}, {:.3}s past the window start",
            times[0],
            times[0] - t0
        )));
    }
    if t_last - times[times.len() - 1] > EDGE_CLAMP_S {
        return Err(not_covered(format!(
            "last interval at {:.3}, {:.3}s short of the window end",
            times[times.len() - 1],
            t_last - times[times.len() - 1]
        )));
    }
    let mut out = Vec::with_capacity(len);
    // `hi` walks forward once: first index with times[hi] >= ts
    let mut hi = 0usize;
    for j in 0..len {
        let ts = t0 + j as f64;
        while hi < times.len() && times[hi] < ts {
            hi += 1;
        }
        let v = if hi == 0 {
            rr[0]
        } else if hi == times.len() {
            rr[hi - 1]
        } else {
            let (ta, tb) = (times[hi - 1], times[hi]);
            let w = (ts - ta) / (tb - ta);
            rr[hi - 1] + (rr[hi] - rr[hi - 1]) * w
        };
        out.push(v);
    }
    Ok(out)
}

/// One model-ready window. Values are stored in f32: that is the cache's
/// on-disk precision, and both training precisions start from these bytes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub subject_id: String,
    pub label: u8,
    pub window_index: usize,
    #[serde(skip)]
    pub values: Vec<f32>,
}

/// Cuts non-overlapping [`WINDOW_LEN`]-second windows from `t_start`
/// onward; a trailing remainder is dropped. Windows the series cannot cover
/// (gaps past the edge clamp) are skipped and counted.
pub fn window_segments(rec: &RriRecord) -> (Vec<Segment>, usize) {
    let mut segments = Vec::new();
    let mut skipped = 0;
    let mut idx = 0;
    let mut t0 = rec.t_start;
    while t0 + (WINDOW_LEN as f64 - 1.0) <= rec.t_end {
        match resample_window(&rec.times, &rec.rr, t0, WINDOW_LEN) {
            Ok(values) => {
                segments.push(Segment {
                    subject_id: rec.subject_id.clone(),
                    label: rec.label,
                    window_index: idx,
                    values: values.into_iter().map(|v| v as f32).collect(),
                });
            }
            Err(_) => skipped += 1,
        }
        idx += 1;
        t0 += WINDOW_LEN as f64;
    }
    (segments, skipped)
}

/// Subject-level split assignment.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub seed: u64,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl Splits {
    pub fn split_of(&self, subject_id: &str) -> Option<&'static str> {
        if self.train.iter().any(|s| s == subject_id) {
            Some("train")
        } else if self.val.iter().any(|s| s == subject_id) {
            Some("val")
        } else if self.test.iter().any(|s| s == subject_id) {
            Some("test")
        } else {
            None
        }
    }
}

/// Shuffles each label group separately (sorted ids, one stream per group)
/// and takes 60% for training and half of the rest for validation, flooring
/// both, so e.g. a 151-subject group splits 90/30/31 and a 54-subject group
/// 32/11/11. Validation and test never share subjects with training.
pub fn split_subjects(groups: &[&[String]], seed: u64) -> Splits {
    let mut splits = Splits {
        seed,
        ..Splits::default()
    };
    for (gi, ids) in groups.iter().enumerate() {
        let mut ids: Vec<String> = ids.to_vec();
        ids.sort();
        ids.dedup();
        let mut rng = stream(seed, &[DOMAIN_SPLIT, gi as u64]);
        ids.shuffle(&mut rng);
        let n = ids.len();
        let n_train = (0.6 * n as f64).floor() as usize;
        let n_val = (n - n_train) / 2;
        splits.train.extend_from_slice(&ids[..n_train]);
        splits.val.extend_from_slice(&ids[n_train..n_train + n_val]);
        splits.test.extend_from_slice(&ids[n_train + n_val..]);
    }
    splits
}

// ── synthetic tachograms ─────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_control: usize,
    pub n_event: usize,
    /// Control recording length (24 h); event recordings span exactly the
    /// pre-onset history.
    pub control_duration_s: f64,
    pub base_rr_s: f64,
    pub rr_jitter_sd: f64,
    /// Respiratory modulation of the interval sequence.
    pub resp_amp: f64,
    pub resp_period_beats: f64,
    /// Per-beat probability of a premature-plus-compensatory beat pair in
    /// controls; for event subjects it ramps from `event_ectopic_p_start`
    /// at the series start to `event_ectopic_p_end` at onset.
    pub ectopic_p: f64,
    pub event_ectopic_p_start: f64,
    pub event_ectopic_p_end: f64,
    /// Jitter scale multiplier for the last stretch before onset.
    pub event_jitter_boost: f64,
    pub event_boost_from_s: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_control: 54,
            n_event: 151,
            control_duration_s: 86_400.0,
            base_rr_s: 0.85,
            rr_jitter_sd: 0.05,
            resp_amp: 0.04,
            resp_period_beats: 4.0,
            ectopic_p: 0.01,
            event_ectopic_p_start: 0.03,
            event_ectopic_p_end: 0.20,
            event_jitter_boost: std::f64::consts::SQRT_2,
            event_boost_from_s: 5400.0,
        }
    }
}

fn gaussian(rng: &mut impl Rng) -> f64 {
    use rand_distr::{Distribution, StandardNormal};
    <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)
}

fn synth_series(
    cfg: &SynthConfig,
    subject_id: String,
    label: u8,
    duration: f64,
    seed: u64,
    tag: u64,
    idx: usize,
) -> BeatSeries {
    let mut rng = stream(seed, &[DOMAIN_SYNTH, tag, idx as u64]);
    let mut beats = vec![0.0f64];
    let mut t = 0.0f64;
    let mut beat_idx = 0u64;
    let clip = |v: f64| v.clamp(RR_MIN_S, RR_MAX_S);
    while t < duration {
        let p_ect = if label == 0 {
            cfg.ectopic_p
        } else {
            let frac = (t / duration).clamp(0.0, 1.0);
            cfg.event_ectopic_p_start + (cfg.event_ectopic_p_end - cfg.event_ectopic_p_start) * frac
        };
        if rng.random::<f64>() < p_ect {
            // premature beat then a compensatory pause, time-neutral on average
            t += clip(0.6 * cfg.base_rr_s);
            beats.push(t);
            t += clip(1.4 * cfg.base_rr_s);
            beats.push(t);
            beat_idx += 2;
        } else {
            let sd = if label == 1 && t >= cfg.event_boost_from_s {
                cfg.rr_jitter_sd * cfg.event_jitter_boost
            } else {
                cfg.rr_jitter_sd
            };
            let resp = cfg.resp_amp
                * (2.0 * std::f64::consts::PI * beat_idx as f64 / cfg.resp_period_beats).sin();
            let rr = clip(cfg.base_rr_s + sd * gaussian(&mut rng) + resp);
            t += rr;
            beats.push(t);
            beat_idx += 1;
        }
    }
    BeatSeries {
        subject_id,
        label,
        af_onset: (label == 1).then_some(duration),
        beats,
    }
}

/// Steady control rhythm: jittered base interval with respiratory wobble and
/// occasional ectopic pairs.
pub fn synth_control(cfg: &SynthConfig, idx: usize, seed: u64) -> BeatSeries {
    synth_series(
        cfg,
        format!("nsr{idx:03}"),
        0,
        cfg.control_duration_s,
        seed,
        0,
        idx,
    )
}

/// Pre-event rhythm: same base process with ectopy ramping up toward onset
/// and extra jitter in the final stretch. Onset sits exactly at the end of
/// the series, preceded by the full required history.
pub fn synth_pre_event(cfg: &SynthConfig, idx: usize, seed: u64) -> BeatSeries {
    synth_series(
        cfg,
        format!("af{idx:03}"),
        1,
        PRE_EVENT_HISTORY_S,
        seed,
        1,
        idx,
    )
}

// ── segment cache ────────────────────────────────────────────────────────

const SEG_MAGIC: &[u8; 8] = b"rriseg/1";

/// Writes `segments.bin` (f32 little endian values) and `segments.json`
/// (aligned metadata). Rewriting the same segments gives identical bytes.
pub fn save_segment_cache(dir: &Path, segments: &[Segment]) -> Result<()> {
    let mut bin = Vec::with_capacity(16 + segments.len() * WINDOW_LEN * 4);
    bin.extend_from_slice(SEG_MAGIC);
    bin.extend_from_slice(&(segments.len() as u64).to_le_bytes());
    bin.extend_from_slice(&(WINDOW_LEN as u64).to_le_bytes());
    for seg in segments {
        assert_eq!(
            seg.values.len(),
            WINDOW_LEN,
            "segment {} length",
            seg.subject_id
        );
        for &v in &seg.values {
            bin.extend_from_slice(&v.to_le_bytes());
        }
    }
    let bin_path = dir.join("segments.bin");
    std::fs::write(&bin_path, bin).map_err(|e| Error::io(&bin_path, e))?;
    let meta_path = dir.join("segments.json");
    let meta = serde_json::to_string_pretty(segments)
        .map_err(|e| Error::Other(format!("segment metadata: {e}")))?;
    std::fs::write(&meta_path, meta + "\n").map_err(|e| Error::io(&meta_path, e))
}

pub fn load_segment_cache(dir: &Path) -> Result<Vec<Segment>> {
    let bin_path = dir.join("segments.bin");
    let bytes = std::fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
    let bad = |msg: String| Error::Parse {
        path: bin_path.display().to_string(),
        line: 0,
        msg,
    };
    if bytes.len() < 24 || &bytes[..8] != SEG_MAGIC {
        return Err(bad("missing segment cache magic".into()));
    }
    let count = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let len = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
    if len != WINDOW_LEN {
        return Err(bad(format!(
            "cache window length {len}, expected {WINDOW_LEN}"
        )));
    }
    if bytes.len() != 24 + count * len * 4 {
        return Err(bad(format!(
            "cache size {} does not match {count} windows of {len}",
            bytes.len()
        )));
    }
    let meta_path = dir.join("segments.json");
    let meta = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let mut segments: Vec<Segment> = serde_json::from_str(&meta).map_err(|e| Error::Parse {
        path: meta_path.display().to_string(),
        line: 0,
        msg: e.to_string(),
    })?;
    if segments.len() != count {
        return Err(bad(format!(
            "metadata lists {} segments, binary holds {count}",
            segments.len()
        )));
    }
    for (i, seg) in segments.iter_mut().enumerate() {
        let off = 24 + i * len * 4;
        seg.values = bytes[off..off + len * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
    }
    Ok(segments)
}

/// Segment counts per (label, split), for manifests and sanity checks.
pub fn count_by_split(segments: &[Segment], splits: &Splits) -> BTreeMap<String, usize> {
    let mut counts = BTreeMap::new();
    for seg in segments {
        let split = splits.split_of(&seg.subject_id).unwrap_or("unassigned");
        *counts
            .entry(format!("{split}/label{}", seg.label))
            .or_insert(0) += 1;
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;

    fn beats(subject: &str, label: u8, onset: Option<f64>, ts: &[f64]) -> BeatSeries {
        BeatSeries {
            subject_id: subject.into(),
            label,
            af_onset: onset,
            beats: ts.to_vec(),
        }
    }

    #[test]
    fn csv_round_trip_preserves_series() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rr.csv");
        let a = beats("n01", 0, None, &[0.0, 0.8, 1.7, 2.5, 3.4]);
        let b = beats("a01", 1, Some(9000.0), &[1800.0, 1802.1, 1803.0]);
        write_rri_csv(&path, &[a, b]).unwrap();
        let recs = load_rri_csv(&path).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[0].subject_id, "n01");
        assert_eq!(recs[0].label, 0);
        assert_eq!(recs[0].times, vec![0.8, 1.7, 2.5, 3.4]);
        let want = [0.8, 0.9, 0.8, 0.9];
        for (g, w) in recs[0].rr.iter().zip(want) {
            assert!((g - w).abs() < 1e-9);
        }
        assert_eq!(recs[0].removed_rr, 0);
        assert_eq!(recs[1].af_onset, Some(9000.0));
        assert_eq!(recs[1].t_start, 1800.0);
        assert_eq!(recs[1].removed_rr, 0);
    }

    #[test]
    fn csv_errors_carry_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "subject_id,label,beat_time_s\ns1,0,1.0\ns1,0,0.5\n").unwrap();
        match load_rri_csv(&path) {
            Err(Error::Parse { line, msg, .. }) => {
                assert_eq!(line, 3);
                assert!(msg.contains("not after previous"), "{msg}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
        std::fs::write(&path, "subject_id,label,beat_time_s\ns1,2,1.0\n").unwrap();
        assert!(matches!(
            load_rri_csv(&path),
            Err(Error::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn cleaning_drops_implausible_intervals_but_keeps_absolute_time() {
        // 5 s dropout between beats 2 and 3, and a 0.1 s double-sense
        let rec = record_from_beats(beats("s", 0, None, &[0.0, 0.9, 5.9, 6.0, 6.9])).unwrap();
        assert_eq!(rec.removed_rr, 2);
        assert_eq!(rec.times, vec![0.9, 6.9]);
        assert_eq!(rec.rr, vec![0.9, 0.9000000000000004]);
        assert_eq!(rec.t_start, 0.0);
        assert_eq!(rec.t_end, 6.9);
    }

    #[test]
    fn resample_interpolates_linearly() {
        let y = resample_window(&[0.0, 2.0], &[0.5, 1.5], 0.0, 3).unwrap();
        assert_eq!(y, vec![0.5, 1.0, 1.5]);
        let y = resample_window(&[0.0, 1.0, 2.0, 3.0], &[1.0, 1.0, 1.0, 1.0], 0.0, 4).unwrap();
        assert_eq!(y, vec![1.0; 4]);
    }

    #[test]
    fn resample_edge_clamp_is_limited() {
        // first point 3 s after window start: clamp
        let y = resample_window(&[3.0, 4.0], &[0.8, 1.0], 0.0, 6).unwrap();
        assert_eq!(y[..4], [0.8, 0.8, 0.8, 0.8]);
        assert_eq!(y[4], 1.0);
        assert_eq!(y[5], 1.0);
        // 6 s after: not covered
        match resample_window(&[6.0, 7.0], &[0.8, 1.0], 0.0, 10) {
            Err(Error::WindowNotCovered { t0, .. }) => assert_eq!(t0, 0.0),
            other => panic!("expected WindowNotCovered, got {other:?}"),
        }
        // trailing gap past the clamp
        assert!(resample_window(&[0.0, 1.0], &[0.8, 1.0], 0.0, 10).is_err());
    }

    #[test]
    fn windowing_counts_match_durations() {
        let cfg = SynthConfig::default();
        let event = record_from_beats(synth_pre_event(&cfg, 0, 7)).unwrap();
        let cropped = pre_event_crop(&event).unwrap();
        let (segs, skipped) = window_segments(&cropped);
        assert_eq!(segs.len(), 4, "two hours of history is four windows");
        assert_eq!(skipped, 0);
        assert_eq!(segs[0].window_index, 0);
        assert_eq!(segs[3].window_index, 3);
        assert!(segs.iter().all(|s| s.values.len() == WINDOW_LEN));

        // 29 minutes: shorter than one window
        let mut short = cropped.clone();
        short.t_end = short.t_start + 1740.0;
        let keep: Vec<(f64, f64)> = short
            .times
            .iter()
            .zip(&short.rr)
            .filter(|(t, _)| **t <= short.t_end)
            .map(|(t, v)| (*t, *v))
            .collect();
        short.times = keep.iter().map(|p| p.0).collect();
        short.rr = keep.iter().map(|p| p.1).collect();
        let (segs, skipped) = window_segments(&short);
        assert!(segs.is_empty() && skipped == 0);
    }

    #[test]
    fn pre_event_crop_bounds_and_history_requirement() {
        // long dropouts between the beat clusters are cleaned away, but the
        // raw first beat still counts as history
        let rec = record_from_beats(beats(
            "a",
            1,
            Some(7200.0),
            &[0.0, 3599.0, 3600.0, 7198.0, 7199.0, 7200.0, 7201.0],
        ))
        .unwrap();
        let cropped = pre_event_crop(&rec).unwrap();
        // the interval timestamped exactly at onset is excluded
        assert_eq!(cropped.times, vec![3600.0, 7199.0]);
        assert_eq!(cropped.t_start, 0.0);
        assert_eq!(cropped.t_end, 7200.0);

        let late = record_from_beats(beats("b", 1, Some(7200.0), &[100.0, 101.0, 7100.0])).unwrap();
        match pre_event_crop(&late) {
            Err(Error::Record { subject, msg }) => {
                assert_eq!(subject, "b");
                assert!(msg.contains("history"), "{msg}");
            }
            other => panic!("expected history error, got {other:?}"),
        }
    }

    #[test]
    fn split_sizes_match_group_floors() {
        let mk = |prefix: &str, n: usize| -> Vec<String> {
            (0..n).map(|i| format!("{prefix}{i:03}")).collect()
        };
        let event = mk("af", 151);
        let control = mk("nsr", 54);
        let splits = split_subjects(&[&event, &control], 101);
        let count =
            |ids: &[String], prefix: &str| ids.iter().filter(|s| s.starts_with(prefix)).count();
        assert_eq!(count(&splits.train, "af"), 90);
        assert_eq!(count(&splits.val, "af"), 30);
        assert_eq!(count(&splits.test, "af"), 31);
        assert_eq!(count(&splits.train, "nsr"), 32);
        assert_eq!(count(&splits.val, "nsr"), 11);
        assert_eq!(count(&splits.test, "nsr"), 11);
        // disjoint and exhaustive
        let mut all: Vec<&String> = splits
            .train
            .iter()
            .chain(&splits.val)
            .chain(&splits.test)
            .collect();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 205);
        // deterministic per seed, different across seeds
        assert_eq!(split_subjects(&[&event, &control], 101), splits);
        assert_ne!(split_subjects(&[&event, &control], 102).train, splits.train);
    }

    #[test]
    fn synth_is_deterministic_and_plausible() {
        let cfg = SynthConfig::default();
        let a = synth_control(&cfg, 3, 41);
        let b = synth_control(&cfg, 3, 41);
        assert_eq!(a, b);
        let c = synth_control(&cfg, 4, 41);
        assert_ne!(a.beats, c.beats);

        let rec = record_from_beats(a).unwrap();
        let mean: f64 = rec.rr.iter().sum::<f64>() / rec.rr.len() as f64;
        assert!((0.80..=0.90).contains(&mean), "mean rr {mean}");
        assert!(rec.t_end >= cfg.control_duration_s);

        // event jitter boost: wider spread near onset than at the start
        let ev = record_from_beats(synth_pre_event(&cfg, 0, 41)).unwrap();
        let sd = |lo: f64, hi: f64| {
            let vals: Vec<f64> = ev
                .times
                .iter()
                .zip(&ev.rr)
                .filter(|(t, _)| (lo..hi).contains(*t))
                .map(|(_, v)| *v)
                .collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            (vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / vals.len() as f64).sqrt()
        };
        assert!(
            sd(6300.0, 7200.0) > sd(0.0, 900.0),
            "late jitter should be wider"
        );
    }

    #[test]
    fn segment_cache_round_trips_and_is_byte_stable() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig::default();
        let rec = record_from_beats(synth_pre_event(&cfg, 1, 5)).unwrap();
        let (segs, _) = window_segments(&pre_event_crop(&rec).unwrap());
        save_segment_cache(dir.path(), &segs).unwrap();
        let first = std::fs::read(dir.path().join("segments.bin")).unwrap();
        let loaded = load_segment_cache(dir.path()).unwrap();
        assert_eq!(loaded, segs);
        save_segment_cache(dir.path(), &loaded).unwrap();
        assert_eq!(
            std::fs::read(dir.path().join("segments.bin")).unwrap(),
            first
        );
    }
}
