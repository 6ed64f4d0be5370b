//! Synthesized per-job telemetry and trace analysis.

use std::fmt;
use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

use crate::jobrt::MemModel;

#[derive(Debug, Error)]
pub enum TelError {
    #[error("need at least {needed} samples, trace has {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("trace of job {0} never reached completion")]
    IncompleteTrace(u64),
    #[error("sample at t={t} does not follow t={prev}")]
    NonMonotonic { t: u64, prev: u64 },
    #[error("sample at t={t}: {reason}")]
    BadSample { t: u64, reason: String },
    #[error("I/O failure on {path}: {source}")]
    IoFailure { path: String, source: io::Error },
    #[error("bad CSV row {row}: {reason}")]
    BadRow { row: usize, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventTag {
    Ckpt,
    Preempt,
    Restart,
    /// Final marker written when the job completes.
    Done,
}

impl EventTag {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Ckpt => "ckpt",
            Self::Preempt => "preempt",
            Self::Restart => "restart",
            Self::Done => "done",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "ckpt" => Self::Ckpt,
            "preempt" => Self::Preempt,
            "restart" => Self::Restart,
            "done" => Self::Done,
            _ => return None,
        })
    }
}

impl fmt::Display for EventTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricPoint {
    pub t: u64,
    pub cpu_pct: f64,
    pub mem_mb: f64,
    pub event: Option<EventTag>,
}

impl MetricPoint {
    fn is_idle(&self) -> bool {
        self.event == Some(EventTag::Done) || self.cpu_pct == 0.0
    }

    fn is_active(&self) -> bool {
        self.event != Some(EventTag::Done) && self.mem_mb > 0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricTrace {
    pub job_id: u64,
    pub samples: Vec<MetricPoint>,
    pub sample_period: u64,
}

impl MetricTrace {
    pub fn new(job_id: u64, sample_period: u64) -> Self {
        Self { job_id, samples: Vec::new(), sample_period: sample_period.max(1) }
    }

    pub fn push(&mut self, p: MetricPoint) -> Result<(), TelError> {
        if let Some(prev) = self.samples.last() {
            if p.t <= prev.t {
                return Err(TelError::NonMonotonic { t: p.t, prev: prev.t });
            }
        }
        if !(0.0..=100.0).contains(&p.cpu_pct) {
            return Err(TelError::BadSample { t: p.t, reason: format!("cpu_pct {} out of range", p.cpu_pct) });
        }
        if !(p.mem_mb >= 0.0) || !p.mem_mb.is_finite() {
            return Err(TelError::BadSample { t: p.t, reason: format!("mem_mb {}", p.mem_mb) });
        }
        self.samples.push(p);
        Ok(())
    }

    /// Time of the `done` marker, if the job completed.
    pub fn completed_at(&self) -> Option<u64> {
        self.samples.iter().rev().find(|p| p.event == Some(EventTag::Done)).map(|p| p.t)
    }

    pub fn started_at(&self) -> Option<u64> {
        self.samples.first().map(|p| p.t)
    }

    pub fn peak_mem(&self) -> f64 {
        self.samples.iter().map(|p| p.mem_mb).fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TelemetryConfig {
    pub sample_period: u64,
    pub ckpt_cpu_pct: f64,
    pub spike_factor: f64,
    pub median_window: usize,
}

impl Default for TelemetryConfig {
    fn default() -> Self {
        Self { sample_period: 1, ckpt_cpu_pct: 20.0, spike_factor: 1.004, median_window: 5 }
    }
}

/// What a job is doing during one sample period.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activity {
    /// Computing, `t_run` minutes into the allocation.
    Running {
        t_run: u64,
    },
    /// Writing a checkpoint (`Ckpt` or `Preempt`).
    Checkpoint {
        t_run: u64,
        tag: EventTag,
    },
    /// First minute after a restore.
    Restart {
        t_run: u64,
    },
    /// Between allocations.
    Idle,
    Done,
}

pub fn sample(model: &MemModel, cfg: &TelemetryConfig, t: u64, activity: Activity) -> MetricPoint {
    let (cpu_pct, mem_mb, event) = match activity {
        Activity::Running { t_run } => (100.0, model.resident_mb(t_run), None),
        Activity::Checkpoint { t_run, tag } => {
            (cfg.ckpt_cpu_pct, model.resident_mb(t_run) * (1.0 + model.ckpt_spike_fraction), Some(tag))
        }
        Activity::Restart { t_run } => (100.0, model.resident_mb(t_run), Some(EventTag::Restart)),
        Activity::Idle => (0.0, 0.0, None),
        Activity::Done => (0.0, 0.0, Some(EventTag::Done)),
    };
    MetricPoint { t, cpu_pct, mem_mb, event }
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Times where memory exceeds the centered rolling median (over active
/// samples) by more than `factor`. Adjacent spike samples count once.
pub fn detect_checkpoint_spikes(trace: &MetricTrace, factor: f64, window: usize) -> Result<Vec<u64>, TelError> {
    if trace.samples.len() < 3 {
        return Err(TelError::TooFewSamples { needed: 3, got: trace.samples.len() });
    }
    let active: Vec<&MetricPoint> = trace.samples.iter().filter(|p| p.is_active()).collect();
    let half = window.max(1) / 2;
    let mut spikes: Vec<u64> = Vec::new();
    let mut prev_spike: Option<u64> = None;
    for (i, p) in active.iter().enumerate() {
        let lo = i.saturating_sub(half);
        let hi = (i + half + 1).min(active.len());
        let mut w: Vec<f64> = active[lo..hi].iter().map(|q| q.mem_mb).collect();
        let m = median(&mut w);
        if p.mem_mb > m * factor {
            if prev_spike.is_none_or(|s| p.t != s + trace.sample_period) {
                spikes.push(p.t);
            }
            prev_spike = Some(p.t);
        }
    }
    Ok(spikes)
}

/// Maximal `[start, end)` runs of zero CPU. A run still open at the end
/// of the trace closes one sample period after its last sample.
pub fn detect_idle_gaps(trace: &MetricTrace) -> Result<Vec<(u64, u64)>, TelError> {
    if trace.samples.len() < 2 {
        return Err(TelError::TooFewSamples { needed: 2, got: trace.samples.len() });
    }
    let mut gaps = Vec::new();
    let mut open: Option<(u64, u64)> = None;
    for p in trace.samples.iter().filter(|p| p.event != Some(EventTag::Done)) {
        if p.is_idle() {
            open = Some(match open {
                Some((s, _)) => (s, p.t),
                None => (p.t, p.t),
            });
        } else if let Some((s, _)) = open.take() {
            gaps.push((s, p.t));
        }
    }
    if let Some((s, last)) = open {
        gaps.push((s, last + trace.sample_period));
    }
    Ok(gaps)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OverheadReport {
    pub mem_delta_pct: f64,
    pub duration_delta: i64,
    pub checkpoints_counted: usize,
}

impl OverheadReport {
    pub fn to_text(&self) -> String {
        format!(
            "memory overhead: {:.3}% of baseline peak\nduration overhead: {} min\ncheckpoints detected: {}\n",
            self.mem_delta_pct, self.duration_delta, self.checkpoints_counted
        )
    }

    pub fn to_kv(&self) -> String {
        format!(
            "mem_delta_pct={:.6}\nduration_delta={}\ncheckpoints_counted={}\n",
            self.mem_delta_pct, self.duration_delta, self.checkpoints_counted
        )
    }
}

pub fn overhead_report(
    baseline: &MetricTrace,
    ckpt: &MetricTrace,
    cfg: &TelemetryConfig,
) -> Result<OverheadReport, TelError> {
    let duration = |tr: &MetricTrace| -> Result<u64, TelError> {
        let end = tr.completed_at().ok_or(TelError::IncompleteTrace(tr.job_id))?;
        Ok(end - tr.started_at().unwrap_or(end))
    };
    let (db, dc) = (duration(baseline)?, duration(ckpt)?);
    let base_peak = baseline.peak_mem();
    let mem_delta_pct = if base_peak > 0.0 { (ckpt.peak_mem() - base_peak) / base_peak * 100.0 } else { 0.0 };
    let checkpoints_counted = detect_checkpoint_spikes(ckpt, cfg.spike_factor, cfg.median_window)?.len();
    Ok(OverheadReport { mem_delta_pct, duration_delta: dc as i64 - db as i64, checkpoints_counted })
}

const HEADER: [&str; 4] = ["t_min", "cpu_pct", "mem_mb", "event"];

pub fn export_csv(trace: &MetricTrace, path: &Path) -> Result<(), TelError> {
    let io_err = |e: io::Error| TelError::IoFailure { path: path.display().to_string(), source: e };
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut write = |rec: &[String]| w.write_record(rec).map_err(|e| io_err(io::Error::other(e)));
    write(&HEADER.map(String::from))?;
    for p in &trace.samples {
        write(&[
            p.t.to_string(),
            p.cpu_pct.to_string(),
            p.mem_mb.to_string(),
            p.event.map(|e| e.as_str().to_string()).unwrap_or_default(),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| io_err(io::Error::other(e.to_string())))?;
    fs::write(path, bytes).map_err(io_err)
}

pub fn import_csv(path: &Path, job_id: u64, sample_period: u64) -> Result<MetricTrace, TelError> {
    let text = fs::read(path).map_err(|e| TelError::IoFailure { path: path.display().to_string(), source: e })?;
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_slice());
    let headers = r.headers().map_err(|e| TelError::BadRow { row: 0, reason: e.to_string() })?;
    if headers.iter().ne(HEADER) {
        return Err(TelError::BadRow { row: 0, reason: format!("unexpected header {headers:?}") });
    }
    let mut trace = MetricTrace::new(job_id, sample_period);
    for (i, rec) in r.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| TelError::BadRow { row, reason: e.to_string() })?;
        let bad = |what: &str| TelError::BadRow { row, reason: format!("bad {what}") };
        let t = rec[0].parse().map_err(|_| bad("t_min"))?;
        let cpu_pct = rec[1].parse().map_err(|_| bad("cpu_pct"))?;
        let mem_mb = rec[2].parse().map_err(|_| bad("mem_mb"))?;
        let event = match &rec[3] {
            "" => None,
            s => Some(EventTag::parse(s).ok_or_else(|| bad("event"))?),
        };
        trace.push(MetricPoint { t, cpu_pct, mem_mb, event })?;
    }
    Ok(trace)
}
