//! Series storage, the `STTF` container, chronological splits, z-score
//! normalisation, sliding windows and the synthetic ring dataset.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, FormatError, Result};
use crate::graph::RoadGraph;
use crate::tensor::Tensor;

pub const STTF_MAGIC: [u8; 4] = *b"STTF";
pub const STTF_VERSION: u32 = 1;
const STTF_HEADER_LEN: usize = 20;

pub const DEFAULT_INTERVAL_MINUTES: u32 = 5;
/// Steps per synthetic day at five-minute sampling.
pub const SYNTH_PERIOD: usize = 288;
const SYNTH_LEVEL: f64 = 2.0;
const SYNTH_AMPLITUDE: f64 = 1.0;

/// Fractions of the series given to train and validation; the rest is test.
pub const TRAIN_FRACTION: f64 = 0.6;
pub const VAL_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MissingPolicy {
    /// Carry the last reading forward; a sensor whose first reading is missing is rejected.
    #[default]
    ForwardFill,
    Reject,
}

/// Raw readings, time-major: `values[t * num_nodes + n]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrafficSeries {
    num_nodes: usize,
    interval_minutes: u32,
    values: Vec<f64>,
}

impl TrafficSeries {
    pub fn new(num_nodes: usize, interval_minutes: u32, values: Vec<f64>) -> Result<Self> {
        if num_nodes == 0 {
            return Err(Error::Data("series needs at least one sensor".into()));
        }
        if values.is_empty() || values.len() % num_nodes != 0 {
            return Err(Error::Data(format!(
                "{} readings do not fill whole rows of {num_nodes} sensors",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "non-finite reading at step {}, sensor {}",
                i / num_nodes,
                i % num_nodes
            )));
        }
        Ok(TrafficSeries {
            num_nodes,
            interval_minutes,
            values,
        })
    }

    /// Like [`TrafficSeries::new`] but resolves NaN readings under `policy` first.
    pub fn with_missing(num_nodes: usize, interval_minutes: u32, mut values: Vec<f64>, policy: MissingPolicy) -> Result<Self> {
        if num_nodes > 0 {
            let filled = fill_missing(&mut values, num_nodes, policy)?;
            if filled > 0 {
                log::info!("forward-filled {filled} missing readings");
            }
        }
        Self::new(num_nodes, interval_minutes, values)
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_steps(&self) -> usize {
        self.values.len() / self.num_nodes
    }

    pub fn interval_minutes(&self) -> u32 {
        self.interval_minutes
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn value(&self, step: usize, node: usize) -> f64 {
        self.values[step * self.num_nodes + node]
    }

    /// Steps `start..end` as a new series.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.num_steps() {
            return Err(Error::InvalidArgument(format!(
                "step range {start}..{end} outside 0..{}",
                self.num_steps()
            )));
        }
        Ok(TrafficSeries {
            num_nodes: self.num_nodes,
            interval_minutes: self.interval_minutes,
            values: self.values[start * self.num_nodes..end * self.num_nodes].to_vec(),
        })
    }

    /// Readings of one sensor over time.
    pub fn node_series(&self, node: usize) -> Vec<f64> {
        (0..self.num_steps()).map(|t| self.value(t, node)).collect()
    }

    pub fn to_sttf_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(STTF_HEADER_LEN + 4 * self.values.len());
        out.extend_from_slice(&STTF_MAGIC);
        out.extend_from_slice(&STTF_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.num_nodes as u32).to_le_bytes());
        out.extend_from_slice(&(self.num_steps() as u32).to_le_bytes());
        out.extend_from_slice(&self.interval_minutes.to_le_bytes());
        for &v in &self.values {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out
    }

    pub fn from_sttf_bytes(bytes: &[u8], policy: MissingPolicy) -> Result<Self> {
        if bytes.len() < STTF_HEADER_LEN {
            return Err(FormatError::Truncated {
                expected: STTF_HEADER_LEN,
                actual: bytes.len(),
            }
            .into());
        }
        let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
        if magic != STTF_MAGIC {
            return Err(FormatError::BadMagic {
                expected: STTF_MAGIC,
                found: magic,
            }
            .into());
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        let version = word(4);
        if version != STTF_VERSION {
            return Err(FormatError::UnsupportedVersion {
                found: version,
                supported: STTF_VERSION,
            }
            .into());
        }
        let (num_nodes, num_steps, interval) = (word(8) as usize, word(12) as usize, word(16));
        if num_nodes == 0 || num_steps == 0 {
            return Err(FormatError::Header(format!("empty series: {num_nodes} sensors × {num_steps} steps")).into());
        }
        let expected = STTF_HEADER_LEN + 4 * num_nodes * num_steps;
        if bytes.len() != expected {
            return Err(FormatError::Truncated {
                expected,
                actual: bytes.len(),
            }
            .into());
        }
        let values = bytes[STTF_HEADER_LEN..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        Self::with_missing(num_nodes, interval, values, policy)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_sttf_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, policy: MissingPolicy) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_sttf_bytes(&bytes, policy)
    }
}

/// Reads an `STTF` file, forward-filling missing readings.
pub fn load_series(path: &Path) -> Result<TrafficSeries> {
    TrafficSeries::load(path, MissingPolicy::ForwardFill)
}

/// Replaces NaN readings in a time-major buffer; returns how many were filled.
pub fn fill_missing(values: &mut [f64], num_nodes: usize, policy: MissingPolicy) -> Result<usize> {
    let mut filled = 0;
    for i in 0..values.len() {
        if !values[i].is_nan() {
            continue;
        }
        let (step, node) = (i / num_nodes, i % num_nodes);
        if policy == MissingPolicy::Reject {
            return Err(Error::Data(format!("missing reading at step {step}, sensor {node}")));
        }
        if step == 0 {
            return Err(Error::Data(format!(
                "sensor {node} has no reading at step 0, nothing to forward-fill from"
            )));
        }
        values[i] = values[i - num_nodes];
        filled += 1;
    }
    Ok(filled)
}

/// Parses a CSV with one row per time step and `num_nodes × channels`
/// columns (sensor-major), keeping channel `channel` of every sensor.
///
/// Empty fields and `nan` count as missing. A non-numeric first row is a header.
pub fn series_from_csv(
    text: &str,
    channels: usize,
    channel: usize,
    interval_minutes: u32,
    policy: MissingPolicy,
) -> Result<TrafficSeries> {
    if channels == 0 || channel >= channels {
        return Err(Error::Config(format!(
            "channel {channel} is not among {channels} channels"
        )));
    }
    let mut width = None;
    let mut values = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let parsed: std::result::Result<Vec<f64>, _> = fields
            .iter()
            .map(|f| if f.is_empty() { Ok(f64::NAN) } else { f.parse::<f64>() })
            .collect();
        let row = match parsed {
            Ok(r) => r,
            Err(_) if width.is_none() && values.is_empty() => continue,
            Err(e) => return Err(Error::Data(format!("line {}: {e}", lineno + 1))),
        };
        let w = *width.get_or_insert(row.len());
        if row.len() != w {
            return Err(Error::Data(format!(
                "line {}: {} columns, expected {w}",
                lineno + 1,
                row.len()
            )));
        }
        if w % channels != 0 {
            return Err(Error::Data(format!("{w} columns do not divide into {channels} channels")));
        }
        values.extend(row.iter().skip(channel).step_by(channels));
    }
    let width = width.ok_or_else(|| Error::Data("CSV holds no data rows".into()))?;
    TrafficSeries::with_missing(width / channels, interval_minutes, values, policy)
}

/// Contiguous train/validation/test partitions with their absolute start steps.
#[derive(Debug, Clone)]
pub struct Split {
    pub train: TrafficSeries,
    pub val: TrafficSeries,
    pub test: TrafficSeries,
    pub val_start: usize,
    pub test_start: usize,
}

/// Floor rule: train gets ⌊0.6·T⌋ steps, validation ⌊0.2·T⌋, test the remainder.
pub fn split_sizes(num_steps: usize) -> (usize, usize, usize) {
    let train = (num_steps as f64 * TRAIN_FRACTION).floor() as usize;
    let val = (num_steps as f64 * VAL_FRACTION).floor() as usize;
    (train, val, num_steps - train - val)
}

pub fn split_chronological(series: &TrafficSeries, window: usize) -> Result<Split> {
    let total = series.num_steps();
    if window == 0 || total < 10 * window {
        return Err(Error::Data(format!(
            "series of {total} steps is too short for window {window} (need at least {})",
            10 * window
        )));
    }
    let (train, val, _) = split_sizes(total);
    Ok(Split {
        train: series.slice(0, train)?,
        val: series.slice(train, train + val)?,
        test: series.slice(train + val, total)?,
        val_start: train,
        test_start: train + val,
    })
}

/// Z-score statistics over every reading of the training partition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormStats {
    pub mean: f64,
    pub std: f64,
}

impl NormStats {
    /// Population mean and standard deviation.
    pub fn fit(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Data("cannot fit normalisation to an empty partition".into()));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let std = var.sqrt();
        if !(std > 0.0) || !std.is_finite() {
            return Err(Error::Data(format!(
                "training partition has zero variance (every reading is {mean})"
            )));
        }
        Ok(NormStats { mean, std })
    }

    pub fn normalize(&self, x: f64) -> f64 {
        (x - self.mean) / self.std
    }

    pub fn denormalize(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }

    pub fn normalize_series(&self, series: &TrafficSeries) -> TrafficSeries {
        TrafficSeries {
            num_nodes: series.num_nodes,
            interval_minutes: series.interval_minutes,
            values: series.values.iter().map(|&v| self.normalize(v)).collect(),
        }
    }

    pub fn denormalize_tensor(&self, t: &Tensor) -> Tensor {
        t.map(|z| self.denormalize(z))
    }
}

/// Fits statistics on `train` and applies them unchanged to every partition.
pub fn fit_apply_norm(train: &TrafficSeries, others: &[&TrafficSeries]) -> Result<(NormStats, TrafficSeries, Vec<TrafficSeries>)> {
    let stats = NormStats::fit(train.values())?;
    let rest = others.iter().map(|s| stats.normalize_series(s)).collect();
    Ok((stats, stats.normalize_series(train), rest))
}

/// Stride-1 `(input, target)` windows over one partition.
///
/// Window `i` reads steps `start_i .. start_i + T` and forecasts the next `T`.
#[derive(Debug, Clone)]
pub struct WindowSet {
    series: TrafficSeries,
    window: usize,
    /// Absolute step of the partition's first reading.
    offset: usize,
}

impl WindowSet {
    pub fn new(partition: TrafficSeries, window: usize, offset: usize) -> Self {
        let set = WindowSet {
            series: partition,
            window,
            offset,
        };
        if set.is_empty() {
            log::warn!(
                "partition of {} steps is shorter than two windows of {window}; no windows produced",
                set.series.num_steps()
            );
        }
        set
    }

    pub fn len(&self) -> usize {
        (self.series.num_steps() + 1).saturating_sub(2 * self.window)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn num_nodes(&self) -> usize {
        self.series.num_nodes()
    }

    pub fn partition(&self) -> &TrafficSeries {
        &self.series
    }

    pub fn offset(&self) -> usize {
        self.offset
    }

    /// Absolute step of window `i`'s first input reading.
    pub fn input_start(&self, i: usize) -> usize {
        self.offset + i
    }

    /// Absolute step of window `i`'s first target reading.
    pub fn target_start(&self, i: usize) -> usize {
        self.offset + i + self.window
    }

    fn block(&self, start: usize) -> Tensor {
        let n = self.num_nodes();
        Tensor::from_fn(&[n, self.window], |ix| self.series.value(start + ix[1], ix[0]))
    }

    /// `N × T` input of window `i`.
    pub fn input(&self, i: usize) -> Tensor {
        assert!(i < self.len(), "window {i} out of range");
        self.block(i)
    }

    /// `N × T` target of window `i`.
    pub fn target(&self, i: usize) -> Tensor {
        assert!(i < self.len(), "window {i} out of range");
        self.block(i + self.window)
    }

    /// Stacks the listed windows into `B × N × T` input and target tensors.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Tensor) {
        let (n, t) = (self.num_nodes(), self.window);
        let mut x = Vec::with_capacity(indices.len() * n * t);
        let mut y = Vec::with_capacity(indices.len() * n * t);
        for &i in indices {
            assert!(i < self.len(), "window {i} out of range");
            for node in 0..n {
                for s in 0..t {
                    x.push(self.series.value(i + s, node));
                    y.push(self.series.value(i + t + s, node));
                }
            }
        }
        let shape = [indices.len(), n, t];
        (
            Tensor::new(&shape, x).expect("batch shape"),
            Tensor::new(&shape, y).expect("batch shape"),
        )
    }

    /// Per-window last-observation forecast: every target step repeats the last input.
    pub fn last_observation(&self, indices: &[usize]) -> Tensor {
        let (n, t) = (self.num_nodes(), self.window);
        Tensor::from_fn(&[indices.len(), n, t], |ix| self.series.value(indices[ix[0]] + t - 1, ix[1]))
    }
}

pub fn make_windows(partition: &TrafficSeries, window: usize, offset: usize) -> WindowSet {
    WindowSet::new(partition.clone(), window, offset)
}

/// Split, normalised and windowed dataset ready for training.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub stats: NormStats,
    pub train: WindowSet,
    pub val: WindowSet,
    pub test: WindowSet,
}

impl Dataset {
    pub fn prepare(series: &TrafficSeries, window: usize) -> Result<Self> {
        let split = split_chronological(series, window)?;
        let (stats, train, rest) = fit_apply_norm(&split.train, &[&split.val, &split.test])?;
        let mut rest = rest.into_iter();
        let val = rest.next().expect("validation partition");
        let test = rest.next().expect("test partition");
        Ok(Dataset {
            stats,
            train: WindowSet::new(train, window, 0),
            val: WindowSet::new(val, window, split.val_start),
            test: WindowSet::new(test, window, split.test_start),
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.train.num_nodes()
    }
}

/// Ring road network carrying one daily sinusoid per sensor, each lagging its
/// predecessor by `SYNTH_PERIOD / N` steps, plus Gaussian noise of standard
/// deviation `noise_sigma` (the sinusoid has unit amplitude).
pub fn synth_generate(seed: u64, num_nodes: usize, num_steps: usize, noise_sigma: f64) -> Result<(TrafficSeries, RoadGraph)> {
    if num_nodes < 2 {
        return Err(Error::Config(format!("synthetic data needs at least 2 sensors, got {num_nodes}")));
    }
    if num_steps == 0 {
        return Err(Error::Config("synthetic data needs at least one step".into()));
    }
    let noise = Normal::new(0.0, noise_sigma)
        .map_err(|e| Error::Config(format!("noise sigma {noise_sigma}: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lag = SYNTH_PERIOD as f64 / num_nodes as f64;
    let mut values = Vec::with_capacity(num_nodes * num_steps);
    for t in 0..num_steps {
        for n in 0..num_nodes {
            let phase = 2.0 * std::f64::consts::PI * (t as f64 - n as f64 * lag) / SYNTH_PERIOD as f64;
            let mut v = SYNTH_LEVEL + SYNTH_AMPLITUDE * phase.sin();
            if noise_sigma > 0.0 {
                v += noise.sample(&mut rng);
            }
            values.push(v);
        }
    }
    Ok((
        TrafficSeries::new(num_nodes, DEFAULT_INTERVAL_MINUTES, values)?,
        RoadGraph::ring(num_nodes)?,
    ))
}
