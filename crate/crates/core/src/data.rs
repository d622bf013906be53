//! Station CSV ingestion, gap filling, min-max scaling, windowing, the
//! chronological split, and a synthetic multi-period watershed generator.

use std::f64::consts::PI;
use std::path::Path;

use chrono::{Duration, NaiveDateTime};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::graph::StationGraph;
use crate::tensor::Tensor;

const TIMESTAMP_FORMATS: [&str; 3] = ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M"];
pub const TIMESTAMP_OUT: &str = "%Y-%m-%dT%H:%M:%S";

/// Hourly multi-station record. `values` is row-major `rows × N`; missing
/// cells hold `NaN` and are flagged in `missing`.
#[derive(Clone, Debug, PartialEq)]
pub struct HydroSeries {
    pub timestamps: Vec<NaiveDateTime>,
    pub station_names: Vec<String>,
    pub values: Vec<f64>,
    pub missing: Vec<bool>,
}

impl HydroSeries {
    pub fn rows(&self) -> usize {
        self.timestamps.len()
    }

    pub fn n_stations(&self) -> usize {
        self.station_names.len()
    }

    pub fn value(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.n_stations() + c]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        self.values.iter().skip(c).step_by(self.n_stations()).copied().collect()
    }

    pub fn has_missing(&self) -> bool {
        self.missing.iter().any(|&m| m)
    }

    /// Rows `start..start + len` as a `[len, N]` tensor.
    pub fn window(&self, start: usize, len: usize) -> Result<Tensor> {
        let n = self.n_stations();
        if start + len > self.rows() {
            return Err(Error::Data(format!(
                "window {start}..{} exceeds {} rows",
                start + len,
                self.rows()
            )));
        }
        Tensor::new(vec![len, n], self.values[start * n..(start + len) * n].to_vec())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(e.to_string()))?;
        let csv_err = |e: csv::Error| Error::Data(e.to_string());
        let mut header = vec!["timestamp".to_string()];
        header.extend(self.station_names.iter().cloned());
        w.write_record(&header).map_err(csv_err)?;
        let n = self.n_stations();
        for r in 0..self.rows() {
            let mut rec = vec![self.timestamps[r].format(TIMESTAMP_OUT).to_string()];
            for c in 0..n {
                rec.push(if self.missing[r * n + c] {
                    "NA".to_string()
                } else {
                    self.values[r * n + c].to_string()
                });
            }
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    TIMESTAMP_FORMATS
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(s, f).ok())
}

/// Reads `timestamp,<stations...>` rows, reordering columns to graph order.
/// Empty cells and `NA` are missing. Timestamps must advance by exactly one hour.
pub fn load_station_csv(path: &Path, graph: &StationGraph) -> Result<HydroSeries> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::Data(format!("header: {e}")))?
        .iter()
        .map(|s| s.trim().to_string())
        .collect();
    if header.len() < 2 {
        return Err(Error::Data("header needs a timestamp column and at least one station".into()));
    }
    let n = graph.n_stations();
    let mut col_of = vec![usize::MAX; n];
    for (j, name) in header.iter().enumerate().skip(1) {
        let Some(pos) = graph.names().iter().position(|g| g == name) else {
            return Err(Error::Data(format!("unknown station column {name:?} in header")));
        };
        if col_of[pos] != usize::MAX {
            return Err(Error::Data(format!("duplicate station column {name:?}")));
        }
        col_of[pos] = j;
    }
    if let Some(k) = col_of.iter().position(|&c| c == usize::MAX) {
        return Err(Error::Data(format!("station {:?} missing from header", graph.names()[k])));
    }

    let mut series = HydroSeries {
        timestamps: Vec::new(),
        station_names: graph.names().to_vec(),
        values: Vec::new(),
        missing: Vec::new(),
    };
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| Error::Data(format!("row {line}: {e}")))?;
        if rec.len() != header.len() {
            return Err(Error::Data(format!(
                "row {line}: expected {} fields, got {}",
                header.len(),
                rec.len()
            )));
        }
        let ts = parse_timestamp(rec[0].trim())
            .ok_or_else(|| Error::Data(format!("row {line}: bad timestamp {:?}", &rec[0])))?;
        if let Some(&prev) = series.timestamps.last() {
            if ts <= prev {
                return Err(Error::Data(format!("row {line}: timestamp {ts} is not increasing")));
            }
            if ts - prev != Duration::hours(1) {
                return Err(Error::Data(format!("row {line}: gap of {} after {prev} is not hourly", ts - prev)));
            }
        }
        series.timestamps.push(ts);
        for &j in &col_of {
            let cell = rec[j].trim();
            if cell.is_empty() || cell == "NA" {
                series.values.push(f64::NAN);
                series.missing.push(true);
            } else {
                let v: f64 = cell
                    .parse()
                    .map_err(|_| Error::Data(format!("row {line}: bad value {cell:?} for {}", header[j])))?;
                series.values.push(v);
                series.missing.push(false);
            }
        }
    }
    Ok(series)
}

/// Fills gaps linearly between observed neighbours; leading and trailing gaps
/// copy the nearest observation.
pub fn interpolate_missing(s: &HydroSeries) -> Result<HydroSeries> {
    let n = s.n_stations();
    let rows = s.rows();
    let mut out = s.clone();
    for c in 0..n {
        let observed: Vec<usize> = (0..rows).filter(|&r| !s.missing[r * n + c]).collect();
        let (Some(&first), Some(&last)) = (observed.first(), observed.last()) else {
            return Err(Error::Data(format!(
                "station {:?} has no observed values",
                s.station_names[c]
            )));
        };
        for r in 0..first {
            out.values[r * n + c] = s.value(first, c);
        }
        for r in last + 1..rows {
            out.values[r * n + c] = s.value(last, c);
        }
        for pair in observed.windows(2) {
            let (a, b) = (pair[0], pair[1]);
            let (va, vb) = (s.value(a, c), s.value(b, c));
            for r in a + 1..b {
                let frac = (r - a) as f64 / (b - a) as f64;
                out.values[r * n + c] = va + (vb - va) * frac;
            }
        }
    }
    out.missing.iter_mut().for_each(|m| *m = false);
    Ok(out)
}

/// Per-column affine map onto `[-1, 1]` from training extrema. A constant
/// column maps to 0 and inverts to its value.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MinMaxScaler {
    bounds: Option<(Vec<f64>, Vec<f64>)>,
}

impl MinMaxScaler {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_bounds(min: Vec<f64>, max: Vec<f64>) -> Result<Self> {
        if min.len() != max.len() || min.iter().zip(&max).any(|(a, b)| !(b >= a)) {
            return Err(Error::Data("scaler bounds must satisfy max >= min per column".into()));
        }
        Ok(MinMaxScaler {
            bounds: Some((min, max)),
        })
    }

    /// Fits on the first `rows` rows of `series`.
    pub fn fit(&mut self, series: &HydroSeries, rows: usize) -> Result<()> {
        let n = series.n_stations();
        if rows == 0 || rows > series.rows() {
            return Err(Error::Data(format!("cannot fit scaler on {rows} of {} rows", series.rows())));
        }
        let mut min = vec![f64::INFINITY; n];
        let mut max = vec![f64::NEG_INFINITY; n];
        for r in 0..rows {
            for c in 0..n {
                let v = series.value(r, c);
                if v.is_nan() {
                    return Err(Error::Data(format!("missing value at row {r} while fitting scaler")));
                }
                min[c] = min[c].min(v);
                max[c] = max[c].max(v);
            }
        }
        self.bounds = Some((min, max));
        Ok(())
    }

    pub fn is_fitted(&self) -> bool {
        self.bounds.is_some()
    }

    fn bounds(&self) -> Result<(&[f64], &[f64])> {
        self.bounds
            .as_ref()
            .map(|(a, b)| (a.as_slice(), b.as_slice()))
            .ok_or_else(|| Error::Contract("scaler used before fit".into()))
    }

    pub fn min(&self) -> Result<&[f64]> {
        Ok(self.bounds()?.0)
    }

    pub fn max(&self) -> Result<&[f64]> {
        Ok(self.bounds()?.1)
    }

    pub fn apply(&self, value: f64, col: usize) -> Result<f64> {
        let (min, max) = self.bounds()?;
        let span = max[col] - min[col];
        Ok(if span == 0.0 {
            0.0
        } else {
            2.0 * (value - min[col]) / span - 1.0
        })
    }

    pub fn invert(&self, value: f64, col: usize) -> Result<f64> {
        let (min, max) = self.bounds()?;
        let span = max[col] - min[col];
        Ok(if span == 0.0 {
            min[col]
        } else {
            (value + 1.0) / 2.0 * span + min[col]
        })
    }

    /// Normalizes every cell of `series`.
    pub fn transform(&self, series: &HydroSeries) -> Result<HydroSeries> {
        let (min, _) = self.bounds()?;
        let n = series.n_stations();
        if min.len() != n {
            return Err(Error::Data(format!("scaler has {} columns, series has {n}", min.len())));
        }
        let mut out = series.clone();
        for (i, v) in out.values.iter_mut().enumerate() {
            *v = self.apply(*v, i % n)?;
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WindowSample {
    /// `[T, N]`.
    pub input: Tensor,
    /// Flow values for the `H` hours after the input.
    pub target: Vec<f64>,
    /// Row of the last input hour.
    pub origin_index: usize,
}

/// One sample per start row `0..=R−T−H`.
pub fn window_samples(s: &HydroSeries, input_len: usize, horizon: usize, flow_col: usize) -> Result<Vec<WindowSample>> {
    let rows = s.rows();
    if rows < input_len + horizon {
        return Err(Error::Data(format!(
            "{rows} rows cannot fill one window of {input_len} input + {horizon} target hours"
        )));
    }
    if flow_col >= s.n_stations() {
        return Err(Error::Data(format!("flow column {flow_col} out of range")));
    }
    (0..=rows - input_len - horizon)
        .map(|start| {
            Ok(WindowSample {
                input: s.window(start, input_len)?,
                target: (start + input_len..start + input_len + horizon)
                    .map(|r| s.value(r, flow_col))
                    .collect(),
                origin_index: start + input_len - 1,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios {
            train: 0.80,
            val: 0.05,
            test: 0.15,
        }
    }
}

/// `(train, val, test)` sample counts: floor for train and val, remainder to test.
pub fn split_counts(n: usize, ratios: SplitRatios) -> Result<(usize, usize, usize)> {
    let total = ratios.train + ratios.val + ratios.test;
    if (total - 1.0).abs() > 1e-9 || [ratios.train, ratios.val, ratios.test].iter().any(|&r| r < 0.0) {
        return Err(Error::Config(format!("split ratios must be nonnegative and sum to 1, got {total}")));
    }
    let train = (ratios.train * n as f64 + 1e-9).floor() as usize;
    let val = (ratios.val * n as f64 + 1e-9).floor() as usize;
    let test = n.saturating_sub(train + val);
    if train == 0 || val == 0 || test == 0 {
        return Err(Error::Data(format!(
            "{n} samples give an empty split ({train}/{val}/{test})"
        )));
    }
    Ok((train, val, test))
}

/// Number of leading rows touched by the training samples (inputs and targets);
/// the scaler is fitted on exactly these rows.
pub fn training_rows(rows: usize, input_len: usize, horizon: usize, ratios: SplitRatios) -> Result<usize> {
    if rows < input_len + horizon {
        return Err(Error::Data(format!(
            "{rows} rows cannot fill one window of {input_len} input + {horizon} target hours"
        )));
    }
    let (train, _, _) = split_counts(rows - input_len - horizon + 1, ratios)?;
    Ok(train - 1 + input_len + horizon)
}

#[derive(Clone, Debug, Default)]
pub struct Split {
    pub train: Vec<WindowSample>,
    pub val: Vec<WindowSample>,
    pub test: Vec<WindowSample>,
}

/// Contiguous train/val/test blocks in time order.
pub fn chronological_split(mut samples: Vec<WindowSample>, ratios: SplitRatios) -> Result<Split> {
    let (train, val, _) = split_counts(samples.len(), ratios)?;
    let test = samples.split_off(train + val);
    let val_part = samples.split_off(train);
    Ok(Split {
        train: samples,
        val: val_part,
        test,
    })
}

/// Recipe for a synthetic watershed: `stations − 1` rain gauges feeding one
/// flow gauge (last column, named `flow`).
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub stations: usize,
    pub rows: usize,
    /// Planted integer periods, in hours.
    pub periods: Vec<usize>,
    /// Standard deviation of the additive Gaussian noise.
    pub noise: f64,
    /// Routing delay from rain to flow, in hours.
    pub lag: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            stations: 8,
            rows: 2000,
            periods: vec![4, 6],
            noise: 0.05,
            lag: 2,
            seed: 2,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let max_p = self.periods.iter().copied().max().unwrap_or(0);
        if self.stations < 2 {
            return Err(Error::Config("synthetic data needs at least 2 stations".into()));
        }
        if self.periods.is_empty() || self.periods.contains(&0) {
            return Err(Error::Config("planted periods must be positive".into()));
        }
        if self.rows < 10 * max_p {
            return Err(Error::Config(format!(
                "{} rows is fewer than 10x the longest period {max_p}",
                self.rows
            )));
        }
        if !(self.noise >= 0.0) {
            return Err(Error::Config("noise must be >= 0".into()));
        }
        Ok(())
    }
}

/// Generates a deterministic dataset and its (star-shaped) station graph.
///
/// Rain gauge `j`: `max(0, Σ_p a_jp (1 + sin(2πt/p + φ_p)) + ε)`. The phase
/// of each period is shared by every gauge, the amplitudes are not. Flow: a
/// baseflow plus the
/// adjacency-weighted rain mix delayed by `lag` hours plus its own periodic
/// term and noise. The adjacency holds exactly the mixing weights.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(HydroSeries, StationGraph)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let n = spec.stations;
    let rains = n - 1;
    let rows = spec.rows;

    let phases: Vec<f64> = spec.periods.iter().map(|_| rng.random_range(0.0..2.0 * PI)).collect();
    let mut rain = vec![vec![0.0; rows]; rains];
    for series in rain.iter_mut() {
        let amps: Vec<f64> = spec.periods.iter().map(|_| rng.random_range(0.5..1.0)).collect();
        for (t, v) in series.iter_mut().enumerate() {
            let periodic: f64 = spec
                .periods
                .iter()
                .zip(&phases)
                .zip(&amps)
                .map(|((&p, phi), a)| a * (1.0 + (2.0 * PI * t as f64 / p as f64 + phi).sin()))
                .sum();
            let eps = spec.noise * normal.sample(&mut rng);
            *v = (periodic + eps).max(0.0);
        }
    }

    let weights: Vec<f64> = (0..rains).map(|_| rng.random_range(0.5..1.5)).collect();
    let wsum: f64 = weights.iter().sum();
    let own_amp = 0.3;
    let own_phase = rng.random_range(0.0..2.0 * PI);
    let own_period = spec.periods[0] as f64;
    let mut flow = vec![0.0; rows];
    for (t, f) in flow.iter_mut().enumerate() {
        let src = t.saturating_sub(spec.lag);
        let routed: f64 = (0..rains).map(|j| weights[j] * rain[j][src]).sum::<f64>() / wsum;
        let own = own_amp * (2.0 * PI * t as f64 / own_period + own_phase).sin();
        let eps = spec.noise * normal.sample(&mut rng);
        *f = (5.0 + 4.0 * routed + own + eps).max(0.0);
    }

    let mut names: Vec<String> = (1..=rains).map(|j| format!("rain_{j}")).collect();
    names.push("flow".to_string());
    let mut adjacency = Tensor::zeros(&[n, n]);
    for (j, &w) in weights.iter().enumerate() {
        adjacency.set(&[j, n - 1], w);
        adjacency.set(&[n - 1, j], w);
    }
    let graph = StationGraph::new(names.clone(), adjacency, n - 1)?;

    let start = NaiveDateTime::parse_from_str("2000-01-01T00:00:00", TIMESTAMP_OUT).expect("valid literal");
    let mut values = Vec::with_capacity(rows * n);
    for t in 0..rows {
        values.extend(rain.iter().map(|r| r[t]));
        values.push(flow[t]);
    }
    let series = HydroSeries {
        timestamps: (0..rows).map(|t| start + Duration::hours(t as i64)).collect(),
        station_names: names,
        values,
        missing: vec![false; rows * n],
    };
    Ok((series, graph))
}
