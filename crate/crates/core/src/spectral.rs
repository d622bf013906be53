//! Period discovery in the frequency domain, period folding, and
//! amplitude-weighted aggregation of per-period results.
//!
//! A length-`T` window is transformed per station, magnitudes are averaged
//! across stations, and the strongest `k` frequencies among `1..=T/2` become
//! [`PeriodDivision`]s. Each division folds the window into a
//! `num_periods × period_len` grid (zero padded at the end).

use std::cell::RefCell;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// Station-averaged DFT magnitude for each frequency index `0..T`.
#[derive(Clone, Debug, PartialEq)]
pub struct AmplitudeSpectrum {
    values: Vec<f64>,
}

impl AmplitudeSpectrum {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::Contract("amplitudes must be nonnegative".into()));
        }
        Ok(AmplitudeSpectrum { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Window length `T` the spectrum was computed from.
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PeriodDivision {
    pub frequency: usize,
    pub period_len: usize,
    pub num_periods: usize,
    pub amplitude: f64,
}

impl PeriodDivision {
    pub fn new(input_len: usize, frequency: usize, amplitude: f64) -> Result<Self> {
        if frequency == 0 || frequency > input_len / 2 {
            return Err(Error::Contract(format!(
                "frequency {frequency} outside 1..={} for T={input_len}",
                input_len / 2
            )));
        }
        let period_len = input_len.div_ceil(frequency);
        Ok(PeriodDivision {
            frequency,
            period_len,
            num_periods: input_len.div_ceil(period_len),
            amplitude,
        })
    }

    pub fn padded_len(&self) -> usize {
        self.num_periods * self.period_len
    }
}

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

/// DFT along the time axis of a `[T, N]` window, magnitudes averaged over
/// stations. Runs on plain values; nothing is recorded for differentiation.
pub fn dft_amplitudes(x: &Tensor) -> Result<AmplitudeSpectrum> {
    if x.rank() != 2 {
        return shape_err(format!("expected [T, N], got {:?}", x.shape()));
    }
    let (t_len, n) = (x.shape()[0], x.shape()[1]);
    if t_len < 2 {
        return Err(Error::Contract(format!("spectrum needs T >= 2, got {t_len}")));
    }
    let fft = PLANNER.with(|p| p.borrow_mut().plan_fft_forward(t_len));
    let mut acc = vec![0.0; t_len];
    let mut buf = vec![Complex::new(0.0, 0.0); t_len];
    for c in 0..n {
        for (t, b) in buf.iter_mut().enumerate() {
            *b = Complex::new(x.data()[t * n + c], 0.0);
        }
        fft.process(&mut buf);
        for (a, b) in acc.iter_mut().zip(&buf) {
            *a += b.norm();
        }
    }
    acc.iter_mut().for_each(|a| *a /= n as f64);
    AmplitudeSpectrum::new(acc)
}

/// Picks the `k` strongest frequencies in `1..=T/2`, ties going to the lower
/// frequency. Amplitudes that are zero up to round-off (relative to the
/// spectrum's peak) do not count as candidates; the list is padded with the
/// lowest unused frequencies so it always has `min(k, T/2)` entries.
pub fn select_top_k(spectrum: &AmplitudeSpectrum, k: usize) -> Result<Vec<PeriodDivision>> {
    if k == 0 {
        return Err(Error::Contract("k must be at least 1".into()));
    }
    let t_len = spectrum.len();
    let amps = spectrum.values();
    let peak = amps.iter().copied().fold(0.0, f64::max);
    let zero_tol = peak * 1e-10;
    let mut candidates: Vec<usize> = (1..=t_len / 2).filter(|&f| amps[f] > zero_tol).collect();
    candidates.sort_by(|&a, &b| amps[b].total_cmp(&amps[a]).then(a.cmp(&b)));
    let want = k.min(t_len / 2);
    let mut picked: Vec<usize> = candidates.into_iter().take(want).collect();
    let mut next = 1;
    while picked.len() < want {
        if !picked.contains(&next) {
            picked.push(next);
        }
        next += 1;
    }
    picked
        .into_iter()
        .map(|f| PeriodDivision::new(t_len, f, amps[f]))
        .collect()
}

/// `[T, N]` → `[num_periods, period_len, N]`, zero padding appended in time.
pub fn fold_to_periods(tape: &mut Tape, x: Var, d: &PeriodDivision) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 2 {
        return shape_err(format!("fold expects [T, N], got {shape:?}"));
    }
    let t_len = shape[0];
    if d.period_len != t_len.div_ceil(d.frequency) || d.padded_len() < t_len {
        return Err(Error::Contract(format!("division {d:?} does not fit T={t_len}")));
    }
    let padded = tape.pad_rows(x, d.padded_len())?;
    tape.reshape(padded, &[d.num_periods, d.period_len, shape[1]])
}

/// Inverse of [`fold_to_periods`]: flattens the period grid and keeps the
/// first `t_len` rows.
pub fn unfold_from_periods(tape: &mut Tape, y: Var, t_len: usize) -> Result<Var> {
    let shape = tape.shape(y).to_vec();
    if shape.len() != 3 {
        return shape_err(format!("unfold expects [pn, pl, N], got {shape:?}"));
    }
    let rows = shape[0] * shape[1];
    if rows < t_len {
        return Err(Error::Contract(format!(
            "{}x{} periods cover {rows} steps, fewer than T={t_len}",
            shape[0], shape[1]
        )));
    }
    let flat = tape.reshape(y, &[rows, shape[2]])?;
    if rows == t_len {
        Ok(flat)
    } else {
        tape.narrow_rows(flat, 0, t_len)
    }
}

/// Softmax of the division amplitudes.
pub fn aggregation_weights(divisions: &[PeriodDivision]) -> Vec<f64> {
    let max = divisions.iter().map(|d| d.amplitude).fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = divisions.iter().map(|d| (d.amplitude - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Amplitude-weighted sum of per-division outputs with the weights held
/// constant.
pub fn adaptive_aggregate(tape: &mut Tape, outputs: &[Var], divisions: &[PeriodDivision]) -> Result<Var> {
    let amps = Tensor::from_vec(divisions.iter().map(|d| d.amplitude).collect());
    let amps = tape.constant(amps);
    adaptive_aggregate_with(tape, outputs, amps)
}

/// Like [`adaptive_aggregate`], but the `[k]` amplitude vector is a tape node,
/// so gradients flow through the softmax when it requires them.
pub fn adaptive_aggregate_with(tape: &mut Tape, outputs: &[Var], amplitudes: Var) -> Result<Var> {
    let Some(&first) = outputs.first() else {
        return Err(Error::Contract("aggregation over no outputs".into()));
    };
    if tape.shape(amplitudes) != [outputs.len()] {
        return shape_err(format!(
            "{} outputs but amplitudes of shape {:?}",
            outputs.len(),
            tape.shape(amplitudes)
        ));
    }
    let shape = tape.shape(first).to_vec();
    if outputs.iter().any(|&o| tape.shape(o) != shape) {
        return shape_err("aggregated outputs differ in shape");
    }
    let weights = tape.softmax(amplitudes, 0)?;
    let mut acc: Option<Var> = None;
    for (i, &o) in outputs.iter().enumerate() {
        let w = tape.narrow_rows(weights, i, 1)?;
        let term = tape.mul(o, w)?;
        acc = Some(match acc {
            None => term,
            Some(a) => tape.add(a, term)?,
        });
    }
    Ok(acc.expect("nonempty"))
}
