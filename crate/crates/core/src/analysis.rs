//! Post-processing of simulation traces: spectra, zero-phase low-pass
//! filtering and the deviation measures of a machining run.

use std::f64::consts::PI;

use rustfft::{num_complex::Complex, FftPlanner};
use serde::Serialize;

use crate::dynamic_sim::{SimulationTrace, Trajectory};
use crate::error::{Error, Result};
use crate::workpiece_grid::{Rect, Wall, WorkpieceGrid};

/// Zero-padding factor used when locating spectral peaks.
pub const PEAK_PADDING: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    pub frequencies: Vec<f64>,
    pub amplitudes: Vec<f64>,
    /// Native resolution `1/T` of the analysed window, Hz.
    pub resolution: f64,
}

impl Spectrum {
    /// Frequency of the largest amplitude in `[lo, hi]`, refined by a
    /// parabola through the neighbouring bins.
    pub fn peak_in(&self, lo: f64, hi: f64) -> Option<f64> {
        let (k, _) = self
            .frequencies
            .iter()
            .zip(&self.amplitudes)
            .enumerate()
            .filter(|(_, (f, _))| **f >= lo && **f <= hi)
            .map(|(k, (_, a))| (k, *a))
            .max_by(|a, b| a.1.total_cmp(&b.1))?;
        let f = self.frequencies[k];
        if k == 0 || k + 1 >= self.amplitudes.len() {
            return Some(f);
        }
        let (a, b, c) = (self.amplitudes[k - 1], self.amplitudes[k], self.amplitudes[k + 1]);
        let denom = a - 2.0 * b + c;
        let shift = if denom != 0.0 { 0.5 * (a - c) / denom } else { 0.0 };
        let df = self.frequencies[1] - self.frequencies[0];
        Some(f + shift.clamp(-0.5, 0.5) * df)
    }
}

/// Single-sided amplitude spectrum of a uniformly sampled signal after
/// removing its linear trend and applying a Hann window. The transform is
/// zero-padded to `padding` times the next power of two.
pub fn amplitude_spectrum(signal: &[f64], dt: f64, padding: usize) -> Result<Spectrum> {
    let n = signal.len();
    if n < 4 || !(dt > 0.0) {
        return Err(Error::InvalidParameter(format!("spectrum needs ≥ 4 samples and dt > 0 (got {n}, {dt})")));
    }
    let detrended = detrend(signal);
    let window: Vec<f64> = (0..n).map(|k| 0.5 - 0.5 * (2.0 * PI * k as f64 / (n - 1) as f64).cos()).collect();
    let gain: f64 = window.iter().sum();
    let len = n.next_power_of_two() * padding.max(1);
    let mut buf: Vec<Complex<f64>> = detrended.iter().zip(&window).map(|(x, w)| Complex::new(x * w, 0.0)).collect();
    buf.resize(len, Complex::new(0.0, 0.0));
    FftPlanner::new().plan_fft_forward(len).process(&mut buf);
    let bins = len / 2 + 1;
    let df = 1.0 / (len as f64 * dt);
    let amplitudes = buf[..bins].iter().enumerate().map(|(k, c)| {
        let scale = if k == 0 || (len % 2 == 0 && k == len / 2) { 1.0 } else { 2.0 };
        scale * c.norm() / gain
    });
    Ok(Spectrum {
        frequencies: (0..bins).map(|k| k as f64 * df).collect(),
        amplitudes: amplitudes.collect(),
        resolution: 1.0 / (n as f64 * dt),
    })
}

/// Signal minus its least-squares straight line.
pub fn detrend(signal: &[f64]) -> Vec<f64> {
    let n = signal.len() as f64;
    let mean_k = (n - 1.0) / 2.0;
    let mean_x = signal.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (k, x) in signal.iter().enumerate() {
        let dk = k as f64 - mean_k;
        sxy += dk * (x - mean_x);
        sxx += dk * dk;
    }
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    signal.iter().enumerate().map(|(k, x)| x - mean_x - slope * (k as f64 - mean_k)).collect()
}

/// Zero-phase second-order Butterworth low-pass (forward and backward pass).
pub fn lowpass_filtfilt(signal: &[f64], dt: f64, cutoff: f64) -> Result<Vec<f64>> {
    let nyquist = 0.5 / dt;
    if !(cutoff > 0.0 && cutoff < nyquist) {
        return Err(Error::InvalidParameter(format!("cutoff {cutoff} Hz outside (0, {nyquist}) Hz")));
    }
    if signal.is_empty() {
        return Ok(Vec::new());
    }
    let w0 = 2.0 * PI * cutoff * dt;
    let alpha = w0.sin() / 2.0_f64.sqrt();
    let cos = w0.cos();
    let a0 = 1.0 + alpha;
    let b = [(1.0 - cos) / (2.0 * a0), (1.0 - cos) / a0, (1.0 - cos) / (2.0 * a0)];
    let a = [-2.0 * cos / a0, (1.0 - alpha) / a0];
    let pass = |x: &mut Vec<f64>| {
        // transposed direct form II started at the steady state of x[0]
        let x0 = x[0];
        let mut s2 = (b[2] - a[1]) * x0;
        let mut s1 = (b[1] - a[0]) * x0 + s2;
        for v in x.iter_mut() {
            let input = *v;
            let out = b[0] * input + s1;
            s1 = b[1] * input - a[0] * out + s2;
            s2 = b[2] * input - a[1] * out;
            *v = out;
        }
    };
    let mut y = signal.to_vec();
    pass(&mut y);
    y.reverse();
    pass(&mut y);
    y.reverse();
    Ok(y)
}

/// Whether a tool of `radius` centred at abscissa `x` lies entirely within the stock length.
pub fn fully_engaged(x: f64, stock: &Rect, radius: f64) -> bool {
    x - radius >= stock.min.x - 1e-12 && x + radius <= stock.max.x + 1e-12
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeviationReport {
    /// Dominant low-frequency content of `δt_y`, Hz.
    pub low_frequency: f64,
    /// Spectral resolution of the analysis window, Hz.
    pub spectral_resolution: f64,
    /// |mean(actual − desired)| of the tool-centre `y` over the window, m.
    pub static_deviation: f64,
    pub static_deviation_signed: f64,
    /// Largest |machined wall − desired wall|, m.
    pub max_deviation: f64,
    pub window_start: f64,
    pub window_end: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReportSettings {
    /// Low-frequency search band, Hz.
    pub low_band: (f64, f64),
    pub radius: f64,
}

/// Deviation measures over the part of the run where the tool is fully inside the stock.
pub fn deviation_report(
    trace: &SimulationTrace,
    grid: &WorkpieceGrid,
    desired: &Trajectory,
    stock: &Rect,
    settings: &ReportSettings,
) -> Result<DeviationReport> {
    let radius = settings.radius;
    let window: Vec<_> = trace.rows.iter().filter(|r| fully_engaged(desired.at(r.tau).x, stock, radius)).collect();
    if window.len() < 4 {
        return Err(Error::InvalidParameter("the tool is never fully engaged in the stock".into()));
    }
    let errors: Vec<f64> = window.iter().map(|r| r.nominal.y + r.dy - desired.at(r.tau).y).collect();
    let mean = errors.iter().sum::<f64>() / errors.len() as f64;

    let dy: Vec<f64> = window.iter().map(|r| r.dy).collect();
    let spectrum = amplitude_spectrum(&dy, trace.dt_step, PEAK_PADDING)?;
    let (lo, hi) = settings.low_band;
    let low_frequency = spectrum
        .peak_in(lo.max(2.0 * spectrum.resolution), hi)
        .ok_or_else(|| Error::InvalidParameter(format!("no spectral content in [{lo}, {hi}] Hz")))?;

    let (dsx, _) = grid.steps();
    let mut max_deviation: f64 = 0.0;
    for (wall, side) in [(Wall::Upper, 1.0), (Wall::Lower, -1.0)] {
        for p in grid.machined_profile(wall) {
            if !(p.x >= stock.min.x + radius && p.x <= stock.max.x - radius - dsx) {
                continue;
            }
            if let Some(y) = desired.y_at_x(p.x) {
                max_deviation = max_deviation.max((p.y - (y + side * radius)).abs());
            }
        }
    }

    Ok(DeviationReport {
        low_frequency,
        spectral_resolution: spectrum.resolution,
        static_deviation: mean.abs(),
        static_deviation_signed: mean,
        max_deviation,
        window_start: window[0].tau,
        window_end: window[window.len() - 1].tau,
    })
}
