//! Signal preprocessing: linear-interpolation resampling and zero-phase
//! Butterworth band filtering applied uniformly to every channel of a
//! dataset.

use crate::error::{Error, Result};
use crate::matrix::Matrix;

use super::{TimeSeriesDataset, Trajectory};

/// Resamples every trajectory onto a uniform grid at the target rate by
/// linear interpolation. When the target grid lands on source samples
/// the values are copied exactly.
pub fn resample(ds: &TimeSeriesDataset, target_hz: f64) -> Result<TimeSeriesDataset> {
    if target_hz <= 0.0 {
        return Err(Error::Contract("target rate must be positive".into()));
    }
    ds.validate()?;
    let source_hz = ds.sample_rate_hz;
    let trajectories = ds
        .trajectories
        .iter()
        .map(|traj| {
            Ok(Trajectory {
                u: resample_matrix(&traj.u, source_hz, target_hz)?,
                x: resample_matrix(&traj.x, source_hz, target_hz)?,
                source: traj.source.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut provenance = ds.provenance.clone();
    provenance.push(format!("resample target_hz={target_hz}"));
    Ok(TimeSeriesDataset {
        trajectories,
        sample_rate_hz: target_hz,
        input_names: ds.input_names.clone(),
        output_names: ds.output_names.clone(),
        normalization: ds.normalization.clone(),
        provenance,
    })
}

fn resample_matrix(m: &Matrix, source_hz: f64, target_hz: f64) -> Result<Matrix> {
    let rows = m.rows();
    if rows == 0 {
        return Err(Error::Contract("cannot resample an empty trajectory".into()));
    }
    let duration = (rows - 1) as f64 / source_hz;
    let new_rows = (duration * target_hz).floor() as usize + 1;
    Ok(Matrix::from_fn(new_rows, m.cols(), |i, j| {
        let pos = i as f64 * source_hz / target_hz;
        let i0 = (pos.floor() as usize).min(rows - 1);
        let frac = pos - i0 as f64;
        if frac <= 0.0 || i0 + 1 >= rows {
            m.get(i0, j)
        } else {
            (1.0 - frac) * m.get(i0, j) + frac * m.get(i0 + 1, j)
        }
    }))
}

/// Filter band selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FilterKind {
    HighPass,
    LowPass,
}

/// Zero-phase Butterworth filtering: an order-n cascade of first/second
/// order sections is applied forward and then backward over each
/// channel, cancelling phase distortion (and squaring the magnitude
/// response). Offline preprocessing only.
pub fn butterworth_filter(
    ds: &TimeSeriesDataset,
    kind: FilterKind,
    cutoff_hz: f64,
    order: usize,
) -> Result<TimeSeriesDataset> {
    ds.validate()?;
    let nyquist = ds.sample_rate_hz / 2.0;
    if cutoff_hz <= 0.0 || cutoff_hz >= nyquist {
        return Err(Error::Contract(format!(
            "cutoff {cutoff_hz} Hz must lie strictly between 0 and the Nyquist rate {nyquist} Hz"
        )));
    }
    if order == 0 {
        return Err(Error::Contract("filter order must be at least 1".into()));
    }
    let sections = design_butterworth(kind, cutoff_hz, ds.sample_rate_hz, order);
    let trajectories = ds
        .trajectories
        .iter()
        .map(|traj| Trajectory {
            u: filtfilt_matrix(&traj.u, &sections),
            x: filtfilt_matrix(&traj.x, &sections),
            source: traj.source.clone(),
        })
        .collect();
    let mut provenance = ds.provenance.clone();
    provenance.push(format!(
        "butterworth kind={kind:?} cutoff_hz={cutoff_hz} order={order}"
    ));
    Ok(TimeSeriesDataset {
        trajectories,
        sample_rate_hz: ds.sample_rate_hz,
        input_names: ds.input_names.clone(),
        output_names: ds.output_names.clone(),
        normalization: ds.normalization.clone(),
        provenance,
    })
}

/// One digital biquad (or degenerate first-order) section,
/// a0-normalized: y[n] = b0 x[n] + b1 x[n-1] + b2 x[n-2]
///                      - a1 y[n-1] - a2 y[n-2].
#[derive(Debug, Clone, Copy)]
struct Biquad {
    b: [f64; 3],
    a: [f64; 3],
}

/// Butterworth section cascade via the matched analog prototype and the
/// bilinear transform with cutoff prewarping.
fn design_butterworth(kind: FilterKind, cutoff_hz: f64, fs: f64, order: usize) -> Vec<Biquad> {
    let wc = (std::f64::consts::PI * cutoff_hz / fs).tan();
    let mut sections = Vec::new();

    // Conjugate pole pairs of the unit-cutoff lowpass prototype.
    let pairs = order / 2;
    for k in 0..pairs {
        let theta = std::f64::consts::PI * (2.0 * k as f64 + order as f64 + 1.0)
            / (2.0 * order as f64);
        let (re, im) = (theta.cos(), theta.sin());
        // Analog section over prototype pole p = re + i im (|p| = 1):
        // lowpass  (wc p): N(s) = wc^2, D(s) = s^2 - 2 wc re s + wc^2
        // highpass (wc/p): N(s) = s^2,  D(s) = s^2 - 2 wc re' s + wc'^2
        // with the highpass pole wc/p having Re = wc re, |.|^2 = wc^2
        // (since |p| = 1 and 1/p = conj(p)).
        let _ = im;
        let (n2, n1, n0, d2, d1, d0) = match kind {
            FilterKind::LowPass => (0.0, 0.0, wc * wc, 1.0, -2.0 * wc * re, wc * wc),
            FilterKind::HighPass => (1.0, 0.0, 0.0, 1.0, -2.0 * wc * re, wc * wc),
        };
        sections.push(bilinear2(n2, n1, n0, d2, d1, d0));
    }
    if order % 2 == 1 {
        // Real prototype pole at -1.
        let (n1, n0, d1, d0) = match kind {
            FilterKind::LowPass => (0.0, wc, 1.0, wc),
            FilterKind::HighPass => (1.0, 0.0, 1.0, wc),
        };
        sections.push(bilinear1(n1, n0, d1, d0));
    }
    sections
}

/// Bilinear transform s = (1 - z^-1) / (1 + z^-1) of a quadratic section.
fn bilinear2(n2: f64, n1: f64, n0: f64, d2: f64, d1: f64, d0: f64) -> Biquad {
    let b = [n2 + n1 + n0, 2.0 * (n0 - n2), n2 - n1 + n0];
    let a = [d2 + d1 + d0, 2.0 * (d0 - d2), d2 - d1 + d0];
    Biquad {
        b: [b[0] / a[0], b[1] / a[0], b[2] / a[0]],
        a: [1.0, a[1] / a[0], a[2] / a[0]],
    }
}

/// Bilinear transform of a first-order section.
fn bilinear1(n1: f64, n0: f64, d1: f64, d0: f64) -> Biquad {
    let b = [n1 + n0, n0 - n1, 0.0];
    let a = [d1 + d0, d0 - d1, 0.0];
    Biquad {
        b: [b[0] / a[0], b[1] / a[0], 0.0],
        a: [1.0, a[1] / a[0], 0.0],
    }
}

fn run_cascade(signal: &mut [f64], sections: &[Biquad]) {
    for s in sections {
        // Direct form II transposed.
        let mut z1 = 0.0;
        let mut z2 = 0.0;
        for v in signal.iter_mut() {
            let x = *v;
            let y = s.b[0] * x + z1;
            z1 = s.b[1] * x - s.a[1] * y + z2;
            z2 = s.b[2] * x - s.a[2] * y;
            *v = y;
        }
    }
}

fn filtfilt_matrix(m: &Matrix, sections: &[Biquad]) -> Matrix {
    let mut out = Matrix::zeros(m.rows(), m.cols());
    for j in 0..m.cols() {
        let mut channel: Vec<f64> = (0..m.rows()).map(|i| m.get(i, j)).collect();
        run_cascade(&mut channel, sections);
        channel.reverse();
        run_cascade(&mut channel, sections);
        channel.reverse();
        for (i, &v) in channel.iter().enumerate() {
            out.set(i, j, v);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine_dataset(freq_hz: f64, fs: f64, steps: usize) -> TimeSeriesDataset {
        let x = Matrix::from_fn(steps, 1, |i, _| {
            (2.0 * std::f64::consts::PI * freq_hz * i as f64 / fs).sin()
        });
        TimeSeriesDataset {
            trajectories: vec![Trajectory {
                u: Matrix::zeros(steps, 1),
                x,
                source: "sine".into(),
            }],
            sample_rate_hz: fs,
            input_names: vec!["u1".into()],
            output_names: vec!["x1".into()],
            normalization: None,
            provenance: Vec::new(),
        }
    }

    fn constant_dataset(value: f64, fs: f64, steps: usize) -> TimeSeriesDataset {
        let mut ds = sine_dataset(1.0, fs, steps);
        ds.trajectories[0].x = Matrix::from_fn(steps, 1, |_, _| value);
        ds
    }

    /// Mid-signal RMS amplitude (edges trimmed by a quarter each side).
    fn mid_amplitude(m: &Matrix) -> f64 {
        let (lo, hi) = (m.rows() / 4, 3 * m.rows() / 4);
        let mean_sq: f64 =
            (lo..hi).map(|i| m.get(i, 0) * m.get(i, 0)).sum::<f64>() / (hi - lo) as f64;
        (2.0 * mean_sq).sqrt()
    }

    #[test]
    fn resample_identity_when_rates_match() {
        let ds = sine_dataset(1.0, 100.0, 200);
        let out = resample(&ds, 100.0).unwrap();
        assert_eq!(out.trajectories[0].x, ds.trajectories[0].x);
        assert_eq!(out.sample_rate_hz, 100.0);
    }

    #[test]
    fn resample_keeps_constant_signals_constant() {
        let ds = constant_dataset(3.7, 100.0, 150);
        for target in [37.0, 50.0, 220.0] {
            let out = resample(&ds, target).unwrap();
            for i in 0..out.trajectories[0].x.rows() {
                assert!((out.trajectories[0].x.get(i, 0) - 3.7).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn resample_sine_tracks_analytic_signal() {
        let fs = 100.0;
        let ds = sine_dataset(1.0, fs, 500);
        for target in [50.0, 37.0] {
            let out = resample(&ds, target).unwrap();
            let x = &out.trajectories[0].x;
            let mut max_dev: f64 = 0.0;
            for i in 0..x.rows() {
                let t = i as f64 / target;
                let expected = (2.0 * std::f64::consts::PI * t).sin();
                max_dev = max_dev.max((x.get(i, 0) - expected).abs());
            }
            assert!(max_dev <= 1e-3, "target {target}: deviation {max_dev}");
        }
    }

    #[test]
    fn highpass_rejects_constant_signal() {
        // 0.1 Hz cutoff has a ~4 s transient; a long signal leaves the
        // middle fully settled.
        let ds = constant_dataset(2.5, 100.0, 20_000);
        let out = butterworth_filter(&ds, FilterKind::HighPass, 0.1, 4).unwrap();
        let x = &out.trajectories[0].x;
        let worst = (9_000..11_000)
            .map(|i| x.get(i, 0).abs())
            .fold(0.0f64, f64::max);
        assert!(worst <= 1e-6 * 2.5, "residual {worst}");
    }

    #[test]
    fn lowpass_keeps_dc_exactly() {
        let ds = constant_dataset(1.0, 100.0, 400);
        let out = butterworth_filter(&ds, FilterKind::LowPass, 10.0, 4).unwrap();
        let x = &out.trajectories[0].x;
        for i in 100..300 {
            assert!((x.get(i, 0) - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn lowpass_frequency_response_matches_analog_prototype() {
        // Zero-phase order-4 lowpass at 380 Hz, 1000 Hz sampling. The
        // oracle is the squared (forward-backward) prewarped analog
        // magnitude response |H|^2 = (1 + (W/Wc)^(2n))^{-1}.
        let fs = 1000.0;
        let cutoff = 380.0;
        let order = 4;
        // Forward-backward filtering applies |H|^2 in amplitude, so the
        // expected amplitude ratio is the squared single-pass magnitude.
        let gain_oracle = |f_hz: f64| {
            let w = (std::f64::consts::PI * f_hz / fs).tan();
            let wc = (std::f64::consts::PI * cutoff / fs).tan();
            1.0 / (1.0 + (w / wc).powi(2 * order as i32))
        };

        // 10 Hz: essentially unity.
        let ds = sine_dataset(10.0, fs, 4000);
        let out = butterworth_filter(&ds, FilterKind::LowPass, cutoff, order).unwrap();
        let ratio = mid_amplitude(&out.trajectories[0].x) / mid_amplitude(&ds.trajectories[0].x);
        assert!(
            (0.999..=1.001).contains(&ratio),
            "10 Hz amplitude ratio {ratio}"
        );
        assert!((gain_oracle(10.0) - 1.0).abs() < 1e-10);

        // 450 Hz: strongly attenuated; forward-backward squares the
        // single-pass magnitude.
        let ds = sine_dataset(450.0, fs, 4000);
        let out = butterworth_filter(&ds, FilterKind::LowPass, cutoff, order).unwrap();
        let ratio = mid_amplitude(&out.trajectories[0].x) / mid_amplitude(&ds.trajectories[0].x);
        assert!(ratio < 0.1, "450 Hz amplitude ratio {ratio}");
        let expected = gain_oracle(450.0);
        assert!(
            (ratio - expected).abs() <= 0.05 * expected.max(1e-3),
            "450 Hz: got {ratio}, oracle {expected}"
        );
    }

    #[test]
    fn highpass_passes_fast_signals_through() {
        let fs = 100.0;
        let ds = sine_dataset(10.0, fs, 4000);
        let out = butterworth_filter(&ds, FilterKind::HighPass, 1.0, 4).unwrap();
        let ratio = mid_amplitude(&out.trajectories[0].x) / mid_amplitude(&ds.trajectories[0].x);
        assert!((ratio - 1.0).abs() < 1e-3, "ratio {ratio}");
    }

    #[test]
    fn cutoff_at_or_above_nyquist_is_rejected() {
        let ds = sine_dataset(1.0, 100.0, 100);
        assert!(butterworth_filter(&ds, FilterKind::LowPass, 50.0, 4).is_err());
        assert!(butterworth_filter(&ds, FilterKind::LowPass, 80.0, 4).is_err());
        assert!(butterworth_filter(&ds, FilterKind::LowPass, 0.0, 4).is_err());
    }

    #[test]
    fn odd_order_sections_design_cleanly() {
        let ds = sine_dataset(5.0, 100.0, 1000);
        let out = butterworth_filter(&ds, FilterKind::LowPass, 20.0, 3).unwrap();
        let ratio = mid_amplitude(&out.trajectories[0].x) / mid_amplitude(&ds.trajectories[0].x);
        assert!((ratio - 1.0).abs() < 0.01, "ratio {ratio}");
    }
}
