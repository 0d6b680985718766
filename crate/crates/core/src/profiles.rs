//! Normalized daily curves for PV production and load consumption.

use std::f64::consts::PI;
use std::path::Path;

use serde::Deserialize;
use thiserror::Error;

/// Power factor applied to loads when no reactive curve is supplied.
pub const DEFAULT_POWER_FACTOR: f64 = 0.9;

#[derive(Debug, Error)]
pub enum ProfileError {
    #[error("{steps} steps of {dt_hours} h cover {covered} h instead of 24 h")]
    LengthMismatch { steps: usize, dt_hours: f64, covered: f64 },
    #[error("row {row}: negative value {value}")]
    NegativeValue { row: usize, value: f64 },
    #[error("row {row}: value {value} exceeds 1")]
    ExceedsUnity { row: usize, value: f64 },
    #[error("row {row}: value is not finite")]
    NonFinite { row: usize },
    #[error("time step must be positive, got {0} h")]
    InvalidTimeStep(f64),
    #[error("cannot read curve: {0}")]
    Csv(#[from] csv::Error),
}

/// Daily curve relative to 1 kWp (PV) or to the nominal demand (load).
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedCurve {
    values: Vec<f64>,
    dt_hours: f64,
}

impl NormalizedCurve {
    pub fn new(values: Vec<f64>, dt_hours: f64) -> Result<Self, ProfileError> {
        if !(dt_hours > 0.0 && dt_hours.is_finite()) {
            return Err(ProfileError::InvalidTimeStep(dt_hours));
        }
        for (row, &value) in values.iter().enumerate() {
            if !value.is_finite() {
                return Err(ProfileError::NonFinite { row });
            }
            if value < 0.0 {
                return Err(ProfileError::NegativeValue { row, value });
            }
            if value > 1.0 {
                return Err(ProfileError::ExceedsUnity { row, value });
            }
        }
        let covered = values.len() as f64 * dt_hours;
        if (covered - 24.0).abs() > 1e-9 {
            return Err(ProfileError::LengthMismatch {
                steps: values.len(),
                dt_hours,
                covered,
            });
        }
        Ok(Self { values, dt_hours })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dt_hours(&self) -> f64 {
        self.dt_hours
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Integral over the day, in kWh per kW of reference power.
    pub fn energy(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.dt_hours
    }

    pub fn peak(&self) -> f64 {
        self.values.iter().cloned().fold(0.0, f64::max)
    }

    /// Hour of day at the start of step `t`.
    pub fn hour(&self, t: usize) -> f64 {
        t as f64 * self.dt_hours
    }
}

#[derive(Deserialize)]
struct CurveRow {
    value: f64,
}

/// Reads a single-column CSV with header `value`.
pub fn load_curve(path: impl AsRef<Path>, dt_hours: f64) -> Result<NormalizedCurve, ProfileError> {
    let mut reader = csv::Reader::from_path(path)?;
    let values = reader
        .deserialize::<CurveRow>()
        .map(|r| r.map(|row| row.value))
        .collect::<Result<Vec<_>, _>>()?;
    NormalizedCurve::new(values, dt_hours)
}

fn sample(dt_hours: f64, f: impl Fn(f64) -> f64) -> Vec<f64> {
    let steps = (24.0 / dt_hours).round() as usize;
    (0..steps).map(|t| f(t as f64 * dt_hours)).collect()
}

/// Clear-sky bell between 06:00 and 18:00, peaking at 1.0 at noon.
pub fn pv_shape(hour: f64) -> f64 {
    if !(6.0..=18.0).contains(&hour) {
        return 0.0;
    }
    (PI * (hour - 6.0) / 12.0).sin().max(0.0).powf(1.2)
}

pub fn builtin_pv_curve(dt_hours: f64) -> Result<NormalizedCurve, ProfileError> {
    if !(dt_hours > 0.0) {
        return Err(ProfileError::InvalidTimeStep(dt_hours));
    }
    NormalizedCurve::new(sample(dt_hours, pv_shape), dt_hours)
}

/// Residential demand shape: night base, morning and lunchtime bumps and
/// an evening peak. Not normalized.
fn residential_shape(hour: f64) -> f64 {
    let bump = |centre: f64, width: f64| (-((hour - centre) / width).powi(2)).exp();
    0.30 + 0.30 * bump(7.5, 1.2) + 0.12 * bump(12.5, 1.5) + 0.70 * bump(19.5, 2.0)
}

/// Synthetic residential load curve with its maximum sample at 1.0.
pub fn builtin_load_curve(dt_hours: f64) -> Result<NormalizedCurve, ProfileError> {
    if !(dt_hours > 0.0) {
        return Err(ProfileError::InvalidTimeStep(dt_hours));
    }
    let raw = sample(dt_hours, residential_shape);
    let peak = raw.iter().cloned().fold(0.0, f64::max);
    NormalizedCurve::new(raw.into_iter().map(|v| v / peak).collect(), dt_hours)
}

/// Scales a normalized curve to a node with nominal power `nominal_kw`.
pub fn scale_to_node(curve: &NormalizedCurve, nominal_kw: f64) -> Vec<f64> {
    debug_assert!(nominal_kw >= 0.0);
    curve.values.iter().map(|v| v * nominal_kw).collect()
}

/// Reactive power drawn along with `p_kw` at a lagging power factor.
pub fn reactive_from_pf(p_kw: f64, power_factor: f64) -> f64 {
    p_kw * (1.0 - power_factor * power_factor).sqrt() / power_factor
}
