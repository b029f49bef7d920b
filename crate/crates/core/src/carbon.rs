//! Compute-emissions estimate: `CO₂ = CI · PUE · P · t`.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CarbonParams {
    /// Carbon intensity, kg CO₂ per kWh.
    pub carbon_intensity: f64,
    /// Power usage effectiveness, ≥ 1.
    pub pue: f64,
    /// Average power draw in kW.
    pub power_kw: f64,
    pub hours: f64,
}

/// Emissions in kg CO₂.
pub fn carbon_estimate(p: &CarbonParams) -> Result<f64> {
    let fields = [
        ("carbon intensity", p.carbon_intensity),
        ("PUE", p.pue),
        ("power", p.power_kw),
        ("hours", p.hours),
    ];
    for (name, v) in fields {
        if !(v >= 0.0 && v.is_finite()) {
            return Err(Error::contract(format!("{name} must be a finite non-negative number, got {v}")));
        }
    }
    if p.pue < 1.0 {
        return Err(Error::contract(format!("PUE must be at least 1, got {}", p.pue)));
    }
    Ok(p.carbon_intensity * p.pue * p.power_kw * p.hours)
}
