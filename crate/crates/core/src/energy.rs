//! Duty-cycled power budget, battery sizing and solar panel area.
//!
//! The device alternates between an active phase (spectrogram generation
//! followed by inference) for a fraction `duty` of the time and sleep for
//! the rest. The battery carries the average draw for `autonomy_hours`; the
//! panel must refill it within `charge_hours` at the month's irradiance.

use std::io::Read;

use serde::Deserialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EnergyError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("division by zero: {0}")]
    Division(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, EnergyError>;

/// Deployment parameters in SI units (J, s, W, fractions, hours).
#[derive(Debug, Clone, PartialEq)]
pub struct DeploymentProfile {
    pub name: String,
    pub e_infer: f64,
    pub t_infer: f64,
    pub e_dsp: f64,
    pub t_dsp: f64,
    pub p_sleep: f64,
    pub duty: f64,
    pub autonomy_hours: f64,
    pub charge_hours: f64,
    pub eta_solar: f64,
    pub eta_bat: f64,
    /// Battery capacity is rounded to a multiple of this before the charger
    /// is sized. Zero keeps the exact product.
    pub capacity_step_wh: f64,
}

/// On-disk profile: mJ, ms, mW and percentages.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProfileFile {
    #[serde(default)]
    name: String,
    e_infer_mj: f64,
    t_infer_ms: f64,
    e_dsp_mj: f64,
    t_dsp_ms: f64,
    p_sleep_mw: f64,
    #[serde(default = "default_duty")]
    duty_pct: f64,
    #[serde(default = "default_autonomy")]
    autonomy_h: f64,
    #[serde(default = "default_charge")]
    charge_h: f64,
    #[serde(default = "default_eta_solar")]
    eta_solar_pct: f64,
    #[serde(default = "default_eta_bat")]
    eta_bat_pct: f64,
    #[serde(default)]
    capacity_step_wh: f64,
}

fn default_duty() -> f64 {
    10.0
}
fn default_autonomy() -> f64 {
    48.0
}
fn default_charge() -> f64 {
    24.0
}
fn default_eta_solar() -> f64 {
    20.0
}
fn default_eta_bat() -> f64 {
    90.0
}

pub const CORTEX_M7_PROFILE: &str = include_str!("../data/m7.toml");
pub const RASPBERRY_PI4_PROFILE: &str = include_str!("../data/pi4.toml");
pub const GERMANY_IRRADIANCE_CSV: &str = include_str!("../data/irradiance_de.csv");

impl DeploymentProfile {
    /// Parses a TOML key-value profile and validates it.
    pub fn from_toml(text: &str) -> Result<Self> {
        let f: ProfileFile =
            toml::from_str(text).map_err(|e| EnergyError::Config(e.to_string()))?;
        let p = Self {
            name: f.name,
            e_infer: f.e_infer_mj * 1e-3,
            t_infer: f.t_infer_ms * 1e-3,
            e_dsp: f.e_dsp_mj * 1e-3,
            t_dsp: f.t_dsp_ms * 1e-3,
            p_sleep: f.p_sleep_mw * 1e-3,
            duty: f.duty_pct / 100.0,
            autonomy_hours: f.autonomy_h,
            charge_hours: f.charge_h,
            eta_solar: f.eta_solar_pct / 100.0,
            eta_bat: f.eta_bat_pct / 100.0,
            capacity_step_wh: f.capacity_step_wh,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn cortex_m7() -> Self {
        Self::from_toml(CORTEX_M7_PROFILE).expect("bundled profile is valid")
    }

    pub fn raspberry_pi4() -> Self {
        Self::from_toml(RASPBERRY_PI4_PROFILE).expect("bundled profile is valid")
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("e_infer", self.e_infer),
            ("t_infer", self.t_infer),
            ("e_dsp", self.e_dsp),
            ("t_dsp", self.t_dsp),
            ("p_sleep", self.p_sleep),
            ("autonomy_hours", self.autonomy_hours),
            ("charge_hours", self.charge_hours),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(EnergyError::Config(format!(
                    "{name} must be positive, got {v}"
                )));
            }
        }
        if !(self.duty > 0.0 && self.duty < 1.0) {
            return Err(EnergyError::Config(format!(
                "duty must be in (0, 1), got {}",
                self.duty
            )));
        }
        for (name, v) in [("eta_solar", self.eta_solar), ("eta_bat", self.eta_bat)] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(EnergyError::Config(format!(
                    "{name} must be in (0, 1], got {v}"
                )));
            }
        }
        if !(self.capacity_step_wh >= 0.0 && self.capacity_step_wh.is_finite()) {
            return Err(EnergyError::Config(
                "capacity_step_wh must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Power while awake: energy of one spectrogram plus one inference over
/// their combined duration.
pub fn active_power(p: &DeploymentProfile) -> Result<f64> {
    let t = p.t_infer + p.t_dsp;
    if t == 0.0 {
        return Err(EnergyError::Division("total active time is zero".into()));
    }
    Ok((p.e_infer + p.e_dsp) / t)
}

pub fn average_power(p: &DeploymentProfile) -> Result<f64> {
    Ok(p.duty * active_power(p)? + (1.0 - p.duty) * p.p_sleep)
}

/// Exact energy in Wh to run `autonomy_hours` at the average draw.
pub fn battery_capacity(p: &DeploymentProfile) -> Result<f64> {
    Ok(average_power(p)? * p.autonomy_hours)
}

/// Battery capacity rounded to the profile's `capacity_step_wh`.
pub fn nominal_capacity(p: &DeploymentProfile) -> Result<f64> {
    let exact = battery_capacity(p)?;
    if p.capacity_step_wh == 0.0 {
        return Ok(exact);
    }
    Ok((exact / p.capacity_step_wh).round() * p.capacity_step_wh)
}

pub fn charge_power(capacity_wh: f64, charge_hours: f64) -> Result<f64> {
    if charge_hours == 0.0 {
        return Err(EnergyError::Division("charge time is zero".into()));
    }
    Ok(capacity_wh / charge_hours)
}

/// Panel area in m² delivering `p_charge` W into the battery.
pub fn panel_area(p_charge: f64, s_rad: f64, eta_solar: f64, eta_bat: f64) -> Result<f64> {
    let denom = eta_solar * eta_bat * s_rad;
    if denom == 0.0 {
        return Err(EnergyError::Division(
            "panel efficiency times irradiance is zero".into(),
        ));
    }
    Ok(p_charge / denom)
}

/// Month-independent part of the chain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerBudget {
    pub active_w: f64,
    pub average_w: f64,
    pub capacity_wh: f64,
    pub nominal_capacity_wh: f64,
    pub charge_w: f64,
}

pub fn power_budget(p: &DeploymentProfile) -> Result<PowerBudget> {
    let nominal = nominal_capacity(p)?;
    Ok(PowerBudget {
        active_w: active_power(p)?,
        average_w: average_power(p)?,
        capacity_wh: battery_capacity(p)?,
        nominal_capacity_wh: nominal,
        charge_w: charge_power(nominal, p.charge_hours)?,
    })
}

pub const MONTH_NAMES: [&str; 12] = [
    "Jan", "Feb", "Mar", "Apr", "May", "Jun", "Jul", "Aug", "Sep", "Oct", "Nov", "Dec",
];

/// Mean solar power density per calendar month, W/m².
#[derive(Debug, Clone, PartialEq)]
pub struct IrradianceTable {
    s_rad: [f64; 12],
}

#[derive(Debug, Deserialize)]
struct IrradianceRow {
    month: String,
    s_rad: f64,
}

fn parse_month(s: &str) -> Option<usize> {
    if let Ok(n) = s.parse::<usize>() {
        return (1..=12).contains(&n).then(|| n - 1);
    }
    let lower = s.to_ascii_lowercase();
    MONTH_NAMES
        .iter()
        .position(|m| lower.len() >= 3 && m.to_ascii_lowercase().starts_with(&lower[..3]))
}

impl IrradianceTable {
    /// Builds a table from `(month index 0..12, s_rad)` pairs covering every
    /// month exactly once.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (usize, f64)>) -> Result<Self> {
        let mut s_rad = [f64::NAN; 12];
        for (m, v) in pairs {
            if m >= 12 {
                return Err(EnergyError::Config(format!("month index {m} out of range")));
            }
            if !s_rad[m].is_nan() {
                return Err(EnergyError::Config(format!(
                    "{} listed twice",
                    MONTH_NAMES[m]
                )));
            }
            if !(v > 0.0 && v.is_finite()) {
                return Err(EnergyError::Config(format!(
                    "{} irradiance must be positive, got {v}",
                    MONTH_NAMES[m]
                )));
            }
            s_rad[m] = v;
        }
        if let Some(m) = s_rad.iter().position(|v| v.is_nan()) {
            return Err(EnergyError::Config(format!(
                "missing month {}",
                MONTH_NAMES[m]
            )));
        }
        Ok(Self { s_rad })
    }

    /// Reads CSV with header `month,s_rad`; months are 1-12 or English names.
    pub fn from_csv<R: Read>(source: R) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(source);
        let mut pairs = Vec::with_capacity(12);
        for row in reader.deserialize() {
            let row: IrradianceRow = row?;
            let m = parse_month(&row.month)
                .ok_or_else(|| EnergyError::Config(format!("unknown month {:?}", row.month)))?;
            pairs.push((m, row.s_rad));
        }
        Self::from_pairs(pairs)
    }

    pub fn germany() -> Self {
        Self::from_csv(GERMANY_IRRADIANCE_CSV.as_bytes()).expect("bundled table is valid")
    }

    pub fn uniform(s_rad: f64) -> Result<Self> {
        Self::from_pairs((0..12).map(|m| (m, s_rad)))
    }

    pub fn get(&self, month: usize) -> f64 {
        self.s_rad[month]
    }

    pub fn values(&self) -> &[f64; 12] {
        &self.s_rad
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MonthlyRow {
    /// 1-based calendar month.
    pub month: u8,
    pub s_rad: f64,
    pub capacity_wh: f64,
    pub charge_w: f64,
    pub area_m2: f64,
    /// Largest required area of the year (first such month on ties).
    pub worst: bool,
}

pub fn monthly_report(p: &DeploymentProfile, table: &IrradianceTable) -> Result<Vec<MonthlyRow>> {
    let budget = power_budget(p)?;
    let mut rows = Vec::with_capacity(12);
    for (m, &s) in table.values().iter().enumerate() {
        rows.push(MonthlyRow {
            month: m as u8 + 1,
            s_rad: s,
            capacity_wh: budget.nominal_capacity_wh,
            charge_w: budget.charge_w,
            area_m2: panel_area(budget.charge_w, s, p.eta_solar, p.eta_bat)?,
            worst: false,
        });
    }
    let worst = rows.iter().enumerate().fold(0, |best, (i, r)| {
        if r.area_m2 > rows[best].area_m2 {
            i
        } else {
            best
        }
    });
    rows[worst].worst = true;
    Ok(rows)
}
