//! Energy sizing for the solar-powered stop display and an hourly battery
//! state-of-charge simulation.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Bundled component profile (LED row at 10 h/day).
pub const DISPLAY_PROFILE_CSV: &str = include_str!("../../../fixtures/display-profile.csv");

/// Standard panel ratings the report picks a recommendation from.
pub const STANDARD_PANELS_W: [f64; 7] = [5.0, 10.0, 20.0, 30.0, 50.0, 100.0, 200.0];
/// Standard sealed lead-acid capacities.
pub const STANDARD_BATTERIES_AH: [f64; 8] = [1.2, 2.3, 5.0, 7.0, 9.0, 12.0, 18.0, 26.0];
/// Panel rating margin over the computed requirement for weather variation.
pub const PANEL_HEADROOM: f64 = 1.3;
/// Battery margin over one day of backup.
pub const BATTERY_HEADROOM: f64 = 1.5;

#[derive(Debug, Error, PartialEq)]
pub enum EnergyError {
    #[error("peak sun hours must be positive, got {0}")]
    SunHours(f64),
    #[error("battery voltage must be positive, got {0}")]
    Voltage(f64),
    #[error("daily energy must be non-negative, got {0}")]
    NegativeEnergy(f64),
    #[error("profile is empty")]
    EmptyProfile,
    #[error("profile row {row}: {reason}")]
    ProfileRow { row: usize, reason: String },
    #[error("{what} must have 24 hourly entries, got {len}")]
    HourlyLength { what: &'static str, len: usize },
    #[error("{what} hour {hour}: value {value} out of range")]
    HourlyValue {
        what: &'static str,
        hour: usize,
        value: f64,
    },
    #[error("simulation needs at least one day")]
    NoDays,
    #[error("invalid solar configuration: {0}")]
    Config(String),
    #[error("unknown bound {0:?}")]
    UnknownBound(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentDraw {
    pub name: String,
    pub power_min_w: f64,
    pub power_max_w: f64,
    pub daily_usage_h: f64,
}

impl ComponentDraw {
    fn check(&self) -> Result<(), String> {
        let finite = [self.power_min_w, self.power_max_w, self.daily_usage_h]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err("non-finite value".into());
        }
        if !(0.0 <= self.power_min_w && self.power_min_w <= self.power_max_w) {
            return Err(format!(
                "power range {}..{} W is invalid",
                self.power_min_w, self.power_max_w
            ));
        }
        if !(0.0..=24.0).contains(&self.daily_usage_h) {
            return Err(format!("daily usage {} h outside [0, 24]", self.daily_usage_h));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bound {
    Min,
    Max,
}

impl FromStr for Bound {
    type Err = EnergyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "min" => Ok(Bound::Min),
            "max" => Ok(Bound::Max),
            other => Err(EnergyError::UnknownBound(other.to_owned())),
        }
    }
}

impl fmt::Display for Bound {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Bound::Min => "min",
            Bound::Max => "max",
        })
    }
}

/// Parses a `name,power_min_w,power_max_w,daily_usage_h` profile.
/// Row numbers in errors count the header as row 1.
pub fn parse_profile(csv_text: &str) -> Result<Vec<ComponentDraw>, EnergyError> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(csv_text.as_bytes());
    let mut out = Vec::new();
    for (i, rec) in reader.deserialize::<ComponentDraw>().enumerate() {
        let row = i + 2;
        let draw = rec.map_err(|e| EnergyError::ProfileRow {
            row: e.position().map_or(row, |p| p.line() as usize),
            reason: match e.kind() {
                csv::ErrorKind::Deserialize { err, .. } => err.to_string(),
                _ => e.to_string(),
            },
        })?;
        draw.check().map_err(|reason| EnergyError::ProfileRow { row, reason })?;
        out.push(draw);
    }
    if out.is_empty() {
        return Err(EnergyError::EmptyProfile);
    }
    Ok(out)
}

pub fn display_profile() -> Vec<ComponentDraw> {
    parse_profile(DISPLAY_PROFILE_CSV).expect("bundled profile parses")
}

/// "LED" as a whole word, so an OLED display is not an LED row.
fn is_led_row(name: &str) -> bool {
    name.split(|c: char| !c.is_ascii_alphanumeric())
        .any(|w| w.eq_ignore_ascii_case("led"))
}

/// Sets the daily usage of every LED row. `10` is the table as printed,
/// `24` reproduces the headline maximum total.
pub fn with_led_hours(profile: &[ComponentDraw], hours: f64) -> Vec<ComponentDraw> {
    profile
        .iter()
        .cloned()
        .map(|mut c| {
            if is_led_row(&c.name) {
                c.daily_usage_h = hours;
            }
            c
        })
        .collect()
}

/// Daily energy in Wh: chosen power bound times daily usage, summed.
pub fn daily_energy_wh(profile: &[ComponentDraw], bound: Bound) -> f64 {
    profile
        .iter()
        .map(|c| {
            let p = match bound {
                Bound::Min => c.power_min_w,
                Bound::Max => c.power_max_w,
            };
            p * c.daily_usage_h
        })
        .sum()
}

pub fn required_panel_w(daily_wh: f64, peak_sun_hours: f64) -> Result<f64, EnergyError> {
    if !(peak_sun_hours > 0.0) {
        return Err(EnergyError::SunHours(peak_sun_hours));
    }
    Ok(daily_wh / peak_sun_hours)
}

pub fn battery_ah(daily_wh: f64, voltage_v: f64) -> Result<f64, EnergyError> {
    if !(voltage_v > 0.0) {
        return Err(EnergyError::Voltage(voltage_v));
    }
    Ok(daily_wh / voltage_v)
}

pub fn annual_savings_kwh(daily_wh: f64) -> Result<f64, EnergyError> {
    if !(daily_wh >= 0.0) {
        return Err(EnergyError::NegativeEnergy(daily_wh));
    }
    Ok(daily_wh * 365.0 / 1000.0)
}

fn smallest_at_least(options: &[f64], need: f64) -> Option<f64> {
    options.iter().copied().find(|&o| o >= need)
}

/// Sizing summary for one bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub bound: Bound,
    pub daily_wh: f64,
    pub sun_hours: f64,
    pub panel_w: f64,
    pub voltage_v: f64,
    pub battery_ah: f64,
    pub annual_kwh: f64,
    pub recommended_panel_w: Option<f64>,
    pub recommended_battery_ah: Option<f64>,
}

impl EnergyReport {
    pub fn compute(
        profile: &[ComponentDraw],
        bound: Bound,
        sun_hours: f64,
        voltage_v: f64,
    ) -> Result<Self, EnergyError> {
        if profile.is_empty() {
            return Err(EnergyError::EmptyProfile);
        }
        let daily_wh = daily_energy_wh(profile, bound);
        let panel_w = required_panel_w(daily_wh, sun_hours)?;
        let ah = battery_ah(daily_wh, voltage_v)?;
        Ok(Self {
            bound,
            daily_wh,
            sun_hours,
            panel_w,
            voltage_v,
            battery_ah: ah,
            annual_kwh: annual_savings_kwh(daily_wh)?,
            recommended_panel_w: smallest_at_least(&STANDARD_PANELS_W, panel_w * PANEL_HEADROOM),
            recommended_battery_ah: smallest_at_least(&STANDARD_BATTERIES_AH, ah * BATTERY_HEADROOM),
        })
    }
}

impl fmt::Display for EnergyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let label = match self.bound {
            Bound::Min => "Minimum",
            Bound::Max => "Maximum",
        };
        writeln!(f, "Energy consumption ({label})")?;
        writeln!(
            f,
            "  daily: {:.3} Wh = {:.4} kWh",
            self.daily_wh,
            self.daily_wh / 1000.0
        )?;
        writeln!(f, "Solar panel sizing ({} peak sun hours)", self.sun_hours)?;
        writeln!(
            f,
            "  required: {:.3} Wh / {} h = {:.4} W",
            self.daily_wh, self.sun_hours, self.panel_w
        )?;
        match self.recommended_panel_w {
            Some(w) => writeln!(f, "  recommended: {w} W panel")?,
            None => writeln!(f, "  recommended: none of the standard panels suffice")?,
        }
        writeln!(f, "Battery backup")?;
        writeln!(
            f,
            "  required: {:.3} Wh = {} V, {:.3} Ah",
            self.daily_wh, self.voltage_v, self.battery_ah
        )?;
        match self.recommended_battery_ah {
            Some(ah) => writeln!(f, "  recommended: {} V {ah} Ah battery", self.voltage_v)?,
            None => writeln!(f, "  recommended: none of the standard batteries suffice")?,
        }
        writeln!(f, "Annual grid savings")?;
        write!(
            f,
            "  {:.3} Wh x 365 / 1000 = {:.2} kWh per year",
            self.daily_wh, self.annual_kwh
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolarConfig {
    pub panel_w: f64,
    pub peak_sun_hours: f64,
    pub battery_voltage_v: f64,
    pub battery_capacity_ah: f64,
    pub initial_soc: f64,
    /// Charge-controller efficiency applied to panel output.
    #[serde(default = "unit_efficiency")]
    pub efficiency: f64,
}

fn unit_efficiency() -> f64 {
    1.0
}

impl Default for SolarConfig {
    fn default() -> Self {
        Self {
            panel_w: 20.0,
            peak_sun_hours: 5.0,
            battery_voltage_v: 12.0,
            battery_capacity_ah: 5.0,
            initial_soc: 0.5,
            efficiency: 1.0,
        }
    }
}

impl SolarConfig {
    pub fn capacity_wh(&self) -> f64 {
        self.battery_capacity_ah * self.battery_voltage_v
    }

    pub fn validate(&self) -> Result<(), EnergyError> {
        let bad = |m: &str| Err(EnergyError::Config(m.to_owned()));
        if !(self.panel_w >= 0.0 && self.panel_w.is_finite()) {
            return bad("panel_w must be finite and non-negative");
        }
        if !(self.peak_sun_hours > 0.0) {
            return bad("peak_sun_hours must be positive");
        }
        if !(self.battery_voltage_v > 0.0 && self.battery_capacity_ah > 0.0) {
            return bad("battery voltage and capacity must be positive");
        }
        if !(0.0..=1.0).contains(&self.initial_soc) {
            return bad("initial_soc must be in [0, 1]");
        }
        if !(self.efficiency > 0.0 && self.efficiency <= 1.0) {
            return bad("efficiency must be in (0, 1]");
        }
        Ok(())
    }
}

/// Energy flows for one simulated day, in Wh.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct DayBalance {
    pub generation_wh: f64,
    pub consumption_wh: f64,
    pub spill_wh: f64,
    pub stored_start_wh: f64,
    pub stored_end_wh: f64,
}

impl DayBalance {
    /// Generation minus consumption, storage change, and spill. Zero up to rounding.
    pub fn residual_wh(&self) -> f64 {
        self.generation_wh - self.consumption_wh - (self.stored_end_wh - self.stored_start_wh) - self.spill_wh
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SocTrace {
    /// State of charge at the end of each simulated hour.
    pub hourly_soc: Vec<f64>,
    pub uptime_fraction: f64,
    pub days: Vec<DayBalance>,
}

fn check_hourly(what: &'static str, values: &[f64], max: Option<f64>) -> Result<(), EnergyError> {
    if values.len() != 24 {
        return Err(EnergyError::HourlyLength {
            what,
            len: values.len(),
        });
    }
    for (hour, &value) in values.iter().enumerate() {
        let ok = value.is_finite() && value >= 0.0 && max.is_none_or(|m| value <= m);
        if !ok {
            return Err(EnergyError::HourlyValue { what, hour, value });
        }
    }
    Ok(())
}

/// Hour-by-hour energy balance of the stop's panel and battery.
///
/// An hour counts as "up" when its whole load was served. When storage runs
/// dry mid-hour the partial energy is still drawn and the hour is down.
pub fn simulate_soc(
    config: &SolarConfig,
    load_w: &[f64],
    irradiance: &[f64],
    days: usize,
) -> Result<SocTrace, EnergyError> {
    config.validate()?;
    check_hourly("load profile", load_w, None)?;
    check_hourly("irradiance", irradiance, Some(1.0))?;
    if days == 0 {
        return Err(EnergyError::NoDays);
    }
    let capacity = config.capacity_wh();
    let mut stored = config.initial_soc * capacity;
    let mut hourly_soc = Vec::with_capacity(days * 24);
    let mut day_log = Vec::with_capacity(days);
    let mut up_hours = 0usize;
    for _ in 0..days {
        let mut day = DayBalance {
            stored_start_wh: stored,
            ..DayBalance::default()
        };
        for hour in 0..24 {
            let generation = config.panel_w * irradiance[hour] * config.efficiency;
            let load = load_w[hour];
            let available = stored + generation;
            let served = load.min(available);
            if served >= load {
                up_hours += 1;
            }
            let remaining = available - served;
            let spill = (remaining - capacity).max(0.0);
            stored = remaining - spill;
            day.generation_wh += generation;
            day.consumption_wh += served;
            day.spill_wh += spill;
            hourly_soc.push((stored / capacity).clamp(0.0, 1.0));
        }
        day.stored_end_wh = stored;
        day_log.push(day);
    }
    Ok(SocTrace {
        uptime_fraction: up_hours as f64 / (days * 24) as f64,
        hourly_soc,
        days: day_log,
    })
}

fn tukey(x: f64, alpha: f64) -> f64 {
    let edge = alpha / 2.0;
    if x < edge {
        0.5 * (1.0 - (std::f64::consts::PI * x / edge).cos())
    } else if x > 1.0 - edge {
        0.5 * (1.0 - (std::f64::consts::PI * (1.0 - x) / edge).cos())
    } else {
        1.0
    }
}

/// Built-in irradiance: a flat-topped raised cosine over 08:00-17:00 whose
/// hourly fractions sum to `peak_sun_hours`.
///
/// A plain raised cosine over nine hours peaks above 1 for totals beyond 4.5
/// hours, so the taper width is solved for instead; smaller totals scale the
/// plain shape down.
pub fn default_irradiance(peak_sun_hours: f64) -> Result<[f64; 24], EnergyError> {
    const FIRST: usize = 8;
    const SLOTS: usize = 9;
    if !(peak_sun_hours > 0.0 && peak_sun_hours <= SLOTS as f64) {
        return Err(EnergyError::SunHours(peak_sun_hours));
    }
    let shape = |alpha: f64| -> [f64; SLOTS] { std::array::from_fn(|k| tukey((k as f64 + 0.5) / SLOTS as f64, alpha)) };
    let total = |s: &[f64; SLOTS]| s.iter().sum::<f64>();
    let hann = shape(1.0);
    let weights = if peak_sun_hours <= total(&hann) {
        let scale = peak_sun_hours / total(&hann);
        hann.map(|w| w * scale)
    } else {
        // Sum decreases as alpha grows; bisect.
        let (mut lo, mut hi) = (0.0f64, 1.0f64);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if total(&shape(mid)) > peak_sun_hours {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        shape(0.5 * (lo + hi))
    };
    let mut out = [0.0; 24];
    out[FIRST..FIRST + SLOTS].copy_from_slice(&weights);
    Ok(out)
}

/// Parses a 24-row `hour,value` CSV (header optional). Used for irradiance
/// profiles and state-of-charge traces.
pub fn parse_hourly_csv(text: &str) -> Result<Vec<f64>, EnergyError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let value = line.rsplit(',').next().unwrap_or_default().trim();
        match value.parse::<f64>() {
            Ok(v) => out.push(v),
            Err(_) if i == 0 => continue,
            Err(_) => {
                return Err(EnergyError::ProfileRow {
                    row: i + 1,
                    reason: format!("not a number: {value:?}"),
                })
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn display_profile_min_total() {
        let wh = daily_energy_wh(&display_profile(), Bound::Min);
        assert!((wh - 3.4624).abs() < 1e-12);
    }

    #[test]
    fn display_profile_max_for_both_led_presets() {
        let literal = daily_energy_wh(&display_profile(), Bound::Max);
        assert!((literal - 33.424).abs() < 1e-12);
        let printed = daily_energy_wh(&with_led_hours(&display_profile(), 24.0), Bound::Max);
        assert_eq!(format!("{printed:.3}"), "34.824");
        let reset = daily_energy_wh(&with_led_hours(&display_profile(), 10.0), Bound::Max);
        assert!((reset - 33.424).abs() < 1e-12);
    }

    #[test]
    fn oled_is_not_an_led_row() {
        assert!(is_led_row("5mm LED Light"));
        assert!(is_led_row("led strip"));
        assert!(!is_led_row("0.96-inch I2C OLED Display"));
        assert!(!is_led_row("Bulletin"));
    }

    #[test]
    fn zero_usage_zero_energy() {
        let idle = display_profile()
            .into_iter()
            .map(|mut c| {
                c.daily_usage_h = 0.0;
                c
            })
            .collect::<Vec<_>>();
        assert_eq!(daily_energy_wh(&idle, Bound::Max), 0.0);
    }

    #[test]
    fn panel_sizing() {
        assert!((required_panel_w(34.824, 5.0).unwrap() - 6.9648).abs() < 1e-12);
        assert!((required_panel_w(3.46, 5.0).unwrap() - 0.692).abs() < 1e-12);
        assert_eq!(required_panel_w(0.0, 5.0).unwrap(), 0.0);
        assert_eq!(required_panel_w(1.0, 0.0), Err(EnergyError::SunHours(0.0)));
        assert!(required_panel_w(1.0, -2.0).is_err());
    }

    #[test]
    fn battery_sizing() {
        assert!((battery_ah(3.46, 12.0).unwrap() - 0.288_333).abs() < 1e-5);
        assert!((battery_ah(33.424, 12.0).unwrap() - 2.785_333).abs() < 1e-5);
        assert!((battery_ah(33.424, 24.0).unwrap() - 1.392_667).abs() < 1e-5);
        assert_eq!(battery_ah(1.0, 0.0), Err(EnergyError::Voltage(0.0)));
    }

    #[test]
    fn annual_savings() {
        assert!((annual_savings_kwh(34.824).unwrap() - 12.71076).abs() < 1e-9);
        assert!((annual_savings_kwh(3.46).unwrap() - 1.2629).abs() < 1e-9);
        assert_eq!(annual_savings_kwh(0.0).unwrap(), 0.0);
        assert!(annual_savings_kwh(-1.0).is_err());
    }

    #[test]
    fn report_text_layout() {
        let profile = with_led_hours(&display_profile(), 24.0);
        let text = EnergyReport::compute(&profile, Bound::Max, 5.0, 12.0)
            .unwrap()
            .to_string();
        assert!(text.contains("34.824 Wh"), "{text}");
        assert!(text.contains("6.9648 W"), "{text}");
        assert!(text.contains("12.71 kWh per year"), "{text}");
        assert!(text.contains("recommended: 10 W panel"), "{text}");
        assert!(text.contains("recommended: 12 V 5 Ah battery"), "{text}");
    }

    #[test]
    fn profile_errors_name_the_row() {
        let bad = "name,power_min_w,power_max_w,daily_usage_h\nA,0.1,0.2,24\nB,0.5,0.2,24\n";
        assert!(matches!(
            parse_profile(bad),
            Err(EnergyError::ProfileRow { row: 3, .. })
        ));
        let bad = "name,power_min_w,power_max_w,daily_usage_h\nA,x,0.2,24\n";
        assert!(matches!(
            parse_profile(bad),
            Err(EnergyError::ProfileRow { row: 2, .. })
        ));
        let bad = "name,power_min_w,power_max_w,daily_usage_h\nA,0.1,0.2,25\n";
        assert!(matches!(
            parse_profile(bad),
            Err(EnergyError::ProfileRow { row: 2, .. })
        ));
        assert_eq!(
            parse_profile("name,power_min_w,power_max_w,daily_usage_h\n"),
            Err(EnergyError::EmptyProfile)
        );
    }

    #[test]
    fn default_irradiance_shape() {
        for total in [1.0, 4.5, 5.0, 7.0] {
            let irr = default_irradiance(total).unwrap();
            assert!((irr.iter().sum::<f64>() - total).abs() < 1e-9, "total {total}");
            assert!(irr.iter().all(|&v| (0.0..=1.0).contains(&v)));
            assert!(irr[..8].iter().chain(&irr[17..]).all(|&v| v == 0.0));
        }
        assert!(default_irradiance(10.0).is_err());
    }

    #[test]
    fn generous_panel_keeps_display_up_all_week() {
        // Daily generation 100 Wh against 34.824 Wh of load; the 60 Wh battery
        // starting half full covers the 15 dark hours (about 21.8 Wh).
        let cfg = SolarConfig::default();
        let load = [34.824 / 24.0; 24];
        let trace = simulate_soc(&cfg, &load, &default_irradiance(5.0).unwrap(), 7).unwrap();
        assert_eq!(trace.uptime_fraction, 1.0);
        assert_eq!(trace.hourly_soc.len(), 168);
    }

    #[test]
    fn no_panel_and_empty_battery_never_up() {
        let cfg = SolarConfig {
            panel_w: 0.0,
            initial_soc: 0.0,
            ..SolarConfig::default()
        };
        let trace = simulate_soc(&cfg, &[1.0; 24], &default_irradiance(5.0).unwrap(), 3).unwrap();
        assert_eq!(trace.uptime_fraction, 0.0);
    }

    #[test]
    fn zero_load_charges_monotonically() {
        let cfg = SolarConfig {
            initial_soc: 0.0,
            ..SolarConfig::default()
        };
        let trace = simulate_soc(&cfg, &[0.0; 24], &default_irradiance(5.0).unwrap(), 2).unwrap();
        assert!(trace.hourly_soc.windows(2).all(|w| w[1] >= w[0]));
        assert_eq!(*trace.hourly_soc.last().unwrap(), 1.0);
    }

    #[test]
    fn hourly_inputs_validated() {
        let cfg = SolarConfig::default();
        assert_eq!(
            simulate_soc(&cfg, &[1.0; 23], &[0.0; 24], 1),
            Err(EnergyError::HourlyLength {
                what: "load profile",
                len: 23
            })
        );
        let mut irr = [0.0; 24];
        irr[3] = 1.5;
        assert!(matches!(
            simulate_soc(&cfg, &[1.0; 24], &irr, 1),
            Err(EnergyError::HourlyValue { hour: 3, .. })
        ));
        assert_eq!(simulate_soc(&cfg, &[1.0; 24], &[0.0; 24], 0), Err(EnergyError::NoDays));
    }

    #[test]
    fn hourly_csv_parsing() {
        let text = "hour,irradiance\n0,0\n1,0.5\n";
        assert_eq!(parse_hourly_csv(text).unwrap(), vec![0.0, 0.5]);
        assert!(parse_hourly_csv("0,0\n1,abc\n").is_err());
    }

    proptest! {
        #[test]
        fn doubling_power_doubles_energy(scale in 0.0f64..10.0) {
            let base = display_profile();
            let scaled: Vec<_> = base.iter().cloned().map(|mut c| {
                c.power_min_w *= 2.0 * scale;
                c.power_max_w *= 2.0 * scale;
                c
            }).collect();
            let unit: Vec<_> = base.iter().cloned().map(|mut c| {
                c.power_min_w *= scale;
                c.power_max_w *= scale;
                c
            }).collect();
            for b in [Bound::Min, Bound::Max] {
                // Multiplying by two is exact in binary floating point.
                prop_assert_eq!(daily_energy_wh(&scaled, b), 2.0 * daily_energy_wh(&unit, b));
            }
        }

        #[test]
        fn sizing_is_homogeneous(e in 0.0f64..500.0, k in 0.0f64..20.0, h in 0.5f64..12.0, v in 1.0f64..48.0) {
            let lhs = required_panel_w(k * e, h).unwrap();
            let rhs = k * required_panel_w(e, h).unwrap();
            prop_assert!((lhs - rhs).abs() <= 1e-9 * (1.0 + rhs.abs()));
            let lhs = battery_ah(k * e, v).unwrap();
            let rhs = k * battery_ah(e, v).unwrap();
            prop_assert!((lhs - rhs).abs() <= 1e-9 * (1.0 + rhs.abs()));
        }

        #[test]
        fn soc_stays_bounded_and_balances(
            panel in 0.0f64..60.0,
            soc0 in 0.0f64..=1.0,
            ah in 0.5f64..20.0,
            load in prop::collection::vec(0.0f64..8.0, 24),
            sun in 0.5f64..9.0,
            days in 1usize..6,
        ) {
            let cfg = SolarConfig { panel_w: panel, initial_soc: soc0, battery_capacity_ah: ah, ..SolarConfig::default() };
            let trace = simulate_soc(&cfg, &load, &default_irradiance(sun).unwrap(), days).unwrap();
            prop_assert!(trace.hourly_soc.iter().all(|s| (0.0..=1.0).contains(s)));
            prop_assert!((0.0..=1.0).contains(&trace.uptime_fraction));
            for day in &trace.days {
                prop_assert!(day.stored_end_wh >= 0.0 && day.stored_end_wh <= cfg.capacity_wh() + 1e-9);
                prop_assert!(day.residual_wh().abs() < 1e-9, "residual {}", day.residual_wh());
            }
        }
    }
}
