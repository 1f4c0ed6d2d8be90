//! Seeded scenario generation and the scenario file format.
//!
//! # Random stream
//!
//! Generation draws from xoshiro256++ seeded with `seed` through SplitMix64
//! (the reference `seed_from_u64` expansion). A uniform draw in `[0, 1)` is
//! `(next_u64() >> 11) * 2^-53`. Draws happen device by device, in order:
//!
//! * hotspot devices (the first `floor(fraction * num_devices)`):
//!   `u_r`, `u_theta`, then the demand draw; the position is
//!   `center + radius * sqrt(u_r) * (cos 2pi u_theta, sin 2pi u_theta)`;
//! * other devices: `u_x`, `u_y`, then the demand draw; the position is
//!   `area_side * (u_x, u_y)`.
//!
//! The demand is `min + (max - min) * u`.
//!
//! # File format
//!
//! A JSON object with `version` (currently 1), `env`
//! (`bandwidth` Hz, `noise` W, `pathloss_exponent`, `min_distance` m, `mu`
//! jobs per traffic unit), `devices` (`x`, `y` in meters, `demand` in
//! traffic units per second) and `rrhs` (`x`, `y` in meters, `power` W).

use std::fs;
use std::path::Path;

use rand_core::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{Device, Point, RadioEnvironment, Rrh, Scenario};

pub const SCENARIO_VERSION: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hotspot {
    pub center: Point,
    pub radius: f64,
    /// Share of devices placed inside the disk.
    pub fraction: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    UniformGrid,
    Hotspot(Hotspot),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeneratorSpec {
    pub layout: Layout,
    pub num_devices: usize,
    pub num_rrhs: usize,
    pub area_side: f64,
    pub seed: u64,
    pub demand_range: (f64, f64),
    pub env: RadioEnvironment,
    pub rrh_power: f64,
}

impl GeneratorSpec {
    pub fn uniform(num_devices: usize, num_rrhs: usize, area_side: f64, seed: u64) -> Self {
        Self {
            layout: Layout::UniformGrid,
            num_devices,
            num_rrhs,
            area_side,
            seed,
            demand_range: (1.0, 1.0),
            env: RadioEnvironment::default(),
            rrh_power: 1.0,
        }
    }

    pub fn with_hotspot(mut self, hotspot: Hotspot) -> Self {
        self.layout = Layout::Hotspot(hotspot);
        self
    }

    pub fn with_demand_range(mut self, min: f64, max: f64) -> Self {
        self.demand_range = (min, max);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_devices == 0 || self.num_rrhs == 0 {
            return Err(Error::InvalidParameter("need at least one device and one RRH".into()));
        }
        if !(self.area_side > 0.0 && self.area_side.is_finite()) {
            return Err(Error::InvalidParameter(format!("area side must be positive, got {}", self.area_side)));
        }
        let (lo, hi) = self.demand_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::InvalidParameter(format!("invalid demand range [{lo}, {hi}]")));
        }
        if let Layout::Hotspot(h) = self.layout {
            if !(0.0..=1.0).contains(&h.fraction) {
                return Err(Error::InvalidParameter(format!("hotspot fraction {} outside [0, 1]", h.fraction)));
            }
            if !(h.radius >= 0.0) {
                return Err(Error::InvalidParameter(format!("hotspot radius {} is negative", h.radius)));
            }
            let inside = |c: f64| c - h.radius >= 0.0 && c + h.radius <= self.area_side;
            if !(inside(h.center.x) && inside(h.center.y)) {
                return Err(Error::InvalidParameter(format!(
                    "hotspot disk at ({}, {}) radius {} leaves the {} m area",
                    h.center.x, h.center.y, h.radius, self.area_side
                )));
            }
        }
        Ok(())
    }
}

/// The fixed scenario random stream.
pub struct ScenarioRng(Xoshiro256PlusPlus);

impl ScenarioRng {
    pub fn new(seed: u64) -> Self {
        Self(Xoshiro256PlusPlus::seed_from_u64(seed))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 random bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }
}

/// Near-square grid: `ceil(sqrt(n))` columns, filled row by row, each RRH at
/// the center of its cell.
pub fn rrh_grid(num_rrhs: usize, area_side: f64, power: f64) -> Vec<Rrh> {
    let cols = (num_rrhs as f64).sqrt().ceil() as usize;
    let rows = num_rrhs.div_ceil(cols);
    let (dx, dy) = (area_side / cols as f64, area_side / rows as f64);
    (0..num_rrhs)
        .map(|k| Rrh {
            location: Point::new((k % cols) as f64 * dx + dx / 2.0, (k / cols) as f64 * dy + dy / 2.0),
            power,
        })
        .collect()
}

pub fn generate(spec: &GeneratorSpec) -> Result<Scenario> {
    spec.validate()?;
    let mut rng = ScenarioRng::new(spec.seed);
    let (lo, hi) = spec.demand_range;
    let in_disk = match spec.layout {
        Layout::UniformGrid => 0,
        Layout::Hotspot(h) => (h.fraction * spec.num_devices as f64).floor() as usize,
    };
    let mut devices = Vec::with_capacity(spec.num_devices);
    for i in 0..spec.num_devices {
        let location = match spec.layout {
            Layout::Hotspot(h) if i < in_disk => {
                let r = h.radius * rng.next_f64().sqrt();
                let theta = std::f64::consts::TAU * rng.next_f64();
                // clamp guards the last ulp at the boundary
                Point::new(
                    (h.center.x + r * theta.cos()).clamp(0.0, spec.area_side),
                    (h.center.y + r * theta.sin()).clamp(0.0, spec.area_side),
                )
            }
            _ => Point::new(rng.uniform(0.0, spec.area_side), rng.uniform(0.0, spec.area_side)),
        };
        let demand = rng.uniform(lo, hi);
        devices.push(Device { location, demand });
    }
    Scenario::new(devices, rrh_grid(spec.num_rrhs, spec.area_side, spec.rrh_power), spec.env)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EnvRecord {
    bandwidth: f64,
    noise: f64,
    pathloss_exponent: f64,
    min_distance: f64,
    mu: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DeviceRecord {
    x: f64,
    y: f64,
    demand: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RrhRecord {
    x: f64,
    y: f64,
    power: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioDocument {
    version: u64,
    env: EnvRecord,
    devices: Vec<DeviceRecord>,
    rrhs: Vec<RrhRecord>,
}

#[derive(Deserialize)]
struct VersionProbe {
    version: Option<u64>,
}

impl From<&Scenario> for ScenarioDocument {
    fn from(s: &Scenario) -> Self {
        let e = s.env();
        Self {
            version: SCENARIO_VERSION,
            env: EnvRecord {
                bandwidth: e.bandwidth,
                noise: e.noise,
                pathloss_exponent: e.pathloss_exponent,
                min_distance: e.min_distance,
                mu: e.mu,
            },
            devices: s
                .devices()
                .iter()
                .map(|d| DeviceRecord {
                    x: d.location.x,
                    y: d.location.y,
                    demand: d.demand,
                })
                .collect(),
            rrhs: s
                .rrhs()
                .iter()
                .map(|r| RrhRecord {
                    x: r.location.x,
                    y: r.location.y,
                    power: r.power,
                })
                .collect(),
        }
    }
}

/// Pretty-printed JSON; floats use shortest round-trip formatting.
pub fn scenario_to_json(scenario: &Scenario) -> String {
    let mut s = serde_json::to_string_pretty(&ScenarioDocument::from(scenario)).expect("scenario serializes");
    s.push('\n');
    s
}

pub fn scenario_from_json(text: &str) -> Result<Scenario> {
    let probe: VersionProbe = serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
    match probe.version {
        None => return Err(Error::Parse("missing field `version`".into())),
        Some(v) if v != SCENARIO_VERSION => {
            return Err(Error::Version {
                found: v,
                expected: SCENARIO_VERSION,
            })
        }
        Some(_) => {}
    }
    let doc: ScenarioDocument = serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
    let env = RadioEnvironment {
        bandwidth: doc.env.bandwidth,
        noise: doc.env.noise,
        pathloss_exponent: doc.env.pathloss_exponent,
        min_distance: doc.env.min_distance,
        mu: doc.env.mu,
    };
    let devices = doc
        .devices
        .iter()
        .map(|d| Device {
            location: Point::new(d.x, d.y),
            demand: d.demand,
        })
        .collect();
    let rrhs = doc
        .rrhs
        .iter()
        .map(|r| Rrh {
            location: Point::new(r.x, r.y),
            power: r.power,
        })
        .collect();
    Scenario::new(devices, rrhs, env)
}

pub fn save_scenario(scenario: &Scenario, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, scenario_to_json(scenario))?;
    Ok(())
}

pub fn load_scenario(path: impl AsRef<Path>) -> Result<Scenario> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    scenario_from_json(&text).map_err(|e| match e {
        Error::Parse(msg) => Error::Parse(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// `sha256:<hex>` over the canonical compact serialization.
pub fn scenario_digest(scenario: &Scenario) -> String {
    let canonical = serde_json::to_vec(&ScenarioDocument::from(scenario)).expect("scenario serializes");
    let hash = Sha256::digest(&canonical);
    let hex: String = hash.iter().map(|b| format!("{b:02x}")).collect();
    format!("sha256:{hex}")
}
