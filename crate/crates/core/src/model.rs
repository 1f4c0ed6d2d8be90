//! Downlink radio model and processor-sharing load/delay model.

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{dims, Error, Result};

/// Row sums of an [`Association`] must be 1 within this.
pub const ROW_SUM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Device {
    pub location: Point,
    /// Requested traffic `lambda_i` (traffic units per second).
    pub demand: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rrh {
    pub location: Point,
    /// Transmit power in watts.
    pub power: f64,
}

/// Radio constants shared by every link.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RadioEnvironment {
    /// Hz.
    pub bandwidth: f64,
    /// Thermal noise power in watts.
    pub noise: f64,
    pub pathloss_exponent: f64,
    /// Distances below this are clamped, in meters.
    pub min_distance: f64,
    /// Jobs per traffic unit (mean job size is `1 / mu`).
    pub mu: f64,
}

impl Default for RadioEnvironment {
    fn default() -> Self {
        Self {
            bandwidth: 10e6,
            noise: 1e-13,
            pathloss_exponent: 4.0,
            min_distance: 1.0,
            mu: 1.0,
        }
    }
}

impl RadioEnvironment {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("bandwidth", self.bandwidth),
            ("noise", self.noise),
            ("min_distance", self.min_distance),
            ("mu", self.mu),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidParameter(format!("{name} must be positive, got {v}")));
            }
        }
        if !(2.0..=6.0).contains(&self.pathloss_exponent) {
            return Err(Error::InvalidParameter(format!(
                "pathloss exponent must lie in [2, 6], got {}",
                self.pathloss_exponent
            )));
        }
        Ok(())
    }
}

/// Devices, RRHs and radio constants.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    devices: Vec<Device>,
    rrhs: Vec<Rrh>,
    env: RadioEnvironment,
}

impl Scenario {
    pub fn new(devices: Vec<Device>, rrhs: Vec<Rrh>, env: RadioEnvironment) -> Result<Self> {
        if devices.is_empty() || rrhs.is_empty() {
            return Err(Error::InvalidInput(format!(
                "scenario needs at least one device and one RRH, got {} and {}",
                devices.len(),
                rrhs.len()
            )));
        }
        env.validate()?;
        for (i, d) in devices.iter().enumerate() {
            if !d.location.is_finite() {
                return Err(Error::InvalidInput(format!("device {i} has a non-finite location")));
            }
            if !(d.demand > 0.0 && d.demand.is_finite()) {
                return Err(Error::InvalidInput(format!(
                    "device {i} demand must be positive, got {}",
                    d.demand
                )));
            }
        }
        for (j, r) in rrhs.iter().enumerate() {
            if !r.location.is_finite() {
                return Err(Error::InvalidInput(format!("RRH {j} has a non-finite location")));
            }
            if !(r.power > 0.0 && r.power.is_finite()) {
                return Err(Error::InvalidInput(format!(
                    "RRH {j} power must be positive, got {}",
                    r.power
                )));
            }
        }
        Ok(Self { devices, rrhs, env })
    }

    pub fn devices(&self) -> &[Device] {
        &self.devices
    }

    pub fn rrhs(&self) -> &[Rrh] {
        &self.rrhs
    }

    pub fn env(&self) -> &RadioEnvironment {
        &self.env
    }

    pub fn num_devices(&self) -> usize {
        self.devices.len()
    }

    pub fn num_rrhs(&self) -> usize {
        self.rrhs.len()
    }

    pub fn demands(&self) -> Vec<f64> {
        self.devices.iter().map(|d| d.demand).collect()
    }

    pub fn total_demand(&self) -> f64 {
        self.devices.iter().map(|d| d.demand).sum()
    }

    /// Same scenario with every demand multiplied by `factor`.
    pub fn with_scaled_demands(&self, factor: f64) -> Result<Self> {
        let devices = self
            .devices
            .iter()
            .map(|d| Device {
                demand: d.demand * factor,
                ..*d
            })
            .collect();
        Self::new(devices, self.rrhs.clone(), self.env)
    }
}

/// Exclusive-service download rates `R_ij`.
#[derive(Debug, Clone, PartialEq)]
pub struct RateMatrix(Array2<f64>);

impl RateMatrix {
    pub fn new(rates: Array2<f64>) -> Result<Self> {
        if let Some(r) = rates.iter().find(|r| !(**r > 0.0 && r.is_finite())) {
            return Err(Error::InvalidInput(format!("rates must be positive and finite, found {r}")));
        }
        Ok(Self(rates))
    }

    pub fn entries(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0[[i, j]]
    }
}

/// Row-stochastic time-sharing matrix `pi_ij`.
#[derive(Debug, Clone, PartialEq)]
pub struct Association(Array2<f64>);

impl Association {
    pub fn new(entries: Array2<f64>) -> Result<Self> {
        if let Some(x) = entries.iter().find(|x| !(0.0..=1.0).contains(*x)) {
            return Err(Error::InvalidInput(format!("association entries must lie in [0, 1], found {x}")));
        }
        for (i, s) in entries.sum_axis(Axis(1)).iter().enumerate() {
            if (s - 1.0).abs() > ROW_SUM_TOLERANCE {
                return Err(Error::InvalidInput(format!("association row {i} sums to {s}")));
            }
        }
        Ok(Self(entries))
    }

    /// `pi_ij = x_ij / lambda_i` for a plan whose rows carry the demands.
    pub fn from_plan(plan: &Array2<f64>, demands: &[f64]) -> Result<Self> {
        if plan.nrows() != demands.len() {
            return Err(dims(demands.len(), plan.nrows()));
        }
        let mut pi = plan.clone();
        for (mut row, lambda) in pi.outer_iter_mut().zip(demands) {
            row.mapv_inplace(|x| (x / lambda).clamp(0.0, 1.0));
        }
        Self::new(pi)
    }

    /// Each row fully on one RRH.
    pub fn from_choices(choices: &[usize], n: usize) -> Result<Self> {
        let mut pi = Array2::zeros((choices.len(), n));
        for (i, &j) in choices.iter().enumerate() {
            if j >= n {
                return Err(Error::InvalidInput(format!("device {i} assigned to RRH {j} of {n}")));
            }
            pi[[i, j]] = 1.0;
        }
        Self::new(pi)
    }

    pub fn entries(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn num_devices(&self) -> usize {
        self.0.nrows()
    }

    pub fn num_rrhs(&self) -> usize {
        self.0.ncols()
    }

    /// Convex combination `theta * self + (1 - theta) * other`.
    pub fn mix(&self, other: &Association, theta: f64) -> Result<Association> {
        if self.0.dim() != other.0.dim() {
            return Err(dims(format!("{:?}", self.0.dim()), format!("{:?}", other.0.dim())));
        }
        Association::new(&self.0 * theta + &other.0 * (1.0 - theta))
    }
}

/// Per-RRH utilization `rho_j`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LoadVector {
    pub loads: Vec<f64>,
}

impl LoadVector {
    /// Every `rho_j < 1`.
    pub fn is_feasible(&self) -> bool {
        self.loads.iter().all(|r| *r < 1.0)
    }

    pub fn overloaded(&self) -> Vec<usize> {
        (0..self.loads.len()).filter(|&j| self.loads[j] >= 1.0).collect()
    }

    pub fn total(&self) -> f64 {
        self.loads.iter().sum()
    }

    pub fn max(&self) -> f64 {
        self.loads.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.loads.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn spread(&self) -> f64 {
        self.max() - self.min()
    }

    /// Most loaded RRH, lowest index on ties.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (j, r) in self.loads.iter().enumerate() {
            if *r > self.loads[best] {
                best = j;
            }
        }
        best
    }
}

/// Power-law gain `max(d, d_min)^(-alpha)`.
pub fn path_gain(dist: f64, env: &RadioEnvironment) -> f64 {
    dist.max(env.min_distance).powf(-env.pathloss_exponent)
}

/// `P_j G_ji / (sum_{k != j} P_k G_ki + N0)`.
pub fn sinr(device: usize, rrh: usize, scenario: &Scenario) -> f64 {
    let at = scenario.devices[device].location;
    let received: Vec<f64> = scenario
        .rrhs
        .iter()
        .map(|r| r.power * path_gain(at.distance(&r.location), &scenario.env))
        .collect();
    sinr_from_received(&received, rrh, scenario.env.noise)
}

fn sinr_from_received(received: &[f64], rrh: usize, noise: f64) -> f64 {
    let interference: f64 = received
        .iter()
        .enumerate()
        .filter(|(k, _)| *k != rrh)
        .map(|(_, p)| p)
        .sum();
    received[rrh] / (interference + noise)
}

/// `R_ij = W ln(1 + SINR_ji)`.
pub fn rate_matrix(scenario: &Scenario) -> RateMatrix {
    let (m, n) = (scenario.num_devices(), scenario.num_rrhs());
    let env = &scenario.env;
    let mut rates = Array2::zeros((m, n));
    let mut received = vec![0.0; n];
    for (i, d) in scenario.devices.iter().enumerate() {
        for (j, r) in scenario.rrhs.iter().enumerate() {
            received[j] = r.power * path_gain(d.location.distance(&r.location), env);
        }
        for j in 0..n {
            rates[[i, j]] = env.bandwidth * sinr_from_received(&received, j, env.noise).ln_1p();
        }
    }
    RateMatrix(rates)
}

/// `rho_j = sum_i lambda_i pi_ij / (mu R_ij)`.
pub fn load(assoc: &Association, scenario: &Scenario, rates: &RateMatrix) -> Result<LoadVector> {
    load_with_demands(assoc, &scenario.demands(), scenario.env.mu, rates)
}

pub fn load_with_demands(
    assoc: &Association,
    demands: &[f64],
    mu: f64,
    rates: &RateMatrix,
) -> Result<LoadVector> {
    if assoc.0.dim() != rates.0.dim() {
        return Err(dims(format!("{:?}", rates.0.dim()), format!("{:?}", assoc.0.dim())));
    }
    if demands.len() != assoc.num_devices() {
        return Err(dims(assoc.num_devices(), demands.len()));
    }
    let mut loads = vec![0.0; assoc.num_rrhs()];
    for ((i, j), pi) in assoc.0.indexed_iter() {
        if *pi > 0.0 {
            loads[j] += demands[i] * pi / (mu * rates.0[[i, j]]);
        }
    }
    Ok(LoadVector { loads })
}

/// Processor-sharing mean job count `rho / (1 - rho)`.
pub fn avg_jobs(rho: f64) -> Result<f64> {
    if !(rho < 1.0) {
        return Err(Error::Saturated { rho });
    }
    Ok(rho / (1.0 - rho))
}

/// Per-device mean of `sum_j pi_ij / (mu R_ij (1 - rho_j))`.
pub fn avg_completion_time(assoc: &Association, scenario: &Scenario, rates: &RateMatrix) -> Result<f64> {
    let loads = load(assoc, scenario, rates)?;
    completion_time_with_loads(assoc, &loads, scenario.env.mu, rates)
}

pub fn completion_time_with_loads(
    assoc: &Association,
    loads: &LoadVector,
    mu: f64,
    rates: &RateMatrix,
) -> Result<f64> {
    let overloaded = loads.overloaded();
    if !overloaded.is_empty() {
        return Err(Error::InfeasibleLoad { rrhs: overloaded });
    }
    let mut total = 0.0;
    for ((i, j), pi) in assoc.0.indexed_iter() {
        if *pi > 0.0 {
            total += pi / (mu * rates.0[[i, j]] * (1.0 - loads.loads[j]));
        }
    }
    Ok(total / assoc.num_devices() as f64)
}
