use serde::{Deserialize, Serialize};

/// Dual multiplier and running average transmission cost.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LagrangeState {
    pub lambda: f64,
    pub eta: f64,
    /// Costs observed so far.
    pub steps: u64,
}

impl LagrangeState {
    pub fn new(lambda: f64) -> Self {
        Self {
            lambda: lambda.max(0.0),
            ..Self::default()
        }
    }

    /// `eta <- eta + (c - eta) / l`.
    pub fn running_cost_update(&mut self, cost: f64) {
        self.steps += 1;
        self.eta += (cost - self.eta) / self.steps as f64;
    }

    /// `lambda <- [lambda + delta (eta - eta_max)]_+`.
    pub fn lagrange_update(&mut self, eta_max: f64, delta: f64) {
        self.lambda = (self.lambda + delta * (self.eta - eta_max)).max(0.0);
    }
}
