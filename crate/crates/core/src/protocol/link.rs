use serde::{Deserialize, Serialize};

use super::{Datagram, Transport};
use crate::geometry::Timestamp;
use crate::rng::CounterRng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LinkParams {
    pub drop_prob: f64,
    /// Seconds.
    pub latency_min: f64,
    pub latency_max: f64,
    pub allow_reorder: bool,
    pub seed: Option<u64>,
}

impl Default for LinkParams {
    fn default() -> Self {
        LinkParams {
            drop_prob: 0.0,
            latency_min: 0.0,
            latency_max: 0.0,
            allow_reorder: false,
            seed: None,
        }
    }
}

impl LinkParams {
    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.drop_prob) {
            return Err(format!("drop_prob must be in [0, 1], got {}", self.drop_prob));
        }
        if !(self.latency_min >= 0.0 && self.latency_min <= self.latency_max && self.latency_max.is_finite()) {
            return Err(format!(
                "latency bounds must satisfy 0 <= min <= max, got [{}, {}]",
                self.latency_min, self.latency_max
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct InFlight {
    release: Timestamp,
    order: u64,
    datagram: Datagram,
}

/// Seeded lossy link. Each send consumes two uniform draws: one for the
/// drop decision and one for the latency.
#[derive(Debug, Clone)]
pub struct LinkSim {
    params: LinkParams,
    rng: CounterRng,
    in_flight: Vec<InFlight>,
    last_release: Timestamp,
    sent: u64,
    dropped: u64,
}

impl LinkSim {
    pub fn new(params: LinkParams) -> Self {
        LinkSim {
            rng: CounterRng::new(params.seed.unwrap_or(0)),
            params,
            in_flight: Vec::new(),
            last_release: Timestamp::ZERO,
            sent: 0,
            dropped: 0,
        }
    }

    pub fn params(&self) -> &LinkParams {
        &self.params
    }

    pub fn sent(&self) -> u64 {
        self.sent
    }

    pub fn dropped(&self) -> u64 {
        self.dropped
    }

    pub fn in_flight(&self) -> usize {
        self.in_flight.len()
    }

    pub fn push(&mut self, now: Timestamp, datagram: Datagram) {
        let order = self.sent;
        self.sent += 1;
        let u_drop = self.rng.next_f64();
        let u_lat = self.rng.next_f64();
        if u_drop < self.params.drop_prob {
            self.dropped += 1;
            return;
        }
        let latency = self.params.latency_min + (self.params.latency_max - self.params.latency_min) * u_lat;
        let mut release = now.add_secs(latency);
        if !self.params.allow_reorder {
            release = release.max(self.last_release);
            self.last_release = release;
        }
        self.in_flight.push(InFlight {
            release,
            order,
            datagram,
        });
    }

    pub fn pull(&mut self, now: Timestamp) -> Vec<Datagram> {
        let (mut ready, rest): (Vec<InFlight>, Vec<InFlight>) =
            self.in_flight.drain(..).partition(|f| f.release <= now);
        self.in_flight = rest;
        ready.sort_by_key(|f| (f.release, f.order));
        ready.into_iter().map(|f| f.datagram).collect()
    }
}

impl Transport for LinkSim {
    fn send(&mut self, now: Timestamp, datagram: Datagram) -> std::io::Result<()> {
        self.push(now, datagram);
        Ok(())
    }

    fn poll(&mut self, now: Timestamp) -> std::io::Result<Vec<Datagram>> {
        Ok(self.pull(now))
    }
}
