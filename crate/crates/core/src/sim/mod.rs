//! Discrete-event model of timer-driven listing propagation.
//!
//! Time is kept in integer microseconds so that a trial's delay decomposes
//! exactly into the source's residual timer, the residuals of each forwarding
//! node, and the per-hop link delay.

mod engine;
mod report;
mod stats;

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::gossip::{k_closest_by, PeerId, DEFAULT_K};

pub use engine::{propagate, EventKind, Propagation, Scenario};
pub use report::{format_delays, sweep, write_csv, SweepRow};
pub use stats::{ks_two_sample, ks_uniform, summarize, StatsSummary};

pub const DEFAULT_PERIOD_S: f64 = 90.0;
pub const DEFAULT_TRIALS: u32 = 100;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid configuration: {0}")]
    Validation(String),
    #[error("observer node {observer} is unreachable from node {from}")]
    Unreachable { from: usize, observer: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Topology {
    Complete,
    Ring,
    /// Each node links to `degree` others chosen at random; links are
    /// undirected.
    Random(usize),
}

impl fmt::Display for Topology {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Topology::Complete => f.write_str("complete"),
            Topology::Ring => f.write_str("ring"),
            Topology::Random(d) => write!(f, "random({d})"),
        }
    }
}

impl FromStr for Topology {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, SimError> {
        let bad = || SimError::Validation(format!("unknown topology {s:?}"));
        match s {
            "complete" => Ok(Topology::Complete),
            "ring" => Ok(Topology::Ring),
            _ => {
                let inner = s
                    .strip_prefix("random(")
                    .and_then(|r| r.strip_suffix(')'))
                    .or_else(|| s.strip_prefix("random:"))
                    .ok_or_else(bad)?;
                inner.parse().map(Topology::Random).map_err(|_| bad())
            }
        }
    }
}

/// Which node's first receipt ends a trial. The source is always node 0.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub enum Observer {
    /// The closest of the source's push targets.
    #[default]
    Neighbor,
    /// The node with the most push hops from the source (lowest index on
    /// ties).
    Farthest,
}

impl fmt::Display for Observer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Observer::Neighbor => "neighbor",
            Observer::Farthest => "farthest",
        })
    }
}

impl FromStr for Observer {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, SimError> {
        match s {
            "neighbor" => Ok(Observer::Neighbor),
            "farthest" => Ok(Observer::Farthest),
            _ => Err(SimError::Validation(format!("unknown observer {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SimConfig {
    pub num_nodes: usize,
    pub timer_period_s: f64,
    pub k: usize,
    pub seed: u64,
    pub topology: Topology,
    pub link_delay_s: f64,
    pub trials: u32,
    pub observer: Observer,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            num_nodes: 4,
            timer_period_s: DEFAULT_PERIOD_S,
            k: DEFAULT_K,
            seed: 0,
            topology: Topology::Complete,
            link_delay_s: 0.0,
            trials: DEFAULT_TRIALS,
            observer: Observer::Neighbor,
        }
    }
}

pub(crate) fn seconds_to_us(s: f64) -> u64 {
    (s * 1e6).round() as u64
}

pub(crate) fn us_to_seconds(us: u64) -> f64 {
    us as f64 / 1e6
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let fail = |m: String| Err(SimError::Validation(m));
        if self.num_nodes < 2 {
            return fail(format!("num_nodes must be at least 2, got {}", self.num_nodes));
        }
        if !(self.timer_period_s.is_finite() && seconds_to_us(self.timer_period_s) > 0) {
            return fail(format!("timer period must be positive, got {}", self.timer_period_s));
        }
        if self.k == 0 {
            return fail("k must be at least 1".into());
        }
        if !(self.link_delay_s.is_finite() && self.link_delay_s >= 0.0) {
            return fail(format!("link delay must be non-negative, got {}", self.link_delay_s));
        }
        if self.trials == 0 {
            return fail("trials must be at least 1".into());
        }
        if let Topology::Random(d) = self.topology {
            if d == 0 || d >= self.num_nodes {
                return fail(format!("random degree must be in 1..{}, got {d}", self.num_nodes));
            }
        }
        Ok(())
    }

    fn period_us(&self) -> u64 {
        seconds_to_us(self.timer_period_s)
    }

    /// The generator for trial `index`: seeded by the config seed, one
    /// ChaCha stream per trial.
    pub fn trial_rng(&self, index: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index);
        rng
    }

    /// Stream reserved for the network layout, outside the trial range.
    fn layout_rng(&self) -> ChaCha8Rng {
        self.trial_rng(u64::MAX)
    }
}

/// Node ids, undirected links and directed push targets, fixed for all trials
/// of an experiment.
#[derive(Clone, Debug)]
pub struct Network {
    pub ids: Vec<PeerId>,
    pub neighbors: Vec<Vec<usize>>,
    pub push_targets: Vec<Vec<usize>>,
    pub source: usize,
    pub observer: usize,
}

impl Network {
    pub fn build(config: &SimConfig) -> Result<Self, SimError> {
        config.validate()?;
        let n = config.num_nodes;
        let mut rng = config.layout_rng();
        let ids: Vec<PeerId> = (0..n).map(|_| PeerId(rng.gen())).collect();
        let mut adj = vec![vec![false; n]; n];
        match config.topology {
            Topology::Complete => {
                for (i, row) in adj.iter_mut().enumerate() {
                    for (j, cell) in row.iter_mut().enumerate() {
                        *cell = i != j;
                    }
                }
            }
            #[allow(clippy::needless_range_loop)]
            Topology::Ring => {
                for i in 0..n {
                    let j = (i + 1) % n;
                    adj[i][j] = true;
                    adj[j][i] = true;
                }
            }
            #[allow(clippy::needless_range_loop)]
            Topology::Random(degree) => {
                for i in 0..n {
                    let others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
                    for j in rand::seq::index::sample(&mut rng, others.len(), degree) {
                        let j = others[j];
                        adj[i][j] = true;
                        adj[j][i] = true;
                    }
                }
            }
        }
        let neighbors: Vec<Vec<usize>> = adj.iter().map(|row| (0..n).filter(|&j| row[j]).collect()).collect();
        let push_targets = (0..n)
            .map(|i| k_closest_by(neighbors[i].iter().copied(), |&j| ids[j], &ids[i], config.k))
            .collect::<Vec<_>>();
        let source = 0;
        let hops = hop_counts(&push_targets, source);
        let observer = match config.observer {
            Observer::Neighbor => {
                *push_targets[source].first().ok_or(SimError::Unreachable { from: source, observer: usize::MAX })?
            }
            Observer::Farthest => (0..n)
                .filter(|&i| hops[i].is_some())
                .max_by_key(|&i| (hops[i], std::cmp::Reverse(i)))
                .filter(|&i| i != source)
                .ok_or(SimError::Unreachable { from: source, observer: usize::MAX })?,
        };
        Ok(Self { ids, neighbors, push_targets, source, observer })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Push-hop counts from `from`; `None` for unreachable nodes.
    pub fn hops_from(&self, from: usize) -> Vec<Option<usize>> {
        hop_counts(&self.push_targets, from)
    }

    /// Largest finite hop count from any node, or `None` if some node cannot
    /// reach another.
    pub fn diameter(&self) -> Option<usize> {
        let mut d = 0;
        for i in 0..self.len() {
            for h in self.hops_from(i) {
                d = d.max(h?);
            }
        }
        Some(d)
    }
}

fn hop_counts(targets: &[Vec<usize>], from: usize) -> Vec<Option<usize>> {
    let mut hops = vec![None; targets.len()];
    hops[from] = Some(0);
    let mut queue = VecDeque::from([from]);
    while let Some(i) = queue.pop_front() {
        let h = hops[i].expect("queued nodes have a hop count");
        for &j in &targets[i] {
            if hops[j].is_none() {
                hops[j] = Some(h + 1);
                queue.push_back(j);
            }
        }
    }
    hops
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrialResult {
    pub delay_us: u64,
    pub hops: usize,
    /// Time from the add to the source's next timer fire.
    pub residual_timer_us: u64,
    /// For each forwarding node after the source, time from receipt to its
    /// next timer fire.
    pub route_residuals_us: Vec<u64>,
}

impl TrialResult {
    pub fn delay_s(&self) -> f64 {
        us_to_seconds(self.delay_us)
    }

    pub fn residual_timer_s(&self) -> f64 {
        us_to_seconds(self.residual_timer_us)
    }

    pub fn route_residuals_s(&self) -> Vec<f64> {
        self.route_residuals_us.iter().map(|&u| us_to_seconds(u)).collect()
    }

    /// `residual + sum(route residuals) + hops * link_delay`.
    pub fn decomposed_us(&self, link_delay_us: u64) -> u64 {
        self.residual_timer_us + self.route_residuals_us.iter().sum::<u64>() + self.hops as u64 * link_delay_us
    }
}

/// One trial: random timer phases for every node, the listing added at a
/// uniformly random instant within one period, delay measured at the
/// network's observer.
pub fn run_trial(config: &SimConfig, network: &Network, rng: &mut ChaCha8Rng) -> Result<TrialResult, SimError> {
    let period = config.period_us();
    let phases_us: Vec<u64> = (0..network.len()).map(|_| rng.gen_range(0..period)).collect();
    let add_at_us = rng.gen_range(0..period);
    let scenario = Scenario {
        push_targets: network.push_targets.clone(),
        phases_us,
        period_us: period,
        link_delay_us: seconds_to_us(config.link_delay_s),
        source: network.source,
        add_at_us,
    };
    propagate(&scenario).trial(network.observer)
}

/// Runs every trial and returns the summary and the raw delays in seconds,
/// in trial order.
pub fn run_experiment(config: &SimConfig) -> Result<(StatsSummary, Vec<f64>), SimError> {
    let trials = run_experiment_trials(config)?;
    let delays: Vec<f64> = trials.iter().map(TrialResult::delay_s).collect();
    Ok((summarize(&delays)?, delays))
}

pub fn run_experiment_trials(config: &SimConfig) -> Result<Vec<TrialResult>, SimError> {
    let network = Network::build(config)?;
    (0..u64::from(config.trials)).map(|t| run_trial(config, &network, &mut config.trial_rng(t))).collect()
}
