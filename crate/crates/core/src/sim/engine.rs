use std::cmp::Reverse;
use std::collections::BinaryHeap;

use super::{SimError, TrialResult};

/// Event kinds in tie-break order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum EventKind {
    ListingAdded,
    /// Carries the sending node.
    Delivery(usize),
    TimerFire,
}

/// Fully specified propagation of one listing. Node `i` fires at
/// `phases_us[i] + n * period_us`.
#[derive(Clone, Debug)]
pub struct Scenario {
    pub push_targets: Vec<Vec<usize>>,
    pub phases_us: Vec<u64>,
    pub period_us: u64,
    pub link_delay_us: u64,
    pub source: usize,
    pub add_at_us: u64,
}

impl Scenario {
    fn next_fire(&self, node: usize, at: u64) -> u64 {
        let phase = self.phases_us[node] % self.period_us;
        if at <= phase {
            return phase;
        }
        phase + (at - phase).div_ceil(self.period_us) * self.period_us
    }
}

/// First-receipt record for every node.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Propagation {
    pub source: usize,
    pub add_at_us: u64,
    pub received_us: Vec<Option<u64>>,
    pub parent: Vec<Option<usize>>,
    /// First timer fire after receipt, when the node forwarded the listing.
    pub forwarded_us: Vec<Option<u64>>,
}

impl Propagation {
    pub fn trial(&self, observer: usize) -> Result<TrialResult, SimError> {
        let unreachable = SimError::Unreachable { from: self.source, observer };
        let received = self.received_us.get(observer).copied().flatten().ok_or(unreachable)?;
        let mut route = Vec::new();
        let mut node = observer;
        while let Some(p) = self.parent[node] {
            route.push(p);
            node = p;
        }
        route.reverse();
        let hops = route.len();
        let residual = |n: usize| {
            self.forwarded_us[n].expect("route nodes forwarded") - self.received_us[n].expect("route nodes received")
        };
        Ok(TrialResult {
            delay_us: received - self.add_at_us,
            hops,
            residual_timer_us: if hops == 0 { 0 } else { residual(self.source) },
            route_residuals_us: route.iter().skip(1).map(|&n| residual(n)).collect(),
        })
    }

    /// Time from the add until every reachable node holds the listing.
    pub fn completion_us(&self) -> u64 {
        self.received_us.iter().flatten().max().map_or(0, |t| t - self.add_at_us)
    }
}

/// Runs the event loop until every node reachable from the source holds the
/// listing. Events are ordered by (time, node, kind).
pub fn propagate(s: &Scenario) -> Propagation {
    let n = s.push_targets.len();
    assert_eq!(s.phases_us.len(), n, "one phase per node");
    assert!(s.period_us > 0, "period must be positive");
    let mut p = Propagation {
        source: s.source,
        add_at_us: s.add_at_us,
        received_us: vec![None; n],
        parent: vec![None; n],
        forwarded_us: vec![None; n],
    };
    let reachable = super::hop_counts(&s.push_targets, s.source).iter().filter(|h| h.is_some()).count();
    let mut holders = 0;
    let mut queue = BinaryHeap::new();
    queue.push(Reverse((s.add_at_us, s.source, EventKind::ListingAdded)));
    while let Some(Reverse((now, node, kind))) = queue.pop() {
        match kind {
            EventKind::ListingAdded | EventKind::Delivery(_) => {
                if p.received_us[node].is_some() {
                    continue;
                }
                p.received_us[node] = Some(now);
                if let EventKind::Delivery(from) = kind {
                    p.parent[node] = Some(from);
                }
                holders += 1;
                if holders == reachable {
                    break;
                }
                // Later fires resend identical copies, so only the first
                // one after receipt matters.
                queue.push(Reverse((s.next_fire(node, now), node, EventKind::TimerFire)));
            }
            EventKind::TimerFire => {
                p.forwarded_us[node] = Some(now);
                for &t in &s.push_targets[node] {
                    queue.push(Reverse((now + s.link_delay_us, t, EventKind::Delivery(node))));
                }
            }
        }
    }
    p
}
