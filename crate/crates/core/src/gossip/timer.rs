use std::time::Duration;

use rand::Rng;

pub const DEFAULT_PUSH_PERIOD: Duration = Duration::from_secs(90);

/// Periodic push trigger. Fires at `phase + n * period`, measured from node
/// start, for n = 0, 1, 2, ...
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PushTimer {
    period: Duration,
    phase: Duration,
}

impl PushTimer {
    /// `phase` is reduced modulo `period`. Panics if `period` is zero.
    pub fn new(period: Duration, phase: Duration) -> Self {
        assert!(!period.is_zero(), "push period must be positive");
        let phase = Duration::from_nanos((phase.as_nanos() % period.as_nanos()) as u64);
        Self { period, phase }
    }

    /// Phase drawn uniformly from `[0, period)`.
    pub fn random<R: Rng + ?Sized>(period: Duration, rng: &mut R) -> Self {
        let nanos = period.as_nanos() as u64;
        assert!(nanos > 0, "push period must be positive");
        Self::new(period, Duration::from_nanos(rng.gen_range(0..nanos)))
    }

    pub fn period(&self) -> Duration {
        self.period
    }

    pub fn phase(&self) -> Duration {
        self.phase
    }

    pub fn fire_time(&self, n: u32) -> Duration {
        self.phase + self.period * n
    }

    /// Earliest fire time at or after `elapsed`.
    pub fn next_fire_at_or_after(&self, elapsed: Duration) -> Duration {
        if elapsed <= self.phase {
            return self.phase;
        }
        let since = (elapsed - self.phase).as_nanos();
        let period = self.period.as_nanos();
        let n = since.div_ceil(period);
        self.phase + Duration::from_nanos((n * period) as u64)
    }
}
