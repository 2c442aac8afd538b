use std::sync::atomic::{AtomicI64, Ordering};

use chrono::{DateTime, Duration, TimeZone, Utc};

pub trait Clock: Send + Sync {
    fn now(&self) -> DateTime<Utc>;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> DateTime<Utc> {
        Utc::now()
    }
}

/// Advances by a fixed step on every reading, so transcripts built with it
/// are reproducible.
#[derive(Debug)]
pub struct SteppingClock {
    start: DateTime<Utc>,
    step_ms: i64,
    ticks: AtomicI64,
}

impl SteppingClock {
    pub fn new(start: DateTime<Utc>, step: Duration) -> Self {
        Self {
            start,
            step_ms: step.num_milliseconds(),
            ticks: AtomicI64::new(0),
        }
    }

    /// 2024-01-01T09:00:00Z, one second per reading.
    pub fn fixed() -> Self {
        Self::new(Utc.with_ymd_and_hms(2024, 1, 1, 9, 0, 0).unwrap(), Duration::seconds(1))
    }

    /// Moves the clock forward without producing a reading.
    pub fn advance(&self, by: Duration) {
        self.ticks
            .fetch_add(by.num_milliseconds() / self.step_ms.max(1), Ordering::SeqCst);
    }
}

impl Clock for SteppingClock {
    fn now(&self) -> DateTime<Utc> {
        let n = self.ticks.fetch_add(1, Ordering::SeqCst);
        self.start + Duration::milliseconds(n * self.step_ms)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stepping_clock_is_monotone_and_reproducible() {
        let a = SteppingClock::fixed();
        let b = SteppingClock::fixed();
        let ra: Vec<_> = (0..3).map(|_| a.now()).collect();
        let rb: Vec<_> = (0..3).map(|_| b.now()).collect();
        assert_eq!(ra, rb);
        assert!(ra.windows(2).all(|w| w[1] - w[0] == Duration::seconds(1)));
        a.advance(Duration::minutes(31));
        assert_eq!(a.now() - ra[2], Duration::seconds(1 + 31 * 60));
    }
}
