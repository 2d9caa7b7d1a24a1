//! Time sources. Every component takes timestamps explicitly; the clock only
//! decides where "now" comes from and what sleeping means.

use std::fmt;
use std::ops::{Add, Sub};
use std::sync::atomic::{AtomicI64, Ordering};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

/// Point in time with microsecond resolution, measured from an arbitrary epoch
/// (zero for virtual clocks, process start for the wall clock).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Timestamp(i64);

impl Timestamp {
    pub const ZERO: Timestamp = Timestamp(0);

    pub const fn from_micros(micros: i64) -> Self {
        Timestamp(micros)
    }

    pub fn from_secs_f64(secs: f64) -> Self {
        Timestamp((secs * 1e6).round() as i64)
    }

    pub fn from_millis_f64(ms: f64) -> Self {
        Timestamp((ms * 1e3).round() as i64)
    }

    pub const fn as_micros(self) -> i64 {
        self.0
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 / 1e6
    }

    pub fn as_millis_f64(self) -> f64 {
        self.0 as f64 / 1e3
    }

    pub fn plus_secs(self, secs: f64) -> Self {
        Timestamp(self.0 + (secs * 1e6).round() as i64)
    }

    pub fn plus_millis(self, ms: f64) -> Self {
        Timestamp(self.0 + (ms * 1e3).round() as i64)
    }

    /// Signed distance `self - earlier` in seconds.
    pub fn secs_since(self, earlier: Timestamp) -> f64 {
        (self.0 - earlier.0) as f64 / 1e6
    }

    pub fn millis_since(self, earlier: Timestamp) -> f64 {
        (self.0 - earlier.0) as f64 / 1e3
    }
}

impl Add<Duration> for Timestamp {
    type Output = Timestamp;
    fn add(self, rhs: Duration) -> Timestamp {
        Timestamp(self.0 + rhs.as_micros() as i64)
    }
}

impl Sub for Timestamp {
    type Output = Duration;
    /// Saturates at zero when `rhs` is later.
    fn sub(self, rhs: Timestamp) -> Duration {
        Duration::from_micros((self.0 - rhs.0).max(0) as u64)
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.6}s", self.as_secs_f64())
    }
}

pub trait Clock: Send + Sync {
    fn now(&self) -> Timestamp;
    /// Blocks (wall clock) or advances time (virtual clock).
    fn sleep(&self, duration: Duration);
}

/// Manually driven clock for deterministic tests and simulations.
#[derive(Debug, Default)]
pub struct VirtualClock {
    micros: AtomicI64,
}

impl VirtualClock {
    pub fn new(start: Timestamp) -> Self {
        VirtualClock {
            micros: AtomicI64::new(start.as_micros()),
        }
    }

    pub fn set(&self, t: Timestamp) {
        self.micros.store(t.as_micros(), Ordering::SeqCst);
    }

    pub fn advance(&self, d: Duration) {
        self.micros.fetch_add(d.as_micros() as i64, Ordering::SeqCst);
    }
}

impl Clock for VirtualClock {
    fn now(&self) -> Timestamp {
        Timestamp(self.micros.load(Ordering::SeqCst))
    }

    fn sleep(&self, duration: Duration) {
        self.advance(duration);
    }
}

#[derive(Debug, Default, Clone, Copy)]
pub struct WallClock;

fn process_epoch() -> Instant {
    static EPOCH: OnceLock<Instant> = OnceLock::new();
    *EPOCH.get_or_init(Instant::now)
}

impl Clock for WallClock {
    fn now(&self) -> Timestamp {
        Timestamp(process_epoch().elapsed().as_micros() as i64)
    }

    fn sleep(&self, duration: Duration) {
        std::thread::sleep(duration);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn virtual_sleep_advances() {
        let clock = VirtualClock::new(Timestamp::from_secs_f64(1.0));
        clock.sleep(Duration::from_millis(250));
        assert_eq!(clock.now(), Timestamp::from_millis_f64(1250.0));
    }

    #[test]
    fn timestamp_arithmetic() {
        let t = Timestamp::from_secs_f64(10.0);
        assert_eq!(t.plus_secs(2.5).secs_since(t), 2.5);
        assert_eq!(t - t.plus_secs(1.0), Duration::ZERO);
        assert_eq!(t + Duration::from_millis(1500), t.plus_millis(1500.0));
    }
}
