//! Injectable time source.
//!
//! [`SystemClock`] follows the wall clock. [`VirtualClock`] starts at a fixed
//! instant and advances with tokio's timer, so under a paused tokio runtime
//! every sleep completes instantly while `now()` still moves forward by the
//! slept amount.

use std::sync::Mutex;
use std::time::Duration;

use async_trait::async_trait;
use chrono::{DateTime, SubsecRound, Utc};

#[async_trait]
pub trait Clock: Send + Sync {
    /// Current time, truncated to whole seconds.
    fn now(&self) -> DateTime<Utc>;

    async fn sleep(&self, duration: Duration);

    async fn sleep_until(&self, until: DateTime<Utc>) {
        let now = self.now();
        if until > now {
            if let Ok(d) = (until - now).to_std() {
                self.sleep(d).await;
            }
        }
    }
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

#[async_trait]
impl Clock for SystemClock {
    fn now(&self) -> DateTime<Utc> {
        Utc::now().trunc_subsecs(0)
    }

    async fn sleep(&self, duration: Duration) {
        tokio::time::sleep(duration).await;
    }
}

#[derive(Debug)]
pub struct VirtualClock {
    base: DateTime<Utc>,
    start: tokio::time::Instant,
    sleeps: Mutex<Vec<Duration>>,
}

impl VirtualClock {
    /// Must be called from within a tokio runtime.
    pub fn starting_at(base: DateTime<Utc>) -> Self {
        VirtualClock {
            base,
            start: tokio::time::Instant::now(),
            sleeps: Mutex::new(Vec::new()),
        }
    }

    /// Every duration passed to `sleep`, in call order.
    pub fn sleeps(&self) -> Vec<Duration> {
        self.sleeps.lock().expect("clock mutex").clone()
    }

    pub fn total_slept(&self) -> Duration {
        self.sleeps().iter().sum()
    }
}

#[async_trait]
impl Clock for VirtualClock {
    fn now(&self) -> DateTime<Utc> {
        let elapsed = tokio::time::Instant::now() - self.start;
        (self.base + chrono::Duration::from_std(elapsed).unwrap_or_default()).trunc_subsecs(0)
    }

    async fn sleep(&self, duration: Duration) {
        self.sleeps.lock().expect("clock mutex").push(duration);
        tokio::time::sleep(duration).await;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;

    #[tokio::test(start_paused = true)]
    async fn virtual_clock_advances_on_sleep() {
        let base = Utc.with_ymd_and_hms(2026, 1, 1, 0, 0, 0).unwrap();
        let clock = VirtualClock::starting_at(base);
        clock.sleep(Duration::from_secs(3600)).await;
        assert_eq!(clock.now(), base + chrono::Duration::hours(1));
        clock.sleep_until(base + chrono::Duration::hours(3)).await;
        assert_eq!(clock.now(), base + chrono::Duration::hours(3));
        assert_eq!(clock.sleeps().len(), 2);
        // Sleeping until the past is a no-op.
        clock.sleep_until(base).await;
        assert_eq!(clock.sleeps().len(), 2);
    }
}
