//! Execution budgets: step, memory, and wall-clock metering.

use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{Duration, Instant};
use thiserror::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Error)]
pub enum BudgetExceeded {
    #[error("step budget exhausted")]
    Steps,
    #[error("memory budget exhausted")]
    Memory,
    #[error("wall-clock budget exhausted")]
    Wall,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Limits {
    pub steps: u64,
    pub memory_bytes: u64,
    pub wall: Duration,
}

impl Limits {
    pub const UNLIMITED: Limits = Limits {
        steps: u64::MAX,
        memory_bytes: u64::MAX,
        wall: Duration::MAX,
    };
}

/// Shared meter charged by long-running computations.
///
/// Wall time is only sampled every 4096 steps.
#[derive(Debug)]
pub struct Meter {
    limits: Limits,
    steps: AtomicU64,
    bytes: AtomicU64,
    started: Instant,
}

impl Meter {
    pub fn new(limits: Limits) -> Self {
        Self {
            limits,
            steps: AtomicU64::new(0),
            bytes: AtomicU64::new(0),
            started: Instant::now(),
        }
    }

    pub fn unlimited() -> Self {
        Self::new(Limits::UNLIMITED)
    }

    pub fn limits(&self) -> Limits {
        self.limits
    }

    pub fn steps_used(&self) -> u64 {
        self.steps.load(Ordering::Relaxed)
    }

    pub fn bytes_used(&self) -> u64 {
        self.bytes.load(Ordering::Relaxed)
    }

    pub fn charge_steps(&self, n: u64) -> Result<(), BudgetExceeded> {
        let before = self.steps.fetch_add(n, Ordering::Relaxed);
        let after = before.saturating_add(n);
        if after > self.limits.steps {
            return Err(BudgetExceeded::Steps);
        }
        if self.limits.wall != Duration::MAX && (before >> 12) != (after >> 12) {
            self.check_wall()?;
        }
        Ok(())
    }

    pub fn charge_bytes(&self, n: u64) -> Result<(), BudgetExceeded> {
        let after = self.bytes.fetch_add(n, Ordering::Relaxed).saturating_add(n);
        if after > self.limits.memory_bytes {
            return Err(BudgetExceeded::Memory);
        }
        Ok(())
    }

    pub fn check_wall(&self) -> Result<(), BudgetExceeded> {
        if self.started.elapsed() > self.limits.wall {
            Err(BudgetExceeded::Wall)
        } else {
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn steps_exhaust() {
        let m = Meter::new(Limits {
            steps: 10,
            ..Limits::UNLIMITED
        });
        assert!(m.charge_steps(10).is_ok());
        assert_eq!(m.charge_steps(1), Err(BudgetExceeded::Steps));
    }

    #[test]
    fn memory_exhausts() {
        let m = Meter::new(Limits {
            memory_bytes: 100,
            ..Limits::UNLIMITED
        });
        assert!(m.charge_bytes(60).is_ok());
        assert_eq!(m.charge_bytes(60), Err(BudgetExceeded::Memory));
    }

    #[test]
    fn wall_exhausts() {
        let m = Meter::new(Limits {
            wall: Duration::ZERO,
            ..Limits::UNLIMITED
        });
        std::thread::sleep(Duration::from_millis(2));
        assert_eq!(m.charge_steps(5000), Err(BudgetExceeded::Wall));
    }
}
