//! Host-wide configuration.

use std::time::Duration;

use thiserror::Error;

/// Configuration for a [`crate::host::Host`].
///
/// The stack geometry mirrors a fixed-size kernel stack: extensions get a
/// dedicated budget of `stack_total_pages`, of which only
/// `stack_threshold_pages` may be consumed by extension code. The rest is
/// reserved for helpers and panic handling, so the panic path always has
/// room to run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HostConfig {
    /// Number of simulated CPUs (worker lanes).
    pub num_workers: usize,
    /// Page size in bytes.
    pub page_size: u64,
    /// Total dedicated stack budget per worker, in pages.
    pub stack_total_pages: u64,
    /// Extension-code stack threshold, in pages. Must be below the total.
    pub stack_threshold_pages: u64,
    /// Per-function frame size limit in bytes (inclusive).
    pub per_function_frame_limit: u64,
    /// Period of each worker's watchdog timer.
    pub watchdog_period: Duration,
    /// Runtime after which a running extension is terminated.
    pub termination_timeout: Duration,
    /// Seed for the deterministic hash used by hash maps.
    pub map_hash_seed: u64,
}

impl Default for HostConfig {
    fn default() -> Self {
        // The in-kernel analogue ties the termination timeout to the RCU
        // stall default (tens of seconds); desk-scale runs want fast
        // feedback, so the defaults here are in milliseconds.
        Self {
            num_workers: 1,
            page_size: 4096,
            stack_total_pages: 8,
            stack_threshold_pages: 4,
            per_function_frame_limit: 4096,
            watchdog_period: Duration::from_millis(50),
            termination_timeout: Duration::from_millis(100),
            map_hash_seed: 0x517c_c1b7_2722_0a95,
        }
    }
}

/// A configuration that violates one of the [`HostConfig`] invariants.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum ConfigError {
    #[error("num_workers must be at least 1")]
    NoWorkers,
    #[error("page_size must be positive")]
    ZeroPageSize,
    #[error("stack_threshold_pages ({threshold}) must be below stack_total_pages ({total})")]
    ThresholdNotBelowTotal { threshold: u64, total: u64 },
    #[error("per_function_frame_limit ({limit}) must not exceed page_size ({page_size})")]
    FrameLimitAbovePage { limit: u64, page_size: u64 },
    #[error("watchdog_period must be positive")]
    ZeroWatchdogPeriod,
    #[error("termination_timeout must be at least watchdog_period")]
    TimeoutBelowPeriod,
}

impl HostConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.num_workers == 0 {
            return Err(ConfigError::NoWorkers);
        }
        if self.page_size == 0 {
            return Err(ConfigError::ZeroPageSize);
        }
        if self.stack_threshold_pages >= self.stack_total_pages {
            return Err(ConfigError::ThresholdNotBelowTotal {
                threshold: self.stack_threshold_pages,
                total: self.stack_total_pages,
            });
        }
        if self.per_function_frame_limit > self.page_size {
            return Err(ConfigError::FrameLimitAbovePage {
                limit: self.per_function_frame_limit,
                page_size: self.page_size,
            });
        }
        if self.watchdog_period.is_zero() {
            return Err(ConfigError::ZeroWatchdogPeriod);
        }
        if self.termination_timeout < self.watchdog_period {
            return Err(ConfigError::TimeoutBelowPeriod);
        }
        Ok(())
    }

    /// Extension-code stack threshold in bytes.
    pub fn stack_threshold_bytes(&self) -> u64 {
        self.stack_threshold_pages * self.page_size
    }

    /// Total dedicated stack budget in bytes.
    pub fn stack_total_bytes(&self) -> u64 {
        self.stack_total_pages * self.page_size
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        let cfg = HostConfig::default();
        assert!(cfg.validate().is_ok());
        assert_eq!(cfg.stack_threshold_bytes(), 16384);
        assert_eq!(cfg.stack_total_bytes(), 32768);
    }

    #[test]
    fn threshold_must_be_below_total() {
        let cfg = HostConfig {
            stack_threshold_pages: 8,
            ..HostConfig::default()
        };
        assert_eq!(
            cfg.validate(),
            Err(ConfigError::ThresholdNotBelowTotal {
                threshold: 8,
                total: 8
            })
        );
    }

    #[test]
    fn frame_limit_capped_at_page() {
        let cfg = HostConfig {
            per_function_frame_limit: 8192,
            ..HostConfig::default()
        };
        assert!(matches!(
            cfg.validate(),
            Err(ConfigError::FrameLimitAbovePage { .. })
        ));
    }

    #[test]
    fn timeout_must_cover_period() {
        let cfg = HostConfig {
            watchdog_period: Duration::from_millis(60),
            termination_timeout: Duration::from_millis(50),
            ..HostConfig::default()
        };
        assert_eq!(cfg.validate(), Err(ConfigError::TimeoutBelowPeriod));
    }
}
