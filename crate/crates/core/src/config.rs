//! Run configuration and validation.

use serde::{Deserialize, Serialize};

use crate::error::ConfigError;
use crate::kernels;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelKind {
    Cg,
    Stencil,
}

impl KernelKind {
    pub fn name(self) -> &'static str {
        match self {
            KernelKind::Cg => "cg",
            KernelKind::Stencil => "stencil",
        }
    }
}

impl std::str::FromStr for KernelKind {
    type Err = ConfigError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cg" => Ok(KernelKind::Cg),
            "stencil" => Ok(KernelKind::Stencil),
            other => Err(ConfigError::Invalid(format!("unknown kernel '{other}'"))),
        }
    }
}

/// Which rollback the recovery routine is allowed to take.
///
/// `Local` and `Hybrid` both run the payload-availability decision; `Local`
/// additionally requires the log to span the whole checkpoint interval so
/// that the decision normally lands on local rollback. `Global` skips the
/// decision and always rolls everyone back.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RollbackPolicy {
    Local,
    Global,
    Hybrid,
}

impl RollbackPolicy {
    pub fn name(self) -> &'static str {
        match self {
            RollbackPolicy::Local => "local",
            RollbackPolicy::Global => "global",
            RollbackPolicy::Hybrid => "hybrid",
        }
    }
}

impl std::str::FromStr for RollbackPolicy {
    type Err = ConfigError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "local" => Ok(RollbackPolicy::Local),
            "global" => Ok(RollbackPolicy::Global),
            "hybrid" => Ok(RollbackPolicy::Hybrid),
            other => Err(ConfigError::Invalid(format!("unknown mode '{other}'"))),
        }
    }
}

/// A fail-stop injection point.
///
/// `phase` indexes the kill points of one iteration: the victim dies
/// immediately before executing communication phase `phase`. The extra value
/// `phase == comm_phases` kills the victim after its last communication
/// phase completed (before the iteration commits), so a kernel with `c`
/// communication phases has `c + 1` injectable points per iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailureSpec {
    pub rank: usize,
    pub iter: u64,
    pub phase: u8,
}

impl std::str::FromStr for FailureSpec {
    type Err = ConfigError;

    /// Parses `rank:iter:phase`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split(':').collect();
        if parts.len() != 3 {
            return Err(ConfigError::Invalid(format!(
                "failure spec '{s}' must be rank:iter:phase"
            )));
        }
        let parse = |p: &str, what: &str| {
            p.parse::<u64>()
                .map_err(|_| ConfigError::Invalid(format!("bad {what} in failure spec '{s}'")))
        };
        Ok(FailureSpec {
            rank: parse(parts[0], "rank")? as usize,
            iter: parse(parts[1], "iter")?,
            phase: parse(parts[2], "phase")? as u8,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub kernel: KernelKind,
    pub procs: usize,
    pub iters: u64,
    pub seed: u64,
    pub cp_int: u64,
    pub log_size: u64,
    pub mode: RollbackPolicy,
    #[serde(default)]
    pub failures: Vec<FailureSpec>,
    /// Problem size: matrix dimension for cg, cells per rank side for the
    /// stencil. `None` picks the kernel default.
    #[serde(default)]
    pub size: Option<usize>,
}

impl RunConfig {
    pub fn new(kernel: KernelKind, procs: usize, iters: u64) -> Self {
        RunConfig {
            kernel,
            procs,
            iters,
            seed: 1,
            cp_int: match kernel {
                KernelKind::Cg => 25,
                KernelKind::Stencil => 20,
            },
            log_size: match kernel {
                KernelKind::Cg => 25,
                KernelKind::Stencil => 20,
            },
            mode: RollbackPolicy::Hybrid,
            failures: Vec::new(),
            size: None,
        }
    }

    pub fn resolved_size(&self) -> usize {
        self.size.unwrap_or(match self.kernel {
            KernelKind::Cg => 1024,
            KernelKind::Stencil => 12,
        })
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.procs == 0 {
            return Err(ConfigError::Invalid("procs must be positive".into()));
        }
        if self.iters == 0 {
            return Err(ConfigError::Invalid("iters must be positive".into()));
        }
        if self.cp_int == 0 {
            return Err(ConfigError::Invalid("cp_int must be positive".into()));
        }
        match self.mode {
            RollbackPolicy::Local => {
                if self.log_size != self.cp_int {
                    return Err(ConfigError::Invalid(
                        "mode=local requires log_size = cp_int".into(),
                    ));
                }
            }
            RollbackPolicy::Hybrid => {
                if self.log_size == 0 || self.log_size > self.cp_int {
                    return Err(ConfigError::Invalid(
                        "hybrid mode requires 1 <= log_size <= cp_int".into(),
                    ));
                }
            }
            RollbackPolicy::Global => {}
        }
        let comm_phases = kernels::comm_phase_count(self.kernel);
        for f in &self.failures {
            if f.rank >= self.procs {
                return Err(ConfigError::Invalid(format!(
                    "failure rank {} out of range (procs = {})",
                    f.rank, self.procs
                )));
            }
            if f.iter == 0 || f.iter > self.iters {
                return Err(ConfigError::Invalid(format!(
                    "failure iter {} outside 1..={}",
                    f.iter, self.iters
                )));
            }
            if u64::from(f.phase) > comm_phases as u64 {
                return Err(ConfigError::Invalid(format!(
                    "failure phase {} exceeds kill points 0..={}",
                    f.phase, comm_phases
                )));
            }
        }
        kernels::validate_geometry(self)?;
        Ok(())
    }

    /// Stable identifier derived from the configuration content, so repeated
    /// identical invocations emit byte-identical outputs.
    pub fn run_id(&self) -> String {
        let canon = serde_json::to_string(self).expect("config serializes");
        format!("{:016x}", fnv1a(canon.as_bytes()))
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}
