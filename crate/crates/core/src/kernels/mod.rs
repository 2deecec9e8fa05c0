//! Kernel machinery shared by the CG and stencil kernels.
//!
//! Each kernel compiles one iteration into a fixed sequence of micro-ops
//! ([`Op`]). The simulator interprets the sequence one scheduler quantum at
//! a time; a `Recv` with no matching buffered message suspends the process
//! without advancing its program counter. Because the op sequence is a pure
//! function of the rank (send pattern identical across iterations), the
//! send schedule used by the replay routine is a projection of the same
//! program, which keeps replayed and live send orders identical by
//! construction.

pub mod cg;
pub mod stencil;

use crate::config::{KernelKind, RunConfig};
use crate::error::{CheckpointError, ConfigError};

/// One micro-op of an iteration program.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Op {
    /// Open the transaction: deep-copy the protected state into the shadow.
    Begin,
    /// Kernel-local computation step (id is kernel-private).
    Compute(u8),
    /// Failure-injection point: the victim configured for communication
    /// phase `p` dies here, before issuing any send of that phase. The
    /// value `p == comm_phases` is the point after the last communication
    /// phase, before commit.
    KillPoint(u8),
    /// Route one message through the send wrapper.
    Send { dst: usize, tag: u32, selector: u8 },
    /// Consume one message; suspends until it is available.
    Recv { src: usize, tag: u32, sink: u8 },
    /// End of communication phase `p`; scheduler quantum boundary.
    PhaseEnd(u8),
    /// Close the transaction and install the shadow.
    Commit,
    /// Stage a checkpoint if the committed iteration is a boundary.
    CheckpointMaybe,
    /// End of the iteration program.
    End,
}

/// (destination, tag) pair of one scheduled send, in program order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SendSpec {
    pub dst: usize,
    pub tag: u32,
}

pub fn comm_phase_count(kind: KernelKind) -> usize {
    match kind {
        KernelKind::Cg => 4,
        KernelKind::Stencil => 3,
    }
}

pub fn validate_geometry(cfg: &RunConfig) -> Result<(), ConfigError> {
    match cfg.kernel {
        KernelKind::Cg => cg::validate(cfg.procs, cfg.resolved_size()),
        KernelKind::Stencil => stencil::validate(cfg.procs, cfg.resolved_size()),
    }
}

/// Per-rank kernel instance: state, transaction, scratch, and the compiled
/// iteration program.
#[derive(Debug, Clone)]
pub enum KernelRunner {
    Cg(cg::CgRunner),
    Stencil(stencil::StencilRunner),
}

impl KernelRunner {
    pub fn new(cfg: &RunConfig, rank: usize) -> Self {
        match cfg.kernel {
            KernelKind::Cg => KernelRunner::Cg(cg::CgRunner::new(
                rank,
                cfg.procs,
                cfg.resolved_size(),
                cfg.seed,
            )),
            KernelKind::Stencil => KernelRunner::Stencil(stencil::StencilRunner::new(
                rank,
                cfg.procs,
                cfg.resolved_size(),
            )),
        }
    }

    pub fn kernel_id(&self) -> u8 {
        match self {
            KernelRunner::Cg(_) => 0,
            KernelRunner::Stencil(_) => 1,
        }
    }

    pub fn program(&self) -> &[Op] {
        match self {
            KernelRunner::Cg(k) => k.program(),
            KernelRunner::Stencil(k) => k.program(),
        }
    }

    /// Sends of iteration `iter` in program order. The pattern is
    /// iteration-invariant for both kernels.
    pub fn send_schedule(&self, iter: u64) -> Vec<SendSpec> {
        let _ = iter;
        self.program()
            .iter()
            .filter_map(|op| match *op {
                Op::Send { dst, tag, .. } => Some(SendSpec { dst, tag }),
                _ => None,
            })
            .collect()
    }

    pub fn begin_iteration(&mut self) {
        match self {
            KernelRunner::Cg(k) => k.begin_iteration(),
            KernelRunner::Stencil(k) => k.begin_iteration(),
        }
    }

    pub fn commit_iteration(&mut self) {
        match self {
            KernelRunner::Cg(k) => k.commit_iteration(),
            KernelRunner::Stencil(k) => k.commit_iteration(),
        }
    }

    pub fn abort_iteration(&mut self) {
        match self {
            KernelRunner::Cg(k) => k.abort_iteration(),
            KernelRunner::Stencil(k) => k.abort_iteration(),
        }
    }

    pub fn iteration_open(&self) -> bool {
        match self {
            KernelRunner::Cg(k) => k.iteration_open(),
            KernelRunner::Stencil(k) => k.iteration_open(),
        }
    }

    pub fn apply_compute(&mut self, id: u8, iter: u64) {
        match self {
            KernelRunner::Cg(k) => k.apply_compute(id, iter),
            KernelRunner::Stencil(k) => k.apply_compute(id, iter),
        }
    }

    pub fn payload(&self, selector: u8) -> Vec<u8> {
        match self {
            KernelRunner::Cg(k) => k.payload(selector),
            KernelRunner::Stencil(k) => k.payload(selector),
        }
    }

    pub fn accept(&mut self, sink: u8, bytes: &[u8]) {
        match self {
            KernelRunner::Cg(k) => k.accept(sink, bytes),
            KernelRunner::Stencil(k) => k.accept(sink, bytes),
        }
    }

    pub fn serialize_state(&self) -> Vec<u8> {
        match self {
            KernelRunner::Cg(k) => k.serialize_state(),
            KernelRunner::Stencil(k) => k.serialize_state(),
        }
    }

    pub fn restore_state(&mut self, bytes: &[u8], rank: usize) -> Result<(), CheckpointError> {
        match self {
            KernelRunner::Cg(k) => k.restore_state(bytes, rank),
            KernelRunner::Stencil(k) => k.restore_state(bytes, rank),
        }
    }

    pub fn reset_to_initial(&mut self) {
        match self {
            KernelRunner::Cg(k) => k.reset_to_initial(),
            KernelRunner::Stencil(k) => k.reset_to_initial(),
        }
    }

    /// The run's verification value: zeta for CG, origin energy for the
    /// stencil.
    pub fn final_metric(&self) -> f64 {
        match self {
            KernelRunner::Cg(k) => k.zeta(),
            KernelRunner::Stencil(k) => k.origin_energy(),
        }
    }

    /// Bytes deep-copied at every transaction begin.
    pub fn shadow_bytes(&self) -> u64 {
        match self {
            KernelRunner::Cg(k) => k.shadow_bytes(),
            KernelRunner::Stencil(k) => k.shadow_bytes(),
        }
    }

    pub fn as_cg(&self) -> Option<&cg::CgRunner> {
        match self {
            KernelRunner::Cg(k) => Some(k),
            _ => None,
        }
    }

    pub fn as_stencil(&self) -> Option<&stencil::StencilRunner> {
        match self {
            KernelRunner::Stencil(k) => Some(k),
            _ => None,
        }
    }
}

pub(crate) fn encode_f64s(vals: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(vals.len() * 8);
    for v in vals {
        out.extend_from_slice(&v.to_bits().to_le_bytes());
    }
    out
}

pub(crate) fn decode_f64s(bytes: &[u8]) -> Vec<f64> {
    assert!(bytes.len().is_multiple_of(8), "payload is not a sequence of f64");
    bytes
        .chunks_exact(8)
        .map(|c| f64::from_bits(u64::from_le_bytes(c.try_into().unwrap())))
        .collect()
}
