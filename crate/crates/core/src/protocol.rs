//! Message-logging protocol state: peer-iteration tracking, sender-based
//! payload logging with capping, the send dispatch rule, and the
//! local/global rollback decision.
//!
//! There is no event log anywhere. The kernels are deterministic and their
//! send sequence per iteration is a pure function of (rank, iteration), so
//! replay after a failure reconstructs the message stream by walking the
//! kernel's send schedule and pulling payloads out of the sender-side log.

use std::collections::BTreeMap;

use crate::error::ProtocolError;

/// Per-process protocol state.
///
/// `peer_iters[r]` is the last known "next iteration to execute" of rank
/// `r`. The own entry tracks the live iteration counter; other entries are
/// refreshed from the front-line gather during recovery and may go stale
/// afterwards. Staleness only ever under-estimates a peer's progress, which
/// keeps the send dispatch safe: a send is skipped only when the gathered
/// value proves the destination already consumed it.
#[derive(Debug, Clone)]
pub struct ProtocolState {
    pub rank: usize,
    pub peer_iters: Vec<u64>,
    pub log: PayloadLog,
    pub cp_int: u64,
    pub log_size: u64,
    /// Iteration of the most recent checkpoint this process has written
    /// (staged locally, not necessarily globally complete). Basis for the
    /// payload capping rule.
    pub last_cp_iter: u64,
    /// Appends refused by the capping rule, kept for accounting.
    pub suppressed_appends: u64,
}

impl ProtocolState {
    pub fn new(rank: usize, n_procs: usize, cp_int: u64, log_size: u64) -> Self {
        ProtocolState {
            rank,
            peer_iters: vec![1; n_procs],
            log: PayloadLog::default(),
            cp_int,
            log_size,
            last_cp_iter: 0,
            suppressed_appends: 0,
        }
    }

    /// Stores a sent payload unless the capping rule excludes the
    /// iteration: payloads are kept only for iterations `i` with
    /// `i - last_cp_iter <= log_size`. Excluded appends are no-ops.
    pub fn append_log(&mut self, iter: u64, dst: usize, seq: u32, payload: &[u8]) -> bool {
        debug_assert!(iter > self.last_cp_iter, "append below the retained window");
        if iter - self.last_cp_iter > self.log_size {
            self.suppressed_appends += 1;
            return false;
        }
        self.log.insert(iter, dst, seq, payload);
        if cfg!(debug_assertions) {
            // Window invariant, checked continuously: retained iterations
            // span less than log_size and sit within the capped window.
            let (lo, hi) = self.log.retained_iter_range().expect("just inserted");
            debug_assert!(hi - lo < self.log_size.max(1));
            debug_assert!(hi - self.last_cp_iter <= self.log_size);
            debug_assert!(lo > self.last_cp_iter);
            debug_assert_eq!(self.log.bytes_total(), self.log.recount_bytes());
        }
        true
    }

    pub fn get_log(&self, iter: u64, dst: usize, seq: u32) -> Result<&[u8], ProtocolError> {
        self.log.get(iter, dst, seq)
    }

    /// Called when this process writes its checkpoint for iteration `iter`:
    /// the capping base moves and everything at or below the checkpoint is
    /// dropped.
    pub fn on_checkpoint_staged(&mut self, iter: u64) {
        self.last_cp_iter = iter;
        self.log.evict_through(iter);
    }
}

/// Capped store of sent-message payloads keyed by `(iteration, destination,
/// sequence)`. A `BTreeMap` keeps eviction and debugging deterministic.
#[derive(Debug, Clone)]
pub struct PayloadLog {
    entries: BTreeMap<(u64, usize, u32), Vec<u8>>,
    bytes_total: u64,
    /// Re-executions must re-log identical bytes; only the
    /// replay-corruption test hook turns this check off.
    pub check_relog: bool,
}

impl Default for PayloadLog {
    fn default() -> Self {
        PayloadLog {
            entries: BTreeMap::new(),
            bytes_total: 0,
            check_relog: true,
        }
    }
}

impl PayloadLog {
    pub fn insert(&mut self, iter: u64, dst: usize, seq: u32, payload: &[u8]) {
        if let Some(old) = self.entries.insert((iter, dst, seq), payload.to_vec()) {
            // Re-execution after an abort re-logs the same bytes;
            // determinism guarantees they match.
            debug_assert!(
                !self.check_relog || old == payload,
                "re-logged payload diverged at iter {iter} dst {dst} seq {seq}"
            );
            self.bytes_total -= old.len() as u64;
        }
        self.bytes_total += payload.len() as u64;
    }

    pub fn get(&self, iter: u64, dst: usize, seq: u32) -> Result<&[u8], ProtocolError> {
        self.entries
            .get(&(iter, dst, seq))
            .map(Vec::as_slice)
            .ok_or(ProtocolError::MissingLogEntry { iter, dst, seq })
    }

    /// Drops every entry with iteration <= `iter`.
    pub fn evict_through(&mut self, iter: u64) {
        let keep = self.entries.split_off(&(iter + 1, 0, 0));
        let dropped = std::mem::replace(&mut self.entries, keep);
        for payload in dropped.values() {
            self.bytes_total -= payload.len() as u64;
        }
    }

    pub fn bytes_total(&self) -> u64 {
        self.bytes_total
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// (lowest, highest) retained iteration, if any entries exist.
    pub fn retained_iter_range(&self) -> Option<(u64, u64)> {
        let lo = self.entries.keys().next()?.0;
        let hi = self.entries.keys().next_back()?.0;
        Some((lo, hi))
    }

    /// Recomputed byte count, for accounting checks.
    pub fn recount_bytes(&self) -> u64 {
        self.entries.values().map(|p| p.len() as u64).sum()
    }
}

/// The front line of computation gathered right after communicator
/// recovery: for every rank, the iteration it will execute next. Survivors
/// contribute the iteration they aborted; a restarted process contributes
/// the iteration following its checkpoint.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrontLine {
    pub iters: Vec<u64>,
    pub minit: u64,
    pub maxit: u64,
}

impl FrontLine {
    pub fn new(iters: Vec<u64>) -> Self {
        let minit = *iters.iter().min().expect("front line not empty");
        let maxit = *iters.iter().max().expect("front line not empty");
        FrontLine { iters, minit, maxit }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RollbackMode {
    Local,
    Global,
}

impl RollbackMode {
    pub fn name(self) -> &'static str {
        match self {
            RollbackMode::Local => "local",
            RollbackMode::Global => "global",
        }
    }
}

/// Local rollback is possible iff the retained payload window still covers
/// the most advanced survivor: `maxit - last_cp_iter <= log_size`. The
/// inputs are identical on every rank, so every rank reaches the same
/// decision without further communication.
pub fn decide_rollback(front: &FrontLine, last_cp_iter: u64, log_size: u64) -> RollbackMode {
    if front.maxit - last_cp_iter <= log_size {
        RollbackMode::Local
    } else {
        RollbackMode::Global
    }
}

/// Outcome of routing one kernel send through the wrapper.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SendAction {
    /// Destination executes this iteration too: payload materialized,
    /// logged, and sent.
    SentAndLogged,
    /// Destination is behind and needs this message again: payload fetched
    /// from the log and re-sent.
    Replayed,
    /// This sender is re-executing an iteration the destination already
    /// finished; the message was delivered in a previous attempt.
    SkippedFuture,
    /// Replay walk reached an iteration the destination already passed.
    SkippedIrrelevant,
}

impl SendAction {
    pub fn name(self) -> &'static str {
        match self {
            SendAction::SentAndLogged => "SentAndLogged",
            SendAction::Replayed => "Replayed",
            SendAction::SkippedFuture => "SkippedFuture",
            SendAction::SkippedIrrelevant => "SkippedIrrelevant",
        }
    }
}

/// How to fulfil a send attributed to iteration `iter`, given the sender's
/// and destination's front-line positions. `me_iter` is the sender's own
/// next-to-execute iteration; a live send always has `iter == me_iter`,
/// while a replay walk passes `iter < me_iter`.
pub fn classify_send(iter: u64, me_iter: u64, dst_iter: u64) -> SendAction {
    if iter < dst_iter {
        // Destination is already past this iteration; it consumed the
        // original message before the failure.
        if me_iter < dst_iter {
            SendAction::SkippedFuture
        } else {
            SendAction::SkippedIrrelevant
        }
    } else if iter < me_iter {
        SendAction::Replayed
    } else {
        SendAction::SentAndLogged
    }
}
