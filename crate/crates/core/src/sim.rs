//! Deterministic virtual runtime with MPI-like point-to-point semantics,
//! fail-stop failure injection, and communicator revoke/respawn recovery.
//!
//! The scheduler is a round-robin over alive processes in ascending rank
//! order. One scheduler quantum advances a process until it completes a
//! communication phase, blocks on a receive, finishes its iteration tail,
//! dies at an injected kill point, or detects a failure. Determinism is
//! total: given the same configuration, seed, and failure list, two runs
//! produce identical traces, identical message streams, and bitwise
//! identical final states.
//!
//! Failure detectability is confined to communication calls. A receive
//! reports `FailureDetected` only when the awaited sender can no longer
//! deliver: it is dead, or it has itself observed the revocation and
//! stopped. Healthy-but-late senders leave the receiver blocked instead,
//! which lets survivors drain eagerly buffered messages and finish their
//! iteration after a failure elsewhere. Detection therefore spreads as a
//! cascade along the kernel's communication graph, some survivors stopping
//! in the failure iteration and others only in the next one.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};

use crate::checkpoint::{self, CheckpointStore, MemoryStore};
use crate::config::{FailureSpec, RunConfig};
use crate::error::{ConfigError, ProtocolError, RunError};
use crate::kernels::{KernelRunner, Op};
use crate::protocol::{
    classify_send, decide_rollback, FrontLine, ProtocolState, RollbackMode, SendAction,
};
use crate::trace::{Trace, TraceEvent};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProcStatus {
    Alive,
    Dead,
    Respawned,
}

impl ProcStatus {
    pub fn is_alive(self) -> bool {
        !matches!(self, ProcStatus::Dead)
    }
}

#[derive(Debug, Clone)]
pub struct Message {
    pub src: usize,
    pub dst: usize,
    pub tag: u32,
    pub iter: u64,
    pub seq: u32,
    pub payload: Vec<u8>,
    pub epoch: u64,
}

/// Outcome of a raw buffered send.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SendOutcome {
    Buffered,
    RevokedError,
}

/// Outcome of a receive attempt. `Blocked` is the simulator's wait state
/// (a real blocking receive simply has not returned yet); the MPI-visible
/// outcomes are `Data` and `FailureDetected`.
#[derive(Debug)]
pub enum RecvOutcome {
    Data(Message),
    FailureDetected,
    Blocked,
}

#[derive(Debug, Clone)]
pub struct VirtualProcess {
    pub rank: usize,
    pub status: ProcStatus,
    /// Iteration being executed (1-based); equals committed iterations + 1.
    pub current_iter: u64,
    /// Iteration the current program instance belongs to. `current_iter`
    /// moves past it at commit while the tail ops still run.
    program_iter: u64,
    pub observed_revocation: bool,
    pub finished: bool,
    pc: usize,
    /// Per-destination sequence counters, reset at every iteration begin.
    seq: Vec<u32>,
    /// Messages consumed by the currently open iteration attempt.
    consumed: Vec<Message>,
    pub death_iter: Option<u64>,
    detect_iter: Option<u64>,
    /// While re-running after an injected transient abort, sends below this
    /// program counter were already delivered and are not re-posted.
    resend_skip_pc: Option<usize>,
}

impl VirtualProcess {
    fn new(rank: usize, n_procs: usize) -> Self {
        VirtualProcess {
            rank,
            status: ProcStatus::Alive,
            current_iter: 1,
            program_iter: 1,
            observed_revocation: false,
            finished: false,
            pc: 0,
            seq: vec![0; n_procs],
            consumed: Vec::new(),
            death_iter: None,
            detect_iter: None,
            resend_skip_pc: None,
        }
    }

    fn runnable(&self) -> bool {
        self.status.is_alive() && !self.observed_revocation && !self.finished
    }
}

#[derive(Debug, Default)]
struct Mailbox {
    queues: HashMap<(usize, u32), VecDeque<Message>>,
    len: usize,
}

impl Mailbox {
    fn push_back(&mut self, msg: Message) {
        self.queues
            .entry((msg.src, msg.tag))
            .or_default()
            .push_back(msg);
        self.len += 1;
    }

    fn push_front(&mut self, msg: Message) {
        self.queues
            .entry((msg.src, msg.tag))
            .or_default()
            .push_front(msg);
        self.len += 1;
    }

    fn pop(&mut self, src: usize, tag: u32) -> Option<Message> {
        let msg = self.queues.get_mut(&(src, tag))?.pop_front()?;
        self.len -= 1;
        Some(msg)
    }

    fn clear(&mut self) {
        self.queues.clear();
        self.len = 0;
    }

    fn len(&self) -> usize {
        self.len
    }
}

/// Test hooks. Not used by the CLI.
#[derive(Debug, Clone, Default)]
pub struct Hooks {
    /// Transiently abort `(rank, iter)` right after communication phase
    /// `phase` completes, re-delivering the attempt's consumed messages and
    /// re-running the iteration from the top. Exercises the transactional
    /// property in isolation from the failure machinery.
    pub abort_after_phase: Option<(usize, u64, u8)>,
    /// Corrupt replayed payloads. Local rollback then produces a wrong
    /// final state, demonstrating the verification suite catches replay
    /// defects.
    pub corrupt_replay: bool,
}

/// Record of one recovery.
#[derive(Debug, Clone)]
pub struct RecoveryReport {
    pub front: FrontLine,
    pub mode: RollbackMode,
    pub last_cp_iter: u64,
    pub victims: Vec<(usize, u64)>,
    /// Iteration in which each survivor observed the revocation (None for
    /// victims and processes that had already finished).
    pub detect_iters: Vec<Option<u64>>,
    pub replayed_msgs: u64,
}

/// Accumulated observations of a run, consumed by the harness and tests.
#[derive(Debug, Default)]
pub struct Observations {
    pub replayed_msgs: u64,
    pub recompute_total: u64,
    pub recompute_failed: u64,
    pub modes: Vec<RollbackMode>,
    pub recoveries: Vec<RecoveryReport>,
    /// Committed consumption ledger: (dst, src, iter, seq) -> (tag, count).
    /// Entries of rolled-back iterations are removed with the rollback.
    pub committed_ledger: BTreeMap<(usize, usize, u64, u32), (u32, u32)>,
    pub payload_bytes_peak: Vec<u64>,
    pub suppressed_appends: u64,
    /// Iteration commits across all processes, including recomputation.
    pub work_units: u64,
}

pub struct World {
    pub config: RunConfig,
    pub n_procs: usize,
    pub epoch: u64,
    pub revoked: bool,
    pub failed: BTreeSet<usize>,
    pub procs: Vec<VirtualProcess>,
    pub runners: Vec<KernelRunner>,
    pub protos: Vec<ProtocolState>,
    mailboxes: Vec<Mailbox>,
    pub store: Box<dyn CheckpointStore>,
    pub trace: Trace,
    pub obs: Observations,
    pub hooks: Hooks,
    step: u64,
    failures: Vec<(FailureSpec, bool)>,
    staged_gen: Option<(u64, usize)>,
    abort_hook_fired: bool,
}

impl World {
    pub fn new(config: RunConfig, store: Box<dyn CheckpointStore>, trace_enabled: bool) -> Self {
        let n = config.procs;
        let procs = (0..n).map(|r| VirtualProcess::new(r, n)).collect();
        let runners = (0..n).map(|r| KernelRunner::new(&config, r)).collect();
        let protos = (0..n)
            .map(|r| ProtocolState::new(r, n, config.cp_int, config.log_size))
            .collect();
        let failures = config.failures.iter().map(|&f| (f, false)).collect();
        World {
            n_procs: n,
            epoch: 0,
            revoked: false,
            failed: BTreeSet::new(),
            procs,
            runners,
            protos,
            mailboxes: (0..n).map(|_| Mailbox::default()).collect(),
            store,
            trace: Trace::new(trace_enabled),
            obs: Observations {
                payload_bytes_peak: vec![0; n],
                ..Observations::default()
            },
            hooks: Hooks::default(),
            step: 0,
            failures,
            staged_gen: None,
            abort_hook_fired: false,
            config,
        }
    }

    pub fn new_in_memory(config: RunConfig, trace_enabled: bool) -> Self {
        Self::new(config, Box::new(MemoryStore::default()), trace_enabled)
    }

    pub fn set_hooks(&mut self, hooks: Hooks) {
        if hooks.corrupt_replay {
            // Corrupted replays poison downstream state on purpose, so
            // re-logged bytes legitimately diverge.
            for proto in &mut self.protos {
                proto.log.check_relog = false;
            }
        }
        self.hooks = hooks;
    }

    pub fn seed(&self) -> u64 {
        self.config.seed
    }

    fn event(
        &mut self,
        rank: usize,
        op: &'static str,
        peer: Option<usize>,
        iter: Option<u64>,
        phase: Option<u8>,
        outcome: impl Into<String>,
    ) {
        self.step += 1;
        if self.trace.is_enabled() {
            self.trace.record(TraceEvent {
                step: self.step,
                rank,
                op,
                peer,
                iter,
                phase,
                outcome: outcome.into(),
            });
        }
    }

    /// Registers a fail-stop injection. The victim dies at the kill point
    /// of `spec.phase` in iteration `spec.iter` (first crossing only).
    pub fn inject_failure(&mut self, spec: FailureSpec) -> Result<(), ConfigError> {
        if !self.procs[spec.rank].status.is_alive() {
            return Err(ConfigError::Invalid(format!(
                "failure target rank {} is not alive",
                spec.rank
            )));
        }
        if spec.iter == 0 || spec.iter > self.config.iters {
            return Err(ConfigError::Invalid(format!(
                "failure iter {} outside the run",
                spec.iter
            )));
        }
        self.failures.push((spec, false));
        Ok(())
    }

    /// Raw buffered send. Delivery is eager: the message lands in the
    /// destination inbox even if the destination is dead (it is then lost
    /// with the receiver). A sender that has observed the revocation gets
    /// `RevokedError` and must enter recovery.
    pub fn post_send(
        &mut self,
        src: usize,
        dst: usize,
        tag: u32,
        iter: u64,
        seq: u32,
        payload: Vec<u8>,
    ) -> SendOutcome {
        debug_assert!(self.procs[src].status.is_alive());
        if self.procs[src].observed_revocation {
            return SendOutcome::RevokedError;
        }
        let msg = Message {
            src,
            dst,
            tag,
            iter,
            seq,
            payload,
            epoch: self.epoch,
        };
        self.mailboxes[dst].push_back(msg);
        SendOutcome::Buffered
    }

    /// Receive attempt for the head of the (src, tag) stream.
    ///
    /// A buffered message always wins, even if the sender has since died or
    /// the epoch is revoked. Otherwise the receive fails over to
    /// `FailureDetected` when the sender can never deliver (dead, or
    /// stopped in recovery); a healthy late sender leaves the receiver
    /// blocked.
    pub fn post_recv(&mut self, dst: usize, src: usize, tag: u32) -> RecvOutcome {
        debug_assert!(self.procs[dst].status.is_alive());
        debug_assert!(!self.procs[dst].observed_revocation);
        if let Some(msg) = self.mailboxes[dst].pop(src, tag) {
            debug_assert_eq!(msg.epoch, self.epoch, "stale-epoch message consumed");
            return RecvOutcome::Data(msg);
        }
        let src_gone =
            self.procs[src].status == ProcStatus::Dead || self.procs[src].observed_revocation;
        if src_gone {
            self.procs[dst].observed_revocation = true;
            self.procs[dst].detect_iter = Some(self.procs[dst].current_iter);
            self.revoked = true;
            return RecvOutcome::FailureDetected;
        }
        RecvOutcome::Blocked
    }

    fn kill(&mut self, rank: usize) {
        let iter = self.procs[rank].current_iter;
        self.procs[rank].status = ProcStatus::Dead;
        self.procs[rank].death_iter = Some(iter);
        self.failed.insert(rank);
        self.event(rank, "die", None, Some(iter), None, "Dead");
    }

    /// Routes one send through the message-logging wrapper. `iter` is the
    /// iteration the send is attributed to; live sends pass the sender's
    /// current iteration, the replay walk passes past iterations.
    fn send_wrapper(
        &mut self,
        src: usize,
        dst: usize,
        tag: u32,
        iter: u64,
        selector: Option<u8>,
        suppress_post: bool,
    ) -> Result<SendAction, ProtocolError> {
        let me_iter = self.protos[src].peer_iters[src];
        let dst_iter = self.protos[src].peer_iters[dst];
        let seq = self.procs[src].seq[dst];
        let action = classify_send(iter, me_iter, dst_iter);
        match action {
            SendAction::SentAndLogged => {
                self.procs[src].seq[dst] = seq + 1;
                let payload = self.runners[src]
                    .payload(selector.expect("live send carries a selector"));
                let logged = self.protos[src].append_log(iter, dst, seq, &payload);
                if !logged {
                    self.obs.suppressed_appends += 1;
                }
                let bytes = self.protos[src].log.bytes_total();
                if bytes > self.obs.payload_bytes_peak[src] {
                    self.obs.payload_bytes_peak[src] = bytes;
                }
                if !suppress_post {
                    let outcome = self.post_send(src, dst, tag, iter, seq, payload);
                    debug_assert_eq!(outcome, SendOutcome::Buffered);
                }
            }
            SendAction::Replayed => {
                self.procs[src].seq[dst] = seq + 1;
                let mut payload = self.protos[src].get_log(iter, dst, seq)?.to_vec();
                if self.hooks.corrupt_replay {
                    for b in &mut payload {
                        *b ^= 0x40;
                    }
                }
                self.obs.replayed_msgs += 1;
                let outcome = self.post_send(src, dst, tag, iter, seq, payload);
                debug_assert_eq!(outcome, SendOutcome::Buffered);
            }
            SendAction::SkippedFuture | SendAction::SkippedIrrelevant => {
                // The destination already consumed this message in a
                // previous attempt; filtering it out (and its log append)
                // prevents duplicate delivery.
                self.procs[src].seq[dst] = seq + 1;
            }
        }
        self.event(
            src,
            "send",
            Some(dst),
            Some(iter),
            Some((tag / 8) as u8),
            action.name(),
        );
        Ok(action)
    }

    /// Advances `rank` by one scheduler quantum. Returns the number of ops
    /// executed (0 means blocked with no progress).
    fn step_quantum(&mut self, rank: usize) -> Result<usize, RunError> {
        let mut executed = 0usize;
        loop {
            let op = self.runners[rank].program()[self.procs[rank].pc];
            match op {
                Op::Begin => {
                    self.runners[rank].begin_iteration();
                    self.procs[rank].program_iter = self.procs[rank].current_iter;
                    self.procs[rank].consumed.clear();
                    self.procs[rank].seq.fill(0);
                    self.procs[rank].pc += 1;
                    executed += 1;
                }
                Op::Compute(id) => {
                    let iter = self.procs[rank].program_iter;
                    self.runners[rank].apply_compute(id, iter);
                    self.procs[rank].pc += 1;
                    executed += 1;
                }
                Op::KillPoint(phase) => {
                    let iter = self.procs[rank].current_iter;
                    let mut dying = false;
                    for (spec, fired) in self.failures.iter_mut() {
                        if !*fired && spec.rank == rank && spec.iter == iter && spec.phase == phase
                        {
                            *fired = true;
                            dying = true;
                        }
                    }
                    if dying {
                        self.kill(rank);
                        return Ok(executed + 1);
                    }
                    self.procs[rank].pc += 1;
                    executed += 1;
                }
                Op::Send { dst, tag, selector } => {
                    let iter = self.procs[rank].current_iter;
                    let suppress = self.procs[rank]
                        .resend_skip_pc
                        .is_some_and(|skip| self.procs[rank].pc < skip);
                    self.send_wrapper(rank, dst, tag, iter, Some(selector), suppress)?;
                    self.procs[rank].pc += 1;
                    executed += 1;
                }
                Op::Recv { src, tag, sink } => {
                    match self.post_recv(rank, src, tag) {
                        RecvOutcome::Data(msg) => {
                            let iter = self.procs[rank].current_iter;
                            debug_assert_eq!(
                                (msg.iter, msg.dst),
                                (iter, rank),
                                "message consumed by the wrong iteration"
                            );
                            self.event(
                                rank,
                                "recv",
                                Some(src),
                                Some(iter),
                                Some((tag / 8) as u8),
                                "Data",
                            );
                            self.runners[rank].accept(sink, &msg.payload);
                            self.procs[rank].consumed.push(msg);
                            self.procs[rank].pc += 1;
                            executed += 1;
                        }
                        RecvOutcome::Blocked => {
                            return Ok(executed);
                        }
                        RecvOutcome::FailureDetected => {
                            let iter = self.procs[rank].current_iter;
                            self.event(
                                rank,
                                "recv",
                                Some(src),
                                Some(iter),
                                Some((tag / 8) as u8),
                                "FailureDetected",
                            );
                            // Abort the open iteration; the committed state
                            // is untouched and recovery takes over.
                            self.runners[rank].abort_iteration();
                            self.procs[rank].consumed.clear();
                            self.procs[rank].resend_skip_pc = None;
                            return Ok(executed + 1);
                        }
                    }
                }
                Op::PhaseEnd(phase) => {
                    self.procs[rank].pc += 1;
                    executed += 1;
                    if self.procs[rank].resend_skip_pc
                        .is_some_and(|skip| self.procs[rank].pc >= skip)
                    {
                        self.procs[rank].resend_skip_pc = None;
                    }
                    if !self.abort_hook_fired {
                        if let Some((r, it, ph)) = self.hooks.abort_after_phase {
                            if r == rank && it == self.procs[rank].current_iter && ph == phase {
                                self.abort_hook_fired = true;
                                self.transient_abort(rank);
                                return Ok(executed);
                            }
                        }
                    }
                    return Ok(executed);
                }
                Op::Commit => {
                    self.runners[rank].commit_iteration();
                    let committed = self.procs[rank].current_iter;
                    // Consumption becomes part of the committed lineage
                    // only now; aborted attempts never reach this point.
                    let consumed = std::mem::take(&mut self.procs[rank].consumed);
                    for msg in consumed {
                        let entry = self
                            .obs
                            .committed_ledger
                            .entry((msg.dst, msg.src, msg.iter, msg.seq))
                            .or_insert((msg.tag, 0));
                        entry.1 += 1;
                        debug_assert_eq!(entry.1, 1, "message committed twice: {msg:?}");
                    }
                    self.obs.work_units += 1;
                    self.procs[rank].current_iter = committed + 1;
                    self.protos[rank].peer_iters[rank] = committed + 1;
                    self.event(rank, "commit", None, Some(committed), None, "Committed");
                    self.procs[rank].pc += 1;
                    executed += 1;
                }
                Op::CheckpointMaybe => {
                    let committed = self.procs[rank].current_iter - 1;
                    if checkpoint::should_checkpoint(committed, self.config.cp_int) {
                        self.stage_checkpoint(rank, committed)?;
                    }
                    self.procs[rank].pc += 1;
                    executed += 1;
                }
                Op::End => {
                    self.procs[rank].pc = 0;
                    if self.procs[rank].current_iter > self.config.iters {
                        self.procs[rank].finished = true;
                    }
                    return Ok(executed + 1);
                }
            }
        }
    }

    fn stage_checkpoint(&mut self, rank: usize, iter: u64) -> Result<(), RunError> {
        let body = self.runners[rank].serialize_state();
        let encoded = checkpoint::encode(rank as u32, iter, self.runners[rank].kernel_id(), &body);
        self.store.stage(rank, iter, &encoded)?;
        self.protos[rank].on_checkpoint_staged(iter);
        self.event(rank, "checkpoint", None, Some(iter), None, "Staged");
        match &mut self.staged_gen {
            Some((gen, count)) => {
                assert_eq!(*gen, iter, "two checkpoint generations in flight");
                *count += 1;
            }
            None => self.staged_gen = Some((iter, 1)),
        }
        if let Some((gen, count)) = self.staged_gen {
            if count == self.n_procs {
                self.store.complete_generation(gen)?;
                self.staged_gen = None;
                self.event(rank, "checkpoint_complete", None, Some(gen), None, "Complete");
            }
        }
        Ok(())
    }

    /// Test-hook transient abort: undoes the open iteration and re-delivers
    /// the messages the attempt had consumed, so the re-run sees them
    /// again. Sends already posted are suppressed on the re-run.
    fn transient_abort(&mut self, rank: usize) {
        let abort_pc = self.procs[rank].pc;
        let iter = self.procs[rank].current_iter;
        self.runners[rank].abort_iteration();
        let consumed = std::mem::take(&mut self.procs[rank].consumed);
        for msg in consumed.into_iter().rev() {
            self.mailboxes[rank].push_front(msg);
        }
        self.procs[rank].pc = 0;
        self.procs[rank].resend_skip_pc = Some(abort_pc);
        self.event(rank, "abort_injected", None, Some(iter), None, "Aborted");
    }

    /// Communicator recovery: bumps the epoch, clears prior-epoch messages,
    /// respawns dead ranks from their last complete checkpoint (or the
    /// initial state when none exists), and resets revocation flags.
    pub fn recover_world(&mut self) -> Result<(), RunError> {
        assert!(self.revoked, "recover_world requires a revoked epoch");
        assert!(!self.failed.is_empty(), "recover_world requires a dead rank");
        self.epoch += 1;
        self.store.discard_staged()?;
        self.staged_gen = None;
        for mb in &mut self.mailboxes {
            mb.clear();
        }
        let victims: Vec<usize> = self.failed.iter().copied().collect();
        for rank in victims {
            // The dead incarnation may have died mid-iteration; the fresh
            // one starts with a closed transaction.
            self.runners[rank].abort_iteration();
            let cp_iter = match self.store.read(rank) {
                Ok(cp) => {
                    self.runners[rank].restore_state(&cp.state_bytes, rank)?;
                    cp.iter
                }
                Err(crate::error::CheckpointError::Missing { .. }) => {
                    self.runners[rank].reset_to_initial();
                    0
                }
                Err(e) => return Err(e.into()),
            };
            let proc = &mut self.procs[rank];
            proc.status = ProcStatus::Respawned;
            proc.current_iter = cp_iter + 1;
            proc.finished = false;
            proc.pc = 0;
            proc.consumed.clear();
            proc.death_iter = None;
            let n = self.n_procs;
            let mut proto = ProtocolState::new(rank, n, self.config.cp_int, self.config.log_size);
            proto.last_cp_iter = cp_iter;
            proto.log.check_relog = !self.hooks.corrupt_replay;
            self.protos[rank] = proto;
            self.event(rank, "respawn", None, Some(cp_iter + 1), None, "Respawned");
        }
        self.failed.clear();
        for proc in &mut self.procs {
            proc.observed_revocation = false;
        }
        self.revoked = false;
        self.event(0, "recover", None, None, None, format!("epoch:{}", self.epoch));
        Ok(())
    }

    /// Gathers every process's next iteration into an identical front line
    /// on all ranks and overwrites each protocol state's peer view.
    pub fn gather_front_line(&mut self) -> FrontLine {
        let iters: Vec<u64> = self.procs.iter().map(|p| p.current_iter).collect();
        let front = FrontLine::new(iters);
        for proto in &mut self.protos {
            proto.peer_iters = front.iters.clone();
        }
        self.event(
            0,
            "gather",
            None,
            Some(front.minit),
            None,
            format!("front:{:?}", front.iters),
        );
        front
    }

    /// Full recovery pipeline, run once every alive process has stopped:
    /// recover the world, gather the front line, decide the rollback mode,
    /// then either replay logged payloads (local) or roll everyone back to
    /// the checkpoint (global).
    fn run_recovery(&mut self) -> Result<(), RunError> {
        let detect_iters: Vec<Option<u64>> = self.procs.iter().map(|p| p.detect_iter).collect();
        let victims: Vec<(usize, u64)> = self
            .failed
            .iter()
            .map(|&r| (r, self.procs[r].death_iter.expect("victim died")))
            .collect();
        for proc in &mut self.procs {
            proc.detect_iter = None;
        }
        // Survivors abort their open iteration (victims have nothing open).
        for rank in 0..self.n_procs {
            if self.procs[rank].status.is_alive() {
                self.runners[rank].abort_iteration();
                self.procs[rank].consumed.clear();
                self.procs[rank].resend_skip_pc = None;
                self.procs[rank].pc = 0;
            }
        }
        let survivor_iters: Vec<(usize, u64, bool)> = self
            .procs
            .iter()
            .filter(|p| p.status.is_alive())
            .map(|p| (p.rank, p.current_iter, p.finished))
            .collect();

        self.recover_world()?;
        let front = self.gather_front_line();
        let last_cp = self.store.complete_iter();

        let mode = match self.config.mode {
            crate::config::RollbackPolicy::Global => RollbackMode::Global,
            _ => decide_rollback(&front, last_cp, self.config.log_size),
        };
        self.event(0, "decide", None, Some(front.maxit), None, mode.name());

        // Recompute accounting: a rolled-back process redoes everything
        // from the checkpoint up to where it stood.
        let mut recompute_failed = 0;
        for &(_, death_iter) in &victims {
            recompute_failed += death_iter - last_cp;
        }
        self.obs.recompute_failed += recompute_failed;
        self.obs.recompute_total += recompute_failed;
        if mode == RollbackMode::Global {
            for &(_, iter, finished) in &survivor_iters {
                let stood_at = if finished { iter - 1 } else { iter };
                self.obs.recompute_total += stood_at.saturating_sub(last_cp);
            }
        }

        let replayed_before = self.obs.replayed_msgs;
        match mode {
            RollbackMode::Local => {
                debug_assert!(self
                    .protos
                    .iter()
                    .all(|p| p.last_cp_iter == last_cp));
                // Every process walks the kernel's send schedule from the
                // front-line minimum up to its own position; the wrapper
                // replays what each destination still needs and filters
                // the rest. Survivors then resume their aborted iteration.
                for rank in 0..self.n_procs {
                    let own = self.procs[rank].current_iter;
                    let mut sent = 0u64;
                    for iter in front.minit..own {
                        let schedule = self.runners[rank].send_schedule(iter);
                        self.procs[rank].seq.fill(0);
                        for spec in schedule {
                            let action =
                                self.send_wrapper(rank, spec.dst, spec.tag, iter, None, false)?;
                            if action == SendAction::Replayed {
                                sent += 1;
                            }
                        }
                    }
                    self.procs[rank].seq.fill(0);
                    if sent > 0 {
                        self.event(rank, "replay", None, Some(own), None, format!("sent:{sent}"));
                    }
                }
            }
            RollbackMode::Global => {
                for rank in 0..self.n_procs {
                    let cp_iter = match self.store.read(rank) {
                        Ok(cp) => {
                            self.runners[rank].restore_state(&cp.state_bytes, rank)?;
                            cp.iter
                        }
                        Err(crate::error::CheckpointError::Missing { .. }) => {
                            self.runners[rank].reset_to_initial();
                            0
                        }
                        Err(e) => return Err(e.into()),
                    };
                    debug_assert_eq!(cp_iter, last_cp);
                    let proc = &mut self.procs[rank];
                    proc.current_iter = cp_iter + 1;
                    proc.finished = false;
                    proc.pc = 0;
                    // Logs restart with the rollback; stale entries above
                    // the checkpoint would re-appear identically anyway.
                    let n = self.n_procs;
                    let mut proto =
                        ProtocolState::new(rank, n, self.config.cp_int, self.config.log_size);
                    proto.last_cp_iter = cp_iter;
                    proto.peer_iters = vec![cp_iter + 1; n];
                    proto.log.check_relog = !self.hooks.corrupt_replay;
                    self.protos[rank] = proto;
                }
                // Rolled-back consumption leaves the committed lineage.
                self.obs
                    .committed_ledger
                    .retain(|&(_, _, iter, _), _| iter <= last_cp);
            }
        }
        if mode == RollbackMode::Local {
            // Only the victims' committed lineage rolled back.
            let victim_ranks: BTreeSet<usize> = victims.iter().map(|&(r, _)| r).collect();
            self.obs.committed_ledger.retain(|&(dst, _, iter, _), _| {
                iter <= last_cp || !victim_ranks.contains(&dst)
            });
        }

        self.obs.modes.push(mode);
        self.obs.recoveries.push(RecoveryReport {
            front,
            mode,
            last_cp_iter: last_cp,
            victims,
            detect_iters,
            replayed_msgs: self.obs.replayed_msgs - replayed_before,
        });
        Ok(())
    }

    fn recovery_pending(&self) -> bool {
        let mut any_stopped = false;
        for p in &self.procs {
            if p.status.is_alive() {
                if p.observed_revocation {
                    any_stopped = true;
                } else if !p.finished {
                    return false;
                }
            }
        }
        any_stopped
    }

    fn all_done(&self) -> bool {
        self.procs
            .iter()
            .all(|p| !p.status.is_alive() || p.finished)
    }

    /// Runs the world to completion.
    pub fn run_to_completion(&mut self) -> Result<(), RunError> {
        loop {
            if self.recovery_pending() {
                self.run_recovery()?;
                continue;
            }
            if self.all_done() {
                break;
            }
            let mut progressed = false;
            for rank in 0..self.n_procs {
                if self.procs[rank].runnable() {
                    progressed |= self.step_quantum(rank)? > 0;
                }
            }
            if !progressed && !self.recovery_pending() && !self.all_done() {
                panic!(
                    "scheduler deadlock: no process can make progress (epoch {}, iters {:?})",
                    self.epoch,
                    self.procs.iter().map(|p| p.current_iter).collect::<Vec<_>>()
                );
            }
        }
        if self.failed.is_empty() {
            let leftover: usize = self.mailboxes.iter().map(Mailbox::len).sum();
            debug_assert_eq!(leftover, 0, "undelivered messages at run end");
        }
        Ok(())
    }

    /// The run's verification value, read from the lowest-ranked alive
    /// process that owns it (rank 0 for both kernels).
    pub fn final_metric(&self) -> Result<f64, RunError> {
        if !self.procs[0].status.is_alive() {
            return Err(RunError::Verification(
                "rank 0 died and was never recovered; verification value unavailable".into(),
            ));
        }
        Ok(self.runners[0].final_metric())
    }

    pub fn mailbox_len(&self, rank: usize) -> usize {
        self.mailboxes[rank].len()
    }

    // Test support -----------------------------------------------------

    #[doc(hidden)]
    pub fn force_kill(&mut self, rank: usize) {
        self.kill(rank);
    }

    #[doc(hidden)]
    pub fn force_observe_revocation(&mut self, rank: usize) {
        self.procs[rank].observed_revocation = true;
        self.revoked = true;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{KernelKind, RunConfig};

    fn world(procs: usize) -> World {
        let mut cfg = RunConfig::new(KernelKind::Cg, procs, 30);
        cfg.cp_int = 10;
        cfg.log_size = 10;
        cfg.size = Some(256);
        World::new_in_memory(cfg, true)
    }

    #[test]
    fn send_to_alive_peer_buffers() {
        let mut w = world(16);
        let out = w.post_send(0, 1, 7, 1, 0, vec![1, 2, 3]);
        assert_eq!(out, SendOutcome::Buffered);
        assert_eq!(w.mailbox_len(1), 1);
    }

    #[test]
    fn send_to_dead_peer_still_buffers() {
        // Eager buffering: the send completes locally; the message is lost
        // with the receiver.
        let mut w = world(16);
        w.force_kill(2);
        let out = w.post_send(0, 2, 7, 1, 0, vec![9]);
        assert_eq!(out, SendOutcome::Buffered);
        assert_eq!(w.mailbox_len(2), 1);
    }

    #[test]
    fn send_after_observing_revocation_errors() {
        let mut w = world(16);
        w.force_observe_revocation(3);
        let out = w.post_send(3, 0, 7, 1, 0, vec![]);
        assert_eq!(out, SendOutcome::RevokedError);
    }

    #[test]
    fn recv_from_dead_src_detects() {
        let mut w = world(16);
        w.force_kill(2);
        match w.post_recv(0, 2, 7) {
            RecvOutcome::FailureDetected => {}
            other => panic!("expected detection, got {other:?}"),
        }
        assert!(w.procs[0].observed_revocation);
        assert!(w.revoked);
    }

    #[test]
    fn buffered_message_wins_over_death() {
        // Message sent before the failure is still consumable afterwards.
        let mut w = world(16);
        w.post_send(5, 4, 7, 1, 0, vec![42]);
        w.force_kill(2);
        w.force_observe_revocation(0);
        match w.post_recv(4, 5, 7) {
            RecvOutcome::Data(msg) => assert_eq!(msg.payload, vec![42]),
            other => panic!("expected data, got {other:?}"),
        }
    }

    #[test]
    fn recv_from_healthy_late_sender_blocks() {
        let mut w = world(16);
        assert!(matches!(w.post_recv(0, 1, 7), RecvOutcome::Blocked));
        assert!(!w.procs[0].observed_revocation);
    }

    #[test]
    fn recv_fifo_per_src_tag() {
        let mut w = world(16);
        w.post_send(1, 0, 7, 1, 0, vec![1]);
        w.post_send(1, 0, 7, 1, 1, vec![2]);
        let RecvOutcome::Data(first) = w.post_recv(0, 1, 7) else {
            panic!()
        };
        let RecvOutcome::Data(second) = w.post_recv(0, 1, 7) else {
            panic!()
        };
        assert_eq!((first.payload[0], second.payload[0]), (1, 2));
    }

    #[test]
    fn inject_failure_validations() {
        let mut w = world(16);
        assert!(w
            .inject_failure(FailureSpec {
                rank: 2,
                iter: 31,
                phase: 0
            })
            .is_err());
        w.force_kill(2);
        assert!(w
            .inject_failure(FailureSpec {
                rank: 2,
                iter: 5,
                phase: 0
            })
            .is_err());
    }

    #[test]
    fn recover_world_respawns_all_dead() {
        let mut w = world(16);
        w.post_send(0, 3, 7, 1, 0, vec![1]);
        w.force_kill(0);
        w.force_kill(8);
        w.force_observe_revocation(1);
        let epoch_before = w.epoch;
        w.recover_world().unwrap();
        assert_eq!(w.epoch, epoch_before + 1);
        assert_eq!(w.procs[0].status, ProcStatus::Respawned);
        assert_eq!(w.procs[8].status, ProcStatus::Respawned);
        assert!(w.procs.iter().all(|p| p.status.is_alive()));
        assert!(w.procs.iter().all(|p| !p.observed_revocation));
        assert!(!w.revoked);
        // Prior-epoch messages are gone.
        assert_eq!(w.mailbox_len(3), 0);
        // No checkpoint existed, so the respawned ranks restart from the
        // initial state at iteration 1.
        assert_eq!(w.procs[0].current_iter, 1);
    }

    #[test]
    #[should_panic(expected = "revoked")]
    fn recover_without_revocation_is_a_bug() {
        let mut w = world(16);
        w.force_kill(2);
        w.revoked = false;
        let _ = w.recover_world();
    }

    #[test]
    fn gather_without_failure_is_uniform() {
        let mut w = world(16);
        let front = w.gather_front_line();
        assert!(front.iters.iter().all(|&i| i == 1));
        assert_eq!((front.minit, front.maxit), (1, 1));
        for proto in &w.protos {
            assert_eq!(proto.peer_iters, front.iters);
        }
    }
}
