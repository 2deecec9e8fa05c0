//! Distributed conjugate-gradient kernel.
//!
//! The matrix is partitioned over a 2D process grid. One iteration runs
//! four communication phases: a reduce-partner exchange that sums the
//! partial matrix-vector products across each grid row, a transpose-partner
//! exchange that hands the summed row block to the rank that owns it as a
//! vector segment, and two scalar reduce exchanges for the dot products.
//! Every `INNER_ITERS` iterations the outer power-iteration step normalizes
//! the solution into a fresh right-hand side and refreshes the eigenvalue
//! estimate `zeta`, the run's verification value.
//!
//! All reductions walk the same partner order on every rank (distances
//! halving from `ncols/2` down to 1), which makes the floating-point
//! reduction tree identical everywhere: replicated scalar values stay
//! bitwise-equal across the grid and reruns reproduce results exactly.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{decode_f64s, encode_f64s, Op};
use crate::error::{CheckpointError, ConfigError};
use crate::txn::Txn;

/// Inner CG iterations per outer (power-iteration) step.
pub const INNER_ITERS: u64 = 25;
/// Diagonal shift of the eigenvalue estimate.
pub const SHIFT: f64 = 20.0;
/// Off-diagonal samples per matrix row.
pub const NNZ_PER_ROW: usize = 8;
/// Diagonal dominance margin; keeps the matrix SPD and the solve slow
/// enough that 25-iteration blocks stay far from stagnation.
const DIAG_MARGIN: f64 = 0.1;
const OFFDIAG_SCALE: f64 = 0.25;

// Compute-step ids.
const C_MATVEC: u8 = 0;
const C_DOT: u8 = 1;
const C_ALPHA: u8 = 2;
const C_TAIL: u8 = 3;
// Payload selectors.
const SEL_W: u8 = 0;
const SEL_D: u8 = 1;
const SEL_G: u8 = 2;
// Receive sinks.
const SINK_W_ACC: u8 = 0;
const SINK_Q_SET: u8 = 1;
const SINK_D_ACC: u8 = 2;
const SINK_G_ACC: u8 = 3;

fn tag(phase: u8, exchange: u8) -> u32 {
    u32::from(phase) * 8 + u32::from(exchange)
}

/// Process-grid shape for `n_procs`: `rows x cols` with both powers of two
/// and `rows` equal to `cols` or `2*cols`.
pub fn grid_for(n_procs: usize) -> Option<(usize, usize)> {
    if n_procs == 0 || !n_procs.is_power_of_two() {
        return None;
    }
    let log2 = n_procs.trailing_zeros();
    let cols = 1usize << (log2 / 2);
    let rows = n_procs / cols;
    debug_assert!(rows == cols || rows == 2 * cols);
    Some((rows, cols))
}

pub fn validate(n_procs: usize, n: usize) -> Result<(), ConfigError> {
    let (rows, cols) = grid_for(n_procs)
        .ok_or_else(|| ConfigError::Invalid(format!("cg needs a power-of-two proc count, got {n_procs}")))?;
    if rows != cols {
        return Err(ConfigError::Invalid(format!(
            "cg runs require a square process grid ({n_procs} procs gives {rows}x{cols}); use 1, 4, 16, 64, ..."
        )));
    }
    if !n.is_multiple_of(rows) || !n.is_multiple_of(cols) {
        return Err(ConfigError::Invalid(format!(
            "matrix size {n} not divisible by the {rows}x{cols} grid"
        )));
    }
    Ok(())
}

/// Communication peers of one rank.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CgTopology {
    pub nrows: usize,
    pub ncols: usize,
    pub row: usize,
    pub col: usize,
    pub rank: usize,
    /// Reduce partners within the grid row, distance halving from
    /// `ncols/2` down to 1.
    pub reduce_partners: Vec<usize>,
    pub transpose_partner: usize,
}

impl CgTopology {
    pub fn new(rank: usize, n_procs: usize) -> Self {
        let (nrows, ncols) = grid_for(n_procs).expect("validated proc count");
        let row = rank / ncols;
        let col = rank % ncols;
        let mut reduce_partners = Vec::new();
        let mut d = ncols / 2;
        while d >= 1 {
            reduce_partners.push(row * ncols + (col ^ d));
            d /= 2;
        }
        let transpose_partner = if nrows == ncols {
            col * ncols + row
        } else {
            // Ranks pair up into a square grid of rank pairs; transpose the
            // pair grid, keeping rank parity.
            let pair = rank / 2;
            let side = ncols;
            let tpair = (pair % side) * side + pair / side;
            2 * tpair + rank % 2
        };
        CgTopology {
            nrows,
            ncols,
            row,
            col,
            rank,
            reduce_partners,
            transpose_partner,
        }
    }
}

/// Local CSR block of the global matrix.
#[derive(Debug, Clone)]
pub struct CsrBlock {
    pub n_local_rows: usize,
    pub row_ptr: Vec<usize>,
    /// Column indices local to the owned column block.
    pub cols: Vec<usize>,
    pub vals: Vec<f64>,
}

/// Builds the full symmetric positive-definite matrix for `seed` and slices
/// out this rank's block. Construction touches the rank only at the slicing
/// step, so every rank (including a respawned one) derives the identical
/// matrix.
pub fn make_problem(seed: u64, n: usize, nnz_per_row: usize, topo: &CgTopology) -> CsrBlock {
    use std::collections::BTreeMap;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for i in 0..n {
        for _ in 0..nnz_per_row {
            let j = rng.gen_range(0..n);
            let v = rng.gen::<f64>() * OFFDIAG_SCALE;
            if i != j {
                *entries.entry((i, j)).or_insert(0.0) += v;
                *entries.entry((j, i)).or_insert(0.0) += v;
            }
        }
    }
    // Strict diagonal dominance makes the matrix SPD.
    let mut row_abs: Vec<f64> = vec![0.0; n];
    for (&(i, _), &v) in &entries {
        row_abs[i] += v.abs();
    }
    for (i, sum) in row_abs.iter().enumerate() {
        entries.insert((i, i), DIAG_MARGIN + sum);
    }

    let rows_per = n / topo.nrows;
    let cols_per = n / topo.ncols;
    let row_start = topo.row * rows_per;
    let col_start = topo.col * cols_per;
    let mut row_ptr = vec![0usize; rows_per + 1];
    let mut cols = Vec::new();
    let mut vals = Vec::new();
    for li in 0..rows_per {
        let gi = row_start + li;
        for (&(_, j), &v) in entries.range((gi, 0)..(gi, n)) {
            if (col_start..col_start + cols_per).contains(&j) {
                cols.push(j - col_start);
                vals.push(v);
            }
        }
        row_ptr[li + 1] = cols.len();
    }
    CsrBlock {
        n_local_rows: rows_per,
        row_ptr,
        cols,
        vals,
    }
}

/// Persistent (committed) CG state.
#[derive(Debug, Clone)]
pub struct CgState {
    pub x: Vec<f64>,
    pub z: Vec<f64>,
    pub r: Vec<f64>,
    pub p: Vec<f64>,
    pub rho: f64,
    pub zeta: f64,
}

/// Transaction shadow: the persistent vectors updated before the last
/// communication phase. Everything else touched pre-commit is per-iteration
/// scratch.
#[derive(Debug, Clone)]
pub struct CgShadow {
    z: Vec<f64>,
    r: Vec<f64>,
}

#[derive(Debug, Clone, Default)]
struct CgScratch {
    w: Vec<f64>,
    q: Vec<f64>,
    d: f64,
    rho0: f64,
    rho_next: f64,
    xz: f64,
    zz: f64,
}

#[derive(Debug, Clone)]
pub struct CgRunner {
    pub topo: CgTopology,
    n: usize,
    seed: u64,
    a: CsrBlock,
    state: CgState,
    txn: Txn<CgShadow>,
    scratch: CgScratch,
    program: Vec<Op>,
    /// Committed residual norms squared, one per committed iteration
    /// (observational; not part of the checkpointed state).
    pub rho_history: Vec<f64>,
}

impl CgRunner {
    pub fn new(rank: usize, n_procs: usize, n: usize, seed: u64) -> Self {
        Self::with_matrix_params(rank, n_procs, n, seed, NNZ_PER_ROW)
    }

    pub fn with_matrix_params(
        rank: usize,
        n_procs: usize,
        n: usize,
        seed: u64,
        nnz_per_row: usize,
    ) -> Self {
        let topo = CgTopology::new(rank, n_procs);
        assert_eq!(topo.nrows, topo.ncols, "cg data path requires a square grid");
        assert!(n.is_multiple_of(topo.ncols) && n.is_multiple_of(topo.nrows));
        let a = make_problem(seed, n, nnz_per_row, &topo);
        let cols_per = n / topo.ncols;
        let rows_per = n / topo.nrows;
        let state = Self::initial_state(n, cols_per);
        let scratch = CgScratch {
            w: vec![0.0; rows_per],
            q: vec![0.0; cols_per],
            ..CgScratch::default()
        };
        let program = Self::build_program(&topo);
        CgRunner {
            topo,
            n,
            seed,
            a,
            state,
            txn: Txn::new(),
            scratch,
            program,
            rho_history: Vec::new(),
        }
    }

    fn initial_state(n: usize, cols_per: usize) -> CgState {
        CgState {
            x: vec![1.0; cols_per],
            z: vec![0.0; cols_per],
            r: vec![1.0; cols_per],
            p: vec![1.0; cols_per],
            // r.r with r all-ones is exactly n.
            rho: n as f64,
            zeta: 0.0,
        }
    }

    fn build_program(topo: &CgTopology) -> Vec<Op> {
        let mut ops = Vec::new();
        ops.push(Op::Begin);
        ops.push(Op::Compute(C_MATVEC));
        ops.push(Op::KillPoint(0));
        for (j, &p) in topo.reduce_partners.iter().enumerate() {
            ops.push(Op::Send { dst: p, tag: tag(0, j as u8), selector: SEL_W });
            ops.push(Op::Recv { src: p, tag: tag(0, j as u8), sink: SINK_W_ACC });
        }
        ops.push(Op::PhaseEnd(0));
        ops.push(Op::KillPoint(1));
        let tp = topo.transpose_partner;
        ops.push(Op::Send { dst: tp, tag: tag(1, 0), selector: SEL_W });
        ops.push(Op::Recv { src: tp, tag: tag(1, 0), sink: SINK_Q_SET });
        ops.push(Op::PhaseEnd(1));
        ops.push(Op::Compute(C_DOT));
        ops.push(Op::KillPoint(2));
        for (j, &p) in topo.reduce_partners.iter().enumerate() {
            ops.push(Op::Send { dst: p, tag: tag(2, j as u8), selector: SEL_D });
            ops.push(Op::Recv { src: p, tag: tag(2, j as u8), sink: SINK_D_ACC });
        }
        ops.push(Op::PhaseEnd(2));
        ops.push(Op::Compute(C_ALPHA));
        ops.push(Op::KillPoint(3));
        for (j, &p) in topo.reduce_partners.iter().enumerate() {
            ops.push(Op::Send { dst: p, tag: tag(3, j as u8), selector: SEL_G });
            ops.push(Op::Recv { src: p, tag: tag(3, j as u8), sink: SINK_G_ACC });
        }
        ops.push(Op::PhaseEnd(3));
        ops.push(Op::KillPoint(4));
        ops.push(Op::Commit);
        ops.push(Op::Compute(C_TAIL));
        ops.push(Op::CheckpointMaybe);
        ops.push(Op::End);
        ops
    }

    pub fn program(&self) -> &[Op] {
        &self.program
    }

    pub fn begin_iteration(&mut self) {
        self.txn
            .begin(CgShadow {
                z: self.state.z.clone(),
                r: self.state.r.clone(),
            })
            .expect("iteration begins on a closed txn");
    }

    pub fn commit_iteration(&mut self) {
        let shadow = self.txn.commit().expect("commit with open txn");
        self.state.z = shadow.z;
        self.state.r = shadow.r;
    }

    pub fn abort_iteration(&mut self) {
        self.txn.abort_if_open();
    }

    pub fn iteration_open(&self) -> bool {
        self.txn.is_open()
    }

    pub fn apply_compute(&mut self, id: u8, iter: u64) {
        match id {
            C_MATVEC => {
                for li in 0..self.a.n_local_rows {
                    let mut sum = 0.0;
                    for k in self.a.row_ptr[li]..self.a.row_ptr[li + 1] {
                        sum += self.a.vals[k] * self.state.p[self.a.cols[k]];
                    }
                    self.scratch.w[li] = sum;
                }
            }
            C_DOT => {
                let mut d = 0.0;
                for i in 0..self.scratch.q.len() {
                    d += self.state.p[i] * self.scratch.q[i];
                }
                self.scratch.d = d;
            }
            C_ALPHA => {
                let sh = self.txn.shadow_mut().expect("alpha step inside open txn");
                let rho0 = self.state.rho;
                let alpha = if self.scratch.d != 0.0 { rho0 / self.scratch.d } else { 0.0 };
                let (mut rho_next, mut xz, mut zz) = (0.0, 0.0, 0.0);
                for i in 0..sh.z.len() {
                    sh.z[i] += alpha * self.state.p[i];
                    sh.r[i] -= alpha * self.scratch.q[i];
                    rho_next += sh.r[i] * sh.r[i];
                    xz += self.state.x[i] * sh.z[i];
                    zz += sh.z[i] * sh.z[i];
                }
                self.scratch.rho0 = rho0;
                self.scratch.rho_next = rho_next;
                self.scratch.xz = xz;
                self.scratch.zz = zz;
            }
            C_TAIL => {
                // Post-commit region: mutates committed state directly and
                // is never re-run.
                self.rho_history.push(self.scratch.rho_next);
                self.state.rho = self.scratch.rho_next;
                if self.scratch.xz != 0.0 {
                    self.state.zeta = SHIFT + 1.0 / self.scratch.xz;
                }
                if iter.is_multiple_of(INNER_ITERS) {
                    // Outer step: normalize z into the next right-hand side
                    // and restart the solve.
                    let t = if self.scratch.zz > 0.0 {
                        1.0 / self.scratch.zz.sqrt()
                    } else {
                        0.0
                    };
                    for i in 0..self.state.x.len() {
                        self.state.x[i] = self.state.z[i] * t;
                    }
                    self.state.z.fill(0.0);
                    self.state.r.copy_from_slice(&self.state.x);
                    self.state.p.copy_from_slice(&self.state.x);
                    self.state.rho = self.scratch.zz * (t * t);
                } else {
                    let beta = if self.scratch.rho0 != 0.0 {
                        self.scratch.rho_next / self.scratch.rho0
                    } else {
                        0.0
                    };
                    for i in 0..self.state.p.len() {
                        self.state.p[i] = self.state.r[i] + beta * self.state.p[i];
                    }
                }
            }
            other => panic!("unknown cg compute id {other}"),
        }
    }

    pub fn payload(&self, selector: u8) -> Vec<u8> {
        match selector {
            SEL_W => encode_f64s(&self.scratch.w),
            SEL_D => encode_f64s(&[self.scratch.d]),
            SEL_G => encode_f64s(&[self.scratch.rho_next, self.scratch.xz, self.scratch.zz]),
            other => panic!("unknown cg selector {other}"),
        }
    }

    pub fn accept(&mut self, sink: u8, bytes: &[u8]) {
        match sink {
            SINK_W_ACC => {
                let vals = decode_f64s(bytes);
                assert_eq!(vals.len(), self.scratch.w.len());
                for (w, v) in self.scratch.w.iter_mut().zip(vals) {
                    *w += v;
                }
            }
            SINK_Q_SET => {
                let vals = decode_f64s(bytes);
                assert_eq!(vals.len(), self.scratch.q.len());
                self.scratch.q = vals;
            }
            SINK_D_ACC => {
                let vals = decode_f64s(bytes);
                self.scratch.d += vals[0];
            }
            SINK_G_ACC => {
                let vals = decode_f64s(bytes);
                self.scratch.rho_next += vals[0];
                self.scratch.xz += vals[1];
                self.scratch.zz += vals[2];
            }
            other => panic!("unknown cg sink {other}"),
        }
    }

    pub fn serialize_state(&self) -> Vec<u8> {
        let s = &self.state;
        let mut out = Vec::new();
        out.extend_from_slice(&(s.x.len() as u64).to_le_bytes());
        for v in [&s.x, &s.z, &s.r, &s.p] {
            out.extend_from_slice(&encode_f64s(v));
        }
        out.extend_from_slice(&encode_f64s(&[s.rho, s.zeta]));
        out
    }

    pub fn restore_state(&mut self, bytes: &[u8], rank: usize) -> Result<(), CheckpointError> {
        let corrupt = |reason: &str| CheckpointError::Corrupt {
            rank,
            reason: reason.to_string(),
        };
        if bytes.len() < 8 {
            return Err(corrupt("cg state truncated"));
        }
        let len = u64::from_le_bytes(bytes[0..8].try_into().unwrap()) as usize;
        let expect = 8 + 8 * (4 * len + 2);
        if len != self.state.x.len() || bytes.len() != expect {
            return Err(corrupt("cg state length mismatch"));
        }
        let mut off = 8;
        let mut take = |n: usize| {
            let vals = decode_f64s(&bytes[off..off + 8 * n]);
            off += 8 * n;
            vals
        };
        self.state.x = take(len);
        self.state.z = take(len);
        self.state.r = take(len);
        self.state.p = take(len);
        let scalars = take(2);
        self.state.rho = scalars[0];
        self.state.zeta = scalars[1];
        Ok(())
    }

    pub fn reset_to_initial(&mut self) {
        self.state = Self::initial_state(self.n, self.state.x.len());
        self.txn = Txn::new();
    }

    pub fn zeta(&self) -> f64 {
        self.state.zeta
    }

    pub fn shadow_bytes(&self) -> u64 {
        (self.state.z.len() + self.state.r.len()) as u64 * 8
    }

    pub fn state(&self) -> &CgState {
        &self.state
    }

    /// Matrix seed, for rebuild checks.
    pub fn seed(&self) -> u64 {
        self.seed
    }
}
