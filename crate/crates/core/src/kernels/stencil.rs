//! 3D diffusion stencil with six-neighbor halo exchange.
//!
//! Stand-in for a hydrodynamics mini-app: the communication structure is
//! the interesting part. Each iteration exchanges face halos three times
//! (current field, half-step field, updated field), advances an explicit
//! diffusion update, and finishes with a local constraint pass (positivity
//! clamp plus neighbor-averaged smoothing). The whole domain block is
//! deep-copied into the transaction shadow at every begin, so the shadow
//! cost is the full application state, in contrast to the two vectors CG
//! copies.
//!
//! Domain boundaries are fixed Dirichlet: missing neighbors contribute
//! zero, and the global field total decays monotonically. The verification
//! value is the field value at the global origin cell, seeded with a unit
//! point source.

use super::{decode_f64s, encode_f64s, Op};
use crate::error::{CheckpointError, ConfigError};
use crate::txn::Txn;

pub const DT: f64 = 0.1;
/// Smoothing weight of the constraint pass.
const SMOOTH: f64 = 0.1;

const C_HALF: u8 = 0;
const C_UPDATE: u8 = 1;
const C_CONSTRAINT: u8 = 2;

/// Face directions in fixed order: -x, +x, -y, +y, -z, +z.
pub const DIRS: usize = 6;

fn opposite(dir: usize) -> usize {
    dir ^ 1
}

fn tag(phase: u8, dir: usize) -> u32 {
    u32::from(phase) * 8 + dir as u32
}

fn sel(phase: u8, dir: usize) -> u8 {
    phase * 8 + dir as u8
}

pub fn cube_side(n_procs: usize) -> Option<usize> {
    let mut side = 1;
    while side * side * side < n_procs {
        side += 1;
    }
    (side * side * side == n_procs).then_some(side)
}

pub fn validate(n_procs: usize, nx: usize) -> Result<(), ConfigError> {
    if cube_side(n_procs).is_none() {
        return Err(ConfigError::Invalid(format!(
            "stencil needs a cubic proc count, got {n_procs}"
        )));
    }
    if nx < 2 {
        return Err(ConfigError::Invalid(format!(
            "stencil block side must be at least 2, got {nx}"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StencilTopology {
    pub side: usize,
    pub coords: (usize, usize, usize),
    pub rank: usize,
    /// Neighbor rank per direction, `None` at the physical boundary.
    pub neighbors: [Option<usize>; DIRS],
}

impl StencilTopology {
    pub fn new(rank: usize, n_procs: usize) -> Self {
        let side = cube_side(n_procs).expect("validated proc count");
        let x = rank % side;
        let y = (rank / side) % side;
        let z = rank / (side * side);
        let at = |x: usize, y: usize, z: usize| x + side * (y + side * z);
        let mut neighbors = [None; DIRS];
        if x > 0 {
            neighbors[0] = Some(at(x - 1, y, z));
        }
        if x + 1 < side {
            neighbors[1] = Some(at(x + 1, y, z));
        }
        if y > 0 {
            neighbors[2] = Some(at(x, y - 1, z));
        }
        if y + 1 < side {
            neighbors[3] = Some(at(x, y + 1, z));
        }
        if z > 0 {
            neighbors[4] = Some(at(x, y, z - 1));
        }
        if z + 1 < side {
            neighbors[5] = Some(at(x, y, z + 1));
        }
        StencilTopology {
            side,
            coords: (x, y, z),
            rank,
            neighbors,
        }
    }

    pub fn neighbor_count(&self) -> usize {
        self.neighbors.iter().flatten().count()
    }
}

/// Cubic block of cells with a one-cell halo.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    pub nx: usize,
    pub data: Vec<f64>,
}

impl Field {
    pub fn zeros(nx: usize) -> Self {
        let s = nx + 2;
        Field {
            nx,
            data: vec![0.0; s * s * s],
        }
    }

    #[inline]
    pub fn idx(&self, i: usize, j: usize, k: usize) -> usize {
        let s = self.nx + 2;
        (k * s + j) * s + i
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[self.idx(i, j, k)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, v: f64) {
        let id = self.idx(i, j, k);
        self.data[id] = v;
    }

    /// Interior plane adjacent to `dir`, in fixed (outer, inner) loop order.
    pub fn extract_face(&self, dir: usize) -> Vec<f64> {
        let nx = self.nx;
        let mut out = Vec::with_capacity(nx * nx);
        for a in 1..=nx {
            for b in 1..=nx {
                let v = match dir {
                    0 => self.get(1, b, a),
                    1 => self.get(nx, b, a),
                    2 => self.get(b, 1, a),
                    3 => self.get(b, nx, a),
                    4 => self.get(b, a, 1),
                    5 => self.get(b, a, nx),
                    _ => unreachable!(),
                };
                out.push(v);
            }
        }
        out
    }

    /// Writes a received neighbor plane into the halo layer on `dir`.
    pub fn insert_halo(&mut self, dir: usize, plane: &[f64]) {
        let nx = self.nx;
        assert_eq!(plane.len(), nx * nx);
        let mut it = plane.iter();
        for a in 1..=nx {
            for b in 1..=nx {
                let v = *it.next().unwrap();
                match dir {
                    0 => self.set(0, b, a, v),
                    1 => self.set(nx + 1, b, a, v),
                    2 => self.set(b, 0, a, v),
                    3 => self.set(b, nx + 1, a, v),
                    4 => self.set(b, a, 0, v),
                    5 => self.set(b, a, nx + 1, v),
                    _ => unreachable!(),
                }
            }
        }
    }

    pub fn interior_sum(&self) -> f64 {
        let nx = self.nx;
        let mut sum = 0.0;
        for k in 1..=nx {
            for j in 1..=nx {
                for i in 1..=nx {
                    sum += self.get(i, j, k);
                }
            }
        }
        sum
    }

    #[inline]
    fn lap(&self, i: usize, j: usize, k: usize) -> f64 {
        self.get(i - 1, j, k)
            + self.get(i + 1, j, k)
            + self.get(i, j - 1, k)
            + self.get(i, j + 1, k)
            + self.get(i, j, k - 1)
            + self.get(i, j, k + 1)
            - 6.0 * self.get(i, j, k)
    }
}

#[derive(Debug, Clone)]
pub struct StencilRunner {
    pub topo: StencilTopology,
    nx: usize,
    /// Committed domain.
    u: Field,
    txn: Txn<Field>,
    /// Half-step field.
    v: Field,
    tmp: Field,
    program: Vec<Op>,
}

impl StencilRunner {
    pub fn new(rank: usize, n_procs: usize, nx: usize) -> Self {
        let topo = StencilTopology::new(rank, n_procs);
        let mut u = Field::zeros(nx);
        if topo.coords == (0, 0, 0) {
            u.set(1, 1, 1, 1.0);
        }
        let program = Self::build_program(&topo);
        StencilRunner {
            topo,
            nx,
            u,
            txn: Txn::new(),
            v: Field::zeros(nx),
            tmp: Field::zeros(nx),
            program,
        }
    }

    fn build_program(topo: &StencilTopology) -> Vec<Op> {
        let mut ops = Vec::new();
        let phase_ops = |ops: &mut Vec<Op>, phase: u8| {
            ops.push(Op::KillPoint(phase));
            for (dir, nbr) in topo.neighbors.iter().enumerate() {
                if let Some(dst) = *nbr {
                    ops.push(Op::Send {
                        dst,
                        tag: tag(phase, dir),
                        selector: sel(phase, dir),
                    });
                }
            }
            for (dir, nbr) in topo.neighbors.iter().enumerate() {
                if let Some(src) = *nbr {
                    ops.push(Op::Recv {
                        src,
                        tag: tag(phase, opposite(dir)),
                        sink: sel(phase, dir),
                    });
                }
            }
            ops.push(Op::PhaseEnd(phase));
        };
        ops.push(Op::Begin);
        phase_ops(&mut ops, 0);
        ops.push(Op::Compute(C_HALF));
        phase_ops(&mut ops, 1);
        ops.push(Op::Compute(C_UPDATE));
        phase_ops(&mut ops, 2);
        ops.push(Op::Compute(C_CONSTRAINT));
        ops.push(Op::KillPoint(3));
        ops.push(Op::Commit);
        ops.push(Op::CheckpointMaybe);
        ops.push(Op::End);
        ops
    }

    pub fn program(&self) -> &[Op] {
        &self.program
    }

    pub fn begin_iteration(&mut self) {
        self.txn.begin(self.u.clone()).expect("closed txn at begin");
    }

    pub fn commit_iteration(&mut self) {
        self.u = self.txn.commit().expect("open txn at commit");
    }

    pub fn abort_iteration(&mut self) {
        self.txn.abort_if_open();
    }

    pub fn iteration_open(&self) -> bool {
        self.txn.is_open()
    }

    pub fn apply_compute(&mut self, id: u8, _iter: u64) {
        let nx = self.nx;
        match id {
            C_HALF => {
                let sh = self.txn.shadow().expect("open txn");
                self.v.data.fill(0.0);
                for k in 1..=nx {
                    for j in 1..=nx {
                        for i in 1..=nx {
                            let v = sh.get(i, j, k) + 0.5 * DT * sh.lap(i, j, k);
                            self.v.set(i, j, k, v);
                        }
                    }
                }
            }
            C_UPDATE => {
                let sh = self.txn.shadow().expect("open txn");
                for k in 1..=nx {
                    for j in 1..=nx {
                        for i in 1..=nx {
                            let v = sh.get(i, j, k) + DT * self.v.lap(i, j, k);
                            self.tmp.set(i, j, k, v);
                        }
                    }
                }
                let sh = self.txn.shadow_mut().expect("open txn");
                for k in 1..=nx {
                    for j in 1..=nx {
                        for i in 1..=nx {
                            sh.set(i, j, k, self.tmp.get(i, j, k));
                        }
                    }
                }
            }
            C_CONSTRAINT => {
                let sh = self.txn.shadow().expect("open txn");
                for k in 1..=nx {
                    for j in 1..=nx {
                        for i in 1..=nx {
                            let nb = sh.get(i - 1, j, k)
                                + sh.get(i + 1, j, k)
                                + sh.get(i, j - 1, k)
                                + sh.get(i, j + 1, k)
                                + sh.get(i, j, k - 1)
                                + sh.get(i, j, k + 1);
                            let v = (1.0 - SMOOTH) * sh.get(i, j, k) + SMOOTH / 6.0 * nb;
                            self.tmp.set(i, j, k, v.max(0.0));
                        }
                    }
                }
                let sh = self.txn.shadow_mut().expect("open txn");
                for k in 1..=nx {
                    for j in 1..=nx {
                        for i in 1..=nx {
                            sh.set(i, j, k, self.tmp.get(i, j, k));
                        }
                    }
                }
            }
            other => panic!("unknown stencil compute id {other}"),
        }
    }

    pub fn payload(&self, selector: u8) -> Vec<u8> {
        let phase = selector / 8;
        let dir = (selector % 8) as usize;
        let field = match phase {
            0 | 2 => self.txn.shadow().expect("open txn"),
            1 => &self.v,
            _ => panic!("unknown stencil selector {selector}"),
        };
        encode_f64s(&field.extract_face(dir))
    }

    pub fn accept(&mut self, sink: u8, bytes: &[u8]) {
        let phase = sink / 8;
        let dir = (sink % 8) as usize;
        let plane = decode_f64s(bytes);
        match phase {
            0 | 2 => self
                .txn
                .shadow_mut()
                .expect("open txn")
                .insert_halo(dir, &plane),
            1 => self.v.insert_halo(dir, &plane),
            _ => panic!("unknown stencil sink {sink}"),
        }
    }

    pub fn serialize_state(&self) -> Vec<u8> {
        let nx = self.nx;
        let mut out = Vec::with_capacity(8 + nx * nx * nx * 8);
        out.extend_from_slice(&(nx as u64).to_le_bytes());
        let mut cells = Vec::with_capacity(nx * nx * nx);
        for k in 1..=nx {
            for j in 1..=nx {
                for i in 1..=nx {
                    cells.push(self.u.get(i, j, k));
                }
            }
        }
        out.extend_from_slice(&encode_f64s(&cells));
        out
    }

    pub fn restore_state(&mut self, bytes: &[u8], rank: usize) -> Result<(), CheckpointError> {
        let corrupt = |reason: &str| CheckpointError::Corrupt {
            rank,
            reason: reason.to_string(),
        };
        if bytes.len() < 8 {
            return Err(corrupt("stencil state truncated"));
        }
        let nx = u64::from_le_bytes(bytes[0..8].try_into().unwrap()) as usize;
        if nx != self.nx || bytes.len() != 8 + nx * nx * nx * 8 {
            return Err(corrupt("stencil state length mismatch"));
        }
        let cells = decode_f64s(&bytes[8..]);
        // Halos are refreshed by the first exchange phase before any use;
        // physical-boundary halos stay zero.
        let mut u = Field::zeros(nx);
        let mut it = cells.into_iter();
        for k in 1..=nx {
            for j in 1..=nx {
                for i in 1..=nx {
                    u.set(i, j, k, it.next().unwrap());
                }
            }
        }
        self.u = u;
        Ok(())
    }

    pub fn reset_to_initial(&mut self) {
        self.u = Field::zeros(self.nx);
        if self.topo.coords == (0, 0, 0) {
            self.u.set(1, 1, 1, 1.0);
        }
        self.txn = Txn::new();
    }

    /// Field value at the global origin cell; meaningful on the rank that
    /// owns it (grid corner (0,0,0)).
    pub fn origin_energy(&self) -> f64 {
        self.u.get(1, 1, 1)
    }

    pub fn shadow_bytes(&self) -> u64 {
        self.u.data.len() as u64 * 8
    }

    pub fn domain(&self) -> &Field {
        &self.u
    }
}
