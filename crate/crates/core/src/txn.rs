//! Iterations as transactions.
//!
//! Every operation before the last communication call of an iteration must
//! be idempotent, because a failure detected in any communication call
//! aborts the whole iteration and re-runs it from the top. The [`Txn`]
//! wrapper enforces the discipline: at `begin` the kernel captures a deep
//! copy of the persistent data it will update (the shadow), all
//! pre-commit updates go to the shadow, and `commit` hands the shadow back
//! for installation into the committed state. `abort` simply discards the
//! shadow, leaving the committed state bitwise untouched.
//!
//! Post-commit updates (after the last communication call) may mutate the
//! committed state directly; they are never reversed.

use crate::error::TxnError;

#[derive(Debug, Clone)]
pub struct Txn<S> {
    shadow: Option<S>,
    open: bool,
}

impl<S> Default for Txn<S> {
    fn default() -> Self {
        Txn {
            shadow: None,
            open: false,
        }
    }
}

impl<S> Txn<S> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Opens the iteration with the captured shadow copy.
    pub fn begin(&mut self, shadow: S) -> Result<(), TxnError> {
        if self.open {
            return Err(TxnError::AlreadyOpen);
        }
        self.shadow = Some(shadow);
        self.open = true;
        Ok(())
    }

    pub fn is_open(&self) -> bool {
        self.open
    }

    /// Working copy of the transaction-protected data.
    pub fn shadow_mut(&mut self) -> Option<&mut S> {
        debug_assert!(self.open || self.shadow.is_none());
        self.shadow.as_mut()
    }

    pub fn shadow(&self) -> Option<&S> {
        self.shadow.as_ref()
    }

    /// Closes the iteration and returns the shadow for installation into
    /// the committed state.
    pub fn commit(&mut self) -> Result<S, TxnError> {
        if !self.open {
            return Err(TxnError::NotOpen);
        }
        self.open = false;
        Ok(self.shadow.take().expect("open txn holds a shadow"))
    }

    /// Discards the shadow; the committed state was never touched.
    pub fn abort(&mut self) -> Result<(), TxnError> {
        if !self.open {
            return Err(TxnError::NotOpen);
        }
        self.shadow = None;
        self.open = false;
        Ok(())
    }

    /// Abort that tolerates no iteration being open. Used by recovery,
    /// which runs for every process whether or not it was mid-iteration.
    pub fn abort_if_open(&mut self) {
        if self.open {
            self.abort().expect("open txn aborts");
        }
    }
}
