//! Per-thread call counters for normalization, ArcLoss and the norm bound.
//!
//! Training runs on the calling thread, so a test can reset the counters,
//! run a variant, and read back which mechanisms were exercised.

use std::cell::Cell;

thread_local! {
    static NORMALIZE_ROWS: Cell<u64> = const { Cell::new(0) };
    static ARC_LOSS: Cell<u64> = const { Cell::new(0) };
    static APPLY_BOUND: Cell<u64> = const { Cell::new(0) };
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CallCounts {
    pub normalize_rows: u64,
    pub arc_loss: u64,
    pub apply_bound: u64,
}

pub fn reset() {
    NORMALIZE_ROWS.with(|c| c.set(0));
    ARC_LOSS.with(|c| c.set(0));
    APPLY_BOUND.with(|c| c.set(0));
}

pub fn counts() -> CallCounts {
    CallCounts {
        normalize_rows: NORMALIZE_ROWS.with(Cell::get),
        arc_loss: ARC_LOSS.with(Cell::get),
        apply_bound: APPLY_BOUND.with(Cell::get),
    }
}

pub(crate) fn hit_normalize_rows() {
    NORMALIZE_ROWS.with(|c| c.set(c.get() + 1));
}

pub(crate) fn hit_arc_loss() {
    ARC_LOSS.with(|c| c.set(c.get() + 1));
}

pub(crate) fn hit_apply_bound() {
    APPLY_BOUND.with(|c| c.set(c.get() + 1));
}
