//! Per-thread floating-point operation counters, split by kernel family.
//!
//! Each multiply-add counts as two operations. Padded taps of the causal
//! convolution are counted, so the conv count is exactly proportional to
//! sequence length.

use std::cell::Cell;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kernel {
    /// Depthwise dilated convolution.
    Conv,
    /// Query-to-prototype scores and prototype mixing.
    PrototypeAttention,
    /// Token-to-token scores and value mixing in self-attention.
    SelfAttention,
    /// Any other dense matrix product.
    Matmul,
}

const KINDS: usize = 4;

thread_local! {
    static COUNTS: Cell<[u64; KINDS]> = const { Cell::new([0; KINDS]) };
}

fn slot(kind: Kernel) -> usize {
    match kind {
        Kernel::Conv => 0,
        Kernel::PrototypeAttention => 1,
        Kernel::SelfAttention => 2,
        Kernel::Matmul => 3,
    }
}

pub fn add(kind: Kernel, n: u64) {
    COUNTS.with(|c| {
        let mut v = c.get();
        v[slot(kind)] += n;
        c.set(v);
    });
}

pub fn read(kind: Kernel) -> u64 {
    COUNTS.with(|c| c.get()[slot(kind)])
}

pub fn reset() {
    COUNTS.with(|c| c.set([0; KINDS]));
}
