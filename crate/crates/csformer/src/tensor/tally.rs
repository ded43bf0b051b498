//! Thread-local multiply-accumulate counter.
//!
//! When a tally is active, every conv/matmul-family primitive reports its MAC
//! count under the class set by the caller. LayerNorm, GELU, softmax and
//! other elementwise work are never counted, matching the GMACs convention.

use std::cell::{Cell, RefCell};

/// Accounting bucket for a counted primitive.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MacClass {
    Conv,
    AttnQkv,
    AttnLogits,
    AttnValues,
    Gcffn,
    Resample,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MacTally {
    pub conv: u64,
    pub attn_qkv: u64,
    pub attn_logits: u64,
    pub attn_values: u64,
    pub gcffn: u64,
    pub resample: u64,
}

impl MacTally {
    pub fn total(&self) -> u64 {
        self.conv + self.attn_qkv + self.attn_logits + self.attn_values + self.gcffn + self.resample
    }

    pub fn attn_total(&self) -> u64 {
        self.attn_qkv + self.attn_logits + self.attn_values
    }

    fn add(&mut self, class: MacClass, macs: u64) {
        match class {
            MacClass::Conv => self.conv += macs,
            MacClass::AttnQkv => self.attn_qkv += macs,
            MacClass::AttnLogits => self.attn_logits += macs,
            MacClass::AttnValues => self.attn_values += macs,
            MacClass::Gcffn => self.gcffn += macs,
            MacClass::Resample => self.resample += macs,
        }
    }
}

thread_local! {
    static ACTIVE: Cell<bool> = const { Cell::new(false) };
    static CLASS: Cell<MacClass> = const { Cell::new(MacClass::Conv) };
    static TALLY: RefCell<MacTally> = const { RefCell::new(MacTally {
        conv: 0, attn_qkv: 0, attn_logits: 0, attn_values: 0, gcffn: 0, resample: 0,
    }) };
}

/// Start counting on this thread. Resets any previous tally.
pub fn tally_start() {
    TALLY.with(|t| *t.borrow_mut() = MacTally::default());
    ACTIVE.with(|a| a.set(true));
}

/// Stop counting and return the tally.
pub fn tally_take() -> MacTally {
    ACTIVE.with(|a| a.set(false));
    TALLY.with(|t| std::mem::take(&mut *t.borrow_mut()))
}

/// Run `f` attributing counted MACs to `class`.
pub fn with_class<R>(class: MacClass, f: impl FnOnce() -> R) -> R {
    let prev = CLASS.with(|c| c.replace(class));
    let out = f();
    CLASS.with(|c| c.set(prev));
    out
}

pub(crate) fn record(macs: u64) {
    if ACTIVE.with(Cell::get) {
        let class = CLASS.with(Cell::get);
        TALLY.with(|t| t.borrow_mut().add(class, macs));
    }
}
