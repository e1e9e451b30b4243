use std::cell::Cell;

thread_local! {
    static MACS: Cell<u64> = const { Cell::new(0) };
}

pub(crate) fn add_macs(n: u64) {
    MACS.with(|c| c.set(c.get() + n));
}

/// Multiply-accumulate operations performed on this thread since the last reset.
pub fn mac_count() -> u64 {
    MACS.with(Cell::get)
}

pub fn reset_mac_count() {
    MACS.with(|c| c.set(0));
}

/// Measures the MACs performed between construction and [`MacScope::finish`].
pub struct MacScope {
    start: u64,
}

impl MacScope {
    pub fn start() -> Self {
        MacScope { start: mac_count() }
    }

    pub fn finish(self) -> u64 {
        mac_count() - self.start
    }
}
