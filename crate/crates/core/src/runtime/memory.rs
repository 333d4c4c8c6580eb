// SPDX-License-Identifier: Apache-2.0

//! Enclave memory footprint of shared versus per-request enclaves.

use num_traits::Num;

use crate::scalar::count;

/// Per-model memory parameters, in any consistent unit.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MemoryParams<T> {
    pub model: T,
    pub runtime_buffer: T,
    pub overhead: T,
}

impl<T: Num + Copy> MemoryParams<T> {
    pub fn new(model: T, runtime_buffer: T, overhead: T) -> Self {
        MemoryParams { model, runtime_buffer, overhead }
    }

    /// One enclave serving `k` concurrent contexts of the same model.
    pub fn shared(&self, k: u32) -> T {
        self.model + count::<T>(k) * self.runtime_buffer + self.overhead
    }

    /// `k` single-context enclaves.
    pub fn separate(&self, k: u32) -> T {
        count::<T>(k) * (self.model + self.runtime_buffer + self.overhead)
    }

    /// `1 - shared / separate`. Requires `k >= 1`.
    pub fn saving(&self, k: u32) -> T {
        T::one() - self.shared(k) / self.separate(k)
    }
}
