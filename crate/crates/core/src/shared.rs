//! Lock-free shared parameter storage.
//!
//! Every parameter is an `f64` held in an `AtomicU64` and accessed with
//! relaxed loads and stores. Concurrent workers may lose each other's
//! updates or read a row half-written by another worker; each individual
//! element is always a value some worker wrote, and no access is undefined
//! behavior. On x86-64 and aarch64 relaxed access compiles to plain moves.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::algebra::{CoreTensor, Coupling, FactorMatrix, FactorModel};

/// Hints the CPU to pull the cache line holding `p`. No-op off x86-64.
#[inline(always)]
pub(crate) fn prefetch<T>(p: *const T) {
    #[cfg(target_arch = "x86_64")]
    #[allow(unused_unsafe)]
    // SAFETY: prefetching never faults, whatever the address.
    unsafe {
        use std::arch::x86_64::{_mm_prefetch, _MM_HINT_T0};
        _mm_prefetch::<_MM_HINT_T0>(p as *const i8);
    }
    #[cfg(not(target_arch = "x86_64"))]
    let _ = p;
}

pub(crate) struct SharedArray {
    data: Box<[AtomicU64]>,
}

impl SharedArray {
    fn from_slice(values: &[f64]) -> Self {
        SharedArray {
            data: values.iter().map(|v| AtomicU64::new(v.to_bits())).collect(),
        }
    }

    #[inline]
    pub fn load_into(&self, start: usize, out: &mut [f64]) {
        let src = &self.data[start..start + out.len()];
        for (o, a) in out.iter_mut().zip(src) {
            *o = f64::from_bits(a.load(Ordering::Relaxed));
        }
    }

    #[inline]
    pub fn store_from(&self, start: usize, values: &[f64]) {
        for (a, v) in self.data[start..start + values.len()].iter().zip(values) {
            a.store(v.to_bits(), Ordering::Relaxed);
        }
    }

    fn to_vec(&self) -> Vec<f64> {
        self.data
            .iter()
            .map(|a| f64::from_bits(a.load(Ordering::Relaxed)))
            .collect()
    }
}

pub(crate) struct SharedMatrix {
    rows: usize,
    cols: usize,
    data: SharedArray,
}

impl SharedMatrix {
    fn new(m: &FactorMatrix) -> Self {
        SharedMatrix {
            rows: m.rows(),
            cols: m.cols(),
            data: SharedArray::from_slice(m.values()),
        }
    }

    #[inline]
    pub fn load_row(&self, i: usize, out: &mut [f64]) {
        self.data.load_into(i * self.cols, out);
    }

    #[inline]
    pub fn store_row(&self, i: usize, values: &[f64]) {
        self.data.store_from(i * self.cols, values);
    }

    #[inline]
    pub fn prefetch_row(&self, i: usize) {
        if let Some(a) = self.data.data.get(i * self.cols) {
            prefetch(a as *const AtomicU64);
        }
    }

    fn snapshot(&self) -> FactorMatrix {
        FactorMatrix::from_raw(self.rows, self.cols, self.data.to_vec())
    }
}

pub(crate) struct SharedModel {
    core_template: CoreTensor,
    pub core: SharedArray,
    pub factors: Vec<SharedMatrix>,
    /// `(mode, V)` per coupled matrix.
    pub couplings: Vec<(usize, SharedMatrix)>,
}

impl SharedModel {
    pub fn new(model: &FactorModel) -> Self {
        SharedModel {
            core_template: model.core.clone(),
            core: SharedArray::from_slice(model.core.values()),
            factors: model.factors.iter().map(SharedMatrix::new).collect(),
            couplings: model
                .couplings
                .iter()
                .map(|c| (c.mode, SharedMatrix::new(&c.v)))
                .collect(),
        }
    }

    /// A core with the right shape and structure, holding the values at
    /// construction time.
    pub fn core_template(&self) -> &CoreTensor {
        &self.core_template
    }

    pub fn snapshot_dims(&self) -> Vec<usize> {
        self.factors.iter().map(|f| f.rows).collect()
    }

    pub fn coupling_rows(&self) -> Vec<usize> {
        self.couplings.iter().map(|(_, v)| v.rows).collect()
    }

    /// Copies the current parameters out. Only meaningful at a barrier.
    pub fn snapshot(&self) -> FactorModel {
        let mut core = self.core_template.clone();
        self.core.load_into(0, core.values_mut());
        FactorModel {
            core,
            factors: self.factors.iter().map(SharedMatrix::snapshot).collect(),
            couplings: self
                .couplings
                .iter()
                .map(|(mode, v)| Coupling {
                    mode: *mode,
                    v: v.snapshot(),
                })
                .collect(),
        }
    }
}
