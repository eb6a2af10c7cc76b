//! Access tracking for the zero-shot contract.
//!
//! [`AuditedBundle`] forwards every [`SampleAccess`] call to the wrapped
//! bundle and records which sample ids had their visual vector read.

use std::cell::RefCell;
use std::collections::BTreeSet;

use crate::data::{ClassRecord, DatasetBundle, Dims, SampleAccess};

#[derive(Debug)]
pub struct AuditedBundle<'a> {
    inner: &'a DatasetBundle,
    unseen: BTreeSet<usize>,
    reads: RefCell<BTreeSet<usize>>,
}

impl<'a> AuditedBundle<'a> {
    pub fn new(inner: &'a DatasetBundle) -> Self {
        Self { inner, unseen: inner.splits.unseen.iter().copied().collect(), reads: RefCell::default() }
    }

    /// Every sample id whose visual vector was read.
    pub fn visual_reads(&self) -> BTreeSet<usize> {
        self.reads.borrow().clone()
    }

    /// Sample ids of unseen species whose visual vector was read.
    pub fn unseen_visual_reads(&self) -> Vec<usize> {
        self.reads
            .borrow()
            .iter()
            .copied()
            .filter(|&id| self.unseen.contains(&self.inner.samples[id].species_id))
            .collect()
    }

    pub fn reset(&self) {
        self.reads.borrow_mut().clear();
    }
}

impl SampleAccess for AuditedBundle<'_> {
    fn dims(&self) -> Dims {
        self.inner.dims
    }

    fn classes(&self) -> &[ClassRecord] {
        &self.inner.classes
    }

    fn seen_species(&self) -> &[usize] {
        &self.inner.splits.seen
    }

    fn unseen_species(&self) -> &[usize] {
        &self.inner.splits.unseen
    }

    fn sample_count(&self) -> usize {
        self.inner.samples.len()
    }

    fn sample_species(&self, id: usize) -> usize {
        self.inner.samples[id].species_id
    }

    fn visual(&self, id: usize) -> &[f64] {
        self.reads.borrow_mut().insert(id);
        &self.inner.samples[id].visual
    }
}
