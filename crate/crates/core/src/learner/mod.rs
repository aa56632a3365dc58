//! Training topologies: one learner, `K` learners averaging gradients in
//! lock-step, or `K` asynchronous learners sharing a chunk-locked store.

mod run;
pub mod store;
mod unit;

use std::sync::{Condvar, Mutex};

use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;

pub use run::{run_async, run_experiment, RunOutcome, RunRecords, SecondaryLearner, Trainer};
pub use store::{chunk_ranges, CentralStore, Chunk};
pub use unit::{CycleReport, LearnerUnit, PullRecord};

/// How a learner unit's gradients reach its parameters.
#[derive(Clone, Copy)]
pub enum Link<'a> {
    /// Apply with the unit's own optimizer.
    Local,
    /// Average with the other units of a [`Reducer`], then apply locally.
    Sync { reducer: &'a Reducer, rank: usize },
    /// Update a shared [`CentralStore`].
    Async {
        store: &'a CentralStore<f64>,
        local_steps: usize,
        pull_horizon: Option<usize>,
    },
}

/// Elementwise mean with a fixed pairwise summation tree over the inputs, so
/// the result is independent of thread timing.
pub fn allreduce_mean<T: Scalar>(grads: &[&[T]]) -> Result<Vec<T>> {
    let Some(first) = grads.first() else {
        return shape_err("allreduce needs at least one gradient");
    };
    if grads.iter().any(|g| g.len() != first.len()) {
        return shape_err("allreduce gradients differ in length");
    }
    fn tree<T: Scalar>(grads: &[&[T]]) -> Vec<T> {
        if grads.len() == 1 {
            return grads[0].to_vec();
        }
        let mid = grads.len() / 2;
        let mut left = tree(&grads[..mid]);
        let right = tree(&grads[mid..]);
        for (l, r) in left.iter_mut().zip(right) {
            *l += r;
        }
        left
    }
    let k = T::lit(grads.len() as f64);
    let mut sum = tree(grads);
    for x in sum.iter_mut() {
        *x /= k;
    }
    Ok(sum)
}

struct ReduceState {
    slots: Vec<Option<Vec<f64>>>,
    arrived: usize,
    generation: u64,
    result: Option<std::result::Result<std::sync::Arc<Vec<f64>>, String>>,
    poisoned: bool,
}

/// Rendezvous point for `K` synchronous learners. Each call to
/// [`Reducer::reduce`] blocks until all ranks have contributed, then every
/// rank receives the same averaged gradient.
pub struct Reducer {
    k: usize,
    state: Mutex<ReduceState>,
    cv: Condvar,
}

impl Reducer {
    pub fn new(k: usize) -> Self {
        Reducer {
            k: k.max(1),
            state: Mutex::new(ReduceState {
                slots: vec![None; k.max(1)],
                arrived: 0,
                generation: 0,
                result: None,
                poisoned: false,
            }),
            cv: Condvar::new(),
        }
    }

    pub fn learners(&self) -> usize {
        self.k
    }

    /// Releases every waiting rank with an error; used when a learner fails.
    pub fn poison(&self) {
        let mut s = self.state.lock().unwrap_or_else(|e| e.into_inner());
        s.poisoned = true;
        self.cv.notify_all();
    }

    pub fn reduce(&self, rank: usize, grad: &[f64]) -> Result<Vec<f64>> {
        if self.k == 1 {
            return Ok(grad.to_vec());
        }
        let mut s = self.state.lock().unwrap_or_else(|e| e.into_inner());
        if s.poisoned {
            return Err(Error::Worker("a peer learner failed".into()));
        }
        let gen = s.generation;
        s.slots[rank] = Some(grad.to_vec());
        s.arrived += 1;
        if s.arrived == self.k {
            let slots: Vec<Vec<f64>> = s.slots.iter_mut().map(|x| x.take().expect("all ranks posted")).collect();
            let refs: Vec<&[f64]> = slots.iter().map(Vec::as_slice).collect();
            s.result = Some(allreduce_mean(&refs).map(std::sync::Arc::new).map_err(|e| e.to_string()));
            s.arrived = 0;
            s.generation += 1;
            self.cv.notify_all();
        } else {
            while s.generation == gen && !s.poisoned {
                s = self.cv.wait(s).unwrap_or_else(|e| e.into_inner());
            }
            if s.generation == gen {
                return Err(Error::Worker("a peer learner failed".into()));
            }
        }
        // The result stays valid until the next round completes, which needs
        // this rank to contribute again.
        match s.result.as_ref().expect("round completed") {
            Ok(v) => Ok(v.as_ref().clone()),
            Err(e) => shape_err(e.clone()),
        }
    }
}
