//! Chunk-locked central parameter store for asynchronous learners.
//!
//! The parameter vector is split into `C` contiguous chunks of near-equal
//! size. Each chunk carries its slice of the central values, the central
//! update-rule moments, and a version counter, all behind one mutex. Writers
//! overwrite a chunk's values (no additive deltas), so a reader always sees
//! some complete committed write. Chunks are always visited in index order.

use std::ops::Range;
use std::sync::{Mutex, MutexGuard};

use crate::error::{config_err, shape_err, Result};
use crate::optim::{adam_apply, async_central_apply, rmsprop_apply, AsyncAccumulators, CentralSlice, Optimizer, UpdateRule};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Chunk<T> {
    pub theta: Vec<T>,
    /// Central first moment (Adam only).
    pub m: Option<Vec<T>>,
    pub v: Vec<T>,
    /// Committed writes so far.
    pub version: u64,
}

pub struct CentralStore<T> {
    chunks: Vec<Mutex<Chunk<T>>>,
    ranges: Vec<Range<usize>>,
    rule: UpdateRule,
    len: usize,
}

/// Equal split of `0..len` into `chunks` ranges; earlier ranges take the
/// remainder.
pub fn chunk_ranges(len: usize, chunks: usize) -> Vec<Range<usize>> {
    let base = len / chunks;
    let extra = len % chunks;
    let mut start = 0;
    (0..chunks)
        .map(|c| {
            let size = base + usize::from(c < extra);
            let r = start..start + size;
            start += size;
            r
        })
        .collect()
}

impl<T: Scalar> CentralStore<T> {
    pub fn new(params: &[T], rule: UpdateRule, chunks: usize) -> Result<Self> {
        if chunks == 0 || chunks > params.len() {
            return config_err(format!("cannot split {} parameters into {chunks} chunks", params.len()));
        }
        let ranges = chunk_ranges(params.len(), chunks);
        let chunks = ranges
            .iter()
            .map(|r| {
                Mutex::new(Chunk {
                    theta: params[r.clone()].to_vec(),
                    m: matches!(rule, UpdateRule::Adam(_)).then(|| vec![T::zero(); r.len()]),
                    v: vec![T::zero(); r.len()],
                    version: 0,
                })
            })
            .collect();
        Ok(CentralStore {
            chunks,
            ranges,
            rule,
            len: params.len(),
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn num_chunks(&self) -> usize {
        self.chunks.len()
    }

    pub fn ranges(&self) -> &[Range<usize>] {
        &self.ranges
    }

    pub fn rule(&self) -> UpdateRule {
        self.rule
    }

    fn lock(&self, c: usize) -> MutexGuard<'_, Chunk<T>> {
        // A panicking writer cannot leave a chunk half-written: every write
        // below completes before the guard drops, so poison is ignorable.
        self.chunks[c].lock().unwrap_or_else(|e| e.into_inner())
    }

    fn check(&self, what: &str, len: usize) -> Result<()> {
        if len != self.len {
            return shape_err(format!("{what} has length {len}, store holds {}", self.len));
        }
        Ok(())
    }

    pub fn versions(&self) -> Vec<u64> {
        (0..self.num_chunks()).map(|c| self.lock(c).version).collect()
    }

    /// Copies the central values into `local`; returns the versions read.
    pub fn pull(&self, local: &mut [T]) -> Result<Vec<u64>> {
        self.check("pull target", local.len())?;
        Ok(self
            .ranges
            .iter()
            .enumerate()
            .map(|(c, r)| {
                let chunk = self.lock(c);
                local[r.clone()].copy_from_slice(&chunk.theta);
                chunk.version
            })
            .collect())
    }

    pub fn snapshot(&self) -> (Vec<T>, Vec<u64>) {
        let mut out = vec![T::zero(); self.len];
        let versions = self.pull(&mut out).expect("length matches by construction");
        (out, versions)
    }

    /// One chunk's contents and version.
    pub fn read_chunk(&self, c: usize) -> Chunk<T> {
        self.lock(c).clone()
    }

    /// Runs `write` on chunk `c` under its lock and commits a new version.
    pub fn write_chunk(&self, c: usize, write: impl FnOnce(&mut Chunk<T>)) -> u64 {
        let mut chunk = self.lock(c);
        write(&mut chunk);
        chunk.version += 1;
        chunk.version
    }

    /// Applies one update-rule step with a precomputed gradient directly to
    /// the central values and moments, chunk by chunk, and copies each
    /// committed chunk back into `local`. `t` is the caller's Adam step count
    /// (already incremented). Returns the applied step.
    pub fn async_step(&self, local: &mut [T], grad: &[T], t: u64) -> Result<Vec<T>> {
        self.check("local params", local.len())?;
        self.check("gradient", grad.len())?;
        let mut step = vec![T::zero(); self.len];
        for (c, r) in self.ranges.iter().enumerate() {
            let mut guard = self.lock(c);
            let chunk = &mut *guard;
            let g = &grad[r.clone()];
            let s = &mut step[r.clone()];
            match &self.rule {
                UpdateRule::Adam(h) => {
                    let m = chunk.m.as_mut().expect("adam chunks carry m");
                    adam_apply(h, t, &mut chunk.theta, m, &mut chunk.v, g, Some(s));
                }
                UpdateRule::RmsProp(h) => rmsprop_apply(h, &mut chunk.theta, &mut chunk.v, g, Some(s)),
            }
            chunk.version += 1;
            local[r.clone()].copy_from_slice(&chunk.theta);
        }
        Ok(step)
    }

    /// Folds multi-step accumulators into the central state, then sets the
    /// local values and moments to the new central ones and clears `acc`.
    pub fn sync_accumulated(&self, local: &mut [T], optimizer: &mut Optimizer<T>, acc: &mut AsyncAccumulators<T>) -> Result<()> {
        self.check("local params", local.len())?;
        self.check("accumulators", acc.len())?;
        if optimizer.rule() != self.rule {
            return config_err("local and central update rules differ");
        }
        let (b1, b2) = (self.rule.first_decay(), self.rule.second_decay());
        let (mut lm, lv) = optimizer.moments_mut();
        for (c, r) in self.ranges.iter().enumerate() {
            let mut guard = self.lock(c);
            let chunk = &mut *guard;
            async_central_apply(
                CentralSlice {
                    theta: &mut chunk.theta,
                    m: chunk.m.as_deref_mut(),
                    v: &mut chunk.v,
                },
                acc,
                r.start,
                b1,
                b2,
            )?;
            chunk.version += 1;
            local[r.clone()].copy_from_slice(&chunk.theta);
            if let (Some(lm), Some(cm)) = (lm.as_deref_mut(), chunk.m.as_ref()) {
                lm[r.clone()].copy_from_slice(cm);
            }
            lv[r.clone()].copy_from_slice(&chunk.v);
        }
        acc.reset();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::AdamHyper;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ranges_partition_exactly() {
        for len in 1..40 {
            for c in 1..=len.min(7) {
                let r = chunk_ranges(len, c);
                assert_eq!(r.len(), c);
                assert_eq!(r[0].start, 0);
                assert_eq!(r[c - 1].end, len);
                assert!(r.windows(2).all(|w| w[0].end == w[1].start));
                let (min, max) = (r.iter().map(|x| x.len()).min().unwrap(), r.iter().map(|x| x.len()).max().unwrap());
                assert!(max - min <= 1);
            }
        }
        assert!(CentralStore::new(&[1.0f64], UpdateRule::Adam(AdamHyper::new(0.1)), 2).is_err());
    }

    #[test]
    fn sequential_learners_equal_sequential_application() {
        let rule = UpdateRule::Adam(AdamHyper::new(0.01));
        let init = vec![0.5f64; 10];
        let store = CentralStore::new(&init, rule, 3).unwrap();
        let mut reference = Optimizer::new(rule, 10);
        let mut ref_params = init.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (mut a, mut b) = (init.clone(), init.clone());
        for k in 1..=20u64 {
            let g: Vec<f64> = (0..10).map(|_| rng.random_range(-1.0..1.0)).collect();
            let local = if k % 2 == 0 { &mut a } else { &mut b };
            store.async_step(local, &g, k).unwrap();
            reference.step(&mut ref_params, &g).unwrap();
            assert_eq!(local, &ref_params);
        }
        assert_eq!(store.versions(), vec![20; 3]);
    }

    #[test]
    fn multi_step_single_learner_matches_adam() {
        let rule = UpdateRule::Adam(AdamHyper::new(0.05));
        let init = vec![0.1f64, -0.2, 0.3, 0.4, -0.5];
        let store = CentralStore::new(&init, rule, 2).unwrap();
        let mut local = init.clone();
        let mut opt = Optimizer::new(rule, 5);
        let mut acc = AsyncAccumulators::new(5);
        let mut reference = Optimizer::new(rule, 5);
        let mut ref_params = init.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for round in 0..5 {
            for _ in 0..4 {
                let g: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
                let s = opt.step(&mut local, &g).unwrap();
                acc.accumulate(&g, &s, 0.9, 0.999).unwrap();
                reference.step(&mut ref_params, &g).unwrap();
            }
            store.sync_accumulated(&mut local, &mut opt, &mut acc).unwrap();
            assert_eq!(acc.n, 0);
            let (central, versions) = store.snapshot();
            assert_eq!(versions, vec![round + 1; 2]);
            for (x, y) in central.iter().zip(&ref_params) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
