use std::collections::BTreeMap;
use std::mem::size_of;

use super::Element;
use crate::error::{Error, Result};

/// Recycling allocator for graph buffers with a hard byte budget.
///
/// Buffers handed out by [`Arena::alloc`] are zero-filled. Returning them
/// through [`Arena::release`] puts them on a free list keyed by length, so
/// replaying the same sequence of allocations reuses the same blocks and
/// never raises the high-water mark.
#[derive(Debug)]
pub struct Arena<T: Element> {
    capacity: usize,
    outstanding: usize,
    high_water: usize,
    free: BTreeMap<usize, Vec<Vec<T>>>,
}

impl<T: Element> Arena<T> {
    pub fn new(capacity_bytes: usize) -> Self {
        Arena {
            capacity: capacity_bytes,
            outstanding: 0,
            high_water: 0,
            free: BTreeMap::new(),
        }
    }

    pub fn unbounded() -> Self {
        Self::new(usize::MAX)
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn outstanding(&self) -> usize {
        self.outstanding
    }

    pub fn high_water(&self) -> usize {
        self.high_water
    }

    /// Bytes sitting on the free list.
    pub fn pooled(&self) -> usize {
        self.free
            .iter()
            .map(|(len, blocks)| len * blocks.len() * size_of::<T>())
            .sum()
    }

    pub fn alloc(&mut self, len: usize) -> Result<Vec<T>> {
        let bytes = len * size_of::<T>();
        if self.outstanding.saturating_add(bytes) > self.capacity {
            return Err(Error::Capacity {
                requested: bytes,
                outstanding: self.outstanding,
                capacity: self.capacity,
            });
        }
        let block = match self.free.get_mut(&len).and_then(|v| v.pop()) {
            Some(mut b) => {
                b.fill(T::zero());
                b
            }
            None => vec![T::zero(); len],
        };
        self.outstanding += bytes;
        self.high_water = self.high_water.max(self.outstanding);
        Ok(block)
    }

    pub fn release(&mut self, block: Vec<T>) {
        let bytes = block.len() * size_of::<T>();
        self.outstanding = self.outstanding.saturating_sub(bytes);
        if !block.is_empty() {
            self.free.entry(block.len()).or_default().push(block);
        }
    }

    /// Forget all outstanding allocations. Blocks not handed back through
    /// `release` are simply dropped by their owners.
    pub fn reset(&mut self) {
        self.outstanding = 0;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn budget_is_enforced() {
        let mut a = Arena::<f32>::new(64);
        let x = a.alloc(8).unwrap();
        let y = a.alloc(8).unwrap();
        assert_eq!(a.outstanding(), 64);
        assert!(matches!(a.alloc(1), Err(Error::Capacity { .. })));
        a.release(x);
        a.release(y);
        assert_eq!(a.outstanding(), 0);
        assert_eq!(a.high_water(), 64);
    }

    #[test]
    fn reuse_returns_zeroed_blocks() {
        let mut a = Arena::<f64>::unbounded();
        let mut x = a.alloc(4).unwrap();
        x.fill(3.0);
        a.release(x);
        let y = a.alloc(4).unwrap();
        assert_eq!(y, vec![0.0; 4]);
        assert_eq!(a.pooled(), 0);
    }

    #[test]
    fn reset_keeps_high_water() {
        let mut a = Arena::<f32>::unbounded();
        let _x = a.alloc(10).unwrap();
        a.reset();
        assert_eq!(a.outstanding(), 0);
        assert_eq!(a.high_water(), 40);
    }
}
