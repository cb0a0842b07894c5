//! Flat parameter vector partitioned into named blocks.

use std::collections::BTreeMap;
use std::ops::Range;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Owner {
    Shared,
    Task(usize),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Block {
    pub name: String,
    pub offset: usize,
    pub len: usize,
    pub owner: Owner,
    pub frozen: bool,
}

impl Block {
    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len
    }
}

/// Parameters, block table and per-task snapshots.
///
/// Blocks are appended, so they tile the vector in creation order. A
/// frozen block is excluded from [`frozen_mask`](Self::frozen_mask)
/// updates by every trainer; nothing here writes into it either.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore {
    params: Vec<f64>,
    blocks: Vec<Block>,
    snapshots: BTreeMap<usize, Vec<f64>>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn snapshots(&self) -> &BTreeMap<usize, Vec<f64>> {
        &self.snapshots
    }

    /// Append a block and return its offset.
    pub fn push_block(&mut self, name: impl Into<String>, values: Vec<f64>, owner: Owner) -> Result<usize> {
        let name = name.into();
        if self.blocks.iter().any(|b| b.name == name) {
            return Err(Error::Layout(format!("duplicate block {name:?}")));
        }
        let offset = self.params.len();
        self.blocks.push(Block {
            name,
            offset,
            len: values.len(),
            owner,
            frozen: false,
        });
        self.params.extend(values);
        Ok(offset)
    }

    pub fn block(&self, name: &str) -> Result<&Block> {
        self.blocks
            .iter()
            .find(|b| b.name == name)
            .ok_or_else(|| Error::UnknownBlock(name.to_string()))
    }

    pub fn block_values(&self, name: &str) -> Result<&[f64]> {
        let b = self.block(name)?;
        Ok(&self.params[b.range()])
    }

    pub fn set_frozen(&mut self, name: &str, frozen: bool) -> Result<()> {
        let b = self
            .blocks
            .iter_mut()
            .find(|b| b.name == name)
            .ok_or_else(|| Error::UnknownBlock(name.to_string()))?;
        b.frozen = frozen;
        Ok(())
    }

    pub fn freeze_all(&mut self) {
        for b in &mut self.blocks {
            b.frozen = true;
        }
    }

    /// `true` for every coordinate inside a frozen block.
    pub fn frozen_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.params.len()];
        for b in self.blocks.iter().filter(|b| b.frozen) {
            mask[b.range()].iter_mut().for_each(|m| *m = true);
        }
        mask
    }

    /// Copy `values` into the unfrozen coordinates of the vector.
    /// Frozen coordinates must match bitwise; a mismatch is an error.
    pub fn commit(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::Layout(format!(
                "commit of {} values into {} parameters",
                values.len(),
                self.params.len()
            )));
        }
        for b in self.blocks.iter().filter(|b| b.frozen) {
            let r = b.range();
            if self.params[r.clone()]
                .iter()
                .zip(&values[r])
                .any(|(a, v)| a.to_bits() != v.to_bits())
            {
                return Err(Error::Layout(format!("write into frozen block {:?}", b.name)));
            }
        }
        self.params.copy_from_slice(values);
        Ok(())
    }

    /// Overwrite one block, which must not be frozen.
    pub fn write_block(&mut self, name: &str, values: &[f64]) -> Result<()> {
        let b = self.block(name)?.clone();
        if b.frozen {
            return Err(Error::Layout(format!("write into frozen block {:?}", b.name)));
        }
        if values.len() != b.len {
            return Err(Error::Layout(format!("block {:?} has {} entries, got {}", b.name, b.len, values.len())));
        }
        self.params[b.range()].copy_from_slice(values);
        Ok(())
    }

    pub fn record_snapshot(&mut self, task: usize) -> Result<()> {
        if self.snapshots.contains_key(&task) {
            return Err(Error::SnapshotExists(task));
        }
        self.snapshots.insert(task, self.params.clone());
        Ok(())
    }

    pub fn snapshot(&self, task: usize) -> Result<&[f64]> {
        self.snapshots
            .get(&task)
            .map(Vec::as_slice)
            .ok_or(Error::MissingSnapshot(task))
    }

    /// Snapshot zero-padded to the current layout. Blocks created after the
    /// snapshot did not exist yet and enter as zeros.
    pub fn snapshot_padded(&self, task: usize) -> Result<Vec<f64>> {
        let mut v = self.snapshot(task)?.to_vec();
        v.resize(self.params.len(), 0.0);
        Ok(v)
    }

    /// Coordinate ranges of every block owned by `owner`.
    pub fn ranges_of(&self, owner: Owner) -> Vec<Range<usize>> {
        self.blocks.iter().filter(|b| b.owner == owner).map(Block::range).collect()
    }

    pub(crate) fn from_parts(
        params: Vec<f64>,
        blocks: Vec<Block>,
        snapshots: BTreeMap<usize, Vec<f64>>,
    ) -> Result<Self> {
        let mut expected = 0;
        for b in &blocks {
            if b.offset != expected {
                return Err(Error::Format(format!("block {:?} does not tile the vector", b.name)));
            }
            expected += b.len;
        }
        if expected != params.len() {
            return Err(Error::Format(format!(
                "blocks cover {expected} of {} parameters",
                params.len()
            )));
        }
        Ok(Self {
            params,
            blocks,
            snapshots,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blocks_tile_in_order() {
        let mut s = ParameterStore::new();
        assert_eq!(s.push_block("a", vec![1.0; 3], Owner::Shared).unwrap(), 0);
        assert_eq!(s.push_block("b", vec![2.0; 2], Owner::Task(1)).unwrap(), 3);
        assert_eq!(s.len(), 5);
        assert!(s.push_block("a", vec![], Owner::Shared).is_err());
        assert_eq!(s.ranges_of(Owner::Task(1)), vec![3..5]);
    }

    #[test]
    fn frozen_blocks_reject_writes() {
        let mut s = ParameterStore::new();
        s.push_block("a", vec![1.0; 2], Owner::Shared).unwrap();
        s.push_block("b", vec![0.0; 2], Owner::Task(1)).unwrap();
        s.set_frozen("a", true).unwrap();
        assert_eq!(s.frozen_mask(), vec![true, true, false, false]);
        assert!(s.commit(&[1.0, 1.5, 3.0, 3.0]).is_err());
        s.commit(&[1.0, 1.0, 3.0, 3.0]).unwrap();
        assert!(s.write_block("a", &[0.0, 0.0]).is_err());
        s.write_block("b", &[4.0, 5.0]).unwrap();
        assert_eq!(s.params(), &[1.0, 1.0, 4.0, 5.0]);
    }

    #[test]
    fn snapshot_once() {
        let mut s = ParameterStore::new();
        s.push_block("a", vec![1.0], Owner::Task(1)).unwrap();
        s.record_snapshot(1).unwrap();
        assert!(matches!(s.record_snapshot(1), Err(Error::SnapshotExists(1))));
        s.push_block("b", vec![7.0], Owner::Task(2)).unwrap();
        assert_eq!(s.snapshot_padded(1).unwrap(), vec![1.0, 0.0]);
        assert!(matches!(s.snapshot(2), Err(Error::MissingSnapshot(2))));
    }
}
