//! Bit-exact binary formats: label maps, probability maps and checkpoints.
//! Every integer and float is little-endian.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Arch, CascadeModel, MonolithicModel};
use crate::store::{Block, Owner, ParameterStore};
use crate::synth::LabelMap;

const LABEL_MAGIC: &[u8; 4] = b"CCLM";
const PROB_MAGIC: &[u8; 4] = b"CCPM";
const CHECKPOINT_MAGIC: &[u8; 4] = b"CCCK";
pub const FORMAT_VERSION: u16 = 1;

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(data: &'a [u8]) -> Self {
        Self { data, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.data.len() - self.pos < n {
            return Err(Error::Format(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::Format("length overflow".into()))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn header(&mut self, magic: &[u8; 4]) -> Result<()> {
        if self.take(4)? != magic {
            return Err(Error::Format("bad magic".into()));
        }
        let v = self.u16()?;
        if v != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported version {v}")));
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.data.len() {
            return Err(Error::Format(format!("{} trailing bytes", self.data.len() - self.pos)));
        }
        Ok(())
    }
}

fn put_f64s(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Header (magic, version, height, width, class count) then row-major
/// `u16` class ids.
pub fn encode_label_map(map: &LabelMap, class_count: u16) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 2 * map.labels.len());
    out.extend_from_slice(LABEL_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(map.height as u32).to_le_bytes());
    out.extend_from_slice(&(map.width as u32).to_le_bytes());
    out.extend_from_slice(&class_count.to_le_bytes());
    for l in &map.labels {
        out.extend_from_slice(&l.to_le_bytes());
    }
    out
}

pub fn decode_label_map(bytes: &[u8]) -> Result<(LabelMap, u16)> {
    let mut r = Reader::new(bytes);
    r.header(LABEL_MAGIC)?;
    let h = r.u32()? as usize;
    let w = r.u32()? as usize;
    let classes = r.u16()?;
    let labels = (0..h * w).map(|_| r.u16()).collect::<Result<Vec<_>>>()?;
    r.finish()?;
    if labels.iter().any(|&l| l > classes) {
        return Err(Error::Format("label above the declared class count".into()));
    }
    Ok((LabelMap::new(h, w, labels)?, classes))
}

/// Probability maps `[channels, h, w]`: the label-map header plus a
/// channel count, then `f64` values.
pub fn encode_prob_map(channels: usize, height: usize, width: usize, class_count: u16, data: &[f64]) -> Result<Vec<u8>> {
    if data.len() != channels * height * width {
        return Err(Error::Shape(format!("{} values for {channels}x{height}x{width}", data.len())));
    }
    let mut out = Vec::with_capacity(20 + 8 * data.len());
    out.extend_from_slice(PROB_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(height as u32).to_le_bytes());
    out.extend_from_slice(&(width as u32).to_le_bytes());
    out.extend_from_slice(&class_count.to_le_bytes());
    out.extend_from_slice(&(channels as u32).to_le_bytes());
    put_f64s(&mut out, data);
    Ok(out)
}

/// Returns `(channels, height, width, class_count, data)`.
pub fn decode_prob_map(bytes: &[u8]) -> Result<(usize, usize, usize, u16, Vec<f64>)> {
    let mut r = Reader::new(bytes);
    r.header(PROB_MAGIC)?;
    let h = r.u32()? as usize;
    let w = r.u32()? as usize;
    let classes = r.u16()?;
    let ch = r.u32()? as usize;
    let data = r.f64s(ch * h * w)?;
    r.finish()?;
    Ok((ch, h, w, classes, data))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Cascade,
    Monolithic,
}

/// A model of either kind as stored in a checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub enum Checkpoint {
    Cascade(CascadeModel),
    Monolithic(MonolithicModel),
}

impl Checkpoint {
    pub fn store(&self) -> &ParameterStore {
        match self {
            Checkpoint::Cascade(m) => &m.store,
            Checkpoint::Monolithic(m) => &m.store,
        }
    }
}

fn encode_store(out: &mut Vec<u8>, kind: ModelKind, arch: &Arch, seed: u64, store: &ParameterStore) {
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(match kind {
        ModelKind::Cascade => 0,
        ModelKind::Monolithic => 1,
    });
    for v in [arch.stem_channels, arch.feature_channels, arch.hidden, arch.baseline_hidden] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&seed.to_le_bytes());
    out.extend_from_slice(&(store.blocks().len() as u32).to_le_bytes());
    for b in store.blocks() {
        out.extend_from_slice(&(b.name.len() as u16).to_le_bytes());
        out.extend_from_slice(b.name.as_bytes());
        out.extend_from_slice(&(b.offset as u64).to_le_bytes());
        out.extend_from_slice(&(b.len as u64).to_le_bytes());
        match b.owner {
            Owner::Shared => {
                out.push(0);
                out.extend_from_slice(&0u64.to_le_bytes());
            }
            Owner::Task(t) => {
                out.push(1);
                out.extend_from_slice(&(t as u64).to_le_bytes());
            }
        }
        out.push(u8::from(b.frozen));
    }
    out.extend_from_slice(&(store.len() as u64).to_le_bytes());
    put_f64s(out, store.params());
    out.extend_from_slice(&(store.snapshots().len() as u32).to_le_bytes());
    for (&task, values) in store.snapshots() {
        out.extend_from_slice(&(task as u64).to_le_bytes());
        out.extend_from_slice(&(values.len() as u64).to_le_bytes());
        put_f64s(out, values);
    }
}

/// Versioned header, model kind, architecture, seed, block table, raw
/// parameters, then the snapshot registry.
pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    match ckpt {
        Checkpoint::Cascade(m) => encode_store(&mut out, ModelKind::Cascade, &m.arch, m.seed, &m.store),
        Checkpoint::Monolithic(m) => encode_store(&mut out, ModelKind::Monolithic, &m.arch, m.seed, &m.store),
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader::new(bytes);
    r.header(CHECKPOINT_MAGIC)?;
    let kind = match r.u8()? {
        0 => ModelKind::Cascade,
        1 => ModelKind::Monolithic,
        k => return Err(Error::Format(format!("model kind {k}"))),
    };
    let arch = Arch {
        stem_channels: r.u32()? as usize,
        feature_channels: r.u32()? as usize,
        hidden: r.u32()? as usize,
        baseline_hidden: r.u32()? as usize,
    };
    let seed = r.u64()?;
    let n_blocks = r.u32()? as usize;
    let mut blocks = Vec::with_capacity(n_blocks);
    for _ in 0..n_blocks {
        let n = r.u16()? as usize;
        let name = String::from_utf8(r.take(n)?.to_vec()).map_err(|_| Error::Format("block name".into()))?;
        let offset = r.u64()? as usize;
        let len = r.u64()? as usize;
        let owner = match (r.u8()?, r.u64()?) {
            (0, _) => Owner::Shared,
            (1, t) => Owner::Task(t as usize),
            (k, _) => return Err(Error::Format(format!("owner tag {k}"))),
        };
        let frozen = match r.u8()? {
            0 => false,
            1 => true,
            k => return Err(Error::Format(format!("frozen flag {k}"))),
        };
        blocks.push(Block {
            name,
            offset,
            len,
            owner,
            frozen,
        });
    }
    let n = r.u64()? as usize;
    let params = r.f64s(n)?;
    let n_snap = r.u32()? as usize;
    let mut snapshots = BTreeMap::new();
    for _ in 0..n_snap {
        let task = r.u64()? as usize;
        let len = r.u64()? as usize;
        snapshots.insert(task, r.f64s(len)?);
    }
    r.finish()?;
    let store = ParameterStore::from_parts(params, blocks, snapshots)?;
    Ok(match kind {
        ModelKind::Cascade => Checkpoint::Cascade(CascadeModel::from_parts(arch, store, seed)?),
        ModelKind::Monolithic => Checkpoint::Monolithic(MonolithicModel::from_parts(arch, store, seed)?),
    })
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_backbone;

    #[test]
    fn label_map_round_trip() {
        let map = LabelMap::new(2, 3, vec![0, 1, 2, 3, 0, 65]).unwrap();
        let bytes = encode_label_map(&map, 65);
        assert_eq!(&bytes[..4], b"CCLM");
        assert_eq!(bytes.len(), 16 + 12);
        let (back, classes) = decode_label_map(&bytes).unwrap();
        assert_eq!((back, classes), (map.clone(), 65));
        assert!(decode_label_map(&encode_label_map(&map, 3)).is_err());
        assert!(decode_label_map(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn prob_map_round_trip_is_bitwise() {
        let data = vec![0.1, 1.0 / 3.0, -0.0, f64::MIN_POSITIVE];
        let bytes = encode_prob_map(1, 2, 2, 4, &data).unwrap();
        let (ch, h, w, c, back) = decode_prob_map(&bytes).unwrap();
        assert_eq!((ch, h, w, c), (1, 2, 2, 4));
        assert!(back.iter().zip(&data).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn checkpoint_round_trip() {
        let arch = Arch::default();
        let (stem, tail) = init_backbone(&arch, 2);
        let mut m = CascadeModel::new(arch, stem, tail, 5).unwrap();
        m.instantiate_task(1, &[1, 2]).unwrap();
        m.store.record_snapshot(1).unwrap();
        m.instantiate_task(2, &[3]).unwrap();
        let ck = Checkpoint::Cascade(m);
        let bytes = encode_checkpoint(&ck);
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(encode_checkpoint(&back), bytes);

        let mut b = MonolithicModel::new(arch, 1).unwrap();
        b.add_classes(1, &[1, 2]).unwrap();
        let ck = Checkpoint::Monolithic(b);
        assert_eq!(decode_checkpoint(&encode_checkpoint(&ck)).unwrap(), ck);
    }
}
