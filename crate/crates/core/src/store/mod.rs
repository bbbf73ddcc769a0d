//! Offline store of compressed teacher features and teacher logits.
//!
//! Layout after the sealed 16-byte prefix (magic `HSKF`):
//!
//! ```text
//! header   teacher digest [32] | config JSON (u32 len) | dim u32 | num_classes u32
//!          | static mask count u8 | static masks | record count u64
//! index    (sample_id u64, offset u64) × record count, offsets increasing
//! records  sample_id u64 | seq_len u32 | pair count u8 | (l u8, g u8) × pairs
//!          | per pair: token count u16, delta-coded u16 positions
//!          | per pair and kept token, dynamic masks only: mask
//!          | value count u32 | f32 values | f32 logits × num_classes
//! ```
//!
//! A mask is a `ceil(d/8)`-byte bitset, or with the RLE flag a u16 run count
//! followed by u16 runs.

pub mod codec;

use std::collections::HashMap;
use std::fs::File;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::compress::{static_mask, CompressedHsk, CompressionConfig, HskPair, MaskKind, PairMasks, WidthMask};
use crate::container::{read_prefix, write_sealed, PREFIX_LEN};
use crate::error::{ensure, Error, Result};
use crate::transformer::Transformer;
use codec::{mask_bytes, pack_bits, rle_decode, rle_encode, unpack_bits};

pub const STORE_MAGIC: [u8; 4] = *b"HSKF";
const VERSION: u16 = 1;
const FLAG_RLE: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureRecord {
    pub sample_id: u64,
    pub hsk: CompressedHsk,
    pub teacher_logits: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StoreHeader {
    pub teacher_digest: [u8; 32],
    pub config: CompressionConfig,
    pub dim: usize,
    pub num_classes: usize,
    pub rle_masks: bool,
    /// One shared mask per kept layer pair for static width strategies; empty for `Mag`.
    pub static_masks: Vec<WidthMask>,
}

impl StoreHeader {
    pub fn new(teacher_digest: [u8; 32], config: CompressionConfig, dim: usize, num_classes: usize, rle_masks: bool) -> Result<Self> {
        let n_w = config.kept_width(dim)?;
        let static_masks = match static_mask(config.width_strategy, dim, n_w, config.seed)? {
            Some(m) => vec![m; config.n_depth],
            None => Vec::new(),
        };
        Ok(Self { teacher_digest, config, dim, num_classes, rle_masks, static_masks })
    }
}

/// SHA-256 over the teacher's config and raw parameter bytes.
pub fn teacher_digest(teacher: &Transformer<f32>) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(teacher.config()).expect("config serializes"));
    for t in teacher.params() {
        for v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().into()
}

/// Byte totals by category; `total` equals the file size.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SizeReport {
    pub prefix_bytes: u64,
    /// Digest, config and scalar header fields.
    pub header_bytes: u64,
    pub header_masks_bytes: u64,
    pub index_bytes: u64,
    /// Sample ids, lengths, layer pairs and value counts.
    pub record_meta_bytes: u64,
    /// Token counts and positions.
    pub indices_bytes: u64,
    /// Per-record (dynamic) masks.
    pub masks_bytes: u64,
    pub values_bytes: u64,
    pub logits_bytes: u64,
    pub total: u64,
}

impl SizeReport {
    fn add_record(&mut self, r: &FeatureRecord, header: &StoreHeader) {
        let pairs = &r.hsk.pairs;
        self.record_meta_bytes += 8 + 4 + 1 + 2 * pairs.len() as u64 + 4;
        for p in pairs {
            self.indices_bytes += 2 + 2 * p.tokens.len() as u64;
            if let PairMasks::Dynamic(ms) = &p.masks {
                self.masks_bytes += ms.iter().map(|m| mask_bytes(&m.bits, header.rle_masks) as u64).sum::<u64>();
            }
            self.values_bytes += 4 * p.values.len() as u64;
        }
        self.logits_bytes += 4 * r.teacher_logits.len() as u64;
    }

    fn finish(mut self) -> Self {
        self.total = self.prefix_bytes
            + self.header_bytes
            + self.header_masks_bytes
            + self.index_bytes
            + self.record_meta_bytes
            + self.indices_bytes
            + self.masks_bytes
            + self.values_bytes
            + self.logits_bytes;
        self
    }
}

fn config_json(config: &CompressionConfig) -> Result<Vec<u8>> {
    Ok(serde_json::to_vec(config)?)
}

fn header_sizes(header: &StoreHeader, records: usize) -> Result<SizeReport> {
    Ok(SizeReport {
        prefix_bytes: PREFIX_LEN,
        header_bytes: 32 + 4 + config_json(&header.config)?.len() as u64 + 4 + 4 + 1 + 8,
        header_masks_bytes: header.static_masks.iter().map(|m| mask_bytes(&m.bits, header.rle_masks) as u64).sum(),
        index_bytes: 16 * records as u64,
        ..Default::default()
    })
}

/// Closed-form byte breakdown of the store `write_store` would produce.
pub fn size_report(header: &StoreHeader, records: &[FeatureRecord]) -> Result<SizeReport> {
    let mut report = header_sizes(header, records.len())?;
    for r in records {
        report.add_record(r, header);
    }
    Ok(report.finish())
}

fn record_len(r: &FeatureRecord, header: &StoreHeader) -> u64 {
    let mut s = SizeReport::default();
    s.add_record(r, header);
    s.finish().total
}

fn check_record(r: &FeatureRecord, header: &StoreHeader) -> Result<()> {
    let id = r.sample_id;
    ensure!(r.hsk.dim == header.dim, "record {id}: dim {} differs from store dim {}", r.hsk.dim, header.dim);
    ensure!(r.teacher_logits.len() == header.num_classes, "record {id}: {} logits for {} classes", r.teacher_logits.len(), header.num_classes);
    ensure!(r.hsk.pairs.len() == header.config.n_depth, "record {id}: {} pairs, config keeps {}", r.hsk.pairs.len(), header.config.n_depth);
    ensure!(r.hsk.seq_len <= u32::MAX as usize, "record {id}: sequence too long");
    let expect_width = header.config.kept_width(header.dim)?;
    for (k, p) in r.hsk.pairs.iter().enumerate() {
        ensure!(p.student_layer <= 255 && p.teacher_layer <= 255, "record {id}: layer index above 255");
        ensure!(p.tokens.len() <= u16::MAX as usize, "record {id}: too many tokens");
        ensure!(p.tokens.windows(2).all(|w| w[0] < w[1]), "record {id}: token positions not increasing");
        ensure!(p.tokens.last().is_none_or(|&t| t < r.hsk.seq_len && t <= u16::MAX as usize), "record {id}: token position out of range");
        let kept: usize = match (&p.masks, header.static_masks.get(k)) {
            (PairMasks::Static(m), Some(h)) => {
                ensure!(m == h, "record {id}: static mask differs from the store's");
                m.popcount() * p.tokens.len()
            }
            (PairMasks::Dynamic(ms), None) => {
                ensure!(ms.len() == p.tokens.len(), "record {id}: {} masks for {} tokens", ms.len(), p.tokens.len());
                ensure!(ms.iter().all(|m| m.bits.len() == header.dim && m.popcount() == expect_width), "record {id}: mask width mismatch");
                ms.iter().map(WidthMask::popcount).sum()
            }
            _ => return Err(Error::contract(format!("record {id}: mask kind does not match the width strategy"))),
        };
        ensure!(p.values.len() == kept, "record {id}: {} values for {kept} kept entries", p.values.len());
    }
    Ok(())
}

fn write_mask(w: &mut impl Write, m: &WidthMask, rle: bool) -> std::io::Result<()> {
    if rle {
        let runs = rle_encode(&m.bits);
        w.write_u16::<LittleEndian>(runs.len() as u16)?;
        for r in runs {
            w.write_u16::<LittleEndian>(r)?;
        }
        Ok(())
    } else {
        w.write_all(&pack_bits(&m.bits))
    }
}

fn read_mask(r: &mut impl Read, dim: usize, rle: bool, kind: MaskKind) -> Result<WidthMask> {
    let bits = if rle {
        let n = r.read_u16::<LittleEndian>()? as usize;
        let mut runs = vec![0u16; n];
        r.read_u16_into::<LittleEndian>(&mut runs)?;
        rle_decode(&runs, dim)?
    } else {
        let mut buf = vec![0u8; codec::bitset_len(dim)];
        r.read_exact(&mut buf)?;
        unpack_bits(&buf, dim)?
    };
    Ok(WidthMask { bits, kind })
}

fn write_record(w: &mut impl Write, r: &FeatureRecord, header: &StoreHeader) -> std::io::Result<()> {
    w.write_u64::<LittleEndian>(r.sample_id)?;
    w.write_u32::<LittleEndian>(r.hsk.seq_len as u32)?;
    w.write_u8(r.hsk.pairs.len() as u8)?;
    for p in &r.hsk.pairs {
        w.write_u8(p.student_layer as u8)?;
        w.write_u8(p.teacher_layer as u8)?;
    }
    for p in &r.hsk.pairs {
        w.write_u16::<LittleEndian>(p.tokens.len() as u16)?;
        let mut prev = 0;
        for &t in &p.tokens {
            w.write_u16::<LittleEndian>((t - prev) as u16)?;
            prev = t;
        }
    }
    for p in &r.hsk.pairs {
        if let PairMasks::Dynamic(ms) = &p.masks {
            for m in ms {
                write_mask(w, m, header.rle_masks)?;
            }
        }
    }
    w.write_u32::<LittleEndian>(r.hsk.num_values() as u32)?;
    for p in &r.hsk.pairs {
        for &v in &p.values {
            w.write_f32::<LittleEndian>(v)?;
        }
    }
    for &v in &r.teacher_logits {
        w.write_f32::<LittleEndian>(v)?;
    }
    Ok(())
}

/// Writes header, offset index and records; returns the file size.
pub fn write_store(path: &Path, header: &StoreHeader, records: &[FeatureRecord]) -> Result<u64> {
    let mut seen = std::collections::HashSet::new();
    for r in records {
        check_record(r, header)?;
        ensure!(seen.insert(r.sample_id), "duplicate sample id {}", r.sample_id);
    }
    ensure!(header.static_masks.len() <= 255, "too many static masks");
    let sizes = header_sizes(header, records.len())?;
    let mut offset = sizes.prefix_bytes + sizes.header_bytes + sizes.header_masks_bytes + sizes.index_bytes;
    let mut index = Vec::with_capacity(records.len());
    for r in records {
        index.push((r.sample_id, offset));
        offset += record_len(r, header);
    }
    let expected = offset;
    let json = config_json(&header.config)?;
    let flags = if header.rle_masks { FLAG_RLE } else { 0 };
    let written = write_sealed(path, STORE_MAGIC, VERSION, flags, |w| {
        w.write_all(&header.teacher_digest)?;
        w.write_u32::<LittleEndian>(json.len() as u32)?;
        w.write_all(&json)?;
        w.write_u32::<LittleEndian>(header.dim as u32)?;
        w.write_u32::<LittleEndian>(header.num_classes as u32)?;
        w.write_u8(header.static_masks.len() as u8)?;
        for m in &header.static_masks {
            write_mask(w, m, header.rle_masks)?;
        }
        w.write_u64::<LittleEndian>(records.len() as u64)?;
        for &(id, off) in &index {
            w.write_u64::<LittleEndian>(id)?;
            w.write_u64::<LittleEndian>(off)?;
        }
        for r in records {
            write_record(w, r, header)?;
        }
        Ok(())
    })?;
    ensure!(written == expected, "wrote {written} bytes, layout predicts {expected}");
    Ok(written)
}

/// A sealed store loaded into memory. Reads take `&self` and may run concurrently.
#[derive(Debug)]
pub struct FeatureStore {
    header: StoreHeader,
    bytes: Vec<u8>,
    index: Vec<(u64, u64)>,
    by_id: HashMap<u64, usize>,
}

fn format_eof(e: Error) -> Error {
    match e {
        Error::Io(io) => crate::container::eof_as_format(io),
        other => other,
    }
}

impl FeatureStore {
    pub fn open(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(bytes)
    }

    pub fn from_bytes(bytes: Vec<u8>) -> Result<Self> {
        let mut c = Cursor::new(bytes.as_slice());
        let prefix = read_prefix(&mut c, STORE_MAGIC, VERSION)?;
        let (header, index) = Self::read_header(&mut c, prefix.flags).map_err(format_eof)?;
        let data_start = c.position();
        let mut by_id = HashMap::with_capacity(index.len());
        let mut prev = data_start;
        for (k, &(id, off)) in index.iter().enumerate() {
            if off < prev || (k > 0 && off == prev) || off >= bytes.len() as u64 {
                return Err(Error::format(format!("offset {off} of record {id} out of order or range")));
            }
            if by_id.insert(id, k).is_some() {
                return Err(Error::format(format!("sample id {id} indexed twice")));
            }
            prev = off;
        }
        if index.is_empty() && data_start != bytes.len() as u64 {
            return Err(Error::format("trailing bytes after an empty index"));
        }
        if index.first().is_some_and(|&(_, off)| off != data_start) {
            return Err(Error::format("first record does not follow the index"));
        }
        Ok(Self { header, bytes, index, by_id })
    }

    fn read_header(c: &mut Cursor<&[u8]>, flags: u8) -> Result<(StoreHeader, Vec<(u64, u64)>)> {
        if flags & !FLAG_RLE != 0 {
            return Err(Error::format(format!("unknown flags {flags:#x}")));
        }
        let rle_masks = flags & FLAG_RLE != 0;
        let mut teacher_digest = [0u8; 32];
        c.read_exact(&mut teacher_digest)?;
        let n = c.read_u32::<LittleEndian>()? as usize;
        let remaining = c.get_ref().len() - c.position() as usize;
        if n > remaining {
            return Err(Error::format("config length exceeds file"));
        }
        let mut json = vec![0u8; n];
        c.read_exact(&mut json)?;
        let config: CompressionConfig =
            serde_json::from_slice(&json).map_err(|e| Error::format(format!("store config: {e}")))?;
        let dim = c.read_u32::<LittleEndian>()? as usize;
        let num_classes = c.read_u32::<LittleEndian>()? as usize;
        let masks = c.read_u8()? as usize;
        let static_masks = (0..masks).map(|_| read_mask(c, dim, rle_masks, MaskKind::Static)).collect::<Result<Vec<_>>>()?;
        let count = c.read_u64::<LittleEndian>()?;
        let remaining = (c.get_ref().len() as u64 - c.position()) / 16;
        if count > remaining {
            return Err(Error::format(format!("index of {count} records exceeds file")));
        }
        let index = (0..count)
            .map(|_| Ok((c.read_u64::<LittleEndian>()?, c.read_u64::<LittleEndian>()?)))
            .collect::<std::io::Result<Vec<_>>>()?;
        let header = StoreHeader { teacher_digest, config, dim, num_classes, rle_masks, static_masks };
        Ok((header, index))
    }

    pub fn header(&self) -> &StoreHeader {
        &self.header
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    /// Sample ids in file order.
    pub fn sample_ids(&self) -> impl Iterator<Item = u64> + '_ {
        self.index.iter().map(|&(id, _)| id)
    }

    pub fn file_len(&self) -> u64 {
        self.bytes.len() as u64
    }

    pub fn read_record(&self, sample_id: u64) -> Result<FeatureRecord> {
        let k = *self.by_id.get(&sample_id).ok_or(Error::NotFound(sample_id))?;
        let start = self.index[k].1 as usize;
        let end = self.index.get(k + 1).map_or(self.bytes.len(), |&(_, off)| off as usize);
        let mut c = Cursor::new(&self.bytes[start..end]);
        let r = self.parse_record(&mut c).map_err(format_eof)?;
        if r.sample_id != sample_id {
            return Err(Error::format(format!("index points at record {} for id {sample_id}", r.sample_id)));
        }
        if c.position() as usize != end - start {
            return Err(Error::format(format!("record {sample_id} has {} trailing bytes", end - start - c.position() as usize)));
        }
        Ok(r)
    }

    fn parse_record(&self, c: &mut Cursor<&[u8]>) -> Result<FeatureRecord> {
        let h = &self.header;
        let sample_id = c.read_u64::<LittleEndian>()?;
        let seq_len = c.read_u32::<LittleEndian>()? as usize;
        let n_pairs = c.read_u8()? as usize;
        if !h.static_masks.is_empty() && n_pairs != h.static_masks.len() {
            return Err(Error::format(format!("record {sample_id}: {n_pairs} pairs, header has {} masks", h.static_masks.len())));
        }
        let layers: Vec<(usize, usize)> =
            (0..n_pairs).map(|_| Ok((c.read_u8()? as usize, c.read_u8()? as usize))).collect::<std::io::Result<_>>()?;
        let mut tokens = Vec::with_capacity(n_pairs);
        for _ in 0..n_pairs {
            let n = c.read_u16::<LittleEndian>()? as usize;
            let mut pos = Vec::with_capacity(n);
            let mut prev = 0usize;
            for i in 0..n {
                let delta = c.read_u16::<LittleEndian>()? as usize;
                if i > 0 && delta == 0 {
                    return Err(Error::format(format!("record {sample_id}: repeated token position")));
                }
                prev += delta;
                if prev >= seq_len {
                    return Err(Error::format(format!("record {sample_id}: token {prev} beyond length {seq_len}")));
                }
                pos.push(prev);
            }
            tokens.push(pos);
        }
        let mut masks = Vec::with_capacity(n_pairs);
        for (k, toks) in tokens.iter().enumerate() {
            masks.push(match h.static_masks.get(k) {
                Some(m) => PairMasks::Static(m.clone()),
                None => PairMasks::Dynamic(
                    (0..toks.len()).map(|_| read_mask(c, h.dim, h.rle_masks, MaskKind::Dynamic)).collect::<Result<_>>()?,
                ),
            });
        }
        let value_count = c.read_u32::<LittleEndian>()? as usize;
        let expected: usize = masks
            .iter()
            .zip(&tokens)
            .map(|(m, t)| (0..t.len()).map(|i| m.for_token(i).popcount()).sum::<usize>())
            .sum();
        if value_count != expected {
            return Err(Error::format(format!("record {sample_id}: {value_count} values, masks keep {expected}")));
        }
        let mut pairs = Vec::with_capacity(n_pairs);
        for ((&(l, g), toks), m) in layers.iter().zip(tokens).zip(masks) {
            let n: usize = (0..toks.len()).map(|i| m.for_token(i).popcount()).sum();
            let mut values = vec![0f32; n];
            c.read_f32_into::<LittleEndian>(&mut values)?;
            pairs.push(HskPair { student_layer: l, teacher_layer: g, tokens: toks, masks: m, values });
        }
        let mut teacher_logits = vec![0f32; h.num_classes];
        c.read_f32_into::<LittleEndian>(&mut teacher_logits)?;
        Ok(FeatureRecord { sample_id, hsk: CompressedHsk { seq_len, dim: h.dim, pairs }, teacher_logits })
    }

    /// Byte breakdown measured from the stored records.
    pub fn size_report(&self) -> Result<SizeReport> {
        let mut report = header_sizes(&self.header, self.index.len())?;
        for id in self.sample_ids() {
            report.add_record(&self.read_record(id)?, &self.header);
        }
        Ok(report.finish())
    }
}
