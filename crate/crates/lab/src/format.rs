//! Binary containers: named-blob files (checkpoints, class embeddings),
//! datasets and embedding tables. All integers are little-endian `u32`,
//! all reals little-endian `f64`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use zslab_core::data::{Dataset, DatasetSpec, Item, Modality};
use zslab_core::encoder::Encoder;
use zslab_core::losses::ClassEmbeddingTable;
use zslab_core::metrics::{encode_items, Features};
use zslab_core::Tensor;

use crate::error::{FormatError, LabError, Result};

pub const CHECKPOINT_MAGIC: &[u8] = b"ZSLAB1";
pub const DATASET_MAGIC: &[u8] = b"ZSDS1";
pub const EMBEDDING_MAGIC: &[u8] = b"ZSEM1";

/// Compact JSON with object keys sorted.
pub fn canonical_json<T: Serialize>(value: &T) -> String {
    let v = serde_json::to_value(value).expect("serializable");
    serde_json::to_string(&v).expect("json value")
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{:02x}", b)).collect()
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| LabError::io(path, e))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| LabError::io(path, e))
}

/// Bounds-checked reader that reports byte offsets.
pub struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Cursor { bytes, pos: 0 }
    }

    pub fn pos(&self) -> usize {
        self.pos
    }

    pub fn take(&mut self, n: usize, what: &str) -> std::result::Result<&'a [u8], FormatError> {
        if self.bytes.len() - self.pos < n {
            return Err(FormatError::new(
                self.pos,
                format!("truncated {}: need {} bytes, {} left", what, n, self.bytes.len() - self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn magic(&mut self, magic: &[u8]) -> std::result::Result<(), FormatError> {
        let got = self.take(magic.len(), "magic")?;
        if got != magic {
            return Err(FormatError::new(0, format!("bad magic {:?}, expected {:?}", String::from_utf8_lossy(got), String::from_utf8_lossy(magic))));
        }
        Ok(())
    }

    pub fn u8(&mut self, what: &str) -> std::result::Result<u8, FormatError> {
        Ok(self.take(1, what)?[0])
    }

    pub fn u32(&mut self, what: &str) -> std::result::Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    pub fn f64s(&mut self, n: usize, what: &str) -> std::result::Result<Vec<f64>, FormatError> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| FormatError::new(self.pos, "length overflow"))?, what)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }

    /// Length-prefixed JSON document.
    pub fn json<T: DeserializeOwned>(&mut self, what: &str) -> std::result::Result<T, FormatError> {
        let len = self.u32(what)? as usize;
        let start = self.pos;
        let raw = self.take(len, what)?;
        serde_json::from_slice(raw).map_err(|e| FormatError::new(start, format!("{}: {}", what, e)))
    }

    pub fn finish(&self) -> std::result::Result<(), FormatError> {
        if self.pos != self.bytes.len() {
            return Err(FormatError::new(self.pos, format!("{} trailing bytes", self.bytes.len() - self.pos)));
        }
        Ok(())
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64s(out: &mut Vec<u8>, v: &[f64]) {
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

fn put_json(out: &mut Vec<u8>, json: &str) {
    put_u32(out, json.len() as u32);
    out.extend_from_slice(json.as_bytes());
}

/// A named row-major array.
#[derive(Debug, Clone, PartialEq)]
pub struct Blob {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Blob {
    pub fn from_tensor(name: impl Into<String>, t: &Tensor) -> Blob {
        Blob { name: name.into(), shape: t.shape().to_vec(), data: t.data().to_vec() }
    }
}

/// `magic, json header, u32 count, {u32 name_len, name, u32 ndim, u32 dims.., f64 data..}*`.
pub fn encode_blob_file<H: Serialize>(header: &H, blobs: &[Blob]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    put_json(&mut out, &canonical_json(header));
    put_u32(&mut out, blobs.len() as u32);
    for b in blobs {
        put_u32(&mut out, b.name.len() as u32);
        out.extend_from_slice(b.name.as_bytes());
        put_u32(&mut out, b.shape.len() as u32);
        for &d in &b.shape {
            put_u32(&mut out, d as u32);
        }
        put_f64s(&mut out, &b.data);
    }
    out
}

pub fn decode_blob_file<H: DeserializeOwned>(bytes: &[u8]) -> std::result::Result<(H, Vec<Blob>), FormatError> {
    let mut c = Cursor::new(bytes);
    c.magic(CHECKPOINT_MAGIC)?;
    let header = c.json("header")?;
    let count = c.u32("blob count")? as usize;
    let mut blobs = Vec::new();
    for _ in 0..count {
        let at = c.pos();
        let len = c.u32("name length")? as usize;
        let name = String::from_utf8(c.take(len, "name")?.to_vec())
            .map_err(|_| FormatError::new(at, "blob name is not UTF-8"))?;
        let ndim = c.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(ndim.min(8));
        for _ in 0..ndim {
            shape.push(c.u32("dimension")? as usize);
        }
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| FormatError::new(at, "shape overflow"))?;
        let data = c.f64s(n, "blob data")?;
        blobs.push(Blob { name, shape, data });
    }
    c.finish()?;
    Ok((header, blobs))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ClassFileHeader {
    kind: String,
    dim: usize,
}

/// Class-embedding table as a blob file with one `class.<id>` vector per class.
pub fn encode_class_table(table: &ClassEmbeddingTable) -> Vec<u8> {
    let blobs: Vec<Blob> = table.entries().iter().map(|(c, t)| Blob::from_tensor(format!("class.{}", c), t)).collect();
    encode_blob_file(&ClassFileHeader { kind: "class_embeddings".into(), dim: table.dim() }, &blobs)
}

pub fn decode_class_table(bytes: &[u8], temperature: f64) -> std::result::Result<ClassEmbeddingTable, FormatError> {
    let (header, blobs): (ClassFileHeader, _) = decode_blob_file(bytes)?;
    if header.kind != "class_embeddings" {
        return Err(FormatError::new(0, format!("expected class embeddings, found {}", header.kind)));
    }
    let mut entries = BTreeMap::new();
    for b in blobs {
        let id = b
            .name
            .strip_prefix("class.")
            .and_then(|s| s.parse::<u32>().ok())
            .ok_or_else(|| FormatError::new(0, format!("bad class blob name `{}`", b.name)))?;
        let t = Tensor::new(b.shape, b.data).map_err(|e| FormatError::new(0, e.to_string()))?;
        entries.insert(id, t);
    }
    ClassEmbeddingTable::new(entries, temperature).map_err(|e| FormatError::new(0, e.to_string()))
}

pub fn load_class_table(path: &Path, temperature: f64) -> Result<ClassEmbeddingTable> {
    decode_class_table(&read_file(path)?, temperature).map_err(|e| LabError::format(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetCounts {
    pub items: usize,
    pub photos: usize,
    pub sketches: usize,
    pub categories: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    pub spec: DatasetSpec,
    pub seed: u64,
    pub counts: DatasetCounts,
    pub crc32: u32,
}

/// `ZSDS1`, JSON header, then per item `id, category, instance` (u32),
/// modality byte, `size * size` reals. The header CRC-32 covers the records.
pub fn encode_dataset(dataset: &Dataset) -> Vec<u8> {
    let mut payload = Vec::new();
    for it in dataset.items() {
        put_u32(&mut payload, it.id);
        put_u32(&mut payload, it.category);
        put_u32(&mut payload, it.instance);
        payload.push(it.modality.code());
        put_f64s(&mut payload, it.image.data());
    }
    let header = DatasetHeader {
        spec: dataset.spec().clone(),
        seed: dataset.spec().seed,
        counts: DatasetCounts {
            items: dataset.items().len(),
            photos: dataset.count(Modality::Photo),
            sketches: dataset.count(Modality::Sketch),
            categories: dataset.categories().len(),
        },
        crc32: crc32fast::hash(&payload),
    };
    let mut out = Vec::with_capacity(payload.len() + 256);
    out.extend_from_slice(DATASET_MAGIC);
    put_json(&mut out, &canonical_json(&header));
    out.extend_from_slice(&payload);
    out
}

pub fn decode_dataset(bytes: &[u8]) -> std::result::Result<Dataset, FormatError> {
    let mut c = Cursor::new(bytes);
    c.magic(DATASET_MAGIC)?;
    let header: DatasetHeader = c.json("header")?;
    let size = header.spec.image_size;
    let start = c.pos();
    let record = 13 + 8 * size * size;
    let expected = header.counts.items.checked_mul(record).ok_or_else(|| FormatError::new(start, "item count overflow"))?;
    if bytes.len() - start != expected {
        return Err(FormatError::new(
            start,
            format!("payload holds {} bytes, header promises {} items ({} bytes)", bytes.len() - start, header.counts.items, expected),
        ));
    }
    let crc = crc32fast::hash(&bytes[start..]);
    if crc != header.crc32 {
        return Err(FormatError::new(start, format!("checksum {:08x} does not match header {:08x}", crc, header.crc32)));
    }
    let mut items = Vec::with_capacity(header.counts.items);
    for _ in 0..header.counts.items {
        let at = c.pos();
        let id = c.u32("item id")?;
        let category = c.u32("category")?;
        let instance = c.u32("instance")?;
        let code = c.u8("modality")?;
        let modality = Modality::from_code(code).ok_or_else(|| FormatError::new(at + 12, format!("bad modality {}", code)))?;
        let data = c.f64s(size * size, "image")?;
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(FormatError::new(at, format!("item {} has pixels outside [0, 1]", id)));
        }
        let image = Tensor::new(vec![size, size], data).map_err(|e| FormatError::new(at, e.to_string()))?;
        items.push(Item { id, category, instance, modality, image });
    }
    c.finish()?;
    let d = Dataset::from_items(header.spec, items).map_err(|e| FormatError::new(start, e.to_string()))?;
    let counts = (d.count(Modality::Photo), d.count(Modality::Sketch), d.categories().len());
    if counts != (header.counts.photos, header.counts.sketches, header.counts.categories) {
        return Err(FormatError::new(0, "header counts disagree with the records"));
    }
    Ok(d)
}

pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    write_file(path, &encode_dataset(dataset))
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    decode_dataset(&read_file(path)?).map_err(|e| LabError::format(path, e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRow {
    pub id: u32,
    pub category: u32,
    pub instance: u32,
    pub modality: Modality,
    pub vector: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingFile {
    pub dim: usize,
    pub encoder_config_hash: String,
    pub rows: Vec<EmbeddingRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EmbeddingHeader {
    d: usize,
    count: usize,
    encoder_config_hash: String,
}

impl EmbeddingFile {
    pub fn features(&self) -> Features {
        self.rows.iter().map(|r| (r.id, r.vector.clone())).collect()
    }

    /// Every row must name an item of `dataset` with the same labels.
    pub fn check_against(&self, dataset: &Dataset) -> Result<()> {
        for r in &self.rows {
            let ok = dataset
                .item(r.id)
                .is_some_and(|it| it.category == r.category && it.instance == r.instance && it.modality == r.modality);
            if !ok {
                return Err(LabError::Config(format!("embedding row {} does not match the dataset", r.id)));
            }
        }
        Ok(())
    }
}

/// One feature per dataset item, in item order.
pub fn export_embeddings(encoder: &Encoder, dataset: &Dataset) -> Result<EmbeddingFile> {
    let ids: Vec<u32> = dataset.items().iter().map(|it| it.id).collect();
    let features = encode_items(encoder, dataset, &ids)?;
    let rows = dataset
        .items()
        .iter()
        .map(|it| EmbeddingRow {
            id: it.id,
            category: it.category,
            instance: it.instance,
            modality: it.modality,
            vector: features[&it.id].clone(),
        })
        .collect();
    Ok(EmbeddingFile {
        dim: encoder.config().feature_dim,
        encoder_config_hash: sha256_hex(canonical_json(encoder.config()).as_bytes()),
        rows,
    })
}

pub fn encode_embeddings(file: &EmbeddingFile) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(EMBEDDING_MAGIC);
    let header = EmbeddingHeader { d: file.dim, count: file.rows.len(), encoder_config_hash: file.encoder_config_hash.clone() };
    put_json(&mut out, &canonical_json(&header));
    for r in &file.rows {
        put_u32(&mut out, r.id);
        put_u32(&mut out, r.category);
        put_u32(&mut out, r.instance);
        out.push(r.modality.code());
    }
    for r in &file.rows {
        put_f64s(&mut out, &r.vector);
    }
    out
}

pub fn decode_embeddings(bytes: &[u8]) -> std::result::Result<EmbeddingFile, FormatError> {
    let mut c = Cursor::new(bytes);
    c.magic(EMBEDDING_MAGIC)?;
    let header: EmbeddingHeader = c.json("header")?;
    let mut index = Vec::with_capacity(header.count.min(1 << 20));
    for _ in 0..header.count {
        let at = c.pos();
        let id = c.u32("item id")?;
        let category = c.u32("category")?;
        let instance = c.u32("instance")?;
        let code = c.u8("modality")?;
        let modality = Modality::from_code(code).ok_or_else(|| FormatError::new(at + 12, format!("bad modality {}", code)))?;
        index.push((id, category, instance, modality));
    }
    let mut rows = Vec::with_capacity(index.len());
    for (id, category, instance, modality) in index {
        let at = c.pos();
        let vector = c.f64s(header.d, "vector")?;
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(FormatError::new(at, format!("row {} is not finite", id)));
        }
        rows.push(EmbeddingRow { id, category, instance, modality, vector });
    }
    c.finish()?;
    Ok(EmbeddingFile { dim: header.d, encoder_config_hash: header.encoder_config_hash, rows })
}

pub fn save_embeddings(file: &EmbeddingFile, path: &Path) -> Result<()> {
    write_file(path, &encode_embeddings(file))
}

pub fn load_embeddings(path: &Path) -> Result<EmbeddingFile> {
    decode_embeddings(&read_file(path)?).map_err(|e| LabError::format(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use zslab_core::data::generate_dataset;

    fn small() -> Dataset {
        generate_dataset(&DatasetSpec { num_categories: 2, instances_per_category: 2, sketches_per_instance: 1, image_size: 12, seed: 3 })
            .unwrap()
    }

    #[test]
    fn dataset_truncation_and_corruption() {
        let bytes = encode_dataset(&small());
        assert_eq!(decode_dataset(&bytes).unwrap(), small());
        for cut in [0, 3, 10, bytes.len() / 2, bytes.len() - 1] {
            assert!(decode_dataset(&bytes[..cut]).is_err(), "cut at {}", cut);
        }
        let mut flipped = bytes.clone();
        let last = flipped.len() - 3;
        flipped[last] ^= 0x40;
        let err = decode_dataset(&flipped).unwrap_err();
        assert!(err.message.contains("checksum"), "{}", err);
        let mut bad = bytes;
        bad[0] = b'X';
        assert_eq!(decode_dataset(&bad).unwrap_err().offset, 0);
    }

    #[test]
    fn blob_file_rejects_trailing_bytes() {
        let blobs = vec![Blob { name: "w".into(), shape: vec![2], data: vec![1.5, -0.0] }];
        let mut bytes = encode_blob_file(&serde_json::json!({"k": 1}), &blobs);
        let (h, b): (serde_json::Value, _) = decode_blob_file(&bytes).unwrap();
        assert_eq!(h["k"], 1);
        assert_eq!(b, blobs);
        bytes.push(0);
        assert!(decode_blob_file::<serde_json::Value>(&bytes).is_err());
    }

    #[test]
    fn canonical_json_sorts_keys() {
        let v = serde_json::json!({"b": 1, "a": {"d": 2, "c": 3}});
        assert_eq!(canonical_json(&v), r#"{"a":{"c":3,"d":2},"b":1}"#);
    }
}
