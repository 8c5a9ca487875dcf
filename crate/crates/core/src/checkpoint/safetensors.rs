//! Minimal safetensors container reader/writer.
//!
//! Layout: `u64` little-endian header length `N`, `N` bytes of UTF-8 JSON,
//! then the raw little-endian data region. Each header entry maps a tensor
//! name to `{dtype, shape, data_offsets: [begin, end]}` relative to the start
//! of the data region. Only the header is read on open; payloads are read
//! on demand by seeking into the file.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde_json::{Map, Value};

use super::dtype::Dtype;
use super::TensorRecord;
use crate::error::{Error, Result};

/// Refuse headers larger than this; real checkpoints stay far below it.
const MAX_HEADER_LEN: u64 = 100 * 1024 * 1024;
const METADATA_KEY: &str = "__metadata__";

/// Parsed header of one safetensors file.
#[derive(Clone, Debug)]
pub struct Shard {
    /// File name relative to the checkpoint root.
    pub file_name: String,
    pub path: PathBuf,
    /// Absolute file offset where the data region begins.
    pub data_start: u64,
    pub data_len: u64,
    /// Records ordered by byte offset.
    pub records: Vec<TensorRecord>,
    pub metadata: Option<BTreeMap<String, String>>,
}

pub fn read_header(path: &Path, file_name: &str) -> Result<Shard> {
    let mut file = File::open(path).map_err(|e| Error::io(path, e))?;
    let file_len = file.metadata().map_err(|e| Error::io(path, e))?.len();

    let mut len_buf = [0u8; 8];
    file.read_exact(&mut len_buf)
        .map_err(|_| Error::malformed(path, "file shorter than the 8-byte length prefix"))?;
    let header_len = u64::from_le_bytes(len_buf);
    if header_len > MAX_HEADER_LEN || 8 + header_len > file_len {
        return Err(Error::malformed(
            path,
            format!("header length {header_len} exceeds file size {file_len}"),
        ));
    }

    let mut header = vec![0u8; header_len as usize];
    file.read_exact(&mut header).map_err(|e| Error::io(path, e))?;
    let text = std::str::from_utf8(&header)
        .map_err(|_| Error::malformed(path, "header is not UTF-8"))?;
    let value: Value = serde_json::from_str(text.trim_end())
        .map_err(|e| Error::malformed(path, format!("header is not JSON: {e}")))?;
    let Value::Object(entries) = value else {
        return Err(Error::malformed(path, "header is not a JSON object"));
    };

    let data_start = 8 + header_len;
    let data_len = file_len - data_start;
    let mut metadata = None;
    let mut records = Vec::with_capacity(entries.len());

    for (name, entry) in entries {
        if name == METADATA_KEY {
            let meta: BTreeMap<String, String> = serde_json::from_value(entry)
                .map_err(|e| Error::malformed(path, format!("bad __metadata__: {e}")))?;
            metadata = Some(meta);
            continue;
        }
        records.push(parse_entry(path, name, &entry)?);
    }

    records.sort_by(|a, b| a.byte_offset.cmp(&b.byte_offset).then(a.name.cmp(&b.name)));
    let mut cursor = 0u64;
    for r in &records {
        if r.byte_offset < cursor {
            return Err(Error::malformed(
                path,
                format!("overlapping byte ranges at tensor `{}`", r.name),
            ));
        }
        if r.byte_offset > cursor {
            return Err(Error::malformed(
                path,
                format!("gap in data region before tensor `{}`", r.name),
            ));
        }
        cursor = r.byte_offset + r.byte_length;
    }
    if cursor != data_len {
        return Err(Error::malformed(
            path,
            format!("records cover {cursor} bytes but data region holds {data_len}"),
        ));
    }

    Ok(Shard {
        file_name: file_name.to_owned(),
        path: path.to_owned(),
        data_start,
        data_len,
        records,
        metadata,
    })
}

fn parse_entry(path: &Path, name: String, entry: &Value) -> Result<TensorRecord> {
    let bad = |why: &str| Error::malformed(path, format!("tensor `{name}`: {why}"));
    let obj = entry.as_object().ok_or_else(|| bad("entry is not an object"))?;

    let dtype: Dtype = obj
        .get("dtype")
        .and_then(Value::as_str)
        .ok_or_else(|| bad("missing dtype"))?
        .parse()
        .map_err(|e: String| bad(&e))?;
    let shape = obj
        .get("shape")
        .and_then(Value::as_array)
        .ok_or_else(|| bad("missing shape"))?
        .iter()
        .map(|d| d.as_u64().map(|d| d as usize))
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| bad("shape must be non-negative integers"))?;
    let offsets = obj
        .get("data_offsets")
        .and_then(Value::as_array)
        .filter(|a| a.len() == 2)
        .ok_or_else(|| bad("data_offsets must be [begin, end]"))?;
    let (Some(begin), Some(end)) = (offsets[0].as_u64(), offsets[1].as_u64()) else {
        return Err(bad("data_offsets must be integers"));
    };
    if end < begin {
        return Err(bad("data_offsets end precedes begin"));
    }

    let numel = shape
        .iter()
        .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64))
        .ok_or_else(|| bad("shape overflows"))?;
    let expected = numel
        .checked_mul(dtype.size() as u64)
        .ok_or_else(|| bad("shape overflows"))?;
    if end - begin != expected {
        return Err(bad(&format!(
            "byte extent {} does not match shape and dtype ({expected})",
            end - begin
        )));
    }

    Ok(TensorRecord {
        name,
        dtype,
        shape,
        byte_offset: begin,
        byte_length: end - begin,
    })
}

/// Read one record's raw payload bytes.
pub fn read_payload(shard: &Shard, record: &TensorRecord) -> Result<Vec<u8>> {
    let mut file = File::open(&shard.path).map_err(|e| Error::io(&shard.path, e))?;
    file.seek(SeekFrom::Start(shard.data_start + record.byte_offset))
        .map_err(|e| Error::io(&shard.path, e))?;
    let mut buf = vec![0u8; record.byte_length as usize];
    file.read_exact(&mut buf)
        .map_err(|e| Error::io(&shard.path, e))?;
    Ok(buf)
}

/// Serialize one file. Tensors are laid out in name order and the header
/// keys are sorted, so identical input always yields identical bytes.
/// Returns the total payload size.
pub fn write_file(
    path: &Path,
    tensors: &[(&str, Dtype, &[usize], &[u8])],
    metadata: Option<&BTreeMap<String, String>>,
) -> Result<u64> {
    let mut ordered: Vec<_> = tensors.to_vec();
    ordered.sort_by(|a, b| a.0.cmp(b.0));

    let mut entries: BTreeMap<&str, Value> = BTreeMap::new();
    let mut offset = 0u64;
    for &(name, dtype, shape, bytes) in &ordered {
        let end = offset + bytes.len() as u64;
        entries.insert(
            name,
            serde_json::json!({
                "dtype": dtype.as_str(),
                "shape": shape,
                "data_offsets": [offset, end],
            }),
        );
        offset = end;
    }

    let mut header = Map::new();
    if let Some(meta) = metadata {
        header.insert(METADATA_KEY.to_owned(), serde_json::to_value(meta)?);
    }
    for (name, v) in entries {
        header.insert(name.to_owned(), v);
    }
    let mut header = serde_json::to_string(&Value::Object(header))?.into_bytes();
    // Pad with spaces so the data region starts 8-byte aligned.
    while header.len() % 8 != 0 {
        header.push(b' ');
    }

    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    w.write_all(&(header.len() as u64).to_le_bytes()).map_err(io)?;
    w.write_all(&header).map_err(io)?;
    for &(_, _, _, bytes) in &ordered {
        w.write_all(bytes).map_err(io)?;
    }
    w.flush().map_err(io)?;
    Ok(offset)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raw_file(dir: &Path, header: &str, data: &[u8]) -> PathBuf {
        let path = dir.join("raw.safetensors");
        let mut bytes = (header.len() as u64).to_le_bytes().to_vec();
        bytes.extend_from_slice(header.as_bytes());
        bytes.extend_from_slice(data);
        std::fs::write(&path, bytes).unwrap();
        path
    }

    #[test]
    fn single_tensor_record() {
        let dir = tempfile::tempdir().unwrap();
        let path = raw_file(
            dir.path(),
            r#"{"w":{"dtype":"F32","shape":[2,2],"data_offsets":[0,16]}}"#,
            &[0u8; 16],
        );
        let shard = read_header(&path, "raw.safetensors").unwrap();
        assert_eq!(shard.records.len(), 1);
        assert_eq!(shard.records[0].byte_length, 16);
        assert_eq!(shard.records[0].shape, vec![2, 2]);
    }

    #[test]
    fn overlapping_ranges_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = raw_file(
            dir.path(),
            r#"{"a":{"dtype":"F32","shape":[2],"data_offsets":[0,8]},"b":{"dtype":"F32","shape":[2],"data_offsets":[4,12]}}"#,
            &[0u8; 12],
        );
        let err = read_header(&path, "raw.safetensors").unwrap_err();
        assert!(err.to_string().contains("malformed header"), "{err}");
        assert!(err.to_string().contains("overlapping"), "{err}");
    }

    #[test]
    fn non_json_and_truncated_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = raw_file(dir.path(), "not json at all", &[]);
        assert!(matches!(
            read_header(&path, "x"),
            Err(Error::MalformedHeader { .. })
        ));

        let path = dir.path().join("short.safetensors");
        std::fs::write(&path, [1u8, 2, 3]).unwrap();
        assert!(matches!(
            read_header(&path, "x"),
            Err(Error::MalformedHeader { .. })
        ));
    }

    #[test]
    fn gap_and_extent_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = raw_file(
            dir.path(),
            r#"{"a":{"dtype":"F32","shape":[2],"data_offsets":[4,12]}}"#,
            &[0u8; 12],
        );
        assert!(read_header(&path, "x").unwrap_err().to_string().contains("gap"));

        let path = raw_file(
            dir.path(),
            r#"{"a":{"dtype":"F16","shape":[2],"data_offsets":[0,8]}}"#,
            &[0u8; 8],
        );
        assert!(read_header(&path, "x").is_err());
    }

    #[test]
    fn written_header_is_aligned_and_sorted() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out.safetensors");
        let b = [1u8; 4];
        let a = [2u8; 8];
        write_file(
            &path,
            &[("b", Dtype::F32, &[1], &b), ("a", Dtype::F32, &[2], &a)],
            None,
        )
        .unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let n = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        assert_eq!(n % 8, 0);
        let header = std::str::from_utf8(&bytes[8..8 + n]).unwrap();
        assert!(header.find("\"a\"").unwrap() < header.find("\"b\"").unwrap());
        assert_eq!(&bytes[8 + n..8 + n + 8], &a);

        let shard = read_header(&path, "out.safetensors").unwrap();
        assert_eq!(shard.records[0].name, "a");
        assert_eq!(shard.records[1].byte_offset, 8);
    }
}
