//! Binary shard files.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic      b"BKSH"
//! version    u16
//! records    u64          control + treated
//! d          u32
//! m          u32
//! n_control  u64
//! control block: d covariate columns, then m outcome columns, n_control f64 each
//! treated block: d covariate columns, then m outcome columns, records - n_control f64 each
//! trailer: per unit (control first, then treated): row u64, id_len u32, id utf-8 bytes
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use super::dataset::{Block, Dataset, Schema, Shard};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"BKSH";
pub const VERSION: u16 = 1;

const MANIFEST: &str = "schema.json";

pub fn encode_shard(shard: &Shard) -> Vec<u8> {
    let d = shard.control.covariates.len();
    let m = shard.control.outcomes.len();
    let mut out = Vec::with_capacity(34 + shard.record_count() * (d + m + 2) * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(shard.record_count() as u64).to_le_bytes());
    out.extend_from_slice(&(d as u32).to_le_bytes());
    out.extend_from_slice(&(m as u32).to_le_bytes());
    out.extend_from_slice(&(shard.control.len() as u64).to_le_bytes());
    for block in [&shard.control, &shard.treated] {
        for col in block.covariates.iter().chain(&block.outcomes) {
            for v in col {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    for block in [&shard.control, &shard.treated] {
        for (id, row) in block.ids.iter().zip(&block.rows) {
            out.extend_from_slice(&row.to_le_bytes());
            out.extend_from_slice(&(id.len() as u32).to_le_bytes());
            out.extend_from_slice(id.as_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| format!("truncated at byte {}", self.pos))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> std::result::Result<u16, String> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64_column(&mut self, n: usize) -> std::result::Result<Vec<f64>, String> {
        let bytes = self.take(n.checked_mul(8).ok_or("length overflow")?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn decode_shard(buf: &[u8]) -> std::result::Result<Shard, String> {
    let mut cur = Cursor { buf, pos: 0 };
    if cur.take(4)? != MAGIC {
        return Err("bad magic bytes".into());
    }
    let version = cur.u16()?;
    if version != VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let records = cur.u64()? as usize;
    let d = cur.u32()? as usize;
    let m = cur.u32()? as usize;
    let n_control = cur.u64()? as usize;
    if n_control > records {
        return Err("control count exceeds record count".into());
    }
    let mut shard = Shard::with_dims(d, m);
    for (block, n) in [
        (&mut shard.control, n_control),
        (&mut shard.treated, records - n_control),
    ] {
        for j in 0..d {
            block.covariates[j] = cur.f64_column(n)?;
        }
        for j in 0..m {
            block.outcomes[j] = cur.f64_column(n)?;
        }
    }
    for (block, n) in [
        (&mut shard.control, n_control),
        (&mut shard.treated, records - n_control),
    ] {
        let Block { ids, rows, .. } = block;
        for _ in 0..n {
            rows.push(cur.u64()?);
            let len = cur.u32()? as usize;
            let id = std::str::from_utf8(cur.take(len)?).map_err(|e| e.to_string())?;
            ids.push(id.to_string());
        }
    }
    if cur.pos != buf.len() {
        return Err(format!("{} trailing bytes", buf.len() - cur.pos));
    }
    Ok(shard)
}

pub fn write_shard(shard: &Shard, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_shard(shard)).map_err(|e| Error::io(path, e))
}

pub fn read_shard(path: impl AsRef<Path>) -> Result<Shard> {
    let path = path.as_ref();
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_shard(&buf).map_err(|message| Error::ShardFormat {
        path: path.to_path_buf(),
        message,
    })
}

fn shard_path(dir: &Path, k: usize) -> PathBuf {
    dir.join(format!("shard-{k:05}.bksh"))
}

/// Writes `schema.json` plus one shard file per shard into `dir`.
pub fn write_dataset_dir(ds: &Dataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = serde_json::json!({
        "schema": ds.schema(),
        "shards": ds.shards().len(),
    });
    let path = dir.join(MANIFEST);
    fs::write(&path, serde_json::to_vec_pretty(&manifest).expect("serializable"))
        .map_err(|e| Error::io(&path, e))?;
    for (k, shard) in ds.shards().iter().enumerate() {
        write_shard(shard, shard_path(dir, k))?;
    }
    Ok(())
}

pub fn read_dataset_dir(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let bad = |message: String| Error::ShardFormat {
        path: path.clone(),
        message,
    };
    let manifest: serde_json::Value = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
    let schema: Schema =
        serde_json::from_value(manifest["schema"].clone()).map_err(|e| bad(e.to_string()))?;
    let count = manifest["shards"]
        .as_u64()
        .ok_or_else(|| bad("missing shard count".into()))? as usize;
    let shards = (0..count)
        .map(|k| read_shard(shard_path(dir, k)))
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(schema, shards)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::dataset::UnitRecord;

    fn sample() -> Dataset {
        let units = (0..7).map(|i| UnitRecord {
            unit_id: format!("u{i}"),
            treated: i % 3 == 0,
            covariates: vec![i as f64 * 0.5, -(i as f64)],
            outcomes: vec![i as f64 + 0.25],
        });
        Dataset::from_units(Schema::anonymous(2, 1), units, 4).unwrap()
    }

    #[test]
    fn header_bytes() {
        let ds = sample();
        let bytes = encode_shard(&ds.shards()[0]);
        assert_eq!(&bytes[0..4], b"BKSH");
        assert_eq!(u16::from_le_bytes([bytes[4], bytes[5]]), 1);
        assert_eq!(u64::from_le_bytes(bytes[6..14].try_into().unwrap()), 4);
        assert_eq!(u32::from_le_bytes(bytes[14..18].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[18..22].try_into().unwrap()), 1);
        // shard 0 holds u0..u3: u0, u3 treated
        assert_eq!(u64::from_le_bytes(bytes[22..30].try_into().unwrap()), 2);
        // first control covariate value is u1's x0 = 0.5
        assert_eq!(f64::from_le_bytes(bytes[30..38].try_into().unwrap()), 0.5);
    }

    #[test]
    fn decode_inverts_encode() {
        let ds = sample();
        for shard in ds.shards() {
            assert_eq!(&decode_shard(&encode_shard(shard)).unwrap(), shard);
        }
    }

    #[test]
    fn rejects_corruption() {
        let ds = sample();
        let mut bytes = encode_shard(&ds.shards()[0]);
        assert!(decode_shard(&bytes[..bytes.len() - 1]).is_err());
        bytes[0] = b'X';
        assert!(decode_shard(&bytes).is_err());
    }

    #[test]
    fn directory_round_trip() {
        let ds = sample();
        let dir = tempfile::tempdir().unwrap();
        write_dataset_dir(&ds, dir.path()).unwrap();
        let back = read_dataset_dir(dir.path()).unwrap();
        assert_eq!(back.shards(), ds.shards());
        assert_eq!(back.schema(), ds.schema());
    }
}
