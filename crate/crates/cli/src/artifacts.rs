//! Files written by the CLI: atomic writes, `PIBM` map files, PGM heatmaps and
//! the run manifest.
//!
//! ```text
//! PIBM map file
//! "PIBM" | version: u16 = 1 | rank: u32 | dims: u32 × rank
//! values: f32 little-endian, row-major
//! provenance: u32 length + UTF-8 JSON
//! ```

use std::io::Write;
use std::path::{Path, PathBuf};

use piba_core::attribution::{AttributionMap, Provenance};
use piba_core::binfmt::{Reader, Writer};
use piba_core::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

const MAP_MAGIC: &[u8; 4] = b"PIBM";
const MAP_VERSION: u16 = 1;

/// Writes through a temporary file in the target directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| CliError::artifact(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| CliError::artifact(dir, e))?;
    tmp.write_all(bytes).map_err(|e| CliError::artifact(path, e))?;
    tmp.persist(path).map_err(|e| CliError::artifact(path, e.error))?;
    Ok(())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn encode_map(map: &AttributionMap) -> Vec<u8> {
    let mut w = Writer::new(MAP_MAGIC, MAP_VERSION);
    w.u32(map.shape().len() as u32);
    for &d in map.shape() {
        w.u32(d as u32);
    }
    for &v in map.values.data() {
        w.f32(v as f32);
    }
    let prov = serde_json::to_vec(&map.provenance).expect("provenance serializes");
    w.len_prefixed(&prov);
    w.finish()
}

pub fn decode_map(bytes: &[u8]) -> piba_core::Result<AttributionMap> {
    use piba_core::Error;
    let mut r = Reader::open(bytes, MAP_MAGIC, MAP_VERSION)?;
    let rank = r.u32()? as usize;
    if rank == 0 || rank > 4 {
        return Err(Error::Format(format!("map rank {rank}")));
    }
    let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<piba_core::Result<Vec<_>>>()?;
    let n: usize = dims.iter().product();
    if n > r.remaining() / 4 {
        return Err(Error::Truncated(format!("{n} map values")));
    }
    let values = (0..n).map(|_| r.f32().map(f64::from)).collect::<piba_core::Result<Vec<_>>>()?;
    let len = r.u32()? as usize;
    let prov: Provenance = serde_json::from_slice(r.take(len, "provenance")?)
        .map_err(|e| Error::Format(format!("provenance: {e}")))?;
    r.expect_done("map")?;
    let map = AttributionMap {
        values: Tensor::new(dims, values)?,
        provenance: prov,
    };
    map.validate()?;
    Ok(map)
}

pub fn write_map(map: &AttributionMap, path: &Path) -> CliResult<()> {
    write_atomic(path, &encode_map(map))
}

pub fn read_map(path: &Path) -> CliResult<AttributionMap> {
    let bytes = std::fs::read(path).map_err(|e| CliError::artifact(path, e))?;
    decode_map(&bytes).map_err(|e| CliError::artifact(path, e))
}

/// Binary PGM of a 2-D map, each score `s` as `round(255 s)`, upscaled by
/// pixel repetition.
pub fn heatmap_pgm(map: &AttributionMap, scale: usize) -> CliResult<Vec<u8>> {
    let &[h, w] = map.shape() else {
        return Err(CliError::Other(format!("heatmap needs a 2-D map, got {:?}", map.shape())));
    };
    if scale == 0 {
        return Err(CliError::Config("heatmap scale must be at least 1".into()));
    }
    let mut out = format!("P5\n{} {}\n255\n", w * scale, h * scale).into_bytes();
    let v = map.values.data();
    for r in 0..h * scale {
        for c in 0..w * scale {
            out.push((255.0 * v[(r / scale) * w + c / scale]).round().clamp(0.0, 255.0) as u8);
        }
    }
    Ok(out)
}

pub fn render_heatmap(map: &AttributionMap, path: &Path, scale: usize) -> CliResult<()> {
    write_atomic(path, &heatmap_pgm(map, scale)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArtifactEntry {
    /// Relative to the output directory.
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub experiment: String,
    pub command: String,
    pub timestamp: String,
    pub config: std::collections::BTreeMap<String, String>,
    pub seeds: Vec<u64>,
    pub artifacts: Vec<ArtifactEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl RunManifest {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::artifact(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::artifact(path, e))
    }

    /// Checks every listed artifact against its recorded hash.
    pub fn verify(&self, dir: &Path) -> CliResult<()> {
        for a in &self.artifacts {
            let p = dir.join(&a.path);
            let bytes = std::fs::read(&p).map_err(|e| CliError::artifact(&p, e))?;
            if sha256_hex(&bytes) != a.sha256 {
                return Err(CliError::artifact(&p, "content hash differs from the manifest"));
            }
        }
        Ok(())
    }
}

/// Collects artifacts written by one run.
pub struct Output {
    pub dir: PathBuf,
    entries: Vec<ArtifactEntry>,
}

impl Output {
    pub fn new(dir: PathBuf) -> CliResult<Self> {
        std::fs::create_dir_all(&dir).map_err(|e| CliError::artifact(&dir, e))?;
        Ok(Output { dir, entries: vec![] })
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> CliResult<()> {
        write_atomic(&self.dir.join(name), bytes)?;
        self.entries.retain(|e| e.path != name);
        self.entries.push(ArtifactEntry {
            path: name.to_string(),
            sha256: sha256_hex(bytes),
        });
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> CliResult<()> {
        let mut s = serde_json::to_string_pretty(value).map_err(|e| CliError::Other(e.to_string()))?;
        s.push('\n');
        self.write(name, s.as_bytes())
    }

    pub fn entries(&self) -> &[ArtifactEntry] {
        &self.entries
    }

    pub fn into_entries(self) -> Vec<ArtifactEntry> {
        self.entries
    }
}
