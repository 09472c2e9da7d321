//! Binary kernel cache, so that later stages never repeat the FPE solves.
//!
//! Layout (little-endian): magic `ORTK`, format version `u32`, then `n+1`
//! and `m` as `u64`, then `a`, `T`, `ε` as `f64`, then the row-major `f64`
//! payload, then the 64-bit FNV-1a checksum of the payload bytes.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::transfer::{build_kernel, KernelBuildReport, KernelMatrix, KernelSpec};

pub const MAGIC: &[u8; 4] = b"ORTK";
pub const FORMAT_VERSION: u32 = 1;
/// Environment variable naming the cache directory.
pub const CACHE_DIR_ENV: &str = "OPTRESP_CACHE_DIR";

const HEADER_LEN: usize = 4 + 4 + 8 * 5;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

pub fn write_kernel<W: Write>(kernel: &KernelMatrix, spec: &KernelSpec, mut out: W) -> Result<()> {
    if kernel.grid() != &spec.grid {
        return Err(Error::Cache("kernel grid does not match its spec".into()));
    }
    let mut header = Vec::with_capacity(HEADER_LEN);
    header.extend_from_slice(MAGIC);
    header.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    header.extend_from_slice(&(kernel.len() as u64).to_le_bytes());
    header.extend_from_slice(&(spec.time.steps() as u64).to_le_bytes());
    for v in [spec.grid.half_width(), spec.time.final_time(), spec.potential.noise] {
        header.extend_from_slice(&v.to_le_bytes());
    }
    let payload: Vec<u8> = kernel.values().iter().flat_map(|v| v.to_le_bytes()).collect();
    out.write_all(&header)?;
    out.write_all(&payload)?;
    out.write_all(&fnv1a64(&payload).to_le_bytes())?;
    Ok(())
}

/// Reads a cache file and checks it against `spec`; any mismatch or
/// corruption is an [`Error::Cache`].
pub fn read_kernel<R: Read>(mut input: R, spec: &KernelSpec) -> Result<KernelMatrix> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    if bytes.len() < HEADER_LEN + 8 || &bytes[..4] != MAGIC {
        return Err(Error::Cache("not a kernel cache file".into()));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
    let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
    let version = u32_at(4);
    if version != FORMAT_VERSION {
        return Err(Error::Cache(format!("format version {version}, expected {FORMAT_VERSION}")));
    }
    let (nodes, steps) = (u64_at(8), u64_at(16));
    let (a, t, eps) = (f64_at(24), f64_at(32), f64_at(40));
    let expected = (spec.grid.len() as u64, spec.time.steps() as u64, spec.grid.half_width(), spec.time.final_time(), spec.potential.noise);
    if (nodes, steps) != (expected.0, expected.1)
        || a.to_bits() != expected.2.to_bits()
        || t.to_bits() != expected.3.to_bits()
        || eps.to_bits() != expected.4.to_bits()
    {
        return Err(Error::Cache(format!(
            "header (n+1={nodes}, m={steps}, a={a}, T={t}, ε={eps}) does not match the requested kernel"
        )));
    }
    let payload_len = (nodes as usize).checked_mul(nodes as usize).and_then(|c| c.checked_mul(8));
    if payload_len.map(|p| HEADER_LEN + p + 8) != Some(bytes.len()) {
        return Err(Error::Cache("truncated or oversized file".into()));
    }
    let payload = &bytes[HEADER_LEN..bytes.len() - 8];
    let stored = u64_at(bytes.len() - 8);
    let actual = fnv1a64(payload);
    if stored != actual {
        return Err(Error::Cache(format!("checksum mismatch: stored {stored:016x}, computed {actual:016x}")));
    }
    let values = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    KernelMatrix::from_values(spec.grid, values)
}

/// File name derived from everything that determines the kernel, including
/// the potential and the Dirac width, which the header does not record.
pub fn cache_file_name(spec: &KernelSpec) -> String {
    let key = format!(
        "v{FORMAT_VERSION}|{}|{:016x}|{}|{}|{:016x}|{:016x}|{:016x}",
        serde_json::to_string(&spec.potential.potential).unwrap_or_default(),
        spec.potential.noise.to_bits(),
        spec.grid.intervals(),
        spec.time.steps(),
        spec.grid.half_width().to_bits(),
        spec.time.final_time().to_bits(),
        spec.dirac_sigma.to_bits(),
    );
    format!("kernel-{:016x}.ortk", fnv1a64(key.as_bytes()))
}

#[derive(Debug, Clone, PartialEq)]
pub enum CacheOutcome {
    Hit,
    Built,
    /// The cached file was unusable and has been replaced.
    Rebuilt { reason: String },
}

/// Loads the kernel from `dir` if a valid file exists, otherwise builds it
/// and writes the file (via a temporary name, so readers never see a partial
/// file). The build report is only available when the kernel was built.
pub fn load_or_build(spec: &KernelSpec, dir: &Path) -> Result<(KernelMatrix, Option<KernelBuildReport>, CacheOutcome)> {
    let path = dir.join(cache_file_name(spec));
    let mut outcome = CacheOutcome::Built;
    if path.exists() {
        match fs::File::open(&path).map_err(Error::from).and_then(|f| read_kernel(std::io::BufReader::new(f), spec)) {
            Ok(k) => {
                log::info!("cache hit: {}", path.display());
                return Ok((k, None, CacheOutcome::Hit));
            }
            Err(e) => {
                log::warn!("discarding kernel cache {}: {e}; rebuilding", path.display());
                outcome = CacheOutcome::Rebuilt { reason: e.to_string() };
            }
        }
    }
    let (kernel, report) = build_kernel(spec)?;
    fs::create_dir_all(dir)?;
    let tmp: PathBuf = path.with_extension(format!("tmp{}", std::process::id()));
    {
        let mut f = std::io::BufWriter::new(fs::File::create(&tmp)?);
        write_kernel(&kernel, spec, &mut f)?;
        f.flush()?;
    }
    fs::rename(&tmp, &path)?;
    log::info!("kernel cached at {}", path.display());
    Ok((kernel, Some(report), outcome))
}
