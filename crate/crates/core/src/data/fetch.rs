use std::fs::{self, File, OpenOptions};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{
    extract_csv_text, parse_french_daily, parse_french_factors, DataSource, DatasetId, ReturnPanel,
};
use crate::Error;

/// Environment variable naming the download cache directory.
pub const CACHE_ENV: &str = "CANONPORT_CACHE";

#[derive(Debug, Error, PartialEq)]
pub enum FetchError {
    #[error("{0} is not cached and the network is unavailable")]
    NetworkUnavailable(String),
    #[error("cached file {0} does not match its recorded checksum")]
    ChecksumMismatch(PathBuf),
    #[error("i/o error on {path}: {message}")]
    Io { path: PathBuf, message: String },
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> FetchError + '_ {
    move |e| FetchError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

pub fn cache_dir_from_env() -> Option<PathBuf> {
    std::env::var_os(CACHE_ENV).map(PathBuf::from)
}

/// Lowercase hex SHA-256 digest.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Cache file for a URL-backed dataset, keyed by name and a hash of the URL.
pub fn cache_entry_path(id: &DatasetId, cache_dir: &Path) -> Option<PathBuf> {
    match &id.source {
        DataSource::Url(url) => {
            let key = &sha256_hex(url.as_bytes())[..12];
            Some(cache_dir.join(format!("{}-{key}.bin", id.name)))
        }
        DataSource::Path(_) => None,
    }
}

fn sidecar(path: &Path) -> PathBuf {
    path.with_extension("sha256")
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), FetchError> {
    let tmp = path.with_extension(format!("tmp{}", std::process::id()));
    let mut f = File::create(&tmp).map_err(io_err(&tmp))?;
    f.write_all(bytes).map_err(io_err(&tmp))?;
    f.sync_all().map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

/// Store `bytes` as the cached copy of `id`, e.g. to seed a cache from a
/// manually downloaded archive. Returns the cache path.
pub fn store_in_cache(
    id: &DatasetId,
    cache_dir: &Path,
    bytes: &[u8],
) -> Result<PathBuf, FetchError> {
    let path = cache_entry_path(id, cache_dir).ok_or_else(|| FetchError::Io {
        path: cache_dir.to_path_buf(),
        message: format!("{id} is a local file and is not cached"),
    })?;
    fs::create_dir_all(cache_dir).map_err(io_err(cache_dir))?;
    write_atomic(&path, bytes)?;
    write_atomic(&sidecar(&path), sha256_hex(bytes).as_bytes())?;
    Ok(path)
}

fn read_verified(path: &Path) -> Result<Option<Vec<u8>>, FetchError> {
    if !path.exists() {
        return Ok(None);
    }
    let bytes = fs::read(path).map_err(io_err(path))?;
    let side = sidecar(path);
    let recorded =
        fs::read_to_string(&side).map_err(|_| FetchError::ChecksumMismatch(path.to_path_buf()))?;
    if recorded.trim() != sha256_hex(&bytes) {
        return Err(FetchError::ChecksumMismatch(path.to_path_buf()));
    }
    Ok(Some(bytes))
}

fn download(url: &str) -> Result<Vec<u8>, FetchError> {
    let agent = ureq::AgentBuilder::new()
        .timeout(Duration::from_secs(120))
        .build();
    let resp = agent
        .get(url)
        .call()
        .map_err(|e| FetchError::NetworkUnavailable(format!("{url}: {e}")))?;
    let mut bytes = Vec::new();
    resp.into_reader()
        .read_to_end(&mut bytes)
        .map_err(|e| FetchError::NetworkUnavailable(format!("{url}: {e}")))?;
    Ok(bytes)
}

/// Raw bytes of a dataset. URL sources go through the cache; with `offline`
/// set only the cache is consulted. Local paths are read directly.
pub fn fetch_dataset(
    id: &DatasetId,
    cache_dir: &Path,
    offline: bool,
) -> Result<Vec<u8>, FetchError> {
    let url = match &id.source {
        DataSource::Path(p) => return fs::read(p).map_err(io_err(p)),
        DataSource::Url(u) => u,
    };
    let path = cache_entry_path(id, cache_dir).expect("URL sources have a cache entry");
    fs::create_dir_all(cache_dir).map_err(io_err(cache_dir))?;
    let lock_path = path.with_extension("lock");
    let lock = OpenOptions::new()
        .create(true)
        .truncate(false)
        .write(true)
        .open(&lock_path)
        .map_err(io_err(&lock_path))?;
    lock.lock().map_err(io_err(&lock_path))?;
    if let Some(bytes) = read_verified(&path)? {
        return Ok(bytes);
    }
    if offline {
        return Err(FetchError::NetworkUnavailable(url.clone()));
    }
    let bytes = download(url)?;
    store_in_cache(id, cache_dir, &bytes)?;
    Ok(bytes)
}

/// Fetch and parse a portfolio dataset.
pub fn load_dataset(id: &DatasetId, cache_dir: &Path, offline: bool) -> Result<ReturnPanel, Error> {
    let bytes = fetch_dataset(id, cache_dir, offline)?;
    let text = extract_csv_text(&bytes)?;
    Ok(parse_french_daily(&text, id)?)
}

/// Fetch and parse the daily five-factor file.
pub fn load_factors(cache_dir: &Path, offline: bool) -> Result<ReturnPanel, Error> {
    let bytes = fetch_dataset(&DatasetId::factors(), cache_dir, offline)?;
    let text = extract_csv_text(&bytes)?;
    Ok(parse_french_factors(&text)?)
}
