use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use log::info;

use super::idx::{parse_idx_images, parse_idx_labels, IMAGES_MAGIC, LABELS_MAGIC};
use super::{LabeledDataset, SplitTag};
use crate::error::{Error, Result};

/// Mirror serving the four gzip-compressed MNIST IDX files.
pub const DEFAULT_MIRROR: &str = "https://ossci-datasets.s3.amazonaws.com/mnist/";

pub const DATA_DIR_ENV: &str = "BNNKH_DATA_DIR";
pub const MIRROR_ENV: &str = "BNNKH_MNIST_MIRROR";

struct CanonicalFile {
    name: &'static str,
    magic: u32,
    count: u32,
    size: u64,
}

const CANONICAL: [CanonicalFile; 4] = [
    CanonicalFile {
        name: "train-images-idx3-ubyte",
        magic: IMAGES_MAGIC,
        count: 60_000,
        size: 16 + 60_000 * 784,
    },
    CanonicalFile {
        name: "train-labels-idx1-ubyte",
        magic: LABELS_MAGIC,
        count: 60_000,
        size: 8 + 60_000,
    },
    CanonicalFile {
        name: "t10k-images-idx3-ubyte",
        magic: IMAGES_MAGIC,
        count: 10_000,
        size: 16 + 10_000 * 784,
    },
    CanonicalFile {
        name: "t10k-labels-idx1-ubyte",
        magic: LABELS_MAGIC,
        count: 10_000,
        size: 8 + 10_000,
    },
];

#[derive(Clone, Debug)]
pub struct MnistFiles {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
}

impl MnistFiles {
    fn in_dir(dir: &Path) -> Self {
        Self {
            train_images: dir.join(CANONICAL[0].name),
            train_labels: dir.join(CANONICAL[1].name),
            test_images: dir.join(CANONICAL[2].name),
            test_labels: dir.join(CANONICAL[3].name),
        }
    }
}

/// Flag value wins, then `BNNKH_DATA_DIR`, then `~/.cache/bnnkh/mnist`.
pub fn resolve_data_dir(flag: Option<&Path>) -> PathBuf {
    if let Some(dir) = flag {
        return dir.to_path_buf();
    }
    if let Some(dir) = std::env::var_os(DATA_DIR_ENV).filter(|v| !v.is_empty()) {
        return PathBuf::from(dir);
    }
    let home = std::env::var_os("HOME").map(PathBuf::from).unwrap_or_else(|| ".".into());
    home.join(".cache").join("bnnkh").join("mnist")
}

fn check_integrity(canon: &CanonicalFile, bytes: &[u8]) -> Result<()> {
    let fail = |reason: String| Error::Integrity {
        file: canon.name.to_string(),
        reason,
    };
    if bytes.len() as u64 != canon.size {
        return Err(fail(format!(
            "expected {} bytes, found {}",
            canon.size,
            bytes.len()
        )));
    }
    let word = |o: usize| u32::from_be_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]);
    if word(0) != canon.magic {
        return Err(fail(format!("magic {} != {}", word(0), canon.magic)));
    }
    if word(4) != canon.count {
        return Err(fail(format!("count {} != {}", word(4), canon.count)));
    }
    Ok(())
}

fn cached_ok(path: &Path, canon: &CanonicalFile) -> bool {
    fs::metadata(path).map(|m| m.len() == canon.size).unwrap_or(false)
}

fn gunzip(bytes: &[u8]) -> std::io::Result<Vec<u8>> {
    let mut out = Vec::new();
    GzDecoder::new(bytes).read_to_end(&mut out)?;
    Ok(out)
}

fn download(url: &str) -> Result<Vec<u8>> {
    let fail = |reason: String| Error::Download {
        url: url.to_string(),
        reason,
    };
    let response = ureq::get(url).call().map_err(|e| fail(e.to_string()))?;
    let mut bytes = Vec::new();
    response
        .into_body()
        .into_reader()
        .read_to_end(&mut bytes)
        .map_err(|e| fail(e.to_string()))?;
    Ok(bytes)
}

/// Ensures the four decompressed MNIST files exist in `cache_dir`.
///
/// Files already present with the canonical size are left alone. A `.gz`
/// sitting next to a missing file is decompressed in place of a download.
pub fn fetch_dataset(source_url: Option<&str>, cache_dir: &Path) -> Result<MnistFiles> {
    let files = MnistFiles::in_dir(cache_dir);
    if CANONICAL
        .iter()
        .all(|canon| cached_ok(&cache_dir.join(canon.name), canon))
    {
        return Ok(files);
    }

    fs::create_dir_all(cache_dir).map_err(|e| Error::io(cache_dir, e))?;
    let env_mirror = std::env::var(MIRROR_ENV).ok().filter(|v| !v.is_empty());
    let base = source_url
        .map(str::to_string)
        .or(env_mirror)
        .unwrap_or_else(|| DEFAULT_MIRROR.to_string());

    for canon in &CANONICAL {
        let target = cache_dir.join(canon.name);
        if cached_ok(&target, canon) {
            continue;
        }
        let gz_path = cache_dir.join(format!("{}.gz", canon.name));
        let compressed = if gz_path.exists() {
            fs::read(&gz_path).map_err(|e| Error::io(&gz_path, e))?
        } else {
            let url = format!("{}/{}.gz", base.trim_end_matches('/'), canon.name);
            info!("downloading {url}");
            download(&url)?
        };
        let raw = gunzip(&compressed).map_err(|e| Error::Integrity {
            file: canon.name.to_string(),
            reason: format!("gzip: {e}"),
        })?;
        check_integrity(canon, &raw)?;
        let tmp = target.with_extension("part");
        fs::write(&tmp, &raw).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, &target).map_err(|e| Error::io(&target, e))?;
    }
    Ok(files)
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Loads the train or test split from an already populated cache directory.
pub fn load_split(dir: &Path, split: SplitTag) -> Result<LabeledDataset> {
    let files = MnistFiles::in_dir(dir);
    let (images, labels) = match split {
        SplitTag::Train => (&files.train_images, &files.train_labels),
        SplitTag::Test => (&files.test_images, &files.test_labels),
        other => {
            return Err(Error::InvalidArgument(format!(
                "{other:?} is derived, not stored on disk"
            )))
        }
    };
    let images = parse_idx_images(&read_file(images)?)?;
    let labels = parse_idx_labels(&read_file(labels)?)?;
    LabeledDataset::from_idx(images, labels, split)
}

#[cfg(test)]
mod tests {
    use super::*;
    use flate2::write::GzEncoder;
    use flate2::Compression;
    use std::io::Write;

    fn fake_canonical(canon: &CanonicalFile) -> Vec<u8> {
        let mut v = canon.magic.to_be_bytes().to_vec();
        v.extend_from_slice(&canon.count.to_be_bytes());
        if canon.magic == IMAGES_MAGIC {
            v.extend_from_slice(&28u32.to_be_bytes());
            v.extend_from_slice(&28u32.to_be_bytes());
        }
        v.resize(canon.size as usize, 0);
        v
    }

    #[test]
    fn cache_hit_performs_no_network_access() {
        let dir = tempfile::tempdir().unwrap();
        for canon in &CANONICAL {
            fs::write(dir.path().join(canon.name), fake_canonical(canon)).unwrap();
        }
        // An unroutable mirror: any network attempt would fail.
        let files = fetch_dataset(Some("http://127.0.0.1:9/"), dir.path()).unwrap();
        assert!(files.test_labels.ends_with("t10k-labels-idx1-ubyte"));
    }

    #[test]
    fn network_failure_with_empty_cache() {
        let dir = tempfile::tempdir().unwrap();
        let err = fetch_dataset(Some("http://127.0.0.1:9/"), dir.path()).unwrap_err();
        assert!(matches!(err, Error::Download { .. }), "{err}");
    }

    #[test]
    fn local_gz_is_decompressed_and_truncation_named() {
        let dir = tempfile::tempdir().unwrap();
        for canon in &CANONICAL {
            let mut raw = fake_canonical(canon);
            if canon.name == "t10k-labels-idx1-ubyte" {
                raw.truncate(raw.len() - 10);
            }
            let mut enc = GzEncoder::new(Vec::new(), Compression::fast());
            enc.write_all(&raw).unwrap();
            fs::write(
                dir.path().join(format!("{}.gz", canon.name)),
                enc.finish().unwrap(),
            )
            .unwrap();
        }
        let err = fetch_dataset(Some("http://127.0.0.1:9/"), dir.path()).unwrap_err();
        match err {
            Error::Integrity { file, .. } => assert_eq!(file, "t10k-labels-idx1-ubyte"),
            other => panic!("unexpected {other}"),
        }
        // The intact files were still materialized.
        assert!(cached_ok(&dir.path().join(CANONICAL[0].name), &CANONICAL[0]));
    }

    #[test]
    fn flag_beats_default_dir() {
        let p = resolve_data_dir(Some(Path::new("/tmp/x")));
        assert_eq!(p, PathBuf::from("/tmp/x"));
    }
}
