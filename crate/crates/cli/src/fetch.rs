//! Dataset download with checksum verification.

use std::fs::File;
use std::io::{self, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use md5::{Digest, Md5};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Source {
    pub name: &'static str,
    pub url: &'static str,
    pub archive: &'static str,
    pub md5: &'static str,
    /// Directory the archive unpacks to.
    pub unpacked: &'static str,
}

pub const SOURCES: [Source; 2] = [
    Source {
        name: "cifar10",
        url: "https://www.cs.toronto.edu/~kriz/cifar-10-binary.tar.gz",
        archive: "cifar-10-binary.tar.gz",
        md5: "c32a1d4ab5d03f1284b67883e8d87530",
        unpacked: "cifar-10-batches-bin",
    },
    Source {
        name: "stl10",
        url: "http://ai.stanford.edu/~acoates/stl10/stl10_binary.tar.gz",
        archive: "stl10_binary.tar.gz",
        md5: "91f7769df0f17e558f3565bffb0c7dfb",
        unpacked: "stl10_binary",
    },
];

pub fn source(name: &str) -> anyhow::Result<Source> {
    match SOURCES.iter().find(|s| s.name == name) {
        Some(s) => Ok(*s),
        None => bail!("unknown dataset `{name}` (known: cifar10, stl10)"),
    }
}

pub fn md5_hex(reader: impl Read) -> io::Result<String> {
    let mut reader = BufReader::new(reader);
    let mut hasher = Md5::new();
    let mut buf = [0u8; 1 << 16];
    loop {
        let n = reader.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

fn download(url: &str, to: &Path) -> anyhow::Result<()> {
    log::info!("downloading {url}");
    let response = ureq::get(url).call().with_context(|| format!("requesting {url}"))?;
    let partial = to.with_extension("partial");
    let mut out = File::create(&partial).with_context(|| format!("creating {}", partial.display()))?;
    io::copy(&mut response.into_reader(), &mut out).with_context(|| format!("downloading {url}"))?;
    out.flush()?;
    std::fs::rename(&partial, to)?;
    Ok(())
}

/// Downloads (unless `archive` points at a local copy), verifies the MD5 and
/// unpacks into `dest`. Returns the unpacked dataset directory.
pub fn fetch(source: &Source, dest: &Path, url: Option<&str>, archive: Option<&Path>, md5: Option<&str>) -> anyhow::Result<PathBuf> {
    std::fs::create_dir_all(dest).with_context(|| format!("creating {}", dest.display()))?;
    let archive_path = match archive {
        Some(p) => p.to_path_buf(),
        None => {
            let p = dest.join(source.archive);
            if !p.exists() {
                download(url.unwrap_or(source.url), &p)?;
            }
            p
        }
    };
    let expected = md5.unwrap_or(source.md5).to_ascii_lowercase();
    let file = File::open(&archive_path).with_context(|| format!("opening {}", archive_path.display()))?;
    let found = md5_hex(file)?;
    if found != expected {
        bail!("{}: md5 {found} does not match expected {expected}", archive_path.display());
    }
    let file = File::open(&archive_path)?;
    tar::Archive::new(flate2::read::GzDecoder::new(file))
        .unpack(dest)
        .with_context(|| format!("unpacking {}", archive_path.display()))?;
    Ok(dest.join(source.unpacked))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn md5_of_known_strings() {
        assert_eq!(md5_hex(&b""[..]).unwrap(), "d41d8cd98f00b204e9800998ecf8427e");
        assert_eq!(md5_hex(&b"abc"[..]).unwrap(), "900150983cd24fb0d6963f7d28e17f72");
    }
}
