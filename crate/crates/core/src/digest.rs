//! Stable content digests for configs, corpora and run outputs.
//!
//! FNV-1a over bytes; cheap, dependency-free and stable across platforms.
//! Used to tie reports to the exact corpus/config they were produced from,
//! not for security.

use std::path::Path;

use crate::error::Result;

const FNV_OFFSET: u64 = 0xcbf29ce484222325;
const FNV_PRIME: u64 = 0x100000001b3;

#[derive(Clone, Debug)]
pub struct Digest {
    state: u64,
}

impl Default for Digest {
    fn default() -> Self {
        Self::new()
    }
}

impl Digest {
    pub fn new() -> Self {
        Digest { state: FNV_OFFSET }
    }

    pub fn update(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.state ^= b as u64;
            self.state = self.state.wrapping_mul(FNV_PRIME);
        }
    }

    pub fn finish(&self) -> u64 {
        self.state
    }

    pub fn hex(&self) -> String {
        format!("{:016x}", self.state)
    }
}

pub fn digest_bytes(bytes: &[u8]) -> String {
    let mut d = Digest::new();
    d.update(bytes);
    d.hex()
}

pub fn digest_str(s: &str) -> String {
    digest_bytes(s.as_bytes())
}

/// Digest of a directory tree: relative paths (sorted) plus file contents.
pub fn digest_tree(root: &Path) -> Result<String> {
    let mut files = Vec::new();
    collect_files(root, root, &mut files)?;
    files.sort();
    let mut d = Digest::new();
    for rel in files {
        d.update(rel.as_bytes());
        d.update(&[0]);
        let bytes = std::fs::read(root.join(&rel))?;
        d.update(&(bytes.len() as u64).to_le_bytes());
        d.update(&bytes);
    }
    Ok(d.hex())
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
    let mut entries: Vec<_> = std::fs::read_dir(dir)?.collect::<std::io::Result<_>>()?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let p = e.path();
        if p.is_dir() {
            collect_files(root, &p, out)?;
        } else {
            let rel = p
                .strip_prefix(root)
                .expect("child path under root")
                .to_string_lossy()
                .replace('\\', "/");
            out.push(rel);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digest_is_stable_and_sensitive() {
        assert_eq!(digest_str("abc"), digest_str("abc"));
        assert_ne!(digest_str("abc"), digest_str("abd"));
        // Known FNV-1a vector: empty input is the offset basis.
        assert_eq!(digest_bytes(b""), "cbf29ce484222325");
    }

    #[test]
    fn tree_digest_reflects_contents() {
        let dir = std::env::temp_dir().join(format!("gardiff_digest_{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&dir);
        std::fs::create_dir_all(dir.join("sub")).unwrap();
        std::fs::write(dir.join("a.txt"), b"hello").unwrap();
        std::fs::write(dir.join("sub/b.bin"), [1u8, 2, 3]).unwrap();
        let d1 = digest_tree(&dir).unwrap();
        let d2 = digest_tree(&dir).unwrap();
        assert_eq!(d1, d2);
        std::fs::write(dir.join("sub/b.bin"), [1u8, 2, 4]).unwrap();
        assert_ne!(d1, digest_tree(&dir).unwrap());
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
