//! Shape-name sidecar: the binary archives identify shapes only by index,
//! so stems and source byte sizes travel in a `<file>.names` CSV alongside
//! every pipeline artifact.

use std::path::{Path, PathBuf};

use meshcodec::{Error, Result};

pub struct Manifest {
    stems: Vec<String>,
    bytes: Vec<u64>,
}

impl Manifest {
    pub fn new() -> Self {
        Manifest {
            stems: Vec::new(),
            bytes: Vec::new(),
        }
    }

    pub fn sidecar(artifact: &Path) -> PathBuf {
        let mut os = artifact.as_os_str().to_owned();
        os.push(".names");
        PathBuf::from(os)
    }

    pub fn push(&mut self, stem: String, bytes: u64) {
        self.stems.push(stem);
        self.bytes.push(bytes);
    }

    pub fn len(&self) -> usize {
        self.stems.len()
    }

    pub fn stems(&self) -> &[String] {
        &self.stems
    }

    pub fn total_bytes(&self) -> u64 {
        self.bytes.iter().sum()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut body = String::new();
        for (s, b) in self.stems.iter().zip(&self.bytes) {
            body.push_str(&format!("{s},{b}\n"));
        }
        std::fs::write(path, body).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Manifest> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m = Manifest::new();
        for (i, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (stem, bytes) = line.rsplit_once(',').ok_or_else(|| Error::Parse {
                path: path.into(),
                line: i + 1,
                msg: "expected stem,bytes".into(),
            })?;
            let bytes = bytes.parse().map_err(|_| Error::Parse {
                path: path.into(),
                line: i + 1,
                msg: format!("bad byte count: {bytes:?}"),
            })?;
            m.push(stem.to_string(), bytes);
        }
        Ok(m)
    }
}
