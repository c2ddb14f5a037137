//! Run manifests: every artifact-producing subcommand records its resolved
//! configuration, seed material and the content hash of each input and
//! output, so a run is reproducible from the manifest alone.

use std::path::Path;

use adavib_core::data_io::write_atomic;
use adavib_core::Result;

/// FNV-1a over the raw bytes; stable, dependency-free content fingerprint.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

pub struct Manifest {
    lines: Vec<String>,
}

impl Manifest {
    pub fn new(command: &str) -> Self {
        Manifest {
            lines: vec![
                "adavib-manifest v1".to_string(),
                format!("command\t{command}"),
            ],
        }
    }

    pub fn config(&mut self, key: &str, value: impl std::fmt::Display) {
        self.lines.push(format!("config\t{key}\t{value}"));
    }

    pub fn config_entries(&mut self, entries: &[(String, String)]) {
        for (k, v) in entries {
            self.config(k, v);
        }
    }

    pub fn input(&mut self, name: &str, contents: &str) {
        self.lines.push(format!(
            "input\t{name}\t{:016x}",
            fnv1a64(contents.as_bytes())
        ));
    }

    pub fn output(&mut self, name: &str, contents: &str) {
        self.lines.push(format!(
            "output\t{name}\t{:016x}",
            fnv1a64(contents.as_bytes())
        ));
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = self.lines.join("\n");
        text.push('\n');
        write_atomic(path, &text)
    }
}
