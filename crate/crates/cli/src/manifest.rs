//! The run manifest: a flat key=value file listing the resolved parameters, the
//! verdicts and every output file with its size and FNV-1a checksum.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use mvergodic::{Error, Result};

pub const FILE_NAME: &str = "manifest";

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

#[derive(Clone, Debug, PartialEq)]
pub struct FileEntry {
    pub name: String,
    pub bytes: usize,
    pub checksum: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VerdictLine {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

#[derive(Clone, Debug, Default)]
pub struct RunManifest {
    pub subcommand: String,
    pub scenario: Option<PathBuf>,
    pub out: PathBuf,
    pub threads: usize,
    pub params: BTreeMap<String, String>,
    pub verdicts: Vec<VerdictLine>,
    pub files: Vec<FileEntry>,
    pub wall_clock_seconds: f64,
}

impl RunManifest {
    pub fn passed(&self) -> bool {
        self.verdicts.iter().all(|v| v.pass)
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "software=mvergodic {}", env!("CARGO_PKG_VERSION"));
        let _ = writeln!(s, "subcommand={}", self.subcommand);
        if let Some(p) = &self.scenario {
            let _ = writeln!(s, "scenario={}", p.display());
        }
        let _ = writeln!(s, "out={}", self.out.display());
        let _ = writeln!(s, "threads={}", self.threads);
        let _ = writeln!(s, "rng=counter-based streams keyed by (seed, channel, particle, step); independent of thread count");
        for (k, v) in &self.params {
            let _ = writeln!(s, "param.{k}={v}");
        }
        for v in &self.verdicts {
            let _ = writeln!(s, "verdict.{}={};{}", v.name, if v.pass { "pass" } else { "fail" }, v.detail);
        }
        let _ = writeln!(s, "verdict={}", if self.passed() { "pass" } else { "fail" });
        for f in &self.files {
            let _ = writeln!(s, "file.{}={},{:016x}", f.name, f.bytes, f.checksum);
        }
        let _ = writeln!(s, "wall_clock_seconds={:.3}", self.wall_clock_seconds);
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut m = RunManifest::default();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                column: 1,
                message: "expected key=value".into(),
            })?;
            let bad = |msg: &str| Error::Parse { line: i + 1, column: k.len() + 2, message: msg.into() };
            if let Some(p) = k.strip_prefix("param.") {
                m.params.insert(p.to_string(), v.to_string());
            } else if let Some(name) = k.strip_prefix("verdict.") {
                let (flag, detail) = v.split_once(';').unwrap_or((v, ""));
                m.verdicts.push(VerdictLine { name: name.to_string(), pass: flag == "pass", detail: detail.to_string() });
            } else if let Some(name) = k.strip_prefix("file.") {
                let (bytes, sum) = v.split_once(',').ok_or_else(|| bad("expected bytes,checksum"))?;
                m.files.push(FileEntry {
                    name: name.to_string(),
                    bytes: bytes.parse().map_err(|_| bad("bad byte count"))?,
                    checksum: u64::from_str_radix(sum, 16).map_err(|_| bad("bad checksum"))?,
                });
            } else {
                match k {
                    "subcommand" => m.subcommand = v.to_string(),
                    "scenario" => m.scenario = Some(PathBuf::from(v)),
                    "out" => m.out = PathBuf::from(v),
                    "threads" => m.threads = v.parse().map_err(|_| bad("bad thread count"))?,
                    "wall_clock_seconds" => m.wall_clock_seconds = v.parse().map_err(|_| bad("bad time"))?,
                    _ => {}
                }
            }
        }
        if m.subcommand.is_empty() {
            return Err(Error::Parse { line: 1, column: 1, message: "manifest has no subcommand".into() });
        }
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Files whose bytes in `dir` differ from the recorded size or checksum.
    pub fn mismatches(&self, dir: &Path) -> Vec<String> {
        self.files
            .iter()
            .filter(|f| match std::fs::read(dir.join(&f.name)) {
                Ok(b) => b.len() != f.bytes || fnv1a64(&b) != f.checksum,
                Err(_) => true,
            })
            .map(|f| f.name.clone())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
    }

    #[test]
    fn render_parse_roundtrip() {
        let m = RunManifest {
            subcommand: "bsde".into(),
            scenario: Some("/tmp/a.toml".into()),
            out: "/tmp/out".into(),
            threads: 3,
            params: BTreeMap::from([("dt".into(), "0.01".into()), ("alphas".into(), "0.4,0.2".into())]),
            verdicts: vec![VerdictLine { name: "oracle".into(), pass: true, detail: "diff=0.001".into() }],
            files: vec![FileEntry { name: "bsde_nodes.csv".into(), bytes: 12, checksum: 0xdead_beef }],
            wall_clock_seconds: 1.5,
        };
        let back = RunManifest::parse(&m.render()).unwrap();
        assert_eq!(back.subcommand, m.subcommand);
        assert_eq!(back.scenario, m.scenario);
        assert_eq!(back.params, m.params);
        assert_eq!(back.verdicts, m.verdicts);
        assert_eq!(back.files, m.files);
        assert_eq!(back.threads, 3);
    }

    #[test]
    fn malformed_lines_report_their_position() {
        match RunManifest::parse("subcommand=x\nnonsense\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }
}
