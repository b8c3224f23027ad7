use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const MANIFEST_HEADER: &str = "sat-manifest v1";
pub const MANIFEST_FILE: &str = "manifest.txt";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    /// Relative to the manifest's directory.
    pub path: String,
    pub labels: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    pub domains: Vec<String>,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn n_domains(&self) -> usize {
        self.domains.len()
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{MANIFEST_HEADER}\n{}\n", self.domains.join("\t"));
        for e in &self.entries {
            out.push_str(&e.path);
            for l in &e.labels {
                out.push('\t');
                out.push_str(&l.to_string());
            }
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(MANIFEST_HEADER) {
            return Err(Error::Manifest(format!("first line must be {MANIFEST_HEADER:?}")));
        }
        let domains: Vec<String> = lines
            .next()
            .ok_or_else(|| Error::Manifest("missing domain line".into()))?
            .split('\t')
            .map(str::to_string)
            .collect();
        if domains.iter().any(String::is_empty) {
            return Err(Error::Manifest("empty domain name".into()));
        }
        let mut entries = Vec::new();
        for (i, line) in lines.enumerate().filter(|(_, l)| !l.is_empty()) {
            let lineno = i + 3;
            let mut fields = line.split('\t');
            let path = fields.next().unwrap_or_default().to_string();
            let labels = fields
                .map(|f| match f {
                    "0" => Ok(0),
                    "1" => Ok(1),
                    _ => Err(Error::Manifest(format!("line {lineno}: label {f:?} is not 0 or 1"))),
                })
                .collect::<Result<Vec<u8>>>()?;
            if path.is_empty() || labels.len() != domains.len() {
                return Err(Error::Manifest(format!(
                    "line {lineno}: expected a path and {} labels",
                    domains.len()
                )));
            }
            entries.push(ManifestEntry { path, labels });
        }
        if entries.is_empty() {
            return Err(Error::Manifest("no images listed".into()));
        }
        Ok(Self { domains, entries })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_errors() {
        let m = Manifest {
            domains: vec!["A0".into(), "A1".into()],
            entries: vec![ManifestEntry { path: "a.ppm".into(), labels: vec![1, 0] }],
        };
        let text = m.to_text();
        assert_eq!(text, "sat-manifest v1\nA0\tA1\na.ppm\t1\t0\n");
        assert_eq!(Manifest::parse(&text).unwrap(), m);
        assert!(Manifest::parse("sat-manifest v2\nA\nx\t1\n").is_err());
        assert!(Manifest::parse("sat-manifest v1\nA\nx\t2\n").is_err());
        assert!(Manifest::parse("sat-manifest v1\nA\tB\nx\t1\n").is_err());
        assert!(Manifest::parse("sat-manifest v1\nA\n").is_err());
    }
}
