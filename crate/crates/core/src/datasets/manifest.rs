//! Tab-separated manifest with a header row naming the columns.
//!
//! Lines starting with `#` are comments; a `# provenance: ...` comment carries
//! the free-text provenance. Column order is free; unknown columns are ignored.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::{binarize, BinaryLabel};
use crate::error::{Error, Result};
use crate::signal::{DeviceDomain, RawLabel, Site};

const REQUIRED: [&str; 6] = [
    "audio_path",
    "device_domain",
    "site",
    "raw_label",
    "patient_id",
    "sample_rate_hz",
];
const OPTIONAL: [&str; 4] = ["verified", "provisional_label", "age_months", "sex"];

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    /// As written in the file; relative paths resolve against the manifest's directory.
    pub audio_path: String,
    pub device_domain: DeviceDomain,
    pub site: Site,
    pub raw_label: RawLabel,
    pub patient_id: String,
    pub sample_rate_hz: u32,
    /// `false` for rows whose label is a model verdict awaiting clinical review.
    pub verified: bool,
    /// Model verdict carried by unverified rows.
    pub provisional_label: Option<BinaryLabel>,
    pub age_months: Option<f64>,
    pub sex: Option<String>,
}

impl ManifestEntry {
    pub fn new(
        audio_path: impl Into<String>,
        device_domain: DeviceDomain,
        site: Site,
        raw_label: RawLabel,
        patient_id: impl Into<String>,
        sample_rate_hz: u32,
    ) -> Self {
        Self {
            audio_path: audio_path.into(),
            device_domain,
            site,
            raw_label,
            patient_id: patient_id.into(),
            sample_rate_hz,
            verified: true,
            provisional_label: None,
            age_months: None,
            sex: None,
        }
    }

    /// Clinical label if present, otherwise the provisional verdict.
    pub fn binary_label(&self) -> Result<BinaryLabel> {
        match (self.raw_label, self.provisional_label) {
            (RawLabel::Unlabeled, Some(p)) => Ok(p),
            (raw, _) => binarize(raw),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    pub provenance: String,
    /// Directory relative audio paths are resolved against.
    pub base_dir: PathBuf,
}

impl Manifest {
    pub fn new(entries: Vec<ManifestEntry>, provenance: impl Into<String>) -> Result<Self> {
        let m = Self {
            entries,
            provenance: provenance.into(),
            base_dir: PathBuf::new(),
        };
        m.validate()?;
        Ok(m)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.audio_path.as_str()) {
                return Err(Error::invalid(format!("duplicate audio path `{}`", e.audio_path)));
            }
            if e.raw_label == RawLabel::Unlabeled && (e.verified || e.provisional_label.is_none()) {
                return Err(Error::Label(format!(
                    "`{}` is unlabeled; only unverified rows with a provisional label may be",
                    e.audio_path
                )));
            }
        }
        Ok(())
    }

    pub fn labels(&self) -> Result<Vec<BinaryLabel>> {
        self.entries.iter().map(ManifestEntry::binary_label).collect()
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        let p = Path::new(&entry.audio_path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for line in self.provenance.lines() {
            let _ = writeln!(out, "# provenance: {line}");
        }
        let header: Vec<&str> = REQUIRED.iter().chain(OPTIONAL.iter()).copied().collect();
        out.push_str(&header.join("\t"));
        out.push('\n');
        for e in &self.entries {
            let cols = [
                e.audio_path.clone(),
                e.device_domain.to_string(),
                e.site.to_string(),
                e.raw_label.to_string(),
                e.patient_id.clone(),
                e.sample_rate_hz.to_string(),
                e.verified.to_string(),
                e.provisional_label.map(|l| l.to_string()).unwrap_or_default(),
                e.age_months.map(|a| a.to_string()).unwrap_or_default(),
                e.sex.clone().unwrap_or_default(),
            ];
            out.push_str(&cols.join("\t"));
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str, source: &Path) -> Result<Self> {
        let err = |line: usize, msg: String| Error::format(source, format!("line {line}: {msg}"));
        let mut provenance = Vec::new();
        let mut header: Option<Vec<String>> = None;
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let n = n + 1;
            if let Some(c) = line.strip_prefix('#') {
                if let Some(p) = c.trim_start().strip_prefix("provenance:") {
                    provenance.push(p.trim().to_string());
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let cells: Vec<&str> = line.split('\t').collect();
            let Some(cols) = &header else {
                let cols: Vec<String> = cells.iter().map(|c| c.trim().to_string()).collect();
                if let Some(missing) = REQUIRED.iter().find(|r| !cols.iter().any(|c| c == *r)) {
                    return Err(err(n, format!("header lacks column `{missing}`")));
                }
                header = Some(cols);
                continue;
            };
            if cells.len() != cols.len() {
                return Err(err(n, format!("{} cells, header has {}", cells.len(), cols.len())));
            }
            let get = |name: &str| -> Option<&str> {
                cols.iter().position(|c| c == name).map(|i| cells[i].trim())
            };
            let req = |name: &str| get(name).expect("required column checked");
            let parse_err = |e: Error| err(n, e.to_string());
            let entry = ManifestEntry {
                audio_path: req("audio_path").to_string(),
                device_domain: req("device_domain").parse().map_err(parse_err)?,
                site: req("site").parse().map_err(parse_err)?,
                raw_label: req("raw_label").parse().map_err(parse_err)?,
                patient_id: req("patient_id").to_string(),
                sample_rate_hz: req("sample_rate_hz")
                    .parse()
                    .map_err(|e| err(n, format!("sample_rate_hz: {e}")))?,
                verified: match get("verified") {
                    None | Some("") => true,
                    Some(v) => v.parse().map_err(|e| err(n, format!("verified: {e}")))?,
                },
                provisional_label: match get("provisional_label") {
                    None | Some("") => None,
                    Some(v) => Some(v.parse().map_err(parse_err)?),
                },
                age_months: match get("age_months") {
                    None | Some("") => None,
                    Some(v) => Some(v.parse().map_err(|e| err(n, format!("age_months: {e}")))?),
                },
                sex: get("sex").filter(|s| !s.is_empty()).map(str::to_string),
            };
            entries.push(entry);
        }
        if header.is_none() {
            return Err(Error::format(source, "missing header row"));
        }
        let m = Manifest {
            entries,
            provenance: provenance.join("\n"),
            base_dir: source.parent().map(Path::to_path_buf).unwrap_or_default(),
        };
        m.validate().map_err(|e| Error::format(source, e.to_string()))?;
        Ok(m)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse(&std::fs::read_to_string(path)?, path)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }
}
