//! Tab-separated corpus manifest.
//!
//! ```text
//! # num_classes=8
//! img/c0_000.png<TAB>wav/c0_000.wav<TAB>0<TAB>0<TAB>train
//! ```
//!
//! Relative paths are resolved against the manifest's directory. Lines
//! starting with `#` are comments; a `# num_classes=N` comment declares the
//! label-space size, otherwise it is inferred as `max(class_id) + 1`.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};

/// Number of spoken captions recorded per image in the source corpora.
pub const CAPTIONS_PER_IMAGE: u8 = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Test,
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?} (expected train or test)")),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub image_path: PathBuf,
    pub audio_path: PathBuf,
    pub class_id: usize,
    pub caption_index: u8,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    pub num_classes: usize,
    /// Directory relative paths were resolved against.
    pub root: PathBuf,
    /// Set by a `# source=synthetic` comment.
    pub synthetic: bool,
}

impl Manifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    /// Entry indices grouped by class, in file order.
    pub fn indices_by_class(&self, split: Option<Split>) -> BTreeMap<usize, Vec<usize>> {
        let mut map: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, e) in self.entries.iter().enumerate() {
            if split.is_none_or(|s| s == e.split) {
                map.entry(e.class_id).or_default().push(i);
            }
        }
        map
    }

    /// Checks the manifest-level invariants. Every problem is collected so the
    /// error lists all offenders at once.
    pub fn validate(&self, check_paths: bool) -> Result<()> {
        let mut problems = Vec::new();
        for (i, e) in self.entries.iter().enumerate() {
            if e.class_id >= self.num_classes {
                problems.push(format!(
                    "entry {i} ({}): class_id {} is outside [0, {})",
                    e.image_path.display(),
                    e.class_id,
                    self.num_classes
                ));
            }
            if check_paths {
                for p in [&e.image_path, &e.audio_path] {
                    if !p.is_file() {
                        problems.push(format!("entry {i}: missing file {}", p.display()));
                    }
                }
            }
        }
        for (class, members) in self.indices_by_class(Some(Split::Train)) {
            if members.len() < 2 {
                problems.push(format!(
                    "class {class} has {} train image(s); at least 2 are required",
                    members.len()
                ));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems.join("; ")))
        }
    }

    /// Serializes with paths relative to `root` where possible.
    pub fn to_text(&self) -> String {
        let mut out = format!("# num_classes={}\n", self.num_classes);
        if self.synthetic {
            out.push_str("# source=synthetic\n");
        }
        for e in &self.entries {
            let rel = |p: &Path| {
                p.strip_prefix(&self.root)
                    .unwrap_or(p)
                    .to_string_lossy()
                    .into_owned()
            };
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                rel(&e.image_path),
                rel(&e.audio_path),
                e.class_id,
                e.caption_index,
                e.split
            ));
        }
        out
    }
}

/// Parses manifest text. `root` is used to resolve relative paths and `path`
/// only labels error messages.
pub fn parse_manifest(text: &str, root: &Path, path: &Path) -> Result<Manifest> {
    let mut entries = Vec::new();
    let mut declared_classes = None;
    let mut synthetic = false;
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };

    for (lineno, raw) in text.lines().enumerate() {
        let lineno = lineno + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        if let Some(comment) = line.strip_prefix('#') {
            if let Some(n) = comment.trim().strip_prefix("num_classes=") {
                let n = n
                    .trim()
                    .parse::<usize>()
                    .map_err(|e| parse_err(lineno, format!("bad num_classes: {e}")))?;
                declared_classes = Some(n);
            } else if comment.trim() == "source=synthetic" {
                synthetic = true;
            }
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 5 {
            return Err(parse_err(
                lineno,
                format!("expected 5 tab-separated fields, found {}", fields.len()),
            ));
        }
        let class_id = fields[2]
            .parse::<usize>()
            .map_err(|e| parse_err(lineno, format!("bad class_id {:?}: {e}", fields[2])))?;
        let caption_index = fields[3]
            .parse::<u8>()
            .map_err(|e| parse_err(lineno, format!("bad caption_index {:?}: {e}", fields[3])))?;
        if caption_index >= CAPTIONS_PER_IMAGE {
            return Err(parse_err(
                lineno,
                format!("caption_index {caption_index} is outside [0, {CAPTIONS_PER_IMAGE})"),
            ));
        }
        let split = fields[4].parse::<Split>().map_err(|e| parse_err(lineno, e))?;
        entries.push(ManifestEntry {
            image_path: root.join(fields[0]),
            audio_path: root.join(fields[1]),
            class_id,
            caption_index,
            split,
        });
    }

    let num_classes = declared_classes
        .unwrap_or_else(|| entries.iter().map(|e| e.class_id + 1).max().unwrap_or(0));
    Ok(Manifest {
        entries,
        num_classes,
        root: root.to_path_buf(),
        synthetic,
    })
}

/// Reads, parses and validates a manifest file (including that every path exists).
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let root = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let manifest = parse_manifest(&text, &root, path)?;
    manifest.validate(true)?;
    Ok(manifest)
}
