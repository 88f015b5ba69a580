//! Line-delimited sample manifests and duet composition.
//!
//! Each manifest line is one JSON record:
//! `{"id", "image", "audio", "width", "height", "mode", "gt": [{"class", "box"}], "split"}`.
//! Media paths are relative to the manifest's directory.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::client::{inspect_media, MediaKind, MediaWarning};
use crate::geometry::{BoundingBox, ImageDims};

pub const SINGLE_DIMS: ImageDims = ImageDims {
    width: 224,
    height: 224,
};
pub const DUET_DIMS: ImageDims = ImageDims {
    width: 448,
    height: 224,
};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("manifest line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("manifest line {line}: duplicate sample id `{id}`")]
    DuplicateId { line: usize, id: String },
    #[error("manifest line {line}: invalid ground truth: {message}")]
    InvalidGroundTruth { line: usize, message: String },
    #[error("sample `{id}` must be {expected}, got {actual}")]
    DimensionMismatch {
        id: String,
        expected: ImageDims,
        actual: ImageDims,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, DatasetError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Single,
    Duet,
}

impl Mode {
    pub fn expected_dims(&self) -> ImageDims {
        match self {
            Mode::Single => SINGLE_DIMS,
            Mode::Duet => DUET_DIMS,
        }
    }

    pub fn gt_count(&self) -> usize {
        match self {
            Mode::Single => 1,
            Mode::Duet => 2,
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "single" => Ok(Mode::Single),
            "duet" => Ok(Mode::Duet),
            other => Err(format!("unknown mode `{other}` (expected single|duet)")),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Single => "single",
            Mode::Duet => "duet",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthBox {
    pub class: String,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ManifestRecord {
    id: String,
    image: PathBuf,
    audio: PathBuf,
    width: u32,
    height: u32,
    mode: Mode,
    gt: Vec<GroundTruthBox>,
    #[serde(default)]
    split: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleManifest {
    pub id: String,
    /// Path as written in the manifest.
    pub image: PathBuf,
    pub audio: PathBuf,
    pub dims: ImageDims,
    pub gt: Vec<GroundTruthBox>,
    pub split: String,
    pub mode: Mode,
    /// Directory the relative media paths resolve against.
    pub base_dir: PathBuf,
}

impl SampleManifest {
    pub fn image_path(&self) -> PathBuf {
        self.base_dir.join(&self.image)
    }

    pub fn audio_path(&self) -> PathBuf {
        self.base_dir.join(&self.audio)
    }

    fn to_record(&self) -> ManifestRecord {
        ManifestRecord {
            id: self.id.clone(),
            image: self.image.clone(),
            audio: self.audio.clone(),
            width: self.dims.width,
            height: self.dims.height,
            mode: self.mode,
            gt: self.gt.clone(),
            split: self.split.clone(),
        }
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(&self.to_record()).expect("manifest record serializes")
    }

    /// Checks ground truth against dims and mode. Returns a warning message
    /// when the dims differ from the mode's nominal size.
    pub fn validate(&self) -> std::result::Result<Option<String>, String> {
        if self.gt.len() != self.mode.gt_count() {
            return Err(format!(
                "{} mode needs {} ground-truth box(es), found {}",
                self.mode,
                self.mode.gt_count(),
                self.gt.len()
            ));
        }
        let mut classes = HashSet::new();
        for g in &self.gt {
            if g.class.trim().is_empty() {
                return Err("empty ground-truth class".into());
            }
            if g.class != g.class.trim().to_lowercase() {
                return Err(format!("class `{}` is not a lowercase token", g.class));
            }
            if !classes.insert(g.class.as_str()) {
                return Err(format!("class `{}` appears twice", g.class));
            }
            if !g.bbox.fits(self.dims) {
                return Err(format!("box {} outside {}", g.bbox, self.dims));
            }
        }
        let nominal = self.mode.expected_dims();
        Ok((self.dims != nominal).then(|| {
            format!("sample `{}` is {}, {} mode expects {}", self.id, self.dims, self.mode, nominal)
        }))
    }
}

fn parse_line(line: &str, lineno: usize, base_dir: &Path) -> Result<SampleManifest> {
    // boxes are parsed as raw arrays first so ordering errors are reported
    // as ground-truth problems rather than generic parse errors
    let raw: serde_json::Value = serde_json::from_str(line).map_err(|e| DatasetError::Parse {
        line: lineno,
        message: e.to_string(),
    })?;
    if let Some(gt) = raw.get("gt").and_then(|g| g.as_array()) {
        for g in gt {
            if let Some(b) = g.get("box").and_then(|b| b.as_array()) {
                let nums: Vec<f64> = b.iter().filter_map(|v| v.as_f64()).collect();
                if nums.len() == 4 && (nums[0] >= nums[2] || nums[1] >= nums[3]) {
                    return Err(DatasetError::InvalidGroundTruth {
                        line: lineno,
                        message: format!("box {nums:?} is not ordered x1<x2, y1<y2"),
                    });
                }
            }
        }
    }
    let rec: ManifestRecord = serde_json::from_value(raw).map_err(|e| DatasetError::Parse {
        line: lineno,
        message: e.to_string(),
    })?;
    let dims = ImageDims::new(rec.width, rec.height).map_err(|e| DatasetError::Parse {
        line: lineno,
        message: e.to_string(),
    })?;
    let sample = SampleManifest {
        id: rec.id,
        image: rec.image,
        audio: rec.audio,
        dims,
        gt: rec.gt,
        split: rec.split,
        mode: rec.mode,
        base_dir: base_dir.to_path_buf(),
    };
    match sample.validate() {
        Ok(Some(warning)) => log::warn!("manifest line {lineno}: {warning}"),
        Ok(None) => {}
        Err(message) => return Err(DatasetError::InvalidGroundTruth { line: lineno, message }),
    }
    Ok(sample)
}

/// Parses manifest text; media paths resolve against `base_dir`.
pub fn parse_manifest(text: &str, base_dir: &Path) -> Result<Vec<SampleManifest>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let sample = parse_line(line, lineno, base_dir)?;
        if !seen.insert(sample.id.clone()) {
            return Err(DatasetError::DuplicateId {
                line: lineno,
                id: sample.id,
            });
        }
        out.push(sample);
    }
    Ok(out)
}

pub fn load_manifest(path: &Path) -> Result<Vec<SampleManifest>> {
    let io = |source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = File::open(path).map_err(io)?;
    let mut text = String::new();
    for line in BufReader::new(file).lines() {
        text.push_str(&line.map_err(io)?);
        text.push('\n');
    }
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    parse_manifest(&text, &base)
}

pub fn write_manifest(path: &Path, samples: &[SampleManifest]) -> Result<()> {
    let io = |source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut f = File::create(path).map_err(io)?;
    for s in samples {
        writeln!(f, "{}", s.to_json_line()).map_err(io)?;
    }
    Ok(())
}

/// Problem found by eager media validation.
#[derive(Debug, Clone, PartialEq)]
pub enum MediaIssue {
    Error { id: String, message: String },
    Warning { id: String, warning: MediaWarning },
}

/// Opens every referenced media file and checks format and dimensions.
pub fn validate_media(samples: &[SampleManifest]) -> Vec<MediaIssue> {
    let mut issues = Vec::new();
    for s in samples {
        match inspect_media(&s.image_path(), MediaKind::Image, Some(s.dims)) {
            Ok((_, Some(w))) => issues.push(MediaIssue::Warning {
                id: s.id.clone(),
                warning: w,
            }),
            Ok(_) => {}
            Err(e) => issues.push(MediaIssue::Error {
                id: s.id.clone(),
                message: e.to_string(),
            }),
        }
        if let Err(e) = inspect_media(&s.audio_path(), MediaKind::Audio, None) {
            issues.push(MediaIssue::Error {
                id: s.id.clone(),
                message: e.to_string(),
            });
        }
    }
    issues
}

/// Describes a side-by-side composite of two single-source samples.
///
/// `b`'s boxes shift right by the width of `a`'s frame. The composite image
/// and mixed audio are produced elsewhere; only their paths are recorded.
pub fn compose_duet(
    a: &SampleManifest,
    b: &SampleManifest,
    composite_image: impl Into<PathBuf>,
    mixed_audio: impl Into<PathBuf>,
) -> Result<SampleManifest> {
    for s in [a, b] {
        if s.dims != SINGLE_DIMS || s.mode != Mode::Single {
            return Err(DatasetError::DimensionMismatch {
                id: s.id.clone(),
                expected: SINGLE_DIMS,
                actual: s.dims,
            });
        }
    }
    let offset = f64::from(SINGLE_DIMS.width);
    let mut gt = a.gt.clone();
    for g in &b.gt {
        let bb = g.bbox;
        gt.push(GroundTruthBox {
            class: g.class.clone(),
            bbox: BoundingBox::new(bb.x1() + offset, bb.y1(), bb.x2() + offset, bb.y2())
                .expect("shift preserves ordering"),
        });
    }
    Ok(SampleManifest {
        id: format!("{}+{}", a.id, b.id),
        image: composite_image.into(),
        audio: mixed_audio.into(),
        dims: DUET_DIMS,
        gt,
        split: a.split.clone(),
        mode: Mode::Duet,
        base_dir: a.base_dir.clone(),
    })
}
