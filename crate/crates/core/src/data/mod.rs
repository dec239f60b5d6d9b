//! CAN log ingestion, feature encoding, windowing, splitting and synthetic
//! traffic generation.

mod csv;
mod synth;
mod window;

pub use csv::{format_row, parse_can_csv, parse_can_str, write_can_csv};
pub use synth::{generate_synthetic, AttackKind, AttackSpec, BytePattern, IdStream, SynthConfig, VehicleProfile};
pub use window::{
    batch_features, class_frequencies, encode_message, label_window, make_windows, split_stream, EncodedMessage,
    SplitRatios, StreamSplit, WindowSample, FEATURE_SCALE, ID_OFFSET, PAD_VALUE,
};

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::config::ConfigError;

/// Number of encoded features per message: id plus eight payload slots.
pub const FEATURES: usize = 9;
/// Largest standard (11-bit) identifier.
pub const MAX_STANDARD_ID: u32 = 0x7FF;
/// Largest extended (29-bit) identifier.
pub const MAX_EXTENDED_ID: u32 = 0x1FFF_FFFF;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{source_name}:{line}: {message}")]
    Parse {
        source_name: String,
        line: usize,
        message: String,
    },
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("need at least {window} messages for one window, got {n}")]
    TooFewMessages { n: usize, window: usize },
    #[error("{segment} segment has {len} messages, fewer than the window size {window}")]
    ShortSegment {
        segment: &'static str,
        len: usize,
        window: usize,
    },
    #[error("identifier {0:#x} is extended (29-bit); the feature encoding covers 11-bit ids only")]
    ExtendedId(u32),
    #[error("class {class} is not part of label space {space}")]
    ClassNotInSpace { class: AttackClass, space: LabelSpace },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    ConfigFile(#[from] ConfigError),
}

/// Per-message flag as written in capture files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Flag {
    /// `R`
    Normal,
    /// `T`
    Attack,
}

impl Flag {
    pub fn letter(self) -> char {
        match self {
            Flag::Normal => 'R',
            Flag::Attack => 'T',
        }
    }
}

/// Every traffic class appearing in the supported captures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AttackClass {
    Normal,
    Dos,
    Fuzzy,
    Gear,
    Rpm,
    Flooding,
    Malfunction,
}

impl AttackClass {
    pub const ALL: [AttackClass; 7] = [
        AttackClass::Normal,
        AttackClass::Dos,
        AttackClass::Fuzzy,
        AttackClass::Gear,
        AttackClass::Rpm,
        AttackClass::Flooding,
        AttackClass::Malfunction,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AttackClass::Normal => "normal",
            AttackClass::Dos => "dos",
            AttackClass::Fuzzy => "fuzzy",
            AttackClass::Gear => "gear",
            AttackClass::Rpm => "rpm",
            AttackClass::Flooding => "flooding",
            AttackClass::Malfunction => "malfunction",
        }
    }
}

impl fmt::Display for AttackClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AttackClass {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let lower = s.trim().to_ascii_lowercase();
        AttackClass::ALL
            .into_iter()
            .find(|c| c.name() == lower)
            .ok_or_else(|| format!("unknown attack class `{s}`"))
    }
}

/// Class index assignment used by a model head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LabelSpace {
    /// normal, dos, fuzzy, gear, rpm
    CarHacking5,
    /// normal, flooding, fuzzy, malfunction
    Survival4,
    /// Survival4 classes; dos folds into flooding, gear and rpm into malfunction.
    Unified4,
}

impl LabelSpace {
    pub fn classes(self) -> &'static [AttackClass] {
        use AttackClass::*;
        match self {
            LabelSpace::CarHacking5 => &[Normal, Dos, Fuzzy, Gear, Rpm],
            LabelSpace::Survival4 | LabelSpace::Unified4 => &[Normal, Flooding, Fuzzy, Malfunction],
        }
    }

    pub fn len(self) -> usize {
        self.classes().len()
    }

    pub fn is_empty(self) -> bool {
        false
    }

    pub fn name(self) -> &'static str {
        match self {
            LabelSpace::CarHacking5 => "carhacking5",
            LabelSpace::Survival4 => "survival4",
            LabelSpace::Unified4 => "unified4",
        }
    }

    /// Class index of `class`, or `None` if the space cannot represent it.
    pub fn index_of(self, class: AttackClass) -> Option<usize> {
        let mapped = match (self, class) {
            (LabelSpace::Unified4, AttackClass::Dos) => AttackClass::Flooding,
            (LabelSpace::Unified4, AttackClass::Gear | AttackClass::Rpm) => AttackClass::Malfunction,
            _ => class,
        };
        self.classes().iter().position(|&c| c == mapped)
    }

    pub fn class_names(self) -> Vec<&'static str> {
        self.classes().iter().map(|c| c.name()).collect()
    }
}

impl fmt::Display for LabelSpace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LabelSpace {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "carhacking5" | "car_hacking" | "carhacking" => Ok(LabelSpace::CarHacking5),
            "survival4" | "survival" => Ok(LabelSpace::Survival4),
            "unified4" | "unified" => Ok(LabelSpace::Unified4),
            other => Err(format!("unknown label space `{other}`")),
        }
    }
}

/// One parsed CAN frame.
#[derive(Debug, Clone, PartialEq)]
pub struct CanMessage {
    pub timestamp: f64,
    pub can_id: u32,
    dlc: u8,
    data: [u8; 8],
    attack_class: AttackClass,
}

impl CanMessage {
    pub fn new(timestamp: f64, can_id: u32, payload: &[u8], attack_class: AttackClass) -> Result<Self, DataError> {
        if payload.len() > 8 {
            return Err(DataError::Config(format!(
                "payload of {} bytes exceeds 8",
                payload.len()
            )));
        }
        if can_id > MAX_EXTENDED_ID {
            return Err(DataError::Config(format!("identifier {can_id:#x} exceeds 29 bits")));
        }
        if !(timestamp.is_finite() && timestamp >= 0.0) {
            return Err(DataError::Config(format!("invalid timestamp {timestamp}")));
        }
        let mut data = [0u8; 8];
        data[..payload.len()].copy_from_slice(payload);
        Ok(Self {
            timestamp,
            can_id,
            dlc: payload.len() as u8,
            data,
            attack_class,
        })
    }

    pub fn dlc(&self) -> usize {
        self.dlc as usize
    }

    pub fn payload(&self) -> &[u8] {
        &self.data[..self.dlc as usize]
    }

    pub fn attack_class(&self) -> AttackClass {
        self.attack_class
    }

    pub fn flag(&self) -> Flag {
        if self.attack_class == AttackClass::Normal {
            Flag::Normal
        } else {
            Flag::Attack
        }
    }

    pub fn is_extended(&self) -> bool {
        self.can_id > MAX_STANDARD_ID
    }
}

/// A capture file together with the attack class its `T` rows carry.
#[derive(Debug, Clone, PartialEq)]
pub struct CaptureSpec {
    pub path: PathBuf,
    pub class: AttackClass,
}

impl FromStr for CaptureSpec {
    type Err = String;

    /// `path:class`, e.g. `dos.csv:dos`. A bare path is a normal capture.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        match s.rsplit_once(':') {
            Some((path, class)) if !path.is_empty() => Ok(Self {
                path: PathBuf::from(path),
                class: class.parse()?,
            }),
            _ => Ok(Self {
                path: PathBuf::from(s),
                class: AttackClass::Normal,
            }),
        }
    }
}

impl fmt::Display for CaptureSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.path.display(), self.class)
    }
}

/// Windowed train / validation / test sets.
#[derive(Debug, Clone, Default)]
pub struct DatasetSplits {
    pub train: Vec<WindowSample>,
    pub val: Vec<WindowSample>,
    pub test: Vec<WindowSample>,
}

impl DatasetSplits {
    pub fn extend(&mut self, other: DatasetSplits) {
        self.train.extend(other.train);
        self.val.extend(other.val);
        self.test.extend(other.test);
    }
}

/// Preprocessing parameters shared by every capture of a run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PreprocessConfig {
    pub label_space: LabelSpace,
    pub window: usize,
    pub stride: usize,
    pub ratios: SplitRatios,
    /// Leading fraction of each capture to keep, in `(0, 1]`.
    pub fraction: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            label_space: LabelSpace::Unified4,
            window: 10,
            stride: 1,
            ratios: SplitRatios::default(),
            fraction: 1.0,
        }
    }
}

/// Splits one capture's message stream and windows each segment.
pub fn window_capture(
    messages: &[CanMessage],
    file_id: u32,
    cfg: &PreprocessConfig,
) -> Result<DatasetSplits, DataError> {
    if !(cfg.fraction > 0.0 && cfg.fraction <= 1.0) {
        return Err(DataError::Config(format!("fraction {} outside (0, 1]", cfg.fraction)));
    }
    let keep = ((messages.len() as f64) * cfg.fraction).round() as usize;
    let split = split_stream(&messages[..keep], cfg.ratios, cfg.window)?;
    let mut out = DatasetSplits::default();
    let mut offset = 0;
    for (segment, dst) in [
        (split.train, &mut out.train),
        (split.val, &mut out.val),
        (split.test, &mut out.test),
    ] {
        if !segment.is_empty() {
            let mut windows = make_windows(segment, cfg.window, cfg.stride, cfg.label_space, file_id)?;
            for w in &mut windows {
                w.origin.1 += offset;
            }
            *dst = windows;
        }
        offset += segment.len();
    }
    Ok(out)
}

/// Parses every capture and builds pooled splits; capture `i` gets file id `i`.
pub fn load_captures(captures: &[CaptureSpec], cfg: &PreprocessConfig) -> Result<DatasetSplits, DataError> {
    let mut out = DatasetSplits::default();
    for (i, cap) in captures.iter().enumerate() {
        let messages = parse_can_csv(&cap.path, cfg.label_space, cap.class)?;
        out.extend(window_capture(&messages, i as u32, cfg)?);
    }
    Ok(out)
}

pub(crate) fn io_error(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normal_is_index_zero_everywhere() {
        for space in [LabelSpace::CarHacking5, LabelSpace::Survival4, LabelSpace::Unified4] {
            assert_eq!(space.index_of(AttackClass::Normal), Some(0));
        }
    }

    #[test]
    fn unified_mapping_is_total() {
        for class in AttackClass::ALL {
            assert!(LabelSpace::Unified4.index_of(class).is_some(), "{class}");
        }
        let u = LabelSpace::Unified4;
        assert_eq!(u.index_of(AttackClass::Dos), u.index_of(AttackClass::Flooding));
        assert_eq!(u.index_of(AttackClass::Gear), u.index_of(AttackClass::Malfunction));
        assert_eq!(u.index_of(AttackClass::Rpm), u.index_of(AttackClass::Malfunction));
    }

    #[test]
    fn native_spaces_reject_foreign_classes() {
        assert_eq!(LabelSpace::CarHacking5.index_of(AttackClass::Flooding), None);
        assert_eq!(LabelSpace::Survival4.index_of(AttackClass::Gear), None);
        assert_eq!(LabelSpace::CarHacking5.index_of(AttackClass::Rpm), Some(4));
    }

    #[test]
    fn flag_follows_class() {
        let m = CanMessage::new(0.0, 0x10, &[1], AttackClass::Normal).unwrap();
        assert_eq!(m.flag(), Flag::Normal);
        let m = CanMessage::new(0.0, 0x10, &[1], AttackClass::Fuzzy).unwrap();
        assert_eq!(m.flag(), Flag::Attack);
        assert!(CanMessage::new(0.0, 0x10, &[0; 9], AttackClass::Normal).is_err());
        assert!(CanMessage::new(0.0, 0x2000_0000, &[], AttackClass::Normal).is_err());
    }

    #[test]
    fn capture_spec_parsing() {
        let c: CaptureSpec = "dir/dos.csv:dos".parse().unwrap();
        assert_eq!(c.class, AttackClass::Dos);
        assert_eq!(c.path, PathBuf::from("dir/dos.csv"));
        let c: CaptureSpec = "normal.csv".parse().unwrap();
        assert_eq!(c.class, AttackClass::Normal);
        assert!("x.csv:bogus".parse::<CaptureSpec>().is_err());
    }
}
