//! Binary AER codec for the N-MNIST 5-byte record format plus dataset
//! directory indexing.
//!
//! Record layout (big-endian packed):
//! byte 0 = x, byte 1 = y, byte 2 bit 7 = polarity (1 = ON),
//! byte 2 bits 6..0 = timestamp bits 22..16, byte 3 = bits 15..8,
//! byte 4 = bits 7..0. Timestamps are microseconds.

use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

pub const RECORD_LEN: usize = 5;
/// Timestamps are packed into 23 bits.
pub const MAX_TIMESTAMP_US: u32 = (1 << 23) - 1;
/// N-MNIST sensor extent.
pub const N_MNIST_DIM: u16 = 34;

#[derive(Debug, Error)]
pub enum AerError {
    #[error("truncated record: {0} bytes is not a multiple of {RECORD_LEN}")]
    TruncatedRecord(usize),
    #[error("coordinate out of range: ({x},{y}) with extent {width}x{height} at record {index}")]
    CoordinateOutOfRange {
        x: u8,
        y: u8,
        width: u16,
        height: u16,
        index: usize,
    },
    #[error("field overflow: {0}")]
    FieldOverflow(String),
    #[error("missing dataset split directory: {0}")]
    MissingSplit(String),
    #[error("unlabeled directory under {split}: {name:?} (expected 0-9)")]
    UnlabeledDirectory { split: String, name: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Polarity {
    On,
    Off,
}

impl Polarity {
    pub fn as_bit(self) -> u8 {
        match self {
            Polarity::On => 1,
            Polarity::Off => 0,
        }
    }

    pub fn parse(s: &str) -> Option<Polarity> {
        match s.to_ascii_lowercase().as_str() {
            "on" => Some(Polarity::On),
            "off" => Some(Polarity::Off),
            _ => None,
        }
    }
}

impl std::fmt::Display for Polarity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Polarity::On => write!(f, "ON"),
            Polarity::Off => write!(f, "OFF"),
        }
    }
}

/// One AER event: pixel address, polarity and microsecond timestamp.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Event {
    pub x: u8,
    pub y: u8,
    pub polarity: Polarity,
    pub t_us: u32,
}

/// An ordered event sequence with its sensor extent.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventStream {
    pub events: Vec<Event>,
    pub width: u16,
    pub height: u16,
}

impl EventStream {
    pub fn duration_us(&self) -> u32 {
        self.events.last().map(|e| e.t_us).unwrap_or(0)
    }
}

/// Decode output. `reordered` counts events that arrived with a timestamp
/// smaller than their predecessor and were stably sorted into place.
#[derive(Debug, Clone)]
pub struct Decoded {
    pub stream: EventStream,
    pub reordered: usize,
}

/// Decode a raw byte buffer into an event stream.
///
/// Strict: the length must be an exact multiple of the record size and all
/// coordinates must lie within the declared extent. Out-of-order timestamps
/// are accepted and stably sorted, with the count reported to the caller.
pub fn decode_events(bytes: &[u8], width: u16, height: u16) -> Result<Decoded, AerError> {
    if bytes.len() % RECORD_LEN != 0 {
        return Err(AerError::TruncatedRecord(bytes.len()));
    }
    let mut events = Vec::with_capacity(bytes.len() / RECORD_LEN);
    let mut reordered = 0usize;
    let mut last_t = 0u32;
    for (index, rec) in bytes.chunks_exact(RECORD_LEN).enumerate() {
        let x = rec[0];
        let y = rec[1];
        if u16::from(x) >= width || u16::from(y) >= height {
            return Err(AerError::CoordinateOutOfRange {
                x,
                y,
                width,
                height,
                index,
            });
        }
        let polarity = if rec[2] & 0x80 != 0 {
            Polarity::On
        } else {
            Polarity::Off
        };
        let t_us = (u32::from(rec[2] & 0x7f) << 16) | (u32::from(rec[3]) << 8) | u32::from(rec[4]);
        if t_us < last_t {
            reordered += 1;
        }
        last_t = t_us;
        events.push(Event {
            x,
            y,
            polarity,
            t_us,
        });
    }
    if reordered > 0 {
        events.sort_by_key(|e| e.t_us);
    }
    Ok(Decoded {
        stream: EventStream {
            events,
            width,
            height,
        },
        reordered,
    })
}

/// Encode an event stream back to the 5-byte record format.
///
/// Exact inverse of [`decode_events`] for in-order streams.
pub fn encode_events(stream: &EventStream) -> Result<Vec<u8>, AerError> {
    let mut out = Vec::with_capacity(stream.events.len() * RECORD_LEN);
    for e in &stream.events {
        if e.t_us > MAX_TIMESTAMP_US {
            return Err(AerError::FieldOverflow(format!(
                "timestamp {} exceeds 23-bit field",
                e.t_us
            )));
        }
        if u16::from(e.x) >= stream.width || u16::from(e.y) >= stream.height {
            return Err(AerError::FieldOverflow(format!(
                "coordinate ({},{}) outside extent {}x{}",
                e.x, e.y, stream.width, stream.height
            )));
        }
        out.push(e.x);
        out.push(e.y);
        out.push((e.polarity.as_bit() << 7) | ((e.t_us >> 16) as u8 & 0x7f));
        out.push((e.t_us >> 8) as u8);
        out.push(e.t_us as u8);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "Train",
            Split::Test => "Test",
        }
    }
}

#[derive(Debug, Clone)]
pub struct IndexEntry {
    pub path: PathBuf,
    pub label: u8,
    pub split: Split,
}

/// Immutable listing of a dataset directory, in deterministic order.
#[derive(Debug, Clone)]
pub struct DatasetIndex {
    pub entries: Vec<IndexEntry>,
}

impl DatasetIndex {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &IndexEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn len_of(&self, split: Split) -> usize {
        self.split(split).count()
    }
}

/// Index a dataset rooted at `root`, which must contain `Train/` and `Test/`
/// with digit-named subdirectories holding `.bin` files.
///
/// Entries are sorted lexicographically by (split dir, label, file name) so
/// the order never depends on filesystem enumeration order.
pub fn index_dataset(root: &Path) -> Result<DatasetIndex, AerError> {
    let mut entries = Vec::new();
    for split in [Split::Train, Split::Test] {
        let split_dir = root.join(split.dir_name());
        if !split_dir.is_dir() {
            return Err(AerError::MissingSplit(split_dir.display().to_string()));
        }
        let mut class_dirs = Vec::new();
        for entry in fs::read_dir(&split_dir)? {
            let entry = entry?;
            if !entry.file_type()?.is_dir() {
                continue;
            }
            let name = entry.file_name().to_string_lossy().into_owned();
            let label = match name.parse::<u8>() {
                Ok(d) if d <= 9 => d,
                _ => {
                    return Err(AerError::UnlabeledDirectory {
                        split: split.dir_name().to_string(),
                        name,
                    })
                }
            };
            class_dirs.push((label, entry.path()));
        }
        class_dirs.sort_by_key(|(label, _)| *label);
        for (label, dir) in class_dirs {
            let mut files = Vec::new();
            for entry in fs::read_dir(&dir)? {
                let entry = entry?;
                let path = entry.path();
                if path.extension().map(|e| e == "bin").unwrap_or(false) && path.is_file() {
                    files.push(path);
                }
            }
            files.sort();
            entries.extend(files.into_iter().map(|path| IndexEntry {
                path,
                label,
                split,
            }));
        }
    }
    Ok(DatasetIndex { entries })
}

/// Read and decode one `.bin` file with the N-MNIST extent.
pub fn read_event_file(path: &Path) -> Result<Decoded, AerError> {
    let bytes = fs::read(path)?;
    decode_events(&bytes, N_MNIST_DIM, N_MNIST_DIM)
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// 64-bit FNV-1a over a byte slice, resumable via the `hash` accumulator.
pub fn fnv1a64(hash: u64, bytes: &[u8]) -> u64 {
    let mut h = hash;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// Dataset fingerprint: FNV-1a over the canonical (decoded, re-encoded)
/// event bytes of every file in index order.
pub fn dataset_fingerprint(index: &DatasetIndex) -> Result<u64, AerError> {
    let mut hash = FNV_OFFSET;
    for entry in &index.entries {
        let decoded = read_event_file(&entry.path)?;
        let bytes = encode_events(&decoded.stream)?;
        hash = fnv1a64(hash, &bytes);
    }
    Ok(hash)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    #[test]
    fn decode_single_record() {
        let d = decode_events(&[0x05, 0x0a, 0x80, 0x00, 0x64], 34, 34).unwrap();
        assert_eq!(d.stream.events.len(), 1);
        let e = d.stream.events[0];
        assert_eq!((e.x, e.y, e.polarity, e.t_us), (5, 10, Polarity::On, 100));
        assert_eq!(d.reordered, 0);
    }

    #[test]
    fn decode_empty() {
        let d = decode_events(&[], 34, 34).unwrap();
        assert!(d.stream.events.is_empty());
    }

    #[test]
    fn decode_max_timestamp_off_polarity() {
        let d = decode_events(&[0x00, 0x00, 0x7f, 0xff, 0xff], 34, 34).unwrap();
        let e = d.stream.events[0];
        assert_eq!(e.polarity, Polarity::Off);
        assert_eq!(e.t_us, (1 << 23) - 1);
        assert_eq!(e.t_us, 8_388_607);
    }

    #[test]
    fn decode_rejects_truncated() {
        let err = decode_events(&[0x01, 0x02, 0x03], 34, 34).unwrap_err();
        assert!(matches!(err, AerError::TruncatedRecord(3)));
    }

    #[test]
    fn decode_rejects_out_of_range_coordinate() {
        let err = decode_events(&[34, 0, 0x80, 0x00, 0x01], 34, 34).unwrap_err();
        assert!(matches!(err, AerError::CoordinateOutOfRange { x: 34, .. }));
    }

    #[test]
    fn decode_sorts_out_of_order_and_counts() {
        // two records with descending timestamps
        let bytes = [0u8, 0, 0x80, 0x01, 0x00, 0, 0, 0x80, 0x00, 0x10];
        let d = decode_events(&bytes, 34, 34).unwrap();
        assert_eq!(d.reordered, 1);
        assert_eq!(d.stream.events[0].t_us, 0x10);
        assert_eq!(d.stream.events[1].t_us, 0x100);
    }

    #[test]
    fn encode_is_inverse_of_decode() {
        let e = Event {
            x: 5,
            y: 10,
            polarity: Polarity::On,
            t_us: 100,
        };
        let stream = EventStream {
            events: vec![e],
            width: 34,
            height: 34,
        };
        assert_eq!(
            encode_events(&stream).unwrap(),
            vec![0x05, 0x0a, 0x80, 0x00, 0x64]
        );
    }

    #[test]
    fn encode_rejects_timestamp_overflow() {
        let stream = EventStream {
            events: vec![Event {
                x: 0,
                y: 0,
                polarity: Polarity::On,
                t_us: 1 << 23,
            }],
            width: 34,
            height: 34,
        };
        assert!(matches!(
            encode_events(&stream),
            Err(AerError::FieldOverflow(_))
        ));
    }

    #[test]
    fn index_single_file() {
        let tmp = tempfile::tempdir().unwrap();
        fs::create_dir_all(tmp.path().join("Train/3")).unwrap();
        fs::create_dir_all(tmp.path().join("Test/0")).unwrap();
        fs::write(tmp.path().join("Train/3/00001.bin"), []).unwrap();
        let index = index_dataset(tmp.path()).unwrap();
        assert_eq!(index.entries.len(), 1);
        assert_eq!(index.entries[0].label, 3);
        assert_eq!(index.entries[0].split, Split::Train);
    }

    #[test]
    fn index_empty_splits_ok() {
        let tmp = tempfile::tempdir().unwrap();
        fs::create_dir_all(tmp.path().join("Train")).unwrap();
        fs::create_dir_all(tmp.path().join("Test")).unwrap();
        let index = index_dataset(tmp.path()).unwrap();
        assert!(index.entries.is_empty());
    }

    #[test]
    fn index_rejects_unlabeled_directory() {
        let tmp = tempfile::tempdir().unwrap();
        fs::create_dir_all(tmp.path().join("Train/A")).unwrap();
        fs::create_dir_all(tmp.path().join("Test")).unwrap();
        let err = index_dataset(tmp.path()).unwrap_err();
        assert!(matches!(err, AerError::UnlabeledDirectory { .. }));
    }

    #[test]
    fn index_missing_split() {
        let tmp = tempfile::tempdir().unwrap();
        fs::create_dir_all(tmp.path().join("Train")).unwrap();
        let err = index_dataset(tmp.path()).unwrap_err();
        assert!(matches!(err, AerError::MissingSplit(_)));
    }

    #[test]
    fn fingerprint_changes_with_content() {
        let tmp = tempfile::tempdir().unwrap();
        fs::create_dir_all(tmp.path().join("Train/0")).unwrap();
        fs::create_dir_all(tmp.path().join("Test")).unwrap();
        fs::write(
            tmp.path().join("Train/0/a.bin"),
            [0u8, 0, 0x80, 0x00, 0x01],
        )
        .unwrap();
        let f1 = dataset_fingerprint(&index_dataset(tmp.path()).unwrap()).unwrap();
        fs::write(
            tmp.path().join("Train/0/a.bin"),
            [0u8, 0, 0x80, 0x00, 0x02],
        )
        .unwrap();
        let f2 = dataset_fingerprint(&index_dataset(tmp.path()).unwrap()).unwrap();
        assert_ne!(f1, f2);
    }
}
