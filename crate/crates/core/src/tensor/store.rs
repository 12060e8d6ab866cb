//! On-disk format: a JSON manifest next to raw little-endian blobs.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ChannelLayout, Texture, TextureSequence};
use crate::error::{Error, Result};

pub const SEQUENCE_MANIFEST: &str = "sequence.json";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
    I32,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F32 | Dtype::I32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// One entry of a blob table: file name relative to the manifest, element type, shape.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlobEntry {
    pub file: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
}

impl BlobEntry {
    pub fn new(file: impl Into<String>, dtype: Dtype, shape: Vec<usize>) -> Self {
        BlobEntry { file: file.into(), dtype, shape }
    }

    pub fn elements(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Values that can live in a blob.
pub trait BlobValue: Copy {
    const DTYPE: Dtype;
    fn put(self, out: &mut Vec<u8>);
    fn get(bytes: &[u8]) -> Self;
}

impl BlobValue for f32 {
    const DTYPE: Dtype = Dtype::F32;
    fn put(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn get(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl BlobValue for f64 {
    const DTYPE: Dtype = Dtype::F64;
    fn put(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn get(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

impl BlobValue for i32 {
    const DTYPE: Dtype = Dtype::I32;
    fn put(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn get(bytes: &[u8]) -> Self {
        i32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

/// Writes `values` to `dir/entry.file`. The entry's dtype and shape must agree with the data.
pub fn write_blob<T: BlobValue>(dir: &Path, entry: &BlobEntry, values: &[T]) -> Result<()> {
    if entry.dtype != T::DTYPE || entry.elements() != values.len() {
        return Err(Error::Shape(format!(
            "blob {} declared {:?}{:?}, got {} {:?} values",
            entry.file,
            entry.dtype,
            entry.shape,
            values.len(),
            T::DTYPE
        )));
    }
    let mut bytes = Vec::with_capacity(values.len() * T::DTYPE.size());
    for v in values {
        v.put(&mut bytes);
    }
    let path = dir.join(&entry.file);
    fs::write(&path, bytes).map_err(|e| Error::io(&path, e))
}

pub fn read_blob<T: BlobValue>(dir: &Path, entry: &BlobEntry) -> Result<Vec<T>> {
    let path = dir.join(&entry.file);
    if entry.dtype != T::DTYPE {
        return Err(Error::manifest(&path, format!("expected dtype {:?}, manifest says {:?}", T::DTYPE, entry.dtype)));
    }
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let expected = (entry.elements() * T::DTYPE.size()) as u64;
    if bytes.len() as u64 != expected {
        return Err(Error::BlobSize { path, expected, actual: bytes.len() as u64 });
    }
    Ok(bytes.chunks_exact(T::DTYPE.size()).map(T::get).collect())
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::manifest(path, e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::manifest(path, e.to_string()))
}

pub(crate) fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceManifest {
    pub version: u32,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub layout: ChannelLayout,
    pub frame_rate: f64,
    pub blob_paths: Vec<String>,
}

/// Writes `dir/sequence.json` plus one `frame_NNNNN.f32` blob per frame.
pub fn save_sequence(seq: &TextureSequence, dir: &Path) -> Result<PathBuf> {
    ensure_dir(dir)?;
    let (height, width, channels) = seq.shape();
    let mut blob_paths = Vec::with_capacity(seq.len());
    for (i, frame) in seq.frames().iter().enumerate() {
        let entry = BlobEntry::new(format!("frame_{i:05}.f32"), Dtype::F32, vec![height, width, channels]);
        write_blob(dir, &entry, frame.data())?;
        blob_paths.push(entry.file);
    }
    let manifest = SequenceManifest {
        version: FORMAT_VERSION,
        frames: seq.len(),
        height,
        width,
        channels,
        layout: seq.layout().clone(),
        frame_rate: seq.frame_rate(),
        blob_paths,
    };
    let path = dir.join(SEQUENCE_MANIFEST);
    write_json(&path, &manifest)?;
    Ok(path)
}

/// Loads a sequence from its manifest. A directory path resolves to `dir/sequence.json`.
pub fn load_sequence(manifest_path: &Path) -> Result<TextureSequence> {
    let manifest_path =
        if manifest_path.is_dir() { manifest_path.join(SEQUENCE_MANIFEST) } else { manifest_path.to_path_buf() };
    let m: SequenceManifest = read_json(&manifest_path)?;
    if m.version != FORMAT_VERSION {
        return Err(Error::manifest(&manifest_path, format!("unsupported version {}", m.version)));
    }
    if m.blob_paths.len() != m.frames || m.frames == 0 {
        return Err(Error::manifest(
            &manifest_path,
            format!("{} frames declared, {} blobs listed", m.frames, m.blob_paths.len()),
        ));
    }
    if m.layout.channels() != m.channels {
        return Err(Error::manifest(
            &manifest_path,
            format!("layout sums to {} channels, header says {}", m.layout.channels(), m.channels),
        ));
    }
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let mut frames = Vec::with_capacity(m.frames);
    for (i, file) in m.blob_paths.iter().enumerate() {
        let entry = BlobEntry::new(file.clone(), Dtype::F32, vec![m.height, m.width, m.channels]);
        let data = read_blob::<f32>(dir, &entry)?;
        let tex = Texture::new(m.height, m.width, m.channels, data)?;
        tex.check_finite(Some(i))?;
        frames.push(tex);
    }
    TextureSequence::new(frames, m.layout, m.frame_rate)
}
