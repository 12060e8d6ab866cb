//! A teacher dataset on disk: texture sequence, pose track, template and canonical vertices.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{TemplateMesh, MESH_MANIFEST};
use crate::predictor::PoseTrack;
use crate::tensor::{
    load_sequence, read_blob, read_json, save_sequence, write_blob, write_json, BlobEntry, Dtype, TextureSequence,
    SEQUENCE_MANIFEST,
};

pub const CANONICAL_MANIFEST: &str = "canonical.json";

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub sequence: TextureSequence,
    pub poses: PoseTrack,
    pub mesh: Option<TemplateMesh>,
    /// Per-frame canonical template vertices, flattened to `3V`.
    pub canonical: Option<Vec<Vec<f64>>>,
}

#[derive(Serialize, Deserialize)]
struct CanonicalManifest {
    version: u32,
    frames: usize,
    vertices: usize,
    blob: BlobEntry,
}

impl Dataset {
    pub fn new(
        sequence: TextureSequence,
        poses: PoseTrack,
        mesh: Option<TemplateMesh>,
        canonical: Option<Vec<Vec<f64>>>,
    ) -> Result<Self> {
        if poses.len() != sequence.len() {
            return Err(Error::Shape(format!("{} texture frames but {} poses", sequence.len(), poses.len())));
        }
        if let Some(c) = &canonical {
            if c.len() != sequence.len() {
                return Err(Error::Shape(format!("{} canonical frames for {} textures", c.len(), sequence.len())));
            }
            if let Some(m) = &mesh {
                if c.iter().any(|f| f.len() != 3 * m.vertices.len()) {
                    return Err(Error::Shape("canonical frames do not match the template".into()));
                }
            }
        }
        Ok(Dataset { sequence, poses, mesh, canonical })
    }

    pub fn len(&self) -> usize {
        self.sequence.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequence.is_empty()
    }

    pub fn subset(&self, frames: &[usize]) -> Result<Dataset> {
        Dataset::new(
            self.sequence.subset(frames)?,
            self.poses.subset(frames),
            self.mesh.clone(),
            self.canonical.as_ref().map(|c| frames.iter().map(|&f| c[f].clone()).collect()),
        )
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        save_sequence(&self.sequence, dir)?;
        self.poses.save(dir)?;
        if let Some(mesh) = &self.mesh {
            mesh.save(dir)?;
        }
        if let Some(c) = &self.canonical {
            let dim = c.first().map_or(0, Vec::len);
            let blob = BlobEntry::new("canonical.f32", Dtype::F32, vec![c.len(), dim]);
            let flat: Vec<f32> = c.iter().flatten().map(|&v| v as f32).collect();
            write_blob(dir, &blob, &flat)?;
            write_json(
                &dir.join(CANONICAL_MANIFEST),
                &CanonicalManifest { version: 1, frames: c.len(), vertices: dim / 3, blob },
            )?;
        }
        Ok(())
    }

    /// Loads a dataset directory; the mesh and canonical stack are optional.
    pub fn load(dir: &Path) -> Result<Dataset> {
        if !dir.join(SEQUENCE_MANIFEST).is_file() {
            return Err(Error::Config(format!("{} is not a dataset directory", dir.display())));
        }
        let sequence = load_sequence(dir)?;
        let poses = PoseTrack::load(dir)?;
        let mesh = if dir.join(MESH_MANIFEST).is_file() { Some(TemplateMesh::load(dir)?) } else { None };
        let path = dir.join(CANONICAL_MANIFEST);
        let canonical = if path.is_file() {
            let m: CanonicalManifest = read_json(&path)?;
            if m.blob.shape != [m.frames, 3 * m.vertices] {
                return Err(Error::manifest(&path, "canonical blob shape disagrees with header"));
            }
            let flat = read_blob::<f32>(dir, &m.blob)?;
            let dim = (3 * m.vertices).max(1);
            Some(flat.chunks(dim).map(|c| c.iter().map(|&v| v as f64).collect()).collect())
        } else {
            None
        };
        Dataset::new(sequence, poses, mesh, canonical)
    }
}
