//! Mesh sequences, template meshes with lip metadata, and the `.msq` format.
//!
//! `.msq` layout (little-endian): magic `MSQ1`, u32 version (1), u32 V,
//! u32 T, f32 fps, u8 is_displacement, then T·V·3 f32 values, frame-major.
//! A template is an `.msq` with T = 1 plus a JSON sidecar holding
//! `lip_upper`, `lip_lower` and `lip_region` vertex indices.

use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{read_u32, Matrix};

const MSQ_MAGIC: &[u8; 4] = b"MSQ1";
const MSQ_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct MeshSequence {
    vertices: usize,
    fps: f64,
    is_displacement: bool,
    data: Vec<f64>,
}

impl MeshSequence {
    pub fn new(vertices: usize, fps: f64, is_displacement: bool, data: Vec<f64>) -> Result<Self> {
        if vertices == 0 || !data.len().is_multiple_of(vertices * 3) {
            return Err(Error::shape("mesh sequence", &[vertices, 3], &[data.len()]));
        }
        if !(fps > 0.0 && fps.is_finite()) {
            return Err(Error::InvalidArgument(format!("fps must be positive, got {fps}")));
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "mesh sequence",
                index,
            });
        }
        Ok(MeshSequence {
            vertices,
            fps,
            is_displacement,
            data,
        })
    }

    /// Wraps a T×3V matrix.
    pub fn from_matrix(m: &Matrix, fps: f64, is_displacement: bool) -> Result<Self> {
        if !m.cols().is_multiple_of(3) {
            return Err(Error::shape("mesh matrix", &[m.rows(), m.cols()], &[3]));
        }
        Self::new(m.cols() / 3, fps, is_displacement, m.data().to_vec())
    }

    pub fn to_matrix(&self) -> Matrix {
        Matrix::new(self.frames(), self.vertices * 3, self.data.clone()).expect("validated")
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices
    }

    pub fn frames(&self) -> usize {
        self.data.len() / (self.vertices * 3)
    }

    pub fn fps(&self) -> f64 {
        self.fps
    }

    pub fn is_displacement(&self) -> bool {
        self.is_displacement
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Positions (or displacements) of frame `t`, V×3 row-major.
    pub fn frame(&self, t: usize) -> &[f64] {
        let w = self.vertices * 3;
        &self.data[t * w..(t + 1) * w]
    }

    pub fn vertex(&self, t: usize, v: usize) -> [f64; 3] {
        let f = self.frame(t);
        [f[3 * v], f[3 * v + 1], f[3 * v + 2]]
    }

    pub fn truncate(&self, frames: usize) -> MeshSequence {
        let w = self.vertices * 3;
        MeshSequence {
            data: self.data[..frames.min(self.frames()) * w].to_vec(),
            ..self.clone()
        }
    }

    /// Subtracts the template from every frame.
    pub fn to_displacements(&self, template: &TemplateMesh) -> Result<MeshSequence> {
        if self.is_displacement {
            return Ok(self.clone());
        }
        template.check_vertices(self.vertices)?;
        let w = self.vertices * 3;
        let data = self
            .data
            .chunks(w)
            .flat_map(|f| f.iter().zip(template.vertices()).map(|(a, b)| a - b))
            .collect();
        MeshSequence::new(self.vertices, self.fps, true, data)
    }

    /// Adds the template when this sequence holds displacements.
    pub fn to_positions(&self, template: &TemplateMesh) -> Result<MeshSequence> {
        if !self.is_displacement {
            return Ok(self.clone());
        }
        template.check_vertices(self.vertices)?;
        let w = self.vertices * 3;
        let data = self
            .data
            .chunks(w)
            .flat_map(|f| f.iter().zip(template.vertices()).map(|(a, b)| a + b))
            .collect();
        MeshSequence::new(self.vertices, self.fps, false, data)
    }

    pub fn write_msq<W: Write>(&self, mut w: W) -> Result<()> {
        let mut buf = Vec::with_capacity(21 + self.data.len() * 4);
        buf.extend_from_slice(MSQ_MAGIC);
        buf.extend_from_slice(&MSQ_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.vertices as u32).to_le_bytes());
        buf.extend_from_slice(&(self.frames() as u32).to_le_bytes());
        buf.extend_from_slice(&(self.fps as f32).to_le_bytes());
        buf.push(u8::from(self.is_displacement));
        for &v in &self.data {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_msq<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MSQ_MAGIC {
            return Err(Error::Format("bad .msq magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != MSQ_VERSION {
            return Err(Error::Format(format!("unsupported .msq version {version}")));
        }
        let v = read_u32(&mut r)? as usize;
        let t = read_u32(&mut r)? as usize;
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let fps = f32::from_le_bytes(b4) as f64;
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag)?;
        if flag[0] > 1 {
            return Err(Error::Format("bad displacement flag".into()));
        }
        if v == 0 || t == 0 {
            return Err(Error::Format(format!(".msq with V={v}, T={t}")));
        }
        let mut buf = vec![0u8; t * v * 3 * 4];
        r.read_exact(&mut buf)?;
        let data = buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        MeshSequence::new(v, fps, flag[0] == 1, data).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::new();
        self.write_msq(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read_msq(bytes.as_slice())
    }
}

/// Vertex indices of the lip contour pairs and the lip region.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LipMetadata {
    pub lip_upper: Vec<usize>,
    pub lip_lower: Vec<usize>,
    pub lip_region: Vec<usize>,
}

impl LipMetadata {
    pub fn validate(&self, vertices: usize) -> Result<()> {
        if self.lip_upper.is_empty() || self.lip_upper.len() != self.lip_lower.len() {
            return Err(Error::Metadata(format!(
                "lip pairs need equal, non-zero lengths (upper {}, lower {})",
                self.lip_upper.len(),
                self.lip_lower.len()
            )));
        }
        let all = self
            .lip_upper
            .iter()
            .chain(&self.lip_lower)
            .chain(&self.lip_region);
        if let Some(bad) = all.clone().find(|&&i| i >= vertices) {
            return Err(Error::Metadata(format!("lip index {bad} out of range for V={vertices}")));
        }
        let region: BTreeSet<usize> = self.lip_region.iter().copied().collect();
        if let Some(missing) = self
            .lip_upper
            .iter()
            .chain(&self.lip_lower)
            .find(|i| !region.contains(i))
        {
            return Err(Error::Metadata(format!(
                "lip region does not contain lip vertex {missing}"
            )));
        }
        Ok(())
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Metadata(e.to_string()))
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Neutral face of one speaker plus its lip metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct TemplateMesh {
    vertices: Vec<f64>,
    lips: LipMetadata,
}

impl TemplateMesh {
    pub fn new(vertices: Vec<f64>, lips: LipMetadata) -> Result<Self> {
        if vertices.is_empty() || !vertices.len().is_multiple_of(3) {
            return Err(Error::shape("template", &[vertices.len()], &[3]));
        }
        if let Some(index) = vertices.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "template",
                index,
            });
        }
        lips.validate(vertices.len() / 3)?;
        Ok(TemplateMesh { vertices, lips })
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.len() / 3
    }

    pub fn vertices(&self) -> &[f64] {
        &self.vertices
    }

    pub fn lips(&self) -> &LipMetadata {
        &self.lips
    }

    pub fn lip_region(&self) -> &[usize] {
        &self.lips.lip_region
    }

    pub fn check_vertices(&self, v: usize) -> Result<()> {
        if v != self.vertex_count() {
            return Err(Error::Topology {
                expected: self.vertex_count(),
                found: v,
            });
        }
        Ok(())
    }

    pub fn as_sequence(&self, fps: f64) -> MeshSequence {
        MeshSequence::new(self.vertex_count(), fps, false, self.vertices.clone()).expect("validated")
    }

    /// Writes `<path>` (`.msq`, T = 1) and the JSON sidecar.
    pub fn save(&self, msq: impl AsRef<Path>, json: impl AsRef<Path>, fps: f64) -> Result<()> {
        self.as_sequence(fps).save(msq)?;
        self.lips.save_json(json)
    }

    pub fn load(msq: impl AsRef<Path>, json: impl AsRef<Path>) -> Result<Self> {
        let seq = MeshSequence::load(msq)?;
        if seq.frames() != 1 {
            return Err(Error::Format(format!(
                "template must have exactly one frame, found {}",
                seq.frames()
            )));
        }
        let lips = LipMetadata::load_json(json)?;
        TemplateMesh::new(seq.data().to_vec(), lips)
    }
}
