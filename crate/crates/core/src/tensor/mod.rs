//! Dense attribute textures, channel layouts and texture sequences.
//!
//! Textures are row-major with the channel index innermost, so all attributes
//! of one texel are contiguous: `data[(y * width + x) * channels + c]`.

mod store;

pub(crate) use store::{ensure_dir, read_json, write_json};
pub use store::{
    load_sequence, read_blob, save_sequence, write_blob, BlobEntry, Dtype, SequenceManifest, SEQUENCE_MANIFEST,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, TexelLocation};

#[derive(Debug, Clone, PartialEq)]
pub struct Texture {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Texture {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        let expected = height * width * channels;
        if data.len() != expected {
            return Err(Error::Shape(format!(
                "texture {height}x{width}x{channels} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Texture { height, width, channels, data })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, 0.0)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        Texture { height, width, channels, data: vec![value; height * width * channels] }
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Texture { height, width, channels, data }
    }

    /// Builds a texture from per-channel planes (each `height * width`, row-major).
    pub fn from_planes(height: usize, width: usize, planes: &[Vec<f64>]) -> Result<Self> {
        let channels = planes.len();
        let mut data = vec![0.0f32; height * width * channels];
        for (c, plane) in planes.iter().enumerate() {
            if plane.len() != height * width {
                return Err(Error::Shape(format!("plane {c} has {} values, expected {}", plane.len(), height * width)));
            }
            for (i, v) in plane.iter().enumerate() {
                data[i * channels + c] = *v as f32;
            }
        }
        Ok(Texture { height, width, channels, data })
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn texels(&self) -> usize {
        self.height * self.width
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn index(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[self.index(y, x, c)]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        let i = self.index(y, x, c);
        self.data[i] = v;
    }

    /// All attributes of one texel.
    pub fn texel(&self, y: usize, x: usize) -> &[f32] {
        let start = self.index(y, x, 0);
        &self.data[start..start + self.channels]
    }

    /// Copies channel `c` out as a row-major `f64` plane.
    pub fn plane(&self, c: usize) -> Vec<f64> {
        self.data.iter().skip(c).step_by(self.channels).map(|&v| v as f64).collect()
    }

    pub fn planes(&self) -> Vec<Vec<f64>> {
        (0..self.channels).map(|c| self.plane(c)).collect()
    }

    pub fn same_shape(&self, other: &Texture) -> bool {
        self.shape() == other.shape()
    }

    pub(crate) fn expect_shape(&self, other: &Texture, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::Shape(format!("{what}: {:?} vs {:?}", self.shape(), other.shape())))
        }
    }

    /// Fails on the first NaN or infinity, reporting where it sits.
    pub fn check_finite(&self, frame: Option<usize>) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => {
                let texel = i / self.channels;
                Err(Error::NonFinite(TexelLocation {
                    frame,
                    y: texel / self.width,
                    x: texel % self.width,
                    channel: i % self.channels,
                }))
            }
        }
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Texture) -> f32 {
        self.data.iter().zip(&other.data).fold(0.0f32, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn energy(&self) -> f64 {
        self.data.iter().map(|&v| (v as f64) * (v as f64)).sum()
    }

    pub fn add_assign(&mut self, other: &Texture) -> Result<()> {
        self.expect_shape(other, "add")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
        Ok(())
    }

    pub fn sub(&self, other: &Texture) -> Result<Texture> {
        self.expect_shape(other, "sub")?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Texture::new(self.height, self.width, self.channels, data)
    }

    pub fn scaled(&self, s: f32) -> Texture {
        Texture {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }
}

/// A named, contiguous run of channels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelGroup {
    pub name: String,
    pub channels: usize,
}

impl ChannelGroup {
    pub fn new(name: &str, channels: usize) -> Self {
        ChannelGroup { name: name.to_string(), channels }
    }
}

pub const POSITION_MU: &str = "position_mu";
pub const OFFSET_D: &str = "offset_d";
pub const ROTATION_Q: &str = "rotation_q";
pub const SCALE_S: &str = "scale_s";
pub const OPACITY_A: &str = "opacity_a";
pub const SH_ETA: &str = "sh_eta";

/// Geometry groups compressed by the student (11 channels).
pub const GEOMETRY_GROUPS: [&str; 4] = [OFFSET_D, ROTATION_Q, SCALE_S, OPACITY_A];
/// Appearance groups compressed by the student (12 channels).
pub const APPEARANCE_GROUPS: [&str; 1] = [SH_ETA];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ChannelLayout {
    groups: Vec<ChannelGroup>,
}

impl ChannelLayout {
    pub fn new(groups: Vec<ChannelGroup>) -> Result<Self> {
        for (i, g) in groups.iter().enumerate() {
            if g.channels == 0 {
                return Err(Error::Config(format!("group `{}` has no channels", g.name)));
            }
            if groups[..i].iter().any(|o| o.name == g.name) {
                return Err(Error::Config(format!("duplicate group `{}`", g.name)));
            }
        }
        Ok(ChannelLayout { groups })
    }

    /// The full 26-channel splat attribute layout.
    pub fn full() -> Self {
        ChannelLayout {
            groups: vec![
                ChannelGroup::new(POSITION_MU, 3),
                ChannelGroup::new(OFFSET_D, 3),
                ChannelGroup::new(ROTATION_Q, 4),
                ChannelGroup::new(SCALE_S, 3),
                ChannelGroup::new(OPACITY_A, 1),
                ChannelGroup::new(SH_ETA, 12),
            ],
        }
    }

    /// The 23 channels the student compresses; `position_mu` comes from the template.
    pub fn student() -> Self {
        Self::full().without(&[POSITION_MU])
    }

    /// A single anonymous group, for sequences that carry no splat semantics.
    pub fn generic(channels: usize) -> Self {
        ChannelLayout { groups: vec![ChannelGroup::new("generic", channels)] }
    }

    pub fn groups(&self) -> &[ChannelGroup] {
        &self.groups
    }

    pub fn channels(&self) -> usize {
        self.groups.iter().map(|g| g.channels).sum()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.groups.iter().any(|g| g.name == name)
    }

    pub fn contains_all(&self, names: &[&str]) -> bool {
        names.iter().all(|n| self.contains(n))
    }

    /// Channel range of a group within this layout.
    pub fn range_of(&self, name: &str) -> Result<std::ops::Range<usize>> {
        let mut start = 0;
        for g in &self.groups {
            if g.name == name {
                return Ok(start..start + g.channels);
            }
            start += g.channels;
        }
        Err(Error::UnknownGroup(name.to_string()))
    }

    /// Sub-layout with the named groups, in this layout's order.
    pub fn select(&self, names: &[&str]) -> Result<ChannelLayout> {
        for n in names {
            if !self.contains(n) {
                return Err(Error::UnknownGroup(n.to_string()));
            }
        }
        Ok(ChannelLayout { groups: self.groups.iter().filter(|g| names.contains(&g.name.as_str())).cloned().collect() })
    }

    fn without(&self, names: &[&str]) -> ChannelLayout {
        ChannelLayout { groups: self.groups.iter().filter(|g| !names.contains(&g.name.as_str())).cloned().collect() }
    }

    pub fn group_names(&self) -> Vec<&str> {
        self.groups.iter().map(|g| g.name.as_str()).collect()
    }
}

/// Keeps only the requested channel groups, preserving layout order.
pub fn split_channels(tex: &Texture, layout: &ChannelLayout, group_names: &[&str]) -> Result<(Texture, ChannelLayout)> {
    if layout.channels() != tex.channels() {
        return Err(Error::Shape(format!(
            "layout describes {} channels, texture has {}",
            layout.channels(),
            tex.channels()
        )));
    }
    let sub = layout.select(group_names)?;
    let ranges: Vec<_> = sub.groups().iter().map(|g| layout.range_of(&g.name)).collect::<Result<_>>()?;
    let out_c = sub.channels();
    let mut data = Vec::with_capacity(tex.texels() * out_c);
    for texel in tex.data().chunks_exact(tex.channels()) {
        for r in &ranges {
            data.extend_from_slice(&texel[r.clone()]);
        }
    }
    Ok((Texture::new(tex.height(), tex.width(), out_c, data)?, sub))
}

/// Reassembles a texture in `layout` order from parts whose groups partition it.
pub fn merge_channels(layout: &ChannelLayout, parts: &[(&Texture, &ChannelLayout)]) -> Result<Texture> {
    let (h, w) = match parts.first() {
        Some((t, _)) => (t.height(), t.width()),
        None => return Err(Error::Shape("merge of zero parts".into())),
    };
    // (part index, channel range within that part) for each output group
    let mut sources = Vec::new();
    for g in layout.groups() {
        let mut found = None;
        for (pi, (tex, pl)) in parts.iter().enumerate() {
            if tex.height() != h || tex.width() != w || pl.channels() != tex.channels() {
                return Err(Error::Shape(format!("merge part {pi} has inconsistent shape")));
            }
            if let Ok(r) = pl.range_of(&g.name) {
                if found.is_some() {
                    return Err(Error::Config(format!("group `{}` appears in two parts", g.name)));
                }
                found = Some((pi, r));
            }
        }
        sources.push(found.ok_or_else(|| Error::UnknownGroup(g.name.clone()))?);
    }
    let total: usize = parts.iter().map(|(_, l)| l.channels()).sum();
    if total != layout.channels() {
        return Err(Error::Config("merge parts carry extra channel groups".into()));
    }
    let out_c = layout.channels();
    let mut data = Vec::with_capacity(h * w * out_c);
    for t in 0..h * w {
        for (pi, r) in &sources {
            let tex = parts[*pi].0;
            let base = t * tex.channels();
            data.extend_from_slice(&tex.data()[base + r.start..base + r.end]);
        }
    }
    Texture::new(h, w, out_c, data)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextureSequence {
    frames: Vec<Texture>,
    layout: ChannelLayout,
    frame_rate: f64,
}

impl TextureSequence {
    pub fn new(frames: Vec<Texture>, layout: ChannelLayout, frame_rate: f64) -> Result<Self> {
        let first = frames.first().ok_or_else(|| Error::Shape("a sequence needs at least one frame".into()))?;
        for (i, f) in frames.iter().enumerate() {
            if !f.same_shape(first) {
                return Err(Error::Shape(format!("frame {i} is {:?}, frame 0 is {:?}", f.shape(), first.shape())));
            }
        }
        if layout.channels() != first.channels() {
            return Err(Error::Shape(format!(
                "layout has {} channels, frames have {}",
                layout.channels(),
                first.channels()
            )));
        }
        Ok(TextureSequence { frames, layout, frame_rate })
    }

    pub fn frames(&self) -> &[Texture] {
        &self.frames
    }

    pub fn frame(&self, i: usize) -> &Texture {
        &self.frames[i]
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn layout(&self) -> &ChannelLayout {
        &self.layout
    }

    pub fn frame_rate(&self) -> f64 {
        self.frame_rate
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.frames[0].shape()
    }

    /// Restricts every frame to the named channel groups.
    pub fn select_groups(&self, names: &[&str]) -> Result<TextureSequence> {
        let mut layout = None;
        let frames = self
            .frames
            .iter()
            .map(|f| {
                let (t, l) = split_channels(f, &self.layout, names)?;
                layout = Some(l);
                Ok(t)
            })
            .collect::<Result<Vec<_>>>()?;
        TextureSequence::new(frames, layout.expect("non-empty"), self.frame_rate)
    }

    /// Subsequence of the given frame indices.
    pub fn subset(&self, indices: &[usize]) -> Result<TextureSequence> {
        let frames = indices
            .iter()
            .map(|&i| self.frames.get(i).cloned().ok_or_else(|| Error::Config(format!("frame {i} out of range"))))
            .collect::<Result<Vec<_>>>()?;
        TextureSequence::new(frames, self.layout.clone(), self.frame_rate)
    }

    pub fn into_frames(self) -> Vec<Texture> {
        self.frames
    }
}
