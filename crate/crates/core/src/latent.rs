//! Packing of the two modality grids into one token sequence.
//!
//! Token order is fixed: audio tokens first (row-major over frames, then
//! bins), then video tokens (row-major over frames, then height, then width).
//! Each grid cell is one token. Channels are lifted to the shared
//! `token_dim = max(C_a, C_v)` by zero-padding, which `unpack` undoes exactly.
//! The task token, when present, sits after the last video token.

use std::fmt;

use ndarray::{s, Array1, Array2, Array4, ArrayView1, ArrayView2, ArrayView4};
use serde::{Deserialize, Serialize};

use crate::digest;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    Audio,
    Video,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TaskId {
    /// Class (text stand-in) to audio and video.
    T2AV,
    /// Audio to video.
    A2V,
    /// Video to audio.
    V2A,
}

impl TaskId {
    pub const ALL: [TaskId; 3] = [TaskId::T2AV, TaskId::A2V, TaskId::V2A];

    pub fn code(self) -> u32 {
        match self {
            TaskId::T2AV => 0,
            TaskId::A2V => 1,
            TaskId::V2A => 2,
        }
    }

    pub fn from_code(code: u32) -> Result<Self> {
        Self::ALL
            .get(code as usize)
            .copied()
            .ok_or_else(|| Error::Format(format!("unknown task code {code}")))
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskId::T2AV => "t2av",
            TaskId::A2V => "a2v",
            TaskId::V2A => "v2a",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "t2av" => Ok(TaskId::T2AV),
            "a2v" => Ok(TaskId::A2V),
            "v2a" => Ok(TaskId::V2A),
            other => Err(Error::InvalidConfig(format!("unknown task '{other}'"))),
        }
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Shapes of both modality grids.
///
/// `audio_shape` is `(channels, frames, bins, 1)`, `video_shape` is
/// `(channels, frames, height, width)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModalityLayout {
    audio_shape: [usize; 4],
    video_shape: [usize; 4],
}

impl ModalityLayout {
    pub fn new(audio_shape: [usize; 4], video_shape: [usize; 4]) -> Result<Self> {
        if audio_shape.iter().chain(&video_shape).any(|&d| d == 0) {
            return Err(Error::InvalidConfig("layout dimensions must be >= 1".into()));
        }
        if audio_shape[3] != 1 {
            return Err(Error::InvalidConfig(format!(
                "audio grid must have a trailing unit axis, got {audio_shape:?}"
            )));
        }
        Ok(Self { audio_shape, video_shape })
    }

    pub fn audio_shape(&self) -> [usize; 4] {
        self.audio_shape
    }

    pub fn video_shape(&self) -> [usize; 4] {
        self.video_shape
    }

    pub fn audio_channels(&self) -> usize {
        self.audio_shape[0]
    }

    pub fn video_channels(&self) -> usize {
        self.video_shape[0]
    }

    pub fn token_dim(&self) -> usize {
        self.audio_shape[0].max(self.video_shape[0])
    }

    pub fn audio_token_count(&self) -> usize {
        self.audio_shape[1] * self.audio_shape[2]
    }

    pub fn video_token_count(&self) -> usize {
        self.video_shape[1] * self.video_shape[2] * self.video_shape[3]
    }

    pub fn packed_len(&self) -> usize {
        self.audio_token_count() + self.video_token_count()
    }

    /// Flattened element count of the audio grid.
    pub fn audio_flat_dim(&self) -> usize {
        self.audio_shape.iter().product()
    }

    pub fn video_flat_dim(&self) -> usize {
        self.video_shape.iter().product()
    }

    pub fn token_range(&self, modality: Modality) -> std::ops::Range<usize> {
        match modality {
            Modality::Audio => 0..self.audio_token_count(),
            Modality::Video => self.audio_token_count()..self.packed_len(),
        }
    }

    /// Position groups for the temporal attention pass.
    ///
    /// Each audio bin and each video pixel forms one group spanning its
    /// frames; the task token (index `packed_len`) is a group of its own.
    pub fn temporal_groups(&self) -> Vec<Vec<usize>> {
        let [_, ta, bins, _] = self.audio_shape;
        let [_, tv, h, w] = self.video_shape;
        let mut groups = Vec::with_capacity(bins + h * w + 1);
        for f in 0..bins {
            groups.push((0..ta).map(|t| t * bins + f).collect());
        }
        let offset = self.audio_token_count();
        for p in 0..h * w {
            groups.push((0..tv).map(|t| offset + t * h * w + p).collect());
        }
        groups.push(vec![self.packed_len()]);
        groups
    }

    /// Short stable digest identifying the layout.
    pub fn digest(&self) -> String {
        digest::short(self.describe().as_bytes())
    }

    /// `CxTxFx1` / `CxTxHxW` style rendering used in file headers.
    pub fn describe(&self) -> String {
        format!("audio={} video={}", shape_str(&self.audio_shape), shape_str(&self.video_shape))
    }
}

pub fn shape_str(shape: &[usize; 4]) -> String {
    shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
}

pub fn parse_shape(text: &str) -> Result<[usize; 4]> {
    let parts: Vec<usize> = text
        .split('x')
        .map(|p| p.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Format(format!("bad shape '{text}'")))?;
    parts
        .try_into()
        .map_err(|_| Error::Format(format!("shape '{text}' must have four axes")))
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnifiedLatent {
    data: Array2<f64>,
    layout: ModalityLayout,
}

impl UnifiedLatent {
    pub fn from_data(data: Array2<f64>, layout: ModalityLayout) -> Result<Self> {
        let want = [layout.packed_len(), layout.token_dim()];
        if data.shape() != want {
            return Err(Error::shape(&want, data.shape()));
        }
        Ok(Self { data, layout })
    }

    pub fn zeros(layout: ModalityLayout) -> Self {
        Self {
            data: Array2::zeros((layout.packed_len(), layout.token_dim())),
            layout,
        }
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Array2<f64> {
        &mut self.data
    }

    pub fn into_data(self) -> Array2<f64> {
        self.data
    }

    pub fn layout(&self) -> &ModalityLayout {
        &self.layout
    }

    /// Overwrite one modality's tokens with the tokens of `other`.
    pub fn copy_modality_from(&mut self, other: &UnifiedLatent, modality: Modality) {
        let r = self.layout.token_range(modality);
        self.data
            .slice_mut(s![r.clone(), ..])
            .assign(&other.data.slice(s![r, ..]));
    }
}

pub fn pack(
    audio: ArrayView4<'_, f64>,
    video: ArrayView4<'_, f64>,
    layout: &ModalityLayout,
) -> Result<UnifiedLatent> {
    if audio.shape() != layout.audio_shape {
        return Err(Error::shape(&layout.audio_shape, audio.shape()));
    }
    if video.shape() != layout.video_shape {
        return Err(Error::shape(&layout.video_shape, video.shape()));
    }
    let mut data = Array2::zeros((layout.packed_len(), layout.token_dim()));
    let [ca, ta, bins, _] = layout.audio_shape;
    for t in 0..ta {
        for f in 0..bins {
            for c in 0..ca {
                data[[t * bins + f, c]] = audio[[c, t, f, 0]];
            }
        }
    }
    let [cv, tv, h, w] = layout.video_shape;
    let offset = layout.audio_token_count();
    for t in 0..tv {
        for y in 0..h {
            for x in 0..w {
                let row = offset + (t * h + y) * w + x;
                for c in 0..cv {
                    data[[row, c]] = video[[c, t, y, x]];
                }
            }
        }
    }
    Ok(UnifiedLatent { data, layout: *layout })
}

pub fn unpack(u: &UnifiedLatent) -> Result<(Array4<f64>, Array4<f64>)> {
    let layout = &u.layout;
    let want = [layout.packed_len(), layout.token_dim()];
    if u.data.shape() != want {
        return Err(Error::Format(format!(
            "latent data {:?} does not match layout {}",
            u.data.shape(),
            layout.describe()
        )));
    }
    let bins = layout.audio_shape[2];
    let audio = Array4::from_shape_fn(layout.audio_shape, |(c, t, f, _)| u.data[[t * bins + f, c]]);
    let [_, _, h, w] = layout.video_shape;
    let offset = layout.audio_token_count();
    let video = Array4::from_shape_fn(layout.video_shape, |(c, t, y, x)| {
        u.data[[offset + (t * h + y) * w + x, c]]
    });
    Ok((audio, video))
}

/// Token-level indicator of one modality.
pub fn modality_mask(layout: &ModalityLayout, modality: Modality) -> Array1<f64> {
    let r = layout.token_range(modality);
    Array1::from_shape_fn(layout.packed_len(), |i| if r.contains(&i) { 1.0 } else { 0.0 })
}

/// Element-level indicator over the packed `(packed_len, token_dim)` grid,
/// restricted to the modality's real (unpadded) channels.
pub fn element_mask(layout: &ModalityLayout, modality: Modality) -> Array2<f64> {
    let r = layout.token_range(modality);
    let channels = match modality {
        Modality::Audio => layout.audio_channels(),
        Modality::Video => layout.video_channels(),
    };
    Array2::from_shape_fn((layout.packed_len(), layout.token_dim()), |(i, c)| {
        if r.contains(&i) && c < channels {
            1.0
        } else {
            0.0
        }
    })
}

/// Row `task.code()` of the task-token table.
pub fn task_token(task: TaskId, table: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
    if table.nrows() != TaskId::ALL.len() {
        return Err(Error::shape(&[TaskId::ALL.len(), table.ncols()], table.shape()));
    }
    Ok(table.row(task.code() as usize).to_owned())
}

/// Sinusoidal step embedding: `(sin, cos)` pairs of `t / 10000^(2i/dim)`.
pub fn time_embed(t: usize, dim: usize) -> Result<Array1<f64>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::InvalidConfig(format!("time embedding dim must be even, got {dim}")));
    }
    let mut out = Array1::zeros(dim);
    for i in 0..dim / 2 {
        let freq = 10_000f64.powf(-((2 * i) as f64) / dim as f64);
        let arg = t as f64 * freq;
        out[2 * i] = arg.sin();
        out[2 * i + 1] = arg.cos();
    }
    Ok(out)
}

/// Per-token affine lift of the packed tokens into the model width, with the
/// task token appended last and positional embeddings added everywhere.
///
/// `weight` is `(token_dim, model_dim)`; `positions` has `packed_len + 1` rows.
pub fn patchify(
    tokens: ArrayView2<'_, f64>,
    task_token: ArrayView1<'_, f64>,
    weight: ArrayView2<'_, f64>,
    bias: ArrayView1<'_, f64>,
    positions: ArrayView2<'_, f64>,
) -> Result<Array2<f64>> {
    let (len, token_dim) = tokens.dim();
    let model_dim = weight.ncols();
    if weight.nrows() != token_dim {
        return Err(Error::shape(&[token_dim, model_dim], weight.shape()));
    }
    if bias.len() != model_dim || task_token.len() != model_dim {
        return Err(Error::shape(&[model_dim], &[bias.len().min(task_token.len())]));
    }
    if positions.dim() != (len + 1, model_dim) {
        return Err(Error::shape(&[len + 1, model_dim], positions.shape()));
    }
    let mut out = Array2::zeros((len + 1, model_dim));
    out.slice_mut(s![..len, ..]).assign(&(tokens.dot(&weight) + &bias));
    out.row_mut(len).assign(&task_token);
    out += &positions;
    Ok(out)
}

/// Drop the task-token position and map each remaining row back to
/// `token_dim`; `weight` is `(model_dim, token_dim)`.
pub fn unpatchify(
    seq: ArrayView2<'_, f64>,
    weight: ArrayView2<'_, f64>,
    bias: ArrayView1<'_, f64>,
    layout: &ModalityLayout,
) -> Result<UnifiedLatent> {
    let len = layout.packed_len();
    if seq.nrows() != len + 1 {
        return Err(Error::shape(&[len + 1, seq.ncols()], seq.shape()));
    }
    if weight.dim() != (seq.ncols(), layout.token_dim()) || bias.len() != layout.token_dim() {
        return Err(Error::shape(&[seq.ncols(), layout.token_dim()], weight.shape()));
    }
    let data = seq.slice(s![..len, ..]).dot(&weight) + &bias;
    UnifiedLatent::from_data(data, *layout)
}
