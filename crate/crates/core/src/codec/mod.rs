//! The `.vqad` bitstream: a fixed header, fp16 decoder weights, then one
//! self-contained chunk per level from coarse to fine, so every prefix of
//! whole chunks decodes to a model at a lower level of detail.
//!
//! All integers are little-endian. Layout:
//!
//! ```text
//! "VQAD" version:u16 task:u8 d:u8 L:u8 k:u8 b:u8 res:u16×L
//! nwidths:u8 widths:u16×nwidths background:f16×3 samples_per_cell:u16 flags:u8
//! w1 b1 w2 b2 as f16, row-major
//! per level: level:u8 m:u32 occupancy:⌈R^d/8⌉ bytes, then either
//!   codebook:f16×(2^b·k) indices:⌈m·b/8⌉ bytes   (flags bit 0 set)
//!   features:f16×(m·k)                          (flags bit 0 clear)
//! ```

mod bits;
pub mod checkpoint;

use half::f16;

pub use bits::{pack, unpack};

use crate::diffcore::Matrix;
use crate::field::{DecoderMlp, FieldError, NeuralField, RenderSettings, TaskKind};
use crate::grid::{FeatureGridPyramid, GridConfig, GridError, GridLevel, LevelData};
use crate::vq::{codebook_bytes, index_bytes, Codebook, IndexGrid, VqError};

pub const MAGIC: [u8; 4] = *b"VQAD";
pub const VERSION: u16 = 1;
const FLAG_VQ: u8 = 1;
/// Level byte plus `m_ℓ`.
pub const CHUNK_FRAMING: usize = 5;

#[derive(Debug, thiserror::Error)]
pub enum CodecError {
    #[error("not a vqad stream")]
    BadMagic,
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u16),
    #[error("stream ends inside the {0}")]
    Truncated(&'static str),
    #[error("level {level} is incomplete; {}", match .last_renderable {
        Some(l) => format!("levels of detail up to {l} are renderable"),
        None => "no level of detail is renderable".to_owned(),
    })]
    IncompleteLevel {
        level: usize,
        last_renderable: Option<usize>,
    },
    #[error("soft indices must be baked before encoding")]
    Unbaked,
    #[error("{0} unexpected bytes after the last level")]
    TrailingBytes(usize),
    #[error("malformed stream: {0}")]
    Invalid(String),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Vq(#[from] VqError),
}

/// Round to fp16 through fp32, ties to even.
pub fn to_f16(v: f64) -> f16 {
    f16::from_f32(v as f32)
}

/// The value an fp16 round trip yields.
pub fn quantize(v: f64) -> f64 {
    f64::from(to_f16(v).to_f32())
}

fn put_f16s(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&to_f16(*v).to_le_bytes());
    }
}

/// Decoded header fields.
#[derive(Debug, Clone, PartialEq)]
pub struct Header {
    pub version: u16,
    pub task: TaskKind,
    pub dim: usize,
    pub levels: usize,
    pub feature_dim: usize,
    /// 0 for raw feature payloads.
    pub bitwidth: u8,
    pub resolutions: Vec<u32>,
    /// `[input, hidden, output]`.
    pub widths: Vec<usize>,
    pub background: [f64; 3],
    pub samples_per_cell: usize,
    pub quantized: bool,
}

impl Header {
    pub fn byte_len(&self) -> usize {
        header_len(self.levels, self.widths.len())
    }

    fn grid_config(&self, levels: usize) -> GridConfig {
        GridConfig {
            levels,
            base_resolution: self.resolutions[0],
            feature_dim: self.feature_dim,
            dim: self.dim,
        }
    }

    fn mlp_len(&self) -> usize {
        mlp_bytes([self.widths[0], self.widths[1], self.widths[2]])
    }

    /// Byte length of level `l`'s chunk holding `m` vertices.
    pub fn chunk_len(&self, l: usize, m: usize) -> usize {
        let cells = (self.resolutions[l] as usize).pow(self.dim as u32);
        let payload = if self.quantized {
            codebook_bytes(self.bitwidth, self.feature_dim) + index_bytes(m, self.bitwidth)
        } else {
            m * self.feature_dim * 2
        };
        CHUNK_FRAMING + cells.div_ceil(8) + payload
    }
}

fn header_len(levels: usize, widths: usize) -> usize {
    4 + 2 + 1 + 4 + 2 * levels + 1 + 2 * widths + 6 + 2 + 1
}

/// fp16 bytes of a one-hidden-layer decoder with the given widths.
pub fn mlp_bytes(widths: [usize; 3]) -> usize {
    let [i, h, o] = widths;
    (i * h + h + h * o + o) * 2
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.bytes.get(self.pos..self.pos.checked_add(n)?)?;
        self.pos += n;
        Some(s)
    }

    fn u8(&mut self) -> Option<u8> {
        self.take(1).map(|b| b[0])
    }

    fn u16(&mut self) -> Option<u16> {
        self.take(2).map(|b| u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4)
            .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f16s(&mut self, n: usize) -> Option<Vec<f64>> {
        let raw = self.take(n.checked_mul(2)?)?;
        Some(
            raw.chunks_exact(2)
                .map(|c| f64::from(f16::from_le_bytes([c[0], c[1]]).to_f32()))
                .collect(),
        )
    }
}

/// Parses and validates the header.
pub fn read_header(bytes: &[u8]) -> Result<Header, CodecError> {
    let mut r = Reader { bytes, pos: 0 };
    let t = || CodecError::Truncated("header");
    let magic = r.take(4).ok_or_else(t)?;
    if magic != MAGIC {
        return Err(CodecError::BadMagic);
    }
    let version = r.u16().ok_or_else(t)?;
    if version != VERSION {
        return Err(CodecError::UnsupportedVersion(version));
    }
    let fixed = r.take(5).ok_or_else(t)?;
    let task = TaskKind::from_code(fixed[0])
        .ok_or_else(|| CodecError::Invalid(format!("unknown task code {}", fixed[0])))?;
    let (dim, levels, feature_dim, bitwidth) = (
        fixed[1] as usize,
        fixed[2] as usize,
        fixed[3] as usize,
        fixed[4],
    );
    let mut resolutions = Vec::with_capacity(levels);
    for _ in 0..levels {
        resolutions.push(u32::from(r.u16().ok_or_else(t)?));
    }
    let nwidths = r.u8().ok_or_else(t)? as usize;
    let mut widths = Vec::with_capacity(nwidths);
    for _ in 0..nwidths {
        widths.push(r.u16().ok_or_else(t)? as usize);
    }
    let bg = r.f16s(3).ok_or_else(t)?;
    let samples_per_cell = r.u16().ok_or_else(t)? as usize;
    let flags = r.u8().ok_or_else(t)?;
    let header = Header {
        version,
        task,
        dim,
        levels,
        feature_dim,
        bitwidth,
        resolutions,
        widths,
        background: [bg[0], bg[1], bg[2]],
        samples_per_cell,
        quantized: flags & FLAG_VQ != 0,
    };
    validate_header(&header, flags)?;
    Ok(header)
}

fn validate_header(h: &Header, flags: u8) -> Result<(), CodecError> {
    let bad = |m: String| Err(CodecError::Invalid(m));
    if flags & !FLAG_VQ != 0 {
        return bad(format!("unknown flags {flags:#04x}"));
    }
    if h.levels == 0 {
        return bad("no levels".into());
    }
    h.grid_config(h.levels).validate()?;
    if h.dim != h.task.spatial_dim() {
        return bad(format!(
            "{:?} streams must be {}D",
            h.task,
            h.task.spatial_dim()
        ));
    }
    if h.resolutions
        .iter()
        .enumerate()
        .any(|(l, &r)| r != h.resolutions[0] << l)
    {
        return bad("resolutions must double per level".into());
    }
    if h.widths.len() != 3
        || h.widths[0] != h.task.mlp_input_dim(h.feature_dim)
        || h.widths[1] == 0
        || h.widths[2] != h.task.output_dim()
    {
        return bad(format!("decoder widths {:?} do not fit the task", h.widths));
    }
    let bits_ok = if h.quantized {
        (1..=crate::vq::MAX_BITWIDTH).contains(&h.bitwidth)
    } else {
        h.bitwidth == 0
    };
    if !bits_ok {
        return bad(format!(
            "bitwidth {} does not fit the payload kind",
            h.bitwidth
        ));
    }
    if h.samples_per_cell == 0 {
        return bad("samples_per_cell must be positive".into());
    }
    Ok(())
}

fn check_encodable(field: &NeuralField) -> Result<(), CodecError> {
    if field
        .pyramid
        .level_data()
        .iter()
        .any(|d| matches!(d, LevelData::SoftIndices(_)))
    {
        return Err(CodecError::Unbaked);
    }
    if field.render.samples_per_cell > u16::MAX as usize
        || field.decoder.hidden_dim() > u16::MAX as usize
    {
        return Err(CodecError::Invalid(
            "decoder or render settings exceed u16 fields".into(),
        ));
    }
    Ok(())
}

/// Serializes a model with baked (or raw) level storage.
pub fn encode(field: &NeuralField) -> Result<Vec<u8>, CodecError> {
    check_encodable(field)?;
    let cfg = *field.pyramid.config();
    let quantized = field.is_quantized();
    let bitwidth = field.codebooks.first().map_or(0, |c| c.bitwidth());
    let mut out = Vec::with_capacity(size_report(field)?.total);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&[
        field.task.code(),
        cfg.dim as u8,
        cfg.levels as u8,
        cfg.feature_dim as u8,
        bitwidth,
    ]);
    for l in 0..cfg.levels {
        out.extend_from_slice(&(cfg.resolution(l) as u16).to_le_bytes());
    }
    let widths = field.decoder.widths();
    out.push(widths.len() as u8);
    for w in widths {
        out.extend_from_slice(&(w as u16).to_le_bytes());
    }
    put_f16s(&mut out, &field.render.background);
    out.extend_from_slice(&(field.render.samples_per_cell as u16).to_le_bytes());
    out.push(if quantized { FLAG_VQ } else { 0 });

    for p in field.decoder.parameters() {
        put_f16s(&mut out, p.data());
    }

    for l in 0..cfg.levels {
        let level = field.pyramid.level(l);
        out.push(l as u8);
        out.extend_from_slice(&(level.vertex_count() as u32).to_le_bytes());
        out.extend_from_slice(level.occupancy_bits());
        match &field.pyramid.level_data()[l] {
            LevelData::Indices(v) => {
                put_f16s(&mut out, field.codebooks[l].matrix().data());
                out.extend_from_slice(&pack(v.as_slice(), v.bitwidth()));
            }
            LevelData::Features(z) => put_f16s(&mut out, z.data()),
            LevelData::SoftIndices(_) => unreachable!("checked above"),
        }
    }
    Ok(out)
}

/// Decodes the header, decoder and the first `levels` chunks. Bytes past
/// those chunks are ignored.
pub fn decode_prefix(bytes: &[u8], levels: usize) -> Result<NeuralField, CodecError> {
    let h = read_header(bytes)?;
    if levels == 0 || levels > h.levels {
        return Err(CodecError::Invalid(format!(
            "asked for {levels} levels of a {}-level stream",
            h.levels
        )));
    }
    let mut r = Reader {
        bytes,
        pos: h.byte_len(),
    };
    let [wi, wh, wo] = [h.widths[0], h.widths[1], h.widths[2]];
    let mut mats = Vec::with_capacity(4);
    for (rows, cols) in [(wi, wh), (1, wh), (wh, wo), (1, wo)] {
        let v = r
            .f16s(rows * cols)
            .ok_or(CodecError::Truncated("decoder weights"))?;
        mats.push(Matrix::from_vec(rows, cols, v));
    }
    let b2 = mats.pop().expect("four");
    let w2 = mats.pop().expect("four");
    let b1 = mats.pop().expect("four");
    let w1 = mats.pop().expect("four");
    let decoder = DecoderMlp::from_parts(h.task, w1, b1, w2, b2)?;

    let mut grids = Vec::with_capacity(levels);
    let mut data = Vec::with_capacity(levels);
    let mut codebooks = Vec::new();
    for l in 0..levels {
        let incomplete = || CodecError::IncompleteLevel {
            level: l,
            last_renderable: l.checked_sub(1),
        };
        let tag = r.u8().ok_or_else(incomplete)?;
        if tag as usize != l {
            return Err(CodecError::Invalid(format!(
                "expected level {l}, found {tag}"
            )));
        }
        let m = r.u32().ok_or_else(incomplete)? as usize;
        let res = h.resolutions[l];
        let cells = (res as usize).pow(h.dim as u32);
        let occ = r.take(cells.div_ceil(8)).ok_or_else(incomplete)?;
        let grid = GridLevel::from_occupancy(res, h.dim, occ.to_vec())?;
        if grid.vertex_count() != m {
            return Err(CodecError::Invalid(format!(
                "level {l} declares {m} vertices, occupancy implies {}",
                grid.vertex_count()
            )));
        }
        if h.quantized {
            let rows = 1usize << h.bitwidth;
            let d = r.f16s(rows * h.feature_dim).ok_or_else(incomplete)?;
            codebooks.push(Codebook::new(
                h.bitwidth,
                Matrix::from_vec(rows, h.feature_dim, d),
            )?);
            let packed = r.take(index_bytes(m, h.bitwidth)).ok_or_else(incomplete)?;
            data.push(LevelData::Indices(IndexGrid::new(
                h.bitwidth,
                unpack(packed, h.bitwidth, m),
            )?));
        } else {
            let z = r.f16s(m * h.feature_dim).ok_or_else(incomplete)?;
            data.push(LevelData::Features(Matrix::from_vec(m, h.feature_dim, z)));
        }
        grids.push(grid);
    }
    let pyramid = FeatureGridPyramid::from_parts(h.grid_config(levels), grids, data)?;
    let render = RenderSettings {
        background: h.background,
        samples_per_cell: h.samples_per_cell,
    };
    Ok(NeuralField::new(
        h.task, pyramid, codebooks, decoder, render,
    )?)
}

/// Decodes a complete stream.
pub fn decode(bytes: &[u8]) -> Result<NeuralField, CodecError> {
    let h = read_header(bytes)?;
    let field = decode_prefix(bytes, h.levels)?;
    let ends = level_ends(bytes)?;
    let end = *ends.last().expect("all levels decoded");
    if end != bytes.len() {
        return Err(CodecError::TrailingBytes(bytes.len() - end));
    }
    Ok(field)
}

/// End offset of every complete level chunk. A truncated stream yields the
/// complete ones only.
pub fn level_ends(bytes: &[u8]) -> Result<Vec<usize>, CodecError> {
    let h = read_header(bytes)?;
    let mut pos = h.byte_len() + h.mlp_len();
    if pos > bytes.len() {
        return Err(CodecError::Truncated("decoder weights"));
    }
    let mut ends = Vec::with_capacity(h.levels);
    for l in 0..h.levels {
        let Some(frame) = bytes.get(pos..pos + CHUNK_FRAMING) else {
            break;
        };
        let m = u32::from_le_bytes([frame[1], frame[2], frame[3], frame[4]]) as usize;
        let end = pos + h.chunk_len(l, m);
        if end > bytes.len() {
            break;
        }
        ends.push(end);
        pos = end;
    }
    Ok(ends)
}

/// Byte counts of one level chunk.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LevelSize {
    pub level: usize,
    pub vertices: usize,
    pub framing: usize,
    pub occupancy: usize,
    pub codebook: usize,
    /// Raw fp16 features; zero for quantized levels.
    pub features: usize,
    pub indices: usize,
}

impl LevelSize {
    pub fn total(&self) -> usize {
        self.framing + self.occupancy + self.codebook + self.features + self.indices
    }
}

/// Exact sizes of every section of the encoded stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SizeReport {
    pub header: usize,
    pub mlp: usize,
    pub levels: Vec<LevelSize>,
    pub feature_dim: usize,
    pub total: usize,
}

impl SizeReport {
    /// Bytes needed to render with levels `0..levels`.
    pub fn prefix_bytes(&self, levels: usize) -> usize {
        self.header
            + self.mlp
            + self.levels[..levels]
                .iter()
                .map(LevelSize::total)
                .sum::<usize>()
    }

    pub fn index_bytes(&self) -> usize {
        self.levels.iter().map(|l| l.indices).sum()
    }

    pub fn codebook_bytes(&self) -> usize {
        self.levels.iter().map(|l| l.codebook).sum()
    }

    pub fn feature_bytes(&self) -> usize {
        self.levels.iter().map(|l| l.features).sum()
    }

    pub fn vertices(&self) -> usize {
        self.levels.iter().map(|l| l.vertices).sum()
    }

    /// fp16 bytes of the same grid stored as raw features.
    pub fn uncompressed_grid_bytes(&self) -> usize {
        self.vertices() * self.feature_dim * 2
    }

    /// Decoder plus raw fp16 grid, over decoder plus stored grid payload.
    /// Framing and occupancy are left out on both sides.
    pub fn compression_ratio(&self) -> f64 {
        let stored = self.mlp + self.index_bytes() + self.codebook_bytes() + self.feature_bytes();
        (self.mlp + self.uncompressed_grid_bytes()) as f64 / stored as f64
    }
}

/// Section sizes that [`encode`] produces for `field`.
pub fn size_report(field: &NeuralField) -> Result<SizeReport, CodecError> {
    check_encodable(field)?;
    let cfg = field.pyramid.config();
    let quantized = field.is_quantized();
    let b = field.codebooks.first().map_or(0, |c| c.bitwidth());
    let header = header_len(cfg.levels, 3);
    let mlp = mlp_bytes(field.decoder.widths());
    let levels: Vec<LevelSize> = (0..cfg.levels)
        .map(|l| {
            let m = field.pyramid.vertex_count(l);
            LevelSize {
                level: l,
                vertices: m,
                framing: CHUNK_FRAMING,
                occupancy: field.pyramid.level(l).cell_count().div_ceil(8),
                codebook: if quantized {
                    codebook_bytes(b, cfg.feature_dim)
                } else {
                    0
                },
                features: if quantized {
                    0
                } else {
                    m * cfg.feature_dim * 2
                },
                indices: if quantized { index_bytes(m, b) } else { 0 },
            }
        })
        .collect();
    let total = header + mlp + levels.iter().map(LevelSize::total).sum::<usize>();
    Ok(SizeReport {
        header,
        mlp,
        levels,
        feature_dim: cfg.feature_dim,
        total,
    })
}
