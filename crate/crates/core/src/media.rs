//! Raw video, grayscale map, feature tensor and ΔQP sidecar I/O.
//!
//! Video comes in as YUV4MPEG2 (8-bit, `C420` or `C444`), importance maps as
//! binary PGM (`P5`, maxval 255). Feature tensors (`FT01`) and ΔQP sidecars
//! (`DQP1`) are little-endian with a fixed 16-byte header.

use std::io::{self, BufRead, Read, Write};

use crate::error::{Error, Result};

/// Chroma layout of a [`Frame`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ChromaSubsampling {
    Yuv420,
    Yuv444,
}

impl ChromaSubsampling {
    /// Chroma plane dimensions for a luma plane of `width`×`height`.
    pub fn chroma_dims(self, width: usize, height: usize) -> (usize, usize) {
        match self {
            ChromaSubsampling::Yuv420 => (width.div_ceil(2), height.div_ceil(2)),
            ChromaSubsampling::Yuv444 => (width, height),
        }
    }

    fn y4m_tag(self) -> &'static str {
        match self {
            ChromaSubsampling::Yuv420 => "C420jpeg",
            ChromaSubsampling::Yuv444 => "C444",
        }
    }
}

/// One planar 8-bit picture: luma followed by two chroma planes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    width: usize,
    height: usize,
    subsampling: ChromaSubsampling,
    planes: [Vec<u8>; 3],
}

impl Frame {
    pub fn new(
        width: usize,
        height: usize,
        subsampling: ChromaSubsampling,
        planes: [Vec<u8>; 3],
    ) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::ZeroDimension);
        }
        let (cw, ch) = subsampling.chroma_dims(width, height);
        let expected = [width * height, cw * ch, cw * ch];
        for (plane, want) in planes.iter().zip(expected) {
            if plane.len() != want {
                return Err(Error::DimensionMismatch(format!(
                    "plane holds {} samples, expected {want}",
                    plane.len()
                )));
            }
        }
        Ok(Self { width, height, subsampling, planes })
    }

    /// A frame whose luma and chroma are all `y`, `u`, `v` respectively.
    pub fn filled(width: usize, height: usize, subsampling: ChromaSubsampling, yuv: [u8; 3]) -> Result<Self> {
        let (cw, ch) = subsampling.chroma_dims(width, height);
        Self::new(
            width,
            height,
            subsampling,
            [vec![yuv[0]; width * height], vec![yuv[1]; cw * ch], vec![yuv[2]; cw * ch]],
        )
    }

    /// Builds a frame from a luma plane with neutral (128) chroma.
    pub fn from_luma(width: usize, height: usize, luma: Vec<u8>) -> Result<Self> {
        let (cw, ch) = ChromaSubsampling::Yuv420.chroma_dims(width, height);
        Self::new(
            width,
            height,
            ChromaSubsampling::Yuv420,
            [luma, vec![128; cw * ch], vec![128; cw * ch]],
        )
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn subsampling(&self) -> ChromaSubsampling {
        self.subsampling
    }

    pub fn luma(&self) -> &[u8] {
        &self.planes[0]
    }

    pub fn plane(&self, idx: usize) -> &[u8] {
        &self.planes[idx]
    }

    pub fn plane_mut(&mut self, idx: usize) -> &mut [u8] {
        &mut self.planes[idx]
    }

    /// Width and height of plane `idx`.
    pub fn plane_dims(&self, idx: usize) -> (usize, usize) {
        if idx == 0 {
            (self.width, self.height)
        } else {
            self.subsampling.chroma_dims(self.width, self.height)
        }
    }

    /// The three colour channels at full luma resolution. Subsampled chroma is
    /// upsampled by nearest neighbour.
    pub fn full_res_channels(&self) -> [Vec<f64>; 3] {
        let n = self.width * self.height;
        let luma = self.planes[0].iter().map(|&v| f64::from(v)).collect::<Vec<_>>();
        let mut chroma = [Vec::with_capacity(n), Vec::with_capacity(n)];
        let (cw, _) = self.plane_dims(1);
        for (c, out) in chroma.iter_mut().enumerate() {
            let plane = &self.planes[c + 1];
            for y in 0..self.height {
                for x in 0..self.width {
                    let (sx, sy) = match self.subsampling {
                        ChromaSubsampling::Yuv420 => (x / 2, y / 2),
                        ChromaSubsampling::Yuv444 => (x, y),
                    };
                    out.push(f64::from(plane[sy * cw + sx]));
                }
            }
        }
        let [u, v] = chroma;
        [luma, u, v]
    }

    /// Bytes of one raw frame payload (all planes concatenated).
    pub fn payload_len(&self) -> usize {
        self.planes.iter().map(Vec::len).sum()
    }

    /// Horizontal mirror of every plane.
    pub fn flipped_horizontal(&self) -> Frame {
        let mut out = self.clone();
        for idx in 0..3 {
            let (w, _) = self.plane_dims(idx);
            for row in out.planes[idx].chunks_mut(w) {
                row.reverse();
            }
        }
        out
    }
}

/// Ordered frames sharing geometry, plus a frame rate.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoSequence {
    frames: Vec<Frame>,
    fps_num: u32,
    fps_den: u32,
}

impl VideoSequence {
    pub fn new(frames: Vec<Frame>, fps_num: u32, fps_den: u32) -> Result<Self> {
        if fps_num == 0 || fps_den == 0 {
            return Err(Error::InvalidConfig("frame rate must be positive".into()));
        }
        if let Some(first) = frames.first() {
            let geometry = (first.width, first.height, first.subsampling);
            if frames.iter().any(|f| (f.width, f.height, f.subsampling) != geometry) {
                return Err(Error::DimensionMismatch(
                    "frames of a sequence must share dimensions and subsampling".into(),
                ));
            }
        }
        Ok(Self { frames, fps_num, fps_den })
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn fps(&self) -> f64 {
        f64::from(self.fps_num) / f64::from(self.fps_den)
    }

    pub fn fps_ratio(&self) -> (u32, u32) {
        (self.fps_num, self.fps_den)
    }

    /// `(width, height)` of the frames, or `None` for an empty sequence.
    pub fn dims(&self) -> Option<(usize, usize)> {
        self.frames.first().map(|f| (f.width, f.height))
    }
}

fn parse_fps(tag: &str) -> Result<(u32, u32)> {
    let (n, d) = tag
        .split_once(':')
        .ok_or_else(|| Error::MalformedHeader(format!("bad frame rate tag F{tag}")))?;
    let n = n.parse::<u32>().map_err(|_| Error::MalformedHeader(format!("bad frame rate F{tag}")))?;
    let d = d.parse::<u32>().map_err(|_| Error::MalformedHeader(format!("bad frame rate F{tag}")))?;
    if n == 0 || d == 0 {
        return Err(Error::MalformedHeader(format!("non-positive frame rate F{tag}")));
    }
    Ok((n, d))
}

fn read_line<R: BufRead>(reader: &mut R, limit: usize) -> Result<Option<Vec<u8>>> {
    let mut line = Vec::new();
    let n = reader.by_ref().take(limit as u64).read_until(b'\n', &mut line)?;
    if n == 0 {
        return Ok(None);
    }
    if line.last() != Some(&b'\n') {
        return Err(Error::MalformedHeader("unterminated header line".into()));
    }
    line.pop();
    Ok(Some(line))
}

/// Decodes a YUV4MPEG2 stream.
pub fn load_y4m<R: Read>(stream: R) -> Result<VideoSequence> {
    let mut reader = io::BufReader::new(stream);
    let header = read_line(&mut reader, 4096)?
        .ok_or_else(|| Error::MalformedHeader("empty stream".into()))?;
    let header = String::from_utf8(header)
        .map_err(|_| Error::MalformedHeader("header is not ASCII".into()))?;
    let mut tokens = header.split(' ');
    if tokens.next() != Some("YUV4MPEG2") {
        return Err(Error::MalformedHeader("missing YUV4MPEG2 signature".into()));
    }
    let (mut width, mut height, mut fps) = (None, None, None);
    let mut subsampling = ChromaSubsampling::Yuv420;
    for tok in tokens.filter(|t| !t.is_empty()) {
        let (tag, value) = tok.split_at(1);
        match tag {
            "W" => width = value.parse::<usize>().ok(),
            "H" => height = value.parse::<usize>().ok(),
            "F" => fps = Some(parse_fps(value)?),
            "C" => {
                subsampling = match value {
                    "420" | "420jpeg" | "420paldv" | "420mpeg2" => ChromaSubsampling::Yuv420,
                    "444" => ChromaSubsampling::Yuv444,
                    other => return Err(Error::UnsupportedColorSpace(other.to_string())),
                }
            }
            // Interlacing, aspect ratio and extensions do not affect the payload.
            "I" | "A" | "X" => {}
            _ => return Err(Error::MalformedHeader(format!("unknown header tag {tok}"))),
        }
    }
    let width = width.filter(|&w| w > 0).ok_or_else(|| Error::MalformedHeader("missing W".into()))?;
    let height = height.filter(|&h| h > 0).ok_or_else(|| Error::MalformedHeader("missing H".into()))?;
    let (fps_num, fps_den) = fps.ok_or_else(|| Error::MalformedHeader("missing F".into()))?;
    let (cw, ch) = subsampling.chroma_dims(width, height);

    let mut frames = Vec::new();
    while let Some(line) = read_line(&mut reader, 1024)? {
        if !line.starts_with(b"FRAME") {
            return Err(Error::MalformedHeader("expected FRAME marker".into()));
        }
        let mut planes = [vec![0u8; width * height], vec![0u8; cw * ch], vec![0u8; cw * ch]];
        for plane in planes.iter_mut() {
            reader.read_exact(plane).map_err(|e| match e.kind() {
                io::ErrorKind::UnexpectedEof => Error::Truncated("frame payload".into()),
                _ => Error::Io(e),
            })?;
        }
        frames.push(Frame::new(width, height, subsampling, planes)?);
    }
    VideoSequence::new(frames, fps_num, fps_den)
}

/// Encodes a sequence as YUV4MPEG2.
pub fn save_y4m<W: Write>(video: &VideoSequence, mut stream: W) -> Result<()> {
    let first = video
        .frames
        .first()
        .ok_or_else(|| Error::InvalidConfig("cannot write an empty video".into()))?;
    writeln!(
        stream,
        "YUV4MPEG2 W{} H{} F{}:{} Ip A1:1 {}",
        first.width,
        first.height,
        video.fps_num,
        video.fps_den,
        first.subsampling.y4m_tag()
    )?;
    for frame in &video.frames {
        stream.write_all(b"FRAME\n")?;
        for plane in &frame.planes {
            stream.write_all(plane)?;
        }
    }
    Ok(())
}

/// Dense per-pixel 8-bit importance (0 = unimportant, 255 = most important).
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ImportanceMap {
    width: usize,
    height: usize,
    values: Vec<u8>,
}

impl ImportanceMap {
    pub fn new(width: usize, height: usize, values: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::ZeroDimension);
        }
        if values.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "map of {width}x{height} needs {} values, got {}",
                width * height,
                values.len()
            )));
        }
        Ok(Self { width, height, values })
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [u8] {
        &mut self.values
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.values[y * self.width + x]
    }

    pub fn into_values(self) -> Vec<u8> {
        self.values
    }
}

fn pgm_token<R: BufRead>(reader: &mut R) -> Result<String> {
    let mut token = Vec::new();
    loop {
        let mut byte = [0u8; 1];
        if reader.read(&mut byte)? == 0 {
            return Err(Error::MalformedHeader("truncated PGM header".into()));
        }
        match byte[0] {
            b'#' if token.is_empty() => {
                let mut skip = Vec::new();
                reader.read_until(b'\n', &mut skip)?;
            }
            b if b.is_ascii_whitespace() => {
                if !token.is_empty() {
                    break;
                }
            }
            b => token.push(b),
        }
    }
    String::from_utf8(token).map_err(|_| Error::MalformedHeader("non-ASCII PGM header".into()))
}

/// Reads a binary (`P5`) PGM with maxval 255.
pub fn load_pgm<R: Read>(stream: R) -> Result<ImportanceMap> {
    let mut reader = io::BufReader::new(stream);
    let magic = pgm_token(&mut reader)?;
    if magic != "P5" {
        return Err(Error::MalformedHeader(format!("expected P5 magic, found {magic:?}")));
    }
    let mut field = |name: &str| -> Result<usize> {
        let tok = pgm_token(&mut reader)?;
        tok.parse::<usize>().map_err(|_| Error::MalformedHeader(format!("bad PGM {name} {tok:?}")))
    };
    let width = field("width")?;
    let height = field("height")?;
    let maxval = field("maxval")?;
    if maxval != 255 {
        return Err(Error::UnsupportedMaxval(maxval));
    }
    if width == 0 || height == 0 {
        return Err(Error::ZeroDimension);
    }
    let mut values = vec![0u8; width * height];
    reader.read_exact(&mut values).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => Error::Truncated("PGM payload".into()),
        _ => Error::Io(e),
    })?;
    let mut extra = [0u8; 1];
    if reader.read(&mut extra)? != 0 {
        return Err(Error::PayloadSize("PGM payload longer than width*height".into()));
    }
    ImportanceMap::new(width, height, values)
}

pub fn save_pgm<W: Write>(map: &ImportanceMap, mut stream: W) -> Result<()> {
    write!(stream, "P5\n{} {}\n255\n", map.width, map.height)?;
    stream.write_all(&map.values)?;
    Ok(())
}

const FT_MAGIC: &[u8; 4] = b"FT01";
const DQP_MAGIC: &[u8; 4] = b"DQP1";
const HEADER_LEN: usize = 16;

/// `rows × cols × channels` float tensor, row-major with channels fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTensor {
    pub rows: usize,
    pub cols: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl FeatureTensor {
    pub fn new(rows: usize, cols: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols * channels {
            return Err(Error::PayloadSize(format!(
                "{rows}x{cols}x{channels} tensor needs {} values, got {}",
                rows * cols * channels,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature tensor".into()));
        }
        Ok(Self { rows, cols, channels, data })
    }

    pub fn at(&self, row: usize, col: usize, channel: usize) -> f32 {
        self.data[(row * self.cols + col) * self.channels + channel]
    }

    /// One channel as a dense row-major plane.
    pub fn channel_plane(&self, channel: usize) -> Vec<f64> {
        self.data.iter().skip(channel).step_by(self.channels).map(|&v| f64::from(v)).collect()
    }
}

fn u32_le(bytes: &[u8]) -> u32 {
    u32::from_le_bytes(bytes.try_into().expect("4-byte slice"))
}

fn dim_u32(v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::InvalidConfig(format!("dimension {v} exceeds u32")))
}

pub fn write_tensor<W: Write>(tensor: &FeatureTensor, mut stream: W) -> Result<()> {
    let mut buf = Vec::with_capacity(HEADER_LEN + tensor.data.len() * 4);
    buf.extend_from_slice(FT_MAGIC);
    for dim in [tensor.rows, tensor.cols, tensor.channels] {
        buf.extend_from_slice(&dim_u32(dim)?.to_le_bytes());
    }
    for v in &tensor.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    stream.write_all(&buf)?;
    Ok(())
}

fn read_header<R: Read>(stream: &mut R, magic: &[u8; 4]) -> Result<[usize; 3]> {
    let mut header = [0u8; HEADER_LEN];
    stream.read_exact(&mut header).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => Error::Truncated("header".into()),
        _ => Error::Io(e),
    })?;
    if &header[..4] != magic {
        return Err(Error::BadMagic {
            expected: String::from_utf8_lossy(magic).into_owned(),
            found: String::from_utf8_lossy(&header[..4]).into_owned(),
        });
    }
    Ok([
        u32_le(&header[4..8]) as usize,
        u32_le(&header[8..12]) as usize,
        u32_le(&header[12..16]) as usize,
    ])
}

fn read_payload<R: Read>(stream: &mut R, len: usize) -> Result<Vec<u8>> {
    let mut payload = Vec::new();
    stream.take(len as u64 + 1).read_to_end(&mut payload)?;
    if payload.len() != len {
        return Err(Error::PayloadSize(format!(
            "expected {len} payload bytes, found {}{}",
            payload.len().min(len),
            if payload.len() > len { "+" } else { "" }
        )));
    }
    Ok(payload)
}

pub fn read_tensor<R: Read>(mut stream: R) -> Result<FeatureTensor> {
    let [rows, cols, channels] = read_header(&mut stream, FT_MAGIC)?;
    let count = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(channels))
        .ok_or_else(|| Error::PayloadSize("tensor dimensions overflow".into()))?;
    let payload = read_payload(&mut stream, count * 4)?;
    let data = payload.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
    FeatureTensor::new(rows, cols, channels, data)
}

/// Per-frame, per-macroblock ΔQP values as serialized next to a video.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DqpSidecar {
    pub frames: usize,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<i8>,
}

impl DqpSidecar {
    pub fn new(frames: usize, rows: usize, cols: usize, values: Vec<i8>) -> Result<Self> {
        if values.len() != frames * rows * cols {
            return Err(Error::PayloadSize(format!(
                "{frames}x{rows}x{cols} sidecar needs {} values, got {}",
                frames * rows * cols,
                values.len()
            )));
        }
        if let Some(&bad) = values.iter().find(|v| !(crate::DQP_MIN..=crate::DQP_MAX).contains(*v)) {
            return Err(Error::DqpOutOfRange(bad.into()));
        }
        Ok(Self { frames, rows, cols, values })
    }

    /// Values of frame `idx`, row-major.
    pub fn frame(&self, idx: usize) -> &[i8] {
        let n = self.rows * self.cols;
        &self.values[idx * n..(idx + 1) * n]
    }
}

pub fn write_dqp<W: Write>(sidecar: &DqpSidecar, mut stream: W) -> Result<()> {
    if sidecar.values.len() != sidecar.frames * sidecar.rows * sidecar.cols {
        return Err(Error::PayloadSize("sidecar header does not match its values".into()));
    }
    if let Some(&bad) = sidecar.values.iter().find(|v| !(crate::DQP_MIN..=crate::DQP_MAX).contains(*v)) {
        return Err(Error::DqpOutOfRange(bad.into()));
    }
    let mut buf = Vec::with_capacity(HEADER_LEN + sidecar.values.len());
    buf.extend_from_slice(DQP_MAGIC);
    for dim in [sidecar.frames, sidecar.rows, sidecar.cols] {
        buf.extend_from_slice(&dim_u32(dim)?.to_le_bytes());
    }
    buf.extend(sidecar.values.iter().map(|&v| v as u8));
    stream.write_all(&buf)?;
    Ok(())
}

pub fn read_dqp<R: Read>(mut stream: R) -> Result<DqpSidecar> {
    let [frames, rows, cols] = read_header(&mut stream, DQP_MAGIC)?;
    let count = frames
        .checked_mul(rows)
        .and_then(|n| n.checked_mul(cols))
        .ok_or_else(|| Error::PayloadSize("sidecar dimensions overflow".into()))?;
    let payload = read_payload(&mut stream, count)?;
    DqpSidecar::new(frames, rows, cols, payload.into_iter().map(|b| b as i8).collect())
}
