use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::codec::{LeReader, LeWriter};
use crate::error::{PscError, Result};

pub const MAGIC: &[u8; 4] = b"PSCA";
pub const FORMAT_VERSION: u32 = 1;

const DTYPE_F32: u8 = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerKind {
    Conv,
    Fc,
}

impl LayerKind {
    fn code(self) -> u8 {
        match self {
            LayerKind::Conv => 0,
            LayerKind::Fc => 1,
        }
    }

    fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(LayerKind::Conv),
            1 => Ok(LayerKind::Fc),
            other => Err(PscError::Format(format!("unknown layer kind {other}"))),
        }
    }
}

/// Per-sample shape of a layer's activations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SampleShape {
    Conv { channels: usize, height: usize, width: usize },
    Fc { features: usize },
}

impl SampleShape {
    pub fn kind(&self) -> LayerKind {
        match self {
            SampleShape::Conv { .. } => LayerKind::Conv,
            SampleShape::Fc { .. } => LayerKind::Fc,
        }
    }

    /// Number of scalars per sample.
    pub fn len(&self) -> usize {
        self.channels() * self.features_per_channel()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Channel count; fully connected layers are a single channel.
    pub fn channels(&self) -> usize {
        match *self {
            SampleShape::Conv { channels, .. } => channels,
            SampleShape::Fc { .. } => 1,
        }
    }

    /// Flattened spatial size `h·w` for conv layers, `d` for fc layers.
    pub fn features_per_channel(&self) -> usize {
        match *self {
            SampleShape::Conv { height, width, .. } => height * width,
            SampleShape::Fc { features } => features,
        }
    }

    /// Offset of element `(c, i, j)` within one sample (row-major channel flattening).
    pub fn conv_index(&self, channel: usize, row: usize, col: usize) -> usize {
        match *self {
            SampleShape::Conv { height, width, .. } => channel * height * width + row * width + col,
            SampleShape::Fc { .. } => col,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerShape {
    pub samples: usize,
    pub sample: SampleShape,
}

impl LayerShape {
    pub fn conv(samples: usize, channels: usize, height: usize, width: usize) -> Self {
        Self {
            samples,
            sample: SampleShape::Conv { channels, height, width },
        }
    }

    pub fn fc(samples: usize, features: usize) -> Self {
        Self {
            samples,
            sample: SampleShape::Fc { features },
        }
    }

    pub fn dims(&self) -> Vec<u64> {
        let n = self.samples as u64;
        match self.sample {
            SampleShape::Conv { channels, height, width } => vec![n, channels as u64, height as u64, width as u64],
            SampleShape::Fc { features } => vec![n, features as u64],
        }
    }

    pub fn element_count(&self) -> usize {
        self.samples * self.sample.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerHeader {
    pub layer_id: u32,
    pub shape: LayerShape,
}

impl LayerHeader {
    pub fn new(layer_id: u32, shape: LayerShape) -> Self {
        Self { layer_id, shape }
    }

    pub fn kind(&self) -> LayerKind {
        self.shape.sample.kind()
    }

    pub fn samples(&self) -> usize {
        self.shape.samples
    }

    pub fn header_len(&self) -> u64 {
        let ndim = match self.kind() {
            LayerKind::Conv => 4,
            LayerKind::Fc => 2,
        };
        4 + 4 + 4 + 1 + 1 + 4 + 8 * ndim
    }

    pub fn payload_offset(&self) -> u64 {
        self.header_len()
    }

    /// Byte offset of the `u16` label block.
    pub fn label_offset(&self) -> u64 {
        self.header_len() + 4 * self.shape.element_count() as u64
    }

    pub fn file_len(&self) -> u64 {
        self.label_offset() + 2 * self.samples() as u64
    }

    fn validate(&self) -> Result<()> {
        if self.shape.samples == 0 {
            return Err(PscError::Shape("layer must hold at least one sample".into()));
        }
        let ok = match self.shape.sample {
            SampleShape::Conv { channels, height, width } => channels >= 1 && height >= 1 && width >= 1,
            SampleShape::Fc { features } => features >= 1,
        };
        if !ok {
            return Err(PscError::Shape(format!("zero-sized dimension in {:?}", self.shape.dims())));
        }
        Ok(())
    }

    pub(crate) fn write_to<W: Write>(&self, w: &mut LeWriter<W>) -> Result<()> {
        w.bytes(MAGIC)?;
        w.u32(FORMAT_VERSION)?;
        w.u32(self.layer_id)?;
        w.u8(self.kind().code())?;
        w.u8(DTYPE_F32)?;
        let dims = self.shape.dims();
        w.u32(dims.len() as u32)?;
        for d in dims {
            w.u64(d)?;
        }
        Ok(())
    }

    pub(crate) fn read_from<R: Read>(r: &mut LeReader<R>) -> Result<Self> {
        r.expect_magic(MAGIC)?;
        r.expect_version(FORMAT_VERSION)?;
        let layer_id = r.u32()?;
        let kind = LayerKind::from_code(r.u8()?)?;
        let dtype = r.u8()?;
        if dtype != DTYPE_F32 {
            return Err(PscError::Format(format!("unsupported dtype code {dtype}")));
        }
        let ndim = r.u32()?;
        let expected = match kind {
            LayerKind::Conv => 4,
            LayerKind::Fc => 2,
        };
        if ndim != expected {
            return Err(PscError::Format(format!("{kind:?} layer must have {expected} dims, found {ndim}")));
        }
        let mut dims = Vec::with_capacity(ndim as usize);
        for _ in 0..ndim {
            dims.push(r.usize()?);
        }
        let shape = match kind {
            LayerKind::Conv => LayerShape::conv(dims[0], dims[1], dims[2], dims[3]),
            LayerKind::Fc => LayerShape::fc(dims[0], dims[1]),
        };
        let header = LayerHeader { layer_id, shape };
        header.validate()?;
        Ok(header)
    }
}

fn check_inputs(header: &LayerHeader, values: &[f32], labels: &[usize]) -> Result<()> {
    header.validate()?;
    if values.len() != header.shape.element_count() {
        return Err(PscError::Shape(format!(
            "payload has {} values, header {:?} requires {}",
            values.len(),
            header.shape.dims(),
            header.shape.element_count()
        )));
    }
    if labels.len() != header.samples() {
        return Err(PscError::Shape(format!(
            "label count mismatch: {} labels for {} samples",
            labels.len(),
            header.samples()
        )));
    }
    if let Some(bad) = labels.iter().find(|&&l| l > u16::MAX as usize) {
        return Err(PscError::InvalidInput(format!("label {bad} out of range [0, 65535]")));
    }
    Ok(())
}

fn encode_into<W: Write>(w: &mut LeWriter<W>, header: &LayerHeader, values: &[f32], labels: &[usize]) -> Result<()> {
    header.write_to(w)?;
    for v in values {
        w.bytes(&v.to_le_bytes())?;
    }
    for &l in labels {
        w.u16(l as u16)?;
    }
    Ok(())
}

/// Serializes one layer to its exact on-disk byte representation.
pub fn encode_layer(header: &LayerHeader, values: &[f32], labels: &[usize]) -> Result<Vec<u8>> {
    check_inputs(header, values, labels)?;
    let mut w = LeWriter::new(Vec::with_capacity(header.file_len() as usize));
    encode_into(&mut w, header, values, labels)?;
    Ok(w.into_inner())
}

/// Writes a layer file and returns the hex SHA-256 of its bytes.
pub fn write_layer_file(path: &Path, header: &LayerHeader, values: &[f32], labels: &[usize]) -> Result<String> {
    check_inputs(header, values, labels)?;
    let file = File::create(path).map_err(|e| PscError::io(path, e))?;
    let mut w = LeWriter::new(HashingWriter {
        inner: BufWriter::new(file),
        hasher: Sha256::new(),
    });
    encode_into(&mut w, header, values, labels)?;
    let mut hw = w.into_inner();
    hw.inner.flush().map_err(|e| PscError::io(path, e))?;
    Ok(hex::encode(hw.hasher.finalize()))
}

/// Reads a whole layer file: header, payload and labels.
pub fn read_layer_file(path: &Path) -> Result<(LayerHeader, Vec<f32>, Vec<u16>)> {
    let file = File::open(path).map_err(|e| PscError::io(path, e))?;
    let len = file.metadata().map_err(|e| PscError::io(path, e))?.len();
    let mut r = LeReader::new(BufReader::new(file));
    let header = LayerHeader::read_from(&mut r)?;
    if len != header.file_len() {
        return Err(PscError::Format(format!(
            "{}: file is {len} bytes, header implies {}",
            path.display(),
            header.file_len()
        )));
    }
    let values = (0..header.shape.element_count())
        .map(|_| r.array::<4>().map(f32::from_le_bytes))
        .collect::<Result<Vec<_>>>()?;
    let labels = (0..header.samples())
        .map(|_| r.array::<2>().map(u16::from_le_bytes))
        .collect::<Result<Vec<_>>>()?;
    Ok((header, values, labels))
}

pub(crate) fn read_header_at(path: &Path) -> Result<LayerHeader> {
    let file = File::open(path).map_err(|e| PscError::io(path, e))?;
    let len = file.metadata().map_err(|e| PscError::io(path, e))?.len();
    let header = LayerHeader::read_from(&mut LeReader::new(BufReader::new(file)))?;
    if len != header.file_len() {
        return Err(PscError::Format(format!(
            "{}: file is {len} bytes, header implies {}",
            path.display(),
            header.file_len()
        )));
    }
    Ok(header)
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut file = BufReader::new(File::open(path).map_err(|e| PscError::io(path, e))?);
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = file.read(&mut buf).map_err(|e| PscError::io(path, e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

struct HashingWriter<W: Write> {
    inner: W,
    hasher: Sha256,
}

impl<W: Write> Write for HashingWriter<W> {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        let n = self.inner.write(buf)?;
        self.hasher.update(&buf[..n]);
        Ok(n)
    }

    fn flush(&mut self) -> std::io::Result<()> {
        self.inner.flush()
    }
}
