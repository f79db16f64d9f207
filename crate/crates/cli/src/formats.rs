//! Little-endian binary containers for images, label maps and descriptor
//! batches, plus the class-map PPM.

use std::io::Write;
use std::path::Path;

use crate::error::{CliError, Result};

pub const IMAGE_MAGIC: &[u8; 4] = b"SARF";
pub const LABEL_MAGIC: &[u8; 4] = b"SARL";
pub const DESCRIPTOR_MAGIC: &[u8; 4] = b"NSJS";

/// Colours of classes 0..8 in written maps; unlabelled pixels are black.
pub const PALETTE: [[u8; 3]; 8] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
];

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Labels {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Descriptors {
    pub count: usize,
    pub dim: usize,
    pub data: Vec<f32>,
}

/// Sequential little-endian reader over a byte slice.
pub struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'a str,
}

impl<'a> Reader<'a> {
    pub fn new(bytes: &'a [u8], what: &'a str) -> Self {
        Reader { bytes, pos: 0, what }
    }

    fn fail(&self, msg: impl std::fmt::Display) -> CliError {
        CliError::Validation(format!("{}: {msg}", self.what))
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| self.fail(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn magic(&mut self, magic: &[u8; 4]) -> Result<()> {
        let got = self.take(4)?;
        if got != magic {
            return Err(self.fail(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(got),
                String::from_utf8_lossy(magic)
            )));
        }
        Ok(())
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("two bytes")))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("four bytes")))
    }

    pub fn dim(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }

    pub fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| self.fail("size overflow"))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("four bytes")))
            .collect())
    }

    pub fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(self.fail(format!("{} trailing bytes", self.bytes.len() - self.pos)));
        }
        Ok(())
    }
}

pub fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| CliError::Validation(format!("{v} does not fit a u32 field")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn put_f32s(out: &mut Vec<u8>, data: &[f32]) {
    out.reserve(data.len() * 4);
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn area(height: usize, width: usize, what: &str) -> Result<usize> {
    height
        .checked_mul(width)
        .ok_or_else(|| CliError::Validation(format!("{what}: {height}x{width} overflows")))
}

impl Image {
    pub fn encode(&self) -> Result<Vec<u8>> {
        if self.data.len() != area(self.height, self.width, "image")? {
            return Err(CliError::Validation(format!(
                "image: {} values for {}x{}",
                self.data.len(),
                self.height,
                self.width
            )));
        }
        let mut out = Vec::with_capacity(16 + 4 * self.data.len());
        out.extend_from_slice(IMAGE_MAGIC);
        put_u32(&mut out, self.height)?;
        put_u32(&mut out, self.width)?;
        put_u32(&mut out, 1)?;
        put_f32s(&mut out, &self.data);
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "image");
        r.magic(IMAGE_MAGIC)?;
        let (height, width, channels) = (r.dim()?, r.dim()?, r.dim()?);
        if channels != 1 {
            return Err(CliError::Validation(format!("image: {channels} channels, only 1 is supported")));
        }
        let data = r.f32s(area(height, width, "image")?)?;
        r.finish()?;
        Ok(Image { height, width, data })
    }
}

impl Labels {
    pub fn encode(&self) -> Result<Vec<u8>> {
        if self.data.len() != area(self.height, self.width, "labels")? {
            return Err(CliError::Validation(format!(
                "labels: {} values for {}x{}",
                self.data.len(),
                self.height,
                self.width
            )));
        }
        let mut out = Vec::with_capacity(12 + self.data.len());
        out.extend_from_slice(LABEL_MAGIC);
        put_u32(&mut out, self.height)?;
        put_u32(&mut out, self.width)?;
        out.extend_from_slice(&self.data);
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "labels");
        r.magic(LABEL_MAGIC)?;
        let (height, width) = (r.dim()?, r.dim()?);
        let data = r.take(area(height, width, "labels")?)?.to_vec();
        r.finish()?;
        Ok(Labels { height, width, data })
    }
}

impl Descriptors {
    pub fn encode(&self) -> Result<Vec<u8>> {
        if self.data.len() != area(self.count, self.dim, "descriptors")? {
            return Err(CliError::Validation(format!(
                "descriptors: {} values for {} x {}",
                self.data.len(),
                self.count,
                self.dim
            )));
        }
        let mut out = Vec::with_capacity(12 + 4 * self.data.len());
        out.extend_from_slice(DESCRIPTOR_MAGIC);
        put_u32(&mut out, self.count)?;
        put_u32(&mut out, self.dim)?;
        put_f32s(&mut out, &self.data);
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "descriptors");
        r.magic(DESCRIPTOR_MAGIC)?;
        let (count, dim) = (r.dim()?, r.dim()?);
        let data = r.f32s(area(count, dim, "descriptors")?)?;
        r.finish()?;
        Ok(Descriptors { count, dim, data })
    }
}

/// Binary P6 rendering of a label map.
pub fn class_map_ppm(labels: &Labels) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", labels.width, labels.height).into_bytes();
    out.reserve(labels.data.len() * 3);
    for &l in &labels.data {
        let rgb = PALETTE.get(l as usize).copied().unwrap_or([0, 0, 0]);
        out.extend_from_slice(&rgb);
    }
    out
}

/// Writes through a temporary file in the target directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| CliError::io(path, e))?;
    tmp.write_all(bytes).map_err(|e| CliError::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| CliError::io(path, e))?;
    tmp.persist(path).map_err(|e| CliError::io(path, e.error))?;
    Ok(())
}

pub fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| CliError::io(path, e))
}

pub fn read_image(path: &Path) -> Result<Image> {
    Image::decode(&read(path)?).map_err(|e| prefix(path, e))
}

pub fn read_labels(path: &Path) -> Result<Labels> {
    Labels::decode(&read(path)?).map_err(|e| prefix(path, e))
}

pub fn read_descriptors(path: &Path) -> Result<Descriptors> {
    Descriptors::decode(&read(path)?).map_err(|e| prefix(path, e))
}

fn prefix(path: &Path, e: CliError) -> CliError {
    match e {
        CliError::Validation(m) => CliError::Validation(format!("{}: {m}", path.display())),
        other => other,
    }
}
