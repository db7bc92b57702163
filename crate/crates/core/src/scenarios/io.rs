//! Binary dataset files.
//!
//! Layout (little-endian): magic `MNDD`, version u16, n u32, C/H/W u16 each,
//! class count u16, labels u16[n], pixels f32[n·C·H·W].

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::Dataset;
use crate::error::{MindError, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"MNDD";
const VERSION: u16 = 1;

pub fn write_dataset<W: Write>(d: &Dataset, w: &mut W) -> std::io::Result<()> {
    let s = d.images.shape();
    let too_big = |what: &str| std::io::Error::new(std::io::ErrorKind::InvalidInput, format!("{what} does not fit the file format"));
    let n = u32::try_from(d.len()).map_err(|_| too_big("sample count"))?;
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&n.to_le_bytes())?;
    for &dim in &s[1..4] {
        w.write_all(&u16::try_from(dim).map_err(|_| too_big("image dimension"))?.to_le_bytes())?;
    }
    w.write_all(&u16::try_from(d.n_classes).map_err(|_| too_big("class count"))?.to_le_bytes())?;
    for &l in &d.labels {
        w.write_all(&(l as u16).to_le_bytes())?;
    }
    for &v in d.images.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

struct Cursor<R> {
    r: R,
}

impl<R: Read> Cursor<R> {
    fn bytes<const N: usize>(&mut self, field: &'static str) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.r.read_exact(&mut b).map_err(|e| MindError::format(field, format!("truncated ({e})")))?;
        Ok(b)
    }

    fn u16(&mut self, field: &'static str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.bytes(field)?))
    }
}

pub fn read_dataset<R: Read>(r: R) -> Result<Dataset> {
    let mut c = Cursor { r };
    if &c.bytes::<4>("magic")? != MAGIC {
        return Err(MindError::format("magic", "not a dataset file"));
    }
    let version = c.u16("version")?;
    if version != VERSION {
        return Err(MindError::format("version", format!("unsupported version {version}, expected {VERSION}")));
    }
    let n = u32::from_le_bytes(c.bytes("n")?) as usize;
    let (ch, h, w) = (c.u16("C")? as usize, c.u16("H")? as usize, c.u16("W")? as usize);
    let m = c.u16("M")? as usize;
    let mut labels = Vec::with_capacity(n.min(1 << 20));
    for _ in 0..n {
        let l = c.u16("labels")? as usize;
        if l >= m {
            return Err(MindError::format("labels", format!("label {l} ≥ class count {m}")));
        }
        labels.push(l);
    }
    let total = n * ch * h * w;
    let mut pixels = Vec::with_capacity(total.min(1 << 24));
    for _ in 0..total {
        pixels.push(f32::from_le_bytes(c.bytes("pixels")?));
    }
    let mut d = Dataset::empty(m, ch, h);
    d.images = Tensor::new(vec![n, ch, h, w], pixels)?;
    d.labels = labels;
    Ok(d)
}

pub fn save_dataset(d: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let f = File::create(path).map_err(|e| MindError::io(path, e))?;
    let mut w = BufWriter::new(f);
    write_dataset(d, &mut w).and_then(|_| w.flush()).map_err(|e| MindError::io(path, e))
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| MindError::io(path, e))?;
    read_dataset(BufReader::new(f))
}
