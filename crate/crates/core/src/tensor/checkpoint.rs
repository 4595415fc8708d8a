//! Binary checkpoint serialization.
//!
//! Layout: magic "MMCKPT1", u64 entry count, then per parameter:
//! u32 name length, name bytes (UTF-8), u32 rank, u64 extents, and the
//! raw little-endian f64 data. Round trips are bit-exact.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::Tensor;

const MAGIC: &[u8; 7] = b"MMCKPT1";

pub fn write_checkpoint<W: Write>(w: &mut W, entries: &[(String, Tensor)]) -> io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&(entries.len() as u64).to_le_bytes())?;
    for (name, tensor) in entries {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u32).to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&(tensor.shape().len() as u32).to_le_bytes())?;
        for &extent in tensor.shape() {
            w.write_all(&(extent as u64).to_le_bytes())?;
        }
        for &v in tensor.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> io::Result<Vec<(String, Vec<usize>, Vec<f64>)>> {
    let mut magic = [0u8; 7];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(io::Error::new(io::ErrorKind::InvalidData, "bad checkpoint magic"));
    }
    let mut u64buf = [0u8; 8];
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u64buf)?;
    let count = u64::from_le_bytes(u64buf) as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        r.read_exact(&mut u32buf)?;
        let name_len = u32::from_le_bytes(u32buf) as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| io::Error::new(io::ErrorKind::InvalidData, "non-UTF-8 name"))?;
        r.read_exact(&mut u32buf)?;
        let rank = u32::from_le_bytes(u32buf) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            r.read_exact(&mut u64buf)?;
            shape.push(u64::from_le_bytes(u64buf) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            r.read_exact(&mut u64buf)?;
            data.push(f64::from_le_bytes(u64buf));
        }
        out.push((name, shape, data));
    }
    Ok(out)
}

pub fn save_checkpoint(path: &Path, entries: &[(String, Tensor)]) -> io::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut w, entries)?;
    w.flush()
}

pub fn load_checkpoint(path: &Path) -> io::Result<Vec<(String, Vec<usize>, Vec<f64>)>> {
    let mut r = BufReader::new(File::open(path)?);
    read_checkpoint(&mut r)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let entries = vec![
            (
                "a.weight".to_string(),
                Tensor::param(&[2, 3], vec![1.5, -2.25, 0.1, f64::MIN_POSITIVE, 1e300, -0.0])
                    .unwrap(),
            ),
            ("b.bias".to_string(), Tensor::param(&[4], vec![0.0, 1.0, 2.0, 3.0]).unwrap()),
        ];
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &entries).unwrap();
        let loaded = read_checkpoint(&mut buf.as_slice()).unwrap();
        assert_eq!(loaded.len(), 2);
        for ((name, shape, data), (ename, etensor)) in loaded.iter().zip(&entries) {
            assert_eq!(name, ename);
            assert_eq!(shape, etensor.shape());
            for (a, b) in data.iter().zip(etensor.data()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
        // writing the loaded copy reproduces identical bytes
        let reloaded: Vec<(String, Tensor)> = loaded
            .into_iter()
            .map(|(n, s, d)| (n, Tensor::param(&s, d).unwrap()))
            .collect();
        let mut buf2 = Vec::new();
        write_checkpoint(&mut buf2, &reloaded).unwrap();
        assert_eq!(buf, buf2);
    }

    #[test]
    fn rejects_bad_magic() {
        let buf = b"NOTCKPT\x00\x00\x00\x00\x00\x00\x00\x00".to_vec();
        assert!(read_checkpoint(&mut buf.as_slice()).is_err());
    }
}
