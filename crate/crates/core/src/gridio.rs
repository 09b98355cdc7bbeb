//! Binary voxel grid serialization.
//!
//! Layout (little-endian):
//! - magic `SYMV` (4 bytes)
//! - version `u16`, currently 1
//! - payload kind `u8`: 0 = u8 labels, 1 = f32 logits
//! - reserved `u8`, must be 0
//! - dims X, Y, Z as `u32`
//! - logits only: `num_classes` as `u32`
//! - payload, row-major (x outermost, channel innermost for logits)

use std::io::{Read, Write};

use crate::error::{CoreError, Result};
use crate::loss::VoxelLabels;
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"SYMV";
pub const VERSION: u16 = 1;
pub const PAYLOAD_LABELS: u8 = 0;
pub const PAYLOAD_LOGITS: u8 = 1;

/// Either stored payload.
#[derive(Debug, Clone, PartialEq)]
pub enum Grid {
    Labels(VoxelLabels),
    /// `[X, Y, Z, K]`, values round-trip through f32.
    Logits(Tensor),
}

fn write_header(w: &mut impl Write, payload: u8, dims: [usize; 3]) -> Result<()> {
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&[payload, 0])?;
    for d in dims {
        let d = u32::try_from(d).map_err(|_| CoreError::domain("dimension exceeds u32"))?;
        w.write_all(&d.to_le_bytes())?;
    }
    Ok(())
}

pub fn save_labels(w: &mut impl Write, labels: &VoxelLabels) -> Result<()> {
    write_header(w, PAYLOAD_LABELS, labels.dims)?;
    w.write_all(&labels.labels)?;
    Ok(())
}

pub fn save_logits(w: &mut impl Write, logits: &Tensor) -> Result<()> {
    if logits.rank() != 4 {
        return Err(CoreError::shape("logits must be [X, Y, Z, K]"));
    }
    let s = logits.shape();
    write_header(w, PAYLOAD_LOGITS, [s[0], s[1], s[2]])?;
    let k = u32::try_from(s[3]).map_err(|_| CoreError::domain("num_classes exceeds u32"))?;
    w.write_all(&k.to_le_bytes())?;
    for &v in logits.data() {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

struct Cursor<'a, R: Read> {
    inner: &'a mut R,
    offset: usize,
}

impl<'a, R: Read> Cursor<'a, R> {
    fn take<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.inner.read_exact(&mut buf).map_err(|_| CoreError::Format {
            offset: self.offset,
            message: format!("truncated while reading {what}"),
        })?;
        self.offset += N;
        Ok(buf)
    }

    fn take_vec(&mut self, n: usize, what: &str) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inner.read_exact(&mut buf).map_err(|_| CoreError::Format {
            offset: self.offset,
            message: format!("truncated while reading {what}"),
        })?;
        self.offset += n;
        Ok(buf)
    }
}

pub fn load_grid(r: &mut impl Read) -> Result<Grid> {
    let mut c = Cursor { inner: r, offset: 0 };
    let magic = c.take::<4>("magic")?;
    if magic != MAGIC {
        return Err(CoreError::Format {
            offset: 0,
            message: format!("bad magic {magic:?}, expected {MAGIC:?}"),
        });
    }
    let version = u16::from_le_bytes(c.take::<2>("version")?);
    if version != VERSION {
        return Err(CoreError::Format {
            offset: 4,
            message: format!("unsupported version {version}"),
        });
    }
    let payload = c.take::<1>("payload kind")?[0];
    let reserved = c.take::<1>("reserved byte")?[0];
    if reserved != 0 {
        return Err(CoreError::Format {
            offset: 7,
            message: format!("reserved byte must be 0, got {reserved}"),
        });
    }
    let mut dims = [0usize; 3];
    for (a, d) in dims.iter_mut().enumerate() {
        let off = c.offset;
        let v = u32::from_le_bytes(c.take::<4>("dims")?) as usize;
        if v == 0 {
            return Err(CoreError::Format {
                offset: off,
                message: "zero grid dimension".into(),
            });
        }
        *d = v;
        let _ = a;
    }
    let voxels = dims[0]
        .checked_mul(dims[1])
        .and_then(|v| v.checked_mul(dims[2]))
        .ok_or(CoreError::Format {
            offset: 8,
            message: "dimension product overflows".into(),
        })?;
    match payload {
        PAYLOAD_LABELS => {
            let data = c.take_vec(voxels, "label payload")?;
            let end = c.offset;
            if c.take_vec(1, "end").is_ok() {
                return Err(CoreError::Format {
                    offset: end,
                    message: "trailing bytes after payload".into(),
                });
            }
            Ok(Grid::Labels(VoxelLabels::new(dims, data)?))
        }
        PAYLOAD_LOGITS => {
            let k = u32::from_le_bytes(c.take::<4>("num_classes")?) as usize;
            if k == 0 {
                return Err(CoreError::Format {
                    offset: 20,
                    message: "zero num_classes".into(),
                });
            }
            let raw = c.take_vec(voxels * k * 4, "logit payload")?;
            let end = c.offset;
            if c.take_vec(1, "end").is_ok() {
                return Err(CoreError::Format {
                    offset: end,
                    message: "trailing bytes after payload".into(),
                });
            }
            let data: Vec<f64> = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
                .collect();
            Ok(Grid::Logits(Tensor::new(
                vec![dims[0], dims[1], dims[2], k],
                data,
            )?))
        }
        other => Err(CoreError::Format {
            offset: 6,
            message: format!("unknown payload kind {other}"),
        }),
    }
}

pub fn save_labels_file(path: &std::path::Path, labels: &VoxelLabels) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    save_labels(&mut f, labels)
}

pub fn save_logits_file(path: &std::path::Path, logits: &Tensor) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    save_logits(&mut f, logits)
}

pub fn load_grid_file(path: &std::path::Path) -> Result<Grid> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    load_grid(&mut f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn labels_round_trip() {
        let labels = VoxelLabels::new([2, 3, 2], (0..12).map(|i| (i % 5) as u8).collect()).unwrap();
        let mut buf = Vec::new();
        save_labels(&mut buf, &labels).unwrap();
        assert_eq!(buf.len(), 20 + 12);
        match load_grid(&mut buf.as_slice()).unwrap() {
            Grid::Labels(got) => {
                assert_eq!(got.dims, labels.dims);
                assert_eq!(got.labels, labels.labels);
            }
            Grid::Logits(_) => panic!("wrong payload kind"),
        }
    }

    #[test]
    fn logits_round_trip_at_f32_precision() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let logits = Tensor::from_fn(&[2, 2, 2, 3], |_| rng.gen_range(-10.0..10.0));
        let mut buf = Vec::new();
        save_logits(&mut buf, &logits).unwrap();
        assert_eq!(buf.len(), 24 + 8 * 3 * 4);
        match load_grid(&mut buf.as_slice()).unwrap() {
            Grid::Logits(got) => {
                assert_eq!(got.shape(), logits.shape());
                for (g, w) in got.data().iter().zip(logits.data()) {
                    assert_eq!(*g, *w as f32 as f64);
                }
            }
            Grid::Labels(_) => panic!("wrong payload kind"),
        }
    }

    #[test]
    fn header_layout_is_exact() {
        let labels = VoxelLabels::filled([1, 2, 3], 9);
        let mut buf = Vec::new();
        save_labels(&mut buf, &labels).unwrap();
        assert_eq!(&buf[0..4], b"SYMV");
        assert_eq!(u16::from_le_bytes([buf[4], buf[5]]), 1);
        assert_eq!(buf[6], PAYLOAD_LABELS);
        assert_eq!(buf[7], 0);
        assert_eq!(u32::from_le_bytes([buf[8], buf[9], buf[10], buf[11]]), 1);
        assert_eq!(u32::from_le_bytes([buf[12], buf[13], buf[14], buf[15]]), 2);
        assert_eq!(u32::from_le_bytes([buf[16], buf[17], buf[18], buf[19]]), 3);
        assert!(buf[20..].iter().all(|&b| b == 9));
    }

    #[test]
    fn corrupted_magic_rejected_with_offset() {
        let labels = VoxelLabels::filled([1, 1, 1], 0);
        let mut buf = Vec::new();
        save_labels(&mut buf, &labels).unwrap();
        buf[0] = b'X';
        match load_grid(&mut buf.as_slice()) {
            Err(CoreError::Format { offset: 0, .. }) => {}
            other => panic!("expected format error at offset 0, got {other:?}"),
        }
    }

    #[test]
    fn truncation_and_trailing_bytes_rejected() {
        let labels = VoxelLabels::filled([2, 2, 2], 1);
        let mut buf = Vec::new();
        save_labels(&mut buf, &labels).unwrap();
        let short = &buf[..buf.len() - 1];
        assert!(matches!(
            load_grid(&mut &short[..]),
            Err(CoreError::Format { .. })
        ));
        let mut long = buf.clone();
        long.push(0);
        assert!(matches!(
            load_grid(&mut long.as_slice()),
            Err(CoreError::Format { .. })
        ));
    }

    #[test]
    fn unknown_payload_and_version_rejected() {
        let labels = VoxelLabels::filled([1, 1, 1], 0);
        let mut buf = Vec::new();
        save_labels(&mut buf, &labels).unwrap();
        let mut bad = buf.clone();
        bad[6] = 7;
        assert!(matches!(
            load_grid(&mut bad.as_slice()),
            Err(CoreError::Format { offset: 6, .. })
        ));
        let mut bad = buf.clone();
        bad[4] = 2;
        assert!(matches!(
            load_grid(&mut bad.as_slice()),
            Err(CoreError::Format { offset: 4, .. })
        ));
    }

    proptest! {
        #[test]
        fn labels_round_trip_any_dims(
            x in 1usize..8, y in 1usize..8, z in 1usize..8, seed in 0u64..1000
        ) {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let labels = VoxelLabels::new(
                [x, y, z],
                (0..x * y * z).map(|_| rng.gen_range(0..20) as u8).collect(),
            ).unwrap();
            let mut buf = Vec::new();
            save_labels(&mut buf, &labels).unwrap();
            prop_assert_eq!(buf.len(), 20 + x * y * z);
            let got = load_grid(&mut buf.as_slice()).unwrap();
            prop_assert_eq!(got, Grid::Labels(labels));
        }
    }
}
