//! `MPC1` binary point-cloud files (little-endian):
//!
//! ```text
//! magic "MPC1" | u32 version=1 | u64 N | u32 C | u8 has_labels
//! N×3 f32 positions | N×C f32 features | [N i32 labels]
//! ```

use std::fs;
use std::path::Path;

use super::voxel::PointCloud;
use crate::error::{Error, Result};

pub const CLOUD_MAGIC: &[u8; 4] = b"MPC1";
pub const CLOUD_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 8 + 4 + 1;

pub fn encode_cloud(pc: &PointCloud) -> Vec<u8> {
    let n = pc.len();
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * (n * (3 + pc.channels + 1)));
    out.extend_from_slice(CLOUD_MAGIC);
    out.extend_from_slice(&CLOUD_VERSION.to_le_bytes());
    out.extend_from_slice(&(n as u64).to_le_bytes());
    out.extend_from_slice(&(pc.channels as u32).to_le_bytes());
    out.push(pc.labels.is_some() as u8);
    for v in pc.positions.iter().chain(&pc.features) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(labels) = &pc.labels {
        for l in labels {
            out.extend_from_slice(&l.to_le_bytes());
        }
    }
    out
}

/// Bounds-checked little-endian cursor.
pub(crate) struct Reader<'a> {
    pub(crate) buf: &'a [u8],
    pub(crate) pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos as u64,
                message: format!("truncated payload while reading {what}"),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| self.overflow())?, what)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect())
    }

    pub(crate) fn overflow(&self) -> Error {
        Error::Format {
            offset: self.pos as u64,
            message: "declared size overflows".into(),
        }
    }
}

pub fn decode_cloud(buf: &[u8]) -> Result<PointCloud> {
    let mut r = Reader::new(buf);
    let magic = r.take(4, "magic")?;
    if magic != CLOUD_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: format!("bad magic {magic:?}, expected \"MPC1\""),
        });
    }
    let version = r.u32("version")?;
    if version != CLOUD_VERSION {
        return Err(Error::Format {
            offset: 4,
            message: format!("unsupported version {version}"),
        });
    }
    let n = r.u64("point count")? as usize;
    let c = r.u32("channel count")? as usize;
    let has_labels = r.take(1, "label flag")?[0];
    if has_labels > 1 {
        return Err(Error::Format {
            offset: (r.pos - 1) as u64,
            message: format!("label flag must be 0 or 1, got {has_labels}"),
        });
    }
    let positions = r.f32s(n.checked_mul(3).ok_or_else(|| r.overflow())?, "positions")?;
    let features = r.f32s(n.checked_mul(c).ok_or_else(|| r.overflow())?, "features")?;
    let labels = if has_labels == 1 {
        let bytes = r.take(n.checked_mul(4).ok_or_else(|| r.overflow())?, "labels")?;
        Some(
            bytes
                .chunks_exact(4)
                .map(|b| i32::from_le_bytes(b.try_into().expect("4 bytes")))
                .collect(),
        )
    } else {
        None
    };
    if r.pos != buf.len() {
        return Err(Error::Format {
            offset: r.pos as u64,
            message: format!("{} trailing bytes", buf.len() - r.pos),
        });
    }
    PointCloud::new(positions, features, c, labels)
}

pub fn write_cloud(pc: &PointCloud, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_cloud(pc))?;
    Ok(())
}

pub fn read_cloud(path: impl AsRef<Path>) -> Result<PointCloud> {
    decode_cloud(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pointcloud::{generate_scene, SceneSpec};

    #[test]
    fn roundtrip_generated_scene() {
        let pc = generate_scene(
            11,
            &SceneSpec {
                num_points: 3000,
                ..SceneSpec::default()
            },
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scene.mpc");
        write_cloud(&pc, &path).unwrap();
        assert_eq!(read_cloud(&path).unwrap(), pc);
    }

    #[test]
    fn hand_assembled_single_point() {
        let mut bytes = b"MPC1".to_vec();
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&1u64.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.push(1);
        for v in [0.5f32, -1.0, 2.0, 0.25] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        bytes.extend_from_slice(&3i32.to_le_bytes());
        let pc = decode_cloud(&bytes).unwrap();
        assert_eq!(pc.len(), 1);
        assert_eq!(pc.position(0), [0.5, -1.0, 2.0]);
        assert_eq!(pc.features, vec![0.25]);
        assert_eq!(pc.labels, Some(vec![3]));
    }

    #[test]
    fn format_errors() {
        let pc = PointCloud::new(vec![0.0; 3], vec![1.0; 3], 3, None).unwrap();
        let good = encode_cloud(&pc);

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(matches!(decode_cloud(&bad_magic), Err(Error::Format { offset: 0, .. })));

        let mut bad_version = good.clone();
        bad_version[4] = 2;
        assert!(matches!(decode_cloud(&bad_version), Err(Error::Format { offset: 4, .. })));

        let truncated = &good[..good.len() - 2];
        match decode_cloud(truncated) {
            Err(Error::Format { offset, message }) => {
                assert_eq!(offset, (HEADER_LEN + 12) as u64);
                assert!(message.contains("features"));
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }
}
