//! 3D Morton (Z-order) keys. Bit `i` of x lands at key bit `3i`, y at
//! `3i+1`, z at `3i+2`.

use crate::error::{Error, Result};

pub const MORTON_BITS: u32 = 21;
pub const MORTON_MAX: u32 = (1 << MORTON_BITS) - 1;

/// Spread the low 21 bits of `v` so that consecutive bits land 3 apart.
#[inline]
fn part1by2(v: u64) -> u64 {
    let mut x = v & 0x1f_ffff;
    x = (x | (x << 32)) & 0x1f_0000_0000_ffff;
    x = (x | (x << 16)) & 0x1f_0000_ff00_00ff;
    x = (x | (x << 8)) & 0x100f_00f0_0f00_f00f;
    x = (x | (x << 4)) & 0x10c3_0c30_c30c_30c3;
    x = (x | (x << 2)) & 0x1249_2492_4924_9249;
    x
}

#[inline]
fn compact1by2(v: u64) -> u32 {
    let mut x = v & 0x1249_2492_4924_9249;
    x = (x | (x >> 2)) & 0x10c3_0c30_c30c_30c3;
    x = (x | (x >> 4)) & 0x100f_00f0_0f00_f00f;
    x = (x | (x >> 8)) & 0x1f_0000_ff00_00ff;
    x = (x | (x >> 16)) & 0x1f_0000_0000_ffff;
    x = (x | (x >> 32)) & 0x1f_ffff;
    x as u32
}

pub fn morton_encode(x: u32, y: u32, z: u32) -> Result<u64> {
    if x > MORTON_MAX || y > MORTON_MAX || z > MORTON_MAX {
        return Err(Error::Range(format!(
            "voxel coordinate ({x}, {y}, {z}) exceeds 21 bits"
        )));
    }
    Ok(morton_encode_unchecked(x, y, z))
}

#[inline]
pub(crate) fn morton_encode_unchecked(x: u32, y: u32, z: u32) -> u64 {
    part1by2(x as u64) | (part1by2(y as u64) << 1) | (part1by2(z as u64) << 2)
}

pub fn morton_decode(key: u64) -> [u32; 3] {
    [compact1by2(key), compact1by2(key >> 1), compact1by2(key >> 2)]
}
