use crate::error::{Error, Result};

/// Symbols of the analytic cost models.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FlopParams {
    /// Sequence length or active voxel count.
    pub l: u64,
    /// Channel width of attention and state-space layers.
    pub c: u64,
    pub c_in: u64,
    pub c_out: u64,
    /// State size.
    pub n: u64,
    /// Expansion factor.
    pub e: u64,
    /// Depthwise conv1d kernel size.
    pub conv_k: u64,
    /// Sparse conv kernel size.
    pub k: u64,
}

impl FlopParams {
    pub fn new(l: u64, c: u64) -> Self {
        FlopParams {
            l,
            c,
            c_in: c,
            c_out: c,
            n: 16,
            e: 2,
            conv_k: 4,
            k: 3,
        }
    }
}

fn positive(fields: &[(&str, u64)]) -> Result<()> {
    match fields.iter().find(|(_, v)| *v == 0) {
        Some((name, _)) => Err(Error::Parameter(format!("{name} must be a positive integer"))),
        None => Ok(()),
    }
}

fn overflow() -> Error {
    Error::Range("operation count exceeds 128-bit range".into())
}

/// Exact sum of products, failing only beyond `u128`.
fn terms(list: &[(u128, &[u64])]) -> Result<u128> {
    list.iter().try_fold(0u128, |acc, (coef, factors)| {
        let prod = factors
            .iter()
            .try_fold(*coef, |p, &f| p.checked_mul(f as u128))
            .ok_or_else(overflow)?;
        acc.checked_add(prod).ok_or_else(overflow)
    })
}

/// Projections plus attention: `4·L·C² + 2·L²·C`.
pub fn flops_transformer(p: &FlopParams) -> Result<u128> {
    positive(&[("L", p.l), ("C", p.c)])?;
    terms(&[(4, &[p.l, p.c, p.c]), (2, &[p.l, p.l, p.c])])
}

/// Scan, depthwise conv and projections: `9·L·C·N + L·C·K + 3·L·C²·E`.
pub fn flops_mamba(p: &FlopParams) -> Result<u128> {
    positive(&[("L", p.l), ("C", p.c), ("N", p.n), ("K", p.conv_k), ("E", p.e)])?;
    terms(&[
        (9, &[p.l, p.c, p.n]),
        (1, &[p.l, p.c, p.conv_k]),
        (3, &[p.l, p.c, p.c, p.e]),
    ])
}

/// [`flops_mamba`] times the number of scan directions.
pub fn flops_mamba_directions(p: &FlopParams, directions: u64) -> Result<u128> {
    positive(&[("directions", directions)])?;
    flops_mamba(p)?.checked_mul(directions as u128).ok_or_else(overflow)
}

/// Convolution plus bias: `2·C_in·C_out·k³·L + L·C_in·C_out`.
pub fn flops_cnn(p: &FlopParams) -> Result<u128> {
    positive(&[("L", p.l), ("C_in", p.c_in), ("C_out", p.c_out), ("k", p.k)])?;
    terms(&[
        (2, &[p.c_in, p.c_out, p.k, p.k, p.k, p.l]),
        (1, &[p.l, p.c_in, p.c_out]),
    ])
}
