use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use super::scan::{selective_scan, SsmParams, SsmVars};
use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Real, Tape, Tensor, Var};

/// Emits `s, s+n, s+2n, …` for each start `s` in `0..n`.
pub fn strided_permutation(l: usize, n: usize) -> Vec<usize> {
    let n = n.max(1);
    (0..n.min(l)).flat_map(|s| (s..l).step_by(n)).collect()
}

pub fn invert_permutation(p: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; p.len()];
    for (i, &j) in p.iter().enumerate() {
        inv[j] = i;
    }
    inv
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Direction {
    Forward,
    Backward,
    StridedForward,
    StridedBackward,
}

impl Direction {
    pub const ALL: [Direction; 4] = [
        Direction::Forward,
        Direction::Backward,
        Direction::StridedForward,
        Direction::StridedBackward,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Direction::Forward => "forward",
            Direction::Backward => "backward",
            Direction::StridedForward => "strided_forward",
            Direction::StridedBackward => "strided_backward",
        }
    }

    pub fn is_strided(self) -> bool {
        matches!(self, Direction::StridedForward | Direction::StridedBackward)
    }

    /// Visiting order of the `l` serialized positions.
    pub fn order(self, l: usize, stride: usize) -> Vec<usize> {
        match self {
            Direction::Forward => (0..l).collect(),
            Direction::Backward => (0..l).rev().collect(),
            Direction::StridedForward => strided_permutation(l, stride),
            Direction::StridedBackward => {
                let mut p = strided_permutation(l, stride);
                p.reverse();
                p
            }
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Direction::ALL
            .into_iter()
            .find(|d| d.name() == s.trim())
            .ok_or_else(|| Error::Config(format!("unknown scan direction `{s}`")))
    }
}

/// Enabled scan directions, kept in canonical order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScanDirections {
    pub stride: usize,
    dirs: Vec<Direction>,
    pub share_params: bool,
}

impl ScanDirections {
    pub fn new(stride: usize, dirs: &[Direction], share_params: bool) -> Result<Self> {
        let mut dirs = dirs.to_vec();
        dirs.sort();
        dirs.dedup();
        if dirs.is_empty() {
            return Err(Error::Config("at least one scan direction is required".into()));
        }
        if stride < 1 || (stride < 2 && dirs.iter().any(|d| d.is_strided())) {
            return Err(Error::Config(format!("strided scans need stride >= 2, got {stride}")));
        }
        Ok(ScanDirections {
            stride,
            dirs,
            share_params,
        })
    }

    pub fn all(stride: usize) -> Result<Self> {
        Self::new(stride, &Direction::ALL, false)
    }

    pub fn forward_only() -> Self {
        Self::new(2, &[Direction::Forward], false).expect("valid")
    }

    pub fn bidirectional() -> Self {
        Self::new(2, &[Direction::Forward, Direction::Backward], false).expect("valid")
    }

    pub fn directions(&self) -> &[Direction] {
        &self.dirs
    }

    /// Parameter group name used by direction `d`.
    pub fn param_key(&self, d: Direction) -> &'static str {
        if self.share_params {
            "shared"
        } else {
            d.name()
        }
    }

    /// Distinct parameter groups, in canonical order.
    pub fn param_keys(&self) -> Vec<&'static str> {
        if self.share_params {
            vec!["shared"]
        } else {
            self.dirs.iter().map(|d| d.name()).collect()
        }
    }

    /// Comma-separated direction names.
    pub fn list(&self) -> String {
        self.dirs.iter().map(|d| d.name()).collect::<Vec<_>>().join(",")
    }

    pub fn parse_list(s: &str) -> Result<Vec<Direction>> {
        match s.trim() {
            "all" => Ok(Direction::ALL.to_vec()),
            s => s.split(',').filter(|p| !p.trim().is_empty()).map(str::parse).collect(),
        }
    }
}

/// Gather orders (and their inverses) for one sequence length.
pub(crate) struct Orders {
    pub forward: Arc<Vec<usize>>,
    pub inverse: Arc<Vec<usize>>,
}

pub(crate) fn orders(d: Direction, l: usize, stride: usize) -> Option<Orders> {
    if d == Direction::Forward {
        return None;
    }
    let p = d.order(l, stride);
    let inv = invert_permutation(&p);
    Some(Orders {
        forward: Arc::new(p),
        inverse: Arc::new(inv),
    })
}

/// Runs `branch` on every direction's reordering of `u`, restores the
/// original order and averages, summing in canonical direction order.
pub(crate) fn merge_directions<T: Real>(
    tape: &mut Tape<T>,
    u: Var,
    dirs: &ScanDirections,
    mut branch: impl FnMut(&mut Tape<T>, Var, Direction) -> Result<Var>,
) -> Result<Var> {
    let l = tape.value(u).rows();
    let mut total: Option<Var> = None;
    for &d in dirs.directions() {
        let ord = orders(d, l, dirs.stride);
        let x = match &ord {
            Some(o) => tape.gather_rows(u, o.forward.clone())?,
            None => u,
        };
        let y = branch(tape, x, d)?;
        let y = match &ord {
            Some(o) => tape.gather_rows(y, o.inverse.clone())?,
            None => y,
        };
        total = Some(match total {
            Some(acc) => tape.add(acc, y)?,
            None => y,
        });
    }
    let total = total.expect("non-empty direction set");
    let k = dirs.directions().len();
    Ok(if k == 1 {
        total
    } else {
        tape.scale(total, T::one() / T::of(k as f64))
    })
}

impl<T: Real> Tape<T> {
    /// Multi-directional scan with parameter groups `{prefix}.{key}`.
    pub fn bidirectional_strided_ssm(
        &mut self,
        u: Var,
        store: &ParamStore<T>,
        prefix: &str,
        dirs: &ScanDirections,
    ) -> Result<Var> {
        merge_directions(self, u, dirs, |tape, x, d| {
            let vars = SsmVars::bind(tape, store, &format!("{prefix}.{}", dirs.param_key(d)))?;
            tape.ssm(x, &vars, false)
        })
    }
}

fn gather<T: Real>(x: &Tensor<T>, idx: &[usize]) -> Tensor<T> {
    let rows: Vec<&[T]> = idx.iter().map(|&i| x.row(i)).collect();
    Tensor::matrix(x.rows(), x.cols(), rows.concat()).expect("shape")
}

/// Forward-only multi-directional scan; `params` holds one set per entry
/// of [`ScanDirections::param_keys`].
pub fn bidirectional_strided_ssm<T: Real>(
    u: &Tensor<T>,
    params: &[SsmParams<T>],
    dirs: &ScanDirections,
) -> Result<Tensor<T>> {
    let keys = dirs.param_keys();
    if params.len() != keys.len() {
        return Err(Error::Parameter(format!(
            "expected {} parameter sets for directions {}, got {}",
            keys.len(),
            dirs.list(),
            params.len()
        )));
    }
    let mut total = vec![T::zero(); u.len()];
    for &d in dirs.directions() {
        let p = &params[keys.iter().position(|&k| k == dirs.param_key(d)).expect("key")];
        let y = match orders(d, u.rows(), dirs.stride) {
            Some(o) => gather(&selective_scan(&gather(u, &o.forward), p, false)?, &o.inverse),
            None => selective_scan(u, p, false)?,
        };
        for (a, &v) in total.iter_mut().zip(y.data()) {
            *a += v;
        }
    }
    let k = T::of(dirs.directions().len() as f64);
    if dirs.directions().len() > 1 {
        total.iter_mut().for_each(|v| *v /= k);
    }
    Tensor::matrix(u.rows(), u.cols(), total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn strided_examples() {
        assert_eq!(strided_permutation(6, 2), vec![0, 2, 4, 1, 3, 5]);
        let tokens: Vec<usize> = strided_permutation(6, 2).iter().map(|i| i + 1).collect();
        assert_eq!(tokens, vec![1, 3, 5, 2, 4, 6]);
        assert_eq!(strided_permutation(5, 2), vec![0, 2, 4, 1, 3]);
        assert_eq!(strided_permutation(7, 1), (0..7).collect::<Vec<_>>());
        assert_eq!(strided_permutation(2, 5), vec![0, 1]);
    }

    #[test]
    fn direction_orders() {
        assert_eq!(Direction::Backward.order(4, 2), vec![3, 2, 1, 0]);
        assert_eq!(Direction::StridedBackward.order(6, 2), vec![5, 3, 1, 4, 2, 0]);
    }

    #[test]
    fn direction_set_validation() {
        assert!(ScanDirections::new(2, &[], false).is_err());
        assert!(ScanDirections::new(1, &[Direction::StridedForward], false).is_err());
        assert!(ScanDirections::new(1, &[Direction::Forward, Direction::Backward], false).is_ok());
        let d = ScanDirections::new(2, &[Direction::StridedBackward, Direction::Forward], false).unwrap();
        assert_eq!(d.list(), "forward,strided_backward");
        assert_eq!(ScanDirections::parse_list("all").unwrap().len(), 4);
        assert!(ScanDirections::parse_list("forward,sideways").is_err());
    }

    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
        Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn single_forward_direction_is_the_plain_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = SsmParams::<f64>::init(3, 4, 1, true, &mut rng);
        let u = random(&mut rng, 9, 3);
        let y = bidirectional_strided_ssm(&u, std::slice::from_ref(&p), &ScanDirections::forward_only()).unwrap();
        assert_eq!(y.data(), selective_scan(&u, &p, false).unwrap().data());
    }

    #[test]
    fn tied_bidirectional_scan_keeps_palindromes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = SsmParams::<f64>::init(2, 3, 1, true, &mut rng);
        let half = random(&mut rng, 2, 2);
        let u = Tensor::matrix(4, 2, [half.row(0), half.row(1), half.row(1), half.row(0)].concat()).unwrap();
        let dirs = ScanDirections::new(2, &[Direction::Forward, Direction::Backward], true).unwrap();
        let y = bidirectional_strided_ssm(&u, &[p], &dirs).unwrap();
        for t in 0..4 {
            for c in 0..2 {
                assert!((y.at(t, c) - y.at(3 - t, c)).abs() < 1e-12);
            }
        }
    }

    /// Rows of the output whose value moves when input row `src` is perturbed.
    fn sensitive_rows(dirs: &ScanDirections, src: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = SsmParams::<f64>::init(1, 2, 1, false, &mut rng);
        let u = random(&mut rng, 6, 1);
        let base = bidirectional_strided_ssm(&u, std::slice::from_ref(&p), dirs).unwrap();
        let mut moved = u.clone();
        moved.data_mut()[src] += 1e-3;
        let y = bidirectional_strided_ssm(&moved, std::slice::from_ref(&p), dirs).unwrap();
        (0..6).filter(|&t| (y.at(t, 0) - base.at(t, 0)).abs() > 1e-12).collect()
    }

    #[test]
    fn strided_scan_links_different_predecessors() {
        let strided = ScanDirections::new(2, &[Direction::StridedForward], false).unwrap();
        let plain = ScanDirections::forward_only();
        // token 5 (row 4) follows token 3 (row 2) when strided, token 4 (row 3) otherwise
        assert!(sensitive_rows(&strided, 2).contains(&4));
        assert!(!sensitive_rows(&strided, 3).contains(&4));
        assert!(sensitive_rows(&plain, 3).contains(&4));
        // order [0,2,4,1,3,5]: row 2 reaches everything visited after it
        assert_eq!(sensitive_rows(&strided, 2), vec![1, 2, 3, 4, 5]);
        assert_eq!(sensitive_rows(&plain, 2), vec![2, 3, 4, 5]);
    }

    #[test]
    fn tape_version_matches_plain() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dirs = ScanDirections::all(2).unwrap();
        let mut store = ParamStore::new();
        let mut sets = Vec::new();
        for key in dirs.param_keys() {
            let p = SsmParams::<f64>::init(3, 2, 1, true, &mut rng);
            p.store(&mut store, &format!("ssm.{key}"));
            sets.push(p);
        }
        let u = random(&mut rng, 7, 3);
        let plain = bidirectional_strided_ssm(&u, &sets, &dirs).unwrap();
        let mut tape = Tape::new();
        let uv = tape.constant(u);
        let y = tape.bidirectional_strided_ssm(uv, &store, "ssm", &dirs).unwrap();
        assert!(tape.value(y).max_abs_diff(&plain) < 1e-13);
    }

    proptest! {
        #[test]
        fn strided_permutation_is_bijective(l in 1usize..200, n in 1usize..9) {
            let p = strided_permutation(l, n);
            let mut sorted = p.clone();
            sorted.sort();
            prop_assert_eq!(&sorted, &(0..l).collect::<Vec<_>>());
            let inv = invert_permutation(&p);
            prop_assert!((0..l).all(|i| p[inv[i]] == i && inv[p[i]] == i));
        }

        #[test]
        fn merge_is_independent_of_listing_order(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let params: Vec<SsmParams<f64>> = (0..4).map(|_| SsmParams::init(2, 2, 1, true, &mut rng)).collect();
            let u = random(&mut rng, 8, 2);
            let a = ScanDirections::new(2, &Direction::ALL, false).unwrap();
            let mut rev = Direction::ALL;
            rev.reverse();
            let b = ScanDirections::new(2, &rev, false).unwrap();
            let ya = bidirectional_strided_ssm(&u, &params, &a).unwrap();
            let yb = bidirectional_strided_ssm(&u, &params, &b).unwrap();
            prop_assert!(ya.max_abs_diff(&yb) <= 1e-12);
        }
    }
}
