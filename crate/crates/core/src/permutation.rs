//! Bijections on `0..n` used to scatter neighbouring features apart.
//!
//! A spec stores `map[i] = σ(i)`, the destination position of element `i`.
//! Two-sided application moves entry `(i, j)` of a square matrix to
//! `(σ(i), σ(j))`, which equals `M A Mᵀ` for the 0/1 matrix with
//! `M[σ(i), i] = 1`.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Real, Tensor};
use crate::error::{dim_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    Identity,
    /// Grid of `rows` x `cols` written row-major and read column-major.
    Designed {
        rows: usize,
        cols: usize,
    },
    Random {
        seed: u64,
    },
    /// Composition or inverse of other specs.
    Derived,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawSpec")]
pub struct PermutationSpec {
    n: usize,
    map: Arc<[usize]>,
    provenance: Provenance,
}

#[derive(Deserialize)]
struct RawSpec {
    n: usize,
    map: Vec<usize>,
    provenance: Provenance,
}

impl TryFrom<RawSpec> for PermutationSpec {
    type Error = Error;

    fn try_from(raw: RawSpec) -> Result<Self> {
        if raw.map.len() != raw.n {
            return Err(Error::Config(format!(
                "permutation declares n = {} but lists {} entries",
                raw.n,
                raw.map.len()
            )));
        }
        Self::from_map(raw.map, raw.provenance)
    }
}

/// Grid shape for the designed construction: the divisor pair closest to
/// square with `rows <= cols`, or `⌊√n⌋ x ⌈n/rows⌉` (ragged) when `n` is prime.
pub fn grid_shape(n: usize) -> (usize, usize) {
    let root = n.isqrt();
    let rows = (1..=root).rev().find(|r| n.is_multiple_of(*r)).unwrap_or(1);
    if rows == 1 && n > 3 {
        let rows = root;
        (rows, n.div_ceil(rows))
    } else {
        (rows, n / rows)
    }
}

impl PermutationSpec {
    pub fn identity(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::Domain("permutation of zero elements".into()));
        }
        Ok(Self {
            n,
            map: (0..n).collect(),
            provenance: Provenance::Identity,
        })
    }

    /// Writes `0..n` row-major into an `R x L` grid and reads it back
    /// column-major, so row neighbours end up `R` positions apart.
    pub fn designed(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::Domain("designed permutation needs n >= 1".into()));
        }
        let (rows, cols) = grid_shape(n);
        // the last row may be short when n is prime
        let last_row_len = n - (rows - 1) * cols;
        let col_height = |c: usize| if c < last_row_len { rows } else { rows - 1 };
        let mut col_start = vec![0usize; cols];
        for c in 1..cols {
            col_start[c] = col_start[c - 1] + col_height(c - 1);
        }
        let map: Vec<usize> = (0..n).map(|i| col_start[i % cols] + i / cols).collect();
        Ok(Self {
            n,
            map: map.into(),
            provenance: Provenance::Designed { rows, cols },
        })
    }

    /// Uniform shuffle from a seeded ChaCha8 stream.
    pub fn random(n: usize, seed: u64) -> Result<Self> {
        if n == 0 {
            return Err(Error::Domain("random permutation needs n >= 1".into()));
        }
        let mut map: Vec<usize> = (0..n).collect();
        map.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        Ok(Self {
            n,
            map: map.into(),
            provenance: Provenance::Random { seed },
        })
    }

    /// Validates that `map` is a bijection on `0..map.len()`.
    pub fn from_map(map: Vec<usize>, provenance: Provenance) -> Result<Self> {
        let n = map.len();
        if n == 0 {
            return Err(Error::Domain("permutation of zero elements".into()));
        }
        let mut seen = vec![false; n];
        for (i, &m) in map.iter().enumerate() {
            if m >= n || std::mem::replace(&mut seen[m], true) {
                return Err(Error::Domain(format!(
                    "map is not a bijection on 0..{n}: entry {i} = {m}"
                )));
            }
        }
        Ok(Self {
            n,
            map: map.into(),
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn map(&self) -> &[usize] {
        &self.map
    }

    pub fn shared_map(&self) -> Arc<[usize]> {
        self.map.clone()
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn is_identity(&self) -> bool {
        self.map.iter().enumerate().all(|(i, &m)| i == m)
    }

    pub fn inverse(&self) -> Self {
        let mut inv = vec![0; self.n];
        for (i, &m) in self.map.iter().enumerate() {
            inv[m] = i;
        }
        Self {
            n: self.n,
            map: inv.into(),
            provenance: Provenance::Derived,
        }
    }

    /// `self` followed by `then`: element `i` goes to `then(self(i))`.
    pub fn compose(&self, then: &Self) -> Result<Self> {
        if self.n != then.n {
            return Err(dim_err!(
                "cannot compose permutations of size {} and {}",
                self.n,
                then.n
            ));
        }
        Ok(Self {
            n: self.n,
            map: self.map.iter().map(|&m| then.map[m]).collect(),
            provenance: Provenance::Derived,
        })
    }

    /// Elements in their new order; `sequence()[k]` is the element moved to
    /// position `k`.
    pub fn sequence(&self) -> Vec<usize> {
        self.inverse().map.to_vec()
    }

    /// The 0/1 matrix `M` with `M[σ(i), i] = 1`.
    pub fn as_matrix<T: Real>(&self) -> Tensor<T> {
        let mut m = Tensor::zeros(&[self.n, self.n]);
        for (i, &s) in self.map.iter().enumerate() {
            m.data_mut()[s * self.n + i] = T::one();
        }
        m
    }

    /// `out[σ(i)] = x[i]`.
    pub fn apply<V: Copy + Default>(&self, x: &[V]) -> Result<Vec<V>> {
        if x.len() != self.n {
            return Err(dim_err!("permutation of size {} applied to length {}", self.n, x.len()));
        }
        let mut out = vec![V::default(); self.n];
        for (i, &s) in self.map.iter().enumerate() {
            out[s] = x[i];
        }
        Ok(out)
    }

    /// `out[σ(i), σ(j)] = a[i, j]` on a flat row-major `n x n` slice.
    pub fn apply_two_sided_slice<V: Copy + Default>(&self, a: &[V]) -> Result<Vec<V>> {
        let n = self.n;
        if a.len() != n * n {
            return Err(dim_err!(
                "two-sided permutation of size {n} applied to {} values",
                a.len()
            ));
        }
        let mut out = vec![V::default(); n * n];
        for (i, &si) in self.map.iter().enumerate() {
            let row = &a[i * n..(i + 1) * n];
            let dst = &mut out[si * n..(si + 1) * n];
            for (&sj, &v) in self.map.iter().zip(row) {
                dst[sj] = v;
            }
        }
        Ok(out)
    }

    pub fn apply_two_sided<T: Real>(&self, a: &Tensor<T>) -> Result<Tensor<T>> {
        if a.shape() != [self.n, self.n] {
            return Err(dim_err!(
                "two-sided permutation of size {} applied to {:?}",
                self.n,
                a.shape()
            ));
        }
        Tensor::new(&[self.n, self.n], self.apply_two_sided_slice(a.data())?)
    }

    /// Smallest `|σ(i+1) − σ(i)|` over consecutive elements.
    pub fn min_adjacent_separation(&self) -> Result<usize> {
        if self.n < 2 {
            return Err(Error::Domain("separation needs at least two elements".into()));
        }
        Ok(self.map.windows(2).map(|w| w[0].abs_diff(w[1])).min().expect("n >= 2"))
    }
}
