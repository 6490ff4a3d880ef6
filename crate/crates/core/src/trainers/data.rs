//! Synthetic pools, the four-way split and balanced attacker batches.

use std::fmt;
use std::str::FromStr;

use crate::diffmodel::Sample;
use crate::numkit::Rng;
use crate::{ensure, Error, Result};

/// Standard deviation of each gauss_mix component.
pub const GAUSS_MIX_SIGMA: f64 = 0.5;
/// Distance of each gauss_mix class mean from the origin.
pub const GAUSS_MIX_RADIUS: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ToyKind {
    /// Isotropic Gaussians centred on distinct signed coordinate axes.
    GaussMix,
    /// Noisy circles of class-dependent radius in the first two coordinates.
    Rings,
}

impl FromStr for ToyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gauss_mix" => Ok(Self::GaussMix),
            "rings" => Ok(Self::Rings),
            other => Err(Error::Config(format!("unknown data kind {other:?}"))),
        }
    }
}

impl fmt::Display for ToyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::GaussMix => "gauss_mix",
            Self::Rings => "rings",
        })
    }
}

/// Class-conditional distribution with seeded per-class parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyDistribution {
    pub kind: ToyKind,
    pub dim: usize,
    /// Class means (gauss_mix) or ring radii in the first entry (rings).
    pub class_params: Vec<Vec<f64>>,
}

impl ToyDistribution {
    pub fn new(kind: ToyKind, dim: usize, classes: usize, rng: &Rng) -> Result<Self> {
        ensure!(classes >= 1, Config, "need at least one class");
        let mut prng = rng.stream("class-params");
        let class_params = match kind {
            ToyKind::GaussMix => {
                ensure!(dim >= 1, Config, "gauss_mix needs dim >= 1");
                ensure!(classes <= 2 * dim, Config, "gauss_mix supports at most 2·dim = {} classes", 2 * dim);
                // Distinct signed axes: pairwise mean distance is R·√2 or 2R.
                let mut axes: Vec<usize> = (0..2 * dim).collect();
                prng.shuffle(&mut axes);
                axes[..classes]
                    .iter()
                    .map(|&a| {
                        let mut mu = vec![0.0; dim];
                        mu[a % dim] = if a < dim { GAUSS_MIX_RADIUS } else { -GAUSS_MIX_RADIUS };
                        mu
                    })
                    .collect()
            }
            ToyKind::Rings => {
                ensure!(dim >= 2, Config, "rings needs dim >= 2");
                let phase = prng.uniform() * std::f64::consts::TAU;
                (0..classes).map(|c| vec![1.0 + c as f64, phase]).collect()
            }
        };
        Ok(Self { kind, dim, class_params })
    }

    pub fn classes(&self) -> usize {
        self.class_params.len()
    }

    pub fn draw(&self, class: usize, rng: &mut Rng) -> Vec<f64> {
        match self.kind {
            ToyKind::GaussMix => self.class_params[class]
                .iter()
                .map(|m| m + GAUSS_MIX_SIGMA * rng.normal())
                .collect(),
            ToyKind::Rings => {
                let (radius, phase) = (self.class_params[class][0], self.class_params[class][1]);
                let angle = phase + rng.uniform() * std::f64::consts::TAU;
                let mut x: Vec<f64> = (0..self.dim).map(|_| 0.1 * rng.normal()).collect();
                x[0] += radius * angle.cos();
                x[1] += radius * angle.sin();
                x
            }
        }
    }

    /// `n` samples with ids `first_id..`, classes assigned round-robin.
    pub fn sample(&self, n: usize, first_id: u64, rng: &mut Rng) -> Vec<Sample> {
        (0..n)
            .map(|i| {
                let y = i % self.classes();
                Sample::new(first_id + i as u64, self.draw(y, rng), y)
            })
            .collect()
    }
}

/// Class-balanced synthetic pool; per-class parameters come from `rng`'s
/// `class-params` stream and the draws from its `pool` stream.
pub fn make_toy_pool(kind: ToyKind, n: usize, dim: usize, classes: usize, rng: &Rng) -> Result<Vec<Sample>> {
    ensure!(n >= classes, Config, "pool of {n} cannot cover {classes} classes");
    let dist = ToyDistribution::new(kind, dim, classes, rng)?;
    Ok(dist.sample(n, 0, &mut rng.stream("pool")))
}

/// The four-way member/non-member, auxiliary/test partition.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitDataset {
    pub aux_m: Vec<Sample>,
    pub te_m: Vec<Sample>,
    pub aux_nm: Vec<Sample>,
    pub te_nm: Vec<Sample>,
}

impl SplitDataset {
    /// Training set `D_tr = aux_m ∪ te_m`.
    pub fn d_tr(&self) -> Vec<Sample> {
        self.aux_m.iter().chain(&self.te_m).cloned().collect()
    }

    pub fn d_aux(&self) -> Vec<Sample> {
        self.aux_m.iter().chain(&self.aux_nm).cloned().collect()
    }

    pub fn d_te(&self) -> Vec<Sample> {
        self.te_m.iter().chain(&self.te_nm).cloned().collect()
    }
}

/// Disjoint random assignment of `sizes = (aux_m, te_m, aux_nm, te_nm)` pool
/// entries, without replacement.
pub fn make_splits(pool: &[Sample], sizes: [usize; 4], rng: &mut Rng) -> Result<SplitDataset> {
    let total: usize = sizes.iter().sum();
    ensure!(total <= pool.len(), Config, "splits need {total} samples, pool has {}", pool.len());
    let mut idx: Vec<usize> = (0..pool.len()).collect();
    rng.shuffle(&mut idx);
    let mut parts = Vec::with_capacity(4);
    let mut at = 0;
    for &s in &sizes {
        parts.push(idx[at..at + s].iter().map(|&i| pool[i].clone()).collect::<Vec<_>>());
        at += s;
    }
    let te_nm = parts.pop().expect("four parts");
    let aux_nm = parts.pop().expect("four parts");
    let te_m = parts.pop().expect("four parts");
    let aux_m = parts.pop().expect("four parts");
    Ok(SplitDataset {
        aux_m,
        te_m,
        aux_nm,
        te_nm,
    })
}

/// One pass of balanced index batches: both sides are shuffled, the longer
/// side is cut to the shorter one's length, and the result is chunked into
/// pairs of `per_side` indices (the final pair may be smaller, but is still
/// balanced).
pub fn balanced_index_batches(
    n_members: usize,
    n_nonmembers: usize,
    per_side: usize,
    rng: &mut Rng,
) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    ensure!(n_members >= 1 && n_nonmembers >= 1, Contract, "balanced batches need both sides nonempty");
    ensure!(per_side >= 1, Contract, "batch must hold at least one sample per side");
    let mut m: Vec<usize> = (0..n_members).collect();
    let mut n: Vec<usize> = (0..n_nonmembers).collect();
    rng.shuffle(&mut m);
    rng.shuffle(&mut n);
    let k = n_members.min(n_nonmembers);
    Ok(m[..k]
        .chunks(per_side)
        .zip(n[..k].chunks(per_side))
        .map(|(a, b)| (a.to_vec(), b.to_vec()))
        .collect())
}

pub type BatchPair<'a> = (Vec<&'a Sample>, Vec<&'a Sample>);

/// [`balanced_index_batches`] resolved to samples.
pub fn balanced_batches<'a>(
    aux_m: &'a [Sample],
    aux_nm: &'a [Sample],
    per_side: usize,
    rng: &mut Rng,
) -> Result<Vec<BatchPair<'a>>> {
    Ok(balanced_index_batches(aux_m.len(), aux_nm.len(), per_side, rng)?
        .into_iter()
        .map(|(a, b)| (a.iter().map(|&i| &aux_m[i]).collect(), b.iter().map(|&i| &aux_nm[i]).collect()))
        .collect())
}

/// Endless stream of balanced pairs; a fresh shuffled pass starts whenever the
/// previous one is exhausted.
pub struct PairStream<'a> {
    aux_m: &'a [Sample],
    aux_nm: &'a [Sample],
    per_side: usize,
    rng: Rng,
    pending: std::collections::VecDeque<BatchPair<'a>>,
}

impl<'a> PairStream<'a> {
    pub fn new(aux_m: &'a [Sample], aux_nm: &'a [Sample], per_side: usize, rng: Rng) -> Result<Self> {
        ensure!(!aux_m.is_empty() && !aux_nm.is_empty(), Contract, "balanced batches need both sides nonempty");
        ensure!(per_side >= 1, Contract, "batch must hold at least one sample per side");
        Ok(Self {
            aux_m,
            aux_nm,
            per_side,
            rng,
            pending: Default::default(),
        })
    }

    pub fn next_pair(&mut self) -> Result<BatchPair<'a>> {
        if self.pending.is_empty() {
            self.pending = balanced_batches(self.aux_m, self.aux_nm, self.per_side, &mut self.rng)?.into();
        }
        Ok(self.pending.pop_front().expect("a pass yields at least one pair"))
    }
}
