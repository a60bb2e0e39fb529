//! Pixel distance versus correlation, discrete information gain, and
//! recovery of the correlation pattern from learned attention.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Real;
use crate::datasets::{ImageDataset, MNIST_CLASSES};
use crate::encoding::{EncodedSample, PIXEL_THRESHOLD};
use crate::error::{dim_err, Error, Result};
use crate::model::Model;

/// Shannon entropy in bits of a distribution given by non-negative weights.
pub fn entropy(weights: &[f64]) -> Result<f64> {
    let total: f64 = weights.iter().sum();
    if weights.is_empty() || total.is_nan() || total <= 0.0 || weights.iter().any(|w| *w < 0.0 || !w.is_finite()) {
        return Err(Error::Domain(
            "entropy needs non-negative weights with positive total".into(),
        ));
    }
    Ok(weights
        .iter()
        .filter(|&&w| w > 0.0)
        .map(|&w| {
            let p = w / total;
            -p * p.log2()
        })
        .sum())
}

fn tally<K: Ord + Clone>(keys: impl Iterator<Item = K>, weights: Option<&[f64]>) -> BTreeMap<K, f64> {
    let mut m = BTreeMap::new();
    for (i, k) in keys.enumerate() {
        *m.entry(k).or_insert(0.0) += weights.map_or(1.0, |w| w[i]);
    }
    m
}

fn check_lengths(n: usize, other: usize, weights: Option<&[f64]>) -> Result<()> {
    if n == 0 {
        return Err(Error::Domain("empty sample".into()));
    }
    if other != n || weights.is_some_and(|w| w.len() != n) {
        return Err(dim_err!("paired samples of different lengths"));
    }
    Ok(())
}

/// `H(Y|X)` in bits from paired observations, optionally weighted (weights
/// let exact enumerated distributions stand in for samples).
pub fn conditional_entropy<Y, X>(y: &[Y], x: &[X], weights: Option<&[f64]>) -> Result<f64>
where
    Y: Ord + Clone,
    X: Ord + Clone,
{
    check_lengths(y.len(), x.len(), weights)?;
    let joint = tally(x.iter().cloned().zip(y.iter().cloned()), weights);
    let marginal = tally(x.iter().cloned(), weights);
    let total: f64 = marginal.values().sum();
    if total.is_nan() || total <= 0.0 {
        return Err(Error::Domain("weights sum to zero".into()));
    }
    let mut h = 0.0;
    for ((xv, _), &w) in &joint {
        if w > 0.0 {
            h -= w / total * (w / marginal[xv]).log2();
        }
    }
    Ok(h.max(0.0))
}

fn marginal_entropy<Y: Ord + Clone>(y: &[Y], weights: Option<&[f64]>) -> Result<f64> {
    let counts: Vec<f64> = tally(y.iter().cloned(), weights).into_values().collect();
    entropy(&counts)
}

/// `IG(Y;A) = H(Y) − H(Y|A)`.
pub fn info_gain<Y, A>(y: &[Y], a: &[A], weights: Option<&[f64]>) -> Result<f64>
where
    Y: Ord + Clone,
    A: Ord + Clone,
{
    let h = marginal_entropy(y, weights)?;
    Ok((h - conditional_entropy(y, a, weights)?).max(0.0))
}

/// `IG(Y;A,B)` with the pair `(A, B)` as the conditioning variable.
pub fn info_gain2<Y, A, B>(y: &[Y], a: &[A], b: &[B], weights: Option<&[f64]>) -> Result<f64>
where
    Y: Ord + Clone,
    A: Ord + Clone,
    B: Ord + Clone,
{
    check_lengths(a.len(), b.len(), weights)?;
    let ab: Vec<(A, B)> = a.iter().cloned().zip(b.iter().cloned()).collect();
    info_gain(y, &ab, weights)
}

/// Plug-in mutual information in bits between two discrete sequences.
pub fn mutual_information<A: Ord + Clone, B: Ord + Clone>(a: &[A], b: &[B]) -> Result<f64> {
    info_gain(a, b, None)
}

/// Pearson correlation, `None` when either side has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    (sxx > 0.0 && syy > 0.0).then(|| (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Information gains for one three-variable distribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GainRow {
    pub case: String,
    pub ig_a: f64,
    pub ig_b: f64,
    pub ig_ab: f64,
    /// `IG(Y;A,B) − IG(Y;A) − IG(Y;B)`.
    pub synergy: f64,
}

/// Outcome list `(y, a, b, probability)` of an exactly enumerated distribution.
pub type Outcomes = Vec<(usize, usize, usize, f64)>;

pub fn gains(case: &str, outcomes: &Outcomes) -> Result<GainRow> {
    let y: Vec<usize> = outcomes.iter().map(|o| o.0).collect();
    let a: Vec<usize> = outcomes.iter().map(|o| o.1).collect();
    let b: Vec<usize> = outcomes.iter().map(|o| o.2).collect();
    let w: Vec<f64> = outcomes.iter().map(|o| o.3).collect();
    let ig_a = info_gain(&y, &a, Some(&w))?;
    let ig_b = info_gain(&y, &b, Some(&w))?;
    let ig_ab = info_gain2(&y, &a, &b, Some(&w))?;
    Ok(GainRow {
        case: case.to_string(),
        ig_a,
        ig_b,
        ig_ab,
        synergy: ig_ab - ig_a - ig_b,
    })
}

/// `Y = A xor B` over independent fair bits.
pub fn xor_outcomes() -> Outcomes {
    let mut out = Vec::new();
    for a in 0..2 {
        for b in 0..2 {
            out.push((a ^ b, a, b, 0.25));
        }
    }
    out
}

/// `Y = (Y1, Y2)` with `A` a noisy copy of `Y1` and `B` of `Y2`, all
/// `k`-valued. `A` and `B` are independent, and also independent given `Y`.
pub fn independent_channel_outcomes(k: usize, py1: &[f64], py2: &[f64], ca: &[f64], cb: &[f64]) -> Result<Outcomes> {
    if py1.len() != k || py2.len() != k || ca.len() != k * k || cb.len() != k * k {
        return Err(dim_err!("distribution sizes do not match k = {k}"));
    }
    let mut out = Vec::with_capacity(k.pow(4));
    for y1 in 0..k {
        for y2 in 0..k {
            for a in 0..k {
                for b in 0..k {
                    let p = py1[y1] * py2[y2] * ca[y1 * k + a] * cb[y2 * k + b];
                    out.push((y1 * k + y2, a, b, p));
                }
            }
        }
    }
    Ok(out)
}

/// Rows for XOR, an independent-channel distribution, and a correlated
/// copy (`B = A`).
pub fn infogain_demo() -> Result<Vec<GainRow>> {
    let ch = [0.7, 0.2, 0.1, 0.15, 0.6, 0.25, 0.05, 0.15, 0.8];
    let indep = independent_channel_outcomes(3, &[0.5, 0.3, 0.2], &[0.2, 0.2, 0.6], &ch, &ch)?;
    let copy: Outcomes = (0..2)
        .flat_map(|y| (0..2).map(move |a| (y, a, a, if a == y { 0.4 } else { 0.1 })))
        .collect();
    Ok(vec![
        gains("xor", &xor_outcomes())?,
        gains("independent channels", &indep)?,
        gains("duplicate feature", &copy)?,
    ])
}

pub fn format_gain_table(rows: &[GainRow]) -> String {
    let mut s = format!(
        "{:<22} {:>10} {:>10} {:>10} {:>10}\n",
        "case", "IG(Y;A)", "IG(Y;B)", "IG(Y;A,B)", "synergy"
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{:<22} {:>10.6} {:>10.6} {:>10.6} {:>10.6}",
            r.case, r.ig_a, r.ig_b, r.ig_ab, r.synergy
        );
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistanceRow {
    pub distance: f64,
    /// Largest `|r|` among pixels at this distance; `None` if every one of
    /// them (or the reference) is constant over the sample.
    pub pearson_max: Option<f64>,
    pub mi_max: f64,
    pub pixels: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistanceCorrelationTable {
    pub reference: (usize, usize),
    pub samples: usize,
    pub reference_constant: bool,
    pub rows: Vec<DistanceRow>,
}

impl DistanceCorrelationTable {
    pub fn row_at(&self, distance: f64) -> Option<&DistanceRow> {
        self.rows.iter().find(|r| (r.distance - distance).abs() < 1e-9)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("distance,pearson_max,mi_max,pixels,flag\n");
        for r in &self.rows {
            let (p, flag) = match r.pearson_max {
                Some(v) => (format!("{v:.6}"), ""),
                None => (String::new(), "constant"),
            };
            let _ = writeln!(s, "{:.6},{p},{:.6},{},{flag}", r.distance, r.mi_max, r.pixels);
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_csv().as_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Seeded pick of up to `per_class` images of every label.
pub fn sample_per_class(ds: &ImageDataset, per_class: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..ds.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut taken = [0usize; MNIST_CLASSES];
    let mut out = Vec::new();
    for i in idx {
        let l = ds.label(i);
        if taken[l] < per_class {
            taken[l] += 1;
            out.push(i);
        }
    }
    out.sort_unstable();
    out
}

/// Correlation of every pixel with `reference`, maximised per unique
/// Euclidean distance. Pearson uses raw intensities; mutual information
/// uses pixels binarized at 128.
pub fn distance_correlation_study(
    ds: &ImageDataset,
    per_class: usize,
    reference: (usize, usize),
    seed: u64,
) -> Result<DistanceCorrelationTable> {
    let (r0, c0) = reference;
    if r0 >= ds.rows || c0 >= ds.cols {
        return Err(Error::Index(format!(
            "reference ({r0}, {c0}) outside {}x{} image",
            ds.rows, ds.cols
        )));
    }
    let picked = sample_per_class(ds, per_class, seed);
    if picked.len() < 2 {
        return Err(Error::Data("need at least two sampled images".into()));
    }
    let value = |p: usize| -> Vec<f64> { picked.iter().map(|&i| f64::from(ds.image(i)[p])).collect() };
    let bits = |v: &[f64]| -> Vec<bool> { v.iter().map(|&x| x >= f64::from(PIXEL_THRESHOLD)).collect() };
    let rp = r0 * ds.cols + c0;
    let rv = value(rp);
    let rb = bits(&rv);

    // keyed by squared distance so grouping is exact
    let mut groups: BTreeMap<usize, DistanceRow> = BTreeMap::new();
    for r in 0..ds.rows {
        for c in 0..ds.cols {
            let p = r * ds.cols + c;
            if p == rp {
                continue;
            }
            let d2 = r.abs_diff(r0).pow(2) + c.abs_diff(c0).pow(2);
            let v = value(p);
            let pr = pearson(&rv, &v).map(f64::abs);
            let mi = mutual_information(&rb, &bits(&v))?;
            let row = groups.entry(d2).or_insert(DistanceRow {
                distance: (d2 as f64).sqrt(),
                pearson_max: None,
                mi_max: 0.0,
                pixels: 0,
            });
            row.pixels += 1;
            row.mi_max = row.mi_max.max(mi);
            if let Some(x) = pr {
                row.pearson_max = Some(row.pearson_max.map_or(x, |m| m.max(x)));
            }
        }
    }
    Ok(DistanceCorrelationTable {
        reference,
        samples: picked.len(),
        reference_constant: rv.iter().all(|&x| x == rv[0]),
        rows: groups.into_values().collect(),
    })
}

/// Symmetric set of marked feature pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationPattern {
    pub n: usize,
    pub fraction: f64,
    /// Smallest score that was kept.
    pub threshold: f64,
    /// Marked unordered pairs `(i, j)` with `i < j`, sorted.
    pub pairs: Vec<(usize, usize)>,
}

impl CorrelationPattern {
    /// Keeps the top `fraction` of off-diagonal entries of an `n x n` score
    /// matrix (symmetrised by averaging). Ties break toward lower indices.
    pub fn from_scores(n: usize, scores: &[f64], fraction: f64) -> Result<Self> {
        if scores.len() != n * n {
            return Err(dim_err!("{} scores for a {n}x{n} matrix", scores.len()));
        }
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::Domain(format!("fraction {fraction} not in (0, 1]")));
        }
        if n < 2 {
            return Err(Error::Data("need at least two features".into()));
        }
        let mut all: Vec<(f64, usize, usize)> = Vec::with_capacity(n * (n - 1) / 2);
        for i in 0..n {
            for j in i + 1..n {
                let s = 0.5 * (scores[i * n + j] + scores[j * n + i]);
                all.push((if s.is_nan() { f64::NEG_INFINITY } else { s }, i, j));
            }
        }
        let k = ((fraction * (n * (n - 1)) as f64).ceil() as usize)
            .div_ceil(2)
            .min(all.len());
        all.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.1, a.2).cmp(&(b.1, b.2))));
        let threshold = all[k - 1].0;
        let mut pairs: Vec<(usize, usize)> = all[..k].iter().map(|t| (t.1, t.2)).collect();
        pairs.sort_unstable();
        Ok(Self {
            n,
            fraction,
            threshold,
            pairs,
        })
    }

    /// Marked entries of the full matrix (both triangles).
    pub fn marked_entries(&self) -> usize {
        2 * self.pairs.len()
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        let key = (i.min(j), i.max(j));
        i != j && self.pairs.binary_search(&key).is_ok()
    }

    /// Dense 0/1 matrix.
    pub fn to_matrix(&self) -> Vec<u8> {
        let mut m = vec![0; self.n * self.n];
        for &(i, j) in &self.pairs {
            m[i * self.n + j] = 1;
            m[j * self.n + i] = 1;
        }
        m
    }

    /// `|self ∩ truth| / |truth|`.
    pub fn recall(&self, truth: &CorrelationPattern) -> Result<f64> {
        if self.n != truth.n {
            return Err(dim_err!("patterns over {} and {} features", self.n, truth.n));
        }
        if truth.pairs.is_empty() {
            return Err(Error::Data("ground truth marks no pairs".into()));
        }
        let hit = truth
            .pairs
            .iter()
            .filter(|p| self.pairs.binary_search(p).is_ok())
            .count();
        Ok(hit as f64 / truth.pairs.len() as f64)
    }
}

/// `|r|` between every pair of pixels over the images; constant pixels give 0.
pub fn pixel_correlation_matrix(ds: &ImageDataset) -> Result<Vec<f64>> {
    let (m, n) = (ds.len(), ds.pixels());
    if m < 2 {
        return Err(Error::Data("need at least two images".into()));
    }
    let mut mean = vec![0.0; n];
    for i in 0..m {
        for (s, &p) in mean.iter_mut().zip(ds.image(i)) {
            *s += f64::from(p);
        }
    }
    mean.iter_mut().for_each(|s| *s /= m as f64);
    let mut cov = vec![0.0; n * n];
    let mut centred = vec![0.0; n];
    for i in 0..m {
        for ((c, &p), mu) in centred.iter_mut().zip(ds.image(i)).zip(&mean) {
            *c = f64::from(p) - mu;
        }
        for a in 0..n {
            let ca = centred[a];
            if ca == 0.0 {
                continue;
            }
            let row = &mut cov[a * n..(a + 1) * n];
            for (r, cb) in row[a..].iter_mut().zip(&centred[a..]) {
                *r += ca * cb;
            }
        }
    }
    let mut out = vec![0.0; n * n];
    for a in 0..n {
        for b in a..n {
            let d = cov[a * n + a] * cov[b * n + b];
            let r = if d > 0.0 {
                (cov[a * n + b] / d.sqrt()).abs().min(1.0)
            } else {
                0.0
            };
            out[a * n + b] = r;
            out[b * n + a] = r;
        }
    }
    Ok(out)
}

/// Ground-truth pattern: top `fraction` of pixel pairs by `|r|`.
pub fn correlation_truth(ds: &ImageDataset, fraction: f64) -> Result<CorrelationPattern> {
    CorrelationPattern::from_scores(ds.pixels(), &pixel_correlation_matrix(ds)?, fraction)
}

/// `mean |A|` over the samples, where `A = tanh(E Eᵀ)` for each sample's
/// embedded indices.
pub fn mean_attention_magnitude<T: Real>(model: &Model<T>, samples: &[EncodedSample]) -> Result<Vec<f64>> {
    let g = model
        .vocab_attention()
        .ok_or_else(|| Error::Usage(format!("{:?} model has no attention matrix", model.config().arch)))?;
    if samples.is_empty() {
        return Err(Error::Data("no samples".into()));
    }
    let v = model.config().vocab_size;
    let n = model.config().n_features;
    let g: Vec<f64> = g.iter().map(|x| x.as_f64().abs()).collect();
    let mut acc = vec![0.0; n * n];
    for s in samples {
        if s.indices.len() != n {
            return Err(dim_err!("sample has {} features, model expects {n}", s.indices.len()));
        }
        if let Some(&bad) = s.indices.iter().find(|&&i| i as usize >= v) {
            return Err(Error::Index(format!("index {bad} outside vocabulary of size {v}")));
        }
        for (i, &xi) in s.indices.iter().enumerate() {
            let grow = &g[xi as usize * v..(xi as usize + 1) * v];
            for (a, &xj) in acc[i * n..(i + 1) * n].iter_mut().zip(&s.indices) {
                *a += grow[xj as usize];
            }
        }
    }
    let scale = 1.0 / samples.len() as f64;
    acc.iter_mut().for_each(|a| *a *= scale);
    Ok(acc)
}

/// Pattern read off a trained model's attention.
pub fn recover_correlation_pattern<T: Real>(
    model: &Model<T>,
    samples: &[EncodedSample],
    fraction: f64,
) -> Result<CorrelationPattern> {
    if model.updates() == 0 {
        return Err(Error::Usage("model has never been trained".into()));
    }
    let scores = mean_attention_magnitude(model, samples)?;
    CorrelationPattern::from_scores(model.config().n_features, &scores, fraction)
}

/// Pixel layout of an image set: as captured, or row/column scrambled.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Hash)]
#[serde(rename_all = "snake_case")]
pub enum ImageSpace {
    Raw,
    Synth,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecoveryReport {
    pub truth: ImageSpace,
    pub recall: f64,
    pub fraction: f64,
    pub n_pairs: usize,
}

/// Recovers the pattern from `model` fed `raw` images in `input` space and
/// scores it against the pixel-correlation pattern of the images in each
/// `truths` space. `perm` scrambles rows and columns for the synthetic space.
pub fn recovery_study<T: Real>(
    model: &Model<T>,
    raw: &ImageDataset,
    perm: &crate::permutation::PermutationSpec,
    input: ImageSpace,
    truths: &[ImageSpace],
    fraction: f64,
) -> Result<Vec<RecoveryReport>> {
    let synth = crate::datasets::synthesize_frp_free(raw, perm)?;
    let pick = |s: ImageSpace| if s == ImageSpace::Raw { raw } else { &synth };
    let recovered = recover_correlation_pattern(model, &pick(input).encode(), fraction)?;
    truths
        .iter()
        .map(|&t| {
            let truth = correlation_truth(pick(t), fraction)?;
            Ok(RecoveryReport {
                truth: t,
                recall: recovered.recall(&truth)?,
                fraction,
                n_pairs: truth.pairs.len(),
            })
        })
        .collect()
}
