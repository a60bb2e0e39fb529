//! MNIST IDX files, CSV tables, the row/column scrambled image variant and
//! seeded train/test splits.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoding::{self, binarize_pixels, EncodedSample, FeatureKind, FeatureSchema, RawRow, Target, TaskKind};
use crate::error::{dim_err, Error, Result};
use crate::permutation::PermutationSpec;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;
pub const MNIST_SIDE: usize = 28;
pub const MNIST_CLASSES: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitTag {
    Full,
    Train,
    Test,
}

/// Grayscale images stored contiguously, `rows * cols` bytes each.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageDataset {
    pub rows: usize,
    pub cols: usize,
    pub images: Vec<u8>,
    pub labels: Vec<u8>,
    pub split: SplitTag,
}

impl ImageDataset {
    pub fn new(rows: usize, cols: usize, images: Vec<u8>, labels: Vec<u8>, split: SplitTag) -> Result<Self> {
        if rows == 0 || cols == 0 || images.len() != labels.len() * rows * cols {
            return Err(dim_err!(
                "{} pixel bytes do not make {} images of {rows}x{cols}",
                images.len(),
                labels.len()
            ));
        }
        if let Some(i) = labels.iter().position(|&l| usize::from(l) >= MNIST_CLASSES) {
            return Err(Error::Data(format!(
                "label {} at image {i} is outside 0..10",
                labels[i]
            )));
        }
        Ok(Self {
            rows,
            cols,
            images,
            labels,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn pixels(&self) -> usize {
        self.rows * self.cols
    }

    pub fn image(&self, i: usize) -> &[u8] {
        &self.images[i * self.pixels()..(i + 1) * self.pixels()]
    }

    pub fn label(&self, i: usize) -> usize {
        usize::from(self.labels[i])
    }

    pub fn subset(&self, idx: &[usize], split: SplitTag) -> Self {
        let mut images = Vec::with_capacity(idx.len() * self.pixels());
        for &i in idx {
            images.extend_from_slice(self.image(i));
        }
        Self {
            rows: self.rows,
            cols: self.cols,
            images,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            split,
        }
    }

    /// Binarized pixels as dictionary indices, label as class.
    pub fn encode(&self) -> Vec<EncodedSample> {
        (0..self.len())
            .map(|i| EncodedSample {
                indices: binarize_pixels(self.image(i)),
                target: Target::Class(self.label(i)),
            })
            .collect()
    }
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("four bytes")))
        .ok_or_else(|| truncated(path, "header"))
}

fn truncated(path: &Path, what: &str) -> Error {
    Error::io(
        path,
        io::Error::new(io::ErrorKind::UnexpectedEof, format!("file ends inside the {what}")),
    )
}

fn format_err(path: &Path, msg: String) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        msg,
    }
}

/// Reads an IDX image file and its label file.
pub fn load_mnist_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<ImageDataset> {
    let (ip, lp) = (images.as_ref(), labels.as_ref());
    let ib = read_all(ip)?;
    let lb = read_all(lp)?;

    let magic = be_u32(&ib, 0, ip)?;
    if magic != IMAGE_MAGIC {
        return Err(format_err(
            ip,
            format!("image magic {magic:#010x}, expected {IMAGE_MAGIC:#010x}"),
        ));
    }
    let count = be_u32(&ib, 4, ip)? as usize;
    let rows = be_u32(&ib, 8, ip)? as usize;
    let cols = be_u32(&ib, 12, ip)? as usize;
    if rows == 0 || cols == 0 {
        return Err(format_err(ip, format!("image size {rows}x{cols}")));
    }
    let body = count * rows * cols;
    if ib.len() < 16 + body {
        return Err(truncated(ip, "pixel data"));
    }

    let magic = be_u32(&lb, 0, lp)?;
    if magic != LABEL_MAGIC {
        return Err(format_err(
            lp,
            format!("label magic {magic:#010x}, expected {LABEL_MAGIC:#010x}"),
        ));
    }
    let lcount = be_u32(&lb, 4, lp)? as usize;
    if lcount != count {
        return Err(format_err(lp, format!("{lcount} labels for {count} images")));
    }
    if lb.len() < 8 + count {
        return Err(truncated(lp, "label data"));
    }
    let labels = lb[8..8 + count].to_vec();
    if let Some(i) = labels.iter().position(|&l| usize::from(l) >= MNIST_CLASSES) {
        return Err(format_err(
            lp,
            format!("label {} at index {i} is outside 0..10", labels[i]),
        ));
    }
    ImageDataset::new(rows, cols, ib[16..16 + body].to_vec(), labels, SplitTag::Full)
}

/// Writes a dataset back out in IDX layout.
pub fn write_idx(ds: &ImageDataset, images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<()> {
    let (ip, lp) = (images.as_ref(), labels.as_ref());
    let n = u32::try_from(ds.len()).map_err(|_| Error::Data("too many images for IDX".into()))?;
    let mut ib = Vec::with_capacity(16 + ds.images.len());
    for v in [IMAGE_MAGIC, n, ds.rows as u32, ds.cols as u32] {
        ib.extend_from_slice(&v.to_be_bytes());
    }
    ib.extend_from_slice(&ds.images);
    let mut lb = Vec::with_capacity(8 + ds.len());
    for v in [LABEL_MAGIC, n] {
        lb.extend_from_slice(&v.to_be_bytes());
    }
    lb.extend_from_slice(&ds.labels);
    fs::write(ip, ib).map_err(|e| Error::io(ip, e))?;
    fs::write(lp, lb).map_err(|e| Error::io(lp, e))
}

/// Moves pixel `(r, c)` of every image to `(σ(r), σ(c))`.
pub fn synthesize_frp_free(ds: &ImageDataset, p: &PermutationSpec) -> Result<ImageDataset> {
    if p.len() != ds.rows || p.len() != ds.cols {
        return Err(dim_err!(
            "permutation of size {} cannot rearrange {}x{} images",
            p.len(),
            ds.rows,
            ds.cols
        ));
    }
    let mut images = Vec::with_capacity(ds.images.len());
    for i in 0..ds.len() {
        images.extend(p.apply_two_sided_slice(ds.image(i))?);
    }
    Ok(ImageDataset { images, ..ds.clone() })
}

/// Disjoint seeded train/test subsets of one image set.
pub fn draw_subsets(
    ds: &ImageDataset,
    n_train: usize,
    n_test: usize,
    seed: u64,
) -> Result<(ImageDataset, ImageDataset)> {
    if n_train + n_test > ds.len() {
        return Err(Error::Config(format!(
            "asked for {n_train} + {n_test} images from a set of {}",
            ds.len()
        )));
    }
    let mut idx: Vec<usize> = (0..ds.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok((
        ds.subset(&idx[..n_train], SplitTag::Train),
        ds.subset(&idx[n_train..n_train + n_test], SplitTag::Test),
    ))
}

/// Raw table rows in schema order, cells kept verbatim.
#[derive(Clone, Debug, PartialEq)]
pub struct TabularDataset {
    pub schema: FeatureSchema,
    pub rows: Vec<RawRow>,
}

/// Reads a headed CSV, picking the schema's columns by name.
pub fn load_tabular(path: impl AsRef<Path>, schema: &FeatureSchema) -> Result<TabularDataset> {
    let path = path.as_ref();
    schema.validate()?;
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    let column = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("column {name:?} not found in {}", path.display())))
    };
    let feature_cols = schema.names().map(column).collect::<Result<Vec<usize>>>()?;
    let target_col = column(&schema.target.name)?;

    let mut rows = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let record = record?;
        let cell = |c: usize| record.get(c).unwrap_or("").to_string();
        let row = RawRow {
            cells: feature_cols.iter().map(|&c| cell(c)).collect(),
            target: cell(target_col),
        };
        check_row(schema, r, &row)?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Data(format!("{} has no data rows", path.display())));
    }
    Ok(TabularDataset {
        schema: schema.clone(),
        rows,
    })
}

fn check_row(schema: &FeatureSchema, r: usize, row: &RawRow) -> Result<()> {
    for (spec, cell) in schema.features.iter().zip(&row.cells) {
        if spec.kind == FeatureKind::Numeric {
            encoding::parse_number(cell).map_err(|e| encoding::at(e, r, &spec.name))?;
        } else if cell.is_empty() {
            return Err(Error::Data(format!("row {r}, column {:?}: empty cell", spec.name)));
        }
    }
    let t = &schema.target;
    if t.task == TaskKind::Regression || t.binarize {
        encoding::parse_number(&row.target).map_err(|e| encoding::at(e, r, &t.name))?;
    }
    Ok(())
}

impl TabularDataset {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            schema: self.schema.clone(),
            rows: idx.iter().map(|&i| self.rows[i].clone()).collect(),
        }
    }

    /// Class label per row (after binarization), or `None` for regression.
    pub fn class_labels(&self) -> Result<Option<Vec<String>>> {
        if self.schema.target.task == TaskKind::Regression {
            return Ok(None);
        }
        self.rows
            .iter()
            .map(|row| encoding::class_name(&self.schema.target, &row.target))
            .collect::<Result<Vec<_>>>()
            .map(Some)
    }

    /// Writes the schema columns followed by the target, cells verbatim.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(file);
        let mut header: Vec<&str> = self.schema.names().collect();
        header.push(&self.schema.target.name);
        w.write_record(&header)?;
        for row in &self.rows {
            w.write_record(row.cells.iter().chain(std::iter::once(&row.target)))?;
        }
        w.into_inner()
            .map_err(|e| Error::io(path, e.into_error()))?
            .flush()
            .map_err(|e| Error::io(path, e))
    }

    /// Seeded split; stratified by class when asked (classification only).
    pub fn split(&self, ratio: f64, seed: u64, stratified: bool) -> Result<(Self, Self)> {
        let labels = if stratified { self.class_labels()? } else { None };
        if stratified && labels.is_none() {
            return Err(Error::Config("stratified split needs a classification target".into()));
        }
        let s = split_indices(self.len(), ratio, seed, labels.as_deref())?;
        Ok((self.subset(&s.train), self.subset(&s.test)))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Partitions `0..n` into shuffled train and test index lists.
///
/// With `strata`, each class is shuffled and cut separately so class
/// proportions match the ratio to within one row per class; every class
/// then needs at least two rows so both sides get one.
pub fn split_indices<K: Ord + Clone + std::fmt::Debug>(
    n: usize,
    ratio: f64,
    seed: u64,
    strata: Option<&[K]>,
) -> Result<Split> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Domain(format!("split ratio {ratio} is not in (0, 1)")));
    }
    if n < 2 {
        return Err(Error::Data(format!("cannot split {n} rows")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cut = |m: usize| ((ratio * m as f64).round() as usize).clamp(1, m - 1);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    match strata {
        None => {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut rng);
            let k = cut(n);
            train.extend_from_slice(&idx[..k]);
            test.extend_from_slice(&idx[k..]);
        }
        Some(labels) => {
            if labels.len() != n {
                return Err(dim_err!("{} strata labels for {n} rows", labels.len()));
            }
            let mut groups: BTreeMap<&K, Vec<usize>> = BTreeMap::new();
            for (i, k) in labels.iter().enumerate() {
                groups.entry(k).or_default().push(i);
            }
            for (k, mut idx) in groups {
                if idx.len() < 2 {
                    return Err(Error::Data(format!(
                        "class {k:?} has {} member(s); stratified split needs at least 2",
                        idx.len()
                    )));
                }
                idx.shuffle(&mut rng);
                let c = cut(idx.len());
                train.extend_from_slice(&idx[..c]);
                test.extend_from_slice(&idx[c..]);
            }
            train.shuffle(&mut rng);
            test.shuffle(&mut rng);
        }
    }
    Ok(Split { train, test })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cut_respects_ratio() {
        let s = split_indices::<u8>(100, 0.8, 1, None).unwrap();
        assert_eq!((s.train.len(), s.test.len()), (80, 20));
    }

    #[test]
    fn ratio_bounds() {
        assert!(matches!(split_indices::<u8>(10, 0.0, 1, None), Err(Error::Domain(_))));
        assert!(matches!(split_indices::<u8>(10, 1.0, 1, None), Err(Error::Domain(_))));
        assert!(matches!(
            split_indices::<u8>(10, f64::NAN, 1, None),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn singleton_class_rejected() {
        let labels = ["a", "a", "b", "a"];
        assert!(matches!(
            split_indices(4, 0.5, 3, Some(&labels[..])),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn label_out_of_range() {
        assert!(matches!(
            ImageDataset::new(1, 1, vec![0], vec![10], SplitTag::Full),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn synthesize_needs_matching_size() {
        let ds = ImageDataset::new(2, 2, vec![1, 2, 3, 4], vec![0], SplitTag::Full).unwrap();
        let p = PermutationSpec::designed(3).unwrap();
        assert!(matches!(synthesize_frp_free(&ds, &p), Err(Error::Dimension(_))));
    }
}
