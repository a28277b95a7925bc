//! Target-pixel-orientation sampling: for each target pixel, nine `k×k` windows
//! (the centred one plus eight one-pixel shifts, clockwise from top-left) stacked
//! as a `V×D×k×k` tensor.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::hsi::{HsiCube, LabelRaster, Pixel};
use crate::tensor::Tensor;

/// View offsets `(drow, dcol)`; index 0 is the centred window.
pub const VIEW_OFFSETS: [(isize, isize); 9] = [
    (0, 0),
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, 1),
    (1, 1),
    (1, 0),
    (1, -1),
    (0, -1),
];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BorderMode {
    /// Reflect without repeating the edge pixel: `[a,b,c]` padded by 1 is `[b,a,b,c,b]`.
    #[default]
    Mirror,
    Zero,
}

/// Serialised as the view count, `9` or `1`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "usize", into = "usize")]
pub enum ViewMode {
    #[default]
    Nine,
    One,
}

impl ViewMode {
    pub fn count(self) -> usize {
        match self {
            ViewMode::Nine => 9,
            ViewMode::One => 1,
        }
    }

    pub fn from_count(n: usize) -> Result<Self> {
        match n {
            9 => Ok(ViewMode::Nine),
            1 => Ok(ViewMode::One),
            _ => Err(Error::Config(format!("views must be 1 or 9, got {n}"))),
        }
    }
}

impl TryFrom<usize> for ViewMode {
    type Error = Error;

    fn try_from(n: usize) -> Result<Self> {
        Self::from_count(n)
    }
}

impl From<ViewMode> for usize {
    fn from(v: ViewMode) -> usize {
        v.count()
    }
}

impl fmt::Display for ViewMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.count())
    }
}

impl FromStr for BorderMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mirror" => Ok(BorderMode::Mirror),
            "zero" => Ok(BorderMode::Zero),
            _ => Err(Error::Config(format!("unknown border mode {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub patch_size: usize,
    #[serde(default)]
    pub border_mode: BorderMode,
    #[serde(default)]
    pub views: ViewMode,
}

impl SamplerConfig {
    pub fn new(patch_size: usize) -> Self {
        Self {
            patch_size,
            border_mode: BorderMode::Mirror,
            views: ViewMode::Nine,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.patch_size.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "patch size must be odd, got {}",
                self.patch_size
            )));
        }
        Ok(())
    }

    /// Padding needed so every shifted window stays inside the padded cube.
    pub fn margin(&self) -> usize {
        self.patch_size / 2 + 1
    }

    pub fn sample_shape(&self, bands: usize) -> [usize; 4] {
        [self.views.count(), bands, self.patch_size, self.patch_size]
    }
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * (n - 1) - i
    } else {
        i
    };
    r as usize
}

/// Grows both spatial dimensions by `2·margin`.
pub fn pad_cube(cube: &HsiCube, margin: usize, mode: BorderMode) -> Result<HsiCube> {
    let (h, w) = (cube.height(), cube.width());
    if mode == BorderMode::Mirror && margin >= h.min(w) {
        return shape_err(format!("mirror padding by {margin} needs a cube larger than {h}×{w}"));
    }
    let m = margin as isize;
    HsiCube::from_fn(h + 2 * margin, w + 2 * margin, cube.bands(), |r, c, b| {
        let (sr, sc) = (r as isize - m, c as isize - m);
        match mode {
            BorderMode::Mirror => cube.get(reflect(sr, h), reflect(sc, w), b),
            BorderMode::Zero => {
                if sr < 0 || sc < 0 || sr >= h as isize || sc >= w as isize {
                    0.0
                } else {
                    cube.get(sr as usize, sc as usize, b)
                }
            }
        }
    })
}

/// Extracts TPO view stacks from a cube padded once up front.
#[derive(Clone, Debug)]
pub struct TpoExtractor {
    padded: HsiCube,
    height: usize,
    width: usize,
    cfg: SamplerConfig,
}

impl TpoExtractor {
    pub fn new(cube: &HsiCube, cfg: SamplerConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            padded: pad_cube(cube, cfg.margin(), cfg.border_mode)?,
            height: cube.height(),
            width: cube.width(),
            cfg,
        })
    }

    pub fn config(&self) -> &SamplerConfig {
        &self.cfg
    }

    pub fn bands(&self) -> usize {
        self.padded.bands()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn sample_shape(&self) -> [usize; 4] {
        self.cfg.sample_shape(self.bands())
    }

    pub fn sample_len(&self) -> usize {
        self.sample_shape().iter().product()
    }

    fn check(&self, row: usize, col: usize) -> Result<()> {
        if row >= self.height || col >= self.width {
            return Err(Error::Index(format!(
                "target ({row}, {col}) outside {}×{} cube",
                self.height, self.width
            )));
        }
        Ok(())
    }

    /// Writes the `V×D×k×k` stack for `(row, col)` into `out`.
    pub fn extract_into(&self, row: usize, col: usize, out: &mut [f32]) -> Result<()> {
        self.check(row, col)?;
        let k = self.cfg.patch_size;
        let d = self.bands();
        if out.len() != self.sample_len() {
            return Err(Error::Length {
                expected: self.sample_len(),
                actual: out.len(),
            });
        }
        let pw = self.padded.width();
        // top-left of the centred window in padded coordinates
        let base_r = row + self.cfg.margin() - k / 2;
        let base_c = col + self.cfg.margin() - k / 2;
        let mut o = 0;
        for &(dr, dc) in &VIEW_OFFSETS[..self.cfg.views.count()] {
            let r0 = (base_r as isize + dr) as usize;
            let c0 = (base_c as isize + dc) as usize;
            for b in 0..d {
                let plane = self.padded.band(b);
                for i in 0..k {
                    let start = (r0 + i) * pw + c0;
                    out[o..o + k].copy_from_slice(&plane[start..start + k]);
                    o += k;
                }
            }
        }
        Ok(())
    }

    /// Stacks the samples for several targets into a `B×V×D×k×k` tensor.
    pub fn stack(&self, targets: &[(usize, usize)]) -> Result<Tensor<f32>> {
        let n = self.sample_len();
        let mut data = vec![0.0; targets.len() * n];
        for (chunk, &(r, c)) in data.chunks_mut(n).zip(targets) {
            self.extract_into(r, c, chunk)?;
        }
        let mut shape = vec![targets.len()];
        shape.extend(self.sample_shape());
        Tensor::new(shape, data)
    }

    pub fn extract(&self, row: usize, col: usize) -> Result<Tensor<f32>> {
        let mut data = vec![0.0; self.sample_len()];
        self.extract_into(row, col, &mut data)?;
        Tensor::new(self.sample_shape().to_vec(), data)
    }
}

/// The view stack for one target: `9×D×k×k`, or `1×D×k×k` with single-view sampling.
pub fn extract_tpo(cube: &HsiCube, target: (usize, usize), cfg: &SamplerConfig) -> Result<Tensor<f32>> {
    TpoExtractor::new(cube, *cfg)?.extract(target.0, target.1)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TpoSample {
    pub views: Tensor<f32>,
    /// Raster class id (1-based).
    pub label: u16,
    pub origin: (usize, usize),
}

/// Labeled target pixels whose view stacks are materialised on demand.
#[derive(Clone, Debug)]
pub struct TpoDataset {
    extractor: Arc<TpoExtractor>,
    pixels: Vec<Pixel>,
}

/// One target per split pixel, in split order; labels come from the raster.
pub fn build_dataset(extractor: Arc<TpoExtractor>, labels: &LabelRaster, pixels: &[Pixel]) -> Result<TpoDataset> {
    if labels.height() != extractor.height() || labels.width() != extractor.width() {
        return shape_err(format!(
            "labels are {}×{} but the cube is {}×{}",
            labels.height(),
            labels.width(),
            extractor.height(),
            extractor.width()
        ));
    }
    let mut out = Vec::with_capacity(pixels.len());
    for p in pixels {
        extractor.check(p.row, p.col)?;
        let class = labels.get(p.row, p.col);
        if class == 0 {
            return Err(Error::Split(format!("pixel ({}, {}) is unlabeled", p.row, p.col)));
        }
        out.push(Pixel { class, ..*p });
    }
    Ok(TpoDataset { extractor, pixels: out })
}

impl TpoDataset {
    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn pixels(&self) -> &[Pixel] {
        &self.pixels
    }

    pub fn extractor(&self) -> &TpoExtractor {
        &self.extractor
    }

    pub fn sample_shape(&self) -> [usize; 4] {
        self.extractor.sample_shape()
    }

    pub fn get(&self, i: usize) -> Result<TpoSample> {
        let p = self.pixels[i];
        Ok(TpoSample {
            views: self.extractor.extract(p.row, p.col)?,
            label: p.class,
            origin: (p.row, p.col),
        })
    }

    pub fn iter(&self) -> impl Iterator<Item = Result<TpoSample>> + '_ {
        (0..self.len()).map(|i| self.get(i))
    }

    /// Stacks the samples at `indices` into a `B×V×D×k×k` batch.
    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        let targets: Vec<(usize, usize)> = indices
            .iter()
            .map(|&i| (self.pixels[i].row, self.pixels[i].col))
            .collect();
        Ok(Batch {
            inputs: self.extractor.stack(&targets)?,
            labels: indices.iter().map(|&i| self.pixels[i].class as usize - 1).collect(),
            indices: indices.to_vec(),
        })
    }

    /// Writes an inspection dump: a text header, then every stack as little-endian `f32`.
    /// `meta` lines, if any, go into the header before `end`.
    pub fn write_samples<W: Write>(&self, meta: &str, mut out: W) -> Result<()> {
        let shape = self.sample_shape();
        let labels: Vec<String> = self.pixels.iter().map(|p| p.class.to_string()).collect();
        writeln!(out, "TPO samples")?;
        writeln!(out, "count={}", self.len())?;
        writeln!(out, "shape={},{},{},{}", shape[0], shape[1], shape[2], shape[3])?;
        writeln!(out, "labels={}", labels.join(","))?;
        for line in meta.lines() {
            writeln!(out, "{line}")?;
        }
        writeln!(out, "end")?;
        let mut buf = vec![0.0f32; self.extractor.sample_len()];
        let mut bytes = Vec::with_capacity(buf.len() * 4);
        for p in &self.pixels {
            self.extractor.extract_into(p.row, p.col, &mut buf)?;
            bytes.clear();
            bytes.extend(buf.iter().flat_map(|v| v.to_le_bytes()));
            out.write_all(&bytes)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Batch {
    /// `B×V×D×k×k`.
    pub inputs: Tensor<f32>,
    /// Zero-based class indices.
    pub labels: Vec<usize>,
    /// Positions of the samples within the dataset.
    pub indices: Vec<usize>,
}

/// Sample order for one epoch: a seeded permutation drawn from a per-epoch sub-seed,
/// or dataset order when `shuffle_seed` is `None`.
pub fn epoch_order(len: usize, shuffle_seed: Option<u64>, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    if let Some(seed) = shuffle_seed {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(epoch);
        order.shuffle(&mut rng);
    }
    order
}

/// Lazily extracted batches of at most `batch_size` samples; the last one may be smaller.
pub struct BatchIter<'a> {
    dataset: &'a TpoDataset,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

pub fn batch_iter(
    dataset: &TpoDataset,
    batch_size: usize,
    shuffle_seed: Option<u64>,
    epoch: u64,
) -> Result<BatchIter<'_>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    Ok(BatchIter {
        dataset,
        order: epoch_order(dataset.len(), shuffle_seed, epoch),
        batch_size,
        pos: 0,
    })
}

impl BatchIter<'_> {
    pub fn batches(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }
}

impl Iterator for BatchIter<'_> {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let idx = &self.order[self.pos..end];
        self.pos = end;
        Some(self.dataset.batch(idx))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hsi::{generate_synthetic_cube, make_split};
    use rand::Rng;

    fn coded_cube(h: usize, w: usize, d: usize) -> HsiCube {
        HsiCube::from_fn(h, w, d, |r, c, b| (100 * r + 10 * c + b) as f32).unwrap()
    }

    fn random_cube(h: usize, w: usize, d: usize, seed: u64) -> HsiCube {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        HsiCube::from_fn(h, w, d, |_, _, _| rng.gen_range(-1.0..1.0)).unwrap()
    }

    #[test]
    fn mirror_pad_row() {
        let cube = HsiCube::new(3, 3, 1, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]).unwrap();
        let p = pad_cube(&cube, 1, BorderMode::Mirror).unwrap();
        let row: Vec<f32> = (0..5).map(|c| p.get(1, c, 0)).collect();
        assert_eq!(row, vec![2.0, 1.0, 2.0, 3.0, 2.0]);
        let col: Vec<f32> = (0..5).map(|r| p.get(r, 1, 0)).collect();
        assert_eq!(col, vec![4.0, 1.0, 4.0, 7.0, 4.0]);
        assert_eq!(p.get(0, 0, 0), 5.0);
    }

    #[test]
    fn zero_pad_and_mirror_limit() {
        let cube = coded_cube(2, 3, 2);
        let p = pad_cube(&cube, 2, BorderMode::Zero).unwrap();
        assert_eq!((p.height(), p.width(), p.bands()), (6, 7, 2));
        assert_eq!(p.get(0, 0, 1), 0.0);
        assert_eq!(p.get(3, 4, 1), cube.get(1, 2, 1));
        assert!(matches!(pad_cube(&cube, 2, BorderMode::Mirror), Err(Error::Shape(_))));
    }

    #[test]
    fn padded_interior_matches_original() {
        let cube = random_cube(6, 6, 2, 3);
        for mode in [BorderMode::Mirror, BorderMode::Zero] {
            for m in 0..3 {
                let p = pad_cube(&cube, m, mode).unwrap();
                for r in 0..6 {
                    for c in 0..6 {
                        for b in 0..2 {
                            assert_eq!(p.get(r + m, c + m, b), cube.get(r, c, b));
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn centre_of_view_zero() {
        let cube = coded_cube(9, 9, 4);
        let s = extract_tpo(&cube, (4, 4), &SamplerConfig::new(5)).unwrap();
        assert_eq!(s.shape(), &[9, 4, 5, 5]);
        assert_eq!(s.at(&[0, 2, 2, 2]), 442.0);
        // view 1 is shifted up-left
        assert_eq!(s.at(&[1, 2, 2, 2]), 332.0);
        assert_eq!(s.at(&[8, 0, 2, 2]), 430.0);
    }

    /// Brute force: pad, then crop each shifted window directly.
    fn oracle(cube: &HsiCube, r: usize, c: usize, k: usize, mode: BorderMode) -> Vec<f32> {
        let m = k / 2 + 1;
        let p = pad_cube(cube, m, mode).unwrap();
        let mut out = Vec::new();
        for (dr, dc) in VIEW_OFFSETS {
            for b in 0..cube.bands() {
                for i in 0..k {
                    for j in 0..k {
                        let pr = (r + m) as isize + dr - (k / 2) as isize + i as isize;
                        let pc = (c + m) as isize + dc - (k / 2) as isize + j as isize;
                        out.push(p.get(pr as usize, pc as usize, b));
                    }
                }
            }
        }
        out
    }

    #[test]
    fn extraction_matches_padded_crop_everywhere() {
        let cube = random_cube(9, 9, 4, 1);
        for k in [1, 3, 5] {
            for mode in [BorderMode::Mirror, BorderMode::Zero] {
                let cfg = SamplerConfig {
                    border_mode: mode,
                    ..SamplerConfig::new(k)
                };
                let ex = TpoExtractor::new(&cube, cfg).unwrap();
                for r in 0..9 {
                    for c in 0..9 {
                        assert_eq!(
                            ex.extract(r, c).unwrap().data(),
                            oracle(&cube, r, c, k, mode).as_slice()
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn constant_cube_gives_identical_views() {
        let cube = HsiCube::from_fn(9, 9, 4, |_, _, b| b as f32 + 0.5).unwrap();
        let s = extract_tpo(&cube, (0, 8), &SamplerConfig::new(3)).unwrap();
        let n = 4 * 9;
        for v in 1..9 {
            assert_eq!(&s.data()[v * n..(v + 1) * n], &s.data()[..n]);
        }
    }

    #[test]
    fn shifted_view_equals_view_zero_of_neighbour() {
        let cube = random_cube(9, 9, 4, 2);
        let ex = TpoExtractor::new(&cube, SamplerConfig::new(3)).unwrap();
        let n = 4 * 9;
        for r in 1..8 {
            for c in 1..8 {
                let s = ex.extract(r, c).unwrap();
                for (v, (dr, dc)) in VIEW_OFFSETS.iter().enumerate() {
                    let nb = ex
                        .extract((r as isize + dr) as usize, (c as isize + dc) as usize)
                        .unwrap();
                    assert_eq!(&s.data()[v * n..(v + 1) * n], &nb.data()[..n]);
                }
            }
        }
    }

    #[test]
    fn single_view_is_first_slice() {
        let cube = random_cube(6, 7, 3, 5);
        let nine = extract_tpo(&cube, (0, 3), &SamplerConfig::new(3)).unwrap();
        let cfg = SamplerConfig {
            views: ViewMode::One,
            ..SamplerConfig::new(3)
        };
        let one = extract_tpo(&cube, (0, 3), &cfg).unwrap();
        assert_eq!(one.shape(), &[1, 3, 3, 3]);
        assert_eq!(one.data(), &nine.data()[..27]);
    }

    #[test]
    fn out_of_bounds_and_bad_config() {
        let cube = coded_cube(5, 5, 2);
        assert!(matches!(
            extract_tpo(&cube, (5, 0), &SamplerConfig::new(3)),
            Err(Error::Index(_))
        ));
        assert!(matches!(
            extract_tpo(&cube, (0, 0), &SamplerConfig::new(4)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn border_pixel_has_a_pure_view() {
        // class 1 in columns 0..4, class 2 in columns 4..8; signatures differ by band value
        let cube = HsiCube::from_fn(8, 8, 2, |_, c, b| if c < 4 { b as f32 } else { 10.0 + b as f32 }).unwrap();
        let ex = TpoExtractor::new(&cube, SamplerConfig::new(3)).unwrap();
        let n = 2 * 9;
        for (row, col) in [(3, 3), (3, 4), (0, 3), (7, 4)] {
            let s = ex.extract(row, col).unwrap();
            let pure = |v: usize| {
                let w = &s.data()[v * n..(v + 1) * n];
                w.iter().all(|&x| x < 5.0) || w.iter().all(|&x| x >= 5.0)
            };
            assert!(!pure(0));
            assert!((1..9).any(pure), "({row}, {col})");
        }
    }

    #[test]
    fn dataset_follows_split_order_and_raster_labels() {
        let (cube, labels) = generate_synthetic_cube(12, 12, 3, 3, 4).unwrap();
        let split = make_split(&labels, 5, 1).unwrap();
        let ex = Arc::new(TpoExtractor::new(&cube, SamplerConfig::new(3)).unwrap());
        let ds = build_dataset(ex.clone(), &labels, &split.train).unwrap();
        assert_eq!(ds.len(), 15);
        for (i, s) in ds.iter().enumerate() {
            let s = s.unwrap();
            assert_eq!(s.origin, (split.train[i].row, split.train[i].col));
            assert_eq!(s.label, labels.get(s.origin.0, s.origin.1));
            assert_eq!(s.views.shape(), &[9, 3, 3, 3]);
        }
        assert!(build_dataset(ex, &labels, &[]).unwrap().is_empty());
    }

    #[test]
    fn dataset_rejects_unlabeled_pixel() {
        let cube = coded_cube(3, 3, 1);
        let labels = LabelRaster::new(3, 3, vec![0, 1, 1, 1, 1, 1, 1, 1, 1]).unwrap();
        let ex = Arc::new(TpoExtractor::new(&cube, SamplerConfig::new(1)).unwrap());
        let p = Pixel {
            row: 0,
            col: 0,
            class: 1,
        };
        assert!(matches!(build_dataset(ex, &labels, &[p]), Err(Error::Split(_))));
    }

    fn small_dataset(n: usize) -> TpoDataset {
        let (cube, labels) = generate_synthetic_cube(8, 8, 2, 2, 3).unwrap();
        let split = make_split(&labels, 100, 0).unwrap();
        let ex = Arc::new(TpoExtractor::new(&cube, SamplerConfig::new(3)).unwrap());
        build_dataset(ex, &labels, &split.train[..n]).unwrap()
    }

    #[test]
    fn batch_partition_and_label_multiset() {
        let ds = small_dataset(5);
        let it = batch_iter(&ds, 2, Some(7), 0).unwrap();
        assert_eq!(it.batches(), 3);
        let batches: Vec<Batch> = it.map(Result::unwrap).collect();
        let sizes: Vec<usize> = batches.iter().map(|b| b.inputs.shape()[0]).collect();
        assert_eq!(sizes, vec![2, 2, 1]);
        assert_eq!(batches[0].inputs.shape()[1..], [9, 2, 3, 3]);
        let mut got: Vec<usize> = batches.iter().flat_map(|b| b.labels.clone()).collect();
        let mut want: Vec<usize> = ds.pixels().iter().map(|p| p.class as usize - 1).collect();
        got.sort_unstable();
        want.sort_unstable();
        assert_eq!(got, want);
        for b in &batches {
            for (j, &i) in b.indices.iter().enumerate() {
                let n = ds.extractor().sample_len();
                assert_eq!(&b.inputs.data()[j * n..(j + 1) * n], ds.get(i).unwrap().views.data());
            }
        }
        assert!(batch_iter(&ds, 0, None, 0).is_err());
    }

    #[test]
    fn epoch_orders_are_seeded_per_epoch() {
        assert_eq!(epoch_order(50, Some(3), 0), epoch_order(50, Some(3), 0));
        assert_ne!(epoch_order(50, Some(3), 0), epoch_order(50, Some(3), 1));
        assert_ne!(epoch_order(50, Some(3), 0), epoch_order(50, Some(4), 0));
        assert_eq!(epoch_order(5, None, 9), vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn sample_dump_layout() {
        let ds = small_dataset(3);
        let mut buf = Vec::new();
        ds.write_samples("config_hash=00", &mut buf).unwrap();
        let text_end = buf.windows(4).position(|w| w == b"end\n").unwrap() + 4;
        let header = std::str::from_utf8(&buf[..text_end]).unwrap();
        assert!(header.contains("count=3\n"));
        assert!(header.contains("shape=9,2,3,3\n"));
        assert!(header.contains("config_hash=00\nend\n"));
        let payload = &buf[text_end..];
        assert_eq!(payload.len(), 3 * 162 * 4);
        let first = f32::from_le_bytes(payload[..4].try_into().unwrap());
        assert_eq!(first, ds.get(0).unwrap().views.data()[0]);
    }

    #[test]
    fn config_reads_views_as_count() {
        let cfg: SamplerConfig = toml::from_str("patch_size = 7\nviews = 1\nborder_mode = \"zero\"").unwrap();
        assert_eq!(cfg.views, ViewMode::One);
        assert_eq!(cfg.border_mode, BorderMode::Zero);
        assert!(toml::to_string(&cfg).unwrap().contains("views = 1"));
        assert!(toml::from_str::<SamplerConfig>("patch_size = 7\nviews = 4").is_err());
    }
}
