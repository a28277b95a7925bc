//! Hyperspectral cubes, label rasters, normalisation, train/test splits and the
//! on-disk formats (`HSC1` cubes, `HSL1` labels, text split files, TOML descriptors).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

const CUBE_MAGIC: &[u8; 4] = b"HSC1";
const LABEL_MAGIC: &[u8; 4] = b"HSL1";

/// An `H×W×D` radiance cube stored band-sequentially: band slowest, then row, then column.
#[derive(Clone, Debug, PartialEq)]
pub struct HsiCube {
    height: usize,
    width: usize,
    bands: usize,
    values: Vec<f32>,
}

impl HsiCube {
    pub fn new(height: usize, width: usize, bands: usize, values: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || bands == 0 {
            return shape_err(format!(
                "cube dimensions must be positive, got {height}×{width}×{bands}"
            ));
        }
        if values.len() != height * width * bands {
            return Err(Error::Length {
                expected: height * width * bands,
                actual: values.len(),
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            let plane = height * width;
            return Err(Error::Data(format!(
                "non-finite value at band {}, row {}, col {}",
                i / plane,
                (i % plane) / width,
                i % width
            )));
        }
        Ok(Self {
            height,
            width,
            bands,
            values,
        })
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        bands: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut values = Vec::with_capacity(height * width * bands);
        for b in 0..bands {
            for r in 0..height {
                for c in 0..width {
                    values.push(f(r, c, b));
                }
            }
        }
        Self::new(height, width, bands, values)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, band: usize) -> f32 {
        self.values[(band * self.height + row) * self.width + col]
    }

    /// The `H·W` plane of one band, row-major.
    pub fn band(&self, band: usize) -> &[f32] {
        let plane = self.height * self.width;
        &self.values[band * plane..(band + 1) * plane]
    }

    pub fn spectrum(&self, row: usize, col: usize) -> Vec<f32> {
        (0..self.bands).map(|b| self.get(row, col, b)).collect()
    }
}

/// Per-pixel class ids, row-major; 0 marks unlabeled pixels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelRaster {
    height: usize,
    width: usize,
    labels: Vec<u16>,
}

impl LabelRaster {
    pub fn new(height: usize, width: usize, labels: Vec<u16>) -> Result<Self> {
        if height == 0 || width == 0 {
            return shape_err(format!("raster dimensions must be positive, got {height}×{width}"));
        }
        if labels.len() != height * width {
            return Err(Error::Length {
                expected: height * width,
                actual: labels.len(),
            });
        }
        Ok(Self { height, width, labels })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> u16 {
        self.labels[row * self.width + col]
    }

    pub fn max_label(&self) -> u16 {
        self.labels.iter().copied().max().unwrap_or(0)
    }

    /// Labeled-pixel count per class id, index 0 holding the unlabeled count.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.max_label() as usize + 1];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
    }

    pub fn matches(&self, cube: &HsiCube) -> bool {
        self.height == cube.height && self.width == cube.width
    }
}

fn read_header<'a>(buf: &'a [u8], magic: &[u8; 4], what: &str, fields: usize) -> Result<(Vec<usize>, &'a [u8])> {
    if buf.len() < 4 || &buf[..4] != magic {
        return Err(Error::Format(format!(
            "{what} file does not start with {}",
            String::from_utf8_lossy(magic)
        )));
    }
    let end = 4 + 4 * fields;
    if buf.len() < end {
        return Err(Error::Length {
            expected: end,
            actual: buf.len(),
        });
    }
    let dims = buf[4..end]
        .chunks_exact(4)
        .map(|b| u32::from_le_bytes(b.try_into().unwrap()) as usize)
        .collect();
    Ok((dims, &buf[end..]))
}

fn check_payload(payload: &[u8], expected: usize, header: usize) -> Result<()> {
    if payload.len() != expected {
        return Err(Error::Length {
            expected: header + expected,
            actual: header + payload.len(),
        });
    }
    Ok(())
}

pub fn read_cube<R: Read>(mut input: R) -> Result<HsiCube> {
    let mut buf = Vec::new();
    input.read_to_end(&mut buf)?;
    let (dims, payload) = read_header(&buf, CUBE_MAGIC, "cube", 3)?;
    let (h, w, d) = (dims[0], dims[1], dims[2]);
    check_payload(payload, h * w * d * 4, 16)?;
    let values = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    HsiCube::new(h, w, d, values)
}

pub fn write_cube<W: Write>(cube: &HsiCube, mut out: W) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + cube.values.len() * 4);
    buf.extend_from_slice(CUBE_MAGIC);
    for d in [cube.height, cube.width, cube.bands] {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in &cube.values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&buf)?;
    Ok(())
}

pub fn load_cube(path: &Path) -> Result<HsiCube> {
    read_cube(fs::File::open(path)?)
}

pub fn save_cube(cube: &HsiCube, path: &Path) -> Result<()> {
    write_cube(cube, fs::File::create(path)?)
}

pub fn read_labels<R: Read>(mut input: R) -> Result<LabelRaster> {
    let mut buf = Vec::new();
    input.read_to_end(&mut buf)?;
    let (dims, payload) = read_header(&buf, LABEL_MAGIC, "label", 2)?;
    let (h, w) = (dims[0], dims[1]);
    check_payload(payload, h * w * 2, 12)?;
    let labels = payload
        .chunks_exact(2)
        .map(|b| u16::from_le_bytes(b.try_into().unwrap()))
        .collect();
    LabelRaster::new(h, w, labels)
}

pub fn write_labels<W: Write>(labels: &LabelRaster, mut out: W) -> Result<()> {
    let mut buf = Vec::with_capacity(12 + labels.labels.len() * 2);
    buf.extend_from_slice(LABEL_MAGIC);
    buf.extend_from_slice(&(labels.height as u32).to_le_bytes());
    buf.extend_from_slice(&(labels.width as u32).to_le_bytes());
    for l in &labels.labels {
        buf.extend_from_slice(&l.to_le_bytes());
    }
    out.write_all(&buf)?;
    Ok(())
}

pub fn load_labels(path: &Path) -> Result<LabelRaster> {
    read_labels(fs::File::open(path)?)
}

pub fn save_labels(labels: &LabelRaster, path: &Path) -> Result<()> {
    write_labels(labels, fs::File::create(path)?)
}

/// Per-band mean and population standard deviation.
#[derive(Clone, Debug, PartialEq)]
pub struct BandStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

pub fn compute_band_stats(cube: &HsiCube) -> BandStats {
    let n = (cube.height * cube.width) as f64;
    let (mut mean, mut std) = (Vec::with_capacity(cube.bands), Vec::with_capacity(cube.bands));
    for b in 0..cube.bands {
        let band = cube.band(b);
        let mu = band.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = band.iter().map(|&v| (v as f64 - mu).powi(2)).sum::<f64>() / n;
        mean.push(mu);
        std.push(var.sqrt());
    }
    BandStats { mean, std }
}

/// Per-band z-score `(x − μ)/σ`; constant bands become zero.
pub fn normalize(cube: &HsiCube, stats: &BandStats) -> Result<HsiCube> {
    if stats.mean.len() != cube.bands || stats.std.len() != cube.bands {
        return shape_err(format!(
            "band statistics cover {} bands but the cube has {}",
            stats.mean.len(),
            cube.bands
        ));
    }
    let plane = cube.height * cube.width;
    let values = cube
        .values
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let b = i / plane;
            if stats.std[b] > 0.0 {
                ((v as f64 - stats.mean[b]) / stats.std[b]) as f32
            } else {
                0.0
            }
        })
        .collect();
    HsiCube::new(cube.height, cube.width, cube.bands, values)
}

/// Dataset metadata: class names, bands to drop (0-based) and the class rejection threshold.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetDescriptor {
    pub name: String,
    pub class_names: Vec<String>,
    #[serde(default)]
    pub discarded_bands: Vec<usize>,
    #[serde(default)]
    pub min_class_size: usize,
}

impl DatasetDescriptor {
    pub fn pavia_university() -> Self {
        Self {
            name: "pavia_university".into(),
            class_names: [
                "Asphalt",
                "Meadows",
                "Gravel",
                "Trees",
                "Painted metal sheets",
                "Bare Soil",
                "Bitumen",
                "Self-Blocking Bricks",
                "Shadows",
            ]
            .map(String::from)
            .to_vec(),
            discarded_bands: Vec::new(),
            min_class_size: 0,
        }
    }

    /// The 220-band AVIRIS scene with the twenty water-absorption bands removed
    /// (1-based 104–108, 150–163 and 220) and classes under 400 pixels rejected.
    pub fn indian_pines() -> Self {
        let water = (104..=108).chain(150..=163).chain([220]);
        Self {
            name: "indian_pines".into(),
            class_names: [
                "Alfalfa",
                "Corn-notill",
                "Corn-mintill",
                "Corn",
                "Grass-pasture",
                "Grass-trees",
                "Grass-pasture-mowed",
                "Hay-windrowed",
                "Oats",
                "Soybean-notill",
                "Soybean-mintill",
                "Soybean-clean",
                "Wheat",
                "Woods",
                "Buildings-Grass-Trees-Drives",
                "Stone-Steel-Towers",
            ]
            .map(String::from)
            .to_vec(),
            discarded_bands: water.map(|b| b - 1).collect(),
            min_class_size: 400,
        }
    }

    pub fn salinas() -> Self {
        Self {
            name: "salinas".into(),
            class_names: [
                "Brocoli_green_weeds_1",
                "Brocoli_green_weeds_2",
                "Fallow",
                "Fallow_rough_plow",
                "Fallow_smooth",
                "Stubble",
                "Celery",
                "Grapes_untrained",
                "Soil_vinyard_develop",
                "Corn_senesced_green_weeds",
                "Lettuce_romaine_4wk",
                "Lettuce_romaine_5wk",
                "Lettuce_romaine_6wk",
                "Lettuce_romaine_7wk",
                "Vinyard_untrained",
                "Vinyard_vertical_trellis",
            ]
            .map(String::from)
            .to_vec(),
            discarded_bands: Vec::new(),
            min_class_size: 0,
        }
    }

    /// Generic descriptor for `classes` unnamed classes.
    pub fn unnamed(name: &str, classes: usize) -> Self {
        Self {
            name: name.into(),
            class_names: (1..=classes).map(|c| format!("class_{c}")).collect(),
            discarded_bands: Vec::new(),
            min_class_size: 0,
        }
    }

    pub fn classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn validate(&self, original_bands: usize) -> Result<()> {
        let mut seen = vec![false; original_bands];
        for &b in &self.discarded_bands {
            if b >= original_bands {
                return Err(Error::Config(format!(
                    "discarded band {b} is outside a {original_bands}-band cube"
                )));
            }
            if std::mem::replace(&mut seen[b], true) {
                return Err(Error::Config(format!("discarded band {b} is listed twice")));
            }
        }
        if self.discarded_bands.len() >= original_bands {
            return Err(Error::Config("descriptor discards every band".into()));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("descriptor: {e}")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("descriptor serialises")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }
}

/// Drops discarded bands, rejects small classes and renumbers the survivors `1..=C'`.
pub fn apply_descriptor(
    cube: &HsiCube,
    labels: &LabelRaster,
    desc: &DatasetDescriptor,
) -> Result<(HsiCube, LabelRaster)> {
    desc.validate(cube.bands)?;
    if !labels.matches(cube) {
        return shape_err(format!(
            "labels are {}×{} but the cube is {}×{}",
            labels.height, labels.width, cube.height, cube.width
        ));
    }
    let keep: Vec<usize> = (0..cube.bands).filter(|b| !desc.discarded_bands.contains(b)).collect();
    let mut values = Vec::with_capacity(keep.len() * cube.height * cube.width);
    for &b in &keep {
        values.extend_from_slice(cube.band(b));
    }
    let reduced = HsiCube::new(cube.height, cube.width, keep.len(), values)?;

    let counts = labels.class_counts();
    let mut remap = vec![0u16; counts.len()];
    let mut next = 0u16;
    for (class, &n) in counts.iter().enumerate().skip(1) {
        if n > 0 && n >= desc.min_class_size {
            next += 1;
            remap[class] = next;
        }
    }
    let relabeled = labels.labels.iter().map(|&l| remap[l as usize]).collect();
    Ok((reduced, LabelRaster::new(labels.height, labels.width, relabeled)?))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Pixel {
    pub row: usize,
    pub col: usize,
    pub class: u16,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitSpec {
    pub train: Vec<Pixel>,
    pub test: Vec<Pixel>,
    pub per_class: usize,
    pub seed: u64,
}

/// Seeded per-class split: `min(per_class, available)` training pixels drawn uniformly without
/// replacement for each class `1..=max label`, every other labeled pixel held out.
///
/// Training pixels are listed class by class in raster order; test pixels in raster order.
pub fn make_split(labels: &LabelRaster, per_class: usize, seed: u64) -> Result<SplitSpec> {
    let classes = labels.max_label() as usize;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes + 1];
    for (i, &l) in labels.labels.iter().enumerate() {
        by_class[l as usize].push(i);
    }
    if classes == 0 {
        return Err(Error::Split("raster has no labeled pixels".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut in_train = vec![false; labels.labels.len()];
    let mut train = Vec::new();
    for (class, members) in by_class.iter().enumerate().skip(1) {
        if members.is_empty() {
            return Err(Error::Split(format!("class {class} has no labeled pixels")));
        }
        let take = per_class.min(members.len());
        let mut picked = sample(&mut rng, members.len(), take).into_vec();
        picked.sort_unstable();
        for j in picked {
            let i = members[j];
            in_train[i] = true;
            train.push(Pixel {
                row: i / labels.width,
                col: i % labels.width,
                class: class as u16,
            });
        }
    }
    let test = labels
        .labels
        .iter()
        .enumerate()
        .filter(|&(i, &l)| l != 0 && !in_train[i])
        .map(|(i, &l)| Pixel {
            row: i / labels.width,
            col: i % labels.width,
            class: l,
        })
        .collect();
    Ok(SplitSpec {
        train,
        test,
        per_class,
        seed,
    })
}

impl SplitSpec {
    /// Text form: a comment header, then one `row,col,class,part` line per pixel.
    pub fn to_text(&self) -> String {
        let mut s = format!("# per_class={} seed={}\n", self.per_class, self.seed);
        for (part, pixels) in [("train", &self.train), ("test", &self.test)] {
            for p in pixels {
                writeln!(s, "{},{},{},{part}", p.row, p.col, p.class).unwrap();
            }
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut split = SplitSpec {
            train: Vec::new(),
            test: Vec::new(),
            per_class: 0,
            seed: 0,
        };
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if let Some(comment) = line.strip_prefix('#') {
                for kv in comment.split_whitespace() {
                    match kv.split_once('=') {
                        Some(("per_class", v)) => split.per_class = v.parse().unwrap_or(0),
                        Some(("seed", v)) => split.seed = v.parse().unwrap_or(0),
                        _ => {}
                    }
                }
                continue;
            }
            if line.is_empty() {
                continue;
            }
            let bad = |what: &str| Error::Format(format!("split line {}: {what}: {line:?}", n + 1));
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != 4 {
                return Err(bad("expected row,col,class,part"));
            }
            let p = Pixel {
                row: fields[0].parse().map_err(|_| bad("bad row"))?,
                col: fields[1].parse().map_err(|_| bad("bad column"))?,
                class: fields[2].parse().map_err(|_| bad("bad class"))?,
            };
            match fields[3] {
                "train" => split.train.push(p),
                "test" => split.test.push(p),
                _ => return Err(bad("part must be train or test")),
            }
        }
        Ok(split)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    /// Checks bounds, non-zero classes agreeing with `labels`, and train/test disjointness.
    pub fn validate(&self, labels: &LabelRaster) -> Result<()> {
        let mut seen = BTreeMap::new();
        for (part, pixels) in [("train", &self.train), ("test", &self.test)] {
            for p in pixels {
                if p.row >= labels.height || p.col >= labels.width {
                    return Err(Error::Index(format!(
                        "{part} pixel ({}, {}) outside {}×{} raster",
                        p.row, p.col, labels.height, labels.width
                    )));
                }
                let actual = labels.get(p.row, p.col);
                if p.class == 0 || p.class != actual {
                    return Err(Error::Split(format!(
                        "{part} pixel ({}, {}) has class {} but the raster says {actual}",
                        p.row, p.col, p.class
                    )));
                }
                if let Some(prev) = seen.insert((p.row, p.col), part) {
                    return Err(Error::Split(format!(
                        "pixel ({}, {}) listed in {prev} and {part}",
                        p.row, p.col
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Parameters of the synthetic block-pattern scene.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    pub classes: usize,
    /// Side of the square label blocks.
    pub block: usize,
    /// Standard deviation of the per-value Gaussian noise.
    pub noise: f64,
    /// When set, every `period`-th row and column is overwritten by a one-pixel stripe of the next class.
    pub stripe_period: Option<usize>,
}

impl SyntheticSpec {
    pub fn blocks(height: usize, width: usize, bands: usize, classes: usize) -> Self {
        Self {
            height,
            width,
            bands,
            classes,
            block: (height.max(width) / 4).max(2),
            noise: 0.05,
            stripe_period: None,
        }
    }

    /// Blocks crossed by thin stripes, with noise large enough that spatial context matters.
    pub fn striped(height: usize, width: usize, bands: usize, classes: usize) -> Self {
        Self {
            noise: 0.35,
            stripe_period: Some(5),
            ..Self::blocks(height, width, bands, classes)
        }
    }

    pub fn noiseless(mut self) -> Self {
        self.noise = 0.0;
        self
    }

    pub fn label_at(&self, row: usize, col: usize) -> u16 {
        let blocks_w = self.width.div_ceil(self.block);
        let base = ((row / self.block) * blocks_w + col / self.block) % self.classes;
        let on_stripe = self.stripe_period.is_some_and(|p| row % p == p / 2 || col % p == p / 2);
        let class = if on_stripe { (base + 1) % self.classes } else { base };
        class as u16 + 1
    }

    /// Class signatures in `[0, 1]^D`, one row per class.
    pub fn signatures(&self, seed: u64) -> Vec<Vec<f32>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..self.classes)
            .map(|_| (0..self.bands).map(|_| rng.gen::<f32>()).collect())
            .collect()
    }

    pub fn generate(&self, seed: u64) -> Result<(HsiCube, LabelRaster)> {
        if self.classes < 2 || self.bands < 2 {
            return Err(Error::Config(format!(
                "synthetic scene needs at least 2 classes and 2 bands, got {} and {}",
                self.classes, self.bands
            )));
        }
        let sig = self.signatures(seed);
        let mut labels = Vec::with_capacity(self.height * self.width);
        for r in 0..self.height {
            for c in 0..self.width {
                labels.push(self.label_at(r, c));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
        let noise = Normal::new(0.0f32, self.noise as f32)
            .map_err(|e| Error::Config(format!("synthetic noise level {}: {e}", self.noise)))?;
        let cube = HsiCube::from_fn(self.height, self.width, self.bands, |r, c, b| {
            let class = labels[r * self.width + c] as usize - 1;
            sig[class][b] + noise.sample(&mut rng)
        })?;
        Ok((cube, LabelRaster::new(self.height, self.width, labels)?))
    }
}

/// Block-pattern scene with class signatures plus small noise.
pub fn generate_synthetic_cube(
    h: usize,
    w: usize,
    d: usize,
    classes: usize,
    seed: u64,
) -> Result<(HsiCube, LabelRaster)> {
    SyntheticSpec::blocks(h, w, d, classes).generate(seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use std::collections::BTreeSet;

    fn cube_bytes(cube: &HsiCube) -> Vec<u8> {
        let mut b = Vec::new();
        write_cube(cube, &mut b).unwrap();
        b
    }

    #[test]
    fn cube_layout_read_back() {
        let mut bytes = b"HSC1".to_vec();
        for d in [2u32, 2, 1] {
            bytes.extend_from_slice(&d.to_le_bytes());
        }
        for v in [1f32, 2.0, 3.0, 4.0] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let cube = read_cube(bytes.as_slice()).unwrap();
        assert_eq!((cube.height(), cube.width(), cube.bands()), (2, 2, 1));
        assert_eq!(cube.get(0, 0, 0), 1.0);
        assert_eq!(cube.get(1, 0, 0), 3.0);
    }

    #[test]
    fn cube_errors() {
        let mut bytes = b"XXXX".to_vec();
        bytes.extend_from_slice(&[0; 12]);
        assert!(matches!(read_cube(bytes.as_slice()), Err(Error::Format(_))));

        let cube = HsiCube::from_fn(2, 2, 2, |r, c, b| (r + c + b) as f32).unwrap();
        let full = cube_bytes(&cube);
        assert!(matches!(read_cube(&full[..full.len() - 1]), Err(Error::Length { .. })));
        assert!(matches!(read_cube(&full[..10]), Err(Error::Length { .. })));

        let mut nan = full.clone();
        nan[16..20].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(read_cube(nan.as_slice()), Err(Error::Data(_))));
    }

    #[test]
    fn random_cube_round_trips_bit_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cube = HsiCube::from_fn(7, 5, 11, |_, _, _| rng.gen_range(-1e6f32..1e6)).unwrap();
        let bytes = cube_bytes(&cube);
        assert_eq!(bytes.len(), 16 + 7 * 5 * 11 * 4);
        let back = read_cube(bytes.as_slice()).unwrap();
        assert_eq!(cube_bytes(&back), bytes);
        assert_eq!(back, cube);
    }

    #[test]
    fn labels_round_trip_and_errors() {
        let labels = LabelRaster::new(2, 3, vec![0, 1, 2, 3, 65535, 1]).unwrap();
        let mut b = Vec::new();
        write_labels(&labels, &mut b).unwrap();
        assert_eq!(&b[..4], b"HSL1");
        assert_eq!(read_labels(b.as_slice()).unwrap(), labels);
        assert!(matches!(read_labels(&b[..b.len() - 2]), Err(Error::Length { .. })));
        assert!(matches!(read_labels(&b"HSC1"[..]), Err(Error::Format(_))));
    }

    #[test]
    fn band_stats_hand_values() {
        let cube = HsiCube::new(1, 2, 2, vec![1.0, 1.0, 0.0, 2.0]).unwrap();
        let s = compute_band_stats(&cube);
        assert_eq!(s.mean, vec![1.0, 1.0]);
        assert_eq!(s.std, vec![0.0, 1.0]);
        let n = normalize(&cube, &s).unwrap();
        assert_eq!(n.values(), &[0.0, 0.0, -1.0, 1.0]);
    }

    #[test]
    fn band_stats_match_two_pass_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cube = HsiCube::from_fn(4, 4, 3, |_, _, _| rng.gen_range(-5f32..5.0)).unwrap();
        let s = compute_band_stats(&cube);
        for b in 0..3 {
            let vals: Vec<f64> = (0..4)
                .flat_map(|r| (0..4).map(move |c| (r, c)))
                .map(|(r, c)| cube.get(r, c, b) as f64)
                .collect();
            let mu = vals.iter().sum::<f64>() / 16.0;
            let sd = (vals.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / 16.0).sqrt();
            assert!(((s.mean[b] - mu) / mu.abs().max(1.0)).abs() < 1e-12);
            assert!(((s.std[b] - sd) / sd).abs() < 1e-12);
        }
    }

    #[test]
    fn normalize_rejects_band_mismatch() {
        let cube = HsiCube::new(1, 1, 2, vec![1.0, 2.0]).unwrap();
        let stats = BandStats {
            mean: vec![0.0],
            std: vec![1.0],
        };
        assert!(matches!(normalize(&cube, &stats), Err(Error::Shape(_))));
    }

    proptest! {
        #[test]
        fn normalized_bands_are_standard(vals in prop::collection::vec(-100f32..100.0, 2 * 3 * 4)) {
            let cube = HsiCube::new(3, 4, 2, vals).unwrap();
            let stats = compute_band_stats(&cube);
            let out = compute_band_stats(&normalize(&cube, &stats).unwrap());
            for b in 0..2 {
                if stats.std[b] > 1e-3 {
                    prop_assert!(out.mean[b].abs() < 1e-6);
                    prop_assert!((out.std[b] - 1.0).abs() < 1e-6);
                }
            }
        }

        #[test]
        fn file_round_trip_is_identity(h in 1usize..5, w in 1usize..5, d in 1usize..4, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cube = HsiCube::from_fn(h, w, d, |_, _, _| rng.gen()).unwrap();
            let labels = LabelRaster::new(h, w, (0..h * w).map(|_| rng.gen()).collect()).unwrap();
            let mut lb = Vec::new();
            write_labels(&labels, &mut lb).unwrap();
            prop_assert_eq!(read_cube(cube_bytes(&cube).as_slice()).unwrap(), cube);
            prop_assert_eq!(read_labels(lb.as_slice()).unwrap(), labels);
        }
    }

    #[test]
    fn indian_pines_descriptor_drops_twenty_bands() {
        let desc = DatasetDescriptor::indian_pines();
        assert_eq!(desc.discarded_bands.len(), 20);
        assert_eq!(desc.min_class_size, 400);
        let cube = HsiCube::from_fn(2, 2, 220, |_, _, b| b as f32).unwrap();
        let labels = LabelRaster::new(2, 2, vec![0; 4]).unwrap();
        let (reduced, _) = apply_descriptor(&cube, &labels, &desc).unwrap();
        assert_eq!(reduced.bands(), 200);
        // band 103 (1-based 104) is gone, so position 103 now holds original band 108
        assert_eq!(reduced.get(0, 0, 102), 102.0);
        assert_eq!(reduced.get(0, 0, 103), 108.0);
    }

    #[test]
    fn zero_threshold_keeps_labels() {
        let cube = HsiCube::from_fn(2, 3, 2, |_, _, _| 0.0).unwrap();
        let labels = LabelRaster::new(2, 3, vec![0, 1, 2, 2, 3, 1]).unwrap();
        let desc = DatasetDescriptor::unnamed("t", 3);
        let (_, out) = apply_descriptor(&cube, &labels, &desc).unwrap();
        assert_eq!(out, labels);
    }

    #[test]
    fn small_classes_rejected_and_compacted() {
        let mut labels = vec![1u16; 500];
        labels.extend(vec![2u16; 399]);
        labels.extend(vec![3u16; 401]);
        let raster = LabelRaster::new(13, 100, labels.clone()).unwrap();
        let cube = HsiCube::from_fn(13, 100, 1, |_, _, _| 0.0).unwrap();
        let desc = DatasetDescriptor {
            min_class_size: 400,
            ..DatasetDescriptor::unnamed("t", 3)
        };
        let (_, out) = apply_descriptor(&cube, &raster, &desc).unwrap();
        let expect: Vec<u16> = labels
            .iter()
            .map(|&l| match l {
                1 => 1,
                3 => 2,
                _ => 0,
            })
            .collect();
        assert_eq!(out.labels(), expect.as_slice());
        let distinct: BTreeSet<u16> = out.labels().iter().copied().filter(|&l| l != 0).collect();
        assert_eq!(distinct, BTreeSet::from([1, 2]));
    }

    #[test]
    fn descriptor_validation() {
        let mut d = DatasetDescriptor::unnamed("t", 2);
        d.discarded_bands = vec![1, 1];
        assert!(matches!(d.validate(4), Err(Error::Config(_))));
        d.discarded_bands = vec![4];
        assert!(matches!(d.validate(4), Err(Error::Config(_))));
    }

    #[test]
    fn descriptor_toml_round_trip() {
        let d = DatasetDescriptor::indian_pines();
        assert_eq!(DatasetDescriptor::from_toml(&d.to_toml()).unwrap(), d);
        let parsed = DatasetDescriptor::from_toml("name = \"x\"\nclass_names = [\"a\", \"b\"]\n").unwrap();
        assert_eq!(parsed.min_class_size, 0);
        assert!(parsed.discarded_bands.is_empty());
        assert!(DatasetDescriptor::from_toml("name = 3").is_err());
    }

    fn raster_with_counts(counts: &[usize]) -> LabelRaster {
        let mut labels = Vec::new();
        for (c, &n) in counts.iter().enumerate() {
            labels.extend(std::iter::repeat_n(c as u16 + 1, n));
        }
        labels.extend([0, 0, 0]);
        let n = labels.len();
        LabelRaster::new(1, n, labels).unwrap()
    }

    #[test]
    fn split_partitions_each_class() {
        let (_, labels) = generate_synthetic_cube(16, 16, 4, 3, 5).unwrap();
        let split = make_split(&labels, 30, 9).unwrap();
        split.validate(&labels).unwrap();
        for class in 1..=3u16 {
            let all: BTreeSet<(usize, usize)> = (0..16)
                .flat_map(|r| (0..16).map(move |c| (r, c)))
                .filter(|&(r, c)| labels.get(r, c) == class)
                .collect();
            let tr: BTreeSet<_> = split
                .train
                .iter()
                .filter(|p| p.class == class)
                .map(|p| (p.row, p.col))
                .collect();
            let te: BTreeSet<_> = split
                .test
                .iter()
                .filter(|p| p.class == class)
                .map(|p| (p.row, p.col))
                .collect();
            assert_eq!(tr.len(), 30.min(all.len()));
            assert!(tr.is_disjoint(&te));
            assert_eq!(tr.union(&te).copied().collect::<BTreeSet<_>>(), all);
        }
        assert_eq!(make_split(&labels, 30, 9).unwrap(), split);
        assert_ne!(make_split(&labels, 30, 10).unwrap().train, split.train);
    }

    #[test]
    fn split_exhausts_small_class() {
        let labels = raster_with_counts(&[5, 12]);
        let split = make_split(&labels, 5, 1).unwrap();
        assert_eq!(split.train.iter().filter(|p| p.class == 1).count(), 5);
        assert_eq!(split.test.iter().filter(|p| p.class == 1).count(), 0);
        assert_eq!(split.test.iter().filter(|p| p.class == 2).count(), 7);
    }

    #[test]
    fn split_names_empty_class() {
        let labels = LabelRaster::new(1, 4, vec![1, 3, 3, 0]).unwrap();
        match make_split(&labels, 2, 0) {
            Err(Error::Split(m)) => assert!(m.contains("class 2"), "{m}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn split_file_round_trip() {
        let labels = raster_with_counts(&[4, 6]);
        let split = make_split(&labels, 3, 2).unwrap();
        let text = split.to_text();
        assert!(text.starts_with('#'));
        assert_eq!(SplitSpec::from_text(&text).unwrap(), split);
        assert!(matches!(SplitSpec::from_text("1,2,3,valid"), Err(Error::Format(_))));
        assert!(matches!(SplitSpec::from_text("1,2,3"), Err(Error::Format(_))));
    }

    #[test]
    fn split_validation_catches_overlap_and_mismatch() {
        let labels = LabelRaster::new(1, 3, vec![1, 2, 0]).unwrap();
        let bad = SplitSpec::from_text("0,0,1,train\n0,0,1,test\n").unwrap();
        assert!(matches!(bad.validate(&labels), Err(Error::Split(_))));
        let bad = SplitSpec::from_text("0,2,1,train\n").unwrap();
        assert!(matches!(bad.validate(&labels), Err(Error::Split(_))));
        let bad = SplitSpec::from_text("5,0,1,train\n").unwrap();
        assert!(matches!(bad.validate(&labels), Err(Error::Index(_))));
    }

    #[test]
    fn synthetic_scene_is_deterministic_with_all_classes() {
        let (a, la) = generate_synthetic_cube(16, 16, 10, 3, 1).unwrap();
        let (b, lb) = generate_synthetic_cube(16, 16, 10, 3, 1).unwrap();
        assert_eq!(cube_bytes(&a), cube_bytes(&b));
        assert_eq!(la, lb);
        let counts = la.class_counts();
        assert_eq!(counts.len(), 4);
        assert_eq!(counts[0], 0);
        assert!(counts[1..].iter().all(|&n| n > 0));
        assert_ne!(
            cube_bytes(&generate_synthetic_cube(16, 16, 10, 3, 2).unwrap().0),
            cube_bytes(&a)
        );
    }

    #[test]
    fn nearest_centroid_separates_noiseless_scene() {
        let spec = SyntheticSpec::blocks(16, 16, 10, 3).noiseless();
        let (cube, labels) = spec.generate(7).unwrap();
        let sig = spec.signatures(7);
        for r in 0..16 {
            for c in 0..16 {
                let x = cube.spectrum(r, c);
                let dist = |s: &Vec<f32>| s.iter().zip(&x).map(|(a, b)| (a - b).powi(2)).sum::<f32>();
                let best = (0..3).min_by(|&i, &j| dist(&sig[i]).total_cmp(&dist(&sig[j]))).unwrap();
                assert_eq!(best as u16 + 1, labels.get(r, c));
            }
        }
    }

    #[test]
    fn striped_scene_has_thin_stripes() {
        let spec = SyntheticSpec::striped(20, 20, 6, 3);
        let (_, labels) = spec.generate(1).unwrap();
        assert_ne!(labels.get(2, 0), labels.get(1, 0));
        assert_ne!(labels.get(2, 0), labels.get(3, 0));
        assert!(labels.class_counts()[1..].iter().all(|&n| n > 0));
    }
}
