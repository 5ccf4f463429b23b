use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{read_ppm, render_sample, write_ppm, FactorSpec, Factors, GLYPHS, HUES, OFFSETS};
use crate::error::DataError;
use crate::rng::{splitmix64, Rng};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.csv";

/// Glyph identities per split; splits never share a glyph.
const GLYPH_SPLIT: [usize; 3] = [10, 3, 3];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|sp| sp.as_str() == s)
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// How background hue relates to the label.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum CorrelationMode {
    Uncorrelated,
    /// In train, hue parity equals the label with probability `r`; in dev
    /// and test it differs from the label with probability `r`.
    Correlated(f64),
}

impl CorrelationMode {
    pub fn validate(self) -> Result<(), DataError> {
        match self {
            CorrelationMode::Correlated(r) if !(0.5..=1.0).contains(&r) => Err(DataError::CorrelationOutOfRange(r)),
            _ => Ok(()),
        }
    }

    /// Probability that hue parity matches the label in `split`.
    fn agreement(self, split: Split) -> f64 {
        match (self, split) {
            (CorrelationMode::Uncorrelated, _) => 0.5,
            (CorrelationMode::Correlated(r), Split::Train) => r,
            (CorrelationMode::Correlated(r), _) => 1.0 - r,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DatasetPlan {
    pub n_train: usize,
    pub n_dev: usize,
    pub n_test: usize,
    pub mode: CorrelationMode,
}

impl Default for DatasetPlan {
    fn default() -> Self {
        Self { n_train: 5000, n_dev: 500, n_test: 1000, mode: CorrelationMode::Uncorrelated }
    }
}

impl DatasetPlan {
    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.n_train,
            Split::Dev => self.n_dev,
            Split::Test => self.n_test,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub sample_id: String,
    /// Relative to the manifest's directory.
    pub path: String,
    pub label: u8,
    pub background_hue: usize,
    pub identity_glyph: usize,
    pub glyph_offset: usize,
    pub spoof_amplitude: f64,
    pub split: Split,
}

impl ManifestRow {
    pub fn factors(&self) -> Factors {
        Factors {
            background_hue: self.background_hue,
            identity_glyph: self.identity_glyph,
            glyph_offset: self.glyph_offset,
            spoof_amplitude: self.spoof_amplitude,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub rows: Vec<ManifestRow>,
}

impl Manifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestRow> {
        self.rows.iter().filter(move |r| r.split == split)
    }

    /// Checks id uniqueness, factor levels and label == (amplitude == 0).
    pub fn validate(&self) -> Result<(), DataError> {
        let mut seen = HashSet::new();
        for row in &self.rows {
            if !seen.insert(row.sample_id.as_str()) {
                return Err(DataError::Manifest(format!("duplicate sample_id {}", row.sample_id)));
            }
            if row.background_hue >= HUES || row.identity_glyph >= GLYPHS || row.glyph_offset >= OFFSETS {
                return Err(DataError::UnknownLevel(format!("factor level out of range in {}", row.sample_id)));
            }
            if row.label > 1 || row.label != row.factors().label() {
                return Err(DataError::Manifest(format!(
                    "{}: label {} inconsistent with spoof amplitude {}",
                    row.sample_id, row.label, row.spoof_amplitude
                )));
            }
        }
        Ok(())
    }
}

/// Samples every row's factors. Row order is train, dev, test.
pub fn plan_manifest(spec: &FactorSpec, plan: &DatasetPlan, seed: u64) -> Result<Manifest, DataError> {
    spec.validate()?;
    plan.mode.validate()?;
    let glyph_order = Rng::derive(seed, 10).permutation(GLYPHS);
    let mut rng = Rng::derive(seed, 11);
    let mut rows = Vec::new();
    let mut first = 0;
    for (s, split) in Split::ALL.into_iter().enumerate() {
        let glyphs = &glyph_order[first..first + GLYPH_SPLIT[s]];
        first += GLYPH_SPLIT[s];
        let n = plan.count(split);
        let mut labels: Vec<u8> = (0..n).map(|i| u8::from(i < n.div_ceil(2))).collect();
        rng.shuffle(&mut labels);
        let agreement = plan.mode.agreement(split);
        for (i, &label) in labels.iter().enumerate() {
            let parity = if rng.bernoulli(agreement) { label as usize } else { 1 - label as usize };
            let background_hue = 2 * rng.below(HUES / 2) + parity;
            let identity_glyph = glyphs[rng.below(glyphs.len())];
            let glyph_offset = rng.below(OFFSETS);
            let spoof_amplitude = if label == 1 { 0.0 } else { rng.uniform_range(spec.amp_min, spec.amp_max) };
            let sample_id = format!("{split}_{i:05}");
            rows.push(ManifestRow {
                path: format!("{split}/{sample_id}.ppm"),
                sample_id,
                label,
                background_hue,
                identity_glyph,
                glyph_offset,
                spoof_amplitude,
                split,
            });
        }
    }
    Ok(Manifest { rows })
}

/// Per-sample noise stream: a function of the dataset seed and the row's
/// position in the manifest only.
fn sample_rng(seed: u64, index: usize) -> Rng {
    Rng::new(splitmix64(seed) ^ index as u64)
}

/// Rounds to the 8-bit grid, so in-memory samples match their PPM files.
fn quantize<T: Scalar>(mut img: Tensor<T>) -> Tensor<T> {
    for v in img.data_mut() {
        *v = T::from_f64_lossy((v.to_f64_lossy() * 255.0).round() / 255.0);
    }
    img
}

/// Renders the dataset to `out_dir/<split>/<id>.ppm` and writes the manifest.
pub fn generate_dataset(
    spec: &FactorSpec,
    plan: &DatasetPlan,
    seed: u64,
    out_dir: &Path,
) -> Result<Manifest, DataError> {
    let manifest = plan_manifest(spec, plan, seed)?;
    for split in Split::ALL {
        let dir = out_dir.join(split.as_str());
        fs::create_dir_all(&dir).map_err(|source| DataError::Io { path: dir.clone(), source })?;
    }
    for (i, row) in manifest.rows.iter().enumerate() {
        let img: Tensor<f64> = render_sample(spec, &row.factors(), &mut sample_rng(seed, i))?;
        write_ppm(&out_dir.join(&row.path), &img)?;
    }
    write_manifest(&out_dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

pub fn write_manifest(path: &Path, manifest: &Manifest) -> Result<(), DataError> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    for row in &manifest.rows {
        w.serialize(row)?;
    }
    if manifest.rows.is_empty() {
        w.write_record([
            "sample_id",
            "path",
            "label",
            "background_hue",
            "identity_glyph",
            "glyph_offset",
            "spoof_amplitude",
            "split",
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| DataError::Manifest(e.to_string()))?;
    fs::write(path, bytes).map_err(|source| DataError::Io { path: path.to_path_buf(), source })
}

/// Reads `dir/manifest.csv` and validates it.
pub fn load_manifest(dir: &Path) -> Result<Manifest, DataError> {
    let path = dir.join(MANIFEST_FILE);
    let file = fs::File::open(&path).map_err(|source| DataError::Io { path: path.clone(), source })?;
    let rows = csv::Reader::from_reader(file).deserialize().collect::<Result<Vec<ManifestRow>, _>>()?;
    let manifest = Manifest { rows };
    manifest.validate()?;
    Ok(manifest)
}

/// Images, labels and factors of one split, held in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<T> {
    pub ids: Vec<String>,
    /// `[N, 3, H, W]`.
    pub images: Tensor<T>,
    /// 1 = bona fide, 0 = attack.
    pub labels: Vec<u8>,
    pub factors: Vec<Factors>,
}

impl<T: Scalar> Dataset<T> {
    pub fn from_images(rows: &[&ManifestRow], images: Vec<Tensor<T>>) -> Result<Self, DataError> {
        let Some(first) = images.first() else {
            return Err(DataError::Invalid("empty split".into()));
        };
        let sample_shape = first.shape().to_vec();
        let mut data = Vec::with_capacity(images.len() * first.numel());
        for (row, img) in rows.iter().zip(&images) {
            if img.shape() != sample_shape.as_slice() {
                return Err(DataError::Invalid(format!("{}: image shape {:?}", row.sample_id, img.shape())));
            }
            data.extend_from_slice(img.data());
        }
        let mut shape = vec![images.len()];
        shape.extend(sample_shape);
        Ok(Self {
            ids: rows.iter().map(|r| r.sample_id.clone()).collect(),
            images: Tensor::new(&shape, data)?,
            labels: rows.iter().map(|r| r.label).collect(),
            factors: rows.iter().map(|r| r.factors()).collect(),
        })
    }

    /// Renders one split in memory, pixel-identical to what
    /// [`generate_dataset`] writes and [`load_split`] reads back.
    pub fn synthesize(spec: &FactorSpec, plan: &DatasetPlan, seed: u64, split: Split) -> Result<Self, DataError> {
        let manifest = plan_manifest(spec, plan, seed)?;
        let mut rows = Vec::new();
        let mut images = Vec::new();
        for (i, row) in manifest.rows.iter().enumerate().filter(|(_, r)| r.split == split) {
            let img: Tensor<f64> = render_sample(spec, &row.factors(), &mut sample_rng(seed, i))?;
            images.push(quantize(img.cast::<T>()));
            rows.push(row);
        }
        Self::from_images(&rows, images)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn sample_len(&self) -> usize {
        self.images.numel() / self.len().max(1)
    }

    /// Images `[n, 3, H, W]` and float labels `[n, 1]` for the given rows.
    pub fn batch(&self, indices: &[usize]) -> (Tensor<T>, Tensor<T>) {
        let k = self.sample_len();
        let src = self.images.data();
        let mut data = Vec::with_capacity(indices.len() * k);
        for &i in indices {
            data.extend_from_slice(&src[i * k..(i + 1) * k]);
        }
        let mut shape = self.images.shape().to_vec();
        shape[0] = indices.len();
        let labels = indices.iter().map(|&i| T::from_f64_lossy(self.labels[i] as f64)).collect();
        (
            Tensor::new(&shape, data).expect("batch shape"),
            Tensor::new(&[indices.len(), 1], labels).expect("label shape"),
        )
    }

    /// Consecutive rows `start..start + len` as one batch.
    pub fn chunk(&self, start: usize, len: usize) -> Tensor<T> {
        self.images.slice_rows(start, len).expect("chunk in range")
    }
}

/// Loads every image of `split` listed in the manifest in `dir`.
pub fn load_split<T: Scalar>(dir: &Path, manifest: &Manifest, split: Split) -> Result<Dataset<T>, DataError> {
    let rows: Vec<&ManifestRow> = manifest.split(split).collect();
    let images = rows.iter().map(|r| read_ppm::<T>(&dir.join(&r.path))).collect::<Result<Vec<_>, _>>()?;
    Dataset::from_images(&rows, images)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(mode: CorrelationMode) -> DatasetPlan {
        DatasetPlan { n_train: 40, n_dev: 10, n_test: 12, mode }
    }

    #[test]
    fn r_outside_range_is_rejected() {
        for r in [0.4, 1.1] {
            let err = plan_manifest(&FactorSpec::default(), &small(CorrelationMode::Correlated(r)), 0);
            assert!(matches!(err, Err(DataError::CorrelationOutOfRange(_))));
        }
    }

    #[test]
    fn labels_are_balanced_and_consistent() {
        let m = plan_manifest(&FactorSpec::default(), &small(CorrelationMode::Uncorrelated), 3).unwrap();
        m.validate().unwrap();
        for split in Split::ALL {
            let rows: Vec<_> = m.split(split).collect();
            let bona = rows.iter().filter(|r| r.label == 1).count();
            assert_eq!(bona, rows.len().div_ceil(2));
        }
    }

    #[test]
    fn r_one_gives_perfect_train_agreement() {
        let m = plan_manifest(&FactorSpec::default(), &small(CorrelationMode::Correlated(1.0)), 5).unwrap();
        assert!(m.split(Split::Train).all(|r| r.background_hue % 2 == r.label as usize));
        assert!(m.split(Split::Test).all(|r| r.background_hue % 2 != r.label as usize));
    }

    #[test]
    fn disk_and_memory_agree() {
        let dir = tempfile::tempdir().unwrap();
        let spec = FactorSpec::default();
        let plan = small(CorrelationMode::Correlated(0.9));
        let manifest = generate_dataset(&spec, &plan, 21, dir.path()).unwrap();
        assert_eq!(load_manifest(dir.path()).unwrap(), manifest);
        let disk: Dataset<f32> = load_split(dir.path(), &manifest, Split::Dev).unwrap();
        let mem: Dataset<f32> = Dataset::synthesize(&spec, &plan, 21, Split::Dev).unwrap();
        assert_eq!(disk, mem);
    }

    #[test]
    fn manifest_rejects_label_mismatch() {
        let mut m = plan_manifest(&FactorSpec::default(), &small(CorrelationMode::Uncorrelated), 1).unwrap();
        m.rows[0].label = 1 - m.rows[0].label;
        assert!(matches!(m.validate(), Err(DataError::Manifest(_))));
    }

    #[test]
    fn batch_gathers_rows() {
        let plan = small(CorrelationMode::Uncorrelated);
        let ds: Dataset<f64> = Dataset::synthesize(&FactorSpec::default(), &plan, 2, Split::Test).unwrap();
        let (x, y) = ds.batch(&[3, 0]);
        assert_eq!(x.shape(), &[2, 3, 54, 54]);
        let k = 3 * 54 * 54;
        assert_eq!(&x.data()[..k], &ds.images.data()[3 * k..4 * k]);
        assert_eq!(y.data(), &[ds.labels[3] as f64, ds.labels[0] as f64]);
    }
}
