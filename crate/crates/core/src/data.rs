//! Synthetic dataset generation and dataset/image file I/O.
//!
//! The "real" class is a smoothed random texture; the "fake" class is the
//! same texture plus a signed periodic artifact of peak-to-peak amplitude
//! `a` (each pixel moves by `a/2`). Textures are paired between classes:
//! fake sample `i` is built from the same texture as real sample `i`, so
//! with `a = 0` the two classes coincide exactly.

use std::fs;
use std::path::Path;

use crate::denoise::gaussian_blur;
use crate::error::{Error, Result};
use crate::format::{fnv1a64, ByteReader, ByteWriter};
use crate::label::Label;
use crate::rng::{streams, Rng};
use crate::scalar::{lit, Scalar};
use crate::tensor::ImageTensor;

pub const DATASET_MAGIC: &[u8; 8] = b"TRIMDS01";
const DATASET_VERSION: u32 = 1;

/// Spatial artifact motif carried by the fake class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArtifactPattern {
    /// Single-pixel checkerboard; the highest-frequency motif.
    Checkerboard,
    /// Horizontal stripes two rows tall, alternating sign.
    HorizontalStripe,
}

impl ArtifactPattern {
    /// Signed pattern value in `{-1/2, +1/2}` at pixel `(i, j)`.
    #[inline]
    pub fn value(self, i: usize, j: usize) -> f64 {
        let positive = match self {
            ArtifactPattern::Checkerboard => (i + j) % 2 == 0,
            ArtifactPattern::HorizontalStripe => i % 4 < 2,
        };
        if positive {
            0.5
        } else {
            -0.5
        }
    }

    fn as_u8(self) -> u8 {
        match self {
            ArtifactPattern::Checkerboard => 0,
            ArtifactPattern::HorizontalStripe => 1,
        }
    }

    fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(ArtifactPattern::Checkerboard),
            1 => Some(ArtifactPattern::HorizontalStripe),
            _ => None,
        }
    }
}

impl std::str::FromStr for ArtifactPattern {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "checkerboard" => Ok(ArtifactPattern::Checkerboard),
            "horizontal-stripe" => Ok(ArtifactPattern::HorizontalStripe),
            other => Err(format!("unknown pattern '{other}'")),
        }
    }
}

impl std::fmt::Display for ArtifactPattern {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ArtifactPattern::Checkerboard => write!(f, "checkerboard"),
            ArtifactPattern::HorizontalStripe => write!(f, "horizontal-stripe"),
        }
    }
}

/// Generation parameters.
///
/// The base texture is white noise smoothed with the 3x3 Gaussian at
/// sigma = 0.8 from the denoise module.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DatasetSpec {
    pub n_per_class: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Peak-to-peak artifact amplitude `a` in `[0, 1]`.
    pub amplitude: f64,
    pub pattern: ArtifactPattern,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_per_class == 0 {
            return Err(Error::InvalidConfig("n_per_class must be >= 1".into()));
        }
        if self.channels == 0 || self.height < 2 || self.width < 2 {
            return Err(Error::InvalidConfig(format!(
                "dataset dims {}x{}x{} too small",
                self.channels, self.height, self.width
            )));
        }
        if !(0.0..=1.0).contains(&self.amplitude) {
            return Err(Error::InvalidConfig(format!(
                "artifact amplitude {} outside [0, 1]",
                self.amplitude
            )));
        }
        Ok(())
    }
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            n_per_class: 256,
            channels: 1,
            height: 16,
            width: 16,
            amplitude: 2.0 / 255.0,
            pattern: ArtifactPattern::Checkerboard,
            seed: 0,
        }
    }
}

/// Balanced labeled dataset; samples are interleaved `(real_i, fake_i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset<T> {
    pub images: Vec<ImageTensor<T>>,
    pub labels: Vec<Label>,
    pub spec: DatasetSpec,
}

impl<T: Scalar> LabeledDataset<T> {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Iterate `(image, label)` pairs.
    pub fn iter(&self) -> impl Iterator<Item = (&ImageTensor<T>, Label)> {
        self.images.iter().zip(self.labels.iter().copied())
    }
}

/// Generate the paired synthetic dataset. Deterministic in `spec.seed`.
pub fn generate<T: Scalar>(spec: &DatasetSpec) -> Result<LabeledDataset<T>> {
    spec.validate()?;
    let n = spec.n_per_class;
    let mut images = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(2 * n);
    let half_amp = spec.amplitude / 2.0;
    for i in 0..n {
        let mut rng = Rng::derive(spec.seed, &[streams::DATA_TEXTURE, i as u64]);
        let noise = ImageTensor::<T>::from_fn(spec.channels, spec.height, spec.width, |_, _, _| {
            lit(rng.next_f64())
        });
        let base = gaussian_blur(&noise, 3, 0.8)?;
        let fake = ImageTensor::from_fn(spec.channels, spec.height, spec.width, |c, ii, jj| {
            base.get(c, ii, jj) + lit::<T>(2.0 * half_amp * spec.pattern.value(ii, jj))
        });
        images.push(base);
        labels.push(Label::Real);
        images.push(fake);
        labels.push(Label::Fake);
    }
    Ok(LabeledDataset {
        images,
        labels,
        spec: *spec,
    })
}

/// Serialize to the documented binary format with a trailing FNV-1a
/// checksum.
pub fn save<T: Scalar>(dataset: &LabeledDataset<T>, path: &Path) -> Result<()> {
    let spec = &dataset.spec;
    let mut w = ByteWriter::new();
    w.bytes(DATASET_MAGIC);
    w.u32(DATASET_VERSION);
    w.u32(spec.n_per_class as u32);
    w.u32(spec.channels as u32);
    w.u32(spec.height as u32);
    w.u32(spec.width as u32);
    w.f64(spec.amplitude);
    w.u8(spec.pattern.as_u8());
    w.u8(0); // base texture: smoothed-noise
    w.u64(spec.seed);
    w.u32(dataset.images.len() as u32);
    for (img, label) in dataset.iter() {
        w.u8(label.as_u8());
        for v in img.data() {
            w.f64(v.to_f64().expect("scalar convertible to f64"));
        }
    }
    fs::write(path, w.finish_with_checksum())?;
    Ok(())
}

/// Load a dataset file, reporting distinct errors for bad magic,
/// truncation and checksum mismatch.
pub fn load<T: Scalar>(path: &Path) -> Result<LabeledDataset<T>> {
    let buf = fs::read(path)?;
    let mut r = ByteReader::new(&buf);
    r.magic(DATASET_MAGIC)?;
    let version = r.u32()?;
    if version != DATASET_VERSION {
        return Err(Error::Format {
            offset: 8,
            what: format!("unsupported dataset version {version}"),
        });
    }
    let n_per_class = r.u32()? as usize;
    let channels = r.u32()? as usize;
    let height = r.u32()? as usize;
    let width = r.u32()? as usize;
    let amplitude = r.f64()?;
    let pattern_byte = r.u8()?;
    let pattern = ArtifactPattern::from_u8(pattern_byte).ok_or_else(|| Error::Format {
        offset: r.offset() - 1,
        what: format!("unknown artifact pattern {pattern_byte}"),
    })?;
    let base_byte = r.u8()?;
    if base_byte != 0 {
        return Err(Error::Format {
            offset: r.offset() - 1,
            what: format!("unknown base texture {base_byte}"),
        });
    }
    let seed = r.u64()?;
    let n_samples = r.u32()? as usize;

    // Distinguish truncation from corruption before touching the payload.
    let pixels = channels * height * width;
    let expected_total = r.offset() as usize + n_samples * (1 + 8 * pixels) + 8;
    if buf.len() < expected_total {
        return Err(Error::Truncated {
            offset: buf.len() as u64,
            expected: (expected_total - buf.len()) as u64,
        });
    }
    if buf.len() > expected_total {
        return Err(Error::Format {
            offset: expected_total as u64,
            what: format!("{} trailing byte(s)", buf.len() - expected_total),
        });
    }
    ByteReader::verify_trailing_checksum(&buf)?;

    let spec = DatasetSpec {
        n_per_class,
        channels,
        height,
        width,
        amplitude,
        pattern,
        seed,
    };
    spec.validate().map_err(|e| Error::Format {
        offset: 12,
        what: format!("invalid spec block: {e}"),
    })?;

    let mut images = Vec::with_capacity(n_samples);
    let mut labels = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let at = r.offset();
        let label_byte = r.u8()?;
        let label = Label::from_index(label_byte as usize).ok_or_else(|| Error::Format {
            offset: at,
            what: format!("invalid label byte {label_byte}"),
        })?;
        let mut data = Vec::with_capacity(pixels);
        for _ in 0..pixels {
            data.push(lit::<T>(r.f64()?));
        }
        let img = ImageTensor::new(channels, height, width, data).map_err(|e| Error::Format {
            offset: at,
            what: format!("invalid sample: {e}"),
        })?;
        images.push(img);
        labels.push(label);
    }
    let n_fake = labels.iter().filter(|l| **l == Label::Fake).count();
    if n_fake * 2 != labels.len() {
        return Err(Error::Format {
            offset: expected_total as u64 - 8,
            what: format!("class imbalance: {n_fake} fake of {}", labels.len()),
        });
    }
    Ok(LabeledDataset {
        images,
        labels,
        spec,
    })
}

/// Checksum of an on-disk artifact, as recorded in run manifests.
pub fn file_fingerprint(path: &Path) -> Result<u64> {
    Ok(fnv1a64(&fs::read(path)?))
}

/// Import a binary 8-bit PGM (P5) or PPM (P6) image, scaling intensities
/// to `[0, 1]`.
pub fn import_pgm<T: Scalar>(path: &Path) -> Result<ImageTensor<T>> {
    let buf = fs::read(path)?;
    parse_pgm(&buf)
}

fn parse_pgm<T: Scalar>(buf: &[u8]) -> Result<ImageTensor<T>> {
    let mut pos = 0usize;
    let magic = pgm_token(buf, &mut pos)?;
    let channels = match magic.as_str() {
        "P5" => 1,
        "P6" => 3,
        other => {
            return Err(Error::PgmParse {
                offset: 0,
                what: format!("unsupported magic '{other}' (need binary P5 or P6)"),
            })
        }
    };
    let width = pgm_number(buf, &mut pos, "width")?;
    let height = pgm_number(buf, &mut pos, "height")?;
    let maxval_at = pos;
    let maxval = pgm_number(buf, &mut pos, "maxval")?;
    if maxval == 0 || maxval > 255 {
        return Err(Error::PgmParse {
            offset: maxval_at,
            what: format!("unsupported maxval {maxval} (need 1..=255)"),
        });
    }
    // Exactly one whitespace byte separates the header from the raster.
    if pos >= buf.len() || !buf[pos].is_ascii_whitespace() {
        return Err(Error::PgmParse {
            offset: pos,
            what: "missing whitespace before raster".into(),
        });
    }
    pos += 1;
    let pixels = width * height;
    let need = pixels * channels;
    if buf.len() - pos < need {
        return Err(Error::PgmParse {
            offset: buf.len(),
            what: format!("raster truncated: need {need} bytes, have {}", buf.len() - pos),
        });
    }
    let raster = &buf[pos..pos + need];
    let scale = 1.0 / maxval as f64;
    // PGM rasters are row-major with interleaved channels; our layout is
    // channel-major.
    let data = {
        let mut data = vec![T::zero(); need];
        for p in 0..pixels {
            for c in 0..channels {
                data[c * pixels + p] = lit(raster[p * channels + c] as f64 * scale);
            }
        }
        data
    };
    ImageTensor::new(channels, height, width, data)
}

/// Read one whitespace-delimited token, skipping `#` comments.
fn pgm_token(buf: &[u8], pos: &mut usize) -> Result<String> {
    loop {
        while *pos < buf.len() && buf[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < buf.len() && buf[*pos] == b'#' {
            while *pos < buf.len() && buf[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < buf.len() && !buf[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::PgmParse {
            offset: start,
            what: "unexpected end of header".into(),
        });
    }
    Ok(String::from_utf8_lossy(&buf[start..*pos]).into_owned())
}

fn pgm_number(buf: &[u8], pos: &mut usize, what: &str) -> Result<usize> {
    let at = *pos;
    let tok = pgm_token(buf, pos)?;
    tok.parse::<usize>().map_err(|_| Error::PgmParse {
        offset: at,
        what: format!("bad {what} token '{tok}'"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec(amplitude: f64) -> DatasetSpec {
        DatasetSpec {
            n_per_class: 16,
            channels: 1,
            height: 8,
            width: 8,
            amplitude,
            pattern: ArtifactPattern::Checkerboard,
            seed: 77,
        }
    }

    #[test]
    fn zero_amplitude_classes_coincide() {
        let ds = generate::<f64>(&small_spec(0.0)).unwrap();
        for i in 0..ds.spec.n_per_class {
            assert_eq!(ds.images[2 * i], ds.images[2 * i + 1]);
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let a = generate::<f64>(&small_spec(0.25)).unwrap();
        let b = generate::<f64>(&small_spec(0.25)).unwrap();
        assert_eq!(a, b);
        let mut other = small_spec(0.25);
        other.seed = 78;
        let c = generate::<f64>(&other).unwrap();
        assert_ne!(a.images, c.images);
    }

    #[test]
    fn class_balance_and_range() {
        let ds = generate::<f64>(&small_spec(0.9)).unwrap();
        let fake = ds.labels.iter().filter(|l| **l == Label::Fake).count();
        assert_eq!(fake * 2, ds.len());
        for img in &ds.images {
            for v in img.data() {
                assert!((0.0..=1.0).contains(v));
            }
        }
    }

    #[test]
    fn artifact_cells_move_by_half_amplitude() {
        // Every cell carries a +/- a/2 offset; clamping shaves a little.
        let spec = DatasetSpec {
            n_per_class: 64,
            ..small_spec(0.5)
        };
        let ds = generate::<f64>(&spec).unwrap();
        let mut total = 0.0;
        let mut count = 0usize;
        for i in 0..spec.n_per_class {
            let real = &ds.images[2 * i];
            let fake = &ds.images[2 * i + 1];
            for (a, b) in real.data().iter().zip(fake.data()) {
                total += (a - b).abs();
                count += 1;
            }
        }
        let mean = total / count as f64;
        assert!(
            (mean - spec.amplitude / 2.0).abs() <= 0.01,
            "mean abs diff {mean}"
        );
    }

    #[test]
    fn rejects_bad_amplitude() {
        assert!(generate::<f64>(&small_spec(1.5)).is_err());
        assert!(generate::<f64>(&small_spec(-0.1)).is_err());
    }

    #[test]
    fn save_load_roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.bin");
        let ds = generate::<f64>(&small_spec(0.125)).unwrap();
        save(&ds, &path).unwrap();
        let back = load::<f64>(&path).unwrap();
        assert_eq!(ds, back);
    }

    #[test]
    fn load_errors_are_distinct() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.bin");
        let ds = generate::<f64>(&small_spec(0.125)).unwrap();
        save(&ds, &path).unwrap();
        let good = std::fs::read(&path).unwrap();

        // Corrupted magic names offset 0.
        let mut bad = good.clone();
        bad[0] = b'X';
        std::fs::write(&path, &bad).unwrap();
        match load::<f64>(&path) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected format error, got {other:?}"),
        }

        // Truncation is not a crash and not a checksum error.
        std::fs::write(&path, &good[..good.len() / 2]).unwrap();
        assert!(matches!(load::<f64>(&path), Err(Error::Truncated { .. })));

        // Payload corruption trips the checksum.
        let mut bad = good.clone();
        let mid = good.len() / 2;
        bad[mid] ^= 0xFF;
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(
            load::<f64>(&path),
            Err(Error::ChecksumMismatch { .. })
        ));
    }

    #[test]
    fn pgm_import_examples() {
        let dir = tempfile::tempdir().unwrap();

        let p = dir.path().join("one.pgm");
        std::fs::write(&p, b"P5\n1 1\n255\n\xff").unwrap();
        let img = import_pgm::<f64>(&p).unwrap();
        assert_eq!(img.data(), &[1.0]);

        std::fs::write(&p, b"P5\n1 1\n255\n\x00").unwrap();
        let img = import_pgm::<f64>(&p).unwrap();
        assert_eq!(img.data(), &[0.0]);

        std::fs::write(&p, b"P5\n# comment\n2 2\n255\n\x00\x55\xaa\xff").unwrap();
        let img = import_pgm::<f64>(&p).unwrap();
        let expect = [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0];
        for (got, want) in img.data().iter().zip(expect) {
            assert!((got - want).abs() <= 1e-9);
        }
    }

    #[test]
    fn pgm_errors_name_positions() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.pgm");

        std::fs::write(&p, b"P4\n1 1\n255\n\x00").unwrap();
        assert!(matches!(
            import_pgm::<f64>(&p),
            Err(Error::PgmParse { offset: 0, .. })
        ));

        std::fs::write(&p, b"P5\n1 1\n65535\n\x00\x00").unwrap();
        match import_pgm::<f64>(&p) {
            Err(Error::PgmParse { offset, what }) => {
                assert!(what.contains("maxval"), "{what}");
                assert!(offset > 0);
            }
            other => panic!("expected maxval error, got {other:?}"),
        }

        std::fs::write(&p, b"P5\nx 1\n255\n\x00").unwrap();
        assert!(matches!(import_pgm::<f64>(&p), Err(Error::PgmParse { .. })));

        std::fs::write(&p, b"P5\n4 4\n255\n\x00").unwrap();
        match import_pgm::<f64>(&p) {
            Err(Error::PgmParse { what, .. }) => assert!(what.contains("truncated")),
            other => panic!("expected truncation error, got {other:?}"),
        }
    }

    #[test]
    fn ppm_import_is_channel_major() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("rgb.ppm");
        // One pixel: R=255, G=0, B=85.
        std::fs::write(&p, b"P6\n1 1\n255\n\xff\x00\x55").unwrap();
        let img = import_pgm::<f64>(&p).unwrap();
        assert_eq!(img.shape(), (3, 1, 1));
        assert!((img.get(0, 0, 0) - 1.0).abs() < 1e-12);
        assert_eq!(img.get(1, 0, 0), 0.0);
        assert!((img.get(2, 0, 0) - 1.0 / 3.0).abs() < 1e-9);
    }
}
