//! Dataset loading (IDX), a synthetic digit-like dataset, and report documents.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::imagecore::Image;
use crate::{Error, Result};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Schema version written into every report.
pub const REPORT_SCHEMA_VERSION: &str = "1";

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    name: String,
    images: Vec<Image>,
    labels: Vec<usize>,
    num_classes: usize,
}

impl LabeledDataset {
    pub fn new(name: impl Into<String>, images: Vec<Image>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::LabelImageCountMismatch { images: images.len(), labels: labels.len() });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::invalid("labels", format!("label {bad} is not below {num_classes} classes")));
        }
        if let Some(first) = images.first() {
            if let Some(other) = images.iter().find(|im| !im.same_shape(first)) {
                first.check_same_shape(other)?;
            }
        }
        Ok(LabeledDataset { name: name.into(), images, labels, num_classes })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn images(&self) -> &[Image] {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// `(channels, height, width)` of the images, if any.
    pub fn image_shape(&self) -> Option<(usize, usize, usize)> {
        self.images.first().map(|im| (im.channels(), im.height(), im.width()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Image, usize)> {
        self.images.iter().zip(self.labels.iter().copied())
    }

    /// The first `n` items (all of them if `n` exceeds the length).
    pub fn take(&self, n: usize) -> LabeledDataset {
        let n = n.min(self.len());
        LabeledDataset {
            name: self.name.clone(),
            images: self.images[..n].to_vec(),
            labels: self.labels[..n].to_vec(),
            num_classes: self.num_classes,
        }
    }

    /// Items `[start, end)`.
    pub fn slice(&self, start: usize, end: usize) -> LabeledDataset {
        let end = end.min(self.len());
        let start = start.min(end);
        LabeledDataset {
            name: self.name.clone(),
            images: self.images[start..end].to_vec(),
            labels: self.labels[start..end].to_vec(),
            num_classes: self.num_classes,
        }
    }

    /// Block-averages every image by `factor`.
    pub fn downsample(&self, factor: usize) -> Result<LabeledDataset> {
        let images = self.images.iter().map(|im| im.downsample(factor)).collect::<Result<Vec<_>>>()?;
        Ok(LabeledDataset {
            name: format!("{}/{}x", self.name, factor),
            images,
            labels: self.labels.clone(),
            num_classes: self.num_classes,
        })
    }
}

/// Reads an IDX image file and its label file. Pixels are bytes scaled by
/// `1/255`. `limit` truncates both to the first `limit` items.
pub fn load_idx(images_path: &Path, labels_path: &Path, limit: Option<usize>) -> Result<LabeledDataset> {
    let img_bytes = fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let lbl_bytes = fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?;
    let mut images = parse_idx_images(&img_bytes, images_path, limit)?;
    let mut labels = parse_idx_labels(&lbl_bytes, labels_path, limit)?;
    if images.len() != labels.len() {
        return Err(Error::LabelImageCountMismatch { images: images.len(), labels: labels.len() });
    }
    if let Some(n) = limit {
        images.truncate(n);
        labels.truncate(n);
    }
    let name = images_path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let num_classes = labels.iter().copied().max().map_or(10, |m| (m + 1).max(10));
    LabeledDataset::new(name, images, labels, num_classes)
}

fn read_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    match bytes.get(at..at + 4) {
        Some(b) => Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]])),
        None => Err(Error::TruncatedFile { path: path.to_path_buf(), needed: at + 4, available: bytes.len() }),
    }
}

/// Parses an IDX3 image container (`0x00000803`, count, rows, cols, bytes).
pub fn parse_idx_images(bytes: &[u8], path: &Path, limit: Option<usize>) -> Result<Vec<Image>> {
    let magic = read_u32(bytes, 0, path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::BadMagic { path: path.to_path_buf(), found: magic, expected: IDX_IMAGES_MAGIC });
    }
    let count = read_u32(bytes, 4, path)? as usize;
    let rows = read_u32(bytes, 8, path)? as usize;
    let cols = read_u32(bytes, 12, path)? as usize;
    let take = limit.map_or(count, |l| l.min(count));
    let size = rows * cols;
    let needed = 16 + take * size;
    if bytes.len() < needed {
        return Err(Error::TruncatedFile { path: path.to_path_buf(), needed, available: bytes.len() });
    }
    (0..take)
        .map(|k| {
            let px = &bytes[16 + k * size..16 + (k + 1) * size];
            Image::gray(rows, cols, px.iter().map(|&b| b as f64 / 255.0).collect())
        })
        .collect()
}

/// Parses an IDX1 label container (`0x00000801`, count, bytes).
pub fn parse_idx_labels(bytes: &[u8], path: &Path, limit: Option<usize>) -> Result<Vec<usize>> {
    let magic = read_u32(bytes, 0, path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::BadMagic { path: path.to_path_buf(), found: magic, expected: IDX_LABELS_MAGIC });
    }
    let count = read_u32(bytes, 4, path)? as usize;
    let take = limit.map_or(count, |l| l.min(count));
    let needed = 8 + take;
    if bytes.len() < needed {
        return Err(Error::TruncatedFile { path: path.to_path_buf(), needed, available: bytes.len() });
    }
    Ok(bytes[8..8 + take].iter().map(|&b| b as usize).collect())
}

/// Serializes grayscale images and labels back into IDX containers.
pub fn encode_idx(images: &[Image], labels: &[usize]) -> Result<(Vec<u8>, Vec<u8>)> {
    if images.len() != labels.len() {
        return Err(Error::LabelImageCountMismatch { images: images.len(), labels: labels.len() });
    }
    let (rows, cols) = images.first().map_or((0, 0), |im| (im.height(), im.width()));
    let mut img = Vec::with_capacity(16 + images.len() * rows * cols);
    for v in [IDX_IMAGES_MAGIC, images.len() as u32, rows as u32, cols as u32] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    for im in images {
        if im.channels() != 1 || im.height() != rows || im.width() != cols {
            return Err(Error::invalid("images", "IDX holds equally sized grayscale images only"));
        }
        img.extend(im.pixels().iter().map(|&p| (p * 255.0).round() as u8));
    }
    let mut lbl = Vec::with_capacity(8 + labels.len());
    lbl.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lbl.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    for &l in labels {
        let b = u8::try_from(l).map_err(|_| Error::invalid("labels", format!("{l} does not fit a byte")))?;
        lbl.push(b);
    }
    Ok((img, lbl))
}

// Seven-segment layout: (x0, y0, x1, y1) in a unit box, y down.
const SEGMENTS: [(f64, f64, f64, f64); 7] = [
    (0.0, 0.0, 1.0, 0.0), // top
    (1.0, 0.0, 1.0, 0.5), // upper right
    (1.0, 0.5, 1.0, 1.0), // lower right
    (0.0, 1.0, 1.0, 1.0), // bottom
    (0.0, 0.5, 0.0, 1.0), // lower left
    (0.0, 0.0, 0.0, 0.5), // upper left
    (0.0, 0.5, 1.0, 0.5), // middle
];

const DIGIT_SEGMENTS: [u8; 10] = [
    0b011_1111, 0b000_0110, 0b101_1011, 0b100_1111, 0b110_0110,
    0b110_1101, 0b111_1101, 0b000_0111, 0b111_1111, 0b110_1111,
];

/// Seeded digit-like dataset: seven-segment glyphs with random placement,
/// size, slant, stroke width and intensity, plus faint background noise.
/// Labels cycle through the ten classes.
pub fn synthetic_digits(count: usize, height: usize, width: usize, seed: u64) -> Result<LabeledDataset> {
    if height < 8 || width < 8 {
        return Err(Error::invalid("dimensions", "synthetic digits need at least 8×8 pixels"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (hf, wf) = (height as f64, width as f64);
    let mut images = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    for k in 0..count {
        let label = k % 10;
        let glyph_h = hf * rng.gen_range(0.55..0.75);
        let glyph_w = glyph_h * rng.gen_range(0.45..0.6);
        let top = (hf - glyph_h) / 2.0 + rng.gen_range(-0.08..0.08) * hf;
        let left = (wf - glyph_w) / 2.0 + rng.gen_range(-0.08..0.08) * wf;
        let slant = rng.gen_range(-0.25..0.25);
        let stroke = hf * rng.gen_range(0.05..0.08);
        let intensity = rng.gen_range(0.75..1.0);
        let segs: Vec<(f64, f64, f64, f64)> = SEGMENTS
            .iter()
            .enumerate()
            .filter(|(s, _)| DIGIT_SEGMENTS[label] & (1 << s) != 0)
            .map(|(_, &(x0, y0, x1, y1))| {
                let map = |x: f64, y: f64| (left + x * glyph_w + slant * (0.5 - y) * glyph_h, top + y * glyph_h);
                let (a, b) = map(x0, y0);
                let (c, d) = map(x1, y1);
                (a, b, c, d)
            })
            .collect();
        let noise: Vec<f64> = (0..height * width).map(|_| rng.gen_range(0.0..0.04)).collect();
        let image = Image::from_fn(height, width, 1, |_, y, x| {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let d = segs.iter().map(|&s| segment_distance(px, py, s)).fold(f64::INFINITY, f64::min);
            let ink = intensity * (1.0 - ((d - stroke) / 0.8).clamp(0.0, 1.0));
            (ink + noise[y * width + x]).min(1.0)
        });
        images.push(image);
        labels.push(label);
    }
    LabeledDataset::new(format!("synthetic-{seed}"), images, labels, 10)
}

fn segment_distance(px: f64, py: f64, (x0, y0, x1, y1): (f64, f64, f64, f64)) -> f64 {
    let (dx, dy) = (x1 - x0, y1 - y0);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 { (((px - x0) * dx + (py - y0) * dy) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let (qx, qy) = (x0 + t * dx - px, y0 + t * dy - py);
    (qx * qx + qy * qy).sqrt()
}

/// A result document: metadata, an echo of the configuration, and named
/// tables of records. Keys serialize in sorted order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: String,
    pub metadata: Map<String, Value>,
    pub config: Value,
    pub tables: Map<String, Value>,
}

impl Report {
    pub fn new() -> Self {
        Report {
            schema_version: REPORT_SCHEMA_VERSION.to_string(),
            metadata: Map::new(),
            config: Value::Object(Map::new()),
            tables: Map::new(),
        }
    }

    pub fn with_config<T: Serialize>(mut self, config: &T) -> Result<Self> {
        self.config = serde_json::to_value(config).map_err(|e| Error::Format(e.to_string()))?;
        Ok(self)
    }

    pub fn meta(&mut self, key: &str, value: impl Into<Value>) -> &mut Self {
        self.metadata.insert(key.to_string(), value.into());
        self
    }

    /// Adds a table of serializable records.
    pub fn table<T: Serialize>(&mut self, name: &str, rows: &[T]) -> Result<&mut Self> {
        let v = serde_json::to_value(rows).map_err(|e| Error::Format(e.to_string()))?;
        self.tables.insert(name.to_string(), v);
        Ok(self)
    }

    /// Adds an accuracy curve as `[[eps_times_n, accuracy], …]`.
    pub fn curve(&mut self, name: &str, points: &[(f64, f64)]) -> &mut Self {
        let rows = points.iter().map(|&(e, a)| Value::from(vec![e, a])).collect();
        self.tables.insert(name.to_string(), Value::Array(rows));
        self
    }

    /// The document as it is written to disk.
    pub fn to_pretty_string(&self) -> Result<String> {
        let mut v = serde_json::to_value(self).map_err(|e| Error::Format(e.to_string()))?;
        round_floats(&mut v);
        let mut s = serde_json::to_string_pretty(&v).map_err(|e| Error::Format(e.to_string()))?;
        s.push('\n');
        Ok(s)
    }
}

/// Rounds a float to 6 significant digits; integers and non-finite values pass
/// through.
pub fn round_significant(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    format!("{x:.5e}").parse().unwrap_or(x)
}

fn round_floats(v: &mut Value) {
    match v {
        Value::Number(n) if n.is_f64() => {
            let r = round_significant(n.as_f64().unwrap_or(0.0));
            if let Some(num) = serde_json::Number::from_f64(r) {
                *n = num;
            }
        }
        Value::Array(a) => a.iter_mut().for_each(round_floats),
        Value::Object(o) => o.values_mut().for_each(round_floats),
        _ => {}
    }
}

/// Writes `report` to `path` atomically (temporary file in the same directory,
/// then rename), so a failure never leaves a partial document behind.
pub fn write_report(report: &Report, path: &Path) -> Result<()> {
    let text = report.to_pretty_string()?;
    write_atomic(path, text.as_bytes())
}

pub fn read_report(path: &Path) -> Result<Report> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let report: Report = serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    if report.schema_version != REPORT_SCHEMA_VERSION {
        return Err(Error::Format(format!("unsupported schema version {:?}", report.schema_version)));
    }
    Ok(report)
}

/// Atomically replaces `path` with `bytes`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir: PathBuf = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(&dir).map_err(|e| Error::io(&dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(tmp.path(), e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(tmp.path(), e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header(magic: u32, dims: &[u32]) -> Vec<u8> {
        let mut v = magic.to_be_bytes().to_vec();
        for d in dims {
            v.extend_from_slice(&d.to_be_bytes());
        }
        v
    }

    #[test]
    fn parses_a_tiny_image_file() {
        let mut bytes = header(IDX_IMAGES_MAGIC, &[1, 2, 2]);
        bytes.extend_from_slice(&[0, 255, 128, 64]);
        let images = parse_idx_images(&bytes, Path::new("t"), None).unwrap();
        assert_eq!(images.len(), 1);
        assert_eq!(images[0].pixels(), &[0.0, 1.0, 128.0 / 255.0, 64.0 / 255.0]);
        assert!((images[0].pixels()[2] - 0.501_960_784).abs() < 1e-9);
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let mut bytes = header(0x0000_0802, &[1, 2, 2]);
        bytes.extend_from_slice(&[0; 4]);
        assert!(matches!(
            parse_idx_images(&bytes, Path::new("t"), None),
            Err(Error::BadMagic { found: 0x0802, .. })
        ));
        let bytes = header(IDX_IMAGES_MAGIC, &[1]);
        assert!(matches!(parse_idx_labels(&bytes, Path::new("t"), None), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn truncated_payload_is_reported() {
        let mut bytes = header(IDX_IMAGES_MAGIC, &[2, 2, 2]);
        bytes.extend_from_slice(&[0; 5]);
        match parse_idx_images(&bytes, Path::new("t"), None) {
            Err(Error::TruncatedFile { needed, available, .. }) => {
                assert_eq!((needed, available), (24, 21));
            }
            other => panic!("{other:?}"),
        }
        // A limit that fits the available bytes is fine.
        assert_eq!(parse_idx_images(&bytes, Path::new("t"), Some(1)).unwrap().len(), 1);
    }

    #[test]
    fn limit_truncates() {
        let mut bytes = header(IDX_LABELS_MAGIC, &[10_000]);
        bytes.extend((0..10_000).map(|i| (i % 10) as u8));
        assert_eq!(parse_idx_labels(&bytes, Path::new("t"), Some(100)).unwrap().len(), 100);
    }

    #[test]
    fn load_checks_counts() {
        let dir = tempfile::tempdir().unwrap();
        let images: Vec<Image> = (0..3).map(|k| Image::gray(2, 2, vec![k as f64 / 3.0; 4]).unwrap()).collect();
        let (img, _) = encode_idx(&images, &[0, 1, 2]).unwrap();
        let (_, lbl) = encode_idx(&images[..2], &[0, 1]).unwrap();
        let (ip, lp) = (dir.path().join("i"), dir.path().join("l"));
        fs::write(&ip, img).unwrap();
        fs::write(&lp, lbl).unwrap();
        assert!(matches!(load_idx(&ip, &lp, None), Err(Error::LabelImageCountMismatch { images: 3, labels: 2 })));
        let ds = load_idx(&ip, &lp, Some(2)).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.labels(), &[0, 1]);
    }

    #[test]
    fn synthetic_is_seeded_and_valid() {
        let a = synthetic_digits(20, 14, 14, 3).unwrap();
        let b = synthetic_digits(20, 14, 14, 3).unwrap();
        let c = synthetic_digits(20, 14, 14, 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.images(), c.images());
        assert_eq!(a.labels()[..10], [0, 1, 2, 3, 4, 5, 6, 7, 8, 9]);
        for im in a.images() {
            assert!(im.pixels().iter().all(|&p| (0.0..=1.0).contains(&p)));
            assert!(im.channel_l1(0) > 5.0);
        }
        // Distinct classes render differently.
        assert!(a.images()[1].l2_distance(&a.images()[8]).unwrap() > 1.0);
    }

    #[test]
    fn report_round_trip_and_stable_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.json");
        let mut r = Report::new();
        r.meta("seed", 7).meta("command", "attack");
        r.curve("accuracy", &[(10.0, 0.5), (20.0, 0.25)]);
        write_report(&r, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.contains("\"schema_version\": \"1\""));
        assert_eq!(read_report(&path).unwrap(), r);
        write_report(&r, &path).unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), text);
        let accuracy = &read_report(&path).unwrap().tables["accuracy"];
        assert_eq!(accuracy, &serde_json::json!([[10.0, 0.5], [20.0, 0.25]]));
    }

    #[test]
    fn empty_report_is_valid() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.json");
        write_report(&Report::new(), &path).unwrap();
        let back = read_report(&path).unwrap();
        assert!(back.tables.is_empty());
    }

    #[test]
    fn floats_keep_six_significant_digits() {
        assert_eq!(round_significant(0.123456789), 0.123457);
        assert_eq!(round_significant(123456.789), 123457.0);
        assert_eq!(round_significant(-2.0e-7 / 3.0), -6.66667e-8);
        let mut r = Report::new();
        r.meta("x", 1.0 / 3.0);
        assert!(r.to_pretty_string().unwrap().contains("0.333333"));
    }

    #[test]
    fn keys_are_sorted() {
        let mut r = Report::new();
        r.meta("zeta", 1).meta("alpha", 2);
        let s = r.to_pretty_string().unwrap();
        assert!(s.find("alpha").unwrap() < s.find("zeta").unwrap());
        assert!(s.find("config").unwrap() < s.find("metadata").unwrap());
    }
}
