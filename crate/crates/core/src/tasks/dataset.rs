//! Character dataset ingestion: a plain-text manifest over 8-bit grayscale
//! PGM (P5) images, rotation augmentation, and class-level train/test splits.
//!
//! Manifest format: one image per line, `class-id <whitespace> relative-path`.
//! Blank lines and lines starting with `#` are skipped. Images are normalized
//! to 28x28 grayscale in [0, 1] by bilinear resize, inverted so ink is bright
//! and the white background maps to zero.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};

pub const IMAGE_SIDE: usize = 28;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Rotation {
    R0,
    R90,
    R180,
    R270,
}

impl Rotation {
    pub const ALL: [Rotation; 4] = [Rotation::R0, Rotation::R90, Rotation::R180, Rotation::R270];

    pub fn suffix(self) -> &'static str {
        match self {
            Rotation::R0 => "",
            Rotation::R90 => ".rot90",
            Rotation::R180 => ".rot180",
            Rotation::R270 => ".rot270",
        }
    }
}

#[derive(Debug, Clone)]
pub struct ClassEntry {
    pub class_id: String,
    pub rotation: Rotation,
    pub images: Vec<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitTag {
    All,
    Train,
    Test,
}

#[derive(Debug, Clone)]
pub struct DatasetIndex {
    pub classes: Vec<ClassEntry>,
    pub split_tag: SplitTag,
}

impl DatasetIndex {
    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }
}

/// Parse the manifest and verify every referenced image exists and carries a
/// decodable 8-bit P5 header. Pixels are read lazily by `load_image`.
pub fn load_dataset_manifest(path: &Path) -> Result<DatasetIndex> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read manifest {}: {e}", path.display())))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut classes: Vec<ClassEntry> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        let class_id = parts.next();
        let rel = parts.next();
        let (class_id, rel) = match (class_id, rel) {
            (Some(c), Some(r)) => (c, r),
            _ => {
                return Err(Error::Data(format!(
                    "malformed manifest {} line {}: expected `class-id path`",
                    path.display(),
                    lineno + 1
                )))
            }
        };
        let img_path = base.join(rel);
        validate_pgm_header(&img_path)?;
        match classes.iter_mut().find(|c| c.class_id == class_id) {
            Some(entry) => entry.images.push(img_path),
            None => classes.push(ClassEntry {
                class_id: class_id.to_string(),
                rotation: Rotation::R0,
                images: vec![img_path],
            }),
        }
    }
    if classes.is_empty() {
        return Err(Error::Data(format!("manifest {} lists no images", path.display())));
    }
    Ok(DatasetIndex { classes, split_tag: SplitTag::All })
}

fn validate_pgm_header(path: &Path) -> Result<()> {
    let bytes = fs::read(path)
        .map_err(|e| Error::Data(format!("missing image file {}: {e}", path.display())))?;
    let (w, h, maxval, offset) = parse_pgm_header(&bytes)
        .map_err(|msg| Error::Data(format!("undecodable image {}: {msg}", path.display())))?;
    if maxval > 255 {
        return Err(Error::Data(format!(
            "undecodable image {}: {} bits per pixel exceed 8-bit grayscale",
            path.display(),
            if maxval > 255 { 16 } else { 8 }
        )));
    }
    if bytes.len() < offset + w * h {
        return Err(Error::Data(format!(
            "undecodable image {}: truncated pixel data",
            path.display()
        )));
    }
    Ok(())
}

/// Returns (width, height, maxval, pixel offset).
fn parse_pgm_header(bytes: &[u8]) -> std::result::Result<(usize, usize, usize, usize), String> {
    if bytes.len() < 2 || &bytes[0..2] != b"P5" {
        return Err("not a binary PGM (P5) file".into());
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // skip whitespace and comments
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err("malformed header field".into());
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .unwrap()
            .parse()
            .map_err(|_| "numeric header field out of range".to_string())?;
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err("missing delimiter after maxval".into());
    }
    pos += 1;
    Ok((fields[0], fields[1], fields[2], pos))
}

/// Decode, resize to 28x28 with bilinear interpolation, invert, normalize.
pub fn load_image(path: &Path) -> Result<Vec<f64>> {
    let bytes = fs::read(path)
        .map_err(|e| Error::Data(format!("missing image file {}: {e}", path.display())))?;
    let (w, h, maxval, offset) = parse_pgm_header(&bytes)
        .map_err(|msg| Error::Data(format!("undecodable image {}: {msg}", path.display())))?;
    if maxval == 0 || maxval > 255 || bytes.len() < offset + w * h || w == 0 || h == 0 {
        return Err(Error::Data(format!(
            "undecodable image {}: bad dimensions or bit depth",
            path.display()
        )));
    }
    let pixels = &bytes[offset..offset + w * h];
    let mut out = vec![0.0; IMAGE_SIDE * IMAGE_SIDE];
    let sx = w as f64 / IMAGE_SIDE as f64;
    let sy = h as f64 / IMAGE_SIDE as f64;
    for oy in 0..IMAGE_SIDE {
        for ox in 0..IMAGE_SIDE {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
            let x0 = fx.floor() as usize;
            let y0 = fy.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let y1 = (y0 + 1).min(h - 1);
            let (dx, dy) = (fx - x0 as f64, fy - y0 as f64);
            let p = |x: usize, y: usize| pixels[y * w + x] as f64 / maxval as f64;
            let v = p(x0, y0) * (1.0 - dx) * (1.0 - dy)
                + p(x1, y0) * dx * (1.0 - dy)
                + p(x0, y1) * (1.0 - dx) * dy
                + p(x1, y1) * dx * dy;
            // ink is dark in the source; invert so background is 0
            out[oy * IMAGE_SIDE + ox] = 1.0 - v;
        }
    }
    Ok(out)
}

/// Rotate a 28x28 image counter-clockwise by the given quarter turns.
pub fn rotate_image(img: &[f64], rot: Rotation) -> Vec<f64> {
    let n = IMAGE_SIDE;
    let mut out = vec![0.0; n * n];
    for y in 0..n {
        for x in 0..n {
            let (sx, sy) = match rot {
                Rotation::R0 => (x, y),
                Rotation::R90 => (n - 1 - y, x),
                Rotation::R180 => (n - 1 - x, n - 1 - y),
                Rotation::R270 => (y, n - 1 - x),
            };
            out[y * n + x] = img[sy * n + sx];
        }
    }
    out
}

/// Four-fold class expansion: every class reappears under 90/180/270 degree
/// rotation with the rotation encoded in the class id.
pub fn augment_rotations(idx: &DatasetIndex) -> DatasetIndex {
    let mut classes = Vec::with_capacity(idx.classes.len() * 4);
    for rot in Rotation::ALL {
        for entry in &idx.classes {
            classes.push(ClassEntry {
                class_id: format!("{}{}", entry.class_id, rot.suffix()),
                rotation: rot,
                images: entry.images.clone(),
            });
        }
    }
    DatasetIndex { classes, split_tag: idx.split_tag }
}

/// Class-level split: no class appears on both sides. The test side gets
/// floor(n * test_frac) classes; membership is drawn by seeded shuffle.
pub fn split_train_test(
    idx: &DatasetIndex,
    test_frac: f64,
    rng: &mut impl Rng,
) -> Result<(DatasetIndex, DatasetIndex)> {
    if !(0.0 < test_frac && test_frac < 1.0) {
        return Err(Error::InvalidArg("test fraction must lie in (0, 1)".into()));
    }
    let n = idx.classes.len();
    let n_test = (n as f64 * test_frac).floor() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut is_test = vec![false; n];
    for &k in order.iter().take(n_test) {
        is_test[k] = true;
    }
    let pick = |test: bool| -> Vec<ClassEntry> {
        idx.classes
            .iter()
            .enumerate()
            .filter(|(k, _)| is_test[*k] == test)
            .map(|(_, c)| c.clone())
            .collect()
    };
    Ok((
        DatasetIndex { classes: pick(false), split_tag: SplitTag::Train },
        DatasetIndex { classes: pick(true), split_tag: SplitTag::Test },
    ))
}

/// Canonical 8-bit P5 writer used by the synthetic corpus and tests.
pub fn write_pgm(path: &Path, pixels: &[u8], w: usize, h: usize) -> Result<()> {
    if pixels.len() != w * h {
        return Err(Error::InvalidArg("pgm pixel buffer does not match dimensions".into()));
    }
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend_from_slice(pixels);
    fs::write(path, bytes)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::io::Write;

    fn fixture(dir: &Path, classes: usize, per_class: usize) -> PathBuf {
        let manifest = dir.join("manifest.txt");
        let mut lines = String::new();
        for c in 0..classes {
            for s in 0..per_class {
                let name = format!("img_{c}_{s}.pgm");
                let pixels: Vec<u8> = (0..28 * 28)
                    .map(|k| ((k * (c + 1) * (s + 2)) % 256) as u8)
                    .collect();
                write_pgm(&dir.join(&name), &pixels, 28, 28).unwrap();
                lines.push_str(&format!("class{c} {name}\n"));
            }
        }
        fs::write(&manifest, lines).unwrap();
        manifest
    }

    #[test]
    fn small_manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = fixture(dir.path(), 2, 2);
        let idx = load_dataset_manifest(&manifest).unwrap();
        assert_eq!(idx.n_classes(), 2);
        assert!(idx.classes.iter().all(|c| c.images.len() == 2));
    }

    #[test]
    fn sixteen_bit_image_rejected_naming_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let bad = dir.path().join("deep.pgm");
        let mut bytes = b"P5\n2 2\n65535\n".to_vec();
        bytes.extend_from_slice(&[0u8; 8]);
        fs::write(&bad, bytes).unwrap();
        fs::write(dir.path().join("manifest.txt"), "c0 deep.pgm\n").unwrap();
        let err = load_dataset_manifest(&dir.path().join("manifest.txt")).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("deep.pgm"), "error should name the file: {msg}");
    }

    #[test]
    fn missing_image_rejected() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("manifest.txt"), "c0 ghost.pgm\n").unwrap();
        assert!(load_dataset_manifest(&dir.path().join("manifest.txt")).is_err());
    }

    #[test]
    fn malformed_line_rejected_with_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let mut f = fs::File::create(dir.path().join("manifest.txt")).unwrap();
        writeln!(f, "onlyoneield").unwrap();
        drop(f);
        let err = load_dataset_manifest(&dir.path().join("manifest.txt")).unwrap_err();
        assert!(err.to_string().contains("line 1"));
    }

    #[test]
    fn rotations_quadruple_the_classes() {
        let dir = tempfile::tempdir().unwrap();
        let idx = load_dataset_manifest(&fixture(dir.path(), 3, 1)).unwrap();
        let aug = augment_rotations(&idx);
        assert_eq!(aug.n_classes(), 12);
        let idx1 = load_dataset_manifest(&fixture(dir.path(), 1, 1)).unwrap();
        assert_eq!(augment_rotations(&idx1).n_classes(), 4);
    }

    #[test]
    fn rotating_twice_by_180_is_identity() {
        let img: Vec<f64> = (0..784).map(|k| (k % 97) as f64 / 96.0).collect();
        let twice = rotate_image(&rotate_image(&img, Rotation::R180), Rotation::R180);
        assert_eq!(img, twice);
    }

    #[test]
    fn quarter_turns_compose_to_identity() {
        let img: Vec<f64> = (0..784).map(|k| ((k * 31) % 113) as f64 / 112.0).collect();
        let mut r = img.clone();
        for _ in 0..4 {
            r = rotate_image(&r, Rotation::R90);
        }
        assert_eq!(img, r);
    }

    #[test]
    fn split_partitions_classes() {
        let dir = tempfile::tempdir().unwrap();
        let idx = load_dataset_manifest(&fixture(dir.path(), 10, 1)).unwrap();
        let (train, test) = split_train_test(&idx, 0.2, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(test.n_classes(), 2);
        assert_eq!(train.n_classes(), 8);
        let mut all: Vec<String> = train
            .classes
            .iter()
            .chain(&test.classes)
            .map(|c| c.class_id.clone())
            .collect();
        all.sort();
        let mut orig: Vec<String> = idx.classes.iter().map(|c| c.class_id.clone()).collect();
        orig.sort();
        assert_eq!(all, orig);
        // deterministic under the seed
        let (train2, _) = split_train_test(&idx, 0.2, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let ids1: Vec<&str> = train.classes.iter().map(|c| c.class_id.as_str()).collect();
        let ids2: Vec<&str> = train2.classes.iter().map(|c| c.class_id.as_str()).collect();
        assert_eq!(ids1, ids2);
    }

    #[test]
    fn split_rounding_uses_floor_for_test() {
        // 6492 classes at 0.2 must give 1298 test / 5194 train
        assert_eq!((6492f64 * 0.2).floor() as usize, 1298);
        assert_eq!(6492 - 1298, 5194);
    }

    #[test]
    fn loaded_image_is_inverted_and_normalized() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("white.pgm");
        write_pgm(&path, &vec![255u8; 28 * 28], 28, 28).unwrap();
        let img = load_image(&path).unwrap();
        assert_eq!(img.len(), 784);
        assert!(img.iter().all(|&v| v.abs() < 1e-12), "white must map to 0");
        let path2 = dir.path().join("black.pgm");
        write_pgm(&path2, &vec![0u8; 28 * 28], 28, 28).unwrap();
        let img2 = load_image(&path2).unwrap();
        assert!(img2.iter().all(|&v| (v - 1.0).abs() < 1e-12), "ink must map to 1");
    }

    #[test]
    fn bilinear_resize_handles_other_sizes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("big.pgm");
        // 105x105 like the real character scans
        let pixels: Vec<u8> = (0..105 * 105).map(|k| (k % 256) as u8).collect();
        write_pgm(&path, &pixels, 105, 105).unwrap();
        let img = load_image(&path).unwrap();
        assert_eq!(img.len(), 784);
        assert!(img.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}
