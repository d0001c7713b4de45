//! Procedural glyph corpus for desk-scale character experiments.
//!
//! Each class is a fixed arrangement of random strokes; samples are small
//! affine jitters of that arrangement. Images go out as 28x28 8-bit PGM with
//! dark ink on white, the same convention as scanned handwriting, so the
//! standard loader path (invert, normalize) applies unchanged.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tasks::dataset::write_pgm;

const SIDE: usize = 28;

#[derive(Clone, Copy)]
struct Stroke {
    // quadratic bezier control points
    p0: (f64, f64),
    p1: (f64, f64),
    p2: (f64, f64),
}

fn random_stroke(rng: &mut impl Rng) -> Stroke {
    let mut pt = |lo: f64, hi: f64| (rng.gen_range(lo..hi), rng.gen_range(lo..hi));
    Stroke { p0: pt(5.0, 23.0), p1: pt(3.0, 25.0), p2: pt(5.0, 23.0) }
}

fn transform(p: (f64, f64), angle: f64, scale: f64, shift: (f64, f64)) -> (f64, f64) {
    let (cx, cy) = (14.0, 14.0);
    let (x, y) = (p.0 - cx, p.1 - cy);
    let (s, c) = angle.sin_cos();
    (
        cx + scale * (c * x - s * y) + shift.0,
        cy + scale * (s * x + c * y) + shift.1,
    )
}

fn render(strokes: &[Stroke], angle: f64, scale: f64, shift: (f64, f64), noise: &mut impl Rng) -> Vec<u8> {
    let mut canvas = vec![255.0f64; SIDE * SIDE];
    let radius = 1.1;
    for st in strokes {
        let p0 = transform(st.p0, angle, scale, shift);
        let p1 = transform(st.p1, angle, scale, shift);
        let p2 = transform(st.p2, angle, scale, shift);
        let steps = 60;
        for k in 0..=steps {
            let t = k as f64 / steps as f64;
            let u = 1.0 - t;
            let x = u * u * p0.0 + 2.0 * u * t * p1.0 + t * t * p2.0;
            let y = u * u * p0.1 + 2.0 * u * t * p1.1 + t * t * p2.1;
            let (x0, x1) = ((x - 2.0).max(0.0) as usize, ((x + 2.0) as usize).min(SIDE - 1));
            let (y0, y1) = ((y - 2.0).max(0.0) as usize, ((y + 2.0) as usize).min(SIDE - 1));
            for py in y0..=y1 {
                for px in x0..=x1 {
                    let d = ((px as f64 - x).powi(2) + (py as f64 - y).powi(2)).sqrt();
                    if d < radius {
                        canvas[py * SIDE + px] = 20.0;
                    } else if d < radius + 1.0 {
                        let blend = (d - radius).clamp(0.0, 1.0);
                        let v = 20.0 + blend * 235.0;
                        if v < canvas[py * SIDE + px] {
                            canvas[py * SIDE + px] = v;
                        }
                    }
                }
            }
        }
    }
    canvas
        .iter()
        .map(|&v| {
            let jitter = noise.gen_range(-6.0..6.0);
            (v + jitter).clamp(0.0, 255.0) as u8
        })
        .collect()
}

/// Write a corpus of `n_classes` glyph classes with `samples_per_class`
/// jittered samples each. Returns the manifest path.
pub fn write_synthetic_dataset(
    dir: &Path,
    n_classes: usize,
    samples_per_class: usize,
    seed: u64,
) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut manifest = String::new();
    for c in 0..n_classes {
        let n_strokes = rng.gen_range(2..=4);
        let strokes: Vec<Stroke> = (0..n_strokes).map(|_| random_stroke(&mut rng)).collect();
        for s in 0..samples_per_class {
            let angle = rng.gen_range(-0.12..0.12);
            let scale = rng.gen_range(0.92..1.08);
            let shift = (rng.gen_range(-1.2..1.2), rng.gen_range(-1.2..1.2));
            let pixels = render(&strokes, angle, scale, shift, &mut rng);
            let name = format!("glyph{c:04}_{s:02}.pgm");
            write_pgm(&dir.join(&name), &pixels, SIDE, SIDE)?;
            manifest.push_str(&format!("glyph{c:04} {name}\n"));
        }
    }
    let manifest_path = dir.join("manifest.txt");
    fs::write(&manifest_path, manifest)?;
    Ok(manifest_path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::dataset::{load_dataset_manifest, load_image};

    #[test]
    fn corpus_round_trips_through_the_loader() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_synthetic_dataset(dir.path(), 6, 3, 42).unwrap();
        let idx = load_dataset_manifest(&manifest).unwrap();
        assert_eq!(idx.n_classes(), 6);
        assert!(idx.classes.iter().all(|c| c.images.len() == 3));
        let img = load_image(&idx.classes[0].images[0]).unwrap();
        assert_eq!(img.len(), 784);
        // ink present and background near zero after inversion
        let ink: f64 = img.iter().cloned().fold(0.0, f64::max);
        assert!(ink > 0.5, "glyph has no ink");
        let background = img.iter().filter(|&&v| v < 0.1).count();
        assert!(background > 400, "background not mostly empty");
    }

    #[test]
    fn same_seed_writes_identical_corpora() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let m1 = write_synthetic_dataset(d1.path(), 3, 2, 7).unwrap();
        let m2 = write_synthetic_dataset(d2.path(), 3, 2, 7).unwrap();
        assert_eq!(fs::read_to_string(&m1).unwrap(), fs::read_to_string(&m2).unwrap());
        let i1 = load_dataset_manifest(&m1).unwrap();
        let i2 = load_dataset_manifest(&m2).unwrap();
        for (a, b) in i1.classes.iter().zip(&i2.classes) {
            for (pa, pb) in a.images.iter().zip(&b.images) {
                assert_eq!(fs::read(pa).unwrap(), fs::read(pb).unwrap());
            }
        }
    }

    #[test]
    fn within_class_samples_overlap_more_than_cross_class() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_synthetic_dataset(dir.path(), 10, 4, 11).unwrap();
        let idx = load_dataset_manifest(&manifest).unwrap();
        let load = |c: usize, s: usize| load_image(&idx.classes[c].images[s]).unwrap();
        let dot = |a: &[f64], b: &[f64]| -> f64 {
            let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb + 1e-12)
        };
        let mut within = 0.0;
        let mut cross = 0.0;
        let mut nw = 0;
        let mut nc = 0;
        for c in 0..10 {
            let a = load(c, 0);
            let b = load(c, 1);
            within += dot(&a, &b);
            nw += 1;
            let other = load((c + 1) % 10, 0);
            cross += dot(&a, &other);
            nc += 1;
        }
        assert!(
            within / nw as f64 > cross / nc as f64 + 0.1,
            "within {within} cross {cross}"
        );
    }
}
