//! Sequential one-shot character-class recognition episodes.
//!
//! One phase-1 image (20 ms) then five phase-2 images (20 ms each), exactly
//! one of which shares the phase-1 class, placed in a uniformly random slot.
//! Modulation is enabled only during the phase-1 window; the loss is a
//! softmax cross entropy over the five per-slot match scores.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::tasks::dataset::{load_image, rotate_image, DatasetIndex};

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct CharacterEpisodeSpec {
    /// Presentation window per image, in 1 ms steps.
    pub present_ms: usize,
    /// Number of phase-2 images.
    pub n_phase2: usize,
}

impl Default for CharacterEpisodeSpec {
    fn default() -> Self {
        CharacterEpisodeSpec { present_ms: 20, n_phase2: 5 }
    }
}

impl CharacterEpisodeSpec {
    pub fn total_steps(&self) -> usize {
        (1 + self.n_phase2) * self.present_ms
    }

    /// Step range of the phase-1 presentation (modulation window).
    pub fn phase1_window(&self) -> (usize, usize) {
        (0, self.present_ms)
    }

    /// Step range of phase-2 slot k.
    pub fn slot_window(&self, k: usize) -> (usize, usize) {
        let start = (1 + k) * self.present_ms;
        (start, start + self.present_ms)
    }
}

/// A materialized episode: pixel data for all images plus the answer key.
#[derive(Debug, Clone)]
pub struct CharEpisode {
    /// Phase-1 image followed by the phase-2 images, each 784 values in [0,1].
    pub images: Vec<Vec<f64>>,
    /// Which phase-2 slot carries the phase-1 class.
    pub match_slot: usize,
    pub class_ids: Vec<String>,
    pub spec: CharacterEpisodeSpec,
}

/// Sample one episode from the index. Classes are drawn uniformly; the
/// matching phase-2 image is a different sample of the phase-1 class when
/// the class has more than one.
pub fn generate_character_episode(
    idx: &DatasetIndex,
    spec: &CharacterEpisodeSpec,
    rng: &mut impl Rng,
) -> Result<CharEpisode> {
    let needed = spec.n_phase2; // phase-1 class plus n_phase2 - 1 distractors
    if idx.classes.len() < needed {
        return Err(Error::Data(format!(
            "character episodes need at least {} classes, index has {}",
            needed,
            idx.classes.len()
        )));
    }
    let mut order: Vec<usize> = (0..idx.classes.len()).collect();
    order.shuffle(rng);
    let target_class = order[0];
    let distractors = &order[1..spec.n_phase2];

    let load = |class_idx: usize, avoid: Option<usize>, rng: &mut dyn rand::RngCore| -> Result<(Vec<f64>, usize)> {
        let entry = &idx.classes[class_idx];
        let n = entry.images.len();
        let mut pick = rng.gen_range(0..n);
        if let Some(a) = avoid {
            if n > 1 {
                while pick == a {
                    pick = rng.gen_range(0..n);
                }
            }
        }
        let img = load_image(&entry.images[pick])?;
        Ok((rotate_image(&img, entry.rotation), pick))
    };

    let (phase1, phase1_sample) = load(target_class, None, rng)?;
    let (match_img, _) = load(target_class, Some(phase1_sample), rng)?;

    let match_slot = rng.gen_range(0..spec.n_phase2);
    let mut images = vec![phase1];
    let mut class_ids = vec![idx.classes[target_class].class_id.clone()];
    let mut d = 0;
    for slot in 0..spec.n_phase2 {
        if slot == match_slot {
            images.push(match_img.clone());
            class_ids.push(idx.classes[target_class].class_id.clone());
        } else {
            let (img, _) = load(distractors[d], None, rng)?;
            images.push(img);
            class_ids.push(idx.classes[distractors[d]].class_id.clone());
            d += 1;
        }
    }
    Ok(CharEpisode { images, match_slot, class_ids, spec: *spec })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::dataset::{load_dataset_manifest, write_pgm};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::fs;
    use std::path::Path;

    fn fixture(dir: &Path, classes: usize) -> DatasetIndex {
        let mut lines = String::new();
        for c in 0..classes {
            for s in 0..3 {
                let name = format!("g{c}_{s}.pgm");
                let pixels: Vec<u8> =
                    (0..784).map(|k| (255 - ((k * (c + 3) + s * 17) % 200)) as u8).collect();
                write_pgm(&dir.join(&name), &pixels, 28, 28).unwrap();
                lines.push_str(&format!("glyph{c} {name}\n"));
            }
        }
        fs::write(dir.join("manifest.txt"), lines).unwrap();
        load_dataset_manifest(&dir.join("manifest.txt")).unwrap()
    }

    #[test]
    fn episode_timing_is_120_steps() {
        let spec = CharacterEpisodeSpec::default();
        assert_eq!(spec.total_steps(), 120);
        assert_eq!(spec.phase1_window(), (0, 20));
        assert_eq!(spec.slot_window(0), (20, 40));
        assert_eq!(spec.slot_window(4), (100, 120));
    }

    #[test]
    fn exactly_one_matching_slot() {
        let dir = tempfile::tempdir().unwrap();
        let idx = fixture(dir.path(), 8);
        let spec = CharacterEpisodeSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let ep = generate_character_episode(&idx, &spec, &mut rng).unwrap();
            let target = &ep.class_ids[0];
            let matches: Vec<usize> = (0..spec.n_phase2)
                .filter(|&k| &ep.class_ids[1 + k] == target)
                .collect();
            assert_eq!(matches, vec![ep.match_slot]);
            assert_eq!(ep.images.len(), 6);
            assert!(ep.images.iter().all(|img| img.len() == 784));
        }
    }

    #[test]
    fn match_slot_is_roughly_uniform() {
        let dir = tempfile::tempdir().unwrap();
        let idx = fixture(dir.path(), 8);
        let spec = CharacterEpisodeSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut counts = [0usize; 5];
        for _ in 0..1000 {
            let ep = generate_character_episode(&idx, &spec, &mut rng).unwrap();
            counts[ep.match_slot] += 1;
        }
        for &c in &counts {
            // binomial(1000, 0.2): 99.9% within about ±45
            assert!((140..=260).contains(&c), "slot counts {counts:?}");
        }
    }

    #[test]
    fn insufficient_classes_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let idx = fixture(dir.path(), 4);
        let spec = CharacterEpisodeSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(generate_character_episode(&idx, &spec, &mut rng).is_err());
    }

    #[test]
    fn generation_is_deterministic_in_the_seed() {
        let dir = tempfile::tempdir().unwrap();
        let idx = fixture(dir.path(), 10);
        let spec = CharacterEpisodeSpec::default();
        let a = generate_character_episode(&idx, &spec, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = generate_character_episode(&idx, &spec, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a.match_slot, b.match_slot);
        assert_eq!(a.class_ids, b.class_ids);
        assert_eq!(a.images, b.images);
    }
}
