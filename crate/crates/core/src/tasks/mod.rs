//! Episode generators and meta-losses for the two experiments, plus
//! image-dataset ingestion.

pub mod character;
pub mod cue;
pub mod dataset;
pub mod synthetic;

pub use character::{generate_character_episode, CharEpisode, CharacterEpisodeSpec};
pub use cue::{
    build_cue_episode, generate_cue_trial, meta_loss_bce, sample_permutation, CueEpisode,
    CueEpisodeSpec, CueTrial, Side,
};
pub use dataset::{
    augment_rotations, load_dataset_manifest, load_image, split_train_test, DatasetIndex,
    Rotation,
};

/// Spike raster dump: one `step,neuron,spike` row per firing event.
pub fn raster_to_csv(raster: &[f64], n_neurons: usize) -> String {
    let mut out = String::from("step,neuron,spike\n");
    for (t, row) in raster.chunks(n_neurons).enumerate() {
        for (i, &s) in row.iter().enumerate() {
            if s != 0.0 {
                out.push_str(&format!("{t},{i},1\n"));
            }
        }
    }
    out
}
