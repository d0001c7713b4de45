//! Outer-loop meta-training: sample an episode batch, average the
//! meta-gradient, update the parameters, stream metrics, checkpoint.
//!
//! Determinism: every episode is seeded by (master seed, tag, update,
//! episode index); workers produce an index-ordered vector and the
//! gradient reduction folds it sequentially, so the result is bit-identical
//! for every worker count.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::harness::checkpoint::Checkpoint;
use crate::harness::config::{TaskKind, TrainConfig};
use crate::harness::metrics::MetricsRecord;
use crate::harness::optimizer::{outer_update, OptimizerState};
use crate::harness::params::{init_params, project_params, NamedArrays, ParamSet};
use crate::harness::run::{run_episode, EpisodeData, EpisodeOutcome, RunMode};
use crate::harness::seeds::{mix, mix2, Tag};
use crate::tasks::synthetic::write_synthetic_dataset;
use crate::tasks::{
    augment_rotations, build_cue_episode, generate_character_episode, load_dataset_manifest,
    split_train_test, DatasetIndex,
};

/// Seed for the synthetic corpus itself: a fixed constant, so the corpus is
/// a stable artifact shared by runs with different master seeds. The
/// train/test split still depends on the master seed.
const SYNTH_CORPUS_SEED: u64 = 0xD474;

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<MetricsRecord>,
    pub stopped_early: bool,
}

/// Train/test class splits for the character task.
pub struct CharDataset {
    pub train: DatasetIndex,
    pub test: DatasetIndex,
}

/// Resolve the character dataset: load the configured manifest, or generate
/// the synthetic corpus under `workdir` when none is configured. Augment and
/// split at class level.
pub fn prepare_character_dataset(cfg: &TrainConfig, workdir: &Path) -> Result<CharDataset> {
    let manifest: PathBuf = if cfg.character.manifest.is_empty() {
        let dir = workdir.join(format!(
            "synthetic-{}x{}",
            cfg.character.synthetic_classes, cfg.character.synthetic_samples
        ));
        let manifest = dir.join("manifest.txt");
        if !manifest.exists() {
            write_synthetic_dataset(
                &dir,
                cfg.character.synthetic_classes,
                cfg.character.synthetic_samples,
                SYNTH_CORPUS_SEED,
            )?;
        }
        manifest
    } else {
        PathBuf::from(&cfg.character.manifest)
    };
    let mut idx = load_dataset_manifest(&manifest)?;
    if cfg.character.augment {
        idx = augment_rotations(&idx);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, Tag::Split as u64, 0));
    let (train, test) = split_train_test(&idx, cfg.character.test_frac, &mut rng)?;
    Ok(CharDataset { train, test })
}

/// Generate the episode for one (tag, update, index) slot.
pub fn make_episode(
    cfg: &TrainConfig,
    dataset: Option<&DatasetIndex>,
    tag: Tag,
    update: u64,
    idx: u64,
) -> Result<EpisodeData> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix2(cfg.seed, tag as u64, update, idx));
    match cfg.task {
        TaskKind::Cue => Ok(EpisodeData::Cue(build_cue_episode(&cfg.cue, &mut rng)?)),
        TaskKind::Character => {
            let ds = dataset.ok_or_else(|| {
                Error::Config("character task needs a prepared dataset".into())
            })?;
            Ok(EpisodeData::Char(generate_character_episode(ds, &cfg.character.episode, &mut rng)?))
        }
    }
}

fn run_batch(
    params: &ParamSet,
    cfg: &TrainConfig,
    dataset: Option<&DatasetIndex>,
    tag: Tag,
    update: u64,
    n: usize,
    mode: RunMode,
) -> Result<Vec<EpisodeOutcome>> {
    let results: Vec<Result<EpisodeOutcome>> = (0..n as u64)
        .into_par_iter()
        .map(|idx| {
            let ep = make_episode(cfg, dataset, tag, update, idx)?;
            run_episode(params, cfg, &ep, mode)
        })
        .collect();
    results.into_iter().collect()
}

/// Mean gradient over the batch, folded in episode order.
fn merge_grads(params: &ParamSet, outcomes: &[EpisodeOutcome]) -> Result<NamedArrays> {
    let n = outcomes.len() as f64;
    let mut merged: NamedArrays = params
        .entries
        .iter()
        .map(|(k, v)| (k.clone(), vec![0.0; v.len()]))
        .collect();
    for out in outcomes {
        let grads = out
            .grads
            .as_ref()
            .ok_or_else(|| Error::MissingGradient("episode ran without gradients".into()))?;
        for (name, sum) in merged.iter_mut() {
            let g = &grads[name];
            for (s, gv) in sum.iter_mut().zip(g) {
                *s += gv;
            }
        }
    }
    for sum in merged.values_mut() {
        for s in sum.iter_mut() {
            *s /= n;
        }
    }
    Ok(merged)
}

fn grad_norm(grads: &NamedArrays) -> f64 {
    grads
        .values()
        .map(|v| v.iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

fn in_pool<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> T {
    if threads == 0 {
        f()
    } else {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .expect("thread pool")
            .install(f)
    }
}

pub fn train(
    cfg: &TrainConfig,
    resume: Option<&Checkpoint>,
    on_record: &mut (dyn FnMut(&MetricsRecord) + Send),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let workdir: PathBuf = if cfg.out_dir.is_empty() {
        std::env::temp_dir().join("snn-data")
    } else {
        PathBuf::from(&cfg.out_dir)
    };
    let dataset = match cfg.task {
        TaskKind::Character => Some(prepare_character_dataset(cfg, &workdir)?),
        TaskKind::Cue => None,
    };
    let train_idx = dataset.as_ref().map(|d| &d.train);
    let test_idx = dataset.as_ref().map(|d| &d.test);

    let (mut params, mut opt, start_update) = match resume {
        Some(ck) => (ck.params()?, ck.optimizer_state(), ck.update),
        None => (init_params(cfg)?, OptimizerState::default(), 0),
    };

    let mut metrics = Vec::new();
    let mut stopped_early = false;

    in_pool(cfg.threads, || -> Result<()> {
        for update in start_update..cfg.updates {
            let t0 = Instant::now();
            let outcomes = run_batch(
                &params,
                cfg,
                train_idx,
                Tag::TrainEpisode,
                update,
                cfg.batch_episodes,
                RunMode::TrainGrad,
            )?;
            let mean_loss: f64 =
                outcomes.iter().map(|o| o.loss).sum::<f64>() / outcomes.len() as f64;
            let accuracy: f64 = outcomes.iter().filter(|o| o.correct).count() as f64
                / outcomes.len() as f64;
            if !mean_loss.is_finite() {
                return Err(Error::Numeric(format!("loss went non-finite at update {update}")));
            }
            let grads = merge_grads(&params, &outcomes)?;
            let gnorm = grad_norm(&grads);
            if !gnorm.is_finite() {
                return Err(Error::Numeric(format!(
                    "gradient went non-finite at update {update}"
                )));
            }
            outer_update(&mut params, &grads, &cfg.optimizer, &mut opt)?;
            project_params(&mut params, cfg)?;

            let rec = MetricsRecord {
                update,
                mean_meta_loss: mean_loss,
                test_accuracy: accuracy,
                wall_time_s: t0.elapsed().as_secs_f64(),
                grad_norm: gnorm,
            };
            on_record(&rec);
            metrics.push(rec);

            let done = update + 1;
            if !cfg.out_dir.is_empty()
                && cfg.checkpoint_every > 0
                && done % cfg.checkpoint_every == 0
            {
                let ck = Checkpoint::assemble(cfg, done, &params, &opt);
                std::fs::create_dir_all(&workdir)?;
                ck.save(&workdir.join(format!("ckpt_{done:06}.ckpt")))?;
            }

            if cfg.stopping.eval_every > 0
                && cfg.stopping.stop_accuracy > 0.0
                && done % cfg.stopping.eval_every == 0
            {
                let eval = eval_inner(
                    &params,
                    cfg,
                    test_idx,
                    cfg.stopping.eval_episodes,
                    done,
                )?;
                if eval.accuracy >= cfg.stopping.stop_accuracy {
                    stopped_early = true;
                    break;
                }
            }
        }
        Ok(())
    })?;

    let final_update = if stopped_early {
        metrics.last().map(|r| r.update + 1).unwrap_or(start_update)
    } else {
        cfg.updates
    };
    let checkpoint = Checkpoint::assemble(cfg, final_update, &params, &opt);
    if !cfg.out_dir.is_empty() {
        std::fs::create_dir_all(&workdir)?;
        checkpoint.save(&workdir.join("final.ckpt"))?;
    }
    Ok(TrainOutcome { checkpoint, metrics, stopped_early })
}

#[derive(Debug, Clone, Copy)]
pub struct EvalResult {
    pub accuracy: f64,
    /// 95% binomial confidence half-width (normal approximation).
    pub ci_halfwidth: f64,
    pub n_episodes: usize,
    pub mean_loss: f64,
}

pub(crate) fn eval_inner(
    params: &ParamSet,
    cfg: &TrainConfig,
    dataset: Option<&DatasetIndex>,
    n_episodes: usize,
    stream: u64,
) -> Result<EvalResult> {
    if n_episodes == 0 {
        return Err(Error::InvalidArg("evaluation needs at least one episode".into()));
    }
    let outcomes = run_batch(
        params,
        cfg,
        dataset,
        Tag::EvalEpisode,
        stream,
        n_episodes,
        RunMode::Eval,
    )?;
    let correct = outcomes.iter().filter(|o| o.correct).count();
    let accuracy = correct as f64 / n_episodes as f64;
    let mean_loss = outcomes.iter().map(|o| o.loss).sum::<f64>() / n_episodes as f64;
    let ci = 1.96 * (accuracy * (1.0 - accuracy) / n_episodes as f64).sqrt();
    Ok(EvalResult { accuracy, ci_halfwidth: ci, n_episodes, mean_loss })
}

/// Evaluate a parameter set on fresh episodes. For the character task the
/// provided index (normally the held-out class split) supplies the classes.
pub fn evaluate(
    params: &ParamSet,
    cfg: &TrainConfig,
    dataset: Option<&DatasetIndex>,
    n_episodes: usize,
    stream: u64,
) -> Result<EvalResult> {
    if cfg.task == TaskKind::Character && dataset.is_none() {
        return Err(Error::Config("character evaluation needs a dataset index".into()));
    }
    in_pool(cfg.threads, || eval_inner(params, cfg, dataset, n_episodes, stream))
}

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub n_cues: usize,
    pub accuracy: f64,
    pub ci_halfwidth: f64,
    pub n_episodes: usize,
}

/// Evaluate one checkpointed parameter set across cue counts.
pub fn sweep_cues(
    params: &ParamSet,
    cfg: &TrainConfig,
    m_min: usize,
    m_max: usize,
    episodes_per_m: usize,
) -> Result<Vec<SweepRow>> {
    if cfg.task != TaskKind::Cue {
        return Err(Error::Config("cue sweep requires a cue-task config".into()));
    }
    if m_min == 0 || m_min > m_max {
        return Err(Error::InvalidArg("cue sweep range must satisfy 1 <= m_min <= m_max".into()));
    }
    let mut rows = Vec::new();
    for m in m_min..=m_max {
        let mut mcfg = cfg.clone();
        mcfg.cue.n_cues = m;
        mcfg.validate()?;
        let r = evaluate(params, &mcfg, None, episodes_per_m, 1_000_000 + m as u64)?;
        rows.push(SweepRow {
            n_cues: m,
            accuracy: r.accuracy,
            ci_halfwidth: r.ci_halfwidth,
            n_episodes: r.n_episodes,
        });
    }
    Ok(rows)
}

pub fn sweep_to_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("n_cues,accuracy,ci95_halfwidth,episodes\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.n_cues, r.accuracy, r.ci_halfwidth, r.n_episodes
        ));
    }
    out
}
