//! Experiment plumbing: synthetic data, scenario enumeration, training and
//! evaluation entry points, and the command-line front end.

pub mod cli;
pub mod config;
pub mod phantom;
pub mod sweep;

use serde::Serialize;

use crate::checkpoint;
use crate::error::Result;
use crate::film::{bootstrap_mean_ci, gamma_statistics, permutation_probe, train_classifier, ClsSample, FilmClassifier};
use crate::metadata::{ModalityMask, N_MODALITIES};
use crate::seg::{train_segmentation, SegModel};

use config::RunConfig;
use phantom::{generate_cls_phantoms, generate_phantoms, ClsPhantomSpec};

/// All nonempty subsets of (FLAIR, T1c, T1, T2): singletons, pairs,
/// triples, then the full set, each group in lexicographic order of the
/// modality list.
pub fn enumerate_scenarios() -> Vec<[bool; N_MODALITIES]> {
    let mut out = Vec::with_capacity(15);
    for size in 1..=N_MODALITIES {
        let mut combo: Vec<usize> = (0..size).collect();
        loop {
            let mut avail = [false; N_MODALITIES];
            combo.iter().for_each(|&m| avail[m] = true);
            out.push(avail);
            // next combination in lexicographic order
            let Some(i) = (0..size).rev().find(|&i| combo[i] < N_MODALITIES - size + i) else {
                break;
            };
            combo[i] += 1;
            for j in i + 1..size {
                combo[j] = combo[j - 1] + 1;
            }
        }
    }
    out
}

/// Train a segmentation model on the configured phantoms. With `fixed`,
/// every training sample is presented under that availability pattern.
pub fn train_seg_model(cfg: &RunConfig, fixed: Option<[bool; N_MODALITIES]>) -> Result<(SegModel, Vec<f64>)> {
    let extent = [cfg.seg_data.train.extent; 3];
    let mut model = SegModel::new(cfg.seg_model.clone(), extent, cfg.seed)?;
    let mut data: Vec<_> = generate_phantoms(&cfg.seg_data.train)?.into_iter().map(|p| p.batch).collect();
    if let Some(avail) = fixed {
        let mask = ModalityMask::new(avail, model.n_tokens())?;
        data = data.iter().map(|b| b.with_availability(mask)).collect();
    }
    let losses = train_segmentation(&mut model, &data, &cfg.seg_train, cfg.seed)?;
    Ok((model, losses))
}

pub fn cls_eval_set(cfg: &RunConfig) -> Result<Vec<ClsSample>> {
    generate_cls_phantoms(&ClsPhantomSpec {
        n_samples: cfg.cls_data.n_eval,
        seed: cfg.cls_data.eval_seed,
        ..cfg.cls_data.train.clone()
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClsRun {
    pub train_losses: Vec<f64>,
    pub train_accuracy: f64,
    pub eval_accuracy: f64,
}

pub fn train_cls_model(cfg: &RunConfig) -> Result<(FilmClassifier, ClsRun)> {
    let mut model = FilmClassifier::new(cfg.cls_model.clone(), cfg.seed)?;
    let train = generate_cls_phantoms(&cfg.cls_data.train)?;
    let eval = cls_eval_set(cfg)?;
    let train_losses = train_classifier(&mut model, &train, &cfg.cls_train, cfg.seed)?;
    let run = ClsRun {
        train_accuracy: model.accuracy(&train)?,
        eval_accuracy: model.accuracy(&eval)?,
        train_losses,
    };
    Ok((model, run))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeReport {
    pub accuracy: f64,
    pub shuffled_accuracy: Vec<f64>,
    pub delta_accuracy: f64,
    /// Bootstrap interval for the mean per-trial accuracy drop.
    pub delta_ci: (f64, f64),
    pub confidence: f64,
    /// Mean |gamma| per FiLM stage.
    pub mean_abs_gamma: Vec<f64>,
}

/// Train (or load) the classifier, then measure how much it relies on
/// metadata on the held-out set.
pub fn run_probe(cfg: &RunConfig) -> Result<(FilmClassifier, ProbeReport)> {
    let model = match &cfg.probe.checkpoint {
        Some(path) => {
            let mut m = FilmClassifier::new(cfg.cls_model.clone(), cfg.seed)?;
            m.store.load_from(&checkpoint::load(path)?)?;
            m
        }
        None => train_cls_model(cfg)?.0,
    };
    let eval = cls_eval_set(cfg)?;
    let probe = permutation_probe(&model, &eval, cfg.probe.trials, cfg.seed)?;
    let delta_ci = bootstrap_mean_ci(&probe.drops(), cfg.probe.bootstrap_resamples, cfg.probe.confidence, cfg.seed)?;
    let mean_abs_gamma = if model.n_film_stages() > 0 {
        gamma_statistics(&model, &eval)?
    } else {
        Vec::new()
    };
    let report = ProbeReport {
        accuracy: probe.accuracy,
        delta_accuracy: probe.delta_accuracy,
        shuffled_accuracy: probe.shuffled_accuracy,
        delta_ci,
        confidence: cfg.probe.confidence,
        mean_abs_gamma,
    };
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenario_order_follows_the_results_table() {
        let s = enumerate_scenarios();
        assert_eq!(s.len(), 15);
        assert_eq!(s[0], [true, false, false, false]);
        assert_eq!(s[3], [false, false, false, true]);
        assert_eq!(s[4], [true, true, false, false]);
        assert_eq!(s[9], [false, false, true, true]);
        assert_eq!(s[10], [true, true, true, false]);
        assert_eq!(s[13], [false, true, true, true]);
        assert_eq!(s[14], [true; 4]);
    }

    #[test]
    fn scenarios_are_exactly_the_nonempty_subsets() {
        let mut got: Vec<u8> = enumerate_scenarios()
            .iter()
            .map(|a| a.iter().enumerate().map(|(i, &b)| (b as u8) << i).sum())
            .collect();
        got.sort_unstable();
        assert_eq!(got, (1..16).collect::<Vec<u8>>());
    }
}
