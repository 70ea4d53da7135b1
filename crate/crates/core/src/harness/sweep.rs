//! Missing-modality evaluation over all 15 availability patterns.

use std::fmt::Write as _;
use std::time::Instant;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::harness::config::RunConfig;
use crate::harness::phantom::{generate_phantoms, PhantomSpec};
use crate::harness::{enumerate_scenarios, train_seg_model};
use crate::metadata::{ModalityMask, N_MODALITIES};
use crate::seg::{dice_score, AvailabilityPolicy, SegBatch, SegModel};

pub const SWEEP_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScenarioResult {
    pub flair: bool,
    pub t1c: bool,
    pub t1: bool,
    pub t2: bool,
    pub mean_dice: f64,
    pub n_samples: usize,
    /// Not written to any file, so reruns stay byte-identical.
    #[serde(skip)]
    pub wall_time_s: f64,
}

impl ScenarioResult {
    pub fn availability(&self) -> [bool; N_MODALITIES] {
        [self.flair, self.t1c, self.t1, self.t2]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepReport {
    pub schema_version: u32,
    pub scenarios: Vec<ScenarioResult>,
    pub average_dice: f64,
}

impl SweepReport {
    /// `flair,t1c,t1,t2,dice,n`, one row per scenario and a final row with
    /// `mean` in the availability columns.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("flair,t1c,t1,t2,dice,n\n");
        for r in &self.scenarios {
            let a = r.availability().map(|b| b as u8);
            let _ = writeln!(s, "{},{},{},{},{:.6},{}", a[0], a[1], a[2], a[3], r.mean_dice, r.n_samples);
        }
        let n = self.scenarios.first().map_or(0, |r| r.n_samples);
        let _ = writeln!(s, "mean,mean,mean,mean,{:.6},{n}", self.average_dice);
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report is plain data") + "\n"
    }

    pub fn full_modality(&self) -> Option<&ScenarioResult> {
        self.scenarios.iter().find(|r| r.availability() == [true; N_MODALITIES])
    }
}

/// Mean foreground Dice of `model` over `eval` for one availability pattern.
pub fn evaluate_scenario(model: &SegModel, eval: &[SegBatch], available: [bool; N_MODALITIES]) -> Result<ScenarioResult> {
    if eval.is_empty() {
        return Err(Error::EmptyInput("evaluation set is empty".into()));
    }
    let start = Instant::now();
    let mask = ModalityMask::new(available, model.n_tokens())?;
    let mut total = 0.0;
    for sample in eval {
        let batch = sample.with_availability(mask);
        total += dice_score(&model.predict(&batch)?, &batch.target, 1)?;
    }
    Ok(ScenarioResult {
        flair: available[0],
        t1c: available[1],
        t1: available[2],
        t2: available[3],
        mean_dice: total / eval.len() as f64,
        n_samples: eval.len(),
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}

/// Evaluate every scenario, one thread each; results keep scenario order.
pub fn evaluate_all(models: &[&SegModel], eval: &[SegBatch]) -> Result<Vec<ScenarioResult>> {
    let scenarios = enumerate_scenarios();
    if models.len() != 1 && models.len() != scenarios.len() {
        return Err(Error::config("sweep", "need one model, or one per scenario"));
    }
    std::thread::scope(|s| {
        let handles: Vec<_> = scenarios
            .iter()
            .enumerate()
            .map(|(i, &avail)| {
                let model = models[i.min(models.len() - 1)];
                s.spawn(move || evaluate_scenario(model, eval, avail))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("evaluation thread panicked"))
            .collect()
    })
}

pub fn eval_set(cfg: &RunConfig) -> Result<Vec<SegBatch>> {
    let spec = PhantomSpec {
        n_samples: cfg.seg_data.n_eval,
        seed: cfg.seg_data.eval_seed,
        ..cfg.seg_data.train.clone()
    };
    Ok(generate_phantoms(&spec)?.into_iter().map(|p| p.batch).collect())
}

/// Train (or load) and evaluate. Returns the report and the trained models.
pub fn run_sweep(cfg: &RunConfig) -> Result<(SweepReport, Vec<SegModel>)> {
    cfg.validate()?;
    let eval = eval_set(cfg)?;
    let extent = [cfg.seg_data.train.extent; 3];
    let models = if let Some(path) = &cfg.sweep.checkpoint {
        let mut m = SegModel::new(cfg.seg_model.clone(), extent, cfg.seed)?;
        m.load_weights(path)?;
        vec![m]
    } else if cfg.sweep.per_scenario_training {
        enumerate_scenarios()
            .into_iter()
            .map(|avail| {
                let mut c = cfg.clone();
                c.seg_train.availability = AvailabilityPolicy::AsGiven;
                Ok(train_seg_model(&c, Some(avail))?.0)
            })
            .collect::<Result<Vec<_>>>()?
    } else {
        vec![train_seg_model(cfg, None)?.0]
    };
    let refs: Vec<&SegModel> = models.iter().collect();
    let scenarios = evaluate_all(&refs, &eval)?;
    let average_dice = scenarios.iter().map(|r| r.mean_dice).sum::<f64>() / scenarios.len() as f64;
    Ok((
        SweepReport {
            schema_version: SWEEP_SCHEMA_VERSION,
            scenarios,
            average_dice,
        },
        models,
    ))
}
