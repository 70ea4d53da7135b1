//! 2-D slice classifier with FiLM conditioning at its deepest stages, and
//! the diagnostics used to show the network relies on metadata.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metadata::{FiLMParams, FilmMlp, MetadataEmbedder, ModalityId, Plane};
use crate::optim::{Adam, AdamConfig};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Smallest accepted image side.
pub const MIN_SIDE: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilmClassifierConfig {
    pub stage_channels: Vec<usize>,
    /// Stages whose output is modulated. Must be the deepest ones.
    pub film_stages: Vec<usize>,
    pub n_classes: usize,
}

impl Default for FilmClassifierConfig {
    fn default() -> Self {
        Self {
            stage_channels: vec![16, 32, 64, 128],
            film_stages: vec![2, 3],
            n_classes: 2,
        }
    }
}

impl FilmClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        let n = self.stage_channels.len();
        if n == 0 || self.stage_channels.contains(&0) {
            return Err(Error::config("cls.stage_channels", "need at least one stage, all widths positive"));
        }
        if self.n_classes < 2 {
            return Err(Error::config("cls.n_classes", "need at least two classes"));
        }
        let mut stages = self.film_stages.clone();
        stages.sort_unstable();
        stages.dedup();
        if stages.len() != self.film_stages.len() {
            return Err(Error::config("cls.film_stages", "duplicate stage index"));
        }
        if let Some(bad) = stages.iter().find(|&&s| s >= n) {
            return Err(Error::config("cls.film_stages", format!("stage {bad} of a {n}-stage network")));
        }
        let deepest: Vec<usize> = (n - stages.len()..n).collect();
        if stages != deepest {
            return Err(Error::config(
                "cls.film_stages",
                format!("FiLM must occupy the deepest stages {deepest:?}, got {stages:?}"),
            ));
        }
        Ok(())
    }
}

/// One labelled slice with its metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct ClsSample {
    /// `[1, H, W]`
    pub image: Tensor,
    pub sequence: ModalityId,
    pub plane: Plane,
    pub label: usize,
}

struct Stage {
    weight: ParamId,
    bias: ParamId,
    film: Option<FilmMlp>,
}

pub struct FilmClassifier {
    pub cfg: FilmClassifierConfig,
    pub store: ParamStore,
    embedder: MetadataEmbedder,
    stages: Vec<Stage>,
    head_w: ParamId,
    head_b: ParamId,
}

fn stack_images(samples: &[&ClsSample]) -> Result<Tensor> {
    let first = samples
        .first()
        .ok_or_else(|| Error::EmptyInput("no samples in batch".into()))?;
    let s = first.image.shape().to_vec();
    if s.len() != 3 || s[0] != 1 {
        return Err(Error::dim("forward_classify", format!("images must be [1, H, W], got {s:?}")));
    }
    let mut data = Vec::with_capacity(samples.len() * first.image.numel());
    for smp in samples {
        if smp.image.shape() != s.as_slice() {
            return Err(Error::dim("forward_classify", "images in a batch differ in shape"));
        }
        data.extend_from_slice(smp.image.data());
    }
    Tensor::new(&[samples.len(), 1, s[1], s[2]], data)
}

impl FilmClassifier {
    pub fn new(cfg: FilmClassifierConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let embedder = MetadataEmbedder::new(&mut store, "cls.meta", &mut rng);
        let mut stages = Vec::new();
        let mut cin = 1;
        for (i, &c) in cfg.stage_channels.iter().enumerate() {
            let fan_in = cin * 9;
            let weight = store.add_uniform(format!("cls.stage{i}.weight"), &[c, cin, 3, 3], fan_in, &mut rng);
            let bias = store.add_uniform(format!("cls.stage{i}.bias"), &[c], fan_in, &mut rng);
            let film = cfg
                .film_stages
                .contains(&i)
                .then(|| FilmMlp::new(&mut store, &format!("cls.stage{i}.film"), c, &mut rng));
            stages.push(Stage { weight, bias, film });
            cin = c;
        }
        let head_w = store.add_uniform("cls.head.weight", &[cin, cfg.n_classes], cin, &mut rng);
        let head_b = store.add_uniform("cls.head.bias", &[cfg.n_classes], cin, &mut rng);
        Ok(Self {
            cfg,
            store,
            embedder,
            stages,
            head_w,
            head_b,
        })
    }

    pub fn n_film_stages(&self) -> usize {
        self.stages.iter().filter(|s| s.film.is_some()).count()
    }

    /// Scalars belonging to the FiLM MLP of stage `i` (zero if unconditioned).
    pub fn film_params_at(&self, stage: usize) -> usize {
        self.store.params_with_prefix(&format!("cls.stage{stage}.film."))
    }

    /// Set every FiLM head's output layer to zero, which makes gamma and
    /// beta identically zero.
    pub fn zero_film(&mut self) {
        for st in &self.stages {
            if let Some(f) = &st.film {
                for id in f.param_ids() {
                    self.store.get_mut(id).data_mut().fill(0.0);
                }
            }
        }
    }

    fn check_side(&self, h: usize, w: usize) -> Result<()> {
        let n = self.stages.len() as u32;
        if h < MIN_SIDE || w < MIN_SIDE || h < 2usize.pow(n) || w < 2usize.pow(n) {
            return Err(Error::dim(
                "forward_classify",
                format!("{h}x{w} image is too small for {n} stride-2 stages (min {MIN_SIDE})"),
            ));
        }
        Ok(())
    }

    /// Logits `[B, n_classes]`. With `use_film == false` the FiLM heads are
    /// skipped entirely, giving the image-only network.
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        images: Var,
        meta: &[(ModalityId, Plane)],
        use_film: bool,
    ) -> Result<(Var, Vec<Var>)> {
        let s = tape.shape(images).to_vec();
        let [b, 1, h, w] = s[..] else {
            return Err(Error::dim("forward_classify", format!("images must be [B, 1, H, W], got {s:?}")));
        };
        self.check_side(h, w)?;
        if meta.len() != b {
            return Err(Error::dim("forward_classify", format!("{} metadata rows for {b} images", meta.len())));
        }
        let ctx = if use_film && self.n_film_stages() > 0 {
            Some(self.embedder.forward(tape, p, meta)?)
        } else {
            None
        };
        let mut gammas = Vec::new();
        let mut x = images;
        for st in &self.stages {
            x = tape.conv2d(x, p[st.weight], Some(p[st.bias]), 2, 1)?;
            x = tape.relu(x);
            if let (Some(film), Some(ctx)) = (&st.film, ctx) {
                let (gamma, beta) = film.forward(tape, p, ctx)?;
                x = tape.film(x, gamma, beta)?;
                gammas.push(gamma);
            }
        }
        let pooled = tape.global_avg_pool(x)?;
        let logits = tape.linear(pooled, p[self.head_w], Some(p[self.head_b]))?;
        Ok((logits, gammas))
    }

    pub fn forward_classify(&self, samples: &[&ClsSample]) -> Result<Tensor> {
        self.logits_with(samples, None, true)
    }

    /// Logits computed without FiLM, i.e. the image-only path.
    pub fn forward_image_only(&self, samples: &[&ClsSample]) -> Result<Tensor> {
        self.logits_with(samples, None, false)
    }

    fn logits_with(&self, samples: &[&ClsSample], meta: Option<&[(ModalityId, Plane)]>, use_film: bool) -> Result<Tensor> {
        let images = stack_images(samples)?;
        let own: Vec<(ModalityId, Plane)> = samples.iter().map(|s| (s.sequence, s.plane)).collect();
        let mut tape = Tape::new();
        let p = self.store.bind_frozen(&mut tape);
        let x = tape.constant(images);
        let (logits, _) = self.forward(&mut tape, &p, x, meta.unwrap_or(&own), use_film)?;
        Ok(tape.value(logits).clone())
    }

    /// FiLM parameters of each conditioned stage for one metadata pair.
    pub fn film_parameters(&self, sequence: ModalityId, plane: Plane) -> Result<Vec<FiLMParams>> {
        let ctx = self.embedder.context(&self.store, sequence, plane);
        self.stages
            .iter()
            .filter_map(|s| s.film.as_ref())
            .map(|f| f.film_params(&self.store, &ctx, f.channels()))
            .collect()
    }

    fn predictions(&self, samples: &[&ClsSample], meta: Option<&[(ModalityId, Plane)]>) -> Result<Vec<usize>> {
        let mut preds = Vec::with_capacity(samples.len());
        for (ci, chunk) in samples.chunks(64).enumerate() {
            let m = meta.map(|m| &m[ci * 64..ci * 64 + chunk.len()]);
            let logits = self.logits_with(chunk, m, true)?;
            let c = self.cfg.n_classes;
            for row in logits.data().chunks(c) {
                let best = (0..c)
                    .max_by(|&a, &b| row[a].total_cmp(&row[b]))
                    .expect("at least two classes");
                preds.push(best);
            }
        }
        Ok(preds)
    }

    fn accuracy_with(&self, data: &[ClsSample], meta: Option<&[(ModalityId, Plane)]>) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::EmptyInput("dataset is empty".into()));
        }
        let refs: Vec<&ClsSample> = data.iter().collect();
        let preds = self.predictions(&refs, meta)?;
        let correct = preds.iter().zip(data).filter(|(p, s)| **p == s.label).count();
        Ok(correct as f64 / data.len() as f64)
    }

    pub fn accuracy(&self, data: &[ClsSample]) -> Result<f64> {
        self.accuracy_with(data, None)
    }
}

/// Film a single `[B, C, H, W]` feature map with shared `[C]` parameters.
pub fn film_apply(x: &Tensor, params: &FiLMParams) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let g = tape.constant(params.gamma.clone());
    let b = tape.constant(params.beta.clone());
    let y = tape.film(xv, g, b)?;
    Ok(tape.value(y).clone())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClsTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
}

impl Default for ClsTrainConfig {
    /// Adam at lr 1e-4, weight decay 1e-4, batch 32.
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 32,
            lr: 1e-4,
            weight_decay: 1e-4,
        }
    }
}

/// Cross-entropy training; returns the mean loss of each epoch.
pub fn train_classifier(model: &mut FilmClassifier, data: &[ClsSample], cfg: &ClsTrainConfig, seed: u64) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::EmptyInput("training set is empty".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::config("train.batch_size", "must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut adam = Adam::new(
        AdamConfig {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            clip_norm: None,
            ..AdamConfig::default()
        },
        &model.store,
    );
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for idx in order.chunks(cfg.batch_size) {
            let batch: Vec<&ClsSample> = idx.iter().map(|&i| &data[i]).collect();
            let images = stack_images(&batch)?;
            let meta: Vec<(ModalityId, Plane)> = batch.iter().map(|s| (s.sequence, s.plane)).collect();
            let labels: Vec<usize> = batch.iter().map(|s| s.label).collect();
            let mut tape = Tape::new();
            let p = model.store.bind(&mut tape);
            let x = tape.constant(images);
            let (logits, _) = model.forward(&mut tape, &p, x, &meta, true)?;
            let loss = tape.cross_entropy_rows(logits, &labels)?;
            total += tape.value(loss).data()[0];
            batches += 1;
            let grads = tape.backward(loss)?;
            model.store.store_grads(&p, &grads);
            adam.step(&mut model.store)?;
        }
        epoch_losses.push(total / batches as f64);
    }
    Ok(epoch_losses)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeResult {
    pub accuracy: f64,
    pub shuffled_accuracy: Vec<f64>,
    /// Accuracy with true metadata minus mean shuffled accuracy.
    pub delta_accuracy: f64,
}

impl ProbeResult {
    /// Per-trial accuracy drops.
    pub fn drops(&self) -> Vec<f64> {
        self.shuffled_accuracy.iter().map(|a| self.accuracy - a).collect()
    }
}

/// Re-evaluate with the (sequence, plane) pairs randomly permuted across
/// samples, `trials` times. Trial `t` uses a generator seeded from
/// `seed` and `t`, so trials are independent of evaluation order.
pub fn permutation_probe(model: &FilmClassifier, data: &[ClsSample], trials: usize, seed: u64) -> Result<ProbeResult> {
    if data.is_empty() {
        return Err(Error::EmptyInput("probe dataset is empty".into()));
    }
    if trials == 0 {
        return Err(Error::EmptyInput("probe needs at least one trial".into()));
    }
    let accuracy = model.accuracy(data)?;
    let observed: Vec<(ModalityId, Plane)> = data.iter().map(|s| (s.sequence, s.plane)).collect();
    let mut shuffled_accuracy = Vec::with_capacity(trials);
    for t in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (t as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let mut meta = observed.clone();
        meta.shuffle(&mut rng);
        shuffled_accuracy.push(model.accuracy_with(data, Some(&meta))?);
    }
    let mean = shuffled_accuracy.iter().sum::<f64>() / trials as f64;
    Ok(ProbeResult {
        accuracy,
        shuffled_accuracy,
        delta_accuracy: accuracy - mean,
    })
}

/// Percentile bootstrap interval for the mean of `values`.
pub fn bootstrap_mean_ci(values: &[f64], resamples: usize, confidence: f64, seed: u64) -> Result<(f64, f64)> {
    if values.is_empty() || resamples == 0 {
        return Err(Error::EmptyInput("bootstrap needs values and resamples".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = values.len();
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| (0..n).map(|_| values[rng.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let tail = (1.0 - confidence) / 2.0;
    let lo = ((resamples as f64 * tail).floor() as usize).min(resamples - 1);
    let hi = ((resamples as f64 * (1.0 - tail)).ceil() as usize).saturating_sub(1).min(resamples - 1);
    Ok((means[lo], means[hi]))
}

/// Mean `|gamma|` over channels and samples, one value per FiLM stage.
pub fn gamma_statistics(model: &FilmClassifier, data: &[ClsSample]) -> Result<Vec<f64>> {
    if model.n_film_stages() == 0 {
        return Err(Error::config("cls.film_stages", "model has no FiLM stage"));
    }
    if data.is_empty() {
        return Err(Error::EmptyInput("dataset is empty".into()));
    }
    let mut sums = vec![0.0; model.n_film_stages()];
    for s in data {
        for (acc, fp) in sums.iter_mut().zip(model.film_parameters(s.sequence, s.plane)?) {
            *acc += fp.gamma.data().iter().map(|g| g.abs()).sum::<f64>() / fp.gamma.numel() as f64;
        }
    }
    Ok(sums.into_iter().map(|s| s / data.len() as f64).collect())
}
