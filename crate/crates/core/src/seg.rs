//! Toy 3-D segmentation network: per-modality conv stems, a metadata
//! attention bottleneck and a conv decoder, with the CE + Dice objective.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::metadata::{MetadataEncoder, ModalityMask, N_MODALITIES};
use crate::optim::{Adam, AdamConfig};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::tmax::{detokenize_var, PatchEmbedding, TmaxBlock, TmaxConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StemKind {
    /// 3x3x3 convolution + ReLU per modality.
    Conv,
    /// Raw modality channels go straight to the encoder.
    Direct,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegModelConfig {
    pub stem: StemKind,
    /// First entry: stem width per modality. Each further entry adds a
    /// stride-2 downsampling conv of that width.
    pub encoder_channels: Vec<usize>,
    pub tmax: TmaxConfig,
    /// One entry per 2x upsampling stage.
    pub decoder_channels: Vec<usize>,
    pub n_seg_classes: usize,
    pub deep_supervision: bool,
    pub ds_decay: f64,
    pub ds_decay_epoch_fraction: f64,
    /// Replace missing modalities' stem outputs with zeros.
    pub gate_missing: bool,
    /// Feed the fused full-resolution stem features to the output head.
    pub skip_connection: bool,
}

impl Default for SegModelConfig {
    fn default() -> Self {
        Self {
            stem: StemKind::Conv,
            encoder_channels: vec![4, 8],
            tmax: TmaxConfig {
                ffn_hidden: 64,
                ..TmaxConfig::with_dim(16)
            },
            decoder_channels: vec![16, 8, 4],
            n_seg_classes: 2,
            deep_supervision: true,
            ds_decay: 0.4,
            ds_decay_epoch_fraction: 0.5,
            gate_missing: true,
            skip_connection: true,
        }
    }
}

impl SegModelConfig {
    pub fn n_downsamples(&self) -> usize {
        self.encoder_channels.len().saturating_sub(1)
    }

    /// Total spatial reduction between input and token grid.
    pub fn reduction(&self) -> usize {
        self.tmax.patch_size << self.n_downsamples()
    }

    pub fn validate(&self) -> Result<()> {
        self.tmax.validate()?;
        if self.tmax.n_modalities != N_MODALITIES {
            return Err(Error::config("seg.tmax.n_modalities", format!("must be {N_MODALITIES}")));
        }
        if self.encoder_channels.is_empty() || self.encoder_channels.contains(&0) {
            return Err(Error::config("seg.encoder_channels", "must be nonempty and positive"));
        }
        if self.decoder_channels.is_empty() || self.decoder_channels.contains(&0) {
            return Err(Error::config("seg.decoder_channels", "must be nonempty and positive"));
        }
        if !self.tmax.patch_size.is_power_of_two() {
            return Err(Error::config("seg.tmax.patch_size", "must be a power of two"));
        }
        let stages = self.reduction().trailing_zeros() as usize;
        if self.decoder_channels.len() != stages {
            return Err(Error::config(
                "seg.decoder_channels",
                format!("need {stages} upsampling stages to undo a {}x reduction", self.reduction()),
            ));
        }
        if self.n_seg_classes < 2 {
            return Err(Error::config("seg.n_seg_classes", "need at least two classes"));
        }
        if !(self.ds_decay > 0.0 && self.ds_decay <= 1.0) {
            return Err(Error::config("seg.ds_decay", "must lie in (0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.ds_decay_epoch_fraction) {
            return Err(Error::config("seg.ds_decay_epoch_fraction", "must lie in [0, 1]"));
        }
        Ok(())
    }

    fn fused_channels(&self) -> usize {
        match self.stem {
            StemKind::Conv => N_MODALITIES * self.encoder_channels[0],
            StemKind::Direct => N_MODALITIES,
        }
    }
}

/// Integer labels on a `d x h x w` grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVolume {
    pub extent: [usize; 3],
    pub labels: Vec<usize>,
}

impl LabelVolume {
    pub fn new(extent: [usize; 3], labels: Vec<usize>) -> Result<Self> {
        if extent.iter().product::<usize>() != labels.len() {
            return Err(Error::dim("label_volume", format!("{} labels for extent {extent:?}", labels.len())));
        }
        Ok(Self { extent, labels })
    }

    pub fn count(&self, class: usize) -> usize {
        self.labels.iter().filter(|&&l| l == class).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegBatch {
    /// `[4, d, h, w]`, one channel per modality.
    pub volumes: Tensor,
    pub mask: ModalityMask,
    pub target: LabelVolume,
}

impl SegBatch {
    /// Same sample under a different availability pattern, with missing
    /// channels zero-filled.
    pub fn with_availability(&self, mask: ModalityMask) -> Self {
        let mut volumes = self.volumes.clone();
        let per = volumes.numel() / N_MODALITIES;
        for (m, chunk) in volumes.data_mut().chunks_mut(per).enumerate() {
            if !mask.available()[m] {
                chunk.fill(0.0);
            }
        }
        Self {
            volumes,
            mask,
            target: self.target.clone(),
        }
    }
}

/// `2|P ∩ T| / (|P| + |T|)` for one class; 1.0 when both sets are empty.
pub fn dice_score(pred: &LabelVolume, target: &LabelVolume, class: usize) -> Result<f64> {
    if pred.extent != target.extent || pred.labels.len() != target.labels.len() {
        return Err(Error::dim(
            "dice_score",
            format!("prediction {:?} vs target {:?}", pred.extent, target.extent),
        ));
    }
    let (mut inter, mut p, mut t) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.labels.iter().zip(&target.labels) {
        let (ia, ib) = (a == class, b == class);
        p += ia as usize;
        t += ib as usize;
        inter += (ia && ib) as usize;
    }
    if p + t == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (p + t) as f64)
}

/// Weight of the auxiliary terms at `epoch` out of `total_epochs`.
pub fn aux_weight(epoch: usize, total_epochs: usize, cfg: &SegModelConfig) -> f64 {
    if (epoch as f64) >= cfg.ds_decay_epoch_fraction * total_epochs as f64 {
        cfg.ds_decay
    } else {
        1.0
    }
}

/// CE + soft-Dice on `[V, C]` logits, plus weighted auxiliary terms.
pub fn combined_loss_var(tape: &mut Tape, logits: Var, targets: &[usize], aux: &[Var], aux_w: f64) -> Result<Var> {
    let ce = tape.cross_entropy_rows(logits, targets)?;
    let dice = tape.soft_dice_loss(logits, targets)?;
    let mut total = tape.add(ce, dice)?;
    for &a in aux {
        let ce = tape.cross_entropy_rows(a, targets)?;
        let dice = tape.soft_dice_loss(a, targets)?;
        let term = tape.add(ce, dice)?;
        let term = tape.scale(term, aux_w);
        total = tape.add(total, term)?;
    }
    Ok(total)
}

fn to_rows(tape: &mut Tape, logits: Var) -> Result<Var> {
    let s = tape.shape(logits).to_vec();
    let v: usize = s[1..].iter().product();
    let flat = tape.reshape(logits, &[s[0], v])?;
    tape.transpose(flat)
}

/// Loss of `[C, d, h, w]` logits (and auxiliary logits of the same shape)
/// against a label volume.
pub fn combined_loss(
    logits: &Tensor,
    target: &LabelVolume,
    aux: &[Tensor],
    epoch: usize,
    total_epochs: usize,
    cfg: &SegModelConfig,
) -> Result<f64> {
    let mut tape = Tape::new();
    let rows = |t: &Tensor, tape: &mut Tape| -> Result<Var> {
        let s = t.shape();
        if s.len() != 4 || s[1..] != target.extent {
            return Err(Error::dim(
                "combined_loss",
                format!("logits {s:?} do not match target extent {:?}", target.extent),
            ));
        }
        let v = tape.constant(t.clone());
        to_rows(tape, v)
    };
    let main = rows(logits, &mut tape)?;
    let aux_vars = aux.iter().map(|a| rows(a, &mut tape)).collect::<Result<Vec<_>>>()?;
    let w = aux_weight(epoch, total_epochs, cfg);
    let l = combined_loss_var(&mut tape, main, &target.labels, &aux_vars, w)?;
    Ok(tape.value(l).data()[0])
}

#[derive(Debug, Clone, Copy)]
struct ConvLayer {
    weight: ParamId,
    bias: ParamId,
}

impl ConvLayer {
    fn new(store: &mut ParamStore, name: &str, cout: usize, cin: usize, k: usize, rng: &mut impl Rng) -> Self {
        let fan_in = cin * k * k * k;
        Self {
            weight: store.add_uniform(format!("{name}.weight"), &[cout, cin, k, k, k], fan_in, rng),
            bias: store.add_uniform(format!("{name}.bias"), &[cout], fan_in, rng),
        }
    }

    fn apply(&self, tape: &mut Tape, p: &Bound, x: Var, stride: usize, pad: usize) -> Result<Var> {
        tape.conv3d(x, p[self.weight], Some(p[self.bias]), stride, pad)
    }
}

/// Tape handles from one forward pass.
pub struct SegForward {
    /// `[V, C]`
    pub logits: Var,
    /// `[V, C]` per auxiliary head.
    pub aux: Vec<Var>,
    /// `[N, 4]` attention of each bottleneck layer.
    pub attention: Vec<Var>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegOutput {
    /// `[C, d, h, w]`
    pub logits: Tensor,
    pub aux: Vec<Tensor>,
}

pub struct SegModel {
    pub cfg: SegModelConfig,
    pub store: ParamStore,
    extent: [usize; 3],
    stems: Vec<ConvLayer>,
    downs: Vec<ConvLayer>,
    embed: PatchEmbedding,
    encoder: MetadataEncoder,
    blocks: Vec<TmaxBlock>,
    decoder: Vec<ConvLayer>,
    aux_heads: Vec<ConvLayer>,
    head: ConvLayer,
}

impl SegModel {
    pub fn new(cfg: SegModelConfig, extent: [usize; 3], seed: u64) -> Result<Self> {
        cfg.validate()?;
        let r = cfg.reduction();
        if let Some(bad) = extent.iter().find(|&&e| e == 0 || e % r != 0) {
            return Err(Error::dim(
                "seg_model",
                format!("extent {bad} is not divisible by the {r}x encoder reduction"),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let stems = match cfg.stem {
            StemKind::Conv => (0..N_MODALITIES)
                .map(|m| ConvLayer::new(&mut store, &format!("seg.stem{m}"), cfg.encoder_channels[0], 1, 3, &mut rng))
                .collect(),
            StemKind::Direct => Vec::new(),
        };
        let mut c = cfg.fused_channels();
        let mut downs = Vec::new();
        for (i, &w) in cfg.encoder_channels[1..].iter().enumerate() {
            downs.push(ConvLayer::new(&mut store, &format!("seg.down{i}"), w, c, 2, &mut rng));
            c = w;
        }
        let down_extent = extent.map(|e| e >> cfg.n_downsamples());
        let embed = PatchEmbedding::new(&mut store, "seg.embed", cfg.tmax, c, down_extent, &mut rng)?;
        let encoder = MetadataEncoder::new(&mut store, "seg.meta", cfg.tmax.embed_dim, &mut rng);
        let blocks = (0..cfg.tmax.n_layers)
            .map(|l| TmaxBlock::new(&mut store, &format!("seg.tmax{l}"), &cfg.tmax, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let mut c = cfg.tmax.embed_dim;
        let mut decoder = Vec::new();
        let mut aux_heads = Vec::new();
        let n_dec = cfg.decoder_channels.len();
        for (i, &w) in cfg.decoder_channels.iter().enumerate() {
            decoder.push(ConvLayer::new(&mut store, &format!("seg.dec{i}"), w, c, 3, &mut rng));
            if cfg.deep_supervision && i + 1 < n_dec {
                aux_heads.push(ConvLayer::new(&mut store, &format!("seg.aux{i}"), cfg.n_seg_classes, w, 1, &mut rng));
            }
            c = w;
        }
        if cfg.skip_connection {
            c += cfg.fused_channels();
        }
        let head = ConvLayer::new(&mut store, "seg.head", cfg.n_seg_classes, c, 1, &mut rng);
        Ok(Self {
            cfg,
            store,
            extent,
            stems,
            downs,
            embed,
            encoder,
            blocks,
            decoder,
            aux_heads,
            head,
        })
    }

    pub fn extent(&self) -> [usize; 3] {
        self.extent
    }

    pub fn n_tokens(&self) -> usize {
        self.embed.n_tokens()
    }

    /// The modality dictionary whose rows become keys and values.
    pub fn modality_table(&self) -> ParamId {
        self.encoder.table
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, batch: &SegBatch) -> Result<SegForward> {
        let s = batch.volumes.shape();
        if s.len() != 4 || s[0] != N_MODALITIES || s[1..] != self.extent {
            return Err(Error::dim(
                "forward_segment",
                format!("volumes must be [{N_MODALITIES}, {:?}], got {s:?}", self.extent),
            ));
        }
        if !batch.volumes.is_finite() {
            return Err(Error::NumericInstability {
                op: "forward_segment".into(),
                detail: "input volume contains non-finite values".into(),
            });
        }
        let [d, h, w] = self.extent;
        let per = d * h * w;
        let avail = batch.mask.available();
        let mut parts = Vec::with_capacity(N_MODALITIES);
        for (m, &present) in avail.iter().enumerate() {
            let width = self.stems.get(m).map_or(1, |_| self.cfg.encoder_channels[0]);
            if self.cfg.gate_missing && !present {
                parts.push(tape.constant(Tensor::zeros(&[1, width, d, h, w])));
                continue;
            }
            let chan = &batch.volumes.data()[m * per..(m + 1) * per];
            let x = tape.constant(Tensor::from_vec(&[1, 1, d, h, w], chan.to_vec()));
            parts.push(match self.stems.get(m) {
                Some(stem) => {
                    let y = stem.apply(tape, p, x, 1, 1)?;
                    tape.relu(y)
                }
                None => x,
            });
        }
        let fused = tape.concat(&parts, 1)?;
        let mut x = fused;
        for down in &self.downs {
            let y = down.apply(tape, p, x, 2, 0)?;
            x = tape.relu(y);
        }
        let mut tokens = self.embed.forward(tape, p, x)?;
        let (k, v) = self.encoder.forward(tape, p)?;
        let mut attention = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let tr = block.forward_traced(tape, p, tokens, k, v, &batch.mask)?;
            attention.push(tr.attention);
            tokens = tr.output;
        }
        let mut x = detokenize_var(tape, tokens, self.embed.grid())?;
        let n_dec = self.decoder.len();
        let mut aux = Vec::new();
        for (i, layer) in self.decoder.iter().enumerate() {
            let up = tape.upsample3d(x, 2)?;
            let y = layer.apply(tape, p, up, 1, 1)?;
            x = tape.relu(y);
            if let Some(head) = self.aux_heads.get(i) {
                let a = head.apply(tape, p, x, 1, 0)?;
                let a = tape.upsample3d(a, 1 << (n_dec - 1 - i))?;
                let a = tape.reshape(a, &[self.cfg.n_seg_classes, d, h, w])?;
                aux.push(to_rows(tape, a)?);
            }
        }
        if self.cfg.skip_connection {
            x = tape.concat(&[x, fused], 1)?;
        }
        let logits = self.head.apply(tape, p, x, 1, 0)?;
        let logits = tape.reshape(logits, &[self.cfg.n_seg_classes, d, h, w])?;
        Ok(SegForward {
            logits: to_rows(tape, logits)?,
            aux,
            attention,
        })
    }

    pub fn forward_segment(&self, batch: &SegBatch) -> Result<SegOutput> {
        let mut tape = Tape::new();
        let p = self.store.bind_frozen(&mut tape);
        let out = self.forward(&mut tape, &p, batch)?;
        let c = self.cfg.n_seg_classes;
        let [d, h, w] = self.extent;
        let to_volume = |tape: &Tape, v: Var| -> Result<Tensor> {
            let rows = tape.value(v);
            let n = d * h * w;
            let mut data = vec![0.0; c * n];
            for (vi, row) in rows.data().chunks(c).enumerate() {
                for (ci, &x) in row.iter().enumerate() {
                    data[ci * n + vi] = x;
                }
            }
            Tensor::new(&[c, d, h, w], data)
        };
        Ok(SegOutput {
            logits: to_volume(&tape, out.logits)?,
            aux: out.aux.iter().map(|&a| to_volume(&tape, a)).collect::<Result<_>>()?,
        })
    }

    /// Per-layer bottleneck attention `[N, 4]` for a batch.
    pub fn bottleneck_attention(&self, batch: &SegBatch) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let p = self.store.bind_frozen(&mut tape);
        let out = self.forward(&mut tape, &p, batch)?;
        Ok(out.attention.iter().map(|&a| tape.value(a).clone()).collect())
    }

    pub fn predict(&self, batch: &SegBatch) -> Result<LabelVolume> {
        let out = self.forward_segment(batch)?;
        let c = self.cfg.n_seg_classes;
        let n = out.logits.numel() / c;
        let l = out.logits.data();
        let labels = (0..n)
            .map(|v| {
                (0..c)
                    .max_by(|&a, &b| l[a * n + v].total_cmp(&l[b * n + v]))
                    .expect("at least two classes")
            })
            .collect();
        LabelVolume::new(self.extent, labels)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        checkpoint::save(&self.store, path)
    }

    /// Replace the weights with those in a checkpoint of the same layout.
    pub fn load_weights(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let loaded = checkpoint::load(path)?;
        self.store.load_from(&loaded)
    }
}

/// One optimizer update. Returns the loss before the update.
pub fn train_step(model: &mut SegModel, batch: &SegBatch, adam: &mut Adam, epoch: usize, total_epochs: usize) -> Result<f64> {
    if let Some(bad) = batch.target.labels.iter().find(|&&l| l >= model.cfg.n_seg_classes) {
        return Err(Error::config("target", format!("label {bad} outside [0, {})", model.cfg.n_seg_classes)));
    }
    let mut tape = Tape::new();
    let p = model.store.bind(&mut tape);
    let out = model.forward(&mut tape, &p, batch)?;
    let w = aux_weight(epoch, total_epochs, &model.cfg);
    let loss = combined_loss_var(&mut tape, out.logits, &batch.target.labels, &out.aux, w)?;
    let value = tape.value(loss).data()[0];
    if !value.is_finite() {
        let (node, op) = tape.first_non_finite().expect("the loss node itself is non-finite");
        return Err(Error::NumericInstability {
            op: op.into(),
            detail: format!("loss is {value}; first non-finite value produced at node {}", node.index()),
        });
    }
    let grads = tape.backward(loss)?;
    model.store.store_grads(&p, &grads);
    adam.step(&mut model.store)?;
    Ok(value)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AvailabilityPolicy {
    /// Uniform over the 15 nonempty subsets, drawn per step.
    RandomSubset,
    /// Always the sample's own mask.
    AsGiven,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegTrainConfig {
    pub epochs: usize,
    pub adam: AdamConfig,
    pub availability: AvailabilityPolicy,
}

impl Default for SegTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            adam: AdamConfig::default(),
            availability: AvailabilityPolicy::RandomSubset,
        }
    }
}

/// Draw one of the 15 nonempty availability patterns uniformly.
pub fn random_availability(rng: &mut impl Rng, n_tokens: usize) -> Result<ModalityMask> {
    let bits = rng.random_range(1..16u8);
    ModalityMask::new(std::array::from_fn(|m| bits >> m & 1 == 1), n_tokens)
}

/// Train over `data` in order for `cfg.epochs` epochs; returns the loss of
/// every step.
pub fn train_segmentation(model: &mut SegModel, data: &[SegBatch], cfg: &SegTrainConfig, seed: u64) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::EmptyInput("training set is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut adam = Adam::new(cfg.adam, &model.store);
    let n_tokens = model.n_tokens();
    let mut losses = Vec::with_capacity(cfg.epochs * data.len());
    for epoch in 0..cfg.epochs {
        for sample in data {
            let batch = match cfg.availability {
                AvailabilityPolicy::RandomSubset => sample.with_availability(random_availability(&mut rng, n_tokens)?),
                AvailabilityPolicy::AsGiven => sample.with_availability(sample.mask),
            };
            losses.push(train_step(model, &batch, &mut adam, epoch, cfg.epochs)?);
        }
    }
    Ok(losses)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> SegModelConfig {
        SegModelConfig {
            encoder_channels: vec![2, 4],
            tmax: TmaxConfig {
                ffn_hidden: 16,
                ..TmaxConfig::with_dim(8)
            },
            decoder_channels: vec![4, 4, 2],
            ..SegModelConfig::default()
        }
    }

    fn batch(extent: usize, seed: u64, avail: [bool; 4]) -> SegBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = extent * extent * extent;
        let full = SegBatch {
            volumes: Tensor::uniform(&[4, extent, extent, extent], -1.0, 1.0, &mut rng),
            mask: ModalityMask::all(1),
            target: LabelVolume::new([extent; 3], (0..n).map(|i| (i % 7 == 0) as usize).collect()).unwrap(),
        };
        full.with_availability(ModalityMask::new(avail, 1).unwrap())
    }

    fn lv(labels: &[usize]) -> LabelVolume {
        LabelVolume::new([1, 1, labels.len()], labels.to_vec()).unwrap()
    }

    #[test]
    fn dice_examples() {
        let a = lv(&[1, 1, 0, 0, 1, 1]);
        assert_eq!(dice_score(&a, &a, 1).unwrap(), 1.0);
        let b = lv(&[0, 0, 1, 1, 0, 0]);
        assert_eq!(dice_score(&a, &b, 1).unwrap(), 0.0);
        // |P| = 2, |T| = 4, overlap 2
        let p = lv(&[1, 1, 0, 0, 0, 0]);
        let t = lv(&[1, 1, 1, 1, 0, 0]);
        assert!((dice_score(&p, &t, 1).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        let empty = lv(&[0; 6]);
        assert_eq!(dice_score(&empty, &empty, 1).unwrap(), 1.0);
        assert!(dice_score(&a, &lv(&[0; 5]), 1).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(SegModelConfig::default().validate().is_ok());
        let bad = SegModelConfig {
            decoder_channels: vec![4],
            ..SegModelConfig::default()
        };
        let err = bad.validate().unwrap_err().to_string();
        assert!(err.contains("seg.decoder_channels"), "{err}");
        let decay = SegModelConfig {
            ds_decay: 0.0,
            ..SegModelConfig::default()
        };
        assert!(decay.validate().is_err());
        assert!(SegModel::new(tiny_cfg(), [12, 16, 16], 0).is_err());
    }

    #[test]
    fn sixteen_cubed_gives_eight_tokens() {
        let m = SegModel::new(tiny_cfg(), [16; 3], 0).unwrap();
        assert_eq!(m.n_tokens(), 8);
    }

    #[test]
    fn output_extent_matches_input() {
        let m = SegModel::new(tiny_cfg(), [16; 3], 1).unwrap();
        let out = m.forward_segment(&batch(16, 0, [true; 4])).unwrap();
        assert_eq!(out.logits.shape(), &[2, 16, 16, 16]);
        assert_eq!(out.aux.len(), 2);
        assert!(out.aux.iter().all(|a| a.shape() == [2, 16, 16, 16]));
    }

    #[test]
    fn missing_inputs_do_not_reach_the_output() {
        let m = SegModel::new(tiny_cfg(), [16; 3], 2).unwrap();
        let avail = [true, false, true, false];
        let clean = batch(16, 3, avail);
        let mut noisy = clean.clone();
        let per = 16 * 16 * 16;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for (i, v) in noisy.volumes.data_mut().iter_mut().enumerate() {
            if !avail[i / per] {
                *v = rng.random_range(-50.0..50.0);
            }
        }
        let a = m.forward_segment(&clean).unwrap();
        let b = m.forward_segment(&noisy).unwrap();
        assert!(a.logits.bit_eq(&b.logits));
    }

    #[test]
    fn attention_ignores_missing_columns_without_gating() {
        let cfg = SegModelConfig {
            gate_missing: false,
            ..tiny_cfg()
        };
        let m = SegModel::new(cfg, [16; 3], 4).unwrap();
        let att = m.bottleneck_attention(&batch(16, 5, [false, true, false, true])).unwrap();
        for row in att[0].data().chunks(4) {
            assert_eq!(row[0].to_bits(), 0);
            assert_eq!(row[2].to_bits(), 0);
        }
    }

    #[test]
    fn direct_stem_runs() {
        let cfg = SegModelConfig {
            stem: StemKind::Direct,
            encoder_channels: vec![1],
            decoder_channels: vec![4, 4],
            tmax: TmaxConfig::with_dim(8),
            ..SegModelConfig::default()
        };
        let m = SegModel::new(cfg, [8; 3], 0).unwrap();
        let out = m.forward_segment(&batch(8, 1, [true, true, false, true])).unwrap();
        assert_eq!(out.logits.shape(), &[2, 8, 8, 8]);
    }

    #[test]
    fn aux_weight_schedule() {
        let cfg = SegModelConfig::default();
        assert_eq!(aux_weight(0, 10, &cfg), 1.0);
        assert_eq!(aux_weight(4, 10, &cfg), 1.0);
        assert_eq!(aux_weight(5, 10, &cfg), 0.4);
        assert_eq!(aux_weight(9, 10, &cfg), 0.4);
    }

    #[test]
    fn decayed_aux_contribution_is_scaled() {
        let cfg = SegModelConfig::default();
        let target = lv(&[0, 1, 1, 0]);
        let main = Tensor::from_vec(&[2, 1, 1, 4], vec![1.0, -1.0, 0.5, 0.2, -0.3, 0.4, 0.0, 0.1]);
        let aux = Tensor::from_vec(&[2, 1, 1, 4], vec![0.2, 0.1, -0.7, 0.9, 0.3, -0.2, 0.5, 0.0]);
        let base = combined_loss(&main, &target, &[], 0, 10, &cfg).unwrap();
        let early = combined_loss(&main, &target, std::slice::from_ref(&aux), 0, 10, &cfg).unwrap() - base;
        let late = combined_loss(&main, &target, &[aux], 9, 10, &cfg).unwrap() - base;
        assert!((late - 0.4 * early).abs() < 1e-12);
    }

    #[test]
    fn saturated_logits_cost_almost_nothing() {
        let cfg = SegModelConfig::default();
        let target = lv(&[0, 1, 1, 0, 1]);
        let mut data = vec![0.0; 10];
        for (v, &t) in target.labels.iter().enumerate() {
            data[t * 5 + v] = 20.0;
        }
        let logits = Tensor::from_vec(&[2, 1, 1, 5], data);
        assert!(combined_loss(&logits, &target, &[], 0, 1, &cfg).unwrap() < 0.01);
    }

    #[test]
    fn training_is_deterministic() {
        let run = || {
            let mut m = SegModel::new(tiny_cfg(), [16; 3], 7).unwrap();
            let data = vec![batch(16, 1, [true; 4]), batch(16, 2, [true; 4])];
            let cfg = SegTrainConfig {
                epochs: 2,
                ..SegTrainConfig::default()
            };
            let losses = train_segmentation(&mut m, &data, &cfg, 3).unwrap();
            (losses, checkpoint::encode(&m.store))
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn checkpoint_round_trip_restores_predictions() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = SegModel::new(tiny_cfg(), [16; 3], 11).unwrap();
        m.save(&path).unwrap();
        let mut other = SegModel::new(tiny_cfg(), [16; 3], 12).unwrap();
        other.load_weights(&path).unwrap();
        let b = batch(16, 4, [true, true, true, false]);
        assert!(m.forward_segment(&b).unwrap().logits.bit_eq(&other.forward_segment(&b).unwrap().logits));
    }

    #[test]
    fn nan_input_is_numeric_error() {
        let m = SegModel::new(tiny_cfg(), [16; 3], 0).unwrap();
        let mut b = batch(16, 0, [true; 4]);
        b.volumes.data_mut()[0] = f64::NAN;
        assert!(m.forward_segment(&b).unwrap_err().is_numeric());
    }
}
