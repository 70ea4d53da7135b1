//! Categorical scan metadata: the fixed modality dictionary, availability
//! masks, sequence/plane embeddings, the FiLM parameter MLP and the encoder
//! that turns the dictionary into attention keys and values.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Size of the modality dictionary.
pub const N_MODALITIES: usize = 4;
/// Width of each of the sequence and plane embeddings.
pub const EMBED_DIM: usize = 16;
/// Concatenated sequence + plane embedding.
pub const CONTEXT_DIM: usize = 2 * EMBED_DIM;
/// Hidden width of the FiLM parameter MLP.
pub const FILM_HIDDEN: usize = 64;

/// MRI sequence. Indices follow the column order FLAIR, T1c, T1, T2.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ModalityId {
    #[serde(rename = "FLAIR")]
    Flair,
    #[serde(rename = "T1c")]
    T1c,
    #[serde(rename = "T1")]
    T1,
    #[serde(rename = "T2")]
    T2,
}

impl ModalityId {
    pub const ALL: [ModalityId; N_MODALITIES] =
        [ModalityId::Flair, ModalityId::T1c, ModalityId::T1, ModalityId::T2];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ModalityId::Flair => "FLAIR",
            ModalityId::T1c => "T1c",
            ModalityId::T1 => "T1",
            ModalityId::T2 => "T2",
        }
    }
}

impl fmt::Display for ModalityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModalityId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::config("modality", format!("unknown modality {s:?}")))
    }
}

/// Anatomical plane of a 2-D slice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Plane {
    Axial,
    Sagittal,
    Coronal,
}

impl Plane {
    pub const ALL: [Plane; 3] = [Plane::Axial, Plane::Sagittal, Plane::Coronal];

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Which of the four modalities are present for a sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ModalityMask {
    available: [bool; N_MODALITIES],
    n_tokens: usize,
}

/// Availability mask with its additive matrix sized for `n_tokens` rows.
pub fn build_mask(available: [bool; N_MODALITIES], n_tokens: usize) -> Result<ModalityMask> {
    ModalityMask::new(available, n_tokens)
}

impl ModalityMask {
    pub fn new(available: [bool; N_MODALITIES], n_tokens: usize) -> Result<Self> {
        if !available.iter().any(|&a| a) {
            return Err(Error::NoModality);
        }
        if n_tokens == 0 {
            return Err(Error::dim("build_mask", "n_tokens must be positive"));
        }
        Ok(Self {
            available,
            n_tokens,
        })
    }

    pub fn all(n_tokens: usize) -> Self {
        Self::new([true; N_MODALITIES], n_tokens).expect("full mask is valid")
    }

    pub fn available(&self) -> [bool; N_MODALITIES] {
        self.available
    }

    pub fn is_available(&self, m: ModalityId) -> bool {
        self.available[m.index()]
    }

    pub fn n_tokens(&self) -> usize {
        self.n_tokens
    }

    pub fn n_available(&self) -> usize {
        self.available.iter().filter(|&&a| a).count()
    }

    /// Same availability, different row count.
    pub fn with_tokens(&self, n_tokens: usize) -> Result<Self> {
        Self::new(self.available, n_tokens)
    }

    /// `[n_tokens, 4]` matrix: `0` in available columns, `-inf` elsewhere.
    pub fn additive(&self) -> Tensor {
        Tensor::from_fn(&[self.n_tokens, N_MODALITIES], |i| {
            if self.available[i % N_MODALITIES] {
                0.0
            } else {
                f64::NEG_INFINITY
            }
        })
    }
}

/// Sequence and plane of a slice together with their embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct MetadataContext {
    pub sequence: ModalityId,
    pub plane: Plane,
    pub sequence_embedding: Tensor,
    pub plane_embedding: Tensor,
}

impl MetadataContext {
    /// The 32-wide concatenation fed to the FiLM MLP.
    pub fn concatenated(&self) -> Tensor {
        let mut v = self.sequence_embedding.data().to_vec();
        v.extend_from_slice(self.plane_embedding.data());
        Tensor::from_vec(&[CONTEXT_DIM], v)
    }
}

/// Per-channel scale and shift.
#[derive(Debug, Clone, PartialEq)]
pub struct FiLMParams {
    pub gamma: Tensor,
    pub beta: Tensor,
}

/// Learned lookup tables for sequence (4 rows) and plane (3 rows).
#[derive(Debug, Clone)]
pub struct MetadataEmbedder {
    sequence_table: ParamId,
    plane_table: ParamId,
}

impl MetadataEmbedder {
    pub fn new(store: &mut ParamStore, prefix: &str, rng: &mut impl Rng) -> Self {
        let sequence_table = store.add(
            format!("{prefix}.sequence_table"),
            Tensor::uniform(&[N_MODALITIES, EMBED_DIM], -1.0, 1.0, rng),
        );
        let plane_table = store.add(
            format!("{prefix}.plane_table"),
            Tensor::uniform(&[Plane::ALL.len(), EMBED_DIM], -1.0, 1.0, rng),
        );
        Self {
            sequence_table,
            plane_table,
        }
    }

    pub fn context(&self, store: &ParamStore, sequence: ModalityId, plane: Plane) -> MetadataContext {
        let row = |id: ParamId, i: usize| {
            Tensor::from_vec(&[EMBED_DIM], store.get(id).row(i).to_vec())
        };
        MetadataContext {
            sequence,
            plane,
            sequence_embedding: row(self.sequence_table, sequence.index()),
            plane_embedding: row(self.plane_table, plane.index()),
        }
    }

    /// `[B, 32]` context vectors for a batch of (sequence, plane) pairs.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, meta: &[(ModalityId, Plane)]) -> Result<Var> {
        let seq: Vec<usize> = meta.iter().map(|(s, _)| s.index()).collect();
        let pl: Vec<usize> = meta.iter().map(|(_, p)| p.index()).collect();
        let s = tape.gather_rows(p[self.sequence_table], &seq)?;
        let q = tape.gather_rows(p[self.plane_table], &pl)?;
        tape.concat(&[s, q], 1)
    }
}

/// 32 -> 64 (ReLU) -> 2C MLP predicting FiLM parameters for one stage.
#[derive(Debug, Clone)]
pub struct FilmMlp {
    channels: usize,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl FilmMlp {
    pub fn new(store: &mut ParamStore, prefix: &str, channels: usize, rng: &mut impl Rng) -> Self {
        Self {
            channels,
            w1: store.add_uniform(format!("{prefix}.w1"), &[CONTEXT_DIM, FILM_HIDDEN], CONTEXT_DIM, rng),
            b1: store.add_uniform(format!("{prefix}.b1"), &[FILM_HIDDEN], CONTEXT_DIM, rng),
            w2: store.add_uniform(format!("{prefix}.w2"), &[FILM_HIDDEN, 2 * channels], FILM_HIDDEN, rng),
            b2: store.add_uniform(format!("{prefix}.b2"), &[2 * channels], FILM_HIDDEN, rng),
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn param_ids(&self) -> [ParamId; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }

    /// Scalars in this head: `32*64 + 64 + 64*2C + 2C`.
    pub fn param_count(channels: usize) -> usize {
        CONTEXT_DIM * FILM_HIDDEN + FILM_HIDDEN + FILM_HIDDEN * 2 * channels + 2 * channels
    }

    /// `ctx: [B, 32]` to `(gamma, beta)`, each `[B, C]`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, ctx: Var) -> Result<(Var, Var)> {
        let h = tape.linear(ctx, p[self.w1], Some(p[self.b1]))?;
        let h = tape.relu(h);
        let out = tape.linear(h, p[self.w2], Some(p[self.b2]))?;
        let gamma = tape.slice_cols(out, 0, self.channels)?;
        let beta = tape.slice_cols(out, self.channels, self.channels)?;
        Ok((gamma, beta))
    }

    /// Evaluate for a single context without recording gradients.
    pub fn film_params(&self, store: &ParamStore, ctx: &MetadataContext, target_channels: usize) -> Result<FiLMParams> {
        if target_channels != self.channels {
            return Err(Error::config(
                "film.channels",
                format!("head predicts {} channels, target has {target_channels}", self.channels),
            ));
        }
        let mut tape = Tape::new();
        let p = store.bind_frozen(&mut tape);
        let c = tape.constant(ctx.concatenated().reshape(&[1, CONTEXT_DIM])?);
        let (g, b) = self.forward(&mut tape, &p, c)?;
        Ok(FiLMParams {
            gamma: tape.value(g).reshape(&[self.channels])?,
            beta: tape.value(b).reshape(&[self.channels])?,
        })
    }
}

/// Evaluate `head` for one context; the head must be sized for `target_channels`.
pub fn film_mlp(store: &ParamStore, head: &FilmMlp, ctx: &MetadataContext, target_channels: usize) -> Result<FiLMParams> {
    head.film_params(store, ctx, target_channels)
}

/// Keys and values from the modality dictionary: `K = table · proj_k`,
/// `V = table · proj_v`, each `[4, D]`. No image data enters here.
pub fn encode_metadata_tokens(table: &Tensor, proj_k: &Tensor, proj_v: &Tensor) -> Result<(Tensor, Tensor)> {
    let mut tape = Tape::new();
    let t = tape.constant(table.clone());
    let pk = tape.constant(proj_k.clone());
    let pv = tape.constant(proj_v.clone());
    let (k, v) = encode_tokens_on_tape(&mut tape, t, pk, pv)?;
    Ok((tape.value(k).clone(), tape.value(v).clone()))
}

fn encode_tokens_on_tape(tape: &mut Tape, table: Var, proj_k: Var, proj_v: Var) -> Result<(Var, Var)> {
    if tape.shape(table).first() != Some(&N_MODALITIES) {
        return Err(Error::dim(
            "encode_metadata_tokens",
            format!("dictionary must have {N_MODALITIES} rows, got {:?}", tape.shape(table)),
        ));
    }
    let k = tape.matmul(table, proj_k)?;
    let v = tape.matmul(table, proj_v)?;
    Ok((k, v))
}

/// Learned modality dictionary plus one linear projection each for K and V.
/// A single encoder is shared by every attention layer.
#[derive(Debug, Clone)]
pub struct MetadataEncoder {
    pub table: ParamId,
    pub proj_k: ParamId,
    pub proj_v: ParamId,
    embed_dim: usize,
}

impl MetadataEncoder {
    pub fn new(store: &mut ParamStore, prefix: &str, embed_dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            table: store.add(
                format!("{prefix}.modality_table"),
                Tensor::uniform(&[N_MODALITIES, EMBED_DIM], -1.0, 1.0, rng),
            ),
            proj_k: store.add_uniform(format!("{prefix}.proj_k"), &[EMBED_DIM, embed_dim], EMBED_DIM, rng),
            proj_v: store.add_uniform(format!("{prefix}.proj_v"), &[EMBED_DIM, embed_dim], EMBED_DIM, rng),
            embed_dim,
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn param_count(embed_dim: usize) -> usize {
        N_MODALITIES * EMBED_DIM + 2 * EMBED_DIM * embed_dim
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound) -> Result<(Var, Var)> {
        encode_tokens_on_tape(tape, p[self.table], p[self.proj_k], p[self.proj_v])
    }

    pub fn encode(&self, store: &ParamStore) -> Result<(Tensor, Tensor)> {
        encode_metadata_tokens(store.get(self.table), store.get(self.proj_k), store.get(self.proj_v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const NEG: f64 = f64::NEG_INFINITY;

    #[test]
    fn modality_order_and_names() {
        let names: Vec<&str> = ModalityId::ALL.iter().map(|m| m.name()).collect();
        assert_eq!(names, ["FLAIR", "T1c", "T1", "T2"]);
        for (i, m) in ModalityId::ALL.into_iter().enumerate() {
            assert_eq!(m.index(), i);
            assert_eq!(ModalityId::from_index(i), Some(m));
            assert_eq!(m.name().parse::<ModalityId>().unwrap(), m);
        }
        assert!("t1".parse::<ModalityId>().is_err());
        assert_eq!(serde_json::to_string(&ModalityId::T1c).unwrap(), "\"T1c\"");
    }

    #[test]
    fn mask_matrices() {
        let full = build_mask([true; 4], 2).unwrap();
        assert_eq!(full.additive().data(), &[0.0; 8]);
        let partial = build_mask([true, false, true, false], 1).unwrap();
        assert_eq!(partial.additive().data(), &[0.0, NEG, 0.0, NEG]);
        assert!(matches!(build_mask([false; 4], 3), Err(Error::NoModality)));
    }

    #[test]
    fn mask_columns_are_constant() {
        let m = build_mask([false, true, false, true], 5).unwrap().additive();
        for j in 0..4 {
            let col: Vec<u64> = (0..5).map(|i| m.at(&[i, j]).to_bits()).collect();
            assert!(col.windows(2).all(|w| w[0] == w[1]));
        }
    }

    #[test]
    fn zero_mlp_gives_zero_film() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let emb = MetadataEmbedder::new(&mut store, "meta", &mut rng);
        let head = FilmMlp::new(&mut store, "film", 8, &mut rng);
        for id in head.param_ids() {
            store.get_mut(id).data_mut().fill(0.0);
        }
        let ctx = emb.context(&store, ModalityId::T2, Plane::Coronal);
        let fp = film_mlp(&store, &head, &ctx, 8).unwrap();
        assert_eq!(fp.gamma.data(), &[0.0; 8]);
        assert_eq!(fp.beta.data(), &[0.0; 8]);
        assert!(matches!(film_mlp(&store, &head, &ctx, 16), Err(Error::Config { .. })));
    }

    #[test]
    fn distinct_sequences_give_distinct_gamma() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let emb = MetadataEmbedder::new(&mut store, "meta", &mut rng);
        let head = FilmMlp::new(&mut store, "film", 16, &mut rng);
        let a = head
            .film_params(&store, &emb.context(&store, ModalityId::T1, Plane::Axial), 16)
            .unwrap();
        let b = head
            .film_params(&store, &emb.context(&store, ModalityId::T2, Plane::Axial), 16)
            .unwrap();
        assert!(a.gamma.max_abs_diff(&b.gamma) > 1e-6);
    }

    #[test]
    fn film_head_parameter_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for c in [1, 8, 128, 512] {
            let mut store = ParamStore::new();
            FilmMlp::new(&mut store, "film", c, &mut rng);
            let hidden = 32 * 64 + 64;
            assert_eq!(store.total_params(), hidden + 64 * 2 * c + 2 * c);
            assert_eq!(FilmMlp::param_count(c), store.total_params());
            // hidden width does not depend on C
            assert_eq!(store.get(store.find("film.w1").unwrap()).shape(), &[32, 64]);
        }
        assert_eq!(FilmMlp::param_count(128), 18_752);
    }

    #[test]
    fn identity_encoder() {
        let table = Tensor::from_fn(&[4, 4], |i| f64::from(u8::from(i % 5 == 0)));
        let (k, v) = encode_metadata_tokens(&table, &table, &table).unwrap();
        assert!(k.bit_eq(&table));
        assert!(v.bit_eq(&table));
    }

    #[test]
    fn token_shape_is_dictionary_sized() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let enc = MetadataEncoder::new(&mut store, "enc", 12, &mut rng);
        let (k, v) = enc.encode(&store).unwrap();
        assert_eq!(k.shape(), &[4, 12]);
        assert_eq!(v.shape(), &[4, 12]);
        assert_eq!(store.total_params(), MetadataEncoder::param_count(12));
    }
}
