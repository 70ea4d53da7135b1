//! C ABI over the `metaroute` kernels.
//!
//! Every fallible function returns an [`MrStatus`]; on failure the message is
//! available from [`mr_last_error_message`] on the same thread. Buffers are
//! caller-owned, row-major `double` arrays whose lengths are passed
//! explicitly. Availability patterns are 4-bit masks: bit 0 FLAIR, bit 1
//! T1c, bit 2 T1, bit 3 T2.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use metaroute::complexity::{compare_bottlenecks, BottleneckConfig};
use metaroute::metadata::{MetadataEncoder, N_MODALITIES};
use metaroute::ops::masked_softmax;
use metaroute::seg::{dice_score, LabelVolume, SegBatch, SegModel, SegModelConfig};
use metaroute::{AttentionMode, Error, ModalityMask, ParamStore, Tape, Tensor, TmaxBlock, TmaxConfig};

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MrStatus {
    Ok = 0,
    NullPointer = 1,
    Dimension = 2,
    DegenerateMask = 3,
    NoModality = 4,
    Config = 5,
    Numeric = 6,
    EmptyInput = 7,
    Format = 8,
    Io = 9,
    Panic = 10,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MrAttentionMode {
    SelfAttention = 0,
    MetadataCross = 1,
}

impl From<MrAttentionMode> for AttentionMode {
    fn from(m: MrAttentionMode) -> Self {
        match m {
            MrAttentionMode::SelfAttention => AttentionMode::SelfAttention,
            MrAttentionMode::MetadataCross => AttentionMode::MetadataCross,
        }
    }
}

/// Bottleneck shape for [`mr_compare_bottlenecks`].
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct MrBottleneck {
    pub mode: MrAttentionMode,
    pub n_tokens: u64,
    pub embed_dim: u64,
    pub ffn_hidden: u64,
    pub n_layers: u64,
}

/// Totals and reductions from [`mr_compare_bottlenecks`].
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct MrComparison {
    pub baseline_params: u64,
    pub baseline_flops: u64,
    pub ours_params: u64,
    pub ours_flops: u64,
    pub params_reduction_pct: f64,
    pub flops_reduction_pct: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> MrStatus {
    match e {
        Error::Dimension { .. } => MrStatus::Dimension,
        Error::DegenerateMask { .. } => MrStatus::DegenerateMask,
        Error::NoModality => MrStatus::NoModality,
        Error::Config { .. } => MrStatus::Config,
        Error::NumericInstability { .. } => MrStatus::Numeric,
        Error::EmptyInput(_) => MrStatus::EmptyInput,
        Error::Format(_) => MrStatus::Format,
        Error::Io { .. } => MrStatus::Io,
    }
}

enum Failure {
    Null(&'static str),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> MrStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            MrStatus::Ok
        }
        Ok(Err(Failure::Null(what))) => {
            set_error(format!("null pointer: {what}"));
            MrStatus::NullPointer
        }
        Ok(Err(Failure::Core(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic".into());
            MrStatus::Panic
        }
    }
}

unsafe fn input<'a, T>(ptr: *const T, len: usize, what: &'static str) -> Result<&'a [T], Failure> {
    if ptr.is_null() {
        return Err(Failure::Null(what));
    }
    // SAFETY: caller guarantees `ptr` points to `len` readable elements.
    Ok(unsafe { std::slice::from_raw_parts(ptr, len) })
}

unsafe fn output<'a, T>(ptr: *mut T, len: usize, what: &'static str) -> Result<&'a mut [T], Failure> {
    if ptr.is_null() {
        return Err(Failure::Null(what));
    }
    // SAFETY: caller guarantees `ptr` points to `len` writable elements.
    Ok(unsafe { std::slice::from_raw_parts_mut(ptr, len) })
}

unsafe fn write_one<T>(ptr: *mut T, value: T) -> Result<(), Failure> {
    if ptr.is_null() {
        return Err(Failure::Null("out"));
    }
    // SAFETY: caller guarantees `ptr` is writable and aligned.
    unsafe { ptr.write(value) };
    Ok(())
}

fn availability(bits: u32) -> Result<[bool; N_MODALITIES], Failure> {
    if bits >= 1 << N_MODALITIES {
        return Err(Failure::Core(Error::Config {
            key: "availability".into(),
            message: format!("mask {bits:#x} has bits beyond the 4 modalities"),
        }));
    }
    Ok(std::array::from_fn(|m| bits >> m & 1 == 1))
}

/// Message of the last failed call on this thread, or NULL after a success.
/// The pointer stays valid until the next call into this library on the
/// same thread.
#[no_mangle]
pub extern "C" fn mr_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn mr_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Additive availability mask `[n_tokens x 4]`: 0 for available columns,
/// negative infinity for missing ones.
///
/// # Safety
/// `out` must point to `n_tokens * 4` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn mr_build_mask(available_bits: u32, n_tokens: usize, out: *mut f64) -> MrStatus {
    guard(|| {
        let mask = ModalityMask::new(availability(available_bits)?, n_tokens)?;
        let dst = unsafe { output(out, n_tokens * N_MODALITIES, "out")? };
        dst.copy_from_slice(mask.additive().data());
        Ok(())
    })
}

/// Row-wise softmax of `scores + mask` for `[rows x cols]` inputs. Mask
/// entries must be 0 or negative infinity, with at least one 0 per row.
///
/// # Safety
/// `scores`, `mask` and `out` must each point to `rows * cols` doubles.
#[no_mangle]
pub unsafe extern "C" fn mr_masked_softmax(
    scores: *const f64,
    mask: *const f64,
    rows: usize,
    cols: usize,
    out: *mut f64,
) -> MrStatus {
    guard(|| {
        let n = rows * cols;
        let s = Tensor::new(&[rows, cols], unsafe { input(scores, n, "scores")? }.to_vec())?;
        let m = Tensor::new(&[rows, cols], unsafe { input(mask, n, "mask")? }.to_vec())?;
        let a = masked_softmax(&s, &m)?;
        unsafe { output(out, n, "out")? }.copy_from_slice(a.data());
        Ok(())
    })
}

/// Logit plus weighted-sum FLOPs of one attention layer.
///
/// # Safety
/// `out` must point to one writable `uint64_t`.
#[no_mangle]
pub unsafe extern "C" fn mr_attention_flops(
    n_tokens: u64,
    embed_dim: usize,
    mode: MrAttentionMode,
    out: *mut u64,
) -> MrStatus {
    guard(|| {
        let cfg = TmaxConfig::with_dim(embed_dim);
        cfg.validate()?;
        let value = metaroute::attention_flops(&cfg, n_tokens, mode.into());
        unsafe { write_one(out, value) }
    })
}

/// Compare a baseline bottleneck against ours; both must share token count
/// and width.
///
/// # Safety
/// `out` must point to one writable `MrComparison`.
#[no_mangle]
pub unsafe extern "C" fn mr_compare_bottlenecks(
    baseline: MrBottleneck,
    ours: MrBottleneck,
    out: *mut MrComparison,
) -> MrStatus {
    guard(|| {
        let conv = |b: MrBottleneck| BottleneckConfig {
            mode: b.mode.into(),
            n_tokens: b.n_tokens,
            embed_dim: b.embed_dim,
            ffn_hidden: b.ffn_hidden,
            n_layers: b.n_layers,
        };
        let report = compare_bottlenecks(&conv(baseline), &conv(ours))?;
        let cmp = report.comparison.as_ref().expect("comparison report");
        let value = MrComparison {
            baseline_params: cmp.baseline_params,
            baseline_flops: cmp.baseline_flops,
            ours_params: report.total_params,
            ours_flops: report.total_flops,
            params_reduction_pct: cmp.params_reduction_pct,
            flops_reduction_pct: cmp.flops_reduction_pct,
        };
        unsafe { write_one(out, value) }
    })
}

/// Dice overlap of one class between two label arrays of length `len`.
///
/// # Safety
/// `pred` and `target` must point to `len` labels; `out` to one double.
#[no_mangle]
pub unsafe extern "C" fn mr_dice_score(
    pred: *const u32,
    target: *const u32,
    len: usize,
    class_id: u32,
    out: *mut f64,
) -> MrStatus {
    guard(|| {
        let to_volume = |s: &[u32]| LabelVolume::new([1, 1, s.len()], s.iter().map(|&v| v as usize).collect());
        let p = to_volume(unsafe { input(pred, len, "pred")? })?;
        let t = to_volume(unsafe { input(target, len, "target")? })?;
        let value = dice_score(&p, &t, class_id as usize)?;
        unsafe { write_one(out, value) }
    })
}

/// One attention layer with its own metadata dictionary.
pub struct MrTmaxModel {
    store: ParamStore,
    encoder: MetadataEncoder,
    block: TmaxBlock,
    cfg: TmaxConfig,
}

/// Create a randomly initialised attention layer of width `embed_dim`.
///
/// # Safety
/// `out` must point to a writable handle slot. Release with [`mr_tmax_free`].
#[no_mangle]
pub unsafe extern "C" fn mr_tmax_new(
    embed_dim: usize,
    ffn_hidden: usize,
    seed: u64,
    out: *mut *mut MrTmaxModel,
) -> MrStatus {
    guard(|| {
        let slot = unsafe { output(out, 1, "out")? };
        let cfg = TmaxConfig {
            ffn_hidden,
            ..TmaxConfig::with_dim(embed_dim)
        };
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = MetadataEncoder::new(&mut store, "meta", embed_dim, &mut rng);
        let block = TmaxBlock::new(&mut store, "tmax", &cfg, &mut rng)?;
        slot[0] = Box::into_raw(Box::new(MrTmaxModel { store, encoder, block, cfg }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`mr_tmax_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mr_tmax_free(model: *mut MrTmaxModel) {
    if !model.is_null() {
        // SAFETY: created by Box::into_raw in mr_tmax_new.
        drop(unsafe { Box::from_raw(model) });
    }
}

/// Run the layer on `tokens [n_tokens x embed_dim]`, writing the output
/// tokens to `out` (same size) and, when `attention_out` is not NULL, the
/// `[n_tokens x 4]` attention weights.
///
/// # Safety
/// `model` must be a live handle; buffers must have the sizes above.
#[no_mangle]
pub unsafe extern "C" fn mr_tmax_forward(
    model: *const MrTmaxModel,
    tokens: *const f64,
    n_tokens: usize,
    available_bits: u32,
    out: *mut f64,
    attention_out: *mut f64,
) -> MrStatus {
    guard(|| {
        let m = unsafe { model.as_ref() }.ok_or(Failure::Null("model"))?;
        let d = m.cfg.embed_dim;
        let q = Tensor::new(&[n_tokens, d], unsafe { input(tokens, n_tokens * d, "tokens")? }.to_vec())?;
        let mask = ModalityMask::new(availability(available_bits)?, n_tokens)?;
        let mut tape = Tape::new();
        let p = m.store.bind_frozen(&mut tape);
        let qv = tape.constant(q);
        let (k, v) = m.encoder.forward(&mut tape, &p)?;
        let tr = m.block.forward_traced(&mut tape, &p, qv, k, v, &mask)?;
        unsafe { output(out, n_tokens * d, "out")? }.copy_from_slice(tape.value(tr.output).data());
        if !attention_out.is_null() {
            unsafe { output(attention_out, n_tokens * N_MODALITIES, "attention_out")? }
                .copy_from_slice(tape.value(tr.attention).data());
        }
        Ok(())
    })
}

/// Segmentation network with the default configuration.
pub struct MrSegModel {
    model: SegModel,
}

/// Create a segmentation model for cubic volumes of side `extent`.
///
/// # Safety
/// `out` must point to a writable handle slot. Release with [`mr_seg_free`].
#[no_mangle]
pub unsafe extern "C" fn mr_seg_new(extent: usize, seed: u64, out: *mut *mut MrSegModel) -> MrStatus {
    guard(|| {
        let slot = unsafe { output(out, 1, "out")? };
        let model = SegModel::new(SegModelConfig::default(), [extent; 3], seed)?;
        slot[0] = Box::into_raw(Box::new(MrSegModel { model }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`mr_seg_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mr_seg_free(model: *mut MrSegModel) {
    if !model.is_null() {
        // SAFETY: created by Box::into_raw in mr_seg_new.
        drop(unsafe { Box::from_raw(model) });
    }
}

/// Replace the weights with a checkpoint written by `metaroute train-seg`.
///
/// # Safety
/// `model` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn mr_seg_load(model: *mut MrSegModel, path: *const c_char) -> MrStatus {
    guard(|| {
        let m = unsafe { model.as_mut() }.ok_or(Failure::Null("model"))?;
        if path.is_null() {
            return Err(Failure::Null("path"));
        }
        let p = PathBuf::from(unsafe { CStr::from_ptr(path) }.to_string_lossy().into_owned());
        m.model.load_weights(p)?;
        Ok(())
    })
}

/// Predict labels for `volumes [4 x e x e x e]`. Channels of missing
/// modalities are ignored. `labels` receives `e^3` class ids.
///
/// # Safety
/// `model` must be a live handle; buffers must have the sizes above.
#[no_mangle]
pub unsafe extern "C" fn mr_seg_predict(
    model: *const MrSegModel,
    volumes: *const f64,
    available_bits: u32,
    labels: *mut u32,
) -> MrStatus {
    guard(|| {
        let m = unsafe { model.as_ref() }.ok_or(Failure::Null("model"))?;
        let e = m.model.extent();
        let n: usize = e.iter().product();
        let data = unsafe { input(volumes, N_MODALITIES * n, "volumes")? }.to_vec();
        let mask = ModalityMask::new(availability(available_bits)?, m.model.n_tokens())?;
        let batch = SegBatch {
            volumes: Tensor::new(&[N_MODALITIES, e[0], e[1], e[2]], data)?,
            mask,
            target: LabelVolume::new(e, vec![0; n])?,
        }
        .with_availability(mask);
        let pred = m.model.predict(&batch)?;
        let dst = unsafe { output(labels, n, "labels")? };
        for (d, &l) in dst.iter_mut().zip(&pred.labels) {
            *d = l as u32;
        }
        Ok(())
    })
}
