//! Analytic parameter and FLOP accounting.
//!
//! Costs are computed from a flat list of layer descriptions. Per-op
//! formulas (one multiply-add counts as 2 FLOPs):
//!
//! | op | params | flops |
//! |----|--------|-------|
//! | linear `[N, i] -> [N, o]` | `i*o (+ o)` | `2*N*i*o (+ N*o)` |
//! | attention, `K` keys | 0 | `2*N*K*D` logits + `N*K` scale + `5*N*K` softmax + `2*N*K*D` weighted sum |
//! | layer norm `[N, D]` | `2*D` | `8*N*D` |
//! | GELU / ReLU over `n` | 0 | `8*n` / `n` |
//! | residual add over `n` | 0 | `n` |
//! | conv3d | `Co*Ci*k^3 + Co` | `2*Co*Ci*k^3*V_out + Co*V_out` |
//! | table lookup | `rows*cols` | 0 |

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metadata::{EMBED_DIM, N_MODALITIES};
use crate::ops::conv_output_extent;
use crate::seg::{SegModelConfig, StemKind};
use crate::tmax::AttentionMode;

pub const SOFTMAX_FLOPS_PER_ELEMENT: u64 = 5;
pub const LAYER_NORM_FLOPS_PER_ELEMENT: u64 = 8;
pub const GELU_FLOPS_PER_ELEMENT: u64 = 8;

pub const FLOP_CONVENTION: &str = "one multiply-add = 2 FLOPs";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Gelu,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Linear { rows: u64, inputs: u64, outputs: u64, bias: bool },
    Attention { queries: u64, keys: u64, dim: u64 },
    LayerNorm { rows: u64, dim: u64 },
    Activation { elements: u64, function: Activation },
    Add { elements: u64 },
    Conv3d { in_channels: u64, out_channels: u64, kernel: u64, out_voxels: u64 },
    Table { rows: u64, cols: u64 },
}

impl LayerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Linear { .. } => "linear",
            LayerSpec::Attention { .. } => "attention",
            LayerSpec::LayerNorm { .. } => "layer_norm",
            LayerSpec::Activation { function: Activation::Relu, .. } => "relu",
            LayerSpec::Activation { function: Activation::Gelu, .. } => "gelu",
            LayerSpec::Add { .. } => "add",
            LayerSpec::Conv3d { .. } => "conv3d",
            LayerSpec::Table { .. } => "table",
        }
    }

    pub fn params(&self) -> u64 {
        match *self {
            LayerSpec::Linear { inputs, outputs, bias, .. } => inputs * outputs + if bias { outputs } else { 0 },
            LayerSpec::LayerNorm { dim, .. } => 2 * dim,
            LayerSpec::Conv3d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => out_channels * in_channels * kernel.pow(3) + out_channels,
            LayerSpec::Table { rows, cols } => rows * cols,
            LayerSpec::Attention { .. } | LayerSpec::Activation { .. } | LayerSpec::Add { .. } => 0,
        }
    }

    pub fn flops(&self) -> u64 {
        match *self {
            LayerSpec::Linear { rows, inputs, outputs, bias } => {
                2 * rows * inputs * outputs + if bias { rows * outputs } else { 0 }
            }
            LayerSpec::Attention { queries, keys, dim } => {
                let scores = queries * keys;
                attention_core_flops(queries, keys, dim) + scores + SOFTMAX_FLOPS_PER_ELEMENT * scores
            }
            LayerSpec::LayerNorm { rows, dim } => LAYER_NORM_FLOPS_PER_ELEMENT * rows * dim,
            LayerSpec::Activation { elements, function } => match function {
                Activation::Relu => elements,
                Activation::Gelu => GELU_FLOPS_PER_ELEMENT * elements,
            },
            LayerSpec::Add { elements } => elements,
            LayerSpec::Conv3d {
                in_channels,
                out_channels,
                kernel,
                out_voxels,
            } => 2 * out_channels * in_channels * kernel.pow(3) * out_voxels + out_channels * out_voxels,
            LayerSpec::Table { .. } => 0,
        }
    }
}

/// Logits plus weighted sum: `4*N*K*D`.
pub fn attention_core_flops(queries: u64, keys: u64, dim: u64) -> u64 {
    4 * queries * keys * dim
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NamedLayer {
    pub name: String,
    pub spec: LayerSpec,
}

/// A model as an ordered list of layers.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDescription {
    pub layers: Vec<NamedLayer>,
}

impl ModelDescription {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, spec: LayerSpec) {
        self.layers.push(NamedLayer { name: name.into(), spec });
    }

    /// Sequential composition.
    pub fn then(mut self, other: ModelDescription) -> Self {
        self.layers.extend(other.layers);
        self
    }
}

pub fn count_params(model: &ModelDescription) -> u64 {
    model.layers.iter().map(|l| l.spec.params()).sum()
}

pub fn count_flops(model: &ModelDescription) -> u64 {
    model.layers.iter().map(|l| l.spec.flops()).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BottleneckConfig {
    pub mode: AttentionMode,
    pub n_tokens: u64,
    pub embed_dim: u64,
    pub ffn_hidden: u64,
    pub n_layers: u64,
}

impl BottleneckConfig {
    /// Stand-in pair used for the comparison report: 64 tokens of width 512,
    /// two layers, FFN width 1536.
    pub fn stand_in(mode: AttentionMode) -> Self {
        Self {
            mode,
            n_tokens: 64,
            embed_dim: 512,
            ffn_hidden: 1536,
            n_layers: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (key, v) in [
            ("n_tokens", self.n_tokens),
            ("embed_dim", self.embed_dim),
            ("ffn_hidden", self.ffn_hidden),
            ("n_layers", self.n_layers),
        ] {
            if v == 0 {
                return Err(Error::config(format!("bottleneck.{key}"), "must be positive"));
            }
        }
        Ok(())
    }
}

fn push_norm_ffn(m: &mut ModelDescription, l: u64, n: u64, d: u64, h: u64) {
    m.push(format!("layer{l}.residual"), LayerSpec::Add { elements: n * d });
    m.push(format!("layer{l}.norm"), LayerSpec::LayerNorm { rows: n, dim: d });
    m.push(format!("layer{l}.ffn1"), LayerSpec::Linear { rows: n, inputs: d, outputs: h, bias: true });
    m.push(format!("layer{l}.gelu"), LayerSpec::Activation { elements: n * h, function: Activation::Gelu });
    m.push(format!("layer{l}.ffn2"), LayerSpec::Linear { rows: n, inputs: h, outputs: d, bias: true });
    m.push(format!("layer{l}.ffn_residual"), LayerSpec::Add { elements: n * d });
}

/// Layer list of an isolated bottleneck.
///
/// The self-attention variant has biased Q, K, V and output projections
/// and attends over all tokens. The metadata variant uses the tokens as
/// queries directly and attends over the 4-entry dictionary, whose keys and
/// values are bias-free projections of 16-wide entries shared by all layers.
pub fn describe_bottleneck(cfg: &BottleneckConfig) -> Result<ModelDescription> {
    cfg.validate()?;
    let (n, d, h) = (cfg.n_tokens, cfg.embed_dim, cfg.ffn_hidden);
    let m_keys = N_MODALITIES as u64;
    let e = EMBED_DIM as u64;
    let mut m = ModelDescription::new();
    if cfg.mode == AttentionMode::MetadataCross {
        m.push("encoder.table", LayerSpec::Table { rows: m_keys, cols: e });
        m.push("encoder.proj_k", LayerSpec::Linear { rows: m_keys, inputs: e, outputs: d, bias: false });
        m.push("encoder.proj_v", LayerSpec::Linear { rows: m_keys, inputs: e, outputs: d, bias: false });
    }
    for l in 0..cfg.n_layers {
        match cfg.mode {
            AttentionMode::SelfAttention => {
                for proj in ["q_proj", "k_proj", "v_proj"] {
                    m.push(format!("layer{l}.{proj}"), LayerSpec::Linear { rows: n, inputs: d, outputs: d, bias: true });
                }
                m.push(format!("layer{l}.attention"), LayerSpec::Attention { queries: n, keys: n, dim: d });
                m.push(format!("layer{l}.out_proj"), LayerSpec::Linear { rows: n, inputs: d, outputs: d, bias: true });
            }
            AttentionMode::MetadataCross => {
                m.push(format!("layer{l}.attention"), LayerSpec::Attention { queries: n, keys: m_keys, dim: d });
            }
        }
        push_norm_ffn(&mut m, l, n, d, h);
    }
    Ok(m)
}

/// Layer list of a segmentation model at a given input extent. Its
/// parameter count matches the constructed model exactly.
pub fn describe_seg(cfg: &SegModelConfig, extent: [usize; 3]) -> Result<ModelDescription> {
    cfg.validate()?;
    let r = cfg.reduction();
    if extent.iter().any(|&e| e == 0 || e % r != 0) {
        return Err(Error::dim(
            "count_flops",
            format!("extent {extent:?} is not divisible by the {r}x encoder reduction"),
        ));
    }
    let vox = |e: [usize; 3]| e.iter().product::<usize>() as u64;
    let mut m = ModelDescription::new();
    let full = vox(extent);
    let stem_width = cfg.encoder_channels[0] as u64;
    let mut c = match cfg.stem {
        StemKind::Conv => {
            for i in 0..N_MODALITIES {
                m.push(format!("stem{i}"), LayerSpec::Conv3d { in_channels: 1, out_channels: stem_width, kernel: 3, out_voxels: full });
                m.push(format!("stem{i}.relu"), LayerSpec::Activation { elements: stem_width * full, function: Activation::Relu });
            }
            N_MODALITIES as u64 * stem_width
        }
        StemKind::Direct => N_MODALITIES as u64,
    };
    let fused = c;
    let mut e = extent;
    for (i, &w) in cfg.encoder_channels[1..].iter().enumerate() {
        e = e.map(|x| conv_output_extent(x, 2, 2, 0).expect("validated extent"));
        let w = w as u64;
        m.push(format!("down{i}"), LayerSpec::Conv3d { in_channels: c, out_channels: w, kernel: 2, out_voxels: vox(e) });
        m.push(format!("down{i}.relu"), LayerSpec::Activation { elements: w * vox(e), function: Activation::Relu });
        c = w;
    }
    let p = cfg.tmax.patch_size as u64;
    let d = cfg.tmax.embed_dim as u64;
    let grid = e.map(|x| x / cfg.tmax.patch_size);
    let n = vox(grid);
    m.push("embed", LayerSpec::Conv3d { in_channels: c, out_channels: d, kernel: p, out_voxels: n });
    m.push("embed.positional", LayerSpec::Table { rows: n, cols: d });
    m.push("embed.add_positional", LayerSpec::Add { elements: n * d });
    let bottleneck = describe_bottleneck(&BottleneckConfig {
        mode: AttentionMode::MetadataCross,
        n_tokens: n,
        embed_dim: d,
        ffn_hidden: cfg.tmax.ffn_hidden as u64,
        n_layers: cfg.tmax.n_layers as u64,
    })?;
    m = m.then(bottleneck);
    let mut c = d;
    let mut e = grid;
    let n_dec = cfg.decoder_channels.len();
    for (i, &w) in cfg.decoder_channels.iter().enumerate() {
        e = e.map(|x| x * 2);
        let w = w as u64;
        m.push(format!("dec{i}"), LayerSpec::Conv3d { in_channels: c, out_channels: w, kernel: 3, out_voxels: vox(e) });
        m.push(format!("dec{i}.relu"), LayerSpec::Activation { elements: w * vox(e), function: Activation::Relu });
        if cfg.deep_supervision && i + 1 < n_dec {
            m.push(
                format!("aux{i}"),
                LayerSpec::Conv3d { in_channels: w, out_channels: cfg.n_seg_classes as u64, kernel: 1, out_voxels: vox(e) },
            );
        }
        c = w;
    }
    if cfg.skip_connection {
        c += fused;
    }
    m.push("head", LayerSpec::Conv3d { in_channels: c, out_channels: cfg.n_seg_classes as u64, kernel: 1, out_voxels: full });
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ReportRow {
    pub layer: String,
    pub kind: String,
    pub params: u64,
    pub flops: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    pub baseline: Vec<ReportRow>,
    pub baseline_params: u64,
    pub baseline_flops: u64,
    pub params_reduction_pct: f64,
    pub flops_reduction_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComplexityReport {
    pub rows: Vec<ReportRow>,
    pub total_params: u64,
    pub total_flops: u64,
    pub comparison: Option<Comparison>,
}

/// `(1 - ours/baseline) * 100`, rounded to one decimal.
pub fn reduction_pct(baseline: u64, ours: u64) -> Option<f64> {
    (baseline > 0).then(|| ((1.0 - ours as f64 / baseline as f64) * 1000.0).round() / 10.0)
}

fn rows_of(model: &ModelDescription) -> Vec<ReportRow> {
    model
        .layers
        .iter()
        .map(|l| ReportRow {
            layer: l.name.clone(),
            kind: l.spec.kind().to_string(),
            params: l.spec.params(),
            flops: l.spec.flops(),
        })
        .collect()
}

impl ComplexityReport {
    pub fn of(model: &ModelDescription) -> Self {
        let rows = rows_of(model);
        Self {
            total_params: rows.iter().map(|r| r.params).sum(),
            total_flops: rows.iter().map(|r| r.flops).sum(),
            rows,
            comparison: None,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,kind,params,flops\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{}", r.layer, r.kind, r.params, r.flops);
        }
        let _ = writeln!(s, "total,,{},{}", self.total_params, self.total_flops);
        s
    }

    /// Layer-aligned comparison: one row per layer name present in either
    /// model (zeros where absent), then a total row. `reduction_pct_params`
    /// and `reduction_pct_flops` are empty when the baseline count is zero.
    pub fn comparison_csv(&self) -> Option<String> {
        let cmp = self.comparison.as_ref()?;
        let mut names: Vec<(&str, &str)> = cmp.baseline.iter().map(|r| (r.layer.as_str(), r.kind.as_str())).collect();
        for r in &self.rows {
            if !names.iter().any(|(n, _)| *n == r.layer) {
                names.push((&r.layer, &r.kind));
            }
        }
        let find = |rows: &[ReportRow], name: &str| {
            rows.iter()
                .find(|r| r.layer == name)
                .map_or((0, 0), |r| (r.params, r.flops))
        };
        let pct = |b: u64, o: u64| reduction_pct(b, o).map_or(String::new(), |p| format!("{p:.1}"));
        let mut s = String::from(
            "layer,kind,baseline_params,baseline_flops,ours_params,ours_flops,reduction_pct_params,reduction_pct_flops\n",
        );
        for (name, kind) in names {
            let (bp, bf) = find(&cmp.baseline, name);
            let (op, of) = find(&self.rows, name);
            let _ = writeln!(s, "{name},{kind},{bp},{bf},{op},{of},{},{}", pct(bp, op), pct(bf, of));
        }
        let _ = writeln!(
            s,
            "total,,{},{},{},{},{:.1},{:.1}",
            cmp.baseline_params,
            cmp.baseline_flops,
            self.total_params,
            self.total_flops,
            cmp.params_reduction_pct,
            cmp.flops_reduction_pct
        );
        Some(s)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("# FLOP convention: {FLOP_CONVENTION}\n");
        let _ = writeln!(s, "{:<24} {:<11} {:>14} {:>18}", "layer", "kind", "params", "flops");
        for r in &self.rows {
            let _ = writeln!(s, "{:<24} {:<11} {:>14} {:>18}", r.layer, r.kind, r.params, r.flops);
        }
        let _ = writeln!(s, "{:<24} {:<11} {:>14} {:>18}", "total", "", self.total_params, self.total_flops);
        if let Some(c) = &self.comparison {
            let _ = writeln!(s);
            let _ = writeln!(s, "{:<10} {:>14} {:>18}", "", "params", "flops");
            let _ = writeln!(s, "{:<10} {:>14} {:>18}", "baseline", c.baseline_params, c.baseline_flops);
            let _ = writeln!(s, "{:<10} {:>14} {:>18}", "ours", self.total_params, self.total_flops);
            let _ = writeln!(
                s,
                "{:<10} {:>13.1}% {:>17.1}%",
                "reduction", c.params_reduction_pct, c.flops_reduction_pct
            );
        }
        s
    }
}

/// Report for `cross_cfg` with `self_cfg` as the baseline.
pub fn compare_bottlenecks(self_cfg: &BottleneckConfig, cross_cfg: &BottleneckConfig) -> Result<ComplexityReport> {
    if self_cfg.n_tokens != cross_cfg.n_tokens {
        return Err(Error::config(
            "bottleneck.n_tokens",
            format!("baseline has {} tokens, ours {}", self_cfg.n_tokens, cross_cfg.n_tokens),
        ));
    }
    if self_cfg.embed_dim != cross_cfg.embed_dim {
        return Err(Error::config(
            "bottleneck.embed_dim",
            format!("baseline width {}, ours {}", self_cfg.embed_dim, cross_cfg.embed_dim),
        ));
    }
    let base = ComplexityReport::of(&describe_bottleneck(self_cfg)?);
    let mut ours = ComplexityReport::of(&describe_bottleneck(cross_cfg)?);
    ours.comparison = Some(Comparison {
        params_reduction_pct: reduction_pct(base.total_params, ours.total_params).unwrap_or(0.0),
        flops_reduction_pct: reduction_pct(base.total_flops, ours.total_flops).unwrap_or(0.0),
        baseline_params: base.total_params,
        baseline_flops: base.total_flops,
        baseline: base.rows,
    });
    Ok(ours)
}
