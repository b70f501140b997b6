//! Static parameter / FLOP accounting over declarative layer specs, and a
//! wall-clock latency harness.
//!
//! FLOPs count one multiply-accumulate as two operations.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::concepts::{retrieve_concepts, AlignmentMLP, ConceptVocabulary};
use crate::decoder::{decode_step, encode_context};
use crate::error::{Error, Result};
use crate::model::{CaptionModel, ModelConfig, SEGMENTS};
use crate::tensor::Tensor;
use crate::tokenizer::Specials;
use crate::vision::{GridFeature, Region};

pub const FLOP_CONVENTION: &str = "1 multiply-accumulate = 2 FLOPs";

fn yes() -> bool {
    true
}

fn one() -> usize {
    1
}

/// One counted operation. Unknown `kind`s are rejected when parsing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Op {
    /// `in × out` matrix applied at `positions` rows. A `shared_weight`
    /// linear reuses a matrix counted elsewhere (only its bias is owned).
    Linear {
        name: String,
        #[serde(rename = "in")]
        input: usize,
        out: usize,
        #[serde(default = "yes")]
        bias: bool,
        #[serde(default = "one")]
        positions: usize,
        #[serde(default)]
        shared_weight: bool,
    },
    /// 2-D convolution on an `in_h × in_w` input.
    Conv {
        name: String,
        k: usize,
        cin: usize,
        cout: usize,
        #[serde(default = "one")]
        stride: usize,
        /// Defaults to `k / 2`.
        #[serde(default)]
        padding: Option<usize>,
        in_h: usize,
        in_w: usize,
        #[serde(default)]
        bias: bool,
    },
    Embedding {
        name: String,
        vocab: usize,
        dim: usize,
    },
    /// Scaled dot-product attention over `seq` rows with four `dim × dim`
    /// projections (with bias).
    Attention {
        name: String,
        dim: usize,
        heads: usize,
        seq: usize,
    },
    /// Affine normalization (layer or batch norm): gain and bias.
    Norm { name: String, dim: usize },
}

impl Op {
    pub fn name(&self) -> &str {
        match self {
            Op::Linear { name, .. }
            | Op::Conv { name, .. }
            | Op::Embedding { name, .. }
            | Op::Attention { name, .. }
            | Op::Norm { name, .. } => name,
        }
    }

    fn conv_out(
        k: usize,
        stride: usize,
        padding: Option<usize>,
        h: usize,
        w: usize,
    ) -> (usize, usize) {
        let p = padding.unwrap_or(k / 2);
        let o = |x: usize| (x + 2 * p).saturating_sub(k) / stride.max(1) + 1;
        (o(h), o(w))
    }

    pub fn params(&self) -> u64 {
        match *self {
            Op::Linear {
                input,
                out,
                bias,
                shared_weight,
                ..
            } => (if shared_weight { 0 } else { input * out } + if bias { out } else { 0 }) as u64,
            Op::Conv {
                k, cin, cout, bias, ..
            } => (k * k * cin * cout + if bias { cout } else { 0 }) as u64,
            Op::Embedding { vocab, dim, .. } => (vocab * dim) as u64,
            Op::Attention { dim, .. } => (4 * (dim * dim + dim)) as u64,
            Op::Norm { dim, .. } => (2 * dim) as u64,
        }
    }

    pub fn flops(&self) -> u64 {
        match *self {
            Op::Linear {
                input,
                out,
                positions,
                ..
            } => 2 * (input * out * positions) as u64,
            Op::Conv {
                k,
                cin,
                cout,
                stride,
                padding,
                in_h,
                in_w,
                ..
            } => {
                let (ho, wo) = Self::conv_out(k, stride, padding, in_h, in_w);
                2 * (k * k * cin * cout * ho * wo) as u64
            }
            Op::Embedding { .. } | Op::Norm { .. } => 0,
            Op::Attention { dim, seq, .. } => {
                let (d, t) = (dim as u64, seq as u64);
                4 * 2 * d * d * t + 2 * t * t * d + 2 * t * t * d
            }
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub name: String,
    pub ops: Vec<Op>,
}

impl LayerSpec {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            ops: Vec::new(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn params(&self) -> u64 {
        self.ops.iter().map(Op::params).sum()
    }

    pub fn flops(&self) -> u64 {
        self.ops.iter().map(Op::flops).sum()
    }

    /// Concatenation of two specs.
    pub fn join(mut self, other: LayerSpec) -> Self {
        self.ops.extend(other.ops);
        self
    }

    fn linear(&mut self, name: String, input: usize, out: usize, positions: usize) {
        self.ops.push(Op::Linear {
            name,
            input,
            out,
            bias: true,
            positions,
            shared_weight: false,
        });
    }

    fn norm(&mut self, name: String, dim: usize) {
        self.ops.push(Op::Norm { name, dim });
    }

    /// Convolution without bias followed by batch norm. Returns the output
    /// side length.
    fn conv_bn(
        &mut self,
        name: &str,
        k: usize,
        cin: usize,
        cout: usize,
        stride: usize,
        side: usize,
    ) -> usize {
        let op = Op::Conv {
            name: format!("{name}.conv"),
            k,
            cin,
            cout,
            stride,
            padding: None,
            in_h: side,
            in_w: side,
            bias: false,
        };
        let out = Op::conv_out(k, stride, None, side, side).0;
        self.ops.push(op);
        self.norm(format!("{name}.bn"), cout);
        out
    }
}

/// Token counts behind a fusion FLOP figure.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeqAssumption {
    pub visual: usize,
    pub concepts: usize,
    /// Generated words; the head runs at `caption + 1` positions (the last
    /// predicts `[SEP]`).
    pub caption: usize,
}

impl SeqAssumption {
    /// 7×7 grid, top-20 concepts, 20-word caption.
    pub fn standard() -> Self {
        Self {
            visual: 49,
            concepts: 20,
            caption: 20,
        }
    }

    /// Rows of one uncached forward: context, `[CLS]` and caption.
    pub fn rows(&self) -> usize {
        self.visual + self.concepts + 1 + self.caption
    }
}

/// Spec of the modulator: `d → m → C`, run once per concept token.
pub fn modulator_spec(cfg: &ModelConfig, concepts: usize) -> LayerSpec {
    let mut s = LayerSpec::new("modulator");
    s.linear(
        "modulator.fc1".into(),
        cfg.hidden,
        cfg.modulator_hidden,
        concepts,
    );
    s.linear(
        "modulator.fc2".into(),
        cfg.modulator_hidden,
        cfg.grid_channels,
        concepts,
    );
    s
}

/// Embeddings, visual projection, encoder layers and pollution classifier.
pub fn fusion_spec(cfg: &ModelConfig, seq: &SeqAssumption) -> LayerSpec {
    let (d, t) = (cfg.hidden, seq.rows());
    let mut s = LayerSpec::new("fusion");
    s.ops.push(Op::Embedding {
        name: "embed.word".into(),
        vocab: cfg.vocab_size,
        dim: d,
    });
    s.ops.push(Op::Embedding {
        name: "embed.position".into(),
        vocab: cfg.max_positions,
        dim: d,
    });
    s.ops.push(Op::Embedding {
        name: "embed.segment".into(),
        vocab: SEGMENTS,
        dim: d,
    });
    s.norm("embed.ln".into(), d);
    s.linear("visual.proj".into(), cfg.grid_channels, d, seq.visual);
    for l in 0..cfg.layers {
        s.ops.push(Op::Attention {
            name: format!("layer{l}.attn"),
            dim: d,
            heads: cfg.heads,
            seq: t,
        });
        s.norm(format!("layer{l}.attn.ln"), d);
        s.linear(format!("layer{l}.ffn.in"), d, cfg.ffn, t);
        s.linear(format!("layer{l}.ffn.out"), cfg.ffn, d, t);
        s.norm(format!("layer{l}.ffn.ln"), d);
    }
    s.linear("pollution".into(), d, 1, 1);
    s
}

/// Ensemble branches; the output projection reuses the word embedding.
pub fn head_spec(cfg: &ModelConfig, seq: &SeqAssumption) -> LayerSpec {
    let (d, n) = (cfg.hidden, seq.caption + 1);
    let mut s = LayerSpec::new("ensemble_head");
    for b in 0..cfg.branches {
        s.linear(format!("head{b}.proj"), d, d, n);
        s.norm(format!("head{b}.ln"), d);
        s.ops.push(Op::Linear {
            name: format!("head{b}.out"),
            input: d,
            out: cfg.vocab_size,
            bias: true,
            positions: n,
            shared_weight: true,
        });
    }
    s
}

/// Every parameter tensor of a [`CaptionModel`] with this config.
pub fn model_spec(cfg: &ModelConfig, seq: &SeqAssumption) -> LayerSpec {
    let mut s = fusion_spec(cfg, seq)
        .join(modulator_spec(cfg, seq.concepts))
        .join(head_spec(cfg, seq));
    s.name = "caption_model".into();
    s
}

/// Bottleneck ResNet-50 trunk at 224×224 without the classifier, ending in
/// the 7×7×2048 grid.
pub fn resnet50_spec() -> LayerSpec {
    let mut s = LayerSpec::new("resnet50");
    let mut side = s.conv_bn("stem", 7, 3, 64, 2, 224);
    side = (side + 2 - 3) / 2 + 1; // 3×3 max pool, stride 2
    let mut cin = 64;
    for (stage, (&blocks, &width)) in [3usize, 4, 6, 3]
        .iter()
        .zip(&[64usize, 128, 256, 512])
        .enumerate()
    {
        for b in 0..blocks {
            let stride = if b == 0 && stage > 0 { 2 } else { 1 };
            let name = format!("layer{}.{b}", stage + 1);
            s.conv_bn(&format!("{name}.conv1"), 1, cin, width, 1, side);
            let out = s.conv_bn(&format!("{name}.conv2"), 3, width, width, stride, side);
            s.conv_bn(&format!("{name}.conv3"), 1, width, width * 4, 1, out);
            if b == 0 {
                s.conv_bn(
                    &format!("{name}.downsample"),
                    1,
                    cin,
                    width * 4,
                    stride,
                    side,
                );
            }
            cin = width * 4;
            side = out;
        }
    }
    s
}

/// YOLOv5n (width 0.25, depth 0.33) at `size`×`size` with `classes` outputs
/// per anchor. Pooling, upsampling and concatenation carry no parameters
/// and are not counted.
pub fn yolov5n_spec(classes: usize, size: usize) -> LayerSpec {
    let mut s = LayerSpec::new("yolov5n");
    let conv = |s: &mut LayerSpec,
                name: &str,
                k: usize,
                cin: usize,
                cout: usize,
                stride: usize,
                side: usize| {
        if k == 6 {
            // Stem: 6×6, stride 2, padding 2.
            s.ops.push(Op::Conv {
                name: format!("{name}.conv"),
                k,
                cin,
                cout,
                stride,
                padding: Some(2),
                in_h: side,
                in_w: side,
                bias: false,
            });
            s.norm(format!("{name}.bn"), cout);
            side / 2
        } else {
            s.conv_bn(name, k, cin, cout, stride, side)
        }
    };
    let c3 = |s: &mut LayerSpec, name: &str, cin: usize, cout: usize, n: usize, side: usize| {
        let c = cout / 2;
        s.conv_bn(&format!("{name}.cv1"), 1, cin, c, 1, side);
        s.conv_bn(&format!("{name}.cv2"), 1, cin, c, 1, side);
        for i in 0..n {
            s.conv_bn(&format!("{name}.m{i}.cv1"), 1, c, c, 1, side);
            s.conv_bn(&format!("{name}.m{i}.cv2"), 3, c, c, 1, side);
        }
        s.conv_bn(&format!("{name}.cv3"), 1, 2 * c, cout, 1, side);
    };
    let mut side = conv(&mut s, "b0", 6, 3, 16, 2, size);
    side = conv(&mut s, "b1", 3, 16, 32, 2, side);
    c3(&mut s, "b2", 32, 32, 1, side);
    side = conv(&mut s, "b3", 3, 32, 64, 2, side);
    c3(&mut s, "b4", 64, 64, 2, side);
    let p3 = side;
    side = conv(&mut s, "b5", 3, 64, 128, 2, side);
    c3(&mut s, "b6", 128, 128, 3, side);
    let p4 = side;
    side = conv(&mut s, "b7", 3, 128, 256, 2, side);
    c3(&mut s, "b8", 256, 256, 1, side);
    let p5 = side;
    // SPPF
    s.conv_bn("b9.cv1", 1, 256, 128, 1, p5);
    s.conv_bn("b9.cv2", 1, 512, 256, 1, p5);
    // Head
    s.conv_bn("h10", 1, 256, 128, 1, p5);
    c3(&mut s, "h13", 256, 128, 1, p4);
    s.conv_bn("h14", 1, 128, 64, 1, p4);
    c3(&mut s, "h17", 128, 64, 1, p3);
    s.conv_bn("h18", 3, 64, 64, 2, p3);
    c3(&mut s, "h20", 128, 128, 1, p4);
    s.conv_bn("h21", 3, 128, 128, 2, p4);
    c3(&mut s, "h23", 256, 256, 1, p5);
    let out = 3 * (classes + 5);
    for (i, (cin, side)) in [(64, p3), (128, p4), (256, p5)].into_iter().enumerate() {
        s.ops.push(Op::Conv {
            name: format!("detect.{i}"),
            k: 1,
            cin,
            cout: out,
            stride: 1,
            padding: Some(0),
            in_h: side,
            in_w: side,
            bias: true,
        });
    }
    s
}

/// Two-layer region-to-text alignment MLP applied to `regions` boxes.
pub fn alignment_spec(input: usize, hidden: usize, out: usize, regions: usize) -> LayerSpec {
    let mut s = LayerSpec::new("alignment");
    s.linear("align.fc1".into(), input, hidden, regions);
    s.linear("align.fc2".into(), hidden, out, regions);
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageBudget {
    pub stage: String,
    pub params: u64,
    pub bytes_per_param: u64,
    pub storage_bytes: u64,
    pub flops: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetReport {
    pub convention: String,
    pub assumptions: Vec<String>,
    pub stages: Vec<StageBudget>,
    pub total_params: u64,
    pub total_storage_bytes: u64,
    pub total_flops: u64,
}

impl BudgetReport {
    pub fn from_stages(stages: Vec<(LayerSpec, u64)>, assumptions: Vec<String>) -> Self {
        let stages: Vec<StageBudget> = stages
            .into_iter()
            .map(|(spec, bytes)| {
                let params = spec.params();
                StageBudget {
                    stage: spec.name.clone(),
                    params,
                    bytes_per_param: bytes,
                    storage_bytes: params * bytes,
                    flops: spec.flops(),
                }
            })
            .collect();
        Self {
            convention: FLOP_CONVENTION.into(),
            assumptions,
            total_params: stages.iter().map(|s| s.params).sum(),
            total_storage_bytes: stages.iter().map(|s| s.storage_bytes).sum(),
            total_flops: stages.iter().map(|s| s.flops).sum(),
            stages,
        }
    }

    /// Full pipeline: half-precision image encoder, 32-bit elsewhere.
    pub fn pipeline(
        cfg: &ModelConfig,
        seq: &SeqAssumption,
        detector_size: usize,
        regions: usize,
    ) -> Self {
        let stages = vec![
            (resnet50_spec(), 2),
            (yolov5n_spec(80, detector_size), 4),
            (alignment_spec(2048, 1024, 1024, regions), 4),
            (modulator_spec(cfg, seq.concepts), 4),
            (fusion_spec(cfg, seq), 4),
            (head_spec(cfg, seq), 4),
        ];
        let assumptions = vec![
            format!(
                "fusion: one uncached forward over {} rows ({} visual + {} concepts + [CLS] + {} caption)",
                seq.rows(),
                seq.visual,
                seq.concepts,
                seq.caption
            ),
            format!("head: {} positions per branch", seq.caption + 1),
            format!("modulator: {} concept tokens", seq.concepts),
            format!("detector: {detector_size}x{detector_size} input, 80 classes; alignment over {regions} regions"),
            "image encoder stored at 16 bits per parameter, all else at 32".into(),
        ];
        Self::from_stages(stages, assumptions)
    }

    /// Human-readable table.
    pub fn table(&self) -> String {
        let mut out = format!("FLOPs convention: {}\n", self.convention);
        for a in &self.assumptions {
            out.push_str(&format!("  assumes {a}\n"));
        }
        out.push_str(&format!(
            "{:<16} {:>14} {:>12} {:>14}\n",
            "stage", "params", "MB", "GFLOPs"
        ));
        for s in &self.stages {
            out.push_str(&format!(
                "{:<16} {:>14} {:>12.2} {:>14.4}\n",
                s.stage,
                s.params,
                s.storage_bytes as f64 / 1e6,
                s.flops as f64 / 1e9
            ));
        }
        out.push_str(&format!(
            "{:<16} {:>14} {:>12.2} {:>14.4}\n",
            "total",
            self.total_params,
            self.total_storage_bytes as f64 / 1e6,
            self.total_flops as f64 / 1e9
        ));
        out
    }
}

/// Parameters of a live model by walking its tensors.
pub fn count_live(model: &CaptionModel) -> u64 {
    model.total_params() as u64
}

/// Median of `repeats` timed runs after `warmup` untimed ones, in ms.
pub fn time_median(
    warmup: usize,
    repeats: usize,
    mut f: impl FnMut() -> Result<()>,
) -> Result<f64> {
    if warmup == 0 || repeats == 0 {
        return Err(Error::Parameter(
            "warmup and repeats must be at least 1".into(),
        ));
    }
    for _ in 0..warmup {
        f()?;
    }
    let mut t = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let start = Instant::now();
        f()?;
        t.push(start.elapsed().as_secs_f64() * 1e3);
    }
    t.sort_by(f64::total_cmp);
    let m = t.len() / 2;
    Ok(if t.len() % 2 == 1 {
        t[m]
    } else {
        0.5 * (t[m - 1] + t[m])
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageLatency {
    pub stage: String,
    pub median_ms: f64,
    /// How many times the stage runs per image (caption length for the
    /// decode step).
    pub multiplier: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub stages: Vec<StageLatency>,
    /// Σ median × multiplier.
    pub total_ms: f64,
    /// Median of the stages run back to back.
    pub measured_total_ms: f64,
}

impl LatencyReport {
    pub fn table(&self) -> String {
        let mut out = String::new();
        for s in &self.stages {
            if s.multiplier == 1 {
                out.push_str(&format!("{:<20} {:>10.3} ms\n", s.stage, s.median_ms));
            } else {
                out.push_str(&format!(
                    "{:<20} {:>10.3} ms x {}\n",
                    s.stage, s.median_ms, s.multiplier
                ));
            }
        }
        out.push_str(&format!(
            "{:<20} {:>10.3} ms (measured {:.3} ms)\n",
            "total", self.total_ms, self.measured_total_ms
        ));
        out
    }
}

/// A named pipeline stage executed `multiplier` times per image.
pub struct Stage<'a> {
    pub name: String,
    pub multiplier: usize,
    pub run: Box<dyn FnMut() -> Result<()> + 'a>,
}

/// Times each stage separately, then the whole sequence end to end.
pub fn benchmark_latency(
    stages: &mut [Stage],
    warmup: usize,
    repeats: usize,
) -> Result<LatencyReport> {
    let mut out = Vec::with_capacity(stages.len());
    for s in stages.iter_mut() {
        let ms = time_median(warmup, repeats, &mut s.run)?;
        out.push(StageLatency {
            stage: s.name.clone(),
            median_ms: ms,
            multiplier: s.multiplier,
        });
    }
    let measured = time_median(warmup, repeats, || {
        for s in stages.iter_mut() {
            for _ in 0..s.multiplier {
                (s.run)()?;
            }
        }
        Ok(())
    })?;
    Ok(LatencyReport {
        total_ms: out.iter().map(|s| s.median_ms * s.multiplier as f64).sum(),
        stages: out,
        measured_total_ms: measured,
    })
}

/// Median wall time (ms) of each of `steps` consecutive decode steps, the
/// generated token forced to `token` so every run does identical work.
#[allow(clippy::too_many_arguments)]
pub fn decode_step_times(
    model: &CaptionModel,
    grid: &Tensor,
    concepts: &[u32],
    sp: Specials,
    steps: usize,
    token: u32,
    warmup: usize,
    repeats: usize,
) -> Result<Vec<f64>> {
    if warmup == 0 || repeats == 0 {
        return Err(Error::Parameter(
            "warmup and repeats must be at least 1".into(),
        ));
    }
    let mut times = vec![Vec::with_capacity(repeats); steps];
    for r in 0..warmup + repeats {
        let mut cache = encode_context(model, grid, concepts, sp)?;
        let mut gen = Vec::with_capacity(steps);
        for slot in times.iter_mut() {
            let start = Instant::now();
            decode_step(model, &mut cache, &gen, sp)?;
            let ms = start.elapsed().as_secs_f64() * 1e3;
            if r >= warmup {
                slot.push(ms);
            }
            gen.push(token);
        }
    }
    Ok(times
        .into_iter()
        .map(|mut t| {
            t.sort_by(f64::total_cmp);
            let m = t.len() / 2;
            if t.len() % 2 == 1 {
                t[m]
            } else {
                0.5 * (t[m - 1] + t[m])
            }
        })
        .collect())
}

/// Concept retrieval inputs for [`pipeline_latency`].
pub struct Retrieval<'a> {
    pub regions: &'a [Region],
    pub mlp: &'a AlignmentMLP,
    pub vocab: &'a ConceptVocabulary,
    pub k: usize,
}

/// Per-image inference inputs for [`pipeline_latency`].
pub struct Pipeline<'a> {
    pub model: &'a CaptionModel,
    /// Reloaded from disk in the feature stage when given.
    pub feature_file: Option<&'a Path>,
    pub grid: &'a GridFeature,
    pub retrieval: Option<Retrieval<'a>>,
    pub concepts: &'a [u32],
    pub specials: Specials,
    /// Decode steps per image.
    pub caption_len: usize,
}

/// Times feature loading, concept extraction, context encoding and one
/// decode step (averaged over a `caption_len` generation), then the whole
/// pipeline end to end.
pub fn pipeline_latency(p: &Pipeline, warmup: usize, repeats: usize) -> Result<LatencyReport> {
    if p.caption_len == 0 {
        return Err(Error::Parameter("caption length must be at least 1".into()));
    }
    let flat = p.grid.flatten();
    let generate_all = || -> Result<()> {
        let mut cache = encode_context(p.model, &flat, p.concepts, p.specials)?;
        let mut gen = Vec::with_capacity(p.caption_len);
        for _ in 0..p.caption_len {
            decode_step(p.model, &mut cache, &gen, p.specials)?;
            gen.push(p.specials.unk);
        }
        Ok(())
    };
    let mut stages = Vec::new();
    if let Some(path) = p.feature_file {
        let ms = time_median(warmup, repeats, || GridFeature::load(path).map(|_| ()))?;
        stages.push(("feature load".to_string(), ms, 1));
    }
    if let Some(r) = &p.retrieval {
        let ms = time_median(warmup, repeats, || {
            retrieve_concepts(p.grid, r.regions, r.mlp, r.vocab, r.k).map(|_| ())
        })?;
        stages.push(("concept extraction".to_string(), ms, 1));
    }
    let ctx = time_median(warmup, repeats, || {
        encode_context(p.model, &flat, p.concepts, p.specials).map(|_| ())
    })?;
    stages.push(("context encoding".to_string(), ctx, 1));
    let all = time_median(warmup, repeats, generate_all)?;
    let step = ((all - ctx) / p.caption_len as f64).max(0.0);
    stages.push(("decode step".to_string(), step, p.caption_len));

    let measured = time_median(warmup, repeats, || {
        if let Some(path) = p.feature_file {
            GridFeature::load(path)?;
        }
        if let Some(r) = &p.retrieval {
            retrieve_concepts(p.grid, r.regions, r.mlp, r.vocab, r.k)?;
        }
        generate_all()
    })?;
    let stages: Vec<StageLatency> = stages
        .into_iter()
        .map(|(stage, median_ms, multiplier)| StageLatency {
            stage,
            median_ms,
            multiplier,
        })
        .collect();
    Ok(LatencyReport {
        total_ms: stages
            .iter()
            .map(|s| s.median_ms * s.multiplier as f64)
            .sum(),
        stages,
        measured_total_ms: measured,
    })
}
