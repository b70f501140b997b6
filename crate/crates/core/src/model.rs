//! Model configuration and the parameter layout shared by the modulator,
//! fusion transformer and ensemble head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn: usize,
    pub max_positions: usize,
    /// Channels of the incoming grid feature.
    pub grid_channels: usize,
    pub modulator_hidden: usize,
    /// Ensemble head branch count.
    pub branches: usize,
    #[serde(default = "default_ln_eps")]
    pub ln_eps: f64,
    #[serde(default = "default_init_std")]
    pub init_std: f64,
}

fn default_ln_eps() -> f64 {
    1e-12
}

fn default_init_std() -> f64 {
    0.02
}

pub const SEGMENTS: usize = 3;

impl ModelConfig {
    /// 4 layers, hidden 312, 12 heads, FFN 1200, 30522-token dictionary.
    pub fn full_student() -> Self {
        Self {
            vocab_size: 30522,
            hidden: 312,
            layers: 4,
            heads: 12,
            ffn: 1200,
            max_positions: 512,
            grid_channels: 2048,
            modulator_hidden: 39,
            branches: 3,
            ln_eps: default_ln_eps(),
            init_std: default_init_std(),
        }
    }

    /// BERT-base shaped teacher.
    pub fn full_teacher() -> Self {
        Self {
            hidden: 768,
            layers: 12,
            ffn: 3072,
            modulator_hidden: 96,
            ..Self::full_student()
        }
    }

    /// Small configuration that trains in seconds on one core.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            hidden: 32,
            layers: 2,
            heads: 4,
            ffn: 128,
            max_positions: 128,
            grid_channels: 64,
            modulator_hidden: 4,
            branches: 3,
            ln_eps: default_ln_eps(),
            init_std: default_init_std(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("hidden", self.hidden),
            ("layers", self.layers),
            ("heads", self.heads),
            ("ffn", self.ffn),
            ("max_positions", self.max_positions),
            ("grid_channels", self.grid_channels),
            ("modulator_hidden", self.modulator_hidden),
            ("branches", self.branches),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "hidden {} not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        if !(self.ln_eps > 0.0) {
            return Err(Error::Config("ln_eps must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct LayerIds {
    pub q_w: ParamId,
    pub q_b: ParamId,
    pub k_w: ParamId,
    pub k_b: ParamId,
    pub v_w: ParamId,
    pub v_b: ParamId,
    pub o_w: ParamId,
    pub o_b: ParamId,
    pub attn_ln_g: ParamId,
    pub attn_ln_b: ParamId,
    pub ffn_in_w: ParamId,
    pub ffn_in_b: ParamId,
    pub ffn_out_w: ParamId,
    pub ffn_out_b: ParamId,
    pub ffn_ln_g: ParamId,
    pub ffn_ln_b: ParamId,
}

#[derive(Clone, Debug)]
pub struct BranchIds {
    pub proj_w: ParamId,
    pub proj_b: ParamId,
    pub ln_g: ParamId,
    pub ln_b: ParamId,
    pub out_bias: ParamId,
}

/// Handles into the model's [`ParamStore`]. The word embedding is a single
/// entry read by the modulator, the input embedding and every head branch.
#[derive(Clone, Debug)]
pub struct ParamIds {
    pub word: ParamId,
    pub position: ParamId,
    pub segment: ParamId,
    pub emb_ln_g: ParamId,
    pub emb_ln_b: ParamId,
    pub visual_w: ParamId,
    pub visual_b: ParamId,
    pub mod_fc1_w: ParamId,
    pub mod_fc1_b: ParamId,
    pub mod_fc2_w: ParamId,
    pub mod_fc2_b: ParamId,
    pub pollution_w: ParamId,
    pub pollution_b: ParamId,
    pub layers: Vec<LayerIds>,
    pub branches: Vec<BranchIds>,
}

/// Name prefixes grouping parameters into the budget's stages.
pub mod groups {
    pub const EMBEDDING: &[&str] = &["embed."];
    pub const MODULATOR: &[&str] = &["modulator."];
    pub const FUSION: &[&str] = &["embed.", "visual.", "layer", "pollution."];
    pub const HEAD: &[&str] = &["head"];
}

#[derive(Clone, Debug)]
pub struct CaptionModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub ids: ParamIds,
}

fn param_shapes(c: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let (d, f, v) = (c.hidden, c.ffn, c.vocab_size);
    let mut out = vec![
        ("embed.word".to_string(), vec![v, d], Init::Normal),
        (
            "embed.position".into(),
            vec![c.max_positions, d],
            Init::Normal,
        ),
        ("embed.segment".into(), vec![SEGMENTS, d], Init::Normal),
        ("embed.ln.gain".into(), vec![d], Init::One),
        ("embed.ln.bias".into(), vec![d], Init::Zero),
        (
            "visual.proj.weight".into(),
            vec![c.grid_channels, d],
            Init::Normal,
        ),
        ("visual.proj.bias".into(), vec![d], Init::Zero),
        (
            "modulator.fc1.weight".into(),
            vec![d, c.modulator_hidden],
            Init::Normal,
        ),
        (
            "modulator.fc1.bias".into(),
            vec![c.modulator_hidden],
            Init::Zero,
        ),
        (
            "modulator.fc2.weight".into(),
            vec![c.modulator_hidden, c.grid_channels],
            Init::Normal,
        ),
        (
            "modulator.fc2.bias".into(),
            vec![c.grid_channels],
            Init::Zero,
        ),
        ("pollution.weight".into(), vec![d, 1], Init::Normal),
        ("pollution.bias".into(), vec![1], Init::Zero),
    ];
    for l in 0..c.layers {
        for p in ["q", "k", "v", "o"] {
            out.push((
                format!("layer{l}.attn.{p}.weight"),
                vec![d, d],
                Init::Normal,
            ));
            out.push((format!("layer{l}.attn.{p}.bias"), vec![d], Init::Zero));
        }
        out.push((format!("layer{l}.attn.ln.gain"), vec![d], Init::One));
        out.push((format!("layer{l}.attn.ln.bias"), vec![d], Init::Zero));
        out.push((format!("layer{l}.ffn.in.weight"), vec![d, f], Init::Normal));
        out.push((format!("layer{l}.ffn.in.bias"), vec![f], Init::Zero));
        out.push((format!("layer{l}.ffn.out.weight"), vec![f, d], Init::Normal));
        out.push((format!("layer{l}.ffn.out.bias"), vec![d], Init::Zero));
        out.push((format!("layer{l}.ffn.ln.gain"), vec![d], Init::One));
        out.push((format!("layer{l}.ffn.ln.bias"), vec![d], Init::Zero));
    }
    for b in 0..c.branches {
        out.push((format!("head{b}.proj.weight"), vec![d, d], Init::Normal));
        out.push((format!("head{b}.proj.bias"), vec![d], Init::Zero));
        out.push((format!("head{b}.ln.gain"), vec![d], Init::One));
        out.push((format!("head{b}.ln.bias"), vec![d], Init::Zero));
        out.push((format!("head{b}.out_bias"), vec![v], Init::Zero));
    }
    out
}

#[derive(Clone, Copy)]
enum Init {
    Normal,
    Zero,
    One,
}

impl CaptionModel {
    /// Truncation-free normal init with `config.init_std`, zero biases and
    /// unit layer-norm gains.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for (name, shape, init) in param_shapes(&config) {
            let t = match init {
                Init::Normal => Tensor::randn(shape, config.init_std, &mut rng),
                Init::Zero => Tensor::zeros(shape),
                Init::One => Tensor::ones(shape),
            };
            params.insert(name, t)?;
        }
        Self::from_params(config, params)
    }

    /// Links a loaded store, checking every expected tensor's shape.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        for (name, shape, _) in param_shapes(&config) {
            let t = params
                .by_name(&name)
                .ok_or_else(|| Error::Config(format!("missing parameter {name}")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::dim("parameter shape", t.shape(), &shape));
            }
        }
        let id = |n: &str| params.id(n).expect("checked above");
        let layers = (0..config.layers)
            .map(|l| {
                let p = |s: &str| id(&format!("layer{l}.{s}"));
                LayerIds {
                    q_w: p("attn.q.weight"),
                    q_b: p("attn.q.bias"),
                    k_w: p("attn.k.weight"),
                    k_b: p("attn.k.bias"),
                    v_w: p("attn.v.weight"),
                    v_b: p("attn.v.bias"),
                    o_w: p("attn.o.weight"),
                    o_b: p("attn.o.bias"),
                    attn_ln_g: p("attn.ln.gain"),
                    attn_ln_b: p("attn.ln.bias"),
                    ffn_in_w: p("ffn.in.weight"),
                    ffn_in_b: p("ffn.in.bias"),
                    ffn_out_w: p("ffn.out.weight"),
                    ffn_out_b: p("ffn.out.bias"),
                    ffn_ln_g: p("ffn.ln.gain"),
                    ffn_ln_b: p("ffn.ln.bias"),
                }
            })
            .collect();
        let branches = (0..config.branches)
            .map(|b| {
                let p = |s: &str| id(&format!("head{b}.{s}"));
                BranchIds {
                    proj_w: p("proj.weight"),
                    proj_b: p("proj.bias"),
                    ln_g: p("ln.gain"),
                    ln_b: p("ln.bias"),
                    out_bias: p("out_bias"),
                }
            })
            .collect();
        let ids = ParamIds {
            word: id("embed.word"),
            position: id("embed.position"),
            segment: id("embed.segment"),
            emb_ln_g: id("embed.ln.gain"),
            emb_ln_b: id("embed.ln.bias"),
            visual_w: id("visual.proj.weight"),
            visual_b: id("visual.proj.bias"),
            mod_fc1_w: id("modulator.fc1.weight"),
            mod_fc1_b: id("modulator.fc1.bias"),
            mod_fc2_w: id("modulator.fc2.weight"),
            mod_fc2_b: id("modulator.fc2.bias"),
            pollution_w: id("pollution.weight"),
            pollution_b: id("pollution.bias"),
            layers,
            branches,
        };
        Ok(Self {
            config,
            params,
            ids,
        })
    }

    /// Parameters whose names start with any of `prefixes`.
    pub fn count_params(&self, prefixes: &[&str]) -> usize {
        self.params
            .iter()
            .filter(|(_, name, _)| prefixes.iter().any(|p| name.starts_with(p)))
            .map(|(_, _, t)| t.len())
            .sum()
    }

    pub fn total_params(&self) -> usize {
        self.params.numel()
    }
}
