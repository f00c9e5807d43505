//! Toy Llama-style model configuration and its on-disk form.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lfck;
use crate::numkernel::{rng_normal, Rng, Tensor};

fn default_rope_theta() -> f64 {
    10000.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    #[serde(default = "default_rope_theta")]
    pub rope_theta: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_layers: 12,
            d_model: 64,
            n_heads: 4,
            d_ff: 128,
            vocab_size: 258,
            max_seq_len: 256,
            rope_theta: default_rope_theta(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::validation(format!("{name} must be positive")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::validation(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if (self.d_model / self.n_heads) % 2 != 0 {
            return Err(Error::validation("head dimension must be even for rotary embeddings"));
        }
        if self.vocab_size < 2 {
            return Err(Error::validation("vocab_size must be at least 2"));
        }
        if !(self.rope_theta > 0.0 && self.rope_theta.is_finite()) {
            return Err(Error::validation("rope_theta must be positive"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        let per_layer = 4 * d * d + 3 * d * self.d_ff + 2 * d;
        2 * self.vocab_size * d + d + self.n_layers * per_layer
    }
}

/// The seven projection matrices present in every block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatrixFamily {
    QProj,
    KProj,
    VProj,
    OProj,
    UpProj,
    DownProj,
    GateProj,
}

impl MatrixFamily {
    pub const ALL: [MatrixFamily; 7] = [
        MatrixFamily::QProj,
        MatrixFamily::KProj,
        MatrixFamily::VProj,
        MatrixFamily::OProj,
        MatrixFamily::UpProj,
        MatrixFamily::DownProj,
        MatrixFamily::GateProj,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MatrixFamily::QProj => "q_proj",
            MatrixFamily::KProj => "k_proj",
            MatrixFamily::VProj => "v_proj",
            MatrixFamily::OProj => "o_proj",
            MatrixFamily::UpProj => "up_proj",
            MatrixFamily::DownProj => "down_proj",
            MatrixFamily::GateProj => "gate_proj",
        }
    }

    /// `(d1, d2)` = (out features, in features) as stored.
    pub fn shape(self, cfg: &ModelConfig) -> (usize, usize) {
        match self {
            MatrixFamily::QProj | MatrixFamily::KProj | MatrixFamily::VProj | MatrixFamily::OProj => {
                (cfg.d_model, cfg.d_model)
            }
            MatrixFamily::UpProj | MatrixFamily::GateProj => (cfg.d_ff, cfg.d_model),
            MatrixFamily::DownProj => (cfg.d_model, cfg.d_ff),
        }
    }
}

impl fmt::Display for MatrixFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MatrixFamily {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        MatrixFamily::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::arg(format!("unknown matrix family {s:?}")))
    }
}

/// Weights of one transformer block.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights {
    pub q_proj: Tensor,
    pub k_proj: Tensor,
    pub v_proj: Tensor,
    pub o_proj: Tensor,
    pub gate_proj: Tensor,
    pub up_proj: Tensor,
    pub down_proj: Tensor,
    pub input_norm: Tensor,
    pub post_attn_norm: Tensor,
}

impl LayerWeights {
    pub fn matrix(&self, f: MatrixFamily) -> &Tensor {
        match f {
            MatrixFamily::QProj => &self.q_proj,
            MatrixFamily::KProj => &self.k_proj,
            MatrixFamily::VProj => &self.v_proj,
            MatrixFamily::OProj => &self.o_proj,
            MatrixFamily::UpProj => &self.up_proj,
            MatrixFamily::DownProj => &self.down_proj,
            MatrixFamily::GateProj => &self.gate_proj,
        }
    }

    pub fn matrix_mut(&mut self, f: MatrixFamily) -> &mut Tensor {
        match f {
            MatrixFamily::QProj => &mut self.q_proj,
            MatrixFamily::KProj => &mut self.k_proj,
            MatrixFamily::VProj => &mut self.v_proj,
            MatrixFamily::OProj => &mut self.o_proj,
            MatrixFamily::UpProj => &mut self.up_proj,
            MatrixFamily::DownProj => &mut self.down_proj,
            MatrixFamily::GateProj => &mut self.gate_proj,
        }
    }

    /// `(suffix, tensor)` pairs in canonical file order.
    pub fn named(&self) -> [(&'static str, &Tensor); 9] {
        [
            ("q_proj", &self.q_proj),
            ("k_proj", &self.k_proj),
            ("v_proj", &self.v_proj),
            ("o_proj", &self.o_proj),
            ("gate_proj", &self.gate_proj),
            ("up_proj", &self.up_proj),
            ("down_proj", &self.down_proj),
            ("input_norm", &self.input_norm),
            ("post_attn_norm", &self.post_attn_norm),
        ]
    }

    /// Bitwise equality of every tensor.
    pub fn bit_eq(&self, other: &LayerWeights) -> bool {
        self.named()
            .iter()
            .zip(other.named().iter())
            .all(|((_, a), (_, b))| a.bit_eq(b))
    }
}

pub const LAYER_SUFFIXES: [&str; 9] = [
    "q_proj",
    "k_proj",
    "v_proj",
    "o_proj",
    "gate_proj",
    "up_proj",
    "down_proj",
    "input_norm",
    "post_attn_norm",
];

/// A complete decoder: untied embedding and head, no biases.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformerCheckpoint {
    pub config: ModelConfig,
    pub embed: Tensor,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Tensor,
    pub lm_head: Tensor,
}

impl TransformerCheckpoint {
    /// Gaussian-initialised model: matrices `Normal(0, std)`, norm gains 1.
    pub fn init(config: ModelConfig, rng: &mut Rng, std: f64) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            let mut mat = |f: MatrixFamily| {
                let (r, c) = f.shape(&config);
                rng_normal(rng, &[r, c], 0.0, std)
            };
            layers.push(LayerWeights {
                q_proj: mat(MatrixFamily::QProj)?,
                k_proj: mat(MatrixFamily::KProj)?,
                v_proj: mat(MatrixFamily::VProj)?,
                o_proj: mat(MatrixFamily::OProj)?,
                gate_proj: mat(MatrixFamily::GateProj)?,
                up_proj: mat(MatrixFamily::UpProj)?,
                down_proj: mat(MatrixFamily::DownProj)?,
                input_norm: Tensor::full([d], 1.0),
                post_attn_norm: Tensor::full([d], 1.0),
            });
        }
        let ckpt = TransformerCheckpoint {
            embed: rng_normal(rng, &[config.vocab_size, d], 0.0, std)?,
            lm_head: rng_normal(rng, &[config.vocab_size, d], 0.0, std)?,
            final_norm: Tensor::full([d], 1.0),
            layers,
            config,
        };
        ckpt.validate()?;
        Ok(ckpt)
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    /// Canonical `(name, tensor)` list; layer indices are zero-based.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::with_capacity(3 + 9 * self.layers.len());
        out.push(("embed".to_string(), &self.embed));
        for (l, layer) in self.layers.iter().enumerate() {
            for (suffix, t) in layer.named() {
                out.push((format!("layers.{l}.{suffix}"), t));
            }
        }
        out.push(("final_norm".to_string(), &self.final_norm));
        out.push(("lm_head".to_string(), &self.lm_head));
        out
    }

    /// Every tensor present with exactly the shape implied by the config.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        if self.layers.len() != self.config.n_layers {
            return Err(Error::validation(format!(
                "config declares {} layers, checkpoint has {}",
                self.config.n_layers,
                self.layers.len()
            )));
        }
        for (name, t) in self.named_tensors() {
            let want = expected_shape(&self.config, &name)?;
            if t.shape() != want.as_slice() {
                return Err(Error::validation(format!(
                    "{name}: shape {:?}, config implies {:?}",
                    t.shape(),
                    want
                )));
            }
        }
        Ok(())
    }

    pub fn bit_eq(&self, other: &TransformerCheckpoint) -> bool {
        self.config == other.config
            && self.layers.len() == other.layers.len()
            && self
                .named_tensors()
                .iter()
                .zip(other.named_tensors().iter())
                .all(|((na, a), (nb, b))| na == nb && a.bit_eq(b))
    }
}

fn expected_shape(cfg: &ModelConfig, name: &str) -> Result<Vec<usize>> {
    let d = cfg.d_model;
    match name {
        "embed" | "lm_head" => return Ok(vec![cfg.vocab_size, d]),
        "final_norm" => return Ok(vec![d]),
        _ => {}
    }
    let rest = name
        .strip_prefix("layers.")
        .ok_or_else(|| Error::validation(format!("unexpected tensor {name}")))?;
    let (idx, suffix) = rest
        .split_once('.')
        .ok_or_else(|| Error::validation(format!("unexpected tensor {name}")))?;
    let _: usize = idx
        .parse()
        .map_err(|_| Error::validation(format!("bad layer index in {name}")))?;
    match suffix {
        "input_norm" | "post_attn_norm" => Ok(vec![d]),
        fam => {
            let f: MatrixFamily = fam
                .parse()
                .map_err(|_| Error::validation(format!("unexpected tensor {name}")))?;
            let (r, c) = f.shape(cfg);
            Ok(vec![r, c])
        }
    }
}

pub fn save_checkpoint(model: &TransformerCheckpoint, path: &Path) -> Result<()> {
    model.validate()?;
    let config = serde_json::to_value(&model.config)?;
    lfck::write(path, &config, &model.named_tensors())
}

pub fn load_checkpoint(path: &Path) -> Result<TransformerCheckpoint> {
    let file = lfck::read(path)?;
    checkpoint_from_lfck(file)
}

pub(crate) fn checkpoint_from_lfck(file: lfck::LfckFile) -> Result<TransformerCheckpoint> {
    let config: ModelConfig = serde_json::from_value(file.config)
        .map_err(|e| Error::validation(format!("model config: {e}")))?;
    config.validate()?;

    let mut want: Vec<String> = vec!["embed".into()];
    for l in 0..config.n_layers {
        for s in LAYER_SUFFIXES {
            want.push(format!("layers.{l}.{s}"));
        }
    }
    want.push("final_norm".into());
    want.push("lm_head".into());

    let have: BTreeSet<&str> = file.tensors.iter().map(|(n, _)| n.as_str()).collect();
    if have.len() != file.tensors.len() {
        return Err(Error::validation("duplicate tensor names"));
    }
    let want_set: BTreeSet<&str> = want.iter().map(String::as_str).collect();
    if let Some(extra) = have.difference(&want_set).next() {
        return Err(Error::validation(format!("unexpected tensor {extra}")));
    }
    if let Some(missing) = want_set.difference(&have).next() {
        return Err(Error::validation(format!("missing tensor {missing}")));
    }

    let mut map: std::collections::HashMap<String, Tensor> = file.tensors.into_iter().collect();
    let mut take = |name: &str| -> Result<Tensor> {
        let t = map.remove(name).expect("presence checked above");
        let shape = expected_shape(&config, name)?;
        if t.shape() != shape.as_slice() {
            return Err(Error::validation(format!(
                "{name}: shape {:?}, config implies {:?}",
                t.shape(),
                shape
            )));
        }
        Ok(t)
    };
    let embed = take("embed")?;
    let mut layers = Vec::with_capacity(config.n_layers);
    for l in 0..config.n_layers {
        let mut t = |s: &str| take(&format!("layers.{l}.{s}"));
        layers.push(LayerWeights {
            q_proj: t("q_proj")?,
            k_proj: t("k_proj")?,
            v_proj: t("v_proj")?,
            o_proj: t("o_proj")?,
            gate_proj: t("gate_proj")?,
            up_proj: t("up_proj")?,
            down_proj: t("down_proj")?,
            input_norm: t("input_norm")?,
            post_attn_norm: t("post_attn_norm")?,
        });
    }
    let final_norm = take("final_norm")?;
    let lm_head = take("lm_head")?;
    Ok(TransformerCheckpoint {
        config,
        embed,
        layers,
        final_norm,
        lm_head,
    })
}
