//! Depth expansion: learned layer synthesis and duplication baselines.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::checkpoint::{LayerWeights, MatrixFamily, TransformerCheckpoint};
use crate::error::{Error, Result};
use crate::numkernel::Tensor;
use crate::predictor::{
    forward_columns, predict_intermediate, train_predictor, PredictorNet, PredictorTrainConfig,
    TripletDataset,
};
use crate::svdspace::SvdSpace;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Lesa,
    LesaRaw,
    Interpolation,
    Stack,
    Pro,
    Solar,
}

impl Strategy {
    pub const ALL: [Strategy; 6] = [
        Strategy::Lesa,
        Strategy::LesaRaw,
        Strategy::Interpolation,
        Strategy::Stack,
        Strategy::Pro,
        Strategy::Solar,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Lesa => "lesa",
            Strategy::LesaRaw => "lesa_raw",
            Strategy::Interpolation => "interpolation",
            Strategy::Stack => "stack",
            Strategy::Pro => "pro",
            Strategy::Solar => "solar",
        }
    }

    pub fn is_learned(self) -> bool {
        matches!(self, Strategy::Lesa | Strategy::LesaRaw)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::arg(format!("unknown strategy {s:?}")))
    }
}

/// One layer of an expanded model; indices are 1-based into the original.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSource {
    Original { layer: usize },
    /// Synthesised between `layer` and `layer + 1`.
    Synth { layer: usize },
    Copy { layer: usize },
}

impl LayerSource {
    pub fn is_new(self) -> bool {
        !matches!(self, LayerSource::Original { .. })
    }

    /// Original layers the entry is derived from.
    pub fn sources(self) -> Vec<usize> {
        match self {
            LayerSource::Original { layer } | LayerSource::Copy { layer } => vec![layer],
            LayerSource::Synth { layer } => vec![layer, layer + 1],
        }
    }
}

/// Strategy parameters; unset fields take the strategy's default.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExpansionParams {
    /// `[a, b]`, 1-based: a layer is inserted after each `ℓ` with `a ≤ ℓ < b`.
    pub interval: Option<(usize, usize)>,
    pub group_size: Option<usize>,
    pub n_copies: Option<usize>,
    pub identity_init: bool,
    pub n_overlap: Option<usize>,
}

/// Default learned-insertion interval: the upper half of the model without
/// the final layer as lower neighbour, `[⌈L/2⌉ − 1, L − 1]`, giving 1.5×
/// depth for even `L` (32 layers → `[15, 31]`).
pub fn default_interval(n_layers: usize) -> (usize, usize) {
    let a = n_layers.div_ceil(2).saturating_sub(1).max(1);
    (a, n_layers.saturating_sub(1).max(a))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpansionPlan {
    pub strategy: Strategy,
    pub original_layers: usize,
    pub params: ExpansionParams,
    pub entries: Vec<LayerSource>,
}

impl ExpansionPlan {
    pub fn new(n_layers: usize, strategy: Strategy, params: &ExpansionParams) -> Result<Self> {
        if n_layers == 0 {
            return Err(Error::arg("cannot expand a model without layers"));
        }
        let l = n_layers;
        let mut p = params.clone();
        let entries = match strategy {
            Strategy::Lesa | Strategy::LesaRaw => {
                let (a, b) = *p.interval.get_or_insert(default_interval(l));
                if a < 1 || a > b || b > l {
                    return Err(Error::arg(format!(
                        "interval [{a}, {b}] invalid for a {l}-layer model"
                    )));
                }
                let mut e = Vec::with_capacity(l + b - a);
                for layer in 1..=l {
                    e.push(LayerSource::Original { layer });
                    if a <= layer && layer < b {
                        e.push(LayerSource::Synth { layer });
                    }
                }
                e
            }
            Strategy::Interpolation => (1..=l)
                .flat_map(|layer| [LayerSource::Original { layer }, LayerSource::Copy { layer }])
                .collect(),
            Strategy::Stack => {
                let g = *p.group_size.get_or_insert(l);
                if g == 0 || g > l {
                    return Err(Error::arg(format!("group size {g} invalid for {l} layers")));
                }
                let mut e = Vec::with_capacity(2 * l);
                for start in (1..=l).step_by(g) {
                    let end = (start + g - 1).min(l);
                    e.extend((start..=end).map(|layer| LayerSource::Original { layer }));
                    e.extend((start..=end).map(|layer| LayerSource::Copy { layer }));
                }
                e
            }
            Strategy::Pro => {
                let k = *p.n_copies.get_or_insert(l.div_ceil(4));
                if k == 0 || k > l {
                    return Err(Error::arg(format!("n_copies {k} invalid for {l} layers")));
                }
                // Group i covers layers (i·L/k, (i+1)·L/k]; its last layer is copied.
                let mut e = Vec::with_capacity(l + k);
                let mut next_group = 1;
                for layer in 1..=l {
                    e.push(LayerSource::Original { layer });
                    if layer == next_group * l / k {
                        e.push(LayerSource::Copy { layer });
                        next_group += 1;
                    }
                }
                e
            }
            Strategy::Solar => {
                let n = *p.n_overlap.get_or_insert((3 * l).div_ceil(4));
                if n > l || 2 * n < l {
                    return Err(Error::arg(format!(
                        "solar n = {n} invalid for {l} layers (need L/2 ≤ n ≤ L)"
                    )));
                }
                let mut e: Vec<LayerSource> =
                    (1..=n).map(|layer| LayerSource::Original { layer }).collect();
                e.extend((l - n + 1..=l).map(|layer| {
                    if layer <= n {
                        LayerSource::Copy { layer }
                    } else {
                        LayerSource::Original { layer }
                    }
                }));
                e
            }
        };
        Ok(ExpansionPlan {
            strategy,
            original_layers: l,
            params: p,
            entries,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// `true` for every synthesised or copied layer.
    pub fn new_layer_mask(&self) -> Vec<bool> {
        self.entries.iter().map(|e| e.is_new()).collect()
    }

    /// Provenance JSON: one record per resulting layer.
    pub fn provenance(&self) -> serde_json::Value {
        let layers: Vec<serde_json::Value> = self
            .entries
            .iter()
            .map(|e| {
                let kind = match e {
                    LayerSource::Original { .. } => "original",
                    LayerSource::Synth { .. } => "synth",
                    LayerSource::Copy { .. } => "copy",
                };
                json!({
                    "kind": kind,
                    "source": e.sources(),
                    "strategy": self.strategy,
                    "params": self.params,
                })
            })
            .collect();
        json!({
            "strategy": self.strategy,
            "original_layers": self.original_layers,
            "params": self.params,
            "layers": layers,
        })
    }
}

/// An expanded checkpoint together with the plan that produced it.
#[derive(Clone, Debug)]
pub struct Expanded {
    pub model: TransformerCheckpoint,
    pub plan: ExpansionPlan,
}

impl Expanded {
    pub fn new_layer_mask(&self) -> Vec<bool> {
        self.plan.new_layer_mask()
    }

    /// 0-based indices of layers that existed before expansion.
    pub fn frozen_layers(&self) -> Vec<usize> {
        self.new_layer_mask()
            .iter()
            .enumerate()
            .filter(|(_, &n)| !n)
            .map(|(i, _)| i)
            .collect()
    }

    /// Writes `<path>.provenance.json` next to the checkpoint path.
    pub fn write_provenance(&self, checkpoint_path: &Path) -> Result<std::path::PathBuf> {
        let mut p = checkpoint_path.as_os_str().to_owned();
        p.push(".provenance.json");
        let p = std::path::PathBuf::from(p);
        std::fs::write(&p, serde_json::to_string_pretty(&self.plan.provenance())?)?;
        Ok(p)
    }
}

pub type PredictorSet = BTreeMap<MatrixFamily, PredictorNet>;

fn mean_norms(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.lincomb(0.5, b, 0.5)
}

fn assemble(
    model: &TransformerCheckpoint,
    plan: &ExpansionPlan,
    mut synth: impl FnMut(usize) -> Result<LayerWeights>,
) -> Result<Expanded> {
    if plan.original_layers != model.n_layers() {
        return Err(Error::arg(format!(
            "plan built for {} layers, model has {}",
            plan.original_layers,
            model.n_layers()
        )));
    }
    let mut layers = Vec::with_capacity(plan.len());
    for e in &plan.entries {
        layers.push(match *e {
            LayerSource::Original { layer } | LayerSource::Copy { layer } => {
                model.layers[layer - 1].clone()
            }
            LayerSource::Synth { layer } => synth(layer)?,
        });
    }
    let mut config = model.config.clone();
    config.n_layers = layers.len();
    let out = TransformerCheckpoint {
        config,
        embed: model.embed.clone(),
        layers,
        final_norm: model.final_norm.clone(),
        lm_head: model.lm_head.clone(),
    };
    out.validate()?;
    Ok(Expanded {
        model: out,
        plan: plan.clone(),
    })
}

/// Duplication strategies.
pub fn expand_baseline(model: &TransformerCheckpoint, plan: &ExpansionPlan) -> Result<Expanded> {
    if plan.strategy.is_learned() {
        return Err(Error::arg(format!(
            "{} is not a duplication strategy",
            plan.strategy
        )));
    }
    let mut out = assemble(model, plan, |_| unreachable!("duplication plans have no synth"))?;
    if plan.strategy == Strategy::Pro && plan.params.identity_init {
        let d = model.config.d_model;
        let f = model.config.d_ff;
        for (layer, e) in out.model.layers.iter_mut().zip(&plan.entries) {
            if e.is_new() {
                layer.o_proj = Tensor::zeros([d, d]);
                layer.down_proj = Tensor::zeros([d, f]);
            }
        }
    }
    Ok(out)
}

/// Learned insertion. With `use_svd`, each family's new matrix is
/// `U Σ · G(V_ℓ, V_{ℓ+1})` in that family's shared basis; without it the
/// predictor maps raw weight columns directly.
pub fn expand_lesa(
    model: &TransformerCheckpoint,
    predictors: &PredictorSet,
    plan: &ExpansionPlan,
    use_svd: bool,
) -> Result<Expanded> {
    if !plan.strategy.is_learned() {
        return Err(Error::arg(format!("{} is not a learned strategy", plan.strategy)));
    }
    let needs_synth = plan.entries.iter().any(|e| matches!(e, LayerSource::Synth { .. }));
    let mut spaces = BTreeMap::new();
    if needs_synth {
        for f in MatrixFamily::ALL {
            if !predictors.contains_key(&f) {
                return Err(Error::Config(format!("no predictor for family {f}")));
            }
            if use_svd {
                spaces.insert(f, SvdSpace::of_checkpoint(model, f)?);
            }
        }
    }
    assemble(model, plan, |layer| {
        let (lo, hi) = (&model.layers[layer - 1], &model.layers[layer]);
        let mut w = lo.clone();
        for f in MatrixFamily::ALL {
            let net = &predictors[&f];
            let m = if use_svd {
                let s = &spaces[&f];
                let c = predict_intermediate(net, &s.coeffs[layer - 1], &s.coeffs[layer])?;
                s.reconstruct_layer(&c)?
            } else {
                forward_columns(net, lo.matrix(f), hi.matrix(f))?
            };
            m.ensure_finite(&format!("synthesised {f} after layer {layer}"))?;
            *w.matrix_mut(f) = m;
        }
        w.input_norm = mean_norms(&lo.input_norm, &hi.input_norm)?;
        w.post_attn_norm = mean_norms(&lo.post_attn_norm, &hi.post_attn_norm)?;
        Ok(w)
    })
}

/// Triplet dataset of one family of a model, in coefficient space or raw.
pub fn family_dataset(
    model: &TransformerCheckpoint,
    family: MatrixFamily,
    use_svd: bool,
    source: &str,
) -> Result<TripletDataset> {
    if use_svd {
        Ok(TripletDataset::from_space(&SvdSpace::of_checkpoint(model, family)?, source))
    } else {
        let mats: Vec<Tensor> = model.layers.iter().map(|l| l.matrix(family).clone()).collect();
        Ok(TripletDataset::from_raw(family, &mats, source))
    }
}

/// Trains one predictor per family on the model's own layers.
pub fn train_family_predictors(
    model: &TransformerCheckpoint,
    cfg: &PredictorTrainConfig,
    use_svd: bool,
) -> Result<PredictorSet> {
    let mut out = PredictorSet::new();
    for f in MatrixFamily::ALL {
        let ds = family_dataset(model, f, use_svd, "model")?;
        let (net, _) = train_predictor(&ds, cfg)?;
        out.insert(f, net);
    }
    Ok(out)
}

/// Plans and performs any strategy, training predictors when needed.
pub fn expand(
    model: &TransformerCheckpoint,
    plan: &ExpansionPlan,
    predictor_cfg: &PredictorTrainConfig,
) -> Result<Expanded> {
    match plan.strategy {
        Strategy::Lesa | Strategy::LesaRaw => {
            let use_svd = plan.strategy == Strategy::Lesa;
            let preds = train_family_predictors(model, predictor_cfg, use_svd)?;
            expand_lesa(model, &preds, plan, use_svd)
        }
        _ => expand_baseline(model, plan),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormRow {
    pub family: MatrixFamily,
    pub original_mean_norm: f64,
    pub synthesized_mean_norm: f64,
    pub ratio: f64,
}

fn mean_column_norm(t: &Tensor) -> Result<f64> {
    let n = t.column_norms()?;
    Ok(n.iter().sum::<f64>() / n.len() as f64)
}

/// Per family: mean column norm of the new layers against the mean column
/// norm of the original layers they were derived from.
pub fn norm_report(original: &TransformerCheckpoint, expanded: &Expanded) -> Result<Vec<NormRow>> {
    let new: Vec<(usize, LayerSource)> = expanded
        .plan
        .entries
        .iter()
        .copied()
        .enumerate()
        .filter(|(_, e)| e.is_new())
        .collect();
    if new.is_empty() {
        return Err(Error::arg("expansion added no layers"));
    }
    let mut src: Vec<usize> = new.iter().flat_map(|(_, e)| e.sources()).collect();
    src.sort_unstable();
    src.dedup();
    MatrixFamily::ALL
        .into_iter()
        .map(|f| {
            let mut orig = 0.0;
            for &l in &src {
                orig += mean_column_norm(original.layers[l - 1].matrix(f))?;
            }
            orig /= src.len() as f64;
            let mut syn = 0.0;
            for &(i, _) in &new {
                syn += mean_column_norm(expanded.model.layers[i].matrix(f))?;
            }
            syn /= new.len() as f64;
            Ok(NormRow {
                family: f,
                original_mean_norm: orig,
                synthesized_mean_norm: syn,
                ratio: syn / orig,
            })
        })
        .collect()
}

pub fn norm_report_csv(rows: &[NormRow]) -> String {
    let mut s = String::from("family,original_mean_norm,synthesized_mean_norm,ratio\n");
    for r in rows {
        s.push_str(&format!(
            "{},{:?},{:?},{:?}\n",
            r.family, r.original_mean_norm, r.synthesized_mean_norm, r.ratio
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::ModelConfig;
    use crate::numkernel::Rng;

    fn model(layers: usize) -> TransformerCheckpoint {
        let cfg = ModelConfig {
            n_layers: layers,
            d_model: 8,
            n_heads: 2,
            d_ff: 12,
            vocab_size: 11,
            max_seq_len: 16,
            rope_theta: 10000.0,
        };
        TransformerCheckpoint::init(cfg, &mut Rng::new(layers as u64), 0.3).unwrap()
    }

    fn plan(l: usize, s: Strategy, p: ExpansionParams) -> Result<ExpansionPlan> {
        ExpansionPlan::new(l, s, &p)
    }

    #[test]
    fn thirty_two_layer_plans() {
        let p = plan(32, Strategy::Lesa, ExpansionParams { interval: Some((15, 31)), ..Default::default() }).unwrap();
        assert_eq!(p.len(), 48);
        assert_eq!(default_interval(32), (15, 31));
        let s = plan(32, Strategy::Solar, ExpansionParams { n_overlap: Some(24), ..Default::default() }).unwrap();
        let idx: Vec<usize> = s.entries.iter().map(|e| e.sources()[0]).collect();
        let want: Vec<usize> = (1..=24).chain(9..=32).collect();
        assert_eq!(idx, want);
        let s12 = plan(12, Strategy::Solar, ExpansionParams::default()).unwrap();
        let idx: Vec<usize> = s12.entries.iter().map(|e| e.sources()[0]).collect();
        assert_eq!(idx, (1..=9).chain(4..=12).collect::<Vec<_>>());
    }

    #[test]
    fn interpolation_pattern() {
        let p = plan(3, Strategy::Interpolation, ExpansionParams::default()).unwrap();
        use LayerSource::*;
        assert_eq!(
            p.entries,
            vec![
                Original { layer: 1 },
                Copy { layer: 1 },
                Original { layer: 2 },
                Copy { layer: 2 },
                Original { layer: 3 },
                Copy { layer: 3 }
            ]
        );
    }

    #[test]
    fn invalid_params() {
        let bad = |s, p| matches!(plan(12, s, p), Err(Error::Argument(_)));
        assert!(bad(Strategy::Lesa, ExpansionParams { interval: Some((0, 5)), ..Default::default() }));
        assert!(bad(Strategy::Lesa, ExpansionParams { interval: Some((6, 13)), ..Default::default() }));
        assert!(bad(Strategy::Lesa, ExpansionParams { interval: Some((7, 6)), ..Default::default() }));
        assert!(bad(Strategy::Solar, ExpansionParams { n_overlap: Some(5), ..Default::default() }));
        assert!(bad(Strategy::Solar, ExpansionParams { n_overlap: Some(13), ..Default::default() }));
        assert!(bad(Strategy::Stack, ExpansionParams { group_size: Some(0), ..Default::default() }));
        assert!(bad(Strategy::Pro, ExpansionParams { n_copies: Some(0), ..Default::default() }));
    }

    #[test]
    fn count_formulas_hold() {
        let mut rng = Rng::new(1);
        for _ in 0..200 {
            let l = 1 + rng.below(40);
            let a = 1 + rng.below(l);
            let b = a + rng.below(l - a + 1);
            let p = plan(l, Strategy::Lesa, ExpansionParams { interval: Some((a, b)), ..Default::default() }).unwrap();
            assert_eq!(p.len(), l + b - a);
            assert_eq!(plan(l, Strategy::Interpolation, ExpansionParams::default()).unwrap().len(), 2 * l);
            let g = 1 + rng.below(l);
            assert_eq!(plan(l, Strategy::Stack, ExpansionParams { group_size: Some(g), ..Default::default() }).unwrap().len(), 2 * l);
            let k = 1 + rng.below(l);
            assert_eq!(plan(l, Strategy::Pro, ExpansionParams { n_copies: Some(k), ..Default::default() }).unwrap().len(), l + k);
            let n = l.div_ceil(2) + rng.below(l - l.div_ceil(2) + 1);
            let s = plan(l, Strategy::Solar, ExpansionParams { n_overlap: Some(n), ..Default::default() }).unwrap();
            assert_eq!(s.len(), 2 * n);
            // Originals appear exactly once for lesa, interpolation and solar.
            for p in [&p, &s] {
                let mut seen = vec![0; l];
                for e in &p.entries {
                    if let LayerSource::Original { layer } = e {
                        seen[layer - 1] += 1;
                    }
                }
                assert!(seen.iter().all(|&c| c == 1));
            }
        }
    }

    #[test]
    fn empty_interval_is_identity() {
        let m = model(4);
        let p = plan(4, Strategy::Lesa, ExpansionParams { interval: Some((2, 2)), ..Default::default() }).unwrap();
        let out = expand_lesa(&m, &PredictorSet::new(), &p, true).unwrap();
        assert!(out.model.bit_eq(&m));
    }

    #[test]
    fn copies_do_not_alias() {
        let m = model(3);
        let p = plan(3, Strategy::Stack, ExpansionParams::default()).unwrap();
        let mut out = expand_baseline(&m, &p).unwrap();
        out.model.layers[3].q_proj.data_mut()[0] += 1.0;
        assert_ne!(out.model.layers[3].q_proj.data()[0], out.model.layers[0].q_proj.data()[0]);
        assert_eq!(m.layers[0].q_proj.data()[0], out.model.layers[0].q_proj.data()[0]);
    }

    #[test]
    fn interpolation_norm_ratios_are_one() {
        let m = model(3);
        let p = plan(3, Strategy::Interpolation, ExpansionParams::default()).unwrap();
        let out = expand_baseline(&m, &p).unwrap();
        for r in norm_report(&m, &out).unwrap() {
            assert_eq!(r.ratio, 1.0);
        }
        let csv = norm_report_csv(&norm_report(&m, &out).unwrap());
        assert!(csv.starts_with("family,original_mean_norm,synthesized_mean_norm,ratio\n"));
        assert_eq!(csv.lines().count(), 8);
    }

    #[test]
    fn lesa_structure_and_mask() {
        let m = model(6);
        let cfg = PredictorTrainConfig { epochs: 2, hidden: 8, ..Default::default() };
        let p = plan(6, Strategy::Lesa, ExpansionParams { interval: Some((2, 5)), ..Default::default() }).unwrap();
        let out = expand(&m, &p, &cfg).unwrap();
        assert_eq!(out.model.n_layers(), 9);
        assert_eq!(out.new_layer_mask().iter().filter(|&&b| b).count(), 3);
        assert_eq!(out.frozen_layers(), vec![0, 1, 3, 5, 7, 8]);
        let syn = &out.model.layers[2];
        let want = m.layers[1].input_norm.lincomb(0.5, &m.layers[2].input_norm, 0.5).unwrap();
        assert!(syn.input_norm.bit_eq(&want));
        let raw = ExpansionPlan::new(6, Strategy::LesaRaw, &p.params).unwrap();
        assert_eq!(expand(&m, &raw, &cfg).unwrap().model.n_layers(), 9);
        let mut missing = train_family_predictors(&m, &cfg, true).unwrap();
        missing.remove(&MatrixFamily::DownProj);
        assert!(matches!(expand_lesa(&m, &missing, &p, true), Err(Error::Config(_))));
    }

    #[test]
    fn provenance_sidecar() {
        let m = model(4);
        let p = plan(4, Strategy::Pro, ExpansionParams { identity_init: true, ..Default::default() }).unwrap();
        let out = expand_baseline(&m, &p).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = out.write_provenance(&dir.path().join("x.lfck")).unwrap();
        let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
        assert_eq!(v["layers"].as_array().unwrap().len(), 5);
        assert_eq!(v["layers"][4]["kind"], "copy");
        assert_eq!(v["layers"][4]["source"][0], 4);
    }
}
