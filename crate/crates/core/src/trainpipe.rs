//! Corpus ingestion, byte tokenizer, pre-training with layer freezing and
//! the strategy comparison driver.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::TransformerCheckpoint;
use crate::error::{Error, Result};
use crate::expansion::{expand, ExpansionParams, ExpansionPlan, Strategy};
use crate::lm::{loss_and_grad, perplexity_params, LmParams, TokenBatch, Trainable};
use crate::numkernel::{adamw_update, AdamWParams, Rng};
use crate::predictor::PredictorTrainConfig;

pub const BOS: u32 = 256;
pub const EOS: u32 = 257;
pub const VOCAB_SIZE: usize = 258;

pub fn tokenize(bytes: &[u8]) -> Vec<u32> {
    bytes.iter().map(|&b| b as u32).collect()
}

/// `BOS` + bytes + `EOS`.
pub fn tokenize_document(bytes: &[u8]) -> Vec<u32> {
    let mut t = Vec::with_capacity(bytes.len() + 2);
    t.push(BOS);
    t.extend(bytes.iter().map(|&b| b as u32));
    t.push(EOS);
    t
}

/// Bytes of the token stream; `BOS` and `EOS` carry no bytes.
pub fn detokenize(tokens: &[u32]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(tokens.len());
    for &t in tokens {
        match t {
            0..=255 => out.push(t as u8),
            BOS | EOS => {}
            _ => return Err(Error::validation(format!("token {t} is not a byte token"))),
        }
    }
    Ok(out)
}

/// Training stream plus held-out evaluation sequences carved from the tail.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub train: Vec<u32>,
    /// Each sequence is `BOS` followed by `eval_len − 1` bytes.
    pub eval: Vec<Vec<u32>>,
    pub files: Vec<PathBuf>,
    pub total_bytes: usize,
    pub eval_bytes: usize,
}

fn collect_files(path: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let meta = fs::metadata(path)
        .map_err(|e| Error::io_msg(e.kind(), format!("{}: {e}", path.display())))?;
    if meta.is_file() {
        out.push(path.to_path_buf());
    } else if meta.is_dir() {
        for entry in fs::read_dir(path)? {
            collect_files(&entry?.path(), out)?;
        }
    }
    Ok(())
}

/// Reads every file under `path` (a file or a directory, recursively) in
/// lexicographic path order.
pub fn ingest(path: &Path, eval_count: usize, eval_len: usize) -> Result<Corpus> {
    let mut files = Vec::new();
    collect_files(path, &mut files)?;
    files.sort();
    if files.is_empty() {
        return Err(Error::io_msg(
            std::io::ErrorKind::NotFound,
            format!("no readable files under {}", path.display()),
        ));
    }
    let mut bytes = Vec::new();
    for f in &files {
        bytes.extend(fs::read(f)?);
    }
    let mut c = corpus_from_bytes(&bytes, eval_count, eval_len)?;
    c.files = files;
    Ok(c)
}

pub fn corpus_from_bytes(bytes: &[u8], eval_count: usize, eval_len: usize) -> Result<Corpus> {
    if eval_count > 0 && eval_len < 2 {
        return Err(Error::arg("evaluation sequences need at least 2 tokens"));
    }
    let per = eval_len.saturating_sub(1);
    let eval_bytes = eval_count * per;
    if eval_bytes >= bytes.len() {
        return Err(Error::arg(format!(
            "corpus of {} bytes too small for {eval_count} evaluation sequences of {eval_len} tokens",
            bytes.len()
        )));
    }
    let split = bytes.len() - eval_bytes;
    let eval = (0..eval_count)
        .map(|i| {
            let mut s = Vec::with_capacity(eval_len);
            s.push(BOS);
            s.extend(tokenize(&bytes[split + i * per..split + (i + 1) * per]));
            s
        })
        .collect();
    Ok(Corpus {
        train: tokenize(&bytes[..split]),
        eval,
        files: Vec::new(),
        total_bytes: bytes.len(),
        eval_bytes,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreezeMode {
    /// Only layers outside the freeze mask train; embeddings, head and
    /// final norm are frozen as well unless `train_outer` is set.
    NewLayersOnly,
    #[default]
    None,
}

impl std::str::FromStr for FreezeMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "new" | "new_layers_only" => Ok(FreezeMode::NewLayersOnly),
            "none" => Ok(FreezeMode::None),
            _ => Err(Error::arg(format!("unknown freeze mode '{s}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub warmup_ratio: f64,
    pub batch_size: usize,
    pub grad_accum_steps: usize,
    pub cutoff_len: usize,
    pub total_steps: usize,
    pub seed: u64,
    pub freeze_mode: FreezeMode,
    /// Keep embeddings, head and final norm trainable in `new_layers_only`.
    pub train_outer: bool,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

pub const CONTINUAL_LR: f64 = 5e-5;
pub const SCRATCH_LR: f64 = 3e-4;

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: CONTINUAL_LR,
            warmup_ratio: 0.1,
            batch_size: 8,
            grad_accum_steps: 4,
            cutoff_len: 256,
            total_steps: 100,
            seed: 0,
            freeze_mode: FreezeMode::None,
            train_outer: false,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl TrainConfig {
    pub fn scratch() -> Self {
        TrainConfig {
            lr: SCRATCH_LR,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=0.5).contains(&self.warmup_ratio) {
            return Err(Error::Config(format!(
                "warmup_ratio {} outside [0, 0.5]",
                self.warmup_ratio
            )));
        }
        if self.total_steps == 0 {
            return Err(Error::Config("total_steps must be at least 1".into()));
        }
        if self.batch_size == 0 || self.grad_accum_steps == 0 || self.cutoff_len < 2 {
            return Err(Error::Config(
                "batch_size and grad_accum_steps must be ≥ 1 and cutoff_len ≥ 2".into(),
            ));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("invalid learning rate {}", self.lr)));
        }
        Ok(())
    }

    /// Short stable digest of the configuration.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serialises");
        hex_digest(&json)[..16].to_string()
    }
}

pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Linear warmup to `lr` over `w = warmup_ratio·total` steps, then cosine
/// decay to zero at `total`.
pub fn lr_at(step: usize, total: usize, warmup_ratio: f64, lr: f64) -> f64 {
    let w = warmup_ratio * total as f64;
    let t = step as f64;
    if w > 0.0 && t <= w {
        lr * (t / w)
    } else {
        let span = total as f64 - w;
        lr * 0.5 * (1.0 + (std::f64::consts::PI * (t - w) / span).cos())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub raw_loss: f64,
    pub smoothed_loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    pub points: Vec<CurvePoint>,
    pub strategy: String,
    pub seed: u64,
    pub config_hash: String,
}

pub const EMA_COEFF: f64 = 0.98;

impl LossCurve {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,raw_loss,smoothed_loss,lr\n");
        for p in &self.points {
            s.push_str(&format!(
                "{},{:?},{:?},{:?}\n",
                p.step, p.raw_loss, p.smoothed_loss, p.lr
            ));
        }
        s
    }

    pub fn initial_raw(&self) -> Option<f64> {
        self.points.first().map(|p| p.raw_loss)
    }

    pub fn final_smoothed(&self) -> Option<f64> {
        self.points.last().map(|p| p.smoothed_loss)
    }

    /// First step whose smoothed loss is at or below `threshold`.
    pub fn steps_to(&self, threshold: f64) -> Option<usize> {
        self.points
            .iter()
            .find(|p| p.smoothed_loss <= threshold)
            .map(|p| p.step)
    }
}

/// Draws training windows (`BOS` + `cutoff_len − 1` tokens) at seeded offsets.
pub struct BatchSampler {
    rng: Rng,
    batch_size: usize,
    cutoff: usize,
}

impl BatchSampler {
    pub fn new(seed: u64, batch_size: usize, cutoff: usize) -> Self {
        BatchSampler {
            rng: Rng::derive(seed, "batches"),
            batch_size,
            cutoff,
        }
    }

    pub fn next(&mut self, stream: &[u32]) -> Result<TokenBatch> {
        let span = self.cutoff - 1;
        if stream.len() < span {
            return Err(Error::arg(format!(
                "training stream of {} tokens shorter than a window of {span}",
                stream.len()
            )));
        }
        let rows: Vec<Vec<u32>> = (0..self.batch_size)
            .map(|_| {
                let s = self.rng.below(stream.len() - span + 1);
                let mut r = Vec::with_capacity(self.cutoff);
                r.push(BOS);
                r.extend_from_slice(&stream[s..s + span]);
                r
            })
            .collect();
        TokenBatch::new(&rows)
    }
}

/// Parameter groups updated under a freeze mask (0-based frozen layers).
pub fn trainable_groups(n_layers: usize, frozen: &[usize], cfg: &TrainConfig) -> Result<Trainable> {
    let mut t = Trainable::all(n_layers);
    for &l in frozen {
        if l >= n_layers {
            return Err(Error::arg(format!(
                "freeze mask index {l} outside a {n_layers}-layer model"
            )));
        }
        t.layers[l] = false;
    }
    if cfg.freeze_mode == FreezeMode::NewLayersOnly && !cfg.train_outer {
        t.embed = false;
        t.final_norm = false;
        t.lm_head = false;
    }
    Ok(t)
}

/// Trains `model` on `corpus.train`. Layers listed in `frozen` (0-based)
/// never change; see [`FreezeMode`] for the embeddings and head.
pub fn pretrain(
    model: &TransformerCheckpoint,
    corpus: &Corpus,
    cfg: &TrainConfig,
    frozen: &[usize],
) -> Result<(TransformerCheckpoint, LossCurve)> {
    pretrain_labeled(model, corpus, cfg, frozen, "pretrain")
}

pub fn pretrain_labeled(
    model: &TransformerCheckpoint,
    corpus: &Corpus,
    cfg: &TrainConfig,
    frozen: &[usize],
    label: &str,
) -> Result<(TransformerCheckpoint, LossCurve)> {
    cfg.validate()?;
    model.validate()?;
    if cfg.cutoff_len > model.config.max_seq_len {
        return Err(Error::Config(format!(
            "cutoff_len {} exceeds the model's max_seq_len {}",
            cfg.cutoff_len, model.config.max_seq_len
        )));
    }
    let n_layers = model.n_layers();
    let trainable = trainable_groups(n_layers, frozen, cfg)?;
    if !trainable.any() {
        warn!("every parameter is frozen; the loss curve will be flat");
    }
    let mut params = LmParams::<f32>::from_checkpoint(model);
    let hp = AdamWParams {
        lr: cfg.lr,
        beta1: cfg.beta1,
        beta2: cfg.beta2,
        eps: cfg.eps,
        weight_decay: cfg.weight_decay,
    };
    // Per-tensor: (trainable, decayed) in LmParams::tensors order.
    let mut flags = vec![(trainable.embed, true)];
    for &l in &trainable.layers {
        for i in 0..9 {
            flags.push((l, i < crate::lm::NORM_IN));
        }
    }
    flags.push((trainable.final_norm, false));
    flags.push((trainable.lm_head, true));
    let mut moments: Vec<Option<(Vec<f32>, Vec<f32>)>> = params
        .tensors()
        .iter()
        .zip(&flags)
        .map(|(t, &(tr, _))| tr.then(|| (vec![0.0; t.len()], vec![0.0; t.len()])))
        .collect();

    let mut sampler = BatchSampler::new(cfg.seed, cfg.batch_size, cfg.cutoff_len);
    let mut points = Vec::with_capacity(cfg.total_steps);
    let mut smoothed: Option<f64> = None;
    let inv_accum = 1.0 / cfg.grad_accum_steps as f32;
    for step in 1..=cfg.total_steps {
        let mut raw = 0.0f64;
        let mut acc: Option<LmParams<f32>> = None;
        for _ in 0..cfg.grad_accum_steps {
            let batch = sampler.next(&corpus.train)?;
            let (loss, g) = loss_and_grad(&params, &batch, &trainable)?;
            if !loss.is_finite() {
                return Err(Error::numeric(format!(
                    "{label}: non-finite loss at step {step}/{}",
                    cfg.total_steps
                )));
            }
            raw += loss;
            match acc.as_mut() {
                None => acc = Some(g),
                Some(a) => a.axpy(1.0, &g),
            }
        }
        raw /= cfg.grad_accum_steps as f64;
        let lr = lr_at(step, cfg.total_steps, cfg.warmup_ratio, cfg.lr);
        if trainable.any() {
            let grads = acc.expect("at least one micro-batch");
            for (((p, g), m), &(_, decay)) in params
                .tensors_mut()
                .into_iter()
                .zip(grads.tensors())
                .zip(moments.iter_mut())
                .zip(&flags)
            {
                if let Some((m, v)) = m {
                    let g: Vec<f32> = g.iter().map(|&x| x * inv_accum).collect();
                    let wd = if decay { cfg.weight_decay } else { 0.0 };
                    adamw_update(p, &g, m, v, step as u64, &hp, lr, wd)?;
                }
            }
        }
        let s = match smoothed {
            None => raw,
            Some(prev) => EMA_COEFF * prev + (1.0 - EMA_COEFF) * raw,
        };
        smoothed = Some(s);
        points.push(CurvePoint {
            step,
            raw_loss: raw,
            smoothed_loss: s,
            lr,
        });
        if step % 50 == 0 || step == cfg.total_steps {
            info!("{label} step {step}/{}: loss {raw:.4} (ema {s:.4}) lr {lr:.2e}", cfg.total_steps);
        }
    }
    let out = params.to_checkpoint()?;
    Ok((
        out,
        LossCurve {
            points,
            strategy: label.to_string(),
            seed: cfg.seed,
            config_hash: cfg.hash(),
        },
    ))
}

/// Perplexity of a checkpoint on the corpus's evaluation split.
pub fn eval_ppl(model: &TransformerCheckpoint, corpus: &Corpus) -> Result<f64> {
    perplexity_params(&LmParams::<f32>::from_checkpoint(model), &corpus.eval)
}

// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompareConfig {
    pub strategies: Vec<Strategy>,
    pub seeds: Vec<u64>,
    pub train: TrainConfig,
    pub predictor: PredictorTrainConfig,
    pub expansion: ExpansionParams,
}

impl Default for CompareConfig {
    fn default() -> Self {
        CompareConfig {
            strategies: vec![Strategy::Lesa, Strategy::Solar],
            seeds: vec![0, 1, 2],
            train: TrainConfig::default(),
            predictor: PredictorTrainConfig::default(),
            expansion: ExpansionParams::default(),
        }
    }
}

/// Continual-training freeze default per strategy.
pub fn default_freeze_mode(s: Strategy) -> FreezeMode {
    match s {
        Strategy::Solar => FreezeMode::None,
        _ => FreezeMode::NewLayersOnly,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub strategy: Strategy,
    pub seed: u64,
    pub init_ppl: f64,
    pub final_ppl: f64,
    pub init_loss: f64,
    pub steps_to_threshold: Option<usize>,
    pub total_steps: usize,
    pub wall_clock_s: f64,
    pub curve: LossCurve,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub base_ppl: f64,
    pub rows: Vec<CompareRow>,
}

impl CompareReport {
    pub fn row(&self, s: Strategy, seed: u64) -> Option<&CompareRow> {
        self.rows.iter().find(|r| r.strategy == s && r.seed == seed)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("strategy,seed,init_ppl,final_ppl,steps_to_threshold,wall_clock_s\n");
        for r in &self.rows {
            let st = r.steps_to_threshold.map(|v| v.to_string()).unwrap_or_default();
            s.push_str(&format!(
                "{},{},{:?},{:?},{},{:.3}\n",
                r.strategy, r.seed, r.init_ppl, r.final_ppl, st, r.wall_clock_s
            ));
        }
        s
    }

    /// Seeds on which `pred(a_row, b_row)` holds, out of seeds having both.
    pub fn majority(&self, a: Strategy, b: Strategy, pred: impl Fn(&CompareRow, &CompareRow) -> bool) -> (usize, usize) {
        let mut seeds: Vec<u64> = self.rows.iter().map(|r| r.seed).collect();
        seeds.sort_unstable();
        seeds.dedup();
        let (mut hit, mut total) = (0, 0);
        for s in seeds {
            if let (Some(x), Some(y)) = (self.row(a, s), self.row(b, s)) {
                total += 1;
                if pred(x, y) {
                    hit += 1;
                }
            }
        }
        (hit, total)
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::from("# Strategy comparison\n\n");
        s.push_str(&format!("Base model perplexity: {:.4}\n\n", self.base_ppl));
        s.push_str("| strategy | seed | init PPL | final PPL | init loss | steps to threshold | wall clock (s) |\n");
        s.push_str("|---|---|---|---|---|---|---|\n");
        for r in &self.rows {
            let st = r
                .steps_to_threshold
                .map(|v| format!("{v}/{}", r.total_steps))
                .unwrap_or_else(|| "-".into());
            s.push_str(&format!(
                "| {} | {} | {:.4} | {:.4} | {:.4} | {} | {:.1} |\n",
                r.strategy, r.seed, r.init_ppl, r.final_ppl, r.init_loss, st, r.wall_clock_s
            ));
        }
        let mut strategies: Vec<Strategy> = Vec::new();
        for r in &self.rows {
            if !strategies.contains(&r.strategy) {
                strategies.push(r.strategy);
            }
        }
        s.push_str("\n## Majority-of-seeds orderings\n\n");
        for (i, &a) in strategies.iter().enumerate() {
            for &b in &strategies[i + 1..] {
                let (h, t) = self.majority(a, b, |x, y| x.init_ppl < y.init_ppl);
                s.push_str(&format!("- init PPL {a} < {b}: {h}/{t} seeds\n"));
                let (h, t) = self.majority(a, b, |x, y| x.init_loss < y.init_loss);
                s.push_str(&format!("- initial loss {a} < {b}: {h}/{t} seeds\n"));
                let (h, t) = self.majority(a, b, |x, y| x.final_ppl < y.final_ppl);
                s.push_str(&format!("- final PPL {a} < {b}: {h}/{t} seeds\n"));
            }
        }
        s
    }
}

/// Expands `base` with every strategy for every seed, records the
/// initialisation PPL, continues training and records the curve.
///
/// The threshold for `steps_to_threshold` is the final smoothed loss of the
/// `solar` run of the same seed (absent when solar is not compared).
pub fn compare_strategies(
    base: &TransformerCheckpoint,
    corpus: &Corpus,
    cfg: &CompareConfig,
) -> Result<CompareReport> {
    let base_ppl = eval_ppl(base, corpus)?;
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        let mut seed_rows = Vec::new();
        for &strategy in &cfg.strategies {
            let start = Instant::now();
            let mut pcfg = cfg.predictor;
            pcfg.seed = seed;
            let plan = ExpansionPlan::new(base.n_layers(), strategy, &cfg.expansion)?;
            let expanded = expand(base, &plan, &pcfg)?;
            let init_ppl = eval_ppl(&expanded.model, corpus)?;
            let mut tcfg = cfg.train.clone();
            tcfg.seed = seed;
            tcfg.freeze_mode = default_freeze_mode(strategy);
            let frozen = match tcfg.freeze_mode {
                FreezeMode::NewLayersOnly => expanded.frozen_layers(),
                FreezeMode::None => Vec::new(),
            };
            let (trained, curve) =
                pretrain_labeled(&expanded.model, corpus, &tcfg, &frozen, &strategy.to_string())?;
            let final_ppl = eval_ppl(&trained, corpus)?;
            seed_rows.push(CompareRow {
                strategy,
                seed,
                init_ppl,
                final_ppl,
                init_loss: curve.initial_raw().unwrap_or(f64::NAN),
                steps_to_threshold: None,
                total_steps: tcfg.total_steps,
                wall_clock_s: start.elapsed().as_secs_f64(),
                curve,
            });
        }
        if let Some(th) = seed_rows
            .iter()
            .find(|r| r.strategy == Strategy::Solar)
            .and_then(|r| r.curve.final_smoothed())
        {
            for r in &mut seed_rows {
                r.steps_to_threshold = r.curve.steps_to(th);
            }
        }
        rows.extend(seed_rows);
    }
    Ok(CompareReport { base_ppl, rows })
}

// ---------------------------------------------------------------------------

/// Deterministic English-like text: a seeded vocabulary of pseudo-words with
/// Zipf-distributed frequencies, arranged by a small template grammar.
pub fn synthetic_corpus(seed: u64, n_bytes: usize) -> String {
    let mut rng = Rng::derive(seed, "corpus");
    const ONSETS: [&str; 16] = ["b", "c", "d", "f", "g", "h", "l", "m", "n", "p", "r", "s", "t", "v", "st", "tr"];
    const NUCLEI: [&str; 6] = ["a", "e", "i", "o", "u", "ea"];
    const CODAS: [&str; 8] = ["", "", "n", "r", "s", "t", "l", "nd"];
    let word = |rng: &mut Rng, syl: usize| -> String {
        (0..syl)
            .map(|_| {
                format!(
                    "{}{}{}",
                    ONSETS[rng.below(ONSETS.len())],
                    NUCLEI[rng.below(NUCLEI.len())],
                    CODAS[rng.below(CODAS.len())]
                )
            })
            .collect()
    };
    let class = |rng: &mut Rng, n: usize, syl: (usize, usize)| -> Vec<String> {
        (0..n)
            .map(|_| {
                let n = syl.0 + rng.below(syl.1 - syl.0 + 1);
                word(rng, n)
            })
            .collect()
    };
    let nouns = class(&mut rng, 120, (1, 3));
    let verbs = class(&mut rng, 60, (1, 2));
    let adjs = class(&mut rng, 40, (2, 3));
    let dets = ["the", "a", "every", "some", "this"];
    let preps = ["of", "in", "on", "with", "under", "near"];
    let zipf = |rng: &mut Rng, n: usize| -> usize {
        // Inverse-CDF sampling of p(k) ∝ 1/(k+1).
        let h: f64 = (1..=n).map(|k| 1.0 / k as f64).sum();
        let mut u = rng.uniform() * h;
        for k in 0..n {
            u -= 1.0 / (k + 1) as f64;
            if u <= 0.0 {
                return k;
            }
        }
        n - 1
    };
    let mut out = String::with_capacity(n_bytes + 200);
    while out.len() < n_bytes {
        let phrase = |rng: &mut Rng| -> String {
            let mut p = String::from(dets[rng.below(dets.len())]);
            if rng.uniform() < 0.4 {
                p.push(' ');
                p.push_str(&adjs[zipf(rng, adjs.len())]);
            }
            p.push(' ');
            p.push_str(&nouns[zipf(rng, nouns.len())]);
            if rng.uniform() < 0.25 {
                p.push(' ');
                p.push_str(preps[rng.below(preps.len())]);
                p.push_str(" the ");
                p.push_str(&nouns[zipf(rng, nouns.len())]);
            }
            p
        };
        let subj = phrase(&mut rng);
        let verb = &verbs[zipf(&mut rng, verbs.len())];
        let obj = phrase(&mut rng);
        let mut sentence = format!("{subj} {verb}s {obj}");
        if rng.uniform() < 0.2 {
            let v2 = &verbs[zipf(&mut rng, verbs.len())];
            sentence.push_str(&format!(" and {v2}s {}", phrase(&mut rng)));
        }
        let mut cs = sentence.chars();
        let first = cs.next().unwrap().to_ascii_uppercase();
        out.push(first);
        out.push_str(cs.as_str());
        out.push_str(if rng.uniform() < 0.9 { ". " } else { "? " });
        if rng.uniform() < 0.08 {
            out.push('\n');
        }
    }
    out.truncate(n_bytes);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::ModelConfig;

    #[test]
    fn tokenizer_round_trip() {
        let bytes: Vec<u8> = (0..=255u8).chain([0, 255, 10]).collect();
        assert_eq!(detokenize(&tokenize(&bytes)).unwrap(), bytes);
        assert_eq!(detokenize(&tokenize_document(&bytes)).unwrap(), bytes);
        assert!(detokenize(&[300]).is_err());
    }

    #[test]
    fn ingest_orders_files_and_splits_tail() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("B.txt"), b"bbbbbbbbbb").unwrap();
        fs::write(dir.path().join("A.txt"), b"aaaaaaaaaa").unwrap();
        let c = ingest(dir.path(), 2, 4).unwrap();
        assert_eq!(c.eval_bytes, 6);
        assert_eq!(detokenize(&c.train).unwrap(), b"aaaaaaaaaabbbb");
        assert_eq!(c.eval[0], vec![BOS, 98, 98, 98]);
        assert!(matches!(ingest(dir.path(), 10, 4), Err(Error::Argument(_))));
        let empty = tempfile::tempdir().unwrap();
        assert!(matches!(ingest(empty.path(), 1, 4), Err(Error::Io(_))));
    }

    #[test]
    fn eval_split_arithmetic() {
        let text = synthetic_corpus(0, 1 << 20);
        let c = corpus_from_bytes(text.as_bytes(), 500, 129).unwrap();
        assert_eq!(c.eval_bytes, 500 * 128);
        assert_eq!(c.train.len(), (1 << 20) - 500 * 128);
        assert!(c.eval.iter().all(|s| s.len() == 129));
    }

    #[test]
    fn schedule_endpoints() {
        let (lr, total) = (3e-4, 200);
        assert_eq!(lr_at(0, total, 0.1, lr), 0.0);
        assert_eq!(lr_at(10, total, 0.1, lr), lr * 0.5);
        assert_eq!(lr_at(20, total, 0.1, lr), lr);
        assert!(lr_at(total, total, 0.1, lr) <= 1e-12 * lr);
        assert_eq!(lr_at(0, total, 0.0, lr), lr);
    }

    fn tiny_setup() -> (TransformerCheckpoint, Corpus) {
        let cfg = ModelConfig {
            n_layers: 3,
            d_model: 16,
            n_heads: 2,
            d_ff: 24,
            vocab_size: VOCAB_SIZE,
            max_seq_len: 32,
            rope_theta: 10000.0,
        };
        let m = TransformerCheckpoint::init(cfg, &mut Rng::new(1), 0.05).unwrap();
        let text = synthetic_corpus(1, 20_000);
        (m, corpus_from_bytes(text.as_bytes(), 8, 17).unwrap())
    }

    fn small_cfg(steps: usize) -> TrainConfig {
        TrainConfig {
            lr: 3e-3,
            batch_size: 2,
            grad_accum_steps: 2,
            cutoff_len: 17,
            total_steps: steps,
            ..Default::default()
        }
    }

    #[test]
    fn frozen_layers_are_bit_identical() {
        let (m, c) = tiny_setup();
        let mut cfg = small_cfg(5);
        cfg.freeze_mode = FreezeMode::NewLayersOnly;
        let (out, curve) = pretrain(&m, &c, &cfg, &[0, 2]).unwrap();
        assert!(out.layers[0].bit_eq(&m.layers[0]));
        assert!(out.layers[2].bit_eq(&m.layers[2]));
        assert!(!out.layers[1].bit_eq(&m.layers[1]));
        assert!(out.embed.bit_eq(&m.embed) && out.lm_head.bit_eq(&m.lm_head));
        assert_eq!(curve.points.len(), 5);
    }

    #[test]
    fn everything_frozen_is_flat() {
        let (m, _) = tiny_setup();
        let c = corpus_from_bytes(&[b'x'; 4000], 2, 17).unwrap();
        let mut cfg = small_cfg(4);
        cfg.freeze_mode = FreezeMode::NewLayersOnly;
        let (out, curve) = pretrain(&m, &c, &cfg, &[0, 1, 2]).unwrap();
        assert!(out.bit_eq(&m));
        let first = curve.points[0].raw_loss;
        assert!(curve.points.iter().all(|p| p.raw_loss == first));
    }

    #[test]
    fn training_is_reproducible_and_learns() {
        let (m, c) = tiny_setup();
        let cfg = small_cfg(30);
        let (a, ca) = pretrain(&m, &c, &cfg, &[]).unwrap();
        let (b, cb) = pretrain(&m, &c, &cfg, &[]).unwrap();
        assert!(a.bit_eq(&b));
        assert_eq!(ca, cb);
        assert!(ca.points.last().unwrap().smoothed_loss < ca.points[0].raw_loss);
        let csv = ca.to_csv();
        assert!(csv.starts_with("step,raw_loss,smoothed_loss,lr\n"));
        let steps: Vec<usize> = ca.points.iter().map(|p| p.step).collect();
        assert!(steps.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn synthetic_corpus_is_deterministic_ascii() {
        let a = synthetic_corpus(3, 5000);
        assert_eq!(a, synthetic_corpus(3, 5000));
        assert_eq!(a.len(), 5000);
        assert!(a.is_ascii());
        assert_ne!(a, synthetic_corpus(4, 5000));
    }
}
