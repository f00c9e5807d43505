//! Acceptance suite. Prints one PASS/FAIL line per criterion.
//!
//! Environment:
//! - `LAYERFORGE_ACCEPTANCE_ONLY=C1,C12` runs a subset.
//! - `LAYERFORGE_ACCEPTANCE_STRICT=1` exits non-zero when any criterion
//!   fails. By default only a crash of the harness itself does.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::time::Instant;

use layerforge::analysis::{calibrate_affinities, pca2d, tsne2d, TsneParams};
use layerforge::expansion::{
    expand, expand_baseline, expand_lesa, family_dataset, norm_report, train_family_predictors, ExpansionParams,
    ExpansionPlan, PredictorSet, Strategy,
};
use layerforge::lm::{cross_entropy, forward, forward_logits, loss_and_grad, LmParams, TokenBatch, Trainable};
use layerforge::numkernel::{adamw_step, AdamWParams, AdamWState};
use layerforge::predictor::{
    build_predictor, evaluate_predictor, predictor_loss_and_grad_f64, train_predictor, NormMode,
    PredictorTrainConfig, TripletDataset,
};
use layerforge::trainpipe::{
    compare_strategies, corpus_from_bytes, detokenize, eval_ppl, hex_digest, lr_at, pretrain, synthetic_corpus,
    tokenize, CompareConfig, CompareReport, Corpus, FreezeMode, TrainConfig,
};
use layerforge::{
    concat_layers, load_checkpoint, save_checkpoint, svd_thin, MatrixFamily, ModelConfig, Result, Rng, SvdSpace,
    Tensor, TransformerCheckpoint,
};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Result<Outcome> {
    Ok(Outcome {
        pass,
        detail: detail.into(),
    })
}

/// Predictor configuration of the experimental criteria.
fn predictor_cfg(seed: u64) -> PredictorTrainConfig {
    PredictorTrainConfig {
        epochs: 100,
        seed,
        ..Default::default()
    }
}

fn continual_cfg(steps: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        batch_size: 8,
        grad_accum_steps: 2,
        cutoff_len: 64,
        total_steps: steps,
        seed,
        ..Default::default()
    }
}

#[derive(Default)]
struct Ctx {
    base: Option<(TransformerCheckpoint, Corpus)>,
    preds: Option<PredictorSet>,
    report: Option<CompareReport>,
}

impl Ctx {
    /// Converged 12-layer toy model on a 2 MB synthetic byte corpus.
    fn base(&mut self) -> Result<&(TransformerCheckpoint, Corpus)> {
        if self.base.is_none() {
            let t = Instant::now();
            let corpus = corpus_from_bytes(synthetic_corpus(7, 2_000_000).as_bytes(), 100, 128)?;
            let cfg = ModelConfig {
                max_seq_len: 128,
                ..Default::default()
            };
            let init = TransformerCheckpoint::init(cfg, &mut Rng::new(0), 0.02)?;
            let tcfg = TrainConfig {
                lr: 1e-3,
                warmup_ratio: 0.05,
                batch_size: 8,
                grad_accum_steps: 2,
                cutoff_len: 64,
                total_steps: 1500,
                seed: 0,
                ..TrainConfig::scratch()
            };
            let (model, curve) = pretrain(&init, &corpus, &tcfg, &[])?;
            println!(
                "   base model: 12 layers, final smoothed loss {:.4}, eval PPL {:.4} ({:.0}s)",
                curve.final_smoothed().unwrap_or(f64::NAN),
                eval_ppl(&model, &corpus)?,
                t.elapsed().as_secs_f64()
            );
            self.base = Some((model, corpus));
        }
        Ok(self.base.as_ref().unwrap())
    }

    /// Seed-0 coefficient-space predictors of the base model.
    fn preds(&mut self) -> Result<PredictorSet> {
        if self.preds.is_none() {
            let (m, _) = self.base()?;
            let m = m.clone();
            self.preds = Some(train_family_predictors(&m, &predictor_cfg(0), true)?);
        }
        Ok(self.preds.clone().unwrap())
    }

    /// lesa, lesa_raw and solar expansions of the base model, each
    /// continually trained for 150 steps, over seeds 0..3.
    fn report(&mut self) -> Result<&CompareReport> {
        if self.report.is_none() {
            let (m, c) = self.base()?;
            let (m, c) = (m.clone(), c.clone());
            let cfg = CompareConfig {
                strategies: vec![Strategy::Lesa, Strategy::LesaRaw, Strategy::Solar],
                seeds: vec![0, 1, 2],
                train: continual_cfg(150, 0),
                predictor: predictor_cfg(0),
                expansion: ExpansionParams::default(),
            };
            let t = Instant::now();
            let r = compare_strategies(&m, &c, &cfg)?;
            println!("   strategy comparison ran in {:.0}s", t.elapsed().as_secs_f64());
            let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
            std::fs::create_dir_all(&dir)?;
            std::fs::write(dir.join("report.csv"), r.to_csv())?;
            std::fs::write(dir.join("report.md"), r.to_markdown())?;
            println!("   report written to {}", dir.display());
            self.report = Some(r);
        }
        Ok(self.report.as_ref().unwrap())
    }
}

// ---------------------------------------------------------------------------
// Oracles

fn to_f64(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

/// Max deviation of `AᵀA` from the identity for an `rows × k` column block.
fn orthonormality_gap(a: &[f64], rows: usize, k: usize) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..k {
        for j in 0..k {
            let dot: f64 = (0..rows).map(|r| a[r * k + i] * a[r * k + j]).sum();
            let want = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((dot - want).abs());
        }
    }
    worst
}

fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = a[r * cols + c];
        }
    }
    t
}

struct SvdCheck {
    recon: f64,
    ortho: f64,
    descending: bool,
    deterministic: bool,
}

fn check_svd(w: &Tensor) -> Result<SvdCheck> {
    let (rows, cols) = w.dims2()?;
    let s = svd_thin(w)?;
    let again = svd_thin(w)?;
    let k = s.sigma.len();
    let (u, vt) = (to_f64(&s.u), to_f64(&s.vt));
    let wd = to_f64(w);
    let mut num = 0.0;
    for r in 0..rows {
        for c in 0..cols {
            let v: f64 = (0..k).map(|i| u[r * k + i] * s.sigma[i] as f64 * vt[i * cols + c]).sum();
            num += (v - wd[r * cols + c]).powi(2);
        }
    }
    let den = wd.iter().map(|v| v * v).sum::<f64>();
    let recon = if den > 0.0 { (num / den).sqrt() } else { num.sqrt() };
    let ortho = orthonormality_gap(&u, rows, k).max(orthonormality_gap(&transpose(&vt, k, cols), cols, k));
    Ok(SvdCheck {
        recon,
        ortho,
        descending: s.sigma.windows(2).all(|p| p[0] >= p[1]) && s.sigma.iter().all(|&x| x >= 0.0),
        deterministic: s.u.bit_eq(&again.u) && s.vt.bit_eq(&again.vt) && s.sigma == again.sigma,
    })
}

fn random_tensor(rng: &mut Rng, rows: usize, cols: usize, std: f64) -> Tensor {
    Tensor::new([rows, cols], rng.normal_vec(rows * cols, 0.0, std)).unwrap()
}

fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

// ---------------------------------------------------------------------------
// Criteria

fn c1_svd_contract(ctx: &mut Ctx) -> Result<Outcome> {
    let mut rng = Rng::new(2024);
    let (mut recon, mut ortho, mut ok) = (0.0f64, 0.0f64, true);
    let mut cases = 0;
    for _ in 0..24 {
        let d1 = 1 + rng.below(48);
        let m = 1 + rng.below(96);
        let c = check_svd(&random_tensor(&mut rng, d1, m, 1.0))?;
        recon = recon.max(c.recon);
        ortho = ortho.max(c.ortho);
        ok &= c.descending && c.deterministic;
        cases += 1;
    }
    let (base, _) = ctx.base()?;
    for f in MatrixFamily::ALL {
        let mats: Vec<&Tensor> = base.layers.iter().map(|l| l.matrix(f)).collect();
        let c = check_svd(&concat_layers(&mats)?)?;
        recon = recon.max(c.recon);
        ortho = ortho.max(c.ortho);
        ok &= c.descending && c.deterministic;
        ok &= SvdSpace::of_checkpoint(base, f)? == SvdSpace::of_checkpoint(base, f)?;
        cases += 1;
    }
    outcome(
        ok && recon <= 1e-4 && ortho <= 1e-4,
        format!("{cases} matrices: max recon err {recon:.2e}, max orthonormality gap {ortho:.2e}, sigma descending and bit-stable: {ok}"),
    )
}

fn c2_slice_reconstruct(ctx: &mut Ctx) -> Result<Outcome> {
    let (base, _) = ctx.base()?;
    let mut worst = 0.0f64;
    for f in MatrixFamily::ALL {
        let space = SvdSpace::of_checkpoint(base, f)?;
        for (i, l) in base.layers.iter().enumerate() {
            let w = space.reconstruct_layer(&space.coeffs[i])?;
            worst = worst.max(layerforge::numkernel::relative_frobenius_error(&w, l.matrix(f))?);
        }
    }
    outcome(worst <= 1e-4, format!("7 families x 12 layers: max relative error {worst:.2e}"))
}

fn c3_gradients(_: &mut Ctx) -> Result<Outcome> {
    let mut rng = Rng::new(3);
    let (mut checked, mut worst) = (0usize, 0.0f64);

    // Predictor MLP.
    for case in 0..10 {
        let r = 1 + rng.below(6);
        let h = 1 + rng.below(12);
        let n = 1 + rng.below(4);
        let lambda = [0.0, 5e-5, 0.5][case % 3];
        let mode = if case % 2 == 0 { NormMode::PerColumn } else { NormMode::WholeMatrix };
        let sizes = [h * 2 * r, h, h * h, h, r * h, r];
        let mut p: [Vec<f64>; 6] = sizes.map(|s| (0..s).map(|_| rng.normal() * 0.5).collect());
        let x: Vec<f64> = (0..n * 2 * r).map(|_| rng.normal()).collect();
        let t: Vec<f64> = (0..n * r).map(|_| rng.normal()).collect();
        let (_, g) = predictor_loss_and_grad_f64(&p, r, h, &x, &t, n, lambda, mode)?;
        for _ in 0..12 {
            let ti = rng.below(6);
            let i = rng.below(p[ti].len());
            let eps = 1e-5;
            let orig = p[ti][i];
            p[ti][i] = orig + eps;
            let lp = predictor_loss_and_grad_f64(&p, r, h, &x, &t, n, lambda, mode)?.0;
            p[ti][i] = orig - eps;
            let lm = predictor_loss_and_grad_f64(&p, r, h, &x, &t, n, lambda, mode)?.0;
            p[ti][i] = orig;
            worst = worst.max(rel_err((lp - lm) / (2.0 * eps), g[ti][i], 1e-6));
            checked += 1;
        }
    }
    let predictor_coords = checked;

    // Full toy LM.
    for case in 0..4u64 {
        let cfg = ModelConfig {
            n_layers: 1 + case as usize % 2,
            d_model: 8,
            n_heads: 2,
            d_ff: 12,
            vocab_size: 13,
            max_seq_len: 16,
            rope_theta: 10000.0,
        };
        let m = TransformerCheckpoint::init(cfg.clone(), &mut Rng::new(100 + case), 0.3)?;
        let mut p = LmParams::<f64>::from_checkpoint(&m);
        for l in &mut p.layers {
            for t in [7, 8] {
                for v in &mut l[t] {
                    *v = 1.0 + 0.3 * rng.normal();
                }
            }
        }
        let rows: Vec<Vec<u32>> = (0..2).map(|_| (0..6).map(|_| rng.below(13) as u32).collect()).collect();
        let batch = TokenBatch::new(&rows)?;
        let (_, g) = loss_and_grad(&p, &batch, &Trainable::all(cfg.n_layers))?;
        let loss = |p: &LmParams<f64>| -> Result<f64> { Ok(cross_entropy(&forward(p, &batch, false)?.0, &batch, 13, false)?.0) };
        let n_t = p.tensors().len();
        for _ in 0..40 {
            let ti = rng.below(n_t);
            let i = rng.below(p.tensors()[ti].len());
            let eps = 1e-5;
            let orig = p.tensors()[ti][i];
            p.tensors_mut()[ti][i] = orig + eps;
            let lp = loss(&p)?;
            p.tensors_mut()[ti][i] = orig - eps;
            let lm = loss(&p)?;
            p.tensors_mut()[ti][i] = orig;
            worst = worst.max(rel_err((lp - lm) / (2.0 * eps), g.tensors()[ti][i], 1e-7));
            checked += 1;
        }
    }
    outcome(
        checked >= 200 && worst <= 1e-3,
        format!(
            "{checked} coordinates ({predictor_coords} predictor, {} LM): max relative error {worst:.2e}",
            checked - predictor_coords
        ),
    )
}

fn random_init_loss(ds: &TripletDataset, cfg: &PredictorTrainConfig) -> Result<f64> {
    let (r, _) = ds.check_uniform()?;
    let mut net = build_predictor(r, cfg.hidden, cfg.seed, cfg.init_std)?;
    net.family = ds.family;
    net.lambda = cfg.lambda;
    net.norm_mode = cfg.norm_mode;
    Ok(evaluate_predictor(&net, ds)?.0)
}

fn c4_predictor_learning(ctx: &mut Ctx) -> Result<Outcome> {
    let preds = ctx.preds()?;
    let (base, corpus) = ctx.base()?;
    let cfg = predictor_cfg(0);
    let mut ratios = Vec::new();
    for f in MatrixFamily::ALL {
        let ds = family_dataset(base, f, true, "base")?;
        let init = random_init_loss(&ds, &cfg)?;
        ratios.push((f, evaluate_predictor(&preds[&f], &ds)?.0 / init));
    }
    let under_10 = ratios.iter().filter(|(_, r)| *r <= 0.1).count();
    let all_25 = ratios.iter().all(|(_, r)| *r <= 0.25);

    // Pooled dataset: the base model plus four short continual-training runs.
    let mut ckpts = vec![base.clone()];
    for k in 1..5u64 {
        ckpts.push(pretrain(base, corpus, &continual_cfg(50, 100 + k), &[])?.0);
    }
    let mut held = Vec::new();
    for f in MatrixFamily::ALL {
        let parts = ckpts
            .iter()
            .enumerate()
            .map(|(i, c)| family_dataset(c, f, true, &format!("ckpt{i}")))
            .collect::<Result<Vec<_>>>()?;
        let (train, test) = TripletDataset::pooled(parts)?.split_holdout(0.2, 0)?;
        let (net, _) = train_predictor(&train, &cfg)?;
        held.push((f, evaluate_predictor(&net, &test)?.0 / evaluate_predictor(&net, &train)?.0));
    }
    let pooled_ok = held.iter().all(|(_, r)| *r <= 2.0);
    let fmt = |v: &[(MatrixFamily, f64)]| v.iter().map(|(f, r)| format!("{f} {r:.3}")).collect::<Vec<_>>().join(", ");
    outcome(
        under_10 >= 5 && all_25 && pooled_ok,
        format!(
            "final/init loss: {} ({under_10}/7 <= 0.10, all <= 0.25: {all_25}); pooled held-out/train: {} (all <= 2: {pooled_ok})",
            fmt(&ratios),
            fmt(&held)
        ),
    )
}

fn c5_norm_ablation(ctx: &mut Ctx) -> Result<Outcome> {
    let with_norm = ctx.preds()?;
    let (base, _) = ctx.base()?;
    let plain = train_family_predictors(base, &PredictorTrainConfig { lambda: 0.0, ..predictor_cfg(0) }, true)?;
    let plan = ExpansionPlan::new(base.n_layers(), Strategy::Lesa, &ExpansionParams::default())?;
    let ratios = |preds: &PredictorSet| -> Result<Vec<f64>> {
        Ok(norm_report(base, &expand_lesa(base, preds, &plan, true)?)?.iter().map(|r| r.ratio).collect())
    };
    let (a, b) = (ratios(&with_norm)?, ratios(&plain)?);
    let a_ok = a.iter().all(|r| (0.7..=1.3).contains(r));
    let b_ok = b.iter().all(|r| *r <= 0.3);
    let fmt = |v: &[f64]| v.iter().map(|r| format!("{r:.3}")).collect::<Vec<_>>().join(" ");
    outcome(
        a_ok && b_ok,
        format!("norm ratios (q k v o up down gate) lambda=5e-5: [{}] in [0.7, 1.3]: {a_ok}; lambda=0: [{}] <= 0.3: {b_ok}", fmt(&a), fmt(&b)),
    )
}

fn c6_function_preservation(ctx: &mut Ctx) -> Result<Outcome> {
    let (base, corpus) = ctx.base()?;
    let params = ExpansionParams {
        identity_init: true,
        ..Default::default()
    };
    let grown = expand_baseline(base, &ExpansionPlan::new(base.n_layers(), Strategy::Pro, &params)?)?;
    let batch = TokenBatch::new(&corpus.eval[..8])?;
    let (a, _) = forward_logits(base, &batch)?;
    let (b, _) = forward_logits(&grown.model, &batch)?;
    let dlogit = a.max_abs_diff(&b).unwrap_or(f64::INFINITY);
    let (pa, pb) = (eval_ppl(base, corpus)?, eval_ppl(&grown.model, corpus)?);
    let dppl = (pa - pb).abs() / pa;
    outcome(
        dlogit <= 1e-5 && dppl <= 1e-3,
        format!(
            "{} -> {} layers: max |logit diff| {dlogit:.2e}, PPL {pa:.6} vs {pb:.6} (rel {dppl:.2e})",
            base.n_layers(),
            grown.model.n_layers()
        ),
    )
}

fn c7_init_ppl_ordering(ctx: &mut Ctx) -> Result<Outcome> {
    let r = ctx.report()?;
    let base = r.base_ppl;
    let (hits, total) = r.majority(Strategy::Lesa, Strategy::Solar, |l, s| base < l.init_ppl && l.init_ppl < s.init_ppl);
    let rows: Vec<String> = (0..3u64)
        .filter_map(|s| Some((s, r.row(Strategy::Lesa, s)?, r.row(Strategy::Solar, s)?)))
        .map(|(s, l, so)| format!("s{s}: {:.4}/{:.4}", l.init_ppl, so.init_ppl))
        .collect();
    outcome(
        total == 3 && hits >= 2,
        format!("base {base:.4} < lesa < solar on {hits}/{total} seeds (lesa/solar init PPL {})", rows.join(", ")),
    )
}

fn c8_continual_trend(ctx: &mut Ctx) -> Result<Outcome> {
    let r = ctx.report()?;
    let (init_hits, total) = r.majority(Strategy::Lesa, Strategy::Solar, |l, s| l.init_loss < s.init_loss);
    let (speed_hits, _) = r.majority(Strategy::Lesa, Strategy::Solar, |l, s| {
        l.steps_to_threshold.is_some_and(|k| k as f64 <= 0.75 * s.total_steps as f64)
    });
    let steps: Vec<String> = (0..3u64)
        .filter_map(|s| r.row(Strategy::Lesa, s))
        .map(|l| l.steps_to_threshold.map_or("never".to_string(), |k| k.to_string()))
        .collect();
    outcome(
        total == 3 && init_hits >= 2 && speed_hits >= 2,
        format!(
            "lesa initial loss below solar on {init_hits}/{total} seeds; lesa reaches solar's final smoothed loss within 0.75 x 150 steps on {speed_hits}/{total} (steps: {})",
            steps.join(", ")
        ),
    )
}

fn c9_freezing(ctx: &mut Ctx) -> Result<Outcome> {
    let (base, corpus) = ctx.base()?;
    let mut details = Vec::new();
    let mut ok = true;
    for s in [Strategy::Lesa, Strategy::Interpolation, Strategy::Pro] {
        let plan = ExpansionPlan::new(base.n_layers(), s, &ExpansionParams::default())?;
        let grown = expand(base, &plan, &PredictorTrainConfig::default())?;
        let tcfg = TrainConfig {
            lr: 1e-3,
            batch_size: 4,
            grad_accum_steps: 1,
            cutoff_len: 32,
            total_steps: 10,
            freeze_mode: FreezeMode::NewLayersOnly,
            ..Default::default()
        };
        let frozen = grown.frozen_layers();
        let (trained, _) = pretrain(&grown.model, corpus, &tcfg, &frozen)?;
        let kept = frozen.iter().all(|&i| trained.layers[i].bit_eq(&grown.model.layers[i]))
            && trained.embed.bit_eq(&grown.model.embed)
            && trained.final_norm.bit_eq(&grown.model.final_norm)
            && trained.lm_head.bit_eq(&grown.model.lm_head);
        let moved = (0..trained.n_layers())
            .filter(|i| !frozen.contains(i) && !trained.layers[*i].bit_eq(&grown.model.layers[*i]))
            .count();
        ok &= kept && moved > 0;
        details.push(format!("{s}: {} frozen tensors identical {kept}, {moved} new layers updated", frozen.len() * 9 + 3));
    }
    outcome(ok, details.join("; "))
}

fn c10_insertion_location(ctx: &mut Ctx) -> Result<Outcome> {
    let (base, corpus) = ctx.base()?;
    let n = base.n_layers();
    let out_plan = ExpansionPlan::new(n, Strategy::Lesa, &ExpansionParams::default())?;
    let in_plan = ExpansionPlan::new(
        n,
        Strategy::Lesa,
        &ExpansionParams {
            interval: Some((1, n / 2 + 1)),
            ..Default::default()
        },
    )?;
    let mut hits = 0;
    let mut rows = Vec::new();
    for seed in 0..3u64 {
        let preds = train_family_predictors(base, &predictor_cfg(seed), true)?;
        let po = eval_ppl(&expand_lesa(base, &preds, &out_plan, true)?.model, corpus)?;
        let pi = eval_ppl(&expand_lesa(base, &preds, &in_plan, true)?.model, corpus)?;
        hits += usize::from(po < pi);
        rows.push(format!("s{seed}: {po:.4} vs {pi:.4}"));
    }
    let (a, b) = out_plan.params.interval.unwrap();
    let (c, d) = in_plan.params.interval.unwrap();
    outcome(
        hits >= 2,
        format!("init PPL output-end [{a},{b}] < input-end [{c},{d}] on {hits}/3 seeds ({})", rows.join(", ")),
    )
}

fn c11_no_svd(ctx: &mut Ctx) -> Result<Outcome> {
    let r = ctx.report()?;
    let raw: Vec<_> = r.rows.iter().filter(|x| x.strategy == Strategy::LesaRaw).collect();
    let finite = raw.len() == 3 && raw.iter().all(|x| x.init_ppl.is_finite() && x.final_ppl.is_finite());
    let (hits, total) = r.majority(Strategy::Lesa, Strategy::LesaRaw, |a, b| a.init_loss <= b.init_loss);
    let ppls: Vec<String> = raw.iter().map(|x| format!("{:.4}", x.init_ppl)).collect();
    outcome(
        finite,
        format!(
            "lesa_raw init PPL [{}], all finite through training: {finite}; logged: lesa initial loss <= lesa_raw on {hits}/{total} seeds",
            ppls.join(", ")
        ),
    )
}

/// Projections of the data onto the top two covariance eigenvectors.
fn pca_oracle(data: &[Vec<f64>]) -> Vec<[f64; 2]> {
    let (n, d) = (data.len(), data[0].len());
    let mean: Vec<f64> = (0..d).map(|j| data.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    let x = nalgebra::DMatrix::from_fn(n, d, |i, j| data[i][j] - mean[j]);
    let cov = x.transpose() * &x / (n as f64 - 1.0);
    let eig = nalgebra::SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    (0..n)
        .map(|i| {
            let p = |k: usize| (0..d).map(|j| x[(i, j)] * eig.eigenvectors[(j, order[k])]).sum::<f64>();
            [p(0), p(1)]
        })
        .collect()
}

fn c12_analysis(_: &mut Ctx) -> Result<Outcome> {
    let mut rng = Rng::new(12);

    let mut pca_err = 0.0f64;
    for _ in 0..5 {
        let data: Vec<Vec<f64>> = (0..10).map(|_| (0..6).map(|_| rng.normal()).collect()).collect();
        let got = pca2d(&data)?;
        let want = pca_oracle(&data);
        for k in 0..2 {
            let coord = |i: usize| if k == 0 { got.points[i].x } else { got.points[i].y };
            let dot: f64 = (0..10).map(|i| coord(i) * want[i][k]).sum();
            let sign = if dot < 0.0 { -1.0 } else { 1.0 };
            for (i, w) in want.iter().enumerate() {
                pca_err = pca_err.max((sign * coord(i) - w[k]).abs());
            }
        }
    }

    let mut calib_err = 0.0f64;
    let mut row_err = 0.0f64;
    for perplexity in [2.0, 5.0] {
        let data: Vec<Vec<f64>> = (0..20).map(|_| (0..8).map(|_| rng.normal()).collect()).collect();
        let (p, achieved) = calibrate_affinities(&data, perplexity)?;
        for (i, a) in achieved.iter().enumerate() {
            calib_err = calib_err.max((a - perplexity).abs());
            row_err = row_err.max((p[i * 20..(i + 1) * 20].iter().sum::<f64>() - 1.0).abs());
        }
    }

    let mut data = Vec::new();
    for c in 0..2 {
        for _ in 0..10 {
            data.push((0..10).map(|j| rng.normal() + if j == 0 { 8.0 * c as f64 } else { 0.0 }).collect::<Vec<f64>>());
        }
    }
    let proj = tsne2d(&data, &TsneParams::default())?;
    let centroid = |c: usize| {
        let pts = &proj.points[c * 10..(c + 1) * 10];
        (pts.iter().map(|p| p.x).sum::<f64>() / 10.0, pts.iter().map(|p| p.y).sum::<f64>() / 10.0)
    };
    let (c0, c1) = (centroid(0), centroid(1));
    let recovered = proj
        .points
        .iter()
        .enumerate()
        .filter(|(i, p)| {
            let d0 = (p.x - c0.0).powi(2) + (p.y - c0.1).powi(2);
            let d1 = (p.x - c1.0).powi(2) + (p.y - c1.1).powi(2);
            (d0 < d1) == (*i < 10)
        })
        .count();
    let kl = &proj.kl_history;
    let half = kl.len() / 2;
    let worst_rise = (half + 1..kl.len()).map(|i| kl[i] - kl[i - 1]).fold(f64::NEG_INFINITY, f64::max);

    outcome(
        pca_err <= 1e-5 && calib_err <= 1e-4 && row_err <= 1e-6 && recovered >= 18 && worst_rise <= 1e-3,
        format!(
            "PCA vs covariance oracle {pca_err:.2e}; perplexity calibration {calib_err:.2e}, row sums {row_err:.2e}; two-cluster recovery {recovered}/20; worst KL rise over last half {worst_rise:.2e}"
        ),
    )
}

fn c13_plumbing(ctx: &mut Ctx) -> Result<Outcome> {
    let dir = tempfile::tempdir()?;
    let (base, _) = ctx.base()?;
    let p = dir.path().join("base.lfck");
    save_checkpoint(base, &p)?;
    let loaded = load_checkpoint(&p)?;
    let p2 = dir.path().join("again.lfck");
    save_checkpoint(&loaded, &p2)?;
    let ckpt_ok = loaded.bit_eq(base) && std::fs::read(&p)? == std::fs::read(&p2)?;

    let mut rng = Rng::new(13);
    let bytes: Vec<u8> = (0..4096).map(|_| rng.below(256) as u8).collect();
    let tok_ok = detokenize(&tokenize(&bytes))? == bytes;

    // AdamW against the scalar closed form.
    let mut adam_err = 0.0f64;
    for _ in 0..20 {
        let hp = AdamWParams {
            lr: 10f64.powf(-1.0 - 3.0 * rng.uniform()),
            weight_decay: 0.1 * rng.uniform(),
            ..Default::default()
        };
        let theta = rng.normal();
        let g = rng.normal();
        let mut param = Tensor::new([1], vec![theta as f32])?;
        let mut state = AdamWState::new(&[1]);
        adamw_step(&mut param, &Tensor::new([1], vec![g as f32])?, &mut state, &hp)?;
        let (t32, g32) = (theta as f32 as f64, g as f32 as f64);
        let m_hat = (1.0 - hp.beta1) * g32 / (1.0 - hp.beta1);
        let v_hat = (1.0 - hp.beta2) * g32 * g32 / (1.0 - hp.beta2);
        let want = t32 * (1.0 - hp.lr * hp.weight_decay) - hp.lr * m_hat / (v_hat.sqrt() + hp.eps);
        adam_err = adam_err.max((param.data()[0] as f64 - want).abs());
    }

    let sched_ok = lr_at(0, 100, 0.1, 3e-4) == 0.0
        && lr_at(10, 100, 0.1, 3e-4) == 3e-4
        && lr_at(100, 100, 0.1, 3e-4) == 0.0
        && lr_at(0, 50, 0.0, 1e-3) == 1e-3
        && lr_at(50, 50, 0.0, 1e-3) == 0.0;

    // Same config and seed, twice: train, expand, continue training.
    let run = || -> Result<Vec<String>> {
        let corpus = corpus_from_bytes(synthetic_corpus(5, 60_000).as_bytes(), 10, 32)?;
        let cfg = ModelConfig {
            n_layers: 4,
            d_model: 16,
            n_heads: 2,
            d_ff: 24,
            max_seq_len: 32,
            ..Default::default()
        };
        let m = TransformerCheckpoint::init(cfg, &mut Rng::derive(1, "init"), 0.02)?;
        let t = TrainConfig {
            total_steps: 10,
            batch_size: 2,
            grad_accum_steps: 1,
            cutoff_len: 32,
            ..TrainConfig::scratch()
        };
        let (m, c1) = pretrain(&m, &corpus, &t, &[])?;
        let plan = ExpansionPlan::new(4, Strategy::Lesa, &ExpansionParams::default())?;
        let grown = expand(&m, &plan, &PredictorTrainConfig { epochs: 2, hidden: 16, ..Default::default() })?;
        let (m2, c2) = pretrain(&grown.model, &corpus, &t, &grown.frozen_layers())?;
        let mut hashes = Vec::new();
        for (i, ck) in [&m, &grown.model, &m2].into_iter().enumerate() {
            let path = dir.path().join(format!("r{i}.lfck"));
            save_checkpoint(ck, &path)?;
            hashes.push(hex_digest(&std::fs::read(&path)?));
        }
        hashes.push(hex_digest(c1.to_csv().as_bytes()));
        hashes.push(hex_digest(c2.to_csv().as_bytes()));
        Ok(hashes)
    };
    let repro_ok = run()? == run()?;

    outcome(
        ckpt_ok && tok_ok && adam_err <= 1e-5 && sched_ok && repro_ok,
        format!(
            "checkpoint round trip {ckpt_ok}; tokenizer round trip {tok_ok}; AdamW step err {adam_err:.2e}; schedule endpoints exact {sched_ok}; repeated run hashes identical {repro_ok}"
        ),
    )
}

type Criterion = fn(&mut Ctx) -> Result<Outcome>;

fn main() {
    let criteria: [(&str, &str, Criterion); 13] = [
        ("C13", "plumbing exactness", c13_plumbing),
        ("C12", "analysis oracles", c12_analysis),
        ("C3", "gradient correctness", c3_gradients),
        ("C1", "SVD contract", c1_svd_contract),
        ("C2", "slice/reconstruct identity", c2_slice_reconstruct),
        ("C6", "function preservation", c6_function_preservation),
        ("C9", "freezing exactness", c9_freezing),
        ("C4", "predictor learning", c4_predictor_learning),
        ("C5", "norm-loss ablation", c5_norm_ablation),
        ("C10", "insertion location", c10_insertion_location),
        ("C7", "initialization PPL ordering", c7_init_ppl_ordering),
        ("C8", "continual-training trend", c8_continual_trend),
        ("C11", "no-SVD ablation", c11_no_svd),
    ];
    let only: Option<Vec<String>> = std::env::var("LAYERFORGE_ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').map(|x| x.trim().to_uppercase()).collect());
    let strict = std::env::var("LAYERFORGE_ACCEPTANCE_STRICT").is_ok_and(|v| v != "0" && !v.is_empty());

    let mut ctx = Ctx::default();
    let mut results = Vec::new();
    let start = Instant::now();
    for (id, name, f) in criteria {
        if only.as_ref().is_some_and(|o| !o.iter().any(|x| x == id)) {
            continue;
        }
        let t = Instant::now();
        let out = match catch_unwind(AssertUnwindSafe(|| f(&mut ctx))) {
            Ok(Ok(o)) => o,
            Ok(Err(e)) => Outcome {
                pass: false,
                detail: format!("error: {e}"),
            },
            Err(_) => Outcome {
                pass: false,
                detail: "panicked".into(),
            },
        };
        println!(
            "{} {id} {name}: {} [{:.1}s]",
            if out.pass { "PASS" } else { "FAIL" },
            out.detail,
            t.elapsed().as_secs_f64()
        );
        results.push((id, out.pass));
    }
    let passed = results.iter().filter(|r| r.1).count();
    let failed: Vec<&str> = results.iter().filter(|r| !r.1).map(|r| r.0).collect();
    println!(
        "acceptance: {passed}/{} criteria passed in {:.0}s{}",
        results.len(),
        start.elapsed().as_secs_f64(),
        if failed.is_empty() { String::new() } else { format!("; failing: {}", failed.join(", ")) }
    );
    if strict && !failed.is_empty() {
        std::process::exit(1);
    }
}
