use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use layerforge::analysis::{
    layer_signatures, pca2d, projection_csv, projection_svg, tsne2d, Projection2D, TsneParams,
};
use layerforge::expansion::{
    expand_baseline, expand_lesa, family_dataset, norm_report, norm_report_csv, train_family_predictors,
    ExpansionPlan, PredictorSet, Strategy,
};
use layerforge::predictor::{
    build_predictor, evaluate_predictor, loss_history_csv, train_predictor, Orientation, PredictorNet,
    TripletDataset,
};
use layerforge::trainpipe::{
    compare_strategies, default_freeze_mode, hex_digest, ingest, pretrain, CompareConfig, Corpus, FreezeMode,
};
use layerforge::{load_checkpoint, save_checkpoint, Error, MatrixFamily, Result, Rng, SvdSpace, TransformerCheckpoint};
use log::{info, warn};
use rayon::prelude::*;
use serde_json::json;

use crate::config::RunConfig;

/// Files whose content depends on wall-clock time; left out of manifests.
const VOLATILE: [&str; 2] = ["report.csv", "report.md"];

pub fn run(cfg: &RunConfig) -> Result<()> {
    match cfg.command.as_str() {
        "train-toy" => train_toy(cfg),
        "analyze" => analyze(cfg),
        "train-predictor" => train_predictors(cfg),
        "expand" => expand(cfg),
        "pretrain" => continual(cfg),
        "eval-ppl" => eval_ppl(cfg),
        "compare" => compare(cfg),
        other => Err(Error::arg(format!("unknown subcommand '{other}'"))),
    }
}

fn need<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    p.as_deref().ok_or_else(|| Error::arg(format!("--{flag} is required")))
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn write(path: &Path, text: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text)?;
    Ok(())
}

fn write_json(path: &Path, v: &serde_json::Value) -> Result<()> {
    write(path, serde_json::to_string_pretty(v)? + "\n")
}

fn manifest_lines(root: &Path, files: &[PathBuf]) -> Result<String> {
    let mut rows = Vec::new();
    for f in files {
        let name = f.strip_prefix(root).unwrap_or(f).to_string_lossy().replace('\\', "/");
        rows.push((name, hex_digest(&fs::read(f)?)));
    }
    rows.sort();
    Ok(rows.iter().map(|(n, h)| format!("{h}  {n}\n")).collect())
}

fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for e in fs::read_dir(dir)? {
        let p = e?.path();
        if p.is_dir() {
            walk(&p, out)?;
        } else {
            out.push(p);
        }
    }
    Ok(())
}

/// `outputs.sha256` over every file in `dir` except itself and the
/// wall-clock reports.
fn dir_manifest(dir: &Path) -> Result<()> {
    let mut files = Vec::new();
    walk(dir, &mut files)?;
    files.retain(|f| {
        let name = f.file_name().and_then(|n| n.to_str()).unwrap_or("");
        name != "outputs.sha256" && !(f.parent() == Some(dir) && VOLATILE.contains(&name))
    });
    let text = manifest_lines(dir, &files)?;
    write(&dir.join("outputs.sha256"), text)
}

/// `<ckpt>.sha256` over a checkpoint and its sidecars.
fn file_manifest(ckpt: &Path, sidecars: &[PathBuf]) -> Result<()> {
    let root = ckpt.parent().unwrap_or(Path::new(""));
    let mut files = vec![ckpt.to_path_buf()];
    files.extend(sidecars.iter().cloned());
    let text = manifest_lines(root, &files)?;
    write(&with_suffix(ckpt, ".sha256"), text)
}

fn eval_len_for(cfg: &RunConfig, max_seq_len: usize) -> usize {
    if cfg.eval_len > max_seq_len {
        warn!("eval_len {} exceeds the model context; using {max_seq_len}", cfg.eval_len);
        max_seq_len
    } else {
        cfg.eval_len
    }
}

fn load_corpus(cfg: &RunConfig, max_seq_len: usize) -> Result<Corpus> {
    let data = need(&cfg.paths.data, "data")?;
    let c = ingest(data, cfg.eval_count, eval_len_for(cfg, max_seq_len))?;
    info!(
        "corpus: {} files, {} bytes, {} eval sequences",
        c.files.len(),
        c.total_bytes,
        c.eval.len()
    );
    Ok(c)
}

fn families(cfg: &RunConfig) -> Result<Vec<MatrixFamily>> {
    if cfg.family == "all" {
        Ok(MatrixFamily::ALL.to_vec())
    } else {
        Ok(vec![cfg.family.parse()?])
    }
}

fn ppl(model: &TransformerCheckpoint, corpus: &Corpus) -> Result<f64> {
    layerforge::trainpipe::eval_ppl(model, corpus)
}

fn train_toy(cfg: &RunConfig) -> Result<()> {
    let out = need(&cfg.paths.out, "out")?;
    cfg.model.validate()?;
    let mut tcfg = cfg.train.clone();
    tcfg.seed = cfg.seed;
    tcfg.freeze_mode = FreezeMode::None;
    tcfg.validate()?;
    let corpus = load_corpus(cfg, cfg.model.max_seq_len)?;
    let mut rng = Rng::derive(cfg.seed, "init");
    let model = TransformerCheckpoint::init(cfg.model.clone(), &mut rng, cfg.init_std)?;
    let (trained, curve) = pretrain(&model, &corpus, &tcfg, &[])?;
    let p = ppl(&trained, &corpus)?;
    info!("trained {} steps, eval PPL {p:.4}", tcfg.total_steps);
    println!("ppl {p:.6}");

    save_checkpoint(&trained, out)?;
    let loss = with_suffix(out, ".loss.csv");
    write(&loss, curve.to_csv())?;
    let summary = with_suffix(out, ".summary.json");
    write_json(
        &summary,
        &json!({"eval_ppl": p, "final_smoothed_loss": curve.final_smoothed(), "config_hash": curve.config_hash}),
    )?;
    let rc = with_suffix(out, ".run_config.json");
    write(&rc, serde_json::to_string_pretty(cfg)? + "\n")?;
    file_manifest(out, &[loss, summary, rc])
}

struct FamilyAnalysis {
    family: MatrixFamily,
    space: SvdSpace,
    signatures: String,
    pca: Projection2D,
    tsne: Option<Projection2D>,
}

fn analyze_family(model: &TransformerCheckpoint, f: MatrixFamily, cfg: &RunConfig) -> Result<FamilyAnalysis> {
    let space = SvdSpace::of_checkpoint(model, f)?;
    let sigs = layer_signatures(&space);
    let vectors: Vec<Vec<f64>> = sigs.iter().map(|s| s.vector.clone()).collect();
    let mut signatures = String::from("layer");
    for j in 0..vectors.first().map_or(0, |v| v.len()) {
        signatures.push_str(&format!(",v{j}"));
    }
    signatures.push('\n');
    for s in &sigs {
        signatures.push_str(&s.layer_index.to_string());
        for x in &s.vector {
            signatures.push_str(&format!(",{x:?}"));
        }
        signatures.push('\n');
    }
    let pca = pca2d(&vectors)?;

    // Perplexity must stay below (n - 1) / 3.
    let n = vectors.len();
    let limit = (n as f64 - 1.0) / 3.0;
    let mut perplexity = cfg.tsne.perplexity;
    if perplexity >= limit {
        perplexity = 0.9 * limit;
        warn!("{f}: t-SNE perplexity {} infeasible for {n} layers, using {perplexity:.4}", cfg.tsne.perplexity);
    }
    let tsne = if perplexity >= 1.0 {
        let params = TsneParams {
            perplexity,
            iterations: cfg.tsne.iterations,
            seed: cfg.seed,
            learning_rate: cfg.tsne.learning_rate,
        };
        Some(tsne2d(&vectors, &params)?)
    } else {
        warn!("{f}: too few layers for t-SNE, skipped");
        None
    };
    Ok(FamilyAnalysis {
        family: f,
        space,
        signatures,
        pca,
        tsne,
    })
}

fn analyze(cfg: &RunConfig) -> Result<()> {
    let ckpt = need(&cfg.paths.ckpt, "ckpt")?;
    let out = need(&cfg.paths.out, "out")?;
    let model = load_checkpoint(ckpt)?;
    let fams = families(cfg)?;
    let results: Vec<FamilyAnalysis> = fams
        .par_iter()
        .map(|&f| analyze_family(&model, f, cfg))
        .collect::<Result<_>>()?;
    fs::create_dir_all(out)?;
    for a in &results {
        let dir = out.join(a.family.name());
        fs::create_dir_all(&dir)?;
        a.space.save(&dir.join("space.lfck"))?;
        let mut sigma = String::from("index,sigma\n");
        for (i, s) in a.space.sigma.iter().enumerate() {
            sigma.push_str(&format!("{i},{s:?}\n"));
        }
        write(&dir.join("sigma.csv"), sigma)?;
        write(&dir.join("signatures.csv"), &a.signatures)?;
        let title = format!("{} layer signatures", a.family);
        write(&dir.join("pca.csv"), projection_csv(&a.pca))?;
        write(&dir.join("pca.svg"), projection_svg(&a.pca, &format!("{title} (PCA)")))?;
        if let Some(t) = &a.tsne {
            write(&dir.join("tsne.csv"), projection_csv(t))?;
            write(&dir.join("tsne.svg"), projection_svg(t, &format!("{title} (t-SNE)")))?;
            let mut kl = String::from("iteration,kl\n");
            for (i, v) in t.kl_history.iter().enumerate() {
                kl.push_str(&format!("{i},{v:?}\n"));
            }
            write(&dir.join("tsne_kl.csv"), kl)?;
        }
        info!("{}: rank {}, sigma_1 {:.4}", a.family, a.space.rank(), a.space.sigma.first().copied().unwrap_or(0.0));
    }
    cfg.write(out, "run_config.json")?;
    dir_manifest(out)
}

fn random_init_loss(ds: &TripletDataset, cfg: &RunConfig) -> Result<f64> {
    let (r, n) = ds.check_uniform()?;
    let p = &cfg.predictor;
    let width = match p.orientation {
        Orientation::Columns => r,
        Orientation::Rows => n,
    };
    let mut net = build_predictor(width, p.hidden, p.seed, p.init_std)?;
    net.family = ds.family;
    net.orientation = p.orientation;
    net.lambda = p.lambda;
    net.norm_mode = p.norm_mode;
    Ok(evaluate_predictor(&net, ds)?.0)
}

fn train_predictors(cfg: &RunConfig) -> Result<()> {
    let ckpt = need(&cfg.paths.ckpt, "ckpt")?;
    let out = need(&cfg.paths.out, "out")?;
    let mut pcfg = cfg.predictor;
    pcfg.seed = cfg.seed;
    pcfg.validate()?;
    if !(0.0..1.0).contains(&cfg.holdout_frac) {
        return Err(Error::arg(format!("holdout_frac {} outside [0, 1)", cfg.holdout_frac)));
    }
    let mut paths = vec![ckpt.to_path_buf()];
    paths.extend(cfg.paths.extra_ckpts.iter().cloned());
    let models: Vec<TransformerCheckpoint> = paths.iter().map(|p| load_checkpoint(p)).collect::<Result<_>>()?;
    let cfg_run = RunConfig {
        predictor: pcfg,
        ..cfg.clone()
    };

    fs::create_dir_all(out)?;
    let mut metrics = String::from("family,n_train,n_heldout,init_loss,train_loss,heldout_loss,train_over_init,heldout_over_train\n");
    for f in families(cfg)? {
        let parts = models
            .iter()
            .zip(&paths)
            .map(|(m, p)| family_dataset(m, f, cfg.use_svd, &p.to_string_lossy()))
            .collect::<Result<Vec<_>>>()?;
        let pooled = TripletDataset::pooled(parts)?;
        let (train, held) = if cfg.holdout_frac > 0.0 {
            let (a, b) = pooled.split_holdout(cfg.holdout_frac, cfg.seed)?;
            (a, Some(b))
        } else {
            (pooled, None)
        };
        let init = random_init_loss(&train, &cfg_run)?;
        let (net, history) = train_predictor(&train, &pcfg)?;
        let tr = evaluate_predictor(&net, &train)?.0;
        let te = held.as_ref().map(|h| evaluate_predictor(&net, h)).transpose()?.map(|t| t.0);
        net.save(&out.join(format!("{}.pred", f.name())))?;
        write(&out.join(format!("{}.loss.csv", f.name())), loss_history_csv(&history))?;
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:e}")).unwrap_or_default();
        metrics.push_str(&format!(
            "{},{},{},{:e},{:e},{},{:?},{}\n",
            f,
            train.len(),
            held.as_ref().map_or(0, |h| h.len()),
            init,
            tr,
            fmt(te),
            tr / init,
            te.map(|t| format!("{:?}", t / tr)).unwrap_or_default(),
        ));
        info!("{f}: train loss {tr:.4e} ({:.3} of random init)", tr / init);
    }
    write(&out.join("metrics.csv"), metrics)?;
    write_json(
        &out.join("predictors.json"),
        &json!({"use_svd": cfg.use_svd, "checkpoints": paths, "config": pcfg}),
    )?;
    cfg.write(out, "run_config.json")?;
    dir_manifest(out)
}

fn load_predictors(dir: &Path, use_svd: bool) -> Result<PredictorSet> {
    let meta: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("predictors.json"))?)?;
    let trained_svd = meta.get("use_svd").and_then(|v| v.as_bool()).unwrap_or(true);
    if trained_svd != use_svd {
        return Err(Error::Config(format!(
            "predictors in {} were trained with use_svd={trained_svd}, strategy needs use_svd={use_svd}",
            dir.display()
        )));
    }
    let mut set = PredictorSet::new();
    for f in MatrixFamily::ALL {
        let p = dir.join(format!("{}.pred", f.name()));
        if p.exists() {
            set.insert(f, PredictorNet::load(&p)?);
        }
    }
    Ok(set)
}

fn expand(cfg: &RunConfig) -> Result<()> {
    let ckpt = need(&cfg.paths.ckpt, "ckpt")?;
    let out = need(&cfg.paths.out, "out")?;
    let strategy = cfg.strategy.ok_or_else(|| Error::arg("--strategy is required"))?;
    let model = load_checkpoint(ckpt)?;
    let plan = ExpansionPlan::new(model.n_layers(), strategy, &cfg.expansion)?;
    let expanded = if strategy.is_learned() {
        let use_svd = strategy == Strategy::Lesa;
        let preds = match &cfg.paths.predictors {
            Some(dir) => load_predictors(dir, use_svd)?,
            None => {
                let mut pcfg = cfg.predictor;
                pcfg.seed = cfg.seed;
                train_family_predictors(&model, &pcfg, use_svd)?
            }
        };
        expand_lesa(&model, &preds, &plan, use_svd)?
    } else {
        expand_baseline(&model, &plan)?
    };
    info!("{strategy}: {} -> {} layers", model.n_layers(), expanded.model.n_layers());
    save_checkpoint(&expanded.model, out)?;
    let mut side = vec![expanded.write_provenance(out)?];
    if expanded.model.n_layers() > model.n_layers() {
        let norms = with_suffix(out, ".norms.csv");
        write(&norms, norm_report_csv(&norm_report(&model, &expanded)?))?;
        side.push(norms);
    }
    let rc = with_suffix(out, ".run_config.json");
    write(&rc, serde_json::to_string_pretty(cfg)? + "\n")?;
    side.push(rc);
    file_manifest(out, &side)
}

/// Layers marked original in a provenance sidecar (0-based), with the
/// strategy that produced the checkpoint.
fn provenance_frozen(ckpt: &Path) -> Result<Option<(Strategy, Vec<usize>)>> {
    let p = with_suffix(ckpt, ".provenance.json");
    if !p.exists() {
        return Ok(None);
    }
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&p)?)?;
    let strategy: Strategy = serde_json::from_value(v["strategy"].clone())
        .map_err(|e| Error::Format(format!("{}: {e}", p.display())))?;
    let layers = v["layers"]
        .as_array()
        .ok_or_else(|| Error::Format(format!("{}: missing layers", p.display())))?;
    let frozen = layers
        .iter()
        .enumerate()
        .filter(|(_, l)| l["kind"] == "original")
        .map(|(i, _)| i)
        .collect();
    Ok(Some((strategy, frozen)))
}

fn continual(cfg: &RunConfig) -> Result<()> {
    let ckpt = need(&cfg.paths.ckpt, "ckpt")?;
    let out = need(&cfg.paths.out, "out")?;
    let model = load_checkpoint(ckpt)?;
    let prov = provenance_frozen(ckpt)?;
    if let Some((_, frozen)) = &prov {
        if frozen.iter().any(|&i| i >= model.n_layers()) {
            return Err(Error::validation("provenance sidecar does not match the checkpoint depth"));
        }
    }
    let mode = match (cfg.freeze, &prov) {
        (Some(m), _) => m,
        (None, Some((s, _))) => default_freeze_mode(*s),
        (None, None) => FreezeMode::None,
    };
    let frozen = match (mode, &prov) {
        (FreezeMode::None, _) => Vec::new(),
        (FreezeMode::NewLayersOnly, Some((_, f))) => f.clone(),
        (FreezeMode::NewLayersOnly, None) => {
            return Err(Error::Config(format!(
                "freezing new layers needs {}",
                with_suffix(ckpt, ".provenance.json").display()
            )))
        }
    };
    let mut tcfg = cfg.train.clone();
    tcfg.seed = cfg.seed;
    tcfg.freeze_mode = mode;
    tcfg.validate()?;
    let corpus = load_corpus(cfg, model.config.max_seq_len)?;
    let init_ppl = ppl(&model, &corpus)?;
    let (trained, curve) = pretrain(&model, &corpus, &tcfg, &frozen)?;
    let final_ppl = ppl(&trained, &corpus)?;
    info!("PPL {init_ppl:.4} -> {final_ppl:.4}");
    println!("ppl {final_ppl:.6}");

    fs::create_dir_all(out)?;
    let model_path = out.join("model.lfck");
    save_checkpoint(&trained, &model_path)?;
    let src = with_suffix(ckpt, ".provenance.json");
    if src.exists() {
        fs::copy(&src, with_suffix(&model_path, ".provenance.json"))?;
    }
    write(&out.join("loss_curve.csv"), curve.to_csv())?;
    write_json(
        &out.join("summary.json"),
        &json!({
            "freeze_mode": mode,
            "frozen_layers": frozen,
            "init_ppl": init_ppl,
            "final_ppl": final_ppl,
            "initial_raw_loss": curve.initial_raw(),
            "final_smoothed_loss": curve.final_smoothed(),
            "config_hash": curve.config_hash,
        }),
    )?;
    let mut rc = cfg.clone();
    rc.freeze = Some(mode);
    rc.write(out, "run_config.json")?;
    dir_manifest(out)
}

fn eval_ppl(cfg: &RunConfig) -> Result<()> {
    let ckpt = need(&cfg.paths.ckpt, "ckpt")?;
    let model = load_checkpoint(ckpt)?;
    let corpus = load_corpus(cfg, model.config.max_seq_len)?;
    let p = ppl(&model, &corpus)?;
    println!("{p:.6}");
    if let Some(out) = &cfg.paths.out {
        fs::create_dir_all(out)?;
        write_json(
            &out.join("ppl.json"),
            &json!({"ppl": p, "eval_sequences": corpus.eval.len(), "checkpoint": ckpt}),
        )?;
        cfg.write(out, "run_config.json")?;
        dir_manifest(out)?;
    }
    Ok(())
}

fn compare(cfg: &RunConfig) -> Result<()> {
    let base_path = need(&cfg.paths.base, "base")?;
    let out = need(&cfg.paths.out, "out")?;
    if cfg.strategies.is_empty() || cfg.seeds.is_empty() {
        return Err(Error::arg("compare needs at least one strategy and one seed"));
    }
    cfg.train.validate()?;
    cfg.predictor.validate()?;
    let base = load_checkpoint(base_path)?;
    let corpus = load_corpus(cfg, base.config.max_seq_len)?;
    let ccfg = CompareConfig {
        strategies: cfg.strategies.clone(),
        seeds: cfg.seeds.clone(),
        train: cfg.train.clone(),
        predictor: cfg.predictor,
        expansion: cfg.expansion.clone(),
    };
    let report = compare_strategies(&base, &corpus, &ccfg)?;

    fs::create_dir_all(out)?;
    write(&out.join("report.csv"), report.to_csv())?;
    write(&out.join("report.md"), report.to_markdown())?;
    let mut rows = Vec::new();
    for r in &report.rows {
        write(
            &out.join("curves").join(format!("{}_seed{}.csv", r.strategy, r.seed)),
            r.curve.to_csv(),
        )?;
        rows.push(json!({
            "strategy": r.strategy,
            "seed": r.seed,
            "init_ppl": r.init_ppl,
            "final_ppl": r.final_ppl,
            "init_loss": r.init_loss,
            "steps_to_threshold": r.steps_to_threshold,
            "total_steps": r.total_steps,
        }));
    }
    let mut by_strategy: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in &report.rows {
        by_strategy.entry(r.strategy.to_string()).or_default().push(r.init_ppl);
    }
    write_json(
        &out.join("summary.json"),
        &json!({"base_ppl": report.base_ppl, "rows": rows, "init_ppl_by_strategy": by_strategy}),
    )?;
    print!("{}", report.to_markdown());
    cfg.write(out, "run_config.json")?;
    dir_manifest(out)
}
