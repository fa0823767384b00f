use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use imagedpo_core::datagen::{
    build_image_pairs, build_text_pairs, build_text_pairs_on_corrupted, load_image_pairs,
    load_text_pairs, load_triplets, synth_world, write_image_pairs, write_text_pairs,
    write_triplets, LoadedTriplet, NegativeMode, Triplet,
};
use imagedpo_core::evalharness::{
    id_mismatches, load_benchmark, load_predictions, model_responder, score_benchmark,
    severity_sweep, synthetic_benchmark, validate_groups, write_benchmark, BenchmarkRecord,
    SynonymLexicon,
};
use imagedpo_core::imageops::{read_pgm, write_pgm, CorruptionKind, CorruptionSpec};
use imagedpo_core::objectives::SupervisedItem;
use imagedpo_core::policy::{init_params, load_params, save_params, PolicyDims, PolicyParams};
use imagedpo_core::records::{create_dir, read_json, read_jsonl, write_json_pretty};
use imagedpo_core::trainer::{accuracy, mle_pretrain, train_dpo, Objective, PrefData, TrainHistory};
use imagedpo_core::verification::{run_bound_verification, run_gradcheck};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use crate::config::RunConfig;
use crate::meta::{self, RunMeta};
use crate::{flag_err, CliError, CorruptArgs, EvalArgs, GenArgs, GradcheckArgs, PairMode, PairsArgs};
use crate::{PretrainArgs, SweepArgs, TrainArgs, VerifyBoundArgs};

type Res = Result<(), CliError>;

fn load_world(path: &Path) -> Result<Vec<LoadedTriplet>, CliError> {
    load_triplets(path).map_err(flag_err("--triplets"))
}

fn params_from(flag: &str, path: &Path) -> Result<PolicyParams, CliError> {
    Ok(load_params(path).map_err(flag_err(flag))?.0)
}

fn supervised(triplets: &[Triplet]) -> Vec<SupervisedItem> {
    triplets
        .iter()
        .map(|t| SupervisedItem {
            q: t.q.clone(),
            img: t.image.clone(),
            a: t.a,
        })
        .collect()
}

fn clean_accuracy(params: &PolicyParams, triplets: &[Triplet]) -> Result<f64, CliError> {
    Ok(accuracy(params, triplets.par_iter().map(|t| (&t.q, &t.image, t.a)))?)
}

pub fn gen(a: GenArgs, argv: &[String]) -> Res {
    let mut cfg = RunConfig::load(a.cfg.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.world.seed = s;
    }
    if let Some(n) = a.scenes {
        cfg.world.scenes = n;
    }
    if let Some(g) = a.bench_groups {
        cfg.world.bench_groups = g;
    }
    let w = &cfg.world;
    let world = synth_world(w.seed, w.scenes, &w.params).map_err(flag_err("--scenes"))?;
    let triplets = write_triplets(&world, &a.out)?;
    let mut m = RunMeta::new("gen", argv)
        .config(&cfg)
        .seeds(json!({"world": w.seed, "bench": w.bench_seed}))
        .output(&triplets);
    if w.bench_groups > 0 {
        let bench = synthetic_benchmark(w.bench_seed, w.bench_groups, &w.params)?;
        let path = write_benchmark(&bench, a.out.join("bench"))?;
        println!("wrote {} benchmark records to {}", bench.len(), path.display());
        m = m.output(&path);
    }
    m.write(&meta::in_dir(&a.out, "gen"))?;
    println!("wrote {} triplets to {}", world.len(), triplets.display());
    Ok(())
}

pub fn pairs(a: PairsArgs, argv: &[String]) -> Res {
    let mut cfg = RunConfig::load(a.cfg.config.as_deref())?;
    if let Some(spec) = &a.spec {
        cfg.corruption.specs = read_json::<Vec<CorruptionSpec>>(spec).map_err(flag_err("--spec"))?;
    }
    if let Some(n) = a.sources {
        cfg.corruption.sources = n;
    }
    if let Some(s) = a.seed {
        cfg.corruption.seed = s;
    }
    if let Some(m) = a.negative {
        cfg.corruption.negative_mode = m;
    }
    let c = &cfg.corruption;
    if c.sources == 0 {
        return Err(CliError::Usage("--sources: must be at least 1".into()));
    }
    let reference = match (&a.reference, c.negative_mode) {
        (Some(p), _) => Some(params_from("--reference", p)?),
        (None, NegativeMode::Hard) if a.mode != PairMode::Image => {
            return Err(CliError::Usage("--reference is required with --negative hard".into()))
        }
        (None, _) => None,
    };
    let loaded = load_world(&a.triplets)?;
    let n = c.sources.min(loaded.len());
    let sources: BTreeMap<String, PathBuf> = loaded[..n]
        .iter()
        .map(|l| (l.triplet.id.clone(), l.image_path.clone()))
        .collect();
    let triplets: Vec<Triplet> = loaded.into_iter().take(n).map(|l| l.triplet).collect();
    let (path, count) = match a.mode {
        PairMode::Image => {
            let p = build_image_pairs(&triplets, &c.specs, c.seed).map_err(flag_err("--spec"))?;
            (write_image_pairs(&p, &sources, &a.out)?, p.len())
        }
        PairMode::Text => {
            let p = build_text_pairs(&triplets, c.seed, c.negative_mode, reference.as_ref())?;
            (write_text_pairs(&p, &sources, &a.out)?, p.len())
        }
        PairMode::TextCorrupted => {
            let p = build_text_pairs_on_corrupted(
                &triplets,
                &c.specs,
                c.seed,
                c.negative_mode,
                reference.as_ref(),
            )
            .map_err(flag_err("--spec"))?;
            (write_text_pairs(&p, &sources, &a.out)?, p.len())
        }
    };
    RunMeta::new("pairs", argv)
        .config(&cfg)
        .seeds(json!({"pairs": c.seed}))
        .input(&a.triplets)
        .output(&path)
        .write(&meta::in_dir(&a.out, "pairs"))?;
    println!("wrote {count} pairs from {n} sources to {}", path.display());
    Ok(())
}

pub fn corrupt(a: CorruptArgs, argv: &[String]) -> Res {
    if a.kind == CorruptionKind::Semantic {
        return Err(CliError::Usage(
            "--kind: semantic edits have no severity level; use `pairs --spec` instead".into(),
        ));
    }
    let spec = CorruptionSpec::at_level(a.kind, a.level).map_err(flag_err("--level"))?;
    let img = read_pgm(&a.input).map_err(flag_err("--in"))?;
    let out = spec.apply(&img, 0).map_err(flag_err("--level"))?;
    write_pgm(&out.image, &a.out)?;
    RunMeta::new("corrupt", argv)
        .seeds(json!({}))
        .input(&a.input)
        .output(&a.out)
        .write(&meta::beside(&a.out))?;
    println!("{} {} -> {}", a.kind, a.level, a.out.display());
    Ok(())
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    history: &'a TrainHistory,
    #[serde(skip_serializing_if = "Option::is_none")]
    reference_eval_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    final_eval_accuracy: Option<f64>,
}

fn write_training_outputs(
    out: &Path,
    params: &PolicyParams,
    seed: u64,
    summary: &TrainSummary<'_>,
) -> Result<Vec<PathBuf>, CliError> {
    create_dir(out)?;
    let bin = out.join("params.bin");
    save_params(params, seed, &bin)?;
    let csv = out.join("history.csv");
    summary.history.write_csv(&csv)?;
    let js = out.join("history.json");
    write_json_pretty(&js, summary)?;
    Ok(vec![bin, csv, js])
}

pub fn pretrain(a: PretrainArgs, argv: &[String]) -> Res {
    if a.objective != Objective::MlePretrain {
        return Err(CliError::Usage(format!(
            "--objective: pretrain only runs mle_pretrain, got {:?}; use `train`",
            a.objective
        )));
    }
    let mut cfg = RunConfig::load(a.cfg.config.as_deref())?;
    if let Some(s) = a.init_seed {
        cfg.train.init_seed = s;
    }
    let world: Vec<Triplet> = load_world(&a.triplets)?.into_iter().map(|l| l.triplet).collect();
    let p0 = init_params(PolicyDims::default(), cfg.train.init_seed)?;
    let (theta, history) = mle_pretrain(&p0, &supervised(&world), &cfg.train.pretrain)?;
    let summary = TrainSummary {
        history: &history,
        reference_eval_accuracy: None,
        final_eval_accuracy: None,
    };
    let outputs = write_training_outputs(&a.out, &theta, cfg.train.init_seed, &summary)?;
    let mut m = RunMeta::new("pretrain", argv)
        .config(&cfg)
        .seeds(json!({"init": cfg.train.init_seed, "shuffle": cfg.train.pretrain.seed}))
        .input(&a.triplets);
    for o in &outputs {
        m = m.output(o);
    }
    m.write(&meta::in_dir(&a.out, "pretrain"))?;
    println!(
        "pretrained on {} triplets: final loss {:.6}, train accuracy {:.4}",
        world.len(),
        history.epoch_losses.last().copied().unwrap_or(f64::NAN),
        history.final_clean_accuracy
    );
    Ok(())
}

pub fn train(a: TrainArgs, argv: &[String]) -> Res {
    if a.objective == Objective::MlePretrain {
        return Err(CliError::Usage("--objective: use `pretrain` for mle_pretrain".into()));
    }
    let cfg = RunConfig::load(a.cfg.config.as_deref())?;
    let tc = *cfg.train.for_objective(a.objective);
    let (reference, sidecar) = load_params(&a.init).map_err(flag_err("--init"))?;
    let (theta, history) = match a.objective {
        Objective::ImageDpo => {
            let pairs = load_image_pairs(&a.pairs).map_err(flag_err("--pairs"))?;
            let items: Vec<_> = pairs.iter().map(|p| p.to_item()).collect();
            train_dpo(&reference, &reference, PrefData::Image(&items), &tc)?
        }
        _ => {
            let pairs = load_text_pairs(&a.pairs).map_err(flag_err("--pairs"))?;
            let items: Vec<_> = pairs.iter().map(|p| p.to_item()).collect();
            train_dpo(&reference, &reference, PrefData::Text(&items), &tc)?
        }
    };
    let (ref_acc, fin_acc) = match &a.eval_triplets {
        Some(p) => {
            let world: Vec<Triplet> = load_triplets(p)
                .map_err(flag_err("--eval-triplets"))?
                .into_iter()
                .map(|l| l.triplet)
                .collect();
            (
                Some(clean_accuracy(&reference, &world)?),
                Some(clean_accuracy(&theta, &world)?),
            )
        }
        None => (None, None),
    };
    let summary = TrainSummary {
        history: &history,
        reference_eval_accuracy: ref_acc,
        final_eval_accuracy: fin_acc,
    };
    let outputs = write_training_outputs(&a.out, &theta, sidecar.seed, &summary)?;
    let mut m = RunMeta::new("train", argv)
        .config(&cfg)
        .seeds(json!({"shuffle": tc.seed, "init": sidecar.seed}))
        .input(&a.pairs)
        .input(&a.init);
    for o in &outputs {
        m = m.output(o);
    }
    m.write(&meta::in_dir(&a.out, "train"))?;
    println!(
        "{:?}: {} steps, mean margin {:.4} -> {:.4}",
        a.objective,
        history.steps.len(),
        history.initial_mean_margin.unwrap_or(f64::NAN),
        history.final_mean_margin.unwrap_or(f64::NAN)
    );
    if let (Some(r), Some(f)) = (ref_acc, fin_acc) {
        println!("clean accuracy {r:.4} -> {f:.4}");
    }
    Ok(())
}

fn list_ids(ids: &[String]) -> String {
    const SHOW: usize = 20;
    let mut s = ids.iter().take(SHOW).cloned().collect::<Vec<_>>().join(", ");
    if ids.len() > SHOW {
        s += &format!(", … ({} total)", ids.len());
    }
    s
}

pub fn eval(a: EvalArgs, argv: &[String]) -> Res {
    let cfg = RunConfig::load(a.cfg.config.as_deref())?;
    let setting = a.setting.unwrap_or(cfg.eval.setting);
    let lexicon = SynonymLexicon::world_default();
    let (records, preds) = match (&a.preds, &a.params) {
        (Some(pp), _) => {
            let records: Vec<BenchmarkRecord> = read_jsonl(&a.bench).map_err(flag_err("--bench"))?;
            validate_groups(&records).map_err(flag_err("--bench"))?;
            let preds = load_predictions(pp).map_err(flag_err("--preds"))?;
            let (missing, unknown) = id_mismatches(&records, &preds);
            if !missing.is_empty() || !unknown.is_empty() {
                let mut msg = String::from("--preds: prediction ids do not match the benchmark");
                if !missing.is_empty() {
                    msg += &format!("; missing ids: {}", list_ids(&missing));
                }
                if !unknown.is_empty() {
                    msg += &format!("; unknown ids: {}", list_ids(&unknown));
                }
                return Err(CliError::Usage(msg));
            }
            (records, preds)
        }
        (None, Some(pp)) => {
            let items = load_benchmark(&a.bench).map_err(flag_err("--bench"))?;
            let params = params_from("--params", pp)?;
            let preds = model_responder(&params, &items, setting)?;
            (items.into_iter().map(|i| i.record).collect(), preds)
        }
        (None, None) => unreachable!("clap requires one of --preds/--params"),
    };
    let report = score_benchmark(&records, &preds, setting, &lexicon)?;
    write_json_pretty(&a.out, &report)?;
    let mut m = RunMeta::new("eval", argv).config(&cfg).input(&a.bench);
    for p in a.preds.iter().chain(&a.params) {
        m = m.input(p);
    }
    m.output(&a.out).write(&meta::beside(&a.out))?;
    println!(
        "setting {setting:?}: Score {:.2}, Prior {:.2}, instruction failures {:.2}% (lenient Score {:.2}, Prior {:.2})",
        report.score, report.prior, report.instruction_failure_rate, report.lenient_score, report.lenient_prior
    );
    Ok(())
}

pub fn sweep(a: SweepArgs, argv: &[String]) -> Res {
    let cfg = RunConfig::load(a.cfg.config.as_deref())?;
    let setting = a.setting.unwrap_or(cfg.eval.setting);
    let levels = match (&a.levels, a.kind) {
        (Some(l), _) => l.0.clone(),
        (None, CorruptionKind::Blur) => cfg.eval.blur_levels.clone(),
        (None, CorruptionKind::Pixelate) => cfg.eval.pixelate_levels.clone(),
        (None, k) => return Err(CliError::Usage(format!("--levels: required for kind {k}"))),
    };
    let items = load_benchmark(&a.bench).map_err(flag_err("--bench"))?;
    let params = params_from("--params", &a.params)?;
    let lexicon = SynonymLexicon::world_default();
    let table = severity_sweep(&params, &items, a.kind, &levels, setting, &lexicon)
        .map_err(flag_err("--levels"))?;
    table.write_csv(&a.out)?;
    let js = a.out.with_extension("json");
    write_json_pretty(&js, &table)?;
    RunMeta::new("sweep", argv)
        .config(&cfg)
        .input(&a.bench)
        .input(&a.params)
        .output(&a.out)
        .output(&js)
        .write(&meta::beside(&a.out))?;
    for r in &table.rows {
        println!("level {:>6}: Score {:6.2}  Prior {:6.2}", r.level, r.report.score, r.report.prior);
    }
    println!(
        "monotone: {} ({} rise{})",
        table.monotone,
        table.inversions,
        if table.inversions == 1 { "" } else { "s" }
    );
    Ok(())
}

pub fn verify_bound(a: VerifyBoundArgs, argv: &[String]) -> Res {
    let report = run_bound_verification(a.instances, &a.beta_list.0, a.seed).map_err(flag_err("--beta-list"))?;
    write_json_pretty(&a.out, &report)?;
    RunMeta::new("verify-bound", argv)
        .seeds(json!({"instances": a.seed}))
        .output(&a.out)
        .write(&meta::beside(&a.out))?;
    let s = &report.overall;
    println!(
        "{} instances, {} violations, gap in [{:.3e}, {:.3e}], grad ratio max |r - 0.5| = {:.3e}, tight cases {} (max gap {:.3e})",
        s.instances,
        s.violations,
        s.min_gap,
        s.max_gap,
        s.grad_ratio_stats.max_abs_dev,
        report.tightness.cases,
        report.tightness.max_abs_gap
    );
    if report.passes() {
        Ok(())
    } else {
        Err(CliError::Verification(format!(
            "{} bound violations, grad ratio deviation {:.3e}, tightness gap {:.3e}",
            s.violations, s.grad_ratio_stats.max_abs_dev, report.tightness.max_abs_gap
        )))
    }
}

pub fn gradcheck(a: GradcheckArgs, argv: &[String]) -> Res {
    let summary = run_gradcheck(a.objective, a.trials, a.seed, a.step).map_err(flag_err("--trials"))?;
    write_json_pretty(&a.out, &summary)?;
    RunMeta::new("gradcheck", argv)
        .seeds(json!({"draws": a.seed}))
        .output(&a.out)
        .write(&meta::beside(&a.out))?;
    println!(
        "{:?}: {} trials, {} failures, max relative error {:.3e}",
        summary.objective, summary.trials, summary.failures, summary.max_rel_error
    );
    if summary.passes() {
        Ok(())
    } else {
        Err(CliError::Verification(format!(
            "{} of {} draws exceed relative error {:e}",
            summary.failures, summary.trials, summary.tolerance
        )))
    }
}
