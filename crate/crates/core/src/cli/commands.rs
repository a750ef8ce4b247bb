use std::collections::BTreeMap;
use std::fs;
use std::io::BufRead;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{invalid, prepare_out, runtime, write_atomic, write_json, CliError, RunConfig};
use crate::dataset::{
    compute_norm_stats, fingerprint, grasp_only, read_episodes_from, split, write_episodes_to,
    Episode, Subtask, SCHEMA_NAME,
};
use crate::eval::{
    check_policy, compression_comparison, run_trials, Agent, EvalReport, OutcomeLabel, Rate,
    ReferenceNumbers,
};
use crate::expert::{generate_demonstrations, GenerationConfig, GenerationManifest};
use crate::nn::{Checkpoint, CHECKPOINT_FORMAT};
use crate::policy::{
    build_training_pairs, mean_loss, sidecar_path, train as train_policy, ChannelNorm, Policy,
    Variant,
};
use crate::rng::{stream, Purpose};
use crate::sim::{eval_catalog, sample_object_catalog, ObjectSpec};

pub const CATALOG_FILE: &str = "catalog.json";
pub const EPISODES_FILE: &str = "episodes.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

pub fn gen_data(cfg: &RunConfig) -> Result<(), CliError> {
    let mut rng = stream(cfg.seed, Purpose::Catalog, &[]);
    let catalog = sample_object_catalog(cfg.catalog_size, &mut rng)
        .map_err(|e| CliError::Validation(e.to_string()))?;
    let gen_cfg = GenerationConfig {
        seed: cfg.seed,
        ..cfg.generation.clone()
    };
    let demos = cfg
        .in_pool(|| generate_demonstrations(&catalog, &gen_cfg))?
        .map_err(|e| CliError::Validation(e.to_string()))?;

    prepare_out(&cfg.out)?;
    let mut bytes = Vec::new();
    write_episodes_to(&demos.episodes, &mut bytes)
        .map_err(|e| CliError::Runtime(format!("encoding episodes: {e}")))?;
    write_atomic(&cfg.out.join(EPISODES_FILE), &bytes)?;
    write_json(&cfg.out.join(CATALOG_FILE), &catalog)?;
    write_json(&cfg.out.join(MANIFEST_FILE), &demos.manifest)?;

    let m = &demos.manifest;
    println!(
        "{} episodes from {} objects ({} skipped) -> {}",
        m.episodes,
        m.catalog_size,
        m.skipped_objects,
        cfg.out.join(EPISODES_FILE).display()
    );
    if m.skipped_fraction() > cfg.max_skipped_fraction {
        return Err(CliError::SkippedObjects {
            skipped: m.skipped_objects,
            total: m.catalog_size,
            limit: 100.0 * cfg.max_skipped_fraction,
        });
    }
    Ok(())
}

fn load_dataset(path: &Path) -> Result<(Vec<Episode>, String), CliError> {
    let bytes = fs::read(path).map_err(|e| invalid(path.display())(e.to_string()))?;
    let episodes =
        read_episodes_from(bytes.as_slice()).map_err(|e| invalid(path.display())(e.to_string()))?;
    Ok((episodes, fingerprint(&bytes)))
}

#[derive(Debug, Serialize, Deserialize)]
struct TrainSummary {
    variant: Variant,
    seed: u64,
    dataset_fingerprint: String,
    train_episodes: usize,
    validation_episodes: usize,
    pairs: usize,
    param_count: usize,
    steps: usize,
    first_decile_loss: f64,
    last_decile_loss: f64,
    validation_loss: Option<f64>,
}

pub fn train(cfg: &RunConfig, dataset: &Path, variant: Variant) -> Result<(), CliError> {
    let (episodes, fp) = load_dataset(dataset)?;
    let (train_eps, val_eps) = split(&episodes, cfg.split_ratio, cfg.seed)
        .map_err(|e| invalid(dataset.display())(e.to_string()))?;
    let stats =
        compute_norm_stats(&train_eps).map_err(|e| invalid(dataset.display())(e.to_string()))?;
    let norm = ChannelNorm::from_stats(&stats, variant);
    let pairs = build_training_pairs(&grasp_only(&train_eps), &cfg.policy, variant, &norm);
    let val_pairs = build_training_pairs(&grasp_only(&val_eps), &cfg.policy, variant, &norm);
    log::info!(
        "training {variant} on {} pairs from {} episodes ({} held out)",
        pairs.len(),
        train_eps.len(),
        val_eps.len()
    );
    let (mut policy, report) = train_policy(&pairs, variant, &cfg.policy, &stats, cfg.seed)
        .map_err(|e| runtime("training")(e.to_string()))?;
    policy.dataset_fingerprint = Some(fp.clone());
    let validation_loss = if val_pairs.is_empty() {
        None
    } else {
        Some(
            mean_loss(&policy, &val_pairs, cfg.seed)
                .map_err(|e| runtime("validation")(e.to_string()))?,
        )
    };

    prepare_out(&cfg.out)?;
    let ckpt_path = cfg.out.join(format!("{variant}.ckpt"));
    let mut bytes = Vec::new();
    policy
        .checkpoint()
        .write_to(&mut bytes)
        .map_err(|e| runtime("encoding checkpoint")(e.to_string()))?;
    write_atomic(&ckpt_path, &bytes)?;
    write_json(&sidecar_path(&ckpt_path), &policy.sidecar())?;

    let mut csv = csv::Writer::from_writer(Vec::new());
    csv.write_record(["step", "loss"]).expect("in-memory csv");
    for (i, l) in report.losses.iter().enumerate() {
        csv.write_record([(i + 1).to_string(), l.to_string()])
            .expect("in-memory csv");
    }
    let csv = csv.into_inner().expect("in-memory csv");
    write_atomic(&cfg.out.join(format!("{variant}_loss.csv")), &csv)?;

    let summary = TrainSummary {
        variant,
        seed: cfg.seed,
        dataset_fingerprint: fp,
        train_episodes: train_eps.len(),
        validation_episodes: val_eps.len(),
        pairs: report.pairs,
        param_count: report.param_count,
        steps: report.steps,
        first_decile_loss: report.first_decile_mean(),
        last_decile_loss: report.last_decile_mean(),
        validation_loss,
    };
    write_json(&cfg.out.join(format!("{variant}_train.json")), &summary)?;
    println!(
        "{variant}: loss {:.4} -> {:.4} over {} steps, checkpoint {}",
        summary.first_decile_loss,
        summary.last_decile_loss,
        summary.steps,
        ckpt_path.display()
    );
    Ok(())
}

pub fn eval(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    expert: bool,
    variant: Option<Variant>,
    dataset: Option<&Path>,
) -> Result<(), CliError> {
    let policy;
    let agent = if expert {
        Agent::Expert(&cfg.generation.gains)
    } else {
        let path =
            checkpoint.ok_or_else(|| CliError::Validation("--checkpoint is required".into()))?;
        policy = Policy::load(path).map_err(|e| invalid(path.display())(e.to_string()))?;
        let fp = match dataset {
            Some(d) => Some(fingerprint(
                &fs::read(d).map_err(|e| invalid(d.display())(e.to_string()))?,
            )),
            None => None,
        };
        check_policy(&policy, variant, fp.as_deref())
            .map_err(|e| CliError::Validation(e.to_string()))?;
        Agent::Policy(&policy)
    };
    let report = cfg
        .in_pool(|| run_trials(agent, &eval_catalog(), &cfg.eval))?
        .map_err(|e| runtime("evaluation")(e.to_string()))?;
    prepare_out(&cfg.out)?;
    let path = cfg.out.join(format!("eval_{}.json", report.agent));
    write_json(&path, &report)?;
    print_summary(std::slice::from_ref(&report));
    println!("report -> {}", path.display());
    Ok(())
}

fn pct(x: f64) -> String {
    format!("{:5.1}%", 100.0 * x)
}

fn with_ref(measured: f64, reference: Option<f64>) -> String {
    match reference {
        Some(r) => format!("{} ({})", pct(measured), pct(r)),
        None => format!("{}        ", pct(measured)),
    }
}

fn print_summary(reports: &[EvalReport]) {
    println!(
        "{:<14} {:>16} {:>16} {:>16} {:>8} {:>16} {:>16} {:>12}",
        "agent", "overall", "seen", "unseen", "delicate", "null rate", "slip share", "grasp time"
    );
    for r in reports {
        let reference = r.reference.as_ref();
        let slip = r
            .failure_shares
            .get(&OutcomeLabel::SlipFailure)
            .copied()
            .unwrap_or(0.0);
        println!(
            "{:<14} {:>16} {:>16} {:>16} {:>8} {:>16} {:>16} {:>12}",
            r.agent,
            with_ref(r.rates.overall.rate, reference.map(|x| x.overall)),
            with_ref(r.rates.seen.rate, reference.map(|x| x.seen)),
            with_ref(r.rates.unseen.rate, reference.map(|x| x.unseen)),
            pct(r.rates.delicate.rate),
            with_ref(r.null_rate, reference.map(|x| x.null_rate)),
            with_ref(slip, reference.map(|x| x.slip_share)),
            format!("{:.2} s", r.grasp_seconds),
        );
    }
    if let Some(reference) = reports.iter().find_map(|r| r.reference.as_ref()) {
        println!(
            "reference values in parentheses; reference grasp time {:.2} s vs {:.2} s for the adaptive controller alone",
            reference.grasp_seconds, reference.adaptive_grasp_seconds
        );
    }
}

fn load_report(path: &Path) -> Result<EvalReport, CliError> {
    let text = fs::read_to_string(path).map_err(|e| invalid(path.display())(e.to_string()))?;
    serde_json::from_str(&text).map_err(|e| invalid(path.display())(e.to_string()))
}

fn slug(name: &str) -> String {
    name.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() {
                c.to_ascii_lowercase()
            } else {
                '_'
            }
        })
        .collect()
}

fn csv_bytes<R: Serialize>(rows: &[R]) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row).expect("in-memory csv");
    }
    w.into_inner().expect("in-memory csv")
}

#[derive(Serialize)]
struct RateRow<'a> {
    agent: &'a str,
    stratum: &'a str,
    successes: usize,
    failures: usize,
    nulls: usize,
    rate: f64,
    ci_low: f64,
    ci_high: f64,
    reference: Option<f64>,
}

#[derive(Serialize)]
struct ObjectRow<'a> {
    agent: &'a str,
    object: &'a str,
    seen: bool,
    delicate: bool,
    trials: usize,
    success: usize,
    deformation_failure: usize,
    slip_failure: usize,
    null_grasp: usize,
    success_rate: f64,
    mean_final_aperture: f64,
    mean_final_applied_force: f64,
    mean_final_true_contact: f64,
    mean_plastic_incurred: f64,
}

#[derive(Serialize)]
struct TraceRow<'a> {
    agent: &'a str,
    object: &'a str,
    trial: usize,
    tick: usize,
    time: f64,
    aperture: f64,
    applied_force: f64,
    contact_force: f64,
    commanded_aperture: f64,
}

#[derive(Serialize)]
struct MushinessRow<'a> {
    agent: &'a str,
    object: &'a str,
    trial: usize,
    rest_width: f64,
    label: OutcomeLabel,
}

pub fn report(cfg: &RunConfig, evals: &[PathBuf]) -> Result<(), CliError> {
    let reports: Vec<EvalReport> = evals
        .iter()
        .map(|p| load_report(p))
        .collect::<Result<_, _>>()?;
    prepare_out(&cfg.out)?;

    let mut rates = Vec::new();
    let mut objects = Vec::new();
    let mut traces = Vec::new();
    let mut mushiness = Vec::new();
    for r in &reports {
        let reference = r.reference.as_ref();
        let strata: [(&str, &Rate, Option<f64>); 5] = [
            ("overall", &r.rates.overall, reference.map(|x| x.overall)),
            ("seen", &r.rates.seen, reference.map(|x| x.seen)),
            ("unseen", &r.rates.unseen, reference.map(|x| x.unseen)),
            ("delicate", &r.rates.delicate, None),
            ("robust", &r.rates.robust, None),
        ];
        for (stratum, rate, reference) in strata {
            rates.push(RateRow {
                agent: &r.agent,
                stratum,
                successes: rate.successes,
                failures: rate.failures,
                nulls: rate.nulls,
                rate: rate.rate,
                ci_low: rate.ci_low,
                ci_high: rate.ci_high,
                reference,
            });
        }
        for o in &r.objects {
            objects.push(ObjectRow {
                agent: &r.agent,
                object: &o.name,
                seen: o.seen,
                delicate: o.delicate,
                trials: o.trials,
                success: o.counts[&OutcomeLabel::Success],
                deformation_failure: o.counts[&OutcomeLabel::DeformationFailure],
                slip_failure: o.counts[&OutcomeLabel::SlipFailure],
                null_grasp: o.counts[&OutcomeLabel::NullGrasp],
                success_rate: o.success_rate,
                mean_final_aperture: o.mean_final_aperture,
                mean_final_applied_force: o.mean_final_applied_force,
                mean_final_true_contact: o.mean_final_true_contact,
                mean_plastic_incurred: o.mean_plastic_incurred,
            });
        }
        for t in &r.trials {
            for (tick, s) in t.trace.iter().enumerate() {
                traces.push(TraceRow {
                    agent: &r.agent,
                    object: &t.object,
                    trial: t.trial,
                    tick: tick + 1,
                    time: s.time,
                    aperture: s.aperture,
                    applied_force: s.applied_force,
                    contact_force: s.contact_force,
                    commanded_aperture: s.commanded_aperture,
                });
            }
        }
        for m in &r.mushiness {
            for (i, (w, l)) in m.rest_widths.iter().zip(&m.labels).enumerate() {
                mushiness.push(MushinessRow {
                    agent: &r.agent,
                    object: &m.object,
                    trial: i + 1,
                    rest_width: *w,
                    label: *l,
                });
            }
        }
    }
    write_atomic(&cfg.out.join("rates.csv"), &csv_bytes(&rates))?;
    write_atomic(&cfg.out.join("objects.csv"), &csv_bytes(&objects))?;
    write_atomic(&cfg.out.join("traces.csv"), &csv_bytes(&traces))?;
    write_atomic(&cfg.out.join("mushiness.csv"), &csv_bytes(&mushiness))?;

    let forceful = reports
        .iter()
        .find(|r| r.variant == Some(Variant::Forceful));
    let position = reports
        .iter()
        .find(|r| r.variant == Some(Variant::PositionOnly));
    if let (Some(f), Some(p)) = (forceful, position) {
        let cmp = compression_comparison(f, p).map_err(|e| CliError::Validation(e.to_string()))?;
        write_json(&cfg.out.join("comparison.json"), &cmp)?;
        println!(
            "position-only closed at least as tightly on {:.0}% of delicate objects",
            100.0 * cmp.delicate_fraction_narrower
        );
        for m in &cmp.mushiness {
            println!(
                "  {:<28} rest-width loss after repeated trials: forceful {:.2} mm, position-only {:.2} mm",
                m.object, m.degradation_reference, m.degradation_other
            );
        }
    }

    let plots = cfg.out.join("plots");
    prepare_out(&plots)?;
    if let Some(first) = reports.first() {
        for (i, o) in first.objects.iter().enumerate() {
            let svg = super::trace_svg(&o.name, i, &reports);
            write_atomic(
                &plots.join(format!("{}.svg", slug(&o.name))),
                svg.as_bytes(),
            )?;
        }
    }
    print_summary(&reports);
    println!("tables and plots -> {}", cfg.out.display());
    Ok(())
}

#[derive(Deserialize)]
struct AnyHeader {
    format: Option<String>,
    schema: Option<String>,
}

pub fn inspect(path: &Path) -> Result<(), CliError> {
    let file = fs::File::open(path).map_err(|e| invalid(path.display())(e.to_string()))?;
    let mut first = Vec::new();
    std::io::BufReader::new(file)
        .read_until(b'\n', &mut first)
        .map_err(|e| invalid(path.display())(e.to_string()))?;
    let header: Option<AnyHeader> = serde_json::from_slice(&first).ok();
    match header {
        Some(AnyHeader {
            format: Some(f), ..
        }) if f == CHECKPOINT_FORMAT => inspect_checkpoint(path),
        Some(AnyHeader {
            schema: Some(s), ..
        }) if s == SCHEMA_NAME => inspect_dataset(path),
        _ => inspect_json(path),
    }
}

fn inspect_dataset(path: &Path) -> Result<(), CliError> {
    let (episodes, fp) = load_dataset(path)?;
    let steps: usize = episodes.iter().map(|e| e.steps.len()).sum();
    let grasp_steps = episodes
        .iter()
        .flat_map(|e| &e.steps)
        .filter(|s| s.subtask == Subtask::Grasp)
        .count();
    let mut histogram: BTreeMap<&str, usize> = BTreeMap::new();
    for e in &episodes {
        *histogram.entry(&e.object_name).or_default() += 1;
    }
    println!("dataset {} (fingerprint {fp})", path.display());
    println!(
        "  {} episodes, {} steps ({} grasp), {} objects",
        episodes.len(),
        steps,
        grasp_steps,
        histogram.len()
    );
    let catalog_path = path.with_file_name(CATALOG_FILE);
    let catalog: Option<Vec<ObjectSpec>> = fs::read_to_string(&catalog_path)
        .ok()
        .and_then(|t| serde_json::from_str(&t).ok());
    if let Some(catalog) = &catalog {
        let masses: Vec<f64> = catalog
            .iter()
            .filter(|s| histogram.contains_key(s.name.as_str()))
            .map(|s| s.mass)
            .collect();
        if !masses.is_empty() {
            let lo = masses.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = masses.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            println!("  mass range {:.1} g - {:.1} g", 1000.0 * lo, 1000.0 * hi);
        }
    }
    for (name, count) in &histogram {
        println!("  {count:>3}  {name}");
    }
    Ok(())
}

fn inspect_checkpoint(path: &Path) -> Result<(), CliError> {
    let ck = Checkpoint::load(path).map_err(|e| invalid(path.display())(e.to_string()))?;
    let params: usize = ck.tensors.iter().map(|(_, t)| t.len()).sum();
    println!(
        "checkpoint {} (seed {}, step {}, {} parameters)",
        path.display(),
        ck.seed,
        ck.step,
        params
    );
    for (name, t) in &ck.tensors {
        println!("  {name:<20} {:?}", t.shape());
    }
    match Policy::load(path) {
        Ok(p) => println!(
            "  variant {}, horizons obs {} / pred {} / exec {}, {} diffusion steps, dataset {}",
            p.variant,
            p.config.obs_horizon,
            p.config.pred_horizon,
            p.config.action_horizon_eval,
            p.config.diffusion_steps,
            p.dataset_fingerprint.as_deref().unwrap_or("unknown")
        ),
        Err(e) => println!(
            "  no usable sidecar at {}: {e}",
            sidecar_path(path).display()
        ),
    }
    Ok(())
}

fn inspect_json(path: &Path) -> Result<(), CliError> {
    let text = fs::read_to_string(path).map_err(|e| invalid(path.display())(e.to_string()))?;
    if let Ok(report) = serde_json::from_str::<EvalReport>(&text) {
        println!(
            "evaluation report for {} ({} trials, seed {})",
            report.agent,
            report.trials.len(),
            report.seed
        );
        for (label, count) in &report.outcome_counts {
            println!("  {label:<20} {count}");
        }
        print_summary(std::slice::from_ref(&report));
        return Ok(());
    }
    if let Ok(m) = serde_json::from_str::<GenerationManifest>(&text) {
        println!(
            "generation manifest: {} episodes from {} objects, {} skipped, median grasp length {:?}",
            m.episodes, m.catalog_size, m.skipped_objects, m.median_grasp_steps
        );
        for o in &m.objects {
            println!("  {:<32} kept {}/{}", o.name, o.kept, o.attempts);
        }
        return Ok(());
    }
    if let Ok(catalog) = serde_json::from_str::<Vec<ObjectSpec>>(&text) {
        println!("object catalog with {} objects", catalog.len());
        for s in &catalog {
            println!(
                "  {:<32} {:7.1} g  crush {:5.2} N  {}",
                s.name,
                1000.0 * s.mass,
                s.crush_force,
                if s.seen { "seen" } else { "unseen" }
            );
        }
        return Ok(());
    }
    if let Ok(reference) = serde_json::from_str::<ReferenceNumbers>(&text) {
        println!("reference numbers: {reference:?}");
        return Ok(());
    }
    Err(CliError::Validation(format!(
        "{}: not a dataset, checkpoint, manifest, catalog or evaluation report",
        path.display()
    )))
}
