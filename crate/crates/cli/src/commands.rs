use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use cohortsim_core::gru::{Checkpoint, GruModel};
use cohortsim_core::phonology::{item_violations, read_manifest, SHIPPED_LEXICON, SHIPPED_PHONES};
use cohortsim_core::representations::{prepare, RawReps, RepSet, VIS_DIM};
use cohortsim_core::trainer::{train_with, vocab_growth, TrainerConfig, TrainingLog};
use cohortsim_core::visual_world::{
    aggregate_traces, build_trials, preference_summary, simulate_trial, write_trace_rows, write_trials_csv,
    ActivationTrace, PreferenceSummary, Role, TRACE_HEADER,
};
use cohortsim_core::Error as CoreError;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::Failure;

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(file))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush().with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn hash_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(sha256_hex(&bytes))
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

/// Checks every input the config names and lists each violation.
pub fn validate(cfg: &RunConfig) -> Result<()> {
    let mut violations: Vec<String> = Vec::new();
    let phones_name = cfg.phones.as_ref().map_or("phones.csv (bundled)".to_string(), |p| p.display().to_string());
    let table = match cfg.phone_table() {
        Ok(t) => {
            violations.extend(t.check_invariants().into_iter().map(|v| format!("{phones_name}: {v}")));
            Some(t)
        }
        Err(e) => {
            violations.push(format!("{e:#}"));
            None
        }
    };

    let lexicon_name = cfg.lexicon.as_ref().map_or("lexicon.csv (bundled)".to_string(), |p| p.display().to_string());
    let items = match &cfg.lexicon {
        Some(p) => File::open(p)
            .map_err(|e| anyhow::Error::new(e).context(format!("opening {}", p.display())))
            .and_then(|f| Ok(read_manifest(f, &lexicon_name)?)),
        None => Ok(read_manifest(SHIPPED_LEXICON.as_bytes(), &lexicon_name)?),
    };
    let mut ids = Vec::new();
    match (items, &table) {
        (Ok(items), Some(table)) => {
            for (row, msg) in item_violations(&items, table) {
                violations.push(format!("{lexicon_name}: row {row}: {msg}"));
            }
            ids = items.iter().map(|it| it.id).collect();
        }
        (Ok(items), None) => ids = items.iter().map(|it| it.id).collect(),
        (Err(e), _) => violations.push(format!("{e:#}")),
    }
    if let Some(selected) = &cfg.items {
        for id in selected.iter().filter(|id| !ids.contains(id)) {
            violations.push(format!("{lexicon_name}: selected item id {id} not in lexicon"));
        }
        ids.retain(|id| selected.contains(id));
    }

    if let Some(p) = &cfg.raw_representations {
        match RawReps::from_path(p) {
            Ok(raw) => {
                let missing: Vec<usize> = ids.iter().copied().filter(|id| !raw.semantic.item_ids.contains(id)).collect();
                if !missing.is_empty() {
                    violations.push(format!("{}: no vectors for item ids {missing:?}", p.display()));
                }
            }
            Err(e) => violations.push(e.to_string()),
        }
    }
    if let Some(p) = &cfg.representations {
        match RepSet::from_path(p) {
            Ok(reps) => {
                let missing: Vec<usize> = ids.iter().copied().filter(|id| reps.get(*id).is_none()).collect();
                if !missing.is_empty() {
                    violations.push(format!("{}: no targets for item ids {missing:?}", p.display()));
                }
            }
            Err(e) => violations.push(e.to_string()),
        }
    }

    if violations.is_empty() {
        println!("ok: {} items, phone table and representations valid", ids.len());
        Ok(())
    } else {
        for v in &violations {
            println!("violation: {v}");
        }
        Err(Failure::contract(format!("{} violation(s)", violations.len())).into())
    }
}

pub fn prepare_reps(cfg: &RunConfig) -> Result<()> {
    let lexicon = cfg.lexicon()?;
    let reps = if cfg.synthetic.enabled {
        let s = &cfg.synthetic;
        let reps = if s.structured {
            RepSet::synthetic_structured(&lexicon, s.sem_density, s.vis_density, s.seed)?
        } else {
            RepSet::synthetic(&lexicon, s.sem_density, s.vis_density, s.seed)?
        };
        println!("synthetic targets for {} items (seed {})", reps.len(), s.seed);
        reps
    } else if let Some(p) = &cfg.raw_representations {
        let raw = RawReps::from_path(p)?;
        let prepared = prepare(&raw, VIS_DIM)?;
        write_json(&cfg.out.join("pca.json"), &prepared.pca)?;
        println!(
            "visual PCA: {} components, cumulative variance explained {:.4}",
            prepared.pca.k(),
            prepared.pca.cumulative_variance()
        );
        prepared.reps
    } else if let Some(p) = &cfg.representations {
        RepSet::from_path(p)?
    } else {
        return Err(Failure::contract(
            "no representation source: enable synthetic, or set raw_representations or representations",
        )
        .into());
    };
    for item in lexicon.items() {
        if reps.get(item.id).is_none() {
            return Err(CoreError::MissingRepresentation {
                id: item.id,
                label: item.label.clone(),
            }
            .into());
        }
    }
    let path = cfg.reps_path();
    let mut w = create(&path)?;
    reps.write_csv(&lexicon, &mut w)?;
    w.flush()?;
    write_json(&cfg.out.join("config.json"), cfg)?;
    println!("wrote {}", path.display());
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub diverged: Option<String>,
    pub final_epoch: usize,
    pub final_vocab_size: usize,
    pub small_cohort_size: usize,
    pub large_cohort_size: usize,
    pub small_mean_acquisition: Option<f64>,
    pub large_mean_acquisition: Option<f64>,
    pub checkpoints: Vec<PathBuf>,
    /// Wall-clock training time; the only field that varies between identical runs.
    pub training_seconds: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config: RunConfig,
    pub input_hashes: BTreeMap<String, String>,
    pub seeds: Vec<SeedResult>,
    pub started_unix: u64,
    pub finished_unix: u64,
}

fn input_hashes(cfg: &RunConfig) -> Result<BTreeMap<String, String>> {
    let mut hashes = BTreeMap::new();
    hashes.insert(
        "lexicon".into(),
        match &cfg.lexicon {
            Some(p) => hash_file(p)?,
            None => sha256_hex(SHIPPED_LEXICON.as_bytes()),
        },
    );
    hashes.insert(
        "phones".into(),
        match &cfg.phones {
            Some(p) => hash_file(p)?,
            None => sha256_hex(SHIPPED_PHONES.as_bytes()),
        },
    );
    hashes.insert("reps".into(), hash_file(&cfg.reps_path())?);
    Ok(hashes)
}

fn worker_count(jobs: usize) -> usize {
    let cap = std::env::var("COHORTSIM_WORKERS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(jobs);
    cap.min(jobs).max(1)
}

/// Runs `job` over `inputs` on up to `COHORTSIM_WORKERS` threads; results
/// come back in input order.
fn parallel_map<T: Sync, R: Send>(inputs: &[T], job: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..inputs.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..worker_count(inputs.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= inputs.len() {
                    break;
                }
                let r = job(&inputs[i]);
                slots.lock().expect("no worker panicked")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("no worker panicked")
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect()
}

fn train_seed(cfg: &RunConfig, lexicon: &cohortsim_core::Lexicon, reps: &RepSet, seed: u64) -> Result<SeedResult> {
    let dir = cfg.seed_dir(seed);
    let ckpt_dir = dir.join("checkpoints");
    fs::create_dir_all(&ckpt_dir).with_context(|| format!("creating {}", ckpt_dir.display()))?;
    let trainer = TrainerConfig {
        seed,
        ..cfg.trainer.clone()
    };
    let started = Instant::now();
    let mut saved = Vec::new();
    let mut save_error = None;
    let n = lexicon.len();
    let outcome = train_with(&trainer, lexicon, reps, |ev| {
        let path = ckpt_dir.join(format!("epoch-{:07}.json", ev.epoch));
        let ckpt = Checkpoint {
            model: ev.model.clone(),
            epoch: ev.epoch,
        };
        if let Err(e) = ckpt.save(&path) {
            save_error = Some(e);
            return ControlFlow::Break(());
        }
        saved.push(path);
        let all = ev.learned.iter().filter(|&&l| l).count() == n;
        if cfg.stop_when_learned && all {
            ControlFlow::Break(())
        } else {
            ControlFlow::Continue(())
        }
    });
    if let Some(e) = save_error {
        return Err(e.into());
    }
    let (model, log) = match outcome {
        Ok(r) => r,
        Err(e @ CoreError::Divergence { .. }) => {
            eprintln!("seed {seed}: {e}");
            return Ok(SeedResult {
                seed,
                diverged: Some(e.to_string()),
                final_epoch: 0,
                final_vocab_size: 0,
                small_cohort_size: 0,
                large_cohort_size: 0,
                small_mean_acquisition: None,
                large_mean_acquisition: None,
                checkpoints: saved,
                training_seconds: started.elapsed().as_secs_f64(),
            });
        }
        Err(e) => return Err(e.into()),
    };
    let training_seconds = started.elapsed().as_secs_f64();
    let final_epoch = log.checkpoints.last().map_or(0, |c| c.epoch);
    Checkpoint {
        model,
        epoch: final_epoch,
    }
    .save(&cfg.final_model_path(seed))?;
    write_log(&dir, &log, lexicon)?;
    let growth = vocab_growth(&log, lexicon)?;
    let mut w = create(&dir.join("growth.csv"))?;
    growth.write_csv(&mut w)?;
    w.flush()?;
    println!(
        "seed {seed}: {}/{} learned at epoch {final_epoch}",
        log.final_vocab_size(),
        lexicon.len()
    );
    Ok(SeedResult {
        seed,
        diverged: None,
        final_epoch,
        final_vocab_size: log.final_vocab_size(),
        small_cohort_size: growth.small_size,
        large_cohort_size: growth.large_size,
        small_mean_acquisition: growth.small_mean_acquisition,
        large_mean_acquisition: growth.large_mean_acquisition,
        checkpoints: saved,
        training_seconds,
    })
}

fn write_log(dir: &Path, log: &TrainingLog, lexicon: &cohortsim_core::Lexicon) -> Result<()> {
    let mut w = create(&dir.join("flags.csv"))?;
    log.write_flags_csv(&mut w)?;
    w.flush()?;
    let mut w = create(&dir.join("summary.csv"))?;
    log.write_summary_csv(lexicon, &mut w)?;
    w.flush()?;
    let mut w = csv::Writer::from_writer(create(&dir.join("loss.csv"))?);
    w.write_record(["epoch", "loss"])?;
    for (e, l) in &log.loss_curve {
        w.write_record([e.to_string(), l.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn train(cfg: &RunConfig) -> Result<()> {
    let started = unix_now();
    let lexicon = cfg.lexicon()?;
    let reps = cfg.prepared_reps(&lexicon)?;
    let results = parallel_map(&cfg.seeds, |&seed| train_seed(cfg, &lexicon, &reps, seed));
    let results: Vec<SeedResult> = results.into_iter().collect::<Result<_>>()?;

    let mut w = csv::Writer::from_writer(create(&cfg.out.join("growth.csv"))?);
    w.write_record(["seed", "epoch", "smallCohort", "largeCohort"])?;
    for r in results.iter().filter(|r| r.diverged.is_none()) {
        let path = cfg.seed_dir(r.seed).join("growth.csv");
        let mut rdr = csv::Reader::from_path(&path).with_context(|| format!("reading {}", path.display()))?;
        for rec in rdr.records() {
            let rec = rec?;
            w.write_record([&r.seed.to_string(), &rec[0], &rec[1], &rec[2]])?;
        }
    }
    w.flush()?;

    let manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").into(),
        config: cfg.clone(),
        input_hashes: input_hashes(cfg)?,
        seeds: results.clone(),
        started_unix: started,
        finished_unix: unix_now(),
    };
    write_json(&cfg.out.join("manifest.json"), &manifest)?;

    let diverged: Vec<u64> = results.iter().filter(|r| r.diverged.is_some()).map(|r| r.seed).collect();
    if !diverged.is_empty() {
        return Err(Failure::numeric(format!("training diverged for seed(s) {diverged:?}")).into());
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimulationSummary {
    pub trials: usize,
    pub seeds: Vec<u64>,
    pub preference: PreferenceSummary,
}

pub fn simulate(cfg: &RunConfig) -> Result<()> {
    let lexicon = cfg.lexicon()?;
    let reps = cfg.prepared_reps(&lexicon)?;
    let mut models: Vec<(u64, GruModel)> = Vec::new();
    for &seed in &cfg.seeds {
        let path = cfg.final_model_path(seed);
        if path.exists() {
            models.push((seed, Checkpoint::load(&path)?.model));
        }
    }
    if models.is_empty() {
        return Err(Failure::contract(format!(
            "no trained models under {}; run `cohortsim train` first",
            cfg.out.display()
        ))
        .into());
    }
    let seed = cfg.synthetic.seed;
    let trials = build_trials(&lexicon, &reps, &cfg.thresholds, seed)?;
    if trials.is_empty() {
        return Err(Failure::contract("no valid trials under thresholds").into());
    }
    let mut w = create(&cfg.out.join("trials.csv"))?;
    write_trials_csv(&trials, &mut w)?;
    w.flush()?;

    let per_model: Vec<Result<Vec<ActivationTrace>>> = parallel_map(&models, |(_, model)| {
        trials
            .iter()
            .map(|t| Ok(simulate_trial(model, t, &lexicon, &reps)?))
            .collect()
    });
    let mut traces = Vec::new();
    let mut w = csv::Writer::from_writer(create(&cfg.out.join("traces.csv"))?);
    w.write_record(TRACE_HEADER)?;
    for ((seed, _), model_traces) in models.iter().zip(per_model) {
        for (k, tr) in model_traces?.into_iter().enumerate() {
            write_trace_rows(&mut w, *seed, k, &tr)?;
            traces.push(tr);
        }
    }
    w.flush()?;

    let agg = aggregate_traces(&traces)?;
    let mut w = csv::Writer::from_writer(create(&cfg.out.join("aggregate.csv"))?);
    w.write_record(["timestep", "role", "meanRelativeActivation", "sem", "count"])?;
    for t in 0..agg.len() {
        for (k, role) in Role::COMPETITORS.iter().enumerate() {
            w.write_record([
                t.to_string(),
                role.to_string(),
                agg.mean[k][t].to_string(),
                agg.sem[k][t].to_string(),
                agg.counts[t].to_string(),
            ])?;
        }
    }
    w.flush()?;

    let preference = preference_summary(&agg)?;
    println!(
        "{} trials x {} models; early PREL preferred: {}; late SREL > PREL: {}; late VREL > PREL: {}",
        trials.len(),
        models.len(),
        preference.early_prel_preferred,
        preference.late_srel_over_prel,
        preference.late_vrel_over_prel
    );
    write_json(
        &cfg.out.join("preference.json"),
        &SimulationSummary {
            trials: trials.len(),
            seeds: models.iter().map(|(s, _)| *s).collect(),
            preference,
        },
    )
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Report {
    pub seeds_trained: usize,
    pub seeds_diverged: usize,
    pub all_learned: usize,
    pub small_before_large: usize,
    pub mean_small_acquisition: Option<f64>,
    pub mean_large_acquisition: Option<f64>,
    pub simulation: Option<SimulationSummary>,
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = v.collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

pub fn report(cfg: &RunConfig) -> Result<()> {
    let manifest_path = cfg.out.join("manifest.json");
    if !manifest_path.exists() {
        return Err(Failure::contract(format!("no {}; run `cohortsim train` first", manifest_path.display())).into());
    }
    let manifest: RunManifest = read_json(&manifest_path)?;
    let items = cfg.lexicon()?.len();
    let ok: Vec<&SeedResult> = manifest.seeds.iter().filter(|s| s.diverged.is_none()).collect();
    let pref_path = cfg.out.join("preference.json");
    let simulation = if pref_path.exists() { Some(read_json(&pref_path)?) } else { None };
    let report = Report {
        seeds_trained: ok.len(),
        seeds_diverged: manifest.seeds.len() - ok.len(),
        all_learned: ok.iter().filter(|s| s.final_vocab_size == items).count(),
        small_before_large: ok
            .iter()
            .filter(|s| matches!((s.small_mean_acquisition, s.large_mean_acquisition), (Some(a), Some(b)) if a < b))
            .count(),
        mean_small_acquisition: mean(ok.iter().filter_map(|s| s.small_mean_acquisition)),
        mean_large_acquisition: mean(ok.iter().filter_map(|s| s.large_mean_acquisition)),
        simulation,
    };
    println!("seeds trained: {} (diverged: {})", report.seeds_trained, report.seeds_diverged);
    println!("seeds with all {items} items learned: {}", report.all_learned);
    println!(
        "mean epoch of acquisition: small cohorts {}, large cohorts {} (small first in {} seeds)",
        report.mean_small_acquisition.map_or("-".into(), |v| format!("{v:.0}")),
        report.mean_large_acquisition.map_or("-".into(), |v| format!("{v:.0}")),
        report.small_before_large
    );
    match &report.simulation {
        Some(s) => println!(
            "simulation: {} trials; early PREL preferred {}, late SREL > PREL {}, late VREL > PREL {}",
            s.trials, s.preference.early_prel_preferred, s.preference.late_srel_over_prel, s.preference.late_vrel_over_prel
        ),
        None => println!("simulation: not run"),
    }
    write_json(&cfg.out.join("report.json"), &report)
}
