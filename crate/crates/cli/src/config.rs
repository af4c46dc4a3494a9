use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use cohortsim_core::phonology::{read_manifest, Lexicon, PhoneFeatureTable, SHIPPED_LEXICON};
use cohortsim_core::representations::RepSet;
use cohortsim_core::trainer::TrainerConfig;
use cohortsim_core::visual_world::ThresholdConfig;
use serde::{Deserialize, Serialize};

use crate::Failure;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub enabled: bool,
    pub sem_density: f64,
    pub vis_density: f64,
    pub seed: u64,
    /// Category-structured targets (see `RepSet::synthetic_structured`);
    /// independent Bernoulli bits otherwise.
    pub structured: bool,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            sem_density: 0.1,
            vis_density: 0.15,
            seed: 0,
            structured: true,
        }
    }
}

/// Everything a run needs. Relative paths resolve against the working directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Lexicon manifest; the bundled 200-item lexicon when absent.
    pub lexicon: Option<PathBuf>,
    /// Phone feature table; the bundled table when absent.
    pub phones: Option<PathBuf>,
    /// Raw `id,label,s1..s100,v1..v512` vectors for `prepare`.
    pub raw_representations: Option<PathBuf>,
    /// Already prepared `id,label,b1..b250` targets for `prepare` to adopt.
    pub representations: Option<PathBuf>,
    pub out: PathBuf,
    /// Restrict the run to these item ids.
    pub items: Option<Vec<usize>>,
    pub seeds: Vec<u64>,
    pub trainer: TrainerConfig,
    pub thresholds: ThresholdConfig,
    pub synthetic: SyntheticConfig,
    /// End a seed's training at the first checkpoint where every item is learned.
    pub stop_when_learned: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            lexicon: None,
            phones: None,
            raw_representations: None,
            representations: None,
            out: PathBuf::from("run"),
            items: None,
            seeds: (0..20).collect(),
            trainer: TrainerConfig::default(),
            thresholds: ThresholdConfig::default(),
            synthetic: SyntheticConfig::default(),
            stop_when_learned: false,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text)
            .map_err(|e| Failure::contract(format!("{}: {e}", path.display())).into())
    }

    pub fn check(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Failure::contract("config lists no seeds").into());
        }
        self.trainer.validate()?;
        self.thresholds.validate()?;
        Ok(())
    }

    pub fn phone_table(&self) -> Result<PhoneFeatureTable> {
        Ok(match &self.phones {
            Some(p) => PhoneFeatureTable::from_path(p)?,
            None => PhoneFeatureTable::shipped(),
        })
    }

    pub fn lexicon(&self) -> Result<Lexicon> {
        let table = self.phone_table()?;
        let items = match &self.lexicon {
            Some(p) => {
                let file = std::fs::File::open(p).with_context(|| format!("opening lexicon {}", p.display()))?;
                read_manifest(file, &p.display().to_string())?
            }
            None => read_manifest(SHIPPED_LEXICON.as_bytes(), "lexicon.csv")?,
        };
        let lexicon = Lexicon::new(items, table)?;
        Ok(match &self.items {
            Some(ids) => lexicon.subset(ids)?,
            None => lexicon,
        })
    }

    pub fn reps_path(&self) -> PathBuf {
        self.out.join("reps.csv")
    }

    /// Prepared targets from a previous `prepare`.
    pub fn prepared_reps(&self, lexicon: &Lexicon) -> Result<RepSet> {
        let path = self.reps_path();
        if !path.exists() {
            return Err(Failure::contract(format!(
                "no prepared representations at {}; run `cohortsim prepare` first",
                path.display()
            ))
            .into());
        }
        let reps = RepSet::from_path(&path)?;
        for item in lexicon.items() {
            if reps.get(item.id).is_none() {
                return Err(Failure::contract(format!(
                    "{}: no representation for item {} ({})",
                    path.display(),
                    item.id,
                    item.label
                ))
                .into());
            }
        }
        Ok(reps)
    }

    pub fn seed_dir(&self, seed: u64) -> PathBuf {
        self.out.join(format!("seed-{seed}"))
    }

    pub fn final_model_path(&self, seed: u64) -> PathBuf {
        self.seed_dir(seed).join("model.json")
    }
}
