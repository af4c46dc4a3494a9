//! Target-absent visual world trials and model activation time courses.
//!
//! A trial pairs a target label with four displayed referents: a phonological
//! onset competitor (PREL), a semantic competitor (SREL), a visual competitor
//! (VREL) and an unrelated item (UREL). Relatedness is decided by where a
//! pair's normalized Hamming distance falls in the distribution of all
//! pairwise distances: "related" is the closest p% tail, "unrelated" the
//! farthest 25% tail.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::io::Write;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gru::{self, GruModel};
use crate::phonology::{embedded_items, rhyme, Lexicon};
use crate::representations::{activation, hamming_norm, RepSet, SemVisRep};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ThresholdConfig {
    /// Semantic "related" tail, percent of closest pairs.
    pub sem_related_pct: f64,
    /// Visual "related" tail, percent of closest pairs.
    pub vis_related_pct: f64,
    /// "Unrelated" tail, percent of farthest pairs (both spaces).
    pub unrelated_pct: f64,
    /// Forbid an item from appearing twice anywhere in the trial list,
    /// rather than only twice in the same role.
    pub strict_global: bool,
}

impl Default for ThresholdConfig {
    fn default() -> Self {
        Self {
            sem_related_pct: 10.0,
            vis_related_pct: 0.5,
            unrelated_pct: 25.0,
            strict_global: false,
        }
    }
}

impl ThresholdConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("semantic related", self.sem_related_pct),
            ("visual related", self.vis_related_pct),
            ("unrelated", self.unrelated_pct),
        ] {
            if !(p > 0.0 && p < 100.0) {
                return Err(Error::Parameter(format!("{name} percentile {p} outside (0, 100)")));
            }
        }
        let unrelated_from = 100.0 - self.unrelated_pct;
        if self.sem_related_pct >= unrelated_from || self.vis_related_pct >= unrelated_from {
            return Err(Error::Parameter("related and unrelated bands overlap".into()));
        }
        Ok(())
    }
}

/// Pairwise normalized Hamming distances over the semantic (100-bit) and
/// visual (150-bit) blocks, indexed in lexicon order.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceTables {
    pub item_ids: Vec<usize>,
    pub semantic: Array2<f64>,
    pub visual: Array2<f64>,
}

pub fn distance_tables(lexicon: &Lexicon, reps: &RepSet) -> Result<DistanceTables> {
    let ordered: Vec<&SemVisRep> = lexicon
        .items()
        .iter()
        .map(|it| {
            reps.get(it.id).ok_or_else(|| Error::MissingRepresentation {
                id: it.id,
                label: it.label.clone(),
            })
        })
        .collect::<Result<_>>()?;
    let n = ordered.len();
    let mut semantic = Array2::zeros((n, n));
    let mut visual = Array2::zeros((n, n));
    for i in 0..n {
        for j in i + 1..n {
            let s = hamming_norm(ordered[i].sem_part(), ordered[j].sem_part())?;
            let v = hamming_norm(ordered[i].vis_part(), ordered[j].vis_part())?;
            semantic[[i, j]] = s;
            semantic[[j, i]] = s;
            visual[[i, j]] = v;
            visual[[j, i]] = v;
        }
    }
    Ok(DistanceTables {
        item_ids: lexicon.items().iter().map(|it| it.id).collect(),
        semantic,
        visual,
    })
}

/// Linear-interpolation percentile of an ascending slice.
pub fn percentile(sorted: &[f64], pct: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of empty set");
    let pos = pct / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

fn upper_triangle_sorted(m: &Array2<f64>) -> Vec<f64> {
    let n = m.nrows();
    let mut v: Vec<f64> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).map(|(i, j)| m[[i, j]]).collect();
    v.sort_by(f64::total_cmp);
    v
}

/// Distance cut-offs derived from the pairwise distance distributions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cutoffs {
    pub sem_related: f64,
    pub sem_unrelated: f64,
    pub vis_related: f64,
    pub vis_unrelated: f64,
}

impl Cutoffs {
    pub fn from_tables(tables: &DistanceTables, thresholds: &ThresholdConfig) -> Result<Self> {
        thresholds.validate()?;
        if tables.item_ids.len() < 2 {
            return Err(Error::Parameter("need at least two items for distance percentiles".into()));
        }
        let sem = upper_triangle_sorted(&tables.semantic);
        let vis = upper_triangle_sorted(&tables.visual);
        let far = 100.0 - thresholds.unrelated_pct;
        Ok(Self {
            sem_related: percentile(&sem, thresholds.sem_related_pct),
            sem_unrelated: percentile(&sem, far),
            vis_related: percentile(&vis, thresholds.vis_related_pct),
            vis_unrelated: percentile(&vis, far),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PairRelation {
    pub sem_related: bool,
    pub sem_unrelated: bool,
    pub vis_related: bool,
    pub vis_unrelated: bool,
    pub onset_shared: bool,
    pub rhyme_shared: bool,
}

/// Classifies candidate/target pairs; indices are lexicon positions.
pub struct PairClassifier<'a> {
    lexicon: &'a Lexicon,
    tables: &'a DistanceTables,
    pub cutoffs: Cutoffs,
}

impl<'a> PairClassifier<'a> {
    pub fn new(lexicon: &'a Lexicon, tables: &'a DistanceTables, thresholds: &ThresholdConfig) -> Result<Self> {
        if tables.item_ids.len() != lexicon.len() {
            return Err(Error::dim("distance table items", lexicon.len(), tables.item_ids.len()));
        }
        Ok(Self {
            lexicon,
            tables,
            cutoffs: Cutoffs::from_tables(tables, thresholds)?,
        })
    }

    pub fn classify(&self, target: usize, candidate: usize) -> PairRelation {
        let t = &self.lexicon.items()[target];
        let c = &self.lexicon.items()[candidate];
        let sd = self.tables.semantic[[target, candidate]];
        let vd = self.tables.visual[[target, candidate]];
        let table = self.lexicon.table();
        let rhyme_shared = match (rhyme(&t.phones, table), rhyme(&c.phones, table)) {
            (Some(a), Some(b)) => a == b,
            _ => false,
        };
        PairRelation {
            sem_related: sd <= self.cutoffs.sem_related,
            sem_unrelated: sd >= self.cutoffs.sem_unrelated,
            vis_related: vd <= self.cutoffs.vis_related,
            vis_unrelated: vd >= self.cutoffs.vis_unrelated,
            onset_shared: t.onset() == c.onset(),
            rhyme_shared,
        }
    }

    pub fn distances(&self, target: usize, candidate: usize) -> (f64, f64) {
        (
            self.tables.semantic[[target, candidate]],
            self.tables.visual[[target, candidate]],
        )
    }
}

/// Relation facts for a single pair of item ids.
pub fn classify_pair(
    lexicon: &Lexicon,
    tables: &DistanceTables,
    thresholds: &ThresholdConfig,
    target_id: usize,
    candidate_id: usize,
) -> Result<PairRelation> {
    let classifier = PairClassifier::new(lexicon, tables, thresholds)?;
    Ok(classifier.classify(lexicon.index_of(target_id)?, lexicon.index_of(candidate_id)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Role {
    Prel,
    Srel,
    Vrel,
    Urel,
}

impl Role {
    pub const ALL: [Role; 4] = [Role::Prel, Role::Srel, Role::Vrel, Role::Urel];
    /// Roles reported relative to UREL.
    pub const COMPETITORS: [Role; 3] = [Role::Prel, Role::Srel, Role::Vrel];

    pub fn admits(self, rel: &PairRelation) -> bool {
        let phon_unrelated = !rel.onset_shared && !rel.rhyme_shared;
        match self {
            Role::Prel => rel.onset_shared && rel.sem_unrelated && rel.vis_unrelated,
            Role::Srel => rel.sem_related && rel.vis_unrelated && phon_unrelated,
            Role::Vrel => rel.vis_related && rel.sem_unrelated && phon_unrelated,
            Role::Urel => rel.sem_unrelated && rel.vis_unrelated && phon_unrelated,
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Prel => "PREL",
            Role::Srel => "SREL",
            Role::Vrel => "VREL",
            Role::Urel => "UREL",
        })
    }
}

/// Semantic and visual distance from the target to one competitor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoleJustification {
    pub sem_dist: f64,
    pub vis_dist: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub target_id: usize,
    pub prel_id: usize,
    pub srel_id: usize,
    pub vrel_id: usize,
    pub urel_id: usize,
    /// Distances in role order PREL, SREL, VREL, UREL.
    pub justification: [RoleJustification; 4],
    pub cutoffs: Cutoffs,
}

impl Trial {
    pub fn id_for(&self, role: Role) -> usize {
        match role {
            Role::Prel => self.prel_id,
            Role::Srel => self.srel_id,
            Role::Vrel => self.vrel_id,
            Role::Urel => self.urel_id,
        }
    }
}

/// Greedy deterministic trial assembly.
///
/// Targets are visited in ascending id order; each role takes the smallest-id
/// candidate that satisfies its definition, is not yet used in that role
/// (anywhere, under `strict_global`), is distinct from the rest of the trial,
/// and does not take part in an embedded-label pair. Ids are unique, so no
/// ordering ties arise and `seed` does not alter the result; it is kept so
/// the call records the run's seed alongside the trials.
pub fn build_trials(lexicon: &Lexicon, reps: &RepSet, thresholds: &ThresholdConfig, seed: u64) -> Result<Vec<Trial>> {
    let _ = seed;
    let tables = distance_tables(lexicon, reps)?;
    let classifier = PairClassifier::new(lexicon, &tables, thresholds)?;
    let excluded = embedded_items(lexicon);

    let mut by_id: Vec<usize> = (0..lexicon.len()).collect();
    by_id.sort_by_key(|&i| lexicon.items()[i].id);
    let eligible: Vec<usize> = by_id
        .into_iter()
        .filter(|&i| !excluded.contains(&lexicon.items()[i].id))
        .collect();

    let mut used_in_role: [HashSet<usize>; 4] = Default::default();
    let mut used_anywhere: HashSet<usize> = HashSet::new();
    let mut trials = Vec::new();
    for &target in &eligible {
        if thresholds.strict_global && used_anywhere.contains(&target) {
            continue;
        }
        let mut picked: Vec<usize> = vec![target];
        let mut roles = [0usize; 4];
        let complete = Role::ALL.iter().all(|&role| {
            let found = eligible.iter().copied().find(|&c| {
                !picked.contains(&c)
                    && !used_in_role[role.index()].contains(&c)
                    && !(thresholds.strict_global && used_anywhere.contains(&c))
                    && role.admits(&classifier.classify(target, c))
            });
            if let Some(c) = found {
                picked.push(c);
                roles[role.index()] = c;
            }
            found.is_some()
        });
        if !complete {
            continue;
        }
        for role in Role::ALL {
            used_in_role[role.index()].insert(roles[role.index()]);
        }
        used_anywhere.extend(picked.iter().copied());
        let id = |i: usize| lexicon.items()[i].id;
        let justification = Role::ALL.map(|role| {
            let (sem_dist, vis_dist) = classifier.distances(target, roles[role.index()]);
            RoleJustification { sem_dist, vis_dist }
        });
        trials.push(Trial {
            target_id: id(target),
            prel_id: id(roles[0]),
            srel_id: id(roles[1]),
            vrel_id: id(roles[2]),
            urel_id: id(roles[3]),
            justification,
            cutoffs: classifier.cutoffs,
        });
    }
    Ok(trials)
}

/// `trialId,targetId,prelId,srelId,vrelId,urelId` followed by semantic and
/// visual distances for each role.
pub fn write_trials_csv<W: Write>(trials: &[Trial], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = ["trialId", "targetId", "prelId", "srelId", "vrelId", "urelId"]
        .map(String::from)
        .to_vec();
    for role in ["prel", "srel", "vrel", "urel"] {
        header.push(format!("{role}SemDist"));
        header.push(format!("{role}VisDist"));
    }
    w.write_record(&header)?;
    for (k, t) in trials.iter().enumerate() {
        let mut rec = vec![
            k.to_string(),
            t.target_id.to_string(),
            t.prel_id.to_string(),
            t.srel_id.to_string(),
            t.vrel_id.to_string(),
            t.urel_id.to_string(),
        ];
        for j in &t.justification {
            rec.push(j.sem_dist.to_string());
            rec.push(j.vis_dist.to_string());
        }
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io("<trials>", e))
}

/// Per-timestep activations of the four displayed referents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationTrace {
    pub target_id: usize,
    /// Indexed by role order PREL, SREL, VREL, UREL, then timestep.
    pub activations: [Vec<f64>; 4],
    /// Referent with the strictly highest activation; `None` on a tie.
    pub attention: Vec<Option<Role>>,
}

impl ActivationTrace {
    pub fn len(&self) -> usize {
        self.activations[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn activation(&self, role: Role) -> &[f64] {
        &self.activations[role.index()]
    }

    /// Activation minus the UREL activation at each timestep.
    pub fn relative(&self, role: Role) -> Vec<f64> {
        self.activations[role.index()]
            .iter()
            .zip(&self.activations[Role::Urel.index()])
            .map(|(a, u)| a - u)
            .collect()
    }
}

/// Index of the unique maximum, if any.
pub fn attention_target(acts: [f64; 4]) -> Option<Role> {
    let max = acts.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut winners = Role::ALL.into_iter().filter(|r| acts[r.index()] == max);
    match (winners.next(), winners.next()) {
        (Some(r), None) => Some(r),
        _ => None,
    }
}

/// Runs the target's unpadded sequence and scores every referent per timestep.
pub fn simulate_trial(model: &GruModel, trial: &Trial, lexicon: &Lexicon, reps: &RepSet) -> Result<ActivationTrace> {
    let target = lexicon.item(trial.target_id)?;
    let rep_of = |id: usize| -> Result<&SemVisRep> {
        lexicon.item(id)?;
        reps.get(id).ok_or_else(|| Error::MissingRepresentation {
            id,
            label: lexicon.item(id).map(|i| i.label.clone()).unwrap_or_default(),
        })
    };
    let role_reps = [
        rep_of(trial.prel_id)?,
        rep_of(trial.srel_id)?,
        rep_of(trial.vrel_id)?,
        rep_of(trial.urel_id)?,
    ];
    let seq = lexicon.sequence(target)?;
    let trace = gru::forward(model, &seq.frames)?;
    let mut activations: [Vec<f64>; 4] = Default::default();
    let mut attention = Vec::with_capacity(seq.len());
    for t in 0..trace.steps() {
        let out = trace.output(t, 0).to_vec();
        let mut acts = [0.0; 4];
        for (k, rep) in role_reps.iter().enumerate() {
            acts[k] = activation(&out, rep)?;
            activations[k].push(acts[k]);
        }
        attention.push(attention_target(acts));
    }
    Ok(ActivationTrace {
        target_id: trial.target_id,
        activations,
        attention,
    })
}

/// Long-format rows: `modelSeed,trialId,timestep,role,activation,relativeActivation`.
pub fn write_trace_rows<W: Write>(w: &mut csv::Writer<W>, model_seed: u64, trial_id: usize, trace: &ActivationTrace) -> Result<()> {
    let urel = trace.activation(Role::Urel);
    for t in 0..trace.len() {
        for role in Role::ALL {
            let a = trace.activation(role)[t];
            w.write_record([
                model_seed.to_string(),
                trial_id.to_string(),
                t.to_string(),
                role.to_string(),
                a.to_string(),
                (a - urel[t]).to_string(),
            ])?;
        }
    }
    Ok(())
}

pub const TRACE_HEADER: [&str; 6] = ["modelSeed", "trialId", "timestep", "role", "activation", "relativeActivation"];

/// Grand mean relative activation and its standard error, per timestep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateTrace {
    /// PREL, SREL, VREL relative to UREL.
    pub mean: [Vec<f64>; 3],
    pub sem: [Vec<f64>; 3],
    /// Number of traces covering each timestep.
    pub counts: Vec<usize>,
}

impl AggregateTrace {
    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }
}

/// Mean and standard error over traces aligned at target onset. Shorter
/// traces contribute only to the timesteps they cover.
pub fn aggregate_traces(traces: &[ActivationTrace]) -> Result<AggregateTrace> {
    if traces.is_empty() {
        return Err(Error::Parameter("no traces to aggregate".into()));
    }
    let len = traces.iter().map(ActivationTrace::len).max().unwrap_or(0);
    let relatives: Vec<[Vec<f64>; 3]> = traces
        .iter()
        .map(|tr| Role::COMPETITORS.map(|r| tr.relative(r)))
        .collect();
    let mut mean: [Vec<f64>; 3] = Default::default();
    let mut sem: [Vec<f64>; 3] = Default::default();
    let mut counts = Vec::with_capacity(len);
    for t in 0..len {
        counts.push(traces.iter().filter(|tr| tr.len() > t).count());
        for k in 0..3 {
            // sorted so that the result does not depend on input order
            let mut vals: Vec<f64> = relatives.iter().filter_map(|r| r[k].get(t).copied()).collect();
            vals.sort_by(f64::total_cmp);
            let n = vals.len() as f64;
            let m = vals.iter().sum::<f64>() / n;
            let se = if vals.len() > 1 {
                let var = vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0);
                (var / n).sqrt()
            } else {
                0.0
            };
            mean[k].push(m);
            sem[k].push(se);
        }
    }
    Ok(AggregateTrace { mean, sem, counts })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceSummary {
    /// Leading timesteps covered by every trace; the thirds split this span.
    pub span: usize,
    /// Mean relative activation per third (early, middle, late) for PREL, SREL, VREL.
    pub thirds: [[f64; 3]; 3],
    /// Early third: PREL above both SREL and VREL.
    pub early_prel_preferred: bool,
    /// Late third: SREL above PREL.
    pub late_srel_over_prel: bool,
    /// Late third: VREL above PREL.
    pub late_vrel_over_prel: bool,
    /// Late third: SREL and VREL both above PREL.
    pub late_semvis_preferred: bool,
}

/// Splits the common timeline into thirds and compares roles in the first
/// and last. The common timeline is the leading run of timesteps to which
/// every trace contributes, so the tail formed by the longest words alone is
/// left out.
pub fn preference_summary(agg: &AggregateTrace) -> Result<PreferenceSummary> {
    let total = agg.counts.first().copied().unwrap_or(0);
    let len = agg.counts.iter().take_while(|&&c| c == total).count();
    if len < 3 {
        return Err(Error::Parameter(format!("common timeline of {len} steps is shorter than 3")));
    }
    let bounds = [0, len / 3, 2 * len / 3, len];
    let mut thirds = [[0.0; 3]; 3];
    for (third, row) in thirds.iter_mut().enumerate() {
        let (a, b) = (bounds[third], bounds[third + 1]);
        for (k, v) in row.iter_mut().enumerate() {
            *v = agg.mean[k][a..b].iter().sum::<f64>() / (b - a) as f64;
        }
    }
    let [early, _, late] = thirds;
    let late_srel_over_prel = late[1] > late[0];
    let late_vrel_over_prel = late[2] > late[0];
    Ok(PreferenceSummary {
        span: len,
        thirds,
        early_prel_preferred: early[0] > early[1] && early[0] > early[2],
        late_srel_over_prel,
        late_vrel_over_prel,
        late_semvis_preferred: late_srel_over_prel && late_vrel_over_prel,
    })
}

/// Ids that appear in more than one trial under the same role.
pub fn repeated_role_ids(trials: &[Trial]) -> BTreeSet<(Role, usize)> {
    let mut seen = HashSet::new();
    let mut repeated = BTreeSet::new();
    for t in trials {
        for role in Role::ALL {
            let id = t.id_for(role);
            if !seen.insert((role, id)) {
                repeated.insert((role, id));
            }
        }
    }
    repeated
}
