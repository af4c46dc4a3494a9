//! Trial-builder oracle shared by the core tests and the acceptance suite.

use std::collections::BTreeSet;

use cohortsim_core::phonology::{Lexicon, PhoneFeatureTable, VocabItem};
use cohortsim_core::representations::{RepSet, SemVisRep, SEM_DIM, VIS_DIM};
use cohortsim_core::visual_world::{Role, ThresholdConfig, Trial};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const VOWELS: &[&str] = &["i:", "ɪ", "e", "æ", "ʌ", "ɑ", "ɑ:", "ɒ", "ɔ:", "ʊ", "u:", "ɜ:", "ə"];

/// Twelve items: five onset groups, four semantic categories, two visual
/// look-alike pairs, and one embedded pair (top/tops).
pub fn fixture() -> (Lexicon, RepSet) {
    let rows: [(&str, &str, usize); 12] = [
        ("bat", "b æ t", 0),
        ("big", "b ɪ g", 1),
        ("bun", "b ʌ n", 2),
        ("cot", "k ɒ t", 0),
        ("kiss", "k ɪ s", 1),
        ("cool", "k u: l", 3),
        ("sum", "s ʌ m", 0),
        ("sorf", "s ɔ: f", 2),
        ("milk", "m ɪ l k", 1),
        ("maze", "m e ɪ z", 3),
        ("top", "t ɒ p", 2),
        ("tops", "t ɒ p s", 3),
    ];
    let items: Vec<VocabItem> = rows
        .iter()
        .enumerate()
        .map(|(id, (label, phones, cat))| VocabItem::new(id, label, &format!("cat{cat}"), phones))
        .collect();
    let lex = Lexicon::new(items, PhoneFeatureTable::shipped()).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut draw = |len: usize| -> Vec<u8> { (0..len).map(|_| u8::from(rng.gen::<f64>() < 0.5)).collect() };
    let protos: Vec<Vec<u8>> = (0..4).map(|_| draw(SEM_DIM)).collect();
    let mut visuals: Vec<Vec<u8>> = (0..12).map(|_| draw(VIS_DIM)).collect();
    for (a, b) in [(0, 9), (3, 8)] {
        visuals[b] = visuals[a].clone();
        for k in 0..6 {
            visuals[b][k * 20] ^= 1;
        }
    }
    let reps = RepSet::new(rows.iter().enumerate().map(|(i, (_, _, cat))| {
        let mut sem = protos[*cat].clone();
        for k in 0..10 {
            let j = (i * 7 + k * 9) % SEM_DIM;
            sem[j] ^= 1;
        }
        sem.extend(&visuals[i]);
        SemVisRep::from_bits(i, sem).unwrap()
    }));
    (lex, reps)
}

pub fn fixture_thresholds(strict_global: bool) -> ThresholdConfig {
    ThresholdConfig {
        sem_related_pct: 15.0,
        vis_related_pct: 3.0,
        unrelated_pct: 75.0,
        strict_global,
    }
}

/// Everything the checker and oracle need, computed without the library.
pub struct Facts {
    pub ids: Vec<usize>,
    pub phones: Vec<Vec<String>>,
    pub sem: Vec<Vec<f64>>,
    pub vis: Vec<Vec<f64>>,
    pub sem_related: f64,
    pub sem_unrelated: f64,
    pub vis_related: f64,
    pub vis_unrelated: f64,
}

pub fn dist(a: &[u8], b: &[u8]) -> f64 {
    a.iter().zip(b).filter(|(x, y)| x != y).count() as f64 / a.len() as f64
}

pub fn pct(values: &[f64], p: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rank = p / 100.0 * (v.len() - 1) as f64;
    let (i, frac) = (rank.floor() as usize, rank.fract());
    if i + 1 < v.len() {
        v[i] * (1.0 - frac) + v[i + 1] * frac
    } else {
        v[i]
    }
}

impl Facts {
    pub fn new(lex: &Lexicon, reps: &RepSet, thr: &ThresholdConfig) -> Self {
        let ids: Vec<usize> = lex.items().iter().map(|it| it.id).collect();
        let bits: Vec<Vec<u8>> = ids.iter().map(|id| reps.get(*id).unwrap().bits().to_vec()).collect();
        let n = ids.len();
        let table = |lo: usize, hi: usize| -> Vec<Vec<f64>> {
            (0..n).map(|i| (0..n).map(|j| dist(&bits[i][lo..hi], &bits[j][lo..hi])).collect()).collect()
        };
        let sem = table(0, SEM_DIM);
        let vis = table(SEM_DIM, SEM_DIM + VIS_DIM);
        let pairs = |m: &Vec<Vec<f64>>| -> Vec<f64> { (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).map(|(i, j)| m[i][j]).collect() };
        let (sp, vp) = (pairs(&sem), pairs(&vis));
        Facts {
            phones: lex.items().iter().map(|it| it.phones.clone()).collect(),
            sem_related: pct(&sp, thr.sem_related_pct),
            sem_unrelated: pct(&sp, 100.0 - thr.unrelated_pct),
            vis_related: pct(&vp, thr.vis_related_pct),
            vis_unrelated: pct(&vp, 100.0 - thr.unrelated_pct),
            ids,
            sem,
            vis,
        }
    }

    pub fn index(&self, id: usize) -> usize {
        self.ids.iter().position(|&x| x == id).unwrap()
    }

    pub fn rhyme(&self, i: usize) -> Option<&[String]> {
        let p = &self.phones[i];
        let v = p.iter().rposition(|s| VOWELS.contains(&s.as_str()))?;
        Some(&p[v..])
    }

    pub fn embedded(&self, i: usize) -> bool {
        (0..self.ids.len()).any(|j| {
            j != i && {
                let (a, b) = (&self.phones[i], &self.phones[j]);
                let inside = |x: &[String], y: &[String]| y.len() >= x.len() && (0..=y.len() - x.len()).any(|s| &y[s..s + x.len()] == x);
                inside(a, b) || inside(b, a)
            }
        })
    }

    pub fn satisfies(&self, role: Role, t: usize, c: usize) -> bool {
        let onset = self.phones[t][0] == self.phones[c][0];
        let rhyme = matches!((self.rhyme(t), self.rhyme(c)), (Some(a), Some(b)) if a == b);
        let (s, v) = (self.sem[t][c], self.vis[t][c]);
        let s_rel = s <= self.sem_related;
        let s_unrel = s >= self.sem_unrelated;
        let v_rel = v <= self.vis_related;
        let v_unrel = v >= self.vis_unrelated;
        match role {
            Role::Prel => onset && s_unrel && v_unrel,
            Role::Srel => s_rel && v_unrel && !onset && !rhyme,
            Role::Vrel => v_rel && s_unrel && !onset && !rhyme,
            Role::Urel => s_unrel && v_unrel && !onset && !rhyme,
        }
    }
}

/// Post-hoc checker: every trial satisfies every role definition on its own.
pub fn check_trial(f: &Facts, trial: &Trial) -> Result<(), String> {
    let t = f.index(trial.target_id);
    if f.embedded(t) {
        return Err(format!("target {} takes part in an embedded pair", trial.target_id));
    }
    let members: BTreeSet<usize> = [trial.target_id, trial.prel_id, trial.srel_id, trial.vrel_id, trial.urel_id].into();
    if members.len() != 5 {
        return Err(format!("trial for {} repeats an item", trial.target_id));
    }
    for (k, role) in Role::ALL.into_iter().enumerate() {
        let c = f.index(trial.id_for(role));
        if f.embedded(c) {
            return Err(format!("{role} {} takes part in an embedded pair", trial.id_for(role)));
        }
        if !f.satisfies(role, t, c) {
            return Err(format!("{role} {} violates its definition for target {}", trial.id_for(role), trial.target_id));
        }
        let j = trial.justification[k];
        if (j.sem_dist - f.sem[t][c]).abs() > 1e-12 || (j.vis_dist - f.vis[t][c]).abs() > 1e-12 {
            return Err(format!("{role} justification does not match distances"));
        }
    }
    Ok(())
}

pub type Assignment = (usize, [usize; 4]);

/// Exhaustive search: for each target in id order, enumerate every 4-tuple of
/// distinct candidates and keep the lexicographically smallest valid one that
/// respects the reuse rule.
pub fn oracle(f: &Facts, strict_global: bool) -> Vec<Assignment> {
    let n = f.ids.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| f.ids[i]);
    let ok: Vec<usize> = order.into_iter().filter(|&i| !f.embedded(i)).collect();
    let mut used_role: [BTreeSet<usize>; 4] = Default::default();
    let mut used_any: BTreeSet<usize> = BTreeSet::new();
    let mut out = Vec::new();
    for &t in &ok {
        if strict_global && used_any.contains(&t) {
            continue;
        }
        let mut best: Option<[usize; 4]> = None;
        for &p in &ok {
            for &s in &ok {
                for &v in &ok {
                    for &u in &ok {
                        let tuple = [p, s, v, u];
                        let all: BTreeSet<usize> = [t, p, s, v, u].into();
                        if all.len() != 5 {
                            continue;
                        }
                        let valid = Role::ALL.into_iter().zip(tuple).all(|(role, c)| {
                            let k = role as usize;
                            f.satisfies(role, t, c) && !used_role[k].contains(&c) && !(strict_global && used_any.contains(&c))
                        });
                        let key = tuple.map(|i| f.ids[i]);
                        if valid && best.is_none_or(|b| key < b.map(|i| f.ids[i])) {
                            best = Some(tuple);
                        }
                    }
                }
            }
        }
        if let Some(tuple) = best {
            for (k, &c) in tuple.iter().enumerate() {
                used_role[k].insert(c);
            }
            used_any.insert(t);
            used_any.extend(tuple);
            out.push((f.ids[t], tuple.map(|i| f.ids[i])));
        }
    }
    out
}

pub fn as_assignments(trials: &[Trial]) -> Vec<Assignment> {
    trials
        .iter()
        .map(|t| (t.target_id, [t.prel_id, t.srel_id, t.vrel_id, t.urel_id]))
        .collect()
}
