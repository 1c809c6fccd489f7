//! Optimality, core-set oracle, fidelity, score–loss correlation and
//! k-sensitivity harnesses.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::stats::{ci95, mean, pearson, sign_test};
use super::{rng_for, sample_targets, share, Target, Workbench};
use crate::attribution::{importance_table, select_core_neurons, CoreSet, ImportanceTable};
use crate::concepts::{concept_loss, Concept, Probe};
use crate::engine::{forward_with_taps, Block, KnockoutMask};
use crate::error::{Error, Result};
use crate::patching::argmax;
use crate::tensor::Tensor;

/// Target taps whose source layer is itself a tap (the input is excluded).
fn hidden_source_taps(wb: &Workbench, min_source_width: usize) -> Vec<usize> {
    (1..wb.taps.len()).filter(|&t| wb.source_width(t) > min_source_width).collect()
}

fn knockout_loss(probe: &Probe, t: &Target, original: &Concept, set: &BTreeSet<usize>, k: usize) -> Result<f64> {
    let knocked = probe.knockout_concept(t.tap, t.neuron, set, k)?;
    Ok(concept_loss(original, &knocked))
}

// ---------------------------------------------------------------- optimality

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimalityConfig {
    pub taus: Vec<usize>,
    pub targets: usize,
    pub draws: usize,
    pub seed: u64,
}

impl Default for OptimalityConfig {
    fn default() -> Self {
        Self {
            taus: vec![3, 8],
            targets: 20,
            draws: 100,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimalityRecord {
    pub target: Target,
    pub tap: String,
    pub tau: usize,
    pub core: Vec<usize>,
    pub core_loss: f64,
    pub random_losses: Vec<f64>,
    /// Mean of `L_random − L_core` over the draws.
    pub mean_diff: f64,
    /// Draws with `L_random < L_core`.
    pub random_wins: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimalitySummary {
    pub tau: usize,
    pub targets: usize,
    pub draws: usize,
    pub mean_diff: f64,
    pub ci95: (f64, f64),
    /// Targets whose mean difference is positive / negative.
    pub positive: usize,
    pub negative: usize,
    pub sign_test_p: f64,
    pub random_win_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimalityReport {
    pub config: OptimalityConfig,
    pub records: Vec<OptimalityRecord>,
    pub summaries: Vec<OptimalitySummary>,
}

/// Compares each target's core set with random subsets of equal size.
pub fn optimality_experiment(wb: &Workbench, cfg: &OptimalityConfig) -> Result<OptimalityReport> {
    if cfg.draws == 0 || cfg.taus.is_empty() || cfg.taus.contains(&0) {
        return Err(Error::Config("optimality needs draws ≥ 1 and every τ ≥ 1".into()));
    }
    let max_tau = *cfg.taus.iter().max().expect("nonempty");
    let taps = hidden_source_taps(wb, max_tau);
    let k = wb.config.k;
    let scorer = wb.scorer();
    let mut records = Vec::new();
    for slot in 0..wb.datasets.len() {
        let probe = wb.probe(slot)?;
        let class = wb.datasets[slot].manifest.class;
        let mut rng = rng_for(cfg.seed, 1, slot);
        let n = share(cfg.targets, wb.datasets.len(), slot);
        for t in sample_targets(&probe, class, &taps, n, &mut rng)? {
            let sel = select_core_neurons(&probe, t.tap, t.neuron, max_tau, k, &scorer)?;
            let scores = sel.table.scores();
            let width = probe.source_width(t.tap);
            for &tau in &cfg.taus {
                let core = CoreSet::from_scores(t.neuron, &scores, tau);
                let core_loss = knockout_loss(&probe, &t, &sel.concept, &core.as_set(), k)?;
                let random_losses = (0..cfg.draws)
                    .map(|_| {
                        let set: BTreeSet<usize> = sample(&mut rng, width, tau).into_iter().collect();
                        knockout_loss(&probe, &t, &sel.concept, &set, k)
                    })
                    .collect::<Result<Vec<_>>>()?;
                let diffs: Vec<f64> = random_losses.iter().map(|l| l - core_loss).collect();
                records.push(OptimalityRecord {
                    target: t,
                    tap: wb.taps.taps()[t.tap].name.clone(),
                    tau,
                    core: core.neurons,
                    core_loss,
                    random_wins: diffs.iter().filter(|d| **d < 0.0).count(),
                    mean_diff: mean(&diffs),
                    random_losses,
                });
            }
        }
    }
    let summaries = cfg
        .taus
        .iter()
        .map(|&tau| {
            let rs: Vec<&OptimalityRecord> = records.iter().filter(|r| r.tau == tau).collect();
            let means: Vec<f64> = rs.iter().map(|r| r.mean_diff).collect();
            let positive = means.iter().filter(|m| **m > 0.0).count();
            let negative = means.iter().filter(|m| **m < 0.0).count();
            let draws = rs.len() * cfg.draws;
            OptimalitySummary {
                tau,
                targets: rs.len(),
                draws,
                mean_diff: mean(&means),
                ci95: ci95(&means),
                positive,
                negative,
                sign_test_p: sign_test(positive, negative),
                random_win_rate: rs.iter().map(|r| r.random_wins).sum::<usize>() as f64 / draws.max(1) as f64,
            }
        })
        .collect();
    Ok(OptimalityReport {
        config: cfg.clone(),
        records,
        summaries,
    })
}

impl OptimalityReport {
    pub fn render(&self) -> String {
        let mut s = String::from("tau  targets  mean(L_rand-L_core)  ci95                 +/-     sign_p     random_wins\n");
        for m in &self.summaries {
            let _ = writeln!(
                s,
                "{:<4} {:<8} {:<20.4} [{:.4}, {:.4}]  {:>2}/{:<2}  {:<10.3e} {:.3}",
                m.tau, m.targets, m.mean_diff, m.ci95.0, m.ci95.1, m.positive, m.negative, m.sign_test_p, m.random_win_rate
            );
        }
        s
    }
}

// ------------------------------------------------------------ core-set oracle

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CoreOracleConfig {
    pub tap: String,
    pub tau: usize,
    pub targets: usize,
    /// A core set passes when at most this share of subsets beats it.
    pub best_fraction: f64,
    pub seed: u64,
}

impl Default for CoreOracleConfig {
    fn default() -> Self {
        Self {
            tap: "relu2".into(),
            tau: 3,
            targets: 10,
            best_fraction: 0.05,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoreOracleRecord {
    pub target: Target,
    pub core: Vec<usize>,
    pub core_loss: f64,
    pub best_loss: f64,
    pub subsets: usize,
    /// Subsets whose knockout loss is strictly lower than the core set's.
    pub strictly_better: usize,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoreOracleReport {
    pub config: CoreOracleConfig,
    pub records: Vec<CoreOracleRecord>,
    pub passes: usize,
}

/// All `k`-subsets of `0..n` in lexicographic order.
pub fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    if k > n {
        return out;
    }
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        out.push(idx.clone());
        let Some(i) = (0..k).rev().find(|&i| idx[i] != i + n - k) else {
            return out;
        };
        idx[i] += 1;
        for j in i + 1..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

/// Ranks each target's core set among every subset of its size.
pub fn core_oracle_experiment(wb: &Workbench, cfg: &CoreOracleConfig) -> Result<CoreOracleReport> {
    let tap = wb.tap_index(&cfg.tap)?;
    let width = wb.source_width(tap);
    if cfg.tau == 0 || cfg.tau > width {
        return Err(Error::Config(format!("oracle τ must be in 1..={width}")));
    }
    let subsets = combinations(width, cfg.tau);
    if subsets.len() > 100_000 {
        return Err(Error::Config(format!("{} subsets is too many to enumerate", subsets.len())));
    }
    let allowed = (cfg.best_fraction * subsets.len() as f64).floor() as usize;
    let k = wb.config.k;
    let scorer = wb.scorer();
    let mut records = Vec::new();
    for slot in 0..wb.datasets.len() {
        let probe = wb.probe(slot)?;
        let class = wb.datasets[slot].manifest.class;
        let mut rng = rng_for(cfg.seed, 2, slot);
        let n = share(cfg.targets, wb.datasets.len(), slot);
        for t in sample_targets(&probe, class, &[tap], n, &mut rng)? {
            let sel = select_core_neurons(&probe, t.tap, t.neuron, cfg.tau, k, &scorer)?;
            let core_loss = knockout_loss(&probe, &t, &sel.concept, &sel.core.as_set(), k)?;
            let losses = subsets
                .iter()
                .map(|s| knockout_loss(&probe, &t, &sel.concept, &s.iter().copied().collect(), k))
                .collect::<Result<Vec<_>>>()?;
            let strictly_better = losses.iter().filter(|l| **l < core_loss).count();
            records.push(CoreOracleRecord {
                target: t,
                core: sel.core.neurons,
                core_loss,
                best_loss: losses.iter().copied().fold(f64::INFINITY, f64::min),
                subsets: subsets.len(),
                strictly_better,
                pass: strictly_better <= allowed,
            });
        }
    }
    Ok(CoreOracleReport {
        config: cfg.clone(),
        passes: records.iter().filter(|r| r.pass).count(),
        records,
    })
}

impl CoreOracleReport {
    pub fn render(&self) -> String {
        let mut s = String::from("class  neuron  core          L_core  L_best  better/subsets  pass\n");
        for r in &self.records {
            let _ = writeln!(
                s,
                "{:<6} {:<7} {:<13} {:<7.3} {:<7.3} {:>4}/{:<9} {}",
                r.target.class,
                r.target.neuron,
                format!("{:?}", r.core),
                r.core_loss,
                r.best_loss,
                r.strictly_better,
                r.subsets,
                r.pass
            );
        }
        let _ = writeln!(s, "passing targets: {}/{}", self.passes, self.records.len());
        s
    }
}

// ------------------------------------------------------------------ fidelity

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FidelityConfig {
    /// Highest masked tap; defaults to the tap below the logits.
    pub tap: Option<String>,
    /// Lowest masked tap; defaults to `tap` (single-layer masking).
    pub down_to: Option<String>,
    pub random_draws: usize,
    pub seed: u64,
}

impl Default for FidelityConfig {
    fn default() -> Self {
        Self {
            tap: None,
            down_to: None,
            random_draws: 20,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FidelityRecord {
    pub class: usize,
    /// Held-out images the unmasked model assigns to the class.
    pub eligible: usize,
    /// Masked neurons per tap name.
    pub core: BTreeMap<String, Vec<usize>>,
    pub mask_core: f64,
    pub mask_random: f64,
    pub retain_core: f64,
    pub retain_random: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FidelitySummary {
    pub classes: usize,
    /// Mean of `recall(mask random) − recall(mask core)`.
    pub mask_gap: f64,
    /// Mean of `1 − recall(retain core)`.
    pub retain_core_drop: f64,
    /// Mean of `recall(retain core) − recall(retain random)`.
    pub retain_gap: f64,
    pub mean_mask_core: f64,
    pub mean_mask_random: f64,
    pub mean_retain_core: f64,
    pub mean_retain_random: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FidelityReport {
    pub config: FidelityConfig,
    pub taps: Vec<String>,
    pub records: Vec<FidelityRecord>,
    pub summary: FidelitySummary,
}

/// Share of `points` (activations at the block input) still assigned to
/// `class` under `masks`.
pub fn recall_under_masks(block: &Block, points: &[&Tensor], class: usize, masks: &[KnockoutMask]) -> Result<f64> {
    if points.is_empty() {
        return Ok(f64::NAN);
    }
    let mut hits = 0;
    for p in points {
        if argmax(block.forward_masked(p, masks)?.data()) == class {
            hits += 1;
        }
    }
    Ok(hits as f64 / points.len() as f64)
}

/// Core neurons per tap from the class logit down to `down_to`: each tap
/// holds the union of the core sets of the tap above.
pub fn core_tree(wb: &Workbench, probe: &Probe, class: usize, down_to: usize) -> Result<BTreeMap<usize, BTreeSet<usize>>> {
    let scorer = wb.scorer();
    let mut out = BTreeMap::new();
    let mut current: BTreeSet<usize> = [class].into();
    for tap in (down_to + 1..wb.taps.len()).rev() {
        let mut below = BTreeSet::new();
        for &n in &current {
            let sel = select_core_neurons(probe, tap, n, wb.tau(tap), wb.config.k, &scorer)?;
            below.extend(sel.core.neurons);
        }
        out.insert(tap - 1, below.clone());
        current = below;
    }
    Ok(out)
}

/// Masks or retains core neurons on held-out images.
pub fn fidelity_experiment(wb: &Workbench, heldout: &[Tensor], cfg: &FidelityConfig) -> Result<FidelityReport> {
    let taps = wb.taps.taps();
    if taps.len() < 2 {
        return Err(Error::Config("fidelity needs a tap below the logits".into()));
    }
    let top = match &cfg.tap {
        Some(name) => wb.tap_index(name)?,
        None => taps.len() - 2,
    };
    let low = match &cfg.down_to {
        Some(name) => wb.tap_index(name)?,
        None => top,
    };
    if low > top || top + 1 >= taps.len() {
        return Err(Error::Config("fidelity taps must satisfy down_to ≤ tap < logits".into()));
    }
    let block = Block::new(wb.graph, taps[low].value, wb.graph.output())?;
    let cached: Vec<Tensor> = heldout
        .iter()
        .map(|x| Ok(forward_with_taps(wb.graph, x, &[taps[low].value], &[])?.taps.remove(0)))
        .collect::<Result<_>>()?;
    let predicted: Vec<usize> = cached
        .iter()
        .map(|p| Ok(argmax(block.forward(p)?.data())))
        .collect::<Result<_>>()?;
    let masks_for = |sets: &BTreeMap<usize, BTreeSet<usize>>| -> Vec<KnockoutMask> {
        sets.iter()
            .filter(|(t, _)| (low..=top).contains(*t))
            .map(|(&t, s)| KnockoutMask::new(taps[t].value, s.iter().copied()))
            .collect()
    };
    let complement = |sets: &BTreeMap<usize, BTreeSet<usize>>| -> BTreeMap<usize, BTreeSet<usize>> {
        sets.iter()
            .map(|(&t, s)| (t, (0..taps[t].width).filter(|c| !s.contains(c)).collect()))
            .collect()
    };
    let mut records = Vec::new();
    for slot in 0..wb.datasets.len() {
        let class = wb.datasets[slot].manifest.class;
        let probe = wb.probe(slot)?;
        let tree = core_tree(wb, &probe, class, low)?;
        drop(probe);
        let points: Vec<&Tensor> = cached.iter().zip(&predicted).filter(|(_, p)| **p == class).map(|(c, _)| c).collect();
        let mut rng = rng_for(cfg.seed, 3, slot);
        let mut mask_random = Vec::new();
        let mut retain_random = Vec::new();
        for _ in 0..cfg.random_draws {
            let random: BTreeMap<usize, BTreeSet<usize>> = tree
                .iter()
                .filter(|(t, _)| (low..=top).contains(*t))
                .map(|(&t, s)| (t, sample(&mut rng, taps[t].width, s.len()).into_iter().collect()))
                .collect();
            mask_random.push(recall_under_masks(&block, &points, class, &masks_for(&random))?);
            retain_random.push(recall_under_masks(&block, &points, class, &masks_for(&complement(&random)))?);
        }
        records.push(FidelityRecord {
            class,
            eligible: points.len(),
            core: tree
                .iter()
                .filter(|(t, _)| (low..=top).contains(*t))
                .map(|(&t, s)| (taps[t].name.clone(), s.iter().copied().collect()))
                .collect(),
            mask_core: recall_under_masks(&block, &points, class, &masks_for(&tree))?,
            mask_random: mean(&mask_random),
            retain_core: recall_under_masks(&block, &points, class, &masks_for(&complement(&tree)))?,
            retain_random: mean(&retain_random),
        });
    }
    let live: Vec<&FidelityRecord> = records.iter().filter(|r| r.eligible > 0).collect();
    let avg = |f: &dyn Fn(&FidelityRecord) -> f64| mean(&live.iter().map(|r| f(r)).collect::<Vec<_>>());
    let summary = FidelitySummary {
        classes: live.len(),
        mask_gap: avg(&|r| r.mask_random - r.mask_core),
        retain_core_drop: avg(&|r| 1.0 - r.retain_core),
        retain_gap: avg(&|r| r.retain_core - r.retain_random),
        mean_mask_core: avg(&|r| r.mask_core),
        mean_mask_random: avg(&|r| r.mask_random),
        mean_retain_core: avg(&|r| r.retain_core),
        mean_retain_random: avg(&|r| r.retain_random),
    };
    Ok(FidelityReport {
        config: cfg.clone(),
        taps: (low..=top).map(|t| taps[t].name.clone()).collect(),
        records,
        summary,
    })
}

impl FidelityReport {
    pub fn render(&self) -> String {
        let mut s = format!("masked taps: {}\n", self.taps.join(", "));
        s.push_str("class  n    mask_core  mask_rand  retain_core  retain_rand\n");
        for r in &self.records {
            let _ = writeln!(
                s,
                "{:<6} {:<4} {:<10.3} {:<10.3} {:<12.3} {:.3}",
                r.class, r.eligible, r.mask_core, r.mask_random, r.retain_core, r.retain_random
            );
        }
        let m = &self.summary;
        let _ = writeln!(
            s,
            "mask gap {:.3}  retain-core drop {:.3}  retain gap {:.3}",
            m.mask_gap, m.retain_core_drop, m.retain_gap
        );
        s
    }
}

// --------------------------------------------------------------- correlation

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorrelationConfig {
    /// Knockouts per tap, spread over the classes.
    pub draws: usize,
    /// Knockout subset size.
    pub size: usize,
    /// Target taps; defaults to every tap fed by another tap.
    pub taps: Option<Vec<String>>,
    pub seed: u64,
}

impl Default for CorrelationConfig {
    fn default() -> Self {
        Self {
            draws: 200,
            size: 1,
            taps: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationRecord {
    pub target: Target,
    pub knockout: Vec<usize>,
    /// `Σ_{s∈S} |T(a, s, V_a)|`.
    pub score: f64,
    /// `score / Σ_s |T(a, s, V_a)|` over every source neuron.
    pub share: f64,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationSummary {
    pub tap: String,
    pub draws: usize,
    /// Pearson between `share` and `1 − loss`; `None` if undefined.
    pub pearson: Option<f64>,
    /// Pearson between raw `score` and `1 − loss`.
    pub pearson_raw: Option<f64>,
    /// Mean of per-target Pearson over targets with at least three draws
    /// and a defined correlation.
    pub pearson_per_target: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub config: CorrelationConfig,
    pub records: BTreeMap<String, Vec<CorrelationRecord>>,
    pub summaries: Vec<CorrelationSummary>,
}

/// Correlates importance scores with the concept damage of knocking the
/// scored neurons out.
pub fn correlation_experiment(wb: &Workbench, cfg: &CorrelationConfig) -> Result<CorrelationReport> {
    if cfg.draws < 2 || cfg.size == 0 {
        return Err(Error::Config("correlation needs draws ≥ 2 and size ≥ 1".into()));
    }
    let taps: Vec<usize> = match &cfg.taps {
        Some(names) => names.iter().map(|n| wb.tap_index(n)).collect::<Result<_>>()?,
        None => hidden_source_taps(wb, cfg.size),
    };
    let k = wb.config.k;
    let scorer = wb.scorer();
    let mut records: BTreeMap<String, Vec<CorrelationRecord>> = BTreeMap::new();
    for slot in 0..wb.datasets.len() {
        let probe = wb.probe(slot)?;
        let class = wb.datasets[slot].manifest.class;
        for (ti, &tap) in taps.iter().enumerate() {
            let mut rng = rng_for(cfg.seed, 4 + ti as u64, slot);
            let width = probe.source_width(tap);
            let live: Vec<usize> = (0..probe.width(tap))
                .filter(|&n| probe.max_activation(tap, n).is_ok_and(|m| m > 0.0))
                .collect();
            let n = share(cfg.draws, wb.datasets.len(), slot);
            let mut picks: Vec<(usize, Vec<usize>)> = Vec::new();
            if cfg.size == 1 {
                let mut pairs: Vec<(usize, usize)> = live.iter().flat_map(|&a| (0..width).map(move |s| (a, s))).collect();
                pairs.shuffle(&mut rng);
                picks.extend(pairs.into_iter().take(n).map(|(a, s)| (a, vec![s])));
            } else if !live.is_empty() {
                for _ in 0..n {
                    let a = *live.choose(&mut rng).expect("nonempty");
                    let mut s = sample(&mut rng, width, cfg.size).into_vec();
                    s.sort();
                    picks.push((a, s));
                }
            }
            picks.sort();
            let mut tables: BTreeMap<usize, (Concept, ImportanceTable)> = BTreeMap::new();
            for (a, set) in picks {
                if let std::collections::btree_map::Entry::Vacant(slot) = tables.entry(a) {
                    let concept = probe.concept(tap, a, k)?;
                    let table = importance_table(&probe, tap, a, &concept.patch_ids(), &scorer)?;
                    slot.insert((concept, table));
                }
                let (concept, table) = &tables[&a];
                let scores = table.scores();
                let total: f64 = scores.iter().map(|s| s.abs()).sum();
                let score: f64 = set.iter().map(|&s| scores[s].abs()).sum();
                let target = Target { class, tap, neuron: a };
                let loss = knockout_loss(&probe, &target, concept, &set.iter().copied().collect(), k)?;
                records.entry(wb.taps.taps()[tap].name.clone()).or_default().push(CorrelationRecord {
                    target,
                    knockout: set,
                    score,
                    share: if total > 0.0 { score / total } else { 0.0 },
                    loss,
                });
            }
        }
    }
    let summaries = taps
        .iter()
        .map(|&t| {
            let name = wb.taps.taps()[t].name.clone();
            let rs = records.get(&name).map(Vec::as_slice).unwrap_or(&[]);
            let deficit: Vec<f64> = rs.iter().map(|r| 1.0 - r.loss).collect();
            let shares: Vec<f64> = rs.iter().map(|r| r.share).collect();
            let raw: Vec<f64> = rs.iter().map(|r| r.score).collect();
            let mut by_target: BTreeMap<(usize, usize), (Vec<f64>, Vec<f64>)> = BTreeMap::new();
            for r in rs {
                let e = by_target.entry((r.target.class, r.target.neuron)).or_default();
                e.0.push(r.score);
                e.1.push(1.0 - r.loss);
            }
            let per_target: Vec<f64> = by_target
                .values()
                .filter(|(x, _)| x.len() >= 3)
                .filter_map(|(x, y)| pearson(x, y))
                .collect();
            CorrelationSummary {
                draws: rs.len(),
                pearson: pearson(&shares, &deficit),
                pearson_raw: pearson(&raw, &deficit),
                pearson_per_target: (!per_target.is_empty()).then(|| mean(&per_target)),
                tap: name,
            }
        })
        .collect();
    Ok(CorrelationReport {
        config: cfg.clone(),
        records,
        summaries,
    })
}

impl CorrelationReport {
    pub fn render(&self) -> String {
        let fmt = |p: Option<f64>| p.map_or("undefined".to_string(), |v| format!("{v:.3}"));
        let mut s = String::from("tap       draws  pearson(share,1-L)  pearson(|T|,1-L)  per-target mean\n");
        for m in &self.summaries {
            let _ = writeln!(
                s,
                "{:<9} {:<6} {:<19} {:<17} {}",
                m.tap,
                m.draws,
                fmt(m.pearson),
                fmt(m.pearson_raw),
                fmt(m.pearson_per_target)
            );
        }
        s
    }
}

// ------------------------------------------------------------- k-sensitivity

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KSensitivityConfig {
    pub k_values: Vec<usize>,
    pub baseline: usize,
    /// Targets per tap per class.
    pub targets_per_tap: usize,
    pub seed: u64,
}

impl Default for KSensitivityConfig {
    fn default() -> Self {
        Self {
            k_values: vec![30, 50, 70],
            baseline: 50,
            targets_per_tap: 2,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KCore {
    pub k: usize,
    pub core: Vec<usize>,
    pub overlap: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KSensitivityRecord {
    pub target: Target,
    pub tau: usize,
    pub baseline_core: Vec<usize>,
    pub cores: Vec<KCore>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KSensitivitySummary {
    pub k: usize,
    pub targets: usize,
    pub mean_overlap: f64,
    /// Mean of `overlap / τ`.
    pub mean_ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KSensitivityReport {
    pub config: KSensitivityConfig,
    pub records: Vec<KSensitivityRecord>,
    pub summaries: Vec<KSensitivitySummary>,
}

/// Overlap between core sets selected with different concept sizes.
pub fn k_sensitivity_experiment(wb: &Workbench, cfg: &KSensitivityConfig) -> Result<KSensitivityReport> {
    if cfg.baseline == 0 || cfg.k_values.contains(&0) {
        return Err(Error::Config("k values must be at least 1".into()));
    }
    let scorer = wb.scorer();
    let mut records = Vec::new();
    for slot in 0..wb.datasets.len() {
        let probe = wb.probe(slot)?;
        let class = wb.datasets[slot].manifest.class;
        let mut rng = rng_for(cfg.seed, 5, slot);
        for tap in hidden_source_taps(wb, 0) {
            let tau = wb.tau(tap);
            for t in sample_targets(&probe, class, &[tap], cfg.targets_per_tap, &mut rng)? {
                let base = select_core_neurons(&probe, tap, t.neuron, tau, cfg.baseline, &scorer)?.core;
                let base_set = base.as_set();
                let cores = cfg
                    .k_values
                    .iter()
                    .map(|&k| {
                        let core = select_core_neurons(&probe, tap, t.neuron, tau, k, &scorer)?.core;
                        Ok(KCore {
                            k,
                            overlap: core.neurons.iter().filter(|n| base_set.contains(n)).count(),
                            core: core.neurons,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                records.push(KSensitivityRecord {
                    target: t,
                    tau,
                    baseline_core: base.neurons,
                    cores,
                });
            }
        }
    }
    let summaries = cfg
        .k_values
        .iter()
        .enumerate()
        .map(|(i, &k)| {
            let overlaps: Vec<f64> = records.iter().map(|r| r.cores[i].overlap as f64).collect();
            let ratios: Vec<f64> = records.iter().map(|r| r.cores[i].overlap as f64 / r.tau as f64).collect();
            KSensitivitySummary {
                k,
                targets: records.len(),
                mean_overlap: mean(&overlaps),
                mean_ratio: mean(&ratios),
            }
        })
        .collect();
    Ok(KSensitivityReport {
        config: cfg.clone(),
        records,
        summaries,
    })
}

impl KSensitivityReport {
    pub fn render(&self) -> String {
        let mut s = format!("baseline k = {}\nk     targets  mean_overlap  mean_ratio\n", self.config.baseline);
        for m in &self.summaries {
            let _ = writeln!(s, "{:<5} {:<8} {:<13.3} {:.3}", m.k, m.targets, m.mean_overlap, m.mean_ratio);
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn combinations_enumerate_in_order() {
        assert_eq!(combinations(4, 2), vec![vec![0, 1], vec![0, 2], vec![0, 3], vec![1, 2], vec![1, 3], vec![2, 3]]);
        assert_eq!(combinations(12, 3).len(), 220);
        assert_eq!(combinations(3, 0), vec![Vec::<usize>::new()]);
        assert!(combinations(2, 3).is_empty());
    }
}
