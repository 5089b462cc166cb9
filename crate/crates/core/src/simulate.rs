//! Batch replay of the selection loop with simulated annotators: oracle
//! markers stand in for scribbles and an auto-labeler for filter labels.

use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::criterion::{
    filter_dice, recommend_first, FilterAnnotation, FilterId, FilterLabel, ScoreTable,
};
use crate::dataset::{CaseData, Dataset, Modality, Split};
use crate::error::{Error, Result};
use crate::io::oracle_markers;
use crate::metrics::{region_mask, Region};
use crate::session::{Session, SessionConfig, StepOutcome};
use crate::sunet::ArchSpec;
use crate::train::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    Interactive,
    Random,
    FirstK,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Interactive => "interactive",
            Strategy::Random => "random",
            Strategy::FirstK => "first-k",
        })
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "interactive" => Ok(Strategy::Interactive),
            "random" => Ok(Strategy::Random),
            "first-k" => Ok(Strategy::FirstK),
            _ => Err(Error::InvalidArgument(format!("unknown strategy {s:?}"))),
        }
    }
}

pub const DEFAULT_LABEL_THRESHOLD: f64 = 0.3;
pub const DEFAULT_SIM_EPOCHS: usize = 20;
pub const DEFAULT_MARKERS_PER_CLASS: usize = 15;

#[derive(Clone, Debug, PartialEq)]
pub struct SimConfig {
    pub strategy: Strategy,
    pub budget: usize,
    pub seeds: Vec<u64>,
    pub label_threshold: f64,
    pub markers_per_class: usize,
    pub arch: ArchSpec,
    /// Decoder training after each step; `None` runs selection only.
    pub train: Option<TrainConfig>,
    /// Numbers of selected images after which to train and evaluate;
    /// `None` means every step.
    pub eval_steps: Option<Vec<usize>>,
}

impl SimConfig {
    pub fn new(strategy: Strategy, budget: usize, seeds: Vec<u64>) -> Self {
        SimConfig {
            strategy,
            budget,
            seeds,
            label_threshold: DEFAULT_LABEL_THRESHOLD,
            markers_per_class: DEFAULT_MARKERS_PER_CLASS,
            arch: ArchSpec::default(),
            train: Some(TrainConfig {
                epochs: DEFAULT_SIM_EPOCHS,
                ..TrainConfig::default()
            }),
            eval_steps: None,
        }
    }

    fn evaluates(&self, n: usize) -> bool {
        self.train.is_some() && self.eval_steps.as_ref().is_none_or(|s| s.contains(&n))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimRow {
    pub strategy: Strategy,
    pub seed: u64,
    pub n_images: usize,
    pub dsc_et: Option<f64>,
    pub dsc_tc: Option<f64>,
    pub dsc_wt: Option<f64>,
    /// Case selected at this step.
    pub picked: String,
    /// Recommendation produced after this step, if the strategy scores.
    pub recommended: Option<String>,
}

/// Score table computed after `step` images were selected.
#[derive(Clone, Debug, PartialEq)]
pub struct StepScores {
    pub seed: u64,
    pub step: usize,
    pub table: ScoreTable,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SimResult {
    pub rows: Vec<SimRow>,
    pub scores: Vec<StepScores>,
}

pub const SIM_CSV_HEADER: &str = "strategy,seed,n_images,dsc_et,dsc_tc,dsc_wt,picked,recommended";

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

impl SimResult {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{SIM_CSV_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                r.strategy,
                r.seed,
                r.n_images,
                opt(r.dsc_et),
                opt(r.dsc_tc),
                opt(r.dsc_wt),
                r.picked,
                r.recommended.as_deref().unwrap_or_default()
            );
        }
        s
    }

    /// Per-step score tables with `seed,step` prepended to each row.
    pub fn scores_csv(&self) -> String {
        let mut s = format!("seed,step,{}\n", ScoreTable::CSV_HEADER);
        for st in &self.scores {
            for line in st.table.to_csv().lines().skip(1) {
                let _ = writeln!(s, "{},{},{line}", st.seed, st.step);
            }
        }
        s
    }
}

/// Labels every layer-1 filter whose Otsu-binarized activation on its own
/// source image reaches `threshold` Dice against WT or ET, choosing the
/// better region (WT on ties). If no filter qualifies, the single best
/// filter is labeled so scoring can proceed.
pub fn auto_label(session: &Session, ds: &Dataset, threshold: f64) -> Result<FilterAnnotation> {
    let mut ann = FilterAnnotation::default();
    let mut best: Option<(f64, FilterId, FilterLabel)> = None;
    let mut cache: Vec<(String, crate::criterion::Layer1Activations)> = Vec::new();
    for info in session.filters() {
        let src = &info.provenance.image_id;
        if !cache.iter().any(|(id, _)| id == src) {
            let case = ds.get(src)?;
            cache.push((src.clone(), session.layer1_activations(case)?));
        }
        let acts = &cache.iter().find(|(id, _)| id == src).expect("cached").1;
        let gt = ds.get(src)?.gt()?;
        let act = acts
            .get(&info.id)
            .ok_or_else(|| Error::UnknownFilter(info.id.to_string()))?;
        let (wt, _) = filter_dice(act, &region_mask(gt, Region::Wt))?;
        let (et, _) = filter_dice(act, &region_mask(gt, Region::Et))?;
        let (dice, label) = if et > wt {
            (et, FilterLabel::GoodEt)
        } else {
            (wt, FilterLabel::GoodWt)
        };
        if dice >= threshold {
            ann.set(info.id, label);
        }
        if best.as_ref().is_none_or(|b| dice > b.0) {
            best = Some((dice, info.id, label));
        }
    }
    if !ann.has_labels() {
        let (_, id, label) = best.ok_or(Error::NoLabeledFilters)?;
        log::warn!("no filter reached Dice {threshold}; labeling the best one ({id})");
        ann.set(id, label);
    }
    Ok(ann)
}

fn first_pick(ds: &Dataset, train: &[&CaseData]) -> Result<String> {
    let images: Vec<(&str, Vec<&crate::tensor::Volume>)> = train
        .iter()
        .map(|c| {
            (
                c.id.as_str(),
                Modality::BOTH.iter().map(|&m| c.image(m)).collect(),
            )
        })
        .collect();
    let _ = ds;
    recommend_first(&images).ok_or(Error::Empty("training split"))
}

/// Replays the loop for every seed of `cfg`.
pub fn simulate(ds: &Dataset, cfg: &SimConfig) -> Result<SimResult> {
    if cfg.budget == 0 {
        return Err(Error::InvalidArgument("budget must be at least 1".into()));
    }
    let train: Vec<&CaseData> = ds.split(Split::Train).collect();
    if train.is_empty() {
        return Err(Error::Empty("training split"));
    }
    for c in &train {
        c.gt()?;
    }
    if cfg.train.is_some() && ds.split(Split::Test).next().is_none() {
        return Err(Error::Empty("test split"));
    }
    let budget = cfg.budget.min(train.len());
    let mut result = SimResult::default();
    for &seed in &cfg.seeds {
        let mut session = Session::new(SessionConfig {
            budget,
            stop_threshold: None,
            arch: cfg.arch.clone(),
            seed,
        })?;
        let mut order: Vec<String> = train.iter().map(|c| c.id.clone()).collect();
        if cfg.strategy == Strategy::Random {
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        }
        let mut next = match cfg.strategy {
            Strategy::Interactive => first_pick(ds, &train)?,
            _ => order[0].clone(),
        };
        for n in 1..=budget {
            let picked = next.clone();
            session.select(ds, &picked)?;
            let (markers, _) =
                oracle_markers(&picked, ds.get(&picked)?.gt()?, cfg.markers_per_class, seed)?;
            session.set_markers(ds, markers)?;
            let thr = cfg.label_threshold;
            let relabel = |s: &mut Session, ds: &Dataset| {
                let ann = auto_label(s, ds, thr)?;
                s.set_annotations(ann)
            };
            let mut recommended = None;
            if n < budget && cfg.strategy == Strategy::Interactive {
                match session.selection_step_with(ds, relabel)? {
                    StepOutcome::Recommend { case_id, .. } => recommended = Some(case_id),
                    other => {
                        return Err(Error::InvalidArgument(format!(
                            "loop ended early: {other:?}"
                        )))
                    }
                }
                let table = session.ranking()?.0.clone();
                result.scores.push(StepScores {
                    seed,
                    step: n,
                    table,
                });
            } else {
                session.learn_layer1(ds)?;
            }
            let (mut et, mut tc, mut wt) = (None, None, None);
            if cfg.evaluates(n) {
                let tcfg = cfg.train.as_ref().expect("evaluates implies training");
                session.train_encoder_rest(ds)?;
                session.train_decoder(ds, tcfg, &mut |_, _| true)?;
                let report = session.evaluate(ds)?;
                et = Some(report.mean(Region::Et));
                tc = Some(report.mean(Region::Tc));
                wt = Some(report.mean(Region::Wt));
                log::info!(
                    "{} seed {seed}: {n} image(s), WT {:.3} TC {:.3} ET {:.3}",
                    cfg.strategy,
                    report.mean(Region::Wt),
                    report.mean(Region::Tc),
                    report.mean(Region::Et)
                );
            }
            result.rows.push(SimRow {
                strategy: cfg.strategy,
                seed,
                n_images: n,
                dsc_et: et,
                dsc_tc: tc,
                dsc_wt: wt,
                picked: picked.clone(),
                recommended: recommended.clone(),
            });
            if n < budget {
                next = match cfg.strategy {
                    Strategy::Interactive => recommended.expect("interactive steps recommend"),
                    _ => order[n].clone(),
                };
            }
        }
    }
    Ok(result)
}
