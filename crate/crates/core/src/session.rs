//! State of one interactive selection loop: which training images were
//! picked, their markers, the encoders learned so far, filter labels, the
//! current score table and, eventually, the trained network.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::criterion::{
    rank_and_recommend, score_image, FilterAnnotation, FilterId, FilterLabel, Layer1Activations,
    ScoreTable,
};
use crate::dataset::{CaseData, Dataset, Modality, Split};
use crate::error::{Error, Result};
use crate::flim::{
    extend_encoder, run_layer, stable_hash, EncoderLayer, FilterProvenance, MarkerSet,
};
use crate::io::Checkpoint;
use crate::metrics::{dsc_report, region_mask, DscReport, Region};
use crate::sunet::{assemble, ArchSpec, SUNet};
use crate::train::{train_decoder, EpochHook, LossLog, OptimizerState, TrainConfig};

pub const DEFAULT_BUDGET: usize = 8;
pub const DEFAULT_STOP_THRESHOLD: f64 = 0.85;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SessionConfig {
    pub budget: usize,
    /// Stop recommending once every remaining image scores at least this.
    pub stop_threshold: Option<f64>,
    pub arch: ArchSpec,
    pub seed: u64,
}

impl Default for SessionConfig {
    fn default() -> Self {
        SessionConfig {
            budget: DEFAULT_BUDGET,
            stop_threshold: Some(DEFAULT_STOP_THRESHOLD),
            arch: ArchSpec::default(),
            seed: 0,
        }
    }
}

impl SessionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.budget == 0 {
            return Err(Error::InvalidArgument("budget must be at least 1".into()));
        }
        self.arch.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionEvent {
    pub step: usize,
    pub case_id: String,
    /// Recommendation in force when the user chose; `None` before scoring.
    pub recommended: Option<String>,
    pub overridden: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StepOutcome {
    Recommend { case_id: String, min_aggregate: f64 },
    BudgetReached,
    AllPerformWell { min_aggregate: f64 },
    NothingRemaining,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterInfo {
    pub id: FilterId,
    pub label: FilterLabel,
    pub provenance: FilterProvenance,
}

fn modality_seed(seed: u64, m: Modality) -> u64 {
    seed ^ stable_hash(&[m.to_string().as_bytes()])
}

#[derive(Clone, Debug)]
pub struct Session {
    config: SessionConfig,
    selected: Vec<String>,
    markers: BTreeMap<String, MarkerSet>,
    encoder_flair: Vec<EncoderLayer>,
    encoder_t1gd: Vec<EncoderLayer>,
    annotations: FilterAnnotation,
    scores: Option<ScoreTable>,
    stale: bool,
    recommendation: Option<String>,
    audit: Vec<SelectionEvent>,
    net: Option<SUNet>,
    optimizer: Option<OptimizerState>,
    loss_log: LossLog,
}

impl Session {
    pub fn new(config: SessionConfig) -> Result<Self> {
        config.validate()?;
        Ok(Session {
            config,
            selected: Vec::new(),
            markers: BTreeMap::new(),
            encoder_flair: Vec::new(),
            encoder_t1gd: Vec::new(),
            annotations: FilterAnnotation::default(),
            scores: None,
            stale: true,
            recommendation: None,
            audit: Vec::new(),
            net: None,
            optimizer: None,
            loss_log: LossLog::default(),
        })
    }

    pub fn config(&self) -> &SessionConfig {
        &self.config
    }

    pub fn selected(&self) -> &[String] {
        &self.selected
    }

    pub fn markers(&self, case_id: &str) -> Option<&MarkerSet> {
        self.markers.get(case_id)
    }

    pub fn all_markers(&self) -> impl Iterator<Item = &MarkerSet> {
        self.markers.values()
    }

    pub fn encoder(&self, modality: Modality) -> &[EncoderLayer] {
        match modality {
            Modality::Flair => &self.encoder_flair,
            Modality::T1gd => &self.encoder_t1gd,
        }
    }

    pub fn annotations(&self) -> &FilterAnnotation {
        &self.annotations
    }

    pub fn scores(&self) -> Option<&ScoreTable> {
        self.scores.as_ref()
    }

    pub fn scores_stale(&self) -> bool {
        self.stale
    }

    pub fn recommendation(&self) -> Option<&str> {
        self.recommendation.as_deref()
    }

    pub fn audit(&self) -> &[SelectionEvent] {
        &self.audit
    }

    pub fn net(&self) -> Option<&SUNet> {
        self.net.as_ref()
    }

    pub fn loss_log(&self) -> &LossLog {
        &self.loss_log
    }

    pub fn has_layer1(&self) -> bool {
        !self.encoder_flair.is_empty() && !self.encoder_t1gd.is_empty()
    }

    pub fn encoders_complete(&self) -> bool {
        let levels = self.config.arch.levels();
        self.encoder_flair.len() == levels && self.encoder_t1gd.len() == levels
    }

    /// Training cases not selected yet, in manifest order.
    pub fn remaining<'a>(&self, ds: &'a Dataset) -> Vec<&'a CaseData> {
        ds.split(Split::Train)
            .filter(|c| !self.selected.contains(&c.id))
            .collect()
    }

    fn invalidate_scores(&mut self) {
        self.stale = true;
    }

    /// Appends a training case to the selected list. The user may pick a
    /// case other than the recommendation; the choice is audit-logged.
    pub fn select(&mut self, ds: &Dataset, case_id: &str) -> Result<SelectionEvent> {
        let case = ds.get(case_id)?;
        if case.split != Split::Train {
            return Err(Error::InvalidArgument(format!(
                "case {case_id:?} is not in the training split"
            )));
        }
        if self.selected.iter().any(|s| s == case_id) {
            return Err(Error::InvalidArgument(format!(
                "case {case_id:?} is already selected"
            )));
        }
        if self.selected.len() >= self.config.budget {
            return Err(Error::BudgetExhausted {
                budget: self.config.budget,
            });
        }
        let event = SelectionEvent {
            step: self.selected.len() + 1,
            case_id: case_id.to_string(),
            recommended: self.recommendation.clone(),
            overridden: self.recommendation.as_deref().is_some_and(|r| r != case_id),
        };
        if event.overridden {
            log::info!(
                "case {case_id} selected over recommendation {}",
                self.recommendation.as_deref().unwrap_or_default()
            );
        }
        self.selected.push(case_id.to_string());
        if let Some(table) = &mut self.scores {
            let rows = std::mem::take(&mut table.rows)
                .into_iter()
                .filter(|r| r.image_id != case_id)
                .collect();
            *table = ScoreTable::new(rows);
        }
        self.recommendation = None;
        self.invalidate_scores();
        self.audit.push(event.clone());
        Ok(event)
    }

    /// Replaces the markers of a training case after bounds checking.
    pub fn set_markers(&mut self, ds: &Dataset, markers: MarkerSet) -> Result<()> {
        let case = ds.get(&markers.image_id)?;
        if case.split != Split::Train {
            return Err(Error::InvalidArgument(format!(
                "case {:?} is not in the training split",
                markers.image_id
            )));
        }
        markers.validate(case.dims())?;
        if !markers.has_object() {
            return Err(Error::NoObjectMarkers);
        }
        self.markers.insert(markers.image_id.clone(), markers);
        self.invalidate_scores();
        Ok(())
    }

    fn marked_selected<'a>(
        &'a self,
        ds: &'a Dataset,
    ) -> Result<Vec<(&'a CaseData, &'a MarkerSet)>> {
        let mut out = Vec::new();
        for id in &self.selected {
            if let Some(m) = self.markers.get(id) {
                out.push((ds.get(id)?, m));
            }
        }
        if out.is_empty() {
            return Err(Error::NotReady("no selected image has markers".into()));
        }
        Ok(out)
    }

    fn learn_encoders(
        &self,
        ds: &Dataset,
        depth: usize,
        keep: usize,
    ) -> Result<(Vec<EncoderLayer>, Vec<EncoderLayer>)> {
        let marked = self.marked_selected(ds)?;
        let mut out = Vec::with_capacity(2);
        for m in Modality::BOTH {
            let images: Vec<_> = marked.iter().map(|(c, mk)| (c.image(m), *mk)).collect();
            let specs = match m {
                Modality::Flair => &self.config.arch.flair[..depth],
                Modality::T1gd => &self.config.arch.t1gd[..depth],
            };
            let existing = self.encoder(m)[..keep].to_vec();
            out.push(extend_encoder(
                existing,
                &images,
                specs,
                modality_seed(self.config.seed, m),
            )?);
        }
        let t1gd = out.pop().expect("two encoders");
        let flair = out.pop().expect("two encoders");
        Ok((flair, t1gd))
    }

    /// (Re)learns layer 1 of both encoders from every selected image's
    /// markers. Deeper layers and any trained network are discarded. A
    /// label survives when its filter's provenance (image, marker, cluster)
    /// identifies exactly one new filter.
    pub fn learn_layer1(&mut self, ds: &Dataset) -> Result<()> {
        let (flair, t1gd) = self.learn_encoders(ds, 1, 0)?;
        let mut carried = FilterAnnotation::default();
        for (m, new_layer) in [(Modality::Flair, &flair[0]), (Modality::T1gd, &t1gd[0])] {
            let Some(old_layer) = self.encoder(m).first() else {
                continue;
            };
            for (old_idx, old) in old_layer.provenance.iter().enumerate() {
                let label = self.annotations.get(&FilterId::new(m, old_idx));
                if label == FilterLabel::None {
                    continue;
                }
                let key =
                    |p: &FilterProvenance| (p.image_id.clone(), p.marker_id, p.cluster, p.tag);
                let matches: Vec<usize> = new_layer
                    .provenance
                    .iter()
                    .enumerate()
                    .filter(|(_, p)| key(p) == key(old))
                    .map(|(i, _)| i)
                    .collect();
                if let [only] = matches[..] {
                    carried.set(FilterId::new(m, only), label);
                }
            }
        }
        self.encoder_flair = flair;
        self.encoder_t1gd = t1gd;
        self.annotations = carried;
        self.net = None;
        self.optimizer = None;
        self.loss_log = LossLog::default();
        self.invalidate_scores();
        Ok(())
    }

    fn layer1(&self, m: Modality) -> Result<&EncoderLayer> {
        self.encoder(m)
            .first()
            .ok_or_else(|| Error::NotReady("layer 1 has not been learned".into()))
    }

    /// Every layer-1 filter of both encoders with its label.
    pub fn filters(&self) -> Vec<FilterInfo> {
        let mut out = Vec::new();
        for m in Modality::BOTH {
            if let Some(layer) = self.encoder(m).first() {
                for (i, p) in layer.provenance.iter().enumerate() {
                    let id = FilterId::new(m, i);
                    out.push(FilterInfo {
                        id,
                        label: self.annotations.get(&id),
                        provenance: p.clone(),
                    });
                }
            }
        }
        out
    }

    pub fn label_filter(&mut self, id: FilterId, label: FilterLabel) -> Result<()> {
        let layer = self.layer1(id.modality)?;
        if id.index >= layer.filter_count() {
            return Err(Error::UnknownFilter(id.to_string()));
        }
        self.annotations.set(id, label);
        self.invalidate_scores();
        Ok(())
    }

    /// Replaces every label at once.
    pub fn set_annotations(&mut self, annotations: FilterAnnotation) -> Result<()> {
        for id in annotations.labels.keys() {
            if id.index >= self.layer1(id.modality)?.filter_count() {
                return Err(Error::UnknownFilter(id.to_string()));
            }
        }
        self.annotations = annotations;
        self.invalidate_scores();
        Ok(())
    }

    pub fn layer1_activations(&self, case: &CaseData) -> Result<Layer1Activations> {
        let flair = run_layer(&case.flair, self.layer1(Modality::Flair)?)?.0;
        let t1gd = run_layer(&case.t1gd, self.layer1(Modality::T1gd)?)?.0;
        Ok(Layer1Activations { flair, t1gd })
    }

    /// Scores every remaining training image with the labeled layer-1
    /// filters and refreshes the recommendation.
    pub fn score(&mut self, ds: &Dataset) -> Result<&ScoreTable> {
        self.layer1(Modality::Flair)?;
        if !self.annotations.has_labels() {
            return Err(Error::NoLabeledFilters);
        }
        let mut rows = Vec::new();
        for case in self.remaining(ds) {
            let gt = case.gt()?;
            let acts = self.layer1_activations(case)?;
            rows.push(score_image(
                &case.id,
                &acts,
                &self.annotations,
                &region_mask(gt, Region::Wt),
                &region_mask(gt, Region::Et),
            )?);
        }
        let table = ScoreTable::new(rows);
        self.recommendation = rank_and_recommend(&table).ok();
        self.stale = false;
        Ok(self.scores.insert(table))
    }

    /// Current table and recommendation; `None` recommendation when no
    /// training image remains.
    pub fn ranking(&self) -> Result<(&ScoreTable, Option<&str>)> {
        match &self.scores {
            Some(t) if !self.stale => Ok((t, self.recommendation.as_deref())),
            _ => Err(Error::StaleScores),
        }
    }

    /// One turn of the loop with the labels carried over by relearning.
    pub fn selection_step(&mut self, ds: &Dataset) -> Result<StepOutcome> {
        self.selection_step_with(ds, |_, _| Ok(()))
    }

    /// Relearns layer 1, lets `relabel` revise the filter labels, scores
    /// the remaining images and recommends the worst, unless the budget is
    /// used up or every remaining image already performs well.
    pub fn selection_step_with(
        &mut self,
        ds: &Dataset,
        relabel: impl FnOnce(&mut Session, &Dataset) -> Result<()>,
    ) -> Result<StepOutcome> {
        if self.selected.len() >= self.config.budget {
            return Err(Error::BudgetExhausted {
                budget: self.config.budget,
            });
        }
        self.learn_layer1(ds)?;
        relabel(self, ds)?;
        let stop = self.config.stop_threshold;
        let table = self.score(ds)?;
        let Some(min) = table.min_aggregate() else {
            return Ok(StepOutcome::NothingRemaining);
        };
        if let Some(t) = stop {
            if min >= t {
                return Ok(StepOutcome::AllPerformWell { min_aggregate: min });
            }
        }
        let case_id = rank_and_recommend(table)?;
        Ok(StepOutcome::Recommend {
            case_id,
            min_aggregate: min,
        })
    }

    /// Learns the encoder layers below layer 1 from the selected images
    /// and their markers.
    pub fn train_encoder_rest(&mut self, ds: &Dataset) -> Result<()> {
        if !self.has_layer1() {
            return Err(Error::NotReady("layer 1 has not been learned".into()));
        }
        let levels = self.config.arch.levels();
        let (flair, t1gd) = self.learn_encoders(ds, levels, 1)?;
        self.encoder_flair = flair;
        self.encoder_t1gd = t1gd;
        self.net = None;
        self.optimizer = None;
        self.loss_log = LossLog::default();
        Ok(())
    }

    /// Assembles the network and trains its decoder on every training case
    /// with ground truth.
    pub fn train_decoder(
        &mut self,
        ds: &Dataset,
        config: &TrainConfig,
        hook: &mut EpochHook<'_, f32>,
    ) -> Result<&LossLog> {
        if !self.encoders_complete() {
            return Err(Error::NotReady("encoders are incomplete".into()));
        }
        config.validate()?;
        let cases: Vec<&CaseData> = ds.split(Split::Train).filter(|c| c.gt.is_some()).collect();
        if cases.is_empty() {
            return Err(Error::MissingGroundTruth("training split".into()));
        }
        let mut net = assemble(
            self.encoder_flair.clone(),
            self.encoder_t1gd.clone(),
            self.config.arch.clone(),
            self.config.seed,
        )?;
        let data: Vec<_> = cases
            .iter()
            .map(|c| Ok((&c.flair, &c.t1gd, c.gt()?)))
            .collect::<Result<_>>()?;
        let mut state = None;
        let log = train_decoder(&mut net, &data, config, &mut state, hook)?;
        self.net = Some(net);
        self.optimizer = state;
        self.loss_log = log;
        Ok(&self.loss_log)
    }

    /// DSC of the trained network on the test split.
    pub fn evaluate(&self, ds: &Dataset) -> Result<DscReport> {
        let net = self
            .net
            .as_ref()
            .ok_or_else(|| Error::NotReady("the decoder has not been trained".into()))?;
        evaluate_split(net, ds, Split::Test)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            arch: self.config.arch.clone(),
            encoder_flair: self.encoder_flair.clone(),
            encoder_t1gd: self.encoder_t1gd.clone(),
            annotations: self.annotations.clone(),
            decoder: self.net.as_ref().map(|n| n.decoder.clone()),
            optimizer: self.optimizer.clone(),
            selected: self.selected.clone(),
            markers: self.markers.values().cloned().collect(),
            seed: self.config.seed,
        }
    }

    /// Rebuilds a session from a checkpoint; scores start stale.
    pub fn restore(mut config: SessionConfig, ck: Checkpoint) -> Result<Self> {
        config.arch = ck.arch.clone();
        config.seed = ck.seed;
        let mut s = Session::new(config)?;
        let net = ck.to_net().ok();
        s.selected = ck.selected;
        s.markers = ck
            .markers
            .into_iter()
            .map(|m| (m.image_id.clone(), m))
            .collect();
        s.encoder_flair = ck.encoder_flair;
        s.encoder_t1gd = ck.encoder_t1gd;
        s.annotations = ck.annotations;
        s.net = net;
        s.optimizer = ck.optimizer;
        Ok(s)
    }
}

/// Predicts every case of `split` that has ground truth and reports DSC.
pub fn evaluate_split(net: &SUNet, ds: &Dataset, split: Split) -> Result<DscReport> {
    let cases: Vec<&CaseData> = ds.split(split).filter(|c| c.gt.is_some()).collect();
    if cases.is_empty() {
        return Err(Error::Empty("split with ground truth"));
    }
    let mut ids = Vec::new();
    let mut preds = Vec::new();
    let mut gts = Vec::new();
    for c in cases {
        preds.push(net.predict(&c.flair, &c.t1gd)?);
        gts.push(c.gt()?.clone());
        ids.push(c.id.clone());
    }
    dsc_report(&ids, &preds, &gts)
}
