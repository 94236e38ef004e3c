//! Phased optimisation, optional prototype projection and the per-epoch log.
//!
//! Phases run in order: warm (shaping network and prototypes), joint
//! (backbone, shaping network and prototypes), then head-only training of
//! the FC layer against `L_crs + λ3 L_w`. When projection is enabled it
//! happens once, between the joint and head phases.

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::Graph;
use crate::data::{augment, Sample};
use crate::error::{Error, Result};
use crate::losses::{self, batch_loss_graph, head_loss_graph, LossBreakdown, LossWeights, Objective, SeparationSign};
use crate::model::{nearest_target, FeatureStack, Model, Trainable};
use crate::optim::Adam;
use crate::tensor::{argmax_slice, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Projection {
    #[default]
    None,
    Project,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub warm_epochs: usize,
    pub joint_epochs: usize,
    pub fc_epochs: usize,
    pub warm_lr: f64,
    pub joint_lr: f64,
    pub fc_lr: f64,
    pub batch_size: usize,
    pub fc_batch_size: usize,
    pub seed: u64,
    pub projection: Projection,
    pub loss_weights: LossWeights,
    pub separation_sign: SeparationSign,
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            warm_epochs: 5,
            joint_epochs: 30,
            fc_epochs: 10,
            warm_lr: 3e-3,
            joint_lr: 1e-3,
            fc_lr: 1e-3,
            batch_size: 2,
            fc_batch_size: 8,
            seed: 0,
            projection: Projection::None,
            loss_weights: LossWeights::default(),
            separation_sign: SeparationSign::Repel,
            augment: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.fc_batch_size == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        for (name, lr) in [("warm_lr", self.warm_lr), ("joint_lr", self.joint_lr), ("fc_lr", self.fc_lr)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("{name} must be a positive finite number, got {lr}")));
            }
        }
        Ok(())
    }

    pub fn total_epochs(&self) -> usize {
        self.warm_epochs + self.joint_epochs + self.fc_epochs
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Warm,
    Joint,
    Fc,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Warm => "warm",
            Phase::Joint => "joint",
            Phase::Fc => "fc",
        })
    }
}

impl Phase {
    fn trainable(self) -> Trainable {
        match self {
            Phase::Warm => Trainable {
                shaping: true,
                prototypes: true,
                ..Trainable::NONE
            },
            Phase::Joint => Trainable {
                backbone: true,
                shaping: true,
                prototypes: true,
                fc: false,
            },
            Phase::Fc => Trainable {
                fc: true,
                ..Trainable::NONE
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub phase: Phase,
    pub losses: LossBreakdown,
    /// Percentage of training samples classified correctly during the epoch.
    pub train_acc: f64,
}

impl EpochLog {
    pub const HEADER: &'static str = "epoch\tphase\tL_crs\tL_clst\tL_sep\tL_w\tL_total\ttrain_acc";

    pub fn to_tsv(&self) -> String {
        let l = &self.losses;
        format!(
            "{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.2}",
            self.epoch, self.phase, l.crs, l.clst, l.sep, l.w, l.total, self.train_acc
        )
    }
}

pub fn log_to_tsv(log: &[EpochLog]) -> String {
    let mut s = String::from(EpochLog::HEADER);
    s.push('\n');
    for row in log {
        s.push_str(&row.to_tsv());
        s.push('\n');
    }
    s
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProjectedPrototype {
    pub class: usize,
    pub index: usize,
    pub sample_id: String,
    /// Channel or flat position copied into the prototype.
    pub target: usize,
    pub sq_distance_before: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ProjectionReport {
    pub entries: Vec<ProjectedPrototype>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub log: Vec<EpochLog>,
    pub projection: Option<ProjectionReport>,
}

impl TrainOutcome {
    pub fn final_losses(&self) -> LossBreakdown {
        self.log.last().map(|r| r.losses).unwrap_or_default()
    }
}

/// Drives one run; owns the shuffling/augmentation stream.
#[derive(Clone)]
pub struct Trainer<'a> {
    config: &'a TrainConfig,
    rng: ChaCha8Rng,
    epoch: usize,
}

fn check_finite(b: &LossBreakdown, epoch: usize, phase: Phase) -> Result<()> {
    for (name, v) in b.terms() {
        // terms outside the phase objective are NaN by construction
        if phase == Phase::Fc && (name == "L_clst" || name == "L_sep") {
            continue;
        }
        if !v.is_finite() {
            return Err(Error::Divergence {
                epoch,
                phase: phase.to_string(),
                term: name.to_string(),
            });
        }
    }
    Ok(())
}

fn group_of(name: &str) -> &str {
    name.split('.').next().unwrap_or(name)
}

fn is_trainable(t: Trainable, name: &str) -> bool {
    match group_of(name) {
        "backbone" => t.backbone,
        "shaping" => t.shaping,
        "prototypes" => t.prototypes,
        "fc" => t.fc,
        _ => false,
    }
}

fn correct(g: &Graph, logits: &[crate::autograd::Var], labels: impl Iterator<Item = usize>) -> usize {
    logits
        .iter()
        .zip(labels)
        .filter(|(l, y)| argmax_slice(g.value(**l).data()).map(|(_, i)| i) == Some(*y))
        .count()
}

impl<'a> Trainer<'a> {
    pub fn new(config: &'a TrainConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        Trainer { config, rng, epoch: 0 }
    }

    pub fn epochs_completed(&self) -> usize {
        self.epoch
    }

    fn check_data(&self, train: &[Sample], model: &Model) -> Result<()> {
        if train.is_empty() {
            return Err(Error::Data("training set is empty".into()));
        }
        if model.config.num_classes < 2 {
            return Err(Error::Config("training needs at least two classes (separation loss)".into()));
        }
        if let Some(s) = train.iter().find(|s| s.label >= model.config.num_classes) {
            return Err(Error::Data(format!(
                "sample {} has label {} but the model has {} classes",
                s.id, s.label, model.config.num_classes
            )));
        }
        self.config.validate()
    }

    /// Warm then joint phases.
    pub fn train_features(&mut self, train: &[Sample], model: &mut Model) -> Result<Vec<EpochLog>> {
        self.check_data(train, model)?;
        let mut log = Vec::new();
        for (phase, epochs, lr) in [
            (Phase::Warm, self.config.warm_epochs, self.config.warm_lr),
            (Phase::Joint, self.config.joint_epochs, self.config.joint_lr),
        ] {
            let trainable = phase.trainable();
            let sizes: Vec<usize> = model
                .params
                .named()
                .into_iter()
                .filter(|(n, _)| is_trainable(trainable, n))
                .map(|(_, t)| t.len())
                .collect();
            let mut opt = Adam::new(lr, &sizes);
            for _ in 0..epochs {
                self.epoch += 1;
                log.push(self.feature_epoch(train, model, phase, &mut opt)?);
            }
        }
        Ok(log)
    }

    fn feature_epoch(&mut self, train: &[Sample], model: &mut Model, phase: Phase, opt: &mut Adam) -> Result<EpochLog> {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut self.rng);
        let mut sums = LossBreakdown::default();
        let mut hits = 0;
        let trainable = phase.trainable();
        for chunk in order.chunks(self.config.batch_size) {
            let images: Vec<Tensor> = chunk
                .iter()
                .map(|&i| {
                    if self.config.augment {
                        augment(&train[i], &mut self.rng).image
                    } else {
                        train[i].image.clone()
                    }
                })
                .collect();
            let batch: Vec<(&Tensor, usize)> = images.iter().zip(chunk).map(|(x, &i)| (x, train[i].label)).collect();

            let mut g = Graph::new();
            let vars = model.bind(&mut g, trainable);
            let lv = batch_loss_graph(
                &mut g,
                model,
                &vars,
                &batch,
                &self.config.loss_weights,
                self.config.separation_sign,
                Objective::Total,
            )?;
            let b = lv.breakdown(&g);
            check_finite(&b, self.epoch, phase)?;
            hits += correct(&g, &lv.logits, chunk.iter().map(|&i| train[i].label));
            accumulate(&mut sums, &b, chunk.len());

            let grads = g.backward(lv.total)?;
            let var_names = vars.named();
            let mut params: Vec<&mut Tensor> = Vec::new();
            let mut gs: Vec<&Tensor> = Vec::new();
            for ((name, t), (_, v)) in model.params.named_mut().into_iter().zip(&var_names) {
                if is_trainable(trainable, &name) {
                    params.push(t);
                    gs.push(grads.get(*v).expect("trainable parameter has a gradient"));
                }
            }
            opt.step(&mut params, &gs);
        }
        Ok(EpochLog {
            epoch: self.epoch,
            phase,
            losses: scale(&sums, 1.0 / train.len() as f64),
            train_acc: 100.0 * hits as f64 / train.len() as f64,
        })
    }

    /// Head-only phase on cached scores of the un-augmented training set.
    pub fn train_head(&mut self, train: &[Sample], model: &mut Model) -> Result<Vec<EpochLog>> {
        self.check_data(train, model)?;
        let features: Vec<FeatureStack> = train.iter().map(|s| model.extract(&s.image)).collect::<Result<_>>()?;
        let tables = features
            .iter()
            .map(|f| model.prototype_scores(f))
            .collect::<Result<Vec<_>>>()?;
        let labels: Vec<usize> = train.iter().map(|s| s.label).collect();
        let clst = losses::cluster_loss(&features, &labels, &model.params.prototypes, &model.config)?;
        let sep = losses::separation_loss(&features, &labels, &model.params.prototypes, &model.config)?;
        let flat: Vec<Tensor> = tables
            .iter()
            .map(|t| t.scores.reshape(&[t.scores.len()]))
            .collect::<Result<_>>()?;

        let mut opt = Adam::new(self.config.fc_lr, &[model.params.fc.len()]);
        let mut log = Vec::new();
        for _ in 0..self.config.fc_epochs {
            self.epoch += 1;
            let mut order: Vec<usize> = (0..train.len()).collect();
            order.shuffle(&mut self.rng);
            let mut sums = LossBreakdown::default();
            let mut hits = 0;
            for chunk in order.chunks(self.config.fc_batch_size) {
                let cached: Vec<(&Tensor, &Tensor, usize)> =
                    chunk.iter().map(|&i| (&flat[i], &tables[i].class_max, labels[i])).collect();
                let mut g = Graph::new();
                let fc = g.param(model.params.fc.clone());
                let lv = head_loss_graph(&mut g, &model.config, fc, &cached, self.config.loss_weights.lambda3)?;
                let b = lv.breakdown(&g);
                check_finite(&b, self.epoch, Phase::Fc)?;
                hits += correct(&g, &lv.logits, chunk.iter().map(|&i| labels[i]));
                accumulate(&mut sums, &b, chunk.len());
                let grads = g.backward(lv.total)?;
                opt.step(&mut [&mut model.params.fc], &[grads.get(fc).expect("fc gradient")]);
            }
            let mut losses = scale(&sums, 1.0 / train.len() as f64);
            losses.clst = clst;
            losses.sep = sep;
            // report the head-phase total with the frozen prototype terms included
            losses.total = losses.crs
                + self.config.loss_weights.lambda1 * clst
                + self.config.separation_sign.distance_coefficient(self.config.loss_weights.lambda2) * -sep
                + self.config.loss_weights.lambda3 * losses.w;
            log.push(EpochLog {
                epoch: self.epoch,
                phase: Phase::Fc,
                losses,
                train_acc: 100.0 * hits as f64 / train.len() as f64,
            });
        }
        Ok(log)
    }
}

fn accumulate(sums: &mut LossBreakdown, b: &LossBreakdown, n: usize) {
    let n = n as f64;
    sums.crs += b.crs * n;
    sums.clst += b.clst * n;
    sums.sep += b.sep * n;
    // batch independent
    sums.w += b.w * n;
    sums.total += b.total * n;
}

fn scale(b: &LossBreakdown, f: f64) -> LossBreakdown {
    LossBreakdown {
        crs: b.crs * f,
        clst: b.clst * f,
        sep: b.sep * f,
        w: b.w * f,
        total: b.total * f,
    }
}

/// Replace every prototype with its nearest same-class training target.
pub fn project_prototypes(model: &mut Model, train: &[Sample]) -> Result<ProjectionReport> {
    let features: Vec<FeatureStack> = train.iter().map(|s| model.extract(&s.image)).collect::<Result<_>>()?;
    let labels: Vec<usize> = train.iter().map(|s| s.label).collect();
    project_with_features(model, &features, &labels, &train.iter().map(|s| s.id.clone()).collect::<Vec<_>>())
}

/// Projection against precomputed training features.
pub fn project_with_features(
    model: &mut Model,
    features: &[FeatureStack],
    labels: &[usize],
    ids: &[String],
) -> Result<ProjectionReport> {
    let cfg = model.config.clone();
    let mut entries = Vec::with_capacity(cfg.num_prototypes());
    let mut replacements = Vec::with_capacity(cfg.num_prototypes());
    for k in 0..cfg.num_classes {
        for u in 0..cfg.prototypes_per_class {
            let p = model.params.prototype(&cfg, k, u);
            let hit = nearest_target(features, labels, k, p, cfg.comparison)
                .ok_or_else(|| Error::Data(format!("class {k} has no training samples to project onto")))?;
            let target = features[hit.sample].targets(cfg.comparison).swap_remove(hit.target);
            replacements.push((k * cfg.prototypes_per_class + u, target));
            entries.push(ProjectedPrototype {
                class: k,
                index: u,
                sample_id: ids[hit.sample].clone(),
                target: hit.target,
                sq_distance_before: hit.sq_distance,
            });
        }
    }
    let width = cfg.prototype_len();
    for (row, target) in replacements {
        model.params.prototypes.data_mut()[row * width..(row + 1) * width].copy_from_slice(&target);
    }
    Ok(ProjectionReport { entries })
}

/// Run every phase; projection, when configured, sits between joint and head.
pub fn train(train_set: &[Sample], model: &mut Model, config: &TrainConfig) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(config);
    let mut log = trainer.train_features(train_set, model)?;
    let projection = match config.projection {
        Projection::Project => Some(project_prototypes(model, train_set)?),
        Projection::None => None,
    };
    log.extend(trainer.train_head(train_set, model)?);
    Ok(TrainOutcome { log, projection })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, DatasetSpec};
    use crate::model::{ComparisonMode, ModelConfig};

    fn tiny() -> (Vec<Sample>, ModelConfig, TrainConfig) {
        let spec = DatasetSpec {
            num_classes: 2,
            per_class: 6,
            image_size: 32,
            seed: 1,
            train_fraction: 0.5,
        };
        let (train, _) = generate(&spec).unwrap();
        let cfg = ModelConfig {
            num_classes: 2,
            prototypes_per_class: 2,
            feature_channels: 4,
            feature_height: 2,
            feature_width: 2,
            image_size: 32,
            backbone_channels: vec![4, 4, 4, 4],
            ..ModelConfig::default()
        };
        let tc = TrainConfig {
            warm_epochs: 1,
            joint_epochs: 1,
            fc_epochs: 2,
            batch_size: 4,
            ..TrainConfig::default()
        };
        (train, cfg, tc)
    }

    #[test]
    fn identical_seeds_give_identical_models() {
        let (train, cfg, tc) = tiny();
        let mut a = Model::new(cfg.clone(), 3).unwrap();
        let mut b = Model::new(cfg, 3).unwrap();
        let la = super::train(&train, &mut a, &tc).unwrap();
        let lb = super::train(&train, &mut b, &tc).unwrap();
        assert_eq!(a, b);
        assert_eq!(la, lb);
        assert_eq!(la.log.len(), 4);
        assert_eq!(la.log.iter().map(|r| r.phase).collect::<Vec<_>>(), vec![Phase::Warm, Phase::Joint, Phase::Fc, Phase::Fc]);
    }

    #[test]
    fn phases_freeze_the_right_groups() {
        let (train, cfg, tc) = tiny();
        let start = Model::new(cfg, 4).unwrap();
        let mut m = start.clone();
        let tc = TrainConfig { joint_epochs: 0, fc_epochs: 0, ..tc };
        super::train(&train, &mut m, &tc).unwrap();
        assert_eq!(m.params.backbone, start.params.backbone);
        assert_eq!(m.params.fc, start.params.fc);
        assert_ne!(m.params.prototypes, start.params.prototypes);
        assert_ne!(m.params.shaping, start.params.shaping);

        let mut h = start.clone();
        let tc = TrainConfig { warm_epochs: 0, joint_epochs: 0, fc_epochs: 1, ..tc };
        super::train(&train, &mut h, &tc).unwrap();
        assert_eq!(h.params.prototypes, start.params.prototypes);
        assert_eq!(h.params.backbone, start.params.backbone);
        assert_ne!(h.params.fc, start.params.fc);
    }

    #[test]
    fn single_class_is_rejected() {
        let (train, cfg, tc) = tiny();
        let one: Vec<Sample> = train.into_iter().filter(|s| s.label == 0).collect();
        let cfg = ModelConfig { num_classes: 1, ..cfg };
        let mut m = Model::new(cfg, 0).unwrap();
        let tc = TrainConfig {
            loss_weights: LossWeights { lambda1: 0.0, lambda2: 0.0, ..LossWeights::default() },
            ..tc
        };
        assert!(super::train(&one, &mut m, &tc).is_err());
    }

    #[test]
    fn divergence_names_the_term() {
        let (train, cfg, tc) = tiny();
        let mut m = Model::new(cfg, 0).unwrap();
        m.params.fc.data_mut()[0] = f64::NAN;
        let err = super::train(&train, &mut m, &tc).unwrap_err();
        match err {
            Error::Divergence { epoch, phase, term } => {
                assert_eq!(epoch, 1);
                assert_eq!(phase, "warm");
                assert_eq!(term, "L_crs");
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn projection_reaches_zero_distance_and_matches_brute_force() {
        let (train, cfg, _) = tiny();
        let toy: Vec<Sample> = train.iter().filter(|s| s.label == 0).take(2).cloned().collect();
        let cfg = ModelConfig { feature_channels: 3, ..cfg };
        let mut m = Model::new(cfg.clone(), 9).unwrap();
        let before = m.clone();
        // class 1 needs samples too: reuse the two images relabelled
        let mut data = toy.clone();
        data.extend(toy.iter().map(|s| Sample { label: 1, id: format!("{}-b", s.id), ..s.clone() }));
        let report = project_prototypes(&mut m, &data).unwrap();
        assert_eq!(report.entries.len(), cfg.num_prototypes());

        let feats: Vec<FeatureStack> = data.iter().map(|s| m.extract(&s.image).unwrap()).collect();
        for e in &report.entries {
            // brute force over (j, c)
            let p = before.params.prototype(&cfg, e.class, e.index);
            let mut best = (f64::INFINITY, 0, 0);
            for (j, s) in data.iter().enumerate() {
                if s.label != e.class {
                    continue;
                }
                for c in 0..cfg.feature_channels {
                    let d: f64 = feats[j].channel(c).iter().zip(p).map(|(a, b)| (a - b).powi(2)).sum();
                    if d < best.0 {
                        best = (d, j, c);
                    }
                }
            }
            assert_eq!(e.sample_id, data[best.1].id);
            assert_eq!(e.target, best.2);
            assert_eq!(e.sq_distance_before, best.0);
            let now = m.params.prototype(&cfg, e.class, e.index);
            assert_eq!(now, feats[best.1].channel(best.2));
        }

        // fixed point: projecting again changes nothing
        let snapshot = m.clone();
        let again = project_prototypes(&mut m, &data).unwrap();
        assert_eq!(m, snapshot);
        assert!(again.entries.iter().all(|e| e.sq_distance_before == 0.0));
    }

    #[test]
    fn projection_in_vector_mode_and_empty_class() {
        let (train, cfg, _) = tiny();
        let cfg = ModelConfig { comparison: ComparisonMode::FeatureVector, ..cfg };
        let mut m = Model::new(cfg, 2).unwrap();
        project_prototypes(&mut m, &train).unwrap();
        let feats: Vec<FeatureStack> = train.iter().map(|s| m.extract(&s.image).unwrap()).collect();
        let labels: Vec<usize> = train.iter().map(|s| s.label).collect();
        for k in 0..2 {
            for u in 0..2 {
                let hit = nearest_target(&feats, &labels, k, m.params.prototype(&m.config, k, u), m.config.comparison).unwrap();
                assert_eq!(hit.sq_distance, 0.0);
            }
        }
        let only0: Vec<Sample> = train.into_iter().filter(|s| s.label == 0).collect();
        assert!(project_prototypes(&mut m, &only0).is_err());
    }

    #[test]
    fn log_rows_are_tab_separated() {
        let row = EpochLog {
            epoch: 3,
            phase: Phase::Joint,
            losses: LossBreakdown { crs: 0.5, clst: 0.25, sep: -1.0, w: 1.5, total: 0.9 },
            train_acc: 87.5,
        };
        let line = row.to_tsv();
        assert_eq!(line.split('\t').count(), 8);
        assert!(line.starts_with("3\tjoint\t0.500000"));
        assert_eq!(EpochLog::HEADER.split('\t').count(), 8);
    }
}
