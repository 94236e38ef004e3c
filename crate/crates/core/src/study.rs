//! Multi-variant runs for the projection and ablation studies. Variants that
//! share an architecture share their warm and joint phases; each then forks
//! the trainer state for its own projection choice and head phase.

use std::fmt::Write as _;
use std::time::Instant;

use crate::config::RunConfig;
use crate::data::Sample;
use crate::error::Result;
use crate::metrics::accuracy;
use crate::model::{Aggregation, ComparisonMode, Model};
use crate::trainer::{project_prototypes, Projection, TrainOutcome, Trainer};

#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    pub label: String,
    pub comparison: ComparisonMode,
    pub aggregation: Aggregation,
    pub prototypes_per_class: usize,
    pub projection: Projection,
}

impl Variant {
    pub fn new(label: &str, comparison: ComparisonMode, aggregation: Aggregation, u: usize, projection: Projection) -> Self {
        Variant {
            label: label.to_string(),
            comparison,
            aggregation,
            prototypes_per_class: u,
            projection,
        }
    }

    fn architecture(&self) -> (ComparisonMode, Aggregation, usize) {
        (self.comparison, self.aggregation, self.prototypes_per_class)
    }

    pub fn apply(&self, rc: &RunConfig) -> RunConfig {
        let mut c = rc.clone();
        c.model.comparison = self.comparison;
        c.model.aggregation = self.aggregation;
        c.model.prototypes_per_class = self.prototypes_per_class;
        c.train.projection = self.projection;
        c
    }
}

/// The four ablation rows: vector baseline with one prototype per class,
/// then single activation, feature-map comparison and non-projection added
/// in turn. `u` is the prototype count for rows 2 to 4.
pub fn ablation_variants(u: usize) -> Vec<Variant> {
    use Aggregation::*;
    use ComparisonMode::*;
    vec![
        Variant::new("vec+dense+P (U=1)", FeatureVector, DenseSum, 1, Projection::Project),
        Variant::new("vec+SA+P", FeatureVector, SingleActivation, u, Projection::Project),
        Variant::new("FMC+SA+P", FeatureMap, SingleActivation, u, Projection::Project),
        Variant::new("FMC+SA+NP", FeatureMap, SingleActivation, u, Projection::None),
    ]
}

#[derive(Clone, Debug)]
pub struct ArmResult {
    pub variant: Variant,
    pub seed: u64,
    pub model: Model,
    pub outcome: TrainOutcome,
    pub test_accuracy: f64,
    /// Wall time of the full schedule, shared phases included.
    pub seconds: f64,
}

/// Train every variant on one split, sharing feature phases where possible.
pub fn run_variants(rc: &RunConfig, variants: &[Variant], train: &[Sample], test: &[Sample]) -> Result<Vec<ArmResult>> {
    let mut out: Vec<Option<ArmResult>> = vec![None; variants.len()];
    for (i, v) in variants.iter().enumerate() {
        if out[i].is_some() {
            continue;
        }
        let cfg = v.apply(rc);
        cfg.validate()?;
        let start = Instant::now();
        let mut model = Model::new(cfg.model.clone(), cfg.train.seed)?;
        let mut trainer = Trainer::new(&cfg.train);
        let feature_log = trainer.train_features(train, &mut model)?;
        let shared = start.elapsed().as_secs_f64();
        for (j, w) in variants.iter().enumerate().skip(i) {
            if w.architecture() != v.architecture() || out[j].is_some() {
                continue;
            }
            let t0 = Instant::now();
            let mut m = model.clone();
            let mut t = trainer.clone();
            let projection = match w.projection {
                Projection::Project => Some(project_prototypes(&mut m, train)?),
                Projection::None => None,
            };
            let mut log = feature_log.clone();
            log.extend(t.train_head(train, &mut m)?);
            let test_accuracy = accuracy(&m, test)?;
            out[j] = Some(ArmResult {
                variant: w.clone(),
                seed: rc.train.seed,
                model: m,
                outcome: TrainOutcome { log, projection },
                test_accuracy,
                seconds: shared + t0.elapsed().as_secs_f64(),
            });
        }
    }
    Ok(out.into_iter().map(|r| r.expect("every variant trained")).collect())
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Accuracy table: one row per variant, one column per seed, then mean and
/// spread.
pub fn accuracy_table(results: &[ArmResult]) -> String {
    let mut labels: Vec<&str> = Vec::new();
    let mut seeds: Vec<u64> = Vec::new();
    for r in results {
        if !labels.contains(&r.variant.label.as_str()) {
            labels.push(&r.variant.label);
        }
        if !seeds.contains(&r.seed) {
            seeds.push(r.seed);
        }
    }
    let mut s = String::from("variant");
    for seed in &seeds {
        let _ = write!(s, "\tseed_{seed}");
    }
    s.push_str("\tmean\tstd\n");
    for label in labels {
        let accs: Vec<f64> = seeds
            .iter()
            .filter_map(|seed| results.iter().find(|r| r.variant.label == label && r.seed == *seed))
            .map(|r| r.test_accuracy)
            .collect();
        let (m, sd) = mean_std(&accs);
        s.push_str(label);
        for a in &accs {
            let _ = write!(s, "\t{a:.2}");
        }
        let _ = writeln!(s, "\t{m:.2}\t{sd:.2}");
    }
    s
}
