//! Evaluation: accuracy, prototype fidelity, the Pr table and prototype
//! compactness.

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::explainer::{explain_prototype_in, FeatureBank};
use crate::model::{nearest_target, Aggregation, Model, ModelConfig};

/// Top-1 accuracy in percent.
pub fn accuracy(model: &Model, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::invalid("accuracy over an empty set"));
    }
    let mut hits = 0;
    for s in samples {
        if model.predict(&s.image)? == s.label {
            hits += 1;
        }
    }
    Ok(100.0 * hits as f64 / samples.len() as f64)
}

pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    (na > 0.0 && nb > 0.0).then(|| (dot / (na * nb)).clamp(-1.0, 1.0))
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let ca: Vec<f64> = a.iter().map(|x| x - ma).collect();
    let cb: Vec<f64> = b.iter().map(|x| x - mb).collect();
    cosine(&ca, &cb)
}

/// Generalised Jaccard `Σ min / Σ max`; negatives in `prototype` are clamped
/// to zero.
pub fn jaccard(prototype: &[f64], target: &[f64]) -> Option<f64> {
    let (mut lo, mut hi) = (0.0, 0.0);
    for (&p, &t) in prototype.iter().zip(target) {
        let p = p.max(0.0);
        lo += p.min(t);
        hi += p.max(t);
    }
    (hi > 0.0).then(|| lo / hi)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeFidelity {
    pub class: usize,
    pub index: usize,
    pub cos: Option<f64>,
    pub ed: f64,
    pub pcc: Option<f64>,
    pub js: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FidelityReport {
    pub prototypes: Vec<PrototypeFidelity>,
    pub mean_cos: f64,
    pub mean_ed: f64,
    pub mean_pcc: f64,
    pub mean_js: f64,
    pub undefined_cos: usize,
    pub undefined_pcc: usize,
    pub undefined_js: usize,
}

fn defined_mean(values: impl Iterator<Item = Option<f64>>) -> (f64, usize) {
    let (mut sum, mut n, mut missing) = (0.0, 0usize, 0usize);
    for v in values {
        match v {
            Some(v) => {
                sum += v;
                n += 1;
            }
            None => missing += 1,
        }
    }
    (if n > 0 { sum / n as f64 } else { f64::NAN }, missing)
}

impl FidelityReport {
    pub fn from_prototypes(prototypes: Vec<PrototypeFidelity>) -> Self {
        let (mean_cos, undefined_cos) = defined_mean(prototypes.iter().map(|p| p.cos));
        let (mean_pcc, undefined_pcc) = defined_mean(prototypes.iter().map(|p| p.pcc));
        let (mean_js, undefined_js) = defined_mean(prototypes.iter().map(|p| p.js));
        let (mean_ed, _) = defined_mean(prototypes.iter().map(|p| Some(p.ed)));
        FidelityReport {
            prototypes,
            mean_cos,
            mean_ed,
            mean_pcc,
            mean_js,
            undefined_cos,
            undefined_pcc,
            undefined_js,
        }
    }

    pub fn to_tsv(&self) -> String {
        let cell = |v: Option<f64>| v.map_or("undefined".to_string(), |v| format!("{v:.4}"));
        let mut s = String::from("class\tprototype\tCOS\tED\tPCC\tJS\n");
        for p in &self.prototypes {
            s.push_str(&format!("{}\t{}\t{}\t{:.4}\t{}\t{}\n", p.class, p.index, cell(p.cos), p.ed, cell(p.pcc), cell(p.js)));
        }
        s.push_str(&format!(
            "mean\t-\t{:.4}\t{:.4}\t{:.4}\t{:.4}\n",
            self.mean_cos, self.mean_ed, self.mean_pcc, self.mean_js
        ));
        s.push_str(&format!(
            "undefined\t-\t{}\t0\t{}\t{}\n",
            self.undefined_cos, self.undefined_pcc, self.undefined_js
        ));
        s
    }
}

/// Similarity between every prototype and its nearest same-class target.
pub fn fidelity(model: &Model, train: &[Sample]) -> Result<FidelityReport> {
    fidelity_in(model, &FeatureBank::build(model, train)?)
}

pub fn fidelity_in(model: &Model, bank: &FeatureBank) -> Result<FidelityReport> {
    let cfg = &model.config;
    let mut out = Vec::with_capacity(cfg.num_prototypes());
    for k in 0..cfg.num_classes {
        for u in 0..cfg.prototypes_per_class {
            let p = model.params.prototype(cfg, k, u);
            let hit = nearest_target(&bank.features, &bank.labels, k, p, cfg.comparison)
                .ok_or_else(|| Error::Data(format!("class {k} has no training samples")))?;
            let t = &bank.features[hit.sample].targets(cfg.comparison)[hit.target];
            out.push(PrototypeFidelity {
                class: k,
                index: u,
                cos: cosine(p, t),
                ed: euclidean(p, t),
                pcc: pearson(p, t),
                js: jaccard(p, t),
            });
        }
    }
    Ok(FidelityReport::from_prototypes(out))
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrTable {
    /// Thresholds in percent.
    pub thresholds: Vec<f64>,
    /// Percentage of prototypes whose Pr exceeds each threshold.
    pub percentages: Vec<f64>,
    /// Per prototype (`k·U + u`) precision in `[0,1]`.
    pub precision: Vec<f64>,
}

impl PrTable {
    pub fn from_precision(precision: Vec<f64>, thresholds: &[f64]) -> Self {
        let n = precision.len().max(1) as f64;
        let percentages = thresholds
            .iter()
            .map(|t| 100.0 * precision.iter().filter(|&&p| p > t / 100.0).count() as f64 / n)
            .collect();
        PrTable {
            thresholds: thresholds.to_vec(),
            percentages,
            precision,
        }
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from("threshold\tpercent_of_prototypes\n");
        for (t, p) in self.thresholds.iter().zip(&self.percentages) {
            s.push_str(&format!("{t}\t{p:.2}\n"));
        }
        s
    }
}

/// Foreground fraction inside each prototype's visualisation box.
pub fn precision_table(model: &Model, train: &[Sample], thresholds: &[f64], kappa: f64) -> Result<PrTable> {
    precision_table_in(model, &FeatureBank::build(model, train)?, train, thresholds, kappa)
}

pub fn precision_table_in(
    model: &Model,
    bank: &FeatureBank,
    train: &[Sample],
    thresholds: &[f64],
    kappa: f64,
) -> Result<PrTable> {
    if let Some(s) = train.iter().find(|s| s.mask_missing) {
        return Err(Error::Data(format!("sample {} has no foreground mask; Pr needs real masks", s.id)));
    }
    let cfg = &model.config;
    let mut precision = Vec::with_capacity(cfg.num_prototypes());
    for k in 0..cfg.num_classes {
        for u in 0..cfg.prototypes_per_class {
            let e = explain_prototype_in(model, bank, train, k, u, kappa)?;
            precision.push(e.overlay.bbox.precision(&train[e.sample].mask));
        }
    }
    Ok(PrTable::from_precision(precision, thresholds))
}

/// Number of prototypes that can move each class's logit.
pub fn prototype_compactness(config: &ModelConfig) -> Vec<usize> {
    let per_class = match config.aggregation {
        Aggregation::SingleActivation => 1,
        Aggregation::DenseSum => config.prototypes_per_class,
    };
    vec![per_class; config.num_classes]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ComparisonMode;
    use crate::tensor::Tensor;
    use proptest::prelude::*;

    #[test]
    fn coincidence_and_scaling_cases() {
        let t = [0.2, 0.0, 1.5, 0.7];
        assert_eq!(cosine(&t, &t), Some(1.0));
        assert_eq!(euclidean(&t, &t), 0.0);
        assert!((pearson(&t, &t).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(jaccard(&t, &t), Some(1.0));

        let p: Vec<f64> = t.iter().map(|v| 2.0 * v).collect();
        assert!((cosine(&p, &t).unwrap() - 1.0).abs() < 1e-15);
        assert!((pearson(&p, &t).unwrap() - 1.0).abs() < 1e-15);
        assert!((jaccard(&p, &t).unwrap() - 0.5).abs() < 1e-15);
        let norm = t.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((euclidean(&p, &t) - norm).abs() < 1e-15);
    }

    #[test]
    fn degenerate_vectors_are_undefined() {
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 2.0]), None);
        assert_eq!(pearson(&[3.0, 3.0], &[1.0, 2.0]), None);
        assert_eq!(jaccard(&[-1.0, 0.0], &[0.0, 0.0]), None);
        assert_eq!(jaccard(&[-1.0, 2.0], &[1.0, 2.0]), Some(2.0 / 3.0));
        let r = FidelityReport::from_prototypes(vec![
            PrototypeFidelity { class: 0, index: 0, cos: None, ed: 1.0, pcc: Some(0.5), js: Some(1.0) },
            PrototypeFidelity { class: 0, index: 1, cos: Some(0.8), ed: 3.0, pcc: None, js: Some(0.0) },
        ]);
        assert_eq!((r.mean_cos, r.undefined_cos), (0.8, 1));
        assert_eq!((r.mean_pcc, r.undefined_pcc), (0.5, 1));
        assert_eq!(r.mean_ed, 2.0);
        assert_eq!(r.mean_js, 0.5);
    }

    proptest! {
        #[test]
        fn metric_ranges_and_invariances(
            a in prop::collection::vec(0.0f64..2.0, 6),
            b in prop::collection::vec(0.0f64..2.0, 6),
            s in 0.1f64..10.0,
        ) {
            if let Some(c) = cosine(&a, &b) {
                prop_assert!((-1.0..=1.0).contains(&c));
                let scaled: Vec<f64> = a.iter().map(|v| v * s).collect();
                prop_assert!((cosine(&scaled, &b).unwrap() - c).abs() < 1e-12);
            }
            if let Some(r) = pearson(&a, &b) {
                prop_assert!((-1.0..=1.0).contains(&r));
                let scaled: Vec<f64> = a.iter().map(|v| v * s).collect();
                if let Some(r2) = pearson(&scaled, &b) {
                    prop_assert!((r2 - r).abs() < 1e-9);
                }
            }
            if let Some(j) = jaccard(&a, &b) {
                prop_assert!((0.0..=1.0).contains(&j));
            }
            let sa: Vec<f64> = a.iter().map(|v| v * s).collect();
            let sb: Vec<f64> = b.iter().map(|v| v * s).collect();
            prop_assert!((euclidean(&sa, &sb) - s * euclidean(&a, &b)).abs() < 1e-9);
        }

        #[test]
        fn pr_table_is_non_increasing(pr in prop::collection::vec(0.0f64..=1.0, 1..40)) {
            let t = PrTable::from_precision(pr, &[10.0, 20.0, 30.0, 40.0, 50.0]);
            for w in t.percentages.windows(2) {
                prop_assert!(w[0] >= w[1]);
            }
        }
    }

    #[test]
    fn compactness_per_aggregation() {
        let mut c = ModelConfig::default();
        assert_eq!(prototype_compactness(&c), vec![1; 4]);
        c.aggregation = Aggregation::DenseSum;
        assert_eq!(prototype_compactness(&c), vec![10; 4]);
        c.prototypes_per_class = 1;
        c.aggregation = Aggregation::SingleActivation;
        assert_eq!(prototype_compactness(&c), vec![1; 4]);
    }

    fn toy(mode: ComparisonMode) -> (Model, Vec<Sample>) {
        use rand::{Rng, SeedableRng};
        let cfg = ModelConfig {
            num_classes: 2,
            prototypes_per_class: 2,
            feature_channels: 4,
            feature_height: 3,
            feature_width: 3,
            comparison: mode,
            image_size: 8,
            backbone_channels: vec![4],
            backbone_kernel: 4,
            ..ModelConfig::default()
        };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
        let samples = (0..5)
            .map(|i| Sample {
                image: Tensor::new(vec![3, 8, 8], (0..192).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap(),
                label: i % 2,
                mask: Tensor::new(vec![8, 8], (0..64).map(|j| if j % 3 == 0 { 1.0 } else { 0.0 }).collect()).unwrap(),
                id: format!("t{i}"),
                mask_missing: false,
                part_mask: None,
            })
            .collect();
        (Model::new(cfg, 13).unwrap(), samples)
    }

    #[test]
    fn fidelity_agrees_with_an_independent_search() {
        for mode in [ComparisonMode::FeatureMap, ComparisonMode::FeatureVector] {
            let (m, train) = toy(mode);
            let rep = fidelity(&m, &train).unwrap();
            let cfg = &m.config;
            for f in &rep.prototypes {
                let p = m.params.prototype(cfg, f.class, f.index);
                // second pass: flatten every candidate target, then take the minimum
                let mut cands: Vec<Vec<f64>> = Vec::new();
                for s in train.iter().filter(|s| s.label == f.class) {
                    let maps = m.extract(&s.image).unwrap().maps;
                    let (c1, hw) = (cfg.feature_channels, cfg.map_len());
                    match mode {
                        ComparisonMode::FeatureMap => {
                            for c in 0..c1 {
                                cands.push(maps.data()[c * hw..(c + 1) * hw].to_vec());
                            }
                        }
                        ComparisonMode::FeatureVector => {
                            for pos in 0..hw {
                                cands.push((0..c1).map(|c| maps.data()[c * hw + pos]).collect());
                            }
                        }
                    }
                }
                let best = cands
                    .iter()
                    .min_by(|a, b| euclidean(p, a).total_cmp(&euclidean(p, b)))
                    .unwrap();
                assert_eq!(f.ed, euclidean(p, best));
                assert_eq!(f.cos, cosine(p, best));
            }
        }
    }

    #[test]
    fn pr_needs_masks_and_stays_in_range() {
        let (m, mut train) = toy(ComparisonMode::FeatureMap);
        let t = precision_table(&m, &train, &[10.0, 50.0], 95.0).unwrap();
        assert_eq!(t.precision.len(), 4);
        assert!(t.precision.iter().all(|p| (0.0..=1.0).contains(p)));
        train[1].mask_missing = true;
        assert!(precision_table(&m, &train, &[10.0], 95.0).is_err());
    }

    #[test]
    fn accuracy_of_a_constant_predictor() {
        let (mut m, train) = toy(ComparisonMode::FeatureMap);
        // logits = [big, 0]: always class 0
        m.params.fc = Tensor::new(vec![2, 2], vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        let acc = accuracy(&m, &train).unwrap();
        assert_eq!(acc, 60.0);
        assert!(accuracy(&m, &[]).is_err());
    }
}
