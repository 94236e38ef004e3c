//! Cross-entropy, cluster, separation and weight-factor losses and their
//! weighted total.

use std::fmt;
use std::str::FromStr;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::model::{Aggregation, FeatureStack, Model, ModelConfig, ParamVars};
use crate::tensor::{self, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 0.8,
            lambda2: -0.08,
            lambda3: 1e-4,
        }
    }
}

/// How the separation term enters the minimised total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SeparationSign {
    /// `lambda2 * L_sep` taken literally.
    Paper,
    /// `-|lambda2| * mean min distance`, which always pushes heterogeneous
    /// prototypes away.
    #[default]
    Repel,
}

impl SeparationSign {
    /// Coefficient multiplying the batch-mean minimum heterogeneous distance.
    pub fn distance_coefficient(self, lambda2: f64) -> f64 {
        match self {
            SeparationSign::Paper => -lambda2,
            SeparationSign::Repel => -lambda2.abs(),
        }
    }
}

impl fmt::Display for SeparationSign {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SeparationSign::Paper => "paper",
            SeparationSign::Repel => "repel",
        })
    }
}

impl FromStr for SeparationSign {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(SeparationSign::Paper),
            "repel" => Ok(SeparationSign::Repel),
            _ => Err(Error::Config(format!("unknown separation_sign '{s}' (expected paper or repel)"))),
        }
    }
}

/// Loss values for one evaluation, each term reported unweighted.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub crs: f64,
    pub clst: f64,
    pub sep: f64,
    pub w: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn terms(&self) -> [(&'static str, f64); 5] {
        [
            ("L_crs", self.crs),
            ("L_clst", self.clst),
            ("L_sep", self.sep),
            ("L_w", self.w),
            ("L_total", self.total),
        ]
    }
}

fn check_batch(features: &[FeatureStack], labels: &[usize], config: &ModelConfig) -> Result<()> {
    if features.is_empty() {
        return Err(Error::invalid("loss over an empty batch"));
    }
    if features.len() != labels.len() {
        return Err(Error::invalid(format!(
            "{} feature stacks but {} labels",
            features.len(),
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= config.num_classes) {
        return Err(Error::invalid(format!("label {bad} out of range for {} classes", config.num_classes)));
    }
    Ok(())
}

fn min_distance_to_classes(
    fs: &FeatureStack,
    prototypes: &Tensor,
    config: &ModelConfig,
    include: impl Fn(usize) -> bool,
) -> f64 {
    let targets = fs.targets(config.comparison);
    let mut best = f64::INFINITY;
    for k in (0..config.num_classes).filter(|&k| include(k)) {
        for u in 0..config.prototypes_per_class {
            let p = prototypes.row(k * config.prototypes_per_class + u);
            for t in &targets {
                best = best.min(tensor::sq_l2(t, p));
            }
        }
    }
    best
}

/// Batch mean of the squared distance from each sample's nearest target to
/// its nearest same-class prototype.
pub fn cluster_loss(features: &[FeatureStack], labels: &[usize], prototypes: &Tensor, config: &ModelConfig) -> Result<f64> {
    check_batch(features, labels, config)?;
    let sum: f64 = features
        .iter()
        .zip(labels)
        .map(|(fs, &y)| min_distance_to_classes(fs, prototypes, config, |k| k == y))
        .sum();
    Ok(sum / features.len() as f64)
}

/// Negative batch mean of the squared distance to the nearest prototype of
/// any other class.
pub fn separation_loss(features: &[FeatureStack], labels: &[usize], prototypes: &Tensor, config: &ModelConfig) -> Result<f64> {
    check_batch(features, labels, config)?;
    if config.num_classes < 2 {
        return Err(Error::invalid("separation loss needs at least two classes"));
    }
    let sum: f64 = features
        .iter()
        .zip(labels)
        .map(|(fs, &y)| min_distance_to_classes(fs, prototypes, config, |k| k != y))
        .sum();
    Ok(-(sum / features.len() as f64))
}

/// Sum of absolute off-diagonal entries of a square FC matrix.
pub fn weight_factor_loss(fc: &Tensor) -> Result<f64> {
    match *fc.shape() {
        [r, c] if r == c => {}
        _ => return Err(Error::shape(format!("weight factor loss needs a square matrix, got {:?}", fc.shape()))),
    }
    Ok(cross_class_abs_sum(fc, |col| col))
}

fn cross_class_abs_sum(fc: &Tensor, column_class: impl Fn(usize) -> usize) -> f64 {
    let cols = fc.shape()[1];
    let mut s = 0.0;
    for (i, &w) in fc.data().iter().enumerate() {
        if column_class(i % cols) != i / cols {
            s += w.abs();
        }
    }
    s
}

/// `L_w` for either head: off-diagonal entries of the `[K,K]` matrix, or
/// every connection from a class logit to another class's prototype.
pub fn weight_loss_for(config: &ModelConfig, fc: &Tensor) -> Result<f64> {
    match config.aggregation {
        Aggregation::SingleActivation => weight_factor_loss(fc),
        Aggregation::DenseSum => Ok(cross_class_abs_sum(fc, |c| config.fc_column_class(c))),
    }
}

fn cross_class_mask(config: &ModelConfig) -> Tensor {
    let [rows, cols] = config.fc_shape();
    let mut m = Tensor::zeros(&[rows, cols]);
    for t in 0..rows {
        for c in 0..cols {
            if config.fc_column_class(c) != t {
                m.set(&[t, c], 1.0);
            }
        }
    }
    m
}

/// Which terms a training phase optimises.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    /// `L_crs + λ1 L_clst + λ2 L_sep + λ3 L_w`.
    Total,
    /// `L_crs + λ3 L_w`.
    HeadOnly,
}

/// Graph handles for a batch loss.
#[derive(Clone, Debug)]
pub struct LossVars {
    pub total: Var,
    pub crs: Var,
    pub clst: Option<Var>,
    pub sep: Option<Var>,
    pub w: Var,
    pub logits: Vec<Var>,
}

impl LossVars {
    pub fn breakdown(&self, g: &Graph) -> LossBreakdown {
        LossBreakdown {
            crs: g.value(self.crs).item(),
            clst: self.clst.map_or(f64::NAN, |v| g.value(v).item()),
            sep: self.sep.map_or(f64::NAN, |v| -g.value(v).item()),
            w: g.value(self.w).item(),
            total: g.value(self.total).item(),
        }
    }
}

fn mean(g: &mut Graph, terms: &[Var]) -> Result<Var> {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t)?;
    }
    Ok(g.scale(acc, 1.0 / terms.len() as f64))
}

fn class_rows(config: &ModelConfig, include: impl Fn(usize) -> bool) -> Vec<usize> {
    let u = config.prototypes_per_class;
    (0..config.num_classes)
        .filter(|&k| include(k))
        .flat_map(|k| k * u..(k + 1) * u)
        .collect()
}

fn weight_term(g: &mut Graph, config: &ModelConfig, fc: Var) -> Result<Var> {
    let mask = g.constant(cross_class_mask(config));
    let masked = g.mul(fc, mask)?;
    let a = g.abs(masked);
    Ok(g.sum(a))
}

/// Record the batch objective on `g`. `sep` holds the batch-mean minimum
/// heterogeneous distance (the negation of `L_sep`).
pub fn batch_loss_graph(
    g: &mut Graph,
    model: &Model,
    vars: &ParamVars,
    batch: &[(&Tensor, usize)],
    weights: &LossWeights,
    sign: SeparationSign,
    objective: Objective,
) -> Result<LossVars> {
    let config = &model.config;
    if batch.is_empty() {
        return Err(Error::invalid("loss over an empty batch"));
    }
    if objective == Objective::Total && config.num_classes < 2 {
        return Err(Error::invalid("separation loss needs at least two classes"));
    }
    let mut ce = Vec::with_capacity(batch.len());
    let mut clst = Vec::new();
    let mut sep = Vec::new();
    let mut logits = Vec::with_capacity(batch.len());
    for &(image, label) in batch {
        if label >= config.num_classes {
            return Err(Error::invalid(format!("label {label} out of range for {} classes", config.num_classes)));
        }
        let x = g.constant(image.clone());
        let fv = model.forward_graph(g, vars, x)?;
        logits.push(fv.logits);
        ce.push(g.softmax_cross_entropy(fv.logits, label)?);
        if objective == Objective::Total {
            let own = g.gather_rows(fv.distances, &class_rows(config, |k| k == label))?;
            clst.push(g.min_all(own)?);
            let other = g.gather_rows(fv.distances, &class_rows(config, |k| k != label))?;
            sep.push(g.min_all(other)?);
        }
    }
    let crs = mean(g, &ce)?;
    let w = weight_term(g, config, vars.fc)?;
    let w_term = g.scale(w, weights.lambda3);
    let mut total = g.add(crs, w_term)?;
    let (clst_v, sep_v) = if objective == Objective::Total {
        let c = mean(g, &clst)?;
        let s = mean(g, &sep)?;
        let ct = g.scale(c, weights.lambda1);
        let st = g.scale(s, sign.distance_coefficient(weights.lambda2));
        total = g.add(total, ct)?;
        total = g.add(total, st)?;
        (Some(c), Some(s))
    } else {
        (None, None)
    };
    Ok(LossVars {
        total,
        crs,
        clst: clst_v,
        sep: sep_v,
        w,
        logits,
    })
}

/// Head-only objective from precomputed scores: each entry is
/// `(prototype scores [K·U], class maxima [K], label)`.
pub fn head_loss_graph(
    g: &mut Graph,
    config: &ModelConfig,
    fc: Var,
    cached: &[(&Tensor, &Tensor, usize)],
    lambda3: f64,
) -> Result<LossVars> {
    if cached.is_empty() {
        return Err(Error::invalid("loss over an empty batch"));
    }
    let mut ce = Vec::with_capacity(cached.len());
    let mut logits = Vec::with_capacity(cached.len());
    for &(scores, class_max, label) in cached {
        let input = match config.aggregation {
            Aggregation::SingleActivation => g.constant(class_max.clone()),
            Aggregation::DenseSum => g.constant(scores.clone()),
        };
        let l = g.matvec(fc, input)?;
        logits.push(l);
        ce.push(g.softmax_cross_entropy(l, label)?);
    }
    let crs = mean(g, &ce)?;
    let w = weight_term(g, config, fc)?;
    let w_term = g.scale(w, lambda3);
    let total = g.add(crs, w_term)?;
    Ok(LossVars {
        total,
        crs,
        clst: None,
        sep: None,
        w,
        logits,
    })
}

/// Evaluate `L_total` and its terms on a batch, without gradients.
pub fn total_loss(
    batch: &[(&Tensor, usize)],
    model: &Model,
    weights: &LossWeights,
    sign: SeparationSign,
) -> Result<LossBreakdown> {
    let mut g = Graph::new();
    let vars = model.bind(&mut g, crate::model::Trainable::NONE);
    let lv = batch_loss_graph(&mut g, model, &vars, batch, weights, sign, Objective::Total)?;
    Ok(lv.breakdown(&g))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ComparisonMode;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg(k: usize, u: usize, c1: usize, mode: ComparisonMode) -> ModelConfig {
        ModelConfig {
            num_classes: k,
            prototypes_per_class: u,
            feature_channels: c1,
            feature_height: 3,
            feature_width: 3,
            comparison: mode,
            image_size: 8,
            backbone_channels: vec![4],
            backbone_kernel: 4,
            ..ModelConfig::default()
        }
    }

    fn rand_t(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen::<f64>()).collect()).unwrap()
    }

    fn oracle(features: &[FeatureStack], labels: &[usize], protos: &Tensor, c: &ModelConfig, same: bool) -> f64 {
        let mut total = 0.0;
        for (j, fs) in features.iter().enumerate() {
            let mut best = f64::INFINITY;
            for k in 0..c.num_classes {
                if (k == labels[j]) != same {
                    continue;
                }
                for u in 0..c.prototypes_per_class {
                    let p = protos.row(k * c.prototypes_per_class + u);
                    for ch in 0..c.feature_channels {
                        let m = fs.channel(ch);
                        let mut d = 0.0;
                        for i in 0..m.len() {
                            d += (m[i] - p[i]).powi(2);
                        }
                        if d < best {
                            best = d;
                        }
                    }
                }
            }
            total += best;
        }
        total / features.len() as f64
    }

    fn toy_batch(seed: u64, n: usize, c: &ModelConfig) -> (Vec<FeatureStack>, Vec<usize>, Tensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fs = (0..n).map(|_| FeatureStack { maps: rand_t(&[c.feature_channels, 3, 3], &mut rng) }).collect();
        let labels = (0..n).map(|j| j % c.num_classes).collect();
        let protos = rand_t(&[c.num_prototypes(), c.prototype_len()], &mut rng);
        (fs, labels, protos)
    }

    #[test]
    fn cluster_coincidence_is_zero() {
        let c = cfg(2, 2, 4, ComparisonMode::FeatureMap);
        let (fs, _, mut protos) = toy_batch(1, 1, &c);
        protos.data_mut()[9..18].copy_from_slice(fs[0].channel(0));
        assert_eq!(cluster_loss(&fs, &[0], &protos, &c).unwrap(), 0.0);
    }

    #[test]
    fn cluster_of_repeated_sample_equals_single() {
        let c = cfg(2, 2, 4, ComparisonMode::FeatureMap);
        let (fs, _, protos) = toy_batch(2, 1, &c);
        let single = cluster_loss(&fs, &[1], &protos, &c).unwrap();
        let rep = vec![fs[0].clone(); 3];
        let triple = cluster_loss(&rep, &[1, 1, 1], &protos, &c).unwrap();
        assert!((single - triple).abs() < 1e-12);
    }

    #[test]
    fn cluster_and_separation_match_exhaustive_loops() {
        let c = cfg(2, 2, 4, ComparisonMode::FeatureMap);
        let (fs, labels, protos) = toy_batch(3, 3, &c);
        assert_eq!(cluster_loss(&fs, &labels, &protos, &c).unwrap(), oracle(&fs, &labels, &protos, &c, true));
        assert_eq!(separation_loss(&fs, &labels, &protos, &c).unwrap(), -oracle(&fs, &labels, &protos, &c, false));
        assert!(cluster_loss(&fs, &labels, &protos, &c).unwrap() >= 0.0);
        assert!(separation_loss(&fs, &labels, &protos, &c).unwrap() <= 0.0);
    }

    #[test]
    fn separation_special_cases() {
        let c = cfg(2, 1, 1, ComparisonMode::FeatureMap);
        let fs = vec![FeatureStack { maps: Tensor::full(&[1, 3, 3], 0.5) }];
        // other-class prototype coincides with the only channel
        let protos = Tensor::new(vec![2, 9], [vec![0.0; 9], vec![0.5; 9]].concat()).unwrap();
        assert_eq!(separation_loss(&fs, &[0], &protos, &c).unwrap(), 0.0);

        let c = cfg(3, 1, 1, ComparisonMode::FeatureMap);
        let fs = vec![FeatureStack { maps: Tensor::zeros(&[1, 3, 3]) }];
        let protos = Tensor::new(vec![3, 9], [vec![0.0; 9], vec![1.0; 9], vec![-1.0; 9]].concat()).unwrap();
        assert_eq!(separation_loss(&fs, &[0], &protos, &c).unwrap(), -9.0);

        let c1 = cfg(1, 1, 1, ComparisonMode::FeatureMap);
        assert!(separation_loss(&fs, &[0], &Tensor::zeros(&[1, 9]), &c1).is_err());
        assert!(cluster_loss(&[], &[], &Tensor::zeros(&[1, 9]), &c1).is_err());
    }

    #[test]
    fn weight_factor_cases() {
        let eye = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(weight_factor_loss(&eye).unwrap(), 0.0);
        assert_eq!(weight_factor_loss(&Tensor::full(&[3, 3], 1.0)).unwrap(), 6.0);
        assert!(weight_factor_loss(&Tensor::zeros(&[2, 3])).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = Tensor::new(vec![4, 4], (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let mut acc = 0.0;
        for t in 0..4 {
            for k in 0..4 {
                if t != k {
                    acc += w.at(&[t, k]).abs();
                }
            }
        }
        assert!((weight_factor_loss(&w).unwrap() - acc).abs() < 1e-14);
    }

    fn toy_model() -> (Model, Vec<(Tensor, usize)>) {
        let c = ModelConfig {
            num_classes: 3,
            prototypes_per_class: 2,
            feature_channels: 4,
            feature_height: 3,
            feature_width: 3,
            image_size: 8,
            backbone_channels: vec![4],
            backbone_kernel: 4,
            ..ModelConfig::default()
        };
        let model = Model::new(c, 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let batch = (0..4).map(|j| (rand_t(&[3, 8, 8], &mut rng), j % 3)).collect();
        (model, batch)
    }

    #[test]
    fn total_is_recomposition_of_terms() {
        let (model, batch) = toy_model();
        let refs: Vec<(&Tensor, usize)> = batch.iter().map(|(t, y)| (t, *y)).collect();
        let w = LossWeights::default();
        let b = total_loss(&refs, &model, &w, SeparationSign::Paper).unwrap();

        let feats: Vec<FeatureStack> = batch.iter().map(|(x, _)| model.extract(x).unwrap()).collect();
        let labels: Vec<usize> = batch.iter().map(|(_, y)| *y).collect();
        let crs: f64 = batch
            .iter()
            .map(|(x, y)| tensor::softmax_cross_entropy(&model.forward(x).unwrap().logits, *y).unwrap())
            .sum::<f64>()
            / 4.0;
        let clst = cluster_loss(&feats, &labels, &model.params.prototypes, &model.config).unwrap();
        let sep = separation_loss(&feats, &labels, &model.params.prototypes, &model.config).unwrap();
        let lw = weight_factor_loss(&model.params.fc).unwrap();
        let expect = crs + w.lambda1 * clst + w.lambda2 * sep + w.lambda3 * lw;
        assert!((b.total - expect).abs() < 1e-12, "{} vs {expect}", b.total);
        assert!((b.crs - crs).abs() < 1e-12);
        assert!((b.clst - clst).abs() < 1e-12);
        assert!((b.sep - sep).abs() < 1e-12);
        assert_eq!(b.w, lw);

        let repel = total_loss(&refs, &model, &w, SeparationSign::Repel).unwrap();
        assert!((repel.total - (crs + w.lambda1 * clst + w.lambda2.abs() * sep + w.lambda3 * lw)).abs() < 1e-12);
    }

    #[test]
    fn degenerate_weights() {
        let (mut model, batch) = toy_model();
        let refs: Vec<(&Tensor, usize)> = batch.iter().map(|(t, y)| (t, *y)).collect();
        let zero = LossWeights { lambda1: 0.0, lambda2: 0.0, lambda3: 0.0 };
        let b = total_loss(&refs, &model, &zero, SeparationSign::Repel).unwrap();
        assert_eq!(b.total, b.crs);

        let fc = &mut model.params.fc;
        for t in 0..3 {
            for k in 0..3 {
                fc.set(&[t, k], if t == k { 1.3 } else { 0.0 });
            }
        }
        let base = LossWeights { lambda3: 0.0, ..LossWeights::default() };
        let a = total_loss(&refs, &model, &base, SeparationSign::Repel).unwrap();
        let b = total_loss(&refs, &model, &LossWeights::default(), SeparationSign::Repel).unwrap();
        assert_eq!(a.total, b.total);
    }

    #[test]
    fn dense_weight_loss_counts_cross_class_connections() {
        let c = ModelConfig { aggregation: Aggregation::DenseSum, ..ModelConfig::default() };
        let m = Model::new(c.clone(), 0).unwrap();
        // 4 rows × 30 foreign prototypes × 0.5
        assert_eq!(weight_loss_for(&c, &m.params.fc).unwrap(), 60.0);
    }
}
