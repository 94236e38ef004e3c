//! Central finite-difference check of every parameter gradient of the total
//! loss on a small seeded model, plus the measured direction of a lone
//! separation step.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::Graph;
use crate::error::Result;
use crate::losses::{batch_loss_graph, separation_loss, LossWeights, Objective, SeparationSign};
use crate::model::{FeatureStack, Model, ModelConfig, Trainable};
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-3;

/// K=3, U=2, C1=4, 3x3 maps from 8px inputs.
pub fn toy_config() -> ModelConfig {
    ModelConfig {
        num_classes: 3,
        prototypes_per_class: 2,
        feature_channels: 4,
        feature_height: 3,
        feature_width: 3,
        image_size: 8,
        backbone_channels: vec![4],
        backbone_kernel: 4,
        ..ModelConfig::default()
    }
}

/// Seeded toy model and a batch of four labelled images.
pub fn toy_problem(seed: u64) -> Result<(Model, Vec<(Tensor, usize)>)> {
    let cfg = toy_config();
    let model = Model::new(cfg.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(7);
    let s = cfg.image_size;
    let batch = (0..4)
        .map(|i| {
            let img = Tensor::new(vec![3, s, s], (0..3 * s * s).map(|_| rng.gen_range(0.0..1.0)).collect())?;
            Ok((img, i % cfg.num_classes))
        })
        .collect::<Result<_>>()?;
    Ok((model, batch))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates whose perturbation crossed a ReLU, abs or max/min kink.
    pub skipped: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn checked(&self) -> usize {
        self.params.iter().map(|p| p.checked).sum()
    }

    pub fn skipped(&self) -> usize {
        self.params.iter().map(|p| p.skipped).sum()
    }
}

fn rel_error(a: f64, n: f64) -> f64 {
    let scale = a.abs().max(n.abs());
    if scale < 1e-8 {
        (a - n).abs()
    } else {
        (a - n).abs() / scale
    }
}

fn eval(model: &Model, batch: &[(Tensor, usize)], weights: &LossWeights, sign: SeparationSign) -> Result<(f64, Vec<usize>)> {
    let refs: Vec<(&Tensor, usize)> = batch.iter().map(|(x, y)| (x, *y)).collect();
    let mut g = Graph::new();
    let vars = model.bind(&mut g, Trainable::NONE);
    let lv = batch_loss_graph(&mut g, model, &vars, &refs, weights, sign, Objective::Total)?;
    Ok((g.value(lv.total).item(), g.branch_signature()))
}

/// Compare analytic gradients of `L_total` for every parameter element with
/// central differences at `STEP` and `STEP / 2`, combined by Richardson
/// extrapolation.
pub fn check_model(model: &Model, batch: &[(Tensor, usize)], weights: &LossWeights, sign: SeparationSign) -> Result<GradCheckReport> {
    let refs: Vec<(&Tensor, usize)> = batch.iter().map(|(x, y)| (x, *y)).collect();
    let mut g = Graph::new();
    let vars = model.bind(&mut g, Trainable::ALL);
    let lv = batch_loss_graph(&mut g, model, &vars, &refs, weights, sign, Objective::Total)?;
    let grads = g.backward(lv.total)?;
    let (_, base_sig) = eval(model, batch, weights, sign)?;

    let mut params = Vec::new();
    let names = vars.named();
    let mut probe = model.clone();
    for (pi, (name, v)) in names.iter().enumerate() {
        let analytic = grads.get(*v).expect("every parameter is trainable").clone();
        let mut rep = ParamCheck {
            name: name.clone(),
            max_rel_error: 0.0,
            checked: 0,
            skipped: 0,
        };
        for i in 0..analytic.len() {
            let mut at = |delta: f64| -> Result<(f64, Vec<usize>)> {
                let mut named = probe.params.named_mut();
                let t = &mut named[pi].1;
                let orig = t.data()[i];
                t.data_mut()[i] = orig + delta;
                drop(named);
                let r = eval(&probe, batch, weights, sign);
                probe.params.named_mut()[pi].1.data_mut()[i] = orig;
                r
            };
            let mut central = |h: f64| -> Result<Option<f64>> {
                let (lp, sp) = at(h)?;
                let (lm, sm) = at(-h)?;
                Ok((sp == base_sig && sm == base_sig).then(|| (lp - lm) / (2.0 * h)))
            };
            let (Some(coarse), Some(fine)) = (central(STEP)?, central(STEP / 2.0)?) else {
                rep.skipped += 1;
                continue;
            };
            let numeric = (4.0 * fine - coarse) / 3.0;
            rep.max_rel_error = rep.max_rel_error.max(rel_error(analytic.data()[i], numeric));
            rep.checked += 1;
        }
        params.push(rep);
    }
    Ok(GradCheckReport { params })
}

/// Gradient check of the seeded toy problem with default loss weights.
pub fn run(seed: u64, sign: SeparationSign) -> Result<GradCheckReport> {
    let (model, batch) = toy_problem(seed)?;
    check_model(&model, &batch, &LossWeights::default(), sign)
}

/// Mean minimum heterogeneous distance before and after one plain gradient
/// step of size `lr` on `λ2`'s separation term alone.
pub fn separation_step(seed: u64, sign: SeparationSign, lambda2: f64, lr: f64) -> Result<(f64, f64)> {
    let (mut model, batch) = toy_problem(seed)?;
    let refs: Vec<(&Tensor, usize)> = batch.iter().map(|(x, y)| (x, *y)).collect();
    let labels: Vec<usize> = batch.iter().map(|b| b.1).collect();
    let mean_min = |m: &Model| -> Result<f64> {
        let feats: Vec<FeatureStack> = batch.iter().map(|(x, _)| m.extract(x)).collect::<Result<_>>()?;
        Ok(-separation_loss(&feats, &labels, &m.params.prototypes, &m.config)?)
    };
    let before = mean_min(&model)?;
    let mut g = Graph::new();
    let vars = model.bind(&mut g, Trainable::ALL);
    let weights = LossWeights {
        lambda1: 0.0,
        lambda2,
        lambda3: 0.0,
    };
    let lv = batch_loss_graph(&mut g, &model, &vars, &refs, &weights, sign, Objective::Total)?;
    let sep = lv.sep.expect("total objective records the separation term");
    let term = g.scale(sep, sign.distance_coefficient(lambda2));
    let grads = g.backward(term)?;
    let names = vars.named();
    for ((_, t), (_, v)) in model.params.named_mut().into_iter().zip(&names) {
        if let Some(gr) = grads.get(*v) {
            for (w, d) in t.data_mut().iter_mut().zip(gr.data()) {
                *w -= lr * d;
            }
        }
    }
    Ok((before, mean_min(&model)?))
}
