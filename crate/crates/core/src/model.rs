//! Feature extractor, prototype layer and classification head.
//!
//! The extractor is a stack of stride-2 valid convolutions (each followed by
//! ReLU) and a shaping network of two 1×1 convolutions with ReLU. Prototypes
//! are compared either against whole per-channel feature maps (`FeatureMap`)
//! or against per-position channel vectors (`FeatureVector`), and each class
//! logit is a weighted sum of the per-class best scores (`SingleActivation`)
//! or of every prototype score (`DenseSum`).

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{conv_out_extent, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ComparisonMode {
    /// Prototype is an `H1·W1` map compared with every channel map.
    FeatureMap,
    /// Prototype is a `C1` vector compared with every spatial position.
    FeatureVector,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Aggregation {
    SingleActivation,
    DenseSum,
}

impl fmt::Display for ComparisonMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ComparisonMode::FeatureMap => "feature_map",
            ComparisonMode::FeatureVector => "feature_vector",
        })
    }
}

impl FromStr for ComparisonMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "feature_map" | "fmc" => Ok(ComparisonMode::FeatureMap),
            "feature_vector" | "vec" => Ok(ComparisonMode::FeatureVector),
            _ => Err(Error::Config(format!("unknown comparison mode '{s}'"))),
        }
    }
}

impl fmt::Display for Aggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Aggregation::SingleActivation => "single_activation",
            Aggregation::DenseSum => "dense_sum",
        })
    }
}

impl FromStr for Aggregation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single_activation" | "sa" => Ok(Aggregation::SingleActivation),
            "dense_sum" | "dense" => Ok(Aggregation::DenseSum),
            _ => Err(Error::Config(format!("unknown aggregation '{s}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub num_classes: usize,
    pub prototypes_per_class: usize,
    pub feature_channels: usize,
    pub feature_height: usize,
    pub feature_width: usize,
    pub comparison: ComparisonMode,
    pub aggregation: Aggregation,
    pub epsilon: f64,
    pub image_size: usize,
    pub backbone_channels: Vec<usize>,
    pub backbone_kernel: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_classes: 4,
            prototypes_per_class: 10,
            feature_channels: 32,
            feature_height: 4,
            feature_width: 4,
            comparison: ComparisonMode::FeatureMap,
            aggregation: Aggregation::SingleActivation,
            epsilon: 1e-4,
            image_size: 64,
            backbone_channels: vec![16, 32, 64, 64],
            backbone_kernel: 2,
        }
    }
}

impl ModelConfig {
    /// 224-pixel input, five 2×2 stride-2 blocks, 7×7×64 feature stack.
    pub fn full_scale(num_classes: usize) -> Self {
        ModelConfig {
            num_classes,
            feature_channels: 64,
            feature_height: 7,
            feature_width: 7,
            image_size: 224,
            backbone_channels: vec![16, 32, 64, 64, 64],
            ..ModelConfig::default()
        }
    }

    pub const BACKBONE_STRIDE: usize = 2;

    /// Spatial extent after each backbone block, or `None` if a kernel no
    /// longer fits.
    pub fn backbone_extents(&self) -> Option<Vec<usize>> {
        let mut size = self.image_size;
        let mut out = Vec::new();
        for _ in &self.backbone_channels {
            if self.backbone_kernel > size {
                return None;
            }
            size = conv_out_extent(size, self.backbone_kernel, Self::BACKBONE_STRIDE);
            out.push(size);
        }
        Some(out)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_classes == 0 {
            return bad("num_classes must be positive".into());
        }
        if self.prototypes_per_class == 0 {
            return bad("prototypes_per_class must be at least 1".into());
        }
        if self.feature_channels == 0 {
            return bad("feature_channels must be positive".into());
        }
        if !(self.epsilon > 0.0) {
            return bad(format!("epsilon must be positive, got {}", self.epsilon));
        }
        if self.backbone_channels.is_empty() || self.backbone_channels.contains(&0) {
            return bad("backbone_channels must be a non-empty list of positive widths".into());
        }
        if self.backbone_kernel == 0 {
            return bad("backbone_kernel must be positive".into());
        }
        if self.feature_height != self.feature_width {
            return bad("feature maps must be square".into());
        }
        match self.backbone_extents() {
            Some(ext) if *ext.last().unwrap() == self.feature_height => Ok(()),
            Some(ext) => bad(format!(
                "backbone maps {}px input to {}x{}, but the feature stack is configured as {}x{}",
                self.image_size,
                ext.last().unwrap(),
                ext.last().unwrap(),
                self.feature_height,
                self.feature_width
            )),
            None => bad(format!(
                "backbone of {} blocks with kernel {} cannot process a {}px input",
                self.backbone_channels.len(),
                self.backbone_kernel,
                self.image_size
            )),
        }
    }

    pub fn num_prototypes(&self) -> usize {
        self.num_classes * self.prototypes_per_class
    }

    pub fn map_len(&self) -> usize {
        self.feature_height * self.feature_width
    }

    pub fn prototype_len(&self) -> usize {
        match self.comparison {
            ComparisonMode::FeatureMap => self.map_len(),
            ComparisonMode::FeatureVector => self.feature_channels,
        }
    }

    /// Number of comparison targets per image: channels or positions.
    pub fn targets_per_image(&self) -> usize {
        match self.comparison {
            ComparisonMode::FeatureMap => self.feature_channels,
            ComparisonMode::FeatureVector => self.map_len(),
        }
    }

    pub fn fc_shape(&self) -> [usize; 2] {
        match self.aggregation {
            Aggregation::SingleActivation => [self.num_classes, self.num_classes],
            Aggregation::DenseSum => [self.num_classes, self.num_prototypes()],
        }
    }

    /// Class owning the input column `col` of the FC matrix.
    pub fn fc_column_class(&self, col: usize) -> usize {
        match self.aggregation {
            Aggregation::SingleActivation => col,
            Aggregation::DenseSum => col / self.prototypes_per_class,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Params {
    pub backbone: Vec<ConvParams>,
    pub shaping: Vec<ConvParams>,
    /// `[K·U, prototype_len]`; row `k·U + u` is prototype `u` of class `k`.
    pub prototypes: Tensor,
    pub fc: Tensor,
}

/// Parameter groups that can be frozen independently.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Trainable {
    pub backbone: bool,
    pub shaping: bool,
    pub prototypes: bool,
    pub fc: bool,
}

impl Trainable {
    pub const ALL: Trainable = Trainable {
        backbone: true,
        shaping: true,
        prototypes: true,
        fc: true,
    };
    pub const NONE: Trainable = Trainable {
        backbone: false,
        shaping: false,
        prototypes: false,
        fc: false,
    };
}

impl Params {
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let conv = |cin: usize, cout: usize, k: usize, rng: &mut ChaCha8Rng| {
            let fan_in = (cin * k * k) as f64;
            let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
            let w = (0..cout * cin * k * k).map(|_| normal.sample(rng)).collect();
            ConvParams {
                weight: Tensor::new(vec![cout, cin, k, k], w).expect("kernel shape"),
                bias: Tensor::zeros(&[cout]),
            }
        };
        let mut backbone = Vec::new();
        let mut cin = 3;
        for &cout in &config.backbone_channels {
            backbone.push(conv(cin, cout, config.backbone_kernel, &mut rng));
            cin = cout;
        }
        let c1 = config.feature_channels;
        let shaping = vec![conv(cin, c1, 1, &mut rng), conv(c1, c1, 1, &mut rng)];
        let n = config.num_prototypes() * config.prototype_len();
        let prototypes = Tensor::new(
            vec![config.num_prototypes(), config.prototype_len()],
            (0..n).map(|_| rng.gen::<f64>()).collect(),
        )?;
        let [rows, cols] = config.fc_shape();
        let mut fc = Tensor::zeros(&[rows, cols]);
        for t in 0..rows {
            for col in 0..cols {
                let w = if config.fc_column_class(col) == t { 1.0 } else { -0.5 };
                fc.set(&[t, col], w);
            }
        }
        Ok(Params {
            backbone,
            shaping,
            prototypes,
            fc,
        })
    }

    /// Stable names and tensors, in serialization order.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (prefix, layers) in [("backbone", &self.backbone), ("shaping", &self.shaping)] {
            for (i, l) in layers.iter().enumerate() {
                out.push((format!("{prefix}.{i}.weight"), &l.weight));
                out.push((format!("{prefix}.{i}.bias"), &l.bias));
            }
        }
        out.push(("prototypes".to_string(), &self.prototypes));
        out.push(("fc".to_string(), &self.fc));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (prefix, layers) in [("backbone", &mut self.backbone), ("shaping", &mut self.shaping)] {
            for (i, l) in layers.iter_mut().enumerate() {
                out.push((format!("{prefix}.{i}.weight"), &mut l.weight));
                out.push((format!("{prefix}.{i}.bias"), &mut l.bias));
            }
        }
        out.push(("prototypes".to_string(), &mut self.prototypes));
        out.push(("fc".to_string(), &mut self.fc));
        out
    }

    /// Expected `(name, shape)` pairs for a configuration.
    pub fn expected_shapes(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut cin = 3;
        let k = config.backbone_kernel;
        for (i, &cout) in config.backbone_channels.iter().enumerate() {
            out.push((format!("backbone.{i}.weight"), vec![cout, cin, k, k]));
            out.push((format!("backbone.{i}.bias"), vec![cout]));
            cin = cout;
        }
        let c1 = config.feature_channels;
        for (i, ci) in [cin, c1].into_iter().enumerate() {
            out.push((format!("shaping.{i}.weight"), vec![c1, ci, 1, 1]));
            out.push((format!("shaping.{i}.bias"), vec![c1]));
        }
        out.push(("prototypes".into(), vec![config.num_prototypes(), config.prototype_len()]));
        out.push(("fc".into(), config.fc_shape().to_vec()));
        out
    }

    /// Build from named arrays, checking every shape against `config`.
    pub fn from_named(config: &ModelConfig, mut arrays: Vec<(String, Tensor)>) -> Result<Self> {
        let expected = Self::expected_shapes(config);
        if arrays.len() != expected.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter arrays, found {}",
                expected.len(),
                arrays.len()
            )));
        }
        for ((name, shape), (got_name, t)) in expected.iter().zip(&arrays) {
            if name != got_name {
                return Err(Error::Checkpoint(format!("expected array '{name}', found '{got_name}'")));
            }
            if t.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "array '{name}' has shape {:?} but the configuration needs {:?}",
                    t.shape(),
                    shape
                )));
            }
        }
        let mut it = arrays.drain(..).map(|(_, t)| t);
        let mut layers = |n: usize| -> Vec<ConvParams> {
            (0..n)
                .map(|_| ConvParams {
                    weight: it.next().unwrap(),
                    bias: it.next().unwrap(),
                })
                .collect()
        };
        let backbone = layers(config.backbone_channels.len());
        let shaping = layers(2);
        Ok(Params {
            backbone,
            shaping,
            prototypes: it.next().unwrap(),
            fc: it.next().unwrap(),
        })
    }

    pub fn prototype(&self, config: &ModelConfig, class: usize, u: usize) -> &[f64] {
        self.prototypes.row(class * config.prototypes_per_class + u)
    }
}

/// Graph handles for one binding of the parameters.
#[derive(Clone, Debug)]
pub struct ParamVars {
    pub backbone: Vec<(Var, Var)>,
    pub shaping: Vec<(Var, Var)>,
    pub prototypes: Var,
    pub fc: Var,
}

impl ParamVars {
    /// `(name, var)` in the same order as [`Params::named`].
    pub fn named(&self) -> Vec<(String, Var)> {
        let mut out = Vec::new();
        for (prefix, layers) in [("backbone", &self.backbone), ("shaping", &self.shaping)] {
            for (i, (w, b)) in layers.iter().enumerate() {
                out.push((format!("{prefix}.{i}.weight"), *w));
                out.push((format!("{prefix}.{i}.bias"), *b));
            }
        }
        out.push(("prototypes".to_string(), self.prototypes));
        out.push(("fc".to_string(), self.fc));
        out
    }
}

/// Per-image graph outputs of the prototype layer and head.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub features: Var,
    /// `[K·U, targets]` squared distances.
    pub distances: Var,
    /// `[K·U]` prototype scores.
    pub scores: Var,
    /// `[K]` per-class best scores.
    pub class_max: Var,
    pub logits: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: Params,
}

/// `M(x)`: the `[C1, H1, W1]` extractor output.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStack {
    pub maps: Tensor,
}

impl FeatureStack {
    pub fn channels(&self) -> usize {
        self.maps.shape()[0]
    }

    pub fn map_len(&self) -> usize {
        self.maps.shape()[1] * self.maps.shape()[2]
    }

    /// Channel map `M^c(x)`, flattened row-major.
    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.map_len();
        &self.maps.data()[c * n..(c + 1) * n]
    }

    /// Full-channel vector `M_(h,w)(x)` at flat position `p = h·W1 + w`.
    pub fn position(&self, p: usize) -> Vec<f64> {
        let n = self.map_len();
        (0..self.channels()).map(|c| self.maps.data()[c * n + p]).collect()
    }

    /// Comparison targets for a mode: channel maps or position vectors.
    pub fn targets(&self, mode: ComparisonMode) -> Vec<Vec<f64>> {
        match mode {
            ComparisonMode::FeatureMap => (0..self.channels()).map(|c| self.channel(c).to_vec()).collect(),
            ComparisonMode::FeatureVector => (0..self.map_len()).map(|p| self.position(p)).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreTable {
    /// `[K, U]` prototype scores `g`.
    pub scores: Tensor,
    /// Per prototype (`k·U + u`), the channel (feature-map mode) or flat
    /// position (feature-vector mode) attaining its score.
    pub argmax_target: Vec<usize>,
    /// `[K]` per-class best score `G`.
    pub class_max: Tensor,
    /// Per class, the prototype index `u` attaining `G`.
    pub class_argmax: Vec<usize>,
}

impl ScoreTable {
    pub fn score(&self, k: usize, u: usize) -> f64 {
        self.scores.at(&[k, u])
    }
}

/// `ln((d + 1) / (d + eps))` with `d` the squared L2 distance.
pub fn similarity(phi: &Tensor, varphi: &Tensor, eps: f64) -> Result<f64> {
    if !(eps > 0.0) {
        return Err(Error::invalid(format!("epsilon must be positive, got {eps}")));
    }
    let d = crate::tensor::sq_l2_distance(phi, varphi)?;
    Ok(similarity_from_distance(d, eps))
}

pub fn similarity_from_distance(d: f64, eps: f64) -> f64 {
    ((d + 1.0) / (d + eps)).ln()
}

/// Graph form of the prototype layer: distances, scores, class maxima.
fn score_graph(g: &mut Graph, config: &ModelConfig, features: Var, prototypes: Var) -> Result<(Var, Var, Var)> {
    let (c1, n) = (config.feature_channels, config.map_len());
    let flat = g.reshape(features, &[c1, n])?;
    let targets = match config.comparison {
        ComparisonMode::FeatureMap => flat,
        ComparisonMode::FeatureVector => g.transpose(flat)?,
    };
    let distances = g.pairwise_sq_dist(prototypes, targets)?;
    let sims = g.log_ratio(distances, config.epsilon)?;
    let scores = g.max_last_axis(sims)?;
    let per_class = g.reshape(scores, &[config.num_classes, config.prototypes_per_class])?;
    let class_max = g.max_last_axis(per_class)?;
    Ok((distances, scores, class_max))
}

fn head_graph(g: &mut Graph, config: &ModelConfig, fc: Var, scores: Var, class_max: Var) -> Result<Var> {
    match config.aggregation {
        Aggregation::SingleActivation => g.matvec(fc, class_max),
        Aggregation::DenseSum => g.matvec(fc, scores),
    }
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = Params::init(&config, seed)?;
        Ok(Model { config, params })
    }

    pub fn bind(&self, g: &mut Graph, trainable: Trainable) -> ParamVars {
        let mut leaf = |t: &Tensor, train: bool| if train { g.param(t.clone()) } else { g.constant(t.clone()) };
        let backbone = self
            .params
            .backbone
            .iter()
            .map(|l| (leaf(&l.weight, trainable.backbone), leaf(&l.bias, trainable.backbone)))
            .collect();
        let shaping = self
            .params
            .shaping
            .iter()
            .map(|l| (leaf(&l.weight, trainable.shaping), leaf(&l.bias, trainable.shaping)))
            .collect();
        ParamVars {
            backbone,
            shaping,
            prototypes: leaf(&self.params.prototypes, trainable.prototypes),
            fc: leaf(&self.params.fc, trainable.fc),
        }
    }

    /// Extractor `f_s(f_b(x))` recorded on the graph.
    pub fn features_graph(&self, g: &mut Graph, vars: &ParamVars, image: Var) -> Result<Var> {
        let shape = g.value(image).shape().to_vec();
        let s = self.config.image_size;
        if shape != [3, s, s] {
            return Err(Error::shape(format!("model expects a [3, {s}, {s}] image, got {shape:?}")));
        }
        let mut x = image;
        for &(w, b) in &vars.backbone {
            let y = g.conv2d(x, w, b, ModelConfig::BACKBONE_STRIDE)?;
            x = g.relu(y);
        }
        for &(w, b) in &vars.shaping {
            let y = g.conv2d(x, w, b, 1)?;
            x = g.relu(y);
        }
        Ok(x)
    }

    pub fn forward_graph(&self, g: &mut Graph, vars: &ParamVars, image: Var) -> Result<ForwardVars> {
        let features = self.features_graph(g, vars, image)?;
        let (distances, scores, class_max) = score_graph(g, &self.config, features, vars.prototypes)?;
        let logits = head_graph(g, &self.config, vars.fc, scores, class_max)?;
        Ok(ForwardVars {
            features,
            distances,
            scores,
            class_max,
            logits,
        })
    }

    pub fn extract(&self, image: &Tensor) -> Result<FeatureStack> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, Trainable::NONE);
        let x = g.constant(image.clone());
        let f = self.features_graph(&mut g, &vars, x)?;
        Ok(FeatureStack { maps: g.value(f).clone() })
    }

    pub fn prototype_scores(&self, features: &FeatureStack) -> Result<ScoreTable> {
        prototype_scores(features, &self.params.prototypes, &self.config)
    }

    pub fn classify(&self, table: &ScoreTable) -> Result<Tensor> {
        classify(table, &self.params.fc, self.config.aggregation)
    }

    /// Full inference pass.
    pub fn forward(&self, image: &Tensor) -> Result<Inference> {
        let features = self.extract(image)?;
        let scores = self.prototype_scores(&features)?;
        let logits = self.classify(&scores)?;
        Ok(Inference { features, scores, logits })
    }

    pub fn predict(&self, image: &Tensor) -> Result<usize> {
        let inf = self.forward(image)?;
        Ok(inf.predicted())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    pub features: FeatureStack,
    pub scores: ScoreTable,
    pub logits: Tensor,
}

impl Inference {
    pub fn predicted(&self) -> usize {
        crate::tensor::argmax_slice(self.logits.data()).map_or(0, |(_, i)| i)
    }
}

/// Score every prototype against a feature stack.
pub fn prototype_scores(features: &FeatureStack, prototypes: &Tensor, config: &ModelConfig) -> Result<ScoreTable> {
    let expect_f = [config.feature_channels, config.feature_height, config.feature_width];
    if features.maps.shape() != expect_f {
        return Err(Error::shape(format!(
            "feature stack {:?} does not match the configured {:?}",
            features.maps.shape(),
            expect_f
        )));
    }
    let expect_p = [config.num_prototypes(), config.prototype_len()];
    if prototypes.shape() != expect_p {
        return Err(Error::shape(format!(
            "prototypes {:?} do not fit {} mode (need {:?})",
            prototypes.shape(),
            config.comparison,
            expect_p
        )));
    }
    let mut g = Graph::new();
    let f = g.constant(features.maps.clone());
    let p = g.constant(prototypes.clone());
    let (_, scores, class_max) = score_graph(&mut g, config, f, p)?;
    let (k, u) = (config.num_classes, config.prototypes_per_class);
    Ok(ScoreTable {
        scores: g.value(scores).reshape(&[k, u])?,
        argmax_target: g.argmax_of(scores).unwrap().to_vec(),
        class_max: g.value(class_max).clone(),
        class_argmax: g.argmax_of(class_max).unwrap().to_vec(),
    })
}

/// Logits from a score table: `fc · G` or, for dense aggregation, `fc · g`.
pub fn classify(table: &ScoreTable, fc: &Tensor, aggregation: Aggregation) -> Result<Tensor> {
    let k = table.class_max.len();
    let input = match aggregation {
        Aggregation::SingleActivation => table.class_max.clone(),
        Aggregation::DenseSum => table.scores.reshape(&[table.scores.len()])?,
    };
    if fc.shape() != [k, input.len()] {
        return Err(Error::shape(format!(
            "{aggregation} head needs fc weights [{k}, {}], got {:?}",
            input.len(),
            fc.shape()
        )));
    }
    crate::tensor::linear(&input, fc)
}

/// Closest comparison target found by [`nearest_target`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TargetMatch {
    /// Index into the searched feature bank.
    pub sample: usize,
    /// Channel (feature-map mode) or flat position (feature-vector mode).
    pub target: usize,
    pub sq_distance: f64,
}

/// Exhaustive search for the target nearest to `prototype` among samples of
/// `class`, scanning samples then targets in order (first minimum wins).
pub fn nearest_target(
    features: &[FeatureStack],
    labels: &[usize],
    class: usize,
    prototype: &[f64],
    mode: ComparisonMode,
) -> Option<TargetMatch> {
    let mut best: Option<TargetMatch> = None;
    for (j, (fs, &y)) in features.iter().zip(labels).enumerate() {
        if y != class {
            continue;
        }
        for (t, target) in fs.targets(mode).iter().enumerate() {
            let d = crate::tensor::sq_l2(target, prototype);
            if best.is_none_or(|b| d < b.sq_distance) {
                best = Some(TargetMatch {
                    sample: j,
                    target: t,
                    sq_distance: d,
                });
            }
        }
    }
    best
}
