//! Residual MLP correcting a rigid map: `p' = R·p + t + f(p; φ)`.

use nalgebra::Vector3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::rigid::RigidTransform;
use crate::error::{Error, Result};
use crate::model::FrameId;

pub const LAYER_SIZES: [usize; 4] = [3, 16, 16, 3];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub weight_decay: f64,
    pub dropout: f64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            learning_rate: 0.005,
            epochs: 50,
            weight_decay: 1.5,
            dropout: 0.5,
            batch_size: 64,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.learning_rate, self.beta1, self.beta2, self.epsilon];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0))
            || self.epochs == 0
            || self.batch_size == 0
        {
            return Err(Error::invalid("training hyperparameters must be positive"));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::invalid("weight decay must be >= 0"));
        }
        if !(0.0..1.0).contains(&self.dropout) || self.beta1 >= 1.0 || self.beta2 >= 1.0 {
            return Err(Error::invalid("dropout and Adam betas must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Feed-forward network with ReLU hidden layers. Parameters live in one flat
/// vector laid out per layer as row-major weights followed by biases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MlpFile", into = "MlpFile")]
pub struct ResidualMlp {
    sizes: Vec<usize>,
    params: Vec<f64>,
    input_mean: [f64; 3],
    input_scale: [f64; 3],
    target: FrameId,
    config: TrainingConfig,
}

#[derive(Serialize, Deserialize)]
struct LayerFile {
    weights: Vec<Vec<f64>>,
    biases: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct MlpFile {
    target: FrameId,
    sizes: Vec<usize>,
    activation: String,
    input_mean: [f64; 3],
    input_scale: [f64; 3],
    layers: Vec<LayerFile>,
    config: TrainingConfig,
}

impl From<ResidualMlp> for MlpFile {
    fn from(m: ResidualMlp) -> Self {
        let layers = (0..m.sizes.len() - 1)
            .map(|l| {
                let (w, b) = m.layer(l);
                let cols = m.sizes[l];
                LayerFile {
                    weights: w.chunks(cols).map(<[f64]>::to_vec).collect(),
                    biases: b.to_vec(),
                }
            })
            .collect();
        MlpFile {
            target: m.target,
            sizes: m.sizes,
            activation: "relu".into(),
            input_mean: m.input_mean,
            input_scale: m.input_scale,
            layers,
            config: m.config,
        }
    }
}

impl TryFrom<MlpFile> for ResidualMlp {
    type Error = Error;

    fn try_from(f: MlpFile) -> Result<Self> {
        if f.activation != "relu" {
            return Err(Error::invalid(format!(
                "unsupported activation `{}`",
                f.activation
            )));
        }
        if f.sizes.len() < 2 || f.sizes[0] != 3 || f.sizes[f.sizes.len() - 1] != 3 {
            return Err(Error::invalid(
                "residual MLP must map 3 inputs to 3 outputs",
            ));
        }
        if f.layers.len() != f.sizes.len() - 1 {
            return Err(Error::invalid("layer count does not match sizes"));
        }
        let mut params = Vec::new();
        for (l, layer) in f.layers.iter().enumerate() {
            let (rows, cols) = (f.sizes[l + 1], f.sizes[l]);
            if layer.weights.len() != rows
                || layer.weights.iter().any(|r| r.len() != cols)
                || layer.biases.len() != rows
            {
                return Err(Error::invalid(format!("layer {l} has the wrong shape")));
            }
            params.extend(layer.weights.iter().flatten());
            params.extend(&layer.biases);
        }
        if params
            .iter()
            .chain(&f.input_mean)
            .chain(&f.input_scale)
            .any(|v| !v.is_finite())
            || f.input_scale.iter().any(|s| *s <= 0.0)
        {
            return Err(Error::invalid("non-finite or zero-scale MLP parameters"));
        }
        Ok(ResidualMlp {
            sizes: f.sizes,
            params,
            input_mean: f.input_mean,
            input_scale: f.input_scale,
            target: f.target,
            config: f.config,
        })
    }
}

/// Intermediate activations of one forward pass.
struct Trace {
    /// Post-activation (post-dropout) values per layer, input first.
    acts: Vec<Vec<f64>>,
    /// Dropout multipliers per hidden layer (empty in evaluation mode).
    masks: Vec<Vec<f64>>,
}

impl ResidualMlp {
    /// He-initialized hidden layers and a zero output layer, so an untrained
    /// model contributes no residual.
    pub fn new(
        sizes: &[usize],
        target: FrameId,
        config: TrainingConfig,
        seed: u64,
    ) -> Result<Self> {
        if sizes.len() < 2 || sizes[0] != 3 || sizes[sizes.len() - 1] != 3 || sizes.contains(&0) {
            return Err(Error::invalid(
                "residual MLP must map 3 inputs to 3 outputs",
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        for l in 0..sizes.len() - 1 {
            let (rows, cols) = (sizes[l + 1], sizes[l]);
            if l + 2 == sizes.len() {
                params.extend(std::iter::repeat_n(0.0, rows * cols + rows));
            } else {
                let he = Normal::new(0.0, (2.0 / cols as f64).sqrt()).expect("finite sd");
                params.extend((0..rows * cols).map(|_| he.sample(&mut rng)));
                params.extend(std::iter::repeat_n(0.0, rows));
            }
        }
        Ok(ResidualMlp {
            sizes: sizes.to_vec(),
            params,
            input_mean: [0.0; 3],
            input_scale: [1.0; 3],
            target,
            config,
        })
    }

    /// Random parameters everywhere (including the output layer); for gradient checks.
    pub fn random(
        sizes: &[usize],
        target: FrameId,
        config: TrainingConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut m = ResidualMlp::new(sizes, target, config, 0)?;
        for p in &mut m.params {
            *p = rng.random_range(-1.0..1.0);
        }
        Ok(m)
    }

    pub fn target(&self) -> FrameId {
        self.target
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn config(&self) -> &TrainingConfig {
        &self.config
    }

    /// Sets the input standardization from the training inputs.
    pub fn fit_input_scaling(&mut self, inputs: &[Vector3<f64>]) {
        if inputs.is_empty() {
            return;
        }
        let n = inputs.len() as f64;
        let mean = inputs.iter().sum::<Vector3<f64>>() / n;
        for j in 0..3 {
            let var = inputs.iter().map(|p| (p[j] - mean[j]).powi(2)).sum::<f64>() / n;
            self.input_mean[j] = mean[j];
            self.input_scale[j] = if var.sqrt() > 1e-9 { var.sqrt() } else { 1.0 };
        }
    }

    fn offsets(&self, l: usize) -> (usize, usize, usize) {
        let mut start = 0;
        for k in 0..l {
            start += self.sizes[k + 1] * self.sizes[k] + self.sizes[k + 1];
        }
        let w_len = self.sizes[l + 1] * self.sizes[l];
        (start, start + w_len, start + w_len + self.sizes[l + 1])
    }

    fn layer(&self, l: usize) -> (&[f64], &[f64]) {
        let (a, b, c) = self.offsets(l);
        (&self.params[a..b], &self.params[b..c])
    }

    fn is_weight(&self, idx: usize) -> bool {
        (0..self.sizes.len() - 1).any(|l| {
            let (a, b, _) = self.offsets(l);
            (a..b).contains(&idx)
        })
    }

    fn standardize(&self, p: &Vector3<f64>) -> Vec<f64> {
        (0..3)
            .map(|j| (p[j] - self.input_mean[j]) / self.input_scale[j])
            .collect()
    }

    fn forward_trace(&self, p: &Vector3<f64>, dropout: Option<(f64, &mut ChaCha8Rng)>) -> Trace {
        let layers = self.sizes.len() - 1;
        let mut acts = vec![self.standardize(p)];
        let mut masks = Vec::new();
        let mut dropout = dropout;
        for l in 0..layers {
            let (w, b) = self.layer(l);
            let x = &acts[l];
            let cols = self.sizes[l];
            let mut z: Vec<f64> = b
                .iter()
                .enumerate()
                .map(|(r, bias)| {
                    bias + w[r * cols..(r + 1) * cols]
                        .iter()
                        .zip(x)
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
                })
                .collect();
            if l + 1 < layers {
                z.iter_mut().for_each(|v| *v = v.max(0.0));
                if let Some((p, rng)) = dropout.as_mut() {
                    let keep = 1.0 - *p;
                    let mask: Vec<f64> = z
                        .iter()
                        .map(|_| {
                            if rng.random::<f64>() < keep {
                                1.0 / keep
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    z.iter_mut().zip(&mask).for_each(|(v, m)| *v *= m);
                    masks.push(mask);
                }
            }
            acts.push(z);
        }
        Trace { acts, masks }
    }

    /// Which hidden units are active for each input, in evaluation mode.
    fn activation_pattern(&self, inputs: &[Vector3<f64>]) -> Vec<bool> {
        let hidden = self.sizes.len() - 2;
        inputs
            .iter()
            .flat_map(|p| {
                let t = self.forward_trace(p, None);
                t.acts[1..=hidden]
                    .iter()
                    .flatten()
                    .map(|&a| a > 0.0)
                    .collect::<Vec<_>>()
            })
            .collect()
    }

    /// Residual prediction in evaluation mode (dropout off).
    pub fn forward(&self, p: &Vector3<f64>) -> Vector3<f64> {
        let t = self.forward_trace(p, None);
        let y = &t.acts[t.acts.len() - 1];
        Vector3::new(y[0], y[1], y[2])
    }

    /// Accumulates `∂J/∂θ` for one sample into `grad`, given `∂J/∂y`.
    fn backward(&self, trace: &Trace, dy: &[f64], grad: &mut [f64]) {
        let layers = self.sizes.len() - 1;
        let mut delta = dy.to_vec();
        for l in (0..layers).rev() {
            let (w_start, b_start, _) = self.offsets(l);
            let cols = self.sizes[l];
            let x = &trace.acts[l];
            for (r, d) in delta.iter().enumerate() {
                grad[b_start + r] += d;
                for c in 0..cols {
                    grad[w_start + r * cols + c] += d * x[c];
                }
            }
            if l == 0 {
                break;
            }
            let (w, _) = self.layer(l);
            let mut prev = vec![0.0; cols];
            for (r, d) in delta.iter().enumerate() {
                for c in 0..cols {
                    prev[c] += w[r * cols + c] * d;
                }
            }
            // ReLU derivative uses the post-activation value; dropout scales the same path.
            for c in 0..cols {
                let mask = trace.masks.get(l - 1).map_or(1.0, |m| m[c]);
                prev[c] = if trace.acts[l][c] > 0.0 {
                    prev[c] * mask
                } else {
                    0.0
                };
            }
            delta = prev;
        }
    }

    fn weight_penalty(&self) -> f64 {
        let sq: f64 = (0..self.sizes.len() - 1)
            .map(|l| self.layer(l).0.iter().map(|w| w * w).sum::<f64>())
            .sum();
        0.5 * self.config.weight_decay * sq
    }

    /// Evaluation-mode objective `sqrt(mean((y − r)²)) + (λ/2)·Σ W²` over all
    /// output components, with the gradient of the RMSE part defined as 0 at RMSE 0.
    pub fn objective(&self, inputs: &[Vector3<f64>], targets: &[Vector3<f64>]) -> f64 {
        rmse_components(self, inputs, targets) + self.weight_penalty()
    }

    /// Analytic gradient of [`Self::objective`] in evaluation mode.
    pub fn objective_gradient(
        &self,
        inputs: &[Vector3<f64>],
        targets: &[Vector3<f64>],
    ) -> Vec<f64> {
        let mut grad = self.data_gradient(inputs, targets, None);
        for (i, g) in grad.iter_mut().enumerate() {
            if self.is_weight(i) {
                *g += self.config.weight_decay * self.params[i];
            }
        }
        grad
    }

    /// Gradient of the RMSE term alone; with `dropout`, masks are sampled per sample.
    fn data_gradient(
        &self,
        inputs: &[Vector3<f64>],
        targets: &[Vector3<f64>],
        mut dropout: Option<(f64, &mut ChaCha8Rng)>,
    ) -> Vec<f64> {
        let traces: Vec<Trace> = inputs
            .iter()
            .map(|p| match dropout.as_mut() {
                Some((rate, rng)) => self.forward_trace(p, Some((*rate, &mut **rng))),
                None => self.forward_trace(p, None),
            })
            .collect();
        let out = self.sizes.len() - 1;
        let count = (inputs.len() * 3) as f64;
        let sse: f64 = traces
            .iter()
            .zip(targets)
            .map(|(t, r)| (0..3).map(|j| (t.acts[out][j] - r[j]).powi(2)).sum::<f64>())
            .sum();
        let mut grad = vec![0.0; self.params.len()];
        let rmse = (sse / count).sqrt();
        if rmse == 0.0 {
            return grad;
        }
        for (t, r) in traces.iter().zip(targets) {
            let dy: Vec<f64> = (0..3)
                .map(|j| (t.acts[out][j] - r[j]) / (count * rmse))
                .collect();
            self.backward(t, &dy, &mut grad);
        }
        grad
    }
}

/// RMSE over every output component.
fn rmse_components(m: &ResidualMlp, inputs: &[Vector3<f64>], targets: &[Vector3<f64>]) -> f64 {
    if inputs.is_empty() {
        return 0.0;
    }
    let sse: f64 = inputs
        .iter()
        .zip(targets)
        .map(|(p, r)| (m.forward(p) - r).norm_squared())
        .sum();
    (sse / (3 * inputs.len()) as f64).sqrt()
}

/// Adam on the RMSE gradient plus weight decay applied directly to the weights.
struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, model: &mut ResidualMlp, grad: &[f64]) {
        let c = model.config.clone();
        self.t += 1;
        let bc1 = 1.0 - c.beta1.powi(self.t);
        let bc2 = 1.0 - c.beta2.powi(self.t);
        for i in 0..grad.len() {
            self.m[i] = c.beta1 * self.m[i] + (1.0 - c.beta1) * grad[i];
            self.v[i] = c.beta2 * self.v[i] + (1.0 - c.beta2) * grad[i] * grad[i];
            let update = (self.m[i] / bc1) / ((self.v[i] / bc2).sqrt() + c.epsilon);
            let decay = if model.is_weight(i) {
                c.weight_decay * model.params[i]
            } else {
                0.0
            };
            model.params[i] -= c.learning_rate * (update + decay);
        }
    }
}

/// Residual targets `y − (R·x + t)`.
pub fn residuals(
    t: &RigidTransform,
    inputs: &[Vector3<f64>],
    truth: &[Vector3<f64>],
) -> Vec<Vector3<f64>> {
    inputs
        .iter()
        .zip(truth)
        .map(|(p, y)| y - t.apply_point(p))
        .collect()
}

/// Trains a fresh model on `(input, residual)` pairs. Returns the model and the
/// evaluation-mode objective after each epoch.
pub fn fit_residual_mlp(
    inputs: &[Vector3<f64>],
    residual: &[Vector3<f64>],
    target: FrameId,
    cfg: &TrainingConfig,
) -> Result<(ResidualMlp, Vec<f64>)> {
    cfg.validate()?;
    if inputs.is_empty() || inputs.len() != residual.len() {
        return Err(Error::LengthMismatch {
            left: inputs.len(),
            right: residual.len(),
        });
    }
    let mut model = ResidualMlp::new(&LAYER_SIZES, target, cfg.clone(), cfg.seed)?;
    model.fit_input_scaling(inputs);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xD1B5_4A32_D192_ED03);
    let mut adam = Adam::new(model.params.len());
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let x: Vec<Vector3<f64>> = batch.iter().map(|&i| inputs[i]).collect();
            let r: Vec<Vector3<f64>> = batch.iter().map(|&i| residual[i]).collect();
            let dropout = (cfg.dropout > 0.0).then_some((cfg.dropout, &mut rng));
            let grad = model.data_gradient(&x, &r, dropout);
            adam.step(&mut model, &grad);
        }
        let loss = model.objective(inputs, residual);
        if !loss.is_finite() {
            return Err(Error::Numeric("training loss became non-finite".into()));
        }
        history.push(loss);
    }
    Ok((model, history))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub held_out: String,
    pub train_samples: usize,
    pub test_samples: usize,
    pub rigid_rmse_cm: f64,
    pub corrected_rmse_cm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub source: FrameId,
    pub target: FrameId,
    pub folds: Vec<FoldReport>,
    pub mean_rigid_rmse_cm: f64,
    pub mean_corrected_rmse_cm: f64,
    /// Objective per epoch of the final model trained on every trial.
    pub loss_history: Vec<f64>,
}

/// Correspondences from one trial.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialPairs {
    pub trial: String,
    pub source: Vec<Vector3<f64>>,
    pub truth: Vec<Vector3<f64>>,
}

/// Euclidean RMSE of `pred` against `truth`.
pub fn euclidean_rmse(pred: &[Vector3<f64>], truth: &[Vector3<f64>]) -> f64 {
    if pred.is_empty() {
        return 0.0;
    }
    let s: f64 = pred
        .iter()
        .zip(truth)
        .map(|(a, b)| (a - b).norm_squared())
        .sum();
    (s / pred.len() as f64).sqrt()
}

/// Trains the residual on every trial and reports leave-one-trial-out folds,
/// each fold's model trained on the remaining trials and scored on the held-out one.
pub fn train_residual_mlp(
    trials: &[TrialPairs],
    t: &RigidTransform,
    cfg: &TrainingConfig,
) -> Result<(ResidualMlp, CvReport)> {
    if trials.len() < 2 {
        return Err(Error::invalid(format!(
            "cross-validation needs at least 2 trials, got {}",
            trials.len()
        )));
    }
    for tr in trials {
        if tr.source.len() != tr.truth.len() || tr.source.is_empty() {
            return Err(Error::invalid(format!(
                "trial {} has no usable pairs",
                tr.trial
            )));
        }
    }
    let collect = |skip: Option<usize>| {
        let mut x = Vec::new();
        let mut y = Vec::new();
        for (i, tr) in trials.iter().enumerate() {
            if Some(i) != skip {
                x.extend_from_slice(&tr.source);
                y.extend_from_slice(&tr.truth);
            }
        }
        (x, y)
    };
    let mut folds = Vec::with_capacity(trials.len());
    for (i, held) in trials.iter().enumerate() {
        let (x, y) = collect(Some(i));
        let (model, _) = fit_residual_mlp(&x, &residuals(t, &x, &y), t.target(), cfg)?;
        let rigid: Vec<Vector3<f64>> = held.source.iter().map(|p| t.apply_point(p)).collect();
        let corrected: Vec<Vector3<f64>> = held
            .source
            .iter()
            .map(|p| predict_corrected(t, &model, p))
            .collect::<Result<_>>()?;
        folds.push(FoldReport {
            held_out: held.trial.clone(),
            train_samples: x.len(),
            test_samples: held.source.len(),
            rigid_rmse_cm: euclidean_rmse(&rigid, &held.truth),
            corrected_rmse_cm: euclidean_rmse(&corrected, &held.truth),
        });
    }
    let (x, y) = collect(None);
    let (model, loss_history) = fit_residual_mlp(&x, &residuals(t, &x, &y), t.target(), cfg)?;
    let n = folds.len() as f64;
    let report = CvReport {
        source: t.source(),
        target: t.target(),
        mean_rigid_rmse_cm: folds.iter().map(|f| f.rigid_rmse_cm).sum::<f64>() / n,
        mean_corrected_rmse_cm: folds.iter().map(|f| f.corrected_rmse_cm).sum::<f64>() / n,
        folds,
        loss_history,
    };
    Ok((model, report))
}

/// `R·p + t + f(p)` in evaluation mode.
pub fn predict_corrected(
    t: &RigidTransform,
    model: &ResidualMlp,
    p: &Vector3<f64>,
) -> Result<Vector3<f64>> {
    if model.target() != t.target() {
        return Err(Error::FrameMismatch {
            expected: t.target().to_string(),
            found: model.target().to_string(),
        });
    }
    Ok(t.apply_point(p) + model.forward(p))
}

/// Largest relative difference between analytic and central finite-difference
/// gradients of the evaluation-mode objective:
/// `|a − n| / max(|a| + |n|, 1e-8)`.
///
/// A probe whose ±step flips any ReLU on the batch straddles a kink, where the
/// central difference averages two one-sided slopes; its step is halved until
/// the activation pattern holds (at most 30 times).
pub fn mlp_gradient_check(
    model: &ResidualMlp,
    inputs: &[Vector3<f64>],
    targets: &[Vector3<f64>],
    eps: f64,
) -> Result<f64> {
    if !(eps.is_finite() && eps > 0.0) {
        return Err(Error::invalid(format!(
            "finite-difference step must be > 0, got {eps}"
        )));
    }
    if inputs.is_empty() || inputs.len() != targets.len() {
        return Err(Error::invalid(
            "gradient check needs a non-empty paired batch",
        ));
    }
    let analytic = model.objective_gradient(inputs, targets);
    let mut probe = model.clone();
    let mut worst: f64 = 0.0;
    let pattern = model.activation_pattern(inputs);
    for i in 0..analytic.len() {
        let orig = probe.params[i];
        let mut h = eps;
        let (mut up, mut down);
        let mut tries = 0;
        loop {
            probe.params[i] = orig + h;
            up = probe.objective(inputs, targets);
            let same_up = probe.activation_pattern(inputs) == pattern;
            probe.params[i] = orig - h;
            down = probe.objective(inputs, targets);
            let same_down = probe.activation_pattern(inputs) == pattern;
            tries += 1;
            if (same_up && same_down) || tries == 30 {
                break;
            }
            h /= 2.0;
        }
        probe.params[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let rel = (analytic[i] - numeric).abs() / (analytic[i].abs() + numeric.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud(n: usize, seed: u64) -> Vec<Vector3<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                Vector3::new(
                    rng.random_range(-10.0..10.0),
                    rng.random_range(-10.0..10.0),
                    rng.random_range(-10.0..10.0),
                )
            })
            .collect()
    }

    #[test]
    fn untrained_model_is_rigid_map() {
        let t = RigidTransform::from_angles(
            FrameId::Tracker,
            FrameId::Mtm,
            [30.0, 10.0, -5.0],
            [1.0, 2.0, 3.0],
        );
        let m = ResidualMlp::new(&LAYER_SIZES, FrameId::Mtm, TrainingConfig::default(), 3).unwrap();
        for p in cloud(20, 1) {
            assert_eq!(predict_corrected(&t, &m, &p).unwrap(), t.apply_point(&p));
        }
        let wrong =
            ResidualMlp::new(&LAYER_SIZES, FrameId::Psm, TrainingConfig::default(), 3).unwrap();
        assert!(matches!(
            predict_corrected(&t, &wrong, &Vector3::zeros()),
            Err(Error::FrameMismatch { .. })
        ));
    }

    #[test]
    fn gradient_check_random_model() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = ResidualMlp::random(
            &LAYER_SIZES,
            FrameId::Mtm,
            TrainingConfig::default(),
            &mut rng,
        )
        .unwrap();
        let x = cloud(6, 2);
        let y = cloud(6, 3);
        assert!(mlp_gradient_check(&m, &x, &y, 1e-5).unwrap() < 1e-4);
        assert!(mlp_gradient_check(&m, &x, &y, 0.0).is_err());
    }

    #[test]
    fn gradient_check_zero_model_bias_path() {
        let m = ResidualMlp::new(&LAYER_SIZES, FrameId::Mtm, TrainingConfig::default(), 0).unwrap();
        let mut z = m.clone();
        z.params_mut().iter_mut().for_each(|p| *p = 0.0);
        let x = vec![Vector3::zeros(); 4];
        let y = vec![Vector3::new(1.0, -2.0, 0.5); 4];
        assert!(mlp_gradient_check(&z, &x, &y, 1e-5).unwrap() < 1e-4);
    }

    #[test]
    fn serde_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = ResidualMlp::random(
            &LAYER_SIZES,
            FrameId::Psm,
            TrainingConfig::default(),
            &mut rng,
        )
        .unwrap();
        let s = serde_json::to_string(&m).unwrap();
        let back: ResidualMlp = serde_json::from_str(&s).unwrap();
        assert_eq!(back, m);
        let p = Vector3::new(1.0, 2.0, 3.0);
        assert_eq!(back.forward(&p), m.forward(&p));
    }

    #[test]
    fn cv_has_one_fold_per_trial() {
        let t = RigidTransform::identity(FrameId::Tracker, FrameId::Mtm);
        let trials: Vec<TrialPairs> = (0..4)
            .map(|i| {
                let src = cloud(50, i);
                TrialPairs {
                    trial: format!("T{i}"),
                    truth: src.clone(),
                    source: src,
                }
            })
            .collect();
        let cfg = TrainingConfig {
            epochs: 3,
            ..Default::default()
        };
        let (_, report) = train_residual_mlp(&trials, &t, &cfg).unwrap();
        assert_eq!(report.folds.len(), 4);
        assert_eq!(report.loss_history.len(), 3);
        assert!(train_residual_mlp(&trials[..1], &t, &cfg).is_err());
    }

    #[test]
    fn learns_smooth_residual() {
        let t = RigidTransform::identity(FrameId::Tracker, FrameId::Mtm);
        let x = cloud(1500, 9);
        let y: Vec<Vector3<f64>> = x
            .iter()
            .map(|p| p + 0.02 * Vector3::new(p.x * p.y, p.y * p.z, 0.5 * p.x * p.x))
            .collect();
        let split = 1200;
        let (model, history) = fit_residual_mlp(
            &x[..split],
            &residuals(&t, &x[..split], &y[..split]),
            FrameId::Mtm,
            &TrainingConfig::default(),
        )
        .unwrap();
        assert!(history.last().unwrap() < history.first().unwrap());
        let rigid: Vec<_> = x[split..].iter().map(|p| t.apply_point(p)).collect();
        let corrected: Vec<_> = x[split..]
            .iter()
            .map(|p| predict_corrected(&t, &model, p).unwrap())
            .collect();
        let (r, c) = (
            euclidean_rmse(&rigid, &y[split..]),
            euclidean_rmse(&corrected, &y[split..]),
        );
        assert!(c < r, "corrected {c} rigid {r}");
    }
}
