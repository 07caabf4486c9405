//! Minimal dense feed-forward network with hand-written forward,
//! parameter-gradient, and input-gradient (vector-Jacobian) passes.
//!
//! The same type serves as trained classifier (class-logits head) and as
//! trained noise predictor (regression head, time-conditioned). Hidden
//! activations are smooth so finite-difference checks stay clean.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::guidance::adam::{adam_transform, AdamState};
use crate::schedule::NoiseSchedule;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Softplus,
}

impl Activation {
    fn apply(&self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Softplus => {
                // numerically stable ln(1 + e^z)
                if z > 30.0 {
                    z
                } else {
                    z.exp().ln_1p()
                }
            }
        }
    }

    /// Derivative expressed via pre-activation z and activation a.
    fn derivative(&self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Softplus => 1.0 / (1.0 + (-z).exp()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    ClassLogits,
    Regression,
}

/// Dense multilayer perceptron.
#[derive(Debug, Clone)]
pub struct Mlp {
    layer_dims: Vec<usize>,
    weights: Vec<Array2<f64>>,
    biases: Vec<Array1<f64>>,
    hidden_activation: Activation,
    head: Head,
    time_conditioning: bool,
}

/// Labeled point set used for classifier and denoiser training.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub points: Array2<f64>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.points.ncols()
    }
}

/// The two time features appended under time conditioning: (t/T, abar_t).
/// t = 0 maps to (0, 1), i.e. clean input.
pub fn time_features(t: usize, sched: &NoiseSchedule) -> [f64; 2] {
    [
        t as f64 / sched.num_steps() as f64,
        sched.alpha_bar(t),
    ]
}

impl Mlp {
    /// Random Glorot-scaled initialization, deterministic per seed.
    pub fn new(
        layer_dims: Vec<usize>,
        hidden_activation: Activation,
        head: Head,
        time_conditioning: bool,
        seed: u64,
    ) -> Result<Self> {
        if layer_dims.len() < 2 {
            return Err(Error::invalid("need at least input and output widths"));
        }
        if layer_dims.iter().any(|&d| d == 0) {
            return Err(Error::invalid("layer widths must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in layer_dims.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let scale = (2.0 / (fan_in + fan_out) as f64).sqrt();
            weights.push(Array2::from_shape_fn((fan_in, fan_out), |_| {
                scale * rng.sample::<f64, _>(StandardNormal)
            }));
            biases.push(Array1::zeros(fan_out));
        }
        Ok(Self {
            layer_dims,
            weights,
            biases,
            hidden_activation,
            head,
            time_conditioning,
        })
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn head(&self) -> Head {
        self.head
    }

    pub fn hidden_activation(&self) -> Activation {
        self.hidden_activation
    }

    pub fn time_conditioning(&self) -> bool {
        self.time_conditioning
    }

    /// Width of the raw data part of the input (time features excluded).
    pub fn data_dim(&self) -> usize {
        self.layer_dims[0] - if self.time_conditioning { 2 } else { 0 }
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    /// Assemble the network input from data columns and optional time features.
    fn assemble(&self, x: &Array2<f64>, t_features: Option<&Array2<f64>>) -> Result<Array2<f64>> {
        let expect = self.data_dim();
        if x.ncols() != expect {
            return Err(Error::ShapeMismatch {
                expected: expect,
                got: x.ncols(),
            });
        }
        if self.time_conditioning {
            let tf = t_features.ok_or(Error::MissingHandle("time features"))?;
            if tf.nrows() != x.nrows() || tf.ncols() != 2 {
                return Err(Error::ShapeMismatch {
                    expected: 2,
                    got: tf.ncols(),
                });
            }
            let mut full = Array2::zeros((x.nrows(), self.layer_dims[0]));
            full.slice_mut(ndarray::s![.., ..expect]).assign(x);
            full.slice_mut(ndarray::s![.., expect..]).assign(tf);
            Ok(full)
        } else {
            Ok(x.clone())
        }
    }

    /// Batch forward pass. Rows are items; the class head returns raw logits.
    pub fn forward(&self, x: &Array2<f64>, t_features: Option<&Array2<f64>>) -> Result<Array2<f64>> {
        let input = self.assemble(x, t_features)?;
        Ok(self.run_forward(&input).1)
    }

    /// Forward keeping per-layer activations for the backward passes.
    /// `acts[0]` is the input, `acts[l+1] = act(z_l)` (last layer linear).
    fn run_forward(&self, input: &Array2<f64>) -> (Vec<Array2<f64>>, Array2<f64>) {
        let num_layers = self.weights.len();
        let mut acts: Vec<Array2<f64>> = Vec::with_capacity(num_layers);
        let mut a = input.clone();
        for l in 0..num_layers {
            acts.push(a.clone());
            let mut z = a.dot(&self.weights[l]) + &self.biases[l];
            if l + 1 < num_layers {
                z.mapv_inplace(|v| self.hidden_activation.apply(v));
            }
            a = z;
        }
        (acts, a)
    }

    /// Backward pass from an output cotangent to the full network-input
    /// cotangent, optionally accumulating parameter gradients.
    fn run_backward(
        &self,
        acts: &[Array2<f64>],
        output_cotangent: &Array2<f64>,
        mut param_grads: Option<&mut ParamGrads>,
    ) -> Array2<f64> {
        let num_layers = self.weights.len();
        let mut g = output_cotangent.clone();
        for l in (0..num_layers).rev() {
            if let Some(p) = param_grads.as_deref_mut() {
                p.weights[l] = acts[l].t().dot(&g);
                p.biases[l] = g.sum_axis(Axis(0));
            }
            g = g.dot(&self.weights[l].t());
            if l > 0 {
                // acts[l] holds act(z_{l-1}); recover the derivative from it.
                let a = &acts[l];
                g.zip_mut_with(a, |gv, &av| {
                    // for tanh the derivative needs only a; for softplus it
                    // needs z, recovered as the softplus inverse of a.
                    let d = match self.hidden_activation {
                        Activation::Tanh => 1.0 - av * av,
                        Activation::Softplus => {
                            let z = if av > 30.0 { av } else { (av.exp() - 1.0).ln() };
                            self.hidden_activation.derivative(z, av)
                        }
                    };
                    *gv *= d;
                });
            }
        }
        g
    }

    /// Jacobian-transpose action: `J^T cotangent` per row, where J is the
    /// network's Jacobian with respect to its full input (time-feature
    /// columns included when conditioning).
    pub fn vjp_input(
        &self,
        x: &Array2<f64>,
        t_features: Option<&Array2<f64>>,
        cotangent: &Array2<f64>,
    ) -> Result<Array2<f64>> {
        if cotangent.ncols() != self.output_dim() || cotangent.nrows() != x.nrows() {
            return Err(Error::ShapeMismatch {
                expected: self.output_dim(),
                got: cotangent.ncols(),
            });
        }
        let input = self.assemble(x, t_features)?;
        let (acts, _) = self.run_forward(&input);
        Ok(self.run_backward(&acts, cotangent, None))
    }

    /// Gradient of `log softmax(logits)[target]` with respect to the data
    /// part of the input, one row per item.
    pub fn input_gradient(
        &self,
        x: &Array2<f64>,
        t_features: Option<&Array2<f64>>,
        target: usize,
    ) -> Result<Array2<f64>> {
        if self.head != Head::ClassLogits {
            return Err(Error::invalid(
                "log-prob objective requires a class-logits head",
            ));
        }
        if target >= self.output_dim() {
            return Err(Error::invalid(format!(
                "target class {target} out of range (K = {})",
                self.output_dim()
            )));
        }
        let input = self.assemble(x, t_features)?;
        let (acts, logits) = self.run_forward(&input);
        // d log softmax[y] / d logits = onehot_y - softmax
        let mut cot = softmax_rows(&logits);
        cot.mapv_inplace(|v| -v);
        for mut row in cot.rows_mut() {
            row[target] += 1.0;
        }
        let full = self.run_backward(&acts, &cot, None);
        Ok(full.slice(ndarray::s![.., ..self.data_dim()]).to_owned())
    }

    /// Log-softmax rows of the class head.
    pub fn log_posterior(
        &self,
        x: &Array2<f64>,
        t_features: Option<&Array2<f64>>,
    ) -> Result<Array2<f64>> {
        if self.head != Head::ClassLogits {
            return Err(Error::invalid("log posterior requires a class-logits head"));
        }
        let logits = self.forward(x, t_features)?;
        Ok(log_softmax_rows(&logits))
    }
}

pub(crate) fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    out
}

pub(crate) fn log_softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

struct ParamGrads {
    weights: Vec<Array2<f64>>,
    biases: Vec<Array1<f64>>,
}

impl ParamGrads {
    fn zeros_like(net: &Mlp) -> Self {
        Self {
            weights: net.weights.iter().map(|w| Array2::zeros(w.raw_dim())).collect(),
            biases: net.biases.iter().map(|b| Array1::zeros(b.raw_dim())).collect(),
        }
    }
}

/// Training hyperparameters shared by the classifier and denoiser paths.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub noisy_training: bool,
    pub early_stop_accuracy: f64,
    pub hidden_dims: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 128,
            learning_rate: 1e-3,
            seed: 0,
            noisy_training: false,
            early_stop_accuracy: 0.99,
            hidden_dims: vec![64, 64],
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be >= 1"));
        }
        if !(self.early_stop_accuracy > 0.0 && self.early_stop_accuracy <= 1.0) {
            return Err(Error::invalid("early_stop_accuracy must lie in (0, 1]"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be >= 1"));
        }
        Ok(())
    }
}

/// What a training run did, for logs and sanity tests.
#[derive(Debug, Clone)]
pub struct TrainReport {
    pub epochs_run: usize,
    pub final_val_accuracy: f64,
    pub first_epoch_loss: f64,
    pub final_epoch_loss: f64,
}

struct Optimizer {
    weight_states: Vec<AdamState>,
    bias_states: Vec<AdamState>,
}

impl Optimizer {
    fn new(net: &Mlp, lr: f64) -> Self {
        Self {
            weight_states: net
                .weights
                .iter()
                .map(|w| AdamState::with_eta(w.len(), lr))
                .collect(),
            bias_states: net
                .biases
                .iter()
                .map(|b| AdamState::with_eta(b.len(), lr))
                .collect(),
        }
    }

    fn step(&mut self, net: &mut Mlp, grads: &ParamGrads) {
        for l in 0..net.weights.len() {
            let g: Vec<f64> = grads.weights[l].iter().copied().collect();
            let upd = adam_transform(&g, &mut self.weight_states[l]).expect("shapes fixed");
            for (w, u) in net.weights[l].iter_mut().zip(upd) {
                *w -= u;
            }
            let g: Vec<f64> = grads.biases[l].iter().copied().collect();
            let upd = adam_transform(&g, &mut self.bias_states[l]).expect("shapes fixed");
            for (b, u) in net.biases[l].iter_mut().zip(upd) {
                *b -= u;
            }
        }
    }
}

fn shuffled_indices(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

fn rows(points: &Array2<f64>, idx: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros((idx.len(), points.ncols()));
    for (r, &i) in idx.iter().enumerate() {
        out.row_mut(r).assign(&points.row(i));
    }
    out
}

/// Noise a batch at per-item uniform steps, returning inputs, time features
/// and (for the denoiser) the drawn noise.
fn noise_batch(
    points: &Array2<f64>,
    sched: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let (n, d) = (points.nrows(), points.ncols());
    let mut noisy = Array2::zeros((n, d));
    let mut eps = Array2::zeros((n, d));
    let mut tf = Array2::zeros((n, 2));
    for i in 0..n {
        let t = rng.gen_range(1..=sched.num_steps());
        let ab = sched.alpha_bar(t);
        let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
        for j in 0..d {
            let e: f64 = rng.sample(StandardNormal);
            eps[(i, j)] = e;
            noisy[(i, j)] = sa * points[(i, j)] + sn * e;
        }
        let f = time_features(t, sched);
        tf[(i, 0)] = f[0];
        tf[(i, 1)] = f[1];
    }
    (noisy, tf, eps)
}

/// Fraction of rows whose argmax logit matches the label. Ties break toward
/// the lowest class index.
pub fn classification_accuracy(
    net: &Mlp,
    points: &Array2<f64>,
    t_features: Option<&Array2<f64>>,
    labels: &[usize],
) -> Result<f64> {
    let logits = net.forward(points, t_features)?;
    let mut hits = 0usize;
    for (row, &y) in logits.rows().into_iter().zip(labels) {
        let mut best = 0usize;
        for (k, v) in row.iter().enumerate() {
            if *v > row[best] {
                best = k;
            }
        }
        hits += usize::from(best == y);
    }
    Ok(hits as f64 / labels.len() as f64)
}

/// Accuracy on inputs re-noised at per-item uniform steps (seeded).
/// Time-conditioned networks receive the matching time features.
pub fn noisy_accuracy(
    net: &Mlp,
    data: &Dataset,
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (noisy, tf, _) = noise_batch(&data.points, sched, &mut rng);
    let tfo = net.time_conditioning.then_some(&tf);
    classification_accuracy(net, &noisy, tfo, &data.labels)
}

/// Train a class-logits network. With `noisy_training` every example is
/// re-noised each epoch at a fresh uniform step and the network is
/// time-conditioned; otherwise training and validation are clean.
pub fn train_classifier(
    data: &Dataset,
    cfg: &TrainConfig,
    sched: &NoiseSchedule,
) -> Result<(Mlp, TrainReport)> {
    cfg.validate()?;
    let k = data.num_classes;
    let mut present = vec![false; k];
    for &y in &data.labels {
        if y >= k {
            return Err(Error::invalid(format!("label {y} out of range")));
        }
        present[y] = true;
    }
    if present.iter().filter(|p| **p).count() < 2 {
        return Err(Error::invalid("need at least 2 classes present"));
    }

    let d = data.dim();
    let mut dims = vec![d + if cfg.noisy_training { 2 } else { 0 }];
    dims.extend_from_slice(&cfg.hidden_dims);
    dims.push(k);
    let mut net = Mlp::new(dims, Activation::Tanh, Head::ClassLogits, cfg.noisy_training, cfg.seed)?;
    let mut opt = Optimizer::new(&net, cfg.learning_rate);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let order = shuffled_indices(data.len(), &mut rng);
    let n_train = (data.len() * 9) / 10;
    let (train_idx, val_idx) = order.split_at(n_train.max(1));
    let val_points = rows(&data.points, val_idx);
    let val_labels: Vec<usize> = val_idx.iter().map(|&i| data.labels[i]).collect();

    // fixed noised validation set so early stopping is stable
    let noised_val = if cfg.noisy_training {
        let mut vrng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
        let (nv, tf, _) = noise_batch(&val_points, sched, &mut vrng);
        Some((nv, tf))
    } else {
        None
    };

    let mut report = TrainReport {
        epochs_run: 0,
        final_val_accuracy: 0.0,
        first_epoch_loss: 0.0,
        final_epoch_loss: 0.0,
    };

    for epoch in 0..cfg.epochs {
        let perm = shuffled_indices(train_idx.len(), &mut rng);
        let mut epoch_loss = 0.0;
        for chunk in perm.chunks(cfg.batch_size) {
            let idx: Vec<usize> = chunk.iter().map(|&i| train_idx[i]).collect();
            let xb = rows(&data.points, &idx);
            let yb: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
            let (xb, tfo) = if cfg.noisy_training {
                let (noisy, tf, _) = noise_batch(&xb, sched, &mut rng);
                (noisy, Some(tf))
            } else {
                (xb, None)
            };
            let input = net.assemble(&xb, tfo.as_ref())?;
            let (acts, logits) = net.run_forward(&input);
            let logp = log_softmax_rows(&logits);
            let nb = idx.len() as f64;
            let batch_loss: f64 = yb.iter().enumerate().map(|(i, &y)| -logp[(i, y)]).sum::<f64>() / nb;
            epoch_loss += batch_loss * nb;
            // d(mean CE)/d logits = (softmax - onehot) / n
            let mut cot = softmax_rows(&logits);
            for (i, &y) in yb.iter().enumerate() {
                cot[(i, y)] -= 1.0;
            }
            cot.mapv_inplace(|v| v / nb);
            let mut grads = ParamGrads::zeros_like(&net);
            net.run_backward(&acts, &cot, Some(&mut grads));
            opt.step(&mut net, &grads);
        }
        epoch_loss /= train_idx.len() as f64;
        if epoch == 0 {
            report.first_epoch_loss = epoch_loss;
        }
        report.final_epoch_loss = epoch_loss;
        report.epochs_run = epoch + 1;

        let acc = match &noised_val {
            Some((nv, tf)) => classification_accuracy(&net, nv, Some(tf), &val_labels)?,
            None => classification_accuracy(&net, &val_points, None, &val_labels)?,
        };
        report.final_val_accuracy = acc;
        if acc >= cfg.early_stop_accuracy {
            break;
        }
    }
    Ok((net, report))
}

/// Train a time-conditioned noise predictor by regressing the drawn noise
/// at per-item uniform steps.
pub fn train_denoiser(
    data: &Dataset,
    cfg: &TrainConfig,
    sched: &NoiseSchedule,
) -> Result<(Mlp, TrainReport)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("training data is empty"));
    }
    let d = data.dim();
    let mut dims = vec![d + 2];
    dims.extend_from_slice(&cfg.hidden_dims);
    dims.push(d);
    let mut net = Mlp::new(dims, Activation::Tanh, Head::Regression, true, cfg.seed)?;
    let mut opt = Optimizer::new(&net, cfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut report = TrainReport {
        epochs_run: 0,
        final_val_accuracy: f64::NAN,
        first_epoch_loss: 0.0,
        final_epoch_loss: 0.0,
    };

    for epoch in 0..cfg.epochs {
        let perm = shuffled_indices(data.len(), &mut rng);
        let mut epoch_loss = 0.0;
        for chunk in perm.chunks(cfg.batch_size) {
            let xb = rows(&data.points, chunk);
            let (noisy, tf, eps) = noise_batch(&xb, sched, &mut rng);
            let input = net.assemble(&noisy, Some(&tf))?;
            let (acts, pred) = net.run_forward(&input);
            let diff = &pred - &eps;
            let nb = chunk.len() as f64;
            let batch_loss = diff.iter().map(|v| v * v).sum::<f64>() / (nb * d as f64);
            epoch_loss += batch_loss * nb;
            // d(mean MSE)/d pred = 2 (pred - eps) / (n d)
            let cot = diff.mapv(|v| 2.0 * v / (nb * d as f64));
            let mut grads = ParamGrads::zeros_like(&net);
            net.run_backward(&acts, &cot, Some(&mut grads));
            opt.step(&mut net, &grads);
        }
        epoch_loss /= data.len() as f64;
        if epoch == 0 {
            report.first_epoch_loss = epoch_loss;
        }
        report.final_epoch_loss = epoch_loss;
        report.epochs_run = epoch + 1;
    }
    Ok((net, report))
}

// ---------------------------------------------------------------------------
// model container format

const MODEL_MAGIC: [u8; 4] = *b"CGNN";
const MODEL_VERSION: u32 = 1;

impl Mlp {
    /// Serialize to the flat binary container (little-endian, versioned).
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MODEL_MAGIC);
        out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
        out.push(match self.head {
            Head::ClassLogits => 0,
            Head::Regression => 1,
        });
        out.push(match self.hidden_activation {
            Activation::Tanh => 0,
            Activation::Softplus => 1,
        });
        out.push(u8::from(self.time_conditioning));
        out.extend_from_slice(&(self.layer_dims.len() as u32).to_le_bytes());
        for &d in &self.layer_dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for (w, b) in self.weights.iter().zip(&self.biases) {
            for v in w.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
            for v in b.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        let magic = cur.take::<4>()?;
        if magic != MODEL_MAGIC {
            return Err(Error::BadMagic(magic));
        }
        let version = u32::from_le_bytes(cur.take::<4>()?);
        if version != MODEL_VERSION {
            return Err(Error::FormatVersion {
                found: version,
                expected: MODEL_VERSION,
            });
        }
        let head = match cur.take::<1>()?[0] {
            0 => Head::ClassLogits,
            1 => Head::Regression,
            other => return Err(Error::CorruptHeader(format!("unknown head tag {other}"))),
        };
        let act = match cur.take::<1>()?[0] {
            0 => Activation::Tanh,
            1 => Activation::Softplus,
            other => {
                return Err(Error::CorruptHeader(format!(
                    "unknown activation tag {other}"
                )))
            }
        };
        let time_conditioning = cur.take::<1>()?[0] != 0;
        let n_dims = u32::from_le_bytes(cur.take::<4>()?) as usize;
        if n_dims < 2 || n_dims > 64 {
            return Err(Error::CorruptHeader(format!("implausible layer count {n_dims}")));
        }
        let mut layer_dims = Vec::with_capacity(n_dims);
        for _ in 0..n_dims {
            let d = u32::from_le_bytes(cur.take::<4>()?) as usize;
            if d == 0 {
                return Err(Error::CorruptHeader("zero layer width".into()));
            }
            layer_dims.push(d);
        }
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in layer_dims.windows(2) {
            let (fi, fo) = (w[0], w[1]);
            let mut mat = Array2::zeros((fi, fo));
            for v in mat.iter_mut() {
                *v = f64::from_le_bytes(cur.take::<8>()?);
            }
            let mut b = Array1::zeros(fo);
            for v in b.iter_mut() {
                *v = f64::from_le_bytes(cur.take::<8>()?);
            }
            weights.push(mat);
            biases.push(b);
        }
        Ok(Self {
            layer_dims,
            weights,
            biases,
            hidden_activation: act,
            head,
            time_conditioning,
        })
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        if self.pos + N > self.bytes.len() {
            return Err(Error::Truncated {
                needed: self.pos + N - self.bytes.len(),
            });
        }
        let mut out = [0u8; N];
        out.copy_from_slice(&self.bytes[self.pos..self.pos + N]);
        self.pos += N;
        Ok(out)
    }
}
