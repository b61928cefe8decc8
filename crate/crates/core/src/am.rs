//! Acoustic models. The reference model is a frame classifier: a tanh hidden layer
//! over a ±c window of edge-padded frames, then a softmax head. The hidden layer is
//! the "encoder" whose activations serve as embeddings; the head is swappable.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::FeatureMatrix;
use crate::ctc::{ctc_loss_and_logit_grad, min_frames, PosteriorGrid};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"WSAM0001";

/// T×H hidden activations.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    frames: usize,
    dims: usize,
    values: Vec<f64>,
}

impl Embedding {
    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.values[t * self.dims..(t + 1) * self.dims]
    }
}

pub trait AcousticModel: Sync {
    fn posteriors(&self, features: &FeatureMatrix) -> Result<PosteriorGrid>;

    fn embed(&self, features: &FeatureMatrix) -> Result<Embedding>;

    /// Width of the embedding returned by `embed`.
    fn embed_dim(&self) -> usize;

    /// Number of head outputs: CTC tokens including blank, or clusters.
    fn num_outputs(&self) -> usize;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    /// Context half-width c; the model sees frames t−c..=t+c.
    pub context: usize,
    pub hidden: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig { context: 2, hidden: 64 }
    }
}

/// Parameters are kept f32-representable so checkpoints round-trip exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct RefModel {
    context: usize,
    input_dim: usize,
    hidden_dim: usize,
    outputs: usize,
    /// ((2c+1)·D + 1) × H, row-major; the last row is the bias.
    hidden: Vec<f64>,
    /// (H + 1) × K, row-major; the last row is the bias.
    head: Vec<f64>,
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            round_f32(z * scale)
        })
        .collect()
}

fn round_f32(v: f64) -> f64 {
    v as f32 as f64
}

fn log_softmax_in_place(z: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    z.iter_mut().for_each(|v| *v -= lse);
}

impl RefModel {
    pub fn new(arch: ArchConfig, input_dim: usize, outputs: usize, seed: u64) -> Result<Self> {
        if input_dim == 0 || arch.hidden == 0 || outputs == 0 {
            return Err(Error::Invalid("model dimensions must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fan_in = (2 * arch.context + 1) * input_dim + 1;
        let hidden = gaussian(&mut rng, fan_in * arch.hidden, 1.0 / (fan_in as f64).sqrt());
        let mut model = RefModel {
            context: arch.context,
            input_dim,
            hidden_dim: arch.hidden,
            outputs,
            hidden,
            head: Vec::new(),
        };
        model.head = model.fresh_head(outputs, &mut rng);
        Ok(model)
    }

    /// All-zero parameters: uniform posteriors and zero embeddings.
    pub fn zeros(arch: ArchConfig, input_dim: usize, outputs: usize) -> Self {
        let fan_in = (2 * arch.context + 1) * input_dim + 1;
        RefModel {
            context: arch.context,
            input_dim,
            hidden_dim: arch.hidden,
            outputs,
            hidden: vec![0.0; fan_in * arch.hidden],
            head: vec![0.0; (arch.hidden + 1) * outputs],
        }
    }

    fn fresh_head(&self, outputs: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        gaussian(rng, (self.hidden_dim + 1) * outputs, 1.0 / ((self.hidden_dim + 1) as f64).sqrt())
    }

    /// Replaces the head with a freshly initialized one of `outputs` classes.
    pub fn swap_head(&self, outputs: usize, seed: u64) -> Result<RefModel> {
        if outputs == 0 {
            return Err(Error::Invalid("head needs at least one output".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut model = self.clone();
        model.outputs = outputs;
        model.head = self.fresh_head(outputs, &mut rng);
        Ok(model)
    }

    pub fn arch(&self) -> ArchConfig {
        ArchConfig {
            context: self.context,
            hidden: self.hidden_dim,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn window_dim(&self) -> usize {
        (2 * self.context + 1) * self.input_dim + 1
    }

    pub fn hidden_weights(&self) -> &[f64] {
        &self.hidden
    }

    pub fn head_weights(&self) -> &[f64] {
        &self.head
    }

    pub fn hidden_weights_mut(&mut self) -> &mut [f64] {
        &mut self.hidden
    }

    pub fn head_weights_mut(&mut self) -> &mut [f64] {
        &mut self.head
    }

    pub fn num_params(&self) -> usize {
        self.hidden.len() + self.head.len()
    }

    fn check_input(&self, features: &FeatureMatrix) -> Result<()> {
        if features.dims() != self.input_dim {
            return Err(Error::Invalid(format!(
                "model expects {} feature dims, got {}",
                self.input_dim,
                features.dims()
            )));
        }
        Ok(())
    }

    /// Edge-padded context window for frame t, with a trailing 1 for the bias.
    fn window(&self, features: &FeatureMatrix, t: usize, out: &mut Vec<f64>) {
        out.clear();
        let last = features.frames() as isize - 1;
        for off in -(self.context as isize)..=self.context as isize {
            let src = (t as isize + off).clamp(0, last) as usize;
            out.extend(features.row(src).iter().map(|&v| v as f64));
        }
        out.push(1.0);
    }

    fn hidden_into(&self, x: &[f64], h: &mut [f64]) {
        h.iter_mut().for_each(|v| *v = 0.0);
        for (xi, row) in x.iter().zip(self.hidden.chunks_exact(self.hidden_dim)) {
            if *xi != 0.0 {
                for (hj, w) in h.iter_mut().zip(row) {
                    *hj += xi * w;
                }
            }
        }
        h.iter_mut().for_each(|v| *v = v.tanh());
    }

    fn logits_into(&self, h: &[f64], z: &mut [f64]) {
        let k = self.outputs;
        z.copy_from_slice(&self.head[self.hidden_dim * k..]);
        for (hj, row) in h.iter().zip(self.head.chunks_exact(k)) {
            for (zk, w) in z.iter_mut().zip(row) {
                *zk += hj * w;
            }
        }
    }

    /// Per-frame windows, hidden activations and log-posteriors.
    fn forward(&self, features: &FeatureMatrix) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let (t_len, w, hd, k) = (features.frames(), self.window_dim(), self.hidden_dim, self.outputs);
        let mut xs = Vec::with_capacity(t_len * w);
        let mut hs = vec![0.0; t_len * hd];
        let mut zs = vec![0.0; t_len * k];
        let mut x = Vec::with_capacity(w);
        for t in 0..t_len {
            self.window(features, t, &mut x);
            let h = &mut hs[t * hd..(t + 1) * hd];
            self.hidden_into(&x, h);
            let z = &mut zs[t * k..(t + 1) * k];
            self.logits_into(h, z);
            log_softmax_in_place(z);
            xs.extend_from_slice(&x);
        }
        (xs, hs, zs)
    }

    /// Back-propagates dL/dlogits (T×K) into a parameter gradient.
    fn backward(&self, xs: &[f64], hs: &[f64], dz: &[f64]) -> Gradient {
        let (w, hd, k) = (self.window_dim(), self.hidden_dim, self.outputs);
        let mut g = Gradient {
            hidden: vec![0.0; self.hidden.len()],
            head: vec![0.0; self.head.len()],
        };
        let mut da = vec![0.0; hd];
        for ((x, h), d) in xs.chunks_exact(w).zip(hs.chunks_exact(hd)).zip(dz.chunks_exact(k)) {
            for (j, hj) in h.iter().enumerate() {
                let row = &mut g.head[j * k..(j + 1) * k];
                let wrow = &self.head[j * k..(j + 1) * k];
                let mut dh = 0.0;
                for ((gk, dk), wk) in row.iter_mut().zip(d).zip(wrow) {
                    *gk += hj * dk;
                    dh += dk * wk;
                }
                da[j] = dh * (1.0 - hj * hj);
            }
            for (gk, dk) in g.head[hd * k..].iter_mut().zip(d) {
                *gk += dk;
            }
            for (xi, row) in x.iter().zip(g.hidden.chunks_exact_mut(hd)) {
                if *xi != 0.0 {
                    for (gj, dj) in row.iter_mut().zip(&da) {
                        *gj += xi * dj;
                    }
                }
            }
        }
        g
    }

    /// Frame cross-entropy summed over every frame, with its gradient.
    pub fn frame_ce_loss_grad(&self, features: &FeatureMatrix, targets: &[usize]) -> Result<(f64, Gradient)> {
        let (loss, _, g) = self.frame_ce_detail(features, targets, None)?;
        Ok((loss, g))
    }

    /// Returns (total, masked-frame part, gradient). The total always covers every frame.
    fn frame_ce_detail(
        &self,
        features: &FeatureMatrix,
        targets: &[usize],
        mask: Option<&[bool]>,
    ) -> Result<(f64, f64, Gradient)> {
        self.check_input(features)?;
        if targets.len() != features.frames() {
            return Err(Error::Invalid(format!(
                "{} targets for {} frames",
                targets.len(),
                features.frames()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&y| y >= self.outputs) {
            return Err(Error::Invalid(format!("target {bad} outside [0, {})", self.outputs)));
        }
        let (xs, hs, mut zs) = self.forward(features);
        let k = self.outputs;
        let (mut total, mut masked) = (0.0, 0.0);
        for (t, (z, &y)) in zs.chunks_exact_mut(k).zip(targets).enumerate() {
            let l = -z[y];
            total += l;
            if mask.is_some_and(|m| m[t]) {
                masked += l;
            }
            z.iter_mut().for_each(|v| *v = v.exp());
            z[y] -= 1.0;
        }
        Ok((total, masked, self.backward(&xs, &hs, &zs)))
    }

    /// CTC loss of one utterance with its gradient.
    pub fn ctc_loss_grad(&self, features: &FeatureMatrix, target: &[usize]) -> Result<(f64, Gradient)> {
        self.check_input(features)?;
        if let Some(&bad) = target.iter().find(|&&y| y == 0 || y >= self.outputs) {
            return Err(Error::Invalid(format!("CTC label {bad} outside [1, {})", self.outputs)));
        }
        let (xs, hs, zs) = self.forward(features);
        let grid = PosteriorGrid::new(features.frames(), self.outputs, zs)?;
        let (loss, dz) = ctc_loss_and_logit_grad(&grid, target)?;
        Ok((loss, self.backward(&xs, &hs, &dz)))
    }

    fn apply(&mut self, g: &Gradient, step: f64) {
        for (p, d) in self.hidden.iter_mut().zip(&g.hidden) {
            *p = round_f32(*p - step * d);
        }
        for (p, d) in self.head.iter_mut().zip(&g.head) {
            *p = round_f32(*p - step * d);
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(24 + 4 * self.num_params());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        for v in [self.context, self.input_dim, self.hidden_dim, self.outputs] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for &p in self.hidden.iter().chain(&self.head) {
            out.extend_from_slice(&(p as f32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(Error::format("magic", "not a WSAM0001 checkpoint"));
        }
        if bytes.len() < 24 {
            return Err(Error::format("header", "truncated"));
        }
        let dim = |i: usize| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().unwrap()) as usize;
        let (c, d, h, k) = (dim(0), dim(1), dim(2), dim(3));
        if d == 0 || h == 0 || k == 0 {
            return Err(Error::format("dims", "D, H and K must be positive"));
        }
        let mut model = RefModel::zeros(ArchConfig { context: c, hidden: h }, d, k);
        let payload = &bytes[24..];
        if payload.len() != 4 * model.num_params() {
            return Err(Error::format(
                "parameters",
                format!("expected {} values, found {} bytes", model.num_params(), payload.len()),
            ));
        }
        let mut values = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64);
        for p in model.hidden.iter_mut().chain(model.head.iter_mut()) {
            *p = values.next().unwrap();
            if !p.is_finite() {
                return Err(Error::format("parameters", "non-finite value"));
            }
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        RefModel::from_bytes(&bytes)
    }
}

impl AcousticModel for RefModel {
    fn posteriors(&self, features: &FeatureMatrix) -> Result<PosteriorGrid> {
        self.check_input(features)?;
        let (_, _, zs) = self.forward(features);
        PosteriorGrid::new(features.frames(), self.outputs, zs)
    }

    fn embed(&self, features: &FeatureMatrix) -> Result<Embedding> {
        self.check_input(features)?;
        let mut values = vec![0.0; features.frames() * self.hidden_dim];
        let mut x = Vec::with_capacity(self.window_dim());
        for (t, h) in values.chunks_exact_mut(self.hidden_dim).enumerate() {
            self.window(features, t, &mut x);
            self.hidden_into(&x, h);
        }
        Ok(Embedding {
            frames: features.frames(),
            dims: self.hidden_dim,
            values,
        })
    }

    fn embed_dim(&self) -> usize {
        self.hidden_dim
    }

    fn num_outputs(&self) -> usize {
        self.outputs
    }
}

/// Parameter gradient in the model's layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub hidden: Vec<f64>,
    pub head: Vec<f64>,
}

impl Gradient {
    fn add(&mut self, other: &Gradient) {
        for (a, b) in self.hidden.iter_mut().zip(&other.hidden) {
            *a += b;
        }
        for (a, b) in self.head.iter_mut().zip(&other.head) {
            *a += b;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpecAugment {
    pub time_masks: usize,
    pub max_time_width: usize,
    pub freq_masks: usize,
    pub max_freq_width: usize,
}

impl Default for SpecAugment {
    fn default() -> Self {
        SpecAugment {
            time_masks: 1,
            max_time_width: 3,
            freq_masks: 1,
            max_freq_width: 2,
        }
    }
}

/// Time and feature-dimension masking. Masked cells take the utterance mean of their dimension.
pub fn spec_mask(features: &FeatureMatrix, config: SpecAugment, seed: u64) -> FeatureMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means: Vec<f32> = features.column_means().into_iter().map(|m| m as f32).collect();
    let (t_len, d_len) = (features.frames(), features.dims());
    let mut out = features.clone();
    for _ in 0..config.time_masks {
        let width = rng.random_range(0..=config.max_time_width.min(t_len));
        let start = rng.random_range(0..=t_len - width);
        for t in start..start + width {
            out.row_mut(t).copy_from_slice(&means);
        }
    }
    for _ in 0..config.freq_masks {
        let width = rng.random_range(0..=config.max_freq_width.min(d_len));
        let start = rng.random_range(0..=d_len - width);
        for t in 0..t_len {
            for d in start..start + width {
                out.set(t, d, means[d]);
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InputMask {
    /// Probability that a frame starts a masked span.
    pub prob: f64,
    pub span: usize,
}

impl Default for InputMask {
    fn default() -> Self {
        InputMask { prob: 0.08, span: 4 }
    }
}

/// Masks spans of `span` frames, each frame starting one with probability `prob`.
/// Masked frames are replaced by `fill`; the bitmap marks them.
pub fn mask_input(features: &FeatureMatrix, mask: InputMask, fill: &[f32], seed: u64) -> Result<(FeatureMatrix, Vec<bool>)> {
    if fill.len() != features.dims() {
        return Err(Error::Invalid("mask fill length differs from feature dims".into()));
    }
    if !(0.0..=1.0).contains(&mask.prob) {
        return Err(Error::Invalid("mask probability outside [0, 1]".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t_len = features.frames();
    let mut bitmap = vec![false; t_len];
    for t in 0..t_len {
        if rng.random_bool(mask.prob) {
            bitmap[t..(t + mask.span).min(t_len)].iter_mut().for_each(|b| *b = true);
        }
    }
    let mut out = features.clone();
    for (t, &m) in bitmap.iter().enumerate() {
        if m {
            out.row_mut(t).copy_from_slice(fill);
        }
    }
    Ok((out, bitmap))
}

/// Mean feature vector over every frame of every matrix.
pub fn corpus_mean<'a>(features: impl IntoIterator<Item = &'a FeatureMatrix>) -> Vec<f32> {
    let mut sum: Vec<f64> = Vec::new();
    let mut frames = 0usize;
    for m in features {
        if sum.is_empty() {
            sum = vec![0.0; m.dims()];
        }
        for t in 0..m.frames() {
            for (s, &v) in sum.iter_mut().zip(m.row(t)) {
                *s += v as f64;
            }
        }
        frames += m.frames();
    }
    sum.into_iter().map(|s| (s / frames.max(1) as f64) as f32).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Utterances per minibatch; the step uses the batch-mean gradient.
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub spec_augment: Option<SpecAugment>,
    /// Input masking for frame-CE pretraining; ignored by CTC training.
    pub input_mask: Option<InputMask>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.02,
            batch_size: 8,
            epochs: 12,
            seed: 1,
            spec_augment: None,
            input_mask: None,
        }
    }
}

impl TrainConfig {
    /// The full-size recipe: 40 epochs of 128-utterance minibatches.
    pub fn paper_scale() -> Self {
        TrainConfig {
            epochs: 40,
            batch_size: 128,
            spec_augment: Some(SpecAugment::default()),
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Invalid("learning rate must be finite and non-negative".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Invalid("epochs and batch size must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    /// Loss per frame (frame CE) or per utterance (CTC), before the epoch's updates.
    pub mean_loss: f64,
    pub masked_loss: f64,
    pub unmasked_loss: f64,
    pub masked_frames: usize,
    pub frames: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    pub utterances: usize,
    pub skipped: usize,
}

impl TrainReport {
    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.mean_loss).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameExample {
    pub id: String,
    pub features: FeatureMatrix,
    pub targets: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CtcExample {
    pub id: String,
    pub features: FeatureMatrix,
    pub target: Vec<usize>,
}

fn derive_seed(seed: u64, epoch: usize, index: usize, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.set_word_pos(((epoch as u128) << 32) | index as u128);
    rng.random()
}

struct StepOutcome {
    loss: f64,
    masked: f64,
    masked_frames: usize,
    frames: usize,
    grad: Gradient,
}

/// Seeded minibatch SGD. `step` evaluates one utterance; gradients within a batch are
/// computed in parallel and summed in batch order.
fn sgd<F>(model: &mut RefModel, n: usize, config: &TrainConfig, per_frame: bool, step: F) -> Result<Vec<EpochStats>>
where
    F: Fn(&RefModel, usize, usize) -> Result<StepOutcome> + Sync,
{
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let (mut total, mut masked, mut masked_frames, mut frames) = (0.0, 0.0, 0, 0);
        for batch in order.chunks(config.batch_size) {
            let snapshot = &*model;
            let outcomes: Vec<StepOutcome> = batch
                .par_iter()
                .map(|&i| step(snapshot, epoch, i))
                .collect::<Result<_>>()?;
            let mut grad = Gradient {
                hidden: vec![0.0; model.hidden.len()],
                head: vec![0.0; model.head.len()],
            };
            for o in &outcomes {
                grad.add(&o.grad);
                total += o.loss;
                masked += o.masked;
                masked_frames += o.masked_frames;
                frames += o.frames;
            }
            model.apply(&grad, config.learning_rate / batch.len() as f64);
        }
        let denom = if per_frame { frames } else { n };
        history.push(EpochStats {
            mean_loss: total / denom.max(1) as f64,
            masked_loss: masked,
            unmasked_loss: total - masked,
            masked_frames,
            frames,
        });
        log::debug!("epoch {}: loss {:.4}", epoch + 1, total / denom.max(1) as f64);
    }
    Ok(history)
}

/// Frame-level cross-entropy training. With `input_mask` set, each epoch re-masks the
/// inputs with the dataset mean; the loss still covers every frame.
pub fn train_frame_ce(model: &mut RefModel, data: &[FrameExample], config: &TrainConfig) -> Result<TrainReport> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::Invalid("frame-CE training set is empty".into()));
    }
    for ex in data {
        if let Some(&bad) = ex.targets.iter().find(|&&y| y >= model.outputs) {
            return Err(Error::utterance(&ex.id, format!("target {bad} outside [0, {})", model.outputs)));
        }
        if ex.targets.len() != ex.features.frames() {
            return Err(Error::utterance(&ex.id, "target length differs from frame count"));
        }
    }
    let fill = corpus_mean(data.iter().map(|e| &e.features));
    let epochs = sgd(model, data.len(), config, true, |m, epoch, i| {
        let ex = &data[i];
        let mut feats = match config.spec_augment {
            Some(sa) => spec_mask(&ex.features, sa, derive_seed(config.seed, epoch, i, 1)),
            None => ex.features.clone(),
        };
        let mut bitmap = None;
        if let Some(mask) = config.input_mask {
            let (masked, bits) = mask_input(&feats, mask, &fill, derive_seed(config.seed, epoch, i, 2))?;
            feats = masked;
            bitmap = Some(bits);
        }
        let (loss, masked, grad) = m
            .frame_ce_detail(&feats, &ex.targets, bitmap.as_deref())
            .map_err(|e| Error::utterance(&ex.id, e))?;
        Ok(StepOutcome {
            loss,
            masked,
            masked_frames: bitmap.map_or(0, |b| b.iter().filter(|&&x| x).count()),
            frames: ex.targets.len(),
            grad,
        })
    })?;
    Ok(TrainReport {
        epochs,
        utterances: data.len(),
        skipped: 0,
    })
}

/// CTC training. Utterances whose transcript cannot fit their frames are skipped.
pub fn train_ctc(model: &mut RefModel, data: &[CtcExample], config: &TrainConfig) -> Result<TrainReport> {
    config.validate()?;
    let feasible: Vec<&CtcExample> = data
        .iter()
        .filter(|ex| {
            let ok = min_frames(&ex.target) <= ex.features.frames();
            if !ok {
                log::warn!("{}: transcript needs {} frames, has {}; skipped", ex.id, min_frames(&ex.target), ex.features.frames());
            }
            ok
        })
        .collect();
    if feasible.is_empty() {
        return Err(Error::Invalid("CTC training set has no usable utterances".into()));
    }
    let epochs = sgd(model, feasible.len(), config, false, |m, epoch, i| {
        let ex = feasible[i];
        let feats = match config.spec_augment {
            Some(sa) => spec_mask(&ex.features, sa, derive_seed(config.seed, epoch, i, 1)),
            None => ex.features.clone(),
        };
        let (loss, grad) = m.ctc_loss_grad(&feats, &ex.target).map_err(|e| Error::utterance(&ex.id, e))?;
        Ok(StepOutcome {
            loss,
            masked: 0.0,
            masked_frames: 0,
            frames: feats.frames(),
            grad,
        })
    })?;
    Ok(TrainReport {
        epochs,
        utterances: feasible.len(),
        skipped: data.len() - feasible.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn feats(t: usize, d: usize, seed: u64) -> FeatureMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureMatrix::new(t, d, (0..t * d).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap()
    }

    #[test]
    fn zero_model_is_uniform() {
        let m = RefModel::zeros(ArchConfig::default(), 3, 5);
        let g = m.posteriors(&feats(4, 3, 1)).unwrap();
        assert!(g.values().iter().all(|&v| (v + 5f64.ln()).abs() < 1e-12));
        assert!(m.embed(&feats(4, 3, 1)).unwrap().values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hand_fixture() {
        // c=0, D=1, H=1, K=2; x=0.5.
        let mut m = RefModel::zeros(ArchConfig { context: 0, hidden: 1 }, 1, 2);
        m.hidden_weights_mut().copy_from_slice(&[2.0, -0.5]);
        m.head_weights_mut().copy_from_slice(&[1.0, -1.0, 0.25, 0.0]);
        let x = FeatureMatrix::new(1, 1, vec![0.5]).unwrap();
        let h = (2.0f64 * 0.5 - 0.5).tanh();
        let (z0, z1) = (h + 0.25, -h);
        let lse = (z0.exp() + z1.exp()).ln();
        let g = m.posteriors(&x).unwrap();
        assert!((g.get(0, 0) - (z0 - lse)).abs() < 1e-12);
        assert!((g.get(0, 1) - (z1 - lse)).abs() < 1e-12);
        assert!((m.embed(&x).unwrap().row(0)[0] - h).abs() < 1e-15);
    }

    #[test]
    fn swap_head_keeps_hidden() {
        let m = RefModel::new(ArchConfig::default(), 4, 6, 3).unwrap();
        let a = m.swap_head(9, 11).unwrap();
        let b = m.swap_head(9, 11).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.hidden_weights(), m.hidden_weights());
        let x = feats(5, 4, 2);
        assert_eq!(a.embed(&x).unwrap(), m.embed(&x).unwrap());
        let one = m.swap_head(1, 5).unwrap();
        assert!(one.posteriors(&x).unwrap().values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = RefModel::new(ArchConfig { context: 1, hidden: 5 }, 3, 4, 9).unwrap();
        let bytes = m.to_bytes();
        let back = RefModel::from_bytes(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_bytes(), bytes);
        assert!(RefModel::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(RefModel::from_bytes(b"WSFT0001").is_err());
    }

    #[test]
    fn lr_zero_leaves_parameters() {
        let mut m = RefModel::new(ArchConfig { context: 1, hidden: 4 }, 2, 3, 1).unwrap();
        let before = m.clone();
        let data = vec![FrameExample {
            id: "u".into(),
            features: feats(6, 2, 4),
            targets: vec![0, 1, 2, 0, 1, 2],
        }];
        let cfg = TrainConfig {
            learning_rate: 0.0,
            epochs: 2,
            ..TrainConfig::default()
        };
        train_frame_ce(&mut m, &data, &cfg).unwrap();
        assert_eq!(m, before);
    }

    #[test]
    fn bad_targets_rejected() {
        let mut m = RefModel::new(ArchConfig { context: 0, hidden: 2 }, 2, 3, 1).unwrap();
        let data = vec![FrameExample {
            id: "u".into(),
            features: feats(2, 2, 4),
            targets: vec![0, 3],
        }];
        assert!(train_frame_ce(&mut m, &data, &TrainConfig::default()).is_err());
        assert!(train_ctc(&mut m, &[], &TrainConfig::default()).is_err());
    }

    #[test]
    fn ctc_skips_infeasible() {
        let mut m = RefModel::new(ArchConfig { context: 0, hidden: 3 }, 2, 3, 1).unwrap();
        let data = vec![
            CtcExample {
                id: "ok".into(),
                features: feats(6, 2, 1),
                target: vec![1, 2],
            },
            CtcExample {
                id: "short".into(),
                features: feats(2, 2, 2),
                target: vec![1, 1],
            },
        ];
        let r = train_ctc(&mut m, &data, &TrainConfig { epochs: 1, ..TrainConfig::default() }).unwrap();
        assert_eq!((r.utterances, r.skipped), (1, 1));
    }

    #[test]
    fn spec_mask_fills_with_means() {
        let x = feats(20, 6, 3);
        assert_eq!(
            spec_mask(&x, SpecAugment { time_masks: 0, freq_masks: 0, ..SpecAugment::default() }, 1),
            x
        );
        let cfg = SpecAugment {
            time_masks: 2,
            max_time_width: 3,
            freq_masks: 1,
            max_freq_width: 2,
        };
        let y = spec_mask(&x, cfg, 5);
        let means = x.column_means();
        let mut changed_rows = 0;
        for t in 0..20 {
            let mut row_changed = false;
            for d in 0..6 {
                if y.get(t, d) != x.get(t, d) {
                    assert_eq!(y.get(t, d), means[d] as f32);
                    row_changed = true;
                }
            }
            changed_rows += usize::from(row_changed);
        }
        assert!(changed_rows <= 20);
    }

    #[test]
    fn mask_input_extremes() {
        let x = feats(10, 3, 1);
        let fill = [0.0f32; 3];
        let (y, bits) = mask_input(&x, InputMask { prob: 0.0, span: 4 }, &fill, 1).unwrap();
        assert_eq!(y, x);
        assert!(bits.iter().all(|b| !b));
        let (y, bits) = mask_input(&x, InputMask { prob: 1.0, span: 10 }, &fill, 1).unwrap();
        assert!(bits.iter().all(|&b| b));
        assert!(y.values().iter().all(|&v| v == 0.0));
    }
}
