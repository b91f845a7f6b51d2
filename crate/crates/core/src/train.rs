//! Toy-scale training on synthetic speakers.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::audio::{random_crop, Waveform};
use crate::config::{KeyValues, ModelConfig};
use crate::error::{Error, Result};
use crate::io::read_text;
use crate::model::ModelParams;
use crate::tensor::{BackwardCtx, BackwardRule, Graph, Real, Tensor, Var};

// ---------------------------------------------------------------------------
// Synthetic speakers

/// Parameters of one artificial voice: a harmonic source with slow vibrato
/// plus noise coloured by a speaker-specific filter.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpeakerSpec {
    pub speaker_id: usize,
    pub fundamental_freq: Real,
    /// Relative amplitude of harmonics 1, 2, 3, ...
    pub harmonic_amplitudes: Vec<Real>,
    pub formant_noise_seed: u64,
    /// Vibrato rate in Hz; 0 disables vibrato.
    pub vibrato_rate: Real,
    /// Noise standard deviation relative to a unit harmonic.
    pub noise_level: Real,
    pub sample_rate: u32,
}

/// Lowest fundamental and the spacing between consecutive speakers.
pub const BASE_F0: Real = 110.0;
pub const F0_STEP: Real = 22.0;
const HARMONICS: usize = 6;
const NOISE_TAPS: usize = 16;
const VIBRATO_DEPTH: Real = 0.01;
const F0_JITTER: Real = 0.01;
const PEAK: Real = 0.9;

/// `n` speakers with fundamentals `F0_STEP` Hz apart and seeded timbres.
pub fn synthetic_speakers(n: usize, seed: u64, sample_rate: u32) -> Vec<SyntheticSpeakerSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| SyntheticSpeakerSpec {
            speaker_id: i,
            fundamental_freq: BASE_F0 + F0_STEP * i as Real,
            harmonic_amplitudes: (0..HARMONICS).map(|_| rng.random_range(0.1..1.0)).collect(),
            formant_noise_seed: rng.random(),
            vibrato_rate: rng.random_range(3.0..7.0),
            noise_level: 0.05,
            sample_rate,
        })
        .collect()
}

fn noise_filter(seed: u64) -> Vec<Real> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let taps: Vec<Real> = (0..NOISE_TAPS)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let norm = taps.iter().map(|t| t * t).sum::<Real>().sqrt();
    taps.into_iter().map(|t| t / norm).collect()
}

/// One utterance of `length` samples. `seed` varies phases, a small
/// fundamental jitter, the vibrato phase and the noise.
pub fn synth_utterance(spec: &SyntheticSpeakerSpec, length: usize, seed: u64) -> Result<Waveform> {
    if length == 0 {
        return Err(Error::Contract("utterance length must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sr = spec.sample_rate as Real;
    let f0 = spec.fundamental_freq * (1.0 + rng.random_range(-F0_JITTER..=F0_JITTER));
    let vib_phase = rng.random_range(0.0..2.0 * PI as Real);
    let phases: Vec<Real> = spec
        .harmonic_amplitudes
        .iter()
        .map(|_| rng.random_range(0.0..2.0 * PI as Real))
        .collect();

    let two_pi = 2.0 * PI as Real;
    let mut out = Vec::with_capacity(length);
    // Running phase of the fundamental, integrated from the instantaneous
    // frequency so vibrato stays continuous.
    let mut theta: Real = 0.0;
    for n in 0..length {
        let t = n as Real / sr;
        let f = if spec.vibrato_rate > 0.0 {
            f0 * (1.0 + VIBRATO_DEPTH * (two_pi * spec.vibrato_rate * t + vib_phase).sin())
        } else {
            f0
        };
        let mut v = 0.0;
        for (k, (&a, &p)) in spec.harmonic_amplitudes.iter().zip(&phases).enumerate() {
            let h = (k + 1) as Real;
            if h * f < sr / 2.0 {
                v += a * (h * theta + p).sin();
            }
        }
        out.push(v);
        theta += two_pi * f / sr;
    }

    if spec.noise_level > 0.0 {
        let taps = noise_filter(spec.formant_noise_seed);
        let white: Vec<Real> = (0..length + taps.len())
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        for (n, o) in out.iter_mut().enumerate() {
            let colored: Real = taps
                .iter()
                .enumerate()
                .map(|(j, &c)| c * white[n + j])
                .sum();
            *o += spec.noise_level * colored;
        }
    }

    let peak = out.iter().fold(0.0 as Real, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        out.iter_mut().for_each(|v| *v *= PEAK / peak);
    }
    Waveform::new(out, spec.sample_rate)
}

/// Labelled utterances for training or evaluation.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub speakers: Vec<SyntheticSpeakerSpec>,
    /// `(speaker index, waveform)`
    pub utterances: Vec<(usize, Waveform)>,
}

impl Dataset {
    /// `per_speaker` utterances of `length` samples for every speaker, with
    /// per-utterance seeds drawn from `seed`.
    pub fn synthesize(
        speakers: &[SyntheticSpeakerSpec],
        per_speaker: usize,
        length: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut utterances = Vec::with_capacity(speakers.len() * per_speaker);
        for (i, spec) in speakers.iter().enumerate() {
            for _ in 0..per_speaker {
                utterances.push((i, synth_utterance(spec, length, rng.random())?));
            }
        }
        Ok(Dataset {
            speakers: speakers.to_vec(),
            utterances,
        })
    }
}

// ---------------------------------------------------------------------------
// Loss

fn check_labels(shape: &[usize], labels: &[usize]) -> Result<(usize, usize)> {
    let &[batch, classes] = shape else {
        return Err(Error::Shape(format!(
            "logits must be [batch, classes], got {shape:?}"
        )));
    };
    if labels.len() != batch {
        return Err(Error::Shape(format!(
            "{} labels for a batch of {batch}",
            labels.len()
        )));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Contract(format!(
            "label {l} out of range for {classes} classes"
        )));
    }
    Ok((batch, classes))
}

/// Row-wise softmax, stabilized by subtracting each row's maximum.
fn softmax_rows(logits: &[Real], classes: usize) -> Vec<Real> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(classes) {
        let m = row.iter().copied().fold(Real::NEG_INFINITY, Real::max);
        let e: Vec<Real> = row.iter().map(|&z| (z - m).exp()).collect();
        let s: Real = e.iter().sum();
        out.extend(e.into_iter().map(|v| v / s));
    }
    out
}

fn cce_from(logits: &[Real], classes: usize, labels: &[usize]) -> Real {
    let total: Real = logits
        .chunks(classes)
        .zip(labels)
        .map(|(row, &l)| {
            let m = row.iter().copied().fold(Real::NEG_INFINITY, Real::max);
            let lse = m + row.iter().map(|&z| (z - m).exp()).sum::<Real>().ln();
            lse - row[l]
        })
        .sum();
    total / labels.len() as Real
}

/// Mean categorical cross-entropy of `logits` `[B, N]` against labels.
pub fn cce_value(logits: &Tensor, labels: &[usize]) -> Result<Real> {
    let (_, classes) = check_labels(logits.shape(), labels)?;
    Ok(cce_from(logits.data(), classes, labels))
}

struct CceRule {
    labels: Vec<usize>,
    classes: usize,
}

impl BackwardRule for CceRule {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<Vec<Option<Tensor>>> {
        let logits = ctx.inputs[0];
        let scale = ctx.grad_output.item() / self.labels.len() as Real;
        let mut g = softmax_rows(logits.data(), self.classes);
        for (b, &l) in self.labels.iter().enumerate() {
            g[b * self.classes + l] -= 1.0;
        }
        g.iter_mut().for_each(|v| *v *= scale);
        Ok(vec![Some(Tensor::new(logits.shape().to_vec(), g)?)])
    }
}

/// Graph version of [`cce_value`].
pub fn cce_loss(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let (_, classes) = check_labels(g.shape(logits), labels)?;
    let value = Tensor::scalar(cce_from(g.value(logits).data(), classes, labels));
    g.push_op(
        "cce_loss",
        value,
        &[logits],
        CceRule {
            labels: labels.to_vec(),
            classes,
        },
    )
}

// ---------------------------------------------------------------------------
// Optimizer

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AmsgradConfig {
    pub lr: Real,
    pub beta1: Real,
    pub beta2: Real,
    pub epsilon: Real,
    pub weight_decay: Real,
}

impl Default for AmsgradConfig {
    fn default() -> Self {
        AmsgradConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// AMSGrad with L2 weight decay folded into the gradient. Both the first
/// moment and the running maximum of the second are bias-corrected.
#[derive(Clone, Debug)]
pub struct Amsgrad {
    pub config: AmsgradConfig,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    v_hat: Vec<Tensor>,
}

impl Amsgrad {
    pub fn new(config: AmsgradConfig) -> Self {
        Amsgrad {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
            v_hat: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Running maximum of the second moment, one tensor per parameter.
    pub fn v_hat(&self) -> &[Tensor] {
        &self.v_hat
    }

    /// Update `params` in place from matching `grads`.
    pub fn step<'a>(
        &mut self,
        params: impl IntoIterator<Item = &'a mut Tensor>,
        grads: &[Tensor],
    ) -> Result<()> {
        let params: Vec<&mut Tensor> = params.into_iter().collect();
        if params.len() != grads.len() {
            return Err(Error::Shape(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(Error::Shape(format!(
                    "gradient {i} shape {:?} != {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            if !g.is_finite() {
                return Err(Error::NonFinite("gradient"));
            }
        }
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| Tensor::zeros(g.shape())).collect();
            self.v = self.m.clone();
            self.v_hat = self.m.clone();
        } else if self.m.len() != grads.len()
            || self
                .m
                .iter()
                .zip(grads)
                .any(|(m, g)| m.shape() != g.shape())
        {
            return Err(Error::Shape("parameter set changed between steps".into()));
        }
        self.step += 1;
        let c = self.config;
        let t = self.step.min(i32::MAX as u64) as i32;
        let (c1, c2) = (1.0 - c.beta1.powi(t), 1.0 - c.beta2.powi(t));
        for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let (m, v, vh) = (
                self.m[i].data_mut(),
                self.v[i].data_mut(),
                self.v_hat[i].data_mut(),
            );
            for (j, (theta, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                let gj = gj + c.weight_decay * *theta;
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gj;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj;
                vh[j] = vh[j].max(v[j]);
                *theta -= c.lr * (m[j] / c1) / ((vh[j] / c2).sqrt() + c.epsilon);
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Training loop

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: AmsgradConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 16,
            seed: 0,
            optimizer: AmsgradConfig::default(),
        }
    }
}

/// Progress report passed to the training observer after every step.
pub struct StepInfo<'a> {
    pub epoch: usize,
    pub loss: Real,
    pub optimizer: &'a Amsgrad,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: ModelParams,
    /// Mean CCE per epoch, weighted by batch size.
    pub loss_history: Vec<Real>,
}

pub fn train_toy(
    config: &ModelConfig,
    data: &Dataset,
    train: &TrainConfig,
) -> Result<TrainOutcome> {
    train_toy_observed(config, data, train, |_| {})
}

/// [`train_toy`] with a callback after every optimizer step.
pub fn train_toy_observed(
    config: &ModelConfig,
    data: &Dataset,
    train: &TrainConfig,
    mut observer: impl FnMut(&StepInfo<'_>),
) -> Result<TrainOutcome> {
    if data.speakers.len() < 2 {
        return Err(Error::Config(format!(
            "training needs at least 2 speakers, got {}",
            data.speakers.len()
        )));
    }
    if config.n_speakers != data.speakers.len() {
        return Err(Error::Config(format!(
            "n_speakers is {} but the dataset has {} speakers",
            config.n_speakers,
            data.speakers.len()
        )));
    }
    if train.batch_size == 0 || train.epochs == 0 {
        return Err(Error::Config(
            "epochs and batch_size must be positive".into(),
        ));
    }
    if data.utterances.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    let mut model = ModelParams::build(config, train.seed)?;
    let mut opt = Amsgrad::new(train.optimizer);
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed ^ 0x5EED_DA7A);
    let mut order: Vec<usize> = (0..data.utterances.len()).collect();
    let mut history = Vec::with_capacity(train.epochs);

    for epoch in 1..=train.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(train.batch_size) {
            let mut crops = Vec::with_capacity(chunk.len() * config.input_len);
            let mut labels = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let (label, w) = &data.utterances[i];
                let crop = random_crop(w.samples(), config.input_len, &mut rng);
                crops.extend(model.preprocess(&crop)?);
                labels.push(*label);
            }
            let loss = train_step(&mut model, &mut opt, crops, &labels)?;
            total += loss * chunk.len() as Real;
            observer(&StepInfo {
                epoch,
                loss,
                optimizer: &opt,
            });
        }
        history.push(total / order.len() as Real);
    }
    Ok(TrainOutcome {
        model,
        loss_history: history,
    })
}

/// One forward/backward/update on a batch of preprocessed crops; returns
/// the batch loss.
pub fn train_step(
    model: &mut ModelParams,
    opt: &mut Amsgrad,
    crops: Vec<Real>,
    labels: &[usize],
) -> Result<Real> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g, true);
    let x = g.constant(Tensor::new(
        vec![labels.len(), model.config().input_len],
        crops,
    )?);
    let pass = model.forward_graph(&mut g, &bound, x, true)?;
    let logits = pass
        .logits
        .ok_or_else(|| Error::Config("model has no output layer (n_speakers = 0)".into()))?;
    let loss = cce_loss(&mut g, logits, labels)?;
    g.backward(loss)?;
    let grads: Vec<Tensor> = bound
        .iter()
        .map(|(_, v)| {
            g.grad(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(g.shape(v)))
        })
        .collect();
    opt.step(model.params_mut().values_mut(), &grads)?;
    model.commit_bn(pass.bn_updates)?;
    Ok(g.value(loss).item())
}

/// `epoch,mean_cce` CSV with a header row and 1-based epochs.
pub fn loss_csv(history: &[Real]) -> String {
    let mut s = String::from("epoch,mean_cce\n");
    for (i, l) in history.iter().enumerate() {
        let _ = writeln!(s, "{},{:.6}", i + 1, l);
    }
    s
}

// ---------------------------------------------------------------------------
// Recipe files

/// Training keys accepted next to the model keys in a toy recipe file.
pub const TRAIN_KEYS: [&str; 8] = [
    "epochs",
    "seed",
    "batch_size",
    "learning_rate",
    "weight_decay",
    "utterances_per_speaker",
    "utterance_len",
    "data_seed",
];

/// Everything needed to reproduce a toy run: model shape, optimizer
/// settings and the synthetic corpus. The number of speakers is the
/// model's `n_speakers`.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyRecipe {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub utterances_per_speaker: usize,
    pub utterance_len: usize,
    pub data_seed: u64,
}

impl Default for ToyRecipe {
    fn default() -> Self {
        ToyRecipe {
            model: ModelConfig::toy(),
            train: TrainConfig::default(),
            utterances_per_speaker: 8,
            utterance_len: 9000,
            data_seed: 7,
        }
    }
}

impl ToyRecipe {
    /// Parse a recipe; absent keys keep the toy defaults.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut kv = KeyValues::parse(text, origin)?;
        let d = ToyRecipe::default();
        let model = ModelConfig::take_from(&mut kv, d.model.clone())?;
        let mut train = d.train.clone();
        let mut r = ToyRecipe { model, ..d };
        if let Some(v) = kv.take_parsed("epochs")? {
            train.epochs = v;
        }
        if let Some(v) = kv.take_parsed("seed")? {
            train.seed = v;
        }
        if let Some(v) = kv.take_parsed("batch_size")? {
            train.batch_size = v;
        }
        if let Some(v) = kv.take_parsed("learning_rate")? {
            train.optimizer.lr = v;
        }
        if let Some(v) = kv.take_parsed("weight_decay")? {
            train.optimizer.weight_decay = v;
        }
        if let Some(v) = kv.take_parsed("utterances_per_speaker")? {
            r.utterances_per_speaker = v;
        }
        if let Some(v) = kv.take_parsed("utterance_len")? {
            r.utterance_len = v;
        }
        if let Some(v) = kv.take_parsed("data_seed")? {
            r.data_seed = v;
        }
        kv.reject_leftovers()?;
        r.train = train;
        Ok(r)
    }

    pub fn load(path: &Path) -> Result<Self> {
        ToyRecipe::parse(&read_text(path)?, &path.display().to_string())
    }

    pub fn speakers(&self) -> Vec<SyntheticSpeakerSpec> {
        synthetic_speakers(
            self.model.n_speakers,
            self.data_seed,
            self.model.sample_rate,
        )
    }

    /// The training corpus.
    pub fn dataset(&self) -> Result<Dataset> {
        if self.utterances_per_speaker == 0 || self.utterance_len == 0 {
            return Err(Error::Config(
                "utterances_per_speaker and utterance_len must be positive".into(),
            ));
        }
        Dataset::synthesize(
            &self.speakers(),
            self.utterances_per_speaker,
            self.utterance_len,
            self.data_seed.wrapping_add(1),
        )
    }

    /// Fresh utterances from the same voices, disjoint from training.
    pub fn held_out(&self, per_speaker: usize, seed: u64) -> Result<Dataset> {
        Dataset::synthesize(&self.speakers(), per_speaker, self.utterance_len, seed)
    }

    pub fn run(&self) -> Result<TrainOutcome> {
        if self.model.n_speakers < 2 {
            return Err(Error::Config(format!(
                "training needs at least 2 speakers, got {}",
                self.model.n_speakers
            )));
        }
        train_toy(&self.model, &self.dataset()?, &self.train)
    }
}
