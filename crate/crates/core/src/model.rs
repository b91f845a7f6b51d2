//! The full network: front end, residual blocks with feature map scaling,
//! GRU aggregation and the embedding head.

use std::path::Path;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::archive::{self, Archive};
use crate::audio::{
    layer_norm_waveform, plan_crops, pre_emphasis, Waveform, DEFAULT_LAYER_NORM_EPSILON,
    TTA_OVERLAP,
};
use crate::config::{Frontend, ModelConfig};
use crate::error::{Error, Result};
use crate::fms::{apply_fms_graph, FmsKind, ScaleVars};
use crate::layers::{
    batchnorm, conv1d, fully_connected, gru_forward, maxpool1d, sinc_kernels, BatchNormState,
    GruVars, SincFilterbank, BN_EPSILON, BN_MOMENTUM, LEAKY_RELU_SLOPE,
};
use crate::tensor::{Graph, Real, Tensor, Var};

pub const WEIGHTS_MAGIC: &[u8; 4] = b"RWN2";

/// Filter length of every residual-block convolution.
pub const BLOCK_KERNEL: usize = 3;

/// Utterance-level speaker representation.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding(Vec<Real>);

impl Embedding {
    pub fn new(values: Vec<Real>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Shape("empty embedding".into()));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("embedding"));
        }
        Ok(Embedding(values))
    }

    pub fn values(&self) -> &[Real] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn into_values(self) -> Vec<Real> {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
enum Init {
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`
    FanIn(usize),
    Zeros,
    Ones,
    SincLow,
    SincBand,
}

struct Entry {
    name: String,
    shape: Vec<usize>,
    init: Init,
    buffer: bool,
}

/// Every tensor the configuration needs, in a fixed order.
fn inventory(c: &ModelConfig) -> Vec<Entry> {
    let mut out = Vec::new();
    let mut param = |name: String, shape: Vec<usize>, init| {
        out.push(Entry {
            name,
            shape,
            init,
            buffer: false,
        })
    };
    let f0 = c.frontend_filters;
    match c.frontend {
        Frontend::SincConv => {
            param("frontend.low_hz".into(), vec![f0], Init::SincLow);
            param("frontend.band_hz".into(), vec![f0], Init::SincBand);
        }
        Frontend::PlainConv => {
            let k = c.frontend_filter_len;
            param("frontend.kernels".into(), vec![k, 1, f0], Init::FanIn(k));
        }
    }
    let mut bns = vec![("frontend.bn".to_string(), f0)];
    let mut cin = f0;
    let mut block = 0;
    for &(repeats, cout) in &c.block_group_specs {
        for _ in 0..repeats {
            let p = format!("block{block}");
            if block > 0 {
                bns.push((format!("{p}.bn1"), cin));
            }
            bns.push((format!("{p}.bn2"), cout));
            let fan1 = BLOCK_KERNEL * cin;
            param(
                format!("{p}.conv1.weight"),
                vec![BLOCK_KERNEL, cin, cout],
                Init::FanIn(fan1),
            );
            param(format!("{p}.conv1.bias"), vec![cout], Init::FanIn(fan1));
            let fan2 = BLOCK_KERNEL * cout;
            param(
                format!("{p}.conv2.weight"),
                vec![BLOCK_KERNEL, cout, cout],
                Init::FanIn(fan2),
            );
            param(format!("{p}.conv2.bias"), vec![cout], Init::FanIn(fan2));
            if cin != cout {
                param(
                    format!("{p}.skip.weight"),
                    vec![1, cin, cout],
                    Init::FanIn(cin),
                );
                param(format!("{p}.skip.bias"), vec![cout], Init::FanIn(cin));
            }
            if let Some(kind) = c.fms_kind {
                param(
                    format!("{p}.fms.weight"),
                    vec![cout, cout],
                    Init::FanIn(cout),
                );
                param(format!("{p}.fms.bias"), vec![cout], Init::Zeros);
                if kind == FmsKind::MulAddSeparate {
                    param(
                        format!("{p}.fms2.weight"),
                        vec![cout, cout],
                        Init::FanIn(cout),
                    );
                    param(format!("{p}.fms2.bias"), vec![cout], Init::Zeros);
                }
            }
            cin = cout;
            block += 1;
        }
    }
    let h = c.gru_hidden;
    for gate in ["z", "r", "h"] {
        param(format!("gru.w_{gate}"), vec![cin, h], Init::FanIn(cin));
        param(format!("gru.u_{gate}"), vec![h, h], Init::FanIn(h));
        param(format!("gru.b_{gate}"), vec![h], Init::FanIn(h));
    }
    let e = c.embedding_dim;
    param("embedding.weight".into(), vec![h, e], Init::FanIn(h));
    param("embedding.bias".into(), vec![e], Init::FanIn(h));
    if c.n_speakers > 0 {
        param(
            "output.weight".into(),
            vec![e, c.n_speakers],
            Init::FanIn(e),
        );
        param("output.bias".into(), vec![c.n_speakers], Init::FanIn(e));
    }
    for (prefix, f) in &bns {
        param(format!("{prefix}.gamma"), vec![*f], Init::Ones);
        param(format!("{prefix}.beta"), vec![*f], Init::Zeros);
    }
    for (prefix, f) in bns {
        for (stat, init) in [("running_mean", Init::Zeros), ("running_var", Init::Ones)] {
            out.push(Entry {
                name: format!("{prefix}.{stat}"),
                shape: vec![f],
                init,
                buffer: true,
            });
        }
    }
    out
}

/// Graph handles for every learnable tensor of a model.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: IndexMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("model has no parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }
}

/// Result of building the forward graph.
pub struct ForwardPass {
    pub embedding: Var,
    pub logits: Option<Var>,
    /// Shapes at the front end, after each block group, after the GRU and
    /// at the embedding.
    pub trace: Vec<(String, Vec<usize>)>,
    /// Updated running statistics (training mode only), keyed by layer.
    pub bn_updates: Vec<(String, BatchNormState)>,
}

/// Plain-value output of a single-crop inference forward.
#[derive(Clone, Debug, PartialEq)]
pub struct Forward {
    pub embedding: Embedding,
    pub logits: Vec<Real>,
    pub trace: Vec<(String, Vec<usize>)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    params: IndexMap<String, Tensor>,
    buffers: IndexMap<String, Tensor>,
}

impl ModelParams {
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sinc = match config.frontend {
            Frontend::SincConv => Some(SincFilterbank::mel_init(
                config.frontend_filters,
                config.frontend_filter_len,
                config.sample_rate,
            )?),
            Frontend::PlainConv => None,
        };
        let mut params = IndexMap::new();
        let mut buffers = IndexMap::new();
        for e in inventory(config) {
            let n: usize = e.shape.iter().product();
            let data = match e.init {
                Init::FanIn(fan_in) => {
                    let a = 1.0 / (fan_in as Real).sqrt();
                    (0..n).map(|_| rng.random_range(-a..a)).collect()
                }
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::SincLow => sinc.as_ref().unwrap().f_low.clone(),
                Init::SincBand => sinc.as_ref().unwrap().bandwidth.clone(),
            };
            let t = Tensor::new(e.shape, data)?;
            if e.buffer {
                buffers.insert(e.name, t);
            } else {
                params.insert(e.name, t);
            }
        }
        Ok(ModelParams {
            config: config.clone(),
            params,
            buffers,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Learnable tensors in a fixed order.
    pub fn params(&self) -> &IndexMap<String, Tensor> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut IndexMap<String, Tensor> {
        &mut self.params
    }

    /// Batch-norm running statistics.
    pub fn buffers(&self) -> &IndexMap<String, Tensor> {
        &self.buffers
    }

    pub fn learnable_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn frontend_learnable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|(k, _)| k.starts_with("frontend.") && !k.starts_with("frontend.bn."))
            .map(|(_, t)| t.len())
            .sum()
    }

    /// The bandpass filterbank, when the front end is sinc-based.
    pub fn sinc_filterbank(&self) -> Option<SincFilterbank> {
        let low = self.params.get("frontend.low_hz")?;
        let band = self.params.get("frontend.band_hz")?;
        Some(SincFilterbank {
            f_low: low.data().to_vec(),
            bandwidth: band.data().to_vec(),
            filter_len: self.config.frontend_filter_len,
            sample_rate: self.config.sample_rate,
        })
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(k, t)| {
                let v = if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                };
                (k.clone(), v)
            })
            .collect();
        Bound { vars }
    }

    /// Bind existing graph variables, one per parameter in `params()` order.
    pub fn bind_vars(&self, vars: &[Var]) -> Result<Bound> {
        if vars.len() != self.params.len() {
            return Err(Error::Shape(format!(
                "{} variables for {} parameters",
                vars.len(),
                self.params.len()
            )));
        }
        Ok(Bound {
            vars: self
                .params
                .keys()
                .cloned()
                .zip(vars.iter().copied())
                .collect(),
        })
    }

    fn bn_state(&self, prefix: &str) -> Result<BatchNormState> {
        let get = |stat: &str| {
            self.buffers
                .get(&format!("{prefix}.{stat}"))
                .cloned()
                .ok_or_else(|| Error::Contract(format!("missing statistics for {prefix}")))
        };
        Ok(BatchNormState {
            running_mean: get("running_mean")?,
            running_var: get("running_var")?,
            momentum: BN_MOMENTUM,
            epsilon: BN_EPSILON,
        })
    }

    /// Store running statistics produced by a training-mode forward.
    pub fn commit_bn(&mut self, updates: Vec<(String, BatchNormState)>) -> Result<()> {
        for (prefix, state) in updates {
            for (stat, t) in [
                ("running_mean", state.running_mean),
                ("running_var", state.running_var),
            ] {
                let slot = self
                    .buffers
                    .get_mut(&format!("{prefix}.{stat}"))
                    .ok_or_else(|| Error::Contract(format!("unknown batch norm layer {prefix}")))?;
                if slot.shape() != t.shape() {
                    return Err(Error::Shape(format!("{prefix}.{stat} shape changed")));
                }
                *slot = t;
            }
        }
        Ok(())
    }

    /// Build the network over `x` `[B, input_len]` of preprocessed crops.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        p: &Bound,
        x: Var,
        training: bool,
    ) -> Result<ForwardPass> {
        let c = &self.config;
        let batch = match g.shape(x) {
            &[b, l] if l == c.input_len && b > 0 => b,
            other => {
                return Err(Error::Shape(format!(
                    "model expects [batch, {}] input, got {other:?}",
                    c.input_len
                )))
            }
        };
        let mut trace = Vec::new();
        let mut updates = Vec::new();
        let mut bn = |g: &mut Graph, prefix: &str, h: Var| -> Result<Var> {
            let state = self.bn_state(prefix)?;
            let gamma = p.get(&format!("{prefix}.gamma"))?;
            let beta = p.get(&format!("{prefix}.beta"))?;
            let (y, upd) = batchnorm(g, h, gamma, beta, &state, training)?;
            if let Some(u) = upd {
                updates.push((prefix.to_string(), u));
            }
            Ok(y)
        };

        let h = g.reshape(x, vec![batch, c.input_len, 1])?;
        let kernels = match c.frontend {
            Frontend::SincConv => sinc_kernels(
                g,
                p.get("frontend.low_hz")?,
                p.get("frontend.band_hz")?,
                c.frontend_filter_len,
                c.sample_rate,
            )?,
            Frontend::PlainConv => p.get("frontend.kernels")?,
        };
        let h = conv1d(g, h, kernels, 1, (c.frontend_filter_len - 1) / 2)?;
        let h = maxpool1d(g, h, c.pool_width)?;
        let h = bn(g, "frontend.bn", h)?;
        let mut h = g.leaky_relu(h, LEAKY_RELU_SLOPE)?;
        trace.push(("frontend".to_string(), g.shape(h).to_vec()));

        let mut block = 0;
        for (group, &(repeats, _)) in c.block_group_specs.iter().enumerate() {
            for _ in 0..repeats {
                let name = format!("block{block}");
                let w = |s: &str| p.get(&format!("{name}.{s}"));
                let input = h;
                let mut y = input;
                if block > 0 {
                    y = bn(g, &format!("{name}.bn1"), y)?;
                    y = g.leaky_relu(y, LEAKY_RELU_SLOPE)?;
                }
                y = conv1d(g, y, w("conv1.weight")?, 1, BLOCK_KERNEL / 2)?;
                y = g.add(y, w("conv1.bias")?)?;
                y = bn(g, &format!("{name}.bn2"), y)?;
                y = g.leaky_relu(y, LEAKY_RELU_SLOPE)?;
                y = conv1d(g, y, w("conv2.weight")?, 1, BLOCK_KERNEL / 2)?;
                y = g.add(y, w("conv2.bias")?)?;
                let skip = match (w("skip.weight"), w("skip.bias")) {
                    (Ok(sw), Ok(sb)) => {
                        let s = conv1d(g, input, sw, 1, 0)?;
                        g.add(s, sb)?
                    }
                    _ => input,
                };
                y = g.add(y, skip)?;
                y = maxpool1d(g, y, c.pool_width)?;
                if let Some(kind) = c.fms_kind {
                    let mut layers = vec![ScaleVars {
                        weights: w("fms.weight")?,
                        bias: w("fms.bias")?,
                    }];
                    if kind == FmsKind::MulAddSeparate {
                        layers.push(ScaleVars {
                            weights: w("fms2.weight")?,
                            bias: w("fms2.bias")?,
                        });
                    }
                    y = apply_fms_graph(g, y, kind, &layers)?;
                }
                h = y;
                block += 1;
            }
            trace.push((format!("group{}", group + 1), g.shape(h).to_vec()));
        }

        let gate = |s: &str| -> Result<[Var; 3]> {
            Ok([
                p.get(&format!("gru.{s}_z"))?,
                p.get(&format!("gru.{s}_r"))?,
                p.get(&format!("gru.{s}_h"))?,
            ])
        };
        let gru = GruVars {
            input: gate("w")?,
            hidden: gate("u")?,
            bias: gate("b")?,
        };
        let h = gru_forward(g, h, &gru)?;
        trace.push(("gru".to_string(), g.shape(h).to_vec()));
        let embedding =
            fully_connected(g, h, p.get("embedding.weight")?, p.get("embedding.bias")?)?;
        trace.push(("embedding".to_string(), g.shape(embedding).to_vec()));
        let logits = if c.n_speakers > 0 {
            Some(fully_connected(
                g,
                embedding,
                p.get("output.weight")?,
                p.get("output.bias")?,
            )?)
        } else {
            None
        };
        Ok(ForwardPass {
            embedding,
            logits,
            trace,
            bn_updates: updates,
        })
    }

    /// Inference forward of one preprocessed crop of exactly `input_len`
    /// samples.
    pub fn forward(&self, crop: &[Real]) -> Result<Forward> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let x = g.constant(Tensor::new(vec![1, crop.len()], crop.to_vec())?);
        let pass = self.forward_graph(&mut g, &p, x, false)?;
        Ok(Forward {
            embedding: Embedding::new(g.value(pass.embedding).data().to_vec())?,
            logits: pass
                .logits
                .map_or_else(Vec::new, |l| g.value(l).data().to_vec()),
            trace: pass.trace,
        })
    }

    /// Input normalization matching the front end: layer normalization for
    /// the sinc filterbank, pre-emphasis for a plain convolution.
    pub fn preprocess(&self, crop: &[Real]) -> Result<Vec<Real>> {
        let w = Waveform::new(crop.to_vec(), self.config.sample_rate)?;
        let out = match self.config.frontend {
            Frontend::SincConv => layer_norm_waveform(&w, DEFAULT_LAYER_NORM_EPSILON)?,
            Frontend::PlainConv => pre_emphasis(&w, self.config.pre_emphasis)?,
        };
        Ok(out.into_samples())
    }

    /// Embedding of one raw crop: preprocess, then forward.
    pub fn embed_crop(&self, raw: &[Real]) -> Result<Embedding> {
        Ok(self.forward(&self.preprocess(raw)?)?.embedding)
    }

    /// Utterance embedding. Without TTA a single crop from the start is
    /// used; with TTA the mean over crops overlapping by 20%.
    pub fn extract_embedding(&self, w: &Waveform, tta: bool) -> Result<Embedding> {
        if tta {
            self.extract_embedding_with_overlap(w, TTA_OVERLAP)
        } else {
            self.check_rate(w)?;
            let plan = plan_crops(w.len(), self.config.input_len, 0.0)?;
            let crop = plan.crops(w.samples()).swap_remove(0);
            self.embed_crop(&crop)
        }
    }

    /// Mean embedding over every crop planned with the given overlap.
    pub fn extract_embedding_with_overlap(&self, w: &Waveform, overlap: Real) -> Result<Embedding> {
        self.check_rate(w)?;
        let plan = plan_crops(w.len(), self.config.input_len, overlap)?;
        let mut sum = vec![0.0; self.config.embedding_dim];
        let crops = plan.crops(w.samples());
        for crop in &crops {
            for (s, v) in sum.iter_mut().zip(self.embed_crop(crop)?.values()) {
                *s += v;
            }
        }
        let n = crops.len() as Real;
        Embedding::new(sum.into_iter().map(|s| s / n).collect())
    }

    fn check_rate(&self, w: &Waveform) -> Result<()> {
        if w.sample_rate() != self.config.sample_rate {
            return Err(Error::Contract(format!(
                "waveform sampled at {} Hz, model expects {} Hz",
                w.sample_rate(),
                self.config.sample_rate
            )));
        }
        Ok(())
    }

    pub fn to_archive(&self) -> Archive {
        let tensors = self
            .params
            .iter()
            .chain(&self.buffers)
            .map(|(k, t)| (k.clone(), t.clone()))
            .collect();
        Archive {
            meta: self.config.to_text(),
            tensors,
        }
    }

    /// Rebuild from an archive, checking that its tensors are exactly the
    /// ones its stored configuration calls for.
    pub fn from_archive(archive: Archive) -> Result<Self> {
        let config = ModelConfig::parse(&archive.meta, "<weights metadata>")
            .map_err(|e| Error::Format(format!("stored configuration is invalid: {e}")))?;
        let mut tensors = archive.tensors;
        let mut params = IndexMap::new();
        let mut buffers = IndexMap::new();
        for e in inventory(&config) {
            let t = tensors
                .shift_remove(&e.name)
                .ok_or_else(|| Error::Format(format!("missing tensor {}", e.name)))?;
            if t.shape() != e.shape.as_slice() {
                return Err(Error::Format(format!(
                    "tensor {} has shape {:?}, configuration implies {:?}",
                    e.name,
                    t.shape(),
                    e.shape
                )));
            }
            if !t.is_finite() {
                return Err(Error::Format(format!(
                    "tensor {} holds non-finite values",
                    e.name
                )));
            }
            if e.buffer {
                buffers.insert(e.name, t);
            } else {
                params.insert(e.name, t);
            }
        }
        if let Some(extra) = tensors.keys().next() {
            return Err(Error::Format(format!("unexpected tensor {extra}")));
        }
        Ok(ModelParams {
            config,
            params,
            buffers,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        archive::save(path, WEIGHTS_MAGIC, &self.to_archive())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(archive::load(path, WEIGHTS_MAGIC)?)
    }

    /// Load, requiring the stored configuration to equal `expected`.
    pub fn load_expecting(path: &Path, expected: &ModelConfig) -> Result<Self> {
        let m = Self::load(path)?;
        if let Some(field) = expected.first_difference(&m.config) {
            return Err(Error::Config(format!(
                "weights in {} were built with a different {field}",
                path.display()
            )));
        }
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::cyclic_extend;

    fn toy_input(cfg: &ModelConfig, seed: u64, len: usize) -> Waveform {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = (0..len)
            .map(|i| 0.5 * (i as Real * 0.03).sin() + 0.1 * rng.random_range(-1.0..1.0))
            .collect();
        Waveform::new(s, cfg.sample_rate).unwrap()
    }

    #[test]
    fn canonical_inventory() {
        let m = ModelParams::build(&ModelConfig::default(), 0).unwrap();
        let blocks: std::collections::BTreeSet<_> = m
            .params()
            .keys()
            .filter_map(|k| k.strip_prefix("block").and_then(|r| r.split('.').next()))
            .collect();
        assert_eq!(blocks.len(), 6);
        let fms = m
            .params()
            .keys()
            .filter(|k| k.ends_with(".fms.weight"))
            .count();
        assert_eq!(fms, 6);
        assert_eq!(m.frontend_learnable_count(), 256);
        // Only the transition into the wider group needs a projection.
        let skips: Vec<_> = m
            .params()
            .keys()
            .filter(|k| k.ends_with("skip.weight"))
            .collect();
        assert_eq!(skips, vec!["block2.skip.weight"]);
        // The first block has no leading normalization.
        assert!(!m.buffers().contains_key("block0.bn1.running_mean"));
        assert!(m.buffers().contains_key("block1.bn1.running_mean"));
        assert!(!m.params().contains_key("output.weight"));
    }

    #[test]
    fn baseline_inventory_has_no_scaling_or_sinc() {
        let cfg = ModelConfig {
            frontend: Frontend::PlainConv,
            fms_kind: None,
            ..ModelConfig::default()
        };
        let m = ModelParams::build(&cfg, 0).unwrap();
        assert!(m.params().keys().all(|k| !k.contains(".fms")));
        assert!(m.sinc_filterbank().is_none());
        assert_eq!(m.params()["frontend.kernels"].shape(), &[251, 1, 128]);
        assert_eq!(m.frontend_learnable_count(), 251 * 128);
    }

    #[test]
    fn separate_scaling_has_two_layers_per_block() {
        let cfg = ModelConfig {
            fms_kind: Some(FmsKind::MulAddSeparate),
            ..ModelConfig::toy()
        };
        let m = ModelParams::build(&cfg, 0).unwrap();
        assert_eq!(
            m.params().keys().filter(|k| k.contains(".fms2.")).count(),
            12
        );
    }

    #[test]
    fn build_is_deterministic_and_seed_dependent() {
        let cfg = ModelConfig::toy();
        let a = ModelParams::build(&cfg, 7).unwrap();
        assert_eq!(a, ModelParams::build(&cfg, 7).unwrap());
        assert_ne!(a, ModelParams::build(&cfg, 8).unwrap());
        assert!(a.params()["block0.fms.bias"]
            .data()
            .iter()
            .all(|&v| v == 0.0));
        assert!(a.params()["frontend.bn.gamma"]
            .data()
            .iter()
            .all(|&v| v == 1.0));
    }

    #[test]
    fn invalid_config_is_rejected() {
        let cfg = ModelConfig {
            frontend_filter_len: 10,
            ..ModelConfig::toy()
        };
        assert!(matches!(ModelParams::build(&cfg, 0), Err(Error::Config(_))));
    }

    #[test]
    fn toy_forward_shapes_and_determinism() {
        let cfg = ModelConfig::toy();
        let m = ModelParams::build(&cfg, 1).unwrap();
        let x = m
            .preprocess(toy_input(&cfg, 0, cfg.input_len).samples())
            .unwrap();
        let a = m.forward(&x).unwrap();
        let shapes: Vec<_> = a.trace.iter().map(|(_, s)| s.clone()).collect();
        assert_eq!(
            shapes,
            vec![
                vec![1, 2187, 16],
                vec![1, 243, 16],
                vec![1, 3, 32],
                vec![1, 64],
                vec![1, 64]
            ]
        );
        assert_eq!(a.logits.len(), 8);
        let b = ModelParams::build(&cfg, 1).unwrap().forward(&x).unwrap();
        let bits = |f: &Forward| {
            f.embedding
                .values()
                .iter()
                .map(|v| v.to_bits())
                .collect::<Vec<_>>()
        };
        assert_eq!(bits(&a), bits(&b));

        assert!(matches!(m.forward(&x[1..]), Err(Error::Shape(_))));
    }

    #[test]
    fn training_forward_returns_statistics_for_every_norm_layer() {
        let cfg = ModelConfig::toy();
        let m = ModelParams::build(&cfg, 1).unwrap();
        let mut g = Graph::new();
        let p = m.bind(&mut g, true);
        let crops: Vec<Real> = (0..2)
            .flat_map(|s| {
                m.preprocess(toy_input(&cfg, s, cfg.input_len).samples())
                    .unwrap()
            })
            .collect();
        let x = g.constant(Tensor::new(vec![2, cfg.input_len], crops).unwrap());
        let pass = m.forward_graph(&mut g, &p, x, true).unwrap();
        assert_eq!(pass.bn_updates.len(), m.buffers().len() / 2);
        let mut m2 = m.clone();
        m2.commit_bn(pass.bn_updates).unwrap();
        assert_ne!(m2.buffers(), m.buffers());
        assert_eq!(m2.params(), m.params());
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.bin");
        let cfg = ModelConfig {
            fms_kind: Some(FmsKind::MulAddSeparate),
            ..ModelConfig::toy()
        };
        let m = ModelParams::build(&cfg, 3).unwrap();
        m.save(&path).unwrap();
        let back = ModelParams::load(&path).unwrap();
        assert_eq!(back, m);
        let x = m
            .preprocess(toy_input(&cfg, 1, cfg.input_len).samples())
            .unwrap();
        assert_eq!(m.forward(&x).unwrap(), back.forward(&x).unwrap());

        let other = ModelConfig {
            gru_hidden: 32,
            ..cfg.clone()
        };
        let err = ModelParams::load_expecting(&path, &other).unwrap_err();
        assert!(
            matches!(err, Error::Config(ref m) if m.contains("gru_hidden")),
            "{err}"
        );
        ModelParams::load_expecting(&path, &cfg).unwrap();

        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
        assert!(matches!(ModelParams::load(&path), Err(Error::Format(_))));
    }

    #[test]
    fn archive_with_wrong_inventory_is_rejected() {
        let m = ModelParams::build(&ModelConfig::toy(), 0).unwrap();
        let mut a = m.to_archive();
        a.tensors.shift_remove("gru.b_z");
        assert!(matches!(
            ModelParams::from_archive(a),
            Err(Error::Format(_))
        ));
        let mut a = m.to_archive();
        a.meta = a.meta.replace("gru_hidden = 64", "gru_hidden = 63");
        assert!(matches!(
            ModelParams::from_archive(a),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn tta_on_exact_length_matches_single_crop() {
        let cfg = ModelConfig::toy();
        let m = ModelParams::build(&cfg, 2).unwrap();
        let w = toy_input(&cfg, 4, cfg.input_len);
        assert_eq!(
            m.extract_embedding(&w, true).unwrap(),
            m.extract_embedding(&w, false).unwrap()
        );
    }

    #[test]
    fn tta_is_the_mean_of_planned_crops() {
        let cfg = ModelConfig::toy();
        let m = ModelParams::build(&cfg, 2).unwrap();
        let w = toy_input(&cfg, 5, 2 * cfg.input_len);
        let got = m.extract_embedding(&w, true).unwrap();
        // Crops at 0, floor(0.8 L) and L.
        let hop = (cfg.input_len as f64 * 0.8).floor() as usize;
        let starts = [0, hop, cfg.input_len];
        let mut expected = vec![0.0; cfg.embedding_dim];
        for s in starts {
            let e = m.embed_crop(&w.samples()[s..s + cfg.input_len]).unwrap();
            for (a, b) in expected.iter_mut().zip(e.values()) {
                *a += b / 3.0;
            }
        }
        for (a, b) in got.values().iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn tta_ignores_an_appended_copy_when_crops_tile_exactly() {
        let cfg = ModelConfig::toy();
        let m = ModelParams::build(&cfg, 2).unwrap();
        let w = toy_input(&cfg, 6, 2 * cfg.input_len);
        let doubled = Waveform::new(
            cyclic_extend(w.samples(), 4 * cfg.input_len),
            cfg.sample_rate,
        )
        .unwrap();
        let a = m.extract_embedding_with_overlap(&w, 0.0).unwrap();
        let b = m.extract_embedding_with_overlap(&doubled, 0.0).unwrap();
        for (x, y) in a.values().iter().zip(b.values()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn short_input_is_cyclically_extended() {
        let cfg = ModelConfig::toy();
        let m = ModelParams::build(&cfg, 2).unwrap();
        let w = toy_input(&cfg, 7, 1000);
        let e = m.extract_embedding(&w, false).unwrap();
        let expected = m
            .embed_crop(&cyclic_extend(w.samples(), cfg.input_len))
            .unwrap();
        assert_eq!(e, expected);
        let wrong_rate = Waveform::new(w.samples().to_vec(), 8000).unwrap();
        assert!(m.extract_embedding(&wrong_rate, false).is_err());
    }
}
