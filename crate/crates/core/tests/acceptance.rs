//! Acceptance checks, one line per criterion. Runs without the libtest
//! harness so the summary is always printed; exits nonzero on any failure.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rawnet2::eval::{self, compute_rer, cosine, eer_from_pairs, EmbeddingStore, Label, Trial};
use rawnet2::fms::{apply_fms, apply_fms_graph, FmsKind, FmsParams, ScaleLayer, ScaleVars};
use rawnet2::gradcheck::{check_gradients, GradCheck, GradCheckReport};
use rawnet2::layers::{
    bandpass_kernels, batchnorm, conv1d, fully_connected, gru_forward, materialize_sinc, maxpool1d,
    sinc_kernels, BatchNormState, GruVars, SincFilterbank,
};
use rawnet2::model::Forward;
use rawnet2::train::{
    cce_loss, train_toy_observed, Amsgrad, AmsgradConfig, ToyRecipe, TrainOutcome,
};
use rawnet2::{Graph, ModelConfig, ModelParams, Real, Result, Tensor, Var};

type Outcome = std::result::Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

// ---------------------------------------------------------------------------
// 1. Shapes

fn shapes() -> Outcome {
    let cfg = ModelConfig::default();
    let model = ModelParams::build(&cfg, 0).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let raw: Vec<Real> = (0..cfg.input_len)
        .map(|_| rng.random_range(-0.5..0.5))
        .collect();
    let start = Instant::now();
    let x = model.preprocess(&raw).map_err(|e| e.to_string())?;
    let f: Forward = model.forward(&x).map_err(|e| e.to_string())?;
    let took = start.elapsed();
    let got: Vec<Vec<usize>> = f.trace.iter().map(|(_, s)| s[1..].to_vec()).collect();
    let want = vec![
        vec![19683, 128],
        vec![2187, 128],
        vec![27, 256],
        vec![1024],
        vec![1024],
    ];
    ensure(got == want, || format!("trace {got:?}, expected {want:?}"))?;
    ensure(f.embedding.dim() == 1024, || {
        format!("embedding dim {}", f.embedding.dim())
    })?;
    ensure(took < Duration::from_secs(60), || {
        format!("forward took {took:?}")
    })?;
    Ok(format!("trace {got:?}, forward {:.1}s", took.as_secs_f64()))
}

// ---------------------------------------------------------------------------
// 2. Gradients

const SEEDS: u64 = 5;
const GRAD_TOL: Real = 1e-4;

/// Loss `sum(y * r)` for a fixed random readout `r`, so every output
/// element carries a distinct weight.
fn readout(g: &mut Graph, y: Var, r: &Tensor) -> Result<Var> {
    let r = g.constant(r.clone());
    let p = g.mul(y, r)?;
    g.sum_all(p)
}

fn check_case(
    name: &str,
    cfg: GradCheck,
    make: impl Fn(&mut ChaCha8Rng) -> (Vec<Tensor>, Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>),
) -> std::result::Result<(Real, usize), String> {
    let mut worst: Real = 0.0;
    let mut refined = 0;
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let (inputs, f) = make(&mut rng);
        let r: GradCheckReport =
            check_gradients(&inputs, GradCheck { seed, ..cfg }, |g, v| f(g, v))
                .map_err(|e| format!("{name}: {e}"))?;
        ensure(r.checked > 0, || format!("{name}: nothing checked"))?;
        ensure(r.max_rel_error < GRAD_TOL, || {
            format!("{name} seed {seed}: {r:?}")
        })?;
        worst = worst.max(r.max_rel_error);
        refined += r.refined;
    }
    Ok((worst, refined))
}

fn gradients() -> Outcome {
    type Case = Box<
        dyn Fn(&mut ChaCha8Rng) -> (Vec<Tensor>, Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>),
    >;
    let mut cases: Vec<(String, Case)> = Vec::new();

    cases.push((
        "conv1d".into(),
        Box::new(|rng| {
            let (x, k, r) = (
                random(&[2, 9, 3], rng),
                random(&[3, 3, 4], rng),
                random(&[2, 9, 4], rng),
            );
            (
                vec![x, k],
                Box::new(move |g, v| {
                    let y = conv1d(g, v[0], v[1], 1, 1)?;
                    readout(g, y, &r)
                }),
            )
        }),
    ));
    cases.push((
        "sinc".into(),
        Box::new(|rng| {
            // Wide enough that some filters sit on the Nyquist clamps.
            let low = Tensor::vector((0..8).map(|_| rng.random_range(-8000.0..8000.0)).collect());
            let band = Tensor::vector((0..8).map(|_| rng.random_range(-6000.0..6000.0)).collect());
            let r = random(&[31, 1, 8], rng);
            (
                vec![low, band],
                Box::new(move |g, v| {
                    let k = sinc_kernels(g, v[0], v[1], 31, 16000)?;
                    let sq = g.mul(k, k)?;
                    readout(g, sq, &r)
                }),
            )
        }),
    ));
    cases.push((
        "batchnorm".into(),
        Box::new(|rng| {
            let (x, gamma, beta, r) = (
                random(&[3, 5, 4], rng),
                random(&[4], rng),
                random(&[4], rng),
                random(&[3, 5, 4], rng),
            );
            (
                vec![x, gamma, beta],
                Box::new(move |g, v| {
                    let (y, _) = batchnorm(g, v[0], v[1], v[2], &BatchNormState::new(4), true)?;
                    readout(g, y, &r)
                }),
            )
        }),
    ));
    cases.push((
        "maxpool".into(),
        Box::new(|rng| {
            let (x, r) = (random(&[2, 9, 3], rng), random(&[2, 3, 3], rng));
            (
                vec![x],
                Box::new(move |g, v| {
                    let y = maxpool1d(g, v[0], 3)?;
                    readout(g, y, &r)
                }),
            )
        }),
    ));
    cases.push((
        "activations".into(),
        Box::new(|rng| {
            let (x, r) = (random(&[4, 6], rng), random(&[4, 6], rng));
            (
                vec![x],
                Box::new(move |g, v| {
                    let a = g.leaky_relu(v[0], 0.3)?;
                    let b = g.sigmoid(a)?;
                    let c = g.tanh(v[0])?;
                    let y = g.add(b, c)?;
                    readout(g, y, &r)
                }),
            )
        }),
    ));
    cases.push((
        "fully_connected".into(),
        Box::new(|rng| {
            let (x, w, b, r) = (
                random(&[3, 5], rng),
                random(&[5, 4], rng),
                random(&[4], rng),
                random(&[3, 4], rng),
            );
            (
                vec![x, w, b],
                Box::new(move |g, v| {
                    let y = fully_connected(g, v[0], v[1], v[2])?;
                    readout(g, y, &r)
                }),
            )
        }),
    ));
    cases.push((
        "gru".into(),
        Box::new(|rng| {
            let mut inputs = vec![random(&[2, 4, 3], rng)];
            inputs.extend((0..3).map(|_| random(&[3, 5], rng)));
            inputs.extend((0..3).map(|_| random(&[5, 5], rng)));
            inputs.extend((0..3).map(|_| random(&[5], rng)));
            let r = random(&[2, 5], rng);
            (
                inputs,
                Box::new(move |g, v| {
                    let p = GruVars {
                        input: [v[1], v[2], v[3]],
                        hidden: [v[4], v[5], v[6]],
                        bias: [v[7], v[8], v[9]],
                    };
                    let y = gru_forward(g, v[0], &p)?;
                    readout(g, y, &r)
                }),
            )
        }),
    ));
    cases.push((
        "cce".into(),
        Box::new(|rng| {
            let logits = random(&[4, 5], rng).map(|v| 3.0 * v);
            let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..5)).collect();
            (
                vec![logits],
                Box::new(move |g, v| cce_loss(g, v[0], &labels)),
            )
        }),
    ));
    for kind in FmsKind::ALL {
        cases.push((
            format!("fms {}", kind.name()),
            Box::new(move |rng| {
                let mut inputs = vec![random(&[2, 6, 4], rng)];
                for _ in 0..kind.vectors() {
                    inputs.push(random(&[4, 4], rng));
                    inputs.push(random(&[4], rng));
                }
                let r = random(&[2, 6, 4], rng);
                (
                    inputs,
                    Box::new(move |g, v| {
                        let layers: Vec<ScaleVars> = v[1..]
                            .chunks(2)
                            .map(|p| ScaleVars {
                                weights: p[0],
                                bias: p[1],
                            })
                            .collect();
                        let y = apply_fms_graph(g, v[0], kind, &layers)?;
                        readout(g, y, &r)
                    }),
                )
            }),
        ));
    }

    let mut summary = Vec::new();
    for (name, make) in &cases {
        let (worst, refined) = check_case(name, GradCheck::default(), make)?;
        summary.push(format!("{name} {worst:.1e}{}", refined_note(refined)));
    }
    let (e2e, refined) = end_to_end_gradients()?;
    summary.push(format!("toy end-to-end {e2e:.1e}{}", refined_note(refined)));
    Ok(summary.join(", "))
}

fn refined_note(refined: usize) -> String {
    if refined == 0 {
        String::new()
    } else {
        format!(" ({refined} stencils shrunk at kinks)")
    }
}

/// Entries sampled per parameter tensor in the full-model check.
const E2E_ENTRIES: usize = 3;

fn end_to_end_gradients() -> std::result::Result<(Real, usize), String> {
    let cfg = ModelConfig::toy();
    let mut worst: Real = 0.0;
    let mut refined = 0;
    for seed in 0..SEEDS {
        let model = ModelParams::build(&cfg, seed).map_err(|e| e.to_string())?;
        let mut rng = ChaCha8Rng::seed_from_u64(2000 + seed);
        let crops: Vec<Real> = (0..2)
            .flat_map(|_| {
                let raw: Vec<Real> = (0..cfg.input_len)
                    .map(|_| rng.random_range(-0.5..0.5))
                    .collect();
                model.preprocess(&raw).unwrap()
            })
            .collect();
        let x = Tensor::new(vec![2, cfg.input_len], crops).unwrap();
        let labels = [
            rng.random_range(0..cfg.n_speakers),
            rng.random_range(0..cfg.n_speakers),
        ];
        // Mel initialization puts the top cutoff exactly on the Nyquist clamp,
        // where a central difference straddles the kink. Shift every cutoff
        // parameter by 1 to 25 Hz so the check runs at a generic point.
        let inputs: Vec<Tensor> = model
            .params()
            .iter()
            .map(|(name, t)| {
                let mut t = t.clone();
                if name == "frontend.low_hz" || name == "frontend.band_hz" {
                    for v in t.data_mut() {
                        let shift: Real = rng.random_range(1.0..25.0);
                        *v += if rng.random() { shift } else { -shift };
                    }
                }
                t
            })
            .collect();
        let check = GradCheck {
            max_entries: Some(E2E_ENTRIES),
            seed,
            ..GradCheck::default()
        };
        let r = check_gradients(&inputs, check, |g, v| {
            let bound = model.bind_vars(v)?;
            let x = g.constant(x.clone());
            let pass = model.forward_graph(g, &bound, x, true)?;
            cce_loss(
                g,
                pass.logits.expect("toy model has an output layer"),
                &labels,
            )
        })
        .map_err(|e| e.to_string())?;
        ensure(r.max_rel_error < GRAD_TOL, || {
            format!("toy end-to-end seed {seed}: {r:?}")
        })?;
        worst = worst.max(r.max_rel_error);
        refined += r.refined;
    }
    Ok((worst, refined))
}

// ---------------------------------------------------------------------------
// 3. FMS algebra

/// Scale vector of a `[T, F]` map, recomputed with explicit loops.
fn scale_oracle(c: &Tensor, l: &ScaleLayer) -> Vec<Real> {
    let (t, f) = (c.shape()[0], c.shape()[1]);
    let mut mean = vec![0.0; f];
    for i in 0..t {
        for j in 0..f {
            mean[j] += c.data()[i * f + j];
        }
    }
    for m in &mut mean {
        *m /= t as Real;
    }
    (0..f)
        .map(|j| {
            let mut z = l.bias.data()[j];
            for k in 0..f {
                z += mean[k] * l.weights.data()[k * f + j];
            }
            1.0 / (1.0 + (-z).exp())
        })
        .collect()
}

/// Loop-by-loop recomputation of every scaling mechanism.
fn fms_oracle(c: &Tensor, kind: FmsKind, p: &FmsParams) -> Vec<Real> {
    let (t, f) = (c.shape()[0], c.shape()[1]);
    let scale = |l: &ScaleLayer| scale_oracle(c, l);
    let s1 = scale(&p.scale);
    let s2 = p.second.as_ref().map(scale);
    let mut out = vec![0.0; t * f];
    for i in 0..t {
        for j in 0..f {
            let x = c.data()[i * f + j];
            out[i * f + j] = match kind {
                FmsKind::Add => x + s1[j],
                FmsKind::Mul => x * s1[j],
                FmsKind::AddMul => (x + s1[j]) * s1[j],
                FmsKind::MulAdd => x * s1[j] + s1[j],
                FmsKind::MulAddSeparate => x * s1[j] + s2.as_ref().unwrap()[j],
            };
        }
    }
    out
}

fn fms_algebra() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst_identity: Real = 0.0;
    let mut worst_oracle: Real = 0.0;
    for _ in 0..1000 {
        let t = rng.random_range(1..12);
        let f = rng.random_range(1..9);
        let c = random(&[t, f], &mut rng).map(|v| 4.0 * v);
        let layer = |rng: &mut ChaCha8Rng| ScaleLayer {
            weights: random(&[f, f], rng),
            bias: random(&[f], rng),
        };
        let p = FmsParams {
            scale: layer(&mut rng),
            second: Some(layer(&mut rng)),
        };
        let y = apply_fms(&c, FmsKind::MulAdd, &p).map_err(|e| e.to_string())?;
        let sv = scale_oracle(&c, &p.scale);
        for i in 0..t * f {
            let expected = (c.data()[i] + 1.0) * sv[i % f];
            worst_identity = worst_identity.max((y.data()[i] - expected).abs());
        }
        for kind in FmsKind::ALL {
            let got = apply_fms(&c, kind, &p).map_err(|e| e.to_string())?;
            let want = fms_oracle(&c, kind, &p);
            for (a, b) in got.data().iter().zip(&want) {
                worst_oracle = worst_oracle.max((a - b).abs());
            }
        }
    }
    ensure(worst_identity < 1e-12, || {
        format!("mul_add vs (c+1)s: {worst_identity:e}")
    })?;
    ensure(worst_oracle < 1e-12, || {
        format!("oracle mismatch {worst_oracle:e}")
    })?;
    Ok(format!(
        "(c+1)s max dev {worst_identity:.1e}, oracle max dev {worst_oracle:.1e} over 1000 maps"
    ))
}

// ---------------------------------------------------------------------------
// 4. EER

/// Recount error rates at midpoints between consecutive distinct scores
/// and beyond both ends, interpolating at the first sign change.
fn eer_oracle(scores: &[(Real, bool)]) -> Real {
    let mut u: Vec<Real> = scores.iter().map(|s| s.0).collect();
    u.sort_by(|a, b| a.total_cmp(b));
    u.dedup();
    let mut th = vec![u[0] - 1.0];
    th.extend(u.windows(2).map(|w| 0.5 * (w[0] + w[1])));
    th.push(u[u.len() - 1] + 1.0);
    let nt = scores.iter().filter(|s| s.1).count() as Real;
    let nn = scores.len() as Real - nt;
    let rates: Vec<(Real, Real)> = th
        .iter()
        .map(|&t| {
            (
                scores.iter().filter(|s| !s.1 && s.0 >= t).count() as Real / nn,
                scores.iter().filter(|s| s.1 && s.0 < t).count() as Real / nt,
            )
        })
        .collect();
    let i = rates.iter().position(|r| r.0 - r.1 <= 0.0).unwrap();
    let d = rates[i].0 - rates[i].1;
    if d == 0.0 || i == 0 {
        return rates[i].0;
    }
    let dp = rates[i - 1].0 - rates[i - 1].1;
    let a = dp / (dp - d);
    rates[i - 1].0 + a * (rates[i].0 - rates[i - 1].0)
}

fn eer_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut sets: Vec<Vec<(Real, bool)>> = Vec::new();
    while sets.len() < 196 {
        let n = rng.random_range(2..=100);
        let grid = rng.random_range(3..60);
        let s: Vec<(Real, bool)> = (0..n)
            .map(|_| {
                (
                    rng.random_range(0..grid) as Real / grid as Real * 2.0 - 1.0,
                    rng.random(),
                )
            })
            .collect();
        if s.iter().any(|x| x.1) && s.iter().any(|x| !x.1) {
            sets.push(s);
        }
    }
    // Degenerate sets: every target above every nontarget, and the reverse.
    for above in [true, false] {
        for n in [2usize, 50] {
            let s: Vec<(Real, bool)> = (0..n)
                .map(|i| {
                    let target = i % 2 == 0;
                    let hi = rng.random_range(0.5..1.0);
                    let lo = rng.random_range(-1.0..0.0);
                    (if target == above { hi } else { lo }, target)
                })
                .collect();
            sets.push(s);
        }
    }
    for (i, s) in sets.iter().enumerate() {
        let got = eer_from_pairs(s).map_err(|e| e.to_string())?.eer;
        let want = eer_oracle(s);
        ensure(got == want, || format!("set {i}: {got} vs oracle {want}"))?;
    }
    let sep = eer_from_pairs(&sets[196]).unwrap().eer;
    let inv = eer_from_pairs(&sets[198]).unwrap().eer;
    ensure(sep == 0.0 && inv == 1.0, || {
        format!("degenerate EERs {sep}, {inv}")
    })?;
    Ok(format!("{} sets identical to oracle", sets.len()))
}

// ---------------------------------------------------------------------------
// 5. Sinc filterbank

fn spectrum(taps: &[Real], bins: usize, sr: Real) -> Vec<(Real, Real)> {
    (0..=bins)
        .map(|b| {
            let hz = 0.5 * sr * b as Real / bins as Real;
            let w = 2.0 * std::f64::consts::PI as Real * hz / sr;
            let (mut re, mut im) = (0.0, 0.0);
            for (n, &h) in taps.iter().enumerate() {
                re += h * (w * n as Real).cos();
                im -= h * (w * n as Real).sin();
            }
            (hz, (re * re + im * im).sqrt())
        })
        .collect()
}

/// Stopband: below `f1 / STOP_FACTOR` or above `f2 * STOP_FACTOR`.
const STOP_FACTOR: Real = 1.5;

fn sinc_filterbank() -> Outcome {
    let (len, sr) = (251usize, 16000u32);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let fb = SincFilterbank {
        f_low: (0..32).map(|_| rng.random_range(-4000.0..4000.0)).collect(),
        bandwidth: (0..32).map(|_| rng.random_range(-3000.0..3000.0)).collect(),
        filter_len: len,
        sample_rate: sr,
    };
    let k = materialize_sinc(&fb).map_err(|e| e.to_string())?;
    let mut asym: Real = 0.0;
    for tap in 0..len {
        for f in 0..32 {
            asym = asym.max((k.data()[tap * 32 + f] - k.data()[(len - 1 - tap) * 32 + f]).abs());
        }
    }
    ensure(asym < 1e-12, || format!("asymmetry {asym:e}"))?;

    let mut worst_ratio: Real = 0.0;
    for i in 0..50 {
        // Upper edges stay below Nyquist / 1.5 so the upper stopband exists.
        let f1 = rng.random_range(50.0..4000.0);
        let f2 = rng.random_range((f1 + 100.0)..5300.0);
        let taps = bandpass_kernels(&[f1], &[f2], len, sr).map_err(|e| e.to_string())?;
        let spec = spectrum(taps.data(), 4000, sr as Real);
        let (peak_hz, peak) =
            spec.iter()
                .copied()
                .fold((0.0, Real::MIN), |a, b| if b.1 > a.1 { b } else { a });
        ensure((f1..=f2).contains(&peak_hz), || {
            format!("pair {i} ({f1:.0}, {f2:.0}): peak at {peak_hz}")
        })?;
        let stop: Vec<Real> = spec
            .iter()
            .filter(|(hz, _)| *hz < f1 / STOP_FACTOR || *hz > f2 * STOP_FACTOR)
            .map(|p| p.1)
            .collect();
        let ratio = stop.iter().sum::<Real>() / stop.len() as Real / peak;
        ensure(ratio < 0.05, || {
            format!("pair {i} ({f1:.0}, {f2:.0}): stopband ratio {ratio:.3}")
        })?;
        worst_ratio = worst_ratio.max(ratio);
    }
    Ok(format!(
        "asymmetry {asym:.1e}, worst mean stopband {:.2}% of peak",
        100.0 * worst_ratio
    ))
}

// ---------------------------------------------------------------------------
// 6 and 7. Toy training

struct ToyRun {
    kind: &'static str,
    seed: u64,
    first: Real,
    last: Real,
    eer: Real,
    v_hat_monotone: bool,
}

const TOY_SEEDS: u64 = 5;
const HELD_OUT_PER_SPEAKER: usize = 4;
const HELD_OUT_SEED: u64 = 1000;

fn held_out_eer(recipe: &ToyRecipe, model: &ModelParams) -> Result<Real> {
    let data = recipe.held_out(HELD_OUT_PER_SPEAKER, HELD_OUT_SEED)?;
    let embs = data
        .utterances
        .iter()
        .map(|(spk, w)| Ok((*spk, model.extract_embedding(w, true)?)))
        .collect::<Result<Vec<_>>>()?;
    let mut scores = Vec::new();
    for (i, (a, ea)) in embs.iter().enumerate() {
        for (b, eb) in &embs[i + 1..] {
            scores.push((cosine(ea.values(), eb.values())?, a == b));
        }
    }
    Ok(eer_from_pairs(&scores)?.eer)
}

fn toy_runs() -> Result<Vec<ToyRun>> {
    let mut runs = Vec::new();
    for seed in 0..TOY_SEEDS {
        for (kind, fms) in [("mul_add", Some(FmsKind::MulAdd)), ("none", None)] {
            let mut recipe = ToyRecipe::default();
            recipe.model.fms_kind = fms;
            recipe.train.seed = seed;
            let mut previous: Option<Vec<Tensor>> = None;
            let mut monotone = true;
            let out: TrainOutcome =
                train_toy_observed(&recipe.model, &recipe.dataset()?, &recipe.train, |info| {
                    let now = info.optimizer.v_hat();
                    if let Some(prev) = &previous {
                        for (p, n) in prev.iter().zip(now) {
                            if p.data().iter().zip(n.data()).any(|(a, b)| b < a) {
                                monotone = false;
                            }
                        }
                    }
                    previous = Some(now.to_vec());
                })?;
            runs.push(ToyRun {
                kind,
                seed,
                first: out.loss_history[0],
                last: *out.loss_history.last().unwrap(),
                eer: held_out_eer(&recipe, &out.model)?,
                v_hat_monotone: monotone,
            });
        }
    }
    Ok(runs)
}

fn median(mut v: Vec<Real>) -> Real {
    v.sort_by(|a, b| a.total_cmp(b));
    v[v.len() / 2]
}

fn toy_end_to_end(runs: &[ToyRun]) -> Outcome {
    for r in runs {
        ensure(r.last < 0.2 * r.first, || {
            format!(
                "{} seed {}: CCE {:.4} -> {:.4}",
                r.kind, r.seed, r.first, r.last
            )
        })?;
        ensure(r.eer <= 0.05, || {
            format!(
                "{} seed {}: held-out EER {:.2}%",
                r.kind,
                r.seed,
                100.0 * r.eer
            )
        })?;
    }
    let eers = |k: &str| {
        runs.iter()
            .filter(|r| r.kind == k)
            .map(|r| r.eer)
            .collect::<Vec<_>>()
    };
    let (with, without) = (median(eers("mul_add")), median(eers("none")));
    ensure(with <= without, || {
        format!("median EER mul_add {with} > none {without}")
    })?;
    let worst_ratio = runs.iter().map(|r| r.last / r.first).fold(0.0, Real::max);
    Ok(format!(
        "10 runs, worst final/initial CCE {:.3}, median held-out EER mul_add {:.2}% vs none {:.2}%",
        worst_ratio,
        100.0 * with,
        100.0 * without
    ))
}

fn amsgrad(runs: &[ToyRun]) -> Outcome {
    // One step on f(t) = t^2 from t = 1, worked by hand.
    let c = AmsgradConfig::default();
    let theta = 1.0;
    let g = 2.0 * theta + c.weight_decay * theta;
    let m = (1.0 - c.beta1) * g;
    let v = (1.0 - c.beta2) * g * g;
    let m_hat = m / (1.0 - c.beta1);
    let v_hat = v / (1.0 - c.beta2);
    let expected = theta - c.lr * m_hat / (v_hat.sqrt() + c.epsilon);

    let mut opt = Amsgrad::new(c);
    let mut p = [Tensor::scalar(theta)];
    opt.step(p.iter_mut(), &[Tensor::scalar(2.0 * theta)])
        .map_err(|e| e.to_string())?;
    let got = p[0].item();
    ensure((got - expected).abs() < 1e-12, || {
        format!("step gives {got}, hand value {expected}")
    })?;
    ensure(got * got < theta * theta, || "loss did not decrease".into())?;
    ensure(runs.iter().all(|r| r.v_hat_monotone), || {
        "v_hat decreased during training".into()
    })?;
    Ok(format!(
        "step {got:.12} matches hand value, v_hat monotone over {} runs",
        runs.len()
    ))
}

// ---------------------------------------------------------------------------
// 8. Determinism and serialization

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut recipe = ToyRecipe::default();
    recipe.train.epochs = 2;
    recipe.train.seed = 11;
    let mut bytes = Vec::new();
    for run in 0..2 {
        let path = dir.path().join(format!("w{run}.bin"));
        recipe
            .run()
            .and_then(|o| o.model.save(&path))
            .map_err(|e| e.to_string())?;
        bytes.push(std::fs::read(&path).map_err(|e| e.to_string())?);
    }
    ensure(bytes[0] == bytes[1], || "weight files differ".into())?;

    let path = dir.path().join("w0.bin");
    let model = ModelParams::load(&path).map_err(|e| e.to_string())?;
    let original = recipe.run().map_err(|e| e.to_string())?.model;
    let data = recipe.held_out(2, 77).map_err(|e| e.to_string())?;
    for (_, w) in &data.utterances {
        let a = original
            .extract_embedding(w, true)
            .map_err(|e| e.to_string())?;
        let b = model
            .extract_embedding(w, true)
            .map_err(|e| e.to_string())?;
        let bits = |v: &[Real]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        ensure(bits(a.values()) == bits(b.values()), || {
            "reloaded forward differs".into()
        })?;
    }

    let mut store = EmbeddingStore::new();
    let mut ids = Vec::new();
    for (i, (spk, w)) in data.utterances.iter().enumerate() {
        let id = format!("spk{spk}/utt{i}.wav");
        store
            .insert(
                id.clone(),
                model
                    .extract_embedding(w, true)
                    .map_err(|e| e.to_string())?,
            )
            .unwrap();
        ids.push((*spk, id));
    }
    let mut trials = Vec::new();
    for (i, (a, ia)) in ids.iter().enumerate() {
        for (b, ib) in &ids[i + 1..] {
            trials.push(Trial {
                label: if a == b {
                    Label::Target
                } else {
                    Label::Nontarget
                },
                enroll_id: ia.clone(),
                test_id: ib.clone(),
            });
        }
    }
    let mut reports = Vec::new();
    for run in 0..2 {
        let report = dir.path().join(format!("r{run}.txt"));
        let e = eval::evaluate(&trials, &store).map_err(|e| e.to_string())?;
        eval::write_evaluation(&report, &e).map_err(|e| e.to_string())?;
        let files: Vec<Vec<u8>> = [".txt", ".scores.txt", ".eer.csv", ".det.csv"]
            .iter()
            .map(|ext| std::fs::read(dir.path().join(format!("r{run}{ext}"))).unwrap())
            .collect();
        reports.push(files);
    }
    ensure(reports[0] == reports[1], || {
        "evaluation outputs differ".into()
    })?;
    Ok(format!(
        "weights identical ({} bytes), reload bit-exact on {} utterances, reports identical",
        bytes[0].len(),
        data.utterances.len()
    ))
}

// ---------------------------------------------------------------------------
// 9. RER

fn rer() -> Outcome {
    let a = format!(
        "{:.2}",
        100.0 * compute_rer(3.00, 4.80).map_err(|e| e.to_string())?
    );
    let b = format!(
        "{:.2}",
        100.0 * compute_rer(2.56, 3.00).map_err(|e| e.to_string())?
    );
    ensure(a == "37.50" && b == "14.67", || {
        format!("got {a}% and {b}%")
    })?;
    Ok(format!("{a}% and {b}%"))
}

fn report(n: usize, name: &str, f: &mut dyn FnMut() -> Outcome) -> bool {
    let start = Instant::now();
    let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into()))
    });
    let secs = start.elapsed().as_secs_f64();
    match result {
        Ok(detail) => {
            println!("criterion {n} PASS {name} ({secs:.1}s): {detail}");
            true
        }
        Err(why) => {
            println!("criterion {n} FAIL {name} ({secs:.1}s): {why}");
            false
        }
    }
}

/// Criterion numbers given on the command line, or all of them.
fn selected() -> Vec<usize> {
    let picked: Vec<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    if picked.is_empty() {
        (1..=9).collect()
    } else {
        picked
    }
}

fn main() {
    let want = selected();
    let mut ok = true;
    let mut run = |n: usize, name: &str, f: &mut dyn FnMut() -> Outcome| {
        if want.contains(&n) {
            ok &= report(n, name, f);
        }
    };
    run(1, "shape reproduction", &mut shapes);
    run(2, "gradient correctness", &mut gradients);
    run(3, "fms algebra", &mut fms_algebra);
    run(4, "eer oracle equivalence", &mut eer_equivalence);
    run(5, "sinc filterbank", &mut sinc_filterbank);
    let runs = if want.contains(&6) || want.contains(&7) {
        let start = Instant::now();
        let runs = toy_runs();
        let train_secs = start.elapsed().as_secs_f64();
        match &runs {
            Ok(runs) => {
                println!("toy training: {} runs in {train_secs:.0}s", runs.len());
                for r in runs {
                    println!(
                        "  {:<7} seed {}: CCE {:.4} -> {:.4}, held-out EER {:.2}%",
                        r.kind,
                        r.seed,
                        r.first,
                        r.last,
                        100.0 * r.eer
                    );
                }
            }
            Err(e) => println!("toy training failed: {e}"),
        }
        runs.map_err(|e| e.to_string())
    } else {
        Err("not run".to_string())
    };
    run(6, "toy end-to-end", &mut || {
        toy_end_to_end(runs.as_ref().map_err(Clone::clone)?)
    });
    run(7, "amsgrad", &mut || {
        amsgrad(runs.as_ref().map_err(Clone::clone)?)
    });
    run(8, "determinism and serialization", &mut determinism);
    run(9, "rer arithmetic", &mut rer);
    if !ok {
        std::process::exit(1);
    }
}
