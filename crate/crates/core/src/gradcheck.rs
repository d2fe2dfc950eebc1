//! Central finite-difference checks of reverse-mode gradients.

use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Mode, Var};
use crate::decision::{decision_loss, Decision, DecisionHead};
use crate::editor::{DecodeMode, Editor, EditorConfig};
use crate::encoder::EncoderConfig;
use crate::entailment::enrich_var;
use crate::extraction::{extraction_loss, ExtractionHead};
use crate::model::{ModelConfig, RuleReader};
use crate::nn::{Linear, ModelError};
use crate::params::{Gradients, ParamId, ParamStore};
use crate::sharc::{build_all_supervision, corpus_texts, reconstruct_trees};
use crate::tensor::{Real, Tensor, TensorError};
use crate::text::Vocabulary;

/// Default perturbation for the active float width.
pub const DEFAULT_STEP: f64 = if std::mem::size_of::<Real>() == 4 { 1e-1 } else { 1e-5 };

/// Denominator floor of the relative error.
pub const ERROR_FLOOR: f64 = 1e-2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckConfig {
    pub step: f64,
    /// Random directions probed per parameter tensor.
    pub directions: usize,
    pub mode: Mode,
    pub seed: u64,
}

impl Default for CheckConfig {
    fn default() -> Self {
        CheckConfig {
            step: DEFAULT_STEP,
            directions: 2,
            mode: Mode::Eval,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub max_rel_error: f64,
    pub probes: usize,
    /// Parameter of the worst probe; `None` for the probe over all parameters.
    pub worst: Option<String>,
}

/// `|a - n| / max(|a|, |n|, ERROR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ERROR_FLOOR)
}

fn loss_value<F, E>(store: &ParamStore, mode: Mode, f: &F) -> Result<f64, E>
where
    F: Fn(&mut Graph) -> Result<Var, E>,
{
    let mut g = Graph::new(store, mode);
    let loss = f(&mut g)?;
    Ok(g.value(loss).item() as f64)
}

/// Unit-norm Gaussian direction.
fn direction(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    v.into_iter().map(|x| x / norm).collect()
}

/// Normalized sum of the unit gradient and a unit random direction. Keeps the derivative
/// along the probe well above float rounding while still exposing direction errors.
fn blended(rng: &mut ChaCha8Rng, grad: &[f64]) -> Vec<f64> {
    let r = direction(rng, grad.len());
    let norm = grad.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return r;
    }
    let v: Vec<f64> = grad.iter().zip(&r).map(|(g, r)| g / norm + r).collect();
    let vn = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    v.into_iter().map(|x| x / vn).collect()
}

fn shift(store: &mut ParamStore, base: &[(ParamId, Vec<Real>)], dir: &[(ParamId, Vec<f64>)], t: f64) {
    for ((id, orig), (_, v)) in base.iter().zip(dir) {
        let data = store.get_mut(*id).data_mut();
        for ((x, o), d) in data.iter_mut().zip(orig).zip(v) {
            *x = (*o as f64 + t * d) as Real;
        }
    }
}

/// Fourth-order central difference of the loss along `dir`.
fn directional<F, E>(store: &mut ParamStore, config: &CheckConfig, dir: &[(ParamId, Vec<f64>)], f: &F) -> Result<f64, E>
where
    F: Fn(&mut Graph) -> Result<Var, E>,
{
    let base: Vec<(ParamId, Vec<Real>)> = dir.iter().map(|(id, _)| (*id, store.get(*id).data().to_vec())).collect();
    let h = config.step;
    let mut at = |t: f64| -> Result<f64, E> {
        shift(store, &base, dir, t);
        loss_value(store, config.mode, f)
    };
    let (p2, p1, m1, m2) = (at(2.0 * h)?, at(h)?, at(-h)?, at(-2.0 * h)?);
    shift(store, &base, dir, 0.0);
    for (id, orig) in &base {
        store.get_mut(*id).data_mut().copy_from_slice(orig);
    }
    Ok((-p2 + 8.0 * p1 - 8.0 * m1 + m2) / (12.0 * h))
}

/// A label (per-tensor probes only) and a direction over one or more tensors.
type Probe = (Option<String>, Vec<(ParamId, Vec<f64>)>);

/// Compares the backward pass of the scalar built by `f` with finite differences
/// along random directions: `directions` per parameter tensor, then one over all.
pub fn check<F, E>(store: &mut ParamStore, config: &CheckConfig, f: F) -> Result<CheckReport, E>
where
    F: Fn(&mut Graph) -> Result<Var, E>,
    E: From<TensorError>,
{
    let mut grads = Gradients::for_store(store);
    {
        let mut g = Graph::new(store, config.mode);
        let loss = f(&mut g)?;
        g.backward(loss, &mut grads)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let ids: Vec<ParamId> = store.ids().collect();
    let analytic_along = |dir: &[(ParamId, Vec<f64>)]| -> f64 {
        dir.iter()
            .map(|(id, v)| match grads.get(*id) {
                Some(gr) => gr.iter().zip(v).map(|(a, b)| *a as f64 * b).sum::<f64>(),
                None => 0.0,
            })
            .sum()
    };
    let mut report = CheckReport {
        max_rel_error: 0.0,
        probes: 0,
        worst: None,
    };
    let mut probes: Vec<Probe> = Vec::new();
    for &id in &ids {
        let n = store.get(id).len();
        let grad: Vec<f64> = match grads.get(id) {
            Some(gr) => gr.iter().map(|x| *x as f64).collect(),
            None => vec![0.0; n],
        };
        for _ in 0..config.directions {
            probes.push((Some(store.name(id).to_string()), vec![(id, blended(&mut rng, &grad))]));
        }
    }
    let flat: Vec<f64> = ids
        .iter()
        .flat_map(|id| match grads.get(*id) {
            Some(gr) => gr.iter().map(|x| *x as f64).collect::<Vec<_>>(),
            None => vec![0.0; store.get(*id).len()],
        })
        .collect();
    let all = blended(&mut rng, &flat);
    let mut offset = 0;
    let mut joint = Vec::with_capacity(ids.len());
    for &id in &ids {
        let n = store.get(id).len();
        joint.push((id, all[offset..offset + n].to_vec()));
        offset += n;
    }
    probes.push((None, joint));
    for (name, dir) in probes {
        let numeric = directional(store, config, &dir, &f)?;
        let err = relative_error(analytic_along(&dir), numeric);
        report.probes += 1;
        if err >= report.max_rel_error {
            report.max_rel_error = err;
            report.worst = name;
        }
    }
    Ok(report)
}

pub type LossFn = Box<dyn Fn(&mut Graph) -> Result<Var, ModelError>>;

/// A named scalar function of the parameters in `store`.
pub struct Case {
    pub name: &'static str,
    pub store: ParamStore,
    pub mode: Mode,
    pub loss: LossFn,
}

impl Case {
    pub fn run(&mut self, directions: usize, seed: u64) -> Result<CheckReport, ModelError> {
        let config = CheckConfig {
            directions,
            mode: self.mode,
            seed,
            ..CheckConfig::default()
        };
        check(&mut self.store, &config, |g| (self.loss)(g))
    }
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(lo..hi) as Real).collect();
    Tensor::new(shape.to_vec(), data).expect("valid shape")
}

/// Values with magnitude in `[0.2, 1)` and random sign, away from kinks at zero.
fn signed_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let mut t = random_tensor(rng, shape, 0.2, 1.0);
    for v in t.data_mut() {
        if rng.random_bool(0.5) {
            *v = -*v;
        }
    }
    t
}

/// `Σ out ⊙ W` for a fixed random `W`, so every output element matters differently.
fn project(g: &mut Graph, out: Var, seed: u64) -> Result<Var, ModelError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = random_tensor(&mut rng, g.shape(out), -1.0, 1.0);
    let w = g.constant(w);
    let p = g.mul(out, w)?;
    Ok(g.sum(p))
}

fn op_case(
    name: &'static str,
    rng: &mut ChaCha8Rng,
    shapes: &[&[usize]],
    positive: bool,
    mode: Mode,
    build: impl Fn(&mut Graph, &[Var]) -> Result<Var, TensorError> + 'static,
) -> Case {
    let mut store = ParamStore::new();
    let ids: Vec<ParamId> = shapes
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let t = if positive {
                random_tensor(rng, s, 0.5, 2.0)
            } else {
                signed_tensor(rng, s)
            };
            store.add(format!("{name}/x{i}"), t)
        })
        .collect();
    let seed = rng.random();
    Case {
        name,
        store,
        mode,
        loss: Box::new(move |g| {
            let vars: Vec<Var> = ids.iter().map(|&id| g.param(id)).collect();
            let out = build(g, &vars)?;
            project(g, out, seed)
        }),
    }
}

/// One instance of every differentiable operation.
pub fn op_cases(seed: u64) -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let eval = Mode::Eval;
    let train = Mode::Train { seed };
    vec![
        op_case("matmul", r, &[&[3, 4], &[4, 2]], false, eval, |g, v| g.matmul(v[0], v[1])),
        op_case("transpose", r, &[&[3, 4]], false, eval, |g, v| g.transpose(v[0])),
        op_case("add", r, &[&[2, 3], &[2, 3]], false, eval, |g, v| g.add(v[0], v[1])),
        op_case("sub", r, &[&[2, 3], &[2, 3]], false, eval, |g, v| g.sub(v[0], v[1])),
        op_case("mul", r, &[&[2, 3], &[2, 3]], false, eval, |g, v| g.mul(v[0], v[1])),
        op_case("add_row", r, &[&[3, 4], &[4]], false, eval, |g, v| g.add_row(v[0], v[1])),
        op_case("affine", r, &[&[3, 4], &[4, 2], &[2]], false, eval, |g, v| g.affine(v[0], v[1], v[2])),
        op_case("scale", r, &[&[2, 3]], false, eval, |g, v| Ok(g.scale(v[0], -1.7))),
        op_case("sigmoid", r, &[&[2, 3]], false, eval, |g, v| Ok(g.sigmoid(v[0]))),
        op_case("log_sigmoid", r, &[&[2, 3]], false, eval, |g, v| Ok(g.log_sigmoid(v[0]))),
        op_case("tanh", r, &[&[2, 3]], false, eval, |g, v| Ok(g.tanh(v[0]))),
        op_case("relu", r, &[&[2, 3]], false, eval, |g, v| Ok(g.relu(v[0]))),
        op_case("log", r, &[&[2, 3]], true, eval, |g, v| Ok(g.log(v[0]))),
        op_case("softmax_rows", r, &[&[3, 4]], false, eval, |g, v| g.softmax(v[0], 1)),
        op_case("softmax_cols", r, &[&[3, 4]], false, eval, |g, v| g.softmax(v[0], 0)),
        op_case("log_softmax", r, &[&[3, 4]], false, eval, |g, v| g.log_softmax(v[0], 1)),
        op_case("concat_rows", r, &[&[2, 3], &[1, 3]], false, eval, |g, v| g.concat(&[v[0], v[1]], 0)),
        op_case("concat_cols", r, &[&[2, 3], &[2, 2]], false, eval, |g, v| g.concat(&[v[0], v[1]], 1)),
        op_case("slice", r, &[&[4, 3]], false, eval, |g, v| g.slice(v[0], 0, 1, 3)),
        op_case("reshape", r, &[&[2, 6]], false, eval, |g, v| g.reshape(v[0], &[3, 4])),
        op_case("embedding", r, &[&[5, 3]], false, eval, |g, v| g.embedding(v[0], &[4, 0, 4, 2])),
        op_case("dropout", r, &[&[4, 5]], false, train, |g, v| g.dropout(v[0], 0.4)),
        op_case("layer_norm", r, &[&[3, 5], &[5], &[5]], false, eval, |g, v| g.layer_norm(v[0], v[1], v[2])),
        op_case("sum", r, &[&[2, 3]], false, eval, |g, v| Ok(g.sum(v[0]))),
        op_case("mean_rows", r, &[&[4, 3]], false, eval, |g, v| g.mean_rows(v[0])),
        op_case("pick", r, &[&[1, 5]], false, eval, |g, v| g.pick(v[0], 3)),
        op_case("two_layer_net", r, &[&[3, 4], &[4, 5], &[5], &[5, 2], &[2]], false, eval, |g, v| {
            let h = g.affine(v[0], v[1], v[2])?;
            let h = g.tanh(h);
            let o = g.affine(h, v[3], v[4])?;
            Ok(g.sigmoid(o))
        }),
    ]
}

/// Extraction head: boundary BCE plus a pooled span, over a free `U`.
pub fn extraction_case(seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, d) = (7, 6);
    let mut store = ParamStore::new();
    let head = ExtractionHead::new(&mut store, "extract", d, &mut rng);
    let u = store.add("u", signed_tensor(&mut rng, &[n, d]));
    let a = rng.random_range(0..n - 2);
    let b = rng.random_range(a..n);
    let proj = rng.random();
    Case {
        name: "extraction_head",
        store,
        mode: Mode::Eval,
        loss: Box::new(move |g| {
            let uv = g.param(u);
            let (logits, _) = head.score_boundaries(g, uv)?;
            let l = extraction_loss(g, logits, &[(a, b), (n - 1, n - 1)])?;
            let (pooled, _) = head.pool_span(g, uv, a, b)?;
            let p = project(g, pooled, proj)?;
            Ok(g.add(l, p)?)
        }),
    }
}

/// Decision head with an inquire gold: class and rule cross-entropy.
pub fn decision_case(seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, d, k) = (6, 5, 3);
    let mut store = ParamStore::new();
    let head = DecisionHead::new(&mut store, "decide", d, &mut rng);
    let pool = Linear::new(&mut store, "pool", d, 1, &mut rng);
    let u = store.add("u", signed_tensor(&mut rng, &[n, d]));
    let scores: Vec<(Real, Real)> = (0..k)
        .map(|_| (rng.random::<f64>() as Real, rng.random::<f64>() as Real))
        .collect();
    let gold_rule = rng.random_range(0..k);
    Case {
        name: "decision_head",
        store,
        mode: Mode::Eval,
        loss: Box::new(move |g| {
            let uv = g.param(u);
            let (c, _) = head.summarize(g, uv)?;
            let mut rules = Vec::new();
            for (i, &(gs, hs)) in scores.iter().enumerate() {
                let rows = g.slice(uv, 0, i, i + 2)?;
                let (pooled, _) = crate::nn::attention_pool(g, &pool, rows)?;
                rules.push(enrich_var(g, pooled, gs, hs)?);
            }
            let vars = head.score(g, c, &rules)?;
            let (loss, _) = decision_loss(g, vars, Decision::Inquire, Some(gold_rule))?;
            Ok(loss)
        }),
    }
}

/// Both editor decoders under teacher forcing on a free encoder output, with dropout.
pub fn editor_case(seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab_size = 12;
    let config = EditorConfig {
        encoder: EncoderConfig {
            d_model: 8,
            layers: 1,
            heads: 2,
            ff_width: 8,
            dropout: 0.1,
            max_position: 16,
        },
        embed_dim: 6,
        seed,
        ..EditorConfig::default()
    };
    let editor = Editor::new(vocab_size, config).expect("valid editor config");
    let mut store = editor.store.clone();
    let u = store.add("u", signed_tensor(&mut rng, &[5, 8]));
    let gold_pre: Vec<usize> = (0..3).map(|_| rng.random_range(4..vocab_size)).collect();
    let gold_post: Vec<usize> = (0..2).map(|_| rng.random_range(4..vocab_size)).collect();
    Case {
        name: "editor_head",
        store,
        mode: Mode::Train { seed },
        loss: Box::new(move |g| {
            let uv = g.param(u);
            let pre = editor.sequence_loss(g, uv, DecodeMode::Pre, &gold_pre)?;
            let post = editor.sequence_loss(g, uv, DecodeMode::Post, &gold_post)?;
            Ok(g.add(pre, post)?)
        }),
    }
}

/// The full joint loss (encoder, extraction and decision) on a bundled inquire example.
///
/// The encoder's ReLU makes this piecewise smooth, so it needs a step far below the
/// distance to the nearest kink; only a 64-bit build resolves that.
pub fn reader_case(seed: u64) -> Case {
    let data = crate::synthetic::bundled();
    let supervision = build_all_supervision(&reconstruct_trees(&data));
    let vocab = Vocabulary::build(corpus_texts(&data));
    let config = ModelConfig {
        encoder: EncoderConfig {
            d_model: 8,
            layers: 2,
            heads: 2,
            ff_width: 8,
            dropout: 0.1,
            max_position: 64,
        },
        max_len: 64,
        seed,
        ..ModelConfig::default()
    };
    let reader = RuleReader::new(vocab, config).expect("valid model config");
    let raw = &data[2 + 4 * (seed as usize % 8)];
    let example = reader
        .training_example(raw, &supervision[&raw.tree_id])
        .expect("bundled example fits");
    Case {
        name: "joint_loss",
        store: reader.store.clone(),
        mode: Mode::Train { seed },
        loss: Box::new(move |g| Ok(reader.example_loss(g, &example, 2.0)?.0)),
    }
}

/// Every operation plus the extraction, decision and editor heads for one seed.
pub fn all_cases(seed: u64) -> Vec<Case> {
    let mut cases = op_cases(seed);
    cases.push(extraction_case(seed));
    cases.push(decision_case(seed));
    cases.push(editor_case(seed));
    cases
}
