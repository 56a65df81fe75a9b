//! Central finite-difference checking of reverse-mode gradients.
//!
//! The scalar being differentiated is a random projection `Σ out ⊙ R` of the
//! function's output, so every output element contributes. Numerical
//! derivatives use only forward evaluations and are therefore independent of
//! the backward code they validate.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, TensorError};
use crate::graph::{Graph, NormStats, Var};
use crate::params::{normal_tensor, EntryKind, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Maximum admissible relative error.
    pub tolerance: f64,
    /// Lower bound of the relative-error denominator, so that gradients near
    /// zero are compared absolutely.
    pub floor: f64,
    /// Coordinates sampled per tensor (all of them when the tensor is smaller).
    pub max_coords: usize,
    /// Largest admissible fraction of coordinates skipped as kinks.
    pub max_kink_fraction: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-6,
            max_coords: 16,
            max_kink_fraction: 0.05,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mismatch {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    /// Coordinates whose stencil straddled a non-differentiable point even at
    /// a tenth of the step.
    pub kinks: usize,
    pub max_rel_error: f64,
    pub worst: Option<Mismatch>,
}

impl GradCheckReport {
    pub fn passed(&self, cfg: &GradCheckConfig) -> bool {
        self.max_rel_error < cfg.tolerance && self.kinks as f64 <= cfg.max_kink_fraction * self.attempted() as f64
    }

    pub fn attempted(&self) -> usize {
        self.checked + self.kinks
    }

    fn record(&mut self, tensor: &str, index: usize, analytic: f64, numeric: f64, floor: f64) {
        let denom = analytic.abs().max(numeric.abs()).max(floor);
        let rel = (analytic - numeric).abs() / denom;
        self.checked += 1;
        if rel > self.max_rel_error || self.worst.is_none() || rel.is_nan() {
            self.max_rel_error = if rel.is_nan() { f64::INFINITY } else { rel.max(self.max_rel_error) };
            self.worst = Some(Mismatch {
                tensor: tensor.to_string(),
                index,
                analytic,
                numeric,
                rel_error: rel,
            });
        }
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        self.checked += other.checked;
        self.kinks += other.kinks;
        if other.max_rel_error > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = self.max_rel_error.max(other.max_rel_error);
            if other.worst.is_some() {
                self.worst = other.worst;
            }
        }
    }
}

fn coords(numel: usize, cfg: &GradCheckConfig, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if numel <= cfg.max_coords {
        (0..numel).collect()
    } else {
        let mut idx = sample(rng, numel, cfg.max_coords).into_vec();
        idx.sort_unstable();
        idx
    }
}

/// Central difference of `eval` around `orig`, compared with `analytic`.
///
/// When the stencil crosses a kink at distance `δ < h`, the central-difference
/// error equals `|f(+h) − 2f(0) + f(−h)| / 2h`, whereas a wrong analytic
/// gradient on a smooth stretch leaves that second difference near zero. A
/// mismatch explained by the second difference is re-measured with the
/// second-order one-sided stencil on whichever side is smooth (its own second
/// difference below the tolerance), and counted as a kink when neither is.
/// Loss-evaluation error assumed per central difference, in ulps of `f`.
const ROUNDOFF_ULPS: f64 = 8.0;

fn measure(
    report: &mut GradCheckReport,
    name: &str,
    index: usize,
    orig: f64,
    analytic: f64,
    cfg: &GradCheckConfig,
    mut eval: impl FnMut(f64) -> Result<f64>,
) -> Result<()> {
    let h = cfg.step;
    let plus = eval(orig + h)?;
    let minus = eval(orig - h)?;
    let numeric = (plus - minus) / (2.0 * h);
    // A central difference cannot resolve gradients below its own roundoff,
    // so the denominator floor never drops under that level.
    let noise = ROUNDOFF_ULPS * f64::EPSILON * plus.abs().max(minus.abs()) / (2.0 * h);
    let floor = cfg.floor.max(noise / cfg.tolerance);
    let denom = analytic.abs().max(numeric.abs()).max(floor);
    let error = (analytic - numeric).abs();
    if error < cfg.tolerance * denom {
        report.record(name, index, analytic, numeric, floor);
        return Ok(());
    }
    let f0 = eval(orig)?;
    if (plus - 2.0 * f0 + minus).abs() / (2.0 * h) < 0.5 * error {
        report.record(name, index, analytic, numeric, floor);
        return Ok(());
    }
    let plus2 = eval(orig + 2.0 * h)?;
    let minus2 = eval(orig - 2.0 * h)?;
    let right = plus2 - 2.0 * plus + f0;
    let left = f0 - 2.0 * minus + minus2;
    let (second, one_sided) = if right.abs() <= left.abs() {
        (right, (-3.0 * f0 + 4.0 * plus - plus2) / (2.0 * h))
    } else {
        (left, (3.0 * f0 - 4.0 * minus + minus2) / (2.0 * h))
    };
    if second.abs() / h >= cfg.tolerance * denom {
        report.kinks += 1;
    } else {
        report.record(name, index, analytic, one_sided, floor);
    }
    Ok(())
}

/// `Σ out ⊙ R` for a fixed projection `R`.
fn project(g: &mut Graph<f64>, out: Var, projection: &mut Option<Tensor<f64>>, rng: &mut ChaCha8Rng) -> Result<Var> {
    let shape = g.shape(out).to_vec();
    let r = projection.get_or_insert_with(|| normal_tensor(shape.clone(), 1.0, rng));
    if r.shape() != shape.as_slice() {
        return Err(TensorError::Contract(format!(
            "gradcheck: output shape changed from {:?} to {shape:?}",
            r.shape()
        )));
    }
    let rv = g.constant(r.clone());
    let prod = g.mul(out, rv)?;
    g.sum(prod)
}

/// Checks gradients of `f` with respect to each of `inputs`.
pub fn check_inputs<F>(inputs: &[Tensor<f64>], f: F, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut projection = None;

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone(), true)).collect();
    let out = f(&mut g, &vars)?;
    let loss = project(&mut g, out, &mut projection, &mut rng)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    let eval = |perturbed: &[Tensor<f64>], projection: &mut Option<Tensor<f64>>, rng: &mut ChaCha8Rng| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        let loss = project(&mut g, out, projection, rng)?;
        g.value(loss).item()
    };

    let mut report = GradCheckReport::default();
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (t, grad) in analytic.iter().enumerate() {
        for i in coords(inputs[t].numel(), cfg, &mut rng) {
            let orig = work[t].data()[i];
            measure(&mut report, &format!("input{t}"), i, orig, grad[i], cfg, |v| {
                work[t].data_mut()[i] = v;
                eval(&work, &mut projection, &mut rng)
            })?;
            work[t].data_mut()[i] = orig;
        }
    }
    Ok(report)
}

/// Checks gradients of `f` with respect to every trainable entry of `store`.
///
/// `f` must build its parameters with gradients enabled and must not depend on
/// anything that the evaluation itself mutates.
pub fn check_store<F>(store: &mut ParamStore<f64>, f: F, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut projection = None;

    store.zero_grad();
    let mut g = Graph::new();
    let out = f(&mut g, store)?;
    let loss = project(&mut g, out, &mut projection, &mut rng)?;
    g.backward(loss)?;
    store.accumulate_grads(&g);

    let ids: Vec<_> = store
        .ids()
        .filter(|&id| store.entry(id).kind == EntryKind::Trainable)
        .collect();
    let mut report = GradCheckReport::default();
    for id in ids {
        let numel = store.value(id).numel();
        let analytic = store
            .entry(id)
            .grad
            .as_ref()
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; numel]);
        let name = store.name(id).to_string();
        for i in coords(numel, cfg, &mut rng) {
            let orig = store.value(id).data()[i];
            measure(&mut report, &name, i, orig, analytic[i], cfg, |v| {
                store.entry_mut(id).value.data_mut()[i] = v;
                let mut g = Graph::new();
                let out = f(&mut g, store)?;
                let loss = project(&mut g, out, &mut projection, &mut rng)?;
                g.value(loss).item()
            })?;
            store.entry_mut(id).value.data_mut()[i] = orig;
        }
    }
    store.zero_grad();
    Ok(report)
}

type OpCase = (&'static str, Vec<Vec<usize>>, fn(&mut Graph<f64>, &[Var]) -> Result<Var>);

fn op_cases() -> Vec<OpCase> {
    vec![
        ("conv2d", vec![vec![2, 2, 7, 6], vec![3, 2, 5, 5], vec![3]], |g, v| {
            g.conv2d(v[0], v[1], Some(v[2]), 2, 2)
        }),
        ("conv2d_3x3_s1", vec![vec![2, 3, 5, 5], vec![2, 3, 3, 3]], |g, v| {
            g.conv2d(v[0], v[1], None, 1, 1)
        }),
        ("conv_transpose2d", vec![vec![2, 3, 3, 4], vec![3, 2, 5, 5], vec![2]], |g, v| {
            g.conv_transpose2d(v[0], v[1], Some(v[2]), 2, 2, 1)
        }),
        ("batch_norm_train", vec![vec![3, 2, 3, 3], vec![2], vec![2]], |g, v| {
            Ok(g.batch_norm(v[0], v[1], v[2], NormStats::Batch, 1e-5)?.0)
        }),
        ("batch_norm_eval", vec![vec![3, 2, 3, 3], vec![2], vec![2]], |g, v| {
            let stats = NormStats::Running {
                mean: &[0.3, -0.2],
                var: &[1.5, 0.7],
            };
            Ok(g.batch_norm(v[0], v[1], v[2], stats, 1e-5)?.0)
        }),
        ("batch_norm_2d", vec![vec![4, 5], vec![5], vec![5]], |g, v| {
            Ok(g.batch_norm(v[0], v[1], v[2], NormStats::Batch, 1e-5)?.0)
        }),
        ("dense", vec![vec![3, 4], vec![4, 5], vec![5]], |g, v| g.dense(v[0], v[1], Some(v[2]))),
        ("relu", vec![vec![3, 7]], |g, v| g.relu(v[0])),
        ("leaky_relu", vec![vec![3, 7]], |g, v| g.leaky_relu(v[0], 0.2)),
        ("tanh", vec![vec![3, 7]], |g, v| g.tanh(v[0])),
        ("sigmoid", vec![vec![3, 7]], |g, v| g.sigmoid(v[0])),
        ("softmax", vec![vec![3, 7]], |g, v| g.softmax(v[0])),
        ("log_softmax", vec![vec![3, 7]], |g, v| g.log_softmax(v[0])),
        ("cross_entropy", vec![vec![3, 7]], |g, v| g.cross_entropy(v[0], &[0, 6, 3])),
        ("exp", vec![vec![3, 4]], |g, v| g.exp(v[0])),
        ("log", vec![vec![3, 4]], |g, v| {
            let sq = g.square(v[0])?;
            let pos = g.add_scalar(sq, 0.5)?;
            g.log(pos)
        }),
        ("square", vec![vec![3, 4]], |g, v| g.square(v[0])),
        ("clamp", vec![vec![3, 4]], |g, v| g.clamp(v[0], -0.5, 0.5)),
        ("scale", vec![vec![3, 4]], |g, v| g.scale(v[0], -1.7)),
        ("add_sub_mul", vec![vec![3, 4], vec![3, 4]], |g, v| {
            let a = g.add(v[0], v[1])?;
            let s = g.sub(v[0], v[1])?;
            g.mul(a, s)
        }),
        ("sum_mean", vec![vec![3, 4]], |g, v| {
            let s = g.sum(v[0])?;
            let m = g.mean(v[0])?;
            let p = g.mul(s, m)?;
            Ok(p)
        }),
        ("concat_narrow", vec![vec![2, 3, 2, 2], vec![2, 1, 2, 2]], |g, v| {
            let c = g.concat(&[v[0], v[1]])?;
            let n = g.narrow(c, 1, 3)?;
            g.square(n)
        }),
        ("broadcast_reshape", vec![vec![2, 3]], |g, v| {
            let b = g.broadcast_spatial(v[0], 2, 2)?;
            let f = g.flatten(b)?;
            let r = g.reshape(f, &[2, 3, 4])?;
            g.square(r)
        }),
    ]
}

/// Checks every differentiable graph op against central differences.
pub fn check_all_ops(cfg: &GradCheckConfig) -> Result<Vec<(&'static str, GradCheckReport)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    op_cases()
        .into_iter()
        .map(|(name, shapes, f)| {
            let inputs: Vec<Tensor<f64>> = shapes.into_iter().map(|s| normal_tensor(s, 1.0, &mut rng)).collect();
            let cfg = GradCheckConfig {
                max_coords: 64,
                ..*cfg
            };
            check_inputs(&inputs, f, &cfg).map(|r| (name, r))
        })
        .collect()
}
