//! Central finite-difference verification of reverse-mode gradients.

use rand::Rng as _;

use crate::error::Result;
use crate::graph::{Graph, ParamStore, Var};
use crate::rng;
use crate::tensor::Tensor;

/// Outcome of a gradient comparison.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
}

/// Relative-error denominator floor so that vanishing gradients are compared absolutely.
pub const REL_FLOOR: f64 = 1e-3;

/// Compares analytic gradients of `f` with respect to every element of `inputs`
/// against central differences with step `h`.
///
/// `f` may return any shape; it is reduced to a scalar with fixed random weights
/// so that every output element contributes to the checked gradient.
pub fn check<F>(inputs: &[Tensor<f64>], h: f64, seed: u64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut store = ParamStore::<f64>::new();
    let ids: Vec<_> = inputs.iter().enumerate().map(|(i, t)| store.add(format!("in{i}"), t.clone())).collect();

    let mut weights: Option<Tensor<f64>> = None;
    let mut eval = |store: &ParamStore<f64>, want_grads: bool| -> Result<(f64, Option<crate::Gradients<f64>>)> {
        let mut g = Graph::with_params(store);
        let vars: Vec<Var> = ids.iter().map(|&id| g.param(id)).collect();
        let out = f(&mut g, &vars)?;
        let w = weights.get_or_insert_with(|| {
            let shape = g.shape(out).to_vec();
            let n = shape.iter().product::<usize>();
            let mut r = rng::seeded(seed);
            Tensor::new(shape, (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
        });
        let wv = g.input(w.clone());
        let prod = g.mul(out, wv)?;
        let loss = g.sum(prod)?;
        let value = g.value(loss).item();
        let grads = if want_grads { Some(g.backward(loss)?) } else { None };
        Ok((value, grads))
    };

    let (_, grads) = eval(&store, true)?;
    let grads = grads.expect("requested");
    let mut report = GradCheck { max_rel_error: 0.0, max_abs_error: 0.0, checked: 0 };
    for &id in &ids {
        let analytic = grads.get(id).cloned().unwrap_or_else(|| Tensor::zeros(store.get(id).shape().to_vec()));
        for j in 0..store.get(id).numel() {
            let orig = store.get(id).data()[j];
            store.get_mut(id).data_mut()[j] = orig + h;
            let (plus, _) = eval(&store, false)?;
            store.get_mut(id).data_mut()[j] = orig - h;
            let (minus, _) = eval(&store, false)?;
            store.get_mut(id).data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.data()[j];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(REL_FLOOR);
            report.max_abs_error = report.max_abs_error.max(abs);
            report.max_rel_error = report.max_rel_error.max(rel);
            report.checked += 1;
        }
    }
    Ok(report)
}

/// Uniform random tensor in `[-1, 1)`.
pub fn uniform(shape: &[usize], rng: &mut rng::Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

type Case = fn(&mut rng::Rng) -> Result<GradCheck>;

fn conv_case(r: &mut rng::Rng) -> Result<GradCheck> {
    let stride = r.random_range(1..=2);
    let dilation = r.random_range(1..=2);
    let padding = r.random_range(0..=2);
    let inputs = [uniform(&[2, 3, 9], r), uniform(&[4, 3, 3], r), uniform(&[4], r)];
    check(&inputs, 1e-5, r.random(), |g, v| g.conv1d(v[0], v[1], Some(v[2]), stride, dilation, padding))
}

fn attention_case(r: &mut rng::Rng) -> Result<GradCheck> {
    let inputs = [uniform(&[2, 5, 6], r), uniform(&[2, 5, 6], r), uniform(&[2, 5, 6], r)];
    check(&inputs, 1e-5, r.random(), |g, v| g.attention(v[0], v[1], v[2], 2))
}

/// Layer-normalized multi-head self-attention block with projections and residual.
fn mhsa_case(r: &mut rng::Rng) -> Result<GradCheck> {
    let d = 4;
    let inputs = [
        uniform(&[2, 3, d], r),
        uniform(&[d], r),
        uniform(&[d], r),
        uniform(&[d, 3 * d], r),
        uniform(&[d, d], r),
        uniform(&[d], r),
    ];
    check(&inputs, 1e-5, r.random(), |g, v| {
        let h = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
        let qkv = g.linear(h, v[3], None)?;
        let q = g.narrow(qkv, 2, 0, d)?;
        let k = g.narrow(qkv, 2, d, d)?;
        let val = g.narrow(qkv, 2, 2 * d, d)?;
        let a = g.attention(q, k, val, 2)?;
        let o = g.linear(a, v[4], Some(v[5]))?;
        g.add(v[0], o)
    })
}

fn snake_case(r: &mut rng::Rng) -> Result<GradCheck> {
    let alpha = Tensor::new([3], (0..3).map(|_| r.random_range(0.3..2.0)).collect())?;
    let inputs = [uniform(&[2, 3, 5], r), alpha];
    check(&inputs, 1e-5, r.random(), |g, v| g.snake(v[0], v[1]))
}

fn cross_entropy_case(r: &mut rng::Rng) -> Result<GradCheck> {
    let targets: Vec<usize> = (0..6).map(|_| r.random_range(0..5)).collect();
    let weights: Vec<f64> = (0..6).map(|i| if i % 3 == 0 { 0.0 } else { 1.0 }).collect();
    let inputs = [uniform(&[6, 5], r)];
    check(&inputs, 1e-5, r.random(), move |g, v| g.cross_entropy(v[0], &targets, Some(&weights)))
}

fn embedding_case(r: &mut rng::Rng) -> Result<GradCheck> {
    let ids: Vec<usize> = (0..6).map(|_| r.random_range(0..4)).collect();
    check(&[uniform(&[4, 3], r)], 1e-5, r.random(), move |g, v| g.embedding(v[0], &ids, &[2, 3]))
}

/// The named per-op gradient checks shared by the test suites.
pub fn op_cases() -> Vec<(&'static str, Case)> {
    vec![
        ("conv1d", conv_case),
        ("upsample2", |r| check(&[uniform(&[2, 3, 4], r)], 1e-5, r.random(), |g, v| g.upsample2(v[0]))),
        ("linear", |r| {
            let inputs = [uniform(&[2, 3, 4], r), uniform(&[4, 5], r), uniform(&[5], r)];
            check(&inputs, 1e-5, r.random(), |g, v| g.linear(v[0], v[1], Some(v[2])))
        }),
        ("softmax", |r| check(&[uniform(&[3, 6], r)], 1e-5, r.random(), |g, v| g.softmax(v[0]))),
        ("layer_norm", |r| {
            let inputs = [uniform(&[2, 3, 5], r), uniform(&[5], r), uniform(&[5], r)];
            check(&inputs, 1e-5, r.random(), |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5))
        }),
        ("group_norm", |r| {
            let inputs = [uniform(&[2, 4, 5], r), uniform(&[4], r), uniform(&[4], r)];
            check(&inputs, 1e-5, r.random(), |g, v| g.group_norm(v[0], 2, v[1], v[2], 1e-5))
        }),
        ("attention", attention_case),
        ("self_attention_block", mhsa_case),
        ("relu", |r| check(&[uniform(&[4, 6], r)], 1e-5, r.random(), |g, v| g.relu(v[0]))),
        ("gelu", |r| check(&[uniform(&[4, 6], r)], 1e-5, r.random(), |g, v| g.gelu(v[0]))),
        ("exp", |r| check(&[uniform(&[4, 6], r)], 1e-5, r.random(), |g, v| g.exp(v[0]))),
        ("snake", snake_case),
        ("cross_entropy", cross_entropy_case),
        ("l1_loss", |r| {
            check(&[uniform(&[3, 7], r), uniform(&[3, 7], r)], 1e-5, r.random(), |g, v| g.l1_loss(v[0], v[1]))
        }),
        ("mse_loss", |r| {
            check(&[uniform(&[3, 7], r), uniform(&[3, 7], r)], 1e-5, r.random(), |g, v| g.mse_loss(v[0], v[1]))
        }),
        ("mul", |r| check(&[uniform(&[3, 4], r), uniform(&[3, 4], r)], 1e-5, r.random(), |g, v| g.mul(v[0], v[1]))),
        ("add_broadcast", |r| {
            check(&[uniform(&[2, 3, 4], r), uniform(&[3, 4], r)], 1e-5, r.random(), |g, v| g.add_broadcast(v[0], v[1]))
        }),
        ("concat_narrow", |r| {
            check(&[uniform(&[2, 2, 3], r), uniform(&[2, 1, 3], r)], 1e-5, r.random(), |g, v| {
                let c = g.concat(&[v[0], v[1]], 1)?;
                g.narrow(c, 1, 1, 2)
            })
        }),
        ("swap_last", |r| check(&[uniform(&[2, 3, 4], r)], 1e-5, r.random(), |g, v| g.swap_last(v[0]))),
        ("embedding", embedding_case),
        ("l2_normalize_last", |r| {
            check(&[uniform(&[3, 4], r)], 1e-5, r.random(), |g, v| g.l2_normalize_last(v[0], 1e-12))
        }),
        ("batch_norm", |r| {
            let inputs = [uniform(&[3, 2, 4], r), uniform(&[2], r), uniform(&[2], r)];
            check(&inputs, 1e-5, r.random(), |g, v| g.batch_norm(v[0], v[1], v[2], 1e-5))
        }),
        ("channel_affine", |r| {
            let inputs = [uniform(&[2, 3, 4], r), uniform(&[3], r), uniform(&[3], r)];
            check(&inputs, 1e-5, r.random(), |g, v| g.channel_affine(v[0], v[1], v[2]))
        }),
        ("mean_last", |r| check(&[uniform(&[2, 3, 4], r)], 1e-5, r.random(), |g, v| g.mean_last(v[0]))),
    ]
}

/// Runs every case in [`op_cases`] on `instances` random draws; returns the worst
/// relative error per op.
pub fn run_op_suite(instances: usize, seed: u64) -> Result<Vec<(&'static str, f64)>> {
    let mut out = Vec::new();
    for (name, case) in op_cases() {
        let mut r = rng::stream(seed, name);
        let mut worst: f64 = 0.0;
        for _ in 0..instances {
            worst = worst.max(case(&mut r)?.max_rel_error);
        }
        out.push((name, worst));
    }
    Ok(out)
}
