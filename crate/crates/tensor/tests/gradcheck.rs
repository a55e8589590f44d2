//! Analytic gradients against central finite differences.
//!
//! The oracle perturbs one input element at a time by `EPS` and evaluates
//! the forward pass twice; it never calls `backward`. The loss is a fixed
//! random projection `sum(c * out)` accumulated in f64 from the op outputs.

use dgmr_tensor::nn::Linear;
use dgmr_tensor::{Graph, ParamStore, Result, Rng, Tensor, Var};
use proptest::prelude::*;

const EPS: f32 = 1e-3;
const TOL: f64 = 1e-3;
/// Relative error is measured against `max(|analytic|, |numeric|, floor)`
/// with `floor = max(1, max|out|)`. Central differences on an f32 forward
/// pass carry round-off of order `u * |out| / EPS`, so the floor tracks the
/// output scale.
fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

fn output_floor(t: &Tensor) -> f64 {
    t.data().iter().fold(1.0f64, |m, &v| m.max(v.abs() as f64))
}

type Build = dyn Fn(&mut Graph, &[Var]) -> Result<Var>;

fn projected_loss(g: &Graph, out: Var, proj: &[f32]) -> f64 {
    g.value(out)
        .data()
        .iter()
        .zip(proj)
        .map(|(&o, &c)| o as f64 * c as f64)
        .sum()
}

fn forward(build: &Build, inputs: &[Tensor], proj: &[f32]) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = build(&mut g, &vars).unwrap();
    projected_loss(&g, out, proj)
}

/// Returns the worst relative error over all input elements.
fn check(build: &Build, inputs: Vec<Tensor>, seed: u64) -> f64 {
    let mut rng = Rng::seed(seed);
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = build(&mut g, &vars).unwrap();
    let n_out = g.value(out).numel();
    let floor = output_floor(g.value(out));
    let proj: Vec<f32> = (0..n_out).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
    let c = g.constant(Tensor::new(g.shape(out).to_vec(), proj.clone()).unwrap());
    let prod = g.mul(out, c).unwrap();
    let loss = g.sum(prod).unwrap();
    let grads = g.backward(loss).unwrap();

    let mut worst = 0f64;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[i]).map(|s| s.to_vec()).unwrap_or(vec![0.0; input.numel()]);
        for j in 0..input.numel() {
            let mut plus = inputs.clone();
            plus[i].data_mut()[j] += EPS;
            let mut minus = inputs.clone();
            minus[i].data_mut()[j] -= EPS;
            let num = (forward(build, &plus, &proj) - forward(build, &minus, &proj)) / (2.0 * EPS as f64);
            let e = rel_err(analytic[j] as f64, num, floor);
            worst = worst.max(e);
        }
    }
    worst
}

fn rand_tensor(rng: &mut Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.uniform_range(lo, hi)).collect()).unwrap()
}

/// Values bounded away from zero so ReLU kinks sit outside the FD stencil.
fn away_from_zero(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v = rng.uniform_range(0.05, 1.5);
            if rng.uniform() < 0.5 { -v } else { v }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

macro_rules! op_case {
    ($name:ident, $inputs:expr, $build:expr) => {
        #[test]
        fn $name() {
            let mut rng = Rng::seed(stringify!($name).len() as u64);
            let inputs: Vec<Tensor> = $inputs(&mut rng);
            let worst = check(&$build, inputs, 11);
            assert!(worst < TOL, "{}: worst rel err {worst}", stringify!($name));
        }
    };
}

op_case!(grad_matmul, |r: &mut Rng| vec![rand_tensor(r, &[2, 3, 4], -1., 1.), rand_tensor(r, &[4, 5], -1., 1.)],
    |g: &mut Graph, v: &[Var]| g.matmul(v[0], v[1]));
op_case!(grad_bmm, |r: &mut Rng| vec![rand_tensor(r, &[3, 2, 4], -1., 1.), rand_tensor(r, &[3, 4, 5], -1., 1.)],
    |g: &mut Graph, v: &[Var]| g.bmm(v[0], v[1], false));
op_case!(grad_bmm_transposed, |r: &mut Rng| vec![rand_tensor(r, &[3, 2, 4], -1., 1.), rand_tensor(r, &[3, 5, 4], -1., 1.)],
    |g: &mut Graph, v: &[Var]| g.bmm(v[0], v[1], true));
op_case!(grad_add_broadcast, |r: &mut Rng| vec![rand_tensor(r, &[2, 3, 4], -1., 1.), rand_tensor(r, &[3, 1], -1., 1.)],
    |g: &mut Graph, v: &[Var]| g.add(v[0], v[1]));
op_case!(grad_sub_suffix, |r: &mut Rng| vec![rand_tensor(r, &[4, 3], -1., 1.), rand_tensor(r, &[3], -1., 1.)],
    |g: &mut Graph, v: &[Var]| g.sub(v[0], v[1]));
op_case!(grad_mul_prefix, |r: &mut Rng| vec![rand_tensor(r, &[4, 3], -1., 1.), rand_tensor(r, &[4, 1], -1., 1.)],
    |g: &mut Graph, v: &[Var]| g.mul(v[0], v[1]));
op_case!(grad_div, |r: &mut Rng| vec![rand_tensor(r, &[3, 4], -1., 1.), rand_tensor(r, &[3, 4], 0.5, 2.)],
    |g: &mut Graph, v: &[Var]| g.div(v[0], v[1]));
op_case!(grad_relu, |r: &mut Rng| vec![away_from_zero(r, &[3, 5])],
    |g: &mut Graph, v: &[Var]| g.relu(v[0]));
op_case!(grad_tanh, |r: &mut Rng| vec![rand_tensor(r, &[3, 5], -2., 2.)],
    |g: &mut Graph, v: &[Var]| g.tanh(v[0]));
op_case!(grad_sigmoid, |r: &mut Rng| vec![rand_tensor(r, &[3, 5], -3., 3.)],
    |g: &mut Graph, v: &[Var]| g.sigmoid(v[0]));
op_case!(grad_exp, |r: &mut Rng| vec![rand_tensor(r, &[3, 5], -2., 1.)],
    |g: &mut Graph, v: &[Var]| g.exp(v[0]));
op_case!(grad_log, |r: &mut Rng| vec![rand_tensor(r, &[3, 5], 0.3, 3.)],
    |g: &mut Graph, v: &[Var]| g.log(v[0]));
op_case!(grad_softplus, |r: &mut Rng| vec![rand_tensor(r, &[3, 5], -3., 3.)],
    |g: &mut Graph, v: &[Var]| g.softplus(v[0]));
op_case!(grad_sqrt, |r: &mut Rng| vec![rand_tensor(r, &[3, 5], 0.3, 3.)],
    |g: &mut Graph, v: &[Var]| g.sqrt(v[0]));
op_case!(grad_softmax, |r: &mut Rng| vec![rand_tensor(r, &[3, 6], -2., 2.)],
    |g: &mut Graph, v: &[Var]| g.softmax(v[0]));
op_case!(grad_log_softmax, |r: &mut Rng| vec![rand_tensor(r, &[3, 6], -2., 2.)],
    |g: &mut Graph, v: &[Var]| g.log_softmax(v[0]));
op_case!(grad_layer_norm, |r: &mut Rng| vec![rand_tensor(r, &[3, 6], -2., 2.), rand_tensor(r, &[6], 0.5, 1.5), rand_tensor(r, &[6], -1., 1.)],
    |g: &mut Graph, v: &[Var]| g.layer_norm(v[0], v[1], v[2], 1e-5));
op_case!(grad_sum_axis, |r: &mut Rng| vec![rand_tensor(r, &[2, 3, 4], -1., 1.)],
    |g: &mut Graph, v: &[Var]| g.sum_axis(v[0], 1));
op_case!(grad_mean, |r: &mut Rng| vec![rand_tensor(r, &[2, 3, 4], -1., 1.)],
    |g: &mut Graph, v: &[Var]| g.mean(v[0]));
op_case!(grad_concat_slice, |r: &mut Rng| vec![rand_tensor(r, &[2, 3], -1., 1.), rand_tensor(r, &[2, 4], -1., 1.)],
    |g: &mut Graph, v: &[Var]| { let c = g.concat(&[v[0], v[1]], 1)?; let s = g.slice(c, 1, 2, 4)?; g.square(s) });
op_case!(grad_permute, |r: &mut Rng| vec![rand_tensor(r, &[2, 3, 4], -1., 1.)],
    |g: &mut Graph, v: &[Var]| { let p = g.permute(v[0], &[1, 2, 0])?; g.square(p) });
op_case!(grad_index_rows, |r: &mut Rng| vec![rand_tensor(r, &[5, 3], -1., 1.)],
    |g: &mut Graph, v: &[Var]| { let e = g.index_rows(v[0], &[4, 0, 4, 2])?; g.tanh(e) });
op_case!(grad_pick_last, |r: &mut Rng| vec![rand_tensor(r, &[4, 5], -1., 1.)],
    |g: &mut Graph, v: &[Var]| { let l = g.log_softmax(v[0])?; g.pick_last(l, &[0, 4, 2, 2]) });
op_case!(grad_dropout_fixed_mask, |r: &mut Rng| vec![rand_tensor(r, &[4, 5], -1., 1.)],
    |g: &mut Graph, v: &[Var]| { let mut rng = Rng::seed(99); g.dropout(v[0], 0.5, &mut rng) });

#[test]
fn random_three_layer_mlp_parameters() {
    let mut rng = Rng::seed(2024);
    let mut store = ParamStore::new();
    let dims = [6, 8, 7, 3];
    let layers: Vec<Linear> = dims
        .windows(2)
        .enumerate()
        .map(|(i, w)| Linear::new(&mut store, &format!("l{i}"), w[0], w[1], &mut rng))
        .collect();
    for p in store.iter_mut() {
        let n = p.tensor.numel();
        let noise: Vec<f32> = (0..n).map(|_| rng.uniform_range(-0.3, 0.3)).collect();
        p.tensor.data_mut().iter_mut().zip(noise).for_each(|(w, e)| *w += e);
    }
    let x = rand_tensor(&mut rng, &[5, 6], -1.0, 1.0);
    let targets = [0usize, 2, 1, 1, 0];

    let loss_of = |store: &ParamStore, g: &mut Graph, bound: bool| -> Var {
        let p = if bound { store.bind(g) } else { store.bind_frozen(g) };
        let mut h = g.constant(x.clone());
        for (i, l) in layers.iter().enumerate() {
            h = l.forward(g, &p, h).unwrap();
            if i + 1 < layers.len() {
                h = g.tanh(h).unwrap();
            }
        }
        let lp = g.log_softmax(h).unwrap();
        let picked = g.pick_last(lp, &targets).unwrap();
        let m = g.mean(picked).unwrap();
        g.neg(m).unwrap()
    };

    let mut g = Graph::new();
    let p = store.bind(&mut g);
    // rebuild with the same binding order: bind() above created the leaves
    let mut h = g.constant(x.clone());
    for (i, l) in layers.iter().enumerate() {
        h = l.forward(&mut g, &p, h).unwrap();
        if i + 1 < layers.len() {
            h = g.tanh(h).unwrap();
        }
    }
    let lp = g.log_softmax(h).unwrap();
    let picked = g.pick_last(lp, &targets).unwrap();
    let m = g.mean(picked).unwrap();
    let loss = g.neg(m).unwrap();
    let grads = g.backward(loss).unwrap();
    store.accumulate(&p, &grads);

    let mut worst = 0f64;
    let names: Vec<String> = store.names().map(String::from).collect();
    for name in names {
        let id = store.id(&name).unwrap();
        let analytic = store.get(id).grad().unwrap().to_vec();
        for j in 0..analytic.len() {
            let eval = |delta: f32| {
                let mut s = store.clone();
                s.get_mut(id).data_mut()[j] += delta;
                let mut g = Graph::new();
                let l = loss_of(&s, &mut g, false);
                g.value(l).item() as f64
            };
            let num = (eval(EPS) - eval(-EPS)) / (2.0 * EPS as f64);
            worst = worst.max(rel_err(analytic[j] as f64, num, 1.0));
        }
    }
    assert!(worst < TOL, "worst rel err {worst}");
}

#[derive(Clone, Debug)]
enum Step {
    Tanh,
    Sigmoid,
    Softplus,
    Square,
    Softmax,
    LogSoftmax,
    LayerNorm,
    Affine(f32, f32),
    MulSelfShifted,
    DivSoftplus,
    MatMulConst(u64),
    ConcatSelf,
    MeanLastKeep,
}

fn step_strategy() -> impl Strategy<Value = Step> {
    prop_oneof![
        Just(Step::Tanh),
        Just(Step::Sigmoid),
        Just(Step::Softplus),
        Just(Step::Square),
        Just(Step::Softmax),
        Just(Step::LogSoftmax),
        Just(Step::LayerNorm),
        (-1.5f32..1.5, -1.0f32..1.0).prop_map(|(a, b)| Step::Affine(a, b)),
        Just(Step::MulSelfShifted),
        Just(Step::DivSoftplus),
        (0u64..1000).prop_map(Step::MatMulConst),
        Just(Step::ConcatSelf),
        Just(Step::MeanLastKeep),
    ]
}

fn min_row_variance(t: &Tensor) -> f64 {
    let d = t.cols();
    t.data()
        .chunks(d)
        .map(|r| {
            let m = r.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
            r.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / d as f64
        })
        .fold(f64::INFINITY, f64::min)
}

fn apply(g: &mut Graph, x: Var, step: &Step) -> Result<Var> {
    match step {
        Step::Tanh => g.tanh(x),
        Step::Sigmoid => g.sigmoid(x),
        Step::Softplus => g.softplus(x),
        Step::Square => {
            let t = g.tanh(x)?;
            g.square(t)
        }
        Step::Softmax => g.softmax(x),
        Step::LogSoftmax => g.log_softmax(x),
        Step::LayerNorm => {
            let d = *g.shape(x).last().unwrap();
            // near-constant rows put the FD stencil inside the 1/sigma blow-up
            if d < 3 || min_row_variance(g.value(x)) < 0.02 {
                return g.tanh(x);
            }
            let gamma = g.constant(Tensor::full(vec![d], 1.3));
            let beta = g.constant(Tensor::full(vec![d], 0.2));
            g.layer_norm(x, gamma, beta, 1e-5)
        }
        Step::Affine(a, b) => g.affine(x, *a, *b),
        Step::MulSelfShifted => {
            let s = g.affine(x, 0.5, 1.0)?;
            g.mul(x, s)
        }
        Step::DivSoftplus => {
            let d = g.softplus(x)?;
            let d = g.affine(d, 1.0, 0.5)?;
            g.div(x, d)
        }
        Step::MatMulConst(seed) => {
            let d = *g.shape(x).last().unwrap();
            let n = 1 + (*seed as usize % 8);
            let mut r = Rng::seed(*seed);
            let w = rand_tensor(&mut r, &[d, n], -0.8, 0.8);
            let w = g.constant(w);
            g.matmul(x, w)
        }
        Step::ConcatSelf => {
            let t = g.tanh(x)?;
            g.concat(&[x, t], 1)
        }
        Step::MeanLastKeep => {
            let s = g.mean_axis(x, 1)?;
            let rows = g.shape(s)[0];
            let s = g.reshape(s, &[rows, 1])?;
            g.mul(x, s)
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(std::env::var("GRADCHECK_CASES").ok().and_then(|v| v.parse().ok()).unwrap_or(48)))]

    #[test]
    fn random_compositions_match_finite_differences(
        rows in 1usize..=4,
        cols in 1usize..=8,
        steps in prop::collection::vec(step_strategy(), 1..=4),
        seed in 0u64..10_000,
    ) {
        let mut rng = Rng::seed(seed);
        let x = rand_tensor(&mut rng, &[rows, cols], -1.0, 1.0);
        let build = move |g: &mut Graph, v: &[Var]| -> Result<Var> {
            let mut h = v[0];
            for s in &steps {
                h = apply(g, h, s)?;
                if g.shape(h)[1] > 8 {
                    h = g.slice(h, 1, 0, 8)?;
                }
            }
            Ok(h)
        };
        let worst = check(&build, vec![x], seed);
        prop_assert!(worst < TOL, "worst rel err {}", worst);
    }
}


