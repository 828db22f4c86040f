//! Independent finite-difference oracles shared by the integration suites.
#![allow(dead_code)]

use nlgr::datagen::{self, DataConfig, Dataset, InteractionRecord};
use nlgr::diffcore::{grad_check, Graph, NodeId, ParamSet, RngStream, Tensor};
use nlgr::evaluator::{self, Bind, Dims, Evaluator, ModelConfig};
use nlgr::generator::Generator;
use nlgr::reward::RewardConfig;
use nlgr::trainer::{self, TrainConfig};
use nlgr::Result;
use rand::Rng;

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-4;

pub fn rand_tensor(rng: &mut RngStream, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let len = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..len).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Contracts any node with fixed random weights so every output coordinate
/// carries a distinct gradient.
fn project(g: &mut Graph, out: NodeId, seed: u64) -> Result<NodeId> {
    let mut rng = RngStream::new(seed);
    let w = rand_tensor(&mut rng, &g.shape(out).to_vec(), -1.0, 1.0);
    let w = g.constant(w);
    let prod = g.mul(out, w)?;
    Ok(g.sum_all(prod))
}

type Case = (&'static str, Box<dyn Fn(&mut Graph, &[NodeId]) -> Result<NodeId>>, Vec<Tensor>);

/// One check per primitive with shapes drawn from `rng`.
pub fn primitive_cases(rng: &mut RngStream) -> Vec<Case> {
    let b = rng.random_range(1..4usize);
    let r = rng.random_range(1..5usize);
    let k = rng.random_range(1..5usize);
    let c = rng.random_range(2..5usize);
    let s: u64 = rng.random();
    let ids: Vec<usize> = (0..5).map(|_| rng.random_range(0..r)).collect();
    let masked: Vec<usize> = (0..b).map(|_| rng.random_range(0..c)).collect();
    let mask: Vec<f64> = (0..b * c).map(|i| if masked[i / c] == i % c { f64::NEG_INFINITY } else { 0.0 }).collect();
    let target: Vec<f64> = (0..b * c).map(|_| rng.random_range(0..2) as f64).collect();
    let weight: Vec<f64> = (0..b * c).map(|_| rng.random_range(0.5..2.0)).collect();
    let bce_in = rand_tensor(rng, &[b, c], 0.1, 0.9);
    let log_in = rand_tensor(rng, &[b, c], 0.3, 3.0);
    let mut t = |shape: &[usize]| rand_tensor(rng, shape, -2.0, 2.0);
    let cases: Vec<Case> = vec![
        ("matmul", Box::new(move |g, x| { let y = g.matmul(x[0], x[1])?; project(g, y, s) }), vec![t(&[b, r, k]), t(&[k, c])]),
        ("affine", Box::new(move |g, x| { let y = g.affine(x[0], x[1], x[2])?; project(g, y, s) }), vec![t(&[r, k]), t(&[k, c]), t(&[c])]),
        ("bmm", Box::new(move |g, x| { let y = g.bmm(x[0], x[1], false)?; project(g, y, s) }), vec![t(&[b, r, k]), t(&[b, k, c])]),
        ("bmm_t", Box::new(move |g, x| { let y = g.bmm(x[0], x[1], true)?; project(g, y, s) }), vec![t(&[b, r, k]), t(&[b, c, k])]),
        ("add", Box::new(move |g, x| { let y = g.add(x[0], x[1])?; project(g, y, s) }), vec![t(&[b, c]), t(&[b, c])]),
        ("sub", Box::new(move |g, x| { let y = g.sub(x[0], x[1])?; project(g, y, s) }), vec![t(&[b, c]), t(&[b, c])]),
        ("mul", Box::new(move |g, x| { let y = g.mul(x[0], x[1])?; project(g, y, s) }), vec![t(&[b, c]), t(&[b, c])]),
        ("mul_self", Box::new(move |g, x| { let y = g.mul(x[0], x[0])?; project(g, y, s) }), vec![t(&[b, c])]),
        ("add_bias", Box::new(move |g, x| { let y = g.add_bias(x[0], x[1])?; project(g, y, s) }), vec![t(&[b, r, c]), t(&[c])]),
        ("scale", Box::new(move |g, x| { let y = g.scale(x[0], -1.7); project(g, y, s) }), vec![t(&[b, c])]),
        ("sigmoid", Box::new(move |g, x| { let y = g.sigmoid(x[0]); project(g, y, s) }), vec![t(&[b, c])]),
        ("silu", Box::new(move |g, x| { let y = g.silu(x[0]); project(g, y, s) }), vec![t(&[b, c])]),
        ("log", Box::new(move |g, x| { let y = g.log(x[0]); project(g, y, s) }), vec![log_in]),
        ("softmax_rows", Box::new(move |g, x| { let y = g.softmax_rows(x[0])?; project(g, y, s) }), vec![t(&[b, r, c])]),
        ("softmax_masked", Box::new(move |g, x| {
            let m = g.constant(Tensor::new(vec![b, c], mask.clone())?);
            let z = g.add(x[0], m)?;
            let y = g.softmax_rows(z)?;
            project(g, y, s)
        }), vec![t(&[b, c])]),
        ("reduce_mean", Box::new(move |g, x| { let y = g.reduce_mean(x[0], 1)?; project(g, y, s) }), vec![t(&[b, r, c])]),
        ("reduce_sum", Box::new(move |g, x| { let y = g.reduce_sum(x[0], 2)?; project(g, y, s) }), vec![t(&[b, r, c])]),
        ("sum_all", Box::new(move |g, x| { let y = g.mul(x[0], x[0])?; Ok(g.sum_all(y)) }), vec![t(&[b, c])]),
        ("concat", Box::new(move |g, x| { let y = g.concat(&[x[0], x[1]], 1)?; project(g, y, s) }), vec![t(&[b, r, c]), t(&[b, k, c])]),
        ("expand", Box::new(move |g, x| { let y = g.expand(x[0], 1, r)?; project(g, y, s) }), vec![t(&[b, c])]),
        ("reshape", Box::new(move |g, x| { let y = g.reshape(x[0], &[c, b])?; project(g, y, s) }), vec![t(&[b, c])]),
        ("embed_lookup", Box::new(move |g, x| { let y = g.embed_lookup(x[0], &ids, &[5])?; project(g, y, s) }), vec![t(&[r, c])]),
        ("bce", Box::new(move |g, x| { let y = g.bce(x[0], &target, &weight)?; Ok(g.sum_all(y)) }), vec![bce_in]),
    ];
    cases
}

/// Worst relative error of every primitive at one random configuration.
pub fn primitive_errors(rng: &mut RngStream) -> Result<Vec<(&'static str, f64)>> {
    let b = rng.random_range(1..4usize);
    let c = rng.random_range(2..6usize);
    let x = rand_tensor(rng, &[b, c], -2.0, 2.0);
    let hard: Vec<usize> = (0..b).map(|_| rng.random_range(0..c)).collect();
    let seed: u64 = rng.random();
    let mut out = Vec::new();
    for (name, f, inputs) in primitive_cases(rng) {
        out.push((name, grad_check(f, &inputs, H)?));
    }
    out.push(("straight_through", straight_through_error(&x, &hard, seed)?));
    Ok(out)
}

/// The one-hot forward is piecewise constant, so the straight-through
/// gradient is compared with finite differences of the same linear readout
/// applied to the soft sample.
fn straight_through_error(x: &Tensor, hard: &[usize], seed: u64) -> Result<f64> {
    let mut g = Graph::new();
    let id = g.input(x.clone());
    let soft = g.softmax_rows(id)?;
    let st = g.straight_through(soft, hard)?;
    let root = project(&mut g, st, seed)?;
    g.backward(root)?;
    let analytic = g.grad(id).unwrap();
    let soft_value = |x: &Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let id = g.input(x.clone());
        let soft = g.softmax_rows(id)?;
        let root = project(&mut g, soft, seed)?;
        Ok(g.value(root).item())
    };
    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + H;
        let up = soft_value(&probe)?;
        probe.data_mut()[i] = orig - H;
        let down = soft_value(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * H);
        let a = analytic.data()[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}

/// Central differences over every coordinate of the trainable parameters
/// that `build` binds, against `Graph::param_grads`.
pub fn param_grad_error<F>(params: &mut ParamSet, build: F) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamSet) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let root = build(&mut g, params)?;
    g.backward(root)?;
    let grads = g.param_grads();
    assert!(!grads.is_empty(), "no trainable parameters bound");
    let largest = grads.iter().flat_map(|(_, t)| t.data().iter().map(|v| v.abs())).fold(0.0, f64::max);
    assert!(largest > 1e-3, "gradients too small for a meaningful check: {largest:e}");
    let value = |p: &ParamSet| -> Result<f64> {
        let mut g = Graph::new();
        let root = build(&mut g, p)?;
        Ok(g.value(root).item())
    };
    let mut worst = 0.0f64;
    for (name, grad) in &grads {
        for c in 0..grad.len() {
            let orig = params.get(name)?.data()[c];
            params.get_mut(name)?.data_mut()[c] = orig + H;
            let up = value(params)?;
            params.get_mut(name)?.data_mut()[c] = orig - H;
            let down = value(params)?;
            params.get_mut(name)?.data_mut()[c] = orig;
            let numeric = (up - down) / (2.0 * H);
            let a = grad.data()[c];
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
    }
    Ok(worst)
}

/// A random tiny world: small vocabularies, short lists, a handful of records.
pub struct TinyWorld {
    pub data: Dataset,
    pub model: ModelConfig,
    pub dims: Dims,
}

pub fn tiny_world(rng: &mut RngStream) -> TinyWorld {
    let m = rng.random_range(2..4usize);
    let n = m + rng.random_range(0..3usize);
    let cfg = DataConfig {
        seed: rng.random_range(0..1000),
        num_items: n + rng.random_range(2..6usize),
        num_categories: rng.random_range(1..4),
        num_brands: rng.random_range(1..4),
        num_users: 5,
        history: rng.random_range(1..3),
        list_len: m,
        num_candidates: n,
        num_records: 8,
        test_fraction: 0.25,
        ..DataConfig::default()
    };
    let data = datagen::gen_logs(&cfg).unwrap();
    let layers = rng.random_range(1..3usize);
    let model = ModelConfig {
        dim: rng.random_range(2..5),
        mlp_hidden: (0..layers).map(|_| rng.random_range(2..6)).collect(),
        gen_hidden: rng.random_range(2..6),
    };
    let dims = Dims::from_manifest(&data.manifest);
    TinyWorld { data, model, dims }
}

/// Redraws every parameter from N(0, std²) so tiny models produce outputs,
/// rewards and gradients of order one.
pub fn randomize(params: &mut ParamSet, rng: &mut RngStream, std: f64) {
    let names: Vec<String> = params.iter().map(|(n, _)| n.to_string()).collect();
    for name in names {
        let shape = params.get(&name).unwrap().shape().to_vec();
        params.insert(name, Tensor::normal(&shape, std, rng));
    }
}

fn batch_of(records: &[InteractionRecord], size: usize) -> Vec<&InteractionRecord> {
    records.iter().take(size).collect()
}

/// Gradient error of the evaluator's training loss over all its parameters.
pub fn evaluator_loss_error(rng: &mut RngStream) -> Result<f64> {
    let w = tiny_world(rng);
    let mut ev = Evaluator::new(&w.model, &w.dims, rng.random())?;
    randomize(&mut ev.params, rng, 0.7);
    let batch = batch_of(&w.data.records, 3);
    let shell = ev.clone();
    param_grad_error(&mut ev.params, |g, p| {
        let e = Evaluator { params: p.clone(), ..shell.clone() };
        evaluator::batch_loss(&e, g, &batch, Bind::Train)
    })
}

/// Gradient error of the generator's `(L1 + α·L2)/B` over generator
/// parameters, with the evaluator frozen and Gumbel noise fixed per call.
pub fn generator_loss_error(rng: &mut RngStream) -> Result<f64> {
    let w = tiny_world(rng);
    let mut ev = Evaluator::new(&w.model, &w.dims, rng.random())?;
    randomize(&mut ev.params, rng, 0.7);
    let n = w.data.manifest.num_candidates;
    let mut gen = Generator::new(&w.model, &w.dims, n, rng.random())?;
    randomize(&mut gen.params, rng, 0.7);
    let batch = batch_of(&w.data.records, 3);
    let cfg = TrainConfig {
        beta: [0.5, 1.0, 2.0][rng.random_range(0..3)],
        relative_reward: rng.random_bool(0.5),
        ..TrainConfig::default()
    };
    let reward = RewardConfig {
        scale: Some(rng.random_range(0.3..1.0)),
        ..RewardConfig::default()
    };
    let mut nb: Vec<RngStream> = (0..batch.len()).map(|i| RngStream::new(rng.random()).derive("nb", i as u64)).collect();
    let targets = trainer::record_targets(&ev, &batch, &reward, &cfg, &mut nb)?;
    let alpha = [0.0, 0.2, 1.0][rng.random_range(0..3)];
    let tau = rng.random_range(0.3..1.5);
    let noise_seed: Option<u64> = rng.random_bool(0.5).then(|| rng.random());
    let shell = gen.clone();
    param_grad_error(&mut gen.params, |g, p| {
        let gn = Generator { params: p.clone(), ..shell.clone() };
        let mut streams: Option<Vec<RngStream>> =
            noise_seed.map(|s| (0..batch.len()).map(|i| RngStream::new(s).derive("gumbel", i as u64)).collect());
        let loss = trainer::batch_loss(g, &gn, &ev, &batch, &targets, alpha, tau, streams.as_deref_mut())?;
        Ok(loss.total)
    })
}
