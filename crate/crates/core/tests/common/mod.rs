//! Central finite-difference checks shared by the gradient and acceptance
//! targets.

use homlab::grammar::{build_dataset, DatasetSpec, VocabSpec};
use homlab::model::{ModelConfig, Transformer};
use homlab::numerics::{Tape, Tensor, Var};
use homlab::trainer::{ce_on_tape, Batch};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f32 = 1e-3;
const REL_TOL: f32 = 1e-3;

/// `|a - n| <= tol * max(1, |a|, |n|)`.
fn close(analytic: f32, numeric: f32) -> bool {
    (analytic - numeric).abs() <= REL_TOL * 1f32.max(analytic.abs()).max(numeric.abs())
}

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap()
}

/// Random values kept away from zero so ReLU kinks lie outside `±H`.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v = rng.random_range(0.05f32..1.0);
            if rng.random_bool(0.5) { v } else { -v }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

type Build<'a> = dyn Fn(&mut Tape, &[Var]) -> Var + 'a;

/// Scalar loss of `build` at `inputs`; non-scalar outputs are contracted
/// with a fixed random weight tensor.
fn loss_of(build: &Build, inputs: &[Tensor], weights: &Option<Tensor>, track: bool) -> (Tape, Var, Vec<Var>) {
    let mut tape = Tape::new();
    let vars: Vec<Var> =
        inputs.iter().map(|t| if track { tape.input(t.clone()) } else { tape.constant(t.clone()) }.unwrap()).collect();
    let out = build(&mut tape, &vars);
    let loss = match weights {
        Some(w) => {
            let wv = tape.constant(w.clone()).unwrap();
            let p = tape.mul(out, wv).unwrap();
            tape.mean_all(p).unwrap()
        }
        None => out,
    };
    (tape, loss, vars)
}

fn check(name: &str, inputs: Vec<Tensor>, build: &Build, rng: &mut ChaCha8Rng) -> Result<(), String> {
    let probe = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone()).unwrap()).collect();
        let out = build(&mut tape, &vars);
        tape.value(out).clone()
    };
    let weights = (!probe.shape().is_empty()).then(|| rand_tensor(probe.shape(), rng));
    let (mut tape, loss, vars) = loss_of(build, &inputs, &weights, true);
    let grads = tape.backward(loss).unwrap();
    for (i, (input, var)) in inputs.iter().zip(&vars).enumerate() {
        let analytic = grads.wrt(*var).cloned().unwrap_or_else(|| Tensor::zeros(input.shape()));
        for j in 0..input.len() {
            let eval = |delta: f32| {
                let mut moved = inputs.clone();
                moved[i].data_mut()[j] += delta;
                let (tape, loss, _) = loss_of(build, &moved, &weights, false);
                tape.value(loss).item()
            };
            let numeric = (eval(H) - eval(-H)) / (2.0 * H);
            let a = analytic.data()[j];
            if !close(a, numeric) {
                return Err(format!("{name}: input {i} element {j}: analytic {a}, numeric {numeric}"));
            }
        }
    }
    Ok(())
}

/// Every differentiable tape operation, on random inputs per seed.
pub fn check_operations(seeds: u64) -> Result<(), String> {
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = &mut rng;
        check("matmul", vec![rand_tensor(&[3, 4], r), rand_tensor(&[4, 2], r)], &|t, v| t.matmul(v[0], v[1]).unwrap(), r)?;
        check(
            "linear",
            vec![rand_tensor(&[3, 4], r), rand_tensor(&[4, 5], r), rand_tensor(&[5], r)],
            &|t, v| t.linear(v[0], v[1], v[2]).unwrap(),
            r,
        )?;
        check("bmm", vec![rand_tensor(&[2, 3, 4], r), rand_tensor(&[2, 4, 2], r)], &|t, v| t.bmm(v[0], v[1], false).unwrap(), r)?;
        check("bmm_t", vec![rand_tensor(&[2, 3, 4], r), rand_tensor(&[2, 5, 4], r)], &|t, v| t.bmm(v[0], v[1], true).unwrap(), r)?;
        check("add", vec![rand_tensor(&[3, 4], r), rand_tensor(&[3, 4], r)], &|t, v| t.add(v[0], v[1]).unwrap(), r)?;
        check("add_broadcast", vec![rand_tensor(&[2, 3, 4], r), rand_tensor(&[4], r)], &|t, v| t.add(v[0], v[1]).unwrap(), r)?;
        check("sub", vec![rand_tensor(&[3, 4], r), rand_tensor(&[3, 4], r)], &|t, v| t.sub(v[0], v[1]).unwrap(), r)?;
        check("mul", vec![rand_tensor(&[3, 4], r), rand_tensor(&[3, 4], r)], &|t, v| t.mul(v[0], v[1]).unwrap(), r)?;
        check("mul_broadcast", vec![rand_tensor(&[2, 3, 4], r), rand_tensor(&[3, 4], r)], &|t, v| t.mul(v[0], v[1]).unwrap(), r)?;
        check("scale", vec![rand_tensor(&[3, 4], r)], &|t, v| t.scale(v[0], -1.7).unwrap(), r)?;
        check(
            "concat",
            vec![rand_tensor(&[2, 3, 2], r), rand_tensor(&[2, 3, 4], r), rand_tensor(&[2, 3, 1], r)],
            &|t, v| t.concat(v).unwrap(),
            r,
        )?;
        check("slice_rows", vec![rand_tensor(&[5, 3], r)], &|t, v| t.slice_rows(v[0], 1, 4).unwrap(), r)?;
        check("gather_rows", vec![rand_tensor(&[4, 3], r)], &|t, v| t.gather_rows(v[0], &[2, 0, 2, 3, 2]).unwrap(), r)?;
        check("embedding", vec![rand_tensor(&[6, 3], r)], &|t, v| t.embedding(v[0], &[5, 1, 1]).unwrap(), r)?;
        for axis in 0..3 {
            check("mean_axis", vec![rand_tensor(&[2, 3, 4], r)], &|t, v| t.mean_axis(v[0], axis).unwrap(), r)?;
        }
        check("mean_all", vec![rand_tensor(&[3, 4], r)], &|t, v| t.mean_all(v[0]).unwrap(), r)?;
        let scores = rand_tensor(&[2, 5], r);
        check("softmax", vec![scores], &|t, v| t.softmax(v[0]).unwrap(), r)?;
        check("causal_softmax", vec![rand_tensor(&[2, 4, 4], r)], &|t, v| t.causal_softmax(v[0]).unwrap(), r)?;
        check(
            "layer_norm",
            vec![rand_tensor(&[3, 6], r), rand_tensor(&[6], r), rand_tensor(&[6], r)],
            &|t, v| t.layer_norm(v[0], v[1], v[2]).unwrap(),
            r,
        )?;
        check("relu", vec![away_from_zero(&[3, 4], r)], &|t, v| t.relu(v[0]).unwrap(), r)?;
        check("reshape", vec![rand_tensor(&[2, 6], r)], &|t, v| t.reshape(v[0], &[3, 2, 2]).unwrap(), r)?;
        check("swap_axes12", vec![rand_tensor(&[2, 3, 2, 2], r)], &|t, v| t.swap_axes12(v[0]).unwrap(), r)?;
        let targets: Vec<usize> = (0..5).map(|_| r.random_range(0..4)).collect();
        let mask = vec![true, false, true, true, false];
        check("cross_entropy", vec![rand_tensor(&[5, 4], r)], &|t, v| t.cross_entropy(v[0], &targets, &mask).unwrap(), r)?;
        // A composite chain, so gradient accumulation through shared nodes is covered.
        check(
            "composite",
            vec![rand_tensor(&[3, 4], r), rand_tensor(&[4, 4], r)],
            &|t, v| {
                let h = t.matmul(v[0], v[1]).unwrap();
                let s = t.softmax(h).unwrap();
                let m = t.mul(s, h).unwrap();
                t.add(m, v[0]).unwrap()
            },
            r,
        )?;
    }
    Ok(())
}

/// Sampled parameter gradients of a one-layer model's training loss.
pub fn check_one_layer_model(seeds: u64) -> Result<(), String> {
    let vocab = VocabSpec::default();
    let ds = build_dataset(&DatasetSpec { max_primitives: 2, num_noise: 2, ..DatasetSpec::default() }, &vocab).unwrap();
    let cfg = ModelConfig { d_model: 8, n_heads: 2, d_ff: 16, n_layers: 1, ..ModelConfig::default() };
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let mut model = Transformer::init(cfg.clone(), &mut rng).unwrap();
        // Larger weights than the default init make every term visible.
        for t in model.params.tensors_mut() {
            t.data_mut().iter_mut().for_each(|x| *x = rng.random_range(-0.5f32..0.5));
        }
        let picks: Vec<_> = (0..3).map(|_| &ds.train[rng.random_range(0..ds.train.len())]).collect();
        let batch = Batch::new(&picks);
        let loss_at = |m: &Transformer| {
            let mut tape = Tape::new();
            let l = ce_on_tape(m, &mut tape, &batch).unwrap();
            tape.value(l).item()
        };
        let mut tape = Tape::new();
        let loss = ce_on_tape(&model, &mut tape, &batch).unwrap();
        let grads = tape.backward(loss).unwrap();
        let analytic: Vec<(homlab::numerics::ParamKey, Tensor)> = grads.params().map(|(k, t)| (k, t.clone())).collect();
        if analytic.len() != model.params.len() {
            return Err(format!("seed {seed}: {} of {} parameters received a gradient", analytic.len(), model.params.len()));
        }
        for (key, g) in analytic {
            let i = key.0;
            let n = model.params.get(i).len();
            for _ in 0..4 {
                let j = rng.random_range(0..n);
                let orig = model.params.get(i).data()[j];
                model.params.get_mut(i).data_mut()[j] = orig + H;
                let up = loss_at(&model);
                model.params.get_mut(i).data_mut()[j] = orig - H;
                let down = loss_at(&model);
                model.params.get_mut(i).data_mut()[j] = orig;
                let numeric = (up - down) / (2.0 * H);
                let a = g.data()[j];
                if !close(a, numeric) {
                    return Err(format!("seed {seed} param {} [{j}]: analytic {a}, numeric {numeric}", model.params.name(i)));
                }
            }
        }
    }
    Ok(())
}
