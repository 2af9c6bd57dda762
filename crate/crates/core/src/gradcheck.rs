//! Central finite-difference checks of analytic gradients, run in `f64`.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::error::Result;
use crate::model::{pmae_targets, ParamId, Session, Task, TurboConfig, TurboNet};
use crate::objectives::{ce_loss, combine_graph, info_nce, lambda_ce, lambda_nce, pmae_loss, LogBase, LossWeights};
use crate::partition::{make_partition, PartitionPlan};
use crate::rng::{derive_seed, rng_from, Rng};
use crate::tensor::{Graph, OpKind, Tensor, Var};

/// Maximum accepted relative error.
pub const TOLERANCE: f64 = 1e-4;

/// Denominator floor, so gradients that are numerically zero compare by
/// absolute error instead of producing meaningless ratios.
const REL_FLOOR: f64 = 1e-3;

/// Minimum number of coordinates probed per check (all, if fewer exist).
pub const MIN_COORDS: usize = 64;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Perturbation used for coordinate value `x`.
pub fn step_for(x: f64) -> f64 {
    1e-5 * x.abs().max(1.0)
}

#[derive(Clone, Debug, Serialize)]
pub struct CheckReport {
    pub name: String,
    pub coords: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

impl CheckReport {
    pub fn new(name: &str, errors: &[f64]) -> Self {
        let max = errors.iter().copied().fold(0.0, f64::max);
        let nan = errors.iter().any(|e| e.is_nan());
        Self {
            name: name.to_string(),
            coords: errors.len(),
            max_rel_err: if nan { f64::NAN } else { max },
            passed: !nan && max <= TOLERANCE,
        }
    }
}

/// Picks up to `count` distinct coordinates out of `total` (all when `total <= count`).
pub fn sample_coords(total: usize, count: usize, rng: &mut Rng) -> Vec<usize> {
    if total <= count {
        return (0..total).collect();
    }
    rand::seq::index::sample(rng, total, count).into_vec()
}

/// Checks `d loss / d inputs` for a loss built by `build` from leaf inputs.
///
/// `build` must be a pure function of the input values.
pub fn check_inputs<B>(
    name: &str,
    inputs: &[Tensor<f64>],
    build: B,
    coords_per_input: usize,
    fault: Option<OpKind>,
    rng: &mut Rng,
) -> Result<CheckReport>
where
    B: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor<f64>], with_grad: bool| -> Result<(f64, Vec<Option<Tensor<f64>>>)> {
        let mut g = Graph::<f64>::new();
        if let Some(k) = fault {
            g.inject_fault(k);
        }
        let vars: Vec<Var> = vals.iter().map(|t| g.param(t.clone())).collect();
        let loss = build(&mut g, &vars)?;
        let value = g.value(loss).item();
        if !with_grad {
            return Ok((value, vec![]));
        }
        g.backward(loss)?;
        Ok((value, vars.iter().map(|&v| g.grad(v)).collect()))
    };
    let (_, grads) = eval(inputs, true)?;
    let mut errors = Vec::new();
    for (which, input) in inputs.iter().enumerate() {
        let analytic = grads[which].clone().unwrap_or_else(|| Tensor::zeros(input.shape()));
        for c in sample_coords(input.numel(), coords_per_input, rng) {
            let x = input.data()[c];
            let h = step_for(x);
            let mut probe = inputs.to_vec();
            probe[which].data_mut()[c] = x + h;
            let (up, _) = eval(&probe, false)?;
            probe[which].data_mut()[c] = x - h;
            let (down, _) = eval(&probe, false)?;
            errors.push(rel_err(analytic.data()[c], (up - down) / (2.0 * h)));
        }
    }
    Ok(CheckReport::new(name, &errors))
}

pub fn randn(shape: &[usize], scale: f64, rng: &mut Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            scale * z
        })
        .collect::<Vec<f64>>();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn positive(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(0.5..2.0)).collect()).unwrap()
}

/// Reduces `out` to a scalar with fixed random weights so every output
/// coordinate carries a distinct upstream gradient.
fn weighted_sum(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var> {
    let w = randn(g.shape(out), 1.0, &mut rng_from(seed));
    let w = g.constant(w);
    let p = g.mul(out, w)?;
    Ok(g.sum(p))
}

/// One check per differentiable tensor op.
pub fn op_suite(seed: u64, fault: Option<OpKind>) -> Result<Vec<CheckReport>> {
    let mut rng = rng_from(seed);
    let n = MIN_COORDS;
    let mut reports = Vec::new();
    let mut run = |name: &str,
                   inputs: Vec<Tensor<f64>>,
                   build: &dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
                   rng: &mut Rng|
     -> Result<()> {
        reports.push(check_inputs(name, &inputs, build, n, fault, rng)?);
        Ok(())
    };

    let ab = vec![randn(&[6, 8], 1.0, &mut rng), randn(&[8, 5], 1.0, &mut rng)];
    run("matmul", ab, &|g, v| {
        let c = g.matmul(v[0], v[1])?;
        weighted_sum(g, c, 1)
    }, &mut rng)?;
    let ab = vec![randn(&[2, 3, 5, 4], 1.0, &mut rng), randn(&[2, 3, 6, 4], 1.0, &mut rng)];
    run("matmul_batched_transposed", ab, &|g, v| {
        let c = g.matmul_t(v[0], v[1], false, true)?;
        weighted_sum(g, c, 2)
    }, &mut rng)?;
    let ab = vec![randn(&[6, 4], 1.0, &mut rng), randn(&[2, 6, 5], 1.0, &mut rng)];
    run("matmul_broadcast_lhs_transposed", ab, &|g, v| {
        let c = g.matmul_t(v[0], v[1], true, false)?;
        weighted_sum(g, c, 3)
    }, &mut rng)?;
    let ab = vec![randn(&[4, 4, 6], 1.0, &mut rng), randn(&[6], 1.0, &mut rng)];
    run("add", ab.clone(), &|g, v| {
        let c = g.add(v[0], v[1])?;
        weighted_sum(g, c, 4)
    }, &mut rng)?;
    run("sub", ab.clone(), &|g, v| {
        let c = g.sub(v[0], v[1])?;
        weighted_sum(g, c, 5)
    }, &mut rng)?;
    run("mul", ab, &|g, v| {
        let c = g.mul(v[0], v[1])?;
        weighted_sum(g, c, 6)
    }, &mut rng)?;
    run("scale", vec![randn(&[8, 9], 1.0, &mut rng)], &|g, v| {
        let c = g.scale(v[0], -1.7);
        weighted_sum(g, c, 7)
    }, &mut rng)?;
    run("gelu", vec![randn(&[8, 9], 1.5, &mut rng)], &|g, v| {
        let c = g.gelu(v[0]);
        weighted_sum(g, c, 8)
    }, &mut rng)?;
    run("exp", vec![randn(&[8, 9], 1.0, &mut rng)], &|g, v| {
        let c = g.exp(v[0]);
        weighted_sum(g, c, 9)
    }, &mut rng)?;
    run("log", vec![positive(&[8, 9], &mut rng)], &|g, v| {
        let c = g.log(v[0])?;
        weighted_sum(g, c, 10)
    }, &mut rng)?;
    run("sqrt", vec![positive(&[8, 9], &mut rng)], &|g, v| {
        let c = g.sqrt(v[0])?;
        weighted_sum(g, c, 11)
    }, &mut rng)?;
    run("softmax", vec![randn(&[3, 4, 6], 1.0, &mut rng)], &|g, v| {
        let a = g.softmax(v[0], -1)?;
        let b = g.softmax(v[0], 1)?;
        let c = g.add(a, b)?;
        weighted_sum(g, c, 12)
    }, &mut rng)?;
    run("log_softmax", vec![randn(&[6, 12], 1.0, &mut rng)], &|g, v| {
        let a = g.log_softmax(v[0], -1)?;
        let b = g.log_softmax(v[0], 0)?;
        let c = g.add(a, b)?;
        weighted_sum(g, c, 13)
    }, &mut rng)?;
    let ln = vec![randn(&[8, 8], 2.0, &mut rng), randn(&[8], 1.0, &mut rng), randn(&[8], 1.0, &mut rng)];
    run("layernorm", ln, &|g, v| {
        let c = g.layernorm(v[0], v[1], v[2], 1e-5)?;
        weighted_sum(g, c, 14)
    }, &mut rng)?;
    run("gather_rows", vec![randn(&[2, 6, 6], 1.0, &mut rng)], &|g, v| {
        let c = g.gather_rows_batched(v[0], &[vec![5, 0, 2, 4], vec![1, 1, 3, 5]])?;
        weighted_sum(g, c, 15)
    }, &mut rng)?;
    run("permute_reshape", vec![randn(&[3, 4, 6], 1.0, &mut rng)], &|g, v| {
        let p = g.permute(v[0], &[2, 0, 1])?;
        let r = g.reshape(p, &[6, 12])?;
        weighted_sum(g, r, 16)
    }, &mut rng)?;
    run("concat", vec![randn(&[2, 4, 8], 1.0, &mut rng), randn(&[2, 2, 8], 1.0, &mut rng)], &|g, v| {
        let c = g.concat(&[v[0], v[1]], 1)?;
        weighted_sum(g, c, 17)
    }, &mut rng)?;
    run("mean", vec![randn(&[8, 8], 1.0, &mut rng)], &|g, v| {
        let sq = g.mul(v[0], v[0])?;
        Ok(g.mean(sq))
    }, &mut rng)?;
    run("l2_normalize", vec![randn(&[8, 9], 1.0, &mut rng)], &|g, v| {
        let c = g.l2_normalize(v[0])?;
        weighted_sum(g, c, 18)
    }, &mut rng)?;
    run("pick", vec![randn(&[8, 9], 1.0, &mut rng)], &|g, v| {
        let c = g.pick(v[0], &[4, 0, 2, 8, 8, 1, 3, 7])?;
        weighted_sum(g, c, 19)
    }, &mut rng)?;
    Ok(reports)
}

/// Loss of one full training step (encoder, decoder, head, joint objective)
/// and the gradients of every parameter.
fn step_loss(
    net: &TurboNet<f64>,
    patches: &Tensor<f64>,
    plans: &[PartitionPlan],
    text: Option<&Tensor<f64>>,
    labels: &[usize],
    fault: Option<OpKind>,
    with_grad: bool,
) -> Result<(f64, Vec<(ParamId, Vec<f64>)>)> {
    let c = &net.config;
    let targets = pmae_targets(patches, plans, c.normalize_targets)?;
    let mut s = Session::new(&net.params);
    if let Some(k) = fault {
        s.g.inject_fault(k);
    }
    let out = net.forward_visual(&mut s, patches, plans)?;
    let (downstream, weights) = match text {
        None => {
            let logits = net.classify_head(&mut s, out.z_cls)?;
            let w = LossWeights { lambda_ce: lambda_ce(c.num_classes, LogBase::E)?, lambda_nce: 0.0 };
            (ce_loss(&mut s.g, logits, labels)?, w)
        }
        Some(t) => {
            let z_v = net.project_visual(&mut s, out.z_cls)?;
            let t = s.g.constant(t.clone());
            let z_t = net.project_text(&mut s, t)?;
            let w = LossWeights { lambda_ce: 0.0, lambda_nce: lambda_nce(patches.shape()[0], LogBase::E)? };
            (info_nce(&mut s.g, z_v, z_t, 1.0)?, w)
        }
    };
    let pmae = pmae_loss(&mut s.g, out.predicted, &targets)?;
    let (total, _) = combine_graph(&mut s.g, c.task, Some(downstream), pmae, weights)?;
    let value = s.g.value(total).item();
    if !with_grad {
        return Ok((value, vec![]));
    }
    s.g.backward(total)?;
    Ok((value, s.into_grads()))
}

/// Checks the parameter gradients of one toy training step at batch 2:
/// `coords` random coordinates across all parameters plus one in every
/// parameter tensor.
pub fn model_step_check(task: Task, seed: u64, coords: usize, fault: Option<OpKind>) -> Result<CheckReport> {
    let config = TurboConfig::toy(task);
    let mut rng = rng_from(seed);
    let mut net = TurboNet::<f64>::new(config.clone(), derive_seed(&[seed, 1]))?;
    let b = 2;
    let n = config.n_tokens();
    let patches = randn(&[b, n, config.geometry.patch_dim()], 1.0, &mut rng);
    let plans = (0..b)
        .map(|i| make_partition(n, config.mask_ratio, config.recon_ratio, derive_seed(&[seed, 2, i as u64])))
        .collect::<Result<Vec<_>>>()?;
    let text = (task == Task::Contrast).then(|| randn(&[b, config.text_dim], 1.0, &mut rng));
    let labels: Vec<usize> = (0..b).map(|i| (i * 5 + 3) % config.num_classes).collect();

    let (_, grads) = step_loss(&net, &patches, &plans, text.as_ref(), &labels, fault, true)?;
    let ids: Vec<ParamId> = net.params.ids().collect();
    let mut analytic: Vec<Vec<f64>> = ids.iter().map(|&id| vec![0.0; net.params.get(id).numel()]).collect();
    for (id, g) in grads {
        let k = ids.iter().position(|&x| x == id).expect("gradient of a known parameter");
        analytic[k] = g;
    }

    // (tensor, coordinate) probes: one per tensor, then uniform over all scalars
    let sizes: Vec<usize> = analytic.iter().map(Vec::len).collect();
    let mut probes: Vec<(usize, usize)> = sizes.iter().enumerate().map(|(k, &s)| (k, rng.random_range(0..s))).collect();
    let total: usize = sizes.iter().sum();
    for flat in sample_coords(total, coords, &mut rng) {
        let (mut k, mut off) = (0, flat);
        while off >= sizes[k] {
            off -= sizes[k];
            k += 1;
        }
        probes.push((k, off));
    }

    let mut errors = Vec::with_capacity(probes.len());
    for (k, c) in probes {
        let id = ids[k];
        let x = net.params.get(id).data()[c];
        let h = step_for(x);
        net.params.get_mut(id).data_mut()[c] = x + h;
        let (up, _) = step_loss(&net, &patches, &plans, text.as_ref(), &labels, fault, false)?;
        net.params.get_mut(id).data_mut()[c] = x - h;
        let (down, _) = step_loss(&net, &patches, &plans, text.as_ref(), &labels, fault, false)?;
        net.params.get_mut(id).data_mut()[c] = x;
        errors.push(rel_err(analytic[k][c], (up - down) / (2.0 * h)));
    }
    Ok(CheckReport::new(&format!("train_step_{}", task.name()), &errors))
}

/// Every op check followed by the classification and contrastive step checks.
pub fn full_suite(seed: u64, fault: Option<OpKind>) -> Result<Vec<CheckReport>> {
    let mut reports = op_suite(seed, fault)?;
    reports.push(model_step_check(Task::Classify, seed, MIN_COORDS, fault)?);
    reports.push(model_step_check(Task::Contrast, seed, MIN_COORDS, fault)?);
    Ok(reports)
}
