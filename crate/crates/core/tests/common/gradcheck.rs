//! Central finite-difference oracle for the autodiff ops, run in f64.

use ignition::autodiff::{BnMode, Graph, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const EPS: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-4;
pub const SHAPES_PER_OP: usize = 12;

#[derive(Debug, Clone)]
pub struct OpReport {
    pub op: &'static str,
    pub cases: usize,
    pub worst_rel_err: f64,
}

impl OpReport {
    pub fn passed(&self) -> bool {
        self.cases >= 10 && self.worst_rel_err < TOLERANCE
    }
}

type Build = dyn Fn(&mut Graph<f64>, &[Var]) -> Var;

fn uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Values at least 0.05 away from zero, so ±EPS never crosses a ReLU kink.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.05..1.0);
            if rng.gen_bool(0.5) { m } else { -m }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Distinct values spaced 0.01 apart, so pooling windows have unique maxima.
fn distinct(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut data: Vec<f64> = (0..n).map(|i| i as f64 * 0.01 - n as f64 * 0.005).collect();
    data.shuffle(rng);
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn loss_of(build: &Build, inputs: &[Tensor<f64>], grad_mask: &[bool], weights: &Tensor<f64>) -> (f64, Graph<f64>, Vec<Var>, Var) {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().zip(grad_mask).map(|(t, &rg)| g.leaf(t.clone(), rg)).collect();
    let out = build(&mut g, &vars);
    let loss = g.weighted_sum(out, weights).unwrap();
    (g.value(loss).item(), g, vars, loss)
}

/// Largest per-tensor relative error ‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)
/// over the inputs marked as requiring gradients.
pub fn check(build: &Build, inputs: &[Tensor<f64>], grad_mask: &[bool], rng: &mut ChaCha8Rng) -> f64 {
    let shape = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let out = build(&mut g, &vars);
        g.shape(out).to_vec()
    };
    let weights = uniform(&shape, rng);
    let (_, g, vars, loss) = loss_of(build, inputs, grad_mask, &weights);
    let grads = g.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (i, &rg) in grad_mask.iter().enumerate() {
        if !rg {
            continue;
        }
        let analytic = grads.get(vars[i]).unwrap().to_vec();
        let mut numeric = vec![0.0; analytic.len()];
        for (j, num) in numeric.iter_mut().enumerate() {
            let mut plus = inputs.to_vec();
            plus[i].data[j] += EPS;
            let mut minus = inputs.to_vec();
            minus[i].data[j] -= EPS;
            let lp = loss_of(build, &plus, grad_mask, &weights).0;
            let lm = loss_of(build, &minus, grad_mask, &weights).0;
            *num = (lp - lm) / (2.0 * EPS);
        }
        let diff: f64 = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        let rel = if na.max(nn) < 1e-12 { diff } else { diff / na.max(nn) };
        worst = worst.max(rel);
    }
    worst
}

fn run_op(
    op: &'static str,
    rng: &mut ChaCha8Rng,
    mut case: impl FnMut(&mut ChaCha8Rng) -> (Box<Build>, Vec<Tensor<f64>>, Vec<bool>),
) -> OpReport {
    let mut worst: f64 = 0.0;
    for _ in 0..SHAPES_PER_OP {
        let (build, inputs, mask) = case(rng);
        worst = worst.max(check(&*build, &inputs, &mask, rng));
    }
    OpReport { op, cases: SHAPES_PER_OP, worst_rel_err: worst }
}

/// Checks every op on freshly drawn random shapes.
pub fn run_all(seed: u64) -> Vec<OpReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let mut out = Vec::new();

    out.push(run_op("conv2d", r, |r| {
        let (n, c, o) = (r.gen_range(1..=2), r.gen_range(1..=3), r.gen_range(1..=3));
        let k = *[1usize, 2, 3].choose(r).unwrap();
        let (stride, pad) = (r.gen_range(1..=2), r.gen_range(0..=1));
        let (h, w) = (r.gen_range(k..=6), r.gen_range(k..=6));
        let bias = r.gen_bool(0.5);
        let mut inputs = vec![uniform(&[n, c, h, w], r), uniform(&[o, c, k, k], r)];
        if bias {
            inputs.push(uniform(&[o], r));
        }
        let mask = vec![true; inputs.len()];
        let build: Box<Build> = Box::new(move |g, v| g.conv2d(v[0], v[1], v.get(2).copied(), stride, pad).unwrap());
        (build, inputs, mask)
    }));

    out.push(run_op("batchnorm2d_train", r, |r| {
        let (n, c, h, w) = (r.gen_range(2..=3), r.gen_range(1..=3), r.gen_range(1..=3), r.gen_range(1..=3));
        let inputs = vec![uniform(&[n, c, h, w], r), uniform(&[c], r), uniform(&[c], r)];
        let build: Box<Build> = Box::new(|g, v| g.batchnorm2d(v[0], v[1], v[2], BnMode::Train).unwrap().0);
        (build, inputs, vec![true; 3])
    }));

    out.push(run_op("batchnorm2d_eval", r, |r| {
        let (n, c, h, w) = (r.gen_range(1..=3), r.gen_range(1..=3), r.gen_range(1..=3), r.gen_range(1..=3));
        let mean: Vec<f64> = (0..c).map(|_| r.gen_range(-0.5..0.5)).collect();
        let var: Vec<f64> = (0..c).map(|_| r.gen_range(0.2..2.0)).collect();
        let inputs = vec![uniform(&[n, c, h, w], r), uniform(&[c], r), uniform(&[c], r)];
        let build: Box<Build> =
            Box::new(move |g, v| g.batchnorm2d(v[0], v[1], v[2], BnMode::Eval { mean: &mean, var: &var }).unwrap().0);
        (build, inputs, vec![true; 3])
    }));

    out.push(run_op("relu", r, |r| {
        let shape = [r.gen_range(1..=3), r.gen_range(1..=4), r.gen_range(1..=4)];
        let build: Box<Build> = Box::new(|g, v| g.relu(v[0]));
        (build, vec![away_from_zero(&shape, r)], vec![true])
    }));

    out.push(run_op("max_pool2d", r, |r| {
        let k = r.gen_range(2..=3);
        let (stride, pad) = (r.gen_range(1..=2), r.gen_range(0..=1));
        let shape = [r.gen_range(1..=2), r.gen_range(1..=2), r.gen_range(k..=6), r.gen_range(k..=6)];
        let build: Box<Build> = Box::new(move |g, v| g.max_pool2d(v[0], k, stride, pad).unwrap());
        (build, vec![distinct(&shape, r)], vec![true])
    }));

    out.push(run_op("global_avg_pool", r, |r| {
        let shape = [r.gen_range(1..=3), r.gen_range(1..=4), r.gen_range(1..=4), r.gen_range(1..=4)];
        let build: Box<Build> = Box::new(|g, v| g.global_avg_pool(v[0]).unwrap());
        (build, vec![uniform(&shape, r)], vec![true])
    }));

    out.push(run_op("linear", r, |r| {
        let (n, i, o) = (r.gen_range(1..=4), r.gen_range(1..=5), r.gen_range(1..=4));
        let bias = r.gen_bool(0.5);
        let mut inputs = vec![uniform(&[n, i], r), uniform(&[o, i], r)];
        if bias {
            inputs.push(uniform(&[o], r));
        }
        let mask = vec![true; inputs.len()];
        let build: Box<Build> = Box::new(|g, v| g.linear(v[0], v[1], v.get(2).copied()).unwrap());
        (build, inputs, mask)
    }));

    out.push(run_op("concat", r, |r| {
        let n = r.gen_range(1..=3);
        let parts = r.gen_range(2..=3);
        let inputs: Vec<Tensor<f64>> = (0..parts).map(|_| uniform(&[n, r.gen_range(1..=4)], r)).collect();
        let build: Box<Build> = Box::new(|g, v| g.concat(v).unwrap());
        (build, inputs, vec![true; parts])
    }));

    out.push(run_op("add", r, |r| {
        let shape = [r.gen_range(1..=3), r.gen_range(1..=4)];
        let build: Box<Build> = Box::new(|g, v| g.add(v[0], v[1]).unwrap());
        (build, vec![uniform(&shape, r), uniform(&shape, r)], vec![true, true])
    }));

    out.push(run_op("scale", r, |r| {
        let shape = [r.gen_range(1..=3), r.gen_range(1..=4)];
        let s = r.gen_range(-3.0..3.0);
        let build: Box<Build> = Box::new(move |g, v| g.scale(v[0], s));
        (build, vec![uniform(&shape, r)], vec![true])
    }));

    out.push(run_op("softmax_cross_entropy", r, |r| {
        let (n, c) = (r.gen_range(1..=4), r.gen_range(2..=6));
        let targets: Vec<usize> = (0..n).map(|_| r.gen_range(0..c)).collect();
        let logits = Tensor::new(vec![n, c], (0..n * c).map(|_| r.gen_range(-3.0..3.0)).collect()).unwrap();
        let build: Box<Build> = Box::new(move |g, v| g.softmax_cross_entropy(v[0], &targets).unwrap());
        (build, vec![logits], vec![true])
    }));

    out.push(run_op("mse", r, |r| {
        let shape = [r.gen_range(1..=4), r.gen_range(1..=3)];
        let target = uniform(&shape, r);
        let build: Box<Build> = Box::new(move |g, v| g.mse(v[0], &target).unwrap());
        (build, vec![uniform(&shape, r)], vec![true])
    }));

    out.push(run_op("fan_out", r, |r| {
        // One tensor feeding two branches that meet again.
        let shape = [r.gen_range(1..=3), r.gen_range(1..=4)];
        let s = r.gen_range(0.5..2.0);
        let build: Box<Build> = Box::new(move |g, v| {
            let a = g.scale(v[0], s);
            let b = g.add(v[0], v[1]).unwrap();
            let c = g.add(a, b).unwrap();
            g.add(c, v[0]).unwrap()
        });
        (build, vec![uniform(&shape, r), uniform(&shape, r)], vec![true, true])
    }));

    out.push(run_op("residual_block", r, |r| {
        // conv → batchnorm → relu → conv plus identity, the shape of a basic block.
        let (n, c, h, w) = (2, r.gen_range(1..=2), r.gen_range(3..=4), r.gen_range(3..=4));
        let inputs = vec![
            uniform(&[n, c, h, w], r),
            uniform(&[c, c, 3, 3], r),
            uniform(&[c], r),
            uniform(&[c], r),
            uniform(&[c, c, 3, 3], r),
        ];
        let build: Box<Build> = Box::new(|g, v| {
            let a = g.conv2d(v[0], v[1], None, 1, 1).unwrap();
            let (b, _) = g.batchnorm2d(a, v[2], v[3], BnMode::Train).unwrap();
            let c = g.scale(b, 1.0);
            let d = g.conv2d(c, v[4], None, 1, 1).unwrap();
            g.add(d, v[0]).unwrap()
        });
        (build, inputs, vec![true; 5])
    }));

    out
}
