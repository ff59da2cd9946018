//! Shared finite-difference gradient checks, used by both the per-op
//! gradient test target and the acceptance suite.
#![allow(dead_code)]

pub mod expansion;


use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use nce::tape::{BnMode, Tape, Var};
use nce::tensor::Tensor;

const INSTANCES: usize = 100;
const REL_TOL: f64 = 1e-3;

fn rand_tensor<R: Rng>(shape: Vec<usize>, rng: &mut R, lo: f32, hi: f32) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect())
}

/// Check d(loss)/d(inputs[which]) by central differences on a scalar
/// loss = dot(output, coeffs). `build` reconstructs the graph from the
/// current input values each call.
fn fd_check<F>(inputs: &mut [Tensor], which: usize, eps: f32, build: F)
where
    F: Fn(&mut Tape, &[Tensor]) -> (Var, Var), // (probed input var, loss var)
{
    let mut tape = Tape::new();
    let (probe, loss) = build(&mut tape, inputs);
    tape.backward(loss).unwrap();
    let analytic = tape.grad(probe);
    // f32 forward noise is absolute; normalize by the instance's gradient
    // scale so the relative tolerance stays meaningful for tiny entries
    let gscale = analytic.iter().fold(0.0f32, |m, g| m.max(g.abs())) as f64;

    for i in 0..inputs[which].numel() {
        let orig = inputs[which].data[i];
        inputs[which].data[i] = orig + eps;
        let mut t = Tape::new();
        let (_, l) = build(&mut t, inputs);
        let up = t.value(l).data[0] as f64;
        inputs[which].data[i] = orig - eps;
        let mut t = Tape::new();
        let (_, l) = build(&mut t, inputs);
        let dn = t.value(l).data[0] as f64;
        inputs[which].data[i] = orig;

        let fd = (up - dn) / (2.0 * eps as f64);
        let an = analytic[i] as f64;
        let denom = fd.abs().max(an.abs()).max(gscale).max(1e-4);
        assert!(
            (fd - an).abs() / denom <= REL_TOL,
            "element {i}: fd {fd} vs analytic {an}"
        );
    }
}

fn loss_of(tape: &mut Tape, out: Var, seed: u64) -> Var {
    let n = tape.value(out).numel();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coeffs: Vec<f32> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    tape.dot_reduce(out, &coeffs)
}

pub fn conv2d_input_and_weight_grads() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for inst in 0..INSTANCES {
        let stride = 1 + (inst % 2);
        let padding = inst % 2;
        let cin = 1 + inst % 3;
        let cout = 1 + (inst / 3) % 3;
        let hw = 4 + inst % 3;
        let mut inputs = vec![
            rand_tensor(vec![2, cin, hw, hw], &mut rng, -1.0, 1.0),
            rand_tensor(vec![cout, cin, 3, 3], &mut rng, -0.7, 0.7),
        ];
        for which in 0..2 {
            fd_check(&mut inputs, which, 1e-2, |tape, ins| {
                let x = tape.leaf(ins[0].clone());
                let w = tape.leaf(ins[1].clone());
                let y = tape.conv2d(x, w, stride, padding).unwrap();
                let l = loss_of(tape, y, 9 + inst as u64);
                ([x, w][which], l)
            });
        }
    }
}

/// f64 reference of training-mode batch norm followed by dot(coeffs, y).
/// Normalization statistics couple every element, so the f32 forward hides
/// the small per-element gradients under rounding noise; differencing this
/// reference instead keeps the check tight.
fn bn_loss_f64(x: &[f64], gamma: &[f64], beta: &[f64], n: usize, c: usize, plane: usize, coeffs: &[f64]) -> f64 {
    let per_ch = (n * plane) as f64;
    let mut loss = 0.0;
    for ci in 0..c {
        let mut mean = 0.0;
        for ni in 0..n {
            for p in 0..plane {
                mean += x[(ni * c + ci) * plane + p];
            }
        }
        mean /= per_ch;
        let mut var = 0.0;
        for ni in 0..n {
            for p in 0..plane {
                let d = x[(ni * c + ci) * plane + p] - mean;
                var += d * d;
            }
        }
        var /= per_ch;
        let inv = 1.0 / (var + 1e-5).sqrt();
        for ni in 0..n {
            for p in 0..plane {
                let idx = (ni * c + ci) * plane + p;
                loss += coeffs[idx] * (gamma[ci] * (x[idx] - mean) * inv + beta[ci]);
            }
        }
    }
    loss
}

pub fn batch_norm_grads() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for inst in 0..INSTANCES {
        let c = 1 + inst % 4;
        let (n, hw) = (3usize, 3usize);
        let x = rand_tensor(vec![n, c, hw, hw], &mut rng, -1.5, 1.5);
        let gamma = rand_tensor(vec![c], &mut rng, 0.5, 1.5);
        let beta = rand_tensor(vec![c], &mut rng, -0.5, 0.5);
        let coeffs: Vec<f32> = (0..x.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let gv = tape.leaf(gamma.clone());
        let bv = tape.leaf(beta.clone());
        let mut rm = vec![0.0; c];
        let mut rv = vec![1.0; c];
        let y = tape.batch_norm(xv, gv, bv, &mut rm, &mut rv, 0.9, 1e-5, BnMode::Train);
        let l = tape.dot_reduce(y, &coeffs);
        tape.backward(l).unwrap();

        let mut bufs = [
            x.data.iter().map(|&v| v as f64).collect::<Vec<f64>>(),
            gamma.data.iter().map(|&v| v as f64).collect(),
            beta.data.iter().map(|&v| v as f64).collect(),
        ];
        let cf: Vec<f64> = coeffs.iter().map(|&v| v as f64).collect();
        let eps = 1e-6;
        for (which, grads) in [tape.grad(xv), tape.grad(gv), tape.grad(bv)].iter().enumerate() {
            for i in 0..bufs[which].len() {
                let orig = bufs[which][i];
                bufs[which][i] = orig + eps;
                let up = bn_loss_f64(&bufs[0], &bufs[1], &bufs[2], n, c, hw * hw, &cf);
                bufs[which][i] = orig - eps;
                let dn = bn_loss_f64(&bufs[0], &bufs[1], &bufs[2], n, c, hw * hw, &cf);
                bufs[which][i] = orig;
                let fd = (up - dn) / (2.0 * eps);
                let an = grads[i] as f64;
                let denom = fd.abs().max(an.abs()).max(1e-4);
                assert!(
                    (fd - an).abs() / denom <= REL_TOL,
                    "bn input {which} element {i}: fd {fd} vs analytic {an}"
                );
            }
        }
    }
}

pub fn relu_grad_away_from_kink() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for inst in 0..INSTANCES {
        // kink-excluded sampling: reject values within 1e-2 of 0
        let mut t = rand_tensor(vec![4, 5], &mut rng, -2.0, 2.0);
        for v in t.data.iter_mut() {
            while v.abs() < 2e-2 {
                *v = rng.gen_range(-2.0..2.0);
            }
        }
        let mut inputs = vec![t];
        fd_check(&mut inputs, 0, 5e-3, |tape, ins| {
            let x = tape.leaf(ins[0].clone());
            let y = tape.relu(x);
            let l = loss_of(tape, y, 200 + inst as u64);
            (x, l)
        });
    }
}

pub fn pool_linear_add_scale_slice_grads() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for inst in 0..INSTANCES {
        let c = 2 + inst % 3;
        let mut inputs = vec![rand_tensor(vec![2, c, 3, 3], &mut rng, -1.0, 1.0)];
        fd_check(&mut inputs, 0, 1e-2, |tape, ins| {
            let x = tape.leaf(ins[0].clone());
            let y = tape.global_avg_pool(x);
            let l = loss_of(tape, y, 300 + inst as u64);
            (x, l)
        });
        fd_check(&mut inputs, 0, 1e-2, |tape, ins| {
            let x = tape.leaf(ins[0].clone());
            let a = tape.scale(x, 1.7);
            let b = tape.add(a, x);
            let s = tape.channel_slice(b, (c + 1) / 2);
            let l = loss_of(tape, s, 301 + inst as u64);
            (x, l)
        });

        let k = 2 + inst % 3;
        let mut lin = vec![
            rand_tensor(vec![2, c], &mut rng, -1.0, 1.0),
            rand_tensor(vec![k, c], &mut rng, -1.0, 1.0),
            rand_tensor(vec![k], &mut rng, -0.3, 0.3),
        ];
        for which in 0..3 {
            fd_check(&mut lin, which, 1e-2, |tape, ins| {
                let x = tape.leaf(ins[0].clone());
                let w = tape.leaf(ins[1].clone());
                let b = tape.leaf(ins[2].clone());
                let y = tape.linear(x, w, b);
                let l = loss_of(tape, y, 302 + inst as u64);
                ([x, w, b][which], l)
            });
        }
    }
}

pub fn softmax_cross_entropy_grad() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..INSTANCES {
        let k = 3 + rng.gen_range(0..4usize);
        let n = 2 + rng.gen_range(0..3usize);
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
        let mut inputs = vec![rand_tensor(vec![n, k], &mut rng, -2.0, 2.0)];
        fd_check(&mut inputs, 0, 1e-2, |tape, ins| {
            let x = tape.leaf(ins[0].clone());
            let l = tape.softmax_cross_entropy(x, &labels).unwrap();
            (x, l)
        });
    }
}

pub fn cwi_mix_and_weighted_sum_grads() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for inst in 0..INSTANCES {
        let c = 2 + inst % 4;
        let target = c + 1 + inst % 3;
        let mut inputs = vec![rand_tensor(vec![2, c, 2, 2], &mut rng, -1.0, 1.0)];
        fd_check(&mut inputs, 0, 1e-2, |tape, ins| {
            let x = tape.leaf(ins[0].clone());
            let y = tape.cwi(x, target).unwrap();
            let l = loss_of(tape, y, 400 + inst as u64);
            (x, l)
        });

        // candidate mixing: softmax over a sampled index subset feeding a
        // weighted sum of two branches. Alpha gradients shrink with the
        // branch difference, so they are differenced against an f64
        // reference of the same composite rather than the f32 forward.
        let n_alpha = 3 + inst % 3;
        let alpha = rand_tensor(vec![n_alpha], &mut rng, -1.0, 1.0);
        let b0 = rand_tensor(vec![2, 2, 2, 2], &mut rng, -1.0, 1.0);
        let b1 = rand_tensor(vec![2, 2, 2, 2], &mut rng, -1.0, 1.0);
        let coeffs: Vec<f32> = (0..b0.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let indices = vec![0usize, n_alpha - 1];

        let mut tape = Tape::new();
        let av = tape.leaf(alpha.clone());
        let b0v = tape.leaf(b0.clone());
        let b1v = tape.leaf(b1.clone());
        let w = tape.mix_weights(av, &indices);
        let y = tape.weighted_sum(w, &[b0v, b1v]);
        let l = tape.dot_reduce(y, &coeffs);
        tape.backward(l).unwrap();

        let mix_loss = |a: &[f64], x0: &[f64], x1: &[f64]| -> f64 {
            let (v0, v1) = (a[indices[0]], a[indices[1]]);
            let m = v0.max(v1);
            let (e0, e1) = ((v0 - m).exp(), (v1 - m).exp());
            let (w0, w1) = (e0 / (e0 + e1), e1 / (e0 + e1));
            coeffs
                .iter()
                .enumerate()
                .map(|(i, &cv)| cv as f64 * (w0 * x0[i] + w1 * x1[i]))
                .sum()
        };
        let mut bufs = [
            alpha.data.iter().map(|&v| v as f64).collect::<Vec<f64>>(),
            b0.data.iter().map(|&v| v as f64).collect(),
            b1.data.iter().map(|&v| v as f64).collect(),
        ];
        let eps = 1e-6;
        for (which, grads) in [tape.grad(av), tape.grad(b0v), tape.grad(b1v)].iter().enumerate() {
            for i in 0..bufs[which].len() {
                let orig = bufs[which][i];
                bufs[which][i] = orig + eps;
                let up = mix_loss(&bufs[0], &bufs[1], &bufs[2]);
                bufs[which][i] = orig - eps;
                let dn = mix_loss(&bufs[0], &bufs[1], &bufs[2]);
                bufs[which][i] = orig;
                let fd = (up - dn) / (2.0 * eps);
                let an = grads[i] as f64;
                let denom = fd.abs().max(an.abs()).max(1e-4);
                assert!(
                    (fd - an).abs() / denom <= REL_TOL,
                    "mix input {which} element {i}: fd {fd} vs analytic {an}"
                );
            }
        }
    }
}

pub fn pact_activation_ste_surrogate() {
    // The quantizer forward is a step function, so finite differences of the
    // true forward are 0 or huge; the contract is the surrogate itself:
    //   dL/dx = dL/dy inside (0, alpha), 0 outside
    //   dL/dalpha = sum over x >= alpha of dL/dy, plus 2*reg*alpha
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..INSTANCES {
        let alpha = rng.gen_range(0.5..3.0f32);
        let bits = 2 + rng.gen_range(0..3u32);
        let reg = rng.gen_range(0.0..0.01f32);
        let n = 12usize;
        let x: Vec<f32> = (0..n).map(|_| rng.gen_range(-1.0..alpha * 1.5)).collect();
        let coeffs: Vec<f32> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let mut tape = Tape::new();
        let xv = tape.leaf(Tensor::from_vec(x.clone()));
        let av = tape.leaf(Tensor::scalar(alpha));
        let y = tape.quantize_activation(xv, av, bits, reg).unwrap();
        let l = tape.dot_reduce(y, &coeffs);
        tape.backward(l).unwrap();

        let gx = tape.grad(xv);
        let ga = tape.grad(av)[0];
        let mut expect_ga = 2.0 * reg * alpha;
        for i in 0..n {
            let expect = if x[i] > 0.0 && x[i] < alpha { coeffs[i] } else { 0.0 };
            assert_eq!(gx[i], expect, "x grad at {i} (x={})", x[i]);
            if x[i] >= alpha {
                expect_ga += coeffs[i];
            }
        }
        assert!((ga - expect_ga).abs() <= 1e-6 * expect_ga.abs().max(1.0));
    }
}

pub fn weight_quant_identity_ste() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..INSTANCES {
        let n = 10usize;
        let x: Vec<f32> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let coeffs: Vec<f32> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut tape = Tape::new();
        let xv = tape.leaf(Tensor::from_vec(x));
        let y = tape.quantize_weight(xv, 2);
        let l = tape.dot_reduce(y, &coeffs);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(xv), coeffs);
    }
}

/// Finite differences of the budget hinge loss against its analytic alpha
/// gradients. Cost expectations are evaluated in f64, so a small step is
/// exact enough for direct comparison.
pub fn cost_loss_alpha_grads() {
    use nce::arch::preset;
    use nce::costmodel::{budget_from_arch, cost_loss, cost_loss_with_alpha_grads, expected_cost};
    use nce::supernet::{QuantSetting, SuperNet};

    let arch = preset("resnet8").unwrap();
    let budget = {
        let mut b = budget_from_arch(&arch, 2.0, 2.0, 0.0).unwrap();
        // pull the targets under the supernet expectation so the hinge is
        // active and the gradients are nonzero
        b.flop_target *= 0.5;
        b.param_target *= 0.5;
        b
    };
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut net =
        SuperNet::searchable(&arch, QuantSetting::full_precision(), 8, 16, &[], &mut rng).unwrap();
    for _ in 0..INSTANCES {
        for g in 0..net.groups.len() {
            if !net.groups[g].searchable {
                continue;
            }
            let id = net.groups[g].alpha;
            for v in net.params.get_mut(id).value.data.iter_mut() {
                *v = rng.gen_range(-1.0..1.0);
            }
        }
        let (_, grads) = cost_loss_with_alpha_grads(&net, &budget);
        // the loss aggregates in f64 but the softmax underneath is f32, so
        // difference over a wide step and normalize like the tape ops: by
        // the group's gradient scale
        let eps = 1e-2f32;
        for (id, grad) in &grads {
            let gscale = grad.iter().fold(0.0f32, |m, g| m.max(g.abs())) as f64;
            for i in 0..grad.len() {
                let orig = net.params.get(*id).value.data[i];
                let (a_up, a_dn) = (orig + eps, orig - eps);
                net.params.get_mut(*id).value.data[i] = a_up;
                let up = cost_loss(&expected_cost(&net), &budget);
                net.params.get_mut(*id).value.data[i] = a_dn;
                let dn = cost_loss(&expected_cost(&net), &budget);
                net.params.get_mut(*id).value.data[i] = orig;
                let fd = (up - dn) / (a_up as f64 - a_dn as f64);
                let an = grad[i] as f64;
                let denom = fd.abs().max(an.abs()).max(gscale).max(1e-4);
                assert!(
                    (fd - an).abs() / denom <= REL_TOL,
                    "cost loss alpha {i}: fd {fd} vs analytic {an}"
                );
            }
        }
    }
}
