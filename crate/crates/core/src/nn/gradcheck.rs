//! Central finite-difference checks for every graph op. These pin the
//! backward implementations; everything downstream (losses, training)
//! trusts them.

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Arr, Graph, NodeId, PadMode};

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-7;

fn rand_arr(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Arr {
    ArrayD::from_shape_simple_fn(IxDyn(shape), || lo + (hi - lo) * rng.gen::<f64>())
}

/// Evaluate the scalar output for given raw inputs.
fn eval(build: &dyn Fn(&mut Graph, &[NodeId]) -> NodeId, inputs: &[Arr]) -> f64 {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|a| g.leaf(a.clone(), true)).collect();
    let out = build(&mut g, &ids);
    g.scalar_val(out)
}

/// Compare analytic gradients against central differences for every input.
fn check(build: impl Fn(&mut Graph, &[NodeId]) -> NodeId, inputs: &[Arr]) {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|a| g.leaf(a.clone(), true)).collect();
    let out = build(&mut g, &ids);
    assert_eq!(g.val(out).len(), 1, "gradcheck output must be scalar");
    g.backward(out);
    let analytic: Vec<Arr> = ids
        .iter()
        .enumerate()
        .map(|(i, id)| {
            g.grad(*id)
                .cloned()
                .unwrap_or_else(|| ArrayD::zeros(inputs[i].raw_dim()))
        })
        .collect();

    for (which, input) in inputs.iter().enumerate() {
        let mut perturbed: Vec<Arr> = inputs.to_vec();
        for idx in 0..input.len() {
            let orig = perturbed[which].as_slice().unwrap()[idx];
            perturbed[which].as_slice_mut().unwrap()[idx] = orig + EPS;
            let fp = eval(&build, &perturbed);
            perturbed[which].as_slice_mut().unwrap()[idx] = orig - EPS;
            let fm = eval(&build, &perturbed);
            perturbed[which].as_slice_mut().unwrap()[idx] = orig;
            let num = (fp - fm) / (2.0 * EPS);
            let ana = analytic[which].as_slice().unwrap()[idx];
            let denom = 1.0 + num.abs().max(ana.abs());
            assert!(
                (num - ana).abs() / denom < TOL,
                "input {which} element {idx}: numeric {num} vs analytic {ana}"
            );
        }
    }
}

#[test]
fn elementwise_binary_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = rand_arr(&mut rng, &[2, 3], -1.0, 1.0);
    let b = rand_arr(&mut rng, &[2, 3], 0.5, 1.5); // away from 0 for div
    check(|g, ids| { let s = g.add(ids[0], ids[1]); let m = g.mul(s, s); g.mean_all(m) }, &[a.clone(), b.clone()]);
    check(|g, ids| { let s = g.sub(ids[0], ids[1]); let m = g.mul(s, ids[0]); g.sum_all(m) }, &[a.clone(), b.clone()]);
    check(|g, ids| { let d = g.div(ids[0], ids[1]); g.mean_all(d) }, &[a, b]);
}

#[test]
fn elementwise_unary_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = rand_arr(&mut rng, &[3, 4], 0.2, 1.7); // positive, away from relu/abs kinks
    let b = rand_arr(&mut rng, &[3, 4], -1.9, -0.2);
    for arr in [a.clone(), b.clone()] {
        check(|g, ids| { let x = g.abs(ids[0]); g.sum_all(x) }, &[arr.clone()]);
        check(|g, ids| { let x = g.relu(ids[0]); g.sum_all(x) }, &[arr.clone()]);
        check(|g, ids| { let x = g.leaky_relu(ids[0], 0.2); g.sum_all(x) }, &[arr.clone()]);
        check(|g, ids| { let x = g.sigmoid(ids[0]); g.sum_all(x) }, &[arr.clone()]);
        check(|g, ids| { let x = g.tanh(ids[0]); g.sum_all(x) }, &[arr.clone()]);
        check(|g, ids| { let x = g.exp(ids[0]); g.mean_all(x) }, &[arr.clone()]);
        check(|g, ids| { let x = g.mul_const(ids[0], -2.5); let y = g.add_const(x, 0.3); g.sum_all(y) }, &[arr]);
    }
    check(|g, ids| { let x = g.ln(ids[0]); g.sum_all(x) }, &[a]);
}

#[test]
fn pad_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_arr(&mut rng, &[2, 2, 4, 5], -1.0, 1.0);
    check(|g, ids| { let p = g.pad2d(ids[0], 2, PadMode::Zero); let m = g.mul(p, p); g.sum_all(m) }, &[x.clone()]);
    check(|g, ids| { let p = g.pad2d(ids[0], 2, PadMode::Reflect); let m = g.mul(p, p); g.sum_all(m) }, &[x]);
}

#[test]
fn conv2d_stride1_with_bias() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = rand_arr(&mut rng, &[2, 3, 5, 6], -1.0, 1.0);
    let w = rand_arr(&mut rng, &[4, 3, 3, 3], -0.5, 0.5);
    let b = rand_arr(&mut rng, &[4], -0.2, 0.2);
    check(
        |g, ids| {
            let p = g.pad2d(ids[0], 1, PadMode::Zero);
            let y = g.conv2d(p, ids[1], Some(ids[2]), 1);
            let sq = g.mul(y, y);
            g.mean_all(sq)
        },
        &[x, w, b],
    );
}

#[test]
fn conv2d_stride2_reflect() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_arr(&mut rng, &[1, 2, 7, 7], -1.0, 1.0);
    let w = rand_arr(&mut rng, &[3, 2, 3, 3], -0.5, 0.5);
    check(
        |g, ids| {
            let p = g.pad2d(ids[0], 1, PadMode::Reflect);
            let y = g.conv2d(p, ids[1], None, 2);
            g.sum_all(y)
        },
        &[x, w],
    );
}

#[test]
fn conv_transpose2d() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = rand_arr(&mut rng, &[2, 2, 3, 4], -1.0, 1.0);
    let w = rand_arr(&mut rng, &[2, 3, 3, 3], -0.5, 0.5);
    let b = rand_arr(&mut rng, &[3], -0.2, 0.2);
    check(
        |g, ids| {
            let y = g.conv_transpose2d(ids[0], ids[1], Some(ids[2]), 2, 1, 1);
            let sq = g.mul(y, y);
            g.sum_all(sq)
        },
        &[x, w, b],
    );
}

#[test]
fn pool_and_resample() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = rand_arr(&mut rng, &[2, 2, 4, 6], -1.0, 1.0);
    check(|g, ids| { let y = g.maxpool2(ids[0]); let sq = g.mul(y, y); g.sum_all(sq) }, &[x.clone()]);
    check(|g, ids| { let y = g.upsample2x(ids[0]); let sq = g.mul(y, y); g.sum_all(sq) }, &[x]);
}

#[test]
fn concat_channels() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let a = rand_arr(&mut rng, &[2, 2, 3, 3], -1.0, 1.0);
    let b = rand_arr(&mut rng, &[2, 3, 3, 3], -1.0, 1.0);
    check(
        |g, ids| {
            let y = g.concat_c(ids[0], ids[1]);
            let sq = g.mul(y, y);
            g.mean_all(sq)
        },
        &[a, b],
    );
}

#[test]
fn batch_norm_train_and_eval() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = rand_arr(&mut rng, &[3, 2, 4, 4], -1.0, 1.0);
    let gamma = rand_arr(&mut rng, &[2], 0.5, 1.5);
    let beta = rand_arr(&mut rng, &[2], -0.3, 0.3);
    check(
        |g, ids| {
            let y = g.batch_norm(ids[0], ids[1], ids[2], None, true, 0.1, 1e-5);
            let sq = g.mul(y, y);
            g.mean_all(sq)
        },
        &[x.clone(), gamma.clone(), beta.clone()],
    );
    check(
        |g, ids| {
            let mut rm = ndarray::Array1::from_vec(vec![0.1, -0.2]);
            let mut rv = ndarray::Array1::from_vec(vec![0.9, 1.3]);
            let y = g.batch_norm(ids[0], ids[1], ids[2], Some((&mut rm, &mut rv)), false, 0.1, 1e-5);
            let sq = g.mul(y, y);
            g.mean_all(sq)
        },
        &[x, gamma, beta],
    );
}

#[test]
fn instance_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = rand_arr(&mut rng, &[2, 3, 4, 5], -1.0, 1.0);
    check(
        |g, ids| {
            let y = g.instance_norm(ids[0], 1e-5);
            let t = g.tanh(y);
            let sq = g.mul(t, t);
            g.mean_all(sq)
        },
        &[x],
    );
}

#[test]
fn reductions_and_reuse() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = rand_arr(&mut rng, &[3, 2, 2, 2], -1.0, 1.0);
    // sum_per_image feeding elementwise ops on the [N] vector, plus a node
    // used twice (gradient accumulation path).
    check(
        |g, ids| {
            let s = g.sum_per_image(ids[0]);
            let s2 = g.mul(s, s);
            let c = g.add_const(s2, 1.0);
            let d = g.div(s, c);
            g.mean_all(d)
        },
        &[x],
    );
}

#[test]
fn composite_losses() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let a = rand_arr(&mut rng, &[2, 1, 3, 3], 0.1, 0.9);
    let b = rand_arr(&mut rng, &[2, 1, 3, 3], -0.9, -0.1); // keeps |a-b| off the kink
    check(|g, ids| g.mse_mean(ids[0], ids[1]), &[a.clone(), b.clone()]);
    check(|g, ids| g.l1_mean(ids[0], ids[1]), &[a.clone(), b.clone()]);
    check(|g, ids| g.mse_const(ids[0], 1.0), &[a]);
}

#[test]
fn frozen_leaves_stop_gradients_but_pass_them_through() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = rand_arr(&mut rng, &[1, 2, 4, 4], -1.0, 1.0);
    let w = rand_arr(&mut rng, &[2, 2, 3, 3], -0.5, 0.5);
    let mut g = Graph::new();
    let xid = g.leaf(x, true);
    let wid = g.leaf(w, false); // frozen
    let p = g.pad2d(xid, 1, PadMode::Zero);
    let y = g.conv2d(p, wid, None, 1);
    let loss = g.mse_const(y, 0.5);
    g.backward(loss);
    assert!(g.grad(wid).is_none(), "frozen leaf must not accumulate grad");
    let gx = g.grad(xid).expect("input grad must flow through frozen conv");
    assert!(gx.iter().any(|v| v.abs() > 0.0));
}

#[test]
fn detached_nodes_cut_the_tape() {
    let mut g = Graph::new();
    let x = g.leaf(ArrayD::from_elem(IxDyn(&[2, 2]), 0.7), true);
    let d = g.detach(x);
    let y = g.mul(x, d);
    let loss = g.mean_all(y);
    g.backward(loss);
    // d/dx (x * const(0.7)) = 0.7 / len * ones
    let gx = g.grad(x).unwrap();
    for v in gx.iter() {
        assert!((v - 0.7 / 4.0).abs() < 1e-12);
    }
}
