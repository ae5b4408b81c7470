//! Tape gradients against central differences, op by op.

mod common;

use common::{op_gradient_error, random_tensor};
use farnet::arm::retrieval_loss;
use farnet::esam::{loss_late, NegativesMode};
use farnet::numerics::{Graph, Rng, Tensor, Var};

type Op = Box<dyn Fn(&mut Graph, &[Var]) -> Var>;

/// Every differentiable op with input shapes; checked at 5 random points.
fn ops() -> Vec<(&'static str, Vec<Vec<usize>>, Op)> {
    vec![
        ("add", vec![vec![3, 4], vec![3, 4]], Box::new(|g, v| g.add(v[0], v[1]).unwrap())),
        ("sub", vec![vec![3, 4], vec![3, 4]], Box::new(|g, v| g.sub(v[0], v[1]).unwrap())),
        ("mul", vec![vec![3, 4], vec![3, 4]], Box::new(|g, v| g.mul(v[0], v[1]).unwrap())),
        ("add_row", vec![vec![3, 4], vec![4]], Box::new(|g, v| g.add_row(v[0], v[1]).unwrap())),
        ("mul_row", vec![vec![3, 4], vec![4]], Box::new(|g, v| g.mul_row(v[0], v[1]).unwrap())),
        ("scale", vec![vec![2, 5]], Box::new(|g, v| g.scale(v[0], -1.7))),
        ("matmul", vec![vec![3, 4], vec![4, 2]], Box::new(|g, v| g.matmul(v[0], v[1]).unwrap())),
        ("matmul_nt", vec![vec![3, 4], vec![5, 4]], Box::new(|g, v| g.matmul_nt(v[0], v[1]).unwrap())),
        ("transpose", vec![vec![3, 4]], Box::new(|g, v| g.transpose(v[0]).unwrap())),
        ("softmax_rows", vec![vec![3, 5]], Box::new(|g, v| g.softmax_rows(v[0]))),
        ("normalize_rows", vec![vec![3, 4]], Box::new(|g, v| g.normalize_rows(v[0]).unwrap())),
        ("cosine", vec![vec![6], vec![6]], Box::new(|g, v| g.cosine(v[0], v[1]).unwrap())),
        ("mean_rows", vec![vec![4, 3]], Box::new(|g, v| g.mean_rows(v[0]))),
        ("gelu", vec![vec![3, 4]], Box::new(|g, v| g.gelu(v[0]))),
        ("layer_norm_rows", vec![vec![3, 6]], Box::new(|g, v| g.layer_norm_rows(v[0]))),
        ("slice_cols", vec![vec![3, 6]], Box::new(|g, v| g.slice_cols(v[0], 2, 3).unwrap())),
        ("concat_cols", vec![vec![3, 2], vec![3, 4]], Box::new(|g, v| g.concat_cols(&[v[0], v[1]]).unwrap())),
        ("concat_rows", vec![vec![2, 3], vec![4, 3]], Box::new(|g, v| g.concat_rows(&[v[0], v[1]]).unwrap())),
        ("stack", vec![vec![1], vec![1], vec![1]], Box::new(|g, v| g.stack(v).unwrap())),
        ("reshape", vec![vec![3, 4]], Box::new(|g, v| g.reshape(v[0], &[2, 6]).unwrap())),
        ("sum", vec![vec![3, 4]], Box::new(|g, v| g.sum(v[0]))),
        ("mean", vec![vec![3, 4]], Box::new(|g, v| g.mean(v[0]))),
        ("diag", vec![vec![4, 4]], Box::new(|g, v| g.diag(v[0]).unwrap())),
        ("gather_rows", vec![vec![5, 3]], Box::new(|g, v| g.gather_rows(v[0], &[4, 0, 4, 2]).unwrap())),
        (
            "cross_entropy_rows",
            vec![vec![3, 5]],
            Box::new(|g, v| g.cross_entropy_rows(v[0], &[1, 4, 0]).unwrap()),
        ),
        ("log_softmax_nll", vec![vec![8]], Box::new(|g, v| g.log_softmax_nll(v[0], 3).unwrap())),
        ("log_sum_exp", vec![vec![7]], Box::new(|g, v| g.log_sum_exp(v[0]))),
    ]
}

#[test]
fn every_op_matches_central_differences() {
    let mut rng = Rng::new(2024);
    for (name, shapes, op) in ops() {
        for point in 0..5 {
            let inputs: Vec<Tensor> = shapes.iter().map(|s| random_tensor(&mut rng, s, 1.0)).collect();
            let err = op_gradient_error(&inputs, 100 + point, op.as_ref());
            assert!(err <= 1e-5, "{name} at point {point}: relative error {err:e}");
        }
    }
}

#[test]
fn matmul_gradient_within_1e6() {
    let mut rng = Rng::new(5);
    let inputs = vec![random_tensor(&mut rng, &[3, 4], 1.0), random_tensor(&mut rng, &[4, 2], 1.0)];
    let err = op_gradient_error(&inputs, 1, &|g, v| g.matmul(v[0], v[1]).unwrap());
    assert!(err <= 1e-6, "{err:e}");
}

#[test]
fn cosine_against_constant_within_1e6() {
    let mut rng = Rng::new(6);
    let c = random_tensor(&mut rng, &[5], 1.0);
    let x = random_tensor(&mut rng, &[5], 1.0);
    let err = op_gradient_error(&[x], 1, &move |g, v| {
        let k = g.constant(c.clone());
        g.cosine(v[0], k).unwrap()
    });
    assert!(err <= 1e-6, "{err:e}");
}

#[test]
fn late_loss_gradient_through_projection() {
    let mut rng = Rng::new(7);
    let fused = random_tensor(&mut rng, &[4, 6], 1.0);
    let targets = random_tensor(&mut rng, &[4, 6], 1.0);
    let w = random_tensor(&mut rng, &[6, 6], 0.4);
    let err = op_gradient_error(&[w], 1, &move |g, v| {
        let f = g.constant(fused.clone());
        let t = g.constant(targets.clone());
        let p = g.matmul(f, v[0]).unwrap();
        let l = loss_late(g, p, t, 0.07).unwrap();
        g.reshape(l, &[1]).unwrap()
    });
    assert!(err <= 1e-5, "{err:e}");
}

#[test]
fn retrieval_loss_gradient_wrt_queries() {
    let mut rng = Rng::new(8);
    let u = random_tensor(&mut rng, &[4, 5], 0.5);
    let v = random_tensor(&mut rng, &[4, 5], 0.5);
    for mode in [NegativesMode::InBatch, NegativesMode::AsWritten] {
        let vv = v.clone();
        let err = op_gradient_error(&[u.clone()], 2, &move |g, x| {
            let t = g.constant(vv.clone());
            retrieval_loss(g, x[0], t, 0.07, mode).unwrap()
        });
        assert!(err <= 1e-5, "{mode}: {err:e}");
    }
}
