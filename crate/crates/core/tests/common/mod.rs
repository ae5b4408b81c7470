//! Helpers shared by the integration tests.
#![allow(dead_code)]

use farnet::arm::Noise;
use farnet::data::{render, Image, SceneSpec, Vocabulary};
use farnet::esam::NegativesMode;
use farnet::model::{LossConfig, LossFlags, Model, ModelConfig, Perturbation, TripletInput};
use farnet::numerics::{Graph, Params, Rng, Tensor, Var};

pub const FD_STEP: f64 = 1e-5;

/// Denominator floor for whole-model checks. Central differences of an
/// O(1) loss at h = 1e-5 carry ~2e-10 of roundoff, so exactly-zero
/// gradients (key biases under softmax) read as noise of that size.
pub const MODEL_FD_FLOOR: f64 = 1e-5;

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

pub fn random_tensor(rng: &mut Rng, shape: &[usize], std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal(0.0, std)).collect()).unwrap()
}

/// Max relative error between the tape gradient and central differences
/// of `sum(f(inputs) ⊙ probe)` over every input entry.
pub fn op_gradient_error(inputs: &[Tensor], probe_seed: u64, f: &dyn Fn(&mut Graph, &[Var]) -> Var) -> f64 {
    let eval = |xs: &[Tensor]| -> (f64, Option<Vec<Vec<f64>>>) {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|x| g.variable(x.clone())).collect();
        let out = f(&mut g, &vars);
        let shape = g.value(out).shape().to_vec();
        let probe = random_tensor(&mut Rng::new(probe_seed), &shape, 1.0);
        let p = g.constant(probe);
        let prod = g.mul(out, p).unwrap();
        let loss = g.sum(prod);
        let value = g.value(loss).item();
        g.backward(loss).unwrap();
        let grads = vars.iter().map(|&v| g.grad(v).unwrap().to_vec()).collect();
        (value, Some(grads))
    };
    let (_, grads) = eval(inputs);
    let grads = grads.unwrap();
    let mut worst = 0.0f64;
    for (k, x) in inputs.iter().enumerate() {
        for i in 0..x.numel() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= FD_STEP;
            let numeric = (eval(&plus).0 - eval(&minus).0) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(grads[k][i], numeric, 1e-6));
        }
    }
    worst
}

/// Spec-sized micro model: d = 8, 8x8 images, patch 4.
pub fn micro_model(seed: u64) -> (Model, Params) {
    let cfg = ModelConfig {
        embed_dim: 8,
        layers: 1,
        heads: 2,
        patch_size: 4,
        image_size: 8,
        vocab_size: Vocabulary::standard().len(),
        max_text_len: 12,
        mlp_ratio: 2,
        share_image_encoders: true,
    };
    Model::new(cfg, &mut Rng::new(seed)).unwrap()
}

pub struct MicroBatch {
    pub images: Vec<Image>,
    pub tokens: Vec<Vec<usize>>,
}

impl MicroBatch {
    /// Two triplets with real rendered scenes and templated edits.
    pub fn new(size: usize) -> Self {
        let vocab = Vocabulary::standard();
        let a = SceneSpec::from_index(17);
        let b = SceneSpec::from_index(233);
        let edit_a = farnet::data::Attribute::Color;
        let edit_b = farnet::data::Attribute::Shape;
        let ta = a.with(edit_a, (a.get(edit_a) + 1) % 5);
        let tb = b.with(edit_b, (b.get(edit_b) + 2) % 4);
        let images = [a, ta, b, tb].iter().map(|s| render(s, size).unwrap()).collect();
        let tokens = vec![
            vocab.encode(&["make", "the", "color", ta.value_name(edit_a)]).unwrap(),
            vocab.encode(&["make", "the", "shape", tb.value_name(edit_b)]).unwrap(),
        ];
        Self { images, tokens }
    }

    pub fn inputs(&self) -> Vec<TripletInput<'_>> {
        (0..self.tokens.len())
            .map(|i| TripletInput {
                reference: &self.images[2 * i],
                target: &self.images[2 * i + 1],
                tokens: &self.tokens[i],
            })
            .collect()
    }
}

pub fn loss_config(flags: LossFlags, lambda2: f64) -> LossConfig {
    LossConfig {
        lambda1: 0.5,
        lambda2,
        tau: 0.07,
        negatives: NegativesMode::InBatch,
        attention_negatives: NegativesMode::AsWritten,
        flags,
    }
}

pub fn only(late: bool, attention: bool, res: bool, pi: bool) -> LossFlags {
    LossFlags { late, attention, res, pi }
}

/// Draws target noise once so repeated evaluations share it.
pub fn fixed_noise(model: &Model, params: &Params, batch: &MicroBatch, seed: u64) -> Noise {
    let mut g = Graph::inference();
    let cfg = loss_config(only(false, false, true, false), 0.5);
    let l = model
        .batch_losses(
            &mut g,
            params,
            &batch.inputs(),
            &cfg,
            Perturbation::Sample { rng: &mut Rng::new(seed), stats: None },
        )
        .unwrap();
    l.noise.unwrap()
}

pub fn total_loss(model: &Model, params: &Params, batch: &MicroBatch, cfg: &LossConfig, noise: &Noise) -> f64 {
    let mut g = Graph::inference();
    let l = model
        .batch_losses(&mut g, params, &batch.inputs(), cfg, Perturbation::Fixed(noise))
        .unwrap();
    g.value(l.total).item()
}

/// Worst relative error over every parameter scalar, plus the count checked.
pub fn model_gradient_error(model: &Model, params: &Params, batch: &MicroBatch, cfg: &LossConfig, noise: &Noise) -> (f64, usize) {
    let mut g = Graph::new();
    let l = model
        .batch_losses(&mut g, params, &batch.inputs(), cfg, Perturbation::Fixed(noise))
        .unwrap();
    g.backward(l.total).unwrap();
    let mut analytic = params.clone();
    analytic.zero_grad();
    g.accumulate_param_grads(&mut analytic);

    let mut work = params.clone();
    let mut worst = 0.0f64;
    let mut checked = 0;
    for id in params.ids().collect::<Vec<_>>() {
        for i in 0..params.value(id).numel() {
            let x = params.value(id).data()[i];
            work.value_mut(id).data_mut()[i] = x + FD_STEP;
            let up = total_loss(model, &work, batch, cfg, noise);
            work.value_mut(id).data_mut()[i] = x - FD_STEP;
            let down = total_loss(model, &work, batch, cfg, noise);
            work.value_mut(id).data_mut()[i] = x;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let e = rel_err(analytic.grad(id)[i], numeric, MODEL_FD_FLOOR);
            if std::env::var_os("FD_DEBUG").is_some() && e > 1e-4 {
                eprintln!("{} [{i}] analytic {:e} numeric {:e}", params.name(id), analytic.grad(id)[i], numeric);
            }
            worst = worst.max(e);
            checked += 1;
        }
    }
    (worst, checked)
}
