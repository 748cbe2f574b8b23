use std::time::Instant;
use drbnet_core::loss::l1_multiscale;
use drbnet_core::model::{Model, ModelConfig};
use drbnet_core::optim::RAdam;
use drbnet_core::tensor::{GradTape, Tensor};

fn main() {
    let model = Model::new(ModelConfig::default()).unwrap();
    let mut opt = RAdam::new(model.named_parameters());
    let x = Tensor::rand_uniform(&[8, 3, 64, 64], 0.0, 1.0, &mut drbnet_core::rng(2));
    let y = Tensor::rand_uniform(&[8, 3, 64, 64], 0.0, 1.0, &mut drbnet_core::rng(3));

    for step in 0..8 {
        let tape = GradTape::new();
        let pyr = model.forward(&tape, &x).unwrap();
        let out_max = pyr.finest().to_vec().iter().fold(0.0f32, |m, v| m.max(v.abs()));
        let loss = l1_multiscale(&tape, &pyr, &y).unwrap();
        let lv = loss.value();
        tape.backward(&loss.total).unwrap();
        let mut gmax = 0.0f32;
        for (_, p) in model.named_parameters() {
            if let Some(g) = p.grad() {
                for v in g { if v.abs() > gmax { gmax = v.abs(); } }
            }
        }
        println!("step {step}: loss {lv:.4} out_max {out_max:.3e} gmax {gmax:.3e}");
        if !lv.is_finite() { break; }
        opt.step(1e-4).unwrap();
        model.zero_grads();
    }

    // timing on a fresh model
    let model = Model::new(ModelConfig::default()).unwrap();
    let mut opt = RAdam::new(model.named_parameters());
    let n = 5;
    let (mut tf, mut tl, mut tb, mut to) = (0.0, 0.0, 0.0, 0.0);
    for _ in 0..n {
        let t0 = Instant::now();
        let tape = GradTape::new();
        let pyr = model.forward(&tape, &x).unwrap();
        let t1 = Instant::now();
        let loss = l1_multiscale(&tape, &pyr, &y).unwrap();
        let t2 = Instant::now();
        tape.backward(&loss.total).unwrap();
        let t3 = Instant::now();
        opt.step(1e-4).unwrap();
        model.zero_grads();
        let t4 = Instant::now();
        tf += (t1 - t0).as_secs_f64();
        tl += (t2 - t1).as_secs_f64();
        tb += (t3 - t2).as_secs_f64();
        to += (t4 - t3).as_secs_f64();
    }
    println!("per batch-8 step: forward {:.0}ms  loss {:.0}ms  backward {:.0}ms  optim {:.0}ms",
        tf / n as f64 * 1e3, tl / n as f64 * 1e3, tb / n as f64 * 1e3, to / n as f64 * 1e3);
}
