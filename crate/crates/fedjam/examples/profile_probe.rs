use fedjam::nn::{forward, loss_and_grad, CnnConfig, Params, Tensor};
use std::time::Instant;

fn main() {
    rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build_global()
        .unwrap();
    let cfg = CnnConfig::default();
    let p = Params::<f32>::init(&cfg, 1);
    let b = 16;
    let dim = cfg.input_h * cfg.input_w;
    let data: Vec<f32> = (0..b * dim).map(|i| (i % 251) as f32 / 255.0).collect();
    let batch = Tensor::from_vec(&[b, 1, cfg.input_h, cfg.input_w], data).unwrap();
    let labels: Vec<u8> = (0..b).map(|i| (i % 6) as u8).collect();

    let iters = 30;
    let t0 = Instant::now();
    for _ in 0..iters {
        std::hint::black_box(forward(&p, &cfg, &batch).unwrap());
    }
    let fwd = t0.elapsed().as_secs_f64() / (iters * b) as f64;
    let t0 = Instant::now();
    for _ in 0..iters {
        std::hint::black_box(loss_and_grad(&p, &cfg, &batch, &labels).unwrap());
    }
    let both = t0.elapsed().as_secs_f64() / (iters * b) as f64;
    println!("1-thread forward: {:.3} ms/img", fwd * 1e3);
    println!("1-thread fwd+bwd: {:.3} ms/img", both * 1e3);

    let zero = Params::<f32>::zeros(&cfg);
    let t0 = Instant::now();
    for _ in 0..iters {
        std::hint::black_box(loss_and_grad(&zero, &cfg, &batch, &labels).unwrap());
    }
    let nograd = t0.elapsed().as_secs_f64() / (iters * b) as f64;
    println!("1-thread fwd+bwd (zero params, no conv grad): {:.3} ms/img", nograd * 1e3);

    use fedjam::nn::batch_loss;
    let t0 = Instant::now();
    for _ in 0..iters {
        std::hint::black_box(batch_loss(&p, &cfg, &batch, &labels).unwrap());
    }
    let bl = t0.elapsed().as_secs_f64() / (iters * b) as f64;
    println!("batch_loss (fwd only, seq): {:.3} ms/img", bl * 1e3);
}
// appended probe: isolate wgrad share
