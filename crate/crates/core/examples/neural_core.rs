//! The numeric substrate on its own: an MLP trained with SGD and weight decay
//! on a toy problem, a finite-difference check of its gradient, and the
//! singular spectrum and effective rank of the learned weights.
//!
//! `cargo run --release --example neural_core`

use collapse_lab::neurocore::{
    effective_rank, sgd_step, singular_values, softmax_cross_entropy, Activation, Matrix, Mlp, RandomStream,
    SgdConfig,
};

fn main() -> collapse_lab::Result<()> {
    let mut s = RandomStream::new(42);
    let n = 512;
    let x = Matrix::from_fn(n, 2, |_, _| s.uniform_range(-1.0, 1.0));
    let y: Vec<usize> = (0..n).map(|r| usize::from(x.get(r, 0) * x.get(r, 1) > 0.0)).collect();

    let mut mlp = Mlp::he(&[2, 32, 32, 2], Activation::Relu, Activation::Logits, &mut s)?;
    let sgd = SgdConfig {
        learning_rate: 0.1,
        weight_decay: 1e-3,
        decay_factor: 0.5,
        decay_every: 300,
    };
    for epoch in 0..600 {
        let acts = mlp.forward(&x)?;
        let (loss, dl) = softmax_cross_entropy(acts.output(), &y)?;
        let grads = mlp.backward(&acts, &dl)?;
        sgd_step(&mut mlp, &grads, &sgd, epoch)?;
        if epoch % 150 == 0 {
            println!("epoch {epoch:>3} loss {loss:.4}");
        }
    }
    let logits = mlp.predict(&x)?;
    println!("train accuracy {:.3}", collapse_lab::probe::accuracy(&logits, &y));

    // Directional derivative against a central difference.
    let acts = mlp.forward(&x)?;
    let (_, dl) = softmax_cross_entropy(acts.output(), &y)?;
    let analytic = mlp.backward(&acts, &dl)?.flatten();
    let theta = mlp.parameters();
    let dir: Vec<f64> = (0..theta.len()).map(|_| s.normal()).collect();
    let eps = 1e-6;
    let loss_at = |sign: f64| -> collapse_lab::Result<f64> {
        let mut m = mlp.clone();
        let p: Vec<f64> = theta.iter().zip(&dir).map(|(t, d)| t + sign * eps * d).collect();
        m.set_parameters(&p)?;
        Ok(softmax_cross_entropy(&m.predict(&x)?, &y)?.0)
    };
    let fd = (loss_at(1.0)? - loss_at(-1.0)?) / (2.0 * eps);
    let an: f64 = analytic.iter().zip(&dir).map(|(a, d)| a * d).sum();
    println!("directional derivative: analytic {an:.8}, finite difference {fd:.8}");

    for (i, layer) in mlp.layers().iter().enumerate() {
        let sv = singular_values(&layer.weight)?;
        let top: Vec<String> = sv.iter().take(4).map(|v| format!("{v:.3}")).collect();
        println!(
            "layer {i}: top singular values [{}], effective rank {}",
            top.join(", "),
            effective_rank(&layer.weight, 0.05)
        );
    }
    Ok(())
}
