//! Builds a small conv, batch-norm, ELU and pooling graph, backpropagates a
//! scalar loss and compares one gradient entry with a central difference.

use pcqa::tensor::{BnMode, Graph, ReduceKind, Tensor};

fn loss_of(x: &Tensor, w: &Tensor) -> pcqa::Result<(f64, Vec<f64>)> {
    let mut g = Graph::new();
    let xv = g.input(x);
    let wv = g.param("w", w);
    let h = g.conv1d(xv, wv, None, 1, 1)?;
    let gamma = g.constant(&Tensor::full(&[4], 1.0));
    let beta = g.constant(&Tensor::zeros(&[4]));
    let (h, _) = g.batchnorm(h, gamma, beta, BnMode::Train, 1e-5)?;
    let h = g.elu(h, 1.0);
    let p = g.reduce(h, 2, ReduceKind::Variance)?;
    let l = g.mean(p);
    let value = g.value(l)[0];
    let grads = g.backward(l)?;
    Ok((value, grads.param("w").expect("w feeds the loss")))
}

fn main() -> pcqa::Result<()> {
    let mut rng = pcqa::seed::rng(1);
    let rand = |shape: &[usize], rng: &mut rand_chacha::ChaCha8Rng| {
        use rand::Rng;
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
    };
    let x = rand(&[2, 3, 10], &mut rng)?;
    let w = rand(&[4, 3, 2], &mut rng)?.with_grad();
    let (value, grad) = loss_of(&x, &w)?;
    println!("loss {value:.6}");

    let h = 1e-6;
    let mut plus = w.clone();
    plus.data_mut()[5] += h;
    let mut minus = w.clone();
    minus.data_mut()[5] -= h;
    let fd = (loss_of(&x, &plus)?.0 - loss_of(&x, &minus)?.0) / (2.0 * h);
    println!("d loss / d w[5]: analytic {:.9}, central difference {fd:.9}", grad[5]);
    Ok(())
}
