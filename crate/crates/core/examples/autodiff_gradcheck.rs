//! Gradient check of a small network, then a few momentum SGD steps on a
//! toy logistic regression.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wsodlab::autodiff::{grad_check, grad_check_params, Params, Sgd, Tape, Tensor};

fn main() -> wsodlab::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::new(vec![4, 3], (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect())?;

    let err = grad_check(
        |t, v| {
            let s = t.softmax(v, 1)?;
            let l = t.log(s);
            Ok(t.sum(l))
        },
        &x,
        1e-6,
    )?;
    println!("sum log softmax: max relative error {err:.2e}");

    let mut params = Params::new();
    let w = params.add_normal("w", vec![3, 1], 0.1, &mut rng);
    let b = params.add_zeros("b", vec![1]);
    let targets: Vec<f64> = x
        .data()
        .chunks(3)
        .map(|r| if r[0] + r[1] > 0.0 { 1.0 } else { 0.0 })
        .collect();
    let loss = |t: &mut Tape, bound: &wsodlab::autodiff::Bound| {
        let input = t.constant(x.clone());
        let z = t.linear(input, bound[w], bound[b])?;
        let p = t.sigmoid(z);
        let y = t.constant(Tensor::new(vec![4, 1], targets.clone())?);
        let q = t.one_minus(p);
        let ny = t.constant(Tensor::new(vec![4, 1], targets.iter().map(|v| 1.0 - v).collect())?);
        let lp = t.log(p);
        let lq = t.log(q);
        let a = t.mul(lp, y)?;
        let c = t.mul(lq, ny)?;
        let s = t.add(a, c)?;
        let total = t.sum(s);
        Ok(t.scale(total, -0.25))
    };
    println!(
        "logistic loss: max relative error {:.2e}",
        grad_check_params(loss, &params, 1e-6)?
    );

    let mut sgd = Sgd::new(0.9, 5e-4);
    for step in 0..=60 {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let l = loss(&mut tape, &bound)?;
        if step % 20 == 0 {
            println!("step {step:>2}: loss {:.4}", tape.value(l).item()?);
        }
        let g = tape.backward(l)?;
        sgd.step(&mut params, &bound.grads(&g), 0.5)?;
    }
    Ok(())
}
