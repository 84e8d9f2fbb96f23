use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Result, Tape, Tensor, TensorError, Var};

/// Worst relative error between tape gradients and central differences
/// over every element of every input.
///
/// The relative error of one element is `|a - n| / max(|a|, |n|, floor)`
/// with `floor = 1e-6 * max(1, |f(x)|)`. A central difference carries
/// rounding noise near `|f| * 1e-16 / eps`; the floor keeps components
/// smaller than that from being compared relatively.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    check(f, inputs, eps, |input| (0..input.numel()).collect())
}

/// Like [`grad_check`], but probes at most `per_input` randomly chosen
/// elements of each input.
pub fn grad_check_sampled<F>(
    f: F,
    inputs: &[Tensor],
    eps: f64,
    per_input: usize,
    seed: u64,
) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    check(f, inputs, eps, |input| {
        let n = input.numel();
        if n <= per_input {
            (0..n).collect()
        } else {
            let mut picked = sample(&mut rng, n, per_input).into_vec();
            picked.sort_unstable();
            picked
        }
    })
}

fn check<F, P>(f: F, inputs: &[Tensor], eps: f64, mut pick: P) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
    P: FnMut(&Tensor) -> Vec<usize>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let value = tape.value(out).item().unwrap_or(0.0);
    let floor = 1e-6 * value.abs().max(1.0);

    let eval = |probe: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = probe.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        tape.value(out)
            .item()
            .ok_or(TensorError::NonScalar(tape.value(out).numel()))
    };

    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[i])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(input.shape()));
        for idx in pick(input) {
            let orig = input.data()[idx];
            probe[i].data_mut()[idx] = orig + eps;
            let plus = eval(&probe)?;
            probe[i].data_mut()[idx] = orig - eps;
            let minus = eval(&probe)?;
            probe[i].data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.data()[idx];
            let denom = a.abs().max(numeric.abs()).max(floor);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}
