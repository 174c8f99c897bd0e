//! Central-difference gradient checking.
//!
//! Scalar losses are random projections `sum_i r_i y_i` evaluated in f64, so
//! the analytic gradient of the loss with respect to the output is just `r`.

use super::network::Network;
use super::ops::Mode;
use super::tensor::Tensor;
use crate::error::Result;
use crate::rng::SeededRng;

/// Normally distributed test data.
pub fn random_vec(len: usize, seed: u64) -> Vec<f32> {
    let mut rng = SeededRng::from_seed(seed);
    (0..len).map(|_| rng.normal(0.0, 1.0) as f32).collect()
}

pub fn random_tensor(shape: [usize; 4], seed: u64) -> Tensor {
    Tensor::from_vec(shape, random_vec(shape.iter().product(), seed)).expect("shape")
}

/// Fixed random linear functional over a tensor's values.
#[derive(Clone, Debug)]
pub struct Projection {
    weights: Vec<f32>,
}

impl Projection {
    pub fn new(len: usize, seed: u64) -> Self {
        Self {
            weights: random_vec(len, seed),
        }
    }

    pub fn apply(&self, y: &Tensor) -> f64 {
        assert_eq!(y.len(), self.weights.len(), "projection length");
        y.data().iter().zip(&self.weights).map(|(&a, &b)| a as f64 * b as f64).sum()
    }

    /// Gradient of [`Projection::apply`] with respect to its input.
    pub fn grad_tensor(&self, shape: [usize; 4]) -> Tensor {
        Tensor::from_vec(shape, self.weights.clone()).expect("projection length")
    }
}

/// Agreement between analytic and numerical gradients over the checked entries.
#[derive(Clone, Copy, Debug)]
pub struct GradReport {
    pub checked: usize,
    /// `||analytic - numeric|| / ||numeric||`.
    pub rel_error: f64,
    pub max_abs_error: f64,
    /// Largest numerical gradient magnitude.
    pub scale: f64,
}

impl GradReport {
    /// Norm-wise relative error under `tol`, and no single entry off by more
    /// than `tol` times the gradient scale.
    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.rel_error < tol && self.max_abs_error <= tol * self.scale.max(f64::MIN_POSITIVE)
    }
}

/// Checks every entry of `values`.
pub fn check(values: &[f32], analytic: &[f32], step: f64, f: impl FnMut(&[f32]) -> f64) -> GradReport {
    let all: Vec<usize> = (0..values.len()).collect();
    check_indices(values, analytic, step, &all, f)
}

/// Checks only `indices`; useful for large parameter tensors.
pub fn check_indices(
    values: &[f32],
    analytic: &[f32],
    step: f64,
    indices: &[usize],
    mut f: impl FnMut(&[f32]) -> f64,
) -> GradReport {
    assert_eq!(values.len(), analytic.len());
    let mut work = values.to_vec();
    let (mut diff_sq, mut num_sq, mut max_abs, mut scale) = (0.0, 0.0, 0.0f64, 0.0f64);
    for &i in indices {
        let orig = values[i];
        let plus = (orig as f64 + step) as f32;
        let minus = (orig as f64 - step) as f32;
        work[i] = plus;
        let lp = f(&work);
        work[i] = minus;
        let lm = f(&work);
        work[i] = orig;
        // Use the step actually representable in f32.
        let numeric = (lp - lm) / (plus as f64 - minus as f64);
        let err = (numeric - analytic[i] as f64).abs();
        diff_sq += err * err;
        num_sq += numeric * numeric;
        max_abs = max_abs.max(err);
        scale = scale.max(numeric.abs());
    }
    GradReport {
        checked: indices.len(),
        rel_error: if num_sq > 0.0 { (diff_sq / num_sq).sqrt() } else if diff_sq == 0.0 { 0.0 } else { f64::INFINITY },
        max_abs_error: max_abs,
        scale,
    }
}

/// Whole-network gradient agreement, see [`check_network_gradients`].
#[derive(Clone, Debug)]
pub struct NetworkGradReport {
    /// Entries compared against a central difference.
    pub checked: usize,
    /// Entries where every trial step crossed a ReLU or max-pool switch.
    pub skipped: usize,
    /// Parameter tensors with at least one checked entry.
    pub tensors_covered: usize,
    pub tensors_total: usize,
    /// Norm-wise relative error over all checked entries.
    pub rel_error: f64,
    /// Tensor with the largest norm-wise relative error, and that error.
    pub worst_tensor: (String, f64),
}

/// Compares the analytic gradient of `loss` (value and gradient with
/// respect to the training forward output) with central differences, for
/// `per_tensor` randomly chosen entries of every parameter tensor.
///
/// Each entry is tried with the steps in order; a step is used only if the
/// forwards at `+h` and `-h` make the same ReLU and max-pool decisions as
/// the unperturbed forward, so the difference never straddles a kink.
pub fn check_network_gradients(
    net: &mut Network,
    x: &Tensor,
    loss: impl Fn(&Tensor) -> Result<(f64, Tensor)>,
    per_tensor: usize,
    steps: &[f64],
    seed: u64,
) -> Result<NetworkGradReport> {
    let mut rng = SeededRng::from_seed(seed);
    let y = net.forward(x, Mode::Train)?;
    let base_signature = net.activation_signature();
    let (_, grad_out) = loss(&y)?;
    net.zero_grad();
    net.backward(&grad_out)?;

    let (mut diff_sq, mut num_sq) = (0.0, 0.0);
    let (mut checked, mut skipped, mut covered) = (0, 0, 0);
    let mut worst = (String::new(), 0.0);
    let tensors_total = net.params().len();
    for pi in 0..tensors_total {
        let values = net.params()[pi].value.clone();
        let analytic = net.params()[pi].grad.clone();
        let mut picks: Vec<usize> = (0..values.len()).collect();
        rng.shuffle(&mut picks);
        picks.truncate(per_tensor);
        let (mut d_local, mut n_local, mut count) = (0.0, 0.0, 0);
        for i in picks {
            let mut numeric = None;
            for &h in steps {
                let plus = (values[i] as f64 + h) as f32;
                let minus = (values[i] as f64 - h) as f32;
                let mut eval = |v: f32| -> Result<(f64, Option<u64>)> {
                    net.params_mut()[pi].value[i] = v;
                    let out = net.forward(x, Mode::Train)?;
                    Ok((loss(&out)?.0, net.activation_signature()))
                };
                let (lp, sp) = eval(plus)?;
                let (lm, sm) = eval(minus)?;
                net.params_mut()[pi].value[i] = values[i];
                if sp == base_signature && sm == base_signature {
                    numeric = Some((lp - lm) / (plus as f64 - minus as f64));
                    break;
                }
            }
            let Some(n) = numeric else {
                skipped += 1;
                continue;
            };
            let err = n - analytic[i] as f64;
            d_local += err * err;
            n_local += n * n;
            count += 1;
        }
        if count > 0 {
            covered += 1;
            checked += count;
            diff_sq += d_local;
            num_sq += n_local;
            let local = if n_local > 0.0 { (d_local / n_local).sqrt() } else { d_local.sqrt() };
            if local > worst.1 {
                worst = (net.params()[pi].name.clone(), local);
            }
        }
    }
    // Leave the network with caches matching its parameters.
    net.forward(x, Mode::Train)?;
    Ok(NetworkGradReport {
        checked,
        skipped,
        tensors_covered: covered,
        tensors_total,
        rel_error: if num_sq > 0.0 { (diff_sq / num_sq).sqrt() } else { f64::INFINITY },
        worst_tensor: worst,
    })
}
