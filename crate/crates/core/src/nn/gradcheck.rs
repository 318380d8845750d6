use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Layer, Mode, Tensor};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Gradients smaller than this are compared absolutely.
const REL_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error_params: f64,
    pub max_rel_error_input: f64,
    pub params_checked: usize,
    pub inputs_checked: usize,
    pub tolerance: f64,
    pub passed: bool,
}

pub(crate) fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn projected_loss<L: Layer>(layer: &mut L, x: &Tensor, mode: Mode, probe: &[f64]) -> f64 {
    let y = layer.forward(x, mode).expect("forward succeeded once already");
    y.data().iter().zip(probe).map(|(a, b)| a * b).sum()
}

fn nudge<L: Layer>(layer: &mut L, name: &str, idx: usize, delta: f64) {
    layer.visit_params(&mut |n, t| {
        if n == name {
            t.data_mut()[idx] += delta;
        }
    });
}

/// Compares analytic gradients of `Σ r ⊙ layer(x)` (random fixed `r`) with
/// central finite differences on up to `samples` parameter entries and
/// `samples` input entries.
pub fn finite_difference_check<L: Layer>(
    layer: &mut L,
    input: &Tensor,
    mode: Mode,
    tolerance: f64,
    samples: usize,
    seed: u64,
) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let y = layer.forward(input, mode).expect("layer accepts input");
    let probe: Vec<f64> = (0..y.numel()).map(|_| StandardNormal.sample(&mut rng)).collect();
    let dy = Tensor::new(y.shape(), probe.clone()).expect("sized");

    layer.zero_grad();
    layer.forward(input, mode).expect("layer accepts input");
    let dx = layer.backward(&dy).expect("backward after forward");

    let mut params: Vec<(String, Vec<f64>)> = Vec::new();
    layer.visit_params(&mut |n, t| {
        if t.requires_grad() {
            params.push((n.to_string(), t.grad().expect("param grad").to_vec()));
        }
    });

    let mut max_p: f64 = 0.0;
    let mut params_checked = 0;
    let total: usize = params.iter().map(|(_, g)| g.len()).sum();
    if total > 0 {
        for _ in 0..samples.min(total) {
            let mut k = rng.gen_range(0..total);
            let (name, grads) = params
                .iter()
                .find(|(_, g)| {
                    if k < g.len() {
                        true
                    } else {
                        k -= g.len();
                        false
                    }
                })
                .expect("index in range");
            nudge(layer, name, k, FD_STEP);
            let plus = projected_loss(layer, input, mode, &probe);
            nudge(layer, name, k, -2.0 * FD_STEP);
            let minus = projected_loss(layer, input, mode, &probe);
            nudge(layer, name, k, FD_STEP);
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            max_p = max_p.max(rel_error(grads[k], numeric));
            params_checked += 1;
        }
    }

    let mut max_x: f64 = 0.0;
    let mut inputs_checked = 0;
    let mut x = input.clone();
    for _ in 0..samples.min(x.numel()) {
        let i = rng.gen_range(0..x.numel());
        let orig = x.data()[i];
        x.data_mut()[i] = orig + FD_STEP;
        let plus = projected_loss(layer, &x, mode, &probe);
        x.data_mut()[i] = orig - FD_STEP;
        let minus = projected_loss(layer, &x, mode, &probe);
        x.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * FD_STEP);
        max_x = max_x.max(rel_error(dx.data()[i], numeric));
        inputs_checked += 1;
    }

    GradCheckReport {
        max_rel_error_params: max_p,
        max_rel_error_input: max_x,
        params_checked,
        inputs_checked,
        tolerance,
        passed: max_p < tolerance && max_x < tolerance,
    }
}
