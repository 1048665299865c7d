use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::ModelParams;

/// Gradient magnitudes below this are compared in absolute terms.
pub const GRAD_FLOOR: f64 = 1e-4;

/// Minimum number of coordinates probed on networks too large to check
/// exhaustively.
const MIN_SAMPLE: usize = 200;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(GRAD_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Largest relative error between the analytic gradient returned by
/// `loss_fn` and central differences of its loss with the given `step`.
///
/// Every coordinate is probed when the model has at most `max_coords`
/// parameters; otherwise a seeded sample of `max(max_coords, 200)` is used.
pub fn finite_diff_check<F>(loss_fn: F, params: &ModelParams, step: f64, max_coords: usize) -> f64
where
    F: Fn(&ModelParams) -> (f64, ModelParams),
{
    let (_, analytic) = loss_fn(params);
    let analytic = analytic.tensors().concat();
    let total = params.num_params();
    assert_eq!(analytic.len(), total, "gradient shape differs from parameters");

    let coords: Vec<usize> = if total <= max_coords {
        (0..total).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(0x6772_6164);
        let mut picked = sample(&mut rng, total, max_coords.max(MIN_SAMPLE).min(total)).into_vec();
        picked.sort_unstable();
        picked
    };

    let mut probe = params.clone();
    let mut worst = 0.0f64;
    for flat in coords {
        let original = get(&probe, flat);
        set(&mut probe, flat, original + step);
        let up = loss_fn(&probe).0;
        set(&mut probe, flat, original - step);
        let down = loss_fn(&probe).0;
        set(&mut probe, flat, original);
        let numeric = (up - down) / (2.0 * step);
        worst = worst.max(relative_error(analytic[flat], numeric));
    }
    worst
}

fn locate(params: &ModelParams, mut flat: usize) -> (usize, usize) {
    for (k, t) in params.tensors().iter().enumerate() {
        if flat < t.len() {
            return (k, flat);
        }
        flat -= t.len();
    }
    panic!("coordinate out of range");
}

fn get(params: &ModelParams, flat: usize) -> f64 {
    let (k, i) = locate(params, flat);
    params.tensors()[k][i]
}

fn set(params: &mut ModelParams, flat: usize, value: f64) {
    let (k, i) = locate(params, flat);
    params.tensors_mut()[k][i] = value;
}
