#![allow(dead_code)]

pub mod grad_cases;
pub mod oracle_cases;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use shapeprior_core::tensor::{Tape, Tensor, Var};
use shapeprior_core::Result;

pub const STEP: f64 = 1e-4;
/// Gradients smaller than this times `max(1, |loss|)` are compared
/// absolutely; below it differences are dominated by rounding.
pub const FLOOR: f64 = 1e-5;

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::from_f64(shape, &v).unwrap()
}

/// Values bounded away from zero, for ops with a kink there.
pub fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let v: Vec<f64> = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.05..1.0);
            if rng.gen() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::from_f64(shape, &v).unwrap()
}

/// Reduces any tensor to a scalar with fixed random weights, so every
/// output element reaches the loss with a distinct coefficient.
pub fn weighted_sum(tape: &mut Tape<f64>, v: Var, seed: u64) -> Result<Var> {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = tape.shape(v).to_vec();
    let w = tape.constant(rand_tensor(&mut rng, &shape, -1.0, 1.0));
    let prod = tape.mul(v, w)?;
    Ok(tape.sum(prod))
}

#[derive(Debug, Default)]
pub struct Report {
    pub checked: usize,
    /// Coordinates where two step sizes disagree, i.e. a kink or a switch
    /// of a discrete choice lies within the perturbation.
    pub skipped: usize,
    pub worst: f64,
    pub worst_at: String,
}

impl Report {
    pub fn merge(&mut self, other: Report) {
        self.checked += other.checked;
        self.skipped += other.skipped;
        if other.worst > self.worst {
            self.worst = other.worst;
            self.worst_at = other.worst_at;
        }
    }

    pub fn record(&mut self, analytic: f64, numeric: Option<f64>, loss: f64, at: impl FnOnce() -> String) {
        let Some(n) = numeric else {
            self.skipped += 1;
            return;
        };
        self.checked += 1;
        let e = rel_err(analytic, n, loss);
        if e > self.worst {
            self.worst = e;
            self.worst_at = format!("{}: tape {analytic:.9e} vs differences {n:.9e}", at());
        }
    }

    pub fn keep(self, out: &mut Vec<(String, Report)>, what: &str) {
        out.push((what.to_string(), self));
    }

    pub fn assert_within(&self, tol: f64, what: &str) {
        assert!(self.checked > 0, "{what}: nothing checked");
        assert!(
            self.worst < tol,
            "{what}: relative error {:.3e} at {} ({} checked, {} skipped)",
            self.worst,
            self.worst_at,
            self.checked,
            self.skipped
        );
        assert!(
            self.skipped * 20 <= self.checked + self.skipped,
            "{what}: {} of {} coordinates sit on kinks",
            self.skipped,
            self.checked + self.skipped
        );
    }
}

pub fn rel_err(a: f64, n: f64, loss: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FLOOR * loss.abs().max(1.0))
}

/// Central differences at `h` and `h / 2`, Richardson-extrapolated. `None`
/// when the two disagree, meaning a kink or a switch of a discrete choice
/// lies within the perturbation.
pub fn derivative(mut f: impl FnMut(f64) -> f64, loss: f64) -> Option<f64> {
    let mut central = |h: f64| (f(h) - f(-h)) / (2.0 * h);
    let n1 = central(STEP);
    let n2 = central(STEP / 2.0);
    if rel_err(n1, n2, loss) > 1e-3 {
        return None;
    }
    Some((4.0 * n2 - n1) / 3.0)
}

/// Compares the tape gradient of `f` with central differences in every
/// coordinate of every input.
pub fn check<F>(inputs: &[Tensor<f64>], f: F) -> Report
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| tape.param(&format!("in{i}"), t.clone()).unwrap())
        .collect();
    let loss = f(&mut tape, &vars).unwrap();
    let grads = tape.backward(loss).unwrap();
    let analytic: Vec<Tensor<f64>> = (0..inputs.len())
        .map(|i| grads.param(&format!("in{i}")).unwrap())
        .collect();

    let eval = |xs: &[Tensor<f64>]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        let l = f(&mut tape, &vars).unwrap();
        tape.value(l).item().unwrap()
    };
    let loss_value = tape.value(loss).item().unwrap();
    let mut report = Report::default();
    let mut xs = inputs.to_vec();
    for i in 0..inputs.len() {
        for j in 0..inputs[i].numel() {
            let orig = xs[i].data()[j];
            let numeric = derivative(
                |h| {
                    xs[i].data_mut()[j] = orig + h;
                    let v = eval(&xs);
                    xs[i].data_mut()[j] = orig;
                    v
                },
                loss_value,
            );
            let a = analytic[i].data()[j];
            report.record(a, numeric, loss_value, || format!("input {i}[{j}]"));
        }
    }
    report
}
