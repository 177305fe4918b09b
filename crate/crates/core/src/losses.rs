//! Training objectives: feature matching, reconstruction, MMD-GAN losses
//! with a rational-quadratic kernel and gradient penalty, the least-squares
//! GAN comparator, and the weighted total.

use crate::error::{Error, Result};
use crate::network::{Critic, LatentPair};
use crate::pointops::{chamfer_on_tape, ChamferVariant};
use crate::tensor::{rq_kernel_value, Real, Tape, Tensor, Var};

/// Weights of the total generator objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_re: f64,
    pub lambda_gan: f64,
    pub lambda_fe: f64,
    /// Weight of the fine-output Chamfer term inside the reconstruction
    /// loss; scheduled during training.
    pub lambda_f: f64,
}

impl LossWeights {
    pub fn paper() -> Self {
        LossWeights {
            lambda_re: 200.0,
            lambda_gan: 1.0,
            lambda_fe: 1000.0,
            lambda_f: 0.01,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            ("lambda_re", self.lambda_re),
            ("lambda_gan", self.lambda_gan),
            ("lambda_fe", self.lambda_fe),
        ];
        for (name, v) in all {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(format!("{name} = {v} must be non-negative")));
            }
        }
        if !(0.01..=1.0).contains(&self.lambda_f) {
            return Err(Error::config(format!(
                "lambda_f = {} outside [0.01, 1]",
                self.lambda_f
            )));
        }
        Ok(())
    }
}

/// Scales of the rational-quadratic kernel mixture.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelSpec {
    pub alphas: Vec<f64>,
}

impl Default for KernelSpec {
    fn default() -> Self {
        KernelSpec {
            alphas: vec![0.2, 0.5, 1.0, 2.0, 5.0],
        }
    }
}

impl KernelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.alphas.is_empty() || self.alphas.iter().any(|&a| !(a.is_finite() && a > 0.0)) {
            return Err(Error::config(format!(
                "kernel scales {:?} must be non-empty and positive",
                self.alphas
            )));
        }
        Ok(())
    }
}

/// `Σ_α (1 + |a − b|² / 2α)^(−α)`.
pub fn rq_kernel(a: &[f64], b: &[f64], spec: &KernelSpec) -> f64 {
    rq_kernel_value(a, b, &spec.alphas)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Estimator {
    /// Full double sums including the diagonal.
    #[default]
    Biased,
    /// Within-set sums skip the diagonal.
    Unbiased,
}

/// Squared MMD between the rows of `a: [m, e]` and `b: [n, e]`.
pub fn mmd2<T: Real>(
    tape: &mut Tape<T>,
    a: Var,
    b: Var,
    spec: &KernelSpec,
    estimator: Estimator,
) -> Result<Var> {
    tape.rq_mmd2(a, b, &spec.alphas, estimator == Estimator::Unbiased)
}

/// Mean over the batch of `|f1_x − f1_y| + |f2_x − f2_y|`, pairing samples
/// at the same batch position.
pub fn feat_match<T: Real>(tape: &mut Tape<T>, fx: LatentPair, fy: LatentPair) -> Result<Var> {
    let pairs = [(fx.f1, fy.f1), (fx.f2, fy.f2)];
    for (x, y) in pairs {
        if tape.shape(x) != tape.shape(y) || tape.shape(x).len() != 2 {
            return Err(Error::config(format!(
                "feature widths differ: {:?} vs {:?}",
                tape.shape(x),
                tape.shape(y)
            )));
        }
    }
    let batch = tape.shape(fx.f1)[0];
    let mut terms = Vec::with_capacity(2);
    for (x, y) in pairs {
        let diff = tape.sub(x, y)?;
        let norms = tape.row_norm(diff)?;
        terms.push(tape.sum(norms));
    }
    let total = tape.add(terms[0], terms[1])?;
    Ok(tape.scale(total, T::of(1.0 / batch as f64)))
}

/// Critic-side quantities of one adversarial step.
#[derive(Clone, Copy, Debug)]
pub struct CriticBatch {
    /// `[b, e]` critic embeddings of complete-cloud features.
    pub real: Var,
    /// `[b, e]` critic embeddings of partial-cloud features.
    pub fake: Var,
    /// `[b, d1 + d2]` interpolated features for the gradient penalty.
    pub interp_inputs: Option<Var>,
}

/// `x̂ = θ·fake + (1 − θ)·real` with one θ per sample.
pub fn interpolates<T: Real>(real: &Tensor<T>, fake: &Tensor<T>, theta: &[f64]) -> Result<Tensor<T>> {
    if real.shape() != fake.shape() || real.rank() != 2 || theta.len() != real.shape()[0] {
        return Err(Error::dim(
            "interpolates",
            format!(
                "real {:?}, fake {:?}, {} mixing weights",
                real.shape(),
                fake.shape(),
                theta.len()
            ),
        ));
    }
    if let Some(t) = theta.iter().find(|t| !(**t > 0.0 && **t < 1.0)) {
        return Err(Error::contract("interpolates", format!("θ = {t} outside (0, 1)")));
    }
    let width = real.shape()[1];
    let data = real
        .data()
        .chunks(width)
        .zip(fake.data().chunks(width))
        .zip(theta)
        .flat_map(|((r, f), &t)| {
            let t = T::of(t);
            r.iter()
                .zip(f)
                .map(move |(&r, &f)| t * f + (T::one() - t) * r)
        })
        .collect();
    Tensor::new(real.shape(), data)
}

fn check_batch<T: Real>(tape: &Tape<T>, batch: &CriticBatch) -> Result<()> {
    let (r, f) = (tape.shape(batch.real), tape.shape(batch.fake));
    if r != f || r.len() != 2 {
        return Err(Error::dim(
            "critic batch",
            format!("real {r:?} and fake {f:?} embeddings differ"),
        ));
    }
    if r[0] < 2 {
        return Err(Error::contract(
            "critic batch",
            format!("batch size {} is below 2", r[0]),
        ));
    }
    Ok(())
}

/// Generator adversarial loss: MMD² between real and fake embeddings, with
/// the real embeddings detached so only the fake side carries gradient.
pub fn gan_g_loss<T: Real>(
    tape: &mut Tape<T>,
    batch: &CriticBatch,
    spec: &KernelSpec,
    estimator: Estimator,
) -> Result<Var> {
    check_batch(tape, batch)?;
    let real = tape.detach(batch.real);
    mmd2(tape, real, batch.fake, spec, estimator)
}

#[derive(Clone, Copy, Debug)]
pub struct CriticLoss {
    pub loss: Var,
    /// Mean over samples of `(|∇_x̂ D(x̂)| − 1)²`, before weighting.
    pub penalty: Var,
}

/// Critic loss: negated MMD² plus `gp_weight` times the gradient penalty
/// at the interpolated inputs. For a vector-valued critic the gradient norm
/// is the Frobenius norm of its input Jacobian.
pub fn gan_d_loss<T: Real>(
    tape: &mut Tape<T>,
    batch: &CriticBatch,
    spec: &KernelSpec,
    estimator: Estimator,
    critic: &dyn Critic<T>,
    gp_weight: f64,
) -> Result<CriticLoss> {
    check_batch(tape, batch)?;
    let interp = batch
        .interp_inputs
        .ok_or_else(|| Error::contract("gan_d_loss", "interpolated inputs are missing"))?;
    let mmd = mmd2(tape, batch.real, batch.fake, spec, estimator)?;
    let penalty = gradient_penalty(tape, critic, interp)?;
    let weighted = tape.scale(penalty, T::of(gp_weight));
    let neg = tape.scale(mmd, -T::one());
    let loss = tape.add(neg, weighted)?;
    Ok(CriticLoss { loss, penalty })
}

pub fn gradient_penalty<T: Real>(tape: &mut Tape<T>, critic: &dyn Critic<T>, x: Var) -> Result<Var> {
    let jac = critic.input_jacobian(tape, x)?;
    let s = tape.shape(jac).to_vec();
    let flat = tape.reshape(jac, &[s[0], s[1] * s[2]])?;
    let norms = tape.row_norm(flat)?;
    let shifted = tape.add_scalar(norms, -T::one());
    let sq = tape.mul(shifted, shifted)?;
    Ok(tape.mean(sq))
}

/// Least-squares GAN losses on `[b, 1]` scores: the critic targets 1 for
/// real and 0 for fake, the generator targets 1.
pub fn lsgan_losses<T: Real>(tape: &mut Tape<T>, real_scores: Var, fake_scores: Var) -> Result<(Var, Var)> {
    if tape.shape(real_scores) != tape.shape(fake_scores) {
        return Err(Error::dim(
            "lsgan",
            format!(
                "score shapes {:?} and {:?} differ",
                tape.shape(real_scores),
                tape.shape(fake_scores)
            ),
        ));
    }
    let half = T::of(0.5);
    let mean_sq = |tape: &mut Tape<T>, v: Var, target: f64| -> Result<Var> {
        let shifted = tape.add_scalar(v, T::of(-target));
        let sq = tape.mul(shifted, shifted)?;
        let m = tape.mean(sq);
        Ok(tape.scale(m, half))
    };
    let d_real = mean_sq(tape, real_scores, 1.0)?;
    let d_fake = mean_sq(tape, fake_scores, 0.0)?;
    let d = tape.add(d_real, d_fake)?;
    let g = mean_sq(tape, fake_scores, 1.0)?;
    Ok((g, d))
}

/// `CD(coarse, y) + lambda_f · CD(fine, y)`, batch-averaged.
pub fn reconstruction<T: Real>(
    tape: &mut Tape<T>,
    coarse: Var,
    fine: Var,
    y: Var,
    lambda_f: f64,
    variant: ChamferVariant,
) -> Result<Var> {
    let c = chamfer_on_tape(tape, coarse, y, variant)?;
    let f = chamfer_on_tape(tape, fine, y, variant)?;
    let f = tape.scale(f, T::of(lambda_f));
    tape.add(c, f)
}

/// `λ_re·recon + λ_gan·gan + λ_fe·feat`; absent terms contribute nothing.
pub fn total_loss<T: Real>(
    tape: &mut Tape<T>,
    recon: Var,
    gan_g: Option<Var>,
    feat: Option<Var>,
    w: &LossWeights,
) -> Result<Var> {
    let mut total = tape.scale(recon, T::of(w.lambda_re));
    for (term, weight) in [(gan_g, w.lambda_gan), (feat, w.lambda_fe)] {
        if let Some(t) = term {
            let scaled = tape.scale(t, T::of(weight));
            total = tape.add(total, scaled)?;
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::Critic;

    fn c(tape: &mut Tape<f64>, shape: &[usize], v: &[f64]) -> Var {
        tape.constant(Tensor::from_f64(shape, v).unwrap())
    }

    fn value(tape: &Tape<f64>, v: Var) -> f64 {
        tape.value(v).item().unwrap()
    }

    #[test]
    fn feat_match_examples() {
        let mut tape = Tape::new();
        let f1x = c(&mut tape, &[1, 2], &[3.0, 4.0]);
        let f1y = c(&mut tape, &[1, 2], &[0.0, 0.0]);
        let f2 = c(&mut tape, &[1, 3], &[1.0, 2.0, 3.0]);
        let fx = LatentPair { f1: f1x, f2 };
        let fy = LatentPair { f1: f1y, f2 };
        let l = feat_match(&mut tape, fx, fy).unwrap();
        assert_eq!(value(&tape, l), 5.0);
        let same = feat_match(&mut tape, fx, fx).unwrap();
        assert_eq!(value(&tape, same), 0.0);
        let bad = LatentPair { f1: f2, f2 };
        assert!(matches!(feat_match(&mut tape, fx, bad), Err(Error::Config(_))));
    }

    #[test]
    fn rq_kernel_examples() {
        let spec = KernelSpec::default();
        assert_eq!(rq_kernel(&[0.3, -1.0], &[0.3, -1.0], &spec), 5.0);
        let one = KernelSpec { alphas: vec![1.0] };
        // |a − b|² = 2
        assert_eq!(rq_kernel(&[1.0, 1.0], &[0.0, 0.0], &one), 0.5);
    }

    #[test]
    fn mmd_identity_and_single_sample() {
        let spec = KernelSpec::default();
        let mut tape = Tape::new();
        let a = c(&mut tape, &[3, 2], &[0.1, 0.2, -0.3, 0.5, 1.0, 0.0]);
        let m = mmd2(&mut tape, a, a, &spec, Estimator::Biased).unwrap();
        assert_eq!(value(&tape, m), 0.0);

        let x = [0.2, -0.1];
        let y = [0.7, 0.4];
        let a = c(&mut tape, &[1, 2], &x);
        let b = c(&mut tape, &[1, 2], &y);
        let m = mmd2(&mut tape, a, b, &spec, Estimator::Biased).unwrap();
        let expected = rq_kernel(&x, &x, &spec) + rq_kernel(&y, &y, &spec) - 2.0 * rq_kernel(&x, &y, &spec);
        assert!((value(&tape, m) - expected).abs() < 1e-15);
        assert!(matches!(
            mmd2(&mut tape, a, b, &spec, Estimator::Unbiased),
            Err(Error::Contract { .. })
        ));
    }

    #[test]
    fn lsgan_examples() {
        let mut tape = Tape::new();
        let ones = c(&mut tape, &[2, 1], &[1.0, 1.0]);
        let zeros = c(&mut tape, &[2, 1], &[0.0, 0.0]);
        let (g, d) = lsgan_losses(&mut tape, ones, zeros).unwrap();
        assert_eq!((value(&tape, g), value(&tape, d)), (0.5, 0.0));
        let (g, d) = lsgan_losses(&mut tape, zeros, ones).unwrap();
        assert_eq!((value(&tape, g), value(&tape, d)), (0.0, 1.0));
    }

    #[test]
    fn reconstruction_of_identical_clouds_is_zero() {
        let mut tape = Tape::new();
        let y = c(&mut tape, &[1, 2, 3], &[0.1, 0.2, 0.3, -0.2, 0.0, 0.4]);
        let r = reconstruction(&mut tape, y, y, y, 0.5, ChamferVariant::CdT).unwrap();
        assert_eq!(value(&tape, r), 0.0);
    }

    #[test]
    fn reconstruction_weights_fine_term() {
        // single points: CD-T(coarse, y) = 2·1 = 2, CD-T(fine, y) = 2·2 = 4
        let mut tape = Tape::new();
        let y = c(&mut tape, &[1, 1, 3], &[0.0, 0.0, 0.0]);
        let coarse = c(&mut tape, &[1, 1, 3], &[1.0, 0.0, 0.0]);
        let fine = c(&mut tape, &[1, 1, 3], &[1.0, 1.0, 0.0]);
        let r = reconstruction(&mut tape, coarse, fine, y, 0.5, ChamferVariant::CdT).unwrap();
        assert_eq!(value(&tape, r), 4.0);
    }

    #[test]
    fn total_loss_examples() {
        let w = LossWeights::paper();
        let mut tape = Tape::new();
        let one = c(&mut tape, &[], &[1.0]);
        let zero = c(&mut tape, &[], &[0.0]);
        let t = total_loss(&mut tape, one, Some(one), Some(one), &w).unwrap();
        assert_eq!(value(&tape, t), 1201.0);
        let t = total_loss(&mut tape, zero, Some(zero), Some(zero), &w).unwrap();
        assert_eq!(value(&tape, t), 0.0);
        let a = c(&mut tape, &[], &[0.3]);
        let b = c(&mut tape, &[], &[0.7]);
        let a2 = c(&mut tape, &[], &[0.6]);
        let b2 = c(&mut tape, &[], &[1.4]);
        let single = total_loss(&mut tape, a, Some(b), Some(a), &w).unwrap();
        let double = total_loss(&mut tape, a2, Some(b2), Some(a2), &w).unwrap();
        assert!((2.0 * value(&tape, single) - value(&tape, double)).abs() < 1e-12);
    }

    #[test]
    fn weights_validate() {
        LossWeights::paper().validate().unwrap();
        let bad = LossWeights {
            lambda_f: 2.0,
            ..LossWeights::paper()
        };
        assert!(bad.validate().is_err());
        assert!(KernelSpec { alphas: vec![] }.validate().is_err());
    }

    struct Linear(Vec<f64>);

    impl Critic<f64> for Linear {
        fn embed(&self, tape: &mut Tape<f64>, x: Var) -> Result<Var> {
            let w = tape.constant(Tensor::from_f64(&[self.0.len(), 1], &self.0).unwrap());
            tape.matmul(x, w)
        }

        fn input_jacobian(&self, tape: &mut Tape<f64>, x: Var) -> Result<Var> {
            let b = tape.shape(x)[0];
            let w = tape.constant(Tensor::from_f64(&[1, self.0.len()], &self.0).unwrap());
            tape.expand(w, &[b, 1, self.0.len()])
        }
    }

    #[test]
    fn penalty_of_linear_critic() {
        let mut tape = Tape::new();
        let x = c(&mut tape, &[2, 2], &[0.1, 0.2, 0.3, 0.4]);
        let unit = gradient_penalty(&mut tape, &Linear(vec![0.6, 0.8]), x).unwrap();
        assert!(value(&tape, unit).abs() < 1e-15);
        let three = gradient_penalty(&mut tape, &Linear(vec![0.0, 3.0]), x).unwrap();
        assert_eq!(value(&tape, three), 4.0);
    }

    #[test]
    fn missing_interpolates_is_a_contract_error() {
        let mut tape = Tape::new();
        let e = c(&mut tape, &[2, 1], &[0.1, 0.2]);
        let batch = CriticBatch {
            real: e,
            fake: e,
            interp_inputs: None,
        };
        let critic = Linear(vec![1.0]);
        let r = gan_d_loss(&mut tape, &batch, &KernelSpec::default(), Estimator::Biased, &critic, 1.0);
        assert!(matches!(r, Err(Error::Contract { .. })));
    }

    #[test]
    fn interpolates_mix_per_sample() {
        let real = Tensor::<f64>::from_f64(&[2, 1], &[0.0, 10.0]).unwrap();
        let fake = Tensor::from_f64(&[2, 1], &[1.0, 20.0]).unwrap();
        let x = interpolates(&real, &fake, &[0.25, 0.5]).unwrap();
        assert_eq!(x.data(), &[0.25, 15.0]);
        assert!(interpolates(&real, &fake, &[0.0, 0.5]).is_err());
    }
}
