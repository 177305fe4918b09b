//! Tape gradients against central finite differences at 64-bit. Each case
//! returns one report per checked function.

use super::{away_from_zero, check, derivative, rand_tensor, weighted_sum, Report};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use shapeprior_core::losses::{
    feat_match, gan_d_loss, gan_g_loss, gradient_penalty, lsgan_losses, mmd2, reconstruction, total_loss,
    CriticBatch, Estimator, KernelSpec, LossWeights,
};
use shapeprior_core::network::{
    decode_coarse, decode_fine, encode, Bound, Critic, CriticHead, FpsStart, LatentPair, MlpCritic,
    ModelParams, NetConfig, Section,
};
use shapeprior_core::pointops::{chamfer_on_tape, ChamferVariant};
use shapeprior_core::tensor::{ParamStore, Tape, Tensor, Var};

pub const TOL: f64 = 1e-4;

pub type Cases = Vec<(String, Report)>;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn matmul_gradients() -> Cases {
    let mut out = Cases::new();
    let mut r = rng(1);
    let cases: [(&[usize], &[usize]); 4] = [
        (&[3, 4], &[4, 2]),
        (&[2, 3, 4], &[4, 5]),
        (&[2, 3, 4], &[2, 4, 2]),
        (&[4, 3], &[2, 3, 2]),
    ];
    for (sa, sb) in cases {
        let inputs = [rand_tensor(&mut r, sa, -1.0, 1.0), rand_tensor(&mut r, sb, -1.0, 1.0)];
        check(&inputs, |t, v| {
            let m = t.matmul(v[0], v[1])?;
            weighted_sum(t, m, 5)
        })
        .keep(&mut out, &format!("matmul {sa:?} x {sb:?}"));
    }
    out
}

pub fn elementwise_gradients_with_broadcasting() -> Cases {
    let mut out = Cases::new();
    let mut r = rng(2);
    let shapes: [(&[usize], &[usize]); 4] = [
        (&[2, 3, 4], &[4]),
        (&[2, 3, 4], &[2, 1, 4]),
        (&[3, 4], &[2, 3, 4]),
        (&[2, 3], &[2, 3]),
    ];
    for (sa, sb) in shapes {
        let inputs = [rand_tensor(&mut r, sa, -1.0, 1.0), rand_tensor(&mut r, sb, -1.0, 1.0)];
        check(&inputs, |t, v| {
            let a = t.add(v[0], v[1])?;
            let s = t.sub(v[0], v[1])?;
            let m = t.mul(v[0], v[1])?;
            let la = weighted_sum(t, a, 1)?;
            let ls = weighted_sum(t, s, 2)?;
            let lm = weighted_sum(t, m, 3)?;
            let l = t.add(la, ls)?;
            t.add(l, lm)
        })
        .keep(&mut out, &format!("add/sub/mul {sa:?} with {sb:?}"));
    }
    out
}

pub fn unary_and_reduction_gradients() -> Cases {
    let mut out = Cases::new();
    let mut r = rng(3);
    let x = away_from_zero(&mut r, &[2, 3, 4]);
    check(std::slice::from_ref(&x), |t, v| {
        let s = t.scale(v[0], 1.7);
        let s = t.add_scalar(s, -0.3);
        let h = t.relu(s);
        weighted_sum(t, h, 4)
    })
    .keep(&mut out, "scale, add_scalar, relu");
    check(std::slice::from_ref(&x), |t, v| {
        // relu_mask is piecewise constant, so x * mask(x) behaves as relu
        let m = t.relu_mask(v[0]);
        let h = t.mul(v[0], m)?;
        weighted_sum(t, h, 6)
    })
    .keep(&mut out, "relu_mask");
    check(std::slice::from_ref(&x), |t, v| {
        let sq = t.mul(v[0], v[0])?;
        let a = t.sum(sq);
        let b = t.mean(v[0]);
        let b = t.scale(b, 3.0);
        t.add(a, b)
    })
    .keep(&mut out, "sum, mean");
    check(&[rand_tensor(&mut r, &[3, 4], -1.0, 1.0)], |t, v| {
        let n = t.row_norm(v[0])?;
        weighted_sum(t, n, 7)
    })
    .keep(&mut out, "row_norm");
    out
}

pub fn max_over_points_gradients() -> Cases {
    let mut out = Cases::new();
    let mut r = rng(4);
    let x = rand_tensor(&mut r, &[2, 6, 3], -1.0, 1.0);
    check(&[x], |t, v| {
        let m = t.max_over_points(v[0])?;
        weighted_sum(t, m, 8)
    })
    .keep(&mut out, "max_over_points");
    out
}

pub fn shape_op_gradients() -> Cases {
    let mut out = Cases::new();
    let mut r = rng(5);
    let a = rand_tensor(&mut r, &[2, 3, 4], -1.0, 1.0);
    let b = rand_tensor(&mut r, &[2, 2, 4], -1.0, 1.0);
    let c = rand_tensor(&mut r, &[2, 3, 1], -1.0, 1.0);
    check(&[a.clone(), b], |t, v| {
        let j = t.concat(&[v[0], v[1]], 1)?;
        weighted_sum(t, j, 9)
    })
    .keep(&mut out, "concat axis 1");
    check(&[a.clone(), c], |t, v| {
        let j = t.concat(&[v[0], v[1]], 2)?;
        weighted_sum(t, j, 10)
    })
    .keep(&mut out, "concat axis 2");
    check(std::slice::from_ref(&a), |t, v| {
        let r = t.reshape(v[0], &[2, 3, 1, 4])?;
        let tiled = t.tile(r, 2, 3)?;
        weighted_sum(t, tiled, 11)
    })
    .keep(&mut out, "reshape, tile");
    check(&[rand_tensor(&mut r, &[4], -1.0, 1.0)], |t, v| {
        let e = t.expand(v[0], &[2, 3, 4])?;
        weighted_sum(t, e, 12)
    })
    .keep(&mut out, "expand");
    check(&[rand_tensor(&mut r, &[3, 4], -1.0, 1.0)], |t, v| {
        let tr = t.transpose(v[0])?;
        weighted_sum(t, tr, 13)
    })
    .keep(&mut out, "transpose");
    check(std::slice::from_ref(&a), |t, v| {
        // repeated indices accumulate
        let g = t.gather_points(v[0], &[2, 0, 2, 1, 1, 1], 3)?;
        weighted_sum(t, g, 14)
    })
    .keep(&mut out, "gather_points");
    out
}

pub fn nearest_neighbour_distance_gradients() -> Cases {
    let mut out = Cases::new();
    let mut r = rng(6);
    for squared in [true, false] {
        for _ in 0..5 {
            let a = rand_tensor(&mut r, &[2, 5, 3], -0.5, 0.5);
            let b = rand_tensor(&mut r, &[2, 7, 3], -0.5, 0.5);
            check(&[a, b], |t, v| {
                let d = t.nn_dist(v[0], v[1], squared)?;
                weighted_sum(t, d, 15)
            })
            .keep(&mut out, &format!("nn_dist squared={squared}"));
        }
    }
    let a = rand_tensor(&mut r, &[2, 6, 3], -0.5, 0.5);
    let b = rand_tensor(&mut r, &[2, 9, 3], -0.5, 0.5);
    for variant in [ChamferVariant::CdT, ChamferVariant::CdP] {
        check(&[a.clone(), b.clone()], |t, v| chamfer_on_tape(t, v[0], v[1], variant))
            .keep(&mut out, &format!("chamfer {variant}"));
    }
    out
}

pub fn mmd_gradients() -> Cases {
    let mut out = Cases::new();
    let mut r = rng(7);
    let spec = KernelSpec::default();
    for estimator in [Estimator::Biased, Estimator::Unbiased] {
        let a = rand_tensor(&mut r, &[4, 3], -1.0, 1.0);
        let b = rand_tensor(&mut r, &[5, 3], -1.0, 1.0);
        check(&[a, b], |t, v| mmd2(t, v[0], v[1], &spec, estimator))
            .keep(&mut out, &format!("mmd2 {estimator:?}"));
    }
    out
}

pub fn loss_term_gradients() -> Cases {
    let mut out = Cases::new();
    let mut r = rng(8);
    let f = [
        rand_tensor(&mut r, &[3, 4], -1.0, 1.0),
        rand_tensor(&mut r, &[3, 6], -1.0, 1.0),
        rand_tensor(&mut r, &[3, 4], -1.0, 1.0),
        rand_tensor(&mut r, &[3, 6], -1.0, 1.0),
    ];
    check(&f, |t, v| {
        feat_match(t, LatentPair { f1: v[0], f2: v[1] }, LatentPair { f1: v[2], f2: v[3] })
    })
    .keep(&mut out, "feat_match");

    let scores = [rand_tensor(&mut r, &[4, 1], -1.0, 2.0), rand_tensor(&mut r, &[4, 1], -1.0, 2.0)];
    for which in [0, 1] {
        check(&scores, |t, v| {
            let (g, d) = lsgan_losses(t, v[0], v[1])?;
            Ok(if which == 0 { g } else { d })
        })
        .keep(&mut out, "lsgan");
    }

    let clouds = [
        rand_tensor(&mut r, &[2, 4, 3], -0.5, 0.5),
        rand_tensor(&mut r, &[2, 8, 3], -0.5, 0.5),
        rand_tensor(&mut r, &[2, 6, 3], -0.5, 0.5),
    ];
    check(&clouds, |t, v| reconstruction(t, v[0], v[1], v[2], 0.3, ChamferVariant::CdT))
        .keep(&mut out, "reconstruction");

    let w = LossWeights {
        lambda_f: 0.5,
        ..LossWeights::paper()
    };
    let parts = [
        rand_tensor(&mut r, &[1], 0.0, 1.0),
        rand_tensor(&mut r, &[1], 0.0, 1.0),
        rand_tensor(&mut r, &[1], 0.0, 1.0),
    ];
    check(&parts, |t, v| {
        let s: Vec<Var> = v.iter().map(|&x| t.sum(x)).collect();
        total_loss(t, s[0], Some(s[1]), Some(s[2]), &w)
    })
    .keep(&mut out, "total_loss");
    out
}

/// A critic store on the tiny configuration with nonzero biases.
fn critic_store(cfg: &NetConfig, head: CriticHead, seed: u64) -> ParamStore<f64> {
    let p = ModelParams::<f64>::init(cfg, head, &mut rng(seed), 0.05).unwrap();
    p.critic
}

/// Runs `f` with the critic parameters as trainable tape leaves plus the
/// given inputs, and checks the gradient with respect to both.
fn check_with_critic<F>(store: &ParamStore<f64>, inputs: &[Tensor<f64>], f: F) -> Report
where
    F: Fn(&mut Tape<f64>, &Bound, &[Var]) -> shapeprior_core::Result<Var>,
{
    let names: Vec<String> = store.names().map(str::to_string).collect();
    let mut all: Vec<Tensor<f64>> = names.iter().map(|n| store.get(n).unwrap().clone()).collect();
    all.extend(inputs.iter().cloned());
    let k = names.len();
    check(&all, |t, v| {
        // rebind the leaves under the store's names
        let bound = Bound::from_vars(names.iter().cloned().zip(v[..k].iter().copied()));
        f(t, &bound, &v[k..])
    })
}

pub fn gradient_penalty_and_critic_loss_gradients() -> Cases {
    let mut out = Cases::new();
    let cfg = NetConfig::tiny();
    let store = critic_store(&cfg, CriticHead::Embedding, 9);
    let mut r = rng(10);
    let x = rand_tensor(&mut r, &[3, cfg.critic_input()], -1.0, 1.0);
    check_with_critic(&store, std::slice::from_ref(&x), |t, bound, v| {
        let critic = MlpCritic {
            bound,
            cfg: &cfg,
            head: CriticHead::Embedding,
        };
        gradient_penalty(t, &critic, v[0])
    })
    .keep(&mut out, "gradient_penalty");

    let real = rand_tensor(&mut r, &[3, cfg.critic_input()], -1.0, 1.0);
    let fake = rand_tensor(&mut r, &[3, cfg.critic_input()], -1.0, 1.0);
    let spec = KernelSpec::default();
    check_with_critic(&store, &[real.clone(), fake.clone(), x.clone()], |t, bound, v| {
        let critic = MlpCritic {
            bound,
            cfg: &cfg,
            head: CriticHead::Embedding,
        };
        let er = critic.embed(t, v[0])?;
        let ef = critic.embed(t, v[1])?;
        let batch = CriticBatch {
            real: er,
            fake: ef,
            interp_inputs: Some(v[2]),
        };
        Ok(gan_d_loss(t, &batch, &spec, Estimator::Biased, &critic, 1.0)?.loss)
    })
    .keep(&mut out, "gan_d_loss");

    // the real side is detached, so only the fake embedding is an input
    let er = rand_tensor(&mut r, &[3, 4], -1.0, 1.0);
    check(&[rand_tensor(&mut r, &[3, 4], -1.0, 1.0)], |t, v| {
        let real = t.constant(er.clone());
        let batch = CriticBatch {
            real,
            fake: v[0],
            interp_inputs: None,
        };
        gan_g_loss(t, &batch, &spec, Estimator::Unbiased)
    })
    .keep(&mut out, "gan_g_loss");
    out
}

/// Everything the generator objective needs on the tiny configuration.
struct Fixture {
    cfg: NetConfig,
    params: ModelParams<f64>,
    target: ParamStore<f64>,
    x: Tensor<f64>,
    y: Tensor<f64>,
}

fn fixture() -> Fixture {
    let cfg = NetConfig::tiny();
    let params = ModelParams::<f64>::init(&cfg, CriticHead::Embedding, &mut rng(11), 0.05).unwrap();
    let target = ModelParams::<f64>::init(&cfg, CriticHead::Embedding, &mut rng(12), 0.05)
        .unwrap()
        .encoder;
    let mut r = rng(13);
    Fixture {
        x: rand_tensor(&mut r, &[2, 32, 3], -0.5, 0.5),
        y: rand_tensor(&mut r, &[2, cfg.fine_count, 3], -0.5, 0.5),
        cfg,
        params,
        target,
    }
}

/// `λ_re (CD(coarse) + λ_f CD(fine)) + λ_gan MMD²(D(f_y), D(f_x)) + λ_fe feat`
/// with gradients for the encoder and decoder.
fn generator_loss(fx: &Fixture, params: &ModelParams<f64>, trainable: bool) -> (f64, Option<Vec<(String, Tensor<f64>)>>) {
    let cfg = &fx.cfg;
    let mut tape = Tape::new();
    let enc = Bound::new(&mut tape, &params.encoder, trainable).unwrap();
    let dec = Bound::new(&mut tape, &params.decoder, trainable).unwrap();
    let crit = Bound::new(&mut tape, &params.critic, false).unwrap();
    let tgt = Bound::new(&mut tape, &fx.target, false).unwrap();
    let input = tape.constant(fx.x.clone());
    let latent = encode(&mut tape, &enc, cfg, input).unwrap();
    let coarse = decode_coarse(&mut tape, &dec, cfg, latent.f2).unwrap();
    let fine = decode_fine(&mut tape, &dec, cfg, latent.f2, coarse, &fx.x, FpsStart::First).unwrap();
    let y = tape.constant(fx.y.clone());
    let recon = reconstruction(&mut tape, coarse, fine.points, y, 0.5, ChamferVariant::CdT).unwrap();
    let target_latent = encode(&mut tape, &tgt, cfg, y).unwrap();
    let feat = feat_match(&mut tape, latent, target_latent).unwrap();
    let critic = MlpCritic {
        bound: &crit,
        cfg,
        head: CriticHead::Embedding,
    };
    let real_in = target_latent.joined(&mut tape).unwrap();
    let fake_in = latent.joined(&mut tape).unwrap();
    let er = critic.embed(&mut tape, real_in).unwrap();
    let ef = critic.embed(&mut tape, fake_in).unwrap();
    let batch = CriticBatch {
        real: er,
        fake: ef,
        interp_inputs: None,
    };
    let gan = gan_g_loss(&mut tape, &batch, &KernelSpec::default(), Estimator::Biased).unwrap();
    let w = LossWeights {
        lambda_f: 0.5,
        ..LossWeights::paper()
    };
    let total = total_loss(&mut tape, recon, Some(gan), Some(feat), &w).unwrap();
    let value = tape.value(total).item().unwrap();
    if !trainable {
        return (value, None);
    }
    let grads = tape.backward(total).unwrap();
    let named = grads.named().into_iter().collect();
    (value, Some(named))
}

fn fd_over_params(
    params: &ModelParams<f64>,
    sections: &[Section],
    analytic: &[(String, Tensor<f64>)],
    eval: impl Fn(&ModelParams<f64>) -> f64,
) -> Report {
    let mut report = Report::default();
    let loss = eval(params);
    let mut p = params.clone();
    for (name, grad) in analytic {
        let Some(section) = Section::of(name) else { continue };
        if !sections.contains(&section) {
            continue;
        }
        for j in 0..grad.numel() {
            let orig = p.section(section).get(name).unwrap().data()[j];
            let numeric = derivative(
                |h| {
                    p.section_mut(section).get_mut(name).unwrap().data_mut()[j] = orig + h;
                    let v = eval(&p);
                    p.section_mut(section).get_mut(name).unwrap().data_mut()[j] = orig;
                    v
                },
                loss,
            );
            report.record(grad.data()[j], numeric, loss, || format!("{name}[{j}]"));
        }
    }
    report
}

pub fn full_generator_objective_on_tiny_network() -> Cases {
    let mut out = Cases::new();
    let fx = fixture();
    let (_, grads) = generator_loss(&fx, &fx.params, true);
    let grads = grads.unwrap();
    let report = fd_over_params(&fx.params, &[Section::Encoder, Section::Decoder], &grads, |p| {
        generator_loss(&fx, p, false).0
    });
    report.keep(&mut out, "generator objective");
    out
}

pub fn full_critic_objective_on_tiny_network() -> Cases {
    let mut out = Cases::new();
    let fx = fixture();
    let cfg = &fx.cfg;
    let mut r = rng(14);
    let real = rand_tensor(&mut r, &[2, cfg.critic_input()], -1.0, 1.0);
    let fake = rand_tensor(&mut r, &[2, cfg.critic_input()], -1.0, 1.0);
    let mixed = shapeprior_core::losses::interpolates(&real, &fake, &[0.3, 0.8]).unwrap();
    let loss = |p: &ModelParams<f64>, trainable: bool| {
        let mut tape = Tape::new();
        let bound = Bound::new(&mut tape, &p.critic, trainable).unwrap();
        let critic = MlpCritic {
            bound: &bound,
            cfg,
            head: CriticHead::Embedding,
        };
        let a = tape.constant(real.clone());
        let b = tape.constant(fake.clone());
        let er = critic.embed(&mut tape, a).unwrap();
        let ef = critic.embed(&mut tape, b).unwrap();
        let batch = CriticBatch {
            real: er,
            fake: ef,
            interp_inputs: Some(tape.constant(mixed.clone())),
        };
        let out = gan_d_loss(&mut tape, &batch, &KernelSpec::default(), Estimator::Biased, &critic, 1.0).unwrap();
        let v = tape.value(out.loss).item().unwrap();
        let g = trainable.then(|| tape.backward(out.loss).unwrap().named().into_iter().collect::<Vec<_>>());
        (v, g)
    };
    let grads = loss(&fx.params, true).1.unwrap();
    fd_over_params(&fx.params, &[Section::Critic], &grads, |p| loss(p, false).0)
        .keep(&mut out, "critic objective");
    out
}

pub const ALL: &[(&str, fn() -> Cases)] = &[
    ("matmul_gradients", matmul_gradients),
    ("elementwise_gradients_with_broadcasting", elementwise_gradients_with_broadcasting),
    ("unary_and_reduction_gradients", unary_and_reduction_gradients),
    ("max_over_points_gradients", max_over_points_gradients),
    ("shape_op_gradients", shape_op_gradients),
    ("nearest_neighbour_distance_gradients", nearest_neighbour_distance_gradients),
    ("mmd_gradients", mmd_gradients),
    ("loss_term_gradients", loss_term_gradients),
    ("gradient_penalty_and_critic_loss_gradients", gradient_penalty_and_critic_loss_gradients),
    ("full_generator_objective_on_tiny_network", full_generator_objective_on_tiny_network),
    ("full_critic_objective_on_tiny_network", full_critic_objective_on_tiny_network),
];
