//! Loss and geometry kernels against naive loop implementations. Cases
//! panic on the first mismatch.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use shapeprior_core::losses::{feat_match, lsgan_losses, mmd2, rq_kernel, Estimator, KernelSpec};
use shapeprior_core::network::LatentPair;
use shapeprior_core::pointops::{chamfer, chamfer_on_tape, fidelity_error, fps, ChamferVariant, PointCloud};
use shapeprior_core::tensor::{Tape, Tensor};

const INSTANCES: usize = 120;
const TOL: f64 = 1e-12;

fn cloud(rng: &mut ChaCha8Rng, n: usize) -> PointCloud {
    PointCloud::new((0..n).map(|_| [0; 3].map(|_: i32| rng.gen_range(-1.0..1.0))).collect())
}

fn rows(rng: &mut ChaCha8Rng, n: usize, e: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..e).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
}

fn flat(rows: &[Vec<f64>]) -> Tensor<f64> {
    let data: Vec<f64> = rows.iter().flatten().copied().collect();
    Tensor::from_f64(&[rows.len(), rows[0].len()], &data).unwrap()
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn close(a: f64, b: f64, what: &str) {
    assert!((a - b).abs() <= TOL * b.abs().max(1.0), "{what}: {a} vs oracle {b}");
}

fn oracle_directional(a: &PointCloud, b: &PointCloud, squared: bool) -> f64 {
    let mut total = 0.0;
    for p in &a.points {
        let mut best = f64::INFINITY;
        for q in &b.points {
            best = best.min(dist2(p, q));
        }
        total += if squared { best } else { best.sqrt() };
    }
    total / a.len() as f64
}

fn oracle_chamfer(a: &PointCloud, b: &PointCloud, variant: ChamferVariant) -> f64 {
    match variant {
        ChamferVariant::CdT => oracle_directional(a, b, true) + oracle_directional(b, a, true),
        ChamferVariant::CdP => (oracle_directional(a, b, false) + oracle_directional(b, a, false)) / 2.0,
    }
}

pub fn chamfer_matches_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for i in 0..INSTANCES {
        let (n, m) = (rng.gen_range(1..=16), rng.gen_range(1..=16));
        let a = cloud(&mut rng, n);
        let b = cloud(&mut rng, m);
        for variant in [ChamferVariant::CdT, ChamferVariant::CdP] {
            let t = chamfer(&a, &b, variant).unwrap();
            close(t.total, oracle_chamfer(&a, &b, variant), &format!("instance {i} {variant}"));
            close(t.forward, oracle_directional(&a, &b, variant.squared()), "forward term");
            close(t.backward, oracle_directional(&b, &a, variant.squared()), "backward term");
        }
    }
}

pub fn batched_chamfer_on_tape_matches_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for i in 0..INSTANCES {
        let b = rng.gen_range(1..=3);
        let (n, m) = (rng.gen_range(1..=16), rng.gen_range(1..=16));
        let xs: Vec<PointCloud> = (0..b).map(|_| cloud(&mut rng, n)).collect();
        let ys: Vec<PointCloud> = (0..b).map(|_| cloud(&mut rng, m)).collect();
        for variant in [ChamferVariant::CdT, ChamferVariant::CdP] {
            let mut tape = Tape::<f64>::new();
            let x = tape.constant(PointCloud::batch_tensor(&xs.iter().collect::<Vec<_>>()).unwrap());
            let y = tape.constant(PointCloud::batch_tensor(&ys.iter().collect::<Vec<_>>()).unwrap());
            let v = chamfer_on_tape(&mut tape, x, y, variant).unwrap();
            let got = tape.value(v).item().unwrap();
            let want = xs.iter().zip(&ys).map(|(a, c)| oracle_chamfer(a, c, variant)).sum::<f64>() / b as f64;
            close(got, want, &format!("instance {i} {variant}"));
        }
    }
}

pub fn fidelity_matches_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for i in 0..INSTANCES {
        let (n, m) = (rng.gen_range(1..=16), rng.gen_range(1..=16));
        let input = cloud(&mut rng, n);
        let output = cloud(&mut rng, m);
        let got = fidelity_error(&input, &output).unwrap();
        close(got, oracle_directional(&input, &output, false), &format!("instance {i}"));
    }
}

fn oracle_kernel(a: &[f64], b: &[f64], alphas: &[f64]) -> f64 {
    let d = dist2(a, b);
    alphas.iter().map(|&al| (1.0 + d / (2.0 * al)).powf(-al)).sum()
}

fn oracle_mmd2(x: &[Vec<f64>], y: &[Vec<f64>], alphas: &[f64], unbiased: bool) -> f64 {
    let within = |s: &[Vec<f64>]| {
        let mut total = 0.0;
        let mut count = 0.0;
        for i in 0..s.len() {
            for j in 0..s.len() {
                if unbiased && i == j {
                    continue;
                }
                total += oracle_kernel(&s[i], &s[j], alphas);
                count += 1.0;
            }
        }
        total / count
    };
    let mut cross = 0.0;
    for a in x {
        for b in y {
            cross += oracle_kernel(a, b, alphas);
        }
    }
    within(x) + within(y) - 2.0 * cross / (x.len() * y.len()) as f64
}

pub fn mmd_matches_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for i in 0..INSTANCES {
        let e = rng.gen_range(1..=8);
        let (m, n) = (rng.gen_range(2..=16), rng.gen_range(2..=16));
        let x = rows(&mut rng, m, e);
        let y = rows(&mut rng, n, e);
        let spec = KernelSpec {
            alphas: (0..rng.gen_range(1..=5)).map(|_| rng.gen_range(0.1..5.0)).collect(),
        };
        close(
            rq_kernel(&x[0], &y[0], &spec),
            oracle_kernel(&x[0], &y[0], &spec.alphas),
            "kernel",
        );
        for (estimator, unbiased) in [(Estimator::Biased, false), (Estimator::Unbiased, true)] {
            let mut tape = Tape::<f64>::new();
            let a = tape.constant(flat(&x));
            let b = tape.constant(flat(&y));
            let v = mmd2(&mut tape, a, b, &spec, estimator).unwrap();
            close(
                tape.value(v).item().unwrap(),
                oracle_mmd2(&x, &y, &spec.alphas, unbiased),
                &format!("instance {i} {estimator:?}"),
            );
        }
    }
}

pub fn feat_match_matches_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for i in 0..INSTANCES {
        let b = rng.gen_range(1..=16);
        let (d1, d2) = (rng.gen_range(1..=16), rng.gen_range(1..=16));
        let (x1, x2) = (rows(&mut rng, b, d1), rows(&mut rng, b, d2));
        let (y1, y2) = (rows(&mut rng, b, d1), rows(&mut rng, b, d2));
        let mut want = 0.0;
        for k in 0..b {
            want += dist2(&x1[k], &y1[k]).sqrt() + dist2(&x2[k], &y2[k]).sqrt();
        }
        want /= b as f64;
        let mut tape = Tape::<f64>::new();
        let fx = LatentPair {
            f1: tape.constant(flat(&x1)),
            f2: tape.constant(flat(&x2)),
        };
        let fy = LatentPair {
            f1: tape.constant(flat(&y1)),
            f2: tape.constant(flat(&y2)),
        };
        let v = feat_match(&mut tape, fx, fy).unwrap();
        close(tape.value(v).item().unwrap(), want, &format!("instance {i}"));
    }
}

pub fn lsgan_matches_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for i in 0..INSTANCES {
        let b = rng.gen_range(1..=16);
        let real: Vec<f64> = (0..b).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let fake: Vec<f64> = (0..b).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let mut d = 0.0;
        let mut g = 0.0;
        for k in 0..b {
            d += 0.5 * (real[k] - 1.0).powi(2) / b as f64;
            d += 0.5 * fake[k].powi(2) / b as f64;
            g += 0.5 * (fake[k] - 1.0).powi(2) / b as f64;
        }
        let mut tape = Tape::<f64>::new();
        let r = tape.constant(Tensor::from_f64(&[b, 1], &real).unwrap());
        let f = tape.constant(Tensor::from_f64(&[b, 1], &fake).unwrap());
        let (gv, dv) = lsgan_losses(&mut tape, r, f).unwrap();
        close(tape.value(gv).item().unwrap(), g, &format!("instance {i} generator"));
        close(tape.value(dv).item().unwrap(), d, &format!("instance {i} critic"));
    }
}

pub fn fps_is_greedy_maximin() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for i in 0..INSTANCES {
        let n = rng.gen_range(1..=64);
        let c = cloud(&mut rng, n);
        let k = rng.gen_range(1..=n);
        let start = rng.gen_range(0..n);
        let picked = fps(&c, k, start).unwrap();
        assert_eq!(picked.len(), k);
        assert_eq!(picked[0], start);
        for step in 1..k {
            let chosen = &picked[..step];
            let gap = |p: usize| {
                chosen
                    .iter()
                    .map(|&q| dist2(&c.points[p], &c.points[q]))
                    .fold(f64::INFINITY, f64::min)
            };
            let best = (0..n).filter(|p| !chosen.contains(p)).map(gap).fold(f64::NEG_INFINITY, f64::max);
            let got = gap(picked[step]);
            assert!(!chosen.contains(&picked[step]), "instance {i}: repeated index");
            assert!(got >= best - 1e-12, "instance {i} step {step}: gap {got} below maximum {best}");
        }
    }
}

pub const ALL: &[(&str, fn())] = &[
    ("chamfer_matches_loops", chamfer_matches_loops),
    ("batched_chamfer_on_tape_matches_loops", batched_chamfer_on_tape_matches_loops),
    ("fidelity_matches_loops", fidelity_matches_loops),
    ("mmd_matches_loops", mmd_matches_loops),
    ("feat_match_matches_loops", feat_match_matches_loops),
    ("lsgan_matches_loops", lsgan_matches_loops),
    ("fps_is_greedy_maximin", fps_is_greedy_maximin),
];
