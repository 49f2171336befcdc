//! Finite-difference oracles for every differentiable op: central
//! differences at eps = 1e-5 must match reverse-mode gradients within
//! 1e-4 relative error across 10 seeds.

mod support;

use rand::Rng;
use support::gradcheck;
use vqcd_core::rng::substream;

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn randv(rng: &mut vqcd_core::rng::Prng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-scale..scale)).collect()
}

#[test]
fn dense_matches_finite_differences() {
    for seed in 0..10u64 {
        let mut rng = substream(seed, &[1]);
        let (b, i, o) = (3usize, 4usize, 5usize);
        let x = randv(&mut rng, b * i, 1.0);
        let w = randv(&mut rng, i * o, 1.0);
        let bias = randv(&mut rng, o, 0.5);
        gradcheck(&[x, w, bias], EPS, TOL, |g, vars| {
            let x = g.view(vars[0], &[3, 4]);
            let w = g.view(vars[1], &[4, 5]);
            let y = g.dense(x, w, Some(vars[2])).unwrap();
            g.sum(y)
        });
    }
}

#[test]
fn conv1d_matches_finite_differences() {
    for seed in 0..10u64 {
        let mut rng = substream(seed, &[2]);
        let (b, ci, co, t, k) = (2usize, 3usize, 4usize, 8usize, 3usize);
        let x = randv(&mut rng, b * ci * t, 1.0);
        let w = randv(&mut rng, co * ci * k, 1.0);
        let bias = randv(&mut rng, co, 0.5);
        for stride in [1usize, 2] {
            gradcheck(&[x.clone(), w.clone(), bias.clone()], EPS, TOL, |g, vars| {
                let x = g.view(vars[0], &[2, 3, 8]);
                let w = g.view(vars[1], &[4, 3, 3]);
                let y = g.conv1d(x, w, Some(vars[2]), stride).unwrap();
                let (sh, n) = (g.shape(y).to_vec(), g.value(y).len());
                let t = g.input(&sh, vec![0.3; n]);
                g.sq_diff_sum(y, t).unwrap()
            });
        }
    }
}

#[test]
fn activations_match_finite_differences() {
    for seed in 0..10u64 {
        let mut rng = substream(seed, &[3]);
        let x = randv(&mut rng, 24, 2.0);
        gradcheck(&[x.clone()], EPS, TOL, |g, vars| {
            let y = g.mish(vars[0]);
            g.sum(y)
        });
        gradcheck(&[x], EPS, TOL, |g, vars| {
            let y = g.silu(vars[0]);
            g.sum(y)
        });
    }
}

#[test]
fn group_norm_matches_finite_differences() {
    for seed in 0..10u64 {
        let mut rng = substream(seed, &[4]);
        let (b, c, t) = (2usize, 6usize, 4usize);
        let x = randv(&mut rng, b * c * t, 1.5);
        let gamma = randv(&mut rng, c, 1.0);
        let beta = randv(&mut rng, c, 0.5);
        gradcheck(&[x, gamma, beta], EPS, TOL, |g, vars| {
            let x = g.view(vars[0], &[2, 6, 4]);
            let y = g.group_norm(x, vars[1], vars[2], 3, 1e-5).unwrap();
            let target = g.input(&[2, 6, 4], vec![0.1; 48]);
            g.sq_diff_sum(y, target).unwrap()
        });
    }
}

#[test]
fn composite_chain_matches_finite_differences() {
    // dense -> mish -> dense, the quoted composite case.
    for seed in 0..10u64 {
        let mut rng = substream(seed, &[5]);
        let x = randv(&mut rng, 2 * 3, 1.0);
        let w1 = randv(&mut rng, 3 * 4, 1.0);
        let b1 = randv(&mut rng, 4, 0.3);
        let w2 = randv(&mut rng, 4 * 2, 1.0);
        let b2 = randv(&mut rng, 2, 0.3);
        gradcheck(&[x, w1, b1, w2, b2], EPS, TOL, |g, vars| {
            let x = g.view(vars[0], &[2, 3]);
            let w1 = g.view(vars[1], &[3, 4]);
            let w2 = g.view(vars[3], &[4, 2]);
            let h = g.dense(x, w1, Some(vars[2])).unwrap();
            let h = g.mish(h);
            let y = g.dense(h, w2, Some(vars[4])).unwrap();
            g.sum(y)
        });
    }
}

#[test]
fn unet_glue_ops_match_finite_differences() {
    for seed in 0..10u64 {
        let mut rng = substream(seed, &[6]);
        let x = randv(&mut rng, 2 * 4 * 4, 1.0);
        let e = randv(&mut rng, 2 * 4, 1.0);
        gradcheck(&[x.clone(), e], EPS, TOL, |g, vars| {
            let x = g.view(vars[0], &[2, 4, 4]);
            let e = g.view(vars[1], &[2, 4]);
            let y = g.add_channel(x, e).unwrap();
            let up = g.upsample2(y).unwrap();
            let c = g.concat_channel(up, up).unwrap();
            g.mean(c)
        });
        let table = randv(&mut rng, 6 * 2, 1.0);
        gradcheck(&[table], EPS, TOL, |g, vars| {
            let t = g.view(vars[0], &[6, 2]);
            let rows = g.gather_rows(t, vec![0, 3, 3, 5]).unwrap();
            let target = g.input(&[4, 2], vec![0.25; 8]);
            g.sq_diff_mean(rows, target).unwrap()
        });
    }
}
