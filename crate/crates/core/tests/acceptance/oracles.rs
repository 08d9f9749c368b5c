//! Loss and decoder arithmetic against independent straight-line oracles.

use mvseg_core::decoder::{self, DecoderConfig};
use mvseg_core::geometry::EmbeddingSet;
use mvseg_core::loss::{bce, dice, dice_loss, focal, focal_loss};
use mvseg_core::params::{Fwd, ParamStore};
use mvseg_core::rng;
use mvseg_core::tape::Mat;
use rand::Rng as _;

use crate::experiments::Lab;
use crate::Checks;

const FD_EPS: f64 = 1e-6;
const FD_REL: f64 = 1e-4;

fn rel_close(a: f64, b: f64) -> bool {
    (a - b).abs() <= FD_REL * a.abs().max(b.abs()) + 1e-10
}

/// Central differences of a scalar function of a logit vector.
fn fd_grad(f: impl Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let mut plus = x.to_vec();
            plus[i] += FD_EPS;
            let mut minus = x.to_vec();
            minus[i] -= FD_EPS;
            (f(&plus) - f(&minus)) / (2.0 * FD_EPS)
        })
        .collect()
}

/// Dice loss of hard predictions from counts alone.
fn dice_by_counting(pred: &[u8], target: &[u8]) -> f64 {
    let inter = pred.iter().zip(target).filter(|(p, t)| **p == 1 && **t == 1).count() as f64;
    let p = pred.iter().filter(|&&v| v == 1).count() as f64;
    let t = target.iter().filter(|&&v| v == 1).count() as f64;
    1.0 - (2.0 * inter + 1.0) / (p + t + 1.0)
}

pub fn loss_oracles(_: &mut Lab, c: &mut Checks) {
    let expected = 0.9 * 0.5f64.powf(1.5) * 2f64.ln();
    let got = focal_loss(&[0.0], &[1], 0.9, 1.5).unwrap();
    c.that((got - expected).abs() <= 1e-5, format!("focal single pixel {got:.7} vs 0.9*0.5^1.5*ln2 = {expected:.7}"));

    // Saturated logits make probabilities exactly 0 or 1 up to 1e-17.
    let cases: [(&[u8], &[u8]); 5] = [
        (&[1, 1, 0, 0, 0, 0, 0, 0, 0], &[1, 1, 0, 0, 0, 0, 0, 0, 0]),
        (&[1, 1, 1, 0, 0, 0, 0, 0, 0], &[0, 0, 0, 1, 1, 0, 0, 0, 0]),
        (&[1, 1, 1, 1, 0, 0, 0, 0, 0], &[0, 0, 1, 1, 1, 1, 0, 0, 0]),
        (&[0; 9], &[0; 9]),
        (&[1; 9], &[0, 1, 0, 1, 0, 1, 0, 1, 0]),
    ];
    let mut worst = 0.0f64;
    for (pred, target) in cases {
        let logits: Vec<f64> = pred.iter().map(|&p| if p == 1 { 40.0 } else { -40.0 }).collect();
        let got = dice_loss(&logits, target).unwrap();
        worst = worst.max((got - dice_by_counting(pred, target)).abs());
    }
    c.that(worst <= 1e-9, format!("dice counting cases max error {worst:.1e}"));

    let mut r = rng::rng(41);
    let mut worst_rel = 0.0f64;
    let mut ok = true;
    for _ in 0..25 {
        let logits: Vec<f64> = (0..9).map(|_| r.random_range(-3.0..3.0)).collect();
        let target: Vec<u8> = (0..9).map(|_| r.random_bool(0.4) as u8).collect();
        type LossFn = fn(&[f64], &[u8]) -> (f64, Vec<f64>);
        let losses: [LossFn; 3] = [
            |l, t| focal(l, t, 0.9, 1.5).unwrap(),
            |l, t| dice(l, t).unwrap(),
            |l, t| bce(l, t).unwrap(),
        ];
        for loss in losses {
            let (_, analytic) = loss(&logits, &target);
            let numeric = fd_grad(|x| loss(x, &target).0, &logits);
            for (a, n) in analytic.iter().zip(&numeric) {
                ok &= rel_close(*a, *n);
                worst_rel = worst_rel.max((a - n).abs() / a.abs().max(n.abs()).max(1e-12));
            }
        }
    }
    c.that(ok, format!("focal/dice/bce gradients vs central differences on 3x3 grids, worst rel err {worst_rel:.1e}"));
}

// Straight-line decoder over nested vectors, written from the block
// description rather than from the library.
type M = Vec<Vec<f64>>;

fn rows(m: &Mat) -> M {
    (0..m.nrows()).map(|i| (0..m.ncols()).map(|j| m[[i, j]]).collect()).collect()
}

fn linear(x: &M, s: &ParamStore, name: &str) -> M {
    let w = s.get(&format!("{name}.w"));
    let b = s.get(&format!("{name}.b"));
    x.iter()
        .map(|row| {
            (0..w.ncols())
                .map(|j| {
                    let mut acc = b[[0, j]];
                    for (i, xi) in row.iter().enumerate() {
                        acc += xi * w[[i, j]];
                    }
                    acc
                })
                .collect()
        })
        .collect()
}

fn norm(x: &M, s: &ParamStore, name: &str) -> M {
    let g = s.get(&format!("{name}.g"));
    let b = s.get(&format!("{name}.b"));
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mu = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
            let inv = 1.0 / (var + 1e-5).sqrt();
            row.iter().enumerate().map(|(j, v)| (v - mu) * inv * g[[0, j]] + b[[0, j]]).collect()
        })
        .collect()
}

fn plus(a: &M, b: &M) -> M {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

fn softmax_attention(q: &M, k: &M, v: &M, heads: usize) -> M {
    let d = q[0].len();
    let dh = d / heads;
    let mut out = vec![vec![0.0; d]; q.len()];
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        for (i, qi) in q.iter().enumerate() {
            let logits: Vec<f64> = k
                .iter()
                .map(|kj| cols.clone().map(|c| qi[c] * kj[c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let top = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
            let z: f64 = w.iter().sum();
            for c in cols.clone() {
                out[i][c] = w.iter().zip(v).map(|(wj, vj)| wj * vj[c]).sum::<f64>() / z;
            }
        }
    }
    out
}

fn attention(s: &ParamStore, name: &str, q: &M, k: &M, v: &M, heads: usize) -> M {
    let a = softmax_attention(
        &linear(q, s, &format!("{name}.q")),
        &linear(k, s, &format!("{name}.k")),
        &linear(v, s, &format!("{name}.v")),
        heads,
    );
    linear(&a, s, &format!("{name}.o"))
}

fn relu(x: &M) -> M {
    x.iter().map(|r| r.iter().map(|v| v.max(0.0)).collect()).collect()
}

fn brute_force_logits(s: &ParamStore, cfg: &DecoderConfig, points: &Mat, prompts: &Mat) -> Vec<f64> {
    let h = cfg.num_heads;
    let mut tokens0 = rows(prompts);
    tokens0.extend(rows(s.get("decoder.mask_token")));
    let points0 = rows(points);
    let mut t = tokens0.clone();
    let mut x = points0.clone();
    for b in 0..cfg.num_blocks {
        let n = |part: &str| format!("decoder.block{b}.{part}");
        let tn = norm(&t, s, &n("ln_sa"));
        let qk = plus(&tn, &tokens0);
        t = plus(&t, &attention(s, &n("sa"), &qk, &qk, &tn, h));

        let tn = norm(&t, s, &n("ln_t2p_q"));
        let xn = norm(&x, s, &n("ln_t2p_kv"));
        t = plus(&t, &attention(s, &n("t2p"), &plus(&tn, &tokens0), &plus(&xn, &points0), &xn, h));

        let tn = norm(&t, s, &n("ln_mlp"));
        let hidden = relu(&linear(&tn, s, &n("mlp.fc1")));
        t = plus(&t, &linear(&hidden, s, &n("mlp.fc2")));

        let xn = norm(&x, s, &n("ln_p2t_q"));
        let tn = norm(&t, s, &n("ln_p2t_kv"));
        x = plus(&x, &attention(s, &n("p2t"), &plus(&xn, &points0), &plus(&tn, &tokens0), &tn, h));
    }
    let xf = norm(&x, s, "decoder.ln_points");
    let tf = norm(&t, s, "decoder.ln_tokens");
    let mask = vec![tf[tf.len() - 1].clone()];
    let r = linear(&relu(&linear(&mask, s, "decoder.readout.fc1")), s, "decoder.readout.fc2");
    xf.iter().map(|p| p.iter().zip(&r[0]).map(|(a, b)| a * b).sum()).collect()
}

fn store_for(cfg: &DecoderConfig, seed: u64) -> ParamStore {
    let mut s = ParamStore::new();
    decoder::init(&mut s, &mut rng::rng(seed), cfg);
    s
}

pub fn decoder_oracle(_: &mut Lab, c: &mut Checks) {
    let cfg = DecoderConfig {
        dim: 8,
        num_blocks: 1,
        num_heads: 2,
        mlp_ratio: 2,
        ..Default::default()
    };
    let mut store = store_for(&cfg, 1);
    // Hand-chosen small weights: a smooth pattern per tensor, no zeros.
    let names: Vec<String> = store.names().to_vec();
    for (k, name) in names.iter().enumerate() {
        let m = store.get_mut(name);
        let cols = m.ncols();
        for ((i, j), x) in m.indexed_iter_mut() {
            *x = 0.25 * ((i * cols + j) as f64 * 0.61 + k as f64 * 0.83).cos();
        }
    }
    let points = Mat::from_shape_fn((4, 8), |(i, j)| 0.5 * ((i * 8 + j) as f64 * 0.29 + 0.3).sin());
    let prompt = Mat::from_shape_fn((1, 8), |(_, j)| 0.4 * (j as f64 * 1.1 - 0.5).cos());
    let set = EmbeddingSet {
        grid: (2, 2),
        views: vec![points.clone()],
        prompts: prompt.clone(),
    };
    let got = decoder::decode_logits(&set, &cfg, &store).unwrap();
    let want = brute_force_logits(&store, &cfg, &points, &prompt);
    let err = (0..4).map(|i| (got[0][[i, 0]] - want[i]).abs()).fold(0.0, f64::max);
    c.that(err <= 1e-6, format!("one block on 2x2 grid vs brute force, max error {err:.1e}"));

    // d(sum of logits)/d(every parameter), two blocks, two prompts.
    let cfg = DecoderConfig {
        num_blocks: 2,
        ..cfg
    };
    let store = store_for(&cfg, 7);
    let mut r = rng::rng(8);
    let points = Mat::from_shape_fn((4, 8), |_| r.random_range(-1.0..1.0));
    let prompts = Mat::from_shape_fn((2, 8), |_| r.random_range(-1.0..1.0));
    let mut fwd = Fwd::training(&store);
    let x = fwd.g.constant_ref(&points);
    let t = fwd.g.constant_ref(&prompts);
    let out = decoder::forward(&mut fwd, x, t, &cfg);
    let mut grads = fwd.g.backward(vec![(out, Mat::ones((4, 1)))]);
    let analytic = fwd.param_grads(&mut grads);
    let sum = |s: &ParamStore| brute_force_logits(s, &cfg, &points, &prompts).iter().sum::<f64>();
    let (mut checked, mut bad, mut worst) = (0, 0, 0.0f64);
    for (id, name) in store.names().iter().enumerate() {
        let Some(g) = analytic[id].as_ref() else {
            bad += 1;
            continue;
        };
        for ((i, j), &a) in g.indexed_iter() {
            let mut up = store.clone();
            up.get_mut(name)[[i, j]] += FD_EPS;
            let mut down = store.clone();
            down.get_mut(name)[[i, j]] -= FD_EPS;
            let fd = (sum(&up) - sum(&down)) / (2.0 * FD_EPS);
            checked += 1;
            if !rel_close(a, fd) {
                bad += 1;
            }
            if a.abs().max(fd.abs()) > 1e-6 {
                worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()));
            }
        }
    }
    c.that(
        bad == 0,
        format!("{checked} parameter gradients vs central differences, {bad} off, worst rel err {worst:.1e} where |g| > 1e-6"),
    );
}
