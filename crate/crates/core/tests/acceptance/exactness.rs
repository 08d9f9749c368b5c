//! Exact properties: positional codes, standardization, the confidence
//! quantile, frame-order equivariance and sprinkle removal.

use mvseg_core::decoder::{decode_parts, AttentionScope};
use mvseg_core::geometry::{
    compute_stats, confidence_threshold, positional_embedding_3d, FourierBasis, Polarity, Prompt,
};
use mvseg_core::grid::Grid;
use mvseg_core::model::{Model, ModelConfig, SceneContext};
use mvseg_core::postprocess::{postprocess, MIN_AREA_FRACTION};
use mvseg_core::rng;
use mvseg_core::scenegen::{corrupt_pointmap, generate_scene, SceneGenConfig};
use mvseg_core::tape::Mat;
use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::experiments::Lab;
use crate::Checks;

fn cloud(r: &mut rng::Rng, n: usize) -> Vec<[f32; 3]> {
    (0..n)
        .map(|_| {
            // Multiples of 1/256 in [-4, 4): exact in f32 under the
            // dyadic transforms below.
            [0, 1, 2].map(|_| r.random_range(-1024i32..1024) as f32 / 256.0)
        })
        .collect()
}

pub fn embedding_exactness(_: &mut Lab, c: &mut Checks) {
    let basis = FourierBasis::gaussian(3, 64, 0x5eed);
    let mut r = rng::rng(17);
    let pts = cloud(&mut r, 500);
    let stats = compute_stats([pts.as_slice()]).unwrap();
    let at_mean = positional_embedding_3d(stats.mean, &stats, &basis);
    let zero_one = at_mean[..64].iter().all(|v| v.to_bits() == 0.0f64.to_bits())
        && at_mean[64..].iter().all(|v| v.to_bits() == 1.0f64.to_bits());
    c.that(zero_one, "PE at the standardized origin is (0..0, 1..1) bit-exactly");

    let mut worst_mu = 0.0f64;
    let mut worst_sigma = 0.0f64;
    for _ in 0..20 {
        let n = r.random_range(50..2000);
        let scale = [0, 1, 2].map(|_| r.random_range(0.01..50.0f32));
        let shift = [0, 1, 2].map(|_| r.random_range(-100.0..100.0f32));
        let raw: Vec<[f32; 3]> = (0..n)
            .map(|_| [0, 1, 2].map(|a| shift[a] + scale[a] * r.random_range(-1.0..1.0f32)))
            .collect();
        let s = compute_stats([raw.as_slice()]).unwrap();
        let std: Vec<[f32; 3]> = raw
            .iter()
            .map(|p| s.standardize(p.map(f64::from)).map(|v| v as f32))
            .collect();
        let refit = compute_stats([std.as_slice()]).unwrap();
        for a in 0..3 {
            worst_mu = worst_mu.max(refit.mean[a].abs());
            worst_sigma = worst_sigma.max((refit.std[a] - 1.0).abs());
        }
    }
    c.that(
        worst_mu <= 1e-5 && worst_sigma <= 1e-5,
        format!("re-fit after standardizing: |mu| <= {worst_mu:.1e}, |sigma-1| <= {worst_sigma:.1e}"),
    );

    let mut worst = 0.0f64;
    for _ in 0..50 {
        let s = 2f32.powi(r.random_range(-3..=3));
        let t = [0, 1, 2].map(|_| r.random_range(-128i32..128) as f32 / 16.0);
        let moved: Vec<[f32; 3]> = pts.iter().map(|p| [0, 1, 2].map(|a| s * p[a] + t[a])).collect();
        let s2 = compute_stats([moved.as_slice()]).unwrap();
        for (p, q) in pts.iter().zip(&moved).step_by(7) {
            let a = positional_embedding_3d(p.map(f64::from), &stats, &basis);
            let b = positional_embedding_3d(q.map(f64::from), &s2, &basis);
            worst = worst.max(a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max));
        }
    }
    c.that(worst <= 1e-5, format!("translation + uniform scale invariance, max PE change {worst:.1e}"));

    let mut mismatches = 0;
    for i in 0..1000 {
        let n = r.random_range(1..400);
        let ties = i % 2 == 0;
        let conf: Vec<f32> = (0..n)
            .map(|_| if ties { r.random_range(0..6) as f32 / 5.0 } else { r.random::<f32>() })
            .collect();
        let split = confidence_threshold(&conf, 0.15).unwrap();
        let k = (0.15 * n as f64).round() as usize;
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| conf[a].total_cmp(&conf[b]).then(a.cmp(&b)));
        let mut want = vec![false; n];
        for &j in &order[..k] {
            want[j] = true;
        }
        let threshold_ok = if k == 0 {
            split.threshold == f64::NEG_INFINITY
        } else {
            split.threshold == conf[order[k - 1]] as f64
        };
        if split.low != want || split.count() != k || !threshold_ok {
            mismatches += 1;
        }
    }
    c.that(mismatches == 0, format!("quantile rule vs full sort on 1000 instances, {mismatches} mismatches"));
}

fn bits_equal(a: &Mat, b: &Mat) -> bool {
    a.dim() == b.dim() && a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits())
}

pub fn equivariance(_: &mut Lab, c: &mut Checks) {
    let model = Model::new(ModelConfig::default(), 3).unwrap();
    let clean = generate_scene(&SceneGenConfig { views: 8, ..Default::default() }, 5).unwrap();
    let bundle = corrupt_pointmap(&clean, 0.05, 0.15, 6).unwrap();
    // Frozen stats: geometry, confidence flags and point embeddings are
    // computed once over all views and then only sliced.
    let ctx = SceneContext::new(&model, &bundle.views).unwrap();
    let grid = ctx.points.grid;
    let dec = &model.config.decoder;
    let mut r = rng::rng(9);
    let prompts: Vec<Prompt> = (0..6)
        .map(|i| {
            let pol = if i < 4 { Polarity::Positive } else { Polarity::Negative };
            Prompt::new(r.random_range(0..8), r.random_range(0..32), r.random_range(0..32), pol)
        })
        .collect();
    let emb = model.prompt_embeddings(&ctx.geometry, &prompts).unwrap();
    let all = decode_parts(grid, &ctx.points.views, &emb, dec, &model.params).unwrap();

    let mut perm_ok = true;
    for _ in 0..5 {
        let mut order: Vec<usize> = (0..8).collect();
        order.shuffle(&mut r);
        let views: Vec<Mat> = order.iter().map(|&i| ctx.points.views[i].clone()).collect();
        let out = decode_parts(grid, &views, &emb, dec, &model.params).unwrap();
        perm_ok &= order.iter().enumerate().all(|(pos, &src)| bits_equal(&out[pos], &all[src]));
    }
    c.that(perm_ok, "view permutation permutes decoder outputs bit-exactly (5 random orders)");

    // The full pipeline recomputes stats and flags from the permuted scene.
    let mut order: Vec<usize> = (0..8).collect();
    order.shuffle(&mut r);
    let moved = bundle.permuted(&order);
    let pos_of = |v: usize| order.iter().position(|&o| o == v).unwrap();
    let remapped: Vec<Prompt> = prompts
        .iter()
        .map(|p| Prompt { view: pos_of(p.view as usize) as i64, ..*p })
        .collect();
    let ctx2 = SceneContext::new(&model, &moved.views).unwrap();
    let a = model.predict_logits(&ctx, &prompts).unwrap();
    let b = model.predict_logits(&ctx2, &remapped).unwrap();
    let e2e = (0..8).all(|pos| bits_equal(&b[pos], &a[order[pos]]));
    c.that(e2e, "end-to-end permutation with recomputed stats is bit-exact");

    let mut subset_ok = true;
    let mut trials = 0;
    for i in 0..8 {
        for _ in 0..3 {
            let mut others: Vec<usize> = (0..8).filter(|&j| j != i).collect();
            others.shuffle(&mut r);
            let mut chosen: Vec<usize> = others[..r.random_range(0..=7)].to_vec();
            chosen.insert(r.random_range(0..=chosen.len()), i);
            let views: Vec<Mat> = chosen.iter().map(|&j| ctx.points.views[j].clone()).collect();
            let out = decode_parts(grid, &views, &emb, dec, &model.params).unwrap();
            let at = chosen.iter().position(|&j| j == i).unwrap();
            subset_ok &= bits_equal(&out[at], &all[i]);
            trials += 1;
        }
    }
    c.that(subset_ok, format!("single-view output identical under {trials} view supersets"));

    let mut worst = 0.0f64;
    for _ in 0..10 {
        let mut shuffled = prompts.clone();
        shuffled.shuffle(&mut r);
        let emb2 = model.prompt_embeddings(&ctx.geometry, &shuffled).unwrap();
        let out = decode_parts(grid, &ctx.points.views, &emb2, dec, &model.params).unwrap();
        for (x, y) in out.iter().zip(&all) {
            worst = worst.max((x - y).iter().map(|d| d.abs()).fold(0.0, f64::max));
        }
    }
    c.that(worst <= 1e-6, format!("prompt permutation changes logits by at most {worst:.1e}"));

    let mut full = dec.clone();
    full.attention_scope = AttentionScope::FullView;
    let fv = decode_parts(grid, &ctx.points.views, &emb, &full, &model.params).unwrap();
    c.note(format!("full_view scope returns {} views of {} cells", fv.len(), fv[0].nrows()));
}

fn paint(mask: &mut Grid<u8>, cells: &[(usize, usize)]) {
    for &(r, c) in cells {
        *mask.get_mut(r, c) = 1;
    }
}

pub fn sprinkle_removal(_: &mut Lab, c: &mut Checks) {
    let cutoff = MIN_AREA_FRACTION * 64.0 * 64.0;
    c.that((cutoff - 4.096).abs() < 1e-12, format!("cutoff on 64x64 is {cutoff}"));

    let four = [(10, 10), (10, 11), (11, 10), (11, 11)];
    let five = [(40, 40), (39, 40), (41, 40), (40, 39), (40, 41)];
    let diagonal_five = [(20, 50), (21, 51), (22, 52), (23, 53), (24, 54)];
    let mut mask = Grid::filled(64, 64, 0u8);
    paint(&mut mask, &four);
    paint(&mut mask, &five);
    paint(&mut mask, &diagonal_five);
    let out = postprocess(&mask, MIN_AREA_FRACTION);
    c.that(four.iter().all(|&(r, cc)| *out.get(r, cc) == 0), "4-pixel component removed");
    c.that(five.iter().all(|&(r, cc)| *out.get(r, cc) == 1), "5-pixel component kept");
    c.that(
        diagonal_five.iter().all(|&(r, cc)| *out.get(r, cc) == 1),
        "diagonally connected 5-pixel component kept",
    );
    c.that(out.count_ones() == 10, format!("{} pixels survive", out.count_ones()));

    let empty = Grid::filled(64, 64, 0u8);
    c.that(postprocess(&empty, MIN_AREA_FRACTION) == empty, "empty mask unchanged");
    let half = Grid::from_fn(64, 64, |r, _| (r < 32) as u8);
    c.that(postprocess(&half, MIN_AREA_FRACTION) == half, "half-covering component unchanged");
}
