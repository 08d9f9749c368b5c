//! Embedding mathematics: global standardization of pointmaps, sinusoidal
//! Fourier-feature positional embeddings, confidence quantile flags, prompt
//! lifting through the pointmap, and point-embedding composition.

use std::f64::consts::TAU;

use ndarray::Array2;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scenegen::View;
use crate::tape::Mat;
use crate::rng;

/// Lower clamp applied to each per-axis standard deviation.
pub const STD_EPS: f64 = 1e-6;
/// Default share of points flagged as low confidence.
pub const LOW_CONFIDENCE_FRACTION: f64 = 0.15;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StandardizationStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl StandardizationStats {
    /// Stats that leave points unchanged (used when standardization is off).
    pub const IDENTITY: StandardizationStats = StandardizationStats {
        mean: [0.0; 3],
        std: [1.0; 3],
    };

    #[inline]
    pub fn standardize(&self, p: [f64; 3]) -> [f64; 3] {
        [
            (p[0] - self.mean[0]) / self.std[0],
            (p[1] - self.mean[1]) / self.std[1],
            (p[2] - self.mean[2]) / self.std[2],
        ]
    }
}

/// Per-axis mean and population standard deviation over every point of
/// every pointmap. Sums run over sorted values, so the result does not
/// depend on the order of the points.
pub fn compute_stats<'a, I>(points: I) -> Result<StandardizationStats>
where
    I: IntoIterator<Item = &'a [[f32; 3]]>,
{
    let mut axes: [Vec<f64>; 3] = Default::default();
    for chunk in points {
        for p in chunk {
            for a in 0..3 {
                axes[a].push(p[a] as f64);
            }
        }
    }
    let n = axes[0].len();
    if n == 0 {
        return Err(Error::Input("no points to standardize".into()));
    }
    let sorted_sum = |v: &mut Vec<f64>| {
        v.sort_unstable_by(f64::total_cmp);
        v.iter().sum::<f64>()
    };
    let mut mean = [0.0; 3];
    let mut std = [0.0; 3];
    for a in 0..3 {
        mean[a] = sorted_sum(&mut axes[a]) / n as f64;
        let mut sq: Vec<f64> = axes[a].iter().map(|x| (x - mean[a]).powi(2)).collect();
        std[a] = (sorted_sum(&mut sq) / n as f64).sqrt().max(STD_EPS);
    }
    Ok(StandardizationStats { mean, std })
}

/// Stats over all views of a scene.
pub fn scene_stats(views: &[View]) -> Result<StandardizationStats> {
    compute_stats(views.iter().map(|v| v.pointmap.data()))
}

/// Frozen random Fourier basis: an `input_dim x k` matrix of standard normal
/// entries, stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FourierBasis {
    input_dim: usize,
    k: usize,
    matrix: Vec<f64>,
    seed: u64,
}

impl FourierBasis {
    /// Entries are drawn as f32 so the basis survives checkpointing bit-exactly.
    pub fn gaussian(input_dim: usize, k: usize, seed: u64) -> Self {
        let mut r = rng::rng(seed);
        let matrix = (0..input_dim * k)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut r);
                z as f32 as f64
            })
            .collect();
        Self {
            input_dim,
            k,
            matrix,
            seed,
        }
    }

    pub fn from_matrix(input_dim: usize, k: usize, matrix: Vec<f64>, seed: u64) -> Result<Self> {
        if matrix.len() != input_dim * k || k == 0 {
            return Err(Error::Shape(format!(
                "basis needs {input_dim}x{k} entries, got {}",
                matrix.len()
            )));
        }
        Ok(Self {
            input_dim,
            k,
            matrix,
            seed,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }
    pub fn k(&self) -> usize {
        self.k
    }
    /// Output dimension `2k`.
    pub fn dim(&self) -> usize {
        2 * self.k
    }
    pub fn seed(&self) -> u64 {
        self.seed
    }
    pub fn matrix(&self) -> &[f64] {
        &self.matrix
    }

    /// `[sin(2π bᵀx), cos(2π bᵀx)]` written into `out` (length `2k`).
    pub fn embed_into(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.input_dim);
        debug_assert_eq!(out.len(), 2 * self.k);
        for j in 0..self.k {
            let mut proj = 0.0;
            for (a, xa) in x.iter().enumerate() {
                proj += self.matrix[a * self.k + j] * xa;
            }
            let angle = TAU * proj;
            out[j] = angle.sin();
            out[self.k + j] = angle.cos();
        }
    }

    pub fn embed(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; 2 * self.k];
        self.embed_into(x, &mut out);
        out
    }
}

/// 3D positional embedding of a world point under shared stats.
pub fn positional_embedding_3d(
    p: [f64; 3],
    stats: &StandardizationStats,
    basis: &FourierBasis,
) -> Vec<f64> {
    basis.embed(&stats.standardize(p))
}

/// 2D embedding of continuous pixel coordinates normalized by image size.
pub fn positional_embedding_2d_at(row: f64, col: f64, h: usize, w: usize, basis2: &FourierBasis) -> Vec<f64> {
    basis2.embed(&[row / h as f64, col / w as f64])
}

/// 2D positional embedding of an integer pixel; identical for the same
/// pixel in every view.
pub fn positional_embedding_2d(
    pixel: (i64, i64),
    h: usize,
    w: usize,
    basis2: &FourierBasis,
) -> Result<Vec<f64>> {
    let (r, c) = pixel;
    if r < 0 || c < 0 || r as usize >= h || c as usize >= w {
        return Err(Error::Input(format!("pixel ({r}, {c}) outside {h}x{w}")));
    }
    Ok(positional_embedding_2d_at(r as f64, c as f64, h, w, basis2))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConfidenceSplit {
    /// k-th smallest confidence, or -inf when nothing is flagged.
    pub threshold: f64,
    pub low: Vec<bool>,
}

impl ConfidenceSplit {
    pub fn count(&self) -> usize {
        self.low.iter().filter(|&&l| l).count()
    }
}

/// Flag exactly `round(fraction * n)` entries: the smallest confidences,
/// ties broken by ascending position.
pub fn confidence_threshold(confidences: &[f32], fraction: f64) -> Result<ConfidenceSplit> {
    if confidences.is_empty() {
        return Err(Error::Input("no confidences".into()));
    }
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::Input(format!("fraction {fraction} outside [0, 1)")));
    }
    let n = confidences.len();
    let k = (fraction * n as f64).round() as usize;
    let mut low = vec![false; n];
    if k == 0 {
        return Ok(ConfidenceSplit {
            threshold: f64::NEG_INFINITY,
            low,
        });
    }
    let mut order: Vec<usize> = (0..n).collect();
    let key = |&i: &usize, &j: &usize| confidences[i].total_cmp(&confidences[j]).then(i.cmp(&j));
    order.select_nth_unstable_by(k - 1, key);
    for &i in &order[..k] {
        low[i] = true;
    }
    Ok(ConfidenceSplit {
        threshold: confidences[order[k - 1]] as f64,
        low,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Positive,
    Negative,
}

/// A click on one view. Coordinates are signed so out-of-range input can be
/// reported instead of rejected at parse time.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Prompt {
    pub view: i64,
    pub row: i64,
    pub col: i64,
    pub polarity: Polarity,
}

impl Prompt {
    pub fn new(view: usize, row: usize, col: usize, polarity: Polarity) -> Self {
        Self {
            view: view as i64,
            row: row as i64,
            col: col as i64,
            polarity,
        }
    }

    /// `(view, row, col)` if the prompt addresses an existing pixel.
    pub fn locate(&self, n_views: usize, h: usize, w: usize) -> Option<(usize, usize, usize)> {
        let ok = self.view >= 0
            && (self.view as usize) < n_views
            && self.row >= 0
            && (self.row as usize) < h
            && self.col >= 0
            && (self.col as usize) < w;
        ok.then_some((self.view as usize, self.row as usize, self.col as usize))
    }
}

/// Validate prompts against the scene extent, naming the first bad one.
pub fn check_prompts(prompts: &[Prompt], n_views: usize, h: usize, w: usize) -> Result<Vec<(usize, usize, usize)>> {
    if prompts.is_empty() {
        return Err(Error::NoPrompts);
    }
    prompts
        .iter()
        .enumerate()
        .map(|(i, p)| {
            p.locate(n_views, h, w).ok_or_else(|| Error::Prompt {
                index: i,
                message: format!(
                    "pixel (view {}, row {}, col {}) outside {n_views} views of {h}x{w}",
                    p.view, p.row, p.col
                ),
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prompt3D {
    pub xyz: [f64; 3],
    pub confidence: f32,
    pub polarity: Polarity,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LearnableEmbeddings {
    pub f_pos: Vec<f64>,
    pub f_neg: Vec<f64>,
    pub f_hc: Vec<f64>,
    pub f_lc: Vec<f64>,
}

impl LearnableEmbeddings {
    pub fn zeros(dim: usize) -> Self {
        Self {
            f_pos: vec![0.0; dim],
            f_neg: vec![0.0; dim],
            f_hc: vec![0.0; dim],
            f_lc: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.f_pos.len()
    }

    fn polarity(&self, p: Polarity) -> &[f64] {
        match p {
            Polarity::Positive => &self.f_pos,
            Polarity::Negative => &self.f_neg,
        }
    }

    pub fn confidence(&self, low: bool) -> &[f64] {
        if low {
            &self.f_lc
        } else {
            &self.f_hc
        }
    }
}

/// Lift prompts through their view's pointmap and embed them:
/// `PE3D(xyz) + f_pos|f_neg + f_hc|f_lc`.
///
/// `pixel_low` is the low-confidence flag of every pixel of every view,
/// view-major then row-major.
pub fn encode_prompts(
    prompts: &[Prompt],
    views: &[View],
    stats: &StandardizationStats,
    basis: &FourierBasis,
    emb: &LearnableEmbeddings,
    pixel_low: &[bool],
) -> Result<(Mat, Vec<Prompt3D>)> {
    let first = views.first().ok_or_else(|| Error::Input("no views".into()))?;
    let (h, w) = (first.height(), first.width());
    if pixel_low.len() != views.len() * h * w {
        return Err(Error::Shape("pixel confidence flags do not cover every pixel".into()));
    }
    if emb.dim() != basis.dim() {
        return Err(Error::Shape(format!(
            "embedding dim {} vs positional dim {}",
            emb.dim(),
            basis.dim()
        )));
    }
    let located = check_prompts(prompts, views.len(), h, w)?;
    let d = basis.dim();
    let mut out = Array2::zeros((prompts.len(), d));
    let mut lifted = Vec::with_capacity(prompts.len());
    for (i, (p, &(v, r, c))) in prompts.iter().zip(&located).enumerate() {
        let pt = views[v].pointmap.get(r, c).map(f64::from);
        let low = pixel_low[v * h * w + r * w + c];
        let pe = positional_embedding_3d(pt, stats, basis);
        let pol = emb.polarity(p.polarity);
        let conf = emb.confidence(low);
        for j in 0..d {
            out[[i, j]] = pe[j] + pol[j] + conf[j];
        }
        lifted.push(Prompt3D {
            xyz: pt,
            confidence: *views[v].confidence.get(r, c),
            polarity: p.polarity,
        });
    }
    Ok((out, lifted))
}

/// Pointmap and confidence reduced to the encoder grid: points are block
/// means, confidences block minima.
#[derive(Clone, Debug, PartialEq)]
pub struct PooledGeometry {
    pub height: usize,
    pub width: usize,
    pub stride: usize,
    pub points: Vec<[f64; 3]>,
    pub confidence: Vec<f32>,
    /// Mean pixel coordinate `(row, col)` of each block.
    pub pixel_centers: Vec<(f64, f64)>,
}

pub fn grid_dims(h: usize, w: usize, stride: usize) -> (usize, usize) {
    (h.div_ceil(stride), w.div_ceil(stride))
}

pub fn pool_view(view: &View, stride: usize) -> Result<PooledGeometry> {
    if stride == 0 {
        return Err(Error::Config("stride must be positive".into()));
    }
    let (h, w) = (view.height(), view.width());
    let (gh, gw) = grid_dims(h, w, stride);
    let mut points = Vec::with_capacity(gh * gw);
    let mut confidence = Vec::with_capacity(gh * gw);
    let mut pixel_centers = Vec::with_capacity(gh * gw);
    for gr in 0..gh {
        let rows = gr * stride..((gr + 1) * stride).min(h);
        for gc in 0..gw {
            let cols = gc * stride..((gc + 1) * stride).min(w);
            let mut sum = [0.0f64; 3];
            let mut cmin = f32::INFINITY;
            let mut n = 0usize;
            for r in rows.clone() {
                for c in cols.clone() {
                    let p = view.pointmap.get(r, c);
                    for a in 0..3 {
                        sum[a] += p[a] as f64;
                    }
                    cmin = cmin.min(*view.confidence.get(r, c));
                    n += 1;
                }
            }
            points.push(sum.map(|s| s / n as f64));
            confidence.push(cmin);
            pixel_centers.push((
                (rows.start + rows.end - 1) as f64 * 0.5,
                (cols.start + cols.end - 1) as f64 * 0.5,
            ));
        }
    }
    Ok(PooledGeometry {
        height: gh,
        width: gw,
        stride,
        points,
        confidence,
        pixel_centers,
    })
}

/// 3D positional embeddings of every pooled point, one row per grid cell.
pub fn pe3d_field(pooled: &PooledGeometry, stats: &StandardizationStats, basis: &FourierBasis) -> Mat {
    let mut out = Array2::zeros((pooled.points.len(), basis.dim()));
    for (i, p) in pooled.points.iter().enumerate() {
        let row = out.row_mut(i);
        basis.embed_into(&stats.standardize(*p), row.into_slice().expect("standard layout"));
    }
    out
}

/// 2D positional embeddings of every grid cell's mean pixel coordinate.
pub fn pe2d_field(pooled: &PooledGeometry, h: usize, w: usize, basis2: &FourierBasis) -> Mat {
    let mut out = Array2::zeros((pooled.pixel_centers.len(), basis2.dim()));
    for (i, &(r, c)) in pooled.pixel_centers.iter().enumerate() {
        let row = out.row_mut(i);
        basis2.embed_into(&[r / h as f64, c / w as f64], row.into_slice().expect("standard layout"));
    }
    out
}

/// Per-view token embeddings on the encoder grid.
#[derive(Clone, Debug, PartialEq)]
pub struct PointEmbeddings {
    pub grid: (usize, usize),
    pub views: Vec<Mat>,
}

/// Everything the mask decoder consumes.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSet {
    pub grid: (usize, usize),
    pub views: Vec<Mat>,
    pub prompts: Mat,
}

impl EmbeddingSet {
    pub fn new(points: PointEmbeddings, prompts: Mat) -> Self {
        Self {
            grid: points.grid,
            views: points.views,
            prompts,
        }
    }

    pub fn permuted(&self, order: &[usize]) -> Self {
        Self {
            grid: self.grid,
            views: order.iter().map(|&i| self.views[i].clone()).collect(),
            prompts: self.prompts.clone(),
        }
    }
}

/// `image_embedding + PE3D(pooled point) + f_hc|f_lc` at every grid cell.
///
/// `cell_low` holds the low-confidence flag of every pooled cell of every
/// view, view-major.
pub fn compose_point_embeddings(
    image_embeddings: &[Mat],
    pooled: &[PooledGeometry],
    stats: &StandardizationStats,
    basis: &FourierBasis,
    emb: &LearnableEmbeddings,
    cell_low: &[bool],
) -> Result<PointEmbeddings> {
    let fields: Vec<Mat> = pooled.iter().map(|p| pe3d_field(p, stats, basis)).collect();
    compose_with_fields(image_embeddings, pooled, &fields, emb, cell_low)
}

/// Same as [`compose_point_embeddings`] with precomputed positional fields
/// (possibly 2D or all-zero for ablations).
pub fn compose_with_fields(
    image_embeddings: &[Mat],
    pooled: &[PooledGeometry],
    fields: &[Mat],
    emb: &LearnableEmbeddings,
    cell_low: &[bool],
) -> Result<PointEmbeddings> {
    let first = pooled.first().ok_or_else(|| Error::Input("no views".into()))?;
    let grid = (first.height, first.width);
    let cells = grid.0 * grid.1;
    if image_embeddings.len() != pooled.len() || fields.len() != pooled.len() {
        return Err(Error::Shape(format!(
            "{} image embeddings, {} positional fields for {} views",
            image_embeddings.len(),
            fields.len(),
            pooled.len()
        )));
    }
    if cell_low.len() != cells * pooled.len() {
        return Err(Error::Shape("cell confidence flags do not cover every cell".into()));
    }
    let d = emb.dim();
    let mut views = Vec::with_capacity(pooled.len());
    for (v, ((img, field), pg)) in image_embeddings.iter().zip(fields).zip(pooled).enumerate() {
        if (pg.height, pg.width) != grid {
            return Err(Error::Shape(format!("view {v} grid differs from view 0")));
        }
        if img.dim() != (cells, d) || field.dim() != (cells, d) {
            return Err(Error::Shape(format!(
                "view {v}: image embedding {:?}, positional {:?}, expected ({cells}, {d})",
                img.dim(),
                field.dim()
            )));
        }
        let mut out = img + field;
        for (i, mut row) in out.rows_mut().into_iter().enumerate() {
            let conf = emb.confidence(cell_low[v * cells + i]);
            for (x, c) in row.iter_mut().zip(conf) {
                *x += c;
            }
        }
        views.push(out);
    }
    Ok(PointEmbeddings { grid, views })
}
