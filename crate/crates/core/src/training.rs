//! Single-view training: prompt sampling, dense-prompt degradation, the
//! synthetic sample stream and an Adam loop over the combined objective.

use std::ops::ControlFlow;

use ndarray::Array2;
use rand::seq::index;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::encoder;
use crate::error::{Error, Result};
use crate::geometry::{Polarity, Prompt};
use crate::grid::{Grid, Mask};
use crate::loss::{objective, LossConfig, LossKind};
use crate::model::{Model, SceneGeometry, EMBED_CONFIDENCE, EMBED_POLARITY};
use crate::params::Fwd;
use crate::scenegen::{corrupt_pointmap, generate_scene, SceneGenConfig, View, FLOOR_ID};
use crate::tape::Mat;
use crate::{decoder, par, rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub lambda_focal: f64,
    pub lambda_dice: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub prompts_per_sample: usize,
    pub max_negative_fraction: f64,
    pub dense_drop_fraction: f64,
    pub dense_perturb_fraction: f64,
    /// Probability that a sample's prompts come from a degraded mask.
    pub dense_prompt_probability: f64,
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub encoder_frozen: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossKind::FocalDice,
            lambda_focal: 1.0,
            lambda_dice: 0.05,
            focal_alpha: 0.9,
            focal_gamma: 1.5,
            prompts_per_sample: 10,
            max_negative_fraction: 0.10,
            dense_drop_fraction: 0.80,
            dense_perturb_fraction: 0.20,
            dense_prompt_probability: 0.5,
            learning_rate: 1e-3,
            steps: 1000,
            batch_size: 4,
            seed: 0,
            encoder_frozen: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fractions = [
            ("max_negative_fraction", self.max_negative_fraction),
            ("dense_drop_fraction", self.dense_drop_fraction),
            ("dense_perturb_fraction", self.dense_perturb_fraction),
            ("dense_prompt_probability", self.dense_prompt_probability),
            ("focal_alpha", self.focal_alpha),
        ];
        for (name, f) in fractions {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::Config(format!("{name} = {f} outside [0, 1]")));
            }
        }
        if !(self.learning_rate > 0.0) || self.steps == 0 || self.batch_size == 0 || self.prompts_per_sample == 0 {
            return Err(Error::Config(
                "learning_rate, steps, batch_size and prompts_per_sample must be positive".into(),
            ));
        }
        if self.focal_gamma < 0.0 || self.lambda_focal < 0.0 || self.lambda_dice < 0.0 {
            return Err(Error::Config("loss weights and focal_gamma must be non-negative".into()));
        }
        Ok(())
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            kind: self.loss,
            lambda_focal: self.lambda_focal,
            lambda_dice: self.lambda_dice,
            focal_alpha: self.focal_alpha,
            focal_gamma: self.focal_gamma,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PromptSample {
    pub prompts: Vec<Prompt>,
    /// Set when the mask covers every pixel so no negative could be drawn.
    pub saturated: bool,
}

fn pixels_where(mask: &Mask, value: bool) -> Vec<usize> {
    (0..mask.len()).filter(|&i| (mask.data()[i] != 0) == value).collect()
}

/// Draw `count` prompts on `view`: up to `floor(max_negative_fraction *
/// count)` negatives uniformly outside the mask, the rest positives
/// uniformly inside (with replacement).
pub fn sample_prompts(mask: &Mask, view: usize, count: usize, max_negative_fraction: f64, seed: u64) -> Result<PromptSample> {
    let inside = pixels_where(mask, true);
    if inside.is_empty() {
        return Err(Error::EmptyMask("cannot sample prompts from an empty mask".into()));
    }
    let outside = pixels_where(mask, false);
    let mut r = rng::rng(seed);
    let max_neg = (max_negative_fraction * count as f64 + 1e-9).floor() as usize;
    let drawn = r.random_range(0..=max_neg.min(count));
    let saturated = outside.is_empty();
    let n_neg = if saturated { 0 } else { drawn };
    let w = mask.width();
    let at = |i: usize, polarity| Prompt::new(view, i / w, i % w, polarity);
    let mut prompts = Vec::with_capacity(count);
    for _ in 0..count - n_neg {
        prompts.push(at(inside[r.random_range(0..inside.len())], Polarity::Positive));
    }
    for _ in 0..n_neg {
        prompts.push(at(outside[r.random_range(0..outside.len())], Polarity::Negative));
    }
    Ok(PromptSample { prompts, saturated })
}

/// Pixels whose 3x3 neighborhood contains both mask and non-mask pixels.
fn boundary_band(mask: &Mask) -> Vec<usize> {
    let (h, w) = (mask.height() as i64, mask.width() as i64);
    (0..mask.len())
        .filter(|&i| {
            let (r, c) = ((i as i64) / w, (i as i64) % w);
            let mut seen = [false; 2];
            for dr in -1..=1 {
                for dc in -1..=1 {
                    let (nr, nc) = (r + dr, c + dc);
                    if nr >= 0 && nc >= 0 && nr < h && nc < w {
                        seen[(mask.data()[(nr * w + nc) as usize] != 0) as usize] = true;
                    }
                }
            }
            seen[0] && seen[1]
        })
        .collect()
}

/// Drop `round(drop_fraction * |mask|)` mask pixels, then flip
/// `round(perturb_fraction * |remaining|)` pixels of the remaining mask's
/// boundary band.
pub fn degrade_mask(mask: &Mask, drop_fraction: f64, perturb_fraction: f64, seed: u64) -> Result<Mask> {
    let inside = pixels_where(mask, true);
    if inside.is_empty() {
        return Err(Error::EmptyMask("cannot degrade an empty mask".into()));
    }
    let mut r = rng::rng(seed);
    let mut out = mask.map(|&v| (v != 0) as u8);
    let n_drop = (drop_fraction * inside.len() as f64).round() as usize;
    for j in index::sample(&mut r, inside.len(), n_drop.min(inside.len())) {
        out.data_mut()[inside[j]] = 0;
    }
    let remaining = out.count_ones();
    let band = boundary_band(&out);
    let n_flip = ((perturb_fraction * remaining as f64).round() as usize).min(band.len());
    for j in index::sample(&mut r, band.len(), n_flip) {
        let px = &mut out.data_mut()[band[j]];
        *px ^= 1;
    }
    Ok(out)
}

/// Prompts for one training sample: sparse clicks from the ground truth, or
/// (with `dense_prompt_probability`) clicks inside a degraded mask.
pub fn training_prompts(mask: &Mask, cfg: &TrainConfig, seed: u64) -> Result<Vec<Prompt>> {
    let mut r = rng::rng(seed);
    let dense = r.random_bool(cfg.dense_prompt_probability);
    let prompt_seed = r.random();
    if dense {
        let degraded = degrade_mask(mask, cfg.dense_drop_fraction, cfg.dense_perturb_fraction, r.random())?;
        if degraded.count_ones() > 0 {
            return Ok(sample_prompts(&degraded, 0, cfg.prompts_per_sample, cfg.max_negative_fraction, prompt_seed)?.prompts);
        }
    }
    Ok(sample_prompts(mask, 0, cfg.prompts_per_sample, cfg.max_negative_fraction, prompt_seed)?.prompts)
}

/// One view with one target object.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSample {
    pub view: View,
    pub object_id: String,
    pub mask: Mask,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub scene: SceneGenConfig,
    pub scenes: usize,
    pub noise_scale: f64,
    pub low_conf_fraction: f64,
    /// Objects covering fewer pixels in a view are skipped there.
    pub min_mask_area: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            scene: SceneGenConfig {
                views: 4,
                ..SceneGenConfig::default()
            },
            scenes: 64,
            noise_scale: 0.02,
            low_conf_fraction: 0.15,
            min_mask_area: 12,
        }
    }
}

/// Split generated scenes into single-view samples. Each view is corrupted
/// on its own, so its confidence ranking is self-contained.
pub fn single_view_samples(cfg: &DataConfig, seed: u64) -> Result<Vec<TrainSample>> {
    let per_scene = par::map_range(cfg.scenes, |i| -> Result<Vec<TrainSample>> {
        let scene_seed = rng::derive(seed, i as u64);
        let bundle = generate_scene(&cfg.scene, scene_seed)?;
        let mut out = Vec::new();
        for v in 0..bundle.views.len() {
            let single = bundle.subset(&[v])?;
            let single = corrupt_pointmap(&single, cfg.noise_scale, cfg.low_conf_fraction, rng::derive(scene_seed, v as u64))?;
            let view = &single.views[0];
            for (id, mask) in &view.masks {
                if id == FLOOR_ID || mask.count_ones() < cfg.min_mask_area {
                    continue;
                }
                out.push(TrainSample {
                    view: View {
                        masks: Default::default(),
                        ..view.clone()
                    },
                    object_id: id.clone(),
                    mask: mask.clone(),
                });
            }
        }
        Ok(out)
    });
    let mut all = Vec::new();
    for s in per_scene {
        all.extend(s?);
    }
    if all.is_empty() {
        return Err(Error::Input("data config produced no training samples".into()));
    }
    Ok(all)
}

/// Objective value and per-parameter gradients for one sample.
pub fn sample_gradients(
    model: &Model,
    geo: &SceneGeometry,
    mask: &Mask,
    prompts: &[Prompt],
    loss: &LossConfig,
    trainable: &(dyn Fn(&str) -> bool + Sync),
) -> Result<(f64, Vec<Option<Mat>>)> {
    let (h, w) = geo.size;
    if (mask.height(), mask.width()) != (h, w) {
        return Err(Error::Shape("mask and view sizes differ".into()));
    }
    let parts = model.prompt_parts(geo, prompts)?;
    let pixels = encoder::image_to_mat(&geo.views[0].image);
    let mut fwd = Fwd::new(&model.params, trainable);
    let x = fwd.g.constant(pixels);
    let (img, grid) = encoder::forward(&mut fwd, x, h, w, &model.config.encoder);
    let field = fwd.g.constant_ref(&geo.fields[0]);
    let conf_table = fwd.p(EMBED_CONFIDENCE);
    let cell_conf = fwd.g.gather(conf_table, geo.cell_rows(0));
    let points = fwd.g.add(img, field);
    let points = fwd.g.add(points, cell_conf);

    let pe = fwd.g.constant(parts.positional);
    let pol_table = fwd.p(EMBED_POLARITY);
    let pol = fwd.g.gather(pol_table, parts.polarity);
    let conf = fwd.g.gather(conf_table, parts.confidence);
    let tokens = fwd.g.add(pe, pol);
    let tokens = fwd.g.add(tokens, conf);

    let logits = decoder::forward(&mut fwd, points, tokens, &model.config.decoder);
    let up = fwd.g.upsample(logits, grid, (h, w));
    let flat: Vec<f64> = fwd.g.value(up).iter().copied().collect();
    let (value, grad) = objective(&flat, mask.data(), loss)?;
    let seed = Array2::from_shape_vec((h * w, 1), grad).expect("one gradient per pixel");
    let mut grads = fwd.g.backward(vec![(up, seed)]);
    Ok((value, fwd.param_grads(&mut grads)))
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Mat>,
    v: Vec<Mat>,
}

impl Adam {
    pub fn new(lr: f64, shapes: &[Mat]) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: shapes.iter().map(|p| Mat::zeros(p.dim())).collect(),
            v: shapes.iter().map(|p| Mat::zeros(p.dim())).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [Mat], grads: &[Option<Mat>]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            ndarray::Zip::from(&mut params[i])
                .and(&mut self.m[i])
                .and(&mut self.v[i])
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                });
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    /// Mean batch objective at every completed step.
    pub losses: Vec<f64>,
    pub steps: usize,
}

/// Train with a per-step observer that may stop early.
pub fn train_with(
    mut model: Model,
    samples: &[TrainSample],
    cfg: &TrainConfig,
    mut observe: impl FnMut(usize, &Model, f64) -> ControlFlow<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Input("no training samples".into()));
    }
    if cfg.encoder_frozen {
        model.config.encoder.frozen = true;
    }
    let geos = par::map_slice(samples, |s| SceneGeometry::new(&model, std::slice::from_ref(&s.view)));
    let geos = geos.into_iter().collect::<Result<Vec<_>>>()?;
    let loss_cfg = cfg.loss_config();
    let frozen = model.config.encoder.frozen;
    let trainable = move |name: &str| !(frozen && name.starts_with(encoder::PREFIX));
    let mut adam = Adam::new(cfg.learning_rate, model.params.values());
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let step_seed = rng::derive(cfg.seed, step as u64);
        let mut r = rng::rng(step_seed);
        let picks: Vec<usize> = (0..cfg.batch_size).map(|_| r.random_range(0..samples.len())).collect();
        let results = par::map_range(picks.len(), |slot| -> Result<(f64, Vec<Option<Mat>>)> {
            let i = picks[slot];
            let prompts = training_prompts(&samples[i].mask, cfg, rng::derive(step_seed, slot as u64 + 1))?;
            sample_gradients(&model, &geos[i], &samples[i].mask, &prompts, &loss_cfg, &trainable)
        });
        let mut total = 0.0;
        let mut sum: Vec<Option<Mat>> = vec![None; model.params.len()];
        for res in results {
            let (l, grads) = res?;
            total += l;
            for (acc, g) in sum.iter_mut().zip(grads) {
                match (acc.as_mut(), g) {
                    (Some(a), Some(g)) => *a += &g,
                    (None, Some(g)) => *acc = Some(g),
                    _ => {}
                }
            }
        }
        let scale = 1.0 / cfg.batch_size as f64;
        let mean = total * scale;
        if !mean.is_finite() {
            return Err(Error::Diverged { step, loss: mean });
        }
        for g in sum.iter_mut().flatten() {
            *g *= scale;
        }
        adam.step(model.params.values_mut(), &sum);
        losses.push(mean);
        if observe(step, &model, mean).is_break() {
            break;
        }
    }
    model.params.round_to_f32();
    let steps = losses.len();
    Ok(TrainOutcome { model, losses, steps })
}

pub fn train(model: Model, samples: &[TrainSample], cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(model, samples, cfg, |_, _, _| ControlFlow::Continue(()))
}

/// Exponential moving average of a loss curve.
pub fn smoothed(losses: &[f64], decay: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(losses.len());
    let mut acc = None;
    for &l in losses {
        let next = match acc {
            None => l,
            Some(a) => decay * a + (1.0 - decay) * l,
        };
        acc = Some(next);
        out.push(next);
    }
    out
}

/// Square mask of `side x side` pixels at the top-left of an `h x w` grid.
pub fn square_mask(h: usize, w: usize, side: usize) -> Mask {
    Grid::from_fn(h, w, |r, c| (r < side && c < side) as u8)
}
