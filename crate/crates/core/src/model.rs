//! The full model: encoder, learnable embeddings, frozen Fourier bases and
//! decoder, plus the per-scene embedding cache shared by batch evaluation
//! and interactive sessions.

use serde::{Deserialize, Serialize};

use crate::decoder::{self, DecoderConfig, MaskPrediction};
use crate::encoder::{self, EncoderConfig};
use crate::error::{Error, Result};
use crate::geometry::{
    check_prompts, compose_with_fields, confidence_threshold, encode_prompts, pe2d_field, pe3d_field,
    pool_view, positional_embedding_2d, scene_stats, FourierBasis, LearnableEmbeddings, PointEmbeddings,
    Polarity, PooledGeometry, Prompt, StandardizationStats, LOW_CONFIDENCE_FRACTION,
};
use crate::params::{gaussian, ParamStore};
use crate::scenegen::View;
use crate::tape::Mat;
use crate::{par, rng};

pub const EMBED_POLARITY: &str = "embed.polarity";
pub const EMBED_CONFIDENCE: &str = "embed.confidence";

/// Positional signal added to point and prompt embeddings.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PeKind {
    #[serde(rename = "3d")]
    ThreeD,
    #[serde(rename = "2d")]
    TwoD,
    #[serde(rename = "none")]
    None,
}

impl std::str::FromStr for PeKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "3d" => Ok(Self::ThreeD),
            "2d" => Ok(Self::TwoD),
            "none" => Ok(Self::None),
            _ => Err(Error::Config(format!("unknown positional embedding {s:?}"))),
        }
    }
}

impl std::fmt::Display for PeKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::ThreeD => "3d",
            Self::TwoD => "2d",
            Self::None => "none",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub pe: PeKind,
    /// Number of Fourier frequencies K; embeddings have width 2K.
    pub fourier_features: usize,
    pub basis_seed: u64,
    /// Share of points flagged low confidence; 0 disables the signal.
    pub confidence_fraction: f64,
    pub standardize: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            decoder: DecoderConfig::default(),
            pe: PeKind::ThreeD,
            fourier_features: 64,
            basis_seed: 0x5eed_ba515,
            confidence_fraction: LOW_CONFIDENCE_FRACTION,
            standardize: true,
        }
    }
}

impl ModelConfig {
    pub fn dim(&self) -> usize {
        2 * self.fourier_features
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate()?;
        let d = self.dim();
        if d == 0 || self.encoder.output_dim != d || self.decoder.dim != d {
            return Err(Error::Config(format!(
                "encoder width {}, decoder width {} and 2K = {d} must agree",
                self.encoder.output_dim, self.decoder.dim
            )));
        }
        if !(0.0..1.0).contains(&self.confidence_fraction) {
            return Err(Error::Config("confidence_fraction outside [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub basis3: FourierBasis,
    pub basis2: FourierBasis,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.dim();
        let mut r = rng::rng(rng::derive(seed, 1));
        let mut params = ParamStore::new();
        encoder::init(&mut params, &mut r, &config.encoder);
        params.insert(EMBED_POLARITY, gaussian(&mut r, 2, d, 0.5));
        params.insert(EMBED_CONFIDENCE, gaussian(&mut r, 2, d, 0.5));
        decoder::init(&mut params, &mut r, &config.decoder);
        params.round_to_f32();
        let basis3 = FourierBasis::gaussian(3, config.fourier_features, config.basis_seed);
        let basis2 = FourierBasis::gaussian(2, config.fourier_features, rng::derive(config.basis_seed, 2));
        Ok(Self {
            config,
            params,
            basis3,
            basis2,
        })
    }

    pub fn learnable_embeddings(&self) -> LearnableEmbeddings {
        let pol = self.params.get(EMBED_POLARITY);
        let conf = self.params.get(EMBED_CONFIDENCE);
        LearnableEmbeddings {
            f_pos: pol.row(0).to_vec(),
            f_neg: pol.row(1).to_vec(),
            f_hc: conf.row(0).to_vec(),
            f_lc: conf.row(1).to_vec(),
        }
    }

    /// Whether a parameter is updated by training.
    pub fn is_trainable(&self, name: &str) -> bool {
        !(self.config.encoder.frozen && name.starts_with(encoder::PREFIX))
    }

    pub fn encode_image(&self, view: &View) -> Result<Mat> {
        encoder::encode_image(&self.params, &self.config.encoder, &view.image)
    }

    /// Per-view masks for `prompts` using a precomputed scene context.
    pub fn predict(&self, ctx: &SceneContext, prompts: &[Prompt]) -> Result<Vec<MaskPrediction>> {
        let logits = self.predict_logits(ctx, prompts)?;
        let cfg = &self.config.decoder;
        Ok(par::map_slice(&logits, |l| decoder::finalize(l, ctx.geometry.grid, ctx.geometry.size, cfg)))
    }

    /// Grid logits (`H'W' x 1`) for every view of the context.
    pub fn predict_logits(&self, ctx: &SceneContext, prompts: &[Prompt]) -> Result<Vec<Mat>> {
        let prompt_emb = self.prompt_embeddings(&ctx.geometry, prompts)?;
        decoder::decode_parts(ctx.points.grid, &ctx.points.views, &prompt_emb, &self.config.decoder, &self.params)
    }

    /// `positional + polarity + confidence` embedding of each prompt.
    pub fn prompt_embeddings(&self, geo: &SceneGeometry, prompts: &[Prompt]) -> Result<Mat> {
        let emb = self.learnable_embeddings();
        if self.config.pe == PeKind::ThreeD {
            return encode_prompts(prompts, &geo.views, &geo.stats, &self.basis3, &emb, &geo.pixel_low).map(|(e, _)| e);
        }
        let parts = self.prompt_parts(geo, prompts)?;
        let mut out = parts.positional;
        for (i, mut row) in out.rows_mut().into_iter().enumerate() {
            let pol = if parts.polarity[i] == 0 { &emb.f_pos } else { &emb.f_neg };
            let conf = emb.confidence(parts.confidence[i] == 1);
            for (j, x) in row.iter_mut().enumerate() {
                *x = *x + pol[j] + conf[j];
            }
        }
        Ok(out)
    }

    /// Prompt embedding split into its constant positional rows and the
    /// learnable-table row indices, for building training graphs.
    pub fn prompt_parts(&self, geo: &SceneGeometry, prompts: &[Prompt]) -> Result<PromptParts> {
        let (h, w) = geo.size;
        let located = check_prompts(prompts, geo.views.len(), h, w)?;
        let d = self.config.dim();
        let mut positional = Mat::zeros((prompts.len(), d));
        let mut polarity = Vec::with_capacity(prompts.len());
        let mut confidence = Vec::with_capacity(prompts.len());
        for (i, (p, &(v, r, c))) in prompts.iter().zip(&located).enumerate() {
            let pe = match self.config.pe {
                PeKind::ThreeD => Some(
                    self.basis3
                        .embed(&geo.stats.standardize(geo.views[v].pointmap.get(r, c).map(f64::from))),
                ),
                PeKind::TwoD => Some(positional_embedding_2d((r as i64, c as i64), h, w, &self.basis2)?),
                PeKind::None => None,
            };
            if let Some(pe) = pe {
                positional.row_mut(i).assign(&ndarray::ArrayView1::from(&pe));
            }
            polarity.push(match p.polarity {
                Polarity::Positive => 0,
                Polarity::Negative => 1,
            });
            confidence.push(geo.pixel_low[v * h * w + r * w + c] as usize);
        }
        Ok(PromptParts {
            positional,
            polarity,
            confidence,
        })
    }
}

pub struct PromptParts {
    pub positional: Mat,
    /// Row of the polarity table: 0 positive, 1 negative.
    pub polarity: Vec<usize>,
    /// Row of the confidence table: 0 high, 1 low.
    pub confidence: Vec<usize>,
}

/// Everything about a scene that depends on geometry but not on the image
/// encoder: stats, confidence flags and positional fields.
#[derive(Clone, Debug)]
pub struct SceneGeometry {
    pub size: (usize, usize),
    pub grid: (usize, usize),
    pub stats: StandardizationStats,
    /// Views without their ground-truth masks.
    pub views: Vec<View>,
    /// Per-pixel low-confidence flags, view-major.
    pub pixel_low: Vec<bool>,
    /// Per-cell low-confidence flags, view-major.
    pub cell_low: Vec<bool>,
    pub pooled: Vec<PooledGeometry>,
    /// Positional embedding of every grid cell, one matrix per view.
    pub fields: Vec<Mat>,
}

impl SceneGeometry {
    pub fn new(model: &Model, views: &[View]) -> Result<Self> {
        let first = views.first().ok_or_else(|| Error::Input("scene has no views".into()))?;
        let size = (first.height(), first.width());
        if views.iter().any(|v| (v.height(), v.width()) != size) {
            return Err(Error::Shape("views differ in size".into()));
        }
        let cfg = &model.config;
        let stride = cfg.encoder.stride;
        let grid = cfg.encoder.grid(size.0, size.1);
        let stats = if cfg.standardize {
            scene_stats(views)?
        } else {
            StandardizationStats::IDENTITY
        };
        let pixel_low = if cfg.confidence_fraction > 0.0 {
            let all: Vec<f32> = views.iter().flat_map(|v| v.confidence.data().iter().copied()).collect();
            confidence_threshold(&all, cfg.confidence_fraction)?.low
        } else {
            vec![false; views.len() * size.0 * size.1]
        };
        let mut cell_low = vec![false; views.len() * grid.0 * grid.1];
        for v in 0..views.len() {
            for r in 0..size.0 {
                for c in 0..size.1 {
                    if pixel_low[(v * size.0 + r) * size.1 + c] {
                        cell_low[(v * grid.0 + r / stride) * grid.1 + c / stride] = true;
                    }
                }
            }
        }
        let pooled = par::map_slice(views, |v| pool_view(v, stride));
        let pooled = pooled.into_iter().collect::<Result<Vec<_>>>()?;
        let fields = pooled
            .iter()
            .map(|p| match cfg.pe {
                PeKind::ThreeD => pe3d_field(p, &stats, &model.basis3),
                PeKind::TwoD => pe2d_field(p, size.0, size.1, &model.basis2),
                PeKind::None => Mat::zeros((p.points.len(), cfg.dim())),
            })
            .collect();
        let views = views
            .iter()
            .map(|v| View {
                masks: Default::default(),
                ..v.clone()
            })
            .collect();
        Ok(Self {
            size,
            grid,
            stats,
            views,
            pixel_low,
            cell_low,
            pooled,
            fields,
        })
    }

    pub fn cells(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    /// Confidence-table row of every cell of view `v`.
    pub fn cell_rows(&self, v: usize) -> Vec<usize> {
        let n = self.cells();
        self.cell_low[v * n..(v + 1) * n].iter().map(|&l| l as usize).collect()
    }
}

/// Cached per-scene state: geometry plus composed point embeddings. Built
/// once; every prompt update reuses it.
#[derive(Clone, Debug)]
pub struct SceneContext {
    pub geometry: SceneGeometry,
    pub points: PointEmbeddings,
}

impl SceneContext {
    pub fn new(model: &Model, views: &[View]) -> Result<Self> {
        let geometry = SceneGeometry::new(model, views)?;
        let images = par::map_slice(views, |v| model.encode_image(v));
        let images = images.into_iter().collect::<Result<Vec<_>>>()?;
        let points = compose_with_fields(
            &images,
            &geometry.pooled,
            &geometry.fields,
            &model.learnable_embeddings(),
            &geometry.cell_low,
        )?;
        Ok(Self { geometry, points })
    }

    pub fn num_views(&self) -> usize {
        self.geometry.views.len()
    }
}
