//! Prompt-conditioned two-way transformer mask decoder.
//!
//! Tokens are the prompt embeddings followed by one learnable mask token.
//! Each block runs, with pre-normalization and residuals:
//! token self-attention, token-to-point cross-attention, a token MLP, and
//! point-to-token cross-attention. Queries and keys are re-injected with the
//! block-0 inputs so positional content survives depth. The logit of a point
//! is the inner product of its normalized final embedding with an MLP
//! readout of the mask token.
//!
//! In single-view scope every view runs the blocks on its own point tokens
//! against the full token list; in full-view scope all views' points form
//! one sequence.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::EmbeddingSet;
use crate::grid::{Grid, Mask};
use crate::params::{add_layer_norm, add_linear, gaussian, Fwd, ParamStore};
use crate::par;
use crate::postprocess::{postprocess, MIN_AREA_FRACTION};
use crate::rng::Rng;
use crate::tape::{bilinear_taps, upsample_rows, Mat, Var};

pub const PREFIX: &str = "decoder.";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionScope {
    SingleView,
    FullView,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecoderConfig {
    pub dim: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    pub attention_scope: AttentionScope,
    pub mask_threshold: f64,
    pub min_area_fraction: f64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            dim: 128,
            num_blocks: 2,
            num_heads: 8,
            mlp_ratio: 4,
            attention_scope: AttentionScope::SingleView,
            mask_threshold: 0.0,
            min_area_fraction: MIN_AREA_FRACTION,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 || self.dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "dim {} not divisible by {} heads",
                self.dim, self.num_heads
            )));
        }
        if self.num_blocks == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config("decoder needs at least one block and a positive MLP ratio".into()));
        }
        if !(0.0..1.0).contains(&self.min_area_fraction) {
            return Err(Error::Config("min_area_fraction outside [0, 1)".into()));
        }
        Ok(())
    }
}

const ATTENTIONS: [&str; 3] = ["sa", "t2p", "p2t"];
const NORMS: [&str; 6] = ["ln_sa", "ln_t2p_q", "ln_t2p_kv", "ln_mlp", "ln_p2t_q", "ln_p2t_kv"];

pub fn init(store: &mut ParamStore, rng: &mut Rng, cfg: &DecoderConfig) {
    let d = cfg.dim;
    for b in 0..cfg.num_blocks {
        let blk = format!("{PREFIX}block{b}");
        for a in ATTENTIONS {
            for proj in ["q", "k", "v"] {
                add_linear(store, rng, &format!("{blk}.{a}.{proj}"), d, d, 1.0);
            }
            // keys start equal to queries, so initial scores approximate
            // plain inner products and nearby positional codes attend first
            let q = store.get(&format!("{blk}.{a}.q.w")).clone();
            *store.get_mut(&format!("{blk}.{a}.k.w")) = q;
            add_linear(store, rng, &format!("{blk}.{a}.o"), d, d, 0.5);
        }
        for n in NORMS {
            add_layer_norm(store, &format!("{blk}.{n}"), d);
        }
        add_linear(store, rng, &format!("{blk}.mlp.fc1"), d, d * cfg.mlp_ratio, 2f64.sqrt());
        add_linear(store, rng, &format!("{blk}.mlp.fc2"), d * cfg.mlp_ratio, d, 0.5);
    }
    add_layer_norm(store, &format!("{PREFIX}ln_points"), d);
    add_layer_norm(store, &format!("{PREFIX}ln_tokens"), d);
    add_linear(store, rng, &format!("{PREFIX}readout.fc1"), d, d, 2f64.sqrt());
    add_linear(store, rng, &format!("{PREFIX}readout.fc2"), d, d, 0.1);
    store.insert(format!("{PREFIX}mask_token"), gaussian(rng, 1, d, 1.0));
}

fn attend(fwd: &mut Fwd<'_>, name: &str, q_in: Var, k_in: Var, v_in: Var, heads: usize) -> Var {
    let q = fwd.linear(q_in, &format!("{name}.q"));
    let k = fwd.linear(k_in, &format!("{name}.k"));
    let v = fwd.linear(v_in, &format!("{name}.v"));
    let a = fwd.g.attention(q, k, v, heads);
    fwd.linear(a, &format!("{name}.o"))
}

/// Decoder graph: `points` is `n x D`, `prompts` is `m x D` (m >= 1).
/// Returns `n x 1` logits.
pub fn forward(fwd: &mut Fwd<'_>, points: Var, prompts: Var, cfg: &DecoderConfig) -> Var {
    let heads = cfg.num_heads;
    let mask_token = fwd.p(&format!("{PREFIX}mask_token"));
    let t0 = fwd.g.concat_rows(&[prompts, mask_token]);
    let x0 = points;
    let (mut t, mut x) = (t0, x0);
    for b in 0..cfg.num_blocks {
        let blk = format!("{PREFIX}block{b}");

        let tn = fwd.layer_norm(t, &format!("{blk}.ln_sa"));
        let qk = fwd.g.add(tn, t0);
        let u = attend(fwd, &format!("{blk}.sa"), qk, qk, tn, heads);
        t = fwd.g.add(t, u);

        let tn = fwd.layer_norm(t, &format!("{blk}.ln_t2p_q"));
        let xn = fwd.layer_norm(x, &format!("{blk}.ln_t2p_kv"));
        let q = fwd.g.add(tn, t0);
        let k = fwd.g.add(xn, x0);
        let u = attend(fwd, &format!("{blk}.t2p"), q, k, xn, heads);
        t = fwd.g.add(t, u);

        let tn = fwd.layer_norm(t, &format!("{blk}.ln_mlp"));
        let h = fwd.linear(tn, &format!("{blk}.mlp.fc1"));
        let h = fwd.g.relu(h);
        let u = fwd.linear(h, &format!("{blk}.mlp.fc2"));
        t = fwd.g.add(t, u);

        let xn = fwd.layer_norm(x, &format!("{blk}.ln_p2t_q"));
        let tn = fwd.layer_norm(t, &format!("{blk}.ln_p2t_kv"));
        let q = fwd.g.add(xn, x0);
        let k = fwd.g.add(tn, t0);
        let u = attend(fwd, &format!("{blk}.p2t"), q, k, tn, heads);
        x = fwd.g.add(x, u);
    }
    let xf = fwd.layer_norm(x, &format!("{PREFIX}ln_points"));
    let tf = fwd.layer_norm(t, &format!("{PREFIX}ln_tokens"));
    let m = fwd.g.value(tf).nrows();
    let mask = fwd.g.slice_rows(tf, m - 1, 1);
    let h = fwd.linear(mask, &format!("{PREFIX}readout.fc1"));
    let h = fwd.g.relu(h);
    let h = fwd.linear(h, &format!("{PREFIX}readout.fc2"));
    fwd.g.matmul_t(xf, h)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskPrediction {
    /// Logits on the encoder grid.
    pub logits: Grid<f64>,
    /// Full-resolution mask after upsampling, thresholding and cleanup.
    pub binary: Mask,
}

fn check_inputs(grid: (usize, usize), views: &[Mat], prompts: &Mat, cfg: &DecoderConfig) -> Result<usize> {
    if prompts.nrows() == 0 {
        return Err(Error::NoPrompts);
    }
    if views.is_empty() {
        return Err(Error::Input("no views to decode".into()));
    }
    let cells = grid.0 * grid.1;
    if prompts.ncols() != cfg.dim {
        return Err(Error::Shape(format!(
            "prompt width {} vs decoder dim {}",
            prompts.ncols(),
            cfg.dim
        )));
    }
    for (i, v) in views.iter().enumerate() {
        if v.dim() != (cells, cfg.dim) {
            return Err(Error::Shape(format!(
                "view {i} embeddings {:?}, expected ({cells}, {})",
                v.dim(),
                cfg.dim
            )));
        }
    }
    Ok(cells)
}

/// Low-resolution logits (`H'W' x 1`) for every view.
pub fn decode_logits(set: &EmbeddingSet, cfg: &DecoderConfig, store: &ParamStore) -> Result<Vec<Mat>> {
    decode_parts(set.grid, &set.views, &set.prompts, cfg, store)
}

/// [`decode_logits`] on borrowed point embeddings and prompt embeddings.
pub fn decode_parts(
    grid: (usize, usize),
    views: &[Mat],
    prompts: &Mat,
    cfg: &DecoderConfig,
    store: &ParamStore,
) -> Result<Vec<Mat>> {
    let cells = check_inputs(grid, views, prompts, cfg)?;
    Ok(match cfg.attention_scope {
        AttentionScope::SingleView => par::map_slice(views, |v| {
            let mut fwd = Fwd::inference(store);
            let x = fwd.g.constant_ref(v);
            let t = fwd.g.constant_ref(prompts);
            let out = forward(&mut fwd, x, t, cfg);
            fwd.g.value(out).clone()
        }),
        AttentionScope::FullView => {
            let mut fwd = Fwd::inference(store);
            let parts: Vec<Var> = views.iter().map(|v| fwd.g.constant_ref(v)).collect();
            let x = fwd.g.concat_rows(&parts);
            let t = fwd.g.constant_ref(prompts);
            let out = forward(&mut fwd, x, t, cfg);
            let all = fwd.g.value(out);
            (0..views.len())
                .map(|i| all.slice(ndarray::s![i * cells..(i + 1) * cells, ..]).to_owned())
                .collect()
        }
    })
}

/// Upsample grid logits to `h x w`, threshold and remove sprinkles.
pub fn finalize(logits: &Mat, grid: (usize, usize), size: (usize, usize), cfg: &DecoderConfig) -> MaskPrediction {
    let up = upsample_rows(logits, &bilinear_taps(grid.0, size.0), &bilinear_taps(grid.1, size.1), grid.1);
    let raw = Grid::from_fn(size.0, size.1, |r, c| (up[[r * size.1 + c, 0]] > cfg.mask_threshold) as u8);
    MaskPrediction {
        logits: Grid::from_fn(grid.0, grid.1, |r, c| logits[[r * grid.1 + c, 0]]),
        binary: postprocess(&raw, cfg.min_area_fraction),
    }
}

/// Full decode to per-view predictions at image size `size`.
pub fn decode(set: &EmbeddingSet, cfg: &DecoderConfig, store: &ParamStore, size: (usize, usize)) -> Result<Vec<MaskPrediction>> {
    let logits = decode_logits(set, cfg, store)?;
    Ok(logits.iter().map(|l| finalize(l, set.grid, size, cfg)).collect())
}
