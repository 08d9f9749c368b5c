//! Metrics, prompt protocols and scene-level evaluation reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::index;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Polarity, Prompt};
use crate::grid::{check_same_shape, Mask};
use crate::model::{Model, SceneContext};
use crate::scenegen::{corrupt_pointmap, generate_scene, SceneBundle, SceneGenConfig, FLOOR_ID};
use crate::{par, rng};

/// Intersection over union; 1 when both masks are empty.
pub fn iou(pred: &Mask, gt: &Mask) -> Result<f64> {
    check_same_shape(pred, gt, "iou")?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        let (p, g) = (p != 0, g != 0);
        inter += (p && g) as usize;
        union += (p || g) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Fraction of pixels where the masks agree.
pub fn pixel_accuracy(pred: &Mask, gt: &Mask) -> Result<f64> {
    check_same_shape(pred, gt, "pixel_accuracy")?;
    let agree = pred
        .data()
        .iter()
        .zip(gt.data())
        .filter(|(&p, &g)| (p != 0) == (g != 0))
        .count();
    Ok(agree as f64 / pred.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptViews {
    ReferenceOnly,
    SpreadAcrossViews,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalProtocol {
    pub n_positive: usize,
    pub n_negative: usize,
    pub prompt_views: PromptViews,
    /// Evaluate only the first `frames` views when set.
    pub frames: Option<usize>,
    pub seed: u64,
    pub include_floor: bool,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        Self {
            n_positive: 10,
            n_negative: 2,
            prompt_views: PromptViews::ReferenceOnly,
            frames: None,
            seed: 0,
            include_floor: false,
        }
    }
}

impl EvalProtocol {
    /// Preset with 8 positive and 2 negative prompts on the reference view.
    pub fn nvos_style() -> Self {
        Self {
            n_positive: 8,
            ..Self::default()
        }
    }
}

fn draw(pool: &[usize], count: usize, r: &mut rng::Rng) -> Vec<usize> {
    if count <= pool.len() {
        index::sample(r, pool.len(), count).into_iter().map(|j| pool[j]).collect()
    } else {
        (0..count).map(|_| pool[r.random_range(0..pool.len())]).collect()
    }
}

/// Prompts for one object per the protocol, or `None` when the object is
/// not visible in any prompt view.
pub fn protocol_prompts(bundle: &SceneBundle, object_id: &str, protocol: &EvalProtocol) -> Result<Option<Vec<Prompt>>> {
    let n_views = bundle.views.len();
    let masks: Vec<&Mask> = bundle
        .views
        .iter()
        .map(|v| v.masks.get(object_id).ok_or_else(|| Error::NotFound(format!("object {object_id}"))))
        .collect::<Result<_>>()?;
    let candidates: Vec<usize> = match protocol.prompt_views {
        PromptViews::ReferenceOnly => vec![0],
        PromptViews::SpreadAcrossViews => (0..n_views).collect(),
    };
    let visible: Vec<usize> = candidates.into_iter().filter(|&v| masks[v].count_ones() > 0).collect();
    if visible.is_empty() {
        return Ok(None);
    }
    let seed = rng::derive(protocol.seed, rng::hash_str(&bundle.scene_id) ^ rng::hash_str(object_id).rotate_left(17));
    let mut r = rng::rng(seed);
    let mut prompts = Vec::with_capacity(protocol.n_positive + protocol.n_negative);
    let w = bundle.width();
    for (k, (count, polarity)) in [(protocol.n_positive, Polarity::Positive), (protocol.n_negative, Polarity::Negative)]
        .into_iter()
        .enumerate()
    {
        // assign prompts round-robin over the visible prompt views
        let mut per_view = vec![0usize; visible.len()];
        for i in 0..count {
            per_view[(i + k) % visible.len()] += 1;
        }
        for (&v, &n) in visible.iter().zip(&per_view) {
            let want = polarity == Polarity::Positive;
            let pool: Vec<usize> = (0..masks[v].len()).filter(|&i| (masks[v].data()[i] != 0) == want).collect();
            if pool.is_empty() {
                continue;
            }
            for i in draw(&pool, n, &mut r) {
                prompts.push(Prompt::new(v, i / w, i % w, polarity));
            }
        }
    }
    Ok(Some(prompts))
}

/// Anything that maps a scene plus prompts to per-view binary masks.
pub trait Segmenter: Sync {
    type Scene: Sync;
    fn prepare(&self, bundle: &SceneBundle) -> Result<Self::Scene>;
    fn segment(&self, scene: &Self::Scene, prompts: &[Prompt]) -> Result<Vec<Mask>>;
}

impl Segmenter for Model {
    type Scene = SceneContext;

    fn prepare(&self, bundle: &SceneBundle) -> Result<SceneContext> {
        SceneContext::new(self, &bundle.views)
    }

    fn segment(&self, scene: &SceneContext, prompts: &[Prompt]) -> Result<Vec<Mask>> {
        Ok(self.predict(scene, prompts)?.into_iter().map(|p| p.binary).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectResult {
    pub suite: String,
    pub cell: String,
    pub scene: String,
    pub object: String,
    pub iou: f64,
    pub acc: f64,
    pub view_iou: Vec<f64>,
    pub view_acc: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub suite: String,
    pub cell: String,
    pub miou: f64,
    pub macc: f64,
    pub objects: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<ObjectResult>,
    pub notes: Vec<String>,
    pub runtime_secs: f64,
}

impl EvalReport {
    pub fn miou(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.iou))
    }

    pub fn macc(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.acc))
    }

    /// Per-cell aggregates in first-appearance order.
    pub fn cells(&self) -> Vec<CellSummary> {
        let mut order: Vec<(String, String)> = Vec::new();
        let mut groups: BTreeMap<(String, String), Vec<&ObjectResult>> = BTreeMap::new();
        for r in &self.rows {
            let key = (r.suite.clone(), r.cell.clone());
            if !groups.contains_key(&key) {
                order.push(key.clone());
            }
            groups.entry(key).or_default().push(r);
        }
        order
            .into_iter()
            .map(|key| {
                let rows = &groups[&key];
                CellSummary {
                    suite: key.0.clone(),
                    cell: key.1.clone(),
                    miou: mean(rows.iter().map(|r| r.iou)),
                    macc: mean(rows.iter().map(|r| r.acc)),
                    objects: rows.len(),
                }
            })
            .collect()
    }

    pub fn cell_miou(&self, cell: &str) -> Option<f64> {
        self.cells().into_iter().find(|c| c.cell == cell).map(|c| c.miou)
    }

    pub fn extend(&mut self, other: EvalReport) {
        self.rows.extend(other.rows);
        self.notes.extend(other.notes);
        self.runtime_secs += other.runtime_secs;
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("suite,cell,scene,object,iou,acc\n");
        for r in &self.rows {
            writeln!(out, "{},{},{},{},{:.6},{:.6}", r.suite, r.cell, r.scene, r.object, r.iou, r.acc).unwrap();
        }
        out
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "miou": self.miou(),
            "macc": self.macc(),
            "objects": self.rows.len(),
            "cells": self.cells(),
            "notes": self.notes,
            "runtime_secs": self.runtime_secs,
        })
    }

    /// Line plot of per-cell mIoU and mAcc.
    pub fn to_svg(&self, title: &str) -> String {
        let cells = self.cells();
        let (w, h, pad) = (480.0, 300.0, 48.0);
        let n = cells.len().max(1);
        let x = |i: usize| {
            if n == 1 {
                w / 2.0
            } else {
                pad + i as f64 * (w - 2.0 * pad) / (n - 1) as f64
            }
        };
        let y = |v: f64| h - pad - v.clamp(0.0, 1.0) * (h - 2.0 * pad);
        let mut s = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"11\">\n"
        );
        writeln!(s, "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>").unwrap();
        writeln!(s, "<text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"13\">{}</text>", w / 2.0, escape(title)).unwrap();
        writeln!(
            s,
            "<line x1=\"{pad}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/><line x1=\"{pad}\" y1=\"{pad}\" x2=\"{pad}\" y2=\"{}\" stroke=\"black\"/>",
            h - pad,
            w - pad,
            h - pad,
            h - pad
        )
        .unwrap();
        for t in [0.0, 0.25, 0.5, 0.75, 1.0] {
            writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{t:.2}</text>", pad - 4.0, y(t) + 4.0).unwrap();
        }
        for (i, c) in cells.iter().enumerate() {
            writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>", x(i), h - pad + 16.0, escape(&c.cell)).unwrap();
        }
        for (metric, color, pick) in [
            ("mIoU", "#1f77b4", (|c: &CellSummary| c.miou) as fn(&CellSummary) -> f64),
            ("mAcc", "#d62728", |c: &CellSummary| c.macc),
        ] {
            let pts: Vec<String> = cells.iter().enumerate().map(|(i, c)| format!("{:.1},{:.1}", x(i), y(pick(c)))).collect();
            writeln!(s, "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>", pts.join(" ")).unwrap();
            for p in &pts {
                let (px, py) = p.split_once(',').unwrap();
                writeln!(s, "<circle cx=\"{px}\" cy=\"{py}\" r=\"3\" fill=\"{color}\"/>").unwrap();
            }
            let ly = if metric == "mIoU" { 36.0 } else { 50.0 };
            writeln!(s, "<text x=\"{}\" y=\"{ly}\" fill=\"{color}\">{metric}</text>", w - pad).unwrap();
        }
        s.push_str("</svg>\n");
        s
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in it {
        sum += v;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

fn evaluate_scene<S: Segmenter>(
    segmenter: &S,
    bundle: &SceneBundle,
    protocol: &EvalProtocol,
    labels: (&str, &str),
) -> Result<(Vec<ObjectResult>, Vec<String>)> {
    let bundle = match protocol.frames {
        Some(f) if f < bundle.views.len() => bundle.subset(&(0..f).collect::<Vec<_>>())?,
        _ => bundle.clone(),
    };
    let scene = segmenter.prepare(&bundle)?;
    let mut rows = Vec::new();
    let mut notes = Vec::new();
    for obj in &bundle.objects {
        if obj.object_id == FLOOR_ID && !protocol.include_floor {
            continue;
        }
        let Some(prompts) = protocol_prompts(&bundle, &obj.object_id, protocol)? else {
            notes.push(format!("{}/{}: not visible in prompt views, skipped", bundle.scene_id, obj.object_id));
            continue;
        };
        let preds = segmenter.segment(&scene, &prompts)?;
        let mut view_iou = Vec::with_capacity(preds.len());
        let mut view_acc = Vec::with_capacity(preds.len());
        for (pred, view) in preds.iter().zip(&bundle.views) {
            let gt = &view.masks[&obj.object_id];
            view_iou.push(iou(pred, gt)?);
            view_acc.push(pixel_accuracy(pred, gt)?);
        }
        rows.push(ObjectResult {
            suite: labels.0.to_string(),
            cell: labels.1.to_string(),
            scene: bundle.scene_id.clone(),
            object: obj.object_id.clone(),
            iou: mean(view_iou.iter().copied()),
            acc: mean(view_acc.iter().copied()),
            view_iou,
            view_acc,
        });
    }
    Ok((rows, notes))
}

/// Evaluate every non-floor object of every scene; rows are ordered by
/// `(scene_id, object_id)`.
pub fn evaluate<S: Segmenter>(segmenter: &S, scenes: &[SceneBundle], protocol: &EvalProtocol) -> Result<EvalReport> {
    evaluate_labeled(segmenter, scenes, protocol, ("eval", "base"))
}

pub fn evaluate_labeled<S: Segmenter>(
    segmenter: &S,
    scenes: &[SceneBundle],
    protocol: &EvalProtocol,
    labels: (&str, &str),
) -> Result<EvalReport> {
    let start = std::time::Instant::now();
    let per_scene = par::map_slice(scenes, |b| evaluate_scene(segmenter, b, protocol, labels));
    let mut report = EvalReport::default();
    for r in per_scene {
        let (rows, notes) = r?;
        report.rows.extend(rows);
        report.notes.extend(notes);
    }
    report.rows.sort_by(|a, b| (&a.scene, &a.object).cmp(&(&b.scene, &b.object)));
    report.runtime_secs = start.elapsed().as_secs_f64();
    Ok(report)
}

/// Generated evaluation scenes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalData {
    pub scene: SceneGenConfig,
    pub scenes: usize,
    pub seed: u64,
    pub noise_scale: f64,
    pub low_conf_fraction: f64,
    /// Multiply each scene by a log-uniform factor from this range.
    pub scale_range: Option<[f64; 2]>,
}

impl Default for EvalData {
    fn default() -> Self {
        Self {
            scene: SceneGenConfig::default(),
            scenes: 20,
            seed: 1_000_003,
            noise_scale: 0.02,
            low_conf_fraction: 0.15,
            scale_range: None,
        }
    }
}

impl EvalData {
    /// Clean scenes, before scaling and corruption.
    pub fn clean_scenes(&self) -> Result<Vec<SceneBundle>> {
        par::map_range(self.scenes, |i| generate_scene(&self.scene, rng::derive(self.seed, i as u64)))
            .into_iter()
            .collect()
    }

    pub fn corrupt(&self, clean: &[SceneBundle], noise_scale: f64) -> Result<Vec<SceneBundle>> {
        par::map_range(clean.len(), |i| {
            let mut b = clean[i].clone();
            if let Some([lo, hi]) = self.scale_range {
                let mut r = rng::rng(rng::derive(self.seed ^ 0x5ca1e, i as u64));
                let f = (lo.ln() + r.random::<f64>() * (hi.ln() - lo.ln())).exp();
                b = b.scaled(f);
            }
            corrupt_pointmap(&b, noise_scale, self.low_conf_fraction, rng::derive(self.seed ^ 0xc0, i as u64))
        })
        .into_iter()
        .collect()
    }

    pub fn scenes(&self) -> Result<Vec<SceneBundle>> {
        self.corrupt(&self.clean_scenes()?, self.noise_scale)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;
    use proptest::prelude::*;

    fn m(bits: &[u8], w: usize) -> Mask {
        Grid::from_vec(bits.len() / w, w, bits.to_vec()).unwrap()
    }

    #[test]
    fn iou_examples() {
        let a = m(&[1, 1, 0, 0], 2);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert_eq!(iou(&a, &m(&[0, 0, 1, 1], 2)).unwrap(), 0.0);
        let p = m(&[1, 1, 1, 1, 0, 0], 3);
        let g = m(&[0, 0, 1, 1, 1, 1], 3);
        assert!((iou(&p, &g).unwrap() - 1.0 / 3.0).abs() < 1e-9);
        assert_eq!(iou(&m(&[0; 4], 2), &m(&[0; 4], 2)).unwrap(), 1.0);
        assert!(iou(&a, &m(&[0; 6], 3)).is_err());
    }

    #[test]
    fn accuracy_examples() {
        let a = m(&[1, 0, 1, 0], 2);
        assert_eq!(pixel_accuracy(&a, &a).unwrap(), 1.0);
        assert_eq!(pixel_accuracy(&a, &m(&[0, 1, 0, 1], 2)).unwrap(), 0.0);
        assert_eq!(pixel_accuracy(&a, &m(&[1, 0, 1, 1], 2)).unwrap(), 0.75);
    }

    proptest! {
        #[test]
        fn metric_symmetries(bits in proptest::collection::vec(0u8..2, 36), other in proptest::collection::vec(0u8..2, 36)) {
            let p = m(&bits, 6);
            let g = m(&other, 6);
            let flip = |x: &Mask| x.map(|&v| 1 - v);
            prop_assert_eq!(pixel_accuracy(&p, &g).unwrap(), pixel_accuracy(&flip(&p), &flip(&g)).unwrap());
            if p.count_ones() > 0 {
                prop_assert_eq!(iou(&p, &p).unwrap(), 1.0);
            }
        }
    }

    /// Returns the ground-truth mask of whatever object lies under the
    /// first positive prompt.
    struct Oracle;

    impl Segmenter for Oracle {
        type Scene = SceneBundle;
        fn prepare(&self, b: &SceneBundle) -> Result<SceneBundle> {
            Ok(b.clone())
        }
        fn segment(&self, b: &SceneBundle, prompts: &[Prompt]) -> Result<Vec<Mask>> {
            let p = prompts.iter().find(|p| p.polarity == Polarity::Positive).unwrap();
            let view = &b.views[p.view as usize];
            let (id, _) = view
                .masks
                .iter()
                .find(|(_, m)| *m.get(p.row as usize, p.col as usize) == 1)
                .unwrap();
            Ok(b.views.iter().map(|v| v.masks[id].clone()).collect())
        }
    }

    fn scenes() -> Vec<SceneBundle> {
        EvalData {
            scenes: 3,
            scene: SceneGenConfig { views: 4, ..Default::default() },
            ..Default::default()
        }
        .scenes()
        .unwrap()
    }

    #[test]
    fn oracle_scores_one_with_prompts_everywhere() {
        let protocol = EvalProtocol {
            prompt_views: PromptViews::SpreadAcrossViews,
            ..Default::default()
        };
        let r = evaluate(&Oracle, &scenes(), &protocol).unwrap();
        assert!(!r.rows.is_empty());
        assert_eq!(r.miou(), 1.0);
        assert_eq!(r.macc(), 1.0);
    }

    #[test]
    fn reference_only_prompts_view_zero_and_scores_all_views() {
        let s = scenes();
        let protocol = EvalProtocol::default();
        for b in &s {
            for o in b.objects.iter().filter(|o| o.object_id != FLOOR_ID) {
                if let Some(p) = protocol_prompts(b, &o.object_id, &protocol).unwrap() {
                    assert!(p.iter().all(|p| p.view == 0));
                    assert_eq!(p.iter().filter(|p| p.polarity == Polarity::Positive).count(), 10);
                    assert_eq!(p.iter().filter(|p| p.polarity == Polarity::Negative).count(), 2);
                }
            }
        }
        let r = evaluate(&Oracle, &s, &protocol).unwrap();
        assert!(r.rows.iter().all(|row| row.view_iou.len() == 4));
        assert_eq!(r, EvalReport { runtime_secs: r.runtime_secs, ..evaluate(&Oracle, &s, &protocol).unwrap() });
    }

    #[test]
    fn csv_has_one_line_per_row() {
        let r = evaluate(&Oracle, &scenes(), &EvalProtocol::default()).unwrap();
        let csv = r.to_csv();
        assert_eq!(csv.lines().count(), r.rows.len() + 1);
        assert!(csv.starts_with("suite,cell,scene,object,iou,acc"));
        assert!(r.to_svg("oracle").contains("<polyline"));
    }
}
