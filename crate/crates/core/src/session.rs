//! Interactive segmentation session: one scene, one target object, a cached
//! embedding context and the latest prompt list.

use std::sync::Arc;

use crate::bundle_io::encode_rgb_png;
use crate::error::{Error, Result};
use crate::geometry::Prompt;
use crate::model::{Model, SceneContext};
use crate::rle::EncodedMask;
use crate::scenegen::SceneBundle;

pub struct Session {
    pub id: String,
    pub scene_id: String,
    pub checkpoint_id: String,
    model: Arc<Model>,
    bundle: SceneBundle,
    context: SceneContext,
    prompts: Vec<Prompt>,
}

impl Session {
    /// Build the session and warm its cache; `frames` selects a subset of
    /// views in the given order.
    pub fn create(
        id: impl Into<String>,
        checkpoint_id: impl Into<String>,
        model: Arc<Model>,
        bundle: &SceneBundle,
        frames: Option<&[usize]>,
    ) -> Result<Self> {
        let bundle = match frames {
            Some([]) => return Err(Error::Input("frame subset is empty".into())),
            Some(f) => bundle.subset(f)?,
            None => bundle.clone(),
        };
        let context = SceneContext::new(&model, &bundle.views)?;
        Ok(Self {
            id: id.into(),
            scene_id: bundle.scene_id.clone(),
            checkpoint_id: checkpoint_id.into(),
            model,
            bundle,
            context,
            prompts: Vec::new(),
        })
    }

    pub fn num_views(&self) -> usize {
        self.bundle.views.len()
    }

    pub fn height(&self) -> usize {
        self.bundle.height()
    }

    pub fn width(&self) -> usize {
        self.bundle.width()
    }

    pub fn prompts(&self) -> &[Prompt] {
        &self.prompts
    }

    /// Replace the prompt list and return one encoded mask per view. A
    /// rejected list leaves the previous one in place.
    pub fn update_prompts(&mut self, prompts: Vec<Prompt>) -> Result<Vec<EncodedMask>> {
        let preds = self.model.predict(&self.context, &prompts)?;
        self.prompts = prompts;
        Ok(preds.iter().enumerate().map(|(v, p)| EncodedMask::new(v, &p.binary)).collect())
    }

    pub fn view_png(&self, view: usize) -> Result<Vec<u8>> {
        let v = self
            .bundle
            .views
            .get(view)
            .ok_or_else(|| Error::NotFound(format!("view {view} of {}", self.num_views())))?;
        encode_rgb_png(&v.image)
    }
}
