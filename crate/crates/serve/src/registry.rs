use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use tfseg::featpipe::{merge_stacks, plan_for, toy_extract, DEFAULT_PATCH, DEFAULT_RESIZE};
use tfseg::volgrid::{load_feature_volume, load_volume};
use tfseg::{FeatureVolume, Volume};

use crate::session::SessionError;

/// A loaded volume and its feature volume, shared read-only by sessions.
#[derive(Debug)]
pub struct VolumeEntry {
    pub id: String,
    pub volume: Arc<Volume>,
    pub features: Arc<FeatureVolume>,
}

#[derive(Debug, Default)]
pub struct Registry {
    entries: BTreeMap<String, Arc<VolumeEntry>>,
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: impl Into<String>, volume: Volume, features: FeatureVolume) -> Result<(), SessionError> {
        let id = id.into();
        if features.source_dims != volume.dims {
            return Err(SessionError::BadRequest(format!(
                "features of {id} were computed for {}, volume is {}",
                features.source_dims, volume.dims
            )));
        }
        let entry = VolumeEntry {
            id: id.clone(),
            volume: Arc::new(volume),
            features: Arc::new(features),
        };
        self.entries.insert(id, Arc::new(entry));
        Ok(())
    }

    pub fn get(&self, id: &str) -> Result<Arc<VolumeEntry>, SessionError> {
        self.entries
            .get(id)
            .cloned()
            .ok_or_else(|| SessionError::VolumeNotFound(id.to_string()))
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn entries(&self) -> impl Iterator<Item = &Arc<VolumeEntry>> {
        self.entries.values()
    }

    /// Loads every `<id>.json` volume in `dir`. Features come from `<id>.fvol`
    /// when present and from the toy extractor otherwise.
    pub fn from_dir(dir: &Path) -> Result<Self, SessionError> {
        let mut reg = Registry::new();
        let listing = fs::read_dir(dir).map_err(|source| SessionError::Io {
            path: dir.display().to_string(),
            source,
        })?;
        let mut sidecars: Vec<_> = listing
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "json") && p.with_extension("raw").exists())
            .collect();
        sidecars.sort();
        for path in sidecars {
            let id = path.file_stem().unwrap().to_string_lossy().into_owned();
            let volume = load_volume(&path)?;
            let fpath = path.with_extension("fvol");
            let features = if fpath.exists() {
                load_feature_volume(&fpath)?
            } else {
                log::info!("{id}: no feature volume, using toy features");
                toy_features(&volume)?
            };
            reg.insert(id, volume, features)?;
        }
        Ok(reg)
    }
}

pub fn toy_features(v: &Volume) -> Result<FeatureVolume, SessionError> {
    let bad = |e: tfseg::featpipe::PipelineError| SessionError::BadRequest(e.to_string());
    let plan = plan_for(v.dims, DEFAULT_RESIZE, DEFAULT_PATCH).map_err(bad)?;
    let [fx, fy, fz] = toy_extract(v, &plan).map_err(bad)?;
    merge_stacks(&fx, &fy, &fz, plan.target_feature_dims).map_err(bad)
}
