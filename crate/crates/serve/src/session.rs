use std::collections::hash_map::DefaultHasher;
use std::collections::BTreeMap;
use std::fs;
use std::hash::{Hash, Hasher};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use tfseg::bls3d::{RefineConfig, SolverError};
use tfseg::isoray::{background_frame, png_bytes, render, render_slice_overlay, Camera, RenderError, RenderSettings};
use tfseg::simquery::{scaled_similarity, AnnotationSet, ClassDef, QueryError};
use tfseg::volgrid::{load_similarity_volume, save_similarity_volume, GridError};
use tfseg::{Axis, Dims, FeatureVolume, SimilarityVolume, Volume};

use crate::registry::{Registry, VolumeEntry};

/// Version tag carried by every JSON body.
pub const API_VERSION: u64 = 1;

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("volume `{0}` not found")]
    VolumeNotFound(String),
    #[error("session `{0}` not found")]
    SessionNotFound(String),
    #[error("class {0} not found")]
    UnknownClass(u32),
    #[error("unsupported body version {0}, expected \"v\": 1")]
    Version(String),
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error(transparent)]
    Query(#[from] QueryError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    SimilarityUpdated,
    RefinedReady,
    RefinedInvalidated,
    RefineFailed,
    ClassUpdated,
    ClassDeleted,
}

/// WebSocket event. Clients re-fetch images when a digest changes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub v: u64,
    #[serde(rename = "type")]
    pub kind: EventKind,
    pub class_id: u32,
    pub digest: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub job_id: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
}

impl Event {
    pub fn new(kind: EventKind, class_id: u32, digest: Option<String>) -> Self {
        Event {
            v: API_VERSION,
            kind,
            class_id,
            digest,
            job_id: None,
            message: None,
        }
    }
}

/// Content hash of a similarity map.
pub fn digest(s: &SimilarityVolume) -> String {
    let mut h = DefaultHasher::new();
    s.dims.0.hash(&mut h);
    for v in s.data() {
        v.to_bits().hash(&mut h);
    }
    format!("{:016x}", h.finish())
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as u64)
}

#[derive(Clone, Debug, Default)]
pub struct ClassMaps {
    pub low: Option<Arc<SimilarityVolume>>,
    pub refined: Option<Arc<SimilarityVolume>>,
    /// Bumped whenever the inputs of the refined map change.
    pub generation: u64,
}

impl ClassMaps {
    /// Map shown in views: refined when present, else low.
    pub fn displayed(&self) -> Option<&Arc<SimilarityVolume>> {
        self.refined.as_ref().or(self.low.as_ref())
    }
}

/// Result of an annotation edit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditOutcome {
    pub v: u64,
    pub class_id: u32,
    pub changed: usize,
    pub digest: Option<String>,
    pub recomputes: u64,
}

/// Everything a refine job needs, captured so the solver runs without the
/// session lock.
#[derive(Clone, Debug)]
pub struct RefineInput {
    pub class_id: u32,
    pub generation: u64,
    pub low: Option<Arc<SimilarityVolume>>,
    pub volume: Arc<Volume>,
    pub cfg: RefineConfig,
}

impl RefineInput {
    pub fn run(&self) -> Result<SimilarityVolume, SessionError> {
        let low = self.low.as_ref().ok_or(QueryError::EmptyAnnotationSet)?;
        let r = tfseg::bls3d::refine(low, &self.volume, &self.cfg)?;
        Ok(SimilarityVolume::new(
            r.volume.dims,
            r.volume.data().to_vec(),
            tfseg::volgrid::Resolution::Refined,
            self.class_id,
        )?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapDigests {
    pub low: Option<String>,
    pub refined: Option<String>,
}

/// JSON view of a session.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub v: u64,
    pub id: String,
    pub volume_id: String,
    pub dims: Dims,
    pub feature_dims: Dims,
    pub classes: Vec<ClassDef>,
    pub annotations: BTreeMap<u32, Vec<[u32; 3]>>,
    pub similarities: BTreeMap<u32, MapDigests>,
    pub camera: Camera,
    pub created_ms: u64,
    pub modified_ms: u64,
    pub recomputes: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct SavedMaps {
    low: Option<String>,
    refined: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SavedSession {
    v: u64,
    id: String,
    volume_id: String,
    classes: Vec<ClassDef>,
    annotations: BTreeMap<u32, Vec<[u32; 3]>>,
    maps: BTreeMap<u32, SavedMaps>,
    camera: Camera,
    render_settings: RenderSettings,
    created_ms: u64,
    modified_ms: u64,
}

/// One interactive segmentation session over a registered volume.
#[derive(Debug)]
pub struct Session {
    id: String,
    volume_id: String,
    volume: Arc<Volume>,
    features: Arc<FeatureVolume>,
    classes: Vec<ClassDef>,
    annotations: BTreeMap<u32, AnnotationSet>,
    maps: BTreeMap<u32, ClassMaps>,
    pub camera: Camera,
    pub render_settings: RenderSettings,
    created_ms: u64,
    modified_ms: u64,
    recomputes: u64,
}

impl Session {
    pub fn new(id: impl Into<String>, entry: &VolumeEntry) -> Self {
        let t = now_ms();
        Session {
            id: id.into(),
            volume_id: entry.id.clone(),
            volume: entry.volume.clone(),
            features: entry.features.clone(),
            classes: Vec::new(),
            annotations: BTreeMap::new(),
            maps: BTreeMap::new(),
            camera: Camera::overview(entry.volume.dims, 512, 512),
            render_settings: RenderSettings::default(),
            created_ms: t,
            modified_ms: t,
            recomputes: 0,
        }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn volume(&self) -> &Volume {
        &self.volume
    }

    pub fn classes(&self) -> &[ClassDef] {
        &self.classes
    }

    pub fn class(&self, id: u32) -> Result<&ClassDef, SessionError> {
        self.classes
            .iter()
            .find(|c| c.id == id)
            .ok_or(SessionError::UnknownClass(id))
    }

    pub fn annotations(&self, id: u32) -> Result<&AnnotationSet, SessionError> {
        self.annotations.get(&id).ok_or(SessionError::UnknownClass(id))
    }

    pub fn maps(&self, id: u32) -> Result<&ClassMaps, SessionError> {
        self.maps.get(&id).ok_or(SessionError::UnknownClass(id))
    }

    /// Number of low-similarity recomputations so far.
    pub fn recomputes(&self) -> u64 {
        self.recomputes
    }

    fn touch(&mut self) {
        self.modified_ms = now_ms();
    }

    /// Smallest id not used by any class.
    pub fn next_class_id(&self) -> u32 {
        self.classes.iter().map(|c| c.id).max().unwrap_or(0) + 1
    }

    /// Adds or replaces a class. A proximity change recomputes the low map;
    /// proximity and solver changes drop the refined map. Style and iso-value
    /// changes leave both maps alone.
    pub fn upsert_class(&mut self, def: ClassDef) -> Result<Vec<Event>, SessionError> {
        def.validate()?;
        let id = def.id;
        let mut events = vec![];
        match self.classes.iter().position(|c| c.id == id) {
            None => {
                self.classes.push(def);
                self.annotations.insert(id, AnnotationSet::new(id));
                self.maps.insert(id, ClassMaps::default());
            }
            Some(k) => {
                let old = std::mem::replace(&mut self.classes[k], def);
                let new = &self.classes[k];
                if old.proximity != new.proximity {
                    events.extend(self.recompute(id)?);
                } else if old.solver_cfg != new.solver_cfg {
                    events.extend(self.invalidate_refined(id));
                }
            }
        }
        events.push(Event::new(EventKind::ClassUpdated, id, None));
        self.touch();
        Ok(events)
    }

    /// Removes a class with its annotations and maps.
    pub fn delete_class(&mut self, id: u32) -> Result<Vec<Event>, SessionError> {
        let k = self
            .classes
            .iter()
            .position(|c| c.id == id)
            .ok_or(SessionError::UnknownClass(id))?;
        self.classes.remove(k);
        self.annotations.remove(&id);
        self.maps.remove(&id);
        self.touch();
        Ok(vec![Event::new(EventKind::ClassDeleted, id, None)])
    }

    fn invalidate_refined(&mut self, id: u32) -> Vec<Event> {
        let maps = self.maps.entry(id).or_default();
        maps.generation += 1;
        match maps.refined.take() {
            Some(_) => vec![Event::new(EventKind::RefinedInvalidated, id, None)],
            None => vec![],
        }
    }

    /// Recomputes the low map of `id` from its annotations and drops any
    /// refined map.
    fn recompute(&mut self, id: u32) -> Result<Vec<Event>, SessionError> {
        let class = self.class(id)?.clone();
        let set = self.annotations.get_mut(&id).ok_or(SessionError::UnknownClass(id))?;
        let low = if set.is_empty() {
            None
        } else {
            set.refresh(&self.features);
            Some(Arc::new(scaled_similarity(set, &self.features, class.proximity)?))
        };
        self.recomputes += 1;
        let mut events = self.invalidate_refined(id);
        let d = low.as_deref().map(digest);
        self.maps.entry(id).or_default().low = low;
        events.push(Event::new(EventKind::SimilarityUpdated, id, d));
        Ok(events)
    }

    fn outcome(&self, id: u32, changed: usize) -> EditOutcome {
        EditOutcome {
            v: API_VERSION,
            class_id: id,
            changed,
            digest: self.maps[&id].low.as_deref().map(digest),
            recomputes: self.recomputes,
        }
    }

    /// Adds a batch of points and recomputes the class's low map once.
    pub fn annotate(&mut self, id: u32, points: &[[i64; 3]]) -> Result<(EditOutcome, Vec<Event>), SessionError> {
        self.class(id)?;
        let set = self.annotations.get_mut(&id).ok_or(SessionError::UnknownClass(id))?;
        let added = set.add_all(points, &self.features)?;
        let events = if added > 0 { self.recompute(id)? } else { vec![] };
        self.touch();
        Ok((self.outcome(id, added), events))
    }

    /// Delete brush around `center`.
    pub fn erase(&mut self, id: u32, center: [f32; 3], radius: f32) -> Result<(EditOutcome, Vec<Event>), SessionError> {
        self.class(id)?;
        if !(radius >= 0.0) || !center.iter().all(|v| v.is_finite()) {
            return Err(SessionError::BadRequest("erase needs a finite point and radius >= 0".into()));
        }
        let set = self.annotations.get_mut(&id).ok_or(SessionError::UnknownClass(id))?;
        let removed = set.remove_near(center, radius);
        let events = if removed > 0 { self.recompute(id)? } else { vec![] };
        self.touch();
        Ok((self.outcome(id, removed), events))
    }

    pub fn refine_input(&self, id: u32) -> Result<RefineInput, SessionError> {
        let class = self.class(id)?;
        let maps = self.maps(id)?;
        Ok(RefineInput {
            class_id: id,
            generation: maps.generation,
            low: maps.low.clone(),
            volume: self.volume.clone(),
            cfg: class.solver_cfg.clone(),
        })
    }

    /// Stores a refined map unless its inputs changed while it was computed.
    pub fn install_refined(&mut self, input: &RefineInput, refined: SimilarityVolume) -> Option<Event> {
        let maps = self.maps.get_mut(&input.class_id)?;
        if maps.generation != input.generation {
            return None;
        }
        let d = digest(&refined);
        maps.refined = Some(Arc::new(refined));
        self.touch();
        Some(Event::new(EventKind::RefinedReady, input.class_id, Some(d)))
    }

    pub fn slice_png(&self, axis: Axis, index: usize, overlay: bool) -> Result<Vec<u8>, SessionError> {
        let mut layers = vec![];
        if overlay {
            for c in self.classes.iter().filter(|c| c.visible) {
                if let Some(s) = self.maps[&c.id].displayed() {
                    layers.push((c, s.as_ref(), &self.annotations[&c.id]));
                }
            }
        }
        let img = render_slice_overlay(&self.volume, axis, index, &layers)?;
        Ok(png_bytes(&img)?)
    }

    /// Renders with the refined map of each class when present, else low.
    pub fn render_png(&self, cam: &Camera) -> Result<Vec<u8>, SessionError> {
        let layers: Vec<(&ClassDef, &SimilarityVolume)> = self
            .classes
            .iter()
            .filter_map(|c| self.maps[&c.id].displayed().map(|s| (c, s.as_ref())))
            .collect();
        let img = match render(&layers, self.volume.dims, cam, &self.render_settings) {
            Err(RenderError::NoEnabledClasses) => {
                cam.validate()?;
                background_frame(cam, &self.render_settings)
            }
            r => r?,
        };
        Ok(png_bytes(&img)?)
    }

    pub fn snapshot(&self) -> Snapshot {
        Snapshot {
            v: API_VERSION,
            id: self.id.clone(),
            volume_id: self.volume_id.clone(),
            dims: self.volume.dims,
            feature_dims: self.features.dims,
            classes: self.classes.clone(),
            annotations: self
                .annotations
                .iter()
                .map(|(k, s)| (*k, s.points().to_vec()))
                .collect(),
            similarities: self
                .maps
                .iter()
                .map(|(k, m)| {
                    let d = MapDigests {
                        low: m.low.as_deref().map(digest),
                        refined: m.refined.as_deref().map(digest),
                    };
                    (*k, d)
                })
                .collect(),
            camera: self.camera.clone(),
            created_ms: self.created_ms,
            modified_ms: self.modified_ms,
            recomputes: self.recomputes,
        }
    }

    /// Writes `session.json` plus one SVOL per stored map into `dir`.
    pub fn save(&self, dir: &Path) -> Result<PathBuf, SessionError> {
        let io = |source| SessionError::Io {
            path: dir.display().to_string(),
            source,
        };
        fs::create_dir_all(dir).map_err(io)?;
        let mut maps = BTreeMap::new();
        for (id, m) in &self.maps {
            let write = |s: &Option<Arc<SimilarityVolume>>, tag: &str| -> Result<Option<String>, SessionError> {
                let Some(s) = s else { return Ok(None) };
                let name = format!("class_{id}_{tag}.svol");
                save_similarity_volume(s, &dir.join(&name))?;
                Ok(Some(name))
            };
            let saved = SavedMaps {
                low: write(&m.low, "low")?,
                refined: write(&m.refined, "refined")?,
            };
            maps.insert(*id, saved);
        }
        let saved = SavedSession {
            v: API_VERSION,
            id: self.id.clone(),
            volume_id: self.volume_id.clone(),
            classes: self.classes.clone(),
            annotations: self
                .annotations
                .iter()
                .map(|(k, s)| (*k, s.points().to_vec()))
                .collect(),
            maps,
            camera: self.camera.clone(),
            render_settings: self.render_settings.clone(),
            created_ms: self.created_ms,
            modified_ms: self.modified_ms,
        };
        let path = dir.join("session.json");
        fs::write(&path, serde_json::to_vec_pretty(&saved)?).map_err(|source| SessionError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Ok(path)
    }

    /// Restores a saved session under a new id.
    pub fn load(path: &Path, id: impl Into<String>, registry: &Registry) -> Result<Self, SessionError> {
        let text = fs::read_to_string(path).map_err(|source| SessionError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let value: serde_json::Value = serde_json::from_str(&text)?;
        check_version(&value)?;
        let saved: SavedSession = serde_json::from_value(value)?;
        let entry = registry.get(&saved.volume_id)?;
        let mut s = Session::new(id, &entry);
        s.camera = saved.camera;
        s.render_settings = saved.render_settings;
        s.created_ms = saved.created_ms;
        s.modified_ms = saved.modified_ms;
        let dir = path.parent().unwrap_or(Path::new("."));
        for def in saved.classes {
            let id = def.id;
            s.upsert_class(def)?;
            let set = s.annotations.get_mut(&id).unwrap();
            let pts = saved.annotations.get(&id).cloned().unwrap_or_default();
            if let Some(p) = pts.iter().find(|p| !s.volume.dims.contains(p.map(|v| v as i64))) {
                return Err(SessionError::BadRequest(format!("saved point {p:?} outside the volume")));
            }
            set.extend_points(pts);
            set.refresh(&s.features);
            let Some(m) = saved.maps.get(&id) else { continue };
            let load = |name: &Option<String>, expect: Option<Dims>| -> Result<Option<Arc<SimilarityVolume>>, SessionError> {
                let Some(name) = name else { return Ok(None) };
                let v = load_similarity_volume(&dir.join(name), id)?;
                if let Some(d) = expect {
                    if v.dims != d {
                        return Err(SessionError::BadRequest(format!("{name}: dims {} do not match features {d}", v.dims)));
                    }
                }
                Ok(Some(Arc::new(v)))
            };
            let maps = s.maps.get_mut(&id).unwrap();
            maps.low = load(&m.low, Some(s.features.dims))?;
            maps.refined = load(&m.refined, None)?;
        }
        Ok(s)
    }
}

/// Rejects JSON bodies whose `"v"` is missing or not 1.
pub fn check_version(body: &serde_json::Value) -> Result<(), SessionError> {
    match body.get("v") {
        Some(v) if v.as_u64() == Some(API_VERSION) => Ok(()),
        Some(v) => Err(SessionError::Version(v.to_string())),
        None => Err(SessionError::Version("missing".into())),
    }
}
