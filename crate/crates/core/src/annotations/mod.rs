//! Images, ground-truth and pseudo-label annotations, and the operations that
//! reshape whole datasets (game-level splits, class counts, concatenation).

mod manifest;

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use crate::geometry::BoundingBox;
use crate::error::{Error, Result};
pub use manifest::{load_manifest, parse_manifest, save_manifest, to_manifest_string};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Category {
    pub id: u32,
    pub name: String,
}

/// Ordered class list. Id 0 is background and never appears here.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ClassCatalog {
    categories: Vec<Category>,
}

impl ClassCatalog {
    pub fn new(categories: Vec<Category>) -> Result<Self> {
        let catalog = ClassCatalog { categories };
        catalog.validate()?;
        Ok(catalog)
    }

    /// Catalog with ids 1..=n assigned in order.
    pub fn from_names<S: AsRef<str>>(names: &[S]) -> Result<Self> {
        Self::new(
            names
                .iter()
                .enumerate()
                .map(|(i, n)| Category {
                    id: i as u32 + 1,
                    name: n.as_ref().to_string(),
                })
                .collect(),
        )
    }

    pub fn validate(&self) -> Result<()> {
        let mut names = HashSet::new();
        for (i, c) in self.categories.iter().enumerate() {
            if c.id != i as u32 + 1 {
                return Err(Error::validation(format!(
                    "category ids must be contiguous from 1; position {i} has id {}",
                    c.id
                )));
            }
            if !names.insert(c.name.as_str()) {
                return Err(Error::validation(format!(
                    "duplicate category name {:?}",
                    c.name
                )));
            }
        }
        Ok(())
    }

    pub fn categories(&self) -> &[Category] {
        &self.categories
    }

    /// Number of foreground classes (K).
    pub fn len(&self) -> usize {
        self.categories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.categories.is_empty()
    }

    pub fn contains(&self, class_id: u32) -> bool {
        class_id >= 1 && (class_id as usize) <= self.categories.len()
    }

    pub fn ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.categories.iter().map(|c| c.id)
    }

    pub fn name(&self, class_id: u32) -> Option<&str> {
        self.categories
            .get((class_id as usize).wrapping_sub(1))
            .map(|c| c.name.as_str())
    }

    pub fn id_of(&self, name: &str) -> Option<u32> {
        self.categories.iter().find(|c| c.name == name).map(|c| c.id)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: u64,
    /// Path relative to the manifest's directory.
    pub file: String,
    pub width: u32,
    pub height: u32,
    pub game_id: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Keep,
    Ignore,
    Drop,
}

impl Status {
    pub fn as_str(self) -> &'static str {
        match self {
            Status::Keep => "keep",
            Status::Ignore => "ignore",
            Status::Drop => "drop",
        }
    }

    pub fn parse(s: &str) -> Option<Status> {
        match s {
            "keep" => Some(Status::Keep),
            "ignore" => Some(Status::Ignore),
            "drop" => Some(Status::Drop),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub id: u64,
    pub image_id: u64,
    pub class_id: u32,
    pub bbox: BoundingBox,
    /// Teacher confidence; present iff the annotation is a pseudo-label or detection.
    pub score: Option<f64>,
    pub status: Option<Status>,
    /// Loss weight; present iff `status` is `Keep`.
    pub weight: Option<f64>,
}

impl Annotation {
    pub fn ground_truth(id: u64, image_id: u64, class_id: u32, bbox: BoundingBox) -> Self {
        Annotation {
            id,
            image_id,
            class_id,
            bbox,
            score: None,
            status: None,
            weight: None,
        }
    }

    /// Whether the annotation is counted as an object (not ignored, not dropped).
    pub fn is_countable(&self) -> bool {
        !matches!(self.status, Some(Status::Ignore) | Some(Status::Drop))
    }

    /// Effective status for training: unlabeled-status ground truth is `Keep` with weight 1.
    pub fn effective_status(&self) -> Status {
        self.status.unwrap_or(Status::Keep)
    }

    pub fn effective_weight(&self) -> f64 {
        match self.effective_status() {
            Status::Keep => self.weight.unwrap_or(1.0),
            _ => 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Labeled,
    Pseudo,
    /// Raw detector output exchanged with external backends.
    Detections,
}

impl DatasetKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DatasetKind::Labeled => "labeled",
            DatasetKind::Pseudo => "pseudo",
            DatasetKind::Detections => "detections",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "labeled" => Some(DatasetKind::Labeled),
            "pseudo" => Some(DatasetKind::Pseudo),
            "detections" => Some(DatasetKind::Detections),
            _ => None,
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub kind: DatasetKind,
    pub catalog: ClassCatalog,
    pub images: Vec<ImageRecord>,
    pub annotations: Vec<Annotation>,
    /// Directory that relative image paths resolve against. Not part of the manifest content
    /// and ignored by equality.
    pub root: PathBuf,
}

impl PartialEq for Dataset {
    fn eq(&self, other: &Self) -> bool {
        self.kind == other.kind
            && self.catalog == other.catalog
            && self.images == other.images
            && self.annotations == other.annotations
    }
}

impl Dataset {
    pub fn new(kind: DatasetKind, catalog: ClassCatalog) -> Self {
        Dataset {
            kind,
            catalog,
            images: Vec::new(),
            annotations: Vec::new(),
            root: PathBuf::new(),
        }
    }

    pub fn with_root(mut self, root: impl Into<PathBuf>) -> Self {
        self.root = root.into();
        self
    }

    pub fn image_path(&self, image: &ImageRecord) -> PathBuf {
        let p = Path::new(&image.file);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Annotations grouped per image, in image order.
    pub fn grouped(&self) -> Vec<Vec<&Annotation>> {
        let index: HashMap<u64, usize> = self
            .images
            .iter()
            .enumerate()
            .map(|(i, im)| (im.id, i))
            .collect();
        let mut out = vec![Vec::new(); self.images.len()];
        for a in &self.annotations {
            if let Some(&i) = index.get(&a.image_id) {
                out[i].push(a);
            }
        }
        out
    }

    /// Same images and catalog, no annotations.
    pub fn strip_annotations(&self, kind: DatasetKind) -> Dataset {
        Dataset {
            kind,
            catalog: self.catalog.clone(),
            images: self.images.clone(),
            annotations: Vec::new(),
            root: self.root.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.catalog.validate()?;
        let mut image_ids = HashSet::new();
        for im in &self.images {
            if !image_ids.insert(im.id) {
                return Err(Error::validation(format!("duplicate image id {}", im.id)));
            }
            if im.width == 0 || im.height == 0 {
                return Err(Error::validation(format!(
                    "image {} has zero size {}x{}",
                    im.id, im.width, im.height
                )));
            }
        }
        let mut ann_ids = HashSet::new();
        for (pos, a) in self.annotations.iter().enumerate() {
            let ctx = || format!("annotation #{pos} (id {})", a.id);
            if !ann_ids.insert(a.id) {
                return Err(Error::validation(format!("{}: duplicate id", ctx())));
            }
            if !image_ids.contains(&a.image_id) {
                return Err(Error::validation(format!(
                    "{}: image_id {} does not resolve to an image",
                    ctx(),
                    a.image_id
                )));
            }
            if !self.catalog.contains(a.class_id) {
                return Err(Error::validation(format!(
                    "{}: category_id {} not in catalog",
                    ctx(),
                    a.class_id
                )));
            }
            if !a.bbox.is_valid() {
                return Err(Error::validation(format!(
                    "{}: bbox {:?} must have positive finite size",
                    ctx(),
                    a.bbox
                )));
            }
            for (field, v) in [("score", a.score), ("weight", a.weight)] {
                if let Some(v) = v {
                    if !(0.0..=1.0).contains(&v) {
                        return Err(Error::validation(format!(
                            "{}: {field} {v} outside [0, 1]",
                            ctx()
                        )));
                    }
                }
            }
            match a.status {
                Some(Status::Keep) if a.weight.is_none() => {
                    return Err(Error::validation(format!(
                        "{}: status keep requires a weight",
                        ctx()
                    )));
                }
                Some(Status::Keep) if a.weight == Some(0.0) => {
                    return Err(Error::validation(format!(
                        "{}: status keep requires a positive weight",
                        ctx()
                    )));
                }
                Some(Status::Ignore) | Some(Status::Drop)
                    if a.weight.is_some_and(|w| w != 0.0) =>
                {
                    return Err(Error::validation(format!(
                        "{}: status {} must not carry a nonzero weight",
                        ctx(),
                        a.status.unwrap().as_str()
                    )));
                }
                None if a.weight.is_some() => {
                    return Err(Error::validation(format!(
                        "{}: weight without status",
                        ctx()
                    )));
                }
                _ => {}
            }
            match self.kind {
                DatasetKind::Labeled if a.score.is_some() => {
                    return Err(Error::validation(format!(
                        "{}: labeled manifest must not contain scores",
                        ctx()
                    )));
                }
                DatasetKind::Pseudo | DatasetKind::Detections if a.score.is_none() => {
                    return Err(Error::validation(format!(
                        "{}: {} manifest requires a score on every annotation",
                        ctx(),
                        self.kind
                    )));
                }
                DatasetKind::Detections if a.status.is_some() => {
                    return Err(Error::validation(format!(
                        "{}: detections carry no status",
                        ctx()
                    )));
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Whether every pseudo annotation has a policy status (and a weight if kept).
    pub fn is_policy_applied(&self) -> bool {
        self.annotations.iter().all(|a| match a.status {
            Some(Status::Keep) => a.weight.is_some(),
            Some(_) => true,
            None => false,
        })
    }
}

/// Partition a labeled dataset by game. The first side receives
/// `ceil(fraction × #games)` games drawn by a seeded shuffle of the sorted game ids.
pub fn split_by_game(d: &Dataset, labeled_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if d.kind != DatasetKind::Labeled {
        return Err(Error::validation("split_by_game requires a labeled dataset"));
    }
    if !(labeled_fraction > 0.0 && labeled_fraction <= 1.0) {
        return Err(Error::validation(format!(
            "labeled fraction {labeled_fraction} outside (0, 1]"
        )));
    }
    let games: BTreeSet<&str> = d.images.iter().map(|im| im.game_id.as_str()).collect();
    let mut games: Vec<&str> = games.into_iter().collect();
    if games.len() == 1 && labeled_fraction < 1.0 {
        return Err(Error::validation("cannot split one game"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    games.shuffle(&mut rng);
    // Tolerate representation error such as 0.3 * 10 = 3.0000000000000004.
    let n_first = ((labeled_fraction * games.len() as f64) - 1e-9).ceil() as usize;
    let n_first = n_first.clamp(1, games.len());
    let first: HashSet<&str> = games[..n_first].iter().copied().collect();

    let side = |want_first: bool| {
        let images: Vec<ImageRecord> = d
            .images
            .iter()
            .filter(|im| first.contains(im.game_id.as_str()) == want_first)
            .cloned()
            .collect();
        let ids: HashSet<u64> = images.iter().map(|im| im.id).collect();
        Dataset {
            kind: d.kind,
            catalog: d.catalog.clone(),
            images,
            annotations: d
                .annotations
                .iter()
                .filter(|a| ids.contains(&a.image_id))
                .cloned()
                .collect(),
            root: d.root.clone(),
        }
    };
    Ok((side(true), side(false)))
}

/// Object counts per class, excluding ignored and dropped annotations.
pub fn class_distribution(d: &Dataset) -> BTreeMap<u32, usize> {
    let mut counts: BTreeMap<u32, usize> = d.catalog.ids().map(|id| (id, 0)).collect();
    for a in d.annotations.iter().filter(|a| a.is_countable()) {
        *counts.entry(a.class_id).or_insert(0) += 1;
    }
    counts
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Labeled,
    Pseudo,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixedSample {
    pub origin: Origin,
    /// Image record with its globally unique id.
    pub image: ImageRecord,
    pub path: PathBuf,
    pub annotations: Vec<Annotation>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct IdMapping {
    pub origin: Origin,
    pub original_id: u64,
    pub new_id: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixedDataset {
    pub catalog: ClassCatalog,
    pub samples: Vec<MixedSample>,
    pub id_map: Vec<IdMapping>,
}

impl MixedDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn count(&self, origin: Origin) -> usize {
        self.samples.iter().filter(|s| s.origin == origin).count()
    }

    /// Mixed dataset with only labeled samples.
    pub fn labeled_only(labeled: &Dataset) -> Result<MixedDataset> {
        concat(labeled, &Dataset::new(DatasetKind::Pseudo, labeled.catalog.clone()))
    }
}

/// Concatenate labeled and pseudo-labeled data, re-keying image ids to `1..=N`
/// (labeled first, then pseudo).
pub fn concat(labeled: &Dataset, pseudo: &Dataset) -> Result<MixedDataset> {
    if labeled.catalog != pseudo.catalog {
        return Err(Error::validation(
            "cannot concatenate datasets with different class catalogs",
        ));
    }
    let mut samples = Vec::with_capacity(labeled.len() + pseudo.len());
    let mut id_map = Vec::with_capacity(labeled.len() + pseudo.len());
    for (origin, d) in [(Origin::Labeled, labeled), (Origin::Pseudo, pseudo)] {
        for (image, anns) in d.images.iter().zip(d.grouped()) {
            let new_id = samples.len() as u64 + 1;
            id_map.push(IdMapping {
                origin,
                original_id: image.id,
                new_id,
            });
            samples.push(MixedSample {
                origin,
                image: ImageRecord {
                    id: new_id,
                    ..image.clone()
                },
                path: d.image_path(image),
                annotations: anns
                    .into_iter()
                    .map(|a| Annotation {
                        image_id: new_id,
                        ..a.clone()
                    })
                    .collect(),
            });
        }
    }
    Ok(MixedDataset {
        catalog: labeled.catalog.clone(),
        samples,
        id_map,
    })
}
