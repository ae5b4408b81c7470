use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::scene::{render, Attribute, SceneSpec, SCENE_COUNT};
use super::{DataError, Image};
use crate::numerics::Rng;

pub const FORMAT_VERSION: u64 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn checksum_string(bytes: &[u8]) -> String {
    format!("{:016x}", fnv1a64(bytes))
}

const TEMPLATE_WORDS: [&str; 2] = ["make", "the"];

/// Closed token vocabulary; ids are contiguous from 0.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "BTreeMap<String, usize>", into = "BTreeMap<String, usize>")]
pub struct Vocabulary {
    tokens: Vec<String>,
}

impl Vocabulary {
    /// Template words, attribute names, then every attribute value.
    pub fn standard() -> Self {
        let mut tokens: Vec<String> = TEMPLATE_WORDS.iter().map(|s| s.to_string()).collect();
        tokens.extend(Attribute::ALL.iter().map(|a| a.as_str().to_string()));
        for a in Attribute::ALL {
            tokens.extend(a.value_names().into_iter().map(String::from));
        }
        Self { tokens }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.tokens.iter().position(|t| t == token)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn encode(&self, words: &[&str]) -> Result<Vec<usize>, DataError> {
        words
            .iter()
            .map(|w| {
                self.id(w)
                    .ok_or_else(|| DataError::Invalid(format!("token {w:?} not in vocabulary")))
            })
            .collect()
    }
}

impl TryFrom<BTreeMap<String, usize>> for Vocabulary {
    type Error = String;

    fn try_from(map: BTreeMap<String, usize>) -> Result<Self, Self::Error> {
        let mut tokens = vec![None; map.len()];
        for (tok, id) in map {
            let slot = tokens
                .get_mut(id)
                .ok_or_else(|| format!("vocabulary id {id} is not contiguous"))?;
            if slot.is_some() {
                return Err(format!("vocabulary id {id} assigned twice"));
            }
            *slot = Some(tok);
        }
        Ok(Self {
            tokens: tokens.into_iter().map(|t| t.expect("filled")).collect(),
        })
    }
}

impl From<Vocabulary> for BTreeMap<String, usize> {
    fn from(v: Vocabulary) -> Self {
        v.tokens.into_iter().enumerate().map(|(i, t)| (t, i)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn parse(text: &str) -> Option<Self> {
        match text {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// `(train, val, test)` fractions; must sum to 1.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios(pub [f64; 3]);

impl Default for SplitRatios {
    fn default() -> Self {
        Self([0.8, 0.1, 0.1])
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<(), DataError> {
        let sum: f64 = self.0.iter().sum();
        if self.0.iter().any(|r| !r.is_finite() || *r < 0.0) || (sum - 1.0).abs() > 1e-9 {
            return Err(DataError::Invalid(format!(
                "split ratios {:?} must be non-negative and sum to 1",
                self.0
            )));
        }
        Ok(())
    }

    /// Split sizes by rounding train and val; test takes the remainder.
    pub fn sizes(&self, n: usize) -> Result<[usize; 3], DataError> {
        self.validate()?;
        let train = (n as f64 * self.0[0]).round() as usize;
        let val = (n as f64 * self.0[1]).round() as usize;
        let test = n
            .checked_sub(train + val)
            .ok_or_else(|| DataError::Infeasible(format!("ratios {:?} overflow n = {n}", self.0)))?;
        Ok([train, val, test])
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Edit {
    pub attribute: Attribute,
    pub value: String,
}

impl Edit {
    pub fn words(&self) -> Vec<&str> {
        vec![TEMPLATE_WORDS[0], TEMPLATE_WORDS[1], self.attribute.as_str(), &self.value]
    }

    pub fn text(&self) -> String {
        self.words().join(" ")
    }

    pub fn value_index(&self) -> Option<usize> {
        self.attribute.value_names().iter().position(|v| *v == self.value)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GalleryEntry {
    pub id: usize,
    pub file: String,
    pub checksum: String,
    pub scene: SceneSpec,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TripletRecord {
    pub id: usize,
    /// Gallery id of the reference scene.
    pub reference: usize,
    /// Gallery id of the target scene.
    pub target: usize,
    pub edit: Edit,
    pub text: String,
    pub tokens: Vec<usize>,
    pub subset_group: u64,
    pub split: Split,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Splits {
    pub fn get(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u64,
    pub seed: u64,
    pub image_size: usize,
    /// Patch sizes that tile `image_size` exactly.
    pub patch_sizes: Vec<usize>,
    pub split_ratios: SplitRatios,
    pub vocabulary: Vocabulary,
    pub gallery: Vec<GalleryEntry>,
    pub triplets: Vec<TripletRecord>,
    pub splits: Splits,
}

/// Scenes sharing every attribute except `attr` form one group.
pub fn subset_group(scene: &SceneSpec, attr: Attribute) -> u64 {
    (attr.index() * SCENE_COUNT + scene.with(attr, 0).index()) as u64
}

fn image_file(id: usize) -> String {
    format!("images/{id:04}.ppm")
}

impl DatasetManifest {
    /// Checks every structural invariant that does not need image bytes.
    pub fn validate(&self) -> Result<(), DataError> {
        let invalid = |m: String| Err(DataError::Invalid(m));
        if self.format_version != FORMAT_VERSION {
            return Err(DataError::Version {
                found: self.format_version,
                supported: FORMAT_VERSION,
            });
        }
        let expected_patches: Vec<usize> = (1..=self.image_size).filter(|p| self.image_size % p == 0).collect();
        if self.patch_sizes != expected_patches {
            return invalid(format!("patch_sizes {:?} do not tile image size", self.patch_sizes));
        }
        self.split_ratios.validate()?;
        if self.vocabulary != Vocabulary::standard() {
            return invalid("vocabulary differs from the template vocabulary".into());
        }
        let mut scenes = HashSet::new();
        for (i, g) in self.gallery.iter().enumerate() {
            if g.id != i || g.file != image_file(i) {
                return invalid(format!("gallery entry {i} has id {} file {}", g.id, g.file));
            }
            if !scenes.insert(g.scene) {
                return invalid(format!("gallery entry {i} duplicates a scene"));
            }
        }
        let mut assigned = HashMap::new();
        for split in [Split::Train, Split::Val, Split::Test] {
            for &id in self.splits.get(split) {
                if assigned.insert(id, split).is_some() {
                    return invalid(format!("triplet {id} appears in more than one split"));
                }
            }
        }
        if assigned.len() != self.triplets.len() {
            return invalid("splits do not cover every triplet".into());
        }
        for (i, t) in self.triplets.iter().enumerate() {
            if t.id != i {
                return invalid(format!("triplet at position {i} has id {}", t.id));
            }
            if assigned.get(&i) != Some(&t.split) {
                return invalid(format!("triplet {i} split does not match split lists"));
            }
            let (Some(r), Some(g)) = (self.gallery.get(t.reference), self.gallery.get(t.target)) else {
                return invalid(format!("triplet {i} references a missing gallery image"));
            };
            let value = t
                .edit
                .value_index()
                .ok_or_else(|| DataError::Invalid(format!("triplet {i} edit value {:?}", t.edit.value)))?;
            if r.scene.get(t.edit.attribute) == value || r.scene.with(t.edit.attribute, value) != g.scene {
                return invalid(format!("triplet {i} target is not the reference with one edit"));
            }
            if t.text != t.edit.text() || t.tokens != self.vocabulary.encode(&t.edit.words())? {
                return invalid(format!("triplet {i} text does not match its edit"));
            }
            if t.subset_group != subset_group(&r.scene, t.edit.attribute) {
                return invalid(format!("triplet {i} subset group mismatch"));
            }
        }
        Ok(())
    }
}

/// A manifest plus decoded gallery images.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub images: Vec<Image>,
    groups: HashMap<u64, Vec<usize>>,
}

impl Dataset {
    fn new(manifest: DatasetManifest, images: Vec<Image>) -> Self {
        let mut groups: HashMap<u64, Vec<usize>> = HashMap::new();
        for g in &manifest.gallery {
            for &a in Attribute::ALL {
                groups.entry(subset_group(&g.scene, a)).or_default().push(g.id);
            }
        }
        Self {
            manifest,
            images,
            groups,
        }
    }

    pub fn triplet(&self, id: usize) -> &TripletRecord {
        &self.manifest.triplets[id]
    }

    pub fn split(&self, split: Split) -> &[usize] {
        self.manifest.splits.get(split)
    }

    pub fn scene(&self, gallery_id: usize) -> &SceneSpec {
        &self.manifest.gallery[gallery_id].scene
    }

    pub fn image(&self, gallery_id: usize) -> &Image {
        &self.images[gallery_id]
    }

    pub fn gallery_len(&self) -> usize {
        self.manifest.gallery.len()
    }

    /// Gallery ids in a subset group, ascending.
    pub fn group_members(&self, group: u64) -> &[usize] {
        self.groups.get(&group).map(Vec::as_slice).unwrap_or(&[])
    }
}

/// Builds `n_triplets` distinct single-edit triplets, renders the gallery
/// of every scene they touch, and assigns splits. Pure in its arguments.
pub fn generate_dataset(
    seed: u64,
    n_triplets: usize,
    ratios: SplitRatios,
    image_size: usize,
) -> Result<Dataset, DataError> {
    let sizes = ratios.sizes(n_triplets)?;
    if n_triplets < 10 {
        return Err(DataError::Infeasible(format!(
            "need at least 10 triplets, requested {n_triplets}"
        )));
    }
    // every (reference, attribute, new value) combination
    let mut combos = Vec::new();
    for scene in 0..SCENE_COUNT {
        for &a in Attribute::ALL {
            let current = SceneSpec::from_index(scene).get(a);
            for v in (0..a.cardinality()).filter(|&v| v != current) {
                combos.push((scene, a, v));
            }
        }
    }
    if n_triplets > combos.len() {
        return Err(DataError::Infeasible(format!(
            "requested {n_triplets} distinct triplets, only {} exist",
            combos.len()
        )));
    }
    let root = Rng::new(seed);
    root.substream(1).shuffle(&mut combos);
    combos.truncate(n_triplets);

    let mut used: Vec<usize> = combos
        .iter()
        .flat_map(|&(s, a, v)| [s, SceneSpec::from_index(s).with(a, v).index()])
        .collect();
    used.sort_unstable();
    used.dedup();
    let gallery_of: HashMap<usize, usize> = used.iter().enumerate().map(|(g, &s)| (s, g)).collect();

    let mut images = Vec::with_capacity(used.len());
    let mut gallery = Vec::with_capacity(used.len());
    for (id, &s) in used.iter().enumerate() {
        let scene = SceneSpec::from_index(s);
        let img = render(&scene, image_size)?;
        gallery.push(GalleryEntry {
            id,
            file: image_file(id),
            checksum: checksum_string(&img.to_ppm()),
            scene,
        });
        images.push(img);
    }

    let mut order: Vec<usize> = (0..n_triplets).collect();
    root.substream(2).shuffle(&mut order);
    let mut split_of = vec![Split::Train; n_triplets];
    for &i in &order[sizes[0]..sizes[0] + sizes[1]] {
        split_of[i] = Split::Val;
    }
    for &i in &order[sizes[0] + sizes[1]..] {
        split_of[i] = Split::Test;
    }

    let vocabulary = Vocabulary::standard();
    let mut triplets = Vec::with_capacity(n_triplets);
    let mut splits = Splits::default();
    for (id, &(s, a, v)) in combos.iter().enumerate() {
        let reference = SceneSpec::from_index(s);
        let target = reference.with(a, v);
        let edit = Edit {
            attribute: a,
            value: a.value_names()[v].to_string(),
        };
        let tokens = vocabulary.encode(&edit.words())?;
        match split_of[id] {
            Split::Train => splits.train.push(id),
            Split::Val => splits.val.push(id),
            Split::Test => splits.test.push(id),
        }
        triplets.push(TripletRecord {
            id,
            reference: gallery_of[&s],
            target: gallery_of[&target.index()],
            text: edit.text(),
            edit,
            tokens,
            subset_group: subset_group(&reference, a),
            split: split_of[id],
        });
    }

    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION,
        seed,
        image_size,
        patch_sizes: (1..=image_size).filter(|p| image_size % p == 0).collect(),
        split_ratios: ratios,
        vocabulary,
        gallery,
        triplets,
        splits,
    };
    manifest.validate()?;
    Ok(Dataset::new(manifest, images))
}

pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<(), DataError> {
    let images_dir = dir.join("images");
    fs::create_dir_all(&images_dir).map_err(|e| DataError::io(&images_dir, e))?;
    for (entry, img) in dataset.manifest.gallery.iter().zip(&dataset.images) {
        let path = dir.join(&entry.file);
        fs::write(&path, img.to_ppm()).map_err(|e| DataError::io(&path, e))?;
    }
    let mut text = serde_json::to_string_pretty(&dataset.manifest)
        .map_err(|e| DataError::Format(format!("manifest serialization: {e}")))?;
    text.push('\n');
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, text).map_err(|e| DataError::io(&path, e))
}

/// Parses and validates manifest text without touching image files.
pub fn parse_manifest(text: &str) -> Result<DatasetManifest, DataError> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| DataError::Format(format!("manifest json: {e}")))?;
    let version = value
        .get("format_version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| DataError::Format("manifest lacks an integer format_version".into()))?;
    if version != FORMAT_VERSION {
        return Err(DataError::Version {
            found: version,
            supported: FORMAT_VERSION,
        });
    }
    let manifest: DatasetManifest =
        serde_json::from_value(value).map_err(|e| DataError::Format(format!("manifest: {e}")))?;
    manifest.validate()?;
    Ok(manifest)
}

/// Loads a dataset directory, verifying every image checksum. Either the
/// whole dataset loads or an error is returned.
pub fn load_dataset(dir: &Path) -> Result<Dataset, DataError> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| DataError::io(&path, e))?;
    let manifest = parse_manifest(&text)?;
    let mut images = Vec::with_capacity(manifest.gallery.len());
    for entry in &manifest.gallery {
        let path = dir.join(&entry.file);
        let bytes = fs::read(&path).map_err(|e| DataError::io(&path, e))?;
        let actual = checksum_string(&bytes);
        if actual != entry.checksum {
            return Err(DataError::Checksum {
                file: entry.file.clone(),
                expected: entry.checksum.clone(),
                actual,
            });
        }
        let img = Image::from_ppm(&bytes)?;
        if img.width != manifest.image_size || img.height != manifest.image_size {
            return Err(DataError::Invalid(format!(
                "{} is {}x{}, manifest says {}",
                entry.file, img.width, img.height, manifest.image_size
            )));
        }
        images.push(img);
    }
    Ok(Dataset::new(manifest, images))
}
