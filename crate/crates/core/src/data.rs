//! Synthetic scenes standing in for detector output: scene sampling,
//! multi-view feature rendering, templated reference captions, vocabulary
//! construction, on-disk datasets and batch assembly.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::decoder::{CaptionBatch, Vocab, RESERVED};
use crate::error::{Error, Result};
use crate::features::FeatureViews;
use crate::metrics::ReferenceRow;
use crate::tensor::Tensor;

pub const SHAPES: [&str; 4] = ["circle", "square", "triangle", "star"];
pub const COLORS: [&str; 4] = ["red", "green", "blue", "yellow"];
pub const SIZES: [&str; 2] = ["small", "large"];
pub const LATENT_DIM: usize = 12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Relation {
    LeftOf,
    Above,
    NextTo,
}

impl Relation {
    pub const ALL: [Relation; 3] = [Relation::LeftOf, Relation::Above, Relation::NextTo];

    pub fn word(self) -> &'static str {
        match self {
            Relation::LeftOf => "left-of",
            Relation::Above => "above",
            Relation::NextTo => "next-to",
        }
    }

    pub fn from_word(w: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|r| r.word() == w)
    }

    /// Whether the relation holds with `a` as subject and `b` as object.
    pub fn holds(self, a: &SceneObject, b: &SceneObject) -> bool {
        let (dx, dy) = (b.x - a.x, b.y - a.y);
        match self {
            Relation::LeftOf => dx >= 0.3,
            Relation::Above => dy >= 0.2,
            Relation::NextTo => dx > 0.0 && dx <= 0.2 && dy.abs() <= 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: usize,
    pub color: usize,
    pub size: usize,
    pub x: f64,
    pub y: f64,
}

impl SceneObject {
    /// One-hot shape, color and size blocks followed by x and y.
    pub fn latent(&self) -> [f64; LATENT_DIM] {
        let mut z = [0.0; LATENT_DIM];
        z[self.shape] = 1.0;
        z[4 + self.color] = 1.0;
        z[8 + self.size] = 1.0;
        z[10] = self.x;
        z[11] = self.y;
        z
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub seed: u64,
    pub objects: Vec<SceneObject>,
    pub relation: Relation,
    pub subject: usize,
    pub object: usize,
}

/// Samples a scene: a related object pair in the upper band (y < 0.6) and
/// distractors in the lower band, with uniformly drawn attributes.
pub fn gen_scene(seed: u64, min_objects: usize, max_objects: usize) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = rng.gen_range(min_objects.max(2)..=max_objects.max(min_objects.max(2)));
    let relation = Relation::ALL[rng.gen_range(0..3)];
    let attrs = |rng: &mut ChaCha8Rng| (rng.gen_range(0..4), rng.gen_range(0..4), rng.gen_range(0..2));
    let (sx, sy, ox, oy) = match relation {
        Relation::LeftOf => {
            let sx = rng.gen_range(0.05..0.35);
            let ox = sx + rng.gen_range(0.35..0.6);
            let sy = rng.gen_range(0.1..0.5);
            (sx, sy, ox, sy + rng.gen_range(-0.05..0.05))
        }
        Relation::Above => {
            let sy = rng.gen_range(0.05..0.2);
            let oy = sy + rng.gen_range(0.25..0.35);
            let sx = rng.gen_range(0.1..0.9);
            (sx, sy, sx + rng.gen_range(-0.05..0.05), oy)
        }
        Relation::NextTo => {
            let sx = rng.gen_range(0.1..0.75);
            let sy = rng.gen_range(0.1..0.5);
            (sx, sy, sx + rng.gen_range(0.08..0.15), sy + rng.gen_range(-0.05..0.05))
        }
    };
    let mut objects = Vec::with_capacity(count);
    for (x, y) in [(sx, sy), (ox, oy)] {
        let (shape, color, size) = attrs(&mut rng);
        objects.push(SceneObject { shape, color, size, x, y });
    }
    for _ in 2..count {
        let (shape, color, size) = attrs(&mut rng);
        let x = rng.gen_range(0.05..0.95);
        let y = rng.gen_range(0.8..0.95);
        objects.push(SceneObject { shape, color, size, x, y });
    }
    let mut order: Vec<usize> = (0..count).collect();
    order.shuffle(&mut rng);
    let objects: Vec<SceneObject> = order.iter().map(|&i| objects[i].clone()).collect();
    let subject = order.iter().position(|&i| i == 0).expect("subject present");
    let object = order.iter().position(|&i| i == 1).expect("object present");
    Scene {
        seed,
        objects,
        relation,
        subject,
        object,
    }
}

/// Attribute group a view can fail to observe.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Attribute {
    Shape,
    Color,
    Size,
    Position,
}

impl Attribute {
    fn channels(self) -> std::ops::Range<usize> {
        match self {
            Attribute::Shape => 0..4,
            Attribute::Color => 4..8,
            Attribute::Size => 8..10,
            Attribute::Position => 10..12,
        }
    }
}

/// How one simulated detector turns latent objects into features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ViewSpec {
    pub width: usize,
    /// Seed of the fixed random projection; `None` embeds the latent
    /// vector unchanged in the first 12 columns.
    pub projection_seed: Option<u64>,
    pub noise_sigma: f64,
    /// Per-object drop probability (unaligned datasets only).
    pub dropout: f64,
    /// Shuffle object order (unaligned datasets only).
    pub shuffle: bool,
    /// Latent attribute groups this view cannot see (zeroed before projection).
    pub blind_to: Vec<Attribute>,
}

impl Default for ViewSpec {
    fn default() -> Self {
        ViewSpec {
            width: 16,
            projection_seed: Some(1),
            noise_sigma: 0.02,
            dropout: 0.0,
            shuffle: false,
            blind_to: Vec::new(),
        }
    }
}

impl ViewSpec {
    pub fn projection(&self) -> Tensor<f64> {
        match self.projection_seed {
            None => {
                let mut p = Tensor::zeros(&[LATENT_DIM, self.width]);
                for i in 0..LATENT_DIM {
                    p.set(i, i, 1.0);
                }
                p
            }
            Some(s) => {
                let mut rng = ChaCha8Rng::seed_from_u64(s);
                let normal = Normal::new(0.0, 1.0 / (LATENT_DIM as f64).sqrt()).expect("valid std");
                let data = (0..LATENT_DIM * self.width).map(|_| normal.sample(&mut rng)).collect();
                Tensor::matrix(LATENT_DIM, self.width, data).expect("positive dims")
            }
        }
    }
}

/// Seed derivation used throughout: splitmix64 over a combined key.
pub fn mix(a: u64, b: u64) -> u64 {
    // splitmix64 finaliser over a combined key
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Renders every view of a scene. `projections[i]` must be
/// `specs[i].projection()`; it is passed in so callers can reuse it.
pub fn render_views(
    scene: &Scene,
    specs: &[ViewSpec],
    projections: &[Tensor<f64>],
    aligned: bool,
    noise_seed: u64,
) -> Result<FeatureViews<f32>> {
    if specs.is_empty() {
        return Err(Error::Config("at least one view spec required".into()));
    }
    let mut views = Vec::with_capacity(specs.len());
    for (vi, (spec, proj)) in specs.iter().zip(projections).enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(mix(scene.seed, noise_seed), vi as u64 + 1));
        let m = scene.objects.len();
        let mut keep: Vec<usize> = (0..m).collect();
        if !aligned {
            if spec.dropout > 0.0 {
                keep.retain(|_| !rng.gen_bool(spec.dropout));
                if keep.is_empty() {
                    log::info!(
                        "scene {}: every object dropped in view {vi}; keeping all objects",
                        scene.seed
                    );
                    keep = (0..m).collect();
                }
            }
            if spec.shuffle {
                keep.shuffle(&mut rng);
            }
        }
        let noise = Normal::new(0.0, spec.noise_sigma.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
        let mut data = Vec::with_capacity(keep.len() * spec.width);
        for &oi in &keep {
            let mut z = scene.objects[oi].latent();
            for a in &spec.blind_to {
                for c in a.channels() {
                    z[c] = 0.0;
                }
            }
            for j in 0..spec.width {
                let mut v = 0.0;
                for (k, &zk) in z.iter().enumerate() {
                    v += zk * proj.get(k, j);
                }
                if spec.noise_sigma > 0.0 {
                    v += noise.sample(&mut rng);
                }
                data.push(v as f32);
            }
        }
        views.push(Tensor::matrix(keep.len(), spec.width, data)?);
    }
    FeatureViews::new(views, aligned)
}

/// Template caption; `keep` flags say which (size, color) attributes of the
/// subject and the object are spelled out.
pub fn caption_tokens(scene: &Scene, keep: [bool; 4]) -> Vec<String> {
    let mut out = Vec::with_capacity(9);
    let s = &scene.objects[scene.subject];
    let o = &scene.objects[scene.object];
    for (k, obj) in [s, o].into_iter().enumerate() {
        out.push("a".to_string());
        if keep[2 * k] {
            out.push(SIZES[obj.size].to_string());
        }
        if keep[2 * k + 1] {
            out.push(COLORS[obj.color].to_string());
        }
        out.push(SHAPES[obj.shape].to_string());
        if k == 0 {
            out.push(scene.relation.word().to_string());
        }
    }
    out
}

/// One caption with each size/color attribute elided with probability
/// `elision`.
pub fn gen_caption(scene: &Scene, grammar_seed: u64, elision: f64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(scene.seed, grammar_seed));
    let keep = [(); 4].map(|_| !rng.gen_bool(elision));
    caption_tokens(scene, keep)
}

/// `count` references: the first spells out every attribute, the rest are
/// elided paraphrases.
pub fn gen_references(scene: &Scene, count: usize, elision: f64, grammar_seed: u64) -> Vec<Vec<String>> {
    (0..count)
        .map(|r| {
            if r == 0 {
                caption_tokens(scene, [true; 4])
            } else {
                gen_caption(scene, mix(grammar_seed, r as u64), elision)
            }
        })
        .collect()
}

/// Parses a template caption and checks every stated predicate against the
/// scene: some ordered object pair must match both descriptions and stand
/// in the stated relation.
pub fn caption_holds(scene: &Scene, tokens: &[String]) -> bool {
    fn parse_np(t: &[String]) -> Option<(Option<usize>, Option<usize>, usize, usize)> {
        if t.first()? != "a" {
            return None;
        }
        let mut i = 1;
        let size = SIZES.iter().position(|s| t.get(i).map(String::as_str) == Some(s));
        if size.is_some() {
            i += 1;
        }
        let color = COLORS.iter().position(|c| t.get(i).map(String::as_str) == Some(c));
        if color.is_some() {
            i += 1;
        }
        let shape = SHAPES.iter().position(|s| t.get(i).map(String::as_str) == Some(s))?;
        Some((size, color, shape, i + 1))
    }
    let Some((s_size, s_color, s_shape, used)) = parse_np(tokens) else {
        return false;
    };
    let Some(rel) = tokens.get(used).and_then(|w| Relation::from_word(w)) else {
        return false;
    };
    let Some((o_size, o_color, o_shape, used2)) = parse_np(&tokens[used + 1..]) else {
        return false;
    };
    if used + 1 + used2 != tokens.len() {
        return false;
    }
    let fits = |o: &SceneObject, size: Option<usize>, color: Option<usize>, shape: usize| {
        o.shape == shape && size.is_none_or(|s| s == o.size) && color.is_none_or(|c| c == o.color)
    };
    scene.objects.iter().enumerate().any(|(i, a)| {
        fits(a, s_size, s_color, s_shape)
            && scene.objects.iter().enumerate().any(|(j, b)| {
                i != j && fits(b, o_size, o_color, o_shape) && rel.holds(a, b)
            })
    })
}

/// Keeps tokens seen at least `min_count` times, ordered by descending count
/// then alphabetically, after the reserved ids.
pub fn build_vocab<I, S>(captions: I, min_count: usize) -> Result<Vocab>
where
    I: IntoIterator<Item = S>,
    S: AsRef<[String]>,
{
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    let mut any = false;
    for c in captions {
        any = true;
        for t in c.as_ref() {
            *counts.entry(t.clone()).or_insert(0) += 1;
        }
    }
    if !any {
        return Err(Error::Data("cannot build a vocabulary from zero captions".into()));
    }
    let mut kept: Vec<(String, usize)> = counts
        .into_iter()
        .filter(|(t, c)| *c >= min_count && !RESERVED.contains(&t.as_str()))
        .collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
    tokens.extend(kept.into_iter().map(|(t, _)| t));
    if tokens.len() < 5 {
        return Err(Error::Data(format!(
            "no token occurs at least {min_count} times; vocabulary would be empty"
        )));
    }
    Vocab::from_tokens(tokens)
}

/// Everything needed to regenerate a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub seed: u64,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub refs_per_scene: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub elision: f64,
    pub aligned: bool,
    pub views: Vec<ViewSpec>,
}

impl Default for GenConfig {
    fn default() -> Self {
        let view = |width, seed| ViewSpec {
            width,
            projection_seed: Some(seed),
            ..ViewSpec::default()
        };
        GenConfig {
            seed: 7,
            train: 2000,
            val: 200,
            test: 200,
            refs_per_scene: 3,
            min_objects: 2,
            max_objects: 6,
            elision: 0.2,
            aligned: true,
            views: vec![view(16, 101), view(24, 102), view(20, 103)],
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.views.is_empty() {
            problems.push("views: at least one view required".to_string());
        }
        for (i, v) in self.views.iter().enumerate() {
            if v.width < LATENT_DIM {
                problems.push(format!("views[{i}].width={} is below {LATENT_DIM}", v.width));
            }
            if !(0.0..1.0).contains(&v.dropout) {
                problems.push(format!("views[{i}].dropout={} outside [0, 1)", v.dropout));
            }
            if v.noise_sigma < 0.0 || !v.noise_sigma.is_finite() {
                problems.push(format!("views[{i}].noise_sigma={} must be ≥ 0", v.noise_sigma));
            }
        }
        if self.views.first().is_some_and(|v| v.dropout > 0.0) {
            problems.push("views[0] is the primary view and must have dropout 0".to_string());
        }
        if self.min_objects < 2 || self.max_objects < self.min_objects {
            problems.push(format!(
                "object range {}..={} invalid (need 2 ≤ min ≤ max)",
                self.min_objects, self.max_objects
            ));
        }
        if !(1..=5).contains(&self.refs_per_scene) {
            problems.push(format!("refs_per_scene={} outside 1..=5", self.refs_per_scene));
        }
        if !(0.0..=1.0).contains(&self.elision) {
            problems.push(format!("elision={} outside [0, 1]", self.elision));
        }
        if self.train == 0 {
            problems.push("train: at least one scene required".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serialises");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn view_dims(&self) -> Vec<usize> {
        self.views.iter().map(|v| v.width).collect()
    }

    fn split_sizes(&self) -> [(&'static str, usize, u64); 3] {
        [("train", self.train, 1), ("val", self.val, 2), ("test", self.test, 3)]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub split: String,
    pub ids: Vec<String>,
    /// Feature files relative to the split directory, parallel to `ids`.
    pub features: Vec<String>,
    pub references: String,
    pub config_hash: String,
    pub aligned: bool,
    pub view_dims: Vec<usize>,
}

impl DatasetManifest {
    pub fn read(split_dir: &Path) -> Result<Self> {
        let path = split_dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
        if m.ids.len() != m.features.len() {
            return Err(Error::format(&path, "ids and features differ in length"));
        }
        Ok(m)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct CorpusStats {
    pub split: String,
    pub scenes: usize,
    pub mean_objects: f64,
    pub relations: BTreeMap<String, usize>,
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

/// Writes `gen_config.json` plus one directory per split holding the
/// manifest, references, scenes and per-image feature files.
pub fn write_dataset(cfg: &GenConfig, out: &Path) -> Result<Vec<CorpusStats>> {
    cfg.validate()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_file(
        &out.join("gen_config.json"),
        serde_json::to_string_pretty(cfg)?.as_bytes(),
    )?;
    let hash = cfg.hash();
    let projections: Vec<Tensor<f64>> = cfg.views.iter().map(ViewSpec::projection).collect();
    let mut stats = Vec::new();
    for (split, count, salt) in cfg.split_sizes() {
        let dir = out.join(split);
        let fdir = dir.join("features");
        fs::create_dir_all(&fdir).map_err(|e| Error::io(&fdir, e))?;
        let mut ids = Vec::with_capacity(count);
        let mut feats = Vec::with_capacity(count);
        let mut refs = String::new();
        let mut scenes = String::new();
        let mut st = CorpusStats {
            split: split.to_string(),
            scenes: count,
            ..CorpusStats::default()
        };
        for i in 0..count {
            let id = format!("{split}_{i:05}");
            let seed = mix(mix(cfg.seed, salt), i as u64);
            let scene = gen_scene(seed, cfg.min_objects, cfg.max_objects);
            let views = render_views(&scene, &cfg.views, &projections, cfg.aligned, cfg.seed)?;
            let rel = format!("features/{id}.fvs");
            write_file(&dir.join(&rel), &views.to_bytes())?;
            let captions: Vec<String> = gen_references(&scene, cfg.refs_per_scene, cfg.elision, cfg.seed)
                .iter()
                .map(|t| t.join(" "))
                .collect();
            refs.push_str(&serde_json::to_string(&ReferenceRow {
                id: id.clone(),
                captions,
            })?);
            refs.push('\n');
            scenes.push_str(&serde_json::to_string(&serde_json::json!({"id": id, "scene": scene}))?);
            scenes.push('\n');
            st.mean_objects += scene.objects.len() as f64;
            *st.relations.entry(scene.relation.word().to_string()).or_insert(0) += 1;
            ids.push(id);
            feats.push(rel);
        }
        if count > 0 {
            st.mean_objects /= count as f64;
        }
        write_file(&dir.join("references.jsonl"), refs.as_bytes())?;
        write_file(&dir.join("scenes.jsonl"), scenes.as_bytes())?;
        let manifest = DatasetManifest {
            split: split.to_string(),
            ids,
            features: feats,
            references: "references.jsonl".to_string(),
            config_hash: hash.clone(),
            aligned: cfg.aligned,
            view_dims: cfg.view_dims(),
        };
        write_file(
            &dir.join("manifest.json"),
            serde_json::to_string_pretty(&manifest)?.as_bytes(),
        )?;
        stats.push(st);
    }
    Ok(stats)
}

#[derive(Clone, Debug)]
pub struct Example {
    pub id: String,
    pub views: FeatureViews<f32>,
    pub references: Vec<Vec<String>>,
}

/// A split loaded into memory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: DatasetManifest,
    pub examples: Vec<Example>,
}

impl Dataset {
    pub fn load(split_dir: &Path) -> Result<Self> {
        let manifest = DatasetManifest::read(split_dir)?;
        let refs = crate::metrics::read_references(&split_dir.join(&manifest.references))?;
        let mut examples = Vec::with_capacity(manifest.ids.len());
        for (id, rel) in manifest.ids.iter().zip(&manifest.features) {
            let path = split_dir.join(rel);
            let views = FeatureViews::read(&path, manifest.aligned)?;
            if views.widths() != manifest.view_dims {
                return Err(Error::format(
                    &path,
                    format!("view widths {:?} differ from manifest {:?}", views.widths(), manifest.view_dims),
                ));
            }
            let references = refs
                .get(id)
                .ok_or_else(|| Error::Data(format!("no references for `{id}`")))?
                .iter()
                .map(|c| crate::metrics::tokenize(c))
                .collect();
            examples.push(Example {
                id: id.clone(),
                views,
                references,
            });
        }
        Ok(Dataset {
            dir: split_dir.to_path_buf(),
            manifest,
            examples,
        })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct Batch {
    /// Indices into the dataset's examples.
    pub indices: Vec<usize>,
    /// Object counts padded to the batch maximum per view, with masks.
    pub views: Vec<FeatureViews<f32>>,
    pub captions: CaptionBatch,
}

/// Epoch-`epoch` batches: a seeded shuffle of the examples, one reference
/// drawn per image, captions truncated/padded to `n`, object counts padded
/// to the batch maximum.
pub fn make_batches(
    examples: &[Example],
    vocab: &Vocab,
    batch_size: usize,
    n: usize,
    seed: u64,
    epoch: usize,
) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be ≥ 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, epoch as u64 + 0x5eed));
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(&mut rng);
    let mut batches = Vec::with_capacity(order.len().div_ceil(batch_size));
    for chunk in order.chunks(batch_size) {
        let caps: Vec<Vec<usize>> = chunk
            .iter()
            .map(|&i| {
                let refs = &examples[i].references;
                vocab.encode(&refs[rng.gen_range(0..refs.len())])
            })
            .collect();
        let nv = examples[chunk[0]].views.num_views();
        let mut max_rows = vec![0; nv];
        for &i in chunk {
            for (m, c) in max_rows.iter_mut().zip(examples[i].views.object_counts()) {
                *m = (*m).max(c);
            }
        }
        let views = chunk
            .iter()
            .map(|&i| examples[i].views.pad_to(&max_rows))
            .collect::<Result<Vec<_>>>()?;
        batches.push(Batch {
            indices: chunk.to_vec(),
            views,
            captions: CaptionBatch::new(&caps, n)?,
        });
    }
    Ok(batches)
}
