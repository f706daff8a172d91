//! Synthetic grid-world caption dataset, vocabulary and feature files.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::container::Container;
use crate::metrics::{format_caption_tsv, parse_caption_tsv, tokenize};
use crate::model::{BOS, EOS, PAD, UNK};
use crate::rng::SplitMix64;
use crate::{Error, Result};

pub const FEATURE_DIM: usize = 64;
pub const CAPTIONS_PER_SCENE: usize = 5;
const NOISE_DIMS: usize = 44;
const PLACEMENT_ATTEMPTS: usize = 100;

pub const COLORS: [&str; 6] = ["red", "blue", "green", "yellow", "black", "white"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Shape {
    Square,
    Circle,
    Triangle,
    Bar,
}

impl Shape {
    pub const ALL: [Shape; 4] = [Shape::Square, Shape::Circle, Shape::Triangle, Shape::Bar];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Square => "square",
            Shape::Circle => "circle",
            Shape::Triangle => "triangle",
            Shape::Bar => "bar",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Object {
    pub shape: Shape,
    /// Index into [`COLORS`].
    pub color: usize,
    pub row: usize,
    pub col: usize,
    pub height: usize,
    pub width: usize,
}

impl Object {
    pub fn covers(&self, r: usize, c: usize) -> bool {
        (self.row..self.row + self.height).contains(&r) && (self.col..self.col + self.width).contains(&c)
    }

    fn overlaps(&self, o: &Object) -> bool {
        self.row < o.row + o.height && o.row < self.row + self.height && self.col < o.col + o.width && o.col < self.col + self.width
    }

    pub fn is_multi_grid(&self) -> bool {
        self.height * self.width > 1
    }

    fn size_word(&self) -> Option<&'static str> {
        match self.height * self.width {
            1 => Some("small"),
            a if a >= 6 => Some("large"),
            _ => None,
        }
    }

    /// Noun phrase without the article, e.g. "small red square".
    pub fn phrase(&self) -> String {
        let mut s = String::new();
        if let Some(w) = self.size_word() {
            s.push_str(w);
            s.push(' ');
        }
        s.push_str(COLORS[self.color]);
        s.push(' ');
        s.push_str(self.shape.name());
        s
    }

    /// Twice the centre, so centres stay integral.
    fn centre2(&self) -> (isize, isize) {
        ((2 * self.row + self.height) as isize, (2 * self.col + self.width) as isize)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Relation {
    Above,
    Below,
    LeftOf,
    RightOf,
    NextTo,
}

impl Relation {
    /// Where `a` sits relative to `b`.
    pub fn between(a: &Object, b: &Object) -> Relation {
        let (ar, ac) = a.centre2();
        let (br, bc) = b.centre2();
        let (dr, dc) = (ar - br, ac - bc);
        if dr.abs() > dc.abs() {
            if dr < 0 { Relation::Above } else { Relation::Below }
        } else if dc.abs() > dr.abs() {
            if dc < 0 { Relation::LeftOf } else { Relation::RightOf }
        } else {
            Relation::NextTo
        }
    }

    pub fn inverse(self) -> Relation {
        match self {
            Relation::Above => Relation::Below,
            Relation::Below => Relation::Above,
            Relation::LeftOf => Relation::RightOf,
            Relation::RightOf => Relation::LeftOf,
            Relation::NextTo => Relation::NextTo,
        }
    }

    pub fn phrase(self) -> &'static str {
        match self {
            Relation::Above => "above",
            Relation::Below => "below",
            Relation::LeftOf => "left of",
            Relation::RightOf => "right of",
            Relation::NextTo => "next to",
        }
    }
}

/// Objects on a canvas, kept in reading order of their top-left cells.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Scene {
    pub grid_h: usize,
    pub grid_w: usize,
    pub objects: Vec<Object>,
}

impl Scene {
    /// Object index covering each cell, row-major.
    pub fn occupancy(&self) -> Vec<Option<usize>> {
        let mut occ = vec![None; self.grid_h * self.grid_w];
        for (i, o) in self.objects.iter().enumerate() {
            for r in o.row..o.row + o.height {
                for c in o.col..o.col + o.width {
                    occ[r * self.grid_w + c] = Some(i);
                }
            }
        }
        occ
    }

    /// The five reference captions.
    pub fn captions(&self) -> Vec<String> {
        let np: Vec<String> = self.objects.iter().map(|o| o.phrase()).collect();
        match np.len() {
            1 => {
                let a = &np[0];
                vec![
                    format!("a {a}"),
                    format!("there is a {a}"),
                    format!("a {a} on a grid"),
                    format!("an image of a {a}"),
                    format!("a {a} in the picture"),
                ]
            }
            2 => {
                let (a, b) = (&np[0], &np[1]);
                let rel = Relation::between(&self.objects[0], &self.objects[1]);
                let (r, inv) = (rel.phrase(), rel.inverse().phrase());
                vec![
                    format!("a {a} {r} a {b}"),
                    format!("a {b} {inv} a {a}"),
                    format!("there is a {a} {r} a {b}"),
                    format!("a {a} and a {b}"),
                    format!("a {b} and a {a}"),
                ]
            }
            _ => {
                let (a, b, c) = (&np[0], &np[1], &np[2]);
                let rel = Relation::between(&self.objects[0], &self.objects[1]);
                let (r, inv) = (rel.phrase(), rel.inverse().phrase());
                vec![
                    format!("a {a} {r} a {b} and a {c}"),
                    format!("a {b} {inv} a {a} and a {c}"),
                    format!("there is a {a} {r} a {b} and a {c}"),
                    format!("a {a}, a {b} and a {c}"),
                    format!("a {c} and a {a} {r} a {b}"),
                ]
            }
        }
    }

    /// Per-cell features `[grid_h * grid_w, 64]`.
    pub fn features(&self, noise_sd: f64, rng: &mut SplitMix64) -> Vec<f32> {
        let occ = self.occupancy();
        let mut out = vec![0.0f32; occ.len() * FEATURE_DIM];
        for (cell, o) in occ.iter().enumerate() {
            let v = &mut out[cell * FEATURE_DIM..(cell + 1) * FEATURE_DIM];
            if let Some(i) = o {
                let obj = &self.objects[*i];
                let (r, c) = (cell / self.grid_w - obj.row, cell % self.grid_w - obj.col);
                v[obj.color] = 1.0;
                v[6 + obj.shape as usize] = 1.0;
                v[10 + r * 3 + c] = 1.0;
                v[19] = 1.0;
            }
            for x in &mut v[FEATURE_DIM - NOISE_DIMS..] {
                *x = (noise_sd * rng.gaussian()) as f32;
            }
        }
        out
    }
}

impl fmt::Display for Scene {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}:", self.grid_h, self.grid_w)?;
        for (i, o) in self.objects.iter().enumerate() {
            let sep = if i == 0 { " " } else { "; " };
            write!(f, "{sep}{} {} {}x{} @ {},{}", COLORS[o.color], o.shape.name(), o.height, o.width, o.row, o.col)?;
        }
        Ok(())
    }
}

impl FromStr for Scene {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::invalid(format!("malformed scene record '{s}'"));
        let (dims, rest) = s.split_once(':').ok_or_else(bad)?;
        let (h, w) = dims.split_once('x').ok_or_else(bad)?;
        let num = |x: &str| x.trim().parse::<usize>().map_err(|_| bad());
        let mut objects = Vec::new();
        for part in rest.split(';').filter(|p| !p.trim().is_empty()) {
            let t: Vec<&str> = part.split_whitespace().collect();
            if t.len() != 5 || t[3] != "@" {
                return Err(bad());
            }
            let color = COLORS.iter().position(|c| *c == t[0]).ok_or_else(bad)?;
            let shape = *Shape::ALL.iter().find(|x| x.name() == t[1]).ok_or_else(bad)?;
            let (eh, ew) = t[2].split_once('x').ok_or_else(bad)?;
            let (r, c) = t[4].split_once(',').ok_or_else(bad)?;
            objects.push(Object {
                shape,
                color,
                row: num(r)?,
                col: num(c)?,
                height: num(eh)?,
                width: num(ew)?,
            });
        }
        Ok(Scene {
            grid_h: num(h)?,
            grid_w: num(w)?,
            objects,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetConfig {
    pub grid_h: usize,
    pub grid_w: usize,
    pub noise_sd: f64,
    pub max_objects: usize,
    /// Longest allowed caption, in tokens.
    pub max_caption_tokens: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            grid_h: 7,
            grid_w: 7,
            noise_sd: 0.1,
            max_objects: 3,
            max_caption_tokens: 18,
        }
    }
}

fn draw_object(rng: &mut SplitMix64, cfg: &DatasetConfig) -> Object {
    let shape = Shape::ALL[rng.below(4) as usize];
    let color = rng.below(COLORS.len() as u64) as usize;
    let (height, width) = if shape == Shape::Bar {
        let len = 2 + rng.below(2) as usize;
        if rng.below(2) == 0 { (1, len) } else { (len, 1) }
    } else {
        let k = 1 + rng.below(3) as usize;
        (k, k)
    };
    let (height, width) = (height.min(cfg.grid_h), width.min(cfg.grid_w));
    Object {
        shape,
        color,
        row: rng.below((cfg.grid_h - height + 1) as u64) as usize,
        col: rng.below((cfg.grid_w - width + 1) as u64) as usize,
        height,
        width,
    }
}

/// Draws one scene, re-drawing whenever placement fails or a caption would
/// exceed the token limit.
pub fn generate_scene(rng: &mut SplitMix64, cfg: &DatasetConfig) -> Scene {
    'scene: loop {
        let n = 1 + rng.below(cfg.max_objects.max(1) as u64) as usize;
        let mut objects: Vec<Object> = Vec::with_capacity(n);
        for _ in 0..n {
            let mut placed = false;
            for _ in 0..PLACEMENT_ATTEMPTS {
                let o = draw_object(rng, cfg);
                if objects.iter().all(|p| !p.overlaps(&o)) {
                    objects.push(o);
                    placed = true;
                    break;
                }
            }
            if !placed {
                continue 'scene;
            }
        }
        objects.sort_by_key(|o| (o.row, o.col));
        let scene = Scene {
            grid_h: cfg.grid_h,
            grid_w: cfg.grid_w,
            objects,
        };
        if scene.captions().iter().all(|c| tokenize(c).len() <= cfg.max_caption_tokens) {
            return scene;
        }
    }
}

/// Word list with the reserved tokens first.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

pub const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

impl Vocab {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len() || tokens.iter().zip(RESERVED).any(|(t, r)| t != r) {
            return Err(Error::invalid("vocabulary must start with <pad> <bos> <eos> <unk>"));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::invalid(format!("duplicate vocabulary token '{t}'")));
            }
        }
        Ok(Vocab { tokens, index })
    }

    /// Reserved tokens, then every caption word in sorted order.
    pub fn build<'a>(captions: impl IntoIterator<Item = &'a str>) -> Self {
        let words: BTreeSet<String> = captions.into_iter().flat_map(tokenize).collect();
        let tokens = RESERVED.iter().map(|s| s.to_string()).chain(words).collect();
        Self::from_tokens(tokens).expect("reserved tokens never clash with words")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, word: &str) -> usize {
        *self.index.get(word).unwrap_or(&UNK)
    }

    pub fn word(&self, id: usize) -> &str {
        self.tokens.get(id).map_or(RESERVED[UNK], |s| s.as_str())
    }

    /// Word ids of a caption, without bos or eos.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text).iter().map(|w| self.id(w)).collect()
    }

    /// Text of an id sequence: stops at eos, drops pad and bos.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .take_while(|&&i| i != EOS)
            .filter(|&&i| i != PAD && i != BOS)
            .map(|&i| self.word(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn to_text(&self) -> String {
        self.tokens.iter().map(|t| format!("{t}\n")).collect()
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_tokens(text.lines().map(str::to_string).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

/// Grid features `[n, h, w, c]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GridFeatures {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<f32>,
}

impl GridFeatures {
    pub fn cells(&self) -> usize {
        self.h * self.w
    }

    /// Features of scenes `idx`, concatenated.
    pub fn gather(&self, idx: &[usize]) -> Vec<f32> {
        let stride = self.cells() * self.c;
        idx.iter().flat_map(|&i| self.data[i * stride..(i + 1) * stride].iter().copied()).collect()
    }
}

pub fn save_features(path: &Path, f: &GridFeatures) -> Result<()> {
    let mut c = Container::default();
    c.push("features", &[f.n, f.h, f.w, f.c], f.data.clone());
    c.save(path)
}

pub fn load_features(path: &Path) -> Result<GridFeatures> {
    features_from_container(&Container::load(path)?)
}

pub fn features_from_container(c: &Container) -> Result<GridFeatures> {
    let e = c
        .get("features")
        .or(c.entries.first())
        .ok_or_else(|| Error::Container("no feature tensor".into()))?;
    if e.shape.len() != 4 {
        return Err(Error::Container(format!("features must have rank 4, got shape {:?}", e.shape)));
    }
    Ok(GridFeatures {
        n: e.shape[0],
        h: e.shape[1],
        w: e.shape[2],
        c: e.shape[3],
        data: e.values.clone(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl SplitName {
    pub const ALL: [SplitName; 3] = [SplitName::Train, SplitName::Val, SplitName::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Val => "val",
            SplitName::Test => "test",
        }
    }
}

impl FromStr for SplitName {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitName::Train),
            "val" => Ok(SplitName::Val),
            "test" => Ok(SplitName::Test),
            other => Err(Error::invalid(format!("unknown split '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub scenes: Vec<Scene>,
    pub features: GridFeatures,
    /// Reference captions per scene.
    pub captions: Vec<Vec<String>>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }

    pub fn ids(&self) -> Vec<String> {
        (0..self.len()).map(|i| i.to_string()).collect()
    }

    pub fn caption_rows(&self) -> Vec<(String, String)> {
        self.captions
            .iter()
            .enumerate()
            .flat_map(|(i, cs)| cs.iter().map(move |c| (i.to_string(), c.clone())))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Split,
    pub val: Split,
    pub test: Split,
    pub vocab: Vocab,
}

impl Dataset {
    pub fn split(&self, name: SplitName) -> &Split {
        match name {
            SplitName::Train => &self.train,
            SplitName::Val => &self.val,
            SplitName::Test => &self.test,
        }
    }
}

fn generate_split(rng: &mut SplitMix64, n: usize, cfg: &DatasetConfig) -> Split {
    let mut scenes = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * cfg.grid_h * cfg.grid_w * FEATURE_DIM);
    for _ in 0..n {
        let scene = generate_scene(rng, cfg);
        data.extend(scene.features(cfg.noise_sd, rng));
        scenes.push(scene);
    }
    let captions = scenes.iter().map(|s| s.captions()).collect();
    Split {
        scenes,
        features: GridFeatures {
            n,
            h: cfg.grid_h,
            w: cfg.grid_w,
            c: FEATURE_DIM,
            data,
        },
        captions,
    }
}

/// Deterministic dataset; the vocabulary comes from the training captions.
pub fn generate_dataset(seed: u64, n_train: usize, n_val: usize, n_test: usize, cfg: &DatasetConfig) -> Result<Dataset> {
    if n_train == 0 || n_val == 0 || n_test == 0 {
        return Err(Error::invalid("every split needs at least one scene"));
    }
    if cfg.grid_h == 0 || cfg.grid_w == 0 || cfg.max_objects == 0 {
        return Err(Error::invalid("grid and object counts must be positive"));
    }
    let mut root = SplitMix64::new(seed);
    let train = generate_split(&mut root.fork(1), n_train, cfg);
    let val = generate_split(&mut root.fork(2), n_val, cfg);
    let test = generate_split(&mut root.fork(3), n_test, cfg);
    let vocab = Vocab::build(train.captions.iter().flatten().map(String::as_str));
    Ok(Dataset { train, val, test, vocab })
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Writes `{split}.lstn`, `{split}_captions.tsv`, `{split}_scenes.tsv` and `vocab.txt`.
pub fn write_dataset(dir: &Path, ds: &Dataset) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for name in SplitName::ALL {
        let s = ds.split(name);
        let n = name.as_str();
        save_features(&dir.join(format!("{n}.lstn")), &s.features)?;
        write(&dir.join(format!("{n}_captions.tsv")), &format_caption_tsv(&s.caption_rows()))?;
        let scenes: String = s.scenes.iter().enumerate().map(|(i, sc)| format!("{i}\t{sc}\n")).collect();
        write(&dir.join(format!("{n}_scenes.tsv")), &scenes)?;
    }
    ds.vocab.save(&dir.join("vocab.txt"))
}

pub fn load_split(dir: &Path, name: SplitName) -> Result<Split> {
    let n = name.as_str();
    let features = load_features(&dir.join(format!("{n}.lstn")))?;
    let mut captions = vec![Vec::new(); features.n];
    for (id, c) in parse_caption_tsv(&read(&dir.join(format!("{n}_captions.tsv")))?)? {
        let i: usize = id.parse().map_err(|_| Error::invalid(format!("bad scene id '{id}'")))?;
        captions.get_mut(i).ok_or_else(|| Error::invalid(format!("scene id {i} out of range")))?.push(c);
    }
    let mut scenes = Vec::with_capacity(features.n);
    for (_, rec) in parse_caption_tsv(&read(&dir.join(format!("{n}_scenes.tsv")))?)? {
        scenes.push(rec.parse()?);
    }
    if scenes.len() != features.n {
        return Err(Error::invalid(format!("{n}: {} scene records for {} feature maps", scenes.len(), features.n)));
    }
    Ok(Split { scenes, features, captions })
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    Ok(Dataset {
        train: load_split(dir, SplitName::Train)?,
        val: load_split(dir, SplitName::Val)?,
        test: load_split(dir, SplitName::Test)?,
        vocab: Vocab::load(&dir.join("vocab.txt"))?,
    })
}
