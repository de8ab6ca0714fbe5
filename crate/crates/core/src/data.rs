//! Procedural caption/latent dataset: four shapes in four intensities on an
//! 8x8 grid, captions from a fixed grammar, and a nearest-template oracle.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{TokenStream, BOS, EOS, NULL};

/// Word list indexed by token id. Ids 0..5 are the special tokens.
pub const VOCAB: [&str; 24] = [
    "<bos>", "<eos>", "<boi>", "<eoi>", "<null>", "a", "square", "circle", "triangle", "cross",
    "red", "green", "blue", "yellow", "small", "big", "bright", "dark", "little", "large", "shiny",
    "plain", "simple", "tiny",
];
pub const VOCAB_SIZE: usize = VOCAB.len();
pub const ARTICLE: u32 = 5;
const SHAPE_BASE: u32 = 6;
const COLOR_BASE: u32 = 10;
const FILLER_BASE: u32 = 14;
const N_FILLERS: u32 = 10;

pub const JITTER: f64 = 0.05;
pub const BACKGROUND: f32 = -1.0;
/// Oracle rejection threshold on mean squared distance.
pub const REJECT_DISTANCE: f64 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Square,
    Circle,
    Triangle,
    Cross,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

impl Shape {
    pub const ALL: [Shape; 4] = [Shape::Square, Shape::Circle, Shape::Triangle, Shape::Cross];

    pub fn token(self) -> u32 {
        SHAPE_BASE + self as u32
    }

    pub fn from_token(id: u32) -> Option<Shape> {
        id.checked_sub(SHAPE_BASE).and_then(|i| Shape::ALL.get(i as usize).copied())
    }

    /// Whether grid cell `(r, c)` of an 8x8 grid is inside the shape.
    fn covers(self, r: usize, c: usize) -> bool {
        let (r, c) = (r as i32, c as i32);
        match self {
            Shape::Square => (2..6).contains(&r) && (2..6).contains(&c),
            Shape::Circle => {
                let (y, x) = (r as f32 + 0.5 - 4.0, c as f32 + 0.5 - 4.0);
                y * y + x * x <= 9.0
            }
            Shape::Triangle => {
                let k = (r + 1) / 2;
                (1..7).contains(&r) && (4 - k..4 + k).contains(&c)
            }
            Shape::Cross => {
                ((3..5).contains(&r) && (1..7).contains(&c))
                    || ((3..5).contains(&c) && (1..7).contains(&r))
            }
        }
    }
}

impl Color {
    pub const ALL: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];

    pub fn token(self) -> u32 {
        COLOR_BASE + self as u32
    }

    pub fn from_token(id: u32) -> Option<Color> {
        id.checked_sub(COLOR_BASE).and_then(|i| Color::ALL.get(i as usize).copied())
    }

    /// Cell intensity of the shape in every channel.
    pub fn intensity(self) -> f32 {
        match self {
            Color::Red => 1.0,
            Color::Green => 0.5,
            Color::Blue => 0.0,
            Color::Yellow => -0.5,
        }
    }
}

macro_rules! word_enum_io {
    ($ty:ty, $what:literal) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(VOCAB[self.token() as usize])
            }
        }

        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                <$ty>::ALL
                    .into_iter()
                    .find(|v| v.to_string() == s)
                    .ok_or_else(|| Error::Config(format!("unknown {} `{s}`", $what)))
            }
        }
    };
}

word_enum_io!(Shape, "shape");
word_enum_io!(Color, "color");

/// One of the 16 classes, indexed `shape * 4 + color`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Class {
    pub shape: Shape,
    pub color: Color,
}

impl Class {
    pub fn all() -> impl Iterator<Item = Class> {
        Shape::ALL
            .into_iter()
            .flat_map(|shape| Color::ALL.into_iter().map(move |color| Class { shape, color }))
    }

    pub fn index(self) -> usize {
        self.shape as usize * 4 + self.color as usize
    }

    pub fn from_index(i: usize) -> Class {
        Class {
            shape: Shape::ALL[i / 4],
            color: Color::ALL[i % 4],
        }
    }
}

impl fmt::Display for Class {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", self.color, self.shape)
    }
}

/// Latent grid and patching geometry.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Geometry {
    pub channels: usize,
    pub size: usize,
    pub patch: usize,
}

impl Default for Geometry {
    fn default() -> Self {
        Geometry {
            channels: 1,
            size: 8,
            patch: 4,
        }
    }
}

impl Geometry {
    pub fn validate(&self) -> Result<()> {
        if self.size != 8 {
            return Err(Error::Config("data.size must be 8".into()));
        }
        if !(1..=4).contains(&self.channels) {
            return Err(Error::Config("data.channels must lie in 1..=4".into()));
        }
        if self.patch == 0 || !self.size.is_multiple_of(self.patch) {
            return Err(Error::Config(format!(
                "data.patch {} does not divide the {}x{} grid",
                self.patch, self.size, self.size
            )));
        }
        Ok(())
    }

    pub fn numel(&self) -> usize {
        self.channels * self.size * self.size
    }

    pub fn patches_per_image(&self) -> usize {
        (self.size / self.patch).pow(2)
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch * self.patch
    }

    /// Row-major non-overlapping patches; each patch is channel-major, then
    /// row-major within the patch.
    pub fn patchify(&self, latent: &[f32]) -> Result<Vec<Vec<f32>>> {
        self.validate()?;
        if latent.len() != self.numel() {
            return Err(Error::invalid("patchify", format!("latent of length {}", latent.len())));
        }
        let (s, p, n) = (self.size, self.patch, self.size / self.patch);
        let mut out = Vec::with_capacity(n * n);
        for pr in 0..n {
            for pc in 0..n {
                let mut v = Vec::with_capacity(self.patch_dim());
                for ch in 0..self.channels {
                    for i in 0..p {
                        let row = (ch * s + pr * p + i) * s + pc * p;
                        v.extend_from_slice(&latent[row..row + p]);
                    }
                }
                out.push(v);
            }
        }
        Ok(out)
    }

    pub fn unpatchify(&self, patches: &[f32]) -> Result<Vec<f32>> {
        self.validate()?;
        if patches.len() != self.numel() {
            return Err(Error::invalid("unpatchify", format!("{} values", patches.len())));
        }
        let (s, p, n) = (self.size, self.patch, self.size / self.patch);
        let pd = self.patch_dim();
        let mut out = vec![0.0; self.numel()];
        for pr in 0..n {
            for pc in 0..n {
                let src = &patches[(pr * n + pc) * pd..][..pd];
                for ch in 0..self.channels {
                    for i in 0..p {
                        let row = (ch * s + pr * p + i) * s + pc * p;
                        out[row..row + p].copy_from_slice(&src[(ch * p + i) * p..][..p]);
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Renders a class into a `[C × 8 × 8]` latent with uniform jitter of at
/// most `jitter` per cell.
pub fn render_latent<R: Rng + ?Sized>(geom: &Geometry, class: Class, jitter: f32, rng: &mut R) -> Vec<f32> {
    let s = geom.size;
    let mut out = Vec::with_capacity(geom.numel());
    for _ in 0..geom.channels {
        for r in 0..s {
            for c in 0..s {
                let base = if class.shape.covers(r, c) {
                    class.color.intensity()
                } else {
                    BACKGROUND
                };
                let noise = if jitter > 0.0 {
                    rng.random_range(-jitter..=jitter)
                } else {
                    0.0
                };
                out.push((base + noise).clamp(-1.0, 1.0));
            }
        }
    }
    out
}

pub fn template(geom: &Geometry, class: Class) -> Vec<f32> {
    render_latent(geom, class, 0.0, &mut ChaCha8Rng::seed_from_u64(0))
}

/// Oracle verdict for one latent.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Verdict {
    pub class: Option<Class>,
    /// Mean squared distance to the nearest template.
    pub distance: f64,
}

/// Nearest clean template by mean squared distance; rejected if the best
/// distance exceeds [`REJECT_DISTANCE`].
pub fn oracle_classify(geom: &Geometry, latent: &[f32]) -> Verdict {
    let mut best = (f64::INFINITY, Class::from_index(0));
    for class in Class::all() {
        let t = template(geom, class);
        let d = t
            .iter()
            .zip(latent)
            .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
            .sum::<f64>()
            / t.len() as f64;
        if d < best.0 {
            best = (d, class);
        }
    }
    Verdict {
        class: (best.0 <= REJECT_DISTANCE).then_some(best.1),
        distance: best.0,
    }
}

/// `a [filler] {color} {shape}`.
pub fn caption(class: Class, filler: Option<u32>) -> Vec<u32> {
    let mut ids = vec![ARTICLE];
    if let Some(f) = filler {
        ids.push(FILLER_BASE + f % N_FILLERS);
    }
    ids.push(class.color.token());
    ids.push(class.shape.token());
    ids
}

/// The first color word and first shape word of a token sequence.
pub fn caption_class(ids: &[u32]) -> Option<Class> {
    let color = ids.iter().find_map(|&i| Color::from_token(i))?;
    let shape = ids.iter().find_map(|&i| Shape::from_token(i))?;
    Some(Class { shape, color })
}

/// Parses whitespace-separated words into token ids.
pub fn encode(text: &str) -> Result<Vec<u32>> {
    text.split_whitespace()
        .map(|w| {
            VOCAB
                .iter()
                .position(|v| *v == w)
                .map(|i| i as u32)
                .ok_or_else(|| {
                    Error::Config(format!(
                        "unknown word `{w}`; vocabulary: {}",
                        VOCAB[5..].join(" ")
                    ))
                })
        })
        .collect()
}

pub fn decode(ids: &[u32]) -> String {
    ids.iter()
        .map(|&i| VOCAB.get(i as usize).copied().unwrap_or("<unk>"))
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToySample {
    pub class: Class,
    pub latent: Vec<f32>,
    pub caption: Vec<u32>,
}

/// Builds `[BOS, caption, BOI, patches, EOI, EOS]` or
/// `[BOS, BOI, patches, EOI, caption, EOS]`.
pub fn make_stream(sample: &ToySample, caption_first: bool, geom: &Geometry) -> Result<TokenStream> {
    let patches = geom.patchify(&sample.latent)?;
    let b = TokenStream::builder().text(BOS);
    let b = if caption_first {
        b.texts(&sample.caption).image(patches, 0)
    } else {
        b.image(patches, 0).texts(&sample.caption)
    };
    Ok(b.text(EOS).build())
}

/// Sampling settings of the toy dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    #[serde(flatten)]
    pub geometry: Geometry,
    /// Probability of caption-before-image ordering.
    pub ordering_p: f64,
    /// Probability that a caption-first item has its caption replaced by
    /// the null token during training.
    pub caption_dropout: f64,
    pub filler_p: f64,
    pub jitter: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            geometry: Geometry::default(),
            ordering_p: 0.8,
            caption_dropout: 0.1,
            filler_p: 0.5,
            jitter: JITTER,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        for (name, p) in [
            ("ordering_p", self.ordering_p),
            ("caption_dropout", self.caption_dropout),
            ("filler_p", self.filler_p),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("data.{name} must lie in [0, 1]")));
            }
        }
        if !(0.0..=1.0).contains(&self.jitter) {
            return Err(Error::Config("data.jitter must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Everything drawn for item `index` of a seeded dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyItem {
    pub index: u64,
    pub sample: ToySample,
    pub caption_first: bool,
    pub caption_dropped: bool,
}

impl ToyItem {
    /// The training stream, with the null caption when dropped.
    pub fn stream(&self, geom: &Geometry) -> Result<TokenStream> {
        if self.caption_dropped {
            let s = ToySample {
                caption: vec![NULL],
                ..self.sample.clone()
            };
            return make_stream(&s, true, geom);
        }
        make_stream(&self.sample, self.caption_first, geom)
    }

    /// `[BOS, caption, EOS]` for the same item.
    pub fn text_stream(&self) -> TokenStream {
        TokenStream::builder()
            .text(BOS)
            .texts(&self.sample.caption)
            .text(EOS)
            .build()
    }
}

/// Items are pure functions of `(seed, index)`. Classes are balanced
/// within every aligned block of 16 indices.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyDataset {
    pub seed: u64,
    pub cfg: DataConfig,
}

impl ToyDataset {
    pub fn new(seed: u64, cfg: DataConfig) -> Self {
        ToyDataset { seed, cfg }
    }

    fn rng(&self, index: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index);
        rng
    }

    /// Classes come in blocks of 16 indices, each block a seeded
    /// permutation of all classes.
    fn class_of(&self, index: u64) -> Class {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0xc1a5_5e5);
        rng.set_stream(index / 16);
        let mut order: Vec<usize> = (0..16).collect();
        order.shuffle(&mut rng);
        Class::from_index(order[(index % 16) as usize])
    }

    pub fn item(&self, index: u64) -> ToyItem {
        let mut rng = self.rng(index);
        let class = self.class_of(index);
        let caption_first = rng.random_bool(self.cfg.ordering_p);
        let dropped = rng.random_bool(self.cfg.caption_dropout);
        let filler = rng
            .random_bool(self.cfg.filler_p)
            .then(|| rng.random_range(0..N_FILLERS));
        let latent = render_latent(&self.cfg.geometry, class, self.cfg.jitter as f32, &mut rng);
        ToyItem {
            index,
            sample: ToySample {
                class,
                latent,
                caption: caption(class, filler),
            },
            caption_first,
            caption_dropped: caption_first && dropped,
        }
    }

    /// Training streams for items `start..start + n`.
    pub fn batch(&self, start: u64, n: usize) -> Result<Vec<TokenStream>> {
        (start..start + n as u64)
            .map(|i| self.item(i).stream(&self.cfg.geometry))
            .collect()
    }

    /// Pure-text streams for items `start..start + n`.
    pub fn text_batch(&self, start: u64, n: usize) -> Vec<TokenStream> {
        (start..start + n as u64).map(|i| self.item(i).text_stream()).collect()
    }

    /// Writes one `shape color ordering seed index` record per line.
    pub fn export<W: Write>(&self, n: u64, mut w: W) -> std::io::Result<()> {
        for i in 0..n {
            let it = self.item(i);
            let order = if it.caption_first { "caption_first" } else { "image_first" };
            writeln!(
                w,
                "shape={} color={} ordering={order} seed={} index={i}",
                it.sample.class.shape, it.sample.class.color, self.seed
            )?;
        }
        Ok(())
    }
}

/// Streams of `n` items with the given ordering probability and no caption
/// dropout.
pub fn dataset_iter(seed: u64, n: usize, ordering_p: f64) -> impl Iterator<Item = TokenStream> {
    let ds = ToyDataset::new(
        seed,
        DataConfig {
            ordering_p,
            caption_dropout: 0.0,
            ..Default::default()
        },
    );
    (0..n as u64).map(move |i| {
        ds.item(i)
            .stream(&ds.cfg.geometry)
            .expect("default geometry is valid")
    })
}

/// Text-only corpus for pretraining the base language model, in equal
/// parts: bare captions `[BOS, caption, EOS]`; the text skeleton of a
/// training stream (image patches removed, brackets kept); and a caption
/// restated with a fresh filler, `[BOS, caption, caption', EOS]`, which
/// gives the model a reason to look things up in its context.
pub fn base_text_stream(seed: u64, index: u64) -> TokenStream {
    let ds = ToyDataset::new(seed, DataConfig::default());
    let it = ds.item(index);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xba5e);
    rng.set_stream(index);
    match rng.random_range(0..3) {
        0 => it.text_stream(),
        1 => {
            let full = it.stream(&ds.cfg.geometry).expect("default geometry is valid");
            let text = full
                .tokens()
                .iter()
                .filter(|t| t.text_id().is_some())
                .cloned()
                .collect();
            TokenStream::from_tokens(text, &[]).expect("text-only stream")
        }
        _ => {
            let filler = rng
                .random_bool(ds.cfg.filler_p)
                .then(|| rng.random_range(0..N_FILLERS));
            TokenStream::builder()
                .text(BOS)
                .texts(&it.sample.caption)
                .texts(&caption(it.sample.class, filler))
                .text(EOS)
                .build()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn g() -> Geometry {
        Geometry::default()
    }

    #[test]
    fn square_template_is_the_known_mask() {
        let t = template(&g(), Class { shape: Shape::Square, color: Color::Green });
        for r in 0..8 {
            for c in 0..8 {
                let inside = (2..6).contains(&r) && (2..6).contains(&c);
                assert_eq!(t[r * 8 + c], if inside { 0.5 } else { -1.0 });
            }
        }
    }

    #[test]
    fn shapes_have_distinct_masks() {
        let masks: Vec<Vec<bool>> = Shape::ALL
            .iter()
            .map(|s| (0..64).map(|i| s.covers(i / 8, i % 8)).collect())
            .collect();
        for i in 0..4 {
            assert!(masks[i].iter().filter(|&&b| b).count() >= 16);
            for j in 0..i {
                assert_ne!(masks[i], masks[j]);
            }
        }
    }

    #[test]
    fn patch_arithmetic_and_round_trip() {
        let geom = g();
        assert_eq!((geom.patches_per_image(), geom.patch_dim()), (4, 16));
        let x: Vec<f32> = (0..64).map(|i| i as f32).collect();
        let p = geom.patchify(&x).unwrap();
        assert_eq!(p.len(), 4);
        assert_eq!(&p[1][..4], &[4.0, 5.0, 6.0, 7.0]);
        assert_eq!(&p[2][..4], &[32.0, 33.0, 34.0, 35.0]);
        let flat: Vec<f32> = p.concat();
        assert_eq!(geom.unpatchify(&flat).unwrap(), x);
        let bad = Geometry { patch: 3, ..geom };
        assert!(bad.patchify(&x).is_err());
        let two = Geometry { channels: 2, ..geom };
        let x2: Vec<f32> = (0..128).map(|i| i as f32).collect();
        let flat2 = two.patchify(&x2).unwrap().concat();
        assert_eq!(two.unpatchify(&flat2).unwrap(), x2);
    }

    #[test]
    fn caption_round_trip_and_encoding() {
        for class in Class::all() {
            for filler in [None, Some(3)] {
                assert_eq!(caption_class(&caption(class, filler)), Some(class));
            }
        }
        assert_eq!(encode("a red square").unwrap(), vec![5, 10, 6]);
        assert_eq!(decode(&[5, 10, 6]), "a red square");
        let err = encode("a purple square").unwrap_err().to_string();
        assert!(err.contains("purple") && err.contains("yellow"), "{err}");
        assert_eq!("triangle".parse::<Shape>().unwrap(), Shape::Triangle);
    }

    #[test]
    fn stream_layout() {
        let ds = ToyDataset::new(3, DataConfig::default());
        let it = ds.item(0);
        let cf = make_stream(&it.sample, true, &g()).unwrap();
        let n = it.sample.caption.len();
        assert_eq!(cf.len(), n + 8);
        assert_eq!(cf.segments()[0].start, n + 2);
        cf.validate(VOCAB_SIZE, 4, 16).unwrap();
        let imf = make_stream(&it.sample, false, &g()).unwrap();
        assert_eq!(imf.segments()[0].start, 2);
        imf.validate(VOCAB_SIZE, 4, 16).unwrap();
    }

    #[test]
    fn export_lists_one_record_per_item() {
        let ds = ToyDataset::new(1, DataConfig::default());
        let mut buf = Vec::new();
        ds.export(3, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.starts_with("shape="));
    }
}
