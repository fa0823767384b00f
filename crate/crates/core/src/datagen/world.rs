//! Procedural scenes of 1–3 primitive shapes and template questions whose
//! answers follow from the scene parameters alone.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageops::ImageGrid;
use crate::policy::{AnswerId, TokenSeq};

/// Question-side vocabulary; a token is the word's index.
pub const QUESTION_WORDS: [&str; 32] = [
    "which", "shape", "is", "the", "largest", "brightest", "how", "many", "shapes", "are",
    "there", "where", "horizontally", "vertically", "what", "size", "of", "bright", "or", "dark",
    "most", "scenes", "usually", "a", "in", "this", "image", "big", "disc", "one", "left", "top",
];

/// Answer vocabulary; an [`AnswerId`] is the word's index.
pub const ANSWER_WORDS: [&str; 16] = [
    "disc", "square", "triangle", "cross", "ring", "one", "two", "three", "left", "right", "top",
    "bottom", "small", "large", "bright", "dark",
];

/// Synonyms accepted for each answer word.
pub const ANSWER_SYNONYMS: [(&str, &[&str]); 9] = [
    ("disc", &["disk", "circle"]),
    ("square", &["box"]),
    ("cross", &["plus"]),
    ("ring", &["annulus", "donut"]),
    ("one", &["1"]),
    ("two", &["2"]),
    ("three", &["3"]),
    ("large", &["big"]),
    ("small", &["little"]),
];

/// Maps words to token ids; punctuation and case are ignored.
pub fn tokenize(text: &str) -> Option<Vec<usize>> {
    let toks: Option<Vec<usize>> = text
        .split_whitespace()
        .map(|w| {
            w.trim_matches(|c: char| ".,!?;:'\"()".contains(c))
                .to_lowercase()
        })
        .filter(|w| !w.is_empty())
        .map(|w| QUESTION_WORDS.iter().position(|q| *q == w))
        .collect();
    toks.filter(|t| !t.is_empty())
}

pub fn answer_word(a: AnswerId) -> Option<&'static str> {
    ANSWER_WORDS.get(a.0).copied()
}

pub fn answer_id(word: &str) -> Option<AnswerId> {
    ANSWER_WORDS.iter().position(|w| *w == word).map(AnswerId)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeClass {
    Disc,
    Square,
    Triangle,
    Cross,
    Ring,
}

impl ShapeClass {
    pub const ALL: [ShapeClass; 5] = [
        ShapeClass::Disc,
        ShapeClass::Square,
        ShapeClass::Triangle,
        ShapeClass::Cross,
        ShapeClass::Ring,
    ];

    pub fn answer(self) -> AnswerId {
        AnswerId(self as usize)
    }

    /// Whether the offset `(dx, dy)` from the centre lies inside a shape of radius `r`.
    fn covers(self, dx: f64, dy: f64, r: f64) -> bool {
        match self {
            ShapeClass::Disc => dx * dx + dy * dy <= r * r,
            ShapeClass::Square => dx.abs() <= r && dy.abs() <= r,
            // apex up; image rows grow downward
            ShapeClass::Triangle => dy.abs() <= r && dx.abs() <= (dy + r) / 2.0,
            ShapeClass::Cross => {
                let arm = r / 3.0;
                (dx.abs() <= arm && dy.abs() <= r) || (dy.abs() <= arm && dx.abs() <= r)
            }
            ShapeClass::Ring => {
                let d2 = dx * dx + dy * dy;
                d2 <= r * r && d2 >= r * r / 4.0
            }
        }
    }
}

impl fmt::Display for ShapeClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(ANSWER_WORDS[*self as usize])
    }
}

impl FromStr for ShapeClass {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        ShapeClass::ALL
            .into_iter()
            .find(|c| c.to_string() == s)
            .ok_or_else(|| Error::Parameter(format!("unknown shape class {s:?}")))
    }
}

/// One shape; the centre is pixel `(cx, cy)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Shape {
    pub class: ShapeClass,
    pub cx: usize,
    pub cy: usize,
    pub radius: usize,
    pub intensity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scene {
    pub width: usize,
    pub height: usize,
    pub background: f64,
    pub shapes: Vec<Shape>,
}

/// Radii available to shapes; pairwise distinct within a scene.
const RADII: [usize; 7] = [3, 4, 5, 6, 7, 8, 9];
/// Intensities available to shapes; pairwise distinct within a scene.
const INTENSITIES: [f64; 8] = [0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0];
/// Radii above this are "large".
pub const SMALL_MAX_RADIUS: usize = 5;
/// Intensities at or above this are "bright".
pub const BRIGHT_MIN: f64 = 0.65;

impl Scene {
    fn checked(&self) -> Result<()> {
        if self.shapes.is_empty() {
            return Err(Error::Validation("scene has no shapes".into()));
        }
        if !(0.0..=1.0).contains(&self.background) {
            return Err(Error::Validation("background outside [0,1]".into()));
        }
        for (i, s) in self.shapes.iter().enumerate() {
            if s.cx >= self.width || s.cy >= self.height || s.radius == 0 {
                return Err(Error::Validation(format!("shape {i} outside the canvas")));
            }
            if !(0.0..=1.0).contains(&s.intensity) {
                return Err(Error::Validation(format!("shape {i} intensity outside [0,1]")));
            }
            for t in &self.shapes[..i] {
                if t.radius == s.radius || t.intensity == s.intensity {
                    return Err(Error::Validation(
                        "shape radii and intensities must be distinct".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn largest(&self) -> &Shape {
        self.shapes.iter().max_by_key(|s| s.radius).expect("nonempty scene")
    }

    pub fn brightest(&self) -> &Shape {
        self.shapes
            .iter()
            .max_by(|a, b| a.intensity.total_cmp(&b.intensity))
            .expect("nonempty scene")
    }

    /// Rasterizes the scene; larger shapes are drawn first so smaller ones stay
    /// visible. Pixel values are snapped to the 8-bit grid so the in-memory image
    /// equals its PGM encoding.
    pub fn render(&self) -> Result<ImageGrid> {
        self.checked()?;
        let mut order: Vec<&Shape> = self.shapes.iter().collect();
        order.sort_by(|a, b| b.radius.cmp(&a.radius));
        let mut px = vec![self.background; self.width * self.height];
        for s in order {
            let r = s.radius as f64;
            for y in s.cy.saturating_sub(s.radius)..(s.cy + s.radius + 1).min(self.height) {
                for x in s.cx.saturating_sub(s.radius)..(s.cx + s.radius + 1).min(self.width) {
                    let dx = x as f64 - s.cx as f64;
                    let dy = y as f64 - s.cy as f64;
                    if s.class.covers(dx, dy, r) {
                        px[y * self.width + x] = s.intensity;
                    }
                }
            }
        }
        Ok(ImageGrid::new(self.width, self.height, px)?.quantized())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionKind {
    LargestClass,
    Count,
    BrightestHorizontal,
    BrightestVertical,
    LargestSize,
    LargestTone,
}

impl QuestionKind {
    pub const ALL: [QuestionKind; 6] = [
        QuestionKind::LargestClass,
        QuestionKind::Count,
        QuestionKind::BrightestHorizontal,
        QuestionKind::BrightestVertical,
        QuestionKind::LargestSize,
        QuestionKind::LargestTone,
    ];

    pub fn text(self) -> &'static str {
        match self {
            QuestionKind::LargestClass => "Which shape is the largest?",
            QuestionKind::Count => "How many shapes are there?",
            QuestionKind::BrightestHorizontal => "Where is the brightest shape horizontally?",
            QuestionKind::BrightestVertical => "Where is the brightest shape vertically?",
            QuestionKind::LargestSize => "What is the size of the largest shape?",
            QuestionKind::LargestTone => "Is the largest shape bright or dark?",
        }
    }

    /// A true-sounding statement pointing at the most common answer.
    pub fn distractor_fact(self) -> &'static str {
        match self {
            QuestionKind::LargestClass => "The largest shape is usually a disc.",
            QuestionKind::Count => "There is usually one shape.",
            QuestionKind::BrightestHorizontal => "In most scenes the brightest shape is left.",
            QuestionKind::BrightestVertical => "In most scenes the brightest shape is top.",
            QuestionKind::LargestSize => "The largest shape is usually big.",
            QuestionKind::LargestTone => "The largest shape is usually bright.",
        }
    }

    pub fn tokens(self) -> TokenSeq {
        let t = tokenize(self.text()).expect("question templates use the vocabulary");
        TokenSeq::new(t, QUESTION_WORDS.len()).expect("nonempty, in range")
    }

    /// Ground truth from scene parameters.
    pub fn answer(self, scene: &Scene) -> AnswerId {
        let word = match self {
            QuestionKind::LargestClass => return scene.largest().class.answer(),
            QuestionKind::Count => ["one", "two", "three"][scene.shapes.len().clamp(1, 3) - 1],
            QuestionKind::BrightestHorizontal => {
                if 2 * scene.brightest().cx < scene.width {
                    "left"
                } else {
                    "right"
                }
            }
            QuestionKind::BrightestVertical => {
                if 2 * scene.brightest().cy < scene.height {
                    "top"
                } else {
                    "bottom"
                }
            }
            QuestionKind::LargestSize => {
                if scene.largest().radius <= SMALL_MAX_RADIUS {
                    "small"
                } else {
                    "large"
                }
            }
            QuestionKind::LargestTone => {
                if scene.largest().intensity >= BRIGHT_MIN {
                    "bright"
                } else {
                    "dark"
                }
            }
        };
        answer_id(word).expect("answer words are in the vocabulary")
    }

    /// Answer a text-only guesser would give: the mode of the sampling distribution.
    pub fn prior_answer(self) -> AnswerId {
        let word = match self {
            QuestionKind::LargestClass => "disc",
            QuestionKind::Count => "one",
            QuestionKind::BrightestHorizontal => "left",
            QuestionKind::BrightestVertical => "top",
            QuestionKind::LargestSize => "large",
            QuestionKind::LargestTone => "bright",
        };
        answer_id(word).expect("answer words are in the vocabulary")
    }
}

/// Knobs of the scene sampler.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub width: usize,
    pub height: usize,
    pub max_shapes: usize,
    /// Probability that the largest shape is a disc (the text prior).
    pub largest_disc_bias: f64,
    /// Probability that the brightest shape sits in the left/top half.
    pub position_bias: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            width: 32,
            height: 32,
            max_shapes: 3,
            largest_disc_bias: 0.5,
            position_bias: 0.6,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width < 2 * RADII[RADII.len() - 1] + 2 || self.height < 2 * RADII[RADII.len() - 1] + 2
        {
            return Err(Error::Parameter(format!(
                "canvas {}x{} too small for the shape radii",
                self.width, self.height
            )));
        }
        if !(1..=3).contains(&self.max_shapes) {
            return Err(Error::Parameter("max_shapes must be in 1..=3".into()));
        }
        for (name, p) in [
            ("largest_disc_bias", self.largest_disc_bias),
            ("position_bias", self.position_bias),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Parameter(format!("{name} must be a probability")));
            }
        }
        Ok(())
    }
}

/// Per-item generator: stream `index` of the ChaCha8 sequence for `seed`.
pub(crate) fn item_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn biased_coordinate<R: Rng>(rng: &mut R, extent: usize, radius: usize, low_half: bool) -> usize {
    // centres keep the shape fully on the canvas and strictly inside one half
    let half = extent / 2;
    if low_half {
        rng.gen_range(radius..half)
    } else {
        rng.gen_range(half..extent - radius)
    }
}

/// Samples a scene with `n_shapes` shapes (1..=3).
pub fn sample_scene<R: Rng>(rng: &mut R, cfg: &WorldConfig, n_shapes: usize) -> Scene {
    let radii: Vec<usize> = {
        let mut r = RADII.choose_multiple(rng, n_shapes).copied().collect::<Vec<_>>();
        r.sort_unstable_by(|a, b| b.cmp(a));
        r
    };
    let intensities: Vec<f64> = INTENSITIES.choose_multiple(rng, n_shapes).copied().collect();
    let brightest = intensities
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .expect("nonempty");
    let shapes = radii
        .iter()
        .zip(&intensities)
        .enumerate()
        .map(|(i, (&radius, &intensity))| {
            let class = if i == 0 && rng.gen_bool(cfg.largest_disc_bias) {
                ShapeClass::Disc
            } else if i == 0 {
                ShapeClass::ALL[rng.gen_range(1..5)]
            } else {
                ShapeClass::ALL[rng.gen_range(0..5)]
            };
            let p = if i == brightest { cfg.position_bias } else { 0.5 };
            let (left, top) = (rng.gen_bool(p), rng.gen_bool(p));
            let cx = biased_coordinate(rng, cfg.width, radius, left);
            let cy = biased_coordinate(rng, cfg.height, radius, top);
            Shape {
                class,
                cx,
                cy,
                radius,
                intensity,
            }
        })
        .collect();
    Scene {
        width: cfg.width,
        height: cfg.height,
        background: rng.gen_range(0..4) as f64 * 0.05,
        shapes,
    }
}

/// Shape count with a skew toward a single shape.
pub(crate) fn sample_shape_count<R: Rng>(rng: &mut R, max_shapes: usize) -> usize {
    let u: f64 = rng.gen();
    let n = if u < 0.5 {
        1
    } else if u < 0.8 {
        2
    } else {
        3
    };
    n.min(max_shapes)
}
