//! Chosen/rejected pair construction for the image-contrast and answer-contrast
//! objectives, plus their JSONL formats.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::world::{item_rng, ANSWER_WORDS, QUESTION_WORDS};
use super::{path_for_record, Triplet};
use crate::error::{Error, Result};
use crate::imageops::{read_pgm, write_pgm, CorruptionKind, CorruptionSpec, ImageGrid};
use crate::objectives::{ImagePrefItem, TextPrefItem};
use crate::policy::{AnswerId, PolicyParams, TokenSeq};
use crate::records::{read_jsonl, resolve_from, write_jsonl};

/// Semantic edits must cover strictly more than this fraction of the image.
pub const MIN_SEMANTIC_AREA: f64 = 0.10;

/// The corruption actually applied to one record, enough to replay it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorruptionLog {
    #[serde(flatten)]
    pub spec: CorruptionSpec,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub area_fraction: Option<f64>,
}

impl CorruptionLog {
    /// Re-applies the logged corruption to `source`, snapped to the 8-bit grid.
    pub fn replay(&self, source: &ImageGrid) -> Result<ImageGrid> {
        Ok(self.spec.apply(source, self.seed)?.image.quantized())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImagePair {
    pub pair_id: String,
    pub source_id: String,
    pub q: TokenSeq,
    pub a: AnswerId,
    pub good: ImageGrid,
    pub bad: ImageGrid,
    pub corruption: CorruptionLog,
}

impl ImagePair {
    pub fn to_item(&self) -> ImagePrefItem {
        ImagePrefItem {
            q: self.q.clone(),
            a: self.a,
            img_good: self.good.clone(),
            img_bad: self.bad.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeMode {
    /// Uniform over the wrong answers.
    #[default]
    Random,
    /// The wrong answer the reference policy rates highest.
    Hard,
}

impl std::str::FromStr for NegativeMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(NegativeMode::Random),
            "hard" => Ok(NegativeMode::Hard),
            other => Err(Error::Parameter(format!("unknown negative mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextPair {
    pub pair_id: String,
    pub source_id: String,
    pub q: TokenSeq,
    pub img: ImageGrid,
    pub a_good: AnswerId,
    pub a_bad: AnswerId,
    pub negative_mode: NegativeMode,
    /// Present when the shared image is a corrupted copy of the source.
    pub corruption: Option<CorruptionLog>,
}

impl TextPair {
    pub fn to_item(&self) -> TextPrefItem {
        TextPrefItem {
            q: self.q.clone(),
            img: self.img.clone(),
            a_good: self.a_good,
            a_bad: self.a_bad,
        }
    }
}

fn check_specs(specs: &[CorruptionSpec]) -> Result<()> {
    if specs.is_empty() {
        return Err(Error::Parameter("no corruption specs".into()));
    }
    if let Some(s) = specs.iter().find(|s| s.kind() == CorruptionKind::Resize) {
        return Err(Error::Parameter(format!(
            "{} is a severity-sweep transform, not a training corruption",
            s.kind()
        )));
    }
    Ok(())
}

/// Corrupts `img`; `None` when the result is filtered out (semantic area too
/// small, or no pixel changed).
fn corrupt(
    img: &ImageGrid,
    spec: &CorruptionSpec,
    seed: u64,
    index: u64,
) -> Result<Option<(ImageGrid, CorruptionLog)>> {
    let record_seed = item_rng(seed, index).gen::<u64>();
    let out = spec.apply(img, record_seed)?;
    if let Some(f) = out.area_fraction {
        if f <= MIN_SEMANTIC_AREA {
            return Ok(None);
        }
    }
    let bad = out.image.quantized();
    if bad.diff_count(img) == 0 {
        return Ok(None);
    }
    Ok(Some((
        bad,
        CorruptionLog {
            spec: spec.clone(),
            seed: record_seed,
            area_fraction: out.area_fraction,
        },
    )))
}

/// Every triplet × spec, with the rejected image `corruption(I_w)`; the
/// question and answer are copied unchanged.
pub fn build_image_pairs(
    triplets: &[Triplet],
    specs: &[CorruptionSpec],
    seed: u64,
) -> Result<Vec<ImagePair>> {
    check_specs(specs)?;
    let n_specs = specs.len();
    let built = (0..triplets.len() * n_specs)
        .into_par_iter()
        .map(|k| {
            let t = &triplets[k / n_specs];
            let s = k % n_specs;
            Ok(corrupt(&t.image, &specs[s], seed, k as u64)?.map(|(bad, log)| ImagePair {
                pair_id: format!("{}-c{s}", t.id),
                source_id: t.id.clone(),
                q: t.q.clone(),
                a: t.a,
                good: t.image.clone(),
                bad,
                corruption: log,
            }))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(built.into_iter().flatten().collect())
}

fn pick_negative(
    q: &TokenSeq,
    img: &ImageGrid,
    good: AnswerId,
    mode: NegativeMode,
    reference: Option<&PolicyParams>,
    rng_seed: u64,
    index: u64,
) -> Result<AnswerId> {
    let vocab = reference.map_or(ANSWER_WORDS.len(), |r| r.dims().answer_vocab);
    if vocab < 2 {
        return Err(Error::Parameter("answer vocabulary needs at least 2 entries".into()));
    }
    match mode {
        NegativeMode::Random => {
            let mut rng = item_rng(rng_seed, index);
            let r = rng.gen_range(0..vocab - 1);
            Ok(AnswerId(if r >= good.0 { r + 1 } else { r }))
        }
        NegativeMode::Hard => {
            let reference = reference.ok_or_else(|| {
                Error::Parameter("hard negatives need reference parameters".into())
            })?;
            let feats = reference.featurize(img)?;
            let logp = reference.forward_features(q, &feats)?;
            let mut best: Option<usize> = None;
            for (a, lp) in logp.iter().enumerate() {
                if a != good.0 && best.map_or(true, |b| *lp > logp[b]) {
                    best = Some(a);
                }
            }
            Ok(AnswerId(best.expect("vocab >= 2")))
        }
    }
}

/// One answer-contrast pair per triplet: ground truth vs a drawn wrong answer.
pub fn build_text_pairs(
    triplets: &[Triplet],
    seed: u64,
    mode: NegativeMode,
    reference: Option<&PolicyParams>,
) -> Result<Vec<TextPair>> {
    triplets
        .par_iter()
        .enumerate()
        .map(|(i, t)| {
            Ok(TextPair {
                pair_id: format!("{}-t", t.id),
                source_id: t.id.clone(),
                q: t.q.clone(),
                img: t.image.clone(),
                a_good: t.a,
                a_bad: pick_negative(&t.q, &t.image, t.a, mode, reference, seed, i as u64)?,
                negative_mode: mode,
                corruption: None,
            })
        })
        .collect()
}

/// As [`build_text_pairs`], with the shared image replaced by a corrupted copy,
/// once per triplet × spec.
pub fn build_text_pairs_on_corrupted(
    triplets: &[Triplet],
    specs: &[CorruptionSpec],
    seed: u64,
    mode: NegativeMode,
    reference: Option<&PolicyParams>,
) -> Result<Vec<TextPair>> {
    check_specs(specs)?;
    let n_specs = specs.len();
    let built = (0..triplets.len() * n_specs)
        .into_par_iter()
        .map(|k| {
            let t = &triplets[k / n_specs];
            let s = k % n_specs;
            let Some((img, log)) = corrupt(&t.image, &specs[s], seed, k as u64)? else {
                return Ok(None);
            };
            let a_bad = pick_negative(&t.q, &img, t.a, mode, reference, seed ^ 0x7465_7874, k as u64)?;
            Ok(Some(TextPair {
                pair_id: format!("{}-c{s}-t", t.id),
                source_id: t.id.clone(),
                q: t.q.clone(),
                img,
                a_good: t.a,
                a_bad,
                negative_mode: mode,
                corruption: Some(log),
            }))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(built.into_iter().flatten().collect())
}

/// One line of `pairs_image.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImagePairRecord {
    pub pair_id: String,
    pub q_tokens: Vec<usize>,
    pub answer: usize,
    pub good: String,
    pub bad: String,
    pub corruption: CorruptionLog,
    pub source_id: String,
}

/// One line of `pairs_text.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextPairRecord {
    pub pair_id: String,
    pub q_tokens: Vec<usize>,
    pub image: String,
    pub a_good: usize,
    pub a_bad: usize,
    pub negative_mode: NegativeMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corruption: Option<CorruptionLog>,
    pub source_id: String,
}

pub const IMAGE_PAIRS_FILE: &str = "pairs_image.jsonl";
pub const TEXT_PAIRS_FILE: &str = "pairs_text.jsonl";

/// Where the source image of `id` lives, or a fresh copy under `out_dir`.
fn source_image_ref(
    id: &str,
    img: &ImageGrid,
    sources: &BTreeMap<String, PathBuf>,
    out_dir: &Path,
) -> Result<String> {
    match sources.get(id) {
        Some(p) => path_for_record(p, out_dir),
        None => {
            let rel = format!("images/{id}.pgm");
            write_pgm(img, out_dir.join(&rel))?;
            Ok(rel)
        }
    }
}

/// Writes rejected images and `pairs_image.jsonl`; clean images are referenced
/// at their `sources` path (or copied when absent).
pub fn write_image_pairs(
    pairs: &[ImagePair],
    sources: &BTreeMap<String, PathBuf>,
    out_dir: impl AsRef<Path>,
) -> Result<PathBuf> {
    let out_dir = out_dir.as_ref();
    let records = pairs
        .par_iter()
        .map(|p| {
            let bad = format!("images/{}.pgm", p.pair_id);
            write_pgm(&p.bad, out_dir.join(&bad))?;
            Ok(ImagePairRecord {
                pair_id: p.pair_id.clone(),
                q_tokens: p.q.tokens().to_vec(),
                answer: p.a.0,
                good: source_image_ref(&p.source_id, &p.good, sources, out_dir)?,
                bad,
                corruption: p.corruption.clone(),
                source_id: p.source_id.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let path = out_dir.join(IMAGE_PAIRS_FILE);
    write_jsonl(&path, &records)?;
    Ok(path)
}

pub fn write_text_pairs(
    pairs: &[TextPair],
    sources: &BTreeMap<String, PathBuf>,
    out_dir: impl AsRef<Path>,
) -> Result<PathBuf> {
    let out_dir = out_dir.as_ref();
    let records = pairs
        .par_iter()
        .map(|p| {
            let image = if p.corruption.is_some() {
                let rel = format!("images/{}.pgm", p.pair_id);
                write_pgm(&p.img, out_dir.join(&rel))?;
                rel
            } else {
                source_image_ref(&p.source_id, &p.img, sources, out_dir)?
            };
            Ok(TextPairRecord {
                pair_id: p.pair_id.clone(),
                q_tokens: p.q.tokens().to_vec(),
                image,
                a_good: p.a_good.0,
                a_bad: p.a_bad.0,
                negative_mode: p.negative_mode,
                corruption: p.corruption.clone(),
                source_id: p.source_id.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let path = out_dir.join(TEXT_PAIRS_FILE);
    write_jsonl(&path, &records)?;
    Ok(path)
}

fn line_error(path: &Path, i: usize, m: impl std::fmt::Display) -> Error {
    Error::Validation(format!("{}:{}: {m}", path.display(), i + 1))
}

fn check_answer(path: &Path, i: usize, a: usize) -> Result<AnswerId> {
    if a >= ANSWER_WORDS.len() {
        return Err(line_error(path, i, format!("answer {a} out of range")));
    }
    Ok(AnswerId(a))
}

pub fn load_image_pairs(path: impl AsRef<Path>) -> Result<Vec<ImagePair>> {
    let path = path.as_ref();
    let records: Vec<ImagePairRecord> = read_jsonl(path)?;
    records
        .into_par_iter()
        .enumerate()
        .map(|(i, r)| {
            let q = TokenSeq::new(r.q_tokens, QUESTION_WORDS.len())
                .map_err(|e| line_error(path, i, e))?;
            let good = read_pgm(resolve_from(path, &r.good))?;
            let bad = read_pgm(resolve_from(path, &r.bad))?;
            if good.diff_count(&bad) == 0 {
                return Err(line_error(path, i, "good and bad images are identical"));
            }
            if matches!(r.corruption.area_fraction, Some(f) if f <= MIN_SEMANTIC_AREA) {
                return Err(line_error(path, i, "semantic edit covers too little area"));
            }
            Ok(ImagePair {
                pair_id: r.pair_id,
                source_id: r.source_id,
                q,
                a: check_answer(path, i, r.answer)?,
                good,
                bad,
                corruption: r.corruption,
            })
        })
        .collect()
}

pub fn load_text_pairs(path: impl AsRef<Path>) -> Result<Vec<TextPair>> {
    let path = path.as_ref();
    let records: Vec<TextPairRecord> = read_jsonl(path)?;
    records
        .into_par_iter()
        .enumerate()
        .map(|(i, r)| {
            let q = TokenSeq::new(r.q_tokens, QUESTION_WORDS.len())
                .map_err(|e| line_error(path, i, e))?;
            if r.a_good == r.a_bad {
                return Err(line_error(path, i, "a_good equals a_bad"));
            }
            Ok(TextPair {
                pair_id: r.pair_id,
                source_id: r.source_id,
                q,
                img: read_pgm(resolve_from(path, &r.image))?,
                a_good: check_answer(path, i, r.a_good)?,
                a_bad: check_answer(path, i, r.a_bad)?,
                negative_mode: r.negative_mode,
                corruption: r.corruption,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::super::{synth_world, WorldConfig};
    use super::*;
    use crate::imageops::{FillMode, Rect};
    use crate::policy::{init_params, PolicyDims};

    fn world(n: usize) -> Vec<Triplet> {
        synth_world(2, n, &WorldConfig::default()).unwrap()
    }

    fn semantic(size: usize) -> CorruptionSpec {
        CorruptionSpec::Semantic {
            region: Rect {
                x: 4,
                y: 4,
                width: size,
                height: size,
            },
            fill: FillMode::Noise,
        }
    }

    fn specs() -> Vec<CorruptionSpec> {
        vec![
            CorruptionSpec::Blur { kernel_size: 9 },
            CorruptionSpec::Pixelate { block_size: 16 },
            semantic(14),
        ]
    }

    #[test]
    fn cartesian_count() {
        let pairs = build_image_pairs(&world(10), &specs(), 1).unwrap();
        assert_eq!(pairs.len(), 30);
        for p in &pairs {
            assert!(p.good.diff_count(&p.bad) > 0);
            assert_eq!(p.corruption.replay(&p.good).unwrap(), p.bad);
        }
    }

    #[test]
    fn small_semantic_edits_are_dropped() {
        let pairs = build_image_pairs(&world(5), &[semantic(3)], 1).unwrap();
        assert!(pairs.is_empty());
        let err = build_image_pairs(&world(5), &[CorruptionSpec::Resize { factor: 2.0 }], 1);
        assert!(matches!(err, Err(Error::Parameter(_))));
        assert!(build_image_pairs(&world(5), &[], 1).is_err());
    }

    #[test]
    fn negatives_exclude_the_answer_and_are_seeded() {
        let w = world(200);
        let a = build_text_pairs(&w, 5, NegativeMode::Random, None).unwrap();
        let b = build_text_pairs(&w, 5, NegativeMode::Random, None).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|p| p.a_good != p.a_bad));
        assert!(build_text_pairs(&w, 5, NegativeMode::Hard, None).is_err());
    }

    #[test]
    fn hard_negatives_are_reference_argmax() {
        let w = world(30);
        let r = init_params(PolicyDims::default(), 3).unwrap();
        let pairs = build_text_pairs(&w, 0, NegativeMode::Hard, Some(&r)).unwrap();
        for (p, t) in pairs.iter().zip(&w) {
            let lp = crate::policy::forward(&r, &t.q, &t.image).unwrap();
            let best = (0..lp.len())
                .filter(|a| *a != t.a.0)
                .fold(None::<usize>, |b, a| match b {
                    Some(b) if lp[b] >= lp[a] => Some(b),
                    _ => Some(a),
                })
                .unwrap();
            assert_eq!(p.a_bad.0, best);
        }
    }

    #[test]
    fn corrupted_text_pairs_replay() {
        let w = world(6);
        let pairs =
            build_text_pairs_on_corrupted(&w, &specs(), 4, NegativeMode::Random, None).unwrap();
        assert_eq!(pairs.len(), 18);
        for p in &pairs {
            let src = w.iter().find(|t| t.id == p.source_id).unwrap();
            assert_ne!(p.img, src.image);
            assert_eq!(p.corruption.as_ref().unwrap().replay(&src.image).unwrap(), p.img);
        }
    }

    #[test]
    fn files_round_trip() {
        let w = world(4);
        let dir = tempfile::tempdir().unwrap();
        let gen = super::super::write_triplets(&w, dir.path().join("gen")).unwrap();
        let sources: BTreeMap<String, PathBuf> = super::super::load_triplets(&gen)
            .unwrap()
            .into_iter()
            .map(|l| (l.triplet.id, l.image_path))
            .collect();
        let pairs = build_image_pairs(&w, &specs(), 7).unwrap();
        let p = write_image_pairs(&pairs, &sources, dir.path().join("pairs")).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.contains("\"good\":\"../gen/images/s00000.pgm\""), "{text}");
        assert!(text.contains("\"corruption\":{\"kind\":\"blur\",\"params\":{\"kernel_size\":9},\"seed\":"));
        assert_eq!(load_image_pairs(&p).unwrap(), pairs);

        let tp = build_text_pairs_on_corrupted(&w, &specs(), 7, NegativeMode::Random, None).unwrap();
        let tpath = write_text_pairs(&tp, &sources, dir.path().join("tpairs")).unwrap();
        assert_eq!(load_text_pairs(&tpath).unwrap(), tp);
        let plain = build_text_pairs(&w, 7, NegativeMode::Random, None).unwrap();
        let ppath = write_text_pairs(&plain, &BTreeMap::new(), dir.path().join("plain")).unwrap();
        assert_eq!(load_text_pairs(&ppath).unwrap(), plain);
    }
}
