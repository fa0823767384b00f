//! Procedural stand-in for the self-guided data pipeline: scene synthesis,
//! tool-driven expansion, and chosen/rejected pair construction.

pub mod pairs;
pub mod tools;
pub mod world;

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageops::{read_pgm, write_pgm, ImageGrid};
use crate::policy::{AnswerId, TokenSeq};
use crate::records::{read_jsonl, relative_to, resolve_from, write_jsonl};

pub use pairs::{
    build_image_pairs, build_text_pairs, build_text_pairs_on_corrupted, load_image_pairs,
    load_text_pairs, write_image_pairs, write_text_pairs, CorruptionLog, ImagePair,
    ImagePairRecord, NegativeMode, TextPair, TextPairRecord,
};
pub use tools::{apply_tool, propose_tool, GlobalTransform, ToolChoice, ToolKind};
pub use world::{
    answer_id, answer_word, tokenize, QuestionKind, Scene, Shape, ShapeClass, WorldConfig,
    ANSWER_WORDS, QUESTION_WORDS,
};

/// A `(Q, I, A)` unit together with the scene that produced the image.
#[derive(Debug, Clone, PartialEq)]
pub struct Triplet {
    pub id: String,
    pub question: QuestionKind,
    pub q: TokenSeq,
    pub a: AnswerId,
    pub scene: Scene,
    pub image: ImageGrid,
}

impl Triplet {
    /// Renders `scene` and derives the answer to `question`.
    pub fn from_scene(id: String, question: QuestionKind, scene: Scene) -> Result<Self> {
        let image = scene.render()?;
        Ok(Triplet {
            id,
            question,
            q: question.tokens(),
            a: question.answer(&scene),
            scene,
            image,
        })
    }
}

/// Scene parameters as stored next to each triplet.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneParams {
    pub question: QuestionKind,
    pub scene: Scene,
}

/// One line of `triplets.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TripletRecord {
    pub id: String,
    pub q_tokens: Vec<usize>,
    pub answer: usize,
    pub image: String,
    pub scene_params: SceneParams,
}

/// A triplet read back from disk with the resolved image location.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedTriplet {
    pub triplet: Triplet,
    pub image_path: PathBuf,
}

/// `n_scenes` seeded scenes with one template question each.
pub fn synth_world(seed: u64, n_scenes: usize, cfg: &WorldConfig) -> Result<Vec<Triplet>> {
    if n_scenes == 0 {
        return Err(Error::Parameter("n_scenes must be at least 1".into()));
    }
    cfg.validate()?;
    (0..n_scenes)
        .into_par_iter()
        .map(|i| {
            let mut rng = world::item_rng(seed, i as u64);
            let question = QuestionKind::ALL[rand::Rng::gen_range(&mut rng, 0..QuestionKind::ALL.len())];
            let n = world::sample_shape_count(&mut rng, cfg.max_shapes);
            let scene = world::sample_scene(&mut rng, cfg, n);
            Triplet::from_scene(format!("s{i:05}"), question, scene)
        })
        .collect()
}

pub const TRIPLETS_FILE: &str = "triplets.jsonl";

/// Writes `images/<id>.pgm` and `triplets.jsonl` under `dir`; returns the JSONL path.
pub fn write_triplets(triplets: &[Triplet], dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    let records = triplets
        .par_iter()
        .map(|t| {
            let rel = format!("images/{}.pgm", t.id);
            write_pgm(&t.image, dir.join(&rel))?;
            Ok(TripletRecord {
                id: t.id.clone(),
                q_tokens: t.q.tokens().to_vec(),
                answer: t.a.0,
                image: rel,
                scene_params: SceneParams {
                    question: t.question,
                    scene: t.scene.clone(),
                },
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let path = dir.join(TRIPLETS_FILE);
    write_jsonl(&path, &records)?;
    Ok(path)
}

/// Reads `triplets.jsonl`, checking that every image parses and matches its
/// scene, and that tokens and answers are in range.
pub fn load_triplets(path: impl AsRef<Path>) -> Result<Vec<LoadedTriplet>> {
    let path = path.as_ref();
    let records: Vec<TripletRecord> = read_jsonl(path)?;
    records
        .into_par_iter()
        .enumerate()
        .map(|(i, r)| {
            let at = |m: String| Error::Validation(format!("{}:{}: {m}", path.display(), i + 1));
            let q = TokenSeq::new(r.q_tokens, QUESTION_WORDS.len()).map_err(|e| at(e.to_string()))?;
            if r.answer >= ANSWER_WORDS.len() {
                return Err(at(format!("answer {} out of range", r.answer)));
            }
            let image_path = resolve_from(path, &r.image);
            let image = read_pgm(&image_path)?;
            let rendered = r.scene_params.scene.render().map_err(|e| at(e.to_string()))?;
            if rendered != image {
                return Err(at(format!("image {} does not match its scene", r.image)));
            }
            Ok(LoadedTriplet {
                triplet: Triplet {
                    id: r.id,
                    question: r.scene_params.question,
                    q,
                    a: AnswerId(r.answer),
                    scene: r.scene_params.scene,
                    image,
                },
                image_path,
            })
        })
        .collect()
}

/// Image path as written into a JSONL file living in `dir`.
pub(crate) fn path_for_record(target: &Path, dir: &Path) -> Result<String> {
    relative_to(target, dir)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn same_seed_same_world() {
        let cfg = WorldConfig::default();
        let a = synth_world(9, 40, &cfg).unwrap();
        let b = synth_world(9, 40, &cfg).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, synth_world(10, 40, &cfg).unwrap());
        assert!(synth_world(1, 0, &cfg).is_err());
    }

    #[test]
    fn answer_coverage() {
        let world = synth_world(1, 500, &WorldConfig::default()).unwrap();
        let seen: HashSet<usize> = world.iter().map(|t| t.a.0).collect();
        assert!(seen.len() as f64 >= 0.8 * ANSWER_WORDS.len() as f64, "{seen:?}");
    }

    #[test]
    fn disk_round_trip_is_byte_stable() {
        let world = synth_world(4, 12, &WorldConfig::default()).unwrap();
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let p1 = write_triplets(&world, d1.path()).unwrap();
        let p2 = write_triplets(&world, d2.path()).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        let back = load_triplets(&p1).unwrap();
        let triplets: Vec<Triplet> = back.into_iter().map(|l| l.triplet).collect();
        assert_eq!(triplets, world);
    }

    #[test]
    fn tampered_image_is_rejected() {
        let world = synth_world(4, 3, &WorldConfig::default()).unwrap();
        let d = tempfile::tempdir().unwrap();
        let p = write_triplets(&world, d.path()).unwrap();
        let blank = ImageGrid::filled(32, 32, 0.0).unwrap();
        write_pgm(&blank, d.path().join("images/s00001.pgm")).unwrap();
        let err = load_triplets(&p).unwrap_err().to_string();
        assert!(err.contains("triplets.jsonl:2"), "{err}");
    }
}
