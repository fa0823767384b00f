//! Single-word answer scoring: normalization, synonym/plural matching, Score and
//! Prior aggregation, model-backed responders, and corruption severity sweeps.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::world::{item_rng, sample_scene, sample_shape_count, ANSWER_SYNONYMS};
use crate::datagen::{answer_word, tokenize, QuestionKind, WorldConfig, QUESTION_WORDS};
use crate::error::{Error, Result};
use crate::imageops::{read_pgm, write_pgm, CorruptionKind, CorruptionSpec, ImageGrid};
use crate::policy::{PolicyParams, TokenSeq};
use crate::records::{read_jsonl, resolve_from, write_bytes, write_jsonl};
use crate::trainer::predict;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Prior,
    Test,
}

/// One row of `benchmark.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkRecord {
    pub id: String,
    pub group_id: String,
    pub question: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fact: Option<String>,
    pub image: String,
    pub answer: String,
    #[serde(default)]
    pub synonyms: Vec<String>,
    pub role: Role,
}

/// Prompt variant: with the distractor fact (`F`) or the bare question (`P`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Setting {
    F,
    P,
}

impl std::str::FromStr for Setting {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "F" | "f" => Ok(Setting::F),
            "P" | "p" => Ok(Setting::P),
            other => Err(Error::Parameter(format!("unknown setting {other:?}, expected F or P"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Normalized {
    pub canonical: String,
    pub word_count: usize,
}

const STRIP: &[char] = &['.', ',', '!', '?', ';', ':', '\'', '"', '(', ')'];

fn strip_edges(s: &str) -> &str {
    s.trim_matches(|c: char| c.is_whitespace() || STRIP.contains(&c))
}

/// Case-folds, strips surrounding whitespace/punctuation, drops one leading
/// article, and collapses internal whitespace.
pub fn normalize_answer(raw: &str) -> Normalized {
    let folded = raw.to_lowercase();
    let mut words: Vec<&str> = strip_edges(&folded).split_whitespace().collect();
    if words.len() > 1 && matches!(words[0], "a" | "an" | "the") {
        words.remove(0);
    }
    let joined = words.join(" ");
    let canonical = strip_edges(&joined).to_string();
    Normalized {
        word_count: canonical.split_whitespace().count(),
        canonical,
    }
}

/// Canonical answer → acceptable normalized alternatives, kept symmetric.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynonymLexicon {
    entries: BTreeMap<String, BTreeSet<String>>,
}

impl SynonymLexicon {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds `canonical ↔ alternative` in both directions (after normalization).
    pub fn insert(&mut self, canonical: &str, alternative: &str) {
        let c = normalize_answer(canonical).canonical;
        let a = normalize_answer(alternative).canonical;
        if c.is_empty() || a.is_empty() || c == a {
            return;
        }
        self.entries.entry(c.clone()).or_default().insert(a.clone());
        self.entries.entry(a).or_default().insert(c);
    }

    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Self {
        let mut lex = Self::new();
        for (c, a) in pairs {
            lex.insert(c, a);
        }
        lex
    }

    /// The synthetic world's answer synonyms.
    pub fn world_default() -> Self {
        Self::from_pairs(
            ANSWER_SYNONYMS
                .iter()
                .flat_map(|(c, alts)| alts.iter().map(move |a| (*c, *a))),
        )
    }

    pub fn alternatives(&self, canonical: &str) -> impl Iterator<Item = &str> {
        self.entries
            .get(canonical)
            .into_iter()
            .flat_map(|s| s.iter().map(String::as_str))
    }

    pub fn accepts(&self, gold: &str, pred: &str) -> bool {
        self.entries.get(gold).is_some_and(|s| s.contains(pred))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// `x+s = y`, `x+es = y`, or `x = stem+ies` with `y = stem+y`, either way round.
pub fn plural_equivalent(x: &str, y: &str) -> bool {
    fn one_way(x: &str, y: &str) -> bool {
        if y.strip_suffix('s') == Some(x) || y.strip_suffix("es") == Some(x) {
            return true;
        }
        match (x.strip_suffix("ies"), y.strip_suffix('y')) {
            (Some(a), Some(b)) => !a.is_empty() && a == b,
            _ => false,
        }
    }
    !x.is_empty() && !y.is_empty() && (one_way(x, y) || one_way(y, x))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchVerdict {
    pub correct: bool,
    pub instruction_failure: bool,
}

fn forms_match(pred: &str, gold: &str, lexicon: &SynonymLexicon, extra: &[String]) -> bool {
    if pred.is_empty() {
        return false;
    }
    let mut accepted: Vec<&str> = vec![gold];
    accepted.extend(lexicon.alternatives(gold));
    let extra: Vec<String> = extra.iter().map(|s| normalize_answer(s).canonical).collect();
    accepted.extend(extra.iter().map(String::as_str));
    accepted
        .iter()
        .any(|g| *g == pred || plural_equivalent(pred, g))
}

/// Strict mode rejects multi-word responses as instruction failures; lenient
/// mode keeps only the first word.
pub fn match_answer(pred: &str, gold: &str, lexicon: &SynonymLexicon, strict: bool) -> MatchVerdict {
    match_with_extras(pred, gold, lexicon, &[], strict)
}

fn match_with_extras(
    pred: &str,
    gold: &str,
    lexicon: &SynonymLexicon,
    extra: &[String],
    strict: bool,
) -> MatchVerdict {
    let p = normalize_answer(pred);
    let g = normalize_answer(gold).canonical;
    if p.word_count > 1 {
        if strict {
            return MatchVerdict {
                correct: false,
                instruction_failure: true,
            };
        }
        let first = p.canonical.split_whitespace().next().unwrap_or("");
        let first = normalize_answer(first).canonical;
        return MatchVerdict {
            correct: forms_match(&first, &g, lexicon, extra),
            instruction_failure: true,
        };
    }
    MatchVerdict {
        correct: forms_match(&p.canonical, &g, lexicon, extra),
        instruction_failure: false,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordVerdict {
    pub id: String,
    pub role: Role,
    pub response: Option<String>,
    pub correct: bool,
    pub instruction_failure: bool,
    /// Correctness when multi-word responses are cut to their first word.
    pub lenient_correct: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub setting: Setting,
    /// Percentage of correct `test` records (strict).
    pub score: f64,
    /// Percentage of correct `prior` records (strict).
    pub prior: f64,
    /// Percentage of all records that failed the single-word instruction or had no response.
    pub instruction_failure_rate: f64,
    pub lenient_score: f64,
    pub lenient_prior: f64,
    pub n_test: usize,
    pub n_prior: usize,
    pub correct_test: usize,
    pub correct_prior: usize,
    pub instruction_failures: usize,
    pub verdicts: Vec<RecordVerdict>,
}

fn percent(k: usize, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        100.0 * k as f64 / n as f64
    }
}

fn check_unique_ids(records: &[BenchmarkRecord]) -> Result<()> {
    let mut seen = BTreeSet::new();
    let dups: BTreeSet<&str> = records
        .iter()
        .filter(|r| !seen.insert(r.id.as_str()))
        .map(|r| r.id.as_str())
        .collect();
    if !dups.is_empty() {
        return Err(Error::Validation(format!(
            "duplicate record ids: {}",
            dups.into_iter().collect::<Vec<_>>().join(", ")
        )));
    }
    Ok(())
}

/// Exactly one prior per group and at most three records per group.
pub fn validate_groups(records: &[BenchmarkRecord]) -> Result<()> {
    check_unique_ids(records)?;
    let mut groups: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for r in records {
        let g = groups.entry(&r.group_id).or_default();
        g.0 += 1;
        if r.role == Role::Prior {
            g.1 += 1;
        }
    }
    for (gid, (n, priors)) in groups {
        if priors != 1 || n > 3 {
            return Err(Error::Validation(format!(
                "group {gid} has {n} records and {priors} prior records"
            )));
        }
    }
    Ok(())
}

/// Scores `predictions` (id → response) against `records`; missing responses
/// count as wrong instruction failures.
pub fn score_benchmark(
    records: &[BenchmarkRecord],
    predictions: &BTreeMap<String, String>,
    setting: Setting,
    lexicon: &SynonymLexicon,
) -> Result<ScoreReport> {
    check_unique_ids(records)?;
    let verdicts: Vec<RecordVerdict> = records
        .par_iter()
        .map(|r| {
            let response = predictions.get(&r.id).cloned();
            let (strict, lenient) = match &response {
                Some(p) => (
                    match_with_extras(p, &r.answer, lexicon, &r.synonyms, true),
                    match_with_extras(p, &r.answer, lexicon, &r.synonyms, false),
                ),
                None => {
                    let miss = MatchVerdict {
                        correct: false,
                        instruction_failure: true,
                    };
                    (miss, miss)
                }
            };
            RecordVerdict {
                id: r.id.clone(),
                role: r.role,
                response,
                correct: strict.correct,
                instruction_failure: strict.instruction_failure,
                lenient_correct: lenient.correct,
            }
        })
        .collect();
    let count = |role: Role, f: fn(&RecordVerdict) -> bool| {
        verdicts.iter().filter(|v| v.role == role && f(v)).count()
    };
    let n_test = count(Role::Test, |_| true);
    let n_prior = count(Role::Prior, |_| true);
    let correct_test = count(Role::Test, |v| v.correct);
    let correct_prior = count(Role::Prior, |v| v.correct);
    let instruction_failures = verdicts.iter().filter(|v| v.instruction_failure).count();
    Ok(ScoreReport {
        setting,
        score: percent(correct_test, n_test),
        prior: percent(correct_prior, n_prior),
        instruction_failure_rate: percent(instruction_failures, verdicts.len()),
        lenient_score: percent(count(Role::Test, |v| v.lenient_correct), n_test),
        lenient_prior: percent(count(Role::Prior, |v| v.lenient_correct), n_prior),
        n_test,
        n_prior,
        correct_test,
        correct_prior,
        instruction_failures,
        verdicts,
    })
}

/// One row of `predictions.jsonl`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Prediction {
    pub id: String,
    pub response: String,
}

pub fn load_predictions(path: impl AsRef<Path>) -> Result<BTreeMap<String, String>> {
    let path = path.as_ref();
    let rows: Vec<Prediction> = read_jsonl(path)?;
    let mut out = BTreeMap::new();
    for (i, p) in rows.into_iter().enumerate() {
        if out.insert(p.id.clone(), p.response).is_some() {
            return Err(Error::Validation(format!(
                "{}:{}: duplicate prediction id {}",
                path.display(),
                i + 1,
                p.id
            )));
        }
    }
    Ok(out)
}

/// Ids in `records` without a prediction, and prediction ids matching no record.
pub fn id_mismatches(
    records: &[BenchmarkRecord],
    predictions: &BTreeMap<String, String>,
) -> (Vec<String>, Vec<String>) {
    let ids: BTreeSet<&str> = records.iter().map(|r| r.id.as_str()).collect();
    let missing = records
        .iter()
        .filter(|r| !predictions.contains_key(&r.id))
        .map(|r| r.id.clone())
        .collect();
    let unknown = predictions
        .keys()
        .filter(|k| !ids.contains(k.as_str()))
        .cloned()
        .collect();
    (missing, unknown)
}

/// A benchmark record with its decoded image.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchItem {
    pub record: BenchmarkRecord,
    pub image: ImageGrid,
}

pub const BENCHMARK_FILE: &str = "benchmark.jsonl";

pub fn load_benchmark(path: impl AsRef<Path>) -> Result<Vec<BenchItem>> {
    let path = path.as_ref();
    let records: Vec<BenchmarkRecord> = read_jsonl(path)?;
    validate_groups(&records)?;
    records
        .into_par_iter()
        .map(|record| {
            let image = read_pgm(resolve_from(path, &record.image))?;
            Ok(BenchItem { record, image })
        })
        .collect()
}

pub fn write_benchmark(items: &[BenchItem], dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    items
        .par_iter()
        .try_for_each(|it| write_pgm(&it.image, dir.join(&it.record.image)))?;
    let records: Vec<&BenchmarkRecord> = items.iter().map(|it| &it.record).collect();
    let path = dir.join(BENCHMARK_FILE);
    write_jsonl(&path, &records)?;
    Ok(path)
}

/// Groups of one prior record (the answer a text-only guess would give) and two
/// test records whose images contradict it, drawn from the synthetic world.
pub fn synthetic_benchmark(seed: u64, n_groups: usize, cfg: &WorldConfig) -> Result<Vec<BenchItem>> {
    cfg.validate()?;
    let lexicon = SynonymLexicon::world_default();
    let groups = (0..n_groups)
        .into_par_iter()
        .map(|g| {
            let mut rng = item_rng(seed, g as u64);
            let kind = QuestionKind::ALL[rng.gen_range(0..QuestionKind::ALL.len())];
            let prior = kind.prior_answer();
            let mut draw = |want_prior: bool| -> Result<crate::datagen::Scene> {
                for _ in 0..10_000 {
                    let n = sample_shape_count(&mut rng, cfg.max_shapes);
                    let scene = sample_scene(&mut rng, cfg, n);
                    if (kind.answer(&scene) == prior) == want_prior {
                        return Ok(scene);
                    }
                }
                Err(Error::Validation(format!(
                    "could not sample a scene for {kind:?} (prior answer: {want_prior})"
                )))
            };
            let scenes = [draw(true)?, draw(false)?, draw(false)?];
            let group_id = format!("g{g:04}");
            scenes
                .into_iter()
                .zip([("p", Role::Prior), ("t1", Role::Test), ("t2", Role::Test)])
                .map(|(scene, (tag, role))| {
                    let id = format!("{group_id}-{tag}");
                    let answer = answer_word(kind.answer(&scene)).expect("answer in vocabulary");
                    Ok(BenchItem {
                        image: scene.render()?,
                        record: BenchmarkRecord {
                            image: format!("images/{id}.pgm"),
                            id,
                            group_id: group_id.clone(),
                            question: kind.text().to_string(),
                            fact: Some(kind.distractor_fact().to_string()),
                            answer: answer.to_string(),
                            synonyms: lexicon.alternatives(answer).map(String::from).collect(),
                            role,
                        },
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(groups.into_iter().flatten().collect())
}

fn prompt_tokens(record: &BenchmarkRecord, setting: Setting) -> Option<TokenSeq> {
    let text = match (setting, &record.fact) {
        (Setting::F, Some(f)) => format!("{f} {}", record.question),
        _ => record.question.clone(),
    };
    tokenize(&text).and_then(|t| TokenSeq::new(t, QUESTION_WORDS.len()).ok())
}

/// Argmax answers of the policy, decoded to answer words.
pub fn model_responder(
    params: &PolicyParams,
    items: &[BenchItem],
    setting: Setting,
) -> Result<BTreeMap<String, String>> {
    let prompts: Vec<Option<TokenSeq>> = items
        .iter()
        .map(|it| prompt_tokens(&it.record, setting))
        .collect();
    let bad: Vec<String> = items
        .iter()
        .zip(&prompts)
        .filter(|(_, p)| p.is_none())
        .map(|(it, _)| it.record.id.clone())
        .collect();
    if !bad.is_empty() {
        return Err(Error::Responder { ids: bad });
    }
    items
        .par_iter()
        .zip(prompts.par_iter())
        .map(|(it, q)| {
            let a = predict(params, q.as_ref().expect("checked above"), &it.image)?;
            let word = answer_word(a).ok_or_else(|| {
                Error::Lookup(format!("answer id {} has no word", a.0))
            })?;
            Ok((it.record.id.clone(), word.to_string()))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub level: f64,
    pub report: ScoreReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub kind: CorruptionKind,
    pub setting: Setting,
    pub rows: Vec<SweepRow>,
    /// Score is non-increasing, allowing one rise of at most one point.
    pub monotone: bool,
    pub inversions: usize,
}

impl SweepTable {
    /// CSV with columns `level,score,prior,instruction_failure_rate`.
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["level", "score", "prior", "instruction_failure_rate"])
            .and_then(|_| {
                self.rows.iter().try_for_each(|r| {
                    w.serialize((
                        r.level,
                        r.report.score,
                        r.report.prior,
                        r.report.instruction_failure_rate,
                    ))
                })
            })
            .map_err(|e| Error::Validation(format!("csv encoding failed: {e}")))?;
        w.into_inner()
            .map_err(|e| Error::Validation(format!("csv encoding failed: {e}")))
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        write_bytes(path.as_ref(), &self.to_csv()?)
    }
}

/// `(verdict, number of rises)` for a score sequence.
pub fn monotone_verdict(scores: &[f64]) -> (bool, usize) {
    let rises: Vec<f64> = scores
        .windows(2)
        .map(|w| w[1] - w[0])
        .filter(|d| *d > 0.0)
        .collect();
    let ok = rises.is_empty() || (rises.len() == 1 && rises[0] <= 1.0);
    (ok, rises.len())
}

/// Scores the policy on every image corrupted at each level.
pub fn severity_sweep(
    params: &PolicyParams,
    items: &[BenchItem],
    kind: CorruptionKind,
    levels: &[f64],
    setting: Setting,
    lexicon: &SynonymLexicon,
) -> Result<SweepTable> {
    if levels.is_empty() {
        return Err(Error::Parameter("no severity levels".into()));
    }
    if levels.windows(2).any(|w| !(w[0] <= w[1])) {
        return Err(Error::Parameter("severity levels must be sorted ascending".into()));
    }
    let specs = levels
        .iter()
        .map(|&l| CorruptionSpec::at_level(kind, l))
        .collect::<Result<Vec<_>>>()?;
    let records: Vec<BenchmarkRecord> = items.iter().map(|it| it.record.clone()).collect();
    let rows = levels
        .iter()
        .zip(&specs)
        .map(|(&level, spec)| {
            let corrupted = items
                .par_iter()
                .map(|it| {
                    Ok(BenchItem {
                        record: it.record.clone(),
                        image: spec.apply(&it.image, 0)?.image,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let preds = model_responder(params, &corrupted, setting)?;
            Ok(SweepRow {
                level,
                report: score_benchmark(&records, &preds, setting, lexicon)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let scores: Vec<f64> = rows.iter().map(|r| r.report.score).collect();
    let (monotone, inversions) = monotone_verdict(&scores);
    Ok(SweepTable {
        kind,
        setting,
        rows,
        monotone,
        inversions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{PolicyDims, PolicyParams};

    fn rec(id: &str, group: &str, answer: &str, role: Role) -> BenchmarkRecord {
        BenchmarkRecord {
            id: id.into(),
            group_id: group.into(),
            question: "Which shape is the largest?".into(),
            fact: None,
            image: format!("images/{id}.pgm"),
            answer: answer.into(),
            synonyms: vec![],
            role,
        }
    }

    #[test]
    fn normalization_examples() {
        assert_eq!(
            normalize_answer("  The Torus. "),
            Normalized {
                canonical: "torus".into(),
                word_count: 1
            }
        );
        assert_eq!(
            normalize_answer("A red sphere"),
            Normalized {
                canonical: "red sphere".into(),
                word_count: 2
            }
        );
        assert_eq!(normalize_answer("").canonical, "");
        assert_eq!(normalize_answer("the").canonical, "the");
    }

    #[test]
    fn matching_examples() {
        let lex = SynonymLexicon::from_pairs([("torus", "tori")]);
        assert!(match_answer("Tori", "torus", &lex, true).correct);
        assert!(match_answer("torus", "tori", &lex, true).correct);
        let empty = SynonymLexicon::new();
        assert!(match_answer("berries", "berry", &empty, true).correct);
        let v = match_answer("a large torus", "torus", &lex, true);
        assert_eq!(
            v,
            MatchVerdict {
                correct: false,
                instruction_failure: true
            }
        );
        let lenient = match_answer("torus shaped", "torus", &lex, false);
        assert!(lenient.correct && lenient.instruction_failure);
        assert!(!match_answer("", "torus", &lex, true).correct);
        assert!(!match_answer("cube", "torus", &lex, true).correct);
    }

    #[test]
    fn lexicon_is_symmetric() {
        let lex = SynonymLexicon::world_default();
        for (c, alts) in ANSWER_SYNONYMS {
            for a in alts {
                assert!(lex.accepts(c, a) && lex.accepts(a, c), "{c} {a}");
            }
        }
    }

    #[test]
    fn perfect_and_empty_predictions() {
        let records = vec![
            rec("a", "g", "disc", Role::Prior),
            rec("b", "g", "square", Role::Test),
            rec("c", "g", "ring", Role::Test),
        ];
        let lex = SynonymLexicon::new();
        let all: BTreeMap<String, String> = records
            .iter()
            .map(|r| (r.id.clone(), r.answer.clone()))
            .collect();
        let r = score_benchmark(&records, &all, Setting::P, &lex).unwrap();
        assert_eq!((r.score, r.prior, r.instruction_failure_rate), (100.0, 100.0, 0.0));
        let r = score_benchmark(&records, &BTreeMap::new(), Setting::F, &lex).unwrap();
        assert_eq!((r.score, r.prior, r.instruction_failure_rate), (0.0, 0.0, 100.0));
        let mut dup = records.clone();
        dup.push(rec("a", "h", "disc", Role::Prior));
        assert!(matches!(
            score_benchmark(&dup, &all, Setting::P, &lex),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn group_validation() {
        let ok = vec![rec("a", "g", "disc", Role::Prior), rec("b", "g", "ring", Role::Test)];
        validate_groups(&ok).unwrap();
        let two_priors = vec![rec("a", "g", "disc", Role::Prior), rec("b", "g", "ring", Role::Prior)];
        assert!(validate_groups(&two_priors).is_err());
    }

    #[test]
    fn verdict_rules() {
        assert_eq!(monotone_verdict(&[90.0, 80.0, 80.0, 50.0]), (true, 0));
        assert_eq!(monotone_verdict(&[90.0, 80.0, 80.5, 50.0]), (true, 1));
        assert_eq!(monotone_verdict(&[90.0, 80.0, 82.0, 50.0]), (false, 1));
        assert_eq!(monotone_verdict(&[90.0, 90.5, 80.0, 80.5]), (false, 2));
    }

    #[test]
    fn synthetic_benchmark_shape() {
        let items = synthetic_benchmark(3, 20, &WorldConfig::default()).unwrap();
        assert_eq!(items.len(), 60);
        let records: Vec<BenchmarkRecord> = items.iter().map(|i| i.record.clone()).collect();
        validate_groups(&records).unwrap();
        for g in records.chunks(3) {
            assert_eq!(g[0].role, Role::Prior);
            assert_ne!(g[0].answer, g[1].answer);
            assert_ne!(g[0].answer, g[2].answer);
        }
    }

    #[test]
    fn uniform_policy_answers_lowest_index() {
        let items = synthetic_benchmark(4, 5, &WorldConfig::default()).unwrap();
        let zero = PolicyParams::zeros(PolicyDims::default()).unwrap();
        for setting in [Setting::F, Setting::P] {
            let preds = model_responder(&zero, &items, setting).unwrap();
            assert!(preds.values().all(|p| p == "disc"));
        }
        let mut bad = items.clone();
        bad[1].record.question = "what colour is the zebra".into();
        match model_responder(&zero, &bad, Setting::P) {
            Err(Error::Responder { ids }) => assert_eq!(ids, vec![bad[1].record.id.clone()]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn sweep_rejects_bad_levels() {
        let items = synthetic_benchmark(4, 2, &WorldConfig::default()).unwrap();
        let zero = PolicyParams::zeros(PolicyDims::default()).unwrap();
        let lex = SynonymLexicon::new();
        let sweep = |k, l: &[f64]| severity_sweep(&zero, &items, k, l, Setting::P, &lex);
        assert!(sweep(CorruptionKind::Blur, &[3.0, 1.0]).is_err());
        assert!(sweep(CorruptionKind::Blur, &[1.0, 4.0]).is_err());
        assert!(sweep(CorruptionKind::Blur, &[]).is_err());
        let t = sweep(CorruptionKind::Pixelate, &[1.0, 2.0]).unwrap();
        let csv = String::from_utf8(t.to_csv().unwrap()).unwrap();
        assert!(csv.starts_with("level,score,prior,instruction_failure_rate\n1.0,"), "{csv}");
    }
}
