//! Verification trials, cosine scoring and error-rate metrics.

use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};

use indexmap::IndexMap;

use crate::archive::{self, Archive};
use crate::error::{Error, Result};
use crate::io::{read_text, write_atomic};
use crate::model::Embedding;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Label {
    Target,
    Nontarget,
}

impl Label {
    pub fn is_target(self) -> bool {
        self == Label::Target
    }

    fn digit(self) -> char {
        match self {
            Label::Target => '1',
            Label::Nontarget => '0',
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Trial {
    pub label: Label,
    pub enroll_id: String,
    pub test_id: String,
}

impl fmt::Display for Trial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {} {}",
            self.label.digit(),
            self.enroll_id,
            self.test_id
        )
    }
}

/// Parse `<label> <enroll> <test>` lines; blank lines are skipped.
pub fn parse_trials_text(text: &str, origin: &str) -> Result<Vec<Trial>> {
    let mut trials = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        let err = |message: String| Error::Parse {
            path: origin.to_string(),
            line: i + 1,
            message,
        };
        let &[label, enroll, test] = fields.as_slice() else {
            return Err(err(format!(
                "expected `<label> <enroll> <test>`, got {} fields",
                fields.len()
            )));
        };
        let label = match label {
            "1" => Label::Target,
            "0" => Label::Nontarget,
            other => return Err(err(format!("label must be 0 or 1, got {other:?}"))),
        };
        trials.push(Trial {
            label,
            enroll_id: enroll.to_string(),
            test_id: test.to_string(),
        });
    }
    Ok(trials)
}

pub fn parse_trials(path: &Path) -> Result<Vec<Trial>> {
    parse_trials_text(&read_text(path)?, &path.display().to_string())
}

pub fn format_trials(trials: &[Trial]) -> String {
    trials.iter().map(|t| format!("{t}\n")).collect()
}

/// Cosine similarity of two equal-length, nonzero vectors.
pub fn cosine(a: &[Real], b: &[Real]) -> Result<Real> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Shape(format!(
            "cosine of vectors with lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let dot: Real = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<Real>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<Real>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Domain("cosine similarity of a zero vector".into()));
    }
    Ok(dot / (na * nb))
}

/// Rounding slack allowed beyond the [-1, 1] cosine range.
const SCORE_SLACK: Real = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreRecord {
    pub trial: Trial,
    pub score: Real,
}

impl ScoreRecord {
    pub fn new(trial: Trial, score: Real) -> Result<Self> {
        if !(score.abs() <= 1.0 + SCORE_SLACK) {
            return Err(Error::Domain(format!("score {score} outside [-1, 1]")));
        }
        Ok(ScoreRecord { trial, score })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DetPoint {
    pub threshold: Real,
    pub far: Real,
    pub frr: Real,
}

/// Operating points at every distinct score, then one above the maximum
/// where everything is rejected. The sentinel reports the maximum score as
/// its threshold.
fn sweep(scores: &[(Real, bool)]) -> Result<Vec<DetPoint>> {
    let targets = scores.iter().filter(|s| s.1).count();
    let nontargets = scores.len() - targets;
    if targets == 0 || nontargets == 0 {
        return Err(Error::Contract(format!(
            "error rates need both classes, got {targets} targets and {nontargets} nontargets"
        )));
    }
    if let Some(s) = scores.iter().find(|s| !s.0.is_finite()) {
        return Err(Error::Domain(format!("non-finite score {}", s.0)));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (nt, nn) = (targets as Real, nontargets as Real);
    let mut points = Vec::new();
    // Counts of scores strictly below the current threshold.
    let (mut tgt_below, mut non_below) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let theta = sorted[i].0;
        points.push(DetPoint {
            threshold: theta,
            far: (nontargets - non_below) as Real / nn,
            frr: tgt_below as Real / nt,
        });
        while i < sorted.len() && sorted[i].0 == theta {
            if sorted[i].1 {
                tgt_below += 1;
            } else {
                non_below += 1;
            }
            i += 1;
        }
    }
    points.push(DetPoint {
        threshold: sorted[sorted.len() - 1].0,
        far: 0.0,
        frr: 1.0,
    });
    Ok(points)
}

fn pairs(scores: &[ScoreRecord]) -> Vec<(Real, bool)> {
    scores
        .iter()
        .map(|r| (r.score, r.trial.label.is_target()))
        .collect()
}

/// DET curve: FAR falls and FRR rises as the threshold increases.
pub fn det_points(scores: &[ScoreRecord]) -> Result<Vec<DetPoint>> {
    sweep(&pairs(scores))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Eer {
    pub eer: Real,
    pub threshold: Real,
}

/// Equal error rate of labelled `(score, is_target)` pairs.
pub fn eer_from_pairs(scores: &[(Real, bool)]) -> Result<Eer> {
    let points = sweep(scores)?;
    eer_from_points(&points)
}

/// Locate the first sweep point where FAR no longer exceeds FRR and
/// interpolate linearly from its predecessor.
pub fn eer_from_points(points: &[DetPoint]) -> Result<Eer> {
    let diff = |p: &DetPoint| p.far - p.frr;
    let i = points
        .iter()
        .position(|p| diff(p) <= 0.0)
        .ok_or_else(|| Error::Contract("sweep never crosses".into()))?;
    let cur = points[i];
    if diff(&cur) == 0.0 || i == 0 {
        return Ok(Eer {
            eer: cur.far,
            threshold: cur.threshold,
        });
    }
    let prev = points[i - 1];
    let alpha = diff(&prev) / (diff(&prev) - diff(&cur));
    Ok(Eer {
        eer: prev.far + alpha * (cur.far - prev.far),
        threshold: prev.threshold + alpha * (cur.threshold - prev.threshold),
    })
}

pub fn compute_eer(scores: &[ScoreRecord]) -> Result<Eer> {
    eer_from_pairs(&pairs(scores))
}

/// Relative error reduction of `new` against `baseline`.
pub fn compute_rer(new: Real, baseline: Real) -> Result<Real> {
    if baseline == 0.0 {
        return Err(Error::Domain(
            "relative error reduction against a zero baseline".into(),
        ));
    }
    Ok((baseline - new) / baseline)
}

// ---------------------------------------------------------------------------
// Embedding cache

pub const EMBEDDINGS_MAGIC: &[u8; 4] = b"RWNE";
pub const EMBEDDINGS_FILE: &str = "embeddings.bin";

/// Utterance embeddings keyed by the id used in trial lists.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EmbeddingStore {
    entries: IndexMap<String, Embedding>,
}

impl EmbeddingStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: impl Into<String>, e: Embedding) -> Result<()> {
        if let Some(first) = self.entries.values().next() {
            if first.dim() != e.dim() {
                return Err(Error::Shape(format!(
                    "embedding of dimension {} does not match store dimension {}",
                    e.dim(),
                    first.dim()
                )));
            }
        }
        self.entries.insert(id.into(), e);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Result<&Embedding> {
        self.entries
            .get(id)
            .ok_or_else(|| Error::Contract(format!("no embedding for utterance {id}")))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn path_in(dir: &Path) -> PathBuf {
        dir.join(EMBEDDINGS_FILE)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let tensors = self
            .entries
            .iter()
            .map(|(k, e)| (k.clone(), Tensor::vector(e.values().to_vec())))
            .collect();
        let dim = self.entries.values().next().map_or(0, Embedding::dim);
        let archive = Archive {
            meta: format!("embedding_dim = {dim}\n"),
            tensors,
        };
        archive::save(&Self::path_in(dir), EMBEDDINGS_MAGIC, &archive)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let archive = archive::load(&Self::path_in(dir), EMBEDDINGS_MAGIC)?;
        let mut store = EmbeddingStore::new();
        for (k, t) in archive.tensors {
            if t.rank() != 1 {
                return Err(Error::Format(format!("embedding {k} is not a vector")));
            }
            store.insert(k, Embedding::new(t.into_data())?)?;
        }
        Ok(store)
    }
}

/// Cosine score for every trial. Fails on the first id without an embedding.
pub fn score_trials(trials: &[Trial], store: &EmbeddingStore) -> Result<Vec<ScoreRecord>> {
    trials
        .iter()
        .map(|t| {
            let a = store.get(&t.enroll_id)?;
            let b = store.get(&t.test_id)?;
            ScoreRecord::new(t.clone(), cosine(a.values(), b.values())?)
        })
        .collect()
}

/// `<score> <label> <enroll> <test>` per line, six decimals.
pub fn format_scores(records: &[ScoreRecord]) -> String {
    let mut s = String::new();
    for r in records {
        let _ = writeln!(
            s,
            "{:.6} {} {} {}",
            r.score,
            r.trial.label.digit(),
            r.trial.enroll_id,
            r.trial.test_id
        );
    }
    s
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub trials: usize,
    pub targets: usize,
    pub nontargets: usize,
    pub eer: Eer,
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        format!(
            "trials: {}\ntargets: {}\nnontargets: {}\neer: {:.2}%\nthreshold: {:.6}\n",
            self.trials,
            self.targets,
            self.nontargets,
            100.0 * self.eer.eer,
            self.eer.threshold
        )
    }

    pub fn to_csv(&self) -> String {
        format!(
            "trials,targets,nontargets,eer,threshold\n{},{},{},{:.6},{:.6}\n",
            self.trials, self.targets, self.nontargets, self.eer.eer, self.eer.threshold
        )
    }
}

pub fn det_csv(points: &[DetPoint]) -> String {
    let mut s = String::from("threshold,far,frr\n");
    for p in points {
        let _ = writeln!(s, "{:.6},{:.6},{:.6}", p.threshold, p.far, p.frr);
    }
    s
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub scores: Vec<ScoreRecord>,
    pub report: EvalReport,
    pub det: Vec<DetPoint>,
}

pub fn evaluate(trials: &[Trial], store: &EmbeddingStore) -> Result<Evaluation> {
    let scores = score_trials(trials, store)?;
    let det = det_points(&scores)?;
    let eer = eer_from_points(&det)?;
    let targets = trials.iter().filter(|t| t.label.is_target()).count();
    Ok(Evaluation {
        report: EvalReport {
            trials: trials.len(),
            targets,
            nontargets: trials.len() - targets,
            eer,
        },
        scores,
        det,
    })
}

/// Paths of the files written next to a report at `report`.
pub fn sibling_paths(report: &Path) -> [PathBuf; 3] {
    let stem = report
        .file_stem()
        .map_or_else(|| "report".into(), |s| s.to_string_lossy().into_owned());
    let dir = report.parent().unwrap_or(Path::new(""));
    [
        dir.join(format!("{stem}.scores.txt")),
        dir.join(format!("{stem}.eer.csv")),
        dir.join(format!("{stem}.det.csv")),
    ]
}

/// Write the text report plus score, EER CSV and DET CSV siblings.
pub fn write_evaluation(report: &Path, e: &Evaluation) -> Result<()> {
    let [scores, eer, det] = sibling_paths(report);
    write_atomic(&scores, format_scores(&e.scores).as_bytes())?;
    write_atomic(&eer, e.report.to_csv().as_bytes())?;
    write_atomic(&det, det_csv(&e.det).as_bytes())?;
    write_atomic(report, e.report.to_text().as_bytes())
}
