use std::fmt;

use serde::{Deserialize, Serialize};

use super::TeacherError;
use crate::dataset::vocab::{self, TokenId, Vocabulary};
use crate::sim::{Cell, ObjectKind, Scene, Task};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    LeftOf,
    RightOf,
    Above,
    Below,
    On,
    At,
}

impl Relation {
    pub const ALL: [Relation; 6] = [
        Relation::LeftOf,
        Relation::RightOf,
        Relation::Above,
        Relation::Below,
        Relation::On,
        Relation::At,
    ];

    pub fn word(self) -> &'static str {
        match self {
            Relation::LeftOf => "left_of",
            Relation::RightOf => "right_of",
            Relation::Above => "above",
            Relation::Below => "below",
            Relation::On => "on",
            Relation::At => "at",
        }
    }

    pub fn from_word(w: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|r| r.word() == w)
    }

    /// Whether `a REL b` holds for the cells (y grows downward).
    pub fn holds(self, a: Cell, b: Cell) -> bool {
        match self {
            Relation::LeftOf => a.x < b.x,
            Relation::RightOf => a.x > b.x,
            Relation::Above => a.y < b.y,
            Relation::Below => a.y > b.y,
            Relation::On | Relation::At => a == b,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mention {
    pub kind: ObjectKind,
    pub cell: Cell,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpatialFact {
    pub subject: ObjectKind,
    pub relation: Relation,
    pub object: ObjectKind,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "verb", content = "target", rename_all = "snake_case")]
pub enum PlanStep {
    MoveTo(ObjectKind),
    Grasp(ObjectKind),
    Release(ObjectKind),
}

impl PlanStep {
    pub fn target(self) -> ObjectKind {
        match self {
            PlanStep::MoveTo(k) | PlanStep::Grasp(k) | PlanStep::Release(k) => k,
        }
    }

    pub fn words(self) -> Vec<&'static str> {
        match self {
            PlanStep::MoveTo(k) => vec!["move", "to", k.word()],
            PlanStep::Grasp(k) => vec!["grasp", k.word()],
            PlanStep::Release(k) => vec!["release", k.word()],
        }
    }
}

/// Four-part chain-of-thought: what is seen, what is asked, how the task objects
/// relate in space, and the step plan.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RationaleRecord {
    pub observation: Vec<Mention>,
    pub situation: Vec<String>,
    pub spatial: Vec<SpatialFact>,
    pub plan: Vec<PlanStep>,
}

pub const HEADERS: [&str; 4] = ["Observation", "Situation Analysis", "Spatial Reasoning", "Task Planning"];

fn task_cells(scene: &Scene, task: &Task) -> Result<(Cell, Cell), TeacherError> {
    let find = |k: ObjectKind| {
        scene
            .find_kind(k)
            .map(|o| o.cell)
            .ok_or_else(|| TeacherError::Task(format!("no {k} in scene")))
    };
    Ok((find(task.source)?, find(task.destination)?))
}

/// Ground-truth rationale read off the symbolic scene. The plan lists only the
/// subtasks that remain given the grasp state.
pub fn oracle_annotate(scene: &Scene, task: &Task) -> Result<RationaleRecord, TeacherError> {
    let (src, dst) = task_cells(scene, task)?;
    let fact = |relation| SpatialFact {
        subject: task.source,
        relation,
        object: task.destination,
    };
    let mut spatial = Vec::new();
    match src.x.cmp(&dst.x) {
        std::cmp::Ordering::Less => spatial.push(fact(Relation::LeftOf)),
        std::cmp::Ordering::Greater => spatial.push(fact(Relation::RightOf)),
        std::cmp::Ordering::Equal => {}
    }
    match src.y.cmp(&dst.y) {
        std::cmp::Ordering::Less => spatial.push(fact(Relation::Above)),
        std::cmp::Ordering::Greater => spatial.push(fact(Relation::Below)),
        std::cmp::Ordering::Equal => {}
    }
    if src == dst {
        spatial.push(fact(Relation::On));
    }
    Ok(RationaleRecord {
        observation: vec![
            Mention { kind: task.source, cell: src },
            Mention { kind: task.destination, cell: dst },
        ],
        situation: task.instruction.clone(),
        spatial,
        plan: remaining_plan(scene, task),
    })
}

/// Subtasks still ahead of the gripper in `scene`.
fn remaining_plan(scene: &Scene, task: &Task) -> Vec<PlanStep> {
    let source_id = scene.find_kind(task.source).map(|o| o.id);
    let full = [
        PlanStep::MoveTo(task.source),
        PlanStep::Grasp(task.source),
        PlanStep::MoveTo(task.destination),
        PlanStep::Release(task.source),
    ];
    let skip = if scene.delivered.is_some() && scene.delivered == source_id {
        3
    } else if scene.held.is_some() && scene.held == source_id {
        2
    } else {
        0
    };
    full[skip..].to_vec()
}

/// Token layout: `<OBS> (kind x y)* <SIT> word* <SPA> (kind rel kind)* <PLAN> step* <EOS>`.
pub fn serialize_rationale(r: &RationaleRecord, vocab: &Vocabulary) -> Result<Vec<TokenId>, TeacherError> {
    let mut words: Vec<String> = vec![vocab::OBS.into()];
    for m in &r.observation {
        if m.cell.x > 9 || m.cell.y > 9 {
            return Err(TeacherError::Vocab(format!("cell {:?} needs more than one digit", m.cell)));
        }
        words.extend([m.kind.word().to_string(), m.cell.x.to_string(), m.cell.y.to_string()]);
    }
    words.push(vocab::SIT.into());
    for w in &r.situation {
        if w.starts_with('<') || vocab.action_of(vocab.id(w)?).is_some() {
            return Err(TeacherError::Vocab(format!("{w:?} cannot appear in a situation")));
        }
        words.push(w.clone());
    }
    words.push(vocab::SPA.into());
    for f in &r.spatial {
        words.extend([f.subject.word(), f.relation.word(), f.object.word()].map(String::from));
    }
    words.push(vocab::PLAN.into());
    for s in &r.plan {
        words.extend(s.words().into_iter().map(String::from));
    }
    words.push(vocab::EOS.into());
    Ok(vocab.encode_words(&words)?)
}

/// Inverse of [`serialize_rationale`].
pub fn parse_rationale_ids(ids: &[TokenId], vocab: &Vocabulary) -> Result<RationaleRecord, TeacherError> {
    let words: Vec<&str> = ids.iter().map(|&i| vocab.token(i)).collect::<Result<_, _>>()?;
    let section = |open: &str, close: &str| -> Result<&[&str], TeacherError> {
        let a = words
            .iter()
            .position(|w| *w == open)
            .ok_or_else(|| TeacherError::Format(format!("missing {open}")))?;
        let b = words
            .iter()
            .position(|w| *w == close)
            .ok_or_else(|| TeacherError::Format(format!("missing {close}")))?;
        if b < a {
            return Err(TeacherError::Format(format!("{close} before {open}")));
        }
        Ok(&words[a + 1..b])
    };
    if words.first() != Some(&vocab::OBS) || words.last() != Some(&vocab::EOS) {
        return Err(TeacherError::Format("rationale must start with <OBS> and end with <EOS>".into()));
    }
    let markers = [vocab::OBS, vocab::SIT, vocab::SPA, vocab::PLAN, vocab::EOS];
    for m in markers {
        if words.iter().filter(|w| **w == m).count() != 1 {
            return Err(TeacherError::Format(format!("{m} must appear exactly once")));
        }
    }
    let obs = section(vocab::OBS, vocab::SIT)?;
    let sit = section(vocab::SIT, vocab::SPA)?;
    let spa = section(vocab::SPA, vocab::PLAN)?;
    let plan = section(vocab::PLAN, vocab::EOS)?;

    if obs.len() % 3 != 0 {
        return Err(TeacherError::Format("observation entries are kind x y triples".into()));
    }
    let observation = obs
        .chunks(3)
        .map(|c| {
            Ok(Mention {
                kind: kind_of(c[0])?,
                cell: Cell::new(digit(c[1])?, digit(c[2])?),
            })
        })
        .collect::<Result<_, TeacherError>>()?;
    if let Some(bad) = sit.iter().find(|w| w.starts_with('<') || w.starts_with("ACT_")) {
        return Err(TeacherError::Format(format!("marker {bad} inside situation")));
    }
    let situation = sit.iter().map(|w| w.to_string()).collect();
    if spa.len() % 3 != 0 {
        return Err(TeacherError::Format("spatial entries are kind relation kind triples".into()));
    }
    let spatial = spa
        .chunks(3)
        .map(|c| {
            Ok(SpatialFact {
                subject: kind_of(c[0])?,
                relation: Relation::from_word(c[1])
                    .ok_or_else(|| TeacherError::Format(format!("unknown relation {}", c[1])))?,
                object: kind_of(c[2])?,
            })
        })
        .collect::<Result<_, TeacherError>>()?;
    Ok(RationaleRecord {
        observation,
        situation,
        spatial,
        plan: parse_plan_words(plan)?,
    })
}

fn kind_of(w: &str) -> Result<ObjectKind, TeacherError> {
    ObjectKind::from_word(w).ok_or_else(|| TeacherError::Hallucination(format!("unknown object {w:?}")))
}

fn digit(w: &str) -> Result<usize, TeacherError> {
    w.parse::<usize>()
        .map_err(|_| TeacherError::Format(format!("expected a coordinate, got {w:?}")))
}

fn parse_plan_words(words: &[&str]) -> Result<Vec<PlanStep>, TeacherError> {
    let mut steps = Vec::new();
    let mut i = 0;
    while i < words.len() {
        let (step, used) = match (words[i], words.get(i + 1), words.get(i + 2)) {
            ("move", Some(&"to"), Some(k)) => (PlanStep::MoveTo(kind_of(k)?), 3),
            ("grasp", Some(k), _) => (PlanStep::Grasp(kind_of(k)?), 2),
            ("release", Some(k), _) => (PlanStep::Release(kind_of(k)?), 2),
            (w, ..) => return Err(TeacherError::Format(format!("cannot parse plan step at {w:?}"))),
        };
        steps.push(step);
        i += used;
    }
    Ok(steps)
}

/// Teacher-facing text form, one section per line under the four headers.
pub fn rationale_to_text(r: &RationaleRecord) -> String {
    let obs: Vec<String> = r
        .observation
        .iter()
        .map(|m| format!("{} at ({}, {})", m.kind, m.cell.x, m.cell.y))
        .collect();
    let spa: Vec<String> = r
        .spatial
        .iter()
        .map(|f| format!("{} {} {}", f.subject, f.relation.word(), f.object))
        .collect();
    let plan: Vec<String> = r.plan.iter().map(|s| s.words().join(" ")).collect();
    format!(
        "{}: {}\n{}: {}\n{}: {}\n{}: {}\n",
        HEADERS[0],
        obs.join("; "),
        HEADERS[1],
        r.situation.join(" "),
        HEADERS[2],
        spa.join("; "),
        HEADERS[3],
        plan.join("; "),
    )
}

fn normalize(text: &str) -> String {
    let mut t = text.to_lowercase();
    for (from, to) in [
        ("green block", "green_block"),
        ("yellow block", "yellow_block"),
        ("left of", "left_of"),
        ("right of", "right_of"),
    ] {
        t = t.replace(from, to);
    }
    t
}

/// Splits teacher text into the four section bodies, keyed by header position.
fn split_sections(raw: &str) -> Result<[String; 4], TeacherError> {
    let mut found: [Option<String>; 4] = Default::default();
    for line in raw.lines() {
        let cleaned = line.trim().trim_start_matches(['#', '*', '-', ' ']);
        for (i, header) in HEADERS.iter().enumerate() {
            let Some(head) = cleaned.get(..header.len()) else { continue };
            if !head.eq_ignore_ascii_case(header) {
                continue;
            }
            let rest = cleaned[header.len()..].trim_start_matches('*').trim_start();
            let Some(body) = rest.strip_prefix(':') else { continue };
            if found[i].is_some() {
                return Err(TeacherError::Format(format!("section {header:?} appears twice")));
            }
            found[i] = Some(body.trim_start_matches('*').trim().to_string());
        }
    }
    let mut out: [String; 4] = Default::default();
    for (i, f) in found.into_iter().enumerate() {
        out[i] = f.ok_or_else(|| TeacherError::Format(format!("missing section {:?}", HEADERS[i])))?;
    }
    Ok(out)
}

fn items(body: &str) -> Vec<String> {
    body.split(';')
        .map(|s| s.trim().trim_end_matches('.').trim().to_string())
        .filter(|s| !s.is_empty())
        .collect()
}

/// Parses teacher text and checks it against `scene`: every object must exist,
/// every coordinate and spatial relation must match the scene geometry.
pub fn parse_and_validate(raw: &str, scene: &Scene, vocab: &Vocabulary) -> Result<RationaleRecord, TeacherError> {
    let [obs, sit, spa, plan] = split_sections(&normalize(raw))?;

    let present = |w: &str| -> Result<ObjectKind, TeacherError> {
        let k = kind_of(w)?;
        if scene.contains_kind(k) {
            Ok(k)
        } else {
            Err(TeacherError::Hallucination(format!("{k} is not in the scene")))
        }
    };

    let mut observation = Vec::new();
    for item in items(&obs) {
        let spaced = item.replace(['(', ')', ','], " ");
        let w: Vec<&str> = spaced.split_whitespace().collect();
        let [kind, "at", x, y] = w.as_slice() else {
            if let Some(first) = w.first() {
                present(first)?;
            }
            return Err(TeacherError::Format(format!("observation item {item:?}")));
        };
        let kind = present(kind)?;
        let cell = Cell::new(digit(x)?, digit(y)?);
        if !scene.objects.iter().any(|o| o.kind == kind && o.cell == cell) {
            return Err(TeacherError::Consistency(format!("no {kind} at ({}, {})", cell.x, cell.y)));
        }
        observation.push(Mention { kind, cell });
    }

    let situation: Vec<String> = sit
        .trim_end_matches('.')
        .split_whitespace()
        .map(String::from)
        .collect();
    for w in &situation {
        if !vocab.contains(w) || w.starts_with('<') || w.starts_with("ACT_") {
            return Err(TeacherError::Vocab(format!("situation word {w:?}")));
        }
    }

    let mut spatial = Vec::new();
    for item in items(&spa) {
        let w: Vec<&str> = item.split_whitespace().collect();
        let [a, rel, b] = w.as_slice() else {
            return Err(TeacherError::Format(format!("spatial item {item:?}")));
        };
        let (subject, object) = (present(a)?, present(b)?);
        let relation =
            Relation::from_word(rel).ok_or_else(|| TeacherError::Format(format!("unknown relation {rel:?}")))?;
        let holds = scene.objects.iter().filter(|o| o.kind == subject).any(|sa| {
            scene
                .objects
                .iter()
                .filter(|o| o.kind == object)
                .any(|sb| relation.holds(sa.cell, sb.cell))
        });
        if !holds {
            return Err(TeacherError::Consistency(format!("{item:?} contradicts the scene")));
        }
        spatial.push(SpatialFact { subject, relation, object });
    }

    let mut steps = Vec::new();
    for item in items(&plan) {
        let w: Vec<&str> = item.split_whitespace().collect();
        for k in w.iter().skip(1).filter(|k| **k != "to") {
            present(k)?;
        }
        let parsed = parse_plan_words(&w)?;
        steps.extend(parsed);
    }
    if steps.is_empty() {
        return Err(TeacherError::Format("task plan is empty".into()));
    }
    Ok(RationaleRecord {
        observation,
        situation,
        spatial,
        plan: steps,
    })
}

impl fmt::Display for RationaleRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&rationale_to_text(self))
    }
}
