//! Entity sampling and question templating.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::entities::{EntityKind, EntitySpec};
use super::render::{placement, Placement};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Identification,
    Position,
    Counting,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Identification, Task::Position, Task::Counting];

    pub fn name(self) -> &'static str {
        match self {
            Task::Identification => "identification",
            Task::Position => "position",
            Task::Counting => "counting",
        }
    }
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown task {s:?}")))
    }
}

pub const OPTION_LABELS: [&str; 4] = ["A", "B", "C", "D"];
pub const RELATIONS: [&str; 4] = ["left", "right", "above", "below"];
pub const MAX_COUNT: usize = 4;

pub const IDENT_TEMPLATE: &str = "What is the object in the picture?";

pub fn position_question(ei: &str, ej: &str) -> String {
    format!("Where is {ei} at {ej} in the picture?")
}

pub fn counting_question(ei: &str) -> String {
    format!("How many {ei} are in the picture?")
}

/// Drawn entities with their positions. For counting the single entity is
/// repeated once per position.
#[derive(Clone, Debug, PartialEq)]
pub struct Draw {
    pub entities: Vec<EntitySpec>,
    pub positions: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntityRef {
    pub id: u32,
    pub kind: EntityKind,
    pub label: String,
    pub position: u8,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QAItem {
    pub task: Task,
    pub image_id: String,
    pub entities: Vec<EntityRef>,
    pub question: String,
    /// Option texts in A..D order.
    pub options: Vec<String>,
    /// Letter of the correct option.
    pub answer: String,
    pub seed: u64,
    /// Position of the entity the question interrogates.
    pub probe_position: u8,
    /// Image path relative to the corpus root.
    pub image: String,
}

impl QAItem {
    pub fn answer_text(&self) -> Option<&str> {
        let i = OPTION_LABELS.iter().position(|l| *l == self.answer)?;
        self.options.get(i).map(String::as_str)
    }

    pub fn option_index(label: &str) -> Option<usize> {
        OPTION_LABELS.iter().position(|l| *l == label)
    }
}

/// Relation of a point at `(xi, yi)` to one at `(xj, yj)` along the dominant
/// axis, or `None` when both axes tie.
pub fn relation(pi: &Placement, pj: &Placement) -> Option<&'static str> {
    let (dx, dy) = (pi.x - pj.x, pi.y - pj.y);
    if dx.abs() == dy.abs() {
        None
    } else if dx.abs() > dy.abs() {
        Some(if dx < 0.0 { "left" } else { "right" })
    } else {
        Some(if dy < 0.0 { "above" } else { "below" })
    }
}

fn draw_positions(rng: &mut ChaCha8Rng, count: usize, probe: Option<u8>) -> Vec<u8> {
    let mut all: Vec<u8> = (1..=9).collect();
    all.shuffle(rng);
    if let Some(p) = probe {
        let i = all.iter().position(|&q| q == p).unwrap_or(0);
        all.swap(0, i);
    }
    all.truncate(count);
    all
}

const MAX_RESAMPLES: usize = 64;

/// Draws entities and positions for `task`. With `probe` set, the
/// interrogated entity is placed there and the rest drawn from the remaining positions.
pub fn sample_entities(
    seed: u64,
    task: Task,
    pool: &[EntitySpec],
    probe: Option<u8>,
    r: usize,
) -> Result<Draw> {
    let need = match task {
        Task::Position => 2,
        _ => 1,
    };
    if pool.len() < need.max(OPTION_LABELS.len()) {
        return Err(Error::Generation(format!(
            "entity pool of {} is too small",
            pool.len()
        )));
    }
    if probe.is_some_and(|p| !(1..=9).contains(&p)) {
        return Err(Error::Config(format!(
            "probe position {probe:?} outside 1..=9"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match task {
        Task::Identification => {
            let e = pool.choose(&mut rng).cloned();
            Ok(Draw {
                entities: e.into_iter().collect(),
                positions: draw_positions(&mut rng, 1, probe),
            })
        }
        Task::Counting => {
            let e = pool.choose(&mut rng).cloned().into_iter().collect();
            let k = rng.random_range(1..=MAX_COUNT);
            Ok(Draw {
                entities: e,
                positions: draw_positions(&mut rng, k, probe),
            })
        }
        Task::Position => {
            let entities: Vec<EntitySpec> = pool.choose_multiple(&mut rng, 2).cloned().collect();
            for _ in 0..MAX_RESAMPLES {
                let positions = draw_positions(&mut rng, 2, probe);
                let (pi, pj) = (placement(positions[0], r)?, placement(positions[1], r)?);
                if relation(&pi, &pj).is_some() {
                    return Ok(Draw {
                        entities,
                        positions,
                    });
                }
            }
            Err(Error::Generation(
                "could not draw an unambiguous position pair".into(),
            ))
        }
    }
}

/// Builds the question, answer and shuffled options for a draw.
pub fn gen_qa(
    task: Task,
    draw: &Draw,
    pool: &[EntitySpec],
    seed: u64,
    r: usize,
    image_id: &str,
) -> Result<QAItem> {
    let arity_ok = match task {
        Task::Identification => draw.entities.len() == 1 && draw.positions.len() == 1,
        Task::Position => draw.entities.len() == 2 && draw.positions.len() == 2,
        Task::Counting => {
            draw.entities.len() == 1 && (1..=MAX_COUNT).contains(&draw.positions.len())
        }
    };
    if !arity_ok {
        return Err(Error::Precondition(format!(
            "{} task with {} entities at {} positions",
            task.name(),
            draw.entities.len(),
            draw.positions.len()
        )));
    }
    // separate stream from the draw so options do not correlate with it
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let e0 = &draw.entities[0];
    let (question, answer, space): (String, String, Vec<String>) = match task {
        Task::Identification => (
            IDENT_TEMPLATE.into(),
            e0.label.clone(),
            pool.iter().map(|e| e.label.clone()).collect(),
        ),
        Task::Position => {
            let (pi, pj) = (
                placement(draw.positions[0], r)?,
                placement(draw.positions[1], r)?,
            );
            let rel =
                relation(&pi, &pj).ok_or_else(|| Error::Generation("tied relation".into()))?;
            (
                position_question(&e0.label, &draw.entities[1].label),
                rel.into(),
                RELATIONS.iter().map(|s| s.to_string()).collect(),
            )
        }
        Task::Counting => (
            counting_question(&e0.label),
            draw.positions.len().to_string(),
            (1..=MAX_COUNT).map(|k| k.to_string()).collect(),
        ),
    };
    let others: Vec<&String> = space.iter().filter(|s| **s != answer).collect();
    let mut options: Vec<String> = others
        .choose_multiple(&mut rng, OPTION_LABELS.len() - 1)
        .map(|s| (*s).clone())
        .collect();
    options.push(answer.clone());
    options.shuffle(&mut rng);
    let at = options.iter().position(|o| *o == answer).unwrap_or(0);
    let entities = match task {
        Task::Counting => draw
            .positions
            .iter()
            .map(|&p| EntityRef {
                id: e0.id,
                kind: e0.kind,
                label: e0.label.clone(),
                position: p,
            })
            .collect(),
        _ => draw
            .entities
            .iter()
            .zip(&draw.positions)
            .map(|(e, &p)| EntityRef {
                id: e.id,
                kind: e.kind,
                label: e.label.clone(),
                position: p,
            })
            .collect(),
    };
    Ok(QAItem {
        task,
        image_id: image_id.into(),
        entities,
        question,
        options,
        answer: OPTION_LABELS[at].into(),
        seed,
        probe_position: draw.positions[0],
        image: format!("images/{image_id}.ppm"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::entitygrid::entities::pool;

    #[test]
    fn deterministic_draws() {
        let p = pool(None, 224);
        for t in Task::ALL {
            assert_eq!(
                sample_entities(5, t, &p, None, 224).unwrap(),
                sample_entities(5, t, &p, None, 224).unwrap()
            );
        }
        let d = sample_entities(5, Task::Position, &p, Some(5), 224).unwrap();
        assert_eq!(d.positions.len(), 2);
        assert_eq!(d.positions[0], 5);
        assert_ne!(d.positions[0], d.positions[1]);
    }

    #[test]
    fn left_of() {
        let (a, b) = (placement(4, 224).unwrap(), placement(6, 224).unwrap());
        assert_eq!(relation(&a, &b), Some("left"));
        assert_eq!(
            relation(&placement(1, 8).unwrap(), &placement(5, 8).unwrap()),
            None
        );
    }

    #[test]
    fn templates_and_answers() {
        let p = pool(None, 224);
        let apple = p.iter().find(|e| e.label == "apple").unwrap().clone();
        let d = Draw {
            entities: vec![apple],
            positions: vec![3],
        };
        let q = gen_qa(Task::Identification, &d, &p, 1, 224, "x").unwrap();
        assert_eq!(q.question, IDENT_TEMPLATE);
        assert_eq!(q.answer_text(), Some("apple"));
        assert_eq!(q.options.len(), 4);
        let c = gen_qa(Task::Counting, &d, &p, 1, 224, "x").unwrap();
        assert_eq!(c.answer_text(), Some("1"));
        assert_eq!(c.question, "How many apple are in the picture?");
        assert!(gen_qa(Task::Position, &d, &p, 1, 224, "x").is_err());
    }
}
