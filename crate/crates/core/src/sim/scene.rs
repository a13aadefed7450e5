use std::fmt;

use serde::{Deserialize, Serialize};

use super::SimError;
use crate::canonical::{sha256_hex, to_canonical_json};

pub const DEFAULT_GRID: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectKind {
    Spoon,
    Towel,
    Carrot,
    Plate,
    GreenBlock,
    YellowBlock,
    Eggplant,
    Basket,
}

impl ObjectKind {
    pub const ALL: [ObjectKind; 8] = [
        ObjectKind::Spoon,
        ObjectKind::Towel,
        ObjectKind::Carrot,
        ObjectKind::Plate,
        ObjectKind::GreenBlock,
        ObjectKind::YellowBlock,
        ObjectKind::Eggplant,
        ObjectKind::Basket,
    ];

    /// Flat objects lie on the table and may have another object on top.
    pub fn is_flat(self) -> bool {
        matches!(self, ObjectKind::Towel | ObjectKind::Plate | ObjectKind::Basket)
    }

    pub fn word(self) -> &'static str {
        match self {
            ObjectKind::Spoon => "spoon",
            ObjectKind::Towel => "towel",
            ObjectKind::Carrot => "carrot",
            ObjectKind::Plate => "plate",
            ObjectKind::GreenBlock => "green_block",
            ObjectKind::YellowBlock => "yellow_block",
            ObjectKind::Eggplant => "eggplant",
            ObjectKind::Basket => "basket",
        }
    }

    pub fn from_word(word: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.word() == word)
    }
}

impl fmt::Display for ObjectKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.word())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell {
    pub x: usize,
    pub y: usize,
}

impl Cell {
    pub fn new(x: usize, y: usize) -> Self {
        Self { x, y }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneObject {
    pub id: usize,
    pub kind: ObjectKind,
    pub cell: Cell,
}

/// Symbolic tabletop state. Images are rendered from it on demand.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scene {
    pub grid_w: usize,
    pub grid_h: usize,
    pub objects: Vec<SceneObject>,
    pub gripper_cell: Cell,
    pub held: Option<usize>,
    /// Object released onto its destination; it may rest on a non-flat object.
    pub delivered: Option<usize>,
    pub step_count: u32,
}

impl Scene {
    pub fn empty(grid_w: usize, grid_h: usize, gripper_cell: Cell) -> Self {
        Self {
            grid_w,
            grid_h,
            objects: Vec::new(),
            gripper_cell,
            held: None,
            delivered: None,
            step_count: 0,
        }
    }

    pub fn in_bounds(&self, cell: Cell) -> bool {
        cell.x < self.grid_w && cell.y < self.grid_h
    }

    pub fn object(&self, id: usize) -> Option<&SceneObject> {
        self.objects.iter().find(|o| o.id == id)
    }

    /// First object of `kind` in placement order. Task objects are placed first.
    pub fn find_kind(&self, kind: ObjectKind) -> Option<&SceneObject> {
        self.objects.iter().find(|o| o.kind == kind)
    }

    pub fn objects_at(&self, cell: Cell) -> impl Iterator<Item = &SceneObject> {
        self.objects.iter().filter(move |o| o.cell == cell)
    }

    pub fn contains_kind(&self, kind: ObjectKind) -> bool {
        self.find_kind(kind).is_some()
    }

    /// Checks every structural invariant of the scene.
    pub fn validate(&self) -> Result<(), SimError> {
        if !self.in_bounds(self.gripper_cell) {
            return Err(SimError::InvalidScene(format!(
                "gripper {:?} out of bounds",
                self.gripper_cell
            )));
        }
        for o in &self.objects {
            if !self.in_bounds(o.cell) {
                return Err(SimError::InvalidScene(format!("object {} out of bounds", o.id)));
            }
            if self.objects.iter().filter(|p| p.id == o.id).count() != 1 {
                return Err(SimError::InvalidScene(format!("duplicate object id {}", o.id)));
            }
        }
        if let Some(id) = self.held {
            let o = self
                .object(id)
                .ok_or_else(|| SimError::InvalidScene(format!("held object {id} missing")))?;
            if o.cell != self.gripper_cell {
                return Err(SimError::InvalidScene("held object is not under the gripper".into()));
            }
        }
        if self.held.is_some() && self.held == self.delivered {
            return Err(SimError::InvalidScene("object both held and delivered".into()));
        }
        for o in self.resting() {
            if o.kind.is_flat() {
                continue;
            }
            let clash = self
                .resting()
                .filter(|p| p.cell == o.cell && !p.kind.is_flat())
                .count();
            if clash > 1 {
                return Err(SimError::InvalidScene(format!(
                    "two non-flat objects share cell {:?}",
                    o.cell
                )));
            }
        }
        Ok(())
    }

    /// Objects standing on the table: neither carried nor stacked on a destination.
    fn resting(&self) -> impl Iterator<Item = &SceneObject> {
        self.objects
            .iter()
            .filter(move |o| Some(o.id) != self.held && Some(o.id) != self.delivered)
    }

    pub fn canonical_json(&self) -> String {
        to_canonical_json(self).expect("scene serializes")
    }

    /// Content hash of the canonical JSON encoding.
    pub fn hash_hex(&self) -> String {
        sha256_hex(self.canonical_json().as_bytes())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Task {
    pub source: ObjectKind,
    pub destination: ObjectKind,
    pub instruction: Vec<String>,
}

impl Task {
    pub fn new(source: ObjectKind, destination: ObjectKind) -> Result<Self, SimError> {
        if source == destination {
            return Err(SimError::Task(format!("source and destination are both {source}")));
        }
        let (verb, prep) = match (source, destination) {
            (_, ObjectKind::YellowBlock) => ("stack", "on"),
            (_, ObjectKind::Basket) => ("put", "in"),
            _ => ("put", "on"),
        };
        let instruction = [verb, source.word(), prep, destination.word()]
            .iter()
            .map(|w| w.to_string())
            .collect();
        Ok(Self {
            source,
            destination,
            instruction,
        })
    }

    /// The four tabletop tasks used throughout: spoon→towel, carrot→plate,
    /// green block→yellow block, eggplant→basket.
    pub fn canonical() -> Vec<Task> {
        [
            (ObjectKind::Spoon, ObjectKind::Towel),
            (ObjectKind::Carrot, ObjectKind::Plate),
            (ObjectKind::GreenBlock, ObjectKind::YellowBlock),
            (ObjectKind::Eggplant, ObjectKind::Basket),
        ]
        .into_iter()
        .map(|(s, d)| Task::new(s, d).expect("canonical tasks are well formed"))
        .collect()
    }

    pub fn name(&self) -> String {
        format!("{}_to_{}", self.source, self.destination)
    }

    pub fn instruction_text(&self) -> String {
        self.instruction.join(" ")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grip {
    Open,
    Close,
}

/// One of the 18 discrete gripper commands.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Action {
    pub dx: i8,
    pub dy: i8,
    pub grip: Grip,
}

pub const ACTION_COUNT: usize = 18;

impl Action {
    pub fn new(dx: i8, dy: i8, grip: Grip) -> Result<Self, SimError> {
        if !(-1..=1).contains(&dx) || !(-1..=1).contains(&dy) {
            return Err(SimError::InvalidAction(format!("({dx},{dy})")));
        }
        Ok(Self { dx, dy, grip })
    }

    /// Dense index in `0..18`: `((dx+1)·3 + (dy+1))·2 + grip`.
    pub fn index(self) -> usize {
        let g = match self.grip {
            Grip::Open => 0,
            Grip::Close => 1,
        };
        (((self.dx + 1) as usize) * 3 + (self.dy + 1) as usize) * 2 + g
    }

    pub fn from_index(index: usize) -> Option<Self> {
        if index >= ACTION_COUNT {
            return None;
        }
        let grip = if index.is_multiple_of(2) { Grip::Open } else { Grip::Close };
        let cell = index / 2;
        Some(Self {
            dx: (cell / 3) as i8 - 1,
            dy: (cell % 3) as i8 - 1,
            grip,
        })
    }

    pub fn all() -> impl Iterator<Item = Action> {
        (0..ACTION_COUNT).map(|i| Action::from_index(i).expect("index in range"))
    }

    pub fn token(self) -> String {
        let g = match self.grip {
            Grip::Open => "open",
            Grip::Close => "close",
        };
        format!("ACT_{}_{}_{}", self.dx, self.dy, g)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub grasped: bool,
    pub success: bool,
    pub steps_used: u32,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn action_indices_are_a_bijection() {
        let all: Vec<Action> = Action::all().collect();
        assert_eq!(all.len(), 18);
        for (i, a) in all.iter().enumerate() {
            assert_eq!(a.index(), i);
        }
        let tokens: std::collections::BTreeSet<String> = all.iter().map(|a| a.token()).collect();
        assert_eq!(tokens.len(), 18);
        assert!(Action::from_index(18).is_none());
        assert!(Action::new(2, 0, Grip::Open).is_err());
    }

    #[test]
    fn canonical_tasks() {
        let tasks = Task::canonical();
        assert_eq!(tasks.len(), 4);
        assert_eq!(tasks[0].instruction_text(), "put spoon on towel");
        assert_eq!(tasks[2].instruction_text(), "stack green_block on yellow_block");
        assert_eq!(tasks[3].instruction_text(), "put eggplant in basket");
        assert!(Task::new(ObjectKind::Plate, ObjectKind::Plate).is_err());
    }

    #[test]
    fn kind_words_round_trip() {
        for k in ObjectKind::ALL {
            assert_eq!(ObjectKind::from_word(k.word()), Some(k));
        }
        assert_eq!(ObjectKind::from_word("banana"), None);
    }
}
