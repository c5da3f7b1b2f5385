//! The d×d grid world: typed objects, an oriented agent and the dense
//! one-hot cell encoding consumed by the state encoder.

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Channels per cell: size(4) ++ color(4) ++ shape(3) ++ agent(1) ++ heading(4).
pub const CELL_CHANNELS: usize = 16;
pub const SIZE_OFFSET: usize = 0;
pub const COLOR_OFFSET: usize = 4;
pub const SHAPE_OFFSET: usize = 8;
pub const AGENT_OFFSET: usize = 11;
pub const HEADING_OFFSET: usize = 12;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum WorldError {
    #[error("cannot place {objects} objects plus the agent on a {d}x{d} grid")]
    PlacementInfeasible { objects: usize, d: usize },
    #[error("grid side must be at least 2, got {0}")]
    GridTooSmall(usize),
    #[error("cell ({row},{col}) is outside a {d}x{d} grid")]
    OutOfBounds { row: usize, col: usize, d: usize },
    #[error("more than one object at cell ({row},{col})")]
    DuplicateCell { row: usize, col: usize },
    #[error("object size {0} outside 1..=4")]
    BadSize(u8),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Square,
    Cylinder,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Cylinder];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn word(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Cylinder => "cylinder",
        }
    }

    pub fn from_word(w: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|s| s.word() == w)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

impl Color {
    pub const ALL: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
        }
    }

    pub fn from_word(w: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.word() == w)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Heading {
    North,
    East,
    South,
    West,
}

impl Heading {
    pub const ALL: [Heading; 4] = [Heading::North, Heading::East, Heading::South, Heading::West];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Self {
        Self::ALL[i % 4]
    }

    pub fn turn_left(self) -> Self {
        Self::from_index(self.index() + 3)
    }

    pub fn turn_right(self) -> Self {
        Self::from_index(self.index() + 1)
    }

    /// Row/column step of one forward move. Row 0 is the top row.
    pub fn delta(self) -> (isize, isize) {
        match self {
            Heading::North => (-1, 0),
            Heading::East => (0, 1),
            Heading::South => (1, 0),
            Heading::West => (0, -1),
        }
    }
}

/// A grid object. Size is an integer in `1..=4`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub shape: Shape,
    pub color: Color,
    pub size: u8,
}

impl ObjectSpec {
    pub fn new(shape: Shape, color: Color, size: u8) -> Result<Self, WorldError> {
        if !(1..=4).contains(&size) {
            return Err(WorldError::BadSize(size));
        }
        Ok(Self { shape, color, size })
    }
}

impl fmt::Display for ObjectSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "size-{} {} {}",
            self.size,
            self.color.word(),
            self.shape.word()
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AgentPose {
    pub row: usize,
    pub col: usize,
    pub heading: Heading,
}

pub type Cell = (usize, usize);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WorldState {
    d: usize,
    cells: BTreeMap<Cell, ObjectSpec>,
    agent: AgentPose,
}

impl WorldState {
    pub fn new(d: usize, agent: AgentPose) -> Result<Self, WorldError> {
        if d < 2 {
            return Err(WorldError::GridTooSmall(d));
        }
        check_bounds(d, agent.row, agent.col)?;
        Ok(Self {
            d,
            cells: BTreeMap::new(),
            agent,
        })
    }

    pub fn with_objects(
        d: usize,
        agent: AgentPose,
        objects: impl IntoIterator<Item = (Cell, ObjectSpec)>,
    ) -> Result<Self, WorldError> {
        let mut w = Self::new(d, agent)?;
        for (cell, obj) in objects {
            w.place(cell, obj)?;
        }
        Ok(w)
    }

    pub fn place(&mut self, (row, col): Cell, obj: ObjectSpec) -> Result<(), WorldError> {
        check_bounds(self.d, row, col)?;
        ObjectSpec::new(obj.shape, obj.color, obj.size)?;
        if self.cells.insert((row, col), obj).is_some() {
            return Err(WorldError::DuplicateCell { row, col });
        }
        Ok(())
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn agent(&self) -> AgentPose {
        self.agent
    }

    pub fn objects(&self) -> impl Iterator<Item = (Cell, &ObjectSpec)> + '_ {
        self.cells.iter().map(|(c, o)| (*c, o))
    }

    pub fn object_at(&self, cell: Cell) -> Option<&ObjectSpec> {
        self.cells.get(&cell)
    }

    pub fn num_objects(&self) -> usize {
        self.cells.len()
    }

    pub fn flat_index(&self, (row, col): Cell) -> usize {
        row * self.d + col
    }

    pub fn cell_of(&self, flat: usize) -> Cell {
        (flat / self.d, flat % self.d)
    }
}

fn check_bounds(d: usize, row: usize, col: usize) -> Result<(), WorldError> {
    if row >= d || col >= d {
        return Err(WorldError::OutOfBounds { row, col, d });
    }
    Ok(())
}

/// Dense `d × d × 16` encoding, row-major over cells then channels.
#[derive(Debug, Clone, PartialEq)]
pub struct GridTensor {
    d: usize,
    data: Vec<f64>,
}

impl GridTensor {
    pub fn d(&self) -> usize {
        self.d
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn cell(&self, row: usize, col: usize) -> &[f64] {
        let start = (row * self.d + col) * CELL_CHANNELS;
        &self.data[start..start + CELL_CHANNELS]
    }

    pub fn from_raw(d: usize, data: Vec<f64>) -> Option<Self> {
        (data.len() == d * d * CELL_CHANNELS).then_some(Self { d, data })
    }
}

pub fn encode_world(state: &WorldState) -> GridTensor {
    let d = state.d;
    let mut data = vec![0.0; d * d * CELL_CHANNELS];
    for ((row, col), obj) in &state.cells {
        let base = (row * d + col) * CELL_CHANNELS;
        data[base + SIZE_OFFSET + obj.size as usize - 1] = 1.0;
        data[base + COLOR_OFFSET + obj.color.index()] = 1.0;
        data[base + SHAPE_OFFSET + obj.shape.index()] = 1.0;
    }
    let a = state.agent;
    let base = (a.row * d + a.col) * CELL_CHANNELS;
    data[base + AGENT_OFFSET] = 1.0;
    data[base + HEADING_OFFSET + a.heading.index()] = 1.0;
    GridTensor { d, data }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub d: usize,
    pub num_objects: usize,
}

/// Places `num_objects` uniformly random objects on distinct cells and the
/// agent, with a random heading, on a further free cell.
pub fn sample_world<R: Rng + ?Sized>(
    rng: &mut R,
    gen: &GeneratorConfig,
) -> Result<WorldState, WorldError> {
    let d = gen.d;
    if d < 2 {
        return Err(WorldError::GridTooSmall(d));
    }
    if gen.num_objects + 1 > d * d {
        return Err(WorldError::PlacementInfeasible {
            objects: gen.num_objects,
            d,
        });
    }
    let chosen: Vec<usize> = rand::seq::index::sample(rng, d * d, gen.num_objects + 1).into_vec();
    let agent_flat = chosen[gen.num_objects];
    let agent = AgentPose {
        row: agent_flat / d,
        col: agent_flat % d,
        heading: *Heading::ALL.choose(rng).expect("non-empty"),
    };
    let mut cells = BTreeMap::new();
    for &flat in &chosen[..gen.num_objects] {
        let obj = ObjectSpec {
            shape: *Shape::ALL.choose(rng).expect("non-empty"),
            color: *Color::ALL.choose(rng).expect("non-empty"),
            size: rng.gen_range(1..=4),
        };
        cells.insert((flat / d, flat % d), obj);
    }
    Ok(WorldState { d, cells, agent })
}

// JSON form: {"d":6,"agent":{...},"objects":[{"row":..,"col":..,"shape":..,"color":..,"size":..}]}

#[derive(Serialize, Deserialize)]
struct PlacedObject {
    row: usize,
    col: usize,
    shape: Shape,
    color: Color,
    size: u8,
}

#[derive(Serialize, Deserialize)]
struct WorldJson {
    d: usize,
    agent: AgentPose,
    objects: Vec<PlacedObject>,
}

impl Serialize for WorldState {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        WorldJson {
            d: self.d,
            agent: self.agent,
            objects: self
                .cells
                .iter()
                .map(|(&(row, col), o)| PlacedObject {
                    row,
                    col,
                    shape: o.shape,
                    color: o.color,
                    size: o.size,
                })
                .collect(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for WorldState {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> Result<Self, D::Error> {
        let raw = WorldJson::deserialize(de)?;
        let objects = raw.objects.into_iter().map(|p| {
            (
                (p.row, p.col),
                ObjectSpec {
                    shape: p.shape,
                    color: p.color,
                    size: p.size,
                },
            )
        });
        WorldState::with_objects(raw.d, raw.agent, objects).map_err(serde::de::Error::custom)
    }
}
