//! Gold demonstrations: canonical minimum-length action sequences on an
//! obstacle-free grid, plus a simulator used to check them.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::gridworld::{AgentPose, Cell, Heading, WorldState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Action {
    #[serde(rename = "walk")]
    Walk,
    #[serde(rename = "turn left")]
    TurnLeft,
    #[serde(rename = "turn right")]
    TurnRight,
}

impl Action {
    pub const ALL: [Action; 3] = [Action::Walk, Action::TurnLeft, Action::TurnRight];

    pub fn as_str(self) -> &'static str {
        match self {
            Action::Walk => "walk",
            Action::TurnLeft => "turn left",
            Action::TurnRight => "turn right",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Action {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Action::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| format!("unknown action {s:?}"))
    }
}

/// Shortest turn sequence from `from` to `to`; 180° turns go right.
fn turns(from: Heading, to: Heading) -> &'static [Action] {
    match (to.index() + 4 - from.index()) % 4 {
        0 => &[],
        1 => &[Action::TurnRight],
        2 => &[Action::TurnRight, Action::TurnRight],
        _ => &[Action::TurnLeft],
    }
}

fn leg(heading: &mut Heading, dir: Heading, steps: usize, out: &mut Vec<Action>) {
    if steps == 0 {
        return;
    }
    out.extend_from_slice(turns(*heading, dir));
    out.extend(std::iter::repeat_n(Action::Walk, steps));
    *heading = dir;
}

fn two_leg_plan(start: Heading, first: (Heading, usize), second: (Heading, usize)) -> Vec<Action> {
    let mut out = Vec::new();
    let mut h = start;
    leg(&mut h, first.0, first.1, &mut out);
    leg(&mut h, second.0, second.1, &mut out);
    out
}

/// Minimum-length plan from the agent's pose to `target`.
///
/// Among minimum-length plans the vertical leg goes first; the horizontal
/// leg goes first only when that is strictly shorter.
pub fn plan(world: &WorldState, target: Cell) -> Vec<Action> {
    plan_from(world.agent(), target)
}

pub fn plan_from(agent: AgentPose, (trow, tcol): Cell) -> Vec<Action> {
    let vertical = if trow < agent.row {
        Heading::North
    } else {
        Heading::South
    };
    let horizontal = if tcol < agent.col {
        Heading::West
    } else {
        Heading::East
    };
    let dr = trow.abs_diff(agent.row);
    let dc = tcol.abs_diff(agent.col);
    let rows_first = two_leg_plan(agent.heading, (vertical, dr), (horizontal, dc));
    let cols_first = two_leg_plan(agent.heading, (horizontal, dc), (vertical, dr));
    if cols_first.len() < rows_first.len() {
        cols_first
    } else {
        rows_first
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rollout {
    pub pose: AgentPose,
    /// Number of WALK actions that would have left the grid.
    pub boundary_hits: usize,
}

pub fn simulate(world: &WorldState, actions: &[Action]) -> Rollout {
    simulate_from(world.agent(), world.d(), actions)
}

pub fn simulate_from(start: AgentPose, d: usize, actions: &[Action]) -> Rollout {
    let mut pose = start;
    let mut boundary_hits = 0;
    for a in actions {
        match a {
            Action::TurnLeft => pose.heading = pose.heading.turn_left(),
            Action::TurnRight => pose.heading = pose.heading.turn_right(),
            Action::Walk => {
                let (dr, dc) = pose.heading.delta();
                let r = pose.row as isize + dr;
                let c = pose.col as isize + dc;
                if r < 0 || c < 0 || r >= d as isize || c >= d as isize {
                    boundary_hits += 1;
                } else {
                    pose.row = r as usize;
                    pose.col = c as usize;
                }
            }
        }
    }
    Rollout {
        pose,
        boundary_hits,
    }
}
