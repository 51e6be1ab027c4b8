// SPDX-License-Identifier: MIT OR Apache-2.0

use serde::{Deserialize, Serialize};

pub const ACTION_FACTOR_NAMES: [&str; 4] = ["move", "turn", "attack", "use_or_craft"];
/// Category counts of the four action factors.
pub const ACTION_FACTOR_SIZES: [usize; 4] = [5, 5, 2, 4];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Move {
    #[default]
    None,
    Forward,
    Back,
    StrafeLeft,
    StrafeRight,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Turn {
    #[default]
    None,
    Left,
    Right,
    LookUp,
    LookDown,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Use {
    #[default]
    None,
    OpenInventory,
    CraftNext,
    PlaceTable,
}

/// One composite action: a single choice per factor.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Action {
    #[serde(rename = "move")]
    pub movement: Move,
    pub turn: Turn,
    pub attack: bool,
    pub use_or_craft: Use,
}

const MOVES: [Move; 5] = [
    Move::None,
    Move::Forward,
    Move::Back,
    Move::StrafeLeft,
    Move::StrafeRight,
];
const TURNS: [Turn; 5] = [
    Turn::None,
    Turn::Left,
    Turn::Right,
    Turn::LookUp,
    Turn::LookDown,
];
const USES: [Use; 4] = [Use::None, Use::OpenInventory, Use::CraftNext, Use::PlaceTable];

impl Action {
    pub const NOOP: Action = Action {
        movement: Move::None,
        turn: Turn::None,
        attack: false,
        use_or_craft: Use::None,
    };

    pub fn forward() -> Self {
        Self {
            movement: Move::Forward,
            ..Self::NOOP
        }
    }

    pub fn turn(turn: Turn) -> Self {
        Self {
            turn,
            ..Self::NOOP
        }
    }

    pub fn attack() -> Self {
        Self {
            attack: true,
            ..Self::NOOP
        }
    }

    pub fn use_item(u: Use) -> Self {
        Self {
            use_or_craft: u,
            ..Self::NOOP
        }
    }

    /// Category index per factor; index 0 is always the inactive choice.
    pub fn indices(&self) -> [usize; 4] {
        [
            self.movement as usize,
            self.turn as usize,
            self.attack as usize,
            self.use_or_craft as usize,
        ]
    }

    pub fn from_indices(idx: [usize; 4]) -> Option<Self> {
        Some(Self {
            movement: *MOVES.get(idx[0])?,
            turn: *TURNS.get(idx[1])?,
            attack: match idx[2] {
                0 => false,
                1 => true,
                _ => return None,
            },
            use_or_craft: *USES.get(idx[3])?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn index_round_trip_covers_every_action() {
        for m in 0..5 {
            for t in 0..5 {
                for a in 0..2 {
                    for u in 0..4 {
                        let idx = [m, t, a, u];
                        assert_eq!(Action::from_indices(idx).unwrap().indices(), idx);
                    }
                }
            }
        }
        assert!(Action::from_indices([5, 0, 0, 0]).is_none());
    }
}
