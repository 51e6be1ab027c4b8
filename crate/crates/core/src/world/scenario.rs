// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::gen::{generate_world, plant_canopy, plant_tree};
use super::{Entity, EntityKind, Facing, Item, Palette, Tile, WorldState, VILLAGER_HIT_POINTS};
use crate::error::{Error, Result};

pub const PRESETS: [&str; 7] = [
    "villager_tree",
    "y_maze_two_villagers",
    "diamond_vs_tree",
    "resource_grant",
    "empty_field",
    "tree_ahead",
    "procedural",
];

const PRESET_SIDE: usize = 24;
const PROCEDURAL_SIDE: usize = 32;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Base {
    Procedural,
    #[default]
    Flat,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum PlacementKind {
    Tile { tile: Tile },
    Villager { pinned: bool },
    /// Leaves above the tile; does not occupy it.
    Leaves,
    /// Trunk with a 3×3 canopy.
    Tree,
    /// Pinned villager under a 3×3 canopy, boxed in by four barriers.
    VillagerTree,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Placement {
    pub x: usize,
    pub y: usize,
    #[serde(flatten)]
    pub kind: PlacementKind,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grant {
    pub item: Item,
    pub count: u32,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Spawn {
    pub x: usize,
    pub y: usize,
    pub facing: Facing,
}

/// Declarative world setup, serialized as JSON.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub name: String,
    pub terrain_seed: u64,
    #[serde(default)]
    pub base: Base,
    /// `[width, height]`; defaults to 24×24 flat or 32×32 procedural.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub size: Option<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spawn: Option<Spawn>,
    #[serde(default)]
    pub placements: Vec<Placement>,
    #[serde(default)]
    pub grants: Vec<Grant>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub palette: Option<Palette>,
}

impl ScenarioSpec {
    pub fn empty(name: &str, seed: u64) -> Self {
        Self {
            name: name.into(),
            terrain_seed: seed,
            base: Base::Flat,
            size: None,
            spawn: None,
            placements: Vec::new(),
            grants: Vec::new(),
            palette: None,
        }
    }

    pub fn preset(name: &str, seed: u64) -> Result<Self> {
        let mut s = Self::empty(name, seed);
        let at = |x, y, kind| Placement { x, y, kind };
        let spawn = Some(Spawn {
            x: 12,
            y: 18,
            facing: Facing::N,
        });
        match name {
            "villager_tree" => {
                s.spawn = spawn;
                s.placements = vec![
                    at(12, 12, PlacementKind::VillagerTree),
                    at(4, 6, PlacementKind::Tree),
                    at(20, 6, PlacementKind::Tree),
                ];
            }
            "y_maze_two_villagers" => {
                s.spawn = spawn;
                s.placements = vec![
                    at(8, 10, PlacementKind::VillagerTree),
                    at(16, 10, PlacementKind::VillagerTree),
                ];
            }
            "diamond_vs_tree" => {
                s.spawn = spawn;
                s.placements = vec![
                    at(9, 13, PlacementKind::Tile { tile: Tile::DiamondOre }),
                    at(15, 13, PlacementKind::Tree),
                ];
                s.grants = vec![Grant {
                    item: Item::IronPickaxe,
                    count: 1,
                }];
            }
            "resource_grant" => {
                s.base = Base::Procedural;
                s.grants = vec![Grant {
                    item: Item::Log,
                    count: 4,
                }];
            }
            "empty_field" => s.spawn = spawn,
            "tree_ahead" => {
                s.spawn = spawn;
                s.placements = vec![at(12, 15, PlacementKind::Tree)];
            }
            "procedural" => s.base = Base::Procedural,
            other => return Err(Error::Config(format!("unknown scenario preset '{other}'"))),
        }
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }
}

fn occupied(p: &Placement) -> Vec<(isize, isize)> {
    let (x, y) = (p.x as isize, p.y as isize);
    match p.kind {
        PlacementKind::Leaves => Vec::new(),
        PlacementKind::VillagerTree => vec![(x, y), (x + 1, y), (x - 1, y), (x, y + 1), (x, y - 1)],
        _ => vec![(x, y)],
    }
}

pub fn build_scenario(spec: &ScenarioSpec) -> Result<WorldState> {
    let [w, h] = spec.size.unwrap_or(match spec.base {
        Base::Flat => [PRESET_SIDE, PRESET_SIDE],
        Base::Procedural => [PROCEDURAL_SIDE, PROCEDURAL_SIDE],
    });
    let mut world = match spec.base {
        Base::Procedural => generate_world(spec.terrain_seed, (w, h))?,
        Base::Flat => {
            if w == 0 || h == 0 {
                return Err(Error::Config("scenario size must be positive".into()));
            }
            WorldState::flat(w, h, spec.terrain_seed)
        }
    };
    if let Some(p) = &spec.palette {
        world.palette = p.clone();
    }
    if let Some(s) = &spec.spawn {
        if s.x >= w || s.y >= h {
            return Err(Error::Config(format!("spawn ({}, {}) out of bounds", s.x, s.y)));
        }
        world.agent.x = s.x;
        world.agent.y = s.y;
        world.agent.facing = s.facing;
        world.set_tile(s.x, s.y, Tile::Grass);
        world.entities.retain(|e| (e.x, e.y) != (s.x, s.y));
    }

    let mut taken: HashSet<(isize, isize)> = HashSet::new();
    taken.insert((world.agent.x as isize, world.agent.y as isize));
    for p in &spec.placements {
        for c in occupied(p) {
            if !world.in_bounds(c.0, c.1) {
                return Err(Error::Config(format!(
                    "placement at ({}, {}) out of bounds",
                    c.0, c.1
                )));
            }
            if !taken.insert(c) {
                return Err(Error::Config(format!(
                    "overlapping placement at ({}, {})",
                    c.0, c.1
                )));
            }
        }
    }

    for p in &spec.placements {
        let (x, y) = (p.x, p.y);
        // Placed content replaces whatever the base put there.
        for c in occupied(p) {
            let (cx, cy) = (c.0 as usize, c.1 as usize);
            world.entities.retain(|e| (e.x, e.y) != (cx, cy));
        }
        match &p.kind {
            PlacementKind::Tile { tile } => world.set_tile(x, y, *tile),
            PlacementKind::Villager { pinned } => {
                world.set_tile(x, y, Tile::Grass);
                world.entities.push(villager(x, y, *pinned));
            }
            PlacementKind::Leaves => plant_canopy_single(&mut world, x, y),
            PlacementKind::Tree => plant_tree(&mut world, x, y),
            PlacementKind::VillagerTree => {
                world.set_tile(x, y, Tile::Grass);
                world.entities.push(villager(x, y, true));
                plant_canopy(&mut world, x, y);
                for (bx, by) in [(x + 1, y), (x - 1, y), (x, y + 1), (x, y - 1)] {
                    world.set_tile(bx, by, Tile::Barrier);
                }
            }
        }
    }
    for g in &spec.grants {
        world.grant(g.item, g.count);
    }
    Ok(world)
}

fn plant_canopy_single(world: &mut WorldState, x: usize, y: usize) {
    let i = world.idx(x, y);
    world.canopy[i] = true;
}

fn villager(x: usize, y: usize, pinned: bool) -> Entity {
    Entity {
        kind: EntityKind::Villager,
        x,
        y,
        hit_points: VILLAGER_HIT_POINTS,
        pinned,
    }
}
