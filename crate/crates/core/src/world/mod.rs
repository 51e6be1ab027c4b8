// SPDX-License-Identifier: MIT OR Apache-2.0

//! Deterministic crafting grid world.
//!
//! A 2-D tile grid with a canopy layer above it, a single agent, pinned or
//! wandering villagers, and a short crafting chain
//! (log → planks → table → sticks → wooden pickaxe). The agent sees an
//! egocentric 64×64 render (see [`render`]).

mod action;
mod expert;
mod gen;
pub mod render;
mod scenario;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use action::{Action, Move, Turn, Use, ACTION_FACTOR_NAMES, ACTION_FACTOR_SIZES};
pub use expert::{expert_decision, scripted_expert, ExpertDecision};
pub use gen::{count_trees, generate_world, MIN_WORLD_SIDE};
pub use render::{render, ObsFrame, Palette, Rgb, FRAME_CHANNELS, FRAME_SIZE, VIEW_RADIUS};
pub use scenario::{
    build_scenario, Base, Grant, Placement, PlacementKind, ScenarioSpec, Spawn, PRESETS,
};

use crate::error::{usage, Result};

/// Nominal simulation rate, for converting steps to seconds.
pub const TICKS_PER_SECOND: u32 = 20;
/// Hard episode cap (100 s at 20 ticks/s).
pub const EPISODE_CAP: u32 = 2000;
pub const VILLAGER_HIT_POINTS: u8 = 20;
/// Hits needed to break a trunk, crafting table or diamond ore.
pub const BREAK_HITS: u8 = 3;
/// Chebyshev distance within which a placed table counts as "nearby".
pub const TABLE_REACH: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tile {
    Grass,
    Dirt,
    Stone,
    TreeTrunk,
    TreeLeaves,
    DiamondOre,
    CraftingTable,
    Barrier,
}

impl Tile {
    pub fn walkable(self) -> bool {
        matches!(self, Tile::Grass | Tile::Dirt)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Facing {
    N,
    E,
    S,
    W,
}

impl Facing {
    pub const ALL: [Facing; 4] = [Facing::N, Facing::E, Facing::S, Facing::W];

    /// Unit step `(dx, dy)`; `y` grows southwards.
    pub fn delta(self) -> (isize, isize) {
        match self {
            Facing::N => (0, -1),
            Facing::E => (1, 0),
            Facing::S => (0, 1),
            Facing::W => (-1, 0),
        }
    }

    pub fn right(self) -> Facing {
        Facing::ALL[(self.index() + 1) % 4]
    }

    pub fn left(self) -> Facing {
        Facing::ALL[(self.index() + 3) % 4]
    }

    pub fn back(self) -> Facing {
        Facing::ALL[(self.index() + 2) % 4]
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pitch {
    Level,
    Up,
    Down,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Item {
    Log,
    Planks,
    Stick,
    CraftingTable,
    WoodenPickaxe,
    IronPickaxe,
    Diamond,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Inventory {
    pub logs: u32,
    pub planks: u32,
    pub sticks: u32,
    pub tables: u32,
    pub wooden_pickaxe: u32,
    pub iron_pickaxe: u32,
    pub diamonds: u32,
}

impl Inventory {
    pub fn count(&self, item: Item) -> u32 {
        match item {
            Item::Log => self.logs,
            Item::Planks => self.planks,
            Item::Stick => self.sticks,
            Item::CraftingTable => self.tables,
            Item::WoodenPickaxe => self.wooden_pickaxe,
            Item::IronPickaxe => self.iron_pickaxe,
            Item::Diamond => self.diamonds,
        }
    }

    pub fn slot(&mut self, item: Item) -> &mut u32 {
        match item {
            Item::Log => &mut self.logs,
            Item::Planks => &mut self.planks,
            Item::Stick => &mut self.sticks,
            Item::CraftingTable => &mut self.tables,
            Item::WoodenPickaxe => &mut self.wooden_pickaxe,
            Item::IronPickaxe => &mut self.iron_pickaxe,
            Item::Diamond => &mut self.diamonds,
        }
    }
}

/// Crafting recipes, in curriculum order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Recipe {
    Planks,
    Sticks,
    CraftingTable,
    WoodenPickaxe,
}

impl Recipe {
    pub fn inputs(self) -> &'static [(Item, u32)] {
        match self {
            Recipe::Planks => &[(Item::Log, 1)],
            Recipe::Sticks => &[(Item::Planks, 2)],
            Recipe::CraftingTable => &[(Item::Planks, 4)],
            Recipe::WoodenPickaxe => &[(Item::Planks, 3), (Item::Stick, 2)],
        }
    }

    pub fn output(self) -> (Item, u32) {
        match self {
            Recipe::Planks => (Item::Planks, 4),
            Recipe::Sticks => (Item::Stick, 4),
            Recipe::CraftingTable => (Item::CraftingTable, 1),
            Recipe::WoodenPickaxe => (Item::WoodenPickaxe, 1),
        }
    }
}

/// The recipe `craft_next` would execute, if any.
pub fn next_recipe(inv: &Inventory, table_nearby: bool) -> Option<Recipe> {
    if inv.wooden_pickaxe > 0 {
        return None;
    }
    if table_nearby && inv.planks >= 3 && inv.sticks >= 2 {
        return Some(Recipe::WoodenPickaxe);
    }
    if inv.tables == 0 && !table_nearby {
        return if inv.planks >= 4 {
            Some(Recipe::CraftingTable)
        } else if inv.logs >= 1 {
            Some(Recipe::Planks)
        } else {
            None
        };
    }
    if inv.sticks < 2 {
        return if inv.planks >= 2 {
            Some(Recipe::Sticks)
        } else if inv.logs >= 1 {
            Some(Recipe::Planks)
        } else {
            None
        };
    }
    if inv.planks < 3 && inv.logs >= 1 {
        return Some(Recipe::Planks);
    }
    None
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntityKind {
    Villager,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entity {
    pub kind: EntityKind,
    pub x: usize,
    pub y: usize,
    pub hit_points: u8,
    pub pinned: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentState {
    pub x: usize,
    pub y: usize,
    pub facing: Facing,
    pub pitch: Pitch,
    pub inventory: Inventory,
    pub selected_slot: u8,
    pub inventory_open: bool,
    /// Last tile the agent looked up at; not visible in the render.
    pub inspected: Option<(usize, usize)>,
}

/// What an attack connected with.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "target")]
pub enum AttackTarget {
    Air,
    Villager { x: usize, y: usize, hit_points: u8 },
    Block { x: usize, y: usize, tile: Tile, progress: u8 },
    Unbreakable { x: usize, y: usize, tile: Tile },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum EventKind {
    Attack(AttackTarget),
    Break { x: usize, y: usize, tile: Tile, item: Option<Item> },
    Kill { x: usize, y: usize },
    Craft { recipe: Recipe },
    Grant { item: Item, count: u32 },
    PlaceTable { x: usize, y: usize },
    InventoryOpen,
    InventoryClose,
    LookUp,
    LookDown,
    Blocked,
    Explore,
    Invalid { reason: String },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub t: u32,
    #[serde(flatten)]
    pub kind: EventKind,
}

/// Full simulator state.
#[derive(Clone, Debug)]
pub struct WorldState {
    pub width: usize,
    pub height: usize,
    pub tiles: Vec<Tile>,
    /// Leaves above each tile.
    pub canopy: Vec<bool>,
    pub entities: Vec<Entity>,
    pub agent: AgentState,
    pub tick: u32,
    /// Append-only event log.
    pub events: Vec<Event>,
    /// Break progress on the block currently being hit.
    pub damage: Option<(usize, usize, u8)>,
    pub rng: ChaCha8Rng,
    pub palette: Palette,
}

impl PartialEq for WorldState {
    fn eq(&self, o: &Self) -> bool {
        self.width == o.width
            && self.height == o.height
            && self.tiles == o.tiles
            && self.canopy == o.canopy
            && self.entities == o.entities
            && self.agent == o.agent
            && self.tick == o.tick
            && self.events == o.events
            && self.damage == o.damage
            && self.rng == o.rng
    }
}

impl WorldState {
    /// Flat grass world with the agent at the centre facing north.
    pub fn flat(width: usize, height: usize, seed: u64) -> Self {
        Self {
            width,
            height,
            tiles: vec![Tile::Grass; width * height],
            canopy: vec![false; width * height],
            entities: Vec::new(),
            agent: AgentState {
                x: width / 2,
                y: height / 2,
                facing: Facing::N,
                pitch: Pitch::Level,
                inventory: Inventory::default(),
                selected_slot: 0,
                inventory_open: false,
                inspected: None,
            },
            tick: 0,
            events: Vec::new(),
            damage: None,
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_57a7e),
            palette: Palette::default(),
        }
    }

    #[inline]
    pub fn idx(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }

    pub fn in_bounds(&self, x: isize, y: isize) -> bool {
        x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height
    }

    pub fn tile(&self, x: usize, y: usize) -> Tile {
        self.tiles[self.idx(x, y)]
    }

    pub fn set_tile(&mut self, x: usize, y: usize, t: Tile) {
        let i = self.idx(x, y);
        self.tiles[i] = t;
    }

    pub fn has_canopy(&self, x: usize, y: usize) -> bool {
        self.canopy[self.idx(x, y)]
    }

    pub fn entity_at(&self, x: usize, y: usize) -> Option<usize> {
        self.entities.iter().position(|e| e.x == x && e.y == y)
    }

    /// Walkable, in bounds and unoccupied.
    pub fn free(&self, x: isize, y: isize) -> bool {
        self.in_bounds(x, y)
            && self.tile(x as usize, y as usize).walkable()
            && self.entity_at(x as usize, y as usize).is_none()
    }

    pub fn alive(&self) -> bool {
        self.tick < EPISODE_CAP
    }

    /// Tile one step ahead of the agent, if in bounds.
    pub fn faced(&self) -> Option<(usize, usize)> {
        self.ahead(1)
    }

    pub fn ahead(&self, n: isize) -> Option<(usize, usize)> {
        let (dx, dy) = self.agent.facing.delta();
        let (x, y) = (
            self.agent.x as isize + dx * n,
            self.agent.y as isize + dy * n,
        );
        self.in_bounds(x, y).then_some((x as usize, y as usize))
    }

    pub fn table_nearby(&self) -> bool {
        let (ax, ay) = (self.agent.x as isize, self.agent.y as isize);
        let r = TABLE_REACH as isize;
        (-r..=r).any(|dy| {
            (-r..=r).any(|dx| {
                let (x, y) = (ax + dx, ay + dy);
                self.in_bounds(x, y) && self.tile(x as usize, y as usize) == Tile::CraftingTable
            })
        })
    }

    pub fn count_tiles(&self, t: Tile) -> usize {
        self.tiles.iter().filter(|&&x| x == t).count()
    }

    pub fn render(&self) -> ObsFrame {
        render(self)
    }

    fn log(&mut self, out: &mut Vec<Event>, kind: EventKind) {
        let e = Event {
            t: self.tick,
            kind,
        };
        self.events.push(e.clone());
        out.push(e);
    }

    /// Records that the expert had no reachable target this tick.
    pub fn flag_explore(&mut self) {
        let mut sink = Vec::new();
        self.log(&mut sink, EventKind::Explore);
    }

    /// Records a grant at the current tick.
    pub fn grant(&mut self, item: Item, count: u32) {
        *self.agent.inventory.slot(item) += count;
        let mut sink = Vec::new();
        self.log(&mut sink, EventKind::Grant { item, count });
    }

    /// Advances one tick. Returns the new observation and the events the
    /// action produced (also appended to [`WorldState::events`]).
    pub fn step(&mut self, action: &Action) -> Result<(ObsFrame, Vec<Event>)> {
        if !self.alive() {
            return Err(usage("episode has ended"));
        }
        let mut ev = Vec::new();

        if self.agent.inventory_open {
            match action.use_or_craft {
                Use::OpenInventory => {
                    self.agent.inventory_open = false;
                    self.log(&mut ev, EventKind::InventoryClose);
                }
                Use::CraftNext => self.craft(&mut ev),
                Use::PlaceTable => self.log(
                    &mut ev,
                    EventKind::Invalid {
                        reason: "place_table with inventory open".into(),
                    },
                ),
                Use::None => {}
            }
        } else {
            self.apply_turn(action.turn, &mut ev);
            self.apply_move(action.movement, &mut ev);
            if action.attack {
                self.attack(&mut ev);
            }
            match action.use_or_craft {
                Use::None => {}
                Use::OpenInventory => {
                    self.agent.inventory_open = true;
                    self.log(&mut ev, EventKind::InventoryOpen);
                }
                Use::PlaceTable => self.place_table(&mut ev),
                Use::CraftNext => self.log(
                    &mut ev,
                    EventKind::Invalid {
                        reason: "craft_next needs the inventory open".into(),
                    },
                ),
            }
        }

        self.wander();
        self.tick += 1;
        Ok((self.render(), ev))
    }

    fn apply_turn(&mut self, turn: Turn, ev: &mut Vec<Event>) {
        let faced = self.faced();
        let a = &mut self.agent;
        match turn {
            Turn::None => {}
            Turn::Left => a.facing = a.facing.left(),
            Turn::Right => a.facing = a.facing.right(),
            Turn::LookUp => {
                if a.pitch == Pitch::Up {
                    return;
                }
                a.pitch = if a.pitch == Pitch::Down {
                    Pitch::Level
                } else {
                    Pitch::Up
                };
                if a.pitch == Pitch::Up {
                    a.inspected = faced;
                }
                self.log(ev, EventKind::LookUp);
            }
            Turn::LookDown => {
                if a.pitch == Pitch::Down {
                    return;
                }
                a.pitch = if a.pitch == Pitch::Up {
                    Pitch::Level
                } else {
                    Pitch::Down
                };
                self.log(ev, EventKind::LookDown);
            }
        }
    }

    fn apply_move(&mut self, m: Move, ev: &mut Vec<Event>) {
        let f = self.agent.facing;
        let dir = match m {
            Move::None => return,
            Move::Forward => f,
            Move::Back => f.back(),
            Move::StrafeLeft => f.left(),
            Move::StrafeRight => f.right(),
        };
        let (dx, dy) = dir.delta();
        let (x, y) = (self.agent.x as isize + dx, self.agent.y as isize + dy);
        if self.free(x, y) {
            self.agent.x = x as usize;
            self.agent.y = y as usize;
        } else {
            self.log(ev, EventKind::Blocked);
        }
    }

    /// Attack target: the faced tile, or the tile behind it when the faced
    /// tile is an (invisible) barrier.
    pub fn attack_target(&self) -> Option<(usize, usize)> {
        let (x, y) = self.faced()?;
        if self.tile(x, y) == Tile::Barrier && self.entity_at(x, y).is_none() {
            return self.ahead(2);
        }
        Some((x, y))
    }

    fn attack(&mut self, ev: &mut Vec<Event>) {
        let Some((x, y)) = self.attack_target() else {
            self.log(ev, EventKind::Attack(AttackTarget::Air));
            return;
        };
        if let Some(i) = self.entity_at(x, y) {
            self.damage = None;
            let e = &mut self.entities[i];
            e.hit_points = e.hit_points.saturating_sub(1);
            let hp = e.hit_points;
            self.log(
                ev,
                EventKind::Attack(AttackTarget::Villager {
                    x,
                    y,
                    hit_points: hp,
                }),
            );
            if hp == 0 {
                self.entities.remove(i);
                self.log(ev, EventKind::Kill { x, y });
            }
            return;
        }
        let tile = self.tile(x, y);
        let breakable = match tile {
            Tile::TreeTrunk | Tile::CraftingTable => true,
            Tile::DiamondOre => self.agent.inventory.iron_pickaxe > 0,
            _ => false,
        };
        if !breakable {
            self.damage = None;
            let target = if tile.walkable() {
                AttackTarget::Air
            } else {
                AttackTarget::Unbreakable { x, y, tile }
            };
            self.log(ev, EventKind::Attack(target));
            return;
        }
        let progress = match self.damage {
            Some((dx, dy, p)) if dx == x && dy == y => p + 1,
            _ => 1,
        };
        self.log(
            ev,
            EventKind::Attack(AttackTarget::Block {
                x,
                y,
                tile,
                progress,
            }),
        );
        if progress >= BREAK_HITS {
            self.damage = None;
            self.set_tile(x, y, Tile::Grass);
            let item = match tile {
                Tile::TreeTrunk => Some(Item::Log),
                Tile::CraftingTable => Some(Item::CraftingTable),
                Tile::DiamondOre => Some(Item::Diamond),
                _ => None,
            };
            if let Some(item) = item {
                *self.agent.inventory.slot(item) += 1;
                self.agent.selected_slot = render::hotbar_slot(item);
            }
            self.log(ev, EventKind::Break { x, y, tile, item });
        } else {
            self.damage = Some((x, y, progress));
        }
    }

    fn craft(&mut self, ev: &mut Vec<Event>) {
        let Some(recipe) = next_recipe(&self.agent.inventory, self.table_nearby()) else {
            self.log(
                ev,
                EventKind::Invalid {
                    reason: "nothing to craft".into(),
                },
            );
            return;
        };
        let inv = &mut self.agent.inventory;
        for &(item, n) in recipe.inputs() {
            *inv.slot(item) -= n;
        }
        let (item, n) = recipe.output();
        *inv.slot(item) += n;
        self.agent.selected_slot = render::hotbar_slot(item);
        self.log(ev, EventKind::Craft { recipe });
    }

    fn place_table(&mut self, ev: &mut Vec<Event>) {
        let target = self.faced().filter(|&(x, y)| self.free(x as isize, y as isize));
        match target {
            Some((x, y)) if self.agent.inventory.tables > 0 => {
                self.agent.inventory.tables -= 1;
                self.set_tile(x, y, Tile::CraftingTable);
                self.log(ev, EventKind::PlaceTable { x, y });
            }
            _ => self.log(
                ev,
                EventKind::Invalid {
                    reason: "cannot place table".into(),
                },
            ),
        }
    }

    /// Unpinned villagers take a random step one tick in ten.
    fn wander(&mut self) {
        for i in 0..self.entities.len() {
            if self.entities[i].pinned {
                continue;
            }
            if self.rng.gen::<f32>() >= 0.1 {
                continue;
            }
            let dir = Facing::ALL[self.rng.gen_range(0..4)];
            let (dx, dy) = dir.delta();
            let (x, y) = (
                self.entities[i].x as isize + dx,
                self.entities[i].y as isize + dy,
            );
            let agent_there = x == self.agent.x as isize && y == self.agent.y as isize;
            if self.free(x, y) && !agent_there {
                self.entities[i].x = x as usize;
                self.entities[i].y = y as usize;
            }
        }
    }
}
