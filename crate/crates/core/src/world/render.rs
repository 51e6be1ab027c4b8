// SPDX-License-Identifier: MIT OR Apache-2.0

//! Egocentric 64×64 RGB render.
//!
//! Layout: an 11×11-tile viewport of 5-pixel tiles occupies rows 0..55 and
//! columns 4..59, rotated so the agent (centre tile) always faces up. The
//! side margins show the pitch, rows 55..64 hold the hotbar. With the
//! inventory open the whole upper area is replaced by the crafting panel.
//! At `Pitch::Up` the viewport shows the canopy layer against the sky
//! instead of the ground.

use serde::{Deserialize, Serialize};

use super::{Facing, Item, Pitch, Tile, WorldState};

pub const FRAME_SIZE: usize = 64;
pub const FRAME_CHANNELS: usize = 3;
pub const VIEW_RADIUS: usize = 5;
const VIEW_TILES: usize = 2 * VIEW_RADIUS + 1;
const TILE_PX: usize = 5;
const VIEW_X0: usize = 4;
const HOTBAR_Y0: usize = VIEW_TILES * TILE_PX;
const HOTBAR_ITEMS: [Item; 5] = [
    Item::Log,
    Item::Planks,
    Item::Stick,
    Item::CraftingTable,
    Item::WoodenPickaxe,
];
const SLOT_PX: usize = 12;

pub type Rgb = [u8; 3];

/// One observation: `FRAME_SIZE × FRAME_SIZE × 3` bytes, row-major, RGB.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObsFrame {
    pub t: u32,
    pub pixels: Vec<u8>,
}

impl ObsFrame {
    pub fn blank(t: u32) -> Self {
        Self {
            t,
            pixels: vec![0; FRAME_SIZE * FRAME_SIZE * FRAME_CHANNELS],
        }
    }

    pub fn solid(t: u32, rgb: Rgb) -> Self {
        let mut f = Self::blank(t);
        for px in f.pixels.chunks_exact_mut(3) {
            px.copy_from_slice(&rgb);
        }
        f
    }

    pub fn pixel(&self, x: usize, y: usize) -> Rgb {
        let i = (y * FRAME_SIZE + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    fn put(&mut self, x: usize, y: usize, c: Rgb) {
        let i = (y * FRAME_SIZE + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&c);
    }

    fn fill(&mut self, x0: usize, y0: usize, w: usize, h: usize, c: Rgb) {
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                self.put(x, y, c);
            }
        }
    }

    /// Channel-major `[3, H, W]` floats in `[0, 1]`.
    pub fn to_chw(&self) -> Vec<f32> {
        let plane = FRAME_SIZE * FRAME_SIZE;
        let mut out = vec![0.0; 3 * plane];
        for (i, px) in self.pixels.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * plane + i] = px[c] as f32 / 255.0;
            }
        }
        out
    }
}

/// Sprite colours. Exposed so the villager/trunk similarity can be tuned.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Palette {
    pub grass: Rgb,
    pub dirt: Rgb,
    pub stone: Rgb,
    pub trunk: Rgb,
    pub trunk_grain: Rgb,
    pub leaves: Rgb,
    pub sky: Rgb,
    pub diamond: Rgb,
    pub table: Rgb,
    pub table_grid: Rgb,
    pub villager: Rgb,
    pub villager_face: Rgb,
    pub void: Rgb,
    pub agent: Rgb,
    pub pitch_level: Rgb,
    pub pitch_up: Rgb,
    pub pitch_down: Rgb,
    pub inventory_bg: Rgb,
    pub inventory_slot: Rgb,
    pub hotbar_bg: Rgb,
    pub hotbar_count: Rgb,
    pub hotbar_selected: Rgb,
}

impl Default for Palette {
    fn default() -> Self {
        Self {
            grass: [95, 159, 53],
            dirt: [134, 96, 67],
            stone: [125, 125, 125],
            trunk: [102, 76, 40],
            trunk_grain: [74, 55, 29],
            leaves: [40, 98, 28],
            sky: [135, 196, 235],
            diamond: [92, 219, 213],
            table: [168, 120, 68],
            table_grid: [90, 60, 30],
            villager: [104, 78, 44],
            villager_face: [84, 60, 34],
            void: [0, 0, 0],
            agent: [250, 250, 250],
            pitch_level: [60, 60, 60],
            pitch_up: [135, 196, 235],
            pitch_down: [70, 50, 30],
            inventory_bg: [198, 198, 198],
            inventory_slot: [139, 139, 139],
            hotbar_bg: [36, 36, 36],
            hotbar_count: [240, 240, 240],
            hotbar_selected: [250, 220, 60],
        }
    }
}

pub fn hotbar_slot(item: Item) -> u8 {
    HOTBAR_ITEMS.iter().position(|&i| i == item).unwrap_or(0) as u8
}

fn item_color(p: &Palette, item: Item) -> Rgb {
    match item {
        Item::Log => p.trunk,
        Item::Planks => p.table,
        Item::Stick => p.trunk_grain,
        Item::CraftingTable => p.table_grid,
        Item::WoodenPickaxe => p.agent,
        Item::IronPickaxe => p.stone,
        Item::Diamond => p.diamond,
    }
}

/// World coordinates of viewport cell `(vx, vy)`, or `None` outside the map.
pub fn view_to_world(world: &WorldState, vx: usize, vy: usize) -> Option<(usize, usize)> {
    let right = vx as isize - VIEW_RADIUS as isize;
    let fwd = VIEW_RADIUS as isize - vy as isize;
    let (fx, fy) = world.agent.facing.delta();
    let (rx, ry) = world.agent.facing.right().delta();
    let x = world.agent.x as isize + fx * fwd + rx * right;
    let y = world.agent.y as isize + fy * fwd + ry * right;
    world.in_bounds(x, y).then_some((x as usize, y as usize))
}

/// True when world tile `(x, y)` lies inside the square visible window.
pub fn visible(world: &WorldState, x: usize, y: usize) -> bool {
    world.agent.x.abs_diff(x) <= VIEW_RADIUS && world.agent.y.abs_diff(y) <= VIEW_RADIUS
}

/// Pure function of the world state.
pub fn render(world: &WorldState) -> ObsFrame {
    let p = &world.palette;
    let mut f = ObsFrame::blank(world.tick);

    if world.agent.inventory_open {
        draw_inventory_panel(&mut f, p);
    } else {
        let margin = match world.agent.pitch {
            Pitch::Level => p.pitch_level,
            Pitch::Up => p.pitch_up,
            Pitch::Down => p.pitch_down,
        };
        f.fill(0, 0, VIEW_X0, HOTBAR_Y0, margin);
        f.fill(VIEW_X0 + VIEW_TILES * TILE_PX, 0, FRAME_SIZE - VIEW_X0 - VIEW_TILES * TILE_PX, HOTBAR_Y0, margin);
        for vy in 0..VIEW_TILES {
            for vx in 0..VIEW_TILES {
                let (px, py) = (VIEW_X0 + vx * TILE_PX, vy * TILE_PX);
                match view_to_world(world, vx, vy) {
                    None => f.fill(px, py, TILE_PX, TILE_PX, p.void),
                    Some((x, y)) => {
                        if world.agent.pitch == Pitch::Up {
                            let c = if world.has_canopy(x, y) { p.leaves } else { p.sky };
                            f.fill(px, py, TILE_PX, TILE_PX, c);
                        } else {
                            draw_ground(&mut f, world, x, y, px, py);
                        }
                    }
                }
            }
        }
        let c = VIEW_X0 + VIEW_RADIUS * TILE_PX + 2;
        let r = VIEW_RADIUS * TILE_PX + 2;
        f.put(c, r, p.agent);
        f.put(c, r - 1, p.agent);
    }
    draw_hotbar(&mut f, world, p);
    f
}

fn draw_ground(f: &mut ObsFrame, world: &WorldState, x: usize, y: usize, px: usize, py: usize) {
    let p = &world.palette;
    let tile = world.tile(x, y);
    let base = match tile {
        Tile::Grass | Tile::Barrier => p.grass,
        Tile::Dirt => p.dirt,
        Tile::Stone | Tile::DiamondOre => p.stone,
        Tile::TreeTrunk => p.trunk,
        Tile::TreeLeaves => p.leaves,
        Tile::CraftingTable => p.table,
    };
    f.fill(px, py, TILE_PX, TILE_PX, base);
    match tile {
        Tile::TreeTrunk => {
            for dy in 0..TILE_PX {
                f.put(px + 1, py + dy, p.trunk_grain);
                f.put(px + 3, py + dy, p.trunk_grain);
            }
        }
        Tile::DiamondOre => {
            f.put(px + 1, py + 1, p.diamond);
            f.put(px + 3, py + 3, p.diamond);
            f.put(px + 3, py + 1, p.diamond);
        }
        Tile::CraftingTable => {
            for d in 0..TILE_PX {
                f.put(px + 2, py + d, p.table_grid);
                f.put(px + d, py + 2, p.table_grid);
            }
        }
        _ => {}
    }
    if world.entity_at(x, y).is_some() {
        f.fill(px, py, TILE_PX, TILE_PX, p.villager);
        f.put(px + 1, py + 1, p.villager_face);
        f.put(px + 3, py + 1, p.villager_face);
        f.put(px + 2, py + 3, p.trunk_grain);
    }
    if world.agent.pitch == Pitch::Level && world.has_canopy(x, y) {
        // Leaves seen from below: a checker on the tile's outer ring.
        for d in 0..TILE_PX {
            for &(ox, oy) in &[(d, 0), (d, TILE_PX - 1), (0, d), (TILE_PX - 1, d)] {
                if (ox + oy) % 2 == 0 {
                    f.put(px + ox, py + oy, p.leaves);
                }
            }
        }
    }
}

fn draw_inventory_panel(f: &mut ObsFrame, p: &Palette) {
    f.fill(0, 0, FRAME_SIZE, HOTBAR_Y0, p.inventory_bg);
    // 3×3 crafting grid plus an output slot.
    for gy in 0..3 {
        for gx in 0..3 {
            f.fill(8 + gx * 9, 12 + gy * 9, 7, 7, p.inventory_slot);
        }
    }
    f.fill(44, 21, 9, 9, p.inventory_slot);
}

fn draw_hotbar(f: &mut ObsFrame, world: &WorldState, p: &Palette) {
    f.fill(0, HOTBAR_Y0, FRAME_SIZE, FRAME_SIZE - HOTBAR_Y0, p.hotbar_bg);
    let inv = &world.agent.inventory;
    for (i, &item) in HOTBAR_ITEMS.iter().enumerate() {
        let x0 = 2 + i * SLOT_PX;
        f.fill(x0, HOTBAR_Y0 + 1, SLOT_PX - 2, 1, item_color(p, item));
        if world.agent.selected_slot as usize == i {
            f.fill(x0, HOTBAR_Y0, SLOT_PX - 2, 1, p.hotbar_selected);
        }
        let n = (inv.count(item) as usize).min(SLOT_PX - 2);
        if n > 0 {
            f.fill(x0, HOTBAR_Y0 + 3, n, 5, p.hotbar_count);
        }
    }
}

/// Facing of the viewport's "up" direction, for documentation and tests.
pub fn view_up(world: &WorldState) -> Facing {
    world.agent.facing
}
