// SPDX-License-Identifier: MIT OR Apache-2.0

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Entity, EntityKind, Tile, WorldState, VILLAGER_HIT_POINTS};
use crate::error::{Error, Result};

pub const MIN_WORLD_SIDE: usize = 16;
const MIN_TREES: usize = 3;

/// Procedural terrain: grass with dirt patches, a few stone outcrops (one
/// with diamond ore), single-trunk trees under a 3×3 canopy and one
/// wandering villager. The agent spawns at the centre facing north.
pub fn generate_world(seed: u64, size: (usize, usize)) -> Result<WorldState> {
    let (w, h) = size;
    if w < MIN_WORLD_SIDE || h < MIN_WORLD_SIDE {
        return Err(Error::Config(format!(
            "world size {w}x{h} below minimum {MIN_WORLD_SIDE}x{MIN_WORLD_SIDE}"
        )));
    }
    let mut world = WorldState::flat(w, h, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (sx, sy) = (world.agent.x, world.agent.y);
    let near_spawn = |x: usize, y: usize, r: usize| x.abs_diff(sx) <= r && y.abs_diff(sy) <= r;

    for i in 0..w * h {
        if rng.gen::<f32>() < 0.12 {
            world.tiles[i] = Tile::Dirt;
        }
    }

    let outcrops = (w * h / 256).max(1);
    for o in 0..outcrops {
        let (cx, cy) = (rng.gen_range(1..w - 3), rng.gen_range(1..h - 3));
        if near_spawn(cx, cy, 3) || near_spawn(cx + 1, cy + 1, 3) {
            continue;
        }
        for (dx, dy) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
            world.set_tile(cx + dx, cy + dy, Tile::Stone);
        }
        if o == 0 {
            world.set_tile(cx, cy, Tile::DiamondOre);
        }
    }

    let target = (w * h / 64).max(MIN_TREES);
    let mut trunks: Vec<(usize, usize)> = Vec::new();
    let fits = |trunks: &[(usize, usize)], world: &WorldState, x: usize, y: usize| {
        world.tile(x, y).walkable()
            && !near_spawn(x, y, 1)
            && trunks
                .iter()
                .all(|&(tx, ty)| tx.abs_diff(x) > 2 || ty.abs_diff(y) > 2)
    };
    for _ in 0..target * 20 {
        if trunks.len() >= target {
            break;
        }
        let (x, y) = (rng.gen_range(1..w - 1), rng.gen_range(1..h - 1));
        if fits(&trunks, &world, x, y) {
            trunks.push((x, y));
        }
    }
    // Deterministic fallback scan so the minimum always holds.
    let mut y = 2;
    while trunks.len() < MIN_TREES && y < h - 1 {
        let mut x = 2;
        while trunks.len() < MIN_TREES && x < w - 1 {
            if fits(&trunks, &world, x, y) {
                trunks.push((x, y));
            }
            x += 3;
        }
        y += 3;
    }
    for &(x, y) in &trunks {
        plant_tree(&mut world, x, y);
    }

    for _ in 0..50 {
        let (x, y) = (rng.gen_range(0..w), rng.gen_range(0..h));
        if world.free(x as isize, y as isize) && !near_spawn(x, y, 2) {
            world.entities.push(Entity {
                kind: EntityKind::Villager,
                x,
                y,
                hit_points: VILLAGER_HIT_POINTS,
                pinned: false,
            });
            break;
        }
    }

    world.set_tile(sx, sy, Tile::Grass);
    Ok(world)
}

/// Trunk at `(x, y)` with leaves above it and its 8 neighbours.
pub(crate) fn plant_tree(world: &mut WorldState, x: usize, y: usize) {
    world.set_tile(x, y, Tile::TreeTrunk);
    plant_canopy(world, x, y);
}

pub(crate) fn plant_canopy(world: &mut WorldState, x: usize, y: usize) {
    for dy in -1..=1isize {
        for dx in -1..=1isize {
            let (cx, cy) = (x as isize + dx, y as isize + dy);
            if world.in_bounds(cx, cy) {
                let i = world.idx(cx as usize, cy as usize);
                world.canopy[i] = true;
            }
        }
    }
}

/// Connected trunk clusters (4-neighbourhood).
pub fn count_trees(world: &WorldState) -> usize {
    let mut seen = vec![false; world.tiles.len()];
    let mut n = 0;
    for start in 0..world.tiles.len() {
        if seen[start] || world.tiles[start] != Tile::TreeTrunk {
            continue;
        }
        n += 1;
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(i) = stack.pop() {
            let (x, y) = ((i % world.width) as isize, (i / world.width) as isize);
            for (dx, dy) in [(1, 0), (-1, 0), (0, 1), (0, -1)] {
                let (nx, ny) = (x + dx, y + dy);
                if world.in_bounds(nx, ny) {
                    let j = world.idx(nx as usize, ny as usize);
                    if !seen[j] && world.tiles[j] == Tile::TreeTrunk {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
    }
    n
}
