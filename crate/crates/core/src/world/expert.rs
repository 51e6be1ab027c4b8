// SPDX-License-Identifier: MIT OR Apache-2.0

//! Scripted demonstrator.
//!
//! Gathers four logs from visible trunks, crafts and places a table, then
//! crafts a wooden pickaxe next to it. Before chopping a trunk it looks up
//! once to check the canopy; whether that check already happened is not
//! visible in the current frame, so imitating the expert needs memory.

use std::collections::VecDeque;

use super::render::visible;
use super::{next_recipe, Action, Facing, Pitch, Tile, Turn, Use, WorldState};

const LOGS_NEEDED: u32 = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ExpertDecision {
    pub action: Action,
    /// No reachable trunk was in view; the action is exploratory.
    pub explore: bool,
}

pub fn scripted_expert(world: &WorldState) -> Action {
    expert_decision(world).action
}

fn act(action: Action) -> ExpertDecision {
    ExpertDecision {
        action,
        explore: false,
    }
}

/// Egocentric neighbour order used for every tie-break.
fn ego_order(f: Facing) -> [Facing; 4] {
    [f, f.right(), f.left(), f.back()]
}

fn turn_towards(current: Facing, want: Facing) -> Action {
    if want == current.left() {
        Action::turn(Turn::Left)
    } else {
        Action::turn(Turn::Right)
    }
}

pub fn expert_decision(world: &WorldState) -> ExpertDecision {
    let a = &world.agent;
    let inv = &a.inventory;
    let table_nearby = world.table_nearby();

    if a.inventory_open {
        let done = inv.wooden_pickaxe > 0 || (inv.tables > 0 && !table_nearby);
        return match next_recipe(inv, table_nearby) {
            Some(_) if !done => act(Action::use_item(Use::CraftNext)),
            _ => act(Action::use_item(Use::OpenInventory)),
        };
    }
    if a.pitch == Pitch::Down {
        return act(Action::turn(Turn::LookUp));
    }
    if inv.wooden_pickaxe > 0 {
        return act(if a.pitch == Pitch::Up {
            Action::turn(Turn::LookDown)
        } else {
            Action::NOOP
        });
    }
    if a.pitch == Pitch::Up {
        return act(Action::turn(Turn::LookDown));
    }

    if inv.tables > 0 && !table_nearby {
        for f in ego_order(a.facing) {
            let (dx, dy) = f.delta();
            if world.free(a.x as isize + dx, a.y as isize + dy) {
                return act(if f == a.facing {
                    Action::use_item(Use::PlaceTable)
                } else {
                    turn_towards(a.facing, f)
                });
            }
        }
        return act(Action::forward());
    }
    if table_nearby && next_recipe(inv, true).is_some() {
        return act(Action::use_item(Use::OpenInventory));
    }
    if inv.tables == 0 && !table_nearby && inv.logs >= LOGS_NEEDED {
        return act(Action::use_item(Use::OpenInventory));
    }

    // Gather: face an adjacent trunk, or walk towards the nearest one.
    for f in ego_order(a.facing) {
        let (dx, dy) = f.delta();
        let (x, y) = (a.x as isize + dx, a.y as isize + dy);
        if world.in_bounds(x, y) && world.tile(x as usize, y as usize) == Tile::TreeTrunk {
            if f != a.facing {
                return act(turn_towards(a.facing, f));
            }
            let here = (x as usize, y as usize);
            return act(if a.inspected == Some(here) {
                Action::attack()
            } else {
                Action::turn(Turn::LookUp)
            });
        }
    }
    if let Some(first) = path_to_trunk(world) {
        return act(if first == a.facing {
            Action::forward()
        } else {
            turn_towards(a.facing, first)
        });
    }
    explore(world)
}

/// First step of a shortest path to a tile adjacent to a visible trunk.
fn path_to_trunk(world: &WorldState) -> Option<Facing> {
    let a = &world.agent;
    let is_goal = |x: usize, y: usize| {
        Facing::ALL.iter().any(|f| {
            let (dx, dy) = f.delta();
            let (tx, ty) = (x as isize + dx, y as isize + dy);
            world.in_bounds(tx, ty)
                && world.tile(tx as usize, ty as usize) == Tile::TreeTrunk
                && visible(world, tx as usize, ty as usize)
        })
    };
    let mut first: Vec<Option<Facing>> = vec![None; world.tiles.len()];
    let mut seen = vec![false; world.tiles.len()];
    let start = world.idx(a.x, a.y);
    seen[start] = true;
    let mut queue = VecDeque::from([(a.x, a.y)]);
    let order = ego_order(a.facing);
    while let Some((x, y)) = queue.pop_front() {
        let i = world.idx(x, y);
        if i != start && is_goal(x, y) {
            return first[i];
        }
        for f in order {
            let (dx, dy) = f.delta();
            let (nx, ny) = (x as isize + dx, y as isize + dy);
            if !world.free(nx, ny) {
                continue;
            }
            let (nx, ny) = (nx as usize, ny as usize);
            // Stay inside the visible window so the plan uses what is seen.
            if !visible(world, nx, ny) {
                continue;
            }
            let j = world.idx(nx, ny);
            if !seen[j] {
                seen[j] = true;
                first[j] = if i == start { Some(f) } else { first[i] };
                queue.push_back((nx, ny));
            }
        }
    }
    None
}

fn explore(world: &WorldState) -> ExpertDecision {
    let a = &world.agent;
    let (dx, dy) = a.facing.delta();
    let blocked = !world.free(a.x as isize + dx, a.y as isize + dy);
    let h = (world.tick as u64)
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(((a.x as u64) << 32) ^ a.y as u64)
        .wrapping_mul(0xbf58_476d_1ce4_e5b9);
    let h = h ^ (h >> 31);
    let action = if blocked {
        if h & 1 == 0 {
            Action::turn(Turn::Right)
        } else {
            Action::turn(Turn::Left)
        }
    } else if (h >> 8) % 10 == 0 {
        if (h >> 4) & 1 == 0 {
            Action::turn(Turn::Right)
        } else {
            Action::turn(Turn::Left)
        }
    } else {
        Action::forward()
    };
    ExpertDecision {
        action,
        explore: true,
    }
}
