//! From-scratch reference for the crossing scheduler.

use aimdt::config::{Environment, WorldConfig};
use aimdt::episode::ScenarioSpec;
use aimdt::world::{make_path, step_vehicle, PathSpec, Phase, VehicleState};

/// Positions of a lone full-speed vehicle at every tick, straight from the
/// kinematics, with the index of the last tick whose disc stays short of the
/// conflict box.
fn lone_run(path: &PathSpec, cfg: &WorldConfig) -> (Vec<(f64, f64, f64)>, usize) {
    let mut st = VehicleState::parked(path);
    st.phase = Phase::Active;
    st.v = cfg.v_max;
    let mut out = vec![(st.arc_pos, st.x, st.y)];
    loop {
        st = step_vehicle(&st, path, cfg.a_max, cfg).unwrap();
        if st.phase != Phase::Active {
            break;
        }
        out.push((st.arc_pos, st.x, st.y));
    }
    let hold = out.iter().rposition(|p| p.0 + cfg.vehicle_radius <= path.interior_entry() + 1e-9).unwrap();
    (out, hold)
}

/// Earliest release ticks for `order`, found by trying ticks one at a time
/// and simulating every already placed vehicle alongside.
pub fn explicit_release(env: &Environment, sc: &ScenarioSpec, order: &[usize]) -> (u64, u64) {
    let w = &env.world;
    let runs: Vec<_> = sc
        .vehicles
        .iter()
        .map(|v| lone_run(&make_path(&env.layout, v.approach, v.destination).unwrap(), w))
        .collect();
    let pos = |slot: usize, release: u64, tick: u64| -> Option<(f64, f64)> {
        let (run, hold) = &runs[slot];
        if tick < release {
            return None;
        }
        run.get(hold + (tick - release) as usize).map(|p| (p.1, p.2))
    };
    let mut placed: Vec<(usize, u64)> = Vec::new();
    let mut delay = 0;
    let mut makespan = 0;
    for &slot in order {
        let (run, hold) = &runs[slot];
        let arrival = u64::from(sc.vehicles[slot].entry_step) + *hold as u64;
        let mut e = arrival.max(placed.last().map_or(0, |p| p.1));
        'search: loop {
            for &(p, rp) in &placed {
                let horizon = (rp + runs[p].0.len() as u64).max(e + run.len() as u64);
                for t in e..horizon {
                    if let (Some(a), Some(b)) = (pos(p, rp, t), pos(slot, e, t)) {
                        let d = ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt();
                        if d < 2.0 * w.vehicle_radius {
                            e += 1;
                            continue 'search;
                        }
                    }
                }
            }
            break;
        }
        placed.push((slot, e));
        delay += e - arrival;
        makespan = makespan.max(e + (run.len() - hold) as u64);
    }
    (delay, makespan)
}
