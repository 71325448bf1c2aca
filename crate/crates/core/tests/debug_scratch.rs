use crossway_core::sim::{run_scenario, Scenario};

#[test]
fn debug_fully() {
    let s = Scenario::load(format!("{}/../../scenarios/fully_cav.toml", env!("CARGO_MANIFEST_DIR"))).unwrap();
    let (_trace, metrics) = run_scenario(&s).unwrap();
    println!("collisions: {:?}", metrics.collision_events);
    println!("floors: {:?}", metrics.floor_events.len());
    println!("floor list: {:?}", &metrics.floor_events.iter().take(10).collect::<Vec<_>>());
    println!("travel: {:?}", metrics.travel_times);
    println!("yields: {}", metrics.yield_events.len());
    let ident = metrics.identification_stats().unwrap();
    let mgmt = metrics.management_stats().unwrap();
    println!("ident ms mean {:.3} max {:.3}; mgmt ms mean {:.3} max {:.3}", ident.mean, ident.max, mgmt.mean, mgmt.max);
}
