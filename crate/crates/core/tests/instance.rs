use proptest::prelude::*;

use jampr::instance::{
    generate_cvrp, generate_cvrptw, load_instance, save_instance, split_instance, GenParams, Half,
    Instance,
};
use jampr::solomon::{parse_solomon, parse_solomon_file, SolomonOptions};

fn solomon(name: &str) -> Instance {
    let path = format!(
        "{}/../../data/solomon/{name}.txt",
        env!("CARGO_MANIFEST_DIR")
    );
    parse_solomon(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn demand_stats(inst: &Instance) -> (f64, f64) {
    let d: Vec<f64> = inst.customers().iter().map(|c| c.demand).collect();
    let n = d.len() as f64;
    let m = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, var.sqrt())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn generated_instances_round_trip(n in 1usize..60, seed in any::<u64>(), cap in 100.0f64..2000.0) {
        let p = GenParams { capacity: Some(cap), ..GenParams::default() };
        let inst = generate_cvrptw(n, seed, &p).unwrap();
        prop_assert_eq!(load_instance(&save_instance(&inst)).unwrap(), inst);
    }

    #[test]
    fn windows_are_reachable_from_the_depot(n in 1usize..60, seed in any::<u64>()) {
        let p = GenParams { capacity: Some(1000.0), ..GenParams::default() };
        let inst = generate_cvrptw(n, seed, &p).unwrap();
        let b0 = inst.horizon().1;
        for i in 1..=n {
            let node = inst.node(i);
            prop_assert!(node.tw_start <= node.tw_end);
            prop_assert!(inst.dist(0, i) <= node.tw_end);
            prop_assert!(node.tw_start.max(inst.dist(0, i)) + inst.dist(i, 0) <= b0);
            prop_assert!(node.demand <= inst.capacity());
        }
    }

    #[test]
    fn generation_is_a_function_of_the_seed(n in 1usize..30, seed in any::<u64>()) {
        let p = GenParams { capacity: Some(500.0), ..GenParams::default() };
        prop_assert_eq!(generate_cvrptw(n, seed, &p).unwrap(), generate_cvrptw(n, seed, &p).unwrap());
    }
}

#[test]
fn cvrp_sizes_have_default_capacities() {
    assert_eq!(generate_cvrp(20, 1).unwrap().capacity(), 30.0);
    assert_eq!(generate_cvrp(50, 1).unwrap().capacity(), 40.0);
    assert!(generate_cvrp(33, 1).is_err());
}

#[test]
fn r201_loads_with_its_header_values() {
    let inst = solomon("R201");
    assert_eq!(inst.n_customers(), 100);
    assert_eq!(inst.capacity(), 1000.0);
    assert_eq!(inst.horizon(), (0.0, 1000.0));
    let (mean, _) = demand_stats(&inst);
    assert!((mean - 14.58).abs() < 1e-9);
}

#[test]
fn rc_family_matches_the_published_demand_statistics() {
    // the published mean 17.24 and std 9.4175 are those of the RC2 files
    let (mean, std) = demand_stats(&solomon("RC201"));
    assert!((mean - 17.24).abs() < 0.01);
    assert!((std - 9.4175).abs() < 0.001);
}

#[test]
fn halves_partition_the_customers() {
    let full = solomon("R205");
    let a = split_instance(&full, Half::First).unwrap();
    let b = split_instance(&full, Half::Second).unwrap();
    assert_eq!(a.n_customers() + b.n_customers(), 100);
    let total = a.total_demand() + b.total_demand();
    assert!((total - full.total_demand()).abs() < 1e-9);
}

#[test]
fn due_as_completion_shifts_by_service_time() {
    let path = format!("{}/../../data/solomon/R201.txt", env!("CARGO_MANIFEST_DIR"));
    let text = std::fs::read_to_string(path).unwrap();
    let plain = parse_solomon_file(&text, SolomonOptions::default()).unwrap();
    let shifted = parse_solomon_file(
        &text,
        SolomonOptions {
            due_as_completion: true,
        },
    )
    .unwrap();
    assert_eq!(plain.name, "R201");
    for i in 1..=100 {
        let (p, s) = (plain.instance.node(i), shifted.instance.node(i));
        assert!((p.tw_end - p.service - s.tw_end).abs() < 1e-9);
    }
}
