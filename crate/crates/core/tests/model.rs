use jampr::env::{validate, EnvConfig, State, Variant, VariantKind};
use jampr::instance::{generate_cvrp_with_capacity, generate_cvrptw, GenParams, Instance};
use jampr::model::{Model, ModelConfig, ModelMeta, Policy, PolicyKind, Selector};
use jampr::nn::{BnMode, Graph, ParamSet, Tensor};
use jampr::rng::{stream, Stream};

fn tw_instance(n: usize, seed: u64) -> Instance {
    let params = GenParams {
        capacity: Some(500.0),
        ..GenParams::default()
    };
    generate_cvrptw(n, seed, &params).unwrap()
}

fn tiny(policy: PolicyKind, tw: bool) -> ModelConfig {
    ModelConfig::small(policy, tw, 8, 2)
}

fn max_abs(t: &Tensor<f64>) -> f64 {
    t.data().iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

fn rel_dev(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    let diff = a
        .data()
        .iter()
        .zip(b.data())
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    diff / max_abs(b).max(1e-300)
}

#[test]
fn context_widths() {
    assert_eq!(ModelConfig::paper(PolicyKind::Jampr, true).d_context(), 640);
    assert_eq!(ModelConfig::paper(PolicyKind::Am, false).d_context(), 257);
    assert_eq!(ModelConfig::paper(PolicyKind::AmTw, true).d_context(), 258);
}

#[test]
fn meta_round_trip() {
    let cfg = ModelConfig::small(PolicyKind::Jampr, true, 16, 4);
    let meta = jampr::model::parse_meta(&cfg.to_meta());
    assert_eq!(ModelConfig::from_meta(&meta).unwrap(), cfg);
}

#[test]
fn invalid_configs_are_rejected() {
    let mut cfg = tiny(PolicyKind::Jampr, true);
    cfg.heads = 3;
    assert!(Policy::new::<f32, _>(cfg, &mut stream(0)).is_err());
    let mut cfg = tiny(PolicyKind::Jampr, true);
    cfg.veh_hidden += 1;
    assert!(Policy::new::<f32, _>(cfg, &mut stream(0)).is_err());
    let am = tiny(PolicyKind::Am, false);
    assert!(am
        .check_variant(&Variant::standard(VariantKind::Tw1))
        .is_err());
    let amtw = tiny(PolicyKind::AmTw, true);
    assert!(amtw
        .check_variant(&Variant::standard(VariantKind::Cvrp))
        .is_err());
}

#[test]
fn action_space_and_probabilities() {
    let inst = tw_instance(7, 3);
    let variant = Variant::standard(VariantKind::Tw2);
    let (policy, params) =
        Policy::new::<f64, _>(tiny(PolicyKind::Jampr, true), &mut stream(1)).unwrap();
    for m_con in [1, 2, 3] {
        let state = State::reset(&inst, variant, EnvConfig::for_variant(&variant, m_con)).unwrap();
        let mut g = Graph::new(&params);
        let node = policy.encode(&mut g, &[&inst], BnMode::Eval).unwrap();
        let mut dec = policy.decoder(&mut g, node, &state).unwrap();
        let mask = state.feasible_mask().unwrap();
        let lp = dec.log_probs(&mut g, &state, mask.as_flat()).unwrap();
        let v = g.value(lp);
        assert_eq!(v.shape(), (1, m_con * 8));
        let total: f64 = v.data().iter().map(|x| x.exp()).sum();
        assert!((total - 1.0).abs() < 1e-12);
        for (p, &ok) in v.data().iter().zip(mask.as_flat()) {
            assert_eq!(ok, p.is_finite());
        }
    }
}

#[test]
fn cached_decoding_matches_full_recompute() {
    let inst = tw_instance(9, 11);
    let variant = Variant::standard(VariantKind::Tw2);
    let (policy, params) =
        Policy::new::<f64, _>(tiny(PolicyKind::Jampr, true), &mut stream(5)).unwrap();
    let mut state = State::reset(&inst, variant, EnvConfig::for_variant(&variant, 3)).unwrap();
    let mut g = Graph::new(&params);
    let node = policy.encode(&mut g, &[&inst], BnMode::Eval).unwrap();
    let mut dec = policy.decoder(&mut g, node, &state).unwrap();
    let mut worst = 0.0f64;
    let mut steps = 0;
    let mut check =
        |g: &mut Graph<'_, f64>, dec: &mut jampr::model::LaneDecoder<'_>, s: &State<'_>| {
            let cached = dec.view(g, s);
            let full = policy.full_view(g, node, s).unwrap();
            for (a, b) in [
                (&cached.vehicles, &full.vehicles),
                (&cached.fleet, &full.fleet),
                (&cached.active, &full.active),
                (&cached.context, &full.context),
                (&cached.actions, &full.actions),
            ] {
                worst = worst.max(rel_dev(a, b));
            }
            steps += 1;
        };
    let mut rng = stream(9);
    dec.rollout(
        &mut g,
        &mut state,
        Selector::Sample(&mut rng),
        Some(&mut check),
    )
    .unwrap();
    assert!(steps >= 9);
    assert!(worst < 1e-10, "worst deviation {worst}");
}

#[test]
fn greedy_is_deterministic_and_valid() {
    let inst = tw_instance(12, 2);
    for kind in [VariantKind::Tw1, VariantKind::Tw2, VariantKind::Tw3] {
        let variant = Variant::standard(kind);
        let meta = ModelMeta {
            variant: kind,
            m_con: 2,
        };
        let model = Model::new(tiny(PolicyKind::Jampr, true), meta, 4).unwrap();
        let env = EnvConfig::for_variant(&variant, 2);
        let a = model.greedy(&inst, &variant, &env).unwrap();
        let b = model.greedy(&inst, &variant, &env).unwrap();
        assert_eq!(a, b);
        assert!(validate(&inst, &a.solution, &variant).is_valid());
        let r = model.replay(&inst, &variant, &env, &a.actions).unwrap();
        assert!((r.log_prob - a.log_prob).abs() < 1e-5);
    }
}

#[test]
fn sampling_is_seeded() {
    let inst = tw_instance(10, 8);
    let variant = Variant::standard(VariantKind::Tw3);
    let meta = ModelMeta {
        variant: VariantKind::Tw3,
        m_con: 1,
    };
    let model = Model::new(tiny(PolicyKind::Jampr, true), meta, 2).unwrap();
    let env = EnvConfig::for_variant(&variant, 1);
    let a = model.sample(&inst, &variant, &env, 16, 77).unwrap();
    let b = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap()
        .install(|| model.sample(&inst, &variant, &env, 16, 77).unwrap());
    assert_eq!(a, b);
    assert!(a.iter().any(|r| r.actions != a[0].actions));
}

#[test]
fn am_policies_decode_one_tour_at_a_time() {
    let cvrp = generate_cvrp_with_capacity(10, 4, 20.0).unwrap();
    let variant = Variant::standard(VariantKind::Cvrp);
    let meta = ModelMeta {
        variant: VariantKind::Cvrp,
        m_con: 1,
    };
    let model = Model::new(tiny(PolicyKind::Am, false), meta, 1).unwrap();
    let r = model
        .greedy(&cvrp, &variant, &EnvConfig::for_variant(&variant, 3))
        .unwrap();
    assert!(validate(&cvrp, &r.solution, &variant).is_valid());

    let inst = tw_instance(10, 4);
    let variant = Variant::standard(VariantKind::Tw1);
    let meta = ModelMeta {
        variant: VariantKind::Tw1,
        m_con: 1,
    };
    let model = Model::new(tiny(PolicyKind::AmTw, true), meta, 1).unwrap();
    let r = model
        .greedy(&inst, &variant, &EnvConfig::for_variant(&variant, 1))
        .unwrap();
    assert!(validate(&inst, &r.solution, &variant).is_valid());
}

#[test]
fn single_customer() {
    let inst = tw_instance(1, 0);
    let variant = Variant::standard(VariantKind::Tw1);
    let (policy, params) =
        Policy::new::<f64, _>(tiny(PolicyKind::Jampr, true), &mut stream(0)).unwrap();
    let mut state = State::reset(&inst, variant, EnvConfig::for_variant(&variant, 1)).unwrap();
    let mut g = Graph::new(&params);
    let node = policy.encode(&mut g, &[&inst], BnMode::Eval).unwrap();
    let mut dec = policy.decoder(&mut g, node, &state).unwrap();
    let r = dec
        .rollout::<f64, Stream>(&mut g, &mut state, Selector::Greedy, None)
        .unwrap();
    assert_eq!(r.solution.tours.len(), 1);
    assert_eq!(r.solution.tours[0].nodes, vec![1]);
}

#[test]
fn forced_infeasible_action_is_an_error() {
    let inst = tw_instance(4, 1);
    let variant = Variant::standard(VariantKind::Tw2);
    let meta = ModelMeta {
        variant: VariantKind::Tw2,
        m_con: 1,
    };
    let model = Model::new(tiny(PolicyKind::Jampr, true), meta, 0).unwrap();
    // node 0 (return) is masked before the first customer
    assert!(model
        .replay(&inst, &variant, &EnvConfig::for_variant(&variant, 1), &[0])
        .is_err());
}

#[test]
fn checkpoint_round_trip() {
    let dir = std::env::temp_dir().join(format!("jampr-model-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("m.ckpt");
    let meta = ModelMeta {
        variant: VariantKind::Tw2,
        m_con: 2,
    };
    let model = Model::new(tiny(PolicyKind::Jampr, true), meta, 13).unwrap();
    model.save(&path).unwrap();
    let back = Model::load(&path).unwrap();
    assert_eq!(back.meta, meta);
    assert_eq!(back.cfg(), model.cfg());
    let same = back
        .params
        .iter()
        .zip(model.params.iter())
        .all(|((_, a), (_, b))| a.value == b.value);
    assert!(same);
    assert!(back.check_variant(VariantKind::Tw3).is_err());
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn encoder_batch_statistics_span_instances() {
    let a = tw_instance(5, 1);
    let b = tw_instance(5, 2);
    let (policy, params): (Policy, ParamSet<f64>) =
        Policy::new(tiny(PolicyKind::Jampr, true), &mut stream(0)).unwrap();
    let mut g = Graph::new(&params);
    let both = policy.encode(&mut g, &[&a, &b], BnMode::Train).unwrap();
    let alone = policy.encode(&mut g, &[&a], BnMode::Train).unwrap();
    assert_eq!(g.shape(both), (12, 8));
    let top = g.slice_rows(both, 0, 6);
    assert!(rel_dev(g.value(top), g.value(alone)) > 1e-6);
    let e1 = policy.encode(&mut g, &[&a], BnMode::Eval).unwrap();
    let e2 = policy.encode(&mut g, &[&a, &b], BnMode::Eval).unwrap();
    let top = g.slice_rows(e2, 0, 6);
    assert!(rel_dev(g.value(top), g.value(e1)) < 1e-12);
}
