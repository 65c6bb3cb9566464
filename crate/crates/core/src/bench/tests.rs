use super::*;

fn base(n: usize) -> BaseKG {
    synth_base(&SynthBaseConfig {
        entities: n,
        ..SynthBaseConfig::default()
    })
    .unwrap()
    .0
}

fn counts(b: &BuiltBenchmark) -> Vec<usize> {
    b.sequence.snapshots().iter().map(|s| s.delta_triples.len()).collect()
}

#[test]
fn entity_strategy_is_valid_with_exact_bridge_counts() {
    let kg = base(400);
    let b = build_sequence(&kg, &BuildConfig::default()).unwrap();
    assert_eq!(b.sequence.len(), 5);
    let mut earlier: HashSet<Triple> = HashSet::new();
    for (i, s) in b.sequence.snapshots().iter().enumerate() {
        let want = (0.15 * s.delta_triples.len() as f64).floor() as usize;
        assert_eq!(b.bridge_counts[i], (if i == 0 { 0 } else { want }, s.bridges.len()));
        if i > 0 {
            assert_eq!(s.bridges.len(), want, "snapshot {i}");
        }
        for t in &s.bridges {
            assert!(earlier.contains(t));
        }
        earlier.extend(s.train.iter().copied());
    }
    // arrival boundaries follow the cumulative fractions
    let ents: Vec<usize> = b.sequence.snapshots().iter().map(|s| s.entity_count).collect();
    assert_eq!(ents, vec![140, 264, 328, 368, 400]);
}

#[test]
fn build_is_deterministic_and_seed_sensitive() {
    let kg = base(200);
    let cfg = BuildConfig::default();
    let a = build_sequence(&kg, &cfg).unwrap();
    let b = build_sequence(&kg, &cfg).unwrap();
    assert_eq!(a.sequence, b.sequence);
    assert_eq!(a.entity_map, b.entity_map);
    let c = build_sequence(&kg, &BuildConfig { seed: 9, ..cfg }).unwrap();
    assert_ne!(a.sequence, c.sequence);
}

#[test]
fn higher_strategy_grows_and_equal_is_flat() {
    let kg = base(400);
    let hi = build_sequence(
        &kg,
        &BuildConfig {
            strategy: Strategy::Higher,
            ..BuildConfig::default()
        },
    )
    .unwrap();
    let c = counts(&hi);
    assert!(c.windows(2).all(|w| w[1] >= w[0]), "{c:?}");
    let eq = build_sequence(
        &kg,
        &BuildConfig {
            strategy: Strategy::Equal,
            ..BuildConfig::default()
        },
    )
    .unwrap();
    let c = counts(&eq);
    let mean = c.iter().sum::<usize>() as f64 / c.len() as f64;
    assert!(c.iter().all(|&x| (x as f64 - mean).abs() <= 0.1 * mean), "{c:?}");
}

#[test]
fn resampled_fractions_for_other_lengths() {
    let cfg = BuildConfig {
        snapshots: 3,
        ..BuildConfig::default()
    };
    let f = cfg.cumulative_fractions();
    assert_eq!(f.len(), 3);
    assert!(f.windows(2).all(|w| w[1] > w[0]));
    assert_eq!(*f.last().unwrap(), 1.0);
    let built = build_sequence(&base(150), &cfg).unwrap();
    assert_eq!(built.sequence.len(), 3);
}

#[test]
fn tiny_base_is_rejected() {
    let kg = BaseKG::from_triples(3, 1, vec![Triple::new(0, 0, 1), Triple::new(1, 0, 2)]).unwrap();
    let cfg = BuildConfig {
        snapshots: 5,
        ..BuildConfig::default()
    };
    assert!(build_sequence(&kg, &cfg).is_err());
}

#[test]
fn labelled_tsv_and_benchmark_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("base.tsv");
    let kg = base(120);
    let mut text = String::new();
    for t in &kg.triples {
        text.push_str(&format!("ent_{}\trel_{}\tent_{}\n", t.head, t.relation, t.tail));
    }
    fs::write(&p, text).unwrap();
    let loaded = BaseKG::load_tsv(&p).unwrap();
    assert_eq!(loaded.triples.len(), kg.triples.len());
    assert!(loaded.entity_labels[0].starts_with("ent_"));

    let cfg = BuildConfig {
        snapshots: 3,
        ..BuildConfig::default()
    };
    let built = build_sequence(&loaded, &cfg).unwrap();
    let community: Vec<usize> = (0..loaded.entity_count).map(|e| e % 3).collect();
    let store = synth_features(&community, &SynthFeatureConfig::default(), 1).unwrap();
    let store = built.remap_store(&store).unwrap();
    let out = dir.path().join("bench");
    write_benchmark(&out, &built, &store, &loaded, &cfg).unwrap();
    let (seq, st) = load_benchmark(&out, (16, 16)).unwrap();
    assert_eq!(seq, built.sequence);
    assert_eq!(st.len(), store.len());
    for e in 0..loaded.entity_count as EntityId {
        assert_eq!(st.has_visual(e), store.has_visual(e));
    }
    let map = fs::read_to_string(out.join("entity_map.tsv")).unwrap();
    assert_eq!(map.lines().count(), loaded.entity_count + 1);
    let cfg_back: BuildConfig =
        serde_json::from_str(&fs::read_to_string(out.join("build_config.json")).unwrap()).unwrap();
    assert_eq!(cfg_back, cfg);
}

#[test]
fn malformed_base_line_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("b.tsv");
    fs::write(&p, "a\tr\tb\nbroken line\n").unwrap();
    let e = BaseKG::load_tsv(&p).unwrap_err().to_string();
    assert!(e.contains(":2"), "{e}");
}
