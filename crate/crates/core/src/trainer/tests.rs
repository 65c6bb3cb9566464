use super::*;
use crate::backbone::{encode_entity, ModelConfig};
use crate::bench::{build_sequence, synth_base, synth_features, BuildConfig, SynthBaseConfig, SynthFeatureConfig};

fn fixture() -> (SnapshotSequence, ModalityStore, TrainConfig) {
    let (base, community) = synth_base(&SynthBaseConfig {
        entities: 60,
        window: 20,
        ..SynthBaseConfig::default()
    })
    .unwrap();
    let built = build_sequence(
        &base,
        &BuildConfig {
            snapshots: 3,
            ..BuildConfig::default()
        },
    )
    .unwrap();
    let fc = SynthFeatureConfig {
        d_v: 4,
        d_w: 4,
        m: 2,
        n: 3,
        ..SynthFeatureConfig::default()
    };
    let store = built.remap_store(&synth_features(&community, &fc, 3).unwrap()).unwrap();
    let cfg = TrainConfig {
        epochs: 4,
        batch_size: 32,
        lr: 0.01,
        model: ModelConfig {
            d: 8,
            d_v: 4,
            d_w: 4,
            d_p: 4,
            layers: 1,
            heads: 2,
            d_ff: 16,
            ..ModelConfig::default()
        },
        ..TrainConfig::default()
    };
    (built.sequence, store, cfg)
}

/// Step context of snapshot 1 after snapshot 0 was trained.
struct One {
    prev: ModelParams,
    frozen: FrozenReference,
    buffer: ReplayBuffer,
}

fn snapshot_one(tr: &Trainer) -> One {
    let prev = tr.train_snapshot(0, None).unwrap().params;
    One {
        frozen: tr.frozen_reference(1, &prev),
        buffer: tr.replay_buffer(1).unwrap(),
        prev,
    }
}

fn ctx<'a>(
    entities: &'a EntityBatch,
    one: &'a One,
    cfg: &'a TrainConfig,
    scope: CmkpScope,
    lc: f64,
    lr: f64,
) -> StepContext<'a> {
    StepContext {
        entities,
        frozen: Some(&one.frozen),
        ewc: None,
        cmkp: true,
        mmcr: true,
        scope,
        lambda_cmkp: lc,
        lambda_rep: lr,
        lambda_ewc: 0.0,
        replay: &cfg.replay,
    }
}

#[test]
fn snapshot_zero_total_is_kgr_bitwise() {
    let (seq, store, cfg) = fixture();
    let tr = Trainer::new(&seq, &store, cfg).unwrap();
    let out = tr.train_snapshot(0, None).unwrap();
    for e in &out.log {
        assert_eq!(e.losses.total.to_bits(), e.losses.l_kgr.to_bits());
        assert_eq!(e.stage, 2);
    }
}

#[test]
fn zero_lambdas_reduce_to_kgr_and_terms_add_up() {
    let (seq, store, cfg) = fixture();
    let tr = Trainer::new(&seq, &store, cfg.clone()).unwrap();
    let one = snapshot_one(&tr);
    let mut params = tr.initial_params(1, Some(&one.prev)).unwrap();
    // move away from the frozen copy so every term is nonzero
    for v in params.get_mut(params.ids.s).data_mut() {
        *v += 0.01;
    }
    let entities = tr.entity_batch(&params);
    let snap = seq.get(1).unwrap();
    let batch = &snap.train[..8.min(snap.train.len())];
    let replay: Vec<Triple> = one.buffer.triples().into_iter().take(6).collect();
    let scores = one.frozen.scores(tr.store(), &replay);

    let eval = |c: &StepContext| {
        let mut tape = Tape::new();
        let bound = Bound::leaves(&mut tape, &params);
        let lv = build_loss(&mut tape, &bound, &params, c, batch, &replay, &scores);
        LossBreakdown::read(&tape, &lv)
    };
    let zero = eval(&ctx(&entities, &one, &cfg, CmkpScope::All, 0.0, 0.0));
    assert_eq!(zero.total.to_bits(), zero.l_kgr.to_bits());
    assert!(zero.l_str > 0.0 && zero.l_rep_emb > 0.0);

    let (lc, lr) = (0.7, 1.3);
    let b = eval(&ctx(&entities, &one, &cfg, CmkpScope::All, lc, lr));
    let cmkp = b.l_str + b.l_mod + b.l_align + b.l_remb + b.l_rpat + b.l_anc;
    let mmcr = b.l_rep_emb + b.l_rep_score;
    let want = b.l_kgr + lc * cmkp + lr * mmcr;
    assert!((b.total - want).abs() <= 1e-12 * want.abs(), "{} vs {want}", b.total);

    // stage 1 keeps only L_mod and L_align and defers MMCR
    let s1 = eval(&ctx(&entities, &one, &cfg, CmkpScope::ModalityOnly, lc, lr));
    assert_eq!((s1.l_str, s1.l_remb, s1.l_rpat, s1.l_anc), (0.0, 0.0, 0.0, 0.0));
    assert_eq!((s1.l_rep_emb, s1.l_rep_score), (0.0, 0.0));
    let want = s1.l_kgr + lc * (s1.l_mod + s1.l_align);
    assert!((s1.total - want).abs() <= 1e-12 * want.abs());
}

#[test]
fn stage_one_rows_stay_bit_identical() {
    let (seq, store, cfg) = fixture();
    let tr = Trainer::new(&seq, &store, cfg.clone()).unwrap();
    let one = snapshot_one(&tr);
    let mut params = tr.initial_params(1, Some(&one.prev)).unwrap();
    let before = params.clone();
    let old_e = seq.old_entity_count(1);
    let old_r = seq.old_relation_count(1);
    let mut mask = params.freeze_masks(1, old_e, old_r).unwrap();
    mask.set(params.ids.q, ParamMask::All);
    let entities = tr.entity_batch(&params);
    let c = ctx(&entities, &one, &cfg, CmkpScope::ModalityOnly, 1.0, 0.5);
    let mut opt = OptimizerState::new();
    let adam = AdamConfig::with_lr(0.05);
    let train = &seq.get(1).unwrap().train;
    let replay: Vec<Triple> = one.buffer.triples().into_iter().take(4).collect();
    let scores = one.frozen.scores(tr.store(), &replay);
    for k in 0..24 {
        let batch: Vec<Triple> = train.iter().cycle().skip(k * 8).take(8).copied().collect();
        tr.step(&mut params, &mut opt, &adam, &mask, &c, &batch, &replay, &scores)
            .unwrap();
    }
    let same_rows = |idx: usize, rows: usize| {
        let (a, b) = (before.get(idx), params.get(idx));
        (0..rows).all(|r| {
            a.row_slice(r)
                .iter()
                .zip(b.row_slice(r))
                .all(|(x, y)| x.to_bits() == y.to_bits())
        })
    };
    assert!(same_rows(params.ids.s, old_e));
    assert!(same_rows(params.ids.r, old_r));
    assert_eq!(before.get(params.ids.q), params.get(params.ids.q));
    // new rows and shared weights did move
    let s = params.ids.s;
    assert_ne!(before.get(s).row_slice(old_e), params.get(s).row_slice(old_e));
    assert!(params.shared_indices().iter().any(|&k| before.get(k) != params.get(k)));
    // P only feeds the anchor term, which stage 1 defers
    assert_eq!(before.get(params.ids.p), params.get(params.ids.p));
}

#[test]
fn runs_are_deterministic_and_lower_triangular() {
    let (seq, store, cfg) = fixture();
    let dir = tempfile::tempdir().unwrap();
    let a = run_sequence(&seq, &store, cfg.clone(), dir.path()).unwrap();
    let b = Trainer::new(&seq, &store, cfg).unwrap().run(None, None).unwrap();
    assert_eq!(a.matrix, b.matrix);
    for (x, y) in a.snapshots.iter().zip(&b.snapshots) {
        assert_eq!(x.params, y.params);
    }
    assert!(a.matrix.is_complete() && a.matrix.is_lower_triangular());
    for i in 0..3 {
        for j in 0..3 {
            assert_eq!(a.matrix.get(i, j).is_some(), j <= i);
        }
        assert!(checkpoint_dir(dir.path(), i).exists());
        let csv = fs::read_to_string(dir.path().join(format!("s{i}/losses.csv"))).unwrap();
        assert!(csv.starts_with("epoch,stage,L_kgr"));
    }
    for f in ["config.json", "metrics.json", "curriculum.jsonl", "replay_buffer.tsv"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    // Q is copied from P when a snapshot ends
    let p = &a.snapshots[2].params;
    assert_eq!(p.get(p.ids.p), p.get(p.ids.q));
}

#[test]
fn replay_only_shares_the_mrckg_buffer() {
    let (seq, store, cfg) = fixture();
    let full = Trainer::new(&seq, &store, cfg.clone()).unwrap();
    let ro = Trainer::new(
        &seq,
        &store,
        TrainConfig {
            mode: Mode::ReplayOnly,
            ..cfg
        },
    )
    .unwrap();
    for i in 1..3 {
        assert_eq!(full.replay_buffer(i).unwrap(), ro.replay_buffer(i).unwrap());
    }
    let out = ro
        .train_snapshot(1, Some(&full.train_snapshot(0, None).unwrap().params))
        .unwrap();
    assert!(out.buffer.is_some());
    assert!(out
        .log
        .iter()
        .all(|e| e.stage == 2 && e.losses.l_str == 0.0 && e.losses.l_rep_emb == 0.0));
}

#[test]
fn structure_cl_zeroes_modality_summaries() {
    let (seq, store, cfg) = fixture();
    let tr = Trainer::new(
        &seq,
        &store,
        TrainConfig {
            mode: Mode::StructureCl,
            ..cfg
        },
    )
    .unwrap();
    let p = tr.train_snapshot(0, None).unwrap().params;
    for e in [0u32, 5, 17] {
        assert!(store.has_visual(e) || store.has_text(e));
        let enc = encode_entity(e, &p, tr.store()).unwrap();
        assert!(enc.vbar.iter().chain(&enc.wbar).all(|&v| v == 0.0));
    }
}

#[test]
fn each_ablation_switches_off_its_component() {
    let (seq, store, cfg) = fixture();
    let base = Trainer::new(&seq, &store, cfg.clone()).unwrap();
    let s0 = base.train_snapshot(0, None).unwrap();
    let full = base.train_snapshot(1, Some(&s0.params)).unwrap();
    let variant = |a: Ablation| {
        let tr = Trainer::new(
            &seq,
            &store,
            TrainConfig {
                ablations: vec![a],
                ..cfg.clone()
            },
        )
        .unwrap();
        let s0v = tr.train_snapshot(0, None).unwrap();
        (tr.train_snapshot(1, Some(&s0v.params)).unwrap(), s0v, tr.features())
    };
    assert!(full.log.iter().any(|e| e.losses.l_str > 0.0));
    assert!(full.log.iter().any(|e| e.losses.l_rep_emb > 0.0));
    assert!(full.log.iter().any(|e| e.curriculum_stage.is_some()));

    let (o, s0v, _) = variant(Ablation::NoCmkp);
    // snapshot 0 does not depend on CMKP, so it can be shared between runs
    assert_eq!(s0v.params, s0.params);
    assert!(o
        .log
        .iter()
        .all(|e| e.losses.l_str + e.losses.l_mod + e.losses.l_anc == 0.0));
    assert!(o.log.iter().any(|e| e.losses.l_rep_emb > 0.0));
    assert_ne!(o.params, full.params);

    let (o, _, _) = variant(Ablation::NoMmcr);
    assert!(o.buffer.is_none());
    assert!(o
        .log
        .iter()
        .all(|e| e.losses.l_rep_emb == 0.0 && e.losses.l_rep_score == 0.0));

    let (o, _, f) = variant(Ablation::NoMscl);
    assert_eq!(f.ordering, Ordering::Shuffled);
    assert!(o.curriculum.is_empty());
    assert!(o.log.iter().all(|e| e.eligible == seq.get(1).unwrap().train.len()));

    let (o, _, f) = variant(Ablation::NoProg);
    assert_eq!(f.ordering, Ordering::Static);
    assert!(o.log.iter().all(|e| e.curriculum_stage.is_none()));
    assert_ne!(o.params, full.params);

    let (o, _, f) = variant(Ablation::NoVisual);
    assert!(!f.keep_visual && f.keep_text);
    assert!(o.log.iter().all(|e| e.losses.is_finite()));
}

#[test]
fn ewc_baseline_penalises_drift() {
    let (seq, store, cfg) = fixture();
    let tr = Trainer::new(&seq, &store, TrainConfig { mode: Mode::Ewc, ..cfg }).unwrap();
    let s0 = tr.train_snapshot(0, None).unwrap();
    let s1 = tr.train_snapshot(1, Some(&s0.params)).unwrap();
    assert!(s1.buffer.is_none() && s1.curriculum.is_empty());
    assert!(s1.log.iter().any(|e| e.losses.l_ewc > 0.0));
    assert!(s1.log.iter().all(|e| e.losses.l_str == 0.0));
}

#[test]
fn missing_previous_checkpoint_is_a_contract_error() {
    let (seq, store, cfg) = fixture();
    let tr = Trainer::new(&seq, &store, cfg).unwrap();
    assert!(matches!(tr.train_snapshot(1, None), Err(Error::Contract(_))));
}
