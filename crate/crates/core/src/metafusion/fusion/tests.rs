use super::*;
use crate::data::{Dataset, Field, Sample};
use crate::gradcore::{finite_diff_model, max_rel_error, sigmoid, sigmoid_logloss, DEFAULT_STEP, REL_FLOOR};

const H: usize = 4;

fn dataset() -> Dataset {
    let schema = FeatureSchema::new(
        vec![
            Field { name: "domain".into(), cardinality: 2 },
            Field { name: "user".into(), cardinality: 3 },
            Field { name: "item".into(), cardinality: 4 },
        ],
        2,
        2,
    )
    .unwrap();
    let s = |d, u, i, y| Sample { features: vec![d, u, i], label: y, order: 0 };
    Dataset::new(schema, vec![s(0, 0, 1, 1), s(1, 2, 3, 0), s(0, 2, 0, 0), s(1, 1, 2, 1)]).unwrap()
}

fn store(seed: u64) -> VectorStore {
    let mut rng = DetRng::new(seed);
    let mut vs = VectorStore::new(H);
    for d in 0..2 {
        vs.insert(Scope::Scenario, d, (0..H).map(|_| rng.normal()).collect()).unwrap();
    }
    for u in 0..3 {
        vs.insert(Scope::User, u, (0..H).map(|_| rng.normal()).collect()).unwrap();
    }
    vs
}

fn config(arch: Architecture, backbone: BackboneKind, baseline: Baseline) -> ModelConfig {
    ModelConfig {
        backbone,
        architecture: arch,
        baseline,
        backbone_config: BackboneConfig {
            tower_dims: vec![4, 3],
            num_experts: 2,
            ple_shared_experts: 1,
            ple_specific_experts: 1,
            aux_hidden: 2,
            dynamic_hidden: 3,
        },
        k_layers: 2,
        bottom_mid: None,
        bottom_residual: true,
        parallel_hidden: 4,
        meta_hidden: 5,
        meta_dynamic_scale: 1.0,
        epnet_hidden: 3,
        scenario_input: ScenarioInput::UserStack,
    }
}

fn loss(m: &mut FusionModel, batch: &Batch, know: &Knowledge) -> f64 {
    let z = m.forward(batch, know).unwrap();
    sigmoid_logloss(&batch.labels(), &z).unwrap().0
}

fn max_param_error(m: &mut FusionModel, batch: &Batch, know: &Knowledge) -> (f64, String) {
    m.zero_grads();
    let z = m.forward(batch, know).unwrap();
    let (_, _, g) = sigmoid_logloss(&batch.labels(), &z).unwrap();
    m.backward(&g).unwrap();
    let mut worst = (0.0, String::new());
    for i in 0..m.param_count() {
        let mut analytic = Matrix::zeros(0, 0);
        let mut name = String::new();
        m.with_param_mut(i, &mut |p| {
            analytic = p.grad.clone();
            name = p.name.clone();
        });
        let numeric = finite_diff_model(m, i, DEFAULT_STEP, |m| loss(m, batch, know));
        let err = max_rel_error(&analytic, &numeric, REL_FLOOR);
        if err > worst.0 {
            worst = (err, name);
        }
    }
    worst
}

#[test]
fn blend_endpoint_values() {
    assert!((sigmoid(blend_logit(0.5, 2.0, 0.0)) - 0.731_058_578_630_004_9).abs() < 1e-12);
    assert_eq!(blend_logit(0.0, 7.0, -1.5), -1.5);
    assert_eq!(blend_logit(1.0, 7.0, -1.5), 7.0);
}

#[test]
fn every_architecture_gradchecks() {
    let ds = dataset();
    let batch = Batch::all(&ds);
    let vs = store(3);
    for arch in Architecture::ALL {
        for baseline in Baseline::ALL {
            let mut m = FusionModel::new(&ds.schema, H, config(arch, BackboneKind::Mmoe, baseline), 7).unwrap();
            let know = Knowledge::for_model(&vs, &m).unwrap();
            let (err, name) = max_param_error(&mut m, &batch, &know);
            assert!(err < 1e-4, "{} / {}: {name} rel error {err}", arch.name(), baseline.name());
        }
    }
}

#[test]
fn scenario_stack_on_embedding_gradchecks() {
    let ds = dataset();
    let batch = Batch::all(&ds);
    let mut cfg = config(Architecture::Full, BackboneKind::Star, Baseline::None);
    cfg.scenario_input = ScenarioInput::Embedding;
    let mut m = FusionModel::new(&ds.schema, H, cfg, 2).unwrap();
    let know = Knowledge::for_model(&store(1), &m).unwrap();
    let (err, name) = max_param_error(&mut m, &batch, &know);
    assert!(err < 1e-4, "{name}: {err}");
}

#[test]
fn corrupted_backward_fails_gradcheck() {
    let ds = dataset();
    let batch = Batch::all(&ds);
    let mut m = FusionModel::new(&ds.schema, H, config(Architecture::Full, BackboneKind::Star, Baseline::None), 7)
        .unwrap();
    m.corrupt_backward = true;
    let know = Knowledge::for_model(&store(3), &m).unwrap();
    assert!(max_param_error(&mut m, &batch, &know).0 > 1e-2);
}

#[test]
fn alpha_zero_reproduces_user_bottom_only() {
    let ds = dataset();
    let batch = Batch::all(&ds);
    let vs = store(5);
    let mut full = FusionModel::new(&ds.schema, H, config(Architecture::Full, BackboneKind::Star, Baseline::None), 1)
        .unwrap();
    full.alpha.value.set(0, 0, 0.0);
    let know = Knowledge::for_model(&vs, &full).unwrap();
    let mut variant = full.with_architecture(Architecture::UserBottomOnly).unwrap();
    let a = full.predict(&batch, &know).unwrap();
    let b = variant.predict(&batch, &know).unwrap();
    assert_eq!(a, b);
}

#[test]
fn alpha_one_with_identity_user_stack_reproduces_domain_parallel_only() {
    let ds = dataset();
    let batch = Batch::all(&ds);
    let vs = store(5);
    let mut cfg = config(Architecture::Full, BackboneKind::Mmoe, Baseline::None);
    cfg.k_layers = 1;
    cfg.bottom_residual = false;
    let mut full = FusionModel::new(&ds.schema, H, cfg, 4).unwrap();
    full.alpha.value.set(0, 0, 1.0);
    // Trunk and head weights zero, head bias = flattened identity.
    let user = full.user.as_mut().unwrap();
    let d_e = user.dims().input_width();
    user.meta.head_w.w.value.fill(0.0);
    user.meta.head_b.w.value.fill(0.0);
    user.meta.head_b.b.value.fill(0.0);
    let eye = Matrix::identity(d_e);
    user.meta.head_w.b.value.as_mut_slice().copy_from_slice(eye.as_slice());
    let know = Knowledge::for_model(&vs, &full).unwrap();
    let mut variant = full.with_architecture(Architecture::DomainParallelOnly).unwrap();
    assert_eq!(full.predict(&batch, &know).unwrap(), variant.predict(&batch, &know).unwrap());
}

#[test]
fn incompatible_rewiring_is_rejected() {
    let ds = dataset();
    let m = FusionModel::new(&ds.schema, H, config(Architecture::Full, BackboneKind::Star, Baseline::None), 1).unwrap();
    assert!(m.with_architecture(Architecture::UserParallelOnly).is_err());
    let bb = m.with_architecture(Architecture::BackboneOnly).unwrap();
    assert!(bb.user.is_none() && bb.scenario.is_none());
}

#[test]
fn user_vectors_only_affect_their_rows() {
    let ds = dataset();
    let batch = Batch::all(&ds);
    let mut vs = store(9);
    let mut m = FusionModel::new(&ds.schema, H, config(Architecture::Full, BackboneKind::Star, Baseline::None), 3)
        .unwrap();
    let before = m.predict(&batch, &Knowledge::for_model(&vs, &m).unwrap()).unwrap();
    vs.insert(Scope::User, 2, vec![3.0, -1.0, 0.5, 2.0]).unwrap();
    let after = m.predict(&batch, &Knowledge::for_model(&vs, &m).unwrap()).unwrap();
    for (r, s) in batch.samples.iter().enumerate() {
        if s.user() == 2 {
            assert_ne!(before[r], after[r]);
        } else {
            assert_eq!(before[r], after[r]);
        }
    }
}

#[test]
fn neutral_epnet_gate_is_identity() {
    let ds = dataset();
    let batch = Batch::all(&ds);
    let vs = store(2);
    let mut m = FusionModel::new(&ds.schema, H, config(Architecture::Full, BackboneKind::Ple, Baseline::Epnet), 3)
        .unwrap();
    let last = m.epnet.as_mut().unwrap().layers.last_mut().unwrap();
    last.w.value.fill(0.0);
    last.b.value.fill(0.0);
    let know = Knowledge::for_model(&vs, &m).unwrap();
    let gated = m.predict(&batch, &know).unwrap();
    m.epnet = None;
    assert_eq!(gated, m.predict(&batch, &know).unwrap());
}

#[test]
fn missing_user_vector_is_lookup_error() {
    let ds = dataset();
    let mut vs = VectorStore::new(H);
    vs.insert(Scope::Scenario, 0, vec![0.0; H]).unwrap();
    vs.insert(Scope::Scenario, 1, vec![0.0; H]).unwrap();
    let m = FusionModel::new(&ds.schema, H, config(Architecture::Full, BackboneKind::Star, Baseline::None), 3).unwrap();
    let err = Knowledge::for_model(&vs, &m).unwrap_err();
    assert!(err.to_string().contains("user 0"), "{err}");
    vs.fallback = crate::knowledge::FallbackPolicy::Zero;
    assert!(Knowledge::for_model(&vs, &m).is_ok());
}

#[test]
fn wrong_knowledge_dim_is_rejected() {
    let ds = dataset();
    let m = FusionModel::new(&ds.schema, H + 1, ModelConfig::default(), 3).unwrap();
    assert!(Knowledge::for_model(&store(1), &m).unwrap_err().to_string().contains("H=5"));
}

#[test]
fn alpha_only_trains_with_a_parallel_branch() {
    let ds = dataset();
    let names = |arch| {
        let m = FusionModel::new(&ds.schema, H, config(arch, BackboneKind::Star, Baseline::None), 1).unwrap();
        let mut v = Vec::new();
        m.visit_params(&mut |p| v.push(p.name.clone()));
        v
    };
    assert!(names(Architecture::Full).contains(&"alpha".to_string()));
    assert!(!names(Architecture::UserBottomOnly).contains(&"alpha".to_string()));
    assert!(!names(Architecture::BackboneOnly).iter().any(|n| n.contains("meta")));
}

#[test]
fn architecture_names_round_trip() {
    for a in Architecture::ALL {
        assert_eq!(a.name().parse::<Architecture>().unwrap(), a);
    }
    assert!("both".parse::<Architecture>().unwrap_err().contains("domain_parallel_only"));
}

#[test]
fn fresh_residual_stack_is_identity() {
    let ds = dataset();
    let batch = Batch::all(&ds);
    let mut cfg = config(Architecture::UserBottomOnly, BackboneKind::Star, Baseline::None);
    cfg.meta_dynamic_scale = 0.0;
    let mut m = FusionModel::new(&ds.schema, H, cfg, 6).unwrap();
    let know = Knowledge::for_model(&store(4), &m).unwrap();
    let mut bare = m.with_architecture(Architecture::BackboneOnly).unwrap();
    assert_eq!(m.predict(&batch, &know).unwrap(), bare.predict(&batch, &know).unwrap());
}
