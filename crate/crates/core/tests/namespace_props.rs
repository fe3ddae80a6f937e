use std::collections::{BTreeMap, BTreeSet};

use planout::dsl::parse;
use planout::namespace::{ExperimentStatus, NamespaceError};
use planout::{NamespaceManager, Overrides, Inputs, ScriptIR, Value};
use proptest::prelude::*;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

const SEGMENTS: u32 = 200;

fn script() -> ScriptIR {
    parse("color = uniformChoice(choices=['a', 'b'], unit=userid);").unwrap()
}

#[derive(Debug, Clone)]
enum Op {
    Alloc(u32),
    Dealloc(usize),
    Launch(i64),
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        3 => (1u32..60).prop_map(Op::Alloc),
        2 => (0usize..1000).prop_map(Op::Dealloc),
        1 => any::<i64>().prop_map(Op::Launch),
    ]
}

/// Expected view of one experiment: its segments and whether it holds them.
#[derive(Default)]
struct Model {
    exps: Vec<(String, BTreeSet<u32>, bool)>,
}

impl Model {
    fn used(&self) -> u32 {
        self.exps.iter().filter(|e| e.2).map(|e| e.1.len() as u32).sum()
    }
}

fn check(m: &NamespaceManager, model: &Model) -> Result<(), TestCaseError> {
    let state = m.snapshot();
    let ns = state.namespace("ns").unwrap();
    let map = ns.segment_map();
    prop_assert_eq!(map.len() as u32, SEGMENTS);
    let mut owner: BTreeMap<u32, &str> = BTreeMap::new();
    for (name, segs, active) in &model.exps {
        let def = ns.experiment(name).unwrap();
        prop_assert_eq!(&def.segments, segs);
        prop_assert_eq!(def.is_active(), *active);
        if *active {
            for s in segs {
                // Exclusivity: no segment owned by two live experiments.
                prop_assert!(owner.insert(*s, name).is_none());
            }
        }
    }
    for (s, slot) in map.iter().enumerate() {
        prop_assert_eq!(slot.as_deref(), owner.get(&(s as u32)).copied());
    }
    prop_assert_eq!(ns.free_segments(), SEGMENTS - model.used());
    Ok(())
}

fn run(ops: &[Op], m: &NamespaceManager) -> Result<Model, TestCaseError> {
    m.create_namespace(None, "ns", "userid", SEGMENTS, BTreeMap::new()).unwrap();
    let ir = script();
    let mut model = Model::default();
    for (i, op) in ops.iter().enumerate() {
        let v = m.version();
        match op {
            Op::Alloc(n) => {
                let name = format!("e{i}");
                let free = SEGMENTS - model.used();
                match m.allocate(Some(v), "ns", &name, &ir, *n) {
                    Ok(nv) => {
                        prop_assert!(*n <= free);
                        prop_assert_eq!(nv, v + 1);
                        let segs = m.snapshot().namespace("ns").unwrap().experiment(&name).unwrap().segments.clone();
                        prop_assert_eq!(segs.len() as u32, *n);
                        model.exps.push((name, segs, true));
                    }
                    Err(NamespaceError::InsufficientSegments { requested, available }) => {
                        prop_assert!(*n > free);
                        prop_assert_eq!((requested, available), (*n, free));
                        prop_assert_eq!(m.version(), v);
                    }
                    Err(e) => return Err(TestCaseError::fail(e.to_string())),
                }
            }
            Op::Dealloc(k) => {
                if model.exps.is_empty() {
                    continue;
                }
                let idx = k % model.exps.len();
                let name = model.exps[idx].0.clone();
                let (_, prior) = m.deallocate(Some(v), "ns", &name).unwrap();
                let was_active = model.exps[idx].2;
                prop_assert_eq!(prior == ExperimentStatus::Active, was_active);
                model.exps[idx].2 = false;
            }
            Op::Launch(x) => {
                m.set_launch_value(Some(v), "ns", "color", Value::Int(*x)).unwrap();
            }
        }
        check(m, &model)?;
    }
    Ok(model)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn segments_stay_exclusive(ops in prop::collection::vec(op(), 1..80)) {
        run(&ops, &NamespaceManager::in_memory())?;
    }
}

#[test]
fn long_admin_sequence_is_consistent_and_replays() {
    let mut rng = StdRng::seed_from_u64(0x5eed);
    let ops: Vec<Op> = (0..500)
        .map(|_| match rng.gen_range(0..6) {
            0..=2 => Op::Alloc(rng.gen_range(1..40)),
            3..=4 => Op::Dealloc(rng.gen_range(0..10_000)),
            _ => Op::Launch(rng.gen()),
        })
        .collect();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("store.jsonl");
    let m = NamespaceManager::open(&path).unwrap();
    let model = run(&ops, &m).unwrap();

    // Every unit lands in the experiment that owns its segment.
    let state = m.snapshot();
    let ns = state.namespace("ns").unwrap();
    for u in 0..2_000i64 {
        let unit = Value::Int(u);
        let seg = ns.segment_of(&unit).unwrap();
        let a = m.assign("ns", &unit, &Inputs::new(), &Overrides::new()).unwrap();
        assert_eq!(a.segment, seg);
        assert_eq!(a.experiment.as_deref(), ns.segment_map()[seg as usize].as_deref());
    }

    // Replay from disk gives the same namespace.
    drop(m);
    let reopened = NamespaceManager::open(&path).unwrap();
    check(&reopened, &model).unwrap();
    let a = reopened.snapshot();
    assert_eq!(a.version, state.version);
    assert_eq!(a.namespace("ns").unwrap().segment_map(), ns.segment_map());
    assert_eq!(a.namespace("ns").unwrap().launch_defaults(), ns.launch_defaults());
}
