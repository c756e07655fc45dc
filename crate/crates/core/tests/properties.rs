use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use smpf::evolve::{random_tree, rank_records};
use smpf::interpret::{importance_order, ranks};
use smpf::optimize::descend;
use smpf::*;

fn class() -> impl Strategy<Value = PrimitiveClass> {
    prop::sample::select(PrimitiveClass::ALL.to_vec())
}

fn primitive(bound: f64) -> impl Strategy<Value = Primitive> {
    (class(), prop::array::uniform4(-bound..bound))
        .prop_map(|(c, p)| Primitive::new(c, &p[..c.arity()]))
}

fn tree_from_seed(seed: u64) -> Tree {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = SmpfConfig {
        min_nodes: 1,
        max_nodes: rng.random_range(1..=4),
        hidden_layers: rng.random_range(1..=2),
        edge_prob: rng.random_range(0.2..=1.0),
        function_set: FunctionSet::new(PrimitiveClass::ALL.to_vec()).unwrap(),
        ..SmpfConfig::default()
    };
    let d = rng.random_range(1..=5);
    random_tree(&cfg, d, &mut rng)
}

fn point(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.random::<f64>()).collect()
}

proptest! {
    #[test]
    fn primitives_stay_finite(f in primitive(1e3), x in -1e6f64..1e6) {
        prop_assert!(f.eval(x).is_finite());
        prop_assert!(f.deriv_x(x).is_finite());
        prop_assert!(f.grad_params(x).iter().all(|g| g.is_finite()));
    }

    #[test]
    fn initialization_is_a_function_of_the_stream(c in class(), seed in any::<u64>()) {
        let a = Primitive::random(c, &mut ChaCha8Rng::seed_from_u64(seed));
        let b = Primitive::random(c, &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(a, b);
    }

    #[test]
    fn primitive_render_round_trip(f in primitive(5.0), x in -5f64..5.0, precision in 3usize..10) {
        let expr = Expr::parse(&f.render("x_0", precision)).unwrap();
        let exact = f.eval(x);
        let sensitivity: f64 = f.grad_params(x).iter().map(|g| g.abs()).sum();
        let bound = sensitivity * 10f64.powi(-(precision as i32)) + 1e-12 * (1.0 + exact.abs());
        let p = f.params();
        let guarded = match f.class() {
            PrimitiveClass::LogAffine => (p[1] * x + p[2]).abs() < 1e-2,
            PrimitiveClass::RationalLinOverQuad => (p[1] * x * x + p[2] * x + p[3]).abs() < 1e-2,
            PrimitiveClass::Mobius => (p[2] * x + p[3]).abs() < 1e-2,
            _ => false,
        };
        prop_assume!(!guarded);
        prop_assert!((expr.eval(&[x]) - exact).abs() <= bound, "{} at {}", f.render("x_0", precision), x);
    }

    #[test]
    fn eval_and_backward_agree(seed in any::<u64>()) {
        let t = tree_from_seed(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        for _ in 0..5 {
            let x = point(&mut rng, t.dim());
            prop_assert_eq!(t.eval(&x).unwrap().to_bits(), t.backward(&x).unwrap().0.to_bits());
        }
    }

    #[test]
    fn disconnected_features_have_zero_partials(seed in any::<u64>()) {
        let t = tree_from_seed(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 2);
        let x = point(&mut rng, t.dim() + 2);
        // Two extra features nothing points at.
        let wide = Tree::new(t.dim() + 2, t.layers().to_vec()).unwrap();
        let tape = wide.backward(&x).unwrap().1;
        prop_assert_eq!(tape.inputs[t.dim()], 0.0);
        prop_assert_eq!(tape.inputs[t.dim() + 1], 0.0);
        for (j, connected) in wide.connected_features().iter().enumerate() {
            if !connected {
                prop_assert_eq!(tape.inputs[j], 0.0);
            }
        }
    }

    #[test]
    fn serialization_preserves_semantics(seed in any::<u64>()) {
        let t = tree_from_seed(seed);
        let back = Tree::from_json(&t.to_json()).unwrap();
        prop_assert_eq!(&back, &t);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 3);
        for _ in 0..10 {
            let x = point(&mut rng, t.dim());
            prop_assert_eq!(back.eval(&x).unwrap().to_bits(), t.eval(&x).unwrap().to_bits());
        }
    }

    #[test]
    fn training_keeps_structure_and_is_reproducible(seed in any::<u64>(), k in 0usize..6) {
        let t = tree_from_seed(seed);
        let domain = vec![(0.0, 1.0); t.dim()];
        let oracle = Oracle64::synthetic(|x| x.iter().map(|v| v.sin()).sum(), domain).unwrap();
        let a = train_tree(&t, &oracle, k, 0.05, 32, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let b = train_tree(&t, &oracle, k, 0.05, 32, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(a.slots(), t.slots());
        prop_assert_eq!(a.edge_count(), t.edge_count());
        let classes = |t: &Tree| t.functions().map(|f| f.class()).collect::<Vec<_>>();
        prop_assert_eq!(classes(&a), classes(&t));
    }

    #[test]
    fn fitness_grows_with_edges(mse in 0.0f64..10.0, e in 1usize..100, extra in 1usize..10, lambda in 1e-6f64..1.0) {
        let t = tree_from_seed(e as u64);
        let batch = Batch::new(t.dim(), vec![0.5; t.dim()], vec![mse.sqrt()]).unwrap();
        let r = fitness(&t, &batch, lambda).unwrap();
        prop_assert!(r.fitness >= lambda * r.edges as f64);
        let more = r.mse + lambda * (r.edges + extra) as f64;
        prop_assert!(more >= r.fitness);
    }

    #[test]
    fn ranking_ignores_positive_scale(g in prop::collection::vec(-10f64..10.0, 1..8), s in 1e-3f64..1e3) {
        let scaled: Vec<f64> = g.iter().map(|v| v * s).collect();
        prop_assert_eq!(importance_order(&g), importance_order(&scaled));
        prop_assert_eq!(ranks(&g), ranks(&scaled));
    }

    #[test]
    fn gradient_at_is_the_tape(seed in any::<u64>()) {
        let t = tree_from_seed(seed);
        let x = point(&mut ChaCha8Rng::seed_from_u64(seed), t.dim());
        prop_assert_eq!(gradient_at(&t, &x).unwrap(), t.backward(&x).unwrap().1.inputs);
    }

    #[test]
    fn survivors_are_the_fittest(fit in prop::collection::vec(0.0f64..1.0, 4..20), s in 1usize..4) {
        let records: Vec<Record> = fit
            .iter()
            .enumerate()
            .map(|(i, f)| FitnessRecord { mse: *f, edges: i % 3 + 2, fitness: *f })
            .collect();
        let order = rank_records(&records);
        let kept: Vec<f64> = order[..s].iter().map(|&i| records[i].fitness).collect();
        let dropped: Vec<f64> = order[s..].iter().map(|&i| records[i].fitness).collect();
        let worst_kept = kept.iter().copied().fold(f64::MIN, f64::max);
        prop_assert!(dropped.iter().all(|&f| f >= worst_kept));
    }

    #[test]
    fn expression_display_reparses(seed in any::<u64>(), precision in 1usize..8) {
        let t = tree_from_seed(seed);
        let e = Expr::parse(&t.render(precision)).unwrap();
        prop_assert_eq!(Expr::parse(&e.to_string()).unwrap(), e);
    }
}

#[test]
fn small_steps_do_not_increase_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut trials, mut improved) = (0, 0);
    while trials < 200 {
        let t = tree_from_seed(rng.random());
        let domain = vec![(0.0, 1.0); t.dim()];
        let oracle = Oracle64::synthetic(|x| x.iter().product::<f64>().cos(), domain).unwrap();
        let batch = sample_batch(&oracle, 64, &mut rng);
        let before = mse(&t, &batch).unwrap();
        if !before.is_finite() || before > 1e12 {
            continue;
        }
        trials += 1;
        let mut stepped = t.clone();
        descend(&mut stepped, &batch, 1, 1e-4).unwrap();
        if mse(&stepped, &batch).unwrap() <= before {
            improved += 1;
        }
    }
    assert!(improved >= 190, "{improved}/200");
}

#[test]
fn affine_metamodel_has_zero_hessian() {
    let lin = |a: f64, c: f64| Primitive::new(PrimitiveClass::Poly3, &[0.0, 0.0, a, c]);
    let t = Tree::new(
        3,
        vec![vec![Node::over_features(lin(1.5, 0.2), [(0, lin(2.0, 1.0)), (2, lin(-1.0, 0.0))])]],
    )
    .unwrap();
    let h = hessian_at(&t, &[0.3, 0.6, 0.9]).unwrap();
    assert!(h.iter().flatten().all(|v| v.abs() < 1e-5), "{h:?}");
}

#[test]
fn deleting_an_edge_drops_the_count_by_one() {
    let cfg = SmpfConfig {
        p_del: 1.0,
        mutation_actions: 1,
        min_nodes: 2,
        max_nodes: 3,
        edge_prob: 1.0,
        ..SmpfConfig::default()
    };
    for seed in 0..50 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t: Tree = random_tree(&cfg, 4, &mut rng);
        let m = smpf::evolve::mutate(&t, &cfg, &mut rng);
        assert_eq!(m.edge_count(), t.edge_count() - 1);
    }
}
