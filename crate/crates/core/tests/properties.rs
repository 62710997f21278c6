use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use framesync::affine::AffineTransform;
use framesync::graph::{self, FrameGraph};
use framesync::harness::instance::{instance_from_json, instance_to_json, make_instance, random_orthogonal};
use framesync::harness::verify::{gaussian, random_invertible};
use framesync::harness::{InstanceSpec, TransformClass};
use framesync::matrices::{self, EdgeTransforms};
use framesync::{linalg, objective, sync_direct};

fn qsc_graph(n: usize, rho: f64, rng: &mut ChaCha8Rng) -> (FrameGraph, Vec<(usize, usize)>) {
    let (tree, dens) = graph::generate_min_qsc(n, rng);
    (graph::densify(&tree, &dens.qsc_edges, rho, rng).unwrap(), dens.qsc_edges)
}

fn noisy_instance(n: usize, d: usize, rho: f64, seed: u64) -> (FrameGraph, EdgeTransforms, Vec<DMatrix<f64>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (g, _) = qsc_graph(n, rho, &mut rng);
    let frames: Vec<_> = (0..n).map(|_| random_invertible(d, &mut rng)).collect();
    let t = EdgeTransforms::from_frames(&g, &frames).map(|m| m + gaussian(d, d, &mut rng) * 0.3);
    (g, t, frames)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn generated_graphs_are_qsc_with_valid_density(n in 2usize..25, rho in 0.0f64..=1.0, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (g, tree) = qsc_graph(n, rho, &mut rng);
        prop_assert!(g.is_qsc());
        prop_assert!(g.contains_all(&tree));
        let density = graph::density(&g, &tree);
        prop_assert!((0.0..=1.0).contains(&density));
        prop_assert!(density >= rho || g.is_complete());
    }

    #[test]
    fn graph_json_round_trips(n in 2usize..15, rho in 0.0f64..1.0, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (g, tree) = qsc_graph(n, rho, &mut rng);
        let (back, qsc) = graph::graph_from_json(&graph::graph_to_json(&g, Some(&tree))).unwrap();
        prop_assert_eq!(back, g);
        prop_assert_eq!(qsc.unwrap(), tree);
    }

    #[test]
    fn objective_is_left_invariant(n in 2usize..8, d in 2usize..5, seed in any::<u64>()) {
        let (g, t, frames) = noisy_instance(n, d, 0.5, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let q = random_invertible(d, &mut rng);
        let moved: Vec<_> = frames.iter().map(|f| &q * f).collect();
        let a = objective::objective_g(&g, &t, &frames).unwrap();
        let b = objective::objective_g(&g, &t, &moved).unwrap();
        prop_assert!((a - b).abs() <= 1e-8 * a.max(1.0));
    }

    #[test]
    fn consistent_frames_span_the_kernel_of_z_and_h(n in 2usize..10, d in 2usize..5, rho in 0.0f64..1.0, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (g, _) = qsc_graph(n, rho, &mut rng);
        let frames: Vec<_> = (0..n).map(|_| random_invertible(d, &mut rng)).collect();
        let t = EdgeTransforms::from_frames(&g, &frames);
        let x = linalg::stack_rows(&objective::frame_inverses(&frames).unwrap());
        for m in [matrices::build_z(&g, &t).unwrap(), matrices::build_h(&g, &t).unwrap()] {
            let m = m.to_dense();
            prop_assert!((&m * &x).norm() <= 1e-9 * m.norm() * x.norm());
        }
    }

    #[test]
    fn h_is_symmetric_positive_semidefinite(n in 2usize..8, d in 2usize..4, seed in any::<u64>()) {
        let (g, t, _) = noisy_instance(n, d, 0.6, seed);
        let h = matrices::build_h(&g, &t).unwrap().to_dense();
        prop_assert!((&h - h.transpose()).norm() <= 1e-12 * h.norm());
        let min = h.symmetric_eigenvalues().min();
        prop_assert!(min >= -1e-10 * h.norm());
    }

    #[test]
    fn solvers_return_left_equivalent_frames_under_gauge_change(n in 3usize..8, seed in any::<u64>()) {
        // Relabeling frames by a global left multiplier leaves the pairwise set fixed.
        let (g, t, _) = noisy_instance(n, 3, 0.5, seed);
        let s = sync_direct::solve_h(&g, &t).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 2);
        let moved = s.left_multiply(&random_invertible(3, &mut rng));
        prop_assert!(s.left_equivalent(&moved, 1e-8));
        let (p, q) = (s.pairwise(&g), moved.pairwise(&g));
        for ((i, j), m) in p.iter() {
            prop_assert!((q.get(i, j).unwrap() - m).norm() <= 1e-8 * m.norm().max(1.0));
        }
    }

    #[test]
    fn spanning_trees_are_synchronized_exactly(n in 2usize..20, d in 2usize..5, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (tree, _) = graph::generate_min_qsc(n, &mut rng);
        let mut t = EdgeTransforms::new(d);
        for (i, j) in tree.edges() {
            t.insert(i, j, random_invertible(d, &mut rng)).unwrap();
        }
        for s in [sync_direct::solve_z(&tree, &t).unwrap(), sync_direct::solve_h(&tree, &t).unwrap()] {
            prop_assert!(objective::objective_g_prime(&tree, &t, &s.frames).unwrap() <= 1e-10);
        }
    }

    #[test]
    fn polar_projection_is_orthogonal_and_idempotent(d in 1usize..7, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = random_invertible(d, &mut rng);
        let p = linalg::project_orthogonal(&m);
        prop_assert!(linalg::orthogonality_defect(&p) <= 1e-12);
        prop_assert!((linalg::project_orthogonal(&p) - &p).norm() <= 1e-12);
        // No other orthogonal matrix tried here is closer.
        let other = random_orthogonal(d, &mut rng);
        prop_assert!((&m - &p).norm() <= (&m - other).norm() + 1e-12);
    }

    #[test]
    fn affine_inverse_and_composition(d in 1usize..5, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = AffineTransform { q: random_invertible(d, &mut rng), t: DVector::from_fn(d, |r, _| r as f64 - 1.5) };
        let b = AffineTransform { q: random_invertible(d, &mut rng), t: gaussian(d, 1, &mut rng).column(0).into_owned() };
        let id = a.then(&a.inverse()).compose();
        prop_assert!((id - DMatrix::identity(d + 1, d + 1)).norm() <= 1e-10);
        prop_assert!((a.then(&b).compose() - a.compose() * b.compose()).norm() <= 1e-10 * (1.0 + a.compose().norm() * b.compose().norm()));
        let back = AffineTransform::split(&a.compose()).unwrap();
        prop_assert_eq!(back, a);
    }

    #[test]
    fn instance_json_round_trips(n in 2usize..8, d in 2usize..4, class_ix in 0usize..4, seed in any::<u64>()) {
        let class = [TransformClass::Orthogonal, TransformClass::Linear, TransformClass::Affine, TransformClass::Euclidean][class_ix];
        let inst = make_instance(&InstanceSpec::new(n, d, 0.2, 0.4, class, seed)).unwrap();
        let doc = instance_to_json(&inst);
        let back = instance_from_json(&doc).unwrap();
        prop_assert_eq!(&back.graph, &inst.graph);
        prop_assert_eq!(&back.transforms, &inst.transforms);
        prop_assert_eq!(instance_to_json(&back), doc);
    }
}
