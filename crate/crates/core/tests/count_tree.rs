mod common;

use optrf::rng::seeded;
use optrf::store::CellBits;
use optrf::{CountTree, GridSpec};
use proptest::prelude::*;
use rand::Rng;

fn check_parent_sums(tree: &CountTree) {
    let depth = tree.spec().depth();
    assert_eq!(tree.count(&CellBits::new()), tree.total());
    for (node, count) in tree.nodes() {
        if node.len() < depth {
            let kids = tree.count(&node.child(false)) + tree.count(&node.child(true));
            assert_eq!(kids, count, "node {node}");
        }
        assert!(count > 0);
    }
}

fn arb_points(dim: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-1.0f64..=1.0, dim), 1..120)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn parent_sum_and_touch_count(
        pts in arb_points(2),
        delta in prop::sample::select(vec![0.05, 0.13, 0.5, 1.0]),
    ) {
        let spec = GridSpec::new(vec![-1.0, -1.0], vec![1.0, 1.0], delta).unwrap();
        let mut tree = CountTree::new(spec);
        for p in &pts {
            let touched = tree.increment(p).unwrap();
            prop_assert_eq!(touched, tree.spec().depth() + 1);
        }
        prop_assert_eq!(tree.total(), pts.len() as u64);
        check_parent_sums(&tree);
    }

    #[test]
    fn dump_round_trip_preserves_every_node(pts in arb_points(3)) {
        let spec = GridSpec::new(vec![-1.0; 3], vec![1.0; 3], 0.25).unwrap();
        let mut tree = CountTree::new(spec);
        for p in &pts {
            tree.increment(p).unwrap();
        }
        let mut buf = Vec::new();
        tree.write_dump(&mut buf).unwrap();
        let back = CountTree::read_dump(&mut buf.as_slice()).unwrap();
        let a: Vec<_> = tree.nodes().map(|(k, v)| (k.clone(), v)).collect();
        let b: Vec<_> = back.nodes().map(|(k, v)| (k.clone(), v)).collect();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn points_land_in_their_cell(x in -3.0f64..5.0, y in 0.0f64..2.0) {
        let spec = GridSpec::new(vec![-3.0, 0.0], vec![5.0, 2.0], 0.1).unwrap();
        let cell = spec.grid_index(&[x, y]).unwrap();
        let c = spec.cell_center(&cell).unwrap();
        prop_assert!((c[0] - x).abs() <= 0.05 + 1e-9);
        prop_assert!((c[1] - y).abs() <= 0.05 + 1e-9);
    }
}

#[test]
fn sampling_matches_leaf_counts() {
    let mut rng = seeded(21);
    let spec = GridSpec::new(vec![0.0], vec![1.0], 1.0 / 64.0).unwrap();
    let mut tree = CountTree::new(spec);
    for _ in 0..500 {
        let u: f64 = rng.gen();
        tree.increment(&[u * u]).unwrap();
    }
    let leaves = tree.leaf_distribution();
    let total = tree.total() as f64;
    let probs: Vec<f64> = leaves.iter().map(|(_, c)| *c as f64 / total).collect();
    let mut observed = vec![0u64; leaves.len()];
    for _ in 0..50_000 {
        let (cell, _) = tree.sample_cell(&mut rng).unwrap();
        let i = leaves.binary_search_by(|(c, _)| c.cmp(&cell)).unwrap();
        observed[i] += 1;
    }
    let p = common::chi_square_p(&observed, &probs);
    assert!(p > 1e-3, "p = {p}");
}
