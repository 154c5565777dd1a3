//! Building a count tree over a point cloud and drawing cells by count.

use optrf::experiments::{gen_inputs, reference_sphere_task};
use optrf::rng::seeded;
use optrf::{CountTree, GridSpec};

fn main() -> optrf::Result<()> {
    let task = reference_sphere_task(0.5)?;
    let pts = gen_inputs(&task, 1000, &mut seeded(3));
    let spec = GridSpec::new(vec![-1.0, -1.0], vec![1.0, 1.0], 0.125)?;
    let mut tree = CountTree::new(spec);
    let mut touched = 0;
    for x in pts.rows() {
        touched += tree.increment(x)?;
    }
    println!(
        "{} points, depth {}, {} stored nodes, {} node updates",
        tree.total(),
        tree.spec().depth(),
        tree.node_count(),
        touched
    );
    println!("{} occupied leaves", tree.leaf_distribution().len());
    let mut rng = seeded(4);
    for _ in 0..5 {
        let (cell, center) = tree.sample_cell(&mut rng)?;
        println!("cell {cell} centre ({:.4}, {:.4})", center[0], center[1]);
    }
    Ok(())
}
