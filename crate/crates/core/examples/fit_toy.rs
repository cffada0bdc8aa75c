//! Regenerates the shipped toy weights: seeded init, 200 ADAM steps of
//! cross-entropy on procedural scenes, then saves to `assets/toy`.
//!
//!     cargo run --release -p zmask --example fit_toy [-- <out_dir>]

use zmask::metrics::Confusion;
use zmask::toy::fit::fit_toy;
use zmask::toy::{corpus, ToySegNet, N_CLASSES};

const SEED: u64 = 7;
const STEPS: usize = 200;
const LR: f64 = 0.003;
/// Training scenes come from seeds disjoint from the experiment corpora.
const FIT_SEEDS: u64 = 900_000;

fn main() -> zmask::Result<()> {
    let out = std::env::args().nth(1).map(Into::into).unwrap_or_else(ToySegNet::golden_dir);
    let scenes = corpus(FIT_SEEDS, 64);
    let mut net = ToySegNet::init(SEED);
    let losses = fit_toy(&mut net, &scenes, STEPS, LR)?;
    for (i, l) in losses.iter().enumerate().step_by(20) {
        println!("step {i:4}  loss {l:.4}");
    }
    let mut conf = Confusion::new(N_CLASSES);
    for s in corpus(0, 32) {
        conf.add(&net.predict(&s.image)?, &s.labels, None)?;
    }
    println!("held-out mIoU {:.4}  per class {:?}", conf.miou(), conf.class_iou());
    net.save(&out, SEED)?;
    println!("saved to {}", out.display());
    Ok(())
}
