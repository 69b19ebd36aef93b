//! Trains the default toy configuration and prints held-out metrics.

use std::time::Instant;

use vlpert_core::data::generate_corpus;
use vlpert_core::eval::{probe_model, random_structure_baseline, retrieval_eval, structure_eval, ProbeConfig};
use vlpert_core::perturbation::TextPipeline;
use vlpert_core::train::{epoch_means, train, TrainConfig};

fn main() -> vlpert_core::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let beta: f64 = args.get(1).map_or(0.1, |s| s.parse().expect("beta"));
    let epochs: usize = args.get(2).map_or(50, |s| s.parse().expect("epochs"));
    let seed: u64 = args.get(3).map_or(0, |s| s.parse().expect("seed"));
    let train_set = generate_corpus(512, 32, 1000 + seed)?;
    let held_out = generate_corpus(469, 32, 2000 + seed)?;
    let mut cfg = TrainConfig { epochs, ..TrainConfig::default() };
    cfg.weights.beta = beta;
    cfg.seeds.init = 10 + seed;
    cfg.seeds.data = 20 + seed;
    cfg.seeds.perturbation = 30 + seed;
    let start = Instant::now();
    let out = train(cfg, &train_set)?;
    let means = epoch_means(&out.history);
    println!("trained in {:.1}s", start.elapsed().as_secs_f64());
    for (e, m) in means.iter().step_by(5) {
        println!("epoch {e}: {m:.4}");
    }
    let pipeline = TextPipeline::default();
    let r = retrieval_eval(&held_out[..128], &out.model, &pipeline, &[1, 5, 10])?;
    println!("retrieval {:?} {:?}", r.image_to_text, r.text_to_image);
    let s = structure_eval(&held_out, &out.model, &pipeline, 77)?;
    println!("structure {} {:?}", s.accuracy, s.per_rule);
    println!("baseline {}", random_structure_baseline(&held_out, &pipeline, 77)?);
    let p = probe_model(&held_out, &out.model, &ProbeConfig::default())?;
    println!("probe {:?}", p.accuracy);
    Ok(())
}
