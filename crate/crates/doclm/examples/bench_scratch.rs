use std::time::Instant;

use doclm::data::{synth_generate, to_task_samples, SyntheticSpec};
use doclm::decoder::DecoderConfig;
use doclm::encoder::EncoderConfig;
use doclm::model::ModelBundle;
use doclm::prompts::TaskKind;
use doclm::train::{evaluate, train, TrainConfig, TrainData};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let n_docs: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(8);
    let epochs: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(10);
    let lr: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(5e-3);
    let batch: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(4);
    let clip: f64 = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(1.0);
    let tasks: String = args.get(6).cloned().unwrap_or_else(|| "c".into());

    let spec = SyntheticSpec {
        n_docs,
        n_classes: 4,
        seed: 7,
        ..SyntheticSpec::default()
    };
    let docs = synth_generate(&spec).unwrap();
    let mut vrdu = Vec::new();
    if tasks.contains('c') {
        vrdu.extend(to_task_samples(&docs, TaskKind::Classification, "s", None).unwrap().samples);
    }
    if tasks.contains('e') {
        vrdu.extend(to_task_samples(&docs, TaskKind::Extraction, "s", None).unwrap().samples);
    }
    if tasks.contains('q') {
        vrdu.extend(to_task_samples(&docs, TaskKind::DocQa, "s", None).unwrap().samples);
    }
    println!("{} samples, tasks {tasks}", vrdu.len());
    let data = TrainData { docs: docs.clone(), vrdu, nlp: Vec::new(), val: None };
    let heads: usize = std::env::var("HEADS").ok().and_then(|s| s.parse().ok()).unwrap_or(4);
    let mut model = ModelBundle::init(
        EncoderConfig { n_layers: 1, n_heads: heads, ..EncoderConfig::default() },
        DecoderConfig { n_layers: 1, n_heads: heads, ..DecoderConfig::default() },
        7,
    )
    .unwrap();
    let cfg = TrainConfig {
        batch_size: batch,
        epochs,
        lr_peak: lr,
        seed: 7,
        grad_clip: clip,
        max_steps: Some(500),
        ..TrainConfig::default()
    };
    let t0 = Instant::now();
    let trace = train(&mut model, &data, &cfg, None).unwrap();
    let train_secs = t0.elapsed().as_secs_f64();
    let spe = trace.len() / epochs.max(1);
    let tail: Vec<f64> = trace.iter().rev().take(spe.max(1)).map(|r| r.loss).collect();
    println!(
        "steps {}  {:.0}s  final-epoch loss {:.4}",
        trace.len(),
        train_secs,
        tail.iter().sum::<f64>() / tail.len() as f64,
    );
    let t1 = Instant::now();
    let reports = evaluate(&model, &data.docs, &data.vrdu, 64).unwrap();
    for r in &reports {
        println!("  {:?} {} = {:.4} (malformed {})", r.task, r.metric, r.value, r.malformed_count);
    }
    println!("eval {:.0}s, total {:.0}s", t1.elapsed().as_secs_f64(), t0.elapsed().as_secs_f64());
}
