use vlcl_core::eval::{avg_final_accuracy, avg_forgetting};
use vlcl_core::losses::{LossFlags, LossWeights};
use vlcl_core::model::{build_model, ModelConfig};
use vlcl_core::synthdata::{default_specs, generate_task_stream};
use vlcl_core::trainer::{train_continual, TrainConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let lr: f64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(3e-3);
    let flags_s = args.get(2).cloned().unwrap_or_else(|| "qvp".into());
    let seed: u64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(0);
    let flags = LossFlags {
        use_q: flags_s.contains('q'),
        use_v: flags_s.contains('v'),
        use_p: flags_s.contains('p'),
        prompts_in_aux: !flags_s.contains('x'),
    };
    let mcfg = ModelConfig::default();
    let train_size: usize = args.get(6).map(|s| s.parse().unwrap()).unwrap_or(256);
    let mut specs = default_specs();
    for sp in &mut specs {
        sp.train_size = train_size;
    }
    let stream = generate_task_stream(&specs, &[0, 1, 2, 3], seed).unwrap();
    let epochs: usize = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(5);
    let w_answer: f64 = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(1.0);
    let weights = LossWeights { answer: w_answer, ..LossWeights::default() };
    let tcfg = TrainConfig { learning_rate: lr, flags, seed, epochs_per_task: epochs, weights, ..TrainConfig::default() };
    let (params, counts) = build_model(&mcfg, seed).unwrap();
    let t0 = std::time::Instant::now();
    let run = train_continual(params, &stream, &tcfg).unwrap();
    let acc = avg_final_accuracy(&run.matrix).unwrap();
    let fog = avg_forgetting(&run.matrix).unwrap();
    eprintln!(
        "lr={lr} flags={flags_s} seed={seed} acc={acc:.4} fog={fog:.4} time={:.1}s learnable={} frozen={}",
        t0.elapsed().as_secs_f64(), counts.learnable, counts.frozen
    );
    for row in &run.matrix.rows {
        eprintln!("  {:?}", row.iter().map(|v| (v * 100.0).round() / 100.0).collect::<Vec<_>>());
    }
    let diag: Vec<f64> = run.matrix.rows.iter().enumerate().map(|(t, r)| (r[t] * 100.0).round() / 100.0).collect();
    eprintln!("  peaks(diag)={diag:?}");
    for r in run.loss_log.iter().step_by(40) {
        eprintln!("  step {:3} task {} a={:.3} q={:.3} v={:.3} p={:.3}", r.step, r.task, r.l_answer, r.l_question, r.l_video, r.l_prompt);
    }
    let first = run.loss_log.first().unwrap();
    let last = run.loss_log.last().unwrap();
    eprintln!("  loss first: a={:.3} q={:.3} v={:.3} p={:.3}", first.l_answer, first.l_question, first.l_video, first.l_prompt);
    eprintln!("  loss last:  a={:.3} q={:.3} v={:.3} p={:.3}", last.l_answer, last.l_question, last.l_video, last.l_prompt);
}
