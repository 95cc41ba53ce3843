use ocfas::dataset::Split;
use ocfas::metrics::compute_metrics;
use ocfas::model::{self, ModelConfig, ModelState};
use ocfas::prompt::VocabConfig;
use ocfas::scoring::{detection_score, youden_threshold, Label, ScoredSample};
use ocfas::synthetic::{generate, SyntheticSpec};
use ocfas::train::{train, Ablation, TrainConfig, TrainItem};

#[derive(Clone)]
struct Knobs {
    n_train: usize,
    batch: usize,
    d_emb: usize,
    warmup: usize,
    prompts: (usize, usize, usize),
    scm: usize,
}

fn score_split(
    state: &ModelState,
    samples: &[ocfas::synthetic::SyntheticSample],
    split: Split,
) -> Vec<ScoredSample> {
    samples
        .iter()
        .filter(|s| s.split == split)
        .map(|s| {
            let z = model::encode_image(state, &s.image).unwrap();
            let map = model::decode_scm(state, &z).unwrap();
            ScoredSample {
                sample_id: s.id.clone(),
                score: detection_score(&map).unwrap(),
                label: Some(s.label),
                attack_type: s.attack_type.clone(),
                dataset: Some("S".into()),
            }
        })
        .collect()
}

fn run_epochs(seed: u64, ablation: Ablation, k: &Knobs, epochs: usize) -> (f64, f64) {
    let spec = SyntheticSpec { seed, n_train_live: k.n_train, ..SyntheticSpec::default() };
    let samples = generate(&spec);
    let items: Vec<TrainItem> = samples
        .iter()
        .filter(|s| s.split == Split::Train)
        .map(|s| TrainItem { id: s.id.clone(), image: s.image.clone(), label: s.label })
        .collect();
    let config = ModelConfig {
        d_emb: k.d_emb,
        scm_shape: (1, k.scm, k.scm),
        image_size: 32,
        patch_size: 8,
        max_tokens: 32,
    };
    let mut state = ModelState::init(config, &VocabConfig::default(), seed).unwrap();
    let cfg = TrainConfig {
        learning_rate: 1e-3,
        epochs,
        batch_images: k.batch,
        prompt_counts: k.prompts,
        warmup_steps: k.warmup,
        seed,
        ablation,
        ..TrainConfig::default()
    };
    let dir = tempfile::tempdir().unwrap();
    train(&mut state, &cfg, &VocabConfig::default(), &items, dir.path()).unwrap();
    let dev = score_split(&state, &samples, Split::Dev);
    let test = score_split(&state, &samples, Split::Test);
    let t = youden_threshold(&dev).unwrap();
    let b = compute_metrics(&test, &t).unwrap();
    (b.auc, b.acer)
}

fn run_once(seed: u64, ablation: Ablation, k: &Knobs) -> (f64, f64) {
    run_epochs(seed, ablation, k, 50)
}

fn sweep(label: &str, k: &Knobs) {
    let start = std::time::Instant::now();
    let mut ok = 0;
    for seed in 0..5u64 {
        let (auc_f, acer_f) = run_once(seed, Ablation::Full, k);
        let (auc_l, _) = run_once(seed, Ablation::LivenessSpoof, k);
        let (auc_n, _) = run_once(seed, Ablation::NoiseSpoof, k);
        let ordered = auc_f >= auc_l + 0.02 && auc_l >= auc_n + 0.02;
        if ordered {
            ok += 1;
        }
        println!(
            "[{label}] seed {seed}: full {auc_f:.4}/{acer_f:.4} | ls {auc_l:.4} | noise {auc_n:.4} | {}",
            if ordered { "ORDERED" } else { "-" }
        );
    }
    println!("[{label}] ordered {ok}/5, {:.0}s total", start.elapsed().as_secs_f64());
}

fn dist(scores: &[ScoredSample], label: Label) -> (f64, f64) {
    let v: Vec<f64> =
        scores.iter().filter(|s| s.label == Some(label)).map(|s| s.score).collect();
    let m = v.iter().sum::<f64>() / v.len() as f64;
    let sd = (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64).sqrt();
    (m, sd)
}

fn probe(seed: u64, ablation: Ablation, k: &Knobs, tag: &str) {
    let spec = SyntheticSpec { seed, n_train_live: k.n_train, ..SyntheticSpec::default() };
    let samples = generate(&spec);
    let items: Vec<TrainItem> = samples
        .iter()
        .filter(|s| s.split == Split::Train)
        .map(|s| TrainItem { id: s.id.clone(), image: s.image.clone(), label: s.label })
        .collect();
    let config = ModelConfig {
        d_emb: k.d_emb,
        scm_shape: (1, k.scm, k.scm),
        image_size: 32,
        patch_size: 8,
        max_tokens: 32,
    };
    let mut state = ModelState::init(config, &VocabConfig::default(), seed).unwrap();
    let cfg = TrainConfig {
        learning_rate: 1e-3,
        epochs: 50,
        batch_images: k.batch,
        prompt_counts: k.prompts,
        warmup_steps: k.warmup,
        seed,
        ablation,
        ..TrainConfig::default()
    };
    let dir = tempfile::tempdir().unwrap();
    train(&mut state, &cfg, &VocabConfig::default(), &items, dir.path()).unwrap();
    let train_scores = score_split(&state, &samples, Split::Train);
    let test = score_split(&state, &samples, Split::Test);
    let (trm, trs) = dist(&train_scores, Label::Live);
    let (lm, lsd) = dist(&test, Label::Live);
    let (sm, ssd) = dist(&test, Label::Spoof);
    let auc = ocfas::metrics::auc(&test).unwrap();
    println!(
        "[probe {tag}] seed {seed} auc {auc:.3} | train-live {trm:.4}+-{trs:.4} | live {lm:.4}+-{lsd:.4} | spoof {sm:.4}+-{ssd:.4}"
    );
    let csv = std::fs::read_to_string(dir.path().join("loss.csv")).unwrap();
    let mut last: std::collections::BTreeMap<String, String> = Default::default();
    for line in csv.lines().skip(1) {
        let stage = line.split(',').nth(1).unwrap().to_string();
        last.insert(stage, line.to_string());
    }
    for (stage, line) in last {
        println!("[loss {tag}] seed {seed} stage {stage}: {line}");
    }
}

#[test]
fn explore() {
    let a = Knobs { n_train: 768, batch: 8, d_emb: 64, warmup: 20, prompts: (4, 2, 3), scm: 16 };
    for seed in 0..5 {
        probe(seed, Ablation::Full, &a, "full-novel");
        probe(seed, Ablation::LivenessSpoof, &a, "ls-novel");
    }
}
