//! The batch commands behind the CLI verbs.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::dataset::{ingest_dataset, load_image, Split};
use crate::error::{Error, Result};
use crate::metrics::{run_protocol, ProtocolRun, METRIC_CSV_HEADER};
use crate::model::{self, ModelState};
use crate::prompt::{enumerate_prompts, Family, Position, VocabConfig};
use crate::scm::{pseudo_scm, MaskSpec, SizeFractionBounds};
use crate::scoring::{
    detection_score, read_score_csv, write_score_csv, ScoredSample,
};
use crate::train::{completed_epochs, optimizer_state, train_from, OptState, TrainItem};

fn parse_split(s: &str) -> Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "dev" => Ok(Split::Dev),
        "test" => Ok(Split::Test),
        other => Err(Error::Argument(format!("unknown split {other:?}"))),
    }
}

/// Trains per the run config, optionally resuming from a checkpoint.
pub fn cmd_train(
    config_path: &Path,
    seed: Option<u64>,
    out: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
) -> Result<()> {
    let mut config = RunConfig::load(config_path)?;
    if let Some(seed) = seed {
        config.train.seed = seed;
    }
    if let Some(out) = out {
        config.output_dir = out;
    }
    config.validate()?;

    let mut items: Vec<TrainItem> = Vec::new();
    for id in config.training_ids() {
        let root = config.dataset_path(&id)?;
        let manifest = ingest_dataset(root, true)?;
        for record in manifest.split(Split::Train) {
            items.push(TrainItem {
                id: format!("{id}/{}", record.sample_id),
                image: load_image(&manifest.abs_path(record))?,
                label: record.label,
            });
        }
    }
    if items.is_empty() {
        return Err(Error::Config(
            "no training data: the registry has no datasets with live train images".into(),
        ));
    }

    let (mut state, mut opt, start_epoch) = match checkpoint {
        Some(path) => {
            let (state, extras) = ModelState::load_checkpoint(&path)?;
            if state.config != config.model {
                return Err(Error::Config(format!(
                    "checkpoint {} was produced with a different model config",
                    path.display()
                )));
            }
            let start = completed_epochs(&extras);
            (state, optimizer_state(&extras), start)
        }
        None => (
            ModelState::init(config.model, &config.vocab, config.train.seed)?,
            OptState::new(),
            0,
        ),
    };
    let log = train_from(
        &mut state,
        &mut opt,
        start_epoch,
        &config.train,
        &config.vocab,
        &items,
        &config.output_dir,
    )?;
    log::info!(
        "trained {} epochs, {} steps logged, checkpoints in {}",
        config.train.epochs - start_epoch,
        log.rows.len(),
        config.output_dir.display()
    );
    Ok(())
}

/// Scores one split of a dataset with a trained checkpoint and writes the
/// interchange CSV. `dataset` is a directory path or a registry id (the
/// latter requires `--config`).
pub fn cmd_score(
    checkpoint: &Path,
    dataset: &str,
    config_path: Option<&Path>,
    split: &str,
    out: &Path,
) -> Result<()> {
    let (state, _) = ModelState::load_checkpoint(checkpoint)?;
    let config = config_path.map(RunConfig::load).transpose()?;
    if let Some(config) = &config {
        if config.model.scm_shape != state.config.scm_shape {
            return Err(Error::Config(format!(
                "config scm_shape {:?} does not match checkpoint {:?}",
                config.model.scm_shape, state.config.scm_shape
            )));
        }
    }
    let (root, dataset_id) = if Path::new(dataset).is_dir() {
        (PathBuf::from(dataset), None)
    } else {
        let config = config.as_ref().ok_or_else(|| {
            Error::Argument(format!(
                "{dataset:?} is not a directory; pass --config to resolve registry ids"
            ))
        })?;
        (config.dataset_path(dataset)?.clone(), Some(dataset.to_string()))
    };
    let split = parse_split(split)?;
    let manifest = ingest_dataset(&root, false)?;
    let mut samples = Vec::new();
    for record in manifest.split(split) {
        let image = load_image(&manifest.abs_path(record))?;
        let z = model::encode_image(&state, &image)?;
        let map = model::decode_scm(&state, &z)?;
        samples.push(ScoredSample {
            sample_id: record.sample_id.clone(),
            score: detection_score(&map)?,
            label: Some(record.label),
            attack_type: record.attack_type.clone(),
            dataset: dataset_id.clone(),
        });
    }
    if samples.is_empty() {
        return Err(Error::Argument(format!("{split} split of {} is empty", root.display())));
    }
    write_score_csv(out, &samples)?;
    log::info!("wrote {} scores to {}", samples.len(), out.display());
    Ok(())
}

/// Evaluates a named protocol over per-repetition score CSVs, optionally
/// calibrated on a separate CSV, and writes the result JSON and table rows.
pub fn cmd_evaluate(
    config_path: &Path,
    protocol: &str,
    score_files: &[PathBuf],
    calibration: Option<&Path>,
    out: Option<PathBuf>,
) -> Result<()> {
    let config = RunConfig::load(config_path)?;
    let spec = config.protocol(protocol)?.clone();
    let calibration_samples = calibration.map(read_score_csv).transpose()?.unwrap_or_default();
    let mut runs = Vec::new();
    for file in score_files {
        let test = read_score_csv(file)?;
        let missing: Vec<&String> = spec
            .test_sources
            .iter()
            .filter(|id| !test.iter().any(|s| s.dataset.as_deref() == Some(id.as_str())))
            .collect();
        if !missing.is_empty() {
            return Err(Error::Config(format!(
                "{}: no scores for test datasets {missing:?} of protocol {}",
                file.display(),
                spec.name
            )));
        }
        runs.push(ProtocolRun {
            train_ids: Vec::new(),
            calibration: calibration_samples.clone(),
            test,
        });
    }
    let result = run_protocol(&spec, &runs)?;
    let out_dir = out.unwrap_or_else(|| config.output_dir.clone());
    std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
    let json_path = out_dir.join(format!("{}.json", spec.name));
    let json = serde_json::to_string_pretty(&result)
        .map_err(|e| Error::Config(format!("result serialization: {e}")))?;
    std::fs::write(&json_path, json).map_err(|e| Error::io(&json_path, e))?;
    let csv_path = out_dir.join(format!("{}.csv", spec.name));
    let mut table = String::from(METRIC_CSV_HEADER);
    table.push('\n');
    for (rep, bundle) in result.bundles.iter().enumerate() {
        table.push_str(&bundle.csv_row(&spec.name, rep));
        table.push('\n');
    }
    std::fs::write(&csv_path, table).map_err(|e| Error::io(&csv_path, e))?;
    log::info!(
        "protocol {}: mean ACER {:.4}, results in {}",
        spec.name,
        result.aggregate.mean_acer,
        out_dir.display()
    );
    Ok(())
}

fn vocab_from(config_path: Option<&Path>) -> Result<VocabConfig> {
    Ok(match config_path {
        Some(path) => RunConfig::load(path)?.vocab,
        None => VocabConfig::default(),
    })
}

/// Writes the full prompt expansion of every family, one line per prompt.
pub fn cmd_dump_prompts(config_path: Option<&Path>, out: Option<&Path>) -> Result<()> {
    let vocab = vocab_from(config_path)?;
    let mut text = String::new();
    for family in [Family::Live, Family::Spoof, Family::Content, Family::Hybrid] {
        for prompt in enumerate_prompts(family, &vocab)? {
            text.push_str(&prompt.dump_line());
            text.push('\n');
        }
    }
    match out {
        Some(path) => std::fs::write(path, text).map_err(|e| Error::io(path, e))?,
        None => std::io::stdout()
            .write_all(text.as_bytes())
            .map_err(|e| Error::io(Path::new("<stdout>"), e))?,
    }
    Ok(())
}

/// Renders one sampled pseudo spoof cue map per position as a binary PNG.
pub fn cmd_dump_scm(config_path: Option<&Path>, seed: u64, out_dir: &Path) -> Result<()> {
    let shape = match config_path {
        Some(path) => RunConfig::load(path)?.model.scm_shape,
        None => crate::model::ModelConfig::default().scm_shape,
    };
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bounds = SizeFractionBounds::default();
    let mut rename: BTreeMap<String, PathBuf> = BTreeMap::new();
    for position in Position::ALL {
        let size_fraction = (bounds.min_frac + bounds.max_frac) / 2.0;
        let map = pseudo_scm(&MaskSpec { position, size_fraction }, shape, &mut rng)?;
        let bytes: Vec<u8> = map.to_binary_bytes()?.iter().map(|&b| b * 255).collect();
        let (c, h, w) = map.shape;
        let gray = image::GrayImage::from_raw(w as u32, (c * h) as u32, bytes)
            .ok_or_else(|| Error::Argument("map buffer size mismatch".into()))?;
        let name = position.as_text().replace(' ', "_");
        let path = out_dir.join(format!("{name}.png"));
        gray.save(&path)
            .map_err(|e| Error::Argument(format!("{}: {e}", path.display())))?;
        rename.insert(name, path);
    }
    log::info!("wrote {} masks to {}", rename.len(), out_dir.display());
    Ok(())
}
