//! On-disk formats: datasets, checkpoints, run directories and TSV reports.
//!
//! Everything is line-oriented text. Floats are written with Rust's shortest
//! round-trip representation (always carrying a decimal point or exponent),
//! so write-then-read reproduces every value bit-exactly and, conversely,
//! re-serializing parsed files is byte-identical.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use pdro_core::adversaries::{AdversaryParams, AdversarySnapshot, Family};
use pdro_core::data::{Dataset, DatasetBundle, Example, Features, Split};
use pdro_core::models::{ModelKind, ModelParams};
use pdro_core::selection::adversary_valid_kl;
use pdro_core::trainer::{AbortInfo, CheckpointRecord, RunHistory};

#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, FormatError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> FormatError + '_ {
    move |source| FormatError::Io { path: path.to_path_buf(), source }
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> FormatError {
    FormatError::Parse { path: path.to_path_buf(), line, message: message.into() }
}

pub fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(io_err(path))
}

pub fn write_string(path: &Path, content: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    fs::write(path, content).map_err(io_err(path))
}

// ---------------------------------------------------------------------------
// Datasets
// ---------------------------------------------------------------------------

fn float(x: f64) -> String {
    format!("{x:?}")
}

/// One example per line: `split \t group \t label \t features` with an
/// optional fifth column of comma-separated posterior probabilities.
/// Dense features are comma-separated reals, token sequences are
/// space-separated ids.
pub fn dataset_to_string(ds: &Dataset) -> String {
    let mut out = String::new();
    for ex in &ds.examples {
        out.push_str(ds.split.as_str());
        out.push('\t');
        out.push_str(&ex.group.to_string());
        out.push('\t');
        out.push_str(&ex.label.to_string());
        out.push('\t');
        match &ex.features {
            Features::Dense(v) => {
                let cols: Vec<String> = v.iter().map(|x| float(*x)).collect();
                out.push_str(&cols.join(","));
            }
            Features::Tokens(t) => {
                let cols: Vec<String> = t.iter().map(|x| x.to_string()).collect();
                out.push_str(&cols.join(" "));
            }
        }
        if let Some(post) = &ex.posterior {
            out.push('\t');
            let cols: Vec<String> = post.iter().map(|x| float(*x)).collect();
            out.push_str(&cols.join(","));
        }
        out.push('\n');
    }
    out
}

pub fn dataset_from_str(
    text: &str,
    path: &Path,
    vocab_override: Option<u32>,
) -> Result<Dataset> {
    let mut examples = Vec::new();
    let mut split: Option<Split> = None;
    let mut max_token: Option<u32> = None;
    for (no, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 4 || fields.len() > 5 {
            return Err(parse_err(path, no + 1, "expected 4 or 5 tab-separated fields"));
        }
        let this_split = match fields[0] {
            "train" => Split::Train,
            "valid" => Split::Valid,
            "test" => Split::Test,
            other => return Err(parse_err(path, no + 1, format!("bad split '{other}'"))),
        };
        match split {
            None => split = Some(this_split),
            Some(s) if s == this_split => {}
            Some(_) => return Err(parse_err(path, no + 1, "mixed splits in one file")),
        }
        let group = fields[1]
            .parse()
            .map_err(|_| parse_err(path, no + 1, "bad group id"))?;
        let label: u8 = fields[2]
            .parse()
            .map_err(|_| parse_err(path, no + 1, "bad label"))?;
        if label > 1 {
            return Err(parse_err(path, no + 1, "label must be 0 or 1"));
        }
        // Token sequences contain only digits and spaces; anything else
        // (decimal point, sign, exponent) marks dense features.
        let feat = fields[3];
        let features = if feat.chars().all(|c| c.is_ascii_digit() || c == ' ') {
            let tokens: Vec<u32> = feat
                .split(' ')
                .map(|t| t.parse().map_err(|_| parse_err(path, no + 1, "bad token id")))
                .collect::<Result<_>>()?;
            for &t in &tokens {
                max_token = Some(max_token.map_or(t, |m: u32| m.max(t)));
            }
            Features::Tokens(tokens)
        } else {
            let values: Vec<f64> = feat
                .split(',')
                .map(|v| v.parse().map_err(|_| parse_err(path, no + 1, "bad real value")))
                .collect::<Result<_>>()?;
            Features::Dense(values)
        };
        let posterior = if fields.len() == 5 {
            Some(
                fields[4]
                    .split(',')
                    .map(|v| {
                        v.parse().map_err(|_| parse_err(path, no + 1, "bad posterior value"))
                    })
                    .collect::<Result<Vec<f64>>>()?,
            )
        } else {
            None
        };
        examples.push(Example { features, label, group, posterior });
    }
    if examples.is_empty() {
        return Err(parse_err(path, 0, "empty dataset"));
    }
    let vocab_size = match (&examples[0].features, vocab_override) {
        (Features::Tokens(_), Some(v)) => Some(v),
        (Features::Tokens(_), None) => max_token.map(|m| m + 1),
        _ => None,
    };
    Ok(Dataset { examples, split: split.expect("non-empty"), vocab_size })
}

pub fn write_bundle(dir: &Path, bundle: &DatasetBundle) -> Result<()> {
    write_string(&dir.join("train.tsv"), &dataset_to_string(&bundle.train))?;
    write_string(&dir.join("valid.tsv"), &dataset_to_string(&bundle.valid))?;
    write_string(&dir.join("test.tsv"), &dataset_to_string(&bundle.test))
}

pub fn read_bundle(dir: &Path, vocab_override: Option<u32>) -> Result<DatasetBundle> {
    let read = |name: &str| -> Result<Dataset> {
        let path = dir.join(name);
        dataset_from_str(&read_to_string(&path)?, &path, vocab_override)
    };
    let train = read("train.tsv")?;
    let valid = read("valid.tsv")?;
    let test = read("test.tsv")?;
    // All splits of a sequence task share one vocabulary.
    let vocab = [&train, &valid, &test]
        .iter()
        .filter_map(|d| d.vocab_size)
        .max();
    let with_vocab = |mut d: Dataset| {
        if d.vocab_size.is_some() {
            d.vocab_size = vocab;
        }
        d
    };
    Ok(DatasetBundle {
        train: with_vocab(train),
        valid: with_vocab(valid),
        test: with_vocab(test),
    })
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

/// Flat list of decimal reals with a one-line header.
pub fn model_to_string(params: &ModelParams) -> String {
    let header = match params.kind {
        ModelKind::Dense { dim } => format!("model dense dim={dim}"),
        ModelKind::BagOfTokens { vocab } => format!("model bag vocab={vocab}"),
    };
    let mut out = header;
    out.push('\n');
    for w in &params.weights {
        out.push_str(&float(*w));
        out.push('\n');
    }
    out
}

fn header_value<'a>(field: &'a str, key: &str, path: &Path) -> Result<&'a str> {
    field
        .strip_prefix(key)
        .and_then(|rest| rest.strip_prefix('='))
        .ok_or_else(|| parse_err(path, 1, format!("expected {key}=<value>")))
}

pub fn model_from_str(text: &str, path: &Path) -> Result<ModelParams> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| parse_err(path, 1, "empty model file"))?;
    let fields: Vec<&str> = header.split(' ').collect();
    let kind = match fields.as_slice() {
        ["model", "dense", dim] => ModelKind::Dense {
            dim: header_value(dim, "dim", path)?
                .parse()
                .map_err(|_| parse_err(path, 1, "bad dim"))?,
        },
        ["model", "bag", vocab] => ModelKind::BagOfTokens {
            vocab: header_value(vocab, "vocab", path)?
                .parse()
                .map_err(|_| parse_err(path, 1, "bad vocab"))?,
        },
        _ => return Err(parse_err(path, 1, "bad model header")),
    };
    let weights: Vec<f64> = lines
        .enumerate()
        .map(|(i, l)| l.parse().map_err(|_| parse_err(path, i + 2, "bad weight")))
        .collect::<Result<_>>()?;
    if weights.len() != kind.weight_len() {
        return Err(FormatError::Invalid(format!(
            "{}: expected {} weights, found {}",
            path.display(),
            kind.weight_len(),
            weights.len()
        )));
    }
    Ok(ModelParams { kind, weights })
}

pub fn adversary_to_string(params: &AdversaryParams) -> String {
    let header = match &params.family {
        Family::Gaussian { sigma } => {
            format!("adversary gaussian sigma={} dim={}", float(*sigma), params.psi.len())
        }
        Family::Bigram { vocab, alpha } => {
            format!("adversary bigram vocab={vocab} alpha={}", float(*alpha))
        }
    };
    let mut out = header;
    out.push('\n');
    for v in &params.psi {
        out.push_str(&float(*v));
        out.push('\n');
    }
    out
}

pub fn adversary_from_str(text: &str, path: &Path) -> Result<AdversaryParams> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| parse_err(path, 1, "empty adversary file"))?;
    let fields: Vec<&str> = header.split(' ').collect();
    let (family, expect) = match fields.as_slice() {
        ["adversary", "gaussian", sigma, dim] => {
            let sigma: f64 = header_value(sigma, "sigma", path)?
                .parse()
                .map_err(|_| parse_err(path, 1, "bad sigma"))?;
            let dim: usize = header_value(dim, "dim", path)?
                .parse()
                .map_err(|_| parse_err(path, 1, "bad dim"))?;
            (Family::Gaussian { sigma }, dim)
        }
        ["adversary", "bigram", vocab, alpha] => {
            let vocab: u32 = header_value(vocab, "vocab", path)?
                .parse()
                .map_err(|_| parse_err(path, 1, "bad vocab"))?;
            let alpha: f64 = header_value(alpha, "alpha", path)?
                .parse()
                .map_err(|_| parse_err(path, 1, "bad alpha"))?;
            (Family::Bigram { vocab, alpha }, (vocab as usize + 2) * vocab as usize)
        }
        _ => return Err(parse_err(path, 1, "bad adversary header")),
    };
    let psi: Vec<f64> = lines
        .enumerate()
        .map(|(i, l)| l.parse().map_err(|_| parse_err(path, i + 2, "bad parameter")))
        .collect::<Result<_>>()?;
    if psi.len() != expect {
        return Err(FormatError::Invalid(format!(
            "{}: expected {expect} parameters, found {}",
            path.display(),
            psi.len()
        )));
    }
    Ok(AdversaryParams { family, psi })
}

// ---------------------------------------------------------------------------
// Run directories
// ---------------------------------------------------------------------------

/// Write one run's directory: config echo, per-epoch TSV and serialized
/// checkpoints.
pub fn write_run_dir(dir: &Path, history: &RunHistory, config_echo: &str) -> Result<()> {
    fs::create_dir_all(dir.join("checkpoints")).map_err(io_err(dir))?;
    write_string(&dir.join("config.txt"), config_echo)?;

    let mut epochs = String::from("epoch\ttrain_loss\tvalid_loss\tvalid_error\tadversary_valid_kl\n");
    for rec in &history.records {
        let valid_loss = mean(&rec.losses);
        let valid_error = mean(&rec.errors);
        let kl = adversary_valid_kl(rec).unwrap_or(f64::INFINITY);
        epochs.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\n",
            rec.epoch,
            float(rec.train_loss),
            float(valid_loss),
            float(valid_error),
            float(kl)
        ));
    }
    write_string(&dir.join("epochs.tsv"), &epochs)?;

    for rec in &history.records {
        if let Some(params) = &rec.params {
            write_string(
                &dir.join(format!("checkpoints/epoch_{:04}.model", rec.epoch)),
                &model_to_string(params),
            )?;
        }
        if let Some(adv) = &rec.adversary {
            write_string(
                &dir.join(format!("checkpoints/epoch_{:04}.adv", rec.epoch)),
                &adversary_to_string(adv),
            )?;
        }
    }
    write_string(&dir.join("final.model"), &model_to_string(&history.final_params))?;
    if let Some(psi0) = &history.psi0 {
        write_string(&dir.join("psi0.adv"), &adversary_to_string(psi0.params()))?;
    }
    if let Some(abort) = &history.abort {
        write_string(
            &dir.join("abort.txt"),
            &format!("epoch={} batch={} reason={}\n", abort.epoch, abort.batch, abort.reason),
        )?;
    }
    Ok(())
}

/// The parts of a run directory needed to rebuild its history against a
/// dataset.
pub struct StoredRun {
    pub config: BTreeMap<String, String>,
    pub checkpoints: Vec<(usize, ModelParams, Option<AdversaryParams>)>,
    pub final_params: ModelParams,
    pub psi0: Option<AdversarySnapshot>,
    pub abort: Option<AbortInfo>,
}

pub fn read_run_dir(dir: &Path) -> Result<StoredRun> {
    let config = parse_key_values(&read_to_string(&dir.join("config.txt"))?);
    let mut checkpoints = Vec::new();
    let ck_dir = dir.join("checkpoints");
    let mut entries: Vec<PathBuf> = fs::read_dir(&ck_dir)
        .map_err(io_err(&ck_dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    entries.sort();
    for path in entries {
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if let Some(epoch) = name.strip_prefix("epoch_").and_then(|r| r.strip_suffix(".model"))
        {
            let epoch: usize = epoch
                .parse()
                .map_err(|_| parse_err(&path, 0, "bad checkpoint name"))?;
            let params = model_from_str(&read_to_string(&path)?, &path)?;
            let adv_path = ck_dir.join(format!("epoch_{epoch:04}.adv"));
            let adversary = if adv_path.exists() {
                Some(adversary_from_str(&read_to_string(&adv_path)?, &adv_path)?)
            } else {
                None
            };
            checkpoints.push((epoch, params, adversary));
        }
    }
    checkpoints.sort_by_key(|(e, _, _)| *e);
    let final_path = dir.join("final.model");
    let final_params = model_from_str(&read_to_string(&final_path)?, &final_path)?;
    let psi0_path = dir.join("psi0.adv");
    let psi0 = if psi0_path.exists() {
        Some(AdversarySnapshot::new(adversary_from_str(
            &read_to_string(&psi0_path)?,
            &psi0_path,
        )?))
    } else {
        None
    };
    let abort_path = dir.join("abort.txt");
    let abort = if abort_path.exists() {
        let text = read_to_string(&abort_path)?;
        parse_abort(&text)
    } else {
        None
    };
    Ok(StoredRun { config, checkpoints, final_params, psi0, abort })
}

fn parse_abort(text: &str) -> Option<AbortInfo> {
    let line = text.lines().next()?;
    let mut epoch = 0;
    let mut batch = 0;
    let mut reason = String::new();
    for field in line.splitn(3, ' ') {
        if let Some(v) = field.strip_prefix("epoch=") {
            epoch = v.parse().ok()?;
        } else if let Some(v) = field.strip_prefix("batch=") {
            batch = v.parse().ok()?;
        } else if let Some(v) = field.strip_prefix("reason=") {
            reason = v.to_string();
        }
    }
    Some(AbortInfo { epoch, batch, reason })
}

/// Flat `key=value` text, one pair per line; `#` starts a comment.
pub fn parse_key_values(text: &str) -> BTreeMap<String, String> {
    let mut map = BTreeMap::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some((key, value)) = line.split_once('=') {
            map.insert(key.trim().to_string(), value.trim().to_string());
        }
    }
    map
}

fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

/// Reconstruct the per-example sufficient statistics of a stored run
/// against the dataset it was trained on.
pub fn rebuild_history(
    run: &StoredRun,
    data: &DatasetBundle,
) -> std::result::Result<RunHistory, pdro_core::Error> {
    use pdro_core::adversaries::batch_log_weights;
    use pdro_core::models;

    let mut records = Vec::new();
    for (epoch, params, adversary) in &run.checkpoints {
        let mut losses = Vec::with_capacity(data.valid.len());
        let mut errors = Vec::with_capacity(data.valid.len());
        for ex in &data.valid.examples {
            losses.push(models::loss(ex, params)?);
            errors.push((models::predict(ex, params)? != ex.label) as u8 as f64);
        }
        let log_weights = match (adversary, &run.psi0) {
            (Some(psi), Some(psi0)) if *epoch > 0 => {
                let refs: Vec<&Example> = data.valid.examples.iter().collect();
                batch_log_weights(&refs, psi, psi0.params())?
            }
            _ => {
                // ERM/Group-DRO records carry uniform weights; NonParam
                // re-solves its validation tilt below.
                vec![0.0; data.valid.len()]
            }
        };
        records.push(CheckpointRecord {
            epoch: *epoch,
            log_weights,
            losses,
            errors,
            train_loss: f64::NAN,
            params: Some(params.clone()),
            adversary: adversary.clone(),
        });
    }
    // NonParam adversaries are the analytic validation tilts.
    if run.config.get("method").map(String::as_str) == Some("nonparam") {
        let kappa: f64 = run
            .config
            .get("nonparam_kappa")
            .and_then(|v| v.parse().ok())
            .unwrap_or(1.0);
        for rec in records.iter_mut().skip(1) {
            let (q, _, _) = pdro_core::baselines::nonparam_inner(&rec.losses, kappa)?;
            let n = q.len() as f64;
            rec.log_weights = q
                .iter()
                .map(|qi| pdro_core::math::ln(n * qi.max(f64::MIN_POSITIVE)))
                .collect();
        }
    }
    let config = pdro_core::trainer::TrainConfig {
        method: pdro_core::trainer::MethodConfig::Erm,
        epochs: records.len().saturating_sub(1),
        batch_size: run.config.get("batch_size").and_then(|v| v.parse().ok()).unwrap_or(64),
        model_lr: run.config.get("model_lr").and_then(|v| v.parse().ok()).unwrap_or(0.1),
        adam: false,
        seed: run.config.get("seed").and_then(|v| v.parse().ok()).unwrap_or(0),
    };
    Ok(RunHistory {
        config,
        records,
        final_params: run.final_params.clone(),
        psi0: run.psi0.clone(),
        valid_fingerprint: data.valid.fingerprint(),
        abort: run.abort.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use pdro_core::data::{gen_biased_sequences, gen_toy_gaussian, BiasedSeqConfig, ToyTaskConfig};

    #[test]
    fn dataset_round_trip_is_bit_exact() {
        let cfg = ToyTaskConfig {
            n_train: 120,
            n_valid: 110,
            n_test: 400,
            min_test_per_group: 2,
            ..Default::default()
        };
        let bundle = gen_toy_gaussian(&cfg, 9).unwrap();
        let text = dataset_to_string(&bundle.train);
        let back = dataset_from_str(&text, Path::new("t"), None).unwrap();
        assert_eq!(back, bundle.train);
        assert_eq!(dataset_to_string(&back), text);
    }

    #[test]
    fn sequence_dataset_round_trips_with_vocab_inference() {
        let cfg = BiasedSeqConfig {
            n_train: 150,
            n_valid: 120,
            n_test: 120,
            ..Default::default()
        };
        let bundle = gen_biased_sequences(&cfg, 4).unwrap();
        let text = dataset_to_string(&bundle.test);
        let back = dataset_from_str(&text, Path::new("t"), None).unwrap();
        assert_eq!(back.examples, bundle.test.examples);
        // Every content token appears in a 120-sentence sample, so the
        // inferred vocabulary matches the generator's.
        assert_eq!(back.vocab_size, Some(cfg.vocab_size));
    }

    #[test]
    fn model_and_adversary_round_trip() {
        let m = ModelParams {
            kind: ModelKind::Dense { dim: 2 },
            weights: vec![0.25, -1.5e-7, 3.0],
        };
        let back = model_from_str(&model_to_string(&m), Path::new("m")).unwrap();
        assert_eq!(back, m);
        let a = AdversaryParams {
            family: Family::Gaussian { sigma: 1.25 },
            psi: vec![0.1, -0.2],
        };
        let back = adversary_from_str(&adversary_to_string(&a), Path::new("a")).unwrap();
        assert_eq!(back, a);
        let b = AdversaryParams {
            family: Family::Bigram { vocab: 3, alpha: 0.1 },
            psi: (0..15).map(|i| i as f64 * 0.5 - 3.0).collect(),
        };
        let back = adversary_from_str(&adversary_to_string(&b), Path::new("b")).unwrap();
        assert_eq!(back, b);
    }
}
