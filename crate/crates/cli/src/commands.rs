use std::path::{Path, PathBuf};
use std::str::FromStr;

use fairreg::audit::{audit_batch, audit_dump, plot_data, Mode};
use fairreg::data::{generate as draw, read_dataset, write_atomic, write_dataset, write_dump, Partition, SyntheticSpec};
use fairreg::model::{history_to_json, Architecture, ModelParams, TrainConfig, DEFAULT_HIDDEN};
use fairreg::sweep::{self, Strategy, SweepConfig, SweepInput};
use fairreg::LossKind;

use crate::config::{layered, take, ConfigFile, Flags};
use crate::{require_file, AuditArgs, CliError, GenerateArgs, Log, SweepArgs, TrainArgs};

pub const DATASET_FILE: &str = "dataset.csv";
pub const MODEL_FILE: &str = "model.json";
pub const HISTORY_FILE: &str = "history.json";

fn parse<T: FromStr<Err = fairreg::Error>>(value: &Option<String>) -> Result<Option<T>, CliError> {
    value
        .as_deref()
        .map(T::from_str)
        .transpose()
        .map_err(|e| CliError::Usage(e.to_string()))
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    Ok(write_atomic(path, text.as_bytes())?)
}

/// A dataset file, or `dataset.csv` inside a directory.
fn dataset_path(data: &Path) -> Result<PathBuf, CliError> {
    let path = if data.is_dir() { data.join(DATASET_FILE) } else { data.to_path_buf() };
    require_file(&path, "dataset")?;
    Ok(path)
}

fn default_out(data: &Path) -> PathBuf {
    if data.is_dir() {
        data.to_path_buf()
    } else {
        data.parent().map(Path::to_path_buf).unwrap_or_default()
    }
}

pub fn generate(args: &GenerateArgs, file: &ConfigFile, log: &Log) -> Result<(), CliError> {
    let mut layers = vec![file.section("generate")?];
    if let Some(p) = &args.spec {
        require_file(p, "spec file")?;
        let spec_file = ConfigFile::load(p)?;
        layers.push(if spec_file.has_section("generate") { spec_file.section("generate")? } else { spec_file.root() });
    }
    layers.push(
        Flags::default()
            .set("seed", args.seed)
            .set("n_samples", args.n_samples)
            .set("bias_strength", args.bias_strength)
            .into_map(),
    );
    let spec: SyntheticSpec = layered(&SyntheticSpec::default(), layers)?;
    let data = draw(&spec)?;
    let path = args.out.join(DATASET_FILE);
    write_dataset(&data, &path)?;
    let mut spec_json = serde_json::to_string_pretty(&spec).map_err(fairreg::Error::from)?;
    spec_json.push('\n');
    write(&args.out.join("spec.json"), &spec_json)?;
    log.info(format!("wrote {} samples to {}", data.len(), path.display()));
    Ok(())
}

struct Loaded {
    train: fairreg::data::Split,
    val: fairreg::data::Split,
    test: fairreg::data::Split,
}

fn load(data: &Path) -> Result<Loaded, CliError> {
    let d = read_dataset(&dataset_path(data)?, None, None)?;
    Ok(Loaded {
        train: d.split(Partition::Train),
        val: d.split(Partition::Val),
        test: d.split(Partition::Test),
    })
}

/// `[train]` settings plus the model shape keys that live beside them.
struct TrainSettings {
    config: TrainConfig,
    hidden: usize,
    init_seed: u64,
}

fn train_settings(file: &ConfigFile, flags: Flags) -> Result<TrainSettings, CliError> {
    let mut section = file.section("train")?;
    let mut flags = flags.into_map();
    let hidden = take(&mut flags, "hidden")?.or(take(&mut section, "hidden")?).unwrap_or(DEFAULT_HIDDEN);
    let init_seed = take(&mut section, "init_seed")?.unwrap_or(1);
    let config = layered(&TrainConfig::default(), [section, flags])?;
    config.validate()?;
    Ok(TrainSettings { config, hidden, init_seed })
}

fn baseline_model(d: &Loaded, s: &TrainSettings, log: &Log) -> Result<fairreg::model::TrainOutcome, CliError> {
    let arch = Architecture { input_dim: d.train.dim, hidden: s.hidden, classes: d.train.k_t };
    let init = ModelParams::init(arch, s.init_seed)?;
    let out = fairreg::model::train(&d.train, Some(&d.val), &s.config, init)?;
    for rec in &out.history {
        log.detail(format!(
            "epoch {:>3} loss {:.5} train acc {:.4} val sigma_IoU {}",
            rec.epoch,
            rec.train_loss,
            rec.train_accuracy,
            rec.heldout.as_ref().and_then(|h| h.sigma_iou).map_or("-".to_string(), |v| format!("{v:.4}"))
        ));
    }
    Ok(out)
}

pub fn train(args: &TrainArgs, file: &ConfigFile, log: &Log) -> Result<(), CliError> {
    let data_path = dataset_path(&args.data)?;
    if let Some(p) = &args.init {
        require_file(p, "initial model")?;
    }
    let flags = Flags::default()
        .set("lambda", args.lambda)
        .set("loss_kind", parse::<LossKind>(&args.loss)?)
        .set("epochs", args.epochs)
        .set("learning_rate", args.learning_rate)
        .set("batch_size", args.batch_size)
        .set("seed", args.seed)
        .set("class_weight_beta", args.class_weight_beta)
        .set("hidden", args.hidden);
    let settings = train_settings(file, flags)?;
    let d = load(&data_path)?;
    let out_dir = args.out.clone().unwrap_or_else(|| default_out(&args.data));

    let outcome = match &args.init {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
            let init = ModelParams::from_json(&text)?;
            fairreg::model::train(&d.train, Some(&d.val), &settings.config, init)?
        }
        None => baseline_model(&d, &settings, log)?,
    };
    write(&out_dir.join(MODEL_FILE), &outcome.params.to_json()?)?;
    write(&out_dir.join(HISTORY_FILE), &history_to_json(&outcome.history)?)?;
    let val = outcome.params.forward_split(&d.val)?;
    let test = outcome.params.forward_split(&d.test)?;
    write_dump(&val, &out_dir.join("predictions_val.csv"))?;
    write_dump(&test, &out_dir.join("predictions_test.csv"))?;
    let report = audit_batch(&test, Mode::Soft);
    write(&out_dir.join("report_test.json"), &report.to_json()?)?;
    let last = outcome.history.last().and_then(|r| r.heldout.as_ref());
    log.info(format!(
        "trained {} epochs: val accuracy {}, test accuracy {:.4}, test sigma_IoU {}; outputs in {}",
        outcome.history.len(),
        last.map_or("-".to_string(), |h| format!("{:.4}", h.accuracy)),
        report.accuracy,
        report.sigma_iou.map_or("-".to_string(), |v| format!("{v:.4}")),
        out_dir.display()
    ));
    Ok(())
}

pub fn audit(args: &AuditArgs, log: &Log) -> Result<(), CliError> {
    require_file(&args.dump, "prediction dump")?;
    let mode = Mode::from_str(&args.mode).map_err(|e| CliError::Usage(e.to_string()))?;
    let report = audit_dump(&args.dump, mode, args.k_s)?;
    if let Some(p) = &args.json {
        write(p, &report.to_json()?)?;
    }
    let text = report.to_text();
    if let Some(p) = &args.text {
        write(p, &text)?;
    }
    if !log.quiet() {
        print!("{text}");
    }
    Ok(())
}

pub fn sweep(args: &SweepArgs, file: &ConfigFile, log: &Log) -> Result<(), CliError> {
    let data_path = dataset_path(&args.data)?;
    if let Some(p) = &args.baseline {
        require_file(p, "baseline model")?;
    }
    let flags = Flags::default()
        .set("loss_kind", parse::<LossKind>(&args.loss)?)
        .set("strategy", parse::<Strategy>(&args.strategy)?)
        .set("n_trials", args.trials)
        .set("lambda_low", args.lambda_low)
        .set("lambda_high", args.lambda_high)
        .set("ladder_ratio", args.ladder_ratio)
        .set("accuracy_floor", args.accuracy_floor)
        .set("seed", args.seed)
        .nest(
            "finetune",
            Flags::default()
                .set("epochs", args.finetune_epochs)
                .set("learning_rate", args.finetune_learning_rate),
        );
    let config: SweepConfig = layered(&SweepConfig::default(), [file.section("sweep")?, flags.into_map()])?;
    config.validate()?;
    let baseline_settings = match &args.baseline {
        Some(_) => None,
        None => Some(train_settings(file, Flags::default())?),
    };
    let d = load(&data_path)?;
    let out_dir = args.out.clone().unwrap_or_else(|| default_out(&args.data));

    let baseline = match (&args.baseline, baseline_settings) {
        (Some(p), _) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
            ModelParams::from_json(&text)?
        }
        (None, Some(s)) => {
            log.info("training the lambda = 0 baseline");
            let params = baseline_model(&d, &s, log)?.params;
            write(&out_dir.join("baseline_model.json"), &params.to_json()?)?;
            params
        }
        (None, None) => unreachable!("settings are resolved when no baseline is given"),
    };

    let input = SweepInput { train: &d.train, val: &d.val, test: &d.test, baseline: &baseline };
    let out = sweep::run(&input, &config)?;
    let r = &out.result;
    for t in &r.trials {
        log.detail(format!(
            "trial {:>2} lambda {:<12.6} val accuracy {:.4} sigma_IoU {} {}",
            t.trial,
            t.lambda,
            t.accuracy,
            t.sigma_iou.map_or("-".to_string(), |v| format!("{v:.4}")),
            if t.meets_floor { "" } else { "(below floor)" }
        ));
    }
    for w in &r.warnings {
        log.info(format!("warning: {w}"));
    }
    write(&out_dir.join("sweep.json"), &r.to_json()?)?;
    write(&out_dir.join("trials.jsonl"), &r.trials_jsonl()?)?;
    write(&out_dir.join("selected_model.json"), &out.selected_params.to_json()?)?;
    let sigma = r.series(|t| t.sigma_iou.unwrap_or(f64::NAN));
    write(&out_dir.join("plot_sigma_iou.dat"), &plot_data("lambda", "sigma_iou", &sigma))?;
    let acc = r.series(|t| t.accuracy);
    write(&out_dir.join("plot_accuracy.dat"), &plot_data("lambda", "accuracy", &acc))?;
    let fmt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
    log.info(format!(
        "{} {}: selected lambda {} of {} trials; val sigma_IoU {} -> {}, test accuracy {:.4} -> {:.4}; outputs in {}",
        r.loss_kind,
        match r.strategy {
            Strategy::Ladder => "ladder",
            Strategy::Random => "random search",
        },
        r.selected_lambda,
        r.trials.len(),
        fmt(r.baseline.sigma_iou),
        fmt(r.selected().sigma_iou),
        r.baseline_test.accuracy,
        r.selected_test.accuracy,
        out_dir.display()
    ));
    Ok(())
}
