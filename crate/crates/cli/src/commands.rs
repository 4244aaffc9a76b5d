use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use mobilesal::checks::{end_to_end_config, run_check, CheckTarget};
use mobilesal::data::{self, ImageKind, Sample};
use mobilesal::metrics::{BetaConvention, MetricsReport};
use mobilesal::network::{checkpoint, count_params, MobileSal, MobileSalConfig, Scope};
use mobilesal::synth::synth_dataset;
use mobilesal::tensor::gradcheck::{GradCheckConfig, GradCheckReport};
use mobilesal::training::{predict, train_loop, EpochRecord, TrainConfig};
use mobilesal::{Error, Mode, ParamStore};
use serde_json::{json, Value};

use crate::{BetaArg, EvalArgs, GradcheckArgs, InferArgs, Precision, StatsArgs, SynthArgs, TrainArgs};

pub const EXIT_USAGE: u8 = 1;
pub const EXIT_DATA: u8 = 2;
pub const EXIT_NUMERIC: u8 = 3;

pub const CHECKPOINT: &str = "checkpoint.msal";
pub const INFERENCE_CHECKPOINT: &str = "inference.msal";
pub const LOSS_LOG: &str = "loss_log.jsonl";
pub const CONFIG: &str = "config.json";

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(_) => EXIT_DATA,
            CliError::Numeric(_) => EXIT_NUMERIC,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage: {m}"),
            CliError::Data(m) => write!(f, "data: {m}"),
            CliError::Numeric(m) => write!(f, "numeric: {m}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::Config(_) => CliError::Usage(msg),
            Error::Numeric(_) | Error::State(_) => CliError::Numeric(msg),
            _ => CliError::Data(msg),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("creating {}: {e}", dir.display())))
}

fn write_json(path: &Path, v: &Value) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(v).expect("JSON values serialise");
    bytes.push(b'\n');
    Ok(data::write_atomic(path, &bytes)?)
}

fn load_dataset(root: &Path) -> Result<Vec<Sample>> {
    let manifest = data::scan_dataset(root)?;
    log::info!("{}: {} samples", root.display(), manifest.ids.len());
    Ok(manifest.load_all()?)
}

fn train_configs(a: &TrainArgs) -> Result<(MobileSalConfig, TrainConfig)> {
    let (mut net, mut cfg) = if a.toy {
        (MobileSalConfig::toy(), TrainConfig::toy())
    } else {
        (MobileSalConfig::default(), TrainConfig::default())
    };
    if let Some(w) = a.width_mult {
        net.width_mult = w;
    }
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.batch {
        cfg.batch = v;
    }
    if let Some(v) = a.lr {
        cfg.lr = v;
    }
    if let Some(v) = a.lambda {
        cfg.lambda = v;
    }
    if let Some(v) = &a.scales {
        cfg.scales = v.clone();
    }
    cfg.seed = a.seed;
    net.validate()?;
    cfg.validate()?;
    Ok((net, cfg))
}

fn log_line(r: &EpochRecord) -> String {
    serde_json::to_string(r).expect("records serialise")
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let (net_cfg, cfg) = train_configs(a)?;
    let samples = load_dataset(&a.data)?;
    create_dir(&a.out)?;
    write_json(&a.out.join(CONFIG), &json!({ "network": net_cfg, "train": cfg }))?;

    let net = MobileSal::new(net_cfg.clone())?;
    let store: ParamStore<f32> = net.init_params(a.seed)?;
    let log_path = a.out.join(LOSS_LOG);
    let mut log = String::new();
    let (store, _) = train_loop(&net, store, &samples, &cfg, |r, _| {
        log.push_str(&log_line(r));
        log.push('\n');
        log::info!("{}", log_line(r));
        data::write_atomic(&log_path, log.as_bytes())
    })?;

    checkpoint::save(&a.out.join(CHECKPOINT), &net_cfg, &store)?;
    checkpoint::save(&a.out.join(INFERENCE_CHECKPOINT), &net_cfg, &store.without_prefix("idr."))?;
    log::info!("wrote {}", a.out.display());
    Ok(())
}

fn expected_config(path: &Path) -> Result<MobileSalConfig> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Data(format!("reading {}: {e}", path.display())))?;
    let v: Value = serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let v = v.get("network").cloned().unwrap_or(v);
    serde_json::from_value(v).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

pub fn infer(a: &InferArgs) -> Result<()> {
    let expected = a.config.as_deref().map(expected_config).transpose()?;
    let (cfg, store) = checkpoint::load(&a.ckpt, expected.as_ref())?;
    let net = MobileSal::new(cfg)?;
    match (&a.rgb, &a.depth, &a.data) {
        (Some(rgb), Some(depth), _) => {
            let p = predict(
                &net,
                &store,
                &data::load_image(rgb, ImageKind::Rgb)?,
                &data::load_image(depth, ImageKind::Gray)?,
            )?;
            data::save_saliency(&p, &a.out)?;
        }
        (_, _, Some(root)) => {
            let (rgb_dir, depth_dir) = (root.join(data::RGB_DIR), root.join(data::DEPTH_DIR));
            let depth_ids = data::image_ids(&depth_dir)?;
            let ids: Vec<String> = data::image_ids(&rgb_dir)?.into_iter().filter(|id| depth_ids.contains(id)).collect();
            if ids.is_empty() {
                return Err(CliError::Data(format!("no RGB-D pairs under {}", root.display())));
            }
            create_dir(&a.out)?;
            for id in &ids {
                let rgb = data::load_image(&data::find_image(&rgb_dir, id)?, ImageKind::Rgb)?;
                let depth = data::load_image(&data::find_image(&depth_dir, id)?, ImageKind::Gray)?;
                let p = predict(&net, &store, &rgb, &depth)?;
                data::save_saliency(&p, &a.out.join(format!("{id}.png")))?;
            }
            log::info!("predicted {} maps into {}", ids.len(), a.out.display());
        }
        _ => return Err(CliError::Usage("give --rgb and --depth, or --data".into())),
    }
    Ok(())
}

/// Loads `<dir>/<id>` for every id, requiring both directories to hold the
/// same id set.
fn paired(a_dir: &Path, b_dir: &Path) -> Result<Vec<(String, PathBuf, PathBuf)>> {
    let (a, b) = (data::image_ids(a_dir)?, data::image_ids(b_dir)?);
    if a.is_empty() {
        return Err(CliError::Data(format!("no images in {}", a_dir.display())));
    }
    if a != b {
        let only_a: Vec<_> = a.difference(&b).take(5).cloned().collect();
        let only_b: Vec<_> = b.difference(&a).take(5).cloned().collect();
        return Err(CliError::Data(format!(
            "id sets differ: {} has {} ids, {} has {} (only in first: {only_a:?}, only in second: {only_b:?})",
            a_dir.display(),
            a.len(),
            b_dir.display(),
            b.len()
        )));
    }
    a.into_iter()
        .map(|id| {
            let (pa, pb) = (data::find_image(a_dir, &id)?, data::find_image(b_dir, &id)?);
            Ok((id, pa, pb))
        })
        .collect()
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let mut preds = Vec::new();
    let mut gts = Vec::new();
    for (_, p, g) in paired(&a.pred_dir, &a.gt_dir)? {
        preds.push(data::load_image(&p, ImageKind::Gray)?);
        gts.push(data::load_mask(&g)?);
    }
    let convention = match a.beta {
        BetaArg::Squared => BetaConvention::Squared,
        BetaArg::Plain => BetaConvention::Plain,
    };
    let mut report = MetricsReport::evaluate(&a.dataset, &preds, &gts, convention.beta_sq(0.3))?;
    if let (Some(rd), Some(dd)) = (&a.restored_dir, &a.depth_dir) {
        let mut restored = Vec::new();
        let mut reference = Vec::new();
        for (_, r, d) in paired(rd, dd)? {
            restored.push(data::load_image(&r, ImageKind::Gray)?);
            reference.push(data::load_image(&d, ImageKind::Gray)?);
        }
        report = report.with_restoration(&restored, &reference)?;
    }
    write_json(&a.report, &serde_json::to_value(&report).expect("report serialises"))?;
    println!(
        "{}: {} images, F_beta^max {:.4}, MAE {:.4}",
        report.dataset, report.num_images, report.f_beta_max, report.mae
    );
    Ok(())
}

pub fn stats(a: &StatsArgs) -> Result<()> {
    let cfg = MobileSalConfig {
        width_mult: a.width_mult,
        input_size: (a.input_size, a.input_size),
        ..Default::default()
    };
    let net = MobileSal::new(cfg)?;
    let store: ParamStore<f32> = net.init_params(0)?;
    let hw = (a.input_size, a.input_size);
    let eval = net.count_macs_with(&store, Mode::Eval, 1, hw)?;
    let train = net.count_macs_with(&store, Mode::Train, 1, hw)?;

    println!("width_mult {}  input {}x{}", a.width_mult, a.input_size, a.input_size);
    println!("{:<10} {:>12} {:>16} {:>16}", "scope", "params", "eval MACs", "train MACs");
    let mut scopes = serde_json::Map::new();
    for scope in Scope::ALL {
        let params = count_params(&store, scope);
        let (me, mt) = match scope {
            Scope::All => (eval.total(), train.total()),
            Scope::Inference => (eval.total(), train.total() - train.scope(Scope::Idr.name())),
            s => (eval.scope(s.name()), train.scope(s.name())),
        };
        println!("{:<10} {:>12} {:>16} {:>16}", scope.name(), params, me, mt);
        scopes.insert(
            scope.name().into(),
            json!({ "params": params, "eval_macs": me, "train_macs": mt }),
        );
    }
    let inference = count_params(&store, Scope::Inference);
    let with_idr = count_params(&store, Scope::All);
    println!("inference parameters (no IDR): {inference} ({:.3}M)", inference as f64 / 1e6);
    println!("training parameters (with IDR): {with_idr} ({:.3}M)", with_idr as f64 / 1e6);
    let report = json!({
        "width_mult": a.width_mult,
        "input_size": a.input_size,
        "params_inference": inference,
        "params_with_idr": with_idr,
        "macs_eval": eval.total(),
        "macs_train": train.total(),
        "scopes": scopes,
    });
    println!("{report}");
    if let Some(path) = &a.json {
        write_json(path, &report)?;
    }
    Ok(())
}

fn check_config(target: CheckTarget, a: &GradcheckArgs) -> GradCheckConfig {
    let mut cfg = if target == CheckTarget::Network {
        end_to_end_config(a.seed)
    } else {
        GradCheckConfig {
            seed: a.seed,
            ..Default::default()
        }
    };
    if let Some(t) = a.tolerance {
        cfg.tolerance = t;
    }
    cfg
}

pub fn gradcheck(a: &GradcheckArgs) -> Result<()> {
    let targets = CheckTarget::group(&a.block)?;
    let mut failed = Vec::new();
    let mut rows = Vec::new();
    for target in targets {
        let cfg = check_config(target, a);
        let report: GradCheckReport = match a.precision {
            Precision::F64 => run_check::<f64>(target, &cfg)?,
            Precision::F32 => run_check::<f32>(target, &cfg)?,
        };
        let verdict = if report.passed { "PASS" } else { "FAIL" };
        println!(
            "{:<10} max_rel_error {:.3e}  tolerance {:.0e}  coords {:>5}  non_smooth {:>3}  {verdict}",
            target.name(),
            report.max_rel_error,
            cfg.tolerance,
            report.coords_checked,
            report.non_smooth
        );
        if let Some(w) = report.worst.as_ref().filter(|_| !report.passed) {
            println!(
                "{:<10} worst {}[{}]: analytic {:e}, numeric {:e}",
                "", w.param, w.index, w.analytic, w.numeric
            );
        }
        if !report.passed {
            failed.push(target.name());
        }
        rows.push(json!({
            "block": target.name(),
            "max_rel_error": report.max_rel_error,
            "tolerance": cfg.tolerance,
            "epsilon": cfg.epsilon,
            "coords": report.coords_checked,
            "non_smooth": report.non_smooth,
            "passed": report.passed,
        }));
    }
    let precision = match a.precision {
        Precision::F64 => "f64",
        Precision::F32 => "f32",
    };
    println!("{}", json!({ "precision": precision, "checks": rows }));
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Numeric(format!("gradient check failed for {}", failed.join(", "))))
    }
}

pub fn synth(a: &SynthArgs) -> Result<()> {
    if a.n == 0 || a.size == 0 {
        return Err(CliError::Usage("--n and --size must be positive".into()));
    }
    let samples = synth_dataset(a.n, a.size, a.seed)?;
    create_dir(&a.out)?;
    for s in &samples {
        data::write_sample(&a.out, s)?;
    }
    log::info!("wrote {} samples to {}", samples.len(), a.out.display());
    Ok(())
}
