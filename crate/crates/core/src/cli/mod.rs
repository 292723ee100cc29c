//! Experiment runner: config handling, checkpoints and the CSV-emitting
//! commands behind the `gradfilter` binary.

pub mod checkpoint;
pub mod config;

use std::fmt::Display;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use config::Config;

use crate::conv;
use crate::cost::{self, LayerCfg};
use crate::data::{self, Dataset, SplitSpec, SynthCfg};
use crate::error::{config_err, Error, Result};
use crate::filter::{self, FilterCfg, PartialPatchMode};
use crate::spectral::{self, Map2};
use crate::tensor::{Kernel4, Tensor4};
use crate::train::{self, ConvMode, Layer, Model, TrainCfg};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Train,
    CostSweep,
    VerifyProp1,
    DcRatio,
    SnrProbe,
}

impl Command {
    pub const ALL: [Command; 5] = [
        Command::Train,
        Command::CostSweep,
        Command::VerifyProp1,
        Command::DcRatio,
        Command::SnrProbe,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::Train => "train",
            Command::CostSweep => "cost-sweep",
            Command::VerifyProp1 => "verify-prop1",
            Command::DcRatio => "dc-ratio",
            Command::SnrProbe => "snr-probe",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown command {s:?}")))
    }
}

/// Result of a successful run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Ok,
    /// The run completed but a checked property failed.
    Violation,
}

impl Outcome {
    pub fn exit_code(self) -> i32 {
        match self {
            Outcome::Ok => 0,
            Outcome::Violation => 2,
        }
    }
}

/// Exit code for an error: every failure before or during a run is a
/// validation failure.
pub fn error_exit_code(_: &Error) -> i32 {
    1
}

/// Resolves the command (explicit argument wins over the `command` key),
/// echoes the config and runs it.
pub fn run(command: Option<&str>, mut cfg: Config, out: &Path) -> Result<Outcome> {
    let name = match command {
        Some(c) => c.to_string(),
        None if !cfg.raw("command").is_empty() => cfg.raw("command").to_string(),
        None => return config_err("no command given"),
    };
    let cmd = Command::parse(&name)?;
    cfg.set("command", cmd.name())?;
    fs::create_dir_all(out)?;
    fs::write(out.join("resolved-config.txt"), cfg.resolved())?;
    match cmd {
        Command::Train => run_train(&cfg, out),
        Command::CostSweep => run_cost_sweep(&cfg, out),
        Command::VerifyProp1 => run_verify_prop1(&cfg, out),
        Command::DcRatio => run_dc_ratio(&cfg, out),
        Command::SnrProbe => run_snr_probe(&cfg, out),
    }
}

fn write_csv(path: &Path, header: &str, rows: &[String]) -> Result<()> {
    let mut text = String::with_capacity(header.len() + 1 + rows.len() * 32);
    text.push_str(header);
    text.push('\n');
    for row in rows {
        text.push_str(row);
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

fn row(fields: &[&dyn Display]) -> String {
    fields.iter().map(|f| f.to_string()).collect::<Vec<_>>().join(",")
}

// Distinct stream offsets so data, split, init and shuffle never share a
// generator state.
const SEED_DATA: u64 = 0;
const SEED_SPLIT: u64 = 1;
const SEED_HOLDOUT: u64 = 2;
const SEED_INIT: u64 = 3;
const SEED_SHUFFLE: u64 = 4;
const SEED_TRIALS: u64 = 5;

fn seed(cfg: &Config, offset: u64) -> Result<u64> {
    Ok(cfg.get::<u64>("seed")?.wrapping_add(offset))
}

fn filter_cfg(cfg: &Config) -> Result<FilterCfg> {
    let mode = match cfg.raw("partial_patch") {
        "true_mean" => PartialPatchMode::TrueMean,
        "strict_r2" => PartialPatchMode::StrictR2,
        other => return config_err(format!("partial_patch {other:?} is not true_mean or strict_r2")),
    };
    let f = FilterCfg {
        r: cfg.get("r")?,
        partial_patch_mode: mode,
    };
    f.validate()?;
    Ok(f)
}

/// Loads or generates the dataset, applies the partition selection and
/// returns `(train, val)`.
pub fn load_data(cfg: &Config) -> Result<(Dataset, Dataset)> {
    let full = match cfg.raw("data") {
        "synth" => data::synth_dataset(&SynthCfg {
            seed: seed(cfg, SEED_DATA)?,
            classes: cfg.get("classes")?,
            per_class: cfg.get("per_class")?,
            channels: cfg.get("channels")?,
            height: cfg.get("height")?,
            width: cfg.get("width")?,
            noise_sigma: cfg.get("noise")?,
        })?,
        "idx" => {
            let (Some(img), Some(lbl)) = (cfg.path("idx_images"), cfg.path("idx_labels")) else {
                return config_err("data = idx needs idx_images and idx_labels");
            };
            data::load_idx(img, lbl)?
        }
        other => return config_err(format!("data {other:?} is not synth or idx")),
    };
    let spec = SplitSpec {
        shard_count: cfg.get("shards")?,
        seed: seed(cfg, SEED_SPLIT)?,
    };
    let part = match cfg.raw("split") {
        "all" => full,
        "a" => data::noniid_split(&full, spec)?.0,
        "b" => data::noniid_split(&full, spec)?.1,
        other => return config_err(format!("split {other:?} is not all, a or b")),
    };
    data::holdout_split(&part, cfg.get("val_fraction")?, seed(cfg, SEED_HOLDOUT)?)
}

fn build_model(cfg: &Config, input: (usize, usize, usize), classes: usize) -> Result<Model> {
    let model = match cfg.path("init_checkpoint") {
        Some(p) => checkpoint::load(p)?,
        None => Model::desk_with_widths(
            input,
            classes,
            &cfg.list::<usize>("widths")?,
            cfg.get("kernel")?,
            seed(cfg, SEED_INIT)?,
        )?,
    };
    if model.input_dims() != input || model.output_dims().0 != classes {
        return config_err(format!(
            "model maps {:?} to {} classes, data is {:?} with {classes} classes",
            model.input_dims(),
            model.output_dims().0,
            input
        ));
    }
    Ok(model)
}

fn load_checkpoint(cfg: &Config) -> Result<Model> {
    match cfg.path("checkpoint") {
        Some(p) => checkpoint::load(p),
        None => config_err("checkpoint path required"),
    }
}

pub fn run_train(cfg: &Config, out: &Path) -> Result<Outcome> {
    let filter = filter_cfg(cfg)?;
    let mode = match cfg.raw("mode") {
        "vanilla" => ConvMode::Vanilla,
        "filtered" => ConvMode::Filtered(filter),
        other => return config_err(format!("mode {other:?} is not vanilla or filtered")),
    };
    let layers: usize = cfg.get("layers")?;
    let tcfg = TrainCfg {
        epochs: cfg.get("epochs")?,
        batch_size: cfg.get("batch_size")?,
        base_lr: cfg.get("lr")?,
        momentum: cfg.get("momentum")?,
        weight_decay: cfg.get("weight_decay")?,
        clip: cfg.get("clip")?,
        warmup_epochs: cfg.get("warmup_epochs")?,
        seed: seed(cfg, SEED_SHUFFLE)?,
    };
    tcfg.validate()?;

    let (train_set, val_set) = load_data(cfg)?;
    let mut model = build_model(cfg, train_set.sample_dims(), train_set.classes)?;
    model.set_active_layers(layers, mode)?;
    let metrics = train::train(&mut model, &train_set, &val_set, &tcfg)?;

    let rows: Vec<String> = metrics
        .epochs
        .iter()
        .map(|e| row(&[&e.epoch, &e.train_loss, &e.train_acc, &e.val_acc, &e.lr]))
        .collect();
    write_csv(&out.join("metrics.csv"), "epoch,train_loss,train_acc,val_acc,lr", &rows)?;
    let r = match mode {
        ConvMode::Filtered(f) => f.r,
        _ => 1,
    };
    let summary = row(&[
        &cfg.raw("mode"),
        &layers,
        &r,
        &metrics.best_val_acc,
        &metrics.bp_flops,
        &metrics.peak_stored_elements,
    ]);
    write_csv(
        &out.join("summary.csv"),
        "mode,layers,r,best_val_acc,bp_flops,stored_elements",
        &[summary],
    )?;
    checkpoint::save(&model, out.join("model.ckpt"))?;
    Ok(Outcome::Ok)
}

pub fn run_cost_sweep(cfg: &Config, out: &Path) -> Result<Outcome> {
    let layer = LayerCfg {
        c_x: cfg.get("c_x")?,
        c_y: cfg.get("c_y")?,
        h_y: cfg.get("h_y")?,
        w_y: cfg.get("w_y")?,
        h_k: cfg.get("h_k")?,
        w_k: cfg.get("w_k")?,
        h_x: cfg.get("h_x")?,
        w_x: cfg.get("w_x")?,
    };
    if !layer.is_valid() {
        return config_err("layer dims must all be >= 1");
    }
    let rs: Vec<u64> = cfg.list("r_list")?;
    if rs.is_empty() || rs.contains(&0) {
        return config_err("r_list needs at least one entry, all >= 1");
    }
    let vanilla = cost::vanilla_bp_flops(&layer);
    let min = cost::min_flops(&layer);
    let rows: Vec<String> = cost::sweep_curve(&layer, &rs)
        .iter()
        .map(|c| {
            row(&[
                &c.r,
                &c.leading_term,
                &c.overhead.kernel_sum,
                &c.overhead.gradient_filter,
                &c.overhead.input_patch_sum,
                &c.overhead_terms(),
                &c.flops,
                &vanilla,
                &min,
                &c.stored_activation_elements,
                &c.memory_saving_fraction,
            ])
        })
        .collect();
    write_csv(
        &out.join("sweep.csv"),
        "r,leading_term,kernel_sum,gradient_filter,input_patch_sum,overhead,total,vanilla,min_flops,stored_elements,saving_fraction",
        &rows,
    )?;
    Ok(Outcome::Ok)
}

fn impulse_kernel(k: usize) -> Kernel4 {
    Kernel4::from_fn([1, 1, k, k], |[_, _, i, j]| if i == k / 2 && j == k / 2 { 1.0 } else { 0.0 })
}

pub fn run_verify_prop1(cfg: &Config, out: &Path) -> Result<Outcome> {
    let trials: usize = cfg.get("trials")?;
    let patch: usize = cfg.get("patch")?;
    let k: usize = cfg.get("kernel")?;
    if k == 0 || patch < k {
        return config_err(format!("need 1 <= kernel <= patch, got kernel {k}, patch {patch}"));
    }
    let kind = cfg.raw("trial_kind");
    if !matches!(kind, "dc" | "impulse" | "constant") {
        return config_err(format!("trial_kind {kind:?} is not dc, impulse or constant"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed(cfg, SEED_TRIALS)?);
    let mut rows = Vec::with_capacity(trials);
    let mut held = 0usize;
    for t in 0..trials {
        let trial = spectral::dc_dominant_trial(&mut rng, patch, k);
        let (kernel, g_y) = match kind {
            "impulse" => (impulse_kernel(k), trial.g_y),
            "constant" => (trial.kernel, Map2::from_fn(patch, patch, |_, _| trial.g_y.at(0, 0))),
            _ => (trial.kernel, trial.g_y),
        };
        let dc = spectral::dc_ratio_of_map(&Map2::from_kernel(&kernel, 0, 0).zero_extend(patch, patch)?);
        let rep = spectral::verify_prop1(&kernel, &g_y)?;
        held += usize::from(rep.holds);
        rows.push(row(&[&t, &rep.snr_gy, &rep.snr_gx, &dc, &rep.holds]));
    }
    write_csv(&out.join("trials.csv"), "trial,snr_gy,snr_gx,dc_ratio,holds", &rows)?;
    let violations = trials - held;
    let pass = violations == 0;
    write_csv(
        &out.join("summary.csv"),
        "trials,held,violations,pass",
        &[row(&[&trials, &held, &violations, &pass])],
    )?;
    Ok(if pass { Outcome::Ok } else { Outcome::Violation })
}

pub fn run_dc_ratio(cfg: &Config, out: &Path) -> Result<Outcome> {
    let model = load_checkpoint(cfg)?;
    let mut rows = Vec::new();
    let mut summary = Vec::new();
    let mut overall = f64::INFINITY;
    for i in model.conv_indices() {
        let Layer::Conv(cl) = &model.layers()[i] else { unreachable!() };
        let rep = spectral::dc_energy_ratio(&cl.kernel);
        for co in 0..rep.out_channels {
            for ci in 0..rep.in_channels {
                rows.push(row(&[&i, &co, &ci, &rep.at(co, ci)]));
            }
        }
        summary.push(row(&[&i, &rep.aggregate]));
        overall = overall.min(rep.aggregate);
    }
    summary.push(row(&[&"all", &overall]));
    write_csv(&out.join("dc_ratio.csv"), "layer,out_channel,in_channel,ratio", &rows)?;
    write_csv(&out.join("dc_summary.csv"), "layer,min_ratio", &summary)?;
    Ok(Outcome::Ok)
}

/// SNR rows `(layer, r, snr, snr_gx)` for every conv layer of `model` on one
/// batch. `snr` compares the filtered and exact `g_y`; `snr_gx` compares the
/// resulting input gradients.
pub fn snr_probe(model: &Model, x: &Tensor4, labels: &[usize], rs: &[usize], mode: PartialPatchMode) -> Result<Vec<(usize, usize, f64, f64)>> {
    if labels.is_empty() {
        return Err(Error::Input("empty probe batch".into()));
    }
    let mut rows = Vec::new();
    for probe in model.conv_output_grads(x, labels)? {
        let Layer::Conv(cl) = &model.layers()[probe.layer] else { unreachable!() };
        let (_, h, w) = model.layer_input_dims(probe.layer);
        let exact_gx = conv::conv2d_backward_input(&probe.g_y, &cl.kernel, (h, w), cl.cfg)?;
        let ksum = filter::spatial_sum_kernel(&cl.kernel);
        for &r in rs {
            let fcfg = FilterCfg {
                r,
                partial_patch_mode: mode,
            };
            fcfg.validate()?;
            let grid = filter::filter_gradient(&probe.g_y, fcfg)?;
            let snr = spectral::measure_snr(&probe.g_y, &filter::expand(&grid))?;
            let gx = filter::filtered_backward_input(&grid, &ksum, probe.input.dims())?;
            let snr_gx = spectral::measure_snr(&exact_gx, &gx)?;
            rows.push((probe.layer, r, snr, snr_gx));
        }
    }
    Ok(rows)
}

pub fn run_snr_probe(cfg: &Config, out: &Path) -> Result<Outcome> {
    let rs: Vec<usize> = cfg.list("probe_r")?;
    if rs.is_empty() {
        return config_err("probe_r needs at least one entry");
    }
    let batch: usize = cfg.get("probe_batch")?;
    if batch == 0 {
        return Err(Error::Input("empty probe batch".into()));
    }
    let mode = filter_cfg(cfg)?.partial_patch_mode;
    let model = load_checkpoint(cfg)?;
    let (_, val) = load_data(cfg)?;
    let idx: Vec<usize> = (0..batch.min(val.len())).collect();
    let (x, labels) = val.gather(&idx);
    let rows: Vec<String> = snr_probe(&model, &x, &labels, &rs, mode)?
        .iter()
        .map(|(l, r, s, sx)| row(&[l, r, s, sx]))
        .collect();
    write_csv(&out.join("snr.csv"), "layer,r,snr,snr_gx", &rows)?;
    Ok(Outcome::Ok)
}
