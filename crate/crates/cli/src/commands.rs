use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use kansae::data::ksck::Checkpoint;
use kansae::data::synth::{write_ground_truth, SynthGroundTruth};
use kansae::data::{
    load_checkpoint, read_activations, save_checkpoint, write_activations, ActivationStore,
    SynthModel,
};
use kansae::metrics::{evaluate, EvalOptions, MetricsReport, RegionSpec};
use kansae::spline::alive_set;
use kansae::steer::{
    dose_response, regional_response_map, CellReadout, DownstreamMap, LinearReadout,
    QuadraticReadout,
};
use kansae::train::{alive_relu, TauSpec, Trainer};
use kansae::{Error, Matrix, Mode, SaeParams};
use serde::Serialize;

use crate::config::{resolve, DownstreamSpec, ExperimentConfig};
use crate::Failure;

pub struct Ctx {
    pub cfg: ExperimentConfig,
    /// Directory of the config file; base for relative paths.
    pub base: PathBuf,
    pub out: PathBuf,
    pub force: bool,
}

impl Ctx {
    fn path(&self, p: &Path) -> PathBuf {
        resolve(&self.base, p)
    }

    fn out_file(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn read_store(&self, p: &Path) -> Result<ActivationStore, Failure> {
        let path = self.path(p);
        let store = read_activations(&path)
            .map_err(|e| Failure::from_core(e, format!("reading {}", path.display())))?;
        if let Some(d) = self.cfg.data.as_ref().and_then(|d| d.d) {
            if store.d() != d {
                return Err(Failure::config(anyhow!(
                    "{} has d = {} but the config expects {d}",
                    path.display(),
                    store.d()
                )));
            }
        }
        Ok(store)
    }

    fn read_checkpoint(&self, p: &Path) -> Result<Checkpoint, Failure> {
        let path = self.path(p);
        load_checkpoint(&path)
            .map_err(|e| Failure::from_core(e, format!("reading {}", path.display())))
    }

    fn eval_path(&self, explicit: Option<&PathBuf>) -> Result<PathBuf, Failure> {
        explicit
            .cloned()
            .or_else(|| self.cfg.data.as_ref().and_then(|d| d.eval.clone()))
            .or_else(|| self.cfg.data.as_ref().map(|d| d.train.clone()))
            .ok_or_else(|| {
                Failure::config(anyhow!("no evaluation store: set data.eval or data.train"))
            })
    }
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), Failure> {
    fs::write(path, bytes)
        .with_context(|| format!("writing {}", path.display()))
        .map_err(Failure::io)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), Failure> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Failure::config(e.into()))?;
    s.push('\n');
    write(path, s)
}

fn core<T>(r: kansae::Result<T>, what: &str) -> Result<T, Failure> {
    r.map_err(|e| Failure::from_core(e, what.to_string()))
}

fn check_d(store: &ActivationStore, params: &SaeParams, what: &str) -> Result<(), Failure> {
    if store.d() != params.d() {
        return Err(Failure::config(anyhow!(
            "{what}: store has d = {} but the model has d = {}",
            store.d(),
            params.d()
        )));
    }
    Ok(())
}

pub fn synth(ctx: &Ctx) -> Result<(), Failure> {
    let section = ctx
        .cfg
        .synth
        .as_ref()
        .ok_or_else(|| Failure::config(anyhow!("config has no `synth` section")))?;
    let g = &section.generator;
    core(g.validate(), "synthetic generator config")?;
    if section.heldout_tokens > 0 {
        let mut h = g.clone();
        h.n_tokens = section.heldout_tokens;
        core(h.validate(), "held-out store size")?;
    }
    let model = core(SynthModel::new(g), "synthetic generator")?;
    let (store, truth) = core(model.store(g.n_tokens, "synth/tokens"), "generating tokens")?;
    write_store(&store, &ctx.out_file("activations.kact"))?;
    write_truth(
        &truth,
        &ctx.out_file("truth.json"),
        &ctx.out_file("truth.kcod"),
    )?;
    if section.heldout_tokens > 0 {
        let (held, held_truth) = core(
            model.store(section.heldout_tokens, "synth/heldout"),
            "generating held-out tokens",
        )?;
        write_store(&held, &ctx.out_file("heldout.kact"))?;
        write_truth(
            &held_truth,
            &ctx.out_file("heldout_truth.json"),
            &ctx.out_file("heldout_truth.kcod"),
        )?;
    }
    Ok(())
}

fn write_store(store: &ActivationStore, path: &Path) -> Result<(), Failure> {
    write_activations(store, path)
        .map_err(|e| Failure::from_core(e, format!("writing {}", path.display())))
}

fn write_truth(t: &SynthGroundTruth, json: &Path, codes: &Path) -> Result<(), Failure> {
    write_ground_truth(t, json, codes)
        .map_err(|e| Failure::from_core(e, format!("writing {}", json.display())))
}

#[derive(Serialize)]
struct AliveFile {
    mode: Mode,
    m: usize,
    criterion: String,
    tau: Option<f64>,
    n_alive: usize,
    alive: Vec<usize>,
}

/// KAN: control-point threshold. ReLU: ever activated on `x`.
fn alive_for(
    params: &SaeParams,
    tau: Option<f64>,
    x: &Matrix,
    eps: f64,
) -> kansae::Result<(Vec<usize>, String)> {
    match &params.bank {
        Some(bank) => {
            let t = tau.unwrap_or_else(|| TauSpec::default().resolve(&[]));
            Ok((alive_set(bank, t), format!("max |c| >= {t}")))
        }
        None => Ok((
            alive_relu(params, x, eps)?,
            format!("z > {eps} on some token"),
        )),
    }
}

pub fn train(ctx: &Ctx) -> Result<(), Failure> {
    let cfg = ctx
        .cfg
        .train
        .clone()
        .ok_or_else(|| Failure::config(anyhow!("config has no `train` section")))?;
    core(cfg.validate(), "train config")?;
    let data = ctx
        .cfg
        .data
        .as_ref()
        .ok_or_else(|| Failure::config(anyhow!("config has no `data` section")))?;
    let store = ctx.read_store(&data.train)?;
    let eval = match &data.eval {
        Some(p) => Some(ctx.read_store(p)?),
        None => None,
    };

    let mode = cfg.mode.as_str();
    let ck_path = ctx.out_file(&format!("{mode}.ksck"));
    let log_path = ctx.out_file(&format!("{mode}.train_log.jsonl"));
    let save = |t: &Trainer| -> Result<(), Failure> {
        let ck = core(t.checkpoint(), "building checkpoint")?;
        save_checkpoint(&ck, &ck_path)
            .map_err(|e| Failure::from_core(e, format!("writing {}", ck_path.display())))?;
        write(&log_path, core(t.log().to_jsonl(), "serialising log")?)
    };

    let mut trainer = core(Trainer::new(cfg.clone(), &store), "initialising training")?;
    while trainer.epochs_done() < cfg.epochs {
        if let Err(e) = trainer.run_epoch() {
            // The trainer has rolled back to the last completed epoch.
            save(&trainer)?;
            return Err(Failure::from_core(e, "training".into()));
        }
        let every = cfg.checkpoint_every;
        if every > 0 && trainer.epochs_done() % every == 0 && trainer.epochs_done() < cfg.epochs {
            save(&trainer)?;
        }
    }
    save(&trainer)?;

    let ck = core(trainer.checkpoint(), "building checkpoint")?;
    let x_alive = match &eval {
        Some(e) => e.to_matrix(),
        None => store.to_matrix(),
    };
    let (alive, criterion) = core(
        alive_for(&ck.params, ck.tau, &x_alive, cfg.activation_eps),
        "alive set",
    )?;
    write_json(
        &ctx.out_file(&format!("{mode}.alive.json")),
        &AliveFile {
            mode: cfg.mode,
            m: cfg.m,
            criterion,
            tau: ck.tau,
            n_alive: alive.len(),
            alive,
        },
    )
}

#[derive(Serialize)]
struct CompareFile {
    a: String,
    b: String,
    reports: [MetricsReport; 2],
}

fn report(
    ctx: &Ctx,
    ck: &Checkpoint,
    store: &ActivationStore,
    region: RegionSpec,
) -> Result<MetricsReport, Failure> {
    let c = ctx.cfg.compare.as_ref().expect("checked by caller");
    let x = store.to_matrix();
    let tau = match (c.tau, &ck.params.bank) {
        (Some(spec), Some(bank)) => Some(spec.resolve(&bank.row_maxima())),
        _ => ck.tau,
    };
    let (alive, _) = core(alive_for(&ck.params, tau, &x, 0.0), "alive set")?;
    let truth = match ctx.cfg.data.as_ref().and_then(|d| d.truth.as_ref()) {
        Some(p) => {
            let json = ctx.path(p);
            let codes = json.with_extension("kcod");
            Some(
                kansae::data::synth::read_ground_truth(&json, &codes)
                    .map_err(|e| Failure::from_core(e, format!("reading {}", json.display())))?,
            )
        }
        None => None,
    };
    let opts = EvalOptions {
        grid: store.meta(),
        region,
        r_threshold: c.r_threshold,
        shape_samples: c.shape_samples,
        truth: truth.as_ref().map(|t| &t.dictionary),
    };
    core(evaluate(&ck.params, &alive, &x, &opts), "evaluating")
}

pub fn compare(ctx: &Ctx) -> Result<(), Failure> {
    let c = ctx
        .cfg
        .compare
        .as_ref()
        .ok_or_else(|| Failure::config(anyhow!("config has no `compare` section")))?;
    let store = ctx.read_store(&ctx.eval_path(c.eval.as_ref())?)?;
    let a = ctx.read_checkpoint(&c.a)?;
    let b = ctx.read_checkpoint(&c.b)?;
    check_d(&store, &a.params, "checkpoint a")?;
    check_d(&store, &b.params, "checkpoint b")?;
    let ra = report(ctx, &a, &store, c.region)?;
    let rb = report(ctx, &b, &store, c.region)?;

    let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut csv = String::from("metric,a,b\n");
    for ((label, va), (_, vb)) in ra.rows().into_iter().zip(rb.rows()) {
        csv.push_str(&format!("{label},{},{}\n", fmt(va), fmt(vb)));
    }
    write(&ctx.out_file("compare.csv"), csv)?;
    write_json(
        &ctx.out_file("compare.json"),
        &CompareFile {
            a: c.a.display().to_string(),
            b: c.b.display().to_string(),
            reports: [ra, rb],
        },
    )
}

pub fn steer(ctx: &Ctx) -> Result<(), Failure> {
    let s = ctx
        .cfg
        .steer
        .as_ref()
        .ok_or_else(|| Failure::config(anyhow!("config has no `steer` section")))?;
    let ck = ctx.read_checkpoint(&s.checkpoint)?;
    let params = &ck.params;
    if s.feature >= params.m() {
        return Err(Failure::config(anyhow!(
            "feature {} out of range for M = {}",
            s.feature,
            params.m()
        )));
    }
    let store = ctx.read_store(&ctx.eval_path(s.eval.as_ref())?)?;
    check_d(&store, params, "steering base")?;
    let x = store.to_matrix();

    let (alive, _) = core(alive_for(params, ck.tau, &x, 0.0), "alive set")?;
    if !alive.contains(&s.feature) && !ctx.force {
        return Err(Failure::config(anyhow!(
            "feature {} is dead; pass --force to steer it anyway",
            s.feature
        )));
    }

    let d = params.d();
    let down: Box<dyn DownstreamMap> = match &s.downstream {
        DownstreamSpec::Linear { seed } => Box::new(LinearReadout::seeded(d, *seed)),
        DownstreamSpec::Quadratic { seed } => Box::new(QuadraticReadout::seeded(d, *seed)),
        DownstreamSpec::Regional { seed, region } => {
            let meta = store.meta().ok_or_else(|| {
                Failure::config(anyhow!("regional downstream needs a gridded store"))
            })?;
            Box::new(core(
                CellReadout::regional(d, meta, region, *seed),
                "regional readout",
            )?)
        }
    };

    let dr = core(
        dose_response(down.as_ref(), params, s.feature, &s.alphas, &x),
        "dose response",
    )?;
    write_json(&ctx.out_file("steer.json"), &dr)?;
    write(&ctx.out_file("steer.csv"), dr.to_csv())?;

    if let Some(alpha) = s.anomaly_alpha {
        let meta = store
            .meta()
            .ok_or_else(|| Failure::config(anyhow!("anomaly map needs a gridded store")))?;
        let map = core(
            regional_response_map(down.as_ref(), params, s.feature, alpha, &x, meta),
            "anomaly map",
        )?;
        let mut csv = String::from("row,col,lat,lon,anomaly\n");
        for r in 0..map.rows() {
            for c in 0..map.cols() {
                let (lat, lon) = (meta.cell_lat(r), meta.cell_lon(c));
                csv.push_str(&format!("{r},{c},{lat},{lon},{}\n", map.get(r, c)));
            }
        }
        write(&ctx.out_file("anomaly.csv"), csv)?;
    }
    Ok(())
}

/// Surfaces a core error with the exit code its kind maps to.
pub fn classify(e: &Error) -> u8 {
    match e {
        Error::Io(_) => crate::EXIT_IO,
        Error::NonFinite { .. } | Error::NonFiniteLoss { .. } => crate::EXIT_NUMERIC,
        _ => crate::EXIT_CONFIG,
    }
}
