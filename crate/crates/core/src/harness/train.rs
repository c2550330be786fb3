use std::io::Write;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{copy_params, copy_trunk, EpochRecord, ModelCheckpoint, CHECKPOINT_VERSION};
use super::config::RunConfig;
use super::optim::Adam;
use super::split::{few_shot_subset, split, Split, SplitName};
use crate::error::{Error, Result};
use crate::graph::TaskDataset;
use crate::model::{input_width, prepare, Instance, InstancePrediction, RprlModel};
use crate::numeric::{ParamStore, Tape};
use crate::tasks::{metric_suite, primary_metric, MetricMap, Predictions};
use crate::Task;

/// Receives every per-epoch record as it is produced.
pub type LogSink<'a> = &'a mut dyn FnMut(&EpochRecord);

/// Discards log records.
pub fn no_log(_: &EpochRecord) {}

fn divergence(e: Error) -> Error {
    match e {
        Error::Numeric(m) => Error::Divergence(m),
        other => other,
    }
}

/// Runs the model over the listed instances.
pub fn predict_units(model: &RprlModel, store: &ParamStore, insts: &[Instance], units: &[usize]) -> Result<Predictions> {
    if model.config().task == Task::Link {
        let mut ranks = Vec::new();
        for &u in units {
            if let InstancePrediction::Ranks(r) = model.predict(store, &insts[u])? {
                ranks.extend(r);
            }
        }
        Ok(Predictions::Ranking { ranks })
    } else {
        let mut scores = Vec::with_capacity(units.len());
        let mut targets = Vec::with_capacity(units.len());
        for &u in units {
            if let InstancePrediction::Binary { score, target } = model.predict(store, &insts[u])? {
                scores.push(score);
                targets.push(target);
            }
        }
        Ok(Predictions::Binary { scores, targets })
    }
}

fn run_split(cfg: &RunConfig, units: usize) -> Result<Split> {
    split(units, cfg.split, cfg.effective_split_seed())
}

/// Trains from scratch, or warm-started from `pretrain_from` unless the
/// no-pretrain ablation is set.
pub fn train(cfg: &RunConfig, data: &TaskDataset, log: LogSink) -> Result<ModelCheckpoint> {
    let warm = match (&cfg.pretrain_from, cfg.ablation.no_pretrain) {
        (Some(p), false) => Some(ModelCheckpoint::load(p)?),
        _ => None,
    };
    run(cfg, data, warm.as_ref(), log)
}

/// Warm-starts the trunk from `pretrained`, re-initializes projection and
/// head, then trains. With `zero_shot` every parameter is copied and no
/// optimization step is taken.
pub fn finetune(pretrained: &ModelCheckpoint, cfg: &RunConfig, data: &TaskDataset, log: LogSink) -> Result<ModelCheckpoint> {
    run(cfg, data, Some(pretrained), log)
}

fn run(cfg: &RunConfig, data: &TaskDataset, warm: Option<&ModelCheckpoint>, log: LogSink) -> Result<ModelCheckpoint> {
    let model_cfg = cfg.model_config(data)?;
    if cfg.zero_shot && warm.is_none() {
        return Err(Error::Config("zero-shot evaluation needs a pretrained checkpoint".into()));
    }
    let insts = prepare(data, &model_cfg)?;
    let sp = run_split(cfg, insts.len())?;
    let train_units = match cfg.few_shot {
        Some(f) => few_shot_subset(&sp.train, f, cfg.seed)?,
        None => sp.train.clone(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = ParamStore::new();
    let model = RprlModel::new(model_cfg.clone(), &mut store, &mut rng)?;
    if let Some(pre) = warm {
        let copied = if cfg.zero_shot {
            if pre.model.input_width != model_cfg.input_width {
                return Err(Error::Checkpoint(format!(
                    "zero-shot needs matching input width: checkpoint {}, data {}",
                    pre.model.input_width, model_cfg.input_width
                )));
            }
            copy_params(&pre.params, &mut store, |_| true)?
        } else {
            copy_trunk(&pre.params, &mut store)?
        };
        info!("warm start: copied {copied} tensors");
    }
    let epochs = if cfg.zero_shot { 0 } else { cfg.optimizer.epochs };
    let mut opt = Adam::new(cfg.optimizer.lr, cfg.optimizer.weight_decay);
    let mut history = Vec::new();
    let mut emit = |history: &mut Vec<EpochRecord>, epoch: usize, split: &str, metric: &str, value: f64| {
        let r = EpochRecord {
            epoch,
            split: split.to_string(),
            metric: metric.to_string(),
            value,
        };
        log(&r);
        history.push(r);
    };

    let (name, mut best) = primary_metric(cfg.task, &predict_units(&model, &store, &insts, &sp.val)?)?;
    emit(&mut history, 0, "val", name, best);
    let mut best_params = store.to_snapshot();
    let mut best_epoch = 0;
    let mut order = train_units.clone();
    for epoch in 1..=epochs {
        order.shuffle(&mut rng);
        let (mut total, mut kinetic) = (0.0, 0.0);
        for batch in order.chunks(cfg.optimizer.batch_size) {
            store.zero_grad();
            let scale = 1.0 / batch.len() as f64;
            for &u in batch {
                let mut tape = Tape::new();
                let parts = model.loss(&mut tape, &store, &insts[u]).map_err(divergence)?;
                let l = tape.scalar(parts.total);
                if !l.is_finite() {
                    return Err(Error::Divergence(format!("epoch {epoch}: loss {l} on unit {u}")));
                }
                total += l;
                kinetic += tape.scalar(parts.kinetic);
                let mut g = tape.backward(parts.total).map_err(divergence)?;
                g.scale(scale);
                g.accumulate_into(&mut store);
            }
            opt.step(&mut store);
        }
        let n = order.len().max(1) as f64;
        emit(&mut history, epoch, "train", "loss", total / n);
        emit(&mut history, epoch, "train", "kinetic_loss", kinetic / n);
        let (_, val) = primary_metric(cfg.task, &predict_units(&model, &store, &insts, &sp.val)?)?;
        emit(&mut history, epoch, "val", name, val);
        if val > best {
            best = val;
            best_epoch = epoch;
            best_params = store.to_snapshot();
        } else if epoch - best_epoch >= cfg.optimizer.patience {
            info!("early stop at epoch {epoch}; best epoch {best_epoch}");
            break;
        }
    }
    Ok(ModelCheckpoint {
        format_version: CHECKPOINT_VERSION,
        run: cfg.clone(),
        model: model_cfg,
        params: best_params,
        history,
        best_epoch,
    })
}

/// Metric suite of a checkpoint on one split of `data`, using the split
/// fractions and seed recorded in the checkpoint.
pub fn evaluate(ckpt: &ModelCheckpoint, data: &TaskDataset, split_name: SplitName) -> Result<MetricMap> {
    let preds = evaluate_predictions(ckpt, data, split_name)?;
    metric_suite(ckpt.model.task, &preds)
}

pub fn evaluate_predictions(ckpt: &ModelCheckpoint, data: &TaskDataset, split_name: SplitName) -> Result<Predictions> {
    let (model, store) = ckpt.restore()?;
    if input_width(data) != ckpt.model.input_width || data.n_relations() != ckpt.model.n_relations {
        return Err(Error::Checkpoint(format!(
            "checkpoint expects input width {} and {} relations; data has {} and {}",
            ckpt.model.input_width,
            ckpt.model.n_relations,
            input_width(data),
            data.n_relations()
        )));
    }
    let insts = prepare(data, &ckpt.model)?;
    let sp = run_split(&ckpt.run, insts.len())?;
    predict_units(&model, &store, &insts, sp.get(split_name))
}

/// One `(gamma, lambda)` point of a sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub gamma: f64,
    pub lambda: f64,
    pub seed: u64,
    pub metrics: MetricMap,
}

/// Cartesian grid from `"gamma=0,0.5,1;lambda=0,0.5"`; an omitted axis
/// keeps the configured value.
pub fn parse_grid(spec: &str, cfg: &RunConfig) -> Result<Vec<(f64, f64)>> {
    let mut gammas = vec![cfg.fusion.gamma];
    let mut lambdas = vec![cfg.fusion.lambda];
    for part in spec.split(';').map(str::trim).filter(|p| !p.is_empty()) {
        let (k, v) = part
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("sweep axis {part:?} is not name=v1,v2")))?;
        let vals = v
            .split(',')
            .map(|x| x.trim().parse::<f64>().map_err(|e| Error::Config(format!("sweep value {x:?}: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        match k.trim() {
            "gamma" => gammas = vals,
            "lambda" => lambdas = vals,
            other => return Err(Error::Config(format!("unknown sweep axis {other}"))),
        }
    }
    let grid: Vec<(f64, f64)> = gammas.iter().flat_map(|g| lambdas.iter().map(move |l| (*g, *l))).collect();
    if grid.is_empty() {
        return Err(Error::Config("empty sweep grid".into()));
    }
    Ok(grid)
}

/// Trains and tests once per grid point and repeat; repeat `r` uses seed
/// `cfg.seed + r`.
pub fn sweep(cfg: &RunConfig, data: &TaskDataset, grid: &[(f64, f64)], repeats: usize, log: LogSink) -> Result<Vec<SweepRow>> {
    if grid.is_empty() || repeats == 0 {
        return Err(Error::Config("sweep needs a non-empty grid and at least one repeat".into()));
    }
    let mut rows = Vec::with_capacity(grid.len() * repeats);
    for &(gamma, lambda) in grid {
        for r in 0..repeats {
            let mut c = cfg.clone();
            c.fusion.gamma = gamma;
            c.fusion.lambda = lambda;
            c.seed = cfg.seed + r as u64;
            let ckpt = train(&c, data, log)?;
            let metrics = evaluate(&ckpt, data, SplitName::Test)?;
            rows.push(SweepRow {
                gamma,
                lambda,
                seed: c.seed,
                metrics,
            });
        }
    }
    Ok(rows)
}

pub fn write_sweep_csv<W: Write>(mut w: W, rows: &[SweepRow]) -> Result<()> {
    let names: Vec<String> = rows.first().map(|r| r.metrics.keys().cloned().collect()).unwrap_or_default();
    writeln!(w, "gamma,lambda,seed,{}", names.join(","))?;
    for r in rows {
        let vals: Vec<String> = names.iter().map(|n| r.metrics.get(n).map_or(String::new(), |v| v.to_string())).collect();
        writeln!(w, "{},{},{},{}", r.gamma, r.lambda, r.seed, vals.join(","))?;
    }
    Ok(())
}

/// Mean and sample standard deviation per grid point and metric.
pub fn summarize(rows: &[SweepRow]) -> Vec<(f64, f64, String, f64, f64)> {
    let mut out = Vec::new();
    let mut points: Vec<(f64, f64)> = Vec::new();
    for r in rows {
        if !points.contains(&(r.gamma, r.lambda)) {
            points.push((r.gamma, r.lambda));
        }
    }
    for (g, l) in points {
        let group: Vec<&SweepRow> = rows.iter().filter(|r| r.gamma == g && r.lambda == l).collect();
        for name in group[0].metrics.keys() {
            let vals: Vec<f64> = group.iter().filter_map(|r| r.metrics.get(name).copied()).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let std = if vals.len() > 1 {
                (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (vals.len() - 1) as f64).sqrt()
            } else {
                0.0
            };
            out.push((g, l, name.clone(), mean, std));
        }
    }
    out
}

pub fn write_summary_csv<W: Write>(mut w: W, rows: &[SweepRow]) -> Result<()> {
    writeln!(w, "gamma,lambda,metric,mean,std")?;
    for (g, l, name, mean, std) in summarize(rows) {
        writeln!(w, "{g},{l},{name},{mean},{std}")?;
    }
    Ok(())
}

/// Test metrics of a checkpoint, skipping metrics undefined on the split.
pub fn test_metrics_lenient(ckpt: &ModelCheckpoint, data: &TaskDataset) -> Result<MetricMap> {
    match evaluate(ckpt, data, SplitName::Test) {
        Err(Error::UndefinedMetric(m)) => {
            warn!("test metrics incomplete: {m}");
            let preds = evaluate_predictions(ckpt, data, SplitName::Test)?;
            let (name, v) = primary_metric(ckpt.model.task, &preds)?;
            Ok(MetricMap::from([(name.to_string(), v)]))
        }
        other => other,
    }
}
