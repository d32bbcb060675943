use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::run_dir::RunDir;
use super::{Cli, CliError, Command, OmniCommand};
use crate::crop::{build_base_grid, position_labels, CropBox};
use crate::eval::{eval_position, probe_transfer};
use crate::model::VocoModel;
use crate::omni::{self, generate_pseudo_labels, omni_metrics_row, OmniModel, PseudoLabeledSample, OMNI_METRICS_HEADER};
use crate::real::{Precision, Real};
use crate::trainer::{load_model, MetricsWriter, Trainer, TrainerConfig};
use crate::volume::{generate_phantom, read_volume, write_manifest, write_volume, Dataset, ManifestRecord, PhantomSpec, Split};

const METRICS_QUEUE: usize = 256;

fn resolve(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.global.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.global.seed {
        cfg.set_seed(seed);
    }
    if let Some(p) = cli.global.precision {
        cfg.trainer.precision = p;
    }
    match &cli.command {
        Command::GenPhantoms { count: Some(n) } => cfg.data.count = *n,
        Command::Pretrain { steps: Some(s), .. } => cfg.trainer.steps = *s,
        Command::EvalPosition { crops: Some(c), .. } => cfg.eval.crops = *c,
        Command::Probe { task, steps, full_network, .. } => {
            if let Some(t) = task {
                cfg.probe.task = *t;
            }
            if let Some(s) = steps {
                cfg.probe.steps = *s;
            }
            cfg.probe.full_network |= *full_network;
        }
        Command::Omni(OmniCommand::PseudoLabel { threshold: Some(t), .. }) => cfg.omni.threshold = *t,
        _ => {}
    }
    cfg.data.validate()?;
    cfg.trainer.validate()?;
    cfg.omni.validate()?;
    Ok(cfg)
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::GenPhantoms { .. } => "gen-phantoms",
        Command::Pretrain { .. } => "pretrain",
        Command::Omni(OmniCommand::Stage1 { .. }) => "omni-stage1",
        Command::Omni(OmniCommand::PseudoLabel { .. }) => "omni-pseudo-label",
        Command::Omni(OmniCommand::Stage2 { .. }) => "omni-stage2",
        Command::EvalPosition { .. } => "eval-position",
        Command::Probe { .. } => "probe",
        Command::InspectLabels { .. } => "inspect-labels",
    }
}

/// Runs one parsed command line.
pub fn run(cli: &Cli) -> Result<(), CliError> {
    let cfg = resolve(cli)?;
    let dir = RunDir::create(cli.global.out.as_deref(), command_name(&cli.command), &cfg)?;
    log::info!("run directory {}", dir.path().display());
    match cfg.trainer.precision {
        Precision::F32 => dispatch::<f32>(&cli.command, &cfg, &dir),
        Precision::F64 => dispatch::<f64>(&cli.command, &cfg, &dir),
    }
}

fn dispatch<T: Real>(cmd: &Command, cfg: &RunConfig, dir: &RunDir) -> Result<(), CliError> {
    match cmd {
        Command::GenPhantoms { .. } => gen_phantoms(cfg, dir),
        Command::Pretrain { data, resume, checkpoint_every, .. } => pretrain::<T>(cfg, dir, data, resume.as_deref(), *checkpoint_every),
        Command::Omni(OmniCommand::Stage1 { data }) => omni_stage1::<T>(cfg, dir, data),
        Command::Omni(OmniCommand::PseudoLabel { data, checkpoint, .. }) => pseudo_label::<T>(cfg, dir, data, checkpoint),
        Command::Omni(OmniCommand::Stage2 { data, checkpoint, pseudo }) => omni_stage2::<T>(cfg, dir, data, checkpoint, pseudo),
        Command::EvalPosition { data, checkpoint, .. } => eval_position_cmd::<T>(cfg, dir, data, checkpoint.as_deref()),
        Command::Probe { checkpoint, .. } => probe_cmd::<T>(cfg, dir, checkpoint.as_deref()),
        Command::InspectLabels { grid, cell, offset } => inspect_labels(dir, (grid[0], grid[1]), *cell, [offset[0], offset[1]]),
    }
}

fn gen_phantoms(cfg: &RunConfig, dir: &RunDir) -> Result<(), CliError> {
    let d = &cfg.data;
    let data_dir = dir.path().join("data");
    std::fs::create_dir_all(data_dir.join("volumes"))?;
    let (labeled, eval_from) = (d.labeled_count(), d.count - d.eval_count());
    let mut records = Vec::with_capacity(d.count);
    for i in 0..d.count {
        let region = d.regions[i % d.regions.len()];
        let spec = PhantomSpec::standard(region, d.dims, d.seed);
        let mut v = generate_phantom(&spec, (i / d.regions.len()) as u64)?;
        let is_labeled = i < labeled;
        if !is_labeled {
            v = v.without_labels();
        }
        let rel = format!("volumes/{}_{i:04}.vol", region.to_string().to_lowercase());
        write_volume(&v, data_dir.join(&rel))?;
        let split = if i >= eval_from { Split::Eval } else { Split::Train };
        records.push(ManifestRecord { path: rel, region_tag: region, labeled: is_labeled, split });
    }
    let manifest = data_dir.join("manifest.jsonl");
    write_manifest(&records, &manifest)?;
    println!("wrote {} volumes ({labeled} labeled) to {}", d.count, manifest.display());
    Ok(())
}

fn load_training(data: &Path) -> Result<Dataset, CliError> {
    let ds = Dataset::load(data)?.training_view()?;
    if ds.is_empty() {
        return Err(CliError::Data(crate::volume::VolumeError::Invalid(format!("{} lists no training volumes", data.display()))));
    }
    Ok(ds)
}

fn pretrain<T: Real>(cfg: &RunConfig, dir: &RunDir, data: &Path, resume: Option<&Path>, every: Option<u64>) -> Result<(), CliError> {
    let volumes: Vec<Arc<_>> = load_training(data)?.volumes().cloned().collect();
    let tcfg = cfg.trainer.clone();
    let mut trainer = match resume {
        Some(p) => Trainer::<T>::resume(tcfg, volumes, p)?,
        None => Trainer::<T>::new(tcfg, volumes)?,
    };
    let ckpt_name = |step: u64| format!("step_{step:06}.ckpt");
    trainer.save_checkpoint(dir.checkpoint(&ckpt_name(trainer.step_index())))?;
    let writer = MetricsWriter::create(dir.metrics(), METRICS_QUEUE)?;
    let mut last = None;
    for _ in 0..cfg.trainer.steps {
        let rec = trainer.step()?;
        writer.push(&rec)?;
        if rec.step % 50 == 0 {
            log::info!("step {} l_ssl {:.4} top1 {:.2}", rec.step, rec.losses.l_ssl, rec.top1);
        }
        if every.is_some_and(|n| n > 0 && trainer.step_index() % n == 0) {
            trainer.save_checkpoint(dir.checkpoint(&ckpt_name(trainer.step_index())))?;
        }
        last = Some(rec);
    }
    writer.finish()?;
    trainer.save_checkpoint(dir.checkpoint(&ckpt_name(trainer.step_index())))?;
    trainer.save_checkpoint(dir.checkpoint("final.ckpt"))?;
    dir.write_json("reports/pretrain.json", &serde_json::json!({ "steps": trainer.step_index(), "last": last }))?;
    println!("pre-trained to step {}; checkpoint {}", trainer.step_index(), dir.checkpoint("final.ckpt").display());
    Ok(())
}

fn omni_sink(writer: &MetricsWriter) -> impl FnMut(&omni::OmniStepRecord) + '_ {
    move |r| {
        if writer.push_row(omni_metrics_row(r)).is_err() {
            log::error!("metrics writer stopped at step {}", r.step);
        }
    }
}

fn omni_stage1<T: Real>(cfg: &RunConfig, dir: &RunDir, data: &Path) -> Result<(), CliError> {
    let ds = load_training(data)?;
    let writer = MetricsWriter::with_header(dir.metrics(), OMNI_METRICS_HEADER, METRICS_QUEUE)?;
    let om = omni::stage1::<T>(&ds.labeled(), &ds.unlabeled(), &cfg.trainer, &cfg.omni, omni_sink(&writer))?;
    writer.finish()?;
    let path = dir.checkpoint("stage1.ckpt");
    om.save(&path, &cfg.trainer, serde_json::json!({ "stage": 1 }))?;
    println!("stage 1 checkpoint {}", path.display());
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PseudoRecord {
    id: String,
    confidence: f64,
    accepted: bool,
    /// Labeled copy of the volume, present for accepted samples.
    path: Option<String>,
}

fn pseudo_label<T: Real>(cfg: &RunConfig, dir: &RunDir, data: &Path, checkpoint: &Path) -> Result<(), CliError> {
    let ds = load_training(data)?;
    let om = OmniModel::<T>::load(checkpoint, &cfg.trainer, &cfg.omni)?;
    let unlabeled = ds.unlabeled();
    let samples = generate_pseudo_labels(&om, &unlabeled, cfg.omni.threshold)?;
    let mut records = Vec::with_capacity(samples.len());
    for (s, e) in samples.iter().zip(unlabeled.entries()) {
        let path = if s.accepted {
            let rel = format!("pseudo/{}", s.id.replace(['/', '\\'], "_"));
            std::fs::create_dir_all(dir.path().join("pseudo"))?;
            write_volume(&e.volume.with_labels(s.labels.clone())?, dir.path().join(&rel))?;
            Some(rel)
        } else {
            None
        };
        records.push(PseudoRecord { id: s.id.clone(), confidence: s.confidence, accepted: s.accepted, path });
    }
    let out = dir.write_json("reports/pseudo_labels.json", &records)?;
    let kept = records.iter().filter(|r| r.accepted).count();
    println!("accepted {kept} of {} pseudo labels; list {}", records.len(), out.display());
    Ok(())
}

fn omni_stage2<T: Real>(cfg: &RunConfig, dir: &RunDir, data: &Path, checkpoint: &Path, pseudo: &Path) -> Result<(), CliError> {
    let ds = load_training(data)?;
    let init = OmniModel::<T>::load(checkpoint, &cfg.trainer, &cfg.omni)?;
    let text = std::fs::read_to_string(pseudo)?;
    let records: Vec<PseudoRecord> = serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", pseudo.display())))?;
    // Pseudo volume paths are relative to the run directory of the list.
    let base = pseudo.parent().and_then(Path::parent).unwrap_or(Path::new("."));
    let mut samples = Vec::new();
    for r in records {
        let labels = match (&r.path, r.accepted) {
            (Some(p), true) => read_volume(base.join(p))?.labels().map(<[u16]>::to_vec).unwrap_or_default(),
            _ => Vec::new(),
        };
        samples.push(PseudoLabeledSample { id: r.id, confidence: r.confidence, accepted: r.accepted, labels });
    }
    let writer = MetricsWriter::with_header(dir.metrics(), OMNI_METRICS_HEADER, METRICS_QUEUE)?;
    let om = omni::stage2(init, &ds.labeled(), &samples, &ds.unlabeled(), &cfg.trainer, &cfg.omni, omni_sink(&writer))?;
    writer.finish()?;
    let path = dir.checkpoint("stage2.ckpt");
    om.save(&path, &cfg.trainer, serde_json::json!({ "stage": 2 }))?;
    println!("stage 2 checkpoint {}", path.display());
    Ok(())
}

fn eval_position_cmd<T: Real>(cfg: &RunConfig, dir: &RunDir, data: &Path, checkpoint: Option<&Path>) -> Result<(), CliError> {
    let all = Dataset::load(data)?;
    let eval = all.eval_view();
    let ds = if eval.is_empty() { all } else { eval };
    let volumes: Vec<Arc<_>> = ds.volumes().cloned().collect();
    let layout = TrainerConfig { grid_shape: cfg.eval.grid_shape, cell_size: cfg.eval.cell_size, ..cfg.trainer.clone() };
    let model: VocoModel<T> = match checkpoint {
        Some(p) => load_model(p, &layout)?,
        None => VocoModel::init(&layout.model_config()),
    };
    let report = eval_position(&model, &volumes, &cfg.eval)?;
    dir.write_json("reports/position.json", &report)?;
    dir.write_text("reports/position.txt", &report.to_text())?;
    dir.write_text("reports/confusion.csv", &report.confusion_csv())?;
    print!("{}", report.to_text());
    Ok(())
}

fn probe_cmd<T: Real>(cfg: &RunConfig, dir: &RunDir, checkpoint: Option<&Path>) -> Result<(), CliError> {
    let pretrained: Option<VocoModel<T>> = checkpoint.map(|p| load_model(p, &cfg.trainer)).transpose()?;
    let report = probe_transfer(pretrained.as_ref(), cfg.trainer.feature_dim, &cfg.probe)?;
    dir.write_json("reports/transfer.json", &report)?;
    print!("{}", report.to_text());
    Ok(())
}

/// Label grid as rows of two-decimal values, blank dots for zero.
pub fn ascii_heat_grid(values: &[f64], cols: usize) -> String {
    const RAMP: &[u8] = b" .:-=+*#%@";
    let mut s = String::new();
    for row in values.chunks(cols) {
        for &v in row {
            if v == 0.0 {
                s.push_str("   .  ");
            } else {
                let shade = RAMP[((v * (RAMP.len() - 1) as f64).round() as usize).min(RAMP.len() - 1)] as char;
                let _ = write!(s, " {v:.2}{shade}");
            }
        }
        s.push('\n');
    }
    s
}

fn inspect_labels(dir: &RunDir, grid: (usize, usize), cell: usize, offset: [usize; 2]) -> Result<(), CliError> {
    let depth = 1;
    let dims = [grid.1 * cell, grid.0 * cell, depth];
    let g = build_base_grid(dims, grid, [cell, cell, depth]).map_err(|e| CliError::Config(e.to_string()))?;
    let k = CropBox::new([offset[0], offset[1], 0], [cell, cell, depth]);
    let y = position_labels(&k, &g).map_err(|e| CliError::Config(e.to_string()))?;
    dir.write_json("reports/labels.json", &y)?;
    println!("{}", serde_json::to_string(&y).map_err(|e| CliError::Io(e.to_string()))?);
    print!("{}", ascii_heat_grid(&y.values, grid.1));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn heat_grid_marks_overlap() {
        let mut v = vec![0.0; 16];
        v[0] = 0.2;
        v[1] = 0.3;
        let g = ascii_heat_grid(&v, 4);
        assert_eq!(g.lines().count(), 4);
        assert!(g.lines().next().unwrap().contains("0.20") && g.contains("0.30"));
    }
}
