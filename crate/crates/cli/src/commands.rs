use std::fs;
use std::path::Path;

use tssl_core::data::{
    check_masks, load_dataset, load_split, save_dataset, split, synth_generate, LabelledSample,
    SplitSpec,
};
use tssl_core::engine::checkpoint;
use tssl_core::eval::miou;
use tssl_core::loss::IGNORE_INDEX;
use tssl_core::net::{AuxKind, MultiTaskNet};
use tssl_core::trainer::{
    confusion, generate_pseudo, run_pipeline, run_stage1, run_stage2, run_stage3, write_metrics_csv,
    Generation, PseudoMaskStore, StageOutcome, TrainData,
};

use crate::config::{RunConfig, SNAPSHOT_NAME};
use crate::CliError;

fn snapshot(cfg: &RunConfig) -> Result<(), CliError> {
    fs::create_dir_all(&cfg.output.dir)?;
    fs::write(cfg.output.dir.join(SNAPSHOT_NAME), cfg.to_toml())?;
    Ok(())
}

fn load_data(cfg: &RunConfig) -> Result<TrainData, CliError> {
    let (sp, val) = match &cfg.dataset.path {
        Some(dir) => {
            let sp = load_split(&dir.join("train"))?;
            let (val, _) = load_dataset(&dir.join("val"))?;
            (sp, val)
        }
        None => {
            let d = synth_generate(&cfg.dataset.synth, cfg.seeds.data)?;
            let sp = split(d.train, &SplitSpec { labelled: cfg.split.labelled, seed: cfg.seeds.data })?;
            (sp, d.val)
        }
    };
    let val: Vec<LabelledSample> = val.into_iter().map(|s| s.into_labelled()).collect::<Result<_, _>>()?;
    let classes = cfg.arch.num_classes;
    check_masks(sp.labelled.iter().map(|s| (s.id.as_str(), &s.mask)), classes, IGNORE_INDEX)?;
    check_masks(sp.hidden.iter().map(|(id, m)| (id.as_str(), m)), classes, IGNORE_INDEX)?;
    check_masks(val.iter().map(|s| (s.id.as_str(), &s.mask)), classes, IGNORE_INDEX)?;
    if let Some(s) = sp.labelled.first() {
        if s.image.shape()[0] != cfg.arch.in_channels {
            return Err(CliError::Config(format!(
                "arch.in_channels is {} but images have {} channels",
                cfg.arch.in_channels,
                s.image.shape()[0]
            )));
        }
    }
    Ok(TrainData::new(sp, val))
}

pub fn cmd_synth(cfg: &RunConfig) -> Result<(), CliError> {
    snapshot(cfg)?;
    let d = synth_generate(&cfg.dataset.synth, cfg.seeds.data)?;
    let sp = split(d.train.clone(), &SplitSpec { labelled: cfg.split.labelled, seed: cfg.seeds.data })?;
    let labelled: std::collections::BTreeSet<&str> = sp.labelled.iter().map(|s| s.id.as_str()).collect();
    let flags: Vec<bool> = d.train.iter().map(|s| labelled.contains(s.id.as_str())).collect();
    let root = cfg.output.dir.join("data");
    save_dataset(&root.join("train"), &d.train, &flags)?;
    save_dataset(&root.join("val"), &d.val, &vec![true; d.val.len()])?;
    println!(
        "wrote {} train ({} labelled) and {} val images to {}",
        d.train.len(),
        labelled.len(),
        d.val.len(),
        root.display()
    );
    Ok(())
}

fn persist(dir: &Path, o: &StageOutcome) -> Result<(), CliError> {
    checkpoint::save(&dir.join(format!("stage{}.ckpt", o.stage)), &o.checkpoint)?;
    write_metrics_csv(&dir.join(format!("metrics_stage{}.csv", o.stage)), &o.rows)?;
    println!("stage {}: val mIoU {:.4}", o.stage, o.val_miou);
    Ok(())
}

fn load_store(dir: &Path, name: &str, stage: u8) -> Result<PseudoMaskStore, CliError> {
    let p = dir.join(name);
    if !p.join("manifest.txt").exists() {
        return Err(CliError::Sequencing(format!(
            "stage {stage} needs the pseudo-masks in {}; run stage {} first",
            p.display(),
            stage - 1
        )));
    }
    PseudoMaskStore::load(&p).map_err(|e| CliError::Sequencing(e.to_string()))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

pub fn cmd_train(cfg: &RunConfig, stage: Option<u8>) -> Result<(), CliError> {
    let dir = cfg.output.dir.as_path();
    snapshot(cfg)?;
    let plan = cfg.pipeline();
    let s = &plan.settings;
    match stage {
        None => {
            let data = load_data(cfg)?;
            let r = run_pipeline(&plan, &data, Some(dir))?;
            let mut summary = String::from("stage,steps,val_miou,teacher_val_miou,pseudo_quality,checkpoint_sha256\n");
            for rec in &r.records {
                let q = match rec.stage {
                    1 => r.pseudo_quality[0],
                    2 => r.pseudo_quality[1],
                    _ => None,
                };
                summary.push_str(&format!(
                    "{},{},{:.6},{},{},{}\n",
                    rec.stage,
                    rec.steps,
                    rec.val_miou,
                    fmt_opt(rec.teacher_val_miou),
                    fmt_opt(q),
                    rec.checkpoint_hash
                ));
                println!("stage {}: val mIoU {:.4}", rec.stage, rec.val_miou);
            }
            fs::write(dir.join("summary.csv"), summary)?;
        }
        Some(1) => {
            let data = load_data(cfg)?;
            let o = run_stage1(&plan.stages[0], s, &data)?;
            persist(dir, &o)?;
            generate_pseudo(&o.net, &data.split, Generation::Stage1, &o.checkpoint_hash)?
                .save(&dir.join("pseudo_stage1"))?;
        }
        Some(2) => {
            let hat = load_store(dir, "pseudo_stage1", 2)?;
            let data = load_data(cfg)?;
            let (o, tilde) = run_stage2(&plan.stages[1], s, &data, &hat)?;
            persist(dir, &o)?;
            tilde.save(&dir.join("pseudo_stage2"))?;
        }
        Some(_) => {
            let tilde = load_store(dir, "pseudo_stage2", 3)?;
            let data = load_data(cfg)?;
            let o = run_stage3(&plan.stages[2], s, &data, &tilde)?;
            persist(dir, &o)?;
        }
    }
    Ok(())
}

fn load_net(cfg: &RunConfig, ckpt: &Path) -> Result<(MultiTaskNet, String), CliError> {
    let tensors = checkpoint::load(ckpt).map_err(|e| CliError::Io(format!("{}: {e}", ckpt.display())))?;
    let net = MultiTaskNet::build(cfg.settings().net_config(AuxKind::None), 0)
        .map_err(|e| CliError::Config(e.to_string()))?;
    net.load_f(&tensors).map_err(|e| CliError::Data(format!("{}: {e}", ckpt.display())))?;
    Ok((net, checkpoint::digest(&tensors)))
}

pub fn cmd_eval(cfg: &RunConfig, ckpt: &Path) -> Result<(), CliError> {
    snapshot(cfg)?;
    let (net, _) = load_net(cfg, ckpt)?;
    let data = load_data(cfg)?;
    let cm = confusion(&net, &data.val, cfg.arch.num_classes)?;
    let report = miou(&cm)?;
    let mut csv = String::from("class,iou\n");
    let mut text = format!("checkpoint {}\n", ckpt.display());
    for (c, iou) in report.per_class.iter().enumerate() {
        csv.push_str(&format!("{c},{}\n", fmt_opt(*iou)));
        match iou {
            Some(v) => text.push_str(&format!("class {c}: IoU {v:.4}\n")),
            None => text.push_str(&format!("class {c}: absent\n")),
        }
    }
    csv.push_str(&format!("mean,{:.6}\n", report.mean));
    text.push_str(&format!("mIoU {:.4}\n", report.mean));
    let stem = ckpt.file_stem().and_then(|s| s.to_str()).unwrap_or("ckpt");
    let out = cfg.output.dir.join("eval");
    fs::create_dir_all(&out)?;
    fs::write(out.join(format!("{stem}.csv")), csv)?;
    fs::write(out.join(format!("{stem}.txt")), &text)?;
    print!("{text}");
    Ok(())
}

pub fn cmd_pseudo(cfg: &RunConfig, ckpt: &Path, out: &Path, generation: Generation) -> Result<(), CliError> {
    snapshot(cfg)?;
    let (net, hash) = load_net(cfg, ckpt)?;
    let data = load_data(cfg)?;
    let store = generate_pseudo(&net, &data.split, generation, &hash)?;
    store.save(out)?;
    println!("wrote {} masks to {}", store.len(), out.display());
    Ok(())
}
