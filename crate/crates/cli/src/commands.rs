use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use segdec::checkpoint;
use segdec::config::KvFile;
use segdec::data::{generate, write_dataset, write_pgm, Dataset};
use segdec::gradsuite::{self, Case, Scope};
use segdec::network::{NetConfig, SegNet};
use segdec::training::{self, split};
use segdec::{Error, ParamStore, Result, Tape};

use crate::settings::RunConfig;

pub const TRAIN_LOG: &str = "train_log.csv";
pub const BEST_CHECKPOINT: &str = "checkpoint_best";
pub const LAST_CHECKPOINT: &str = "checkpoint_last";
pub const METRICS: &str = "metrics.csv";
pub const BENCH: &str = "bench.csv";
pub const HEATMAP_DIR: &str = "heatmap";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    All,
}

impl Split {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "all" => Ok(Split::All),
            _ => Err(Error::Config(format!("unknown split `{s}` (train, val, all)"))),
        }
    }

    fn indices(self, n: usize, val_count: usize) -> Result<Vec<usize>> {
        let (train, val) = split(n, val_count)?;
        Ok(match self {
            Split::Train => train,
            Split::Val => val,
            Split::All => (0..n).collect(),
        })
    }
}

pub fn gen(cfg: &RunConfig) -> Result<()> {
    cfg.write_resolved(&cfg.data_dir)?;
    let samples = generate(&cfg.data)?;
    write_dataset(&cfg.data_dir, &samples)?;
    println!("wrote {} samples to {}", samples.len(), cfg.data_dir.display());
    Ok(())
}

fn load_matching(cfg: &NetConfig, dir: &Path) -> Result<Dataset> {
    let ds = Dataset::load(dir)?;
    if (ds.height, ds.width) != (cfg.height, cfg.width) {
        return Err(Error::Config(format!(
            "dataset is {}x{} but the model expects {}x{} (model.height, model.width)",
            ds.height, ds.width, cfg.height, cfg.width
        )));
    }
    Ok(ds)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub final_dsc: f64,
    pub best_dsc: f64,
    pub best_epoch: usize,
}

pub fn train(cfg: &RunConfig) -> Result<TrainSummary> {
    cfg.write_resolved(&cfg.out)?;
    let ds = load_matching(&cfg.net, &cfg.data_dir)?;
    let (net, mut store) = SegNet::new(cfg.net.clone(), cfg.dtype)?;
    let net_text = cfg.net.to_kv().render();
    let mut log = fs::File::create(cfg.out.join(TRAIN_LOG))?;
    writeln!(log, "epoch,step,loss,dsc")?;
    let mut best = (f64::NEG_INFINITY, 0);
    let logs = training::train(&net, &mut store, &ds, &cfg.train, |e, store, improved| {
        writeln!(log, "{},{},{:.6},{:.4}", e.epoch, e.step, e.loss, e.dsc)?;
        println!("epoch {:>3}  step {:>5}  loss {:.4}  val dsc {:.2}", e.epoch, e.step, e.loss, e.dsc);
        if improved {
            best = (e.dsc, e.epoch);
            checkpoint::save(&cfg.out.join(BEST_CHECKPOINT), store, &net_text)?;
        }
        Ok(())
    })?;
    checkpoint::save(&cfg.out.join(LAST_CHECKPOINT), &store, &net_text)?;
    let summary = TrainSummary {
        final_dsc: logs.last().map_or(f64::NAN, |l| l.dsc),
        best_dsc: best.0,
        best_epoch: best.1,
    };
    println!(
        "final val dsc {:.2}, best {:.2} at epoch {}",
        summary.final_dsc, summary.best_dsc, summary.best_epoch
    );
    Ok(summary)
}

/// Network and parameters restored from a checkpoint directory.
pub fn restore(dir: &Path, cfg: &RunConfig) -> Result<(SegNet, ParamStore)> {
    if !dir.is_dir() {
        let msg = format!("checkpoint directory {} not found", dir.display());
        return Err(std::io::Error::new(std::io::ErrorKind::NotFound, msg).into());
    }
    let net_cfg = NetConfig::from_kv(&KvFile::parse(&checkpoint::read_config(dir)?)?)?;
    let (net, mut store) = SegNet::new(net_cfg, cfg.dtype)?;
    checkpoint::load(dir, &mut store)?;
    Ok((net, store))
}

pub fn eval(cfg: &RunConfig, ckpt: &Path, which: Split) -> Result<segdec::metrics::MetricReport> {
    cfg.write_resolved(&cfg.out)?;
    let (net, store) = restore(ckpt, cfg)?;
    let ds = load_matching(&net.config, &cfg.data_dir)?;
    let idx = which.indices(ds.len(), cfg.train.val_count)?;
    let report = training::evaluate(&net, &store, &ds, &idx, cfg.train.batch_size)?;
    fs::write(cfg.out.join(METRICS), report.to_csv())?;
    let m = report.mean();
    println!(
        "{} samples: dsc {:.2}  se {:.2}  sp {:.2}  acc {:.2}  hd95 {:.2}",
        report.len(),
        m.dsc,
        m.se,
        m.sp,
        m.acc,
        m.hd95
    );
    Ok(report)
}

/// Runs each scope, printing the worst relative error per case. Returns
/// whether every case passed.
pub fn gradcheck(scopes: &[Scope]) -> Result<bool> {
    let mut ok = true;
    for &scope in scopes {
        let start = Instant::now();
        let cases: Vec<Case> = gradsuite::run(scope)?;
        for c in &cases {
            let at = c
                .worst_entry()
                .map(|e| format!("{}[{}]", e.name, e.index))
                .unwrap_or_else(|| "-".into());
            let verdict = if c.passed() { "ok" } else { "FAIL" };
            println!(
                "{:<5} {:<28} worst {:.3e}  tol {:.0e}  {:<4}  at {at}",
                scope.as_str(),
                c.name,
                c.worst(),
                c.tol,
                verdict
            );
            ok &= c.passed();
        }
        println!("{:<5} {} cases in {:.1}s", scope.as_str(), cases.len(), start.elapsed().as_secs_f64());
    }
    println!("{}", if ok { "all gradient checks passed" } else { "gradient checks FAILED" });
    Ok(ok)
}

/// Per-module parameters and MACs as CSV, with a total row.
pub fn bench_csv(net: &SegNet, store: &ParamStore) -> Result<String> {
    let cost = net.cost(store)?;
    let mut out = String::from("module,params,macs\n");
    for r in &cost.rows {
        out.push_str(&format!("{},{},{}\n", r.module, r.params, r.macs));
    }
    out.push_str(&format!("total,{},{}\n", cost.params, cost.macs));
    Ok(out)
}

pub fn bench(cfg: &RunConfig) -> Result<()> {
    cfg.write_resolved(&cfg.out)?;
    let (net, store) = SegNet::new(cfg.net.clone(), cfg.dtype)?;
    let csv = bench_csv(&net, &store)?;
    fs::write(cfg.out.join(BENCH), &csv)?;
    print!("{csv}");
    let c = &cfg.net;
    let x = segdec::gradcheck::random_tensor(&[1, c.in_channels, c.height, c.width], 0.0, 1.0, c.seed)
        .to_dtype(cfg.dtype);
    net.infer(&store, &x)?;
    let mut times: Vec<f64> = (0..10)
        .map(|_| {
            let t = Instant::now();
            net.infer(&store, &x).map(|_| t.elapsed().as_secs_f64() * 1e3)
        })
        .collect::<Result<_>>()?;
    times.sort_by(f64::total_cmp);
    println!("forward median {:.2} ms over 10 runs (batch 1)", (times[4] + times[5]) / 2.0);
    Ok(())
}

fn min_max_u8(v: &[f64]) -> Vec<u8> {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    v.iter()
        .map(|&x| if span > 0.0 { (255.0 * (x - lo) / span).round() as u8 } else { 0 })
        .collect()
}

fn stage_of(key: &str) -> &str {
    key.split('.').next().unwrap_or(key)
}

/// Exports gate and mask maps for one sample, selected by id or index.
pub fn heatmap(cfg: &RunConfig, ckpt: &Path, sample: &str) -> Result<Vec<std::path::PathBuf>> {
    cfg.write_resolved(&cfg.out)?;
    let (net, store) = restore(ckpt, cfg)?;
    let ds = load_matching(&net.config, &cfg.data_dir)?;
    let index = ds
        .ids
        .iter()
        .position(|id| id == sample)
        .or_else(|| sample.parse::<usize>().ok().filter(|&i| i < ds.len()))
        .ok_or_else(|| Error::Config(format!("no sample `{sample}` in {}", cfg.data_dir.display())))?;
    let (image, _) = ds.batch(&[index], cfg.dtype)?;
    let mut tape = Tape::eval();
    tape.enable_taps();
    let x = tape.constant(image);
    net.forward(&mut tape, &store, x)?;

    let dir = cfg.out.join(HEATMAP_DIR);
    fs::create_dir_all(&dir)?;
    let mut written = Vec::new();
    let mut gates = String::from("stage,wavelet,fourier,spatial\n");
    let mut masks = String::from("stage,path,channel,mask\n");
    for (key, t) in tape.taps() {
        let stage = stage_of(key);
        if key.ends_with(".spatial_gate") && key.contains(".acfa.") {
            let [_, _, h, w] = t.dims4()?;
            let path = dir.join(format!("{stage}_spatial_gate.pgm"));
            write_pgm(&path, w, h, &min_max_u8(&t.data()[..h * w]))?;
            written.push(path);
        } else if key.ends_with(".tffa.gates") {
            let g: Vec<String> = t.data()[..3].iter().map(|v| format!("{v:.6}")).collect();
            gates.push_str(&format!("{stage},{}\n", g.join(",")));
        } else if let Some(path) = [".smmm.encoder_mask", ".smmm.decoder_mask"]
            .iter()
            .find(|s| key.ends_with(*s))
        {
            let c = t.dims4()?[1];
            let label = if path.contains("encoder") { "encoder" } else { "decoder" };
            for (ch, v) in t.data()[..c].iter().enumerate() {
                masks.push_str(&format!("{stage},{label},{ch},{v:.6}\n"));
            }
        }
    }
    for (name, text) in [("tffa_gates.txt", gates), ("smmm_masks.txt", masks)] {
        let path = dir.join(name);
        fs::write(&path, text)?;
        written.push(path);
    }
    println!("sample {} -> {}", ds.ids[index], dir.display());
    Ok(written)
}
