//! Implementations behind the CLI verbs.
//!
//! Every command reads one resolved [`ExperimentConfig`], writes all its
//! artifacts under the chosen output directory, and echoes the resolved
//! config next to them so any run can be reproduced from its output alone.

use std::collections::BTreeMap;
use std::f64::consts::E;
use std::fs;
use std::path::Path;
use std::sync::mpsc;
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use adaptlab_core::data::{make_dataset, save_dataset, label_histogram, Dataset};
use adaptlab_core::engine::{build_models, run_training, RunHistory};
use adaptlab_core::error::Error;
use adaptlab_core::loss::{eval_grad, eval_loss, zero_point, LossSpec};
use adaptlab_core::nn::{finite_diff_check, LayerSpec, Mode, Network, QuadraticLoss};
use adaptlab_core::tensor::Tensor;

use crate::config::{ExperimentConfig, LossConfig, VariantConfig};
use crate::svg::{Chart, Series};

/// A command failure carrying its process exit code.
#[derive(Debug)]
pub enum Failure {
    /// Bad configuration or input artifacts (exit 2).
    Config(String),
    /// A verification suite found a violation (exit 1).
    Verify(String),
    /// Numerics went non-finite mid-run (exit 3).
    Abort(String),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Verify(_) => 1,
            Failure::Config(_) => 2,
            Failure::Abort(_) => 3,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            Failure::Config(m) | Failure::Verify(m) | Failure::Abort(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Numeric(_) => Failure::Abort(e.to_string()),
            _ => Failure::Config(e.to_string()),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)
            .map_err(|e| Failure::Config(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, bytes).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))
}

fn write_echo(cfg: &ExperimentConfig, out: &Path) -> CmdResult {
    write_file(&out.join("config.json"), cfg.echo_json()?.as_bytes())
}

/// The probability grid all loss charts share: [0.01, 0.99] in steps of
/// 0.005, dense enough that a linear interpolation of the curve crosses
/// zero within one plot pixel of the true intersection.
fn prob_grid() -> Vec<f64> {
    (0..197).map(|i| 0.01 + 0.005 * i as f64).collect()
}

fn base_label(a: f64) -> String {
    if (a - E).abs() < 1e-12 {
        "a = e".into()
    } else if (a - a.round()).abs() < 1e-12 {
        format!("a = {}", a.round() as i64)
    } else {
        format!("a = {a:.3}")
    }
}

fn curve(spec: &LossSpec, label: &str) -> Result<Series, Failure> {
    let mut points = Vec::new();
    for p in prob_grid() {
        points.push((p, eval_loss(spec, p)?));
    }
    Ok(Series {
        label: label.into(),
        points,
    })
}

pub(crate) fn conservative_chart(cfg: &ExperimentConfig) -> Result<Chart, Failure> {
    let lambda = cfg.plot.lambda;
    let mut chart = Chart::new(
        &format!("Conservative loss, lambda = {lambda}"),
        "ground-truth probability",
        "loss",
    );
    for &a in &cfg.plot.bases {
        let spec = LossSpec::conservative(a, lambda);
        chart.series.push(curve(&spec, &base_label(a))?);
    }
    chart.zero_line = true;
    chart.fit_ranges();
    Ok(chart)
}

pub(crate) fn homogeneous_chart(cfg: &ExperimentConfig) -> Result<Chart, Failure> {
    let lambda = cfg.plot.lambda;
    let roster: [(LossSpec, String); 4] = [
        (
            LossSpec::conservative(E, lambda),
            format!("conservative (a = e)"),
        ),
        (LossSpec::cubic1(25.0), "cubic1".into()),
        (LossSpec::cubic2(25.0), "cubic2".into()),
        (LossSpec::cubic3(15.0, 35.0), "cubic3".into()),
    ];
    let mut chart = Chart::new(
        "Sign-switching loss roster",
        "ground-truth probability",
        "loss",
    );
    for (spec, label) in &roster {
        chart.series.push(curve(spec, label)?);
    }
    chart.zero_line = true;
    chart.fit_ranges();
    Ok(chart)
}

pub fn plot_loss(cfg: &ExperimentConfig, out: &Path) -> CmdResult {
    let conservative = conservative_chart(cfg)?;
    let homogeneous = homogeneous_chart(cfg)?;
    write_file(&out.join("conservative.svg"), conservative.render().as_bytes())?;
    write_file(&out.join("homogeneous.svg"), homogeneous.render().as_bytes())?;
    write_echo(cfg, out)?;
    for &a in &cfg.plot.bases {
        let spec = LossSpec::conservative(a, cfg.plot.lambda);
        println!(
            "{}: crosses zero at p = {:.6}",
            base_label(a),
            zero_point(&spec).expect("conservative loss has a zero point")
        );
    }
    println!("wrote {}", out.join("conservative.svg").display());
    println!("wrote {}", out.join("homogeneous.svg").display());
    Ok(())
}

/// One line of the gradient-verification report.
struct CheckLine {
    name: String,
    max_rel_err: f64,
    bound: f64,
}

impl CheckLine {
    fn passed(&self) -> bool {
        self.max_rel_err < self.bound
    }
}

/// Central-difference verification of every analytic loss derivative plus
/// backprop on three toy stacks. `plant_fault` corrupts one network
/// gradient on purpose, to prove the harness can fail.
fn gradcheck_report(plant_fault: bool) -> Result<(Vec<CheckLine>, bool), Failure> {
    let h = 1e-6;
    let losses: [(&str, LossSpec); 6] = [
        ("cross_entropy", LossSpec::cross_entropy()),
        ("focal", LossSpec::focal(5.0, 2.0)),
        ("conservative", LossSpec::conservative(E, 5.0)),
        ("cubic1", LossSpec::cubic1(25.0)),
        ("cubic2", LossSpec::cubic2(25.0)),
        ("cubic3", LossSpec::cubic3(15.0, 35.0)),
    ];
    let mut lines = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for (name, spec) in &losses {
        let mut max_rel = 0.0f64;
        for _ in 0..100 {
            let p: f64 = rng.gen_range(1e-3..1.0 - 1e-3);
            let analytic = eval_grad(spec, p)?;
            let central = (eval_loss(spec, p + h)? - eval_loss(spec, p - h)?) / (2.0 * h);
            let rel = (analytic - central).abs() / analytic.abs().max(1.0);
            max_rel = max_rel.max(rel);
        }
        lines.push(CheckLine {
            name: format!("loss {name}"),
            max_rel_err: max_rel,
            bound: 1e-5,
        });
    }

    let stacks: [Vec<LayerSpec>; 3] = [
        vec![
            LayerSpec::Conv3x3 { in_channels: 2, out_channels: 3, stride: 1 },
            LayerSpec::Relu,
            LayerSpec::Dense { in_features: 3, out_features: 2 },
        ],
        vec![
            LayerSpec::Dense { in_features: 2, out_features: 5 },
            LayerSpec::Tanh,
            LayerSpec::Conv3x3 { in_channels: 5, out_channels: 2, stride: 2 },
            LayerSpec::Sigmoid,
        ],
        vec![
            LayerSpec::Conv3x3 { in_channels: 2, out_channels: 4, stride: 1 },
            LayerSpec::SoftmaxPerPixel,
        ],
    ];
    for (i, specs) in stacks.iter().enumerate() {
        let mut net = Network::new(specs, &mut ChaCha8Rng::seed_from_u64(20 + i as u64))?;
        let input = random_tensor(&[4, 4, 2], 30 + i as u64);
        let out_shape = net.output_shape(&[4, 4, 2])?;
        let loss = QuadraticLoss {
            target: random_tensor(&out_shape, 40 + i as u64),
        };
        let fault_here = plant_fault && i == 0;
        let err = finite_diff_check(&mut net, &input, &loss, 1e-5, fault_here)?;
        lines.push(CheckLine {
            name: format!("network stack {i}"),
            max_rel_err: err,
            bound: 1e-4,
        });
    }
    let all_pass = lines.iter().all(CheckLine::passed);
    Ok((lines, all_pass))
}

fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = rng.gen_range(-1.0..1.0);
    }
    t
}

pub fn gradcheck(plant_fault: bool) -> CmdResult {
    let (lines, all_pass) = gradcheck_report(plant_fault)?;
    for line in &lines {
        println!(
            "{:<18} max relative error {:.3e} (bound {:.0e}) {}",
            line.name,
            line.max_rel_err,
            line.bound,
            if line.passed() { "ok" } else { "FAIL" }
        );
    }
    if all_pass {
        println!("gradcheck: PASS");
        Ok(())
    } else {
        println!("gradcheck: FAIL");
        Err(Failure::Verify("gradient verification failed".into()))
    }
}

pub fn gen_data(cfg: &ExperimentConfig, out: &Path) -> CmdResult {
    let dataset = make_dataset(&cfg.dataset)?;
    let dir = out.join("dataset");
    fs::create_dir_all(&dir).map_err(|e| Failure::Config(format!("{}: {e}", dir.display())))?;
    save_dataset(&dataset, &dir)?;
    write_echo(cfg, out)?;

    let k = cfg.dataset.k;
    let splits: [(&str, Vec<&Tensor>); 4] = [
        (
            "source_train",
            dataset
                .source_train
                .iter()
                .map(|s| s.labels.as_ref().expect("source labels present"))
                .collect(),
        ),
        ("target_train", dataset.target_train_labels.iter().collect()),
        (
            "target_eval",
            dataset
                .target_eval
                .iter()
                .map(|s| s.labels.as_ref().expect("eval labels present"))
                .collect(),
        ),
        (
            "source_eval",
            dataset
                .source_eval
                .iter()
                .map(|s| s.labels.as_ref().expect("eval labels present"))
                .collect(),
        ),
    ];
    for (name, labels) in &splits {
        let hist = label_histogram(labels, k)?;
        let total: u64 = hist.iter().sum();
        println!("{name}: pixels per class {hist:?} (total {total})");
    }
    println!("wrote {}", dir.display());
    Ok(())
}

fn miou_chart(history: &RunHistory) -> Chart {
    let mut chart = Chart::new("Mean IoU by training step", "step", "mean IoU");
    for (label, pick) in [
        ("source", &(|r: &adaptlab_core::engine::HistoryRecord| r.source_miou)
            as &dyn Fn(&adaptlab_core::engine::HistoryRecord) -> Option<f64>),
        ("target", &|r| r.target_miou),
    ] {
        let points: Vec<(f64, f64)> = history
            .records
            .iter()
            .filter_map(|r| pick(r).map(|m| (r.losses.step as f64, m)))
            .collect();
        chart.series.push(Series {
            label: label.into(),
            points,
        });
    }
    chart.fit_ranges();
    chart
}

pub fn train(cfg: &ExperimentConfig, out: &Path) -> CmdResult {
    let schedule = cfg.schedule()?;
    let dataset = make_dataset(&cfg.dataset)?;
    write_echo(cfg, out)?;
    match run_training(&dataset, &cfg.model, &schedule, cfg.variant()) {
        Ok(outcome) => {
            write_file(&out.join("history.csv"), outcome.history.to_csv().as_bytes())?;
            outcome.model.save(&out.join("model.ckpt"))?;
            write_file(
                &out.join("miou.svg"),
                miou_chart(&outcome.history).render().as_bytes(),
            )?;
            let evals = outcome
                .history
                .records
                .iter()
                .filter(|r| r.target_miou.is_some())
                .count();
            println!(
                "wrote {} ({} steps, {evals} evaluations)",
                out.join("history.csv").display(),
                outcome.history.records.len()
            );
            if let (Some(fin), Some((step, peak))) = (
                outcome.history.final_target_miou(),
                outcome.history.peak_target_miou(),
            ) {
                println!("final target mIoU {fin:.6}, peak {peak:.6} at step {step}");
            }
            println!("wrote {}", out.join("model.ckpt").display());
            println!("wrote {}", out.join("miou.svg").display());
            Ok(())
        }
        Err(abort) => {
            // Keep what we have for the post-mortem before reporting.
            write_file(&out.join("history.csv"), abort.history.to_csv().as_bytes())?;
            Err(Failure::Abort(abort.to_string()))
        }
    }
}

/// Builds the named battery row from the base configuration. Rows only
/// vary the variant and the segmentation losses; dataset, model, and the
/// rest of the schedule are shared.
pub(crate) fn battery_row(
    base: &ExperimentConfig,
    name: &str,
) -> Result<ExperimentConfig, Failure> {
    let mut row = base.clone();
    row.variant = VariantConfig::SegPlusGan;
    let total = row.schedule.total_steps;
    let ce_only = |row: &mut ExperimentConfig| {
        row.schedule.warm_start_steps = Some(total);
        row.schedule.seg_loss_warm = LossConfig::cross_entropy();
        row.schedule.seg_loss_main = LossConfig::cross_entropy();
    };
    let warm_into = |row: &mut ExperimentConfig, main: LossConfig| {
        row.schedule.warm_start_steps = None; // re-resolves to total / 2
        row.schedule.seg_loss_warm = LossConfig::cross_entropy();
        row.schedule.seg_loss_main = main;
    };
    match name {
        "seg_only_ce" => {
            row.variant = VariantConfig::SegOnly;
            ce_only(&mut row);
        }
        "gan_ce" => ce_only(&mut row),
        "gan_fl" => warm_into(&mut row, LossConfig::named("focal")),
        "gan_cl_warm" | "gan_cl_a_e" | "gan_cl_lambda5" => {
            warm_into(&mut row, LossConfig::conservative(E, 5.0))
        }
        "gan_cl_cold" => {
            row.schedule.warm_start_steps = Some(0);
            row.schedule.seg_loss_warm = LossConfig::cross_entropy();
            row.schedule.seg_loss_main =
                LossConfig::conservative(E, 5.0).with_clamp(-10.0, 10.0);
        }
        "gan_cubic1" => warm_into(&mut row, LossConfig::named("cubic1")),
        "gan_cubic2" => warm_into(&mut row, LossConfig::named("cubic2")),
        "gan_cubic3" => warm_into(&mut row, LossConfig::named("cubic3")),
        "gan_cl_a2" => warm_into(&mut row, LossConfig::conservative(2.0, 5.0)),
        "gan_cl_a3" => warm_into(&mut row, LossConfig::conservative(3.0, 5.0)),
        "gan_cl_a4" => warm_into(&mut row, LossConfig::conservative(4.0, 5.0)),
        "gan_cl_lambda1" => warm_into(&mut row, LossConfig::conservative(E, 1.0)),
        "gan_cl_lambda10" => warm_into(&mut row, LossConfig::conservative(E, 10.0)),
        "gan_cl_lambda20" => warm_into(&mut row, LossConfig::conservative(E, 20.0)),
        other => {
            return Err(Failure::Config(format!("unknown compare row '{other}'")));
        }
    }
    row.resolve()?;
    Ok(row)
}

#[derive(Debug, Clone)]
enum RunStatus {
    Ok(f64),
    Aborted(String),
}

pub fn compare(cfg: &ExperimentConfig, out: &Path, parallel: usize) -> CmdResult {
    let rows: Vec<(String, ExperimentConfig, String)> = cfg
        .compare
        .rows
        .iter()
        .map(|name| {
            let row = battery_row(cfg, name)?;
            let hash = row.hash()?;
            Ok((name.clone(), row, hash))
        })
        .collect::<Result<_, Failure>>()?;
    let seeds = cfg.compare.seeds.clone();
    let dataset = make_dataset(&cfg.dataset)?;

    // Rows with identical configurations (the base/weight sweeps meet the
    // default conservative row) map onto the same (hash, seed) runs.
    let mut tasks: BTreeMap<(String, u64), ExperimentConfig> = BTreeMap::new();
    for (_, row, hash) in &rows {
        for &seed in &seeds {
            tasks.entry((hash.clone(), seed)).or_insert_with(|| row.clone());
        }
    }
    let total_pairs = rows.len() * seeds.len();
    println!(
        "battery: {} rows x {} seeds -> {} runs ({} deduplicated)",
        rows.len(),
        seeds.len(),
        tasks.len(),
        total_pairs - tasks.len()
    );

    let results = execute_tasks(&dataset, tasks, parallel)?;

    let mut runs_csv = String::from("row,config_hash,seed,status,final_target_miou\n");
    for (name, _, hash) in &rows {
        for &seed in &seeds {
            let status = &results[&(hash.clone(), seed)];
            match status {
                RunStatus::Ok(m) => {
                    runs_csv.push_str(&format!("{name},{hash},{seed},ok,{m:.6}\n"))
                }
                RunStatus::Aborted(reason) => {
                    runs_csv.push_str(&format!("{name},{hash},{seed},abort,\n"));
                    println!("{name} seed {seed}: {reason}");
                }
            }
        }
    }

    // Rank rows by seed-averaged final target mIoU; rows whose every seed
    // aborted sink to the bottom.
    let mut ranked: Vec<(String, String, Option<f64>, Vec<String>)> = rows
        .iter()
        .map(|(name, _, hash)| {
            let mut oks = Vec::new();
            let mut cells = Vec::new();
            for &seed in &seeds {
                match &results[&(hash.clone(), seed)] {
                    RunStatus::Ok(m) => {
                        oks.push(*m);
                        cells.push(format!("{m:.6}"));
                    }
                    RunStatus::Aborted(_) => cells.push("abort".into()),
                }
            }
            let mean = (!oks.is_empty()).then(|| oks.iter().sum::<f64>() / oks.len() as f64);
            (name.clone(), hash.clone(), mean, cells)
        })
        .collect();
    ranked.sort_by(|a, b| match (a.2, b.2) {
        (Some(x), Some(y)) => y.partial_cmp(&x).expect("finite means").then(a.0.cmp(&b.0)),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => a.0.cmp(&b.0),
    });

    let mut compare_csv = String::from("rank,row,config_hash,mean_final_target_miou,seeds\n");
    println!("{:>4}  {:<16} {:<12}  {:>10}  per-seed", "rank", "row", "hash", "mean");
    for (i, (name, hash, mean, cells)) in ranked.iter().enumerate() {
        let mean_text = mean.map(|m| format!("{m:.6}")).unwrap_or_default();
        compare_csv.push_str(&format!(
            "{},{name},{hash},{mean_text},{}\n",
            i + 1,
            cells.join(";")
        ));
        println!(
            "{:>4}  {name:<16} {hash}  {:>10}  [{}]",
            i + 1,
            if mean_text.is_empty() { "-" } else { &mean_text },
            cells.join(", ")
        );
    }
    write_file(&out.join("compare.csv"), compare_csv.as_bytes())?;
    write_file(&out.join("runs.csv"), runs_csv.as_bytes())?;
    write_echo(cfg, out)?;
    println!("wrote {}", out.join("compare.csv").display());
    println!("wrote {}", out.join("runs.csv").display());
    Ok(())
}

/// Runs every battery task, optionally across worker threads. Independent
/// runs share nothing but the immutable dataset, and results are keyed, so
/// the outcome does not depend on scheduling order.
fn execute_tasks(
    dataset: &Dataset,
    tasks: BTreeMap<(String, u64), ExperimentConfig>,
    parallel: usize,
) -> Result<BTreeMap<(String, u64), RunStatus>, Failure> {
    let task_list: Vec<((String, u64), ExperimentConfig)> = tasks.into_iter().collect();
    let run_one = |key: &(String, u64), row: &ExperimentConfig| -> Result<RunStatus, Failure> {
        let mut schedule = row.schedule()?;
        schedule.seed = key.1;
        Ok(match run_training(dataset, &row.model, &schedule, row.variant()) {
            Ok(outcome) => match outcome.history.final_target_miou() {
                Some(m) => RunStatus::Ok(m),
                None => RunStatus::Aborted("run recorded no evaluations".into()),
            },
            Err(abort) => RunStatus::Aborted(abort.to_string()),
        })
    };

    if parallel <= 1 {
        let mut results = BTreeMap::new();
        for (key, row) in &task_list {
            results.insert(key.clone(), run_one(key, row)?);
        }
        return Ok(results);
    }

    let cursor = Mutex::new(0usize);
    let (tx, rx) = mpsc::channel::<((String, u64), Result<RunStatus, String>)>();
    std::thread::scope(|scope| {
        for _ in 0..parallel.min(task_list.len()) {
            let tx = tx.clone();
            let cursor = &cursor;
            let task_list = &task_list;
            scope.spawn(move || loop {
                let idx = {
                    let mut c = cursor.lock().expect("cursor lock");
                    let i = *c;
                    *c += 1;
                    i
                };
                let Some((key, row)) = task_list.get(idx) else {
                    break;
                };
                let status = run_one(key, row).map_err(|f| f.message().to_string());
                if tx.send((key.clone(), status)).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        let mut results = BTreeMap::new();
        for (key, status) in rx {
            results.insert(key, status.map_err(Failure::Config)?);
        }
        Ok(results)
    })
}

pub fn export_features(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    out: &Path,
) -> CmdResult {
    let dataset = make_dataset(&cfg.dataset)?;
    let mut model = build_models(&cfg.dataset, &cfg.model, cfg.schedule.seed)?;
    model.load(checkpoint)?;

    let stride = cfg.export.pixel_stride;
    let k = cfg.dataset.k;
    let mut csv = String::from("domain,class");
    for ch in 0..cfg.model.embed_channels {
        csv.push_str(&format!(",feat_{ch}"));
    }
    csv.push('\n');
    let mut rows = 0usize;
    for (domain, samples) in [
        ("source", &dataset.source_eval),
        ("target", &dataset.target_eval),
    ] {
        for sample in samples.iter() {
            let labels = sample
                .labels
                .as_ref()
                .ok_or_else(|| Error::Data("export split carries no labels".into()))?;
            let trace = model.encoder.forward(&sample.features, Mode::Eval, None)?;
            let feats = trace.output();
            let (h, w) = (feats.shape()[0], feats.shape()[1]);
            for y in (0..h).step_by(stride) {
                for x in (0..w).step_by(stride) {
                    csv.push_str(&format!("{domain},{}", labels.label_at(y, x, k)?));
                    for ch in 0..cfg.model.embed_channels {
                        csv.push_str(&format!(",{:.6}", feats.at3(y, x, ch)));
                    }
                    csv.push('\n');
                    rows += 1;
                }
            }
        }
    }
    write_file(&out.join("features.csv"), csv.as_bytes())?;
    write_echo(cfg, out)?;
    println!("wrote {} ({rows} rows)", out.join("features.csv").display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use adaptlab_core::loss::INV_E;

    #[test]
    fn loss_curves_cross_zero_within_one_pixel() {
        let mut cfg = ExperimentConfig::default();
        cfg.resolve().unwrap();
        let chart = conservative_chart(&cfg).unwrap();
        for (series, &a) in chart.series.iter().zip(&cfg.plot.bases) {
            let crossing = series
                .points
                .windows(2)
                .find(|w| w[0].1 > 0.0 && w[1].1 <= 0.0)
                .map(|w| {
                    let (x0, y0) = w[0];
                    let (x1, y1) = w[1];
                    x0 + (x1 - x0) * y0 / (y0 - y1)
                })
                .expect("curve changes sign");
            let drift = (chart.map_x(crossing) - chart.map_x(1.0 / a)).abs();
            assert!(drift <= 1.0, "base {a}: crossing {drift:.3} px off");
        }
    }

    #[test]
    fn homogeneous_roster_crosses_at_documented_points() {
        let mut cfg = ExperimentConfig::default();
        cfg.resolve().unwrap();
        let chart = homogeneous_chart(&cfg).unwrap();
        let expected = [INV_E, 0.5, INV_E, INV_E];
        for (series, want) in chart.series.iter().zip(expected) {
            let crossing = series
                .points
                .windows(2)
                .find(|w| w[0].1 > 0.0 && w[1].1 <= 0.0)
                .map(|w| {
                    let (x0, y0) = w[0];
                    let (x1, y1) = w[1];
                    x0 + (x1 - x0) * y0 / (y0 - y1)
                })
                .expect("curve changes sign");
            assert!(
                (chart.map_x(crossing) - chart.map_x(want)).abs() <= 1.0,
                "{}: crossing at {crossing:.4}, want near {want:.4}",
                series.label
            );
        }
    }

    #[test]
    fn lambda_scales_conservative_chart_vertically() {
        let mut base = ExperimentConfig::default();
        base.resolve().unwrap();
        let mut scaled = base.clone();
        scaled.plot.lambda = 5.0;
        let a = conservative_chart(&base).unwrap();
        let b = conservative_chart(&scaled).unwrap();
        for (sa, sb) in a.series.iter().zip(&b.series) {
            for ((_, ya), (_, yb)) in sa.points.iter().zip(&sb.points) {
                assert!((yb - 5.0 * ya).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gradcheck_passes_clean_and_trips_on_planted_fault() {
        let (lines, ok) = gradcheck_report(false).unwrap();
        assert!(ok, "clean gradcheck must pass");
        assert_eq!(lines.len(), 9);

        let (_, ok) = gradcheck_report(true).unwrap();
        assert!(!ok, "planted fault must be detected");
    }

    #[test]
    fn battery_rows_resolve_and_sweeps_meet_the_default_row() {
        let mut base = ExperimentConfig::default();
        base.resolve().unwrap();
        let warm = battery_row(&base, "gan_cl_warm").unwrap();
        for alias in ["gan_cl_a_e", "gan_cl_lambda5"] {
            let row = battery_row(&base, alias).unwrap();
            assert_eq!(row.hash().unwrap(), warm.hash().unwrap(), "{alias}");
        }
        let cold = battery_row(&base, "gan_cl_cold").unwrap();
        assert_ne!(cold.hash().unwrap(), warm.hash().unwrap());
        assert_eq!(cold.schedule.warm_start_steps, Some(0));
        assert_eq!(cold.schedule.seg_loss_main.clamp, Some((-10.0, 10.0)));

        let seg = battery_row(&base, "seg_only_ce").unwrap();
        assert_eq!(seg.variant, VariantConfig::SegOnly);
        assert_eq!(
            seg.schedule.warm_start_steps,
            Some(seg.schedule.total_steps)
        );
        assert!(battery_row(&base, "gan_cl_a5").is_err());
    }

    #[test]
    fn failure_exit_codes() {
        assert_eq!(Failure::Verify("v".into()).exit_code(), 1);
        assert_eq!(Failure::Config("c".into()).exit_code(), 2);
        assert_eq!(Failure::Abort("a".into()).exit_code(), 3);
        let from_numeric: Failure = Error::Numeric("nan".into()).into();
        assert_eq!(from_numeric.exit_code(), 3);
        let from_config: Failure = Error::Config("bad".into()).into();
        assert_eq!(from_config.exit_code(), 2);
    }
}
