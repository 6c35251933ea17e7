use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use modalign::amk_mmd::{bandwidth_ladder, median_bandwidth, mmd2_per_kernel, mmd2_unbiased, pairwise_sq_dists, KernelParams};
use modalign::encoder::EncoderParams;
use modalign::harness::data::{example_images, modality_mmd, ModalitySamples};
use modalign::harness::{
    check_compatible, evaluate, evaluate_self, generate, train, Ablation, DataMode, EpochLog, ExperimentConfig,
    MetricsReport,
};
use modalign::pesam::{
    build_log_gabor_bank, edge_attention, estimate_noise_threshold, phase_congruency, AttentionParams, LogGaborConfig,
    PcParams,
};
use modalign::{crop_upper_body, Error, Exec, GrayImage, Result};

use crate::csv_input::read_matrix;
use crate::output::{fmt_f64, write_atomic, write_json, Csv};
use crate::{cells, Cli, Command, EvalArgs, MmdArgs, PcMapArgs, SweepArgs, SweepAxis};

pub const CHECKPOINT: &str = "checkpoint.bin";
pub const LOSSES: &str = "losses.csv";
pub const METRICS: &str = "metrics.json";

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Gen => cmd_gen(cli),
        Command::Train => cmd_train(cli),
        Command::Eval(a) => cmd_eval(cli, a),
        Command::Sweep(a) => cmd_sweep(cli, a),
        Command::Mmd(a) => cmd_mmd(cli, a),
        Command::PcMap(a) => cmd_pc_map(cli, a),
    }
}

/// Config from `--config` (or defaults) with `--seed` applied.
pub fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
            ExperimentConfig::from_json(&text)?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Serialize)]
struct DatasetSummary {
    mode: DataMode,
    seed: u64,
    train_identities: usize,
    test_identities: usize,
    samples_per_identity: usize,
    tokens: usize,
    token_dim: usize,
    train_samples: usize,
    test_samples: usize,
    map_separation: Option<f64>,
    modality_mmd: f64,
}

fn samples_csv(s: &ModalitySamples) -> Csv {
    let (l, d) = (s.global.tokens_per_sample, s.global.tokens.cols());
    let mut header = vec!["label".to_string()];
    for prefix in ["g", "p"] {
        for t in 0..l {
            header.extend((0..d).map(|c| format!("{prefix}{t}_{c}")));
        }
    }
    let mut csv = Csv::new(&header);
    for i in 0..s.len() {
        let mut row = cells![s.labels[i]];
        for stream in [&s.global, &s.part] {
            let block = stream.tokens.slice_rows(i * l, (i + 1) * l);
            row.extend(block.as_slice().iter().map(|&v| v.into()));
        }
        csv.row(row);
    }
    csv
}

fn cmd_gen(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    let ds = generate(&cfg)?;
    let out = &cli.out;
    for (name, s) in [
        ("train_rgb.csv", &ds.train.rgb),
        ("train_ir.csv", &ds.train.ir),
        ("test_rgb.csv", &ds.test.rgb),
        ("test_ir.csv", &ds.test.ir),
    ] {
        samples_csv(s).write(&out.join(name))?;
    }
    if cfg.data.mode == DataMode::Image {
        for (id, rgb, ir) in example_images(&cfg)? {
            write_atomic(&out.join(format!("images/id{id:03}_rgb.pgm")), &rgb.to_pgm_bytes())?;
            write_atomic(&out.join(format!("images/id{id:03}_ir.pgm")), &ir.to_pgm_bytes())?;
            let upper = crop_upper_body(&ir, cfg.data.ubp)?;
            write_atomic(&out.join(format!("images/id{id:03}_ir_upper.pgm")), &upper.to_pgm_bytes())?;
        }
    }
    let summary = DatasetSummary {
        mode: cfg.data.mode,
        seed: cfg.seed,
        train_identities: cfg.data.identities,
        test_identities: cfg.data.test_identities,
        samples_per_identity: cfg.data.samples_per_identity,
        tokens: ds.train.rgb.global.tokens_per_sample,
        token_dim: cfg.data.token_dim,
        train_samples: ds.train.rgb.len(),
        test_samples: ds.test.rgb.len(),
        map_separation: ds.spec.as_ref().map(|s| s.map_separation()),
        modality_mmd: modality_mmd(&ds.train, cfg.kernel.kernels, cfg.kernel.gamma)?,
    };
    write_json(&out.join("config.json"), &cfg)?;
    write_json(&out.join("dataset.json"), &summary)?;
    println!("wrote dataset to {}", out.display());
    Ok(())
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    seed: u64,
    epochs: usize,
    parameters: usize,
    initial_total: Option<f64>,
    final_total: Option<f64>,
    kernel_logits: &'a [f64],
}

pub fn losses_csv(log: &[EpochLog]) -> Csv {
    let mut csv = Csv::new(&["epoch", "lr", "total", "id", "tri", "imdal", "idal"]);
    for l in log {
        csv.row(cells![l.epoch, l.lr, l.total, l.id, l.tri, l.imdal, l.idal]);
    }
    csv
}

fn cmd_train(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    let ds = generate(&cfg)?;
    let outcome = train(&cfg, &ds.train)?;
    if !outcome.params.is_finite() {
        return Err(Error::Contract("training produced non-finite parameters".into()));
    }
    let out = &cli.out;
    write_atomic(&out.join(CHECKPOINT), &outcome.params.to_checkpoint_bytes())?;
    losses_csv(&outcome.log).write(&out.join(LOSSES))?;
    write_json(&out.join("config.json"), &cfg)?;
    let summary = TrainSummary {
        seed: cfg.seed,
        epochs: cfg.train.epochs,
        parameters: outcome.params.num_scalars(),
        initial_total: outcome.log.first().map(|l| l.total),
        final_total: outcome.log.last().map(|l| l.total),
        kernel_logits: &outcome.kernel_logits,
    };
    write_json(&out.join("train.json"), &summary)?;
    if let (Some(a), Some(b)) = (summary.initial_total, summary.final_total) {
        println!("trained {} epochs: loss {} -> {}", cfg.train.epochs, fmt_f64(a), fmt_f64(b));
    }
    Ok(())
}

#[derive(Serialize)]
pub struct EvalOutput<'a> {
    pub seed: u64,
    pub ablation: Ablation,
    #[serde(flatten)]
    pub metrics: &'a MetricsReport,
}

fn read_params(path: &Path) -> Result<EncoderParams> {
    let bytes = fs::read(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    EncoderParams::from_checkpoint_bytes(&bytes)
}

fn metrics_csv(seed: u64, m: &MetricsReport) -> Csv {
    let mut csv = Csv::new(&[
        "seed", "rank1", "ir_to_rgb_rank1", "rgb_to_ir_rank1", "ir_to_rgb_map", "rgb_to_ir_map", "ir_to_rgb_minp",
        "rgb_to_ir_minp", "intra_mean", "inter_mean", "gap",
    ]);
    let (a, b) = (&m.ir_to_rgb, &m.rgb_to_ir);
    csv.row(cells![
        seed,
        m.rank1,
        a.rank1(),
        b.rank1(),
        a.map,
        b.map,
        a.minp,
        b.minp,
        m.distance.intra_mean,
        m.distance.inter_mean,
        m.distance.gap
    ]);
    csv
}

fn cmc_csv(m: &MetricsReport) -> Csv {
    let mut csv = Csv::new(&["rank", "ir_to_rgb", "rgb_to_ir"]);
    for (k, (a, b)) in m.ir_to_rgb.curve.iter().zip(&m.rgb_to_ir.curve).enumerate() {
        csv.row(cells![k + 1, *a, *b]);
    }
    csv
}

fn cmd_eval(cli: &Cli, args: &EvalArgs) -> Result<()> {
    let cfg = load_config(cli)?;
    let out = &cli.out;
    let path = args.checkpoint.clone().unwrap_or_else(|| out.join(CHECKPOINT));
    let params = read_params(&path)?;
    check_compatible(&cfg, &params)?;
    let ds = generate(&cfg)?;
    let report = evaluate(&cfg, &params, &ds.test, Exec::Parallel)?;
    if !report.rank1.is_finite() || !report.distance.gap.is_finite() {
        return Err(Error::Contract("evaluation produced non-finite metrics".into()));
    }
    write_json(&out.join(METRICS), &EvalOutput { seed: cfg.seed, ablation: cfg.ablation, metrics: &report })?;
    metrics_csv(cfg.seed, &report).write(&out.join("metrics.csv"))?;
    cmc_csv(&report).write(&out.join("cmc.csv"))?;
    if args.sanity {
        write_json(&out.join("sanity.json"), &evaluate_self(&cfg, &params, &ds.test, Exec::Parallel)?)?;
    }
    println!(
        "rank-1 {} (IR->RGB {}, RGB->IR {}), gap {}",
        fmt_f64(report.rank1),
        fmt_f64(report.ir_to_rgb.rank1()),
        fmt_f64(report.rgb_to_ir.rank1()),
        fmt_f64(report.distance.gap)
    );
    Ok(())
}

/// One sweep grid point: a label and the config change it applies.
#[derive(Debug, Clone)]
pub struct GridPoint {
    pub label: String,
    pub apply: GridChange,
}

#[derive(Debug, Clone, Copy)]
pub enum GridChange {
    Weights(f64, f64),
    Ubp(f64),
    Ablation(Ablation),
}

impl GridPoint {
    pub fn configure(&self, base: &ExperimentConfig) -> ExperimentConfig {
        let mut cfg = base.clone();
        match self.apply {
            GridChange::Weights(a, b) => {
                cfg.loss.w_intra = a;
                cfg.loss.w_inter = b;
            }
            GridChange::Ubp(u) => cfg.data.ubp = u,
            GridChange::Ablation(a) => cfg.ablation = a,
        }
        cfg
    }
}

pub const WEIGHT_GRID: [(f64, f64); 6] = [(0.0, 1.0), (0.2, 0.8), (0.4, 0.6), (0.6, 0.4), (0.8, 0.2), (1.0, 0.0)];
pub const UBP_GRID: [f64; 6] = [0.3, 0.4, 0.5, 0.6, 0.7, 0.8];

fn parse_f64(s: &str) -> Result<f64> {
    s.trim().parse().map_err(|_| Error::Config(format!("{s:?} is not a number")))
}

pub fn grid(axis: SweepAxis, values: Option<&[String]>) -> Result<Vec<GridPoint>> {
    let point = |label: String, apply| GridPoint { label, apply };
    let pts = match (axis, values) {
        (SweepAxis::Weights, None) => WEIGHT_GRID.iter().map(|&(a, b)| (a, b)).collect::<Vec<_>>(),
        (SweepAxis::Weights, Some(v)) => v
            .iter()
            .map(|s| {
                let (a, b) = s.split_once(':').ok_or_else(|| Error::Config(format!("weights value {s:?} is not a:b")))?;
                Ok((parse_f64(a)?, parse_f64(b)?))
            })
            .collect::<Result<Vec<_>>>()?,
        (SweepAxis::Ubp, v) => {
            let u: Vec<f64> = match v {
                None => UBP_GRID.to_vec(),
                Some(v) => v.iter().map(|s| parse_f64(s)).collect::<Result<_>>()?,
            };
            return Ok(u.into_iter().map(|u| point(u.to_string(), GridChange::Ubp(u))).collect());
        }
        (SweepAxis::Ablation, v) => {
            let names: Vec<String> = match v {
                None => Ablation::VARIANTS.iter().map(|(n, _)| n.to_string()).collect(),
                Some(v) => v.to_vec(),
            };
            return names
                .into_iter()
                .map(|n| Ok(point(n.to_uppercase(), GridChange::Ablation(Ablation::by_name(&n)?))))
                .collect();
        }
    };
    Ok(pts.into_iter().map(|(a, b)| point(format!("{a}/{b}"), GridChange::Weights(a, b))).collect())
}

/// Metrics of one train + eval run inside a sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunMetrics {
    pub rank1: f64,
    pub map: f64,
    pub minp: f64,
    pub gap: f64,
}

impl RunMetrics {
    pub fn from_report(m: &MetricsReport) -> Self {
        Self {
            rank1: m.rank1,
            map: 0.5 * (m.ir_to_rgb.map + m.rgb_to_ir.map),
            minp: 0.5 * (m.ir_to_rgb.minp + m.rgb_to_ir.minp),
            gap: m.distance.gap,
        }
    }
}

fn train_eval(cfg: &ExperimentConfig) -> Result<MetricsReport> {
    let ds = generate(cfg)?;
    let outcome = train(cfg, &ds.train)?;
    evaluate(cfg, &outcome.params, &ds.test, Exec::Sequential)
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let sd = if v.len() > 1 { (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() } else { 0.0 };
    (mean, sd)
}

fn cmd_sweep(cli: &Cli, args: &SweepArgs) -> Result<()> {
    let base = load_config(cli)?;
    if args.seeds == 0 {
        return Err(Error::Config("--seeds must be ≥ 1".into()));
    }
    let points = grid(args.axis, args.values.as_deref())?;
    let mut jobs = Vec::new();
    for (pi, p) in points.iter().enumerate() {
        for s in 0..args.seeds {
            let mut cfg = p.configure(&base);
            cfg.seed = base.seed + s;
            cfg.validate()?;
            jobs.push((pi, cfg));
        }
    }
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(t) = cli.threads {
        if t == 0 {
            return Err(Error::Config("--threads must be ≥ 1".into()));
        }
        builder = builder.num_threads(t);
    }
    let pool = builder.build().map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let results: Vec<Result<MetricsReport>> = pool.install(|| jobs.par_iter().map(|(_, cfg)| train_eval(cfg)).collect());

    let axis = format!("{:?}", args.axis).to_lowercase();
    let mut runs = Csv::new(&["value", "seed", "rank1", "map", "minp", "gap"]);
    let mut per_point: Vec<Vec<RunMetrics>> = vec![Vec::new(); points.len()];
    for ((pi, cfg), r) in jobs.iter().zip(results) {
        let m = RunMetrics::from_report(&r?);
        if ![m.rank1, m.map, m.minp, m.gap].iter().all(|v| v.is_finite()) {
            return Err(Error::Contract(format!("non-finite metrics at {} seed {}", points[*pi].label, cfg.seed)));
        }
        runs.row(cells![points[*pi].label.clone(), cfg.seed, m.rank1, m.map, m.minp, m.gap]);
        per_point[*pi].push(m);
    }
    let mut summary = Csv::new(&[
        "value", "runs", "rank1_mean", "rank1_sd", "map_mean", "map_sd", "minp_mean", "minp_sd", "gap_mean", "gap_sd",
    ]);
    for (p, ms) in points.iter().zip(&per_point) {
        let col = |f: fn(&RunMetrics) -> f64| mean_sd(&ms.iter().map(f).collect::<Vec<_>>());
        let (r, rs) = col(|m| m.rank1);
        let (a, as_) = col(|m| m.map);
        let (i, is) = col(|m| m.minp);
        let (g, gs) = col(|m| m.gap);
        summary.row(cells![p.label.clone(), ms.len(), r, rs, a, as_, i, is, g, gs]);
    }
    let out = &cli.out;
    summary.write(&out.join(format!("sweep_{axis}.csv")))?;
    runs.write(&out.join(format!("sweep_{axis}_runs.csv")))?;
    println!("{} grid points x {} seeds -> {}", points.len(), args.seeds, out.join(format!("sweep_{axis}.csv")).display());
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct MmdReport {
    pub mmd2: f64,
    pub bandwidths: Vec<f64>,
    pub weights: Vec<f64>,
    pub weight_logits: Vec<f64>,
    pub per_kernel: Vec<f64>,
    pub base_bandwidth: Option<f64>,
    pub kernels: usize,
    pub gamma: Option<f64>,
    pub rows_x: usize,
    pub rows_y: usize,
    pub dim: usize,
}

fn cmd_mmd(cli: &Cli, a: &MmdArgs) -> Result<()> {
    let x = read_matrix(&a.x)?;
    let y = read_matrix(&a.y)?;
    if x.cols() != y.cols() {
        return Err(Error::Shape(format!("x has {} columns, y has {}", x.cols(), y.cols())));
    }
    let (bandwidths, base, gamma) = match &a.bandwidths {
        Some(b) => (b.clone(), None, None),
        None => {
            let base = match a.sigma {
                Some(s) => s,
                None => median_bandwidth(&pairwise_sq_dists(&x.vstack(&y)?)?)?,
            };
            (bandwidth_ladder(base, a.kernels, a.gamma)?, Some(base), Some(a.gamma))
        }
    };
    let logits = a.logits.clone().unwrap_or_else(|| vec![0.0; bandwidths.len()]);
    let params = KernelParams::new(bandwidths, logits)?;
    let mmd2 = mmd2_unbiased(&x, &y, &params)?;
    if !mmd2.is_finite() {
        return Err(Error::Contract("MMD² is not finite".into()));
    }
    let report = MmdReport {
        mmd2,
        bandwidths: params.bandwidths().to_vec(),
        weights: params.weights(),
        weight_logits: params.weight_logits().to_vec(),
        per_kernel: mmd2_per_kernel(&x, &y, &params)?,
        base_bandwidth: base,
        kernels: params.kernels(),
        gamma,
        rows_x: x.rows(),
        rows_y: y.rows(),
        dim: x.cols(),
    };
    write_json(&cli.out.join("mmd.json"), &report)?;
    print!("{}", String::from_utf8_lossy(&crate::output::to_json(&report)?));
    Ok(())
}

#[derive(Serialize)]
struct AttentionSettings {
    kernel_size: usize,
    gain: f64,
    bias: f64,
}

#[derive(Serialize)]
struct PcMapSidecar {
    input: PathBuf,
    height: usize,
    width: usize,
    log_gabor: LogGaborConfig,
    pc: PcParams,
    attention: AttentionSettings,
    pc_min: f64,
    pc_max: f64,
    pc_mean: f64,
}

fn cmd_pc_map(cli: &Cli, a: &PcMapArgs) -> Result<()> {
    let file = fs::File::open(&a.input)?;
    let img = GrayImage::read_pgm(std::io::BufReader::new(file))?;
    let lg = LogGaborConfig {
        scales: a.scales,
        orientations: a.orientations,
        min_wavelength: a.min_wavelength,
        mult: a.mult,
        sigma_onf: a.sigma_onf,
        sigma_theta: None,
    };
    let bank = build_log_gabor_bank(img.height(), img.width(), &lg)?;
    let noise_threshold = if a.threshold.eq_ignore_ascii_case("auto") {
        estimate_noise_threshold(&img, &bank)?
    } else {
        a.threshold.parse().map_err(|_| Error::InvalidArgument(format!("threshold {:?} is not a number or auto", a.threshold)))?
    };
    let params = PcParams { noise_threshold, epsilon: a.epsilon };
    params.validate()?;
    let pc = phase_congruency(&img, &bank, &params)?;
    let att = edge_attention(&pc, &AttentionParams::box_filter(a.kernel_size, a.gain, a.bias)?);

    let out = &cli.out;
    write_atomic(&out.join("pc.pgm"), &pc.to_pgm_bytes())?;
    write_atomic(&out.join("attention.pgm"), &att.to_pgm_bytes())?;
    let mut text = String::new();
    for row in pc.pixels().iter_rows() {
        let line: Vec<String> = row.iter().map(|&v| fmt_f64(v)).collect();
        text.push_str(&line.join(","));
        text.push('\n');
    }
    write_atomic(&out.join("pc.csv"), text.as_bytes())?;
    let v = pc.pixels().as_slice();
    let sidecar = PcMapSidecar {
        input: a.input.clone(),
        height: img.height(),
        width: img.width(),
        log_gabor: lg,
        pc: params,
        attention: AttentionSettings { kernel_size: a.kernel_size, gain: a.gain, bias: a.bias },
        pc_min: v.iter().copied().fold(f64::INFINITY, f64::min),
        pc_max: v.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        pc_mean: v.iter().sum::<f64>() / v.len() as f64,
    };
    write_json(&out.join("pc_map.json"), &sidecar)?;
    println!("wrote pc.pgm, attention.pgm, pc.csv, pc_map.json to {}", out.display());
    Ok(())
}
