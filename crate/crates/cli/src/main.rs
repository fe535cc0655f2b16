use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use usdeform::cbct_update::{update_pipeline, PipelineParams, ProbeProfile, TransferParams, UpdateReport};
use usdeform::confidence::{confidence, confidence_pair};
use usdeform::flow::{bisect_candidate, estimate_flow, select_candidate};
use usdeform::grid::{fb_residual, folding_ratio, FlowField};
use usdeform::io::{
    read_flo, read_json, read_mask, read_pgm, write_csv, write_flo, write_json, write_mask, write_pgm, BitDepth,
    Config,
};
use usdeform::metrics::{evaluate_pair, MetricReport};
use usdeform::phantom::{generate, DeformKind, DeformSpec};
use usdeform::registration::{rigid_refine, RigidTransform2D, SearchBounds};
use usdeform::{Error, Result};

/// Ultrasound-driven deformation estimation and CT slice updating.
#[derive(Parser, Debug)]
#[command(name = "usdeform", version)]
struct Cli {
    /// JSON parameter file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for generated data (commands without randomness ignore it).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic frame pair with ground truth.
    Phantom(PhantomArgs),
    /// Ultrasound confidence map of one frame.
    Confidence(ConfidenceArgs),
    /// Bidirectional deformation estimate.
    Flow(FlowArgs),
    /// LC2 rigid refinement of an ultrasound frame against a CT slice.
    Register(RegisterArgs),
    /// Transfer the ultrasound deformation onto a CT slice.
    Update(UpdateArgs),
    /// Alignment metrics of a flow pair.
    Eval(EvalArgs),
}

#[derive(Args, Debug)]
struct PhantomArgs {
    /// DeformSpec JSON.
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 256)]
    width: usize,
    #[arg(long, default_value_t = 256)]
    height: usize,
}

#[derive(Args, Debug)]
struct ConfidenceArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
}

#[derive(Args, Debug)]
struct FlowArgs {
    #[arg(long)]
    i0: PathBuf,
    #[arg(long)]
    i1: PathBuf,
    /// Intermediate frame enabling the bisect candidate.
    #[arg(long)]
    mid: Option<PathBuf>,
    /// Pseudo-label flows for distillation: F01 and optionally F10.
    #[arg(long, num_args = 1..=2)]
    pseudo: Vec<PathBuf>,
    /// Output F01 and F10.
    #[arg(long, num_args = 2, required = true)]
    out: Vec<PathBuf>,
    #[arg(long)]
    report: Option<PathBuf>,
    /// Ground-truth F01 and optionally F10 for the EPE columns.
    #[arg(long, num_args = 1..=2)]
    gt: Vec<PathBuf>,
    #[arg(long)]
    iters: Option<usize>,
}

#[derive(Args, Debug)]
struct RegisterArgs {
    #[arg(long)]
    us: PathBuf,
    #[arg(long)]
    ct: PathBuf,
    /// Initial pose JSON `{tx, ty, theta_deg}`; identity when absent.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Search half-widths `tx,ty,theta_deg`.
    #[arg(long, value_delimiter = ',')]
    bounds: Option<Vec<f64>>,
    #[arg(long)]
    patch_radius: Option<usize>,
}

#[derive(Args, Debug)]
struct UpdateArgs {
    #[arg(long)]
    ct: PathBuf,
    #[arg(long)]
    i_prev: PathBuf,
    #[arg(long)]
    i_curr: PathBuf,
    /// Placement of the ultrasound frame in the CT slice.
    #[arg(long)]
    pose: Option<PathBuf>,
    /// ProbeProfile JSON; falls back to the config's probe block.
    #[arg(long)]
    probe: Option<PathBuf>,
    #[arg(long)]
    us_mask: Option<PathBuf>,
    #[arg(long)]
    mid: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    field: Option<PathBuf>,
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    sigma_smooth: Option<f64>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    i0: PathBuf,
    #[arg(long)]
    i1: PathBuf,
    /// Estimated F01 and F10.
    #[arg(long, num_args = 2, required = true)]
    pred: Vec<PathBuf>,
    /// Ground-truth F01 and F10 for the EPE columns.
    #[arg(long, num_args = 2)]
    gt: Vec<PathBuf>,
    #[arg(long)]
    mask0: Option<PathBuf>,
    #[arg(long)]
    mask1: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn load_config(path: Option<&Path>) -> Result<Config> {
    match path {
        Some(p) => Config::load(p),
        None => Ok(Config::default()),
    }
}

fn epe_cell(est: &FlowField, gt: Option<&PathBuf>) -> Result<String> {
    match gt {
        Some(p) => Ok(format!("{:.6}", est.mean_endpoint_error(&read_flo(p)?)?)),
        None => Ok(String::new()),
    }
}

fn phantom(a: &PhantomArgs, seed: Option<u64>) -> Result<()> {
    let mut spec: DeformSpec = read_json(&a.spec)?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    let s = generate(&spec, a.width, a.height)?;
    std::fs::create_dir_all(&a.out)?;
    let o = |name: &str| a.out.join(name);
    write_pgm(&o("i0.pgm"), &s.i0, BitDepth::Sixteen)?;
    write_pgm(&o("i1.pgm"), &s.i1, BitDepth::Sixteen)?;
    write_pgm(&o("ct.pgm"), &s.ct_slice, BitDepth::Sixteen)?;
    write_pgm(&o("ct1.pgm"), &s.ct_slice1, BitDepth::Sixteen)?;
    write_flo(&o("flow_gt_01.flo"), &s.flow_gt_01)?;
    write_flo(&o("flow_gt_10.flo"), &s.flow_gt_10)?;
    write_flo(&o("ct_flow_gt.flo"), &s.ct_flow_gt)?;
    write_mask(&o("bone_mask0.pgm"), &s.bone_mask0)?;
    write_mask(&o("bone_mask1.pgm"), &s.bone_mask1)?;
    write_mask(&o("ct_bone_mask0.pgm"), &s.ct_bone_mask0)?;
    write_mask(&o("ct_bone_mask1.pgm"), &s.ct_bone_mask1)?;
    write_mask(&o("us_window.pgm"), &s.us_window)?;
    write_json(&o("pose.json"), &s.placement)?;
    let probe = match spec.kind {
        DeformKind::ProbePress(p) => p,
        _ => ProbeProfile {
            d_robot: 0.0,
            c_x: a.width as f64 / 2.0,
            sigma_probe: a.width as f64 / 4.0,
        },
    };
    write_json(&o("probe.json"), &probe)?;
    Ok(())
}

fn run_confidence(a: &ConfidenceArgs, cfg: &Config) -> Result<()> {
    let mut p = cfg.confidence;
    p.alpha = a.alpha.unwrap_or(p.alpha);
    p.beta = a.beta.unwrap_or(p.beta);
    p.gamma = a.gamma.unwrap_or(p.gamma);
    let c = confidence(&read_pgm(&a.input)?, &p)?;
    write_pgm(&a.out, &c.to_image(), BitDepth::Sixteen)
}

fn run_flow(a: &FlowArgs, cfg: &Config) -> Result<()> {
    let t0 = Instant::now();
    let i0 = read_pgm(&a.i0)?;
    let i1 = read_pgm(&a.i1)?;
    let mut spec = cfg.pyramid;
    spec.iters = a.iters.unwrap_or(spec.iters);
    let pseudo: Vec<FlowField> = a.pseudo.iter().map(|p| read_flo(p)).collect::<Result<_>>()?;
    let (c0, c1) = confidence_pair(&i0, &i1, &cfg.confidence)?;
    let f01 = estimate_flow(&i0, &i1, &c0, &spec, &cfg.energy, pseudo.first())?;
    let f10 = estimate_flow(&i1, &i0, &c1, &spec, &cfg.energy, pseudo.get(1))?;
    let (selected, f01) = match &a.mid {
        Some(m) => {
            let mid = read_pgm(m)?;
            let (cm, _) = confidence_pair(&mid, &mid, &cfg.confidence)?;
            let bisect = bisect_candidate(&i0, &mid, &i1, &c0, &cm, &spec, &cfg.energy)?;
            let cands = [f01, bisect];
            let (k, f) = select_candidate(&i0, &i1, &cands)?;
            (k, f.clone())
        }
        None => (0, f01),
    };
    write_flo(&a.out[0], &f01)?;
    write_flo(&a.out[1], &f10)?;
    if let Some(r) = &a.report {
        let row = format!(
            "{:.6},{:.6},{:.6},{selected},{},{},{:.3}",
            fb_residual(&f01, &f10)?.mean,
            folding_ratio(&f01),
            folding_ratio(&f10),
            epe_cell(&f01, a.gt.first())?,
            epe_cell(&f10, a.gt.get(1))?,
            t0.elapsed().as_secs_f64() * 1e3,
        );
        write_csv(r, "fb_mean,folding_01,folding_10,selected,epe_01,epe_10,total_ms", &[row])?;
    }
    Ok(())
}

fn run_register(a: &RegisterArgs, cfg: &Config) -> Result<()> {
    let us = read_pgm(&a.us)?;
    let ct = read_pgm(&a.ct)?;
    let init = match &a.init {
        Some(p) => read_json::<RigidTransform2D>(p)?,
        None => RigidTransform2D::IDENTITY,
    };
    let mut p = cfg.lc2;
    if let Some(b) = &a.bounds {
        if b.len() != 3 {
            return Err(Error::InvalidArgument(format!(
                "--bounds takes tx,ty,theta_deg; got {} values",
                b.len()
            )));
        }
        p.bounds = SearchBounds {
            tx: b[0],
            ty: b[1],
            theta_deg: b[2],
        };
    }
    p.patch_radius = a.patch_radius.unwrap_or(p.patch_radius);
    let (pose, score) = rigid_refine(&us, &ct, &init, &p)?;
    write_json(&a.out, &pose)?;
    println!("lc2 {score:.6}");
    Ok(())
}

fn run_update(a: &UpdateArgs, cfg: &Config) -> Result<()> {
    let ct = read_pgm(&a.ct)?;
    let i_prev = read_pgm(&a.i_prev)?;
    let i_curr = read_pgm(&a.i_curr)?;
    let probe = match (&a.probe, cfg.probe) {
        (Some(p), _) => read_json::<ProbeProfile>(p)?,
        (None, Some(p)) => p,
        (None, None) => return Err(Error::Config("no probe profile: pass --probe or set it in the config".into())),
    };
    let mut transfer: TransferParams = cfg.transfer;
    if let Some(p) = &a.pose {
        transfer.placement = read_json(p)?;
    }
    transfer.sigma_smooth = a.sigma_smooth.unwrap_or(transfer.sigma_smooth);
    let params = PipelineParams {
        confidence: cfg.confidence,
        pyramid: cfg.pyramid,
        energy: cfg.energy,
        transfer,
        us_mask: a.us_mask.as_deref().map(read_mask).transpose()?,
        mid_frame: a.mid.as_deref().map(read_pgm).transpose()?,
    };
    let out = update_pipeline(&ct, &i_prev, &i_curr, &probe, &params)?;
    write_pgm(&a.out, &out.updated, BitDepth::Sixteen)?;
    if let Some(f) = &a.field {
        write_flo(f, &out.d_final)?;
    }
    if let Some(r) = &a.report {
        write_csv(r, UpdateReport::CSV_HEADER, &[out.report.csv_row()])?;
    }
    Ok(())
}

fn run_eval(a: &EvalArgs) -> Result<()> {
    let i0 = read_pgm(&a.i0)?;
    let i1 = read_pgm(&a.i1)?;
    let f01 = read_flo(&a.pred[0])?;
    let f10 = read_flo(&a.pred[1])?;
    let masks = match (&a.mask0, &a.mask1) {
        (Some(m0), Some(m1)) => Some((read_mask(m0)?, read_mask(m1)?)),
        (None, None) => None,
        _ => return Err(Error::InvalidArgument("--mask0 and --mask1 go together".into())),
    };
    let r = evaluate_pair(&i0, &i1, &f01, &f10, masks.as_ref().map(|(a, b)| (a, b)))?;
    let row = format!("{},{},{}", r.csv_row(), epe_cell(&f01, a.gt.first())?, epe_cell(&f10, a.gt.get(1))?);
    write_csv(&a.out, &format!("{},epe_01,epe_10", MetricReport::CSV_HEADER), &[row])
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli.config.as_deref())?;
    match &cli.cmd {
        Command::Phantom(a) => phantom(a, cli.seed),
        Command::Confidence(a) => run_confidence(a, &cfg),
        Command::Flow(a) => run_flow(a, &cfg),
        Command::Register(a) => run_register(a, &cfg),
        Command::Update(a) => run_update(a, &cfg),
        Command::Eval(a) => run_eval(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help / --version
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            eprintln!("{}", msg.lines().next().unwrap_or("error: invalid arguments"));
            return ExitCode::from(2);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
