use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};
use wasserball::attack::{evaluate_attack, StepKind, ThreatKind, ThreatModel};
use wasserball::dataio::{load_idx, synthetic_digits, write_report, LabeledDataset, Report};
use wasserball::imagecore::{
    ball_membership, build_cost_matrix, dim, normalize, wasserstein_distance, BallSpec, DistanceMode, Locality,
};
use wasserball::model::{train, AdversarialTraining, Architecture, Classifier, Model, TrainConfig};
use wasserball::oracle::{self, TinyInstance};
use wasserball::par::Exec;
use wasserball::perturb::{
    accuracy_under_perturbation, distance_table, DistanceMetric, PerturbationKind, PerturbationSpec,
};
use wasserball::sinkhorn::{project, ProjectionProblem, SinkhornLimits, ATTACK_LAMBDA};

use crate::options::*;
use crate::Failure;

const COMMANDS: [&str; 6] = ["train", "attack", "project", "perturb", "dim-demo", "distances"];
const DEFAULT_GRID: [f64; 9] = [0.0, 5.0, 10.0, 20.0, 50.0, 100.0, 200.0, 500.0, 1000.0];
const DEFAULT_DATA_DIR: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../core/testdata/mnist");
const SYNTHETIC_SIDE: usize = 28;

struct Ctx {
    seed: u64,
    exec: Exec,
    out: Option<PathBuf>,
}

pub fn run(cli: Cli) -> Result<(), Failure> {
    let mut top = match &cli.config {
        Some(p) => read_config(p)?,
        None => Default::default(),
    };
    let name = cli.command.name();
    let section = top.remove(name);
    for other in COMMANDS {
        top.remove(other);
    }
    let flags = Globals { seed: cli.seed, jobs: cli.jobs, out: cli.out.clone() };
    let globals: Globals = merge(Some(&Value::Object(top)), &flags, "globals")?;
    let exec = match globals.jobs {
        Some(0) => return Err(Failure::usage("--jobs must be at least 1")),
        Some(1) => Exec::Sequential,
        _ => Exec::Parallel,
    };
    let ctx = Ctx { seed: globals.seed.unwrap_or(0), exec, out: globals.out };
    let section = section.as_ref();
    in_pool(globals.jobs, move || match cli.command {
        Command::Train(o) => cmd_train(&ctx, merge(section, &o, name)?),
        Command::Attack(o) => cmd_attack(&ctx, merge(section, &o, name)?),
        Command::Project(o) => cmd_project(&ctx, merge(section, &o, name)?),
        Command::Perturb(o) => cmd_perturb(&ctx, merge(section, &o, name)?),
        Command::DimDemo(o) => cmd_dim_demo(&ctx, merge(section, &o, name)?),
        Command::Distances(o) => cmd_distances(&ctx, merge(section, &o, name)?),
    })
}

#[cfg(feature = "parallel")]
fn in_pool<R: Send>(jobs: Option<usize>, f: impl FnOnce() -> Result<R, Failure> + Send) -> Result<R, Failure> {
    match jobs {
        Some(j) if j > 1 => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(j)
                .build()
                .map_err(|e| Failure::Runtime(anyhow::anyhow!("thread pool: {e}")))?;
            pool.install(f)
        }
        _ => f(),
    }
}

#[cfg(not(feature = "parallel"))]
fn in_pool<R>(_jobs: Option<usize>, f: impl FnOnce() -> Result<R, Failure>) -> Result<R, Failure> {
    f()
}

fn emit(ctx: &Ctx, report: &Report) -> Result<(), Failure> {
    match &ctx.out {
        Some(path) => write_report(report, path)?,
        None => print!("{}", report.to_pretty_string()?),
    }
    Ok(())
}

fn new_report<T: Serialize>(ctx: &Ctx, command: &str, opts: &T) -> Result<Report, Failure> {
    let mut report = Report::new().with_config(opts)?;
    report.meta("command", command).meta("seed", ctx.seed);
    Ok(report)
}

#[derive(Clone, Copy)]
enum Split {
    Train,
    Test,
}

fn load_data(opts: &DataOpts, split: Split, seed: u64) -> Result<LabeledDataset, Failure> {
    let factor = opts.downsample.unwrap_or(1);
    if factor == 0 {
        return Err(Failure::usage("--downsample must be at least 1"));
    }
    let data = if opts.synthetic {
        if opts.data_dir.is_some() {
            return Err(Failure::usage("--synthetic and --data-dir are mutually exclusive"));
        }
        let (count, offset) = match split {
            Split::Train => (500, 0),
            Split::Test => (200, 1),
        };
        synthetic_digits(opts.limit.unwrap_or(count), SYNTHETIC_SIDE, SYNTHETIC_SIDE, seed.wrapping_add(offset))?
    } else {
        let dir = opts.data_dir.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_DATA_DIR));
        let (images, labels) = match split {
            Split::Train => ("train-images.idx3-ubyte", "train-labels.idx1-ubyte"),
            Split::Test => ("test-images.idx3-ubyte", "test-labels.idx1-ubyte"),
        };
        load_idx(&dir.join(images), &dir.join(labels), opts.limit)?
    };
    if data.is_empty() {
        return Err(Failure::usage("the dataset is empty (check --limit)"));
    }
    Ok(if factor > 1 { data.downsample(factor)? } else { data })
}

fn shape(data: &LabeledDataset) -> (usize, usize, usize) {
    data.image_shape().expect("dataset checked non-empty")
}

fn load_model(path: Option<&Path>, data: &LabeledDataset) -> Result<Classifier, Failure> {
    let path = path.ok_or_else(|| Failure::usage("--checkpoint is required"))?;
    let model = Classifier::load(path)?;
    if model.input_shape() != shape(data) {
        return Err(Failure::usage(format!(
            "checkpoint expects {:?} inputs but the dataset has {:?} (check --downsample)",
            model.input_shape(),
            shape(data)
        )));
    }
    Ok(model)
}

fn locality(window: Option<usize>, default: Locality) -> Result<Locality, Failure> {
    match window {
        None => Ok(default),
        Some(k) if k % 2 == 1 => Ok(Locality::Window(k)),
        Some(k) => Err(Failure::usage(format!("--window must be odd, got {k}"))),
    }
}

fn parse_enum<T: serde::de::DeserializeOwned>(field: &str, value: &str) -> Result<T, Failure> {
    serde_json::from_value(Value::String(value.replace('-', "_")))
        .map_err(|_| Failure::usage(format!("unknown value {value:?} for --{field}")))
}

fn check_positive(field: &str, v: f64) -> Result<(), Failure> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Failure::usage(format!("--{field} must be positive, got {v}")))
    }
}

fn cmd_train(ctx: &Ctx, o: TrainOpts) -> Result<(), Failure> {
    let data = load_data(&o.data, Split::Train, ctx.seed)?;
    let test = load_data(&DataOpts { limit: None, ..o.data.clone() }, Split::Test, ctx.seed)?;
    let (c, h, w) = shape(&data);
    let n_pixel = (h * w) as f64;

    let init = match &o.init {
        Some(p) => load_model(Some(p), &data)?,
        None => {
            let arch = Architecture::from_tag(o.arch.as_deref().unwrap_or("conv-small")).map_err(Failure::usage)?;
            Classifier::init(arch, (c, h, w), data.num_classes(), ctx.seed)?
        }
    };
    let arch = init.architecture();
    if let Some(tag) = &o.arch {
        if Architecture::from_tag(tag).map_err(Failure::usage)? != arch {
            return Err(Failure::usage(format!("--arch {tag} disagrees with the --init checkpoint ({})", arch.tag())));
        }
    }

    let epochs = o.epochs.unwrap_or(10);
    let mut config = TrainConfig::standard(arch, epochs, ctx.seed);
    if let Some(b) = o.batch_size {
        config.batch_size = b;
    }
    if let Some(lr) = o.learning_rate {
        config.learning_rate = lr;
    }
    if o.adversarial {
        let start = o.eps_start.unwrap_or(0.1);
        let end = o.eps_end.unwrap_or(10.0);
        let steps = o.attack_steps.unwrap_or(40);
        let adv = AdversarialTraining::wasserstein(start / n_pixel, end / n_pixel, epochs, steps).map_err(Failure::usage)?;
        config.adversarial = Some(adv);
    } else if o.eps_start.is_some() || o.eps_end.is_some() || o.attack_steps.is_some() {
        return Err(Failure::usage("--eps-start, --eps-end and --attack-steps need --adversarial"));
    }
    config.validate().map_err(Failure::usage)?;
    let checkpoint = o
        .checkpoint
        .clone()
        .or_else(|| ctx.out.as_ref().map(|p| p.with_extension("ckpt")))
        .unwrap_or_else(|| PathBuf::from("model.ckpt"));

    let (model, history) = train(&init, &data, &config, ctx.exec)?;
    let test_accuracy = model.accuracy(&test, ctx.exec)?;

    let mut report = new_report(ctx, "train", &o)?;
    report
        .meta("architecture", arch.tag())
        .meta("parameters", model.parameter_count())
        .meta("dataset", data.name())
        .meta("image_shape", vec![c, h, w])
        .meta("train_images", data.len())
        .meta("test_images", test.len())
        .meta("test_accuracy", test_accuracy)
        .meta("checkpoint", checkpoint.display().to_string())
        .meta("epochs", epochs)
        .meta("batch_size", config.batch_size)
        .meta("learning_rate", config.learning_rate);
    if let Some(adv) = &config.adversarial {
        let schedule: Vec<Value> = adv
            .epsilon_schedule
            .iter()
            .enumerate()
            .map(|(e, &eps)| json!({"epoch": e, "epsilon": eps, "epsilon_scaled": eps * n_pixel}))
            .collect();
        report.table("epsilon_schedule", &schedule)?.meta("attack_steps", adv.threat.max_steps);
    }
    report.table("history", &history)?;

    model.save(&checkpoint)?;
    if let Err(e) = emit(ctx, &report) {
        let _ = std::fs::remove_file(&checkpoint);
        return Err(e);
    }
    Ok(())
}

fn cmd_attack(ctx: &Ctx, o: AttackOpts) -> Result<(), Failure> {
    let data = load_data(&o.data, Split::Test, ctx.seed)?;
    let model = load_model(o.checkpoint.as_deref(), &data)?;
    let (_, h, w) = shape(&data);
    let n_pixel = (h * w) as f64;
    let t = &o.threat;

    let kind: ThreatKind = parse_enum("threat", t.kind.as_deref().unwrap_or("wasserstein"))?;
    let grid_given: Vec<f64> = if o.eps.is_empty() { DEFAULT_GRID.to_vec() } else { o.eps.clone() };
    if grid_given.iter().any(|e| !(e.is_finite() && *e >= 0.0)) || grid_given.windows(2).any(|p| p[1] <= p[0]) {
        return Err(Failure::usage("--eps must be non-negative and strictly increasing"));
    }
    let scale = if kind == ThreatKind::Wasserstein { n_pixel } else { 1.0 };
    let grid: Vec<f64> = grid_given.iter().map(|e| e / scale).collect();
    let smallest = grid.iter().copied().find(|&e| e > 0.0).unwrap_or(1.0);

    let mut threat = match kind {
        ThreatKind::Wasserstein => ThreatModel::wasserstein(smallest),
        ThreatKind::Linf => ThreatModel::linf(smallest),
        ThreatKind::L2 => ThreatModel::l2(smallest),
    };
    if let Some(s) = &t.step_kind {
        threat.step_kind = parse_enum::<StepKind>("step-kind", s)?;
    }
    if let Some(a) = t.alpha {
        check_positive("alpha", a)?;
        threat.alpha = a;
    }
    if let Some(m) = t.max_steps {
        threat.max_steps = m;
    }
    if kind == ThreatKind::Wasserstein {
        threat.wasserstein.locality = locality(t.window, threat.wasserstein.locality)?;
        if let Some(l) = t.lambda {
            check_positive("lambda", l)?;
            threat.wasserstein.lambda = l;
        }
        if let Some(ws) = t.warm_start {
            threat.wasserstein.warm_start = ws;
        }
    } else if t.window.is_some() || t.lambda.is_some() || t.warm_start.is_some() {
        return Err(Failure::usage("--window, --lambda and --warm-start apply to the wasserstein threat only"));
    }
    threat.validate().map_err(Failure::usage)?;

    let curve = evaluate_attack(&model, &data, &threat, &grid, ctx.exec)?;

    let mut report = new_report(ctx, "attack", &o)?;
    report
        .meta("threat", serde_json::to_value(threat.kind).unwrap_or_default())
        .meta("step_kind", serde_json::to_value(threat.step_kind).unwrap_or_default())
        .meta("alpha", threat.alpha)
        .meta("max_steps", threat.max_steps)
        .meta("images", data.len())
        .meta("pixel_count", n_pixel)
        .meta("compliance_failures", curve.compliance_failures())
        .meta("rolled_back", curve.records.iter().filter(|r| r.rolled_back).count());
    report.curve("accuracy", &curve.pairs()).table("points", &curve.points)?.table("records", &curve.records)?;
    emit(ctx, &report)
}

#[derive(Serialize)]
struct ProjectionRow {
    lambda: f64,
    w_over: f64,
    delta_l1: f64,
    range_ok: bool,
    iterations: usize,
    converged: bool,
    z_min: f64,
    z_max: f64,
    z_sum: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    z: Option<Vec<f64>>,
    distance_to_w: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    distance_to_exact: Option<f64>,
    alpha_norm: f64,
    beta_norm: f64,
    phi_norm: f64,
    psi: f64,
}

fn cmd_project(ctx: &Ctx, o: ProjectOpts) -> Result<(), Failure> {
    let lambdas = if o.lambda.is_empty() { vec![ATTACK_LAMBDA] } else { o.lambda.clone() };
    for &l in &lambdas {
        check_positive("lambda", l)?;
    }
    let limits = SinkhornLimits { max_sweeps: o.max_sweeps.unwrap_or(SinkhornLimits::attack().max_sweeps), ..SinkhornLimits::attack() };
    if limits.max_sweeps == 0 {
        return Err(Failure::usage("--max-sweeps must be at least 1"));
    }

    let (x, w, caps, cost, n_pixel) = if o.toy {
        if o.data.data_dir.is_some() || o.data.synthetic || o.index.is_some() || o.target.is_some() {
            return Err(Failure::usage("--toy takes no dataset or image indices"));
        }
        let cost = build_cost_matrix(1, 2, 1.0, locality(o.window, Locality::Global)?)?;
        (vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0], cost, 2.0)
    } else {
        let data = load_data(&o.data, Split::Test, ctx.seed)?;
        let index = o.index.unwrap_or(0);
        let target = o.target.unwrap_or(index);
        if index >= data.len() || target >= data.len() {
            return Err(Failure::usage(format!("image index out of range (dataset has {} images)", data.len())));
        }
        let (_, h, wd) = shape(&data);
        let x = normalize(&data.images()[index])?;
        let wn = normalize(&data.images()[target])?;
        let cost = build_cost_matrix(h, wd, 1.0, locality(o.window, Locality::default())?)?;
        (x.distributions().to_vec(), wn.distributions().to_vec(), x.pixel_caps(), cost, (h * wd) as f64)
    };
    let eps_scaled = o.eps.unwrap_or(if o.toy { 1.0 } else { 10.0 });
    check_positive("eps", eps_scaled)?;
    let eps = eps_scaled / n_pixel;

    // Ground truth for tiny single-channel problems.
    let exact = if x.len() <= oracle::MAX_PIXELS && caps.len() == 1 {
        let inst = TinyInstance::new(x.clone(), w.clone(), cost.dense(), eps, caps[0])?;
        Some(oracle::exact_project(&inst)?)
    } else {
        None
    };

    let mut rows = Vec::with_capacity(lambdas.len());
    for &lambda in &lambdas {
        let problem = ProjectionProblem::new(&w, &x, &cost, eps, lambda, &caps)?;
        let out = project(&problem, None, &limits)?;
        let z = &out.z;
        let l2 = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
        let (alpha_norm, beta_norm, phi_norm) = out.duals.norms();
        rows.push(ProjectionRow {
            lambda,
            w_over: out.report.w_over,
            delta_l1: out.report.delta_l1,
            range_ok: out.report.range_ok,
            iterations: out.report.iterations,
            converged: out.report.converged,
            z_min: z.iter().copied().fold(f64::INFINITY, f64::min),
            z_max: z.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            z_sum: z.iter().sum(),
            z: (z.len() <= oracle::MAX_PIXELS).then(|| z.clone()),
            distance_to_w: l2(z, &w),
            distance_to_exact: exact.as_ref().map(|e| l2(z, e)),
            alpha_norm,
            beta_norm,
            phi_norm,
            psi: out.duals.psi,
        });
    }

    let mut report = new_report(ctx, "project", &o)?;
    report.meta("epsilon", eps).meta("epsilon_scaled", eps_scaled).meta("pixels", x.len());
    if let Some(e) = &exact {
        report.meta("exact_z", e.clone());
    }
    report.table("projections", &rows)?;
    emit(ctx, &report)
}

#[derive(Serialize)]
struct LayoutRow {
    kind: PerturbationKind,
    metric: DistanceMetric,
    magnitudes: Vec<f64>,
    means: Vec<f64>,
}

fn cmd_perturb(ctx: &Ctx, o: PerturbOpts) -> Result<(), Failure> {
    let mut specs = Vec::new();
    for &p in &o.translate {
        specs.push(PerturbationSpec::new(PerturbationKind::Translate, p / 100.0).map_err(Failure::usage)?);
    }
    for &d in &o.rotate {
        specs.push(PerturbationSpec::new(PerturbationKind::Rotate, d).map_err(Failure::usage)?);
    }
    for &b in &o.blur {
        specs.push(PerturbationSpec::new(PerturbationKind::Blur, b).map_err(Failure::usage)?);
    }
    let metrics: Vec<DistanceMetric> = if o.metrics.is_empty() {
        vec![DistanceMetric::L2, DistanceMetric::Wasserstein]
    } else {
        o.metrics.iter().map(|m| parse_enum("metrics", m)).collect::<Result<_, _>>()?
    };
    let data = load_data(&o.data, Split::Test, ctx.seed)?;
    let model = match &o.checkpoint {
        Some(p) => Some(load_model(Some(p), &data)?),
        None => None,
    };

    let mut report = new_report(ctx, "perturb", &o)?;
    report.meta("images", data.len()).meta("image_shape", {
        let (c, h, w) = shape(&data);
        vec![c, h, w]
    });
    if specs.is_empty() {
        return emit(ctx, &report);
    }
    let rows = distance_table(&data, &specs, &metrics, ctx.exec)?;
    let mut layout: Vec<LayoutRow> = Vec::new();
    for row in &rows {
        match layout.iter_mut().find(|l| l.kind == row.kind && l.metric == row.metric) {
            Some(l) => {
                l.magnitudes.push(row.magnitude);
                l.means.push(row.mean);
            }
            None => layout.push(LayoutRow {
                kind: row.kind,
                metric: row.metric,
                magnitudes: vec![row.magnitude],
                means: vec![row.mean],
            }),
        }
    }
    report.table("distances", &rows)?.table("layout", &layout)?;
    if let Some(m) = &model {
        let acc = accuracy_under_perturbation(m, &data, &specs, ctx.exec)?;
        report.meta("clean_accuracy", m.accuracy(&data, ctx.exec)?).table("accuracy", &acc)?;
    }
    emit(ctx, &report)
}

#[derive(Serialize)]
struct DimRow {
    index: usize,
    label: usize,
    clean_prediction: usize,
    dimmed_prediction: usize,
    wasserstein: f64,
    l1_deviation: f64,
    passes: bool,
}

fn cmd_dim_demo(ctx: &Ctx, o: DimOpts) -> Result<(), Failure> {
    let factor = o.factor.unwrap_or(30.0);
    if !(factor >= 1.0 && factor.is_finite()) {
        return Err(Failure::usage(format!("--factor must be at least 1, got {factor}")));
    }
    let eps_scaled = o.eps.unwrap_or(10.0);
    check_positive("eps", eps_scaled)?;
    let data = load_data(&o.data, Split::Test, ctx.seed)?;
    let model = load_model(o.checkpoint.as_deref(), &data)?;
    let (_, h, w) = shape(&data);
    let eps = eps_scaled / (h * w) as f64;
    let cost = build_cost_matrix(h, w, 1.0, Locality::default())?;
    let spec = BallSpec::attack(eps);

    let rows = ctx.exec.try_map(data.images(), |i, image| -> wasserball::Result<DimRow> {
        let dimmed = dim(image, factor)?;
        let membership = ball_membership(image, &dimmed, &spec, &cost)?;
        Ok(DimRow {
            index: i,
            label: data.labels()[i],
            clean_prediction: model.predict(image)?,
            dimmed_prediction: model.predict(&dimmed)?,
            wasserstein: wasserstein_distance(image, &dimmed, &cost, DistanceMode::Exact)?,
            l1_deviation: membership.l1_deviation.iter().copied().fold(0.0, f64::max),
            passes: membership.passes,
        })
    })?;
    let total = rows.len() as f64;
    let rate = |f: &dyn Fn(&DimRow) -> bool| rows.iter().filter(|r| f(r)).count() as f64 / total;

    let mut report = new_report(ctx, "dim-demo", &o)?;
    report
        .meta("factor", factor)
        .meta("epsilon", eps)
        .meta("epsilon_scaled", eps_scaled)
        .meta("images", rows.len())
        .meta("clean_error", rate(&|r| r.clean_prediction != r.label))
        .meta("dimmed_error", rate(&|r| r.dimmed_prediction != r.label))
        .meta("max_wasserstein", rows.iter().map(|r| r.wasserstein).fold(0.0, f64::max))
        .meta("ball_rejections", rate(&|r| !r.passes));
    report.table("images", &rows)?;
    emit(ctx, &report)
}

#[derive(Serialize)]
struct DistanceRecord {
    index: usize,
    label: usize,
    l2: f64,
    wasserstein: f64,
}

fn cmd_distances(ctx: &Ctx, o: DistanceOpts) -> Result<(), Failure> {
    let mode = match o.mode.as_deref().unwrap_or("exact") {
        "exact" => {
            if o.lambda.is_some() {
                return Err(Failure::usage("--lambda applies to --mode entropic only"));
            }
            DistanceMode::Exact
        }
        "entropic" => {
            let lambda = o.lambda.unwrap_or(ATTACK_LAMBDA);
            check_positive("lambda", lambda)?;
            DistanceMode::Entropic { lambda }
        }
        other => return Err(Failure::usage(format!("unknown value {other:?} for --mode"))),
    };
    let data = load_data(&o.data, Split::Test, ctx.seed)?;
    let index = o.index.unwrap_or(0);
    if index >= data.len() {
        return Err(Failure::usage(format!("--index {index} out of range (dataset has {} images)", data.len())));
    }
    let (_, h, w) = shape(&data);
    let cost = build_cost_matrix(h, w, 1.0, locality(o.window, Locality::Global)?)?;
    let reference = &data.images()[index];
    let rows = ctx.exec.try_map(data.images(), |i, image| -> wasserball::Result<DistanceRecord> {
        Ok(DistanceRecord {
            index: i,
            label: data.labels()[i],
            l2: reference.l2_distance(image)?,
            wasserstein: wasserstein_distance(reference, image, &cost, mode)?,
        })
    })?;
    let mut report = new_report(ctx, "distances", &o)?;
    // JSON has no infinity: pairs the window cannot connect are written as null.
    let infeasible = rows.iter().filter(|r| r.wasserstein.is_infinite()).count();
    report.meta("reference", index).meta("images", rows.len()).meta("infeasible", infeasible);
    report.table("distances", &rows)?;
    emit(ctx, &report)
}
