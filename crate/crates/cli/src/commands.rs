use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context;
use clap::ValueEnum;
use rayon::prelude::*;

use jampr::env::{
    cost, load_solution, save_solution, validate as validate_solution, CostBreakdown, EnvConfig,
    Solution, Variant, VariantKind,
};
use jampr::instance::{
    generate_cvrp, generate_cvrp_with_capacity, generate_cvrptw, load_instance, save_instance,
    split_instance, GenParams, Half, Instance, ProblemKind,
};
use jampr::model::{best_rollout, Model, ModelConfig, ModelMeta, PolicyKind};
use jampr::nn::Checkpoint;
use jampr::random::random_best_of;
use jampr::report::{plot_svg, EvalReport, EvalRow, ReportError};
use jampr::rng::{derive_seed, stream};
use jampr::solomon::parse_solomon;
use jampr::train::{InstanceSampler, RandomInstances, TrainConfig, Trainer};

use crate::fail::Fail;
use crate::opts::*;

fn io<T, E>(r: Result<T, E>, what: impl FnOnce() -> String) -> Result<T, Fail>
where
    E: std::error::Error + Send + Sync + 'static,
{
    r.with_context(what).map_err(Fail::Io)
}

fn read_instance(path: &Path, split: Option<SplitArg>) -> Result<Instance, Fail> {
    let text = io(fs::read_to_string(path), || {
        format!("reading {}", path.display())
    })?;
    let inst = if text.trim_start().starts_with("VRPFILE") {
        io(load_instance(&text), || {
            format!("parsing {}", path.display())
        })?
    } else {
        io(parse_solomon(&text), || {
            format!("parsing {}", path.display())
        })?
    };
    match split {
        None => Ok(inst),
        Some(h) => {
            let half = if h == SplitArg::First {
                Half::First
            } else {
                Half::Second
            };
            split_instance(&inst, half).map_err(|e| Fail::Usage(e.to_string()))
        }
    }
}

fn read_solution(path: &Path) -> Result<(Solution, f64), Fail> {
    let text = io(fs::read_to_string(path), || {
        format!("reading {}", path.display())
    })?;
    io(load_solution(&text), || {
        format!("parsing {}", path.display())
    })
}

fn write(path: &Path, text: &str) -> Result<(), Fail> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        io(fs::create_dir_all(dir), || {
            format!("creating {}", dir.display())
        })?;
    }
    io(fs::write(path, text), || {
        format!("writing {}", path.display())
    })
}

fn instance_variant(inst: &Instance) -> VariantKind {
    match inst.kind() {
        ProblemKind::Cvrp => VariantKind::Cvrp,
        ProblemKind::Cvrptw => VariantKind::Tw1,
    }
}

/// Concurrency used when neither flags nor a checkpoint set it.
pub fn default_m_con(kind: VariantKind, n: usize) -> usize {
    match kind {
        VariantKind::Cvrp if n <= 20 => 1,
        VariantKind::Cvrp => 2,
        VariantKind::Tw1 => 4,
        VariantKind::Tw2 => 2,
        VariantKind::Tw3 => 1,
    }
}

fn check_kind(inst: &Instance, variant: &Variant) -> Result<(), Fail> {
    if variant.kind.has_time() != (inst.kind() == ProblemKind::Cvrptw) {
        return Err(Fail::Usage(format!(
            "variant {} does not fit a {} instance",
            variant.kind.as_str(),
            inst.kind().as_str()
        )));
    }
    Ok(())
}

enum Solver {
    Random,
    Model(Box<Model>),
}

struct Plan {
    solver: Solver,
    label: String,
    mode: Option<Mode>,
    samples: usize,
    variant: Variant,
    env: EnvConfig,
    seed: u64,
}

impl Plan {
    fn build(
        policy: &PolicyArgs,
        vargs: &VariantArgs,
        cfg: &ConfigFile,
        probe: &Instance,
        policy_override: Option<&str>,
        mode_override: Option<Mode>,
    ) -> Result<Self, Fail> {
        let name = match policy_override {
            Some(p) => p.to_string(),
            None => cfg
                .pick(policy.policy.clone(), "policy")?
                .unwrap_or_else(|| "random".into()),
        };
        let solver = if name == "random" {
            Solver::Random
        } else {
            let path = PathBuf::from(&name);
            if !path.exists() {
                return Err(Fail::Io(anyhow::anyhow!(
                    "checkpoint {} not found",
                    path.display()
                )));
            }
            Solver::Model(Box::new(Model::load(&path)?))
        };
        let fallback = match &solver {
            Solver::Model(m) => m.meta.variant,
            Solver::Random => instance_variant(probe),
        };
        let variant = vargs.resolve(cfg, fallback)?;
        check_kind(probe, &variant)?;
        let mode = match &solver {
            Solver::Random => None,
            Solver::Model(m) => {
                m.check_variant(variant.kind)?;
                let mode = match mode_override {
                    Some(m) => m,
                    None => match cfg.pick(policy.mode.map(|m| format!("{m:?}")), "mode")? {
                        Some(s) => Mode::from_str(&s, true).map_err(Fail::Usage)?,
                        None => Mode::Greedy,
                    },
                };
                Some(mode)
            }
        };
        let samples = cfg
            .pick(policy.samples, "samples")?
            .unwrap_or(match solver {
                Solver::Random => 1000,
                Solver::Model(_) => 1280,
            });
        if samples == 0 {
            return Err(Fail::Usage("sample count must be positive".into()));
        }
        let m_con = match (cfg.pick(policy.m_con, "m_con")?, &solver) {
            (Some(m), _) => m,
            (None, Solver::Model(m)) => m.meta.m_con,
            (None, Solver::Random) => 1,
        };
        if m_con == 0 {
            return Err(Fail::Usage("m_con must be positive".into()));
        }
        let env = EnvConfig::new(m_con, vargs.m_pre(cfg, &variant)?);
        let label = match mode {
            None => format!("random({samples})"),
            Some(Mode::Greedy) => "greedy".into(),
            Some(Mode::Sample) => format!("sample({samples})"),
        };
        Ok(Self {
            solver,
            label,
            mode,
            samples,
            variant,
            env,
            seed: cfg.pick(policy.seed, "seed")?.unwrap_or(0),
        })
    }

    fn run(&self, inst: &Instance, seed: u64) -> Result<(Solution, CostBreakdown), Fail> {
        match &self.solver {
            Solver::Random => Ok(random_best_of(
                inst,
                &self.variant,
                self.env.m_pre,
                self.samples,
                &mut stream(seed),
            )?),
            Solver::Model(m) => {
                let r = match self.mode {
                    Some(Mode::Sample) => {
                        let all = m.sample(inst, &self.variant, &self.env, self.samples, seed)?;
                        best_rollout(&all).cloned().expect("at least one sample")
                    }
                    _ => m.greedy(inst, &self.variant, &self.env)?,
                };
                Ok((r.solution, r.cost))
            }
        }
    }

    fn meta(&self, policy: &str) -> Vec<(String, String)> {
        vec![
            ("policy".into(), policy.into()),
            ("mode".into(), self.label.clone()),
            ("variant".into(), self.variant.kind.as_str().into()),
            ("m_con".into(), self.env.m_con.to_string()),
            ("n_samples".into(), self.samples.to_string()),
            ("seed".into(), self.seed.to_string()),
        ]
    }
}

fn solve_checked(
    plan: &Plan,
    inst: &Instance,
    seed: u64,
) -> Result<(Solution, CostBreakdown, f64), Fail> {
    let t0 = Instant::now();
    let (sol, c) = plan.run(inst, seed)?;
    let secs = t0.elapsed().as_secs_f64();
    let report = validate_solution(inst, &sol, &plan.variant);
    if !report.is_valid() {
        return Err(Fail::Infeasible(format!(
            "constructed solution is invalid: {:?}",
            report.violations
        )));
    }
    Ok((sol, c, secs))
}

pub fn generate(a: GenerateArgs) -> Result<(), Fail> {
    let kind: VariantKind = a.variant.parse().map_err(Fail::Usage)?;
    let out = a.out.unwrap_or_else(|| data_dir().join("instances"));
    io(fs::create_dir_all(&out), || {
        format!("creating {}", out.display())
    })?;
    let params = GenParams {
        horizon: a.horizon,
        service: a.service,
        capacity: a.capacity,
    };
    let width = a.count.saturating_sub(1).to_string().len().max(5);
    let mut manifest = String::from("index,seed,file\n");
    for i in 0..a.count {
        let seed = derive_seed(a.seed, i as u64);
        let inst = match (kind, a.capacity) {
            (VariantKind::Cvrp, Some(q)) => generate_cvrp_with_capacity(a.n, seed, q),
            (VariantKind::Cvrp, None) => generate_cvrp(a.n, seed),
            _ => generate_cvrptw(a.n, seed, &params),
        }
        .map_err(|e| Fail::Usage(format!("{e} (pass --capacity)")))?;
        let file = format!("inst-{i:0width$}.vrp");
        write(&out.join(&file), &save_instance(&inst))?;
        let _ = writeln!(manifest, "{i},{seed},{file}");
    }
    write(&out.join("manifest.csv"), &manifest)?;
    println!("wrote {} instances to {}", a.count, out.display());
    Ok(())
}

pub fn solve(a: SolveArgs) -> Result<(), Fail> {
    let cfg = ConfigFile::load(a.variant.config.as_deref())?;
    let inst = read_instance(&a.instance, a.split)?;
    let plan = Plan::build(&a.policy, &a.variant, &cfg, &inst, None, None)?;
    let (sol, c, secs) = solve_checked(&plan, &inst, plan.seed)?;
    println!(
        "{}: cost {:.2} k {} distance {:.2} duration {:.2} seconds {:.3}",
        plan.label,
        c.total,
        sol.k(),
        c.distance,
        c.duration,
        secs
    );
    let text = save_solution(&sol, c.total);
    match &a.out {
        Some(p) => write(p, &text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn list_instances(dir: &Path) -> Result<Vec<PathBuf>, Fail> {
    let entries = io(fs::read_dir(dir), || format!("listing {}", dir.display()))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "vrp"))
        .collect();
    files.sort();
    Ok(files)
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool, Fail> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Fail::Io(e.into()))
}

fn stem(p: &Path) -> String {
    p.file_stem().map_or_else(
        || p.display().to_string(),
        |s| s.to_string_lossy().into_owned(),
    )
}

pub fn eval(a: EvalArgs) -> Result<(), Fail> {
    let cfg = ConfigFile::load(a.variant.config.as_deref())?;
    let dir = a
        .dir
        .clone()
        .unwrap_or_else(|| data_dir().join("instances"));
    let mut files = list_instances(&dir)?;
    if let Some(l) = a.limit {
        files.truncate(l);
    }
    if files.is_empty() {
        return Err(Fail::Usage(format!("no .vrp files in {}", dir.display())));
    }
    let insts = files
        .iter()
        .map(|f| read_instance(f, None).map(|i| (stem(f), i)))
        .collect::<Result<Vec<_>, _>>()?;
    let (n0, k0) = (insts[0].1.n_customers(), insts[0].1.kind());
    if !a.allow_mixed
        && insts
            .iter()
            .any(|(_, i)| i.n_customers() != n0 || i.kind() != k0)
    {
        return Err(Fail::Usage(
            "instances differ in size or kind; pass --allow-mixed".into(),
        ));
    }
    let plan = Plan::build(&a.policy, &a.variant, &cfg, &insts[0].1, None, None)?;
    let policy = cfg
        .pick(a.policy.policy.clone(), "policy")?
        .unwrap_or_else(|| "random".into());
    let rows = pool(a.jobs)?.install(|| {
        insts
            .par_iter()
            .enumerate()
            .map(|(i, (name, inst))| {
                check_kind(inst, &plan.variant)?;
                let (sol, c, secs) = solve_checked(&plan, inst, derive_seed(plan.seed, i as u64))?;
                Ok(EvalRow::new(name, &sol, &c, secs))
            })
            .collect::<Result<Vec<_>, Fail>>()
    })?;
    let mut report = EvalReport::new(plan.meta(&policy));
    report.rows = rows;
    if let Some(out) = &a.out {
        write(out, &report.to_csv())?;
    }
    print!("{}", report.table());
    Ok(())
}

fn solomon_defaults() -> Result<Vec<PathBuf>, Fail> {
    let dir = data_dir().join("solomon");
    let entries = io(fs::read_dir(&dir), || format!("listing {}", dir.display()))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            let s = stem(p).to_ascii_uppercase();
            s.starts_with("R2") || s.starts_with("RC2")
        })
        .collect();
    files.sort();
    Ok(files)
}

/// `RC2` or `R2` from a Solomon file name.
pub fn benchmark_group(name: &str) -> &'static str {
    let up = name.to_ascii_uppercase();
    if up.starts_with("RC2") {
        "RC2"
    } else if up.starts_with("R2") {
        "R2"
    } else if up.starts_with("RC1") {
        "RC1"
    } else if up.starts_with("R1") {
        "R1"
    } else if up.starts_with('C') {
        "C"
    } else {
        "other"
    }
}

pub fn benchmark(a: BenchmarkArgs) -> Result<(), Fail> {
    let cfg = ConfigFile::load(a.variant.config.as_deref())?;
    if a.track != 100 && a.track != 50 {
        return Err(Fail::Usage("--track must be 100 or 50".into()));
    }
    let files = if a.files.is_empty() {
        solomon_defaults()?
    } else {
        a.files.clone()
    };
    let mut insts = Vec::new();
    let mut failed = 0;
    for f in &files {
        let parsed = read_instance(f, None).and_then(|inst| {
            if a.track == 100 {
                return Ok(vec![(stem(f), inst)]);
            }
            let first =
                split_instance(&inst, Half::First).map_err(|e| Fail::Usage(e.to_string()))?;
            let second =
                split_instance(&inst, Half::Second).map_err(|e| Fail::Usage(e.to_string()))?;
            Ok(vec![
                (format!("{}-50a", stem(f)), first),
                (format!("{}-50b", stem(f)), second),
            ])
        });
        match parsed {
            Ok(v) => insts.extend(v),
            Err(e) => {
                eprintln!("skipping {}: {e}", f.display());
                failed += 1;
            }
        }
    }
    if insts.is_empty() {
        return Err(Fail::Io(anyhow::anyhow!(
            "no benchmark instance could be read"
        )));
    }
    let mut csv = String::from("policy,mode,group,instance,cost,k,distance,duration,seconds\n");
    let mut summary = String::new();
    let base = PolicyArgs {
        policy: None,
        mode: None,
        samples: a.samples,
        m_con: a.m_con,
        seed: Some(a.seed),
    };
    for policy in &a.policies {
        let modes: Vec<Option<Mode>> = if policy == "random" {
            vec![None]
        } else {
            a.modes.iter().copied().map(Some).collect()
        };
        for mode in modes {
            let plan = Plan::build(&base, &a.variant, &cfg, &insts[0].1, Some(policy), mode)?;
            let rows = pool(a.jobs)?.install(|| {
                insts
                    .par_iter()
                    .enumerate()
                    .map(|(i, (name, inst))| {
                        let (sol, c, secs) =
                            solve_checked(&plan, inst, derive_seed(plan.seed, i as u64))?;
                        Ok(EvalRow::new(name, &sol, &c, secs))
                    })
                    .collect::<Result<Vec<_>, Fail>>()
            })?;
            let mut groups: Vec<&str> = rows.iter().map(|r| benchmark_group(&r.instance)).collect();
            for r in &rows {
                let _ = writeln!(
                    csv,
                    "{policy},{},{},{},{:?},{},{:?},{:?},{:.3}",
                    plan.label,
                    benchmark_group(&r.instance),
                    r.instance,
                    r.cost,
                    r.k,
                    r.distance,
                    r.duration,
                    r.seconds
                );
            }
            groups.sort();
            groups.dedup();
            for g in groups {
                let sel: Vec<&EvalRow> = rows
                    .iter()
                    .filter(|r| benchmark_group(&r.instance) == g)
                    .collect();
                let m = |f: fn(&EvalRow) -> f64| {
                    sel.iter().map(|r| f(r)).sum::<f64>() / sel.len() as f64
                };
                let (c, k, d, t, s) = (
                    m(|r| r.cost),
                    m(|r| r.k as f64),
                    m(|r| r.distance),
                    m(|r| r.duration),
                    m(|r| r.seconds),
                );
                let _ = writeln!(
                    csv,
                    "{policy},{},{g},MEAN,{c:?},{k:?},{d:?},{t:?},{s:.3}",
                    plan.label
                );
                let _ = writeln!(
                    summary,
                    "{policy:<24} {:<14} {g:<4} {:>3} instances  cost {c:>10.2}  k {k:>6.2}  dist {d:>10.2}  t {s:.3}s",
                    plan.label,
                    sel.len()
                );
            }
        }
    }
    if let Some(out) = &a.out {
        write(out, &csv)?;
    }
    print!("{summary}");
    if failed > 0 {
        eprintln!("{failed} file(s) could not be read");
    }
    Ok(())
}

fn report_fail(e: ReportError) -> Fail {
    match e {
        ReportError::Env(e) => e.into(),
        other => Fail::Io(other.into()),
    }
}

pub fn plot(a: PlotArgs) -> Result<(), Fail> {
    let cfg = ConfigFile::load(a.variant.config.as_deref())?;
    let inst = read_instance(&a.instance, a.split)?;
    let (sol, _) = read_solution(&a.solution)?;
    let variant = a.variant.resolve(&cfg, instance_variant(&inst))?;
    let svg = plot_svg(&inst, &sol, &variant).map_err(report_fail)?;
    match &a.out {
        Some(p) => write(p, &svg),
        None => {
            print!("{svg}");
            Ok(())
        }
    }
}

pub fn validate(a: ValidateArgs) -> Result<(), Fail> {
    let cfg = ConfigFile::load(a.variant.config.as_deref())?;
    let inst = read_instance(&a.instance, a.split)?;
    let (sol, recorded) = read_solution(&a.solution)?;
    let variant = a.variant.resolve(&cfg, instance_variant(&inst))?;
    let report = validate_solution(&inst, &sol, &variant);
    if !report.is_valid() {
        for v in &report.violations {
            println!("violation {:?}: {}", v.kind, v.detail);
        }
        return Err(Fail::Infeasible(format!(
            "{} violation(s)",
            report.violations.len()
        )));
    }
    let c = cost(&inst, &sol, &variant)?;
    println!(
        "valid: k {} cost {:.4} (recorded {:.4}) distance {:.4}",
        sol.k(),
        c.total,
        recorded,
        c.distance
    );
    Ok(())
}

pub fn train(a: TrainArgs) -> Result<(), Fail> {
    let cfg = ConfigFile::load(a.variant.config.as_deref())?;
    let variant = a.variant.resolve(&cfg, VariantKind::Tw1)?;
    let n: usize = cfg.pick(a.n, "n")?.unwrap_or(20);
    let kind: PolicyKind = match cfg.pick(a.policy_kind.clone(), "policy_kind")? {
        Some(s) => s.parse().map_err(Fail::Usage)?,
        None => PolicyKind::Jampr,
    };
    let m_con = if kind.is_am() {
        1
    } else {
        cfg.pick(a.m_con, "m_con")?
            .unwrap_or_else(|| default_m_con(variant.kind, n))
    };
    let mut tc = TrainConfig::paper(variant, n, m_con);
    tc.epochs = cfg.pick(a.epochs, "epochs")?.unwrap_or(tc.epochs);
    tc.instances_per_epoch = cfg
        .pick(a.instances_per_epoch, "instances_per_epoch")?
        .unwrap_or(tc.instances_per_epoch);
    tc.batch_size = cfg
        .pick(a.batch_size, "batch_size")?
        .unwrap_or(tc.batch_size);
    tc.baseline.eval_set_size = cfg
        .pick(a.eval_set_size, "eval_set_size")?
        .unwrap_or(tc.baseline.eval_set_size);
    tc.lr0 = cfg.pick(a.lr, "lr")?.unwrap_or(tc.lr0);
    tc.seed = cfg.pick(a.seed, "seed")?.unwrap_or(0);
    let sampler = RandomInstances {
        n,
        time_windows: variant.kind.has_time(),
        params: GenParams {
            capacity: cfg.pick(a.capacity, "capacity")?,
            ..GenParams::default()
        },
    };
    sampler
        .sample(0)
        .map_err(|e| Fail::Usage(format!("{e} (pass --capacity)")))?;
    let out = cfg.pick(a.out.clone(), "out")?.unwrap_or_else(|| {
        data_dir()
            .join("runs")
            .join(format!("{}-n{n}", variant.kind.as_str()))
    });
    let mut trainer = match &a.resume {
        Some(p) => {
            let ck = io(Checkpoint::load(p), || format!("reading {}", p.display()))?;
            Trainer::from_checkpoint(tc, &ck)?
        }
        None => {
            let heads = cfg.pick(a.heads, "heads")?;
            let d = cfg.pick(a.d_node, "d_node")?;
            let tw = variant.kind.has_time();
            let mut mc = match d {
                Some(d) if d != 128 => ModelConfig::small(kind, tw, d, heads.unwrap_or(8)),
                _ => ModelConfig::paper(kind, tw),
            };
            if let Some(h) = heads {
                mc.heads = h;
                mc.dec_heads = h;
            }
            let meta = ModelMeta {
                variant: variant.kind,
                m_con,
            };
            Trainer::new(
                tc,
                Model::new(
                    mc,
                    meta,
                    derive_seed(cfg.pick(a.seed, "seed")?.unwrap_or(0), 7),
                )?,
            )?
        }
    };
    println!("training into {}", out.display());
    println!("{}", jampr::train::METRICS_HEADER);
    trainer.train(&sampler, Some(&out), |m| println!("{}", m.csv_row()))?;
    Ok(())
}
