use std::path::Path;

use privcnp::accounting::{
    classical_functional_sigma, gdp_functional_sigma, mu_from_budget, rdp_functional_sigma, PrivacyBudget,
};
use privcnp::dpsetconv::{EncodeMode, EncoderFlags, EncoderNoise};
use privcnp::grid::{grid_points, GridSpec};
use privcnp::kernel::KernelSpec;
use privcnp::model::{
    load_model, meta_train, save_model, summarise, DpConvCnp, ModelConfig, Summary, TrainConfig,
};
use privcnp::oracle::{gp_oracle_nll, lower_bound_task_nlls, prior_marginal_nll, sawtooth_floor_nll, SignalNoise};
use privcnp::taskgen::{
    load_real_dataset, read_tasks, split_real_task, write_tasks, Family, GeneratorConfig, Interval, Task,
    TaskStream,
};
use privcnp::Error;

use crate::args::*;
use crate::output::{Cell, CsvOut};
use crate::CliError;

type Res<T = ()> = std::result::Result<T, CliError>;

pub fn run(cli: Cli) -> Res {
    match cli.command {
        Command::Account(a) => account(a),
        Command::CompareAccountants(a) => compare(a),
        Command::SampleGridNoise(a) => sample_noise(a),
        Command::GenTasks(a) => {
            set_workers(a.workers, None)?;
            gen_tasks(a)
        }
        Command::Train(a) => {
            set_workers(a.workers, None)?;
            train(a)
        }
        Command::Eval(a) => {
            set_workers(a.workers, Some(1))?;
            eval(a)
        }
        Command::Oracle(a) => {
            set_workers(a.workers, Some(1))?;
            oracle(a)
        }
        Command::LowerBound(a) => {
            set_workers(a.workers, Some(1))?;
            lower_bound(a)
        }
    }
}

fn set_workers(requested: Option<usize>, default: Option<usize>) -> Res {
    let Some(n) = requested.or(default) else {
        return Ok(());
    };
    if n == 0 {
        return Err(CliError::Usage("--workers must be at least 1".into()));
    }
    // A second initialisation (possible only in-process) keeps the first pool.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn sensitivity(sq: f64) -> Res<f64> {
    if !(sq > 0.0 && sq.is_finite()) {
        return Err(Error::Domain(format!("squared sensitivity must be > 0, got {sq}")).into());
    }
    Ok(sq.sqrt())
}

fn account(a: AccountArgs) -> Res {
    let budget = PrivacyBudget::new(a.eps, a.delta)?;
    let delta_h = sensitivity(a.sensitivity_sq)?;
    let mu = mu_from_budget(&budget)?;
    let classical = if a.eps <= 1.0 {
        classical_functional_sigma(delta_h, &budget)?
    } else {
        f64::NAN
    };
    let rdp = rdp_functional_sigma(delta_h, &budget)?;
    let gdp = gdp_functional_sigma(delta_h, &budget)?;
    use privcnp::serial::float17;
    println!("mu {}", float17(mu.value()));
    println!("sigma_classical {}", float17(classical));
    println!("sigma_rdp {}", float17(rdp));
    println!("sigma_gdp {}", float17(gdp));
    Ok(())
}

fn compare(a: CompareArgs) -> Res {
    if a.steps < 2 || !(a.eps_min > 0.0) || !(a.eps_max > a.eps_min) {
        return Err(CliError::Usage("need --steps >= 2 and 0 < --eps-min < --eps-max".into()));
    }
    let delta_h = sensitivity(a.sensitivity_sq)?;
    let mut out = CsvOut::create(a.out.as_deref(), &["eps", "sigma_classical", "sigma_rdp", "sigma_gdp"])?;
    for i in 0..a.steps {
        let eps = a.eps_min + (a.eps_max - a.eps_min) * i as f64 / (a.steps - 1) as f64;
        let budget = PrivacyBudget::new(eps, a.delta)?;
        let classical = if eps <= 1.0 {
            Cell::Float(classical_functional_sigma(delta_h, &budget)?)
        } else {
            Cell::Text(String::new())
        };
        out.row(vec![
            eps.into(),
            classical,
            rdp_functional_sigma(delta_h, &budget)?.into(),
            gdp_functional_sigma(delta_h, &budget)?.into(),
        ])?;
    }
    out.finish()
}

fn parse_grid(s: &str) -> Res<GridSpec> {
    Ok(s.parse::<GridSpec>()?)
}

fn sample_noise(a: SampleNoiseArgs) -> Res {
    let grid = parse_grid(&a.grid)?;
    if a.draws == 0 {
        return Err(CliError::Usage("--draws must be at least 1".into()));
    }
    let noise = EncoderNoise::new(&grid, a.lengthscale)?;
    let mut rng = TaskStream::rng_for(a.seed, 0);
    let fields: Vec<Vec<f64>> = (0..a.draws).map(|_| noise.sample(&mut rng)).collect();
    let mut header: Vec<String> = (0..grid.dims()).map(|d| format!("x{d}")).collect();
    header.extend((0..a.draws).map(|r| format!("draw{r}")));
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let mut out = CsvOut::create(a.out.as_deref(), &header)?;
    for (j, point) in grid_points(&grid).into_iter().enumerate() {
        let mut row: Vec<Cell> = point.into_iter().map(Cell::from).collect();
        row.extend(fields.iter().map(|f| Cell::from(f[j])));
        out.row(row)?;
    }
    out.finish()
}

fn parse_eps(s: &str) -> Res<Interval> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let num = |p: &str| {
        p.parse::<f64>()
            .map_err(|_| CliError::Usage(format!("bad --eps value '{s}'")))
    };
    match parts.as_slice() {
        [v] => Ok(Interval::fixed(num(v)?)),
        [lo, hi] => Ok(Interval(num(lo)?, num(hi)?)),
        _ => Err(CliError::Usage(format!("--eps takes a value or lo,hi, got '{s}'"))),
    }
}

fn generator(family: FamilyArg, g: &GeneratorArgs) -> Res<GeneratorConfig> {
    let mut cfg = match family {
        FamilyArg::Eq => match g.lengthscale {
            Some(l) => GeneratorConfig::eq(l),
            None => GeneratorConfig::eq_amortised(),
        },
        FamilyArg::Sawtooth => match g.period {
            Some(p) => GeneratorConfig::sawtooth(p),
            None => GeneratorConfig::sawtooth_amortised(),
        },
        FamilyArg::Matern32 => {
            let mut c = GeneratorConfig::matern_sim_to_real();
            if let Some(l) = g.lengthscale {
                c.lengthscale = Interval::fixed(l);
            }
            c
        }
    };
    if let Some(n) = g.context_size {
        cfg = cfg.with_context_size(n);
    }
    if let Some(m) = g.target_count {
        cfg.target_count = m;
    }
    if let Some(e) = &g.eps {
        cfg.epsilon = parse_eps(e)?;
    }
    if let Some(d) = g.delta {
        cfg.delta = d;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn real_tasks(a: &GenTasksArgs, data: &Path) -> Res<Vec<Task>> {
    let (x_col, y_col) = (a.x_col.as_deref().unwrap_or_default(), a.y_col.as_deref().unwrap_or_default());
    let dataset = load_real_dataset(data, x_col, y_col)?;
    let n = a.generator.context_size.unwrap_or_default();
    let eps = match &a.generator.eps {
        Some(e) => parse_eps(e)?,
        None => GeneratorConfig::eq(1.0).epsilon,
    };
    eps.validate("epsilon")?;
    let delta = a.generator.delta.unwrap_or(1e-3);
    log::info!("normalisation of {}: {:?}", data.display(), dataset.normalisation);
    (0..a.count as u64)
        .map(|i| {
            let mut rng = TaskStream::rng_for(a.seed, i);
            let budget = PrivacyBudget::new(eps.sample(&mut rng), delta)?;
            Ok(split_real_task(&dataset, n, &mut rng, budget)?)
        })
        .collect()
}

fn gen_tasks(a: GenTasksArgs) -> Res {
    let tasks = match (&a.data, a.family) {
        (Some(data), _) => real_tasks(&a, data)?,
        (None, Some(family)) => {
            let mut cfg = generator(family, &a.generator)?;
            if a.eval {
                cfg = cfg.for_evaluation();
            }
            TaskStream::new(cfg, a.seed)?.tasks(0, a.count)?
        }
        (None, None) => return Err(CliError::Usage("need --family or --data".into())),
    };
    write_tasks(&a.out, &tasks)?;
    log::info!("wrote {} tasks to {}", tasks.len(), a.out.display());
    Ok(())
}

fn family_name(f: FamilyArg) -> &'static str {
    match f {
        FamilyArg::Eq => "eq",
        FamilyArg::Matern32 => "matern32",
        FamilyArg::Sawtooth => "sawtooth",
    }
}

fn train(a: TrainArgs) -> Res {
    let mut config = match a.preset {
        PresetArg::Tiny => ModelConfig::tiny(),
        PresetArg::Paper => ModelConfig::paper_scale(),
    };
    if a.ablation {
        config = ModelConfig::ablation(config, a.ablation_t, a.ablation_clip);
    } else if a.non_private {
        config = ModelConfig::non_private(config);
    }
    let gen = generator(a.tasks_family, &a.generator)?;
    let stream = TaskStream::new(gen.clone(), a.seed)?;
    let validation = TaskStream::new(gen.for_evaluation(), a.seed.wrapping_add(1))?.tasks(0, a.val_tasks)?;
    let cfg = TrainConfig {
        steps: a.steps,
        batch_size: a.batch_size,
        learning_rate: a.lr,
        eval_every: a.eval_every,
        seed: a.seed,
    };
    let mut model = DpConvCnp::new(config, a.seed)?;
    let outcome = meta_train(&mut model, &stream, &validation, &cfg, None)?;

    let info = serde_json::json!({
        "steps": a.steps,
        "batch_size": a.batch_size,
        "learning_rate": a.lr,
        "seed": a.seed,
        "family": family_name(a.tasks_family),
        "lengthscale": a.generator.lengthscale,
        "period": a.generator.period,
        "best_step": outcome.best_step,
        "best_val_nll": outcome.best_val_nll,
    });
    save_model(&a.out, &model, info)?;
    let mut log = CsvOut::create(
        Some(&a.out.join("training_log.csv")),
        &["step", "train_nll", "val_nll", "lambda", "wall_ms"],
    )?;
    for row in &outcome.log {
        log.row(vec![
            row.step.into(),
            row.train_nll.into(),
            row.val_nll.into(),
            row.lambda.into(),
            (row.wall_ms as u64).into(),
        ])?;
    }
    log.finish()?;
    if let Some(v) = outcome.best_val_nll {
        log::info!("best validation NLL {v:.4}");
    }
    Ok(())
}

fn print_summary(label: &str, s: &Summary) {
    use privcnp::serial::float17;
    println!(
        "{label} n={} mean={} std_err={} ci95={}",
        s.n,
        float17(s.mean),
        float17(s.std_err),
        float17(s.ci95)
    );
}

fn eval(a: EvalArgs) -> Res {
    let model = load_model(&a.ckpt)?;
    let tasks = read_tasks(&a.tasks)?;
    let mode = match a.mode {
        Some(ModeArg::Deploy) => EncodeMode::Deploy,
        Some(ModeArg::Train) => EncodeMode::Train,
        Some(ModeArg::Ablation) => EncodeMode::Ablation,
        None if model.config.flags == EncoderFlags::ALL => EncodeMode::Deploy,
        None => model.config.train_mode,
    };
    let nlls = privcnp::model::evaluate_tasks(&model, &tasks, mode, a.seed)?;
    let mut out = CsvOut::create(a.out.as_deref(), &["task", "nll"])?;
    for (i, v) in nlls.iter().enumerate() {
        out.row(vec![i.into(), (*v).into()])?;
    }
    out.finish()?;
    print_summary("nll", &summarise(&nlls));
    Ok(())
}

enum Scorer {
    Gp(KernelSpec),
    Sawtooth(f64),
}

fn scorer_for(k: &KernelArgs, task: &Task) -> privcnp::Result<Scorer> {
    let meta = &task.meta;
    let family = match k.family {
        Some(FamilyArg::Eq) => Family::Eq,
        Some(FamilyArg::Matern32) => Family::Matern32,
        Some(FamilyArg::Sawtooth) => Family::Sawtooth,
        None => meta.family,
    };
    let missing = |what: &str| Error::Domain(format!("{what} not given and not recorded in the task"));
    let noise = k.noise_scale.or(meta.noise_scale).ok_or_else(|| missing("noise scale"))?;
    match family {
        Family::Sawtooth => Ok(Scorer::Sawtooth(noise)),
        Family::Real => Err(Error::Domain("real-data tasks have no reference kernel; pass --family".into())),
        gp => {
            let l = k.lengthscale.or(meta.lengthscale).ok_or_else(|| missing("lengthscale"))?;
            let sv = k.signal_scale.or(meta.signal_scale).ok_or_else(|| missing("signal scale"))?;
            let spec = if gp == Family::Eq {
                KernelSpec::eq(l, sv, noise)?
            } else {
                KernelSpec::matern32(l, sv, noise)?
            };
            Ok(Scorer::Gp(spec))
        }
    }
}

fn oracle(a: OracleArgs) -> Res {
    use rayon::prelude::*;
    let tasks = read_tasks(&a.tasks)?;
    let rows: Vec<(f64, Option<f64>)> = tasks
        .par_iter()
        .map(|task| match scorer_for(&a.kernel, task)? {
            Scorer::Gp(spec) => Ok((gp_oracle_nll(&spec, task)?, Some(prior_marginal_nll(&spec, task)?))),
            Scorer::Sawtooth(sn) => Ok((sawtooth_floor_nll(sn)?, None)),
        })
        .collect::<privcnp::Result<_>>()?;
    let mut out = CsvOut::create(a.out.as_deref(), &["task", "oracle_nll", "prior_nll"])?;
    for (i, (o, p)) in rows.iter().enumerate() {
        let prior = p.map_or(Cell::Text(String::new()), Cell::Float);
        out.row(vec![i.into(), (*o).into(), prior])?;
    }
    out.finish()?;
    let oracle: Vec<f64> = rows.iter().map(|r| r.0).collect();
    print_summary("oracle", &summarise(&oracle));
    let prior: Vec<f64> = rows.iter().filter_map(|r| r.1).collect();
    if prior.len() == rows.len() && !prior.is_empty() {
        print_summary("prior", &summarise(&prior));
    }
    Ok(())
}

fn lower_bound(a: LowerBoundArgs) -> Res {
    let grid = parse_grid(&a.grid)?;
    let tasks = read_tasks(&a.tasks)?;
    let sigma = match (a.sigma_s, a.clip, a.t) {
        (Some(s), _, _) => SignalNoise::Fixed(s),
        (None, Some(clip), Some(t)) => SignalNoise::FromBudget { clip, t },
        _ => return Err(CliError::Usage("need --sigma-s or both --clip and --t".into())),
    };
    let kernel = &a.kernel;
    let spec_of = |task: &Task| match scorer_for(kernel, task)? {
        Scorer::Gp(spec) => Ok(spec),
        Scorer::Sawtooth(_) => Err(Error::Domain("the lower bound needs GP tasks".into())),
    };
    let nlls = lower_bound_task_nlls(&spec_of, &tasks, a.lambda, sigma, &grid, a.draws, a.seed)?;
    let mut out = CsvOut::create(a.out.as_deref(), &["task", "lower_bound_nll"])?;
    for (i, v) in nlls.iter().enumerate() {
        out.row(vec![i.into(), (*v).into()])?;
    }
    out.finish()?;
    print_summary("lower_bound", &summarise(&nlls));
    Ok(())
}
