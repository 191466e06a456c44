use crate::config::Settings;
use crate::{BenchmarkArgs, Failure, FitArgs, GridArgs, PredictArgs, SimulateArgs, StageArgs};
use gpprog::data::{load_long_csv, score_cohort, write_long_csv, Direction};
use gpprog::fit::fit as fit_model;
use gpprog::persist::ModelFile;
use gpprog::predict::{read_stage_csv, FittedModel, StageGrid};
use gpprog::synth::{benchmark_table1, format_summary, gen_sigmoid_cohort, summarize, write_bench_csv, BenchCell, BenchOptions};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

type Out = BufWriter<File>;

fn create(dir: &Path, name: &str) -> Result<Out, Failure> {
    let path = dir.join(name);
    File::create(&path)
        .map(BufWriter::new)
        .map_err(|e| Failure::input(format!("cannot create {}: {e}", path.display())))
}

fn write_err(e: std::io::Error) -> Failure {
    Failure::input(format!("write failed: {e}"))
}

fn finish(mut w: Out) -> Result<(), Failure> {
    w.flush().map_err(write_err)
}

fn apply_grid(settings: &mut Settings, grid: &GridArgs) -> Result<(), Failure> {
    settings.flag("grid_span", grid.grid_span.clone())?;
    settings.flag("points", grid.points)
}

fn load_model(path: &Path) -> Result<(ModelFile, FittedModel), Failure> {
    let file = ModelFile::load(path)?;
    let model = file.model()?;
    Ok((file, model))
}

fn write_curves(model: &FittedModel, grid: &StageGrid, out: &mut Out, slopes: bool) -> Result<(), Failure> {
    let header = if slopes { "biomarker,time,mean,sd,slope_mean,slope_sd" } else { "biomarker,time,mean,sd" };
    writeln!(out, "{header}").map_err(write_err)?;
    for (b, spec) in model.cohort.biomarkers.iter().enumerate() {
        for t in grid.points() {
            let (m, v) = model.predict_curve(b, t);
            write!(out, "{},{t},{m},{}", spec.name, v.max(0.0).sqrt()).map_err(write_err)?;
            if slopes {
                let (sm, sv) = model.predict_slope(b, t);
                write!(out, ",{sm},{}", sv.max(0.0).sqrt()).map_err(write_err)?;
            }
            writeln!(out).map_err(write_err)?;
        }
    }
    Ok(())
}

pub fn fit(args: FitArgs, mut settings: Settings, out: &Path) -> Result<(), Failure> {
    settings.flag("max_outer_iters", args.max_outer_iters)?;
    settings.flag("lambda", args.lambda)?;
    settings.flag("decreasing", args.decreasing.clone())?;
    if args.score {
        settings.set("score", "true")?;
    }
    let config = settings.fit_config()?;
    let mut cohort = load_long_csv(&args.data)?;

    let decreasing = settings.list("decreasing");
    let score: bool = settings.get_or("score", false)?;
    if !decreasing.is_empty() && !score {
        return Err(Failure::input("decreasing is only meaningful with score"));
    }
    let transforms = if score {
        let unknown: Vec<&String> = decreasing.iter().filter(|d| cohort.biomarker_index(d).is_none()).collect();
        if !unknown.is_empty() {
            return Err(Failure::input(format!("unknown biomarker(s) in decreasing: {unknown:?}")));
        }
        let directions: Vec<Direction> = cohort
            .biomarkers
            .iter()
            .map(|b| {
                if decreasing.contains(&b.name) {
                    Direction::DecreasingAbnormal
                } else {
                    Direction::IncreasingAbnormal
                }
            })
            .collect();
        Some(score_cohort(&mut cohort, &directions)?)
    } else {
        None
    };

    let result = fit_model(&cohort, &config)?;
    if !result.converged {
        log::warn!("outer loop stopped at the iteration cap before the objective settled");
    }
    let model = FittedModel::from_fit(&result);
    let file = ModelFile::new(&model, transforms, Some(result.objective()));
    file.save(out.join("model.json"))?;

    let mut w = create(out, "trace.csv")?;
    writeln!(w, "iteration,objective").map_err(write_err)?;
    for (i, f) in result.trace.iter().enumerate() {
        writeln!(w, "{i},{f}").map_err(write_err)?;
    }
    finish(w)?;

    let mut w = create(out, "shifts.csv")?;
    writeln!(w, "subject_id,time_shift").map_err(write_err)?;
    for ind in &model.cohort.individuals {
        writeln!(w, "{},{}", ind.id, ind.time_shift).map_err(write_err)?;
    }
    finish(w)?;

    let grid = settings.stage_grid(model.default_stage_grid())?;
    let mut w = create(out, "curves.csv")?;
    write_curves(&model, &grid, &mut w, false)?;
    finish(w)?;
    log::info!("objective {} after {} iterations", result.objective(), result.trace.len());
    Ok(())
}

pub fn predict(args: PredictArgs, mut settings: Settings, out: &Path) -> Result<(), Failure> {
    apply_grid(&mut settings, &args.grid)?;
    let (_, model) = load_model(&args.model)?;
    let grid = settings.stage_grid(model.default_stage_grid())?;
    let mut w = create(out, "predictions.csv")?;
    write_curves(&model, &grid, &mut w, true)?;
    finish(w)
}

pub fn stage(args: StageArgs, mut settings: Settings, out: &Path) -> Result<(), Failure> {
    apply_grid(&mut settings, &args.grid)?;
    let (file, model) = load_model(&args.model)?;
    let grid = settings.stage_grid(model.default_stage_grid())?;
    let reader = File::open(&args.data)
        .map_err(|e| Failure::input(format!("cannot read {}: {e}", args.data.display())))?;
    let names: Vec<String> = model.cohort.biomarkers.iter().map(|b| b.name.clone()).collect();
    let mut subjects = read_stage_csv(reader, &names)?;
    if let Some(transforms) = &file.transforms {
        for o in subjects.iter_mut().flat_map(|s| s.observations.iter_mut()) {
            o.value = transforms[o.biomarker].apply(o.value);
        }
    }

    let mut stages = create(out, "stages.csv")?;
    let mut density = create(out, "density.csv")?;
    writeln!(stages, "subject_id,stage_mean,stage_map,ci_low,ci_high").map_err(write_err)?;
    writeln!(density, "subject_id,stage,density").map_err(write_err)?;
    let mut staged = 0;
    for s in &subjects {
        if s.observations.is_empty() {
            log::warn!("subject {} has no observed biomarker; skipped", s.id);
            continue;
        }
        let p = model.stage(s, &grid)?;
        let (lo, hi) = p.credible_interval;
        writeln!(stages, "{},{},{},{lo},{hi}", s.id, p.mean, p.map_stage).map_err(write_err)?;
        for (t, d) in p.grid.iter().zip(&p.density) {
            writeln!(density, "{},{t},{d}", s.id).map_err(write_err)?;
        }
        staged += 1;
    }
    finish(stages)?;
    finish(density)?;
    log::info!("staged {staged} of {} subjects", subjects.len());
    Ok(())
}

pub fn simulate(args: SimulateArgs, mut settings: Settings, out: &Path) -> Result<(), Failure> {
    settings.flag("n", args.n)?;
    settings.flag("nb", args.nb)?;
    settings.flag("sigma", args.sigma)?;
    let s = gen_sigmoid_cohort(&settings.synth_config()?)?;

    let w = create(out, "data.csv")?;
    write_long_csv(&s.cohort, w)?;

    let mut w = create(out, "truth.csv")?;
    writeln!(w, "subject_id,mu").map_err(write_err)?;
    for (ind, mu) in s.cohort.individuals.iter().zip(&s.truth.mu) {
        writeln!(w, "{},{mu}", ind.id).map_err(write_err)?;
    }
    finish(w)?;

    let mut w = create(out, "slopes.csv")?;
    writeln!(w, "biomarker,alpha").map_err(write_err)?;
    for (b, a) in s.cohort.biomarkers.iter().zip(&s.truth.alpha) {
        writeln!(w, "{},{a}", b.name).map_err(write_err)?;
    }
    finish(w)
}

/// Parses `N=20,Nb=4,sigma=0.1`.
fn parse_cell(text: &str) -> Result<BenchCell, Failure> {
    let bad = || Failure::input(format!("cell must look like N=20,Nb=4,sigma=0.1 (got {text:?})"));
    let (mut n, mut nb, mut sigma) = (None, None, None);
    for part in text.split(',') {
        let (k, v) = part.split_once('=').ok_or_else(bad)?;
        match k.trim() {
            "N" => n = Some(v.trim().parse::<usize>().map_err(|_| bad())?),
            "Nb" => nb = Some(v.trim().parse::<usize>().map_err(|_| bad())?),
            "sigma" => sigma = Some(v.trim().parse::<f64>().map_err(|_| bad())?),
            _ => return Err(bad()),
        }
    }
    let cell = BenchCell { n: n.ok_or_else(bad)?, n_biomarkers: nb.ok_or_else(bad)?, sigma: sigma.ok_or_else(bad)? };
    if cell.n < 3 || cell.n_biomarkers == 0 || !(cell.sigma >= 0.0 && cell.sigma.is_finite()) {
        return Err(Failure::input(format!("invalid cell {text:?}: need N >= 3, Nb >= 1, sigma >= 0")));
    }
    Ok(cell)
}

pub fn benchmark(args: BenchmarkArgs, mut settings: Settings, out: &Path) -> Result<(), Failure> {
    settings.flag("max_outer_iters", args.max_outer_iters)?;
    settings.flag("reps", args.reps)?;
    if args.no_timing {
        settings.set("timing", "false")?;
    }
    let mut cells: Vec<BenchCell> = args.cell.iter().map(|c| parse_cell(c)).collect::<Result<_, _>>()?;
    if args.full {
        cells.extend(BenchCell::table1());
    }
    if cells.is_empty() {
        return Err(Failure::input("no benchmark cells: pass --cell or --full"));
    }
    let opts = BenchOptions {
        repetitions: settings.get_or("reps", 10)?,
        seed: settings.get_or("seed", 0)?,
        fit: settings.fit_config()?,
        synth: settings.synth_config()?,
        timing: settings.get_or("timing", true)?,
    };
    if opts.repetitions == 0 {
        return Err(Failure::input("reps must be at least 1"));
    }
    let rows = benchmark_table1(&cells, &opts);
    let w = create(out, "bench.csv")?;
    write_bench_csv(&rows, w).map_err(write_err)?;
    let summary = format_summary(&summarize(&rows));
    let mut w = create(out, "summary.txt")?;
    w.write_all(summary.as_bytes()).map_err(write_err)?;
    finish(w)?;
    print!("{summary}");
    Ok(())
}
