use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn gpprog(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gpprog")).args(args).output().expect("spawn gpprog")
}

fn ok(out: &Output) {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn simulate(dir: &Path, seed: &str) {
    ok(&gpprog(&["simulate", "--N", "12", "--Nb", "3", "--sigma", "0.1", "--seed", seed, "--out", p(dir)]));
}

#[test]
fn simulate_fit_predict_stage_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let sim = tmp.path().join("sim");
    let run = tmp.path().join("run");
    simulate(&sim, "5");
    let truth = fs::read_to_string(sim.join("truth.csv")).unwrap();
    assert_eq!(truth.lines().count(), 13);

    let data = sim.join("data.csv");
    ok(&gpprog(&["fit", "--data", p(&data), "--out", p(&run), "--max-outer-iters", "4"]));
    for f in ["model.json", "trace.csv", "curves.csv", "shifts.csv"] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    let shifts = fs::read_to_string(run.join("shifts.csv")).unwrap();
    assert!(shifts.starts_with("subject_id,time_shift\n"));
    assert_eq!(shifts.lines().count(), 13);

    let model = run.join("model.json");
    ok(&gpprog(&["predict", "--model", p(&model), "--out", p(&run), "--grid-span", "-5,5", "--points", "11"]));
    let pred = fs::read_to_string(run.join("predictions.csv")).unwrap();
    assert!(pred.starts_with("biomarker,time,mean,sd,slope_mean,slope_sd\n"));
    assert_eq!(pred.lines().count(), 1 + 3 * 11);

    ok(&gpprog(&["stage", "--model", p(&model), "--data", p(&data), "--out", p(&run), "--points", "21"]));
    let stages = fs::read_to_string(run.join("stages.csv")).unwrap();
    assert_eq!(stages.lines().count(), 13);
    for line in stages.lines().skip(1) {
        let v: Vec<f64> = line.split(',').skip(1).map(|x| x.parse().unwrap()).collect();
        // the MAP is a grid point, so it lies inside the grid-based interval
        assert!(v[2] <= v[1] && v[1] <= v[3], "{line}");
    }
    let density = fs::read_to_string(run.join("density.csv")).unwrap();
    assert_eq!(density.lines().count(), 1 + 12 * 21);
}

#[test]
fn same_seed_gives_identical_trace() {
    let tmp = tempfile::tempdir().unwrap();
    simulate(tmp.path(), "6");
    let data = tmp.path().join("data.csv");
    let mut traces = Vec::new();
    for k in 0..2 {
        let out = tmp.path().join(format!("r{k}"));
        ok(&gpprog(&[
            "fit", "--data", p(&data), "--out", p(&out), "--seed", "7", "--max-outer-iters", "4", "--set",
            "shuffle_sites=true",
        ]));
        traces.push(fs::read(out.join("trace.csv")).unwrap());
    }
    assert_eq!(traces[0], traces[1]);
}

#[test]
fn scored_model_scores_staging_data() {
    let tmp = tempfile::tempdir().unwrap();
    simulate(tmp.path(), "8");
    let data = tmp.path().join("data.csv");
    let run = tmp.path().join("run");
    ok(&gpprog(&["fit", "--data", p(&data), "--out", p(&run), "--score", "--decreasing", "b02", "--max-outer-iters", "3"]));
    let model = fs::read_to_string(run.join("model.json")).unwrap();
    assert!(model.contains("decreasing_abnormal"));
    ok(&gpprog(&["stage", "--model", p(&run.join("model.json")), "--data", p(&data), "--out", p(&run)]));

    let bad = gpprog(&["fit", "--data", p(&data), "--out", p(&run), "--score", "--decreasing", "nope"]);
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn config_file_and_flag_precedence() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.cfg");
    fs::write(&cfg, "# synthetic\nn = 7\nnb = 2\nsigma = 0.2\nseed = 1\n").unwrap();
    ok(&gpprog(&["simulate", "--config", p(&cfg), "--N", "9", "--out", p(tmp.path())]));
    let truth = fs::read_to_string(tmp.path().join("truth.csv")).unwrap();
    assert_eq!(truth.lines().count(), 10);
    let slopes = fs::read_to_string(tmp.path().join("slopes.csv")).unwrap();
    assert_eq!(slopes.lines().count(), 3);

    fs::write(&cfg, "flavour = mint\n").unwrap();
    let out = gpprog(&["simulate", "--config", p(&cfg), "--out", p(tmp.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("flavour"));
}

#[test]
fn input_errors_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("absent.csv");
    let out = gpprog(&["fit", "--data", p(&missing), "--out", p(tmp.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("absent.csv"));

    let dup = tmp.path().join("dup.csv");
    fs::write(&dup, "subject_id,time,biomarker,value\na,0,x,1\na,0,x,2\n").unwrap();
    assert_eq!(gpprog(&["fit", "--data", p(&dup), "--out", p(tmp.path())]).status.code(), Some(1));

    let header = tmp.path().join("header.csv");
    fs::write(&header, "id,t,b,v\na,0,x,1\n").unwrap();
    assert_eq!(gpprog(&["fit", "--data", p(&header), "--out", p(tmp.path())]).status.code(), Some(1));

    let bad_model = tmp.path().join("model.json");
    fs::write(&bad_model, "{\"format\":\"other\"}").unwrap();
    let out = gpprog(&["predict", "--model", p(&bad_model), "--out", p(tmp.path())]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn staging_edge_cases() {
    let tmp = tempfile::tempdir().unwrap();
    simulate(tmp.path(), "9");
    let run = tmp.path().join("run");
    ok(&gpprog(&["fit", "--data", p(&tmp.path().join("data.csv")), "--out", p(&run), "--max-outer-iters", "3"]));
    let model = run.join("model.json");

    // a subject with only missing values is skipped, the rest are staged
    let partial = tmp.path().join("partial.csv");
    fs::write(&partial, "subject_id,time,biomarker,value\nq,0,b01,NA\nr,0,b02,0.4\nr,1,b02,0.5\n").unwrap();
    let out = gpprog(&["stage", "--model", p(&model), "--data", p(&partial), "--out", p(&run)]);
    ok(&out);
    assert!(String::from_utf8_lossy(&out.stderr).contains("subject q"));
    let stages = fs::read_to_string(run.join("stages.csv")).unwrap();
    assert_eq!(stages.lines().count(), 2);
    assert!(stages.lines().nth(1).unwrap().starts_with("r,"));

    // biomarkers the model has never seen
    let disjoint = tmp.path().join("disjoint.csv");
    fs::write(&disjoint, "subject_id,time,biomarker,value\nq,0,zz,0.1\n").unwrap();
    let out = gpprog(&["stage", "--model", p(&model), "--data", p(&disjoint), "--out", p(&run)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("zz"));
}

#[test]
fn benchmark_cells_and_determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let mut files = Vec::new();
    for k in 0..2 {
        let out = tmp.path().join(format!("b{k}"));
        let res = gpprog(&[
            "benchmark", "--cell", "N=8,Nb=2,sigma=0.1", "--cell", "N=8,Nb=2,sigma=0.3", "--reps", "2", "--seed",
            "3", "--no-timing", "--max-outer-iters", "3", "--out", p(&out),
        ]);
        ok(&res);
        assert!(String::from_utf8_lossy(&res.stdout).contains("r2 mean"));
        files.push(fs::read(out.join("bench.csv")).unwrap());
    }
    assert_eq!(files[0], files[1]);
    let text = String::from_utf8(files.remove(0)).unwrap();
    assert!(text.starts_with("N,Nb,sigma,rep,r,r2,seconds,converged\n"));
    assert_eq!(text.lines().count(), 5);

    let bad = gpprog(&["benchmark", "--cell", "N=8,Nb=0,sigma=0.1", "--out", p(tmp.path())]);
    assert_eq!(bad.status.code(), Some(1));
    let none = gpprog(&["benchmark", "--out", p(tmp.path())]);
    assert_eq!(none.status.code(), Some(1));
}
