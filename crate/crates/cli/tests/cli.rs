use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn asset(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/assets").join(rel)
}

fn bimanual(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bimanual")).arg("--out-dir").arg(out).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn run_completes_on_a_full_scene_and_writes_a_trace() {
    let dir = TempDir::new().unwrap();
    let scene = asset("scenes/russian_salad.toml");
    let o = bimanual(dir.path(), &["run", "--request", "please make me a russian salad", "--scene", path(&scene)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("recipe: Russian Salad"));
    assert!(stdout(&o).contains("mixed: true"));
    let trace = fs::read_to_string(dir.path().join("trace.jsonl")).unwrap();
    let last = trace.lines().last().unwrap();
    assert!(last.contains("\"kind\":\"outcome\"") && last.contains("completed"), "{last}");
}

#[test]
fn run_refuses_when_an_ingredient_is_missing() {
    let dir = TempDir::new().unwrap();
    let scene = asset("scenes/vegetable_salad_no_pepper.toml");
    let o = bimanual(dir.path(), &["run", "--request", "please make me a vegetable salad", "--scene", path(&scene)]);
    assert_eq!(code(&o), 3, "{}", stdout(&o));
    assert!(stdout(&o).contains("pepper"));
}

#[test]
fn unreadable_config_is_a_usage_error() {
    let dir = TempDir::new().unwrap();
    let scene = asset("scenes/pepper.toml");
    let missing = dir.path().join("nope.toml");
    let o = bimanual(dir.path(), &["--config", path(&missing), "run", "--request", "x", "--scene", path(&scene)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).starts_with("error:"));
}

#[test]
fn sim_exec_runs_the_pepper_program() {
    let dir = TempDir::new().unwrap();
    let o = bimanual(
        dir.path(),
        &["sim-exec", "--program", path(&asset("programs/pepper.txt")), "--scene", path(&asset("scenes/pepper.toml"))],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("bowl: pepper"));
    let events = fs::read_to_string(dir.path().join("sim-trace.jsonl")).unwrap();
    assert_eq!(events.lines().count(), 10);
}

#[test]
fn sim_exec_reports_parse_errors_with_their_line() {
    let dir = TempDir::new().unwrap();
    let program = dir.path().join("bad.txt");
    fs::write(&program, "move_to_object('gripper', 'pepper')\nexplode('tool', 'pepper')\n").unwrap();
    let o =
        bimanual(dir.path(), &["sim-exec", "--program", path(&program), "--scene", path(&asset("scenes/pepper.toml"))]);
    assert_eq!(code(&o), 5);
    assert!(stderr(&o).contains("bad.txt:2:"), "{}", stderr(&o));
}

#[test]
fn sim_exec_reports_the_failing_call() {
    let dir = TempDir::new().unwrap();
    let program = dir.path().join("early_cut.txt");
    fs::write(&program, "move_to_object('tool', 'cutting_board')\ncut('tool', 'pepper')\n").unwrap();
    let o =
        bimanual(dir.path(), &["sim-exec", "--program", path(&program), "--scene", path(&asset("scenes/pepper.toml"))]);
    assert_eq!(code(&o), 6);
    assert!(stderr(&o).contains("call 2 failed"), "{}", stderr(&o));
    assert!(stderr(&o).contains("NotOnBoard"));
}

#[test]
fn geom_check_accepts_the_fixture_camera() {
    let dir = TempDir::new().unwrap();
    let o = bimanual(dir.path(), &["geom-check", "--calibration", path(&asset("camera.toml"))]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("ok"));
}

#[test]
fn geom_check_accepts_identity_and_rejects_a_reflection() {
    let dir = TempDir::new().unwrap();
    let identity = dir.path().join("identity.toml");
    fs::write(
        &identity,
        "K = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]\n\
         dist = [0.0, 0.0, 0.0, 0.0, 0.0]\n\
         R = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]\n\
         t = [0.0, 0.0, 0.0]\n\
         table_z_camera = 1.0\n",
    )
    .unwrap();
    assert_eq!(code(&bimanual(dir.path(), &["geom-check", "--calibration", path(&identity)])), 0);

    let mirrored = dir.path().join("mirrored.toml");
    fs::write(&mirrored, fs::read_to_string(&identity).unwrap().replace("R = [1.0", "R = [-1.0")).unwrap();
    let o = bimanual(dir.path(), &["geom-check", "--calibration", path(&mirrored)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains('R'), "{}", stderr(&o));
}

#[test]
fn eval_codegen_is_complete_and_reproducible() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    let oa = bimanual(a.path(), &["eval-codegen", "--n", "12"]);
    let ob = bimanual(b.path(), &["eval-codegen", "--n", "12"]);
    assert_eq!(code(&oa), 0, "{}", stderr(&oa));
    assert_eq!(code(&ob), 0);
    assert!(stdout(&oa).contains("100.00%"), "{}", stdout(&oa));
    let rows = |d: &TempDir| fs::read_to_string(d.path().join("eval-codegen-rows.jsonl")).unwrap();
    assert_eq!(rows(&a), rows(&b));
    assert_eq!(rows(&a).lines().count(), 12);
    assert!(a.path().join("eval-codegen.json").exists());
}

#[test]
fn one_scripted_bad_plan_costs_exactly_one_case() {
    let dir = TempDir::new().unwrap();
    let scenario = fs::read_to_string(asset("mock_salads.toml")).unwrap();
    let broken =
        "[[rules]]\ncontains = [\"semantic planner\", \"with extra crunch\"]\nresponse = \"no plan today\"\n\n";
    let (head, rules) = scenario.split_at(scenario.find("[[rules]]").unwrap());
    fs::write(dir.path().join("scenario.toml"), format!("{head}{broken}{rules}")).unwrap();
    let config = dir.path().join("pipeline.toml");
    fs::write(&config, "backend = \"mock\"\nmock_scenario = \"scenario.toml\"\n").unwrap();
    let requests = dir.path().join("requests.tsv");
    fs::write(
        &requests,
        "Vegetable Salad\tplease make me a vegetable salad\n\
         Russian Salad\tplease make me a russian salad with extra crunch\n\
         Russian Salad\tplease make me a russian salad\n\
         Fruit Salad\tplease make me a fruit salad\n",
    )
    .unwrap();
    let o = bimanual(dir.path(), &["--config", path(&config), "eval-codegen", "--requests", path(&requests)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let rows = fs::read_to_string(dir.path().join("eval-codegen-rows.jsonl")).unwrap();
    let failed: Vec<&str> = rows.lines().filter(|l| l.contains("\"success\":false")).collect();
    assert_eq!(failed.len(), 1, "{rows}");
    assert!(failed[0].contains("extra crunch") && failed[0].contains("plan_parse"), "{}", failed[0]);
    assert!(stdout(&o).contains("75.00%"), "{}", stdout(&o));
}

#[test]
fn eval_vision_writes_its_manifest_and_report() {
    let dir = TempDir::new().unwrap();
    let o = bimanual(dir.path(), &["eval-vision", "--scenes", "30", "--miss-rate", "0.2", "--mislabel-rate", "0.1"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let manifest = dir.path().join("manifest.toml");
    assert!(manifest.exists());
    let first = fs::read_to_string(dir.path().join("eval-vision-rows.jsonl")).unwrap();

    let again = TempDir::new().unwrap();
    let o = bimanual(
        again.path(),
        &["eval-vision", "--manifest", path(&manifest), "--miss-rate", "0.2", "--mislabel-rate", "0.1"],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(fs::read_to_string(again.path().join("eval-vision-rows.jsonl")).unwrap(), first);
}

#[test]
fn out_of_range_fault_rates_are_rejected() {
    let dir = TempDir::new().unwrap();
    let o = bimanual(dir.path(), &["eval-vision", "--miss-rate", "1.5"]);
    assert_eq!(code(&o), 2);
}
