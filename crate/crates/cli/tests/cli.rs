//! End-to-end checks of the `nanoworld` binary: exit codes, reports, and
//! replay across process boundaries.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

struct Sandbox {
    dir: PathBuf,
}

impl Sandbox {
    fn new(tag: &str) -> Self {
        let dir = std::env::temp_dir().join(format!("nanoworld-cli-{tag}-{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&dir);
        std::fs::create_dir_all(&dir).unwrap();
        Self { dir }
    }

    fn run(&self, args: &[&str]) -> Output {
        self.run_out(args, &self.dir.join("reports"))
    }

    fn run_out(&self, args: &[&str], out: &Path) -> Output {
        Command::new(env!("CARGO_BIN_EXE_nanoworld"))
            .arg("--lineage-dir")
            .arg(self.dir.join("lineage"))
            .arg("--out")
            .arg(out)
            .args(args)
            .env_remove("NANOWORLD_LINEAGE_DIR")
            .output()
            .unwrap()
    }
}

impl Drop for Sandbox {
    fn drop(&mut self) {
        let _ = std::fs::remove_dir_all(&self.dir);
    }
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn run_id(o: &Output) -> String {
    stdout(o)
        .lines()
        .find_map(|l| l.strip_prefix("run "))
        .expect("run id line")
        .trim()
        .to_string()
}

#[test]
fn scenario_exit_codes() {
    let s = Sandbox::new("codes");
    assert_eq!(s.run(&["scenario", "beam-design"]).status.code(), Some(0));
    assert_eq!(s.run(&["scenario", "no-such-world"]).status.code(), Some(3));
    let bad = s.dir.join("bad.cfg");
    std::fs::write(&bad, "this is not a key value line").unwrap();
    let o = s.run(&["scenario", "beam-design", "--config", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(s.run(&["scenario"]).status.code(), Some(2));
    assert_eq!(s.run(&["rsi", "run", "--level", "A9"]).status.code(), Some(2));
}

#[test]
fn reachable_runaway_halts_the_thermal_scenario() {
    let s = Sandbox::new("thermal");
    let cfg = s.dir.join("thermal.cfg");
    std::fs::write(&cfg, "batch_duration = 3600\n").unwrap();
    let o = s.run(&["scenario", "thermal-runaway", "--config", cfg.to_str().unwrap()]);
    let text = stdout(&o);
    assert!(text.contains("Halted"), "{text}");
    assert!(text.contains("INVIOLABLE"), "{text}");
}

#[test]
fn replay_after_restart() {
    let s = Sandbox::new("replay");
    let o = s.run(&["scenario", "cascade", "--seed", "3"]);
    assert!(o.status.success());
    let id = run_id(&o);
    let r = s.run(&["replay", &id]);
    assert_eq!(r.status.code(), Some(0));
    assert!(stdout(&r).starts_with(&format!("MATCH {id} ")));
    assert_eq!(s.run(&["replay", "scenario-999999"]).status.code(), Some(3));

    let listing = stdout(&s.run(&["lineage"]));
    assert!(listing.contains(&id));
    let chain = s.run(&["lineage", &id]);
    assert!(chain.status.success());
    assert!(stdout(&chain).contains("outputs"));
}

#[test]
fn loop_runs_replay_in_a_new_process() {
    let s = Sandbox::new("loop");
    let o = s.run(&["loop", "--ticks", "40", "--seed", "2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let id = run_id(&o);
    assert!(stdout(&s.run(&["replay", &id])).starts_with("MATCH"));
}

#[test]
fn reports_are_byte_reproducible() {
    let s = Sandbox::new("reports");
    let (a, b) = (s.dir.join("a"), s.dir.join("b"));
    assert!(s.run_out(&["scenario", "beam-design"], &a).status.success());
    assert!(s.run_out(&["scenario", "beam-design"], &b).status.success());
    let ja = std::fs::read(a.join("scenario-beam-design.json")).unwrap();
    let jb = std::fs::read(b.join("scenario-beam-design.json")).unwrap();
    assert_eq!(ja, jb);
    assert!(a.join("scenario-beam-design.txt").exists());
}

#[test]
fn attack_command_reports_and_self_tests() {
    let s = Sandbox::new("attack");
    let o = s.run(&["attack"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(s.dir.join("reports/attack.json").exists());
    assert_eq!(s.run(&["attack", "--weakened"]).status.code(), Some(1));
    assert_eq!(s.run(&["attack", "--kernel", "127.0.0.1:1"]).status.code(), Some(4));
}

#[test]
fn quick_bench_writes_metrics() {
    let s = Sandbox::new("bench");
    let o = s.run(&["bench", "--quick"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let json = std::fs::read_to_string(s.dir.join("reports/bench.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert_eq!(v["activation_fraction"], serde_json::json!(0.125));
}
