//! The `ibp` binary end to end, on tiny configs.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ibp_harness::metrics::{EVAL_HEADER, SWEEP_HEADER, TRAIN_HEADER, TREE_STATS_HEADER};

const SPACESHIP: &str = r#"
task = "spaceship"
strategy = "tree"
seed = 5

[limits]
max_actions = 2
max_imaginations = 2

[train]
iterations = 3
batch_episodes = 4
validation_interval = 2
validation_scenes = 4
model_batch = 8

[agent]
manager_hidden = [8]
controller_hidden = [8]
memory_hidden = 4

[agent.model]
hidden = [8]
effect_width = 4
reward_hidden = 4

[eval]
episodes = 6
"#;

const MAZE: &str = r#"
task = "maze"
strategy = "tree"
seed = 2

[limits]
max_imaginations = 4

[maze]
fixture = "single"

[maze.qlearning]
episodes = 2000

[maze.manager]
iterations = 3
batch = 4
"#;

struct Dir(tempfile::TempDir);

impl Dir {
    fn new() -> Self {
        Dir(tempfile::tempdir().unwrap())
    }

    fn path(&self, p: &str) -> PathBuf {
        self.0.path().join(p)
    }

    fn config(&self, name: &str, text: &str) -> PathBuf {
        let p = self.path(name);
        std::fs::write(&p, text).unwrap();
        p
    }
}

fn ibp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ibp")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let o = ibp(args);
    assert!(
        o.status.success(),
        "ibp {args:?} failed:\n{}",
        String::from_utf8_lossy(&o.stderr)
    );
    o
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read(p: PathBuf) -> Vec<u8> {
    std::fs::read(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

fn train(d: &Dir, cfg: &Path, out: &str) -> PathBuf {
    let out = d.path(out);
    ok(&["train", "--config", s(cfg), "--out", s(&out)]);
    out
}

#[test]
fn same_seed_training_is_byte_identical() {
    let d = Dir::new();
    for (name, text) in [("ship.toml", SPACESHIP), ("maze.toml", MAZE)] {
        let cfg = d.config(name, text);
        let a = train(&d, &cfg, &format!("{name}.a"));
        let b = train(&d, &cfg, &format!("{name}.b"));
        let metrics = read(a.join("metrics.csv"));
        assert!(metrics.starts_with(TRAIN_HEADER.as_bytes()));
        assert_eq!(
            metrics.iter().filter(|&&c| c == b'\n').count(),
            4,
            "header plus three iterations"
        );
        assert_eq!(metrics, read(b.join("metrics.csv")));
        assert_eq!(read(a.join("checkpoint.ibp")), read(b.join("checkpoint.ibp")));
    }
}

#[test]
fn eval_twice_gives_identical_csv() {
    let d = Dir::new();
    for (name, text) in [("ship.toml", SPACESHIP), ("maze.toml", MAZE)] {
        let cfg = d.config(name, text);
        let run = train(&d, &cfg, &format!("{name}.run"));
        let ck = run.join("checkpoint.ibp");
        let e1 = d.path(&format!("{name}.e1"));
        let e2 = d.path(&format!("{name}.e2"));
        for out in [&e1, &e2] {
            ok(&[
                "eval",
                "--config",
                s(&cfg),
                "--checkpoint",
                s(&ck),
                "--out",
                s(out),
                "--seed",
                "11",
            ]);
        }
        let csv = read(e1.join("eval.csv"));
        assert!(csv.starts_with(EVAL_HEADER.as_bytes()));
        assert_eq!(csv, read(e2.join("eval.csv")));
    }
}

#[test]
fn sweep_emits_one_row_per_cell_and_seed() {
    let d = Dir::new();
    let cfg = d.config(
        "sweep.toml",
        &format!("{SPACESHIP}\n[sweep]\ntau = [0.0, 0.05, 0.1]\nseeds = [1, 2]\n"),
    );
    let out = d.path("sweep");
    ok(&["sweep", "--config", s(&cfg), "--out", s(&out)]);
    let text = String::from_utf8(read(out.join("sweep.csv"))).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some(SWEEP_HEADER));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 6);
    let cells: Vec<(&str, &str)> = rows.iter().map(|r| (r[4], r[3])).collect();
    assert_eq!(
        cells,
        [
            ("0.0", "1"),
            ("0.0", "2"),
            ("0.05", "1"),
            ("0.05", "2"),
            ("0.1", "1"),
            ("0.1", "2")
        ]
    );
    for i in 0..6 {
        assert!(out.join(format!("cells/{i:03}/checkpoint.ibp")).exists());
    }
}

#[test]
fn missing_fixture_fails_without_writing() {
    let d = Dir::new();
    let cfg = d.config("bad.toml", "task = \"maze\"\n[maze]\nfixture = \"no/such/mazes.txt\"\n");
    let out = d.path("bad");
    let o = ibp(&["train", "--config", s(&cfg), "--out", s(&out)]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("no/such/mazes.txt"));
    assert!(!out.exists());
}

#[test]
fn bad_invocations_fail_with_diagnostics() {
    let d = Dir::new();
    let o = ibp(&["train", "--no-such-flag"]);
    assert!(!o.status.success());
    assert!(!o.stderr.is_empty());
    let o = ibp(&["fly"]);
    assert!(!o.status.success());
    let o = ibp(&["train", "--config", s(&d.path("absent.toml"))]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("absent.toml"));
    let o = ibp(&["eval", "--out", s(&d.path("x"))]);
    assert!(!o.status.success());
    assert!(!d.path("x").exists());
}

#[test]
fn checkpoints_are_checked_on_load() {
    let d = Dir::new();
    let cfg = d.config("ship.toml", SPACESHIP);
    let run = train(&d, &cfg, "run");
    let ck = run.join("checkpoint.ibp");

    // Another imagination limit is another fingerprint.
    let out = d.path("mismatch");
    let args = [
        "eval",
        "--config",
        s(&cfg),
        "--checkpoint",
        s(&ck),
        "--out",
        s(&out),
        "--max-imaginations",
        "3",
    ];
    let o = ibp(&args);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("fingerprint"));
    assert!(!out.exists());
    let mut forced = args.to_vec();
    forced.push("--force");
    ok(&forced);

    // A truncated file is refused.
    let bytes = read(ck.clone());
    let cut = d.path("cut.ibp");
    std::fs::write(&cut, &bytes[..bytes.len() / 2]).unwrap();
    let o = ibp(&[
        "eval",
        "--config",
        s(&cfg),
        "--checkpoint",
        s(&cut),
        "--out",
        s(&d.path("cut")),
    ]);
    assert!(!o.status.success());
}

fn assert_well_formed(svg: &[u8]) {
    let mut r = quick_xml::Reader::from_reader(svg);
    let mut buf = Vec::new();
    let mut depth = 0i32;
    loop {
        match r.read_event_into(&mut buf).expect("valid xml") {
            quick_xml::events::Event::Start(_) => depth += 1,
            quick_xml::events::Event::End(_) => depth -= 1,
            quick_xml::events::Event::Eof => break,
            _ => {}
        }
        buf.clear();
    }
    assert_eq!(depth, 0);
}

#[test]
fn render_and_tree_stats() {
    let d = Dir::new();
    for (name, text, task) in [("ship.toml", SPACESHIP, "spaceship"), ("maze.toml", MAZE, "maze")] {
        let cfg = d.config(name, text);
        let run = train(&d, &cfg, &format!("{name}.run"));
        let ck = run.join("checkpoint.ibp");
        let out = d.path(&format!("{name}.render"));
        ok(&[
            "render",
            "--config",
            s(&cfg),
            "--checkpoint",
            s(&ck),
            "--out",
            s(&out),
            "--episode",
            "1",
        ]);
        let svg = read(out.join(format!("{task}_001.svg")));
        assert_well_formed(&svg);
        assert!(out.join(format!("{task}_001.jsonl")).exists());
        let o = ibp(&[
            "render",
            "--config",
            s(&cfg),
            "--checkpoint",
            s(&ck),
            "--out",
            s(&out),
            "--episode",
            "999",
        ]);
        assert!(!o.status.success());

        ok(&[
            "tree-stats",
            "--config",
            s(&cfg),
            "--checkpoint",
            s(&ck),
            "--out",
            s(&out),
        ]);
        let text = String::from_utf8(read(out.join("tree_stats.csv"))).unwrap();
        assert!(text.starts_with(TREE_STATS_HEADER));
        let total: usize = text
            .lines()
            .skip(1)
            .map(|l| l.split(',').nth(1).unwrap().parse::<usize>().unwrap())
            .sum();
        assert!(total > 0);
    }
}

#[test]
fn config_subcommand_prints_the_effective_config() {
    let o = ok(&["config", "--task", "maze", "--tau", "0.25", "--seed", "4"]);
    let cfg = ibp_harness::RunConfig::parse(&String::from_utf8(o.stdout).unwrap()).unwrap();
    assert_eq!(cfg.task, ibp_harness::TaskKind::Maze);
    assert_eq!(cfg.seed, 4);
    assert_eq!(cfg.maze_agent().resource_cost, 0.25);
}
