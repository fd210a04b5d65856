use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use setfuse_core::io::{load_dataset, FcrsFile, Manifest};
use setfuse_core::coreset::fps_oracle;

const SMALL: &str = r#"{"n_c":16,"train_ids":8,"templates_per_id":4,"epochs":2,"batch":8,"seed":5,
"protocol":{"n_ids":6,"genuine_per_id":4,"impostor_per_id":20}}"#;

fn setfuse(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_setfuse")).args(args).output().expect("spawn setfuse")
}

fn ok(args: &[&str]) -> String {
    let out = setfuse(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
}

impl Fixture {
    fn new(config: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let cfg = root.join("config.json");
        std::fs::write(&cfg, config).unwrap();
        Self { _dir: dir, root, config: cfg }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn gen(&self, out: &str, seed: u64) -> PathBuf {
        let dir = self.path(out);
        ok(&["gen", "--config", p(&self.config), "--out-dir", p(&dir), "--seed", &seed.to_string()]);
        dir
    }

    fn train(&self, data: &Path, ck: &str, log: &str, extra: &[&str]) -> (PathBuf, String) {
        let ck = self.path(ck);
        let log = self.path(log);
        let mut args = vec!["--threads", "1", "train", "--data", p(data), "--config", p(&self.config), "--out-checkpoint", p(&ck), "--log", p(&log)];
        args.extend_from_slice(extra);
        ok(&args);
        let text = std::fs::read_to_string(&log).unwrap();
        (ck, text)
    }
}

fn bytes(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap()
}

#[test]
fn every_command_is_byte_deterministic() {
    let f = Fixture::new(SMALL);
    let a = f.gen("a", 11);
    let b = f.gen("b", 11);
    for file in ["train/features.fcrs", "train/manifest.json", "eval/features.fcrs", "eval/manifest.json", "eval/protocol.json"] {
        assert_eq!(bytes(&a.join(file)), bytes(&b.join(file)), "gen {file}");
    }
    let (ck1, log1) = f.train(&a.join("train"), "ck1.json", "log1.csv", &[]);
    let (ck2, log2) = f.train(&a.join("train"), "ck2.json", "log2.csv", &[]);
    assert_eq!(log1, log2);
    assert_eq!(bytes(&ck1), bytes(&ck2));

    let protocol = a.join("eval/protocol.json");
    let eval_dir = a.join("eval");
    let runs: Vec<Vec<&str>> = vec![
        vec!["select", "--data", p(&eval_dir), "--checkpoint", p(&ck1), "--template-id", "3"],
        vec!["eval", "--data", p(&eval_dir), "--protocol", p(&protocol), "--checkpoint", p(&ck1)],
        vec!["eval", "--data", p(&eval_dir), "--protocol", p(&protocol)],
        vec!["bench", "--sizes", "16,32,64", "--trials", "2", "--config", p(&f.config)],
        vec!["gradcheck", "--config", p(&f.config)],
    ];
    for args in runs {
        let mut with_threads = vec!["--threads", "1"];
        with_threads.extend(&args);
        assert_eq!(ok(&with_threads), ok(&with_threads), "{args:?}");
    }
}

#[test]
fn seeds_change_generated_data() {
    let f = Fixture::new(SMALL);
    let a = f.gen("a", 1);
    let b = f.gen("b", 2);
    assert_ne!(bytes(&a.join("train/features.fcrs")), bytes(&b.join("train/features.fcrs")));
}

#[test]
fn generated_data_round_trips() {
    let f = Fixture::new(SMALL);
    let dir = f.gen("d", 4);
    for part in ["train", "eval"] {
        let raw = bytes(&dir.join(part).join("features.fcrs"));
        let fcrs = FcrsFile::from_bytes(&raw).unwrap();
        assert_eq!(fcrs.to_bytes(), raw);
        let manifest: Manifest = serde_json::from_slice(&bytes(&dir.join(part).join("manifest.json"))).unwrap();
        manifest.validate(fcrs.rows, fcrs.cols).unwrap();
        let data = load_dataset(&dir.join(part).join("manifest.json")).unwrap();
        assert_eq!(data.item_count(), fcrs.rows);
    }
}

#[test]
fn resume_reproduces_the_trajectory() {
    let f = Fixture::new(SMALL);
    let dir = f.gen("d", 7);
    let train = dir.join("train");
    let (_, full) = f.train(&train, "full.json", "full.csv", &[]);

    let one_epoch = SMALL.replace("\"epochs\":2", "\"epochs\":1");
    let half = Fixture::new(&one_epoch);
    let (ck_half, head) = half.train(&train, "half.json", "half.csv", &[]);
    let (_, tail) = f.train(&train, "rest.json", "rest.csv", &["--resume", p(&ck_half)]);

    let full_rows: Vec<&str> = full.lines().skip(1).collect();
    let joined: Vec<&str> = head.lines().skip(1).chain(tail.lines().skip(1)).collect();
    assert_eq!(joined, full_rows);
    assert_eq!(bytes(&f.path("full.json")), bytes(&f.path("rest.json")));
    for row in &full_rows {
        let gamma: f64 = row.split(',').nth(2).unwrap().parse().unwrap();
        assert!(gamma.is_finite());
    }
}

#[test]
fn select_matches_the_oracle_on_every_template() {
    let f = Fixture::new(SMALL);
    let dir = f.gen("d", 8);
    let (ck, _) = f.train(&dir.join("train"), "ck.json", "log.csv", &[]);
    let data = load_dataset(&dir.join("eval/manifest.json")).unwrap();
    let eval = dir.join("eval");
    for t in &data.templates {
        let id = t.id.to_string();
        let out: serde_json::Value = serde_json::from_str(&ok(&["select", "--data", p(&eval), "--checkpoint", p(&ck), "--template-id", &id])).unwrap();
        assert_eq!(out["matches_oracle"], true, "template {id}");
        let k = out["k"].as_u64().unwrap() as usize;
        let gamma = setfuse_core::Gamma::new(out["gamma"].as_f64().unwrap()).unwrap();
        let oracle = fps_oracle(&t.features(), k, gamma).unwrap();
        let indices: Vec<usize> = serde_json::from_value(out["indices"].clone()).unwrap();
        assert_eq!(indices, oracle);
        let d: Vec<f64> = serde_json::from_value(out["distances"].clone()).unwrap();
        assert!(d.windows(2).all(|w| w[1] <= w[0] + 1e-12), "template {id}: {d:?}");

        let one: serde_json::Value =
            serde_json::from_str(&ok(&["select", "--data", p(&eval), "--checkpoint", p(&ck), "--template-id", &id, "--k", "1"])).unwrap();
        let norms: Vec<f64> = t.features().iter().map(|x| x.norm()).collect();
        let best = (0..norms.len()).fold(0, |b, i| if norms[i] > norms[b] { i } else { b });
        assert_eq!(one["indices"][0].as_u64().unwrap() as usize, best);
    }
}

fn parse_tar(csv: &str) -> Vec<(f64, f64)> {
    csv.lines()
        .skip(1)
        .map(|l| {
            let c: Vec<&str> = l.split(',').collect();
            (c[1].parse().unwrap(), c[2].parse().unwrap())
        })
        .collect()
}

#[test]
fn eval_is_monotone_and_order_free() {
    let f = Fixture::new(SMALL);
    let dir = f.gen("d", 9);
    let (ck, _) = f.train(&dir.join("train"), "ck.json", "log.csv", &[]);
    let eval = dir.join("eval");
    let protocol = eval.join("protocol.json");
    let fars = "0.5,0.2,0.1,0.05,0.01";

    let base = ok(&["eval", "--data", p(&eval), "--protocol", p(&protocol), "--fars", fars]);
    assert!(base.lines().nth(1).unwrap().starts_with("average_pool,"));
    let tars = parse_tar(&base);
    assert!(tars.windows(2).all(|w| w[1].1 <= w[0].1), "{base}");

    let trained = ok(&["eval", "--data", p(&eval), "--protocol", p(&protocol), "--checkpoint", p(&ck), "--fars", fars]);

    let mut manifest: serde_json::Value = serde_json::from_slice(&bytes(&eval.join("manifest.json"))).unwrap();
    for identity in manifest["identities"].as_array_mut().unwrap() {
        for template in identity["templates"].as_array_mut().unwrap() {
            let items = template["items"].as_array_mut().unwrap();
            items.reverse();
            let n = items.len();
            items.rotate_left(n / 3);
        }
    }
    std::fs::write(eval.join("shuffled.json"), serde_json::to_vec_pretty(&manifest).unwrap()).unwrap();
    let shuffled = eval.join("shuffled.json");
    assert_eq!(ok(&["eval", "--data", p(&shuffled), "--protocol", p(&protocol), "--fars", fars]), base);
    assert_eq!(ok(&["eval", "--data", p(&shuffled), "--protocol", p(&protocol), "--checkpoint", p(&ck), "--fars", fars]), trained);
    let threaded = ok(&["--threads", "3", "eval", "--data", p(&eval), "--protocol", p(&protocol), "--checkpoint", p(&ck), "--fars", fars]);
    assert_eq!(threaded, trained);
}

fn expect_exit(args: &[&str], code: i32) {
    let out = setfuse(args);
    assert_eq!(out.status.code(), Some(code), "{args:?}");
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.trim_end().lines().count(), 1, "diagnostic must be one line: {err:?}");
}

#[test]
fn exit_codes_separate_usage_and_data_errors() {
    let f = Fixture::new(SMALL);
    let dir = f.gen("d", 10);
    let (ck, _) = f.train(&dir.join("train"), "ck.json", "log.csv", &[]);
    let eval = dir.join("eval");
    let protocol = eval.join("protocol.json");

    expect_exit(&["gen", "--out-dir", "x", "--bogus"], 1);
    expect_exit(&["frobnicate"], 1);
    expect_exit(&["--threads", "0", "bench"], 1);
    expect_exit(&["bench", "--sizes", "64,32"], 1);
    let bad_cfg = f.path("bad.json");
    std::fs::write(&bad_cfg, r#"{"k": 0}"#).unwrap();
    expect_exit(&["gen", "--config", p(&bad_cfg), "--out-dir", p(&f.path("y"))], 1);
    std::fs::write(&bad_cfg, r#"{"unknown": 1}"#).unwrap();
    expect_exit(&["gradcheck", "--config", p(&bad_cfg)], 1);

    expect_exit(&["select", "--data", p(&eval), "--checkpoint", p(&ck), "--template-id", "99999"], 2);
    expect_exit(&["eval", "--data", p(&f.path("missing")), "--protocol", p(&protocol)], 2);

    let corrupt = f.path("corrupt");
    std::fs::create_dir(&corrupt).unwrap();
    std::fs::copy(eval.join("manifest.json"), corrupt.join("manifest.json")).unwrap();
    std::fs::write(corrupt.join("features.fcrs"), &bytes(&eval.join("features.fcrs"))[..100]).unwrap();
    expect_exit(&["eval", "--data", p(&corrupt), "--protocol", p(&protocol)], 2);

    std::fs::write(f.path("ck_bad.json"), "{\"format\": \"other\"}").unwrap();
    expect_exit(&["eval", "--data", p(&eval), "--protocol", p(&protocol), "--checkpoint", p(&f.path("ck_bad.json"))], 2);

    let help = setfuse(&["--help"]);
    assert_eq!(help.status.code(), Some(0));
}

#[test]
fn gradcheck_reports_pass() {
    let out = ok(&["gradcheck"]);
    let last = out.lines().last().unwrap();
    assert!(last.starts_with("max_rel_err,") && last.ends_with(",pass"), "{out}");
}
