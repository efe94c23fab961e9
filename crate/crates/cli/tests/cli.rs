//! End-to-end runs of the `fedrecon` binary.

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};
use std::sync::Arc;

use fedrecon::benchmark::{read_results, ConfigFile, Deployment, EvalPoint, LabeledDataset};
use fedrecon::embedder::{read_params, EmbedderParams};
use fedrecon::federation::{ClientState, ServerState};
use tempfile::TempDir;

const CONFIG: &str = "\
[synthetic]
n_classes = 10
input_dim = 6
train_per_class = 24
test_per_class = 8
seed = 4

[benchmark]
n_clients = 1
classes_per_mission = 2
shots_per_class = 8
seed = 4

[embedder]
hidden_dims = [12]
output_dim = 5
seed = 4

[pretrain]
episodes = 150
n_way = 3
k_min = 2
k_max = 8
seed = 4

[head.joint]
epochs = 30
lr_step = 10

[head.new_only]
epochs = 10
";

fn fedrecon(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedrecon"))
        .args(args)
        .output()
        .unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("config.toml"), CONFIG).unwrap();
        Fixture { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn data(&self) -> PathBuf {
        let out = self.path("data.csv");
        if !out.exists() {
            let o = fedrecon(&["gen-data", "--spec", s(&self.path("config.toml")), "--out", s(&out)]);
            assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        }
        out
    }

    fn params(&self) -> PathBuf {
        let out = self.path("params.bin");
        if !out.exists() {
            let data = self.data();
            let o = fedrecon(&[
                "pretrain",
                "--data",
                s(&data),
                "--config",
                s(&self.path("config.toml")),
                "--out",
                s(&out),
            ]);
            assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        }
        out
    }

    fn run(&self, method: &str, out: &str, extra: &[&str]) -> Output {
        let (data, params) = (self.data(), self.params());
        let (out, config) = (self.path(out), self.path("config.toml"));
        let mut args = vec![
            "run",
            "--data",
            s(&data),
            "--params",
            s(&params),
            "--method",
            method,
            "--config",
            s(&config),
            "--out",
            s(&out),
        ];
        args.extend_from_slice(extra);
        fedrecon(&args)
    }
}

#[test]
fn gen_data_writes_every_row_deterministically() {
    let fx = Fixture::new();
    let a = fx.data();
    let text = fs::read_to_string(&a).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "class_id,split,f0,f1,f2,f3,f4,f5");
    assert_eq!(lines.count(), 10 * (24 + 8));
    let b = fx.path("again.csv");
    assert!(
        fedrecon(&["gen-data", "--spec", s(&fx.path("config.toml")), "--out", s(&b)])
            .status
            .success()
    );
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
}

#[test]
fn usage_and_config_errors_exit_2() {
    let fx = Fixture::new();
    assert_eq!(
        fedrecon(&["gen-data", "--spec", s(&fx.path("config.toml"))])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(fedrecon(&["frobnicate"]).status.code(), Some(2));
    fs::write(fx.path("bad.toml"), "[synthetic]\nclasses = 3\n").unwrap();
    let o = fedrecon(&[
        "gen-data",
        "--spec",
        s(&fx.path("bad.toml")),
        "--out",
        s(&fx.path("x.csv")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    fs::write(fx.path("bad.toml"), "[synthetic]\nstd = -1.0\n").unwrap();
    let o = fedrecon(&[
        "gen-data",
        "--spec",
        s(&fx.path("bad.toml")),
        "--out",
        s(&fx.path("x.csv")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    let o = fx.run("icarl", "r.csv", &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("icarl"));
}

#[test]
fn zero_episodes_keeps_the_initialization() {
    let fx = Fixture::new();
    let data = fx.data();
    let out = fx.path("init.bin");
    let o = fedrecon(&[
        "pretrain",
        "--data",
        s(&data),
        "--config",
        s(&fx.path("config.toml")),
        "--episodes",
        "0",
        "--out",
        s(&out),
    ]);
    assert!(o.status.success());
    let params = read_params(fs::File::open(&out).unwrap()).unwrap();
    let cfg = ConfigFile::parse(CONFIG).unwrap();
    let init = EmbedderParams::init(cfg.embedder.to_spec(6).unwrap()).unwrap();
    assert_eq!(params, init);
    let trace = fs::read_to_string(fx.path("init.bin.loss.csv")).unwrap();
    assert_eq!(trace, "episode,loss\n");
}

#[test]
fn pretraining_loss_trace_falls() {
    let fx = Fixture::new();
    fx.params();
    let trace = fs::read_to_string(fx.path("params.bin.loss.csv")).unwrap();
    let losses: Vec<f64> = trace
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    assert_eq!(losses.len(), 150);
    let head: f64 = losses[..30].iter().sum::<f64>() / 30.0;
    let tail: f64 = losses[losses.len() - 30..].iter().sum::<f64>() / 30.0;
    assert!(tail < head, "{head} -> {tail}");
}

#[test]
fn run_writes_one_post_merge_record_per_mission() {
    let fx = Fixture::new();
    let o = fx.run("proto_online", "a.csv", &["--seed", "9"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert!(stdout.contains("final acc_avg"));
    let records = read_results(fs::File::open(fx.path("a.csv")).unwrap()).unwrap();
    let post: Vec<_> = records
        .iter()
        .filter(|r| r.eval_point == EvalPoint::PostMerge)
        .collect();
    let missions: Vec<usize> = post.iter().map(|r| r.mission).collect();
    assert_eq!(missions, (1..=missions.len()).collect::<Vec<_>>());
    assert!(stdout.starts_with(&format!("proto_online: {} missions", missions.len())));

    assert!(fx.run("proto_online", "b.csv", &["--seed", "9"]).status.success());
    assert_eq!(fs::read(fx.path("a.csv")).unwrap(), fs::read(fx.path("b.csv")).unwrap());
    assert!(fx.run("proto_online", "c.csv", &["--seed", "10"]).status.success());
    assert_ne!(fs::read(fx.path("a.csv")).unwrap(), fs::read(fx.path("c.csv")).unwrap());
}

#[test]
fn report_plots_and_tabulates_results() {
    let fx = Fixture::new();
    assert!(fx.run("proto_online", "online.csv", &[]).status.success());
    assert!(fx.run("lower", "lower.csv", &[]).status.success());

    let single = fx.path("single.svg");
    let o = fedrecon(&["report", "--results", s(&fx.path("online.csv")), "--out", s(&single)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let svg = fs::read_to_string(&single).unwrap();
    assert_eq!(svg.matches("<polyline").count(), 3);

    let both = fx.path("both.svg");
    let o = fedrecon(&[
        "report",
        "--results",
        s(&fx.path("online.csv")),
        s(&fx.path("lower.csv")),
        "--out",
        s(&both),
    ]);
    assert!(o.status.success());
    let svg = fs::read_to_string(&both).unwrap();
    assert!(svg.contains(">online acc_avg</text>"));
    assert!(svg.contains(">lower acc_avg</text>"));

    // The merged table reproduces the source values.
    let table = fs::read_to_string(fx.path("both.csv")).unwrap();
    let source = read_results(fs::File::open(fx.path("lower.csv")).unwrap()).unwrap();
    let last = source
        .iter()
        .rev()
        .find(|r| r.eval_point == EvalPoint::PostMerge)
        .unwrap();
    let row = table
        .lines()
        .find(|l| l.starts_with(&format!("lower,{},post_merge,", last.mission)))
        .unwrap();
    let acc_avg: f64 = row.rsplit(',').next().unwrap().parse().unwrap();
    assert!((acc_avg - last.acc_avg).abs() < 1e-6);

    fs::write(fx.path("junk.csv"), "mission,acc\n1,2\n").unwrap();
    let o = fedrecon(&[
        "report",
        "--results",
        s(&fx.path("junk.csv")),
        "--out",
        s(&fx.path("j.svg")),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

struct Server {
    child: Child,
    addr: String,
}

impl Server {
    fn start(args: &[&str]) -> Self {
        let mut child = Command::new(env!("CARGO_BIN_EXE_fedrecon"))
            .arg("serve")
            .args(["--bind", "127.0.0.1:0"])
            .args(args)
            .stdout(Stdio::piped())
            .spawn()
            .unwrap();
        let mut line = String::new();
        BufReader::new(child.stdout.as_mut().unwrap())
            .read_line(&mut line)
            .unwrap();
        let addr = line
            .trim()
            .strip_prefix("listening on ")
            .expect("listening line")
            .to_string();
        Server { child, addr }
    }

    fn interrupt(mut self) {
        let status = Command::new("kill")
            .args(["-INT", &self.child.id().to_string()])
            .status()
            .unwrap();
        assert!(status.success());
        assert!(self.child.wait().unwrap().success());
    }
}

#[cfg(unix)]
#[test]
fn serve_and_client_reproduce_the_in_process_store() {
    let fx = Fixture::new();
    let (data, params, config) = (fx.data(), fx.params(), fx.path("config.toml"));
    let snapshot = fx.path("server.frst");
    let server = Server::start(&[
        "--params",
        s(&params),
        "--data",
        s(&data),
        "--config",
        s(&config),
        "--snapshot",
        s(&snapshot),
    ]);
    let client_args = [
        "client",
        "--connect",
        &server.addr,
        "--data",
        s(&data),
        "--client-id",
        "0",
        "--params",
        s(&params),
        "--config",
        s(&config),
    ];
    let o = fedrecon(&client_args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let mut wrong_dim = client_args.to_vec();
    wrong_dim.extend(["--dim", "3"]);
    let o = fedrecon(&wrong_dim);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("dimension mismatch"));

    server.interrupt();
    let remote = ServerState::load_snapshot(&snapshot).unwrap();

    let cfg = ConfigFile::parse(CONFIG).unwrap();
    let dataset = LabeledDataset::load(&data).unwrap();
    let p = Arc::new(read_params(fs::File::open(&params).unwrap()).unwrap());
    let plan = Deployment::plan(&dataset, &cfg.benchmark, &p).unwrap();
    let mut local = ServerState::with_store(plan.base_store.clone());
    let mut client = ClientState::with_store(0, p, plan.base_store.clone()).unwrap();
    for m in plan.client_missions(0) {
        local.merge(&client.learn(&m).unwrap()).unwrap();
    }
    assert!(local.mission_counter() > 0);
    assert_eq!(remote.to_snapshot_bytes(), local.to_snapshot_bytes());

    // A restarted server resumes from the snapshot unchanged.
    let before = fs::read(&snapshot).unwrap();
    let again = Server::start(&["--snapshot", s(&snapshot)]);
    again.interrupt();
    assert_eq!(fs::read(&snapshot).unwrap(), before);
}
