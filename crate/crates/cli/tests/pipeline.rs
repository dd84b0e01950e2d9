use std::fs;
use std::path::{Path, PathBuf};

use mrgr_cli::run;

const SMALL: &str = "\
# a pipeline small enough for unit-test time
seed = 3
data.min_item_interactions = 2
synthetic.n_users = 150
synthetic.n_item_pairs = 10
synthetic.n_fillers = 20
synthetic.seq_len = 32
synthetic.anchor_max = 10
model.d_model = 16
model.n_heads = 2
model.ff_dim = 32
backbone.max_epochs = 2
retriever.hidden = 16
retriever.max_epochs = 2
";

fn mrgr(args: &[&str]) -> i32 {
    let mut v = vec!["mrgr"];
    v.extend_from_slice(args);
    run(v)
}

fn setup() -> (tempfile::TempDir, PathBuf, String) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("small.conf");
    fs::write(&cfg, SMALL).unwrap();
    let out = dir.path().join("run").display().to_string();
    (dir, cfg, out)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn source_flags_are_checked() {
    let (_d, cfg, out) = setup();
    assert_eq!(
        mrgr(&["prepare-data", "--config", s(&cfg), "--out", &out]),
        2
    );
    assert_eq!(
        mrgr(&[
            "prepare-data",
            "--synthetic",
            "--input",
            "x.jsonl",
            "--out",
            &out
        ]),
        2
    );
    assert_eq!(mrgr(&["--workers", "0", "config"]), 2);
    assert_eq!(mrgr(&["no-such-command"]), 2);
}

#[test]
fn malformed_input_is_a_user_error() {
    let (d, cfg, out) = setup();
    let input = d.path().join("events.jsonl");
    fs::write(
        &input,
        "{\"user\":\"u\",\"item\":\"i\",\"ts\":1}\n{\"user\": \"u\", \"item\"\n",
    )
    .unwrap();
    let code = mrgr(&[
        "prepare-data",
        "--input",
        s(&input),
        "--config",
        s(&cfg),
        "--out",
        &out,
    ]);
    assert_eq!(code, 2);
    let missing = d.path().join("absent.jsonl");
    assert_eq!(
        mrgr(&[
            "prepare-data",
            "--input",
            s(&missing),
            "--config",
            s(&cfg),
            "--out",
            &out
        ]),
        2
    );
}

#[test]
fn stages_refuse_missing_or_stale_inputs() {
    let (d, cfg, out) = setup();
    let c = s(&cfg);
    assert_eq!(mrgr(&["train-backbone", "--config", c, "--out", &out]), 2);
    assert_eq!(
        mrgr(&["prepare-data", "--synthetic", "--config", c, "--out", &out]),
        0
    );
    assert_eq!(mrgr(&["train-backbone", "--out", &out]), 0);
    assert_eq!(mrgr(&["build-memory", "--out", &out]), 0);
    assert_eq!(mrgr(&["annotate", "--out", &out]), 0);
    assert_eq!(
        mrgr(&["evaluate", "--variant", "learned", "--out", &out]),
        2
    );
    assert_eq!(mrgr(&["evaluate", "--variant", "oracle", "--out", &out]), 0);

    // a different backbone behind the memory bank's back
    let ckpt = Path::new(&out).join("checkpoints/backbone.ckpt");
    let mut bytes = fs::read(&ckpt).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    fs::write(&ckpt, bytes).unwrap();
    assert_eq!(mrgr(&["annotate", "--out", &out]), 2);
    assert_eq!(mrgr(&["verify", "--out", &out]), 2);

    // retraining with the same settings reproduces the checkpoint exactly
    assert_eq!(mrgr(&["train-backbone", "--out", &out]), 0);
    assert_eq!(mrgr(&["annotate", "--out", &out]), 0);

    let other = d.path().join("other.conf");
    fs::write(&other, format!("{SMALL}backbone.lr = 0.003\n")).unwrap();
    let o = s(&other);
    assert_eq!(mrgr(&["train-backbone", "--config", o, "--out", &out]), 0);
    assert_eq!(mrgr(&["annotate", "--config", o, "--out", &out]), 2);
    assert_eq!(mrgr(&["build-memory", "--config", o, "--out", &out]), 0);
    assert_eq!(mrgr(&["annotate", "--config", o, "--out", &out]), 0);
}

#[test]
fn full_run_is_verifiable_and_worker_independent() {
    let (d, _, out) = setup();
    let with_cache = |name: &str| {
        let p = d.path().join(format!("{name}.conf"));
        fs::write(
            &p,
            format!("{SMALL}paths.cache = {}\n", d.path().join(name).display()),
        )
        .unwrap();
        p
    };
    let (c1, c2) = (with_cache("cache1"), with_cache("cache2"));
    assert_eq!(
        mrgr(&[
            "--workers",
            "1",
            "run",
            "--synthetic",
            "--config",
            s(&c1),
            "--out",
            &out
        ]),
        0
    );
    assert_eq!(mrgr(&["verify", "--out", &out]), 0);
    assert!(d.path().join("cache1/annotations.jsonl").exists());

    let out2 = d.path().join("run2").display().to_string();
    assert_eq!(
        mrgr(&[
            "--workers",
            "4",
            "run",
            "--synthetic",
            "--config",
            s(&c2),
            "--out",
            &out2
        ]),
        0
    );
    for v in ["no_memory", "random", "semantic", "oracle", "learned"] {
        let a = fs::read(Path::new(&out).join(format!("reports/{v}.json"))).unwrap();
        let b = fs::read(Path::new(&out2).join(format!("reports/{v}.json"))).unwrap();
        assert!(a == b, "{v} report differs between worker counts");
    }
    let audit = fs::read_to_string(Path::new(&out).join("compare/audit.csv")).unwrap();
    assert!(audit.lines().count() > 1);

    let report = Path::new(&out).join("reports/random.json");
    let text = fs::read_to_string(&report).unwrap();
    fs::write(&report, text.replacen("\"seed\"", "\"seed\" ", 1)).unwrap();
    assert_eq!(mrgr(&["verify", "--out", &out]), 2);
}
