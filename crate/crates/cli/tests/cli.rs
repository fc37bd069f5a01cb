use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn s2ig(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_s2ig"))
        .args(args)
        .current_dir(cwd)
        .env_remove("S2IG_DATA_ROOT")
        .env_remove("S2IG_EXPERIMENT_ROOT")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn field<'a>(stdout: &'a str, key: &str) -> &'a str {
    stdout
        .lines()
        .find_map(|l| l.strip_prefix(&format!("{key}: ")))
        .unwrap_or_else(|| panic!("no {key} in {stdout}"))
}

fn make_dataset(cwd: &Path, out: &str) -> String {
    ok(&s2ig(&["make-dataset", "--seed", "7", "--classes", "8", "--per-class", "10", "--out", out], cwd))
}

#[test]
fn make_dataset_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let a = make_dataset(tmp.path(), "a");
    let b = make_dataset(tmp.path(), "b");
    assert_eq!(field(&a, "corpus_hash"), field(&b, "corpus_hash"));
    let pngs = std::fs::read_dir(tmp.path().join("a/images")).unwrap().count();
    let wavs = std::fs::read_dir(tmp.path().join("a/audio")).unwrap().count();
    assert_eq!((pngs, wavs), (80, 80));
    assert!(Path::new(field(&a, "manifest")).ends_with("a/manifest.tsv"));
}

#[test]
fn data_root_comes_from_the_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_s2ig"))
        .args(["make-dataset", "--classes", "2", "--per-class", "5", "--out", "corpus"])
        .current_dir(tmp.path())
        .env("S2IG_DATA_ROOT", tmp.path().join("data"))
        .output()
        .unwrap();
    ok(&out);
    assert!(tmp.path().join("data/corpus/manifest.tsv").is_file());
}

#[test]
fn one_class_is_a_validation_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = s2ig(&["make-dataset", "--classes", "1", "--out", "d"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("class"));
}

#[test]
fn unknown_config_keys_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("bad.toml"), "[sen]\nembedding = 3\n").unwrap();
    let out = s2ig(&["train-sen", "--config", "bad.toml", "--manifest", "nowhere.tsv"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
}

fn copy_pngs(from: &Path, to: &Path, keep: impl Fn(&str) -> bool) {
    std::fs::create_dir_all(to).unwrap();
    for e in std::fs::read_dir(from).unwrap() {
        let p = e.unwrap().path();
        let name = p.file_name().unwrap().to_str().unwrap().to_string();
        if keep(&name) {
            std::fs::copy(&p, to.join(name)).unwrap();
        }
    }
}

#[test]
fn self_evaluation_and_protocol_errors() {
    let tmp = tempfile::tempdir().unwrap();
    make_dataset(tmp.path(), "d");
    let common = ["evaluate", "--profile", "ci", "--manifest", "d/manifest.tsv"];

    // real = fake: the degenerate self-retrieval sanity check
    let mut args = common.to_vec();
    args.extend(["--real", "d/images", "--fake", "d/images", "--save-backbone", "bb.safetensors", "--out", "self.json"]);
    let stdout = ok(&s2ig(&args, tmp.path()));
    let report: serde_json::Value = serde_json::from_str(&stdout).unwrap();
    assert!(report["fid"].as_f64().unwrap() < 1e-3, "{report}");
    assert_eq!(report["map"].as_f64().unwrap(), 1.0, "{report}");
    assert_eq!(report["backbone"]["provenance"], "desk-scale-trained");
    assert!(report["config"].as_str().unwrap().contains("[eval]"));
    let saved = std::fs::read_to_string(tmp.path().join("self.json")).unwrap();
    assert_eq!(serde_json::from_str::<serde_json::Value>(&saved).unwrap(), report);

    // fakes for only some classes violate the retrieval protocol
    copy_pngs(&tmp.path().join("d/images"), &tmp.path().join("partial"), |n| n.starts_with("c000_") || n.starts_with("c001_"));
    let out = s2ig(
        &["evaluate", "--profile", "ci", "--real", "d/manifest.tsv", "--fake", "partial", "--backbone", "bb.safetensors"],
        tmp.path(),
    );
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));

    // cached features give the same report as images
    let mut args = common.to_vec();
    args.extend(["--real", "d/manifest.tsv", "--fake", "d/images", "--backbone", "bb.safetensors", "--cache-dir", "cache"]);
    let direct: serde_json::Value = serde_json::from_str(&ok(&s2ig(&args, tmp.path()))).unwrap();
    let cached: serde_json::Value = serde_json::from_str(&ok(&s2ig(
        &["evaluate", "--profile", "ci", "--real", "cache/real.safetensors", "--fake", "cache/fake.safetensors"],
        tmp.path(),
    )))
    .unwrap();
    for k in ["fid", "map", "is_mean", "is_std"] {
        let (a, b) = (direct[k].as_f64().unwrap(), cached[k].as_f64().unwrap());
        assert!((a - b).abs() <= 1e-6 * a.abs().max(1.0), "{k}: {a} vs {b}");
    }
}

fn pngs_in(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "png"))
        .collect();
    v.sort();
    v
}

fn pixels(p: &Path) -> Vec<u8> {
    image::open(p).unwrap().to_rgb8().into_raw()
}

#[test]
fn two_stage_pipeline_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let cwd = tmp.path();
    make_dataset(cwd, "d");
    std::fs::write(cwd.join("fast.toml"), "[sen]\nepochs = 3\n[rdg]\nepochs = 2\nsample_every = 1\n").unwrap();
    let base = ["--profile", "ci", "--config", "fast.toml", "--manifest", "d/manifest.tsv"];

    let mut args = vec!["train-sen", "--name", "toy"];
    args.extend(base);
    let out = ok(&s2ig(&args, cwd));
    let exp = cwd.join(field(&out, "experiment"));
    assert!(exp.ends_with("experiments/toy"));
    let sen = exp.join("checkpoints/sen.safetensors");
    assert!(sen.is_file() && exp.join("history/sen.csv").is_file() && exp.join("config.toml").is_file());

    let mut args = vec!["train-rdg", "--exp-dir", exp.to_str().unwrap(), "--sen", sen.to_str().unwrap()];
    args.extend(base);
    ok(&s2ig(&args, cwd));
    let rdg = exp.join("checkpoints/rdg.safetensors");
    let history = std::fs::read_to_string(exp.join("history/rdg.csv")).unwrap();
    assert!(history.starts_with("step,L_G,L_D0,L_D1,L_D2,L_RS,kl,d_saturation\n"));
    assert!(!pngs_in(&exp.join("samples")).is_empty());

    // resuming a finished run adds nothing and keeps the history intact
    let mut args = vec!["train-rdg", "--exp-dir", exp.to_str().unwrap(), "--sen", sen.to_str().unwrap(), "--resume"];
    args.extend(base);
    ok(&s2ig(&args, cwd));
    assert_eq!(std::fs::read_to_string(exp.join("history/rdg.csv")).unwrap(), history);

    // a second run with the same name gets its own directory
    let mut args = vec!["train-rdg", "--name", "toy", "--ablate", "no-rs", "--sen", sen.to_str().unwrap()];
    args.extend(base);
    let abl = cwd.join(field(&ok(&s2ig(&args, cwd)), "experiment"));
    assert!(abl.ends_with("experiments/toy-1"));
    let abl_hist = std::fs::read_to_string(abl.join("history/rdg.csv")).unwrap();
    for line in abl_hist.lines().skip(1) {
        assert_eq!(line.split(',').nth(5), Some("0"), "{line}");
    }

    // one WAV in, one PNG out at the final scale; the seed moves z
    let wav = cwd.join("d/audio/c003_001.wav");
    let gen = |seed: &str, out: &str, extra: &[&str]| {
        let mut a = vec!["generate", "--rdg", rdg.to_str().unwrap(), "--sen", sen.to_str().unwrap(), "--audio", wav.to_str().unwrap(), "--seed", seed, "--out", out];
        a.extend(extra);
        ok(&s2ig(&a, cwd));
        pngs_in(&cwd.join(out))
    };
    let a = gen("0", "g0", &[]);
    let a2 = gen("0", "g0b", &[]);
    let b = gen("1", "g1", &[]);
    assert_eq!(a.len(), 1);
    assert!(a[0].ends_with("c003_001.png"));
    let img = image::open(&a[0]).unwrap();
    assert_eq!((img.width(), img.height()), (64, 64));
    assert_eq!(pixels(&a[0]), pixels(&a2[0]));
    let mse: f64 = pixels(&a[0])
        .iter()
        .zip(pixels(&b[0]))
        .map(|(&x, y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>();
    assert!(mse > 0.0);
    let all = gen("0", "gall", &["--all-scales"]);
    assert_eq!(all.len(), 1);
    assert!(all[0].ends_with("c003_001_64px.png"));
    assert!(cwd.join("g0/generation.json").is_file());

    // manifest mode: every test utterance, then evaluate against real test images
    ok(&s2ig(
        &["generate", "--rdg", rdg.to_str().unwrap(), "--sen", sen.to_str().unwrap(), "--manifest", "d/manifest.tsv", "--out", "fakes"],
        cwd,
    ));
    assert_eq!(pngs_in(&cwd.join("fakes")).len(), 16);
    let mut args = vec!["evaluate", "--real", "d/manifest.tsv", "--fake", "fakes", "--exp-dir", exp.to_str().unwrap()];
    args.extend(base);
    ok(&s2ig(&args, cwd));
    assert!(exp.join("reports/metrics.json").is_file());
    assert!(exp.join("checkpoints/eval_backbone.safetensors").is_file());

    // unreadable audio alone fails; next to a good file it is skipped
    std::fs::write(cwd.join("junk.wav"), b"not audio").unwrap();
    let out = s2ig(&["generate", "--rdg", rdg.to_str().unwrap(), "--sen", sen.to_str().unwrap(), "--audio", "junk.wav", "--out", "gj"], cwd);
    assert!(!out.status.success());
    let out = s2ig(
        &["generate", "--rdg", rdg.to_str().unwrap(), "--sen", sen.to_str().unwrap(), "--audio", "junk.wav", wav.to_str().unwrap(), "--out", "gj2"],
        cwd,
    );
    ok(&out);
    assert_eq!(pngs_in(&cwd.join("gj2")).len(), 1);

    // a SEN with a different embedding size is rejected with both dims named
    std::fs::write(cwd.join("narrow.toml"), "[sen]\nepochs = 1\nembed_dim = 32\n").unwrap();
    let out = ok(&s2ig(
        &["train-sen", "--profile", "ci", "--config", "narrow.toml", "--manifest", "d/manifest.tsv", "--name", "narrow"],
        cwd,
    ));
    let narrow = cwd.join(field(&out, "experiment")).join("checkpoints/sen.safetensors");
    let out = s2ig(&["generate", "--rdg", rdg.to_str().unwrap(), "--sen", narrow.to_str().unwrap(), "--audio", wav.to_str().unwrap(), "--out", "gx"], cwd);
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("32") && err.contains("64"), "{err}");
}
