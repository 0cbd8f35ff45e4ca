use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mlsc_core::checkpoint::load_checkpoint;
use mlsc_core::codec::Model;
use mlsc_core::data::{save_png, DatasetManifest, RawImage, Split};

const TINY: &str = "height = 16\nwidth = 16\nt = 4\nl = 3\ne = 5\no = 4\nenc_hidden = 4\ndec_hidden = 4\nfusion_hidden = 4\nbatch_size = 2\n";

fn mlsc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mlsc"))
        .args(args)
        .env_remove("MLSC_OUTPUT_ROOT")
        .output()
        .unwrap()
}

fn stdout_path(o: &Output) -> PathBuf {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    PathBuf::from(String::from_utf8(o.stdout.clone()).unwrap().trim())
}

fn gradient(h: usize, w: usize, k: usize) -> RawImage {
    let mut px = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            px.extend_from_slice(&[(x * 255 / w) as u8, (y * 255 / h) as u8, ((x + y + 7 * k) % 256) as u8]);
        }
    }
    RawImage::new(h, w, px, format!("g{k}")).unwrap()
}

fn dataset(dir: &Path, n: usize, size: usize, name: &str) -> PathBuf {
    let paths: Vec<PathBuf> = (0..n)
        .map(|k| {
            let p = dir.join(format!("{name}{k}.png"));
            save_png(&gradient(size, size, k), &p).unwrap();
            p
        })
        .collect();
    let m = dir.join(format!("{name}.tsv"));
    DatasetManifest::from_images(paths, Split::Train).write(&m).unwrap();
    m
}

fn config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, format!("version = 1\noutput_dir = \"{}\"\n{body}", dir.join("runs").display())).unwrap();
    p
}

fn train(cfg: &Path, extra: &[&str]) -> PathBuf {
    let mut args = vec!["train", cfg.to_str().unwrap()];
    args.extend_from_slice(extra);
    stdout_path(&mlsc(&args))
}

#[test]
fn missing_config_is_a_usage_error() {
    let o = mlsc(&["train", "/nonexistent/config.toml"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(mlsc(&["fly"]).status.code(), Some(2));
}

#[test]
fn unknown_key_names_its_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "c.toml", "steps = 1\nlearning_rate = 0.1\n");
    let o = mlsc(&["train", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("learning_rate"), "{err}");
    assert!(err.contains("line 4"), "{err}");
}

#[test]
fn zero_step_training_writes_the_initialization_and_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    let m = dataset(dir.path(), 2, 16, "train");
    let cfg = config(dir.path(), "c.toml", &format!("{TINY}steps = 0\ntrain_manifest = \"{}\"\n", m.display()));
    let ck_path = train(&cfg, &[]);
    let ck = load_checkpoint(&ck_path).unwrap();
    let init = Model::new(&ck.model).unwrap().init_params::<f32>();
    assert_eq!(ck.params.digest(), init.digest());
    let run = ck_path.parent().unwrap();
    for f in ["config.toml", "loss.csv", "run-manifest.toml", "loss.svg"] {
        assert!(run.join(f).exists(), "missing {f}");
    }

    let cfg2 = config(dir.path(), "c2.toml", &format!("{TINY}steps = 2\ntrain_manifest = \"{}\"\n", m.display()));
    let a = fs::read(train(&cfg2, &[])).unwrap();
    let b = fs::read(train(&cfg2, &[])).unwrap();
    assert_eq!(a, b);
}

#[test]
fn eval_writes_sorted_rows_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let tm = dataset(dir.path(), 2, 16, "train");
    let em = dataset(dir.path(), 1, 16, "eval");
    let cfg = config(dir.path(), "t.toml", &format!("{TINY}steps = 1\ntrain_manifest = \"{}\"\n", tm.display()));
    let ck = train(&cfg, &[]);

    let one = config(
        dir.path(),
        "e1.toml",
        &format!("checkpoint = \"{}\"\neval_manifest = \"{}\"\ntest_snrs = [10]\n", ck.display(), em.display()),
    );
    let out = stdout_path(&mlsc(&["eval", one.to_str().unwrap()]));
    let text = fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "system,ratio,train_snr_db,test_snr_db,psnr_db,ssim,failed");
    assert_eq!(lines.len(), 3, "{text}");
    assert!(lines[1].starts_with("jpeg,5/48,-,10.000000,"), "{text}");
    assert!(lines[2].starts_with("mlsc,5/48,10.000000,10.000000,"), "{text}");

    let many = config(
        dir.path(),
        "e2.toml",
        &format!("checkpoint = \"{}\"\neval_manifest = \"{}\"\ntest_snrs = [20, 0, 10]\n", ck.display(), em.display()),
    );
    let out = stdout_path(&mlsc(&["eval", many.to_str().unwrap()]));
    let first = fs::read(&out).unwrap();
    let snrs: Vec<String> = String::from_utf8(first.clone())
        .unwrap()
        .lines()
        .skip(1)
        .filter(|l| l.starts_with("mlsc"))
        .map(|l| l.split(',').nth(3).unwrap().to_string())
        .collect();
    assert_eq!(snrs, ["0.000000", "10.000000", "20.000000"]);
    let again = stdout_path(&mlsc(&["eval", many.to_str().unwrap()]));
    assert_eq!(first, fs::read(again).unwrap());

    let wrong = mlsc(&["eval", many.to_str().unwrap(), "--l=4", "--e=8"]);
    assert_eq!(wrong.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&wrong.stderr).contains("checkpoint"));
}

#[test]
fn matrix_has_one_row_per_training_snr() {
    let dir = tempfile::tempdir().unwrap();
    let tm = dataset(dir.path(), 2, 16, "train");
    let em = dataset(dir.path(), 1, 16, "eval");
    let mut cks = Vec::new();
    for snr in ["0", "10", "20"] {
        let cfg = config(dir.path(), &format!("t{snr}.toml"), &format!("{TINY}steps = 1\ntrain_manifest = \"{}\"\n", tm.display()));
        cks.push(train(&cfg, &[&format!("--train_snr_db={snr}")]).display().to_string());
    }
    let cfg = config(
        dir.path(),
        "m.toml",
        &format!(
            "eval_manifest = \"{}\"\ntrain_snrs = [0, 10, 20]\ncheckpoints = {:?}\ntest_snrs = [{}]\n",
            em.display(),
            cks,
            (0..=20).map(|s| s.to_string()).collect::<Vec<_>>().join(", ")
        ),
    );
    let out = stdout_path(&mlsc(&["matrix", cfg.to_str().unwrap()]));
    let text = fs::read_to_string(out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 4, "{text}");
    assert!(lines[1..].iter().all(|l| l.split(',').count() == 22), "{text}");
}

#[test]
fn ablate_writes_three_tables() {
    let dir = tempfile::tempdir().unwrap();
    let tm = dataset(dir.path(), 2, 16, "train");
    let cfg = config(
        dir.path(),
        "a.toml",
        &format!("{TINY}l = 4\ne = 6\nsteps = 1\ntest_snrs = [0, 10]\ntrain_manifest = \"{}\"\n", tm.display()).replace("l = 3\ne = 5\n", ""),
    );
    let out = stdout_path(&mlsc(&["ablate", cfg.to_str().unwrap()]));
    let run = out.parent().unwrap();
    for v in ["full", "no_caption", "no_segmentation"] {
        assert!(run.join(format!("ablation-{v}.csv")).exists(), "missing {v}");
    }
    let text = fs::read_to_string(out).unwrap();
    assert_eq!(text.lines().count(), 1 + 3 * 2, "{text}");
}

#[test]
fn sweep_maps_ratios_to_transmitted_widths() {
    let dir = tempfile::tempdir().unwrap();
    let tm = dataset(dir.path(), 2, 32, "train");
    let em = dataset(dir.path(), 1, 32, "eval");
    let base = "height = 32\nwidth = 32\nt = 8\nl = 6\no = 4\nenc_hidden = 4\ndec_hidden = 4\nfusion_hidden = 4\nbatch_size = 2\nsteps = 0\n";
    let mut cks = Vec::new();
    for (ratio, e) in [("1/48", 4), ("1/16", 12)] {
        let cfg = config(
            dir.path(),
            &format!("t{e}.toml"),
            &format!("{base}ratio = \"{ratio}\"\ntrain_manifest = \"{}\"\n", tm.display()),
        );
        let ck = train(&cfg, &[]);
        assert_eq!(load_checkpoint(&ck).unwrap().model.e, e);
        cks.push(ck.display().to_string());
    }
    cks.push(dir.path().join("missing.mlsc").display().to_string());
    let cfg = config(
        dir.path(),
        "s.toml",
        &format!(
            "t = 8\nl = 6\nratios = [\"1/48\", \"1/16\", \"1/24\"]\ncheckpoints = {cks:?}\neval_manifest = \"{}\"\ntest_snrs = [0, 20]\n",
            em.display()
        ),
    );
    let o = mlsc(&["sweep", cfg.to_str().unwrap()]);
    let out = stdout_path(&o);
    assert!(String::from_utf8_lossy(&o.stderr).contains("warning"));
    let text = fs::read_to_string(&out).unwrap();
    let learned: Vec<&str> = text.lines().filter(|l| l.starts_with("mlsc")).collect();
    assert_eq!(learned.len(), 4, "{text}");
    assert!(learned[..2].iter().all(|l| l.starts_with("mlsc,1/48,")));
    assert!(learned[2..].iter().all(|l| l.starts_with("mlsc,1/16,")));
    assert!(out.parent().unwrap().join("absent.txt").exists());
}
