use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn donn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_donn")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn mnist(file: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist").join(file)
}

/// A config small enough to train in a few seconds.
fn tiny_config(dir: &Path, depth: usize) -> PathBuf {
    let text = format!(
        "wavelength = 532e-9\nsys_size = 32\npixel_size = 3.6e-5\ndistance = 0.3\ndepth = {depth}\n\
         approx = fresnel\nlr = 0.5\nbatch_size = 50\nepochs = 2\ngamma = 1.0\nseed = 3\ndet_size = 3\n\
         resize = center\ntrain_images = {}\ntrain_labels = {}\ntest_images = {}\ntest_labels = {}\n\
         train_limit = 200\ntest_limit = 100\nrecord_time = false\n",
        mnist("train-images-idx3-ubyte.gz").display(),
        mnist("train-labels-idx1-ubyte.gz").display(),
        mnist("t10k-images-idx3-ubyte.gz").display(),
        mnist("t10k-labels-idx1-ubyte.gz").display(),
    );
    let path = dir.join(format!("tiny{depth}.ini"));
    fs::write(&path, text).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn train_then_eval_reproduces_the_last_test_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), 2);
    let model = dir.path().join("m.donn");
    let out = donn(&["train", "--config", s(&cfg), "--out", s(&model), "--workers", "1"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).lines().filter(|l| l.starts_with("epoch ")).count() == 2);
    let csv = fs::read_to_string(model.with_extension("csv")).unwrap();
    let last = csv.lines().last().unwrap();
    let test_acc: f64 = last.split(',').nth(3).unwrap().parse().unwrap();

    let out = donn(&["eval", "--model", s(&model), "--config", s(&cfg)]);
    assert!(out.status.success());
    let printed: f64 = stdout(&out).trim().strip_prefix("accuracy ").unwrap().parse().unwrap();
    assert_eq!(printed, test_acc);

    let out = donn(&["eval", "--model", s(&model), "--config", s(&cfg), "--noise", "0"]);
    let noiseless: f64 = stdout(&out).trim().strip_prefix("accuracy ").unwrap().parse().unwrap();
    assert_eq!(noiseless, test_acc);
}

#[test]
fn repeated_single_worker_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), 1);
    let mut files = Vec::new();
    for run in 0..2 {
        let model = dir.path().join(format!("run{run}.donn"));
        let out = donn(&["train", "--config", s(&cfg), "--out", s(&model), "--workers", "1"]);
        assert!(out.status.success());
        files.push((fs::read(&model).unwrap(), fs::read(model.with_extension("csv")).unwrap()));
    }
    assert!(files[0] == files[1]);
}

#[test]
fn view_writes_one_image_per_layer_and_plane() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), 5);
    let model = dir.path().join("deep.donn");
    let train_cfg = fs::read_to_string(&cfg).unwrap().replace("epochs = 2", "epochs = 1");
    fs::write(&cfg, train_cfg).unwrap();
    assert!(donn(&["train", "--config", s(&cfg), "--out", s(&model)]).status.success());

    let phases = dir.path().join("phases");
    assert!(donn(&["view", "--model", s(&model), "--out", s(&phases)]).status.success());
    let count = |d: &Path, prefix: &str| {
        fs::read_dir(d).unwrap().filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().starts_with(prefix)).count()
    };
    assert_eq!(count(&phases, "phase_"), 5);

    let planes = dir.path().join("planes");
    let out = donn(&["view", "--model", s(&model), "--out", s(&planes), "--sample", "0", "--config", s(&cfg)]);
    assert!(out.status.success());
    assert_eq!(count(&planes, "phase_"), 5);
    // input, five layer planes and the detector
    assert_eq!(count(&planes, "plane_"), 7);
    let pgm = fs::read(planes.join("plane_0.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n32 32\n255\n"));
}

#[test]
fn export_writes_levels_of_the_device() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), 1);
    let model = dir.path().join("m.donn");
    assert!(donn(&["train", "--config", s(&cfg), "--out", s(&model)]).status.success());
    let device = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/devices/uniform8.txt");
    let deploy = dir.path().join("deploy.txt");
    let out = donn(&["export", "--model", s(&model), "--device", s(&device), "--out", s(&deploy)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(&deploy).unwrap();
    assert!(text.contains("levels=8"));
}

#[test]
fn dse_commands_chain_together() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), 1);
    let proxy = fs::read_to_string(&cfg).unwrap().replace("epochs = 2", "epochs = 1");
    fs::write(&cfg, proxy).unwrap();
    let sweep = dir.path().join("sweep.csv");
    let args = [
        "dse-sweep", "--config", s(&cfg), "--out", s(&sweep),
        "--wavelengths", "532e-9", "--unit-sizes", "2e-5,3.6e-5", "--distances", "0.2,0.3",
    ];
    assert!(donn(&args).status.success());
    let rows = fs::read_to_string(&sweep).unwrap();
    assert_eq!(rows.lines().next(), Some("wavelength_m,unit_size_m,distance_m,accuracy"));
    assert_eq!(rows.lines().count(), 5);
    // a second run resumes and leaves the file unchanged
    assert!(donn(&args).status.success());
    assert_eq!(fs::read_to_string(&sweep).unwrap(), rows);

    let gbr = dir.path().join("gbr.txt");
    let out = donn(&["dse-fit", "--sweep", s(&sweep), "--out", s(&gbr), "--trees", "50"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out = donn(&[
        "dse-recommend", "--model", s(&gbr), "--wavelength", "532e-9",
        "--unit-sizes", "2e-5,3.6e-5", "--distances", "0.2,0.3",
    ]);
    assert!(out.status.success());
    let line = stdout(&out);
    assert!(line.starts_with("unit_size_m=") && line.contains("predicted_accuracy="), "{line}");
}

#[test]
fn bench_prints_the_csv_contract() {
    let out = donn(&["bench", "--sizes", "8,16", "--depths", "1", "--batch", "2", "--reps", "1"]);
    assert!(out.status.success());
    let text = stdout(&out);
    assert!(text.starts_with("size,depth,batch,dft2_s,idft2_s,hadamard_s,forward_s,kernel_fraction,"));
    assert_eq!(text.lines().count(), 3);
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(donn(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(donn(&["train", "--bogus"]).status.code(), Some(2));
    assert_eq!(donn(&[]).status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_with_one_line_diagnostic() {
    let out = donn(&["eval", "--model", "/nonexistent/m.donn", "--config", "/nonexistent/c.ini"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("error: "), "{err}");
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.ini");
    fs::write(&bad, "wavelength = 532e-9\nmystery = 1\n").unwrap();
    let out = donn(&["train", "--config", s(&bad), "--out", s(&dir.path().join("m"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown key 'mystery'"));
}
