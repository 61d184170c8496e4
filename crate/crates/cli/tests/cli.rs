use std::fs;
use std::path::Path;
use std::process::Command;

use mdrnet::dataset::parse_manifest;
use mdrnet::eval::format_descriptors;
use mdrnet::mdr::parse_mdr;
use mdrnet::{compute_mdr, load_binvox, CoreError, Descriptor, ShapeDataset, Split};
use mdrnet_cli::CliError;

fn mdrnet(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_mdrnet")).args(args).output().unwrap();
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(dir: &Path, per_class: usize) -> std::path::PathBuf {
    let (code, _, err) = mdrnet(&[
        "dataset-synth",
        "--per-class",
        &per_class.to_string(),
        "--seed",
        "3",
        "--out",
        p(dir),
    ]);
    assert_eq!(code, 0, "{err}");
    dir.join("manifest.tsv")
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.push((rel, fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn synthetic_dataset_counts_and_reproducibility() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let (code, _, _) = mdrnet(&["dataset-synth", "--per-class", "50", "--seed", "7", "--out", p(&a)]);
    assert_eq!(code, 0);
    mdrnet(&["dataset-synth", "--per-class", "50", "--seed", "7", "--out", p(&b)]);
    let entries = parse_manifest(&fs::read_to_string(a.join("manifest.tsv")).unwrap()).unwrap();
    assert_eq!(entries.len(), 200);
    assert_eq!(entries.iter().filter(|e| e.split == Split::Train).count(), 152);
    assert_eq!(entries.iter().filter(|e| e.split == Split::Test).count(), 48);
    let (ta, tb) = (tree(&a), tree(&b));
    assert_eq!(ta.len(), 201);
    assert!(ta == tb, "outputs differ between identical invocations");
}

#[test]
fn rejects_unsplittable_class_size() {
    let tmp = tempfile::tempdir().unwrap();
    let (code, _, err) = mdrnet(&["dataset-synth", "--per-class", "1", "--out", p(tmp.path())]);
    assert_eq!(code, 2);
    assert!(err.contains("at least 2"), "{err}");
    let (code, _, _) = mdrnet(&["dataset-synth", "--classes", "torus", "--out", p(tmp.path())]);
    assert_eq!(code, 2);
}

#[test]
fn slice_export() {
    let tmp = tempfile::tempdir().unwrap();
    synth(&tmp.path().join("ds"), 2);
    let shape = tmp.path().join("ds/cross/cross_000.binvox");
    let out = tmp.path().join("m");
    let (code, _, err) = mdrnet(&["mdr-export", "--in", p(&shape), "--k", "7", "--out", p(&out)]);
    assert_eq!(code, 2);
    assert!(err.contains("[1, 2, 3, 5, 6, 10, 15, 30]"), "{err}");

    let (code, _, _) = mdrnet(&[
        "mdr-export",
        "--in",
        p(&shape),
        "--k",
        "3",
        "--out",
        p(&out),
        "--images",
    ]);
    assert_eq!(code, 0);
    let pgms = fs::read_dir(&out)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "pgm"))
        .count();
    assert_eq!(pgms, 9);
    let written = parse_mdr(&fs::read_to_string(out.join("cross_000.mdr")).unwrap()).unwrap();
    let direct = compute_mdr(&load_binvox(&fs::read(&shape).unwrap()).unwrap(), 3).unwrap();
    assert_eq!(written, direct);
}

#[test]
fn unreadable_and_malformed_inputs_exit_4() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope.binvox");
    let (code, _, _) = mdrnet(&["mdr-export", "--in", p(&missing), "--out", p(tmp.path())]);
    assert_eq!(code, 4);
    let junk = tmp.path().join("junk.binvox");
    fs::write(&junk, b"not a binvox file").unwrap();
    let (code, _, _) = mdrnet(&["mdr-export", "--in", p(&junk), "--out", p(tmp.path())]);
    assert_eq!(code, 4);
}

#[test]
fn invalid_config_is_rejected_before_training() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = synth(&tmp.path().join("ds"), 2);
    let cfg = tmp.path().join("bad.cfg");
    fs::write(&cfg, "lr_gen = -1\n").unwrap();
    let out = tmp.path().join("run");
    let (code, _, err) = mdrnet(&["train", "--config", p(&cfg), "--data", p(&manifest), "--out", p(&out)]);
    assert_eq!(code, 2);
    assert!(err.contains("lr_gen"), "{err}");
    assert!(!out.exists());
    fs::write(&cfg, "learning_rate = 0.1\n").unwrap();
    let (code, _, err) = mdrnet(&["train", "--config", p(&cfg), "--data", p(&manifest), "--out", p(&out)]);
    assert_eq!(code, 2);
    assert!(err.contains("line 1"), "{err}");
}

#[test]
fn exit_codes() {
    let nf = CliError::Core(CoreError::NonFiniteLoss {
        epoch: 2,
        batch: Some(1),
    });
    assert_eq!(nf.exit_code(), 3);
    let grad = CliError::Core(CoreError::Tensor(mdrnet_tensor::TensorError::NonFiniteGradient {
        index: 0,
    }));
    assert_eq!(grad.exit_code(), 3);
    assert_eq!(CliError::Usage("x".into()).exit_code(), 2);
    assert_eq!(CliError::Core(CoreError::Mismatch("x".into())).exit_code(), 2);
}

#[test]
fn train_extract_eval_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = synth(&tmp.path().join("ds"), 4);
    let cfg = tmp.path().join("run.cfg");
    fs::write(&cfg, "# tiny run\nepochs = 2\nbatch_size = 6\n").unwrap();
    let mut checkpoints = Vec::new();
    for run in ["r1", "r2"] {
        let out = tmp.path().join(run);
        let (code, stdout, err) = mdrnet(&["train", "--config", p(&cfg), "--data", p(&manifest), "--out", p(&out)]);
        assert_eq!(code, 0, "{err}");
        assert!(stdout.starts_with("final train accuracy = "));
        let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
        assert_eq!(metrics.lines().count(), 3);
        let run_txt = fs::read_to_string(out.join("run.txt")).unwrap();
        assert!(run_txt.contains("seed = 7") && run_txt.contains("epochs = 2"));
        checkpoints.push(fs::read(out.join("checkpoint.bin")).unwrap());
    }
    assert!(checkpoints[0] == checkpoints[1]);

    let ckpt = tmp.path().join("r1/checkpoint.bin");
    let d1 = tmp.path().join("d1.txt");
    let d2 = tmp.path().join("d2.txt");
    for d in [&d1, &d2] {
        let (code, _, err) = mdrnet(&[
            "extract",
            "--checkpoint",
            p(&ckpt),
            "--data",
            p(&manifest),
            "--out",
            p(d),
        ]);
        assert_eq!(code, 0, "{err}");
    }
    let text = fs::read_to_string(&d1).unwrap();
    assert_eq!(text, fs::read_to_string(&d2).unwrap());
    assert!(text.starts_with("DDSD n=16 dim=1024\n"));
    assert_eq!(text.lines().count(), 17);

    let ev = tmp.path().join("ev");
    let (code, stdout, _) = mdrnet(&[
        "eval",
        "--checkpoint",
        p(&ckpt),
        "--data",
        p(&manifest),
        "--out",
        p(&ev),
    ]);
    assert_eq!(code, 0);
    assert!(stdout.contains("accuracy = "));
    let (code, stdout, _) = mdrnet(&["eval", "--descriptors", p(&d1), "--data", p(&manifest), "--out", p(&ev)]);
    assert_eq!(code, 0);
    assert!(!stdout.contains("accuracy"));
    assert!(ev.join("pr_per_rank.csv").exists() && ev.join("pr_11pt.csv").exists());

    // A checkpoint for four classes against a three-class dataset.
    let ds3 = tmp.path().join("ds3");
    let (code, _, _) = mdrnet(&[
        "dataset-synth",
        "--classes",
        "sphere,box,cross",
        "--per-class",
        "2",
        "--out",
        p(&ds3),
    ]);
    assert_eq!(code, 0);
    let m3 = ds3.join("manifest.tsv");
    let (code, _, err) = mdrnet(&["eval", "--checkpoint", p(&ckpt), "--data", p(&m3), "--out", p(&ev)]);
    assert_eq!(code, 2);
    assert!(err.contains("classes"), "{err}");
}

#[test]
fn eval_of_collapsed_classes_is_perfect() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = synth(&tmp.path().join("ds"), 8);
    let ds = ShapeDataset::load(&manifest).unwrap();
    let items: Vec<(String, Descriptor)> = ds
        .shapes()
        .iter()
        .map(|s| {
            let mut v = vec![0.0; 4];
            v[s.label - 1] = 1.0;
            (s.id.clone(), Descriptor::new(v))
        })
        .collect();
    let desc = tmp.path().join("d.txt");
    fs::write(&desc, format_descriptors(&items)).unwrap();
    let ev = tmp.path().join("ev");
    let (code, stdout, err) = mdrnet(&[
        "eval",
        "--descriptors",
        p(&desc),
        "--data",
        p(&manifest),
        "--out",
        p(&ev),
    ]);
    assert_eq!(code, 0, "{err}");
    assert!(stdout.contains("map = 1.000000"), "{stdout}");
    assert!(stdout.contains("excluded_queries = 0"));
    let curve = fs::read_to_string(ev.join("pr_11pt.csv")).unwrap();
    assert!(curve.lines().skip(1).all(|l| l.ends_with(",1.000000")), "{curve}");

    // Dropping one test shape's descriptor is an error.
    let test_id = ds.split(Split::Test).next().unwrap().id.clone();
    let partial: Vec<_> = items.into_iter().filter(|(id, _)| *id != test_id).collect();
    fs::write(&desc, format_descriptors(&partial)).unwrap();
    let (code, _, err) = mdrnet(&[
        "eval",
        "--descriptors",
        p(&desc),
        "--data",
        p(&manifest),
        "--out",
        p(&ev),
    ]);
    assert_eq!(code, 2);
    assert!(err.contains("no descriptor"), "{err}");
}
