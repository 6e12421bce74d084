//! End-to-end runs of the local subcommands through the binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use culicid_core::catalog::manifest::{DatasetManifest, ManifestEntry};
use culicid_core::image::{encode_png, ImageTensor, Scale, MODEL_SIDE};
use culicid_core::Species;

fn culicid(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_culicid"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env("CULICID_URL", "http://127.0.0.1:9")
        .output()
        .unwrap()
}

fn stdout_json(out: &Output) -> serde_json::Value {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// One flat colour per genus plus a little per-image shift, model sized.
fn swatch(species: Species, k: usize) -> ImageTensor {
    let base = match species.genus().name() {
        "aedes" => [200.0, 40.0, 40.0],
        "anopheles" => [40.0, 200.0, 40.0],
        _ => [40.0, 40.0, 200.0],
    };
    let shift = (k % 7) as f32 * 3.0;
    ImageTensor::filled(MODEL_SIDE, MODEL_SIDE, Scale::Byte, base.map(|v: f32| v + shift))
}

/// Writes images and a manifest: `specimens` specimens of three views each,
/// cycling through one species per genus.
fn corpus(dir: &Path, specimens: usize) -> PathBuf {
    std::fs::create_dir_all(dir.join("images")).unwrap();
    let species = [Species::Aegypti, Species::Stephensi, Species::Coronator];
    let mut entries = Vec::new();
    for sp in 0..specimens {
        let label = species[sp % 3];
        for v in 0..3 {
            let id = format!("s{sp}_v{v}");
            let rel = format!("images/{id}.png");
            std::fs::write(dir.join(&rel), encode_png(&swatch(label, sp + v)).unwrap()).unwrap();
            let mut e = ManifestEntry::new(id, format!("s{sp}"), label);
            e.path = Some(rel);
            entries.push(e);
        }
    }
    let path = dir.join("manifest.csv");
    DatasetManifest::new(entries).save(&path).unwrap();
    path
}

#[test]
fn help_and_usage_errors() {
    let help = culicid(&["--help"]);
    assert_eq!(help.status.code(), Some(0));
    let text = String::from_utf8_lossy(&help.stdout);
    for cmd in ["denoise", "augment", "split", "train", "eval", "explain", "serve", "classify"] {
        assert!(text.contains(cmd), "help lacks {cmd}");
    }
    assert_eq!(culicid(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(culicid(&["train"]).status.code(), Some(1));
}

#[test]
fn set_classification_needs_three_images() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.png");
    std::fs::write(&a, encode_png(&swatch(Species::Aegypti, 0)).unwrap()).unwrap();
    let out = culicid(&["classify", "--set", s(&a), s(&a)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("set requires exactly three images, got 2"));
}

#[test]
fn unreachable_service_is_an_internal_failure() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.png");
    std::fs::write(&a, encode_png(&swatch(Species::Aegypti, 0)).unwrap()).unwrap();
    assert_eq!(culicid(&["classify", s(&a)]).status.code(), Some(2));
}

#[test]
fn missing_input_is_bad_input() {
    let dir = tempfile::tempdir().unwrap();
    let out = culicid(&["denoise", "--in", s(&dir.path().join("nope.png")), "--out", s(&dir.path().join("o.png"))]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn denoise_writes_an_image_of_the_same_size() {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("in.png");
    let img = ImageTensor::filled(20, 30, Scale::Byte, [10.0, 20.0, 30.0]);
    std::fs::write(&src, encode_png(&img).unwrap()).unwrap();
    let dst = dir.path().join("out.png");
    let out = culicid(&["--json", "denoise", "--in", s(&src), "--out", s(&dst), "--window", "exact"]);
    stdout_json(&out);
    let back = culicid_core::image::read_image(&dst).unwrap();
    assert_eq!((back.height(), back.width()), (20, 30));
    assert_eq!(back.data(), img.data());
}

#[test]
fn split_train_eval_explain() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = corpus(dir.path(), 18);
    let split = dir.path().join("split.csv");
    stdout_json(&culicid(&["--json", "split", "--manifest", s(&manifest), "--out", s(&split), "--seed", "3"]));
    let m = DatasetManifest::load(&split).unwrap();
    m.validate().unwrap();

    let train = |out: &Path| {
        stdout_json(&culicid(&[
            "--json",
            "train",
            "--manifest",
            s(&split),
            "--head",
            "genus",
            "--out",
            s(out),
            "--seed",
            "7",
            "--epochs",
            "3",
            "--phase2-epochs",
            "0",
            "--no-denoise",
        ]))
    };
    let run_a = dir.path().join("run_a");
    let run_b = dir.path().join("run_b");
    let a = train(&run_a);
    let b = train(&run_b);
    assert_eq!(a["model_digest"], b["model_digest"]);
    assert!(a["model_digest"].as_str().is_some_and(|d| !d.is_empty()));

    let report = stdout_json(&culicid(&[
        "--json",
        "eval",
        "--model",
        s(&run_a),
        "--manifest",
        s(&split),
        "--protocol",
        "per-set",
    ]));
    assert_eq!(report["n_items"], 18);
    let recall = report["per_class_recall"].as_object().unwrap();
    assert_eq!(recall.len(), 3);

    let heat = dir.path().join("heat.png");
    let img = dir.path().join("images/s0_v0.png");
    let ex = stdout_json(&culicid(&[
        "--json",
        "explain",
        "--model",
        s(&run_a),
        "--image",
        s(&img),
        "--class",
        "aedes",
        "--out",
        s(&heat),
    ]));
    assert_eq!(ex["class"], "aedes");
    assert!(heat.is_file());
    assert!(heat.with_extension("csv").is_file());
}

#[test]
fn per_set_eval_rejects_incomplete_sets() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = corpus(dir.path(), 3);
    let mut m = DatasetManifest::load(&manifest).unwrap();
    m.entries.pop();
    m.save(&manifest).unwrap();
    let bundle = dir.path().join("bundle");
    let head = culicid_core::heads::HeadModel::<f32>::new(
        &culicid_core::heads::HeadKind::Genus.spec(),
        Default::default(),
        1,
    )
    .unwrap();
    culicid_core::bundle::ModelBundle::save(
        &bundle,
        &culicid_core::bundle::BackboneSpec::Standin { seed: 1 },
        &[&head],
        culicid_core::preprocess::PreprocessConfig { denoise: None, ..Default::default() },
    )
    .unwrap();
    let out = culicid(&["eval", "--model", s(&bundle), "--manifest", s(&manifest), "--protocol", "per-set"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("set requires exactly three images, got 2"));
}

#[test]
fn augment_writes_four_variants_per_train_image() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = corpus(dir.path(), 6);
    let split = dir.path().join("split.csv");
    stdout_json(&culicid(&["--json", "split", "--manifest", s(&manifest), "--out", s(&split), "--seed", "1"]));
    let train = DatasetManifest::load(&split).unwrap().partition(culicid_core::catalog::manifest::Partition::Train).count();
    let out_dir = dir.path().join("aug");
    let r = stdout_json(&culicid(&["--json", "augment", "--manifest", s(&split), "--out-dir", s(&out_dir), "--seed", "4"]));
    assert_eq!(r["train_images"], 5 * train);
    assert_eq!(r["variants"], 4 * train);
    let m = DatasetManifest::load(out_dir.join("manifest.csv")).unwrap();
    m.validate().unwrap();
}
