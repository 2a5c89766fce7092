use std::path::Path;
use std::process::{Command, Output};
use std::time::Instant;

fn rili(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rili")).args(args).arg("--log=warn").output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn count_params_for_base_vit() {
    let start = Instant::now();
    let nft = rili(&["count-params", "--preset", "dinov2-base-shape", "--regime", "NFT"]);
    assert!(nft.status.success());
    assert!(stdout(&nft).contains("\tNFT\t3074\t"), "{}", stdout(&nft));
    let lora =
        rili(&["count-params", "--preset", "dinov2-base-shape", "--regime", "lora", "--rank", "32", "--targets", "qv"]);
    assert!(stdout(&lora).contains("\tLoRA\t1182722\t"), "{}", stdout(&lora));
    assert!(start.elapsed().as_secs_f64() < 5.0);
}

#[test]
fn exit_codes() {
    assert_eq!(rili(&["count-params", "--preset", "resnet50", "--regime", "NFT"]).status.code(), Some(2));
    assert_eq!(rili(&["count-params", "--preset", "toy-vit", "--regime", "adapter"]).status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.csv");
    let out = dir.path().join("s.json");
    let o = rili(&["split", "--manifest", missing.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn help_lists_defaults() {
    let o = rili(&["synth", "--help"]);
    assert!(stdout(&o).contains("[default: 40]"));
    let o = rili(&["train", "--help"]);
    let text = stdout(&o);
    for needle in
        ["[train]", "batch_size = 8", "[lora]", "rank = 32", "[prep]", "window_lo_hu = -500.0", "[experiment]"]
    {
        assert!(text.contains(needle), "missing {needle} in\n{text}");
    }
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn synth_split_train_eval_report() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let o = rili(&["synth", "--patients", "40", "--max-scans", "1", "--seed", "3", "--out", path(&data)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let manifest = data.join("manifest.csv");
    let splits = dir.path().join("splits.json");
    assert!(rili(&["split", "--manifest", path(&manifest), "--seed", "0", "--out", path(&splits)]).status.success());

    let cache = dir.path().join("cache");
    assert!(rili(&["prep", "--manifest", path(&manifest), "--crop", "50", "--mode", "ortho", "--out", path(&cache)])
        .status
        .success());

    let runs = dir.path().join("runs");
    let cfg = dir.path().join("cfg.toml");
    let text = format!(
        "[train]\nmax_epochs = 2\n[experiment]\nregime = \"NFT\"\noutput_dir = {:?}\nprep_cache = {:?}\n",
        path(&runs),
        path(&cache)
    );
    std::fs::write(&cfg, text).unwrap();
    let o = rili(&["train", "--config", path(&cfg), "--splits", path(&splits), "--manifest", path(&manifest)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let run = runs.join("toy-vit__orthogonal__50mm__NFT");
    let metrics = std::fs::read(run.join("metrics.csv")).unwrap();

    assert!(rili(&["eval", "--run", path(&run)]).status.success());
    assert_eq!(std::fs::read(run.join("metrics.csv")).unwrap(), metrics);

    let tables = dir.path().join("tables");
    let pattern = format!("{}/*", path(&runs));
    let o = rili(&["report", "--runs", &pattern, "--out", path(&tables)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let table = std::fs::read_to_string(tables.join("table_toy-vit.csv")).unwrap();
    assert_eq!(table.lines().count(), 2);
    assert!(table.lines().nth(1).unwrap().starts_with("NFT,50,orthogonal,"));
    assert!(tables.join("params_time.csv").is_file());
}

#[test]
fn grid_writes_48_configs() {
    let dir = tempfile::tempdir().unwrap();
    assert!(rili(&["grid", "--out", path(dir.path())]).status.success());
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 48);
}
