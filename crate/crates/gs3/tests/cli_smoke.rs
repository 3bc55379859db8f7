use std::path::Path;
use std::process::Command;

fn gs3(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_gs3")).args(args).output().expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn help_and_usage_errors() {
    let out = gs3(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    for sub in ["train", "render", "eval", "gen", "serve"] {
        assert!(text.contains(sub), "{text}");
    }
    assert_eq!(gs3(&["paint"]).status.code(), Some(2));
    assert_eq!(gs3(&["train", "--bogus"]).status.code(), Some(2));
    assert_eq!(gs3(&[]).status.code(), Some(2));
}

#[test]
fn runtime_failures_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = gs3(&["train", "--data", s(&dir.path().join("missing.json")), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.json"));
}

#[test]
fn gen_train_render_eval() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    let out = gs3(&["gen", "--kind", "diffuse-sphere", "--out", s(&data), "--views", "6", "--lights", "6", "--resolution", "24"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let manifest = data.join("manifest.json");
    assert!(data.join("images/005.png").exists());

    let out = gs3(&["train", "--data", s(&manifest), "--out", s(&run), "--iters", "200", "--basis", "2", "--seed", "3"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let ckpt = run.join("checkpoint.gs3c");
    assert!(ckpt.metadata().unwrap().len() > 0);
    let log = std::fs::read_to_string(run.join("loss.csv")).unwrap();
    let mut lines = log.lines();
    assert_eq!(lines.next(), Some("iter,stage,loss,l1,dssim,num_gaussians"));
    assert_eq!(lines.count(), 200);

    let png = dir.path().join("frame.png");
    let camera = r#"{"camera_to_world": [[1,0,0,0],[0,1,0,0],[0,0,1,2.5],[0,0,0,1]], "fov_y": 33, "width": 20, "height": 16}"#;
    let light = r#"{"kind": "point", "position": [0, 2.5, 1], "intensity": [12, 12, 12]}"#;
    let out = gs3(&["render", "--ckpt", s(&ckpt), "--camera", camera, "--light", light, "--out", s(&png)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let img = gs3::image_io::load_image(&png).unwrap();
    assert_eq!((img.width, img.height), (20, 16));
    assert!(img.data.iter().any(|&v| v > 0.0), "render is black");

    let env = r#"{"kind": "env", "map": "white", "samples": 4}"#;
    let out = gs3(&["render", "--ckpt", s(&ckpt), "--camera", camera, "--light", env, "--out", s(&png), "--no-psi"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let metrics = dir.path().join("metrics.csv");
    let out = gs3(&["eval", "--ckpt", s(&ckpt), "--data", s(&manifest), "--metrics", s(&metrics)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rows: Vec<String> = std::fs::read_to_string(&metrics).unwrap().lines().map(String::from).collect();
    assert_eq!(rows[0], "frame,image,psnr,ssim");
    assert_eq!(rows.len(), 1 + 6 + 1);
    let mean: Vec<&str> = rows[7].split(',').collect();
    assert_eq!(mean[0], "mean");
    assert!(mean[2].parse::<f64>().unwrap().is_finite());
}
