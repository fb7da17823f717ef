use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_vidgs");

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new() -> Self {
        let ws = Workspace { dir: tempfile::tempdir().unwrap() };
        let config = "# small fixture\nk = 4\noverlap = 1\nn_bkg = 200\niterations = 60\nrefine_iterations = 40\nguidance_scales = 5, 10\nseed = 3\n";
        fs::write(ws.path("vidgs.conf"), config).unwrap();
        ws
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(BIN)
            .current_dir(self.dir.path())
            .arg("--config")
            .arg("vidgs.conf")
            .args(args)
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8(out.stdout).unwrap()
    }

    fn code(&self, args: &[&str]) -> i32 {
        self.run(args).status.code().unwrap()
    }
}

fn read_dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn full_pipeline_through_the_command_line() {
    let ws = Workspace::new();
    ws.ok(&["synth", "--width", "24", "--height", "24", "--count", "6"]);
    assert!(ws.path("frames/00001.png").exists());
    assert!(ws.path("masks/00006.png").exists());
    assert!(ws.path("flows/00005.flo").exists());

    let summary = ws.ok(&["decompose"]);
    assert!(!summary.is_empty());
    let manifest = fs::read_to_string(ws.path("scene/manifest.txt")).unwrap();
    assert!(manifest.contains("seed 3"));

    ws.ok(&["reconstruct"]);
    let first = read_dir_bytes(&ws.path("scene"));
    assert!(first.iter().any(|(n, _)| n == "clip_1_frg.ply"));
    let trace = fs::read_to_string(ws.path("scene/clip_1_trace.csv")).unwrap();
    assert!(trace.starts_with("iteration,l1,dssim,total\n"));
    // Idempotent: a second run writes the same bytes.
    ws.ok(&["reconstruct"]);
    assert_eq!(read_dir_bytes(&ws.path("scene")), first);

    ws.ok(&["render", "--out", "recon"]);
    assert!(ws.path("recon/00006.png").exists());
    assert!(fs::read_to_string(ws.path("recon/config.txt")).unwrap().contains("seed = 3"));

    let metrics = ws.ok(&["metrics", "--pred", "recon", "--reference", "recon"]);
    let mut lines = metrics.lines();
    assert_eq!(lines.next(), Some("scope,frame,metric,value,unit"));
    assert!(metrics.contains("frame,1,psnr,inf,dB"), "{metrics}");
    assert!(metrics.contains("video,,ssim,1.000000,1"), "{metrics}");
    assert!(metrics.contains("warp_ssim"));
    assert!(!metrics.contains("q_edit"));
    let with_score = ws.ok(&["metrics", "--pred", "recon", "--clip-score", "26.835"]);
    assert!(with_score.contains("q_edit"));

    let refined = ws.ok(&["refine", "--edits", "recon", "--out", "same", "--set", "refine_lr_scale=0.1"]);
    let l1: f64 = refined.split("final L1 ").nth(1).unwrap().split(',').next().unwrap().parse().unwrap();
    assert!(l1 < 1e-3, "{refined}");
    assert!(ws.path("same/scene/manifest.txt").exists());
    assert!(ws.path("same/refine_phase_1_trace.csv").exists());

    ws.ok(&["refine", "--out", "edited"]);
    assert!(ws.path("edited/00006.png").exists());
    assert!(ws.path("edited/refine_phase_2_trace.csv").exists());
}

#[test]
fn usage_errors_exit_64() {
    let ws = Workspace::new();
    assert_eq!(ws.code(&["no-such-command"]), 64);
    assert_eq!(ws.code(&["decompose", "--set", "nonsense_key=1"]), 64);
    assert_eq!(ws.code(&["decompose", "--set", "k=zero"]), 64);
    ws.ok(&["synth", "--width", "16", "--height", "16", "--count", "3"]);
    fs::remove_dir_all(ws.path("masks")).unwrap();
    assert_eq!(ws.code(&["decompose"]), 64);
    assert_eq!(ws.code(&["render", "--scene", "missing"]), 64);
}

#[test]
fn help_exits_zero() {
    let out = Command::new(BIN).arg("--help").output().unwrap();
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("reconstruct"));
}

#[test]
fn unsupported_camera_model_exits_2() {
    let ws = Workspace::new();
    ws.ok(&["synth", "--width", "32", "--height", "24", "--count", "3"]);
    let fixture = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/colmap/unknown_model");
    let sfm = ws.path("sfm");
    fs::create_dir_all(&sfm).unwrap();
    for f in ["cameras.txt", "images.txt", "points3D.txt"] {
        fs::copy(fixture.join(f), sfm.join(f)).unwrap();
    }
    let out = ws.run(&["decompose", "--provider", "colmap-text"]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn corrupt_scene_exits_4() {
    let ws = Workspace::new();
    let scene = ws.path("scene");
    fs::create_dir_all(&scene).unwrap();
    fs::write(scene.join("manifest.txt"), "seed 1\nframes 3\nk 4\nclip 1 1 3 0 sfm/clip_1\n").unwrap();
    fs::write(scene.join("config.txt"), "seed = 1\n").unwrap();
    assert_eq!(ws.code(&["render"]), 4);
}
