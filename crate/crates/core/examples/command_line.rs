//! Drive the command-line interface in-process: synthesize a scene,
//! reconstruct it, score it and export a point cloud.

use ridge_sfm::cli::run_cli;

fn main() {
    let dir = std::env::temp_dir().join("ridge-sfm-cli");
    let scene = dir.join("scene");
    let out = dir.join("reconstruction");
    let (scene, out) = (scene.to_str().unwrap(), out.to_str().unwrap());
    let (gt, cloud) = (format!("{scene}/gt"), format!("{out}/cloud.ply"));
    let steps: Vec<Vec<&str>> = vec![
        vec!["synth", "--out", scene, "--frames", "10", "--k", "8"],
        vec!["--deterministic", "bundle", "--scene", scene, "--out", out, "--window", "3", "--random-pairs", "0", "--max-iterations", "1500"],
        vec!["eval", "--prediction", out, "--ground-truth", &gt, "--scene", scene],
        vec!["export-ply", "--prediction", out, "--scene", scene, "--out", &cloud, "--stride", "4"],
    ];
    for args in steps {
        println!("$ ridge-sfm {}", args.join(" "));
        let code = run_cli(std::iter::once("ridge-sfm").chain(args.iter().copied()));
        if code != 0 {
            eprintln!("exited with {code}");
            std::process::exit(code);
        }
    }
}
