use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use infedit_core::harness::without_timestamp;
use infedit_core::{read_latent, write_latent, Latent};
use serde_json::Value;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_infedit")).current_dir(dir).args(args).output().unwrap()
}

fn config(dir: &Path, name: &str, body: &str) -> String {
    fs::write(dir.join(name), body).unwrap();
    name.to_string()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn reconstruct_reports_exact_recovery() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for (steps, sweep) in [(50, 1), (1, 1), (8, 100)] {
        let cfg = config(d, "r.toml", &format!("steps = {steps}\nsweep = {sweep}\nshape = [4, 8, 8]\ntrace_stride = 5\n"));
        let out_dir = format!("out-{steps}");
        let o = run(d, &["reconstruct", "--config", &cfg, "--out", &out_dir]);
        assert!(o.status.success(), "{}", stderr(&o));
        let report = json(&d.join(&out_dir).join("reconstruct.json"));
        assert_eq!(report["schema"], 1);
        assert!(report["max_abs_error"].as_f64().unwrap() <= 1e-12);
        assert_eq!(report["runs"].as_array().unwrap().len(), sweep);
        assert!(d.join(&out_dir).join("seed-0/reconstructed.dlt").exists());
        let trace = report["runs"][0]["trace"].as_array().unwrap();
        assert_eq!(trace.last().unwrap()["step"].as_u64().unwrap() as usize, steps - 1);
    }
}

#[test]
fn reconstruct_reads_an_input_latent() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let z = Latent::from_vec(&[3, 5], (0..15).map(|i| (i as f64).sin() * 4.0).collect()).unwrap();
    write_latent(d.join("in.dlt"), &z).unwrap();
    let cfg = config(d, "r.toml", "input = \"in.dlt\"\nsteps = 20\n");
    let o = run(d, &["reconstruct", "--config", &cfg, "--out", "o"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let back = read_latent(d.join("o/seed-0/reconstructed.dlt")).unwrap();
    assert!(back.max_abs_diff(&z).unwrap() <= 1e-12);
}

#[test]
fn edit_is_deterministic_and_seed_sensitive() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = config(d, "e.toml", "denoiser = \"mixture\"\nsteps = 6\nsweep = 4\nshape = [2, 3]\n");
    for out in ["a", "b"] {
        assert!(run(d, &["edit", "--config", &cfg, "--out", out]).status.success());
    }
    let c = run(d, &["edit", "--config", &cfg, "--out", "c", "--seed", "99"]);
    assert!(c.status.success());
    for seed in 0..4 {
        let rel = format!("seed-{seed}/z0_tgt.dlt");
        assert_eq!(fs::read(d.join("a").join(&rel)).unwrap(), fs::read(d.join("b").join(&rel)).unwrap());
        let csv = format!("seed-{seed}/steps.csv");
        assert_eq!(fs::read(d.join("a").join(&csv)).unwrap(), fs::read(d.join("b").join(&csv)).unwrap());
    }
    let strip = |p: &str| {
        let mut v = without_timestamp(json(&d.join(p).join("edit.json")));
        // output paths differ by directory only
        for r in v["runs"].as_array_mut().unwrap() {
            r.as_object_mut().unwrap().retain(|k, _| k != "output" && k != "steps_csv");
        }
        v
    };
    assert_eq!(strip("a"), strip("b"));
    assert_ne!(fs::read(d.join("a/seed-0/z0_tgt.dlt")).unwrap(), fs::read(d.join("c/seed-99/z0_tgt.dlt")).unwrap());
}

#[test]
fn identity_edit_csv_stays_on_the_source() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = config(d, "e.toml", "denoiser = \"toy\"\nsource_tokens = [3, 4]\ntarget_tokens = [3, 4]\ngrid_h = 4\ngrid_w = 4\nchannels = 2\n");
    let o = run(d, &["edit", "--config", &cfg, "--out", "o"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(d.join("o/seed-0/steps.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("# schema: 1"));
    assert_eq!(lines.next(), Some("step,timestep,z0_distance,eps_gap"));
    let rows: Vec<_> = lines.collect();
    assert_eq!(rows.len(), 12);
    for row in rows {
        let dist: f64 = row.split(',').nth(2).unwrap().parse().unwrap();
        assert!(dist <= 1e-9, "{row}");
    }
}

#[test]
fn mixture_edit_lands_on_the_target_component() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = config(d, "e.toml", "denoiser = \"mixture\"\nmeans = [-2.0, 2.0]\nstd = 0.1\nsteps = 12\nsweep = 40\nshape = [4]\n");
    let o = run(d, &["edit", "--config", &cfg, "--out", "o"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report = json(&d.join("o/edit.json"));
    assert!(report["target_mean_max_deviation"].as_f64().unwrap() < 0.2);
}

#[test]
fn uac_edit_writes_the_layout_branch() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = config(
        d,
        "u.toml",
        "denoiser = \"toy\"\ncontrol = \"uac\"\nsource_tokens = [1, 2]\ntarget_tokens = [1, 3]\nalignment = [[0, 0]]\nblend_target_tokens = [1]\nsteps = 4\n",
    );
    let o = run(d, &["edit", "--config", &cfg, "--out", "o"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(d.join("o/seed-0/z0_lay.dlt").exists());
}

#[test]
fn uac_on_an_oracle_names_the_denoiser() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = config(d, "u.toml", "denoiser = \"gaussian\"\ncontrol = \"uac\"\nalignment = [[0, 0]]\n");
    let o = run(d, &["edit", "--config", &cfg, "--out", "o"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("gaussian_oracle"), "{}", stderr(&o));
}

#[test]
fn unknown_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = config(d, "bad.toml", "stpes = 4\n");
    let o = run(d, &["reconstruct", "--config", &cfg]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("stpes"), "{}", stderr(&o));
}

#[test]
fn compare_samplers_csv() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = config(d, "c.toml", "denoiser = \"gaussian\"\nmeans = [0.3]\nstd = 0.5\nsteps = 10\nshape = [4, 4]\n");
    let o = run(d, &["compare-samplers", "--config", &cfg, "--out", "o"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(d.join("o/compare.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("# schema: 1"));
    assert_eq!(lines.next(), Some("strategy,step,timestep,max_abs_error,mse"));
    let rows: Vec<Vec<String>> = lines.map(|l| l.split(',').map(String::from).collect()).collect();
    assert_eq!(rows.len(), 20);
    let err = |r: &Vec<String>| r[3].parse::<f64>().unwrap();
    assert!(rows.iter().filter(|r| r[0] == "ddcm").all(|r| err(r) <= 1e-12));
    let ddim_final = rows.iter().filter(|r| r[0] == "ddim_inversion").last().unwrap();
    assert_eq!(ddim_final[2], "0");
    assert!(err(ddim_final) > 0.0);

    let toy = config(d, "t.toml", "denoiser = \"toy\"\n");
    assert!(!run(d, &["compare-samplers", "--config", &toy]).status.success());
}

#[test]
fn metrics_report() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let a = Latent::from_vec(&[8, 8], (0..64).map(|i| i as f64 / 64.0).collect()).unwrap();
    write_latent(d.join("a.dlt"), &a).unwrap();
    write_latent(d.join("b.dlt"), &a.map(|x| x * 0.9)).unwrap();
    let same = config(d, "m1.toml", "a = \"a.dlt\"\nb = \"a.dlt\"\n");
    assert!(run(d, &["metrics", "--config", &same, "--out", "s"]).status.success());
    let r = json(&d.join("s/metrics.json"));
    assert_eq!(r["psnr_db"], "inf");
    assert_eq!(r["mse"], 0.0);
    assert_eq!(r["ssim"], 1.0);

    let diff = config(d, "m2.toml", "a = \"a.dlt\"\nb = \"b.dlt\"\n");
    assert!(run(d, &["metrics", "--config", &diff, "--out", "t"]).status.success());
    let r = json(&d.join("t/metrics.json"));
    assert!(r["psnr_db"].as_f64().unwrap() > 0.0);
    assert!(r["ssim"].as_f64().unwrap() < 1.0);

    let missing = config(d, "m3.toml", "a = \"nope.dlt\"\nb = \"a.dlt\"\n");
    assert!(!run(d, &["metrics", "--config", &missing]).status.success());
}

#[test]
fn help_documents_every_report_field() {
    let o = Command::new(env!("CARGO_BIN_EXE_infedit")).arg("--help").output().unwrap();
    let help = String::from_utf8_lossy(&o.stdout);
    for field in [
        "schema", "max_abs_error", "tolerance", "passed", "z_t_norm", "eps_cons_norm", "max_final_z0_distance",
        "target_mean_max_deviation", "final_z0_distance", "z0_distance", "eps_gap", "strategy", "mse",
        "final_error_ddim_inversion", "final_error_ddcm", "psnr_db", "ssim", "created_at_unix", "trace_stride",
        "blend_target_tokens", "alignment", "tau_c", "--config", "--seed", "--out",
    ] {
        assert!(help.contains(field), "--help lacks {field}");
    }
}
