use std::fs;

use imatcher::autodiff::Tensor;
use imatcher::geometry::{random_rigid, PointCloud};
use imatcher::io::{
    load_cloud, load_transform, load_weights, report_csv, save_cloud, save_transform, save_weights, write_report,
    REPORT_HEADER,
};
use imatcher::registration::MetricsReport;
use imatcher::synth::{synth_pair, SynthParams};
use imatcher::weights::{ModelConfig, ModelWeights};
use imatcher::Error;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn xyz_basic_and_comments() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("a.xyz");
    fs::write(&p, "0 0 0\n1 0 0\n0 1 0\n").unwrap();
    assert_eq!(load_cloud(&p).unwrap().len(), 3);

    fs::write(&p, "# header\n0 0 0\n\n1\t0 0\n# mid\n0 1 0\n").unwrap();
    assert_eq!(load_cloud(&p).unwrap().len(), 3);
}

#[test]
fn xyz_errors_name_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.xyz");
    fs::write(&p, "0 0 0\n1 0 0\n0 one 0\n").unwrap();
    match load_cloud(&p) {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
        other => panic!("{:?}", other),
    }
    fs::write(&p, "0 0 0\n1 0\n").unwrap();
    assert!(matches!(load_cloud(&p), Err(Error::Parse { line: 2, .. })));
    fs::write(&p, "0 0 0\n1 0 0\n").unwrap();
    assert!(matches!(load_cloud(&p), Err(Error::InvalidInput(_))));
    fs::write(&p, "0 0 0\n1 0 0\nnan 0 0\n").unwrap();
    assert!(matches!(load_cloud(&p), Err(Error::Parse { line: 3, .. })));
}

#[test]
fn ply_extra_property_ignored() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("a.ply");
    fs::write(
        &p,
        "ply\nformat ascii 1.0\ncomment test\nelement vertex 3\nproperty float x\nproperty float intensity\n\
         property float y\nproperty float z\nelement face 0\nproperty list uchar int vertex_indices\nend_header\n\
         0 9 0 0\n1 9 0 0\n0 9 1 0\n",
    )
    .unwrap();
    let c = load_cloud(&p).unwrap();
    assert_eq!(c.len(), 3);
    assert_eq!(c.point(1).x, 1.0);
    assert_eq!(c.point(2).y, 1.0);
}

#[test]
fn binary_ply_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("b.ply");
    fs::write(&p, "ply\nformat binary_little_endian 1.0\nelement vertex 3\nproperty float x\nend_header\n").unwrap();
    let e = load_cloud(&p).unwrap_err();
    assert!(e.to_string().contains("only ascii"), "{}", e);
}

#[test]
fn ply_short_body_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("s.ply");
    fs::write(
        &p,
        "ply\nformat ascii 1.0\nelement vertex 4\nproperty float x\nproperty float y\nproperty float z\nend_header\n0 0 0\n1 0 0\n0 1 0\n",
    )
    .unwrap();
    assert!(matches!(load_cloud(&p), Err(Error::Parse { .. })));
}

#[test]
fn cloud_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let pair = synth_pair(&SynthParams::standard(3)).unwrap();
    for name in ["c.xyz", "c.ply"] {
        let p = dir.path().join(name);
        save_cloud(&pair.x, &p).unwrap();
        assert_eq!(load_cloud(&p).unwrap(), pair.x);
    }
}

#[test]
fn weights_round_trip_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ModelConfig::new(16, 4, 8).unwrap();
    let w32 = ModelWeights::<f32>::init(cfg, 7).unwrap();
    let p = dir.path().join("w32.json");
    save_weights(&w32, &p).unwrap();
    let back: ModelWeights<f32> = load_weights(&p).unwrap();
    for ((ka, a), (kb, b)) in w32.iter().zip(back.iter()) {
        assert_eq!(ka, kb);
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a), bits(b));
    }

    let w64 = ModelWeights::<f64>::init(cfg, 8).unwrap();
    let p = dir.path().join("w64.json");
    save_weights(&w64, &p).unwrap();
    assert_eq!(load_weights::<f64>(&p).unwrap(), w64);
}

#[test]
fn truncated_weights_file_is_a_parse_error() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("w.json");
    save_weights(&ModelWeights::<f32>::init(ModelConfig::new(16, 4, 8).unwrap(), 1).unwrap(), &p).unwrap();
    let text = fs::read_to_string(&p).unwrap();
    fs::write(&p, &text[..text.len() / 2]).unwrap();
    assert!(matches!(load_weights::<f32>(&p), Err(Error::Json(_))));
}

fn edit_weights(p: &std::path::Path, f: impl FnOnce(&mut serde_json::Value)) {
    let mut v: serde_json::Value = serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap();
    f(&mut v);
    fs::write(p, v.to_string()).unwrap();
}

#[test]
fn weights_file_defects_are_named() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("w.json");
    let fresh = || {
        save_weights(&ModelWeights::<f32>::init(ModelConfig::new(16, 4, 8).unwrap(), 1).unwrap(), &p).unwrap();
    };

    fresh();
    edit_weights(&p, |v| {
        let e = &mut v["entries"]["gcnn.h1.0.weight"];
        e["shape"] = serde_json::json!([16, 16]);
        e["values"] = serde_json::json!(vec![0.0; 256]);
    });
    let e = load_weights::<f32>(&p).unwrap_err();
    assert!(matches!(e, Error::ParameterShape { .. }));
    assert!(e.to_string().contains("h1"), "{}", e);

    fresh();
    edit_weights(&p, |v| {
        v["entries"].as_object_mut().unwrap().remove("fusion_yx.bias");
    });
    let e = load_weights::<f32>(&p).unwrap_err();
    assert!(matches!(e, Error::MissingParameter(_)));
    assert!(e.to_string().contains("fusion_yx.bias"), "{}", e);

    fresh();
    edit_weights(&p, |v| v["format_version"] = serde_json::json!(99));
    assert!(matches!(
        load_weights::<f32>(&p),
        Err(Error::IncompatibleVersion { found: 99, expected: 1 })
    ));
}

#[test]
fn transform_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("t.txt");
    let t = random_rigid(4, 90.0, 2.0).unwrap();
    save_transform(&t, &p).unwrap();
    assert_eq!(load_transform(&p).unwrap(), t);
    fs::write(&p, "1 0 0 0\n0 1 0 0\n").unwrap();
    assert!(load_transform(&p).is_err());
}

fn report(rre: f64, ir: f64) -> MetricsReport {
    MetricsReport {
        rre,
        rte: 0.25,
        rr: rre < 5.0,
        ir,
        fmr: ir > 0.6,
        overlap: 0.7,
        num_corr: 12,
        runtime: 0.5,
    }
}

#[test]
fn report_formatting() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("r.csv");
    write_report(&[], &p).unwrap();
    assert_eq!(fs::read_to_string(&p).unwrap(), format!("{}\n", REPORT_HEADER));

    let csv = report_csv(&[("p0".into(), report(0.0, 1.0))]);
    let line = csv.lines().nth(1).unwrap();
    assert_eq!(line.split(',').nth(1).unwrap(), "0.000000");
    assert_eq!(line, "p0,0.000000,0.250000,1,1.000000,1,0.700000,12,0.500000");
}

#[test]
fn report_reparses_to_six_decimals() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let rows: Vec<(String, MetricsReport)> = (0..100)
        .map(|i| (format!("pair_{i}"), report(rng.random_range(0.0..180.0), rng.random_range(0.0..1.0))))
        .collect();
    let csv = report_csv(&rows);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 101);
    for ((id, r), line) in rows.iter().zip(&lines[1..]) {
        let f: Vec<&str> = line.split(',').collect();
        assert_eq!(f[0], id);
        let rre: f64 = f[1].parse().unwrap();
        let ir: f64 = f[4].parse().unwrap();
        assert!((rre - r.rre).abs() <= 5e-7);
        assert!((ir - r.ir).abs() <= 5e-7);
        assert_eq!(f[3] == "1", r.rr);
        assert_eq!(f[5] == "1", r.fmr);
    }
}

#[test]
fn small_cloud_constructors_still_work() {
    // The loader enforces the pipeline minimum, the type itself does not.
    assert_eq!(PointCloud::from_rows(&[[0.0, 0.0, 0.0]]).unwrap().len(), 1);
}
