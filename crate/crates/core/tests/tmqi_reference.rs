//! TMQI against values frozen from `oracle/tmqi_oracle.py`.

use std::path::PathBuf;

use hdre_core::imageio::{read_png, read_radiance_hdr};
use hdre_core::metrics::tmqi;

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/tmqi")
}

#[test]
fn components_match_the_reference_port() {
    let dir = fixtures();
    let expected: Vec<serde_json::Value> =
        serde_json::from_slice(&std::fs::read(dir.join("expected.json")).unwrap()).unwrap();
    assert_eq!(expected.len(), 15);
    let mut worst: f64 = 0.0;
    for e in &expected {
        let scene = e["scene"].as_str().unwrap();
        let render = e["render"].as_str().unwrap();
        let hdr = read_radiance_hdr(&std::fs::read(dir.join(format!("{scene}.hdr"))).unwrap()).unwrap();
        let ldr = read_png(&std::fs::read(dir.join(format!("{scene}_{render}.png"))).unwrap()).unwrap();
        let got = tmqi(&hdr, &ldr);
        for (key, value) in [("q", got.q), ("s", got.s), ("n", got.n)] {
            let want = e[key].as_f64().unwrap();
            let diff = (value - want).abs();
            worst = worst.max(diff);
            assert!(diff < 0.02, "{scene}/{render} {key}: {value} vs {want}");
        }
    }
    eprintln!("largest deviation from the reference port: {worst:e}");
}

#[test]
fn well_exposed_beats_hard_clipped() {
    let dir = fixtures();
    for scene in ["window", "sunset", "texture", "lamps"] {
        let hdr = read_radiance_hdr(&std::fs::read(dir.join(format!("{scene}.hdr"))).unwrap()).unwrap();
        let score = |render: &str| {
            let ldr = read_png(&std::fs::read(dir.join(format!("{scene}_{render}.png"))).unwrap()).unwrap();
            tmqi(&hdr, &ldr).q
        };
        assert!(score("reinhard") > score("clipped"), "{scene}");
    }
}
