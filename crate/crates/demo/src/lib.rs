//! Browser demo over a procedural HDR scene: the virtual camera that makes
//! dark training inputs, histogram equalization of that input, and the
//! exposure-fusion training target, with entropy and TMQI for each.
//!
//! Build with `wasm-pack build crates/demo --target web --out-dir www/pkg`.

use hdre_core::imageio::{geometric_mean_luminance, HdrImage, LdrImage};
use hdre_core::metrics::{discrete_entropy, histogram_equalize, tmqi};
use hdre_core::scenes::generate_scene;
use hdre_core::synthpipe::{apply_exposure, make_target, shutter_speed, virtual_camera};
use wasm_bindgen::prelude::*;

/// Interleaved RGBA, as a canvas `ImageData` expects.
pub fn to_rgba(img: &LdrImage) -> Vec<u8> {
    img.data.chunks_exact(3).flat_map(|p| [p[0], p[1], p[2], 255]).collect()
}

pub fn dark_input(scene: &HdrImage, v: f64, eta: f64, gamma: f64) -> LdrImage {
    let dt = shutter_speed(v, geometric_mean_luminance(scene));
    virtual_camera(&apply_exposure(scene, dt), eta.max(0.0), gamma.max(0.1))
}

/// `{"entropy": .., "tmqi": .., "tmqi_s": .., "tmqi_n": ..}`
pub fn scores_json(scene: &HdrImage, img: &LdrImage) -> String {
    let t = tmqi(scene, img);
    serde_json::json!({
        "entropy": discrete_entropy(img),
        "tmqi": t.q,
        "tmqi_s": t.s,
        "tmqi_n": t.n,
    })
    .to_string()
}

#[wasm_bindgen]
pub struct Demo {
    scene: HdrImage,
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, size: u32) -> Result<Demo, JsError> {
        let size = size as usize;
        let scene = generate_scene(seed as u64, 0, size, size).map_err(|e| JsError::new(&e.to_string()))?;
        Ok(Demo { scene })
    }

    pub fn width(&self) -> u32 {
        self.scene.width() as u32
    }

    pub fn height(&self) -> u32 {
        self.scene.height() as u32
    }

    /// Virtual-camera rendering at exposure offset `v` (stops).
    pub fn input_rgba(&self, v: f64, eta: f64, gamma: f64) -> Vec<u8> {
        to_rgba(&dark_input(&self.scene, v, eta, gamma))
    }

    pub fn equalized_rgba(&self, v: f64, eta: f64, gamma: f64) -> Vec<u8> {
        to_rgba(&histogram_equalize(&dark_input(&self.scene, v, eta, gamma)))
    }

    pub fn target_rgba(&self) -> Result<Vec<u8>, JsError> {
        let g = geometric_mean_luminance(&self.scene);
        let target = make_target(&self.scene, g).map_err(|e| JsError::new(&e.to_string()))?;
        Ok(to_rgba(&target))
    }

    /// JSON scores of the input (`which == 0`), its equalization (1) or the
    /// fused target (2) against the scene.
    pub fn scores(&self, which: u8, v: f64, eta: f64, gamma: f64) -> Result<String, JsError> {
        let input = dark_input(&self.scene, v, eta, gamma);
        let img = match which {
            0 => input,
            1 => histogram_equalize(&input),
            _ => make_target(&self.scene, geometric_mean_luminance(&self.scene))
                .map_err(|e| JsError::new(&e.to_string()))?,
        };
        Ok(scores_json(&self.scene, &img))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scene() -> HdrImage {
        generate_scene(1, 0, 64, 64).unwrap()
    }

    #[test]
    fn rgba_is_opaque_and_sized() {
        let rgba = to_rgba(&LdrImage::filled(3, 2, [1, 2, 3]));
        assert_eq!(rgba.len(), 24);
        assert_eq!(&rgba[..4], &[1, 2, 3, 255]);
    }

    #[test]
    fn lower_exposure_is_darker() {
        let s = scene();
        let mean = |img: LdrImage| img.data.iter().map(|&c| c as f64).sum::<f64>() / img.data.len() as f64;
        assert!(mean(dark_input(&s, -4.0, 0.6, 0.9)) < mean(dark_input(&s, 0.0, 0.6, 0.9)));
    }

    #[test]
    fn scores_are_valid_json() {
        let s = scene();
        let v: serde_json::Value = serde_json::from_str(&scores_json(&s, &dark_input(&s, -2.0, 0.6, 0.9))).unwrap();
        for key in ["entropy", "tmqi", "tmqi_s", "tmqi_n"] {
            assert!(v[key].as_f64().unwrap().is_finite());
        }
    }
}
