//! Internal-state visualization: one forward pass dumped as a bundle of
//! six PNG maps — the two dense prompt sigmoids, the gate decision map,
//! the per-pixel fusion energy adjustment, and the coarse/refined mask
//! sigmoids.

use crate::error::Result;
use crate::model::Model;
use ndarray::{Array2, Array3, ArrayD, IxDyn};
use std::path::{Path, PathBuf};

pub const BUNDLE_FILES: [&str; 6] = [
    "sigma_p_pos.png",
    "sigma_p_neg.png",
    "gate.png",
    "energy_delta.png",
    "sigma_m_coarse.png",
    "sigma_m_refined.png",
];

/// Quantize `[0, 1]` to the open interval `[1, 254]`: pure 0/255 are
/// reserved for non-finite input.
pub fn quantize_open(v: f64) -> u8 {
    if !v.is_finite() {
        return if v > 0.0 { 255 } else { 0 };
    }
    ((v * 255.0).round() as i64).clamp(1, 254) as u8
}

fn to_map(t: &ArrayD<f64>) -> Array2<f64> {
    let s = t.shape();
    Array2::from_shape_fn((s[1], s[2]), |(r, c)| t[IxDyn(&[0, r, c])])
}

fn save_gray(map: &Array2<f64>, path: &Path) -> Result<()> {
    let (h, w) = map.dim();
    let img = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([(map[[y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8])
    });
    img.save(path)?;
    Ok(())
}

/// Cold-to-warm colormap: low values dark blue, high values red.
fn colormap(v: f64) -> [u8; 3] {
    let stops: [(f64, [f64; 3]); 3] = [
        (0.0, [16.0, 24.0, 96.0]),
        (0.5, [232.0, 232.0, 224.0]),
        (1.0, [192.0, 32.0, 24.0]),
    ];
    let v = v.clamp(0.0, 1.0);
    let (lo, hi) = if v < 0.5 { (stops[0], stops[1]) } else { (stops[1], stops[2]) };
    let t = (v - lo.0) / (hi.0 - lo.0);
    let mut rgb = [0u8; 3];
    for i in 0..3 {
        rgb[i] = (lo.1[i] + t * (hi.1[i] - lo.1[i])).round() as u8;
    }
    rgb
}

fn save_colormapped(map: &Array2<f64>, path: &Path, open_interval: bool) -> Result<()> {
    let (h, w) = map.dim();
    let img = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let v = map[[y as usize, x as usize]];
        let idx = if open_interval {
            f64::from(quantize_open(v)) / 255.0
        } else {
            v.clamp(0.0, 1.0)
        };
        image::Rgb(colormap(idx))
    });
    img.save(path)?;
    Ok(())
}

fn sigmoid_map(t: &crate::Tensor) -> Array2<f64> {
    to_map(&t.sigmoid().array())
}

/// Run one forward pass and write the six-map bundle into `out_dir`.
/// Returns the written paths in bundle order.
pub fn inspect(model: &Model, image: &Array3<f64>, out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir)?;
    let protocol = model.training_protocol();
    let out = model.forward(image, protocol)?;

    let (h4, w4) = {
        let s = out.prediction.m_coarse.shape();
        (s[1], s[2])
    };
    let flat_half = Array2::from_elem((h4, w4), 0.5);

    let (p_pos, p_neg) = match &out.prompts {
        Some(p) => (sigmoid_map(&p.p_pos), sigmoid_map(&p.p_neg)),
        None => (flat_half.clone(), flat_half.clone()),
    };
    let (gate, energy) = match &out.prediction.gated {
        Some(g) => {
            let energy_raw = to_map(&g.energy_delta.array());
            let max = energy_raw.iter().cloned().fold(0.0f64, f64::max);
            let energy = if max > 0.0 {
                energy_raw.mapv(|v| v / max)
            } else {
                energy_raw
            };
            (to_map(&g.gate.array()), energy)
        }
        None => (
            Array2::from_elem((out.embedding.top.shape()[1], out.embedding.top.shape()[2]), 0.5),
            Array2::zeros((out.embedding.top.shape()[1], out.embedding.top.shape()[2])),
        ),
    };

    let paths: Vec<PathBuf> = BUNDLE_FILES.iter().map(|f| out_dir.join(f)).collect();
    save_gray(&p_pos, &paths[0])?;
    save_gray(&p_neg, &paths[1])?;
    save_colormapped(&gate, &paths[2], true)?;
    save_colormapped(&energy, &paths[3], false)?;
    save_gray(&sigmoid_map(&out.prediction.m_coarse), &paths[4])?;
    save_gray(&sigmoid_map(&out.prediction.m_refined), &paths[5])?;
    Ok(paths)
}

/// Mean gate value inside a dilated ground-truth boundary band versus far
/// from the target (the "isolation ring" diagnostic). Returns
/// `(band_mean, far_mean)`.
pub fn gate_ring_statistic(gate: &Array2<f64>, mask: &Array2<f64>, band: usize) -> (f64, f64) {
    let (gh, gw) = gate.dim();
    let (mh, mw) = mask.dim();
    // nearest-neighbor lookup from gate grid into the mask
    let lookup = |r: usize, c: usize| {
        let mr = (((r as f64 + 0.5) * mh as f64 / gh as f64) as usize).min(mh - 1);
        let mc = (((c as f64 + 0.5) * mw as f64 / gw as f64) as usize).min(mw - 1);
        mask[[mr, mc]]
    };
    let is_boundary = |r: usize, c: usize| {
        let v = lookup(r, c);
        let mut boundary = false;
        for dr in -1i64..=1 {
            for dc in -1i64..=1 {
                let rr = r as i64 + dr;
                let cc = c as i64 + dc;
                if rr >= 0 && cc >= 0 && (rr as usize) < gh && (cc as usize) < gw
                    && lookup(rr as usize, cc as usize) != v
                {
                    boundary = true;
                }
            }
        }
        boundary
    };
    let mut boundary_cells = Vec::new();
    for r in 0..gh {
        for c in 0..gw {
            if is_boundary(r, c) {
                boundary_cells.push((r, c));
            }
        }
    }
    let in_band = |r: usize, c: usize| {
        boundary_cells
            .iter()
            .any(|(br, bc)| br.abs_diff(r) <= band && bc.abs_diff(c) <= band)
    };
    let (mut band_sum, mut band_n, mut far_sum, mut far_n) = (0.0, 0.0, 0.0, 0.0);
    for r in 0..gh {
        for c in 0..gw {
            if in_band(r, c) {
                band_sum += gate[[r, c]];
                band_n += 1.0;
            } else if lookup(r, c) == 0.0 {
                far_sum += gate[[r, c]];
                far_n += 1.0;
            }
        }
    }
    (
        if band_n > 0.0 { band_sum / band_n } else { 0.0 },
        if far_n > 0.0 { far_sum / far_n } else { 0.0 },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::datagen::{synth_sample, SynthConfig};
    use crate::model::Model;

    #[test]
    fn bundle_has_exactly_six_named_files() {
        let model = Model::new(ModelConfig::default()).unwrap();
        let sc = SynthConfig { resolution: 64, delta: 0.5, coverage: (0.1, 0.3), seed: 2 };
        let sample = synth_sample(&sc, 0).unwrap();
        let dir = std::env::temp_dir().join(format!("promptgate_inspect_{}", std::process::id()));
        let paths = inspect(&model, &sample.image, &dir).unwrap();
        assert_eq!(paths.len(), 6);
        let mut names: Vec<String> = std::fs::read_dir(&dir)
            .unwrap()
            .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
            .collect();
        names.sort();
        let mut expected: Vec<String> = BUNDLE_FILES.iter().map(|s| s.to_string()).collect();
        expected.sort();
        assert_eq!(names, expected);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn quantization_avoids_pure_black_and_white_for_finite_values() {
        for v in [0.0, 1e-9, 0.5, 1.0 - 1e-9, 1.0] {
            let q = quantize_open(v);
            assert!(q >= 1 && q <= 254, "{v} -> {q}");
        }
        assert_eq!(quantize_open(f64::INFINITY), 255);
        assert_eq!(quantize_open(f64::NEG_INFINITY), 0);
    }

    #[test]
    fn zero_init_fusion_yields_all_zero_energy_map() {
        let model = Model::new(ModelConfig::default()).unwrap();
        let sc = SynthConfig { resolution: 64, delta: 0.5, coverage: (0.1, 0.3), seed: 4 };
        let sample = synth_sample(&sc, 1).unwrap();
        let out = model
            .forward(&sample.image, crate::config::EvalProtocol::Intrinsic)
            .unwrap();
        let energy = out.prediction.gated.as_ref().unwrap().energy_delta.array();
        assert!(energy.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn ring_statistic_prefers_boundary_band() {
        // gate synthetically low on the band, high far away
        let mask = Array2::from_shape_fn((16, 16), |(r, c)| {
            f64::from((4..12).contains(&r) && (4..12).contains(&c))
        });
        let gate = Array2::from_shape_fn((16, 16), |(r, c)| {
            let on_ring = (3..=12).contains(&r) && (3..=12).contains(&c)
                && !((5..11).contains(&r) && (5..11).contains(&c));
            if on_ring { 0.9 } else { 0.2 }
        });
        let (band, far) = gate_ring_statistic(&gate, &mask, 1);
        assert!(band > far);
    }
}
