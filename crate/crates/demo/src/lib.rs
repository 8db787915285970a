//! Browser demo bindings. Three operations are exported to JavaScript:
//! rendering a synthetic EO/IR scene, previewing the mixed feature exchange on
//! its images, and inspecting the gates of a randomly initialized gated fusion
//! unit. The plain Rust functions are what the native tests exercise; the
//! `#[wasm_bindgen]` wrappers only convert errors.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

use csknet::data::{render_scene, RenderedScene, SceneConfig};
use csknet::exchange::{channel_exchange, spatial_exchange};
use csknet::gsu::GatedSpectralUnit;
use csknet::param::ParamStore;
use csknet::{Tape, Tensor};

/// Background, blob, box, pole.
const PALETTE: [[u8; 3]; 4] = [[30, 30, 40], [230, 90, 60], [70, 160, 230], [240, 220, 80]];

#[wasm_bindgen]
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    rgba: Vec<u8>,
}

#[wasm_bindgen]
impl Image {
    #[wasm_bindgen(getter)]
    pub fn width(&self) -> usize {
        self.width
    }

    #[wasm_bindgen(getter)]
    pub fn height(&self) -> usize {
        self.height
    }

    /// Row-major RGBA bytes, ready for `ImageData`.
    #[wasm_bindgen(getter)]
    pub fn rgba(&self) -> Vec<u8> {
        self.rgba.clone()
    }
}

impl Image {
    /// Channel 0..3 of `t` (or channel 0 repeated) as an opaque image; values in [lo, hi].
    fn from_tensor(t: &Tensor, lo: f64, hi: f64) -> Image {
        let s = t.shape();
        let mut rgba = Vec::with_capacity(s.h * s.w * 4);
        for y in 0..s.h {
            for x in 0..s.w {
                for c in 0..3 {
                    let v = t.at(0, c.min(s.c - 1), y, x);
                    rgba.push((255.0 * ((v - lo) / (hi - lo)).clamp(0.0, 1.0)).round() as u8);
                }
                rgba.push(255);
            }
        }
        Image { width: s.w, height: s.h, rgba }
    }
}

#[wasm_bindgen]
#[derive(Debug, Clone)]
pub struct SceneView {
    eo: Image,
    ir: Image,
    label: Image,
    night: bool,
}

#[wasm_bindgen]
impl SceneView {
    #[wasm_bindgen(getter)]
    pub fn eo(&self) -> Image {
        self.eo.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn ir(&self) -> Image {
        self.ir.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn label(&self) -> Image {
        self.label.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn night(&self) -> bool {
        self.night
    }
}

#[wasm_bindgen]
#[derive(Debug, Clone)]
pub struct ExchangeView {
    eo: Image,
    ir: Image,
    /// Fraction of EO-branch values that now come from the IR branch.
    swapped: f64,
}

#[wasm_bindgen]
impl ExchangeView {
    #[wasm_bindgen(getter)]
    pub fn eo(&self) -> Image {
        self.eo.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn ir(&self) -> Image {
        self.ir.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn swapped(&self) -> f64 {
        self.swapped
    }
}

#[wasm_bindgen]
#[derive(Debug, Clone)]
pub struct GateView {
    gates: Vec<Image>,
    fused: Image,
    means: Vec<f64>,
}

#[wasm_bindgen]
impl GateView {
    /// Gate `k` (0: IR candidate, 1: EO candidate, 2: sum candidate) in grayscale.
    pub fn gate(&self, k: usize) -> Option<Image> {
        self.gates.get(k).cloned()
    }

    /// Fused output mapped from [-3, 3] to grayscale.
    #[wasm_bindgen(getter)]
    pub fn fused(&self) -> Image {
        self.fused.clone()
    }

    /// Mean activation of each gate.
    #[wasm_bindgen(getter)]
    pub fn means(&self) -> Vec<f64> {
        self.means.clone()
    }
}

fn scene_config(data_seed: u32, night_fraction: f64) -> SceneConfig {
    SceneConfig { seed: u64::from(data_seed), night_fraction, ..SceneConfig::default() }
}

fn render(data_seed: u32, index: u32, night_fraction: f64) -> csknet::Result<(RenderedScene, Tensor, Tensor)> {
    let scene = render_scene(&scene_config(data_seed, night_fraction), u64::from(index))?;
    let (eo, ir) = (scene.eo.to_tensor(), scene.ir.to_tensor());
    Ok((scene, eo, ir))
}

pub fn scene(data_seed: u32, index: u32, night_fraction: f64) -> csknet::Result<SceneView> {
    let (scene, eo, ir) = render(data_seed, index, night_fraction)?;
    let l = &scene.label;
    let rgba = l.data.iter().flat_map(|&c| {
        let [r, g, b] = PALETTE[usize::from(c) % PALETTE.len()];
        [r, g, b, 255]
    });
    Ok(SceneView {
        eo: Image::from_tensor(&eo, 0.0, 1.0),
        ir: Image::from_tensor(&ir, 0.0, 1.0),
        label: Image { width: l.w, height: l.h, rgba: rgba.collect() },
        night: scene.night,
    })
}

/// Applies channel exchange (per-channel `gamma_eo` / `gamma_ir` against
/// `threshold`) and then, if `spatial`, the odd-column swap to the scene's
/// EO image and its IR image replicated to three channels.
pub fn exchange(
    data_seed: u32,
    index: u32,
    night_fraction: f64,
    spatial: bool,
    gamma_eo: &[f64],
    gamma_ir: &[f64],
    threshold: f64,
) -> csknet::Result<ExchangeView> {
    let (_, eo, ir) = render(data_seed, index, night_fraction)?;
    let ir3 = ir.repeat_channels(3)?;
    let mut tape = Tape::new();
    let (a, b) = (tape.constant(eo.clone()), tape.constant(ir3));
    let (a, b) = channel_exchange(&mut tape, a, b, gamma_eo, gamma_ir, threshold)?;
    let (a, b) = if spatial { spatial_exchange(&mut tape, a, b)? } else { (a, b) };
    let out = tape.value(a);
    let same = out.data().iter().zip(eo.data()).filter(|(x, y)| x == y).count();
    Ok(ExchangeView {
        eo: Image::from_tensor(out, 0.0, 1.0),
        ir: Image::from_tensor(tape.value(b), 0.0, 1.0),
        swapped: 1.0 - same as f64 / eo.numel() as f64,
    })
}

/// Runs a gated fusion unit (weights drawn from `unit_seed`) on the scene's
/// IR intensity and EO luminance, centred to [-1, 1]. `forced` in 0..3 pins
/// that gate to one and the others to zero.
pub fn gates(data_seed: u32, index: u32, night_fraction: f64, unit_seed: u32, forced: Option<usize>) -> csknet::Result<GateView> {
    let (_, eo, ir) = render(data_seed, index, night_fraction)?;
    let s = ir.shape();
    let mut lum = Tensor::zeros(s);
    for y in 0..s.h {
        for x in 0..s.w {
            let v = 0.299 * eo.at(0, 0, y, x) + 0.587 * eo.at(0, 1, y, x) + 0.114 * eo.at(0, 2, y, x);
            lum.set(0, 0, y, x, 2.0 * v - 1.0);
        }
    }
    let ir = ir.map(|v| 2.0 * v - 1.0);
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(u64::from(unit_seed));
    let unit = GatedSpectralUnit::new(&mut store, &mut rng, "gsu", 1)?;
    let mut tape = Tape::new();
    let (fi, fo) = (tape.constant(ir), tape.constant(lum));
    let pinned = forced.map(|k| -> [Tensor; 3] { std::array::from_fn(|i| Tensor::full(s, if i == k { 1.0 } else { 0.0 })) });
    let out = unit.forward_with_gates(&mut tape, &store, fi, fo, pinned.as_ref())?;
    let gates: Vec<Image> = out.gates.iter().map(|&z| Image::from_tensor(tape.value(z), 0.0, 1.0)).collect();
    let means = out.gates.iter().map(|&z| tape.value(z).data().iter().sum::<f64>() / s.numel() as f64).collect();
    Ok(GateView { gates, fused: Image::from_tensor(tape.value(out.fuse), -3.0, 3.0), means })
}

fn js(e: csknet::Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen(js_name = renderScene)]
pub fn render_scene_js(data_seed: u32, index: u32, night_fraction: f64) -> Result<SceneView, JsError> {
    scene(data_seed, index, night_fraction).map_err(js)
}

#[wasm_bindgen(js_name = exchangePreview)]
#[allow(clippy::too_many_arguments)]
pub fn exchange_preview_js(
    data_seed: u32,
    index: u32,
    night_fraction: f64,
    spatial: bool,
    gamma_eo: Vec<f64>,
    gamma_ir: Vec<f64>,
    threshold: f64,
) -> Result<ExchangeView, JsError> {
    exchange(data_seed, index, night_fraction, spatial, &gamma_eo, &gamma_ir, threshold).map_err(js)
}

/// `forced` < 0 lets the unit compute its own gates.
#[wasm_bindgen(js_name = gatePreview)]
pub fn gate_preview_js(
    data_seed: u32,
    index: u32,
    night_fraction: f64,
    unit_seed: u32,
    forced: i32,
) -> Result<GateView, JsError> {
    let forced = usize::try_from(forced).ok();
    if forced.is_some_and(|k| k > 2) {
        return Err(JsError::new("forced gate must be 0, 1, 2 or negative"));
    }
    gates(data_seed, index, night_fraction, unit_seed, forced).map_err(js)
}
