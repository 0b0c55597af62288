//! Browser bindings for the interactive demo in `www/index.html`.
//!
//! The exported functions return flat numeric arrays so the page can draw
//! them on a canvas without any glue beyond the generated bindings.

use wasm_bindgen::prelude::*;

pub mod demo;

fn js(e: orbiconv::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// Sample points as `[x, y, ring]` triples in slot order.
#[wasm_bindgen]
pub fn sample_points(kernel_size: usize, dilation: usize, circular: bool) -> Result<Vec<f64>, JsError> {
    demo::sample_points(kernel_size, dilation, circular).map_err(js)
}

/// Dense transformation matrix, row-major `K²×K²`.
#[wasm_bindgen]
pub fn transform_matrix(kernel_size: usize, dilation: usize) -> Result<Vec<f64>, JsError> {
    demo::transform_matrix(kernel_size, dilation).map_err(js)
}

/// Grid kernel that a circular kernel with `weights` applies.
#[wasm_bindgen]
pub fn effective_kernel(kernel_size: usize, weights: Vec<f64>) -> Result<Vec<f64>, JsError> {
    demo::effective_kernel(kernel_size, &weights).map_err(js)
}

/// Rotated pattern followed by its response map, `2·size²` values.
#[wasm_bindgen]
pub fn rotate_and_convolve(pattern: &str, size: usize, angle: f64, kernel_size: usize, circular: bool) -> Result<Vec<f32>, JsError> {
    demo::rotate_and_convolve(pattern, size, angle, kernel_size, circular).map_err(js)
}

/// Peak response at `steps` evenly spaced angles over a full turn.
#[wasm_bindgen]
pub fn response_curve(pattern: &str, size: usize, kernel_size: usize, circular: bool, steps: usize) -> Result<Vec<f64>, JsError> {
    demo::response_curve(pattern, size, kernel_size, circular, steps).map_err(js)
}
