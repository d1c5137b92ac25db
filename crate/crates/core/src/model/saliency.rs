use super::codec::{AccelClass, ModelMode};
use super::network::{DrivingModel, Heads, Phase};
use crate::autodiff::{Graph, Tensor};
use crate::dataset::{normalize, Normalization};
use crate::error::{Error, Result};
use crate::render::Frame;

/// Which output logit to explain.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SaliencyTarget {
    Steering(usize),
    Accel(AccelClass),
    Regression(usize),
}

/// |∂ logit / ∂ pixel| for every input pixel, in row-major order.
pub fn saliency_raw(
    model: &DrivingModel,
    frame: &Frame,
    norm: &Normalization,
    velocity_mph: f32,
    target: SaliencyTarget,
) -> Result<Vec<f32>> {
    let cfg = model.config();
    match (cfg.mode, target) {
        (ModelMode::Classification, SaliencyTarget::Steering(b)) if b < cfg.steering_classes => {}
        (ModelMode::Classification, SaliencyTarget::Accel(_)) => {}
        (ModelMode::Regression, SaliencyTarget::Regression(i)) if i < 3 => {}
        _ => return Err(Error::Config(format!("saliency target {target:?} does not exist on a {:?} model", cfg.mode))),
    }
    let pixels = normalize(frame, norm)?;
    let mut g = Graph::<f32>::new();
    let x = g.leaf(Tensor { shape: vec![1, 1, frame.height, frame.width], data: pixels }, true);
    let v = cfg.velocity_input.then(|| g.input(Tensor { shape: vec![1, 1], data: vec![velocity_mph] }));
    let pass = model.forward_graph(&mut g, x, v, Phase::Eval, false)?;
    let (out, index) = match (pass.heads, target) {
        (Heads::Classification { steer, .. }, SaliencyTarget::Steering(b)) => (steer, b),
        (Heads::Classification { accel, .. }, SaliencyTarget::Accel(c)) => (accel, c.index()),
        (Heads::Regression(r), SaliencyTarget::Regression(i)) => (r, i),
        _ => unreachable!("target checked against mode above"),
    };
    let mut pick = Tensor::zeros(g.shape(out));
    pick.data[index] = 1.0;
    let logit = g.weighted_sum(out, &pick)?;
    let grads = g.backward(logit)?;
    Ok(grads.get(x).expect("input requires grad").iter().map(|v| v.abs()).collect())
}

/// Saliency scaled so the strongest pixel is 255.
pub fn saliency(
    model: &DrivingModel,
    frame: &Frame,
    norm: &Normalization,
    velocity_mph: f32,
    target: SaliencyTarget,
) -> Result<Frame> {
    let raw = saliency_raw(model, frame, norm, velocity_mph, target)?;
    Ok(heatmap(&raw, frame.width, frame.height))
}

pub fn heatmap(raw: &[f32], width: usize, height: usize) -> Frame {
    let max = raw.iter().cloned().fold(0.0f32, f32::max);
    let pixels = if max > 0.0 {
        raw.iter().map(|v| (v / max * 255.0).round().clamp(0.0, 255.0) as u8).collect()
    } else {
        vec![0; raw.len()]
    };
    Frame { width, height, pixels }
}

/// Share of total saliency in rows at or below `row`.
pub fn mass_fraction_from_row(raw: &[f32], width: usize, row: usize) -> f64 {
    let total: f64 = raw.iter().map(|&v| v as f64).sum();
    if total == 0.0 {
        return 0.0;
    }
    let below: f64 = raw[(row * width).min(raw.len())..].iter().map(|&v| v as f64).sum();
    below / total
}
