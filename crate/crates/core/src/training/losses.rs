//! Training objectives. Tensor losses are dtype-generic so they can be checked in f64; the
//! ray losses return gradients for the hand-written field backward pass.

use candle_core::Tensor;

use crate::nn;
use crate::style_core::STATS_EPS;

/// `||std_v - std_c||^2 + ||mean_v - mean_c||^2`, summed over channels. Inputs are `C` or
/// `N x C`; batches are averaged over `N`.
pub fn loss_style_feature(mean_v: &Tensor, std_v: &Tensor, mean_c: &Tensor, std_c: &Tensor) -> candle_core::Result<Tensor> {
    let per = (std_v - std_c)?.sqr()?.sum_keepdim(std_v.rank() - 1)? + (mean_v - mean_c)?.sqr()?.sum_keepdim(mean_v.rank() - 1)?;
    per?.mean_all()
}

/// Mean squared error.
pub fn mse(a: &Tensor, b: &Tensor) -> candle_core::Result<Tensor> {
    (a - b)?.sqr()?.mean_all()
}

/// Mean absolute error.
pub fn mae(a: &Tensor, b: &Tensor) -> candle_core::Result<Tensor> {
    (a - b)?.abs()?.mean_all()
}

/// Content term: MSE between the output's feature map and the transferred target.
pub fn loss_content(output_features: &Tensor, target_features: &Tensor) -> candle_core::Result<Tensor> {
    mse(output_features, target_features)
}

/// Style term: per layer, MSE of channel means plus MSE of channel stds, summed over layers.
pub fn loss_style(output_stats: &[(Tensor, Tensor)], target_stats: &[(Tensor, Tensor)]) -> candle_core::Result<Tensor> {
    let mut total: Option<Tensor> = None;
    for ((mo, so), (mt, st)) in output_stats.iter().zip(target_stats) {
        let t = (mse(mo, mt)? + mse(so, st)?)?;
        total = Some(match total {
            Some(acc) => (acc + t)?,
            None => t,
        });
    }
    match total {
        Some(t) => Ok(t),
        None => candle_core::bail!("style loss needs at least one layer"),
    }
}

/// `lambda_content * L_c + lambda_style * L_s`, returned with its two parts.
pub fn loss_stylized(
    output_features: &Tensor,
    target_features: &Tensor,
    output_stats: &[(Tensor, Tensor)],
    target_stats: &[(Tensor, Tensor)],
    lambda_content: f64,
    lambda_style: f64,
) -> candle_core::Result<(Tensor, Tensor, Tensor)> {
    let c = loss_content(output_features, target_features)?;
    let s = loss_style(output_stats, target_stats)?;
    let total = ((&c * lambda_content)? + (&s * lambda_style)?)?;
    Ok((total, c, s))
}

/// `mean |I_v - I_c|`.
pub fn loss_consistency(a: &Tensor, b: &Tensor) -> candle_core::Result<Tensor> {
    mae(a, b)
}

/// Channel statistics of every layer, `N x C` each.
pub fn layer_stats(features: &[Tensor]) -> candle_core::Result<Vec<(Tensor, Tensor)>> {
    features.iter().map(|f| nn::channel_stats(f, STATS_EPS)).collect()
}

/// Mean absolute error between rendered CLIP features and their targets, with its gradient
/// with respect to the rendered values (zero at ties).
pub fn loss_clip_field(rendered: &[f32], target: &[f32]) -> (f64, Vec<f32>) {
    debug_assert_eq!(rendered.len(), target.len());
    let n = rendered.len().max(1) as f64;
    let mut loss = 0.0f64;
    let grad = rendered
        .iter()
        .zip(target)
        .map(|(r, t)| {
            let d = (*r - *t) as f64;
            loss += d.abs();
            (d.signum() * (d != 0.0) as u8 as f64 / n) as f32
        })
        .collect();
    (loss / n, grad)
}

/// Mean squared error and its gradient with respect to `pred`.
pub fn mse_with_grad(pred: &[f32], target: &[f32]) -> (f64, Vec<f32>) {
    debug_assert_eq!(pred.len(), target.len());
    let n = pred.len().max(1) as f64;
    let mut loss = 0.0f64;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let d = (*p - *t) as f64;
            loss += d * d;
            (2.0 * d / n) as f32
        })
        .collect();
    (loss / n, grad)
}

/// Photometric MSE of colors composited on a white background, `c = rgb + (1 - acc)`.
/// Returns the loss and the gradients with respect to `rgb` and `acc`.
pub fn photometric_loss(rgb: &[f32], acc: &[f32], target: &[f32]) -> (f64, Vec<f32>, Vec<f32>) {
    let comp: Vec<f32> = rgb
        .chunks_exact(3)
        .zip(acc)
        .flat_map(|(c, a)| [c[0] + 1.0 - a, c[1] + 1.0 - a, c[2] + 1.0 - a])
        .collect();
    let (loss, g) = mse_with_grad(&comp, target);
    let gacc = g.chunks_exact(3).map(|c| -(c[0] + c[1] + c[2])).collect();
    (loss, g, gacc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn t(v: &[f32]) -> Tensor {
        Tensor::new(v, &Device::Cpu).unwrap()
    }

    fn scalar(x: &Tensor) -> f32 {
        x.to_scalar::<f32>().unwrap()
    }

    #[test]
    fn feature_loss_by_hand_and_symmetric() {
        let l = loss_style_feature(&t(&[0.0]), &t(&[1.0]), &t(&[4.0]), &t(&[3.0])).unwrap();
        assert_eq!(scalar(&l), 20.0);
        let r = loss_style_feature(&t(&[4.0]), &t(&[3.0]), &t(&[0.0]), &t(&[1.0])).unwrap();
        assert_eq!(scalar(&r), 20.0);
        let z = loss_style_feature(&t(&[1.0, 2.0]), &t(&[3.0, 4.0]), &t(&[1.0, 2.0]), &t(&[3.0, 4.0])).unwrap();
        assert_eq!(scalar(&z), 0.0);
    }

    #[test]
    fn stylized_by_hand() {
        // one channel, two pixels: output features [1, 3], target [0, 1]
        let out = Tensor::new(&[[[[1.0f32, 3.0]]]], &Device::Cpu).unwrap();
        let tgt = Tensor::new(&[[[[0.0f32, 1.0]]]], &Device::Cpu).unwrap();
        let os = vec![(t(&[2.0]), t(&[1.0]))];
        let ts = vec![(t(&[0.5]), t(&[0.5]))];
        let (total, c, s) = loss_stylized(&out, &tgt, &os, &ts, 1.0, 20.0).unwrap();
        // content: ((1-0)^2 + (3-1)^2) / 2 = 2.5; style: 1.5^2 + 0.5^2 = 2.5
        assert_eq!(scalar(&c), 2.5);
        assert_eq!(scalar(&s), 2.5);
        assert_eq!(scalar(&total), 52.5);
        let (pure, _, _) = loss_stylized(&out, &tgt, &os, &ts, 1.0, 0.0).unwrap();
        assert_eq!(scalar(&pure), 2.5);
        let (zero, _, _) = loss_stylized(&out, &out, &os, &os, 1.0, 20.0).unwrap();
        assert_eq!(scalar(&zero), 0.0);
    }

    #[test]
    fn consistency_offsets() {
        let a = Tensor::full(0.25f32, (1, 3, 4, 4), &Device::Cpu).unwrap();
        let b = Tensor::full(0.75f32, (1, 3, 4, 4), &Device::Cpu).unwrap();
        assert_eq!(scalar(&loss_consistency(&a, &b).unwrap()), 0.5);
        assert_eq!(scalar(&loss_consistency(&a, &a).unwrap()), 0.0);
    }

    #[test]
    fn clip_l1_offsets() {
        let (l, g) = loss_clip_field(&[1.0, 2.0, 3.0, 4.0], &[1.5, 2.5, 3.5, 4.5]);
        assert!((l - 0.5).abs() < 1e-12);
        assert!(g.iter().all(|&x| x == -0.25));
        assert_eq!(loss_clip_field(&[1.0, 2.0], &[1.0, 2.0]).0, 0.0);
    }

    #[test]
    fn photometric_white_background() {
        // empty ray composites to white
        let (l, _, gacc) = photometric_loss(&[0.0; 3], &[0.0], &[1.0; 3]);
        assert_eq!(l, 0.0);
        assert_eq!(gacc, vec![0.0]);
        let (l, g, gacc) = photometric_loss(&[0.5, 0.5, 0.5], &[1.0], &[0.0; 3]);
        assert!((l - 0.25).abs() < 1e-12);
        assert!(g.iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-7));
        assert!((gacc[0] + 1.0).abs() < 1e-6);
    }
}
