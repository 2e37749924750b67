//! Gradient-weighted class activation maps at stage outputs.

use alloc::vec::Vec;

use crate::autograd::Graph;
use crate::backbone::{Backbone, Mode};
use crate::error::{Error, Result};
use crate::params::Binding;
use crate::tensor::Tensor;
use crate::training::argmax;

#[derive(Clone, Debug, PartialEq)]
pub struct ActivationMap {
    /// 1-based stage index.
    pub stage: usize,
    pub class: usize,
    /// `(H'_s, W'_s)`, values in [0, 1].
    pub coarse: Tensor,
    /// `coarse` bilinearly resized to the input resolution, values in [0, 1].
    pub upsampled: Tensor,
}

/// The last `count` stage indices, ascending.
pub fn last_stages(stages: usize, count: usize) -> Vec<usize> {
    (stages.saturating_sub(count) + 1..=stages).collect()
}

/// Maps for `image` `(C, R, R)` at each of `stages`. Targets the predicted class unless `class` is given.
pub fn grad_cam(backbone: &Backbone, image: &Tensor, stages: &[usize], class: Option<usize>) -> Result<Vec<ActivationMap>> {
    let cfg = backbone.config();
    let s = image.shape();
    if s.len() != 3 {
        return Err(Error::Shape {
            context: "grad-cam image (C, R, R)",
            expected: alloc::vec![cfg.input_channels, cfg.input_resolution, cfg.input_resolution],
            found: s.to_vec(),
        });
    }
    if let Some(&bad) = stages.iter().find(|&&st| st == 0 || st > cfg.stages()) {
        return Err(Error::StageOutOfRange {
            stage: bad,
            stages: cfg.stages(),
        });
    }
    let mut g = Graph::new();
    // A differentiable input makes every downstream activation carry a gradient.
    let input = g.param(image.clone().reshape(&[1, s[0], s[1], s[2]])?);
    let out = backbone.forward_graph(&mut g, input, Binding::Frozen, Mode::Eval)?;
    let logits = g.value(out.logits).data().to_vec();
    let class = class.unwrap_or_else(|| argmax(&logits));
    if class >= logits.len() {
        return Err(Error::Config(alloc::format!("class {class} out of range")));
    }
    let mut seed = Tensor::zeros(&[1, logits.len()]);
    seed.data_mut()[class] = 1.0;
    let grads = g.backward_with(out.logits, seed);

    stages
        .iter()
        .map(|&st| {
            let var = out.stages[st - 1].1;
            let act = g.value(var);
            let grad = grads.get_or_zeros(var, act.shape());
            let coarse = cam(act, &grad);
            let upsampled = resize_bilinear(&coarse, cfg.input_resolution, cfg.input_resolution);
            Ok(ActivationMap {
                stage: st,
                class,
                coarse,
                upsampled,
            })
        })
        .collect()
}

/// ReLU of the gradient-weighted channel sum, normalized to [0, 1].
pub fn cam(activation: &Tensor, gradient: &Tensor) -> Tensor {
    let s = activation.shape();
    let (c, h, w) = (s[1], s[2], s[3]);
    let hw = h * w;
    let mut map = alloc::vec![0.0; hw];
    for ch in 0..c {
        let go = &gradient.data()[ch * hw..(ch + 1) * hw];
        let alpha = go.iter().sum::<f64>() / hw as f64;
        for (m, a) in map.iter_mut().zip(&activation.data()[ch * hw..(ch + 1) * hw]) {
            *m += alpha * a;
        }
    }
    map.iter_mut().for_each(|m| *m = m.max(0.0));
    normalize_unit(&Tensor::new(&[h, w], map).expect("cam shape"))
}

/// Scale a nonnegative map so its peak is 1; an all-zero map stays zero.
pub fn normalize_unit(map: &Tensor) -> Tensor {
    let hi = map.data().iter().copied().fold(0.0, f64::max);
    if hi <= 0.0 {
        return Tensor::zeros(map.shape());
    }
    map.map(|v| (v / hi).clamp(0.0, 1.0))
}

/// Half-pixel-centred bilinear resize of an `(H, W)` map.
pub fn resize_bilinear(map: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let src = |y: usize, x: usize| map.data()[y * w + x];
    let coord = |o: usize, n_in: usize, n_out: usize| {
        let c = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).max(0.0);
        let i0 = (libm::floor(c) as usize).min(n_in - 1);
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, c - i0 as f64)
    };
    Tensor::from_fn(&[out_h, out_w], |k| {
        let (y0, y1, fy) = coord(k / out_w, h, out_h);
        let (x0, x1, fx) = coord(k % out_w, w, out_w);
        let top = src(y0, x0) * (1.0 - fx) + src(y0, x1) * fx;
        let bottom = src(y1, x0) * (1.0 - fx) + src(y1, x1) * fx;
        top * (1.0 - fy) + bottom * fy
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn net() -> Backbone {
        let cfg = BackboneConfig {
            input_channels: 3,
            input_resolution: 32,
            widths: alloc::vec![4, 6, 8, 8],
            blocks_per_stage: 1,
            strides: alloc::vec![2, 2, 2, 2],
            num_classes: 4,
        };
        Backbone::init(cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap()
    }

    #[test]
    fn maps_cover_last_three_stages_in_unit_range() {
        assert_eq!(last_stages(4, 3), alloc::vec![2, 3, 4]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = Tensor::from_fn(&[3, 32, 32], |_| rng.gen_range(-1.0..1.0));
        let maps = grad_cam(&net(), &img, &last_stages(4, 3), None).unwrap();
        assert_eq!(maps.len(), 3);
        assert_eq!(maps[0].coarse.shape(), &[8, 8]);
        for m in &maps {
            assert_eq!(m.upsampled.shape(), &[32, 32]);
            for t in [&m.coarse, &m.upsampled] {
                assert!(t.data().iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
        assert_eq!(maps, grad_cam(&net(), &img, &[2, 3, 4], None).unwrap());
    }

    #[test]
    fn cam_oracle_on_hand_values() {
        // Two channels on a 1×2 map; weights are the averaged gradients 1.0 and -0.5.
        let act = Tensor::new(&[1, 2, 1, 2], alloc::vec![1.0, 3.0, 4.0, 0.0]).unwrap();
        let grad = Tensor::new(&[1, 2, 1, 2], alloc::vec![2.0, 0.0, -1.0, 0.0]).unwrap();
        // Weighted sums: 1 - 2 = -1 → 0, and 3 - 0 = 3 → 1 after scaling.
        assert_eq!(cam(&act, &grad).data(), &[0.0, 1.0]);
    }

    #[test]
    fn bilinear_resize_properties() {
        let m = Tensor::new(&[2, 2], alloc::vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        assert_eq!(resize_bilinear(&m, 2, 2), m);
        let up = resize_bilinear(&m, 4, 4);
        assert_eq!(up.get(&[0, 0]), 0.0);
        assert_eq!(up.get(&[3, 3]), 3.0);
        assert!((up.get(&[1, 1]) - 0.75).abs() < 1e-12);
        let flat = resize_bilinear(&Tensor::full(&[3, 3], 0.4), 7, 5);
        assert!(flat.data().iter().all(|&v| (v - 0.4).abs() < 1e-15));
    }

    #[test]
    fn normalization_keeps_flat_maps_flat() {
        assert_eq!(normalize_unit(&Tensor::full(&[2, 2], 5.0)), Tensor::full(&[2, 2], 1.0));
        assert_eq!(normalize_unit(&Tensor::zeros(&[2, 2])), Tensor::zeros(&[2, 2]));
    }

    #[test]
    fn constant_image_gives_flat_interior() {
        // Only zero padding breaks translation symmetry, so cells away from the border agree.
        let maps = grad_cam(&net(), &Tensor::full(&[3, 32, 32], 0.3), &[2], None).unwrap();
        let m = &maps[0].coarse;
        let centre = m.get(&[4, 4]);
        for i in 3..6 {
            for j in 3..6 {
                assert!((m.get(&[i, j]) - centre).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_bad_stage() {
        let img = Tensor::zeros(&[3, 32, 32]);
        assert!(grad_cam(&net(), &img, &[5], None).is_err());
    }
}
