use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, Normal};
use rayon::prelude::*;

use super::{Owner, RenderedFrame, SceneSpec, SyntheticScene, CATEGORIES};
use crate::affordance::Affordance;
use crate::detection::{Channel, Detection2D, FrameDetections};
use crate::geom::{BBox2D, PixelMask};

pub const FEATURE_DIM: usize = 32;
const OBJECT_CLASS_OFFSET: usize = 8;

/// Unit basis vector of a class index.
pub fn feature_basis(class: usize) -> Vec<f64> {
    let mut v = vec![0.0; FEATURE_DIM];
    v[class] = 1.0;
    v
}

fn object_class(category: &str) -> usize {
    OBJECT_CLASS_OFFSET + CATEGORIES.iter().position(|c| *c == category).unwrap_or(0)
}

fn noisy_feature(class: usize, sigma: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut v = feature_basis(class);
    if sigma > 0.0 {
        let n = Normal::new(0.0, sigma).expect("finite sigma");
        for x in &mut v {
            *x += n.sample(rng);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        for x in &mut v {
            *x /= norm;
        }
    }
    v
}

/// Applies bbox jitter and clips the mask to the jittered box. `None` if nothing is left.
fn detection(
    pixels: &[(u32, u32)],
    width: u32,
    height: u32,
    label: String,
    class: usize,
    channel: Channel,
    spec: &SceneSpec,
    rng: &mut ChaCha8Rng,
) -> Option<Detection2D> {
    let noise = &spec.noise;
    let tight = PixelMask::from_pixels(width, height, pixels.iter().copied())
        .ok()?
        .bbox()?;
    let bbox = if noise.bbox_jitter_px > 0.0 {
        let n = Normal::new(0.0, noise.bbox_jitter_px).expect("finite sigma");
        let mut e = [tight.x_min, tight.y_min, tight.x_max, tight.y_max].map(|v| v + n.sample(rng));
        e[0] = e[0].clamp(0.0, width as f64);
        e[2] = e[2].clamp(0.0, width as f64);
        e[1] = e[1].clamp(0.0, height as f64);
        e[3] = e[3].clamp(0.0, height as f64);
        BBox2D::new(
            e[0].min(e[2]),
            e[1].min(e[3]),
            e[0].max(e[2]),
            e[1].max(e[3]),
        )
    } else {
        tight
    };
    let kept = pixels.iter().copied().filter(|&(x, y)| {
        let (cx, cy) = (x as f64 + 0.5, y as f64 + 0.5);
        cx >= bbox.x_min && cx <= bbox.x_max && cy >= bbox.y_min && cy <= bbox.y_max
    });
    let mask = PixelMask::from_pixels(width, height, kept).ok()?;
    if mask.is_empty() || !bbox.is_valid() {
        return None;
    }
    let confidence = match noise.confidence_beta {
        Some((a, b)) => Beta::new(a, b).expect("positive beta").sample(rng),
        None => 1.0,
    };
    Some(Detection2D {
        bbox,
        label,
        confidence,
        mask,
        feature: noisy_feature(class, noise.feature_sigma, rng),
        channel,
    })
}

fn emit_frame(scene: &SyntheticScene, frame: &RenderedFrame, spec: &SceneSpec) -> FrameDetections {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0xd1b5_4a32_d192_ed03);
    rng.set_stream(frame.index as u64);
    let (w, h) = (frame.intrinsics.width, frame.intrinsics.height);
    let owned = frame.owner_pixels();
    let pixels_of = |o: Owner| owned.get(&o).map(Vec::as_slice).unwrap_or(&[]);
    let mut out = FrameDetections::empty(frame.index);
    for o in &scene.inventory.objects {
        let mut px: Vec<(u32, u32)> = pixels_of(Owner::Furniture(o.id)).to_vec();
        for &e in &o.elements {
            px.extend_from_slice(pixels_of(Owner::Element(e)));
        }
        if px.len() < spec.min_object_pixels || rng.gen::<f64>() < spec.noise.drop_prob {
            continue;
        }
        let class = object_class(&o.category);
        if let Some(d) = detection(
            &px,
            w,
            h,
            o.category.clone(),
            class,
            Channel::Object,
            spec,
            &mut rng,
        ) {
            out.objects.push(d);
        }
    }
    for e in &scene.inventory.elements {
        let px = pixels_of(Owner::Element(e.id));
        if px.len() < spec.min_fe_pixels || rng.gen::<f64>() < spec.noise.drop_prob {
            continue;
        }
        let label = e.affordance.name().to_string();
        let class = e.affordance.index();
        if let Some(d) = detection(
            px,
            w,
            h,
            label,
            class,
            Channel::FunctionalElement,
            spec,
            &mut rng,
        ) {
            out.functional_elements.push(d);
        }
    }
    out
}

/// Detections derived from the instance buffers. Every frame draws from its
/// own random stream, so results do not depend on scheduling.
pub fn emit_detections(
    scene: &SyntheticScene,
    frames: &[RenderedFrame],
    spec: &SceneSpec,
) -> Vec<FrameDetections> {
    frames
        .par_iter()
        .map(|f| emit_frame(scene, f, spec))
        .collect()
}

#[allow(dead_code)]
fn _assert_affordance_classes_fit() {
    const _: () = assert!(Affordance::ALL.len() <= OBJECT_CLASS_OFFSET);
    const _: () = assert!(OBJECT_CLASS_OFFSET + CATEGORIES.len() <= FEATURE_DIM);
}
