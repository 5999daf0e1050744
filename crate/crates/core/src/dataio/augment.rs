use rand::Rng;

use crate::density::HeadAnnotations;
use crate::tensor::Tensor;

/// One augmented training crop.
#[derive(Debug, Clone)]
pub struct Patch {
    pub image: Tensor<f32>,
    pub annotations: HeadAnnotations,
    /// Top-left corner in the source image.
    pub origin: (usize, usize),
    pub mirrored: bool,
}

fn crop(image: &Tensor<f32>, x0: usize, y0: usize, w: usize, h: usize) -> Tensor<f32> {
    let (iw, c) = (image.shape()[1], image.shape()[2]);
    let src = image.data();
    let mut data = Vec::with_capacity(w * h * c);
    for r in y0..y0 + h {
        let start = (r * iw + x0) * c;
        data.extend_from_slice(&src[start..start + w * c]);
    }
    Tensor::from_vec(&[h, w, c], data).expect("crop extents")
}

fn mirror(image: &Tensor<f32>) -> Tensor<f32> {
    let (h, w, c) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let src = image.data();
    let mut data = Vec::with_capacity(src.len());
    for r in 0..h {
        for x in (0..w).rev() {
            let start = (r * w + x) * c;
            data.extend_from_slice(&src[start..start + c]);
        }
    }
    Tensor::from_vec(&[h, w, c], data).expect("mirror extents")
}

fn cut(image: &Tensor<f32>, ann: &HeadAnnotations, x0: usize, y0: usize, w: usize, h: usize) -> Patch {
    let (fx0, fy0) = (x0 as f64, y0 as f64);
    let (fx1, fy1) = ((x0 + w) as f64, (y0 + h) as f64);
    let points = ann
        .points
        .iter()
        .filter(|p| p[0] >= fx0 && p[0] < fx1 && p[1] >= fy0 && p[1] < fy1)
        .map(|p| [p[0] - fx0, p[1] - fy0])
        .collect();
    Patch {
        image: crop(image, x0, y0, w, h),
        annotations: HeadAnnotations { points, width: w, height: h },
        origin: (x0, y0),
        mirrored: false,
    }
}

fn flip(p: &Patch) -> Patch {
    let w = p.annotations.width as f64;
    let points = p.annotations.points.iter().map(|q| [(w - 1.0 - q[0]).max(0.0), q[1]]).collect();
    Patch {
        image: mirror(&p.image),
        annotations: HeadAnnotations { points, ..p.annotations.clone() },
        origin: p.origin,
        mirrored: true,
    }
}

/// Eighteen crops of an annotated still image: the four quadrants, five
/// half-size crops at uniform random positions, and the horizontal mirror of
/// each of those nine.
///
/// For odd extents the right and bottom quadrants take the extra pixel so the
/// quadrants still tile the image exactly; the random crops use the floor.
/// Images smaller than 2x2 have empty quadrants and are returned unchanged
/// as a single patch and its mirror.
pub fn augment_patches<R: Rng + ?Sized>(image: &Tensor<f32>, ann: &HeadAnnotations, rng: &mut R) -> Vec<Patch> {
    let (h, w) = (image.shape()[0], image.shape()[1]);
    if h < 2 || w < 2 {
        let whole = cut(image, ann, 0, 0, w, h);
        let m = flip(&whole);
        return vec![whole, m];
    }
    let (hw, hh) = (w / 2, h / 2);
    let mut base = vec![
        cut(image, ann, 0, 0, hw, hh),
        cut(image, ann, hw, 0, w - hw, hh),
        cut(image, ann, 0, hh, hw, h - hh),
        cut(image, ann, hw, hh, w - hw, h - hh),
    ];
    for _ in 0..5 {
        let x0 = rng.gen_range(0..=w - hw);
        let y0 = rng.gen_range(0..=h - hh);
        base.push(cut(image, ann, x0, y0, hw, hh));
    }
    let mirrored: Vec<Patch> = base.iter().map(flip).collect();
    base.extend(mirrored);
    base
}
