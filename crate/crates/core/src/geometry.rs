//! Box overlap kernels.

use crate::types::BBox;

/// Affinity between a predicted track box and a detection box, in `[0, 1]`.
pub trait OverlapKernel {
    fn overlap(&self, a: &BBox, b: &BBox) -> f64;
}

/// Plain intersection-over-union.
#[derive(Debug, Clone, Copy, Default)]
pub struct Iou;

impl OverlapKernel for Iou {
    fn overlap(&self, a: &BBox, b: &BBox) -> f64 {
        iou(a, b)
    }
}

/// Area of the open-interval intersection; edge contact yields 0.
pub fn intersection_area(a: &BBox, b: &BBox) -> f64 {
    let iw = a.right().min(b.right()) - a.x.max(b.x);
    let ih = a.bottom().min(b.bottom()) - a.y.max(b.y);
    if iw <= 0.0 || ih <= 0.0 {
        0.0
    } else {
        iw * ih
    }
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = intersection_area(a, b);
    if inter == 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Euclidean distance between box centers.
pub fn center_distance(a: &BBox, b: &BBox) -> f64 {
    let (ax, ay) = a.center();
    let (bx, by) = b.center();
    (ax - bx).hypot(ay - by)
}
