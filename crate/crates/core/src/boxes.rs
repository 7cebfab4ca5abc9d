//! Bounding box annotations and their (C+1)-channel raster encoding.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Axis-aligned box with inclusive-exclusive pixel bounds and a foreground
/// class in 1..=C.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoxAnnotation {
    pub class_id: usize,
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BoxAnnotation {
    pub fn new(class_id: usize, x0: usize, y0: usize, x1: usize, y1: usize) -> Self {
        BoxAnnotation { class_id, x0, y0, x1, y1 }
    }

    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }
}

/// Binary box raster of dims (C+1) x H x W. Channel c >= 1 marks pixels
/// covered by at least one class-c box; channel 0 marks pixels covered by no
/// box of any class.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxMaskTensor {
    pub mask: Tensor,
}

impl BoxMaskTensor {
    pub fn num_classes(&self) -> usize {
        self.mask.dims()[0] - 1
    }

    pub fn height(&self) -> usize {
        self.mask.dims()[1]
    }

    pub fn width(&self) -> usize {
        self.mask.dims()[2]
    }
}

/// Rasterize boxes onto a (C+1) x H x W binary mask. Overlapping boxes of the
/// same class union; different classes mark both foreground channels.
pub fn boxes_to_mask(boxes: &[BoxAnnotation], num_classes: usize, height: usize, width: usize) -> Result<BoxMaskTensor> {
    let mut mask = Tensor::zeros(&[num_classes + 1, height, width]);
    let plane = height * width;
    {
        let data = mask.data_mut();
        for b in boxes {
            if b.class_id == 0 || b.class_id > num_classes {
                return Err(Error::invalid(
                    "boxes_to_mask",
                    format!("class_id {} outside 1..={num_classes}", b.class_id),
                ));
            }
            if b.x0 >= b.x1 || b.y0 >= b.y1 || b.x1 > width || b.y1 > height {
                return Err(Error::invalid(
                    "boxes_to_mask",
                    format!(
                        "box [{},{})x[{},{}) outside {}x{} image or empty",
                        b.x0, b.x1, b.y0, b.y1, width, height
                    ),
                ));
            }
            let ch = b.class_id * plane;
            for y in b.y0..b.y1 {
                let row = ch + y * width;
                for x in b.x0..b.x1 {
                    data[row + x] = 1.0;
                }
            }
        }
        // Background: not covered by any box.
        for p in 0..plane {
            let covered = (1..=num_classes).any(|c| data[c * plane + p] == 1.0);
            data[p] = if covered { 0.0 } else { 1.0 };
        }
    }
    Ok(BoxMaskTensor { mask })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_box_list_is_all_background() {
        let m = boxes_to_mask(&[], 2, 3, 3).unwrap();
        let plane = 9;
        assert!(m.mask.data()[..plane].iter().all(|&v| v == 1.0));
        assert!(m.mask.data()[plane..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn full_cover_clears_background() {
        let m = boxes_to_mask(&[BoxAnnotation::new(1, 0, 0, 4, 4)], 1, 4, 4).unwrap();
        let plane = 16;
        assert!(m.mask.data()[..plane].iter().all(|&v| v == 0.0));
        assert!(m.mask.data()[plane..].iter().all(|&v| v == 1.0));
    }

    #[test]
    fn overlapping_same_class_boxes_union() {
        // Hand-rasterized union of [0,2)x[0,2) and [1,3)x[1,3) on a 4x4 grid.
        let boxes = [BoxAnnotation::new(1, 0, 0, 2, 2), BoxAnnotation::new(1, 1, 1, 3, 3)];
        let m = boxes_to_mask(&boxes, 1, 4, 4).unwrap();
        let mut expect = [0.0f64; 16];
        for (x, y) in [(0, 0), (1, 0), (0, 1), (1, 1), (2, 1), (1, 2), (2, 2)] {
            expect[y * 4 + x] = 1.0;
        }
        assert_eq!(&m.mask.data()[16..32], &expect);
        for p in 0..16 {
            assert_eq!(m.mask.data()[p], 1.0 - expect[p]);
        }
    }

    #[test]
    fn different_classes_both_marked_in_overlap() {
        let boxes = [BoxAnnotation::new(1, 0, 0, 2, 2), BoxAnnotation::new(2, 1, 1, 2, 2)];
        let m = boxes_to_mask(&boxes, 2, 2, 2).unwrap();
        let plane = 4;
        let p = 1 * 2 + 1; // pixel (1,1)
        assert_eq!(m.mask.data()[plane + p], 1.0);
        assert_eq!(m.mask.data()[2 * plane + p], 1.0);
        assert_eq!(m.mask.data()[p], 0.0);
    }

    #[test]
    fn out_of_bounds_box_is_rejected() {
        assert!(boxes_to_mask(&[BoxAnnotation::new(1, 0, 0, 5, 2)], 1, 4, 4).is_err());
        assert!(boxes_to_mask(&[BoxAnnotation::new(3, 0, 0, 2, 2)], 2, 4, 4).is_err());
        assert!(boxes_to_mask(&[BoxAnnotation::new(1, 2, 0, 2, 2)], 1, 4, 4).is_err());
    }
}
