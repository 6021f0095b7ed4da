//! Item image encoding: sub-image split, patch extraction, and the projected
//! token sets the LM consumes. An item yields 5 sub-images (global + four
//! quadrants); each contributes R patch tokens plus a CLS token, and the
//! compact representation keeps only the 5 projected CLS embeddings.

use ndarray::Array2;

use crate::config::VisionConfig;
use crate::error::{Error, Result};
use crate::image::{split_sub_images, Raster};
use crate::model::{bind, project_forward, vision_forward, LoraCtx, Scope, Vlm};
use crate::tensor::Tape;

/// Flatten a raster into `(R, 3*patch^2)` rows, patches in row-major grid
/// order, pixels row-major RGB within each patch.
pub fn patchify(img: &Raster, patch_side: usize) -> Result<Array2<f64>> {
    if img.side % patch_side != 0 {
        return Err(Error::Schema(format!(
            "patch side {patch_side} does not divide image side {}",
            img.side
        )));
    }
    let per_side = img.side / patch_side;
    let dim = 3 * patch_side * patch_side;
    let mut out = Array2::zeros((per_side * per_side, dim));
    for py in 0..per_side {
        for px in 0..per_side {
            let row = py * per_side + px;
            let mut k = 0;
            for y in 0..patch_side {
                for x in 0..patch_side {
                    let rgb = img.get(px * patch_side + x, py * patch_side + y);
                    for c in rgb {
                        out[[row, k]] = c as f64 / 255.0;
                        k += 1;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Patch matrices for the 5 sub-images of one item image.
pub fn sub_image_patches(image: &Raster, vcfg: &VisionConfig) -> Result<Vec<Array2<f64>>> {
    let subs = split_sub_images(image, vcfg.vision_side)?;
    subs.sub_images
        .iter()
        .map(|s| patchify(s, vcfg.patch_side))
        .collect()
}

/// Projected visual tokens of one item: 5 matrices of shape `(R+1, d_lm)`,
/// CLS at row 0 of each.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualTokenSet {
    pub per_sub: Vec<Array2<f64>>,
}

impl VisualTokenSet {
    /// The 5 projected CLS embeddings, one row per sub-image.
    pub fn compact(&self) -> Array2<f64> {
        let d = self.per_sub[0].ncols();
        let mut out = Array2::zeros((self.per_sub.len(), d));
        for (i, m) in self.per_sub.iter().enumerate() {
            out.row_mut(i).assign(&m.row(0));
        }
        out
    }

    /// All projected tokens stacked: `(5*(R+1), d_lm)`.
    pub fn full_concat(&self) -> Array2<f64> {
        let views: Vec<_> = self.per_sub.iter().map(|m| m.view()).collect();
        ndarray::concatenate(ndarray::Axis(0), &views).unwrap()
    }
}

/// Eval-mode encode of one item image through the vision tower + projector,
/// with whatever vision adapters are attached to `vlm`.
pub fn encode_item(vlm: &Vlm, image: &Raster) -> Result<VisualTokenSet> {
    let patches = sub_image_patches(image, &vlm.vcfg)?;
    let mut per_sub = Vec::with_capacity(patches.len());
    for p in &patches {
        let mut tape = Tape::new();
        let bound = bind(
            &mut tape,
            &vlm.params,
            vlm.vision_lora.as_ref(),
            None,
            Scope::Frozen,
        );
        let mut lora = LoraCtx::eval(vlm.vision_lora.as_ref(), None);
        let enc = vision_forward(&mut tape, &bound, &vlm.vcfg, p, &mut lora);
        let projected = project_forward(&mut tape, &bound, enc, &mut lora);
        tape.check_finite(projected, "visual tokens")?;
        per_sub.push(tape.data(projected).clone());
    }
    Ok(VisualTokenSet { per_sub })
}
