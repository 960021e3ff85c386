use ndarray::{concatenate, s, Array2, Array3, Axis};

use super::DiffusionError;
use crate::codec::{encode_rgbd, interpolate_mask, CodecError, LatentCodec, NormalizedDepth};
use crate::geom::PartialView;

/// Latent conditioning for one view: partial image and depth latents plus
/// their soft validity masks at latent resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionPack {
    /// `z_{i,p}`: `(image_channels, h, w)`
    pub image: Array3<f64>,
    /// `z_{d,p}`: `(depth_channels, h, w)`
    pub depth: Array3<f64>,
    /// `z_{i,m}` in `[0, 1]`
    pub image_mask: Array2<f64>,
    /// `z_{d,m}` in `[0, 1]`
    pub depth_mask: Array2<f64>,
}

impl ConditionPack {
    /// Encodes a partial view whose depth has already been normalized.
    pub fn from_partial(
        codec: &dyn LatentCodec,
        view: &PartialView,
        depth: &NormalizedDepth,
    ) -> Result<Self, CodecError> {
        let latent = encode_rgbd(codec, &view.rgb, depth)?;
        let (w, h, f) = (view.rgb.width, view.rgb.height, codec.factor());
        Ok(Self {
            image: latent.image,
            depth: latent.depth,
            image_mask: interpolate_mask(&view.rgb_valid, w, h, f)?,
            depth_mask: interpolate_mask(view.depth_valid(), w, h, f)?,
        })
    }

    /// All-zero conditioning ("nothing observed").
    pub fn zeros(image_channels: usize, depth_channels: usize, height: usize, width: usize) -> Self {
        Self {
            image: Array3::zeros((image_channels, height, width)),
            depth: Array3::zeros((depth_channels, height, width)),
            image_mask: Array2::zeros((height, width)),
            depth_mask: Array2::zeros((height, width)),
        }
    }

    pub fn spatial(&self) -> (usize, usize) {
        let (_, h, w) = self.image.dim();
        (h, w)
    }

    /// Shape of the `z_0` this pack conditions: image plus depth channels.
    pub fn latent_shape(&self) -> (usize, usize, usize) {
        let (h, w) = self.spatial();
        (self.image.dim().0 + self.depth.dim().0, h, w)
    }

    pub fn channels(&self) -> usize {
        self.image.dim().0 + self.depth.dim().0 + 2
    }

    fn check(&self) -> Result<(), DiffusionError> {
        let (h, w) = self.spatial();
        let (_, dh, dw) = self.depth.dim();
        if (dh, dw) != (h, w) || self.image_mask.dim() != (h, w) || self.depth_mask.dim() != (h, w) {
            return Err(DiffusionError::ShapeMismatch("condition channels differ in spatial shape".into()));
        }
        Ok(())
    }
}

/// Stacks `[z_t | z_{i,p} | z_{d,p} | z_{i,m} | z_{d,m}]` along channels.
/// With the identity codec that is `4 + 3 + 1 + 1 + 1 = 10` channels.
pub fn pack_input(z_t: &Array3<f64>, cond: &ConditionPack) -> Result<Array3<f64>, DiffusionError> {
    cond.check()?;
    let (c, h, w) = z_t.dim();
    if (h, w) != cond.spatial() || c != cond.latent_shape().0 {
        return Err(DiffusionError::ShapeMismatch(format!(
            "z_t is {c}x{h}x{w}, condition expects {:?}",
            cond.latent_shape()
        )));
    }
    let im = cond.image_mask.view().insert_axis(Axis(0));
    let dm = cond.depth_mask.view().insert_axis(Axis(0));
    Ok(concatenate(Axis(0), &[z_t.view(), cond.image.view(), cond.depth.view(), im, dm]).expect("checked shapes"))
}

/// Inverse of [`pack_input`].
pub fn unpack_input(
    packed: &Array3<f64>,
    image_channels: usize,
    depth_channels: usize,
) -> Result<(Array3<f64>, ConditionPack), DiffusionError> {
    let latent = image_channels + depth_channels;
    let (c, _, _) = packed.dim();
    if c != 2 * latent + 2 {
        return Err(DiffusionError::ShapeMismatch(format!(
            "packed tensor has {c} channels, expected {}",
            2 * latent + 2
        )));
    }
    let z_t = packed.slice(s![0..latent, .., ..]).to_owned();
    let image = packed.slice(s![latent..latent + image_channels, .., ..]).to_owned();
    let depth = packed.slice(s![latent + image_channels..2 * latent, .., ..]).to_owned();
    let image_mask = packed.slice(s![2 * latent, .., ..]).to_owned();
    let depth_mask = packed.slice(s![2 * latent + 1, .., ..]).to_owned();
    Ok((
        z_t,
        ConditionPack {
            image,
            depth,
            image_mask,
            depth_mask,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_pack() -> (Array3<f64>, ConditionPack) {
        let z = Array3::from_shape_fn((4, 8, 8), |(c, y, x)| (c * 64 + y * 8 + x) as f64);
        let cond = ConditionPack {
            image: Array3::from_elem((3, 8, 8), 0.5),
            depth: Array3::from_elem((1, 8, 8), -0.25),
            image_mask: Array2::from_elem((8, 8), 1.0),
            depth_mask: Array2::from_elem((8, 8), 0.75),
        };
        (z, cond)
    }

    #[test]
    fn packs_ten_channels_in_fixed_order() {
        let (z, cond) = sample_pack();
        let packed = pack_input(&z, &cond).unwrap();
        assert_eq!(packed.dim(), (10, 8, 8));
        assert_eq!(packed.slice(s![0..4, .., ..]), z);
        assert_eq!(packed[[4, 1, 1]], 0.5);
        assert_eq!(packed[[7, 1, 1]], -0.25);
        assert_eq!(packed[[8, 1, 1]], 1.0);
        assert_eq!(packed[[9, 1, 1]], 0.75);
        let (z2, c2) = unpack_input(&packed, 3, 1).unwrap();
        assert_eq!(z2, z);
        assert_eq!(c2, cond);
    }

    #[test]
    fn zero_conditioning_is_zero() {
        let (z, _) = sample_pack();
        let packed = pack_input(&z, &ConditionPack::zeros(3, 1, 8, 8)).unwrap();
        assert!(packed.slice(s![4..10, .., ..]).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let (_, cond) = sample_pack();
        assert!(pack_input(&Array3::zeros((4, 4, 8)), &cond).is_err());
        assert!(pack_input(&Array3::zeros((3, 8, 8)), &cond).is_err());
    }
}
