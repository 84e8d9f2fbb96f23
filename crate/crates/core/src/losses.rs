//! Training objectives, all expressed on the tape.
//!
//! * autoencoder: `l_pixel + alpha * l_ssim`
//! * fusion: `l_feature + alpha * l_ssim_bar`, where `l_ssim_bar` scores the
//!   fused image against both source bands and `l_feature` pulls every fused
//!   feature scale towards a weighted blend of the two source pyramids.

use crate::metrics::SsimParams;
use crate::model::FeaturePyramid;
use crate::tensor::{Tape, Tensor, TensorError, Var};

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Debug, Clone, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    /// Per-scale weights, one per pyramid level.
    pub omega_m: Vec<f64>,
    pub omega_vi: f64,
    pub omega_ir: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 10.0,
            omega_m: vec![1.0; 3],
            omega_vi: 0.6,
            omega_ir: 0.4,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if !(self.alpha > 0.0) {
            return Err(format!("alpha must be positive, got {}", self.alpha));
        }
        if self.omega_m.iter().any(|w| !(*w >= 0.0)) || !(self.omega_vi >= 0.0) || !(self.omega_ir >= 0.0) {
            return Err("loss weights must be non-negative".into());
        }
        if !(self.omega_vi + self.omega_ir > 0.0) {
            return Err("omega_vi + omega_ir must be positive".into());
        }
        Ok(())
    }
}

/// Scalar terms of a composite loss, kept for logging.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub total: Var,
    /// `l_pixel` or `l_feature`.
    pub primary: Var,
    /// `l_ssim` or `l_ssim_bar` before weighting by alpha.
    pub structural: Var,
}

fn same_shape(tape: &Tape, a: Var, b: Var, what: &str) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(TensorError::Dimension(format!(
            "{what}: {:?} vs {:?}",
            tape.shape(a),
            tape.shape(b)
        )));
    }
    Ok(())
}

/// Squared Frobenius norm of the difference.
pub fn l_pixel(tape: &mut Tape, output: Var, input: Var) -> Result<Var> {
    same_shape(tape, output, input, "l_pixel")?;
    let d = tape.sub(output, input)?;
    let sq = tape.square(d)?;
    Ok(tape.sum(sq))
}

fn as_plane(tape: &mut Tape, x: Var) -> Result<Var> {
    match *tape.shape(x) {
        [1, _, _] => Ok(x),
        [h, w] => tape.reshape(x, &[1, h, w]),
        ref s => Err(TensorError::Dimension(format!(
            "SSIM needs a single-channel plane, got {s:?}"
        ))),
    }
}

/// Differentiable mean SSIM with the default metric constants.
pub fn ssim(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    ssim_with(tape, a, b, &SsimParams::default())
}

pub fn ssim_with(tape: &mut Tape, a: Var, b: Var, p: &SsimParams) -> Result<Var> {
    same_shape(tape, a, b, "ssim")?;
    let a = as_plane(tape, a)?;
    let b = as_plane(tape, b)?;
    let [_, h, w] = *tape.shape(a) else { unreachable!() };
    if h < p.window_size || w < p.window_size {
        return Err(TensorError::Geometry(format!(
            "{h}x{w} image is smaller than the {0}x{0} SSIM window",
            p.window_size
        )));
    }
    let ws = p.window_size;
    let window = tape.constant(Tensor::new(&[1, 1, ws, ws], p.gaussian_2d())?);
    let blur = |tape: &mut Tape, x: Var| tape.conv2d(x, window, 1, 0);

    let mu_a = blur(tape, a)?;
    let mu_b = blur(tape, b)?;
    let aa = tape.mul(a, a)?;
    let bb = tape.mul(b, b)?;
    let ab = tape.mul(a, b)?;
    let e_aa = blur(tape, aa)?;
    let e_bb = blur(tape, bb)?;
    let e_ab = blur(tape, ab)?;

    let mu_aa = tape.mul(mu_a, mu_a)?;
    let mu_bb = tape.mul(mu_b, mu_b)?;
    let mu_ab = tape.mul(mu_a, mu_b)?;
    let var_a = tape.sub(e_aa, mu_aa)?;
    let var_b = tape.sub(e_bb, mu_bb)?;
    let cov = tape.sub(e_ab, mu_ab)?;

    let lum_num = tape.mul_scalar(mu_ab, 2.0);
    let lum_num = tape.add_scalar(lum_num, p.c1());
    let cs_num = tape.mul_scalar(cov, 2.0);
    let cs_num = tape.add_scalar(cs_num, p.c2());
    let lum_den = tape.add(mu_aa, mu_bb)?;
    let lum_den = tape.add_scalar(lum_den, p.c1());
    let cs_den = tape.add(var_a, var_b)?;
    let cs_den = tape.add_scalar(cs_den, p.c2());

    let num = tape.mul(lum_num, cs_num)?;
    let den = tape.mul(lum_den, cs_den)?;
    let map = tape.div(num, den)?;
    Ok(tape.mean(map))
}

fn one_minus(tape: &mut Tape, x: Var) -> Var {
    let neg = tape.mul_scalar(x, -1.0);
    tape.add_scalar(neg, 1.0)
}

/// `1 - SSIM(output, input)`, in `[0, 2]`.
pub fn l_ssim(tape: &mut Tape, output: Var, input: Var) -> Result<Var> {
    let s = ssim(tape, output, input)?;
    Ok(one_minus(tape, s))
}

pub fn l_ae_terms(tape: &mut Tape, output: Var, input: Var, w: &LossWeights) -> Result<LossTerms> {
    let pixel = l_pixel(tape, output, input)?;
    let structural = l_ssim(tape, output, input)?;
    let weighted = tape.mul_scalar(structural, w.alpha);
    let total = tape.add(pixel, weighted)?;
    Ok(LossTerms {
        total,
        primary: pixel,
        structural,
    })
}

/// Autoencoder objective `l_pixel + alpha * l_ssim`.
pub fn l_ae(tape: &mut Tape, output: Var, input: Var, w: &LossWeights) -> Result<Var> {
    Ok(l_ae_terms(tape, output, input, w)?.total)
}

/// `(1 - SSIM(f, v))^2 + (1 - SSIM(f, i))^2`, in `[0, 8]`.
pub fn l_ssim_bar(tape: &mut Tape, fused: Var, vis: Var, ir: Var) -> Result<Var> {
    same_shape(tape, fused, vis, "l_ssim_bar")?;
    same_shape(tape, fused, ir, "l_ssim_bar")?;
    let dv = l_ssim(tape, fused, vis)?;
    let di = l_ssim(tape, fused, ir)?;
    let sv = tape.square(dv)?;
    let si = tape.square(di)?;
    tape.add(sv, si)
}

/// Weighted squared distance of each fused scale to the blended target
/// `omega_vi * phi_vi + omega_ir * phi_ir`.
pub fn l_feature(
    tape: &mut Tape,
    fused: &FeaturePyramid,
    vis: &FeaturePyramid,
    ir: &FeaturePyramid,
    w: &LossWeights,
) -> Result<Var> {
    let m = fused.scales.len();
    if vis.scales.len() != m || ir.scales.len() != m {
        return Err(TensorError::Dimension(format!(
            "pyramid depths {} / {} / {} differ",
            m,
            vis.scales.len(),
            ir.scales.len()
        )));
    }
    if w.omega_m.len() != m {
        return Err(TensorError::Dimension(format!(
            "{} per-scale weights for {m} scales",
            w.omega_m.len()
        )));
    }
    let mut total: Option<Var> = None;
    for s in 0..m {
        let (f, v, i) = (fused.scales[s], vis.scales[s], ir.scales[s]);
        same_shape(tape, f, v, "l_feature")?;
        same_shape(tape, f, i, "l_feature")?;
        let wv = tape.mul_scalar(v, w.omega_vi);
        let wi = tape.mul_scalar(i, w.omega_ir);
        let target = tape.add(wv, wi)?;
        let dist = l_pixel(tape, f, target)?;
        let term = tape.mul_scalar(dist, w.omega_m[s]);
        total = Some(match total {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
    }
    total.ok_or_else(|| TensorError::Dimension("empty pyramid".into()))
}

#[allow(clippy::too_many_arguments)]
pub fn l_fuse_terms(
    tape: &mut Tape,
    fused_img: Var,
    vis_img: Var,
    ir_img: Var,
    fused_pyr: &FeaturePyramid,
    vis_pyr: &FeaturePyramid,
    ir_pyr: &FeaturePyramid,
    w: &LossWeights,
) -> Result<LossTerms> {
    let feature = l_feature(tape, fused_pyr, vis_pyr, ir_pyr, w)?;
    let structural = l_ssim_bar(tape, fused_img, vis_img, ir_img)?;
    let weighted = tape.mul_scalar(structural, w.alpha);
    let total = tape.add(feature, weighted)?;
    Ok(LossTerms {
        total,
        primary: feature,
        structural,
    })
}

/// Fusion objective `l_feature + alpha * l_ssim_bar`.
#[allow(clippy::too_many_arguments)]
pub fn l_fuse(
    tape: &mut Tape,
    fused_img: Var,
    vis_img: Var,
    ir_img: Var,
    fused_pyr: &FeaturePyramid,
    vis_pyr: &FeaturePyramid,
    ir_pyr: &FeaturePyramid,
    w: &LossWeights,
) -> Result<Var> {
    Ok(l_fuse_terms(tape, fused_img, vis_img, ir_img, fused_pyr, vis_pyr, ir_pyr, w)?.total)
}
