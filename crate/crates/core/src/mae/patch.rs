use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn check_tiling(t: usize, f: usize, patch_t: usize, patch_f: usize) -> Result<()> {
    if patch_t == 0 || patch_f == 0 || !t.is_multiple_of(patch_t) || !f.is_multiple_of(patch_f) {
        return Err(Error::Dimension(format!(
            "patch {patch_t}x{patch_f} does not tile a {t}x{f} spectrogram"
        )));
    }
    Ok(())
}

/// Splits a `[T, F]` spectrogram into non-overlapping `patch_t x patch_f`
/// tiles. Patches are ordered time-major, frequency-minor and each one is
/// flattened row-major, giving `[n_p, patch_t * patch_f]`.
pub fn patchify(spec: &Tensor, patch_t: usize, patch_f: usize) -> Result<Tensor> {
    if spec.rank() != 2 {
        return Err(Error::Dimension(format!(
            "patchify expects [T, F], got {:?}",
            spec.shape()
        )));
    }
    let (t, f) = (spec.rows(), spec.cols());
    check_tiling(t, f, patch_t, patch_f)?;
    let (gt, gf) = (t / patch_t, f / patch_f);
    let mut out = Vec::with_capacity(t * f);
    for pi in 0..gt {
        for pj in 0..gf {
            for dt in 0..patch_t {
                let row = spec.row(pi * patch_t + dt);
                out.extend_from_slice(&row[pj * patch_f..(pj + 1) * patch_f]);
            }
        }
    }
    Tensor::new(&[gt * gf, patch_t * patch_f], out)
}

/// Inverse of [`patchify`].
pub fn unpatchify(
    patches: &Tensor,
    t: usize,
    f: usize,
    patch_t: usize,
    patch_f: usize,
) -> Result<Tensor> {
    check_tiling(t, f, patch_t, patch_f)?;
    let (gt, gf) = (t / patch_t, f / patch_f);
    if patches.shape() != [gt * gf, patch_t * patch_f] {
        return Err(Error::Dimension(format!(
            "expected [{}, {}] patches, got {:?}",
            gt * gf,
            patch_t * patch_f,
            patches.shape()
        )));
    }
    let mut out = vec![0.0; t * f];
    for pi in 0..gt {
        for pj in 0..gf {
            let p = patches.row(pi * gf + pj);
            for dt in 0..patch_t {
                let dst = (pi * patch_t + dt) * f + pj * patch_f;
                out[dst..dst + patch_f].copy_from_slice(&p[dt * patch_f..(dt + 1) * patch_f]);
            }
        }
    }
    Tensor::new(&[t, f], out)
}

/// Fixed 1-D sinusoidal table over the flattened patch index:
/// `pe[p, 2i] = sin(p / 10000^(2i/width))`, `pe[p, 2i+1] = cos(..)`.
pub fn sincos_pos_embed(n: usize, width: usize) -> Result<Tensor> {
    if width == 0 || !width.is_multiple_of(2) {
        return Err(Error::Contract(format!(
            "positional width must be even and positive, got {width}"
        )));
    }
    if n == 0 {
        return Err(Error::Contract(
            "positional table needs at least one row".into(),
        ));
    }
    let mut out = Vec::with_capacity(n * width);
    for p in 0..n {
        for i in 0..width / 2 {
            let freq = 10000f64.powf(-((2 * i) as f64) / width as f64);
            let a = p as f64 * freq;
            out.push(a.sin());
            out.push(a.cos());
        }
    }
    Tensor::new(&[n, width], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_patch_counts() {
        let spec = Tensor::zeros(&[200, 80]);
        assert_eq!(patchify(&spec, 4, 16).unwrap().shape(), &[250, 64]);
        assert_eq!(patchify(&spec, 5, 5).unwrap().shape(), &[640, 25]);
        assert!(matches!(patchify(&spec, 3, 16), Err(Error::Dimension(_))));
    }

    #[test]
    fn constant_spectrogram_gives_constant_patches() {
        let spec = Tensor::full(&[8, 8], 2.5);
        let p = patchify(&spec, 2, 4).unwrap();
        assert!(p.data().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn patch_order_is_time_major() {
        let spec = Tensor::new(&[4, 4], (0..16).map(|v| v as f64).collect()).unwrap();
        let p = patchify(&spec, 2, 2).unwrap();
        assert_eq!(p.row(0), &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(p.row(1), &[2.0, 3.0, 6.0, 7.0]);
        assert_eq!(p.row(2), &[8.0, 9.0, 12.0, 13.0]);
    }

    #[test]
    fn first_position_row() {
        let pe = sincos_pos_embed(4, 6).unwrap();
        assert_eq!(pe.row(0), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        assert!(pe.data().iter().all(|v| v.abs() <= 1.0));
        assert!(matches!(sincos_pos_embed(4, 5), Err(Error::Contract(_))));
    }
}
