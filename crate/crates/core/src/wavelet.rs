//! Orthonormal Haar wavelet analysis, low-frequency extraction, latent
//! resizing, and the low-frequency alignment loss with its analytic
//! gradient.
//!
//! The gradient treats the noise prediction as constant with respect to the
//! noisy latent, so the clean-estimate chain contributes the scalar factor
//! `1 / sqrt(alpha_bar_t)`. The loss itself is the plain sum of squared
//! differences of the low-frequency subbands.

use crate::error::{Error, Result};
use crate::scheduler::NoiseSchedule;
use crate::types::{Grid, Latent};

/// One level of 2-D Haar analysis: four half-resolution subbands.
#[derive(Debug, Clone)]
pub struct WaveletDecomposition {
    pub ll: Grid,
    pub lh: Grid,
    pub hl: Grid,
    pub hh: Grid,
}

/// Single-level orthonormal Haar analysis. Per 2x2 block `[a b; c d]`:
/// `ll=(a+b+c+d)/2`, `lh=(a-b+c-d)/2`, `hl=(a+b-c-d)/2`, `hh=(a-b-c+d)/2`.
pub fn haar_analysis(x: &Grid) -> Result<WaveletDecomposition> {
    if !x.height.is_multiple_of(2) || !x.width.is_multiple_of(2) {
        return Err(Error::Argument(format!(
            "haar_analysis requires even spatial dims, got {}x{}",
            x.height, x.width
        )));
    }
    let (hh2, ww2) = (x.height / 2, x.width / 2);
    let mut ll = Grid::zeros(hh2, ww2);
    let mut lh = Grid::zeros(hh2, ww2);
    let mut hl = Grid::zeros(hh2, ww2);
    let mut hh = Grid::zeros(hh2, ww2);
    for y in 0..hh2 {
        for x2 in 0..ww2 {
            let a = x.get(2 * y, 2 * x2);
            let b = x.get(2 * y, 2 * x2 + 1);
            let c = x.get(2 * y + 1, 2 * x2);
            let d = x.get(2 * y + 1, 2 * x2 + 1);
            ll.set(y, x2, (a + b + c + d) / 2.0);
            lh.set(y, x2, (a - b + c - d) / 2.0);
            hl.set(y, x2, (a + b - c - d) / 2.0);
            hh.set(y, x2, (a - b - c + d) / 2.0);
        }
    }
    Ok(WaveletDecomposition { ll, lh, hl, hh })
}

/// Exact inverse of [`haar_analysis`].
pub fn haar_synthesis(d: &WaveletDecomposition) -> Result<Grid> {
    let (h, w) = (d.ll.height, d.ll.width);
    for (name, band) in [("lh", &d.lh), ("hl", &d.hl), ("hh", &d.hh)] {
        if band.height != h || band.width != w {
            return Err(Error::Shape(format!(
                "subband {name} is {}x{}, expected {h}x{w}",
                band.height, band.width
            )));
        }
    }
    let mut out = Grid::zeros(h * 2, w * 2);
    for y in 0..h {
        for x in 0..w {
            let (ll, lh, hl, hh) = (
                d.ll.get(y, x),
                d.lh.get(y, x),
                d.hl.get(y, x),
                d.hh.get(y, x),
            );
            out.set(2 * y, 2 * x, (ll + lh + hl + hh) / 2.0);
            out.set(2 * y, 2 * x + 1, (ll - lh + hl - hh) / 2.0);
            out.set(2 * y + 1, 2 * x, (ll + lh - hl - hh) / 2.0);
            out.set(2 * y + 1, 2 * x + 1, (ll - lh - hl + hh) / 2.0);
        }
    }
    Ok(out)
}

/// The LL subband after `levels` recursive analyses of the LL chain.
/// Requires dims divisible by `2^levels`.
pub fn low_frequency(x: &Grid, levels: usize) -> Result<Grid> {
    let div = 1usize << levels;
    if !x.height.is_multiple_of(div) || !x.width.is_multiple_of(div) {
        return Err(Error::Argument(format!(
            "low_frequency at {levels} levels requires dims divisible by {div}, got {}x{}",
            x.height, x.width
        )));
    }
    let mut cur = x.clone();
    for _ in 0..levels {
        cur = haar_analysis(&cur)?.ll;
    }
    Ok(cur)
}

/// Replicates the last row/column so both dims become even.
fn pad_to_even(x: &Grid) -> Grid {
    let h = x.height + x.height % 2;
    let w = x.width + x.width % 2;
    if h == x.height && w == x.width {
        return x.clone();
    }
    Grid::from_fn(h, w, |y, xx| {
        x.get(y.min(x.height - 1), xx.min(x.width - 1))
    })
}

/// Low-frequency chain that tolerates odd dims by edge-replicating to even
/// before each analysis level.
fn low_frequency_padded(x: &Grid, levels: usize) -> Result<Grid> {
    let mut cur = x.clone();
    for _ in 0..levels {
        cur = haar_analysis(&pad_to_even(&cur))?.ll;
    }
    Ok(cur)
}

/// Dims of the low-frequency chain for an input of `(h, w)`, including any
/// padding applied per level.
fn lf_dims(mut h: usize, mut w: usize, levels: usize) -> Vec<(usize, usize)> {
    let mut dims = vec![(h, w)];
    for _ in 0..levels {
        h = (h + h % 2) / 2;
        w = (w + w % 2) / 2;
        dims.push((h, w));
    }
    dims
}

/// Adjoint of the low-frequency operator: embeds `y` as the LL subband with
/// zero detail bands and synthesizes back level by level. Rows and columns
/// introduced by padding are stripped from the output.
pub fn adjoint_low_frequency(
    y: &Grid,
    levels: usize,
    target_height: usize,
    target_width: usize,
) -> Result<Grid> {
    let dims = lf_dims(target_height, target_width, levels);
    let (lh, lw) = dims[levels];
    if y.height != lh || y.width != lw {
        return Err(Error::Shape(format!(
            "adjoint input is {}x{}, expected {lh}x{lw} for a {target_height}x{target_width} target",
            y.height, y.width
        )));
    }
    let mut cur = y.clone();
    for level in (0..levels).rev() {
        let (th, tw) = dims[level];
        let zero = Grid::zeros(cur.height, cur.width);
        let full = haar_synthesis(&WaveletDecomposition {
            ll: cur,
            lh: zero.clone(),
            hl: zero.clone(),
            hh: zero,
        })?;
        cur = if full.height == th && full.width == tw {
            full
        } else {
            Grid::from_fn(th, tw, |yy, xx| full.get(yy, xx))
        };
    }
    Ok(cur)
}

/// Per-channel low-frequency extraction of a latent (padding-tolerant).
pub fn low_frequency_latent(z: &Latent, levels: usize) -> Result<Latent> {
    let grids = (0..z.channels)
        .map(|c| low_frequency_padded(&z.channel(c), levels))
        .collect::<Result<Vec<_>>>()?;
    Latent::from_channels(grids)
}

/// Bilinear resize of a latent, per channel.
pub fn resize(z: &Latent, target_height: usize, target_width: usize) -> Result<Latent> {
    if target_height == 0 || target_width == 0 {
        return Err(Error::Argument("resize target must be positive".into()));
    }
    let grids = (0..z.channels)
        .map(|c| z.channel(c).resize_bilinear(target_height, target_width))
        .collect();
    Latent::from_channels(grids)
}

/// Sum of squared differences over two same-shape latents.
pub fn sum_squared_diff(a: &Latent, b: &Latent) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::Shape(format!(
            "sum_squared_diff operands differ: {:?} vs {:?}",
            a.shape_of(),
            b.shape_of()
        )));
    }
    Ok(a.data
        .iter()
        .zip(b.data.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum())
}

/// Structure-alignment loss: squared norm of the difference between the
/// low-frequency components of the two latents. `z0_low` must already be
/// resized to `z0_hat_high`'s shape.
pub fn gsp_loss(z0_low: &Latent, z0_hat_high: &Latent, levels: usize) -> Result<f64> {
    if !z0_low.same_shape(z0_hat_high) {
        return Err(Error::Shape(format!(
            "gsp_loss: z0_low is {:?}, z0_hat_high is {:?} (resize first)",
            z0_low.shape_of(),
            z0_hat_high.shape_of()
        )));
    }
    let a = low_frequency_latent(z0_low, levels)?;
    let b = low_frequency_latent(z0_hat_high, levels)?;
    sum_squared_diff(&a, &b)
}

/// Gradient of [`gsp_loss`] with respect to the noisy latent that produced
/// `z0_hat_high`, under the frozen-noise-prediction convention:
/// `(2 / sqrt(alpha_bar_t)) * Adjoint_LL(LF(z0_hat_high) - LF(z0_low))`.
pub fn gsp_gradient(
    z0_low: &Latent,
    z0_hat_high: &Latent,
    t: usize,
    sched: &NoiseSchedule,
    levels: usize,
) -> Result<Latent> {
    if t == 0 {
        return Err(Error::Argument("gsp_gradient is undefined at t = 0".into()));
    }
    if !z0_low.same_shape(z0_hat_high) {
        return Err(Error::Shape(format!(
            "gsp_gradient: z0_low is {:?}, z0_hat_high is {:?}",
            z0_low.shape_of(),
            z0_hat_high.shape_of()
        )));
    }
    let lf_hat = low_frequency_latent(z0_hat_high, levels)?;
    let lf_low = low_frequency_latent(z0_low, levels)?;
    gsp_gradient_from_lf(&lf_hat, &lf_low, t, sched, levels, z0_hat_high.shape_of())
}

/// Gradient from precomputed low-frequency components. `shape` is the
/// (channels, height, width) of the latent the gradient applies to.
pub fn gsp_gradient_from_lf(
    lf_hat: &Latent,
    lf_target: &Latent,
    t: usize,
    sched: &NoiseSchedule,
    levels: usize,
    shape: (usize, usize, usize),
) -> Result<Latent> {
    if !lf_hat.same_shape(lf_target) {
        return Err(Error::Shape(format!(
            "gsp gradient: lf_hat is {:?}, lf_target is {:?}",
            lf_hat.shape_of(),
            lf_target.shape_of()
        )));
    }
    let (channels, height, width) = shape;
    let scale = 2.0 / sched.alpha_bar(t).sqrt();
    let grids = (0..channels)
        .map(|c| {
            let residual = Grid::from_fn(lf_hat.height, lf_hat.width, |y, x| {
                lf_hat.get(c, y, x) - lf_target.get(c, y, x)
            });
            adjoint_low_frequency(&residual, levels, height, width)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut grad = Latent::from_channels(grids)?;
    for v in grad.data.iter_mut() {
        *v *= scale;
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scheduler::{build_schedule, predict_z0};
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn random_grid(h: usize, w: usize, seed: u64) -> Grid {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let z = Latent::gaussian(1, h, w, &mut rng);
        z.channel(0)
    }

    #[test]
    fn analysis_of_ones_block() {
        let g = Grid::from_fn(2, 2, |_, _| 1.0);
        let d = haar_analysis(&g).unwrap();
        assert_eq!(d.ll.get(0, 0), 2.0);
        assert_eq!(d.lh.get(0, 0), 0.0);
        assert_eq!(d.hl.get(0, 0), 0.0);
        assert_eq!(d.hh.get(0, 0), 0.0);
    }

    #[test]
    fn analysis_of_identity_block() {
        let g = Grid::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let d = haar_analysis(&g).unwrap();
        assert_eq!(d.ll.get(0, 0), 1.0);
        assert_eq!(d.lh.get(0, 0), 0.0);
        assert_eq!(d.hl.get(0, 0), 0.0);
        assert_eq!(d.hh.get(0, 0), 1.0);
    }

    #[test]
    fn analysis_matches_per_block_oracle() {
        let g = random_grid(8, 8, 41);
        let d = haar_analysis(&g).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                let a = g.get(2 * y, 2 * x);
                let b = g.get(2 * y, 2 * x + 1);
                let c = g.get(2 * y + 1, 2 * x);
                let dd = g.get(2 * y + 1, 2 * x + 1);
                assert_eq!(d.ll.get(y, x), (a + b + c + dd) / 2.0);
                assert_eq!(d.lh.get(y, x), (a - b + c - dd) / 2.0);
                assert_eq!(d.hl.get(y, x), (a + b - c - dd) / 2.0);
                assert_eq!(d.hh.get(y, x), (a - b - c + dd) / 2.0);
            }
        }
    }

    #[test]
    fn analysis_rejects_odd_dims() {
        assert!(haar_analysis(&Grid::zeros(3, 4)).is_err());
        assert!(haar_analysis(&Grid::zeros(4, 5)).is_err());
    }

    #[test]
    fn synthesis_round_trip() {
        for seed in 0..5 {
            let g = random_grid(10, 6, seed);
            let back = haar_synthesis(&haar_analysis(&g).unwrap()).unwrap();
            for (a, b) in g.data.iter().zip(back.data.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn synthesis_of_zero_bands() {
        let d = WaveletDecomposition {
            ll: Grid::zeros(2, 2),
            lh: Grid::zeros(2, 2),
            hl: Grid::zeros(2, 2),
            hh: Grid::zeros(2, 2),
        };
        let g = haar_synthesis(&d).unwrap();
        assert!(g.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn synthesis_of_ll_constant() {
        let d = WaveletDecomposition {
            ll: Grid::from_fn(2, 2, |_, _| 3.0),
            lh: Grid::zeros(2, 2),
            hl: Grid::zeros(2, 2),
            hh: Grid::zeros(2, 2),
        };
        let g = haar_synthesis(&d).unwrap();
        assert!(g.data.iter().all(|&v| (v - 1.5).abs() < 1e-15));
    }

    #[test]
    fn parseval_equality() {
        for seed in 0..10 {
            let g = random_grid(16, 12, 100 + seed);
            let d = haar_analysis(&g).unwrap();
            let bands =
                d.ll.sum_squares() + d.lh.sum_squares() + d.hl.sum_squares() + d.hh.sum_squares();
            let orig = g.sum_squares();
            assert!(
                (bands - orig).abs() <= 1e-6 * orig.max(1.0),
                "Parseval violated: {bands} vs {orig}"
            );
        }
    }

    #[test]
    fn low_frequency_of_constant() {
        let g = Grid::from_fn(8, 8, |_, _| 0.5);
        let ll = low_frequency(&g, 1).unwrap();
        assert_eq!(ll.height, 4);
        assert!(ll.data.iter().all(|&v| (v - 1.0).abs() < 1e-15));
    }

    #[test]
    fn low_frequency_two_levels_is_nested() {
        let g = random_grid(16, 16, 7);
        let two = low_frequency(&g, 2).unwrap();
        let nested = low_frequency(&low_frequency(&g, 1).unwrap(), 1).unwrap();
        assert_eq!(two, nested);
    }

    #[test]
    fn low_frequency_matches_block_sum_oracle() {
        // After L levels the LL value equals the 2^L x 2^L block sum / 2^L.
        for levels in 1..=3usize {
            let g = random_grid(16, 16, 55 + levels as u64);
            let ll = low_frequency(&g, levels).unwrap();
            let b = 1usize << levels;
            for y in 0..ll.height {
                for x in 0..ll.width {
                    let mut sum = 0.0;
                    for dy in 0..b {
                        for dx in 0..b {
                            sum += g.get(y * b + dy, x * b + dx);
                        }
                    }
                    let want = sum / b as f64;
                    assert!(
                        (ll.get(y, x) - want).abs() < 1e-9,
                        "levels={levels} ({y},{x})"
                    );
                }
            }
        }
    }

    #[test]
    fn low_frequency_rejects_indivisible() {
        assert!(low_frequency(&Grid::zeros(6, 6), 2).is_err());
    }

    #[test]
    fn adjoint_inner_product_identity() {
        // <LF(x), y> == <x, Adjoint(y)> for the strict (even-dim) operator.
        for (levels, h, w) in [(1usize, 8, 8), (2, 16, 12), (3, 16, 16)] {
            let x = random_grid(h, w, 7 + levels as u64);
            let lf = low_frequency(&x, levels).unwrap();
            let y = random_grid(lf.height, lf.width, 70 + levels as u64);
            let ax = adjoint_low_frequency(&y, levels, h, w).unwrap();
            let lhs: f64 = lf.data.iter().zip(y.data.iter()).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.data.iter().zip(ax.data.iter()).map(|(a, b)| a * b).sum();
            assert!(
                (lhs - rhs).abs() <= 1e-6 * lhs.abs().max(1.0),
                "adjoint mismatch at levels={levels}: {lhs} vs {rhs}"
            );
        }
    }

    #[test]
    fn resize_identity_and_constants() {
        let z = Latent::from_fn(4, 6, 6, |c, y, x| (c + y + x) as f64 * 0.1);
        assert_eq!(resize(&z, 6, 6).unwrap(), z);
        let c = Latent::constant(4, 4, 4, 0.3);
        let r = resize(&c, 10, 7).unwrap();
        assert!(r.data.iter().all(|&v| (v - 0.3).abs() < 1e-12));
    }

    #[test]
    fn resize_ramp_oracle() {
        let z = Latent::from_fn(1, 2, 2, |_, y, _| 2.0 * y as f64);
        let r = resize(&z, 4, 4).unwrap();
        for x in 0..4 {
            assert!((r.get(0, 0, x) - 0.0).abs() < 1e-12);
            assert!((r.get(0, 1, x) - 0.5).abs() < 1e-12);
            assert!((r.get(0, 2, x) - 1.5).abs() < 1e-12);
            assert!((r.get(0, 3, x) - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn gsp_loss_basics() {
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let a = Latent::gaussian(4, 8, 8, &mut rng);
        assert_eq!(gsp_loss(&a, &a, 1).unwrap(), 0.0);

        // Inputs differing by constant c: LL grids differ by 2^levels * c.
        for levels in 1..=2usize {
            let b = {
                let mut b = a.clone();
                for v in b.data.iter_mut() {
                    *v += 0.25;
                }
                b
            };
            let loss = gsp_loss(&a, &b, levels).unwrap();
            let cells = 4 * (8 >> levels) * (8 >> levels);
            let per_cell = ((1 << levels) as f64 * 0.25).powi(2);
            assert!(
                (loss - cells as f64 * per_cell).abs() < 1e-9,
                "levels={levels}: {loss}"
            );
        }
    }

    #[test]
    fn gsp_loss_matches_scalar_oracle() {
        let mut rng = ChaCha12Rng::seed_from_u64(10);
        let a = Latent::gaussian(4, 8, 8, &mut rng);
        let b = Latent::gaussian(4, 8, 8, &mut rng);
        let loss = gsp_loss(&a, &b, 1).unwrap();
        let mut want = 0.0;
        for c in 0..4 {
            for y in 0..4 {
                for x in 0..4 {
                    let block = |z: &Latent| {
                        (z.get(c, 2 * y, 2 * x)
                            + z.get(c, 2 * y, 2 * x + 1)
                            + z.get(c, 2 * y + 1, 2 * x)
                            + z.get(c, 2 * y + 1, 2 * x + 1))
                            / 2.0
                    };
                    let d = block(&a) - block(&b);
                    want += d * d;
                }
            }
        }
        assert!((loss - want).abs() < 1e-9);
    }

    #[test]
    fn gsp_loss_shape_mismatch() {
        let a = Latent::zeros(4, 8, 8);
        let b = Latent::zeros(4, 6, 8);
        assert!(gsp_loss(&a, &b, 1).is_err());
    }

    #[test]
    fn gradient_zero_when_components_match() {
        let mut rng = ChaCha12Rng::seed_from_u64(12);
        let sched = build_schedule(1000, (0.00085, 0.012)).unwrap();
        let a = Latent::gaussian(4, 8, 8, &mut rng);
        let g = gsp_gradient(&a, &a, 500, &sched, 1).unwrap();
        assert!(g.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradient_is_linear_in_residual() {
        let mut rng = ChaCha12Rng::seed_from_u64(13);
        let sched = build_schedule(1000, (0.00085, 0.012)).unwrap();
        let low = Latent::gaussian(4, 8, 8, &mut rng);
        let diff = Latent::gaussian(4, 8, 8, &mut rng);
        let mut hat1 = low.clone();
        hat1.add_scaled(&diff, 1.0).unwrap();
        let mut hat3 = low.clone();
        hat3.add_scaled(&diff, 3.0).unwrap();
        let g1 = gsp_gradient(&low, &hat1, 300, &sched, 1).unwrap();
        let g3 = gsp_gradient(&low, &hat3, 300, &sched, 1).unwrap();
        for (a, b) in g1.data.iter().zip(g3.data.iter()) {
            assert!((3.0 * a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        // f(z_t) = gsp_loss(low, predict_z0(z_t, eps_hat, t)) with frozen eps_hat.
        let sched = build_schedule(1000, (0.00085, 0.012)).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(14);
        let levels = 1;
        let t = 400;
        let low = Latent::gaussian(4, 8, 8, &mut rng);
        let z_t = Latent::gaussian(4, 8, 8, &mut rng);
        let eps_hat = Latent::gaussian(4, 8, 8, &mut rng);

        let z0_hat = predict_z0(&z_t, &eps_hat, t, &sched).unwrap();
        let analytic = gsp_gradient(&low, &z0_hat, t, &sched, levels).unwrap();

        let f = |z: &Latent| {
            let hat = predict_z0(z, &eps_hat, t, &sched).unwrap();
            gsp_loss(&low, &hat, levels).unwrap()
        };
        let h = 1e-5;
        let mut max_rel = 0.0f64;
        for i in 0..z_t.data.len() {
            let mut plus = z_t.clone();
            plus.data[i] += h;
            let mut minus = z_t.clone();
            minus.data[i] -= h;
            let fd = (f(&plus) - f(&minus)) / (2.0 * h);
            let denom = fd.abs().max(analytic.data[i].abs()).max(1e-8);
            max_rel = max_rel.max((fd - analytic.data[i]).abs() / denom);
        }
        assert!(max_rel <= 1e-4, "max relative error {max_rel}");
    }

    #[test]
    fn gradient_step_decreases_loss() {
        let sched = build_schedule(1000, (0.00085, 0.012)).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(15);
        for seed in 0..5 {
            let _ = seed;
            let low = Latent::gaussian(4, 8, 8, &mut rng);
            let hat = Latent::gaussian(4, 8, 8, &mut rng);
            let before = gsp_loss(&low, &hat, 1).unwrap();
            assert!(before > 0.0);
            let grad = gsp_gradient(&low, &hat, 700, &sched, 1).unwrap();
            // The update applies to the noisy latent; its effect on the clean
            // estimate is scaled by the same chain factor.
            let chain = 1.0 / sched.alpha_bar(700).sqrt();
            let mut updated = hat.clone();
            updated.add_scaled(&grad, -1e-3 * chain).unwrap();
            let after = gsp_loss(&low, &updated, 1).unwrap();
            assert!(after < before, "loss did not decrease: {before} -> {after}");
        }
    }

    #[test]
    fn odd_dims_handled_by_padding() {
        let mut rng = ChaCha12Rng::seed_from_u64(16);
        let sched = build_schedule(1000, (0.00085, 0.012)).unwrap();
        let a = Latent::gaussian(4, 7, 9, &mut rng);
        let b = Latent::gaussian(4, 7, 9, &mut rng);
        let loss = gsp_loss(&a, &b, 1).unwrap();
        assert!(loss > 0.0);
        let grad = gsp_gradient(&a, &b, 200, &sched, 1).unwrap();
        assert_eq!(grad.shape_of(), (4, 7, 9));
    }
}
