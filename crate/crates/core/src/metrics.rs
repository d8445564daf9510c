//! Image-quality metrics and decomposition diagnostics.

use crate::colorspace::ImageRgb;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::rcm::mres;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn same_extent<T: Scalar>(op: &str, a: &ImageRgb<T>, b: &ImageRgb<T>) -> Result<()> {
    if a.tensor().shape() != b.tensor().shape() {
        return Err(Error::dim(op, a.tensor().shape(), b.tensor().shape()));
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB for peak value 1; `+∞` for identical images.
pub fn psnr<T: Scalar>(a: &ImageRgb<T>, b: &ImageRgb<T>) -> Result<f64> {
    same_extent("psnr", a, b)?;
    let (x, y) = (a.tensor().data(), b.tensor().data());
    let se: f64 = x
        .iter()
        .zip(y)
        .map(|(&p, &q)| (p.to_f64_lossy() - q.to_f64_lossy()).powi(2))
        .sum();
    if se == 0.0 {
        return Ok(f64::INFINITY);
    }
    let mse = se / x.len() as f64;
    Ok(-10.0 * mse.log10())
}

fn gray<T: Scalar>(img: &ImageRgb<T>) -> Vec<f64> {
    img.tensor()
        .data()
        .chunks_exact(3)
        .map(|p| p.iter().map(|v| v.to_f64_lossy()).sum::<f64>() / 3.0)
        .collect()
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mid = (SSIM_WINDOW / 2) as f64;
    let mut w = [0.0; SSIM_WINDOW];
    for (i, v) in w.iter_mut().enumerate() {
        *v = (-(i as f64 - mid).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Separable Gaussian filter over every fully contained window.
fn filter_valid(img: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = k.iter().enumerate().map(|(i, &c)| c * img[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = k.iter().enumerate().map(|(i, &c)| c * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean structural similarity of the channel-mean grayscale images, using an
/// 11×11 Gaussian window (σ = 1.5) over valid positions only.
pub fn ssim<T: Scalar>(a: &ImageRgb<T>, b: &ImageRgb<T>) -> Result<f64> {
    same_extent("ssim", a, b)?;
    let (h, w) = (a.height(), a.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Config(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}"
        )));
    }
    let (x, y) = (gray(a), gray(b));
    let k = gaussian_window();
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(a, b)| a * b).collect::<Vec<_>>();
    let mx = filter_valid(&x, h, w, &k);
    let my = filter_valid(&y, h, w, &k);
    let sxx = filter_valid(&prod(&x, &x), h, w, &k);
    let syy = filter_valid(&prod(&y, &y), h, w, &k);
    let sxy = filter_valid(&prod(&x, &y), h, w, &k);
    let (c1, c2) = (SSIM_K1 * SSIM_K1, SSIM_K2 * SSIM_K2);
    let total: f64 = (0..mx.len())
        .map(|i| {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cov = sxy[i] - ux * uy;
            ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
        })
        .sum();
    Ok(total / mx.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cosine {
    pub value: f64,
    /// set when either input has zero norm; `value` is then 0
    pub degenerate: bool,
}

/// `⟨x, y⟩ / (‖x‖‖y‖ + 1e-12)` over the flattened tensors.
pub fn cosine_similarity<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>) -> Result<Cosine> {
    if x.numel() != y.numel() {
        return Err(Error::dim("cosine_similarity", x.shape(), y.shape()));
    }
    let (mut dot, mut nx, mut ny) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.data().iter().zip(y.data()) {
        let (a, b) = (a.to_f64_lossy(), b.to_f64_lossy());
        dot += a * b;
        nx += a * a;
        ny += b * b;
    }
    if nx == 0.0 || ny == 0.0 {
        return Ok(Cosine {
            value: 0.0,
            degenerate: true,
        });
    }
    let value = (dot / (nx.sqrt() * ny.sqrt() + 1e-12)).clamp(-1.0, 1.0);
    Ok(Cosine {
        value,
        degenerate: false,
    })
}

/// Closed-form multiply-add counts of the linear channel attention and of
/// global spatial self-attention at one resolution.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlopAudit {
    pub h: u64,
    pub w: u64,
    pub c: u64,
    pub s: u64,
    /// `2(s²+1)HWC²`
    pub mres_flops: u64,
    /// `2(HW)²C`
    pub gmsa_flops: u64,
    /// `gmsa_flops / mres_flops`
    pub ratio: f64,
    /// counter reading from an instrumented attention call, when one was run
    pub live_mres_flops: Option<u64>,
}

/// Largest query tensor (elements) for which the audit also runs the live call.
pub const LIVE_AUDIT_LIMIT: u64 = 1 << 22;

pub fn flop_audit(h: usize, w: usize, c: usize, s: usize) -> Result<FlopAudit> {
    if h == 0 || w == 0 || c == 0 || s == 0 {
        return Err(Error::Config(format!("audit extents must be positive, got H={h} W={w} C={c} s={s}")));
    }
    let (h, w, c, s) = (h as u64, w as u64, c as u64, s as u64);
    let over = |what: &str| Error::Overflow(format!("{what} exceeds 64 bits for H={h} W={w} C={c} s={s}"));
    let hw = h.checked_mul(w).ok_or_else(|| over("HW"))?;
    let c2 = c.checked_mul(c).ok_or_else(|| over("C²"))?;
    let mres_flops = s
        .checked_mul(s)
        .and_then(|s2| s2.checked_add(1))
        .and_then(|f| f.checked_mul(2))
        .and_then(|f| f.checked_mul(hw))
        .and_then(|f| f.checked_mul(c2))
        .ok_or_else(|| over("mres flops"))?;
    let gmsa_flops = hw
        .checked_mul(hw)
        .and_then(|f| f.checked_mul(2))
        .and_then(|f| f.checked_mul(c))
        .ok_or_else(|| over("gmsa flops"))?;
    let query_elems = hw.checked_mul(s * s).and_then(|t| t.checked_mul(c));
    let live_mres_flops = match query_elems {
        Some(n) if n <= LIVE_AUDIT_LIMIT => Some(live_mres_flops(h as usize, w as usize, c as usize, s as usize)?),
        _ => None,
    };
    Ok(FlopAudit {
        h,
        w,
        c,
        s,
        mres_flops,
        gmsa_flops,
        ratio: gmsa_flops as f64 / mres_flops as f64,
        live_mres_flops,
    })
}

/// Runs one attention call at `H × W × C` (queries and keys at `sH × sW`) and
/// returns the graph's multiply-add counter.
pub fn live_mres_flops(h: usize, w: usize, c: usize, s: usize) -> Result<u64> {
    let mut g = Graph::<f32>::new();
    let q = g.constant(Tensor::zeros(vec![s * h, s * w, c]));
    let k = g.constant(Tensor::zeros(vec![s * h, s * w, c]));
    let v = g.constant(Tensor::zeros(vec![h, w, c]));
    let d = g.constant(Tensor::scalar(1.0));
    g.reset_flops();
    mres(&mut g, q, k, v, d)?;
    Ok(g.matmul_flops())
}

pub type Histogram = [[u64; 256]; 3];

/// Per-channel 256-bin counts; value `v` falls in bin `floor(255·v)` clamped.
pub fn rgb_histogram<T: Scalar>(img: &ImageRgb<T>) -> Histogram {
    let mut h = [[0u64; 256]; 3];
    for px in img.tensor().data().chunks_exact(3) {
        for (c, &v) in px.iter().enumerate() {
            let bin = (255.0 * v.to_f64_lossy()).floor().clamp(0.0, 255.0) as usize;
            h[c][bin] += 1;
        }
    }
    h
}

/// Per-pixel mean over channels of `|a − b|`, shaped `[H, W, 1]`.
pub fn error_map<T: Scalar>(a: &ImageRgb<T>, b: &ImageRgb<T>) -> Result<Tensor<f64>> {
    same_extent("error_map", a, b)?;
    let data = a
        .tensor()
        .data()
        .chunks_exact(3)
        .zip(b.tensor().data().chunks_exact(3))
        .map(|(p, q)| {
            p.iter()
                .zip(q)
                .map(|(&x, &y)| (x.to_f64_lossy() - y.to_f64_lossy()).abs())
                .sum::<f64>()
                / 3.0
        })
        .collect();
    Tensor::new(vec![a.height(), a.width(), 1], data)
}

/// Everything `metrics` reports for one image pair.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub psnr: f64,
    pub ssim: f64,
    pub cosine: Cosine,
    pub histogram_a: Histogram,
    pub histogram_b: Histogram,
    pub error_map: Tensor<f64>,
}

impl MetricsReport {
    pub fn compare<T: Scalar>(a: &ImageRgb<T>, b: &ImageRgb<T>) -> Result<Self> {
        Ok(Self {
            psnr: psnr(a, b)?,
            ssim: ssim(a, b)?,
            cosine: cosine_similarity(a.tensor(), b.tensor())?,
            histogram_a: rgb_histogram(a),
            histogram_b: rgb_histogram(b),
            error_map: error_map(a, b)?,
        })
    }

    pub fn mean_abs_error(&self) -> f64 {
        self.error_map.data().iter().sum::<f64>() / self.error_map.numel() as f64
    }
}

/// `channel,bin,count` rows.
pub fn histogram_csv(h: &Histogram) -> String {
    let mut out = String::from("channel,bin,count\n");
    for (c, name) in ["r", "g", "b"].iter().enumerate() {
        for (bin, n) in h[c].iter().enumerate() {
            out.push_str(&format!("{name},{bin},{n}\n"));
        }
    }
    out
}

/// `y,x,error` rows of an `[H, W, 1]` map.
pub fn error_map_csv(map: &Tensor<f64>) -> String {
    let w = map.shape().get(1).copied().unwrap_or(1);
    let mut out = String::from("y,x,error\n");
    for (i, v) in map.data().iter().enumerate() {
        out.push_str(&format!("{},{},{v}\n", i / w, i % w));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(h: usize, w: usize, f: impl Fn(usize, usize, usize) -> f64) -> ImageRgb<f64> {
        ImageRgb::from_fn(h, w, f)
    }

    #[test]
    fn psnr_closed_forms() {
        let a = img(8, 8, |y, x, c| ((y + x + c) % 5) as f64 * 0.1);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        let b = img(8, 8, |_, _, _| 0.3);
        let c = img(8, 8, |_, _, _| 0.4);
        assert!((psnr(&b, &c).unwrap() - 20.0).abs() < 1e-9);
        assert_eq!(psnr(&b, &c).unwrap(), psnr(&c, &b).unwrap());
        let small = img(4, 8, |_, _, _| 0.3);
        assert!(matches!(psnr(&b, &small), Err(Error::Dimension { .. })));
    }

    #[test]
    fn ssim_identity_and_anticorrelation() {
        let board = img(24, 24, |y, x, _| ((y / 2 + x / 2) % 2) as f64);
        let inv = img(24, 24, |y, x, _| 1.0 - ((y / 2 + x / 2) % 2) as f64);
        assert!((ssim(&board, &board).unwrap() - 1.0).abs() < 1e-9);
        let s = ssim(&board, &inv).unwrap();
        assert!(s < 0.0, "{s}");
        assert!((s - ssim(&inv, &board).unwrap()).abs() < 1e-9);
        let tiny = img(10, 30, |_, _, _| 0.5);
        assert!(matches!(ssim(&tiny, &tiny), Err(Error::Config(_))));
    }

    #[test]
    fn ssim_matches_brute_force_windows() {
        let a = img(13, 14, |y, x, c| ((y * 7 + x * 3 + c) % 11) as f64 / 10.0);
        let b = img(13, 14, |y, x, c| ((y * 5 + x + 2 * c) % 9) as f64 / 8.0);
        let (ga, gb) = (gray(&a), gray(&b));
        let k = gaussian_window();
        let mut total = 0.0;
        let mut n = 0;
        for oy in 0..3 {
            for ox in 0..4 {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        let wgt = k[i] * k[j];
                        let (p, q) = (ga[(oy + i) * 14 + ox + j], gb[(oy + i) * 14 + ox + j]);
                        ma += wgt * p;
                        mb += wgt * q;
                        saa += wgt * p * p;
                        sbb += wgt * q * q;
                        sab += wgt * p * q;
                    }
                }
                let (c1, c2) = (1e-4, 9e-4);
                total += ((2.0 * ma * mb + c1) * (2.0 * (sab - ma * mb) + c2))
                    / ((ma * ma + mb * mb + c1) * (saa - ma * ma + sbb - mb * mb + c2));
                n += 1;
            }
        }
        assert!((ssim(&a, &b).unwrap() - total / n as f64).abs() < 1e-12);
    }

    #[test]
    fn cosine_cases() {
        let t = |v: Vec<f64>| Tensor::new(vec![v.len()], v).unwrap();
        let x = t(vec![1.0, 2.0, -3.0]);
        assert!((cosine_similarity(&x, &x).unwrap().value - 1.0).abs() < 1e-12);
        let neg = t(vec![-1.0, -2.0, 3.0]);
        assert!((cosine_similarity(&x, &neg).unwrap().value + 1.0).abs() < 1e-12);
        let ortho = t(vec![2.0, -1.0, 0.0]);
        assert_eq!(cosine_similarity(&x, &ortho).unwrap().value, 0.0);
        let zero = t(vec![0.0; 3]);
        assert_eq!(
            cosine_similarity(&x, &zero).unwrap(),
            Cosine {
                value: 0.0,
                degenerate: true
            }
        );
        assert!(cosine_similarity(&x, &t(vec![1.0])).is_err());
    }

    #[test]
    fn audit_closed_forms() {
        let a = flop_audit(16, 16, 32, 2).unwrap();
        assert_eq!(a.mres_flops, 2_621_440);
        assert_eq!(a.gmsa_flops, 4_194_304);
        assert_eq!(a.live_mres_flops, Some(a.mres_flops));
        assert_eq!(a.ratio, 1.6);
        let b = flop_audit(32, 32, 32, 2).unwrap();
        assert_eq!(b.mres_flops, 4 * a.mres_flops);
        assert_eq!(b.gmsa_flops, 16 * a.gmsa_flops);
        assert_eq!(flop_audit(7, 9, 1, 1).unwrap().mres_flops, 4 * 63);
        assert!(matches!(flop_audit(4, 4, 4, 0), Err(Error::Config(_))));
        assert!(matches!(flop_audit(1 << 20, 1 << 20, 1 << 16, 2), Err(Error::Overflow(_))));
        assert_eq!(flop_audit(4096, 4096, 64, 2).unwrap().live_mres_flops, None);
    }

    #[test]
    fn histogram_and_error_map() {
        let black = img(3, 5, |_, _, _| 0.0);
        let h = rgb_histogram(&black);
        assert!(h.iter().all(|ch| ch[0] == 15 && ch.iter().sum::<u64>() == 15));
        let white = img(2, 2, |_, _, _| 1.0);
        assert!(rgb_histogram(&white).iter().all(|ch| ch[255] == 4));
        let e = error_map(&black, &black).unwrap();
        assert_eq!(e.shape(), &[3, 5, 1]);
        assert!(e.data().iter().all(|&v| v == 0.0));
        let mixed = img(3, 5, |_, _, c| [0.3, 0.0, 0.6][c]);
        assert!(error_map(&black, &mixed).unwrap().data().iter().all(|&v| (v - 0.3).abs() < 1e-15));
        assert!(error_map(&black, &white).is_err());
        assert_eq!(histogram_csv(&h).lines().count(), 769);
    }
}
