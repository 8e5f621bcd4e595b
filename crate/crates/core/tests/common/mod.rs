//! Straight-line reference implementations on nested vectors, written
//! without the graph so the library can be checked against them.

#![allow(dead_code, clippy::needless_range_loop, clippy::too_many_arguments)]

use hires_core::numerics::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Mat = Vec<Vec<f64>>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn to_mat(t: &Tensor) -> Mat {
    let (r, c) = (t.shape()[0], t.len() / t.shape()[0]);
    (0..r)
        .map(|i| t.data()[i * c..(i + 1) * c].to_vec())
        .collect()
}

pub fn from_mat(m: &Mat) -> Tensor {
    let c = m.first().map_or(0, Vec::len);
    Tensor::new(&[m.len(), c], m.concat()).unwrap()
}

pub fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.max_abs_diff(b).unwrap()
}

pub fn mm(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for t in 0..k {
                s += a[i][t] * b[t][j];
            }
            out[i][j] = s;
        }
    }
    out
}

pub fn transpose(a: &Mat) -> Mat {
    (0..a[0].len())
        .map(|j| a.iter().map(|r| r[j]).collect())
        .collect()
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect()
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

pub fn layer_norm(a: &Mat, gamma: &[f64], beta: &[f64], eps: f64) -> Mat {
    a.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            row.iter()
                .enumerate()
                .map(|(j, v)| (v - mean) / (var + eps).sqrt() * gamma[j] + beta[j])
                .collect()
        })
        .collect()
}

pub fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh())
}

pub fn linear(a: &Mat, w: &Tensor, b: &Tensor) -> Mat {
    let out = mm(a, &to_mat(w));
    out.into_iter()
        .map(|r| r.iter().zip(b.data()).map(|(v, c)| v + c).collect())
        .collect()
}

/// Rotates pairs of a head's row by `angle = pos * base^(-2i/half)`, first
/// half by the row coordinate and second half by the column.
pub fn rope(x: &Mat, coords: &[(usize, usize)]) -> Mat {
    x.iter()
        .zip(coords)
        .map(|(row, &(r, c))| {
            let dh = row.len();
            let half = dh / 2;
            let mut out = row.clone();
            for (start, pos) in [(0, r), (half, c)] {
                for i in 0..half / 2 {
                    let theta = pos as f64 * 10_000f64.powf(-((2 * i) as f64) / half as f64);
                    let (a, b) = (row[start + 2 * i], row[start + 2 * i + 1]);
                    out[start + 2 * i] = a * theta.cos() - b * theta.sin();
                    out[start + 2 * i + 1] = a * theta.sin() + b * theta.cos();
                }
            }
            out
        })
        .collect()
}

fn cols(a: &Mat, s: usize, e: usize) -> Mat {
    a.iter().map(|r| r[s..e].to_vec()).collect()
}

/// Multi-head attention: explicit Q, K, V, scores, softmax, weighted sum.
pub fn attention(
    q_in: &Mat,
    kv_in: &Mat,
    wq: &Tensor,
    wk: &Tensor,
    wv: &Tensor,
    wo: &Tensor,
    heads: usize,
    coords: Option<&[(usize, usize)]>,
) -> Mat {
    let q = mm(q_in, &to_mat(wq));
    let k = mm(kv_in, &to_mat(wk));
    let v = mm(kv_in, &to_mat(wv));
    let d = q[0].len();
    let dh = d / heads;
    let mut joined = vec![Vec::new(); q.len()];
    for h in 0..heads {
        let (mut qh, mut kh) = (
            cols(&q, h * dh, (h + 1) * dh),
            cols(&k, h * dh, (h + 1) * dh),
        );
        let vh = cols(&v, h * dh, (h + 1) * dh);
        if let Some(c) = coords {
            qh = rope(&qh, c);
            kh = rope(&kh, c);
        }
        for (i, qi) in qh.iter().enumerate() {
            let scores: Vec<f64> = kh
                .iter()
                .map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let p = softmax(&scores);
            for c in 0..dh {
                joined[i].push((0..vh.len()).map(|j| p[j] * vh[j][c]).sum());
            }
        }
    }
    mm(&joined, &to_mat(wo))
}

/// Depthwise 3x3 cross-correlation, zero padded, on `[H][W][D]`.
pub fn dwconv(f: &[Mat], k: &[Mat]) -> Vec<Mat> {
    let (h, w, d) = (f.len() as isize, f[0].len() as isize, f[0][0].len());
    let mut out = vec![vec![vec![0.0; d]; w as usize]; h as usize];
    for y in 0..h {
        for x in 0..w {
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    let (sy, sx) = (y + dy, x + dx);
                    if sy < 0 || sy >= h || sx < 0 || sx >= w {
                        continue;
                    }
                    for c in 0..d {
                        out[y as usize][x as usize][c] += f[sy as usize][sx as usize][c]
                            * k[(dy + 1) as usize][(dx + 1) as usize][c];
                    }
                }
            }
        }
    }
    out
}

pub fn to_map(t: &Tensor) -> Vec<Mat> {
    let s = t.shape();
    let (h, w, d) = (s[0], s[1], s[2]);
    (0..h)
        .map(|y| {
            (0..w)
                .map(|x| t.data()[(y * w + x) * d..(y * w + x + 1) * d].to_vec())
                .collect()
        })
        .collect()
}

pub fn from_map(m: &[Mat]) -> Tensor {
    let (h, w, d) = (m.len(), m[0].len(), m[0][0].len());
    Tensor::new(&[h, w, d], m.iter().flatten().flatten().copied().collect()).unwrap()
}

pub fn avg_pool(f: &[Mat], s: usize) -> Vec<Mat> {
    let (h, w, d) = (f.len(), f[0].len(), f[0][0].len());
    (0..h / s)
        .map(|oy| {
            (0..w / s)
                .map(|ox| {
                    (0..d)
                        .map(|c| {
                            let mut t = 0.0;
                            for y in oy * s..(oy + 1) * s {
                                for x in ox * s..(ox + 1) * s {
                                    t += f[y][x][c];
                                }
                            }
                            t / (s * s) as f64
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}

/// Half-pixel-centre bilinear sampling with edge clamping.
pub fn bilinear(f: &[Mat], h2: usize, w2: usize) -> Vec<Mat> {
    let (h, w) = (f.len(), f[0].len());
    let src = |i: usize, n: usize, n2: usize| {
        let s = ((i as f64 + 0.5) * n as f64 / n2 as f64 - 0.5)
            .max(0.0)
            .min((n - 1) as f64);
        let lo = s.floor() as usize;
        (lo, (lo + 1).min(n - 1), s - lo as f64)
    };
    (0..h2)
        .map(|y| {
            let (y0, y1, ty) = src(y, h, h2);
            (0..w2)
                .map(|x| {
                    let (x0, x1, tx) = src(x, w, w2);
                    (0..f[0][0].len())
                        .map(|c| {
                            let top = f[y0][x0][c] * (1.0 - tx) + f[y0][x1][c] * tx;
                            let bot = f[y1][x0][c] * (1.0 - tx) + f[y1][x1][c] * tx;
                            top * (1.0 - ty) + bot * ty
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}

pub fn map_tokens(m: &[Mat]) -> Mat {
    m.iter().flatten().cloned().collect()
}

pub fn tokens_map(t: &Mat, h: usize, w: usize) -> Vec<Mat> {
    (0..h).map(|y| t[y * w..(y + 1) * w].to_vec()).collect()
}

use hires_core::slice_restore::{sra_forward, FeatureMap, SraWeights};
use hires_core::slicer::{GridSpec, ImageBuffer};

pub fn random_image(h: usize, w: usize, c: usize, seed: u64) -> ImageBuffer {
    let mut r = rng(seed);
    ImageBuffer::new(
        h,
        w,
        c,
        Tensor::uniform(&[h * w * c], 0.0, 1.0, &mut r).into_data(),
    )
    .unwrap()
}

/// Checks a grid against the slicing rule for an image that needs no rescale:
/// ceilings `m0, n0`, quadrupled exactly when `4 m0 n0 <= M`, and the slice cap.
pub fn grid_rule_violations(h: usize, w: usize, r: usize, max: usize, g: &GridSpec) -> Vec<String> {
    let mut bad = Vec::new();
    if g.m * g.n > max {
        bad.push(format!("{}x{} exceeds {max}", g.m, g.n));
    }
    if g.canvas_h != g.m * r || g.canvas_w != g.n * r {
        bad.push("canvas is not m r x n r".into());
    }
    let (ch, cw) = g.content_dims(h, w);
    if ch > g.canvas_h || cw > g.canvas_w {
        bad.push("content does not fit the canvas".into());
    }
    let (m0, n0) = (ch.div_ceil(r), cw.div_ceil(r));
    let quad = 4 * m0 * n0 <= max;
    if g.quadrupled != quad {
        bad.push(format!("quadrupled {} for m0={m0} n0={n0}", g.quadrupled));
    }
    let want = if quad { (2 * m0, 2 * n0) } else { (m0, n0) };
    if (g.m, g.n) != want {
        bad.push(format!("grid {}x{} but rule gives {want:?}", g.m, g.n));
    }
    if (g.scale_applied < 1.0) != (h.div_ceil(r) * w.div_ceil(r) > max) {
        bad.push(format!("rescale {} for {h}x{w}", g.scale_applied));
    }
    bad
}

pub fn random_slices(
    grid: &GridSpec,
    spatial: (usize, usize),
    d: usize,
    seed: u64,
) -> Vec<FeatureMap> {
    let mut r = rng(seed);
    (0..grid.slice_count())
        .map(|_| {
            FeatureMap::new(
                Tensor::randn(&[spatial.0 * spatial.1, d], 1.0, &mut r),
                spatial,
            )
            .unwrap()
        })
        .collect()
}

/// Perturbs every token of the last slice of a 2x2 grid of 4x4-token slices
/// and reports the largest output change seen in slice 0 with both paths.
pub fn cross_slice_change(seed: u64) -> f64 {
    let grid = GridSpec::fixed(4, 2, 2);
    let w = SraWeights::random(8, 2, 2, 0.5, &mut rng(seed ^ 0xabc)).unwrap();
    let x = random_slices(&grid, (4, 4), 8, seed);
    let mut y = x.clone();
    y[3].tokens = y[3].tokens.map(|v| v + 0.1);
    let (a, b) = (
        sra_forward(&x, &grid, &w).unwrap(),
        sra_forward(&y, &grid, &w).unwrap(),
    );
    max_diff(&a[0].tokens, &b[0].tokens)
}

/// With only the local path (zero global output projection), perturbing the
/// last slice may only move tokens within one token of it on the whole map.
/// Returns (largest change inside the band, largest change outside it).
pub fn local_band_changes(seed: u64) -> (f64, f64) {
    let grid = GridSpec::fixed(4, 2, 2);
    let mut w = SraWeights::random(8, 2, 2, 0.5, &mut rng(seed ^ 0xdef)).unwrap();
    w.attn.wo = Tensor::zeros(&[8, 8]);
    let x = random_slices(&grid, (4, 4), 8, seed);
    let mut y = x.clone();
    y[3].tokens = y[3].tokens.map(|v| v * 1.5 - 0.25);
    let (a, b) = (
        sra_forward(&x, &grid, &w).unwrap(),
        sra_forward(&y, &grid, &w).unwrap(),
    );
    let (mut inside, mut outside) = (0.0f64, 0.0f64);
    for k in 0..3 {
        let (row, col) = (k / 2, k % 2);
        for t in 0..16 {
            // whole-map coordinates; slice 3 covers [4, 8) x [4, 8)
            let (y0, x0) = (row * 4 + t / 4, col * 4 + t % 4);
            let near = y0 + 1 >= 4 && x0 + 1 >= 4;
            let delta = a[k]
                .tokens
                .row(t)
                .iter()
                .zip(b[k].tokens.row(t))
                .map(|(p, q)| {
                    if p.to_bits() == q.to_bits() {
                        0.0
                    } else {
                        (p - q).abs().max(f64::MIN_POSITIVE)
                    }
                })
                .fold(0.0, f64::max);
            if near {
                inside = inside.max(delta);
            } else {
                outside = outside.max(delta);
            }
        }
    }
    (inside, outside)
}
