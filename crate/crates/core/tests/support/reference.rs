//! Straightforward f64 re-implementation of the denoiser forward pass,
//! written loop by loop without the autodiff engine. Finite differences
//! taken through it are free of single-precision rounding noise.

use std::collections::BTreeMap;

use tdpaint::model::{UNet, UNetConfig};
use tdpaint::timemap::TimeMap;

const EPS: f64 = 1e-5;

#[derive(Clone)]
pub struct RefNet {
    pub cfg: UNetConfig,
    pub params: BTreeMap<String, Vec<f64>>,
}

/// Feature map `c×h×w`.
#[derive(Clone)]
struct Fm {
    c: usize,
    h: usize,
    w: usize,
    d: Vec<f64>,
}

impl RefNet {
    pub fn from_unet(net: &UNet) -> Self {
        let params = net.params().iter().map(|(n, t)| (n.to_string(), t.data().iter().map(|&v| v as f64).collect())).collect();
        Self { cfg: *net.config(), params }
    }

    fn p(&self, name: &str) -> &[f64] {
        self.params.get(name).unwrap_or_else(|| panic!("missing {name}"))
    }

    fn groups(&self, c: usize) -> usize {
        let g = self.cfg.groups.min(c);
        (1..=g).rev().find(|d| c % d == 0).unwrap()
    }

    fn gamma(&self, t: f64) -> Vec<f64> {
        let d = self.cfg.time_embed_dim;
        let half = d / 2;
        let mut e = vec![0.0; d];
        for k in 0..half {
            let f = (-(10000f64.ln()) * k as f64 / half as f64).exp();
            e[k] = (t * f).sin();
            e[k + half] = (t * f).cos();
        }
        let lin = |w: &[f64], b: &[f64], x: &[f64]| -> Vec<f64> {
            (0..b.len()).map(|o| b[o] + (0..x.len()).map(|i| w[o * x.len() + i] * x[i]).sum::<f64>()).collect()
        };
        let l1 = lin(self.p("time.l1.weight"), self.p("time.l1.bias"), &e);
        let gated: Vec<f64> = e.iter().zip(&l1).map(|(a, z)| a / (1.0 + (-z).exp())).collect();
        lin(self.p("time.l2.weight"), self.p("time.l2.bias"), &gated)
    }

    fn conv(&self, x: &Fm, name: &str, k: usize) -> Fm {
        let w = self.p(&format!("{name}.weight"));
        let b = self.p(&format!("{name}.bias"));
        let co = b.len();
        let pad = (k / 2) as isize;
        let mut out = Fm { c: co, h: x.h, w: x.w, d: vec![0.0; co * x.h * x.w] };
        for o in 0..co {
            for y in 0..x.h {
                for xx in 0..x.w {
                    let mut s = b[o];
                    for i in 0..x.c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let sy = y as isize + ky as isize - pad;
                                let sx = xx as isize + kx as isize - pad;
                                if sy < 0 || sx < 0 || sy >= x.h as isize || sx >= x.w as isize {
                                    continue;
                                }
                                s += w[((o * x.c + i) * k + ky) * k + kx] * x.d[(i * x.h + sy as usize) * x.w + sx as usize];
                            }
                        }
                    }
                    out.d[(o * x.h + y) * x.w + xx] = s;
                }
            }
        }
        out
    }

    fn norm(&self, x: &Fm) -> Fm {
        let g = self.groups(x.c);
        let per = x.c / g * x.h * x.w;
        let mut out = x.clone();
        for chunk in out.d.chunks_mut(per) {
            let mean = chunk.iter().sum::<f64>() / per as f64;
            let var = chunk.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / per as f64;
            for v in chunk.iter_mut() {
                *v = (*v - mean) / (var + EPS).sqrt();
            }
        }
        out
    }

    fn cond_norm(&self, x: &Fm, prefix: &str, gammas: &[Vec<f64>]) -> Fm {
        let mut out = self.norm(x);
        let d = self.cfg.time_embed_dim;
        let (sw, sb) = (self.p(&format!("{prefix}.scale.weight")), self.p(&format!("{prefix}.scale.bias")));
        let (hw, hb) = (self.p(&format!("{prefix}.shift.weight")), self.p(&format!("{prefix}.shift.bias")));
        let hw_px = x.h * x.w;
        for c in 0..x.c {
            for px in 0..hw_px {
                let gm = &gammas[px];
                let s = sb[c] + (0..d).map(|i| sw[c * d + i] * gm[i]).sum::<f64>();
                let b = hb[c] + (0..d).map(|i| hw[c * d + i] * gm[i]).sum::<f64>();
                let v = &mut out.d[c * hw_px + px];
                *v = *v * (1.0 + s) + b;
            }
        }
        out
    }

    fn silu(x: &Fm) -> Fm {
        Fm { d: x.d.iter().map(|v| v / (1.0 + (-v).exp())).collect(), ..*x }
    }

    fn block(&self, x: &Fm, name: &str, gammas: &[Vec<f64>]) -> Fm {
        let h = Self::silu(&self.cond_norm(x, &format!("{name}.norm1"), gammas));
        let h = self.conv(&h, &format!("{name}.conv1"), 3);
        let h = Self::silu(&self.cond_norm(&h, &format!("{name}.norm2"), gammas));
        let mut h = self.conv(&h, &format!("{name}.conv2"), 3);
        let skip = if self.params.contains_key(&format!("{name}.skip.weight")) {
            self.conv(x, &format!("{name}.skip"), 1)
        } else {
            x.clone()
        };
        for (a, b) in h.d.iter_mut().zip(&skip.d) {
            *a += b;
        }
        h
    }

    /// Per-pixel conditioning rows at every resolution, finest first.
    fn level_gammas(&self, tmap: &TimeMap) -> Vec<Vec<Vec<f64>>> {
        let (h, w) = (tmap.height(), tmap.width());
        (0..=self.cfg.depth)
            .map(|l| {
                let field = resize(tmap, h >> l, w >> l);
                let mut cache: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
                field.iter().map(|&t| cache.entry(t.to_bits()).or_insert_with(|| self.gamma(t)).clone()).collect()
            })
            .collect()
    }

    pub fn forward(&self, x: &[f64], tmap: &TimeMap) -> Vec<f64> {
        let (h, w) = (tmap.height(), tmap.width());
        let gammas = self.level_gammas(tmap);
        let x = Fm { c: self.cfg.in_channels, h, w, d: x.to_vec() };
        let mut cur = self.conv(&x, "conv_in", 3);
        let mut skips = Vec::new();
        for l in 0..self.cfg.depth {
            for b in 0..self.cfg.blocks_per_level {
                cur = self.block(&cur, &format!("enc{l}.{b}"), &gammas[l]);
            }
            skips.push(cur.clone());
            cur = pool(&cur);
        }
        cur = self.block(&cur, "mid", &gammas[self.cfg.depth]);
        for l in (0..self.cfg.depth).rev() {
            let up = upsample(&cur);
            let s = &skips[l];
            cur = Fm { c: up.c + s.c, h: up.h, w: up.w, d: [up.d.clone(), s.d.clone()].concat() };
            for b in 0..self.cfg.blocks_per_level {
                cur = self.block(&cur, &format!("dec{l}.{b}"), &gammas[l]);
            }
        }
        let cur = Self::silu(&self.norm(&cur));
        self.conv(&cur, "conv_out", 3).d
    }
}

fn pool(x: &Fm) -> Fm {
    let (h, w) = (x.h / 2, x.w / 2);
    let mut d = vec![0.0; x.c * h * w];
    for c in 0..x.c {
        for y in 0..h {
            for xx in 0..w {
                let at = |dy: usize, dx: usize| x.d[(c * x.h + 2 * y + dy) * x.w + 2 * xx + dx];
                d[(c * h + y) * w + xx] = 0.25 * (at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1));
            }
        }
    }
    Fm { c: x.c, h, w, d }
}

fn upsample(x: &Fm) -> Fm {
    let (h, w) = (x.h * 2, x.w * 2);
    let mut d = vec![0.0; x.c * h * w];
    for c in 0..x.c {
        for y in 0..h {
            for xx in 0..w {
                d[(c * h + y) * w + xx] = x.d[(c * x.h + y / 2) * x.w + xx / 2];
            }
        }
    }
    Fm { c: x.c, h, w, d }
}

/// Bilinear resize with half-pixel centres and edge clamping.
fn resize(tmap: &TimeMap, oh: usize, ow: usize) -> Vec<f64> {
    let (h, w) = (tmap.height(), tmap.width());
    let src = |o: usize, n_out: usize, n_in: usize| -> (usize, usize, f64) {
        let s = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).max(0.0);
        let i0 = (s.floor() as usize).min(n_in - 1);
        (i0, (i0 + 1).min(n_in - 1), s - i0 as f64)
    };
    let v = |y: usize, x: usize| tmap.get(y, x) as f64;
    let mut out = Vec::with_capacity(oh * ow);
    for oy in 0..oh {
        let (y0, y1, fy) = src(oy, oh, h);
        for ox in 0..ow {
            let (x0, x1, fx) = src(ox, ow, w);
            let top = v(y0, x0) * (1.0 - fx) + v(y0, x1) * fx;
            let bottom = v(y1, x0) * (1.0 - fx) + v(y1, x1) * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}
