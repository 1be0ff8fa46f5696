// Stride-1, zero-padded ("same") 3D convolution on channels-last volumes via
// im2col + GEMM. Input (D, H, W, Cin), weight (K, K, K, Cin, Cout), K odd.

use super::linalg::gemm;

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub d: usize,
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
}

impl ConvGeom {
    fn voxels(&self) -> usize {
        self.d * self.h * self.w
    }

    fn patch(&self) -> usize {
        self.k * self.k * self.k * self.cin
    }
}

fn im2col(input: &[f64], g: &ConvGeom) -> Vec<f64> {
    let pad = (g.k / 2) as isize;
    let patch = g.patch();
    let mut cols = vec![0.0; g.voxels() * patch];
    let (d, h, w, k, cin) = (g.d as isize, g.h as isize, g.w as isize, g.k as isize, g.cin);
    let mut row = 0usize;
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let base = row * patch;
                let mut tap = 0usize;
                for kz in 0..k {
                    let iz = z + kz - pad;
                    for ky in 0..k {
                        let iy = y + ky - pad;
                        for kx in 0..k {
                            let ix = x + kx - pad;
                            if iz >= 0 && iz < d && iy >= 0 && iy < h && ix >= 0 && ix < w {
                                let src = (((iz * h + iy) * w + ix) as usize) * cin;
                                let dst = base + tap * cin;
                                cols[dst..dst + cin].copy_from_slice(&input[src..src + cin]);
                            }
                            tap += 1;
                        }
                    }
                }
                row += 1;
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], g: &ConvGeom, out: &mut [f64]) {
    let pad = (g.k / 2) as isize;
    let patch = g.patch();
    let (d, h, w, k, cin) = (g.d as isize, g.h as isize, g.w as isize, g.k as isize, g.cin);
    let mut row = 0usize;
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let base = row * patch;
                let mut tap = 0usize;
                for kz in 0..k {
                    let iz = z + kz - pad;
                    for ky in 0..k {
                        let iy = y + ky - pad;
                        for kx in 0..k {
                            let ix = x + kx - pad;
                            if iz >= 0 && iz < d && iy >= 0 && iy < h && ix >= 0 && ix < w {
                                let dst = (((iz * h + iy) * w + ix) as usize) * cin;
                                let src = base + tap * cin;
                                for c in 0..cin {
                                    out[dst + c] += cols[src + c];
                                }
                            }
                            tap += 1;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

pub(crate) fn forward(input: &[f64], weight: &[f64], bias: Option<&[f64]>, g: &ConvGeom) -> Vec<f64> {
    let v = g.voxels();
    let mut out = vec![0.0; v * g.cout];
    if let Some(b) = bias {
        for row in out.chunks_exact_mut(g.cout) {
            row.copy_from_slice(b);
        }
    }
    let beta = if bias.is_some() { 1.0 } else { 0.0 };
    if g.k == 1 {
        gemm(input, false, weight, false, &mut out, v, g.cin, g.cout, beta);
    } else {
        let cols = im2col(input, g);
        gemm(&cols, false, weight, false, &mut out, v, g.patch(), g.cout, beta);
    }
    out
}

pub(crate) fn backward_input(grad_out: &[f64], weight: &[f64], g: &ConvGeom) -> Vec<f64> {
    let v = g.voxels();
    if g.k == 1 {
        let mut gin = vec![0.0; v * g.cin];
        gemm(grad_out, false, weight, true, &mut gin, v, g.cout, g.cin, 0.0);
        return gin;
    }
    let mut gcols = vec![0.0; v * g.patch()];
    gemm(grad_out, false, weight, true, &mut gcols, v, g.cout, g.patch(), 0.0);
    let mut gin = vec![0.0; v * g.cin];
    col2im(&gcols, g, &mut gin);
    gin
}

pub(crate) fn backward_weight(input: &[f64], grad_out: &[f64], g: &ConvGeom) -> Vec<f64> {
    let v = g.voxels();
    let mut gw = vec![0.0; g.patch() * g.cout];
    if g.k == 1 {
        gemm(input, true, grad_out, false, &mut gw, g.cin, v, g.cout, 0.0);
    } else {
        let cols = im2col(input, g);
        gemm(&cols, true, grad_out, false, &mut gw, g.patch(), v, g.cout, 0.0);
    }
    gw
}

pub(crate) fn backward_bias(grad_out: &[f64], cout: usize) -> Vec<f64> {
    let mut gb = vec![0.0; cout];
    for row in grad_out.chunks_exact(cout) {
        for (acc, v) in gb.iter_mut().zip(row) {
            *acc += v;
        }
    }
    gb
}
