//! 3x3 convolution with padding 1, lowered to one GEMM per call via im2col.

use super::{shape_err, Node, Op, Tape, Tensor, Var};
use crate::error::Result;
use crate::scalar::Real;

#[derive(Debug)]
pub(super) struct ConvRecord<T> {
    input: Var,
    weight: Var,
    bias: Var,
    stride: usize,
    dims: ConvDims,
    /// im2col matrix `[C*9, B*Ho*Wo]`.
    cols: Vec<T>,
}

#[derive(Debug, Clone, Copy)]
struct ConvDims {
    batch: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    ho: usize,
    wo: usize,
}

impl ConvDims {
    fn k(&self) -> usize {
        self.c_in * 9
    }

    fn hw_out(&self) -> usize {
        self.ho * self.wo
    }

    fn n(&self) -> usize {
        self.batch * self.hw_out()
    }
}

fn im2col<T: Real>(input: &[T], d: &ConvDims, stride: usize) -> Vec<T> {
    let n = d.n();
    let hw_out = d.hw_out();
    let mut cols = vec![T::zero(); d.k() * n];
    for b in 0..d.batch {
        for c in 0..d.c_in {
            let plane = &input[(b * d.c_in + c) * d.h * d.w..][..d.h * d.w];
            for ky in 0..3 {
                for kx in 0..3 {
                    let row = &mut cols[((c * 3 + ky) * 3 + kx) * n + b * hw_out..][..hw_out];
                    for oy in 0..d.ho {
                        let iy = (oy * stride + ky) as isize - 1;
                        if iy < 0 || iy >= d.h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * d.w..][..d.w];
                        let dst = &mut row[oy * d.wo..][..d.wo];
                        for (ox, v) in dst.iter_mut().enumerate() {
                            let ix = (ox * stride + kx) as isize - 1;
                            if ix >= 0 && ix < d.w as isize {
                                *v = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Real>(cols: &[T], d: &ConvDims, stride: usize, out: &mut [T]) {
    let n = d.n();
    let hw_out = d.hw_out();
    for b in 0..d.batch {
        for c in 0..d.c_in {
            let plane = &mut out[(b * d.c_in + c) * d.h * d.w..][..d.h * d.w];
            for ky in 0..3 {
                for kx in 0..3 {
                    let row = &cols[((c * 3 + ky) * 3 + kx) * n + b * hw_out..][..hw_out];
                    for oy in 0..d.ho {
                        let iy = (oy * stride + ky) as isize - 1;
                        if iy < 0 || iy >= d.h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * d.w..][..d.w];
                        for ox in 0..d.wo {
                            let ix = (ox * stride + kx) as isize - 1;
                            if ix >= 0 && ix < d.w as isize {
                                dst[ix as usize] += row[oy * d.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

impl<T: Real> Tape<T> {
    /// 3x3 convolution, padding 1. `input` is `[B, C, H, W]`, `weight` is
    /// `[O, C, 3, 3]`, `bias` is `[O]`; the output is `[B, O, Ho, Wo]` with
    /// `Ho = (H - 1) / stride + 1`.
    pub fn conv2d(&self, input: Var, weight: Var, bias: Var, stride: usize) -> Result<Var> {
        let (value, rec) = {
            let nodes = self.nodes.borrow();
            let (x, w, b) = (&nodes[input.0].value, &nodes[weight.0].value, &nodes[bias.0].value);
            let bad = || {
                shape_err(
                    "conv2d_3x3",
                    format!("input {:?}, weight {:?}, bias {:?}, stride {stride}", x.shape, w.shape, b.shape),
                )
            };
            if stride == 0 || x.shape.len() != 4 || w.shape.len() != 4 || b.shape.len() != 1 {
                return Err(bad());
            }
            if w.shape[1] != x.shape[1] || w.shape[2] != 3 || w.shape[3] != 3 || b.shape[0] != w.shape[0] {
                return Err(bad());
            }
            let (h, wd) = (x.shape[2], x.shape[3]);
            if h == 0 || wd == 0 {
                return Err(bad());
            }
            let d = ConvDims {
                batch: x.shape[0],
                c_in: x.shape[1],
                h,
                w: wd,
                c_out: w.shape[0],
                ho: (h - 1) / stride + 1,
                wo: (wd - 1) / stride + 1,
            };
            let cols = im2col(&x.data, &d, stride);
            let n = d.n();
            let mut g = vec![T::zero(); d.c_out * n];
            T::gemm(
                d.c_out,
                d.k(),
                n,
                T::one(),
                &w.data,
                (d.k() as isize, 1),
                &cols,
                (n as isize, 1),
                T::zero(),
                &mut g,
                (n as isize, 1),
            );
            let hw = d.hw_out();
            let mut out = vec![T::zero(); d.batch * d.c_out * hw];
            for bi in 0..d.batch {
                for o in 0..d.c_out {
                    let src = &g[o * n + bi * hw..][..hw];
                    let dst = &mut out[(bi * d.c_out + o) * hw..][..hw];
                    let bo = b.data[o];
                    for (dv, &sv) in dst.iter_mut().zip(src) {
                        *dv = sv + bo;
                    }
                }
            }
            (
                Tensor {
                    shape: vec![d.batch, d.c_out, d.ho, d.wo],
                    data: out,
                },
                ConvRecord {
                    input,
                    weight,
                    bias,
                    stride,
                    dims: d,
                    cols,
                },
            )
        };
        let rg = self.requires(&[input, weight, bias]);
        Ok(self.push(value, Op::Conv2d(rec), rg))
    }
}

pub(super) fn backward<T: Real>(
    nodes: &[Node<T>],
    rec: &ConvRecord<T>,
    g_out: &[T],
    grads: &mut [Option<Vec<T>>],
) {
    let d = rec.dims;
    let n = d.n();
    let hw = d.hw_out();
    // Output gradient rearranged to the GEMM layout [O, B*Ho*Wo].
    let mut g = vec![T::zero(); d.c_out * n];
    for bi in 0..d.batch {
        for o in 0..d.c_out {
            g[o * n + bi * hw..][..hw].copy_from_slice(&g_out[(bi * d.c_out + o) * hw..][..hw]);
        }
    }
    super::accumulate(nodes, grads, rec.bias, |gb| {
        for o in 0..d.c_out {
            gb[o] += g[o * n..(o + 1) * n].iter().copied().sum::<T>();
        }
    });
    super::accumulate(nodes, grads, rec.weight, |gw| {
        T::gemm(
            d.c_out,
            n,
            d.k(),
            T::one(),
            &g,
            (n as isize, 1),
            &rec.cols,
            (1, n as isize),
            T::one(),
            gw,
            (d.k() as isize, 1),
        );
    });
    let w = &nodes[rec.weight.0].value.data;
    super::accumulate(nodes, grads, rec.input, |gx| {
        let mut dcols = vec![T::zero(); d.k() * n];
        T::gemm(
            d.k(),
            d.c_out,
            n,
            T::one(),
            w,
            (1, d.k() as isize),
            &g,
            (n as isize, 1),
            T::zero(),
            &mut dcols,
            (n as isize, 1),
        );
        col2im(&dcols, &d, rec.stride, gx);
    });
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::GradCheck;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct nested-loop convolution used as an oracle.
    fn naive_conv(x: &[f64], xs: [usize; 4], w: &[f64], o: usize, b: &[f64], stride: usize) -> Vec<f64> {
        let [bn, c, h, wd] = xs;
        let ho = (h - 1) / stride + 1;
        let wo = (wd - 1) / stride + 1;
        let mut out = vec![0.0; bn * o * ho * wo];
        for bi in 0..bn {
            for oc in 0..o {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = b[oc];
                        for ic in 0..c {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let iy = (oy * stride + ky) as isize - 1;
                                    let ix = (ox * stride + kx) as isize - 1;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    acc += w[((oc * c + ic) * 3 + ky) * 3 + kx]
                                        * x[((bi * c + ic) * h + iy as usize) * wd + ix as usize];
                                }
                            }
                        }
                        out[((bi * o + oc) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn identity_kernel_copies_input() {
        let tape = Tape::new();
        let xv: Vec<f64> = (1..=9).map(f64::from).collect();
        let x = tape.param(Tensor::new(vec![1, 1, 3, 3], xv.clone()).unwrap());
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let w = tape.constant(Tensor::new(vec![1, 1, 3, 3], k).unwrap());
        let b = tape.constant(Tensor::new(vec![1], vec![0.0]).unwrap());
        let y = tape.conv2d(x, w, b, 1).unwrap();
        assert_eq!(tape.value(y).data(), &xv[..]);
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[1.0; 9]);
    }

    #[test]
    fn matches_naive_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for &(stride, h, wd) in &[(1, 5, 6), (2, 7, 8), (2, 8, 8)] {
            let xs = [2, 3, h, wd];
            let xv: Vec<f64> = (0..2 * 3 * h * wd).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let wv: Vec<f64> = (0..4 * 3 * 9).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let bv: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let tape = Tape::new();
            let x = tape.constant(Tensor::new(xs.to_vec(), xv.clone()).unwrap());
            let w = tape.constant(Tensor::new(vec![4, 3, 3, 3], wv.clone()).unwrap());
            let b = tape.constant(Tensor::new(vec![4], bv.clone()).unwrap());
            let y = tape.conv2d(x, w, b, stride).unwrap();
            let expect = naive_conv(&xv, xs, &wv, 4, &bv, stride);
            for (a, e) in tape.value(y).data().iter().zip(&expect) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn weight_and_bias_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let xv: Vec<f64> = (0..2 * 2 * 6 * 5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mix: Vec<f64> = (0..2 * 3 * 3 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let n_w = 3 * 2 * 9;
        let p0: Vec<f64> = (0..n_w + 3).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let eval = |p: &[f64]| {
            let tape = Tape::new();
            let x = tape.constant(Tensor::new(vec![2, 2, 6, 5], xv.clone()).unwrap());
            let w = tape.param(Tensor::new(vec![3, 2, 3, 3], p[..n_w].to_vec()).unwrap());
            let b = tape.param(Tensor::new(vec![3], p[n_w..].to_vec()).unwrap());
            let y = tape.conv2d(x, w, b, 2).unwrap();
            let y = tape.swish(y);
            let m = tape.constant(Tensor::new(tape.shape(y), mix.clone()).unwrap());
            let z = tape.mul(y, m).unwrap();
            let s = tape.sum(z);
            let g = tape.backward(s).unwrap();
            let mut grad = g.get(w).unwrap().to_vec();
            grad.extend_from_slice(g.get(b).unwrap());
            (tape.item(s), grad)
        };
        let report = GradCheck::new(1e-5, p0.len()).run(eval, &p0);
        assert!(report.max_rel_err < 1e-7, "{report:?}");
    }

    #[test]
    fn rejects_bad_shapes() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(vec![1, 2, 4, 4]));
        let w = tape.constant(Tensor::zeros(vec![3, 1, 3, 3]));
        let b = tape.constant(Tensor::zeros(vec![3]));
        let err = tape.conv2d(x, w, b, 1).unwrap_err().to_string();
        assert!(err.contains("conv2d_3x3"), "{err}");
    }
}
