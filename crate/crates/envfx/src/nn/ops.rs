//! Differentiable operations.
//!
//! Activations follow a `[batch, time, channels]` layout. Masks and labels
//! enter as plain arrays (never tensors): they carry no gradient.

use ndarray::{Array1, Array2, Array3, ArrayD, Axis, Ix1, Ix2, Ix3, IxDyn};

use super::tensor::Tensor;

fn as3(a: &ArrayD<f64>) -> Array3<f64> {
    a.view()
        .into_dimensionality::<Ix3>()
        .expect("expected a 3-D tensor")
        .to_owned()
}

fn as2(a: &ArrayD<f64>) -> Array2<f64> {
    a.view()
        .into_dimensionality::<Ix2>()
        .expect("expected a 2-D tensor")
        .to_owned()
}

fn as1(a: &ArrayD<f64>) -> Array1<f64> {
    a.view()
        .into_dimensionality::<Ix1>()
        .expect("expected a 1-D tensor")
        .to_owned()
}

/// Reshape a 2-D result to `[B,T,C]`. `dot` can hand back Fortran-layout
/// output (inner dimension 1), so normalize the layout first.
fn reshape3(a: Array2<f64>, dims: (usize, usize, usize)) -> ArrayD<f64> {
    a.as_standard_layout()
        .to_owned()
        .into_shape_with_order(dims)
        .expect("element count matches")
        .into_dyn()
}

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

pub fn add(a: &Tensor, b: &Tensor) -> Tensor {
    let value = &*a.value() + &*b.value();
    Tensor::from_op(
        value,
        vec![a.clone(), b.clone()],
        Box::new(|g| vec![Some(g.clone()), Some(g.clone())]),
    )
}

pub fn sub(a: &Tensor, b: &Tensor) -> Tensor {
    let value = &*a.value() - &*b.value();
    Tensor::from_op(
        value,
        vec![a.clone(), b.clone()],
        Box::new(|g| vec![Some(g.clone()), Some(-g)]),
    )
}

pub fn mul(a: &Tensor, b: &Tensor) -> Tensor {
    let av = a.to_array();
    let bv = b.to_array();
    let value = &av * &bv;
    Tensor::from_op(
        value,
        vec![a.clone(), b.clone()],
        Box::new(move |g| vec![Some(g * &bv), Some(g * &av)]),
    )
}

pub fn scale(a: &Tensor, c: f64) -> Tensor {
    let value = a.to_array() * c;
    Tensor::from_op(
        value,
        vec![a.clone()],
        Box::new(move |g| vec![Some(g * c)]),
    )
}

pub fn relu(a: &Tensor) -> Tensor {
    let av = a.to_array();
    let value = av.mapv(|v| v.max(0.0));
    Tensor::from_op(
        value,
        vec![a.clone()],
        Box::new(move |g| {
            let mut gx = g.clone();
            gx.zip_mut_with(&av, |gv, &x| {
                if x <= 0.0 {
                    *gv = 0.0;
                }
            });
            vec![Some(gx)]
        }),
    )
}

/// Add a constant `[T, C]` table (positional encoding) to every batch row.
pub fn add_const_tc(x: &Tensor, table: &Array2<f64>) -> Tensor {
    let xv = as3(&x.value());
    let (_b, t, c) = xv.dim();
    assert_eq!(table.dim(), (t, c));
    let mut out = xv;
    for mut row in out.outer_iter_mut() {
        row += table;
    }
    Tensor::from_op(
        out.into_dyn(),
        vec![x.clone()],
        Box::new(|g| vec![Some(g.clone())]),
    )
}

/// Sum a list of scalar tensors.
pub fn sum_scalars(terms: &[Tensor]) -> Tensor {
    assert!(!terms.is_empty());
    let total: f64 = terms.iter().map(|t| t.scalar()).sum();
    let value = ArrayD::from_elem(IxDyn(&[1]), total);
    let n = terms.len();
    Tensor::from_op(
        value,
        terms.to_vec(),
        Box::new(move |g| vec![Some(g.clone()); n]),
    )
}

/// Sum of every element, as a scalar tensor.
pub fn sum_all(x: &Tensor) -> Tensor {
    let shape = x.shape();
    let total: f64 = x.value().iter().sum();
    Tensor::from_op(
        ArrayD::from_elem(IxDyn(&[1]), total),
        vec![x.clone()],
        Box::new(move |g| {
            let gv = g[[0]];
            vec![Some(ArrayD::from_elem(IxDyn(&shape), gv))]
        }),
    )
}

// ---------------------------------------------------------------------------
// Linear / convolution
// ---------------------------------------------------------------------------

/// `x [B,T,Cin] x w [Cin,Cout] + b [Cout]`.
pub fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let xv = as3(&x.value());
    let wv = as2(&w.value());
    let bv = as1(&b.value());
    let (bs, t, cin) = xv.dim();
    let cout = wv.ncols();
    assert_eq!(wv.nrows(), cin);

    let flat = xv.to_shape((bs * t, cin)).unwrap().to_owned();
    let mut out = flat.dot(&wv);
    out += &bv;
    let value = reshape3(out, (bs, t, cout));

    Tensor::from_op(
        value,
        vec![x.clone(), w.clone(), b.clone()],
        Box::new(move |g| {
            let g3 = as3(g);
            let gflat = g3.to_shape((bs * t, cout)).unwrap().to_owned();
            let gx = reshape3(gflat.dot(&wv.t()), (bs, t, cin));
            let gw = flat.t().dot(&gflat).as_standard_layout().to_owned().into_dyn();
            let gb = gflat.sum_axis(Axis(0)).into_dyn();
            vec![Some(gx), Some(gw), Some(gb)]
        }),
    )
}

/// Same-length 1-D convolution along time via im2col.
///
/// `w` is `[K*Cin, Cout]` (kernel-major); `K` must be odd so symmetric zero
/// padding preserves length. `dilation` spaces the taps.
pub fn conv1d(x: &Tensor, w: &Tensor, b: &Tensor, kernel: usize, dilation: usize) -> Tensor {
    assert!(kernel % 2 == 1, "conv1d kernel must be odd");
    let xv = as3(&x.value());
    let wv = as2(&w.value());
    let bv = as1(&b.value());
    let (bs, t, cin) = xv.dim();
    let cout = wv.ncols();
    assert_eq!(wv.nrows(), kernel * cin, "weight rows must be K*Cin");
    let half = (kernel / 2) * dilation;

    let mut col = Array2::<f64>::zeros((bs * t, kernel * cin));
    for bi in 0..bs {
        for ti in 0..t {
            let row = bi * t + ti;
            for k in 0..kernel {
                let src = ti as i64 + (k * dilation) as i64 - half as i64;
                if src < 0 || src >= t as i64 {
                    continue;
                }
                let src = src as usize;
                for ci in 0..cin {
                    col[[row, k * cin + ci]] = xv[[bi, src, ci]];
                }
            }
        }
    }

    let mut out = col.dot(&wv);
    out += &bv;
    let value = reshape3(out, (bs, t, cout));

    Tensor::from_op(
        value,
        vec![x.clone(), w.clone(), b.clone()],
        Box::new(move |g| {
            let g3 = as3(g);
            let gflat = g3.to_shape((bs * t, cout)).unwrap().to_owned();
            let gw = col.t().dot(&gflat).as_standard_layout().to_owned().into_dyn();
            let gb = gflat.sum_axis(Axis(0)).into_dyn();
            let gcol = gflat.dot(&wv.t());
            let mut gx = Array3::<f64>::zeros((bs, t, cin));
            for bi in 0..bs {
                for ti in 0..t {
                    let row = bi * t + ti;
                    for k in 0..kernel {
                        let src = ti as i64 + (k * dilation) as i64 - half as i64;
                        if src < 0 || src >= t as i64 {
                            continue;
                        }
                        let src = src as usize;
                        for ci in 0..cin {
                            gx[[bi, src, ci]] += gcol[[row, k * cin + ci]];
                        }
                    }
                }
            }
            vec![Some(gx.into_dyn()), Some(gw), Some(gb)]
        }),
    )
}

/// Kernel-2 stride-2 transposed convolution: `[B,T,Cin] -> [B,2T,Cout]`.
///
/// `w` is `[2*Cin, Cout]`; output frame `2t + j` draws on input frame `t`
/// through tap `j`.
pub fn conv1d_transpose2(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let xv = as3(&x.value());
    let wv = as2(&w.value());
    let bv = as1(&b.value());
    let (bs, t, cin) = xv.dim();
    let cout = wv.ncols();
    assert_eq!(wv.nrows(), 2 * cin);

    let mut out = Array3::<f64>::zeros((bs, 2 * t, cout));
    for bi in 0..bs {
        for ti in 0..t {
            for j in 0..2 {
                for co in 0..cout {
                    let mut acc = bv[co];
                    for ci in 0..cin {
                        acc += xv[[bi, ti, ci]] * wv[[j * cin + ci, co]];
                    }
                    out[[bi, 2 * ti + j, co]] = acc;
                }
            }
        }
    }

    Tensor::from_op(
        out.into_dyn(),
        vec![x.clone(), w.clone(), b.clone()],
        Box::new(move |g| {
            let g3 = as3(g);
            let mut gx = Array3::<f64>::zeros((bs, t, cin));
            let mut gw = Array2::<f64>::zeros((2 * cin, cout));
            let mut gb = Array1::<f64>::zeros(cout);
            for bi in 0..bs {
                for ti in 0..t {
                    for j in 0..2 {
                        for co in 0..cout {
                            let gv = g3[[bi, 2 * ti + j, co]];
                            gb[co] += gv;
                            for ci in 0..cin {
                                gx[[bi, ti, ci]] += gv * wv[[j * cin + ci, co]];
                                gw[[j * cin + ci, co]] += gv * xv[[bi, ti, ci]];
                            }
                        }
                    }
                }
            }
            vec![
                Some(gx.into_dyn()),
                Some(gw.into_dyn()),
                Some(gb.into_dyn()),
            ]
        }),
    )
}

/// Kernel-2 stride-2 max pooling along time. Ties resolve to the earlier
/// frame, keeping backward deterministic.
pub fn maxpool2(x: &Tensor) -> Tensor {
    let xv = as3(&x.value());
    let (bs, t, c) = xv.dim();
    assert!(t % 2 == 0, "maxpool2 needs an even time length");
    let to = t / 2;
    let mut out = Array3::<f64>::zeros((bs, to, c));
    let mut pick = vec![0u8; bs * to * c];
    for bi in 0..bs {
        for ti in 0..to {
            for ci in 0..c {
                let a = xv[[bi, 2 * ti, ci]];
                let b = xv[[bi, 2 * ti + 1, ci]];
                if b > a {
                    out[[bi, ti, ci]] = b;
                    pick[(bi * to + ti) * c + ci] = 1;
                } else {
                    out[[bi, ti, ci]] = a;
                }
            }
        }
    }
    Tensor::from_op(
        out.into_dyn(),
        vec![x.clone()],
        Box::new(move |g| {
            let g3 = as3(g);
            let mut gx = Array3::<f64>::zeros((bs, t, c));
            for bi in 0..bs {
                for ti in 0..to {
                    for ci in 0..c {
                        let j = pick[(bi * to + ti) * c + ci] as usize;
                        gx[[bi, 2 * ti + j, ci]] = g3[[bi, ti, ci]];
                    }
                }
            }
            vec![Some(gx.into_dyn())]
        }),
    )
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

/// Layer normalization over the channel axis with learned gain and bias.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Tensor {
    let xv = as3(&x.value());
    let gv = as1(&gain.value());
    let bv = as1(&bias.value());
    let (bs, t, c) = xv.dim();

    let mut xhat = Array3::<f64>::zeros((bs, t, c));
    let mut inv_std = Array2::<f64>::zeros((bs, t));
    for bi in 0..bs {
        for ti in 0..t {
            let row = xv.slice(ndarray::s![bi, ti, ..]);
            let mean = row.sum() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[[bi, ti]] = is;
            for ci in 0..c {
                xhat[[bi, ti, ci]] = (xv[[bi, ti, ci]] - mean) * is;
            }
        }
    }
    let mut out = xhat.clone();
    for ci in 0..c {
        let mut lane = out.slice_mut(ndarray::s![.., .., ci]);
        lane.mapv_inplace(|v| v * gv[ci]);
        lane += bv[ci];
    }

    Tensor::from_op(
        out.into_dyn(),
        vec![x.clone(), gain.clone(), bias.clone()],
        Box::new(move |g| {
            let g3 = as3(g);
            let mut ggain = Array1::<f64>::zeros(c);
            let mut gbias = Array1::<f64>::zeros(c);
            let mut gx = Array3::<f64>::zeros((bs, t, c));
            for bi in 0..bs {
                for ti in 0..t {
                    let mut mean_gy = 0.0;
                    let mut mean_gy_xhat = 0.0;
                    for ci in 0..c {
                        let gy = g3[[bi, ti, ci]] * gv[ci];
                        mean_gy += gy;
                        mean_gy_xhat += gy * xhat[[bi, ti, ci]];
                        ggain[ci] += g3[[bi, ti, ci]] * xhat[[bi, ti, ci]];
                        gbias[ci] += g3[[bi, ti, ci]];
                    }
                    mean_gy /= c as f64;
                    mean_gy_xhat /= c as f64;
                    let is = inv_std[[bi, ti]];
                    for ci in 0..c {
                        let gy = g3[[bi, ti, ci]] * gv[ci];
                        gx[[bi, ti, ci]] =
                            is * (gy - mean_gy - xhat[[bi, ti, ci]] * mean_gy_xhat);
                    }
                }
            }
            vec![
                Some(gx.into_dyn()),
                Some(ggain.into_dyn()),
                Some(gbias.into_dyn()),
            ]
        }),
    )
}

/// Batch normalization in training mode: statistics over (batch, time) per
/// channel. Returns the output plus the biased batch mean/variance so the
/// caller can update running statistics.
pub fn batch_norm_train(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> (Tensor, Array1<f64>, Array1<f64>) {
    let xv = as3(&x.value());
    let gv = as1(&gamma.value());
    let bv = as1(&beta.value());
    let (bs, t, c) = xv.dim();
    let n = (bs * t) as f64;

    let mut mean = Array1::<f64>::zeros(c);
    let mut var = Array1::<f64>::zeros(c);
    for ci in 0..c {
        let lane = xv.slice(ndarray::s![.., .., ci]);
        let m = lane.sum() / n;
        mean[ci] = m;
        var[ci] = lane.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
    }

    let mut xhat = Array3::<f64>::zeros((bs, t, c));
    let mut out = Array3::<f64>::zeros((bs, t, c));
    let inv_std: Array1<f64> = var.mapv(|v| 1.0 / (v + eps).sqrt());
    for bi in 0..bs {
        for ti in 0..t {
            for ci in 0..c {
                let xh = (xv[[bi, ti, ci]] - mean[ci]) * inv_std[ci];
                xhat[[bi, ti, ci]] = xh;
                out[[bi, ti, ci]] = gv[ci] * xh + bv[ci];
            }
        }
    }

    let mean_out = mean.clone();
    let var_out = var.clone();
    let tensor = Tensor::from_op(
        out.into_dyn(),
        vec![x.clone(), gamma.clone(), beta.clone()],
        Box::new(move |g| {
            let g3 = as3(g);
            let mut ggamma = Array1::<f64>::zeros(c);
            let mut gbeta = Array1::<f64>::zeros(c);
            let mut mean_gy = Array1::<f64>::zeros(c);
            let mut mean_gy_xhat = Array1::<f64>::zeros(c);
            for bi in 0..bs {
                for ti in 0..t {
                    for ci in 0..c {
                        let gval = g3[[bi, ti, ci]];
                        ggamma[ci] += gval * xhat[[bi, ti, ci]];
                        gbeta[ci] += gval;
                        let gy = gval * gv[ci];
                        mean_gy[ci] += gy;
                        mean_gy_xhat[ci] += gy * xhat[[bi, ti, ci]];
                    }
                }
            }
            mean_gy.mapv_inplace(|v| v / n);
            mean_gy_xhat.mapv_inplace(|v| v / n);
            let mut gx = Array3::<f64>::zeros((bs, t, c));
            for bi in 0..bs {
                for ti in 0..t {
                    for ci in 0..c {
                        let gy = g3[[bi, ti, ci]] * gv[ci];
                        gx[[bi, ti, ci]] = inv_std[ci]
                            * (gy - mean_gy[ci] - xhat[[bi, ti, ci]] * mean_gy_xhat[ci]);
                    }
                }
            }
            vec![
                Some(gx.into_dyn()),
                Some(ggamma.into_dyn()),
                Some(gbeta.into_dyn()),
            ]
        }),
    );
    (tensor, mean_out, var_out)
}

/// Batch normalization in inference mode, using fixed running statistics.
pub fn batch_norm_eval(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running_mean: &Array1<f64>,
    running_var: &Array1<f64>,
    eps: f64,
) -> Tensor {
    let xv = as3(&x.value());
    let gv = as1(&gamma.value());
    let bv = as1(&beta.value());
    let (bs, t, c) = xv.dim();
    let inv_std: Array1<f64> = running_var.mapv(|v| 1.0 / (v + eps).sqrt());

    let mut xhat = Array3::<f64>::zeros((bs, t, c));
    let mut out = Array3::<f64>::zeros((bs, t, c));
    for bi in 0..bs {
        for ti in 0..t {
            for ci in 0..c {
                let xh = (xv[[bi, ti, ci]] - running_mean[ci]) * inv_std[ci];
                xhat[[bi, ti, ci]] = xh;
                out[[bi, ti, ci]] = gv[ci] * xh + bv[ci];
            }
        }
    }

    Tensor::from_op(
        out.into_dyn(),
        vec![x.clone(), gamma.clone(), beta.clone()],
        Box::new(move |g| {
            let g3 = as3(g);
            let mut gx = Array3::<f64>::zeros((bs, t, c));
            let mut ggamma = Array1::<f64>::zeros(c);
            let mut gbeta = Array1::<f64>::zeros(c);
            for bi in 0..bs {
                for ti in 0..t {
                    for ci in 0..c {
                        let gval = g3[[bi, ti, ci]];
                        gx[[bi, ti, ci]] = gval * gv[ci] * inv_std[ci];
                        ggamma[ci] += gval * xhat[[bi, ti, ci]];
                        gbeta[ci] += gval;
                    }
                }
            }
            vec![
                Some(gx.into_dyn()),
                Some(ggamma.into_dyn()),
                Some(gbeta.into_dyn()),
            ]
        }),
    )
}

// ---------------------------------------------------------------------------
// Attention pieces
// ---------------------------------------------------------------------------

/// `[B,T,C] -> [B*heads, T, C/heads]`.
pub fn split_heads(x: &Tensor, heads: usize) -> Tensor {
    let xv = as3(&x.value());
    let (bs, t, c) = xv.dim();
    assert!(c % heads == 0);
    let hd = c / heads;
    let mut out = Array3::<f64>::zeros((bs * heads, t, hd));
    for bi in 0..bs {
        for hi in 0..heads {
            for ti in 0..t {
                for j in 0..hd {
                    out[[bi * heads + hi, ti, j]] = xv[[bi, ti, hi * hd + j]];
                }
            }
        }
    }
    Tensor::from_op(
        out.into_dyn(),
        vec![x.clone()],
        Box::new(move |g| {
            let g3 = as3(g);
            let mut gx = Array3::<f64>::zeros((bs, t, c));
            for bi in 0..bs {
                for hi in 0..heads {
                    for ti in 0..t {
                        for j in 0..hd {
                            gx[[bi, ti, hi * hd + j]] = g3[[bi * heads + hi, ti, j]];
                        }
                    }
                }
            }
            vec![Some(gx.into_dyn())]
        }),
    )
}

/// Inverse of [`split_heads`].
pub fn merge_heads(x: &Tensor, heads: usize) -> Tensor {
    let xv = as3(&x.value());
    let (gh, t, hd) = xv.dim();
    assert!(gh % heads == 0);
    let bs = gh / heads;
    let c = heads * hd;
    let mut out = Array3::<f64>::zeros((bs, t, c));
    for bi in 0..bs {
        for hi in 0..heads {
            for ti in 0..t {
                for j in 0..hd {
                    out[[bi, ti, hi * hd + j]] = xv[[bi * heads + hi, ti, j]];
                }
            }
        }
    }
    Tensor::from_op(
        out.into_dyn(),
        vec![x.clone()],
        Box::new(move |g| {
            let g3 = as3(g);
            let mut gx = Array3::<f64>::zeros((gh, t, hd));
            for bi in 0..bs {
                for hi in 0..heads {
                    for ti in 0..t {
                        for j in 0..hd {
                            gx[[bi * heads + hi, ti, j]] = g3[[bi, ti, hi * hd + j]];
                        }
                    }
                }
            }
            vec![Some(gx.into_dyn())]
        }),
    )
}

/// Batched `A x B^T`: `[G,T,C] x [G,S,C] -> [G,T,S]`.
pub fn bmm_nt(a: &Tensor, b: &Tensor) -> Tensor {
    let av = as3(&a.value());
    let bv = as3(&b.value());
    let (g_, t, c) = av.dim();
    let (gb, s, cb) = bv.dim();
    assert_eq!(g_, gb);
    assert_eq!(c, cb);
    let mut out = Array3::<f64>::zeros((g_, t, s));
    for gi in 0..g_ {
        let o = av.index_axis(Axis(0), gi).dot(&bv.index_axis(Axis(0), gi).t());
        out.index_axis_mut(Axis(0), gi).assign(&o);
    }
    Tensor::from_op(
        out.into_dyn(),
        vec![a.clone(), b.clone()],
        Box::new(move |g| {
            let g3 = as3(g);
            let mut ga = Array3::<f64>::zeros((g_, t, c));
            let mut gb_ = Array3::<f64>::zeros((g_, s, c));
            for gi in 0..g_ {
                let gg = g3.index_axis(Axis(0), gi);
                ga.index_axis_mut(Axis(0), gi)
                    .assign(&gg.dot(&bv.index_axis(Axis(0), gi)));
                gb_.index_axis_mut(Axis(0), gi)
                    .assign(&gg.t().dot(&av.index_axis(Axis(0), gi)));
            }
            vec![Some(ga.into_dyn()), Some(gb_.into_dyn())]
        }),
    )
}

/// Batched `A x B`: `[G,T,S] x [G,S,C] -> [G,T,C]`.
pub fn bmm_nn(a: &Tensor, b: &Tensor) -> Tensor {
    let av = as3(&a.value());
    let bv = as3(&b.value());
    let (g_, t, s) = av.dim();
    let (gb, sb, c) = bv.dim();
    assert_eq!(g_, gb);
    assert_eq!(s, sb);
    let mut out = Array3::<f64>::zeros((g_, t, c));
    for gi in 0..g_ {
        let o = av.index_axis(Axis(0), gi).dot(&bv.index_axis(Axis(0), gi));
        out.index_axis_mut(Axis(0), gi).assign(&o);
    }
    Tensor::from_op(
        out.into_dyn(),
        vec![a.clone(), b.clone()],
        Box::new(move |g| {
            let g3 = as3(g);
            let mut ga = Array3::<f64>::zeros((g_, t, s));
            let mut gb_ = Array3::<f64>::zeros((g_, s, c));
            for gi in 0..g_ {
                let gg = g3.index_axis(Axis(0), gi);
                ga.index_axis_mut(Axis(0), gi)
                    .assign(&gg.dot(&bv.index_axis(Axis(0), gi).t()));
                gb_.index_axis_mut(Axis(0), gi)
                    .assign(&av.index_axis(Axis(0), gi).t().dot(&gg));
            }
            vec![Some(ga.into_dyn()), Some(gb_.into_dyn())]
        }),
    )
}

/// Row softmax over the last axis with invalid keys excluded.
///
/// `key_valid` is `[G, S]`; masked positions get probability exactly 0.
pub fn masked_softmax(scores: &Tensor, key_valid: &Array2<bool>) -> Tensor {
    let sv = as3(&scores.value());
    let (g_, t, s) = sv.dim();
    assert_eq!(key_valid.dim(), (g_, s));
    let mut probs = Array3::<f64>::zeros((g_, t, s));
    for gi in 0..g_ {
        for ti in 0..t {
            let mut maxv = f64::NEG_INFINITY;
            for si in 0..s {
                if key_valid[[gi, si]] {
                    maxv = maxv.max(sv[[gi, ti, si]]);
                }
            }
            if !maxv.is_finite() {
                continue; // no valid keys; row stays zero
            }
            let mut denom = 0.0;
            for si in 0..s {
                if key_valid[[gi, si]] {
                    let e = (sv[[gi, ti, si]] - maxv).exp();
                    probs[[gi, ti, si]] = e;
                    denom += e;
                }
            }
            for si in 0..s {
                probs[[gi, ti, si]] /= denom;
            }
        }
    }

    let saved = probs.clone();
    Tensor::from_op(
        probs.into_dyn(),
        vec![scores.clone()],
        Box::new(move |g| {
            let g3 = as3(g);
            let mut gx = Array3::<f64>::zeros((g_, t, s));
            for gi in 0..g_ {
                for ti in 0..t {
                    let mut dot = 0.0;
                    for si in 0..s {
                        dot += g3[[gi, ti, si]] * saved[[gi, ti, si]];
                    }
                    for si in 0..s {
                        gx[[gi, ti, si]] = saved[[gi, ti, si]] * (g3[[gi, ti, si]] - dot);
                    }
                }
            }
            vec![Some(gx.into_dyn())]
        }),
    )
}

// ---------------------------------------------------------------------------
// Masking and reductions
// ---------------------------------------------------------------------------

/// Zero every time step whose mask entry is false.
pub fn mask_time(x: &Tensor, mask: &Array2<bool>) -> Tensor {
    let xv = as3(&x.value());
    let (bs, t, c) = xv.dim();
    assert_eq!(mask.dim(), (bs, t));
    let mut out = xv;
    for bi in 0..bs {
        for ti in 0..t {
            if !mask[[bi, ti]] {
                for ci in 0..c {
                    out[[bi, ti, ci]] = 0.0;
                }
            }
        }
    }
    let m = mask.clone();
    Tensor::from_op(
        out.into_dyn(),
        vec![x.clone()],
        Box::new(move |g| {
            let mut gx = as3(g);
            for bi in 0..bs {
                for ti in 0..t {
                    if !m[[bi, ti]] {
                        for ci in 0..c {
                            gx[[bi, ti, ci]] = 0.0;
                        }
                    }
                }
            }
            vec![Some(gx.into_dyn())]
        }),
    )
}

/// Mean over valid time steps per batch item: `[B,T,C] -> [B,C]`.
pub fn masked_mean_time(x: &Tensor, mask: &Array2<bool>) -> Tensor {
    let xv = as3(&x.value());
    let (bs, t, c) = xv.dim();
    assert_eq!(mask.dim(), (bs, t));
    let counts: Vec<f64> = (0..bs)
        .map(|bi| (0..t).filter(|&ti| mask[[bi, ti]]).count() as f64)
        .collect();
    let mut out = Array2::<f64>::zeros((bs, c));
    for bi in 0..bs {
        if counts[bi] == 0.0 {
            continue;
        }
        for ti in 0..t {
            if mask[[bi, ti]] {
                for ci in 0..c {
                    out[[bi, ci]] += xv[[bi, ti, ci]];
                }
            }
        }
        for ci in 0..c {
            out[[bi, ci]] /= counts[bi];
        }
    }
    let m = mask.clone();
    Tensor::from_op(
        out.into_dyn(),
        vec![x.clone()],
        Box::new(move |g| {
            let g2 = as2(g);
            let mut gx = Array3::<f64>::zeros((bs, t, c));
            for bi in 0..bs {
                if counts[bi] == 0.0 {
                    continue;
                }
                for ti in 0..t {
                    if m[[bi, ti]] {
                        for ci in 0..c {
                            gx[[bi, ti, ci]] = g2[[bi, ci]] / counts[bi];
                        }
                    }
                }
            }
            vec![Some(gx.into_dyn())]
        }),
    )
}

/// Mean squared error over valid cells: `pred [B,T,C]`, `target [B,T,C]`,
/// `mask [B,T]`. A fully masked batch contributes exactly 0.
pub fn masked_mse(pred: &Tensor, target: &Array3<f64>, mask: &Array2<bool>) -> Tensor {
    let pv = as3(&pred.value());
    let (bs, t, c) = pv.dim();
    assert_eq!(target.dim(), (bs, t, c));
    assert_eq!(mask.dim(), (bs, t));
    let count = mask.iter().filter(|&&m| m).count() * c;

    let mut total = 0.0;
    for bi in 0..bs {
        for ti in 0..t {
            if mask[[bi, ti]] {
                for ci in 0..c {
                    let d = pv[[bi, ti, ci]] - target[[bi, ti, ci]];
                    total += d * d;
                }
            }
        }
    }
    let loss = if count == 0 { 0.0 } else { total / count as f64 };

    let tv = target.clone();
    let m = mask.clone();
    Tensor::from_op(
        ArrayD::from_elem(IxDyn(&[1]), loss),
        vec![pred.clone()],
        Box::new(move |g| {
            let gs = g[[0]];
            let mut gx = Array3::<f64>::zeros((bs, t, c));
            if count > 0 {
                let k = 2.0 * gs / count as f64;
                for bi in 0..bs {
                    for ti in 0..t {
                        if m[[bi, ti]] {
                            for ci in 0..c {
                                gx[[bi, ti, ci]] = k * (pv[[bi, ti, ci]] - tv[[bi, ti, ci]]);
                            }
                        }
                    }
                }
            }
            vec![Some(gx.into_dyn())]
        }),
    )
}

/// Mean cross-entropy of `[B,K]` logits against class labels.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Tensor {
    let lv = as2(&logits.value());
    let (bs, k) = lv.dim();
    assert_eq!(labels.len(), bs);

    let mut probs = Array2::<f64>::zeros((bs, k));
    let mut loss = 0.0;
    for bi in 0..bs {
        let row = lv.row(bi);
        let maxv = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for ki in 0..k {
            let e = (row[ki] - maxv).exp();
            probs[[bi, ki]] = e;
            denom += e;
        }
        for ki in 0..k {
            probs[[bi, ki]] /= denom;
        }
        loss -= (probs[[bi, labels[bi]]]).max(1e-300).ln();
    }
    loss /= bs as f64;

    let lab = labels.to_vec();
    Tensor::from_op(
        ArrayD::from_elem(IxDyn(&[1]), loss),
        vec![logits.clone()],
        Box::new(move |g| {
            let gs = g[[0]] / bs as f64;
            let mut gx = probs.clone();
            for bi in 0..bs {
                gx[[bi, lab[bi]]] -= 1.0;
            }
            gx.mapv_inplace(|v| v * gs);
            vec![Some(gx.into_dyn())]
        }),
    )
}

/// Table lookup: `table [N,D]`, `ids [B,T]` -> `[B,T,D]`.
pub fn embedding(table: &Tensor, ids: &Array2<usize>) -> Tensor {
    let tv = as2(&table.value());
    let (n, d) = tv.dim();
    let (bs, t) = ids.dim();
    let mut out = Array3::<f64>::zeros((bs, t, d));
    for bi in 0..bs {
        for ti in 0..t {
            let idx = ids[[bi, ti]];
            assert!(idx < n, "embedding index {idx} out of range");
            out.slice_mut(ndarray::s![bi, ti, ..]).assign(&tv.row(idx));
        }
    }
    let idv = ids.clone();
    Tensor::from_op(
        out.into_dyn(),
        vec![table.clone()],
        Box::new(move |g| {
            let g3 = as3(g);
            let mut gt = Array2::<f64>::zeros((n, d));
            for bi in 0..bs {
                for ti in 0..t {
                    let idx = idv[[bi, ti]];
                    let mut row = gt.row_mut(idx);
                    row += &g3.slice(ndarray::s![bi, ti, ..]);
                }
            }
            vec![Some(gt.into_dyn())]
        }),
    )
}

// ---------------------------------------------------------------------------
// Gradient reversal
// ---------------------------------------------------------------------------

/// Identity forward; negated gradient backward.
pub fn grl(x: &Tensor) -> Tensor {
    Tensor::from_op(
        x.to_array(),
        vec![x.clone()],
        Box::new(|g| vec![Some(-g)]),
    )
}

/// Identity forward; per-sample gradient scaling backward. `scales` has one
/// entry per batch row (the leading axis).
pub fn grl_row_scale(x: &Tensor, scales: &[f64]) -> Tensor {
    let shape = x.shape();
    assert_eq!(shape[0], scales.len(), "one scale per batch row");
    let sc = scales.to_vec();
    Tensor::from_op(
        x.to_array(),
        vec![x.clone()],
        Box::new(move |g| {
            let mut gx = g.clone();
            for (bi, mut row) in gx.outer_iter_mut().enumerate() {
                row.mapv_inplace(|v| v * sc[bi]);
            }
            vec![Some(gx)]
        }),
    )
}

/// Channel concatenation: `[B,T,C1] ++ [B,T,C2] -> [B,T,C1+C2]`.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Tensor {
    let av = as3(&a.value());
    let bv = as3(&b.value());
    let (bs, t, c1) = av.dim();
    let (bs2, t2, c2) = bv.dim();
    assert_eq!((bs, t), (bs2, t2));
    let mut out = Array3::<f64>::zeros((bs, t, c1 + c2));
    out.slice_mut(ndarray::s![.., .., ..c1]).assign(&av);
    out.slice_mut(ndarray::s![.., .., c1..]).assign(&bv);
    Tensor::from_op(
        out.into_dyn(),
        vec![a.clone(), b.clone()],
        Box::new(move |g| {
            let g3 = as3(g);
            let ga = g3.slice(ndarray::s![.., .., ..c1]).to_owned();
            let gb = g3.slice(ndarray::s![.., .., c1..]).to_owned();
            vec![Some(ga.into_dyn()), Some(gb.into_dyn())]
        }),
    )
}

/// Expand a `[B,S]` mask to `[B*heads, S]` for multi-head attention.
pub fn expand_mask_heads(mask: &Array2<bool>, heads: usize) -> Array2<bool> {
    let (bs, s) = mask.dim();
    let mut out = Array2::from_elem((bs * heads, s), false);
    for bi in 0..bs {
        for hi in 0..heads {
            for si in 0..s {
                out[[bi * heads + hi, si]] = mask[[bi, si]];
            }
        }
    }
    out
}
