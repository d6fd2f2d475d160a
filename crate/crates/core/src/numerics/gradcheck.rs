use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::numerics::graph::{Graph, Var};
use crate::numerics::tensor::Tensor;

/// Outcome of comparing one op's autodiff gradient against central finite
/// differences.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub op_name: String,
    pub max_rel_error: f64,
    pub passed: bool,
}

/// Central-difference check of `f`'s gradient at `x`.
///
/// `f` must rebuild the same deterministic computation on every call
/// (dropout via a pinned mask). Relative error uses the denominator
/// max(|analytic|, |numeric|, 1e-8).
pub fn finite_diff_check<F>(op_name: &str, x: &Tensor, eps: f64, tol: f64, f: F) -> GradCheckReport
where
    F: Fn(&mut Graph, Var) -> Var,
{
    let mut g = Graph::new();
    let vx = g.param(x);
    let loss = f(&mut g, vx);
    g.backward(loss).expect("gradcheck loss must be scalar");
    let analytic = g.leaf_grad(vx).to_vec();

    let eval = |data: &[f64]| -> f64 {
        let t = Tensor::new(x.shape().to_vec(), data.to_vec()).expect("shape fixed");
        let mut g = Graph::new();
        let vx = g.input(&t);
        let loss = f(&mut g, vx);
        g.scalar_value(loss)
    };

    let mut max_rel = 0.0f64;
    let mut probe = x.data().to_vec();
    for i in 0..probe.len() {
        let orig = probe[i];
        probe[i] = orig + eps;
        let hi = eval(&probe);
        probe[i] = orig - eps;
        let lo = eval(&probe);
        probe[i] = orig;
        let numeric = (hi - lo) / (2.0 * eps);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-8);
        let rel = (analytic[i] - numeric).abs() / denom;
        max_rel = max_rel.max(rel);
    }
    GradCheckReport { op_name: op_name.to_string(), max_rel_error: max_rel, passed: max_rel < tol }
}

/// Aggregated battery result for one registered op.
#[derive(Debug, Clone)]
pub struct OpCheckOutcome {
    pub report: GradCheckReport,
    pub trials: usize,
    /// Trials resampled because the draw landed on a non-differentiable
    /// point (e.g. tied top-k entries).
    pub degenerate_skipped: usize,
}

const EPS: f64 = 1e-5;

type LossFn = Box<dyn Fn(&mut Graph, Var) -> Var>;

fn randu(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    rng.gen::<f64>() * (hi - lo) + lo
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| randu(rng, lo, hi)).collect()).unwrap()
}

/// Weighted sum against a fixed random tensor, so every output entry carries
/// an informative gradient.
fn weighted_sum(g: &mut Graph, out: Var, w: &Tensor) -> Var {
    let wv = g.input(w);
    let prod = g.mul(out, wv).unwrap();
    g.sum(prod)
}

/// True when the k-th and (k+1)-th order statistics are too close for a
/// finite-difference probe of top-k selection to be meaningful.
pub fn topk_tie_degenerate(values: &[f64], k: usize, eps: f64) -> bool {
    if k >= values.len() {
        return false;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    (sorted[k - 1] - sorted[k]).abs() < eps
}

struct Trial {
    x: Tensor,
    f: LossFn,
    degenerate: bool,
}

struct OpCheck {
    name: &'static str,
    make: Box<dyn Fn(&mut ChaCha8Rng) -> Trial>,
}

fn simple(make: impl Fn(&mut ChaCha8Rng) -> Trial + 'static, name: &'static str) -> OpCheck {
    OpCheck { name, make: Box::new(make) }
}

/// Margin that keeps samples away from kinks (relu at 0, min/max ties).
const KINK_MARGIN: f64 = 5e-2;

fn away_from_zero(t: &mut Tensor) {
    for v in t.data_mut() {
        if v.abs() < KINK_MARGIN {
            *v += if *v >= 0.0 { KINK_MARGIN } else { -KINK_MARGIN };
        }
    }
}

fn all_checks() -> Vec<OpCheck> {
    let mut checks: Vec<OpCheck> = Vec::new();

    checks.push(simple(
        |rng| {
            let x = rand_tensor(rng, vec![3, 4], -2.0, 2.0);
            let other = rand_tensor(rng, vec![3, 4], -2.0, 2.0);
            let w = rand_tensor(rng, vec![3, 4], -1.0, 1.0);
            let swap = rng.gen::<bool>();
            Trial {
                x,
                f: Box::new(move |g, vx| {
                    let o = g.input(&other);
                    let out = if swap { g.add(o, vx).unwrap() } else { g.add(vx, o).unwrap() };
                    weighted_sum(g, out, &w)
                }),
                degenerate: false,
            }
        },
        "add",
    ));

    checks.push(simple(
        |rng| {
            let x = rand_tensor(rng, vec![3, 4], -2.0, 2.0);
            let other = rand_tensor(rng, vec![3, 4], -2.0, 2.0);
            let w = rand_tensor(rng, vec![3, 4], -1.0, 1.0);
            let swap = rng.gen::<bool>();
            Trial {
                x,
                f: Box::new(move |g, vx| {
                    let o = g.input(&other);
                    let out = if swap { g.sub(o, vx).unwrap() } else { g.sub(vx, o).unwrap() };
                    weighted_sum(g, out, &w)
                }),
                degenerate: false,
            }
        },
        "sub",
    ));

    checks.push(simple(
        |rng| {
            let x = rand_tensor(rng, vec![3, 4], -2.0, 2.0);
            let other = rand_tensor(rng, vec![3, 4], -2.0, 2.0);
            let w = rand_tensor(rng, vec![3, 4], -1.0, 1.0);
            let swap = rng.gen::<bool>();
            Trial {
                x,
                f: Box::new(move |g, vx| {
                    let o = g.input(&other);
                    let out = if swap { g.mul(o, vx).unwrap() } else { g.mul(vx, o).unwrap() };
                    weighted_sum(g, out, &w)
                }),
                degenerate: false,
            }
        },
        "mul",
    ));

    checks.push(simple(
        |rng| {
            let mut x = rand_tensor(rng, vec![3, 4], -2.0, 2.0);
            let mut other = rand_tensor(rng, vec![3, 4], -2.0, 2.0);
            away_from_zero(&mut x);
            away_from_zero(&mut other);
            let w = rand_tensor(rng, vec![3, 4], -1.0, 1.0);
            let swap = rng.gen::<bool>();
            Trial {
                x,
                f: Box::new(move |g, vx| {
                    let o = g.input(&other);
                    let out = if swap { g.div(o, vx).unwrap() } else { g.div(vx, o).unwrap() };
                    weighted_sum(g, out, &w)
                }),
                degenerate: false,
            }
        },
        "div",
    ));

    for (name, is_min) in [("minimum", true), ("maximum", false)] {
        checks.push(simple(
            move |rng| {
                let x = rand_tensor(rng, vec![3, 4], -2.0, 2.0);
                let mut other = rand_tensor(rng, vec![3, 4], -2.0, 2.0);
                // keep the two arguments separated so the selection is stable
                for (o, v) in other.data_mut().iter_mut().zip(x.data()) {
                    if (*o - v).abs() < KINK_MARGIN {
                        *o = v + if *o >= *v { KINK_MARGIN } else { -KINK_MARGIN };
                    }
                }
                let w = rand_tensor(rng, vec![3, 4], -1.0, 1.0);
                Trial {
                    x,
                    f: Box::new(move |g, vx| {
                        let o = g.input(&other);
                        let out = if is_min { g.minimum(vx, o).unwrap() } else { g.maximum(vx, o).unwrap() };
                        weighted_sum(g, out, &w)
                    }),
                    degenerate: false,
                }
            },
            name,
        ));
    }

    checks.push(simple(
        |rng| {
            let as_bias = rng.gen::<bool>();
            let w = rand_tensor(rng, vec![4, 3], -1.0, 1.0);
            if as_bias {
                let x = rand_tensor(rng, vec![3], -2.0, 2.0);
                let mat = rand_tensor(rng, vec![4, 3], -2.0, 2.0);
                Trial {
                    x,
                    f: Box::new(move |g, vx| {
                        let m = g.input(&mat);
                        let out = g.add_row_bias(m, vx).unwrap();
                        weighted_sum(g, out, &w)
                    }),
                    degenerate: false,
                }
            } else {
                let x = rand_tensor(rng, vec![4, 3], -2.0, 2.0);
                let bias = rand_tensor(rng, vec![3], -2.0, 2.0);
                Trial {
                    x,
                    f: Box::new(move |g, vx| {
                        let b = g.input(&bias);
                        let out = g.add_row_bias(vx, b).unwrap();
                        weighted_sum(g, out, &w)
                    }),
                    degenerate: false,
                }
            }
        },
        "add_row_bias",
    ));

    checks.push(simple(
        |rng| {
            let c = randu(rng, -3.0, 3.0);
            let x = rand_tensor(rng, vec![2, 5], -2.0, 2.0);
            let w = rand_tensor(rng, vec![2, 5], -1.0, 1.0);
            Trial {
                x,
                f: Box::new(move |g, vx| {
                    let out = g.scale(vx, c);
                    weighted_sum(g, out, &w)
                }),
                degenerate: false,
            }
        },
        "scale",
    ));

    checks.push(simple(
        |rng| {
            let c = randu(rng, -3.0, 3.0);
            let x = rand_tensor(rng, vec![2, 5], -2.0, 2.0);
            let w = rand_tensor(rng, vec![2, 5], -1.0, 1.0);
            Trial {
                x,
                f: Box::new(move |g, vx| {
                    let out = g.add_const(vx, c);
                    weighted_sum(g, out, &w)
                }),
                degenerate: false,
            }
        },
        "add_const",
    ));

    checks.push(simple(
        |rng| {
            let vary_a = rng.gen::<bool>();
            let a = rand_tensor(rng, vec![3, 4], -1.5, 1.5);
            let b = rand_tensor(rng, vec![4, 2], -1.5, 1.5);
            let w = rand_tensor(rng, vec![3, 2], -1.0, 1.0);
            let (x, other) = if vary_a { (a.clone(), b) } else { (b.clone(), a) };
            Trial {
                x,
                f: Box::new(move |g, vx| {
                    let o = g.input(&other);
                    let out =
                        if vary_a { g.matmul(vx, o).unwrap() } else { g.matmul(o, vx).unwrap() };
                    weighted_sum(g, out, &w)
                }),
                degenerate: false,
            }
        },
        "matmul",
    ));

    checks.push(simple(
        |rng| {
            let vary_a = rng.gen::<bool>();
            let a = rand_tensor(rng, vec![3, 4], -1.5, 1.5);
            let b = rand_tensor(rng, vec![2, 4], -1.5, 1.5);
            let w = rand_tensor(rng, vec![3, 2], -1.0, 1.0);
            let (x, other) = if vary_a { (a.clone(), b) } else { (b.clone(), a) };
            Trial {
                x,
                f: Box::new(move |g, vx| {
                    let o = g.input(&other);
                    let out = if vary_a {
                        g.matmul_bt(vx, o).unwrap()
                    } else {
                        g.matmul_bt(o, vx).unwrap()
                    };
                    weighted_sum(g, out, &w)
                }),
                degenerate: false,
            }
        },
        "matmul_bt",
    ));

    checks.push(simple(
        |rng| {
            let x = rand_tensor(rng, vec![3, 5], -2.0, 2.0);
            let w = rand_tensor(rng, vec![5, 3], -1.0, 1.0);
            Trial {
                x,
                f: Box::new(move |g, vx| {
                    let out = g.transpose(vx).unwrap();
                    weighted_sum(g, out, &w)
                }),
                degenerate: false,
            }
        },
        "transpose",
    ));

    checks.push(simple(
        |rng| {
            let mut x = rand_tensor(rng, vec![3, 4], -2.0, 2.0);
            away_from_zero(&mut x);
            let w = rand_tensor(rng, vec![3, 4], -1.0, 1.0);
            Trial {
                x,
                f: Box::new(move |g, vx| {
                    let out = g.relu(vx);
                    weighted_sum(g, out, &w)
                }),
                degenerate: false,
            }
        },
        "relu",
    ));

    checks.push(simple(
        |rng| {
            let x = rand_tensor(rng, vec![3, 4], -4.0, 4.0);
            let w = rand_tensor(rng, vec![3, 4], -1.0, 1.0);
            Trial {
                x,
                f: Box::new(move |g, vx| {
                    let out = g.sigmoid(vx);
                    weighted_sum(g, out, &w)
                }),
                degenerate: false,
            }
        },
        "sigmoid",
    ));

    checks.push(simple(
        |rng| {
            let x = rand_tensor(rng, vec![3, 4], -4.0, 4.0);
            let w = rand_tensor(rng, vec![3, 4], -1.0, 1.0);
            Trial {
                x,
                f: Box::new(move |g, vx| {
                    let out = g.softplus(vx);
                    weighted_sum(g, out, &w)
                }),
                degenerate: false,
            }
        },
        "softplus",
    ));

    checks.push(simple(
        |rng| {
            let x = rand_tensor(rng, vec![3, 4], 0.05, 3.0);
            let w = rand_tensor(rng, vec![3, 4], -1.0, 1.0);
            Trial {
                x,
                f: Box::new(move |g, vx| {
                    let out = g.log_clamped(vx);
                    weighted_sum(g, out, &w)
                }),
                degenerate: false,
            }
        },
        "log_clamped",
    ));

    checks.push(simple(
        |rng| {
            let e = if rng.gen::<bool>() { 2.0 } else { 2.5 };
            let x = rand_tensor(rng, vec![3, 4], 0.2, 2.0);
            let w = rand_tensor(rng, vec![3, 4], -1.0, 1.0);
            Trial {
                x,
                f: Box::new(move |g, vx| {
                    let out = g.pow_const(vx, e);
                    weighted_sum(g, out, &w)
                }),
                degenerate: false,
            }
        },
        "pow_const",
    ));

    checks.push(simple(
        |rng| {
            let rows = rng.gen_range(1..4usize);
            let x = rand_tensor(rng, vec![rows, 5], -3.0, 3.0);
            let w = rand_tensor(rng, vec![rows, 5], -1.0, 1.0);
            Trial {
                x,
                f: Box::new(move |g, vx| {
                    let out = g.softmax(vx).unwrap();
                    weighted_sum(g, out, &w)
                }),
                degenerate: false,
            }
        },
        "softmax",
    ));

    checks.push(simple(
        |rng| {
            let which = rng.gen_range(0..3u8);
            let t = 6;
            let (c_in, c_out, width) = (3, 2, 3);
            let x = rand_tensor(rng, vec![t, c_in], -1.5, 1.5);
            let kern = rand_tensor(rng, vec![c_out, c_in, width], -1.0, 1.0);
            let bias = rand_tensor(rng, vec![c_out], -0.5, 0.5);
            let w = rand_tensor(rng, vec![t, c_out], -1.0, 1.0);
            let (probe, a, b) = match which {
                0 => (x.clone(), kern, bias),
                1 => (kern.clone(), x, bias),
                _ => (bias.clone(), x, kern),
            };
            Trial {
                x: probe,
                f: Box::new(move |g, vx| {
                    let out = match which {
                        0 => {
                            let k = g.input(&a);
                            let bi = g.input(&b);
                            g.conv1d(vx, k, bi).unwrap()
                        }
                        1 => {
                            let xin = g.input(&a);
                            let bi = g.input(&b);
                            g.conv1d(xin, vx, bi).unwrap()
                        }
                        _ => {
                            let xin = g.input(&a);
                            let k = g.input(&b);
                            g.conv1d(xin, k, vx).unwrap()
                        }
                    };
                    weighted_sum(g, out, &w)
                }),
                degenerate: false,
            }
        },
        "conv1d",
    ));

    checks.push(simple(
        |rng| {
            let x = rand_tensor(rng, vec![4, 5], -2.0, 2.0);
            let keep = 0.5;
            let mask: Vec<f64> =
                (0..20).map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 }).collect();
            let w = rand_tensor(rng, vec![4, 5], -1.0, 1.0);
            Trial {
                x,
                f: Box::new(move |g, vx| {
                    let out = g.dropout_with_mask(vx, mask.clone());
                    weighted_sum(g, out, &w)
                }),
                degenerate: false,
            }
        },
        "dropout",
    ));

    checks.push(simple(
        |rng| {
            let axis = rng.gen_range(0..2usize);
            let x = rand_tensor(rng, vec![2, 3], -2.0, 2.0);
            let other = rand_tensor(rng, vec![2, 3], -2.0, 2.0);
            let first = rng.gen::<bool>();
            let w = if axis == 0 {
                rand_tensor(rng, vec![4, 3], -1.0, 1.0)
            } else {
                rand_tensor(rng, vec![2, 6], -1.0, 1.0)
            };
            Trial {
                x,
                f: Box::new(move |g, vx| {
                    let o = g.input(&other);
                    let parts = if first { vec![vx, o] } else { vec![o, vx] };
                    let out = g.concat(&parts, axis).unwrap();
                    weighted_sum(g, out, &w)
                }),
                degenerate: false,
            }
        },
        "concat",
    ));

    checks.push(simple(
        |rng| {
            let x = rand_tensor(rng, vec![5, 3], -2.0, 2.0);
            let start = rng.gen_range(0..3usize);
            let w = rand_tensor(rng, vec![2, 3], -1.0, 1.0);
            Trial {
                x,
                f: Box::new(move |g, vx| {
                    let out = g.slice_rows(vx, start, 2).unwrap();
                    weighted_sum(g, out, &w)
                }),
                degenerate: false,
            }
        },
        "slice_rows",
    ));

    for (name, by_rows) in [("scale_rows", true), ("scale_cols", false)] {
        checks.push(simple(
            move |rng| {
                let vary_x = rng.gen::<bool>();
                let x = rand_tensor(rng, vec![4, 3], -2.0, 2.0);
                let s = rand_tensor(rng, vec![if by_rows { 4 } else { 3 }], -1.5, 1.5);
                let w = rand_tensor(rng, vec![4, 3], -1.0, 1.0);
                let (probe, other) = if vary_x { (x.clone(), s) } else { (s.clone(), x) };
                Trial {
                    x: probe,
                    f: Box::new(move |g, vx| {
                        let o = g.input(&other);
                        let out = match (by_rows, vary_x) {
                            (true, true) => g.scale_rows(vx, o).unwrap(),
                            (true, false) => g.scale_rows(o, vx).unwrap(),
                            (false, true) => g.scale_cols(vx, o).unwrap(),
                            (false, false) => g.scale_cols(o, vx).unwrap(),
                        };
                        weighted_sum(g, out, &w)
                    }),
                    degenerate: false,
                }
            },
            name,
        ));
    }

    checks.push(simple(
        |rng| {
            // keep rows away from the origin so the norm is well-conditioned
            let mut x = rand_tensor(rng, vec![3, 4], -2.0, 2.0);
            for v in x.data_mut() {
                *v += if *v >= 0.0 { 0.3 } else { -0.3 };
            }
            let w = rand_tensor(rng, vec![3, 4], -1.0, 1.0);
            Trial {
                x,
                f: Box::new(move |g, vx| {
                    let out = g.l2_normalize_rows(vx).unwrap();
                    weighted_sum(g, out, &w)
                }),
                degenerate: false,
            }
        },
        "l2_normalize_rows",
    ));

    checks.push(simple(
        |rng| {
            let t = 7;
            let k = rng.gen_range(1..=t);
            let x = rand_tensor(rng, vec![t], -2.0, 2.0);
            let degenerate = topk_tie_degenerate(x.data(), k, 1e-3);
            Trial {
                x,
                f: Box::new(move |g, vx| g.topk_mean(vx, k).unwrap()),
                degenerate,
            }
        },
        "topk_mean",
    ));

    checks.push(simple(
        |rng| {
            let (t, c) = (6, 3);
            let k = rng.gen_range(1..=t);
            let x = rand_tensor(rng, vec![t, c], -2.0, 2.0);
            let degenerate = (0..c).any(|j| {
                let col: Vec<f64> = (0..t).map(|i| x.data()[i * c + j]).collect();
                topk_tie_degenerate(&col, k, 1e-3)
            });
            let w = rand_tensor(rng, vec![c], -1.0, 1.0);
            Trial {
                x,
                f: Box::new(move |g, vx| {
                    let out = g.topk_mean_cols(vx, k).unwrap();
                    let wv = g.input(&Tensor::vector(w.data().to_vec()));
                    let p = g.mul(out, wv).unwrap();
                    g.sum(p)
                }),
                degenerate,
            }
        },
        "topk_mean_cols",
    ));

    checks.push(simple(
        |rng| {
            let x = rand_tensor(rng, vec![3, 4], -2.0, 2.0);
            Trial { x, f: Box::new(|g, vx| g.sum(vx)), degenerate: false }
        },
        "sum",
    ));

    checks.push(simple(
        |rng| {
            let x = rand_tensor(rng, vec![3, 4], -2.0, 2.0);
            Trial { x, f: Box::new(|g, vx| g.mean(vx)), degenerate: false }
        },
        "mean",
    ));

    checks.push(simple(
        |rng| {
            let x = rand_tensor(rng, vec![3, 4], -2.0, 2.0);
            let other = rand_tensor(rng, vec![3, 4], -2.0, 2.0);
            let swap = rng.gen::<bool>();
            Trial {
                x,
                f: Box::new(move |g, vx| {
                    let o = g.input(&other);
                    if swap {
                        g.mse(o, vx).unwrap()
                    } else {
                        g.mse(vx, o).unwrap()
                    }
                }),
                degenerate: false,
            }
        },
        "mse",
    ));

    checks.push(simple(
        |rng| {
            let x = rand_tensor(rng, vec![4, 3], -2.0, 2.0);
            let cols: Vec<usize> = (0..4).map(|_| rng.gen_range(0..3usize)).collect();
            let w = rand_tensor(rng, vec![4], -1.0, 1.0);
            Trial {
                x,
                f: Box::new(move |g, vx| {
                    let out = g.gather_per_row(vx, cols.clone()).unwrap();
                    let wv = g.input(&w);
                    let p = g.mul(out, wv).unwrap();
                    g.sum(p)
                }),
                degenerate: false,
            }
        },
        "gather_per_row",
    ));

    checks.push(simple(
        |rng| {
            let x = rand_tensor(rng, vec![4, 3], -2.0, 2.0);
            let at: Vec<(usize, usize)> =
                (0..5).map(|_| (rng.gen_range(0..4usize), rng.gen_range(0..3usize))).collect();
            let w = rand_tensor(rng, vec![5], -1.0, 1.0);
            Trial {
                x,
                f: Box::new(move |g, vx| {
                    let out = g.gather_at(vx, at.clone()).unwrap();
                    let wv = g.input(&w);
                    let p = g.mul(out, wv).unwrap();
                    g.sum(p)
                }),
                degenerate: false,
            }
        },
        "gather_at",
    ));

    checks.push(simple(
        |rng| {
            let which = rng.gen_range(0..3u8);
            let x = rand_tensor(rng, vec![3, 6], -2.0, 2.0);
            let gamma = rand_tensor(rng, vec![6], 0.5, 1.5);
            let beta = rand_tensor(rng, vec![6], -0.5, 0.5);
            let w = rand_tensor(rng, vec![3, 6], -1.0, 1.0);
            let (probe, a, b) = match which {
                0 => (x.clone(), gamma, beta),
                1 => (gamma.clone(), x, beta),
                _ => (beta.clone(), x, gamma),
            };
            Trial {
                x: probe,
                f: Box::new(move |g, vx| {
                    let out = match which {
                        0 => {
                            let ga = g.input(&a);
                            let be = g.input(&b);
                            g.layer_norm(vx, ga, be, 1e-5).unwrap()
                        }
                        1 => {
                            let xin = g.input(&a);
                            let be = g.input(&b);
                            g.layer_norm(xin, vx, be, 1e-5).unwrap()
                        }
                        _ => {
                            let xin = g.input(&a);
                            let ga = g.input(&b);
                            g.layer_norm(xin, ga, vx, 1e-5).unwrap()
                        }
                    };
                    weighted_sum(g, out, &w)
                }),
                degenerate: false,
            }
        },
        "layer_norm",
    ));

    checks.push(simple(
        |rng| {
            let which = rng.gen_range(0..4u8);
            let (a, b, d) = (3, 4, 5);
            let q = rand_tensor(rng, vec![a, d], -1.0, 1.0);
            let k = rand_tensor(rng, vec![b, d], -1.0, 1.0);
            let v = rand_tensor(rng, vec![b, d], -1.0, 1.0);
            let aw = rand_tensor(rng, vec![b], 0.1, 1.0);
            let w = rand_tensor(rng, vec![a, d], -1.0, 1.0);
            let tensors = [q, k, v, aw];
            let probe = tensors[which as usize].clone();
            Trial {
                x: probe,
                f: Box::new(move |g, vx| {
                    let vars: Vec<Var> = tensors
                        .iter()
                        .enumerate()
                        .map(|(i, t)| if i == which as usize { vx } else { g.input(t) })
                        .collect();
                    let out = g.masked_scaled_attention(vars[0], vars[1], vars[2], vars[3]).unwrap();
                    weighted_sum(g, out, &w)
                }),
                degenerate: false,
            }
        },
        "masked_scaled_attention",
    ));

    checks
}

/// Names of every op in the registered battery.
pub fn registered_op_names() -> Vec<&'static str> {
    all_checks().iter().map(|c| c.name).collect()
}

/// Run the full battery: `trials` seeded draws per op, central differences
/// at eps 1e-5. Draws landing on non-differentiable points are resampled and
/// counted, never scored.
pub fn run_all_checks(trials: usize, tol: f64, seed: u64) -> Vec<OpCheckOutcome> {
    all_checks()
        .into_iter()
        .enumerate()
        .map(|(op_idx, check)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((op_idx as u64) << 32));
            let mut max_rel = 0.0f64;
            let mut passed = true;
            let mut skipped = 0usize;
            let mut done = 0usize;
            while done < trials {
                let trial = (check.make)(&mut rng);
                if trial.degenerate {
                    skipped += 1;
                    continue;
                }
                let report = finite_diff_check(check.name, &trial.x, EPS, tol, &trial.f);
                max_rel = max_rel.max(report.max_rel_error);
                passed &= report.passed;
                done += 1;
            }
            OpCheckOutcome {
                report: GradCheckReport { op_name: check.name.to_string(), max_rel_error: max_rel, passed },
                trials: done,
                degenerate_skipped: skipped,
            }
        })
        .collect()
}
