#![allow(dead_code)]

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tatt::attention::{self, AttentionConfig, AttentionWeights};
use tatt::gradcheck::random_tensor;
use tatt::losses::{self, Windowing};
use tatt::nn::{self, Declare, ParamStore, Params};
use tatt::synth::warp::{apply_deformation, warp_map, DeformationSpec};
use tatt::{Graph, Padding, Result, Tensor, Var};

pub fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.5..1.5))
}

/// Each head `i` sees channel group `i` of both inputs; weights are a
/// softmax over keys of `q·k / √d_k`; head outputs are concatenated along
/// channels and projected by `wo`.
pub fn oracle(
    store: &ParamStore<f64>,
    prefix: &str,
    f_e: &Tensor<f64>,
    f_i: &Tensor<f64>,
    cfg: &AttentionConfig,
) -> (Vec<f64>, Vec<f64>) {
    let (l, hw, c) = (f_e.shape()[0], f_i.shape()[0], cfg.channels);
    let (n, grp, dk) = (cfg.heads, c / cfg.heads, cfg.key_dim);
    let mut concat = vec![0.0; hw * n * dk];
    let mut all_weights = vec![0.0; n * hw * l];
    for h in 0..n {
        let wq = store.tensor(&format!("{prefix}/head{h}/wq")).unwrap();
        let wk = store.tensor(&format!("{prefix}/head{h}/wk")).unwrap();
        let wv = store.tensor(&format!("{prefix}/head{h}/wv")).unwrap();
        let project = |x: &Tensor<f64>, row: usize, w: &Tensor<f64>, j: usize| -> f64 {
            (0..grp)
                .map(|a| x.at(&[row, h * grp + a]) * w.at(&[a, j]))
                .sum()
        };
        for q in 0..hw {
            let query: Vec<f64> = (0..dk).map(|j| project(f_i, q, wq, j)).collect();
            let mut logits = Vec::with_capacity(l);
            for k in 0..l {
                let key: Vec<f64> = (0..dk).map(|j| project(f_e, k, wk, j)).collect();
                let dot: f64 = query.iter().zip(&key).map(|(a, b)| a * b).sum();
                logits.push(dot / (dk as f64).sqrt());
            }
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|v| (v - m).exp()).sum();
            for k in 0..l {
                let wgt = (logits[k] - m).exp() / z;
                all_weights[(h * hw + q) * l + k] = wgt;
                for j in 0..dk {
                    concat[q * n * dk + h * dk + j] += wgt * project(f_e, k, wv, j);
                }
            }
        }
    }
    let wo = store.tensor(&format!("{prefix}/wo")).unwrap();
    let mut out = vec![0.0; hw * c];
    for q in 0..hw {
        for o in 0..c {
            out[q * c + o] = (0..n * dk)
                .map(|a| concat[q * n * dk + a] * wo.at(&[a, o]))
                .sum();
        }
    }
    (out, all_weights)
}

/// Deviation from the oracle and worst row-sum error over `instances`
/// random geometries.
pub fn attention_against_oracle(instances: usize, seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut worst_row = 0.0f64;
    for case in 0..instances as u64 {
        let heads = rng.gen_range(1..=4);
        let group = rng.gen_range(1..=4);
        let cfg = AttentionConfig {
            heads,
            channels: heads * group,
            key_dim: rng.gen_range(1..=5),
        };
        let l = rng.gen_range(1..=6);
        let hw = rng.gen_range(1..=12);
        let mut d = Declare::new();
        attention::declare_multi_head(&mut d, "mca", &cfg);
        let store = nn::init_params::<f64>(&d, case);
        let f_e = random(&[l, cfg.channels], &mut rng);
        let f_i = random(&[hw, cfg.channels], &mut rng);

        let mut g = Graph::new();
        let mut p = Params::new(&store);
        let e = g.constant(f_e.clone());
        let i = g.constant(f_i.clone());
        let (out, heads_w) =
            attention::multi_head_cross_attention(&mut g, &mut p, "mca", e, i, &cfg).unwrap();
        let weights = AttentionWeights::from_heads(&g, &heads_w).unwrap();
        worst_row = worst_row.max(weights.max_row_error());

        let (want_out, want_w) = oracle(&store, "mca", &f_e, &f_i, &cfg);
        for (a, b) in g.value(out).data().iter().zip(&want_out) {
            worst = worst.max((a - b).abs());
        }
        for (a, b) in weights.weights.data().iter().zip(&want_w) {
            worst = worst.max((a - b).abs());
        }
    }
    (worst, worst_row)
}

pub type Op = Box<dyn Fn(&mut Graph<f64>, Var) -> Result<Var>>;

pub struct OpCase {
    pub name: &'static str,
    pub x: Tensor<f64>,
    pub op: Op,
}

fn case(
    name: &'static str,
    x: Tensor<f64>,
    op: impl Fn(&mut Graph<f64>, Var) -> Result<Var> + 'static,
) -> OpCase {
    OpCase {
        name,
        x,
        op: Box::new(op),
    }
}

fn away(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = r.gen_range(0.1..1.0);
        if r.gen::<bool>() {
            m
        } else {
            -m
        }
    })
}

/// One fixed instance of every differentiable operation.
pub fn op_cases(seed: u64) -> Vec<OpCase> {
    let r = &mut ChaCha8Rng::seed_from_u64(seed);
    let t = |s: &[usize], r: &mut ChaCha8Rng| random_tensor(s, -1.0, 1.0, r);
    let mut v = Vec::new();

    let (a, b) = (t(&[3, 4], r), t(&[4, 2], r));
    let bc = b.clone();
    v.push(case("matmul lhs", a.clone(), move |g, x| {
        let c = g.constant(bc.clone());
        g.matmul(x, c)
    }));
    v.push(case("matmul rhs", b, move |g, x| {
        let c = g.constant(a.clone());
        g.matmul(c, x)
    }));
    v.push(case("transpose", t(&[3, 5], r), |g, x| g.transpose(x)));
    v.push(case("swap_leading", t(&[2, 3, 2], r), |g, x| {
        g.swap_leading(x)
    }));
    v.push(case("reshape", t(&[2, 3, 2], r), |g, x| {
        g.reshape(x, &[6, 2])
    }));
    v.push(case("add", t(&[2, 3], r), {
        let y = t(&[2, 3], r);
        move |g, x| {
            let c = g.constant(y.clone());
            g.add(x, c)
        }
    }));
    v.push(case("sub", t(&[2, 3], r), {
        let y = t(&[2, 3], r);
        move |g, x| {
            let c = g.constant(y.clone());
            g.sub(c, x)
        }
    }));
    v.push(case("mul", t(&[2, 3], r), {
        let y = t(&[2, 3], r);
        move |g, x| {
            let c = g.constant(y.clone());
            g.mul(x, c)
        }
    }));
    v.push(case("div numerator", t(&[2, 3], r), {
        let y = away(&[2, 3], r);
        move |g, x| {
            let c = g.constant(y.clone());
            g.div(x, c)
        }
    }));
    v.push(case("div denominator", away(&[2, 3], r), {
        let y = t(&[2, 3], r);
        move |g, x| {
            let c = g.constant(y.clone());
            g.div(c, x)
        }
    }));
    v.push(case("sym_sum3", t(&[5], r), {
        let (y, z) = (t(&[5], r), t(&[5], r));
        move |g, x| {
            let (yv, zv) = (g.constant(y.clone()), g.constant(z.clone()));
            let s = g.sym_sum3(yv, x, zv)?;
            Ok(g.square(s))
        }
    }));
    v.push(case("scale", t(&[4], r), |g, x| Ok(g.scale(x, -1.3))));
    v.push(case("add_scalar", t(&[4], r), |g, x| {
        Ok(g.add_scalar(x, 0.4))
    }));
    v.push(case("exp", t(&[4], r), |g, x| Ok(g.exp(x))));
    v.push(case("log", random_tensor(&[4], 0.2, 2.0, r), |g, x| {
        Ok(g.log(x))
    }));
    v.push(case("abs", away(&[6], r), |g, x| Ok(g.abs(x))));
    v.push(case("relu", away(&[6], r), |g, x| Ok(g.relu(x))));
    v.push(case("sigmoid", t(&[4], r), |g, x| Ok(g.sigmoid(x))));
    v.push(case("tanh", t(&[4], r), |g, x| Ok(g.tanh(x))));
    v.push(case("square", t(&[4], r), |g, x| Ok(g.square(x))));
    v.push(case("sum", t(&[2, 3], r), |g, x| Ok(g.sum(x))));
    v.push(case("mean", t(&[2, 3], r), |g, x| Ok(g.mean(x))));
    v.push(case("add_row", t(&[4], r), {
        let y = t(&[3, 4], r);
        move |g, x| {
            let c = g.constant(y.clone());
            g.add_row(c, x)
        }
    }));
    v.push(case("mul_row", t(&[4], r), {
        let y = t(&[3, 4], r);
        move |g, x| {
            let c = g.constant(y.clone());
            g.mul_row(c, x)
        }
    }));
    v.push(case(
        "softmax",
        random_tensor(&[3, 5], -3.0, 3.0, r),
        |g, x| g.softmax_lastdim(x),
    ));
    v.push(case(
        "log_softmax",
        random_tensor(&[3, 5], -3.0, 3.0, r),
        |g, x| g.log_softmax_lastdim(x),
    ));
    v.push(case("layer_norm", t(&[3, 6], r), {
        let (gn, bs) = (t(&[6], r), t(&[6], r));
        move |g, x| {
            let (a, b) = (g.constant(gn.clone()), g.constant(bs.clone()));
            g.layer_norm(x, a, b, 1e-5)
        }
    }));
    v.push(case("layer_norm gain", t(&[6], r), {
        let (xs, bs) = (t(&[3, 6], r), t(&[6], r));
        move |g, gn| {
            let (a, b) = (g.constant(xs.clone()), g.constant(bs.clone()));
            g.layer_norm(a, gn, b, 1e-5)
        }
    }));
    v.push(case("conv2d same", t(&[4, 5, 2], r), {
        let k = t(&[3, 3, 2, 3], r);
        move |g, x| {
            let kv = g.constant(k.clone());
            g.conv2d(x, kv, Padding::Same)
        }
    }));
    v.push(case("conv2d valid kernel", t(&[3, 3, 2, 2], r), {
        let xs = t(&[4, 5, 2], r);
        move |g, k| {
            let xv = g.constant(xs.clone());
            g.conv2d(xv, k, Padding::Valid)
        }
    }));
    v.push(case("linear", t(&[2, 3, 4], r), {
        let (w, b) = (t(&[4, 3], r), t(&[3], r));
        move |g, x| {
            let (wv, bv) = (g.constant(w.clone()), g.constant(b.clone()));
            nn::linear(g, x, wv, Some(bv))
        }
    }));
    v.push(case("pixel_shuffle", t(&[2, 3, 8], r), |g, x| {
        nn::pixel_shuffle(g, x, 2)
    }));
    v.push(case("pixel_unshuffle", t(&[4, 4, 2], r), |g, x| {
        nn::pixel_unshuffle(g, x, 2)
    }));
    v.push(case("avg_pool", t(&[4, 6, 2], r), |g, x| {
        nn::avg_pool(g, x, 2, 3)
    }));
    v.push(case("slice/concat", t(&[3, 5], r), |g, x| {
        let a = g.slice_last(x, 0, 2)?;
        let b = g.slice_last(x, 2, 3)?;
        let b2 = g.square(b);
        g.concat_last(&[b2, a])
    }));
    let scan = [
        t(&[2, 4, 3], r),
        t(&[2, 4, 3], r),
        t(&[3, 3], r),
        t(&[3, 3], r),
    ];
    for (slot, name) in [
        "gated_scan gate input",
        "gated_scan candidate input",
        "gated_scan gate recurrence",
        "gated_scan candidate recurrence",
    ]
    .into_iter()
    .enumerate()
    {
        let p = scan.clone();
        v.push(case(name, scan[slot].clone(), move |g, x| {
            let vs: Vec<Var> = (0..4)
                .map(|i| {
                    if i == slot {
                        x
                    } else {
                        g.constant(p[i].clone())
                    }
                })
                .collect();
            g.gated_scan(vs[0], vs[1], vs[2], vs[3], slot % 2 == 1)
        }));
    }
    let spec = DeformationSpec::new(7.0, -0.2, 1.4).unwrap();
    v.push(case("apply_deformation", t(&[6, 10, 3], r), move |g, x| {
        apply_deformation(g, x, &spec)
    }));
    let map = Arc::new(warp_map::<f64>(
        5,
        7,
        1,
        &DeformationSpec::new(-4.0, 0.1, 0.7).unwrap(),
    ));
    v.push(case("sparse", t(&[5, 7, 1], r), move |g, x| {
        g.sparse(x, map.clone(), vec![5, 7, 1])
    }));
    v.push(case("gather", t(&[6], r), |g, x| {
        g.gather(x, Arc::new(vec![5, 0, 0, 3]), vec![2, 2])
    }));
    v.push(case(
        "luminance",
        random_tensor(&[4, 4, 3], 0.0, 1.0, r),
        |g, x| losses::luminance(g, x),
    ));
    for w in [Windowing::Window(4), Windowing::Global] {
        let y = random_tensor(&[8, 8, 3], 0.0, 1.0, r);
        v.push(case(
            "ssim",
            random_tensor(&[8, 8, 3], 0.0, 1.0, r),
            move |g, x| {
                let yv = g.constant(y.clone());
                losses::ssim(g, x, yv, w)
            },
        ));
        let (y, z) = (
            random_tensor(&[8, 8, 3], 0.0, 1.0, r),
            random_tensor(&[8, 8, 3], 0.0, 1.0, r),
        );
        v.push(case(
            "tssim",
            random_tensor(&[8, 8, 3], 0.0, 1.0, r),
            move |g, x| {
                let (yv, zv) = (g.constant(y.clone()), g.constant(z.clone()));
                losses::tssim(g, yv, x, zv, w)
            },
        ));
    }
    v.push(case("l_sr", t(&[4, 6, 3], r), {
        let hr = t(&[4, 6, 3], r);
        move |g, x| {
            let h = g.constant(hr.clone());
            losses::l_sr(g, x, h)
        }
    }));
    v.push(case("l_tp", t(&[4, 5], r), {
        let target = {
            let mut g = Graph::new();
            let tv = g.constant(t(&[4, 5], r));
            let p = g.softmax_lastdim(tv).unwrap();
            g.value(p).clone()
        };
        move |g, x| {
            let p = g.softmax_lastdim(x)?;
            let tv = g.constant(target.clone());
            losses::l_tp(g, p, tv)
        }
    }));
    let att = [
        t(&[4, 3], r),
        t(&[6, 3], r),
        t(&[3, 2], r),
        t(&[3, 2], r),
        t(&[3, 2], r),
    ];
    for (slot, name) in [
        "attention prior feature",
        "attention image feature",
        "attention query",
        "attention key",
        "attention value",
    ]
    .into_iter()
    .enumerate()
    {
        let p = att.clone();
        v.push(case(name, att[slot].clone(), move |g, x| {
            let vs: Vec<Var> = (0..5)
                .map(|i| {
                    if i == slot {
                        x
                    } else {
                        g.constant(p[i].clone())
                    }
                })
                .collect();
            let (out, w) = attention::cross_attention_head(g, vs[0], vs[1], vs[2], vs[3], vs[4])?;
            g.concat_last(&[out, w])
        }));
    }
    v
}
