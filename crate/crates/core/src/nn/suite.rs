//! Seeded finite-difference checks for every op of the tape and for the
//! composed tokenizer loss.

use crate::error::Result;
use crate::fsq::sigmoid;
use crate::io::SeededRng;
use crate::motion::{MotionClip, Rotation6D, Skeleton};

use super::check::{grad_check, GradCheck, GradCheckReport};
use super::graph::{Graph, Var};
use super::params::ParamStore;
use super::tensor::Tensor;
use super::tokenizer::{Tokenizer, TokenizerConfig};

type Build = Box<dyn for<'a> Fn(&mut Graph<'a, f64>) -> Result<Var>>;

struct Case {
    name: &'static str,
    params: ParamStore<f64>,
    build: Build,
    dropout_seed: Option<u64>,
}

fn normal(rng: &mut SeededRng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| scale * rng.normal()).collect()).unwrap()
}

fn store(rng: &mut SeededRng, entries: &[(&str, &[usize])]) -> ParamStore<f64> {
    let mut p = ParamStore::new(0);
    for (name, shape) in entries {
        p.insert(name, normal(rng, shape, 1.0)).unwrap();
    }
    p
}

/// `sum(op(...) * W)` with a fixed random `W` matching the output size.
fn probe(seed: u64, f: impl for<'a> Fn(&mut Graph<'a, f64>) -> Result<Var> + 'static) -> Build {
    Box::new(move |g| {
        let y = f(g)?;
        let shape = g.value(y).shape().to_vec();
        let w = normal(&mut SeededRng::new(seed ^ 0x5eed), &shape, 1.0);
        g.weighted_sum(y, &w)
    })
}

fn unary_case(name: &'static str, rng: &mut SeededRng, op: fn(&mut Graph<'_, f64>, Var) -> Var) -> Case {
    Case {
        name,
        params: store(rng, &[("x", &[6, 12])]),
        build: probe(1, move |g| {
            let x = g.param("x")?;
            Ok(op(g, x))
        }),
        dropout_seed: None,
    }
}

/// Latents whose sigmoid sits at least `margin` away from every rounding
/// boundary of its channel.
fn fsq_safe_latents(rng: &mut SeededRng, rows: usize, levels: &[u32], margin: f64) -> Tensor<f64> {
    let d = levels.len();
    let mut data = Vec::with_capacity(rows * d);
    for i in 0..rows * d {
        let top = (levels[i % d] - 1) as f64;
        loop {
            let z = 1.5 * rng.normal();
            let s = sigmoid(z) * top;
            let frac = s - s.floor();
            // boundary distance in z measured through the local slope
            let slope = sigmoid(z) * (1.0 - sigmoid(z)) * top;
            if (frac - 0.5).abs() / slope.max(1e-12) > margin {
                data.push(z);
                break;
            }
        }
    }
    Tensor::matrix(rows, d, data).unwrap()
}

fn cases(seed: u64) -> Vec<Case> {
    let mut rng = SeededRng::new(seed);
    let mut out = vec![
        unary_case("sigmoid", &mut rng, |g, x| g.sigmoid(x)),
        unary_case("relu", &mut rng, |g, x| g.relu(x)),
        unary_case("exp", &mut rng, |g, x| g.exp(x)),
        unary_case("softplus", &mut rng, |g, x| g.softplus(x)),
        unary_case("silu", &mut rng, |g, x| g.silu(x)),
        unary_case("scale", &mut rng, |g, x| g.scale(x, -1.7)),
        unary_case("sum", &mut rng, |g, x| g.sum(x)),
    ];
    let binary: [(&'static str, fn(&mut Graph<'_, f64>, Var, Var) -> Result<Var>); 4] = [
        ("add", |g, a, b| g.add(a, b)),
        ("sub", |g, a, b| g.sub(a, b)),
        ("mul", |g, a, b| g.mul(a, b)),
        ("mean_l1", |g, a, b| g.mean_l1(a, b)),
    ];
    for (name, op) in binary {
        out.push(Case {
            name,
            params: store(&mut rng, &[("a", &[5, 8]), ("b", &[5, 8])]),
            build: probe(2, move |g| {
                let (a, b) = (g.param("a")?, g.param("b")?);
                op(g, a, b)
            }),
            dropout_seed: None,
        });
    }
    out.push(Case {
        name: "add_row",
        params: store(&mut rng, &[("a", &[6, 10]), ("b", &[10])]),
        build: probe(3, |g| {
            let (a, b) = (g.param("a")?, g.param("b")?);
            g.add_row(a, b)
        }),
        dropout_seed: None,
    });
    out.push(Case {
        name: "mul_row",
        params: store(&mut rng, &[("a", &[6, 10]), ("b", &[10])]),
        build: probe(23, |g| {
            let (a, b) = (g.param("a")?, g.param("b")?);
            g.mul_row(a, b)
        }),
        dropout_seed: None,
    });
    out.push(Case {
        name: "matmul",
        params: store(&mut rng, &[("a", &[5, 8]), ("b", &[8, 4])]),
        build: probe(4, |g| {
            let (a, b) = (g.param("a")?, g.param("b")?);
            g.matmul(a, b, false)
        }),
        dropout_seed: None,
    });
    out.push(Case {
        name: "matmul_trans_b",
        params: store(&mut rng, &[("a", &[5, 8]), ("b", &[4, 8])]),
        build: probe(5, |g| {
            let (a, b) = (g.param("a")?, g.param("b")?);
            g.matmul(a, b, true)
        }),
        dropout_seed: None,
    });
    out.push(Case {
        name: "linear",
        params: store(&mut rng, &[("x", &[6, 9]), ("fc.weight", &[5, 9]), ("fc.bias", &[5])]),
        build: probe(6, |g| {
            let x = g.param("x")?;
            g.linear(x, "fc")
        }),
        dropout_seed: None,
    });
    out.push(Case {
        name: "transpose",
        params: store(&mut rng, &[("x", &[7, 11])]),
        build: probe(7, |g| {
            let x = g.param("x")?;
            g.transpose(x)
        }),
        dropout_seed: None,
    });
    out.push(Case {
        name: "slice_gather_concat",
        params: store(&mut rng, &[("a", &[6, 8]), ("b", &[6, 5])]),
        build: probe(8, |g| {
            let (a, b) = (g.param("a")?, g.param("b")?);
            let s = g.slice_cols(a, 2, 7)?;
            let t = g.gather_cols(b, &[4, 0, 0, 3])?;
            g.concat_cols(&[t, s, b])
        }),
        dropout_seed: None,
    });
    out.push(Case {
        name: "concat_rows",
        params: store(&mut rng, &[("a", &[3, 8]), ("b", &[5, 8])]),
        build: probe(9, |g| {
            let (a, b) = (g.param("a")?, g.param("b")?);
            g.concat_rows(&[b, a, b])
        }),
        dropout_seed: None,
    });
    out.push(Case {
        name: "time_diff",
        params: store(&mut rng, &[("x", &[9, 8])]),
        build: probe(10, |g| {
            let x = g.param("x")?;
            let v = g.time_diff(x)?;
            g.time_diff(v)
        }),
        dropout_seed: None,
    });
    out.push(Case {
        name: "layer_norm",
        params: store(&mut rng, &[("x", &[6, 12]), ("ln.weight", &[12]), ("ln.bias", &[12])]),
        build: probe(11, |g| {
            let x = g.param("x")?;
            g.layer_norm(x, "ln")
        }),
        dropout_seed: None,
    });
    out.push(Case {
        name: "softmax",
        params: store(&mut rng, &[("x", &[6, 12])]),
        build: probe(12, |g| {
            let x = g.param("x")?;
            g.softmax(x)
        }),
        dropout_seed: None,
    });
    out.push(Case {
        name: "add_mask",
        params: store(&mut rng, &[("x", &[9, 9])]),
        build: probe(13, |g| {
            let x = g.param("x")?;
            let allow: Vec<bool> = (0..81).map(|i| i % 9 <= i / 9).collect();
            let m = g.add_mask(x, &allow)?;
            g.softmax(m)
        }),
        dropout_seed: None,
    });
    out.push(Case {
        name: "embedding",
        params: store(&mut rng, &[("table", &[10, 8])]),
        build: probe(14, |g| {
            let t = g.param("table")?;
            g.embedding(t, &[3, 1, 3, 9, 0, 7, 2, 5, 8, 4, 6])
        }),
        dropout_seed: None,
    });
    out.push(Case {
        name: "dropout",
        params: store(&mut rng, &[("x", &[8, 10])]),
        build: probe(15, |g| {
            let x = g.param("x")?;
            g.dropout(x, 0.25)
        }),
        dropout_seed: Some(99),
    });
    out.push(Case {
        name: "mean_rows",
        params: store(&mut rng, &[("x", &[7, 10])]),
        build: probe(16, |g| {
            let x = g.param("x")?;
            g.mean_rows(x)
        }),
        dropout_seed: None,
    });
    out.push(Case {
        name: "l2_normalize_rows",
        params: store(&mut rng, &[("x", &[7, 10])]),
        build: probe(17, |g| {
            let x = g.param("x")?;
            g.l2_normalize_rows(x)
        }),
        dropout_seed: None,
    });
    out.push(Case {
        name: "avg_pool2",
        params: store(&mut rng, &[("x", &[9, 8])]),
        build: probe(18, |g| {
            let x = g.param("x")?;
            g.avg_pool2(x)
        }),
        dropout_seed: None,
    });
    out.push(Case {
        name: "cross_entropy",
        params: store(&mut rng, &[("x", &[8, 10])]),
        build: Box::new(|g| {
            let x = g.param("x")?;
            g.cross_entropy(x, &[0, 9, 3, 3, 7, 1, 2, 5])
        }),
        dropout_seed: None,
    });
    out.push(Case {
        name: "conv1d",
        params: store(&mut rng, &[("x", &[16, 5]), ("c.weight", &[6, 15]), ("c.bias", &[6])]),
        build: probe(19, |g| {
            let x = g.param("x")?;
            g.conv1d(x, "c", 3, 2, 1)
        }),
        dropout_seed: None,
    });
    out.push(Case {
        name: "conv_transpose1d",
        params: store(&mut rng, &[("x", &[8, 5]), ("c.weight", &[5, 24]), ("c.bias", &[6])]),
        build: probe(20, |g| {
            let x = g.param("x")?;
            g.conv_transpose1d(x, "c", 4, 2, 1)
        }),
        dropout_seed: None,
    });
    let levels = [8u32, 5, 5, 5];
    let mut fsq = ParamStore::new(0);
    fsq.insert("z", fsq_safe_latents(&mut rng, 20, &levels, 1e-4)).unwrap();
    out.push(Case {
        name: "fsq_ste",
        params: fsq,
        build: probe(21, move |g| {
            let z = g.param("z")?;
            g.fsq_ste(z, &levels)
        }),
        dropout_seed: None,
    });
    let mut pose = ParamStore::new(0);
    let skel = Skeleton::smpl_like();
    let frames = 3;
    let mut clip = MotionClip::rest(frames, 24).unwrap();
    for v in clip.as_mut_slice() {
        *v += 0.2 * rng.normal();
    }
    for t in 0..frames {
        clip.set_rotation(t, 0, Rotation6D { a: [1.0, 0.3, -0.2], b: [0.1, 0.9, 0.4] });
    }
    pose.insert("pose", Tensor::matrix(frames, clip.width(), clip.into_vec()).unwrap()).unwrap();
    out.push(Case {
        name: "forward_kinematics",
        params: pose,
        build: probe(22, move |g| {
            let p = g.param("pose")?;
            g.forward_kinematics(p, &skel)
        }),
        dropout_seed: None,
    });
    out
}

/// Gradient check of every op, as `(name, report)` in a fixed order.
pub fn op_gradient_suite(seed: u64) -> Result<Vec<(&'static str, GradCheckReport)>> {
    cases(seed)
        .into_iter()
        .map(|c| {
            let cfg = GradCheck { samples: 96, seed, dropout_seed: c.dropout_seed, ..GradCheck::default() };
            Ok((c.name, grad_check(&c.params, c.build, cfg)?))
        })
        .collect()
}

/// Gradient check of the full tokenizer reconstruction loss on a short
/// synthetic clip, in `f64`.
pub fn tokenizer_gradient_check(seed: u64) -> Result<GradCheckReport> {
    let cfg = TokenizerConfig { width: 8, ..TokenizerConfig::toy() };
    let tok = Tokenizer::<f64>::new(cfg, seed)?;
    let spec = crate::io::SyntheticCorpusSpec { n_clips: 1, frames: 16, seed, ..Default::default() };
    let clip = crate::io::gen_synthetic_motion(&spec)?.remove(0);
    let input = Tokenizer::<f64>::pose_input(&clip);
    let tok_ref = tok.clone();
    let build = move |g: &mut Graph<'_, f64>| -> Result<Var> {
        let x = g.input(input.clone());
        let fwd = tok_ref.forward(g, x)?;
        tok_ref.loss(g, fwd.recon, x)
    };
    grad_check(&tok.params, build, GradCheck { samples: 128, seed, resolvable: 1e-6, ..GradCheck::default() })
}
