//! Finite-difference gradient checking.
//!
//! [`grad_check`] compares tape gradients against central differences of the
//! scalar the closure computes. The numeric side re-runs the forward pass at
//! perturbed inputs and never touches the backward code it is checking.

use std::sync::Arc;

use super::graph::{Activation, Graph, Var};
use super::rng::RngState;
use super::{Tensor, TensorError};
use crate::scalar::Scalar;

/// Maximum over all input coordinates of
/// `|analytic - numeric| / max(1, |numeric|)`.
///
/// `f` must build a scalar from the given vars; it is re-invoked for every
/// perturbed evaluation, so it must be deterministic.
pub fn grad_check<T, F>(f: &F, inputs: &[Tensor<T>], epsilon: f64) -> Result<T, TensorError>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var, TensorError>,
{
    let analytic: Vec<Tensor<T>> = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let loss = f(&mut g, &vars)?;
        if g.value(loss).numel() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: g.value(loss).shape().to_vec(),
            });
        }
        g.backward(loss)?;
        vars.iter().map(|&v| g.grad_or_zeros(v)).collect()
    };

    let eval = |perturbed: &[Tensor<T>]| -> Result<T, TensorError> {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.constant(t.clone())).collect();
        let loss = f(&mut g, &vars)?;
        Ok(g.value(loss).data()[0])
    };

    let eps = T::of(epsilon);
    let mut worst = T::zero();
    let mut work: Vec<Tensor<T>> = inputs.to_vec();
    for (ti, input) in inputs.iter().enumerate() {
        for ci in 0..input.numel() {
            let orig = input.data()[ci];
            work[ti].data_mut()[ci] = orig + eps;
            let plus = eval(&work)?;
            work[ti].data_mut()[ci] = orig - eps;
            let minus = eval(&work)?;
            work[ti].data_mut()[ci] = orig;
            let numeric = (plus - minus) / (T::of(2.0) * eps);
            if !numeric.is_finite() {
                return Err(TensorError::NonFinite { op: "grad_check" });
            }
            let analytic_v = analytic[ti].data()[ci];
            let err = (analytic_v - numeric).abs() / T::one().max(numeric.abs());
            if err > worst {
                worst = err;
            }
        }
    }
    Ok(worst)
}

/// A named gradient check over one op at randomized small shapes.
pub struct OpCheck {
    pub name: &'static str,
    run: fn(&mut RngState) -> Result<f64, TensorError>,
}

impl OpCheck {
    /// Max relative error for this op at the given seed.
    pub fn run(&self, seed: u64) -> Result<f64, TensorError> {
        let mut rng = RngState::seed_from(seed);
        (self.run)(&mut rng)
    }
}

fn random_tensor(rng: &mut RngState, shape: Vec<usize>) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.standard_normal()).collect();
    Tensor::new(shape, data).unwrap()
}

/// Random constant weights turn any output into a non-degenerate scalar.
/// Seeding per call keeps the weights identical across the repeated forward
/// evaluations of one check.
fn probe(g: &mut Graph<f64>, x: Var, seed: u64) -> Result<Var, TensorError> {
    let mut rng = RngState::seed_from(seed);
    let shape = g.value(x).shape().to_vec();
    let w = random_tensor(&mut rng, shape);
    let w = g.constant(w);
    let weighted = g.mul(x, w)?;
    g.sum(weighted)
}

const EPS: f64 = 1e-5;

/// Gradient checks for every differentiable op, at randomized shapes.
pub fn op_suite() -> Vec<OpCheck> {
    vec![
        OpCheck {
            name: "matmul",
            run: |rng| {
                let a = random_tensor(rng, vec![4, 3]);
                let b = random_tensor(rng, vec![3, 2]);
                let probe_seed = rng.below(1 << 31) as u64;
                grad_check(
                    &move |g, vars| {
                        let c = g.matmul(vars[0], vars[1])?;
                        probe(g, c, probe_seed)
                    },
                    &[a, b],
                    EPS,
                )
            },
        },
        OpCheck {
            name: "transpose",
            run: |rng| {
                let a = random_tensor(rng, vec![3, 5]);
                let probe_seed = rng.below(1 << 31) as u64;
                grad_check(
                    &move |g, vars| {
                        let y = g.transpose(vars[0])?;
                        probe(g, y, probe_seed)
                    },
                    &[a],
                    EPS,
                )
            },
        },
        OpCheck {
            name: "add",
            run: |rng| {
                let a = random_tensor(rng, vec![3, 4]);
                let b = random_tensor(rng, vec![3, 4]);
                let probe_seed = rng.below(1 << 31) as u64;
                grad_check(
                    &move |g, vars| {
                        let y = g.add(vars[0], vars[1])?;
                        probe(g, y, probe_seed)
                    },
                    &[a, b],
                    EPS,
                )
            },
        },
        OpCheck {
            name: "add_bias",
            run: |rng| {
                let a = random_tensor(rng, vec![3, 4]);
                let b = random_tensor(rng, vec![4]);
                let probe_seed = rng.below(1 << 31) as u64;
                grad_check(
                    &move |g, vars| {
                        let y = g.add_bias(vars[0], vars[1])?;
                        probe(g, y, probe_seed)
                    },
                    &[a, b],
                    EPS,
                )
            },
        },
        OpCheck {
            name: "mul",
            run: |rng| {
                let a = random_tensor(rng, vec![2, 6]);
                let b = random_tensor(rng, vec![2, 6]);
                let probe_seed = rng.below(1 << 31) as u64;
                grad_check(
                    &move |g, vars| {
                        let y = g.mul(vars[0], vars[1])?;
                        probe(g, y, probe_seed)
                    },
                    &[a, b],
                    EPS,
                )
            },
        },
        OpCheck {
            name: "scale",
            run: |rng| {
                let a = random_tensor(rng, vec![3, 3]);
                let c = rng.uniform(-2.0, 2.0);
                let probe_seed = rng.below(1 << 31) as u64;
                grad_check(
                    &move |g, vars| {
                        let y = g.scale(vars[0], c)?;
                        probe(g, y, probe_seed)
                    },
                    &[a],
                    EPS,
                )
            },
        },
        OpCheck {
            name: "concat_last_dim",
            run: |rng| {
                let a = random_tensor(rng, vec![3, 2]);
                let b = random_tensor(rng, vec![3, 4]);
                let c = random_tensor(rng, vec![3, 1]);
                let probe_seed = rng.below(1 << 31) as u64;
                grad_check(
                    &move |g, vars| {
                        let y = g.concat_cols(&[vars[0], vars[1], vars[2]])?;
                        probe(g, y, probe_seed)
                    },
                    &[a, b, c],
                    EPS,
                )
            },
        },
        OpCheck {
            name: "concat_rows",
            run: |rng| {
                let a = random_tensor(rng, vec![2, 3]);
                let b = random_tensor(rng, vec![4, 3]);
                let probe_seed = rng.below(1 << 31) as u64;
                grad_check(
                    &move |g, vars| {
                        let y = g.concat_rows(&[vars[0], vars[1]])?;
                        probe(g, y, probe_seed)
                    },
                    &[a, b],
                    EPS,
                )
            },
        },
        OpCheck {
            name: "slice",
            run: |rng| {
                let a = random_tensor(rng, vec![5, 6]);
                let probe_seed = rng.below(1 << 31) as u64;
                grad_check(
                    &move |g, vars| {
                        let rows = g.slice_rows(vars[0], 1, 3)?;
                        let y = g.slice_cols(rows, 2, 3)?;
                        probe(g, y, probe_seed)
                    },
                    &[a],
                    EPS,
                )
            },
        },
        OpCheck {
            name: "row_softmax",
            run: |rng| {
                let a = random_tensor(rng, vec![3, 5]);
                let mut mask = Tensor::zeros(vec![3, 5]);
                // Mask a couple of fixed positions to exercise the -inf path.
                mask.data_mut()[1] = f64::NEG_INFINITY;
                mask.data_mut()[9] = f64::NEG_INFINITY;
                let mask = Arc::new(mask);
                let probe_seed = rng.below(1 << 31) as u64;
                grad_check(
                    &move |g, vars| {
                        let y = g.row_softmax(vars[0], Some(Arc::clone(&mask)))?;
                        probe(g, y, probe_seed)
                    },
                    &[a],
                    EPS,
                )
            },
        },
        OpCheck {
            name: "layer_norm",
            run: |rng| {
                let x = random_tensor(rng, vec![2, 8]);
                let gain = random_tensor(rng, vec![8]);
                let bias = random_tensor(rng, vec![8]);
                let probe_seed = rng.below(1 << 31) as u64;
                grad_check(
                    &move |g, vars| {
                        let y = g.layer_norm(vars[0], vars[1], vars[2])?;
                        probe(g, y, probe_seed)
                    },
                    &[x, gain, bias],
                    EPS,
                )
            },
        },
        OpCheck {
            name: "gelu",
            run: |rng| {
                let x = random_tensor(rng, vec![4, 4]);
                let probe_seed = rng.below(1 << 31) as u64;
                grad_check(
                    &move |g, vars| {
                        let y = g.gelu(vars[0])?;
                        probe(g, y, probe_seed)
                    },
                    &[x],
                    EPS,
                )
            },
        },
        OpCheck {
            name: "relu",
            run: |rng| {
                // Keep inputs away from the kink at zero.
                let mut x = random_tensor(rng, vec![4, 4]);
                for v in x.data_mut() {
                    if v.abs() < 0.1 {
                        *v += 0.2_f64.copysign(*v);
                    }
                }
                let probe_seed = rng.below(1 << 31) as u64;
                grad_check(
                    &move |g, vars| {
                        let y = g.relu(vars[0])?;
                        probe(g, y, probe_seed)
                    },
                    &[x],
                    EPS,
                )
            },
        },
        OpCheck {
            name: "embedding_lookup",
            run: |rng| {
                let table = random_tensor(rng, vec![7, 4]);
                let ids: Vec<usize> = (0..6).map(|_| rng.below(7)).collect();
                let probe_seed = rng.below(1 << 31) as u64;
                grad_check(
                    &move |g, vars| {
                        let y = g.embedding_lookup(vars[0], &ids)?;
                        probe(g, y, probe_seed)
                    },
                    &[table],
                    EPS,
                )
            },
        },
        OpCheck {
            name: "dropout",
            run: |rng| {
                // A fixed rng seed per evaluation keeps the mask identical
                // across perturbed forward passes, which is what makes the
                // op differentiable at a fixed mask.
                let x = random_tensor(rng, vec![4, 5]);
                let mask_seed = rng.below(1 << 30) as u64;
                let probe_seed = rng.below(1 << 31) as u64;
                grad_check(
                    &move |g, vars| {
                        let mut drop_rng = RngState::seed_from(mask_seed);
                        let y = g.dropout(vars[0], 0.3, true, &mut drop_rng)?;
                        probe(g, y, probe_seed)
                    },
                    &[x],
                    EPS,
                )
            },
        },
        OpCheck {
            name: "mean_pool_masked",
            run: |rng| {
                let x = random_tensor(rng, vec![6, 3]);
                let mask = Arc::new(vec![true, true, false, true, false, false]);
                let probe_seed = rng.below(1 << 31) as u64;
                grad_check(
                    &move |g, vars| {
                        let y = g.mean_pool_masked(vars[0], &mask, 3)?;
                        probe(g, y, probe_seed)
                    },
                    &[x],
                    EPS,
                )
            },
        },
        OpCheck {
            name: "cross_entropy",
            run: |rng| {
                let logits = random_tensor(rng, vec![4, 6]);
                let targets: Vec<usize> = (0..4).map(|_| rng.below(6)).collect();
                grad_check(
                    &move |g, vars| g.cross_entropy(vars[0], &targets),
                    &[logits],
                    EPS,
                )
            },
        },
        OpCheck {
            name: "activation_dispatch",
            run: |rng| {
                let x = random_tensor(rng, vec![3, 3]);
                let probe_seed = rng.below(1 << 31) as u64;
                grad_check(
                    &move |g, vars| {
                        let y = g.activation(vars[0], Activation::Gelu)?;
                        probe(g, y, probe_seed)
                    },
                    &[x],
                    EPS,
                )
            },
        },
    ]
}

/// Runs every op check over `seeds`, returning `(name, max error)` pairs.
pub fn run_op_suite(seeds: &[u64]) -> Result<Vec<(&'static str, f64)>, TensorError> {
    let mut results = Vec::new();
    for check in op_suite() {
        let mut worst = 0.0f64;
        for &seed in seeds {
            let err = check.run(seed)?;
            if err > worst {
                worst = err;
            }
        }
        results.push((check.name, worst));
    }
    Ok(results)
}
