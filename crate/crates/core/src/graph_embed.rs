//! EdgeConv-style local consistency: feature-space graph, edge features,
//! shared MLP with max pooling, and the intermediate score matrix.

use crate::autodiff::{Real, Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::geometry::knn_excluding_self;
use crate::weights::{BoundWeights, Linear, GROUPS};

#[derive(Debug, Clone, Copy)]
pub struct GcnnWeights {
    /// Layers `2d -> d -> d -> 2d`.
    pub h1: [Linear; 3],
    /// `2d -> d` after pooling.
    pub post: Linear,
}

impl GcnnWeights {
    pub fn bind(w: &BoundWeights) -> Result<Self> {
        Ok(GcnnWeights {
            h1: [w.linear("gcnn.h1.0")?, w.linear("gcnn.h1.1")?, w.linear("gcnn.h1.2")?],
            post: w.linear("gcnn.post")?,
        })
    }
}

/// `k` nearest feature-space neighbours of every row, self excluded.
pub fn feature_graph<T: Real>(tape: &Tape<T>, f: Var, k: usize) -> Result<Vec<Vec<usize>>> {
    let v = tape.value(f);
    if v.rank() != 2 {
        return Err(shape_err("feature_graph", format!("features {:?}", v.shape())));
    }
    let m = v.rows();
    if k >= m {
        return Err(Error::InvalidInput(format!(
            "graph with k = {} needs more than {} points",
            k, m
        )));
    }
    knn_excluding_self(&v.to_f64_vec(), v.cols(), k)
}

/// `Δf[i, j] = [f_i, f_i - f_{nbr[i][j]}]`, shaped `M x k x 2d`.
pub fn edge_features<T: Real>(tape: &mut Tape<T>, f: Var, nbr: &[Vec<usize>]) -> Result<Var> {
    let shape = tape.shape(f).to_vec();
    if shape.len() != 2 || nbr.len() != shape[0] {
        return Err(shape_err(
            "edge_features",
            format!("features {:?} with {} neighbour lists", shape, nbr.len()),
        ));
    }
    let k = nbr.first().map_or(0, Vec::len);
    if k == 0 || nbr.iter().any(|r| r.len() != k) {
        return Err(shape_err("edge_features", "neighbour lists must share a nonzero length"));
    }
    let centre: Vec<usize> = (0..nbr.len()).flat_map(|i| std::iter::repeat_n(i, k)).collect();
    let flat: Vec<usize> = nbr.iter().flatten().copied().collect();
    let fi = tape.gather_rows(f, &centre)?;
    let fj = tape.gather_rows(f, &flat)?;
    let diff = tape.sub(fi, fj)?;
    let cat = tape.concat(&[fi, diff], 1)?;
    tape.reshape(cat, &[nbr.len(), k, 2 * shape[1]])
}

/// Shared MLP over edges, max over neighbours, then `2d -> d`.
/// Returns `(ĥ, pooled)`.
pub fn gcnn_embed<T: Real>(tape: &mut Tape<T>, delta: Var, w: &GcnnWeights) -> Result<(Var, Var)> {
    let s = tape.shape(delta).to_vec();
    if s.len() != 3 {
        return Err(shape_err("gcnn_embed", format!("edge tensor {:?}", s)));
    }
    let (m, k, c) = (s[0], s[1], s[2]);
    let mut h = tape.reshape(delta, &[m * k, c])?;
    for layer in &w.h1 {
        h = layer.apply(tape, h)?;
        h = tape.group_norm(h, GROUPS)?;
        h = tape.relu(h)?;
    }
    let width = tape.shape(h)[1];
    let h = tape.reshape(h, &[m, k, width])?;
    let pooled = tape.max_reduce(h, 1)?;
    let h_hat = w.post.apply(tape, pooled)?;
    Ok((h_hat, pooled))
}

/// Graph construction plus embedding in one call.
pub fn embed<T: Real>(tape: &mut Tape<T>, f: Var, k: usize, w: &GcnnWeights) -> Result<Var> {
    let nbr = feature_graph(tape, f, k)?;
    let delta = edge_features(tape, f, &nbr)?;
    Ok(gcnn_embed(tape, delta, w)?.0)
}

/// `Ŝ = ĥX · ĥYᵀ`.
pub fn initial_scores<T: Real>(tape: &mut Tape<T>, hx: Var, hy: Var) -> Result<Var> {
    tape.matmul_nt(hx, hy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, Tensor};
    use crate::weights::{ModelConfig, ModelWeights};
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn identical_features_give_zero_differences() {
        let mut t = Tape::<f64>::new();
        let f = t.constant(Tensor::full(&[4, 3], 0.7));
        let nbr = feature_graph(&t, f, 2).unwrap();
        let e = edge_features(&mut t, f, &nbr).unwrap();
        let v = t.value(e);
        assert_eq!(v.shape(), &[4, 2, 6]);
        for row in v.data().chunks(6) {
            assert_eq!(&row[..3], &[0.7; 3]);
            assert_eq!(&row[3..], &[0.0; 3]);
        }
    }

    #[test]
    fn self_neighbour_gives_zero_half() {
        let mut t = Tape::<f64>::new();
        let f = t.constant(random(&[3, 2], 1));
        let e = edge_features(&mut t, f, &[vec![0], vec![1], vec![2]]).unwrap();
        let (fv, ev) = (t.value(f).clone(), t.value(e));
        for i in 0..3 {
            assert_eq!(&ev.data()[i * 4..i * 4 + 2], fv.row(i));
            assert_eq!(&ev.data()[i * 4 + 2..i * 4 + 4], &[0.0, 0.0]);
        }
    }

    #[test]
    fn edge_features_match_loop() {
        let fv = random(&[5, 3], 2);
        let mut t = Tape::<f64>::new();
        let f = t.constant(fv.clone());
        let nbr = feature_graph(&t, f, 2).unwrap();
        let e = edge_features(&mut t, f, &nbr).unwrap();
        let ev = t.value(e);
        for i in 0..5 {
            for (jj, &j) in nbr[i].iter().enumerate() {
                for c in 0..3 {
                    let base = (i * 2 + jj) * 6;
                    assert_eq!(ev.data()[base + c], fv.at(i, c));
                    assert_eq!(ev.data()[base + 3 + c], fv.at(i, c) - fv.at(j, c));
                }
            }
        }
    }

    #[test]
    fn graph_k_too_large_is_rejected() {
        let mut t = Tape::<f64>::new();
        let f = t.constant(random(&[4, 2], 0));
        assert!(feature_graph(&t, f, 4).is_err());
    }

    fn bound(d: usize, seed: u64) -> (Tape<f64>, GcnnWeights) {
        let w = ModelWeights::<f64>::init(ModelConfig::new(d, 2, 4).unwrap(), seed).unwrap();
        let mut t = Tape::new();
        let b = w.bind(&mut t);
        let g = GcnnWeights::bind(&b).unwrap();
        (t, g)
    }

    #[test]
    fn shapes_and_single_neighbour_pooling() {
        let (mut t, g) = bound(16, 3);
        let f = t.constant(random(&[6, 16], 4));
        let e = edge_features(&mut t, f, &(0..6).map(|i| vec![(i + 1) % 6]).collect::<Vec<_>>()).unwrap();
        let (h, pooled) = gcnn_embed(&mut t, e, &g).unwrap();
        assert_eq!(t.shape(h), &[6, 16]);
        assert_eq!(t.shape(pooled), &[6, 32]);
        // With k = 1 the pooled rows are the MLP output itself.
        let flat = t.reshape(e, &[6, 32]).unwrap();
        let mut x = flat;
        for l in &g.h1 {
            x = l.apply(&mut t, x).unwrap();
            x = t.group_norm(x, GROUPS).unwrap();
            x = t.relu(x).unwrap();
        }
        assert_eq!(t.value(x), t.value(pooled));
    }

    #[test]
    fn pooled_is_invariant_to_neighbour_order() {
        let (mut t, g) = bound(16, 5);
        let f = t.constant(random(&[8, 16], 6));
        let nbr = feature_graph(&t, f, 3).unwrap();
        let rev: Vec<Vec<usize>> = nbr.iter().map(|r| r.iter().rev().copied().collect()).collect();
        let e1 = edge_features(&mut t, f, &nbr).unwrap();
        let e2 = edge_features(&mut t, f, &rev).unwrap();
        let (h1, _) = gcnn_embed(&mut t, e1, &g).unwrap();
        let (h2, _) = gcnn_embed(&mut t, e2, &g).unwrap();
        // Group statistics are summed in a different order, so only rounding differs.
        for (a, b) in t.value(h1).data().iter().zip(t.value(h2).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn initial_scores_examples() {
        let mut t = Tape::<f64>::new();
        let eye = t.constant(Tensor::from_fn(&[3, 3], |k| if k % 4 == 0 { 1.0 } else { 0.0 }));
        let s = initial_scores(&mut t, eye, eye).unwrap();
        assert_eq!(t.value(s), t.value(eye));
        let z = t.constant(Tensor::zeros(&[2, 3]));
        let s = initial_scores(&mut t, z, eye).unwrap();
        assert!(t.value(s).data().iter().all(|&v| v == 0.0));

        let (a, b) = (random(&[3, 5], 1), random(&[4, 5], 2));
        let (va, vb) = (t.constant(a.clone()), t.constant(b.clone()));
        let s = initial_scores(&mut t, va, vb).unwrap();
        for i in 0..3 {
            for j in 0..4 {
                let dot: f64 = (0..5).map(|c| a.at(i, c) * b.at(j, c)).sum();
                assert!((t.value(s).at(i, j) - dot).abs() < 1e-14);
            }
        }
        let bad = t.constant(Tensor::zeros(&[4, 2]));
        assert!(initial_scores(&mut t, va, bad).is_err());
    }

    #[test]
    fn column_permutation_equivariance() {
        let (a, b) = (random(&[4, 6], 3), random(&[5, 6], 4));
        let perm = [3, 0, 4, 1, 2];
        let bp = Tensor::from_rows(&perm.iter().map(|&p| b.row(p).to_vec()).collect::<Vec<_>>()).unwrap();
        let mut t = Tape::<f64>::new();
        let (va, vb, vbp) = (t.constant(a), t.constant(b), t.constant(bp));
        let s = initial_scores(&mut t, va, vb).unwrap();
        let sp = initial_scores(&mut t, va, vbp).unwrap();
        for i in 0..4 {
            for (c, &p) in perm.iter().enumerate() {
                assert_eq!(t.value(sp).at(i, c), t.value(s).at(i, p));
            }
        }
    }

    #[test]
    fn h1_gradients_check() {
        let w = ModelWeights::<f64>::init(ModelConfig::new(16, 2, 4).unwrap(), 11).unwrap();
        let names = [
            "gcnn.h1.0.weight",
            "gcnn.h1.0.bias",
            "gcnn.h1.1.weight",
            "gcnn.h1.1.bias",
            "gcnn.h1.2.weight",
            "gcnn.h1.2.bias",
            "gcnn.post.weight",
            "gcnn.post.bias",
        ];
        let mut inputs: Vec<Tensor<f64>> = names.iter().map(|n| w.get(n).unwrap().clone()).collect();
        inputs.push(random(&[6, 16], 12));
        let err = grad_check(
            |t, v| {
                let lin = |i: usize| Linear { weight: v[2 * i], bias: v[2 * i + 1] };
                let g = GcnnWeights {
                    h1: [lin(0), lin(1), lin(2)],
                    post: lin(3),
                };
                let nbr: Vec<Vec<usize>> = (0..6).map(|i| vec![(i + 1) % 6, (i + 3) % 6]).collect();
                let e = edge_features(t, v[8], &nbr)?;
                let (h, _) = gcnn_embed(t, e, &g)?;
                t.sum_all(h)
            },
            &inputs,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
