//! Memory matching, temporal aggregation and score reweighting.
//!
//! Grid maps are `[E, S_h, S_w]`; flattening the spatial axes gives the
//! `[E, S_h·S_w]` layout used for every similarity product, so grid
//! `(i, j)` is row/column `i·S_w + j` of a similarity matrix.

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::network::CategoryScores;
use crate::nn::{Conv2d, ParamStore};
use crate::tensor::{sigmoid, Tensor};

/// Pairwise grid affinity, rows = current grids, columns = one memory
/// frame's grids.
#[derive(Clone, Debug, PartialEq)]
pub struct GridSimilarity {
    pub sim: Tensor,
    pub as_probability: bool,
}

impl GridSimilarity {
    pub fn probabilities(&self) -> GridSimilarity {
        if self.as_probability {
            return self.clone();
        }
        GridSimilarity {
            sim: self.sim.map(sigmoid),
            as_probability: true,
        }
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.sim.data()[row * self.sim.dim(1) + col]
    }

    pub fn num_rows(&self) -> usize {
        self.sim.dim(0)
    }
}

/// Softmax weights `W_T`, `[S_h·S_w, T·S_h·S_w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AggregationWeights {
    pub weights: Tensor,
}

/// Reweighted class probabilities `P`, `[C_cls, S_h, S_w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ReweightedScores {
    pub scores: Tensor,
}

impl ReweightedScores {
    pub fn at(&self, i: usize, j: usize, class: usize) -> f64 {
        let (_, h, w) = self.scores.chw();
        self.scores.data()[(class * h + i) * w + j]
    }
}

/// Two separate convolution stacks (query path and memory path) whose
/// flattened outputs are compared by inner product.
#[derive(Clone, Debug)]
pub struct MemoryMatcher {
    pub query: Vec<Conv2d>,
    pub memory: Vec<Conv2d>,
    embed_dim: usize,
}

impl MemoryMatcher {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, prefix: &str, feature_dim: usize) -> Self {
        let stack = |store: &mut ParamStore, rng: &mut _, path: &str| {
            (0..2)
                .map(|l| Conv2d::new(store, rng, &format!("{prefix}.{path}{l}"), feature_dim, feature_dim, 3, 1, true))
                .collect()
        };
        let query = stack(store, rng, "query");
        let memory = stack(store, rng, "memory");
        Self {
            query,
            memory,
            embed_dim: feature_dim,
        }
    }

    /// Logits are divided by this before any sigmoid or softmax.
    pub fn logit_scale(&self) -> f64 {
        1.0 / (self.embed_dim as f64).sqrt()
    }

    fn embed(stack: &[Conv2d], tape: &mut Tape, key: Var) -> Var {
        let mut x = key;
        for conv in stack {
            x = conv.forward(tape, x);
        }
        let (e, h, w) = tape.value(x).chw();
        tape.reshape(x, &[e, h * w])
    }

    /// Query-path embedding `[E', S_h·S_w]` of the current key map.
    pub fn embed_query(&self, tape: &mut Tape, key: Var) -> Var {
        Self::embed(&self.query, tape, key)
    }

    /// Memory-path embedding `[E', S_h·S_w]` of a stored key map.
    pub fn embed_memory(&self, tape: &mut Tape, key: Var) -> Var {
        Self::embed(&self.memory, tape, key)
    }

    /// Similarity logits `[S_h·S_w, S_h·S_w]` between two embeddings.
    pub fn logits(&self, tape: &mut Tape, query: Var, memory: Var) -> Var {
        let qt = tape.transpose(query);
        let prod = tape.matmul(qt, memory);
        tape.scale(prod, self.logit_scale())
    }
}

/// The learned parts of the spatio-temporal modules.
#[derive(Clone, Debug)]
pub struct Aggregator {
    pub matcher: MemoryMatcher,
    pub category_value: Conv2d,
    pub mask_value: Conv2d,
}

impl Aggregator {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, feature_dim: usize) -> Self {
        let e = feature_dim;
        Self {
            matcher: MemoryMatcher::new(store, rng, "matcher", e),
            category_value: Conv2d::new(store, rng, "aggregate.category_value", e, e, 1, 1, true),
            mask_value: Conv2d::new(store, rng, "aggregate.mask_value", e, e, 1, 1, true),
        }
    }
}

/// Applies a value projection to a `[E, S_h, S_w]` map and flattens it to
/// `[E, S_h·S_w]`.
pub fn project_values(tape: &mut Tape, proj: &Conv2d, feats: Var) -> Var {
    let y = proj.forward(tape, feats);
    let (e, h, w) = tape.value(y).chw();
    tape.reshape(y, &[e, h * w])
}

/// Softmax over the concatenated similarity logits of all memory frames.
pub fn aggregation_weights_var(tape: &mut Tape, sim_logits: &[Var]) -> Var {
    let joint = tape.concat(sim_logits, 1);
    tape.softmax_rows(joint)
}

/// `C_A` or `M_A` as a `[E, S_h, S_w]` map: each current grid receives the
/// `W_T`-weighted sum of the projected memory feature vectors.
pub fn temporal_aggregate_var(tape: &mut Tape, sim_logits: &[Var], values: &[Var], grid: [usize; 2]) -> Var {
    assert_eq!(sim_logits.len(), values.len(), "one value map per similarity");
    let w = aggregation_weights_var(tape, sim_logits);
    let v = tape.concat(values, 1);
    let wt = tape.transpose(w);
    let out = tape.matmul(v, wt);
    let e = tape.shape(out)[0];
    tape.reshape(out, &[e, grid[0], grid[1]])
}

/// Per-grid weight `avg_k max_c sim_k[r, c]`, shape `[S_h·S_w]`.
pub fn reweight_factor_var(tape: &mut Tape, sim_probs: &[Var]) -> Var {
    assert!(!sim_probs.is_empty(), "reweighting needs at least one similarity");
    let maxes: Vec<Var> = sim_probs.iter().map(|&s| tape.row_max(s)).collect();
    let mut acc = maxes[0];
    for &m in &maxes[1..] {
        acc = tape.add(acc, m);
    }
    tape.scale(acc, 1.0 / maxes.len() as f64)
}

/// `P = Cat ⊙ factor`, broadcasting the per-grid factor over classes.
pub fn reweight_var(tape: &mut Tape, cat_probs: Var, factor: Var) -> Var {
    tape.mul_broadcast(cat_probs, factor)
}

// ----- tensor-level operations ----------------------------------------------

fn check_same(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Grid similarity logits between a query key map and one memory key map.
pub fn match_memory(matcher: &MemoryMatcher, store: &ParamStore, key_query: &Tensor, key_memory: &Tensor) -> Result<GridSimilarity> {
    check_same(key_query, key_memory, "match_memory")?;
    if key_query.shape().len() != 3 {
        return Err(shape_err(format!("key map must be [E, S_h, S_w], got {:?}", key_query.shape())));
    }
    let mut tape = Tape::inference(store);
    let q = tape.constant(key_query.clone());
    let m = tape.constant(key_memory.clone());
    let qe = matcher.embed_query(&mut tape, q);
    let me = matcher.embed_memory(&mut tape, m);
    let logits = matcher.logits(&mut tape, qe, me);
    Ok(GridSimilarity {
        sim: tape.value(logits).clone(),
        as_probability: false,
    })
}

/// One similarity per memory key map, in the order given. The query
/// embedding is computed once and shared.
pub fn match_all_memory(matcher: &MemoryMatcher, store: &ParamStore, key_query: &Tensor, keys_memory: &[&Tensor]) -> Result<Vec<GridSimilarity>> {
    if keys_memory.is_empty() {
        return Err(Error::EmptyMemory);
    }
    for k in keys_memory {
        check_same(key_query, k, "match_all_memory")?;
    }
    let mut tape = Tape::inference(store);
    let q = tape.constant(key_query.clone());
    let qe = matcher.embed_query(&mut tape, q);
    let mut out = Vec::with_capacity(keys_memory.len());
    for k in keys_memory {
        let m = tape.constant((*k).clone());
        let me = matcher.embed_memory(&mut tape, m);
        let logits = matcher.logits(&mut tape, qe, me);
        out.push(GridSimilarity {
            sim: tape.value(logits).clone(),
            as_probability: false,
        });
    }
    Ok(out)
}

fn check_logits(sims: &[GridSimilarity]) -> Result<usize> {
    let Some(first) = sims.first() else {
        return Err(Error::EmptyMemory);
    };
    let n = first.num_rows();
    for s in sims {
        if s.as_probability {
            return Err(Error::Config("temporal aggregation takes similarity logits, not probabilities".into()));
        }
        if s.sim.shape() != [n, n] {
            return Err(shape_err(format!("similarity must be [{n}, {n}], got {:?}", s.sim.shape())));
        }
    }
    Ok(n)
}

/// `W_T` for the given similarity logits.
pub fn aggregation_weights(sims: &[GridSimilarity]) -> Result<AggregationWeights> {
    check_logits(sims)?;
    let mut tape = Tape::new();
    let vars: Vec<Var> = sims.iter().map(|s| tape.constant(s.sim.clone())).collect();
    let w = aggregation_weights_var(&mut tape, &vars);
    Ok(AggregationWeights {
        weights: tape.value(w).clone(),
    })
}

/// Aggregates a `[T, E, S_h, S_w]` memory stack with the given similarity
/// logits after projecting each frame through `value_proj`.
pub fn temporal_aggregate(sims: &[GridSimilarity], feats: &Tensor, value_proj: &Conv2d, store: &ParamStore) -> Result<Tensor> {
    let n = check_logits(sims)?;
    let s = feats.shape();
    if s.len() != 4 {
        return Err(shape_err(format!("memory stack must be [T, E, S_h, S_w], got {s:?}")));
    }
    let (t, e, h, w) = (s[0], s[1], s[2], s[3]);
    if t != sims.len() {
        return Err(shape_err(format!("{} similarities for {t} memory frames", sims.len())));
    }
    if h * w != n {
        return Err(shape_err(format!("memory grid {h}x{w} does not match similarity size {n}")));
    }
    let mut tape = Tape::inference(store);
    let sim_vars: Vec<Var> = sims.iter().map(|s| tape.constant(s.sim.clone())).collect();
    let plane = e * h * w;
    let values: Vec<Var> = (0..t)
        .map(|k| {
            let frame = Tensor::from_vec(&[e, h, w], feats.data()[k * plane..(k + 1) * plane].to_vec());
            let v = tape.constant(frame);
            project_values(&mut tape, value_proj, v)
        })
        .collect();
    let out = temporal_aggregate_var(&mut tape, &sim_vars, &values, [h, w]);
    Ok(tape.value(out).clone())
}

/// Element-wise sum of the current and the retrieved feature map.
pub fn fuse_aggregated(current: &Tensor, retrieved: &Tensor) -> Result<Tensor> {
    current.add(retrieved)
}

/// Multiplies class probabilities by the row-max similarity to the most
/// recent memory frames, averaged when two are given.
pub fn reweight_scores(cat: &CategoryScores, sim1: &GridSimilarity, sim2: Option<&GridSimilarity>) -> Result<ReweightedScores> {
    let probs = cat.probabilities();
    let (_, h, w) = probs.values.chw();
    let sims: Vec<&GridSimilarity> = std::iter::once(sim1).chain(sim2).collect();
    for s in &sims {
        if !s.as_probability {
            return Err(Error::Config("score reweighting takes similarity probabilities".into()));
        }
        if s.num_rows() != h * w {
            return Err(shape_err(format!("similarity has {} rows for a {h}x{w} grid", s.num_rows())));
        }
    }
    let mut tape = Tape::new();
    let c = tape.constant(probs.values);
    let vars: Vec<Var> = sims.iter().map(|s| tape.constant(s.sim.clone())).collect();
    let factor = reweight_factor_var(&mut tape, &vars);
    let p = reweight_var(&mut tape, c, factor);
    Ok(ReweightedScores {
        scores: tape.value(p).clone(),
    })
}

/// `S̃im`: the row maxima of a similarity reshaped to `[S_h, S_w]`.
pub fn row_max_map(sim: &GridSimilarity, grid: [usize; 2]) -> Result<Tensor> {
    if sim.num_rows() != grid[0] * grid[1] {
        return Err(shape_err(format!("similarity has {} rows for grid {grid:?}", sim.num_rows())));
    }
    let cols = sim.sim.dim(1);
    let data = sim
        .sim
        .data()
        .chunks(cols)
        .map(|r| r.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    Ok(Tensor::from_vec(&grid, data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    #[test]
    fn identity_paths_give_gram_matrix() {
        let mut store = ParamStore::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let e = 4;
        let matcher = MemoryMatcher::new(&mut store, &mut rng, "m", e);
        for conv in matcher.query.iter().chain(&matcher.memory) {
            let w = store.get_mut(conv.weight).data_mut();
            w.iter_mut().for_each(|v| *v = 0.0);
            for c in 0..e {
                w[((c * e + c) * 3 + 1) * 3 + 1] = 1.0;
            }
            store.get_mut(conv.bias.unwrap()).data_mut().fill(0.0);
        }
        // grid 2x2, one-hot rows: grid r gets basis vector e_r
        let mut k = Tensor::zeros(&[e, 2, 2]);
        for r in 0..4 {
            k.data_mut()[r * 4 + r] = 1.0;
        }
        let sim = match_memory(&matcher, &store, &k, &k).unwrap();
        for r in 0..4 {
            for c in 0..4 {
                let want = if r == c { matcher.logit_scale() } else { 0.0 };
                assert!((sim.get(r, c) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn match_all_equals_framewise() {
        let mut store = ParamStore::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let matcher = MemoryMatcher::new(&mut store, &mut rng, "m", 3);
        let q = rand_tensor(&mut rng, &[3, 2, 3]);
        let mems: Vec<Tensor> = (0..3).map(|_| rand_tensor(&mut rng, &[3, 2, 3])).collect();
        let refs: Vec<&Tensor> = mems.iter().collect();
        let joint = match_all_memory(&matcher, &store, &q, &refs).unwrap();
        for (j, m) in joint.iter().zip(&mems) {
            assert_eq!(j, &match_memory(&matcher, &store, &q, m).unwrap());
        }
        assert!(matches!(match_all_memory(&matcher, &store, &q, &[]), Err(Error::EmptyMemory)));
        let bad = Tensor::zeros(&[3, 3, 2]);
        assert!(match_memory(&matcher, &store, &q, &bad).is_err());
    }

    #[test]
    fn uniform_logits_average_everything() {
        let mut store = ParamStore::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let proj = Conv2d::new(&mut store, &mut rng, "v", 2, 2, 1, 1, true);
        let sims = vec![
            GridSimilarity {
                sim: Tensor::full(&[4, 4], 0.7),
                as_probability: false,
            };
            2
        ];
        let feats = rand_tensor(&mut rng, &[2, 2, 2, 2]);
        let out = temporal_aggregate(&sims, &feats, &proj, &store).unwrap();
        // mean of the projection equals projection of the mean for a 1x1 conv
        let w = store.get(proj.weight).data();
        let b = store.get(proj.bias.unwrap()).data();
        for o in 0..2 {
            let mut mean = 0.0;
            for t in 0..2 {
                for g in 0..4 {
                    let mut v = b[o];
                    for c in 0..2 {
                        v += w[o * 2 + c] * feats.data()[((t * 2 + c) * 4) + g];
                    }
                    mean += v / 8.0;
                }
            }
            for g in 0..4 {
                assert!((out.data()[o * 4 + g] - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn reweighting_identity_and_annihilator() {
        let cat = CategoryScores {
            values: Tensor::from_vec(&[2, 1, 2], vec![0.2, 0.4, 0.6, 0.8]),
            is_probability: true,
        };
        let ones = GridSimilarity {
            sim: Tensor::full(&[2, 2], 1.0),
            as_probability: true,
        };
        let zeros = GridSimilarity {
            sim: Tensor::zeros(&[2, 2]),
            as_probability: true,
        };
        let p = reweight_scores(&cat, &ones, Some(&ones)).unwrap();
        assert_eq!(p.scores, cat.values);
        let p = reweight_scores(&cat, &zeros, Some(&zeros)).unwrap();
        assert!(p.scores.data().iter().all(|&v| v == 0.0));
        let logits = GridSimilarity {
            sim: Tensor::zeros(&[2, 2]),
            as_probability: false,
        };
        assert!(reweight_scores(&cat, &logits, None).is_err());
    }

    #[test]
    fn row_max_map_layout() {
        let sim = GridSimilarity {
            sim: Tensor::from_vec(&[2, 3], vec![0.1, 0.9, 0.2, 0.5, 0.3, 0.4]),
            as_probability: true,
        };
        let m = row_max_map(&sim, [1, 2]).unwrap();
        assert_eq!(m.data(), &[0.9, 0.5]);
    }
}
