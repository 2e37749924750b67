//! Jigsaw puzzle construction on a stage feature map.
//!
//! A stage input `(C, H, W)` is average-pooled to an `M × M` grid, its cells are
//! permuted spatially (all channels share one permutation), and the shuffled
//! cells become the nodes of a 4-neighborhood lattice graph. Grid positions are
//! always row-major: position `p = i·M + j`.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::autograd::Graph;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MapKind {
    StageInput,
    StageOutput,
}

/// A `(C, H, W)` feature map captured at a stage boundary.
#[derive(Clone, Debug, PartialEq)]
pub struct StageFeatureMap {
    data: Tensor,
    stage_index: usize,
    kind: MapKind,
}

impl StageFeatureMap {
    pub fn new(data: Tensor, stage_index: usize, kind: MapKind) -> Result<Self> {
        let s = data.shape();
        if s.len() != 3 || s.contains(&0) {
            return Err(Error::Shape {
                context: "stage feature map (C, H, W)",
                expected: vec![1, 1, 1],
                found: s.to_vec(),
            });
        }
        if !data.is_finite() {
            return Err(Error::NonFinite(alloc::format!("stage {stage_index} feature map")));
        }
        if stage_index == 0 {
            return Err(Error::StageOutOfRange {
                stage: 0,
                stages: 0,
            });
        }
        Ok(Self {
            data,
            stage_index,
            kind,
        })
    }

    pub fn data(&self) -> &Tensor {
        &self.data
    }

    pub fn stage_index(&self) -> usize {
        self.stage_index
    }

    pub fn kind(&self) -> MapKind {
        self.kind
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }
}

/// A `(C, M, M)` pooled grid.
#[derive(Clone, Debug, PartialEq)]
pub struct PooledGrid {
    data: Tensor,
}

impl PooledGrid {
    pub fn new(data: Tensor) -> Result<Self> {
        let s = data.shape();
        if s.len() != 3 || s[1] != s[2] || s[0] == 0 {
            return Err(Error::Shape {
                context: "pooled grid (C, M, M)",
                expected: vec![s.first().copied().unwrap_or(1), 2, 2],
                found: s.to_vec(),
            });
        }
        if s[1] < 2 {
            return Err(Error::GridTooSmall(s[1]));
        }
        Ok(Self { data })
    }

    pub fn data(&self) -> &Tensor {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor {
        self.data
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn side(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn cells(&self) -> usize {
        self.side() * self.side()
    }

    /// The `(C, M²)` matrix whose column `p` is the feature vector at position `p`.
    pub fn flatten(&self) -> Tensor {
        let (c, n) = (self.channels(), self.cells());
        self.data.clone().reshape(&[c, n]).expect("pooled grid flatten")
    }
}

pub(crate) fn check_grid_side(m: usize) -> Result<()> {
    if m < 2 {
        Err(Error::GridTooSmall(m))
    } else {
        Ok(())
    }
}

/// Adaptive average pooling of a stage map to an `M × M` grid.
pub fn pool_to_grid(x: &StageFeatureMap, m: usize) -> Result<PooledGrid> {
    check_grid_side(m)?;
    if m > x.height() || m > x.width() {
        return Err(Error::GridTooLarge {
            grid: m,
            height: x.height(),
            width: x.width(),
        });
    }
    let (c, h, w) = (x.channels(), x.height(), x.width());
    let mut g = Graph::new();
    let input = g.constant(x.data.clone().reshape(&[1, c, h, w])?);
    let pooled = g.adaptive_avg_pool(input, m, m)?;
    PooledGrid::new(g.value(pooled).clone().reshape(&[c, m, m])?)
}

/// A bijection on the `M²` row-major grid positions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Permutation {
    forward: Vec<usize>,
    inverse: Vec<usize>,
}

impl Permutation {
    pub fn identity(len: usize) -> Self {
        let forward: Vec<usize> = (0..len).collect();
        Self {
            inverse: forward.clone(),
            forward,
        }
    }

    pub fn from_forward(forward: Vec<usize>) -> Result<Self> {
        let mut inverse = vec![usize::MAX; forward.len()];
        for (p, &q) in forward.iter().enumerate() {
            if q >= forward.len() {
                return Err(Error::InvalidPermutation("entry out of range"));
            }
            if inverse[q] != usize::MAX {
                return Err(Error::InvalidPermutation("repeated entry"));
            }
            inverse[q] = p;
        }
        Ok(Self { forward, inverse })
    }

    pub fn len(&self) -> usize {
        self.forward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.forward.is_empty()
    }

    pub fn forward(&self) -> &[usize] {
        &self.forward
    }

    pub fn inverse_map(&self) -> &[usize] {
        &self.inverse
    }

    pub fn inverse(&self) -> Self {
        Self {
            forward: self.inverse.clone(),
            inverse: self.forward.clone(),
        }
    }

    pub fn is_identity(&self) -> bool {
        self.forward.iter().enumerate().all(|(p, &q)| p == q)
    }

    /// The permutation `self ∘ other`, acting as `shuffle(g, self ∘ other) =
    /// shuffle(shuffle(g, other), self)`.
    pub fn compose(&self, other: &Self) -> Result<Self> {
        if self.len() != other.len() {
            return Err(Error::PermutationSize {
                expected: self.len(),
                found: other.len(),
            });
        }
        Self::from_forward(self.forward.iter().map(|&q| other.forward[q]).collect())
    }
}

/// Uniformly random permutation of the `M²` positions.
pub fn sample_permutation<R: Rng + ?Sized>(m: usize, rng: &mut R) -> Result<Permutation> {
    check_grid_side(m)?;
    let mut forward: Vec<usize> = (0..m * m).collect();
    forward.shuffle(rng);
    Permutation::from_forward(forward)
}

/// Output position `q` takes the feature vector at input position `p.forward[q]`.
pub fn shuffle_grid(g: &PooledGrid, p: &Permutation) -> Result<PooledGrid> {
    if p.len() != g.cells() {
        return Err(Error::PermutationSize {
            expected: g.cells(),
            found: p.len(),
        });
    }
    let (c, n) = (g.channels(), g.cells());
    let src = g.data.data();
    let mut out = vec![0.0; c * n];
    for ch in 0..c {
        for (q, &from) in p.forward.iter().enumerate() {
            out[ch * n + q] = src[ch * n + from];
        }
    }
    PooledGrid::new(Tensor::new(g.data.shape(), out)?)
}

/// Binary symmetric adjacency of an `M × M` lattice, 4-neighborhood.
#[derive(Clone, Debug, PartialEq)]
pub struct Adjacency {
    side: usize,
    matrix: Tensor,
}

impl Adjacency {
    pub fn side(&self) -> usize {
        self.side
    }

    pub fn nodes(&self) -> usize {
        self.side * self.side
    }

    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }

    pub fn is_edge(&self, p: usize, q: usize) -> bool {
        self.matrix.data()[p * self.nodes() + q] != 0.0
    }

    pub fn neighbors(&self, p: usize) -> Vec<usize> {
        (0..self.nodes()).filter(|&q| self.is_edge(p, q)).collect()
    }

    pub fn degree(&self, p: usize) -> usize {
        self.neighbors(p).len()
    }

    pub fn mask(&self) -> Vec<bool> {
        self.matrix.data().iter().map(|&v| v != 0.0).collect()
    }

    pub fn edge_count(&self) -> usize {
        self.matrix.data().iter().filter(|&&v| v != 0.0).count() / 2
    }
}

pub fn grid_adjacency(m: usize) -> Result<Adjacency> {
    check_grid_side(m)?;
    let n = m * m;
    let mut a = Tensor::zeros(&[n, n]);
    for i in 0..m {
        for j in 0..m {
            let p = i * m + j;
            if j + 1 < m {
                a.set(&[p, p + 1], 1.0);
                a.set(&[p + 1, p], 1.0);
            }
            if i + 1 < m {
                a.set(&[p, p + m], 1.0);
                a.set(&[p + m, p], 1.0);
            }
        }
    }
    Ok(Adjacency { side: m, matrix: a })
}

/// `Â[i][j] = a[i][j] / √(d_i d_j)` with `d` the row sums of `a`.
pub fn normalize_adjacency(a: &Tensor) -> Result<Tensor> {
    let s = a.shape();
    if s.len() != 2 || s[0] != s[1] {
        return Err(Error::Shape {
            context: "normalize adjacency",
            expected: vec![s.first().copied().unwrap_or(0); 2],
            found: s.to_vec(),
        });
    }
    let n = s[0];
    let deg: Vec<f64> = a.data().chunks(n).map(|r| r.iter().sum()).collect();
    if let Some(i) = deg.iter().position(|&d| d <= 0.0) {
        return Err(Error::ZeroDegree(i));
    }
    Ok(Tensor::from_fn(&[n, n], |k| {
        let (i, j) = (k / n, k % n);
        a.data()[k] / libm::sqrt(deg[i] * deg[j])
    }))
}

/// The puzzle graph over shuffled grid fragments.
#[derive(Clone, Debug, PartialEq)]
pub struct ShuffledGraph {
    adjacency: Adjacency,
    attributes: Tensor,
    permutation: Permutation,
}

impl ShuffledGraph {
    pub fn side(&self) -> usize {
        self.adjacency.side
    }

    pub fn num_nodes(&self) -> usize {
        self.adjacency.nodes()
    }

    pub fn adjacency(&self) -> &Adjacency {
        &self.adjacency
    }

    /// `(C, M²)`; column `i` is the feature vector at shuffled position `i`.
    pub fn attributes(&self) -> &Tensor {
        &self.attributes
    }

    pub fn channels(&self) -> usize {
        self.attributes.shape()[0]
    }

    /// The generating permutation. Kept for diagnostics; the encoder and decoder
    /// never read it.
    pub fn permutation(&self) -> &Permutation {
        &self.permutation
    }

    /// Replace the node attributes, keeping structure. Used to relabel inputs
    /// in equivariance checks.
    pub fn with_attributes(&self, attributes: Tensor) -> Result<Self> {
        attributes.expect_shape(self.attributes.shape(), "shuffled graph attributes")?;
        Ok(Self {
            attributes,
            ..self.clone()
        })
    }
}

pub fn build_shuffled_graph(x: &StageFeatureMap, m: usize, p: &Permutation) -> Result<ShuffledGraph> {
    let pooled = pool_to_grid(x, m)?;
    let shuffled = shuffle_grid(&pooled, p)?;
    Ok(ShuffledGraph {
        adjacency: grid_adjacency(m)?,
        attributes: shuffled.flatten(),
        permutation: p.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest, Just, Strategy};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn map(shape: &[usize], f: impl FnMut(usize) -> f64) -> StageFeatureMap {
        StageFeatureMap::new(Tensor::from_fn(shape, f), 1, MapKind::StageInput).unwrap()
    }

    #[test]
    fn pooling_at_native_resolution_is_identity() {
        let x = map(&[1, 3, 3], |k| (k + 1) as f64);
        assert_eq!(pool_to_grid(&x, 3).unwrap().data(), x.data());
    }

    #[test]
    fn pooling_constant_and_window_means() {
        let x = map(&[1, 2, 2], |_| 5.0);
        assert!(pool_to_grid(&x, 2).unwrap().data().data().iter().all(|&v| v == 5.0));
        let x = map(&[1, 4, 4], |k| k as f64);
        assert_eq!(pool_to_grid(&x, 2).unwrap().data().data(), &[2.5, 4.5, 10.5, 12.5]);
    }

    #[test]
    fn pooling_non_divisible_uses_floor_partition() {
        // H = 5, M = 2: rows [0, 2) and [2, 5).
        let x = map(&[1, 5, 2], |k| (k / 2) as f64);
        let g = pool_to_grid(&x, 2).unwrap();
        assert_eq!(g.data().data(), &[0.5, 0.5, 3.0, 3.0]);
    }

    #[test]
    fn pooling_rejects_bad_grid_sizes() {
        let x = map(&[2, 4, 3], |k| k as f64);
        assert_eq!(pool_to_grid(&x, 1).unwrap_err(), Error::GridTooSmall(1));
        assert!(matches!(pool_to_grid(&x, 4), Err(Error::GridTooLarge { .. })));
    }

    #[test]
    fn feature_map_rejects_non_finite() {
        let t = Tensor::new(&[1, 1, 2], vec![1.0, f64::NAN]).unwrap();
        assert!(StageFeatureMap::new(t, 1, MapKind::StageInput).is_err());
    }

    #[test]
    fn reversal_shuffle() {
        let g = PooledGrid::new(Tensor::new(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap()).unwrap();
        let p = Permutation::from_forward(vec![3, 2, 1, 0]).unwrap();
        assert_eq!(shuffle_grid(&g, &p).unwrap().data().data(), &[4.0, 3.0, 2.0, 1.0]);
        assert_eq!(shuffle_grid(&g, &Permutation::identity(4)).unwrap(), g);
        assert!(shuffle_grid(&g, &Permutation::identity(9)).is_err());
    }

    #[test]
    fn permutations_are_reproducible_per_seed() {
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (
                sample_permutation(3, &mut rng).unwrap(),
                sample_permutation(3, &mut rng).unwrap(),
            )
        };
        let (a, b) = draw(42);
        assert_eq!(draw(42), (a.clone(), b.clone()));
        assert_ne!(a, b);
        assert!(a.compose(&a.inverse()).unwrap().is_identity());
    }

    #[test]
    fn permutation_rejects_non_bijections() {
        assert!(Permutation::from_forward(vec![0, 0, 1]).is_err());
        assert!(Permutation::from_forward(vec![0, 3, 1]).is_err());
    }

    #[test]
    fn sampled_permutations_cover_all_arrangements() {
        // 4! = 24 arrangements at M = 2; a uniform sampler hits each roughly 1/24 of the time.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut counts = std::collections::BTreeMap::new();
        for _ in 0..24_000 {
            *counts.entry(sample_permutation(2, &mut rng).unwrap().forward().to_vec()).or_insert(0) += 1;
        }
        assert_eq!(counts.len(), 24);
        assert!(counts.values().all(|&c| (800..1200).contains(&c)), "{counts:?}");
    }

    #[test]
    fn grid_adjacency_geometry() {
        let a = grid_adjacency(3).unwrap();
        assert_eq!(a.neighbors(4), vec![1, 3, 5, 7]);
        assert_eq!(a.neighbors(0), vec![1, 3]);
        let mut degrees: Vec<usize> = (0..9).map(|p| a.degree(p)).collect();
        degrees.sort();
        assert_eq!(degrees, vec![2, 2, 2, 2, 3, 3, 3, 3, 4]);
        assert_eq!(a.matrix().data().iter().filter(|&&v| v != 0.0).count(), 24);
        let a2 = grid_adjacency(2).unwrap();
        assert!((0..4).all(|p| a2.degree(p) == 2));
        assert!(grid_adjacency(1).is_err());
    }

    fn connected(a: &Adjacency) -> bool {
        let mut seen = vec![false; a.nodes()];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(p) = stack.pop() {
            for q in a.neighbors(p) {
                if !seen[q] {
                    seen[q] = true;
                    stack.push(q);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }

    #[test]
    fn grid_structure_invariants() {
        for m in 2..=6 {
            let a = grid_adjacency(m).unwrap();
            assert_eq!(a.edge_count(), 2 * m * (m - 1));
            assert_eq!(a.matrix(), &a.matrix().transpose());
            assert!((0..a.nodes()).all(|p| !a.is_edge(p, p)));
            assert!(connected(&a));
        }
    }

    #[test]
    fn normalized_adjacency_closed_form() {
        let a = grid_adjacency(3).unwrap();
        let n = normalize_adjacency(a.matrix()).unwrap();
        assert_eq!(n.get(&[0, 1]), 1.0 / 6f64.sqrt());
        let n2 = normalize_adjacency(grid_adjacency(2).unwrap().matrix()).unwrap();
        assert!(n2.data().iter().all(|&v| v == 0.0 || v == 0.5));
        let lonely = Tensor::new(&[2, 2], vec![0.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(normalize_adjacency(&lonely).unwrap_err(), Error::ZeroDegree(0));
    }

    #[test]
    fn normalized_grid_spectral_radius_at_most_one() {
        for m in 2..=5 {
            let n = normalize_adjacency(grid_adjacency(m).unwrap().matrix()).unwrap();
            // Power iteration on Â² bounds the largest |eigenvalue| of the symmetric Â.
            let sq = n.matmul(&n).unwrap();
            let size = m * m;
            let mut v = Tensor::from_fn(&[size, 1], |k| 1.0 + k as f64 * 0.1);
            let mut rho = 0.0;
            for _ in 0..500 {
                let w = sq.matmul(&v).unwrap();
                let norm = libm::sqrt(w.data().iter().map(|x| x * x).sum());
                rho = norm / libm::sqrt(v.data().iter().map(|x| x * x).sum());
                v = w.scale(1.0 / norm);
            }
            assert!(libm::sqrt(rho) <= 1.0 + 1e-9, "m = {m}: {rho}");
        }
    }

    #[test]
    fn normalized_adjacency_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let n = rng.gen_range(2..7);
            let mut a = Tensor::zeros(&[n, n]);
            for i in 0..n {
                a.set(&[i, (i + 1) % n], 1.0);
                a.set(&[(i + 1) % n, i], 1.0);
                for j in 0..i {
                    if rng.gen_bool(0.4) {
                        a.set(&[i, j], 1.0);
                        a.set(&[j, i], 1.0);
                    }
                }
            }
            if n == 2 {
                a.set(&[0, 1], 1.0);
                a.set(&[1, 0], 1.0);
            }
            let d_inv_sqrt = Tensor::from_fn(&[n, n], |k| {
                if k / n == k % n {
                    let deg: f64 = (0..n).map(|j| a.get(&[k / n, j])).sum();
                    1.0 / deg.sqrt()
                } else {
                    0.0
                }
            });
            let want = d_inv_sqrt.matmul(&a).unwrap().matmul(&d_inv_sqrt).unwrap();
            let got = normalize_adjacency(&a).unwrap();
            for (x, y) in got.data().iter().zip(want.data()) {
                assert!((x - y).abs() < 1e-12);
            }
            assert_eq!(got, got.transpose());
        }
    }

    #[test]
    fn build_graph_native_identity() {
        let x = map(&[1, 3, 3], |k| k as f64 * 1.5);
        let g = build_shuffled_graph(&x, 3, &Permutation::identity(9)).unwrap();
        assert_eq!(g.attributes().data(), x.data().data());
        assert_eq!(g.adjacency(), &grid_adjacency(3).unwrap());
    }

    #[test]
    fn build_graph_replays_pipeline_by_hand() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = map(&[2, 4, 4], |_| rng.gen_range(-1.0..1.0));
        let mut prng = ChaCha8Rng::seed_from_u64(0);
        let p = sample_permutation(2, &mut prng).unwrap();
        let g = build_shuffled_graph(&x, 2, &p).unwrap();
        for c in 0..2 {
            let mut pooled = [0.0; 4];
            for (cell, slot) in pooled.iter_mut().enumerate() {
                let (bi, bj) = (cell / 2, cell % 2);
                let mut acc = 0.0;
                for r in 2 * bi..2 * bi + 2 {
                    for col in 2 * bj..2 * bj + 2 {
                        acc += x.data().get(&[c, r, col]);
                    }
                }
                *slot = acc / 4.0;
            }
            for q in 0..4 {
                let want = pooled[p.forward()[q]];
                assert!((g.attributes().get(&[c, q]) - want).abs() < 1e-15);
            }
        }
    }

    fn grid_strategy() -> impl Strategy<Value = (PooledGrid, Permutation, Permutation)> {
        (2usize..=5).prop_flat_map(|m| {
            let n = m * m;
            (
                proptest::collection::vec(-10.0f64..10.0, 3 * n),
                Just((0..n).collect::<Vec<usize>>()).prop_shuffle(),
                Just((0..n).collect::<Vec<usize>>()).prop_shuffle(),
            )
                .prop_map(move |(data, p1, p2)| {
                    (
                        PooledGrid::new(Tensor::new(&[3, m, m], data).unwrap()).unwrap(),
                        Permutation::from_forward(p1).unwrap(),
                        Permutation::from_forward(p2).unwrap(),
                    )
                })
        })
    }

    proptest! {
        #[test]
        fn shuffle_is_a_group_action((g, p1, p2) in grid_strategy()) {
            let composed = shuffle_grid(&g, &p1.compose(&p2).unwrap()).unwrap();
            let stepwise = shuffle_grid(&shuffle_grid(&g, &p2).unwrap(), &p1).unwrap();
            prop_assert_eq!(composed, stepwise);
            let back = shuffle_grid(&shuffle_grid(&g, &p1).unwrap(), &p1.inverse()).unwrap();
            prop_assert_eq!(back, g);
        }

        #[test]
        fn pooling_commutes_with_scaling(alpha in -3.0f64..3.0, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = map(&[2, 7, 5], |_| rng.gen_range(-1.0..1.0));
            let scaled = StageFeatureMap::new(x.data().scale(alpha), 1, MapKind::StageInput).unwrap();
            let a = pool_to_grid(&scaled, 3).unwrap();
            let b = pool_to_grid(&x, 3).unwrap().data().scale(alpha);
            for (u, v) in a.data().data().iter().zip(b.data()) {
                prop_assert!((u - v).abs() < 1e-12);
            }
        }

        #[test]
        fn adjacency_is_independent_of_permutation((g, p1, _p2) in grid_strategy()) {
            let m = g.side();
            let x = StageFeatureMap::new(g.data().clone(), 2, MapKind::StageInput).unwrap();
            let shuffled = build_shuffled_graph(&x, m, &p1).unwrap();
            let plain = build_shuffled_graph(&x, m, &Permutation::identity(m * m)).unwrap();
            prop_assert_eq!(shuffled.adjacency(), plain.adjacency());
        }
    }
}
