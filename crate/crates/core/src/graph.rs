//! Spatial k-NN adjacency, proxy points, ProxyConv and the EdgeConv
//! reference layer, plus the analytic activation-memory model comparing them.

use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::nn::{Affine, BatchNorm, Forward, LEAKY_SLOPE};
use crate::tensor::{Parameter, ReduceKind, Scalar, Tape, Tensor, Var};

/// Raw submap: `n` points in metric coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    coords: Vec<[f32; 3]>,
}

impl PointCloud {
    pub fn new(coords: Vec<[f32; 3]>) -> Result<Self> {
        if coords.len() < 2 {
            return Err(Error::invalid(format!(
                "a point cloud needs at least 2 points, got {}",
                coords.len()
            )));
        }
        if let Some(i) = coords.iter().position(|p| p.iter().any(|c| !c.is_finite())) {
            return Err(Error::NumericFailure(format!("point {i} has a non-finite coordinate")));
        }
        Ok(PointCloud { coords })
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn points(&self) -> &[[f32; 3]] {
        &self.coords
    }

    /// `n×3` coordinate tensor.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_fn(&[self.coords.len(), 3], |i| T::lit(self.coords[i / 3][i % 3] as f64))
    }

    /// Applies `perm`: point `i` of the result is point `perm[i]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        PointCloud {
            coords: perm.iter().map(|&i| self.coords[i]).collect(),
        }
    }
}

fn sq_dist(a: &[f32; 3], b: &[f32; 3]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum()
}

/// `D_ij = ‖p_i − p_j‖²`.
pub fn pairwise_sq_dist(cloud: &PointCloud) -> Tensor<f64> {
    let p = cloud.points();
    let n = p.len();
    Tensor::from_fn(&[n, n], |idx| sq_dist(&p[idx / n], &p[idx % n]))
}

/// Dense binary k-NN graph; every row holds exactly `k` ones.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AdjacencyMatrix {
    n: usize,
    k: usize,
    include_self: bool,
    entries: Vec<u8>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AdjacencyOptions {
    /// Take the literal k smallest entries of each distance row, which always
    /// contain the point itself. Off by default: the diagonal is masked.
    pub include_self: bool,
}

impl AdjacencyMatrix {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn includes_self(&self) -> bool {
        self.include_self
    }

    pub fn row(&self, i: usize) -> &[u8] {
        &self.entries[i * self.n..(i + 1) * self.n]
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.entries[i * self.n + j] != 0
    }

    /// Neighbor indices of row `i` in increasing order.
    pub fn neighbors(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        self.row(i)
            .iter()
            .enumerate()
            .filter(|(_, &e)| e != 0)
            .map(|(j, _)| j)
    }

    pub fn storage_bytes(&self) -> usize {
        self.entries.len()
    }
}

pub fn build_adjacency(cloud: &PointCloud, k: usize) -> Result<AdjacencyMatrix> {
    build_adjacency_with(cloud, k, AdjacencyOptions::default())
}

/// Marks, per row, the `k` nearest points (ties broken by lower index).
pub fn build_adjacency_with(cloud: &PointCloud, k: usize, opts: AdjacencyOptions) -> Result<AdjacencyMatrix> {
    let n = cloud.len();
    let max_k = if opts.include_self { n } else { n - 1 };
    if k == 0 || k > max_k {
        return Err(Error::invalid(format!("k = {k} out of range [1, {max_k}] for n = {n}")));
    }
    let pts = cloud.points();
    let mut entries = vec![0u8; n * n];
    entries.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        let mut cand: Vec<(f64, usize)> = (0..n)
            .filter(|&j| opts.include_self || j != i)
            .map(|j| (sq_dist(&pts[i], &pts[j]), j))
            .collect();
        let by_key = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if k < cand.len() {
            cand.select_nth_unstable_by(k - 1, by_key);
        }
        for &(_, j) in &cand[..k] {
            row[j] = 1;
        }
    });
    Ok(AdjacencyMatrix {
        n,
        k,
        include_self: opts.include_self,
        entries,
    })
}

/// `Q = (1/k)·G×Y`: each row becomes the mean of its neighbors' features.
pub fn proxy_points<T: Scalar>(tape: &mut Tape<T>, adj: &Arc<AdjacencyMatrix>, features: Var) -> Result<Var> {
    tape.neighbor_mean(features, &[(0, Arc::clone(adj))])
}

/// Learnable state of one ProxyConv layer: `g` is affine + batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct ProxyConvParams<T> {
    pub affine: Affine<T>,
    pub bn: BatchNorm<T>,
}

impl<T: Scalar> ProxyConvParams<T> {
    pub fn new<R: Rng>(name: &str, d_in: usize, d_out: usize, rng: &mut R) -> Self {
        ProxyConvParams {
            affine: Affine::new(name, d_in, d_out, rng),
            bn: BatchNorm::new(&format!("{name}.bn"), d_out),
        }
    }

    pub fn d_in(&self) -> usize {
        self.affine.d_in()
    }

    pub fn d_out(&self) -> usize {
        self.affine.d_out()
    }

    pub fn params(&self) -> Vec<&Parameter<T>> {
        let mut v = self.affine.params();
        v.extend(self.bn.params());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut v = self.affine.params_mut();
        v.extend(self.bn.params_mut());
        v
    }
}

/// Row blocks of a batched feature map, one adjacency per cloud.
pub type AdjacencyBlocks = [(usize, Arc<AdjacencyMatrix>)];

/// `Y' = act(bn(g(Q − Y))) + Y`; the residual is dropped when the widths
/// differ.
pub fn proxy_conv<T: Scalar>(
    fw: &mut Forward<'_, T>,
    features: Var,
    blocks: &AdjacencyBlocks,
    params: &ProxyConvParams<T>,
    label: &str,
) -> Result<Var> {
    let d_in = fw.tape.shape(features)[1];
    if d_in != params.d_in() {
        return Err(Error::shape("proxy_conv", fw.tape.shape(features), &[params.d_in(), params.d_out()]));
    }
    fw.record(format!("{label}.input"), features);
    let q = fw.tape.neighbor_mean(features, blocks)?;
    fw.record(format!("{label}.proxy"), q);
    let a = fw.tape.sub(q, features)?;
    fw.record(format!("{label}.offset"), a);
    let z = params.affine.forward(fw, a)?;
    let z = params.bn.forward(fw, z)?;
    let f = fw.tape.leaky_relu(z, LEAKY_SLOPE);
    fw.record(format!("{label}.feature"), f);
    if params.d_in() == params.d_out() {
        let out = fw.tape.add(f, features)?;
        fw.record(format!("{label}.output"), out);
        Ok(out)
    } else {
        Ok(f)
    }
}

/// Runs a ProxyConv stack on one shared adjacency, returning every layer's
/// output. The adjacency itself is tallied once.
pub fn proxy_stack<T: Scalar>(
    fw: &mut Forward<'_, T>,
    input: Var,
    blocks: &AdjacencyBlocks,
    layers: &[ProxyConvParams<T>],
) -> Result<Vec<Var>> {
    let adjacency_elements: usize = blocks.iter().map(|(_, a)| a.storage_bytes()).sum();
    fw.record_elements("adjacency", adjacency_elements);
    let mut outputs = Vec::with_capacity(layers.len());
    let mut y = input;
    for (i, layer) in layers.iter().enumerate() {
        y = proxy_conv(fw, y, blocks, layer, &format!("proxy{i}"))?;
        outputs.push(y);
    }
    Ok(outputs)
}

/// `h` of the EdgeConv reference layer, acting on `[x_i, x_j − x_i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeConvParams<T> {
    pub affine: Affine<T>,
}

impl<T: Scalar> EdgeConvParams<T> {
    pub fn new<R: Rng>(name: &str, d_in: usize, d_out: usize, rng: &mut R) -> Self {
        EdgeConvParams {
            affine: Affine::new(name, 2 * d_in, d_out, rng),
        }
    }
}

/// k nearest rows of a 2-D feature matrix (self excluded, ties → lower index).
pub fn feature_knn<T: Scalar>(features: &Tensor<T>, k: usize) -> Result<Vec<Vec<usize>>> {
    let n = features.shape()[0];
    if k == 0 || k >= n {
        return Err(Error::invalid(format!("k = {k} out of range [1, {}] for n = {n}", n - 1)));
    }
    Ok((0..n)
        .map(|i| {
            let xi = features.row(i);
            let mut cand: Vec<(T, usize)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| {
                    let d = xi
                        .iter()
                        .zip(features.row(j))
                        .map(|(&a, &b)| (a - b) * (a - b))
                        .sum::<T>();
                    (d, j)
                })
                .collect();
            cand.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite").then(a.1.cmp(&b.1)));
            cand[..k].iter().map(|&(_, j)| j).collect()
        })
        .collect())
}

/// EdgeConv on a dynamic feature-space graph: `max_j ReLU(h(x_i, x_j − x_i))`.
pub fn edge_conv<T: Scalar>(
    fw: &mut Forward<'_, T>,
    features: Var,
    k: usize,
    params: &EdgeConvParams<T>,
    label: &str,
) -> Result<Var> {
    let shape = fw.tape.shape(features).to_vec();
    if shape.len() != 2 || 2 * shape[1] != params.affine.d_in() {
        return Err(Error::shape("edge_conv", &shape, params.affine.weight.value.shape()));
    }
    let n = shape[0];
    let nbrs = feature_knn(fw.tape.value(features), k)?;
    let centers: Vec<usize> = (0..n).flat_map(|i| std::iter::repeat_n(i, k)).collect();
    let neighbors: Vec<usize> = nbrs.into_iter().flatten().collect();
    fw.record(format!("{label}.input"), features);
    let xc = fw.tape.gather_rows(features, &centers)?;
    let xn = fw.tape.gather_rows(features, &neighbors)?;
    let diff = fw.tape.sub(xn, xc)?;
    fw.record(format!("{label}.neighbors"), diff);
    let cat = fw.tape.concat(&[xc, diff], 1)?;
    fw.record(format!("{label}.concat"), cat);
    let e = params.affine.forward(fw, cat)?;
    let e = fw.tape.relu(e);
    fw.record(format!("{label}.edges"), e);
    let d_out = params.affine.d_out();
    let e = fw.tape.reshape(e, &[n, k, d_out])?;
    let out = fw.tape.reduce(e, 1, ReduceKind::Max)?;
    fw.record(format!("{label}.output"), out);
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MemoryModelReport {
    /// `m·n·5d + n·n`
    pub proxy_elements: u64,
    /// `m·n·(2 + 4k)·d`
    pub edge_elements: u64,
    pub ratio: f64,
}

/// Activation-memory ratio of an `m`-layer ProxyConv stack to an `m`-layer
/// EdgeConv stack: `5/(2+4k) + n/(m·(2+4k)·d)`.
pub fn memory_model(n: u64, k: u64, d: u64, m: u64) -> Result<MemoryModelReport> {
    if n == 0 || k == 0 || d == 0 || m == 0 {
        return Err(Error::invalid("memory model arguments must be positive"));
    }
    let proxy_elements = m * n * 5 * d + n * n;
    let edge_elements = m * n * (2 + 4 * k) * d;
    Ok(MemoryModelReport {
        proxy_elements,
        edge_elements,
        ratio: proxy_elements as f64 / edge_elements as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Mode;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cloud(pts: &[[f32; 3]]) -> PointCloud {
        PointCloud::new(pts.to_vec()).unwrap()
    }

    #[test]
    fn two_point_distances() {
        let d = pairwise_sq_dist(&cloud(&[[0., 0., 0.], [1., 0., 0.]]));
        assert_eq!(d.data(), &[0., 1., 1., 0.]);
    }

    #[test]
    fn collinear_neighbors() {
        let adj = build_adjacency(&cloud(&[[0., 0., 0.], [1., 0., 0.], [3., 0., 0.]]), 1).unwrap();
        let nb: Vec<Vec<usize>> = (0..3).map(|i| adj.neighbors(i).collect()).collect();
        assert_eq!(nb, vec![vec![1], vec![0], vec![1]]);
    }

    #[test]
    fn ties_go_to_lower_index() {
        // point 0 is equidistant from 1 and 2
        let adj = build_adjacency(&cloud(&[[0., 0., 0.], [1., 0., 0.], [-1., 0., 0.]]), 1).unwrap();
        assert_eq!(adj.neighbors(0).collect::<Vec<_>>(), vec![1]);
    }

    #[test]
    fn k_out_of_range() {
        let c = cloud(&[[0., 0., 0.], [1., 0., 0.], [3., 0., 0.]]);
        assert!(build_adjacency(&c, 0).is_err());
        assert!(build_adjacency(&c, 3).is_err());
        let lit = build_adjacency_with(&c, 3, AdjacencyOptions { include_self: true }).unwrap();
        assert!((0..3).all(|i| lit.get(i, i)));
    }

    #[test]
    fn self_inclusion_flag() {
        let c = cloud(&[[0., 0., 0.], [1., 0., 0.], [3., 0., 0.]]);
        let lit = build_adjacency_with(&c, 1, AdjacencyOptions { include_self: true }).unwrap();
        assert!((0..3).all(|i| lit.neighbors(i).eq([i])));
        let masked = build_adjacency(&c, 1).unwrap();
        assert!((0..3).all(|i| !masked.get(i, i)));
    }

    #[test]
    fn rejects_degenerate_clouds() {
        assert!(PointCloud::new(vec![[0.0; 3]]).is_err());
        assert!(PointCloud::new(vec![[0.0; 3], [f32::NAN, 0.0, 0.0]]).is_err());
    }

    #[test]
    fn proxy_row_is_two_term_mean() {
        // row 0 neighbors {1, 2} with k = 2
        let c = cloud(&[[0., 0., 0.], [1., 0., 0.], [0., 1., 0.]]);
        let adj = Arc::new(build_adjacency(&c, 2).unwrap());
        let mut tape = Tape::new();
        let y = tape.input(Tensor::<f64>::from_rows(&[vec![1., 2.], vec![3., 4.], vec![5., 8.]]).unwrap());
        let q = proxy_points(&mut tape, &adj, y).unwrap();
        assert_eq!(tape.value(q).row(0), &[4., 6.]);
    }

    #[test]
    fn constant_features_give_constant_proxies() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<[f32; 3]> = (0..10).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
        let adj = Arc::new(build_adjacency(&cloud(&pts), 4).unwrap());
        let mut tape = Tape::new();
        let y = tape.input(Tensor::<f64>::filled(&[10, 3], 0.7));
        let q = proxy_points(&mut tape, &adj, y).unwrap();
        assert!(tape.value(q).data().iter().all(|&v| (v - 0.7).abs() < 1e-15));
    }

    #[test]
    fn zero_affine_passes_input_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts: Vec<[f32; 3]> = (0..12).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
        let adj = Arc::new(build_adjacency(&cloud(&pts), 3).unwrap());
        let mut params = ProxyConvParams::<f64>::new("pc", 4, 4, &mut rng);
        params.affine = Affine::zeros("pc", 4, 4);
        let mut tape = Tape::new();
        let mut fw = Forward::new(&mut tape, Mode::Train);
        let x = fw.tape.input(Tensor::from_fn(&[12, 4], |i| (i as f64).sin()));
        let y = proxy_conv(&mut fw, x, &[(0, adj)], &params, "pc").unwrap();
        assert_eq!(fw.tape.value(y).data(), fw.tape.value(x).data());
    }

    #[test]
    fn coincident_points_have_zero_offsets() {
        let adj = Arc::new(build_adjacency(&cloud(&[[2.0, 1.0, 0.5]; 6]), 3).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = ProxyConvParams::<f64>::new("pc", 3, 8, &mut rng);
        let mut tape = Tape::new();
        let mut fw = Forward::new(&mut tape, Mode::Train).instrumented();
        let x = fw.tape.input(cloud(&[[2.0, 1.0, 0.5]; 6]).to_tensor());
        let y = proxy_conv(&mut fw, x, &[(0, adj)], &params, "pc").unwrap();
        assert_eq!(fw.tape.shape(y), &[6, 8]);
        let (_, _, tally) = fw.into_parts();
        assert!(tally.unwrap().entries.iter().all(|(n, _)| n != "pc.output"));
        // the offset Q − Y is the zero vector for every point
        let q = tape.neighbor_mean(x, &[(0, Arc::new(build_adjacency(&cloud(&[[2.0, 1.0, 0.5]; 6]), 3).unwrap()))]).unwrap();
        let offsets = tape.sub(q, x).unwrap();
        assert!(tape.value(offsets).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn first_layer_widens_without_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pts: Vec<[f32; 3]> = (0..16).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
        let c = cloud(&pts);
        let adj = Arc::new(build_adjacency(&c, 4).unwrap());
        let params = ProxyConvParams::<f32>::new("pc", 3, 64, &mut rng);
        let mut tape = Tape::new();
        let mut fw = Forward::new(&mut tape, Mode::Train);
        let x = fw.tape.input(c.to_tensor());
        let y = proxy_conv(&mut fw, x, &[(0, adj)], &params, "pc").unwrap();
        assert_eq!(fw.tape.shape(y), &[16, 64]);
    }

    #[test]
    fn edge_conv_with_duplicates_uses_zero_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = EdgeConvParams::<f64>::new("ec", 2, 3, &mut rng);
        let feats = Tensor::from_rows(&[vec![0.5, -1.0], vec![0.5, -1.0], vec![4.0, 4.0], vec![4.0, 4.0]]).unwrap();
        let mut tape = Tape::new();
        let mut fw = Forward::new(&mut tape, Mode::Train);
        let x = fw.tape.input(feats.clone());
        let y = edge_conv(&mut fw, x, 1, &params, "ec").unwrap();
        let w = params.affine.weight.value.data();
        for i in 0..4 {
            for c in 0..3 {
                let pre: f64 = (0..2).map(|j| feats.row(i)[j] * w[j * 3 + c]).sum();
                assert!((tape.value(y).row(i)[c] - pre.max(0.0)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn memory_model_values() {
        let r = memory_model(4096, 20, 64, 4).unwrap();
        assert!((r.ratio - (5.0 / 82.0 + 4096.0 / 20992.0)).abs() < 1e-12);
        assert!((r.ratio - 0.2561).abs() < 1e-4);
        let small = memory_model(128, 8, 16, 2).unwrap();
        assert!((small.ratio - 0.264_705_882).abs() < 1e-8);
        let big_m = memory_model(4096, 20, 64, 1 << 30).unwrap();
        assert!((big_m.ratio - 5.0 / 82.0).abs() < 1e-6);
        assert!(memory_model(0, 1, 1, 1).is_err());
    }
}
