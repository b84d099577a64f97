//! Global descriptor heads: soft-assignment VLAD with grouped fully
//! connected compression, and the max-pool head of the light network.

use std::io::{Read, Write};

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{glorot, Affine, BatchNorm, Forward};
use crate::tensor::io::{expect_magic, read_f32s, read_u32};
use crate::tensor::{Parameter, ReduceKind, Scalar, Tensor, Var};

/// Cluster centers plus the affine score producing soft assignments.
#[derive(Clone, Debug, PartialEq)]
pub struct VladParams<T> {
    /// `K×d`
    pub centers: Parameter<T>,
    /// `d×K` weight and `K` bias.
    pub assign: Affine<T>,
}

impl<T: Scalar> VladParams<T> {
    pub fn new<R: Rng>(name: &str, d: usize, clusters: usize, rng: &mut R) -> Self {
        VladParams {
            centers: Parameter::new(format!("{name}.centers"), glorot(rng, d, clusters, &[clusters, d])),
            assign: Affine::new(&format!("{name}.assign"), d, clusters, rng),
        }
    }

    pub fn clusters(&self) -> usize {
        self.centers.value.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.centers.value.shape()[1]
    }

    pub fn params(&self) -> Vec<&Parameter<T>> {
        let mut v = vec![&self.centers];
        v.extend(self.assign.params());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut v = vec![&mut self.centers];
        v.extend(self.assign.params_mut());
        v
    }
}

/// Grouped fully connected layer: the flattened input is cut into `G`
/// contiguous segments, one shared `(K·d/G)×O` map is applied to each, and
/// the outputs are summed. Each group keeps its own bias.
#[derive(Clone, Debug, PartialEq)]
pub struct GfcParams<T> {
    pub weight: Parameter<T>,
    pub biases: Vec<Parameter<T>>,
}

impl<T: Scalar> GfcParams<T> {
    pub fn new<R: Rng>(name: &str, input_len: usize, out: usize, groups: usize, rng: &mut R) -> Result<Self> {
        let seg = group_segment(input_len, groups)?;
        Ok(GfcParams {
            weight: Parameter::new(format!("{name}.weight"), glorot(rng, seg, out, &[seg, out])),
            biases: (0..groups)
                .map(|g| Parameter::new(format!("{name}.bias{g}"), Tensor::zeros(&[out])))
                .collect(),
        })
    }

    pub fn group_count(&self) -> usize {
        self.biases.len()
    }

    pub fn segment_len(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn input_len(&self) -> usize {
        self.segment_len() * self.group_count()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn params(&self) -> Vec<&Parameter<T>> {
        let mut v = vec![&self.weight];
        v.extend(self.biases.iter());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut v = vec![&mut self.weight];
        v.extend(self.biases.iter_mut());
        v
    }
}

fn group_segment(input_len: usize, groups: usize) -> Result<usize> {
    if groups == 0 || input_len % groups != 0 {
        return Err(Error::invalid(format!(
            "group count {groups} must divide the flattened VLAD length {input_len}"
        )));
    }
    Ok(input_len / groups)
}

/// Context gating `x ⊙ σ(bn(x·W))` on the compressed descriptor.
#[derive(Clone, Debug, PartialEq)]
pub struct GatingParams<T> {
    pub weight: Parameter<T>,
    pub bn: BatchNorm<T>,
}

impl<T: Scalar> GatingParams<T> {
    pub fn new<R: Rng>(name: &str, dim: usize, rng: &mut R) -> Self {
        GatingParams {
            weight: Parameter::new(format!("{name}.weight"), glorot(rng, dim, dim, &[dim, dim])),
            bn: BatchNorm::new(&format!("{name}.bn"), dim),
        }
    }

    pub fn params(&self) -> Vec<&Parameter<T>> {
        let mut v = vec![&self.weight];
        v.extend(self.bn.params());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut v = vec![&mut self.weight];
        v.extend(self.bn.params_mut());
        v
    }
}

/// Everything the grouped VLAD head learns, plus its normalization toggles.
#[derive(Clone, Debug, PartialEq)]
pub struct GVladParams<T> {
    pub vlad: VladParams<T>,
    pub gfc: GfcParams<T>,
    pub out_bn: Option<BatchNorm<T>>,
    pub gating: Option<GatingParams<T>>,
    pub intra_norm: bool,
    pub final_norm: bool,
}

impl<T: Scalar> GVladParams<T> {
    pub fn params(&self) -> Vec<&Parameter<T>> {
        let mut v = self.vlad.params();
        v.extend(self.gfc.params());
        if let Some(bn) = &self.out_bn {
            v.extend(bn.params());
        }
        if let Some(g) = &self.gating {
            v.extend(g.params());
        }
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut v = self.vlad.params_mut();
        v.extend(self.gfc.params_mut());
        if let Some(bn) = &mut self.out_bn {
            v.extend(bn.params_mut());
        }
        if let Some(g) = &mut self.gating {
            v.extend(g.params_mut());
        }
        v
    }

    pub fn batch_norms_mut(&mut self) -> Vec<&mut BatchNorm<T>> {
        let mut v = Vec::new();
        if let Some(bn) = &mut self.out_bn {
            v.push(bn);
        }
        if let Some(g) = &mut self.gating {
            v.push(&mut g.bn);
        }
        v
    }
}

/// Row-wise softmax over clusters of `features·W + b` (`n×K`).
pub fn soft_assign<T: Scalar>(fw: &mut Forward<'_, T>, features: Var, params: &VladParams<T>) -> Result<Var> {
    let scores = params.assign.forward(fw, features)?;
    fw.tape.softmax(scores, 1)
}

/// `V_k = Σ_i a_ik (f_i − c_k)` computed as `AᵀF − diag(Σ_i a_ik)·C`.
pub fn vlad_residuals<T: Scalar>(fw: &mut Forward<'_, T>, features: Var, assign: Var, centers: Var) -> Result<Var> {
    let at = fw.tape.transpose(assign)?;
    let weighted = fw.tape.matmul(at, features)?;
    let mass = fw.tape.reduce(assign, 0, ReduceKind::Sum)?;
    let shifted = fw.tape.row_scale(centers, mass)?;
    fw.tape.sub(weighted, shifted)
}

/// VLAD matrix (`K×d`) of one cloud's `n×d` features.
pub fn vlad_aggregate<T: Scalar>(fw: &mut Forward<'_, T>, features: Var, params: &VladParams<T>) -> Result<Var> {
    let d = fw.tape.shape(features)[1];
    if d != params.dim() {
        return Err(Error::shape("vlad_aggregate", fw.tape.shape(features), params.centers.value.shape()));
    }
    let a = soft_assign(fw, features, params)?;
    let c = fw.bind(&params.centers);
    vlad_residuals(fw, features, a, c)
}

/// Applies the grouped FC to each row of `flat` (`B×(K·d)`).
pub fn grouped_fc<T: Scalar>(fw: &mut Forward<'_, T>, flat: Var, params: &GfcParams<T>) -> Result<Var> {
    let shape = fw.tape.shape(flat).to_vec();
    if shape.len() != 2 || shape[1] != params.input_len() {
        return Err(Error::shape("grouped_fc", &shape, &[params.input_len(), params.out_dim()]));
    }
    let w = fw.bind(&params.weight);
    let len = params.segment_len();
    let mut total: Option<Var> = None;
    for (g, bias) in params.biases.iter().enumerate() {
        let seg = fw.tape.slice(flat, 1, g * len, len)?;
        let b = fw.bind(bias);
        let out = fw.tape.linear(seg, w, b)?;
        total = Some(match total {
            None => out,
            Some(t) => fw.tape.add(t, out)?,
        });
    }
    Ok(total.expect("at least one group"))
}

/// Learnable elements of a grouped FC layer: `K·d·O/G` weights plus `G·O`
/// biases.
pub fn gfc_param_count(clusters: u64, dim: u64, out: u64, groups: u64) -> Result<u64> {
    let input = clusters * dim;
    group_segment(input as usize, groups as usize)?;
    Ok(input * out / groups + groups * out)
}

/// Grouped VLAD over a batch: `segments[b]` is the `(start, len)` row range of
/// cloud `b` in `features`. Returns `B×O` descriptors.
pub fn g_vlad_forward<T: Scalar>(
    fw: &mut Forward<'_, T>,
    features: Var,
    segments: &[(usize, usize)],
    params: &GVladParams<T>,
) -> Result<Var> {
    let (k, d) = (params.vlad.clusters(), params.vlad.dim());
    let mut flats = Vec::with_capacity(segments.len());
    for &(start, len) in segments {
        let f = fw.tape.slice(features, 0, start, len)?;
        let v = vlad_aggregate(fw, f, &params.vlad)?;
        let v = if params.intra_norm {
            fw.tape.l2_normalize(v, 1)?
        } else {
            v
        };
        flats.push(fw.tape.reshape(v, &[1, k * d])?);
    }
    let flat = fw.tape.concat(&flats, 0)?;
    let mut x = grouped_fc(fw, flat, &params.gfc)?;
    if let Some(bn) = &params.out_bn {
        x = bn.forward(fw, x)?;
    }
    if let Some(g) = &params.gating {
        let w = fw.bind(&g.weight);
        let gates = fw.tape.matmul(x, w)?;
        let gates = g.bn.forward(fw, gates)?;
        let gates = fw.tape.sigmoid(gates);
        x = fw.tape.mul(x, gates)?;
    }
    if params.final_norm {
        x = fw.tape.l2_normalize(x, 1)?;
    }
    Ok(x)
}

/// Channel-wise max over each cloud's points, one affine map, L2 normalize.
pub fn maxpool_head<T: Scalar>(
    fw: &mut Forward<'_, T>,
    features: Var,
    segments: &[(usize, usize)],
    fc: &Affine<T>,
) -> Result<Var> {
    let mut pooled = Vec::with_capacity(segments.len());
    for &(start, len) in segments {
        let f = fw.tape.slice(features, 0, start, len)?;
        let m = fw.tape.reduce(f, 0, ReduceKind::Max)?;
        let c = fw.tape.shape(m)[0];
        pooled.push(fw.tape.reshape(m, &[1, c])?);
    }
    let pooled = fw.tape.concat(&pooled, 0)?;
    let x = fc.forward(fw, pooled)?;
    fw.tape.l2_normalize(x, 1)
}

/// Unit-norm global descriptor of one submap.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalDescriptor {
    pub values: Vec<f32>,
}

impl GlobalDescriptor {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt()
    }

    pub fn sq_dist(&self, other: &GlobalDescriptor) -> f64 {
        sq_dist(&self.values, &other.values)
    }

    /// Splits a `B×O` descriptor matrix into rows.
    pub fn from_rows<T: Scalar>(t: &Tensor<T>) -> Vec<GlobalDescriptor> {
        let rows = t.shape()[0];
        (0..rows)
            .map(|r| GlobalDescriptor {
                values: t.row(r).iter().map(|v| v.as_f64() as f32).collect(),
            })
            .collect()
    }
}

pub(crate) fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum()
}

pub const DESCRIPTOR_MAGIC: &[u8; 4] = b"EPCD";

/// Descriptors keyed by submap id, in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct DescriptorTable {
    pub dim: usize,
    pub ids: Vec<u64>,
    pub values: Vec<f32>,
}

impl DescriptorTable {
    pub fn new(dim: usize) -> Self {
        DescriptorTable {
            dim,
            ids: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn from_descriptors(ids: Vec<u64>, descriptors: &[GlobalDescriptor]) -> Result<Self> {
        let dim = descriptors.first().map_or(0, GlobalDescriptor::dim);
        if ids.len() != descriptors.len() {
            return Err(Error::shape("DescriptorTable", &[ids.len()], &[descriptors.len()]));
        }
        let mut t = DescriptorTable::new(dim);
        for (id, d) in ids.into_iter().zip(descriptors) {
            t.push(id, &d.values)?;
        }
        Ok(t)
    }

    pub fn push(&mut self, id: u64, values: &[f32]) -> Result<()> {
        if values.len() != self.dim {
            return Err(Error::shape("DescriptorTable::push", &[self.dim], &[values.len()]));
        }
        self.ids.push(id);
        self.values.extend_from_slice(values);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn get(&self, i: usize) -> &[f32] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    /// `EPCD`, u32 dim, u32 count, count×dim f32, then count u64 ids.
    pub fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(DESCRIPTOR_MAGIC)?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        w.write_all(&(self.ids.len() as u32).to_le_bytes())?;
        let mut buf = Vec::with_capacity(self.values.len() * 4 + self.ids.len() * 8);
        for v in &self.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for id in &self.ids {
            buf.extend_from_slice(&id.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read<R: Read>(r: &mut R) -> Result<Self> {
        expect_magic(r, DESCRIPTOR_MAGIC, "descriptor file")?;
        let dim = read_u32(r, "descriptor file")? as usize;
        let count = read_u32(r, "descriptor file")? as usize;
        let values = read_f32s(r, count * dim, "descriptor values")?;
        let mut bytes = Vec::with_capacity(count * 8);
        r.take((count * 8) as u64).read_to_end(&mut bytes)?;
        if bytes.len() != count * 8 {
            return Err(Error::Truncated {
                what: "descriptor ids",
                expected: count,
                found: bytes.len() / 8,
            });
        }
        let ids = bytes
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok(DescriptorTable { dim, ids, values })
    }
}
