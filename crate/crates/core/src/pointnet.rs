//! PointNet encoder: a shared per-point MLP followed by a max pool.
//!
//! Layer order: for every layer but the last, `gelu(x·W + b)`; the last
//! layer is affine only. The pooled descriptor is the columnwise maximum
//! of the per-point features.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::params::{Bound, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_DIMS: [usize; 4] = [3, 32, 64, 64];

#[derive(Debug, Clone, PartialEq)]
pub struct PointNetParams {
    pub dims: Vec<usize>,
    pub layers: Vec<Linear>,
}

#[derive(Debug, Clone, Copy)]
pub struct PointFeatures {
    /// `M' × C`
    pub per_point: Var,
    /// `C`
    pub global: Var,
}

impl PointNetParams {
    pub fn new(store: &mut ParamStore, prefix: &str, dims: &[usize], rng: &mut impl Rng) -> Result<Self> {
        if dims.len() < 2 || dims[0] != 3 || dims.contains(&0) {
            return Err(Error::config(format!(
                "PointNet widths must start at 3 and have at least one layer, got {dims:?}"
            )));
        }
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{prefix}.layer{i}"), w[0], w[1], rng))
            .collect();
        Ok(Self {
            dims: dims.to_vec(),
            layers,
        })
    }

    pub fn out_dim(&self) -> usize {
        *self.dims.last().expect("validated non-empty")
    }

    pub fn encode(&self, tape: &mut Tape, p: &Bound, cloud: Var) -> Result<PointFeatures> {
        let per_point = self.per_point(tape, p, cloud)?;
        let global = tape.reduce_max(per_point)?;
        Ok(PointFeatures { per_point, global })
    }

    fn per_point(&self, tape: &mut Tape, p: &Bound, cloud: Var) -> Result<Var> {
        let shape = tape.value(cloud).shape().to_vec();
        match shape[..] {
            [0, 3] => return Err(Error::EmptyInput("pointnet")),
            [_, 3] => {}
            _ => return Err(Error::shape("pointnet", &shape, &[0, 3])),
        }
        let mut x = cloud;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(tape, p, x)?;
            if i < last {
                x = tape.gelu(x);
            }
        }
        Ok(x)
    }

    /// Encodes `groups` equal-size clouds stacked by rows. The pooled
    /// descriptors come back as a `groups × C` matrix.
    pub fn encode_batch(&self, tape: &mut Tape, p: &Bound, clouds: Var, groups: usize) -> Result<PointFeatures> {
        let rows = tape.value(clouds).shape()[0];
        if groups == 0 || !rows.is_multiple_of(groups) {
            return Err(Error::shape("pointnet", &[rows], &[groups]));
        }
        let m = rows / groups;
        let per_point = self.per_point(tape, p, clouds)?;
        let flat = if groups == 1 {
            tape.reduce_max(per_point)?
        } else {
            let mut pooled = Vec::with_capacity(groups);
            for g in 0..groups {
                let part = tape.rows(per_point, g * m, m)?;
                pooled.push(tape.reduce_max(part)?);
            }
            tape.concat(&pooled, 0)?
        };
        let global = tape.reshape(flat, &[groups, self.out_dim()])?;
        Ok(PointFeatures { per_point, global })
    }

    /// Forward pass outside any training graph.
    pub fn encode_values(&self, store: &ParamStore, cloud: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let p = store.bind_frozen(&mut tape);
        let c = tape.constant(cloud.clone());
        let f = self.encode(&mut tape, &p, c)?;
        Ok((tape.value(f.per_point).clone(), tape.value(f.global).clone()))
    }
}
