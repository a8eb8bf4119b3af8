//! Parameter storage and the few layer types the models need.
//!
//! Parameters live in a name-ordered map of candle [`Var`]s. Initialization
//! draws from a seeded ChaCha stream in construction order, and checkpoints are
//! a flat little-endian f32 blob in name order, so both are reproducible
//! byte-for-byte.

use std::collections::BTreeMap;

use candle_core::{CpuStorage, CustomOp1, DType, Device, Layout, Shape, Tensor, Var, D};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SofaError};
use crate::hash::sha256_hex;
use crate::io::{f32_from_le_bytes, f32_to_le_bytes};

pub fn device() -> Device {
    Device::Cpu
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset in f32 elements into the blob.
    pub offset: usize,
}

#[derive(Clone)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        Self {
            vars: BTreeMap::new(),
            dtype,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn add(&mut self, name: &str, shape: &[usize], values: Vec<f64>) -> Result<Tensor> {
        if self.vars.contains_key(name) {
            return Err(SofaError::InvalidValue(format!(
                "duplicate parameter {name}"
            )));
        }
        let t = Tensor::from_vec(values, shape, &device())?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(out)
    }

    pub fn get(&self, name: &str) -> Result<&Var> {
        self.vars
            .get(name)
            .ok_or_else(|| SofaError::InvalidValue(format!("unknown parameter {name}")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(|s| s.as_str())
    }

    pub fn vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    pub fn num_params(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Flat f32 blob plus the index describing it.
    pub fn to_blob(&self) -> Result<(Vec<u8>, Vec<TensorEntry>)> {
        let mut values = Vec::with_capacity(self.num_params());
        let mut index = Vec::with_capacity(self.vars.len());
        for (name, var) in &self.vars {
            index.push(TensorEntry {
                name: name.clone(),
                shape: var.dims().to_vec(),
                offset: values.len(),
            });
            values.extend(
                var.as_tensor()
                    .to_dtype(DType::F32)?
                    .flatten_all()?
                    .to_vec1::<f32>()?,
            );
        }
        Ok((f32_to_le_bytes(values), index))
    }

    pub fn hash(&self) -> Result<String> {
        let (blob, index) = self.to_blob()?;
        let mut bytes = serde_json::to_vec(&index)?;
        bytes.extend_from_slice(&blob);
        Ok(sha256_hex(&bytes))
    }

    /// Overwrites every parameter from a blob written by [`Self::to_blob`].
    pub fn load_blob(&self, blob: &[u8], index: &[TensorEntry]) -> Result<()> {
        let values = f32_from_le_bytes(blob)?;
        if index.len() != self.vars.len() {
            return Err(SofaError::InvalidValue(format!(
                "checkpoint has {} tensors, model expects {}",
                index.len(),
                self.vars.len()
            )));
        }
        for entry in index {
            let var = self.get(&entry.name)?;
            if var.dims() != entry.shape.as_slice() {
                return Err(SofaError::Shape(format!(
                    "{}: checkpoint {:?}, model {:?}",
                    entry.name,
                    entry.shape,
                    var.dims()
                )));
            }
            let n: usize = entry.shape.iter().product();
            let slice = values.get(entry.offset..entry.offset + n).ok_or_else(|| {
                SofaError::InvalidValue(format!("blob too short for {}", entry.name))
            })?;
            let t = Tensor::from_slice(slice, entry.shape.as_slice(), &device())?
                .to_dtype(self.dtype)?;
            var.set(&t)?;
        }
        Ok(())
    }

    /// Copies values from `other`, converting dtype.
    pub fn load_from(&self, other: &ParamStore) -> Result<()> {
        let (blob, index) = other.to_blob()?;
        self.load_blob(&blob, &index)
    }
}

/// Seeded initializer shared by all layers of one model.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(rng: ChaCha8Rng) -> Self {
        Self { rng }
    }

    pub fn uniform(&mut self, n: usize, bound: f64) -> Vec<f64> {
        (0..n)
            .map(|_| self.rng.random_range(-bound..=bound))
            .collect()
    }
}

/// Whether layer tensors are tracked for gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Frozen,
}

fn param(store: &ParamStore, name: &str, mode: Mode) -> Result<Tensor> {
    let t = store.get(name)?.as_tensor().clone();
    Ok(match mode {
        Mode::Train => t,
        Mode::Frozen => t.detach(),
    })
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    /// Registers a `k x k` convolution with He-uniform weights and the given
    /// constant bias.
    pub fn register(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        (c_in, c_out, k): (usize, usize, usize),
        bias: f64,
    ) -> Result<()> {
        let fan_in = (c_in * k * k) as f64;
        let w = init.uniform(c_out * c_in * k * k, (6.0 / fan_in).sqrt());
        store.add(&format!("{name}.weight"), &[c_out, c_in, k, k], w)?;
        store.add(&format!("{name}.bias"), &[c_out], vec![bias; c_out])?;
        Ok(())
    }

    /// Like [`Self::register`] with the weight bound multiplied by `gain` and
    /// a zero bias.
    pub fn register_scaled(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        (c_in, c_out, k): (usize, usize, usize),
        gain: f64,
    ) -> Result<()> {
        let fan_in = (c_in * k * k) as f64;
        let w = init.uniform(c_out * c_in * k * k, gain * (6.0 / fan_in).sqrt());
        store.add(&format!("{name}.weight"), &[c_out, c_in, k, k], w)?;
        store.add(&format!("{name}.bias"), &[c_out], vec![0.0; c_out])?;
        Ok(())
    }

    pub fn load(store: &ParamStore, name: &str, stride: usize, mode: Mode) -> Result<Self> {
        let weight = param(store, &format!("{name}.weight"), mode)?;
        let k = weight.dims()[2];
        Ok(Self {
            weight,
            bias: param(store, &format!("{name}.bias"), mode)?,
            stride,
            padding: k / 2,
        })
    }

    /// Zero-padded convolution as an unfold into columns followed by one
    /// matmul. Candle's native conv backward goes through a direct transposed
    /// convolution that is several times slower on CPU.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c_in, h, w) = x.dims4()?;
        let (c_out, wc_in, k, _) = self.weight.dims4()?;
        if wc_in != c_in {
            return Err(SofaError::Shape(format!(
                "conv expects {wc_in} input channels, got {c_in}"
            )));
        }
        let unfold = Unfold {
            k,
            stride: self.stride,
            pad: self.padding,
        };
        let (ho, wo) = unfold.out_hw(h, w);
        let cols = if k == 1 && self.stride == 1 {
            x.reshape((b, c_in, h * w))?
        } else {
            x.contiguous()?.apply_op1(unfold)?
        };
        let wm = self.weight.reshape((c_out, c_in * k * k))?;
        let y = wm.broadcast_matmul(&cols)?.reshape((b, c_out, ho, wo))?;
        Ok(y.broadcast_add(&self.bias.reshape((1, c_out, 1, 1))?)?)
    }
}

/// `[B, C, H, W] -> [B, C k k, Ho Wo]` with zero padding; rows are ordered
/// `(c, ky, kx)` to match a `[C_out, C, k, k]` weight.
#[derive(Clone, Copy, Debug)]
struct Unfold {
    k: usize,
    stride: usize,
    pad: usize,
}

impl Unfold {
    fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.k) / self.stride + 1,
            (w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    /// Visits every (column index, image index) pair that lies inside the image.
    fn for_each(
        &self,
        (b, c, h, w): (usize, usize, usize, usize),
        mut f: impl FnMut(usize, usize),
    ) {
        let (ho, wo) = self.out_hw(h, w);
        let (k, kk, l) = (self.k, self.k * self.k, ho * wo);
        for plane in 0..b * c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (plane * kk + ky * k + kx) * l;
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = (plane * h + iy as usize) * w;
                        for ox in 0..wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                f(row + oy * wo + ox, src + ix as usize);
                            }
                        }
                    }
                }
            }
        }
    }
}

fn contiguous_slice<'a, T>(v: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((a, b)) => Ok(&v[a..b]),
        None => candle_core::bail!("unfold expects a contiguous input"),
    }
}

impl CustomOp1 for Unfold {
    fn name(&self) -> &'static str {
        "unfold"
    }

    fn cpu_fwd(
        &self,
        storage: &CpuStorage,
        layout: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let dims = layout.shape().dims4()?;
        let (b, c, h, w) = dims;
        let (ho, wo) = self.out_hw(h, w);
        let n = b * c * self.k * self.k * ho * wo;
        let out = match storage {
            CpuStorage::F32(v) => {
                let x = contiguous_slice(v, layout)?;
                let mut out = vec![0f32; n];
                self.for_each(dims, |o, i| out[o] = x[i]);
                CpuStorage::F32(out)
            }
            CpuStorage::F64(v) => {
                let x = contiguous_slice(v, layout)?;
                let mut out = vec![0f64; n];
                self.for_each(dims, |o, i| out[o] = x[i]);
                CpuStorage::F64(out)
            }
            _ => candle_core::bail!("unfold supports f32 and f64"),
        };
        Ok((out, Shape::from((b, c * self.k * self.k, ho * wo))))
    }

    fn bwd(
        &self,
        arg: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<Option<Tensor>> {
        let fold = Fold {
            unfold: *self,
            dims: arg.dims4()?,
        };
        Ok(Some(grad.contiguous()?.apply_op1_no_bwd(&fold)?))
    }
}

/// Adjoint of [`Unfold`]: scatters columns back onto the image, summing
/// overlaps.
struct Fold {
    unfold: Unfold,
    dims: (usize, usize, usize, usize),
}

impl CustomOp1 for Fold {
    fn name(&self) -> &'static str {
        "fold"
    }

    fn cpu_fwd(
        &self,
        storage: &CpuStorage,
        layout: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, c, h, w) = self.dims;
        let n = b * c * h * w;
        let out = match storage {
            CpuStorage::F32(v) => {
                let g = contiguous_slice(v, layout)?;
                let mut out = vec![0f32; n];
                self.unfold.for_each(self.dims, |o, i| out[i] += g[o]);
                CpuStorage::F32(out)
            }
            CpuStorage::F64(v) => {
                let g = contiguous_slice(v, layout)?;
                let mut out = vec![0f64; n];
                self.unfold.for_each(self.dims, |o, i| out[i] += g[o]);
                CpuStorage::F64(out)
            }
            _ => candle_core::bail!("fold supports f32 and f64"),
        };
        Ok((out, Shape::from(self.dims)))
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn register(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        d_in: usize,
        d_out: usize,
        zero: bool,
    ) -> Result<()> {
        let w = if zero {
            vec![0.0; d_in * d_out]
        } else {
            init.uniform(d_in * d_out, (6.0 / d_in as f64).sqrt())
        };
        store.add(&format!("{name}.weight"), &[d_out, d_in], w)?;
        store.add(&format!("{name}.bias"), &[d_out], vec![0.0; d_out])?;
        Ok(())
    }

    pub fn load(store: &ParamStore, name: &str, mode: Mode) -> Result<Self> {
        Ok(Self {
            weight: param(store, &format!("{name}.weight"), mode)?,
            bias: param(store, &format!("{name}.bias"), mode)?,
        })
    }

    /// `x: [B, d_in] -> [B, d_out]`
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?)
    }
}

pub fn load_matrix(store: &ParamStore, name: &str, mode: Mode) -> Result<Tensor> {
    param(store, name, mode)
}

/// Softmax over the last dimension, shifted by the (untracked) row maximum.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let shifted = x.broadcast_sub(&x.max_keepdim(D::Minus1)?.detach())?;
    let e = shifted.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::sigmoid(x)?)
}

/// `log(1 + exp(x))` without overflow.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    let pos = x.relu()?;
    let tail = (x.abs()?.neg()?.exp()? + 1.0)?.log()?;
    Ok((pos + tail)?)
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn blob_round_trip_and_hash() {
        let mut store = ParamStore::new(DType::F32);
        let mut init = Init::new(ChaCha8Rng::seed_from_u64(1));
        Conv2d::register(&mut store, &mut init, "c", (2, 3, 3), 0.5).unwrap();
        Linear::register(&mut store, &mut init, "l", 4, 2, false).unwrap();
        let (blob, index) = store.to_blob().unwrap();

        let mut other = ParamStore::new(DType::F64);
        let mut init2 = Init::new(ChaCha8Rng::seed_from_u64(2));
        Conv2d::register(&mut other, &mut init2, "c", (2, 3, 3), 0.0).unwrap();
        Linear::register(&mut other, &mut init2, "l", 4, 2, false).unwrap();
        assert_ne!(store.hash().unwrap(), other.hash().unwrap());
        other.load_blob(&blob, &index).unwrap();
        assert_eq!(store.hash().unwrap(), other.hash().unwrap());
    }

    #[test]
    fn conv_matches_native_candle_conv() {
        let mut store = ParamStore::new(DType::F64);
        let mut init = Init::new(ChaCha8Rng::seed_from_u64(3));
        Conv2d::register(&mut store, &mut init, "a", (3, 5, 3), 0.25).unwrap();
        Conv2d::register(&mut store, &mut init, "b", (3, 2, 1), -0.5).unwrap();
        let x = Tensor::rand(-1f64, 1f64, (2, 3, 9, 8), &device()).unwrap();
        for (name, stride) in [("a", 1), ("a", 2), ("b", 1)] {
            let conv = Conv2d::load(&store, name, stride, Mode::Frozen).unwrap();
            let c_out = conv.weight.dims()[0];
            let native = x
                .conv2d(&conv.weight, conv.padding, stride, 1, 1)
                .unwrap()
                .broadcast_add(&conv.bias.reshape((1, c_out, 1, 1)).unwrap())
                .unwrap();
            let ours = conv.forward(&x).unwrap();
            assert_eq!(ours.dims(), native.dims());
            let diff = (ours - native)
                .unwrap()
                .abs()
                .unwrap()
                .flatten_all()
                .unwrap();
            assert!(
                scalar(&diff.max(0).unwrap()).unwrap() < 1e-12,
                "{name} stride {stride}"
            );
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::new(&[[1000.0f64, 999.0, -5.0], [0.0, 0.0, 0.0]], &device()).unwrap();
        let s = softmax_last(&x).unwrap().to_vec2::<f64>().unwrap();
        for row in s {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softplus_is_stable() {
        let x = Tensor::new(&[-800.0f64, -2.0, 0.0, 2.0, 800.0], &device()).unwrap();
        let v = softplus(&x).unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(v[0], 0.0);
        assert!((v[1] - 0.126_928_011_042_973).abs() < 1e-12);
        assert!((v[2] - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((v[3] - 2.126_928_011_042_973).abs() < 1e-12);
        assert_eq!(v[4], 800.0);
    }
}
