//! Parameter storage and the small set of layers the model is assembled from.
//!
//! Activations are kept in NHWC layout. Convolutions lower to a single GEMM
//! through a dedicated im2col op whose backward pass is the matching col2im
//! scatter, which keeps both directions on the fast matmul path.

use std::sync::Mutex;

use candle_core::{
    backend::BackendStorage, CpuStorage, CustomOp1, DType, Device, Layout, Shape, Tensor, Var, D,
};
use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};

/// Initialization scheme for a freshly created parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Const(f64),
    Uniform(f64),
    Normal(f64),
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` with fan-in taken from the first dim.
    FanIn,
    /// Orthogonal rows/columns for a 2-D matrix.
    Orthogonal,
    /// LSTM bias laid out as `[i | f | g | o]` with the forget slice set to 1.
    ForgetBias,
}

struct StoreInner {
    vars: IndexMap<String, Var>,
    rng: ChaCha8Rng,
}

/// Named, ordered collection of every learnable array in a model.
pub struct ParamStore {
    inner: Mutex<StoreInner>,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        Self {
            inner: Mutex::new(StoreInner {
                vars: IndexMap::new(),
                rng: ChaCha8Rng::seed_from_u64(seed),
            }),
            dtype,
            device: Device::Cpu,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn root(&self) -> VarBuilder<'_> {
        VarBuilder {
            store: self,
            prefix: String::new(),
            frozen: false,
        }
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.inner.lock().unwrap().vars.get(name).cloned()
    }

    pub fn names(&self) -> Vec<String> {
        self.inner.lock().unwrap().vars.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.inner.lock().unwrap().vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All `(name, var)` pairs in creation order.
    pub fn entries(&self) -> Vec<(String, Var)> {
        let inner = self.inner.lock().unwrap();
        inner
            .vars
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn vars_with_prefix(&self, prefix: &str) -> Vec<Var> {
        let inner = self.inner.lock().unwrap();
        inner
            .vars
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.clone())
            .collect()
    }

    pub fn num_scalars(&self, prefix: &str) -> usize {
        self.vars_with_prefix(prefix)
            .iter()
            .map(|v| v.elem_count())
            .sum()
    }

    /// Overwrites every parameter under `dst` with the value of the parameter
    /// sharing its suffix under `src`.
    pub fn copy_prefix(&self, src: &str, dst: &str) -> Result<()> {
        let inner = self.inner.lock().unwrap();
        for (name, var) in inner.vars.iter() {
            if let Some(suffix) = name.strip_prefix(dst) {
                let from = format!("{src}{suffix}");
                let source = inner
                    .vars
                    .get(&from)
                    .ok_or_else(|| Error::InvalidArgument(format!("no parameter {from}")))?;
                var.set(&source.as_tensor().copy()?)?;
            }
        }
        Ok(())
    }

    fn create(&self, name: String, shape: &[usize], init: Init) -> Result<Var> {
        let mut inner = self.inner.lock().unwrap();
        if let Some(v) = inner.vars.get(&name) {
            if v.dims() != shape {
                return Err(Error::shape(
                    "parameter",
                    format!("{shape:?}"),
                    format!("{:?}", v.dims()),
                ));
            }
            return Ok(v.clone());
        }
        let values = init_values(&mut inner.rng, shape, init);
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        inner.vars.insert(name, var.clone());
        Ok(var)
    }
}

fn init_values(rng: &mut ChaCha8Rng, shape: &[usize], init: Init) -> Vec<f64> {
    let n: usize = shape.iter().product();
    match init {
        Init::Zeros => vec![0.0; n],
        Init::Const(c) => vec![c; n],
        Init::Uniform(a) => {
            let d = Uniform::new_inclusive(-a, a).unwrap();
            (0..n).map(|_| d.sample(rng)).collect()
        }
        Init::Normal(std) => {
            let d = Normal::new(0.0, std).unwrap();
            (0..n).map(|_| d.sample(rng)).collect()
        }
        Init::FanIn => {
            let fan_in = shape.first().copied().unwrap_or(1).max(1) as f64;
            let a = 1.0 / fan_in.sqrt();
            let d = Uniform::new_inclusive(-a, a).unwrap();
            (0..n).map(|_| d.sample(rng)).collect()
        }
        Init::Orthogonal => {
            let (rows, cols) = match shape {
                [r, c] => (*r, *c),
                _ => (n, 1),
            };
            orthogonal(rng, rows, cols)
        }
        Init::ForgetBias => {
            let h = n / 4;
            (0..n)
                .map(|i| if (h..2 * h).contains(&i) { 1.0 } else { 0.0 })
                .collect()
        }
    }
}

fn orthogonal(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).unwrap();
    let (tall_r, tall_c) = if rows >= cols {
        (rows, cols)
    } else {
        (cols, rows)
    };
    let m = nalgebra::DMatrix::from_fn(tall_r, tall_c, |_, _| normal.sample(rng));
    let qr = m.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..tall_c {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    let q = if rows >= cols { q } else { q.transpose() };
    let mut out = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            out.push(q[(i, j)]);
        }
    }
    out
}

/// Hierarchical accessor used by modules to create or fetch their parameters.
#[derive(Clone)]
pub struct VarBuilder<'a> {
    store: &'a ParamStore,
    prefix: String,
    frozen: bool,
}

impl<'a> VarBuilder<'a> {
    pub fn pp(&self, name: &str) -> Self {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        Self {
            store: self.store,
            prefix,
            frozen: self.frozen,
        }
    }

    /// A view whose tensors are detached from the autograd graph. Gradients
    /// still flow through them to their inputs but never into the weights.
    pub fn frozen(&self) -> Self {
        Self {
            frozen: true,
            ..self.clone()
        }
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    pub fn device(&self) -> &Device {
        &self.store.device
    }

    pub fn get(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        let var = self.store.create(full, shape, init)?;
        Ok(if self.frozen {
            var.as_tensor().detach()
        } else {
            var.as_tensor().clone()
        })
    }
}

impl VarBuilder<'_> {
    /// A stored array that is not trained: it never enters the autograd
    /// graph, so optimizers skip it, but it is saved with the model.
    pub fn buffer(&self, name: &str, shape: &[usize], init: Init) -> Result<Var> {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        self.store.create(full, shape, init)
    }
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok((x.relu()? - (x.neg()?.relu()? * slope)?)?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::sigmoid(x)?)
}

/// Softmax over the last dimension.
pub fn softmax(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let s = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&s)?)
}

/// Row-wise `x / sqrt(|x|^2 + eps^2)`; zero rows stay zero with finite gradients.
pub fn unit_rows(x: &Tensor, eps: f64) -> Result<Tensor> {
    let norm = x
        .sqr()?
        .sum_keepdim(D::Minus1)?
        .affine(1.0, eps * eps)?
        .sqrt()?;
    Ok(x.broadcast_div(&norm)?)
}

/// Pixelwise feature normalization over channels: `x / sqrt(mean_c x^2 + eps)`.
pub fn pixel_norm(x: &Tensor) -> Result<Tensor> {
    let ms = x
        .sqr()?
        .mean_keepdim(D::Minus1)?
        .affine(1.0, 1e-8)?
        .sqrt()?;
    Ok(x.broadcast_div(&ms)?)
}

const SN_EPS: f64 = 1e-12;

/// Spectral normalization of a `(fan_in, out)` weight: `W / sigma(W)`, with
/// `sigma` from one power-iteration step started at the stored vector `u`.
/// The step is differentiated through, so the forward pass is a pure function
/// of `W` and `u`. `u` only moves on an explicit [`SpectralNorm::update`].
#[derive(Debug, Clone)]
pub struct SpectralNorm {
    u: Var,
}

impl SpectralNorm {
    pub fn new(vb: &VarBuilder, out: usize) -> Result<Self> {
        Ok(Self {
            u: vb.buffer("sn_u", &[1, out], Init::Normal(1.0))?,
        })
    }

    fn iterate(w: &Tensor, u: &Tensor) -> Result<(Tensor, Tensor)> {
        let v = unit_rows(&u.matmul(&w.t()?)?, SN_EPS)?;
        let u = unit_rows(&v.matmul(w)?, SN_EPS)?;
        Ok((v, u))
    }

    pub fn sigma(&self, w: &Tensor) -> Result<Tensor> {
        let (v, u) = Self::iterate(w, &self.u.as_tensor().detach())?;
        Ok(v.matmul(w)?.matmul(&u.t()?)?.reshape(())?)
    }

    pub fn normalize(&self, w: &Tensor) -> Result<Tensor> {
        let sigma = self.sigma(w)?.affine(1.0, SN_EPS)?;
        Ok(w.broadcast_div(&sigma)?)
    }

    /// Advances the stored vector `iters` power-iteration steps on `w`.
    pub fn update(&self, w: &Tensor, iters: usize) -> Result<()> {
        let w = w.detach();
        let mut u = self.u.as_tensor().detach();
        for _ in 0..iters {
            u = Self::iterate(&w, &u)?.1;
        }
        self.u.set(&u)?;
        Ok(())
    }
}

/// Dense layer, `y = x W + b` with `W: (in, out)`. Leading dims are flattened.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub sn: Option<SpectralNorm>,
}

impl Linear {
    pub fn new(vb: &VarBuilder, inp: usize, out: usize, bias: bool, init: Init) -> Result<Self> {
        let weight = vb.get("weight", &[inp, out], init)?;
        let bias = if bias {
            Some(vb.get("bias", &[out], Init::Zeros)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            sn: None,
        })
    }

    /// Same layer with its weight spectrally normalized.
    pub fn spectral(
        vb: &VarBuilder,
        inp: usize,
        out: usize,
        bias: bool,
        init: Init,
    ) -> Result<Self> {
        let mut l = Self::new(vb, inp, out, bias, init)?;
        l.sn = Some(SpectralNorm::new(vb, out)?);
        Ok(l)
    }

    /// The weight actually applied.
    pub fn effective_weight(&self) -> Result<Tensor> {
        match &self.sn {
            Some(sn) => sn.normalize(&self.weight),
            None => Ok(self.weight.clone()),
        }
    }

    pub fn update_spectral(&self, iters: usize) -> Result<()> {
        match &self.sn {
            Some(sn) => sn.update(&self.weight, iters),
            None => Ok(()),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let inp = *dims
            .last()
            .ok_or_else(|| Error::shape("linear", "rank >= 1", "scalar"))?;
        if inp != self.in_dim() {
            return Err(Error::shape("linear input", self.in_dim(), inp));
        }
        let lead: usize = dims[..dims.len() - 1].iter().product();
        let y = x.reshape((lead, inp))?.matmul(&self.effective_weight()?)?;
        let y = match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        };
        let mut out_dims = dims[..dims.len() - 1].to_vec();
        out_dims.push(self.out_dim());
        Ok(y.reshape(out_dims)?)
    }
}

/// Geometry of an NHWC convolution lowered to columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            (self.h + 2 * self.pad - self.k) / self.stride + 1,
            (self.w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    fn cols(&self) -> usize {
        self.k * self.k * self.c
    }

    /// Calls `f(dst_offset, Some(src_offset))` for every `c`-long run of the
    /// column matrix of one image, or `None` where the window hits padding.
    fn for_each_run(&self, mut f: impl FnMut(usize, Option<usize>)) {
        let (ho, wo) = self.out_hw();
        let mut dst = 0;
        for oy in 0..ho {
            for ox in 0..wo {
                for ky in 0..self.k {
                    let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                    for kx in 0..self.k {
                        let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                        let inside =
                            iy >= 0 && ix >= 0 && (iy as usize) < self.h && (ix as usize) < self.w;
                        let src = inside.then(|| ((iy as usize) * self.w + ix as usize) * self.c);
                        f(dst, src);
                        dst += self.c;
                    }
                }
            }
        }
    }
}

fn im2col_slice<T: Copy + Default>(g: &ConvGeom, src: &[T], batch: usize) -> Vec<T> {
    let (ho, wo) = g.out_hw();
    let per_in = g.h * g.w * g.c;
    let per_out = ho * wo * g.cols();
    let mut out = vec![T::default(); batch * per_out];
    for b in 0..batch {
        let s = &src[b * per_in..(b + 1) * per_in];
        let d = &mut out[b * per_out..(b + 1) * per_out];
        g.for_each_run(|dst, src| {
            if let Some(src) = src {
                d[dst..dst + g.c].copy_from_slice(&s[src..src + g.c]);
            }
        });
    }
    out
}

fn col2im_slice<T: Copy + Default + std::ops::AddAssign>(
    g: &ConvGeom,
    cols: &[T],
    batch: usize,
) -> Vec<T> {
    let (ho, wo) = g.out_hw();
    let per_in = g.h * g.w * g.c;
    let per_out = ho * wo * g.cols();
    let mut out = vec![T::default(); batch * per_in];
    for b in 0..batch {
        let s = &cols[b * per_out..(b + 1) * per_out];
        let d = &mut out[b * per_in..(b + 1) * per_in];
        g.for_each_run(|dst, src| {
            if let Some(src) = src {
                for (o, v) in d[src..src + g.c].iter_mut().zip(&s[dst..dst + g.c]) {
                    *o += *v;
                }
            }
        });
    }
    out
}

fn contiguous_slice<'s, T>(v: &'s [T], l: &Layout) -> candle_core::Result<&'s [T]> {
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&v[a..b]),
        None => candle_core::bail!("im2col expects a contiguous input"),
    }
}

struct Im2Col(ConvGeom);

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col-nhwc"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = &self.0;
        let batch = l.dims()[0];
        let (ho, wo) = g.out_hw();
        let shape = Shape::from((batch, ho, wo, g.cols()));
        let out = match s {
            CpuStorage::F32(v) => CpuStorage::F32(im2col_slice(g, contiguous_slice(v, l)?, batch)),
            CpuStorage::F64(v) => CpuStorage::F64(im2col_slice(g, contiguous_slice(v, l)?, batch)),
            _ => candle_core::bail!("im2col: unsupported dtype {:?}", s.dtype()),
        };
        Ok((out, shape))
    }

    fn bwd(
        &self,
        _arg: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<Option<Tensor>> {
        let grad = grad.contiguous()?;
        Ok(Some(grad.apply_op1_no_bwd(&Col2Im(self.0))?))
    }
}

struct Col2Im(ConvGeom);

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im-nhwc"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = &self.0;
        let batch = l.dims()[0];
        let shape = Shape::from((batch, g.h, g.w, g.c));
        let out = match s {
            CpuStorage::F32(v) => CpuStorage::F32(col2im_slice(g, contiguous_slice(v, l)?, batch)),
            CpuStorage::F64(v) => CpuStorage::F64(col2im_slice(g, contiguous_slice(v, l)?, batch)),
            _ => candle_core::bail!("col2im: unsupported dtype {:?}", s.dtype()),
        };
        Ok((out, shape))
    }
}

/// Lowers an NHWC batch to its `(B, Ho, Wo, k*k*C)` column matrix.
pub fn im2col(x: &Tensor, k: usize, stride: usize, pad: usize) -> Result<Tensor> {
    let (_, h, w, c) = x.dims4()?;
    let g = ConvGeom {
        h,
        w,
        c,
        k,
        stride,
        pad,
    };
    Ok(x.contiguous()?.apply_op1(Im2Col(g))?)
}

/// Square-kernel convolution over NHWC input. Weight layout `(k*k*Cin, Cout)`
/// with rows ordered `(ky, kx, cin)`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub sn: Option<SpectralNorm>,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        vb: &VarBuilder,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Result<Self> {
        let weight = vb.get("weight", &[k * k * cin, cout], Init::FanIn)?;
        let bias = if bias {
            Some(vb.get("bias", &[cout], Init::Zeros)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            k,
            stride,
            pad,
            sn: None,
        })
    }

    /// Same layer with its weight spectrally normalized.
    #[allow(clippy::too_many_arguments)]
    pub fn spectral(
        vb: &VarBuilder,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Result<Self> {
        let mut c = Self::new(vb, cin, cout, k, stride, pad, bias)?;
        c.sn = Some(SpectralNorm::new(vb, cout)?);
        Ok(c)
    }

    pub fn effective_weight(&self) -> Result<Tensor> {
        match &self.sn {
            Some(sn) => sn.normalize(&self.weight),
            None => Ok(self.weight.clone()),
        }
    }

    pub fn update_spectral(&self, iters: usize) -> Result<()> {
        match &self.sn {
            Some(sn) => sn.update(&self.weight, iters),
            None => Ok(()),
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dims()[0] / (self.k * self.k)
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, _, _, c) = x.dims4()?;
        if c != self.in_channels() {
            return Err(Error::shape("conv input channels", self.in_channels(), c));
        }
        let cols = im2col(x, self.k, self.stride, self.pad)?;
        let (_, ho, wo, kc) = cols.dims4()?;
        let y = cols
            .reshape((b * ho * wo, kc))?
            .matmul(&self.effective_weight()?)?;
        let y = match &self.bias {
            Some(bias) => y.broadcast_add(bias)?,
            None => y,
        };
        Ok(y.reshape((b, ho, wo, self.out_channels()))?)
    }
}

/// Nearest-neighbour 2x upsampling of an NHWC batch.
pub fn upsample2x(x: &Tensor) -> Result<Tensor> {
    let (b, h, w, c) = x.dims4()?;
    let y = x
        .reshape((b, h, 1, w, 1, c))?
        .broadcast_as((b, h, 2, w, 2, c))?
        .contiguous()?;
    Ok(y.reshape((b, 2 * h, 2 * w, c))?)
}

/// Mean over the spatial axes of an NHWC batch.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    let (b, h, w, c) = x.dims4()?;
    Ok(x.reshape((b, h * w, c))?.mean(1)?)
}

/// Tiles a `(B, C)` vector over an `h x w` grid, giving `(B, h, w, C)`.
pub fn tile_spatial(v: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (b, c) = v.dims2()?;
    Ok(v.reshape((b, 1, 1, c))?
        .broadcast_as((b, h, w, c))?
        .contiguous()?)
}

/// Long short-term memory cell with gate order `[i | f | g | o]`.
#[derive(Debug, Clone)]
pub struct LstmCell {
    w_ih: Tensor,
    w_hh: Tensor,
    bias: Tensor,
    hidden: usize,
}

impl LstmCell {
    pub fn new(vb: &VarBuilder, inp: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            w_ih: vb.get("w_ih", &[inp, 4 * hidden], Init::FanIn)?,
            w_hh: vb.get("w_hh", &[hidden, 4 * hidden], Init::Orthogonal)?,
            bias: vb.get("bias", &[4 * hidden], Init::ForgetBias)?,
            hidden,
        })
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    /// One step over a batch; `x: (B, in)`, `h, c: (B, H)`.
    pub fn step(&self, x: &Tensor, h: &Tensor, c: &Tensor) -> Result<(Tensor, Tensor)> {
        let hd = self.hidden;
        let gates = x
            .matmul(&self.w_ih)?
            .add(&h.matmul(&self.w_hh)?)?
            .broadcast_add(&self.bias)?;
        let i = sigmoid(&gates.narrow(1, 0, hd)?)?;
        let f = sigmoid(&gates.narrow(1, hd, hd)?)?;
        let g = gates.narrow(1, 2 * hd, hd)?.tanh()?;
        let o = sigmoid(&gates.narrow(1, 3 * hd, hd)?)?;
        let c_new = ((f * c)? + (i * g)?)?;
        let h_new = (o * c_new.tanh()?)?;
        Ok((h_new, c_new))
    }
}

/// Gated recurrent unit: `h' = (1 - z) * h + z * tanh(W_n x + U_n (r * h) + b_n)`.
#[derive(Debug, Clone)]
pub struct GruCell {
    w_x: Tensor,
    w_hzr: Tensor,
    w_hn: Tensor,
    bias: Tensor,
    hidden: usize,
}

impl GruCell {
    pub fn new(vb: &VarBuilder, inp: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            w_x: vb.get("w_x", &[inp, 3 * hidden], Init::Orthogonal)?,
            w_hzr: vb.get("w_hzr", &[hidden, 2 * hidden], Init::Orthogonal)?,
            w_hn: vb.get("w_hn", &[hidden, hidden], Init::Orthogonal)?,
            bias: vb.get("bias", &[3 * hidden], Init::Zeros)?,
            hidden,
        })
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn input_dim(&self) -> usize {
        self.w_x.dims()[0]
    }

    /// Returns `(h_new, candidate, update_gate)`.
    pub fn step_detailed(&self, h: &Tensor, x: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        let hd = self.hidden;
        let wx = x.matmul(&self.w_x)?.broadcast_add(&self.bias)?;
        let zr = sigmoid(&(wx.narrow(1, 0, 2 * hd)? + h.matmul(&self.w_hzr)?)?)?;
        let z = zr.narrow(1, 0, hd)?;
        let r = zr.narrow(1, hd, hd)?;
        let cand = (wx.narrow(1, 2 * hd, hd)? + (r * h)?.matmul(&self.w_hn)?)?.tanh()?;
        let keep = z.affine(-1.0, 1.0)?;
        let h_new = ((keep * h)? + (&z * &cand)?)?;
        Ok((h_new, cand, z))
    }

    pub fn step(&self, h: &Tensor, x: &Tensor) -> Result<Tensor> {
        Ok(self.step_detailed(h, x)?.0)
    }
}

/// Adam over a parameter subset (decoupled weight decay left at zero).
pub struct Adam {
    inner: candle_nn::AdamW,
}

impl Adam {
    pub fn new(vars: Vec<Var>, lr: f64, beta1: f64, beta2: f64) -> Result<Self> {
        use candle_nn::Optimizer;
        let params = candle_nn::ParamsAdamW {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            weight_decay: 0.0,
        };
        Ok(Self {
            inner: candle_nn::AdamW::new(vars, params)?,
        })
    }

    pub fn step(&mut self, grads: &candle_core::backprop::GradStore) -> Result<()> {
        use candle_nn::Optimizer;
        self.inner.step(grads)?;
        Ok(())
    }

    pub fn set_lr(&mut self, lr: f64) {
        use candle_nn::Optimizer;
        self.inner.set_learning_rate(lr);
    }
}

/// Reads a rank-0/1 tensor into host `f64`s regardless of dtype.
pub fn to_vec_f64(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
}

pub fn scalar_f64(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conv_reference(x: &[f64], g: &ConvGeom, w: &[f64], cout: usize) -> Vec<f64> {
        let (ho, wo) = g.out_hw();
        let mut out = vec![0.0; ho * wo * cout];
        for oy in 0..ho {
            for ox in 0..wo {
                for co in 0..cout {
                    let mut acc = 0.0;
                    for ky in 0..g.k {
                        for kx in 0..g.k {
                            let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                                continue;
                            }
                            for ci in 0..g.c {
                                let xv = x[((iy as usize) * g.w + ix as usize) * g.c + ci];
                                let wv = w[((ky * g.k + kx) * g.c + ci) * cout + co];
                                acc += xv * wv;
                            }
                        }
                    }
                    out[(oy * wo + ox) * cout + co] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_loop() {
        let store = ParamStore::new(DType::F64, 3);
        let vb = store.root();
        for &(k, stride, pad) in &[(3, 1, 1), (4, 2, 1), (1, 1, 0)] {
            let conv = Conv2d::new(
                &vb.pp(&format!("c{k}{stride}")),
                2,
                3,
                k,
                stride,
                pad,
                false,
            )
            .unwrap();
            let x = Tensor::randn(0f64, 1.0, (1, 6, 6, 2), &Device::Cpu).unwrap();
            let y = conv.forward(&x).unwrap();
            let g = ConvGeom {
                h: 6,
                w: 6,
                c: 2,
                k,
                stride,
                pad,
            };
            let expect = conv_reference(
                &x.flatten_all().unwrap().to_vec1().unwrap(),
                &g,
                &conv.weight.flatten_all().unwrap().to_vec1().unwrap(),
                3,
            );
            let got: Vec<f64> = y.flatten_all().unwrap().to_vec1().unwrap();
            assert_eq!(got.len(), expect.len());
            for (a, b) in got.iter().zip(&expect) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)>
        let g = ConvGeom {
            h: 5,
            w: 4,
            c: 3,
            k: 4,
            stride: 2,
            pad: 1,
        };
        let x = Tensor::randn(0f64, 1.0, (2, 5, 4, 3), &Device::Cpu).unwrap();
        let cols = x.apply_op1(Im2Col(g)).unwrap();
        let y = Tensor::randn(0f64, 1.0, cols.shape(), &Device::Cpu).unwrap();
        let back = y.apply_op1_no_bwd(&Col2Im(g)).unwrap();
        let lhs = (cols * &y)
            .unwrap()
            .sum_all()
            .unwrap()
            .to_scalar::<f64>()
            .unwrap();
        let rhs = (x * back)
            .unwrap()
            .sum_all()
            .unwrap()
            .to_scalar::<f64>()
            .unwrap();
        assert!((lhs - rhs).abs() < 1e-9, "{lhs} vs {rhs}");
    }

    #[test]
    fn orthogonal_init_has_orthonormal_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = orthogonal(&mut rng, 6, 4);
        for a in 0..4 {
            for b in 0..4 {
                let dot: f64 = (0..6).map(|i| q[i * 4 + a] * q[i * 4 + b]).sum();
                let want = if a == b { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn zero_gru_halves_state() {
        let store = ParamStore::new(DType::F64, 0);
        let vb = store.root();
        let gru = GruCell::new(&vb, 3, 2).unwrap();
        for (_, v) in store.entries() {
            v.set(&v.zeros_like().unwrap()).unwrap();
        }
        let h = Tensor::new(&[[0.4f64, -1.0]], &Device::Cpu).unwrap();
        let x = Tensor::new(&[[1.0f64, 2.0, 3.0]], &Device::Cpu).unwrap();
        let out: Vec<Vec<f64>> = gru.step(&h, &x).unwrap().to_vec2().unwrap();
        assert_eq!(out, vec![vec![0.2, -0.5]]);
    }

    #[test]
    fn frozen_builder_detaches() {
        let store = ParamStore::new(DType::F32, 0);
        let lin = Linear::new(&store.root().pp("a").frozen(), 2, 2, true, Init::FanIn).unwrap();
        assert!(!lin.weight.is_variable());
        let lin2 = Linear::new(&store.root().pp("a"), 2, 2, true, Init::FanIn).unwrap();
        assert!(lin2.weight.is_variable());
        assert_eq!(store.len(), 2);
    }
}
