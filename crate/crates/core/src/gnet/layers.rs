//! Named parameter tensors and the two layer types (affine and LSTM cell),
//! each with a batched forward pass and a hand-written backward pass.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

pub type Mat = Array2<f64>;

pub const INIT_SCALE: f64 = 0.08;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Flat list of tensors. Layers refer to their tensors by index, so a
/// gradient buffer is just another `Params` with the same layout.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Params {
    pub tensors: Vec<Tensor>,
}

impl Params {
    pub fn push_uniform(&mut self, name: String, shape: &[usize], rng: &mut impl Rng) -> usize {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| rng.random_range(-INIT_SCALE..INIT_SCALE))
            .collect();
        self.tensors.push(Tensor {
            name,
            shape: shape.to_vec(),
            data,
        });
        self.tensors.len() - 1
    }

    pub fn mat(&self, id: usize) -> ArrayView2<'_, f64> {
        let t = &self.tensors[id];
        ArrayView2::from_shape((t.shape[0], t.shape[1]), &t.data).expect("matrix tensor")
    }

    pub fn mat_mut(&mut self, id: usize) -> ArrayViewMut2<'_, f64> {
        let t = &mut self.tensors[id];
        ArrayViewMut2::from_shape((t.shape[0], t.shape[1]), &mut t.data).expect("matrix tensor")
    }

    pub fn vec(&self, id: usize) -> ArrayView1<'_, f64> {
        ArrayView1::from(&self.tensors[id].data[..])
    }

    pub fn vec_mut(&mut self, id: usize) -> ArrayViewMut1<'_, f64> {
        ArrayViewMut1::from(&mut self.tensors[id].data[..])
    }

    pub fn zeros_like(&self) -> Params {
        Params {
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    data: vec![0.0; t.data.len()],
                })
                .collect(),
        }
    }

    pub fn n_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors
            .iter()
            .all(|t| t.data.iter().all(|x| x.is_finite()))
    }

    pub fn sq_norm(&self) -> f64 {
        self.tensors
            .iter()
            .flat_map(|t| t.data.iter())
            .map(|x| x * x)
            .sum()
    }

    pub fn scale(&mut self, factor: f64) {
        for t in &mut self.tensors {
            t.data.iter_mut().for_each(|x| *x *= factor);
        }
    }

    pub fn get(&self, flat: usize) -> f64 {
        let (i, j) = self.locate(flat);
        self.tensors[i].data[j]
    }

    pub fn set(&mut self, flat: usize, value: f64) {
        let (i, j) = self.locate(flat);
        self.tensors[i].data[j] = value;
    }

    fn locate(&self, mut flat: usize) -> (usize, usize) {
        for (i, t) in self.tensors.iter().enumerate() {
            if flat < t.data.len() {
                return (i, flat);
            }
            flat -= t.data.len();
        }
        panic!("flat parameter index out of range");
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn masked(x: ArrayView2<f64>, mask: Option<&Mat>) -> Mat {
    match mask {
        Some(m) => &x * m,
        None => x.to_owned(),
    }
}

/// `y = x Wᵀ + b`, with `W` of shape `[out, in]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Linear {
    pub w: usize,
    pub b: usize,
    pub n_in: usize,
    pub n_out: usize,
}

impl Linear {
    pub fn new(p: &mut Params, name: &str, n_in: usize, n_out: usize, rng: &mut impl Rng) -> Self {
        let w = p.push_uniform(format!("{name}.weight"), &[n_out, n_in], rng);
        let b = p.push_uniform(format!("{name}.bias"), &[n_out], rng);
        Self { w, b, n_in, n_out }
    }

    pub fn forward(&self, p: &Params, x: ArrayView2<f64>) -> Mat {
        let mut y = Mat::zeros((x.nrows(), self.n_out));
        general_mat_mul(1.0, &x, &p.mat(self.w).t(), 0.0, &mut y);
        y += &p.vec(self.b);
        y
    }

    /// Accumulates parameter gradients into `g` and returns `dL/dx`.
    pub fn backward(&self, p: &Params, g: &mut Params, x: ArrayView2<f64>, dy: ArrayView2<f64>) -> Mat {
        general_mat_mul(1.0, &dy.t(), &x, 1.0, &mut g.mat_mut(self.w));
        g.vec_mut(self.b).scaled_add(1.0, &dy.sum_axis(Axis(0)));
        let mut dx = Mat::zeros((dy.nrows(), self.n_in));
        general_mat_mul(1.0, &dy, &p.mat(self.w), 0.0, &mut dx);
        dx
    }
}

/// LSTM cell with gate order input, forget, candidate, output.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lstm {
    pub wx: usize,
    pub wh: usize,
    pub b: usize,
    pub n_in: usize,
    pub hidden: usize,
}

#[derive(Debug, Clone)]
pub struct LstmCache {
    x: Mat,
    h_prev: Mat,
    c_prev: Mat,
    gates: Mat,
    tanh_c: Mat,
}

impl Lstm {
    pub fn new(p: &mut Params, name: &str, n_in: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let wx = p.push_uniform(format!("{name}.weight_ih"), &[4 * hidden, n_in], rng);
        let wh = p.push_uniform(format!("{name}.weight_hh"), &[4 * hidden, hidden], rng);
        let b = p.push_uniform(format!("{name}.bias"), &[4 * hidden], rng);
        Self {
            wx,
            wh,
            b,
            n_in,
            hidden,
        }
    }

    /// One step. `mx` and `mh` are pre-scaled dropout masks for the input
    /// and the recurrent state.
    pub fn step(
        &self,
        p: &Params,
        x: ArrayView2<f64>,
        h: ArrayView2<f64>,
        c: ArrayView2<f64>,
        mx: Option<&Mat>,
        mh: Option<&Mat>,
    ) -> (Mat, Mat, LstmCache) {
        let hd = self.hidden;
        let x = masked(x, mx);
        let h_prev = masked(h, mh);
        let mut a = Mat::zeros((x.nrows(), 4 * hd));
        general_mat_mul(1.0, &x, &p.mat(self.wx).t(), 0.0, &mut a);
        general_mat_mul(1.0, &h_prev, &p.mat(self.wh).t(), 1.0, &mut a);
        a += &p.vec(self.b);
        a.slice_mut(s![.., 0..2 * hd]).mapv_inplace(sigmoid);
        a.slice_mut(s![.., 2 * hd..3 * hd]).mapv_inplace(f64::tanh);
        a.slice_mut(s![.., 3 * hd..]).mapv_inplace(sigmoid);
        let (i, f, g, o) = (
            a.slice(s![.., 0..hd]),
            a.slice(s![.., hd..2 * hd]),
            a.slice(s![.., 2 * hd..3 * hd]),
            a.slice(s![.., 3 * hd..]),
        );
        let c_new = &f * &c + &i * &g;
        let tanh_c = c_new.mapv(f64::tanh);
        let h_new = &o * &tanh_c;
        let cache = LstmCache {
            x,
            h_prev,
            c_prev: c.to_owned(),
            gates: a,
            tanh_c,
        };
        (h_new, c_new, cache)
    }

    /// Backward through one step given upstream `dh` and `dc`. Returns
    /// `(dx, dh_prev, dc_prev)`.
    #[allow(clippy::too_many_arguments)]
    pub fn backward(
        &self,
        p: &Params,
        grads: &mut Params,
        cache: &LstmCache,
        dh: ArrayView2<f64>,
        dc: ArrayView2<f64>,
        mx: Option<&Mat>,
        mh: Option<&Mat>,
    ) -> (Mat, Mat, Mat) {
        let hd = self.hidden;
        let a = &cache.gates;
        let (i, f, g, o) = (
            a.slice(s![.., 0..hd]),
            a.slice(s![.., hd..2 * hd]),
            a.slice(s![.., 2 * hd..3 * hd]),
            a.slice(s![.., 3 * hd..]),
        );
        let mut dc_total = dc.to_owned();
        Zip::from(&mut dc_total)
            .and(&dh)
            .and(o)
            .and(&cache.tanh_c)
            .for_each(|d, &dh, &o, &tc| *d += dh * o * (1.0 - tc * tc));

        let mut da = Mat::zeros(a.raw_dim());
        Zip::from(da.slice_mut(s![.., 0..hd]))
            .and(&dc_total)
            .and(i)
            .and(g)
            .for_each(|d, &dc, &i, &g| *d = dc * g * i * (1.0 - i));
        Zip::from(da.slice_mut(s![.., hd..2 * hd]))
            .and(&dc_total)
            .and(f)
            .and(&cache.c_prev)
            .for_each(|d, &dc, &f, &cp| *d = dc * cp * f * (1.0 - f));
        Zip::from(da.slice_mut(s![.., 2 * hd..3 * hd]))
            .and(&dc_total)
            .and(i)
            .and(g)
            .for_each(|d, &dc, &i, &g| *d = dc * i * (1.0 - g * g));
        Zip::from(da.slice_mut(s![.., 3 * hd..]))
            .and(&dh)
            .and(o)
            .and(&cache.tanh_c)
            .for_each(|d, &dh, &o, &tc| *d = dh * tc * o * (1.0 - o));

        let dc_prev = &dc_total * &f;

        general_mat_mul(1.0, &da.t(), &cache.x, 1.0, &mut grads.mat_mut(self.wx));
        general_mat_mul(1.0, &da.t(), &cache.h_prev, 1.0, &mut grads.mat_mut(self.wh));
        grads.vec_mut(self.b).scaled_add(1.0, &da.sum_axis(Axis(0)));

        let mut dx = Mat::zeros((da.nrows(), self.n_in));
        general_mat_mul(1.0, &da, &p.mat(self.wx), 0.0, &mut dx);
        let mut dh_prev = Mat::zeros((da.nrows(), hd));
        general_mat_mul(1.0, &da, &p.mat(self.wh), 0.0, &mut dh_prev);
        if let Some(m) = mx {
            dx *= m;
        }
        if let Some(m) = mh {
            dh_prev *= m;
        }
        (dx, dh_prev, dc_prev)
    }
}
