use ndarray::Array2;
use rand::distributions::{Distribution, Uniform};
use rand::Rng;

use super::ModelConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

/// Named dense tensors. Vectors (biases, norm gains) are stored as `1 x n`.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters {
    names: Vec<String>,
    tensors: Vec<Array2<f64>>,
}

impl Parameters {
    fn new() -> Self {
        Parameters {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    fn push(&mut self, name: String, tensor: Array2<f64>) -> ParamId {
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Array2<f64> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.tensors[id.0]
    }

    pub fn zeros_like(&self) -> Self {
        Parameters {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| Array2::zeros(t.raw_dim())).collect(),
        }
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Array2<f64>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Array2<f64>] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<f64>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn by_name(&self, name: &str) -> Option<&Array2<f64>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    /// Total number of scalars.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    /// Locates flat coordinate `k` as (tensor index, row, column).
    pub fn locate(&self, mut k: usize) -> (usize, usize, usize) {
        for (i, t) in self.tensors.iter().enumerate() {
            if k < t.len() {
                return (i, k / t.ncols(), k % t.ncols());
            }
            k -= t.len();
        }
        panic!("flat coordinate out of range");
    }

    pub fn flat_get(&self, k: usize) -> f64 {
        let (i, r, c) = self.locate(k);
        self.tensors[i][[r, c]]
    }

    pub fn flat_set(&mut self, k: usize, value: f64) {
        let (i, r, c) = self.locate(k);
        self.tensors[i][[r, c]] = value;
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors
            .iter()
            .flat_map(|t| t.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for t in &mut self.tensors {
            t.mapv_inplace(|v| v * factor);
        }
    }

    pub fn add_assign(&mut self, other: &Parameters) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            *a += b;
        }
    }

    /// Rounds every value to the nearest `f32`, making checkpoints lossless.
    pub fn round_to_f32(&mut self) {
        for t in &mut self.tensors {
            t.mapv_inplace(|v| v as f32 as f64);
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Attn {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Ffn {
    pub up: Linear,
    pub down: Linear,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct EncoderLayer {
    pub norm_attn: Norm,
    pub attn: Attn,
    pub norm_ffn: Norm,
    pub ffn: Ffn,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct DecoderLayer {
    pub norm_self: Norm,
    pub self_attn: Attn,
    pub norm_cross: Norm,
    pub cross_attn: Attn,
    pub norm_ffn: Norm,
    pub ffn: Ffn,
}

/// Where each weight lives inside [`Parameters`].
#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub embed: ParamId,
    pub encoder: Vec<EncoderLayer>,
    pub encoder_norm: Norm,
    pub decoder: Vec<DecoderLayer>,
    pub decoder_norm: Norm,
}

struct Builder<'r, R: Rng> {
    params: Parameters,
    rng: Option<&'r mut R>,
}

impl<R: Rng> Builder<'_, R> {
    /// Glorot-uniform matrix, or zeros when no rng is given.
    fn matrix(&mut self, name: String, rows: usize, cols: usize) -> ParamId {
        let t = match self.rng.as_deref_mut() {
            Some(rng) => {
                let limit = (6.0 / (rows + cols) as f64).sqrt();
                let dist = Uniform::new_inclusive(-limit, limit);
                Array2::from_shape_simple_fn((rows, cols), || dist.sample(rng))
            }
            None => Array2::zeros((rows, cols)),
        };
        self.params.push(name, t)
    }

    fn constant(&mut self, name: String, cols: usize, value: f64) -> ParamId {
        self.params.push(name, Array2::from_elem((1, cols), value))
    }

    fn linear(&mut self, name: &str, d_in: usize, d_out: usize) -> Linear {
        Linear {
            w: self.matrix(format!("{name}.weight"), d_in, d_out),
            b: self.constant(format!("{name}.bias"), d_out, 0.0),
        }
    }

    fn norm(&mut self, name: &str, d: usize) -> Norm {
        Norm {
            gain: self.constant(format!("{name}.gain"), d, 1.0),
            bias: self.constant(format!("{name}.bias"), d, 0.0),
        }
    }

    fn attn(&mut self, name: &str, d: usize) -> Attn {
        Attn {
            q: self.linear(&format!("{name}.q"), d, d),
            k: self.linear(&format!("{name}.k"), d, d),
            v: self.linear(&format!("{name}.v"), d, d),
            o: self.linear(&format!("{name}.o"), d, d),
        }
    }

    fn ffn(&mut self, name: &str, d: usize, d_ff: usize) -> Ffn {
        Ffn {
            up: self.linear(&format!("{name}.up"), d, d_ff),
            down: self.linear(&format!("{name}.down"), d_ff, d),
        }
    }
}

impl Layout {
    /// Builds the layout and its parameters. With `rng == None` all matrices
    /// are zero (used as a shape template when loading).
    pub fn build<R: Rng>(cfg: &ModelConfig, rng: Option<&mut R>) -> (Layout, Parameters) {
        let d = cfg.d_model;
        let mut b = Builder {
            params: Parameters::new(),
            rng,
        };
        let embed = b.matrix("embed".into(), cfg.vocab_size, d);
        let encoder = (0..cfg.layers_enc)
            .map(|l| EncoderLayer {
                norm_attn: b.norm(&format!("enc.{l}.norm_attn"), d),
                attn: b.attn(&format!("enc.{l}.attn"), d),
                norm_ffn: b.norm(&format!("enc.{l}.norm_ffn"), d),
                ffn: b.ffn(&format!("enc.{l}.ffn"), d, cfg.d_ff),
            })
            .collect();
        let encoder_norm = b.norm("enc.norm", d);
        let decoder = (0..cfg.layers_dec)
            .map(|l| DecoderLayer {
                norm_self: b.norm(&format!("dec.{l}.norm_self"), d),
                self_attn: b.attn(&format!("dec.{l}.self_attn"), d),
                norm_cross: b.norm(&format!("dec.{l}.norm_cross"), d),
                cross_attn: b.attn(&format!("dec.{l}.cross_attn"), d),
                norm_ffn: b.norm(&format!("dec.{l}.norm_ffn"), d),
                ffn: b.ffn(&format!("dec.{l}.ffn"), d, cfg.d_ff),
            })
            .collect();
        let decoder_norm = b.norm("dec.norm", d);
        let layout = Layout {
            embed,
            encoder,
            encoder_norm,
            decoder,
            decoder_norm,
        };
        (layout, b.params)
    }
}
