use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::config::LmConfig;
use crate::container::NamedTensor;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub ln1_g: Array1<f64>,
    pub ln1_b: Array1<f64>,
    /// `d × 3d`, columns ordered `[q | k | v]`, heads contiguous within each.
    pub w_qkv: Array2<f64>,
    pub b_qkv: Array1<f64>,
    pub w_o: Array2<f64>,
    pub b_o: Array1<f64>,
    pub ln2_g: Array1<f64>,
    pub ln2_b: Array1<f64>,
    pub w_fc: Array2<f64>,
    pub b_fc: Array1<f64>,
    pub w_proj: Array2<f64>,
    pub b_proj: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmParams {
    pub tok_emb: Array2<f64>,
    pub pos_emb: Array2<f64>,
    pub blocks: Vec<BlockParams>,
    pub lnf_g: Array1<f64>,
    pub lnf_b: Array1<f64>,
    /// `d × vocab`. Zero at initialization so the untrained model is uniform.
    pub w_out: Array2<f64>,
    pub b_out: Array1<f64>,
}

impl BlockParams {
    fn zeros(cfg: &LmConfig) -> Self {
        let d = cfg.d_model;
        let m = cfg.d_mlp();
        BlockParams {
            ln1_g: Array1::zeros(d),
            ln1_b: Array1::zeros(d),
            w_qkv: Array2::zeros((d, 3 * d)),
            b_qkv: Array1::zeros(3 * d),
            w_o: Array2::zeros((d, d)),
            b_o: Array1::zeros(d),
            ln2_g: Array1::zeros(d),
            ln2_b: Array1::zeros(d),
            w_fc: Array2::zeros((d, m)),
            b_fc: Array1::zeros(m),
            w_proj: Array2::zeros((m, d)),
            b_proj: Array1::zeros(d),
        }
    }

    fn slices(&self) -> Vec<(&'static str, Vec<usize>, &[f64])> {
        fn a1(x: &Array1<f64>) -> (Vec<usize>, &[f64]) {
            (vec![x.len()], x.as_slice().unwrap())
        }
        fn a2(x: &Array2<f64>) -> (Vec<usize>, &[f64]) {
            (x.shape().to_vec(), x.as_slice().unwrap())
        }
        let mut v = Vec::with_capacity(12);
        let mut push1 = |n, x| {
            let (s, d) = a1(x);
            v.push((n, s, d));
        };
        push1("ln1_g", &self.ln1_g);
        push1("ln1_b", &self.ln1_b);
        push1("b_qkv", &self.b_qkv);
        push1("b_o", &self.b_o);
        push1("ln2_g", &self.ln2_g);
        push1("ln2_b", &self.ln2_b);
        push1("b_fc", &self.b_fc);
        push1("b_proj", &self.b_proj);
        for (n, x) in [
            ("w_qkv", &self.w_qkv),
            ("w_o", &self.w_o),
            ("w_fc", &self.w_fc),
            ("w_proj", &self.w_proj),
        ] {
            let (s, d) = a2(x);
            v.push((n, s, d));
        }
        v
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.ln1_g.as_slice_mut().unwrap(),
            self.ln1_b.as_slice_mut().unwrap(),
            self.b_qkv.as_slice_mut().unwrap(),
            self.b_o.as_slice_mut().unwrap(),
            self.ln2_g.as_slice_mut().unwrap(),
            self.ln2_b.as_slice_mut().unwrap(),
            self.b_fc.as_slice_mut().unwrap(),
            self.b_proj.as_slice_mut().unwrap(),
            self.w_qkv.as_slice_mut().unwrap(),
            self.w_o.as_slice_mut().unwrap(),
            self.w_fc.as_slice_mut().unwrap(),
            self.w_proj.as_slice_mut().unwrap(),
        ]
    }
}

impl LmParams {
    pub fn zeros(cfg: &LmConfig) -> Self {
        let d = cfg.d_model;
        LmParams {
            tok_emb: Array2::zeros((cfg.vocab_size, d)),
            pos_emb: Array2::zeros((cfg.context_len, d)),
            blocks: (0..cfg.n_layers).map(|_| BlockParams::zeros(cfg)).collect(),
            lnf_g: Array1::zeros(d),
            lnf_b: Array1::zeros(d),
            w_out: Array2::zeros((d, cfg.vocab_size)),
            b_out: Array1::zeros(cfg.vocab_size),
        }
    }

    /// GPT-2 style initialization with a zero unembedding.
    pub fn init(cfg: &LmConfig, rng: &mut impl Rng) -> Self {
        let mut p = LmParams::zeros(cfg);
        let std = 0.02;
        let resid_std = std / (2.0 * cfg.n_layers as f64).sqrt();
        let fill = |a: &mut [f64], s: f64, rng: &mut dyn rand::RngCore| {
            let n = Normal::new(0.0, s).unwrap();
            for x in a {
                *x = n.sample(rng);
            }
        };
        fill(p.tok_emb.as_slice_mut().unwrap(), std, rng);
        fill(p.pos_emb.as_slice_mut().unwrap(), std / 2.0, rng);
        for b in &mut p.blocks {
            b.ln1_g.fill(1.0);
            b.ln2_g.fill(1.0);
            fill(b.w_qkv.as_slice_mut().unwrap(), std, rng);
            fill(b.w_o.as_slice_mut().unwrap(), resid_std, rng);
            fill(b.w_fc.as_slice_mut().unwrap(), std, rng);
            fill(b.w_proj.as_slice_mut().unwrap(), resid_std, rng);
        }
        p.lnf_g.fill(1.0);
        p
    }

    /// Named tensors in a fixed order.
    pub fn named_slices(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut v: Vec<(String, Vec<usize>, &[f64])> = vec![
            ("tok_emb".into(), self.tok_emb.shape().to_vec(), self.tok_emb.as_slice().unwrap()),
            ("pos_emb".into(), self.pos_emb.shape().to_vec(), self.pos_emb.as_slice().unwrap()),
        ];
        for (l, b) in self.blocks.iter().enumerate() {
            for (n, s, d) in b.slices() {
                v.push((format!("blocks.{l}.{n}"), s, d));
            }
        }
        v.push(("lnf_g".into(), vec![self.lnf_g.len()], self.lnf_g.as_slice().unwrap()));
        v.push(("lnf_b".into(), vec![self.lnf_b.len()], self.lnf_b.as_slice().unwrap()));
        v.push(("w_out".into(), self.w_out.shape().to_vec(), self.w_out.as_slice().unwrap()));
        v.push(("b_out".into(), vec![self.b_out.len()], self.b_out.as_slice().unwrap()));
        v
    }

    /// Mutable views in the same order as [`LmParams::named_slices`].
    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v: Vec<&mut [f64]> = vec![self.tok_emb.as_slice_mut().unwrap(), self.pos_emb.as_slice_mut().unwrap()];
        for b in &mut self.blocks {
            v.extend(b.slices_mut());
        }
        v.push(self.lnf_g.as_slice_mut().unwrap());
        v.push(self.lnf_b.as_slice_mut().unwrap());
        v.push(self.w_out.as_slice_mut().unwrap());
        v.push(self.b_out.as_slice_mut().unwrap());
        v
    }

    pub fn n_params(&self) -> usize {
        self.named_slices().iter().map(|(_, _, d)| d.len()).sum()
    }

    /// Rounds every value to the nearest `f32`, so in-memory checkpoints are
    /// identical to what a save/load round trip produces.
    pub fn round_to_f32(&mut self) {
        for s in self.slices_mut() {
            for x in s {
                *x = *x as f32 as f64;
            }
        }
    }

    pub fn to_tensors(&self) -> Vec<NamedTensor> {
        self.named_slices()
            .into_iter()
            .map(|(n, s, d)| NamedTensor::from_f64(n, s, d.iter().copied()))
            .collect()
    }

    pub fn from_tensors(cfg: &LmConfig, tensors: &[NamedTensor], path: &std::path::Path) -> Result<Self> {
        let mut p = LmParams::zeros(cfg);
        let expected: Vec<(String, Vec<usize>)> = p.named_slices().into_iter().map(|(n, s, _)| (n, s)).collect();
        if tensors.len() != expected.len() {
            return Err(Error::format(
                path,
                format!("expected {} tensors, found {}", expected.len(), tensors.len()),
            ));
        }
        let values = expected
            .iter()
            .map(|(n, s)| crate::container::take_tensor(tensors, n, s, path))
            .collect::<Result<Vec<_>>>()?;
        for (dst, src) in p.slices_mut().into_iter().zip(values) {
            dst.copy_from_slice(&src);
        }
        Ok(p)
    }
}
