use ndarray::Array2;
use rayon::prelude::*;

use super::layers::{self, GruWeights, GROUPNORM_EPS};
use super::{ModelConfig, ModelParams, Tensor};
use crate::ctc::LogProbMatrix;
use crate::{Error, Result};

/// Frames left after three stride-2 stages, rounding up at each.
pub fn subsampled_len(t: usize) -> usize {
    (0..3).fold(t, |n, _| n.div_ceil(2))
}

struct Net<'a> {
    p: &'a ModelParams,
    cfg: &'a ModelConfig,
}

fn finite(x: Array2<f64>, layer: &str) -> Result<Array2<f64>> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(x)
    } else {
        Err(Error::numeric(format!("non-finite activation in {layer}")))
    }
}

impl<'a> Net<'a> {
    fn t(&self, name: &str) -> Result<&'a Tensor> {
        self.p.get(name)
    }

    fn v(&self, name: &str) -> Result<&'a [f64]> {
        Ok(self.p.get(name)?.data())
    }

    fn m(&self, name: &str) -> Result<ndarray::ArrayView2<'a, f64>> {
        self.p.get(name)?.view2()
    }

    fn prenet(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        let mut h = x.clone();
        for (i, dilation) in [(1, 1), (2, 2)] {
            let conv = layers::conv1d(
                &h,
                self.t(&format!("prenet.conv{i}.weight"))?,
                self.v(&format!("prenet.conv{i}.bias"))?,
                1,
                dilation,
            )?;
            let mut y = layers::rmsnorm_rows(&conv, self.v(&format!("prenet.norm{i}.gamma"))?);
            layers::relu_inplace(&mut y);
            h = finite(y, &format!("prenet.conv{i}"))?;
        }
        let dir = |d: &str, reverse: bool| -> Result<Array2<f64>> {
            let g = |k: &str| format!("prenet.gru.{d}.{k}");
            let w = GruWeights {
                w: [self.m(&g("w_z"))?, self.m(&g("w_r"))?, self.m(&g("w_h"))?],
                u: [self.m(&g("u_z"))?, self.m(&g("u_r"))?, self.m(&g("u_h"))?],
                b: [self.v(&g("b_z"))?, self.v(&g("b_r"))?, self.v(&g("b_h"))?],
            };
            Ok(layers::gru(&h, &w, reverse))
        };
        let both = layers::concat_channels(&dir("fwd", false)?, &dir("bwd", true)?);
        let both = finite(both, "prenet.gru")?;
        let out = layers::linear(&both, self.m("prenet.proj.weight")?, Some(self.v("prenet.proj.bias")?));
        finite(out, "prenet.proj")
    }

    fn subsample(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        let mut h = x.clone();
        for i in 1..=3 {
            let mut y = layers::conv1d(
                &h,
                self.t(&format!("subsample.conv{i}.weight"))?,
                self.v(&format!("subsample.conv{i}.bias"))?,
                2,
                1,
            )?;
            layers::gelu_inplace(&mut y);
            h = finite(y, &format!("subsample.conv{i}"))?;
        }
        Ok(h)
    }

    fn ffn(&self, x: &Array2<f64>, prefix: &str) -> Result<Array2<f64>> {
        let n = layers::rmsnorm_rows(x, self.v(&format!("{prefix}.norm.gamma"))?);
        Ok(layers::ffn(
            &n,
            self.m(&format!("{prefix}.w1"))?,
            self.v(&format!("{prefix}.b1"))?,
            self.m(&format!("{prefix}.w2"))?,
            self.v(&format!("{prefix}.b2"))?,
        ))
    }

    fn conv_module(&self, x: &Array2<f64>, prefix: &str) -> Result<Array2<f64>> {
        let n = layers::rmsnorm_rows(x, self.v(&format!("{prefix}.norm.gamma"))?);
        let expanded = layers::linear(
            &n,
            self.m(&format!("{prefix}.pw1.weight"))?,
            Some(self.v(&format!("{prefix}.pw1.bias"))?),
        );
        let gated = layers::glu(&expanded);
        let dw = layers::depthwise_conv(
            &gated,
            self.m(&format!("{prefix}.dw.weight"))?,
            self.v(&format!("{prefix}.dw.bias"))?,
        );
        let mut gn = layers::group_norm(
            &dw,
            self.cfg.groupnorm_groups,
            self.v(&format!("{prefix}.gn.gamma"))?,
            self.v(&format!("{prefix}.gn.beta"))?,
            GROUPNORM_EPS,
        );
        layers::swish_inplace(&mut gn);
        Ok(layers::linear(
            &gn,
            self.m(&format!("{prefix}.pw2.weight"))?,
            Some(self.v(&format!("{prefix}.pw2.bias"))?),
        ))
    }

    fn block(&self, x: &Array2<f64>, l: usize) -> Result<Array2<f64>> {
        let p = format!("blocks.{l}");
        let x1 = x + &(self.ffn(x, &format!("{p}.ffn1"))? * 0.5);
        let n = layers::rmsnorm_rows(&x1, self.v(&format!("{p}.mhsa.norm.gamma"))?);
        let (att, _) = layers::mhsa(
            &n,
            self.m(&format!("{p}.mhsa.w_q"))?,
            self.m(&format!("{p}.mhsa.w_k"))?,
            self.m(&format!("{p}.mhsa.w_v"))?,
            self.m(&format!("{p}.mhsa.w_o"))?,
            self.cfg.num_heads,
            self.cfg.head_dim,
        );
        let x2 = x1 + &att;
        let x3 = &x2 + &self.conv_module(&x2, &format!("{p}.conv"))?;
        let y = &x3 + &(self.ffn(&x3, &format!("{p}.ffn2"))? * 0.5);
        finite(y, &p)
    }

    fn full(&self, x: &Array2<f64>) -> Result<LogProbMatrix> {
        let h = self.prenet(x)?;
        let mut h = self.subsample(&h)?;
        h += &layers::sinusoidal_positions(h.nrows(), self.cfg.d_model);
        for l in 0..self.cfg.num_layers {
            h = self.block(&h, l)?;
        }
        let n = layers::rmsnorm_rows(&h, self.v("final_norm.gamma")?);
        let logits = layers::linear(&n, self.m("head.weight")?, Some(self.v("head.bias")?));
        let logits = finite(logits, "head")?;
        let (frames, classes) = logits.dim();
        LogProbMatrix::from_logits(frames, classes, logits.into_raw_vec_and_offset().0)
    }
}

fn checked<'a>(params: &'a ModelParams, cfg: &'a ModelConfig) -> Result<Net<'a>> {
    cfg.validate()?;
    params.check(cfg)?;
    Ok(Net { p: params, cfg })
}

fn expect_width(x: &Tensor, width: usize, what: &str) -> Result<()> {
    match x.shape() {
        [_, t, c] if *c == width && *t >= 1 => Ok(()),
        s => Err(Error::param(format!("{what}: expected [B, T>=1, {width}], got {s:?}"))),
    }
}

fn map_items<F>(x: &Tensor, f: F) -> Result<Tensor>
where
    F: Fn(&Array2<f64>) -> Result<Array2<f64>> + Sync,
{
    let items = (0..x.shape()[0])
        .into_par_iter()
        .map(|b| f(&x.item(b)?))
        .collect::<Result<Vec<_>>>()?;
    Tensor::stack(&items)
}

/// Dilated convolutions and BiGRU: `[B, T, input_dim]` to `[B, T, d_model]`.
pub fn prenet_forward(params: &ModelParams, cfg: &ModelConfig, x: &Tensor) -> Result<Tensor> {
    let net = checked(params, cfg)?;
    expect_width(x, cfg.input_dim, "prenet")?;
    map_items(x, |a| net.prenet(a))
}

/// Three stride-2 convolutions with GELU; returns per-item output lengths.
pub fn subsample_forward(params: &ModelParams, cfg: &ModelConfig, x: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let net = checked(params, cfg)?;
    expect_width(x, cfg.d_model, "subsample")?;
    let out = map_items(x, |a| net.subsample(a))?;
    let lens = vec![subsampled_len(x.shape()[1]); x.shape()[0]];
    Ok((out, lens))
}

pub fn conformer_block_forward(params: &ModelParams, cfg: &ModelConfig, layer: usize, x: &Tensor) -> Result<Tensor> {
    let net = checked(params, cfg)?;
    if layer >= cfg.num_layers {
        return Err(Error::param(format!("layer {layer} out of range")));
    }
    expect_width(x, cfg.d_model, "conformer block")?;
    map_items(x, |a| net.block(a, layer))
}

/// Full inference pass. Item `b` is evaluated on its first `lengths[b]`
/// frames only, so padding never influences the result.
pub fn model_forward(
    params: &ModelParams,
    cfg: &ModelConfig,
    features: &Tensor,
    lengths: &[usize],
) -> Result<(Vec<LogProbMatrix>, Vec<usize>)> {
    let net = checked(params, cfg)?;
    expect_width(features, cfg.input_dim, "model")?;
    let (batch, t_max) = (features.shape()[0], features.shape()[1]);
    if lengths.len() != batch {
        return Err(Error::param(format!("{} lengths for batch of {batch}", lengths.len())));
    }
    if let Some(&bad) = lengths.iter().find(|&&l| l == 0 || l > t_max) {
        return Err(Error::param(format!("length {bad} outside 1..={t_max}")));
    }
    let view = features.view3()?;
    let out = (0..batch)
        .into_par_iter()
        .map(|b| {
            let item = view.slice(ndarray::s![b, ..lengths[b], ..]).to_owned();
            net.full(&item)
        })
        .collect::<Result<Vec<_>>>()?;
    let out_lens = lengths.iter().map(|&l| subsampled_len(l)).collect();
    Ok((out, out_lens))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn random_input(b: usize, t: usize, c: usize, seed: u64) -> Tensor {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let data = (0..b * t * c).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::new(vec![b, t, c], data).unwrap()
    }

    #[test]
    fn length_rule_examples() {
        assert_eq!(subsampled_len(150), 19);
        assert_eq!(subsampled_len(152), 19);
        assert_eq!(subsampled_len(8), 1);
        assert_eq!(subsampled_len(1), 1);
        assert_eq!(subsampled_len(17), 3);
    }

    #[test]
    fn zero_weights_make_blocks_identity() {
        let cfg = ModelConfig::tiny();
        let p = ModelParams::zeros(&cfg).unwrap();
        let x = random_input(2, 5, cfg.d_model, 1);
        for l in 0..cfg.num_layers {
            assert_eq!(conformer_block_forward(&p, &cfg, l, &x).unwrap(), x);
        }
    }

    #[test]
    fn zero_input_zero_bias_prenet_is_zero() {
        let cfg = ModelConfig::tiny();
        let p = init_params(&cfg, 2).unwrap();
        let x = Tensor::zeros(vec![1, 6, cfg.input_dim]);
        let y = prenet_forward(&p, &cfg, &x).unwrap();
        assert_eq!(y.shape(), &[1, 6, cfg.d_model]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_shapes_and_normalisation() {
        let cfg = ModelConfig::tiny();
        let p = init_params(&cfg, 3).unwrap();
        let x = random_input(2, 40, cfg.input_dim, 4);
        let (out, lens) = model_forward(&p, &cfg, &x, &[40, 17]).unwrap();
        assert_eq!(lens, vec![5, 3]);
        assert_eq!(out[0].frames(), 5);
        assert_eq!(out[1].frames(), 3);
        for m in &out {
            assert_eq!(m.classes(), cfg.vocab_size);
            assert!(m.max_normalization_error() < 1e-9);
        }
        let (sub, sub_lens) = subsample_forward(&p, &cfg, &Tensor::zeros(vec![1, 150, cfg.d_model])).unwrap();
        assert_eq!(sub.shape(), &[1, 19, cfg.d_model]);
        assert_eq!(sub_lens, vec![19]);
    }

    #[test]
    fn padding_does_not_leak() {
        let cfg = ModelConfig::tiny();
        let p = init_params(&cfg, 9).unwrap();
        let x = random_input(1, 20, cfg.input_dim, 5);
        let mut padded = x.view3().unwrap().to_owned();
        let mut big = ndarray::Array3::<f64>::from_elem((1, 30, cfg.input_dim), 7.0);
        big.slice_mut(ndarray::s![.., ..20, ..]).assign(&padded);
        padded = big;
        let padded = Tensor::new(padded.shape().to_vec(), padded.into_raw_vec_and_offset().0).unwrap();
        let (a, _) = model_forward(&p, &cfg, &x, &[20]).unwrap();
        let (b, _) = model_forward(&p, &cfg, &padded, &[20]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn bad_lengths_rejected() {
        let cfg = ModelConfig::tiny();
        let p = init_params(&cfg, 1).unwrap();
        let x = random_input(1, 8, cfg.input_dim, 1);
        assert!(model_forward(&p, &cfg, &x, &[9]).is_err());
        assert!(model_forward(&p, &cfg, &x, &[0]).is_err());
        assert!(model_forward(&p, &cfg, &x, &[8, 8]).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn output_frames_follow_ceil_rule(t in 1usize..40) {
            let cfg = ModelConfig::tiny();
            let p = init_params(&cfg, 0).unwrap();
            let x = random_input(1, t, cfg.input_dim, t as u64);
            let (out, lens) = model_forward(&p, &cfg, &x, &[t]).unwrap();
            prop_assert_eq!(out[0].frames(), t.div_ceil(2).div_ceil(2).div_ceil(2));
            prop_assert_eq!(lens[0], out[0].frames());
        }
    }
}
