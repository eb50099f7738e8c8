use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ModelConfig, Tensor};
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"CXL1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Drawn from uniform(±1/√fan_in).
    Weight { fan_in: usize },
    Bias,
    /// Norm gains, initialised to one.
    Gain,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
}

fn weight(name: String, shape: Vec<usize>, fan_in: usize) -> ParamSpec {
    ParamSpec { name, shape, kind: ParamKind::Weight { fan_in } }
}

fn bias(name: String, n: usize) -> ParamSpec {
    ParamSpec { name, shape: vec![n], kind: ParamKind::Bias }
}

fn gain(name: String, n: usize) -> ParamSpec {
    ParamSpec { name, shape: vec![n], kind: ParamKind::Gain }
}

/// Every tensor of the model, in a fixed order.
pub fn param_shapes(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let (inp, d, h) = (cfg.input_dim, cfg.d_model, cfg.prenet_gru_hidden);
    let kp = cfg.prenet_kernel;
    let ff = cfg.ff_expansion * d;
    let att = cfg.num_heads * cfg.head_dim;
    let mut out = Vec::new();

    for i in 1..=2 {
        out.push(weight(format!("prenet.conv{i}.weight"), vec![inp, inp, kp], inp * kp));
        out.push(bias(format!("prenet.conv{i}.bias"), inp));
        out.push(gain(format!("prenet.norm{i}.gamma"), inp));
    }
    for dir in ["fwd", "bwd"] {
        for g in ["z", "r", "h"] {
            out.push(weight(format!("prenet.gru.{dir}.w_{g}"), vec![h, inp], inp));
            out.push(weight(format!("prenet.gru.{dir}.u_{g}"), vec![h, h], h));
            out.push(bias(format!("prenet.gru.{dir}.b_{g}"), h));
        }
    }
    out.push(weight("prenet.proj.weight".into(), vec![d, 2 * h], 2 * h));
    out.push(bias("prenet.proj.bias".into(), d));

    for i in 1..=3 {
        out.push(weight(format!("subsample.conv{i}.weight"), vec![d, d, 3], d * 3));
        out.push(bias(format!("subsample.conv{i}.bias"), d));
    }

    for l in 0..cfg.num_layers {
        let p = format!("blocks.{l}");
        let ffn = |out: &mut Vec<ParamSpec>, tag: &str| {
            out.push(gain(format!("{p}.{tag}.norm.gamma"), d));
            out.push(weight(format!("{p}.{tag}.w1"), vec![ff, d], d));
            out.push(bias(format!("{p}.{tag}.b1"), ff));
            out.push(weight(format!("{p}.{tag}.w2"), vec![d, ff], ff));
            out.push(bias(format!("{p}.{tag}.b2"), d));
        };
        ffn(&mut out, "ffn1");
        out.push(gain(format!("{p}.mhsa.norm.gamma"), d));
        for m in ["w_q", "w_k", "w_v"] {
            out.push(weight(format!("{p}.mhsa.{m}"), vec![att, d], d));
        }
        out.push(weight(format!("{p}.mhsa.w_o"), vec![d, att], att));
        out.push(gain(format!("{p}.conv.norm.gamma"), d));
        out.push(weight(format!("{p}.conv.pw1.weight"), vec![2 * d, d], d));
        out.push(bias(format!("{p}.conv.pw1.bias"), 2 * d));
        out.push(weight(format!("{p}.conv.dw.weight"), vec![d, cfg.conv_kernel], cfg.conv_kernel));
        out.push(bias(format!("{p}.conv.dw.bias"), d));
        out.push(gain(format!("{p}.conv.gn.gamma"), d));
        out.push(bias(format!("{p}.conv.gn.beta"), d));
        out.push(weight(format!("{p}.conv.pw2.weight"), vec![d, d], d));
        out.push(bias(format!("{p}.conv.pw2.bias"), d));
        ffn(&mut out, "ffn2");
    }

    out.push(gain("final_norm.gamma".into(), d));
    out.push(weight("head.weight".into(), vec![cfg.vocab_size, d], d));
    out.push(bias("head.bias".into(), cfg.vocab_size));
    out
}

/// Closed-form number of scalar parameters.
pub fn param_count(cfg: &ModelConfig) -> u64 {
    let c = |v: usize| v as u64;
    let (inp, d, h, v) = (c(cfg.input_dim), c(cfg.d_model), c(cfg.prenet_gru_hidden), c(cfg.vocab_size));
    let (kp, kc, ff) = (c(cfg.prenet_kernel), c(cfg.conv_kernel), c(cfg.ff_expansion) * d);
    let att = c(cfg.num_heads * cfg.head_dim);

    let prenet = 2 * (inp * inp * kp + 2 * inp) + 2 * 3 * (h * inp + h * h + h) + d * 2 * h + d;
    let subsample = 3 * (3 * d * d + d);
    let ffn = d + 2 * ff * d + ff + d;
    let mhsa = d + 4 * att * d;
    let conv = d + (2 * d * d + 2 * d) + (d * kc + d) + 2 * d + (d * d + d);
    let head = d + v * d + v;
    prenet + subsample + c(cfg.num_layers) * (2 * ffn + mhsa + conv) + head
}

/// Named parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    tensors: BTreeMap<String, Tensor>,
}

/// Seeded initialisation: weights uniform(±1/√fan_in), biases 0, gains 1.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ModelParams> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tensors = BTreeMap::new();
    for spec in param_shapes(cfg) {
        let t = match spec.kind {
            ParamKind::Weight { fan_in } => {
                let bound = 1.0 / (fan_in as f64).sqrt();
                let n = spec.shape.iter().product();
                let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
                Tensor::new(spec.shape, data)?
            }
            ParamKind::Bias => Tensor::zeros(spec.shape),
            ParamKind::Gain => Tensor::filled(spec.shape, 1.0),
        };
        tensors.insert(spec.name, t);
    }
    Ok(ModelParams { tensors })
}

impl ModelParams {
    /// All weights and biases zero, gains one.
    pub fn zeros(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let tensors = param_shapes(cfg)
            .into_iter()
            .map(|s| {
                let t = match s.kind {
                    ParamKind::Gain => Tensor::filled(s.shape, 1.0),
                    _ => Tensor::zeros(s.shape),
                };
                (s.name, t)
            })
            .collect();
        Ok(Self { tensors })
    }

    pub fn from_tensors(tensors: BTreeMap<String, Tensor>) -> Self {
        Self { tensors }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::param(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::param(format!("missing parameter {name}")))
    }

    /// Overwrite a tensor, keeping its shape.
    pub fn set(&mut self, name: &str, data: Vec<f64>) -> Result<()> {
        let t = self.get_mut(name)?;
        *t = Tensor::new(t.shape().to_vec(), data)?;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn total_elements(&self) -> u64 {
        self.tensors.values().map(|t| t.len() as u64).sum()
    }

    /// Check that exactly the tensors required by `cfg` are present with the
    /// right shapes.
    pub fn check(&self, cfg: &ModelConfig) -> Result<()> {
        let specs = param_shapes(cfg);
        if specs.len() != self.tensors.len() {
            return Err(Error::data(format!(
                "expected {} tensors, found {}",
                specs.len(),
                self.tensors.len()
            )));
        }
        for s in specs {
            let t = self
                .tensors
                .get(&s.name)
                .ok_or_else(|| Error::data(format!("missing parameter {}", s.name)))?;
            if t.shape() != s.shape.as_slice() {
                return Err(Error::data(format!(
                    "{}: shape {:?}, expected {:?}",
                    s.name,
                    t.shape(),
                    s.shape
                )));
            }
        }
        Ok(())
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        for (name, t) in &self.tensors {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.rank() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(t.len() * 4);
            for &v in t.data() {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let mut cur = Cursor { bytes: &bytes, pos: 0 };
        if cur.take(4)? != MAGIC {
            return Err(Error::data("bad params magic, expected CXL1"));
        }
        let mut tensors = BTreeMap::new();
        while cur.pos < bytes.len() {
            let n = cur.u32()? as usize;
            let name = std::str::from_utf8(cur.take(n)?)
                .map_err(|_| Error::data("tensor name is not UTF-8"))?
                .to_owned();
            let rank = cur.u32()? as usize;
            let shape = (0..rank).map(|_| cur.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let count: usize = shape.iter().product();
            let payload = cur.take(count.checked_mul(4).ok_or_else(|| Error::data("tensor too large"))?)?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| Error::data(format!("{name}: {e}")))?;
            if tensors.insert(name.clone(), t).is_some() {
                return Err(Error::data(format!("duplicate tensor {name}")));
            }
        }
        Ok(Self { tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(std::fs::File::open(path)?)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::data("truncated params file"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_is_bitwise_identical() {
        let cfg = ModelConfig::tiny();
        assert_eq!(init_params(&cfg, 7).unwrap(), init_params(&cfg, 7).unwrap());
        assert_ne!(init_params(&cfg, 7).unwrap(), init_params(&cfg, 8).unwrap());
    }

    #[test]
    fn gains_one_biases_zero_weights_bounded() {
        let cfg = ModelConfig::tiny();
        let p = init_params(&cfg, 1).unwrap();
        for spec in param_shapes(&cfg) {
            let t = p.get(&spec.name).unwrap();
            match spec.kind {
                ParamKind::Gain => assert!(t.data().iter().all(|&v| v == 1.0)),
                ParamKind::Bias => assert!(t.data().iter().all(|&v| v == 0.0)),
                ParamKind::Weight { fan_in } => {
                    let b = 1.0 / (fan_in as f64).sqrt();
                    assert!(t.data().iter().all(|v| v.abs() <= b));
                }
            }
        }
    }

    #[test]
    fn closed_form_matches_enumeration() {
        for cfg in [ModelConfig::tiny(), ModelConfig::default()] {
            let sum: u64 = param_shapes(&cfg).iter().map(|s| s.shape.iter().product::<usize>() as u64).sum();
            assert_eq!(param_count(&cfg), sum);
        }
        let p = init_params(&ModelConfig::tiny(), 3).unwrap();
        assert_eq!(p.total_elements(), param_count(&ModelConfig::tiny()));
    }

    #[test]
    fn binary_roundtrip_is_f32_exact() {
        let cfg = ModelConfig::tiny();
        let p = init_params(&cfg, 5).unwrap();
        let mut buf = Vec::new();
        p.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"CXL1");
        let back = ModelParams::read_from(&buf[..]).unwrap();
        back.check(&cfg).unwrap();
        for (name, t) in p.iter() {
            let b = back.get(name).unwrap();
            for (x, y) in t.data().iter().zip(b.data()) {
                assert_eq!(*x as f32 as f64, *y);
            }
        }
        assert!(ModelParams::read_from(&buf[..buf.len() - 1]).is_err());
        assert!(ModelParams::read_from(&b"XXXX"[..]).is_err());
    }
}
