//! `ADCK` checkpoint encoding.
//!
//! Layout (little-endian): magic, version u32, config block, tensor count
//! u32, then per tensor `name_len u16, name, rank u8, dims u32 x rank,
//! f64 x numel`. The config block is `num_nodes, in_features, hidden,
//! fc_hidden, levels` as u32, `clusters` as u32 x levels, then activation,
//! aggregator and batch-norm flag as u8. Batch-norm running statistics are
//! stored as ordinary tensors after the trainable parameters.

use std::collections::BTreeMap;

use super::{Aggregator, GraphClassifier, ModelConfig};
use crate::error::{Error, FormatError, Result};
use crate::graph::ByteReader;
use crate::tensor::{Activation, Tensor};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"ADCK";
pub const CHECKPOINT_VERSION: u32 = 1;

fn activation_code(a: Activation) -> u8 {
    match a {
        Activation::Sigmoid => 0,
        Activation::Relu => 1,
        Activation::Identity => 2,
    }
}

fn aggregator_code(a: Aggregator) -> u8 {
    match a {
        Aggregator::Weighted => 0,
        Aggregator::Mean => 1,
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

impl GraphClassifier {
    /// Trainable parameters followed by batch-norm buffers, as stored on disk.
    fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = self
            .parameters()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect();
        for (i, l) in self.levels.iter().enumerate() {
            let k = i + 1;
            let s = &l.norm.state;
            let f = s.running_mean.len();
            out.push((
                format!("bn{k}.running_mean"),
                Tensor::new(vec![f], s.running_mean.clone()).expect("sized"),
            ));
            out.push((
                format!("bn{k}.running_var"),
                Tensor::new(vec![f], s.running_var.clone()).expect("sized"),
            ));
            out.push((
                format!("bn{k}.updates"),
                Tensor::new(vec![1], vec![s.updates as f64]).expect("sized"),
            ));
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.config;
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        for v in [
            c.num_nodes,
            c.in_features,
            c.hidden,
            c.fc_hidden,
            c.clusters.len(),
        ] {
            put_u32(&mut out, v);
        }
        for &k in &c.clusters {
            put_u32(&mut out, k);
        }
        out.push(activation_code(c.activation));
        out.push(aggregator_code(c.aggregator));
        out.push(u8::from(c.use_batchnorm));

        let tensors = self.named_tensors();
        put_u32(&mut out, tensors.len());
        for (name, t) in &tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.shape().len() as u8);
            for &d in t.shape() {
                put_u32(&mut out, d);
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: String| Error::Format(FormatError::Inconsistent(msg));
        let mut r = ByteReader::new(bytes);
        let magic = r.array::<4>()?;
        if magic != CHECKPOINT_MAGIC {
            return Err(FormatError::BadMagic {
                expected: CHECKPOINT_MAGIC,
                found: magic,
            }
            .into());
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(FormatError::UnsupportedVersion(version).into());
        }
        let num_nodes = r.u32()? as usize;
        let in_features = r.u32()? as usize;
        let hidden = r.u32()? as usize;
        let fc_hidden = r.u32()? as usize;
        let levels = r.u32()? as usize;
        if levels > 64 {
            return Err(bad(format!("{levels} pooling levels")));
        }
        let clusters = (0..levels)
            .map(|_| r.u32().map(|v| v as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let activation = match r.u8()? {
            0 => Activation::Sigmoid,
            1 => Activation::Relu,
            v => return Err(bad(format!("activation code {v}"))),
        };
        let aggregator = match r.u8()? {
            0 => Aggregator::Weighted,
            1 => Aggregator::Mean,
            v => return Err(bad(format!("aggregator code {v}"))),
        };
        let use_batchnorm = match r.u8()? {
            0 => false,
            1 => true,
            v => return Err(bad(format!("batch-norm flag {v}"))),
        };
        let config = ModelConfig {
            num_nodes,
            in_features,
            hidden,
            fc_hidden,
            clusters,
            activation,
            aggregator,
            use_batchnorm,
        };
        config
            .validate()
            .map_err(|e| bad(format!("stored config is invalid: {e}")))?;

        let count = r.u32()? as usize;
        let mut stored: BTreeMap<String, Tensor> = BTreeMap::new();
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| bad("tensor name is not UTF-8".into()))?;
            let rank = r.u8()? as usize;
            let dims = (0..rank)
                .map(|_| r.u32().map(|v| v as usize))
                .collect::<Result<Vec<_>, _>>()?;
            let numel = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| bad(format!("tensor {name} is too large")))?;
            let data = r.f64s(numel)?;
            let t = Tensor::new(dims, data)?;
            if stored.insert(name.clone(), t).is_some() {
                return Err(bad(format!("tensor {name} stored twice")));
            }
        }
        if r.remaining() != 0 {
            return Err(bad(format!("{} trailing bytes", r.remaining())));
        }

        // Zero-seeded skeleton fixes the expected names and shapes.
        let mut model = GraphClassifier::new(config, 0)?;
        let expected: Vec<(String, Vec<usize>)> = model
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        if expected.len() != stored.len() {
            return Err(bad(format!(
                "expected {} tensors, found {}",
                expected.len(),
                stored.len()
            )));
        }
        let mut take = |name: &str, shape: &[usize]| -> Result<Vec<f64>> {
            let t = stored
                .remove(name)
                .ok_or_else(|| bad(format!("missing tensor {name}")))?;
            if t.shape() != shape {
                return Err(bad(format!(
                    "tensor {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            Ok(t.into_data())
        };
        let n_params = model.parameters().len();
        let mut values = Vec::with_capacity(expected.len());
        for (name, shape) in &expected {
            values.push(take(name, shape)?);
        }
        for (p, v) in model.parameters_mut().into_iter().zip(&values[..n_params]) {
            p.data_mut().copy_from_slice(v);
        }
        for (level, chunk) in model.levels.iter_mut().zip(values[n_params..].chunks(3)) {
            let s = &mut level.norm.state;
            s.running_mean.clone_from(&chunk[0]);
            s.running_var.clone_from(&chunk[1]);
            let updates = chunk[2][0];
            if !(updates >= 0.0 && updates.fract() == 0.0) {
                return Err(bad(format!("batch-norm update count {updates}")));
            }
            s.updates = updates as u64;
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{BatchStats, NormMode};

    fn trained_looking_model() -> GraphClassifier {
        let cfg = ModelConfig {
            hidden: 4,
            fc_hidden: 3,
            activation: Activation::Relu,
            aggregator: Aggregator::Mean,
            ..ModelConfig::new(20)
        };
        let mut m = GraphClassifier::new(cfg, 11).unwrap();
        m.update_running_stats(&[
            BatchStats {
                mean: vec![0.1, 0.2, 0.3, 0.4],
                var: vec![1.5, 2.5, 0.5, 0.25],
            },
            BatchStats {
                mean: vec![-0.1; 4],
                var: vec![0.9; 4],
            },
            BatchStats {
                mean: vec![0.0; 4],
                var: vec![1.0; 4],
            },
        ]);
        m
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = trained_looking_model();
        let bytes = m.to_bytes();
        let back = GraphClassifier::from_bytes(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_bytes(), bytes);
        let feats = vec![0.3; 60];
        let adj: Vec<f64> = (0..400)
            .map(|k| if k / 20 == k % 20 { 0.0 } else { 0.4 })
            .collect();
        let a = m
            .forward(&feats, &adj, NormMode::Eval)
            .unwrap()
            .logit_value();
        let b = back
            .forward(&feats, &adj, NormMode::Eval)
            .unwrap()
            .logit_value();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn rejects_bad_input() {
        let bytes = trained_looking_model().to_bytes();
        let mut wrong = bytes.clone();
        wrong[..4].copy_from_slice(b"ADGR");
        assert!(matches!(
            GraphClassifier::from_bytes(&wrong),
            Err(Error::Format(FormatError::BadMagic { .. }))
        ));
        assert!(matches!(
            GraphClassifier::from_bytes(&bytes[..bytes.len() - 3]),
            Err(Error::Format(FormatError::Truncated { .. }))
        ));
        let mut extra = bytes.clone();
        extra.extend_from_slice(&[1, 2]);
        assert!(matches!(
            GraphClassifier::from_bytes(&extra),
            Err(Error::Format(FormatError::Inconsistent(_)))
        ));
    }
}
