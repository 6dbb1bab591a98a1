//! `HALC` checkpoints.
//!
//! Layout (little-endian): magic `HALC`, `u32` format version (1), `u32`
//! variant tag, five `u32` dims `(k, d′, d, h, w)`, one or three extra `u32`s
//! depending on the tag, then every parameter array in declaration order as
//! 32-bit floats. Tags 0 and 1 are the tensor and vector hallucinators,
//! followed by their hidden width. Tag 2 is a backbone with its classifier
//! head; its dim slots hold `(input channels, classes, d, h, w)` and are
//! followed by input height, input width and hidden channels.

use std::fs;
use std::path::Path;

use super::backbone::{BackboneModel, ClassifierHead, EmbeddingNet};
use super::hallucinator::{HallucinatorDims, HallucinatorModel, HallucinatorVariant};
use crate::dataset::FeatureShape;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"HALC";
pub const VERSION: u32 = 1;
const BACKBONE_TAG: u32 = 2;

#[derive(Clone, Debug, PartialEq)]
pub enum Checkpoint {
    Hallucinator(HallucinatorModel),
    Embedding(EmbeddingNet),
}

fn put_u32(buf: &mut Vec<u8>, v: usize) {
    buf.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_params<'a>(buf: &mut Vec<u8>, params: impl Iterator<Item = &'a Tensor>) {
    for p in params {
        for &v in p.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
}

pub fn encode_hallucinator(model: &HallucinatorModel) -> Vec<u8> {
    let dims = model.dims();
    let mut buf = Vec::with_capacity(36 + 4 * model.param_count());
    buf.extend_from_slice(&MAGIC);
    put_u32(&mut buf, VERSION as usize);
    put_u32(&mut buf, model.variant().tag() as usize);
    for v in [dims.noise_dim, dims.cond_dim, dims.feature.d, dims.feature.h, dims.feature.w, dims.width] {
        put_u32(&mut buf, v);
    }
    put_params(&mut buf, model.params());
    buf
}

pub fn encode_embedding(net: &EmbeddingNet) -> Vec<u8> {
    let [c, ih, iw] = net.backbone.input_shape();
    let f = net.backbone.feature_shape();
    let mut buf = Vec::new();
    buf.extend_from_slice(&MAGIC);
    put_u32(&mut buf, VERSION as usize);
    put_u32(&mut buf, BACKBONE_TAG as usize);
    for v in [c, net.classifier.num_classes(), f.d, f.h, f.w, ih, iw, net.backbone.hidden()] {
        put_u32(&mut buf, v);
    }
    put_params(&mut buf, net.params());
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn u32(&mut self) -> Result<u32> {
        let end = self.pos + 4;
        if end > self.bytes.len() {
            return Err(Error::Truncated {
                format: "HALC",
                expected: end as u64,
                actual: self.bytes.len() as u64,
            });
        }
        let v = u32::from_le_bytes(self.bytes[self.pos..end].try_into().unwrap());
        self.pos = end;
        Ok(v)
    }

    fn dims<const N: usize>(&mut self) -> Result<[usize; N]> {
        let mut out = [0usize; N];
        for v in out.iter_mut() {
            *v = self.u32()? as usize;
        }
        Ok(out)
    }

    /// Reads parameter arrays of the given shapes from the remaining bytes,
    /// which must be exactly long enough.
    fn params(&mut self, shapes: &[Vec<usize>]) -> Result<Vec<Tensor>> {
        let floats: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
        let expected = self.pos + 4 * floats;
        if self.bytes.len() < expected {
            return Err(Error::Truncated {
                format: "HALC",
                expected: expected as u64,
                actual: self.bytes.len() as u64,
            });
        }
        if self.bytes.len() > expected {
            return Err(Error::Malformed(format!(
                "HALC checkpoint has {} trailing bytes",
                self.bytes.len() - expected
            )));
        }
        let mut out = Vec::with_capacity(shapes.len());
        for shape in shapes {
            let n: usize = shape.iter().product();
            let data = self.bytes[self.pos..self.pos + 4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect();
            self.pos += 4 * n;
            out.push(Tensor::new(shape, data)?);
        }
        Ok(out)
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 4 {
        return Err(Error::Truncated {
            format: "HALC",
            expected: 4,
            actual: bytes.len() as u64,
        });
    }
    let found: [u8; 4] = bytes[..4].try_into().unwrap();
    if found != MAGIC {
        return Err(Error::BadMagic { expected: MAGIC, found });
    }
    let mut r = Reader { bytes, pos: 4 };
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion { format: "HALC", version });
    }
    let tag = r.u32()?;
    let [a, b, d, h, w] = r.dims::<5>()?;
    let feature = FeatureShape::new(d, h, w);
    if let Some(variant) = HallucinatorVariant::from_tag(tag) {
        let [width] = r.dims::<1>()?;
        let dims = HallucinatorDims {
            noise_dim: a,
            cond_dim: b,
            width,
            feature,
        };
        let params = r.params(&HallucinatorModel::param_shapes(variant, &dims)?)?;
        return Ok(Checkpoint::Hallucinator(HallucinatorModel::from_params(variant, dims, params)?));
    }
    if tag == BACKBONE_TAG {
        let [ih, iw, hidden] = r.dims::<3>()?;
        let input_shape = [a, ih, iw];
        let mut shapes = BackboneModel::param_shapes(input_shape, feature, hidden)?;
        let split = shapes.len();
        shapes.extend([vec![d, b], vec![b]]);
        let mut params = r.params(&shapes)?;
        let head = params.split_off(split);
        return Ok(Checkpoint::Embedding(EmbeddingNet {
            backbone: BackboneModel::from_params(input_shape, feature, hidden, params)?,
            classifier: ClassifierHead::from_params(d, b, head)?,
        }));
    }
    Err(Error::Malformed(format!("unknown HALC variant tag {tag}")))
}

pub fn save_hallucinator(model: &HallucinatorModel, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_hallucinator(model))?;
    Ok(())
}

pub fn save_embedding(net: &EmbeddingNet, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_embedding(net))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
    decode(&fs::read(path)?)
}

pub fn load_hallucinator(path: impl AsRef<Path>) -> Result<HallucinatorModel> {
    match load(path)? {
        Checkpoint::Hallucinator(m) => Ok(m),
        Checkpoint::Embedding(_) => Err(Error::Malformed("expected a hallucinator checkpoint, found a backbone".into())),
    }
}

pub fn load_embedding(path: impl AsRef<Path>) -> Result<EmbeddingNet> {
    match load(path)? {
        Checkpoint::Embedding(n) => Ok(n),
        Checkpoint::Hallucinator(_) => Err(Error::Malformed("expected a backbone checkpoint, found a hallucinator".into())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn round_f32(model: &HallucinatorModel) -> HallucinatorModel {
        let params = model
            .params()
            .map(|p| Tensor::new(p.shape(), p.data().iter().map(|&v| v as f32 as f64).collect()).unwrap())
            .collect();
        HallucinatorModel::from_params(model.variant(), model.dims(), params).unwrap()
    }

    #[test]
    fn hallucinator_round_trip() {
        let dims = HallucinatorDims {
            noise_dim: 3,
            cond_dim: 5,
            width: 4,
            feature: FeatureShape::new(2, 4, 3),
        };
        for variant in [HallucinatorVariant::Tensor, HallucinatorVariant::Vector] {
            let m = HallucinatorModel::new(variant, dims, &mut seeded(2)).unwrap();
            let bytes = encode_hallucinator(&m);
            assert_eq!(&bytes[..4], b"HALC");
            assert_eq!(bytes.len(), 36 + 4 * m.param_count());
            match decode(&bytes).unwrap() {
                Checkpoint::Hallucinator(back) => assert_eq!(back, round_f32(&m)),
                other => panic!("wrong kind {other:?}"),
            }
        }
    }

    #[test]
    fn embedding_round_trip() {
        let net = EmbeddingNet::new([3, 8, 8], FeatureShape::new(4, 2, 2), 3, 5, &mut seeded(9)).unwrap();
        let bytes = encode_embedding(&net);
        let Checkpoint::Embedding(back) = decode(&bytes).unwrap() else { panic!() };
        assert!(back.same_architecture(&net));
        for (a, b) in back.params().zip(net.params()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(*x, *y as f32 as f64);
            }
        }
    }

    #[test]
    fn corrupt_inputs() {
        let m = HallucinatorModel::vector(
            HallucinatorDims {
                noise_dim: 2,
                cond_dim: 2,
                width: 2,
                feature: FeatureShape::new(3, 1, 1),
            },
            &mut seeded(0),
        )
        .unwrap();
        let bytes = encode_hallucinator(&m);
        assert!(matches!(decode(&bytes[..bytes.len() - 3]), Err(Error::Truncated { .. })));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(Error::BadMagic { .. })));
        let mut ver = bytes.clone();
        ver[4] = 9;
        assert!(matches!(decode(&ver), Err(Error::UnsupportedVersion { version: 9, .. })));
        let mut long = bytes;
        long.push(0);
        assert!(matches!(decode(&long), Err(Error::Malformed(_))));
    }
}
