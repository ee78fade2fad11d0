//! Binary checkpoint: `MVLA`, u32 LE version, u32 LE header length, JSON
//! header, then little-endian f32 payloads in directory order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::{tensor_specs, ModelParameters};
use crate::trainer::Codecs;
use crate::vocab::{ActionBinner, ImageCodec, TextCodec, VocabLayout};

pub const MAGIC: &[u8; 4] = b"MVLA";
pub const VERSION: u32 = 1;
const CODEBOOK: &str = "codebook";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset from the start of the payload section.
    pub offset: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct ImageMeta {
    offset: u32,
    patch: usize,
    img_h: usize,
    img_w: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    config: RunConfig,
    vocab: VocabLayout,
    text: TextCodec,
    image: ImageMeta,
    binner: ActionBinner,
    codebook_shape: [usize; 2],
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub codecs: Codecs,
    pub params: ModelParameters<f32>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let specs = tensor_specs(&self.params.config);
        let mut tensors = Vec::with_capacity(specs.len() + 1);
        let mut payload: Vec<u8> =
            Vec::with_capacity((self.params.num_params() + self.codecs.image.codebook.len()) * 4);
        let img = &self.codecs.image;
        let blobs = self.params.tensors().into_iter().zip(&specs).map(|(t, s)| (s.name.clone(), s.shape.clone(), t));
        let codebook = (CODEBOOK.to_string(), vec![img.codebook_size, img.patch_dim()], &img.codebook);
        for (name, shape, data) in blobs.chain(std::iter::once(codebook)) {
            tensors.push(TensorEntry { name, shape, offset: payload.len() });
            for x in data {
                payload.extend_from_slice(&x.to_le_bytes());
            }
        }
        let header = Header {
            config: self.config.clone(),
            vocab: self.codecs.layout,
            text: self.codecs.text,
            image: ImageMeta { offset: img.offset, patch: img.patch, img_h: img.img_h, img_w: img.img_w },
            binner: self.codecs.binner.clone(),
            codebook_shape: [img.codebook_size, img.patch_dim()],
            tensors,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(12 + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(bad("missing MVLA magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::CheckpointVersion { found: version, expected: VERSION });
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let body = bytes.get(12..12 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| bad(format!("header: {e}")))?;
        let payload = &bytes[12 + hlen..];

        let specs = tensor_specs(&header.config.model);
        if header.tensors.len() != specs.len() + 1 {
            return Err(bad("tensor directory does not match the model config"));
        }
        let mut expected_offset = 0;
        let mut blobs: Vec<Vec<f32>> = Vec::with_capacity(header.tensors.len());
        for (i, entry) in header.tensors.iter().enumerate() {
            let (name, shape) = match specs.get(i) {
                Some(s) => (s.name.as_str(), s.shape.clone()),
                None => (CODEBOOK, header.codebook_shape.to_vec()),
            };
            if entry.name != name || entry.shape != shape {
                return Err(bad(format!("directory entry {i} is `{}`, expected `{name}`", entry.name)));
            }
            if entry.offset != expected_offset {
                return Err(bad(format!("tensor `{name}` offset {} is not contiguous", entry.offset)));
            }
            let len = shape.iter().product::<usize>() * 4;
            let raw =
                payload.get(entry.offset..entry.offset + len).ok_or_else(|| bad(format!("`{name}` truncated")))?;
            blobs.push(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect());
            expected_offset += len;
        }
        if expected_offset != payload.len() {
            return Err(bad("trailing bytes after the last tensor"));
        }
        let codebook = blobs.pop().expect("codebook entry");
        let mut params = ModelParameters::<f32>::zeros(&header.config.model);
        for (dst, src) in params.tensors_mut().into_iter().zip(blobs) {
            *dst = src;
        }
        let m = header.image;
        let image = ImageCodec::from_codebook(m.offset, m.patch, m.img_h, m.img_w, codebook);
        let codecs = Codecs { layout: header.vocab, text: header.text, image, binner: header.binner };
        Ok(Checkpoint { config: header.config, codecs, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| bad(format!("cannot write {}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| bad(format!("cannot read {}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simworld::generate_dataset;
    use crate::trainer::CodecConfig;

    fn sample() -> Checkpoint {
        let data = generate_dataset(2, 0).unwrap();
        let codecs = Codecs::fit(&data, &CodecConfig::default()).unwrap();
        let mut config = RunConfig::default();
        config.model =
            crate::model::ModelConfig { layers: 1, d_model: 8, heads: 2, vocab: codecs.vocab_size(), ..config.model };
        let params = ModelParameters::init(&config.model);
        Checkpoint { config, codecs, params }
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let ck = sample();
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn rejects_other_versions_and_corruption() {
        let mut bytes = sample().to_bytes();
        bytes[4] = 2;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::CheckpointVersion { found: 2, expected: 1 })));
        let mut bytes = sample().to_bytes();
        bytes.pop();
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Checkpoint(_))));
        assert!(matches!(Checkpoint::from_bytes(b"NOPE0000000000"), Err(Error::Checkpoint(_))));
        let e = Checkpoint::from_bytes(&[b'M', b'V', b'L', b'A', 9, 0, 0, 0, 0, 0, 0, 0]).unwrap_err();
        assert_eq!(e.exit_code(), 4);
    }

    #[test]
    fn directory_is_contiguous() {
        let bytes = sample().to_bytes();
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let v: serde_json::Value = serde_json::from_slice(&bytes[12..12 + hlen]).unwrap();
        let dir = v["tensors"].as_array().unwrap();
        let mut next = 0;
        for t in dir {
            assert_eq!(t["offset"].as_u64().unwrap() as usize, next);
            next += t["shape"].as_array().unwrap().iter().map(|x| x.as_u64().unwrap() as usize).product::<usize>() * 4;
        }
        assert_eq!(12 + hlen + next, bytes.len());
        assert_eq!(dir.last().unwrap()["name"], "codebook");
    }
}
