//! Model documents: a JSON header (arch, standardizer, version, seed) with
//! every layer's parameters as base64 little-endian `f32` blobs.

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::{Dense, InputStandardizer, Network, NetworkArch};
use crate::error::{Error, Result};

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
pub(crate) struct ModelDocument {
    pub version: u32,
    pub arch: NetworkArch,
    pub standardizer: InputStandardizer,
    pub seed: u64,
    pub layers: Vec<LayerDocument>,
}

#[derive(Serialize, Deserialize)]
pub(crate) struct LayerDocument {
    pub rows: usize,
    pub cols: usize,
    pub weight: String,
    pub bias: String,
}

fn encode(values: impl Iterator<Item = f32>) -> String {
    let bytes: Vec<u8> = values.flat_map(f32::to_le_bytes).collect();
    STANDARD.encode(bytes)
}

fn decode(blob: &str, expected: usize, path: &str) -> Result<Vec<f32>> {
    let bytes = STANDARD
        .decode(blob)
        .map_err(|e| Error::parse(path, format!("invalid base64: {e}")))?;
    if bytes.len() != 4 * expected {
        return Err(Error::validation(
            path,
            format!("blob holds {} bytes, expected {}", bytes.len(), 4 * expected),
        ));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub(crate) fn to_document(net: &Network<f32>, standardizer: &InputStandardizer) -> ModelDocument {
    ModelDocument {
        version: MODEL_FORMAT_VERSION,
        arch: net.arch.clone(),
        standardizer: standardizer.clone(),
        seed: net.init_seed,
        layers: net
            .layers
            .iter()
            .map(|l| LayerDocument {
                rows: l.weight.nrows(),
                cols: l.weight.ncols(),
                weight: encode(l.weight.iter().copied()),
                bias: encode(l.bias.iter().copied()),
            })
            .collect(),
    }
}

pub(crate) fn from_document(doc: ModelDocument) -> Result<(Network<f32>, InputStandardizer)> {
    if doc.version != MODEL_FORMAT_VERSION {
        return Err(Error::Version {
            found: doc.version,
            expected: MODEL_FORMAT_VERSION,
        });
    }
    doc.arch.validate()?;
    let shapes = doc.arch.layer_shapes();
    if shapes.len() != doc.layers.len() {
        return Err(Error::validation(
            "/layers",
            format!("{} layers, arch needs {}", doc.layers.len(), shapes.len()),
        ));
    }
    if doc.standardizer.mean.len() != doc.arch.input_dim
        || doc.standardizer.std.len() != doc.arch.input_dim
    {
        return Err(Error::validation("/standardizer", "length differs from input_dim"));
    }
    let mut layers = Vec::with_capacity(shapes.len());
    for (i, ((rows, cols), l)) in shapes.into_iter().zip(&doc.layers).enumerate() {
        if (l.rows, l.cols) != (rows, cols) {
            return Err(Error::validation(
                format!("/layers/{i}"),
                format!("shape {}x{}, arch needs {rows}x{cols}", l.rows, l.cols),
            ));
        }
        let w = decode(&l.weight, rows * cols, &format!("/layers/{i}/weight"))?;
        let b = decode(&l.bias, cols, &format!("/layers/{i}/bias"))?;
        if w.iter().chain(&b).any(|v| !v.is_finite()) {
            return Err(Error::validation(format!("/layers/{i}"), "non-finite parameter"));
        }
        layers.push(Dense {
            weight: Array2::from_shape_vec((rows, cols), w).expect("checked length"),
            bias: Array1::from(b),
        });
    }
    Ok((
        Network {
            arch: doc.arch,
            layers,
            init_seed: doc.seed,
        },
        doc.standardizer,
    ))
}

pub fn save_network(net: &Network<f32>, standardizer: &InputStandardizer) -> String {
    serde_json::to_string(&to_document(net, standardizer)).expect("model serializes")
}

pub fn load_network(document: &str) -> Result<(Network<f32>, InputStandardizer)> {
    // Check the version before the rest of the schema so old files get a
    // precise error.
    #[derive(Deserialize)]
    struct Header {
        version: u32,
    }
    let header: Header = crate::io::from_json_str(document)?;
    if header.version != MODEL_FORMAT_VERSION {
        return Err(Error::Version {
            found: header.version,
            expected: MODEL_FORMAT_VERSION,
        });
    }
    from_document(crate::io::from_json_str(document)?)
}

#[cfg(test)]
mod tests {
    use super::super::{init_network, Mode};
    use super::*;

    fn sample() -> (Network<f32>, InputStandardizer) {
        let arch = NetworkArch {
            input_dim: 5,
            rb_dim: 7,
            n_rb: 2,
            jaw_cond: true,
            jaw_dim: 3,
            output_dim: 2,
            dropout: 0.1,
        };
        let net = init_network(&arch, 42).unwrap();
        let st = InputStandardizer {
            mean: vec![0.1, 0.2, 0.3, 0.4, 0.5],
            std: vec![1.0, 2.0, 0.1, 1e-8, 3.3],
        };
        (net, st)
    }

    #[test]
    fn round_trip_is_bitwise() {
        let (net, st) = sample();
        let doc = save_network(&net, &st);
        let (net2, st2) = load_network(&doc).unwrap();
        assert_eq!(net2, net);
        assert_eq!(st2, st);
        let x = ndarray::Array2::from_elem((2, 5), 0.25f32);
        let j = ndarray::Array2::from_elem((2, 3), 0.5f32);
        let a = net.forward(x.view(), Some(j.view()), Mode::Eval).unwrap();
        let b = net2.forward(x.view(), Some(j.view()), Mode::Eval).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn truncated_document_fails() {
        let (net, st) = sample();
        let doc = save_network(&net, &st);
        assert!(load_network(&doc[..doc.len() / 2]).is_err());
    }

    #[test]
    fn version_mismatch_is_explicit() {
        let (net, st) = sample();
        let doc = save_network(&net, &st).replacen("\"version\":1", "\"version\":2", 1);
        assert!(matches!(
            load_network(&doc),
            Err(Error::Version { found: 2, expected: 1 })
        ));
    }

    #[test]
    fn wrong_blob_length_fails() {
        let (net, st) = sample();
        let mut doc = to_document(&net, &st);
        doc.layers[1].bias = encode([1.0f32].into_iter());
        let s = serde_json::to_string(&doc).unwrap();
        assert!(load_network(&s).is_err());
    }
}
