//! Versioned binary model format plus a JSON sidecar.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! "PIML" | version u16 | flags u16 (bit 0: variational head) | n_layers u32
//! per layer: in u32 | out u32 | activation u8 (0 identity, 1 leaky relu) | slope f64
//! per layer: weights (row-major, out x in) f64 | biases f64
//! variational head only: rho_w | rho_b | prior_mu_w | prior_mu_b | prior_sigma_w | prior_sigma_b
//! ```
//!
//! For a variational head the per-layer weights and biases are the posterior
//! means.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bayes::VariationalLayer;
use crate::data::NormStats;
use crate::error::{Error, Result};
use crate::nn::{Activation, DenseLayer, DenseNetwork};
use crate::physics::Physics;
use crate::piml::{PimlModel, TransferMode, TransferNet};

pub const MAGIC: &[u8; 4] = b"PIML";
pub const FORMAT_VERSION: u16 = 1;
const FLAG_VARIATIONAL: u16 = 1;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn put_f64s(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_net(net: &TransferNet) -> Vec<u8> {
    let (layers, head): (Vec<DenseLayer>, Option<&VariationalLayer>) = match net {
        TransferNet::Deterministic(n) => (n.layers().to_vec(), None),
        TransferNet::Bayesian { trunk, head } => {
            let mut l = trunk.clone();
            l.push(head.mean_layer());
            (l, Some(head))
        }
    };
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let flags = if head.is_some() { FLAG_VARIATIONAL } else { 0 };
    out.extend_from_slice(&flags.to_le_bytes());
    out.extend_from_slice(&(layers.len() as u32).to_le_bytes());
    for l in &layers {
        out.extend_from_slice(&(l.in_dim() as u32).to_le_bytes());
        out.extend_from_slice(&(l.out_dim() as u32).to_le_bytes());
        let (tag, slope) = match l.activation() {
            Activation::Identity => (0u8, 0.0),
            Activation::LeakyRelu(s) => (1u8, s),
        };
        out.push(tag);
        out.extend_from_slice(&slope.to_le_bytes());
    }
    for l in &layers {
        put_f64s(&mut out, l.weights());
        put_f64s(&mut out, l.biases());
    }
    if let Some(h) = head {
        for part in [&h.rho_w, &h.rho_b, &h.prior_mu_w, &h.prior_mu_b, &h.prior_sigma_w, &h.prior_sigma_b] {
            put_f64s(&mut out, part);
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let len = n.checked_mul(8).ok_or_else(|| Error::Format("length overflow".into()))?;
        Ok(self
            .take(len)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn decode_net(bytes: &[u8]) -> Result<TransferNet> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("bad magic (expected PIML)".into()));
    }
    let version = r.u16()?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported format version {version}")));
    }
    let flags = r.u16()?;
    if flags & !FLAG_VARIATIONAL != 0 {
        return Err(Error::Format(format!("unknown flags {flags:#06x}")));
    }
    let n_layers = r.u32()?;
    if n_layers == 0 {
        return Err(Error::Format("no layers".into()));
    }
    let mut shapes = Vec::new();
    for _ in 0..n_layers {
        let (i, o) = (r.u32()?, r.u32()?);
        let tag = r.take(1)?[0];
        let slope = r.f64s(1)?[0];
        let act = match tag {
            0 => Activation::Identity,
            1 => Activation::LeakyRelu(slope),
            t => return Err(Error::Format(format!("unknown activation tag {t}"))),
        };
        shapes.push((i, o, act));
    }
    let mut layers = Vec::with_capacity(n_layers);
    for &(i, o, act) in &shapes {
        let w = r.f64s(i * o)?;
        let b = r.f64s(o)?;
        layers.push(DenseLayer::from_parts(i, o, w, b, act)?);
    }
    let net = if flags & FLAG_VARIATIONAL != 0 {
        let mean = layers.pop().expect("n_layers > 0");
        let (i, o) = (mean.in_dim(), mean.out_dim());
        let rho_w = r.f64s(i * o)?;
        let rho_b = r.f64s(o)?;
        let prior_mu_w = r.f64s(i * o)?;
        let prior_mu_b = r.f64s(o)?;
        let prior_sigma_w = r.f64s(i * o)?;
        let prior_sigma_b = r.f64s(o)?;
        let head = VariationalLayer::from_parts(
            i,
            o,
            mean.weights().to_vec(),
            mean.biases().to_vec(),
            rho_w,
            rho_b,
            prior_mu_w,
            prior_mu_b,
            prior_sigma_w,
            prior_sigma_b,
        )?;
        // Validates the chain and activations.
        let mut check = layers.clone();
        check.push(mean);
        DenseNetwork::from_layers(check)?;
        TransferNet::Bayesian { trunk: layers, head }
    } else {
        TransferNet::Deterministic(DenseNetwork::from_layers(layers)?)
    };
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(net)
}

/// Everything besides the weights that is needed to rebuild a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSidecar {
    pub format_version: u16,
    pub architecture: Vec<usize>,
    pub variational: bool,
    pub seed: u64,
    pub mode: TransferMode,
    pub physics: Physics,
    pub input_stats: NormStats,
    pub output_stats: NormStats,
    pub blob_sha256: String,
}

pub fn sidecar_path(bin: &Path) -> PathBuf {
    bin.with_extension("json")
}

/// Writes `path` (binary) and its `.json` sidecar; returns both paths.
pub fn save_model(model: &PimlModel<Physics>, seed: u64, path: &Path) -> Result<(PathBuf, PathBuf)> {
    let blob = encode_net(&model.net);
    let sidecar = ModelSidecar {
        format_version: FORMAT_VERSION,
        architecture: model.net.sizes(),
        variational: model.is_bayesian(),
        seed,
        mode: model.mode,
        physics: model.physics.clone(),
        input_stats: model.input_stats.clone(),
        output_stats: model.output_stats.clone(),
        blob_sha256: sha256_hex(&blob),
    };
    std::fs::write(path, &blob).map_err(|e| Error::io(path, e))?;
    let json_path = sidecar_path(path);
    let json = serde_json::to_string_pretty(&sidecar)?;
    std::fs::write(&json_path, json + "\n").map_err(|e| Error::io(&json_path, e))?;
    Ok((path.to_path_buf(), json_path))
}

/// Loads a model and checks the blob against the sidecar hash.
pub fn load_model(path: &Path) -> Result<(PimlModel<Physics>, ModelSidecar)> {
    let blob = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let json_path = sidecar_path(path);
    let text = std::fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
    let sidecar: ModelSidecar = serde_json::from_str(&text)?;
    let hash = sha256_hex(&blob);
    if hash != sidecar.blob_sha256 {
        return Err(Error::Format(format!(
            "{}: hash {hash} does not match sidecar {}",
            path.display(),
            sidecar.blob_sha256
        )));
    }
    let net = decode_net(&blob)?;
    if net.sizes() != sidecar.architecture || net.is_bayesian() != sidecar.variational {
        return Err(Error::Format("sidecar architecture does not match blob".into()));
    }
    let model = PimlModel {
        net,
        physics: sidecar.physics.clone(),
        mode: sidecar.mode,
        input_stats: sidecar.input_stats.clone(),
        output_stats: sidecar.output_stats.clone(),
    };
    model.validate()?;
    Ok((model, sidecar))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bayes::PriorScale;
    use crate::physics::GramacyLeePartial;
    use crate::rng::rng_from_seed;

    fn model() -> PimlModel<Physics> {
        let net = DenseNetwork::new(&[1, 4, 1], 0.01, &mut rng_from_seed(3)).unwrap();
        PimlModel::new(
            net,
            Physics::GramacyLee(GramacyLeePartial::default()),
            TransferMode::Residual,
            NormStats::identity(1),
            NormStats::identity(1),
        )
        .unwrap()
    }

    #[test]
    fn header_layout() {
        let bytes = encode_net(&model().net);
        assert_eq!(&bytes[..4], b"PIML");
        assert_eq!(u16::from_le_bytes([bytes[4], bytes[5]]), 1);
        assert_eq!(u16::from_le_bytes([bytes[6], bytes[7]]), 0);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
        // header 12 + 2 * 17 layer records + (4 + 4 + 4 + 1) params
        assert_eq!(bytes.len(), 12 + 2 * 17 + 13 * 8);
    }

    #[test]
    fn round_trips_both_kinds() {
        let m = model();
        assert_eq!(decode_net(&encode_net(&m.net)).unwrap(), m.net);
        let b = m.promote_to_bayesian(PriorScale::LayerWide, 0.5).unwrap();
        let bytes = encode_net(&b.net);
        assert_eq!(u16::from_le_bytes([bytes[6], bytes[7]]), 1);
        assert_eq!(decode_net(&bytes).unwrap(), b.net);
    }

    #[test]
    fn rejects_corruption() {
        let bytes = encode_net(&model().net);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_net(&bad).is_err());
        assert!(decode_net(&bytes[..bytes.len() - 1]).is_err());
        let mut long = bytes.clone();
        long.push(0);
        assert!(decode_net(&long).is_err());
    }

    #[test]
    fn save_load_checks_hash() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.bin");
        let m = model();
        save_model(&m, 9, &p).unwrap();
        let (back, side) = load_model(&p).unwrap();
        assert_eq!(back, m);
        assert_eq!(side.seed, 9);
        let mut blob = std::fs::read(&p).unwrap();
        let last = blob.len() - 1;
        blob[last] ^= 1;
        std::fs::write(&p, blob).unwrap();
        assert!(load_model(&p).is_err());
    }
}
