//! On-disk formats.
//!
//! Model file: magic `TPSR1`, little-endian `u32` dims `(n, num_actions,
//! num_obs_kernels, feature_dim)`, then little-endian `f64` payloads in the
//! order `b1`, `b_inf`, `U` (row-major), operators by (action, kernel), each
//! row-major. A JSON sidecar `<model>.json` carries the feature-map
//! reference, provenance, the feature map itself and the history embedding.
//!
//! Value-function file: magic `TPSRVF1`, `u32` alpha count and dimension,
//! the alphas, then one `u32` action tag per alpha. Its sidecar carries the
//! feature-map reference, the discount and the reward model.
//!
//! Matrices inside JSON are base64 blobs of little-endian `f64`, so every
//! artifact reloads bit for bit.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::features::{FeatureMap, KernelSet, ObservationFeatures, WhiteningTransform, WindowFeatures};
use crate::model::TpsrModel;
use crate::planner::{RewardModel, ValueFunction};
use crate::{Error, Result};

pub const MODEL_MAGIC: &[u8] = b"TPSR1";
pub const VALUE_MAGIC: &[u8] = b"TPSRVF1";

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::format("unexpected end of file"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::format("size overflow"))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::format(format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

fn put_u32(out: &mut Vec<u8>, x: usize) -> Result<()> {
    let v = u32::try_from(x).map_err(|_| Error::format(format!("{x} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_f64s<'a>(out: &mut Vec<u8>, xs: impl IntoIterator<Item = &'a f64>) {
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

fn put_matrix_row_major(out: &mut Vec<u8>, m: &DMatrix<f64>) {
    for r in 0..m.nrows() {
        put_f64s(out, m.row(r).iter());
    }
}

fn matrix_from_row_major(rows: usize, cols: usize, data: &[f64]) -> DMatrix<f64> {
    DMatrix::from_row_slice(rows, cols, data)
}

/// Serializes the model parameters.
pub fn model_to_bytes(model: &TpsrModel) -> Result<Vec<u8>> {
    let n = model.rank();
    let mut out = Vec::with_capacity(MODEL_MAGIC.len() + 16 + 8 * (2 * n + model.feature_dim() * n + model.operators().len() * n * n));
    out.extend_from_slice(MODEL_MAGIC);
    put_u32(&mut out, n)?;
    put_u32(&mut out, model.num_actions())?;
    put_u32(&mut out, model.num_obs())?;
    put_u32(&mut out, model.feature_dim())?;
    put_f64s(&mut out, model.b1().iter());
    put_f64s(&mut out, model.b_inf().iter());
    put_matrix_row_major(&mut out, model.projection());
    for op in model.operators() {
        put_matrix_row_major(&mut out, op);
    }
    Ok(out)
}

/// Parses a model file; the feature-map reference comes from the sidecar.
pub fn model_from_bytes(bytes: &[u8], feature_map_ref: &str) -> Result<TpsrModel> {
    if !bytes.starts_with(MODEL_MAGIC) {
        return Err(Error::format("not a TPSR model file (bad magic)"));
    }
    let mut r = Reader {
        buf: bytes,
        pos: MODEL_MAGIC.len(),
    };
    let n = r.u32()?;
    let num_actions = r.u32()?;
    let num_obs = r.u32()?;
    let feature_dim = r.u32()?;
    let b1 = DVector::from_vec(r.f64s(n)?);
    let b_inf = DVector::from_vec(r.f64s(n)?);
    let u = matrix_from_row_major(feature_dim, n, &r.f64s(feature_dim * n)?);
    let mut ops = Vec::with_capacity(num_actions);
    for _ in 0..num_actions {
        let mut per = Vec::with_capacity(num_obs);
        for _ in 0..num_obs {
            per.push(matrix_from_row_major(n, n, &r.f64s(n * n)?));
        }
        ops.push(per);
    }
    r.finish()?;
    TpsrModel::new(b1, b_inf, ops, u, feature_map_ref)
}

/// A matrix as a base64 blob of little-endian `f64`, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatrixBlob {
    pub rows: usize,
    pub cols: usize,
    pub data: String,
}

impl MatrixBlob {
    pub fn from_matrix(m: &DMatrix<f64>) -> Self {
        let mut bytes = Vec::with_capacity(8 * m.len());
        put_matrix_row_major(&mut bytes, m);
        Self {
            rows: m.nrows(),
            cols: m.ncols(),
            data: B64.encode(bytes),
        }
    }

    pub fn from_vector(v: &DVector<f64>) -> Self {
        let mut bytes = Vec::with_capacity(8 * v.len());
        put_f64s(&mut bytes, v.iter());
        Self {
            rows: v.len(),
            cols: 1,
            data: B64.encode(bytes),
        }
    }

    pub fn to_matrix(&self) -> Result<DMatrix<f64>> {
        let bytes = B64
            .decode(&self.data)
            .map_err(|e| Error::format(format!("bad base64 blob: {e}")))?;
        let mut r = Reader { buf: &bytes, pos: 0 };
        let data = r.f64s(self.rows * self.cols)?;
        r.finish()?;
        Ok(matrix_from_row_major(self.rows, self.cols, &data))
    }

    pub fn to_vector(&self) -> Result<DVector<f64>> {
        if self.cols != 1 {
            return Err(Error::format("blob is not a column vector"));
        }
        Ok(self.to_matrix()?.column(0).into_owned())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct KernelSetJson {
    window_len: usize,
    bandwidth: MatrixBlob,
    centers: MatrixBlob,
    whitening_mean: MatrixBlob,
    whitening_basis: MatrixBlob,
    whitening_scales: MatrixBlob,
}

impl KernelSetJson {
    fn from_kernels(k: &KernelSet) -> Self {
        Self {
            window_len: k.window_len,
            bandwidth: MatrixBlob::from_vector(&DVector::from_element(1, k.bandwidth)),
            centers: MatrixBlob::from_matrix(&k.centers),
            whitening_mean: MatrixBlob::from_vector(&k.whitening.mean),
            whitening_basis: MatrixBlob::from_matrix(&k.whitening.basis),
            whitening_scales: MatrixBlob::from_vector(&k.whitening.scales),
        }
    }

    fn to_kernels(&self) -> Result<KernelSet> {
        let whitening = WhiteningTransform {
            mean: self.whitening_mean.to_vector()?,
            basis: self.whitening_basis.to_matrix()?,
            scales: self.whitening_scales.to_vector()?,
        };
        KernelSet::new(
            self.centers.to_matrix()?,
            self.bandwidth.to_vector()?[0],
            whitening,
            self.window_len,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum WindowFeaturesJson {
    Kernel(KernelSetJson),
    Indicator {
        num_actions: usize,
        num_obs: usize,
        window_len: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum ObservationFeaturesJson {
    Kernel(KernelSetJson),
    OneHot { num_obs: usize },
}

/// Serialized form of a [`FeatureMap`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMapJson {
    obs_dim: usize,
    num_actions: usize,
    indicative: WindowFeaturesJson,
    characteristic: WindowFeaturesJson,
    observation: ObservationFeaturesJson,
}

fn window_json(w: &WindowFeatures) -> WindowFeaturesJson {
    match w {
        WindowFeatures::Kernel(k) => WindowFeaturesJson::Kernel(KernelSetJson::from_kernels(k)),
        WindowFeatures::Indicator {
            num_actions,
            num_obs,
            window_len,
        } => WindowFeaturesJson::Indicator {
            num_actions: *num_actions,
            num_obs: *num_obs,
            window_len: *window_len,
        },
    }
}

fn window_from_json(w: &WindowFeaturesJson) -> Result<WindowFeatures> {
    Ok(match w {
        WindowFeaturesJson::Kernel(k) => WindowFeatures::Kernel(k.to_kernels()?),
        WindowFeaturesJson::Indicator {
            num_actions,
            num_obs,
            window_len,
        } => WindowFeatures::Indicator {
            num_actions: *num_actions,
            num_obs: *num_obs,
            window_len: *window_len,
        },
    })
}

impl FeatureMapJson {
    pub fn from_feature_map(f: &FeatureMap) -> Self {
        Self {
            obs_dim: f.obs_dim,
            num_actions: f.num_actions,
            indicative: window_json(&f.indicative),
            characteristic: window_json(&f.characteristic),
            observation: match &f.observation {
                ObservationFeatures::Kernel(k) => ObservationFeaturesJson::Kernel(KernelSetJson::from_kernels(k)),
                ObservationFeatures::OneHot { num_obs } => ObservationFeaturesJson::OneHot { num_obs: *num_obs },
            },
        }
    }

    pub fn to_feature_map(&self) -> Result<FeatureMap> {
        Ok(FeatureMap {
            obs_dim: self.obs_dim,
            num_actions: self.num_actions,
            indicative: window_from_json(&self.indicative)?,
            characteristic: window_from_json(&self.characteristic)?,
            observation: match &self.observation {
                ObservationFeaturesJson::Kernel(k) => ObservationFeatures::Kernel(k.to_kernels()?),
                ObservationFeaturesJson::OneHot { num_obs } => ObservationFeatures::OneHot { num_obs: *num_obs },
            },
        })
    }
}

/// First 16 hex digits of the SHA-256 of the serialized feature map.
pub fn feature_map_reference(f: &FeatureMap) -> String {
    let blob = serde_json::to_vec(&FeatureMapJson::from_feature_map(f)).expect("feature map serializes");
    let digest = Sha256::digest(&blob);
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// Text sidecar stored next to a model file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSidecar {
    pub feature_map_ref: String,
    /// Free-form key/value provenance (tool version, seed, input files...).
    pub provenance: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_map: Option<FeatureMapJson>,
    /// History embedding `Uᵀ P_T,H`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<MatrixBlob>,
}

impl ModelSidecar {
    pub fn new(feature_map_ref: impl Into<String>) -> Self {
        Self {
            feature_map_ref: feature_map_ref.into(),
            provenance: BTreeMap::new(),
            feature_map: None,
            embedding: None,
        }
    }

    pub fn with_feature_map(mut self, f: &FeatureMap) -> Self {
        self.feature_map = Some(FeatureMapJson::from_feature_map(f));
        self
    }

    pub fn with_embedding(mut self, m: &DMatrix<f64>) -> Self {
        self.embedding = Some(MatrixBlob::from_matrix(m));
        self
    }

    /// The stored feature map, checked against the recorded reference.
    pub fn feature_map(&self) -> Result<Option<FeatureMap>> {
        match &self.feature_map {
            None => Ok(None),
            Some(j) => {
                let f = j.to_feature_map()?;
                let r = feature_map_reference(&f);
                if r != self.feature_map_ref {
                    return Err(Error::FeatureMapMismatch(format!(
                        "sidecar records {} but its feature map hashes to {r}",
                        self.feature_map_ref
                    )));
                }
                Ok(Some(f))
            }
        }
    }

    pub fn embedding(&self) -> Result<Option<DMatrix<f64>>> {
        self.embedding.as_ref().map(|b| b.to_matrix()).transpose()
    }
}

/// `<path>.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn save_model(path: &Path, model: &TpsrModel, sidecar: &ModelSidecar) -> Result<()> {
    if model.feature_map_ref() != sidecar.feature_map_ref {
        return Err(Error::FeatureMapMismatch(format!(
            "model is bound to {:?}, sidecar to {:?}",
            model.feature_map_ref(),
            sidecar.feature_map_ref
        )));
    }
    fs::write(path, model_to_bytes(model)?)?;
    write_json(&sidecar_path(path), sidecar)
}

pub fn load_model(path: &Path) -> Result<(TpsrModel, ModelSidecar)> {
    let sidecar: ModelSidecar = serde_json::from_slice(&fs::read(sidecar_path(path))?)?;
    let model = model_from_bytes(&fs::read(path)?, &sidecar.feature_map_ref)?;
    Ok((model, sidecar))
}

pub fn value_function_to_bytes(vf: &ValueFunction) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(VALUE_MAGIC);
    put_u32(&mut out, vf.len())?;
    put_u32(&mut out, vf.dim())?;
    for a in &vf.alphas {
        put_f64s(&mut out, a.iter());
    }
    for &t in &vf.actions {
        put_u32(&mut out, t)?;
    }
    Ok(out)
}

pub fn value_function_from_bytes(bytes: &[u8]) -> Result<ValueFunction> {
    if !bytes.starts_with(VALUE_MAGIC) {
        return Err(Error::format("not a value-function file (bad magic)"));
    }
    let mut r = Reader {
        buf: bytes,
        pos: VALUE_MAGIC.len(),
    };
    let count = r.u32()?;
    let n = r.u32()?;
    let alphas = (0..count)
        .map(|_| r.f64s(n).map(DVector::from_vec))
        .collect::<Result<Vec<_>>>()?;
    let actions = (0..count).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
    r.finish()?;
    ValueFunction::new(alphas, actions)
}

/// Text sidecar stored next to a value-function file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueSidecar {
    pub feature_map_ref: String,
    pub gamma: f64,
    /// Reward vectors η, one row per action.
    pub eta: MatrixBlob,
    pub provenance: BTreeMap<String, String>,
}

impl ValueSidecar {
    pub fn new(feature_map_ref: impl Into<String>, gamma: f64, rm: &RewardModel) -> Self {
        let n = rm.eta[0].len();
        let eta = DMatrix::from_fn(rm.eta.len(), n, |a, i| rm.eta[a][i]);
        Self {
            feature_map_ref: feature_map_ref.into(),
            gamma,
            eta: MatrixBlob::from_matrix(&eta),
            provenance: BTreeMap::new(),
        }
    }

    pub fn reward_model(&self) -> Result<RewardModel> {
        let m = self.eta.to_matrix()?;
        RewardModel::new((0..m.nrows()).map(|a| m.row(a).transpose()).collect())
    }
}

pub fn save_value_function(path: &Path, vf: &ValueFunction, sidecar: &ValueSidecar) -> Result<()> {
    fs::write(path, value_function_to_bytes(vf)?)?;
    write_json(&sidecar_path(path), sidecar)
}

pub fn load_value_function(path: &Path) -> Result<(ValueFunction, ValueSidecar)> {
    let sidecar: ValueSidecar = serde_json::from_slice(&fs::read(sidecar_path(path))?)?;
    let vf = value_function_from_bytes(&fs::read(path)?)?;
    Ok((vf, sidecar))
}

/// `index,value` rows, 1-based.
pub fn write_spectrum_csv<W: Write>(mut w: W, spectrum: &[f64]) -> Result<()> {
    writeln!(w, "index,value")?;
    for (i, s) in spectrum.iter().enumerate() {
        writeln!(w, "{},{}", i + 1, s)?;
    }
    Ok(())
}

/// One row per embedded history: state coordinates and an RGB tag.
pub fn write_embedding_csv<W: Write>(mut w: W, states: &[DVector<f64>], tags: &[[f64; 3]]) -> Result<()> {
    if states.len() != tags.len() {
        return Err(Error::dims("states and tags differ in count"));
    }
    let n = states.first().map_or(0, |s| s.len());
    let mut header = String::from("history");
    for i in 0..n {
        header.push_str(&format!(",x{}", i + 1));
    }
    header.push_str(",r,g,b");
    writeln!(w, "{header}")?;
    for (h, (s, t)) in states.iter().zip(tags).enumerate() {
        let mut line = h.to_string();
        for x in s.iter() {
            line.push_str(&format!(",{x}"));
        }
        line.push_str(&format!(",{},{},{}", t[0], t[1], t[2]));
        writeln!(w, "{line}")?;
    }
    Ok(())
}

/// Per-episode evaluation result.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRow {
    pub episode: usize,
    pub steps: usize,
    pub success: bool,
    pub discounted_return: f64,
}

pub fn write_episode_csv<W: Write>(mut w: W, rows: &[EpisodeRow]) -> Result<()> {
    writeln!(w, "episode,steps,success,discounted_return")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{}",
            r.episode,
            r.steps,
            u8::from(r.success),
            r.discounted_return
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_model() -> TpsrModel {
        let ops = vec![
            vec![
                DMatrix::from_row_slice(2, 2, &[0.1, 0.2, 0.3, 0.4]),
                DMatrix::from_row_slice(2, 2, &[0.5, -0.25, 1.0 / 3.0, 0.0]),
            ];
            3
        ];
        TpsrModel::new(
            DVector::from_vec(vec![0.7, -1e-300]),
            DVector::from_vec(vec![1.0, 2.0]),
            ops,
            DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]),
            "abc",
        )
        .unwrap()
    }

    #[test]
    fn model_bytes_round_trip() {
        let m = small_model();
        let bytes = model_to_bytes(&m).unwrap();
        assert_eq!(&bytes[..5], b"TPSR1");
        assert_eq!(bytes.len(), 5 + 16 + 8 * (2 + 2 + 6 + 6 * 4));
        assert_eq!(model_from_bytes(&bytes, "abc").unwrap(), m);
        assert!(model_from_bytes(&bytes[..bytes.len() - 1], "abc").is_err());
        assert!(model_from_bytes(b"TPSR2", "abc").is_err());
    }

    #[test]
    fn value_bytes_round_trip() {
        let vf = ValueFunction::new(
            vec![DVector::from_vec(vec![1.5, -2.0]), DVector::from_vec(vec![0.1, 0.2])],
            vec![3, 0],
        )
        .unwrap();
        let bytes = value_function_to_bytes(&vf).unwrap();
        assert_eq!(value_function_from_bytes(&bytes).unwrap(), vf);
    }

    #[test]
    fn blob_round_trip() {
        let m = DMatrix::from_fn(3, 4, |r, c| (r as f64 + 0.1).powf(c as f64 * 1.7) - 0.3);
        assert_eq!(MatrixBlob::from_matrix(&m).to_matrix().unwrap(), m);
    }

    #[test]
    fn reference_is_stable_and_sensitive() {
        let a = FeatureMap::indicator(2, 3, 1, 1);
        let b = FeatureMap::indicator(2, 3, 1, 2);
        assert_eq!(a.reference(), FeatureMap::indicator(2, 3, 1, 1).reference());
        assert_ne!(a.reference(), b.reference());
        assert_eq!(a.reference().len(), 16);
    }

    #[test]
    fn csv_layouts() {
        let mut buf = Vec::new();
        write_spectrum_csv(&mut buf, &[3.0, 0.5]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "index,value\n1,3\n2,0.5\n");
        let mut buf = Vec::new();
        write_episode_csv(
            &mut buf,
            &[EpisodeRow {
                episode: 0,
                steps: 12,
                success: true,
                discounted_return: 68.7,
            }],
        )
        .unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "episode,steps,success,discounted_return\n0,12,1,68.7\n"
        );
    }
}
