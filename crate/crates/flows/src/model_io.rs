use crate::{BnafModel, BnafSpec, Error, Result, SplineFlowModel, SplineFlowSpec, Standardizer};
use rnpe_autodiff::{ParameterVector, Segment};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"RNPEFLW1";
const FORMAT: &str = "rnpe-flow-v1";

#[derive(Debug, Serialize, Deserialize)]
struct SegmentInfo {
    name: String,
    offset: usize,
    len: usize,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct FlowHeader {
    format: String,
    kind: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    spline_spec: Option<SplineFlowSpec>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    bnaf_spec: Option<BnafSpec>,
    input_standardizer: Standardizer,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    context_standardizer: Option<Standardizer>,
    segments: Vec<SegmentInfo>,
    param_count: usize,
}

fn segments_info(params: &ParameterVector) -> Vec<SegmentInfo> {
    params
        .segments()
        .iter()
        .map(|s| SegmentInfo {
            name: s.name.clone(),
            offset: s.offset,
            len: s.len,
            shape: s.shape.clone(),
        })
        .collect()
}

fn write_model(path: &Path, header: &FlowHeader, params: &ParameterVector) -> Result<()> {
    let header_bytes = serde_json::to_vec(header)?;
    let mut file = std::fs::File::create(path)?;
    file.write_all(MAGIC)?;
    file.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    file.write_all(&header_bytes)?;
    let mut blob = Vec::with_capacity(params.len() * 8);
    for v in params.data() {
        blob.extend_from_slice(&v.to_le_bytes());
    }
    file.write_all(&blob)?;
    Ok(())
}

fn read_model(path: &Path) -> Result<(FlowHeader, ParameterVector)> {
    let mut file = std::fs::File::open(path)?;
    let mut magic = [0u8; 8];
    file.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::BadModelFile {
            reason: "bad magic bytes".into(),
        });
    }
    let mut len_bytes = [0u8; 8];
    file.read_exact(&mut len_bytes)?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    file.read_exact(&mut header_bytes)?;
    let header: FlowHeader = serde_json::from_slice(&header_bytes)?;
    if header.format != FORMAT {
        return Err(Error::BadModelFile {
            reason: format!("unsupported format tag {:?}", header.format),
        });
    }
    let mut blob = Vec::new();
    file.read_to_end(&mut blob)?;
    if blob.len() != header.param_count * 8 {
        return Err(Error::BadModelFile {
            reason: format!(
                "parameter blob has {} bytes, expected {}",
                blob.len(),
                header.param_count * 8
            ),
        });
    }
    let data: Vec<f64> = blob
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let segments: Vec<Segment> = header
        .segments
        .iter()
        .map(|s| Segment {
            name: s.name.clone(),
            offset: s.offset,
            len: s.len,
            shape: s.shape.clone(),
        })
        .collect();
    let params = ParameterVector::new(data, segments).map_err(|e| Error::BadModelFile {
        reason: format!("segment manifest invalid: {e}"),
    })?;
    Ok((header, params))
}

pub fn save_spline_flow(path: impl AsRef<Path>, model: &SplineFlowModel) -> Result<()> {
    let header = FlowHeader {
        format: FORMAT.into(),
        kind: "spline".into(),
        spline_spec: Some(model.spec.clone()),
        bnaf_spec: None,
        input_standardizer: model.input_standardizer.clone(),
        context_standardizer: Some(model.context_standardizer.clone()),
        segments: segments_info(&model.params),
        param_count: model.params.len(),
    };
    write_model(path.as_ref(), &header, &model.params)
}

pub fn load_spline_flow(path: impl AsRef<Path>) -> Result<SplineFlowModel> {
    let (header, params) = read_model(path.as_ref())?;
    let spec = header.spline_spec.ok_or_else(|| Error::BadModelFile {
        reason: format!("expected a spline flow, found kind {:?}", header.kind),
    })?;
    Ok(SplineFlowModel {
        spec,
        params,
        input_standardizer: header.input_standardizer,
        context_standardizer: header.context_standardizer.ok_or_else(|| {
            Error::BadModelFile {
                reason: "spline flow file missing context standardizer".into(),
            }
        })?,
    })
}

pub fn save_bnaf(path: impl AsRef<Path>, model: &BnafModel) -> Result<()> {
    let header = FlowHeader {
        format: FORMAT.into(),
        kind: "bnaf".into(),
        spline_spec: None,
        bnaf_spec: Some(model.spec.clone()),
        input_standardizer: model.standardizer.clone(),
        context_standardizer: None,
        segments: segments_info(&model.params),
        param_count: model.params.len(),
    };
    write_model(path.as_ref(), &header, &model.params)
}

pub fn load_bnaf(path: impl AsRef<Path>) -> Result<BnafModel> {
    let (header, params) = read_model(path.as_ref())?;
    let spec = header.bnaf_spec.ok_or_else(|| Error::BadModelFile {
        reason: format!("expected a block autoregressive flow, found {:?}", header.kind),
    })?;
    Ok(BnafModel {
        spec,
        params,
        standardizer: header.input_standardizer,
    })
}
