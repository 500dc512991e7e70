use crate::{Error, Result, Tensor};

/// Named slice of a flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub name: String,
    pub offset: usize,
    pub len: usize,
    /// Shape the segment is viewed as when unpacked (e.g. a weight matrix).
    pub shape: Vec<usize>,
}

/// All trainable parameters of a model as one flat f64 vector with a
/// segment manifest. Segments are disjoint and cover the vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterVector {
    data: Vec<f64>,
    segments: Vec<Segment>,
}

impl ParameterVector {
    pub fn new(data: Vec<f64>, segments: Vec<Segment>) -> Result<Self> {
        let mut cursor = 0;
        for seg in &segments {
            if seg.offset != cursor {
                return Err(Error::BadSegments {
                    reason: format!(
                        "segment {:?} starts at {} but previous ended at {}",
                        seg.name, seg.offset, cursor
                    ),
                });
            }
            let numel: usize = seg.shape.iter().product();
            if numel != seg.len {
                return Err(Error::BadSegments {
                    reason: format!("segment {:?} shape does not match its length", seg.name),
                });
            }
            cursor += seg.len;
        }
        if cursor != data.len() {
            return Err(Error::BadSegments {
                reason: format!("segments cover {} values, vector has {}", cursor, data.len()),
            });
        }
        Ok(Self { data, segments })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn segment(&self, name: &str) -> Result<&Segment> {
        self.segments
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| Error::UnknownSegment { name: name.into() })
    }

    pub fn segment_values(&self, name: &str) -> Result<Tensor> {
        let seg = self.segment(name)?;
        Tensor::new(
            seg.shape.clone(),
            self.data[seg.offset..seg.offset + seg.len].to_vec(),
        )
    }

    pub fn segment_values_mut(&mut self, name: &str) -> Result<&mut [f64]> {
        let seg = self.segment(name)?.clone();
        Ok(&mut self.data[seg.offset..seg.offset + seg.len])
    }

    pub fn as_tensor(&self) -> Tensor {
        Tensor::vector(self.data.clone())
    }

    pub fn set_from(&mut self, values: &[f64]) {
        self.data.copy_from_slice(values);
    }
}

/// Incremental builder used by models to lay out their segments.
#[derive(Debug, Default)]
pub struct ParameterLayout {
    data: Vec<f64>,
    segments: Vec<Segment>,
}

impl ParameterLayout {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, values: Vec<f64>) {
        let numel: usize = shape.iter().product();
        assert_eq!(numel, values.len(), "segment values must match shape");
        self.segments.push(Segment {
            name: name.into(),
            offset: self.data.len(),
            len: values.len(),
            shape,
        });
        self.data.extend_from_slice(&values);
    }

    pub fn finish(self) -> ParameterVector {
        ParameterVector::new(self.data, self.segments).expect("builder produces valid segments")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pack_unpack_round_trip() {
        let mut layout = ParameterLayout::new();
        layout.push("w", vec![2, 2], vec![1., 2., 3., 4.]);
        layout.push("b", vec![2], vec![5., 6.]);
        let params = layout.finish();
        assert_eq!(params.len(), 6);
        let w = params.segment_values("w").unwrap();
        assert_eq!(w.shape(), &[2, 2]);
        assert_eq!(w.data(), &[1., 2., 3., 4.]);
        let b = params.segment_values("b").unwrap();
        assert_eq!(b.data(), &[5., 6.]);
    }

    #[test]
    fn gaps_rejected() {
        let seg = |name: &str, offset, len| Segment {
            name: name.into(),
            offset,
            len,
            shape: vec![len],
        };
        let err = ParameterVector::new(vec![0.0; 4], vec![seg("a", 0, 2), seg("b", 3, 1)]);
        assert!(err.is_err());
    }
}
