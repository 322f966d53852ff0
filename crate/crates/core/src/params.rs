//! Flat parameter vectors with a named-segment layout map.
//!
//! Every model in the crate keeps its parameters in one flat `Vec<f64>`.
//! SGLD, the localization term ||w - w*||², and checkpoint I/O all operate
//! on the flat view; models address their weight matrices by segment name.

use crate::error::{CoreError, Result};
use std::collections::BTreeMap;
use std::sync::Arc;

/// One named segment of a flat parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentSpec {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl SegmentSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Ordered, contiguous, non-overlapping segments covering `0..total`.
#[derive(Clone, Debug)]
pub struct Layout {
    segments: Vec<SegmentSpec>,
    by_name: BTreeMap<String, usize>,
    total: usize,
}

impl Layout {
    pub fn new(specs: Vec<(String, Vec<usize>)>) -> Result<Layout> {
        let mut segments = Vec::with_capacity(specs.len());
        let mut by_name = BTreeMap::new();
        let mut offset = 0usize;
        for (name, shape) in specs {
            if by_name.insert(name.clone(), segments.len()).is_some() {
                return Err(CoreError::shape(format!("duplicate segment `{name}`")));
            }
            let seg = SegmentSpec {
                name,
                offset,
                shape,
            };
            offset += seg.len();
            segments.push(seg);
        }
        Ok(Layout {
            segments,
            by_name,
            total: offset,
        })
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn segments(&self) -> &[SegmentSpec] {
        &self.segments
    }

    pub fn segment(&self, name: &str) -> Result<&SegmentSpec> {
        self.by_name
            .get(name)
            .map(|&i| &self.segments[i])
            .ok_or_else(|| CoreError::shape(format!("unknown segment `{name}`")))
    }

    /// Index range of a segment within the flat vector.
    pub fn range(&self, name: &str) -> Result<std::ops::Range<usize>> {
        let seg = self.segment(name)?;
        Ok(seg.offset..seg.offset + seg.len())
    }

    /// Name of the segment containing flat index `i`, for error reporting.
    pub fn segment_at(&self, i: usize) -> Option<&str> {
        self.segments
            .iter()
            .find(|s| i >= s.offset && i < s.offset + s.len())
            .map(|s| s.name.as_str())
    }

    /// Layouts are interchangeable when their segment lists match.
    pub fn same_as(&self, other: &Layout) -> bool {
        self.segments == other.segments
    }
}

/// A flat array of model parameters plus its layout map.
#[derive(Clone, Debug)]
pub struct ParameterVector {
    pub values: Vec<f64>,
    pub layout: Arc<Layout>,
}

impl ParameterVector {
    /// Build and validate: length matches the layout and all values finite.
    pub fn new(values: Vec<f64>, layout: Arc<Layout>) -> Result<Self> {
        if values.len() != layout.total() {
            return Err(CoreError::shape(format!(
                "parameter length {} does not match layout total {}",
                values.len(),
                layout.total()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            let seg = layout.segment_at(i).unwrap_or("<none>").to_string();
            return Err(CoreError::NonFinite { location: seg });
        }
        Ok(ParameterVector { values, layout })
    }

    pub fn zeros(layout: Arc<Layout>) -> Self {
        ParameterVector {
            values: vec![0.0; layout.total()],
            layout,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn segment(&self, name: &str) -> Result<&[f64]> {
        Ok(&self.values[self.layout.range(name)?])
    }

    pub fn segment_mut(&mut self, name: &str) -> Result<&mut [f64]> {
        let r = self.layout.range(name)?;
        Ok(&mut self.values[r])
    }
}
