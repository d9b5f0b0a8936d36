use crate::error::{Error, Result};
use crate::numerics::RealMatrix;

/// Ordered collection of uniquely named parameter blocks.
///
/// Used both for parameters and for gradients; two vectors are compatible
/// when they have the same segment names, order and shapes.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamVector {
    segments: Vec<(String, RealMatrix)>,
}

impl ParamVector {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: RealMatrix) -> Result<()> {
        let name = name.into();
        if self.get(&name).is_some() {
            return Err(Error::DuplicateSegment(name));
        }
        self.segments.push((name, value));
        Ok(())
    }

    pub fn with(mut self, name: impl Into<String>, value: RealMatrix) -> Result<Self> {
        self.push(name, value)?;
        Ok(self)
    }

    pub fn get(&self, name: &str) -> Option<&RealMatrix> {
        self.segments
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, m)| m)
    }

    #[cfg(test)]
    pub(crate) fn get_mut(&mut self, name: &str) -> Option<&mut RealMatrix> {
        self.segments
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, m)| m)
    }

    pub fn require(&self, name: &str) -> Result<&RealMatrix> {
        self.get(name)
            .ok_or_else(|| Error::UnknownSegment(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &RealMatrix)> {
        self.segments.iter().map(|(n, m)| (n.as_str(), m))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.segments.iter().map(|(n, _)| n.as_str())
    }

    pub fn num_segments(&self) -> usize {
        self.segments.len()
    }

    /// Total number of scalar coordinates.
    pub fn dim(&self) -> usize {
        self.segments.iter().map(|(_, m)| m.len()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.dim());
        for (_, m) in &self.segments {
            out.extend_from_slice(m.data());
        }
        out
    }

    /// Rebuilds a vector shaped like `self` from flat coordinates.
    pub fn unflatten(&self, flat: &[f64]) -> Result<ParamVector> {
        if flat.len() != self.dim() {
            return Err(Error::ShapeMismatch(format!(
                "{} flat values for a parameter vector of dimension {}",
                flat.len(),
                self.dim()
            )));
        }
        let mut offset = 0;
        let mut segments = Vec::with_capacity(self.segments.len());
        for (name, m) in &self.segments {
            let data = flat[offset..offset + m.len()].to_vec();
            offset += m.len();
            segments.push((name.clone(), RealMatrix::new(m.rows(), m.cols(), data)?));
        }
        Ok(ParamVector { segments })
    }

    pub fn zeros_like(&self) -> ParamVector {
        ParamVector {
            segments: self
                .segments
                .iter()
                .map(|(n, m)| (n.clone(), RealMatrix::zeros(m.rows(), m.cols())))
                .collect(),
        }
    }

    pub fn check_compatible(&self, other: &ParamVector) -> Result<()> {
        if self.segments.len() != other.segments.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} segments vs {}",
                self.segments.len(),
                other.segments.len()
            )));
        }
        for ((na, ma), (nb, mb)) in self.segments.iter().zip(&other.segments) {
            if na != nb || !ma.same_shape(mb) {
                return Err(Error::ShapeMismatch(format!(
                    "segment `{na}` {:?} vs `{nb}` {:?}",
                    ma.shape(),
                    mb.shape()
                )));
            }
        }
        Ok(())
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &ParamVector) -> Result<()> {
        self.check_compatible(other)?;
        for ((_, a), (_, b)) in self.segments.iter_mut().zip(&other.segments) {
            a.axpy(alpha, b);
        }
        Ok(())
    }

    pub fn scaled(&self, alpha: f64) -> ParamVector {
        ParamVector {
            segments: self
                .segments
                .iter()
                .map(|(n, m)| (n.clone(), m.scaled(alpha)))
                .collect(),
        }
    }

    pub fn norm(&self) -> f64 {
        self.segments
            .iter()
            .map(|(_, m)| m.data().iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.segments
            .iter()
            .fold(0.0, |a, (_, m)| a.max(m.max_abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.segments.iter().all(|(_, m)| m.is_finite())
    }

    /// Splits into (segments named in `names`, the rest), preserving order.
    pub fn split(&self, names: &[&str]) -> (ParamVector, ParamVector) {
        let mut picked = ParamVector::new();
        let mut rest = ParamVector::new();
        for (n, m) in &self.segments {
            let target = if names.contains(&n.as_str()) {
                &mut picked
            } else {
                &mut rest
            };
            target.segments.push((n.clone(), m.clone()));
        }
        (picked, rest)
    }

    /// Keeps only the segments named in `names`, in `self`'s order.
    pub fn select(&self, names: &[&str]) -> ParamVector {
        self.split(names).0
    }

    /// Concatenates two vectors with disjoint segment names.
    pub fn concat(&self, other: &ParamVector) -> Result<ParamVector> {
        let mut out = self.clone();
        for (n, m) in &other.segments {
            out.push(n.clone(), m.clone())?;
        }
        Ok(out)
    }

    /// Locates flat coordinate `index` as (segment index, offset).
    pub fn locate(&self, mut index: usize) -> Option<(usize, usize)> {
        for (s, (_, m)) in self.segments.iter().enumerate() {
            if index < m.len() {
                return Some((s, index));
            }
            index -= m.len();
        }
        None
    }

    pub(crate) fn segment_data_mut(&mut self, segment: usize) -> &mut [f64] {
        self.segments[segment].1.data_mut()
    }

    pub fn segment_name(&self, segment: usize) -> &str {
        &self.segments[segment].0
    }
}

/// Sum over all segments of elementwise products.
pub fn inner(a: &ParamVector, b: &ParamVector) -> Result<f64> {
    a.check_compatible(b)?;
    let mut total = 0.0;
    for ((_, ma), (_, mb)) in a.segments.iter().zip(&b.segments) {
        total += ma.frobenius(mb)?;
    }
    Ok(total)
}
