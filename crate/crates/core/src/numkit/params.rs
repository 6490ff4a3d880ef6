use crate::numkit::matrix::{dot, norm, Matrix};
use crate::{ensure, Result};

/// Name and shape of one block inside a [`ParamVector`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segment {
    pub name: String,
    pub shape: (usize, usize),
    offset: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.shape.0 * self.shape.1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Named matrices flattened into one contiguous vector.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector {
    segments: Vec<Segment>,
    values: Vec<f64>,
}

impl ParamVector {
    pub fn new() -> Self {
        Self {
            segments: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn from_matrices<'a, I>(parts: I) -> Self
    where
        I: IntoIterator<Item = (String, &'a Matrix)>,
    {
        let mut out = Self::new();
        for (name, m) in parts {
            out.push(name, m);
        }
        out
    }

    pub fn push(&mut self, name: impl Into<String>, m: &Matrix) {
        self.segments.push(Segment {
            name: name.into(),
            shape: m.shape(),
            offset: self.values.len(),
        });
        self.values.extend_from_slice(m.data());
    }

    /// Same layout as `self`, all values zero.
    pub fn zeros_like(&self) -> Self {
        Self {
            segments: self.segments.clone(),
            values: vec![0.0; self.values.len()],
        }
    }

    /// Same layout as `self` with new flat values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        ensure!(
            values.len() == self.values.len(),
            Dimension,
            "{} values for a parameter vector of length {}",
            values.len(),
            self.values.len()
        );
        Ok(Self {
            segments: self.segments.clone(),
            values,
        })
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn same_layout(&self, other: &ParamVector) -> bool {
        self.segments == other.segments
    }

    pub fn segment(&self, name: &str) -> Option<&Segment> {
        self.segments.iter().find(|s| s.name == name)
    }

    pub fn slice(&self, name: &str) -> Result<&[f64]> {
        let seg = self
            .segment(name)
            .ok_or_else(|| crate::Error::Contract(format!("no segment named {name}")))?;
        Ok(&self.values[seg.range()])
    }

    pub fn slice_mut(&mut self, name: &str) -> Result<&mut [f64]> {
        let range = self
            .segment(name)
            .ok_or_else(|| crate::Error::Contract(format!("no segment named {name}")))?
            .range();
        Ok(&mut self.values[range])
    }

    /// Unflattens one segment.
    pub fn matrix(&self, name: &str) -> Result<Matrix> {
        let seg = self
            .segment(name)
            .ok_or_else(|| crate::Error::Contract(format!("no segment named {name}")))?;
        Matrix::from_vec(seg.shape.0, seg.shape.1, self.values[seg.range()].to_vec())
    }

    /// Unflattens every segment, in order.
    pub fn matrices(&self) -> Vec<(String, Matrix)> {
        self.segments
            .iter()
            .map(|s| {
                let m = Matrix::from_vec(s.shape.0, s.shape.1, self.values[s.range()].to_vec())
                    .expect("segment shape matches its range");
                (s.name.clone(), m)
            })
            .collect()
    }

    pub fn norm(&self) -> f64 {
        norm(&self.values)
    }

    pub fn dot(&self, other: &ParamVector) -> f64 {
        dot(&self.values, &other.values)
    }

    /// `self += c · other`.
    pub fn axpy(&mut self, c: f64, other: &ParamVector) -> Result<()> {
        ensure!(
            self.values.len() == other.values.len(),
            Dimension,
            "axpy on lengths {} and {}",
            self.values.len(),
            other.values.len()
        );
        for (a, &b) in self.values.iter_mut().zip(&other.values) {
            *a += c * b;
        }
        Ok(())
    }

    pub fn scaled(&self, c: f64) -> ParamVector {
        Self {
            segments: self.segments.clone(),
            values: self.values.iter().map(|v| v * c).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Order-sensitive hash of the exact bit patterns; used to detect stale caches.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in &self.values {
            h ^= v.to_bits();
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h ^ self.values.len() as u64
    }
}

impl Default for ParamVector {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn flatten_unflatten_is_identity(
            r1 in 1usize..5, c1 in 1usize..5, r2 in 1usize..5, c2 in 1usize..5,
            seed in any::<u64>()
        ) {
            let mut rng = crate::numkit::Rng::new(seed);
            let a = rng.gaussian_matrix(r1, c1);
            let b = rng.gaussian_matrix(r2, c2);
            let pv = ParamVector::from_matrices([("a".to_string(), &a), ("b".to_string(), &b)]);
            prop_assert_eq!(pv.len(), r1 * c1 + r2 * c2);
            let back = pv.matrices();
            prop_assert_eq!(&back[0].1, &a);
            prop_assert_eq!(&back[1].1, &b);
            let rebuilt = ParamVector::from_matrices(back.iter().map(|(n, m)| (n.clone(), m)));
            prop_assert_eq!(rebuilt, pv);
        }
    }

    #[test]
    fn missing_segment_is_an_error() {
        let pv = ParamVector::from_matrices([("w".to_string(), &Matrix::zeros(1, 1))]);
        assert!(pv.matrix("v").is_err());
        assert!(pv.with_values(vec![1.0, 2.0]).is_err());
    }
}
