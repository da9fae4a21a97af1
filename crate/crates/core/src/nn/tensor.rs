use super::NnError;

/// Dense row-major tensor of `f64` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, rejecting empty shapes, zero-length dims and
    /// data whose length disagrees with the shape.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, NnError> {
        let expected = checked_numel(&shape)?;
        if data.len() != expected {
            return Err(NnError::Shape(format!(
                "tensor of shape {:?} needs {} values, got {}",
                shape,
                expected,
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn into_parts(self) -> (Vec<usize>, Vec<f64>) {
        (self.shape, self.data)
    }
}

/// Number of elements for a shape; every dim must be at least 1.
pub fn checked_numel(shape: &[usize]) -> Result<usize, NnError> {
    if shape.is_empty() {
        return Err(NnError::Shape("tensor rank must be at least 1".into()));
    }
    let mut n: usize = 1;
    for &d in shape {
        if d == 0 {
            return Err(NnError::Shape(format!(
                "zero-length dimension in shape {shape:?}"
            )));
        }
        n = n
            .checked_mul(d)
            .ok_or_else(|| NnError::Shape(format!("shape {shape:?} overflows")))?;
    }
    Ok(n)
}

fn shapes_match(a: &[Tensor], b: &[Tensor]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.shape == y.shape)
}

fn flatten_all(tensors: &[Tensor]) -> Vec<f64> {
    let mut out = Vec::with_capacity(tensors.iter().map(Tensor::len).sum());
    for t in tensors {
        out.extend_from_slice(&t.data);
    }
    out
}

fn unflatten_all(shapes: &[Vec<usize>], flat: &[f64]) -> Result<Vec<Tensor>, NnError> {
    let mut tensors = Vec::with_capacity(shapes.len());
    let mut offset = 0;
    for shape in shapes {
        let n = checked_numel(shape)?;
        let end = offset + n;
        if end > flat.len() {
            return Err(NnError::Shape(format!(
                "flat buffer of {} values too short for shapes {shapes:?}",
                flat.len()
            )));
        }
        tensors.push(Tensor::new(shape.clone(), flat[offset..end].to_vec())?);
        offset = end;
    }
    if offset != flat.len() {
        return Err(NnError::Shape(format!(
            "flat buffer has {} trailing values",
            flat.len() - offset
        )));
    }
    Ok(tensors)
}

/// The model parameters held by a master or worker, stamped with the
/// update count of the master that issued them.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct WeightSet {
    pub tensors: Vec<Tensor>,
    pub version: u64,
}

impl WeightSet {
    pub fn new(tensors: Vec<Tensor>, version: u64) -> Self {
        Self { tensors, version }
    }

    pub fn zeros(shapes: &[Vec<usize>]) -> Self {
        Self {
            tensors: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            version: 0,
        }
    }

    pub fn shapes(&self) -> Vec<Vec<usize>> {
        self.tensors.iter().map(|t| t.shape.clone()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        flatten_all(&self.tensors)
    }

    pub fn unflatten(shapes: &[Vec<usize>], flat: &[f64], version: u64) -> Result<Self, NnError> {
        Ok(Self {
            tensors: unflatten_all(shapes, flat)?,
            version,
        })
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data.iter().all(|x| x.is_finite()))
    }

    pub fn congruent_with(&self, other: &[Tensor]) -> bool {
        shapes_match(&self.tensors, other)
    }

    /// Largest absolute coordinate difference to `other`.
    pub fn max_abs_diff(&self, other: &WeightSet) -> f64 {
        self.flatten()
            .iter()
            .zip(other.flatten())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Gradient of the loss with respect to every tensor of a [`WeightSet`],
/// remembering the weight version it was computed against.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub tensors: Vec<Tensor>,
    pub basis_version: u64,
}

impl Gradient {
    pub fn new(tensors: Vec<Tensor>, basis_version: u64) -> Self {
        Self {
            tensors,
            basis_version,
        }
    }

    pub fn zeros_like(w: &WeightSet) -> Self {
        Self {
            tensors: w.tensors.iter().map(|t| Tensor::zeros(&t.shape)).collect(),
            basis_version: w.version,
        }
    }

    pub fn shapes(&self) -> Vec<Vec<usize>> {
        self.tensors.iter().map(|t| t.shape.clone()).collect()
    }

    pub fn flatten(&self) -> Vec<f64> {
        flatten_all(&self.tensors)
    }

    pub fn unflatten(
        shapes: &[Vec<usize>],
        flat: &[f64],
        basis_version: u64,
    ) -> Result<Self, NnError> {
        Ok(Self {
            tensors: unflatten_all(shapes, flat)?,
            basis_version,
        })
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data.iter().all(|x| x.is_finite()))
    }

    pub fn congruent_with(&self, w: &WeightSet) -> bool {
        shapes_match(&self.tensors, &w.tensors)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_zero_dims_and_bad_lengths() {
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
        assert!(Tensor::new(vec![], vec![]).is_err());
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![2, 2], vec![1.0; 4]).is_ok());
    }

    #[test]
    fn unflatten_rejects_wrong_length() {
        let shapes = vec![vec![2, 2], vec![3]];
        assert!(WeightSet::unflatten(&shapes, &[0.0; 6], 0).is_err());
        assert!(WeightSet::unflatten(&shapes, &[0.0; 8], 0).is_err());
    }

    proptest! {
        #[test]
        fn flatten_unflatten_round_trips(
            shapes in prop::collection::vec(prop::collection::vec(1usize..4, 1..3), 1..4),
            seed in any::<u64>(),
        ) {
            let n: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
            let flat: Vec<f64> = (0..n)
                .map(|i| ((seed.wrapping_add(i as u64)) as f64).sin() * 1e3)
                .collect();
            let w = WeightSet::unflatten(&shapes, &flat, 3).unwrap();
            prop_assert_eq!(w.flatten(), flat.clone());
            let again = WeightSet::unflatten(&w.shapes(), &w.flatten(), 3).unwrap();
            prop_assert_eq!(again, w);
        }
    }
}
