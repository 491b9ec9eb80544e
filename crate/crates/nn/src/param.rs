//! Named parameter storage shared by every layer.

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

/// A named tensor owned by a layer.
///
/// Trainable parameters carry a gradient buffer of the same length. Buffers
/// (batch-norm running statistics) are persisted with the parameters but are
/// never touched by the optimizer.
///
/// The element type defaults to `f32`; other float types exist for
/// high-precision checks of small layers.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T = f32> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<T>,
    pub grad: Vec<T>,
    pub trainable: bool,
}

impl<T: Copy + Default> Param<T> {
    pub fn new(name: impl Into<String>, shape: &[usize], value: Vec<T>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), value.len());
        let grad = vec![T::default(); value.len()];
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            value,
            grad,
            trainable: true,
        }
    }

    pub fn buffer(name: impl Into<String>, shape: &[usize], value: Vec<T>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), value.len());
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            value,
            grad: Vec::new(),
            trainable: false,
        }
    }

    pub fn filled(name: impl Into<String>, shape: &[usize], v: T) -> Self {
        Self::new(name, shape, vec![v; shape.iter().product()])
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::default());
    }
}

impl Param<f32> {
    /// Kaiming-normal initialisation with fan-out scaling, as used for
    /// EfficientNet convolutions.
    pub fn kaiming_normal_fan_out(
        name: impl Into<String>,
        shape: &[usize],
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let std = (2.0 / fan_out as f32).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        let n = shape.iter().product();
        let value = (0..n).map(|_| normal.sample(rng)).collect();
        Self::new(name, shape, value)
    }

    pub fn uniform(name: impl Into<String>, shape: &[usize], bound: f32, rng: &mut impl Rng) -> Self {
        let n = shape.iter().product();
        let value = if bound > 0.0 {
            let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
            (0..n).map(|_| dist.sample(rng)).collect()
        } else {
            vec![0.0; n]
        };
        Self::new(name, shape, value)
    }

    pub fn sq_norm(&self) -> f64 {
        self.value.iter().map(|&v| (v as f64) * (v as f64)).sum()
    }
}

/// Anything that owns parameters.
pub trait Module {
    fn collect<'a>(&'a self, out: &mut Vec<&'a Param>);
    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>);

    fn params(&self) -> Vec<&Param> {
        let mut out = Vec::new();
        self.collect(&mut out);
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = Vec::new();
        self.collect_mut(&mut out);
        out
    }

    fn trainable_count(&self) -> usize {
        self.params()
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.len())
            .sum()
    }

    fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }
}
