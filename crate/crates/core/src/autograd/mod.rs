//! Minimal reverse-mode automatic differentiation used to train the model.
//!
//! Generic over the float type so the same network code runs in f32 for
//! training and in f64 for finite-difference verification.

mod graph;
pub mod nn;
mod params;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::AddAssign;

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive};

pub use graph::{Gradients, Graph, Var};
pub use params::{ParamId, ParamStore};

pub trait Scalar:
    LinalgScalar + Float + FromPrimitive + ScalarOperand + AddAssign + Sum + Debug + Display + Send + Sync + 'static
{
}

impl Scalar for f32 {}
impl Scalar for f64 {}
