//! Reverse-mode differentiation and the finite-difference gradient gate.

mod gradcheck;
mod params;
mod tape;

pub use gradcheck::{append_csv, grad_check, relative_error, GradReport};
pub use params::{backward, evaluate, ParamVars, ParamVector, Slot};
pub use tape::{logit, sigmoid, softplus, softplus_inv, Gradients, Shape, Tape, Var};

pub(crate) use tape::{BackwardFn, GradStore};

use crate::field::{ColorField, ScalarField};

/// Loads a scalar field as a `[1,h,w]` constant.
pub fn scalar_const(tape: &mut Tape, f: &ScalarField) -> Var {
    tape.constant(f.data.clone(), Shape::plane(f.height, f.width))
}

/// Loads a color field as a planar `[3,h,w]` constant.
pub fn color_const(tape: &mut Tape, f: &ColorField) -> Var {
    tape.constant(f.to_planar(), Shape::new(3, f.height, f.width))
}

pub fn to_scalar_field(tape: &Tape, v: Var) -> ScalarField {
    let s = tape.shape(v);
    assert_eq!(s.c, 1, "expected a single-channel tensor");
    ScalarField { width: s.w, height: s.h, data: tape.value(v).to_vec() }
}

pub fn to_color_field(tape: &Tape, v: Var) -> ColorField {
    let s = tape.shape(v);
    assert_eq!(s.c, 3, "expected a three-channel tensor");
    ColorField::from_planar(s.w, s.h, tape.value(v))
}
