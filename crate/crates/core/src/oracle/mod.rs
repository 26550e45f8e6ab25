//! Independent evaluation paths used to check the production code.
//!
//! [`reference`] is a deliberately naive transcription of the model, generic
//! over the scalar type, so the finite-difference checker can evaluate
//! losses in double-double precision ([`dd`]).

pub mod dd;
pub mod reference;
