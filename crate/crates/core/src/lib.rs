//! Hybrid physics/neural simulation of implicit gray-box systems.
//!
//! Device equations and trained network macromodels share one unknown vector
//! and are solved together, by damped Newton-Raphson at steady state and by
//! trapezoidal integration in time.

// `!(x > 0.0)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod devices;
pub mod graybox;
pub mod netlist;
pub mod neural;
pub mod numlin;
pub mod solvers;
