// NaN-rejecting `!(x > 0.0)` checks and index loops over square matrices are deliberate.
#![allow(
    clippy::neg_cmp_op_on_partial_ord,
    clippy::needless_range_loop,
    clippy::too_many_arguments,
    clippy::type_complexity
)]

pub mod dataio;
pub mod federation;
pub mod gradtape;
pub mod metrics;
pub mod model;
pub mod runner;
pub mod threats;
