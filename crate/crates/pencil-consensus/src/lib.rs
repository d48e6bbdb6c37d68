//! Prescribed-time leader-following consensus for heterogeneous multi-agent
//! systems: matrix-pencil gain synthesis with machine-checkable LMI
//! certificates, plus a deterministic closed-loop simulator with runtime
//! monitors for every bound the synthesis asserts.
//!
//! The library is generic over the scalar type via [`Real`]; the concrete
//! aliases below fix `f64`, which is what the CLI and all shipped tools use.

pub mod cli;
pub mod config;
pub mod error;
pub mod fleet;
pub mod pencil;
pub mod sim;
pub mod plot;
pub mod trace_io;
pub mod synthesis;
pub mod system;
pub mod topology;
pub mod warp;

/// Scalar type the whole library is generic over: `f32` or `f64`.
pub trait Real:
    nalgebra::RealField
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + Copy
    + Default
    + std::fmt::Display
    + std::fmt::LowerExp
{
}

impl<T> Real for T where
    T: nalgebra::RealField
        + num_traits::FromPrimitive
        + num_traits::ToPrimitive
        + Copy
        + Default
        + std::fmt::Display
        + std::fmt::LowerExp
{
}

/// Converts an `f64` literal into the working scalar type.
///
/// Panics only if the target type cannot represent any `f64`, which cannot
/// happen for the supported scalars.
#[inline]
pub fn lit<T: Real>(x: f64) -> T {
    T::from_f64(x).expect("f64 literal must convert into the scalar type")
}

/// Dense dynamically-sized matrix over the default scalar.
pub type Mat = nalgebra::DMatrix<f64>;
/// Dense dynamically-sized column vector over the default scalar.
pub type Vec64 = nalgebra::DVector<f64>;

pub type GraphTopology = topology::GraphTopology<f64>;
pub type Pencil = pencil::Pencil<f64>;
pub type GainSchedule = warp::GainSchedule<f64>;
pub type SystemMatrices = system::SystemMatrices<f64>;
pub type SynthesisResult = synthesis::SynthesisResult<f64>;
pub type AgentModel = fleet::AgentModel<f64>;
pub type AgentFleet = fleet::AgentFleet<f64>;
pub type FleetState = fleet::FleetState<f64>;
pub type SimOptions = sim::SimOptions<f64>;
pub type SimTrace = sim::SimTrace<f64>;
pub type MonitorReport = sim::MonitorReport<f64>;
pub type TrackingReport = sim::TrackingReport<f64>;
pub type WarpMode = warp::WarpMode<f64>;

pub use config::{parse_config, RunConfig, Scenario};
