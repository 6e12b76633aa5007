pub mod dynamics;
pub mod connect;
pub mod control;
pub mod error;
pub mod geom2d;
pub mod harness;
pub mod interaction;
pub mod planner;
pub mod qp;
pub mod reachset;
pub mod scalar;
pub mod simulator;

pub use error::{Error, Result};
pub use scalar::Real;

/// Double-precision aliases for the generic types.
pub type Pose = geom2d::Pose2<f64>;
pub type Polygon = geom2d::ConvexPolygon<f64>;
pub type State = dynamics::SliderState<f64>;
pub type Input = dynamics::PusherInput<f64>;
pub type Slider = dynamics::SliderModel<f64>;
pub type Cell = reachset::TerminalSet<f64>;
pub type Reachable = reachset::ReachableSet<f64>;
pub type Lqr = connect::LqrConfig<f64>;
pub type Goal = connect::GoalRegion<f64>;
