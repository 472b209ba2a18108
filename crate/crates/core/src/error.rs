use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("degenerate contact set: total normal force {total_normal} N")]
    DegenerateContact { total_normal: f64 },

    #[error("closed loop is not strictly stable (spectral radius {spectral_radius})")]
    Unstable { spectral_radius: f64 },

    #[error("invariant-set series did not contract within {terms} terms")]
    SeriesDivergence { terms: usize },

    #[error("no stabilizing gain found to initialize the search")]
    GainInitialization,

    #[error("saturation interval is empty: min {min} > max {max}")]
    InfeasibleSaturation { min: f64, max: f64 },

    #[error("safety margin {margin} m leaves an empty support interval on axis {axis}")]
    MarginTooLarge { axis: usize, margin: f64 },

    #[error("planner infeasible on axis {axis} at t={time:.3}s; conflicting constraints: {violated:?}")]
    PlannerInfeasible {
        axis: usize,
        time: f64,
        violated: Vec<String>,
    },

    #[error("reference plan is stale: requested {elapsed}s of a {horizon}s horizon")]
    StalePlan { elapsed: f64, horizon: f64 },

    #[error("quadratic program failed: {0}")]
    Qp(String),

    #[error("gimbal singularity in hip Euler factorization (middle angle {angle} rad)")]
    GimbalSingularity { angle: f64 },

    #[error("deflection {theta} rad outside the small-deflection model")]
    DeflectionOutOfRange { theta: f64 },

    #[error("swing requires {required:.3} m/s, limit is {limit:.3} m/s")]
    InfeasibleSwing { required: f64, limit: f64 },

    #[error("wrench distribution infeasible: {0}")]
    DistributionInfeasible(String),

    #[error("no ground contact: normal force {normal} N")]
    NoContact { normal: f64 },

    #[error("simulation blew up at t={time:.4}s")]
    BlowUp { time: f64 },

    #[error("stiffness identification failed; closest point ({k_left:.1}, {k_right:.1}) N*m/rad with residual {residual:.3e} m")]
    IdentificationFailed {
        k_left: f64,
        k_right: f64,
        residual: f64,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{context} at t={time:.3}s: {source}")]
    AtTime {
        time: f64,
        context: String,
        source: Box<Error>,
    },
}

impl Error {
    pub fn at(self, time: f64, context: impl Into<String>) -> Self {
        Error::AtTime {
            time,
            context: context.into(),
            source: Box::new(self),
        }
    }

    /// Short machine-readable tag, used for structured diagnostics.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Domain(_) => "domain",
            Error::DegenerateContact { .. } => "degenerate-contact",
            Error::Unstable { .. } => "unstable",
            Error::SeriesDivergence { .. } => "series-divergence",
            Error::GainInitialization => "gain-initialization",
            Error::InfeasibleSaturation { .. } => "infeasible-saturation",
            Error::MarginTooLarge { .. } => "margin-too-large",
            Error::PlannerInfeasible { .. } => "planner-infeasible",
            Error::StalePlan { .. } => "stale-plan",
            Error::Qp(_) => "qp",
            Error::GimbalSingularity { .. } => "gimbal-singularity",
            Error::DeflectionOutOfRange { .. } => "deflection-out-of-range",
            Error::InfeasibleSwing { .. } => "infeasible-swing",
            Error::DistributionInfeasible(_) => "distribution-infeasible",
            Error::NoContact { .. } => "no-contact",
            Error::BlowUp { .. } => "blow-up",
            Error::IdentificationFailed { .. } => "identification-failed",
            Error::Config(_) => "config",
            Error::AtTime { source, .. } => source.kind(),
        }
    }
}
