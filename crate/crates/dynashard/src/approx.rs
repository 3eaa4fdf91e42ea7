//! Approximation factors of transaction scheduling on shard graphs,
//! evaluated with every hidden constant set to 1 and logarithms in base 2.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Topology {
    General,
    /// Hypercube, butterfly and g-dimensional grid graphs.
    HypercubeButterflyGrid,
    /// General graph with `k` chosen at random.
    GeneralRandomK,
    Line,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    DynaShard,
    Baseline,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ApproxError {
    #[error("bad parameter: {0}")]
    BadParam(String),
}

/// `k`: objects per transaction, `d`: graph diameter, `s`: number of
/// shards, `big_d`: distance bound between a transaction and its objects,
/// `g`: grid dimension (accepted for the grid family; the expressions do
/// not depend on it).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ApproxParams {
    pub k: f64,
    pub d: f64,
    pub s: f64,
    pub big_d: f64,
    pub g: Option<f64>,
}

pub fn approx_factor(topology: Topology, method: Method, p: ApproxParams) -> Result<f64, ApproxError> {
    for (name, v) in [("k", p.k), ("d", p.d), ("s", p.s), ("D", p.big_d)] {
        if !v.is_finite() || v < 1.0 {
            return Err(ApproxError::BadParam(format!(
                "{name} must be a finite value >= 1, got {v}"
            )));
        }
    }
    if let Some(g) = p.g {
        if !g.is_finite() || g < 1.0 {
            return Err(ApproxError::BadParam(format!("g must be a finite value >= 1, got {g}")));
        }
    }
    let ApproxParams { k, d, s, big_d, .. } = p;
    let log_d = big_d.log2();
    let log_s = s.log2();
    let v = match (topology, method) {
        (Topology::General, Method::Baseline) => k * d,
        (Topology::General, Method::DynaShard) => k * d * log_d,
        (Topology::HypercubeButterflyGrid, Method::Baseline) => k * log_s,
        (Topology::HypercubeButterflyGrid, Method::DynaShard) => k * log_s * log_s,
        (Topology::GeneralRandomK, Method::Baseline) => k * log_d * (k + log_s),
        (Topology::GeneralRandomK, Method::DynaShard) => k * log_d * (k + log_s) * log_s,
        (Topology::Line, Method::Baseline) => k * d.sqrt() * log_d,
        (Topology::Line, Method::DynaShard) => k * d.sqrt() * log_d * log_s * log_s,
    };
    Ok(v)
}

/// The asymptotic expression behind [`approx_factor`].
pub fn expression(topology: Topology, method: Method) -> &'static str {
    match (topology, method) {
        (Topology::General, Method::Baseline) => "O(k d)",
        (Topology::General, Method::DynaShard) => "O(k d log D)",
        (Topology::HypercubeButterflyGrid, Method::Baseline) => "O(k log s)",
        (Topology::HypercubeButterflyGrid, Method::DynaShard) => "O(k log^2 s)",
        (Topology::GeneralRandomK, Method::Baseline) => "O(k log D (k + log s))",
        (Topology::GeneralRandomK, Method::DynaShard) => "O(k log D (k + log s) log s)",
        (Topology::Line, Method::Baseline) => "O(k sqrt(d) log D)",
        (Topology::Line, Method::DynaShard) => "O(k sqrt(d) log D log^2 s)",
    }
}

impl FromStr for Topology {
    type Err = ApproxError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "general" => Ok(Topology::General),
            "hypercube" | "butterfly" | "grid" | "hbg" | "hypercubebutterflygrid" => {
                Ok(Topology::HypercubeButterflyGrid)
            }
            "generalrandomk" | "randomk" => Ok(Topology::GeneralRandomK),
            "line" => Ok(Topology::Line),
            _ => Err(ApproxError::BadParam(format!("unknown topology {s:?}"))),
        }
    }
}

impl FromStr for Method {
    type Err = ApproxError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "dynashard" | "ds" => Ok(Method::DynaShard),
            "baseline" | "static" => Ok(Method::Baseline),
            _ => Err(ApproxError::BadParam(format!("unknown method {s:?}"))),
        }
    }
}

impl fmt::Display for Topology {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Topology::General => "general",
            Topology::HypercubeButterflyGrid => "hypercube-butterfly-grid",
            Topology::GeneralRandomK => "general-random-k",
            Topology::Line => "line",
        })
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::DynaShard => "dynashard",
            Method::Baseline => "baseline",
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(k: f64, d: f64, s: f64, big_d: f64) -> ApproxParams {
        ApproxParams {
            k,
            d,
            s,
            big_d,
            g: None,
        }
    }

    #[test]
    fn spot_values() {
        assert_eq!(
            approx_factor(Topology::General, Method::DynaShard, p(2.0, 3.0, 4.0, 8.0)),
            Ok(18.0)
        );
        assert_eq!(
            approx_factor(Topology::General, Method::Baseline, p(2.0, 3.0, 4.0, 8.0)),
            Ok(6.0)
        );
        assert_eq!(
            approx_factor(Topology::General, Method::DynaShard, p(2.0, 3.0, 4.0, 1.0)),
            Ok(0.0)
        );
        assert_eq!(
            approx_factor(
                Topology::HypercubeButterflyGrid,
                Method::DynaShard,
                p(3.0, 1.0, 16.0, 1.0)
            ),
            Ok(48.0)
        );
    }

    #[test]
    fn dynashard_adds_log_factors_over_baseline() {
        let q = p(2.0, 9.0, 16.0, 8.0);
        for t in [
            Topology::General,
            Topology::HypercubeButterflyGrid,
            Topology::GeneralRandomK,
            Topology::Line,
        ] {
            let ds = approx_factor(t, Method::DynaShard, q).unwrap();
            let base = approx_factor(t, Method::Baseline, q).unwrap();
            let extra = match t {
                Topology::General => 3.0,
                Topology::HypercubeButterflyGrid | Topology::GeneralRandomK => 4.0,
                Topology::Line => 16.0,
            };
            assert!((ds - base * extra).abs() < 1e-9, "{t}");
        }
    }

    #[test]
    fn rejects_bad_params() {
        assert!(approx_factor(Topology::Line, Method::DynaShard, p(0.0, 1.0, 1.0, 1.0)).is_err());
        assert!(approx_factor(Topology::Line, Method::DynaShard, p(1.0, f64::NAN, 1.0, 1.0)).is_err());
        let mut q = p(1.0, 1.0, 1.0, 1.0);
        q.g = Some(0.5);
        assert!(approx_factor(Topology::HypercubeButterflyGrid, Method::Baseline, q).is_err());
    }

    #[test]
    fn names_parse() {
        assert_eq!("line".parse::<Topology>(), Ok(Topology::Line));
        assert_eq!("general-random-k".parse::<Topology>(), Ok(Topology::GeneralRandomK));
        assert_eq!("HBG".parse::<Topology>(), Ok(Topology::HypercubeButterflyGrid));
        assert_eq!("baseline".parse::<Method>(), Ok(Method::Baseline));
        assert!("ring".parse::<Topology>().is_err());
    }
}
