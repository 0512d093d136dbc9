//! Named reference problems shipped with the solver: closed-form cases for
//! validation, coupled systems, a comparison pair, and the classical
//! single-scenario reduction.

use crate::error::{Error, Result};
use crate::expr::{Expr, VarSpace};
use crate::forward::SdeCoefficients;
use crate::grid::GridSpec;
use crate::picard::SystemSpec;
use crate::sublinear::GammaSet;

/// A fully specified problem instance with its default discretization.
#[derive(Debug, Clone)]
pub struct Preset {
    pub name: &'static str,
    pub spec: SystemSpec,
    /// Paired lower system, for comparison checks.
    pub lower: Option<SystemSpec>,
    pub gamma: GammaSet,
    pub grid: GridSpec,
    pub quadrature_q: usize,
    pub gamma_m: usize,
    /// Initial interval count of the stitching plan.
    pub initial_m: usize,
    /// Final-level cross-validation distance bound on the interior half.
    pub crossval_threshold: f64,
}

pub const PRESET_NAMES: [&str; 8] = [
    "g-heat",
    "g-heat-concave",
    "abs-terminal",
    "coupled-linear",
    "decoupled-pair",
    "comparison-pair",
    "classical-singleton",
    "strong-coupling",
];

fn gen(src: &str, k: usize, n: usize, d: usize) -> Expr {
    Expr::parse(src, &VarSpace::generator(k, n, d)).expect("preset generator must parse")
}

fn term(src: &str, k: usize) -> Expr {
    Expr::parse(src, &VarSpace::terminal(k)).expect("preset terminal must parse")
}

fn standard_grid() -> GridSpec {
    GridSpec::uniform_1d(-6.0, 6.0, 401, 0.0, 1.0, 200).expect("standard grid")
}

fn scalar_spec(f: &str, terminal: &str, l: f64) -> SystemSpec {
    SystemSpec::new(
        1,
        1,
        1,
        vec![gen(f, 1, 1, 1)],
        vec![vec![]],
        vec![term(terminal, 1)],
        SdeCoefficients::standard_1d(),
        l,
        2.0,
    )
    .expect("preset spec")
}

fn pair_spec(f1: &str, f2: &str, phi1: &str, phi2: &str, l: f64) -> SystemSpec {
    SystemSpec::new(
        2,
        1,
        1,
        vec![gen(f1, 1, 2, 1), gen(f2, 1, 2, 1)],
        vec![vec![], vec![]],
        vec![term(phi1, 1), term(phi2, 1)],
        SdeCoefficients::standard_1d(),
        l,
        2.0,
    )
    .expect("preset spec")
}

/// Looks up a preset by name.
pub fn preset(name: &str) -> Result<Preset> {
    let interval = || GammaSet::interval(1.0, 4.0).expect("interval gamma");
    let p = match name {
        "g-heat" => Preset {
            name: "g-heat",
            spec: scalar_spec("0", "x1^2", 0.0),
            lower: None,
            gamma: interval(),
            grid: standard_grid(),
            quadrature_q: 7,
            gamma_m: 9,
            initial_m: 1,
            crossval_threshold: 0.04,
        },
        "g-heat-concave" => Preset {
            name: "g-heat-concave",
            spec: scalar_spec("0", "-x1^2", 0.0),
            lower: None,
            gamma: interval(),
            grid: standard_grid(),
            quadrature_q: 7,
            gamma_m: 9,
            initial_m: 1,
            crossval_threshold: 0.02,
        },
        "abs-terminal" => Preset {
            name: "abs-terminal",
            spec: scalar_spec("0", "abs(x1)", 0.0),
            lower: None,
            gamma: interval(),
            grid: standard_grid(),
            quadrature_q: 7,
            gamma_m: 9,
            initial_m: 1,
            crossval_threshold: 0.02,
        },
        "coupled-linear" => Preset {
            name: "coupled-linear",
            spec: pair_spec("y2", "y1", "x1", "x1", 1.0),
            lower: None,
            gamma: interval(),
            grid: standard_grid(),
            quadrature_q: 7,
            gamma_m: 9,
            initial_m: 4,
            crossval_threshold: 0.03,
        },
        "decoupled-pair" => Preset {
            name: "decoupled-pair",
            spec: pair_spec("0.5*y1", "-0.5*y2", "x1^2", "x1", 0.5),
            lower: None,
            gamma: interval(),
            grid: standard_grid(),
            quadrature_q: 7,
            gamma_m: 9,
            initial_m: 2,
            crossval_threshold: 0.1,
        },
        "comparison-pair" => Preset {
            name: "comparison-pair",
            spec: pair_spec("0.25*y2", "0.25*y1", "x1", "x1", 0.25),
            lower: Some(pair_spec(
                "0.25*y2 - 0.1",
                "0.25*y1 - 0.1",
                "x1 - 0.5",
                "x1 - 0.5",
                0.25,
            )),
            gamma: interval(),
            grid: standard_grid(),
            quadrature_q: 7,
            gamma_m: 9,
            initial_m: 2,
            crossval_threshold: 0.03,
        },
        "classical-singleton" => Preset {
            name: "classical-singleton",
            spec: scalar_spec("0", "x1^2", 0.0),
            lower: None,
            gamma: GammaSet::singleton(1.0).expect("singleton gamma"),
            grid: standard_grid(),
            quadrature_q: 7,
            gamma_m: 2,
            initial_m: 1,
            crossval_threshold: 0.01,
        },
        "strong-coupling" => Preset {
            name: "strong-coupling",
            spec: pair_spec("5*y2", "5*y1", "x1", "x1", 5.0),
            lower: None,
            gamma: interval(),
            grid: standard_grid(),
            quadrature_q: 7,
            gamma_m: 9,
            // deliberately one interval so the adaptive halving is exercised
            initial_m: 1,
            crossval_threshold: 30.0,
        },
        other => {
            return Err(Error::Config(format!(
                "unknown preset `{other}`; shipped presets: {}",
                PRESET_NAMES.join(", ")
            )))
        }
    };
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_presets_materialize() {
        for name in PRESET_NAMES {
            let p = preset(name).unwrap();
            assert_eq!(p.name, name);
            assert!(p.spec.n >= 1);
            assert!(p.crossval_threshold > 0.0);
        }
        assert!(preset("no-such-preset").is_err());
    }

    #[test]
    fn comparison_pair_carries_a_lower_system() {
        let p = preset("comparison-pair").unwrap();
        assert!(p.lower.is_some());
        for name in PRESET_NAMES {
            if name != "comparison-pair" {
                assert!(preset(name).unwrap().lower.is_none());
            }
        }
    }
}
