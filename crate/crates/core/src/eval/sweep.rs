use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{evaluate, EvalReport};
use crate::cbm::DcbmModel;
use crate::dataio::SplitBundle;
use crate::error::{Error, Result};
use crate::expert::SimulatedExpert;
use crate::scalar::Scalar;
use crate::strategy::{train_gate, FusionNet, GateHistory, GateTrainConfig, GatingNet, NUM_STRATEGIES};

pub const DEFAULT_LAMBDA_GRID: [f64; 6] = [0.0, 0.1, 0.3, 1.0, 3.0, 10.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoveragePoint {
    pub lambda: f64,
    pub participation_ratio: f64,
    pub system_accuracy: f64,
    pub ai_accuracy: f64,
    pub expert_accuracy: f64,
    pub strategy_counts: [usize; NUM_STRATEGIES],
}

impl From<&EvalReport> for CoveragePoint {
    fn from(r: &EvalReport) -> Self {
        Self {
            lambda: r.lambda,
            participation_ratio: r.participation_ratio,
            system_accuracy: r.system_accuracy,
            ai_accuracy: r.ai_accuracy,
            expert_accuracy: r.expert_accuracy,
            strategy_counts: r.strategy_counts,
        }
    }
}

/// Test-split operating points, one per λ, in increasing λ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CurveRepr")]
pub struct CoverageCurve {
    pub rho: f64,
    pub seed: u64,
    pub defer_only: bool,
    points: Vec<CoveragePoint>,
}

#[derive(Deserialize)]
struct CurveRepr {
    rho: f64,
    seed: u64,
    defer_only: bool,
    points: Vec<CoveragePoint>,
}

impl TryFrom<CurveRepr> for CoverageCurve {
    type Error = Error;

    fn try_from(r: CurveRepr) -> Result<Self> {
        Self::new(r.rho, r.seed, r.defer_only, r.points)
    }
}

impl CoverageCurve {
    pub fn new(rho: f64, seed: u64, defer_only: bool, points: Vec<CoveragePoint>) -> Result<Self> {
        if points.windows(2).any(|w| !(w[0].lambda < w[1].lambda)) {
            return Err(Error::InvalidArgument("curve lambdas must be strictly increasing".into()));
        }
        Ok(Self {
            rho,
            seed,
            defer_only,
            points,
        })
    }

    pub fn points(&self) -> &[CoveragePoint] {
        &self.points
    }

    pub fn lambdas(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.lambda).collect()
    }

    pub fn participation(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.participation_ratio).collect()
    }

    pub fn point_at(&self, lambda: f64) -> Option<&CoveragePoint> {
        self.points.iter().find(|p| p.lambda == lambda)
    }

    /// The point with the largest participation ratio; the first one on ties.
    pub fn highest_coverage(&self) -> Option<&CoveragePoint> {
        self.points
            .iter()
            .fold(None, |best: Option<&CoveragePoint>, p| match best {
                Some(b) if b.participation_ratio >= p.participation_ratio => Some(b),
                _ => Some(p),
            })
    }
}

/// A trained gate together with its evaluation.
#[derive(Debug, Clone)]
pub struct SweepMember<T> {
    pub gate: GatingNet<T>,
    pub fusion: FusionNet<T>,
    pub history: GateHistory,
    pub report: EvalReport,
}

/// Like [`sweep_lambda`] but also returns each trained gate and fusion head.
pub fn sweep_lambda_with_models<T: Scalar>(
    model: &DcbmModel<T>,
    bundle: &SplitBundle<T>,
    expert: &SimulatedExpert,
    grid: &[f64],
    base: &GateTrainConfig,
) -> Result<(CoverageCurve, Vec<SweepMember<T>>)> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("lambda grid is empty".into()));
    }
    let mut sorted = grid.to_vec();
    sorted.sort_by(f64::total_cmp);
    if sorted.windows(2).any(|w| w[0] == w[1]) || sorted.iter().any(|l| !l.is_finite() || *l < 0.0) {
        return Err(Error::InvalidArgument(
            "lambda grid must hold distinct finite non-negative values".into(),
        ));
    }
    let members: Vec<SweepMember<T>> = sorted
        .par_iter()
        .map(|&lambda| {
            let wrap = |e: Error| Error::SweepPoint {
                lambda,
                source: Box::new(e),
            };
            let config = GateTrainConfig {
                lambda,
                ..base.clone()
            };
            let (gate, fusion) = config.init_networks(model);
            let (gate, fusion, history) = train_gate(gate, fusion, model, bundle, expert, &config).map_err(wrap)?;
            let report = evaluate(model, &gate, &fusion, expert, &bundle.test, lambda).map_err(wrap)?;
            Ok(SweepMember {
                gate,
                fusion,
                history,
                report,
            })
        })
        .collect::<Result<_>>()?;
    let points = members.iter().map(|m| CoveragePoint::from(&m.report)).collect();
    let curve = CoverageCurve::new(expert.noise_rate(), base.seed, base.defer_only, points)?;
    Ok((curve, members))
}

/// Trains one gate per λ from the same seed and evaluates each on the test
/// split. Points are independent and run in parallel.
pub fn sweep_lambda<T: Scalar>(
    model: &DcbmModel<T>,
    bundle: &SplitBundle<T>,
    expert: &SimulatedExpert,
    grid: &[f64],
    base: &GateTrainConfig,
) -> Result<CoverageCurve> {
    sweep_lambda_with_models(model, bundle, expert, grid, base).map(|(c, _)| c)
}
