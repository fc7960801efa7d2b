//! Multi-stage training plans and their execution.
//!
//! Six named plans cover the transfer-learning comparison matrix: data-only
//! baselines (A1, A2), combined data+physics models (B1, B2, B3), and a
//! from-scratch physics-only run (C1). Two-stage plans warm-start their
//! second stage from the first stage's final parameters, bitwise.

use super::{
    train_stage, ConvergenceLog, EvalInputs, PhysicsMode, StopReason, StopRule, TrainingError,
};
use crate::dataset::{make_collocation_set, CollocationSet, Dataset};
use crate::network::{forward, init_xavier, NetworkSpec, ParameterSet, HEAD_NAMES};
use crate::physics::LidProfile;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StrategyName {
    A1,
    A2,
    B1,
    B2,
    B3,
    C1,
}

impl StrategyName {
    pub fn as_str(&self) -> &'static str {
        match self {
            StrategyName::A1 => "A1",
            StrategyName::A2 => "A2",
            StrategyName::B1 => "B1",
            StrategyName::B2 => "B2",
            StrategyName::B3 => "B3",
            StrategyName::C1 => "C1",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "A1" => Some(StrategyName::A1),
            "A2" => Some(StrategyName::A2),
            "B1" => Some(StrategyName::B1),
            "B2" => Some(StrategyName::B2),
            "B3" => Some(StrategyName::B3),
            "C1" => Some(StrategyName::C1),
            _ => None,
        }
    }

    pub fn all() -> [StrategyName; 6] {
        [
            StrategyName::A1,
            StrategyName::A2,
            StrategyName::B1,
            StrategyName::B2,
            StrategyName::B3,
            StrategyName::C1,
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageInit {
    /// Fresh Xavier-normal initialization from this seed.
    Random { seed: u64 },
    /// The previous stage's final parameters, unchanged.
    FromPrevious,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageSpec {
    pub init: StageInit,
    /// Reynolds numbers whose samples enter the data term (empty = no data term).
    pub data_re: Vec<f64>,
    /// Reynolds numbers the physics terms are collocated at (empty = none).
    pub physics_re: Vec<f64>,
    pub lambda: f64,
    pub stop: StopRule,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StrategySpec {
    pub name: StrategyName,
    pub stages: Vec<StageSpec>,
}

/// Builds the named plan.
///
/// `base_re` is the set with reference data (classically {50, 100});
/// `transfer_re` is the new condition X targeted by the second stage (or the
/// only stage for C1); `lambda` weights physics wherever physics is on.
pub fn build_strategy(
    name: StrategyName,
    base_re: &[f64],
    transfer_re: Option<f64>,
    seed: u64,
    stage1_stop: StopRule,
    stage2_stop: StopRule,
    lambda: f64,
) -> Result<StrategySpec, TrainingError> {
    let base = base_re.to_vec();
    let need_x = || transfer_re.ok_or(TrainingError::MissingTransferRe(name.as_str()));
    let data_only_stage = StageSpec {
        init: StageInit::Random { seed },
        data_re: base.clone(),
        physics_re: Vec::new(),
        lambda: 0.0,
        stop: stage1_stop,
    };
    let combined_stage = StageSpec {
        init: StageInit::Random { seed },
        data_re: base.clone(),
        physics_re: base.clone(),
        lambda,
        stop: stage1_stop,
    };
    let stages = match name {
        StrategyName::A1 => vec![data_only_stage],
        StrategyName::A2 => {
            let x = need_x()?;
            vec![
                data_only_stage,
                StageSpec {
                    init: StageInit::FromPrevious,
                    data_re: Vec::new(),
                    physics_re: vec![x],
                    lambda,
                    stop: stage2_stop,
                },
            ]
        }
        StrategyName::B1 => vec![combined_stage],
        StrategyName::B2 => {
            let x = need_x()?;
            vec![
                combined_stage,
                StageSpec {
                    init: StageInit::FromPrevious,
                    data_re: Vec::new(),
                    physics_re: vec![x],
                    lambda,
                    stop: stage2_stop,
                },
            ]
        }
        StrategyName::B3 => {
            let x = need_x()?;
            let mut physics = base.clone();
            physics.push(x);
            vec![
                combined_stage,
                StageSpec {
                    init: StageInit::FromPrevious,
                    data_re: base,
                    physics_re: physics,
                    lambda,
                    stop: stage2_stop,
                },
            ]
        }
        StrategyName::C1 => {
            let x = need_x()?;
            vec![StageSpec {
                init: StageInit::Random { seed },
                data_re: Vec::new(),
                physics_re: vec![x],
                lambda,
                stop: stage2_stop,
            }]
        }
    };
    Ok(StrategySpec { name, stages })
}

/// Shared execution context: the network shape, the pool of labelled data
/// (stages pick their Reynolds subsets out of it), collocation density, and
/// optimizer settings.
#[derive(Clone, Copy)]
pub struct TrainContext<'a> {
    pub spec: &'a NetworkSpec,
    pub data: &'a Dataset,
    pub interior_m: usize,
    pub boundary_m: usize,
    pub lid: LidProfile,
    pub mode: PhysicsMode,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct StageOutcome {
    pub params: ParameterSet,
    pub log: ConvergenceLog,
    pub reason: StopReason,
    pub steps: usize,
}

#[derive(Debug, Clone)]
pub struct StrategyOutcome {
    pub stages: Vec<StageOutcome>,
}

impl StrategyOutcome {
    pub fn final_params(&self) -> &ParameterSet {
        &self.stages.last().expect("at least one stage").params
    }
}

/// Runs one stage from the given initial parameters.
pub fn run_stage(
    ctx: &TrainContext<'_>,
    stage: &StageSpec,
    init: ParameterSet,
) -> Result<StageOutcome, TrainingError> {
    let data_subset: Option<Dataset> = if stage.data_re.is_empty() {
        None
    } else {
        let mut samples = Vec::new();
        for &re in &stage.data_re {
            let group: Vec<_> = ctx.data.samples_for_re(re).copied().collect();
            if group.is_empty() {
                return Err(TrainingError::MissingDataForRe(re));
            }
            samples.extend(group);
        }
        Some(Dataset {
            samples,
            provenance: ctx.data.provenance.clone(),
        })
    };
    let colloc: Option<CollocationSet> = if stage.physics_re.is_empty() {
        None
    } else {
        Some(make_collocation_set(
            &stage.physics_re,
            ctx.interior_m,
            ctx.boundary_m,
            ctx.lid,
        )?)
    };
    let inputs = EvalInputs {
        spec: ctx.spec,
        data: data_subset.as_ref(),
        physics: colloc.as_ref().map(|c| (c, ctx.mode)),
        lambda: stage.lambda,
    };
    let out = train_stage(&inputs, init, &stage.stop, ctx.lr)?;
    Ok(StageOutcome {
        params: out.params,
        log: out.log,
        reason: out.reason,
        steps: out.steps,
    })
}

/// Runs every stage in order, wiring warm starts.
pub fn run_strategy(
    ctx: &TrainContext<'_>,
    spec: &StrategySpec,
) -> Result<StrategyOutcome, TrainingError> {
    let mut stages: Vec<StageOutcome> = Vec::new();
    for (index, stage) in spec.stages.iter().enumerate() {
        let init = match stage.init {
            StageInit::Random { seed } => init_xavier(ctx.spec, seed),
            StageInit::FromPrevious => stages
                .last()
                .map(|o| o.params.clone())
                .ok_or(TrainingError::MissingCheckpoint(index))?,
        };
        stages.push(run_stage(ctx, stage, init)?);
    }
    Ok(StrategyOutcome { stages })
}

/// One row of the per-condition, per-variable test error table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TestMseRow {
    pub re: f64,
    pub variable: &'static str,
    pub mse: f64,
}

/// Mean squared prediction error per (Reynolds number, variable), evaluated
/// with the plain forward pass. Pure: repeated calls give identical rows.
pub fn evaluate_test_mse(
    spec: &NetworkSpec,
    params: &ParameterSet,
    test: &Dataset,
) -> Result<Vec<TestMseRow>, TrainingError> {
    let mut rows = Vec::new();
    for re in test.re_values() {
        let mut sums = [0.0f64; 3];
        let mut count = 0usize;
        for s in test.samples_for_re(re) {
            let re_arg = if spec.takes_re() { Some(s.re) } else { None };
            let pred = forward(spec, params, s.x, s.y, re_arg)?;
            let truth = [s.u, s.v, s.p];
            for (acc, (p, t)) in sums.iter_mut().zip(pred.iter().zip(truth)) {
                let d = p - t;
                *acc += d * d;
            }
            count += 1;
        }
        for (k, name) in HEAD_NAMES.iter().enumerate() {
            rows.push(TestMseRow {
                re,
                variable: name,
                mse: sums[k] / count as f64,
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{FieldSample, Provenance};
    use crate::training::LossEvaluator;

    fn two_re_dataset() -> Dataset {
        let mut samples = Vec::new();
        for &re in &[50.0, 100.0] {
            for k in 0..4 {
                let t = 0.2 + 0.2 * k as f64;
                samples.push(
                    FieldSample::new(t, 1.0 - t * 0.5, re, 0.1 * t, -0.05 * t, 0.02).unwrap(),
                );
            }
        }
        Dataset {
            samples,
            provenance: Provenance {
                source_grid: 0,
                sample_grid: 0,
                re_list: vec![50.0, 100.0],
                lid: LidProfile::Regularized,
                subsample_fraction: None,
                subsample_seed: None,
                noise_amplitude: None,
                noise_seed: None,
            },
        }
    }

    fn quick_ctx<'a>(spec: &'a NetworkSpec, data: &'a Dataset) -> TrainContext<'a> {
        TrainContext {
            spec,
            data,
            interior_m: 4,
            boundary_m: 3,
            lid: LidProfile::Regularized,
            mode: PhysicsMode::Full,
            lr: 1e-3,
        }
    }

    #[test]
    fn plans_have_the_documented_shapes() {
        let base = [50.0, 100.0];
        let s1 = StopRule::epochs(10);
        let s2 = StopRule::epochs(5);
        let a1 = build_strategy(StrategyName::A1, &base, None, 1, s1, s2, 1.0).unwrap();
        assert_eq!(a1.stages.len(), 1);
        assert_eq!(a1.stages[0].lambda, 0.0);
        assert_eq!(a1.stages[0].data_re, vec![50.0, 100.0]);
        assert!(a1.stages[0].physics_re.is_empty());

        let a2 = build_strategy(StrategyName::A2, &base, Some(200.0), 1, s1, s2, 1.0).unwrap();
        assert_eq!(a2.stages.len(), 2);
        assert_eq!(a2.stages[0], a1.stages[0]);
        assert!(a2.stages[1].data_re.is_empty());
        assert_eq!(a2.stages[1].physics_re, vec![200.0]);
        assert_eq!(a2.stages[1].init, StageInit::FromPrevious);

        let b1 = build_strategy(StrategyName::B1, &base, None, 1, s1, s2, 1.0).unwrap();
        assert_eq!(b1.stages.len(), 1);
        assert_eq!(b1.stages[0].lambda, 1.0);
        assert_eq!(b1.stages[0].physics_re, vec![50.0, 100.0]);

        let b2 = build_strategy(StrategyName::B2, &base, Some(200.0), 1, s1, s2, 1.0).unwrap();
        assert_eq!(b2.stages[0], b1.stages[0]);
        assert!(b2.stages[1].data_re.is_empty());
        assert_eq!(b2.stages[1].physics_re, vec![200.0]);

        let b3 = build_strategy(StrategyName::B3, &base, Some(200.0), 1, s1, s2, 1.0).unwrap();
        assert_eq!(b3.stages[1].data_re, vec![50.0, 100.0]);
        assert_eq!(b3.stages[1].physics_re, vec![50.0, 100.0, 200.0]);

        let c1 = build_strategy(StrategyName::C1, &base, Some(150.0), 1, s1, s2, 1.0).unwrap();
        assert_eq!(c1.stages.len(), 1);
        assert_eq!(c1.stages[0].init, StageInit::Random { seed: 1 });
        assert!(c1.stages[0].data_re.is_empty());
        assert_eq!(c1.stages[0].physics_re, vec![150.0]);

        for name in [StrategyName::A2, StrategyName::B2, StrategyName::B3, StrategyName::C1] {
            assert!(matches!(
                build_strategy(name, &base, None, 1, s1, s2, 1.0),
                Err(TrainingError::MissingTransferRe(_))
            ));
        }
    }

    #[test]
    fn second_stage_starts_bitwise_from_the_first_checkpoint() {
        let spec = NetworkSpec::new(3, 1, 1, 4).unwrap();
        let data = two_re_dataset();
        let ctx = quick_ctx(&spec, &data);
        let s1 = StopRule::epochs(4);
        let s2 = StopRule::epochs(2);
        let b1 = build_strategy(StrategyName::B1, &[50.0, 100.0], None, 9, s1, s2, 1.0).unwrap();
        let b2 =
            build_strategy(StrategyName::B2, &[50.0, 100.0], Some(200.0), 9, s1, s2, 1.0).unwrap();
        let b1_out = run_strategy(&ctx, &b1).unwrap();
        let b2_out = run_strategy(&ctx, &b2).unwrap();
        // shared stage 1: identical checkpoints
        for (a, b) in b1_out.stages[0]
            .params
            .values()
            .iter()
            .zip(b2_out.stages[0].params.values())
        {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        // stage 2's first logged loss equals a fresh evaluation of the
        // stage-2 objective at the stage-1 checkpoint, bitwise
        let colloc = make_collocation_set(&[200.0], 4, 3, LidProfile::Regularized).unwrap();
        let inputs = EvalInputs {
            spec: &spec,
            data: None,
            physics: Some((&colloc, PhysicsMode::Full)),
            lambda: 1.0,
        };
        let fresh = LossEvaluator::new()
            .evaluate(&inputs, &b2_out.stages[0].params)
            .unwrap();
        assert_eq!(
            b2_out.stages[1].log.entries[0].total.to_bits(),
            fresh.total.to_bits()
        );
    }

    #[test]
    fn missing_reynolds_group_is_a_configuration_error() {
        let spec = NetworkSpec::new(3, 1, 1, 4).unwrap();
        let data = two_re_dataset();
        let ctx = quick_ctx(&spec, &data);
        let stage = StageSpec {
            init: StageInit::Random { seed: 2 },
            data_re: vec![75.0],
            physics_re: Vec::new(),
            lambda: 0.0,
            stop: StopRule::epochs(1),
        };
        assert!(matches!(
            run_stage(&ctx, &stage, init_xavier(&spec, 2)),
            Err(TrainingError::MissingDataForRe(re)) if re == 75.0
        ));
        // FromPrevious with no previous stage
        let spec_plan = StrategySpec {
            name: StrategyName::B2,
            stages: vec![StageSpec {
                init: StageInit::FromPrevious,
                data_re: Vec::new(),
                physics_re: vec![100.0],
                lambda: 1.0,
                stop: StopRule::epochs(1),
            }],
        };
        assert!(matches!(
            run_strategy(&ctx, &spec_plan),
            Err(TrainingError::MissingCheckpoint(0))
        ));
    }

    #[test]
    fn test_mse_rows_match_direct_means_and_are_pure() {
        let spec = NetworkSpec::new(3, 1, 1, 4).unwrap();
        let zero = ParameterSet::from_flat(&spec, vec![0.0; spec.param_count()]).unwrap();
        let data = two_re_dataset();
        let rows = evaluate_test_mse(&spec, &zero, &data).unwrap();
        assert_eq!(rows.len(), 6); // 2 Re x 3 variables
        // zero network: mse equals the mean square of the recorded values
        for re in [50.0, 100.0] {
            let group: Vec<_> = data.samples_for_re(re).collect();
            let mean_u =
                group.iter().map(|s| s.u * s.u).sum::<f64>() / group.len() as f64;
            let row = rows
                .iter()
                .find(|r| r.re == re && r.variable == "u")
                .unwrap();
            assert!((row.mse - mean_u).abs() < 1e-15);
        }
        let rows2 = evaluate_test_mse(&spec, &zero, &data).unwrap();
        assert_eq!(rows, rows2);
    }
}
