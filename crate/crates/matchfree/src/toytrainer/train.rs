//! Training loop for both objectives.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::eval::{evaluate, Assigner};
use super::model::{ToyGrads, ToyModel};
use super::scene::{eval_scene_seed, generate_scene, train_scene_seed, PrototypePool, Scene};
use super::ToyConfig;
use crate::checkpoint::Checkpoint;
use crate::cost::{broadcast_cost_backward, broadcast_cost_mode};
use crate::error::{Error, Result};
use crate::gtprobe::{GtProbeParams, GtProbeTape, ProbeConfig};
use crate::hungarian::hungarian_match;
use crate::losses::{total_loss_forward_backward, LossConfig};
use crate::numkernel::{adam_step, AdamHyper, AdamState, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    MatchFree,
    Hungarian,
}

/// One line of the JSON-lines training log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub l_w: f64,
    pub l_q: f64,
    pub l_total: f64,
    /// Purity on the periodic probe set, when sampled this step.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub probe_purity: Option<f64>,
}

/// Everything that evolves during training.
pub struct TrainState {
    pub objective: Objective,
    pub model: ToyModel,
    /// Present for the match-free objective only.
    pub probe: Option<GtProbeParams>,
    pub adam: AdamState,
    pub step: u64,
    pub seed: u64,
}

pub struct TrainOutcome {
    pub state: TrainState,
    pub log: Vec<StepRecord>,
    pub pool: PrototypePool,
}

fn init_state(
    objective: Objective,
    toy: &ToyConfig,
    probe_cfg: &ProbeConfig,
    seed: u64,
) -> Result<TrainState> {
    let mut model_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4D4F_4445_4C00_0001);
    let model = ToyModel::new(toy, &mut model_rng)?;
    let probe = match objective {
        Objective::MatchFree => {
            let mut probe_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5052_4F42_4500_0002);
            Some(GtProbeParams::new(probe_cfg, toy.num_classes, &mut probe_rng)?)
        }
        Objective::Hungarian => None,
    };
    let adam = {
        let mut m = model.clone();
        let mut p = probe.clone();
        let mut views: Vec<&Matrix> = Vec::new();
        let model_params = m.params_mut();
        let probe_params = p.as_mut().map(|pp| pp.params_mut()).unwrap_or_default();
        for (_, v) in &model_params {
            views.push(v);
        }
        for (_, v) in &probe_params {
            views.push(v);
        }
        AdamState::for_params(&views)
    };
    Ok(TrainState { objective, model, probe, adam, step: 0, seed })
}

/// Train from scratch for `toy.steps` steps.
pub fn train(
    objective: Objective,
    toy: &ToyConfig,
    loss_cfg: &LossConfig,
    probe_cfg: &ProbeConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    let state = init_state(objective, toy, probe_cfg, seed)?;
    train_with_state(state, toy.steps as u64, toy, loss_cfg)
}

/// Continue training an existing state for `steps` more steps. Scene
/// sequencing and the optimizer are keyed to the state's step counter, so a
/// save/load/continue run reproduces the uninterrupted trajectory exactly.
pub fn train_with_state(
    mut state: TrainState,
    steps: u64,
    toy: &ToyConfig,
    loss_cfg: &LossConfig,
) -> Result<TrainOutcome> {
    toy.validate()?;
    loss_cfg.validate()?;
    let pool = PrototypePool::generate(toy)?;
    let hyper = AdamHyper {
        lr: toy.lr,
        weight_decay: toy.weight_decay,
        ..AdamHyper::default()
    };

    let probe_set: Vec<Scene> = if toy.eval_every > 0 {
        (0..toy.probe_scenes as u64)
            .map(|i| generate_scene(toy, &pool, eval_scene_seed(state.seed, i)))
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };

    let mut toy_grads = ToyGrads::zeros_like(&state.model);
    let mut tape = state.probe.as_ref().map(GtProbeTape::zeros_like);
    let mut log = Vec::with_capacity(steps as usize);

    let end = state.step + steps;
    while state.step < end {
        let scene = generate_scene(toy, &pool, train_scene_seed(state.seed, state.step))?;
        let (preds, cache) = state.model.forward()?;
        toy_grads.zero();
        if let Some(t) = tape.as_mut() {
            t.zero();
        }

        let (l_w, l_q, l_total, pred_grads) = match state.objective {
            Objective::MatchFree => {
                let probe = state.probe.as_ref().expect("match-free state has a probe");
                let t = tape.as_mut().expect("match-free state has a tape");
                let out = total_loss_forward_backward(&scene.gts, &preds, probe, loss_cfg, t)?;
                (out.report.l_w, out.report.l_q, out.report.l_total, out.pred_grads)
            }
            Objective::Hungarian => {
                let c = broadcast_cost_mode(
                    &scene.gts,
                    &preds,
                    &loss_cfg.weights,
                    loss_cfg.classification,
                )?;
                let m = scene.gts.len();
                let scale = if loss_cfg.per_gt_mean && m > 0 { 1.0 / m as f64 } else { 1.0 };
                let assignment = hungarian_match(&c.values)?;
                let mut d_cost = Matrix::zeros(m, preds.len());
                let mut loss = 0.0;
                for &(i, j) in &assignment.pairs {
                    d_cost.set(i, j, scale);
                    loss += c.values.get(i, j) * scale;
                }
                let grads = broadcast_cost_backward(
                    &scene.gts,
                    &preds,
                    &loss_cfg.weights,
                    loss_cfg.classification,
                    &d_cost,
                )?;
                (0.0, 0.0, loss, grads)
            }
        };

        if !l_total.is_finite() {
            return Err(Error::Eval(format!(
                "non-finite loss at step {} (l_w={l_w}, l_q={l_q}); scene seed {}, max |pred grad| {}",
                state.step,
                scene.seed,
                pred_grads.max_abs()
            )));
        }

        state.model.backward(&cache, &pred_grads, &mut toy_grads)?;

        {
            let model_params = state.model.params_mut();
            let probe_params =
                state.probe.as_mut().map(|p| p.params_mut()).unwrap_or_default();
            let mut params: Vec<&mut Matrix> = Vec::new();
            for (_, v) in model_params {
                params.push(v);
            }
            for (_, v) in probe_params {
                params.push(v);
            }
            let mut grad_views: Vec<&Matrix> = toy_grads.views();
            if let Some(t) = tape.as_ref() {
                grad_views.extend(t.views());
            }
            adam_step(&mut params, &grad_views, &mut state.adam, &hyper)?;
        }

        state.step += 1;
        let probe_purity = if toy.eval_every > 0
            && !probe_set.is_empty()
            && (state.step % toy.eval_every as u64 == 0 || state.step == end)
        {
            let assigner = match state.objective {
                Objective::MatchFree => Assigner::Probe {
                    params: state.probe.as_ref().unwrap(),
                    scg: &loss_cfg.scg,
                },
                Objective::Hungarian => Assigner::Hungarian {
                    weights: &loss_cfg.weights,
                    mode: loss_cfg.classification,
                },
            };
            Some(evaluate(&state.model, &probe_set, &assigner)?.purity)
        } else {
            None
        };
        log.push(StepRecord { step: state.step, l_w, l_q, l_total, probe_purity });
    }

    Ok(TrainOutcome { state, log, pool })
}

/// Persist the full training state (model, probe, optimizer moments, step).
pub fn save_train_checkpoint(path: &Path, state: &TrainState) -> Result<()> {
    let mut ck = Checkpoint::new("toytrainer");
    state.model.export_arrays("toy.", &mut ck);
    if let Some(probe) = &state.probe {
        probe.export_arrays("probe.", &mut ck);
    }
    for (i, m) in state.adam.m.iter().enumerate() {
        ck.insert(format!("adam.m.{i:04}"), m.clone());
    }
    for (i, v) in state.adam.v.iter().enumerate() {
        ck.insert(format!("adam.v.{i:04}"), v.clone());
    }
    ck.scalars.insert("step".into(), state.step as f64);
    ck.scalars.insert("adam_step".into(), state.adam.step as f64);
    ck.scalars.insert("seed_lo".into(), (state.seed & 0xFFFF_FFFF) as f64);
    ck.scalars.insert("seed_hi".into(), (state.seed >> 32) as f64);
    ck.scalars.insert(
        "objective".into(),
        match state.objective {
            Objective::MatchFree => 0.0,
            Objective::Hungarian => 1.0,
        },
    );
    ck.save(path)
}

/// Rebuild a training state from a checkpoint written by
/// [`save_train_checkpoint`]. Configs must match the shapes stored.
pub fn load_train_checkpoint(
    path: &Path,
    toy: &ToyConfig,
    probe_cfg: &ProbeConfig,
) -> Result<TrainState> {
    let ck = Checkpoint::load(path)?;
    let objective = match ck.scalars.get("objective").copied().unwrap_or(0.0) as i64 {
        0 => Objective::MatchFree,
        _ => Objective::Hungarian,
    };
    let seed_lo = *ck
        .scalars
        .get("seed_lo")
        .ok_or_else(|| Error::validation("checkpoint missing seed"))? as u64;
    let seed_hi = *ck
        .scalars
        .get("seed_hi")
        .ok_or_else(|| Error::validation("checkpoint missing seed"))? as u64;
    let seed = (seed_hi << 32) | seed_lo;

    let mut state = init_state(objective, toy, probe_cfg, seed)?;
    state.model.import_arrays("toy.", &ck)?;
    if let Some(probe) = state.probe.as_mut() {
        probe.import_arrays("probe.", &ck)?;
    }
    for (i, m) in state.adam.m.iter_mut().enumerate() {
        *m = ck.get(&format!("adam.m.{i:04}"))?.clone();
    }
    for (i, v) in state.adam.v.iter_mut().enumerate() {
        *v = ck.get(&format!("adam.v.{i:04}"))?.clone();
    }
    state.step = ck.scalars.get("step").copied().unwrap_or(0.0) as u64;
    state.adam.step = ck.scalars.get("adam_step").copied().unwrap_or(0.0) as u64;
    Ok(state)
}
