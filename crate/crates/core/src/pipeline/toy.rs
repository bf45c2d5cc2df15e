//! Fixed four-window toy corpus and the supervised training loop.

use super::PipelineError;
use crate::harmony::{analyze_skeleton, HarmonySkeleton};
use crate::hiermodel::{clip_grad_norm, AdamW, CosineSchedule, HierModel, LossBreakdown, ModelConfig, WindowSample};
use crate::score::{Bar, NoteEvent, Score, TrackBar};
use serde::{Deserialize, Serialize};

const PROGRESSIONS: [[&str; 4]; 4] = [
    ["C", "F", "G", "C"],
    ["C", "Am", "Dm", "G"],
    ["C", "G", "Am", "F"],
    ["C", "Em", "F", "G"],
];

/// Close-position voicing and bass root of a chord symbol.
fn chord(name: &str) -> ([u8; 3], u8) {
    match name {
        "C" => ([60, 64, 67], 36),
        "F" => ([60, 65, 69], 41),
        "G" => ([59, 62, 67], 43),
        "Am" => ([57, 60, 64], 45),
        "Dm" => ([57, 62, 65], 38),
        "Em" => ([59, 64, 67], 40),
        _ => unreachable!("toy chord {name}"),
    }
}

/// Piano pads, a root-fifth bass line and an arpeggiated flute over four
/// bars of 4/4, one window per progression.
pub fn toy_corpus() -> Vec<(Score, HarmonySkeleton)> {
    PROGRESSIONS
        .iter()
        .map(|prog| {
            let bars = prog
                .iter()
                .map(|name| {
                    let (v, root) = chord(name);
                    let mut bar = Bar::new(32);
                    let pad = [0, 16]
                        .iter()
                        .flat_map(|&o| v.iter().map(move |&p| NoteEvent::new(p, o, 16)))
                        .collect();
                    bar.tracks.push(TrackBar::new(0, 0, pad));
                    bar.tracks.push(TrackBar::new(
                        1,
                        33,
                        vec![NoteEvent::new(root, 0, 16), NoteEvent::new(root + 7, 16, 16)],
                    ));
                    let line = [v[0], v[1], v[2], v[1]]
                        .iter()
                        .enumerate()
                        .map(|(i, &p)| NoteEvent::new(p + 12, 8 * i as u32, 8))
                        .collect();
                    bar.tracks.push(TrackBar::new(2, 73, line));
                    bar
                })
                .collect();
            let score = Score::new(bars);
            let sk = analyze_skeleton(&score);
            (score, sk)
        })
        .collect()
}

/// The toy corpus tokenized for a model configuration.
pub fn toy_windows(cfg: &ModelConfig) -> Result<Vec<WindowSample>, PipelineError> {
    toy_corpus()
        .iter()
        .map(|(s, sk)| Ok(WindowSample::from_score(s, sk, cfg)?.0))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: u64,
    pub lr: f64,
    pub min_lr: f64,
    pub warmup: u64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    /// Stop once the batch loss falls below this.
    pub target_loss: Option<f64>,
    /// Run at most this many steps in one call (the schedule still spans
    /// `steps`), for interrupting and resuming.
    pub stop_after: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            lr: 1e-3,
            min_lr: 1e-4,
            warmup: 20,
            weight_decay: 0.0,
            clip_norm: 1.0,
            target_loss: Some(0.1),
            stop_after: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: u64,
    pub first: LossBreakdown,
    pub last: LossBreakdown,
    /// Step at which the target was first met.
    pub reached_target: Option<u64>,
}

/// Full-batch training; `on_step` sees every step's pre-update loss.
pub fn train(
    model: &mut HierModel,
    opt: &mut AdamW,
    data: &[WindowSample],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(u64, &LossBreakdown),
) -> Result<TrainReport, PipelineError> {
    let sched = CosineSchedule {
        base: cfg.lr,
        min: cfg.min_lr,
        warmup: cfg.warmup,
        total: cfg.steps,
    };
    let mut first = None;
    let mut last = LossBreakdown::default();
    let mut reached = None;
    let start = opt.step;
    for step in start..cfg.steps {
        if cfg.stop_after.is_some_and(|n| step - start >= n) {
            break;
        }
        let (loss, mut grads) = model.gradients(data)?;
        if !loss.total.is_finite() {
            return Err(PipelineError::NonFinite(format!("loss {:?} at step {step}", loss)));
        }
        on_step(step, &loss);
        first.get_or_insert(loss);
        last = loss;
        if cfg.target_loss.is_some_and(|t| loss.total < t) {
            reached = Some(step);
            break;
        }
        clip_grad_norm(&mut grads, cfg.clip_norm);
        opt.weight_decay = cfg.weight_decay;
        opt.update(&mut model.params, &grads, sched.lr(step));
    }
    Ok(TrainReport {
        steps: opt.step - start,
        first: first.unwrap_or_default(),
        last,
        reached_target: reached,
    })
}
