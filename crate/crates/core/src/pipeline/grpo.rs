//! Group-relative policy optimization: group-normalized advantages, the
//! clipped surrogate with a KL anchor, and a rollout loop over skeletons.

use super::generate::generate_window;
use super::reward::{reward, Embedder, RewardSpec};
use super::sampling::SamplingConfig;
use super::PipelineError;
use crate::dissonance::{d_total, DissonanceMatrix, DissonanceParams};
use crate::harmony::HarmonySkeleton;
use crate::hiermodel::tape::{Id, SurrogateSpec};
use crate::hiermodel::{AdamW, HierModel, Params, Tape, WindowSample};
use crate::metrics::track_density;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GrpoConfig {
    /// Skeletons per epoch.
    pub k: usize,
    /// Rollouts per skeleton.
    pub g: usize,
    pub clip: f64,
    pub kl_coeff: f64,
    pub lr: f64,
    /// One importance ratio per rollout instead of per token.
    pub sequence_level: bool,
    pub epochs: usize,
    /// Rollout threads.
    pub workers: usize,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            k: 16,
            g: 32,
            clip: 0.2,
            kl_coeff: 0.01,
            lr: 4e-5,
            sequence_level: false,
            epochs: 1,
            workers: 4,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.k == 0 || self.g < 2 {
            return Err(PipelineError::Config("GRPO needs k >= 1 and g >= 2".into()));
        }
        if !(self.clip > 0.0) || !(self.kl_coeff >= 0.0) || !(self.lr > 0.0) {
            return Err(PipelineError::Config("clip and lr must be positive, kl_coeff non-negative".into()));
        }
        Ok(())
    }
}

/// `(r - mean) / (std + 1e-8)` with the population standard deviation.
/// A group of identical rewards has all-zero advantages.
pub fn group_advantages(rewards: &[f64]) -> Vec<f64> {
    let n = rewards.len() as f64;
    if rewards.is_empty() || rewards.iter().all(|&r| r == rewards[0]) {
        return vec![0.0; rewards.len()];
    }
    let mean = rewards.iter().sum::<f64>() / n;
    let std = (rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
    rewards.iter().map(|r| (r - mean) / (std + 1e-8)).collect()
}

/// Something whose trajectories have differentiable token log-probabilities.
pub trait Policy {
    type Action;

    fn params(&self) -> &Params;
    fn params_mut(&mut self) -> &mut Params;

    /// Records the log-probability of every token of every action as a
    /// column on `tape`; also returns the action index of each row.
    fn log_probs(&self, tape: &mut Tape, actions: &[Self::Action]) -> Result<(Id, Vec<usize>), PipelineError>;
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub loss: f64,
    pub mean_reward: f64,
    pub grad_norm: f64,
    /// Non-finite ratios or loss; parameters were left untouched.
    pub rejected: bool,
}

fn logp_values<P: Policy>(policy: &P, actions: &[P::Action]) -> Result<(Vec<f64>, Vec<usize>), PipelineError> {
    let mut tape = Tape::new();
    let (lp, seq) = policy.log_probs(&mut tape, actions)?;
    Ok((tape.value(lp).column(0).to_vec(), seq))
}

/// One policy update from groups of `(action, reward)` rollouts.
/// `behavior` produced the rollouts; `reference` anchors the KL penalty.
pub fn grpo_step<P: Policy>(
    policy: &mut P,
    behavior: &P,
    reference: &P,
    groups: &[Vec<(P::Action, f64)>],
    cfg: &GrpoConfig,
    opt: &mut AdamW,
) -> Result<StepReport, PipelineError>
where
    P::Action: Clone,
{
    let mut actions = Vec::new();
    let mut adv_per_action = Vec::new();
    let mut rewards = Vec::new();
    for group in groups {
        let r: Vec<f64> = group.iter().map(|(_, r)| *r).collect();
        adv_per_action.extend(group_advantages(&r));
        rewards.extend(r);
        actions.extend(group.iter().map(|(a, _)| a.clone()));
    }
    let mean_reward = if rewards.is_empty() {
        0.0
    } else {
        rewards.iter().sum::<f64>() / rewards.len() as f64
    };
    let (old_logp, _) = logp_values(behavior, &actions)?;
    let (ref_logp, _) = logp_values(reference, &actions)?;

    let mut tape = Tape::new();
    let (lp, sequence) = policy.log_probs(&mut tape, &actions)?;
    let cur: Vec<f64> = tape.value(lp).column(0).to_vec();
    let ratios_finite = cur.iter().zip(&old_logp).all(|(a, b)| (a - b).exp().is_finite());
    let spec = SurrogateSpec {
        advantages: sequence.iter().map(|&s| adv_per_action[s]).collect(),
        old_logp,
        ref_logp,
        sequence,
        clip: cfg.clip,
        kl_coeff: cfg.kl_coeff,
        sequence_level: cfg.sequence_level,
    };
    let loss_id = tape.surrogate(lp, spec);
    let loss = tape.scalar(loss_id);
    if !ratios_finite || !loss.is_finite() {
        return Ok(StepReport {
            loss,
            mean_reward,
            grad_norm: f64::NAN,
            rejected: true,
        });
    }
    let grads = tape.backward(loss_id, policy.params().len());
    let grad_norm = grads
        .iter()
        .flatten()
        .map(|g| g.iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if !grad_norm.is_finite() {
        return Ok(StepReport {
            loss,
            mean_reward,
            grad_norm,
            rejected: true,
        });
    }
    opt.update(policy.params_mut(), &grads, cfg.lr);
    Ok(StepReport {
        loss,
        mean_reward,
        grad_norm,
        rejected: false,
    })
}

/// Softmax policy over a handful of discrete actions; each action is a
/// one-token trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct Bandit {
    params: Params,
}

impl Bandit {
    pub fn new(actions: usize) -> Self {
        let mut params = Params::new();
        params.filled("logits", 1, actions, 0.0);
        Self { params }
    }

    pub fn logits_mut(&mut self) -> &mut [f64] {
        self.params.value_mut(0).as_slice_mut().expect("contiguous logits")
    }

    pub fn probabilities(&self) -> Vec<f64> {
        let l = self.params.value(0).row(0).to_vec();
        let m = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = l.iter().map(|x| (x - m).exp()).collect();
        let z: f64 = e.iter().sum();
        e.into_iter().map(|x| x / z).collect()
    }

    pub fn sample(&self, rng: &mut impl Rng) -> usize {
        let u: f64 = rng.gen();
        let p = self.probabilities();
        let mut acc = 0.0;
        for (i, q) in p.iter().enumerate() {
            acc += q;
            if u < acc {
                return i;
            }
        }
        p.len() - 1
    }
}

impl Policy for Bandit {
    type Action = usize;

    fn params(&self) -> &Params {
        &self.params
    }

    fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    fn log_probs(&self, tape: &mut Tape, actions: &[usize]) -> Result<(Id, Vec<usize>), PipelineError> {
        let logits = tape.param(&self.params, 0);
        let rows = tape.gather_all(logits, std::iter::repeat(0).take(actions.len()));
        let lp = tape.log_softmax_pick(rows, actions.to_vec());
        Ok((lp, (0..actions.len()).collect()))
    }
}

/// The hierarchical model as a policy over music tokens; harmony, bar
/// lengths and track choices are treated as given.
#[derive(Debug, Clone)]
pub struct ModelPolicy(pub HierModel);

impl Policy for ModelPolicy {
    type Action = WindowSample;

    fn params(&self) -> &Params {
        &self.0.params
    }

    fn params_mut(&mut self) -> &mut Params {
        &mut self.0.params
    }

    fn log_probs(&self, tape: &mut Tape, actions: &[WindowSample]) -> Result<(Id, Vec<usize>), PipelineError> {
        let mut parts = Vec::new();
        let mut sequence = Vec::new();
        for (i, w) in actions.iter().enumerate() {
            let out = self.0.forward(tape, w)?;
            let Some(logits) = out.music_logits else { continue };
            let mut picks = Vec::new();
            let mut rows = Vec::new();
            for &(bar, slot, start, len) in &out.cells {
                let tokens = &w.bars[bar].tracks[slot].tokens;
                picks.extend_from_slice(&tokens[..len]);
                rows.extend(start..start + len);
            }
            let sel = tape.gather_all(logits, rows);
            parts.push(tape.log_softmax_pick(sel, picks.clone()));
            sequence.extend(std::iter::repeat(i).take(picks.len()));
        }
        let lp = if parts.is_empty() {
            tape.constant(ndarray::Array2::zeros((0, 1)))
        } else {
            tape.concat(parts)
        };
        Ok((lp, sequence))
    }
}

/// One JSONL record per rollout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutLog {
    pub epoch: usize,
    pub k: usize,
    pub g: usize,
    pub reward: f64,
    pub d_hn: f64,
    pub d_nn: f64,
    pub trk: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub mean_reward: f64,
    pub step: StepReport,
}

/// Rollouts for one skeleton: `g` windows sampled concurrently from a frozen
/// snapshot, each with its own seed.
fn rollouts(
    model: &HierModel,
    sk: &HarmonySkeleton,
    sampling: &SamplingConfig,
    seeds: &[u64],
    workers: usize,
) -> Result<Vec<super::generate::Generated>, PipelineError> {
    let chunk = seeds.len().div_ceil(workers.max(1)).max(1);
    std::thread::scope(|scope| {
        let handles: Vec<_> = seeds
            .chunks(chunk)
            .map(|part| {
                scope.spawn(move || {
                    part.iter()
                        .map(|&seed| {
                            let cfg = SamplingConfig {
                                seed,
                                ..sampling.clone()
                            };
                            generate_window(model, sk, &cfg)
                        })
                        .collect::<Result<Vec<_>, _>>()
                })
            })
            .collect();
        let mut out = Vec::with_capacity(seeds.len());
        for h in handles {
            out.extend(h.join().expect("rollout worker panicked")?);
        }
        Ok(out)
    })
}

/// GRPO fine-tuning over a skeleton pool; writes one JSON line per rollout
/// to `log` and returns per-epoch summaries.
#[allow(clippy::too_many_arguments)]
pub fn run_grpo(
    policy: &mut ModelPolicy,
    skeletons: &[HarmonySkeleton],
    cfg: &GrpoConfig,
    sampling: &SamplingConfig,
    spec: &RewardSpec,
    embedder: Option<&dyn Embedder>,
    rng: &mut impl Rng,
    mut log: impl Write,
) -> Result<Vec<EpochReport>, PipelineError> {
    cfg.validate()?;
    sampling.validate()?;
    if skeletons.is_empty() {
        return Err(PipelineError::Config("no skeletons to roll out on".into()));
    }
    let reference = policy.clone();
    let mut opt = AdamW::new(0.0);
    let mut reports = Vec::new();
    for epoch in 0..cfg.epochs {
        let behavior = policy.clone();
        let mut groups = Vec::with_capacity(cfg.k);
        for k in 0..cfg.k {
            let sk = &skeletons[rng.gen_range(0..skeletons.len())];
            let seeds: Vec<u64> = (0..cfg.g).map(|_| rng.gen()).collect();
            let gens = rollouts(&behavior.0, sk, sampling, &seeds, cfg.workers)?;
            let mut group = Vec::with_capacity(gens.len());
            for (g, gen) in gens.into_iter().enumerate() {
                let r = reward(&gen.score, sk, spec, embedder)?;
                let d = d_total(&gen.score, sk, DissonanceParams::default(), &DissonanceMatrix::default())
                    .map_err(|e| PipelineError::Reward(e.to_string()))?;
                let rec = RolloutLog {
                    epoch,
                    k,
                    g,
                    reward: r,
                    d_hn: d.d_hn,
                    d_nn: d.d_nn,
                    trk: track_density(&gen.score).unwrap_or(0.0),
                };
                writeln!(log, "{}", serde_json::to_string(&rec).expect("log record serializes"))?;
                group.push((gen.window, r));
            }
            groups.push(group);
        }
        let step = grpo_step(policy, &behavior, &reference, &groups, cfg, &mut opt)?;
        reports.push(EpochReport {
            epoch,
            mean_reward: step.mean_reward,
            step,
        });
    }
    Ok(reports)
}
