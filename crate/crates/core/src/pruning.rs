//! Token-pruning layer: one shared actor MLP deciding prune/preserve per token
//! and one shared centralized critic scoring each agent.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::game::{AgentStep, Trajectory};
use crate::numerics::{Graph, ParamSet, Scalar, Tensor, Var};
use crate::rng::{substream, Stream};
use crate::vit::{KeepMask, PruneHook, StageState};

pub const PRUNE: u8 = 0;
pub const PRESERVE: u8 = 1;

/// Which decision maker drives the pruning layers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
#[derive(Default)]
pub enum PolicyMode {
    /// One agent per token, sharing the actor.
    #[default]
    Mappo,
    /// One decision distribution per layer computed from the class token alone.
    SingleAgent,
    /// Keep each token independently with probability `keep_prob`.
    Random { keep_prob: f64 },
}

impl PolicyMode {
    pub fn validate(&self) -> Result<()> {
        match self {
            PolicyMode::Random { keep_prob } if !(0.0..=1.0).contains(keep_prob) => {
                Err(Error::Config(format!("keep_prob {keep_prob} outside [0, 1]")))
            }
            _ => Ok(()),
        }
    }

    pub fn is_learnable(&self) -> bool {
        !matches!(self, PolicyMode::Random { .. })
    }

    pub fn label(&self) -> String {
        match self {
            PolicyMode::Mappo => "mappo".into(),
            PolicyMode::SingleAgent => "single_agent".into(),
            PolicyMode::Random { keep_prob } => format!("random({keep_prob})"),
        }
    }
}

/// Sampling during trajectory collection, argmax at inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActMode {
    Train,
    Eval,
}

/// Fully connected network with GELU between layers and no normalization.
#[derive(Debug, Clone)]
pub struct Mlp<F: Scalar> {
    pub sizes: Vec<usize>,
    pub params: ParamSet<F>,
}

impl<F: Scalar> Mlp<F> {
    /// `out_std` scales the final layer's initial weights.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], out_std: f64, rng: &mut R) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs input and output widths");
        let mut params = ParamSet::new();
        let last = sizes.len() - 2;
        for (i, w) in sizes.windows(2).enumerate() {
            let std = if i == last { out_std } else { (2.0 / w[0] as f64).sqrt() };
            params.push(format!("fc{i}.weight"), Tensor::randn(&[w[0], w[1]], std, rng));
            params.push(format!("fc{i}.bias"), Tensor::zeros(&[w[1]]));
        }
        Self {
            sizes: sizes.to_vec(),
            params,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().expect("non-empty")
    }

    pub fn forward_graph(&self, g: &mut Graph<'_, F>, vars: &[Var], x: Var) -> Var {
        let layers = self.sizes.len() - 1;
        let mut h = x;
        for i in 0..layers {
            h = g.matmul(h, vars[2 * i]);
            h = g.add_bias(h, vars[2 * i + 1]);
            if i + 1 < layers {
                h = g.gelu(h);
            }
        }
        h
    }

    /// Row-wise evaluation of `[n, in] -> [n, out]`.
    pub fn forward(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        if x.shape.len() != 2 || x.shape[1] != self.input_dim() {
            return Err(Error::Shape(format!(
                "MLP input {:?} does not match width {}",
                x.shape,
                self.input_dim()
            )));
        }
        let mut g = Graph::new();
        let vars = g.bind(&self.params, false);
        let xv = g.constant(x.clone());
        let y = self.forward_graph(&mut g, &vars, xv);
        Ok(g.tensor(y))
    }
}

/// Shared policy network: token feature `D` to two logits (prune, preserve).
#[derive(Debug, Clone)]
pub struct ActorNet<F: Scalar> {
    pub mlp: Mlp<F>,
}

/// Shared value network: token feature concatenated with the class token.
#[derive(Debug, Clone)]
pub struct CriticNet<F: Scalar> {
    pub mlp: Mlp<F>,
}

impl<F: Scalar> ActorNet<F> {
    /// Layer widths `(D, 4D, 256, 64, 2)`.
    pub fn sizes(embed_dim: usize) -> Vec<usize> {
        vec![embed_dim, 4 * embed_dim, 256, 64, 2]
    }

    pub fn new<R: Rng + ?Sized>(embed_dim: usize, rng: &mut R) -> Self {
        Self {
            mlp: Mlp::new(&Self::sizes(embed_dim), 0.01, rng),
        }
    }
}

impl<F: Scalar> CriticNet<F> {
    /// Layer widths `(2D, 4D, 256, 64, 1)`.
    pub fn sizes(embed_dim: usize) -> Vec<usize> {
        vec![2 * embed_dim, 4 * embed_dim, 256, 64, 1]
    }

    pub fn new<R: Rng + ?Sized>(embed_dim: usize, rng: &mut R) -> Self {
        Self {
            mlp: Mlp::new(&Self::sizes(embed_dim), 1.0 / 8.0, rng),
        }
    }
}

/// The single actor/critic pair shared by every pruning layer of a model.
#[derive(Debug, Clone)]
pub struct PolicyNets<F: Scalar> {
    pub actor: ActorNet<F>,
    pub critic: CriticNet<F>,
}

impl<F: Scalar> PolicyNets<F> {
    pub fn new(embed_dim: usize, seed: u64) -> Self {
        Self {
            actor: ActorNet::new(embed_dim, &mut substream(seed, Stream::WeightInit, 1)),
            critic: CriticNet::new(embed_dim, &mut substream(seed, Stream::WeightInit, 2)),
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.actor.mlp.input_dim()
    }
}

/// Two logits per agent for `[n_active, D]` token features.
pub fn actor_logits<F: Scalar>(actor: &ActorNet<F>, token_features: &Tensor<F>) -> Result<Tensor<F>> {
    if token_features.shape.first() == Some(&0) {
        return Ok(Tensor::zeros(&[0, 2]));
    }
    actor.mlp.forward(token_features)
}

/// Row-wise concatenation `[local ∥ global]`.
pub fn critic_input<F: Scalar>(token_features: &[F], class_feature: &[F]) -> Tensor<F> {
    let d = class_feature.len();
    let n = token_features.len() / d;
    let mut values = Vec::with_capacity(n * 2 * d);
    for row in token_features.chunks_exact(d) {
        values.extend_from_slice(row);
        values.extend_from_slice(class_feature);
    }
    Tensor::new(&[n, 2 * d], values).expect("concatenated rows")
}

/// One value per agent from `[n_active, D]` token features and the class token.
pub fn critic_values<F: Scalar>(
    critic: &CriticNet<F>,
    token_features: &Tensor<F>,
    class_feature: &[F],
) -> Result<Vec<F>> {
    let d = class_feature.len();
    if token_features.shape.len() != 2 || token_features.shape[1] != d || 2 * d != critic.mlp.input_dim() {
        return Err(Error::Shape(format!(
            "critic input {:?} with class feature of width {d}",
            token_features.shape
        )));
    }
    if token_features.shape[0] == 0 {
        return Ok(Vec::new());
    }
    Ok(critic
        .mlp
        .forward(&critic_input(&token_features.values, class_feature))?
        .values)
}

/// `log softmax` of a logit pair.
pub fn log_probs_pair(l0: f64, l1: f64) -> (f64, f64) {
    let m = l0.max(l1);
    let lse = m + ((l0 - m).exp() + (l1 - m).exp()).ln();
    (l0 - lse, l1 - lse)
}

/// Draws (train) or selects (eval) one action per logit pair.
///
/// Returns actions and the log-probability of each chosen action. Ties at eval
/// time resolve to preserve.
pub fn sample_actions<F: Scalar, R: Rng + ?Sized>(
    logits: &Tensor<F>,
    mode: ActMode,
    rng: &mut R,
) -> (Vec<u8>, Vec<f64>) {
    let n = logits.values.len() / 2;
    let mut actions = Vec::with_capacity(n);
    let mut logps = Vec::with_capacity(n);
    for pair in logits.values.chunks_exact(2) {
        let (lp0, lp1) = log_probs_pair(pair[0].f64(), pair[1].f64());
        let a = match mode {
            ActMode::Eval => u8::from(lp1 >= lp0),
            ActMode::Train => u8::from(rng.random::<f64>() < lp1.exp()),
        };
        actions.push(a);
        logps.push(if a == PRESERVE { lp1 } else { lp0 });
    }
    (actions, logps)
}

/// Independent keep draws with probability `keep_prob`; no learnable state.
pub fn sample_random<R: Rng + ?Sized>(n: usize, keep_prob: f64, rng: &mut R) -> (Vec<u8>, Vec<f64>) {
    (0..n)
        .map(|_| {
            let keep = rng.random::<f64>() < keep_prob;
            let p = if keep { keep_prob } else { 1.0 - keep_prob };
            (u8::from(keep), p.ln())
        })
        .unzip()
}

/// Clears the keep flag of every active token of image `image` whose action is
/// prune. Returns the number of kept non-class tokens afterwards (`n^l`).
pub fn apply_prune(mask: &mut KeepMask, image: usize, actions: &[u8], active: &[usize]) -> Result<usize> {
    if actions.len() != active.len() {
        return Err(Error::Invariant(format!(
            "{} actions for {} active tokens",
            actions.len(),
            active.len()
        )));
    }
    for &t in active {
        if t == 0 {
            return Err(Error::Invariant("the class token is not an agent".into()));
        }
        if t >= mask.tokens() || !mask.get(image, t) {
            return Err(Error::Invariant(format!("token {t} is not active")));
        }
    }
    for (&t, &a) in active.iter().zip(actions) {
        match a {
            PRUNE => mask.set(image, t, false),
            PRESERVE => {}
            other => {
                return Err(Error::Invariant(format!(
                    "action {other} is neither prune nor preserve"
                )))
            }
        }
    }
    Ok(mask.kept_non_class(image))
}

/// Pruning hook driven by a policy; optionally records Markov-game steps.
#[derive(Debug)]
pub struct PolicyPruner<'a, F: Scalar> {
    nets: &'a PolicyNets<F>,
    mode: PolicyMode,
    act: ActMode,
    rng: ChaCha8Rng,
    record: bool,
    num_stages: usize,
    /// One per image, filled when recording.
    pub trajectories: Vec<Trajectory<F>>,
}

impl<'a, F: Scalar> PolicyPruner<'a, F> {
    pub fn new(nets: &'a PolicyNets<F>, mode: PolicyMode, act: ActMode, rng: ChaCha8Rng) -> Self {
        Self {
            nets,
            mode,
            act,
            rng,
            record: false,
            num_stages: 0,
            trajectories: Vec::new(),
        }
    }

    /// Records a trajectory per image; `image_ids` label them.
    pub fn recording(mut self, image_ids: &[usize], num_stages: usize) -> Self {
        self.record = true;
        self.num_stages = num_stages;
        self.trajectories = image_ids.iter().map(|&id| Trajectory::new(id)).collect();
        self
    }

    pub fn mode(&self) -> PolicyMode {
        self.mode
    }
}

impl<F: Scalar> PruneHook<F> for PolicyPruner<'_, F> {
    fn decide(&mut self, state: &StageState<'_, F>) -> Result<Vec<Vec<u8>>> {
        let d = state.dim;
        let counts: Vec<usize> = state.active_rows.iter().map(Vec::len).collect();
        let total: usize = counts.iter().sum();

        // Per-agent local features: the token itself, or the class token for
        // the single-agent policy.
        let mut local = Vec::with_capacity(total * d);
        let mut global = Vec::with_capacity(total * d);
        for b in 0..state.batch {
            for &r in &state.active_rows[b] {
                match self.mode {
                    PolicyMode::SingleAgent => local.extend_from_slice(state.cls(b)),
                    _ => local.extend_from_slice(state.row(b, r)),
                }
                global.extend_from_slice(state.cls(b));
            }
        }

        let (actions, logps) = match self.mode {
            PolicyMode::Random { keep_prob } => sample_random(total, keep_prob, &mut self.rng),
            PolicyMode::Mappo => {
                let logits = actor_logits(&self.nets.actor, &Tensor::new(&[total, d], local.clone())?)?;
                sample_actions(&logits, self.act, &mut self.rng)
            }
            PolicyMode::SingleAgent => {
                // One policy evaluation per image, shared by all its tokens.
                let mut cls = Vec::with_capacity(state.batch * d);
                for b in 0..state.batch {
                    cls.extend_from_slice(state.cls(b));
                }
                let per_image = actor_logits(&self.nets.actor, &Tensor::new(&[state.batch, d], cls)?)?;
                let mut expanded = Vec::with_capacity(total * 2);
                for (b, n) in counts.iter().enumerate() {
                    for _ in 0..*n {
                        expanded.extend_from_slice(&per_image.values[2 * b..2 * b + 2]);
                    }
                }
                sample_actions(&Tensor::new(&[total, 2], expanded)?, self.act, &mut self.rng)
            }
        };

        if self.record {
            let values: Vec<f64> = if self.mode.is_learnable() && self.act == ActMode::Train && total > 0 {
                let input = {
                    let mut v = Vec::with_capacity(total * 2 * d);
                    for (l, gl) in local.chunks_exact(d).zip(global.chunks_exact(d)) {
                        v.extend_from_slice(l);
                        v.extend_from_slice(gl);
                    }
                    Tensor::new(&[total, 2 * d], v)?
                };
                self.nets
                    .critic
                    .mlp
                    .forward(&input)?
                    .values
                    .iter()
                    .map(|v| v.f64())
                    .collect()
            } else {
                vec![0.0; total]
            };
            let last = state.stage + 1 == self.num_stages;
            let mut off = 0;
            for b in 0..state.batch {
                let tokens = state.active_tokens(b);
                let layer: Vec<AgentStep<F>> = tokens
                    .iter()
                    .enumerate()
                    .map(|(i, &tok)| {
                        let j = off + i;
                        AgentStep::new(
                            state.stage,
                            tok,
                            local[j * d..(j + 1) * d].to_vec(),
                            global[j * d..(j + 1) * d].to_vec(),
                            actions[j],
                            logps[j],
                            values[j],
                            last,
                        )
                    })
                    .collect();
                self.trajectories[b].layers.push(layer);
                off += tokens.len();
            }
        }

        let mut out = Vec::with_capacity(state.batch);
        let mut off = 0;
        for n in counts {
            out.push(actions[off..off + n].to_vec());
            off += n;
        }
        Ok(out)
    }
}
