//! Synthetic scenes for exercising GRPO with verifiable rewards end to end.
//!
//! Each scene gets a finite table of candidate responses. A categorical policy
//! over that table is sampled, every draw is serialized through the response
//! grammar, parsed back, and scored, so parsing, reward, and the policy update
//! all sit on the training path.

use std::collections::HashSet;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data_io::AnnotationSet;
use crate::grammar::{
    format_response, normalize_label, serialize_detection_answer, BBox, DetectionAnswer,
    Prediction, COORD_MAX,
};
use crate::grpo::{
    grpo_step, kl_divergence, CategoricalPolicy, GrpoError, Group, ReferencePolicy, TrainerConfig,
};
use crate::reward::{classification_reward, detection_reward, iou, GroundTruthInstance, RewardConfig};

/// Reasoning text emitted by every toy response.
pub const PLACEHOLDER_THINK: &str = "Compare each candidate against the query and pick the best one.";

pub const MAX_SCENE_BOXES: usize = 8;
pub const MIN_CANDIDATES: usize = 2;
pub const MAX_CANDIDATES: usize = 64;

/// Minimum IoU the action table must reach against every ground-truth box.
pub const COVERAGE_IOU: f64 = 0.9;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ToyError {
    #[error("scene '{scene}': {reason}")]
    InvalidScene { scene: String, reason: String },
    #[error("lattice too coarse: best IoU for ground-truth box {gt_index} of scene '{scene}' is {best_iou:.4} < 0.9")]
    LatticeTooCoarse {
        scene: String,
        gt_index: usize,
        best_iou: f64,
    },
    #[error("invalid lattice: {0}")]
    InvalidLattice(String),
    #[error("policy has {policy} actions but the table has {table}")]
    PolicyTableMismatch { policy: usize, table: usize },
    #[error("no scenes to train on")]
    NoScenes,
    #[error("step {step}: {source}")]
    Step { step: usize, source: GrpoError },
    #[error(transparent)]
    Grpo(#[from] GrpoError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SceneTask {
    Detection { category: String, boxes: Vec<BBox> },
    Classification { label: String, candidates: Vec<String> },
}

/// A query with ground truth in the implicit 0–1000 frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub id: String,
    pub task: SceneTask,
}

impl Scene {
    pub fn detection(id: impl Into<String>, category: impl Into<String>, boxes: Vec<BBox>) -> Result<Self, ToyError> {
        let s = Self {
            id: id.into(),
            task: SceneTask::Detection {
                category: category.into(),
                boxes,
            },
        };
        s.validate()?;
        Ok(s)
    }

    pub fn classification<S: Into<String>>(
        id: impl Into<String>,
        label: impl Into<String>,
        candidates: impl IntoIterator<Item = S>,
    ) -> Result<Self, ToyError> {
        let s = Self {
            id: id.into(),
            task: SceneTask::Classification {
                label: label.into(),
                candidates: candidates.into_iter().map(Into::into).collect(),
            },
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), ToyError> {
        let invalid = |reason: String| ToyError::InvalidScene {
            scene: self.id.clone(),
            reason,
        };
        match &self.task {
            SceneTask::Detection { boxes, .. } => {
                if boxes.len() > MAX_SCENE_BOXES {
                    return Err(invalid(format!(
                        "{} ground-truth boxes, at most {MAX_SCENE_BOXES} allowed",
                        boxes.len()
                    )));
                }
            }
            SceneTask::Classification { label, candidates } => {
                if !(MIN_CANDIDATES..=MAX_CANDIDATES).contains(&candidates.len()) {
                    return Err(invalid(format!(
                        "{} candidate labels, need {MIN_CANDIDATES}..={MAX_CANDIDATES}",
                        candidates.len()
                    )));
                }
                let mut seen = HashSet::new();
                for c in candidates {
                    let n = normalize_label(c);
                    if n.is_empty() {
                        return Err(invalid("empty candidate label".into()));
                    }
                    if !seen.insert(n) {
                        return Err(invalid(format!("duplicate candidate label '{c}'")));
                    }
                }
                if !seen.contains(&normalize_label(label)) {
                    return Err(invalid(format!("ground truth '{label}' not among candidates")));
                }
            }
        }
        Ok(())
    }

    fn ground_truth(&self) -> Vec<GroundTruthInstance> {
        match &self.task {
            SceneTask::Detection { category, boxes } => boxes
                .iter()
                .map(|b| GroundTruthInstance::new(category.clone(), *b))
                .collect(),
            SceneTask::Classification { .. } => Vec::new(),
        }
    }
}

/// Discretization used to build detection action tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatticeSpec {
    /// Spacing of box corners in normalized units.
    pub grid_step: i32,
    pub confidence_levels: Vec<f64>,
    /// Largest number of boxes in one action (1 or 2).
    pub max_set_size: usize,
    /// Lattice boxes kept per ground-truth box, ranked by IoU.
    pub anchors_per_gt: usize,
}

impl Default for LatticeSpec {
    fn default() -> Self {
        Self {
            grid_step: 125,
            confidence_levels: vec![0.30, 0.60, 0.90],
            max_set_size: 2,
            anchors_per_gt: 4,
        }
    }
}

impl LatticeSpec {
    fn validate(&self) -> Result<(), ToyError> {
        if !(1..=COORD_MAX).contains(&self.grid_step) {
            return Err(ToyError::InvalidLattice(format!("grid step {}", self.grid_step)));
        }
        if self.confidence_levels.is_empty()
            || self.confidence_levels.iter().any(|c| !(0.0..=1.0).contains(c))
        {
            return Err(ToyError::InvalidLattice("confidence levels must be in [0, 1]".into()));
        }
        if !(1..=2).contains(&self.max_set_size) {
            return Err(ToyError::InvalidLattice(format!("set size {}", self.max_set_size)));
        }
        if self.anchors_per_gt == 0 {
            return Err(ToyError::InvalidLattice("anchors_per_gt must be positive".into()));
        }
        Ok(())
    }

    fn positions(&self) -> Vec<i32> {
        let mut p: Vec<i32> = (0..=COORD_MAX).step_by(self.grid_step as usize).collect();
        if p.last() != Some(&COORD_MAX) {
            p.push(COORD_MAX);
        }
        p
    }

    fn lattice_boxes(&self) -> Vec<BBox> {
        let pos = self.positions();
        let mut out = Vec::new();
        for (i, &x1) in pos.iter().enumerate() {
            for &x2 in &pos[i + 1..] {
                for (j, &y1) in pos.iter().enumerate() {
                    for &y2 in &pos[j + 1..] {
                        out.push(BBox::new(x1.into(), y1.into(), x2.into(), y2.into()).expect("lattice box"));
                    }
                }
            }
        }
        out
    }

    fn snap(&self, v: i32) -> i32 {
        *self
            .positions()
            .iter()
            .min_by_key(|&&p| ((p - v).abs(), p))
            .expect("non-empty lattice")
    }

    /// Frame quadrants snapped to the lattice (the full frame when the lattice
    /// has no interior point); background anchors present in every table.
    fn distractors(&self) -> Vec<BBox> {
        let mid = self.snap(COORD_MAX / 2);
        if mid == 0 || mid == COORD_MAX {
            return vec![BBox::new(0, 0, COORD_MAX.into(), COORD_MAX.into()).expect("frame")];
        }
        let mut out = Vec::new();
        for (x1, x2) in [(0, mid), (mid, COORD_MAX)] {
            for (y1, y2) in [(0, mid), (mid, COORD_MAX)] {
                out.push(BBox::new(x1.into(), y1.into(), x2.into(), y2.into()).expect("quadrant"));
            }
        }
        out
    }
}

/// One candidate response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum Action {
    Boxes(Vec<Prediction>),
    NoObjects,
    Label(String),
}

impl Action {
    pub fn payload(&self) -> String {
        match self {
            Action::Boxes(p) => serialize_detection_answer(&DetectionAnswer::Boxes(p.clone())),
            Action::NoObjects => serialize_detection_answer(&DetectionAnswer::NoObjects),
            Action::Label(l) => l.clone(),
        }
    }

    /// Full tagged response text.
    pub fn response(&self) -> String {
        format_response(PLACEHOLDER_THINK, &self.payload())
    }
}

/// Dense table of candidate responses; action ids are indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionTable {
    actions: Vec<Action>,
}

impl ActionTable {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn get(&self, id: usize) -> Option<&Action> {
        self.actions.get(id)
    }

    pub fn actions(&self) -> &[Action] {
        &self.actions
    }

    pub fn position(&self, action: &Action) -> Option<usize> {
        self.actions.iter().position(|a| a == action)
    }
}

/// Enumerates the action table for a scene.
///
/// Detection tables hold, for every ground-truth box, the `anchors_per_gt`
/// lattice boxes of highest IoU, plus the four quadrant anchors; each anchor at
/// every confidence level, every unordered pair of distinct anchors at every
/// confidence combination, and `No Objects` last. Pairs are offered only
/// when `max_set_size` is 2 and the scene has at least two boxes: no action
/// lists more boxes than there are objects.
pub fn build_action_table(scene: &Scene, lattice: &LatticeSpec) -> Result<ActionTable, ToyError> {
    scene.validate()?;
    let boxes = match &scene.task {
        SceneTask::Classification { candidates, .. } => {
            return Ok(ActionTable {
                actions: candidates.iter().cloned().map(Action::Label).collect(),
            });
        }
        SceneTask::Detection { boxes, .. } => boxes,
    };
    lattice.validate()?;

    let all = lattice.lattice_boxes();
    let mut pool: Vec<BBox> = Vec::new();
    for (gi, gt) in boxes.iter().enumerate() {
        let mut ranked: Vec<(f64, BBox)> = all
            .iter()
            .map(|b| (iou(b, gt), *b))
            .filter(|(v, _)| *v > 0.0)
            .collect();
        ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let best = ranked.first().map_or(0.0, |r| r.0);
        if best < COVERAGE_IOU {
            return Err(ToyError::LatticeTooCoarse {
                scene: scene.id.clone(),
                gt_index: gi,
                best_iou: best,
            });
        }
        for (_, b) in ranked.into_iter().take(lattice.anchors_per_gt) {
            if !pool.contains(&b) {
                pool.push(b);
            }
        }
    }
    for b in lattice.distractors() {
        if !pool.contains(&b) {
            pool.push(b);
        }
    }

    let levels = &lattice.confidence_levels;
    let pred = |b: BBox, c: f64| Prediction::new(b, c).expect("validated confidence level");
    let mut actions = Vec::new();
    for &b in &pool {
        for &c in levels {
            actions.push(Action::Boxes(vec![pred(b, c)]));
        }
    }
    if lattice.max_set_size.min(boxes.len()) >= 2 {
        for i in 0..pool.len() {
            for j in i + 1..pool.len() {
                for &ci in levels {
                    for &cj in levels {
                        actions.push(Action::Boxes(vec![pred(pool[i], ci), pred(pool[j], cj)]));
                    }
                }
            }
        }
    }
    actions.push(Action::NoObjects);
    Ok(ActionTable { actions })
}

/// Scores a response text against the scene's ground truth.
pub fn score_response(scene: &Scene, response: &str, cfg: &RewardConfig) -> f64 {
    match &scene.task {
        SceneTask::Detection { .. } => detection_reward(response, &scene.ground_truth(), cfg).total,
        SceneTask::Classification { label, .. } => classification_reward(response, label, cfg).total,
    }
}

/// Reward of every action in the table.
pub fn enumerate_rewards(scene: &Scene, table: &ActionTable, cfg: &RewardConfig) -> Vec<f64> {
    table
        .actions
        .iter()
        .map(|a| score_response(scene, &a.response(), cfg))
        .collect()
}

/// Index of the highest-reward action; lowest index on ties.
pub fn best_action(rewards: &[f64]) -> usize {
    let mut best = 0;
    for (i, &r) in rewards.iter().enumerate() {
        if r > rewards[best] {
            best = i;
        }
    }
    best
}

/// Exact expected reward of a policy over the table.
pub fn expected_reward(policy: &CategoricalPolicy, rewards: &[f64]) -> f64 {
    policy.probs().iter().zip(rewards).map(|(p, r)| p * r).sum()
}

/// Samples a group, serializes, parses, and scores each member.
pub fn rollout<R: Rng + ?Sized>(
    policy: &CategoricalPolicy,
    scene: &Scene,
    table: &ActionTable,
    cfg: &TrainerConfig,
    reward_cfg: &RewardConfig,
    rng: &mut R,
) -> Result<Group, ToyError> {
    if policy.num_actions() != table.len() {
        return Err(ToyError::PolicyTableMismatch {
            policy: policy.num_actions(),
            table: table.len(),
        });
    }
    let actions = policy.sample(cfg.group_size, rng);
    let responses: Vec<String> = actions.iter().map(|&a| table.actions[a].response()).collect();
    let rewards = responses
        .iter()
        .map(|r| score_response(scene, r, reward_cfg))
        .collect();
    Ok(Group::new(scene.id.clone(), actions, responses, rewards, cfg.std_floor)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveRecord {
    pub step: usize,
    pub scene: usize,
    /// Mean reward of the sampled group.
    pub mean_reward: f64,
    /// KL to the reference before the update.
    pub kl: f64,
    pub grad_norm: f64,
    /// Probability of the reward-maximal action after the update.
    pub best_action_prob: f64,
    /// Exact expected reward after the update.
    pub expected_reward: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainingCurve {
    pub records: Vec<CurveRecord>,
}

impl TrainingCurve {
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("curve record serializes"));
            out.push('\n');
        }
        out
    }

    /// Plain-text table with roughly `rows` evenly spaced records.
    pub fn summary_table(&self, rows: usize) -> String {
        let mut out = format!(
            "{:>6} {:>5} {:>10} {:>10} {:>9} {:>9} {:>9}\n",
            "step", "scene", "mean_r", "expect_r", "kl", "|grad|", "p_best"
        );
        let n = self.records.len();
        if n == 0 {
            return out;
        }
        let stride = n.div_ceil(rows.max(1));
        for (i, r) in self.records.iter().enumerate() {
            if i % stride == 0 || i + 1 == n {
                let _ = writeln!(
                    out,
                    "{:>6} {:>5} {:>10.4} {:>10.4} {:>9.4} {:>9.4} {:>9.4}",
                    r.step, r.scene, r.mean_reward, r.expected_reward, r.kl, r.grad_norm, r.best_action_prob
                );
            }
        }
        out
    }
}

/// Everything a finished run produces, per scene where applicable.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub curve: TrainingCurve,
    pub tables: Vec<ActionTable>,
    pub rewards: Vec<Vec<f64>>,
    pub initial: Vec<CategoricalPolicy>,
    pub policies: Vec<CategoricalPolicy>,
}

impl TrainOutcome {
    pub fn best_actions(&self) -> Vec<usize> {
        self.rewards.iter().map(|r| best_action(r)).collect()
    }

    pub fn initial_expected_reward(&self) -> f64 {
        mean_over_scenes(&self.initial, &self.rewards)
    }

    pub fn final_expected_reward(&self) -> f64 {
        mean_over_scenes(&self.policies, &self.rewards)
    }

    /// Probability each final policy assigns to its scene's best action.
    pub fn final_best_action_probs(&self) -> Vec<f64> {
        self.policies
            .iter()
            .zip(self.best_actions())
            .map(|(p, b)| p.probs()[b])
            .collect()
    }
}

fn mean_over_scenes(policies: &[CategoricalPolicy], rewards: &[Vec<f64>]) -> f64 {
    let total: f64 = policies
        .iter()
        .zip(rewards)
        .map(|(p, r)| expected_reward(p, r))
        .sum();
    total / policies.len() as f64
}

/// Runs GRPO round-robin over the scenes, one tabular policy per scene, each
/// starting uniform and regularized toward its own frozen start.
pub fn train(
    scenes: &[Scene],
    cfg: &TrainerConfig,
    reward_cfg: &RewardConfig,
    lattice: &LatticeSpec,
) -> Result<TrainOutcome, ToyError> {
    if scenes.is_empty() {
        return Err(ToyError::NoScenes);
    }
    cfg.validate()?;
    let tables = scenes
        .iter()
        .map(|s| build_action_table(s, lattice))
        .collect::<Result<Vec<_>, _>>()?;
    let rewards: Vec<Vec<f64>> = scenes
        .iter()
        .zip(&tables)
        .map(|(s, t)| enumerate_rewards(s, t, reward_cfg))
        .collect();
    let best: Vec<usize> = rewards.iter().map(|r| best_action(r)).collect();
    let initial: Vec<CategoricalPolicy> = tables.iter().map(|t| CategoricalPolicy::uniform(t.len())).collect();
    let references: Vec<ReferencePolicy> = initial.iter().map(ReferencePolicy::freeze).collect();
    let mut policies = initial.clone();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut curve = TrainingCurve::default();
    for step in 0..cfg.steps {
        let s = step % scenes.len();
        let group = rollout(&policies[s], &scenes[s], &tables[s], cfg, reward_cfg, &mut rng)
            .map_err(|e| match e {
                ToyError::Grpo(source) => ToyError::Step { step, source },
                other => other,
            })?;
        let (next, stats) = grpo_step(&policies[s], &references[s], &group, cfg)
            .map_err(|source| ToyError::Step { step, source })?;
        policies[s] = next;
        curve.records.push(CurveRecord {
            step,
            scene: s,
            mean_reward: stats.mean_reward,
            kl: stats.kl,
            grad_norm: stats.grad_norm,
            best_action_prob: policies[s].probs()[best[s]],
            expected_reward: expected_reward(&policies[s], &rewards[s]),
        });
    }
    debug_assert!(policies
        .iter()
        .zip(&references)
        .all(|(p, r)| kl_divergence(p, r).is_ok()));
    Ok(TrainOutcome {
        curve,
        tables,
        rewards,
        initial,
        policies,
    })
}

/// Four-label plant classification query.
pub fn default_classification_scene() -> Scene {
    Scene::classification(
        "cls-0",
        "english marigold",
        ["english marigold", "sunflower", "barberton daisy", "pink primrose"],
    )
    .expect("valid default scene")
}

/// One lattice-aligned dog.
pub fn default_detection_scene() -> Scene {
    let gt = BBox::new(250, 375, 625, 875).expect("valid box");
    Scene::detection("det-0", "dog", vec![gt]).expect("valid default scene")
}

const LABEL_VOCAB: [&str; 16] = [
    "english marigold", "sunflower", "barberton daisy", "pink primrose", "globe thistle",
    "tiger lily", "moon orchid", "bird of paradise", "monkshood", "snapdragon", "colt's foot",
    "king protea", "spear thistle", "yellow iris", "globe-flower", "purple coneflower",
];

const CATEGORY_VOCAB: [&str; 8] = ["person", "dog", "cat", "car", "bus", "bird", "horse", "bottle"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SceneKind {
    Detection,
    Classification,
}

/// Procedural scenes. Classification scenes draw `labels` candidates from a
/// fixed vocabulary; detection scenes place 0–2 lattice-aligned boxes.
pub fn generate_scenes(kind: SceneKind, count: usize, labels: usize, lattice: &LatticeSpec, seed: u64) -> Result<Vec<Scene>, ToyError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pos = lattice.positions();
    (0..count)
        .map(|i| match kind {
            SceneKind::Classification => {
                let k = labels.clamp(MIN_CANDIDATES, LABEL_VOCAB.len());
                let cands: Vec<&str> = LABEL_VOCAB.choose_multiple(&mut rng, k).copied().collect();
                let gt = cands[rng.gen_range(0..cands.len())];
                Scene::classification(format!("cls-{i}"), gt, cands)
            }
            SceneKind::Detection => {
                let n = rng.gen_range(0..=2);
                let mut boxes = Vec::new();
                for _ in 0..n {
                    let xi = rng.gen_range(0..pos.len() - 1);
                    let xj = rng.gen_range(xi + 1..pos.len());
                    let yi = rng.gen_range(0..pos.len() - 1);
                    let yj = rng.gen_range(yi + 1..pos.len());
                    let b = BBox::new(pos[xi].into(), pos[yi].into(), pos[xj].into(), pos[yj].into())
                        .expect("lattice box");
                    boxes.push(b);
                }
                let cat = CATEGORY_VOCAB[rng.gen_range(0..CATEGORY_VOCAB.len())];
                Scene::detection(format!("det-{i}"), cat, boxes)
            }
        })
        .collect()
}

/// One detection scene per (image, category) pair present in the annotations.
pub fn scenes_from_annotations(ann: &AnnotationSet) -> Result<Vec<Scene>, ToyError> {
    let mut scenes = Vec::new();
    for image in &ann.images {
        for cat in &ann.categories {
            let boxes: Vec<BBox> = ann
                .instances
                .iter()
                .filter(|i| i.image_id == image.id && i.category == cat.name)
                .map(|i| i.bbox)
                .collect();
            if !boxes.is_empty() {
                scenes.push(Scene::detection(
                    format!("img{}-{}", image.id, cat.name),
                    cat.name.clone(),
                    boxes,
                )?);
            }
        }
    }
    Ok(scenes)
}
