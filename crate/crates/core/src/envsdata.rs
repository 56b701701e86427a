//! Synthetic two-domain control suite, scripted experts, mixed-quality dataset
//! generation and the binary trajectory format.

use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trajectory::{RewardScales, Trajectory, UnifiedStateLayout};

/// Width of the shared state vector: position (4), goal (4), velocity (4), domain flag.
pub const UNIFIED_STATE_DIM: usize = 13;
const POS: usize = 0;
const GOAL: usize = 4;
const VEL: usize = 8;
const FLAG: usize = 12;

pub const DATASET_MAGIC: &[u8; 4] = b"L2MD";
pub const DATASET_VERSION: u32 = 1;

const STEP: f32 = 0.1;
const PD_KP: f32 = 4.0;
const PD_KD: f32 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Domain {
    /// First-order point reaching: the action is a velocity command.
    PointReach,
    /// Second-order double integrator: the action is an acceleration.
    DoubleIntegrator,
}

impl Domain {
    pub fn name(self) -> &'static str {
        match self {
            Domain::PointReach => "point-reach",
            Domain::DoubleIntegrator => "double-integrator",
        }
    }

    pub fn horizon(self) -> usize {
        match self {
            Domain::PointReach => 20,
            Domain::DoubleIntegrator => 40,
        }
    }

    /// Roughly the best achievable return divided by ten.
    pub fn reward_scale(self) -> f32 {
        self.horizon() as f32 / 10.0
    }

    fn flag(self) -> f32 {
        match self {
            Domain::PointReach => 1.0,
            Domain::DoubleIntegrator => -1.0,
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

pub fn suite_reward_scales() -> RewardScales {
    RewardScales::new(&[
        (Domain::PointReach.name(), Domain::PointReach.reward_scale()),
        (Domain::DoubleIntegrator.name(), Domain::DoubleIntegrator.reward_scale()),
    ])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: String,
    pub domain: Domain,
    pub dim: usize,
    pub goal: Vec<f32>,
    pub horizon: usize,
    pub success_radius: f32,
}

impl TaskSpec {
    pub fn new(task_id: &str, domain: Domain, goal: &[f32]) -> Self {
        TaskSpec {
            task_id: task_id.to_string(),
            domain,
            dim: goal.len(),
            goal: goal.to_vec(),
            horizon: domain.horizon(),
            success_radius: 0.1,
        }
    }

    pub fn action_dim(&self) -> usize {
        self.dim
    }

    /// Local observation: position, goal, velocity (double integrator only), domain flag.
    pub fn state_dim(&self) -> usize {
        match self.domain {
            Domain::PointReach => 2 * self.dim + 1,
            Domain::DoubleIntegrator => 3 * self.dim + 1,
        }
    }

    /// Unified-space index of each local state dimension.
    pub fn layout_indices(&self) -> Vec<usize> {
        let k = self.dim;
        let mut idx: Vec<usize> = (0..k).map(|i| POS + i).chain((0..k).map(|i| GOAL + i)).collect();
        if self.domain == Domain::DoubleIntegrator {
            idx.extend((0..k).map(|i| VEL + i));
        }
        idx.push(FLAG);
        idx
    }

    pub fn reward_scale(&self) -> f32 {
        self.domain.reward_scale()
    }

    pub fn validate(&self) -> Result<()> {
        let ok_dim = match self.domain {
            Domain::PointReach => (1..=4).contains(&self.dim),
            Domain::DoubleIntegrator => (1..=4).contains(&self.dim),
        };
        if !ok_dim || self.goal.len() != self.dim || self.goal.iter().any(|g| !(-1.0..=1.0).contains(g)) {
            return Err(Error::config(format!(
                "task `{}` has an invalid goal/dimension",
                self.task_id
            )));
        }
        Ok(())
    }
}

/// Pre-training split: four tasks per domain.
pub fn pretrain_tasks() -> Vec<TaskSpec> {
    use Domain::*;
    vec![
        TaskSpec::new("reach2-ne", PointReach, &[0.8, 0.8]),
        TaskSpec::new("reach2-sw", PointReach, &[-0.8, -0.8]),
        TaskSpec::new("reach3-pos", PointReach, &[0.8, 0.8, 0.8]),
        TaskSpec::new("reach3-neg", PointReach, &[-0.8, -0.8, -0.8]),
        TaskSpec::new("integ1-right", DoubleIntegrator, &[0.8]),
        TaskSpec::new("integ1-left", DoubleIntegrator, &[-0.8]),
        TaskSpec::new("integ4-pos", DoubleIntegrator, &[0.6, 0.6, 0.6, 0.6]),
        TaskSpec::new("integ4-neg", DoubleIntegrator, &[-0.6, -0.6, -0.6, -0.6]),
    ]
}

/// Held-out fine-tuning sequence: two tasks per domain.
pub fn finetune_tasks() -> Vec<TaskSpec> {
    use Domain::*;
    vec![
        TaskSpec::new("reach2-nw", PointReach, &[-0.8, 0.8]),
        TaskSpec::new("integ4-mixed", DoubleIntegrator, &[0.6, -0.6, 0.6, -0.6]),
        TaskSpec::new("reach3-mixed", PointReach, &[0.8, -0.8, 0.8]),
        TaskSpec::new("integ1-edge", DoubleIntegrator, &[0.0]),
    ]
}

pub fn all_tasks() -> Vec<TaskSpec> {
    let mut t = pretrain_tasks();
    t.extend(finetune_tasks());
    t
}

pub fn find_task(task_id: &str) -> Result<TaskSpec> {
    all_tasks()
        .into_iter()
        .find(|t| t.task_id == task_id)
        .ok_or_else(|| Error::UnknownTask(task_id.to_string()))
}

pub fn suite_layout(tasks: &[TaskSpec]) -> Result<UnifiedStateLayout> {
    let mut layout = UnifiedStateLayout::new(UNIFIED_STATE_DIM);
    for t in tasks {
        layout.register(t.task_id.clone(), t.layout_indices())?;
    }
    Ok(layout)
}

fn norm(v: impl Iterator<Item = f32>) -> f32 {
    v.map(|x| x * x).sum::<f32>().sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub state: Vec<f32>,
    pub reward: f32,
    pub done: bool,
}

/// A running episode of one task.
#[derive(Debug, Clone)]
pub struct Env {
    pub spec: TaskSpec,
    pos: Vec<f32>,
    vel: Vec<f32>,
    t: usize,
}

impl Env {
    /// Position uniform in `[-0.5, 0.5]^k`, zero velocity.
    pub fn reset(spec: &TaskSpec, seed: u64) -> (Env, Vec<f32>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pos = (0..spec.dim).map(|_| rng.gen_range(-0.5f32..=0.5)).collect();
        let env = Env {
            spec: spec.clone(),
            pos,
            vel: vec![0.0; spec.dim],
            t: 0,
        };
        let s = env.observe();
        (env, s)
    }

    pub fn from_parts(spec: &TaskSpec, pos: &[f32], vel: &[f32]) -> Env {
        Env {
            spec: spec.clone(),
            pos: pos.to_vec(),
            vel: vel.to_vec(),
            t: 0,
        }
    }

    pub fn observe(&self) -> Vec<f32> {
        let mut s = Vec::with_capacity(self.spec.state_dim());
        s.extend_from_slice(&self.pos);
        s.extend_from_slice(&self.spec.goal);
        if self.spec.domain == Domain::DoubleIntegrator {
            s.extend_from_slice(&self.vel);
        }
        s.push(self.spec.domain.flag());
        s
    }

    pub fn position(&self) -> &[f32] {
        &self.pos
    }

    pub fn timestep(&self) -> usize {
        self.t
    }

    pub fn distance(&self) -> f32 {
        norm(self.pos.iter().zip(&self.spec.goal).map(|(p, g)| p - g))
    }

    pub fn success(&self) -> bool {
        self.distance() < self.spec.success_radius
    }

    pub fn step(&mut self, a: &[f32]) -> Result<StepOutcome> {
        if a.len() != self.spec.dim {
            return Err(Error::ShapeMismatch {
                op: "env_step action",
                left: vec![a.len()],
                right: vec![self.spec.dim],
            });
        }
        if self.t >= self.spec.horizon {
            return Err(Error::invalid("episode already finished"));
        }
        for (i, &raw) in a.iter().enumerate().take(self.spec.dim) {
            let ai = raw.clamp(-1.0, 1.0);
            match self.spec.domain {
                Domain::PointReach => self.pos[i] = (self.pos[i] + STEP * ai).clamp(-1.0, 1.0),
                Domain::DoubleIntegrator => {
                    self.vel[i] = (self.vel[i] + STEP * ai).clamp(-1.0, 1.0);
                    self.pos[i] = (self.pos[i] + STEP * self.vel[i]).clamp(-1.0, 1.0);
                }
            }
        }
        self.t += 1;
        Ok(StepOutcome {
            state: self.observe(),
            reward: (1.0 - self.distance()).max(0.0),
            done: self.t >= self.spec.horizon,
        })
    }
}

/// Goal-seeking controller. With probability `eps` the action is uniform random.
pub fn scripted_expert<R: Rng + ?Sized>(spec: &TaskSpec, state: &[f32], eps: f64, rng: &mut R) -> Vec<f32> {
    if eps > 0.0 && rng.gen::<f64>() < eps {
        return (0..spec.dim).map(|_| rng.gen_range(-1.0f32..=1.0)).collect();
    }
    let k = spec.dim;
    (0..k)
        .map(|i| {
            let err = spec.goal[i] - state[i];
            let a = match spec.domain {
                Domain::PointReach => err / STEP,
                Domain::DoubleIntegrator => PD_KP * err - PD_KD * state[2 * k + i],
            };
            a.clamp(-1.0, 1.0)
        })
        .collect()
}

/// One rollout of the scripted expert.
pub fn rollout_expert(spec: &TaskSpec, eps: f64, seed: u64) -> Result<(Trajectory, bool)> {
    let (mut env, mut s) = Env::reset(spec, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let (mut states, mut actions, mut rewards) = (Vec::new(), Vec::new(), Vec::new());
    loop {
        let a = scripted_expert(spec, &s, eps, &mut rng);
        let out = env.step(&a)?;
        states.extend_from_slice(&s);
        actions.extend_from_slice(&a);
        rewards.push(out.reward);
        s = out.state;
        if out.done {
            break;
        }
    }
    let traj = Trajectory::new(
        spec.task_id.clone(),
        spec.state_dim(),
        spec.dim,
        states,
        actions,
        rewards,
    )?;
    Ok((traj, env.success()))
}

/// `(ε, fraction)` pairs describing behaviour quality.
#[derive(Debug, Clone, PartialEq)]
pub struct Mixture(pub Vec<(f64, f64)>);

impl Default for Mixture {
    fn default() -> Self {
        Mixture(vec![(1.0, 0.2), (0.5, 0.2), (0.25, 0.2), (0.1, 0.2), (0.0, 0.2)])
    }
}

impl Mixture {
    pub fn expert_only() -> Self {
        Mixture(vec![(0.0, 1.0)])
    }

    pub fn validate(&self) -> Result<()> {
        let total: f64 = self.0.iter().map(|(_, f)| f).sum();
        if self.0.is_empty()
            || (total - 1.0).abs() > 1e-9
            || self.0.iter().any(|(e, f)| !(0.0..=1.0).contains(e) || *f < 0.0)
        {
            return Err(Error::config(
                "mixture must be (ε ∈ [0,1], fraction ≥ 0) pairs summing to 1",
            ));
        }
        Ok(())
    }

    /// Episode count per level; rounding leftovers go to the last level.
    pub fn counts(&self, n: usize) -> Vec<usize> {
        let mut out: Vec<usize> = self.0.iter().map(|(_, f)| (f * n as f64).floor() as usize).collect();
        let assigned: usize = out.iter().sum();
        if let Some(last) = out.last_mut() {
            *last += n - assigned;
        }
        out
    }
}

/// Per-task statistics stored next to each dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetMeta {
    pub task_id: String,
    pub max_return: f32,
    pub expert_score: f32,
    pub random_score: f32,
}

impl DatasetMeta {
    pub fn to_kv(&self) -> String {
        format!(
            "task_id={}\nmax_return={}\nexpert_score={}\nrandom_score={}\n",
            self.task_id, self.max_return, self.expert_score, self.random_score
        )
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut task_id = None;
        let (mut max_return, mut expert, mut random) = (None, None, None);
        for line in text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
        {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Malformed(format!("metadata line `{line}`")))?;
            let num = || {
                v.trim()
                    .parse::<f32>()
                    .map_err(|_| Error::Malformed(format!("metadata value `{v}` for `{k}`")))
            };
            match k.trim() {
                "task_id" => task_id = Some(v.trim().to_string()),
                "max_return" => max_return = Some(num()?),
                "expert_score" => expert = Some(num()?),
                "random_score" => random = Some(num()?),
                _ => {}
            }
        }
        let missing = |k: &str| Error::Malformed(format!("metadata is missing `{k}`"));
        Ok(DatasetMeta {
            task_id: task_id.ok_or_else(|| missing("task_id"))?,
            max_return: max_return.ok_or_else(|| missing("max_return"))?,
            expert_score: expert.ok_or_else(|| missing("expert_score"))?,
            random_score: random.ok_or_else(|| missing("random_score"))?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: TaskSpec,
    pub episodes: Vec<Trajectory>,
    pub meta: DatasetMeta,
}

/// Episodes from each mixture level in turn, seeded per episode.
pub fn generate_dataset(spec: &TaskSpec, n_episodes: usize, mixture: &Mixture, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    mixture.validate()?;
    let mut episodes = Vec::with_capacity(n_episodes);
    let (mut expert, mut random) = (Vec::new(), Vec::new());
    let mut seeds = ChaCha8Rng::seed_from_u64(seed);
    for (&(eps, _), count) in mixture.0.iter().zip(mixture.counts(n_episodes)) {
        for _ in 0..count {
            let (traj, _) = rollout_expert(spec, eps, seeds.gen())?;
            if eps == 0.0 {
                expert.push(traj.total_return());
            }
            if eps == 1.0 {
                random.push(traj.total_return());
            }
            episodes.push(traj);
        }
    }
    // reference scores come from dedicated rollouts when the mixture lacks a level
    let mut reference = |eps: f64, pool: &mut Vec<f32>| -> Result<f32> {
        if pool.is_empty() {
            for _ in 0..20 {
                pool.push(rollout_expert(spec, eps, seeds.gen())?.0.total_return());
            }
        }
        Ok(pool.iter().sum::<f32>() / pool.len() as f32)
    };
    let expert_score = reference(0.0, &mut expert)?;
    let random_score = reference(1.0, &mut random)?;
    let max_return = episodes
        .iter()
        .map(Trajectory::total_return)
        .fold(f32::NEG_INFINITY, f32::max);
    Ok(Dataset {
        spec: spec.clone(),
        meta: DatasetMeta {
            task_id: spec.task_id.clone(),
            max_return,
            expert_score,
            random_score,
        },
        episodes,
    })
}

pub fn dataset_path(dir: &Path, task_id: &str) -> PathBuf {
    dir.join(format!("{task_id}.l2md"))
}

pub fn meta_path(dir: &Path, task_id: &str) -> PathBuf {
    dir.join(format!("{task_id}.meta"))
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::invalid(format!("{v} does not fit the u32 header field")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

/// Serialises episodes of one task. All episodes must share the task's horizon.
pub fn encode_dataset(task_id: &str, episodes: &[Trajectory]) -> Result<Vec<u8>> {
    let first = episodes
        .first()
        .ok_or_else(|| Error::invalid("refusing to write an empty dataset"))?;
    let (sd, ad, horizon) = (first.state_dim, first.action_dim, first.len());
    let mut out = Vec::new();
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    put_u32(&mut out, task_id.len())?;
    out.extend_from_slice(task_id.as_bytes());
    for v in [sd, ad, horizon, episodes.len()] {
        put_u32(&mut out, v)?;
    }
    for ep in episodes {
        if ep.state_dim != sd || ep.action_dim != ad || ep.len() != horizon {
            return Err(Error::invalid(
                "episodes in one dataset must share dimensions and horizon",
            ));
        }
        for t in 0..horizon {
            ep.state(t).iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
            ep.action(t)
                .iter()
                .for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
            out.extend_from_slice(&ep.rewards[t].to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    at: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.buf.len() - self.at < n {
            return Err(Error::Truncated {
                expected: (self.at + n) as u64,
                found: self.buf.len() as u64,
            });
        }
        let s = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        Ok(self
            .take(4 * n)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn decode_dataset(buf: &[u8]) -> Result<(String, Vec<Trajectory>)> {
    let magic = &buf[..buf.len().min(4)];
    if magic != DATASET_MAGIC {
        return Err(Error::BadMagic {
            expected: "L2MD".into(),
            found: String::from_utf8_lossy(magic).into_owned(),
        });
    }
    let mut c = Cursor { buf, at: 4 };
    let version = c.u32()?;
    if version != DATASET_VERSION {
        return Err(Error::VersionMismatch {
            expected: DATASET_VERSION,
            found: version,
        });
    }
    let id_len = c.u32()? as usize;
    let task_id =
        String::from_utf8(c.take(id_len)?.to_vec()).map_err(|_| Error::Malformed("task id is not UTF-8".into()))?;
    let (sd, ad, horizon, n) = (
        c.u32()? as usize,
        c.u32()? as usize,
        c.u32()? as usize,
        c.u32()? as usize,
    );
    let per_step = sd + ad + 1;
    let expected = c.at as u64 + 4 * (per_step * horizon * n) as u64;
    if (buf.len() as u64) < expected {
        return Err(Error::Truncated {
            expected,
            found: buf.len() as u64,
        });
    }
    if buf.len() as u64 != expected {
        return Err(Error::Malformed(format!(
            "{} trailing bytes after the last episode",
            buf.len() as u64 - expected
        )));
    }
    let mut episodes = Vec::with_capacity(n);
    for _ in 0..n {
        let (mut s, mut a, mut r) = (Vec::new(), Vec::new(), Vec::new());
        for _ in 0..horizon {
            s.extend(c.f32s(sd)?);
            a.extend(c.f32s(ad)?);
            r.push(c.f32s(1)?[0]);
        }
        episodes.push(Trajectory::new(task_id.clone(), sd, ad, s, a, r)?);
    }
    Ok((task_id, episodes))
}

pub fn write_dataset(path: &Path, task_id: &str, episodes: &[Trajectory]) -> Result<()> {
    let bytes = encode_dataset(task_id, episodes)?;
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<(String, Vec<Trajectory>)> {
    decode_dataset(&fs::read(path)?)
}

/// Writes `<task>.l2md` and `<task>.meta` into `dir`.
pub fn save_dataset(dir: &Path, ds: &Dataset) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_dataset(&dataset_path(dir, &ds.spec.task_id), &ds.spec.task_id, &ds.episodes)?;
    fs::write(meta_path(dir, &ds.spec.task_id), ds.meta.to_kv())?;
    Ok(())
}

pub fn load_dataset(dir: &Path, spec: &TaskSpec) -> Result<Dataset> {
    let path = dataset_path(dir, &spec.task_id);
    if !path.exists() {
        return Err(Error::MissingDataset {
            task: spec.task_id.clone(),
            path,
        });
    }
    let (task_id, episodes) = read_dataset(&path)?;
    if task_id != spec.task_id {
        return Err(Error::Malformed(format!(
            "{} holds task `{task_id}`, expected `{}`",
            path.display(),
            spec.task_id
        )));
    }
    let mpath = meta_path(dir, &spec.task_id);
    let meta = match fs::read_to_string(&mpath) {
        Ok(text) => DatasetMeta::from_kv(&text)?,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(Error::MissingDataset {
                task: spec.task_id.clone(),
                path: mpath,
            })
        }
        Err(e) => return Err(e.into()),
    };
    Ok(Dataset {
        spec: spec.clone(),
        episodes,
        meta,
    })
}

impl FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "point-reach" | "A" => Ok(Domain::PointReach),
            "double-integrator" | "B" => Ok(Domain::DoubleIntegrator),
            other => Err(Error::config(format!("unknown domain `{other}`"))),
        }
    }
}
