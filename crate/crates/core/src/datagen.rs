//! Episode generation with paired domains, loss-specific batch assembly, and
//! the "CDRD" dataset format.
//!
//! Datasets hold physical states, domains, and actions only. Observations are
//! re-rendered on demand, which is lossless because rendering is a pure
//! function of (state, domain, resolution).

use std::io::{self, Read, Write};

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::contrastive::LossVariant;
use crate::renderer::{self, DomainParams, Observation, RenderError, TextureFamily, TextureSpec};
use crate::worldsim::{self, ActionPush, Body, SceneConfig, Shape, SimError, Vec2, WorldState};

pub const DATASET_MAGIC: &[u8; 4] = b"CDRD";
pub const DATASET_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum DatagenError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("dataset file: {0}")]
    Format(String),
    #[error("episodes need at least {min} frames, got {got}")]
    TooFewFrames { min: usize, got: usize },
    #[error("batch of {requested} exceeds the {available} available items")]
    BatchTooLarge { requested: usize, available: usize },
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, DatagenError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Paradigm {
    Uncontrolled,
    Controlled,
}

impl Paradigm {
    fn id(self) -> u8 {
        match self {
            Paradigm::Uncontrolled => 0,
            Paradigm::Controlled => 1,
        }
    }

    fn from_id(id: u8) -> Option<Self> {
        match id {
            0 => Some(Paradigm::Uncontrolled),
            1 => Some(Paradigm::Controlled),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Paradigm::Uncontrolled => "uncontrolled",
            Paradigm::Controlled => "controlled",
        }
    }
}

impl std::str::FromStr for Paradigm {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "uncontrolled" => Ok(Paradigm::Uncontrolled),
            "controlled" => Ok(Paradigm::Controlled),
            other => Err(format!("unknown paradigm `{other}`")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    fn id(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }
    }

    fn from_id(id: u8) -> Option<Self> {
        match id {
            0 => Some(Split::Train),
            1 => Some(Split::Val),
            2 => Some(Split::Test),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// First episode seed for a split. Splits occupy disjoint seed ranges as long
/// as fewer than 2³² episodes are drawn per split.
pub fn split_seed_base(global_seed: u64, split: Split) -> u64 {
    let split_bits = match split {
        Split::Train | Split::Val => 0u64,
        Split::Test => 1,
    };
    (split_bits << 60) | ((global_seed & 0x0FFF_FFFF) << 32)
}

/// One physical trajectory with two independently drawn domains.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedEpisode {
    pub seed: u64,
    pub states: Vec<WorldState>,
    /// Controlled: the push applied before each transition. Uncontrolled: the
    /// single initial impulse applied during the first frame.
    pub actions: Vec<ActionPush>,
    pub domain_a: DomainParams,
    pub domain_b: DomainParams,
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn sample_domains(seed: u64, pool: &[TextureFamily], bodies: usize) -> Result<(DomainParams, DomainParams)> {
    let a = renderer::sample_domain(&mut stream(seed, 1), pool, bodies)?;
    let b = renderer::sample_domain(&mut stream(seed, 2), pool, bodies)?;
    Ok((a, b))
}

pub fn gen_uncontrolled_episode(
    scene: &SceneConfig,
    pool: &[TextureFamily],
    seed: u64,
    frames: usize,
) -> Result<PairedEpisode> {
    if frames < 2 {
        return Err(DatagenError::TooFewFrames { min: 2, got: frames });
    }
    let mut rng = stream(seed, 0);
    let initial = worldsim::sample_initial_state(&mut rng, scene)?;
    let impulse = worldsim::sample_initial_impulse(&mut rng, scene)?;
    let actions = vec![impulse];
    let states = replay(&initial, &actions, Paradigm::Uncontrolled, frames)?;
    let (domain_a, domain_b) = sample_domains(seed, pool, scene.body_count)?;
    Ok(PairedEpisode {
        seed,
        states,
        actions,
        domain_a,
        domain_b,
    })
}

pub fn gen_controlled_episode(
    scene: &SceneConfig,
    pool: &[TextureFamily],
    seed: u64,
    frames: usize,
) -> Result<PairedEpisode> {
    if frames < 2 {
        return Err(DatagenError::TooFewFrames { min: 2, got: frames });
    }
    let mut rng = stream(seed, 0);
    let initial = worldsim::sample_initial_state(&mut rng, scene)?;
    let actions: Vec<ActionPush> = (0..frames - 1)
        .map(|_| worldsim::sample_push(&mut rng, scene.force_range))
        .collect();
    let states = replay(&initial, &actions, Paradigm::Controlled, frames)?;
    let (domain_a, domain_b) = sample_domains(seed, pool, scene.body_count)?;
    Ok(PairedEpisode {
        seed,
        states,
        actions,
        domain_a,
        domain_b,
    })
}

/// Re-simulates `frames` states from `initial` under recorded actions.
pub fn replay(initial: &WorldState, actions: &[ActionPush], paradigm: Paradigm, frames: usize) -> Result<Vec<WorldState>> {
    let mut states = Vec::with_capacity(frames);
    states.push(initial.clone());
    for t in 0..frames.saturating_sub(1) {
        let action = match paradigm {
            Paradigm::Controlled => Some(actions.get(t).ok_or_else(|| {
                DatagenError::Invalid(format!("{} actions for {frames} frames", actions.len()))
            })?),
            Paradigm::Uncontrolled => actions.get(t).filter(|_| t == 0),
        };
        let next = worldsim::step(&states[t], action, worldsim::FRAME_DT)?;
        states.push(next);
    }
    Ok(states)
}

pub fn gen_episode(
    paradigm: Paradigm,
    scene: &SceneConfig,
    pool: &[TextureFamily],
    seed: u64,
    frames: usize,
) -> Result<PairedEpisode> {
    match paradigm {
        Paradigm::Uncontrolled => gen_uncontrolled_episode(scene, pool, seed, frames),
        Paradigm::Controlled => gen_controlled_episode(scene, pool, seed, frames),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub paradigm: Paradigm,
    pub split: Split,
    /// Texture families the episode domains were drawn from.
    pub family_pool: Vec<TextureFamily>,
    pub config_hash: [u8; 32],
    pub episodes: Vec<PairedEpisode>,
}

/// Everything needed to generate a dataset deterministically.
#[derive(Clone, Debug)]
pub struct DatasetSpec<'a> {
    pub paradigm: Paradigm,
    pub split: Split,
    pub scene: &'a SceneConfig,
    pub family_pool: &'a [TextureFamily],
    pub frames: usize,
    pub episodes: usize,
    pub first_seed: u64,
    pub config_hash: [u8; 32],
}

impl Dataset {
    pub fn generate(spec: &DatasetSpec) -> Result<Dataset> {
        if spec.episodes == 0 {
            return Err(DatagenError::Invalid("episode count must be positive".into()));
        }
        if spec.frames > u16::MAX as usize {
            return Err(DatagenError::Invalid(format!("{} frames exceed the format limit", spec.frames)));
        }
        let mut pool = spec.family_pool.to_vec();
        pool.sort();
        pool.dedup();
        let episodes = (0..spec.episodes as u64)
            .map(|i| gen_episode(spec.paradigm, spec.scene, &pool, spec.first_seed.wrapping_add(i), spec.frames))
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            paradigm: spec.paradigm,
            split: spec.split,
            family_pool: pool,
            config_hash: spec.config_hash,
            episodes,
        })
    }

    pub fn frames(&self) -> usize {
        self.episodes.first().map_or(0, |e| e.states.len())
    }

    pub fn body_count(&self) -> usize {
        self.episodes.first().map_or(0, |e| e.states[0].bodies.len())
    }

    pub fn seeds(&self) -> Vec<u64> {
        self.episodes.iter().map(|e| e.seed).collect()
    }

    /// Moves the last `fraction` of episodes (by seed order) into a validation split.
    pub fn split_validation(&self, fraction: f64) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&fraction) {
            return Err(DatagenError::Invalid(format!("validation fraction {fraction} outside [0, 1)")));
        }
        let mut episodes = self.episodes.clone();
        episodes.sort_by_key(|e| e.seed);
        let val_count = ((episodes.len() as f64) * fraction).round() as usize;
        if val_count == 0 || val_count >= episodes.len() {
            return Err(DatagenError::Invalid(format!(
                "validation fraction {fraction} of {} episodes leaves an empty split",
                episodes.len()
            )));
        }
        let val = episodes.split_off(episodes.len() - val_count);
        let make = |split, episodes| Dataset {
            paradigm: self.paradigm,
            split,
            family_pool: self.family_pool.clone(),
            config_hash: self.config_hash,
            episodes,
        };
        Ok((make(Split::Train, episodes), make(Split::Val, val)))
    }

    pub fn save<W: Write>(&self, out: W) -> Result<()> {
        let mut w = Writer(out);
        w.bytes(DATASET_MAGIC)?;
        w.u16(DATASET_VERSION)?;
        w.bytes(&self.config_hash)?;
        w.u8(self.paradigm.id())?;
        w.u8(self.split.id())?;
        w.u8(self.family_pool.iter().fold(0u8, |m, f| m | (1 << f.id())))?;
        w.u32(self.episodes.len() as u32)?;
        for ep in &self.episodes {
            w.u64(ep.seed)?;
            w.u16(ep.states.len() as u16)?;
            let first = &ep.states[0];
            w.u16(first.bodies.len() as u16)?;
            w.f64(first.frame_half_extent)?;
            w.f64(first.drag_coeff)?;
            w.f64(first.restitution)?;
            for s in &ep.states {
                for b in &s.bodies {
                    w.u8(b.shape.id())?;
                    for v in [b.size, b.position.x, b.position.y, b.velocity.x, b.velocity.y, b.mass] {
                        w.f64(v)?;
                    }
                }
            }
            w.domain(&ep.domain_a)?;
            w.domain(&ep.domain_b)?;
            w.u16(ep.actions.len() as u16)?;
            for a in &ep.actions {
                w.f64(a.force.x)?;
                w.f64(a.force.y)?;
            }
        }
        Ok(())
    }

    pub fn load<R: Read>(mut input: R) -> Result<Dataset> {
        let mut buf = Vec::new();
        input.read_to_end(&mut buf)?;
        let mut r = Reader { buf: &buf, pos: 0 };
        let magic = r.take(4)?;
        if magic != DATASET_MAGIC {
            return Err(DatagenError::Format(format!(
                "bad magic {:?}, expected \"CDRD\"",
                String::from_utf8_lossy(magic)
            )));
        }
        let version = r.u16()?;
        if version != DATASET_VERSION {
            return Err(DatagenError::Format(format!(
                "unsupported version {version}, expected {DATASET_VERSION}"
            )));
        }
        let config_hash: [u8; 32] = r.take(32)?.try_into().unwrap();
        let paradigm = Paradigm::from_id(r.u8()?).ok_or_else(|| DatagenError::Format("bad paradigm tag".into()))?;
        let split = Split::from_id(r.u8()?).ok_or_else(|| DatagenError::Format("bad split tag".into()))?;
        let mask = r.u8()?;
        let family_pool = TextureFamily::ALL
            .into_iter()
            .filter(|f| mask & (1 << f.id()) != 0)
            .collect();
        let count = r.u32()? as usize;
        let mut episodes = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let seed = r.u64()?;
            let frames = r.u16()? as usize;
            let body_count = r.u16()? as usize;
            let (frame_half_extent, drag_coeff, restitution) = (r.f64()?, r.f64()?, r.f64()?);
            let mut states = Vec::with_capacity(frames);
            for _ in 0..frames {
                let mut bodies = Vec::with_capacity(body_count);
                for _ in 0..body_count {
                    let shape = Shape::from_id(r.u8()?).ok_or_else(|| DatagenError::Format("bad shape tag".into()))?;
                    let v: Vec<f64> = (0..6).map(|_| r.f64()).collect::<Result<_>>()?;
                    bodies.push(Body {
                        shape,
                        size: v[0],
                        position: Vec2::new(v[1], v[2]),
                        velocity: Vec2::new(v[3], v[4]),
                        mass: v[5],
                    });
                }
                states.push(WorldState {
                    bodies,
                    frame_half_extent,
                    drag_coeff,
                    restitution,
                });
            }
            let domain_a = r.domain()?;
            let domain_b = r.domain()?;
            let action_count = r.u16()? as usize;
            let actions = (0..action_count)
                .map(|_| Ok(ActionPush::new(r.f64()?, r.f64()?)))
                .collect::<Result<_>>()?;
            episodes.push(PairedEpisode {
                seed,
                states,
                actions,
                domain_a,
                domain_b,
            });
        }
        if r.pos != buf.len() {
            return Err(DatagenError::Format(format!("{} trailing bytes", buf.len() - r.pos)));
        }
        let ds = Dataset {
            paradigm,
            split,
            family_pool,
            config_hash,
            episodes,
        };
        if ds.episodes.iter().any(|e| e.states.len() != ds.frames() || e.states.is_empty()) {
            return Err(DatagenError::Format("episode lengths differ".into()));
        }
        Ok(ds)
    }
}

struct Writer<W>(W);

impl<W: Write> Writer<W> {
    fn bytes(&mut self, b: &[u8]) -> io::Result<()> {
        self.0.write_all(b)
    }
    fn u8(&mut self, v: u8) -> io::Result<()> {
        self.bytes(&[v])
    }
    fn u16(&mut self, v: u16) -> io::Result<()> {
        self.bytes(&v.to_le_bytes())
    }
    fn u32(&mut self, v: u32) -> io::Result<()> {
        self.bytes(&v.to_le_bytes())
    }
    fn u64(&mut self, v: u64) -> io::Result<()> {
        self.bytes(&v.to_le_bytes())
    }
    fn f64(&mut self, v: f64) -> io::Result<()> {
        self.bytes(&v.to_le_bytes())
    }
    fn texture(&mut self, t: &TextureSpec) -> io::Result<()> {
        self.u8(t.family.id())?;
        for v in t.params {
            self.f64(v)?;
        }
        for c in t.palette.iter().flatten() {
            self.f64(*c)?;
        }
        Ok(())
    }
    fn domain(&mut self, d: &DomainParams) -> io::Result<()> {
        self.texture(&d.background)?;
        self.u16(d.body_textures.len() as u16)?;
        for t in &d.body_textures {
            self.texture(t)?;
        }
        self.f64(d.light)?;
        self.f64(d.pixel_noise_std)?;
        self.u64(d.noise_seed)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(DatagenError::Format(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn texture(&mut self) -> Result<TextureSpec> {
        let family = TextureFamily::from_id(self.u8()?).ok_or_else(|| DatagenError::Format("bad texture family".into()))?;
        let mut params = [0.0; 4];
        for p in &mut params {
            *p = self.f64()?;
        }
        let mut palette = [[0.0; 3]; 2];
        for c in palette.iter_mut().flatten() {
            *c = self.f64()?;
        }
        Ok(TextureSpec { family, params, palette })
    }
    fn domain(&mut self) -> Result<DomainParams> {
        let background = self.texture()?;
        let n = self.u16()? as usize;
        let body_textures = (0..n).map(|_| self.texture()).collect::<Result<_>>()?;
        Ok(DomainParams {
            background,
            body_textures,
            light: self.f64()?,
            pixel_noise_std: self.f64()?,
            noise_seed: self.u64()?,
        })
    }
}

/// Shape of the batches a training run consumes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchLayout {
    pub paradigm: Paradigm,
    /// Input frames per item (controlled uses 1).
    pub context: usize,
    /// Label frames per item (controlled uses 1).
    pub horizons: usize,
    /// Uncontrolled only: fraction of rows that share their episode with another row.
    pub within_sequence_fraction: f64,
    pub resolution: usize,
    /// Draw fresh domains for every batch item instead of the recorded ones.
    pub resample_domains: bool,
}

impl BatchLayout {
    pub fn controlled(resolution: usize) -> Self {
        Self {
            paradigm: Paradigm::Controlled,
            context: 1,
            horizons: 1,
            within_sequence_fraction: 0.0,
            resolution,
            resample_domains: false,
        }
    }

    /// Range of valid "current" frame indices `t` in an episode of `frames` states.
    fn t_range(&self, frames: usize) -> Option<(usize, usize)> {
        let lo = self.context - 1;
        let hi = frames.checked_sub(self.horizons + 1)?;
        (lo <= hi).then_some((lo, hi))
    }

    pub fn items_per_episode(&self, frames: usize) -> usize {
        self.t_range(frames).map_or(0, |(lo, hi)| hi - lo + 1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BatchItem {
    pub episode: usize,
    /// Index of the last input frame.
    pub t: usize,
}

/// Rendered observations for one gradient step.
#[derive(Clone, Debug)]
pub struct Batch {
    pub items: Vec<BatchItem>,
    /// `inputs[c][i]`: input frame `t − (context − 1) + c` of item `i`.
    pub inputs: Vec<Vec<Observation>>,
    /// Controlled: action applied between frames `t` and `t + 1`.
    pub actions: Vec<ActionPush>,
    /// `labels[k][i]`: frame `t + 1 + k` of item `i`.
    pub labels: Vec<Vec<Observation>>,
    pub input_domains: Vec<DomainParams>,
    pub label_domains: Vec<DomainParams>,
}

fn sample_items<R: Rng + ?Sized>(dataset: &Dataset, layout: &BatchLayout, rng: &mut R, n: usize) -> Result<Vec<BatchItem>> {
    let (lo, hi) = layout
        .t_range(dataset.frames())
        .ok_or(DatagenError::TooFewFrames {
            min: layout.context + layout.horizons,
            got: dataset.frames(),
        })?;
    let per_episode = hi - lo + 1;
    let episodes = dataset.episodes.len();
    let available = episodes * per_episode;
    if n == 0 || n > available {
        return Err(DatagenError::BatchTooLarge { requested: n, available });
    }
    let pairs = if layout.paradigm == Paradigm::Uncontrolled && per_episode >= 2 {
        ((n as f64 * layout.within_sequence_fraction) / 2.0).floor() as usize
    } else {
        0
    };
    let distinct = n - pairs;
    let mut items = Vec::with_capacity(n);
    if distinct <= episodes {
        let eps = index::sample(rng, episodes, distinct).into_vec();
        for (k, &e) in eps.iter().enumerate() {
            let t = rng.random_range(lo..=hi);
            items.push(BatchItem { episode: e, t });
            if k < pairs {
                // a second, different time step from the same episode
                let mut t2 = rng.random_range(lo..hi);
                if t2 >= t {
                    t2 += 1;
                }
                items.push(BatchItem { episode: e, t: t2 });
            }
        }
    } else {
        // more rows than episodes: draw without replacement over all transitions
        let picks = index::sample(rng, available, n).into_vec();
        items.extend(picks.into_iter().map(|p| BatchItem {
            episode: p / per_episode,
            t: lo + p % per_episode,
        }));
    }
    Ok(items)
}

/// Assembles a batch whose label domains follow `variant`.
pub fn build_batch<R: Rng + ?Sized>(
    dataset: &Dataset,
    variant: LossVariant,
    layout: &BatchLayout,
    rng: &mut R,
    n: usize,
) -> Result<Batch> {
    if dataset.paradigm != layout.paradigm {
        return Err(DatagenError::Invalid(format!(
            "{} dataset used with a {} batch layout",
            dataset.paradigm.name(),
            layout.paradigm.name()
        )));
    }
    let items = sample_items(dataset, layout, rng, n)?;
    let shared = match variant {
        LossVariant::SameDomain => Some(renderer::sample_domain(rng, &dataset.family_pool, dataset.body_count())?),
        _ => None,
    };
    let mut batch = Batch {
        inputs: vec![Vec::with_capacity(n); layout.context],
        actions: Vec::new(),
        labels: vec![Vec::with_capacity(n); layout.horizons],
        input_domains: Vec::with_capacity(n),
        label_domains: Vec::with_capacity(n),
        items: Vec::new(),
    };
    let bodies = dataset.body_count();
    for item in &items {
        let ep = &dataset.episodes[item.episode];
        let fresh = if layout.resample_domains && shared.is_none() {
            let a = renderer::sample_domain(rng, &dataset.family_pool, bodies)?;
            let b = renderer::sample_domain(rng, &dataset.family_pool, bodies)?;
            Some((a, b))
        } else {
            None
        };
        let (input_domain, label_domain) = match (&shared, &fresh, variant) {
            (Some(d), _, _) => (d, d),
            (None, Some((a, b)), LossVariant::Cdr) => (a, b),
            (None, Some((a, _)), _) => (a, a),
            (None, None, LossVariant::Cdr) => (&ep.domain_a, &ep.domain_b),
            (None, None, _) => (&ep.domain_a, &ep.domain_a),
        };
        for c in 0..layout.context {
            let frame = item.t + 1 + c - layout.context;
            batch.inputs[c].push(renderer::render(&ep.states[frame], input_domain, layout.resolution)?);
        }
        for k in 0..layout.horizons {
            batch.labels[k].push(renderer::render(&ep.states[item.t + 1 + k], label_domain, layout.resolution)?);
        }
        if layout.paradigm == Paradigm::Controlled {
            batch.actions.push(ep.actions[item.t]);
        }
        batch.input_domains.push(input_domain.clone());
        batch.label_domains.push(label_domain.clone());
    }
    batch.items = items;
    Ok(batch)
}

pub fn build_cdr_batch<R: Rng + ?Sized>(dataset: &Dataset, layout: &BatchLayout, rng: &mut R, n: usize) -> Result<Batch> {
    build_batch(dataset, LossVariant::Cdr, layout, rng, n)
}

pub fn build_naive_batch<R: Rng + ?Sized>(dataset: &Dataset, layout: &BatchLayout, rng: &mut R, n: usize) -> Result<Batch> {
    build_batch(dataset, LossVariant::Naive, layout, rng, n)
}

pub fn build_same_domain_batch<R: Rng + ?Sized>(
    dataset: &Dataset,
    layout: &BatchLayout,
    rng: &mut R,
    n: usize,
) -> Result<Batch> {
    build_batch(dataset, LossVariant::SameDomain, layout, rng, n)
}

/// A random frame from each of `count` episodes, in episode order.
pub fn sample_frames<R: Rng + ?Sized>(dataset: &Dataset, rng: &mut R, count: usize) -> Result<Vec<(usize, usize)>> {
    let episodes = dataset.episodes.len();
    let frames = dataset.frames();
    let available = episodes * frames;
    if count > available {
        return Err(DatagenError::BatchTooLarge {
            requested: count,
            available,
        });
    }
    if count <= episodes {
        let mut eps = index::sample(rng, episodes, count).into_vec();
        eps.sort_unstable();
        Ok(eps.into_iter().map(|e| (e, rng.random_range(0..frames))).collect())
    } else {
        let mut picks: Vec<usize> = (0..available).collect();
        picks.shuffle(rng);
        picks.truncate(count);
        picks.sort_unstable();
        Ok(picks.into_iter().map(|p| (p / frames, p % frames)).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pool() -> Vec<TextureFamily> {
        TextureFamily::ALL[..6].to_vec()
    }

    fn small_dataset(paradigm: Paradigm, episodes: usize, frames: usize) -> Dataset {
        let scene = match paradigm {
            Paradigm::Controlled => SceneConfig::controlled_default(),
            Paradigm::Uncontrolled => SceneConfig::uncontrolled_default(),
        };
        Dataset::generate(&DatasetSpec {
            paradigm,
            split: Split::Train,
            scene: &scene,
            family_pool: &pool(),
            frames,
            episodes,
            first_seed: 100,
            config_hash: [7; 32],
        })
        .unwrap()
    }

    #[test]
    fn episode_lengths() {
        let u = gen_uncontrolled_episode(&SceneConfig::uncontrolled_default(), &pool(), 1, 30).unwrap();
        assert_eq!(u.states.len(), 30);
        let c = gen_controlled_episode(&SceneConfig::controlled_default(), &pool(), 1, 15).unwrap();
        assert_eq!(c.states.len(), 15);
        assert_eq!(c.actions.len(), 14);
        assert!(gen_controlled_episode(&SceneConfig::controlled_default(), &pool(), 1, 1).is_err());
    }

    #[test]
    fn episodes_are_deterministic_and_replayable() {
        let scene = SceneConfig::controlled_default();
        let a = gen_controlled_episode(&scene, &pool(), 9, 15).unwrap();
        assert_eq!(a, gen_controlled_episode(&scene, &pool(), 9, 15).unwrap());
        let replayed = replay(&a.states[0], &a.actions, Paradigm::Controlled, 15).unwrap();
        assert_eq!(replayed, a.states);
        let u = gen_uncontrolled_episode(&SceneConfig::uncontrolled_default(), &pool(), 9, 30).unwrap();
        assert_eq!(replay(&u.states[0], &u.actions, Paradigm::Uncontrolled, 30).unwrap(), u.states);
    }

    #[test]
    fn zero_force_leaves_agent_still() {
        let scene = SceneConfig {
            force_range: [0.0, 0.0],
            ..SceneConfig::controlled_default()
        };
        let ep = gen_controlled_episode(&scene, &pool(), 3, 15).unwrap();
        for s in &ep.states {
            assert_eq!(s.bodies[0].position, ep.states[0].bodies[0].position);
        }
    }

    #[test]
    fn round_trip_and_corruption() {
        let ds = small_dataset(Paradigm::Controlled, 4, 5);
        let mut buf = Vec::new();
        ds.save(&mut buf).unwrap();
        let back = Dataset::load(&buf[..]).unwrap();
        assert_eq!(back, ds);
        let ep = &ds.episodes[2];
        let before = renderer::render(&ep.states[3], &ep.domain_b, 16).unwrap();
        let after = renderer::render(&back.episodes[2].states[3], &back.episodes[2].domain_b, 16).unwrap();
        assert_eq!(before.pixels, after.pixels);

        let mut bad = buf.clone();
        bad[1] = b'X';
        let err = Dataset::load(&bad[..]).unwrap_err().to_string();
        assert!(err.contains("\"CDRD\""), "{err}");
        let mut bad = buf.clone();
        bad[4] = 9;
        assert!(Dataset::load(&bad[..]).unwrap_err().to_string().contains("version"));
        let err = Dataset::load(&buf[..buf.len() - 1]).unwrap_err().to_string();
        assert!(err.contains("truncated"), "{err}");
    }

    #[test]
    fn validation_split_takes_highest_seeds() {
        let ds = small_dataset(Paradigm::Controlled, 10, 3);
        let (train, val) = ds.split_validation(0.1).unwrap();
        assert_eq!(train.episodes.len(), 9);
        assert_eq!(val.seeds(), vec![109]);
        assert_eq!(val.split, Split::Val);
        assert!(ds.split_validation(0.0).is_err());
    }

    #[test]
    fn split_seed_ranges_are_disjoint() {
        let train = split_seed_base(5, Split::Train);
        let test = split_seed_base(5, Split::Test);
        assert!(test - train >= 1 << 32);
        assert_ne!(split_seed_base(6, Split::Train), train);
    }

    #[test]
    fn cdr_batch_pairs_states_across_domains() {
        let ds = small_dataset(Paradigm::Controlled, 8, 4);
        let layout = BatchLayout::controlled(16);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = build_cdr_batch(&ds, &layout, &mut rng, 5).unwrap();
        assert_eq!(b.inputs[0].len(), 5);
        let mut eps: Vec<usize> = b.items.iter().map(|i| i.episode).collect();
        eps.sort_unstable();
        eps.dedup();
        assert_eq!(eps.len(), 5);
        for (i, item) in b.items.iter().enumerate() {
            let ep = &ds.episodes[item.episode];
            assert_eq!(b.input_domains[i], ep.domain_a);
            assert_eq!(b.label_domains[i], ep.domain_b);
            assert_ne!(b.input_domains[i], b.label_domains[i]);
            assert_eq!(b.actions[i], ep.actions[item.t]);
            let expect = renderer::render(&ep.states[item.t + 1], &ep.domain_b, 16).unwrap();
            assert_eq!(b.labels[0][i], expect);
        }
        let naive = build_naive_batch(&ds, &layout, &mut rng, 1).unwrap();
        assert_eq!(naive.input_domains, naive.label_domains);
        assert!(build_cdr_batch(&ds, &layout, &mut rng, 8 * 3 + 1).is_err());
    }

    #[test]
    fn same_domain_batch_shares_one_domain() {
        let ds = small_dataset(Paradigm::Controlled, 6, 4);
        let layout = BatchLayout::controlled(16);
        let b = build_same_domain_batch(&ds, &layout, &mut ChaCha8Rng::seed_from_u64(2), 6).unwrap();
        assert!(b.input_domains.iter().chain(&b.label_domains).all(|d| *d == b.input_domains[0]));
        let mut eps: Vec<usize> = b.items.iter().map(|i| i.episode).collect();
        eps.sort_unstable();
        eps.dedup();
        assert_eq!(eps.len(), 6);
    }

    #[test]
    fn uncontrolled_layout_windows() {
        let ds = small_dataset(Paradigm::Uncontrolled, 6, 12);
        let layout = BatchLayout {
            paradigm: Paradigm::Uncontrolled,
            context: 3,
            horizons: 4,
            within_sequence_fraction: 0.5,
            resolution: 16,
            resample_domains: false,
        };
        let b = build_cdr_batch(&ds, &layout, &mut ChaCha8Rng::seed_from_u64(3), 8).unwrap();
        assert_eq!(b.inputs.len(), 3);
        assert_eq!(b.labels.len(), 4);
        // 8 rows, 2 within-sequence pairs → 6 distinct episodes
        let mut eps: Vec<usize> = b.items.iter().map(|i| i.episode).collect();
        eps.sort_unstable();
        eps.dedup();
        assert_eq!(eps.len(), 6);
        let mut unique = b.items.clone();
        unique.sort();
        unique.dedup();
        assert_eq!(unique.len(), 8);
        for (i, item) in b.items.iter().enumerate() {
            assert!(item.t >= 2 && item.t + 4 < 12);
            let ep = &ds.episodes[item.episode];
            let first = renderer::render(&ep.states[item.t - 2], &ep.domain_a, 16).unwrap();
            assert_eq!(b.inputs[0][i], first);
        }
        let wrong = BatchLayout::controlled(16);
        assert!(build_cdr_batch(&ds, &wrong, &mut ChaCha8Rng::seed_from_u64(3), 2).is_err());
    }
}
