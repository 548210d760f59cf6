//! Fixed-capacity experience replay with random-crop augmentation at sample time.

use rand::Rng;

use crate::blockmdp::{Observation, FRAME_STACK};
use crate::error::{DarlError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub obs: Observation,
    pub action: [f64; 2],
    pub reward: f64,
    pub next_obs: Observation,
    pub done: bool,
    pub domain_id: usize,
}

/// The next observation, stored as only its newest frame when it is the
/// one-step shift of `obs` (the usual case).
#[derive(Clone, Debug)]
enum Next {
    Shifted(Vec<u8>),
    Full(Vec<u8>),
}

#[derive(Clone, Debug)]
struct Slot {
    obs: Vec<u8>,
    next: Next,
    action: [f64; 2],
    reward: f64,
    done: bool,
    domain_id: usize,
}

/// Sampled, cropped minibatch. Pixel tensors are `[B, 3·C, crop, crop]` in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub size: usize,
    pub obs_shape: [usize; 3],
    pub obs: Vec<f64>,
    pub next_obs: Vec<f64>,
    pub actions: Vec<f64>,
    pub rewards: Vec<f64>,
    pub dones: Vec<f64>,
    pub domain_ids: Vec<usize>,
}

impl Batch {
    pub fn pixel_shape(&self) -> [usize; 4] {
        [self.size, self.obs_shape[0], self.obs_shape[1], self.obs_shape[2]]
    }
}

#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    n_domains: usize,
    storage: Vec<Slot>,
    write_idx: usize,
    obs_shape: Option<[usize; 3]>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, n_domains: usize) -> Result<Self> {
        if capacity == 0 || n_domains == 0 {
            return Err(DarlError::Config("replay capacity and domain count must be positive".into()));
        }
        Ok(Self {
            capacity,
            n_domains,
            storage: Vec::new(),
            write_idx: 0,
            obs_shape: None,
        })
    }

    pub fn len(&self) -> usize {
        self.storage.len()
    }

    pub fn is_empty(&self) -> bool {
        self.storage.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn add(&mut self, t: Transition) -> Result<()> {
        if t.obs.shape != t.next_obs.shape || t.obs.frames.len() != t.next_obs.frames.len() {
            return Err(DarlError::dim(
                "replay add",
                format!("obs {:?} vs next_obs {:?}", t.obs.shape, t.next_obs.shape),
            ));
        }
        if let Some(shape) = self.obs_shape {
            if shape != t.obs.shape {
                return Err(DarlError::dim("replay add", format!("obs {:?} vs buffer {shape:?}", t.obs.shape)));
            }
        }
        if t.domain_id >= self.n_domains {
            return Err(DarlError::LabelOutOfRange {
                label: t.domain_id,
                n_domains: self.n_domains,
            });
        }
        self.obs_shape = Some(t.obs.shape);
        let frame = t.obs.frames.len() / FRAME_STACK;
        let next = if t.next_obs.frames[..frame * (FRAME_STACK - 1)] == t.obs.frames[frame..] {
            Next::Shifted(t.next_obs.newest().to_vec())
        } else {
            Next::Full(t.next_obs.frames)
        };
        let slot = Slot {
            obs: t.obs.frames,
            next,
            action: t.action,
            reward: t.reward,
            done: t.done,
            domain_id: t.domain_id,
        };
        if self.storage.len() < self.capacity {
            self.storage.push(slot);
        } else {
            self.storage[self.write_idx] = slot;
        }
        self.write_idx = (self.write_idx + 1) % self.capacity;
        Ok(())
    }

    fn next_frames(&self, slot: &Slot) -> Vec<u8> {
        match &slot.next {
            Next::Full(f) => f.clone(),
            Next::Shifted(newest) => {
                let frame = slot.obs.len() / FRAME_STACK;
                let mut f = slot.obs[frame..].to_vec();
                f.extend_from_slice(newest);
                f
            }
        }
    }

    /// The transition at ring index `i` (oldest surviving entry first once full).
    pub fn get(&self, i: usize) -> Option<Transition> {
        if i >= self.storage.len() {
            return None;
        }
        let idx = if self.storage.len() < self.capacity {
            i
        } else {
            (self.write_idx + i) % self.capacity
        };
        let s = &self.storage[idx];
        let shape = self.obs_shape.expect("non-empty buffer has a shape");
        Some(Transition {
            obs: Observation {
                frames: s.obs.clone(),
                shape,
                domain_id: s.domain_id,
            },
            action: s.action,
            reward: s.reward,
            next_obs: Observation {
                frames: self.next_frames(s),
                shape,
                domain_id: s.domain_id,
            },
            done: s.done,
            domain_id: s.domain_id,
        })
    }

    /// Uniform sampling with replacement; obs and next_obs get independent
    /// crop offsets unless `shared_crop` is set.
    pub fn sample(&self, batch: usize, crop_hw: usize, shared_crop: bool, rng: &mut impl Rng) -> Result<Batch> {
        if self.storage.len() < batch || batch == 0 {
            return Err(DarlError::Underfull {
                size: self.storage.len(),
                batch,
            });
        }
        let shape = self.obs_shape.expect("non-empty buffer has a shape");
        if crop_hw == 0 || crop_hw > shape[1] || crop_hw > shape[2] {
            return Err(DarlError::dim("replay sample", format!("crop {crop_hw} of frames {shape:?}")));
        }
        let per = shape[0] * crop_hw * crop_hw;
        let mut out = Batch {
            size: batch,
            obs_shape: [shape[0], crop_hw, crop_hw],
            obs: vec![0.0; batch * per],
            next_obs: vec![0.0; batch * per],
            actions: Vec::with_capacity(batch * 2),
            rewards: Vec::with_capacity(batch),
            dones: Vec::with_capacity(batch),
            domain_ids: Vec::with_capacity(batch),
        };
        let max_y = shape[1] - crop_hw;
        let max_x = shape[2] - crop_hw;
        for b in 0..batch {
            let s = &self.storage[rng.gen_range(0..self.storage.len())];
            let off = (rng.gen_range(0..=max_y), rng.gen_range(0..=max_x));
            let next_off = if shared_crop {
                off
            } else {
                (rng.gen_range(0..=max_y), rng.gen_range(0..=max_x))
            };
            crop_into(&s.obs, shape, off, crop_hw, &mut out.obs[b * per..(b + 1) * per]);
            let next = self.next_frames(s);
            crop_into(&next, shape, next_off, crop_hw, &mut out.next_obs[b * per..(b + 1) * per]);
            out.actions.extend_from_slice(&s.action);
            out.rewards.push(s.reward);
            out.dones.push(if s.done { 1.0 } else { 0.0 });
            out.domain_ids.push(s.domain_id);
        }
        Ok(out)
    }

    pub fn domain_label_histogram(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_domains];
        for s in &self.storage {
            counts[s.domain_id] += 1;
        }
        counts
    }
}

/// Copies the `crop × crop` window at `(top, left)` of every channel, scaled to `[0, 1]`.
pub fn crop_into(frames: &[u8], shape: [usize; 3], (top, left): (usize, usize), crop: usize, out: &mut [f64]) {
    let [c, h, w] = shape;
    assert!(top + crop <= h && left + crop <= w, "crop window out of bounds");
    for ch in 0..c {
        for y in 0..crop {
            let src = &frames[(ch * h + top + y) * w + left..][..crop];
            let dst = &mut out[(ch * crop + y) * crop..][..crop];
            for (d, &p) in dst.iter_mut().zip(src) {
                *d = p as f64 / 255.0;
            }
        }
    }
}

/// Deterministic center crop used at evaluation time.
pub fn center_crop(obs: &Observation, crop: usize) -> Vec<f64> {
    let [c, h, w] = obs.shape;
    let mut out = vec![0.0; c * crop * crop];
    crop_into(&obs.frames, obs.shape, ((h - crop) / 2, (w - crop) / 2), crop, &mut out);
    out
}
