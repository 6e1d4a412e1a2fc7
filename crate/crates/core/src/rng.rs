//! Addressable random streams.
//!
//! Every stochastic site (weight init, expert init, dropout masks, data
//! generation, shuffling) draws from its own ChaCha8 stream. The 256-bit
//! key is derived from the run seed with `SeedableRng::seed_from_u64`
//! (PCG32 expansion) and the 64-bit ChaCha stream id encodes the site, so a
//! site's numbers never depend on how many draws other sites made.
//!
//! Stream id layout: `tag:8 | major:28 | minor:28`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::Scalar;

/// Named stochastic sites.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Site {
    /// Stand-alone matrices drawn through `gaussian_init`.
    Plain,
    /// Frozen backbone tensor `tensor` of block `layer`.
    Backbone { layer: u32, tensor: u32 },
    Head,
    ExpertInit { layer: u32, expert: u32 },
    Dropout { step: u64, layer: u32 },
    DeltaDropout { step: u64, layer: u32 },
    /// Random fixed-pattern allocation.
    Pattern { attempt: u32 },
    TaskTemplate { class: u32 },
    TaskSample { split: u32, index: u32 },
    Shuffle { epoch: u32 },
}

const FIELD: u64 = (1 << 28) - 1;

impl Site {
    fn stream_id(self) -> u64 {
        let (tag, major, minor) = match self {
            Site::Plain => (1, 0, 0),
            Site::Backbone { layer, tensor } => (2, layer as u64, tensor as u64),
            Site::Head => (3, 0, 0),
            Site::ExpertInit { layer, expert } => (4, layer as u64, expert as u64),
            Site::Dropout { step, layer } => (5, step, layer as u64),
            Site::DeltaDropout { step, layer } => (6, step, layer as u64),
            Site::Pattern { attempt } => (7, attempt as u64, 0),
            Site::TaskTemplate { class } => (8, class as u64, 0),
            Site::TaskSample { split, index } => (9, split as u64, index as u64),
            Site::Shuffle { epoch } => (10, epoch as u64, 0),
        };
        debug_assert!(major <= FIELD && minor <= FIELD, "stream address overflow");
        (tag << 56) | ((major & FIELD) << 28) | (minor & FIELD)
    }
}

/// Opens the stream for `site` under `seed`.
pub fn stream(seed: u64, site: Site) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(site.stream_id());
    rng
}

pub fn normal<T: Scalar, R: Rng + ?Sized>(rng: &mut R, std: T) -> T {
    let z: f64 = StandardNormal.sample(rng);
    T::of(z) * std
}

/// Uniform draw in `[0, 1)`.
pub fn uniform<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.random::<f64>()
}
